//! Binary checkpoints.
//!
//! Layout, all integers little-endian, strings as `u32` length + UTF-8:
//!
//! ```text
//! "AFCK" | u32 version | str preset | str variant | u32 epoch | u64 step
//! | f32 scale_train | f32 scale_adv
//! | u32 count | tensor records (parameters, then BN running stats)
//! | str optimizer | f32 momentum | u64 optimizer steps
//! | u32 count | tensor records (first moments, then second moments)
//! ```
//!
//! Tensor records are `str name | u32 rank | u32 dims... | f32 data...`.

use std::fs;
use std::io::{Cursor, ErrorKind, Read, Write};
use std::path::Path;

use super::optim::{Optimizer, OptimizerKind};
use super::train::TrainState;
use super::{Model, Preset, Variant};
use crate::error::{Error, Result};
use crate::tensor::{read_str, read_u32, read_u64, write_str, Tensor};

pub const MAGIC: &[u8; 4] = b"AFCK";
pub const VERSION: u32 = 1;

fn io_to_ckpt(e: std::io::Error) -> Error {
    match e.kind() {
        ErrorKind::UnexpectedEof => Error::Checkpoint("file is truncated".into()),
        _ => Error::Checkpoint(e.to_string()),
    }
}

fn write_records<W: Write>(w: &mut W, records: &[(String, &Tensor)]) -> std::io::Result<()> {
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    for (name, t) in records {
        t.write_record(name, w)?;
    }
    Ok(())
}

pub fn encode(state: &TrainState) -> Vec<u8> {
    let mut w = Vec::new();
    let m = &state.model;
    let mut write = || -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_str(&mut w, m.preset().tag())?;
        write_str(&mut w, state.variant.tag())?;
        w.write_all(&state.epoch.to_le_bytes())?;
        w.write_all(&state.step.to_le_bytes())?;
        w.write_all(&m.classifier.scale_train.to_le_bytes())?;
        w.write_all(&m.classifier.scale_adv.to_le_bytes())?;
        let mut tensors = m.params();
        tensors.extend(m.buffers());
        write_records(&mut w, &tensors)?;

        let opt = &state.optimizer;
        write_str(&mut w, opt.kind.tag())?;
        w.write_all(&opt.momentum.to_le_bytes())?;
        w.write_all(&opt.steps.to_le_bytes())?;
        let names: Vec<String> = m.params().into_iter().map(|(n, _)| n).collect();
        let mut moments: Vec<(String, &Tensor)> = Vec::new();
        for (n, t) in names.iter().zip(&opt.first) {
            moments.push((format!("first.{n}"), t));
        }
        for (n, t) in names.iter().zip(&opt.second) {
            moments.push((format!("second.{n}"), t));
        }
        write_records(&mut w, &moments)
    };
    write().expect("writing to a Vec cannot fail");
    w
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(state)).map_err(|e| Error::io(path, e))
}

struct Header {
    preset: Preset,
    variant: Variant,
    epoch: u32,
    step: u64,
    scale_train: f32,
    scale_adv: f32,
}

fn read_f32<R: Read>(r: &mut R) -> std::io::Result<f32> {
    Ok(f32::from_bits(read_u32(r)?))
}

fn read_records<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    let n = read_u32(r).map_err(io_to_ckpt)?;
    (0..n)
        .map(|_| Tensor::read_record(r).map_err(io_to_ckpt))
        .collect()
}

struct Decoded {
    header: Header,
    tensors: Vec<(String, Tensor)>,
    opt_kind: OptimizerKind,
    momentum: f32,
    opt_steps: u64,
    moments: Vec<(String, Tensor)>,
}

fn decode(bytes: &[u8]) -> Result<Decoded> {
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_to_ckpt)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r).map_err(io_to_ckpt)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let preset = Preset::from_tag(&read_str(&mut r).map_err(io_to_ckpt)?)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let variant: Variant = read_str(&mut r)
        .map_err(io_to_ckpt)?
        .parse()
        .map_err(|e: Error| Error::Checkpoint(e.to_string()))?;
    let epoch = read_u32(&mut r).map_err(io_to_ckpt)?;
    let step = read_u64(&mut r).map_err(io_to_ckpt)?;
    let scale_train = read_f32(&mut r).map_err(io_to_ckpt)?;
    let scale_adv = read_f32(&mut r).map_err(io_to_ckpt)?;
    let tensors = read_records(&mut r)?;
    let opt_kind = OptimizerKind::from_tag(&read_str(&mut r).map_err(io_to_ckpt)?)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let momentum = read_f32(&mut r).map_err(io_to_ckpt)?;
    let opt_steps = read_u64(&mut r).map_err(io_to_ckpt)?;
    let moments = read_records(&mut r)?;
    if (r.position() as usize) != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the optimizer records",
            bytes.len() - r.position() as usize
        )));
    }
    Ok(Decoded {
        header: Header {
            preset,
            variant,
            epoch,
            step,
            scale_train,
            scale_adv,
        },
        tensors,
        opt_kind,
        momentum,
        opt_steps,
        moments,
    })
}

/// Copies `records` into `targets` after checking names and shapes.
fn assign(targets: Vec<(String, &mut Tensor)>, records: Vec<(String, Tensor)>) -> Result<()> {
    if targets.len() != records.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensor records, found {}",
            targets.len(),
            records.len()
        )));
    }
    for ((name, dst), (rname, src)) in targets.into_iter().zip(records) {
        if name != rname {
            return Err(Error::Checkpoint(format!("expected record `{name}`, found `{rname}`")));
        }
        if dst.shape() != src.shape() {
            return Err(Error::mismatch("checkpoint tensor", dst.shape(), src.shape()));
        }
        *dst = src;
    }
    Ok(())
}

fn fill_state(state: &mut TrainState, d: Decoded) -> Result<()> {
    let names: Vec<String> = state
        .model
        .params()
        .into_iter()
        .chain(state.model.buffers())
        .map(|(n, _)| n)
        .collect();
    let (mut targets, buffers) = state.model.tensors_mut();
    targets.extend(buffers);
    // Shapes are checked before names so that a preset mismatch surfaces as
    // a shape error.
    for (dst, (_, src)) in targets.iter().zip(&d.tensors) {
        if dst.shape() != src.shape() {
            return Err(Error::mismatch("checkpoint tensor", dst.shape(), src.shape()));
        }
    }
    assign(names.iter().cloned().zip(targets).collect(), d.tensors)?;

    let n_params = state.model.params().len();
    let mut opt = Optimizer::new(d.opt_kind, d.momentum, &[])?;
    opt.steps = d.opt_steps;
    let expected_moments = if d.opt_kind == OptimizerKind::Adam { 2 * n_params } else { n_params };
    if d.moments.len() != expected_moments {
        return Err(Error::Checkpoint(format!(
            "expected {expected_moments} optimizer records, found {}",
            d.moments.len()
        )));
    }
    let params = state.model.params();
    for (i, (rname, t)) in d.moments.into_iter().enumerate() {
        let (prefix, k) = if i < n_params { ("first", i) } else { ("second", i - n_params) };
        let (pname, p) = &params[k];
        if rname != format!("{prefix}.{pname}") {
            return Err(Error::Checkpoint(format!("unexpected optimizer record `{rname}`")));
        }
        if t.shape() != p.shape() {
            return Err(Error::mismatch("optimizer moment", p.shape(), t.shape()));
        }
        if i < n_params {
            opt.first.push(t);
        } else {
            opt.second.push(t);
        }
    }
    state.optimizer = opt;
    state.epoch = d.header.epoch;
    state.step = d.header.step;
    state.variant = d.header.variant;
    state.model.classifier.scale_train = d.header.scale_train;
    state.model.classifier.scale_adv = d.header.scale_adv;
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn decode_state(bytes: &[u8]) -> Result<TrainState> {
    let d = decode(bytes)?;
    let h = &d.header;
    let n_classes = d
        .tensors
        .iter()
        .find(|(n, _)| n == "classifier.weight")
        .map(|(_, t)| t.shape()[0])
        .ok_or_else(|| Error::Checkpoint("missing classifier.weight".into()))?;
    let model = Model::new(h.preset, h.variant, n_classes, h.scale_train, h.scale_adv, 0)?;
    let mut state = TrainState {
        model,
        variant: h.variant,
        optimizer: Optimizer::new(d.opt_kind, d.momentum, &[])?,
        epoch: 0,
        step: 0,
    };
    fill_state(&mut state, d)?;
    Ok(state)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    decode_state(&read_file(path)?)
}

/// Loads into an existing state, which fixes the expected architecture.
pub fn load_checkpoint_into(state: &mut TrainState, path: &Path) -> Result<()> {
    let d = decode(&read_file(path)?)?;
    let preset = d.header.preset;
    let mut loaded = state.clone();
    fill_state(&mut loaded, d)?;
    if preset != loaded.model.preset() {
        return Err(Error::Checkpoint(format!(
            "checkpoint preset {} does not match model preset {}",
            preset.tag(),
            loaded.model.preset().tag()
        )));
    }
    *state = loaded;
    Ok(())
}
