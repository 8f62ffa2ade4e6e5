//! Heatmaps of the mask gradient `ΔM` on the conv5 grid.
//!
//! Each image yields `<stem>_delta.csv` (raw signed `ΔM`), `<stem>_delta.pgm`
//! (a grayscale rendering) and `adv_mask/<stem>.csv` (`M_a`). CSV values use
//! the shortest representation that parses back to the same `f32`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::adversarial::{adversarial_mask, mask_gradient_detailed, AdversarialConfig, Mask};
use crate::nn::cosine::CosineClassifier;
use crate::data::ppm::{self, Image8};
use crate::data::stack;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::Mode;
use crate::tensor::Tensor;

/// Gray level of zero in renderings. Extremes map to 1 and 255.
pub const ZERO_LEVEL: u8 = 128;

/// Maps whose peak is below this fraction of the Cauchy–Schwarz bound
/// `‖g‖·maxᵢⱼ‖X_ij‖` render as flat gray: they carry no spatial signal.
const RELATIVE_FLOOR: f32 = 1e-4;

/// Signed `ΔM` plus the normalization used to render it.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    /// `[H, W]`
    pub values: Tensor,
    /// Divisor mapping values into `[-1, 1]`; zero renders flat gray.
    pub scale: f32,
}

impl AttentionMap {
    /// Symmetric normalization around zero: `scale = max(max|ΔM|, floor)`
    /// with `floor = RELATIVE_FLOOR · bound`.
    pub fn new(values: Tensor, bound: f32) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::InvalidArgument(format!(
                "attention map must be rank 2, got {:?}",
                values.shape()
            )));
        }
        values.check_finite("attention map")?;
        let peak = values.data().iter().fold(0f32, |m, v| m.max(v.abs()));
        let floor = RELATIVE_FLOOR * bound.max(0.0);
        let scale = if peak < floor { 0.0 } else { peak };
        Ok(AttentionMap { values, scale })
    }

    /// Gray level of one value: most negative toward 1, most positive
    /// toward 255, zero at [`ZERO_LEVEL`].
    pub fn level(&self, v: f32) -> u8 {
        if self.scale == 0.0 {
            return ZERO_LEVEL;
        }
        let t = (v / self.scale).clamp(-1.0, 1.0);
        (ZERO_LEVEL as f32 + 127.0 * t).round() as u8
    }

    /// Renders with each cell enlarged to `upscale × upscale` pixels.
    pub fn render(&self, upscale: usize) -> Image8 {
        let (h, w) = (self.values.shape()[0], self.values.shape()[1]);
        let u = upscale.max(1);
        let mut pixels = Vec::with_capacity(h * w * u * u);
        for i in 0..h * u {
            for j in 0..w * u {
                pixels.push(self.level(self.values.data()[(i / u) * w + j / u]));
            }
        }
        Image8 {
            width: w * u,
            height: h * u,
            channels: 1,
            pixels,
        }
    }
}

pub fn mask_csv(values: &Tensor) -> String {
    let w = values.shape()[1];
    let mut out = String::new();
    for row in values.data().chunks(w) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        let _ = writeln!(out, "{}", cells.join(","));
    }
    out
}

pub fn read_mask_csv(path: &Path) -> Result<Tensor> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let mut data = Vec::new();
    let mut width = None;
    let mut height = 0;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let row = line
            .split(',')
            .map(|c| c.trim().parse::<f32>().map_err(|_| bad(format!("bad value `{c}`"))))
            .collect::<Result<Vec<_>>>()?;
        if *width.get_or_insert(row.len()) != row.len() {
            return Err(bad("ragged rows".into()));
        }
        data.extend(row);
        height += 1;
    }
    let width = width.ok_or_else(|| bad("empty mask".into()))?;
    Tensor::from_vec(&[height, width], data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionFiles {
    pub delta_csv: PathBuf,
    pub delta_pgm: PathBuf,
    pub adv_mask_csv: PathBuf,
    pub map: AttentionMap,
    pub adversarial_mask: Mask,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `ΔM` as a renderable map and `M_a` for one `[C, H, W]` block of feature
/// maps.
pub fn attention_map(
    maps: &Tensor,
    clf: &CosineClassifier,
    cfg: &AdversarialConfig,
) -> Result<(AttentionMap, Mask)> {
    let mg = mask_gradient_detailed(maps, clf, cfg)?;
    let (c, hw) = (maps.shape()[0], maps.shape()[1] * maps.shape()[2]);
    let x = maps.data();
    let max_col = (0..hw)
        .map(|p| (0..c).map(|ch| (x[ch * hw + p] as f64).powi(2)).sum::<f64>())
        .fold(0f64, f64::max)
        .sqrt();
    let g_norm = mg.feature_grad.iter().map(|v| v * v).sum::<f64>().sqrt();
    let adv = adversarial_mask(&mg.mask, cfg)?;
    let map = AttentionMap::new(mg.mask.values().clone(), (g_norm * max_col) as f32)?;
    Ok((map, adv))
}

/// Computes `ΔM` and `M_a` for each named `[3, S, S]` image and writes the
/// three files per image under `out_dir`.
pub fn export_attention(
    model: &Model,
    images: &[(String, Tensor)],
    cfg: &AdversarialConfig,
    out_dir: &Path,
    upscale: usize,
) -> Result<Vec<AttentionFiles>> {
    cfg.validate()?;
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let mask_dir = out_dir.join("adv_mask");
    fs::create_dir_all(&mask_dir).map_err(|e| Error::io(&mask_dir, e))?;
    let refs: Vec<&Tensor> = images.iter().map(|(_, t)| t).collect();
    let maps = model.forward_low(&stack(&refs)?, Mode::Eval)?;
    let per: Vec<usize> = maps.shape()[1..].to_vec();
    let sample = per.iter().product::<usize>();

    let mut out = Vec::with_capacity(images.len());
    for (b, (stem, _)) in images.iter().enumerate() {
        let x = Tensor::from_vec(&per, maps.data()[b * sample..(b + 1) * sample].to_vec())?;
        let (map, adversarial_mask) = attention_map(&x, &model.classifier, cfg)?;
        let delta_csv = out_dir.join(format!("{stem}_delta.csv"));
        let delta_pgm = out_dir.join(format!("{stem}_delta.pgm"));
        let adv_mask_csv = mask_dir.join(format!("{stem}.csv"));
        write_text(&delta_csv, &mask_csv(&map.values))?;
        ppm::write(&delta_pgm, &map.render(upscale))?;
        write_text(&adv_mask_csv, &mask_csv(adversarial_mask.values()))?;
        out.push(AttentionFiles {
            delta_csv,
            delta_pgm,
            adv_mask_csv,
            map,
            adversarial_mask,
        });
    }
    Ok(out)
}
