//! Datasets with disjoint train/val/test class splits.
//!
//! On disk a dataset is `root/{train,val,test}/<class>/<image>.ppm` plus a
//! `manifest.txt` with one `split<TAB>class<TAB>count` line per class.
//! Images are `[3, S, S]` tensors with values in `[0, 1]`.

pub mod ppm;
pub mod synth;

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub use synth::{generate_synthetic, SynthSpec};

pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

impl SplitKind {
    pub const ALL: [SplitKind; 3] = [SplitKind::Train, SplitKind::Val, SplitKind::Test];

    pub fn dir_name(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Val => "val",
            SplitKind::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassImages {
    pub name: String,
    pub images: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<ClassImages>,
    pub val: Vec<ClassImages>,
    pub test: Vec<ClassImages>,
    pub image_size: usize,
}

impl Dataset {
    pub fn split(&self, kind: SplitKind) -> &[ClassImages] {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Val => &self.val,
            SplitKind::Test => &self.test,
        }
    }

    pub fn split_sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }

    /// Checks the invariants every dataset must satisfy: class names unique
    /// across all splits, no empty class, every image `[3, S, S]` in `[0, 1]`.
    pub fn validate(&self) -> Result<()> {
        let mut seen: HashSet<&str> = HashSet::new();
        for kind in SplitKind::ALL {
            for class in self.split(kind) {
                if !seen.insert(class.name.as_str()) {
                    return Err(Error::Data(format!(
                        "class `{}` appears in more than one split",
                        class.name
                    )));
                }
                if class.images.is_empty() {
                    return Err(Error::Data(format!("class `{}` has no images", class.name)));
                }
                let s = self.image_size;
                for img in &class.images {
                    if img.shape() != [3, s, s] {
                        return Err(Error::mismatch("dataset image", &[3, s, s], img.shape()));
                    }
                    if img.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                        return Err(Error::Data(format!(
                            "class `{}` has pixel values outside [0, 1]",
                            class.name
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn manifest(&self) -> String {
        let mut out = String::new();
        for kind in SplitKind::ALL {
            for class in self.split(kind) {
                let _ = writeln!(out, "{}\t{}\t{}", kind.dir_name(), class.name, class.images.len());
            }
        }
        out
    }

    /// SHA-256 over split/class names and the raw bits of every image.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.image_size as u64).to_le_bytes());
        for kind in SplitKind::ALL {
            h.update(kind.dir_name().as_bytes());
            for class in self.split(kind) {
                h.update(class.name.as_bytes());
                h.update((class.images.len() as u64).to_le_bytes());
                for img in &class.images {
                    for v in img.data() {
                        h.update(v.to_le_bytes());
                    }
                }
            }
        }
        hex(&h.finalize())
    }

    /// Writes the standard directory layout and manifest under `root`.
    pub fn write(&self, root: &Path) -> Result<()> {
        for kind in SplitKind::ALL {
            for class in self.split(kind) {
                let dir = root.join(kind.dir_name()).join(&class.name);
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                for (i, img) in class.images.iter().enumerate() {
                    ppm::write(&dir.join(format!("{i:04}.ppm")), &tensor_to_rgb8(img)?)?;
                }
            }
        }
        let path = root.join(MANIFEST_FILE);
        fs::write(&path, self.manifest()).map_err(|e| Error::io(&path, e))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Byte value to tensor value. Shared by decoding and synthesis so that a
/// written-then-loaded image reproduces identical tensors.
#[inline]
pub fn byte_to_unit(b: u8) -> f32 {
    b as f32 / 255.0
}

#[inline]
pub fn unit_to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Converts an RGB or gray 8-bit image to a `[3, size, size]` tensor using
/// nearest-neighbor resampling (`src = floor(dst * src_len / size)`).
pub fn image_to_tensor(img: &ppm::Image8, size: usize) -> Result<Tensor> {
    let mut data = vec![0f32; 3 * size * size];
    for y in 0..size {
        let sy = y * img.height / size;
        for x in 0..size {
            let sx = x * img.width / size;
            let base = (sy * img.width + sx) * img.channels;
            for c in 0..3 {
                let b = if img.channels == 3 {
                    img.pixels[base + c]
                } else {
                    img.pixels[base]
                };
                data[c * size * size + y * size + x] = byte_to_unit(b);
            }
        }
    }
    Tensor::from_vec(&[3, size, size], data)
}

pub fn tensor_to_rgb8(t: &Tensor) -> Result<ppm::Image8> {
    let (h, w) = match t.shape() {
        &[3, h, w] => (h, w),
        s => return Err(Error::mismatch("tensor_to_rgb8", &[3, 0, 0], s)),
    };
    let mut pixels = vec![0u8; 3 * h * w];
    for c in 0..3 {
        for i in 0..h * w {
            pixels[i * 3 + c] = unit_to_byte(t.data()[c * h * w + i]);
        }
    }
    Ok(ppm::Image8 {
        width: w,
        height: h,
        channels: 3,
        pixels,
    })
}

fn sorted_entries(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

/// Class order and image counts per split, as listed in a manifest.
fn read_manifest(path: &Path) -> Result<[Vec<(String, usize)>; 3]> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let mut out: [Vec<(String, usize)>; 3] = Default::default();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split('\t').collect();
        let [split, class, count] = f[..] else {
            return Err(bad(format!("expected `split<TAB>class<TAB>count`, got `{line}`")));
        };
        let slot = SplitKind::ALL
            .iter()
            .position(|k| k.dir_name() == split)
            .ok_or_else(|| bad(format!("unknown split `{split}`")))?;
        let count = count.parse().map_err(|_| bad(format!("bad count `{count}`")))?;
        out[slot].push((class.to_string(), count));
    }
    Ok(out)
}

fn load_class(dir: &Path, image_size: usize) -> Result<Vec<Tensor>> {
    let mut images = Vec::new();
    for file in sorted_entries(dir)? {
        let ext = file.extension().and_then(|e| e.to_str()).unwrap_or("");
        if matches!(ext, "ppm" | "pgm") {
            images.push(image_to_tensor(&ppm::read(&file)?, image_size)?);
        }
    }
    Ok(images)
}

/// Loads `root/{train,val,test}/<class>/*.{ppm,pgm}` resized to `image_size`.
///
/// With a `manifest.txt`, its class order is the label order and its counts
/// are checked. Without one, classes are taken in lexicographic order and a
/// missing split directory is an empty split. Files are always read in
/// lexicographic order.
pub fn load_directory(root: &Path, image_size: usize) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::Data(format!("dataset root {} is not a directory", root.display())));
    }
    let manifest = root.join(MANIFEST_FILE);
    let listed = if manifest.is_file() { Some(read_manifest(&manifest)?) } else { None };
    let mut splits: [Vec<ClassImages>; 3] = Default::default();
    for (i, kind) in SplitKind::ALL.into_iter().enumerate() {
        let dir = root.join(kind.dir_name());
        let classes: Vec<(String, Option<usize>)> = match &listed {
            Some(m) => m[i].iter().map(|(n, c)| (n.clone(), Some(*c))).collect(),
            None if !dir.exists() => Vec::new(),
            None => sorted_entries(&dir)?
                .into_iter()
                .filter(|p| p.is_dir())
                .map(|p| {
                    p.file_name()
                        .and_then(|n| n.to_str())
                        .map(|n| (n.to_string(), None))
                        .ok_or_else(|| Error::Data(format!("bad class directory {}", p.display())))
                })
                .collect::<Result<_>>()?,
        };
        for (name, expected) in classes {
            let class_dir = dir.join(&name);
            if !class_dir.is_dir() {
                return Err(Error::Data(format!("listed class directory {} is missing", class_dir.display())));
            }
            let images = load_class(&class_dir, image_size)?;
            if images.is_empty() {
                return Err(Error::Data(format!(
                    "class `{name}` in split `{}` has no images",
                    kind.dir_name()
                )));
            }
            if let Some(n) = expected.filter(|&n| n != images.len()) {
                return Err(Error::Data(format!(
                    "class `{name}` in split `{}` has {} images, manifest lists {n}",
                    kind.dir_name(),
                    images.len()
                )));
            }
            splits[i].push(ClassImages { name, images });
        }
    }
    let [train, val, test] = splits;
    let ds = Dataset {
        train,
        val,
        test,
        image_size,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn flip_horizontal(image: &Tensor) -> Tensor {
    let s = image.shape();
    let w = s[s.len() - 1];
    let mut data = image.data().to_vec();
    for row in data.chunks_mut(w) {
        row.reverse();
    }
    Tensor::from_parts(image.shape_obj().clone(), data)
}

/// Mirrors the image horizontally with probability 0.5.
pub fn augment_flip<R: Rng + ?Sized>(image: &Tensor, rng: &mut R) -> Tensor {
    if rng.random_bool(0.5) {
        flip_horizontal(image)
    } else {
        image.clone()
    }
}

/// Stacks `[3, S, S]` images into an NCHW batch.
pub fn stack(images: &[&Tensor]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot stack an empty batch".into()))?;
    let dims = first.shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * first.numel());
    for img in images {
        if img.shape() != dims.as_slice() {
            return Err(Error::mismatch("stack", &dims, img.shape()));
        }
        data.extend_from_slice(img.data());
    }
    let mut shape = vec![images.len()];
    shape.extend(dims);
    Ok(Tensor::from_parts(Shape::new(shape)?, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStreams;

    fn tiny_class(name: &str, v: f32) -> ClassImages {
        ClassImages {
            name: name.into(),
            images: vec![Tensor::full(&[3, 2, 2], v).unwrap()],
        }
    }

    #[test]
    fn red_pixel_normalizes() {
        let img = ppm::Image8 {
            width: 1,
            height: 1,
            channels: 3,
            pixels: vec![255, 0, 0],
        };
        let t = image_to_tensor(&img, 1).unwrap();
        assert_eq!(t.data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn nearest_resize_picks_source_pixels() {
        let img = ppm::Image8 {
            width: 2,
            height: 2,
            channels: 1,
            pixels: vec![0, 51, 102, 255],
        };
        let t = image_to_tensor(&img, 4).unwrap();
        let plane = &t.data()[..16];
        assert_eq!(plane[0], 0.0);
        assert_eq!(plane[3], 0.2);
        assert_eq!(plane[15], 1.0);
    }

    #[test]
    fn duplicate_class_across_splits_is_rejected() {
        let ds = Dataset {
            train: vec![tiny_class("cat", 0.1)],
            val: vec![],
            test: vec![tiny_class("cat", 0.2)],
            image_size: 2,
        };
        assert!(matches!(ds.validate(), Err(Error::Data(_))));
    }

    #[test]
    fn flip_is_an_involution() {
        let img = Tensor::from_vec(&[3, 2, 3], (0..18).map(|v| v as f32 / 17.0).collect()).unwrap();
        let f = flip_horizontal(&img);
        assert_ne!(f, img);
        assert_eq!(flip_horizontal(&f), img);
        assert_eq!(f.get(&[1, 0, 0]).unwrap(), img.get(&[1, 0, 2]).unwrap());
    }

    #[test]
    fn symmetric_image_is_a_fixed_point() {
        let img = Tensor::from_vec(
            &[3, 1, 3],
            vec![0.1, 0.5, 0.1, 0.2, 0.9, 0.2, 0.0, 1.0, 0.0],
        )
        .unwrap();
        let mut rng = SeedStreams::new(3).stream("flip");
        for _ in 0..10 {
            assert_eq!(augment_flip(&img, &mut rng), img);
        }
    }

    #[test]
    fn flip_probability_is_one_half() {
        let img = Tensor::from_vec(&[3, 1, 2], vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        let mut rng = SeedStreams::new(11).stream("flip");
        let flips = (0..10_000)
            .filter(|_| augment_flip(&img, &mut rng) != img)
            .count();
        let rate = flips as f64 / 10_000.0;
        assert!((0.48..=0.52).contains(&rate), "rate {rate}");
    }

    fn pixel_class(name: &str, v: u8) -> ClassImages {
        ClassImages {
            name: name.into(),
            images: vec![Tensor::full(&[3, 2, 2], byte_to_unit(v)).unwrap(); 2],
        }
    }

    #[test]
    fn manifest_order_survives_a_round_trip() {
        let ds = Dataset {
            train: vec![pixel_class("zebra", 10), pixel_class("ant", 200)],
            val: vec![],
            test: vec![pixel_class("moth", 90), pixel_class("bee", 30)],
            image_size: 2,
        };
        let dir = tempfile::tempdir().unwrap();
        ds.write(dir.path()).unwrap();
        let back = load_directory(dir.path(), 2).unwrap();
        assert_eq!(back.digest(), ds.digest());
        assert_eq!(back.train[0].name, "zebra");

        fs::remove_file(dir.path().join(MANIFEST_FILE)).unwrap();
        let sorted = load_directory(dir.path(), 2).unwrap();
        assert_eq!(sorted.train[0].name, "ant");
    }

    #[test]
    fn manifest_count_mismatch_is_a_data_error() {
        let ds = Dataset {
            train: vec![pixel_class("a", 1), pixel_class("b", 2)],
            val: vec![],
            test: vec![],
            image_size: 2,
        };
        let dir = tempfile::tempdir().unwrap();
        ds.write(dir.path()).unwrap();
        fs::remove_file(dir.path().join("train/b/0001.ppm")).unwrap();
        assert!(matches!(load_directory(dir.path(), 2), Err(Error::Data(_))));
    }
}
