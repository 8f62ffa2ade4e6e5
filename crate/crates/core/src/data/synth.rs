//! Procedural images of textured colored shapes on noisy backgrounds.
//!
//! Every class is one `(shape, color, texture)` combination. Combinations are
//! shuffled once under the seed and dealt to train, val and test in that
//! order, so the three splits never share a combination. Individual
//! attributes do recur across splits, which is what makes features learned on
//! the train classes transferable.
//!
//! Images are rendered straight to bytes, so writing them as PPM and reading
//! them back reproduces the in-memory tensors exactly.

use std::f32::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{image_to_tensor, ppm::Image8, ClassImages, Dataset};
use crate::error::{Error, Result};
use crate::rng::{SeedStreams, StreamRng, STREAM_SYNTH};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Diamond,
    Cross,
    Ring,
    Hexagon,
    Star,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 8] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Diamond,
        ShapeKind::Cross,
        ShapeKind::Ring,
        ShapeKind::Hexagon,
        ShapeKind::Star,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Diamond => "diamond",
            ShapeKind::Cross => "cross",
            ShapeKind::Ring => "ring",
            ShapeKind::Hexagon => "hexagon",
            ShapeKind::Star => "star",
        }
    }

    /// Membership test in the object frame, where the shape has unit radius.
    pub fn contains(self, x: f32, y: f32) -> bool {
        const SQRT3: f32 = 1.732_050_8;
        match self {
            ShapeKind::Circle => x * x + y * y <= 1.0,
            ShapeKind::Square => x.abs().max(y.abs()) <= 0.8,
            ShapeKind::Triangle => y >= -0.5 && SQRT3 * x + y <= 1.0 && -SQRT3 * x + y <= 1.0,
            ShapeKind::Diamond => x.abs() + y.abs() <= 1.0,
            ShapeKind::Cross => {
                (x.abs() <= 0.3 && y.abs() <= 0.95) || (y.abs() <= 0.3 && x.abs() <= 0.95)
            }
            ShapeKind::Ring => {
                let r2 = x * x + y * y;
                (0.3..=1.0).contains(&r2)
            }
            ShapeKind::Hexagon => x.abs() <= SQRT3 / 2.0 && y.abs() + x.abs() / SQRT3 <= 1.0,
            ShapeKind::Star => {
                let r = (x * x + y * y).sqrt();
                r <= 0.6 + 0.4 * (5.0 * y.atan2(x)).cos()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextureKind {
    Solid,
    Stripes,
    Checker,
    Dots,
}

impl TextureKind {
    pub const ALL: [TextureKind; 4] = [
        TextureKind::Solid,
        TextureKind::Stripes,
        TextureKind::Checker,
        TextureKind::Dots,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TextureKind::Solid => "solid",
            TextureKind::Stripes => "stripes",
            TextureKind::Checker => "checker",
            TextureKind::Dots => "dots",
        }
    }

    /// True where the texture shows the full object color, false where it
    /// shows the darkened shade.
    fn lit(self, x: f32, y: f32, freq: f32, phase: f32) -> bool {
        match self {
            TextureKind::Solid => true,
            TextureKind::Stripes => (PI * freq * x + phase).sin() >= 0.0,
            TextureKind::Checker => {
                ((PI * freq * x + phase).sin() >= 0.0) ^ ((PI * freq * y + phase).sin() >= 0.0)
            }
            TextureKind::Dots => {
                let cell = |v: f32| (v * freq * 0.5 + phase / (2.0 * PI)).rem_euclid(1.0) - 0.5;
                let (dx, dy) = (cell(x), cell(y));
                dx * dx + dy * dy >= 0.09
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NamedColor {
    pub name: String,
    pub rgb: [u8; 3],
}

fn color(name: &str, rgb: [u8; 3]) -> NamedColor {
    NamedColor {
        name: name.into(),
        rgb,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub images_per_class: usize,
    pub image_size: usize,
    pub seed: u64,
    pub shapes: Vec<ShapeKind>,
    pub palette: Vec<NamedColor>,
    pub textures: Vec<TextureKind>,
    /// Texture frequency range, in half-cycles per object radius.
    pub texture_freq: [f32; 2],
    /// Maximum center offset as a fraction of the half-width.
    pub position_jitter: f32,
    /// Object radius range as a fraction of the half-width.
    pub scale_range: [f32; 2],
    /// Maximum absolute rotation, in radians.
    pub rotation_jitter: f32,
    /// Per-channel uniform jitter applied to the palette color.
    pub color_jitter: f32,
    /// Per-pixel uniform background noise amplitude.
    pub noise: f32,
    /// Inclusive range of clutter objects drawn beneath the class object.
    /// Clutter uses random attributes from the same vocabularies.
    pub distractors: [usize; 2],
    /// Clutter radius range as a fraction of the half-width.
    pub distractor_scale: [f32; 2],
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_train: 8,
            n_val: 3,
            n_test: 5,
            images_per_class: 100,
            image_size: 64,
            seed: 7,
            shapes: ShapeKind::ALL.to_vec(),
            palette: vec![
                color("red", [220, 40, 40]),
                color("green", [40, 190, 60]),
                color("blue", [50, 80, 230]),
                color("yellow", [235, 215, 40]),
                color("magenta", [210, 50, 200]),
                color("cyan", [40, 210, 220]),
                color("orange", [245, 140, 30]),
                color("white", [240, 240, 240]),
            ],
            textures: TextureKind::ALL.to_vec(),
            texture_freq: [2.0, 3.5],
            position_jitter: 0.35,
            scale_range: [0.35, 0.6],
            rotation_jitter: PI,
            color_jitter: 0.08,
            noise: 0.06,
            distractors: [1, 2],
            distractor_scale: [0.2, 0.35],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthClass {
    pub shape: ShapeKind,
    pub color: NamedColor,
    pub texture: TextureKind,
}

impl SynthClass {
    pub fn name(&self) -> String {
        format!("{}-{}-{}", self.shape.name(), self.color.name, self.texture.name())
    }
}

/// Geometry and appearance of one rendered object, in normalized
/// coordinates where the image spans `[-1, 1]` on both axes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placement {
    pub center: [f32; 2],
    pub radius: f32,
    pub rotation: f32,
    pub texture_freq: f32,
    pub texture_phase: f32,
    /// Multiplicative per-channel color jitter.
    pub tint: [f32; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedImage {
    pub image: Image8,
    /// Row-major object coverage, one flag per pixel.
    pub mask: Vec<bool>,
}

impl SynthSpec {
    pub fn n_classes(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("synthetic spec: {m}")));
        if self.image_size < 4 {
            return bad("image_size must be at least 4");
        }
        if self.images_per_class == 0 {
            return bad("images_per_class must be positive");
        }
        if self.shapes.is_empty() || self.palette.is_empty() || self.textures.is_empty() {
            return bad("shape, color and texture vocabularies must be non-empty");
        }
        let ordered = |r: [f32; 2]| r[0].is_finite() && r[1].is_finite() && 0.0 < r[0] && r[0] <= r[1];
        if !ordered(self.texture_freq) || !ordered(self.scale_range) || !ordered(self.distractor_scale) {
            return bad("ranges must be finite, positive and ordered");
        }
        for (v, name) in [
            (self.position_jitter, "position_jitter"),
            (self.rotation_jitter, "rotation_jitter"),
            (self.color_jitter, "color_jitter"),
            (self.noise, "noise"),
        ] {
            if !v.is_finite() || v < 0.0 {
                return bad(&format!("{name} must be finite and non-negative"));
            }
        }
        if self.distractors[0] > self.distractors[1] {
            return bad("distractor range must be ordered");
        }
        let available = self.shapes.len() * self.palette.len() * self.textures.len();
        if self.n_classes() > available {
            return bad(&format!(
                "{} classes requested but only {available} distinct combinations exist",
                self.n_classes()
            ));
        }
        Ok(())
    }

    /// All classes in split order: train, then val, then test.
    pub fn classes(&self) -> Result<Vec<SynthClass>> {
        self.validate()?;
        let mut combos = Vec::new();
        for &shape in &self.shapes {
            for c in &self.palette {
                for &texture in &self.textures {
                    combos.push(SynthClass {
                        shape,
                        color: c.clone(),
                        texture,
                    });
                }
            }
        }
        let mut names: Vec<String> = combos.iter().map(SynthClass::name).collect();
        names.sort();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument(
                "synthetic spec: vocabulary contains duplicates".into(),
            ));
        }
        let mut rng = SeedStreams::new(self.seed).stream(STREAM_SYNTH);
        combos.shuffle(&mut rng);
        combos.truncate(self.n_classes());
        Ok(combos)
    }

    pub fn sample_placement(&self, rng: &mut StreamRng) -> Placement {
        let pj = self.position_jitter;
        let mut sym = |a: f32| if a > 0.0 { rng.random_range(-a..=a) } else { 0.0 };
        let center = [sym(pj), sym(pj)];
        let rotation = sym(self.rotation_jitter);
        let cj = self.color_jitter;
        let tint = [1.0 + sym(cj), 1.0 + sym(cj), 1.0 + sym(cj)];
        let [r0, r1] = self.scale_range;
        let [f0, f1] = self.texture_freq;
        Placement {
            center,
            radius: rng.random_range(r0..=r1),
            rotation,
            texture_freq: rng.random_range(f0..=f1),
            texture_phase: rng.random_range(0.0..2.0 * PI),
            tint,
        }
    }

    fn random_class(&self, rng: &mut StreamRng) -> SynthClass {
        SynthClass {
            shape: self.shapes[rng.random_range(0..self.shapes.len())],
            color: self.palette[rng.random_range(0..self.palette.len())].clone(),
            texture: self.textures[rng.random_range(0..self.textures.len())],
        }
    }

    /// Renders one image. Background and clutter draws come from `rng`; the
    /// class object is fully determined by `class` and `placement` and is
    /// painted last, so `mask` is exactly its visible footprint.
    pub fn render(&self, class: &SynthClass, placement: &Placement, rng: &mut StreamRng) -> RenderedImage {
        let s = self.image_size;
        let mut bg = [[0f32; 3]; 2];
        for end in bg.iter_mut() {
            for c in end.iter_mut() {
                *c = rng.random_range(0.15..0.55);
            }
        }
        let dir = rng.random_range(0.0..2.0 * PI);
        let (dsin, dcos) = dir.sin_cos();
        let mut canvas = vec![0f32; 3 * s * s];
        for i in 0..s {
            let v = pixel_coord(i, s);
            for j in 0..s {
                let u = pixel_coord(j, s);
                let t = ((u * dcos + v * dsin) * 0.5 + 0.5).clamp(0.0, 1.0);
                for c in 0..3 {
                    let n = if self.noise > 0.0 {
                        rng.random_range(-self.noise..=self.noise)
                    } else {
                        0.0
                    };
                    canvas[(i * s + j) * 3 + c] = bg[0][c] + (bg[1][c] - bg[0][c]) * t + n;
                }
            }
        }

        let [d0, d1] = self.distractors;
        let n_clutter = if d1 > 0 { rng.random_range(d0..=d1) } else { 0 };
        for _ in 0..n_clutter {
            let clutter = self.random_class(rng);
            let mut p = self.sample_placement(rng);
            p.center = [rng.random_range(-0.75..=0.75), rng.random_range(-0.75..=0.75)];
            p.radius = rng.random_range(self.distractor_scale[0]..=self.distractor_scale[1]);
            paint(&mut canvas, s, &clutter, &p);
        }

        let mask = paint(&mut canvas, s, class, placement);
        let pixels = canvas.iter().map(|&v| super::unit_to_byte(v)).collect();
        RenderedImage {
            image: Image8 {
                width: s,
                height: s,
                channels: 3,
                pixels,
            },
            mask,
        }
    }

    /// Per-class image stream; classes are generated independently so the
    /// images of one class do not depend on how many other classes exist.
    pub fn class_rng(&self, class_index: usize) -> StreamRng {
        SeedStreams::new(self.seed).indexed(STREAM_SYNTH, class_index as u64 + 1)
    }
}

fn pixel_coord(i: usize, s: usize) -> f32 {
    (i as f32 + 0.5) / s as f32 * 2.0 - 1.0
}

/// Paints one object over an interleaved RGB canvas and returns its
/// coverage.
fn paint(canvas: &mut [f32], s: usize, class: &SynthClass, p: &Placement) -> Vec<bool> {
    let (rsin, rcos) = (-p.rotation).sin_cos();
    let base: [f32; 3] =
        std::array::from_fn(|c| (class.color.rgb[c] as f32 / 255.0 * p.tint[c]).clamp(0.0, 1.0));
    let mut mask = vec![false; s * s];
    for i in 0..s {
        let v = pixel_coord(i, s);
        for j in 0..s {
            let u = pixel_coord(j, s);
            let qx = (u - p.center[0]) / p.radius;
            let qy = (v - p.center[1]) / p.radius;
            let x = rcos * qx - rsin * qy;
            let y = rsin * qx + rcos * qy;
            if !class.shape.contains(x, y) {
                continue;
            }
            mask[i * s + j] = true;
            let shade = if class.texture.lit(x, y, p.texture_freq, p.texture_phase) {
                1.0
            } else {
                0.35
            };
            for c in 0..3 {
                canvas[(i * s + j) * 3 + c] = base[c] * shade;
            }
        }
    }
    mask
}

/// Generates the full dataset described by `spec`. Deterministic in the
/// spec; use [`Dataset::write`] to materialize it on disk.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Dataset> {
    let classes = spec.classes()?;
    let mut out: Vec<ClassImages> = Vec::with_capacity(classes.len());
    for (k, class) in classes.iter().enumerate() {
        let mut rng = spec.class_rng(k);
        let images = (0..spec.images_per_class)
            .map(|_| {
                let placement = spec.sample_placement(&mut rng);
                let rendered = spec.render(class, &placement, &mut rng);
                image_to_tensor(&rendered.image, spec.image_size)
            })
            .collect::<Result<Vec<Tensor>>>()?;
        out.push(ClassImages {
            name: class.name(),
            images,
        });
    }
    let test = out.split_off(spec.n_train + spec.n_val);
    let val = out.split_off(spec.n_train);
    let ds = Dataset {
        train: out,
        val,
        test,
        image_size: spec.image_size,
    };
    ds.validate()?;
    Ok(ds)
}
