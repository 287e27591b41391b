use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::image::{write_png, Image};
use super::manifest::{write_atomic, DatasetManifest, Record, Split};
use super::norm::NormStats;
use super::keyed_rng;
use crate::error::{Error, Result};

/// Number of distinct fine-cue patterns available per attribute group.
pub const CUE_PATTERNS: usize = 6;

/// Procedural dataset: each attribute group shares a glyph and a background
/// tint; classes inside a group differ by a small zero-mean marking at the
/// glyph center.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub classes_per_attribute_group: usize,
    /// Native side length in pixels.
    pub canvas: usize,
    /// Side of the class marking in native pixels.
    pub fine_detail_scale: usize,
    /// Background tint separating attribute groups, in `[0, 1]`.
    pub attribute_cue_strength: f64,
    pub noise_sigma: f64,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
    /// Max glyph displacement from the canvas center, in native pixels.
    #[serde(default = "default_jitter")]
    pub position_jitter: usize,
    /// Amplitude of the marking around the glyph color.
    #[serde(default = "default_cue_contrast")]
    pub cue_contrast: f64,
    /// Relative glyph size jitter, e.g. 0.15 for ±15%.
    #[serde(default = "default_scale_jitter")]
    pub scale_jitter: f64,
    /// Std of the per-sample global color shift.
    #[serde(default = "default_color_jitter")]
    pub color_jitter: f64,
    /// Glyph radius as a fraction of the canvas side.
    #[serde(default = "default_glyph_radius")]
    pub glyph_radius: f64,
}

fn default_glyph_radius() -> f64 {
    0.28
}

fn default_jitter() -> usize {
    12
}

fn default_cue_contrast() -> f64 {
    0.25
}

fn default_scale_jitter() -> f64 {
    0.15
}

fn default_color_jitter() -> f64 {
    0.05
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 8,
            classes_per_attribute_group: 4,
            canvas: 128,
            fine_detail_scale: 6,
            attribute_cue_strength: 0.5,
            noise_sigma: 0.05,
            train_per_class: 200,
            val_per_class: 20,
            test_per_class: 50,
            seed: 0,
            position_jitter: default_jitter(),
            cue_contrast: default_cue_contrast(),
            scale_jitter: default_scale_jitter(),
            color_jitter: default_color_jitter(),
            glyph_radius: default_glyph_radius(),
        }
    }
}

impl SyntheticSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn num_groups(&self) -> usize {
        self.num_classes / self.classes_per_attribute_group
    }

    pub fn attribute_of(&self, class_id: usize) -> usize {
        class_id / self.classes_per_attribute_group
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes == 0 || self.classes_per_attribute_group == 0 {
            return bad("num_classes and classes_per_attribute_group must be positive".into());
        }
        if self.num_classes % self.classes_per_attribute_group != 0 {
            return bad(format!(
                "num_classes {} not divisible by classes_per_attribute_group {}",
                self.num_classes, self.classes_per_attribute_group
            ));
        }
        if self.classes_per_attribute_group > CUE_PATTERNS {
            return bad(format!("at most {CUE_PATTERNS} classes per attribute group"));
        }
        if self.fine_detail_scale < 2 || self.fine_detail_scale * 8 >= self.canvas {
            return bad(format!(
                "fine_detail_scale {} must be at least 2 and below canvas/8",
                self.fine_detail_scale
            ));
        }
        if !(0.0..=1.0).contains(&self.attribute_cue_strength) {
            return bad("attribute_cue_strength outside [0, 1]".into());
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("cue_contrast", self.cue_contrast),
            ("color_jitter", self.color_jitter),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite non-negative number"));
            }
        }
        if !(0.0..0.5).contains(&self.scale_jitter) {
            return bad("scale_jitter outside [0, 0.5)".into());
        }
        let min_radius = (self.fine_detail_scale as f64) / self.canvas as f64;
        if !(self.glyph_radius >= min_radius && self.glyph_radius <= 0.45) {
            return bad(format!("glyph_radius must lie in [{min_radius:.3}, 0.45]"));
        }
        if self.position_jitter * 4 > self.canvas {
            return bad("position_jitter too large for the canvas".into());
        }
        if self.train_per_class == 0 {
            return bad("train_per_class must be positive".into());
        }
        Ok(())
    }
}

/// Per-sample nuisance draws, independent of the class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Nuisance {
    pub dx: i64,
    pub dy: i64,
    pub scale: f64,
    pub color_shift: [f64; 3],
    pub noise_seed: u64,
}

impl Nuisance {
    pub fn sample(spec: &SyntheticSpec, rng: &mut impl Rng) -> Self {
        let j = spec.position_jitter as i64;
        let shift = Normal::new(0.0, spec.color_jitter.max(f64::MIN_POSITIVE)).expect("valid std");
        Self {
            dx: rng.random_range(-j..=j),
            dy: rng.random_range(-j..=j),
            scale: 1.0 + spec.scale_jitter * (2.0 * rng.random::<f64>() - 1.0),
            color_shift: [0, 1, 2].map(|_| if spec.color_jitter > 0.0 { shift.sample(rng) } else { 0.0 }),
            noise_seed: rng.random(),
        }
    }
}

/// Zero-mean ±1 marking, symmetric under horizontal mirroring so that flip
/// augmentation preserves the class.
fn cue_sign(pattern: usize, u: f64, v: f64) -> f64 {
    let on = match pattern {
        0 => v < 0.5,
        1 => v >= 0.5,
        2 => (0.25..0.75).contains(&v),
        3 => !(0.25..0.75).contains(&v),
        4 => (0.25..0.75).contains(&u),
        _ => !(0.25..0.75).contains(&u),
    };
    if on {
        1.0
    } else {
        -1.0
    }
}

/// Superellipse exponent of each group's glyph.
fn glyph_exponent(group: usize) -> f64 {
    [2.0, 5.0, 1.0, 3.0, 1.5, 8.0][group % 6]
}

/// Tint direction of each group (unit-ish RGB offset).
fn tint(group: usize, groups: usize) -> [f64; 3] {
    let angle = std::f64::consts::TAU * group as f64 / groups.max(2) as f64;
    [angle.cos(), (angle + 2.1).cos(), (angle + 4.2).cos()]
}

/// Render one sample at native resolution, before quantization.
pub fn render_sample(spec: &SyntheticSpec, class_id: usize, nuisance: &Nuisance) -> Image {
    let n = spec.canvas;
    let group = spec.attribute_of(class_id);
    let pattern = class_id % spec.classes_per_attribute_group;
    let t = tint(group, spec.num_groups());
    let cx = (n / 2) as i64 + nuisance.dx;
    let cy = (n / 2) as i64 + nuisance.dy;
    let radius = spec.glyph_radius * n as f64 * nuisance.scale;
    let p = glyph_exponent(group);
    let s = spec.fine_detail_scale as i64;
    let (cue_x0, cue_y0) = (cx - s / 2, cy - s / 2);
    let glyph_level = 0.7;

    let mut rng = keyed_rng(nuisance.noise_seed, 0, 0);
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut img = Image::filled(n, n, 3, 0.0);
    for y in 0..n as i64 {
        for x in 0..n as i64 {
            let (px, py) = (x as f64 + 0.5 - cx as f64, y as f64 + 0.5 - cy as f64);
            let inside = (px.abs() / radius).powf(p) + (py.abs() / radius).powf(p) <= 1.0;
            let in_cue = (cue_x0..cue_x0 + s).contains(&x) && (cue_y0..cue_y0 + s).contains(&y);
            for c in 0..3 {
                let mut v = if inside {
                    glyph_level
                } else {
                    0.35 + 0.15 * spec.attribute_cue_strength * t[c]
                };
                if in_cue {
                    let u = (x - cue_x0) as f64 / s as f64;
                    let w = (y - cue_y0) as f64 / s as f64;
                    v = glyph_level + spec.cue_contrast * cue_sign(pattern, u, w);
                }
                v += nuisance.color_shift[c];
                if spec.noise_sigma > 0.0 {
                    v += noise.sample(&mut rng);
                }
                img.set(y as usize, x as usize, c, v);
            }
        }
    }
    img.clamp_unit();
    img
}

fn split_count(spec: &SyntheticSpec, split: Split) -> usize {
    match split {
        Split::Train => spec.train_per_class,
        Split::Val => spec.val_per_class,
        Split::Test => spec.test_per_class,
    }
}

fn sample_key(class_id: usize, split: Split, index: usize) -> u64 {
    ((class_id as u64) << 40) | ((split as u64) << 32) | index as u64
}

/// The nuisance draw used for a given sample.
pub fn sample_nuisance(spec: &SyntheticSpec, class_id: usize, split: Split, index: usize) -> Nuisance {
    let mut rng = keyed_rng(spec.seed, sample_key(class_id, split, index), STREAM_SYNTH);
    Nuisance::sample(spec, &mut rng)
}

const STREAM_SYNTH: u64 = 0x5a7;

/// Render the dataset into `out`: PNGs under `images/`, `manifest.csv`,
/// `norm_stats.json` and a copy of the spec. Returns the manifest path.
pub fn generate_synthetic(spec: &SyntheticSpec, out: &Path) -> Result<PathBuf> {
    spec.validate()?;
    let mut records = Vec::new();
    let mut stats = NormStats::accumulator(3);
    for split in [Split::Train, Split::Val, Split::Test] {
        let dir = out.join("images").join(split.as_str());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for class_id in 0..spec.num_classes {
            for index in 0..split_count(spec, split) {
                let nuisance = sample_nuisance(spec, class_id, split, index);
                let mut img = render_sample(spec, class_id, &nuisance);
                for v in img.data_mut() {
                    *v = (*v * 255.0).round() / 255.0;
                }
                let rel = PathBuf::from("images")
                    .join(split.as_str())
                    .join(format!("c{class_id:02}_{index:05}.png"));
                write_png(&img, &out.join(&rel))?;
                if split == Split::Train {
                    stats.add(&img);
                }
                records.push(Record {
                    path: rel,
                    class_id,
                    attribute_id: Some(spec.attribute_of(class_id)),
                    split,
                });
            }
        }
    }
    let manifest = DatasetManifest::new(out, records)?;
    let manifest_path = out.join("manifest.csv");
    manifest.save(&manifest_path)?;
    stats.finish()?.save(&NormStats::sidecar_path(&manifest_path))?;
    let spec_text = toml::to_string(spec).map_err(|e| Error::Config(e.to_string()))?;
    write_atomic(&out.join("spec.toml"), spec_text.as_bytes())?;
    Ok(manifest_path)
}
