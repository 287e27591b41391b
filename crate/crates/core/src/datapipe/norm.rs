use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::image::Image;
use super::manifest::write_atomic;
use crate::error::{Error, Result};

/// Per-channel statistics of the training split at native resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub struct NormAccumulator {
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    count: u64,
}

impl NormAccumulator {
    pub fn add(&mut self, img: &Image) {
        let c = self.sum.len();
        for px in img.data().chunks(c) {
            for (k, &v) in px.iter().enumerate() {
                self.sum[k] += v;
                self.sum_sq[k] += v * v;
            }
        }
        self.count += (img.data().len() / c) as u64;
    }

    pub fn finish(self) -> Result<NormStats> {
        if self.count == 0 {
            return Err(Error::Dataset("no pixels to compute statistics from".to_string()));
        }
        let n = self.count as f64;
        let mean: Vec<f64> = self.sum.iter().map(|s| s / n).collect();
        let std = self
            .sum_sq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| (sq / n - m * m).max(0.0).sqrt())
            .collect();
        let stats = NormStats { mean, std };
        stats.validate()?;
        Ok(stats)
    }
}

impl NormStats {
    pub fn accumulator(channels: usize) -> NormAccumulator {
        NormAccumulator {
            sum: vec![0.0; channels],
            sum_sq: vec![0.0; channels],
            count: 0,
        }
    }

    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        let s = Self { mean, std };
        s.validate()?;
        Ok(s)
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    fn validate(&self) -> Result<()> {
        if self.mean.len() != self.std.len() || self.mean.is_empty() {
            return Err(Error::InvalidArgument("mean/std channel counts differ".to_string()));
        }
        if let Some(c) = self.std.iter().position(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument(format!("channel {c} has zero or invalid std")));
        }
        Ok(())
    }

    /// `(x − mean) / std` per channel, in place on `H×W×C` data.
    pub fn normalize(&self, img: &mut Image) -> Result<()> {
        if img.channels() != self.channels() {
            return Err(Error::ShapeMismatch {
                op: "normalize",
                left: vec![self.channels()],
                right: vec![img.channels()],
            });
        }
        let c = self.channels();
        for px in img.data_mut().chunks_mut(c) {
            for (k, v) in px.iter_mut().enumerate() {
                *v = (*v - self.mean[k]) / self.std[k];
            }
        }
        Ok(())
    }

    /// `norm_stats.json` next to the manifest.
    pub fn sidecar_path(manifest_path: &Path) -> PathBuf {
        manifest_path.with_file_name("norm_stats.json")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Dataset(e.to_string()))?;
        write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let s: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
        s.validate()?;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn normalized_training_set_is_standard() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let imgs: Vec<Image> = (0..5)
            .map(|_| Image::new(4, 3, 3, (0..36).map(|_| rng.random::<f64>()).collect()).unwrap())
            .collect();
        let mut acc = NormStats::accumulator(3);
        imgs.iter().for_each(|i| acc.add(i));
        let stats = acc.finish().unwrap();
        let mut after = NormStats::accumulator(3);
        for img in &imgs {
            let mut x = img.clone();
            stats.normalize(&mut x).unwrap();
            after.add(&x);
        }
        let check = after.finish().unwrap();
        for c in 0..3 {
            assert!(check.mean[c].abs() < 1e-6);
            assert!((check.std[c] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_std_rejected() {
        let mut acc = NormStats::accumulator(3);
        acc.add(&Image::filled(2, 2, 3, 0.5));
        assert!(acc.finish().is_err());
        assert!(NormStats::new(vec![0.0], vec![0.0]).is_err());
    }

    #[test]
    fn sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("norm_stats.json");
        let s = NormStats::new(vec![0.1, 0.2, 0.3], vec![0.25, 0.5, 1.0 / 3.0]).unwrap();
        s.save(&path).unwrap();
        let back = NormStats::load(&path).unwrap();
        assert_eq!(back, s);
        let mut a = Image::filled(1, 2, 3, 0.9);
        let mut b = a.clone();
        s.normalize(&mut a).unwrap();
        back.normalize(&mut b).unwrap();
        assert_eq!(a, b);
    }
}
