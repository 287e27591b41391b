use std::path::Path;
use std::thread;

use rand::seq::SliceRandom;
use rand::Rng;

use super::image::{bicubic_resize, read_png};
use super::manifest::{ClassAttributeMap, DatasetManifest, Split};
use super::norm::NormStats;
use super::keyed_rng;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// A split decoded, resized and normalized into memory as `N×C×R×R`.
/// Holds class ids only; attributes come from a [`ClassAttributeMap`].
#[derive(Clone, Debug, PartialEq)]
pub struct SplitData {
    resolution: usize,
    channels: usize,
    images: Vec<f64>,
    classes: Vec<usize>,
}

impl SplitData {
    pub fn new(resolution: usize, channels: usize, images: Vec<f64>, classes: Vec<usize>) -> Result<Self> {
        if images.len() != classes.len() * channels * resolution * resolution {
            return Err(Error::ShapeMismatch {
                op: "split data",
                left: vec![classes.len(), channels, resolution, resolution],
                right: vec![images.len()],
            });
        }
        Ok(Self {
            resolution,
            channels,
            images,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    fn sample_len(&self) -> usize {
        self.channels * self.resolution * self.resolution
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let n = self.sample_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Stack the given samples into an `N×C×R×R` tensor, mirroring the ones
    /// flagged in `flips`.
    pub fn gather(&self, indices: &[usize], flips: Option<&[bool]>) -> Tensor {
        let r = self.resolution;
        let mut data = Vec::with_capacity(indices.len() * self.sample_len());
        for (k, &i) in indices.iter().enumerate() {
            let src = self.sample(i);
            if flips.is_some_and(|f| f[k]) {
                for row in src.chunks(r) {
                    data.extend(row.iter().rev());
                }
            } else {
                data.extend_from_slice(src);
            }
        }
        Tensor::new(vec![indices.len(), self.channels, r, r], data).expect("sizes agree")
    }

    /// All samples in order, `chunk` at a time.
    pub fn chunks(&self, chunk: usize) -> impl Iterator<Item = Tensor> + '_ {
        let chunk = chunk.max(1);
        (0..self.len()).step_by(chunk).map(move |start| {
            let idx: Vec<usize> = (start..(start + chunk).min(self.len())).collect();
            self.gather(&idx, None)
        })
    }
}

fn load_one(path: &Path, resolution: usize, norm: &NormStats) -> Result<Vec<f64>> {
    let img = read_png(path)?;
    let mut img = bicubic_resize(&img, resolution, resolution)?;
    norm.normalize(&mut img)?;
    Ok(img.to_chw())
}

/// Decode a split with `workers` threads. The result does not depend on the
/// worker count.
pub fn load_split(
    manifest: &DatasetManifest,
    split: Split,
    resolution: usize,
    norm: &NormStats,
    workers: usize,
) -> Result<SplitData> {
    if resolution == 0 {
        return Err(Error::InvalidArgument("resolution must be positive".to_string()));
    }
    let records: Vec<_> = manifest.split(split).collect();
    let paths: Vec<_> = records.iter().map(|r| manifest.resolve(r)).collect();
    let workers = workers.clamp(1, paths.len().max(1));
    let per = paths.len().div_ceil(workers).max(1);
    let parts: Vec<Result<Vec<f64>>> = thread::scope(|s| {
        let handles: Vec<_> = paths
            .chunks(per)
            .map(|chunk| {
                s.spawn(move || {
                    let mut out = Vec::new();
                    for p in chunk {
                        out.extend(load_one(p, resolution, norm)?);
                    }
                    Ok(out)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("loader thread panicked")).collect()
    });
    let mut images = Vec::new();
    for part in parts {
        images.extend(part?);
    }
    let classes = records.iter().map(|r| r.class_id).collect();
    SplitData::new(resolution, norm.channels(), images, classes)
}

/// One mini-batch. `attributes[i]` is the mapped attribute of `classes[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub classes: Vec<usize>,
    pub attributes: Vec<usize>,
    pub indices: Vec<usize>,
}

const STREAM_SHUFFLE: u64 = 0x5;
const STREAM_FLIP: u64 = 0xf1;

/// Sample order for an epoch, keyed by `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut keyed_rng(seed, epoch, STREAM_SHUFFLE));
    order
}

/// Flip decision per sample index for an epoch, keyed by `(seed, epoch)`.
pub fn epoch_flips(n: usize, seed: u64, epoch: u64) -> Vec<bool> {
    let mut rng = keyed_rng(seed, epoch, STREAM_FLIP);
    (0..n).map(|_| rng.random_bool(0.5)).collect()
}

/// Shuffled mini-batches for one training epoch; the last one may be short.
pub fn iterate_batches<'a>(
    data: &'a SplitData,
    attributes: &'a ClassAttributeMap,
    batch_size: usize,
    augment: bool,
    seed: u64,
    epoch: u64,
) -> Result<impl Iterator<Item = Batch> + 'a> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".to_string()));
    }
    let attr: Vec<usize> = data
        .classes
        .iter()
        .map(|&c| attributes.attribute_of(c))
        .collect::<Result<_>>()?;
    let order = epoch_order(data.len(), seed, epoch);
    let flips = augment.then(|| epoch_flips(data.len(), seed, epoch));
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    Ok(chunks.into_iter().map(move |indices| {
        let f: Option<Vec<bool>> = flips.as_ref().map(|f| indices.iter().map(|&i| f[i]).collect());
        Batch {
            images: data.gather(&indices, f.as_deref()),
            classes: indices.iter().map(|&i| data.classes[i]).collect(),
            attributes: indices.iter().map(|&i| attr[i]).collect(),
            indices,
        }
    }))
}
