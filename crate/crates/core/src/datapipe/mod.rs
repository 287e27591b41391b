//! Dataset manifests, splitting, bicubic resampling, augmentation and the
//! synthetic dataset generator.

mod image;
mod loader;
mod manifest;
mod norm;
mod synth;

pub use image::{bicubic_resize, bicubic_resize_unclamped, cubic_weight, hflip, read_png, write_png, Image};
pub use loader::{epoch_flips, epoch_order, iterate_batches, load_split, Batch, SplitData};
pub use manifest::{split_dataset, ClassAttributeMap, DatasetManifest, Record, Split, SplitProtocol};
pub(crate) use manifest::write_atomic;
pub use norm::{NormAccumulator, NormStats};
pub use synth::{generate_synthetic, render_sample, sample_nuisance, Nuisance, SyntheticSpec, CUE_PATTERNS};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent random stream for `(seed, key, stream)`.
pub fn keyed_rng(seed: u64, key: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(key ^ splitmix(stream))))
}
