use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major `H×W×C` image with values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::ShapeMismatch {
                op: "image",
                left: vec![height, width, channels],
                right: vec![data.len()],
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Channel-major copy (`C×H×W`), the layout the network consumes.
    pub fn to_chw(&self) -> Vec<f64> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; self.data.len()];
        for (p, px) in self.data.chunks(self.channels).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                out[c * plane + p] = v;
            }
        }
        out
    }
}

/// Cubic convolution kernel with `a = -0.5`.
pub fn cubic_weight(x: f64) -> f64 {
    const A: f64 = -0.5;
    let t = x.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Four clamped source indices and normalized weights for each output
/// position, plus the index of the heaviest tap.
pub(crate) fn axis_taps(src: usize, dst: usize) -> Vec<([usize; 4], [f64; 4], usize)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let center = (o as f64 + 0.5) * scale - 0.5;
            let left = center.floor() as i64 - 1;
            let mut idx = [0usize; 4];
            let mut w = [0.0; 4];
            for t in 0..4 {
                let j = left + t as i64;
                idx[t] = j.clamp(0, src as i64 - 1) as usize;
                w[t] = cubic_weight(center - j as f64);
            }
            let total: f64 = w.iter().sum();
            for v in &mut w {
                *v /= total;
            }
            let mut main = 0;
            for t in 1..4 {
                if w[t] > w[main] {
                    main = t;
                }
            }
            (idx, w, main)
        })
        .collect()
}

/// Weighted sum written relative to the heaviest tap, so constant inputs and
/// unit-weight taps come out exact.
#[inline]
fn taps_sum(w: &[f64; 4], main: usize, value: impl Fn(usize) -> f64) -> f64 {
    let base = value(main);
    let mut acc = 0.0;
    for t in 0..4 {
        if t != main {
            acc += w[t] * (value(t) - base);
        }
    }
    base + acc
}

/// Bicubic resampling with half-pixel centers and clamp-to-edge borders,
/// without the final clamp to `[0, 1]`.
pub fn bicubic_resize_unclamped(img: &Image, height: usize, width: usize) -> Result<Image> {
    if img.is_empty() {
        return Err(Error::InvalidArgument("cannot resize an empty image".to_string()));
    }
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument(format!("resize target {height}x{width} is empty")));
    }
    let c = img.channels;
    let xs = axis_taps(img.width, width);
    let ys = axis_taps(img.height, height);

    // horizontal pass: H × width × C
    let mut tmp = vec![0.0; img.height * width * c];
    for y in 0..img.height {
        let row = &img.data[y * img.width * c..(y + 1) * img.width * c];
        let out = &mut tmp[y * width * c..(y + 1) * width * c];
        for (x, (idx, w, main)) in xs.iter().enumerate() {
            for ch in 0..c {
                out[x * c + ch] = taps_sum(w, *main, |t| row[idx[t] * c + ch]);
            }
        }
    }
    let stride = width * c;
    let mut data = vec![0.0; height * stride];
    for (y, (idx, w, main)) in ys.iter().enumerate() {
        let out = &mut data[y * stride..(y + 1) * stride];
        let rows = idx.map(|i| &tmp[i * stride..(i + 1) * stride]);
        for (k, o) in out.iter_mut().enumerate() {
            *o = taps_sum(w, *main, |t| rows[t][k]);
        }
    }
    Image::new(height, width, c, data)
}

/// Bicubic resampling, clamped to `[0, 1]` at the end.
pub fn bicubic_resize(img: &Image, height: usize, width: usize) -> Result<Image> {
    let mut out = bicubic_resize_unclamped(img, height, width)?;
    out.clamp_unit();
    Ok(out)
}

/// Mirror columns.
pub fn hflip(img: &Image) -> Image {
    let c = img.channels;
    let mut data = Vec::with_capacity(img.data.len());
    for row in img.data.chunks(img.width * c) {
        for px in row.chunks(c).rev() {
            data.extend_from_slice(px);
        }
    }
    Image {
        data,
        ..img.clone()
    }
}

/// Decode a PNG into RGB values in `[0, 1]`. Gray is replicated, alpha dropped.
pub fn read_png(path: &Path) -> Result<Image> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: String| Error::Image {
        path: path.to_path_buf(),
        message: m,
    };
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(|e| bad(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| bad("image too large".to_string()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
    let (h, w) = (info.height as usize, info.width as usize);
    let src_c = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(bad("unexpanded palette".to_string())),
    };
    let mut data = Vec::with_capacity(h * w * 3);
    for px in buf[..info.buffer_size()].chunks(src_c) {
        let v = |i: usize| px[i] as f64 / 255.0;
        if src_c < 3 {
            data.extend_from_slice(&[v(0), v(0), v(0)]);
        } else {
            data.extend_from_slice(&[v(0), v(1), v(2)]);
        }
    }
    Image::new(h, w, 3, data)
}

/// Write an RGB image as 8-bit PNG.
pub fn write_png(img: &Image, path: &Path) -> Result<()> {
    if img.channels != 3 {
        return Err(Error::InvalidArgument(format!("png writer expects 3 channels, got {}", img.channels)));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let bad = |e: png::EncodingError| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut writer = enc.write_header().map_err(bad)?;
    writer.write_image_data(&bytes).map_err(bad)?;
    writer.finish().map_err(bad)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
        let data = (0..h * w * 3).map(|_| rng.random::<f64>()).collect();
        Image::new(h, w, 3, data).unwrap()
    }

    /// Direct evaluation: every output pixel sums kernel weights over a window
    /// of virtual source positions, with edge clamping applied per position.
    fn naive_resize(img: &Image, h: usize, w: usize) -> Image {
        let sy = img.height() as f64 / h as f64;
        let sx = img.width() as f64 / w as f64;
        let mut out = Image::filled(h, w, img.channels(), 0.0);
        for oy in 0..h {
            let cy = (oy as f64 + 0.5) * sy - 0.5;
            for ox in 0..w {
                let cx = (ox as f64 + 0.5) * sx - 0.5;
                for c in 0..img.channels() {
                    let (mut acc, mut norm) = (0.0, 0.0);
                    for jy in (cy.floor() as i64 - 3)..=(cy.floor() as i64 + 3) {
                        let wy = cubic_weight(cy - jy as f64);
                        let yy = jy.max(0).min(img.height() as i64 - 1) as usize;
                        for jx in (cx.floor() as i64 - 3)..=(cx.floor() as i64 + 3) {
                            let wx = cubic_weight(cx - jx as f64);
                            let xx = jx.max(0).min(img.width() as i64 - 1) as usize;
                            acc += wy * wx * img.get(yy, xx, c);
                            norm += wy * wx;
                        }
                    }
                    out.set(oy, ox, c, acc / norm);
                }
            }
        }
        out
    }

    #[test]
    fn kernel_values() {
        assert_eq!(cubic_weight(0.0), 1.0);
        assert_eq!(cubic_weight(1.0), 0.0);
        assert_eq!(cubic_weight(-2.0), 0.0);
        assert_eq!(cubic_weight(0.5), 0.5625);
        assert_eq!(cubic_weight(1.5), -0.0625);
    }

    #[test]
    fn taps_sum_to_one() {
        for (src, dst) in [(128, 32), (128, 48), (7, 3), (5, 11), (64, 64)] {
            for (_, w, _) in axis_taps(src, dst) {
                assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = random_image(&mut rng, 8, 8);
        let fast = bicubic_resize_unclamped(&img, 4, 4).unwrap();
        let slow = naive_resize(&img, 4, 4);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-10);
        }
        let up = bicubic_resize_unclamped(&img, 13, 5).unwrap();
        let slow = naive_resize(&img, 13, 5);
        for (a, b) in up.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn constant_and_identity_exact() {
        let img = Image::filled(9, 6, 3, 0.7);
        for (h, w) in [(3, 2), (9, 6), (20, 1)] {
            assert!(bicubic_resize(&img, h, w).unwrap().data().iter().all(|&v| v == 0.7));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = random_image(&mut rng, 7, 5);
        assert_eq!(bicubic_resize_unclamped(&img, 7, 5).unwrap(), img);
    }

    #[test]
    fn resize_rejects_empty() {
        let img = Image::new(0, 0, 3, vec![]).unwrap();
        assert!(bicubic_resize(&img, 2, 2).is_err());
        let img = Image::filled(2, 2, 3, 0.0);
        assert!(bicubic_resize(&img, 0, 2).is_err());
    }

    #[test]
    fn second_resize_to_same_size_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img = random_image(&mut rng, 16, 16);
        let once = bicubic_resize(&img, 6, 6).unwrap();
        let twice = bicubic_resize(&once, 6, 6).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn flip_involution() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let img = random_image(&mut rng, 4, 5);
        assert_ne!(hflip(&img), img);
        assert_eq!(hflip(&hflip(&img)), img);
        let mut sym = Image::filled(2, 3, 3, 0.0);
        sym.set(1, 0, 2, 0.4);
        sym.set(1, 2, 2, 0.4);
        assert_eq!(hflip(&sym), sym);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img = random_image(&mut rng, 5, 7);
        write_png(&img, &path).unwrap();
        let back = read_png(&path).unwrap();
        assert_eq!((back.height(), back.width(), back.channels()), (5, 7, 3));
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        std::fs::write(&path, b"\x89PNG\r\n\x1a\nnot really").unwrap();
        assert!(matches!(read_png(&path), Err(Error::Image { .. })));
        assert!(matches!(read_png(&dir.path().join("missing.png")), Err(Error::Io { .. })));
    }
}
