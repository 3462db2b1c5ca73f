//! Procedural shape images, corruption transforms and test streams.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 32;
pub const NUM_CLASSES: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn stream_id(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Test => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeClass {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
    HorizontalBar,
    VerticalBar,
    DotGrid,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; NUM_CLASSES] = [
        ShapeClass::Circle,
        ShapeClass::Square,
        ShapeClass::Triangle,
        ShapeClass::Cross,
        ShapeClass::Ring,
        ShapeClass::HorizontalBar,
        ShapeClass::VerticalBar,
        ShapeClass::DotGrid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Circle => "circle",
            ShapeClass::Square => "square",
            ShapeClass::Triangle => "triangle",
            ShapeClass::Cross => "cross",
            ShapeClass::Ring => "ring",
            ShapeClass::HorizontalBar => "horizontal_bar",
            ShapeClass::VerticalBar => "vertical_bar",
            ShapeClass::DotGrid => "dot_grid",
        }
    }

    /// Whether the offset `(dx, dy)` from the shape centre is inside a shape of size `r`.
    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        let (ax, ay) = (math::abs(dx), math::abs(dy));
        match self {
            ShapeClass::Circle => dx * dx + dy * dy <= r * r,
            ShapeClass::Square => ax <= 0.8 * r && ay <= 0.8 * r,
            ShapeClass::Triangle => dy >= -r && dy <= 0.8 * r && ax <= (dy + r) / 1.8,
            ShapeClass::Cross => (ax <= 0.25 * r && ay <= r) || (ay <= 0.25 * r && ax <= r),
            ShapeClass::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= 0.3025 * r * r
            }
            ShapeClass::HorizontalBar => ax <= r && ay <= 0.3 * r,
            ShapeClass::VerticalBar => ay <= r && ax <= 0.3 * r,
            ShapeClass::DotGrid => {
                let pitch = 0.7 * r;
                let dot = 0.22 * r;
                [-pitch, 0.0, pitch].iter().any(|&cx| {
                    [-pitch, 0.0, pitch].iter().any(|&cy| {
                        let (ex, ey) = (dx - cx, dy - cy);
                        ex * ex + ey * ey <= dot * dot
                    })
                })
            }
        }
    }
}

/// Labelled single-channel images in `[0, 1]`, `[N, 1, 32, 32]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeDataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub split: Split,
    pub seed: u64,
}

impl ShapeDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Images at `indices`, stacked in order.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        gather_rows(&self.images, indices)
    }

    pub fn class_histogram(&self) -> [usize; NUM_CLASSES] {
        let mut h = [0; NUM_CLASSES];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

pub(crate) fn gather_rows(images: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let n = images.shape()[0];
    let row = images.numel() / n;
    let mut data = Vec::with_capacity(row * indices.len());
    for &i in indices {
        if i >= n {
            return Err(Error::Index { index: i, len: n });
        }
        data.extend_from_slice(&images.data()[i * row..(i + 1) * row]);
    }
    let mut shape = images.shape().to_vec();
    shape[0] = indices.len();
    Tensor::new(&shape, data)
}

fn render(class: ShapeClass, rng: &mut impl Rng, out: &mut [f64]) {
    let half = IMAGE_SIZE as f64 / 2.0;
    let cx = half + rng.random_range(-6.0..=6.0);
    let cy = half + rng.random_range(-6.0..=6.0);
    let r = 10.0 * rng.random_range(0.6..=1.0);
    let fg = rng.random_range(0.6..=1.0);
    let bg = rng.random_range(0.0..=0.2);
    const SUB: [f64; 2] = [0.25, 0.75];
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let mut hits = 0;
            for sy in SUB {
                for sx in SUB {
                    if class.contains(x as f64 + sx - cx, y as f64 + sy - cy, r) {
                        hits += 1;
                    }
                }
            }
            let cover = f64::from(hits) / 4.0;
            out[y * IMAGE_SIZE + x] = bg + (fg - bg) * cover;
        }
    }
}

/// Renders `n` shapes, class-balanced to within one and shuffled.
pub fn generate_shapes(n: usize, split: Split, seed: u64) -> Result<ShapeDataset> {
    if n < NUM_CLASSES {
        return Err(Error::contract("need at least one sample per class"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(split.stream_id());
    let mut labels: Vec<usize> = (0..n).map(|i| i % NUM_CLASSES).collect();
    labels.shuffle(&mut rng);
    let px = IMAGE_SIZE * IMAGE_SIZE;
    let mut data = vec![0.0; n * px];
    for (i, &l) in labels.iter().enumerate() {
        render(ShapeClass::ALL[l], &mut rng, &mut data[i * px..(i + 1) * px]);
    }
    Ok(ShapeDataset {
        images: Tensor::new(&[n, 1, IMAGE_SIZE, IMAGE_SIZE], data)?,
        labels,
        split,
        seed,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CorruptionFamily {
    GaussianNoise,
    ShotNoise,
    Blur,
    Contrast,
    Brightness,
    Pixelate,
}

impl CorruptionFamily {
    pub const ALL: [CorruptionFamily; 6] = [
        CorruptionFamily::GaussianNoise,
        CorruptionFamily::ShotNoise,
        CorruptionFamily::Blur,
        CorruptionFamily::Contrast,
        CorruptionFamily::Brightness,
        CorruptionFamily::Pixelate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionFamily::GaussianNoise => "gaussian_noise",
            CorruptionFamily::ShotNoise => "shot_noise",
            CorruptionFamily::Blur => "blur",
            CorruptionFamily::Contrast => "contrast",
            CorruptionFamily::Brightness => "brightness",
            CorruptionFamily::Pixelate => "pixelate",
        }
    }

    pub fn is_noise(self) -> bool {
        matches!(self, CorruptionFamily::GaussianNoise | CorruptionFamily::ShotNoise)
    }
}

impl fmt::Display for CorruptionFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::contract(alloc::format!("unknown corruption family {s:?}")))
    }
}

/// A corruption family at severity `0..=5` (0 is the identity).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Corruption {
    pub family: CorruptionFamily,
    pub severity: u8,
    pub seed: u64,
}

const GAUSS_SIGMA: [f64; 5] = [0.04, 0.08, 0.12, 0.18, 0.26];
const SHOT_RATE: [f64; 5] = [60.0, 25.0, 12.0, 5.0, 3.0];
const BLUR_WIDTH: [usize; 5] = [1, 2, 3, 4, 5];
const BLUR_PASSES: [usize; 5] = [1, 1, 2, 2, 3];
const CONTRAST: [f64; 5] = [0.75, 0.5, 0.4, 0.3, 0.15];
const BRIGHTNESS: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];
const PIXELATE: [usize; 5] = [1, 2, 2, 4, 4];

impl Corruption {
    pub fn new(family: CorruptionFamily, severity: u8, seed: u64) -> Result<Self> {
        if severity > 5 {
            return Err(Error::contract(alloc::format!("severity {severity} outside 0..=5")));
        }
        Ok(Self { family, severity, seed })
    }

    pub fn identity() -> Self {
        Self {
            family: CorruptionFamily::GaussianNoise,
            severity: 0,
            seed: 0,
        }
    }
}

/// Box filter along rows then columns, clamping at the edges. Even widths
/// lean one pixel towards lower indices.
fn box_blur(plane: &mut [f64], h: usize, w: usize, width: usize) {
    if width <= 1 {
        return;
    }
    let lo = -((width / 2) as isize);
    let hi = lo + width as isize - 1;
    let norm = 1.0 / width as f64;
    let mut tmp = vec![0.0; plane.len()];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for o in lo..=hi {
                let xx = (x as isize + o).clamp(0, w as isize - 1) as usize;
                s += plane[y * w + xx];
            }
            tmp[y * w + x] = s * norm;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for o in lo..=hi {
                let yy = (y as isize + o).clamp(0, h as isize - 1) as usize;
                s += tmp[yy * w + x];
            }
            plane[y * w + x] = s * norm;
        }
    }
}

/// Block-mean downsampling by `f`, then nearest-neighbour upsampling.
fn pixelate(plane: &mut [f64], h: usize, w: usize, f: usize) {
    if f <= 1 {
        return;
    }
    for by in (0..h).step_by(f) {
        for bx in (0..w).step_by(f) {
            let (ey, ex) = ((by + f).min(h), (bx + f).min(w));
            let mut s = 0.0;
            for y in by..ey {
                for x in bx..ex {
                    s += plane[y * w + x];
                }
            }
            let mean = s / ((ey - by) * (ex - bx)) as f64;
            for y in by..ey {
                for x in bx..ex {
                    plane[y * w + x] = mean;
                }
            }
        }
    }
}

/// Applies `c` to `[N, C, H, W]` images in `[0, 1]`; outputs are clamped to `[0, 1]`.
pub fn corrupt(images: &Tensor, c: &Corruption) -> Result<Tensor> {
    if c.severity > 5 {
        return Err(Error::contract(alloc::format!("severity {} outside 0..=5", c.severity)));
    }
    if images.rank() != 4 {
        return Err(Error::dim("corrupt", images.shape(), &[]));
    }
    if c.severity == 0 {
        return Ok(images.clone());
    }
    let s = usize::from(c.severity) - 1;
    let (h, w) = (images.shape()[2], images.shape()[3]);
    let mut out = images.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let data = out.data_mut();
    match c.family {
        CorruptionFamily::GaussianNoise => {
            let noise = Normal::new(0.0, GAUSS_SIGMA[s]).expect("positive sigma");
            data.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
        }
        CorruptionFamily::ShotNoise => {
            let rate = SHOT_RATE[s];
            for v in data.iter_mut() {
                let lambda = rate * v.clamp(0.0, 1.0);
                *v = if lambda > 0.0 {
                    let p = Poisson::new(lambda).expect("positive rate");
                    p.sample(&mut rng) / rate
                } else {
                    0.0
                };
            }
        }
        CorruptionFamily::Blur => {
            for plane in data.chunks_mut(h * w) {
                for _ in 0..BLUR_PASSES[s] {
                    box_blur(plane, h, w, BLUR_WIDTH[s]);
                }
            }
        }
        CorruptionFamily::Contrast => {
            let k = CONTRAST[s];
            data.iter_mut().for_each(|v| *v = (*v - 0.5) * k + 0.5);
        }
        CorruptionFamily::Brightness => {
            let b = BRIGHTNESS[s];
            data.iter_mut().for_each(|v| *v += b);
        }
        CorruptionFamily::Pixelate => {
            for plane in data.chunks_mut(h * w) {
                pixelate(plane, h, w, PIXELATE[s]);
            }
        }
    }
    data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(out)
}

/// Seed for the `index`-th derived stream of `base`.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(index.wrapping_add(1));
    rng.next_u64()
}

/// One corrupted test batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// Dataset indices of the samples, in batch order.
    pub indices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchStream {
    pub batches: Vec<Batch>,
    pub batch_size: usize,
    pub drop_last: bool,
    pub seed: u64,
}

impl BatchStream {
    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    pub fn num_samples(&self) -> usize {
        self.batches.iter().map(|b| b.labels.len()).sum()
    }
}

/// Shuffles once with `seed`, chunks into batches and corrupts each batch
/// with its own seed derived from `corruption.seed`.
pub fn stream(
    dataset: &ShapeDataset,
    corruption: &Corruption,
    batch_size: usize,
    seed: u64,
    drop_last: bool,
) -> Result<BatchStream> {
    if batch_size == 0 || batch_size > dataset.len() {
        return Err(Error::contract(alloc::format!(
            "batch size {batch_size} must lie in 1..={}",
            dataset.len()
        )));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut batches = Vec::new();
    for (b, chunk) in order.chunks(batch_size).enumerate() {
        if drop_last && chunk.len() < batch_size {
            break;
        }
        let clean = dataset.gather(chunk)?;
        let c = Corruption {
            seed: derive_seed(corruption.seed, b as u64),
            ..*corruption
        };
        batches.push(Batch {
            images: corrupt(&clean, &c)?,
            labels: chunk.iter().map(|&i| dataset.labels[i]).collect(),
            indices: chunk.to_vec(),
        });
    }
    Ok(BatchStream {
        batches,
        batch_size,
        drop_last,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ShapeDataset {
        generate_shapes(64, Split::Test, 5).unwrap()
    }

    #[test]
    fn generation_contract() {
        let a = generate_shapes(800, Split::Train, 1).unwrap();
        assert_eq!(a.images.shape(), &[800, 1, 32, 32]);
        assert_eq!(a.class_histogram(), [100; 8]);
        assert!(a.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let b = generate_shapes(800, Split::Train, 1).unwrap();
        assert!(a.images.bit_eq(&b.images) && a.labels == b.labels);
        let t = generate_shapes(800, Split::Test, 1).unwrap();
        assert!(!a.images.bit_eq(&t.images));
        let odd = generate_shapes(13, Split::Test, 2).unwrap();
        assert!(odd.class_histogram().iter().all(|&c| c == 1 || c == 2));
        assert!(generate_shapes(7, Split::Train, 0).is_err());
    }

    #[test]
    fn classes_have_distinct_masks() {
        let mut masks = Vec::new();
        for class in ShapeClass::ALL {
            let mut m = vec![0.0; IMAGE_SIZE * IMAGE_SIZE];
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            render(class, &mut rng, &mut m);
            let fg = m.iter().filter(|&&v| v > 0.5).count();
            assert!(fg > 20, "{class:?} covers {fg} pixels");
            masks.push(m);
        }
        for i in 0..masks.len() {
            for j in i + 1..masks.len() {
                assert_ne!(masks[i], masks[j]);
            }
        }
    }

    #[test]
    fn severity_zero_is_identity() {
        let d = small();
        for family in CorruptionFamily::ALL {
            let c = Corruption::new(family, 0, 3).unwrap();
            assert!(corrupt(&d.images, &c).unwrap().bit_eq(&d.images));
        }
        assert!(Corruption::new(CorruptionFamily::Blur, 6, 0).is_err());
        let bad = Corruption {
            family: CorruptionFamily::Blur,
            severity: 9,
            seed: 0,
        };
        assert!(corrupt(&d.images, &bad).is_err());
    }

    #[test]
    fn contrast_fixes_mid_grey() {
        let grey = Tensor::full(&[1, 1, 32, 32], 0.5);
        let c = Corruption::new(CorruptionFamily::Contrast, 5, 0).unwrap();
        assert!(corrupt(&grey, &c).unwrap().bit_eq(&grey));
    }

    #[test]
    fn gaussian_noise_deviation() {
        let grey = Tensor::full(&[64, 1, 32, 32], 0.5);
        let c = Corruption::new(CorruptionFamily::GaussianNoise, 3, 9).unwrap();
        let out = corrupt(&grey, &c).unwrap();
        let mad = out.data().iter().map(|v| (v - 0.5).abs()).sum::<f64>() / out.numel() as f64;
        let want = 0.12 * (2.0 / core::f64::consts::PI).sqrt();
        assert!((mad - want).abs() < 0.002, "{mad} vs {want}");
    }

    #[test]
    fn every_family_clamps() {
        let d = small();
        for family in CorruptionFamily::ALL {
            for severity in 1..=5 {
                let out = corrupt(&d.images, &Corruption::new(family, severity, 4).unwrap()).unwrap();
                assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)), "{family} {severity}");
            }
        }
    }

    #[test]
    fn blur_and_pixelate_by_hand() {
        let mut row = vec![0.0, 0.0, 3.0, 0.0];
        box_blur(&mut row, 1, 4, 3);
        assert_eq!(row, [0.0, 1.0, 1.0, 1.0]);
        let mut row = vec![0.0, 2.0, 0.0, 0.0];
        box_blur(&mut row, 1, 4, 2);
        assert_eq!(row, [0.0, 1.0, 1.0, 0.0]);
        let mut row = vec![4.0, 2.0, 0.0, 0.0];
        box_blur(&mut row, 1, 4, 1);
        assert_eq!(row, [4.0, 2.0, 0.0, 0.0]);
        let mut p = vec![1.0, 3.0, 0.0, 0.0, 5.0, 7.0, 0.0, 4.0];
        pixelate(&mut p, 2, 4, 2);
        assert_eq!(p, [4.0, 4.0, 1.0, 1.0, 4.0, 4.0, 1.0, 1.0]);
    }

    #[test]
    fn brightness_and_shot_noise_shift_means() {
        let grey = Tensor::full(&[16, 1, 32, 32], 0.3);
        let b = corrupt(&grey, &Corruption::new(CorruptionFamily::Brightness, 2, 0).unwrap()).unwrap();
        assert!(b.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
        let s = corrupt(&grey, &Corruption::new(CorruptionFamily::ShotNoise, 1, 0).unwrap()).unwrap();
        let mean = s.data().iter().sum::<f64>() / s.numel() as f64;
        assert!((mean - 0.3).abs() < 0.01);
    }

    #[test]
    fn stream_contract() {
        let d = generate_shapes(640, Split::Test, 8).unwrap();
        let c = Corruption::new(CorruptionFamily::GaussianNoise, 5, 10).unwrap();
        let s = stream(&d, &c, 64, 11, false).unwrap();
        assert_eq!(s.len(), 10);
        let mut all: Vec<usize> = s.batches.iter().flat_map(|b| b.indices.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..640).collect::<Vec<_>>());
        assert_eq!(s, stream(&d, &c, 64, 11, false).unwrap());
        assert_ne!(s.batches[0].indices, stream(&d, &c, 64, 12, false).unwrap().batches[0].indices);
        assert!(!s.batches[0].images.bit_eq(&s.batches[1].images));
        for b in &s.batches {
            let labels: Vec<usize> = b.indices.iter().map(|&i| d.labels[i]).collect();
            assert_eq!(labels, b.labels);
        }

        let short = stream(&d, &c, 100, 11, false).unwrap();
        assert_eq!(short.len(), 7);
        assert_eq!(short.num_samples(), 640);
        assert_eq!(stream(&d, &c, 100, 11, true).unwrap().num_samples(), 600);
        assert!(stream(&d, &c, 641, 11, false).is_err());
    }
}
