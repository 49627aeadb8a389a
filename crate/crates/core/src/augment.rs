//! View generation: contrastive pairs, multi-crop sets, patch masks and the
//! plain supervised policy.
//!
//! Every function is a pure function of its inputs and a seed. Callers derive
//! one seed per (epoch, sample) so data-loading order never changes a view.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Image;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColorJitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

impl Default for ColorJitter {
    fn default() -> Self {
        Self {
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
        }
    }
}

impl ColorJitter {
    pub fn none() -> Self {
        Self {
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationPolicy {
    /// Area fraction range of global crops.
    pub crop_scale_global: (f64, f64),
    /// Area fraction range of local crops.
    pub crop_scale_local: (f64, f64),
    /// Area fraction range of the plain supervised crop.
    pub crop_scale_plain: (f64, f64),
    /// Aspect ratio range (width / height) of sampled crops.
    pub aspect_ratio: (f64, f64),
    pub global_size: usize,
    pub local_size: usize,
    pub flip_probability: f64,
    pub color_jitter: ColorJitter,
    /// Probability that jitter is applied to a contrastive/multi-crop view.
    pub jitter_probability: f64,
    pub mean: [f64; 3],
    pub std: [f64; 3],
    /// Smallest accepted input side in pixels.
    pub min_input: usize,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            crop_scale_global: (0.4, 1.0),
            crop_scale_local: (0.05, 0.4),
            crop_scale_plain: (0.6, 1.0),
            aspect_ratio: (3.0 / 4.0, 4.0 / 3.0),
            global_size: 32,
            local_size: 16,
            flip_probability: 0.5,
            color_jitter: ColorJitter::default(),
            jitter_probability: 0.8,
            mean: [0.5, 0.5, 0.5],
            std: [0.25, 0.25, 0.25],
            min_input: 8,
        }
    }
}

impl AugmentationPolicy {
    /// Full-image crop, no flip, no jitter.
    pub fn identity(size: usize) -> Self {
        Self {
            crop_scale_global: (1.0, 1.0),
            crop_scale_local: (1.0, 1.0),
            crop_scale_plain: (1.0, 1.0),
            aspect_ratio: (1.0, 1.0),
            global_size: size,
            local_size: size,
            flip_probability: 0.0,
            color_jitter: ColorJitter::none(),
            jitter_probability: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |(lo, hi): (f64, f64)| 0.0 < lo && lo <= hi && hi <= 1.0;
        if !in_unit(self.crop_scale_global) || !in_unit(self.crop_scale_local) || !in_unit(self.crop_scale_plain) {
            return Err(Error::invalid("crop scale ranges must lie within (0, 1]"));
        }
        if self.crop_scale_local.1 > self.crop_scale_global.0 {
            return Err(Error::invalid(
                "local crop upper bound must not exceed the global lower bound",
            ));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) || !(0.0..=1.0).contains(&self.jitter_probability) {
            return Err(Error::invalid("probabilities must lie in [0, 1]"));
        }
        if self.aspect_ratio.0 <= 0.0 || self.aspect_ratio.0 > self.aspect_ratio.1 {
            return Err(Error::invalid("aspect ratio range must be positive and ordered"));
        }
        if self.global_size == 0 || self.local_size == 0 {
            return Err(Error::invalid("view sizes must be positive"));
        }
        if self.std.iter().any(|&s| s <= 0.0) {
            return Err(Error::invalid("normalization std must be positive"));
        }
        Ok(())
    }

    /// Sets the normalization constants to the per-channel mean and standard
    /// deviation of `images`.
    pub fn fit_normalization<'a>(&mut self, images: impl IntoIterator<Item = &'a Image>) {
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        let mut n = 0usize;
        for img in images {
            for px in img.data.chunks_exact(3) {
                for c in 0..3 {
                    sum[c] += px[c] as f64;
                    sq[c] += (px[c] as f64).powi(2);
                }
                n += 1;
            }
        }
        if n == 0 {
            return;
        }
        for c in 0..3 {
            let m = sum[c] / n as f64;
            self.mean[c] = m;
            self.std[c] = (sq[c] / n as f64 - m * m).max(1e-6).sqrt();
        }
    }
}

/// Source rectangle of a crop in input pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropBox {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
    /// Crop area over input image area.
    pub area_fraction: f64,
}

/// A normalized `size × size × 3` view.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub size: usize,
    pub data: Vec<f32>,
    pub crop: CropBox,
    pub flipped: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    pub view_a: View,
    pub view_b: View,
    pub source_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiCropSet {
    pub globals: [View; 2],
    pub locals: Vec<View>,
}

impl MultiCropSet {
    pub fn k(&self) -> usize {
        self.locals.len()
    }

    /// Globals first, then locals, in generation order.
    pub fn views(&self) -> impl Iterator<Item = &View> {
        self.globals.iter().chain(self.locals.iter())
    }
}

fn check_input(image: &Image, policy: &AugmentationPolicy) -> Result<()> {
    if image.width < policy.min_input || image.height < policy.min_input {
        return Err(Error::invalid(format!(
            "{}x{} image is below the {}-pixel crop floor",
            image.width, image.height, policy.min_input
        )));
    }
    Ok(())
}

fn sample_crop(image: &Image, scale: (f64, f64), ratio: (f64, f64), r: &mut impl Rng) -> CropBox {
    let (w, h) = (image.width as f64, image.height as f64);
    let area = w * h;
    for _ in 0..10 {
        let s = if scale.0 == scale.1 { scale.0 } else { r.gen_range(scale.0..scale.1) };
        let ar = if ratio.0 == ratio.1 {
            ratio.0
        } else {
            r.gen_range(ratio.0.ln()..ratio.1.ln()).exp()
        };
        let cw = (s * area * ar).sqrt();
        let ch = (s * area / ar).sqrt();
        if cw <= w + 1e-9 && ch <= h + 1e-9 {
            let x = if w - cw > 1e-9 { r.gen_range(0.0..w - cw) } else { 0.0 };
            let y = if h - ch > 1e-9 { r.gen_range(0.0..h - ch) } else { 0.0 };
            return CropBox {
                x,
                y,
                width: cw.min(w),
                height: ch.min(h),
                area_fraction: (cw.min(w) * ch.min(h)) / area,
            };
        }
    }
    // square fallback at the lower scale bound, centred
    let side = (scale.0 * area).sqrt().min(w).min(h);
    CropBox {
        x: (w - side) / 2.0,
        y: (h - side) / 2.0,
        width: side,
        height: side,
        area_fraction: side * side / area,
    }
}

fn bilinear(image: &Image, crop: CropBox, size: usize, flip: bool) -> Vec<f32> {
    let mut out = Vec::with_capacity(size * size * 3);
    let (sx, sy) = (crop.width / size as f64, crop.height / size as f64);
    let maxx = (image.width - 1) as f64;
    let maxy = (image.height - 1) as f64;
    for oy in 0..size {
        let fy = (crop.y + (oy as f64 + 0.5) * sy - 0.5).clamp(0.0, maxy);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(image.height - 1);
        let ty = (fy - y0 as f64) as f32;
        for ox in 0..size {
            let ox = if flip { size - 1 - ox } else { ox };
            let fx = (crop.x + (ox as f64 + 0.5) * sx - 0.5).clamp(0.0, maxx);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(image.width - 1);
            let tx = (fx - x0 as f64) as f32;
            let (p00, p01) = (image.pixel(x0, y0), image.pixel(x1, y0));
            let (p10, p11) = (image.pixel(x0, y1), image.pixel(x1, y1));
            for c in 0..3 {
                let top = p00[c] + (p01[c] - p00[c]) * tx;
                let bot = p10[c] + (p11[c] - p10[c]) * tx;
                out.push(top + (bot - top) * ty);
            }
        }
    }
    out
}

fn jitter(pixels: &mut [f32], j: &ColorJitter, r: &mut impl Rng) {
    let mut factor = |amp: f64| if amp > 0.0 { r.gen_range(1.0 - amp..1.0 + amp) as f32 } else { 1.0 };
    let (b, c, s) = (factor(j.brightness), factor(j.contrast), factor(j.saturation));
    let gray = |p: &[f32]| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
    for p in pixels.chunks_exact_mut(3) {
        for v in p.iter_mut() {
            *v = (*v * b).clamp(0.0, 1.0);
        }
    }
    let mean = pixels.chunks_exact(3).map(gray).sum::<f32>() / (pixels.len() / 3).max(1) as f32;
    for p in pixels.chunks_exact_mut(3) {
        for v in p.iter_mut() {
            *v = (mean + (*v - mean) * c).clamp(0.0, 1.0);
        }
        let g = gray(p);
        for v in p.iter_mut() {
            *v = (g + (*v - g) * s).clamp(0.0, 1.0);
        }
    }
}

fn normalize(pixels: &mut [f32], policy: &AugmentationPolicy) {
    let mean = policy.mean.map(|v| v as f32);
    let inv = policy.std.map(|v| 1.0 / v as f32);
    for p in pixels.chunks_exact_mut(3) {
        for c in 0..3 {
            p[c] = (p[c] - mean[c]) * inv[c];
        }
    }
}

fn make_view(
    image: &Image,
    policy: &AugmentationPolicy,
    scale: (f64, f64),
    size: usize,
    with_jitter: bool,
    r: &mut impl Rng,
) -> View {
    let crop = sample_crop(image, scale, policy.aspect_ratio, r);
    let flipped = policy.flip_probability > 0.0 && r.gen_bool(policy.flip_probability);
    let mut data = bilinear(image, crop, size, flipped);
    if with_jitter && policy.jitter_probability > 0.0 && r.gen_bool(policy.jitter_probability) {
        jitter(&mut data, &policy.color_jitter, r);
    }
    normalize(&mut data, policy);
    View {
        size,
        data,
        crop,
        flipped,
    }
}

/// Two independently augmented global views of one image.
pub fn make_view_pair(image: &Image, policy: &AugmentationPolicy, seed: u64) -> Result<ViewPair> {
    check_input(image, policy)?;
    let view = |i: u64| {
        let mut r = rng::stream(seed, &[i]);
        make_view(image, policy, policy.crop_scale_global, policy.global_size, true, &mut r)
    };
    Ok(ViewPair {
        view_a: view(0),
        view_b: view(1),
        source_index: 0,
    })
}

/// Two global crops followed by `k` local crops.
pub fn make_multicrop(image: &Image, k: i64, policy: &AugmentationPolicy, seed: u64) -> Result<MultiCropSet> {
    if k < 0 {
        return Err(Error::invalid(format!("local crop count must be non-negative, got {k}")));
    }
    check_input(image, policy)?;
    let view = |i: u64, scale, size| {
        let mut r = rng::stream(seed, &[i]);
        make_view(image, policy, scale, size, true, &mut r)
    };
    let globals = [
        view(0, policy.crop_scale_global, policy.global_size),
        view(1, policy.crop_scale_global, policy.global_size),
    ];
    let locals = (0..k as u64)
        .map(|i| view(2 + i, policy.crop_scale_local, policy.local_size))
        .collect();
    Ok(MultiCropSet { globals, locals })
}

/// Random crop and flip, no colour jitter; used for supervised training.
pub fn make_train_view(image: &Image, policy: &AugmentationPolicy, seed: u64) -> Result<View> {
    check_input(image, policy)?;
    let mut r = rng::stream(seed, &[0]);
    Ok(make_view(image, policy, policy.crop_scale_plain, policy.global_size, false, &mut r))
}

/// Deterministic full-image view for inference.
pub fn make_eval_view(image: &Image, policy: &AugmentationPolicy) -> Result<View> {
    check_input(image, policy)?;
    let crop = CropBox {
        x: 0.0,
        y: 0.0,
        width: image.width as f64,
        height: image.height as f64,
        area_fraction: 1.0,
    };
    let mut data = bilinear(image, crop, policy.global_size, false);
    normalize(&mut data, policy);
    Ok(View {
        size: policy.global_size,
        data,
        crop,
        flipped: false,
    })
}

/// Set of masked patches on a `grid_h × grid_w` patch grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSpec {
    pub grid_h: usize,
    pub grid_w: usize,
    /// Sorted, unique patch indices (row-major).
    pub masked: Vec<usize>,
}

impl MaskSpec {
    pub fn new(grid_h: usize, grid_w: usize, mut masked: Vec<usize>) -> Result<Self> {
        masked.sort_unstable();
        masked.dedup();
        if masked.last().is_some_and(|&m| m >= grid_h * grid_w) {
            return Err(Error::invalid("masked patch index out of range"));
        }
        Ok(Self { grid_h, grid_w, masked })
    }

    pub fn patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn ratio(&self) -> f64 {
        self.masked.len() as f64 / self.patches() as f64
    }

    pub fn is_masked(&self, patch: usize) -> bool {
        self.masked.binary_search(&patch).is_ok()
    }

    pub fn visible(&self) -> Vec<usize> {
        (0..self.patches()).filter(|&p| !self.is_masked(p)).collect()
    }

    /// Per-pixel mask for patches of `patch × patch` pixels.
    pub fn pixel_mask(&self, patch: usize) -> Vec<bool> {
        let (w, h) = (self.grid_w * patch, self.grid_h * patch);
        (0..h * w)
            .map(|i| self.is_masked((i / w / patch) * self.grid_w + (i % w) / patch))
            .collect()
    }
}

/// Uniformly random set of `floor(ratio · grid_h · grid_w)` patches.
pub fn make_mask(grid_h: usize, grid_w: usize, ratio: f64, seed: u64) -> Result<MaskSpec> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::invalid(format!("mask ratio {ratio} outside [0, 1]")));
    }
    let n = grid_h * grid_w;
    let count = ((ratio * n as f64).floor() as usize).min(n);
    let mut r = rng::stream(seed, &[rng::tag::MASK]);
    MaskSpec::new(grid_h, grid_w, sample(&mut r, n, count).into_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{render_sample, SyntheticCorpusSpec};

    fn sample_image(size: u32) -> Image {
        render_sample(&SyntheticCorpusSpec::uniform(3, 1, size, 2), 1, 0)
    }

    #[test]
    fn identity_policy_views_equal_normalized_input() {
        let img = sample_image(32);
        let policy = AugmentationPolicy::identity(32);
        let pair = make_view_pair(&img, &policy, 5).unwrap();
        assert_eq!(pair.view_a.data, pair.view_b.data);
        let mut expected = img.data.clone();
        normalize(&mut expected, &policy);
        for (a, b) in pair.view_a.data.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn views_are_deterministic_and_bounded() {
        let img = sample_image(64);
        let policy = AugmentationPolicy {
            crop_scale_global: (0.5, 1.0),
            ..AugmentationPolicy::default()
        };
        let a = make_view_pair(&img, &policy, 9).unwrap();
        assert_eq!(a, make_view_pair(&img, &policy, 9).unwrap());
        let lo = ((0.0 - 0.5) / 0.25) as f32;
        let hi = ((1.0 - 0.5) / 0.25) as f32;
        for v in [&a.view_a, &a.view_b] {
            assert_eq!(v.data.len(), 32 * 32 * 3);
            assert!(v.data.iter().all(|x| x.is_finite() && *x >= lo - 1e-5 && *x <= hi + 1e-5));
            assert!(v.crop.area_fraction >= 0.5 - 1e-9);
        }
    }

    #[test]
    fn small_images_are_rejected() {
        let img = Image::new(4, 4, vec![0.0; 48]).unwrap();
        assert!(make_view_pair(&img, &AugmentationPolicy::default(), 0).is_err());
        assert!(make_multicrop(&sample_image(32), -1, &AugmentationPolicy::default(), 0).is_err());
    }

    #[test]
    fn multicrop_counts_and_areas() {
        let img = sample_image(32);
        let policy = AugmentationPolicy::default();
        let set = make_multicrop(&img, 6, &policy, 3).unwrap();
        assert_eq!(set.views().count(), 8);
        let set0 = make_multicrop(&img, 0, &policy, 3).unwrap();
        assert_eq!(set0.views().count(), 2);
        for l in &set.locals {
            assert_eq!(l.size, policy.local_size);
            for g in &set.globals {
                assert!(l.crop.area_fraction < g.crop.area_fraction);
            }
        }
    }

    #[test]
    fn mask_cardinality_examples() {
        assert_eq!(make_mask(14, 14, 0.75, 1).unwrap().masked.len(), 147);
        assert!(make_mask(14, 14, 0.0, 1).unwrap().masked.is_empty());
        assert_eq!(make_mask(14, 14, 1.0, 1).unwrap().masked.len(), 196);
        assert!(make_mask(4, 4, 1.5, 1).is_err());
        assert!(make_mask(4, 4, -0.1, 1).is_err());
    }

    #[test]
    fn pixel_mask_maps_patches() {
        let m = MaskSpec::new(2, 2, vec![1]).unwrap();
        let px = m.pixel_mask(2);
        // 4x4 pixels; patch 1 is the top-right 2x2 block
        let expected: Vec<bool> = (0..16).map(|i| (i / 4) < 2 && (i % 4) >= 2).collect();
        assert_eq!(px, expected);
        assert_eq!(m.visible(), vec![0, 2, 3]);
    }
}
