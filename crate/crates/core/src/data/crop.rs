//! Multi-crop augmentation: two global views shared between teacher and
//! student (same crop geometry, independent photometric jitter) plus a set of
//! small local views for the student.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::Image;
use crate::error::{Error, Result};

const MAX_CROP_ATTEMPTS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CropParams {
    /// Global view size `[height, width]`.
    pub global_size: [usize; 2],
    /// Local view size `[height, width]`.
    pub local_size: [usize; 2],
    /// Area fraction range for global crops.
    pub global_scale: [f64; 2],
    /// Area fraction range for local crops.
    pub local_scale: [f64; 2],
    /// Width / height range of sampled crops (log-uniform).
    pub aspect: [f64; 2],
    pub local_crops: usize,
    pub flip_prob: f64,
    /// Brightness, contrast and saturation factors are drawn from `1 ± strength`.
    pub jitter_strength: f64,
    pub jitter_prob: f64,
    pub grayscale_prob: f64,
}

impl Default for CropParams {
    /// Desk-scale geometry (64×32 globals, 24×16 locals) with the crop rate
    /// and aspect ranges of the 256×128 / 96×64 recipe.
    fn default() -> Self {
        Self {
            global_size: [64, 32],
            local_size: [24, 16],
            global_scale: [0.4, 1.0],
            local_scale: [0.1, 0.8],
            aspect: [3.0 / 8.0, 2.0 / 3.0],
            local_crops: 6,
            flip_prob: 0.5,
            jitter_strength: 0.4,
            jitter_prob: 0.8,
            grayscale_prob: 0.2,
        }
    }
}

impl CropParams {
    /// The best multi-crop setting at full scale: 256×128 input, crop rates
    /// 0.1–0.8 (local) / 0.4–1.0 (global), aspect 3/8–2/3, six 96×64 locals.
    pub fn full_scale() -> Self {
        Self { global_size: [256, 128], local_size: [96, 64], ..Self::default() }
    }

    /// No flip and no photometric change.
    pub fn without_photometric(mut self) -> Self {
        self.flip_prob = 0.0;
        self.jitter_prob = 0.0;
        self.jitter_strength = 0.0;
        self.grayscale_prob = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let range = |name: &str, r: [f64; 2]| {
            if !(r[0] > 0.0 && r[0] <= r[1] && r[1] <= 1.0) {
                return Err(Error::Config(format!("{name} range {r:?} must satisfy 0 < lo <= hi <= 1")));
            }
            Ok(())
        };
        range("global_scale", self.global_scale)?;
        range("local_scale", self.local_scale)?;
        if !(self.aspect[0] > 0.0 && self.aspect[0] <= self.aspect[1] && self.aspect[1].is_finite()) {
            return Err(Error::Config(format!("aspect range {:?} must be positive and ordered", self.aspect)));
        }
        for (name, s) in [("global_size", self.global_size), ("local_size", self.local_size)] {
            if s[0] == 0 || s[1] == 0 {
                return Err(Error::Config(format!("{name} {s:?} must be positive")));
            }
        }
        for (name, p) in [
            ("flip_prob", self.flip_prob),
            ("jitter_prob", self.jitter_prob),
            ("grayscale_prob", self.grayscale_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} {p} must lie in [0, 1]")));
            }
        }
        if !(0.0..1.0).contains(&self.jitter_strength) {
            return Err(Error::Config(format!("jitter_strength {} must lie in [0, 1)", self.jitter_strength)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Geometry of one emitted view.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ViewMeta {
    pub rect: CropRect,
    pub flipped: bool,
    /// Output `[height, width]`.
    pub size: [usize; 2],
}

#[derive(Clone, Debug)]
pub struct MultiCropViews {
    pub teacher_globals: Vec<Image>,
    pub student_globals: Vec<Image>,
    pub locals: Vec<Image>,
    pub global_meta: Vec<ViewMeta>,
    pub local_meta: Vec<ViewMeta>,
}

/// Samples a crop rectangle with area fraction in `scale` and width/height
/// ratio in `aspect`, retrying degenerate or out-of-bounds draws and falling
/// back to the full image.
pub fn sample_crop<R: Rng + ?Sized>(height: usize, width: usize, scale: [f64; 2], aspect: [f64; 2], rng: &mut R) -> CropRect {
    let area = (height * width) as f64;
    let (log_lo, log_hi) = (aspect[0].ln(), aspect[1].ln());
    for _ in 0..MAX_CROP_ATTEMPTS {
        let target = area * uniform(rng, scale[0], scale[1]);
        let ratio = uniform(rng, log_lo, log_hi).exp();
        let w = (target * ratio).sqrt().round();
        let h = (target / ratio).sqrt().round();
        if w >= 1.0 && h >= 1.0 && w as usize <= width && h as usize <= height {
            let (h, w) = (h as usize, w as usize);
            let top = rng.gen_range(0..=height - h);
            let left = rng.gen_range(0..=width - w);
            return CropRect { top, left, height: h, width: w };
        }
    }
    CropRect { top: 0, left: 0, height, width }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Crop, resize and optionally mirror.
pub fn render_view(img: &Image, meta: &ViewMeta) -> Image {
    let r = meta.rect;
    let view = img.crop(r.top, r.left, r.height, r.width).resize(meta.size[0], meta.size[1]);
    if meta.flipped {
        view.flip_horizontal()
    } else {
        view
    }
}

fn gray(p: &[f32]) -> f32 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

/// Brightness / contrast / saturation jitter and random grayscale.
pub fn photometric<R: Rng + ?Sized>(img: &mut Image, p: &CropParams, rng: &mut R) {
    if p.jitter_prob > 0.0 && rng.gen_bool(p.jitter_prob) {
        let s = p.jitter_strength;
        let brightness = uniform(rng, 1.0 - s, 1.0 + s) as f32;
        let contrast = uniform(rng, 1.0 - s, 1.0 + s) as f32;
        let saturation = uniform(rng, 1.0 - s, 1.0 + s) as f32;
        let data = img.data_mut();
        for v in data.iter_mut() {
            *v = (*v * brightness).clamp(0.0, 1.0);
        }
        let mean = data.chunks_exact(3).map(gray).sum::<f32>() / (data.len() / 3) as f32;
        for v in data.iter_mut() {
            *v = ((*v - mean) * contrast + mean).clamp(0.0, 1.0);
        }
        for px in data.chunks_exact_mut(3) {
            let g = gray(px);
            for v in px.iter_mut() {
                *v = ((*v - g) * saturation + g).clamp(0.0, 1.0);
            }
        }
    }
    if p.grayscale_prob > 0.0 && rng.gen_bool(p.grayscale_prob) {
        for px in img.data_mut().chunks_exact_mut(3) {
            let g = gray(px).clamp(0.0, 1.0);
            px.fill(g);
        }
    }
}

fn sample_meta<R: Rng + ?Sized>(img: &Image, scale: [f64; 2], size: [usize; 2], p: &CropParams, rng: &mut R) -> ViewMeta {
    let rect = sample_crop(img.height(), img.width(), scale, p.aspect, rng);
    let flipped = p.flip_prob > 0.0 && rng.gen_bool(p.flip_prob);
    ViewMeta { rect, flipped, size }
}

/// Builds 2 teacher globals, 2 geometry-matched student globals and
/// `p.local_crops` student locals.
pub fn multi_crop_views<R: Rng + ?Sized>(img: &Image, p: &CropParams, rng: &mut R) -> Result<MultiCropViews> {
    p.validate()?;
    let mut teacher_globals = Vec::with_capacity(2);
    let mut student_globals = Vec::with_capacity(2);
    let mut global_meta = Vec::with_capacity(2);
    for _ in 0..2 {
        let meta = sample_meta(img, p.global_scale, p.global_size, p, rng);
        let base = render_view(img, &meta);
        let mut t = base.clone();
        photometric(&mut t, p, rng);
        let mut s = base;
        photometric(&mut s, p, rng);
        teacher_globals.push(t);
        student_globals.push(s);
        global_meta.push(meta);
    }
    let mut locals = Vec::with_capacity(p.local_crops);
    let mut local_meta = Vec::with_capacity(p.local_crops);
    for _ in 0..p.local_crops {
        let meta = sample_meta(img, p.local_scale, p.local_size, p, rng);
        let mut v = render_view(img, &meta);
        photometric(&mut v, p, rng);
        locals.push(v);
        local_meta.push(meta);
    }
    Ok(MultiCropViews { teacher_globals, student_globals, locals, global_meta, local_meta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gradient_image(h: usize, w: usize) -> Image {
        let mut data = Vec::new();
        for r in 0..h {
            for c in 0..w {
                data.extend_from_slice(&[r as f32 / h as f32, c as f32 / w as f32, 0.5]);
            }
        }
        Image::new(h, w, data).unwrap()
    }

    #[test]
    fn identity_crop_returns_resized_full_image() {
        let img = gradient_image(40, 20);
        let p = CropParams {
            global_size: [64, 32],
            global_scale: [1.0, 1.0],
            aspect: [0.5, 0.5],
            local_crops: 0,
            ..CropParams::default()
        }
        .without_photometric();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = multi_crop_views(&img, &p, &mut rng).unwrap();
        let expected = img.resize(64, 32);
        assert_eq!(v.teacher_globals[0], expected);
        assert_eq!(v.student_globals[1], expected);
        assert_eq!(v.global_meta[0].rect, CropRect { top: 0, left: 0, height: 40, width: 20 });
    }

    #[test]
    fn views_have_configured_sizes_and_shared_geometry() {
        let img = gradient_image(64, 32);
        let p = CropParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let v = multi_crop_views(&img, &p, &mut rng).unwrap();
            assert_eq!(v.teacher_globals.len(), 2);
            assert_eq!(v.locals.len(), 6);
            for g in v.teacher_globals.iter().chain(&v.student_globals) {
                assert_eq!((g.height(), g.width()), (64, 32));
            }
            for l in &v.locals {
                assert_eq!((l.height(), l.width()), (24, 16));
            }
        }
        let plain = p.without_photometric();
        let v = multi_crop_views(&img, &plain, &mut rng).unwrap();
        assert_eq!(v.teacher_globals, v.student_globals);
    }

    #[test]
    fn invalid_ranges_are_rejected() {
        let img = gradient_image(8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bad = CropParams { global_scale: [0.5, 0.2], ..CropParams::default() };
        assert!(multi_crop_views(&img, &bad, &mut rng).is_err());
        let bad = CropParams { local_scale: [0.0, 0.2], ..CropParams::default() };
        assert!(bad.validate().is_err());
        let bad = CropParams { aspect: [-1.0, 0.2], ..CropParams::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn tiny_images_fall_back_to_full_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let r = sample_crop(1, 1, [0.1, 0.2], [0.5, 2.0], &mut rng);
        assert_eq!(r, CropRect { top: 0, left: 0, height: 1, width: 1 });
    }
}
