//! Procedural layered scenes with known transmission, reflection, blend
//! factor, depth and reflection mask.
//!
//! Each layer is a small perspective scene: a sky band, a ground plane whose
//! depth grows toward the horizon, and a handful of soft-edged primitives
//! standing on the ground. Atmospheric haze grows with depth, so apparent
//! saturation and contrast carry a monocular depth cue. Reflection layers are
//! rendered with the same generator at much smaller depths, then optionally
//! blurred and ghosted.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_shape, Error, Result};
use crate::image::{DepthMap, Image, Mask};
use crate::rng::rng_from_seed;

/// Reflection mask threshold used by the masked evaluation protocol.
pub const DEFAULT_MASK_THRESHOLD: f32 = 5.0 / 255.0;

/// Distance at which haze reaches `1 - 1/e`.
const HAZE_DISTANCE: f32 = 10.0;
const HAZE_COLOR: [f32; 3] = [0.78, 0.82, 0.86];

/// Closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f32,
    pub hi: f32,
}

impl Interval {
    pub const fn new(lo: f32, hi: f32) -> Self {
        Self { lo, hi }
    }

    pub fn is_valid(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f32 {
        if self.hi > self.lo {
            rng.random_range(self.lo..=self.hi)
        } else {
            self.lo
        }
    }

    pub fn contains(&self, v: f32) -> bool {
        v >= self.lo && v <= self.hi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneParams {
    pub image_size: usize,
    pub alpha_range: Interval,
    pub reflection_blur_sigma_range: Interval,
    pub ghosting_probability: f32,
    pub ghost_shift_range: Interval,
    pub ghost_weight: f32,
    pub background_depth_range: Interval,
    pub reflection_depth_range: Interval,
    /// Inclusive range of primitives per layer.
    pub primitives: (usize, usize),
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            image_size: 64,
            alpha_range: Interval::new(0.1, 0.5),
            reflection_blur_sigma_range: Interval::new(0.0, 2.0),
            ghosting_probability: 0.3,
            ghost_shift_range: Interval::new(1.0, 4.0),
            ghost_weight: 0.5,
            background_depth_range: Interval::new(4.0, 20.0),
            reflection_depth_range: Interval::new(0.5, 2.0),
            primitives: (2, 5),
        }
    }
}

impl SceneParams {
    /// Defaults with `alpha` drawn from the whole unit interval, as used for
    /// autoencoder corpora.
    pub fn full_alpha() -> Self {
        Self { alpha_range: Interval::new(0.0, 1.0), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size < crate::image::MIN_SIDE {
            return bad(format!("image_size {} below {}", self.image_size, crate::image::MIN_SIDE));
        }
        let a = self.alpha_range;
        if !a.is_valid() || a.lo < 0.0 || a.hi > 1.0 {
            return bad(format!("alpha_range [{}, {}] not inside [0, 1]", a.lo, a.hi));
        }
        let s = self.reflection_blur_sigma_range;
        if !s.is_valid() || s.lo < 0.0 {
            return bad("reflection_blur_sigma_range must be a nonnegative interval".into());
        }
        if !(0.0..=1.0).contains(&self.ghosting_probability) {
            return bad(format!("ghosting_probability {} outside [0, 1]", self.ghosting_probability));
        }
        let g = self.ghost_shift_range;
        if !g.is_valid() || g.lo < 0.0 || g.hi >= self.image_size as f32 {
            return bad("ghost_shift_range must be a nonnegative interval smaller than the image".into());
        }
        if !(0.0..=1.0).contains(&self.ghost_weight) {
            return bad(format!("ghost_weight {} outside [0, 1]", self.ghost_weight));
        }
        let (b, r) = (self.background_depth_range, self.reflection_depth_range);
        if !b.is_valid() || !r.is_valid() || b.lo <= 0.0 || r.lo <= 0.0 {
            return bad("depth ranges must be positive intervals".into());
        }
        if b.hi <= b.lo || r.hi <= r.lo {
            return bad("depth ranges must have positive width".into());
        }
        if r.hi >= b.lo {
            return bad(format!("reflection depths (max {}) must lie below background depths (min {})", r.hi, b.lo));
        }
        if self.primitives.0 > self.primitives.1 {
            return bad("primitive count range is empty".into());
        }
        Ok(())
    }
}

/// One synthetic ground-truth instance of `observed = (1 - alpha) B + alpha R`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayeredSample {
    pub background: Image,
    pub reflection: Image,
    pub alpha: f32,
    pub observed: Image,
    /// Depth of the clean background scene.
    pub depth: DepthMap,
    pub mask: Mask,
}

impl LayeredSample {
    /// Re-checks the blend and mask invariants.
    pub fn check_invariants(&self) -> Result<()> {
        let expect = blend(&self.background, &self.reflection, self.alpha)?;
        if expect != self.observed {
            return Err(Error::Domain("observed image is not the blend of its layers".into()));
        }
        let mask = reflection_mask(&self.observed, &self.background, DEFAULT_MASK_THRESHOLD)?;
        if mask != self.mask {
            return Err(Error::Domain("stored mask disagrees with the thresholded difference".into()));
        }
        Ok(())
    }
}

/// Pixelwise `(1 - alpha) * background + alpha * reflection`.
pub fn blend(background: &Image, reflection: &Image, alpha: f32) -> Result<Image> {
    ensure_same_shape("blend", background.shape(), reflection.shape())?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Domain(format!("alpha {alpha} outside [0, 1]")));
    }
    let keep = 1.0 - alpha;
    let data = background
        .data()
        .iter()
        .zip(reflection.data())
        .map(|(&b, &r)| (keep * b + alpha * r).clamp(0.0, 1.0))
        .collect();
    Ok(background.with_data(data))
}

/// Pixels whose channel-wise maximum absolute difference exceeds `threshold`.
pub fn reflection_mask(observed: &Image, clean: &Image, threshold: f32) -> Result<Mask> {
    ensure_same_shape("reflection_mask", observed.shape(), clean.shape())?;
    if !(threshold >= 0.0) {
        return Err(Error::Domain(format!("threshold {threshold} must be nonnegative")));
    }
    let c = observed.channels();
    let bits = observed
        .data()
        .chunks(c)
        .zip(clean.data().chunks(c))
        .map(|(o, k)| o.iter().zip(k).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max) > threshold)
        .collect();
    Mask::new(observed.height(), observed.width(), bits)
}

/// Deterministic layered scene for `(seed, params)`.
pub fn synth_scene(seed: u64, params: &SceneParams) -> Result<LayeredSample> {
    params.validate()?;
    let mut rng = rng_from_seed(seed);
    let size = params.image_size;
    let (background, depth) = render_layer(&mut rng, size, params.background_depth_range, params.primitives);
    let (mut reflection, _) = render_layer(&mut rng, size, params.reflection_depth_range, params.primitives);
    let sigma = params.reflection_blur_sigma_range.sample(&mut rng);
    if sigma > 0.0 {
        reflection = gaussian_blur(&reflection, sigma);
    }
    if rng.random::<f32>() < params.ghosting_probability {
        let shift = params.ghost_shift_range.sample(&mut rng).round() as isize;
        let angle = rng.random_range(0.0..std::f32::consts::TAU);
        let dx = (shift as f32 * angle.cos()).round() as isize;
        let dy = (shift as f32 * angle.sin()).round() as isize;
        reflection = ghost(&reflection, dx, dy, params.ghost_weight);
    }
    let alpha = params.alpha_range.sample(&mut rng);
    let observed = blend(&background, &reflection, alpha)?;
    let mask = reflection_mask(&observed, &background, DEFAULT_MASK_THRESHOLD)?;
    Ok(LayeredSample { background, reflection, alpha, observed, depth, mask })
}

/// Renders one layer; also exposed so tests can inspect reflection depths.
pub fn render_layer(rng: &mut ChaCha8Rng, size: usize, depths: Interval, primitives: (usize, usize)) -> (Image, DepthMap) {
    let s = size as f32;
    let (near, far) = (depths.lo, depths.hi);
    let horizon = rng.random_range(0.25..0.6) * s;
    let sky_top = random_color(rng, 0.1, 0.5, 0.55, 0.95);
    let sky_low = random_color(rng, 0.0, 0.3, 0.7, 1.0);
    let ground = random_color(rng, 0.3, 0.8, 0.25, 0.7);
    let stripe_period = rng.random_range(0.08..0.25) * (far - near);

    let inv_far = 1.0 / far;
    let inv_near = 1.0 / near;
    let ground_depth = |y: f32| {
        let u = ((y - horizon) / (s - horizon)).clamp(0.0, 1.0);
        1.0 / (inv_far + (inv_near - inv_far) * u)
    };

    let mut rgb = vec![0.0f32; size * size * 3];
    let mut depth = vec![far; size * size];
    for y in 0..size {
        let yc = y as f32 + 0.5;
        let (color, d) = if yc < horizon {
            let u = yc / horizon;
            (lerp3(sky_top, sky_low, u), far)
        } else {
            let d = ground_depth(yc);
            let stripe = 0.06 * (std::f32::consts::TAU * d / stripe_period).sin();
            (ground.map(|c| (c + stripe).clamp(0.0, 1.0)), d)
        };
        let hazed = haze(color, d);
        for x in 0..size {
            let i = y * size + x;
            rgb[i * 3..i * 3 + 3].copy_from_slice(&hazed);
            depth[i] = d;
        }
    }

    let count = rng.random_range(primitives.0..=primitives.1);
    let mut objects: Vec<f32> = (0..count).map(|_| rng.random_range(near..far)).collect();
    objects.sort_by(|a, b| b.total_cmp(a));
    for d in objects {
        let prim = Primitive::random(rng, s, d, near, far, horizon, &ground_depth);
        prim.paint(&mut rgb, &mut depth, size);
    }

    let image = Image::from_clamped(size, size, 3, rgb).expect("rendered layer has valid shape");
    let depth = DepthMap::new(size, size, depth).expect("rendered depth is positive");
    (image, depth)
}

fn haze(color: [f32; 3], depth: f32) -> [f32; 3] {
    let h = 1.0 - (-depth / HAZE_DISTANCE).exp();
    [0, 1, 2].map(|c| (1.0 - h) * color[c] + h * HAZE_COLOR[c])
}

fn lerp3(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [0, 1, 2].map(|c| a[c] + (b[c] - a[c]) * t)
}

/// Random color from HSV with saturation and value in the given ranges.
fn random_color(rng: &mut ChaCha8Rng, sat_lo: f32, sat_hi: f32, val_lo: f32, val_hi: f32) -> [f32; 3] {
    let h = rng.random_range(0.0..6.0f32);
    let s = rng.random_range(sat_lo..=sat_hi);
    let v = rng.random_range(val_lo..=val_hi);
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Rect,
    Ellipse,
    GradientRect([f32; 3]),
}

#[derive(Debug, Clone)]
struct Primitive {
    shape: Shape,
    cx: f32,
    cy: f32,
    half_w: f32,
    half_h: f32,
    color: [f32; 3],
    depth: f32,
    stripes: Option<(f32, f32)>,
}

impl Primitive {
    fn random(rng: &mut ChaCha8Rng, s: f32, depth: f32, near: f32, far: f32, horizon: f32, ground_depth: &dyn Fn(f32) -> f32) -> Self {
        // Nearer objects are larger and stand lower in the frame.
        let closeness = (far - depth) / (far - near);
        let extent = s * (0.12 + 0.3 * closeness) * rng.random_range(0.7..1.3f32);
        let half_w = 0.5 * extent * rng.random_range(0.6..1.4f32);
        let half_h = 0.5 * extent * rng.random_range(0.6..1.6f32);
        let mut base = horizon;
        // Bisection for the ground row at this depth.
        let (mut lo, mut hi) = (horizon, s);
        for _ in 0..30 {
            let mid = 0.5 * (lo + hi);
            if ground_depth(mid) > depth {
                lo = mid;
            } else {
                hi = mid;
            }
            base = mid;
        }
        let cy = base - half_h;
        let cx = rng.random_range(0.0..s);
        let color = random_color(rng, 0.45, 1.0, 0.3, 1.0);
        let shape = match rng.random_range(0..3u32) {
            0 => Shape::Rect,
            1 => Shape::Ellipse,
            _ => Shape::GradientRect(random_color(rng, 0.45, 1.0, 0.2, 1.0)),
        };
        let stripes = if rng.random::<f32>() < 0.4 {
            Some((rng.random_range(0.25..0.6f32) * extent, rng.random_range(0.0..std::f32::consts::PI)))
        } else {
            None
        };
        Self { shape, cx, cy, half_w, half_h, color, depth, stripes }
    }

    /// Coverage in `[0, 1]` from a signed distance with a 1.5 px ramp.
    fn coverage(&self, x: f32, y: f32) -> f32 {
        let sd = match self.shape {
            Shape::Rect | Shape::GradientRect(_) => {
                let dx = (x - self.cx).abs() - self.half_w;
                let dy = (y - self.cy).abs() - self.half_h;
                dx.max(dy)
            }
            Shape::Ellipse => {
                let nx = (x - self.cx) / self.half_w;
                let ny = (y - self.cy) / self.half_h;
                (nx.hypot(ny) - 1.0) * self.half_w.min(self.half_h)
            }
        };
        let t = (0.5 - sd / 1.5).clamp(0.0, 1.0);
        t * t * (3.0 - 2.0 * t)
    }

    fn paint(&self, rgb: &mut [f32], depth: &mut [f32], size: usize) {
        let y0 = (self.cy - self.half_h - 2.0).floor().max(0.0) as usize;
        let y1 = ((self.cy + self.half_h + 2.0).ceil().max(0.0) as usize).min(size);
        let x0 = (self.cx - self.half_w - 2.0).floor().max(0.0) as usize;
        let x1 = ((self.cx + self.half_w + 2.0).ceil().max(0.0) as usize).min(size);
        for y in y0..y1 {
            for x in x0..x1 {
                let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
                let cov = self.coverage(px, py);
                if cov <= 0.0 {
                    continue;
                }
                let mut color = match self.shape {
                    Shape::GradientRect(other) => {
                        let t = ((py - (self.cy - self.half_h)) / (2.0 * self.half_h)).clamp(0.0, 1.0);
                        lerp3(self.color, other, t)
                    }
                    _ => self.color,
                };
                if let Some((period, angle)) = self.stripes {
                    let u = (px - self.cx) * angle.cos() + (py - self.cy) * angle.sin();
                    let v = 0.08 * (std::f32::consts::TAU * u / period).sin();
                    color = color.map(|c| (c + v).clamp(0.0, 1.0));
                }
                let color = haze(color, self.depth);
                let i = y * size + x;
                for c in 0..3 {
                    rgb[i * 3 + c] = (1.0 - cov) * rgb[i * 3 + c] + cov * color[c];
                }
                if cov >= 0.5 {
                    depth[i] = self.depth;
                }
            }
        }
    }
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur(img: &Image, sigma: f32) -> Image {
    let radius = (3.0 * sigma).ceil() as isize;
    if radius == 0 {
        return img.clone();
    }
    let kernel: Vec<f32> = (-radius..=radius).map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f32 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| k / norm).collect();
    let (h, w, c) = img.shape();
    let src = img.data();
    let mut tmp = vec![0.0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (j, k) in kernel.iter().enumerate() {
                    let xx = (x as isize + j as isize - radius).clamp(0, w as isize - 1) as usize;
                    acc += k * src[(y * w + xx) * c + ch];
                }
                tmp[(y * w + x) * c + ch] = acc;
            }
        }
    }
    let mut out = vec![0.0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (j, k) in kernel.iter().enumerate() {
                    let yy = (y as isize + j as isize - radius).clamp(0, h as isize - 1) as usize;
                    acc += k * tmp[(yy * w + x) * c + ch];
                }
                out[(y * w + x) * c + ch] = acc.clamp(0.0, 1.0);
            }
        }
    }
    img.with_data(out)
}

/// `(img + weight * shifted) / (1 + weight)` with edge clamping.
fn ghost(img: &Image, dx: isize, dy: isize, weight: f32) -> Image {
    let (h, w, c) = img.shape();
    let src = img.data();
    let mut out = vec![0.0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            let sy = (y as isize - dy).clamp(0, h as isize - 1) as usize;
            let sx = (x as isize - dx).clamp(0, w as isize - 1) as usize;
            for ch in 0..c {
                let v = src[(y * w + x) * c + ch] + weight * src[(sy * w + sx) * c + ch];
                out[(y * w + x) * c + ch] = (v / (1.0 + weight)).clamp(0.0, 1.0);
            }
        }
    }
    img.with_data(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn constant(v: f32) -> Image {
        Image::filled(16, 16, 3, v).unwrap()
    }

    #[test]
    fn blend_endpoints_are_exact() {
        let p = SceneParams::default();
        let s = synth_scene(3, &p).unwrap();
        assert_eq!(blend(&s.background, &s.reflection, 0.0).unwrap(), s.background);
        assert_eq!(blend(&s.background, &s.reflection, 1.0).unwrap(), s.reflection);
    }

    #[test]
    fn blend_of_constants() {
        let out = blend(&constant(0.2), &constant(0.6), 0.5).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.4).abs() < 1e-7));
    }

    #[test]
    fn blend_rejects_bad_inputs() {
        assert!(matches!(blend(&constant(0.2), &constant(0.6), 1.5), Err(Error::Domain(_))));
        let small = Image::filled(8, 8, 3, 0.1).unwrap();
        assert!(matches!(blend(&constant(0.2), &small, 0.5), Err(Error::Dimension(_))));
    }

    #[test]
    fn mask_of_identical_images_is_empty() {
        let s = synth_scene(1, &SceneParams::default()).unwrap();
        let m = reflection_mask(&s.background, &s.background, DEFAULT_MASK_THRESHOLD).unwrap();
        assert!(m.is_empty());
    }

    #[test]
    fn mask_picks_single_changed_pixel() {
        let a = constant(0.5);
        let mut data = a.data().to_vec();
        data[(3 * 16 + 7) * 3 + 1] += 10.0 / 255.0;
        let b = Image::new(16, 16, 3, data).unwrap();
        let m = reflection_mask(&b, &a, DEFAULT_MASK_THRESHOLD).unwrap();
        assert_eq!(m.count(), 1);
        assert!(m.get(3, 7));
    }

    #[test]
    fn default_threshold_is_five_levels() {
        assert_eq!(DEFAULT_MASK_THRESHOLD, 5.0 / 255.0);
    }

    #[test]
    fn synth_is_deterministic() {
        let p = SceneParams::default();
        assert_eq!(synth_scene(7, &p).unwrap(), synth_scene(7, &p).unwrap());
        assert_ne!(synth_scene(7, &p).unwrap(), synth_scene(8, &p).unwrap());
    }

    #[test]
    fn samples_satisfy_invariants() {
        let p = SceneParams::default();
        for seed in 0..20 {
            let s = synth_scene(seed, &p).unwrap();
            s.check_invariants().unwrap();
            assert!(p.alpha_range.contains(s.alpha));
            assert!(s.depth.mean() as f32 > p.reflection_depth_range.hi);
        }
    }

    #[test]
    fn reflection_depths_lie_below_background_depths() {
        let p = SceneParams::default();
        for seed in 0..10 {
            let mut rng = rng_from_seed(seed);
            let (_, bd) = render_layer(&mut rng, 64, p.background_depth_range, p.primitives);
            let (_, rd) = render_layer(&mut rng, 64, p.reflection_depth_range, p.primitives);
            let rmax = rd.data().iter().copied().fold(f32::MIN, f32::max);
            let bmin = bd.data().iter().copied().fold(f32::MAX, f32::min);
            assert!(rmax < bmin, "{rmax} >= {bmin}");
        }
    }

    #[test]
    fn alpha_is_uniform_by_ks() {
        let p = SceneParams::default();
        let mut alphas: Vec<f64> = (0..1000)
            .map(|i| synth_scene(crate::rng::split_seed(2024, i), &p).unwrap().alpha as f64)
            .collect();
        alphas.sort_by(f64::total_cmp);
        let (lo, hi) = (p.alpha_range.lo as f64, p.alpha_range.hi as f64);
        let n = alphas.len() as f64;
        let ks = alphas
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let cdf = ((a - lo) / (hi - lo)).clamp(0.0, 1.0);
                (cdf - i as f64 / n).abs().max(((i + 1) as f64 / n - cdf).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 0.05, "KS statistic {ks}");
    }

    #[test]
    fn params_validation() {
        let mut p = SceneParams::default();
        p.alpha_range = Interval::new(-0.1, 0.5);
        assert!(p.validate().is_err());
        let mut p = SceneParams::default();
        p.reflection_depth_range = Interval::new(1.0, 5.0);
        assert!(p.validate().is_err());
        assert!(SceneParams::full_alpha().validate().is_ok());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn blend_is_affine(alpha in 0.0f32..=1.0, seed in 0u64..1000) {
            let s = synth_scene(seed, &SceneParams { image_size: 16, ..SceneParams::default() }).unwrap();
            let out = blend(&s.background, &s.reflection, alpha).unwrap();
            for ((o, b), r) in out.data().iter().zip(s.background.data()).zip(s.reflection.data()) {
                prop_assert!((o - (b + alpha * (r - b))).abs() <= 1e-6);
            }
        }

        #[test]
        fn mask_is_monotone_in_threshold(t1 in 0.0f32..0.2, dt in 0.0f32..0.2, seed in 0u64..1000) {
            let s = synth_scene(seed, &SceneParams { image_size: 16, ..SceneParams::default() }).unwrap();
            let m1 = reflection_mask(&s.observed, &s.background, t1).unwrap();
            let m2 = reflection_mask(&s.observed, &s.background, t1 + dt).unwrap();
            prop_assert!(m2.is_subset_of(&m1));
        }
    }
}
