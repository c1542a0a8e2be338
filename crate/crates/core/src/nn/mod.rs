//! Minimal CPU neural-network toolkit: batched activations, flat parameter
//! storage with named views, convolution layers with hand-written backward
//! passes, and an adaptive-moment optimizer.
//!
//! Activations use a channel-major layout `[c][n][h][w]`, so a whole batch is
//! a `c x (n*h*w)` matrix and every convolution is a single GEMM.

mod gradcheck;
mod layers;
mod optim;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use gradcheck::{finite_difference_check, sample_indices, GradCheckReport};
pub use layers::{silu, silu_backward, upsample2, upsample2_backward, Conv2d, Op, Seq, Tape};
pub use optim::{clip_grad_norm, Adam, AdamConfig};

/// Scalar type the networks are generic over: `f32` for training and
/// inference, `f64` for gradient verification.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    /// `c = alpha * op(a) * op(b) + beta * c` with row-major `c` of shape `m x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], ta: bool, b: &[Self], tb: bool, beta: Self, c: &mut [Self]);

    /// General-stride form of [`Real::gemm`]; each operand is given as
    /// `(slice, row_stride, col_stride)`.
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: (&[Self], usize, usize),
        b: (&[Self], usize, usize),
        beta: Self,
        c: (&mut [Self], usize, usize),
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable literal")
    }
}

fn strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    // `op(X)` is `rows x cols`; a transposed operand is stored `cols x rows`.
    if transposed {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_real {
    ($t:ty, $f:path) => {
        impl Real for $t {
            fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], ta: bool, b: &[Self], tb: bool, beta: Self, c: &mut [Self]) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too small");
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = strides(m, k, ta);
                let (rsb, csb) = strides(k, n, tb);
                // SAFETY: the asserts above bound every index the kernel touches.
                unsafe {
                    $f(m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
                }
            }

            fn gemm_strided(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: (&[Self], usize, usize),
                b: (&[Self], usize, usize),
                beta: Self,
                c: (&mut [Self], usize, usize),
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows.max(1) - 1) * rs + (cols.max(1) - 1) * cs;
                if k > 0 {
                    assert!(last(m, k, a.1, a.2) < a.0.len() && last(k, n, b.1, b.2) < b.0.len(), "gemm operand too small");
                }
                assert!(last(m, n, c.1, c.2) < c.0.len(), "gemm output too small");
                // SAFETY: the asserts above bound every index the kernel touches.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        alpha,
                        a.0.as_ptr(),
                        a.1 as isize,
                        a.2 as isize,
                        b.0.as_ptr(),
                        b.1 as isize,
                        b.2 as isize,
                        beta,
                        c.0.as_mut_ptr(),
                        c.1 as isize,
                        c.2 as isize,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Batched activation in `[c][n][h][w]` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Feat<F> {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<F>,
}

impl<F: Real> Feat<F> {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Self { c, n, h, w, data: vec![F::zero(); c * n * h * w] }
    }

    pub fn from_vec(c: usize, n: usize, h: usize, w: usize, data: Vec<F>) -> Self {
        assert_eq!(data.len(), c * n * h * w, "feature buffer length");
        Self { c, n, h, w, data }
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn idx(&self, c: usize, n: usize, y: usize, x: usize) -> usize {
        ((c * self.n + n) * self.h + y) * self.w + x
    }

    pub fn same_shape(&self, other: &Feat<F>) -> bool {
        (self.c, self.n, self.h, self.w) == (other.c, other.n, other.h, other.w)
    }

    /// Contiguous `h*w` plane of channel `c`, sample `n`.
    pub fn slab(&self, c: usize, n: usize) -> &[F] {
        let p = self.plane();
        let o = (c * self.n + n) * p;
        &self.data[o..o + p]
    }

    pub fn slab_mut(&mut self, c: usize, n: usize) -> &mut [F] {
        let p = self.plane();
        let o = (c * self.n + n) * p;
        &mut self.data[o..o + p]
    }

    /// Stacks along the channel axis.
    pub fn concat_channels(a: &Feat<F>, b: &Feat<F>) -> Feat<F> {
        assert!(a.n == b.n && a.h == b.h && a.w == b.w, "concat shape mismatch");
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Feat { c: a.c + b.c, n: a.n, h: a.h, w: a.w, data }
    }

    /// Splits off the first `c` channels.
    pub fn split_channels(self, c: usize) -> (Feat<F>, Feat<F>) {
        assert!(c <= self.c);
        let cut = c * self.n * self.plane();
        let mut data = self.data;
        let tail = data.split_off(cut);
        (
            Feat { c, n: self.n, h: self.h, w: self.w, data },
            Feat { c: self.c - c, n: self.n, h: self.h, w: self.w, data: tail },
        )
    }

    /// Stacks along the batch axis.
    pub fn concat_batch(parts: &[&Feat<F>]) -> Feat<F> {
        let first = parts[0];
        let n: usize = parts.iter().map(|p| p.n).sum();
        let mut out = Feat::zeros(first.c, n, first.h, first.w);
        let p = first.plane();
        let mut offset = 0;
        for part in parts {
            assert!(part.c == first.c && part.h == first.h && part.w == first.w, "batch concat shape mismatch");
            for c in 0..part.c {
                let src = &part.data[c * part.n * p..(c + 1) * part.n * p];
                let dst = (c * n + offset) * p;
                out.data[dst..dst + src.len()].copy_from_slice(src);
            }
            offset += part.n;
        }
        out
    }

    /// Samples `start..start+len` along the batch axis.
    pub fn batch_range(&self, start: usize, len: usize) -> Feat<F> {
        assert!(start + len <= self.n);
        let p = self.plane();
        let mut out = Feat::zeros(self.c, len, self.h, self.w);
        for c in 0..self.c {
            let src = (c * self.n + start) * p;
            let dst = c * len * p;
            out.data[dst..dst + len * p].copy_from_slice(&self.data[src..src + len * p]);
        }
        out
    }

    /// Values of sample `n` in `[c][h][w]` order.
    pub fn sample(&self, n: usize) -> Vec<F> {
        let mut out = Vec::with_capacity(self.c * self.plane());
        for c in 0..self.c {
            out.extend_from_slice(self.slab(c, n));
        }
        out
    }

    pub fn cast<G: Real>(&self) -> Feat<G> {
        Feat {
            c: self.c,
            n: self.n,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| G::from_f64(v.to_f64().unwrap_or(0.0)).unwrap_or(G::zero())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// How a parameter tensor is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Init {
    /// Normal with std `gain / sqrt(fan_in)`.
    Fan { fan_in: usize, gain: f64 },
    Zeros,
    Constant(f64),
}

/// Handle to a contiguous range of the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId {
    pub offset: usize,
    pub len: usize,
}

impl ParamId {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub init: Init,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Names, shapes and offsets of every tensor in a flat parameter vector.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamLayout {
    entries: Vec<ParamEntry>,
    len: usize,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        let name = name.into();
        assert!(self.entries.iter().all(|e| e.name != name), "duplicate parameter {name}");
        let len: usize = shape.iter().product();
        let id = ParamId { offset: self.len, len };
        self.entries.push(ParamEntry { name, shape: shape.to_vec(), offset: self.len, init });
        self.len += len;
        id
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Draws initial values.
    pub fn init<F: Real, R: Rng>(&self, rng: &mut R) -> Vec<F> {
        let mut out = vec![F::zero(); self.len];
        for e in &self.entries {
            let dst = &mut out[e.offset..e.offset + e.len()];
            match e.init {
                Init::Zeros => {}
                Init::Constant(v) => dst.fill(F::lit(v)),
                Init::Fan { fan_in, gain } => {
                    let std = gain / (fan_in.max(1) as f64).sqrt();
                    for d in dst.iter_mut() {
                        let z: f64 = StandardNormal.sample(rng);
                        *d = F::lit(z * std);
                    }
                }
            }
        }
        out
    }

    /// Stable hash of names and shapes, recorded in checkpoints.
    pub fn fingerprint(&self) -> u64 {
        let mut text = String::new();
        for e in &self.entries {
            text.push_str(&e.name);
            for d in &e.shape {
                text.push_str(&format!(":{d}"));
            }
            text.push(';');
        }
        crate::rng::fnv1a(text.as_bytes())
    }
}

pub fn cast_vec<F: Real, G: Real>(v: &[F]) -> Vec<G> {
    v.iter().map(|x| G::from_f64(x.to_f64().unwrap_or(0.0)).unwrap_or(G::zero())).collect()
}

pub fn l2_norm<F: Real>(v: &[F]) -> f64 {
    v.iter().map(|x| { let d = x.to_f64().unwrap_or(0.0); d * d }).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_in_all_transpose_modes() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let at: Vec<f64> = (0..k * m).map(|i| a[(i % m) * k + i / m]).collect();
        let bt: Vec<f64> = (0..n * k).map(|i| b[(i % k) * n + i / k]).collect();
        let mut naive = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                naive[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let mut c = vec![0.0; m * n];
            let aa = if ta { &at } else { &a };
            let bb = if tb { &bt } else { &b };
            f64::gemm(m, k, n, 1.0, aa, ta, bb, tb, 0.0, &mut c);
            for (x, y) in c.iter().zip(&naive) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batch_concat_and_range_invert() {
        let a = Feat::<f32>::from_vec(2, 1, 2, 2, (0..8).map(|v| v as f32).collect());
        let b = Feat::<f32>::from_vec(2, 2, 2, 2, (8..24).map(|v| v as f32).collect());
        let ab = Feat::concat_batch(&[&a, &b]);
        assert_eq!(ab.n, 3);
        assert_eq!(ab.batch_range(0, 1), a);
        assert_eq!(ab.batch_range(1, 2), b);
    }

    #[test]
    fn layout_offsets_are_contiguous() {
        let mut l = ParamLayout::new();
        let a = l.add("a", &[2, 3], Init::Zeros);
        let b = l.add("b", &[4], Init::Constant(1.0));
        assert_eq!(a.range(), 0..6);
        assert_eq!(b.range(), 6..10);
        let v: Vec<f32> = l.init(&mut crate::rng::rng_from_seed(0));
        assert_eq!(&v[6..], &[1.0; 4]);
    }
}

/// Packs HWC images into a `[c][n][h][w]` batch.
pub fn images_to_feat<F: Real>(images: &[&crate::Image]) -> Feat<F> {
    let (h, w, c) = images[0].shape();
    let n = images.len();
    let mut out = Feat::zeros(c, n, h, w);
    for (ni, img) in images.iter().enumerate() {
        assert_eq!(img.shape(), (h, w, c), "batch images must share a shape");
        let src = img.data();
        for ch in 0..c {
            let dst = out.slab_mut(ch, ni);
            for (p, d) in dst.iter_mut().enumerate() {
                *d = F::lit(src[p * c + ch] as f64);
            }
        }
    }
    out
}

/// Unpacks a batch into HWC images, clamping into `[0, 1]`.
pub fn feat_to_images<F: Real>(f: &Feat<F>) -> Vec<crate::Image> {
    (0..f.n)
        .map(|ni| {
            let mut data = vec![0.0f32; f.plane() * f.c];
            for ch in 0..f.c {
                for (p, v) in f.slab(ch, ni).iter().enumerate() {
                    data[p * f.c + ch] = v.to_f32().unwrap_or(0.0);
                }
            }
            crate::Image::from_clamped(f.h, f.w, f.c, data).expect("decoded image shape")
        })
        .collect()
}
