use super::{Feat, Init, ParamId, ParamLayout, Real};

/// Square-kernel 2-D convolution with zero padding, via im2col + GEMM.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Scratch size (in scalars) of one im2col tile.
const TILE_SCALARS: usize = 1 << 16;
const DIRECT_MAX_COUT: usize = 4;

/// Dot product with eight independent accumulators so it vectorizes.
fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    let mut acc = [F::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for j in 0..8 {
            acc[j] += x[j] * y[j];
        }
    }
    let mut tail = F::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    acc.iter().copied().sum::<F>() + tail
}

impl Conv2d {
    /// Registers `<name>.weight` (`cout x cin x k x k`) and `<name>.bias`.
    pub fn new(layout: &mut ParamLayout, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self::with_init(layout, name, cin, cout, k, stride, pad, Init::Fan { fan_in: cin * k * k, gain: 1.0 })
    }

    /// Same as `new` with zero weights.
    pub fn zeroed(layout: &mut ParamLayout, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self::with_init(layout, name, cin, cout, k, stride, pad, Init::Zeros)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_init(layout: &mut ParamLayout, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, init: Init) -> Self {
        let weight = layout.add(format!("{name}.weight"), &[cout, cin, k, k], init);
        let bias = layout.add(format!("{name}.bias"), &[cout], Init::Zeros);
        Self { cin, cout, k, stride, pad, weight, bias }
    }

    /// Fully connected layer over `[c][n][1][1]` features.
    pub fn linear(layout: &mut ParamLayout, name: &str, cin: usize, cout: usize) -> Self {
        Self::new(layout, name, cin, cout, 1, 1, 0)
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn kk(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn rows_per_tile(&self, wo: usize, budget: usize) -> usize {
        (budget / (self.kk() * wo)).max(1)
    }

    /// Input columns `[ox_lo, ox_hi)` that read inside the image for kernel offset `kx`.
    fn valid_span(&self, kx: usize, w: usize, wo: usize) -> (usize, usize) {
        let (s, pad) = (self.stride, self.pad);
        let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(s) };
        let hi = if w + pad > kx { ((w + pad - kx - 1) / s + 1).min(wo) } else { 0 };
        (lo.min(hi), hi)
    }

    /// im2col for global output rows `r0..r1` (row `r` = sample `r / ho`,
    /// output row `r % ho`) into `cols`, laid out `kk x ((r1 - r0) * wo)`.
    fn im2col_rows<F: Real>(&self, x: &Feat<F>, ho: usize, wo: usize, r0: usize, r1: usize, cols: &mut [F]) {
        let (k, s, pad) = (self.k, self.stride, self.pad);
        let pc = (r1 - r0) * wo;
        let mut row = 0;
        for ci in 0..self.cin {
            for ky in 0..k {
                for kx in 0..k {
                    let (lo, hi) = self.valid_span(kx, x.w, wo);
                    let dst_row = &mut cols[row * pc..(row + 1) * pc];
                    for r in r0..r1 {
                        let (ni, oy) = (r / ho, r % ho);
                        let dst = &mut dst_row[(r - r0) * wo..(r - r0 + 1) * wo];
                        let iy = (oy * s + ky) as isize - pad as isize;
                        if iy < 0 || iy >= x.h as isize {
                            dst.fill(F::zero());
                            continue;
                        }
                        let src = &x.slab(ci, ni)[iy as usize * x.w..(iy as usize + 1) * x.w];
                        dst[..lo].fill(F::zero());
                        dst[hi..].fill(F::zero());
                        if lo == hi {
                            continue;
                        }
                        let first = lo * s + kx - pad;
                        if s == 1 {
                            dst[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                        } else {
                            for (j, d) in dst[lo..hi].iter_mut().enumerate() {
                                *d = src[first + j * s];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Few output channels make im2col tiles poorly reused; such stride-1
    /// layers run as shifted row updates instead.
    fn use_direct(&self) -> bool {
        self.stride == 1 && self.cout <= DIRECT_MAX_COUT
    }

    /// Visits every `(weight index, input row, output row, valid span)` of a
    /// stride-1 convolution. The span `lo..hi` indexes the output row; the
    /// input row is read at `lo + kx - pad`.
    fn for_each_tap(&self, n: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
        let (k, pad) = (self.k, self.pad);
        let (ho, wo) = self.out_hw(h, w);
        let spans: Vec<(usize, usize)> = (0..k).map(|kx| self.valid_span(kx, w, wo)).collect();
        // Output rows outermost keeps every touched row in L1.
        for ni in 0..n {
            for oy in 0..ho {
                for co in 0..self.cout {
                    let dst_row = ((co * n + ni) * ho + oy) * wo;
                    for ci in 0..self.cin {
                        for ky in 0..k {
                            let iy = (oy + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src_row = ((ci * n + ni) * h + iy as usize) * w;
                            for (kx, &(lo, hi)) in spans.iter().enumerate() {
                                if lo < hi {
                                    let widx = ((co * self.cin + ci) * k + ky) * k + kx;
                                    f(widx, src_row + lo + kx - pad, dst_row + lo, hi - lo);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn direct_forward<F: Real>(&self, w: &[F], x: &Feat<F>, y: &mut Feat<F>) {
        self.for_each_tap(x.n, x.h, x.w, |widx, src, dst, len| {
            let wv = w[widx];
            for (d, s) in y.data[dst..dst + len].iter_mut().zip(&x.data[src..src + len]) {
                *d += wv * *s;
            }
        });
    }

    fn direct_backward<F: Real>(&self, w: &[F], x: &Feat<F>, dy: &Feat<F>, dw: &mut [F], mut dx: Option<&mut Feat<F>>) {
        self.for_each_tap(x.n, x.h, x.w, |widx, src, dst, len| {
            let g = &dy.data[dst..dst + len];
            dw[widx] += dot(g, &x.data[src..src + len]);
            if let Some(dx) = dx.as_deref_mut() {
                let wv = w[widx];
                for (d, s) in dx.data[src..src + len].iter_mut().zip(g) {
                    *d += wv * *s;
                }
            }
        });
    }

    /// Transposed [`Self::im2col_rows`]: `cols_t[q * kk + row]`.
    fn im2col_rows_t<F: Real>(&self, x: &Feat<F>, ho: usize, wo: usize, r0: usize, r1: usize, cols_t: &mut [F]) {
        let (k, s, pad) = (self.k, self.stride, self.pad);
        let kk = self.kk();
        cols_t.fill(F::zero());
        let mut row = 0;
        for ci in 0..self.cin {
            for ky in 0..k {
                for kx in 0..k {
                    let (lo, hi) = self.valid_span(kx, x.w, wo);
                    if lo < hi {
                        for r in r0..r1 {
                            let (ni, oy) = (r / ho, r % ho);
                            let iy = (oy * s + ky) as isize - pad as isize;
                            if iy < 0 || iy >= x.h as isize {
                                continue;
                            }
                            let src = &x.slab(ci, ni)[iy as usize * x.w..(iy as usize + 1) * x.w];
                            let first = lo * s + kx - pad;
                            let base = (r - r0) * wo;
                            for j in 0..hi - lo {
                                cols_t[(base + lo + j) * kk + row] = src[first + j * s];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col_rows_t`].
    fn col2im_rows_t<F: Real>(&self, cols_t: &[F], dx: &mut Feat<F>, ho: usize, wo: usize, r0: usize, r1: usize) {
        let (k, s, pad) = (self.k, self.stride, self.pad);
        let kk = self.kk();
        let (h, w) = (dx.h, dx.w);
        let mut row = 0;
        for ci in 0..self.cin {
            for ky in 0..k {
                for kx in 0..k {
                    let (lo, hi) = self.valid_span(kx, w, wo);
                    if lo < hi {
                        for r in r0..r1 {
                            let (ni, oy) = (r / ho, r % ho);
                            let iy = (oy * s + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let dst = &mut dx.slab_mut(ci, ni)[iy as usize * w..(iy as usize + 1) * w];
                            let first = lo * s + kx - pad;
                            let base = (r - r0) * wo;
                            for j in 0..hi - lo {
                                dst[first + j * s] += cols_t[(base + lo + j) * kk + row];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    pub fn forward<F: Real>(&self, params: &[F], x: &Feat<F>) -> Feat<F> {
        self.apply(params, x, TILE_SCALARS)
    }

    /// Forward pass with an explicit im2col tile budget.
    pub fn apply<F: Real>(&self, params: &[F], x: &Feat<F>, budget: usize) -> Feat<F> {
        assert_eq!(x.c, self.cin, "conv input channels");
        let (ho, wo) = self.out_hw(x.h, x.w);
        let p = x.n * ho * wo;
        let kk = self.kk();
        let mut y = Feat::zeros(self.cout, x.n, ho, wo);
        let w = &params[self.weight.range()];
        let b = &params[self.bias.range()];
        for (co, row) in y.data.chunks_mut(p).enumerate() {
            row.fill(b[co]);
        }
        if self.is_pointwise() {
            F::gemm(self.cout, kk, p, F::one(), w, false, &x.data, false, F::one(), &mut y.data);
            return y;
        }
        if self.use_direct() {
            self.direct_forward(w, x, &mut y);
            return y;
        }
        let rows = x.n * ho;
        let rpt = self.rows_per_tile(wo, budget);
        let mut cols = vec![F::zero(); kk * rpt.min(rows) * wo];
        for r0 in (0..rows).step_by(rpt) {
            let r1 = (r0 + rpt).min(rows);
            let pc = (r1 - r0) * wo;
            self.im2col_rows(x, ho, wo, r0, r1, &mut cols[..kk * pc]);
            F::gemm_strided(self.cout, kk, pc, F::one(), (w, kk, 1), (&cols[..kk * pc], pc, 1), F::one(), (&mut y.data[r0 * wo..], p, 1));
        }
        y
    }

    /// Accumulates parameter gradients into `grads` and returns the input gradient.
    /// `x` is the forward input.
    pub fn backward<F: Real>(&self, params: &[F], x: &Feat<F>, dy: &Feat<F>, grads: &mut [F]) -> Feat<F> {
        self.backward_tiled(params, x, dy, grads, TILE_SCALARS, true).expect("input gradient requested")
    }

    /// Parameter gradients only.
    pub fn backward_params<F: Real>(&self, params: &[F], x: &Feat<F>, dy: &Feat<F>, grads: &mut [F]) {
        self.backward_tiled(params, x, dy, grads, TILE_SCALARS, false);
    }

    pub fn backward_tiled<F: Real>(&self, params: &[F], x: &Feat<F>, dy: &Feat<F>, grads: &mut [F], budget: usize, want_dx: bool) -> Option<Feat<F>> {
        let (ho, wo) = self.out_hw(x.h, x.w);
        assert_eq!((dy.c, dy.n, dy.h, dy.w), (self.cout, x.n, ho, wo), "conv output gradient shape");
        let p = x.n * ho * wo;
        let kk = self.kk();
        let db = &mut grads[self.bias.range()];
        for (co, row) in dy.data.chunks(p).enumerate() {
            db[co] += row.iter().copied().sum();
        }
        let w = &params[self.weight.range()];
        if self.is_pointwise() {
            F::gemm(self.cout, p, kk, F::one(), &dy.data, false, &x.data, true, F::one(), &mut grads[self.weight.range()]);
            if !want_dx {
                return None;
            }
            let mut dx = vec![F::zero(); kk * p];
            F::gemm(kk, self.cout, p, F::one(), w, true, &dy.data, false, F::zero(), &mut dx);
            return Some(Feat::from_vec(self.cin, x.n, x.h, x.w, dx));
        }
        // Tiles are built transposed (`pc x kk`) so both GEMMs below
        // contract over a strided axis and pack contiguously.
        let mut dx = Feat::zeros(self.cin, x.n, x.h, x.w);
        if self.use_direct() {
            self.direct_backward(w, x, dy, &mut grads[self.weight.range()], want_dx.then_some(&mut dx));
            return want_dx.then_some(dx);
        }
        let rows = x.n * ho;
        let rpt = self.rows_per_tile(wo, budget);
        let cap = kk * rpt.min(rows) * wo;
        let mut cols_t = vec![F::zero(); cap];
        let mut dcols_t = vec![F::zero(); cap];
        for r0 in (0..rows).step_by(rpt) {
            let r1 = (r0 + rpt).min(rows);
            let pc = (r1 - r0) * wo;
            self.im2col_rows_t(x, ho, wo, r0, r1, &mut cols_t[..kk * pc]);
            F::gemm_strided(self.cout, pc, kk, F::one(), (&dy.data[r0 * wo..], p, 1), (&cols_t[..kk * pc], kk, 1), F::one(), (&mut grads[self.weight.range()], kk, 1));
            if want_dx {
                F::gemm_strided(pc, self.cout, kk, F::one(), (&dy.data[r0 * wo..], 1, p), (w, kk, 1), F::zero(), (&mut dcols_t[..kk * pc], kk, 1));
                self.col2im_rows_t(&dcols_t[..kk * pc], &mut dx, ho, wo, r0, r1);
            }
        }
        want_dx.then_some(dx)
    }

}

#[inline]
fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// `x * sigmoid(x)`, elementwise.
pub fn silu<F: Real>(x: &Feat<F>) -> Feat<F> {
    let data = x.data.iter().map(|&v| v * sigmoid(v)).collect();
    Feat::from_vec(x.c, x.n, x.h, x.w, data)
}

pub fn silu_backward<F: Real>(x: &Feat<F>, dy: &Feat<F>) -> Feat<F> {
    let data = x
        .data
        .iter()
        .zip(&dy.data)
        .map(|(&v, &g)| {
            let s = sigmoid(v);
            g * s * (F::one() + v * (F::one() - s))
        })
        .collect();
    Feat::from_vec(x.c, x.n, x.h, x.w, data)
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<F: Real>(x: &Feat<F>) -> Feat<F> {
    let (h2, w2) = (x.h * 2, x.w * 2);
    let mut out = Feat::zeros(x.c, x.n, h2, w2);
    for (src, dst) in x.data.chunks(x.plane()).zip(out.data.chunks_mut(h2 * w2)) {
        for (s, d) in src.chunks(x.w).zip(dst.chunks_mut(2 * w2)) {
            let (top, bottom) = d.split_at_mut(w2);
            for (pair, v) in top.chunks_exact_mut(2).zip(s) {
                pair[0] = *v;
                pair[1] = *v;
            }
            bottom.copy_from_slice(top);
        }
    }
    out
}

pub fn upsample2_backward<F: Real>(dy: &Feat<F>) -> Feat<F> {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Feat::zeros(dy.c, dy.n, h, w);
    for (src, dst) in dy.data.chunks(dy.plane()).zip(dx.data.chunks_mut(h * w)) {
        for (s, d) in src.chunks(2 * dy.w).zip(dst.chunks_mut(w)) {
            let (top, bottom) = s.split_at(dy.w);
            for ((v, t), b) in d.iter_mut().zip(top.chunks_exact(2)).zip(bottom.chunks_exact(2)) {
                *v = (t[0] + t[1]) + (b[0] + b[1]);
            }
        }
    }
    dx
}

/// One stage of a feed-forward stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Conv(Conv2d),
    Silu,
    Up2,
}

/// Inputs of every op from one forward pass, consumed by `Seq::backward`.
#[derive(Debug, Clone)]
pub struct Tape<F> {
    inputs: Vec<Feat<F>>,
}

/// Straight-line stack of ops.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Seq {
    pub ops: Vec<Op>,
}

impl Seq {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, op: Op) -> &mut Self {
        self.ops.push(op);
        self
    }

    fn apply_op<F: Real>(op: &Op, params: &[F], x: &Feat<F>) -> Feat<F> {
        match op {
            Op::Conv(conv) => conv.forward(params, x),
            Op::Silu => silu(x),
            Op::Up2 => upsample2(x),
        }
    }

    pub fn forward<F: Real>(&self, params: &[F], x: &Feat<F>) -> (Feat<F>, Tape<F>) {
        let mut inputs = Vec::with_capacity(self.ops.len());
        let mut cur = x.clone();
        for op in &self.ops {
            let next = Self::apply_op(op, params, &cur);
            inputs.push(std::mem::replace(&mut cur, next));
        }
        (cur, Tape { inputs })
    }

    /// Forward pass without keeping a tape.
    pub fn infer<F: Real>(&self, params: &[F], x: &Feat<F>) -> Feat<F> {
        let mut cur = x.clone();
        for op in &self.ops {
            cur = Self::apply_op(op, params, &cur);
        }
        cur
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward<F: Real>(&self, params: &[F], tape: &Tape<F>, dy: Feat<F>, grads: &mut [F]) -> Feat<F> {
        self.backward_from(params, tape, dy, grads, true).expect("input gradient requested")
    }

    /// Like `backward` but skips the gradient with respect to the stack input.
    pub fn backward_params<F: Real>(&self, params: &[F], tape: &Tape<F>, dy: Feat<F>, grads: &mut [F]) {
        self.backward_from(params, tape, dy, grads, false);
    }

    fn backward_from<F: Real>(&self, params: &[F], tape: &Tape<F>, dy: Feat<F>, grads: &mut [F], want_dx: bool) -> Option<Feat<F>> {
        assert_eq!(tape.inputs.len(), self.ops.len(), "tape does not match stack");
        let mut g = dy;
        for (i, (op, x)) in self.ops.iter().zip(&tape.inputs).enumerate().rev() {
            let last = i == 0 && !want_dx;
            g = match op {
                Op::Conv(conv) if last => {
                    conv.backward_params(params, x, &g, grads);
                    return None;
                }
                Op::Conv(conv) => conv.backward(params, x, &g, grads),
                Op::Silu => silu_backward(x, &g),
                Op::Up2 => upsample2_backward(&g),
            };
        }
        want_dx.then_some(g)
    }
}
