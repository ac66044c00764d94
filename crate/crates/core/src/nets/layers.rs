//! Layer kernels with explicit forward and backward passes.
//!
//! Convolutions lower to im2col + GEMM over bounded row chunks, one batch
//! item at a time. Wide stride-1 kernels with few input or output channels
//! run as direct per-tap row updates instead, which skips the huge column
//! buffer. Per-item weight gradients are reduced in item order so serial
//! and parallel execution agree bitwise.

use crate::exec;
use crate::imageio::reflect_index;
use crate::tensor::{Real, Tensor};

/// Upper bound on im2col buffer elements per chunk.
const COL_BUDGET: usize = 1 << 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zero,
    Reflect,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub padding: Padding,
}

const NONE: usize = usize::MAX;

impl Conv {
    pub fn same(in_c: usize, out_c: usize, k: usize, stride: usize, padding: Padding) -> Self {
        Conv {
            in_c,
            out_c,
            k,
            stride,
            pad: k / 2,
            padding,
        }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.out_c, self.in_c, self.k, self.k]
    }

    pub fn weight_len(&self) -> usize {
        self.out_c * self.in_c * self.k * self.k
    }

    fn col_rows(&self) -> usize {
        self.in_c * self.k * self.k
    }

    pub fn out_len(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (self.out_len(h), self.out_len(w))
    }

    /// `table[ki * n_out + o]` = source index for kernel tap `ki` at output `o`.
    fn table(&self, n_in: usize) -> Vec<usize> {
        let n_out = self.out_len(n_in);
        let mut t = Vec::with_capacity(self.k * n_out);
        for ki in 0..self.k {
            for o in 0..n_out {
                let s = (o * self.stride + ki) as isize - self.pad as isize;
                t.push(if s >= 0 && (s as usize) < n_in {
                    s as usize
                } else {
                    match self.padding {
                        Padding::Zero => NONE,
                        Padding::Reflect => reflect_index(s, n_in),
                    }
                });
            }
        }
        t
    }

    fn direct(&self) -> bool {
        self.stride == 1 && self.in_c.min(self.out_c) <= 4 && self.k >= 5
    }

    /// Source index of padded coordinate `p` (stride 1), or `NONE`.
    fn padded_source(&self, p: usize, n: usize) -> usize {
        let s = p as isize - self.pad as isize;
        if s >= 0 && (s as usize) < n {
            s as usize
        } else {
            match self.padding {
                Padding::Zero => NONE,
                Padding::Reflect => reflect_index(s, n),
            }
        }
    }

    fn rows_per_chunk(&self, ow: usize, oh: usize) -> usize {
        (COL_BUDGET / (self.col_rows() * ow).max(1)).clamp(1, oh)
    }
}

struct Geometry {
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    ty: Vec<usize>,
    tx: Vec<usize>,
}

impl Geometry {
    fn new(conv: &Conv, h: usize, w: usize) -> Self {
        let (oh, ow) = conv.out_hw(h, w);
        Geometry {
            h,
            w,
            oh,
            ow,
            ty: conv.table(h),
            tx: conv.table(w),
        }
    }
}

fn im2col<T: Real>(conv: &Conv, g: &Geometry, x: &[T], rows: std::ops::Range<usize>, cols: &mut [T]) {
    let k = conv.k;
    let span = rows.len() * g.ow;
    for c in 0..conv.in_c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let r = (c * k + ki) * k + kj;
                let dst = &mut cols[r * span..(r + 1) * span];
                let tx = &g.tx[kj * g.ow..(kj + 1) * g.ow];
                for (i, oy) in rows.clone().enumerate() {
                    let sy = g.ty[ki * g.oh + oy];
                    let d = &mut dst[i * g.ow..(i + 1) * g.ow];
                    if sy == NONE {
                        d.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy * g.w..(sy + 1) * g.w];
                    for (dv, &sx) in d.iter_mut().zip(tx) {
                        *dv = if sx == NONE { T::zero() } else { src[sx] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(conv: &Conv, g: &Geometry, cols: &[T], rows: std::ops::Range<usize>, dx: &mut [T]) {
    let k = conv.k;
    let span = rows.len() * g.ow;
    for c in 0..conv.in_c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let r = (c * k + ki) * k + kj;
                let src = &cols[r * span..(r + 1) * span];
                let tx = &g.tx[kj * g.ow..(kj + 1) * g.ow];
                for (i, oy) in rows.clone().enumerate() {
                    let sy = g.ty[ki * g.oh + oy];
                    if sy == NONE {
                        continue;
                    }
                    let row = &mut plane[sy * g.w..(sy + 1) * g.w];
                    for (&v, &sx) in src[i * g.ow..(i + 1) * g.ow].iter().zip(tx) {
                        if sx != NONE {
                            row[sx] += v;
                        }
                    }
                }
            }
        }
    }
}

fn chunks(oh: usize, per: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    (0..oh).step_by(per).map(move |s| s..(s + per).min(oh))
}

fn pad_plane<T: Real>(conv: &Conv, g: &Geometry, plane: &[T]) -> Vec<T> {
    let (ph, pw) = (g.oh + conv.k - 1, g.ow + conv.k - 1);
    let sx: Vec<usize> = (0..pw).map(|p| conv.padded_source(p, g.w)).collect();
    let mut out = vec![T::zero(); ph * pw];
    for py in 0..ph {
        let sy = conv.padded_source(py, g.h);
        if sy == NONE {
            continue;
        }
        let src = &plane[sy * g.w..(sy + 1) * g.w];
        for (d, &s) in out[py * pw..(py + 1) * pw].iter_mut().zip(&sx) {
            if s != NONE {
                *d = src[s];
            }
        }
    }
    out
}

fn direct_forward<T: Real>(conv: &Conv, g: &Geometry, weight: &[T], bias: &[T], x: &[T], y: &mut [T]) {
    let (k, plane, pw) = (conv.k, g.oh * g.ow, g.ow + conv.k - 1);
    for o in 0..conv.out_c {
        y[o * plane..(o + 1) * plane].fill(bias[o]);
    }
    for c in 0..conv.in_c {
        let p = pad_plane(conv, g, &x[c * g.h * g.w..(c + 1) * g.h * g.w]);
        for o in 0..conv.out_c {
            let yo = &mut y[o * plane..(o + 1) * plane];
            for ki in 0..k {
                for kj in 0..k {
                    let wv = weight[((o * conv.in_c + c) * k + ki) * k + kj];
                    for oy in 0..g.oh {
                        let src = &p[(oy + ki) * pw + kj..][..g.ow];
                        for (d, &s) in yo[oy * g.ow..(oy + 1) * g.ow].iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
}

/// Per-item gradients of a direct convolution.
fn direct_backward<T: Real>(
    conv: &Conv,
    g: &Geometry,
    weight: &[T],
    x: &[T],
    dy: &[T],
    dw: &mut [T],
    db: &mut [T],
    dx: &mut [T],
) {
    let (k, plane, pw) = (conv.k, g.oh * g.ow, g.ow + conv.k - 1);
    let ph = g.oh + k - 1;
    let mut acc = vec![T::zero(); g.ow];
    if !db.is_empty() {
        for o in 0..conv.out_c {
            db[o] += dy[o * plane..(o + 1) * plane].iter().copied().sum::<T>();
        }
    }
    for c in 0..conv.in_c {
        if !dw.is_empty() {
            let p = pad_plane(conv, g, &x[c * g.h * g.w..(c + 1) * g.h * g.w]);
            for o in 0..conv.out_c {
                let dyo = &dy[o * plane..(o + 1) * plane];
                for ki in 0..k {
                    for kj in 0..k {
                        acc.fill(T::zero());
                        for oy in 0..g.oh {
                            let src = &p[(oy + ki) * pw + kj..][..g.ow];
                            for ((a, &d), &s) in acc.iter_mut().zip(&dyo[oy * g.ow..(oy + 1) * g.ow]).zip(src) {
                                *a += d * s;
                            }
                        }
                        dw[((o * conv.in_c + c) * k + ki) * k + kj] += acc.iter().copied().sum::<T>();
                    }
                }
            }
        }
        if !dx.is_empty() {
            let mut dp = vec![T::zero(); ph * pw];
            for o in 0..conv.out_c {
                let dyo = &dy[o * plane..(o + 1) * plane];
                for ki in 0..k {
                    for kj in 0..k {
                        let wv = weight[((o * conv.in_c + c) * k + ki) * k + kj];
                        for oy in 0..g.oh {
                            let dst = &mut dp[(oy + ki) * pw + kj..][..g.ow];
                            for (d, &s) in dst.iter_mut().zip(&dyo[oy * g.ow..(oy + 1) * g.ow]) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
            let dxc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
            let sx: Vec<usize> = (0..pw).map(|p| conv.padded_source(p, g.w)).collect();
            for py in 0..ph {
                let sy = conv.padded_source(py, g.h);
                if sy == NONE {
                    continue;
                }
                for (&v, &s) in dp[py * pw..(py + 1) * pw].iter().zip(&sx) {
                    if s != NONE {
                        dxc[sy * g.w + s] += v;
                    }
                }
            }
        }
    }
}

fn conv_item_forward<T: Real>(conv: &Conv, g: &Geometry, weight: &[T], bias: &[T], x: &[T], y: &mut [T]) {
    if conv.direct() {
        return direct_forward(conv, g, weight, bias, x, y);
    }
    let kk = conv.col_rows();
    let per = conv.rows_per_chunk(g.ow, g.oh);
    let plane = g.oh * g.ow;
    let mut cols = vec![T::zero(); kk * per * g.ow];
    let mut tmp = vec![T::zero(); conv.out_c * per * g.ow];
    for rows in chunks(g.oh, per) {
        let span = rows.len() * g.ow;
        im2col(conv, g, x, rows.clone(), &mut cols[..kk * span]);
        T::gemm(false, false, conv.out_c, span, kk, T::one(), weight, &cols[..kk * span], T::zero(), &mut tmp[..conv.out_c * span]);
        for o in 0..conv.out_c {
            let dst = &mut y[o * plane + rows.start * g.ow..o * plane + rows.end * g.ow];
            for (d, &s) in dst.iter_mut().zip(&tmp[o * span..(o + 1) * span]) {
                *d = s + bias[o];
            }
        }
    }
}

pub fn conv_forward<T: Real>(conv: &Conv, weight: &[T], bias: &[T], x: &Tensor<T>) -> Tensor<T> {
    assert_eq!(x.channels(), conv.in_c, "conv input channels");
    assert_eq!(weight.len(), conv.weight_len(), "conv weight size");
    let g = Geometry::new(conv, x.height(), x.width());
    let mut y = Tensor::zeros([x.batch(), conv.out_c, g.oh, g.ow]);
    let item = conv.out_c * g.oh * g.ow;
    exec::for_each_chunk_mut(y.data_mut(), item, |n, out| {
        conv_item_forward(conv, &g, weight, bias, x.item(n), out)
    });
    y
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

/// Backward pass. `want_weights = false` skips the parameter gradients
/// (frozen layers); `want_input = false` skips `dx`.
pub fn conv_backward<T: Real>(
    conv: &Conv,
    weight: &[T],
    x: &Tensor<T>,
    dy: &Tensor<T>,
    want_weights: bool,
    want_input: bool,
) -> ConvGrads<T> {
    let (h, w) = (x.height(), x.width());
    let g = Geometry::new(conv, h, w);
    assert_eq!(dy.shape(), [x.batch(), conv.out_c, g.oh, g.ow], "conv dy shape");
    let kk = conv.col_rows();
    let per = conv.rows_per_chunk(g.ow, g.oh);
    let plane = g.oh * g.ow;

    let per_item = exec::map_indexed(x.batch(), |n| {
        let xn = x.item(n);
        let dyn_ = dy.item(n);
        let mut dw = if want_weights { vec![T::zero(); conv.weight_len()] } else { Vec::new() };
        let mut db = if want_weights { vec![T::zero(); conv.out_c] } else { Vec::new() };
        let mut dx = if want_input { vec![T::zero(); conv.in_c * h * w] } else { Vec::new() };
        if conv.direct() {
            direct_backward(conv, &g, weight, xn, dyn_, &mut dw, &mut db, &mut dx);
            return (dw, db, dx);
        }
        let mut cols = vec![T::zero(); kk * per * g.ow];
        let mut dyc = vec![T::zero(); conv.out_c * per * g.ow];
        for rows in chunks(g.oh, per) {
            let span = rows.len() * g.ow;
            for o in 0..conv.out_c {
                dyc[o * span..(o + 1) * span]
                    .copy_from_slice(&dyn_[o * plane + rows.start * g.ow..o * plane + rows.end * g.ow]);
            }
            let dyc = &dyc[..conv.out_c * span];
            if want_weights {
                im2col(conv, &g, xn, rows.clone(), &mut cols[..kk * span]);
                T::gemm(false, true, conv.out_c, kk, span, T::one(), dyc, &cols[..kk * span], T::one(), &mut dw);
                for o in 0..conv.out_c {
                    db[o] += dyc[o * span..(o + 1) * span].iter().copied().sum::<T>();
                }
            }
            if want_input {
                T::gemm(true, false, kk, span, conv.out_c, T::one(), weight, dyc, T::zero(), &mut cols[..kk * span]);
                col2im(conv, &g, &cols[..kk * span], rows, &mut dx);
            }
        }
        (dw, db, dx)
    });

    let mut dw = if want_weights { vec![T::zero(); conv.weight_len()] } else { Vec::new() };
    let mut db = if want_weights { vec![T::zero(); conv.out_c] } else { Vec::new() };
    let mut dx_data = Vec::with_capacity(if want_input { x.data().len() } else { 0 });
    for (dwn, dbn, dxn) in per_item {
        if want_weights {
            add_into(&mut dw, &dwn);
            add_into(&mut db, &dbn);
        }
        if want_input {
            dx_data.extend_from_slice(&dxn);
        }
    }
    let dx = want_input.then(|| Tensor::from_vec(x.shape(), dx_data).expect("dx shape"));
    ConvGrads { dx, dw, db }
}

pub(crate) fn add_into<T: Real>(acc: &mut [T], v: &[T]) {
    for (a, &b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

/// Batch statistics and normalized activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub fn bn_forward_train<T: Real>(x: &Tensor<T>, gamma: &[T], beta: &[T], eps: T) -> (Tensor<T>, BnCache<T>) {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let count = T::of((n * hw) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for i in 0..n {
            s += x.item(i)[ch * hw..(ch + 1) * hw].iter().copied().sum::<T>();
        }
        let m = s / count;
        let mut v = T::zero();
        for i in 0..n {
            v += x.item(i)[ch * hw..(ch + 1) * hw].iter().map(|&a| (a - m) * (a - m)).sum::<T>();
        }
        mean[ch] = m;
        var[ch] = v / count;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    for i in 0..n {
        let xi = x.item(i);
        let xh = xhat.item_mut(i);
        for ch in 0..c {
            for j in ch * hw..(ch + 1) * hw {
                xh[j] = (xi[j] - mean[ch]) * inv_std[ch];
            }
        }
        let yi = y.item_mut(i);
        for ch in 0..c {
            for j in ch * hw..(ch + 1) * hw {
                yi[j] = gamma[ch] * xh[j] + beta[ch];
            }
        }
    }
    (y, BnCache { xhat, inv_std, mean, var })
}

pub fn bn_forward_infer<T: Real>(x: &Tensor<T>, gamma: &[T], beta: &[T], mean: &[T], var: &[T], eps: T) -> Tensor<T> {
    let [_, c, h, w] = x.shape();
    let hw = h * w;
    let scale: Vec<T> = (0..c).map(|ch| gamma[ch] / (var[ch] + eps).sqrt()).collect();
    let mut y = x.clone();
    for i in 0..x.batch() {
        let yi = y.item_mut(i);
        for ch in 0..c {
            for v in &mut yi[ch * hw..(ch + 1) * hw] {
                *v = (*v - mean[ch]) * scale[ch] + beta[ch];
            }
        }
    }
    y
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn bn_backward<T: Real>(cache: &BnCache<T>, gamma: &[T], dy: &Tensor<T>) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let [n, c, h, w] = dy.shape();
    let hw = h * w;
    let m = T::of((n * hw) as f64);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for i in 0..n {
        let d = dy.item(i);
        let xh = cache.xhat.item(i);
        for ch in 0..c {
            for j in ch * hw..(ch + 1) * hw {
                dbeta[ch] += d[j];
                dgamma[ch] += d[j] * xh[j];
            }
        }
    }
    let mut dx = Tensor::zeros(dy.shape());
    for i in 0..n {
        let d = dy.item(i);
        let xh = cache.xhat.item(i);
        let out = dx.item_mut(i);
        for ch in 0..c {
            let k = gamma[ch] * cache.inv_std[ch] / m;
            for j in ch * hw..(ch + 1) * hw {
                out[j] = k * (m * d[j] - dbeta[ch] - xh[j] * dgamma[ch]);
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn relu_inplace<T: Real>(x: &mut Tensor<T>) {
    for v in x.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// `dy` masked by `out > 0`.
pub fn relu_backward<T: Real>(out: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut g = dy.clone();
    for (gv, &o) in g.data_mut().iter_mut().zip(out.data()) {
        if o <= T::zero() {
            *gv = T::zero();
        }
    }
    g
}

pub fn leaky_relu<T: Real>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { v * slope })
}

/// Gradient through a leaky ReLU given its input `z`.
pub fn leaky_relu_backward<T: Real>(z: &Tensor<T>, dy: &Tensor<T>, slope: T) -> Tensor<T> {
    let mut g = dy.clone();
    for (gv, &zv) in g.data_mut().iter_mut().zip(z.data()) {
        if zv <= T::zero() {
            *gv *= slope;
        }
    }
    g
}

/// 2x2 max pooling with stride 2 (floor). Returns output and argmax offsets.
pub fn maxpool2_forward<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor::zeros([n, c, oh, ow]);
    let mut arg = vec![0u32; n * c * oh * ow];
    let mut idx = 0;
    for i in 0..n {
        let xi = x.item(i);
        let yi = y.item_mut(i);
        for ch in 0..c {
            let p = &xi[ch * h * w..(ch + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = 2 * oy * w + 2 * ox;
                    for cand in [2 * oy * w + 2 * ox + 1, (2 * oy + 1) * w + 2 * ox, (2 * oy + 1) * w + 2 * ox + 1] {
                        if p[cand] > p[best] {
                            best = cand;
                        }
                    }
                    yi[(ch * oh + oy) * ow + ox] = p[best];
                    arg[idx] = best as u32;
                    idx += 1;
                }
            }
        }
    }
    (y, arg)
}

pub fn maxpool2_backward<T: Real>(in_shape: [usize; 4], arg: &[u32], dy: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = in_shape;
    let (oh, ow) = (dy.height(), dy.width());
    let mut dx = Tensor::zeros(in_shape);
    let mut idx = 0;
    for i in 0..n {
        let d = dy.item(i);
        let out = dx.item_mut(i);
        for ch in 0..c {
            for j in 0..oh * ow {
                out[ch * h * w + arg[idx] as usize] += d[ch * oh * ow + j];
                idx += 1;
            }
        }
    }
    dx
}

/// `y = x W^T + b` for `x: N x in`, `W: out x in`.
pub fn linear_forward<T: Real>(x: &[T], n: usize, inp: usize, weight: &[T], bias: &[T]) -> Vec<T> {
    let out = bias.len();
    let mut y = vec![T::zero(); n * out];
    for row in y.chunks_mut(out) {
        row.copy_from_slice(bias);
    }
    T::gemm(false, true, n, out, inp, T::one(), x, weight, T::one(), &mut y);
    y
}

/// Returns `(dx, dW, db)` for [`linear_forward`].
pub fn linear_backward<T: Real>(
    x: &[T],
    n: usize,
    inp: usize,
    weight: &[T],
    dy: &[T],
    out: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dw = vec![T::zero(); out * inp];
    T::gemm(true, false, out, inp, n, T::one(), dy, x, T::zero(), &mut dw);
    let mut db = vec![T::zero(); out];
    for row in dy.chunks(out) {
        add_into(&mut db, row);
    }
    let mut dx = vec![T::zero(); n * inp];
    T::gemm(false, false, n, inp, out, T::one(), dy, weight, T::zero(), &mut dx);
    (dx, dw, db)
}
