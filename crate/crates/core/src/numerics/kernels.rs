//! Slice-level forward and backward kernels used by the graph.

use super::tensor::Scalar;

/// `c (+)= op(a) * op(b)` where `op(a)` is `[m, k]` and `op(b)` is `[k, n]`.
/// With `trans_a` the buffer `a` is stored as `[k, m]`; with `trans_b`,
/// `b` is stored as `[n, k]`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: bounds asserted above; `c` is a distinct mutable borrow.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2-D convolution over `[B, C, H, W]` maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    /// `None` when the kernel does not fit inside the padded input or the
    /// stride is zero.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        batch: usize,
        cin: usize,
        h: usize,
        w: usize,
        cout: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || kh == 0 || kw == 0 || kh > h + 2 * pad || kw > w + 2 * pad {
            return None;
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Some(Self {
            batch,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn out_plane(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.cin {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (y0, y1) = tap_range(g.ho, g.h, ky, g.stride, g.pad);
            for kx in 0..g.kw {
                let (x0, x1) = tap_range(g.wo, g.w, kx, g.stride, g.pad);
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                if y0 > 0 || y1 < g.ho || x0 > 0 || x1 < g.wo {
                    dst.fill(T::zero());
                }
                if x0 >= x1 {
                    continue;
                }
                for oy in y0..y1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let line = &mut dst[oy * g.wo + x0..oy * g.wo + x1];
                    let start = iy * g.w + x0 * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        line.copy_from_slice(&xc[start..start + line.len()]);
                    } else {
                        for (j, v) in line.iter_mut().enumerate() {
                            *v = xc[start + j * g.stride];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.cin {
        let dxc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (y0, y1) = tap_range(g.ho, g.h, ky, g.stride, g.pad);
            for kx in 0..g.kw {
                let (x0, x1) = tap_range(g.wo, g.w, kx, g.stride, g.pad);
                if x0 >= x1 {
                    continue;
                }
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in y0..y1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let line = &src[oy * g.wo + x0..oy * g.wo + x1];
                    let start = iy * g.w + x0 * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        for (d, &v) in dxc[start..start + line.len()].iter_mut().zip(line) {
                            *d = *d + v;
                        }
                    } else {
                        for (j, &v) in line.iter().enumerate() {
                            let i = start + j * g.stride;
                            dxc[i] = dxc[i] + v;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(x: &[T], weight: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let plane = g.out_plane();
    let k = g.patch_len();
    let mut out = vec![T::zero(); g.batch * g.cout * plane];
    let mut cols = vec![T::zero(); k * plane];
    for b in 0..g.batch {
        let xb = &x[b * g.cin * g.h * g.w..(b + 1) * g.cin * g.h * g.w];
        im2col(xb, g, &mut cols);
        let ob = &mut out[b * g.cout * plane..(b + 1) * g.cout * plane];
        gemm(g.cout, k, plane, weight, false, &cols, false, ob, false);
        if let Some(bias) = bias {
            for (co, row) in ob.chunks_mut(plane).enumerate() {
                row.iter_mut().for_each(|v| *v = *v + bias[co]);
            }
        }
    }
    out
}

/// Accumulates into whichever of `dx`, `dw`, `db` are provided.
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    dout: &[T],
    g: &ConvGeom,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let plane = g.out_plane();
    let k = g.patch_len();
    let mut cols = vec![T::zero(); k * plane];
    let in_size = g.cin * g.h * g.w;
    for b in 0..g.batch {
        let gb = &dout[b * g.cout * plane..(b + 1) * g.cout * plane];
        if let Some(dw) = dw.as_deref_mut() {
            im2col(&x[b * in_size..(b + 1) * in_size], g, &mut cols);
            gemm(g.cout, plane, k, gb, false, &cols, true, dw, true);
        }
        if let Some(db) = db.as_deref_mut() {
            for (co, row) in gb.chunks(plane).enumerate() {
                db[co] = db[co] + row.iter().copied().sum::<T>();
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            gemm(k, g.cout, plane, weight, true, gb, false, &mut cols, false);
            col2im(&cols, g, &mut dx[b * in_size..(b + 1) * in_size]);
        }
    }
}

/// Output positions `lo..hi` along one axis whose input index
/// `o * stride + tap - pad` lands inside `0..n_in`.
fn tap_range(n_out: usize, n_in: usize, tap: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > tap { (pad - tap).div_ceil(stride) } else { 0 };
    let hi = if n_in + pad > tap {
        ((n_in + pad - tap - 1) / stride + 1).min(n_out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Depthwise convolution; `g.cout == g.cin`, weight `[C, 1, kh, kw]`.
/// Loops run tap-major over precomputed valid ranges so the inner loop is
/// branch-free.
pub fn depthwise_forward<T: Scalar>(x: &[T], weight: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let plane = g.out_plane();
    let in_plane = g.h * g.w;
    let mut out = vec![T::zero(); g.batch * g.cin * plane];
    for b in 0..g.batch {
        for c in 0..g.cin {
            let xc = &x[(b * g.cin + c) * in_plane..][..in_plane];
            let wc = &weight[c * g.kh * g.kw..][..g.kh * g.kw];
            let oc = &mut out[(b * g.cin + c) * plane..][..plane];
            if let Some(bs) = bias {
                oc.fill(bs[c]);
            }
            for ky in 0..g.kh {
                let (y0, y1) = tap_range(g.ho, g.h, ky, g.stride, g.pad);
                for kx in 0..g.kw {
                    let (x0, x1) = tap_range(g.wo, g.w, kx, g.stride, g.pad);
                    if x0 >= x1 {
                        continue;
                    }
                    let wt = wc[ky * g.kw + kx];
                    for oy in y0..y1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let orow = &mut oc[oy * g.wo + x0..oy * g.wo + x1];
                        let ix0 = x0 * g.stride + kx - g.pad;
                        if g.stride == 1 {
                            let irow = &xc[iy * g.w + ix0..][..x1 - x0];
                            for (o, &i) in orow.iter_mut().zip(irow) {
                                *o = *o + wt * i;
                            }
                        } else {
                            for (j, o) in orow.iter_mut().enumerate() {
                                *o = *o + wt * xc[iy * g.w + ix0 + j * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Geometry of a stride-1, same-padded depthwise conv on channels-last
/// tokens `[batch, h * w, c]` with an odd `k x k` kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub k: usize,
}

impl TokenGeom {
    /// Calls `f(out_row, in_row, tap)` for every in-bounds (output, tap)
    /// pair, rows being token indices.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let pad = self.k / 2;
        for b in 0..self.batch {
            for oy in 0..self.h {
                for ky in 0..self.k {
                    let Some(iy) = (oy + ky).checked_sub(pad).filter(|&y| y < self.h) else { continue };
                    for ox in 0..self.w {
                        let out = (b * self.h + oy) * self.w + ox;
                        for kx in 0..self.k {
                            let Some(ix) = (ox + kx).checked_sub(pad).filter(|&x| x < self.w) else { continue };
                            f(out, (b * self.h + iy) * self.w + ix, ky * self.k + kx);
                        }
                    }
                }
            }
        }
    }
}

/// `[C, 1, k, k]` weight to tap-major `[k * k, C]`.
pub fn taps_major<T: Scalar>(weight: &[T], c: usize, k: usize) -> Vec<T> {
    let kk = k * k;
    let mut out = vec![T::zero(); kk * c];
    for ch in 0..c {
        for t in 0..kk {
            out[t * c + ch] = weight[ch * kk + t];
        }
    }
    out
}

/// Depthwise conv over channels-last tokens; `taps` is `[k * k, C]`.
pub fn depthwise_tokens_forward<T: Scalar>(x: &[T], taps: &[T], bias: Option<&[T]>, g: &TokenGeom) -> Vec<T> {
    let c = g.c;
    let mut out = vec![T::zero(); g.batch * g.h * g.w * c];
    if let Some(bs) = bias {
        for row in out.chunks_exact_mut(c) {
            row.copy_from_slice(bs);
        }
    }
    g.for_each_tap(|o, i, t| {
        let orow = &mut out[o * c..][..c];
        let irow = &x[i * c..][..c];
        let wrow = &taps[t * c..][..c];
        for ((o, &xv), &wv) in orow.iter_mut().zip(irow).zip(wrow) {
            *o = *o + wv * xv;
        }
    });
    out
}

/// Gradients of [`depthwise_tokens_forward`]; `dtaps` is tap-major.
pub fn depthwise_tokens_backward<T: Scalar>(
    x: &[T],
    taps: &[T],
    dout: &[T],
    g: &TokenGeom,
    mut dx: Option<&mut [T]>,
    mut dtaps: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let c = g.c;
    if let Some(db) = db {
        for row in dout.chunks_exact(c) {
            for (d, &v) in db.iter_mut().zip(row) {
                *d = *d + v;
            }
        }
    }
    if dx.is_none() && dtaps.is_none() {
        return;
    }
    g.for_each_tap(|o, i, t| {
        let grow = &dout[o * c..][..c];
        if let Some(dx) = dx.as_deref_mut() {
            let wrow = &taps[t * c..][..c];
            for ((d, &gv), &wv) in dx[i * c..][..c].iter_mut().zip(grow).zip(wrow) {
                *d = *d + gv * wv;
            }
        }
        if let Some(dt) = dtaps.as_deref_mut() {
            let xrow = &x[i * c..][..c];
            for ((d, &gv), &xv) in dt[t * c..][..c].iter_mut().zip(grow).zip(xrow) {
                *d = *d + gv * xv;
            }
        }
    });
}

pub fn depthwise_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    dout: &[T],
    g: &ConvGeom,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let plane = g.out_plane();
    let in_plane = g.h * g.w;
    let ksz = g.kh * g.kw;
    for b in 0..g.batch {
        for c in 0..g.cin {
            let base_in = (b * g.cin + c) * in_plane;
            let gc = &dout[(b * g.cin + c) * plane..][..plane];
            if let Some(db) = db.as_deref_mut() {
                db[c] = db[c] + gc.iter().copied().sum::<T>();
            }
            for ky in 0..g.kh {
                let (y0, y1) = tap_range(g.ho, g.h, ky, g.stride, g.pad);
                for kx in 0..g.kw {
                    let (x0, x1) = tap_range(g.wo, g.w, kx, g.stride, g.pad);
                    if x0 >= x1 {
                        continue;
                    }
                    let wi = c * ksz + ky * g.kw + kx;
                    let wt = weight[wi];
                    let mut acc = T::zero();
                    for oy in y0..y1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let grow = &gc[oy * g.wo + x0..oy * g.wo + x1];
                        let start = base_in + iy * g.w + x0 * g.stride + kx - g.pad;
                        if g.stride == 1 {
                            let n = x1 - x0;
                            if dw.is_some() {
                                let xrow = &x[start..start + n];
                                for (&go, &xv) in grow.iter().zip(xrow) {
                                    acc = acc + go * xv;
                                }
                            }
                            if let Some(dx) = dx.as_deref_mut() {
                                for (d, &go) in dx[start..start + n].iter_mut().zip(grow) {
                                    *d = *d + go * wt;
                                }
                            }
                        } else {
                            for (j, &go) in grow.iter().enumerate() {
                                let xi = start + j * g.stride;
                                acc = acc + go * x[xi];
                                if let Some(dx) = dx.as_deref_mut() {
                                    dx[xi] = dx[xi] + go * wt;
                                }
                            }
                        }
                    }
                    if let Some(dw) = dw.as_deref_mut() {
                        dw[wi] = dw[wi] + acc;
                    }
                }
            }
        }
    }
}

/// Softmax over contiguous rows of length `n`, max-subtracted.
pub fn softmax_rows<T: Scalar>(x: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    if n == 0 {
        return out;
    }
    for (row, dst) in x.chunks(n).zip(out.chunks_mut(n)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp_approx();
            sum = sum + *d;
        }
        let inv = T::one() / sum;
        dst.iter_mut().for_each(|d| *d = *d * inv);
    }
    out
}

pub fn softmax_rows_backward<T: Scalar>(y: &[T], dy: &[T], n: usize, dx: &mut [T]) {
    if n == 0 {
        return;
    }
    for ((yr, gr), dr) in y.chunks(n).zip(dy.chunks(n)).zip(dx.chunks_mut(n)) {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
            *d = *d + yv * (gv - dot);
        }
    }
}

/// Returns `(y, xhat, rstd)` for normalization over rows of length `c`.
pub fn layer_norm_forward<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    c: usize,
    eps: f64,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / c;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    let inv_c = T::one() / T::from_usize(c).unwrap();
    let eps = T::from_f64_lossy(eps);
    for r in 0..rows {
        let row = &x[r * c..(r + 1) * c];
        let mean = row.iter().copied().sum::<T>() * inv_c;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..c {
            let h = (row[j] - mean) * rs;
            xhat[r * c + j] = h;
            y[r * c + j] = h * gamma[j] + beta[j];
        }
    }
    (y, xhat, rstd)
}

#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<T: Scalar>(
    xhat: &[T],
    rstd: &[T],
    gamma: &[T],
    dy: &[T],
    c: usize,
    mut dx: Option<&mut [T]>,
    mut dgamma: Option<&mut [T]>,
    mut dbeta: Option<&mut [T]>,
) {
    let rows = xhat.len() / c;
    let inv_c = T::one() / T::from_usize(c).unwrap();
    for r in 0..rows {
        let xh = &xhat[r * c..(r + 1) * c];
        let g = &dy[r * c..(r + 1) * c];
        if let Some(dg) = dgamma.as_deref_mut() {
            for j in 0..c {
                dg[j] = dg[j] + g[j] * xh[j];
            }
        }
        if let Some(db) = dbeta.as_deref_mut() {
            for j in 0..c {
                db[j] = db[j] + g[j];
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let mut mean_d = T::zero();
            let mut mean_dx = T::zero();
            for j in 0..c {
                let d = g[j] * gamma[j];
                mean_d = mean_d + d;
                mean_dx = mean_dx + d * xh[j];
            }
            mean_d = mean_d * inv_c;
            mean_dx = mean_dx * inv_c;
            for j in 0..c {
                let d = g[j] * gamma[j];
                dx[r * c + j] = dx[r * c + j] + rstd[r] * (d - mean_d - xh[j] * mean_dx);
            }
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Tanh-approximated GELU, `0.5 x (1 + tanh(u))` with
/// `u = sqrt(2/pi) (x + 0.044715 x^3)`, evaluated as the identical
/// `x * sigmoid(2u)`.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let k2 = T::from_f64_lossy(2.0 * GELU_K);
    let c = T::from_f64_lossy(GELU_C);
    x / (T::one() + (-(k2 * (x + c * x * x * x))).exp_approx())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let k2 = T::from_f64_lossy(2.0 * GELU_K);
    let c = T::from_f64_lossy(GELU_C);
    let three = T::from_f64_lossy(3.0);
    let s = T::one() / (T::one() + (-(k2 * (x + c * x * x * x))).exp_approx());
    s + x * s * (T::one() - s) * k2 * (T::one() + three * c * x * x)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Merges input axes that stay adjacent and in order under `axes` and
/// drops unit axes. Returns the collapsed input shape and permutation.
fn collapse_axes(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    // runs of output axes that read consecutive input axes
    let mut runs: Vec<(usize, usize)> = Vec::new();
    for &a in axes {
        if shape[a] == 1 {
            continue;
        }
        match runs.last_mut() {
            Some((start, len)) if *start + *len == a => *len += 1,
            _ => runs.push((a, 1)),
        }
    }
    let mut order: Vec<usize> = (0..runs.len()).collect();
    order.sort_by_key(|&i| runs[i].0);
    let mut in_shape = vec![0; runs.len()];
    let mut rank = vec![0; runs.len()];
    for (r, &i) in order.iter().enumerate() {
        let (start, len) = runs[i];
        in_shape[r] = shape[start..start + len].iter().product();
        rank[i] = r;
    }
    (in_shape, rank)
}

/// Axis permutation: output axis `i` is input axis `axes[i]`.
pub fn permute<T: Copy + Default>(src: &[T], shape: &[usize], axes: &[usize]) -> (Vec<T>, Vec<usize>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let numel = src.len();
    let mut out = vec![T::default(); numel];
    if numel == 0 {
        return (out, out_shape);
    }
    let (cshape, caxes) = collapse_axes(shape, axes);
    match caxes.as_slice() {
        [] | [0] => out.copy_from_slice(src),
        [1, 0] => transpose2d(src, 1, cshape[0], cshape[1], &mut out),
        [0, 2, 1] => transpose2d(src, cshape[0], cshape[1], cshape[2], &mut out),
        _ => permute_general(src, &cshape, &caxes, &mut out),
    }
    (out, out_shape)
}

/// `batch` independent `[r, c] -> [c, r]` transposes in 32x32 tiles.
fn transpose2d<T: Copy>(src: &[T], batch: usize, r: usize, c: usize, out: &mut [T]) {
    const TILE: usize = 32;
    for b in 0..batch {
        let s = &src[b * r * c..(b + 1) * r * c];
        let o = &mut out[b * r * c..(b + 1) * r * c];
        for i0 in (0..r).step_by(TILE) {
            for j0 in (0..c).step_by(TILE) {
                for i in i0..(i0 + TILE).min(r) {
                    for j in j0..(j0 + TILE).min(c) {
                        o[j * r + i] = s[i * c + j];
                    }
                }
            }
        }
    }
}

fn permute_general<T: Copy>(src: &[T], shape: &[usize], axes: &[usize], out: &mut [T]) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    let mapped: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let numel = src.len();
    let nd = out_shape.len();
    let inner = out_shape[nd - 1];
    let inner_stride = mapped[nd - 1];
    let mut idx = vec![0usize; nd - 1];
    let mut base = 0usize;
    let mut o = 0;
    while o < numel {
        for j in 0..inner {
            out[o + j] = src[base + j * inner_stride];
        }
        o += inner;
        // odometer over the outer axes
        let mut d = nd - 1;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            base += mapped[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base -= mapped[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

pub fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Mean over non-overlapping `k x k` cells of `[B, C, H, W]`.
pub fn avg_pool_forward<T: Scalar>(x: &[T], bc: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let (ho, wo) = (h / k, w / k);
    let inv = T::one() / T::from_usize(k * k).unwrap();
    let mut out = vec![T::zero(); bc * ho * wo];
    for p in 0..bc {
        let xp = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = T::zero();
                for dy in 0..k {
                    for dx in 0..k {
                        acc = acc + xp[(oy * k + dy) * w + ox * k + dx];
                    }
                }
                out[(p * ho + oy) * wo + ox] = acc * inv;
            }
        }
    }
    out
}

pub fn avg_pool_backward<T: Scalar>(dy: &[T], bc: usize, h: usize, w: usize, k: usize, dx: &mut [T]) {
    let (ho, wo) = (h / k, w / k);
    let inv = T::one() / T::from_usize(k * k).unwrap();
    for p in 0..bc {
        for oy in 0..ho {
            for ox in 0..wo {
                let g = dy[(p * ho + oy) * wo + ox] * inv;
                for ddy in 0..k {
                    for ddx in 0..k {
                        let i = p * h * w + (oy * k + ddy) * w + ox * k + ddx;
                        dx[i] = dx[i] + g;
                    }
                }
            }
        }
    }
}
