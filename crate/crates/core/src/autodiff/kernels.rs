//! Raw numeric kernels over row-major `f64` buffers. Nothing here knows about
//! the tape; `tensor.rs` wraps these into recorded operations.

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// Numpy-style broadcast of two shapes, aligned on the trailing axis.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `small` viewed inside `big` (0 along broadcast axes).
fn broadcast_strides(small: &[usize], big: &[usize]) -> Option<Vec<usize>> {
    if small.len() > big.len() {
        return None;
    }
    let offset = big.len() - small.len();
    let own = strides(small);
    let mut out = vec![0; big.len()];
    for (i, &dim) in small.iter().enumerate() {
        if dim == big[i + offset] {
            out[i + offset] = own[i];
        } else if dim != 1 {
            return None;
        }
    }
    Some(out)
}

pub(crate) fn can_broadcast(small: &[usize], big: &[usize]) -> bool {
    broadcast_strides(small, big).is_some()
}

/// Calls `f(big_flat, small_flat)` for every element of `big`.
fn for_each_broadcast(small: &[usize], big: &[usize], mut f: impl FnMut(usize, usize)) {
    let bs = broadcast_strides(small, big).expect("shapes checked by caller");
    let n = numel(big);
    if big.is_empty() {
        if n == 1 {
            f(0, 0);
        }
        return;
    }
    let mut idx = vec![0usize; big.len()];
    let mut src = 0usize;
    for flat in 0..n {
        f(flat, src);
        for d in (0..big.len()).rev() {
            idx[d] += 1;
            src += bs[d];
            if idx[d] < big[d] {
                break;
            }
            src -= bs[d] * big[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn broadcast_to(data: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; numel(to)];
    for_each_broadcast(from, to, |o, i| out[o] = data[i]);
    out
}

pub(crate) fn sum_to(data: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; numel(to)];
    for_each_broadcast(to, from, |i, o| out[o] += data[i]);
    out
}

pub(crate) fn transpose2(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

/// `c (m×n) = a (m×k) · b (k×n)`, each operand optionally read transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|x| *x = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: strides describe exactly the m×k, k×n and m×n buffers whose
    // lengths are checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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

/// Geometry of a stride-1 square-kernel 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.k
    }
    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.k
    }
    fn col_rows(&self) -> usize {
        self.in_ch * self.k * self.k
    }
    fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }
    pub fn in_shape(&self) -> Vec<usize> {
        vec![self.batch, self.in_ch, self.h, self.w]
    }
    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_ch, self.out_h(), self.out_w()]
    }
    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.out_ch, self.in_ch, self.k, self.k]
    }
}

fn im2col(g: &ConvGeom, img: &[f64], cols: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let pad = g.pad as isize;
    for c in 0..g.in_ch {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - pad;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &img[(c * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize + kx as isize - pad;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, cols: &[f64], img: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let pad = g.pad as isize;
    for c in 0..g.in_ch {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut img[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..ow {
                        let ix = ox as isize + kx as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
    let (rows, cols_n) = (g.col_rows(), g.col_cols());
    let mut cols = vec![0.0; rows * cols_n];
    let mut out = vec![0.0; g.batch * g.out_ch * cols_n];
    let in_sz = g.in_ch * g.h * g.w;
    for b in 0..g.batch {
        im2col(g, &x[b * in_sz..(b + 1) * in_sz], &mut cols);
        let dst = &mut out[b * g.out_ch * cols_n..(b + 1) * g.out_ch * cols_n];
        gemm(g.out_ch, rows, cols_n, w, false, &cols, false, dst, false);
    }
    out
}

/// Adjoint of [`conv2d`] with respect to its input.
pub(crate) fn conv2d_input_grad(g: &ConvGeom, gout: &[f64], w: &[f64]) -> Vec<f64> {
    let (rows, cols_n) = (g.col_rows(), g.col_cols());
    let mut cols = vec![0.0; rows * cols_n];
    let in_sz = g.in_ch * g.h * g.w;
    let mut out = vec![0.0; g.batch * in_sz];
    for b in 0..g.batch {
        let gb = &gout[b * g.out_ch * cols_n..(b + 1) * g.out_ch * cols_n];
        gemm(rows, g.out_ch, cols_n, w, true, gb, false, &mut cols, false);
        col2im(g, &cols, &mut out[b * in_sz..(b + 1) * in_sz]);
    }
    out
}

/// Adjoint of [`conv2d`] with respect to its weight.
pub(crate) fn conv2d_weight_grad(g: &ConvGeom, x: &[f64], gout: &[f64]) -> Vec<f64> {
    let (rows, cols_n) = (g.col_rows(), g.col_cols());
    let mut cols = vec![0.0; rows * cols_n];
    let in_sz = g.in_ch * g.h * g.w;
    let mut out = vec![0.0; g.out_ch * rows];
    for b in 0..g.batch {
        im2col(g, &x[b * in_sz..(b + 1) * in_sz], &mut cols);
        let gb = &gout[b * g.out_ch * cols_n..(b + 1) * g.out_ch * cols_n];
        gemm(g.out_ch, cols_n, rows, gb, false, &cols, true, &mut out, b > 0);
    }
    out
}

/// Flat input index of the maximum in each non-overlapping `k×k` window.
/// Ties go to the lowest index (row-major scan order).
pub(crate) fn max_pool_indices(shape: &[usize], data: &[f64], k: usize) -> (Vec<usize>, Vec<usize>) {
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / k, w / k);
    let mut idx = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * k * w + ox * k;
                for dy in 0..k {
                    for dx in 0..k {
                        let i = base + (oy * k + dy) * w + ox * k + dx;
                        if data[i] > data[best] {
                            best = i;
                        }
                    }
                }
                idx.push(best);
            }
        }
    }
    (idx, vec![b, c, oh, ow])
}

struct Tap {
    x0: isize,
    y0: isize,
    wx: f64,
    wy: f64,
}

fn tap(sx: f64, sy: f64) -> Tap {
    let fx = sx.floor();
    let fy = sy.floor();
    Tap {
        x0: fx as isize,
        y0: fy as isize,
        wx: sx - fx,
        wy: sy - fy,
    }
}

#[inline]
fn pixel(plane: &[f64], h: usize, w: usize, y: isize, x: isize) -> f64 {
    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
        0.0
    } else {
        plane[y as usize * w + x as usize]
    }
}

/// Bilinear sampling of every `(b, c)` plane at source coordinates
/// `(gx, gy)` given in pixels, shared across the batch. Out-of-canvas
/// samples read zero.
pub(crate) fn grid_sample(
    shape: &[usize],
    img: &[f64],
    gx: &[f64],
    gy: &[f64],
    out_hw: (usize, usize),
) -> Vec<f64> {
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let n = out_hw.0 * out_hw.1;
    let mut out = vec![0.0; b * c * n];
    for plane in 0..b * c {
        let src = &img[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * n..(plane + 1) * n];
        for (p, v) in dst.iter_mut().enumerate() {
            let t = tap(gx[p], gy[p]);
            let p00 = pixel(src, h, w, t.y0, t.x0);
            let p01 = pixel(src, h, w, t.y0, t.x0 + 1);
            let p10 = pixel(src, h, w, t.y0 + 1, t.x0);
            let p11 = pixel(src, h, w, t.y0 + 1, t.x0 + 1);
            *v = (1.0 - t.wy) * ((1.0 - t.wx) * p00 + t.wx * p01)
                + t.wy * ((1.0 - t.wx) * p10 + t.wx * p11);
        }
    }
    out
}

/// Vector-Jacobian products of [`grid_sample`]: (d img, d gx, d gy).
pub(crate) fn grid_sample_backward(
    shape: &[usize],
    img: &[f64],
    gx: &[f64],
    gy: &[f64],
    gout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let n = gx.len();
    let mut d_img = vec![0.0; img.len()];
    let mut d_gx = vec![0.0; n];
    let mut d_gy = vec![0.0; n];
    let scatter = |plane: &mut [f64], y: isize, x: isize, v: f64| {
        if y >= 0 && x >= 0 && y < h as isize && x < w as isize {
            plane[y as usize * w + x as usize] += v;
        }
    };
    for pl in 0..b * c {
        let src = &img[pl * h * w..(pl + 1) * h * w];
        let g = &gout[pl * n..(pl + 1) * n];
        let dst = &mut d_img[pl * h * w..(pl + 1) * h * w];
        for p in 0..n {
            let t = tap(gx[p], gy[p]);
            let go = g[p];
            scatter(dst, t.y0, t.x0, go * (1.0 - t.wy) * (1.0 - t.wx));
            scatter(dst, t.y0, t.x0 + 1, go * (1.0 - t.wy) * t.wx);
            scatter(dst, t.y0 + 1, t.x0, go * t.wy * (1.0 - t.wx));
            scatter(dst, t.y0 + 1, t.x0 + 1, go * t.wy * t.wx);
            let p00 = pixel(src, h, w, t.y0, t.x0);
            let p01 = pixel(src, h, w, t.y0, t.x0 + 1);
            let p10 = pixel(src, h, w, t.y0 + 1, t.x0);
            let p11 = pixel(src, h, w, t.y0 + 1, t.x0 + 1);
            d_gx[p] += go * ((1.0 - t.wy) * (p01 - p00) + t.wy * (p11 - p10));
            d_gy[p] += go * ((1.0 - t.wx) * (p10 - p00) + t.wx * (p11 - p01));
        }
    }
    (d_img, d_gx, d_gy)
}
