//! Raw numeric kernels over contiguous slices.
//!
//! Convolution is lowered to im2col + GEMM per batch item. The column buffer
//! is recomputed in backward instead of cached, which keeps the training
//! memory footprint at one copy of each activation.

use super::Element;

/// `c (+)= a · b` where `a` is logically m×k and `b` k×n, both row-major
/// unless the matching `*_t` flag says the slice stores the transpose.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(T::zero());
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the extents above bound every index (row < m, col < k, etc.)
    // and the slice lengths were checked against them.
    unsafe {
        T::gemm_raw(m, k, n, T::one(), a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        ((self.h + 2 * self.pad - self.k) / self.stride + 1, (self.w + 2 * self.pad - self.k) / self.stride + 1)
    }

    pub fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    /// 1×1, stride 1, no padding: the input already is the column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Valid output range `[lo, hi)` along one axis for kernel offset `off`
/// (stride 1): output index `o` reads input `o + off`.
fn valid_range(out: usize, input: usize, off: isize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = ((input as isize - off).max(0) as usize).min(out);
    (lo.min(hi), hi)
}

pub(crate) fn im2col<T: Element>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (oh, ow) = g.out_hw();
    let ohw = oh * ow;
    let (h, w, k, s) = (g.h, g.w, g.k, g.stride);
    let pad = g.pad as isize;
    for c in 0..g.cin {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                let offx = kx as isize - pad;
                for oy in 0..oh {
                    let iy = (oy * s) as isize + ky as isize - pad;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let srow = &plane[iy as usize * w..(iy as usize + 1) * w];
                    if s == 1 {
                        let (lo, hi) = valid_range(ow, w, offx);
                        drow[..lo].fill(T::zero());
                        drow[hi..].fill(T::zero());
                        // Empty when the kernel offset overhangs a narrow input.
                        if lo < hi {
                            let src_lo = (lo as isize + offx) as usize;
                            drow[lo..hi].copy_from_slice(&srow[src_lo..src_lo + (hi - lo)]);
                        }
                    } else {
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * s) as isize + offx;
                            *d = if ix < 0 || ix >= w as isize { T::zero() } else { srow[ix as usize] };
                        }
                    }
                }
            }
        }
    }
}

/// Output rows `oy0..oy1` of the column matrix in pixel-major order:
/// `buf[p·kk + r]` holds column row `r` at pixel `p` (counted from `oy0`).
/// Long-K products read this layout contiguously, which the row-major
/// column matrix would only allow through strided packing.
fn im2row<T: Element>(x: &[T], g: &ConvGeom, oy0: usize, oy1: usize, buf: &mut [T]) {
    let (_, ow) = g.out_hw();
    let kk = g.col_rows();
    let (h, w, k, s) = (g.h, g.w, g.k, g.stride);
    let pad = g.pad as isize;
    for c in 0..g.cin {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let r = (c * k + ky) * k + kx;
                let offx = kx as isize - pad;
                for oy in oy0..oy1 {
                    let iy = (oy * s) as isize + ky as isize - pad;
                    let dst = &mut buf[(oy - oy0) * ow * kk..];
                    if iy < 0 || iy >= h as isize {
                        (0..ow).for_each(|ox| dst[ox * kk + r] = T::zero());
                        continue;
                    }
                    let srow = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * s) as isize + offx;
                        dst[ox * kk + r] = if ix < 0 || ix >= w as isize { T::zero() } else { srow[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Pixels per im2row block in the weight-gradient product.
const GW_BLOCK: usize = 512;

/// Scatter-adds a column matrix back onto an image (adjoint of [`im2col`]).
pub(crate) fn col2im<T: Element>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let (oh, ow) = g.out_hw();
    let ohw = oh * ow;
    let (h, w, k, s) = (g.h, g.w, g.k, g.stride);
    let pad = g.pad as isize;
    for c in 0..g.cin {
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ohw..(row + 1) * ohw];
                let offx = kx as isize - pad;
                for oy in 0..oh {
                    let iy = (oy * s) as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let srow = &src[oy * ow..(oy + 1) * ow];
                    let drow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    if s == 1 {
                        let (lo, hi) = valid_range(ow, w, offx);
                        if lo == hi {
                            continue;
                        }
                        let dst_lo = (lo as isize + offx) as usize;
                        for (d, &v) in drow[dst_lo..dst_lo + (hi - lo)].iter_mut().zip(&srow[lo..hi]) {
                            *d = *d + v;
                        }
                    } else {
                        for (ox, &v) in srow.iter().enumerate() {
                            let ix = (ox * s) as isize + offx;
                            if ix >= 0 && ix < w as isize {
                                drow[ix as usize] = drow[ix as usize] + v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Batched convolution. `x` is N×Cin×H×W, `weight` Cout×(Cin·k·k).
pub(crate) fn conv_forward<T: Element>(
    x: &[T],
    n: usize,
    g: &ConvGeom,
    weight: &[T],
    cout: usize,
    bias: Option<&[T]>,
) -> Vec<T> {
    let (oh, ow) = g.out_hw();
    let ohw = oh * ow;
    let in_len = g.cin * g.h * g.w;
    let kk = g.col_rows();
    let mut out = vec![T::zero(); n * cout * ohw];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * ohw] };
    for b in 0..n {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let ob = &mut out[b * cout * ohw..(b + 1) * cout * ohw];
        let colref: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        matmul(cout, kk, ohw, weight, false, colref, false, ob, false);
        if let Some(bias) = bias {
            for (co, plane) in ob.chunks_exact_mut(ohw).enumerate() {
                let bv = bias[co];
                plane.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
    }
    out
}

/// Gradients of [`conv_forward`]. Weight and bias gradients are accumulated
/// into `gw` / `gb`; the input gradient is returned when `need_gx`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Element>(
    x: &[T],
    n: usize,
    g: &ConvGeom,
    weight: &[T],
    cout: usize,
    gy: &[T],
    gw: &mut [T],
    gb: Option<&mut [T]>,
    need_gx: bool,
) -> Option<Vec<T>> {
    let (oh, ow) = g.out_hw();
    let ohw = oh * ow;
    let in_len = g.cin * g.h * g.w;
    let kk = g.col_rows();
    let pointwise = g.is_pointwise();
    let rows_per_block = (GW_BLOCK / ow).max(1).min(oh);
    let mut rowbuf = vec![T::zero(); rows_per_block * ow * kk];
    let mut gcols = if pointwise || !need_gx { Vec::new() } else { vec![T::zero(); kk * ohw] };
    let mut gx = need_gx.then(|| vec![T::zero(); n * in_len]);
    if let Some(gb) = gb {
        for b in 0..n {
            let gyb = &gy[b * cout * ohw..(b + 1) * cout * ohw];
            for (co, plane) in gyb.chunks_exact(ohw).enumerate() {
                gb[co] = gb[co] + plane.iter().copied().sum::<T>();
            }
        }
    }
    assert!(gw.len() >= cout * kk && gy.len() >= n * cout * ohw);
    for b in 0..n {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let gyb = &gy[b * cout * ohw..(b + 1) * cout * ohw];
        // gW (cout×kk) += gY (cout×ohw) · rows (ohw×kk), one pixel block at a time.
        for oy0 in (0..oh).step_by(rows_per_block) {
            let oy1 = (oy0 + rows_per_block).min(oh);
            let len = (oy1 - oy0) * ow;
            im2row(xb, g, oy0, oy1, &mut rowbuf);
            // SAFETY: A is rows 0..cout of gyb at offset oy0·ow with row
            // stride ohw, so its last element is below cout·ohw; B spans
            // len·kk ≤ rowbuf.len(); C is cout×kk inside gw (asserted above).
            unsafe {
                T::gemm_raw(
                    cout,
                    len,
                    kk,
                    T::one(),
                    gyb[oy0 * ow..].as_ptr(),
                    ohw as isize,
                    1,
                    rowbuf.as_ptr(),
                    kk as isize,
                    1,
                    T::one(),
                    gw.as_mut_ptr(),
                    kk as isize,
                    1,
                );
            }
        }
        if let Some(gx) = gx.as_mut() {
            let gxb = &mut gx[b * in_len..(b + 1) * in_len];
            if pointwise {
                // gX (cin×hw) = Wᵀ (cin×cout) · gY
                matmul(kk, cout, ohw, weight, true, gyb, false, gxb, false);
            } else {
                matmul(kk, cout, ohw, weight, true, gyb, false, &mut gcols, false);
                col2im(&gcols, g, gxb);
            }
        }
    }
    gx
}

/// 2×2 max pooling (stride 2). Odd trailing rows/columns are dropped.
pub(crate) fn maxpool2_forward<T: Element>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let r0 = &plane[2 * oy * w..];
            let r1 = &plane[(2 * oy + 1) * w..];
            for ox in 0..ow {
                let m = r0[2 * ox].max(r0[2 * ox + 1]).max(r1[2 * ox]).max(r1[2 * ox + 1]);
                out.push(m);
            }
        }
    }
    out
}

/// Index (0..4, row-major within the window) of the first maximal element.
#[inline]
fn window_argmax<T: Element>(vals: [T; 4]) -> usize {
    let mut best = 0;
    for i in 1..4 {
        if vals[i] > vals[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn maxpool2_backward<T: Element>(x: &[T], planes: usize, h: usize, w: usize, gy: &[T]) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let mut gx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let plane = &x[p * h * w..(p + 1) * h * w];
        let gplane = &mut gx[p * h * w..(p + 1) * h * w];
        let gyp = &gy[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let idx = [
                    2 * oy * w + 2 * ox,
                    2 * oy * w + 2 * ox + 1,
                    (2 * oy + 1) * w + 2 * ox,
                    (2 * oy + 1) * w + 2 * ox + 1,
                ];
                let a = window_argmax(idx.map(|i| plane[i]));
                gplane[idx[a]] = gplane[idx[a]] + gyp[oy * ow + ox];
            }
        }
    }
    gx
}

/// Per-element hash of which window cell won each max; used to detect
/// finite-difference steps that cross a pooling tie.
pub(crate) fn maxpool2_pattern<T: Element>(x: &[T], planes: usize, h: usize, w: usize) -> u64 {
    let (oh, ow) = (h / 2, w / 2);
    let mut acc = 0xcbf2_9ce4_8422_2325u64;
    for p in 0..planes {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let a = window_argmax([
                    plane[2 * oy * w + 2 * ox],
                    plane[2 * oy * w + 2 * ox + 1],
                    plane[(2 * oy + 1) * w + 2 * ox],
                    plane[(2 * oy + 1) * w + 2 * ox + 1],
                ]);
                acc = (acc ^ a as u64).wrapping_mul(0x0100_0000_01b3);
            }
        }
    }
    acc
}

/// Nearest-neighbour 2× upsampling of `planes` H×W planes.
pub(crate) fn upsample2_forward<T: Element>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..h {
            let srow = &src[y * w..(y + 1) * w];
            let (top, rest) = dst[2 * y * ow..(2 * y + 2) * ow].split_at_mut(ow);
            for (x2, &v) in srow.iter().enumerate() {
                top[2 * x2] = v;
                top[2 * x2 + 1] = v;
            }
            rest.copy_from_slice(top);
        }
    }
    out
}

pub(crate) fn upsample2_backward<T: Element>(gy: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut gx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &gy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut gx[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            let r0 = &src[2 * y * ow..(2 * y + 1) * ow];
            let r1 = &src[(2 * y + 1) * ow..(2 * y + 2) * ow];
            for x2 in 0..w {
                dst[y * w + x2] = r0[2 * x2] + r0[2 * x2 + 1] + r1[2 * x2] + r1[2 * x2 + 1];
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution used as an oracle.
    fn conv_direct(x: &[f64], g: &ConvGeom, weight: &[f64], cout: usize) -> Vec<f64> {
        let (oh, ow) = g.out_hw();
        let mut out = vec![0.0; cout * oh * ow];
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..g.cin {
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                acc += x[(ci * g.h + iy as usize) * g.w + ix as usize]
                                    * weight[((co * g.cin + ci) * g.k + ky) * g.k + kx];
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_direct_loops() {
        for &(cin, h, w, k, stride) in
            &[(2, 5, 7, 3, 1), (3, 6, 6, 3, 2), (1, 4, 4, 1, 2), (2, 3, 3, 5, 1), (4, 8, 6, 1, 1)]
        {
            let g = ConvGeom { cin, h, w, k, stride, pad: (k - 1) / 2 };
            let cout = 3;
            let x: Vec<f64> = (0..cin * h * w).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
            let wt: Vec<f64> = (0..cout * cin * k * k).map(|i| ((i * 13 % 7) as f64) * 0.25 - 0.5).collect();
            let fast = conv_forward(&x, 1, &g, &wt, cout, None);
            let slow = conv_direct(&x, &g, &wt, cout);
            assert_eq!(fast.len(), slow.len());
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)> for arbitrary x, c.
        let g = ConvGeom { cin: 2, h: 5, w: 6, k: 3, stride: 2, pad: 1 };
        let (oh, ow) = g.out_hw();
        let x: Vec<f64> = (0..2 * 5 * 6).map(|i| (i as f64 * 0.37).sin()).collect();
        let c: Vec<f64> = (0..g.col_rows() * oh * ow).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut cols = vec![0.0; c.len()];
        im2col(&x, &g, &mut cols);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&c, &g, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn maxpool_routes_gradient_to_first_max() {
        let x = [1.0f64, 3.0, 3.0, 0.0];
        assert_eq!(maxpool2_forward(&x, 1, 2, 2), vec![3.0]);
        assert_eq!(maxpool2_backward(&x, 1, 2, 2, &[1.0]), vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn upsample_backward_sums_blocks() {
        let x = [1.0f64, 2.0];
        let up = upsample2_forward(&x, 1, 1, 2);
        assert_eq!(up, vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
        let g = upsample2_backward(&[1.0f64; 8], 1, 1, 2);
        assert_eq!(g, vec![4.0, 4.0]);
    }
}
