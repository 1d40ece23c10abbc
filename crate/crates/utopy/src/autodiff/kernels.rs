//! Shared numeric kernels behind the graph ops.
//!
//! Every kernel is a pure function over flat slices with explicit dims, so
//! the same code backs graph building, inference, and gradient computation.
//! Inner loops run over contiguous spans and use `mul_add`, which the
//! host-targeted build vectorizes to FMA.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::tensor::Scalar;

/// dst[r, c] += coeff * src[r + dy, c + dx] over in-bounds indices.
/// Both planes are h x w.
#[inline]
fn shifted_axpy<T: Scalar>(dst: &mut [T], src: &[T], coeff: T, h: usize, w: usize, dy: isize, dx: isize) {
    for r in 0..h {
        let sr = r as isize + dy;
        if sr < 0 || sr >= h as isize {
            continue;
        }
        let (c_lo, c_hi) = span(w, dx);
        if c_lo >= c_hi {
            continue;
        }
        let drow = &mut dst[r * w + c_lo..r * w + c_hi];
        let sbase = sr as usize * w;
        let srow = &src[(sbase as isize + c_lo as isize + dx) as usize
            ..(sbase as isize + c_hi as isize + dx) as usize];
        for (d, &s) in drow.iter_mut().zip(srow) {
            *d = coeff.mul_add(s, *d);
        }
    }
}

/// Sum over in-bounds (r, c) of a[r, c] * b[r + dy, c + dx].
///
/// Accumulates in eight fixed lanes so the reduction vectorizes without
/// depending on a single serial FMA chain; the lane order is static, so
/// results stay deterministic run to run.
#[inline]
fn shifted_dot<T: Scalar>(a: &[T], b: &[T], h: usize, w: usize, dy: isize, dx: isize) -> T {
    let mut lanes = [T::zero(); 8];
    let mut tail = T::zero();
    for r in 0..h {
        let sr = r as isize + dy;
        if sr < 0 || sr >= h as isize {
            continue;
        }
        let (c_lo, c_hi) = span(w, dx);
        if c_lo >= c_hi {
            continue;
        }
        let arow = &a[r * w + c_lo..r * w + c_hi];
        let sbase = sr as usize * w;
        let brow = &b[(sbase as isize + c_lo as isize + dx) as usize
            ..(sbase as isize + c_hi as isize + dx) as usize];
        let mut ac = arow.chunks_exact(8);
        let mut bc = brow.chunks_exact(8);
        for (ca, cb) in (&mut ac).zip(&mut bc) {
            for j in 0..8 {
                lanes[j] = ca[j].mul_add(cb[j], lanes[j]);
            }
        }
        for (&av, &bv) in ac.remainder().iter().zip(bc.remainder()) {
            tail = av.mul_add(bv, tail);
        }
    }
    let mut acc = tail;
    for lane in lanes {
        acc = acc + lane;
    }
    acc
}

/// Valid column range [lo, hi) such that 0 <= c + dx < w.
#[inline]
fn span(w: usize, dx: isize) -> (usize, usize) {
    let lo = if dx < 0 { (-dx) as usize } else { 0 };
    let hi = if dx > 0 { w.saturating_sub(dx as usize) } else { w };
    (lo.min(w), hi)
}

/// acc[c] += Σ_i Σ_j taps[i][j] * rows[i][c + j - 1] for a 3-wide kernel row
/// over N source rows in one fused pass; the accumulator chunk stays hot
/// across all N*3 taps instead of being re-walked per tap.
#[inline]
fn stencil_rows_fwd<T: Scalar, const N: usize>(acc: &mut [T], rows: [&[T]; N], taps: [&[T]; N]) {
    let w = acc.len();
    let n = w - 2;
    let mut edge = acc[0];
    for i in 0..N {
        edge = taps[i][2].mul_add(rows[i][1], taps[i][1].mul_add(rows[i][0], edge));
    }
    acc[0] = edge;
    let mut sub: [[&[T]; 3]; N] = [[&[]; 3]; N];
    for i in 0..N {
        sub[i] = [&rows[i][..n], &rows[i][1..1 + n], &rows[i][2..2 + n]];
    }
    let interior = &mut acc[1..w - 1];
    for c in 0..n {
        let mut v = interior[c];
        for i in 0..N {
            v = taps[i][0].mul_add(sub[i][0][c], v);
            v = taps[i][1].mul_add(sub[i][1][c], v);
            v = taps[i][2].mul_add(sub[i][2][c], v);
        }
        interior[c] = v;
    }
    let mut edge = acc[w - 1];
    for i in 0..N {
        edge = taps[i][1].mul_add(rows[i][w - 1], taps[i][0].mul_add(rows[i][w - 2], edge));
    }
    acc[w - 1] = edge;
}

/// Spatially flipped variant: acc[c] += Σ_i Σ_j taps[i][j] * rows[i][c + 1 - j].
#[inline]
fn stencil_rows_rev<T: Scalar, const N: usize>(acc: &mut [T], rows: [&[T]; N], taps: [&[T]; N]) {
    let w = acc.len();
    let n = w - 2;
    let mut edge = acc[0];
    for i in 0..N {
        edge = taps[i][1].mul_add(rows[i][0], taps[i][0].mul_add(rows[i][1], edge));
    }
    acc[0] = edge;
    let mut sub: [[&[T]; 3]; N] = [[&[]; 3]; N];
    for i in 0..N {
        sub[i] = [&rows[i][..n], &rows[i][1..1 + n], &rows[i][2..2 + n]];
    }
    let interior = &mut acc[1..w - 1];
    for c in 0..n {
        let mut v = interior[c];
        for i in 0..N {
            v = taps[i][0].mul_add(sub[i][2][c], v);
            v = taps[i][1].mul_add(sub[i][1][c], v);
            v = taps[i][2].mul_add(sub[i][0][c], v);
        }
        interior[c] = v;
    }
    let mut edge = acc[w - 1];
    for i in 0..N {
        edge = taps[i][2].mul_add(rows[i][w - 2], taps[i][1].mul_add(rows[i][w - 1], edge));
    }
    acc[w - 1] = edge;
}

/// All three column-offset correlation sums of two planes at row shift `dy`:
/// out[j] = Σ_{r,c} a[r, c] * b[r + dy, c + j - 1] over in-bounds indices.
/// Accumulator lanes persist across rows, so the horizontal reduction runs
/// once per call rather than once per row.
fn shifted_dots3<T: Scalar>(a: &[T], b: &[T], h: usize, w: usize, dy: isize) -> [T; 3] {
    let n = w - 2;
    let mut lanes = [[T::zero(); 8]; 3];
    let mut tails = [T::zero(); 3];
    let r_lo = if dy < 0 { (-dy) as usize } else { 0 };
    let r_hi = if dy > 0 { h - dy as usize } else { h };
    for r in r_lo..r_hi {
        let arow = &a[r * w..(r + 1) * w];
        let sr = (r as isize + dy) as usize;
        let brow = &b[sr * w..(sr + 1) * w];
        let ia = &arow[1..w - 1];
        let parts = [&brow[..n], &brow[1..1 + n], &brow[2..2 + n]];
        let mut ca = ia.chunks_exact(8);
        let mut off = 0;
        for ch in &mut ca {
            for t in 0..3 {
                let cb = &parts[t][off..off + 8];
                for j in 0..8 {
                    lanes[t][j] = ch[j].mul_add(cb[j], lanes[t][j]);
                }
            }
            off += 8;
        }
        for (j, &av) in ca.remainder().iter().enumerate() {
            for t in 0..3 {
                tails[t] = av.mul_add(parts[t][off + j], tails[t]);
            }
        }
        tails[1] = arow[0].mul_add(brow[0], tails[1]);
        tails[2] = arow[0].mul_add(brow[1], tails[2]);
        tails[0] = arow[w - 1].mul_add(brow[w - 2], tails[0]);
        tails[1] = arow[w - 1].mul_add(brow[w - 1], tails[1]);
    }
    let mut out = [T::zero(); 3];
    for t in 0..3 {
        let mut acc = tails[t];
        for lane in lanes[t] {
            acc = acc + lane;
        }
        out[t] = acc;
    }
    out
}

/// One row of `shifted_dots9`: accumulates the three column-offset products
/// of `arow` against each listed `brows[i]` into the lane/tail slots named by
/// `which[i]`. `N` and `which` are compile-time constants at every call site,
/// so the row-index loop unrolls away.
#[inline]
fn dots3_rows<T: Scalar, const N: usize>(
    arow: &[T],
    brows: [&[T]; N],
    which: [usize; N],
    lanes: &mut [[[T; 8]; 3]; 3],
    tails: &mut [[T; 3]; 3],
) {
    let w = arow.len();
    let n = w - 2;
    let ia = &arow[1..w - 1];
    let mut sub: [[&[T]; 3]; N] = [[&[][..]; 3]; N];
    for i in 0..N {
        sub[i] = [&brows[i][..n], &brows[i][1..1 + n], &brows[i][2..2 + n]];
    }
    let mut ca = ia.chunks_exact(8);
    let mut off = 0;
    for ch in &mut ca {
        for i in 0..N {
            let ki = which[i];
            for t in 0..3 {
                let cb = &sub[i][t][off..off + 8];
                for j in 0..8 {
                    lanes[ki][t][j] = ch[j].mul_add(cb[j], lanes[ki][t][j]);
                }
            }
        }
        off += 8;
    }
    for (j, &av) in ca.remainder().iter().enumerate() {
        for i in 0..N {
            let ki = which[i];
            for t in 0..3 {
                tails[ki][t] = av.mul_add(sub[i][t][off + j], tails[ki][t]);
            }
        }
    }
    for i in 0..N {
        let ki = which[i];
        let brow = brows[i];
        tails[ki][1] = arow[0].mul_add(brow[0], tails[ki][1]);
        tails[ki][2] = arow[0].mul_add(brow[1], tails[ki][2]);
        tails[ki][0] = arow[w - 1].mul_add(brow[w - 2], tails[ki][0]);
        tails[ki][1] = arow[w - 1].mul_add(brow[w - 1], tails[ki][1]);
    }
}

/// All nine correlation sums of two equal-size planes in one streaming pass:
/// out[i][j] = Σ_{r,c} a[r, c] * b[r + i - 1, c + j - 1] over in-bounds
/// indices. Equivalent to three `shifted_dots3` calls (dy = -1, 0, 1) with
/// identical per-slot accumulation order, but reads each plane once instead
/// of three times. Requires h >= 2 and w >= 2.
fn shifted_dots9<T: Scalar>(a: &[T], b: &[T], h: usize, w: usize) -> [[T; 3]; 3] {
    let mut lanes = [[[T::zero(); 8]; 3]; 3];
    let mut tails = [[T::zero(); 3]; 3];
    let brow = |i: usize| &b[i * w..(i + 1) * w];
    for r in 0..h {
        let arow = &a[r * w..(r + 1) * w];
        if r == 0 {
            dots3_rows::<T, 2>(arow, [brow(0), brow(1)], [1, 2], &mut lanes, &mut tails);
        } else if r == h - 1 {
            dots3_rows::<T, 2>(arow, [brow(r - 1), brow(r)], [0, 1], &mut lanes, &mut tails);
        } else {
            dots3_rows::<T, 3>(
                arow,
                [brow(r - 1), brow(r), brow(r + 1)],
                [0, 1, 2],
                &mut lanes,
                &mut tails,
            );
        }
    }
    let mut out = [[T::zero(); 3]; 3];
    for ki in 0..3 {
        for t in 0..3 {
            let mut acc = tails[ki][t];
            for lane in lanes[ki][t] {
                acc = acc + lane;
            }
            out[ki][t] = acc;
        }
    }
    out
}

/// acc[c] += Σ_j taps[j] * src[c + j - rw], one subslice pass per tap; the
/// generic-width fallback for kernels that are not 3 wide.
#[inline]
fn row_taps_fwd<T: Scalar>(acc: &mut [T], src: &[T], taps: &[T], rw: isize) {
    let w = acc.len();
    for (j, &coeff) in taps.iter().enumerate() {
        let dx = j as isize - rw;
        let (lo, hi) = span(w, dx);
        if lo >= hi {
            continue;
        }
        let d = &mut acc[lo..hi];
        let s = &src[(lo as isize + dx) as usize..(hi as isize + dx) as usize];
        for (a, &v) in d.iter_mut().zip(s) {
            *a = coeff.mul_add(v, *a);
        }
    }
}

/// acc[c] += Σ_j taps[j] * src[c + rw - j]: flipped generic-width fallback.
#[inline]
fn row_taps_rev<T: Scalar>(acc: &mut [T], src: &[T], taps: &[T], rw: isize) {
    let w = acc.len();
    for (j, &coeff) in taps.iter().enumerate() {
        let dx = rw - j as isize;
        let (lo, hi) = span(w, dx);
        if lo >= hi {
            continue;
        }
        let d = &mut acc[lo..hi];
        let s = &src[(lo as isize + dx) as usize..(hi as isize + dx) as usize];
        for (a, &v) in d.iter_mut().zip(s) {
            *a = coeff.mul_add(v, *a);
        }
    }
}

// ---------------------------------------------------------------------------
// Matrix products (row-major).
// ---------------------------------------------------------------------------

/// out[m, n] = a[m, k] * b[k, n]
pub fn mm_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    out.fill(T::zero());
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = av.mul_add(bv, *o);
            }
        }
    }
}

/// out[m, n] = a[m, k] * b[n, k]ᵀ
pub fn mm_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            *o = laned_dot(arow, brow);
        }
    }
}

/// Dot product with eight fixed accumulator lanes (vectorizes; deterministic).
#[inline]
fn laned_dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let mut ac = a.chunks_exact(8);
    let mut bc = b.chunks_exact(8);
    for (ca, cb) in (&mut ac).zip(&mut bc) {
        for j in 0..8 {
            lanes[j] = ca[j].mul_add(cb[j], lanes[j]);
        }
    }
    let mut acc = T::zero();
    for (&av, &bv) in ac.remainder().iter().zip(bc.remainder()) {
        acc = av.mul_add(bv, acc);
    }
    for lane in lanes {
        acc = acc + lane;
    }
    acc
}

/// out[k, n] = a[m, k]ᵀ * b[m, n]
pub fn mm_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    out.fill(T::zero());
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = av.mul_add(bv, *o);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// 2-D convolution, zero padding, stride 1, odd kernel.
// ---------------------------------------------------------------------------

pub struct ConvDims {
    pub b: usize,
    pub ci: usize,
    pub co: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvDims {
    fn plane(&self) -> usize {
        self.h * self.w
    }
}

/// out[b, co, h, w]; weight[co, ci, kh, kw]; x[b, ci, h, w].
///
/// Walks output rows with a hoisted accumulator so every kernel tap lands in
/// a hot row buffer instead of a full-plane read-modify-write pass per tap.
pub fn conv2d_fwd<T: Scalar>(x: &[T], wt: &[T], bias: Option<&[T]>, out: &mut [T], d: &ConvDims) {
    if d.kh == 3 && d.kw == 3 && d.h >= 2 && d.w >= 2 {
        return conv2d_fwd_3x3(x, wt, bias, out, d);
    }
    let (rh, rw) = (d.kh as isize / 2, d.kw as isize / 2);
    let plane = d.plane();
    let kk = d.kh * d.kw;
    let mut acc = vec![T::zero(); d.w];
    for bi in 0..d.b {
        let xb = &x[bi * d.ci * plane..(bi + 1) * d.ci * plane];
        for oc in 0..d.co {
            let init = match bias {
                Some(bs) => bs[oc],
                None => T::zero(),
            };
            let ob = (bi * d.co + oc) * plane;
            let wo = &wt[oc * d.ci * kk..(oc + 1) * d.ci * kk];
            for r in 0..d.h {
                acc.fill(init);
                for ic in 0..d.ci {
                    let ip = &xb[ic * plane..(ic + 1) * plane];
                    let wi = &wo[ic * kk..(ic + 1) * kk];
                    for ki in 0..d.kh {
                        let sr = r as isize + ki as isize - rh;
                        if sr < 0 || sr >= d.h as isize {
                            continue;
                        }
                        let srow = &ip[sr as usize * d.w..(sr as usize + 1) * d.w];
                        row_taps_fwd(&mut acc, srow, &wi[ki * d.kw..(ki + 1) * d.kw], rw);
                    }
                }
                out[ob + r * d.w..ob + (r + 1) * d.w].copy_from_slice(&acc);
            }
        }
    }
}

fn conv2d_fwd_3x3<T: Scalar>(x: &[T], wt: &[T], bias: Option<&[T]>, out: &mut [T], d: &ConvDims) {
    let plane = d.plane();
    let (h, w) = (d.h, d.w);
    let mut acc = vec![T::zero(); w];
    for bi in 0..d.b {
        let xb = &x[bi * d.ci * plane..(bi + 1) * d.ci * plane];
        for oc in 0..d.co {
            let init = match bias {
                Some(bs) => bs[oc],
                None => T::zero(),
            };
            let ob = (bi * d.co + oc) * plane;
            let wo = &wt[oc * d.ci * 9..(oc + 1) * d.ci * 9];
            for r in 0..h {
                acc.fill(init);
                for ic in 0..d.ci {
                    let ip = &xb[ic * plane..(ic + 1) * plane];
                    let wi = &wo[ic * 9..ic * 9 + 9];
                    let row = |i: usize| &ip[i * w..(i + 1) * w];
                    if r == 0 {
                        stencil_rows_fwd::<T, 2>(&mut acc, [row(0), row(1)], [&wi[3..6], &wi[6..9]]);
                    } else if r == h - 1 {
                        stencil_rows_fwd::<T, 2>(&mut acc, [row(r - 1), row(r)], [&wi[0..3], &wi[3..6]]);
                    } else {
                        stencil_rows_fwd::<T, 3>(
                            &mut acc,
                            [row(r - 1), row(r), row(r + 1)],
                            [&wi[0..3], &wi[3..6], &wi[6..9]],
                        );
                    }
                }
                out[ob + r * w..ob + (r + 1) * w].copy_from_slice(&acc);
            }
        }
    }
}

/// dx[b, ci, h, w] from upstream g[b, co, h, w].
pub fn conv2d_bwd_input<T: Scalar>(g: &[T], wt: &[T], dx: &mut [T], d: &ConvDims) {
    if d.kh == 3 && d.kw == 3 && d.h >= 2 && d.w >= 2 {
        return conv2d_bwd_input_3x3(g, wt, dx, d);
    }
    let (rh, rw) = (d.kh as isize / 2, d.kw as isize / 2);
    let plane = d.plane();
    let kk = d.kh * d.kw;
    let mut acc = vec![T::zero(); d.w];
    for bi in 0..d.b {
        let gb = &g[bi * d.co * plane..(bi + 1) * d.co * plane];
        for ic in 0..d.ci {
            let db = (bi * d.ci + ic) * plane;
            for r in 0..d.h {
                acc.fill(T::zero());
                for oc in 0..d.co {
                    let gp = &gb[oc * plane..(oc + 1) * plane];
                    let wo = &wt[(oc * d.ci + ic) * kk..(oc * d.ci + ic + 1) * kk];
                    for ki in 0..d.kh {
                        let sr = r as isize + rh - ki as isize;
                        if sr < 0 || sr >= d.h as isize {
                            continue;
                        }
                        let srow = &gp[sr as usize * d.w..(sr as usize + 1) * d.w];
                        row_taps_rev(&mut acc, srow, &wo[ki * d.kw..(ki + 1) * d.kw], rw);
                    }
                }
                dx[db + r * d.w..db + (r + 1) * d.w].copy_from_slice(&acc);
            }
        }
    }
}

fn conv2d_bwd_input_3x3<T: Scalar>(g: &[T], wt: &[T], dx: &mut [T], d: &ConvDims) {
    let plane = d.plane();
    let (h, w) = (d.h, d.w);
    let mut acc = vec![T::zero(); w];
    for bi in 0..d.b {
        let gb = &g[bi * d.co * plane..(bi + 1) * d.co * plane];
        for ic in 0..d.ci {
            let db = (bi * d.ci + ic) * plane;
            for r in 0..h {
                acc.fill(T::zero());
                for oc in 0..d.co {
                    let gp = &gb[oc * plane..(oc + 1) * plane];
                    let wo = &wt[(oc * d.ci + ic) * 9..(oc * d.ci + ic) * 9 + 9];
                    let row = |i: usize| &gp[i * w..(i + 1) * w];
                    // Tap ki reads source row r + 1 - ki under the flipped
                    // column offsets, so the row list walks downward.
                    if r == 0 {
                        stencil_rows_rev::<T, 2>(&mut acc, [row(1), row(0)], [&wo[0..3], &wo[3..6]]);
                    } else if r == h - 1 {
                        stencil_rows_rev::<T, 2>(&mut acc, [row(r), row(r - 1)], [&wo[3..6], &wo[6..9]]);
                    } else {
                        stencil_rows_rev::<T, 3>(
                            &mut acc,
                            [row(r + 1), row(r), row(r - 1)],
                            [&wo[0..3], &wo[3..6], &wo[6..9]],
                        );
                    }
                }
                dx[db + r * w..db + (r + 1) * w].copy_from_slice(&acc);
            }
        }
    }
}

/// dw[co, ci, kh, kw] from upstream g[b, co, h, w].
pub fn conv2d_bwd_weight<T: Scalar>(x: &[T], g: &[T], dw: &mut [T], d: &ConvDims) {
    let (rh, rw) = (d.kh as isize / 2, d.kw as isize / 2);
    let plane = d.plane();
    let kk = d.kh * d.kw;
    dw.fill(T::zero());
    for bi in 0..d.b {
        for oc in 0..d.co {
            let gp = &g[(bi * d.co + oc) * plane..(bi * d.co + oc + 1) * plane];
            for ic in 0..d.ci {
                let ip = &x[(bi * d.ci + ic) * plane..(bi * d.ci + ic + 1) * plane];
                let wbase = (oc * d.ci + ic) * kk;
                for ki in 0..d.kh {
                    let dy = ki as isize - rh;
                    if d.kw == 3 && rw == 1 && d.w >= 2 {
                        let dots = shifted_dots3(gp, ip, d.h, d.w, dy);
                        for (kj, &v) in dots.iter().enumerate() {
                            let idx = wbase + ki * d.kw + kj;
                            dw[idx] = dw[idx] + v;
                        }
                    } else {
                        for kj in 0..d.kw {
                            let v = shifted_dot(gp, ip, d.h, d.w, dy, kj as isize - rw);
                            let idx = wbase + ki * d.kw + kj;
                            dw[idx] = dw[idx] + v;
                        }
                    }
                }
            }
        }
    }
}

/// dbias[co] from upstream g[b, co, h, w].
pub fn conv2d_bwd_bias<T: Scalar>(g: &[T], dbias: &mut [T], d: &ConvDims) {
    let plane = d.plane();
    dbias.fill(T::zero());
    for bi in 0..d.b {
        for oc in 0..d.co {
            let gp = &g[(bi * d.co + oc) * plane..(bi * d.co + oc + 1) * plane];
            let mut lanes = [T::zero(); 8];
            let mut chunks = gp.chunks_exact(8);
            for ch in &mut chunks {
                for j in 0..8 {
                    lanes[j] = lanes[j] + ch[j];
                }
            }
            let mut acc = T::zero();
            for &v in chunks.remainder() {
                acc = acc + v;
            }
            for lane in lanes {
                acc = acc + lane;
            }
            dbias[oc] = dbias[oc] + acc;
        }
    }
}

/// Transposed convolution: adjoint of `conv2d_fwd` in the spatial offsets.
/// x[b, ci, h, w]; weight[ci, co, kh, kw]; out[b, co, h, w].
pub fn conv_transpose2d_fwd<T: Scalar>(x: &[T], wt: &[T], out: &mut [T], d: &ConvDims) {
    let (rh, rw) = (d.kh as isize / 2, d.kw as isize / 2);
    let plane = d.plane();
    let kk = d.kh * d.kw;
    let mut acc = vec![T::zero(); d.w];
    for bi in 0..d.b {
        let xb = &x[bi * d.ci * plane..(bi + 1) * d.ci * plane];
        for oc in 0..d.co {
            let ob = (bi * d.co + oc) * plane;
            for r in 0..d.h {
                acc.fill(T::zero());
                for ic in 0..d.ci {
                    let ip = &xb[ic * plane..(ic + 1) * plane];
                    let wo = &wt[(ic * d.co + oc) * kk..(ic * d.co + oc + 1) * kk];
                    for ki in 0..d.kh {
                        let sr = r as isize + rh - ki as isize;
                        if sr < 0 || sr >= d.h as isize {
                            continue;
                        }
                        let srow = &ip[sr as usize * d.w..(sr as usize + 1) * d.w];
                        row_taps_rev(&mut acc, srow, &wo[ki * d.kw..(ki + 1) * d.kw], rw);
                    }
                }
                out[ob + r * d.w..ob + (r + 1) * d.w].copy_from_slice(&acc);
            }
        }
    }
}

pub fn conv_transpose2d_bwd_input<T: Scalar>(g: &[T], wt: &[T], dx: &mut [T], d: &ConvDims) {
    let (rh, rw) = (d.kh as isize / 2, d.kw as isize / 2);
    let plane = d.plane();
    let kk = d.kh * d.kw;
    let mut acc = vec![T::zero(); d.w];
    for bi in 0..d.b {
        let gb = &g[bi * d.co * plane..(bi + 1) * d.co * plane];
        for ic in 0..d.ci {
            let db = (bi * d.ci + ic) * plane;
            for r in 0..d.h {
                acc.fill(T::zero());
                for oc in 0..d.co {
                    let gp = &gb[oc * plane..(oc + 1) * plane];
                    let wo = &wt[(ic * d.co + oc) * kk..(ic * d.co + oc + 1) * kk];
                    for ki in 0..d.kh {
                        let sr = r as isize + ki as isize - rh;
                        if sr < 0 || sr >= d.h as isize {
                            continue;
                        }
                        let srow = &gp[sr as usize * d.w..(sr as usize + 1) * d.w];
                        row_taps_fwd(&mut acc, srow, &wo[ki * d.kw..(ki + 1) * d.kw], rw);
                    }
                }
                dx[db + r * d.w..db + (r + 1) * d.w].copy_from_slice(&acc);
            }
        }
    }
}

pub fn conv_transpose2d_bwd_weight<T: Scalar>(x: &[T], g: &[T], dw: &mut [T], d: &ConvDims) {
    let (rh, rw) = (d.kh as isize / 2, d.kw as isize / 2);
    let plane = d.plane();
    let kk = d.kh * d.kw;
    dw.fill(T::zero());
    for bi in 0..d.b {
        for ic in 0..d.ci {
            let ip = &x[(bi * d.ci + ic) * plane..(bi * d.ci + ic + 1) * plane];
            for oc in 0..d.co {
                let gp = &g[(bi * d.co + oc) * plane..(bi * d.co + oc + 1) * plane];
                let wbase = (ic * d.co + oc) * kk;
                for ki in 0..d.kh {
                    let dy = rh - ki as isize;
                    if d.kw == 3 && rw == 1 && d.w >= 2 {
                        // The tap offset here is rw - kj, so dots[j] (offset
                        // j - rw) lands on the mirrored slot kj = 2 - j.
                        let dots = shifted_dots3(gp, ip, d.h, d.w, dy);
                        for (j, &v) in dots.iter().enumerate() {
                            let idx = wbase + ki * d.kw + (2 - j);
                            dw[idx] = dw[idx] + v;
                        }
                    } else {
                        for kj in 0..d.kw {
                            let v = shifted_dot(gp, ip, d.h, d.w, dy, rw - kj as isize);
                            let idx = wbase + ki * d.kw + kj;
                            dw[idx] = dw[idx] + v;
                        }
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Pooling / upsampling, factor 2.
// ---------------------------------------------------------------------------

/// 2x2 average pooling; h, w must be even. planes = b * c.
pub fn avgpool2_fwd<T: Scalar>(x: &[T], out: &mut [T], planes: usize, h: usize, w: usize) {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::of_f64(0.25);
    for p in 0..planes {
        let ip = &x[p * h * w..(p + 1) * h * w];
        let op = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for r in 0..oh {
            let r0 = &ip[(2 * r) * w..(2 * r) * w + w];
            let r1 = &ip[(2 * r + 1) * w..(2 * r + 1) * w + w];
            let orow = &mut op[r * ow..(r + 1) * ow];
            for c in 0..ow {
                orow[c] = (r0[2 * c] + r0[2 * c + 1] + r1[2 * c] + r1[2 * c + 1]) * quarter;
            }
        }
    }
}

pub fn avgpool2_bwd<T: Scalar>(g: &[T], dx: &mut [T], planes: usize, h: usize, w: usize) {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::of_f64(0.25);
    for p in 0..planes {
        let gp = &g[p * oh * ow..(p + 1) * oh * ow];
        let dp = &mut dx[p * h * w..(p + 1) * h * w];
        for r in 0..oh {
            let grow = &gp[r * ow..(r + 1) * ow];
            for c in 0..ow {
                let v = grow[c] * quarter;
                dp[(2 * r) * w + 2 * c] = v;
                dp[(2 * r) * w + 2 * c + 1] = v;
                dp[(2 * r + 1) * w + 2 * c] = v;
                dp[(2 * r + 1) * w + 2 * c + 1] = v;
            }
        }
    }
}

/// Nearest-neighbour upsampling by 2; output is 2h x 2w.
pub fn upsample2_fwd<T: Scalar>(x: &[T], out: &mut [T], planes: usize, h: usize, w: usize) {
    let (oh, ow) = (2 * h, 2 * w);
    for p in 0..planes {
        let ip = &x[p * h * w..(p + 1) * h * w];
        let op = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for r in 0..h {
            let irow = &ip[r * w..(r + 1) * w];
            for c in 0..w {
                let v = irow[c];
                op[(2 * r) * ow + 2 * c] = v;
                op[(2 * r) * ow + 2 * c + 1] = v;
                op[(2 * r + 1) * ow + 2 * c] = v;
                op[(2 * r + 1) * ow + 2 * c + 1] = v;
            }
        }
    }
}

pub fn upsample2_bwd<T: Scalar>(g: &[T], dx: &mut [T], planes: usize, h: usize, w: usize) {
    let (oh, ow) = (2 * h, 2 * w);
    for p in 0..planes {
        let gp = &g[p * oh * ow..(p + 1) * oh * ow];
        let dp = &mut dx[p * h * w..(p + 1) * h * w];
        for r in 0..h {
            for c in 0..w {
                dp[r * w + c] = gp[(2 * r) * ow + 2 * c]
                    + gp[(2 * r) * ow + 2 * c + 1]
                    + gp[(2 * r + 1) * ow + 2 * c]
                    + gp[(2 * r + 1) * ow + 2 * c + 1];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Pointwise activations.
// ---------------------------------------------------------------------------

pub fn relu_fwd<T: Scalar>(x: &[T], out: &mut [T]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = if v > T::zero() { v } else { T::zero() };
    }
}

/// Subgradient 0 at the kink.
pub fn relu_bwd<T: Scalar>(x: &[T], g: &[T], dx: &mut [T]) {
    for ((d, &v), &gv) in dx.iter_mut().zip(x).zip(g) {
        *d = if v > T::zero() { gv } else { T::zero() };
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Largest slope of the activation, used when budgeting Lipschitz bounds.
pub fn gelu_lipschitz() -> f64 {
    // The maximum of |gelu'| sits near x = 1.1; scan once, coarsely then finely.
    let mut best: f64 = 0.0;
    let mut x = -6.0;
    while x <= 6.0 {
        best = best.max(gelu_grad_scalar(x).abs());
        x += 1e-3;
    }
    best
}

pub fn gelu_fwd<T: Scalar>(x: &[T], out: &mut [T]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = T::of_f64(gelu_scalar(v.into_f64()));
    }
}

pub fn gelu_bwd<T: Scalar>(x: &[T], g: &[T], dx: &mut [T]) {
    for ((d, &v), &gv) in dx.iter_mut().zip(x).zip(g) {
        *d = T::of_f64(gelu_grad_scalar(v.into_f64())) * gv;
    }
}

// ---------------------------------------------------------------------------
// Batch-statistics normalization over (batch, spatial) per channel.
// ---------------------------------------------------------------------------

pub struct BnDims {
    pub b: usize,
    pub c: usize,
    pub hw: usize,
}

/// Train-mode forward; returns per-channel biased mean/variance.
pub fn bn_train_fwd<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    eps: T,
    out: &mut [T],
    mean: &mut [T],
    var: &mut [T],
    d: &BnDims,
) {
    let n = T::of_f64((d.b * d.hw) as f64);
    for ch in 0..d.c {
        let mut s = T::zero();
        let mut s2 = T::zero();
        for bi in 0..d.b {
            let base = (bi * d.c + ch) * d.hw;
            for &v in &x[base..base + d.hw] {
                s = s + v;
                s2 = v.mul_add(v, s2);
            }
        }
        let mu = s / n;
        let v = (s2 / n - mu * mu).max(T::zero());
        mean[ch] = mu;
        var[ch] = v;
        let inv = T::one() / (v + eps).sqrt();
        let a = gamma[ch] * inv;
        let b = beta[ch] - gamma[ch] * mu * inv;
        for bi in 0..d.b {
            let base = (bi * d.c + ch) * d.hw;
            for (o, &xv) in out[base..base + d.hw].iter_mut().zip(&x[base..base + d.hw]) {
                *o = a.mul_add(xv, b);
            }
        }
    }
}

/// Train-mode backward given the saved batch statistics.
pub fn bn_train_bwd<T: Scalar>(
    x: &[T],
    g: &[T],
    gamma: &[T],
    mean: &[T],
    var: &[T],
    eps: T,
    dx: &mut [T],
    dgamma: &mut [T],
    dbeta: &mut [T],
    d: &BnDims,
) {
    let n = T::of_f64((d.b * d.hw) as f64);
    for ch in 0..d.c {
        let inv = T::one() / (var[ch] + eps).sqrt();
        let mu = mean[ch];
        let mut s1 = T::zero(); // sum g
        let mut s2 = T::zero(); // sum g * xhat
        for bi in 0..d.b {
            let base = (bi * d.c + ch) * d.hw;
            for (&gv, &xv) in g[base..base + d.hw].iter().zip(&x[base..base + d.hw]) {
                s1 = s1 + gv;
                s2 = gv.mul_add((xv - mu) * inv, s2);
            }
        }
        dgamma[ch] = s2;
        dbeta[ch] = s1;
        let k = gamma[ch] * inv / n;
        for bi in 0..d.b {
            let base = (bi * d.c + ch) * d.hw;
            for (dv, (&gv, &xv)) in
                dx[base..base + d.hw].iter_mut().zip(g[base..base + d.hw].iter().zip(&x[base..base + d.hw]))
            {
                let xhat = (xv - mu) * inv;
                *dv = k * (n * gv - s1 - xhat * s2);
            }
        }
    }
}

/// Eval-mode forward: per-channel affine transform from frozen statistics.
pub fn bn_eval_fwd<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    rmean: &[T],
    rvar: &[T],
    eps: T,
    out: &mut [T],
    d: &BnDims,
) {
    for ch in 0..d.c {
        let inv = T::one() / (rvar[ch] + eps).sqrt();
        let a = gamma[ch] * inv;
        let b = beta[ch] - gamma[ch] * rmean[ch] * inv;
        for bi in 0..d.b {
            let base = (bi * d.c + ch) * d.hw;
            for (o, &xv) in out[base..base + d.hw].iter_mut().zip(&x[base..base + d.hw]) {
                *o = a.mul_add(xv, b);
            }
        }
    }
}

pub fn bn_eval_bwd<T: Scalar>(
    x: &[T],
    g: &[T],
    gamma: &[T],
    rmean: &[T],
    rvar: &[T],
    eps: T,
    dx: &mut [T],
    dgamma: &mut [T],
    dbeta: &mut [T],
    d: &BnDims,
) {
    for ch in 0..d.c {
        let inv = T::one() / (rvar[ch] + eps).sqrt();
        let a = gamma[ch] * inv;
        let mut s1 = T::zero();
        let mut s2 = T::zero();
        for bi in 0..d.b {
            let base = (bi * d.c + ch) * d.hw;
            for (i, (&gv, &xv)) in g[base..base + d.hw].iter().zip(&x[base..base + d.hw]).enumerate() {
                dx[base + i] = a * gv;
                s1 = s1 + gv;
                s2 = gv.mul_add((xv - rmean[ch]) * inv, s2);
            }
        }
        dgamma[ch] = s2;
        dbeta[ch] = s1;
    }
}

// ---------------------------------------------------------------------------
// 2-D DFT magnitude (orthonormal scaling).
// ---------------------------------------------------------------------------

/// Forward transform of each (h, w) plane; returns the complex spectra and
/// writes |X| into `mag`. planes = product of leading dims.
pub fn fft2_mag_fwd<T: Scalar>(x: &[T], mag: &mut [T], planes: usize, h: usize, w: usize) -> Vec<Complex<T>> {
    let mut planner = FftPlanner::<T>::new();
    let fft_w = planner.plan_fft_forward(w);
    let fft_h = planner.plan_fft_forward(h);
    let scale = T::of_f64(1.0 / ((h * w) as f64).sqrt());
    let mut spec = vec![Complex::new(T::zero(), T::zero()); planes * h * w];
    let mut col = vec![Complex::new(T::zero(), T::zero()); h];
    for p in 0..planes {
        let sp = &mut spec[p * h * w..(p + 1) * h * w];
        for r in 0..h {
            for c in 0..w {
                sp[r * w + c] = Complex::new(x[p * h * w + r * w + c], T::zero());
            }
            fft_w.process(&mut sp[r * w..(r + 1) * w]);
        }
        for c in 0..w {
            for r in 0..h {
                col[r] = sp[r * w + c];
            }
            fft_h.process(&mut col);
            for r in 0..h {
                sp[r * w + c] = col[r] * scale;
            }
        }
        for (m, s) in mag[p * h * w..(p + 1) * h * w].iter_mut().zip(sp.iter()) {
            *m = s.norm();
        }
    }
    spec
}

/// Backward: dx = Re(inverse-transform of g .* X / |X|), with the zero-
/// magnitude subgradient taken as 0.
pub fn fft2_mag_bwd<T: Scalar>(
    spec: &[Complex<T>],
    mag: &[T],
    g: &[T],
    dx: &mut [T],
    planes: usize,
    h: usize,
    w: usize,
) {
    let mut planner = FftPlanner::<T>::new();
    let ifft_w = planner.plan_fft_inverse(w);
    let ifft_h = planner.plan_fft_inverse(h);
    let scale = T::of_f64(1.0 / ((h * w) as f64).sqrt());
    let mut buf = vec![Complex::new(T::zero(), T::zero()); h * w];
    let mut col = vec![Complex::new(T::zero(), T::zero()); h];
    for p in 0..planes {
        let sp = &spec[p * h * w..(p + 1) * h * w];
        for i in 0..h * w {
            let m = mag[p * h * w + i];
            buf[i] = if m > T::zero() {
                sp[i] * (g[p * h * w + i] / m)
            } else {
                Complex::new(T::zero(), T::zero())
            };
        }
        for r in 0..h {
            ifft_w.process(&mut buf[r * w..(r + 1) * w]);
        }
        for c in 0..w {
            for r in 0..h {
                col[r] = buf[r * w + c];
            }
            ifft_h.process(&mut col);
            for r in 0..h {
                buf[r * w + c] = col[r] * scale;
            }
        }
        for (d, s) in dx[p * h * w..(p + 1) * h * w].iter_mut().zip(buf.iter()) {
            *d = s.re;
        }
    }
}

/// Binary high-pass mask over unshifted DFT coordinates: passes wrap-around
/// frequency radius >= radius_frac * Nyquist.
pub fn highpass_mask<T: Scalar>(h: usize, w: usize, radius_frac: f64) -> Vec<T> {
    let nyq = (h.min(w) as f64) / 2.0;
    let cutoff = radius_frac * nyq;
    let mut mask = vec![T::zero(); h * w];
    for r in 0..h {
        let fr = r.min(h - r) as f64;
        for c in 0..w {
            let fc = c.min(w - c) as f64;
            if (fr * fr + fc * fc).sqrt() >= cutoff {
                mask[r * w + c] = T::one();
            }
        }
    }
    mask
}

// ---------------------------------------------------------------------------
// Structural similarity over valid Gaussian windows.
// ---------------------------------------------------------------------------

pub fn gaussian_window<T: Scalar>(win: usize, sigma: f64) -> Vec<T> {
    let r = (win / 2) as isize;
    let mut k = vec![0.0f64; win * win];
    let mut sum = 0.0;
    for i in 0..win as isize {
        for j in 0..win as isize {
            let (di, dj) = ((i - r) as f64, (j - r) as f64);
            let v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            k[(i * win as isize + j) as usize] = v;
            sum += v;
        }
    }
    k.iter().map(|&v| T::of_f64(v / sum)).collect()
}

pub struct SsimCache<T> {
    pub mu_a: Vec<T>,
    pub mu_b: Vec<T>,
    pub saa: Vec<T>,
    pub sbb: Vec<T>,
    pub sab: Vec<T>,
    pub vh: usize,
    pub vw: usize,
}

pub struct SsimParams<T> {
    pub win: usize,
    pub c1: T,
    pub c2: T,
}

/// Mean SSIM over all valid window positions of every plane.
/// Returns the mean and the window statistics needed for the backward pass.
pub fn ssim_fwd<T: Scalar>(
    a: &[T],
    b: &[T],
    window: &[T],
    p: &SsimParams<T>,
    planes: usize,
    h: usize,
    w: usize,
) -> (T, SsimCache<T>) {
    let win = p.win;
    let (vh, vw) = (h - win + 1, w - win + 1);
    let vplane = vh * vw;
    let mut cache = SsimCache {
        mu_a: vec![T::zero(); planes * vplane],
        mu_b: vec![T::zero(); planes * vplane],
        saa: vec![T::zero(); planes * vplane],
        sbb: vec![T::zero(); planes * vplane],
        sab: vec![T::zero(); planes * vplane],
        vh,
        vw,
    };
    let mut total = T::zero();
    for pl in 0..planes {
        let ap = &a[pl * h * w..(pl + 1) * h * w];
        let bp = &b[pl * h * w..(pl + 1) * h * w];
        for pr in 0..vh {
            for pc in 0..vw {
                let mut mu_a = T::zero();
                let mut mu_b = T::zero();
                let mut saa = T::zero();
                let mut sbb = T::zero();
                let mut sab = T::zero();
                for i in 0..win {
                    let arow = &ap[(pr + i) * w + pc..(pr + i) * w + pc + win];
                    let brow = &bp[(pr + i) * w + pc..(pr + i) * w + pc + win];
                    let wrow = &window[i * win..(i + 1) * win];
                    for j in 0..win {
                        let (wv, av, bv) = (wrow[j], arow[j], brow[j]);
                        mu_a = wv.mul_add(av, mu_a);
                        mu_b = wv.mul_add(bv, mu_b);
                        saa = (wv * av).mul_add(av, saa);
                        sbb = (wv * bv).mul_add(bv, sbb);
                        // a·b first keeps the accumulation symmetric in (a, b).
                        sab = wv.mul_add(av * bv, sab);
                    }
                }
                let idx = pl * vplane + pr * vw + pc;
                cache.mu_a[idx] = mu_a;
                cache.mu_b[idx] = mu_b;
                cache.saa[idx] = saa;
                cache.sbb[idx] = sbb;
                cache.sab[idx] = sab;
                total = total + ssim_value(mu_a, mu_b, saa, sbb, sab, p.c1, p.c2);
            }
        }
    }
    let count = T::of_f64((planes * vplane) as f64);
    (total / count, cache)
}

#[inline]
fn ssim_value<T: Scalar>(mu_a: T, mu_b: T, saa: T, sbb: T, sab: T, c1: T, c2: T) -> T {
    let two = T::of_f64(2.0);
    let va = saa - mu_a * mu_a;
    let vb = sbb - mu_b * mu_b;
    let cov = sab - mu_a * mu_b;
    let n1 = two * mu_a * mu_b + c1;
    let n2 = two * cov + c2;
    let d1 = mu_a * mu_a + mu_b * mu_b + c1;
    let d2 = va + vb + c2;
    (n1 * n2) / (d1 * d2)
}

/// Backward pass of the mean SSIM; `g` is the upstream scalar gradient.
pub fn ssim_bwd<T: Scalar>(
    a: &[T],
    b: &[T],
    window: &[T],
    p: &SsimParams<T>,
    cache: &SsimCache<T>,
    g: T,
    da: &mut [T],
    db: &mut [T],
    planes: usize,
    h: usize,
    w: usize,
) {
    let win = p.win;
    let (vh, vw) = (cache.vh, cache.vw);
    let vplane = vh * vw;
    let two = T::of_f64(2.0);
    let gs = g / T::of_f64((planes * vplane) as f64);
    da.fill(T::zero());
    db.fill(T::zero());
    for pl in 0..planes {
        let ap = &a[pl * h * w..(pl + 1) * h * w];
        let bp = &b[pl * h * w..(pl + 1) * h * w];
        for pr in 0..vh {
            for pc in 0..vw {
                let idx = pl * vplane + pr * vw + pc;
                let (mu_a, mu_b) = (cache.mu_a[idx], cache.mu_b[idx]);
                let (saa, sbb, sab) = (cache.saa[idx], cache.sbb[idx], cache.sab[idx]);
                let va = saa - mu_a * mu_a;
                let vb = sbb - mu_b * mu_b;
                let cov = sab - mu_a * mu_b;
                let n1 = two * mu_a * mu_b + p.c1;
                let n2 = two * cov + p.c2;
                let d1 = mu_a * mu_a + mu_b * mu_b + p.c1;
                let d2 = va + vb + p.c2;
                let s = (n1 * n2) / (d1 * d2);
                let ds_dn1 = n2 / (d1 * d2);
                let ds_dn2 = n1 / (d1 * d2);
                let ds_dd1 = -s / d1;
                let ds_dd2 = -s / d2;
                // Stats enter via n2 = 2(Sab − μaμb) + C2 and d2 = (Saa − μa²) + (Sbb − μb²) + C2.
                let g_mu_a =
                    gs * (ds_dn1 * two * mu_b - ds_dn2 * two * mu_b + ds_dd1 * two * mu_a - ds_dd2 * two * mu_a);
                let g_mu_b =
                    gs * (ds_dn1 * two * mu_a - ds_dn2 * two * mu_a + ds_dd1 * two * mu_b - ds_dd2 * two * mu_b);
                let g_saa = gs * ds_dd2;
                let g_sbb = gs * ds_dd2;
                let g_sab = gs * ds_dn2 * two;
                // Scatter through each window weight.
                for i in 0..win {
                    let abase = (pr + i) * w + pc;
                    let wrow = &window[i * win..(i + 1) * win];
                    for j in 0..win {
                        let wv = wrow[j];
                        let (av, bv) = (ap[abase + j], bp[abase + j]);
                        let q = pl * h * w + abase + j;
                        da[q] = da[q] + wv * (g_mu_a + two * av * g_saa + bv * g_sab);
                        db[q] = db[q] + wv * (g_mu_b + two * bv * g_sbb + av * g_sab);
                    }
                }
            }
        }
    }
}
