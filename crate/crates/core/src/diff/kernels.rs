//! Dense numeric kernels shared by the forward and backward passes.
//!
//! Everything here works on flat row-major slices; shape validation happens
//! in the graph layer before these are called.

/// Scalar types the convolution kernels can run in.
pub(crate) trait Elem:
    Copy + Default + 'static + std::ops::Add<Output = Self> + std::ops::Mul<Output = Self> + std::ops::AddAssign
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    /// # Safety
    /// Pointers and strides must describe valid `m x k`, `k x n` and
    /// `m x n` buffers.
    #[allow(clippy::too_many_arguments)]
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
    );
}

impl Elem for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    unsafe fn raw_gemm(m: usize, k: usize, n: usize, a: *const f64, rsa: isize, csa: isize, b: *const f64, rsb: isize, csb: isize, beta: f64, c: *mut f64, rsc: isize) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, 1)
    }
}

impl Elem for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    unsafe fn raw_gemm(m: usize, k: usize, n: usize, a: *const f32, rsa: isize, csa: isize, b: *const f32, rsb: isize, csb: isize, beta: f32, c: *mut f32, rsc: isize) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, 1)
    }
}

/// `c = op(a) * op(b) + beta * c` where `op(a)` is `m x k` and
/// `op(b)` is `k x n`, all row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Elem>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_trans: bool,
    b: &[T],
    b_trans: bool,
    beta: T,
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above and the strides describe
    // exactly those buffers.
    unsafe { T::raw_gemm(m, k, n, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize) }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Output columns `[lo, hi)` whose input column `ox * stride - p + kx`
/// falls inside `[0, width)`.
#[inline]
fn valid_span(g: &ConvGeom, kx: usize, wo: usize) -> (usize, usize) {
    let off = kx as isize - g.padding as isize;
    let s = g.stride as isize;
    let lo = if off >= 0 { 0 } else { ((-off + s - 1) / s) as usize };
    let last = g.width as isize - 1 - off;
    let hi = if last < 0 { 0 } else { ((last / s) as usize + 1).min(wo) };
    (lo.min(hi), hi)
}

/// Unfold one `[C, H, W]` image into a `[C*k*k, Ho*Wo]` column matrix.
pub(crate) fn im2col<T: Elem>(x: &[f64], g: &ConvGeom, cols: &mut [T]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let k = g.kernel;
    let p = g.padding as isize;
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                let (lo, hi) = valid_span(g, kx, wo);
                for oy in 0..ho {
                    let iy = (oy * g.stride) as isize - p + ky as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.height as isize || lo == hi {
                        line.fill(T::default());
                        continue;
                    }
                    line[..lo].fill(T::default());
                    line[hi..].fill(T::default());
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let first = (lo * g.stride + kx) - g.padding;
                    if g.stride == 1 {
                        for (v, s) in line[lo..hi].iter_mut().zip(&src[first..first + hi - lo]) {
                            *v = T::from_f64(*s);
                        }
                    } else {
                        for (v, s) in line[lo..hi].iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                            *v = T::from_f64(*s);
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate a column matrix back into an image.
pub(crate) fn col2im<T: Elem>(cols: &[T], g: &ConvGeom, x: &mut [f64]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let k = g.kernel;
    let p = g.padding as isize;
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                let (lo, hi) = valid_span(g, kx, wo);
                if lo == hi {
                    continue;
                }
                let first = (lo * g.stride + kx) - g.padding;
                for oy in 0..ho {
                    let iy = (oy * g.stride) as isize - p + ky as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let line = &src[oy * wo + lo..oy * wo + hi];
                    if g.stride == 1 {
                        dst[first..first + hi - lo].iter_mut().zip(line).for_each(|(d, s)| *d += s.to_f64());
                    } else {
                        for (d, s) in dst[first..].iter_mut().step_by(g.stride).zip(line) {
                            *d += s.to_f64();
                        }
                    }
                }
            }
        }
    }
}

/// Reflect an index into `[0, n)` for a one-pixel border (`-1 -> 1`, `n -> n-2`).
#[inline]
/// 3x3 box mean with reflect padding on one `h x w` plane (h, w >= 2).
pub(crate) fn box3_reflect(src: &[f64], dst: &mut [f64], h: usize, w: usize) {
    let mut rows = vec![0.0; h * w];
    for (s, r) in src.chunks_exact(w).zip(rows.chunks_exact_mut(w)) {
        r[0] = s[0] + 2.0 * s[1];
        for x in 1..w - 1 {
            r[x] = s[x - 1] + s[x] + s[x + 1];
        }
        r[w - 1] = s[w - 1] + 2.0 * s[w - 2];
    }
    for y in 0..h {
        let up = &rows[reflect(y as isize - 1, h) * w..][..w];
        let mid = &rows[y * w..][..w];
        let down = &rows[reflect(y as isize + 1, h) * w..][..w];
        let out = &mut dst[y * w..][..w];
        for x in 0..w {
            out[x] = (up[x] + mid[x] + down[x]) / 9.0;
        }
    }
}

/// Adjoint of [`box3_reflect`], accumulated into `dst`.
pub(crate) fn box3_reflect_adjoint(g: &[f64], dst: &mut [f64], h: usize, w: usize) {
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        let r = &mut rows[y * w..][..w];
        // rows that read row y in the forward pass
        let mut add = |src: usize| r.iter_mut().zip(&g[src * w..][..w]).for_each(|(a, b)| *a += b);
        add(y);
        if y > 0 {
            add(y - 1);
        }
        if y + 1 < h {
            add(y + 1);
        }
        if y == 1 {
            add(0);
        }
        if y + 2 == h {
            add(h - 1);
        }
    }
    for (r, d) in rows.chunks_exact(w).zip(dst.chunks_exact_mut(w)) {
        d[0] += (r[0] + r[1]) / 9.0;
        for x in 1..w - 1 {
            d[x] += (r[x - 1] + r[x] + r[x + 1]) / 9.0;
        }
        d[w - 1] += (r[w - 1] + r[w - 2]) / 9.0;
        d[1] += r[0] / 9.0;
        d[w - 2] += r[w - 1] / 9.0;
    }
}

/// 3x3, stride 1, zero-padding 1 convolution of one image without
/// unfolding. `x` is `[ci, h, w]`, `wt` is `[co, ci, 3, 3]`; the result is
/// added into `out` (`[co, h, w]`). Requires `w >= 3`.
pub(crate) fn conv3x3_direct<T: Elem>(x: &[T], wt: &[T], out: &mut [T], ci: usize, co: usize, h: usize, w: usize) {
    let plane = h * w;
    let zero = vec![T::default(); w];
    let n = w - 2;
    for o in 0..co {
        let op = &mut out[o * plane..][..plane];
        for y in 0..h {
            let orow = &mut op[y * w..][..w];
            for c in 0..ci {
                let xp = &x[c * plane..][..plane];
                let k = &wt[(o * ci + c) * 9..][..9];
                let row = |dy: usize| -> &[T] {
                    match (y + dy).checked_sub(1) {
                        Some(yy) if yy < h => &xp[yy * w..][..w],
                        _ => &zero,
                    }
                };
                let (r0, r1, r2) = (row(0), row(1), row(2));
                // left and right edges see one zero column
                let edge = |r: &[T], kk: &[T], i: usize, j: usize| kk[i] * r[j];
                let mut left = T::default();
                let mut right = T::default();
                for (r, kk) in [(r0, &k[0..3]), (r1, &k[3..6]), (r2, &k[6..9])] {
                    left += edge(r, kk, 1, 0) + edge(r, kk, 2, 1);
                    right += edge(r, kk, 0, w - 2) + edge(r, kk, 1, w - 1);
                }
                orow[0] += left;
                orow[w - 1] += right;
                let (a0, b0, c0) = (&r0[..n], &r0[1..n + 1], &r0[2..n + 2]);
                let (a1, b1, c1) = (&r1[..n], &r1[1..n + 1], &r1[2..n + 2]);
                let (a2, b2, c2) = (&r2[..n], &r2[1..n + 1], &r2[2..n + 2]);
                let mid = &mut orow[1..n + 1];
                for i in 0..n {
                    mid[i] += k[0] * a0[i] + k[1] * b0[i] + k[2] * c0[i]
                        + (k[3] * a1[i] + k[4] * b1[i] + k[5] * c1[i])
                        + (k[6] * a2[i] + k[7] * b2[i] + k[8] * c2[i]);
                }
            }
        }
    }
}

/// Weights for the input gradient of [`conv3x3_direct`]: `[ci, co, 3, 3]`
/// with each kernel rotated by 180 degrees.
pub(crate) fn conv3x3_flip<T: Elem>(wt: &[T], ci: usize, co: usize) -> Vec<T> {
    let mut out = vec![T::default(); wt.len()];
    for o in 0..co {
        for c in 0..ci {
            for t in 0..9 {
                out[(c * co + o) * 9 + 8 - t] = wt[(o * ci + c) * 9 + t];
            }
        }
    }
    out
}

fn dot<T: Elem>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::default(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = T::default();
    for (x, y) in ra.iter().zip(rb) {
        s += *x * *y;
    }
    acc.iter().fold(s, |s, &v| s + v)
}

/// Weight gradient of [`conv3x3_direct`] for one image, added into `gw`.
pub(crate) fn conv3x3_direct_weight_grad<T: Elem>(g: &[T], x: &[T], gw: &mut [T], ci: usize, co: usize, h: usize, w: usize) {
    let plane = h * w;
    for o in 0..co {
        let gp = &g[o * plane..][..plane];
        for c in 0..ci {
            let xp = &x[c * plane..][..plane];
            let k = &mut gw[(o * ci + c) * 9..][..9];
            for ky in 0..3 {
                // output rows whose tap ky lands inside the image
                let (y0, y1) = (1usize.saturating_sub(ky), (h + 1 - ky).min(h));
                let (mut s0, mut s1, mut s2) = (T::default(), T::default(), T::default());
                for y in y0..y1 {
                    let gr = &gp[y * w..][..w];
                    let xr = &xp[(y + ky - 1) * w..][..w];
                    s0 += dot(&gr[1..], &xr[..w - 1]);
                    s1 += dot(gr, xr);
                    s2 += dot(&gr[..w - 1], &xr[1..]);
                }
                k[3 * ky] += s0;
                k[3 * ky + 1] += s1;
                k[3 * ky + 2] += s2;
            }
        }
    }
}

/// Per-plane buffers for the SSIM kernels.
pub(crate) struct SsimScratch {
    h: usize,
    w: usize,
    rows: Vec<f64>,
    stats: [Vec<f64>; 5],
}

impl SsimScratch {
    pub(crate) fn new(h: usize, w: usize) -> Self {
        SsimScratch {
            h,
            w,
            rows: vec![0.0; h * w],
            stats: std::array::from_fn(|_| vec![0.0; h * w]),
        }
    }

    /// Box means of a, b, a*a, b*b, a*b.
    fn fill(&mut self, a: &[f64], b: &[f64]) {
        let (h, w) = (self.h, self.w);
        let [ma, mb, eaa, ebb, eab] = &mut self.stats;
        box3_reflect(a, ma, h, w);
        box3_reflect(b, mb, h, w);
        for (dst, f) in [
            (eaa, (|x: f64, _: f64| x * x) as fn(f64, f64) -> f64),
            (ebb, |_, y| y * y),
            (eab, |x, y| x * y),
        ] {
            self.rows.iter_mut().zip(a.iter().zip(b)).for_each(|(r, (&x, &y))| *r = f(x, y));
            box3_reflect(&self.rows, dst, h, w);
        }
    }
}

/// SSIM map of one plane pair.
pub(crate) fn ssim_plane(a: &[f64], b: &[f64], out: &mut [f64], st: &mut SsimScratch, c1: f64, c2: f64) {
    st.fill(a, b);
    let [ma, mb, eaa, ebb, eab] = &st.stats;
    for i in 0..out.len() {
        let (mab, maa, mbb) = (ma[i] * mb[i], ma[i] * ma[i], mb[i] * mb[i]);
        let num = (2.0 * mab + c1) * (2.0 * (eab[i] - mab) + c2);
        let den = (maa + mbb + c1) * (eaa[i] - maa + ebb[i] - mbb + c2);
        out[i] = num / den;
    }
}

/// Gradient of `sum(g * ssim_plane(a, b))` with respect to `a` and `b`,
/// written into `ga` and `gb`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn ssim_plane_vjp(
    a: &[f64],
    b: &[f64],
    g: &[f64],
    ga: &mut [f64],
    gb: &mut [f64],
    st: &mut SsimScratch,
    c1: f64,
    c2: f64,
) {
    let (h, w) = (st.h, st.w);
    st.fill(a, b);
    // the statistics buffers are overwritten in place by their adjoints:
    // ma -> d/d mu_a, mb -> d/d mu_b, eaa -> d/d E[aa] (= d/d E[bb]), eab -> d/d E[ab]
    let [ma, mb, eaa, ebb, eab] = &mut st.stats;
    for i in 0..g.len() {
        let (mab, maa, mbb) = (ma[i] * mb[i], ma[i] * ma[i], mb[i] * mb[i]);
        let a1 = 2.0 * mab + c1;
        let a2 = 2.0 * (eab[i] - mab) + c2;
        let b1 = maa + mbb + c1;
        let b2 = eaa[i] - maa + ebb[i] - mbb + c2;
        let den = b1 * b2;
        let dnum = g[i] / den;
        let dden = -g[i] * a1 * a2 / (den * den);
        let (da1, da2, db1, db2) = (dnum * a2, dnum * a1, dden * b2, dden * b1);
        let (mai, mbi) = (ma[i], mb[i]);
        ma[i] = 2.0 * (mbi * (da1 - da2) + mai * (db1 - db2));
        mb[i] = 2.0 * (mai * (da1 - da2) + mbi * (db1 - db2));
        eaa[i] = db2;
        eab[i] = 2.0 * da2;
    }
    ga.iter_mut().for_each(|v| *v = 0.0);
    gb.iter_mut().for_each(|v| *v = 0.0);
    box3_reflect_adjoint(ma, ga, h, w);
    box3_reflect_adjoint(mb, gb, h, w);
    let rows = &mut st.rows;
    rows.iter_mut().for_each(|v| *v = 0.0);
    box3_reflect_adjoint(eaa, rows, h, w);
    for i in 0..g.len() {
        ga[i] += 2.0 * a[i] * rows[i];
        gb[i] += 2.0 * b[i] * rows[i];
    }
    rows.iter_mut().for_each(|v| *v = 0.0);
    box3_reflect_adjoint(eab, rows, h, w);
    for i in 0..g.len() {
        ga[i] += b[i] * rows[i];
        gb[i] += a[i] * rows[i];
    }
}

pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    r as usize
}

/// Per-axis interpolation table for bilinear resizing with half-pixel
/// centres: `(lower index, upper index, upper weight)`.
pub(crate) fn resize_table(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let w = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, w)
        })
        .collect()
}

/// Bilinear lookup setup for a single coordinate with border clamping.
/// Returns `(i0, i1, frac, inside)` where `inside` tells whether the
/// coordinate was within `[0, n-1]` (and therefore has a derivative).
#[inline]
pub(crate) fn sample_axis(x: f64, n: usize) -> (usize, usize, f64, bool) {
    let hi = (n - 1) as f64;
    let inside = (0.0..=hi).contains(&x);
    let xc = x.clamp(0.0, hi);
    if n == 1 {
        return (0, 0, 0.0, inside);
    }
    let i0 = (xc.floor() as usize).min(n - 2);
    (i0, i0 + 1, xc - i0 as f64, inside)
}

/// Rodrigues coefficients `a = sin(t)/t` and `b = (1 - cos t)/t^2` as
/// functions of `s = t^2`, with their derivatives with respect to `s`.
/// A Taylor expansion replaces the closed form near zero where the closed
/// form cancels catastrophically.
pub(crate) fn rodrigues_coeffs(s: f64) -> (f64, f64, f64, f64) {
    if s < 1e-2 {
        let a = 1.0 - s / 6.0 + s * s / 120.0 - s * s * s / 5040.0;
        let b = 0.5 - s / 24.0 + s * s / 720.0 - s * s * s / 40320.0;
        let da = -1.0 / 6.0 + s / 60.0 - s * s / 1680.0;
        let db = -1.0 / 24.0 + s / 360.0 - s * s / 13440.0;
        (a, b, da, db)
    } else {
        let t = s.sqrt();
        let (sn, cs) = t.sin_cos();
        let a = sn / t;
        let b = (1.0 - cs) / s;
        let da = (t * cs - sn) / (2.0 * t * s);
        let db = (0.5 * t * sn - (1.0 - cs)) / (s * s);
        (a, b, da, db)
    }
}

/// Rotation matrix (row-major 3x3) from an axis-angle vector.
pub(crate) fn rotation_from_axis_angle(w: [f64; 3]) -> [f64; 9] {
    let s = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
    let (a, b, _, _) = rodrigues_coeffs(s);
    let k = skew(w);
    let k2 = mat3_mul(&k, &k);
    let mut r = [0.0; 9];
    for i in 0..9 {
        r[i] = a * k[i] + b * k2[i];
    }
    r[0] += 1.0;
    r[4] += 1.0;
    r[8] += 1.0;
    r
}

/// Gradient of `sum(G .* R(w))` with respect to the axis-angle `w`.
pub(crate) fn rotation_vjp(w: [f64; 3], g: &[f64]) -> [f64; 3] {
    let s = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
    let (a, b, da, db) = rodrigues_coeffs(s);
    let k = skew(w);
    let k2 = mat3_mul(&k, &k);
    let dot = |m: &[f64; 9]| m.iter().zip(g).map(|(x, y)| x * y).sum::<f64>();
    let gk = dot(&k);
    let gk2 = dot(&k2);
    let mut out = [0.0; 3];
    for (axis, o) in out.iter_mut().enumerate() {
        let mut e = [0.0; 3];
        e[axis] = 1.0;
        let ek = skew(e);
        let ekk = mat3_mul(&ek, &k);
        let kek = mat3_mul(&k, &ek);
        let mut dk2 = [0.0; 9];
        for i in 0..9 {
            dk2[i] = ekk[i] + kek[i];
        }
        *o = 2.0 * w[axis] * (da * gk + db * gk2) + a * dot(&ek) + b * dot(&dk2);
    }
    out
}

pub(crate) fn skew(w: [f64; 3]) -> [f64; 9] {
    [0.0, -w[2], w[1], w[2], 0.0, -w[0], -w[1], w[0], 0.0]
}

pub(crate) fn mat3_mul(a: &[f64; 9], b: &[f64; 9]) -> [f64; 9] {
    let mut c = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            c[i * 3 + j] = (0..3).map(|k| a[i * 3 + k] * b[k * 3 + j]).sum();
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv3x3(x: &[f64], wt: &[f64], ci: usize, co: usize, h: usize, w: usize) -> Vec<f64> {
        let mut out = vec![0.0; co * h * w];
        for o in 0..co {
            for y in 0..h as isize {
                for xx in 0..w as isize {
                    let mut s = 0.0;
                    for c in 0..ci {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let (yy, xs) = (y + ky - 1, xx + kx - 1);
                                if yy < 0 || xs < 0 || yy >= h as isize || xs >= w as isize {
                                    continue;
                                }
                                s += wt[(o * ci + c) * 9 + (ky * 3 + kx) as usize]
                                    * x[(c * h + yy as usize) * w + xs as usize];
                            }
                        }
                    }
                    out[(o * h + y as usize) * w + xx as usize] = s;
                }
            }
        }
        out
    }

    #[test]
    fn direct_conv_matches_naive_loops() {
        let (ci, co, h, w) = (3, 2, 5, 7);
        let x: Vec<f64> = (0..ci * h * w).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();
        let wt: Vec<f64> = (0..co * ci * 9).map(|i| ((i * 13 % 7) as f64 - 3.0) / 5.0).collect();
        let g: Vec<f64> = (0..co * h * w).map(|i| ((i * 29 % 13) as f64 - 6.0) / 9.0).collect();
        let mut out = vec![0.0; co * h * w];
        conv3x3_direct(&x, &wt, &mut out, ci, co, h, w);
        let want = naive_conv3x3(&x, &wt, ci, co, h, w);
        for (a, b) in out.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        // <g, conv(x)> is linear in x and in wt; compare both adjoints against unit probes
        let mut gx = vec![0.0; ci * h * w];
        conv3x3_direct(&g, &conv3x3_flip(&wt, ci, co), &mut gx, co, ci, h, w);
        let mut gw = vec![0.0; wt.len()];
        conv3x3_direct_weight_grad(&g, &x, &mut gw, ci, co, h, w);
        let inner = |x: &[f64], wt: &[f64]| -> f64 {
            naive_conv3x3(x, wt, ci, co, h, w).iter().zip(&g).map(|(a, b)| a * b).sum()
        };
        for i in 0..x.len() {
            let mut e = vec![0.0; x.len()];
            e[i] = 1.0;
            assert!((inner(&e, &wt) - gx[i]).abs() < 1e-12);
        }
        for i in 0..wt.len() {
            let mut e = vec![0.0; wt.len()];
            e[i] = 1.0;
            assert!((inner(&x, &e) - gw[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn rodrigues_branches_agree_at_switch() {
        let lo = rodrigues_coeffs(1e-2 - 1e-12);
        let hi = rodrigues_coeffs(1e-2 + 1e-12);
        assert!((lo.0 - hi.0).abs() < 1e-12);
        assert!((lo.1 - hi.1).abs() < 1e-12);
        assert!((lo.2 - hi.2).abs() < 1e-9);
        assert!((lo.3 - hi.3).abs() < 1e-9);
    }

    #[test]
    fn im2col_matches_naive_gather() {
        for &(h, w, k, stride, padding) in &[(5, 7, 3, 1, 1), (6, 5, 3, 2, 1), (4, 4, 1, 1, 0), (7, 6, 3, 2, 0), (3, 3, 5, 1, 2)] {
            let g = ConvGeom { channels: 2, height: h, width: w, kernel: k, stride, padding };
            let x: Vec<f64> = (0..2 * h * w).map(|i| i as f64 + 1.0).collect();
            let mut cols: Vec<f64> = vec![f64::NAN; g.col_rows() * g.col_cols()];
            im2col(&x, &g, &mut cols);
            let (ho, wo) = (g.out_height(), g.out_width());
            for c in 0..2 {
                for ky in 0..k {
                    for kx in 0..k {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                let expect = if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    0.0
                                } else {
                                    x[c * h * w + iy as usize * w + ix as usize]
                                };
                                let row = (c * k + ky) * k + kx;
                                assert_eq!(cols[row * ho * wo + oy * wo + ox], expect);
                            }
                        }
                    }
                }
            }
            // adjoint identity <im2col(x), y> = <x, col2im(y)>
            let y: Vec<f64> = (0..cols.len()).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
            let mut back = vec![0.0; x.len()];
            col2im(&y, &g, &mut back);
            let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9);
        }
    }

    #[test]
    fn reflect_border() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(2, 5), 2);
    }
}
