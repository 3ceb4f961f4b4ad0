//! Numeric kernels behind the graph ops: im2col convolution, kernel-equals-stride
//! transposed convolution and separable linear resampling.
//!
//! Every kernel is single-threaded with a fixed summation order, so repeated
//! calls on identical inputs are bit-identical.

use std::cell::RefCell;

/// Row-major matrix view with explicit strides.
#[derive(Clone, Copy)]
pub struct MatRef<'a> {
    pub data: &'a [f32],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatRef<'a> {
    pub fn rows(data: &'a [f32], cols: usize) -> Self {
        Self { data, rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major `rows x cols` buffer.
    pub fn transposed(data: &'a [f32], cols: usize) -> Self {
        Self { data, rs: 1, cs: cols }
    }

    fn max_index(&self, m: usize, n: usize) -> usize {
        if m == 0 || n == 0 {
            0
        } else {
            (m - 1) * self.rs + (n - 1) * self.cs
        }
    }
}

/// `c (m x n) = a (m x k) * b (k x n) + beta * c`, `c` row-major and contiguous.
pub fn gemm(m: usize, k: usize, n: usize, a: MatRef<'_>, b: MatRef<'_>, beta: f32, c: &mut [f32]) {
    gemm_strided(m, k, n, a, b, beta, c, n)
}

/// As [`gemm`] with output row stride `ldc >= n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm_strided(m: usize, k: usize, n: usize, a: MatRef<'_>, b: MatRef<'_>, beta: f32, c: &mut [f32], ldc: usize) {
    assert!(ldc >= n, "gemm output stride smaller than width");
    assert!(m == 0 || c.len() >= (m - 1) * ldc + n, "gemm output buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for r in 0..m {
            c[r * ldc..r * ldc + n].iter_mut().for_each(|v| *v *= beta);
        }
        return;
    }
    assert!(a.max_index(m, k) < a.data.len(), "gemm lhs out of bounds");
    assert!(b.max_index(k, n) < b.data.len(), "gemm rhs out of bounds");
    // SAFETY: bounds of all three operands were checked against their strides above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

/// `c (m x n) += a (m x k) * b (n x k)^T` where the rows of both `a` and `b`
/// are contiguous along `k` with strides `lda`, `ldb`. Used for weight gradients,
/// whose long reduction axis and small output make the packed sgemm path slow.
#[allow(clippy::too_many_arguments)]
pub fn gemm_nt(m: usize, n: usize, k: usize, a: &[f32], lda: usize, b: &[f32], ldb: usize, c: &mut [f32]) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(a.len() >= (m - 1) * lda + k, "gemm_nt lhs out of bounds");
    assert!(b.len() >= (n - 1) * ldb + k, "gemm_nt rhs out of bounds");
    assert!(c.len() >= m * n, "gemm_nt output buffer too small");
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
        // SAFETY: the feature was detected at runtime.
        unsafe { gemm_nt_avx2(m, n, k, a, lda, b, ldb, c) };
        return;
    }
    gemm_nt_body(m, n, k, a, lda, b, ldb, c)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_nt_avx2(m: usize, n: usize, k: usize, a: &[f32], lda: usize, b: &[f32], ldb: usize, c: &mut [f32]) {
    use std::arch::x86_64::*;
    for k0 in (0..k).step_by(NT_KC) {
        let kc = NT_KC.min(k - k0);
        let main = kc - kc % 8;
        for i in (0..m).step_by(4) {
            let rows = (m - i).min(4);
            let ap: [*const f32; 4] = std::array::from_fn(|r| a.as_ptr().add((i + r.min(rows - 1)) * lda + k0));
            for j in (0..n).step_by(2) {
                let cols = (n - j).min(2);
                let bp: [*const f32; 2] = std::array::from_fn(|q| b.as_ptr().add((j + q.min(cols - 1)) * ldb + k0));
                let mut acc = [[_mm256_setzero_ps(); 2]; 4];
                let mut t = 0;
                while t < main {
                    let b0 = _mm256_loadu_ps(bp[0].add(t));
                    let b1 = _mm256_loadu_ps(bp[1].add(t));
                    for r in 0..4 {
                        let av = _mm256_loadu_ps(ap[r].add(t));
                        acc[r][0] = _mm256_fmadd_ps(av, b0, acc[r][0]);
                        acc[r][1] = _mm256_fmadd_ps(av, b1, acc[r][1]);
                    }
                    t += 8;
                }
                for r in 0..rows {
                    for q in 0..cols {
                        let mut lanes = [0.0f32; 8];
                        _mm256_storeu_ps(lanes.as_mut_ptr(), acc[r][q]);
                        let mut s = lanes.iter().sum::<f32>();
                        for t in main..kc {
                            s += *ap[r].add(t) * *bp[q].add(t);
                        }
                        c[(i + r) * n + j + q] += s;
                    }
                }
            }
        }
    }
}

const NT_KC: usize = 2048;

#[allow(clippy::too_many_arguments)]
fn gemm_nt_body(m: usize, n: usize, k: usize, a: &[f32], lda: usize, b: &[f32], ldb: usize, c: &mut [f32]) {
    for i in 0..m {
        let ai = &a[i * lda..i * lda + k];
        for j in 0..n {
            let bj = &b[j * ldb..j * ldb + k];
            c[i * n + j] += ai.iter().zip(bj).map(|(x, y)| x * y).sum::<f32>();
        }
    }
}

thread_local! {
    static SCRATCH: RefCell<Vec<f32>> = const { RefCell::new(Vec::new()) };
}

fn with_scratch<R>(len: usize, f: impl FnOnce(&mut [f32]) -> R) -> R {
    SCRATCH.with(|cell| {
        let mut buf = cell.borrow_mut();
        if buf.len() < len {
            buf.resize(len, 0.0);
        }
        f(&mut buf[..len])
    })
}

/// Kernel size, stride and zero padding per spatial axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    pub fn out_dims(&self, input: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.pad[a];
            if padded < self.kernel[a] || self.stride[a] == 0 {
                return None;
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Some(out)
    }

    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.pad == [0, 0, 0]
    }
}

/// Range of output positions `o` along one axis whose source `o*s - p + k` is in `[0, n)`.
fn valid_range(out_len: usize, n: usize, s: usize, p: usize, k: usize) -> (usize, usize) {
    // o*s + k >= p  and  o*s + k < p + n
    let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
    let hi = if p + n > k { ((p + n - k - 1) / s + 1).min(out_len) } else { 0 };
    (lo.min(hi), hi)
}

/// Fills `col` (`K x tile`) for output planes `zs.0..zs.1`.
fn im2col(x: &[f32], cin: usize, dims: [usize; 3], g: &ConvGeom, out: [usize; 3], zs: (usize, usize), col: &mut [f32]) {
    let [d, h, w] = dims;
    let [od, oh, ow] = out;
    let nout = (zs.1 - zs.0) * oh * ow;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let mut row = 0;
    for c in 0..cin {
        let xc = &x[c * d * h * w..(c + 1) * d * h * w];
        for a in 0..kd {
            let (zlo, zhi) = valid_range(od, d, sd, pd, a);
            let (zlo, zhi) = (zlo.max(zs.0), zhi.min(zs.1).max(zlo.max(zs.0)));
            for b in 0..kh {
                let (ylo, yhi) = valid_range(oh, h, sh, ph, b);
                for e in 0..kw {
                    let (xlo, xhi) = valid_range(ow, w, sw, pw, e);
                    let dst = &mut col[row * nout..(row + 1) * nout];
                    row += 1;
                    dst.fill(0.0);
                    for z in zlo..zhi {
                        let iz = z * sd + a - pd;
                        for y in ylo..yhi {
                            let iy = y * sh + b - ph;
                            let src = &xc[(iz * h + iy) * w..(iz * h + iy + 1) * w];
                            let base = ((z - zs.0) * oh + y) * ow;
                            if sw == 1 {
                                let ix0 = xlo + e - pw;
                                dst[base + xlo..base + xhi].copy_from_slice(&src[ix0..ix0 + (xhi - xlo)]);
                            } else {
                                for xo in xlo..xhi {
                                    dst[base + xo] = src[xo * sw + e - pw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im(
    col: &[f32],
    cin: usize,
    dims: [usize; 3],
    g: &ConvGeom,
    out: [usize; 3],
    zs: (usize, usize),
    dx: &mut [f32],
) {
    let [d, h, w] = dims;
    let [od, oh, ow] = out;
    let nout = (zs.1 - zs.0) * oh * ow;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let mut row = 0;
    for c in 0..cin {
        let xc = &mut dx[c * d * h * w..(c + 1) * d * h * w];
        for a in 0..kd {
            let (zlo, zhi) = valid_range(od, d, sd, pd, a);
            let (zlo, zhi) = (zlo.max(zs.0), zhi.min(zs.1).max(zlo.max(zs.0)));
            for b in 0..kh {
                let (ylo, yhi) = valid_range(oh, h, sh, ph, b);
                for e in 0..kw {
                    let (xlo, xhi) = valid_range(ow, w, sw, pw, e);
                    let src = &col[row * nout..(row + 1) * nout];
                    row += 1;
                    for z in zlo..zhi {
                        let iz = z * sd + a - pd;
                        for y in ylo..yhi {
                            let iy = y * sh + b - ph;
                            let dst = &mut xc[(iz * h + iy) * w..(iz * h + iy + 1) * w];
                            let base = ((z - zs.0) * oh + y) * ow;
                            if sw == 1 {
                                let ix0 = xlo + e - pw;
                                let n = xhi - xlo;
                                for (d, s) in dst[ix0..ix0 + n].iter_mut().zip(&src[base + xlo..base + xhi]) {
                                    *d += *s;
                                }
                            } else {
                                for xo in xlo..xhi {
                                    dst[xo * sw + e - pw] += src[base + xo];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scratch budget (floats) for one im2col tile; sized to stay cache resident.
const TILE_FLOATS: usize = 1 << 18;

/// Output z-plane tiles whose im2col buffers fit [`TILE_FLOATS`].
fn z_tiles(k: usize, out: [usize; 3]) -> impl Iterator<Item = (usize, usize)> {
    let plane = out[1] * out[2];
    let step = (TILE_FLOATS / (k * plane).max(1)).max(1);
    (0..out[0]).step_by(step).map(move |z0| (z0, (z0 + step).min(out[0])))
}

/// Forward convolution. `x`: `[cin, D, H, W]`, `w`: `[cout, cin, kd, kh, kw]`.
pub fn conv3d_forward(
    x: &[f32],
    cin: usize,
    dims: [usize; 3],
    w: &[f32],
    bias: Option<&[f32]>,
    cout: usize,
    g: &ConvGeom,
) -> ([usize; 3], Vec<f32>) {
    let out = g.out_dims(dims).expect("convolution does not fit input");
    let nout: usize = out.iter().product();
    let plane = out[1] * out[2];
    let k = cin * g.taps();
    let mut y = vec![0.0f32; cout * nout];
    if let Some(b) = bias {
        for (co, chunk) in y.chunks_mut(nout).enumerate() {
            chunk.fill(b[co]);
        }
    }
    let beta = if bias.is_some() { 1.0 } else { 0.0 };
    if g.is_pointwise() {
        gemm(cout, k, nout, MatRef::rows(w, k), MatRef::rows(x, nout), beta, &mut y);
        return (out, y);
    }
    for zs in z_tiles(k, out) {
        let tile = (zs.1 - zs.0) * plane;
        with_scratch(k * tile, |col| {
            im2col(x, cin, dims, g, out, zs, col);
            gemm_strided(
                cout,
                k,
                tile,
                MatRef::rows(w, k),
                MatRef::rows(col, tile),
                beta,
                &mut y[zs.0 * plane..],
                nout,
            );
        });
    }
    (out, y)
}

/// Backward convolution. Accumulates into `dw`, `db` and (when given) `dx`.
#[allow(clippy::too_many_arguments)]
pub fn conv3d_backward(
    x: &[f32],
    cin: usize,
    dims: [usize; 3],
    w: &[f32],
    cout: usize,
    g: &ConvGeom,
    dy: &[f32],
    mut dw: Option<&mut [f32]>,
    db: Option<&mut [f32]>,
    mut dx: Option<&mut [f32]>,
) {
    let out = g.out_dims(dims).expect("convolution does not fit input");
    let nout: usize = out.iter().product();
    let plane = out[1] * out[2];
    let k = cin * g.taps();
    if let Some(db) = db {
        for (co, chunk) in dy.chunks(nout).enumerate() {
            db[co] += chunk.iter().map(|&v| v as f64).sum::<f64>() as f32;
        }
    }
    if g.is_pointwise() {
        if let Some(dw) = dw {
            gemm_nt(cout, k, nout, dy, nout, x, nout, dw);
        }
        if let Some(dx) = dx {
            gemm(k, cout, nout, MatRef::transposed(w, k), MatRef::rows(dy, nout), 1.0, dx);
        }
        return;
    }
    for zs in z_tiles(k, out) {
        let tile = (zs.1 - zs.0) * plane;
        let dy_tile = MatRef { data: &dy[zs.0 * plane..], rs: nout, cs: 1 };
        with_scratch(k * tile, |col| {
            if let Some(dw) = dw.as_deref_mut() {
                im2col(x, cin, dims, g, out, zs, col);
                gemm_nt(cout, k, tile, &dy[zs.0 * plane..], nout, col, tile, dw);
            }
            if let Some(dx) = dx.as_deref_mut() {
                gemm(k, cout, tile, MatRef::transposed(w, k), dy_tile, 0.0, col);
                col2im(col, cin, dims, g, out, zs, dx);
            }
        });
    }
}

/// Transposed convolution whose kernel equals its stride (non-overlapping
/// upsampling). `w`: `[cin, cout, fd, fh, fw]`.
pub fn conv_transpose_forward(
    x: &[f32],
    cin: usize,
    dims: [usize; 3],
    w: &[f32],
    bias: Option<&[f32]>,
    cout: usize,
    factor: [usize; 3],
) -> ([usize; 3], Vec<f32>) {
    let n: usize = dims.iter().product();
    let taps: usize = factor.iter().product();
    let rows = cout * taps;
    let out = [dims[0] * factor[0], dims[1] * factor[1], dims[2] * factor[2]];
    let nout = n * taps;
    let mut y = vec![0.0f32; cout * nout];
    with_scratch(rows * n, |tmp| {
        gemm(rows, cin, n, MatRef::transposed(w, rows), MatRef::rows(x, n), 0.0, tmp);
        scatter_taps(tmp, cout, dims, factor, &mut y, |dst, src| *dst = src);
    });
    if let Some(b) = bias {
        for (co, chunk) in y.chunks_mut(nout).enumerate() {
            chunk.iter_mut().for_each(|v| *v += b[co]);
        }
    }
    (out, y)
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose_backward(
    x: &[f32],
    cin: usize,
    dims: [usize; 3],
    w: &[f32],
    cout: usize,
    factor: [usize; 3],
    dy: &[f32],
    dw: Option<&mut [f32]>,
    db: Option<&mut [f32]>,
    dx: Option<&mut [f32]>,
) {
    let n: usize = dims.iter().product();
    let taps: usize = factor.iter().product();
    let rows = cout * taps;
    let nout = n * taps;
    if let Some(db) = db {
        for (co, chunk) in dy.chunks(nout).enumerate() {
            db[co] += chunk.iter().map(|&v| v as f64).sum::<f64>() as f32;
        }
    }
    if dw.is_none() && dx.is_none() {
        return;
    }
    with_scratch(rows * n, |tmp| {
        gather_taps(dy, cout, dims, factor, tmp);
        if let Some(dw) = dw {
            gemm_nt(cin, rows, n, x, n, tmp, n, dw);
        }
        if let Some(dx) = dx {
            gemm(cin, rows, n, MatRef::rows(w, rows), MatRef::rows(tmp, n), 1.0, dx);
        }
    });
}

/// Iterates `(tap_row_index, output_index)` pairs for the tap layout shared by the
/// transposed-convolution scatter and gather.
fn for_each_tap(cout: usize, dims: [usize; 3], factor: [usize; 3], mut f: impl FnMut(usize, usize)) {
    let [d, h, w] = dims;
    let [fd, fh, fw] = factor;
    let (oh, ow) = (h * fh, w * fw);
    let n = d * h * w;
    let taps = fd * fh * fw;
    for co in 0..cout {
        let obase = co * n * taps;
        for a in 0..fd {
            for b in 0..fh {
                for e in 0..fw {
                    let row = ((co * fd + a) * fh + b) * fw + e;
                    for z in 0..d {
                        for y in 0..h {
                            let orow = obase + ((z * fd + a) * oh + y * fh + b) * ow + e;
                            let irow = (z * h + y) * w;
                            for xi in 0..w {
                                f(row * n + irow + xi, orow + xi * fw);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn scatter_taps(
    tmp: &[f32],
    cout: usize,
    dims: [usize; 3],
    factor: [usize; 3],
    y: &mut [f32],
    op: impl Fn(&mut f32, f32),
) {
    for_each_tap(cout, dims, factor, |src, dst| op(&mut y[dst], tmp[src]));
}

fn gather_taps(dy: &[f32], cout: usize, dims: [usize; 3], factor: [usize; 3], tmp: &mut [f32]) {
    for_each_tap(cout, dims, factor, |dst, src| tmp[dst] = dy[src]);
}

/// Linear-interpolation stencil for upsampling one axis by an integer factor
/// (half-pixel centres, edge clamped).
fn stencil(n: usize, factor: usize) -> Vec<(usize, usize, f32)> {
    (0..n * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            let t = if i1 == i0 { 0.0 } else { (src - i0 as f64) as f32 };
            (i0, i1, t)
        })
        .collect()
}

/// Upsamples axis `axis` (0..3 over `[D, H, W]`) of a `[C, D, H, W]` buffer.
fn resample_axis(x: &[f32], c: usize, dims: [usize; 3], axis: usize, factor: usize) -> Vec<f32> {
    let n = dims[axis];
    let outer = c * dims[..axis].iter().product::<usize>();
    let inner: usize = dims[axis + 1..].iter().product();
    let st = stencil(n, factor);
    let mut y = vec![0.0f32; outer * n * factor * inner];
    for o in 0..outer {
        let xs = &x[o * n * inner..(o + 1) * n * inner];
        let ys = &mut y[o * n * factor * inner..(o + 1) * n * factor * inner];
        for (j, &(i0, i1, t)) in st.iter().enumerate() {
            let dst = &mut ys[j * inner..(j + 1) * inner];
            let a = &xs[i0 * inner..(i0 + 1) * inner];
            let b = &xs[i1 * inner..(i1 + 1) * inner];
            for k in 0..inner {
                dst[k] = (1.0 - t) * a[k] + t * b[k];
            }
        }
    }
    y
}

fn resample_axis_backward(dy: &[f32], c: usize, dims: [usize; 3], axis: usize, factor: usize) -> Vec<f32> {
    let n = dims[axis];
    let outer = c * dims[..axis].iter().product::<usize>();
    let inner: usize = dims[axis + 1..].iter().product();
    let st = stencil(n, factor);
    let mut dx = vec![0.0f32; outer * n * inner];
    for o in 0..outer {
        let gs = &dy[o * n * factor * inner..(o + 1) * n * factor * inner];
        let xs = &mut dx[o * n * inner..(o + 1) * n * inner];
        for (j, &(i0, i1, t)) in st.iter().enumerate() {
            let g = &gs[j * inner..(j + 1) * inner];
            for k in 0..inner {
                xs[i0 * inner + k] += (1.0 - t) * g[k];
                xs[i1 * inner + k] += t * g[k];
            }
        }
    }
    dx
}

pub fn upsample_forward(x: &[f32], c: usize, dims: [usize; 3], factor: [usize; 3]) -> ([usize; 3], Vec<f32>) {
    let mut cur = x.to_vec();
    let mut cur_dims = dims;
    for axis in 0..3 {
        if factor[axis] > 1 {
            cur = resample_axis(&cur, c, cur_dims, axis, factor[axis]);
            cur_dims[axis] *= factor[axis];
        }
    }
    (cur_dims, cur)
}

pub fn upsample_backward(dy: &[f32], c: usize, dims: [usize; 3], factor: [usize; 3]) -> Vec<f32> {
    let mut dims_after = [dims[0], dims[1], dims[2]];
    let mut per_axis = [[0usize; 3]; 3];
    for axis in 0..3 {
        per_axis[axis] = dims_after;
        if factor[axis] > 1 {
            dims_after[axis] *= factor[axis];
        }
    }
    let mut cur = dy.to_vec();
    for axis in (0..3).rev() {
        if factor[axis] > 1 {
            cur = resample_axis_backward(&cur, c, per_axis[axis], axis, factor[axis]);
        }
    }
    cur
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct-summation reference convolution.
    fn conv_reference(x: &[f32], cin: usize, dims: [usize; 3], w: &[f32], cout: usize, g: &ConvGeom) -> Vec<f32> {
        let out = g.out_dims(dims).unwrap();
        let mut y = vec![0.0f32; cout * out.iter().product::<usize>()];
        for co in 0..cout {
            for z in 0..out[0] {
                for yy in 0..out[1] {
                    for xx in 0..out[2] {
                        let mut acc = 0.0f64;
                        for ci in 0..cin {
                            for a in 0..g.kernel[0] {
                                for b in 0..g.kernel[1] {
                                    for e in 0..g.kernel[2] {
                                        let iz = (z * g.stride[0] + a) as isize - g.pad[0] as isize;
                                        let iy = (yy * g.stride[1] + b) as isize - g.pad[1] as isize;
                                        let ix = (xx * g.stride[2] + e) as isize - g.pad[2] as isize;
                                        if iz < 0 || iy < 0 || ix < 0 {
                                            continue;
                                        }
                                        let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                        if iz >= dims[0] || iy >= dims[1] || ix >= dims[2] {
                                            continue;
                                        }
                                        let xv = x[((ci * dims[0] + iz) * dims[1] + iy) * dims[2] + ix];
                                        let wv = w[((((co * cin + ci) * g.kernel[0] + a) * g.kernel[1]) + b)
                                            * g.kernel[2]
                                            + e];
                                        acc += (xv * wv) as f64;
                                    }
                                }
                            }
                        }
                        y[((co * out[0] + z) * out[1] + yy) * out[2] + xx] = acc as f32;
                    }
                }
            }
        }
        y
    }

    fn ramp(n: usize, scale: f32) -> Vec<f32> {
        (0..n).map(|i| ((i * 37 % 101) as f32 / 101.0 - 0.5) * scale).collect()
    }

    #[test]
    fn conv_matches_direct_summation() {
        for g in [
            ConvGeom { kernel: [3, 3, 3], stride: [1, 1, 1], pad: [1, 1, 1] },
            ConvGeom { kernel: [3, 3, 3], stride: [2, 2, 2], pad: [1, 1, 1] },
            ConvGeom { kernel: [1, 3, 3], stride: [1, 2, 2], pad: [0, 1, 1] },
            ConvGeom { kernel: [1, 1, 1], stride: [1, 1, 1], pad: [0, 0, 0] },
        ] {
            let dims = [4, 6, 5];
            let (cin, cout) = (3, 2);
            let x = ramp(cin * 120, 2.0);
            let w = ramp(cout * cin * g.taps(), 1.0);
            let (_, y) = conv3d_forward(&x, cin, dims, &w, None, cout, &g);
            let r = conv_reference(&x, cin, dims, &w, cout, &g);
            for (a, b) in y.iter().zip(&r) {
                assert!((a - b).abs() < 1e-5, "{g:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // <conv(x), dy> == <x, conv^T(dy)> and likewise for the weights.
        let g = ConvGeom { kernel: [3, 3, 3], stride: [2, 2, 2], pad: [1, 1, 1] };
        let dims = [5, 4, 6];
        let (cin, cout) = (2, 3);
        let x = ramp(cin * 120, 1.5);
        let w = ramp(cout * cin * 27, 0.7);
        let (out, y) = conv3d_forward(&x, cin, dims, &w, None, cout, &g);
        let dy = ramp(cout * out.iter().product::<usize>(), 1.3);
        let mut dx = vec![0.0; x.len()];
        let mut dw = vec![0.0; w.len()];
        conv3d_backward(&x, cin, dims, &w, cout, &g, &dy, Some(&mut dw), None, Some(&mut dx));
        let lhs: f64 = y.iter().zip(&dy).map(|(a, b)| (a * b) as f64).sum();
        let rhs_x: f64 = x.iter().zip(&dx).map(|(a, b)| (a * b) as f64).sum();
        let rhs_w: f64 = w.iter().zip(&dw).map(|(a, b)| (a * b) as f64).sum();
        assert!((lhs - rhs_x).abs() < 1e-3 * lhs.abs().max(1.0));
        assert!((lhs - rhs_w).abs() < 1e-3 * lhs.abs().max(1.0));
    }

    #[test]
    fn gemm_nt_matches_naive_product() {
        for &(m, n, k) in &[(1, 1, 1), (3, 5, 7), (5, 3, 19), (8, 2, 2100), (6, 9, 4133)] {
            let (lda, ldb) = (k + 2, k + 3);
            let a = ramp(m * lda, 0.9);
            let b = ramp(n * ldb, 1.1);
            let mut c = vec![0.5f32; m * n];
            gemm_nt(m, n, k, &a, lda, &b, ldb, &mut c);
            for i in 0..m {
                for j in 0..n {
                    let want: f64 = 0.5 + (0..k).map(|t| a[i * lda + t] as f64 * b[j * ldb + t] as f64).sum::<f64>();
                    assert!((c[i * n + j] as f64 - want).abs() < 1e-4 * want.abs().max(1.0), "{m}x{n}x{k}");
                }
            }
        }
    }

    #[test]
    fn transpose_conv_backward_is_adjoint() {
        let dims = [2, 3, 2];
        let (cin, cout) = (3, 2);
        let factor = [2, 2, 2];
        let x = ramp(cin * 12, 1.0);
        let w = ramp(cin * cout * 8, 0.5);
        let (_, y) = conv_transpose_forward(&x, cin, dims, &w, None, cout, factor);
        let dy = ramp(y.len(), 2.0);
        let mut dx = vec![0.0; x.len()];
        let mut dw = vec![0.0; w.len()];
        conv_transpose_backward(&x, cin, dims, &w, cout, factor, &dy, Some(&mut dw), None, Some(&mut dx));
        let lhs: f64 = y.iter().zip(&dy).map(|(a, b)| (a * b) as f64).sum();
        let rx: f64 = x.iter().zip(&dx).map(|(a, b)| (a * b) as f64).sum();
        let rw: f64 = w.iter().zip(&dw).map(|(a, b)| (a * b) as f64).sum();
        assert!((lhs - rx).abs() < 1e-4);
        assert!((lhs - rw).abs() < 1e-4);
    }

    #[test]
    fn transpose_conv_places_each_tap() {
        // One input voxel, one channel: output block equals the kernel.
        let w: Vec<f32> = (0..8).map(|v| v as f32).collect();
        let (out, y) = conv_transpose_forward(&[1.0], 1, [1, 1, 1], &w, None, 1, [2, 2, 2]);
        assert_eq!(out, [2, 2, 2]);
        assert_eq!(y, w);
    }

    #[test]
    fn upsample_preserves_constants_and_is_adjoint() {
        let (dims, y) = upsample_forward(&[2.5; 8], 1, [2, 2, 2], [4, 4, 4]);
        assert_eq!(dims, [8, 8, 8]);
        assert!(y.iter().all(|&v| (v - 2.5).abs() < 1e-6));
        let x = ramp(2 * 3 * 2 * 4, 1.0);
        let (_, y) = upsample_forward(&x, 2, [3, 2, 4], [2, 1, 3]);
        let dy = ramp(y.len(), 0.8);
        let dx = upsample_backward(&dy, 2, [3, 2, 4], [2, 1, 3]);
        let lhs: f64 = y.iter().zip(&dy).map(|(a, b)| (a * b) as f64).sum();
        let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| (a * b) as f64).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }
}
