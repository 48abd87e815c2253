//! Raw slice kernels behind the differentiable ops. Everything is row-major
//! and single-threaded with a fixed reduction order, so results are
//! bit-reproducible.

/// Below this many multiply-adds the packing done by `dgemm` costs more
/// than it saves.
const GEMM_THRESHOLD: usize = 1 << 15;

/// `c[m,n] = a · b` where `a` and `b` are described by (row, column)
/// strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], rsa: usize, csa: usize, b: &[f64], rsb: usize, csb: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return out;
    }
    if m * k * n < GEMM_THRESHOLD {
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * rsa + p * csa];
                if csb == 1 {
                    let brow = &b[p * rsb..p * rsb + n];
                    orow.iter_mut().zip(brow).for_each(|(o, b)| *o += av * b);
                } else {
                    for (j, o) in orow.iter_mut().enumerate() {
                        *o += av * b[p * rsb + j * csb];
                    }
                }
            }
        }
        return out;
    }
    // SAFETY: the strides describe matrices lying entirely inside `a`, `b`
    // and `out`, whose lengths the callers guarantee.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    out
}

/// `a[m,k] · b[k,n]`.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    assert!(a.len() >= m * k && b.len() >= k * n);
    gemm(m, k, n, a, k, 1, b, n, 1)
}

/// `a[m,n] · b[k,n]ᵀ` → `[m,k]`.
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    assert!(a.len() >= m * n && b.len() >= k * n);
    gemm(m, n, k, a, n, 1, b, 1, n)
}

/// `a[m,k]ᵀ · b[m,n]` → `[k,n]`.
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    assert!(a.len() >= m * k && b.len() >= m * n);
    gemm(k, m, n, a, 1, k, b, n, 1)
}

/// `[batch, rows, cols]` → `[batch, cols, rows]`.
pub(crate) fn transpose_last2(x: &[f64], batch: usize, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let plane = rows * cols;
    for b in 0..batch {
        let src = &x[b * plane..(b + 1) * plane];
        let dst = &mut out[b * plane..(b + 1) * plane];
        for r in 0..rows {
            for c in 0..cols {
                dst[c * rows + r] = src[r * cols + c];
            }
        }
    }
    out
}

pub(crate) fn bias_grad(g: &[f64], batch: usize, channels: usize) -> Vec<f64> {
    let plane = g.len() / (batch * channels);
    let mut db = vec![0.0; channels];
    for (i, chunk) in g.chunks_exact(plane).enumerate() {
        db[i % channels] += chunk.iter().sum::<f64>();
    }
    db
}

/// Output positions `o` in `lo..hi` for which `o*stride + k - pad` indexes
/// inside `0..n_in`.
fn valid_range(n_in: usize, n_out: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k {
        (pad - k).div_ceil(stride)
    } else {
        0
    };
    if n_in + pad < k + 1 {
        return (0, 0);
    }
    let hi = ((n_in - 1 + pad - k) / stride + 1).min(n_out);
    (lo.min(hi), hi)
}

pub(crate) fn conv_out_len(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Conv2dGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub groups: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Option<Vec<f64>>,
}

/// `dst[o] = src[o*stride + k - pad]` for `o` in `o0..o1`.
#[inline]
fn copy_taps(dst: &mut [f64], src: &[f64], o0: usize, o1: usize, stride: usize, k: usize, pad: usize) {
    if o0 >= o1 {
        return;
    }
    if stride == 1 {
        let s0 = o0 + k - pad;
        dst[o0..o1].copy_from_slice(&src[s0..s0 + (o1 - o0)]);
    } else {
        for o in o0..o1 {
            dst[o] = src[o * stride + k - pad];
        }
    }
}

/// Adjoint of [`copy_taps`]: `dst[o*stride + k - pad] += src[o]`.
#[inline]
fn add_taps(dst: &mut [f64], src: &[f64], o0: usize, o1: usize, stride: usize, k: usize, pad: usize) {
    if o0 >= o1 {
        return;
    }
    if stride == 1 {
        let d0 = o0 + k - pad;
        dst[d0..d0 + (o1 - o0)].iter_mut().zip(&src[o0..o1]).for_each(|(d, s)| *d += s);
    } else {
        for o in o0..o1 {
            dst[o * stride + k - pad] += src[o];
        }
    }
}

/// Unfolds one group of one sample (`[cin_g, h, w]`) into
/// `col[cin_g*kh*kw, oh*ow]`; padded taps are zero.
fn im2col2d(xp: &[f64], cin_g: usize, g: &Conv2dGeom, col: &mut [f64]) {
    let ohow = g.oh * g.ow;
    for ci in 0..cin_g {
        let plane = &xp[ci * g.h * g.w..][..g.h * g.w];
        for ky in 0..g.kh {
            let (oy0, oy1) = valid_range(g.h, g.oh, ky, g.stride, g.pad);
            for kx in 0..g.kw {
                let (ox0, ox1) = valid_range(g.w, g.ow, kx, g.stride, g.pad);
                let dst = &mut col[((ci * g.kh + ky) * g.kw + kx) * ohow..][..ohow];
                dst.fill(0.0);
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let xrow = &plane[iy * g.w..][..g.w];
                    let drow = &mut dst[oy * g.ow..][..g.ow];
                    copy_taps(drow, xrow, ox0, ox1, g.stride, kx, g.pad);
                }
            }
        }
    }
}

/// Adjoint of [`im2col2d`]: scatters `col` back, accumulating into `dx`.
fn col2im2d(col: &[f64], cin_g: usize, g: &Conv2dGeom, dx: &mut [f64]) {
    let ohow = g.oh * g.ow;
    for ci in 0..cin_g {
        let plane = &mut dx[ci * g.h * g.w..][..g.h * g.w];
        for ky in 0..g.kh {
            let (oy0, oy1) = valid_range(g.h, g.oh, ky, g.stride, g.pad);
            for kx in 0..g.kw {
                let (ox0, ox1) = valid_range(g.w, g.ow, kx, g.stride, g.pad);
                let src = &col[((ci * g.kh + ky) * g.kw + kx) * ohow..][..ohow];
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let xrow = &mut plane[iy * g.w..][..g.w];
                    let srow = &src[oy * g.ow..][..g.ow];
                    add_taps(xrow, srow, ox0, ox1, g.stride, kx, g.pad);
                }
            }
        }
    }
}

/// `out[o] += wv * src[o*stride + k - pad]` over `o0..o1`.
#[inline]
fn axpy_taps(out: &mut [f64], src: &[f64], wv: f64, o0: usize, o1: usize, stride: usize, k: usize, pad: usize) {
    if o0 >= o1 {
        return;
    }
    if stride == 1 {
        let s0 = o0 + k - pad;
        out[o0..o1].iter_mut().zip(&src[s0..s0 + (o1 - o0)]).for_each(|(o, x)| *o += wv * x);
    } else {
        for o in o0..o1 {
            out[o] += wv * src[o * stride + k - pad];
        }
    }
}

/// One input and one output channel per group: accumulate shifted planes
/// directly instead of unfolding.
fn depthwise_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: &Conv2dGeom) -> Vec<f64> {
    let (in_plane, ohow) = (g.h * g.w, g.oh * g.ow);
    let mut out = vec![0.0; g.batch * g.c_out * ohow];
    for (p, o) in out.chunks_exact_mut(ohow).enumerate() {
        let c = p % g.c_out;
        if let Some(bias) = bias {
            o.fill(bias[c]);
        }
        let xp = &x[p * in_plane..][..in_plane];
        for ky in 0..g.kh {
            let (oy0, oy1) = valid_range(g.h, g.oh, ky, g.stride, g.pad);
            for kx in 0..g.kw {
                let (ox0, ox1) = valid_range(g.w, g.ow, kx, g.stride, g.pad);
                let wv = w[(c * g.kh + ky) * g.kw + kx];
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    axpy_taps(&mut o[oy * g.ow..][..g.ow], &xp[iy * g.w..][..g.w], wv, ox0, ox1, g.stride, kx, g.pad);
                }
            }
        }
    }
    out
}

fn depthwise_backward(x: &[f64], w: &[f64], gout: &[f64], g: &Conv2dGeom, need_x: bool, need_w: bool) -> ConvGrads {
    let (in_plane, ohow) = (g.h * g.w, g.oh * g.ow);
    let mut dx = need_x.then(|| vec![0.0; x.len()]);
    let mut dw = need_w.then(|| vec![0.0; w.len()]);
    for p in 0..g.batch * g.c_out {
        let c = p % g.c_out;
        let go = &gout[p * ohow..][..ohow];
        let xp = &x[p * in_plane..][..in_plane];
        for ky in 0..g.kh {
            let (oy0, oy1) = valid_range(g.h, g.oh, ky, g.stride, g.pad);
            for kx in 0..g.kw {
                let (ox0, ox1) = valid_range(g.w, g.ow, kx, g.stride, g.pad);
                let widx = (c * g.kh + ky) * g.kw + kx;
                if ox0 >= ox1 {
                    continue;
                }
                let mut acc = 0.0;
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let grow = &go[oy * g.ow..][..g.ow];
                    if let Some(dx) = dx.as_mut() {
                        let drow = &mut dx[p * in_plane + iy * g.w..][..g.w];
                        for ox in ox0..ox1 {
                            drow[ox * g.stride + kx - g.pad] += w[widx] * grow[ox];
                        }
                    }
                    if need_w {
                        let xrow = &xp[iy * g.w..][..g.w];
                        for ox in ox0..ox1 {
                            acc += xrow[ox * g.stride + kx - g.pad] * grow[ox];
                        }
                    }
                }
                if let Some(dw) = dw.as_mut() {
                    dw[widx] += acc;
                }
            }
        }
    }
    ConvGrads { dx, dw }
}

pub(crate) fn conv2d_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: &Conv2dGeom) -> Vec<f64> {
    let cin_g = g.c_in / g.groups;
    let cout_g = g.c_out / g.groups;
    if cin_g == 1 && cout_g == 1 {
        return depthwise_forward(x, w, bias, g);
    }
    let (in_plane, ohow) = (g.h * g.w, g.oh * g.ow);
    let taps = cin_g * g.kh * g.kw;
    let mut col = vec![0.0; taps * ohow];
    let mut out = Vec::with_capacity(g.batch * g.c_out * ohow);
    for b in 0..g.batch {
        for grp in 0..g.groups {
            im2col2d(&x[(b * g.c_in + grp * cin_g) * in_plane..][..cin_g * in_plane], cin_g, g, &mut col);
            let wg = &w[grp * cout_g * taps..][..cout_g * taps];
            let mut o = matmul(wg, &col, cout_g, taps, ohow);
            if let Some(bias) = bias {
                for (co, row) in o.chunks_exact_mut(ohow).enumerate() {
                    let bv = bias[grp * cout_g + co];
                    row.iter_mut().for_each(|v| *v += bv);
                }
            }
            out.extend(o);
        }
    }
    out
}

pub(crate) fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    g: &Conv2dGeom,
    need_x: bool,
    need_w: bool,
) -> ConvGrads {
    let cin_g = g.c_in / g.groups;
    let cout_g = g.c_out / g.groups;
    if cin_g == 1 && cout_g == 1 {
        return depthwise_backward(x, w, gout, g, need_x, need_w);
    }
    let (in_plane, ohow) = (g.h * g.w, g.oh * g.ow);
    let taps = cin_g * g.kh * g.kw;
    let mut dx = need_x.then(|| vec![0.0; x.len()]);
    let mut dw = need_w.then(|| vec![0.0; w.len()]);
    let mut col = vec![0.0; taps * ohow];
    for b in 0..g.batch {
        for grp in 0..g.groups {
            let go = &gout[(b * g.c_out + grp * cout_g) * ohow..][..cout_g * ohow];
            let xoff = (b * g.c_in + grp * cin_g) * in_plane;
            if let Some(dw) = dw.as_mut() {
                im2col2d(&x[xoff..][..cin_g * in_plane], cin_g, g, &mut col);
                let part = matmul_nt(go, &col, cout_g, ohow, taps);
                let dst = &mut dw[grp * cout_g * taps..][..cout_g * taps];
                dst.iter_mut().zip(part).for_each(|(d, p)| *d += p);
            }
            if let Some(dx) = dx.as_mut() {
                let wg = &w[grp * cout_g * taps..][..cout_g * taps];
                let dcol = matmul_tn(wg, go, cout_g, taps, ohow);
                col2im2d(&dcol, cin_g, g, &mut dx[xoff..][..cin_g * in_plane]);
            }
        }
    }
    ConvGrads { dx, dw }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Conv3dGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub kd: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub od: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Unfolds one sample (`[c_in, d, h, w]`) into
/// `col[c_in*kd*kh*kw, od*oh*ow]`.
fn im2col3d(xv: &[f64], g: &Conv3dGeom, col: &mut [f64]) {
    let out_vol = g.od * g.oh * g.ow;
    let in_vol = g.d * g.h * g.w;
    for ci in 0..g.c_in {
        let vol = &xv[ci * in_vol..][..in_vol];
        for kz in 0..g.kd {
            let (oz0, oz1) = valid_range(g.d, g.od, kz, g.stride, g.pad);
            for ky in 0..g.kh {
                let (oy0, oy1) = valid_range(g.h, g.oh, ky, g.stride, g.pad);
                for kx in 0..g.kw {
                    let (ox0, ox1) = valid_range(g.w, g.ow, kx, g.stride, g.pad);
                    let row = ((ci * g.kd + kz) * g.kh + ky) * g.kw + kx;
                    let dst = &mut col[row * out_vol..][..out_vol];
                    dst.fill(0.0);
                    for oz in oz0..oz1 {
                        let iz = oz * g.stride + kz - g.pad;
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let xrow = &vol[(iz * g.h + iy) * g.w..][..g.w];
                            let drow = &mut dst[(oz * g.oh + oy) * g.ow..][..g.ow];
                            copy_taps(drow, xrow, ox0, ox1, g.stride, kx, g.pad);
                        }
                    }
                }
            }
        }
    }
}

fn col2im3d(col: &[f64], g: &Conv3dGeom, dx: &mut [f64]) {
    let out_vol = g.od * g.oh * g.ow;
    let in_vol = g.d * g.h * g.w;
    for ci in 0..g.c_in {
        let vol = &mut dx[ci * in_vol..][..in_vol];
        for kz in 0..g.kd {
            let (oz0, oz1) = valid_range(g.d, g.od, kz, g.stride, g.pad);
            for ky in 0..g.kh {
                let (oy0, oy1) = valid_range(g.h, g.oh, ky, g.stride, g.pad);
                for kx in 0..g.kw {
                    let (ox0, ox1) = valid_range(g.w, g.ow, kx, g.stride, g.pad);
                    let row = ((ci * g.kd + kz) * g.kh + ky) * g.kw + kx;
                    let src = &col[row * out_vol..][..out_vol];
                    for oz in oz0..oz1 {
                        let iz = oz * g.stride + kz - g.pad;
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let xrow = &mut vol[(iz * g.h + iy) * g.w..][..g.w];
                            let srow = &src[(oz * g.oh + oy) * g.ow..][..g.ow];
                            add_taps(xrow, srow, ox0, ox1, g.stride, kx, g.pad);
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv3d_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: &Conv3dGeom) -> Vec<f64> {
    let in_vol = g.d * g.h * g.w;
    let out_vol = g.od * g.oh * g.ow;
    let taps = g.c_in * g.kd * g.kh * g.kw;
    let mut col = vec![0.0; taps * out_vol];
    let mut out = Vec::with_capacity(g.batch * g.c_out * out_vol);
    for b in 0..g.batch {
        im2col3d(&x[b * g.c_in * in_vol..][..g.c_in * in_vol], g, &mut col);
        let mut o = matmul(w, &col, g.c_out, taps, out_vol);
        if let Some(bias) = bias {
            for (co, row) in o.chunks_exact_mut(out_vol).enumerate() {
                row.iter_mut().for_each(|v| *v += bias[co]);
            }
        }
        out.extend(o);
    }
    out
}

pub(crate) fn conv3d_backward(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    g: &Conv3dGeom,
    need_x: bool,
    need_w: bool,
) -> ConvGrads {
    let in_vol = g.d * g.h * g.w;
    let out_vol = g.od * g.oh * g.ow;
    let taps = g.c_in * g.kd * g.kh * g.kw;
    let mut dx = need_x.then(|| vec![0.0; x.len()]);
    let mut dw = need_w.then(|| vec![0.0; w.len()]);
    let mut col = vec![0.0; taps * out_vol];
    for b in 0..g.batch {
        let go = &gout[b * g.c_out * out_vol..][..g.c_out * out_vol];
        let xoff = b * g.c_in * in_vol;
        if let Some(dw) = dw.as_mut() {
            im2col3d(&x[xoff..][..g.c_in * in_vol], g, &mut col);
            let part = matmul_nt(go, &col, g.c_out, out_vol, taps);
            dw.iter_mut().zip(part).for_each(|(d, p)| *d += p);
        }
        if let Some(dx) = dx.as_mut() {
            let dcol = matmul_tn(w, go, g.c_out, taps, out_vol);
            col2im3d(&dcol, g, &mut dx[xoff..][..g.c_in * in_vol]);
        }
    }
    ConvGrads { dx, dw }
}

/// Ceil-mode average pooling without padding; a window that overhangs the
/// trailing edge averages only its in-bounds elements.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct PoolGeom {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn pool_out_len(n: usize, kernel: usize, stride: usize) -> usize {
    n.saturating_sub(kernel).div_ceil(stride) + 1
}

fn pool_window(o: usize, n: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let start = o * stride;
    (start, (start + kernel).min(n))
}

pub(crate) fn avg_pool2d_forward(x: &[f64], g: &PoolGeom) -> Vec<f64> {
    let mut out = Vec::with_capacity(g.planes * g.oh * g.ow);
    for p in 0..g.planes {
        let xp = &x[p * g.h * g.w..][..g.h * g.w];
        for oy in 0..g.oh {
            let (y0, y1) = pool_window(oy, g.h, g.kernel, g.stride);
            for ox in 0..g.ow {
                let (x0, x1) = pool_window(ox, g.w, g.kernel, g.stride);
                let mut s = 0.0;
                for iy in y0..y1 {
                    s += xp[iy * g.w + x0..iy * g.w + x1].iter().sum::<f64>();
                }
                out.push(s / ((y1 - y0) * (x1 - x0)) as f64);
            }
        }
    }
    out
}

pub(crate) fn avg_pool2d_backward(gout: &[f64], g: &PoolGeom) -> Vec<f64> {
    let mut dx = vec![0.0; g.planes * g.h * g.w];
    for p in 0..g.planes {
        let dp = &mut dx[p * g.h * g.w..][..g.h * g.w];
        for oy in 0..g.oh {
            let (y0, y1) = pool_window(oy, g.h, g.kernel, g.stride);
            for ox in 0..g.ow {
                let (x0, x1) = pool_window(ox, g.w, g.kernel, g.stride);
                let v = gout[(p * g.oh + oy) * g.ow + ox] / ((y1 - y0) * (x1 - x0)) as f64;
                for iy in y0..y1 {
                    dp[iy * g.w + x0..iy * g.w + x1]
                        .iter_mut()
                        .for_each(|d| *d += v);
                }
            }
        }
    }
    dx
}

/// Bilinear resize, half-pixel centers (`align_corners = false`): output
/// index `i` samples source coordinate `(i + 0.5) * in/out - 0.5`, clamped
/// to `[0, in - 1]`.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct UpsampleGeom {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Per output index: (low source index, high source index, weight of high).
pub(crate) fn interp_table(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let lambda = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, lambda)
        })
        .collect()
}

/// Exact when `a == b`, so constants survive resizing bit for bit.
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

pub(crate) fn upsample_forward(x: &[f64], g: &UpsampleGeom) -> Vec<f64> {
    let ty = interp_table(g.h, g.oh);
    let tx = interp_table(g.w, g.ow);
    let mut out = Vec::with_capacity(g.planes * g.oh * g.ow);
    for p in 0..g.planes {
        let xp = &x[p * g.h * g.w..][..g.h * g.w];
        for &(y0, y1, ly) in &ty {
            for &(x0, x1, lx) in &tx {
                let top = lerp(xp[y0 * g.w + x0], xp[y0 * g.w + x1], lx);
                let bot = lerp(xp[y1 * g.w + x0], xp[y1 * g.w + x1], lx);
                out.push(lerp(top, bot, ly));
            }
        }
    }
    out
}

pub(crate) fn upsample_backward(gout: &[f64], g: &UpsampleGeom) -> Vec<f64> {
    let ty = interp_table(g.h, g.oh);
    let tx = interp_table(g.w, g.ow);
    let mut dx = vec![0.0; g.planes * g.h * g.w];
    for p in 0..g.planes {
        let dp = &mut dx[p * g.h * g.w..][..g.h * g.w];
        let gp = &gout[p * g.oh * g.ow..][..g.oh * g.ow];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let v = gp[oy * g.ow + ox];
                dp[y0 * g.w + x0] += (1.0 - ly) * (1.0 - lx) * v;
                dp[y0 * g.w + x1] += (1.0 - ly) * lx * v;
                dp[y1 * g.w + x0] += ly * (1.0 - lx) * v;
                dp[y1 * g.w + x1] += ly * lx * v;
            }
        }
    }
    dx
}
