//! Raw convolution / transposed-convolution / pooling loops.
//!
//! All buffers are row-major with layout (N, H, W, C). Convolution kernels
//! are (kh, kw, Cin, Cout); transposed-convolution kernels are
//! (kh, kw, Cout, Cin). Shape checking happens in the graph layer; these
//! functions only compute.
//!
//! Convolutions go through strip-wise im2col and a register-tiled GEMM
//! micro-kernel: accumulators live in a CC x TILE_P register block, so the
//! hot loop is FMA-bound rather than load/store-bound, independent of the
//! channel counts.

/// Pixels per register tile.
const TILE_P: usize = 16;
/// Output channels per register tile.
const TILE_C: usize = 4;
/// Budget (elements) for the im2col scratch buffer.
const COLS_BUDGET: usize = 4 << 20;

fn round_up(x: usize, m: usize) -> usize {
    x.div_ceil(m) * m
}

/// Zero-pads the spatial axes of a (N,H,W,C) buffer.
#[allow(clippy::too_many_arguments)]
pub fn pad_spatial(
    x: &[f64],
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    pad_top: usize,
    pad_bottom: usize,
    pad_left: usize,
    pad_right: usize,
) -> Vec<f64> {
    let hp = h + pad_top + pad_bottom;
    let wp = w + pad_left + pad_right;
    let mut out = vec![0.0; n * hp * wp * c];
    for ni in 0..n {
        for hi in 0..h {
            let src = ((ni * h + hi) * w) * c;
            let dst = ((ni * hp + hi + pad_top) * wp + pad_left) * c;
            out[dst..dst + w * c].copy_from_slice(&x[src..src + w * c]);
        }
    }
    out
}

/// Crops the spatial axes back out of a padded (N,Hp,Wp,C) buffer.
#[allow(clippy::too_many_arguments)]
pub fn crop_spatial(
    xp: &[f64],
    n: usize,
    hp: usize,
    wp: usize,
    c: usize,
    pad_top: usize,
    pad_left: usize,
    h: usize,
    w: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; n * h * w * c];
    for ni in 0..n {
        for hi in 0..h {
            let src = ((ni * hp + hi + pad_top) * wp + pad_left) * c;
            let dst = ((ni * h + hi) * w) * c;
            out[dst..dst + w * c].copy_from_slice(&xp[src..src + w * c]);
        }
    }
    out
}

// ── GEMM micro-kernels ─────────────────────────────────────────────────────

/// One register tile: c[m0..m0+MC][p0..p0+TILE_P] = init + A-row dot B-col.
/// `a` is (m, k) row-major; `b` is (k, p_stride) row-major with the tile
/// starting at column p0. p_stride is a multiple of TILE_P, so full tiles
/// never run off a row.
#[inline(always)]
fn micro_tile<const MC: usize>(
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    m0: usize,
    p0: usize,
    k_len: usize,
    p_stride: usize,
    init: &[f64; MC],
) {
    let mut acc = [[0.0f64; TILE_P]; MC];
    for (row, &v) in acc.iter_mut().zip(init) {
        *row = [v; TILE_P];
    }
    for z in 0..k_len {
        let brow: &[f64; TILE_P] = b[z * p_stride + p0..z * p_stride + p0 + TILE_P]
            .try_into()
            .unwrap();
        for (mc, row) in acc.iter_mut().enumerate() {
            let av = a[(m0 + mc) * k_len + z];
            for (r, &bv) in row.iter_mut().zip(brow) {
                *r += av * bv;
            }
        }
    }
    for (mc, row) in acc.iter().enumerate() {
        c[(m0 + mc) * p_stride + p0..(m0 + mc) * p_stride + p0 + TILE_P].copy_from_slice(row);
    }
}

/// C (m, p_stride) = A (m, k) x B (k, p_stride), tile-blocked. `init` seeds
/// every row (a bias) or zero.
fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k_len: usize, p_stride: usize, init: Option<&[f64]>) {
    let zero = [0.0f64];
    let mut p0 = 0;
    while p0 < p_stride {
        let mut m0 = 0;
        while m0 < m {
            let mc = (m - m0).min(TILE_C);
            let seed = |i: usize| init.map(|b| b[m0 + i]).unwrap_or(zero[0]);
            match mc {
                4 => micro_tile::<4>(a, b, c, m0, p0, k_len, p_stride, &[seed(0), seed(1), seed(2), seed(3)]),
                3 => micro_tile::<3>(a, b, c, m0, p0, k_len, p_stride, &[seed(0), seed(1), seed(2)]),
                2 => micro_tile::<2>(a, b, c, m0, p0, k_len, p_stride, &[seed(0), seed(1)]),
                _ => micro_tile::<1>(a, b, c, m0, p0, k_len, p_stride, &[seed(0)]),
            }
            m0 += mc;
        }
        p0 += TILE_P;
    }
}

/// Dot product with eight parallel accumulators (vector-friendly).
#[inline]
fn dot8(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let ar: &[f64; 8] = a[i * 8..i * 8 + 8].try_into().unwrap();
        let br: &[f64; 8] = b[i * 8..i * 8 + 8].try_into().unwrap();
        for l in 0..8 {
            acc[l] += ar[l] * br[l];
        }
    }
    let mut s = acc.iter().sum::<f64>();
    for i in chunks * 8..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// C (m, n) += A (m, p_stride) x B (n, p_stride)^T — both operands read as
/// contiguous rows over the long pixel axis.
fn gemm_abt_accumulate(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, p_stride: usize) {
    for mi in 0..m {
        let arow = &a[mi * p_stride..(mi + 1) * p_stride];
        let crow = &mut c[mi * n..(mi + 1) * n];
        for (ni, cv) in crow.iter_mut().enumerate() {
            let brow = &b[ni * p_stride..(ni + 1) * p_stride];
            *cv += dot8(arow, brow);
        }
    }
}

// ── im2col plumbing ────────────────────────────────────────────────────────

/// Output-row strip height that keeps the patch matrix within budget.
fn strip_rows(z: usize, wo: usize, ho: usize) -> usize {
    (COLS_BUDGET / (z * round_up(wo, TILE_P) + 1)).clamp(1, ho)
}

/// Fills `cols` (z-major, pixel-minor, rows padded to p_stride) with the
/// input patches of output rows [r0, r1). z enumerates (dh, dw, ci) in
/// kernel order; pad columns stay zero.
#[allow(clippy::too_many_arguments)]
fn fill_cols(
    cols: &mut [f64],
    x: &[f64],
    ni: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    wo: usize,
    r0: usize,
    r1: usize,
    p_stride: usize,
) {
    let mut z = 0;
    for dh in 0..kh {
        for dw in 0..kw {
            for ci in 0..cin {
                let dst = &mut cols[z * p_stride..(z + 1) * p_stride];
                for i in r0..r1 {
                    let src_base = ((ni * h + i + dh) * w + dw) * cin + ci;
                    let row = &mut dst[(i - r0) * wo..(i - r0 + 1) * wo];
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = x[src_base + j * cin];
                    }
                }
                z += 1;
            }
        }
    }
}

/// Valid cross-correlation: out[n,i,j,co] = b[co] + sum x[n,i+dh,j+dw,ci] * k[dh,dw,ci,co].
#[allow(clippy::too_many_arguments)]
pub fn conv_forward(
    x: &[f64],
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    k: &[f64],
    kh: usize,
    kw: usize,
    cout: usize,
    bias: &[f64],
) -> Vec<f64> {
    let ho = h - kh + 1;
    let wo = w - kw + 1;
    let z_len = kh * kw * cin;
    let strip = strip_rows(z_len, wo, ho);
    let p_max = round_up(strip * wo, TILE_P);
    let mut out = vec![0.0; n * ho * wo * cout];
    // Kernel transposed to (cout, z) once.
    let mut kt = vec![0.0; cout * z_len];
    for z in 0..z_len {
        for co in 0..cout {
            kt[co * z_len + z] = k[z * cout + co];
        }
    }
    let mut cols = vec![0.0; z_len * p_max];
    let mut out_t = vec![0.0; cout * p_max];
    for ni in 0..n {
        let mut r0 = 0;
        while r0 < ho {
            let r1 = (r0 + strip).min(ho);
            let p_len = (r1 - r0) * wo;
            let p_stride = round_up(p_len, TILE_P);
            fill_cols(&mut cols, x, ni, h, w, cin, kh, kw, wo, r0, r1, p_stride);
            gemm(&kt, &cols, &mut out_t, cout, z_len, p_stride, Some(bias));
            // Transpose the strip back to channel-last layout.
            let obase = ((ni * ho + r0) * wo) * cout;
            for co in 0..cout {
                let orow = &out_t[co * p_stride..co * p_stride + p_len];
                for (p, &v) in orow.iter().enumerate() {
                    out[obase + p * cout + co] = v;
                }
            }
            r0 = r1;
        }
    }
    out
}

/// Gradient of valid cross-correlation w.r.t. its input, in the input's
/// (possibly padded) coordinate space.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward_data(
    g: &[f64],
    n: usize,
    ho: usize,
    wo: usize,
    cout: usize,
    k: &[f64],
    kh: usize,
    kw: usize,
    cin: usize,
    h: usize,
    w: usize,
) -> Vec<f64> {
    let z_len = kh * kw * cin;
    let strip = strip_rows(z_len.max(cout), wo, ho);
    let p_max = round_up(strip * wo, TILE_P);
    let mut dx = vec![0.0; n * h * w * cin];
    let mut g_t = vec![0.0; cout * p_max];
    let mut dcols = vec![0.0; z_len * p_max];
    for ni in 0..n {
        let mut r0 = 0;
        while r0 < ho {
            let r1 = (r0 + strip).min(ho);
            let p_len = (r1 - r0) * wo;
            let p_stride = round_up(p_len, TILE_P);
            let gbase = ((ni * ho + r0) * wo) * cout;
            for co in 0..cout {
                let grow = &mut g_t[co * p_stride..co * p_stride + p_len];
                for (p, v) in grow.iter_mut().enumerate() {
                    *v = g[gbase + p * cout + co];
                }
                g_t[co * p_stride + p_len..(co + 1) * p_stride].fill(0.0);
            }
            // dcols (z, p) = k (z, cout) x g_t (cout, p)
            gemm(k, &g_t, &mut dcols, z_len, cout, p_stride, None);
            // col2im scatter-add back into the input coordinates.
            let mut z = 0;
            for dh in 0..kh {
                for dw in 0..kw {
                    for ci in 0..cin {
                        let dcrow = &dcols[z * p_stride..z * p_stride + p_len];
                        for i in r0..r1 {
                            let dst_base = ((ni * h + i + dh) * w + dw) * cin + ci;
                            let src = &dcrow[(i - r0) * wo..(i - r0 + 1) * wo];
                            for (j, &v) in src.iter().enumerate() {
                                dx[dst_base + j * cin] += v;
                            }
                        }
                        z += 1;
                    }
                }
            }
            r0 = r1;
        }
    }
    dx
}

/// Gradient of valid cross-correlation w.r.t. kernel and bias.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward_kernel(
    g: &[f64],
    x: &[f64],
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
) -> (Vec<f64>, Vec<f64>) {
    let ho = h - kh + 1;
    let wo = w - kw + 1;
    let z_len = kh * kw * cin;
    let strip = strip_rows(z_len.max(cout), wo, ho);
    let p_max = round_up(strip * wo, TILE_P);
    let mut dkt = vec![0.0; cout * z_len];
    let mut db = vec![0.0; cout];
    for grow in g.chunks_exact(cout) {
        for (d, &gv) in db.iter_mut().zip(grow) {
            *d += gv;
        }
    }
    let mut cols = vec![0.0; z_len * p_max];
    let mut g_t = vec![0.0; cout * p_max];
    for ni in 0..n {
        let mut r0 = 0;
        while r0 < ho {
            let r1 = (r0 + strip).min(ho);
            let p_len = (r1 - r0) * wo;
            let p_stride = round_up(p_len, TILE_P);
            fill_cols(&mut cols, x, ni, h, w, cin, kh, kw, wo, r0, r1, p_stride);
            let gbase = ((ni * ho + r0) * wo) * cout;
            for co in 0..cout {
                let grow = &mut g_t[co * p_stride..co * p_stride + p_len];
                for (p, v) in grow.iter_mut().enumerate() {
                    *v = g[gbase + p * cout + co];
                }
                g_t[co * p_stride + p_len..(co + 1) * p_stride].fill(0.0);
            }
            // dkt (cout, z) += g_t (cout, p) x cols (z, p)^T
            gemm_abt_accumulate(&g_t, &cols, &mut dkt, cout, z_len, p_stride);
            r0 = r1;
        }
    }
    let mut dk = vec![0.0; z_len * cout];
    for z in 0..z_len {
        for co in 0..cout {
            dk[z * cout + co] = dkt[co * z_len + z];
        }
    }
    (dk, db)
}

/// Transposed convolution (scatter form):
/// out[n, i*s+dh, j*s+dw, co] += sum_ci x[n,i,j,ci] * k[dh,dw,co,ci], plus bias.
/// Output spatial size is (H-1)*s + kh by (W-1)*s + kw.
#[allow(clippy::too_many_arguments)]
pub fn deconv_forward(
    x: &[f64],
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    k: &[f64],
    kh: usize,
    kw: usize,
    cout: usize,
    bias: &[f64],
    stride: usize,
) -> Vec<f64> {
    let ho = (h - 1) * stride + kh;
    let wo = (w - 1) * stride + kw;
    let mut out = vec![0.0; n * ho * wo * cout];
    for row in out.chunks_exact_mut(cout) {
        row.copy_from_slice(bias);
    }
    for ni in 0..n {
        for i in 0..h {
            for j in 0..w {
                let xrow = &x[((ni * h + i) * w + j) * cin..][..cin];
                for dh in 0..kh {
                    let obase = ((ni * ho + i * stride + dh) * wo + j * stride) * cout;
                    for dw in 0..kw {
                        let orow = &mut out[obase + dw * cout..obase + (dw + 1) * cout];
                        let kbase = ((dh * kw + dw) * cout) * cin;
                        for (co, ov) in orow.iter_mut().enumerate() {
                            let krow = &k[kbase + co * cin..][..cin];
                            let mut s = 0.0;
                            for (&kv, &xv) in krow.iter().zip(xrow) {
                                s += kv * xv;
                            }
                            *ov += s;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient of the transposed convolution w.r.t. its input.
#[allow(clippy::too_many_arguments)]
pub fn deconv_backward_data(
    g: &[f64],
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    k: &[f64],
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
) -> Vec<f64> {
    let ho = (h - 1) * stride + kh;
    let wo = (w - 1) * stride + kw;
    let mut dx = vec![0.0; n * h * w * cin];
    for ni in 0..n {
        for i in 0..h {
            for j in 0..w {
                let dxrow = &mut dx[((ni * h + i) * w + j) * cin..][..cin];
                for dh in 0..kh {
                    let gbase = ((ni * ho + i * stride + dh) * wo + j * stride) * cout;
                    for dw in 0..kw {
                        let grow = &g[gbase + dw * cout..gbase + (dw + 1) * cout];
                        let kbase = ((dh * kw + dw) * cout) * cin;
                        for (co, &gv) in grow.iter().enumerate() {
                            let krow = &k[kbase + co * cin..][..cin];
                            for (d, &kv) in dxrow.iter_mut().zip(krow) {
                                *d += gv * kv;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Gradient of the transposed convolution w.r.t. kernel and bias.
#[allow(clippy::too_many_arguments)]
pub fn deconv_backward_kernel(
    g: &[f64],
    x: &[f64],
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
) -> (Vec<f64>, Vec<f64>) {
    let ho = (h - 1) * stride + kh;
    let wo = (w - 1) * stride + kw;
    let mut dk = vec![0.0; kh * kw * cout * cin];
    let mut db = vec![0.0; cout];
    for grow in g.chunks_exact(cout) {
        for (d, &gv) in db.iter_mut().zip(grow) {
            *d += gv;
        }
    }
    for ni in 0..n {
        for i in 0..h {
            for j in 0..w {
                let xrow = &x[((ni * h + i) * w + j) * cin..][..cin];
                for dh in 0..kh {
                    let gbase = ((ni * ho + i * stride + dh) * wo + j * stride) * cout;
                    for dw in 0..kw {
                        let grow = &g[gbase + dw * cout..gbase + (dw + 1) * cout];
                        let kbase = ((dh * kw + dw) * cout) * cin;
                        for (co, &gv) in grow.iter().enumerate() {
                            let dkrow = &mut dk[kbase + co * cin..][..cin];
                            for (d, &xv) in dkrow.iter_mut().zip(xrow) {
                                *d += gv * xv;
                            }
                        }
                    }
                }
            }
        }
    }
    (dk, db)
}

/// 2x2 max pooling. Returns the pooled buffer and, per output element, the
/// flat index of the winning input element. Ties go to the first element in
/// row-major scan order of the window.
pub fn maxpool2_forward(
    x: &[f64],
    n: usize,
    h: usize,
    w: usize,
    c: usize,
) -> (Vec<f64>, Vec<usize>) {
    let ho = h / 2;
    let wo = w / 2;
    let mut out = vec![0.0; n * ho * wo * c];
    let mut arg = vec![0usize; n * ho * wo * c];
    for ni in 0..n {
        for i in 0..ho {
            for j in 0..wo {
                let obase = ((ni * ho + i) * wo + j) * c;
                for ch in 0..c {
                    let mut best_idx = ((ni * h + 2 * i) * w + 2 * j) * c + ch;
                    let mut best = x[best_idx];
                    for (dh, dw) in [(0usize, 1usize), (1, 0), (1, 1)] {
                        let idx = ((ni * h + 2 * i + dh) * w + 2 * j + dw) * c + ch;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                    out[obase + ch] = best;
                    arg[obase + ch] = best_idx;
                }
            }
        }
    }
    (out, arg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pad_then_crop_roundtrips() {
        let x: Vec<f64> = (0..2 * 3 * 4 * 2).map(|v| v as f64).collect();
        let p = pad_spatial(&x, 2, 3, 4, 2, 1, 1, 2, 0);
        assert_eq!(p.len(), 2 * 5 * 6 * 2);
        let back = crop_spatial(&p, 2, 5, 6, 2, 1, 2, 3, 4);
        assert_eq!(back, x);
    }

    #[test]
    fn conv_matches_hand_computation() {
        // 1x2x2x1 input, 2x2 kernel, one output pixel.
        let x = vec![1.0, 2.0, 3.0, 4.0];
        let k = vec![10.0, 20.0, 30.0, 40.0];
        let out = conv_forward(&x, 1, 2, 2, 1, &k, 2, 2, 1, &[5.0]);
        assert_eq!(out, vec![5.0 + 10.0 + 40.0 + 90.0 + 160.0]);
    }

    /// Literal quadruple-loop convolution, the independent oracle.
    #[allow(clippy::too_many_arguments)]
    fn conv_brute(
        x: &[f64],
        n: usize,
        h: usize,
        w: usize,
        cin: usize,
        k: &[f64],
        kh: usize,
        kw: usize,
        cout: usize,
        bias: &[f64],
    ) -> Vec<f64> {
        let ho = h - kh + 1;
        let wo = w - kw + 1;
        let mut out = vec![0.0; n * ho * wo * cout];
        for ni in 0..n {
            for i in 0..ho {
                for j in 0..wo {
                    for co in 0..cout {
                        let mut s = bias[co];
                        for dh in 0..kh {
                            for dw in 0..kw {
                                for ci in 0..cin {
                                    s += x[((ni * h + i + dh) * w + j + dw) * cin + ci]
                                        * k[((dh * kw + dw) * cin + ci) * cout + co];
                                }
                            }
                        }
                        out[((ni * ho + i) * wo + j) * cout + co] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn tiled_conv_matches_brute_force_on_awkward_sizes() {
        // Sizes chosen to exercise tile remainders in every dimension.
        for (n, h, w, cin, kh, kw, cout) in
            [(2, 5, 7, 3, 3, 3, 5), (1, 4, 19, 2, 2, 2, 1), (3, 9, 3, 1, 3, 1, 7)]
        {
            let x: Vec<f64> = (0..n * h * w * cin).map(|i| ((i * 7919) % 23) as f64 - 11.0).collect();
            let k: Vec<f64> = (0..kh * kw * cin * cout)
                .map(|i| ((i * 104729) % 19) as f64 * 0.25 - 2.0)
                .collect();
            let bias: Vec<f64> = (0..cout).map(|i| i as f64 * 0.5).collect();
            let fast = conv_forward(&x, n, h, w, cin, &k, kh, kw, cout, &bias);
            let brute = conv_brute(&x, n, h, w, cin, &k, kh, kw, cout, &bias);
            assert_eq!(fast.len(), brute.len());
            for (a, b) in fast.iter().zip(&brute) {
                assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn maxpool_tie_break_is_first_in_scan_order() {
        let x = vec![7.0; 4]; // 1x2x2x1, all equal
        let (out, arg) = maxpool2_forward(&x, 1, 2, 2, 1);
        assert_eq!(out, vec![7.0]);
        assert_eq!(arg, vec![0]);
    }
}
