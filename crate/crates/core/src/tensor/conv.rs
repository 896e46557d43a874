//! Convolution, transposed convolution and max-pool kernels on raw NCHW
//! buffers.
//!
//! Convolution is cross-correlation (no kernel flip), stride 1, zero
//! padding. It lowers to GEMM through an im2col buffer per batch item.

/// Row-major `C = alpha * A * B + beta * C` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    debug_assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    debug_assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the asserts above bound every index the kernel touches, and `c`
    // is exclusively borrowed.
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
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        self.height + 2 * self.pad + 1 - self.kernel
    }

    pub fn out_width(&self) -> usize {
        self.width + 2 * self.pad + 1 - self.kernel
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_plane(&self) -> usize {
        self.out_height() * self.out_width()
    }

    fn in_plane(&self) -> usize {
        self.height * self.width
    }

    /// 1x1 without padding: the input plane already is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.pad == 0
    }
}

/// Valid output range `[lo, hi)` along one axis for kernel offset `kk`.
fn valid_range(kk: usize, pad: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kk).min(out_len);
    let hi = (in_len + pad).saturating_sub(kk).min(out_len).max(lo);
    (lo, hi)
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (ho, wo, k, pad) = (g.out_height(), g.out_width(), g.kernel, g.pad);
    let plane = ho * wo;
    for c in 0..g.in_channels {
        let xc = &x[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ki in 0..k {
            let (oy_lo, oy_hi) = valid_range(ki, pad, g.height, ho);
            for kj in 0..k {
                let (ox_lo, ox_hi) = valid_range(kj, pad, g.width, wo);
                let row = &mut cols[((c * k + ki) * k + kj) * plane..][..plane];
                for oy in 0..ho {
                    let out_row = &mut row[oy * wo..(oy + 1) * wo];
                    if oy < oy_lo || oy >= oy_hi {
                        out_row.fill(0.0);
                        continue;
                    }
                    if ox_hi == ox_lo {
                        out_row.fill(0.0);
                        continue;
                    }
                    let iy = oy + ki - pad;
                    out_row[..ox_lo].fill(0.0);
                    out_row[ox_hi..].fill(0.0);
                    let ix_lo = ox_lo + kj - pad;
                    out_row[ox_lo..ox_hi].copy_from_slice(
                        &xc[iy * g.width + ix_lo..iy * g.width + ix_lo + (ox_hi - ox_lo)],
                    );
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let (ho, wo, k, pad) = (g.out_height(), g.out_width(), g.kernel, g.pad);
    let plane = ho * wo;
    for c in 0..g.in_channels {
        let dxc = &mut dx[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ki in 0..k {
            let (oy_lo, oy_hi) = valid_range(ki, pad, g.height, ho);
            for kj in 0..k {
                let (ox_lo, ox_hi) = valid_range(kj, pad, g.width, wo);
                let row = &cols[((c * k + ki) * k + kj) * plane..][..plane];
                if ox_hi == ox_lo {
                    continue;
                }
                for oy in oy_lo..oy_hi {
                    let iy = oy + ki - pad;
                    let ix_lo = ox_lo + kj - pad;
                    let dst = &mut dxc[iy * g.width + ix_lo..][..ox_hi - ox_lo];
                    for (d, s) in dst.iter_mut().zip(&row[oy * wo + ox_lo..oy * wo + ox_hi]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// `out` has shape `(batch, out_channels, out_h, out_w)` and is overwritten.
pub fn conv2d_forward(
    x: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    g: &ConvGeom,
    out: &mut [f64],
) {
    let plane = g.out_plane();
    let patch = g.patch_len();
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; patch * plane]
    };
    for n in 0..g.batch {
        let xn = &x[n * g.in_channels * g.in_plane()..][..g.in_channels * g.in_plane()];
        let on = &mut out[n * g.out_channels * plane..][..g.out_channels * plane];
        let cols_ref: &[f64] = if g.is_pointwise() {
            xn
        } else {
            im2col(xn, g, &mut cols);
            &cols
        };
        match bias {
            Some(b) => {
                for (o, &bv) in b.iter().enumerate() {
                    on[o * plane..(o + 1) * plane].fill(bv);
                }
            }
            None => on.fill(0.0),
        }
        gemm(
            g.out_channels,
            patch,
            plane,
            weight,
            (patch, 1),
            cols_ref,
            (plane, 1),
            1.0,
            on,
            (plane, 1),
        );
    }
}

/// Accumulates into `dweight`, `dbias` and (when given) `dx`.
pub fn conv2d_backward(
    x: &[f64],
    weight: &[f64],
    g: &ConvGeom,
    dy: &[f64],
    dx: Option<&mut [f64]>,
    dweight: Option<&mut [f64]>,
    dbias: Option<&mut [f64]>,
) {
    let plane = g.out_plane();
    let patch = g.patch_len();
    let in_len = g.in_channels * g.in_plane();
    let out_len = g.out_channels * plane;
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; patch * plane]
    };
    let mut dcols = vec![0.0; if g.is_pointwise() { 0 } else { patch * plane }];

    if let Some(db) = dbias {
        for n in 0..g.batch {
            let dyn_ = &dy[n * out_len..][..out_len];
            for (o, d) in db.iter_mut().enumerate() {
                *d += dyn_[o * plane..(o + 1) * plane].iter().sum::<f64>();
            }
        }
    }

    if let Some(dw) = dweight {
        for n in 0..g.batch {
            let xn = &x[n * in_len..][..in_len];
            let dyn_ = &dy[n * out_len..][..out_len];
            let cols_ref: &[f64] = if g.is_pointwise() {
                xn
            } else {
                im2col(xn, g, &mut cols);
                &cols
            };
            // dW (Cout x K) += dY (Cout x P) * cols^T (P x K)
            gemm(
                g.out_channels,
                plane,
                patch,
                dyn_,
                (plane, 1),
                cols_ref,
                (1, plane),
                1.0,
                dw,
                (patch, 1),
            );
        }
    }

    if let Some(dx) = dx {
        for n in 0..g.batch {
            let dyn_ = &dy[n * out_len..][..out_len];
            let dxn = &mut dx[n * in_len..][..in_len];
            if g.is_pointwise() {
                gemm(
                    patch,
                    g.out_channels,
                    plane,
                    weight,
                    (1, patch),
                    dyn_,
                    (plane, 1),
                    1.0,
                    dxn,
                    (plane, 1),
                );
            } else {
                // dcols (K x P) = W^T (K x Cout) * dY (Cout x P)
                gemm(
                    patch,
                    g.out_channels,
                    plane,
                    weight,
                    (1, patch),
                    dyn_,
                    (plane, 1),
                    0.0,
                    &mut dcols,
                    (plane, 1),
                );
                col2im_add(&dcols, g, dxn);
            }
        }
    }
}

/// Geometry of a 2x2 stride-2 transposed convolution. The weight has shape
/// `(in_channels, out_channels, 2, 2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TconvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
}

impl TconvGeom {
    fn in_plane(&self) -> usize {
        self.height * self.width
    }
}

/// `out` has shape `(batch, out_channels, 2h, 2w)` and is overwritten.
pub fn tconv2_forward(x: &[f64], weight: &[f64], g: &TconvGeom, out: &mut [f64]) {
    let plane = g.in_plane();
    let taps = g.out_channels * 4;
    let mut scattered = vec![0.0; taps * plane];
    let (h, w) = (g.height, g.width);
    let out_plane = 4 * plane;
    for n in 0..g.batch {
        let xn = &x[n * g.in_channels * plane..][..g.in_channels * plane];
        // S (Cout*4 x P) = W^T (Cout*4 x Cin) * X (Cin x P)
        gemm(
            taps,
            g.in_channels,
            plane,
            weight,
            (1, taps),
            xn,
            (plane, 1),
            0.0,
            &mut scattered,
            (plane, 1),
        );
        let on = &mut out[n * g.out_channels * out_plane..][..g.out_channels * out_plane];
        for o in 0..g.out_channels {
            for tap in 0..4 {
                let (di, dj) = (tap / 2, tap % 2);
                let src = &scattered[(o * 4 + tap) * plane..][..plane];
                for i in 0..h {
                    let row = &mut on[o * out_plane + (2 * i + di) * 2 * w..][..2 * w];
                    for j in 0..w {
                        row[2 * j + dj] = src[i * w + j];
                    }
                }
            }
        }
    }
}

pub fn tconv2_backward(
    x: &[f64],
    weight: &[f64],
    g: &TconvGeom,
    dy: &[f64],
    dx: Option<&mut [f64]>,
    dweight: Option<&mut [f64]>,
) {
    let plane = g.in_plane();
    let taps = g.out_channels * 4;
    let (h, w) = (g.height, g.width);
    let out_plane = 4 * plane;
    let mut gathered = vec![0.0; taps * plane];
    let mut dx = dx;
    let mut dweight = dweight;
    for n in 0..g.batch {
        let dyn_ = &dy[n * g.out_channels * out_plane..][..g.out_channels * out_plane];
        for o in 0..g.out_channels {
            for tap in 0..4 {
                let (di, dj) = (tap / 2, tap % 2);
                let dst = &mut gathered[(o * 4 + tap) * plane..][..plane];
                for i in 0..h {
                    let row = &dyn_[o * out_plane + (2 * i + di) * 2 * w..][..2 * w];
                    for j in 0..w {
                        dst[i * w + j] = row[2 * j + dj];
                    }
                }
            }
        }
        let xn = &x[n * g.in_channels * plane..][..g.in_channels * plane];
        if let Some(dw) = dweight.as_deref_mut() {
            // dW (Cin x Cout*4) += X (Cin x P) * G^T (P x Cout*4)
            gemm(
                g.in_channels,
                plane,
                taps,
                xn,
                (plane, 1),
                &gathered,
                (1, plane),
                1.0,
                dw,
                (taps, 1),
            );
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxn = &mut dx[n * g.in_channels * plane..][..g.in_channels * plane];
            // dX (Cin x P) += W (Cin x Cout*4) * G (Cout*4 x P)
            gemm(
                g.in_channels,
                taps,
                plane,
                weight,
                (taps, 1),
                &gathered,
                (plane, 1),
                1.0,
                dxn,
                (plane, 1),
            );
        }
    }
}

/// 2x2 stride-2 max pool over `planes` planes of `height`x`width`. Returns
/// the flat input index of each window's maximum (first in row-major order on
/// ties).
pub fn maxpool2_forward(
    x: &[f64],
    planes: usize,
    height: usize,
    width: usize,
    out: &mut [f64],
) -> Vec<u32> {
    let (ho, wo) = (height / 2, width / 2);
    let mut argmax = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * height * width;
        for i in 0..ho {
            for j in 0..wo {
                let mut best = base + 2 * i * width + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + di) * width + 2 * j + dj;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out[p * ho * wo + i * wo + j] = x[best];
                argmax.push(best as u32);
            }
        }
    }
    argmax
}

pub fn maxpool2_backward(argmax: &[u32], dy: &[f64], dx: &mut [f64]) {
    for (&idx, &d) in argmax.iter().zip(dy) {
        dx[idx as usize] += d;
    }
}
