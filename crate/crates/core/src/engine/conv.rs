//! Grouped 2-D convolution without bias.
//!
//! Three code paths share one contract: depthwise convolutions
//! (`groups == Cin == Cout`) use direct loops, unit-stride 1×1 convolutions
//! multiply the input planes directly, and everything else goes through
//! im2col + GEMM per group.

use super::tensor::Tensor;
use crate::error::{bail, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvParams {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvParams {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self {
            stride,
            padding,
            groups,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeom {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    fn depthwise(&self) -> bool {
        self.groups == self.cin && self.groups == self.cout
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn macs(&self) -> u64 {
        (self.n * self.cout * self.cin_g() * self.kh * self.kw * self.ho * self.wo) as u64
    }
}

/// Output spatial extent of a convolution or pooling window.
pub fn conv_out_size(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || size + 2 * padding < kernel {
        return None;
    }
    Some((size + 2 * padding - kernel) / stride + 1)
}

pub(crate) fn geometry(x: &Tensor, k: &Tensor, p: ConvParams) -> Result<ConvGeom> {
    let [n, cin, h, w] = x.dims4()?;
    let [cout, cin_g, kh, kw] = k.dims4()?;
    if p.groups == 0 || p.stride == 0 {
        bail!(InvalidConfig, "stride and groups must be positive");
    }
    if cin % p.groups != 0 || cout % p.groups != 0 {
        return Err(Error::InvalidGroups(format!(
            "groups {} must divide Cin {cin} and Cout {cout}",
            p.groups
        )));
    }
    if cin_g * p.groups != cin {
        bail!(
            InvalidShape,
            "kernel expects {} input channels per group, input has {}",
            cin_g,
            cin / p.groups
        );
    }
    let (Some(ho), Some(wo)) = (
        conv_out_size(h, kh, p.stride, p.padding),
        conv_out_size(w, kw, p.stride, p.padding),
    ) else {
        bail!(
            InvalidShape,
            "kernel {kh}×{kw} does not fit input {h}×{w} with padding {}",
            p.padding
        );
    };
    Ok(ConvGeom {
        n,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        ho,
        wo,
        stride: p.stride,
        pad: p.padding,
        groups: p.groups,
    })
}

/// `C = A·B + beta·C` on row-major buffers; `a_t`/`b_t` read the stored
/// matrix transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    c: &mut [f32],
    beta: f32,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::sgemm(
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

/// Valid output range `[lo, hi)` along one axis for kernel offset `k`.
#[inline]
fn valid_range(k: usize, pad: usize, stride: usize, size: usize, out: usize) -> (usize, usize) {
    // need 0 <= o*stride + k - pad < size
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if size + pad > k {
        ((size + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col(g: &ConvGeom, plane: &[f32], col: &mut [f32]) {
    let hw_o = g.ho * g.wo;
    let cin_g = g.cin_g();
    for ci in 0..cin_g {
        let src = &plane[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = valid_range(ky, g.pad, g.stride, g.h, g.ho);
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * hw_o..(row + 1) * hw_o];
                dst.fill(0.0);
                let (ox_lo, ox_hi) = valid_range(kx, g.pad, g.stride, g.w, g.wo);
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ky - g.pad;
                    let srow = &src[iy * g.w..(iy + 1) * g.w];
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let s0 = ox_lo * g.stride + kx - g.pad;
                    let d = &mut drow[ox_lo..ox_hi];
                    if g.stride == 1 {
                        d.copy_from_slice(&srow[s0..s0 + d.len()]);
                    } else {
                        for (dv, &sv) in d.iter_mut().zip(srow[s0..].iter().step_by(g.stride)) {
                            *dv = sv;
                        }
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, col: &[f32], plane: &mut [f32]) {
    let hw_o = g.ho * g.wo;
    let cin_g = g.cin_g();
    for ci in 0..cin_g {
        let dst = &mut plane[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = valid_range(ky, g.pad, g.stride, g.h, g.ho);
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &col[row * hw_o..(row + 1) * hw_o];
                let (ox_lo, ox_hi) = valid_range(kx, g.pad, g.stride, g.w, g.wo);
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ky - g.pad;
                    let drow = &mut dst[iy * g.w..(iy + 1) * g.w];
                    let srow = &src[oy * g.wo..(oy + 1) * g.wo];
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let d0 = ox_lo * g.stride + kx - g.pad;
                    for (dv, &sv) in drow[d0..].iter_mut().step_by(g.stride).zip(&srow[ox_lo..ox_hi]) {
                        *dv += sv;
                    }
                }
            }
        }
    }
}

fn depthwise_forward(g: &ConvGeom, x: &[f32], k: &[f32], y: &mut [f32]) {
    let (hw, hw_o, kk) = (g.h * g.w, g.ho * g.wo, g.kh * g.kw);
    for nc in 0..g.n * g.cin {
        let c = nc % g.cin;
        let src = &x[nc * hw..(nc + 1) * hw];
        let dst = &mut y[nc * hw_o..(nc + 1) * hw_o];
        let kern = &k[c * kk..(c + 1) * kk];
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = valid_range(ky, g.pad, g.stride, g.h, g.ho);
            for kx in 0..g.kw {
                let wv = kern[ky * g.kw + kx];
                let (ox_lo, ox_hi) = valid_range(kx, g.pad, g.stride, g.w, g.wo);
                if ox_lo >= ox_hi {
                    continue;
                }
                let s = ox_lo * g.stride + kx - g.pad;
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ky - g.pad;
                    let srow = &src[iy * g.w + s..(iy + 1) * g.w];
                    let drow = &mut dst[oy * g.wo + ox_lo..oy * g.wo + ox_hi];
                    if g.stride == 1 {
                        for (d, &v) in drow.iter_mut().zip(srow) {
                            *d += wv * v;
                        }
                    } else {
                        for (d, &v) in drow.iter_mut().zip(srow.iter().step_by(g.stride)) {
                            *d += wv * v;
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward(g: &ConvGeom, x: &[f32], k: &[f32], gy: &[f32], gx: &mut [f32], gk: &mut [f32]) {
    let (hw, hw_o, kk) = (g.h * g.w, g.ho * g.wo, g.kh * g.kw);
    for nc in 0..g.n * g.cin {
        let c = nc % g.cin;
        let src = &x[nc * hw..(nc + 1) * hw];
        let gsrc = &mut gx[nc * hw..(nc + 1) * hw];
        let gdst = &gy[nc * hw_o..(nc + 1) * hw_o];
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = valid_range(ky, g.pad, g.stride, g.h, g.ho);
            for kx in 0..g.kw {
                let wv = k[c * kk + ky * g.kw + kx];
                let (ox_lo, ox_hi) = valid_range(kx, g.pad, g.stride, g.w, g.wo);
                if ox_lo >= ox_hi {
                    continue;
                }
                let s = ox_lo * g.stride + kx - g.pad;
                let mut acc = 0.0f32;
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ky - g.pad;
                    let grow = &gdst[oy * g.wo + ox_lo..oy * g.wo + ox_hi];
                    let srow = &src[iy * g.w + s..(iy + 1) * g.w];
                    let gsrow = &mut gsrc[iy * g.w + s..(iy + 1) * g.w];
                    if g.stride == 1 {
                        for ((&gv, &xv), gxv) in grow.iter().zip(srow).zip(gsrow.iter_mut()) {
                            acc += gv * xv;
                            *gxv += wv * gv;
                        }
                    } else {
                        for ((&gv, &xv), gxv) in grow
                            .iter()
                            .zip(srow.iter().step_by(g.stride))
                            .zip(gsrow.iter_mut().step_by(g.stride))
                        {
                            acc += gv * xv;
                            *gxv += wv * gv;
                        }
                    }
                }
                gk[c * kk + ky * g.kw + kx] += acc;
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &Tensor, k: &Tensor, p: ConvParams) -> Result<(Tensor, ConvGeom)> {
    let g = geometry(x, k, p)?;
    let mut y = vec![0.0f32; g.n * g.cout * g.ho * g.wo];
    if g.depthwise() {
        depthwise_forward(&g, x.data(), k.data(), &mut y);
    } else {
        let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
        let hw_o = g.ho * g.wo;
        let kdim = cin_g * g.kh * g.kw;
        let mut col = if g.pointwise() {
            Vec::new()
        } else {
            vec![0.0f32; kdim * hw_o]
        };
        for n in 0..g.n {
            for grp in 0..g.groups {
                let in_off = (n * g.cin + grp * cin_g) * g.h * g.w;
                let plane = &x.data()[in_off..in_off + cin_g * g.h * g.w];
                let b: &[f32] = if g.pointwise() {
                    plane
                } else {
                    im2col(&g, plane, &mut col);
                    &col
                };
                let wk = &k.data()[grp * cout_g * kdim..(grp + 1) * cout_g * kdim];
                let out_off = (n * g.cout + grp * cout_g) * hw_o;
                gemm(
                    cout_g,
                    kdim,
                    hw_o,
                    wk,
                    false,
                    b,
                    false,
                    &mut y[out_off..out_off + cout_g * hw_o],
                    0.0,
                );
            }
        }
    }
    Ok((
        Tensor::from_parts(vec![g.n, g.cout, g.ho, g.wo], y),
        g,
    ))
}

/// Returns `(grad_input, grad_kernel)`; the input gradient is empty unless
/// `want_gx`.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    k: &Tensor,
    p: ConvParams,
    gy: &[f32],
    want_gx: bool,
) -> Result<(Vec<f32>, Vec<f32>)> {
    let g = geometry(x, k, p)?;
    let mut gx = vec![0.0f32; if want_gx || g.depthwise() { x.numel() } else { 0 }];
    let mut gk = vec![0.0f32; k.numel()];
    if g.depthwise() {
        depthwise_backward(&g, x.data(), k.data(), gy, &mut gx, &mut gk);
        return Ok((gx, gk));
    }
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let hw_o = g.ho * g.wo;
    let hw = g.h * g.w;
    let kdim = cin_g * g.kh * g.kw;
    let mut col = if g.pointwise() {
        Vec::new()
    } else {
        vec![0.0f32; kdim * hw_o]
    };
    let mut gcol = vec![0.0f32; if want_gx { kdim * hw_o } else { 0 }];
    for n in 0..g.n {
        for grp in 0..g.groups {
            let in_off = (n * g.cin + grp * cin_g) * hw;
            let out_off = (n * g.cout + grp * cout_g) * hw_o;
            let gyb = &gy[out_off..out_off + cout_g * hw_o];
            let wk = &k.data()[grp * cout_g * kdim..(grp + 1) * cout_g * kdim];
            let plane = &x.data()[in_off..in_off + cin_g * hw];
            let b: &[f32] = if g.pointwise() {
                plane
            } else {
                im2col(&g, plane, &mut col);
                &col
            };
            // dK += dY · colᵀ
            gemm(
                cout_g,
                hw_o,
                kdim,
                gyb,
                false,
                b,
                true,
                &mut gk[grp * cout_g * kdim..(grp + 1) * cout_g * kdim],
                1.0,
            );
            // dcol = Kᵀ · dY
            if !want_gx {
                continue;
            }
            if g.pointwise() {
                gemm(
                    kdim,
                    cout_g,
                    hw_o,
                    wk,
                    true,
                    gyb,
                    false,
                    &mut gx[in_off..in_off + cin_g * hw],
                    1.0,
                );
            } else {
                gemm(kdim, cout_g, hw_o, wk, true, gyb, false, &mut gcol, 0.0);
                col2im(&g, &gcol, &mut gx[in_off..in_off + cin_g * hw]);
            }
        }
    }
    Ok((gx, gk))
}
