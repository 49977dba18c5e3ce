//! Forward and backward kernels on plain tensors. The tape in
//! [`super::Tape`] records these; they are also usable directly.
//!
//! Convolutions lower to `im2col` + GEMM. The modulated deformable
//! convolution replaces the `im2col` gather by a bilinear gather at
//! `base + offset`, scaled by the modulation mask.

use super::Tensor;
use crate::error::{shape_err, Result};

/// Row-major `C = op(A) * op(B) + beta * C` where `op(A)` is `m x k` and
/// `op(B)` is `k x n`. `a_t` / `b_t` mean the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths checked above cover every index the strides reach.
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

/// Output length of a convolution along one axis.
pub fn conv_out_len(size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(shape_err!("stride must be positive"));
    }
    if size + 2 * pad < k {
        return Err(shape_err!("kernel {k} larger than padded input {}", size + 2 * pad));
    }
    Ok((size + 2 * pad - k) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        let [n, cin, h, w] = x.dims4()?;
        let [cout, wcin, kh, kw] = weight.dims4()?;
        if wcin != cin {
            return Err(shape_err!("weight expects {wcin} input channels, input has {cin}"));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(shape_err!("kernel must be square and odd, got {kh}x{kw}"));
        }
        let ho = conv_out_len(h, kh, stride, pad)?;
        let wo = conv_out_len(w, kw, stride, pad)?;
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            k: kh,
            stride,
            pad,
            ho,
            wo,
        })
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn pixels(&self) -> usize {
        self.ho * self.wo
    }

    fn taps(&self) -> usize {
        self.k * self.k
    }
}

fn check_bias(bias: Option<&Tensor>, cout: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(shape_err!("bias shape {:?}, expected [{cout}]", b.shape()));
        }
    }
    Ok(())
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let p = g.pixels();
    let (k, s, pad) = (g.k, g.stride as isize, g.pad as isize);
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = oy as isize * s + ky as isize - pad;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = ox as isize * s + kx as isize - pad;
                        *o = if ix >= 0 && ix < g.w as isize {
                            src[ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let p = g.pixels();
    let (k, s, pad) = (g.k, g.stride as isize, g.pad as isize);
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = oy as isize * s + ky as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = ox as isize * s + kx as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn add_bias(out: &mut [f64], bias: Option<&Tensor>, cout: usize, p: usize) {
    if let Some(b) = bias {
        for (o, &bv) in out.chunks_mut(p).take(cout).zip(b.data()) {
            for v in o {
                *v += bv;
            }
        }
    }
}

/// Cross-correlation with zero padding: `weight` is `(C_out, C_in, K, K)`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    let g = ConvGeom::new(x, weight, stride, pad)?;
    check_bias(bias, g.cout)?;
    let p = g.pixels();
    let mut out = vec![0.0; g.n * g.cout * p];
    let mut cols = vec![0.0; g.rows() * p];
    let in_stride = g.cin * g.h * g.w;
    for b in 0..g.n {
        im2col(&x.data()[b * in_stride..(b + 1) * in_stride], &g, &mut cols);
        let o = &mut out[b * g.cout * p..(b + 1) * g.cout * p];
        gemm(g.cout, g.rows(), p, weight.data(), false, &cols, false, o, 0.0);
        add_bias(o, bias, g.cout, p);
    }
    Tensor::new(&[g.n, g.cout, g.ho, g.wo], out)
}

#[derive(Debug, Default)]
pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

#[derive(Clone, Copy, Debug)]
pub struct Needs {
    pub input: bool,
    pub weight: bool,
    pub bias: bool,
}

pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
    needs: Needs,
) -> Result<ConvGrads> {
    let g = ConvGeom::new(x, weight, stride, pad)?;
    if grad_out.shape() != [g.n, g.cout, g.ho, g.wo] {
        return Err(shape_err!("conv grad shape {:?}", grad_out.shape()));
    }
    let p = g.pixels();
    let in_stride = g.cin * g.h * g.w;
    let mut dx = needs.input.then(|| vec![0.0; x.len()]);
    let mut dw = needs.weight.then(|| vec![0.0; weight.len()]);
    let mut db = needs.bias.then(|| vec![0.0; g.cout]);
    let mut cols = vec![0.0; g.rows() * p];
    for b in 0..g.n {
        let go = &grad_out.data()[b * g.cout * p..(b + 1) * g.cout * p];
        if let Some(dw) = dw.as_mut() {
            im2col(&x.data()[b * in_stride..(b + 1) * in_stride], &g, &mut cols);
            // dW += dOut (cout x P) * cols^T (P x rows)
            gemm(g.cout, p, g.rows(), go, false, &cols, true, dw, 1.0);
        }
        if let Some(db) = db.as_mut() {
            for (d, row) in db.iter_mut().zip(go.chunks(p)) {
                *d += row.iter().sum::<f64>();
            }
        }
        if let Some(dx) = dx.as_mut() {
            // dcols = W^T (rows x cout) * dOut (cout x P)
            gemm(g.rows(), g.cout, p, weight.data(), true, go, false, &mut cols, 0.0);
            col2im(&cols, &g, &mut dx[b * in_stride..(b + 1) * in_stride]);
        }
    }
    Ok(ConvGrads {
        input: dx.map(|d| Tensor::new(x.shape(), d)).transpose()?,
        weight: dw.map(|d| Tensor::new(weight.shape(), d)).transpose()?,
        bias: db.map(|d| Tensor::new(&[g.cout], d)).transpose()?,
    })
}

/// Four-neighbour bilinear sample at fractional `(y, x)` with zero outside
/// the `height x width` support.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BilinearTaps {
    /// Flat indices of the (y0,x0), (y0,x1), (y1,x0), (y1,x1) neighbours;
    /// `None` when outside the support.
    pub index: [Option<usize>; 4],
    pub weight: [f64; 4],
    ly: f64,
    lx: f64,
}

impl BilinearTaps {
    pub fn new(height: usize, width: usize, y: f64, x: f64) -> Self {
        let y0f = y.floor();
        let x0f = x.floor();
        let ly = y - y0f;
        let lx = x - x0f;
        let (h, w) = (height as i64, width as i64);
        let at = |yy: f64, xx: f64| -> Option<usize> {
            // Coordinates far outside the image saturate safely here.
            let (yy, xx) = (yy as i64, xx as i64);
            (yy >= 0 && yy < h && xx >= 0 && xx < w).then(|| (yy * w + xx) as usize)
        };
        Self {
            index: [
                at(y0f, x0f),
                at(y0f, x0f + 1.0),
                at(y0f + 1.0, x0f),
                at(y0f + 1.0, x0f + 1.0),
            ],
            weight: [(1.0 - ly) * (1.0 - lx), (1.0 - ly) * lx, ly * (1.0 - lx), ly * lx],
            ly,
            lx,
        }
    }

    fn values(&self, plane: &[f64]) -> [f64; 4] {
        self.index.map(|i| i.map_or(0.0, |i| plane[i]))
    }

    pub fn sample(&self, plane: &[f64]) -> f64 {
        let v = self.values(plane);
        self.weight[0] * v[0] + self.weight[1] * v[1] + self.weight[2] * v[2] + self.weight[3] * v[3]
    }

    /// `(value, d value / dy, d value / dx)`. At integer coordinates the
    /// derivative is the one-sided (right) derivative.
    pub fn sample_with_grad(&self, plane: &[f64]) -> (f64, f64, f64) {
        let v = self.values(plane);
        let value = self.weight[0] * v[0] + self.weight[1] * v[1] + self.weight[2] * v[2] + self.weight[3] * v[3];
        let dy = (1.0 - self.lx) * (v[2] - v[0]) + self.lx * (v[3] - v[1]);
        let dx = (1.0 - self.ly) * (v[1] - v[0]) + self.ly * (v[3] - v[2]);
        (value, dy, dx)
    }
}

/// Samples a `height x width` plane at fractional column `x` and row `y`.
pub fn bilinear_sample(plane: &[f64], width: usize, height: usize, x: f64, y: f64) -> f64 {
    BilinearTaps::new(height, width, y, x).sample(plane)
}

/// Value and analytic gradient `(value, d/dx, d/dy)` of [`bilinear_sample`].
pub fn bilinear_sample_grad(plane: &[f64], width: usize, height: usize, x: f64, y: f64) -> (f64, f64, f64) {
    let (v, dy, dx) = BilinearTaps::new(height, width, y, x).sample_with_grad(plane);
    (v, dx, dy)
}

/// Shapes for [`modulated_deform_conv2d`].
#[derive(Clone, Copy, Debug)]
pub struct DeformGeom {
    pub conv: ConvGeom,
}

impl DeformGeom {
    pub fn new(
        x: &Tensor,
        offsets: &Tensor,
        mask: &Tensor,
        weight: &Tensor,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let conv = ConvGeom::new(x, weight, stride, pad)?;
        let kk = conv.taps();
        let want_off = [conv.n, 2 * kk, conv.ho, conv.wo];
        let want_mask = [conv.n, kk, conv.ho, conv.wo];
        if offsets.shape() != want_off {
            return Err(shape_err!("offsets shape {:?}, expected {want_off:?}", offsets.shape()));
        }
        if mask.shape() != want_mask {
            return Err(shape_err!("mask shape {:?}, expected {want_mask:?}", mask.shape()));
        }
        Ok(Self { conv })
    }

    /// Sampling position of tap `k` for output pixel `(oy, ox)`.
    fn position(&self, k: usize, oy: usize, ox: usize, dy: f64, dx: f64) -> (f64, f64) {
        let g = &self.conv;
        let ky = k / g.k;
        let kx = k % g.k;
        let y = (oy * g.stride + ky) as f64 - g.pad as f64 + dy;
        let x = (ox * g.stride + kx) as f64 - g.pad as f64 + dx;
        (y, x)
    }
}

fn deform_im2col(x: &[f64], off: &[f64], mask: &[f64], dg: &DeformGeom, cols: &mut [f64]) {
    let g = &dg.conv;
    let p = g.pixels();
    let kk = g.taps();
    let hw = g.h * g.w;
    for k in 0..kk {
        let dys = &off[2 * k * p..(2 * k + 1) * p];
        let dxs = &off[(2 * k + 1) * p..(2 * k + 2) * p];
        let ms = &mask[k * p..(k + 1) * p];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let pix = oy * g.wo + ox;
                let (y, xx) = dg.position(k, oy, ox, dys[pix], dxs[pix]);
                let taps = BilinearTaps::new(g.h, g.w, y, xx);
                let m = ms[pix];
                for c in 0..g.cin {
                    cols[(c * kk + k) * p + pix] = m * taps.sample(&x[c * hw..(c + 1) * hw]);
                }
            }
        }
    }
}

/// Modulated deformable convolution:
/// `out(p) = sum_k w_k * x(p + p_k + offset_k(p)) * mask_k(p) + bias`.
///
/// `offsets` is `(N, 2*K*K, H_out, W_out)` laid out as
/// `(dy_1, dx_1, ..., dy_KK, dx_KK)`; `mask` is `(N, K*K, H_out, W_out)`.
/// Taps are enumerated row-major over the kernel window.
pub fn modulated_deform_conv2d(
    x: &Tensor,
    offsets: &Tensor,
    mask: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let dg = DeformGeom::new(x, offsets, mask, weight, stride, pad)?;
    let g = dg.conv;
    check_bias(bias, g.cout)?;
    let p = g.pixels();
    let kk = g.taps();
    let mut out = vec![0.0; g.n * g.cout * p];
    let mut cols = vec![0.0; g.rows() * p];
    let in_stride = g.cin * g.h * g.w;
    for b in 0..g.n {
        deform_im2col(
            &x.data()[b * in_stride..(b + 1) * in_stride],
            &offsets.data()[b * 2 * kk * p..(b + 1) * 2 * kk * p],
            &mask.data()[b * kk * p..(b + 1) * kk * p],
            &dg,
            &mut cols,
        );
        let o = &mut out[b * g.cout * p..(b + 1) * g.cout * p];
        gemm(g.cout, g.rows(), p, weight.data(), false, &cols, false, o, 0.0);
        add_bias(o, bias, g.cout, p);
    }
    Tensor::new(&[g.n, g.cout, g.ho, g.wo], out)
}

#[derive(Debug, Default)]
pub struct DeformGrads {
    pub input: Option<Tensor>,
    pub offsets: Option<Tensor>,
    pub mask: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

#[derive(Clone, Copy, Debug)]
pub struct DeformNeeds {
    pub input: bool,
    pub offsets: bool,
    pub mask: bool,
    pub weight: bool,
    pub bias: bool,
}

#[allow(clippy::too_many_arguments)]
pub fn modulated_deform_conv2d_backward(
    x: &Tensor,
    offsets: &Tensor,
    mask: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
    needs: DeformNeeds,
) -> Result<DeformGrads> {
    let dg = DeformGeom::new(x, offsets, mask, weight, stride, pad)?;
    let g = dg.conv;
    if grad_out.shape() != [g.n, g.cout, g.ho, g.wo] {
        return Err(shape_err!("deform conv grad shape {:?}", grad_out.shape()));
    }
    let p = g.pixels();
    let kk = g.taps();
    let hw = g.h * g.w;
    let in_stride = g.cin * hw;
    let mut dx = needs.input.then(|| vec![0.0; x.len()]);
    let mut doff = needs.offsets.then(|| vec![0.0; offsets.len()]);
    let mut dmask = needs.mask.then(|| vec![0.0; mask.len()]);
    let mut dw = needs.weight.then(|| vec![0.0; weight.len()]);
    let mut db = needs.bias.then(|| vec![0.0; g.cout]);
    let mut cols = vec![0.0; g.rows() * p];
    let need_sampling_grads = needs.input || needs.offsets || needs.mask;

    for b in 0..g.n {
        let xb = &x.data()[b * in_stride..(b + 1) * in_stride];
        let ob = &offsets.data()[b * 2 * kk * p..(b + 1) * 2 * kk * p];
        let mb = &mask.data()[b * kk * p..(b + 1) * kk * p];
        let go = &grad_out.data()[b * g.cout * p..(b + 1) * g.cout * p];
        if let Some(dw) = dw.as_mut() {
            deform_im2col(xb, ob, mb, &dg, &mut cols);
            gemm(g.cout, p, g.rows(), go, false, &cols, true, dw, 1.0);
        }
        if let Some(db) = db.as_mut() {
            for (d, row) in db.iter_mut().zip(go.chunks(p)) {
                *d += row.iter().sum::<f64>();
            }
        }
        if !need_sampling_grads {
            continue;
        }
        gemm(g.rows(), g.cout, p, weight.data(), true, go, false, &mut cols, 0.0);
        for k in 0..kk {
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let pix = oy * g.wo + ox;
                    let dy_in = ob[2 * k * p + pix];
                    let dx_in = ob[(2 * k + 1) * p + pix];
                    let (y, xx) = dg.position(k, oy, ox, dy_in, dx_in);
                    let taps = BilinearTaps::new(g.h, g.w, y, xx);
                    let m = mb[k * p + pix];
                    let (mut gm, mut gy, mut gx) = (0.0, 0.0, 0.0);
                    for c in 0..g.cin {
                        let gc = cols[(c * kk + k) * p + pix];
                        let plane = &xb[c * hw..(c + 1) * hw];
                        let (v, vdy, vdx) = taps.sample_with_grad(plane);
                        gm += gc * v;
                        gy += gc * m * vdy;
                        gx += gc * m * vdx;
                        if let Some(dx) = dx.as_mut() {
                            let dplane = &mut dx[b * in_stride + c * hw..b * in_stride + (c + 1) * hw];
                            for (idx, wt) in taps.index.iter().zip(taps.weight) {
                                if let Some(i) = idx {
                                    dplane[*i] += gc * m * wt;
                                }
                            }
                        }
                    }
                    if let Some(dm) = dmask.as_mut() {
                        dm[b * kk * p + k * p + pix] += gm;
                    }
                    if let Some(d) = doff.as_mut() {
                        d[b * 2 * kk * p + 2 * k * p + pix] += gy;
                        d[b * 2 * kk * p + (2 * k + 1) * p + pix] += gx;
                    }
                }
            }
        }
    }
    Ok(DeformGrads {
        input: dx.map(|d| Tensor::new(x.shape(), d)).transpose()?,
        offsets: doff.map(|d| Tensor::new(offsets.shape(), d)).transpose()?,
        mask: dmask.map(|d| Tensor::new(mask.shape(), d)).transpose()?,
        weight: dw.map(|d| Tensor::new(weight.shape(), d)).transpose()?,
        bias: db.map(|d| Tensor::new(&[g.cout], d)).transpose()?,
    })
}

/// Samples every channel of `x` at per-pixel coordinates. `coords` is
/// `(N, 2, H_out, W_out)` with channel 0 the row and channel 1 the column.
pub fn grid_sample(x: &Tensor, coords: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4()?;
    let [cn, two, ho, wo] = coords.dims4()?;
    if cn != n || two != 2 {
        return Err(shape_err!(
            "coords shape {:?} for input {:?}",
            coords.shape(),
            x.shape()
        ));
    }
    let p = ho * wo;
    let mut out = vec![0.0; n * c * p];
    for b in 0..n {
        let cb = &coords.data()[b * 2 * p..(b + 1) * 2 * p];
        for pix in 0..p {
            let taps = BilinearTaps::new(h, w, cb[pix], cb[p + pix]);
            for ch in 0..c {
                let plane = &x.data()[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                out[(b * c + ch) * p + pix] = taps.sample(plane);
            }
        }
    }
    Tensor::new(&[n, c, ho, wo], out)
}

pub fn grid_sample_backward(x: &Tensor, coords: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
    let [n, c, h, w] = x.dims4()?;
    let [_, _, ho, wo] = coords.dims4()?;
    let p = ho * wo;
    let mut dx = vec![0.0; x.len()];
    let mut dc = vec![0.0; coords.len()];
    for b in 0..n {
        let cb = &coords.data()[b * 2 * p..(b + 1) * 2 * p];
        for pix in 0..p {
            let taps = BilinearTaps::new(h, w, cb[pix], cb[p + pix]);
            let (mut gy, mut gx) = (0.0, 0.0);
            for ch in 0..c {
                let base = (b * c + ch) * h * w;
                let g = grad_out.data()[(b * c + ch) * p + pix];
                let (_, vdy, vdx) = taps.sample_with_grad(&x.data()[base..base + h * w]);
                gy += g * vdy;
                gx += g * vdx;
                for (idx, wt) in taps.index.iter().zip(taps.weight) {
                    if let Some(i) = idx {
                        dx[base + i] += g * wt;
                    }
                }
            }
            dc[b * 2 * p + pix] += gy;
            dc[b * 2 * p + p + pix] += gx;
        }
    }
    Ok((Tensor::new(x.shape(), dx)?, Tensor::new(coords.shape(), dc)?))
}

/// 2x2 average pooling; spatial dims must be even.
pub fn avgpool2(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err!("avgpool2 needs even spatial dims, got {h}x{w}"));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; n * c * ho * wo];
    for (plane, o) in x.data().chunks(h * w).zip(out.chunks_mut(ho * wo)) {
        for y in 0..ho {
            let r0 = &plane[2 * y * w..(2 * y + 1) * w];
            let r1 = &plane[(2 * y + 1) * w..(2 * y + 2) * w];
            for xx in 0..wo {
                o[y * wo + xx] = 0.25 * (r0[2 * xx] + r0[2 * xx + 1] + r1[2 * xx] + r1[2 * xx + 1]);
            }
        }
    }
    Tensor::new(&[n, c, ho, wo], out)
}

pub fn avgpool2_backward(grad_out: &Tensor) -> Result<Tensor> {
    let [n, c, ho, wo] = grad_out.dims4()?;
    let (h, w) = (2 * ho, 2 * wo);
    let mut dx = vec![0.0; n * c * h * w];
    for (g, d) in grad_out.data().chunks(ho * wo).zip(dx.chunks_mut(h * w)) {
        for y in 0..h {
            for x in 0..w {
                d[y * w + x] = 0.25 * g[(y / 2) * wo + x / 2];
            }
        }
    }
    Tensor::new(&[n, c, h, w], dx)
}

/// Source indices and weights for factor-2 bilinear upsampling with
/// half-pixel centers: output `i` samples input `(i + 0.5) / 2 - 0.5`,
/// clamped to the valid range.
fn upsample_taps(len: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * len)
        .map(|i| {
            let src = ((i as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn upsample_bilinear2(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4()?;
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![0.0; n * c * ho * wo];
    for (plane, o) in x.data().chunks(h * w).zip(out.chunks_mut(ho * wo)) {
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let top = (1.0 - lx) * plane[y0 * w + x0] + lx * plane[y0 * w + x1];
                let bot = (1.0 - lx) * plane[y1 * w + x0] + lx * plane[y1 * w + x1];
                o[oy * wo + ox] = (1.0 - ly) * top + ly * bot;
            }
        }
    }
    Tensor::new(&[n, c, ho, wo], out)
}

pub fn upsample_bilinear2_backward(grad_out: &Tensor) -> Result<Tensor> {
    let [n, c, ho, wo] = grad_out.dims4()?;
    let (h, w) = (ho / 2, wo / 2);
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let mut dx = vec![0.0; n * c * h * w];
    for (g, d) in grad_out.data().chunks(ho * wo).zip(dx.chunks_mut(h * w)) {
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let gv = g[oy * wo + ox];
                d[y0 * w + x0] += gv * (1.0 - ly) * (1.0 - lx);
                d[y0 * w + x1] += gv * (1.0 - ly) * lx;
                d[y1 * w + x0] += gv * ly * (1.0 - lx);
                d[y1 * w + x1] += gv * ly * lx;
            }
        }
    }
    Tensor::new(&[n, c, h, w], dx)
}

pub fn concat_channels(xs: &[&Tensor]) -> Result<Tensor> {
    let first = xs.first().ok_or_else(|| shape_err!("concat of zero tensors"))?;
    let [n, _, h, w] = first.dims4()?;
    let mut total = 0;
    for t in xs {
        let [tn, tc, th, tw] = t.dims4()?;
        if (tn, th, tw) != (n, h, w) {
            return Err(shape_err!("concat_channels: {:?} vs {:?}", first.shape(), t.shape()));
        }
        total += tc;
    }
    let mut out = Vec::with_capacity(n * total * h * w);
    for b in 0..n {
        for t in xs {
            let c = t.shape()[1];
            out.extend_from_slice(&t.data()[b * c * h * w..(b + 1) * c * h * w]);
        }
    }
    Tensor::new(&[n, total, h, w], out)
}

pub fn slice_channels(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4()?;
    if start + len > c {
        return Err(shape_err!("channel slice {start}..{} of {c}", start + len));
    }
    let mut out = Vec::with_capacity(n * len * h * w);
    for b in 0..n {
        out.extend_from_slice(&x.data()[(b * c + start) * h * w..(b * c + start + len) * h * w]);
    }
    Tensor::new(&[n, len, h, w], out)
}

/// Unit-normalizes the channel vector at every `(n, y, x)`:
/// `x / sqrt(sum_c x^2 + eps)`.
pub fn normalize_channels(x: &Tensor, eps: f64) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4()?;
    let hw = h * w;
    let mut out = x.data().to_vec();
    for b in 0..n {
        let base = b * c * hw;
        for i in 0..hw {
            let ss: f64 = (0..c).map(|ch| x.data()[base + ch * hw + i].powi(2)).sum();
            let inv = 1.0 / (ss + eps).sqrt();
            for ch in 0..c {
                out[base + ch * hw + i] *= inv;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

pub fn normalize_channels_backward(x: &Tensor, y: &Tensor, g: &Tensor, eps: f64) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4()?;
    let hw = h * w;
    let mut dx = vec![0.0; x.len()];
    for b in 0..n {
        let base = b * c * hw;
        for i in 0..hw {
            let ss: f64 = (0..c).map(|ch| x.data()[base + ch * hw + i].powi(2)).sum();
            let inv = 1.0 / (ss + eps).sqrt();
            let dot: f64 = (0..c)
                .map(|ch| g.data()[base + ch * hw + i] * y.data()[base + ch * hw + i])
                .sum();
            for ch in 0..c {
                let j = base + ch * hw + i;
                dx[j] = (g.data()[j] - y.data()[j] * dot) * inv;
            }
        }
    }
    Tensor::new(x.shape(), dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Direct quadruple loop over output pixels, channels and taps.
    fn naive_conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
        let [n, cin, h, wd] = x.dims4().unwrap();
        let [cout, _, k, _] = w.dims4().unwrap();
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(&[n, cout, ho, wo]);
        for bi in 0..n {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b.map_or(0.0, |b| b.data()[co]);
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += w.data()[((co * cin + ci) * k + ky) * k + kx]
                                        * x.data()[((bi * cin + ci) * h + iy as usize) * wd + ix as usize];
                                }
                            }
                        }
                        out.data_mut()[((bi * cout + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_is_identity() {
        let x = Tensor::uniform(&[1, 3, 4, 5], -1.0, 1.0, &mut rng(1));
        let mut w = Tensor::zeros(&[3, 3, 1, 1]);
        for c in 0..3 {
            w.data_mut()[c * 3 + c] = 1.0;
        }
        assert_eq!(conv2d(&x, &w, None, 1, 0).unwrap(), x);
    }

    #[test]
    fn ones_kernel_box_sums_interior() {
        let x = Tensor::full(&[1, 1, 5, 5], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, None, 1, 1).unwrap();
        for yy in 1..4 {
            for xx in 1..4 {
                assert_eq!(y.data()[yy * 5 + xx], 9.0);
            }
        }
        assert_eq!(y.data()[0], 4.0);
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let mut r = rng(2);
        let x = Tensor::uniform(&[1, 2, 5, 5], -1.0, 1.0, &mut r);
        let w = Tensor::uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut r);
        let b = Tensor::uniform(&[3], -1.0, 1.0, &mut r);
        for (stride, pad) in [(1, 1), (1, 0), (2, 1)] {
            let fast = conv2d(&x, &w, Some(&b), stride, pad).unwrap();
            let slow = naive_conv(&x, &w, Some(&b), stride, pad);
            assert!(fast.max_abs_diff(&slow).unwrap() < 1e-12);
        }
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let x = Tensor::zeros(&[1, 2, 5, 5]);
        assert!(conv2d(&x, &Tensor::zeros(&[1, 3, 3, 3]), None, 1, 1).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[1, 2, 2, 2]), None, 1, 1).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[1, 2, 3, 3]), Some(&Tensor::zeros(&[2])), 1, 1).is_err());
    }

    #[test]
    fn bilinear_integer_and_midpoint() {
        let plane = [0.0, 0.0, 1.0, 1.0];
        assert_eq!(bilinear_sample(&plane, 2, 2, 0.0, 1.0), 1.0);
        assert_eq!(bilinear_sample(&plane, 2, 2, 1.0, 0.0), 0.0);
        assert!((bilinear_sample(&plane, 2, 2, 0.5, 0.5) - 0.5).abs() < 1e-15);
        assert_eq!(bilinear_sample(&plane, 2, 2, -1.5, 0.5), 0.0);
        assert_eq!(bilinear_sample(&plane, 2, 2, 0.5, 7.0), 0.0);
    }

    #[test]
    fn bilinear_matches_closed_form_expansion() {
        let mut r = rng(3);
        let t = Tensor::uniform(&[1, 1, 4, 4], -1.0, 1.0, &mut r);
        let p = t.data();
        let (x, y) = (1.37, 2.81);
        let (fx, fy) = (0.37, 0.81);
        let v00 = p[2 * 4 + 1];
        let v01 = p[2 * 4 + 2];
        let v10 = p[3 * 4 + 1];
        let v11 = p[3 * 4 + 2];
        let w00 = (1.0 - fy) * (1.0 - fx);
        let w01 = (1.0 - fy) * fx;
        let w10 = fy * (1.0 - fx);
        let w11 = fy * fx;
        let expect = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11;
        assert!((bilinear_sample(p, 4, 4, x, y) - expect).abs() < 1e-12);
        let (_, gx, gy) = bilinear_sample_grad(p, 4, 4, x, y);
        assert!((gx - ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10))).abs() < 1e-12);
        assert!((gy - ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01))).abs() < 1e-12);
    }

    /// Loops pixels and taps, interpolating each sample by hand.
    fn naive_deform(x: &Tensor, off: &Tensor, mask: &Tensor, w: &Tensor, pad: usize) -> Tensor {
        let [_, cin, h, wd] = x.dims4().unwrap();
        let [cout, _, k, _] = w.dims4().unwrap();
        let [_, _, ho, wo] = mask.dims4().unwrap();
        let px = |c: usize, yy: i64, xx: i64| -> f64 {
            if yy < 0 || xx < 0 || yy >= h as i64 || xx >= wd as i64 {
                0.0
            } else {
                x.data()[(c * h + yy as usize) * wd + xx as usize]
            }
        };
        let mut out = Tensor::zeros(&[1, cout, ho, wo]);
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ky in 0..k {
                        for kx in 0..k {
                            let t = ky * k + kx;
                            let dy = off.data()[(2 * t) * ho * wo + oy * wo + ox];
                            let dx = off.data()[(2 * t + 1) * ho * wo + oy * wo + ox];
                            let m = mask.data()[t * ho * wo + oy * wo + ox];
                            let sy = oy as f64 + ky as f64 - pad as f64 + dy;
                            let sx = ox as f64 + kx as f64 - pad as f64 + dx;
                            let (y0, x0) = (sy.floor(), sx.floor());
                            let (fy, fx) = (sy - y0, sx - x0);
                            let (y0, x0) = (y0 as i64, x0 as i64);
                            for ci in 0..cin {
                                let v = (1.0 - fy) * (1.0 - fx) * px(ci, y0, x0)
                                    + (1.0 - fy) * fx * px(ci, y0, x0 + 1)
                                    + fy * (1.0 - fx) * px(ci, y0 + 1, x0)
                                    + fy * fx * px(ci, y0 + 1, x0 + 1);
                                acc += w.data()[((co * cin + ci) * k + ky) * k + kx] * v * m;
                            }
                        }
                    }
                    out.data_mut()[(co * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn deform_matches_naive_oracle() {
        let mut r = rng(4);
        let x = Tensor::uniform(&[1, 1, 6, 6], -1.0, 1.0, &mut r);
        let w = Tensor::uniform(&[2, 1, 3, 3], -1.0, 1.0, &mut r);
        let off = Tensor::uniform(&[1, 18, 6, 6], -1.7, 1.7, &mut r);
        let mask = Tensor::uniform(&[1, 9, 6, 6], 0.0, 1.0, &mut r);
        let fast = modulated_deform_conv2d(&x, &off, &mask, &w, None, 1, 1).unwrap();
        let slow = naive_deform(&x, &off, &mask, &w, 1);
        assert!(fast.max_abs_diff(&slow).unwrap() < 1e-12);
    }

    #[test]
    fn deform_with_zero_offsets_unit_mask_is_conv() {
        let mut r = rng(5);
        let x = Tensor::uniform(&[2, 3, 7, 6], -1.0, 1.0, &mut r);
        let w = Tensor::uniform(&[4, 3, 3, 3], -1.0, 1.0, &mut r);
        let b = Tensor::uniform(&[4], -1.0, 1.0, &mut r);
        let off = Tensor::zeros(&[2, 18, 7, 6]);
        let mask = Tensor::full(&[2, 9, 7, 6], 1.0);
        let d = modulated_deform_conv2d(&x, &off, &mask, &w, Some(&b), 1, 1).unwrap();
        let c = conv2d(&x, &w, Some(&b), 1, 1).unwrap();
        assert!(d.max_abs_diff(&c).unwrap() < 1e-9);
    }

    #[test]
    fn deform_degeneracy_over_random_configurations() {
        use rand::Rng;
        for seed in 0..20 {
            let mut r = rng(100 + seed);
            let n = r.gen_range(1..3);
            let cin = r.gen_range(1..4);
            let cout = r.gen_range(1..4);
            let k = [1, 3, 5][r.gen_range(0..3)];
            let h = r.gen_range(k..k + 6);
            let w = r.gen_range(k..k + 6);
            let stride = r.gen_range(1..3);
            let pad = r.gen_range(0..=k / 2);
            let x = Tensor::uniform(&[n, cin, h, w], -1.0, 1.0, &mut r);
            let wt = Tensor::uniform(&[cout, cin, k, k], -1.0, 1.0, &mut r);
            let c = conv2d(&x, &wt, None, stride, pad).unwrap();
            let [_, _, ho, wo] = c.dims4().unwrap();
            let off = Tensor::zeros(&[n, 2 * k * k, ho, wo]);
            let mask = Tensor::full(&[n, k * k, ho, wo], 1.0);
            let d = modulated_deform_conv2d(&x, &off, &mask, &wt, None, stride, pad).unwrap();
            assert!(d.max_abs_diff(&c).unwrap() < 1e-9, "seed {seed}");
        }
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let run = || {
            let mut r = rng(12);
            let x = Tensor::uniform(&[2, 3, 6, 6], -1.0, 1.0, &mut r);
            let w = Tensor::uniform(&[4, 3, 3, 3], -1.0, 1.0, &mut r);
            let off = Tensor::uniform(&[2, 18, 6, 6], -1.0, 1.0, &mut r);
            let mask = Tensor::uniform(&[2, 9, 6, 6], 0.0, 1.0, &mut r);
            let y = modulated_deform_conv2d(&x, &off, &mask, &w, None, 1, 1).unwrap();
            let needs = DeformNeeds {
                input: true,
                offsets: true,
                mask: true,
                weight: true,
                bias: false,
            };
            let g = modulated_deform_conv2d_backward(&x, &off, &mask, &w, &y, 1, 1, needs).unwrap();
            (y, g.input.unwrap(), g.offsets.unwrap(), g.weight.unwrap())
        };
        let a = run();
        let b = run();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
        assert_eq!(a.3, b.3);
    }

    #[test]
    fn zero_mask_annihilates_output_and_weight_grad() {
        let mut r = rng(6);
        let x = Tensor::uniform(&[1, 2, 5, 5], -1.0, 1.0, &mut r);
        let w = Tensor::uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut r);
        let off = Tensor::uniform(&[1, 18, 5, 5], -1.0, 1.0, &mut r);
        let mask = Tensor::zeros(&[1, 9, 5, 5]);
        let y = modulated_deform_conv2d(&x, &off, &mask, &w, None, 1, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        let g = Tensor::uniform(y.shape(), -1.0, 1.0, &mut r);
        let needs = DeformNeeds {
            input: true,
            offsets: true,
            mask: true,
            weight: true,
            bias: false,
        };
        let grads = modulated_deform_conv2d_backward(&x, &off, &mask, &w, &g, 1, 1, needs).unwrap();
        assert!(grads.weight.unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pooling_and_upsampling_fix_constants() {
        let x = Tensor::full(&[1, 2, 4, 6], 0.37);
        let y = upsample_bilinear2(&avgpool2(&x).unwrap()).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.max_abs_diff(&x).unwrap() < 1e-15);
    }

    #[test]
    fn upsample_matches_hand_expansion() {
        let mut r = rng(7);
        let x = Tensor::uniform(&[1, 1, 2, 2], -1.0, 1.0, &mut r);
        let v = x.data();
        // Per axis, outputs 0..4 sample source positions 0, 0.25, 0.75, 1.
        let axis = |i: usize| -> (f64, f64) {
            match i {
                0 => (1.0, 0.0),
                1 => (0.75, 0.25),
                2 => (0.25, 0.75),
                _ => (0.0, 1.0),
            }
        };
        let y = upsample_bilinear2(&x).unwrap();
        for oy in 0..4 {
            for ox in 0..4 {
                let (a0, a1) = axis(oy);
                let (b0, b1) = axis(ox);
                let expect = a0 * (b0 * v[0] + b1 * v[1]) + a1 * (b0 * v[2] + b1 * v[3]);
                assert!((y.data()[oy * 4 + ox] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let mut r = rng(8);
        let a = Tensor::uniform(&[2, 2, 3, 3], -1.0, 1.0, &mut r);
        let b = Tensor::uniform(&[2, 3, 3, 3], -1.0, 1.0, &mut r);
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(slice_channels(&c, 0, 2).unwrap(), a);
        assert_eq!(slice_channels(&c, 2, 3).unwrap(), b);
    }

    #[test]
    fn normalized_channels_have_unit_norm() {
        let mut r = rng(9);
        let x = Tensor::uniform(&[1, 4, 3, 3], 0.5, 1.0, &mut r);
        let y = normalize_channels(&x, 1e-12).unwrap();
        for i in 0..9 {
            let n: f64 = (0..4).map(|c| y.data()[c * 9 + i].powi(2)).sum();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }
}
