//! Stateless layer kernels: conv (im2col + GEMM), pooling, upsampling, dense.
//!
//! Each `*_backward` takes the layer input and the gradient at the output and
//! produces the gradient at the input, plus parameter gradients where any.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Geometry of one conv application.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize, h: usize, w: usize) -> Self {
        let oh = (h + 2 * pad - kernel) / stride + 1;
        let ow = (w + 2 * pad - kernel) / stride + 1;
        ConvGeom { in_ch, out_ch, kernel, stride, pad, h, w, oh, ow }
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds `x` into a (in_ch*k*k) x (oh*ow) matrix with zero padding.
fn im2col<F: Scalar>(g: &ConvGeom, x: &[F], cols: &mut [F]) {
    let (k, s, p, w, h, ow, oh) = (g.kernel, g.stride, g.pad, g.w, g.h, g.ow, g.oh);
    debug_assert_eq!(cols.len(), g.col_rows() * g.col_cols());
    for c in 0..g.in_ch {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * g.col_cols();
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - p as isize;
                    let dst = &mut cols[row + oy * ow..row + (oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(F::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p as isize;
                        *d = if ix < 0 || ix >= w as isize { F::zero() } else { src_row[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column matrix back onto the input grid (adjoint of im2col).
fn col2im_add<F: Scalar>(g: &ConvGeom, cols: &[F], dx: &mut [F]) {
    let (k, s, p, w, h, ow, oh) = (g.kernel, g.stride, g.pad, g.w, g.h, g.ow, g.oh);
    for c in 0..g.in_ch {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * g.col_cols();
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * ow..row + (oy + 1) * ow];
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if ix >= 0 && (ix as usize) < w {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `y[co] = W[co, ci*k*k] . cols + b[co]`
pub fn conv_forward<F: Scalar>(g: &ConvGeom, x: &Tensor<F>, weight: &[F], bias: &[F]) -> Tensor<F> {
    debug_assert_eq!(x.dims(), &[g.in_ch, g.h, g.w]);
    debug_assert_eq!(weight.len(), g.out_ch * g.col_rows());
    let mut out = Tensor::zeros(&[g.out_ch, g.oh, g.ow]);
    if g.kernel == 1 && g.stride == 1 && g.pad == 0 {
        F::gemm(g.out_ch, g.in_ch, g.h * g.w, weight, x.data(), out.data_mut());
    } else {
        let mut cols = vec![F::zero(); g.col_rows() * g.col_cols()];
        im2col(g, x.data(), &mut cols);
        F::gemm(g.out_ch, g.col_rows(), g.col_cols(), weight, &cols, out.data_mut());
    }
    for (co, &b) in bias.iter().enumerate() {
        for v in out.channel_mut(co) {
            *v += b;
        }
    }
    out
}

/// Returns (dx, dweight, dbias).
pub fn conv_backward<F: Scalar>(
    g: &ConvGeom,
    x: &Tensor<F>,
    weight: &[F],
    dy: &Tensor<F>,
) -> (Tensor<F>, Vec<F>, Vec<F>) {
    debug_assert_eq!(dy.dims(), &[g.out_ch, g.oh, g.ow]);
    let npix = g.col_cols();
    let mut dweight = vec![F::zero(); g.out_ch * g.col_rows()];
    let mut dx = Tensor::zeros(&[g.in_ch, g.h, g.w]);
    let dbias: Vec<F> = (0..g.out_ch)
        .map(|co| dy.channel(co).iter().fold(F::zero(), |a, &v| a + v))
        .collect();

    if g.kernel == 1 && g.stride == 1 && g.pad == 0 {
        F::gemm_nt(g.out_ch, npix, g.in_ch, dy.data(), x.data(), &mut dweight);
        F::gemm_tn(g.in_ch, g.out_ch, npix, weight, dy.data(), dx.data_mut());
        return (dx, dweight, dbias);
    }

    let mut cols = vec![F::zero(); g.col_rows() * npix];
    im2col(g, x.data(), &mut cols);
    // dW = dY (co x npix) . cols^T
    F::gemm_nt(g.out_ch, npix, g.col_rows(), dy.data(), &cols, &mut dweight);
    // dcols = W^T . dY, reusing the col buffer
    let mut dcols = cols;
    F::gemm_tn(g.col_rows(), g.out_ch, npix, weight, dy.data(), &mut dcols);
    col2im_add(g, &dcols, dx.data_mut());
    (dx, dweight, dbias)
}

/// Geometry of a fused `upsample x2 -> 3x3 conv (stride 1, pad 1)` pair.
/// `h`/`w` are the source (pre-upsample) sizes; the output is `2h x 2w`.
///
/// Every 3x3 window over a nearest-upsampled grid covers at most a 2x2
/// neighborhood of source cells, so the pair collapses into four phase
/// convolutions with 2x2 kernels whose entries sum the original taps. This
/// computes the exact same function as the two layers run separately, at less
/// than half the multiplies, without materializing the upsampled tensor.
#[derive(Debug, Clone, Copy)]
pub struct UpConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub h: usize,
    pub w: usize,
}

/// Which 3x3 taps feed source offset `a - 1 + phase` for a given output
/// parity `phase`: rows of the kernel collapse pairwise onto source rows.
fn phase_taps(phase: usize, a: usize) -> &'static [usize] {
    match (phase, a) {
        (0, 0) => &[0],
        (0, 1) => &[1, 2],
        (1, 0) => &[0, 1],
        (1, 1) => &[2],
        _ => unreachable!("phase and offset are binary"),
    }
}

/// Collapses the 3x3 kernel into the 2x2 phase kernel for parity (py, px).
fn phase_weight<F: Scalar>(g: &UpConvGeom, weight: &[F], py: usize, px: usize) -> Vec<F> {
    let mut out = vec![F::zero(); g.out_ch * g.in_ch * 4];
    for co in 0..g.out_ch {
        for ci in 0..g.in_ch {
            let src = &weight[(co * g.in_ch + ci) * 9..(co * g.in_ch + ci + 1) * 9];
            for a in 0..2 {
                for b in 0..2 {
                    let mut acc = F::zero();
                    for &ky in phase_taps(py, a) {
                        for &kx in phase_taps(px, b) {
                            acc += src[ky * 3 + kx];
                        }
                    }
                    out[(co * g.in_ch + ci) * 4 + a * 2 + b] = acc;
                }
            }
        }
    }
    out
}

/// Adjoint of [`phase_weight`]: scatters a phase-kernel gradient back onto the
/// 3x3 taps.
fn phase_weight_adjoint<F: Scalar>(g: &UpConvGeom, dphase: &[F], py: usize, px: usize, dweight: &mut [F]) {
    for co in 0..g.out_ch {
        for ci in 0..g.in_ch {
            let dst = &mut dweight[(co * g.in_ch + ci) * 9..(co * g.in_ch + ci + 1) * 9];
            for a in 0..2 {
                for b in 0..2 {
                    let gval = dphase[(co * g.in_ch + ci) * 4 + a * 2 + b];
                    for &ky in phase_taps(py, a) {
                        for &kx in phase_taps(px, b) {
                            dst[ky * 3 + kx] += gval;
                        }
                    }
                }
            }
        }
    }
}

/// Source-space im2col for one phase: rows are (channel, dy, dx) with
/// offsets `py - 1 + a`, columns are source pixels.
fn upconv_cols<F: Scalar>(g: &UpConvGeom, u: &[F], py: usize, px: usize, cols: &mut [F]) {
    let (h, w) = (g.h, g.w);
    for c in 0..g.in_ch {
        let plane = &u[c * h * w..(c + 1) * h * w];
        for a in 0..2 {
            let dy = py as isize - 1 + a as isize;
            for b in 0..2 {
                let dx = px as isize - 1 + b as isize;
                let row = ((c * 2 + a) * 2 + b) * h * w;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let dst = &mut cols[row + y * w..row + (y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(F::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, d) in dst.iter_mut().enumerate() {
                        let sx = x as isize + dx;
                        *d = if sx < 0 || sx >= w as isize { F::zero() } else { src[sx as usize] };
                    }
                }
            }
        }
    }
}

fn upconv_cols_adjoint<F: Scalar>(g: &UpConvGeom, dcols: &[F], py: usize, px: usize, du: &mut [F]) {
    let (h, w) = (g.h, g.w);
    for c in 0..g.in_ch {
        let plane = &mut du[c * h * w..(c + 1) * h * w];
        for a in 0..2 {
            let dy = py as isize - 1 + a as isize;
            for b in 0..2 {
                let dx = px as isize - 1 + b as isize;
                let row = ((c * 2 + a) * 2 + b) * h * w;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &dcols[row + y * w..row + (y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, &v) in src.iter().enumerate() {
                        let sx = x as isize + dx;
                        if sx >= 0 && (sx as isize) < w as isize {
                            dst[sx as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Forward of the fused pair. `weight` is the conv's usual
/// `out_ch x in_ch x 3 x 3` block.
pub fn upconv_forward<F: Scalar>(g: &UpConvGeom, u: &Tensor<F>, weight: &[F], bias: &[F]) -> Tensor<F> {
    debug_assert_eq!(u.dims(), &[g.in_ch, g.h, g.w]);
    let (h, w) = (g.h, g.w);
    let npix = h * w;
    let mut out = Tensor::zeros(&[g.out_ch, 2 * h, 2 * w]);
    let mut cols = vec![F::zero(); g.in_ch * 4 * npix];
    let mut phase_out = vec![F::zero(); g.out_ch * npix];
    for py in 0..2 {
        for px in 0..2 {
            let pw = phase_weight(g, weight, py, px);
            upconv_cols(g, u.data(), py, px, &mut cols);
            F::gemm(g.out_ch, g.in_ch * 4, npix, &pw, &cols, &mut phase_out);
            for co in 0..g.out_ch {
                let b = bias[co];
                let src = &phase_out[co * npix..(co + 1) * npix];
                let dst = out.channel_mut(co);
                for y in 0..h {
                    let drow = &mut dst[(2 * y + py) * 2 * w..(2 * y + py + 1) * 2 * w];
                    let srow = &src[y * w..(y + 1) * w];
                    for x in 0..w {
                        drow[2 * x + px] = srow[x] + b;
                    }
                }
            }
        }
    }
    out
}

/// Backward of the fused pair: gradient w.r.t. the source tensor (before
/// upsampling), the 3x3 weights and the bias.
pub fn upconv_backward<F: Scalar>(
    g: &UpConvGeom,
    u: &Tensor<F>,
    weight: &[F],
    dy: &Tensor<F>,
) -> (Tensor<F>, Vec<F>, Vec<F>) {
    let (h, w) = (g.h, g.w);
    let npix = h * w;
    debug_assert_eq!(dy.dims(), &[g.out_ch, 2 * h, 2 * w]);
    let mut du = Tensor::zeros(&[g.in_ch, h, w]);
    let mut dweight = vec![F::zero(); g.out_ch * g.in_ch * 9];
    let dbias: Vec<F> = (0..g.out_ch)
        .map(|co| dy.channel(co).iter().fold(F::zero(), |a, &v| a + v))
        .collect();

    let mut cols = vec![F::zero(); g.in_ch * 4 * npix];
    let mut dyphase = vec![F::zero(); g.out_ch * npix];
    let mut dphase_w = vec![F::zero(); g.out_ch * g.in_ch * 4];
    let mut dcols = vec![F::zero(); g.in_ch * 4 * npix];
    for py in 0..2 {
        for px in 0..2 {
            for co in 0..g.out_ch {
                let src = dy.channel(co);
                let dst = &mut dyphase[co * npix..(co + 1) * npix];
                for y in 0..h {
                    let srow = &src[(2 * y + py) * 2 * w..(2 * y + py + 1) * 2 * w];
                    let drow = &mut dst[y * w..(y + 1) * w];
                    for x in 0..w {
                        drow[x] = srow[2 * x + px];
                    }
                }
            }
            upconv_cols(g, u.data(), py, px, &mut cols);
            F::gemm_nt(g.out_ch, npix, g.in_ch * 4, &dyphase, &cols, &mut dphase_w);
            phase_weight_adjoint(g, &dphase_w, py, px, &mut dweight);
            let pw = phase_weight(g, weight, py, px);
            F::gemm_tn(g.in_ch * 4, g.out_ch, npix, &pw, &dyphase, &mut dcols);
            upconv_cols_adjoint(g, &dcols, py, px, du.data_mut());
        }
    }
    (du, dweight, dbias)
}

pub fn relu_forward<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let data = x.data().iter().map(|&v| v.max(F::zero())).collect();
    Tensor::from_vec(x.dims(), data)
}

/// Gradient is zero at the kink.
pub fn relu_backward<F: Scalar>(x: &Tensor<F>, dy: &Tensor<F>) -> Tensor<F> {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&xi, &gi)| if xi > F::zero() { gi } else { F::zero() })
        .collect();
    Tensor::from_vec(x.dims(), data)
}

pub fn upsample2_forward<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let (c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let mut out = Tensor::zeros(&[c, 2 * h, 2 * w]);
    for ch in 0..c {
        let src = x.channel(ch);
        let dst = out.channel_mut(ch);
        for y in 0..2 * h {
            let sy = y / 2;
            let src_row = &src[sy * w..(sy + 1) * w];
            let dst_row = &mut dst[y * 2 * w..(y + 1) * 2 * w];
            for sx in 0..w {
                dst_row[2 * sx] = src_row[sx];
                dst_row[2 * sx + 1] = src_row[sx];
            }
        }
    }
    out
}

pub fn upsample2_backward<F: Scalar>(x: &Tensor<F>, dy: &Tensor<F>) -> Tensor<F> {
    let (c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let mut dx = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        let src = dy.channel(ch);
        let dst = dx.channel_mut(ch);
        for y in 0..2 * h {
            let sy = y / 2;
            let src_row = &src[y * 2 * w..(y + 1) * 2 * w];
            let dst_row = &mut dst[sy * w..(sy + 1) * w];
            for sx in 0..w {
                dst_row[sx] += src_row[2 * sx] + src_row[2 * sx + 1];
            }
        }
    }
    dx
}

pub fn meanpool2_forward<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let (c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let quarter = F::from_f64_lossy(0.25);
    let mut out = Tensor::zeros(&[c, h / 2, w / 2]);
    for ch in 0..c {
        let src = x.channel(ch);
        let dst = out.channel_mut(ch);
        for oy in 0..h / 2 {
            let r0 = &src[2 * oy * w..(2 * oy + 1) * w];
            let r1 = &src[(2 * oy + 1) * w..(2 * oy + 2) * w];
            let dst_row = &mut dst[oy * (w / 2)..(oy + 1) * (w / 2)];
            for ox in 0..w / 2 {
                dst_row[ox] = (r0[2 * ox] + r0[2 * ox + 1] + r1[2 * ox] + r1[2 * ox + 1]) * quarter;
            }
        }
    }
    out
}

pub fn meanpool2_backward<F: Scalar>(x: &Tensor<F>, dy: &Tensor<F>) -> Tensor<F> {
    let (c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let quarter = F::from_f64_lossy(0.25);
    let mut dx = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        let src = dy.channel(ch);
        let dst = dx.channel_mut(ch);
        for oy in 0..h / 2 {
            let src_row = &src[oy * (w / 2)..(oy + 1) * (w / 2)];
            for ox in 0..w / 2 {
                let g = src_row[ox] * quarter;
                dst[2 * oy * w + 2 * ox] += g;
                dst[2 * oy * w + 2 * ox + 1] += g;
                dst[(2 * oy + 1) * w + 2 * ox] += g;
                dst[(2 * oy + 1) * w + 2 * ox + 1] += g;
            }
        }
    }
    dx
}

/// `[c, h, w] -> [c]` channel means.
pub fn global_meanpool_forward<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let (c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let inv = F::one() / F::from_f64_lossy((h * w) as f64);
    let data = (0..c)
        .map(|ch| x.channel(ch).iter().fold(F::zero(), |a, &v| a + v) * inv)
        .collect();
    Tensor::from_vec(&[c], data)
}

pub fn global_meanpool_backward<F: Scalar>(x: &Tensor<F>, dy: &Tensor<F>) -> Tensor<F> {
    let (c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let inv = F::one() / F::from_f64_lossy((h * w) as f64);
    let mut dx = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        let g = dy.data()[ch] * inv;
        dx.channel_mut(ch).fill(g);
    }
    dx
}

/// `y = W[out, in] . x + b`
pub fn dense_forward<F: Scalar>(x: &Tensor<F>, weight: &[F], bias: &[F]) -> Tensor<F> {
    let din = x.len();
    let dout = bias.len();
    let mut out = vec![F::zero(); dout];
    for (o, out_v) in out.iter_mut().enumerate() {
        let row = &weight[o * din..(o + 1) * din];
        let mut acc = bias[o];
        for (wv, xv) in row.iter().zip(x.data()) {
            acc += *wv * *xv;
        }
        *out_v = acc;
    }
    Tensor::from_vec(&[dout], out)
}

/// Returns (dx, dweight, dbias).
pub fn dense_backward<F: Scalar>(x: &Tensor<F>, weight: &[F], dy: &Tensor<F>) -> (Tensor<F>, Vec<F>, Vec<F>) {
    let din = x.len();
    let dout = dy.len();
    let mut dw = vec![F::zero(); dout * din];
    let mut dx = vec![F::zero(); din];
    for o in 0..dout {
        let g = dy.data()[o];
        let wrow = &weight[o * din..(o + 1) * din];
        let dwrow = &mut dw[o * din..(o + 1) * din];
        for i in 0..din {
            dwrow[i] = g * x.data()[i];
            dx[i] += g * wrow[i];
        }
    }
    (Tensor::from_vec(&[din], dx), dw, dy.data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t3(c: usize, h: usize, w: usize, vals: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(&[c, h, w], vals.to_vec())
    }

    #[test]
    fn conv_identity_kernel_passes_input_through() {
        // 3x3 kernel with a single center one reproduces the input away from edges
        let g = ConvGeom::new(1, 1, 3, 1, 1, 3, 3);
        let x = t3(1, 3, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        let y = conv_forward(&g, &x, &w, &[0.0]);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_hand_checked_3x3_on_2x2_output() {
        // All-ones 2x2 input, all-ones kernel, pad 1: each output counts its
        // in-bounds neighbors.
        let g = ConvGeom::new(1, 1, 3, 1, 1, 2, 2);
        let x = t3(1, 2, 2, &[1.0; 4]);
        let y = conv_forward(&g, &x, &[1.0; 9], &[0.5]);
        assert_eq!(y.data(), &[4.5, 4.5, 4.5, 4.5]);
    }

    #[test]
    fn strided_conv_halves_resolution() {
        let g = ConvGeom::new(1, 1, 3, 2, 1, 4, 4);
        assert_eq!((g.oh, g.ow), (2, 2));
        let x = t3(1, 4, 4, &(0..16).map(|v| v as f64).collect::<Vec<_>>());
        let mut w = vec![0.0; 9];
        w[4] = 1.0; // center tap picks x[2*oy, 2*ox]
        let y = conv_forward(&g, &x, &w, &[0.0]);
        assert_eq!(y.data(), &[0.0, 2.0, 8.0, 10.0]);
    }

    #[test]
    fn conv_backward_matches_dot_product_identity() {
        // <dy, conv(x)> == <dW, W> + <dx, x> sanity via linearity in W and x:
        // directional product test against numeric differentiation.
        let g = ConvGeom::new(2, 3, 3, 1, 1, 4, 5);
        let n_in = 2 * 4 * 5;
        let n_w = 3 * 2 * 9;
        let x = t3(2, 4, 5, &(0..n_in).map(|v| (v as f64 * 0.37).sin()).collect::<Vec<_>>());
        let w: Vec<f64> = (0..n_w).map(|v| (v as f64 * 0.11).cos() * 0.3).collect();
        let b = vec![0.1, -0.2, 0.05];
        let dy_t = {
            let tmp = conv_forward(&g, &x, &w, &b);
            Tensor::from_vec(tmp.dims(), (0..tmp.len()).map(|v| (v as f64 * 0.05).sin()).collect())
        };
        let (dx, dw, db) = conv_backward(&g, &x, &w, &dy_t);

        // loss(x, w, b) = <dy, conv(x; w, b)>; finite differences on a few coords
        let loss = |xv: &[f64], wv: &[f64], bv: &[f64]| {
            let y = conv_forward(&g, &t3(2, 4, 5, xv), wv, bv);
            y.data().iter().zip(dy_t.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let eps = 1e-6;
        for idx in [0usize, 7, 19, n_in - 1] {
            let mut xp = x.data().to_vec();
            xp[idx] += eps;
            let mut xm = x.data().to_vec();
            xm[idx] -= eps;
            let num = (loss(&xp, &w, &b) - loss(&xm, &w, &b)) / (2.0 * eps);
            assert!((num - dx.data()[idx]).abs() < 1e-7, "dx[{idx}]: {num} vs {}", dx.data()[idx]);
        }
        for idx in [0usize, 13, n_w - 1] {
            let mut wp = w.clone();
            wp[idx] += eps;
            let mut wm = w.clone();
            wm[idx] -= eps;
            let num = (loss(x.data(), &wp, &b) - loss(x.data(), &wm, &b)) / (2.0 * eps);
            assert!((num - dw[idx]).abs() < 1e-7, "dw[{idx}]");
        }
        for idx in 0..3 {
            let mut bp = b.clone();
            bp[idx] += eps;
            let mut bm = b.clone();
            bm[idx] -= eps;
            let num = (loss(x.data(), &w, &bp) - loss(x.data(), &w, &bm)) / (2.0 * eps);
            assert!((num - db[idx]).abs() < 1e-7, "db[{idx}]");
        }
    }

    #[test]
    fn upsample_round_trip_shapes() {
        let x = t3(1, 2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let y = upsample2_forward(&x);
        assert_eq!(y.dims(), &[1, 4, 4]);
        assert_eq!(y.at3(0, 0, 1), 1.0);
        assert_eq!(y.at3(0, 3, 3), 4.0);
        // backward of all-ones gradient gives 4 per source pixel
        let dy = Tensor::from_vec(&[1, 4, 4], vec![1.0; 16]);
        let dx = upsample2_backward(&x, &dy);
        assert_eq!(dx.data(), &[4.0, 4.0, 4.0, 4.0]);
    }

    #[test]
    fn meanpool_and_global_pool_average() {
        let x = t3(1, 2, 4, &[1.0, 3.0, 5.0, 7.0, 1.0, 3.0, 5.0, 7.0]);
        let y = meanpool2_forward(&x);
        assert_eq!(y.data(), &[2.0, 6.0]);
        let gp = global_meanpool_forward(&x);
        assert_eq!(gp.data(), &[4.0]);
    }

    /// Deterministic pseudo-random fill without pulling an RNG into this module.
    fn fill(v: &mut [f64], seed: u64) {
        let mut s = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
        for x in v.iter_mut() {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            *x = (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5;
        }
    }

    #[test]
    fn fused_upconv_matches_upsample_then_conv() {
        for (ci, co, h, w, seed) in [(1, 2, 2, 3, 1u64), (3, 4, 5, 4, 2), (2, 2, 1, 1, 3)] {
            let mut x = vec![0.0; ci * h * w];
            let mut wt = vec![0.0; co * ci * 9];
            let mut b = vec![0.0; co];
            fill(&mut x, seed);
            fill(&mut wt, seed + 10);
            fill(&mut b, seed + 20);
            let u = Tensor::from_vec(&[ci, h, w], x);

            let up = upsample2_forward(&u);
            let cg = ConvGeom::new(ci, co, 3, 1, 1, 2 * h, 2 * w);
            let want = conv_forward(&cg, &up, &wt, &b);

            let fg = UpConvGeom { in_ch: ci, out_ch: co, h, w };
            let got = upconv_forward(&fg, &u, &wt, &b);
            assert_eq!(got.dims(), want.dims());
            for (a, e) in got.data().iter().zip(want.data()) {
                assert!((a - e).abs() < 1e-12, "forward mismatch: {a} vs {e}");
            }

            // Backward against the composed reference path.
            let mut dyv = vec![0.0; co * 4 * h * w];
            fill(&mut dyv, seed + 30);
            let dy = Tensor::from_vec(&[co, 2 * h, 2 * w], dyv);
            let (dup, dw_ref, db_ref) = conv_backward(&cg, &up, &wt, &dy);
            let du_ref = upsample2_backward(&u, &dup);
            let (du, dw, db) = upconv_backward(&fg, &u, &wt, &dy);
            for (a, e) in du.data().iter().zip(du_ref.data()) {
                assert!((a - e).abs() < 1e-12, "du mismatch");
            }
            for (a, e) in dw.iter().zip(&dw_ref) {
                assert!((a - e).abs() < 1e-12, "dw mismatch");
            }
            for (a, e) in db.iter().zip(&db_ref) {
                assert!((a - e).abs() < 1e-12, "db mismatch");
            }
        }
    }

    #[test]
    fn dense_matches_hand_product() {
        let x = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]);
        let w = [1.0, 0.0, 0.0, 0.0, 1.0, 1.0]; // 2x3
        let y = dense_forward(&x, &w, &[0.0, 10.0]);
        assert_eq!(y.data(), &[1.0, 15.0]);
        let dy = Tensor::from_vec(&[2], vec![1.0, 1.0]);
        let (dx, dw, db) = dense_backward(&x, &w, &dy);
        assert_eq!(dx.data(), &[1.0, 1.0, 1.0]);
        assert_eq!(dw, vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        assert_eq!(db, vec![1.0, 1.0]);
    }
}
