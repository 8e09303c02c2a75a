//! 2-D convolution and transposed convolution over `[N, C, H, W]` tensors,
//! lowered to GEMM through im2col.

use super::{Tensor, Var};
use crate::error::{dim_err, Result};

/// Output extent of a strided convolution along one axis.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn patch(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfold a `[C, H, W]` image into `[C*kh*kw, out_h*out_w]` columns.
fn im2col(img: &[f64], g: &Geometry, cols: &mut [f64]) {
    let ol = g.out_len();
    for c in 0..g.channels {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * ol;
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut cols[row + oy * g.out_w..row + (oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &img[(c * g.height + iy as usize) * g.width..][..g.width];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.width as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into a `[C, H, W]` image.
fn col2im(cols: &[f64], g: &Geometry, img: &mut [f64]) {
    let ol = g.out_len();
    for c in 0..g.channels {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * ol;
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut img[(c * g.height + iy as usize) * g.width..][..g.width];
                    let src = &cols[row + oy * g.out_w..row + (oy + 1) * g.out_w];
                    for (ox, s) in src.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

/// `C (+)= op(A) * op(B)`, row-major, logical shapes `[m, k] x [k, n]`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], accumulate: bool) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: slice lengths cover the strided extents checked above.
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

fn check_common(input: &Tensor, weight: &Tensor, stride: usize) -> Result<()> {
    if input.rank() != 4 || weight.rank() != 4 {
        return Err(dim_err!(
            "conv expects rank-4 input and weight, got {:?} and {:?}",
            input.shape(),
            weight.shape()
        ));
    }
    let (kh, kw) = (weight.shape()[2], weight.shape()[3]);
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(dim_err!("conv kernel must be odd, got {}x{}", kh, kw));
    }
    if stride == 0 {
        return Err(dim_err!("conv stride must be >= 1"));
    }
    Ok(())
}

fn check_bias(bias: Option<&Var>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.value().len() != channels {
            return Err(dim_err!("bias has {} entries, expected {}", b.value().len(), channels));
        }
    }
    Ok(())
}

fn add_bias(out: &mut [f64], bias: &[f64], n: usize, plane: usize) {
    let k = bias.len();
    for i in 0..n {
        for (c, b) in bias.iter().enumerate() {
            for v in &mut out[(i * k + c) * plane..(i * k + c + 1) * plane] {
                *v += b;
            }
        }
    }
}

fn bias_grad(g: &[f64], n: usize, k: usize, plane: usize) -> Vec<f64> {
    let mut gb = vec![0.0; k];
    for i in 0..n {
        for (c, acc) in gb.iter_mut().enumerate() {
            *acc += g[(i * k + c) * plane..(i * k + c + 1) * plane].iter().sum::<f64>();
        }
    }
    gb
}

impl Var {
    /// Cross-correlation of `[N, C, H, W]` input with `[K, C, kh, kw]` weight.
    pub fn conv2d(&self, weight: &Var, bias: Option<&Var>, stride: usize, padding: usize) -> Result<Var> {
        let (x, w) = (self.value(), weight.value());
        check_common(x, w, stride)?;
        let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (k, wc, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        if wc != c {
            return Err(dim_err!("conv2d input has {} channels, weight expects {}", c, wc));
        }
        check_bias(bias, k)?;
        let (out_h, out_w) = match (conv_output_size(h, kh, stride, padding), conv_output_size(wd, kw, stride, padding)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(dim_err!("conv2d kernel {}x{} larger than padded input {}x{}", kh, kw, h, wd)),
        };
        let g = Geometry { channels: c, height: h, width: wd, kh, kw, stride, pad: padding, out_h, out_w };
        let (patch, ol) = (g.patch(), g.out_len());
        let mut out = vec![0.0; n * k * ol];
        let mut cols = vec![0.0; patch * ol];
        for i in 0..n {
            im2col(&x.data()[i * c * h * wd..(i + 1) * c * h * wd], &g, &mut cols);
            gemm(k, patch, ol, w.data(), false, &cols, false, &mut out[i * k * ol..(i + 1) * k * ol], false);
        }
        if let Some(b) = bias {
            add_bias(&mut out, b.value().data(), n, ol);
        }
        let value = Tensor::new(&[n, k, out_h, out_w], out)?;
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Var::from_op("conv2d", value, parents, move |gout, p| {
            let (x, w) = (p[0].value(), p[1].value());
            let gd = gout.data();
            let mut gx = p[0].requires_grad().then(|| vec![0.0; x.len()]);
            let mut gw = p[1].requires_grad().then(|| vec![0.0; w.len()]);
            let mut cols = vec![0.0; patch * ol];
            for i in 0..n {
                let go = &gd[i * k * ol..(i + 1) * k * ol];
                if let Some(gw) = gw.as_mut() {
                    im2col(&x.data()[i * c * h * wd..(i + 1) * c * h * wd], &g, &mut cols);
                    gemm(k, ol, patch, go, false, &cols, true, gw, true);
                }
                if let Some(gx) = gx.as_mut() {
                    gemm(patch, k, ol, w.data(), true, go, false, &mut cols, false);
                    col2im(&cols, &g, &mut gx[i * c * h * wd..(i + 1) * c * h * wd]);
                }
            }
            let mut grads = vec![
                gx.map(|d| Tensor::new(x.shape(), d)).transpose()?,
                gw.map(|d| Tensor::new(w.shape(), d)).transpose()?,
            ];
            if p.len() > 2 {
                grads.push(
                    p[2].requires_grad()
                        .then(|| Tensor::new(p[2].shape(), bias_grad(gd, n, k, ol)))
                        .transpose()?,
                );
            }
            Ok(grads)
        })
    }

    /// Transposed convolution (the adjoint of [`Var::conv2d`]) with weight
    /// `[C_in, C_out, kh, kw]`. Output extent is
    /// `(H - 1) * stride - 2 * padding + kh + output_padding`.
    pub fn conv2d_transpose(
        &self,
        weight: &Var,
        bias: Option<&Var>,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Var> {
        let (x, w) = (self.value(), weight.value());
        check_common(x, w, stride)?;
        let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (wc, cout, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        if wc != cin {
            return Err(dim_err!("conv2d_transpose input has {} channels, weight expects {}", cin, wc));
        }
        if output_padding >= stride {
            return Err(dim_err!("output_padding {} must be < stride {}", output_padding, stride));
        }
        check_bias(bias, cout)?;
        let out_h = ((h - 1) * stride + kh + output_padding)
            .checked_sub(2 * padding)
            .filter(|v| *v > 0)
            .ok_or_else(|| dim_err!("conv2d_transpose padding {} too large", padding))?;
        let out_w = ((wd - 1) * stride + kw + output_padding)
            .checked_sub(2 * padding)
            .filter(|v| *v > 0)
            .ok_or_else(|| dim_err!("conv2d_transpose padding {} too large", padding))?;
        // geometry of the forward conv mapping the output back to the input
        let g = Geometry { channels: cout, height: out_h, width: out_w, kh, kw, stride, pad: padding, out_h: h, out_w: wd };
        let (patch, il) = (g.patch(), h * wd);
        let plane = out_h * out_w;
        let mut out = vec![0.0; n * cout * plane];
        let mut cols = vec![0.0; patch * il];
        for i in 0..n {
            gemm(patch, cin, il, w.data(), true, &x.data()[i * cin * il..(i + 1) * cin * il], false, &mut cols, false);
            col2im(&cols, &g, &mut out[i * cout * plane..(i + 1) * cout * plane]);
        }
        if let Some(b) = bias {
            add_bias(&mut out, b.value().data(), n, plane);
        }
        let value = Tensor::new(&[n, cout, out_h, out_w], out)?;
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Var::from_op("conv2d_transpose", value, parents, move |gout, p| {
            let (x, w) = (p[0].value(), p[1].value());
            let gd = gout.data();
            let mut gx = p[0].requires_grad().then(|| vec![0.0; x.len()]);
            let mut gw = p[1].requires_grad().then(|| vec![0.0; w.len()]);
            let mut cols = vec![0.0; patch * il];
            for i in 0..n {
                im2col(&gd[i * cout * plane..(i + 1) * cout * plane], &g, &mut cols);
                if let Some(gx) = gx.as_mut() {
                    gemm(cin, patch, il, w.data(), false, &cols, false, &mut gx[i * cin * il..(i + 1) * cin * il], false);
                }
                if let Some(gw) = gw.as_mut() {
                    gemm(cin, il, patch, &x.data()[i * cin * il..(i + 1) * cin * il], false, &cols, true, gw, true);
                }
            }
            let mut grads = vec![
                gx.map(|d| Tensor::new(x.shape(), d)).transpose()?,
                gw.map(|d| Tensor::new(w.shape(), d)).transpose()?,
            ];
            if p.len() > 2 {
                grads.push(
                    p[2].requires_grad()
                        .then(|| Tensor::new(p[2].shape(), bias_grad(gd, n, cout, plane)))
                        .transpose()?,
                );
            }
            Ok(grads)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn ones_conv_sums_to_nine() {
        let x = Var::constant(Tensor::ones(&[1, 1, 3, 3]));
        let w = Var::constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = x.conv2d(&w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item().unwrap(), 9.0);
    }

    #[test]
    fn stride_two_halves() {
        let x = Var::constant(Tensor::ones(&[1, 1, 8, 8]));
        let w = Var::constant(Tensor::ones(&[1, 1, 5, 5]));
        assert_eq!(x.conv2d(&w, None, 2, 2).unwrap().shape(), &[1, 1, 4, 4]);
    }

    #[test]
    fn transpose_shapes() {
        let x = Var::constant(Tensor::ones(&[1, 1, 4, 4]));
        let w = Var::constant(Tensor::ones(&[1, 1, 5, 5]));
        assert_eq!(x.conv2d_transpose(&w, None, 2, 2, 0).unwrap().shape(), &[1, 1, 7, 7]);
        assert_eq!(x.conv2d_transpose(&w, None, 2, 2, 1).unwrap().shape(), &[1, 1, 8, 8]);
    }

    #[test]
    fn transpose_identity_kernel() {
        let x = Var::constant(Tensor::from_fn(&[1, 1, 3, 4], |i| i as f64 * 0.5 - 1.0));
        let w = Var::constant(Tensor::ones(&[1, 1, 1, 1]));
        let b = Var::constant(Tensor::zeros(&[1]));
        let y = x.conv2d_transpose(&w, Some(&b), 1, 0, 0).unwrap();
        assert_eq!(y.value(), x.value());
    }

    #[test]
    fn conv_then_transpose_restores_shape() {
        for (h, w) in [(8, 8), (16, 12), (32, 64)] {
            let x = Var::constant(Tensor::ones(&[1, 2, h, w]));
            let k = Var::constant(Tensor::ones(&[3, 2, 5, 5]));
            let kt = Var::constant(Tensor::ones(&[3, 2, 5, 5]));
            let down = x.conv2d(&k, None, 2, 2).unwrap();
            let up = down.conv2d_transpose(&kt, None, 2, 2, 1).unwrap();
            assert_eq!(up.shape(), x.shape());
        }
    }

    #[test]
    fn even_kernel_and_channel_mismatch_are_rejected() {
        let x = Var::constant(Tensor::ones(&[1, 2, 4, 4]));
        let even = Var::constant(Tensor::ones(&[1, 2, 2, 2]));
        assert!(matches!(x.conv2d(&even, None, 1, 0), Err(Error::Dimension(_))));
        let wrong = Var::constant(Tensor::ones(&[1, 3, 3, 3]));
        assert!(matches!(x.conv2d(&wrong, None, 1, 1), Err(Error::Dimension(_))));
    }

    /// Direct nested-loop convolution, independent of im2col/GEMM.
    fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (k, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(&[n, k, oh, ow]);
        for i in 0..n {
            for o in 0..k {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut s = 0.0;
                        for ch in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (y * stride + ky) as isize - pad as isize;
                                    let ix = (xx * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        s += x.data()[((i * c + ch) * h + iy as usize) * wd + ix as usize]
                                            * w.data()[((o * c + ch) * kh + ky) * kw + kx];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((i * k + o) * oh + y) * ow + xx] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn gemm_conv_matches_naive() {
        let x = Tensor::from_fn(&[2, 3, 7, 6], |i| ((i * 37 % 11) as f64 - 5.0) * 0.1);
        let w = Tensor::from_fn(&[4, 3, 3, 5], |i| ((i * 13 % 7) as f64 - 3.0) * 0.2);
        for (s, p) in [(1, 0), (1, 1), (2, 2), (3, 1)] {
            let y = Var::constant(x.clone()).conv2d(&Var::constant(w.clone()), None, s, p).unwrap();
            let r = naive_conv(&x, &w, s, p);
            assert_eq!(y.shape(), r.shape());
            for (a, b) in y.value().data().iter().zip(r.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
