//! Gaussian scale-space volumes built from a blur/downsample pyramid, and
//! differentiable trilinear warping through them.
//!
//! A volume holds `M + 1` progressively blurred copies of a frame, all at
//! the frame's resolution. Level `k >= 1` is produced by blurring with a
//! fixed `sigma0` kernel at pyramid octave `k - 1` and step-upsampling back
//! to full size, so its blur variance (in full-resolution pixels) is
//! `sigma0^2 * (1 + 4 + ... + 4^(k-1))`. Every blur uses the same small
//! kernel, which keeps construction cost independent of the composed sigma.

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Tensor, Var};

/// Default base blur of the pyramid.
pub const DEFAULT_SIGMA0: f64 = 1.5;
/// Default number of blurred levels above the sharp one.
pub const DEFAULT_SCALE_DEPTH: usize = 5;

/// Normalized, symmetric 1-D Gaussian taps.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianKernel {
    pub sigma: f64,
    pub taps: Vec<f64>,
}

impl GaussianKernel {
    pub fn radius(&self) -> usize {
        self.taps.len() / 2
    }
}

/// Tap count `round_up_to_odd(6 * sigma + 1)`; a single tap for sigma 0.
pub fn kernel_length(sigma: f64) -> usize {
    if sigma == 0.0 {
        return 1;
    }
    let n = (6.0 * sigma + 1.0).ceil() as usize;
    if n % 2 == 0 {
        n + 1
    } else {
        n
    }
}

pub fn create_gaussian_kernel(sigma: f64) -> Result<GaussianKernel> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Domain(format!("gaussian sigma must be >= 0, got {}", sigma)));
    }
    let len = kernel_length(sigma);
    if len == 1 {
        return Ok(GaussianKernel { sigma, taps: vec![1.0] });
    }
    let r = (len / 2) as f64;
    let mut taps: Vec<f64> = (0..len)
        .map(|i| {
            let t = i as f64 - r;
            (-t * t / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let z: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= z;
    }
    Ok(GaussianKernel { sigma, taps })
}

fn spatial_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(dim_err!("expected an image tensor [..., H, W], got {:?}", shape));
    }
    let h = shape[shape.len() - 2];
    let w = shape[shape.len() - 1];
    Ok((shape.iter().product::<usize>() / (h * w).max(1), h, w))
}

fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Horizontal filter with replicate edges; `adjoint` scatters instead.
fn filter_rows(src: &[f64], planes: usize, h: usize, w: usize, taps: &[f64], adjoint: bool) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let mut dst = vec![0.0; src.len()];
    for row in 0..planes * h {
        let s = &src[row * w..(row + 1) * w];
        let d = &mut dst[row * w..(row + 1) * w];
        for x in 0..w {
            for (t, &wt) in taps.iter().enumerate() {
                let j = clamp_index(x as isize + t as isize - r, w);
                if adjoint {
                    d[j] += wt * s[x];
                } else {
                    d[x] += wt * s[j];
                }
            }
        }
    }
    dst
}

/// Vertical counterpart of [`filter_rows`].
fn filter_cols(src: &[f64], planes: usize, h: usize, w: usize, taps: &[f64], adjoint: bool) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let mut dst = vec![0.0; src.len()];
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..h {
            for (t, &wt) in taps.iter().enumerate() {
                let j = clamp_index(y as isize + t as isize - r, h);
                let (from, to) = if adjoint { (y, j) } else { (j, y) };
                let s = base + from * w;
                let d = base + to * w;
                for x in 0..w {
                    dst[d + x] += wt * src[s + x];
                }
            }
        }
    }
    dst
}

/// Separable Gaussian blur with edge-replicate padding over the last two
/// axes. Shape is preserved.
pub fn gaussian_blur(img: &Var, kernel: &GaussianKernel) -> Result<Var> {
    let (planes, h, w) = spatial_dims(img.shape())?;
    if kernel.taps.len() == 1 {
        return Ok(img.clone());
    }
    let taps = kernel.taps.clone();
    let tmp = filter_rows(img.value().data(), planes, h, w, &taps, false);
    let out = filter_cols(&tmp, planes, h, w, &taps, false);
    let value = Tensor::new(img.shape(), out)?;
    Var::from_op("gaussian_blur", value, vec![img.clone()], move |g, p| {
        let tmp = filter_cols(g.data(), planes, h, w, &taps, true);
        let gx = filter_rows(&tmp, planes, h, w, &taps, true);
        Ok(vec![Some(Tensor::new(p[0].shape(), gx)?)])
    })
}

/// 2x2 average pooling over the last two axes.
pub fn downsample2x(img: &Var) -> Result<Var> {
    let (planes, h, w) = spatial_dims(img.shape())?;
    if h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0 {
        return Err(dim_err!("downsample2x needs even H, W >= 2, got {}x{}", h, w));
    }
    let (oh, ow) = (h / 2, w / 2);
    let src = img.value().data();
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        for y in 0..oh {
            for x in 0..ow {
                let i = p * h * w + 2 * y * w + 2 * x;
                out[(p * oh + y) * ow + x] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
            }
        }
    }
    let mut shape = img.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    let value = Tensor::new(&shape, out)?;
    Var::from_op("downsample2x", value, vec![img.clone()], move |g, p| {
        let mut gx = vec![0.0; planes * h * w];
        for pl in 0..planes {
            for y in 0..oh {
                for x in 0..ow {
                    let v = 0.25 * g.data()[(pl * oh + y) * ow + x];
                    let i = pl * h * w + 2 * y * w + 2 * x;
                    gx[i] += v;
                    gx[i + 1] += v;
                    gx[i + w] += v;
                    gx[i + w + 1] += v;
                }
            }
        }
        Ok(vec![Some(Tensor::new(p[0].shape(), gx)?)])
    })
}

/// Bilinear 2x upsampling along one axis of length `n`: output `2j` samples
/// the input at `j - 1/4`, output `2j + 1` at `j + 1/4`, clamped at edges.
fn upsample_axis(n: usize, mut visit: impl FnMut(usize, usize, f64)) {
    for j in 0..n {
        let prev = j.saturating_sub(1);
        let next = (j + 1).min(n - 1);
        visit(2 * j, j, 0.75);
        visit(2 * j, prev, 0.25);
        visit(2 * j + 1, j, 0.75);
        visit(2 * j + 1, next, 0.25);
    }
}

fn upsample_raw(src: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let ow = 2 * w;
    let mut rows = vec![0.0; planes * h * ow];
    for r in 0..planes * h {
        upsample_axis(w, |o, i, wt| rows[r * ow + o] += wt * src[r * w + i]);
    }
    let mut out = vec![0.0; planes * 2 * h * ow];
    for p in 0..planes {
        upsample_axis(h, |o, i, wt| {
            let d = (p * 2 * h + o) * ow;
            let s = (p * h + i) * ow;
            for x in 0..ow {
                out[d + x] += wt * rows[s + x];
            }
        });
    }
    out
}

fn upsample_adjoint(g: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let ow = 2 * w;
    let mut rows = vec![0.0; planes * h * ow];
    for p in 0..planes {
        upsample_axis(h, |o, i, wt| {
            let s = (p * 2 * h + o) * ow;
            let d = (p * h + i) * ow;
            for x in 0..ow {
                rows[d + x] += wt * g[s + x];
            }
        });
    }
    let mut out = vec![0.0; planes * h * w];
    for r in 0..planes * h {
        upsample_axis(w, |o, i, wt| out[r * w + i] += wt * rows[r * ow + o]);
    }
    out
}

/// Bilinear upsampling that exactly doubles the last two axes.
pub fn upsample2x(img: &Var) -> Result<Var> {
    let (planes, h, w) = spatial_dims(img.shape())?;
    let out = upsample_raw(img.value().data(), planes, h, w);
    let mut shape = img.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = 2 * h;
    shape[r - 1] = 2 * w;
    let value = Tensor::new(&shape, out)?;
    Var::from_op("upsample2x", value, vec![img.clone()], move |g, p| {
        Ok(vec![Some(Tensor::new(p[0].shape(), upsample_adjoint(g.data(), planes, h, w))?)])
    })
}

/// Blur variance of each volume level, in full-resolution pixel units.
pub fn composed_variances(sigma0: f64, depth: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(depth + 1);
    let mut acc = 0.0;
    let mut octave = 1.0;
    out.push(0.0);
    for _ in 0..depth {
        acc += sigma0 * sigma0 * octave;
        octave *= 4.0;
        out.push(acc);
    }
    out
}

/// `M + 1` blurred copies of a frame sharing its spatial shape.
#[derive(Clone, Debug)]
pub struct ScaleSpaceVolume {
    pub levels: Vec<Var>,
    pub sigma0: f64,
    pub depth: usize,
    pub composed_variances: Vec<f64>,
}

/// Build a scale-space volume with a Gaussian pyramid: blur with the fixed
/// `sigma0` kernel, record the level (step-upsampled back to full size),
/// downsample, repeat.
pub fn build_scale_space_volume(img: &Var, sigma0: f64, depth: usize) -> Result<ScaleSpaceVolume> {
    if !(sigma0 > 0.0) {
        return Err(Error::Domain(format!("sigma0 must be > 0, got {}", sigma0)));
    }
    if depth == 0 {
        return Err(Error::Domain("scale depth must be >= 1".into()));
    }
    let (_, h, w) = spatial_dims(img.shape())?;
    let factor = 1usize << (depth - 1);
    if h % factor != 0 || w % factor != 0 {
        return Err(dim_err!(
            "image {}x{} not divisible by 2^(M-1) = {} for scale depth {}",
            h,
            w,
            factor,
            depth
        ));
    }
    let kernel = create_gaussian_kernel(sigma0)?;
    let mut levels = vec![img.clone()];
    let mut current = img.clone();
    for i in 0..depth {
        current = gaussian_blur(&current, &kernel)?;
        let mut level = current.clone();
        for _ in 0..i {
            level = upsample2x(&level)?;
        }
        levels.push(level);
        if i + 1 < depth {
            current = downsample2x(&current)?;
        }
    }
    Ok(ScaleSpaceVolume {
        levels,
        sigma0,
        depth,
        composed_variances: composed_variances(sigma0, depth),
    })
}

/// Per-pixel displacement (pixels) and pyramid-level coordinate, each
/// `[N, 1, H, W]`.
#[derive(Clone, Debug)]
pub struct FlowField {
    pub dx: Var,
    pub dy: Var,
    pub scale: Var,
}

impl FlowField {
    pub fn new(dx: Var, dy: Var, scale: Var) -> Result<Self> {
        if dx.shape() != dy.shape() || dx.shape() != scale.shape() {
            return Err(dim_err!(
                "flow components disagree: {:?} {:?} {:?}",
                dx.shape(),
                dy.shape(),
                scale.shape()
            ));
        }
        if dx.shape().len() != 4 || dx.shape()[1] != 1 {
            return Err(dim_err!("flow components must be [N, 1, H, W], got {:?}", dx.shape()));
        }
        Ok(Self { dx, dy, scale })
    }

    /// Split a `[N, 3+, H, W]` network output into a flow field, mapping the
    /// unbounded scale channel to `[0, M]` with `M * sigmoid(.)`.
    pub fn from_network(raw: &Var, depth: usize) -> Result<Self> {
        if raw.shape().len() != 4 || raw.shape()[1] < 3 {
            return Err(dim_err!("flow head output must be [N, >=3, H, W], got {:?}", raw.shape()));
        }
        let dx = raw.narrow(1, 0, 1)?;
        let dy = raw.narrow(1, 1, 1)?;
        let scale = raw.narrow(1, 2, 1)?.sigmoid()?.mul_scalar(depth as f64)?;
        Self::new(dx, dy, scale)
    }

    /// Zero displacement at a constant scale.
    pub fn constant(n: usize, h: usize, w: usize, dx: f64, dy: f64, scale: f64) -> Self {
        let c = |v| Var::constant(Tensor::full(&[n, 1, h, w], v));
        Self { dx: c(dx), dy: c(dy), scale: c(scale) }
    }
}

/// Sampling stencil for one output pixel.
#[derive(Clone, Copy)]
struct Stencil {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    tx: f64,
    ty: f64,
    s0: usize,
    s1: usize,
    ts: f64,
    // whether the coordinate lies strictly inside its clamp range
    free_x: bool,
    free_y: bool,
    free_s: bool,
}

fn stencil(i: usize, j: usize, dx: f64, dy: f64, s: f64, h: usize, w: usize, depth: usize) -> Stencil {
    let xr = j as f64 + dx;
    let yr = i as f64 + dy;
    let xm = (w - 1) as f64;
    let ym = (h - 1) as f64;
    let x = xr.clamp(0.0, xm);
    let y = yr.clamp(0.0, ym);
    let sc = s.clamp(0.0, depth as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let s0 = sc.floor() as usize;
    Stencil {
        x0,
        x1: (x0 + 1).min(w - 1),
        y0,
        y1: (y0 + 1).min(h - 1),
        tx: x - x0 as f64,
        ty: y - y0 as f64,
        s0,
        s1: (s0 + 1).min(depth),
        ts: sc - s0 as f64,
        free_x: xr > 0.0 && xr < xm,
        free_y: yr > 0.0 && yr < ym,
        free_s: s > 0.0 && s < depth as f64,
    }
}

/// Trilinear sampling of the volume at `(j + dx, i + dy, scale)`: bilinear
/// within the two bracketing levels, linear across them. Spatial
/// coordinates clamp to the frame; scale clamps to `[0, M]`.
/// Differentiable in both the volume levels and the flow.
pub fn scale_space_warp(volume: &ScaleSpaceVolume, flow: &FlowField) -> Result<Var> {
    let depth = volume.levels.len() - 1;
    let shape = volume.levels[0].shape().to_vec();
    if shape.len() != 4 {
        return Err(dim_err!("volume levels must be [N, C, H, W], got {:?}", shape));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if volume.levels.iter().any(|l| l.shape() != shape.as_slice()) {
        return Err(dim_err!("volume levels disagree in shape"));
    }
    if flow.dx.shape() != [n, 1, h, w] {
        return Err(dim_err!("flow {:?} does not match volume {:?}", flow.dx.shape(), shape));
    }
    let plane = h * w;
    let mut out = vec![0.0; n * c * plane];
    {
        let lv: Vec<&[f64]> = volume.levels.iter().map(|l| l.value().data()).collect();
        let (fdx, fdy, fs) = (flow.dx.value().data(), flow.dy.value().data(), flow.scale.value().data());
        for b in 0..n {
            for i in 0..h {
                for j in 0..w {
                    let f = b * plane + i * w + j;
                    let st = stencil(i, j, fdx[f], fdy[f], fs[f], h, w, depth);
                    for ch in 0..c {
                        let base = (b * c + ch) * plane;
                        let bil = |l: &[f64]| {
                            let top = (1.0 - st.tx) * l[base + st.y0 * w + st.x0] + st.tx * l[base + st.y0 * w + st.x1];
                            let bot = (1.0 - st.tx) * l[base + st.y1 * w + st.x0] + st.tx * l[base + st.y1 * w + st.x1];
                            (1.0 - st.ty) * top + st.ty * bot
                        };
                        out[base + i * w + j] = (1.0 - st.ts) * bil(lv[st.s0]) + st.ts * bil(lv[st.s1]);
                    }
                }
            }
        }
    }
    let value = Tensor::new(&shape, out)?;
    let mut parents = volume.levels.clone();
    parents.push(flow.dx.clone());
    parents.push(flow.dy.clone());
    parents.push(flow.scale.clone());
    Var::from_op("scale_space_warp", value, parents, move |g, p| {
        let levels = &p[..=depth];
        let want_levels: Vec<bool> = levels.iter().map(|l| l.requires_grad()).collect();
        let want_flow = p[depth + 1].requires_grad() || p[depth + 2].requires_grad() || p[depth + 3].requires_grad();
        let mut glev: Vec<Option<Vec<f64>>> = want_levels.iter().map(|&wl| wl.then(|| vec![0.0; n * c * plane])).collect();
        let mut gdx = vec![0.0; n * plane];
        let mut gdy = vec![0.0; n * plane];
        let mut gs = vec![0.0; n * plane];
        let lv: Vec<&[f64]> = levels.iter().map(|l| l.value().data()).collect();
        let (fdx, fdy, fs) = (p[depth + 1].value().data(), p[depth + 2].value().data(), p[depth + 3].value().data());
        let gd = g.data();
        for b in 0..n {
            for i in 0..h {
                for j in 0..w {
                    let f = b * plane + i * w + j;
                    let st = stencil(i, j, fdx[f], fdy[f], fs[f], h, w, depth);
                    let corners = [
                        (st.y0 * w + st.x0, (1.0 - st.ty) * (1.0 - st.tx)),
                        (st.y0 * w + st.x1, (1.0 - st.ty) * st.tx),
                        (st.y1 * w + st.x0, st.ty * (1.0 - st.tx)),
                        (st.y1 * w + st.x1, st.ty * st.tx),
                    ];
                    for ch in 0..c {
                        let base = (b * c + ch) * plane;
                        let go = gd[base + i * w + j];
                        if go == 0.0 {
                            continue;
                        }
                        for (lvl, wl) in [(st.s0, 1.0 - st.ts), (st.s1, st.ts)] {
                            if let Some(gl) = glev[lvl].as_mut() {
                                for &(off, wc) in &corners {
                                    gl[base + off] += go * wl * wc;
                                }
                            }
                        }
                        if !want_flow {
                            continue;
                        }
                        let at = |l: &[f64], off: usize| l[base + off];
                        let mut dbx = 0.0;
                        let mut dby = 0.0;
                        let mut bil = [0.0; 2];
                        for (k, (lvl, wl)) in [(st.s0, 1.0 - st.ts), (st.s1, st.ts)].into_iter().enumerate() {
                            let l = lv[lvl];
                            let v00 = at(l, corners[0].0);
                            let v01 = at(l, corners[1].0);
                            let v10 = at(l, corners[2].0);
                            let v11 = at(l, corners[3].0);
                            dbx += wl * ((1.0 - st.ty) * (v01 - v00) + st.ty * (v11 - v10));
                            dby += wl * ((1.0 - st.tx) * (v10 - v00) + st.tx * (v11 - v01));
                            bil[k] = corners[0].1 * v00 + corners[1].1 * v01 + corners[2].1 * v10 + corners[3].1 * v11;
                        }
                        if st.free_x {
                            gdx[f] += go * dbx;
                        }
                        if st.free_y {
                            gdy[f] += go * dby;
                        }
                        if st.free_s && st.s1 != st.s0 {
                            gs[f] += go * (bil[1] - bil[0]);
                        }
                    }
                }
            }
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(p.len());
        for gl in glev.drain(..) {
            grads.push(gl.map(|d| Tensor::new(&shape, d)).transpose()?);
        }
        let fshape = [n, 1, h, w];
        grads.push(p[depth + 1].requires_grad().then(|| Tensor::new(&fshape, gdx)).transpose()?);
        grads.push(p[depth + 2].requires_grad().then(|| Tensor::new(&fshape, gdy)).transpose()?);
        grads.push(p[depth + 3].requires_grad().then(|| Tensor::new(&fshape, gs)).transpose()?);
        Ok(grads)
    })
}
