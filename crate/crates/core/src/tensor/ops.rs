//! Elementwise, reduction and shape ops.

use super::{Tensor, Var};
use crate::error::{dim_err, Error, Result};

/// Denominators smaller than this in magnitude are rejected by `div`.
pub const DIV_EPS: f64 = 1e-12;

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(dim_err!("cannot broadcast {:?} with {:?}", a, b)),
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside `out` (0 along broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + rank - shape.len();
        strides[oi] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visit every output index together with the matching offsets in two
/// broadcast operands.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n: usize = out.iter().product();
    if n == 0 {
        return;
    }
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for i in 0..n {
        f(i, oa, ob);
        for d in (0..rank).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

fn binary_forward(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let out = broadcast_shape(a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let n = out.iter().product();
    let mut data = vec![0.0; n];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&out, &sa, &sb, |i, ia, ib| data[i] = f(ad[ia], bd[ib]));
    Tensor::new(&out, data)
}

/// Gradients of a broadcast binary op given per-element partials.
fn binary_backward(
    g: &Tensor,
    a: &Tensor,
    b: &Tensor,
    want_a: bool,
    want_b: bool,
    da: impl Fn(f64, f64) -> f64,
    db: impl Fn(f64, f64) -> f64,
) -> (Option<Tensor>, Option<Tensor>) {
    let out = g.shape().to_vec();
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let mut ga = want_a.then(|| Tensor::zeros(a.shape()));
    let mut gb = want_b.then(|| Tensor::zeros(b.shape()));
    let (ad, bd, gd) = (a.data(), b.data(), g.data());
    for_each_broadcast(&out, &sa, &sb, |i, ia, ib| {
        let (x, y) = (ad[ia], bd[ib]);
        if let Some(ga) = ga.as_mut() {
            ga.data_mut()[ia] += gd[i] * da(x, y);
        }
        if let Some(gb) = gb.as_mut() {
            gb.data_mut()[ib] += gd[i] * db(x, y);
        }
    });
    (ga, gb)
}

macro_rules! binary_op {
    ($name:ident, $label:literal, $f:expr, $da:expr, $db:expr) => {
        pub fn $name(&self, other: &Var) -> Result<Var> {
            let value = binary_forward(self.value(), other.value(), $f)?;
            Var::from_op($label, value, vec![self.clone(), other.clone()], |g, p| {
                let (ga, gb) = binary_backward(
                    g,
                    p[0].value(),
                    p[1].value(),
                    p[0].requires_grad(),
                    p[1].requires_grad(),
                    $da,
                    $db,
                );
                Ok(vec![ga, gb])
            })
        }
    };
}

impl Var {
    binary_op!(add, "add", |a, b| a + b, |_, _| 1.0, |_, _| 1.0);
    binary_op!(sub, "sub", |a, b| a - b, |_, _| 1.0, |_, _| -1.0);
    binary_op!(mul, "mul", |a, b| a * b, |_, b| b, |a, _| a);

    /// Elementwise quotient. Denominators within [`DIV_EPS`] of zero are a
    /// numeric error.
    pub fn div(&self, other: &Var) -> Result<Var> {
        if let Some(pos) = other.value().data().iter().position(|d| d.abs() < DIV_EPS) {
            return Err(Error::Numeric(format!(
                "division by near-zero denominator {} at flat index {}",
                other.value().data()[pos],
                pos
            )));
        }
        let value = binary_forward(self.value(), other.value(), |a, b| a / b)?;
        Var::from_op("div", value, vec![self.clone(), other.clone()], |g, p| {
            let (ga, gb) = binary_backward(
                g,
                p[0].value(),
                p[1].value(),
                p[0].requires_grad(),
                p[1].requires_grad(),
                |_, b| 1.0 / b,
                |a, b| -a / (b * b),
            );
            Ok(vec![ga, gb])
        })
    }

    /// Elementwise map with derivative `df(x, y)` where `y = f(x)`.
    pub fn unary(
        &self,
        label: &'static str,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Result<Var> {
        let value = self.value().map(f);
        let out = value.clone();
        Var::from_op(label, value, vec![self.clone()], move |g, p| {
            let x = p[0].value();
            let mut gx = g.clone();
            for ((gv, &xv), &yv) in gx.data_mut().iter_mut().zip(x.data()).zip(out.data()) {
                *gv *= df(xv, yv);
            }
            Ok(vec![Some(gx)])
        })
    }

    pub fn neg(&self) -> Result<Var> {
        self.mul_scalar(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var> {
        self.unary("add_scalar", move |x| x + c, |_, _| 1.0)
    }

    pub fn mul_scalar(&self, c: f64) -> Result<Var> {
        self.unary("mul_scalar", move |x| x * c, move |_, _| c)
    }

    pub fn square(&self) -> Result<Var> {
        self.unary("square", |x| x * x, |x, _| 2.0 * x)
    }

    pub fn exp(&self) -> Result<Var> {
        self.unary("exp", f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Result<Var> {
        if let Some(v) = self.value().data().iter().find(|v| **v <= 0.0) {
            return Err(Error::Numeric(format!("ln of non-positive value {}", v)));
        }
        self.unary("ln", f64::ln, |x, _| 1.0 / x)
    }

    pub fn abs(&self) -> Result<Var> {
        self.unary("abs", f64::abs, |x, _| if x < 0.0 { -1.0 } else { 1.0 })
    }

    pub fn tanh(&self) -> Result<Var> {
        self.unary("tanh", f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&self) -> Result<Var> {
        self.unary("sigmoid", sigmoid, |_, y| y * (1.0 - y))
    }

    /// ln(1 + e^x), evaluated without overflow.
    pub fn softplus(&self) -> Result<Var> {
        self.unary("softplus", softplus, |x, _| sigmoid(x))
    }

    pub fn relu(&self) -> Result<Var> {
        self.unary("relu", |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(&self, slope: f64) -> Result<Var> {
        self.unary(
            "leaky_relu",
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    /// Standard normal CDF.
    pub fn normal_cdf(&self) -> Result<Var> {
        self.unary("normal_cdf", normal_cdf, |x, _| INV_SQRT_2PI * (-0.5 * x * x).exp())
    }

    /// `max(x, bound)`. The gradient passes where `x >= bound` or where it
    /// would push `x` upward, so values stuck at the bound can recover.
    pub fn lower_bound(&self, bound: f64) -> Result<Var> {
        let value = self.value().map(|x| x.max(bound));
        Var::from_op("lower_bound", value, vec![self.clone()], move |g, p| {
            let mut gx = g.clone();
            for (gv, &x) in gx.data_mut().iter_mut().zip(p[0].value().data()) {
                if x < bound && *gv > 0.0 {
                    *gv = 0.0;
                }
            }
            Ok(vec![Some(gx)])
        })
    }

    pub fn sum(&self) -> Result<Var> {
        let value = Tensor::scalar(self.value().sum());
        Var::from_op("sum", value, vec![self.clone()], |g, p| {
            Ok(vec![Some(Tensor::full(p[0].shape(), g.data()[0]))])
        })
    }

    pub fn mean(&self) -> Result<Var> {
        let n = self.value().len().max(1) as f64;
        self.sum()?.mul_scalar(1.0 / n)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let value = self.value().reshape(shape)?;
        Var::from_op("reshape", value, vec![self.clone()], |g, p| {
            Ok(vec![Some(g.reshape(p[0].shape())?)])
        })
    }

    /// Swap the two leading axes: `[A, B, ...] -> [B, A, ...]`.
    pub fn transpose01(&self) -> Result<Var> {
        let value = swap01(self.value())?;
        Var::from_op("transpose01", value, vec![self.clone()], |g, _| Ok(vec![Some(swap01(g)?)]))
    }

    /// Concatenate along `axis`.
    pub fn concat(items: &[Var], axis: usize) -> Result<Var> {
        let first = items
            .first()
            .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        let rank = first.shape().len();
        if axis >= rank {
            return Err(dim_err!("concat axis {} out of range for rank {}", axis, rank));
        }
        for v in items {
            let s = v.shape();
            if s.len() != rank
                || s.iter()
                    .zip(first.shape())
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(dim_err!("concat shape mismatch {:?} vs {:?}", s, first.shape()));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let sizes: Vec<usize> = items.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = sizes.iter().sum();
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &s) in items.iter().zip(&sizes) {
                let chunk = s * inner;
                data.extend_from_slice(&v.value().data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::new(&shape, data)?;
        Var::from_op("concat", value, items.to_vec(), move |g, p| {
            let mut out: Vec<Option<Tensor>> = Vec::with_capacity(p.len());
            let mut offset = 0;
            for (v, &s) in p.iter().zip(&sizes) {
                if v.requires_grad() {
                    let mut d = Vec::with_capacity(outer * s * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        d.extend_from_slice(&g.data()[start..start + s * inner]);
                    }
                    out.push(Some(Tensor::new(v.shape(), d)?));
                } else {
                    out.push(None);
                }
                offset += s;
            }
            Ok(out)
        })
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(dim_err!(
                "narrow({}, {}, {}) out of range for {:?}",
                axis,
                start,
                len,
                shape
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis];
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        let src = self.value().data();
        for o in 0..outer {
            let s = (o * full + start) * inner;
            data.extend_from_slice(&src[s..s + len * inner]);
        }
        let value = Tensor::new(&out_shape, data)?;
        Var::from_op("narrow", value, vec![self.clone()], move |g, _| {
            let mut gx = Tensor::zeros(&shape);
            let gd = gx.data_mut();
            for o in 0..outer {
                let s = (o * full + start) * inner;
                gd[s..s + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            Ok(vec![Some(gx)])
        })
    }

    /// Batched matrix product `[B, M, K] x [B, K, N] -> [B, M, N]`.
    pub fn bmm(&self, other: &Var) -> Result<Var> {
        let (a, b) = (self.value(), other.value());
        if a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] || a.shape()[2] != b.shape()[1] {
            return Err(dim_err!("bmm shape mismatch {:?} x {:?}", a.shape(), b.shape()));
        }
        let (bs, m, k, n) = (a.shape()[0], a.shape()[1], a.shape()[2], b.shape()[2]);
        let value = Tensor::new(&[bs, m, n], bmm_raw(a.data(), b.data(), bs, m, k, n, false, false))?;
        Var::from_op("bmm", value, vec![self.clone(), other.clone()], move |g, p| {
            let ga = p[0]
                .requires_grad()
                .then(|| Tensor::new(&[bs, m, k], bmm_raw(g.data(), p[1].value().data(), bs, m, n, k, false, true)))
                .transpose()?;
            let gb = p[1]
                .requires_grad()
                .then(|| Tensor::new(&[bs, k, n], bmm_raw(p[0].value().data(), g.data(), bs, k, m, n, true, false)))
                .transpose()?;
            Ok(vec![ga, gb])
        })
    }
}

/// `C[b] = op(A[b]) * op(B[b])` with logical shapes `[m, k] x [k, n]`.
#[allow(clippy::too_many_arguments)]
fn bmm_raw(a: &[f64], b: &[f64], bs: usize, m: usize, k: usize, n: usize, ta: bool, tb: bool) -> Vec<f64> {
    let mut c = vec![0.0; bs * m * n];
    for i in 0..bs {
        let ai = &a[i * m * k..(i + 1) * m * k];
        let bi = &b[i * k * n..(i + 1) * k * n];
        let ci = &mut c[i * m * n..(i + 1) * m * n];
        for r in 0..m {
            for col in 0..n {
                let mut s = 0.0;
                for q in 0..k {
                    let av = if ta { ai[q * m + r] } else { ai[r * k + q] };
                    let bv = if tb { bi[col * k + q] } else { bi[q * n + col] };
                    s += av * bv;
                }
                ci[r * n + col] = s;
            }
        }
    }
    c
}

fn swap01(t: &Tensor) -> Result<Tensor> {
    let s = t.shape();
    if s.len() < 2 {
        return Err(dim_err!("transpose01 needs rank >= 2, got {:?}", s));
    }
    let (a, b) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    let mut data = vec![0.0; t.len()];
    for i in 0..a {
        for j in 0..b {
            let src = (i * b + j) * inner;
            let dst = (j * a + i) * inner;
            data[dst..dst + inner].copy_from_slice(&t.data()[src..src + inner]);
        }
    }
    let mut shape = s.to_vec();
    shape.swap(0, 1);
    Tensor::new(&shape, data)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for positive arguments.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Standard normal CDF via `erfc`, accurate in both tails.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}
