//! Named parameters and the convolutional building blocks of the models.

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Tensor, Var};
use rand::Rng;
use std::collections::HashMap;

/// Negative slope of the leaky ReLU between backbone blocks.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// A learned tensor with its unique path inside a model.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Var,
}

/// Ordered collection of a model's parameters. Values are leaves that
/// require gradients; updating a parameter replaces its leaf.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Usage(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            value: Var::leaf(value, true),
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Var {
        &self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn find(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    /// Total number of scalar weights.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.value().len()).sum()
    }

    /// Replace the value of parameter `i` (in store order).
    pub fn set(&mut self, i: usize, value: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(i)
            .ok_or_else(|| Error::Usage(format!("parameter index {i} out of range")))?;
        if p.value.shape() != value.shape() {
            return Err(dim_err!(
                "parameter {} has shape {:?}, got {:?}",
                p.name,
                p.value.shape(),
                value.shape()
            ));
        }
        p.value = Var::leaf(value, true);
        Ok(())
    }

    pub fn replace(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        self.set(id.0, value)
    }

    pub fn set_by_name(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::Usage(format!("unknown parameter {name}")))?;
        self.set(i, value)
    }

    /// Gradients from the last backward pass, in store order.
    pub fn grads(&self) -> Vec<Option<Tensor>> {
        self.params.iter().map(|p| p.value.grad()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Kaiming-uniform for a leaky-ReLU network.
    Kaiming,
    /// Zero weights (the layer initially outputs its bias).
    Zero,
}

/// Square-kernel convolution or transposed convolution with bias.
/// Padding is `kernel / 2`; transposed layers use `output_padding =
/// stride - 1` so that a stride-2 encoder block and a stride-2 decoder
/// block are exact shape inverses.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
    pub transposed: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub transposed: bool,
}

impl ConvSpec {
    pub fn conv(in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        Self { in_ch, out_ch, kernel, stride, transposed: false }
    }

    pub fn deconv(in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        Self { in_ch, out_ch, kernel, stride, transposed: true }
    }
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamStore, rng: &mut R, name: &str, spec: ConvSpec, init: Init) -> Result<Self> {
        let k = spec.kernel;
        let wshape = if spec.transposed {
            [spec.in_ch, spec.out_ch, k, k]
        } else {
            [spec.out_ch, spec.in_ch, k, k]
        };
        let weight = match init {
            Init::Zero => Tensor::zeros(&wshape),
            Init::Kaiming => {
                let mut fan_in = (spec.in_ch * k * k) as f64;
                if spec.transposed {
                    fan_in /= (spec.stride * spec.stride) as f64;
                }
                let gain = 2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE);
                let bound = (3.0 * gain / fan_in).sqrt();
                Tensor::uniform(&wshape, -bound, bound, rng)
            }
        };
        let weight = ps.add(&format!("{name}.weight"), weight)?;
        let bias = ps.add(&format!("{name}.bias"), Tensor::zeros(&[spec.out_ch]))?;
        Ok(Self {
            weight,
            bias,
            stride: spec.stride,
            padding: k / 2,
            transposed: spec.transposed,
        })
    }

    pub fn forward(&self, ps: &ParamStore, x: &Var) -> Result<Var> {
        let (w, b) = (ps.get(self.weight), ps.get(self.bias));
        if self.transposed {
            x.conv2d_transpose(w, Some(b), self.stride, self.padding, self.stride - 1)
        } else {
            x.conv2d(w, Some(b), self.stride, self.padding)
        }
    }
}

/// Convolutions joined by leaky ReLUs (none after the last layer).
#[derive(Clone, Debug)]
pub struct ConvStack {
    pub layers: Vec<Conv2d>,
}

impl ConvStack {
    /// `specs` are built in order under `name.0`, `name.1`, ...; the last
    /// layer uses `last_init`.
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        rng: &mut R,
        name: &str,
        specs: &[ConvSpec],
        last_init: Init,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let init = if i + 1 == specs.len() { last_init } else { Init::Kaiming };
            layers.push(Conv2d::new(ps, rng, &format!("{name}.{i}"), *spec, init)?);
        }
        Ok(Self { layers })
    }

    pub fn forward(&self, ps: &ParamStore, x: &Var) -> Result<Var> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(ps, &h)?;
            if i + 1 < self.layers.len() {
                h = h.leaky_relu(LEAKY_SLOPE)?;
            }
        }
        Ok(h)
    }

    pub fn last(&self) -> &Conv2d {
        self.layers.last().expect("empty conv stack")
    }
}

/// `depth` stride-2 5x5 convolutions: `in_ch -> width -> ... -> out_ch`.
pub fn analysis_spec(in_ch: usize, width: usize, out_ch: usize, depth: usize) -> Vec<ConvSpec> {
    (0..depth)
        .map(|i| {
            let a = if i == 0 { in_ch } else { width };
            let b = if i + 1 == depth { out_ch } else { width };
            ConvSpec::conv(a, b, 5, 2)
        })
        .collect()
}

/// Mirror of [`analysis_spec`] with stride-2 5x5 transposed convolutions.
pub fn synthesis_spec(in_ch: usize, width: usize, out_ch: usize, depth: usize) -> Vec<ConvSpec> {
    (0..depth)
        .map(|i| {
            let a = if i == 0 { in_ch } else { width };
            let b = if i + 1 == depth { out_ch } else { width };
            ConvSpec::deconv(a, b, 5, 2)
        })
        .collect()
}

/// Hyper-analysis: a 3x3 stride-1 block followed by a 5x5 stride-2 block.
pub fn hyper_analysis_spec(latent: usize, hyper: usize) -> Vec<ConvSpec> {
    vec![ConvSpec::conv(latent, hyper, 3, 1), ConvSpec::conv(hyper, hyper, 5, 2)]
}

/// Three 3x3 stride-1 blocks at full resolution.
pub fn pixel_cnn_spec(in_ch: usize, width: usize, out_ch: usize) -> Vec<ConvSpec> {
    vec![
        ConvSpec::conv(in_ch, width, 3, 1),
        ConvSpec::conv(width, width, 3, 1),
        ConvSpec::conv(width, out_ch, 3, 1),
    ]
}
