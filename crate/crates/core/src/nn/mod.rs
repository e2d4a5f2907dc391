//! Layers with explicit forward and backward passes.
//!
//! There is no autodiff graph. [`Layer::forward`] returns the output together
//! with a [`Context`] that holds whatever the matching [`Layer::backward`]
//! call needs; a context is bound to the layer instance and to the parameter
//! version it was produced under, so replaying it after an update (or on a
//! different layer) is rejected instead of silently producing wrong gradients.

mod checkpoint;
mod conv;
mod dense;
mod loss;
mod optim;

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_layers, save_layers, Manifest, ManifestEntry, TensorEntry};
pub use conv::{ConvTranspose2d, Conv2d};
pub use dense::Dense;
pub use loss::mse_loss;
pub use optim::{Optimizer, OptimizerKind};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

static NEXT_LAYER_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Identity of a layer instance plus a counter bumped whenever its
/// parameters are handed out mutably.
#[derive(Debug)]
pub(crate) struct Meta {
    id: u64,
    version: u64,
}

impl Meta {
    fn fresh() -> Self {
        Meta {
            id: NEXT_LAYER_ID.fetch_add(1, Ordering::Relaxed),
            version: 0,
        }
    }
}

impl Clone for Meta {
    // a clone is a distinct layer; contexts of the original do not apply to it
    fn clone(&self) -> Self {
        Meta::fresh()
    }
}

/// Parameter-free activation.
#[derive(Clone, Debug)]
pub struct Relu {
    meta: Meta,
}

/// Collapses every axis after the batch axis.
#[derive(Clone, Debug)]
pub struct Flatten {
    meta: Meta,
}

/// Views `(n, k)` rows as `(n, shape...)` with `product(shape) == k`.
#[derive(Clone, Debug)]
pub struct Reshape {
    meta: Meta,
    shape: Vec<usize>,
}

impl Reshape {
    pub fn target(&self) -> &[usize] {
        &self.shape
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d,
    ConvTranspose2d,
    Dense,
    Relu,
    Flatten,
    Reshape,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv2d => "conv2d",
            LayerKind::ConvTranspose2d => "conv_transpose2d",
            LayerKind::Dense => "dense",
            LayerKind::Relu => "relu",
            LayerKind::Flatten => "flatten",
            LayerKind::Reshape => "reshape",
        }
    }
}

#[derive(Clone, Debug)]
pub enum Layer {
    Conv2d(Conv2d),
    ConvTranspose2d(ConvTranspose2d),
    Dense(Dense),
    Relu(Relu),
    Flatten(Flatten),
    Reshape(Reshape),
}

/// Saved state of one forward call.
#[derive(Debug)]
pub struct Context {
    owner: u64,
    version: u64,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    input: Option<Tensor>,
}

impl Context {
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }
}

/// Gradients of one backward call. `params` follows [`Layer::params`] order.
#[derive(Debug)]
pub struct Gradients {
    pub input: Tensor,
    pub params: Vec<Tensor>,
}

impl Layer {
    pub fn relu() -> Self {
        Layer::Relu(Relu { meta: Meta::fresh() })
    }

    pub fn flatten() -> Self {
        Layer::Flatten(Flatten { meta: Meta::fresh() })
    }

    pub fn reshape(shape: Vec<usize>) -> Self {
        Layer::Reshape(Reshape {
            meta: Meta::fresh(),
            shape,
        })
    }

    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv2d(_) => LayerKind::Conv2d,
            Layer::ConvTranspose2d(_) => LayerKind::ConvTranspose2d,
            Layer::Dense(_) => LayerKind::Dense,
            Layer::Relu(_) => LayerKind::Relu,
            Layer::Flatten(_) => LayerKind::Flatten,
            Layer::Reshape(_) => LayerKind::Reshape,
        }
    }

    fn meta(&self) -> &Meta {
        match self {
            Layer::Conv2d(l) => &l.meta,
            Layer::ConvTranspose2d(l) => &l.meta,
            Layer::Dense(l) => &l.meta,
            Layer::Relu(l) => &l.meta,
            Layer::Flatten(l) => &l.meta,
            Layer::Reshape(l) => &l.meta,
        }
    }

    fn meta_mut(&mut self) -> &mut Meta {
        match self {
            Layer::Conv2d(l) => &mut l.meta,
            Layer::ConvTranspose2d(l) => &mut l.meta,
            Layer::Dense(l) => &mut l.meta,
            Layer::Relu(l) => &mut l.meta,
            Layer::Flatten(l) => &mut l.meta,
            Layer::Reshape(l) => &mut l.meta,
        }
    }

    /// Weight then bias for parameterized layers, empty otherwise.
    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Conv2d(l) => vec![&l.weight, &l.bias],
            Layer::ConvTranspose2d(l) => vec![&l.weight, &l.bias],
            Layer::Dense(l) => vec![&l.weight, &l.bias],
            _ => Vec::new(),
        }
    }

    /// Mutable parameters. Invalidates every outstanding [`Context`] of this layer.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.meta_mut().version += 1;
        match self {
            Layer::Conv2d(l) => vec![&mut l.weight, &mut l.bias],
            Layer::ConvTranspose2d(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Dense(l) => vec![&mut l.weight, &mut l.bias],
            _ => Vec::new(),
        }
    }

    /// Output shape for a given input shape, without computing anything.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |expected: Vec<usize>| Error::ShapeMismatch {
            layer: self.kind().name(),
            expected,
            got: input.to_vec(),
        };
        match self {
            Layer::Conv2d(l) => {
                if input.len() != 4 || input[1] != l.in_channels() {
                    return Err(mismatch(vec![0, l.in_channels(), 0, 0]));
                }
                l.output_shape(input)
            }
            Layer::ConvTranspose2d(l) => {
                if input.len() != 4 || input[1] != l.in_channels() {
                    return Err(mismatch(vec![0, l.in_channels(), 0, 0]));
                }
                l.output_shape(input)
            }
            Layer::Dense(l) => l.output_shape(input),
            Layer::Relu(_) => Ok(input.to_vec()),
            Layer::Flatten(_) => {
                if input.len() < 2 {
                    return Err(mismatch(vec![0, 0]));
                }
                Ok(vec![input[0], input[1..].iter().product()])
            }
            Layer::Reshape(l) => {
                let k: usize = l.shape.iter().product();
                if input.len() != 2 || input[1] != k {
                    return Err(mismatch(vec![input[0], k]));
                }
                let mut out = vec![input[0]];
                out.extend_from_slice(&l.shape);
                Ok(out)
            }
        }
    }

    /// Forward pass without saving anything for backward.
    pub fn apply(&self, input: &Tensor) -> Result<Tensor> {
        let out = match self {
            Layer::Conv2d(l) => l.run(input)?,
            Layer::ConvTranspose2d(l) => l.run(input)?,
            Layer::Dense(l) => l.run(input)?,
            Layer::Relu(_) => {
                let mut out = input.clone();
                for v in out.data_mut() {
                    *v = v.max(0.0);
                }
                out
            }
            Layer::Flatten(_) | Layer::Reshape(_) => {
                let shape = self.output_shape(input.shape())?;
                input.clone().reshape(&shape)?
            }
        };
        if !out.is_finite() {
            return Err(Error::NonFinite(format!("{} output", self.kind().name())));
        }
        Ok(out)
    }

    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, Context)> {
        let out = self.apply(input)?;
        let keep = !matches!(self, Layer::Flatten(_) | Layer::Reshape(_));
        let meta = self.meta();
        let ctx = Context {
            owner: meta.id,
            version: meta.version,
            input_shape: input.shape().to_vec(),
            output_shape: out.shape().to_vec(),
            input: keep.then(|| input.clone()),
        };
        Ok((out, ctx))
    }

    pub fn backward(&self, grad_out: &Tensor, ctx: &Context) -> Result<Gradients> {
        let meta = self.meta();
        let name = self.kind().name();
        if ctx.owner != meta.id || ctx.version != meta.version {
            return Err(Error::StaleContext { layer: name });
        }
        if grad_out.shape() != ctx.output_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                layer: name,
                expected: ctx.output_shape.clone(),
                got: grad_out.shape().to_vec(),
            });
        }
        let saved = || ctx.input.as_ref().ok_or(Error::StaleContext { layer: name });
        let (input, params) = match self {
            Layer::Conv2d(l) => l.grads(saved()?, grad_out)?,
            Layer::ConvTranspose2d(l) => l.grads(saved()?, grad_out)?,
            Layer::Dense(l) => l.grads(saved()?, grad_out)?,
            Layer::Relu(_) => {
                let x = saved()?;
                let mut g = grad_out.clone();
                for (gv, xv) in g.data_mut().iter_mut().zip(x.data()) {
                    if *xv <= 0.0 {
                        *gv = 0.0;
                    }
                }
                (g, Vec::new())
            }
            Layer::Flatten(_) | Layer::Reshape(_) => {
                (grad_out.clone().reshape(&ctx.input_shape)?, Vec::new())
            }
        };
        if !input.is_finite() || params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite(format!("{name} gradient")));
        }
        Ok(Gradients { input, params })
    }
}

/// An ordered stack of layers.
#[derive(Clone, Debug, Default)]
pub struct Sequential {
    layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Sequential { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn into_layers(self) -> Vec<Layer> {
        self.layers
    }

    pub fn apply(&self, input: &Tensor) -> Result<Tensor> {
        let mut x = self.layers.first().map_or(Ok(input.clone()), |l| l.apply(input))?;
        for layer in self.layers.iter().skip(1) {
            x = layer.apply(&x)?;
        }
        Ok(x)
    }

    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, Vec<Context>)> {
        let mut ctxs = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for layer in &self.layers {
            let (y, ctx) = layer.forward(&x)?;
            ctxs.push(ctx);
            x = y;
        }
        Ok((x, ctxs))
    }

    /// Returns the input gradient and the parameter gradients flattened in
    /// [`Sequential::params`] order.
    pub fn backward(&self, grad_out: &Tensor, ctxs: &[Context]) -> Result<(Tensor, Vec<Tensor>)> {
        if ctxs.len() != self.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "{} contexts for {} layers",
                ctxs.len(),
                self.layers.len()
            )));
        }
        let mut g = grad_out.clone();
        let mut per_layer = Vec::with_capacity(self.layers.len());
        for (layer, ctx) in self.layers.iter().zip(ctxs).rev() {
            let grads = layer.backward(&g, ctx)?;
            per_layer.push(grads.params);
            g = grads.input;
        }
        per_layer.reverse();
        Ok((g, per_layer.into_iter().flatten().collect()))
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.layers
            .iter()
            .try_fold(input.to_vec(), |shape, l| l.output_shape(&shape))
    }
}
