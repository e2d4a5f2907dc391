use rand::Rng;

use super::{glorot_limit, Meta};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Fully connected layer `y = x W^T + b`, weight layout `(out, in)`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub(super) meta: Meta,
    pub(super) weight: Tensor,
    pub(super) bias: Tensor,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let limit = glorot_limit(in_features, out_features);
        Dense {
            meta: Meta::fresh(),
            weight: Tensor::uniform(&[out_features, in_features], limit, rng),
            bias: Tensor::zeros(&[out_features]),
        }
    }

    pub fn from_parts(weight: Tensor, bias: Tensor) -> Result<Self> {
        let ws = weight.shape();
        if ws.len() != 2 || bias.shape() != [ws[0]] {
            return Err(Error::InvalidShape {
                shape: ws.to_vec(),
                reason: "dense needs an (out, in) weight and an (out) bias".into(),
            });
        }
        Ok(Dense {
            meta: Meta::fresh(),
            weight,
            bias,
        })
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    fn check(&self, input: &Tensor) -> Result<usize> {
        let s = input.shape();
        if s.len() != 2 || s[1] != self.in_features() {
            return Err(Error::ShapeMismatch {
                layer: "dense",
                expected: vec![s[0], self.in_features()],
                got: s.to_vec(),
            });
        }
        Ok(s[0])
    }

    pub(super) fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.len() != 2 || input[1] != self.in_features() {
            return Err(Error::ShapeMismatch {
                layer: "dense",
                expected: vec![input[0], self.in_features()],
                got: input.to_vec(),
            });
        }
        Ok(vec![input[0], self.out_features()])
    }

    pub(super) fn run(&self, input: &Tensor) -> Result<Tensor> {
        let n = self.check(input)?;
        let (i, o) = (self.in_features(), self.out_features());
        let mut out = Tensor::zeros(&[n, o]);
        for r in 0..n {
            out.row_mut(r).copy_from_slice(self.bias.data());
        }
        gemm(n, i, o, 1.0, input.data(), false, self.weight.data(), true, 1.0, out.data_mut());
        Ok(out)
    }

    pub(super) fn grads(&self, input: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let n = self.check(input)?;
        let (i, o) = (self.in_features(), self.out_features());
        let mut grad_in = Tensor::zeros(&[n, i]);
        gemm(n, o, i, 1.0, grad_out.data(), false, self.weight.data(), false, 0.0, grad_in.data_mut());
        let mut dw = Tensor::zeros(&[o, i]);
        gemm(o, n, i, 1.0, grad_out.data(), true, input.data(), false, 0.0, dw.data_mut());
        let mut db = Tensor::zeros(&[o]);
        for row in grad_out.iter_rows() {
            for (b, g) in db.data_mut().iter_mut().zip(row) {
                *b += g;
            }
        }
        Ok((grad_in, vec![dw, db]))
    }
}
