//! The convolutional autoencoder.
//!
//! The encoder is a stack of stride-2 convolutions with ReLU, flattened into
//! a linear embedding of dimension `d`. The decoder mirrors it: a dense layer
//! back to the last feature-map volume, then transposed convolutions whose
//! output padding is chosen so every stage lands exactly on the extent the
//! matching encoder stage consumed. Hidden layers use ReLU; the embedding and
//! the reconstruction are linear.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, ConvTranspose2d, Conv2d, Dense, Layer, OptimizerKind, Optimizer, Sequential};
use crate::tensor::Tensor;

/// Batch size used when encoding or decoding whole datasets.
pub const INFERENCE_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvStage {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvStage {
    pub fn padding(&self) -> usize {
        self.kernel / 2
    }
}

/// Architecture of the autoencoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaeConfig {
    /// `(channels, height, width)` of one input image.
    pub input: [usize; 3],
    pub embedding_dim: usize,
    pub stages: Vec<ConvStage>,
    /// Seed for weight initialization.
    pub seed: u64,
}

impl CaeConfig {
    /// 32/64/128 filters with 5/5/3 kernels, all stride 2, embedding of 10.
    pub fn dcec(input: [usize; 3]) -> Self {
        CaeConfig {
            input,
            embedding_dim: 10,
            stages: vec![
                ConvStage { filters: 32, kernel: 5, stride: 2 },
                ConvStage { filters: 64, kernel: 5, stride: 2 },
                ConvStage { filters: 128, kernel: 3, stride: 2 },
            ],
            seed: 0,
        }
    }

    pub fn mnist() -> Self {
        Self::dcec([1, 28, 28])
    }

    pub fn usps() -> Self {
        Self::dcec([1, 16, 16])
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Spatial extents entering each stage, followed by the final extent.
    pub fn extents(&self) -> Result<Vec<(usize, usize)>> {
        if self.embedding_dim == 0 || self.input.contains(&0) || self.stages.is_empty() {
            return Err(Error::InvalidArgument(
                "autoencoder needs a positive input shape, embedding dimension and at least one stage".into(),
            ));
        }
        let mut extents = vec![(self.input[1], self.input[2])];
        for (i, st) in self.stages.iter().enumerate() {
            if st.filters == 0 || st.stride == 0 || st.kernel % 2 == 0 {
                return Err(Error::InvalidArgument(format!(
                    "stage {i}: filters and stride must be positive and the kernel odd"
                )));
            }
            let (h, w) = *extents.last().expect("non-empty");
            for e in [h, w] {
                if e < st.stride {
                    return Err(Error::SpatialUnderflow {
                        stage: i,
                        extent: e,
                        stride: st.stride,
                    });
                }
            }
            let p = st.padding();
            extents.push(((h + 2 * p - st.kernel) / st.stride + 1, (w + 2 * p - st.kernel) / st.stride + 1));
        }
        Ok(extents)
    }
}

/// Optimization settings for reconstruction-only pretraining.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    /// Stop early once an epoch's mean loss falls below this.
    pub target_loss: Option<f64>,
    /// Seed for mini-batch shuffling.
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 200,
            batch_size: 256,
            optimizer: OptimizerKind::ADAM,
            learning_rate: 1e-3,
            target_loss: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean reconstruction loss of every epoch run.
    pub history: Vec<f64>,
    pub reached_target: bool,
}

#[derive(Clone, Debug)]
pub struct CaeModel {
    config: CaeConfig,
    encoder: Sequential,
    decoder: Sequential,
    history: Vec<f64>,
}

impl CaeModel {
    /// Builds a freshly initialized model (Glorot-uniform weights, zero biases).
    pub fn build(config: &CaeConfig) -> Result<Self> {
        let extents = config.extents()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut encoder = Vec::new();
        let mut channels = config.input[0];
        for st in &config.stages {
            encoder.push(Layer::Conv2d(Conv2d::new(channels, st.filters, st.kernel, st.stride, st.padding(), &mut rng)));
            encoder.push(Layer::relu());
            channels = st.filters;
        }
        let (fh, fw) = *extents.last().expect("non-empty");
        let flat = channels * fh * fw;
        encoder.push(Layer::flatten());
        encoder.push(Layer::Dense(Dense::new(flat, config.embedding_dim, &mut rng)));

        let mut decoder = vec![
            Layer::Dense(Dense::new(config.embedding_dim, flat, &mut rng)),
            Layer::relu(),
            Layer::reshape(vec![channels, fh, fw]),
        ];
        for (i, st) in config.stages.iter().enumerate().rev() {
            let (th, tw) = extents[i];
            let (ih, iw) = extents[i + 1];
            let p = st.padding();
            let op_h = th + 2 * p - ((ih - 1) * st.stride + st.kernel);
            let op_w = tw + 2 * p - ((iw - 1) * st.stride + st.kernel);
            if op_h != op_w {
                return Err(Error::InvalidArgument(
                    "non-square inputs need equal output padding on both axes".into(),
                ));
            }
            let out_c = if i == 0 { config.input[0] } else { config.stages[i - 1].filters };
            decoder.push(Layer::ConvTranspose2d(ConvTranspose2d::new(
                st.filters, out_c, st.kernel, st.stride, p, op_h, &mut rng,
            )));
            if i > 0 {
                decoder.push(Layer::relu());
            }
        }
        Ok(CaeModel {
            config: config.clone(),
            encoder: Sequential::new(encoder),
            decoder: Sequential::new(decoder),
            history: Vec::new(),
        })
    }

    pub fn config(&self) -> &CaeConfig {
        &self.config
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }

    pub fn encoder(&self) -> &Sequential {
        &self.encoder
    }

    pub fn decoder(&self) -> &Sequential {
        &self.decoder
    }

    /// Per-epoch reconstruction losses accumulated by [`CaeModel::pretrain`].
    pub fn history(&self) -> &[f64] {
        &self.history
    }

    /// Number of convolution, transposed-convolution and dense stages.
    pub fn stage_count(&self) -> usize {
        self.encoder
            .layers()
            .iter()
            .chain(self.decoder.layers())
            .filter(|l| !l.params().is_empty())
            .count()
    }

    /// Depth of the full clustering network: every weighted stage of the
    /// autoencoder plus the clustering layer attached to the embedding.
    pub fn network_depth(&self) -> usize {
        self.stage_count() + 1
    }

    fn check_images(&self, batch: &Tensor) -> Result<()> {
        let s = batch.shape();
        if s.len() != 4 || s[1..] != self.config.input {
            let mut expected = vec![s[0]];
            expected.extend_from_slice(&self.config.input);
            return Err(Error::ShapeMismatch {
                layer: "encoder",
                expected,
                got: s.to_vec(),
            });
        }
        Ok(())
    }

    /// Embeds a batch of images `(n, c, h, w)` into `(n, d)`.
    pub fn encode(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_images(batch)?;
        chunked(batch, |chunk| self.encoder.apply(chunk))
    }

    /// Reconstructs images from embeddings `(n, d)`.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        if z.shape().len() != 2 || z.shape()[1] != self.config.embedding_dim {
            return Err(Error::ShapeMismatch {
                layer: "decoder",
                expected: vec![z.shape()[0], self.config.embedding_dim],
                got: z.shape().to_vec(),
            });
        }
        chunked(z, |chunk| self.decoder.apply(chunk))
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        p
    }

    /// Trains encoder and decoder on reconstruction loss alone.
    ///
    /// Stops after `cfg.epochs` or as soon as an epoch's mean loss drops
    /// below `cfg.target_loss`. A non-finite loss aborts with
    /// [`Error::Diverged`].
    pub fn pretrain(&mut self, images: &Tensor, cfg: &PretrainConfig) -> Result<PretrainReport> {
        self.check_images(images)?;
        if cfg.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        let n = images.rows();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
        let mut order: Vec<usize> = (0..n).collect();
        let mut report = PretrainReport {
            history: Vec::new(),
            reached_target: false,
        };
        let mut iteration = 0;
        for _epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for idx in order.chunks(cfg.batch_size) {
                let x = images.select_rows(idx);
                let (z, enc_ctx) = self.encoder.forward(&x)?;
                let (x_rec, dec_ctx) = self.decoder.forward(&z)?;
                let (loss, g_rec) = nn::mse_loss(&x, &x_rec)?;
                if !loss.is_finite() {
                    return Err(Error::Diverged {
                        phase: "pretraining",
                        iteration,
                        loss,
                    });
                }
                let (g_z, mut grads) = self.decoder.backward(&g_rec, &dec_ctx)?;
                let (_, enc_grads) = self.encoder.backward(&g_z, &enc_ctx)?;
                grads.splice(0..0, enc_grads);
                opt.step(self.params_mut(), &grads)?;
                total += loss * idx.len() as f64;
                iteration += 1;
            }
            let mean = total / n as f64;
            log::debug!("pretrain epoch {}: L_r = {mean:.6}", report.history.len() + 1);
            report.history.push(mean);
            self.history.push(mean);
            if cfg.target_loss.is_some_and(|t| mean < t) {
                report.reached_target = true;
                break;
            }
        }
        Ok(report)
    }

    /// Writes a checkpoint manifest at `path` and its parameter blob beside it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let layers: Vec<Layer> = self
            .encoder
            .layers()
            .iter()
            .chain(self.decoder.layers())
            .cloned()
            .collect();
        let meta = serde_json::json!({
            "cae_config": self.config,
            "encoder_layers": self.encoder.layers().len(),
            "history": self.history,
        });
        nn::save_layers(path, &layers, meta)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (mut layers, manifest) = nn::load_layers(path)?;
        let bad = |reason: &str| Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            reason: reason.to_string(),
        };
        let config: CaeConfig = serde_json::from_value(manifest.metadata["cae_config"].clone())?;
        let split = manifest.metadata["encoder_layers"]
            .as_u64()
            .ok_or_else(|| bad("missing encoder_layers"))? as usize;
        if split > layers.len() {
            return Err(bad("encoder_layers exceeds the layer count"));
        }
        let history: Vec<f64> = serde_json::from_value(manifest.metadata["history"].clone()).unwrap_or_default();
        let decoder = layers.split_off(split);
        let model = CaeModel {
            config,
            encoder: Sequential::new(layers),
            decoder: Sequential::new(decoder),
            history,
        };
        let mut probe = vec![1];
        probe.extend_from_slice(&model.config.input);
        let z = model.encoder.output_shape(&probe)?;
        if z != [1, model.config.embedding_dim] || model.decoder.output_shape(&z)? != probe {
            return Err(bad("layers do not match the stored configuration"));
        }
        Ok(model)
    }
}

/// Writes `epoch,L_r` rows.
pub fn write_loss_history(path: &Path, history: &[f64]) -> Result<()> {
    let mut out = String::from("epoch,L_r\n");
    for (i, l) in history.iter().enumerate() {
        let _ = writeln!(out, "{},{l}", i + 1);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Chunks are independent, so the parallel result is identical to a
/// sequential pass.
fn chunked(x: &Tensor, f: impl Fn(&Tensor) -> Result<Tensor> + Sync) -> Result<Tensor> {
    if x.rows() <= INFERENCE_CHUNK {
        return f(x);
    }
    let idx: Vec<usize> = (0..x.rows()).collect();
    let parts = idx
        .par_chunks(INFERENCE_CHUNK)
        .map(|idx| f(&x.select_rows(idx)))
        .collect::<Result<Vec<_>>>()?;
    Tensor::vstack(&parts)
}
