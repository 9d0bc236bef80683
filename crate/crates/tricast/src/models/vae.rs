//! Variational autoencoder with a joint regression head.
//!
//! The encoder compresses a flattened window into a diagonal Gaussian
//! (mu, log sigma^2); the decoder reconstructs the window from a
//! reparameterized sample z = mu + exp(log sigma^2 / 2) * eps; and a linear
//! head on mu (through tanh) produces the price prediction. The training
//! loss is reconstruction MSE + beta * KL + lambda_pred * prediction MSE,
//! so the latent space is shaped by both objectives at once. Inference
//! suppresses eps entirely (z = mu), making it deterministic.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{init_weight, restore_named, zero_bias, Forecaster, LossGraph, WindowBatch};
use crate::error::{Error, Result};
use crate::tensor::rng::RngStream;
use crate::tensor::tape::{Mode, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeConfig {
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub beta: f64,
    pub lambda_pred: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig { hidden_dim: 64, latent_dim: 16, beta: 0.5, lambda_pred: 1.0 }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.latent_dim == 0 {
            return Err(Error::BadConfig { detail: "zero VAE dimension".into() });
        }
        if !(self.beta >= 0.0) || !(self.lambda_pred >= 0.0) {
            return Err(Error::BadConfig {
                detail: format!("VAE weights beta {} / lambda {}", self.beta, self.lambda_pred),
            });
        }
        Ok(())
    }
}

pub struct VaeModel {
    cfg: VaeConfig,
    input_dim: usize,
    enc_w: Tensor,
    enc_b: Tensor,
    mu_w: Tensor,
    mu_b: Tensor,
    logvar_w: Tensor,
    logvar_b: Tensor,
    dec_w1: Tensor,
    dec_b1: Tensor,
    dec_w2: Tensor,
    dec_b2: Tensor,
    head_w: Tensor,
    head_b: Tensor,
}

/// Everything the forward pass exposes for loss assembly and inspection.
pub struct VaeForward {
    pub pred: Var,
    pub reconstruction: Var,
    pub mu: Var,
    pub logvar: Var,
    pub leaves: Vec<Var>,
}

impl VaeModel {
    /// Initializes all weights Xavier-uniform and biases zero, drawing
    /// from `rng` in field order.
    pub fn new(seq_len: usize, features: usize, cfg: VaeConfig, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        let input_dim = seq_len * features;
        if input_dim == 0 {
            return Err(Error::BadConfig { detail: "empty VAE input".into() });
        }
        let (h, l) = (cfg.hidden_dim, cfg.latent_dim);
        Ok(VaeModel {
            cfg,
            input_dim,
            enc_w: init_weight(rng, input_dim, h),
            enc_b: zero_bias(h),
            mu_w: init_weight(rng, h, l),
            mu_b: zero_bias(l),
            logvar_w: init_weight(rng, h, l),
            logvar_b: zero_bias(l),
            dec_w1: init_weight(rng, l, h),
            dec_b1: zero_bias(h),
            dec_w2: init_weight(rng, h, input_dim),
            dec_b2: zero_bias(input_dim),
            head_w: init_weight(rng, l, 1),
            head_b: zero_bias(1),
        })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.cfg
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// Runs encoder, reparameterization, decoder, and head. Train mode
    /// draws one standard-normal eps per latent unit; infer mode sets
    /// z = mu.
    pub fn forward(
        &self,
        tape: &Tape,
        batch: &WindowBatch,
        rng: Option<&mut RngStream>,
        mode: Mode,
    ) -> Result<VaeForward> {
        if batch.seq_len() * batch.features() != self.input_dim {
            return Err(Error::ShapeMismatch {
                op: "vae_forward",
                detail: format!(
                    "window {}x{} vs input dim {}",
                    batch.seq_len(),
                    batch.features(),
                    self.input_dim
                ),
            });
        }
        let bind = |t: &Tensor| match mode {
            Mode::Train => tape.leaf(t.clone()),
            Mode::Infer => tape.constant(t.clone()),
        };
        // Bound in params() order.
        let enc_w = bind(&self.enc_w);
        let enc_b = bind(&self.enc_b);
        let mu_w = bind(&self.mu_w);
        let mu_b = bind(&self.mu_b);
        let logvar_w = bind(&self.logvar_w);
        let logvar_b = bind(&self.logvar_b);
        let dec_w1 = bind(&self.dec_w1);
        let dec_b1 = bind(&self.dec_b1);
        let dec_w2 = bind(&self.dec_w2);
        let dec_b2 = bind(&self.dec_b2);
        let head_w = bind(&self.head_w);
        let head_b = bind(&self.head_b);
        let leaves = vec![
            enc_w, enc_b, mu_w, mu_b, logvar_w, logvar_b, dec_w1, dec_b1, dec_w2, dec_b2, head_w,
            head_b,
        ];

        let x = tape.constant(batch.flat_windows());
        let hidden = tape.relu(tape.add_bias(tape.matmul(x, enc_w)?, enc_b)?);
        let mu = tape.add_bias(tape.matmul(hidden, mu_w)?, mu_b)?;
        let logvar = tape.add_bias(tape.matmul(hidden, logvar_w)?, logvar_b)?;

        let z = match mode {
            Mode::Train => {
                let rng = rng.ok_or(Error::BadConfig {
                    detail: "train-mode VAE forward needs an entropy stream".into(),
                })?;
                let n = batch.batch() * self.cfg.latent_dim;
                let mut eps = vec![0.0; n];
                rng.fill_standard_normal(&mut eps);
                let eps = tape.constant(
                    Tensor::new(vec![batch.batch(), self.cfg.latent_dim], eps).expect("eps shape"),
                );
                let std = tape.exp(tape.scale(logvar, 0.5));
                tape.add(mu, tape.mul(std, eps)?)?
            }
            Mode::Infer => mu,
        };

        let dec_hidden = tape.relu(tape.add_bias(tape.matmul(z, dec_w1)?, dec_b1)?);
        let reconstruction = tape.add_bias(tape.matmul(dec_hidden, dec_w2)?, dec_b2)?;
        let pred = tape.tanh(tape.add_bias(tape.matmul(mu, head_w)?, head_b)?);

        Ok(VaeForward { pred, reconstruction, mu, logvar, leaves })
    }
}

impl Forecaster for VaeModel {
    fn name(&self) -> &'static str {
        "vae"
    }

    fn build_loss(
        &mut self,
        tape: &Tape,
        batch: &WindowBatch,
        rng: Option<&mut RngStream>,
        mode: Mode,
    ) -> Result<LossGraph> {
        let fwd = self.forward(tape, batch, rng, mode)?;
        let x = tape.constant(batch.flat_windows());
        let targets = tape.constant(batch.targets_tensor());

        let recon = tape.mse_loss(x, fwd.reconstruction)?;
        let kl = tape.kl_normal(fwd.mu, fwd.logvar)?;
        let pred_err = tape.mse_loss(fwd.pred, targets)?;
        let loss = tape.add(
            tape.add(recon, tape.scale(kl, self.cfg.beta))?,
            tape.scale(pred_err, self.cfg.lambda_pred),
        )?;
        Ok(LossGraph { loss, pred: fwd.pred, leaves: fwd.leaves })
    }

    fn predict(&self, batch: &WindowBatch) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let fwd = self.forward(&tape, batch, None, Mode::Infer)?;
        let out = tape.value(fwd.pred).data().to_vec();
        Ok(out)
    }

    fn params(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("enc_w".into(), &self.enc_w),
            ("enc_b".into(), &self.enc_b),
            ("mu_w".into(), &self.mu_w),
            ("mu_b".into(), &self.mu_b),
            ("logvar_w".into(), &self.logvar_w),
            ("logvar_b".into(), &self.logvar_b),
            ("dec_w1".into(), &self.dec_w1),
            ("dec_b1".into(), &self.dec_b1),
            ("dec_w2".into(), &self.dec_w2),
            ("dec_b2".into(), &self.dec_b2),
            ("head_w".into(), &self.head_w),
            ("head_b".into(), &self.head_b),
        ]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("enc_w".into(), &mut self.enc_w),
            ("enc_b".into(), &mut self.enc_b),
            ("mu_w".into(), &mut self.mu_w),
            ("mu_b".into(), &mut self.mu_b),
            ("logvar_w".into(), &mut self.logvar_w),
            ("logvar_b".into(), &mut self.logvar_b),
            ("dec_w1".into(), &mut self.dec_w1),
            ("dec_b1".into(), &mut self.dec_b1),
            ("dec_w2".into(), &mut self.dec_w2),
            ("dec_b2".into(), &mut self.dec_b2),
            ("head_w".into(), &mut self.head_w),
            ("head_b".into(), &mut self.head_b),
        ]
    }

    fn buffers(&self) -> Vec<(String, Tensor)> {
        Vec::new()
    }

    fn restore(&mut self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        restore_named(self.params_mut(), Vec::new(), tensors)
    }
}
