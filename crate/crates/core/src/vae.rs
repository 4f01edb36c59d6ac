//! Convolutional variational autoencoder over the [`GlobalMatrix`].
//!
//! The encoder maps the `33 x rows x cols` grid to the mean and log-variance
//! of a diagonal Gaussian; the decoder maps a latent vector back to per-cell
//! Bernoulli probabilities. Training is online: one Adam step per call to
//! [`Vae::train_step`], which hands back the posterior mean with no link to
//! the VAE parameters so downstream losses cannot reach them.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::nn::Bound;
use crate::autodiff::{
    Adam, AdamConfig, AutodiffError, Conv2d, ConvGeom, ConvTranspose2d, Init, Linear, ParamStore,
    Tape, Tensor, Var,
};
use crate::env::{GlobalMatrix, OBS_DIM};

#[derive(Debug, Error)]
pub enum VaeError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("expected input [n, {channels}, {rows}, {cols}], got {got:?}")]
    InputShape {
        channels: usize,
        rows: usize,
        cols: usize,
        got: Vec<usize>,
    },
    #[error("target entry {0} lies outside [0, 1]")]
    TargetRange(f64),
    #[error(
        "grid {rows}x{cols}: rows and cols must share parity for the decoder to mirror the encoder"
    )]
    Grid { rows: usize, cols: usize },
    #[error("latent of length {got}, expected {expected}")]
    LatentLength { expected: usize, got: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeConfig {
    pub in_channels: usize,
    /// Encoder widths; the decoder mirrors them.
    pub channels: [usize; 3],
    pub latent_dim: usize,
    pub lr: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            in_channels: OBS_DIM,
            channels: [64, 128, 256],
            latent_dim: 16,
            lr: 1e-3,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VaeLosses {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
}

/// A draw `z = mu + eps * exp(logvar / 2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSample {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
    pub eps: Vec<f64>,
    pub z: Vec<f64>,
}

pub fn reparameterize<R: Rng + ?Sized>(mu: &[f64], logvar: &[f64], rng: &mut R) -> LatentSample {
    assert_eq!(mu.len(), logvar.len(), "mu and logvar lengths differ");
    let eps: Vec<f64> = (0..mu.len()).map(|_| rng.sample(StandardNormal)).collect();
    reparameterize_with(mu, logvar, &eps)
}

pub fn reparameterize_with(mu: &[f64], logvar: &[f64], eps: &[f64]) -> LatentSample {
    let z = mu
        .iter()
        .zip(logvar)
        .zip(eps)
        .map(|((m, lv), e)| m + e * (lv / 2.0).exp())
        .collect();
    LatentSample {
        mu: mu.to_vec(),
        logvar: logvar.to_vec(),
        eps: eps.to_vec(),
        z,
    }
}

/// `-1/2 * sum(1 + logvar - mu^2 - exp(logvar))`.
pub fn kl_divergence(mu: &[f64], logvar: &[f64]) -> f64 {
    -0.5 * mu
        .iter()
        .zip(logvar)
        .map(|(m, lv)| 1.0 + lv - m * m - lv.exp())
        .sum::<f64>()
}

/// Loss terms for a target `x` in `[0, 1]` and reconstruction probabilities
/// `x_recon`. Probabilities are clamped away from 0 and 1 before the log.
pub fn vae_loss(
    x: &Tensor,
    x_recon: &Tensor,
    mu: &[f64],
    logvar: &[f64],
) -> Result<VaeLosses, VaeError> {
    if x.shape() != x_recon.shape() {
        return Err(AutodiffError::ShapeMismatch {
            op: "vae_loss",
            left: x.shape().to_vec(),
            right: x_recon.shape().to_vec(),
        }
        .into());
    }
    if let Some(&bad) = x.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(VaeError::TargetRange(bad));
    }
    let tiny = 1e-12;
    let recon = -x
        .data()
        .iter()
        .zip(x_recon.data())
        .map(|(&t, &p)| {
            let p = p.clamp(tiny, 1.0 - tiny);
            t * p.ln() + (1.0 - t) * (1.0 - p).ln()
        })
        .sum::<f64>();
    let kl = kl_divergence(mu, logvar);
    Ok(VaeLosses {
        total: recon + kl,
        recon,
        kl,
    })
}

/// Vars produced by one forward pass.
pub struct VaeForward {
    pub mu: Var,
    pub logvar: Var,
    pub logits: Var,
    pub total: Var,
    pub recon: Var,
    pub kl: Var,
}

#[derive(Clone, Debug)]
pub struct Vae {
    cfg: VaeConfig,
    rows: usize,
    cols: usize,
    enc_hw: (usize, usize),
    store: ParamStore,
    enc: [Conv2d; 3],
    fc_mu: Linear,
    fc_logvar: Linear,
    fc_dec: Linear,
    dec: [ConvTranspose2d; 3],
    adam: Adam,
    rng: ChaCha8Rng,
    steps: u64,
}

impl Vae {
    pub fn new(rows: usize, cols: usize, cfg: VaeConfig, seed: u64) -> Result<Self, VaeError> {
        if rows == 0 || cols == 0 || rows % 2 != cols % 2 {
            return Err(VaeError::Grid { rows, cols });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let [c1, c2, c3] = cfg.channels;
        let s1 = ConvGeom::new(1, 1);
        let s2 = ConvGeom::new(2, 1);
        let k = 3;
        let enc = [
            Conv2d::new(
                &mut store,
                "enc0",
                cfg.in_channels,
                c1,
                k,
                s1,
                Init::KaimingUniform,
                &mut rng,
            ),
            Conv2d::new(
                &mut store,
                "enc1",
                c1,
                c2,
                k,
                s2,
                Init::KaimingUniform,
                &mut rng,
            ),
            Conv2d::new(
                &mut store,
                "enc2",
                c2,
                c3,
                k,
                s1,
                Init::XavierUniform,
                &mut rng,
            ),
        ];
        let enc_hw = (
            s2.conv_out(rows, k).expect("rows > 0"),
            s2.conv_out(cols, k).expect("cols > 0"),
        );
        let flat = c3 * enc_hw.0 * enc_hw.1;
        let fc_mu = Linear::new(
            &mut store,
            "fc_mu",
            flat,
            cfg.latent_dim,
            Init::XavierUniform,
            &mut rng,
        );
        let fc_logvar = Linear::new(
            &mut store,
            "fc_logvar",
            flat,
            cfg.latent_dim,
            Init::XavierUniform,
            &mut rng,
        );
        let fc_dec = Linear::new(
            &mut store,
            "fc_decode",
            cfg.latent_dim,
            flat,
            Init::XavierUniform,
            &mut rng,
        );
        // Even grids lose a row to the stride-2 layer; output padding restores it.
        let op = usize::from(rows.is_multiple_of(2));
        let dec = [
            ConvTranspose2d::new(
                &mut store,
                "dec0",
                c3,
                c2,
                k,
                s1,
                Init::KaimingUniform,
                &mut rng,
            ),
            ConvTranspose2d::new(
                &mut store,
                "dec1",
                c2,
                c1,
                k,
                s2.with_output_padding(op),
                Init::KaimingUniform,
                &mut rng,
            ),
            ConvTranspose2d::new(
                &mut store,
                "dec2",
                c1,
                cfg.in_channels,
                k,
                s1,
                Init::XavierUniform,
                &mut rng,
            ),
        ];
        let adam = Adam::new(AdamConfig::with_lr(cfg.lr), &store);
        Ok(Self {
            cfg,
            rows,
            cols,
            enc_hw,
            store,
            enc,
            fc_mu,
            fc_logvar,
            fc_dec,
            dec,
            adam,
            rng,
            steps: 0,
        })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.cfg
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn latent_dim(&self) -> usize {
        self.cfg.latent_dim
    }

    pub fn flatten_size(&self) -> usize {
        self.cfg.channels[2] * self.enc_hw.0 * self.enc_hw.1
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    fn check_input(&self, x: &Tensor) -> Result<usize, VaeError> {
        match *x.shape() {
            [n, c, r, w] if c == self.cfg.in_channels && r == self.rows && w == self.cols => Ok(n),
            _ => Err(VaeError::InputShape {
                channels: self.cfg.in_channels,
                rows: self.rows,
                cols: self.cols,
                got: x.shape().to_vec(),
            }),
        }
    }

    /// Encoder trunk up to the flattened `[n, flatten_size]` features.
    fn trunk(
        &self,
        tape: &mut Tape<'_>,
        b: &Bound,
        x: Var,
        n: usize,
    ) -> Result<Var, AutodiffError> {
        let h = self.enc[0].forward(tape, b, x)?;
        let h = tape.relu(h);
        let h = self.enc[1].forward(tape, b, h)?;
        let h = tape.relu(h);
        let h = self.enc[2].forward(tape, b, h)?;
        tape.reshape(h, &[n, self.flatten_size()])
    }

    fn decoder(
        &self,
        tape: &mut Tape<'_>,
        b: &Bound,
        z: Var,
        n: usize,
    ) -> Result<Var, AutodiffError> {
        let h = self.fc_dec.forward(tape, b, z)?;
        let h = tape.reshape(h, &[n, self.cfg.channels[2], self.enc_hw.0, self.enc_hw.1])?;
        let h = self.dec[0].forward(tape, b, h)?;
        let h = tape.relu(h);
        let h = self.dec[1].forward(tape, b, h)?;
        let h = tape.relu(h);
        self.dec[2].forward(tape, b, h)
    }

    /// Records the whole loss on `tape` for a batch `x: [n, C, rows, cols]`
    /// and noise `eps: [n, latent]`. Terms are summed over elements and
    /// averaged over the batch.
    pub fn forward<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        b: &Bound,
        x: &Tensor,
        eps: &Tensor,
    ) -> Result<VaeForward, VaeError> {
        let n = self.check_input(x)?;
        if let Some(&bad) = x.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(VaeError::TargetRange(bad));
        }
        let xv = tape.constant(x.clone());
        let h = self.trunk(tape, b, xv, n)?;
        let mu = self.fc_mu.forward(tape, b, h)?;
        let logvar = self.fc_logvar.forward(tape, b, h)?;
        let e = tape.constant(eps.clone());
        let half = tape.scale(logvar, 0.5);
        let sigma = tape.exp(half);
        let noise = tape.mul(e, sigma)?;
        let z = tape.add(mu, noise)?;
        let logits = self.decoder(tape, b, z, n)?;
        let recon_sum = tape.bce_with_logits_sum(logits, x)?;
        let recon = tape.scale(recon_sum, 1.0 / n as f64);
        // KL = -1/2 sum(1 + lv - mu^2 - e^lv)
        let mu2 = tape.square(mu);
        let elv = tape.exp(logvar);
        let a = tape.add_scalar(logvar, 1.0);
        let a = tape.sub(a, mu2)?;
        let a = tape.sub(a, elv)?;
        let s = tape.sum(a);
        let kl = tape.scale(s, -0.5 / n as f64);
        let total = tape.add(recon, kl)?;
        Ok(VaeForward {
            mu,
            logvar,
            logits,
            total,
            recon,
            kl,
        })
    }

    /// Loss and parameter gradients (store order) for fixed noise.
    pub fn loss_and_grads(
        &self,
        x: &Tensor,
        eps: &Tensor,
    ) -> Result<(VaeLosses, Vec<Tensor>), VaeError> {
        let mut tape = Tape::new();
        let b = self.store.bind(&mut tape);
        let f = self.forward(&mut tape, &b, x, eps)?;
        let losses = VaeLosses {
            total: tape.value(f.total).item(),
            recon: tape.value(f.recon).item(),
            kl: tape.value(f.kl).item(),
        };
        let grads = tape.backward(f.total)?;
        Ok((losses, self.store.collect_grads(&b, &grads)))
    }

    fn sample_eps(&mut self, n: usize) -> Tensor {
        let d = self.cfg.latent_dim;
        let data = (0..n * d)
            .map(|_| self.rng.sample(StandardNormal))
            .collect();
        Tensor::new(vec![n, d], data).expect("sizes agree")
    }

    /// One Adam step on a batch; returns the losses before the step.
    pub fn train_batch(&mut self, x: &Tensor) -> Result<VaeLosses, VaeError> {
        let n = self.check_input(x)?;
        let eps = self.sample_eps(n);
        let (losses, grads) = self.loss_and_grads(x, &eps)?;
        self.adam.step(&mut self.store, &grads);
        self.steps += 1;
        Ok(losses)
    }

    /// Trains on the current matrix and returns its posterior mean as plain
    /// numbers, detached from every tape.
    pub fn train_step(&mut self, m: &GlobalMatrix) -> Result<(Vec<f64>, VaeLosses), VaeError> {
        let x = m.to_chw();
        let losses = self.train_batch(&x)?;
        let (mu, _) = self.encode(&x)?;
        Ok((mu.into_data(), losses))
    }

    /// Posterior mean and log-variance, each `[n, latent]`.
    pub fn encode(&self, x: &Tensor) -> Result<(Tensor, Tensor), VaeError> {
        let n = self.check_input(x)?;
        let mut tape = Tape::new();
        let b = self.store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let h = self.trunk(&mut tape, &b, xv, n)?;
        let mu = self.fc_mu.forward(&mut tape, &b, h)?;
        let lv = self.fc_logvar.forward(&mut tape, &b, h)?;
        Ok((tape.value(mu).clone(), tape.value(lv).clone()))
    }

    /// Flattened encoder features `[n, flatten_size]`.
    pub fn features(&self, x: &Tensor) -> Result<Tensor, VaeError> {
        let n = self.check_input(x)?;
        let mut tape = Tape::new();
        let b = self.store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let h = self.trunk(&mut tape, &b, xv, n)?;
        Ok(tape.value(h).clone())
    }

    /// Reconstruction probabilities `[n, C, rows, cols]` for `z: [n, latent]`.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor, VaeError> {
        let (n, d) = match *z.shape() {
            [n, d] => (n, d),
            [d] => (1, d),
            _ => (0, z.len()),
        };
        if d != self.cfg.latent_dim || n == 0 {
            return Err(VaeError::LatentLength {
                expected: self.cfg.latent_dim,
                got: d,
            });
        }
        let mut tape = Tape::new();
        let b = self.store.bind(&mut tape);
        let zv = tape.constant(z.clone().reshape(&[n, d])?);
        let logits = self.decoder(&mut tape, &b, zv, n)?;
        let p = tape.sigmoid(logits);
        Ok(tape.value(p).clone())
    }

    pub fn save(&self, path: &Path) -> Result<(), VaeError> {
        Ok(self.store.save(path)?)
    }

    pub fn load(&mut self, path: &Path) -> Result<(), VaeError> {
        Ok(self.store.load(path)?)
    }
}

/// Per-step VAE losses, written as `step,l_vae,l_recon,l_kl`.
#[derive(Clone, Debug, Default)]
pub struct LatentTrace {
    pub rows: Vec<VaeLosses>,
}

impl LatentTrace {
    pub fn push(&mut self, l: VaeLosses) {
        self.rows.push(l);
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["step", "l_vae", "l_recon", "l_kl"])?;
        for (i, l) in self.rows.iter().enumerate() {
            out.write_record([
                i.to_string(),
                l.total.to_string(),
                l.recon.to_string(),
                l.kl.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}
