//! Variational autoencoder over feature frames.
//!
//! The encoder maps a frame `x` to a diagonal Gaussian posterior
//! `q(z|x) = N(mu, exp(logvar))`; the decoder maps a latent `z` to the mean of
//! a unit-variance Gaussian likelihood over `x`. The prior is `N(0, I)`.
//! Training minimises the negative ELBO
//!
//! ```text
//! total = 1/2 ||x - decode(mu + exp(logvar / 2) * eps)||^2 + beta * KL(q(z|x) || N(0, I))
//! ```
//!
//! with one `eps ~ N(0, I)` draw per frame per step, averaged over frames.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::dsp::FeatureFrame;
use crate::error::{ensure, invalid, Error, Result};
use crate::nngrad::{adam_step, backward, Activation, AdamConfig, GradTape, Gradients, Matrix, ParamSet};

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

/// Layer sizes and activations shared by encoder and decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub input_dim: usize,
    pub latent_dim: usize,
    /// Encoder hidden widths; the decoder mirrors them.
    pub hidden: Vec<usize>,
    pub hidden_activation: Activation,
}

impl Architecture {
    pub fn new(input_dim: usize, latent_dim: usize, hidden: Vec<usize>) -> Self {
        Self { input_dim, latent_dim, hidden, hidden_activation: Activation::Tanh }
    }

    pub fn encoder_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim];
        s.extend(&self.hidden);
        s.push(2 * self.latent_dim);
        s
    }

    pub fn decoder_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.latent_dim];
        s.extend(self.hidden.iter().rev());
        s.push(self.input_dim);
        s
    }

    fn activations(&self) -> Vec<Activation> {
        let mut a = vec![self.hidden_activation; self.hidden.len()];
        a.push(Activation::Identity);
        a
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.input_dim > 0 && self.latent_dim > 0, || {
            format!("input_dim {} and latent_dim {} must be positive", self.input_dim, self.latent_dim)
        })?;
        ensure(self.hidden.iter().all(|&h| h > 0), || format!("hidden sizes must be positive: {:?}", self.hidden))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample {
    pub z: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeModel {
    pub encoder: ParamSet,
    pub decoder: ParamSet,
    pub arch: Architecture,
    /// Weight on the KL term.
    pub beta: f64,
}

/// Gradients of the mean batch loss for both networks.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeGradients {
    pub encoder: Gradients,
    pub decoder: Gradients,
}

impl VaeGradients {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.encoder.to_flat();
        v.extend(self.decoder.to_flat());
        v
    }
}

impl VaeModel {
    /// Glorot-initialised model drawing from `rng`.
    pub fn new<R: Rng + ?Sized>(arch: Architecture, beta: f64, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let encoder = ParamSet::mlp("enc", &arch.encoder_sizes(), rng)?;
        let decoder = ParamSet::mlp("dec", &arch.decoder_sizes(), rng)?;
        Self::from_parts(arch, encoder, decoder, beta)
    }

    pub fn from_parts(arch: Architecture, encoder: ParamSet, decoder: ParamSet, beta: f64) -> Result<Self> {
        arch.validate()?;
        ensure(beta >= 0.0 && beta.is_finite(), || format!("beta must be non-negative, got {beta}"))?;
        let shapes = |p: &ParamSet| {
            let mut s = vec![p.input_dim()];
            s.extend(p.layers().map(|(_, l)| l.outputs()));
            s
        };
        ensure(shapes(&encoder) == arch.encoder_sizes(), || {
            format!("encoder shape {:?} != {:?}", shapes(&encoder), arch.encoder_sizes())
        })?;
        ensure(shapes(&decoder) == arch.decoder_sizes(), || {
            format!("decoder shape {:?} != {:?}", shapes(&decoder), arch.decoder_sizes())
        })?;
        Ok(Self { encoder, decoder, arch, beta })
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    pub fn layout(&self) -> Vec<(String, usize)> {
        let mut l = self.encoder.layout();
        l.extend(self.decoder.layout());
        l
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.encoder.to_flat();
        v.extend(self.decoder.to_flat());
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.encoder.param_count();
        ensure(flat.len() == n + self.decoder.param_count(), || {
            format!("{} values for {} parameters", flat.len(), n + self.decoder.param_count())
        })?;
        self.encoder.set_flat(&flat[..n])?;
        self.decoder.set_flat(&flat[n..])
    }

    /// Posterior means and clamped log-variances for a batch (`rows x n`).
    pub fn encode_batch(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        ensure(x.cols() == self.input_dim(), || {
            format!("frames have {} values, model expects {}", x.cols(), self.input_dim())
        })?;
        let h = self.encoder.predict(x, &self.arch.activations())?;
        Ok(split_posterior(&h, self.latent_dim()).0)
    }

    pub fn decode_batch(&self, z: &Matrix) -> Result<Matrix> {
        ensure(z.cols() == self.latent_dim(), || {
            format!("latent has {} values, model expects {}", z.cols(), self.latent_dim())
        })?;
        self.decoder.predict(z, &self.arch.activations())
    }

    /// Mean loss over the rows of `x` without gradients.
    pub fn batch_loss(&self, x: &Matrix, eps: &Matrix) -> Result<LossBreakdown> {
        let k = self.latent_dim();
        ensure(eps.rows() == x.rows() && eps.cols() == k && x.rows() > 0, || {
            format!("eps is {}x{}, expected {}x{k}", eps.rows(), eps.cols(), x.rows())
        })?;
        let (mu, logvar) = self.encode_batch(x)?;
        let mut z = Matrix::zeros(x.rows(), k);
        for (i, v) in z.data_mut().iter_mut().enumerate() {
            *v = mu.data()[i] + (0.5 * logvar.data()[i]).exp() * eps.data()[i];
        }
        let xhat = self.decode_batch(&z)?;
        let recon: f64 = xhat.data().iter().zip(x.data()).map(|(p, t)| 0.5 * (p - t) * (p - t)).sum();
        let kl: f64 = mu.data().iter().zip(logvar.data()).map(|(&m, &lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv)).sum();
        let inv = 1.0 / x.rows() as f64;
        let loss = breakdown(recon * inv, kl * inv, self.beta);
        if !loss.total.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss (recon {}, kl {})", loss.recon, loss.kl)));
        }
        Ok(loss)
    }

    /// Mean batch loss and its gradients. `eps` holds one standard-normal
    /// draw per latent dimension per row.
    pub fn loss_and_grad(&self, x: &Matrix, eps: &Matrix) -> Result<(LossBreakdown, VaeGradients)> {
        let k = self.latent_dim();
        ensure(x.cols() == self.input_dim(), || {
            format!("frames have {} values, model expects {}", x.cols(), self.input_dim())
        })?;
        ensure(eps.rows() == x.rows() && eps.cols() == k, || {
            format!("eps is {}x{}, expected {}x{k}", eps.rows(), eps.cols(), x.rows())
        })?;
        ensure(x.rows() > 0, || "empty batch".into())?;
        let acts = self.arch.activations();
        let rows = x.rows();
        let inv = 1.0 / rows as f64;

        let mut enc_tape = GradTape::new();
        let h = self.encoder.forward(x, &acts, &mut enc_tape)?;
        let ((mu, logvar), clamped) = split_posterior(&h, k);

        let mut z = Matrix::zeros(rows, k);
        for i in 0..rows {
            for j in 0..k {
                z.set(i, j, mu.get(i, j) + (0.5 * logvar.get(i, j)).exp() * eps.get(i, j));
            }
        }

        let mut dec_tape = GradTape::new();
        let xhat = self.decoder.forward(&z, &acts, &mut dec_tape)?;

        let mut recon = 0.0;
        let mut d_xhat = Matrix::zeros(rows, self.input_dim());
        for ((d, &p), &t) in d_xhat.data_mut().iter_mut().zip(xhat.data()).zip(x.data()) {
            let e = p - t;
            recon += 0.5 * e * e;
            *d = e * inv;
        }
        let mut kl = 0.0;
        for (&m, &lv) in mu.data().iter().zip(logvar.data()) {
            kl += 0.5 * (m * m + lv.exp() - 1.0 - lv);
        }
        let loss = breakdown(recon * inv, kl * inv, self.beta);
        if !loss.total.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss (recon {}, kl {})", loss.recon, loss.kl)));
        }

        let (dec_grads, d_z) = backward(&mut dec_tape, &self.decoder, &d_xhat)?;
        let mut d_h = Matrix::zeros(rows, 2 * k);
        for i in 0..rows {
            for j in 0..k {
                let (m, lv, e, gz) = (mu.get(i, j), logvar.get(i, j), eps.get(i, j), d_z.get(i, j));
                d_h.set(i, j, gz + self.beta * m * inv);
                let d_lv = gz * e * 0.5 * (0.5 * lv).exp() + self.beta * 0.5 * (lv.exp() - 1.0) * inv;
                d_h.set(i, k + j, if clamped[i * k + j] { 0.0 } else { d_lv });
            }
        }
        let (enc_grads, _) = backward(&mut enc_tape, &self.encoder, &d_h)?;
        Ok((loss, VaeGradients { encoder: enc_grads, decoder: dec_grads }))
    }
}

fn breakdown(recon: f64, kl: f64, beta: f64) -> LossBreakdown {
    LossBreakdown { recon, kl, total: recon + beta * kl }
}

/// Splits encoder output into `(mu, clamped logvar)` and flags clamped entries.
fn split_posterior(h: &Matrix, k: usize) -> ((Matrix, Matrix), Vec<bool>) {
    let rows = h.rows();
    let mut mu = Matrix::zeros(rows, k);
    let mut logvar = Matrix::zeros(rows, k);
    let mut clamped = vec![false; rows * k];
    for i in 0..rows {
        let r = h.row(i);
        mu.row_mut(i).copy_from_slice(&r[..k]);
        for j in 0..k {
            let raw = r[k + j];
            let c = raw.clamp(LOGVAR_MIN, LOGVAR_MAX);
            clamped[i * k + j] = c != raw;
            logvar.set(i, j, c);
        }
    }
    ((mu, logvar), clamped)
}

/// Posterior for a single frame.
pub fn encode(model: &VaeModel, x: &FeatureFrame) -> Result<GaussianPosterior> {
    ensure(x.values.len() == model.input_dim(), || {
        format!("frame has {} values, model expects {}", x.values.len(), model.input_dim())
    })?;
    let (mu, logvar) = model.encode_batch(&Matrix::from_vec(1, x.values.len(), x.values.clone())?)?;
    Ok(GaussianPosterior { mu: mu.into_data(), logvar: logvar.into_data() })
}

/// `z = mu + exp(logvar / 2) * eps`.
pub fn reparameterize(post: &GaussianPosterior, eps: &[f64]) -> Result<LatentSample> {
    ensure(eps.len() == post.mu.len() && post.logvar.len() == post.mu.len(), || {
        format!("eps has {} values, posterior has {}", eps.len(), post.mu.len())
    })?;
    Ok(LatentSample {
        z: post
            .mu
            .iter()
            .zip(&post.logvar)
            .zip(eps)
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect(),
    })
}

pub fn decode(model: &VaeModel, z: &LatentSample) -> Result<Vec<f64>> {
    ensure(z.z.len() == model.latent_dim(), || {
        format!("latent has {} values, model expects {}", z.z.len(), model.latent_dim())
    })?;
    Ok(model.decode_batch(&Matrix::from_vec(1, z.z.len(), z.z.clone())?)?.into_data())
}

/// Closed-form `KL(N(mu, exp(logvar)) || N(0, I))`.
pub fn kl_divergence(post: &GaussianPosterior) -> f64 {
    post.mu
        .iter()
        .zip(&post.logvar)
        .map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum()
}

/// Single-frame loss for a given noise draw.
pub fn loss(model: &VaeModel, x: &FeatureFrame, eps: &[f64]) -> Result<LossBreakdown> {
    let post = encode(model, x)?;
    let z = reparameterize(&post, eps)?;
    let xhat = decode(model, &z)?;
    let recon = 0.5 * x.values.iter().zip(&xhat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    let out = breakdown(recon, kl_divergence(&post), model.beta);
    if out.total.is_finite() {
        Ok(out)
    } else {
        Err(Error::Numeric(format!("non-finite loss (recon {}, kl {})", out.recon, out.kl)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Posterior means are captured every `snapshot_stride` epochs, plus the
    /// first and last epoch.
    pub snapshot_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 200, batch_size: 64, adam: AdamConfig::default(), snapshot_stride: 10 }
    }
}

/// Posterior means of every training frame at the end of an epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSnapshot {
    pub epoch: usize,
    pub means: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Frame-averaged loss of each epoch, in epoch order (index 0 is epoch 1).
    pub history: Vec<LossBreakdown>,
    pub snapshots: Vec<LatentSnapshot>,
    /// Adam steps taken.
    pub steps: u64,
}

pub fn frames_to_matrix(frames: &[FeatureFrame]) -> Result<Matrix> {
    Matrix::from_rows(&frames.iter().map(|f| f.values.as_slice()).collect::<Vec<_>>())
}

/// Shuffled minibatch Adam on the negative ELBO. All randomness (shuffles and
/// noise draws) comes from `rng`, so a fixed seed fixes the whole run.
pub fn train<R: Rng + ?Sized>(
    model: &mut VaeModel,
    frames: &[FeatureFrame],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<TrainOutcome> {
    train_with_progress(model, frames, cfg, rng, |_, _, _| {})
}

/// [`train`] with a callback after each epoch.
pub fn train_with_progress<R, F>(
    model: &mut VaeModel,
    frames: &[FeatureFrame],
    cfg: &TrainConfig,
    rng: &mut R,
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    R: Rng + ?Sized,
    F: FnMut(usize, &LossBreakdown, &VaeModel),
{
    ensure(cfg.epochs > 0 && cfg.batch_size > 0 && cfg.snapshot_stride > 0, || {
        "epochs, batch_size and snapshot_stride must be positive".into()
    })?;
    ensure(cfg.adam.lr > 0.0, || format!("learning rate must be positive, got {}", cfg.adam.lr))?;
    ensure(frames.len() >= cfg.batch_size, || {
        format!("{} frames is fewer than one batch of {}", frames.len(), cfg.batch_size)
    })?;
    let data = frames_to_matrix(frames)?;
    ensure(data.cols() == model.input_dim(), || {
        format!("frames have {} values, model expects {}", data.cols(), model.input_dim())
    })?;
    let k = model.latent_dim();
    let n = frames.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut outcome = TrainOutcome { history: Vec::with_capacity(cfg.epochs), snapshots: Vec::new(), steps: 0 };

    for epoch in 1..=cfg.epochs {
        order.shuffle(rng);
        let (mut recon, mut kl) = (0.0, 0.0);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut x = Matrix::zeros(chunk.len(), data.cols());
            for (r, &i) in chunk.iter().enumerate() {
                x.row_mut(r).copy_from_slice(data.row(i));
            }
            let eps = Matrix::from_vec(
                chunk.len(),
                k,
                (0..chunk.len() * k).map(|_| rng.sample(StandardNormal)).collect(),
            )?;
            let context = |e: Error| match e {
                Error::Numeric(msg) => Error::Numeric(format!("epoch {epoch}, batch {b}: {msg}")),
                other => other,
            };
            let (l, g) = model.loss_and_grad(&x, &eps).map_err(context)?;
            outcome.steps += 1;
            adam_step(&mut model.encoder, &g.encoder, &cfg.adam, outcome.steps).map_err(context)?;
            adam_step(&mut model.decoder, &g.decoder, &cfg.adam, outcome.steps).map_err(context)?;
            recon += l.recon * chunk.len() as f64;
            kl += l.kl * chunk.len() as f64;
        }
        let epoch_loss = breakdown(recon / n as f64, kl / n as f64, model.beta);
        outcome.history.push(epoch_loss);
        on_epoch(epoch, &epoch_loss, model);
        if epoch == 1 || epoch % cfg.snapshot_stride == 0 || epoch == cfg.epochs {
            outcome.snapshots.push(LatentSnapshot { epoch, means: model.encode_batch(&data)?.0 });
        }
    }
    Ok(outcome)
}

/// Posterior means of `frames`, one row per frame.
pub fn posterior_means(model: &VaeModel, frames: &[FeatureFrame]) -> Result<Matrix> {
    if frames.is_empty() {
        return Err(invalid("no frames to encode"));
    }
    Ok(model.encode_batch(&frames_to_matrix(frames)?)?.0)
}
