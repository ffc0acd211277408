//! Permutation-invariant variational autoencoder.
//!
//! A shared network `e1` embeds every member, the embeddings are averaged,
//! and `e2` maps the pooled vector to the mean and log standard deviation of
//! a diagonal Gaussian. Reconstructed ensembles are decoded from
//! reparameterized draws `mu + sigma * eps`.
//!
//! The training objective combines the energy distance, the Sinkhorn
//! distance and the KL divergence to a standard normal prior:
//!
//! ```text
//! loss = w1 * ed_scale * ED + w2 * sd_scale * SD + w3 * kl_scale * KL
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{diff, SinkhornConfig};
use crate::nn::{Mlp, MlpVars, LEAKY_SLOPE};
use crate::numerics::rng::stream;
use crate::numerics::{AdamWState, PlateauSchedule, Rng, Tape, Tensor, Var};
use crate::par;
use crate::persist::{self, BlobReader, BlobWriter};
use crate::training::{Components, EarlyStopping, EpochRecord, History, TrainConfig, Verdict};
use crate::twostep::LatentGaussian;

const IVAE_TAG: [u8; 4] = *b"EIV1";

/// Bound applied to `log sigma` before exponentiation.
pub const LOG_SIGMA_BOUND: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub omega1: f64,
    pub omega2: f64,
    pub omega3: f64,
    pub ed_scale: f64,
    pub sd_scale: f64,
    pub kl_scale: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            omega1: 0.5,
            omega2: 0.5,
            omega3: 0.01,
            ed_scale: 2.0,
            sd_scale: 1.0 / 50.0,
            kl_scale: 0.1,
        }
    }
}

impl LossWeights {
    /// Weights with `omega1 = 1 - omega2`, other factors from `self`.
    pub fn with_omega2(self, omega2: f64) -> Self {
        Self {
            omega1: 1.0 - omega2,
            omega2,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.omega1, self.omega2, self.omega3, self.ed_scale, self.sd_scale, self.kl_scale];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidArgument(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }

    /// Weighted total of raw components, in the same order the tape uses.
    pub fn total(&self, c: &Components) -> f64 {
        let ed = self.omega1 * self.ed_scale * c.energy;
        let sd = self.omega2 * self.sd_scale * c.sinkhorn;
        let kl = self.omega3 * self.kl_scale * c.kl;
        ed + sd + kl
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IvaeModel {
    pub e1: Mlp,
    pub e2: Mlp,
    pub decoder: Mlp,
}

/// Parameter handles of an [`IvaeModel`] on one tape.
#[derive(Debug, Clone)]
pub struct IvaeVars {
    e1: MlpVars,
    e2: MlpVars,
    decoder: MlpVars,
}

/// Output of the encoder on a tape.
#[derive(Debug, Clone, Copy)]
pub struct EncodedVars {
    pub mu: Var,
    /// Clamped log standard deviation.
    pub log_sigma: Var,
}

impl IvaeModel {
    pub fn init(d_data: usize, d_latent: usize, width: usize, seed: u64) -> Result<Self> {
        if d_data == 0 || d_latent == 0 || width == 0 {
            return Err(Error::InvalidArgument("iVAE dimensions must be >= 1".into()));
        }
        let root = Rng::new(seed).derive(stream::INIT);
        Ok(Self {
            e1: Mlp::new(&[d_data, width], LEAKY_SLOPE, true, &mut root.derive(0)),
            e2: Mlp::new(&[width, width, 2 * d_latent], LEAKY_SLOPE, false, &mut root.derive(1)),
            decoder: Mlp::new(&[d_latent, width, d_data], LEAKY_SLOPE, false, &mut root.derive(2)),
        })
    }

    pub fn d_data(&self) -> usize {
        self.e1.input_dim()
    }

    pub fn d_latent(&self) -> usize {
        self.decoder.input_dim()
    }

    pub fn width(&self) -> usize {
        self.e1.output_dim()
    }

    /// Latent mean and standard deviation of one ensemble (`M x d_data`).
    ///
    /// The pooled embedding is a correctly rounded mean per feature, so
    /// permuting or duplicating the members gives a bit-identical result.
    pub fn encode_ensemble(&self, ensemble: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
        if ensemble.rows() == 0 {
            return Err(Error::InvalidArgument("cannot encode an empty ensemble".into()));
        }
        let pooled = self.e1.forward(ensemble)?.pool_rows();
        let out = self.e2.forward(&pooled)?;
        let k = self.d_latent();
        let mu = out.data()[..k].to_vec();
        let sigma = out.data()[k..]
            .iter()
            .map(|l| l.clamp(-LOG_SIGMA_BOUND, LOG_SIGMA_BOUND).exp())
            .collect();
        Ok((mu, sigma))
    }

    pub fn encode_gaussian(&self, ensemble: &Tensor) -> Result<LatentGaussian> {
        let (mu, sigma) = self.encode_ensemble(ensemble)?;
        LatentGaussian::diagonal(mu, &sigma)
    }

    /// Decodes `mu + sigma * eps` for each row of `eps`.
    pub fn decode_with_noise(&self, mu: &[f64], sigma: &[f64], eps: &Tensor) -> Result<Tensor> {
        let k = self.d_latent();
        if mu.len() != k || sigma.len() != k || eps.cols() != k {
            return Err(Error::shape("decode_with_noise", &[k], &[mu.len(), sigma.len(), eps.cols()]));
        }
        let mut z = eps.clone();
        for r in 0..z.rows() {
            for (i, v) in z.row_mut(r).iter_mut().enumerate() {
                *v = mu[i] + sigma[i] * *v;
            }
        }
        self.decoder.forward(&z)
    }

    /// `n` reparameterized draws decoded to `n x d_data`.
    pub fn sample_and_decode(&self, mu: &[f64], sigma: &[f64], n: usize, rng: &mut Rng) -> Result<Tensor> {
        let eps = rng.normal_tensor(n, self.d_latent());
        self.decode_with_noise(mu, sigma, &eps)
    }

    /// Encodes an ensemble and decodes `n` members from its latent Gaussian.
    pub fn represent(&self, ensemble: &Tensor, n: usize, rng: &mut Rng) -> Result<Tensor> {
        let (mu, sigma) = self.encode_ensemble(ensemble)?;
        self.sample_and_decode(&mu, &sigma, n, rng)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.e1.params();
        p.extend(self.e2.params());
        p.extend(self.decoder.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.e1.params_mut();
        p.extend(self.e2.params_mut());
        p.extend(self.decoder.params_mut());
        p
    }

    pub fn register(&self, tape: &mut Tape) -> IvaeVars {
        IvaeVars {
            e1: self.e1.register(tape),
            e2: self.e2.register(tape),
            decoder: self.decoder.register(tape),
        }
    }

    /// Records the full objective of one ensemble with frozen noise `eps`
    /// (`N x d_latent`) and returns the loss with its raw components.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape,
        vars: &IvaeVars,
        ensemble: &Tensor,
        eps: &Tensor,
        weights: &LossWeights,
        sinkhorn: &SinkhornConfig,
    ) -> Result<(Var, Components)> {
        let x = tape.constant(ensemble.clone());
        let enc = vars.encode(tape, x, self.d_latent())?;
        let recon = vars.sample_and_decode(tape, enc, eps)?;
        ivae_loss(tape, x, recon, enc, weights, sinkhorn)
    }

    /// Objective of one ensemble without gradients.
    pub fn loss(
        &self,
        ensemble: &Tensor,
        eps: &Tensor,
        weights: &LossWeights,
        sinkhorn: &SinkhornConfig,
    ) -> Result<(f64, Components)> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let (l, c) = self.loss_on_tape(&mut tape, &vars, ensemble, eps, weights, sinkhorn)?;
        Ok((tape.value(l).item(), c))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = BlobWriter::new(IVAE_TAG);
        w.u32(self.d_data()).u32(self.d_latent()).u32(self.width());
        self.e1.write(&mut w);
        self.e2.write(&mut w);
        self.decoder.write(&mut w);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = BlobReader::new(bytes, IVAE_TAG)?;
        let (d, k, w) = (r.u32()?, r.u32()?, r.u32()?);
        let e1 = Mlp::read(&mut r, LEAKY_SLOPE, true)?;
        let e2 = Mlp::read(&mut r, LEAKY_SLOPE, false)?;
        let decoder = Mlp::read(&mut r, LEAKY_SLOPE, false)?;
        r.finish()?;
        let model = Self { e1, e2, decoder };
        if (model.d_data(), model.d_latent(), model.width()) != (d, k, w) || model.e2.output_dim() != 2 * k {
            return Err(Error::InvalidArgument("iVAE blob header disagrees with its layers".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        persist::write_file(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

impl IvaeVars {
    pub fn encode(&self, tape: &mut Tape, x: Var, d_latent: usize) -> Result<EncodedVars> {
        let h = self.e1.forward(tape, x)?;
        let pooled = tape.pool_rows(h)?;
        let out = self.e2.forward(tape, pooled)?;
        let mu = tape.slice_cols(out, 0, d_latent)?;
        let ls = tape.slice_cols(out, d_latent, 2 * d_latent)?;
        let log_sigma = tape.clamp(ls, -LOG_SIGMA_BOUND, LOG_SIGMA_BOUND)?;
        Ok(EncodedVars { mu, log_sigma })
    }

    pub fn sample_and_decode(&self, tape: &mut Tape, enc: EncodedVars, eps: &Tensor) -> Result<Var> {
        let sigma = tape.exp(enc.log_sigma)?;
        let e = tape.constant(eps.clone());
        let s = tape.mul(sigma, e)?;
        let z = tape.add(enc.mu, s)?;
        self.decoder.forward(tape, z)
    }
}

/// Weighted objective of an input ensemble `x` and its reconstruction.
///
/// Returns the total and the raw energy distance, Sinkhorn distance and KL
/// term. A non-finite component is reported as an error.
pub fn ivae_loss(
    tape: &mut Tape,
    x: Var,
    recon: Var,
    enc: EncodedVars,
    weights: &LossWeights,
    sinkhorn: &SinkhornConfig,
) -> Result<(Var, Components)> {
    let ed = diff::energy_distance(tape, x, recon)?;
    let sd = diff::sinkhorn_distance(tape, x, recon, sinkhorn)?;
    let kl = diff::kl_std_normal(tape, enc.mu, enc.log_sigma)?;
    let comps = Components {
        energy: tape.value(ed).item(),
        sinkhorn: tape.value(sd).item(),
        kl: tape.value(kl).item(),
    };
    if ![comps.energy, comps.sinkhorn, comps.kl].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteLoss {
            epoch: 0,
            detail: format!("non-finite loss component: {comps:?}"),
        });
    }
    let a = tape.scale(ed, weights.omega1 * weights.ed_scale)?;
    let b = tape.scale(sd, weights.omega2 * weights.sd_scale)?;
    let c = tape.scale(kl, weights.omega3 * weights.kl_scale)?;
    let t = tape.add(a, b)?;
    let total = tape.add(t, c)?;
    Ok((total, comps))
}

/// Closed-form `KL(N(mu, diag(sigma^2)) || N(0, I))`.
pub fn kl_std_normal(mu: &[f64], sigma: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(sigma)
        .map(|(m, s)| m * m + s * s - 1.0 - (s * s).ln())
        .sum::<f64>()
}

/// Everything the trainer needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IvaeTraining {
    pub train: TrainConfig,
    pub weights: LossWeights,
    pub sinkhorn: SinkhornConfig,
}

impl Default for IvaeTraining {
    fn default() -> Self {
        Self {
            train: TrainConfig::ivae(),
            weights: LossWeights::default(),
            sinkhorn: SinkhornConfig::training(),
        }
    }
}

fn training_noise(seed: u64, epoch: usize, day: usize, n: usize, k: usize) -> Tensor {
    Rng::new(seed)
        .derive_path(&[stream::LATENT, epoch as u64, day as u64])
        .normal_tensor(n, k)
}

/// Frozen noise used for validation, so the validation loss is a
/// deterministic function of the parameters.
pub fn validation_noise(seed: u64, day: usize, n: usize, k: usize) -> Tensor {
    Rng::new(seed)
        .derive_path(&[stream::VALIDATION, day as u64])
        .normal_tensor(n, k)
}

/// Mean validation loss and components over `days`.
pub fn validation_loss(model: &IvaeModel, days: &[Tensor], setup: &IvaeTraining) -> Result<(f64, Components)> {
    let k = model.d_latent();
    let per_day = par::map_range(days.len(), |t| {
        let eps = validation_noise(setup.train.seed, t, days[t].rows(), k);
        model.loss(&days[t], &eps, &setup.weights, &setup.sinkhorn)
    });
    mean_losses(per_day.into_iter().collect::<Result<Vec<_>>>()?)
}

fn mean_losses(v: Vec<(f64, Components)>) -> Result<(f64, Components)> {
    let n = v.len() as f64;
    let mut total = 0.0;
    let mut c = Components::default();
    for (l, ci) in v {
        total += l;
        c.energy += ci.energy;
        c.sinkhorn += ci.sinkhorn;
        c.kl += ci.kl;
    }
    Ok((
        total / n,
        Components {
            energy: c.energy / n,
            sinkhorn: c.sinkhorn / n,
            kl: c.kl / n,
        },
    ))
}

/// Mini-batch training where each sample is one day's full ensemble.
///
/// Each day in a batch decodes as many latent draws as it has members. The
/// per-day graphs are evaluated concurrently and their gradients summed in
/// day order. Returns the best-validation checkpoint.
pub fn train(
    model: &IvaeModel,
    train_days: &[Tensor],
    val_days: &[Tensor],
    setup: &IvaeTraining,
) -> Result<(IvaeModel, History)> {
    let cfg = &setup.train;
    cfg.validate()?;
    setup.weights.validate()?;
    setup.sinkhorn.validate()?;
    if train_days.is_empty() || val_days.is_empty() {
        return Err(Error::InvalidArgument("empty training or validation set".into()));
    }
    let k = model.d_latent();
    let mut model = model.clone();
    let mut opt = AdamWState::new(cfg.adamw(), &model.params());
    let mut schedule = PlateauSchedule::new(cfg.plateau());
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let shuffle_root = Rng::new(cfg.seed).derive(stream::SHUFFLE);

    let mut history = History {
        initial_val_loss: validation_loss(&model, val_days, setup)?.0,
        ..Default::default()
    };
    let mut best = model.clone();

    for epoch in 1..=cfg.max_epochs {
        let order = shuffle_root.derive(epoch as u64).permutation(train_days.len());
        let mut epoch_losses = Vec::with_capacity(train_days.len());
        for idx in order.chunks(cfg.batch_size) {
            let current = &model;
            let results = par::map_range(idx.len(), |b| {
                let day = idx[b];
                let x = &train_days[day];
                let eps = training_noise(cfg.seed, epoch, day, x.rows(), k);
                let mut tape = Tape::new();
                let vars = current.register(&mut tape);
                let (loss, comps) = current
                    .loss_on_tape(&mut tape, &vars, x, &eps, &setup.weights, &setup.sinkhorn)
                    .map_err(|e| with_epoch(e, epoch, day))?;
                let lv = tape.value(loss).item();
                let grads = tape.backward(loss)?.into_params();
                Ok::<_, Error>((lv, comps, grads))
            });
            let mut sum: Option<Vec<Tensor>> = None;
            for r in results {
                let (lv, comps, grads) = r?;
                if !lv.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        detail: format!("training loss {lv}, components {comps:?}"),
                    });
                }
                epoch_losses.push((lv, comps));
                sum = Some(match sum {
                    None => grads,
                    Some(acc) => acc.iter().zip(&grads).map(|(a, g)| a.add(g)).collect::<Result<_>>()?,
                });
            }
            let inv = 1.0 / idx.len() as f64;
            let grads: Vec<Tensor> = sum.expect("non-empty batch").iter().map(|g| g.scale(inv)).collect();
            opt.step(&mut model.params_mut(), &grads)?;
        }
        let (train_loss, train_c) = mean_losses(epoch_losses)?;
        let (val_loss, val_c) = validation_loss(&model, val_days, setup).map_err(|e| with_epoch(e, epoch, 0))?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                detail: format!("validation loss {val_loss}, components {val_c:?}"),
            });
        }
        let verdict = stopper.observe(val_loss);
        if verdict == Verdict::Improved {
            best = model.clone();
            history.best_epoch = Some(epoch);
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            best_val_loss: stopper.best(),
            lr: opt.config.lr,
            train_components: Some(train_c),
            val_components: Some(val_c),
        });
        opt.set_lr(schedule.observe(val_loss));
        if verdict == Verdict::Stop {
            history.stopped_early = true;
            break;
        }
    }
    Ok((best, history))
}

fn with_epoch(e: Error, epoch: usize, day: usize) -> Error {
    match e {
        Error::NonFiniteLoss { detail, .. } => Error::NonFiniteLoss {
            epoch,
            detail: format!("day {day}: {detail}"),
        },
        other => other,
    }
}

/// Chooses `sd_scale` so that the weighted Sinkhorn term has the same mean
/// magnitude as the scaled energy term over a short trial run.
///
/// A copy of the model is trained for `epochs` epochs with the given setup,
/// and the training-set components of every epoch are averaged.
pub fn calibrate_sd_scale(
    model: &IvaeModel,
    train_days: &[Tensor],
    val_days: &[Tensor],
    setup: &IvaeTraining,
    epochs: usize,
) -> Result<f64> {
    let mut trial = setup.clone();
    trial.train.max_epochs = epochs.max(1);
    trial.train.early_stop_patience = usize::MAX;
    let (_, hist) = train(model, train_days, val_days, &trial)?;
    let n = hist.epochs.len() as f64;
    let (mut ed, mut sd) = (0.0, 0.0);
    for e in &hist.epochs {
        let c = e.train_components.unwrap_or_default();
        ed += c.energy;
        sd += c.sinkhorn;
    }
    let (ed, sd) = (ed / n, sd / n);
    if !(sd > 0.0 && ed.is_finite()) {
        return Err(Error::Degenerate(format!(
            "cannot calibrate the Sinkhorn scale from mean components ED={ed}, SD={sd}"
        )));
    }
    Ok(setup.weights.ed_scale * ed / sd)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> IvaeModel {
        IvaeModel::init(6, 2, 5, 1).unwrap()
    }

    #[test]
    fn permuted_and_duplicated_members_encode_identically() {
        let m = tiny();
        let x = Rng::new(2).normal_tensor(4, 6);
        let base = m.encode_ensemble(&x).unwrap();
        assert_eq!(m.encode_ensemble(&x.select_rows(&[2, 0, 3, 1])).unwrap(), base);
        assert_eq!(m.encode_ensemble(&x.select_rows(&[0, 1, 2, 3, 0, 1, 2, 3])).unwrap(), base);
    }

    #[test]
    fn identical_members_match_single_member() {
        let m = tiny();
        let one = Rng::new(3).normal_tensor(1, 6);
        let many = one.select_rows(&[0, 0, 0]);
        assert_eq!(m.encode_ensemble(&many).unwrap(), m.encode_ensemble(&one).unwrap());
    }

    #[test]
    fn tape_encoder_matches_plain_encoder() {
        let m = tiny();
        let x = Rng::new(4).normal_tensor(3, 6);
        let mut tape = Tape::new();
        let vars = m.register(&mut tape);
        let xv = tape.constant(x.clone());
        let enc = vars.encode(&mut tape, xv, 2).unwrap();
        let (mu, sigma) = m.encode_ensemble(&x).unwrap();
        assert_eq!(tape.value(enc.mu).data(), &mu[..]);
        let s: Vec<f64> = tape.value(enc.log_sigma).data().iter().map(|l| l.exp()).collect();
        assert_eq!(s, sigma);
    }

    #[test]
    fn zero_sigma_decodes_mean_only() {
        let m = tiny();
        let out = m.sample_and_decode(&[0.3, -0.2], &[0.0, 0.0], 7, &mut Rng::new(0)).unwrap();
        assert_eq!(out.rows(), 7);
        let d = m.decoder.forward(&Tensor::matrix(1, 2, vec![0.3, -0.2])).unwrap();
        for r in out.row_iter() {
            assert_eq!(r, d.data());
        }
    }

    #[test]
    fn kl_closed_form() {
        assert_eq!(kl_std_normal(&[0.0, 0.0], &[1.0, 1.0]), 0.0);
        assert_eq!(kl_std_normal(&[1.0], &[1.0]), 0.5);
    }

    #[test]
    fn weights_one_zero_zero_give_twice_the_energy_distance() {
        let m = tiny();
        let x = Rng::new(5).normal_tensor(4, 6);
        let eps = Rng::new(6).normal_tensor(4, 2);
        let w = LossWeights {
            omega1: 1.0,
            omega2: 0.0,
            omega3: 0.0,
            ..LossWeights::default()
        };
        let (l, c) = m.loss(&x, &eps, &w, &SinkhornConfig::training()).unwrap();
        assert_eq!(l, 2.0 * c.energy);
        let w = LossWeights::default();
        let (l, c) = m.loss(&x, &eps, &w, &SinkhornConfig::training()).unwrap();
        assert_eq!(l, w.total(&c));
    }

    #[test]
    fn blob_round_trip() {
        let m = tiny();
        assert_eq!(IvaeModel::from_bytes(&m.to_bytes()).unwrap(), m);
    }
}
