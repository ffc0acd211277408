//! Deterministic dense autoencoder `d_data -> w -> d_latent -> w -> d_data`
//! trained on mean absolute error.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Mlp, LEAKY_SLOPE};
use crate::numerics::rng::stream;
use crate::numerics::{AdamWState, PlateauSchedule, Rng, Tape, Tensor};
use crate::persist::{self, BlobReader, BlobWriter};
use crate::training::{EarlyStopping, EpochRecord, History, TrainConfig, Verdict};

const AE_TAG: [u8; 4] = *b"EAE1";

/// Hidden width used when nothing else is configured.
pub const DEFAULT_WIDTH: usize = 128;

#[derive(Debug, Clone, PartialEq)]
pub struct AeModel {
    pub encoder: Mlp,
    pub decoder: Mlp,
}

impl AeModel {
    /// Kaiming-uniform weights, zero biases.
    pub fn init(d_data: usize, d_latent: usize, width: usize, seed: u64) -> Result<Self> {
        if d_data == 0 || d_latent == 0 || width == 0 {
            return Err(Error::InvalidArgument("autoencoder dimensions must be >= 1".into()));
        }
        let root = Rng::new(seed).derive(stream::INIT);
        Ok(Self {
            encoder: Mlp::new(&[d_data, width, d_latent], LEAKY_SLOPE, false, &mut root.derive(0)),
            decoder: Mlp::new(&[d_latent, width, d_data], LEAKY_SLOPE, false, &mut root.derive(1)),
        })
    }

    pub fn d_data(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn d_latent(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn width(&self) -> usize {
        self.encoder.layers[0].fan_out()
    }

    /// Codes of each row (`n x d_data -> n x d_latent`).
    pub fn encode(&self, fields: &Tensor) -> Result<Tensor> {
        self.encoder.forward(fields)
    }

    pub fn decode(&self, codes: &Tensor) -> Result<Tensor> {
        self.decoder.forward(codes)
    }

    pub fn reconstruct(&self, fields: &Tensor) -> Result<Tensor> {
        self.decode(&self.encode(fields)?)
    }

    /// Mean absolute reconstruction error over all entries.
    pub fn mae(&self, fields: &Tensor) -> Result<f64> {
        let rec = self.reconstruct(fields)?;
        Ok(rec.sub(fields)?.data().iter().map(|x| x.abs()).sum::<f64>() / fields.len() as f64)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        p
    }

    /// MAE loss of a batch recorded on `tape`; returns the loss variable.
    pub fn loss_on_tape(&self, tape: &mut Tape, batch: &Tensor) -> Result<crate::numerics::Var> {
        let enc = self.encoder.register(tape);
        let dec = self.decoder.register(tape);
        let x = tape.constant(batch.clone());
        let z = enc.forward(tape, x)?;
        let y = dec.forward(tape, z)?;
        let r = tape.sub(y, x)?;
        let a = tape.abs(r)?;
        tape.mean(a)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = BlobWriter::new(AE_TAG);
        w.u32(self.d_data()).u32(self.d_latent()).u32(self.width());
        self.encoder.write(&mut w);
        self.decoder.write(&mut w);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = BlobReader::new(bytes, AE_TAG)?;
        let (_d, _k, _w) = (r.u32()?, r.u32()?, r.u32()?);
        let encoder = Mlp::read(&mut r, LEAKY_SLOPE, false)?;
        let decoder = Mlp::read(&mut r, LEAKY_SLOPE, false)?;
        r.finish()?;
        Ok(Self { encoder, decoder })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        persist::write_file(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Mini-batch AdamW on MAE with per-epoch shuffling, plateau learning-rate
/// decay and early stopping. Returns the best-validation checkpoint.
///
/// `train` and `val` hold one standardized member field per row.
pub fn train(
    model: &AeModel,
    train: &Tensor,
    val: &Tensor,
    cfg: &TrainConfig,
) -> Result<(AeModel, History)> {
    cfg.validate()?;
    if train.rows() == 0 || val.rows() == 0 {
        return Err(Error::InvalidArgument("empty training or validation set".into()));
    }
    let mut model = model.clone();
    let mut opt = AdamWState::new(cfg.adamw(), &model.params());
    let mut schedule = PlateauSchedule::new(cfg.plateau());
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let shuffle_root = Rng::new(cfg.seed).derive(stream::SHUFFLE);

    let mut history = History {
        initial_val_loss: model.mae(val)?,
        ..Default::default()
    };
    let mut best = model.clone();
    let n = train.rows();

    for epoch in 1..=cfg.max_epochs {
        let order = shuffle_root.derive(epoch as u64).permutation(n);
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch = train.select_rows(idx);
            let mut tape = Tape::new();
            let loss = model.loss_on_tape(&mut tape, &batch)?;
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    detail: format!("training MAE = {lv} on a batch of {}", idx.len()),
                });
            }
            total += lv * idx.len() as f64;
            let grads = tape.backward(loss)?.into_params();
            opt.step(&mut model.params_mut(), &grads)?;
        }
        let train_loss = total / n as f64;
        let val_loss = model.mae(val)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                detail: format!("validation MAE = {val_loss}"),
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
            train_components: None,
            val_components: None,
        });
        opt.set_lr(schedule.observe(val_loss));
        if verdict == Verdict::Stop {
            history.stopped_early = true;
            break;
        }
    }
    Ok((best, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_encode_and_decode_to_zero() {
        let mut m = AeModel::init(6, 2, 4, 0).unwrap();
        m.params_mut()
            .into_iter()
            .for_each(|p| p.data_mut().iter_mut().for_each(|x| *x = 0.0));
        let x = Rng::new(1).normal_tensor(3, 6);
        assert_eq!(m.encode(&x).unwrap().max_abs(), 0.0);
        assert_eq!(m.decode(&Rng::new(2).normal_tensor(3, 2)).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn same_seed_same_weights_and_zero_biases() {
        let a = AeModel::init(10, 3, 8, 42).unwrap();
        assert_eq!(a, AeModel::init(10, 3, 8, 42).unwrap());
        assert_ne!(a, AeModel::init(10, 3, 8, 43).unwrap());
        for l in a.encoder.layers.iter().chain(&a.decoder.layers) {
            assert!(l.bias.data().iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn blob_round_trip() {
        let a = AeModel::init(7, 2, 5, 3).unwrap();
        assert_eq!(AeModel::from_bytes(&a.to_bytes()).unwrap(), a);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = AeModel::init(7, 2, 5, 3).unwrap();
        assert!(a.encode(&Tensor::zeros(1, 6)).is_err());
        assert!(a.decode(&Tensor::zeros(1, 3)).is_err());
    }
}
