//! Regularized training: noise-averaged cross-entropy plus a weighted Fisher
//! trace penalty, optimized with Adam over shuffled mini-batches.

mod adam;
mod loss;

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use adam::{AdamState, BETA1, BETA2, EPSILON};
pub use loss::{regularized_loss, LossGraph, LossSummary, NoiseDraws, RegularizerWeight};

use crate::channel::{psnr_to_sigma2, ChannelFamily};
use crate::data::Dataset;
use crate::error::{DivergenceSnapshot, Error, Result};
use crate::models::{DecoderModel, EncoderModel};
use crate::rng::{Label, Stream};

pub const TRAIN_LOG_SCHEMA: &str = "# schema=train_log/v1";
pub const TIMING_SCHEMA: &str = "# schema=timing/v1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PsnrRegime {
    Fixed { db: f64 },
    UniformRange { lo_db: f64, hi_db: f64 },
}

impl PsnrRegime {
    pub fn label(&self) -> String {
        match *self {
            PsnrRegime::Fixed { db } => format!("fixed:{db}"),
            PsnrRegime::UniformRange { lo_db, hi_db } => format!("uniform:{lo_db}-{hi_db}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda: f64,
    /// Noise draws per datum per step.
    pub noise_samples: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub psnr: PsnrRegime,
    pub family: ChannelFamily,
    pub omit_variance: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.0,
            noise_samples: 4,
            epochs: 100,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
            psnr: PsnrRegime::Fixed { db: 20.0 },
            family: ChannelFamily::Awgn,
            omit_variance: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::invalid(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if self.noise_samples == 0 {
            return Err(Error::invalid("noise_samples must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        match self.psnr {
            PsnrRegime::Fixed { db } if !db.is_finite() => Err(Error::invalid("training PSNR must be finite")),
            PsnrRegime::UniformRange { lo_db, hi_db } if !(lo_db < hi_db) || !hi_db.is_finite() || !lo_db.is_finite() => {
                Err(Error::invalid(format!("PSNR range needs lo < hi, got [{lo_db}, {hi_db}]")))
            }
            _ => Ok(()),
        }
    }
}

/// Candidate λ values for a grid search. With a fixed training PSNR the grid
/// spans `[0.1, 1]`. With a sampled PSNR it spans an effective weight
/// `λσ²/2 ∈ [0.5, 1.5]` with `σ²` taken at 10 dB for the given power.
pub fn lambda_grid(regime: &PsnrRegime, power: f64, points: usize) -> Result<Vec<f64>> {
    if points < 2 {
        return Err(Error::invalid("a lambda grid needs at least two points"));
    }
    let (lo, hi, scale) = match regime {
        PsnrRegime::Fixed { .. } => (0.1, 1.0, 1.0),
        PsnrRegime::UniformRange { .. } => (0.5, 1.5, 2.0 / psnr_to_sigma2(10.0, power)?),
    };
    Ok((0..points)
        .map(|i| scale * (lo + (hi - lo) * i as f64 / (points - 1) as f64))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub cross_entropy: f64,
    pub regularizer: f64,
    pub fisher_trace: f64,
    pub train_accuracy: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<EpochRecord>,
}

impl TrainLog {
    /// Per-epoch metrics. Wall time is left out so that the file is
    /// reproducible; see [`TrainLog::write_timing_csv`].
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        writeln!(file, "{TRAIN_LOG_SCHEMA}")?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(["epoch", "cross_entropy", "regularizer", "fisher_trace", "train_accuracy"])?;
        for r in &self.rows {
            w.write_record([
                r.epoch.to_string(),
                r.cross_entropy.to_string(),
                r.regularizer.to_string(),
                r.fisher_trace.to_string(),
                r.train_accuracy.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_timing_csv(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        writeln!(file, "{TIMING_SCHEMA}")?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(["epoch", "wall_seconds"])?;
        for r in &self.rows {
            w.write_record([r.epoch.to_string(), r.wall_seconds.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.rows.last()
    }
}

/// Training PSNR for one batch.
fn batch_sigma2(config: &TrainConfig, power: f64, epoch: usize, batch: usize) -> Result<f64> {
    match config.psnr {
        PsnrRegime::Fixed { db } => psnr_to_sigma2(db, power),
        PsnrRegime::UniformRange { lo_db, hi_db } => {
            let mut rng = Stream::derived(
                config.seed,
                &[Label::Tag("psnr"), Label::Index(epoch as u64), Label::Index(batch as u64)],
            );
            psnr_to_sigma2(rng.uniform_range(lo_db, hi_db), power)
        }
    }
}

/// Seeded permutation of `0..n` for one epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    Stream::derived(seed, &[Label::Tag("shuffle"), Label::Index(epoch as u64)]).shuffle(&mut order);
    order
}

pub fn train(
    config: &TrainConfig,
    data: &Dataset,
    encoder: EncoderModel,
    decoder: DecoderModel,
) -> Result<(EncoderModel, DecoderModel, TrainLog)> {
    train_with(config, data, encoder, decoder, |_, _, _, _| Ok(()))
}

/// Like [`train`], calling `on_epoch(epoch, encoder, decoder, record)` after
/// every epoch (used for periodic checkpoints).
pub fn train_with<F>(
    config: &TrainConfig,
    data: &Dataset,
    mut encoder: EncoderModel,
    mut decoder: DecoderModel,
    mut on_epoch: F,
) -> Result<(EncoderModel, DecoderModel, TrainLog)>
where
    F: FnMut(usize, &EncoderModel, &DecoderModel, &EpochRecord) -> Result<()>,
{
    config.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if data.dim() != encoder.input_dim() {
        return Err(Error::shape(
            "train",
            format!("data has {} features, encoder expects {}", data.dim(), encoder.input_dim()),
        ));
    }
    if data.classes != decoder.classes() {
        return Err(Error::shape(
            "train",
            format!("data has {} classes, decoder has {}", data.classes, decoder.classes()),
        ));
    }
    let weight = RegularizerWeight {
        lambda: config.lambda,
        omit_variance: config.omit_variance,
    };
    let mut enc_state = AdamState::new(encoder.params());
    let mut dec_state = AdamState::new(decoder.params());
    let mut log = TrainLog::default();
    let mut last_finite: Option<f64> = None;
    let n = data.len();
    let k = encoder.latent_dim();

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let order = epoch_order(config.seed, epoch, n);
        let (mut ce_sum, mut reg_sum, mut tr_sum) = (0.0, 0.0, 0.0);
        let (mut correct, mut uses) = (0usize, 0usize);

        for (batch, idx) in order.chunks(config.batch_size).enumerate() {
            let sigma2 = batch_sigma2(config, encoder.power(), epoch, batch)?;
            let diverged = |reason: String, last: Option<f64>, enc: &EncoderModel, dec: &DecoderModel| {
                Error::Diverged {
                    epoch,
                    batch,
                    reason,
                    snapshot: Box::new(DivergenceSnapshot {
                        epoch,
                        batch,
                        sigma2,
                        lambda: config.lambda,
                        last_finite_loss: last,
                        max_abs_param: enc.params().max_abs().max(dec.params().max_abs()),
                    }),
                }
            };
            let x = data.features.select_rows(idx);
            let y: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let mut noise_rng = Stream::derived(
                config.seed,
                &[Label::Tag("noise"), Label::Index(epoch as u64), Label::Index(batch as u64)],
            );
            let noise = NoiseDraws::sample(config.family, sigma2, idx.len(), k, config.noise_samples, &mut noise_rng)?;
            let recorded = match regularized_loss(&x, &y, &encoder, &decoder, &noise, weight) {
                Ok(r) => r,
                Err(Error::NonFinite { op }) => {
                    return Err(diverged(format!("non-finite value in {op}"), last_finite, &encoder, &decoder))
                }
                Err(e) => return Err(e),
            };
            let s = recorded.summary;
            if !s.total.is_finite() {
                return Err(diverged("loss is not finite".into(), last_finite, &encoder, &decoder));
            }
            let (g_enc, g_dec) = recorded.gradients()?;
            if g_enc.iter().chain(&g_dec).any(|g| !g.is_finite()) {
                return Err(diverged("gradient is not finite".into(), Some(s.total), &encoder, &decoder));
            }
            last_finite = Some(s.total);
            enc_state.step(encoder.params_mut(), &g_enc, config.learning_rate)?;
            dec_state.step(decoder.params_mut(), &g_dec, config.learning_rate)?;

            let b = idx.len() as f64;
            ce_sum += s.cross_entropy * b;
            reg_sum += s.regularizer * b;
            tr_sum += s.fisher_trace * b;
            correct += s.correct;
            uses += s.uses;
        }

        let record = EpochRecord {
            epoch,
            cross_entropy: ce_sum / n as f64,
            regularizer: reg_sum / n as f64,
            fisher_trace: tr_sum / n as f64,
            train_accuracy: correct as f64 / uses as f64,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: ce {:.4} reg {:.4e} acc {:.3}",
            record.cross_entropy,
            record.regularizer,
            record.train_accuracy
        );
        on_epoch(epoch, &encoder, &decoder, &record)?;
        log.rows.push(record);
    }
    Ok((encoder, decoder, log))
}
