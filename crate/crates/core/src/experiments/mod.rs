//! Evaluation harness: error sweeps over test PSNR, paired comparisons,
//! validation of the quadratic KL approximation, regularizer tracking and
//! posterior maps around an encoded point.
//!
//! Every cell `(psnr, sample)` draws from its own stream derived from the
//! root seed, so results do not depend on evaluation order or thread count,
//! and two models evaluated with the same seed see identical channel noise.

mod grid;

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

pub use grid::{posterior_grid, top_eigenvectors, GridRequest, PosteriorGrid, PowerIteration};

use crate::autodiff::{argmax, Tensor};
use crate::channel::{psnr_to_sigma2, ChannelFamily, ChannelSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{DecoderModel, EncoderModel};
use crate::robustness::{expected_kl_mc, fisher_traces};
use crate::rng::{Label, Stream};

pub const SWEEP_SCHEMA: &str = "# schema=sweep/v1";
pub const TAYLOR_SCHEMA: &str = "# schema=taylor/v1";
pub const TRACK_SCHEMA: &str = "# schema=regularizer_track/v1";
pub const COMPARE_SCHEMA: &str = "# schema=compare/v1";

/// Channel draws per test sample when none is given.
pub const DEFAULT_TRIALS: usize = 20;

fn csv_file(path: &Path, schema: &str) -> Result<csv::Writer<std::fs::File>> {
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "{schema}")?;
    Ok(csv::Writer::from_writer(file))
}

fn check_pair(encoder: &EncoderModel, decoder: &DecoderModel, data: &Dataset) -> Result<()> {
    if encoder.latent_dim() != decoder.latent_dim() {
        return Err(Error::shape(
            "experiment",
            format!("encoder emits {} dims, decoder reads {}", encoder.latent_dim(), decoder.latent_dim()),
        ));
    }
    if data.dim() != encoder.input_dim() {
        return Err(Error::shape(
            "experiment",
            format!("data has {} features, encoder expects {}", data.dim(), encoder.input_dim()),
        ));
    }
    if data.classes != decoder.classes() {
        return Err(Error::shape(
            "experiment",
            format!("data has {} classes, decoder has {}", data.classes, decoder.classes()),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub regime: String,
    pub psnr_db: f64,
    pub family: ChannelFamily,
    pub error_rate: f64,
    /// Dataset mean of `σ²/2 · Tr I(z)`.
    pub mean_regularizer: f64,
    /// Dataset mean of the KL between noise-free and noisy posteriors over
    /// the same draws used for the error rate.
    pub mean_expected_kl: f64,
    /// Fading draws whose `|h|` was floored.
    pub fade_floor_hits: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn row(&self, psnr_db: f64) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.psnr_db == psnr_db)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_file(path, SWEEP_SCHEMA)?;
        w.write_record([
            "regime",
            "psnr_db",
            "family",
            "error_rate",
            "mean_regularizer",
            "mean_expected_kl",
            "fade_floor_hits",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.regime.clone(),
                r.psnr_db.to_string(),
                r.family.to_string(),
                r.error_rate.to_string(),
                r.mean_regularizer.to_string(),
                r.mean_expected_kl.to_string(),
                r.fade_floor_hits.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRequest<'a> {
    /// Free-form description of how the model was trained.
    pub regime: &'a str,
    pub psnr_grid: &'a [f64],
    pub family: ChannelFamily,
    pub trials: usize,
    pub seed: u64,
}

struct CellOutcome {
    errors: usize,
    kl_sum: f64,
    floored: usize,
}

/// Misclassification rate at each test PSNR, averaged over `trials`
/// independent channel uses per test sample.
pub fn error_sweep(
    encoder: &EncoderModel,
    decoder: &DecoderModel,
    data: &Dataset,
    request: &SweepRequest<'_>,
) -> Result<SweepResult> {
    check_pair(encoder, decoder, data)?;
    if request.trials == 0 {
        return Err(Error::invalid("error sweep needs at least one trial"));
    }
    let z = encoder.encode(&data.features)?;
    let traces = fisher_traces(decoder, &z)?;
    let mean_trace = traces.iter().sum::<f64>() / traces.len() as f64;
    let t = request.trials;
    let mut rows = Vec::with_capacity(request.psnr_grid.len());

    for (p, &psnr_db) in request.psnr_grid.iter().enumerate() {
        let spec = ChannelSpec::from_psnr(request.family, encoder.power(), psnr_db)?;
        let cells: Vec<Result<CellOutcome>> = (0..data.len())
            .into_par_iter()
            .map(|i| {
                let mut rng = Stream::derived(
                    request.seed,
                    &[
                        Label::Tag("sweep"),
                        Label::Tag(request.family.as_str()),
                        Label::Index(p as u64),
                        Label::Index(i as u64),
                    ],
                );
                let z_row = Tensor::row_vector(z.row(i))?;
                let mut batch = Vec::with_capacity((t + 1) * z_row.len());
                batch.extend_from_slice(z_row.data());
                let mut floored = 0;
                for _ in 0..t {
                    let draw = spec.transmit(&z_row, &mut rng)?;
                    floored += usize::from(draw.floored);
                    batch.extend_from_slice(draw.received.data());
                }
                let lp = decoder.log_probs(&Tensor::matrix(t + 1, z_row.len(), batch)?)?;
                let y = data.labels[i];
                let mut errors = 0;
                let mut kl_sum = 0.0;
                for r in 1..=t {
                    errors += usize::from(argmax(lp.row(r)) != y);
                    kl_sum += row_kl(lp.row(0), lp.row(r));
                }
                Ok(CellOutcome { errors, kl_sum, floored })
            })
            .collect();
        let (mut errors, mut kl_sum, mut floored) = (0usize, 0.0, 0usize);
        for c in cells {
            let c = c?;
            errors += c.errors;
            kl_sum += c.kl_sum;
            floored += c.floored;
        }
        let uses = (data.len() * t) as f64;
        rows.push(SweepRow {
            regime: request.regime.to_string(),
            psnr_db,
            family: request.family,
            error_rate: errors as f64 / uses,
            mean_regularizer: spec.sigma2 / 2.0 * mean_trace,
            mean_expected_kl: kl_sum / uses,
            fade_floor_hits: floored,
        });
    }
    Ok(SweepResult { rows })
}

fn row_kl(reference: &[f64], other: &[f64]) -> f64 {
    reference
        .iter()
        .zip(other)
        .map(|(&lp, &lq)| {
            let p = lp.exp();
            if p == 0.0 {
                0.0
            } else {
                p * (lp - lq)
            }
        })
        .sum::<f64>()
        .max(0.0)
}

/// Error of the noise-free pipeline on `data`.
pub fn clean_error(encoder: &EncoderModel, decoder: &DecoderModel, data: &Dataset) -> Result<f64> {
    check_pair(encoder, decoder, data)?;
    let pred = decoder.predict(&encoder.encode(&data.features)?)?;
    let wrong = pred.iter().zip(&data.labels).filter(|(p, y)| p != y).count();
    Ok(wrong as f64 / data.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub psnr_db: f64,
    pub family: ChannelFamily,
    pub error_a: f64,
    pub error_b: f64,
    /// `error_a - error_b`; negative when A is better.
    pub delta: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PairedReport {
    pub rows: Vec<CompareRow>,
}

impl PairedReport {
    /// Counts of (A better, tie, B better).
    pub fn sign_summary(&self) -> (usize, usize, usize) {
        let neg = self.rows.iter().filter(|r| r.delta < 0.0).count();
        let zero = self.rows.iter().filter(|r| r.delta == 0.0).count();
        (neg, zero, self.rows.len() - neg - zero)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_file(path, COMPARE_SCHEMA)?;
        w.write_record(["psnr_db", "family", "error_a", "error_b", "delta"])?;
        for r in &self.rows {
            w.write_record([
                r.psnr_db.to_string(),
                r.family.to_string(),
                r.error_a.to_string(),
                r.error_b.to_string(),
                r.delta.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Row-wise difference of two sweeps run over the same grid.
pub fn paired_report(a: &SweepResult, b: &SweepResult) -> Result<PairedReport> {
    if a.rows.len() != b.rows.len() {
        return Err(Error::invalid(format!("sweeps have {} and {} rows", a.rows.len(), b.rows.len())));
    }
    let mut rows = Vec::with_capacity(a.rows.len());
    for (ra, rb) in a.rows.iter().zip(&b.rows) {
        if ra.psnr_db != rb.psnr_db || ra.family != rb.family {
            return Err(Error::invalid(format!(
                "sweep grids differ: {} dB {} vs {} dB {}",
                ra.psnr_db, ra.family, rb.psnr_db, rb.family
            )));
        }
        rows.push(CompareRow {
            psnr_db: ra.psnr_db,
            family: ra.family,
            error_a: ra.error_rate,
            error_b: rb.error_rate,
            delta: ra.error_rate - rb.error_rate,
        });
    }
    Ok(PairedReport { rows })
}

/// Shared-seed sweep of two model pairs.
pub fn compare(
    a: (&EncoderModel, &DecoderModel),
    b: (&EncoderModel, &DecoderModel),
    data: &Dataset,
    request: &SweepRequest<'_>,
) -> Result<PairedReport> {
    if a.0.latent_dim() != b.0.latent_dim() {
        return Err(Error::invalid("paired models must share the representation size"));
    }
    let sa = error_sweep(a.0, a.1, data, request)?;
    let sb = error_sweep(b.0, b.1, data, request)?;
    paired_report(&sa, &sb)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaylorRow {
    pub sigma2: f64,
    pub psnr_db: f64,
    pub mean_expected_kl: f64,
    /// Monte-Carlo standard error of `mean_expected_kl`.
    pub std_error: f64,
    pub mean_regularizer: f64,
    /// `mean_expected_kl / mean_regularizer`, 1 when both vanish.
    pub ratio: f64,
    pub abs_gap: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TaylorTable {
    pub rows: Vec<TaylorRow>,
}

impl TaylorTable {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_file(path, TAYLOR_SCHEMA)?;
        w.write_record([
            "sigma2",
            "psnr_db",
            "mean_expected_kl",
            "std_error",
            "mean_regularizer",
            "ratio",
            "abs_gap",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.sigma2.to_string(),
                r.psnr_db.to_string(),
                r.mean_expected_kl.to_string(),
                r.std_error.to_string(),
                r.mean_regularizer.to_string(),
                r.ratio.to_string(),
                r.abs_gap.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Row whose ratio is closest to 1.
    pub fn closest_to_one(&self) -> Option<&TaylorRow> {
        self.rows
            .iter()
            .min_by(|a, b| (a.ratio - 1.0).abs().total_cmp(&(b.ratio - 1.0).abs()))
    }
}

pub const MIN_TAYLOR_SAMPLES: usize = 20;

/// Compares the Monte-Carlo expected KL on AWGN with `σ²/2 · Tr I(z)`,
/// both averaged over `data`, for each `σ²`.
///
/// Each sample reuses the same unit-variance draws at every `σ²`, scaled by
/// `σ`, so differences between rows reflect the approximation error rather
/// than sampling noise.
pub fn taylor_validation(
    encoder: &EncoderModel,
    decoder: &DecoderModel,
    data: &Dataset,
    sigma2_grid: &[f64],
    samples: usize,
    seed: u64,
) -> Result<TaylorTable> {
    check_pair(encoder, decoder, data)?;
    if samples < MIN_TAYLOR_SAMPLES {
        return Err(Error::invalid(format!(
            "need at least {MIN_TAYLOR_SAMPLES} Monte-Carlo samples, got {samples}"
        )));
    }
    let z = encoder.encode(&data.features)?;
    let traces = fisher_traces(decoder, &z)?;
    let n = data.len() as f64;
    let mean_trace = traces.iter().sum::<f64>() / n;
    let mut rows = Vec::with_capacity(sigma2_grid.len());
    for &sigma2 in sigma2_grid {
        let spec = ChannelSpec::from_sigma2(ChannelFamily::Awgn, encoder.power(), sigma2)?;
        let estimates: Vec<Result<(f64, f64)>> = (0..data.len())
            .into_par_iter()
            .map(|i| {
                let mut rng = Stream::derived(seed, &[Label::Tag("taylor"), Label::Index(i as u64)]);
                let e = expected_kl_mc(decoder, z.row(i), &spec, samples, &mut rng)?;
                Ok((e.mean, e.std_error))
            })
            .collect();
        let (mut kl, mut var) = (0.0, 0.0);
        for e in estimates {
            let (m, se) = e?;
            kl += m;
            var += se * se;
        }
        let mean_kl = kl / n;
        let reg = sigma2 / 2.0 * mean_trace;
        let ratio = if reg == 0.0 && mean_kl == 0.0 { 1.0 } else { mean_kl / reg };
        rows.push(TaylorRow {
            sigma2,
            psnr_db: spec.psnr_db,
            mean_expected_kl: mean_kl,
            std_error: var.sqrt() / n,
            mean_regularizer: reg,
            ratio,
            abs_gap: (mean_kl - reg).abs(),
        });
    }
    Ok(TaylorTable { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrackRow {
    pub model: String,
    pub psnr_db: f64,
    pub sigma2: f64,
    pub mean_fisher_trace: f64,
    pub mean_regularizer: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrackTable {
    pub rows: Vec<TrackRow>,
}

impl TrackTable {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_file(path, TRACK_SCHEMA)?;
        w.write_record(["model", "psnr_db", "sigma2", "mean_fisher_trace", "mean_regularizer"])?;
        for r in &self.rows {
            w.write_record([
                r.model.clone(),
                r.psnr_db.to_string(),
                r.sigma2.to_string(),
                r.mean_fisher_trace.to_string(),
                r.mean_regularizer.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Mean `Tr I(z)` over `data` for a model pair.
pub fn mean_fisher_trace(encoder: &EncoderModel, decoder: &DecoderModel, data: &Dataset) -> Result<f64> {
    check_pair(encoder, decoder, data)?;
    let z = encoder.encode(&data.features)?;
    let t = fisher_traces(decoder, &z)?;
    Ok(t.iter().sum::<f64>() / t.len() as f64)
}

/// Mean regularizer of each named model at each test PSNR.
pub fn regularizer_track(
    models: &[(&str, &EncoderModel, &DecoderModel)],
    psnr_grid: &[f64],
    data: &Dataset,
) -> Result<TrackTable> {
    let mut rows = Vec::with_capacity(models.len() * psnr_grid.len());
    for &(name, enc, dec) in models {
        let trace = mean_fisher_trace(enc, dec, data)?;
        for &psnr_db in psnr_grid {
            let sigma2 = psnr_to_sigma2(psnr_db, enc.power())?;
            rows.push(TrackRow {
                model: name.to_string(),
                psnr_db,
                sigma2,
                mean_fisher_trace: trace,
                mean_regularizer: sigma2 / 2.0 * trace,
            });
        }
    }
    Ok(TrackTable { rows })
}
