use crate::autodiff::{argmax, Graph, Tensor, Var};
use crate::channel::{draw_fading, ChannelFamily, FADE_FLOOR};
use crate::error::{Error, Result};
use crate::models::{DecoderModel, EncoderModel};
use crate::robustness::fisher_trace_node;
use crate::rng::Stream;

/// How the Fisher trace enters the loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegularizerWeight {
    pub lambda: f64,
    /// Drop the `σ²/2` factor, leaving `λ·Tr I(z)`.
    pub omit_variance: bool,
}

impl RegularizerWeight {
    pub fn new(lambda: f64) -> Self {
        RegularizerWeight {
            lambda,
            omit_variance: false,
        }
    }

    /// Multiplier applied to the batch-mean Fisher trace.
    pub fn coefficient(&self, sigma2: f64) -> f64 {
        if self.omit_variance {
            self.lambda
        } else {
            self.lambda * sigma2 / 2.0
        }
    }
}

/// Noisy channel uses drawn for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraws {
    pub family: ChannelFamily,
    pub sigma2: f64,
    /// Draws per datum.
    pub per_datum: usize,
    /// `[n·L, k]`, row `i·L + l` is the perturbation `ẑ - z` for datum `i`.
    pub perturbation: Tensor,
}

impl NoiseDraws {
    /// Row `i·L + l` gets its own noise vector and, under fading, its own
    /// coefficient `h`.
    pub fn sample(
        family: ChannelFamily,
        sigma2: f64,
        rows: usize,
        k: usize,
        per_datum: usize,
        rng: &mut Stream,
    ) -> Result<Self> {
        if !(sigma2 >= 0.0) || !sigma2.is_finite() {
            return Err(Error::invalid(format!("noise variance must be >= 0, got {sigma2}")));
        }
        if per_datum == 0 {
            return Err(Error::invalid("need at least one noise draw per datum"));
        }
        let mut perturbation = Tensor::zeros(&[rows * per_datum, k]);
        if sigma2 > 0.0 {
            let std = sigma2.sqrt();
            match family {
                ChannelFamily::Awgn => rng.fill_normal(perturbation.data_mut(), std),
                ChannelFamily::Rayleigh => {
                    for row in perturbation.data_mut().chunks_mut(k) {
                        let gain = draw_fading(rng).norm().max(FADE_FLOOR);
                        rng.fill_normal(row, std);
                        row.iter_mut().for_each(|v| *v /= gain);
                    }
                }
            }
        }
        Ok(NoiseDraws {
            family,
            sigma2,
            per_datum,
            perturbation,
        })
    }
}

/// Batch means recorded alongside the loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSummary {
    pub total: f64,
    pub cross_entropy: f64,
    /// `σ²/2 · Tr I(z)` averaged over the batch, whatever the weighting.
    pub regularizer: f64,
    pub fisher_trace: f64,
    /// Correct argmax decisions over all `n·L` noisy uses.
    pub correct: usize,
    pub uses: usize,
}

/// The recorded loss with handles for differentiation.
#[derive(Debug)]
pub struct LossGraph {
    pub graph: Graph,
    pub loss: Var,
    pub encoder_params: Vec<Var>,
    pub decoder_params: Vec<Var>,
    pub summary: LossSummary,
}

impl LossGraph {
    /// Gradients for encoder then decoder parameters.
    pub fn gradients(&self) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        let n_enc = self.encoder_params.len();
        let mut wrt = self.encoder_params.clone();
        wrt.extend_from_slice(&self.decoder_params);
        let mut grads = self.graph.backward(self.loss, &wrt)?;
        let dec = grads.split_off(n_enc);
        Ok((grads, dec))
    }
}

/// Noise-averaged cross-entropy plus the weighted Fisher-trace penalty on
/// the noise-free representation:
///
/// ```text
/// (1/n) Σ_i [ -(1/L) Σ_l log q(y_i | z_i + n_il) + c · Tr I(z_i) ]
/// ```
///
/// with `c = λσ²/2` (or `λ` when the variance is omitted). The trace is
/// recorded even when `λ = 0` so its value can be logged.
pub fn regularized_loss(
    x: &Tensor,
    labels: &[usize],
    encoder: &EncoderModel,
    decoder: &DecoderModel,
    noise: &NoiseDraws,
    weight: RegularizerWeight,
) -> Result<LossGraph> {
    let (n, _) = x.expect_matrix("regularized_loss")?;
    if labels.len() != n {
        return Err(Error::shape("regularized_loss", format!("{n} rows, {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= decoder.classes()) {
        return Err(Error::ClassOutOfRange {
            class: bad,
            classes: decoder.classes(),
        });
    }
    if !(weight.lambda >= 0.0) {
        return Err(Error::invalid(format!("lambda must be >= 0, got {}", weight.lambda)));
    }
    let reps = noise.per_datum;
    let k = encoder.latent_dim();
    if noise.perturbation.shape() != [n * reps, k] {
        return Err(Error::shape(
            "regularized_loss",
            format!("noise {:?} for {n} rows, L = {reps}, k = {k}", noise.perturbation.shape()),
        ));
    }

    let mut graph = Graph::new();
    let encoder_params = encoder.params().bind(&mut graph);
    let decoder_params = decoder.params().bind(&mut graph);
    let x_var = graph.constant(x.clone());
    let z = encoder.forward_graph(&mut graph, &encoder_params, x_var)?;

    let z_rep = graph.repeat_rows(z, reps)?;
    let n_var = graph.constant(noise.perturbation.clone());
    let z_hat = graph.add(z_rep, n_var)?;
    let (_, log_probs) = decoder.forward_graph(&mut graph, &decoder_params, z_hat)?;
    let rep_labels: Vec<usize> = labels.iter().flat_map(|&y| std::iter::repeat_n(y, reps)).collect();
    let picked = graph.pick_per_row(log_probs, &rep_labels)?;
    let mean_lp = graph.mean(picked)?;
    let cross_entropy = graph.scale(mean_lp, -1.0)?;

    let traces = fisher_trace_node(&mut graph, decoder, &decoder_params, z)?;
    let mean_trace = graph.mean(traces)?;
    let c = weight.coefficient(noise.sigma2);
    let loss = if c > 0.0 {
        let penalty = graph.scale(mean_trace, c)?;
        graph.add(cross_entropy, penalty)?
    } else {
        cross_entropy
    };

    let lp = graph.value(log_probs);
    let correct = rep_labels
        .iter()
        .enumerate()
        .filter(|&(r, &y)| argmax(lp.row(r)) == y)
        .count();
    let ce = graph.value(cross_entropy).item();
    let tr = graph.value(mean_trace).item();
    let summary = LossSummary {
        total: graph.value(loss).item(),
        cross_entropy: ce,
        regularizer: noise.sigma2 / 2.0 * tr,
        fisher_trace: tr,
        correct,
        uses: n * reps,
    };
    Ok(LossGraph {
        graph,
        loss,
        encoder_params,
        decoder_params,
        summary,
    })
}
