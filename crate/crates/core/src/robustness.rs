//! KL divergence between noise-free and noisy posteriors, the Fisher
//! information of the decoder with respect to its input, and the closed-form
//! regularizer built from it.
//!
//! For a decoder posterior `q(y|z)` the Fisher information is
//!
//! ```text
//! I(z) = Σ_y q(y|z) ∇_z log q(y|z) ∇_z log q(y|z)ᵀ
//! ```
//!
//! and, to second order in the perturbation `ẑ - z`,
//! `KL(q(·|z) ‖ q(·|ẑ)) ≈ ½ (ẑ - z)ᵀ I(z) (ẑ - z)`. Averaging over Gaussian
//! channel noise with covariance `Σ_n` gives `½ Tr(I(z) Σ_n)`, which is
//! `σ²/2 · Tr I(z)` on AWGN and `σ²/(2|h|²) · Tr I(z)` on equalized slow
//! fading.
//!
//! Two independent routes compute the trace:
//!
//! * [`fisher`] / [`fisher_traces`] take one backward pass per class and sum
//!   `q_y ‖∇_z log q_y‖²`. Exact, but the result is a plain number.
//! * [`fisher_trace_node`] records the decoder Jacobian `J = ∂logits/∂z` on
//!   the tape by pushing tangents forward through each layer, then forms
//!   `Σ_c q_c ‖J_c - Σ_c' q_c' J_c'‖²`. Every step is a first-order op, so a
//!   single backward pass over the result differentiates the trace with
//!   respect to the decoder and, through `z`, the encoder. Training uses
//!   this route.

use std::sync::atomic::{AtomicU64, Ordering};

use num_complex::Complex64;

use crate::autodiff::{Graph, Tensor, Var};
use crate::channel::{ChannelFamily, ChannelSpec, FADE_FLOOR};
use crate::error::{Error, Result};
use crate::models::DecoderModel;
use crate::rng::Stream;

/// Lower clamp applied to the second distribution before taking its log.
pub const KL_CLAMP: f64 = 1e-12;
const NORMALIZATION_TOL: f64 = 1e-9;

static KL_CLAMP_EVENTS: AtomicU64 = AtomicU64::new(0);

/// Number of probabilities clamped at [`KL_CLAMP`] so far in this process.
pub fn kl_clamp_events() -> u64 {
    KL_CLAMP_EVENTS.load(Ordering::Relaxed)
}

fn check_distribution(p: &[f64]) -> Result<()> {
    if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::invalid("distribution has negative or non-finite entries"));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::NotNormalized { sum });
    }
    Ok(())
}

/// `Σ_y p_y ln(p_y / q_y)` with `0 ln 0 = 0` and `q_y` clamped below at
/// [`KL_CLAMP`].
pub fn kl_categorical(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape("kl_categorical", format!("{} vs {}", p.len(), q.len())));
    }
    check_distribution(p)?;
    check_distribution(q)?;
    let mut kl = 0.0;
    let mut clamped = 0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi == 0.0 {
            continue;
        }
        let qc = if qi < KL_CLAMP {
            clamped += 1;
            KL_CLAMP
        } else {
            qi
        };
        kl += pi * (pi.ln() - qc.ln());
    }
    if clamped > 0 {
        KL_CLAMP_EVENTS.fetch_add(clamped, Ordering::Relaxed);
        log::debug!("kl_categorical clamped {clamped} probabilities");
    }
    Ok(kl.max(0.0))
}

/// KL between two rows given as log-probabilities (already normalized).
fn kl_log_rows(reference: &[f64], other: &[f64]) -> f64 {
    let floor = KL_CLAMP.ln();
    let mut kl = 0.0;
    for (&lp, &lq) in reference.iter().zip(other) {
        let p = lp.exp();
        if p == 0.0 {
            continue;
        }
        let lq = if lq < floor {
            KL_CLAMP_EVENTS.fetch_add(1, Ordering::Relaxed);
            floor
        } else {
            lq
        };
        kl += p * (lp - lq);
    }
    kl.max(0.0)
}

/// `KL(q(·|z) ‖ q(·|ẑ))` computed through the decoder.
pub fn posterior_kl(decoder: &DecoderModel, z: &[f64], z_hat: &[f64]) -> Result<f64> {
    if z.len() != z_hat.len() {
        return Err(Error::shape("posterior_kl", format!("{} vs {}", z.len(), z_hat.len())));
    }
    let both = Tensor::from_rows(&[z.to_vec(), z_hat.to_vec()])?;
    let lp = decoder.log_probs(&both)?;
    Ok(kl_log_rows(lp.row(0), lp.row(1)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FisherResult {
    /// Full `k × k` matrix, when requested.
    pub matrix: Option<Tensor>,
    pub trace: f64,
    /// `‖∇_z log q(y|z)‖` for every class `y`.
    pub class_grad_norms: Vec<f64>,
}

/// Exact Fisher information at a single `z`, via one backward pass per class.
pub fn fisher(decoder: &DecoderModel, z: &[f64], with_matrix: bool) -> Result<FisherResult> {
    let k = z.len();
    let (q, grads) = class_input_gradients(decoder, &Tensor::row_vector(z)?)?;
    let classes = decoder.classes();
    let mut trace = 0.0;
    let mut norms = Vec::with_capacity(classes);
    let mut matrix = with_matrix.then(|| Tensor::zeros(&[k, k]));
    for (y, g) in grads.iter().enumerate() {
        let gy = g.row(0);
        let sq: f64 = gy.iter().map(|v| v * v).sum();
        let qy = q.get(0, y);
        norms.push(sq.sqrt());
        trace += qy * sq;
        if let Some(m) = matrix.as_mut() {
            let data = m.data_mut();
            for a in 0..k {
                for b in 0..k {
                    data[a * k + b] += qy * gy[a] * gy[b];
                }
            }
        }
    }
    Ok(FisherResult {
        matrix,
        trace,
        class_grad_norms: norms,
    })
}

pub fn fisher_trace(decoder: &DecoderModel, z: &[f64]) -> Result<FisherResult> {
    fisher(decoder, z, false)
}

pub fn fisher_matrix(decoder: &DecoderModel, z: &[f64]) -> Result<Tensor> {
    Ok(fisher(decoder, z, true)?.matrix.expect("requested"))
}

/// `Tr I(z_i)` for every row of a batch, by per-class backward passes.
pub fn fisher_traces(decoder: &DecoderModel, z: &Tensor) -> Result<Vec<f64>> {
    let (q, grads) = class_input_gradients(decoder, z)?;
    let n = z.rows();
    let mut traces = vec![0.0; n];
    for (y, g) in grads.iter().enumerate() {
        for (i, t) in traces.iter_mut().enumerate() {
            let sq: f64 = g.row(i).iter().map(|v| v * v).sum();
            *t += q.get(i, y) * sq;
        }
    }
    Ok(traces)
}

/// Posterior rows and, for each class `y`, the `[n, k]` matrix of
/// `∇_z log q(y | z_i)`. Rows do not interact, so backpropagating
/// `Σ_i log q(y | z_i)` yields every per-row gradient at once.
fn class_input_gradients(decoder: &DecoderModel, z: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
    if !z.is_finite() {
        return Err(Error::invalid("representation has non-finite entries"));
    }
    let mut graph = Graph::new();
    let params = decoder.params().bind_frozen(&mut graph);
    let z_var = graph.leaf(z.clone());
    let (_, log_probs) = decoder.forward_graph(&mut graph, &params, z_var)?;
    let q = graph.value(log_probs).map(f64::exp);
    let n = z.rows();
    let mut grads = Vec::with_capacity(decoder.classes());
    for y in 0..decoder.classes() {
        let picked = graph.pick_per_row(log_probs, &vec![y; n])?;
        let root = graph.sum(picked)?;
        grads.push(graph.backward(root, &[z_var])?.remove(0));
    }
    Ok((q, grads))
}

/// Unbiased estimate of `Tr I(z)` from classes sampled from `q(·|z)`,
/// for class counts too large for the exact sum.
pub fn fisher_trace_sampled(decoder: &DecoderModel, z: &[f64], draws: usize, rng: &mut Stream) -> Result<f64> {
    if draws == 0 {
        return Err(Error::invalid("need at least one sampled class"));
    }
    let mut graph = Graph::new();
    let params = decoder.params().bind_frozen(&mut graph);
    let z_var = graph.leaf(Tensor::row_vector(z)?);
    let (_, log_probs) = decoder.forward_graph(&mut graph, &params, z_var)?;
    let q: Vec<f64> = graph.value(log_probs).data().iter().map(|v| v.exp()).collect();
    let mut total = 0.0;
    for _ in 0..draws {
        let u = rng.uniform();
        let mut acc = 0.0;
        let mut y = q.len() - 1;
        for (c, &qc) in q.iter().enumerate() {
            acc += qc;
            if u < acc {
                y = c;
                break;
            }
        }
        let picked = graph.pick_per_row(log_probs, &[y])?;
        let root = graph.sum(picked)?;
        let g = graph.backward(root, &[z_var])?.remove(0);
        total += g.data().iter().map(|v| v * v).sum::<f64>();
    }
    Ok(total / draws as f64)
}

/// Records `Tr I(z_i)` for each row of `z` as an `[n, 1]` node that can be
/// differentiated with respect to the decoder parameters and `z`.
pub fn fisher_trace_node(graph: &mut Graph, decoder: &DecoderModel, params: &[Var], z: Var) -> Result<Var> {
    let (n, k) = graph.value(z).expect_matrix("fisher_trace_node")?;
    let net = decoder.network();
    let (trace, log_probs) = decoder.forward_graph(graph, params, z)?;

    // Tangent rows (i, j) carry ∂(layer activations of sample i)/∂z_{i,j}.
    let mut seed = Tensor::zeros(&[n * k, k]);
    for r in 0..n * k {
        seed.data_mut()[r * k + r % k] = 1.0;
    }
    let mut tangent = graph.constant(seed);
    for (l, (&pre, &post)) in trace.hidden_pre.iter().zip(&trace.hidden_post).enumerate() {
        let pushed = graph.matmul(tangent, params[2 * l])?;
        let slope = graph.activation_derivative(pre, post, net.activation())?;
        let slope = graph.repeat_rows(slope, k)?;
        tangent = graph.mul(pushed, slope)?;
    }
    let jac = graph.matmul(tangent, params[2 * trace.hidden_pre.len()])?;

    let classes = decoder.classes();
    let q = graph.exp(log_probs)?;
    let q = graph.repeat_rows(q, k)?;
    let weighted = graph.mul(q, jac)?;
    let centre = graph.sum_rows(weighted)?;
    let centre = graph.broadcast_cols(centre, classes)?;
    let dev = graph.sub(jac, centre)?;
    let dev_sq = graph.mul(dev, dev)?;
    let terms = graph.mul(q, dev_sq)?;
    let per_coord = graph.sum_rows(terms)?;
    graph.group_sum_rows(per_coord, k)
}

/// `½ (ẑ - z)ᵀ I(z) (ẑ - z)`.
pub fn kl_quadratic(decoder: &DecoderModel, z: &[f64], z_hat: &[f64]) -> Result<f64> {
    if z.len() != z_hat.len() {
        return Err(Error::shape("kl_quadratic", format!("{} vs {}", z.len(), z_hat.len())));
    }
    let m = fisher_matrix(decoder, z)?;
    let k = z.len();
    let d: Vec<f64> = z_hat.iter().zip(z).map(|(a, b)| a - b).collect();
    let mut acc = 0.0;
    for a in 0..k {
        for b in 0..k {
            acc += d[a] * m.get(a, b) * d[b];
        }
    }
    Ok(0.5 * acc)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
}

impl McEstimate {
    fn from_values(values: &[f64]) -> Self {
        let s = values.len();
        let mean = values.iter().sum::<f64>() / s as f64;
        let std_error = if s > 1 {
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (s - 1) as f64;
            (var / s as f64).sqrt()
        } else {
            0.0
        };
        McEstimate {
            mean,
            std_error,
            samples: s,
        }
    }
}

/// Monte-Carlo `E_ẑ[KL(q(·|z) ‖ q(·|ẑ))]` over `samples` channel uses.
/// Under Rayleigh fading every use draws its own `h`.
pub fn expected_kl_mc(
    decoder: &DecoderModel,
    z: &[f64],
    spec: &ChannelSpec,
    samples: usize,
    rng: &mut Stream,
) -> Result<McEstimate> {
    if samples == 0 {
        return Err(Error::invalid("need at least one Monte-Carlo sample"));
    }
    let k = z.len();
    let mut rows = Vec::with_capacity((samples + 1) * k);
    rows.extend_from_slice(z);
    let z_row = Tensor::row_vector(z)?;
    for _ in 0..samples {
        let draw = spec.transmit(&z_row, rng)?;
        rows.extend_from_slice(draw.received.data());
    }
    let batch = Tensor::matrix(samples + 1, k, rows)?;
    let lp = decoder.log_probs(&batch)?;
    let values: Vec<f64> = (1..=samples).map(|s| kl_log_rows(lp.row(0), lp.row(s))).collect();
    Ok(McEstimate::from_values(&values))
}

/// Multiplier `c` in `R = c · Tr I(z)`: `σ²/2` on AWGN, `σ²/(2|h|²)` under
/// equalized fading.
pub fn noise_weight(spec: &ChannelSpec, fading: Option<Complex64>) -> Result<f64> {
    if !(spec.sigma2 >= 0.0) {
        return Err(Error::invalid(format!("noise variance must be >= 0, got {}", spec.sigma2)));
    }
    match spec.family {
        ChannelFamily::Awgn => Ok(spec.sigma2 / 2.0),
        ChannelFamily::Rayleigh => {
            let h = fading.ok_or(Error::MissingFading)?;
            let gain_sq = h.norm_sqr().max(FADE_FLOOR * FADE_FLOOR);
            Ok(spec.sigma2 / gain_sq / 2.0)
        }
    }
}

/// `R(z) = c · Tr I(z)` with `c` from [`noise_weight`].
pub fn regularizer(decoder: &DecoderModel, z: &[f64], spec: &ChannelSpec, fading: Option<Complex64>) -> Result<f64> {
    let c = noise_weight(spec, fading)?;
    if c == 0.0 {
        return Ok(0.0);
    }
    Ok(c * fisher_trace(decoder, z)?.trace)
}

/// `½ Tr(I(z) Σ_n)` for an arbitrary noise covariance.
pub fn regularizer_with_covariance(decoder: &DecoderModel, z: &[f64], cov: &Tensor) -> Result<f64> {
    let k = z.len();
    if cov.shape() != [k, k] {
        return Err(Error::shape("regularizer_with_covariance", format!("{:?} for k = {k}", cov.shape())));
    }
    let m = fisher_matrix(decoder, z)?;
    let mut tr = 0.0;
    for a in 0..k {
        for b in 0..k {
            tr += m.get(a, b) * cov.get(b, a);
        }
    }
    Ok(0.5 * tr)
}
