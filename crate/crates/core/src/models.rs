//! Power-constrained encoder and categorical decoder.
//!
//! Both are plain multilayer perceptrons. The encoder output passes through
//! `a·tanh(·)` where `a` is the largest float with `a² ≤ P`, so every encoded
//! symbol satisfies the peak-power constraint `max_i z_i² ≤ P` without any
//! clipping step. Every encoded batch is audited against the constraint and
//! the outcome is tallied in a process-wide ledger ([`power_audit`]).

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::autodiff::{log_softmax_rows, Activation, Graph, NamedTensor, ParamSet, Tensor, Var};
use crate::data::Standardizer;
use crate::error::{Error, Result};
use crate::rng::Stream;

pub const CHECKPOINT_FORMAT: &str = "fisherjscc-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

static POWER_CHECKED: AtomicU64 = AtomicU64::new(0);
static POWER_VIOLATIONS: AtomicU64 = AtomicU64::new(0);

/// Running tally of encoded symbols checked against the power budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PowerAudit {
    pub symbols_checked: u64,
    pub violations: u64,
}

pub fn power_audit() -> PowerAudit {
    PowerAudit {
        symbols_checked: POWER_CHECKED.load(Ordering::Relaxed),
        violations: POWER_VIOLATIONS.load(Ordering::Relaxed),
    }
}

fn audit_power(z: &Tensor, power: f64) -> Result<()> {
    let mut bad = 0u64;
    let mut max_sq = 0.0f64;
    for &v in z.data() {
        let sq = v * v;
        max_sq = max_sq.max(sq);
        if sq > power || !sq.is_finite() {
            bad += 1;
        }
    }
    POWER_CHECKED.fetch_add(z.len() as u64, Ordering::Relaxed);
    if bad > 0 {
        POWER_VIOLATIONS.fetch_add(bad, Ordering::Relaxed);
        return Err(Error::PowerViolation { max_sq, power });
    }
    Ok(())
}

/// Largest `a` with `a * a <= power` in floating point.
pub fn peak_amplitude(power: f64) -> f64 {
    let mut a = power.sqrt();
    while a * a > power {
        a = f64::from_bits(a.to_bits() - 1);
    }
    a
}

/// Fully connected stack with a shared hidden activation and a linear
/// output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    activation: Activation,
    params: ParamSet,
}

/// Graph nodes recorded by [`Mlp::forward_graph`].
#[derive(Debug, Clone)]
pub struct MlpTrace {
    /// Pre-activations of every hidden layer.
    pub hidden_pre: Vec<Var>,
    /// Activations of every hidden layer.
    pub hidden_post: Vec<Var>,
    /// Output of the final affine layer.
    pub output: Var,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new(sizes: &[usize], activation: Activation, rng: &mut Stream) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::invalid(format!("invalid layer sizes {sizes:?}")));
        }
        let mut params = ParamSet::new();
        for (l, pair) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.uniform_range(-limit, limit))
                .collect();
            params.insert(format!("layer{l}.weight"), Tensor::matrix(fan_in, fan_out, w)?)?;
            params.insert(format!("layer{l}.bias"), Tensor::zeros(&[fan_out]))?;
        }
        Ok(Mlp {
            sizes: sizes.to_vec(),
            activation,
            params,
        })
    }

    fn from_parts(sizes: Vec<usize>, activation: Activation, params: ParamSet) -> Result<Self> {
        if params.len() != 2 * (sizes.len() - 1) {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                2 * (sizes.len() - 1),
                params.len()
            )));
        }
        let mut ordered = ParamSet::new();
        for (l, pair) in sizes.windows(2).enumerate() {
            let (wn, bn) = (format!("layer{l}.weight"), format!("layer{l}.bias"));
            match (params.get(&wn), params.get(&bn)) {
                (Some(w), Some(b)) if w.shape() == [pair[0], pair[1]] && b.shape() == [pair[1]] => {
                    ordered.insert(wn, w.clone())?;
                    ordered.insert(bn, b.clone())?;
                }
                _ => {
                    return Err(Error::Checkpoint(format!(
                        "layer {l} parameters missing or misshapen"
                    )))
                }
            }
        }
        Ok(Mlp {
            sizes,
            activation,
            params: ordered,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("nonempty")
    }

    pub fn layer_count(&self) -> usize {
        self.sizes.len() - 1
    }

    fn weight(&self, l: usize) -> &Tensor {
        self.params.at(2 * l)
    }

    fn bias(&self, l: usize) -> &Tensor {
        self.params.at(2 * l + 1)
    }

    /// Zeroes the final layer, making the output identically zero.
    pub fn zero_output_layer(&mut self) {
        let l = self.layer_count() - 1;
        for t in self.params.values_mut().skip(2 * l) {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, d) = x.expect_matrix("mlp")?;
        if d != self.input_dim() {
            return Err(Error::shape(
                "mlp",
                format!("input has {d} columns, model expects {}", self.input_dim()),
            ));
        }
        Ok(())
    }

    /// Direct evaluation without recording a graph.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        let last = self.layer_count() - 1;
        for l in 0..=last {
            h = h.matmul(self.weight(l))?.add_row(self.bias(l))?;
            if l < last {
                h = match self.activation {
                    Activation::Relu => h.map(|v| if v > 0.0 { v } else { 0.0 }),
                    Activation::Tanh => h.map(f64::tanh),
                };
            }
        }
        Ok(h)
    }

    /// Records the forward pass on `graph`; `params` are this network's
    /// parameters bound on the same graph (see [`ParamSet::bind`]).
    pub fn forward_graph(&self, graph: &mut Graph, params: &[Var], x: Var) -> Result<MlpTrace> {
        self.check_input(graph.value(x))?;
        let last = self.layer_count() - 1;
        let mut hidden_pre = Vec::with_capacity(last);
        let mut hidden_post = Vec::with_capacity(last);
        let mut h = x;
        for l in 0..last {
            let pre = graph.affine(h, params[2 * l], params[2 * l + 1])?;
            let post = graph.activation(pre, self.activation)?;
            hidden_pre.push(pre);
            hidden_post.push(post);
            h = post;
        }
        let output = graph.affine(h, params[2 * last], params[2 * last + 1])?;
        Ok(MlpTrace {
            hidden_pre,
            hidden_post,
            output,
        })
    }
}

/// Deterministic encoder `z = f(x)` with peak power `P`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    net: Mlp,
    power: f64,
}

impl EncoderModel {
    pub fn new(
        input_dim: usize,
        hidden: &[usize],
        latent_dim: usize,
        activation: Activation,
        power: f64,
        rng: &mut Stream,
    ) -> Result<Self> {
        if !(power > 0.0 && power.is_finite()) {
            return Err(Error::invalid(format!("power budget must be positive, got {power}")));
        }
        let sizes = layer_sizes(input_dim, hidden, latent_dim);
        Ok(EncoderModel {
            net: Mlp::new(&sizes, activation, rng)?,
            power,
        })
    }

    pub fn network(&self) -> &Mlp {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn params(&self) -> &ParamSet {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        self.net.params_mut()
    }

    pub fn power(&self) -> f64 {
        self.power
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.net.output_dim()
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let amp = peak_amplitude(self.power);
        let z = self.net.forward(x)?.map(|v| amp * v.tanh());
        audit_power(&z, self.power)?;
        Ok(z)
    }

    /// Records `encode` on a graph, returning the `[b, k]` representation.
    pub fn forward_graph(&self, graph: &mut Graph, params: &[Var], x: Var) -> Result<Var> {
        let trace = self.net.forward_graph(graph, params, x)?;
        let bounded = graph.tanh(trace.output)?;
        let z = graph.scale(bounded, peak_amplitude(self.power))?;
        audit_power(graph.value(z), self.power)?;
        Ok(z)
    }
}

/// Categorical decoder `q(y | ẑ)` as a softmax over MLP logits.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderModel {
    net: Mlp,
}

impl DecoderModel {
    pub fn new(
        latent_dim: usize,
        hidden: &[usize],
        classes: usize,
        activation: Activation,
        rng: &mut Stream,
    ) -> Result<Self> {
        if classes < 2 {
            return Err(Error::invalid(format!("need at least 2 classes, got {classes}")));
        }
        let sizes = layer_sizes(latent_dim, hidden, classes);
        Ok(DecoderModel {
            net: Mlp::new(&sizes, activation, rng)?,
        })
    }

    pub fn network(&self) -> &Mlp {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn params(&self) -> &ParamSet {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        self.net.params_mut()
    }

    pub fn latent_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn classes(&self) -> usize {
        self.net.output_dim()
    }

    pub fn logits(&self, z: &Tensor) -> Result<Tensor> {
        self.net.forward(z)
    }

    pub fn log_probs(&self, z: &Tensor) -> Result<Tensor> {
        log_softmax_rows(&self.logits(z)?)
    }

    /// Posterior rows `q(· | ẑ_i)`.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        Ok(self.log_probs(z)?.map(f64::exp))
    }

    /// Most probable class per row, ties to the lowest index.
    pub fn predict(&self, z: &Tensor) -> Result<Vec<usize>> {
        let lp = self.log_probs(z)?;
        Ok((0..lp.rows()).map(|i| crate::autodiff::argmax(lp.row(i))).collect())
    }

    /// Records logits and log-posteriors for `z` on a graph.
    pub fn forward_graph(&self, graph: &mut Graph, params: &[Var], z: Var) -> Result<(MlpTrace, Var)> {
        let trace = self.net.forward_graph(graph, params, z)?;
        let log_probs = graph.log_softmax(trace.output)?;
        Ok((trace, log_probs))
    }

    /// `log q(y | ẑ)` for a single representation, recorded on a fresh graph
    /// with `ẑ` and all decoder parameters as differentiable leaves.
    pub fn log_posterior(&self, z: &[f64], y: usize) -> Result<LogPosterior> {
        if y >= self.classes() {
            return Err(Error::ClassOutOfRange {
                class: y,
                classes: self.classes(),
            });
        }
        let mut graph = Graph::new();
        let params = self.params().bind(&mut graph);
        let z_var = graph.leaf(Tensor::row_vector(z)?);
        let (_, log_probs) = self.forward_graph(&mut graph, &params, z_var)?;
        let picked = graph.pick_per_row(log_probs, &[y])?;
        let value = graph.sum(picked)?;
        Ok(LogPosterior {
            graph,
            value,
            z: z_var,
            params,
        })
    }
}

/// A recorded scalar `log q(y | ẑ)` with handles for differentiation.
#[derive(Debug, Clone)]
pub struct LogPosterior {
    pub graph: Graph,
    pub value: Var,
    pub z: Var,
    pub params: Vec<Var>,
}

impl LogPosterior {
    pub fn value(&self) -> f64 {
        self.graph.value(self.value).item()
    }

    /// `∇_ẑ log q(y | ẑ)` as a plain vector.
    pub fn grad_z(&self) -> Result<Vec<f64>> {
        Ok(self.graph.backward(self.value, &[self.z])?.remove(0).into_data())
    }

    pub fn grad_params(&self) -> Result<Vec<Tensor>> {
        self.graph.backward(self.value, &self.params)
    }
}

fn layer_sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut sizes = Vec::with_capacity(hidden.len() + 2);
    sizes.push(input);
    sizes.extend_from_slice(hidden);
    sizes.push(output);
    sizes
}

/// Declared shape of an encoder/decoder pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input_dim: usize,
    pub latent_dim: usize,
    pub classes: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub activation: Activation,
    pub power: f64,
}

impl Architecture {
    pub fn of(encoder: &EncoderModel, decoder: &DecoderModel) -> Self {
        let enc = encoder.network().sizes();
        let dec = decoder.network().sizes();
        Architecture {
            input_dim: encoder.input_dim(),
            latent_dim: encoder.latent_dim(),
            classes: decoder.classes(),
            encoder_hidden: enc[1..enc.len() - 1].to_vec(),
            decoder_hidden: dec[1..dec.len() - 1].to_vec(),
            activation: encoder.network().activation(),
            power: encoder.power(),
        }
    }

    pub fn build(&self, seed: u64) -> Result<(EncoderModel, DecoderModel)> {
        let mut enc_rng = Stream::derived(seed, &["init".into(), "encoder".into()]);
        let mut dec_rng = Stream::derived(seed, &["init".into(), "decoder".into()]);
        let encoder = EncoderModel::new(
            self.input_dim,
            &self.encoder_hidden,
            self.latent_dim,
            self.activation,
            self.power,
            &mut enc_rng,
        )?;
        let decoder = DecoderModel::new(
            self.latent_dim,
            &self.decoder_hidden,
            self.classes,
            self.activation,
            &mut dec_rng,
        )?;
        Ok((encoder, decoder))
    }

    /// Field-by-field differences, empty when identical.
    pub fn diff(&self, other: &Architecture) -> Vec<String> {
        let mut out = Vec::new();
        macro_rules! cmp {
            ($field:ident) => {
                if self.$field != other.$field {
                    out.push(format!(
                        "{}: {:?} != {:?}",
                        stringify!($field),
                        self.$field,
                        other.$field
                    ));
                }
            };
        }
        cmp!(input_dim);
        cmp!(latent_dim);
        cmp!(classes);
        cmp!(encoder_hidden);
        cmp!(decoder_hidden);
        cmp!(activation);
        cmp!(power);
        out
    }
}

/// On-disk model document: architecture, seed, feature scaling and every
/// parameter as decimal `f64` text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub architecture: Architecture,
    pub standardizer: Option<Standardizer>,
    pub encoder: Vec<NamedTensor>,
    pub decoder: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(
        encoder: &EncoderModel,
        decoder: &DecoderModel,
        seed: u64,
        standardizer: Option<Standardizer>,
    ) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            seed,
            architecture: Architecture::of(encoder, decoder),
            standardizer,
            encoder: encoder.params().clone().into_entries(),
            decoder: decoder.params().clone().into_entries(),
        }
    }

    pub fn models(&self) -> Result<(EncoderModel, DecoderModel)> {
        let a = &self.architecture;
        if !(a.power > 0.0) {
            return Err(Error::Checkpoint(format!("invalid power {}", a.power)));
        }
        let enc = Mlp::from_parts(
            layer_sizes(a.input_dim, &a.encoder_hidden, a.latent_dim),
            a.activation,
            ParamSet::from_entries(self.encoder.clone())?,
        )?;
        let dec = Mlp::from_parts(
            layer_sizes(a.latent_dim, &a.decoder_hidden, a.classes),
            a.activation,
            ParamSet::from_entries(self.decoder.clone())?,
        )?;
        Ok((
            EncoderModel {
                net: enc,
                power: a.power,
            },
            DecoderModel { net: dec },
        ))
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
