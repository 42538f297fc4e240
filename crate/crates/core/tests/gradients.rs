//! Central finite differences against the tape's reverse-mode gradients.

use fisherjscc::autodiff::{Activation, Graph, Tensor};
use fisherjscc::channel::ChannelFamily;
use fisherjscc::models::{DecoderModel, EncoderModel};
use fisherjscc::robustness::{fisher_trace_node, fisher_traces};
use fisherjscc::rng::Stream;
use fisherjscc::train::{regularized_loss, NoiseDraws, RegularizerWeight};

const STEP: f64 = 1e-6;
const REL_TOL: f64 = 1e-4;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

struct Case {
    encoder: EncoderModel,
    decoder: DecoderModel,
    x: Tensor,
    y: Vec<usize>,
    noise: NoiseDraws,
}

fn tiny_case(act: Activation, seed: u64, sigma2: f64) -> Case {
    let mut rng = Stream::new(seed);
    let encoder = EncoderModel::new(3, &[8], 2, act, 1.0, &mut rng).unwrap();
    let decoder = DecoderModel::new(2, &[8], 3, act, &mut rng).unwrap();
    let x = Tensor::from_rows(&[
        vec![0.3, -1.2, 0.5],
        vec![-0.7, 0.4, 1.1],
        vec![1.5, 0.2, -0.3],
        vec![0.0, -0.6, -0.9],
    ])
    .unwrap();
    let y = vec![0, 2, 1, 2];
    let noise = NoiseDraws::sample(ChannelFamily::Awgn, sigma2, 4, 2, 2, &mut rng).unwrap();
    Case {
        encoder,
        decoder,
        x,
        y,
        noise,
    }
}

fn loss_value(c: &Case, w: RegularizerWeight) -> f64 {
    regularized_loss(&c.x, &c.y, &c.encoder, &c.decoder, &c.noise, w)
        .unwrap()
        .summary
        .total
}

/// Worst relative error over every parameter of both networks.
fn worst_loss_gradient_error(c: &mut Case, w: RegularizerWeight) -> f64 {
    let (g_enc, g_dec) = regularized_loss(&c.x, &c.y, &c.encoder, &c.decoder, &c.noise, w)
        .unwrap()
        .gradients()
        .unwrap();
    let mut worst = 0.0f64;
    for side in 0..2 {
        let grads = if side == 0 { &g_enc } else { &g_dec };
        for (t, g) in grads.iter().enumerate() {
            for j in 0..g.len() {
                let bump = |c: &mut Case, d: f64| {
                    let p = if side == 0 { c.encoder.params_mut() } else { c.decoder.params_mut() };
                    let tensor = p.values_mut().nth(t).unwrap();
                    tensor.data_mut()[j] += d;
                };
                bump(c, STEP);
                let up = loss_value(c, w);
                bump(c, -2.0 * STEP);
                let down = loss_value(c, w);
                bump(c, STEP);
                let fd = (up - down) / (2.0 * STEP);
                worst = worst.max(rel_err(g.data()[j], fd));
            }
        }
    }
    worst
}

#[test]
fn regularized_loss_gradients_tanh() {
    let mut c = tiny_case(Activation::Tanh, 11, 0.2);
    let w = RegularizerWeight::new(1.0);
    let worst = worst_loss_gradient_error(&mut c, w);
    assert!(worst <= REL_TOL, "worst relative error {worst:e}");
}

#[test]
fn regularized_loss_gradients_relu() {
    let mut c = tiny_case(Activation::Relu, 12, 0.2);
    let worst = worst_loss_gradient_error(&mut c, RegularizerWeight::new(1.0));
    assert!(worst <= REL_TOL, "worst relative error {worst:e}");
}

#[test]
fn omitted_variance_gradients() {
    let mut c = tiny_case(Activation::Tanh, 13, 0.05);
    let w = RegularizerWeight {
        lambda: 0.7,
        omit_variance: true,
    };
    let worst = worst_loss_gradient_error(&mut c, w);
    assert!(worst <= REL_TOL, "worst relative error {worst:e}");
}

#[test]
fn fisher_trace_gradient_wrt_representation() {
    let mut rng = Stream::new(21);
    let dec = DecoderModel::new(3, &[7, 5], 4, Activation::Tanh, &mut rng).unwrap();
    let z = Tensor::from_rows(&[vec![0.2, -0.4, 0.6], vec![-0.9, 0.3, 0.1]]).unwrap();
    let mut g = Graph::new();
    let params = dec.params().bind_frozen(&mut g);
    let zv = g.leaf(z.clone());
    let traces = fisher_trace_node(&mut g, &dec, &params, zv).unwrap();
    let root = g.sum(traces).unwrap();
    let grad = g.backward(root, &[zv]).unwrap().remove(0);
    let total = |z: &Tensor| fisher_traces(&dec, z).unwrap().iter().sum::<f64>();
    for j in 0..z.len() {
        let mut up = z.clone();
        up.data_mut()[j] += STEP;
        let mut down = z.clone();
        down.data_mut()[j] -= STEP;
        let fd = (total(&up) - total(&down)) / (2.0 * STEP);
        assert!(rel_err(grad.data()[j], fd) <= REL_TOL, "z[{j}]: {} vs {fd}", grad.data()[j]);
    }
}

#[test]
fn log_posterior_gradient_wrt_input() {
    let mut rng = Stream::new(5);
    let dec = DecoderModel::new(4, &[6], 3, Activation::Tanh, &mut rng).unwrap();
    let z = [0.1, -0.5, 0.8, 0.3];
    for y in 0..3 {
        let lp = dec.log_posterior(&z, y).unwrap();
        let grad = lp.grad_z().unwrap();
        for j in 0..4 {
            let mut up = z;
            up[j] += STEP;
            let mut down = z;
            down[j] -= STEP;
            let fd = (dec.log_posterior(&up, y).unwrap().value() - dec.log_posterior(&down, y).unwrap().value())
                / (2.0 * STEP);
            assert!(rel_err(grad[j], fd) <= REL_TOL);
        }
    }
}
