//! Sampling statistics of the channels and the Monte-Carlo estimators.

use fisherjscc::autodiff::{Activation, Tensor};
use fisherjscc::channel::{draw_fading, transmit_awgn, transmit_rayleigh, ChannelFamily, ChannelSpec};
use fisherjscc::data::{make_blobs, Split};
use fisherjscc::experiments::{error_sweep, taylor_validation, SweepRequest};
use fisherjscc::models::{DecoderModel, EncoderModel};
use fisherjscc::robustness::{expected_kl_mc, regularizer};
use fisherjscc::rng::Stream;

#[test]
fn awgn_sample_variance() {
    let z = Tensor::zeros(&[1000, 100]);
    let d = transmit_awgn(&z, 0.1, &mut Stream::new(77)).unwrap();
    let n = d.received.len() as f64;
    let mean = d.received.sum() / n;
    let var = d.received.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    assert!((0.095..=0.105).contains(&var), "{var}");
    assert!(mean.abs() < 0.005);
}

#[test]
fn rayleigh_gain_has_unit_mean() {
    let mut rng = Stream::new(78);
    let n = 100_000;
    let mean = (0..n).map(|_| draw_fading(&mut rng).norm_sqr()).sum::<f64>() / n as f64;
    assert!((0.98..=1.02).contains(&mean), "{mean}");
}

#[test]
fn rayleigh_uses_one_coefficient_per_call() {
    let z = Tensor::zeros(&[3, 4]);
    let d = transmit_rayleigh(&z, 0.3, &mut Stream::new(4)).unwrap();
    let g = d.effective_gain();
    for (r, n) in d.received.data().iter().zip(d.noise.data()) {
        assert!((r - n / g).abs() < 1e-15);
    }
}

fn small_pair(seed: u64) -> (EncoderModel, DecoderModel) {
    let mut rng = Stream::new(seed);
    let enc = EncoderModel::new(3, &[8], 2, Activation::Tanh, 1.0, &mut rng).unwrap();
    let dec = DecoderModel::new(2, &[8], 3, Activation::Tanh, &mut rng).unwrap();
    (enc, dec)
}

/// For small noise the Monte-Carlo KL approaches `σ²/2 · Tr I(z)`.
#[test]
fn expected_kl_approaches_regularizer() {
    let (_, dec) = small_pair(3);
    let z = [0.3, -0.2];
    let spec = ChannelSpec::from_sigma2(ChannelFamily::Awgn, 1.0, 1e-4).unwrap();
    let mc = expected_kl_mc(&dec, &z, &spec, 20_000, &mut Stream::new(5)).unwrap();
    let r = regularizer(&dec, &z, &spec, None).unwrap();
    assert!((mc.mean - r).abs() <= 4.0 * mc.std_error + 1e-3 * r, "{} vs {r}", mc.mean);
}

#[test]
fn few_and_many_samples_agree() {
    let (enc, dec) = small_pair(8);
    let data = make_blobs(3, 20, 3, 0.5, 1, Split::Test).unwrap();
    let s2 = [0.02, 0.2];
    let few = taylor_validation(&enc, &dec, &data, &s2, 20, 9).unwrap();
    let many = taylor_validation(&enc, &dec, &data, &s2, 10_000, 10).unwrap();
    for (a, b) in few.rows.iter().zip(&many.rows) {
        let se = (a.std_error.powi(2) + b.std_error.powi(2)).sqrt();
        assert!((a.mean_expected_kl - b.mean_expected_kl).abs() <= 5.0 * se, "{a:?} {b:?}");
    }
}

#[test]
fn uniform_decoder_is_at_chance() {
    let (enc, mut dec) = small_pair(2);
    dec.network_mut().zero_output_layer();
    let data = make_blobs(3, 200, 3, 1.0, 3, Split::Test).unwrap();
    let req = SweepRequest {
        regime: "none",
        psnr_grid: &[10.0],
        family: ChannelFamily::Awgn,
        trials: 20,
        seed: 1,
    };
    let s = error_sweep(&enc, &dec, &data, &req).unwrap();
    // Every row ties, so argmax picks class 0 and only class 0 is right.
    let err = s.rows[0].error_rate;
    assert!((err - 2.0 / 3.0).abs() <= 0.02, "{err}");
}
