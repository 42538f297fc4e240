use fisherjscc::autodiff::{log_softmax_rows, Activation, Graph, Tensor};
use fisherjscc::models::{peak_amplitude, Architecture, Checkpoint, DecoderModel, EncoderModel};
use fisherjscc::robustness::{fisher_trace_node, fisher_traces, kl_categorical};
use fisherjscc::rng::Stream;
use proptest::prelude::*;

fn distribution(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, len).prop_filter_map("all zero", |w| {
        let s: f64 = w.iter().sum();
        (s > 1e-6).then(|| w.iter().map(|v| v / s).collect())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kl_is_nonnegative(p in distribution(5), q in distribution(5)) {
        let kl = kl_categorical(&p, &q).unwrap();
        prop_assert!(kl >= 0.0);
        prop_assert_eq!(kl_categorical(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn encoder_never_exceeds_power(
        seed in any::<u64>(),
        power in 0.01f64..10.0,
        xs in prop::collection::vec(-1e6f64..1e6, 12),
    ) {
        let enc = EncoderModel::new(3, &[5], 2, Activation::Relu, power, &mut Stream::new(seed)).unwrap();
        let z = enc.encode(&Tensor::matrix(4, 3, xs).unwrap()).unwrap();
        prop_assert!(z.data().iter().all(|v| v * v <= power));
    }

    #[test]
    fn peak_amplitude_is_tight(power in 1e-6f64..1e6) {
        let a = peak_amplitude(power);
        prop_assert!(a * a <= power);
        let next = f64::from_bits(a.to_bits() + 1);
        prop_assert!(next * next > power);
    }

    #[test]
    fn log_softmax_rows_normalize(xs in prop::collection::vec(-50.0f64..50.0, 12)) {
        let lp = log_softmax_rows(&Tensor::matrix(3, 4, xs).unwrap()).unwrap();
        for r in 0..3 {
            let s: f64 = lp.row(r).iter().map(|v| v.exp()).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn both_trace_routes_agree(seed in any::<u64>(), zs in prop::collection::vec(-1.0f64..1.0, 6)) {
        let dec = DecoderModel::new(3, &[5], 3, Activation::Tanh, &mut Stream::new(seed)).unwrap();
        let z = Tensor::matrix(2, 3, zs).unwrap();
        let exact = fisher_traces(&dec, &z).unwrap();
        let mut g = Graph::new();
        let p = dec.params().bind_frozen(&mut g);
        let zv = g.constant(z);
        let node = fisher_trace_node(&mut g, &dec, &p, zv).unwrap();
        for (a, b) in g.value(node).data().iter().zip(&exact) {
            prop_assert!(*a >= 0.0);
            prop_assert!((a - b).abs() <= 1e-12 * b.max(1.0));
        }
    }

    #[test]
    fn shuffle_is_a_permutation(seed in any::<u64>(), n in 1usize..200) {
        let mut v: Vec<usize> = (0..n).collect();
        Stream::new(seed).shuffle(&mut v);
        v.sort_unstable();
        prop_assert_eq!(v, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn checkpoint_round_trip_is_exact(seed in any::<u64>()) {
        let arch = Architecture {
            input_dim: 3,
            latent_dim: 2,
            classes: 4,
            encoder_hidden: vec![5],
            decoder_hidden: vec![6, 3],
            activation: Activation::Tanh,
            power: 0.7,
        };
        let (e, d) = arch.build(seed).unwrap();
        let ck = Checkpoint::new(&e, &d, seed, None);
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        prop_assert_eq!(back.models().unwrap(), (e, d));
    }
}
