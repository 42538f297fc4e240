//! Trained-probe checks on the synthetic datasets.

use fisherjscc::autodiff::{Activation, Graph};
use fisherjscc::data::{blob_centers, make_blobs, make_rings, Dataset, Split, Standardizer};
use fisherjscc::models::DecoderModel;
use fisherjscc::rng::Stream;
use fisherjscc::train::AdamState;

/// Full-batch cross-entropy fit of a softmax classifier on raw features.
fn fit(data: &Dataset, hidden: &[usize], steps: usize, lr: f64) -> DecoderModel {
    let mut model = DecoderModel::new(data.dim(), hidden, data.classes, Activation::Relu, &mut Stream::new(1)).unwrap();
    let mut state = AdamState::new(model.params());
    for _ in 0..steps {
        let mut g = Graph::new();
        let p = model.params().bind(&mut g);
        let x = g.constant(data.features.clone());
        let (_, lp) = model.forward_graph(&mut g, &p, x).unwrap();
        let picked = g.pick_per_row(lp, &data.labels).unwrap();
        let loss = g.mean(picked).unwrap();
        let loss = g.scale(loss, -1.0).unwrap();
        let grads = g.backward(loss, &p).unwrap();
        state.step(model.params_mut(), &grads, lr).unwrap();
    }
    model
}

fn accuracy(model: &DecoderModel, data: &Dataset) -> f64 {
    let pred = model.predict(&data.features).unwrap();
    pred.iter().zip(&data.labels).filter(|(p, y)| p == y).count() as f64 / data.len() as f64
}

#[test]
fn well_separated_blobs_are_linearly_separable() {
    let seed = (0..100)
        .find(|&s| {
            let c = blob_centers(2, 3, s);
            c[0].iter().zip(&c[1]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() >= 3.0
        })
        .unwrap();
    let data = make_blobs(2, 100, 3, 0.1, seed, Split::Train).unwrap();
    let probe = fit(&data, &[], 300, 0.05);
    assert!(accuracy(&probe, &data) >= 0.99);
}

#[test]
fn rings_need_a_hidden_layer() {
    let data = make_rings(3, 100, 0.05, 4, Split::Train).unwrap();
    let data = Standardizer::fit(&data).apply(&data).unwrap();
    let linear = fit(&data, &[], 300, 0.05);
    let mlp = fit(&data, &[32], 1500, 0.01);
    let (lin, deep) = (accuracy(&linear, &data), accuracy(&mlp, &data));
    assert!(lin <= 0.70, "linear probe {lin}");
    assert!(deep >= 0.95, "mlp {deep}");
}
