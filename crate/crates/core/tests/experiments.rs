use fisherjscc::autodiff::{Activation, Tensor};
use fisherjscc::channel::{psnr_to_sigma2, ChannelFamily};
use fisherjscc::data::{make_blobs, make_rings, Dataset, Split, Standardizer};
use fisherjscc::error::Error;
use fisherjscc::experiments::{
    clean_error, compare, error_sweep, posterior_grid, regularizer_track, taylor_validation, top_eigenvectors,
    GridRequest, PowerIteration, SweepRequest,
};
use fisherjscc::models::{Architecture, DecoderModel, EncoderModel};
use fisherjscc::rng::Stream;
use fisherjscc::train::{train, TrainConfig};
use nalgebra::DMatrix;

fn pair(seed: u64, k: usize) -> (EncoderModel, DecoderModel) {
    let arch = Architecture {
        input_dim: 3,
        latent_dim: k,
        classes: 3,
        encoder_hidden: vec![8],
        decoder_hidden: vec![8],
        activation: Activation::Tanh,
        power: 1.0,
    };
    arch.build(seed).unwrap()
}

fn blobs() -> Dataset {
    make_blobs(3, 30, 3, 0.6, 2, Split::Test).unwrap()
}

fn request(grid: &[f64]) -> SweepRequest<'_> {
    SweepRequest {
        regime: "fixed:20",
        psnr_grid: grid,
        family: ChannelFamily::Awgn,
        trials: 20,
        seed: 5,
    }
}

#[test]
fn noiseless_sweep_matches_clean_error() {
    let (enc, dec) = pair(1, 2);
    let data = blobs();
    for family in [ChannelFamily::Awgn, ChannelFamily::Rayleigh] {
        let req = SweepRequest {
            family,
            ..request(&[f64::INFINITY])
        };
        let s = error_sweep(&enc, &dec, &data, &req).unwrap();
        assert_eq!(s.rows[0].error_rate, clean_error(&enc, &dec, &data).unwrap());
        assert_eq!(s.rows[0].mean_expected_kl, 0.0);
        assert_eq!(s.rows[0].mean_regularizer, 0.0);
    }
}

#[test]
fn sweep_is_deterministic_and_thread_independent() {
    let (enc, dec) = pair(2, 3);
    let data = blobs();
    let grid = [5.0, 10.0, 20.0];
    let a = error_sweep(&enc, &dec, &data, &request(&grid)).unwrap();
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let b = one.install(|| error_sweep(&enc, &dec, &data, &request(&grid)).unwrap());
    assert_eq!(a, b);
    assert_eq!(a.rows.len(), 3);
    assert!(a.rows.iter().all(|r| (0.0..=1.0).contains(&r.error_rate)));
    let single = error_sweep(&enc, &dec, &data, &request(&[7.0])).unwrap();
    assert_eq!(single.rows.len(), 1);
}

#[test]
fn compare_with_itself_has_zero_deltas() {
    let (enc, dec) = pair(3, 2);
    let data = blobs();
    let grid = [0.0, 5.0, 10.0];
    let r = compare((&enc, &dec), (&enc, &dec), &data, &request(&grid)).unwrap();
    assert_eq!(r.rows.len(), grid.len());
    assert!(r.rows.iter().all(|row| row.delta == 0.0));
    assert_eq!(r.sign_summary(), (0, 3, 0));
}

/// Rank correlation between PSNR and accuracy is positive for trained models.
#[test]
fn error_falls_with_psnr_for_trained_models() {
    let grid = [0.0, 3.0, 6.0, 9.0, 12.0, 15.0, 20.0];
    let mut positive = 0;
    for seed in 0..3 {
        let tr = make_rings(3, 60, 0.1, seed, Split::Train).unwrap();
        let te = make_rings(3, 60, 0.1, seed, Split::Test).unwrap();
        let st = Standardizer::fit(&tr);
        let (tr, te) = (st.apply(&tr).unwrap(), st.apply(&te).unwrap());
        let arch = Architecture {
            input_dim: 2,
            latent_dim: 2,
            classes: 3,
            encoder_hidden: vec![16],
            decoder_hidden: vec![16],
            activation: Activation::Relu,
            power: 1.0,
        };
        let (e, d) = arch.build(seed).unwrap();
        let cfg = TrainConfig {
            epochs: 40,
            learning_rate: 3e-3,
            seed,
            ..Default::default()
        };
        let (e, d, _) = train(&cfg, &tr, e, d).unwrap();
        let s = error_sweep(&e, &d, &te, &request(&grid)).unwrap();
        let errors: Vec<f64> = s.rows.iter().map(|r| r.error_rate).collect();
        if spearman(&grid, &errors.iter().map(|e| -e).collect::<Vec<_>>()) > 0.0 {
            positive += 1;
        }
    }
    assert!(positive >= 2);
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        for &t in &idx[i..=j] {
            r[t] = (i + j) as f64 / 2.0;
        }
        i = j + 1;
    }
    r
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn taylor_table_shape() {
    let (enc, dec) = pair(4, 2);
    let data = blobs();
    let grid = [0.0, 1e-3, 0.3, 1.0];
    let t = taylor_validation(&enc, &dec, &data, &grid, 200, 1).unwrap();
    let zero = &t.rows[0];
    assert_eq!((zero.mean_expected_kl, zero.mean_regularizer, zero.ratio), (0.0, 0.0, 1.0));
    let nearest = t.rows[1..]
        .iter()
        .min_by(|a, b| (a.ratio - 1.0).abs().total_cmp(&(b.ratio - 1.0).abs()))
        .unwrap();
    assert_eq!(nearest.sigma2, 1e-3);
    assert!(taylor_validation(&enc, &dec, &data, &grid, 19, 1).is_err());
}

#[test]
fn regularizer_track_is_linear_in_variance() {
    let (enc, dec) = pair(5, 2);
    let (enc0, mut dec0) = pair(6, 2);
    dec0.network_mut().zero_output_layer();
    let data = blobs();
    let grid = [10.0, 20.0];
    let t = regularizer_track(&[("a", &enc, &dec), ("zero", &enc0, &dec0)], &grid, &data).unwrap();
    let (r10, r20) = (&t.rows[0], &t.rows[1]);
    let s10 = psnr_to_sigma2(10.0, 1.0).unwrap();
    let s20 = psnr_to_sigma2(20.0, 1.0).unwrap();
    assert!((r10.mean_regularizer / s10 - r20.mean_regularizer / s20).abs() < 1e-12);
    assert!(t.rows[2..].iter().all(|r| r.mean_regularizer == 0.0));
}

#[test]
fn posterior_grid_properties() {
    let (enc, dec) = pair(7, 4);
    let data = blobs();
    let req = GridRequest {
        sample: 5,
        resolution: 9,
        extent: 3.0,
        sigma2: 0.05,
    };
    let g = posterior_grid(&enc, &dec, &data, &req).unwrap();
    let c = g.center_index;
    let lp = dec.log_posterior(&g.center, g.label).unwrap().value();
    assert_eq!(g.values[c][c], -lp);
    let [a, b] = &g.axes;
    let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| x * y).sum::<f64>();
    assert!((dot(a, a) - 1.0).abs() < 1e-10);
    assert!((dot(b, b) - 1.0).abs() < 1e-10);
    assert!(dot(a, b).abs() < 1e-10);
    assert_eq!(g.values.len(), 9);
    assert!(g.values.iter().all(|r| r.len() == 9 && r.iter().all(|v| *v >= 0.0)));

    let even = GridRequest { resolution: 8, ..req.clone() };
    let g8 = posterior_grid(&enc, &dec, &data, &even).unwrap();
    assert_eq!(g8.coords[g8.center_index], 0.0);
    assert!(posterior_grid(&enc, &dec, &data, &GridRequest { resolution: 7, ..req }).is_err());
}

#[test]
fn posterior_grid_rejects_degenerate_representations() {
    let (mut enc, dec) = pair(8, 3);
    // A zero encoder maps everything to the origin.
    for t in enc.params_mut().values_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let req = GridRequest {
        sample: 0,
        resolution: 8,
        extent: 2.0,
        sigma2: 0.1,
    };
    assert!(matches!(
        posterior_grid(&enc, &dec, &blobs(), &req),
        Err(Error::DegenerateCovariance(_))
    ));
}

/// Power iteration against a dense symmetric eigensolver.
#[test]
fn eigenvectors_match_dense_solver() {
    let mut rng = Stream::new(31);
    for trial in 0..20 {
        let k = 2 + trial % 7;
        // Random orthogonal basis with a geometric spectrum.
        let raw = DMatrix::from_fn(k, k, |_, _| rng.normal());
        let q = raw.qr().q();
        let spectrum = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(k, |i, _| 4.0 * 0.5f64.powi(i as i32)));
        let m = &q * spectrum * q.transpose();
        let m = (&m + m.transpose()) * 0.5;
        let t = Tensor::matrix(k, k, m.transpose().as_slice().to_vec()).unwrap();
        let pairs = top_eigenvectors(&t, 2, PowerIteration::default()).unwrap();
        let eig = m.clone().symmetric_eigen();
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        for (r, (lambda, v)) in pairs.iter().enumerate() {
            let col = eig.eigenvectors.column(order[r]);
            assert!((lambda - eig.eigenvalues[order[r]]).abs() < 1e-8);
            let sign = if col.dot(&nalgebra::DVector::from_column_slice(v)) < 0.0 { -1.0 } else { 1.0 };
            for i in 0..k {
                assert!((v[i] - sign * col[i]).abs() < 1e-6, "trial {trial} vec {r}");
            }
        }
    }
}

#[test]
fn csv_outputs_are_reproducible() {
    let (enc, dec) = pair(9, 2);
    let data = blobs();
    let dir = tempfile::tempdir().unwrap();
    let (p1, p2) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    for p in [&p1, &p2] {
        error_sweep(&enc, &dec, &data, &request(&[5.0, 15.0])).unwrap().write_csv(p).unwrap();
    }
    let a = std::fs::read(&p1).unwrap();
    assert_eq!(a, std::fs::read(&p2).unwrap());
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with("# schema=sweep/v1\nregime,psnr_db,family,"));
    assert_eq!(text.lines().count(), 4);
}
