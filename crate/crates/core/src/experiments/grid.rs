use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::autodiff::Tensor;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{DecoderModel, EncoderModel};
use crate::rng::Stream;

pub const GRID_SCHEMA: &str = "# schema=posterior_grid/v1";
pub const AXES_SCHEMA: &str = "# schema=posterior_axes/v1";
pub const MIN_RESOLUTION: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerIteration {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for PowerIteration {
    fn default() -> Self {
        PowerIteration {
            max_iters: 200,
            tol: 1e-10,
        }
    }
}

fn mat_vec(a: &Tensor, v: &[f64]) -> Vec<f64> {
    (0..a.rows())
        .map(|i| a.row(i).iter().zip(v).map(|(x, y)| x * y).sum())
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let c = dot(v, b);
        v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
    }
}

/// Leading `count` eigenpairs of a symmetric matrix by power iteration with
/// deflation, largest eigenvalue first. Each vector is re-orthogonalized
/// against the earlier ones at every step and has a nonnegative largest
/// component.
pub fn top_eigenvectors(matrix: &Tensor, count: usize, opts: PowerIteration) -> Result<Vec<(f64, Vec<f64>)>> {
    let (n, m) = matrix.expect_matrix("top_eigenvectors")?;
    if n != m {
        return Err(Error::shape("top_eigenvectors", format!("matrix is {n}x{m}")));
    }
    if count > n {
        return Err(Error::invalid(format!("asked for {count} eigenvectors of a {n}x{n} matrix")));
    }
    let mut deflated = matrix.clone();
    let mut start_rng = Stream::new(0x5eed);
    let mut pairs: Vec<(f64, Vec<f64>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let basis: Vec<Vec<f64>> = pairs.iter().map(|(_, v)| v.clone()).collect();
        let mut v: Vec<f64> = (0..n).map(|_| start_rng.normal()).collect();
        orthogonalize(&mut v, &basis);
        normalize(&mut v);
        for _ in 0..opts.max_iters {
            let mut w = mat_vec(&deflated, &v);
            orthogonalize(&mut w, &basis);
            if normalize(&mut w) == 0.0 {
                break;
            }
            if dot(&w, &v) < 0.0 {
                w.iter_mut().for_each(|x| *x = -*x);
            }
            let change = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            v = w;
            if change < opts.tol {
                break;
            }
        }
        let lambda = dot(&v, &mat_vec(matrix, &v));
        let pivot = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if pivot < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        let d = deflated.data_mut();
        for i in 0..n {
            for j in 0..n {
                d[i * n + j] -= lambda * v[i] * v[j];
            }
        }
        pairs.push((lambda, v));
    }
    Ok(pairs)
}

fn covariance(z: &Tensor) -> Tensor {
    let (n, k) = (z.rows(), z.cols());
    let mean: Vec<f64> = z.column_sums().data().iter().map(|s| s / n as f64).collect();
    let mut cov = Tensor::zeros(&[k, k]);
    let denom = (n.max(2) - 1) as f64;
    let c = cov.data_mut();
    for r in 0..n {
        let row = z.row(r);
        for a in 0..k {
            let da = row[a] - mean[a];
            for b in 0..k {
                c[a * k + b] += da * (row[b] - mean[b]) / denom;
            }
        }
    }
    cov
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRequest {
    /// Index of the sample in the dataset to centre on.
    pub sample: usize,
    pub resolution: usize,
    /// Half-width of the grid in noise standard deviations.
    pub extent: f64,
    pub sigma2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PosteriorGrid {
    pub axes: [Vec<f64>; 2],
    pub eigenvalues: [f64; 2],
    pub center: Vec<f64>,
    pub label: usize,
    /// Coordinates along each axis in noise standard deviations.
    pub coords: Vec<f64>,
    /// `values[i][j]` is `-log q(label | z + a_i σ v₁ + b_j σ v₂)`.
    pub values: Vec<Vec<f64>>,
    /// Index of the cell at `z` itself.
    pub center_index: usize,
}

impl PosteriorGrid {
    /// Long format: one `(a, b, value)` row per cell.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        writeln!(file, "{GRID_SCHEMA}")?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(["a", "b", "value"])?;
        for (i, row) in self.values.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                w.write_record([self.coords[i].to_string(), self.coords[j].to_string(), v.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_axes_csv(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        writeln!(file, "{AXES_SCHEMA}")?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(["axis", "eigenvalue", "component", "value"])?;
        for (a, axis) in self.axes.iter().enumerate() {
            for (c, v) in axis.iter().enumerate() {
                w.write_record([
                    (a + 1).to_string(),
                    self.eigenvalues[a].to_string(),
                    c.to_string(),
                    v.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Negative log posterior of the true label on a plane through the encoded
/// sample, spanned by the two principal axes of the encoded dataset.
pub fn posterior_grid(
    encoder: &EncoderModel,
    decoder: &DecoderModel,
    data: &Dataset,
    request: &GridRequest,
) -> Result<PosteriorGrid> {
    if request.resolution < MIN_RESOLUTION {
        return Err(Error::invalid(format!(
            "grid resolution must be >= {MIN_RESOLUTION}, got {}",
            request.resolution
        )));
    }
    if request.sample >= data.len() {
        return Err(Error::invalid(format!("sample {} out of range for {} rows", request.sample, data.len())));
    }
    if !(request.sigma2 > 0.0) || !(request.extent > 0.0) {
        return Err(Error::invalid("grid needs positive noise variance and extent"));
    }
    let k = encoder.latent_dim();
    if k < 2 {
        return Err(Error::DegenerateCovariance(format!("representation has {k} dimension")));
    }
    let z_all = encoder.encode(&data.features)?;
    let cov = covariance(&z_all);
    let pairs = top_eigenvectors(&cov, 2, PowerIteration::default())?;
    let scale = pairs[0].0.abs().max(f64::MIN_POSITIVE);
    if pairs[1].0 <= 1e-12 * scale || pairs[0].0 <= 0.0 {
        return Err(Error::DegenerateCovariance(format!(
            "leading eigenvalues {:e} and {:e}; encoded data spans fewer than two directions",
            pairs[0].0, pairs[1].0
        )));
    }

    let center = z_all.row(request.sample).to_vec();
    let label = data.labels[request.sample];
    let res = request.resolution;
    let mid = res / 2;
    let unit = request.extent / mid as f64;
    let coords: Vec<f64> = (0..res).map(|i| (i as f64 - mid as f64) * unit).collect();
    let sigma = request.sigma2.sqrt();
    let (v1, v2) = (&pairs[0].1, &pairs[1].1);

    let mut points = Vec::with_capacity(res * res * k);
    for &a in &coords {
        for &b in &coords {
            for c in 0..k {
                points.push(center[c] + a * sigma * v1[c] + b * sigma * v2[c]);
            }
        }
    }
    let lp = decoder.log_probs(&Tensor::matrix(res * res, k, points)?)?;
    let values: Vec<Vec<f64>> = (0..res)
        .map(|i| (0..res).map(|j| -lp.get(i * res + j, label)).collect())
        .collect();
    let [(e1, a1), (e2, a2)]: [(f64, Vec<f64>); 2] = pairs.try_into().expect("two pairs");
    Ok(PosteriorGrid {
        axes: [a1, a2],
        eigenvalues: [e1, e2],
        center,
        label,
        coords,
        values,
        center_index: mid,
    })
}
