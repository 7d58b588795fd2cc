//! Desk-FID: Fréchet distance between Gaussian fits of features from a fixed,
//! seeded, randomly initialised convolutional extractor.
//!
//! Values are only comparable between runs that share the extractor seed and
//! feature dimension; they are not on the scale of Inception-based FID.

use crate::error::{Error, Result};
use crate::nn::{ModelConfig, Network};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

pub const DEFAULT_FEATURE_DIM: usize = 32;
const JACOBI_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;
const SYMMETRY_TOL: f64 = 1e-8;
const EXTRACT_CHUNK: usize = 128;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    /// `[d]`
    pub mean: Tensor,
    /// `[d, d]`, symmetric
    pub cov: Tensor,
    pub n: usize,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.numel()
    }
}

/// Frozen random network mapping images to `dim`-dimensional features.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    net: Network,
}

impl FeatureExtractor {
    pub fn new(model: &ModelConfig, dim: usize, seed: u64) -> Result<Self> {
        let cfg = ModelConfig {
            conditional: false,
            ..model.clone()
        };
        let mut rng = SplitMix64::new(seed);
        let mut net = Network::feature_extractor(&cfg, dim, &mut rng)?;
        net.set_all_trainable(false);
        Ok(Self { net })
    }

    pub fn dim(&self) -> usize {
        self.net.extra
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    /// `[n, C, H, W] -> [n, d]`; row `i` depends only on image `i`.
    pub fn extract(&self, images: &Tensor) -> Result<Tensor> {
        let expect = self.net.input_shape();
        if images.rank() != 4 || images.shape()[1..] != expect[..] {
            return Err(Error::usage(format!(
                "extractor expects [n, {:?}] images, got {:?}",
                expect,
                images.shape()
            )));
        }
        let n = images.shape()[0];
        let mut out = Vec::with_capacity(n * self.dim());
        let mut start = 0;
        while start < n {
            let end = (start + EXTRACT_CHUNK).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let feats = self.net.infer(&images.select_rows(&idx), None)?;
            out.extend_from_slice(feats.data());
            start = end;
        }
        Tensor::new(vec![n, self.dim()], out)
    }
}

/// Column means and unbiased covariance of an `[n, d]` feature matrix.
///
/// Rows are accumulated in a canonical (lexicographic) order, so the result
/// is bit-identical under any permutation of the input rows.
pub fn fit_gaussian(features: &Tensor) -> Result<GaussianStats> {
    if features.rank() != 2 {
        return Err(Error::usage(format!("features must be [n, d], got {:?}", features.shape())));
    }
    let (n, d) = (features.shape()[0], features.shape()[1]);
    if n < 2 {
        return Err(Error::usage(format!("need at least 2 samples, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        features
            .row(a)
            .iter()
            .zip(features.row(b))
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut mean = vec![0.0; d];
    for &i in &order {
        for (m, v) in mean.iter_mut().zip(features.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; d * d];
    let mut centered = vec![0.0; d];
    for &i in &order {
        for ((c, v), m) in centered.iter_mut().zip(features.row(i)).zip(&mean) {
            *c = v - m;
        }
        for a in 0..d {
            let ca = centered[a];
            for b in a..d {
                cov[a * d + b] += ca * centered[b];
            }
        }
    }
    let denom = (n - 1) as f64;
    for a in 0..d {
        for b in a..d {
            let v = cov[a * d + b] / denom;
            cov[a * d + b] = v;
            cov[b * d + a] = v;
        }
    }
    Ok(GaussianStats {
        mean: Tensor::new(vec![d], mean)?,
        cov: Tensor::new(vec![d, d], cov)?,
        n,
    })
}

fn square_dim(a: &Tensor) -> Result<usize> {
    if a.rank() != 2 || a.shape()[0] != a.shape()[1] {
        return Err(Error::usage(format!("expected a square matrix, got {:?}", a.shape())));
    }
    Ok(a.shape()[0])
}

fn matmul_sq(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut c = vec![0.0; d * d];
    for i in 0..d {
        for k in 0..d {
            let aik = a[i * d + k];
            for j in 0..d {
                c[i * d + j] += aik * b[k * d + j];
            }
        }
    }
    c
}

fn symmetrize(a: &mut [f64], d: usize) {
    for i in 0..d {
        for j in i + 1..d {
            let v = 0.5 * (a[i * d + j] + a[j * d + i]);
            a[i * d + j] = v;
            a[j * d + i] = v;
        }
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Returns eigenvalues and the row-major eigenvector matrix `Q` (eigenvectors
/// in columns) with `A = Q·diag(λ)·Qᵀ`. Sweeps until the off-diagonal
/// Frobenius norm falls below `1e-12·max(1, ‖A‖_F)`.
pub fn symmetric_eigen(a: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    let d = square_dim(a)?;
    let mut m = a.data().to_vec();
    let mut q = vec![0.0; d * d];
    for i in 0..d {
        q[i * d + i] = 1.0;
    }
    let norm = m.iter().map(|v| v * v).sum::<f64>().sqrt();
    let tol = JACOBI_TOL * norm.max(1.0);
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off = off_diagonal_norm(&m, d);
        if off < tol {
            break;
        }
        for p in 0..d {
            for r in p + 1..d {
                let apq = m[p * d + r];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[r * d + r] - m[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let mkp = m[k * d + p];
                    let mkr = m[k * d + r];
                    m[k * d + p] = c * mkp - s * mkr;
                    m[k * d + r] = s * mkp + c * mkr;
                }
                for k in 0..d {
                    let mpk = m[p * d + k];
                    let mrk = m[r * d + k];
                    m[p * d + k] = c * mpk - s * mrk;
                    m[r * d + k] = s * mpk + c * mrk;
                }
                for k in 0..d {
                    let qkp = q[k * d + p];
                    let qkr = q[k * d + r];
                    q[k * d + p] = c * qkp - s * qkr;
                    q[k * d + r] = s * qkp + c * qkr;
                }
            }
        }
    }
    let eig = (0..d).map(|i| m[i * d + i]).collect();
    Ok((eig, Tensor::new(vec![d, d], q)?))
}

fn off_diagonal_norm(m: &[f64], d: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..d {
        for j in 0..d {
            if i != j {
                s += m[i * d + j] * m[i * d + j];
            }
        }
    }
    s.sqrt()
}

/// Principal square root of a symmetric PSD matrix; negative eigenvalues
/// from round-off are clamped to zero.
pub fn sqrtm_psd(a: &Tensor) -> Result<Tensor> {
    let d = square_dim(a)?;
    let scale = a.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
    for i in 0..d {
        for j in i + 1..d {
            let gap = (a.data()[i * d + j] - a.data()[j * d + i]).abs();
            if gap > SYMMETRY_TOL * scale {
                return Err(Error::usage(format!(
                    "matrix not symmetric: |a[{i},{j}] - a[{j},{i}]| = {gap:e}"
                )));
            }
        }
    }
    let mut sym = a.data().to_vec();
    symmetrize(&mut sym, d);
    let (eig, q) = symmetric_eigen(&Tensor::new(vec![d, d], sym)?)?;
    let roots: Vec<f64> = eig.iter().map(|l| l.max(0.0).sqrt()).collect();
    let qd = q.data();
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in i..d {
            let v: f64 = (0..d).map(|k| qd[i * d + k] * roots[k] * qd[j * d + k]).sum();
            out[i * d + j] = v;
            out[j * d + i] = v;
        }
    }
    Tensor::new(vec![d, d], out)
}

/// `‖μa−μb‖² + tr(Σa + Σb − 2·sqrtm(√Σa·Σb·√Σa))`, clamped at zero.
pub fn frechet(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::usage(format!(
            "feature dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let d = a.dim();
    let mean_term: f64 = a
        .mean
        .data()
        .iter()
        .zip(b.mean.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let root_a = sqrtm_psd(&a.cov)?;
    let mut inner = matmul_sq(&matmul_sq(root_a.data(), b.cov.data(), d), root_a.data(), d);
    symmetrize(&mut inner, d);
    let s = sqrtm_psd(&Tensor::new(vec![d, d], inner)?)?;
    let trace = |t: &Tensor| (0..d).map(|i| t.data()[i * d + i]).sum::<f64>();
    let value = mean_term + trace(&a.cov) + trace(&b.cov) - 2.0 * trace(&s);
    Ok(value.max(0.0))
}

/// Desk-FID between two image sets.
pub fn fid(real: &Tensor, generated: &Tensor, extractor: &FeatureExtractor) -> Result<f64> {
    let a = fit_gaussian(&extractor.extract(real)?)?;
    let b = fit_gaussian(&extractor.extract(generated)?)?;
    frechet(&a, &b)
}
