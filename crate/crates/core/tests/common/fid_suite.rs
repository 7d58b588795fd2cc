//! Closed-form oracles for the Fréchet distance. Each check returns its
//! worst error so callers can compare against their own tolerance.

use freezelab_core::fid::{frechet, sqrtm_psd, GaussianStats};
use freezelab_core::rng::SplitMix64;
use freezelab_core::Tensor;

pub fn stats(mean: Vec<f64>, cov: Vec<f64>) -> GaussianStats {
    let d = mean.len();
    GaussianStats {
        mean: Tensor::new(vec![d], mean).unwrap(),
        cov: Tensor::new(vec![d, d], cov).unwrap(),
        n: 100,
    }
}

/// `B·Bᵀ` for a random `d × d` B, plus a small ridge.
pub fn random_psd(rng: &mut SplitMix64, d: usize) -> Vec<f64> {
    let b = rng.normals(d * d);
    let mut a = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            a[i * d + j] = (0..d).map(|k| b[i * d + k] * b[j * d + k]).sum::<f64>();
        }
        a[i * d + i] += 1e-3;
    }
    a
}

/// Random orthogonal matrix by Gram-Schmidt on Gaussian columns.
pub fn random_orthogonal(rng: &mut SplitMix64, d: usize) -> Vec<f64> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
    while cols.len() < d {
        let mut v = rng.normals(d);
        for c in &cols {
            let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            cols.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    let mut q = vec![0.0; d * d];
    for (j, c) in cols.iter().enumerate() {
        for i in 0..d {
            q[i * d + j] = c[i];
        }
    }
    q
}

/// `Q·diag(l)·Qᵀ`.
pub fn with_spectrum(q: &[f64], l: &[f64]) -> Vec<f64> {
    let d = l.len();
    let mut a = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            a[i * d + j] = (0..d).map(|k| q[i * d + k] * l[k] * q[j * d + k]).sum();
        }
    }
    a
}

/// `frechet(a, a)` over `cases` random 8-d Gaussians.
pub fn self_distance(seed: u64, cases: usize) -> f64 {
    let mut r = SplitMix64::new(seed);
    (0..cases)
        .map(|_| {
            let s = stats(r.normals(8), random_psd(&mut r, 8));
            frechet(&s, &s).unwrap().abs()
        })
        .fold(0.0, f64::max)
}

/// `|frechet − ((μa−μb)² + (σa−σb)²)|` over `pairs` random 1-d Gaussians.
pub fn one_dim_closed_form(seed: u64, pairs: usize) -> f64 {
    let mut r = SplitMix64::new(seed);
    (0..pairs)
        .map(|_| {
            let (ma, mb) = (r.uniform(-3.0, 3.0), r.uniform(-3.0, 3.0));
            let (sa, sb) = (r.uniform(0.05, 3.0), r.uniform(0.05, 3.0));
            let got = frechet(&stats(vec![ma], vec![sa * sa]), &stats(vec![mb], vec![sb * sb])).unwrap();
            let want = (ma - mb).powi(2) + (sa - sb).powi(2);
            (got - want).abs()
        })
        .fold(0.0, f64::max)
}

/// `|frechet − ‖Δμ‖²|` when both sides share one covariance.
pub fn equal_covariance(seed: u64, cases: usize) -> f64 {
    let mut r = SplitMix64::new(seed);
    (0..cases)
        .map(|_| {
            let cov = random_psd(&mut r, 8);
            let (ma, mb) = (r.normals(8), r.normals(8));
            let want: f64 = ma.iter().zip(&mb).map(|(a, b)| (a - b) * (a - b)).sum();
            let got = frechet(&stats(ma, cov.clone()), &stats(mb, cov)).unwrap();
            (got - want).abs()
        })
        .fold(0.0, f64::max)
}

/// Commuting covariances `Q·diag(a)·Qᵀ`, `Q·diag(b)·Qᵀ` have the closed form
/// `‖Δμ‖² + Σ(√aᵢ − √bᵢ)²`.
pub fn commuting_covariances(seed: u64, cases: usize) -> f64 {
    let mut r = SplitMix64::new(seed);
    (0..cases)
        .map(|_| {
            let q = random_orthogonal(&mut r, 8);
            let la: Vec<f64> = (0..8).map(|_| r.uniform(0.01, 4.0)).collect();
            let lb: Vec<f64> = (0..8).map(|_| r.uniform(0.01, 4.0)).collect();
            let (ma, mb) = (r.normals(8), r.normals(8));
            let want: f64 = ma.iter().zip(&mb).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
                + la.iter().zip(&lb).map(|(a, b)| (a.sqrt() - b.sqrt()).powi(2)).sum::<f64>();
            let got = frechet(&stats(ma, with_spectrum(&q, &la)), &stats(mb, with_spectrum(&q, &lb))).unwrap();
            (got - want).abs()
        })
        .fold(0.0, f64::max)
}

/// `‖S² − A‖∞` for `S = sqrtm(A)` over random 8×8 PSD matrices.
pub fn sqrtm_reconstruction(seed: u64, cases: usize) -> f64 {
    let mut r = SplitMix64::new(seed);
    let d = 8;
    (0..cases)
        .map(|_| {
            let a = random_psd(&mut r, d);
            let s = sqrtm_psd(&Tensor::new(vec![d, d], a.clone()).unwrap()).unwrap();
            let s = s.data();
            let mut worst: f64 = 0.0;
            for i in 0..d {
                for j in 0..d {
                    let v: f64 = (0..d).map(|k| s[i * d + k] * s[k * d + j]).sum();
                    worst = worst.max((v - a[i * d + j]).abs());
                }
            }
            worst
        })
        .fold(0.0, f64::max)
}
