//! Dense-matrix ISTA reference. Deliberately shares no code with the
//! differentiable substrate.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const POWER_ITERATIONS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct LinearProblem {
    /// Row-major `m×n`.
    pub phi: Vec<f64>,
    pub m: usize,
    pub n: usize,
    pub y: Vec<f64>,
    pub lam: f64,
    pub rho: f64,
    pub x0: Vec<f64>,
}

fn matvec(a: &[f64], m: usize, n: usize, x: &[f64]) -> Vec<f64> {
    (0..m).map(|i| (0..n).map(|j| a[i * n + j] * x[j]).sum()).collect()
}

fn matvec_t(a: &[f64], m: usize, n: usize, r: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for i in 0..m {
        for j in 0..n {
            out[j] += a[i * n + j] * r[i];
        }
    }
    out
}

fn shrink(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

impl LinearProblem {
    pub fn validate(&self) -> Result<()> {
        if self.phi.len() != self.m * self.n || self.y.len() != self.m || self.x0.len() != self.n {
            return Err(Error::Shape(format!(
                "problem: Φ has {} values for {}x{}, y {}, x0 {}",
                self.phi.len(),
                self.m,
                self.n,
                self.y.len(),
                self.x0.len()
            )));
        }
        if !(self.lam >= 0.0) || !(self.rho > 0.0) {
            return Err(Error::Param(format!("need lam ≥ 0 and rho > 0, got {} and {}", self.lam, self.rho)));
        }
        if self.phi.iter().chain(&self.y).chain(&self.x0).any(|v| !v.is_finite()) {
            return Err(Error::Param("problem has non-finite entries".into()));
        }
        Ok(())
    }

    /// Largest eigenvalue of `ΦᵀΦ` by power iteration.
    pub fn lipschitz(&self) -> f64 {
        let mut v = vec![1.0 / (self.n as f64).sqrt(); self.n];
        let mut lambda = 0.0;
        for _ in 0..POWER_ITERATIONS {
            let w = matvec_t(&self.phi, self.m, self.n, &matvec(&self.phi, self.m, self.n, &v));
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            lambda = norm;
            v = w.into_iter().map(|x| x / norm).collect();
        }
        lambda
    }

    /// `½‖Φx − y‖² + λ‖x‖₁`.
    pub fn objective(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.n {
            return Err(Error::Shape(format!("objective: x has {} values, expected {}", x.len(), self.n)));
        }
        let r = matvec(&self.phi, self.m, self.n, x);
        let fit: f64 = r.iter().zip(&self.y).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok(0.5 * fit + self.lam * x.iter().map(|v| v.abs()).sum::<f64>())
    }

    /// One ISTA step from `x`.
    pub fn step(&self, x: &[f64]) -> Vec<f64> {
        let r: Vec<f64> = matvec(&self.phi, self.m, self.n, x).iter().zip(&self.y).map(|(a, b)| a - b).collect();
        let g = matvec_t(&self.phi, self.m, self.n, &r);
        x.iter().zip(&g).map(|(xi, gi)| shrink(xi - self.rho * gi, self.rho * self.lam)).collect()
    }
}

/// `x⁽¹⁾ … x⁽ᴷ⁾`.
pub fn ista_iterate(p: &LinearProblem, k: usize) -> Result<Vec<Vec<f64>>> {
    p.validate()?;
    let mut x = p.x0.clone();
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        x = p.step(&x);
        out.push(x.clone());
    }
    Ok(out)
}

/// Compressive-sensing instance: Gaussian `Φ` scaled by `1/√m`, a
/// `sparsity`-sparse ground truth, `y = Φx`, `ρ = 1/L`, `x0 = 0`.
pub fn compressive_sensing(m: usize, n: usize, sparsity: usize, lam: f64, seed: u64) -> (LinearProblem, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0 / (m as f64).sqrt()).expect("positive std");
    let phi: Vec<f64> = (0..m * n).map(|_| normal.sample(&mut rng)).collect();
    let mut truth = vec![0.0; n];
    for j in sample(&mut rng, n, sparsity.min(n)) {
        let mag = 1.0 + rng.random::<f64>();
        truth[j] = if rng.random::<bool>() { mag } else { -mag };
    }
    let y = matvec(&phi, m, n, &truth);
    let mut p = LinearProblem { phi, m, n, y, lam, rho: 1.0, x0: vec![0.0; n] };
    p.rho = 1.0 / p.lipschitz();
    (p, truth)
}

pub fn support(x: &[f64], tol: f64) -> Vec<usize> {
    x.iter().enumerate().filter(|(_, v)| v.abs() > tol).map(|(i, _)| i).collect()
}

/// Text trace: one line per iterate with the objective and the values.
pub fn trace_text(p: &LinearProblem, iterates: &[Vec<f64>]) -> Result<String> {
    let mut s = format!("# m={} n={} lam={} rho={} L={}\n", p.m, p.n, p.lam, p.rho, p.lipschitz());
    for (k, x) in iterates.iter().enumerate() {
        let vals: Vec<String> = x.iter().map(|v| format!("{v:.6e}")).collect();
        s.push_str(&format!("{} {:.12e} {}\n", k + 1, p.objective(x)?, vals.join(" ")));
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eye(n: usize) -> Vec<f64> {
        (0..n * n).map(|i| if i / n == i % n { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn identity_problem_and_objective() {
        let p = LinearProblem { phi: eye(3), m: 3, n: 3, y: vec![1.0, -2.0, 0.5], lam: 0.0, rho: 1.0, x0: vec![0.0; 3] };
        assert_eq!(ista_iterate(&p, 1).unwrap()[0], p.y);
        assert_eq!(p.objective(&[0.0; 3]).unwrap(), 0.5 * (1.0 + 4.0 + 0.25));
        assert_eq!(p.objective(&p.y).unwrap(), 0.0);
        assert!(p.objective(&[0.0; 2]).is_err());
        assert!((p.lipschitz() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn full_shrinkage() {
        let (mut p, _) = compressive_sensing(8, 16, 2, 0.0, 1);
        let z = p.step(&p.x0);
        let inf = z.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        p.lam = 2.0 * inf / p.rho + 1.0;
        assert!(ista_iterate(&p, 1).unwrap()[0].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn recovers_sparse_support() {
        let (p, truth) = compressive_sensing(32, 64, 5, 0.05, 7);
        let it = ista_iterate(&p, 200).unwrap();
        let last = it.last().unwrap();
        assert_eq!(support(last, 0.05), support(&truth, 0.0));
        assert!(p.objective(last).unwrap() <= p.objective(&truth).unwrap() + 1e-6);
    }

    #[test]
    fn objective_never_increases() {
        for seed in 0..20 {
            let (p, _) = compressive_sensing(32, 64, 5, 0.05, 100 + seed);
            let mut prev = p.objective(&p.x0).unwrap();
            for x in ista_iterate(&p, 60).unwrap() {
                let f = p.objective(&x).unwrap();
                assert!(f <= prev + 1e-12, "seed {seed}: {f} > {prev}");
                prev = f;
            }
        }
    }

    #[test]
    fn fixed_point_is_stable() {
        let (p, _) = compressive_sensing(16, 24, 3, 0.1, 3);
        let x = ista_iterate(&p, 5000).unwrap().pop().unwrap();
        let next = p.step(&x);
        let d = next.iter().zip(&x).fold(0.0f64, |a, (u, v)| a.max((u - v).abs()));
        assert!(d < 1e-12, "{d}");
    }

    #[test]
    fn invalid_problems() {
        let mut p = LinearProblem { phi: eye(2), m: 2, n: 2, y: vec![1.0; 2], lam: 0.0, rho: 1.0, x0: vec![0.0; 2] };
        p.rho = 0.0;
        assert!(ista_iterate(&p, 1).is_err());
        p.rho = 1.0;
        p.y = vec![1.0];
        assert!(ista_iterate(&p, 1).is_err());
    }
}
