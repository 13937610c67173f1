//! Central-difference gradient oracle.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::ParamSet;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Coordinates sampled per parameter; all of them when the tensor is smaller.
    pub coords_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { eps: 1e-5, coords_per_param: 64, seed: 0 }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(1, |numeric|)` over checked coordinates.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a non-differentiable point.
    pub skipped: usize,
    pub worst: Option<(String, usize)>,
    pub per_param: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tol
    }
}

fn eval(params: &ParamSet<f64>, f: &impl Fn(&mut Graph<f64>) -> Result<Var>) -> Result<(f64, Vec<bool>)> {
    let mut g = Graph::new(params);
    let out = f(&mut g)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::Shape(format!("grad_check needs a scalar function, got {:?}", v.shape())));
    }
    Ok((v.item(), g.kink_signature().to_vec()))
}

/// Compares reverse-mode gradients of `f` against central differences for
/// every trainable parameter in `params`.
pub fn grad_check(
    params: &mut ParamSet<f64>,
    f: impl Fn(&mut Graph<f64>) -> Result<Var>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let analytic: Vec<Option<Vec<f64>>> = {
        let mut g = Graph::new(&*params);
        let out = f(&mut g)?;
        if g.value(out).len() != 1 {
            return Err(Error::Shape(format!("grad_check needs a scalar function, got {:?}", g.shape(out))));
        }
        let grads = g.backward(out)?;
        params.ids().map(|id| grads.param(id).map(|s| s.to_vec())).collect()
    };
    let (_, base_kinks) = eval(params, &f)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport::default();
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        if !params.get(id).trainable {
            continue;
        }
        let n = params.tensor(id).len();
        let coords: Vec<usize> =
            if n <= cfg.coords_per_param { (0..n).collect() } else { sample(&mut rng, n, cfg.coords_per_param).into_vec() };
        let mut worst_here = 0.0f64;
        for c in coords {
            let orig = params.tensor(id).data()[c];
            params.tensor_mut(id).data_mut()[c] = orig + cfg.eps;
            let plus = eval(params, &f);
            params.tensor_mut(id).data_mut()[c] = orig - cfg.eps;
            let minus = eval(params, &f);
            params.tensor_mut(id).data_mut()[c] = orig;
            let ((fp, kp), (fm, km)) = (plus?, minus?);
            if kp != base_kinks || km != base_kinks {
                report.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * cfg.eps);
            let a = analytic[id.index()].as_ref().map_or(0.0, |g| g[c]);
            let rel = (a - numeric).abs() / numeric.abs().max(1.0);
            report.checked += 1;
            worst_here = worst_here.max(rel);
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((params.get(id).name.clone(), c));
            }
        }
        report.per_param.push((params.get(id).name.clone(), worst_here));
    }
    Ok(report)
}
