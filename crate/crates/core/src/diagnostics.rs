//! Reusable correctness checks: the gradient suite over every learnable
//! module, and the unfolded-ISTA versus dense-ISTA comparison.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dgdm::{retrieve_key, Dgdm, DegradationTransform, LevelKeys, RefineTransform};
use crate::encoder::{contrastive_loss_graph, Adapter};
use crate::error::Result;
use crate::nn::params::init;
use crate::nn::{grad_check, GradCheckConfig, GradCheckReport, Graph, Linear, ParamBuilder, ParamId, ParamSet, Var};
use crate::oracle::{compressive_sensing, ista_iterate};
use crate::pmm::TransformerBlock;
use crate::unfolder::{ista_mode_forward, ModelConfig, Restorer};

/// Tolerance on the maximum relative gradient error.
pub const GRAD_TOL: f64 = 1e-4;

/// `Σ out ⊙ R` for a fixed random `R`, so every output coordinate matters.
fn probe(g: &mut Graph<'_, f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = g.constant(init::normal(&mut rng, &shape, 1.0));
    let m = g.mul(out, r)?;
    Ok(g.sum(m))
}

fn check_module<B>(
    seed: u64,
    cfg: &GradCheckConfig,
    build: impl FnOnce(&mut ParamBuilder<'_, f64>, &mut ChaCha8Rng) -> Result<B>,
    eval: impl Fn(&B, &mut Graph<'_, f64>) -> Result<Var>,
) -> Result<GradCheckReport> {
    let mut p = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = ChaCha8Rng::seed_from_u64(seed ^ 0x1A);
    let built = build(&mut ParamBuilder::new(&mut p, &mut rng), &mut inputs)?;
    grad_check(
        &mut p,
        |g| {
            let o = eval(&built, g)?;
            probe(g, o, seed)
        },
        cfg,
    )
}

fn input(pb: &mut ParamBuilder<'_, f64>, rng: &mut ChaCha8Rng, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
    pb.add(&format!("input.{name}"), init::normal(rng, shape, std))
}

/// Runs the central-difference oracle on each module with inputs treated as
/// parameters too, so input gradients are checked alongside weights.
pub fn grad_check_suite(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let cfg = GradCheckConfig { seed, ..GradCheckConfig::default() };
    let (c, h, w, dim, keys) = (4, 6, 6, 8, 3);
    let fmap = [c, h, w];
    let mut out = Vec::new();

    out.push((
        "adapter",
        check_module(
            seed,
            &cfg,
            |pb, r| Ok((Adapter::new(&mut pb.child("adapter"), dim)?, input(pb, r, "x", &[dim, 2], 1.0)?)),
            |(a, x), g| {
                let x = g.param(*x);
                a.forward(g, x)
            },
        )?,
    ));
    out.push((
        "contrastive_loss",
        check_module(
            seed,
            &cfg,
            |pb, r| Ok((input(pb, r, "images", &[4, dim], 1.0)?, input(pb, r, "texts", &[4, dim], 1.0)?, pb.full("log_tau", &[1], 1.0)?)),
            |(i, t, lt), g| {
                let (i, t, lt) = (g.param(*i), g.param(*t), g.param(*lt));
                let (i, t) = (g.l2_normalize_rows(i), g.l2_normalize_rows(t));
                let tau = g.exp(lt);
                contrastive_loss_graph(g, i, t, tau)
            },
        )?,
    ));
    out.push((
        "retrieve_key",
        check_module(
            seed,
            &cfg,
            |pb, r| {
                let db = LevelKeys::new(&mut pb.child("keys"), keys, c)?;
                let proj = Linear::new(&mut pb.child("proj"), dim, keys, true)?;
                Ok((db, proj, input(pb, r, "d", &[dim, 1], 1.0)?))
            },
            |(db, proj, d), g| {
                let d = g.param(*d);
                retrieve_key(g, d, db, proj)
            },
        )?,
    ));
    out.push((
        "degradation_transform",
        check_module(
            seed,
            &cfg,
            |pb, r| {
                let t = DegradationTransform::new(&mut pb.child("phi"), c, 2, false)?;
                Ok((t, input(pb, r, "x", &fmap, 1.0)?, input(pb, r, "key", &[1, c], 0.5)?))
            },
            |(t, x, k), g| {
                let (x, k) = (g.param(*x), g.param(*k));
                t.forward(g, x, k)
            },
        )?,
    ));
    out.push((
        "refine_transform",
        check_module(
            seed,
            &cfg,
            |pb, r| Ok((RefineTransform::new(&mut pb.child("phi_t"), c, 2, false)?, input(pb, r, "r", &fmap, 1.0)?)),
            |(t, x), g| {
                let x = g.param(*x);
                t.forward(g, x)
            },
        )?,
    ));
    out.push((
        "stage_update",
        check_module(
            seed,
            &cfg,
            |pb, r| {
                let d = Dgdm::new(&mut pb.child("dgdm"), c, 2, 0.5, false, false)?;
                Ok((d, input(pb, r, "x", &fmap, 1.0)?, input(pb, r, "y", &fmap, 1.0)?, input(pb, r, "key", &[1, c], 0.5)?))
            },
            |(d, x, y, k), g| {
                let (x, y, k) = (g.param(*x), g.param(*y), g.param(*k));
                Ok(d.forward(g, x, y, k)?.1)
            },
        )?,
    ));
    out.push((
        "transformer_block",
        check_module(
            seed,
            &cfg,
            |pb, r| Ok((TransformerBlock::new(&mut pb.child("block"), c, 2, false)?, input(pb, r, "x", &fmap, 1.0)?)),
            |(b, x), g| {
                let x = g.param(*x);
                b.forward(g, x)
            },
        )?,
    ));
    out.push(("full_model", full_model_check(seed, &cfg)?));
    Ok(out)
}

/// The whole 2-level, 4-stage restorer on a 16×16 input, with the
/// zero-initialized output projections switched off.
pub fn full_model_check(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mcfg =
        ModelConfig { channels: 4, blocks: vec![1, 1], degradation_dim: 8, num_keys: 3, zero_init_out: false, seed, ..ModelConfig::default() };
    let model = Restorer::<f64>::new(mcfg)?;
    let mut p = model.params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x2B);
    let y = p.add("input.y", init::normal(&mut rng, &[3, 16, 16], 0.3))?;
    let v = init::normal::<f64, _>(&mut rng, &[8], 1.0);
    let n = v.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let d: Vec<f64> = v.data().iter().map(|x| x / n).collect();
    grad_check(
        &mut p,
        |g| {
            let yv = g.param(y);
            let o = model.forward_graph(g, yv, Some(&d))?;
            probe(g, o.output, seed)
        },
        cfg,
    )
}

/// Per-stage relative error `‖x_unfolded − x_oracle‖ / ‖x_oracle‖` on one
/// compressive-sensing instance.
pub fn ista_equivalence(m: usize, n: usize, sparsity: usize, lam: f64, stages: usize, seed: u64) -> Result<Vec<f64>> {
    let (p, _) = compressive_sensing(m, n, sparsity, lam, seed);
    let reference = ista_iterate(&p, stages)?;
    let cfg = ModelConfig::ista_debug(stages, p.rho * p.lam);
    let unfolded = ista_mode_forward(&cfg, &p.phi, m, n, &p.y, &p.x0, p.rho)?;
    Ok(reference
        .iter()
        .zip(&unfolded)
        .map(|(r, u)| {
            let diff = r.iter().zip(u).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let norm = r.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 0.0 {
                diff / norm
            } else {
                diff
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        for (name, r) in grad_check_suite(1).unwrap() {
            assert!(r.passes(GRAD_TOL), "{name}: {r:?}");
        }
    }

    #[test]
    fn equivalence_on_one_instance() {
        let e = ista_equivalence(32, 64, 5, 0.05, 10, 0).unwrap();
        assert_eq!(e.len(), 10);
        assert!(e.iter().all(|v| *v < 1e-10), "{e:?}");
    }
}
