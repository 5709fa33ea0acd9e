//! Finite-difference audit of every differentiable piece of the model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::losses::{cross_entropy, hard_mining_triplet, mutual_kl, total_loss, TripletReduction, DEFAULT_MARGIN};
use crate::model::{caci_forward, rca_forward, CaciVars, Model, ModelConfig};
use crate::tensor::{grad_check, DimOrder, Graph, Real, Tensor, Var};

/// Pass threshold on the maximum relative error.
pub const GRAD_TOLERANCE: Real = 1e-5;

/// Default central-difference step.
pub const GRAD_STEP: Real = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCase {
    pub name: String,
    pub max_rel_err: Real,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRAD_TOLERANCE
    }
}

struct Suite {
    rng: ChaCha8Rng,
    h: Real,
    cases: Vec<GradCase>,
}

impl Suite {
    fn uniform(&mut self, shape: &[usize], lo: Real, hi: Real) -> Tensor {
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
    }

    fn input(&mut self, shape: &[usize]) -> Tensor {
        self.uniform(shape, -2.0, 2.0)
    }

    /// Checks `sum(f(x) * r)` for a random readout `r`, so every output
    /// element receives a distinct upstream gradient.
    fn check<F>(&mut self, name: &str, x: &Tensor, f: F) -> Result<()>
    where
        F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
    {
        let shape = {
            let g = Graph::new();
            f(&g, g.constant(x.clone()))?.shape()
        };
        let readout = self.uniform(&shape, -1.0, 1.0);
        let err = grad_check(|g, v| f(g, v)?.mul(g.constant(readout.clone()))?.sum(), x, self.h)?;
        self.push(name, err);
        Ok(())
    }

    fn check_scalar<F>(&mut self, name: &str, x: &Tensor, f: F) -> Result<()>
    where
        F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
    {
        let err = grad_check(f, x, self.h)?;
        self.push(name, err);
        Ok(())
    }

    fn push(&mut self, name: &str, max_rel_err: Real) {
        self.cases.push(GradCase { name: name.to_string(), max_rel_err });
    }
}

/// Runs the whole audit for one seed: each tensor primitive (with respect to
/// every differentiable operand), the attention block, the four-branch
/// attention module and the composite training loss.
pub fn gradient_suite(seed: u64, h: Real) -> Result<Vec<GradCase>> {
    let mut s = Suite { rng: ChaCha8Rng::seed_from_u64(seed), h, cases: Vec::new() };
    primitives(&mut s)?;
    attention(&mut s, seed)?;
    objective(&mut s)?;
    Ok(s.cases)
}

/// Largest error over a suite result.
pub fn worst_case(cases: &[GradCase]) -> Option<&GradCase> {
    cases.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
}

fn primitives(s: &mut Suite) -> Result<()> {
    let m = s.input(&[4, 3]);
    let row = s.input(&[1, 3]);
    let other = s.input(&[4, 3]);
    s.check("add", &m, |g, x| x.add(g.constant(row.clone())))?;
    s.check("add.broadcast", &row, |g, x| g.constant(m.clone()).add(x))?;
    s.check("sub.lhs", &m, |g, x| x.sub(g.constant(other.clone())))?;
    s.check("sub.rhs", &row, |g, x| g.constant(m.clone()).sub(x))?;
    s.check("mul", &m, |g, x| x.mul(g.constant(other.clone())))?;
    s.check("mul.broadcast", &row, |g, x| g.constant(m.clone()).mul(x))?;
    s.check("mul.self", &m, |_, x| x.mul(x))?;
    s.check("scale", &m, |_, x| x.scale(-1.7))?;
    s.check("add_scalar", &m, |_, x| x.add_scalar(0.4))?;
    s.check("sigmoid", &m, |_, x| x.sigmoid())?;
    s.check("relu", &m, |_, x| x.relu())?;
    let positive = s.uniform(&[4, 3], 0.25, 2.0);
    s.check("log", &positive, |_, x| x.log())?;
    s.check("clamp_min", &m, |_, x| x.clamp_min(0.1))?;
    s.check("sum", &m, |_, x| x.sum())?;
    s.check("mean", &m, |_, x| x.mean())?;
    s.check("softmax", &m, |_, x| x.softmax())?;
    s.check("log_softmax", &m, |_, x| x.log_softmax())?;
    s.check("l2_normalize", &m, |_, x| x.l2_normalize())?;
    s.check("gather", &m, |_, x| x.gather(&[11, 0, 5, 5, 7]))?;

    let k = s.input(&[3, 5]);
    s.check("matmul.lhs", &m, |g, x| x.matmul(g.constant(k.clone())))?;
    s.check("matmul.rhs", &k, |g, x| g.constant(m.clone()).matmul(x))?;
    let w = s.input(&[2, 3]);
    let b = s.input(&[2]);
    s.check("linear.input", &m, |g, x| x.linear(g.constant(w.clone()), Some(g.constant(b.clone()))))?;
    s.check("linear.weight", &w, |g, x| g.constant(m.clone()).linear(x, Some(g.constant(b.clone()))))?;
    s.check("linear.bias", &b, |g, x| g.constant(m.clone()).linear(g.constant(w.clone()), Some(x)))?;

    let map = s.input(&[2, 3, 5, 4]);
    s.check("permute", &map, |_, x| x.permute(&[0, 2, 3, 1]))?;
    s.check("inverse_permute", &map, |_, x| x.inverse_permute(&[0, 3, 1, 2]))?;
    s.check("reshape", &map, |_, x| x.reshape(&[6, 20]))?;
    let side = s.input(&[2, 1, 5, 4]);
    s.check("concat", &map, |g, x| Var::concat(&[g.constant(side.clone()), x], 1))?;
    s.check("global_avg_pool", &map, |_, x| x.global_avg_pool())?;
    s.check("channel_mean", &map, |_, x| x.channel_mean())?;
    s.check("channel_max", &map, |_, x| x.channel_max())?;
    let gamma = s.input(&[3]);
    let beta = s.input(&[3]);
    s.check("channel_norm.input", &map, |g, x| {
        x.channel_norm(g.constant(gamma.clone()), g.constant(beta.clone()))
    })?;
    s.check("channel_norm.gamma", &gamma, |g, x| g.constant(map.clone()).channel_norm(x, g.constant(beta.clone())))?;
    s.check("channel_norm.beta", &beta, |g, x| g.constant(map.clone()).channel_norm(g.constant(gamma.clone()), x))?;

    let kw = s.input(&[4, 3, 3, 3]);
    let kb = s.input(&[4]);
    s.check("conv2d.input", &map, |g, x| conv(x, g.constant(kw.clone()), g.constant(kb.clone())))?;
    s.check("conv2d.weight", &kw, |g, x| conv(g.constant(map.clone()), x, g.constant(kb.clone())))?;
    s.check("conv2d.bias", &kb, |g, x| conv(g.constant(map.clone()), g.constant(kw.clone()), x))?;
    Ok(())
}

fn conv<'g>(x: Var<'g>, w: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
    x.conv2d(w, Some(b), 2, 1)
}

/// A narrow (8-channel) model keeps the audit fast and the objective small.
fn audit_model(seed: u64) -> Result<(Model, ModelConfig)> {
    let mut cfg = ModelConfig::desk(4);
    cfg.widths = vec![8, 8];
    cfg.bottleneck = 6;
    Ok((Model::init(cfg.clone(), seed)?, cfg))
}

fn attention(s: &mut Suite, seed: u64) -> Result<()> {
    let (model, cfg) = audit_model(seed)?;
    let (h, w) = cfg.feature_hw();
    let feature = s.input(&[2, cfg.c_out(), h, w]);
    let (shared, kernel) = (cfg.caci_weight_sharing, cfg.spatial_kernel);
    s.check("caci", &feature, |g, x| {
        let p = model.params.bind(g, false);
        let vars = CaciVars::for_branch(&p, DimOrder::CHW, shared)?;
        Ok(caci_forward(x, &vars, kernel)?.0)
    })?;
    s.check("rca", &feature, |g, x| {
        let p = model.params.bind(g, false);
        Ok(rca_forward(x, &p, shared, kernel)?.fused)
    })?;
    Ok(())
}

/// Total loss over ten logit streams (five per view) packed into one input.
fn objective(s: &mut Suite) -> Result<()> {
    const N: usize = 4;
    const K: usize = 4;
    let labels = [0usize, 1, 0, 1];
    let logits = s.input(&[N, 10 * K]);
    s.check_scalar("total_loss", &logits, |_, x| {
        let streams: Vec<_> = (0..10)
            .map(|st| {
                let idx: Vec<usize> =
                    (0..N).flat_map(|n| (0..K).map(move |k| n * 10 * K + st * K + k)).collect();
                x.gather(&idx)?.reshape(&[N, K])
            })
            .collect::<Result<_>>()?;
        let rpt = cross_entropy(&streams, &labels)?;
        let pooled = Var::concat(&[streams[0], streams[5]], 0)?.l2_normalize()?;
        let pair_labels: Vec<usize> = labels.iter().chain(&labels).copied().collect();
        let mtc = hard_mining_triplet(pooled, &pair_labels, DEFAULT_MARGIN, TripletReduction::BatchHard)?;
        let kl = mutual_kl(&streams[..5], &streams[5..])?;
        Ok(total_loss(rpt, mtc, kl)?.total)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_covers_every_piece_and_passes() {
        let cases = gradient_suite(3, GRAD_STEP).unwrap();
        for name in ["conv2d.weight", "channel_norm.gamma", "caci", "rca", "total_loss"] {
            assert!(cases.iter().any(|c| c.name == name), "missing {name}");
        }
        for c in &cases {
            assert!(c.passed(), "{} err {:.3e}", c.name, c.max_rel_err);
        }
    }

    #[test]
    fn worst_case_picks_largest() {
        let cases = vec![
            GradCase { name: "a".into(), max_rel_err: 1e-9 },
            GradCase { name: "b".into(), max_rel_err: 1e-7 },
        ];
        assert_eq!(worst_case(&cases).unwrap().name, "b");
        assert!(worst_case(&[]).is_none());
    }
}
