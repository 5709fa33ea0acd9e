//! Training objective: per-stream cross-entropy, batch-hard triplet loss on
//! cosine distance, and symmetric KL between paired drone/satellite class
//! distributions. The total is their plain sum.

use crate::error::{Error, Result};
use crate::tensor::{Real, Var};

/// Default margin of the triplet hinge.
pub const DEFAULT_MARGIN: Real = 0.3;

/// Floor applied to probabilities before taking logs in [`mutual_kl`].
pub const PROB_FLOOR: Real = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub l_rpt: Real,
    pub l_mtc: Real,
    pub l_kl: Real,
    pub total: Real,
}

/// How anchors are reduced in [`hard_mining_triplet`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TripletReduction {
    /// Hardest positive and negative per anchor, averaged over anchors.
    #[default]
    BatchHard,
    /// The single hardest triplet of the whole batch.
    HardestOnly,
}

/// Mean over streams and samples of `-log softmax(logits)[label]`.
pub fn cross_entropy<'g>(logits: &[Var<'g>], labels: &[usize]) -> Result<Var<'g>> {
    if logits.is_empty() {
        return Err(Error::Contract("cross_entropy needs at least one stream".into()));
    }
    let mut total: Option<Var<'g>> = None;
    let mut count = 0usize;
    for l in logits {
        let s = l.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::Shape(format!("logits {s:?} for {} labels", labels.len())));
        }
        let k = s[1];
        if let Some(bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::Range(format!("label {bad} with {k} classes")));
        }
        let index: Vec<usize> = labels.iter().enumerate().map(|(n, &y)| n * k + y).collect();
        let picked = l.log_softmax()?.gather(&index)?.sum()?;
        total = Some(match total {
            Some(t) => t.add(picked)?,
            None => picked,
        });
        count += labels.len();
    }
    total.unwrap().scale(-1.0 / count as Real)
}

/// Per-anchor hinge `max(0, d(a, p*) - d(a, n*) + margin)` with
/// `d = 1 - cosine`, `p*` the farthest same-label row and `n*` the nearest
/// other-label row. Ties pick the lowest index. Rows must be unit-norm.
pub fn triplet_terms<'g>(embeddings: Var<'g>, labels: &[usize], margin: Real) -> Result<Var<'g>> {
    let s = embeddings.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::Shape(format!("embeddings {s:?} for {} labels", labels.len())));
    }
    let m = labels.len();
    let sim = embeddings.matmul(embeddings.permute(&[1, 0])?)?;
    let dist = sim.scale(-1.0)?.add_scalar(1.0)?;
    let d = dist.value();
    let mut pos = Vec::with_capacity(m);
    let mut neg = Vec::with_capacity(m);
    for a in 0..m {
        let row = &d.data()[a * m..(a + 1) * m];
        let mut hardest_pos: Option<usize> = None;
        let mut hardest_neg: Option<usize> = None;
        for j in 0..m {
            if j == a {
                continue;
            }
            if labels[j] == labels[a] {
                if hardest_pos.is_none_or(|p| row[j] > row[p]) {
                    hardest_pos = Some(j);
                }
            } else if hardest_neg.is_none_or(|n| row[j] < row[n]) {
                hardest_neg = Some(j);
            }
        }
        let p = hardest_pos.ok_or_else(|| {
            Error::Contract(format!("anchor {a} (class {}) has no positive in the batch", labels[a]))
        })?;
        let n = hardest_neg
            .ok_or_else(|| Error::Contract(format!("anchor {a} has no negative in the batch")))?;
        pos.push(a * m + p);
        neg.push(a * m + n);
    }
    dist.gather(&pos)?.sub(dist.gather(&neg)?)?.add_scalar(margin)?.relu()
}

/// Hard-mining triplet loss over a batch of unit-norm embeddings.
pub fn hard_mining_triplet<'g>(
    embeddings: Var<'g>,
    labels: &[usize],
    margin: Real,
    reduction: TripletReduction,
) -> Result<Var<'g>> {
    let terms = triplet_terms(embeddings, labels, margin)?;
    match reduction {
        TripletReduction::BatchHard => terms.mean(),
        TripletReduction::HardestOnly => {
            let v = terms.value();
            let worst = (0..v.numel()).fold(0, |best, i| if v.data()[i] > v.data()[best] { i } else { best });
            terms.gather(&[worst])?.sum()
        }
    }
}

/// Symmetric KL between row-paired drone and satellite class distributions,
/// summed over the two directions, averaged over pairs and streams.
pub fn mutual_kl<'g>(logits_d: &[Var<'g>], logits_s: &[Var<'g>]) -> Result<Var<'g>> {
    if logits_d.len() != logits_s.len() || logits_d.is_empty() {
        return Err(Error::Contract(format!(
            "{} drone streams paired with {} satellite streams",
            logits_d.len(),
            logits_s.len()
        )));
    }
    let mut total: Option<Var<'g>> = None;
    for (ld, ls) in logits_d.iter().zip(logits_s) {
        let (sd, ss) = (ld.shape(), ls.shape());
        if sd != ss || sd.len() != 2 {
            return Err(Error::Shape(format!("paired logits {sd:?} vs {ss:?}")));
        }
        let pd = ld.softmax()?;
        let ps = ls.softmax()?;
        let lpd = pd.clamp_min(PROB_FLOOR)?.log()?;
        let lps = ps.clamp_min(PROB_FLOOR)?.log()?;
        let kl_ds = pd.mul(lpd.sub(lps)?)?.sum()?;
        let kl_sd = ps.mul(lps.sub(lpd)?)?.sum()?;
        let stream = kl_ds.add(kl_sd)?.scale(1.0 / sd[0] as Real)?;
        total = Some(match total {
            Some(t) => t.add(stream)?,
            None => stream,
        });
    }
    total.unwrap().scale(1.0 / logits_d.len() as Real)
}

/// Differentiable total plus its scalar breakdown.
pub struct TotalLoss<'g> {
    pub total: Var<'g>,
    pub report: LossReport,
}

pub fn total_loss<'g>(rpt: Var<'g>, mtc: Var<'g>, kl: Var<'g>) -> Result<TotalLoss<'g>> {
    let total = rpt.add(mtc)?.add(kl)?;
    let report = LossReport { l_rpt: rpt.item(), l_mtc: mtc.item(), l_kl: kl.item(), total: total.item() };
    Ok(TotalLoss { total, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Graph, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[Real]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn unit_rows(rng: &mut ChaCha8Rng, m: usize, d: usize) -> Tensor {
        let mut data: Vec<Real> = (0..m * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for row in data.chunks_mut(d) {
            let n = row.iter().map(|v| v * v).sum::<Real>().sqrt();
            row.iter_mut().for_each(|v| *v /= n);
        }
        t(&[m, d], &data)
    }

    /// Scalar log-sum-exp cross-entropy for one row.
    fn ce_oracle(row: &[Real], label: usize) -> Real {
        let m = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<Real>().ln();
        lse - row[label]
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let g = Graph::new();
        let streams: Vec<_> = (0..5).map(|_| g.constant(Tensor::zeros(&[1, 4]))).collect();
        let ce = cross_entropy(&streams, &[2]).unwrap().item();
        assert!((ce - 4f64.ln() as Real).abs() < 1e-12);
        assert!((ce - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn dominant_logit_gives_zero() {
        let g = Graph::new();
        let l = g.constant(t(&[1, 4], &[1000.0, 0.0, 0.0, 0.0]));
        assert_eq!(cross_entropy(&[l], &[0]).unwrap().item(), 0.0);
    }

    #[test]
    fn cross_entropy_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let g = Graph::new();
            let (n, k) = (3, 6);
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let raw: Vec<Tensor> =
                (0..5).map(|_| Tensor::from_fn(&[n, k], |_| rng.gen_range(-5.0..5.0))).collect();
            let vars: Vec<_> = raw.iter().map(|r| g.constant(r.clone())).collect();
            let got = cross_entropy(&vars, &labels).unwrap().item();
            let mut expect = 0.0;
            for r in &raw {
                for (i, &y) in labels.iter().enumerate() {
                    expect += ce_oracle(&r.data()[i * k..(i + 1) * k], y);
                }
            }
            expect /= (5 * n) as Real;
            assert!((got - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let g = Graph::new();
        let l = g.constant(Tensor::zeros(&[1, 4]));
        assert!(matches!(cross_entropy(&[l], &[4]), Err(Error::Range(_))));
    }

    #[test]
    fn cross_entropy_falls_as_true_logit_rises() {
        let g = Graph::new();
        let mut prev = Real::INFINITY;
        for step in 0..10 {
            let l = g.constant(t(&[1, 3], &[0.3, step as Real * 0.5 - 2.0, -0.4]));
            let ce = cross_entropy(&[l], &[1]).unwrap().item();
            assert!(ce < prev);
            prev = ce;
        }
    }

    #[test]
    fn triplet_easy_case_is_zero() {
        // a == p, n orthogonal; the duplicate n' gives the negatives a positive.
        let g = Graph::new();
        let e = g.constant(t(&[4, 2], &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]));
        let terms = triplet_terms(e, &[0, 0, 1, 1], 0.3).unwrap().value();
        assert_eq!(terms.data()[0], 0.0);
        let loss = hard_mining_triplet(e, &[0, 0, 1, 1], 0.3, TripletReduction::BatchHard).unwrap();
        assert_eq!(loss.item(), 0.0);
    }

    #[test]
    fn triplet_hard_case_is_one_point_three() {
        // a orthogonal to p, n == a
        let g = Graph::new();
        let e = g.constant(t(&[4, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0]));
        let terms = triplet_terms(e, &[0, 0, 1, 1], 0.3).unwrap().value();
        assert!((terms.data()[0] - 1.3).abs() < 1e-15);
    }

    #[test]
    fn triplet_without_positive_is_contract_error() {
        let g = Graph::new();
        let e = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        assert!(matches!(
            hard_mining_triplet(e, &[0, 1], 0.3, TripletReduction::BatchHard),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn triplet_is_bounded_and_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            let e = unit_rows(&mut rng, 6, 3);
            let labels = [0, 0, 1, 1, 2, 2];
            let g = Graph::new();
            let base = hard_mining_triplet(g.constant(e.clone()), &labels, 0.3, TripletReduction::BatchHard)
                .unwrap()
                .item();
            assert!((0.0..=2.3).contains(&base));
            let theta: Real = rng.gen_range(0.0..6.28);
            let (c, s) = (theta.cos(), theta.sin());
            let rot = Tensor::from_fn(&[6, 3], |i| {
                let (r, col) = (i / 3, i % 3);
                let (x, y, z) = (e.get(&[r, 0]), e.get(&[r, 1]), e.get(&[r, 2]));
                match col {
                    0 => c * x - s * y,
                    1 => s * x + c * y,
                    _ => z,
                }
            });
            let rotated = hard_mining_triplet(g.constant(rot), &labels, 0.3, TripletReduction::BatchHard)
                .unwrap()
                .item();
            assert!((base - rotated).abs() < 1e-12);
        }
    }

    #[test]
    fn hardest_only_picks_the_max_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let e = unit_rows(&mut rng, 6, 4);
        let labels = [0, 0, 1, 1, 2, 2];
        let g = Graph::new();
        let terms = triplet_terms(g.constant(e.clone()), &labels, 0.3).unwrap().value();
        let max = terms.data().iter().copied().fold(0.0, Real::max);
        let single = hard_mining_triplet(g.constant(e), &labels, 0.3, TripletReduction::HardestOnly).unwrap();
        assert_eq!(single.item(), max);
    }

    fn probs_to_logits(p: &[Real]) -> Tensor {
        t(&[1, p.len()], &p.iter().map(|v| v.ln()).collect::<Vec<_>>())
    }

    #[test]
    fn kl_worked_example() {
        let g = Graph::new();
        let d = g.constant(probs_to_logits(&[0.5, 0.5]));
        let s = g.constant(probs_to_logits(&[0.9, 0.1]));
        let v = mutual_kl(&[d], &[s]).unwrap().item();
        let expect = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln() + 0.9 * (0.9f64 / 0.5).ln()
            + 0.1 * (0.1f64 / 0.5).ln();
        assert!((v - expect as Real).abs() < 1e-12);
        assert!((v - 0.878890).abs() < 1e-6);
    }

    #[test]
    fn kl_is_zero_for_identical_and_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let g = Graph::new();
            let a: Vec<_> = (0..5).map(|_| g.constant(Tensor::from_fn(&[2, 5], |_| rng.gen_range(-3.0..3.0)))).collect();
            let b: Vec<_> = (0..5).map(|_| g.constant(Tensor::from_fn(&[2, 5], |_| rng.gen_range(-3.0..3.0)))).collect();
            assert!(mutual_kl(&a, &a).unwrap().item().abs() < 1e-15);
            let ab = mutual_kl(&a, &b).unwrap().item();
            let ba = mutual_kl(&b, &a).unwrap().item();
            assert!(ab > 0.0);
            assert!((ab - ba).abs() < 1e-12);
        }
    }

    #[test]
    fn total_is_exact_sum() {
        let g = Graph::new();
        let r = total_loss(
            g.constant(Tensor::scalar(1.0)),
            g.constant(Tensor::scalar(0.5)),
            g.constant(Tensor::scalar(0.25)),
        )
        .unwrap()
        .report;
        assert_eq!(r.total, 1.75);
        let z = total_loss(
            g.constant(Tensor::scalar(0.0)),
            g.constant(Tensor::scalar(0.0)),
            g.constant(Tensor::scalar(0.0)),
        )
        .unwrap()
        .report;
        assert_eq!(z.total, 0.0);
    }

    #[test]
    fn total_gradient_is_sum_of_term_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::from_fn(&[4, 3], |_| rng.gen_range(-1.0..1.0));
        let labels = [0usize, 0, 1, 1];
        let terms = |g: &Graph, x: Var<'_>, which: usize| -> Result<Real> {
            let _ = g;
            let emb = x.l2_normalize()?;
            let logits = [x, x.scale(2.0)?];
            let rpt = cross_entropy(&logits, &labels)?;
            let mtc = hard_mining_triplet(emb, &labels, 0.3, TripletReduction::BatchHard)?;
            let kl = mutual_kl(&[x.gather(&[0, 1, 2])?.reshape(&[1, 3])?], &[x.gather(&[3, 4, 5])?.reshape(&[1, 3])?])?;
            let v = match which {
                0 => rpt,
                1 => mtc,
                2 => kl,
                _ => total_loss(rpt, mtc, kl)?.total,
            };
            Ok(v.item())
        };
        let grad_of = |which: usize| {
            let g = Graph::new();
            let xv = g.param(x.clone());
            let emb = xv.l2_normalize().unwrap();
            let logits = [xv, xv.scale(2.0).unwrap()];
            let rpt = cross_entropy(&logits, &labels).unwrap();
            let mtc = hard_mining_triplet(emb, &labels, 0.3, TripletReduction::BatchHard).unwrap();
            let kl = mutual_kl(
                &[xv.gather(&[0, 1, 2]).unwrap().reshape(&[1, 3]).unwrap()],
                &[xv.gather(&[3, 4, 5]).unwrap().reshape(&[1, 3]).unwrap()],
            )
            .unwrap();
            let v = match which {
                0 => rpt,
                1 => mtc,
                2 => kl,
                _ => total_loss(rpt, mtc, kl).unwrap().total,
            };
            g.backward(v).unwrap().wrt_or_zero(xv)
        };
        let total = grad_of(3);
        let parts: Vec<Tensor> = (0..3).map(grad_of).collect();
        for i in 0..total.numel() {
            let s: Real = parts.iter().map(|p| p.data()[i]).sum();
            assert!((total.data()[i] - s).abs() < 1e-12);
        }
        // and the total agrees with central differences
        let h = 1e-6;
        for i in 0..x.numel() {
            let eval = |delta: Real| {
                let mut p = x.clone();
                p.data_mut()[i] += delta;
                let g = Graph::new();
                let v = g.constant(p);
                terms(&g, v, 3).unwrap()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            assert!((numeric - total.data()[i]).abs() < 1e-6 * total.data()[i].abs().max(1.0));
        }
        let err = grad_check(
            |_, v| {
                let emb = v.l2_normalize()?;
                hard_mining_triplet(emb, &labels, 0.3, TripletReduction::BatchHard)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }
}
