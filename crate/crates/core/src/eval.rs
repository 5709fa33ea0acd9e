//! Retrieval by cosine similarity and the metric suite: Recall@K, recall
//! within the top 1% of the gallery, AP and SDM@K, plus the position-shift
//! sweep and attention magnitude export.

use std::io::Write as _;
use std::path::Path;

use crate::dataset::{position_shift, ClassId, GeoPoint, Sample, ShiftMode};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Real, Tensor};

/// Distance scale of SDM@K, per degree.
pub const SDM_SCALE: f64 = 5000.0;
/// Smallest gallery for which recall within the top 1% is reported.
pub const TOP1_MIN_GALLERY: usize = 100;

const UNIT_TOL: Real = 1e-4;

/// One embedded query or gallery image.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalItem {
    pub class_id: ClassId,
    pub pos: Option<GeoPoint>,
    pub embedding: Vec<Real>,
}

/// Gallery ranked for one query, best first.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedRetrieval {
    pub query_class: ClassId,
    pub query_pos: Option<GeoPoint>,
    /// Gallery indices by descending score.
    pub ids: Vec<usize>,
    pub scores: Vec<Real>,
    /// Class of each ranked item.
    pub classes: Vec<ClassId>,
    /// Coordinates of each ranked item.
    pub positions: Vec<Option<GeoPoint>>,
}

impl RankedRetrieval {
    /// 1-based rank of the first gallery item of the query's class.
    pub fn first_match(&self) -> Option<usize> {
        self.classes.iter().position(|c| *c == self.query_class).map(|i| i + 1)
    }
}

fn check_unit(v: &[Real], what: &str) -> Result<()> {
    let n = v.iter().map(|x| x * x).sum::<Real>().sqrt();
    if !((n - 1.0).abs() < UNIT_TOL) {
        return Err(Error::Contract(format!("{what} embedding is not unit-norm (norm {n})")));
    }
    Ok(())
}

/// Gallery indices sorted by descending dot product, ties by index.
pub fn rank_by_similarity(query: &[Real], gallery: &[Vec<Real>]) -> Result<(Vec<usize>, Vec<Real>)> {
    if gallery.is_empty() {
        return Err(Error::Contract("empty gallery".into()));
    }
    check_unit(query, "query")?;
    let mut scored = Vec::with_capacity(gallery.len());
    for (i, g) in gallery.iter().enumerate() {
        if g.len() != query.len() {
            return Err(Error::Shape(format!("gallery row {i} has dim {}, query {}", g.len(), query.len())));
        }
        check_unit(g, "gallery")?;
        scored.push((query.iter().zip(g).map(|(a, b)| a * b).sum::<Real>(), i));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().map(|(s, i)| (i, s)).unzip())
}

pub fn retrieve(query: &RetrievalItem, gallery: &[RetrievalItem]) -> Result<RankedRetrieval> {
    let rows: Vec<Vec<Real>> = gallery.iter().map(|g| g.embedding.clone()).collect();
    let (ids, scores) = rank_by_similarity(&query.embedding, &rows)?;
    Ok(RankedRetrieval {
        query_class: query.class_id,
        query_pos: query.pos,
        classes: ids.iter().map(|&i| gallery[i].class_id).collect(),
        positions: ids.iter().map(|&i| gallery[i].pos).collect(),
        ids,
        scores,
    })
}

/// 1 if the query's class is within the top `k`, else 0.
pub fn recall_at_k(rr: &RankedRetrieval, k: usize) -> Result<f64> {
    if k == 0 || k > rr.ids.len() {
        return Err(Error::Range(format!("k = {k} outside 1..={}", rr.ids.len())));
    }
    Ok(if rr.classes[..k].contains(&rr.query_class) { 1.0 } else { 0.0 })
}

/// Mean precision at the rank of every same-class gallery item.
pub fn average_precision(rr: &RankedRetrieval) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0.0;
    for (i, c) in rr.classes.iter().enumerate() {
        if *c == rr.query_class {
            hits += 1;
            total += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(Error::Contract(format!("query class {} has no relevant gallery item", rr.query_class)));
    }
    Ok(total / hits as f64)
}

/// Rank-weighted mean of `exp(-s * d_i)` over the top `k`, `d_i` in degrees.
pub fn sdm_at_k(rr: &RankedRetrieval, k: usize, s: f64) -> Result<f64> {
    if k == 0 || k > rr.ids.len() {
        return Err(Error::Range(format!("k = {k} outside 1..={}", rr.ids.len())));
    }
    let q = rr.query_pos.ok_or_else(|| Error::Contract("query has no coordinates".into()))?;
    let dists = rr.positions[..k]
        .iter()
        .map(|p| p.map(|p| q.distance(&p)).ok_or_else(|| Error::Contract("gallery item has no coordinates".into())))
        .collect::<Result<Vec<f64>>>()?;
    Ok(sdm_from_distances(&dists, s))
}

/// SDM@K for the distances of the top `k = d.len()` items.
pub fn sdm_from_distances(d: &[f64], s: f64) -> f64 {
    let k = d.len();
    let (mut num, mut den) = (0.0, 0.0);
    for (i, di) in d.iter().enumerate() {
        let w = (k - i) as f64;
        num += w * (-s * di).exp();
        den += w;
    }
    num / den
}

/// Fraction of queries matched within the top `ceil(N / 100)` items.
pub fn r_at_top1(rrs: &[RankedRetrieval]) -> Result<f64> {
    let n = rrs.first().map(|r| r.ids.len()).unwrap_or(0);
    if n < TOP1_MIN_GALLERY {
        return Err(Error::Range(format!("gallery of {n} is below {TOP1_MIN_GALLERY}")));
    }
    let k = n.div_ceil(100);
    mean(rrs.iter().map(|r| recall_at_k(r, k)))
}

fn mean(values: impl Iterator<Item = Result<f64>>) -> Result<f64> {
    let mut n = 0usize;
    let mut sum = 0.0;
    for v in values {
        sum += v?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Contract("no queries".into()));
    }
    Ok(sum / n as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub recall_1: f64,
    pub recall_5: f64,
    pub recall_10: f64,
    /// Absent for galleries smaller than [`TOP1_MIN_GALLERY`].
    pub r_top1: Option<f64>,
    pub ap: f64,
    /// Absent when coordinates are missing.
    pub sdm_1: Option<f64>,
    pub sdm_3: Option<f64>,
    pub sdm_5: Option<f64>,
    pub n_queries: usize,
}

/// Ranks every query against the gallery and averages the metrics.
pub fn evaluate(queries: &[RetrievalItem], gallery: &[RetrievalItem]) -> Result<MetricsReport> {
    if queries.is_empty() {
        return Err(Error::Contract("no queries".into()));
    }
    if gallery.len() < 10 {
        return Err(Error::Range(format!("gallery of {} is too small for Recall@10", gallery.len())));
    }
    let rrs = queries.iter().map(|q| retrieve(q, gallery)).collect::<Result<Vec<_>>>()?;
    let recall = |k| mean(rrs.iter().map(|r| recall_at_k(r, k)));
    let has_gps = queries.iter().chain(gallery).all(|x| x.pos.is_some());
    let sdm = |k| -> Result<Option<f64>> {
        if has_gps {
            mean(rrs.iter().map(|r| sdm_at_k(r, k, SDM_SCALE))).map(Some)
        } else {
            Ok(None)
        }
    };
    Ok(MetricsReport {
        recall_1: recall(1)?,
        recall_5: recall(5)?,
        recall_10: recall(10)?,
        r_top1: if gallery.len() >= TOP1_MIN_GALLERY { Some(r_at_top1(&rrs)?) } else { None },
        ap: mean(rrs.iter().map(average_precision))?,
        sdm_1: sdm(1)?,
        sdm_3: sdm(3)?,
        sdm_5: sdm(5)?,
        n_queries: queries.len(),
    })
}

/// Embeds samples with `model`, optionally transforming each image first.
pub fn embed_samples(
    model: &Model,
    samples: &[Sample],
    transform: Option<&dyn Fn(&Tensor) -> Result<Tensor>>,
) -> Result<Vec<RetrievalItem>> {
    let owned;
    let images: Vec<&Tensor> = match transform {
        Some(f) => {
            owned = samples.iter().map(|s| f(&s.image)).collect::<Result<Vec<_>>>()?;
            owned.iter().collect()
        }
        None => samples.iter().map(|s| &s.image).collect(),
    };
    let rows = model.embed_many(&images)?;
    Ok(samples
        .iter()
        .zip(rows)
        .map(|(s, embedding)| RetrievalItem { class_id: s.meta.class_id, pos: s.meta.pos, embedding })
        .collect())
}

/// Query-vs-gallery metrics for a model.
pub fn evaluate_model(model: &Model, query: &[Sample], gallery: &[Sample]) -> Result<MetricsReport> {
    evaluate(&embed_samples(model, query, None)?, &embed_samples(model, gallery, None)?)
}

/// Shift pixel counts on the nominal 256-wide grid.
pub const NOMINAL_SHIFTS: [usize; 7] = [0, 10, 20, 30, 40, 50, 60];

/// Rescales the nominal shift grid to an image of width `w`.
pub fn scaled_shifts(w: usize) -> Vec<usize> {
    NOMINAL_SHIFTS.iter().map(|k| ((*k as f64 * w as f64 / 256.0).round() as usize).min(w - 1)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub mode: ShiftMode,
    pub k: usize,
    pub report: MetricsReport,
    /// AP minus the unshifted AP of the same mode.
    pub ap_delta: f64,
}

/// Re-evaluates with every query image shifted by each `k` in each mode.
pub fn robustness_sweep(
    model: &Model,
    query: &[Sample],
    gallery: &[Sample],
    ks: &[usize],
    modes: &[ShiftMode],
) -> Result<Vec<SweepRow>> {
    let gallery = embed_samples(model, gallery, None)?;
    let base = evaluate(&embed_samples(model, query, None)?, &gallery)?;
    let mut rows = Vec::new();
    for &mode in modes {
        for &k in ks {
            let shift = move |x: &Tensor| position_shift(x, k, mode);
            let report = evaluate(&embed_samples(model, query, Some(&shift))?, &gallery)?;
            let ap_delta = report.ap - base.ap;
            rows.push(SweepRow { mode, k, report, ap_delta });
        }
    }
    Ok(rows)
}

/// Least-squares slope of `y` against `x`.
pub fn trend_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    if var == 0.0 {
        0.0
    } else {
        cov / var
    }
}

/// Channel-wise L2 magnitude of the fused attention output, `(H', W')`.
pub fn export_attention(x: &Tensor, model: &Model) -> Result<Tensor> {
    let fused = model.fused_map(x)?;
    let s = fused.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    Ok(Tensor::from_fn(&[h, w], |i| {
        (0..c).map(|ch| fused.data()[ch * h * w + i].powi(2)).sum::<Real>().sqrt()
    }))
}

pub const METRICS_HEADER: &str = "split,mode,pad_k,recall@1,recall@5,recall@10,r@top1,ap,sdm@1,sdm@3,sdm@5";

/// One `metrics.csv` line (without newline); absent values are empty.
pub fn metrics_line(split: &str, mode: &str, pad_k: usize, r: &MetricsReport) -> String {
    let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
    format!(
        "{split},{mode},{pad_k},{:.6},{:.6},{:.6},{},{:.6},{},{},{}",
        r.recall_1,
        r.recall_5,
        r.recall_10,
        opt(r.r_top1),
        r.ap,
        opt(r.sdm_1),
        opt(r.sdm_3),
        opt(r.sdm_5)
    )
}

/// Appends a line to `metrics.csv`, writing the header on creation.
pub fn append_metrics(path: &Path, split: &str, mode: &str, pad_k: usize, r: &MetricsReport) -> Result<()> {
    let fresh = !path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(METRICS_HEADER);
        text.push('\n');
    }
    text.push_str(&metrics_line(split, mode, pad_k, r));
    text.push('\n');
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::rng_for;
    use crate::model::{Model, ModelConfig};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use rand::Rng;

    fn unit(v: Vec<Real>) -> Vec<Real> {
        let n = v.iter().map(|x| x * x).sum::<Real>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    fn item(class_id: ClassId, embedding: Vec<Real>) -> RetrievalItem {
        RetrievalItem { class_id, pos: Some(GeoPoint { lat: 0.0, lon: class_id as f64 * 1e-4 }), embedding }
    }

    /// Ranking with `relevant` positions (1-based) holding the query class.
    fn ranked(n: usize, relevant: &[usize]) -> RankedRetrieval {
        RankedRetrieval {
            query_class: 0,
            query_pos: None,
            ids: (0..n).collect(),
            scores: (0..n).map(|i| 1.0 - i as Real / n as Real).collect(),
            classes: (1..=n).map(|r| if relevant.contains(&r) { 0 } else { r }).collect(),
            positions: vec![None; n],
        }
    }

    fn random_fixture(seed: u64, nq: usize, ng: usize, classes: usize) -> (Vec<RetrievalItem>, Vec<RetrievalItem>) {
        let mut rng = rng_for(&[seed, 77]);
        let mut mk = |c: usize| item(c, unit((0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()));
        let gallery: Vec<_> = (0..ng).map(|i| mk(i % classes)).collect();
        let queries: Vec<_> = (0..nq).map(|i| mk(i % classes)).collect();
        (queries, gallery)
    }

    #[test]
    fn query_in_gallery_ranks_first() {
        let q = unit(vec![1.0, 2.0, 3.0]);
        let g = vec![unit(vec![3.0, 2.0, 1.0]), q.clone(), unit(vec![0.0, 1.0, 0.0])];
        let (ids, scores) = rank_by_similarity(&q, &g).unwrap();
        assert_eq!(ids[0], 1);
        assert_abs_diff_eq!(scores[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn orthogonal_gallery_keeps_index_order() {
        let g: Vec<Vec<Real>> = (1..4).map(|i| (0..4).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        let (ids, scores) = rank_by_similarity(&[1.0, 0.0, 0.0, 0.0], &g).unwrap();
        assert_eq!(ids, vec![0, 1, 2]);
        assert!(scores.iter().all(|s| *s == 0.0));
        assert!(matches!(rank_by_similarity(&[1.0], &[]), Err(Error::Contract(_))));
        assert!(matches!(rank_by_similarity(&[2.0], &[vec![1.0]]), Err(Error::Contract(_))));
    }

    #[test]
    fn recall_examples() {
        assert_eq!(recall_at_k(&ranked(20, &[1]), 1).unwrap(), 1.0);
        let rr = ranked(20, &[6]);
        assert_eq!(recall_at_k(&rr, 5).unwrap(), 0.0);
        assert_eq!(recall_at_k(&rr, 10).unwrap(), 1.0);
        assert!(matches!(recall_at_k(&rr, 21), Err(Error::Range(_))));
        assert!(matches!(recall_at_k(&rr, 0), Err(Error::Range(_))));
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&ranked(10, &[1])).unwrap(), 1.0);
        assert_abs_diff_eq!(average_precision(&ranked(10, &[1, 3])).unwrap(), 0.833333, epsilon = 1e-6);
        assert!(matches!(average_precision(&ranked(10, &[])), Err(Error::Contract(_))));
    }

    #[test]
    fn sdm_examples() {
        assert_eq!(sdm_from_distances(&[0.0; 5], SDM_SCALE), 1.0);
        assert_abs_diff_eq!(sdm_from_distances(&[0.0002], SDM_SCALE), 0.367879, epsilon = 1e-6);
        assert_abs_diff_eq!(sdm_from_distances(&[0.0, 0.0002, 0.001], SDM_SCALE), 0.623749, epsilon = 1e-6);
        let rr = ranked(10, &[1]);
        assert!(matches!(sdm_at_k(&rr, 1, SDM_SCALE), Err(Error::Contract(_))));
    }

    #[test]
    fn top1_percent_examples() {
        assert_eq!(r_at_top1(&[ranked(200, &[2])]).unwrap(), 1.0);
        assert_eq!(r_at_top1(&[ranked(200, &[3])]).unwrap(), 0.0);
        assert!(matches!(r_at_top1(&[ranked(99, &[1])]), Err(Error::Range(_))));
    }

    #[test]
    fn report_omits_top1_for_small_gallery() {
        let (q, g) = random_fixture(1, 10, 40, 20);
        let r = evaluate(&q, &g).unwrap();
        assert!(r.r_top1.is_none());
        assert!(r.sdm_1.is_some());
        let (q, g) = random_fixture(1, 10, 150, 20);
        assert!(evaluate(&q, &g).unwrap().r_top1.is_some());
    }

    #[test]
    fn metrics_csv_has_header_once() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let (q, g) = random_fixture(2, 5, 30, 10);
        let r = evaluate(&q, &g).unwrap();
        append_metrics(&path, "test", "none", 0, &r).unwrap();
        append_metrics(&path, "test", "black", 1, &r).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines[1].split(',').count(), 11);
        assert_eq!(lines[1].split(',').nth(6), Some(""));
    }

    #[test]
    fn scaled_shift_grid() {
        assert_eq!(scaled_shifts(256), NOMINAL_SHIFTS.to_vec());
        assert_eq!(scaled_shifts(16), vec![0, 1, 1, 2, 3, 3, 4]);
    }

    #[test]
    fn attention_export_examples() {
        let cfg = ModelConfig::desk(8);
        let model = Model::init(cfg.clone(), 3).unwrap();
        let x = Tensor::from_fn(&cfg.input, |i| (i as Real * 0.37).sin());
        let a = export_attention(&x, &model).unwrap();
        let (h, w) = cfg.feature_hw();
        assert_eq!(a.shape(), &[h, w]);
        assert!(a.data().iter().all(|v| *v >= 0.0));
        let zero = export_attention(&Tensor::zeros(&cfg.input), &model).unwrap();
        assert!(zero.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_shift_row_equals_unshifted_report() {
        let cfg = ModelConfig::desk(8);
        let model = Model::init(cfg.clone(), 4).unwrap();
        let mut rng = rng_for(&[9]);
        let mk = |c: usize, split: &str, rng: &mut rand_chacha::ChaCha8Rng| Sample {
            meta: crate::dataset::SampleMeta {
                class_id: c,
                view: crate::dataset::View::Drone,
                pos: Some(GeoPoint { lat: 0.0, lon: c as f64 * 1e-4 }),
                payload: format!("{split}/{c}"),
            },
            image: Tensor::from_fn(&cfg.input, |_| rng.gen_range(-1.0..1.0)),
        };
        let query: Vec<_> = (0..6).map(|c| mk(c, "q", &mut rng)).collect();
        let gallery: Vec<_> = (0..12).map(|c| mk(c, "g", &mut rng)).collect();
        let base = evaluate_model(&model, &query, &gallery).unwrap();
        let rows = robustness_sweep(&model, &query, &gallery, &[0, 2], &[ShiftMode::Black, ShiftMode::Flip]).unwrap();
        assert_eq!(rows.len(), 4);
        for r in rows.iter().filter(|r| r.k == 0) {
            assert_eq!(r.report, base);
            assert_eq!(r.ap_delta, 0.0);
        }
    }

    #[test]
    fn slope_signs() {
        assert!(trend_slope(&[0.0, 1.0, 2.0], &[3.0, 2.0, 1.0]) < 0.0);
        assert_eq!(trend_slope(&[0.0, 1.0, 2.0], &[1.0, 1.0, 1.0]), 0.0);
    }

    proptest! {
        #[test]
        fn cosine_and_euclidean_rankings_agree(seed in 0u64..500, n in 1usize..40) {
            let (q, g) = random_fixture(seed, 1, n, n.max(1));
            let rows: Vec<Vec<Real>> = g.iter().map(|x| x.embedding.clone()).collect();
            let (ids, scores) = rank_by_similarity(&q[0].embedding, &rows).unwrap();
            prop_assert!(scores.windows(2).all(|w| w[0] >= w[1]));
            let mut eu: Vec<(Real, usize)> = rows
                .iter()
                .enumerate()
                .map(|(i, r)| (r.iter().zip(&q[0].embedding).map(|(a, b)| (a - b).powi(2)).sum::<Real>(), i))
                .collect();
            eu.sort_by(|a, b| a.partial_cmp(b).unwrap());
            prop_assert_eq!(ids, eu.into_iter().map(|x| x.1).collect::<Vec<_>>());
        }

        #[test]
        fn recall_matches_brute_scan(seed in 0u64..300, k in 1usize..12) {
            let (q, g) = random_fixture(seed, 15, 30, 10);
            let report_k: f64 = {
                let rrs: Vec<_> = q.iter().map(|x| retrieve(x, &g).unwrap()).collect();
                rrs.iter().map(|r| recall_at_k(r, k).unwrap()).sum::<f64>() / rrs.len() as f64
            };
            let mut hits = 0.0;
            for x in &q {
                let mut sims: Vec<(Real, usize)> = g
                    .iter()
                    .enumerate()
                    .map(|(i, y)| (-x.embedding.iter().zip(&y.embedding).map(|(a, b)| a * b).sum::<Real>(), i))
                    .collect();
                sims.sort_by(|a, b| a.partial_cmp(b).unwrap());
                if sims[..k].iter().any(|(_, i)| g[*i].class_id == x.class_id) {
                    hits += 1.0;
                }
            }
            prop_assert!((report_k - hits / q.len() as f64).abs() < 1e-12);
        }

        #[test]
        fn ap_matches_precision_sum(seed in 0u64..100) {
            let mut rng = rng_for(&[seed, 5]);
            let n = rng.gen_range(1..40usize);
            let mut relevant: Vec<usize> = (1..=n).filter(|_| rng.gen_bool(0.3)).collect();
            if relevant.is_empty() {
                relevant.push(rng.gen_range(1..=n));
            }
            let rr = ranked(n, &relevant);
            let oracle: f64 = relevant
                .iter()
                .map(|&r| relevant.iter().filter(|&&x| x <= r).count() as f64 / r as f64)
                .sum::<f64>()
                / relevant.len() as f64;
            prop_assert!((average_precision(&rr).unwrap() - oracle).abs() < 1e-12);
        }

        #[test]
        fn top1_agrees_with_recall(seed in 0u64..100, n in 100usize..400) {
            let (q, g) = random_fixture(seed, 8, n, 50);
            let rrs: Vec<_> = q.iter().map(|x| retrieve(x, &g).unwrap()).collect();
            let k = (0.01 * n as f64).ceil() as usize;
            let want = rrs.iter().map(|r| recall_at_k(r, k).unwrap()).sum::<f64>() / rrs.len() as f64;
            prop_assert!((r_at_top1(&rrs).unwrap() - want).abs() < 1e-12);
        }

        #[test]
        fn sdm_properties(d in proptest::collection::vec(0.0f64..0.002, 1..8), i_frac in 0.0f64..1.0, bump in 1e-5f64..1e-3) {
            let v = sdm_from_distances(&d, SDM_SCALE);
            prop_assert!(v > 0.0 && v <= 1.0);
            prop_assert_eq!(v == 1.0, d.iter().all(|x| *x == 0.0));
            let i = ((i_frac * d.len() as f64) as usize).min(d.len() - 1);
            let mut d2 = d.clone();
            d2[i] += bump;
            prop_assert!(sdm_from_distances(&d2, SDM_SCALE) < v);
        }

        #[test]
        fn report_values_in_unit_interval(seed in 0u64..200) {
            let (q, g) = random_fixture(seed, 12, 24, 8);
            let r = evaluate(&q, &g).unwrap();
            for v in [r.recall_1, r.recall_5, r.recall_10, r.ap, r.sdm_1.unwrap(), r.sdm_3.unwrap(), r.sdm_5.unwrap()] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert!(r.recall_1 <= r.recall_5 && r.recall_5 <= r.recall_10);
        }
    }
}
