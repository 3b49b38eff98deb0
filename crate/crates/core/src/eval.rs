//! Full-ranking leave-one-out evaluation.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use crate::corpus::{EmbeddingTable, EvalInstance, InteractionSequence, ItemId};
use crate::error::{Error, Result};
use crate::finetune::{score_all, FinetuneMode, Vocabulary};
use crate::model::Model;

pub const CUTOFFS: [usize; 2] = [10, 50];

/// 1-based rank of `gt` with ties resolved against the ground truth.
pub fn rank_of_ground_truth(scores: &[f64], gt: usize) -> Result<usize> {
    let target = *scores
        .get(gt)
        .ok_or_else(|| Error::Range(format!("ground truth {gt} of {} scores", scores.len())))?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidInput("non-finite score".into()));
    }
    let ahead = scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| i != gt && s >= target)
        .count();
    Ok(1 + ahead)
}

/// `(recall, ndcg)` contributions of a single relevant item at `rank`.
pub fn metrics_from_rank(rank: usize, n: usize) -> (f64, f64) {
    if rank >= 1 && rank <= n {
        (1.0, 1.0 / ((rank + 1) as f64).log2())
    } else {
        (0.0, 0.0)
    }
}

/// One popularity bucket of a long-tail breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupRow {
    pub lower: usize,
    /// `None` for an unbounded last bucket.
    pub upper: Option<usize>,
    pub count: usize,
    pub recall10: f64,
    /// `recall10 / baseline − 1`, when a baseline is supplied and nonzero.
    pub improvement: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub recall: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub user_count: usize,
    pub per_group: Option<Vec<GroupRow>>,
}

impl MetricsReport {
    /// Arithmetic means of per-user contributions.
    pub fn from_ranks(ranks: &[usize]) -> Result<Self> {
        if ranks.is_empty() {
            return Err(Error::EmptyData("no test users to evaluate".into()));
        }
        let mut report = MetricsReport {
            user_count: ranks.len(),
            ..Default::default()
        };
        for n in CUTOFFS {
            let (mut r, mut d) = (0.0, 0.0);
            for &rank in ranks {
                let (rc, dc) = metrics_from_rank(rank, n);
                r += rc;
                d += dc;
            }
            report.recall.insert(n, r / ranks.len() as f64);
            report.ndcg.insert(n, d / ranks.len() as f64);
        }
        Ok(report)
    }

    pub fn recall_at(&self, n: usize) -> f64 {
        self.recall.get(&n).copied().unwrap_or(0.0)
    }

    pub fn ndcg_at(&self, n: usize) -> f64 {
        self.ndcg.get(&n).copied().unwrap_or(0.0)
    }

    /// `metric\tN\tvalue` rows, 6 decimals.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("metric\tN\tvalue\n");
        for (name, map) in [("recall", &self.recall), ("ndcg", &self.ndcg)] {
            for (n, v) in map {
                let _ = writeln!(out, "{name}\t{n}\t{}", fmt6(*v));
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        let map = |m: &BTreeMap<usize, f64>| {
            m.iter()
                .map(|(n, v)| format!("\"{n}\": {}", fmt6(*v)))
                .collect::<Vec<_>>()
                .join(", ")
        };
        let mut out = String::from("{\n");
        let _ = writeln!(out, "  \"user_count\": {},", self.user_count);
        let _ = writeln!(out, "  \"recall\": {{{}}},", map(&self.recall));
        let _ = write!(out, "  \"ndcg\": {{{}}}", map(&self.ndcg));
        if let Some(groups) = &self.per_group {
            out.push_str(",\n  \"per_group\": [\n");
            let rows: Vec<String> = groups
                .iter()
                .map(|g| {
                    format!(
                        "    {{\"lower\": {}, \"upper\": {}, \"count\": {}, \"recall@10\": {}, \"improvement\": {}}}",
                        g.lower,
                        g.upper.map_or("null".to_string(), |u| u.to_string()),
                        g.count,
                        fmt6(g.recall10),
                        g.improvement.map_or("null".to_string(), fmt6)
                    )
                })
                .collect();
            out.push_str(&rows.join(",\n"));
            out.push_str("\n  ]");
        }
        out.push_str("\n}\n");
        out
    }
}

/// Fixed six decimals; ties round to even (the default for `{:.6}`).
pub fn fmt6(v: f64) -> String {
    format!("{v:.6}")
}

/// Training-set interaction count per item.
pub fn popularity(train: &[InteractionSequence]) -> HashMap<ItemId, usize> {
    let mut counts = HashMap::new();
    for seq in train {
        for &id in &seq.items {
            *counts.entry(id).or_insert(0) += 1;
        }
    }
    counts
}

/// Groups test instances into half-open popularity buckets
/// `[b_i, b_{i+1})`, the last one unbounded, and reports Recall@10 per
/// bucket (with the relative change against `baseline_ranks` if given).
pub fn long_tail_report(
    ranks: &[usize],
    target_popularity: &[usize],
    boundaries: &[usize],
    baseline_ranks: Option<&[usize]>,
) -> Result<Vec<GroupRow>> {
    if boundaries.is_empty() || boundaries.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidParameter(format!(
            "bucket boundaries must be nonempty and strictly increasing: {boundaries:?}"
        )));
    }
    if ranks.len() != target_popularity.len() || baseline_ranks.is_some_and(|b| b.len() != ranks.len()) {
        return Err(Error::DimensionMismatch("ranks and popularity differ in length".into()));
    }
    let mut rows: Vec<GroupRow> = boundaries
        .iter()
        .enumerate()
        .map(|(i, &lower)| GroupRow {
            lower,
            upper: boundaries.get(i + 1).copied(),
            count: 0,
            recall10: 0.0,
            improvement: None,
        })
        .collect();
    let mut base_hits = vec![0.0; rows.len()];
    for (k, (&rank, &pop)) in ranks.iter().zip(target_popularity).enumerate() {
        let Some(b) = rows.iter().rposition(|r| r.lower <= pop) else {
            continue;
        };
        rows[b].count += 1;
        rows[b].recall10 += metrics_from_rank(rank, 10).0;
        if let Some(base) = baseline_ranks {
            base_hits[b] += metrics_from_rank(base[k], 10).0;
        }
    }
    for (row, base) in rows.iter_mut().zip(base_hits) {
        if row.count > 0 {
            row.recall10 /= row.count as f64;
            if baseline_ranks.is_some() && base > 0.0 {
                row.improvement = Some(row.recall10 / (base / row.count as f64) - 1.0);
            }
        }
    }
    Ok(rows)
}

pub const DEFAULT_BUCKETS: [usize; 4] = [0, 5, 20, 50];

/// Ranks of every instance's target among all vocabulary items.
pub fn rank_instances(
    model: &Model,
    table: &EmbeddingTable,
    vocab: &Vocabulary,
    instances: &[EvalInstance],
    mode: FinetuneMode,
    batch_size: usize,
) -> Result<Vec<usize>> {
    if instances.is_empty() {
        return Err(Error::EmptyData("no evaluation instances".into()));
    }
    let rows = vocab.text_rows(table);
    let mut ranks = Vec::with_capacity(instances.len());
    for chunk in instances.chunks(batch_size.max(1)) {
        let contexts = chunk
            .iter()
            .map(|inst| vocab.positions(&inst.context, table))
            .collect::<Result<Vec<_>>>()?;
        let targets = chunk
            .iter()
            .map(|inst| vocab.positions(&[inst.target], table).map(|v| v[0]))
            .collect::<Result<Vec<_>>>()?;
        let scores = score_all(model, &rows, &contexts, mode)?;
        let n = vocab.len();
        for (b, &t) in targets.iter().enumerate() {
            ranks.push(rank_of_ground_truth(&scores[b * n..(b + 1) * n], t)?);
        }
    }
    Ok(ranks)
}

/// [`rank_instances`] split over `threads` scoped workers. Each worker
/// scores a contiguous slice, so the result does not depend on `threads`.
pub fn rank_instances_parallel(
    model: &Model,
    table: &EmbeddingTable,
    vocab: &Vocabulary,
    instances: &[EvalInstance],
    mode: FinetuneMode,
    batch_size: usize,
    threads: usize,
) -> Result<Vec<usize>> {
    if threads <= 1 || instances.len() < 2 {
        return rank_instances(model, table, vocab, instances, mode, batch_size);
    }
    let part = instances.len().div_ceil(threads);
    let results: Vec<Result<Vec<usize>>> = std::thread::scope(|s| {
        let handles: Vec<_> = instances
            .chunks(part)
            .map(|chunk| s.spawn(move || rank_instances(model, table, vocab, chunk, mode, batch_size)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });
    let mut ranks = Vec::with_capacity(instances.len());
    for r in results {
        ranks.extend(r?);
    }
    Ok(ranks)
}

/// Full-ranking metrics averaged over `instances`.
pub fn evaluate(
    model: &Model,
    table: &EmbeddingTable,
    vocab: &Vocabulary,
    instances: &[EvalInstance],
    mode: FinetuneMode,
) -> Result<MetricsReport> {
    let ranks = rank_instances(model, table, vocab, instances, mode, 256)?;
    MetricsReport::from_ranks(&ranks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Rng;
    use proptest::prelude::*;

    /// Position of `gt` after a stable sort by descending score in which
    /// the ground truth is placed last among equal scores.
    fn sort_oracle(scores: &[f64], gt: usize) -> usize {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap()
                .then_with(|| (a == gt).cmp(&(b == gt)))
        });
        order.iter().position(|&i| i == gt).unwrap() + 1
    }

    #[test]
    fn rank_examples() {
        assert_eq!(rank_of_ground_truth(&[0.1, 0.9, 0.3], 1).unwrap(), 1);
        assert_eq!(rank_of_ground_truth(&[0.5; 100], 37).unwrap(), 100);
        assert!(matches!(rank_of_ground_truth(&[0.5; 3], 3), Err(Error::Range(_))));
        let mut rng = Rng::new(4);
        let scores: Vec<f64> = (0..20).map(|_| rng.normal()).collect();
        for gt in 0..20 {
            assert_eq!(rank_of_ground_truth(&scores, gt).unwrap(), sort_oracle(&scores, gt));
        }
    }

    #[test]
    fn metric_examples() {
        assert_eq!(metrics_from_rank(1, 10), (1.0, 1.0));
        let (r, d) = metrics_from_rank(2, 10);
        assert_eq!(r, 1.0);
        assert!((d - 0.63093).abs() < 1e-5);
        assert!((d - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert_eq!(metrics_from_rank(11, 10), (0.0, 0.0));
        assert_eq!(metrics_from_rank(10, 10).0, 1.0);
    }

    #[test]
    fn perfect_model_scores_one() {
        let r = MetricsReport::from_ranks(&[1, 1, 1]).unwrap();
        assert!(r.recall.values().chain(r.ndcg.values()).all(|&v| v == 1.0));
        assert!(MetricsReport::from_ranks(&[]).is_err());
    }

    #[test]
    fn report_formats() {
        let r = MetricsReport::from_ranks(&[1, 2, 60, 12]).unwrap();
        let tsv = r.to_tsv();
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[1], "recall\t10\t0.500000");
        assert_eq!(lines[2], "recall\t50\t0.750000");
        assert!(r.to_json().contains("\"user_count\": 4"));
        // Exact binary ties round to even.
        assert_eq!(fmt6(0.0078125), "0.007812");
        assert_eq!(fmt6(0.0234375), "0.023438");
        assert_eq!(fmt6(1.0 / 3.0), "0.333333");
    }

    #[test]
    fn long_tail_buckets() {
        let ranks = [1, 20, 3, 100, 5];
        let pops = [0, 4, 5, 19, 70];
        let rows = long_tail_report(&ranks, &pops, &DEFAULT_BUCKETS, None).unwrap();
        assert_eq!(rows.iter().map(|r| r.count).collect::<Vec<_>>(), vec![2, 2, 0, 1]);
        assert_eq!(rows[0].recall10, 0.5);
        assert_eq!(rows[3].upper, None);
        let single = long_tail_report(&ranks, &pops, &[0], None).unwrap();
        let global = MetricsReport::from_ranks(&ranks).unwrap();
        assert_eq!(single[0].recall10, global.recall_at(10));
        assert!(long_tail_report(&ranks, &pops, &[0, 5, 5], None).is_err());
        let base = [1, 1, 50, 100, 1];
        let cmp = long_tail_report(&ranks, &pops, &DEFAULT_BUCKETS, Some(&base)).unwrap();
        assert_eq!(cmp[0].improvement, Some(-0.5));
        assert_eq!(cmp[1].improvement, None);
    }

    proptest! {
        #[test]
        fn rank_matches_sort_oracle(raw in prop::collection::vec(0u8..6, 1..40), gt_pick in 0usize..1000) {
            // Few distinct values force ties.
            let scores: Vec<f64> = raw.iter().map(|&v| f64::from(v) * 0.5).collect();
            let gt = gt_pick % scores.len();
            prop_assert_eq!(rank_of_ground_truth(&scores, gt).unwrap(), sort_oracle(&scores, gt));
        }

        #[test]
        fn rank_is_invariant_to_monotone_transforms(seed in 0u64..1000) {
            let mut rng = Rng::new(seed);
            let scores: Vec<f64> = (0..30).map(|_| rng.below(8) as f64).collect();
            let moved: Vec<f64> = scores.iter().map(|s| (s * 0.7).exp() - 3.0).collect();
            let gt = rng.below(30);
            prop_assert_eq!(rank_of_ground_truth(&scores, gt).unwrap(), rank_of_ground_truth(&moved, gt).unwrap());
        }

        #[test]
        fn report_invariants(ranks in prop::collection::vec(1usize..200, 1..60)) {
            let r = MetricsReport::from_ranks(&ranks).unwrap();
            prop_assert!(r.recall_at(10) <= r.recall_at(50));
            prop_assert!(r.ndcg_at(10) <= r.ndcg_at(50));
            for n in CUTOFFS {
                prop_assert!(r.ndcg_at(n) <= r.recall_at(n));
            }
        }
    }
}
