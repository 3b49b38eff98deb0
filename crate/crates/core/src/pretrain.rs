//! Multi-domain contrastive pre-training.
//!
//! The objective is `ℓ_SI + λ·ℓ_SS`. `ℓ_SI` contrasts each context with its
//! true next item against the other items of the batch; `ℓ_SS` contrasts each
//! context with an augmented copy of itself against the other (original)
//! contexts of the batch.

use std::collections::BTreeMap;
use std::str::FromStr;

use log::warn;

use crate::corpus::{truncate_window, EmbeddingTable, InteractionSequence, ItemId, ItemRef};
use crate::error::{Error, Result};
use crate::item_encoder::MoEAdaptor;
use crate::model::Model;
use crate::numeric::{Graph, Rng, Var};
use crate::scope::ParamScope;
use crate::seq_encoder::{SequenceBatch, SequenceEncoder};

/// One next-item prediction: the (windowed) context and the item after it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PretrainInstance {
    pub domain: String,
    pub context: Vec<ItemId>,
    pub target: ItemId,
}

/// Every prefix → next-item pair of every sequence, contexts truncated to
/// the most recent `n_max` items. A sequence of length `n` yields `n − 1`.
pub fn build_instances(sequences: &[InteractionSequence], n_max: usize) -> Vec<PretrainInstance> {
    let mut out = Vec::new();
    for seq in sequences {
        for t in 1..seq.items.len() {
            out.push(PretrainInstance {
                domain: seq.domain.clone(),
                context: truncate_window(&seq.items[..t], n_max).to_vec(),
                target: seq.items[t],
            });
        }
    }
    out
}

/// Shuffles `0..count` and cuts it into batches of at most `batch_size`.
pub fn epoch_batches(count: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..count).collect();
    rng.shuffle(&mut order);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Drops `floor(ratio·n)` uniformly chosen items, keeping order and at
/// least one item.
pub fn item_drop(items: &[ItemId], ratio: f64, rng: &mut Rng) -> Vec<ItemId> {
    let n = items.len();
    if n <= 1 || ratio <= 0.0 {
        return items.to_vec();
    }
    let k = ((ratio * n as f64).floor() as usize).min(n - 1);
    if k == 0 {
        return items.to_vec();
    }
    let mut dropped = vec![false; n];
    for i in rng.sample_indices(n, k) {
        dropped[i] = true;
    }
    items
        .iter()
        .zip(&dropped)
        .filter(|(_, &d)| !d)
        .map(|(&i, _)| i)
        .collect()
}

/// Table row holding the word-dropped text embedding of `item`.
pub fn word_drop_row(item: &ItemRef) -> usize {
    match item.aug_row {
        Some(r) => r,
        None => {
            warn!(
                "item ({}, {}) has no augmented embedding; using the original",
                item.domain, item.token
            );
            item.row
        }
    }
}

pub fn word_drop_lookup<'a>(item: &ItemRef, table: &'a EmbeddingTable) -> &'a [f32] {
    table.row(word_drop_row(item))
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    Ok(())
}

/// `−Σ_j log softmax_j(ŝ_j·V̂ᵀ/τ)[j]` with rows of `S` and `V` normalized.
pub fn record_seq_item_loss(g: &mut Graph, s: Var, v: Var, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    if g.shape(s) != g.shape(v) {
        return Err(Error::DimensionMismatch(format!(
            "S is {:?}, V is {:?}",
            g.shape(s),
            g.shape(v)
        )));
    }
    let sn = g.l2_normalize_rows(s);
    let vn = g.l2_normalize_rows(v);
    Ok(info_nce(g, sn, vn, vn, tau))
}

/// `−Σ_j log[exp(ŝ_j·s̃_j/τ) / Σ_j' exp(ŝ_j·ŝ_j'/τ)]`; the denominator runs
/// over the original contexts.
pub fn record_seq_seq_loss(g: &mut Graph, s: Var, s_aug: Var, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    if g.shape(s) != g.shape(s_aug) {
        return Err(Error::DimensionMismatch(format!(
            "S is {:?}, augmented S is {:?}",
            g.shape(s),
            g.shape(s_aug)
        )));
    }
    let sn = g.l2_normalize_rows(s);
    let an = g.l2_normalize_rows(s_aug);
    Ok(info_nce(g, sn, an, sn, tau))
}

fn info_nce(g: &mut Graph, anchor: Var, positive: Var, negatives: Var, tau: f64) -> Var {
    let logits = g.matmul_bt(anchor, negatives);
    let logits = g.scale(logits, 1.0 / tau);
    let lse = g.log_sum_exp_rows(logits);
    let pos = g.row_dot(anchor, positive);
    let pos = g.scale(pos, 1.0 / tau);
    let terms = g.sub(lse, pos);
    g.sum(terms)
}

fn eval_loss(s: &[f64], v: &[f64], d: usize, tau: f64, f: fn(&mut Graph, Var, Var, f64) -> Result<Var>) -> Result<f64> {
    if d == 0 || !s.len().is_multiple_of(d) || s.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "{} values do not form rows of width {d}",
            s.len()
        )));
    }
    let b = s.len() / d;
    let mut g = Graph::new();
    let sv = g.constant(b, d, s.to_vec());
    let vv = g.constant(v.len() / d, d, v.to_vec());
    let loss = f(&mut g, sv, vv, tau)?;
    Ok(g.scalar(loss))
}

/// Sequence–item loss of row-major `S`, `V` (`B×d`).
pub fn seq_item_loss(s: &[f64], v: &[f64], d: usize, tau: f64) -> Result<f64> {
    eval_loss(s, v, d, tau, record_seq_item_loss)
}

/// Sequence–sequence loss of row-major `S`, `S̃` (`B×d`).
pub fn seq_seq_loss(s: &[f64], s_aug: &[f64], d: usize, tau: f64) -> Result<f64> {
    eval_loss(s, s_aug, d, tau, record_seq_seq_loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Augmentation {
    /// Item drop followed by word-drop embeddings for the surviving items.
    Both,
    ItemDrop,
    WordDrop,
}

impl FromStr for Augmentation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(Self::Both),
            "item_drop" => Ok(Self::ItemDrop),
            "word_drop" => Ok(Self::WordDrop),
            _ => Err(Error::Config(format!(
                "unknown augmentation `{s}` (both, item_drop, word_drop)"
            ))),
        }
    }
}

impl Augmentation {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Both => "both",
            Self::ItemDrop => "item_drop",
            Self::WordDrop => "word_drop",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOptions {
    pub tau: f64,
    pub lambda: f64,
    pub item_drop_ratio: f64,
    pub augmentation: Augmentation,
    pub gate_noise: bool,
    pub dropout: bool,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            tau: 0.07,
            lambda: 1e-3,
            item_drop_ratio: 0.2,
            augmentation: Augmentation::Both,
            gate_noise: true,
            dropout: true,
        }
    }
}

impl PretrainOptions {
    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau)?;
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "lambda must be nonnegative, got {}",
                self.lambda
            )));
        }
        if !(0.0..1.0).contains(&self.item_drop_ratio) {
            return Err(Error::Config(format!(
                "item drop ratio {} outside [0, 1)",
                self.item_drop_ratio
            )));
        }
        Ok(())
    }
}

/// Recorded pre-training loss and its parts.
#[derive(Debug, Clone, Copy)]
pub struct PretrainLossVars {
    pub total: Var,
    pub seq_item: Var,
    pub seq_seq: Option<Var>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainLoss {
    pub total: f64,
    pub seq_item: f64,
    pub seq_seq: f64,
}

/// Records `ℓ_SI + λ·ℓ_SS` for one batch. Random draws (gate noise,
/// augmentation, dropout) come from streams keyed by `seed` and `step`.
#[allow(clippy::too_many_arguments)]
pub fn record_pretrain_loss(
    g: &mut Graph,
    scope: &ParamScope,
    adaptor: &MoEAdaptor,
    encoder: &SequenceEncoder,
    table: &EmbeddingTable,
    batch: &[&PretrainInstance],
    opts: &PretrainOptions,
    seed: u64,
    step: u64,
) -> Result<PretrainLossVars> {
    opts.validate()?;
    if batch.is_empty() {
        return Err(Error::EmptyData("empty pre-training batch".into()));
    }
    let with_aug = opts.lambda > 0.0;
    let mut aug_rng = Rng::stream(seed, "augment", step);
    let augmented: Vec<Vec<(ItemId, bool)>> = if with_aug {
        batch
            .iter()
            .map(|inst| {
                let ratio = match opts.augmentation {
                    Augmentation::WordDrop => 0.0,
                    _ => opts.item_drop_ratio,
                };
                let words = opts.augmentation != Augmentation::ItemDrop;
                item_drop(&inst.context, ratio, &mut aug_rng)
                    .into_iter()
                    .map(|id| (id, words))
                    .collect()
            })
            .collect()
    } else {
        Vec::new()
    };

    // Unique embedding-table rows; the adaptor runs once per row.
    let mut rows: BTreeMap<usize, usize> = BTreeMap::new();
    let row_of = |id: ItemId, words: bool| {
        let item = table.item(id);
        if words {
            word_drop_row(item)
        } else {
            item.row
        }
    };
    for inst in batch {
        for &id in inst.context.iter().chain(std::iter::once(&inst.target)) {
            rows.insert(row_of(id, false), 0);
        }
    }
    for seq in &augmented {
        for &(id, words) in seq {
            rows.insert(row_of(id, words), 0);
        }
    }
    let d_w = table.dim();
    let mut x = Vec::with_capacity(rows.len() * d_w);
    for (slot, (&r, idx)) in rows.iter_mut().enumerate() {
        *idx = slot;
        x.extend_from_slice(table.row(r));
    }
    let xv = g.constant_f32(rows.len(), d_w, &x);
    let noisy = MoEAdaptor {
        noise_active: opts.gate_noise,
        ..adaptor.clone()
    };
    let mut noise_rng = Rng::stream(seed, "gate_noise", step);
    let v_all = noisy.record(g, scope, xv, &mut noise_rng);

    let contexts = SequenceBatch {
        items: batch
            .iter()
            .map(|inst| inst.context.iter().map(|&id| rows[&row_of(id, false)]).collect())
            .collect(),
        ids: None,
    };
    let mut drop_rng = Rng::stream(seed, "dropout", step);
    let s = encoder.record(g, scope, v_all, None, &contexts, opts.dropout.then_some(&mut drop_rng))?;
    let targets = batch
        .iter()
        .map(|inst| Some(rows[&row_of(inst.target, false)]))
        .collect();
    let v = g.gather_rows(v_all, targets);
    let seq_item = record_seq_item_loss(g, s, v, opts.tau)?;
    if !with_aug {
        return Ok(PretrainLossVars {
            total: seq_item,
            seq_item,
            seq_seq: None,
        });
    }
    let aug_batch = SequenceBatch {
        items: augmented
            .iter()
            .map(|seq| seq.iter().map(|&(id, w)| rows[&row_of(id, w)]).collect())
            .collect(),
        ids: None,
    };
    let mut drop_aug_rng = Rng::stream(seed, "dropout.aug", step);
    let s_aug = encoder.record(
        g,
        scope,
        v_all,
        None,
        &aug_batch,
        opts.dropout.then_some(&mut drop_aug_rng),
    )?;
    let seq_seq = record_seq_seq_loss(g, s, s_aug, opts.tau)?;
    let weighted = g.scale(seq_seq, opts.lambda);
    let total = g.add(seq_item, weighted);
    Ok(PretrainLossVars {
        total,
        seq_item,
        seq_seq: Some(seq_seq),
    })
}

/// Computes the pre-training loss of `batch` and leaves its gradient in
/// the model's parameter store.
pub fn pretrain_step(
    model: &mut Model,
    table: &EmbeddingTable,
    batch: &[&PretrainInstance],
    opts: &PretrainOptions,
    seed: u64,
    step: u64,
) -> Result<PretrainLoss> {
    model.params.zero_grad();
    let mut g = Graph::new();
    let vars = {
        let scope = ParamScope::training(&model.params);
        record_pretrain_loss(
            &mut g,
            &scope,
            &model.adaptor,
            &model.encoder,
            table,
            batch,
            opts,
            seed,
            step,
        )?
    };
    g.backward(vars.total, &mut model.params)?;
    Ok(PretrainLoss {
        total: g.scalar(vars.total),
        seq_item: g.scalar(vars.seq_item),
        seq_seq: vars.seq_seq.map_or(0.0, |v| g.scalar(v)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, SyntheticSpec};
    use crate::model::ModelConfig;
    use crate::numeric::{finite_diff_check, GradCheckOptions};
    use proptest::{prop_assert, proptest};

    fn ids(v: &[u32]) -> Vec<ItemId> {
        v.iter().map(|&i| ItemId(i)).collect()
    }

    #[test]
    fn item_drop_counts() {
        let mut rng = Rng::new(1);
        let seq = ids(&[0, 1, 2, 3, 4, 5, 6, 7, 8, 9]);
        assert_eq!(item_drop(&seq, 0.0, &mut rng), seq);
        assert_eq!(item_drop(&ids(&[4]), 0.9, &mut rng), ids(&[4]));
        let out = item_drop(&seq, 0.2, &mut rng);
        assert_eq!(out.len(), 8);
        assert!(out.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(item_drop(&ids(&[1, 2]), 0.99, &mut rng).len(), 1);
    }

    #[test]
    fn single_row_item_loss_is_zero() {
        assert_eq!(seq_item_loss(&[0.6, 0.8], &[1.0, 0.0], 2, 0.07).unwrap(), 0.0);
        assert_eq!(seq_seq_loss(&[0.6, 0.8], &[0.6, 0.8], 2, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn identical_rows_give_b_log_b() {
        for b in 1..6 {
            let s: Vec<f64> = (0..b).flat_map(|_| [0.0, 1.0, 0.0]).collect();
            let v: Vec<f64> = (0..b).flat_map(|_| [1.0, 2.0, 2.0]).collect();
            let loss = seq_item_loss(&s, &v, 3, 0.07).unwrap();
            let expect = b as f64 * (b as f64).ln();
            assert!((loss - expect).abs() < 1e-12, "B={b}: {loss} vs {expect}");
        }
    }

    #[test]
    fn opposite_pair_seq_seq_example() {
        // s̃ = s, s_1·s_2 = −1, τ = 1: each term is −log(e/(e + e⁻¹)).
        let s = [1.0, 0.0, -1.0, 0.0];
        let loss = seq_seq_loss(&s, &s, 2, 1.0).unwrap();
        let e = std::f64::consts::E;
        let term = -(e / (e + 1.0 / e)).ln();
        assert!((loss - 2.0 * term).abs() < 1e-12);
        assert!((loss - 0.2539).abs() < 5e-5);
    }

    #[test]
    fn two_row_item_loss_matches_closed_form() {
        let s = [1.0, 0.0, 0.0, 1.0];
        let v = [0.8, 0.6, 0.28, 0.96];
        let tau = 0.5f64;
        let m = [[0.8f64, 0.28], [0.6, 0.96]];
        let expect: f64 = (0..2)
            .map(|j| {
                let z: f64 = m[j].iter().map(|x| (x / tau).exp()).sum();
                -((m[j][j] / tau).exp() / z).ln()
            })
            .sum();
        assert!((seq_item_loss(&s, &v, 2, tau).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn bad_temperature_is_rejected() {
        assert!(matches!(
            seq_item_loss(&[1.0], &[1.0], 1, 0.0),
            Err(Error::InvalidParameter(_))
        ));
        assert!(seq_seq_loss(&[1.0], &[1.0], 1, -1.0).is_err());
    }

    proptest! {
        #[test]
        fn losses_are_nonnegative_and_permutation_invariant(seed in 0u64..5000, b in 1usize..7) {
            let d = 5;
            let mut r = Rng::new(seed);
            let s: Vec<f64> = (0..b * d).map(|_| r.normal()).collect();
            let v: Vec<f64> = (0..b * d).map(|_| r.normal()).collect();
            let si = seq_item_loss(&s, &v, d, 0.2).unwrap();
            let ss = seq_seq_loss(&s, &v, d, 0.2).unwrap();
            prop_assert!(si >= -1e-12 && ss >= -1e-12);
            let mut perm: Vec<usize> = (0..b).collect();
            r.shuffle(&mut perm);
            let p = |m: &[f64]| perm.iter().flat_map(|&i| m[i * d..(i + 1) * d].to_vec()).collect::<Vec<_>>();
            prop_assert!((seq_item_loss(&p(&s), &p(&v), d, 0.2).unwrap() - si).abs() < 1e-9);
            prop_assert!((seq_seq_loss(&p(&s), &p(&v), d, 0.2).unwrap() - ss).abs() < 1e-9);
        }

        #[test]
        fn positive_score_monotonicity(seed in 0u64..2000) {
            // Loss as a function of the score matrix; raise one diagonal entry.
            let b = 4;
            let mut r = Rng::new(seed);
            let m: Vec<f64> = (0..b * b).map(|_| r.normal()).collect();
            let loss = |m: &[f64]| -> f64 {
                (0..b).map(|j| {
                    let row = &m[j * b..(j + 1) * b];
                    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln() - row[j]
                }).sum()
            };
            // The recorded op chain at tau = 1 against the closed form.
            let mut g = Graph::new();
            let logits = g.constant(b, b, m.clone());
            let lse = g.log_sum_exp_rows(logits);
            let diag: Vec<usize> = (0..b).collect();
            let pos = g.gather_cols(logits, diag, 1);
            let t = g.sub(lse, pos);
            let total = g.sum(t);
            prop_assert!((g.scalar(total) - loss(&m)).abs() < 1e-9);
            let k = (seed as usize) % b;
            let mut up = m.clone();
            up[k * b + k] += 0.1;
            prop_assert!(loss(&up) < loss(&m));
        }
    }

    fn tiny_setup() -> (Model, EmbeddingTable, Vec<PretrainInstance>) {
        let spec = SyntheticSpec {
            domains: 2,
            items_per_domain: 30,
            users_per_domain: 20,
            dim: 6,
            min_len: 3,
            max_len: 7,
            ..SyntheticSpec::default()
        };
        let corpus = generate_synthetic_corpus(&spec).unwrap();
        let config = ModelConfig {
            d_w: 6,
            d_v: 4,
            experts: 2,
            layers: 1,
            heads: 2,
            d_ff: 6,
            n_max: 5,
            dropout: 0.0,
        };
        let model = Model::new(config, 5).unwrap();
        let inst = build_instances(&corpus.sequences, 5);
        (model, corpus.table, inst)
    }

    #[test]
    fn instances_per_sequence() {
        let s = InteractionSequence {
            user: "u".into(),
            domain: "d".into(),
            items: ids(&[1, 2, 3, 4, 5, 6, 7]),
            timestamps: (0..7).collect(),
        };
        let inst = build_instances(std::slice::from_ref(&s), 3);
        assert_eq!(inst.len(), 6);
        assert_eq!(inst[0].context, ids(&[1]));
        assert_eq!(inst[5].context, ids(&[4, 5, 6]));
        assert_eq!(inst[5].target, ItemId(7));
    }

    #[test]
    fn lambda_zero_is_the_item_loss() {
        let (mut model, table, inst) = tiny_setup();
        let batch: Vec<&PretrainInstance> = inst.iter().take(8).collect();
        let opts = PretrainOptions {
            lambda: 0.0,
            ..PretrainOptions::default()
        };
        let loss = pretrain_step(&mut model, &table, &batch, &opts, 1, 0).unwrap();
        assert_eq!(loss.total, loss.seq_item);
        assert_eq!(loss.seq_seq, 0.0);
        let again = pretrain_step(&mut model, &table, &batch, &opts, 1, 0).unwrap();
        assert_eq!(loss, again);
        let with = pretrain_step(&mut model, &table, &batch, &PretrainOptions::default(), 1, 0).unwrap();
        assert!(with.seq_seq > 0.0);
        assert!((with.total - (with.seq_item + 1e-3 * with.seq_seq)).abs() < 1e-12);
    }

    #[test]
    fn gradients_reach_adaptor_encoder_and_positions() {
        let (mut model, table, inst) = tiny_setup();
        let batch: Vec<&PretrainInstance> = inst.iter().take(8).collect();
        pretrain_step(&mut model, &table, &batch, &PretrainOptions::default(), 2, 0).unwrap();
        for id in [
            model.adaptor.experts[0].w1,
            model.adaptor.w2,
            model.adaptor.w3,
            model.encoder.position,
        ] {
            let t = model.params.get(id);
            assert!(t.grad.iter().any(|&x| x != 0.0), "{} has no gradient", t.name());
        }
    }

    #[test]
    fn full_loss_gradcheck() {
        let (mut model, table, inst) = tiny_setup();
        let batch: Vec<&PretrainInstance> = inst.iter().skip(3).take(6).collect();
        let opts = PretrainOptions {
            lambda: 0.5,
            gate_noise: false,
            dropout: false,
            tau: 0.2,
            ..PretrainOptions::default()
        };
        let ids: Vec<_> = model.params.ids().collect();
        // Init-scale weights make the normalizations too curved for ε = 1e-3.
        for &id in &ids {
            let name = model.params.get(id).name().to_string();
            let mut r = Rng::stream(4, &name, 0);
            for v in model.params.get_mut(id).values.iter_mut() {
                *v += (r.normal() * 0.3) as f32;
            }
        }
        let (adaptor, encoder) = (model.adaptor.clone(), model.encoder.clone());
        let report = finite_diff_check(&mut model.params, &ids, &GradCheckOptions::default(), |s, g| {
            let scope = ParamScope::training(s);
            Ok(record_pretrain_loss(g, &scope, &adaptor, &encoder, &table, &batch, &opts, 3, 0)?.total)
        })
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    fn ln_choose(n: usize, k: usize) -> f64 {
        if k > n {
            return f64::NEG_INFINITY;
        }
        (0..k).map(|i| ((n - i) as f64).ln() - ((i + 1) as f64).ln()).sum()
    }

    #[test]
    fn shuffled_batches_mix_domains_at_the_hypergeometric_rate() {
        let sizes = [30usize, 10];
        let total: usize = sizes.iter().sum();
        let b = 4;
        let p_single: f64 = sizes
            .iter()
            .map(|&n| (ln_choose(n, b) - ln_choose(total, b)).exp())
            .sum();
        let p_mixed = 1.0 - p_single;
        let domain = |i: usize| usize::from(i >= sizes[0]);
        let draws = 1000;
        let mut mixed = 0;
        let mut rng = Rng::new(77);
        for _ in 0..draws {
            let batches = epoch_batches(total, b, &mut rng);
            let first = &batches[0];
            if first.iter().any(|&i| domain(i) != domain(first[0])) {
                mixed += 1;
            }
        }
        let mean = draws as f64 * p_mixed;
        let sd = (draws as f64 * p_mixed * (1.0 - p_mixed)).sqrt();
        assert!((mixed as f64 - mean).abs() <= 3.0 * sd, "{mixed} vs {mean} ± {sd}");
    }

    #[test]
    fn epoch_batch_count() {
        let batches = epoch_batches(10, 4, &mut Rng::new(0));
        assert_eq!(batches.len(), 3);
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn word_drop_rows_differ_in_the_fixture() {
        let (_, table, _) = tiny_setup();
        let item = &table.items()[0];
        assert_ne!(word_drop_lookup(item, &table), table.row(item.row));
        let bare = ItemRef {
            aug_row: None,
            ..item.clone()
        };
        assert_eq!(word_drop_lookup(&bare, &table), table.row(item.row));
    }
}
