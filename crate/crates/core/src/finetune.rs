//! Parameter-efficient adaptation to a target domain.
//!
//! Inductive mode scores items by `s·v` from text alone. Transductive mode
//! adds a learned ID embedding `e` both to the encoder input and to the
//! item representation, scoring by `s̃·(v + e)`. In both modes the encoder
//! (and position table) stay frozen.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::str::FromStr;

use log::warn;

use crate::corpus::{truncate_window, EmbeddingTable, InteractionSequence, ItemId};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numeric::{softmax_t, Graph, ParamId, Rng, Var};
use crate::scope::ParamScope;
use crate::seq_encoder::SequenceBatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinetuneMode {
    Inductive,
    Transductive,
}

impl FromStr for FinetuneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inductive" => Ok(Self::Inductive),
            "transductive" => Ok(Self::Transductive),
            _ => Err(Error::Config(format!("unknown mode `{s}` (inductive, transductive)"))),
        }
    }
}

impl FinetuneMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Inductive => "inductive",
            Self::Transductive => "transductive",
        }
    }
}

/// Which adaptor tensors fine-tuning may change.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TuneScope {
    /// Whitening parameters of every expert plus the router.
    Adaptor,
    /// Whitening parameters only.
    Whitening,
}

impl FromStr for TuneScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptor" => Ok(Self::Adaptor),
            "whitening" => Ok(Self::Whitening),
            _ => Err(Error::Config(format!(
                "unknown fine-tuning scope `{s}` (adaptor, whitening)"
            ))),
        }
    }
}

impl TuneScope {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Adaptor => "adaptor",
            Self::Whitening => "whitening",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreezePlan {
    pub trainable: BTreeSet<String>,
    pub frozen: BTreeSet<String>,
}

impl FreezePlan {
    /// Everything trainable; the from-scratch baseline.
    pub fn all(model: &Model) -> Self {
        Self {
            trainable: model.params.iter().map(|(_, t)| t.name().to_string()).collect(),
            frozen: BTreeSet::new(),
        }
    }

    pub fn trainable_ids(&self, model: &Model) -> HashSet<ParamId> {
        self.trainable.iter().filter_map(|n| model.params.id(n)).collect()
    }

    pub fn frozen_ids(&self, model: &Model) -> Vec<ParamId> {
        self.frozen.iter().filter_map(|n| model.params.id(n)).collect()
    }
}

/// Splits the model's tensors into tuned and frozen sets. Transductive
/// mode requires the ID table to exist already.
pub fn make_freeze_plan(model: &Model, mode: FinetuneMode, scope: TuneScope) -> Result<FreezePlan> {
    if !model.pretrained {
        return Err(Error::NotPretrained);
    }
    let mut tuned: Vec<ParamId> = match scope {
        TuneScope::Adaptor => model.adaptor.param_ids(),
        TuneScope::Whitening => model.adaptor.whitening_ids(),
    };
    if mode == FinetuneMode::Transductive {
        let id = model
            .id_embedding
            .ok_or_else(|| Error::Config("transductive fine-tuning needs an ID embedding table".into()))?;
        tuned.push(id);
    }
    let name = |id: ParamId| model.params.get(id).name().to_string();
    let trainable: BTreeSet<String> = tuned.into_iter().map(name).collect();
    let frozen = model
        .params
        .iter()
        .map(|(_, t)| t.name().to_string())
        .filter(|n| !trainable.contains(n))
        .collect();
    Ok(FreezePlan { trainable, frozen })
}

/// Target-domain items in token order; row `i` of the ID table belongs to
/// `items[i]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    pub items: Vec<ItemId>,
    index: HashMap<ItemId, usize>,
}

impl Vocabulary {
    /// Every item occurring in `sequences`, ordered by (domain, token).
    pub fn from_sequences(sequences: &[InteractionSequence], table: &EmbeddingTable) -> Self {
        let set: BTreeSet<ItemId> = sequences.iter().flat_map(|s| s.items.iter().copied()).collect();
        let mut items: Vec<ItemId> = set.into_iter().collect();
        items.sort_by(|a, b| {
            let (x, y) = (table.item(*a), table.item(*b));
            (&x.domain, &x.token).cmp(&(&y.domain, &y.token))
        });
        Self::from_items(items)
    }

    pub fn from_items(items: Vec<ItemId>) -> Self {
        let index = items.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        Self { items, index }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn position(&self, id: ItemId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn positions(&self, ids: &[ItemId], table: &EmbeddingTable) -> Result<Vec<usize>> {
        ids.iter()
            .map(|&id| {
                self.position(id).ok_or_else(|| {
                    let item = table.item(id);
                    Error::MissingEmbedding {
                        domain: item.domain.clone(),
                        token: item.token.clone(),
                    }
                })
            })
            .collect()
    }

    /// Text embeddings of the vocabulary, row-major.
    pub fn text_rows(&self, table: &EmbeddingTable) -> Vec<f32> {
        self.items
            .iter()
            .flat_map(|&id| table.vector(id).iter().copied())
            .collect()
    }
}

/// A fine-tuning example in vocabulary positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FinetuneInstance {
    pub context: Vec<usize>,
    pub target: usize,
}

/// Prefix → next-item pairs of the training sequences, windowed to `n_max`.
pub fn build_finetune_instances(
    sequences: &[InteractionSequence],
    vocab: &Vocabulary,
    table: &EmbeddingTable,
    n_max: usize,
) -> Result<Vec<FinetuneInstance>> {
    let mut out = Vec::new();
    for seq in sequences {
        let pos = vocab.positions(&seq.items, table)?;
        for t in 1..pos.len() {
            out.push(FinetuneInstance {
                context: truncate_window(&pos[..t], n_max).to_vec(),
                target: pos[t],
            });
        }
    }
    Ok(out)
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

/// Softmax over `s·v_c` for each candidate `v_c`.
pub fn inductive_scores(s: &[f32], candidates: &[Vec<f32>]) -> Result<Vec<f32>> {
    if candidates.is_empty() {
        return Err(Error::InvalidInput("empty candidate set".into()));
    }
    if let Some(c) = candidates.iter().find(|c| c.len() != s.len()) {
        return Err(Error::DimensionMismatch(format!(
            "candidate width {} vs {}",
            c.len(),
            s.len()
        )));
    }
    let logits: Vec<f32> = candidates.iter().map(|v| dot(s, v) as f32).collect();
    softmax_t(&logits, 1.0)
}

/// Softmax over `s̃·(v_i + e_i)` for every vocabulary item.
pub fn transductive_scores(s_tilde: &[f32], item_vecs: &[Vec<f32>], id_vecs: &[Vec<f32>]) -> Result<Vec<f32>> {
    if item_vecs.len() != id_vecs.len() {
        return Err(Error::InvalidInput(format!(
            "{} items but {} ID embeddings",
            item_vecs.len(),
            id_vecs.len()
        )));
    }
    let combined: Vec<Vec<f32>> = item_vecs
        .iter()
        .zip(id_vecs)
        .map(|(v, e)| v.iter().zip(e).map(|(a, b)| a + b).collect())
        .collect();
    inductive_scores(s_tilde, &combined)
}

/// `k` distinct positions in `0..pool` other than `positive`, uniformly.
pub fn sample_negatives(positive: usize, pool: usize, k: usize, rng: &mut Rng) -> Vec<usize> {
    let others = pool.saturating_sub(usize::from(positive < pool));
    let k = if k > others {
        warn!("only {others} negatives available, {k} requested");
        others
    } else {
        k
    };
    rng.sample_indices(others, k)
        .into_iter()
        .map(|i| if i >= positive { i + 1 } else { i })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOptions {
    pub mode: FinetuneMode,
    pub negatives: usize,
    pub dropout: bool,
}

/// Records the vocabulary representations and the encoded contexts.
/// Returns `(S, item matrix)` where the item matrix is `V` or `V + E`.
pub fn record_scoring_inputs(
    g: &mut Graph,
    scope: &ParamScope,
    model: &Model,
    text_rows: &[f32],
    contexts: &[Vec<usize>],
    mode: FinetuneMode,
    dropout_rng: Option<&mut Rng>,
) -> Result<(Var, Var)> {
    let n_items = text_rows.len() / model.config.d_w;
    let x = g.constant_f32(n_items, model.config.d_w, text_rows);
    let quiet = crate::item_encoder::MoEAdaptor {
        noise_active: false,
        ..model.adaptor.clone()
    };
    let mut unused = Rng::new(0);
    let v = quiet.record(g, scope, x, &mut unused);
    let n_max = model.config.n_max;
    let items: Vec<Vec<usize>> = contexts.iter().map(|c| truncate_window(c, n_max).to_vec()).collect();
    match mode {
        FinetuneMode::Inductive => {
            let batch = SequenceBatch { items, ids: None };
            let s = model.encoder.record(g, scope, v, None, &batch, dropout_rng)?;
            Ok((s, v))
        }
        FinetuneMode::Transductive => {
            let id = model
                .id_embedding
                .ok_or_else(|| Error::Config("transductive scoring needs an ID embedding table".into()))?;
            let e = scope.bind(g, id);
            if g.shape(e).0 != n_items {
                return Err(Error::DimensionMismatch(format!(
                    "ID table has {} rows for {n_items} items",
                    g.shape(e).0
                )));
            }
            let batch = SequenceBatch {
                ids: Some(items.clone()),
                items,
            };
            let s = model.encoder.record(g, scope, v, Some(e), &batch, dropout_rng)?;
            let ve = g.add(v, e);
            Ok((s, ve))
        }
    }
}

/// Mean cross-entropy of the positives in column 0 of `logits`.
fn mean_cross_entropy_first(g: &mut Graph, logits: Var) -> Var {
    let rows = g.shape(logits).0;
    let lse = g.log_sum_exp_rows(logits);
    let pos = g.gather_cols(logits, vec![0; rows], 1);
    let terms = g.sub(lse, pos);
    let total = g.sum(terms);
    g.scale(total, 1.0 / rows as f64)
}

/// Records the fine-tuning loss: sampled softmax over the positive and `k`
/// negatives (inductive) or full softmax over the vocabulary (transductive).
#[allow(clippy::too_many_arguments)]
pub fn record_finetune_loss(
    g: &mut Graph,
    scope: &ParamScope,
    model: &Model,
    text_rows: &[f32],
    batch: &[&FinetuneInstance],
    opts: &FinetuneOptions,
    seed: u64,
    step: u64,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::EmptyData("empty fine-tuning batch".into()));
    }
    let n_items = text_rows.len() / model.config.d_w;
    let contexts: Vec<Vec<usize>> = batch.iter().map(|i| i.context.clone()).collect();
    let mut drop_rng = Rng::stream(seed, "finetune.dropout", step);
    let (s, items) = record_scoring_inputs(
        g,
        scope,
        model,
        text_rows,
        &contexts,
        opts.mode,
        opts.dropout.then_some(&mut drop_rng),
    )?;
    let all = g.matmul_bt(s, items);
    let (per_row, index) = match opts.mode {
        FinetuneMode::Inductive => {
            let mut rng = Rng::stream(seed, "negatives", step);
            let mut index = Vec::new();
            let mut per_row = 0;
            for inst in batch {
                let negs = sample_negatives(inst.target, n_items, opts.negatives, &mut rng);
                per_row = negs.len() + 1;
                index.push(inst.target);
                index.extend(negs);
            }
            (per_row, index)
        }
        FinetuneMode::Transductive => {
            // Positive first, then every other item.
            let mut index = Vec::with_capacity(batch.len() * n_items);
            for inst in batch {
                index.push(inst.target);
                index.extend((0..n_items).filter(|&i| i != inst.target));
            }
            (n_items, index)
        }
    };
    let logits = g.gather_cols(all, index, per_row);
    Ok(mean_cross_entropy_first(g, logits))
}

/// Loss of one batch with gradients left in the trainable tensors.
#[allow(clippy::too_many_arguments)]
pub fn finetune_step(
    model: &mut Model,
    trainable: &HashSet<ParamId>,
    text_rows: &[f32],
    batch: &[&FinetuneInstance],
    opts: &FinetuneOptions,
    seed: u64,
    step: u64,
) -> Result<f64> {
    model.params.zero_grad();
    let mut g = Graph::new();
    let loss = {
        let scope = ParamScope::restricted(&model.params, trainable);
        record_finetune_loss(&mut g, &scope, model, text_rows, batch, opts, seed, step)?
    };
    g.backward(loss, &mut model.params)?;
    Ok(g.scalar(loss))
}

/// Full-vocabulary scores `contexts × vocabulary` with dropout and noise off.
pub fn score_all(model: &Model, text_rows: &[f32], contexts: &[Vec<usize>], mode: FinetuneMode) -> Result<Vec<f64>> {
    let scope = ParamScope::inference(&model.params);
    let mut g = Graph::new();
    let (s, items) = record_scoring_inputs(&mut g, &scope, model, text_rows, contexts, mode, None)?;
    let all = g.matmul_bt(s, items);
    Ok(g.value(all).to_vec())
}
