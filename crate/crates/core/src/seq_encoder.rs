//! Causal self-attentive encoder over universal item vectors.
//!
//! Sequences in a batch are laid out as `(batch·n)×d_V` rows with padding at
//! the end of each sequence; positions are indexed from 0 at the start of the
//! (already truncated) window. Blocks are post-norm:
//! `x ← LN(x + Drop(MHA(x)))`, `x ← LN(x + Drop(FFN(x)))` with a ReLU FFN.

use crate::error::{Error, Result};
use crate::numeric::{AttentionLayout, Graph, ParamId, ParamStore, Rng, Var, INIT_STD};
use crate::scope::ParamScope;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_v: usize,
    pub d_ff: usize,
    pub n_max: usize,
    pub dropout: f64,
}

impl TransformerConfig {
    pub fn with_width(d_v: usize) -> Self {
        Self {
            layers: 2,
            heads: 2,
            d_v,
            d_ff: 4 * d_v,
            n_max: 50,
            dropout: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_v == 0 || self.heads == 0 || !self.d_v.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} must be a positive multiple of the head count {}",
                self.d_v, self.heads
            )));
        }
        if self.n_max == 0 {
            return Err(Error::Config("n_max must be at least 1".into()));
        }
        if self.layers > 0 && self.d_ff == 0 {
            return Err(Error::Config("d_ff must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerParams {
    pub wq: ParamId,
    pub bq: ParamId,
    /// No key bias: it would shift all of a query's logits equally, which
    /// softmax ignores, so it could never receive a gradient.
    pub wk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
}

impl LayerParams {
    fn ids(&self) -> [ParamId; 15] {
        [
            self.wq,
            self.bq,
            self.wk,
            self.wv,
            self.bv,
            self.wo,
            self.bo,
            self.ln1_gamma,
            self.ln1_beta,
            self.ffn_w1,
            self.ffn_b1,
            self.ffn_w2,
            self.ffn_b2,
            self.ln2_gamma,
            self.ln2_beta,
        ]
    }
}

/// Tensor names and shapes of one block, in [`LayerParams`] field order.
fn layer_layout(l: usize, d: usize, d_ff: usize) -> Vec<(String, Vec<usize>, Init)> {
    let p = |s: &str| format!("encoder.layer{l}.{s}");
    vec![
        (p("attn.wq"), vec![d, d], Init::Normal),
        (p("attn.bq"), vec![d], Init::Zero),
        (p("attn.wk"), vec![d, d], Init::Normal),
        (p("attn.wv"), vec![d, d], Init::Normal),
        (p("attn.bv"), vec![d], Init::Zero),
        (p("attn.wo"), vec![d, d], Init::Normal),
        (p("attn.bo"), vec![d], Init::Zero),
        (p("ln1.gamma"), vec![d], Init::One),
        (p("ln1.beta"), vec![d], Init::Zero),
        (p("ffn.w1"), vec![d, d_ff], Init::Normal),
        (p("ffn.b1"), vec![d_ff], Init::Zero),
        (p("ffn.w2"), vec![d_ff, d], Init::Normal),
        (p("ffn.b2"), vec![d], Init::Zero),
        (p("ln2.gamma"), vec![d], Init::One),
        (p("ln2.beta"), vec![d], Init::Zero),
    ]
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Zero,
    One,
}

fn layer_from_ids(ids: &[ParamId]) -> LayerParams {
    LayerParams {
        wq: ids[0],
        bq: ids[1],
        wk: ids[2],
        wv: ids[3],
        bv: ids[4],
        wo: ids[5],
        bo: ids[6],
        ln1_gamma: ids[7],
        ln1_beta: ids[8],
        ffn_w1: ids[9],
        ffn_b1: ids[10],
        ffn_w2: ids[11],
        ffn_b2: ids[12],
        ln2_gamma: ids[13],
        ln2_beta: ids[14],
    }
}

pub const POSITION_NAME: &str = "encoder.position";

/// A batch of sequences given as row indices into an item-vector matrix.
#[derive(Debug, Clone, Default)]
pub struct SequenceBatch {
    /// Per sequence, rows of the item matrix, oldest first. Each must be
    /// nonempty and no longer than `n_max`.
    pub items: Vec<Vec<usize>>,
    /// Per sequence, rows of the ID-embedding matrix aligned with `items`.
    pub ids: Option<Vec<Vec<usize>>>,
}

impl SequenceBatch {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.items.iter().map(Vec::len).max().unwrap_or(0)
    }

    fn lengths(&self) -> Vec<usize> {
        self.items.iter().map(Vec::len).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceEncoder {
    pub config: TransformerConfig,
    pub position: ParamId,
    pub layers: Vec<LayerParams>,
}

impl SequenceEncoder {
    pub fn init(store: &mut ParamStore, config: TransformerConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let position = store.insert_normal(POSITION_NAME, &[config.n_max, config.d_v], INIT_STD, rng)?;
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let mut ids = Vec::with_capacity(15);
            for (name, shape, init) in layer_layout(l, config.d_v, config.d_ff) {
                ids.push(match init {
                    Init::Normal => store.insert_normal(&name, &shape, INIT_STD, rng)?,
                    Init::Zero => store.insert_filled(&name, &shape, 0.0)?,
                    Init::One => store.insert_filled(&name, &shape, 1.0)?,
                });
            }
            layers.push(layer_from_ids(&ids));
        }
        Ok(Self {
            config,
            position,
            layers,
        })
    }

    pub fn from_store(store: &ParamStore, config: TransformerConfig) -> Result<Self> {
        config.validate()?;
        let find = |name: &str, shape: &[usize]| -> Result<ParamId> {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Incompatible(format!("missing tensor `{name}`")))?;
            if store.get(id).shape() != shape {
                return Err(Error::Incompatible(format!(
                    "tensor `{name}` has shape {:?}, expected {shape:?}",
                    store.get(id).shape()
                )));
            }
            Ok(id)
        };
        let position = find(POSITION_NAME, &[config.n_max, config.d_v])?;
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let ids = layer_layout(l, config.d_v, config.d_ff)
                .into_iter()
                .map(|(name, shape, _)| find(&name, &shape))
                .collect::<Result<Vec<_>>>()?;
            layers.push(layer_from_ids(&ids));
        }
        if store.id(&format!("encoder.layer{}.attn.wq", config.layers)).is_some() {
            return Err(Error::Incompatible(format!(
                "checkpoint has more than {} layers",
                config.layers
            )));
        }
        Ok(Self {
            config,
            position,
            layers,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.position];
        for layer in &self.layers {
            ids.extend(layer.ids());
        }
        ids
    }

    fn check_batch(&self, batch: &SequenceBatch) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::DegenerateInput("empty batch".into()));
        }
        for (b, seq) in batch.items.iter().enumerate() {
            if seq.is_empty() {
                return Err(Error::DegenerateInput(format!("sequence {b} has no real positions")));
            }
            if seq.len() > self.config.n_max {
                return Err(Error::DimensionMismatch(format!(
                    "sequence {b} has length {} > n_max {}",
                    seq.len(),
                    self.config.n_max
                )));
            }
        }
        if let Some(ids) = &batch.ids {
            if ids.len() != batch.items.len() || ids.iter().zip(&batch.items).any(|(e, v)| e.len() != v.len()) {
                return Err(Error::DimensionMismatch(
                    "ID rows are not aligned with item rows".into(),
                ));
            }
        }
        Ok(())
    }

    /// `F⁰ = v_j + p_j (+ e_j)`, `(batch·n)×d_V` with zero rows at padding.
    pub fn record_input(
        &self,
        g: &mut Graph,
        scope: &ParamScope,
        item_vecs: Var,
        id_vecs: Option<Var>,
        batch: &SequenceBatch,
    ) -> Result<Var> {
        self.check_batch(batch)?;
        let n = batch.max_len();
        let padded = |rows: &[Vec<usize>], offset: bool| -> Vec<Option<usize>> {
            rows.iter()
                .flat_map(|seq| (0..n).map(move |j| seq.get(j).map(|&r| if offset { j } else { r })))
                .collect()
        };
        let v = g.gather_rows(item_vecs, padded(&batch.items, false));
        let pos_table = scope.bind(g, self.position);
        let p = g.gather_rows(pos_table, padded(&batch.items, true));
        let mut f0 = g.add(v, p);
        match (id_vecs, &batch.ids) {
            (Some(table), Some(rows)) => {
                let e = g.gather_rows(table, padded(rows, false));
                f0 = g.add(f0, e);
            }
            (None, None) => {}
            _ => {
                return Err(Error::DimensionMismatch(
                    "ID table and ID rows must be given together".into(),
                ))
            }
        }
        Ok(f0)
    }

    fn dropout(&self, g: &mut Graph, x: Var, rng: &mut Option<&mut Rng>) -> Var {
        let p = self.config.dropout;
        match rng {
            Some(r) if p > 0.0 => {
                let (m, n) = g.shape(x);
                let keep = 1.0 / (1.0 - p);
                let mask = (0..m * n).map(|_| if r.uniform() < p { 0.0 } else { keep }).collect();
                g.mul_const(x, mask)
            }
            _ => x,
        }
    }

    fn bias(&self, g: &mut Graph, scope: &ParamScope, x: Var, w: ParamId, b: ParamId) -> Var {
        let wv = scope.bind(g, w);
        let bv = scope.bind(g, b);
        let y = g.matmul(x, wv);
        g.add_row(y, bv)
    }

    /// Final hidden states for every position, `(batch·n)×d_V`. Dropout is
    /// applied only when `rng` is given.
    pub fn record_hidden(
        &self,
        g: &mut Graph,
        scope: &ParamScope,
        f0: Var,
        batch: &SequenceBatch,
        mut rng: Option<&mut Rng>,
    ) -> Var {
        let layout = AttentionLayout {
            batch: batch.len(),
            seq_len: batch.max_len(),
            heads: self.config.heads,
            lengths: batch.lengths(),
        };
        let mut x = f0;
        for layer in &self.layers {
            let q = self.bias(g, scope, x, layer.wq, layer.bq);
            let wk = scope.bind(g, layer.wk);
            let k = g.matmul(x, wk);
            let v = self.bias(g, scope, x, layer.wv, layer.bv);
            let heads = g.causal_attention(q, k, v, layout.clone());
            let attn = self.bias(g, scope, heads, layer.wo, layer.bo);
            let attn = self.dropout(g, attn, &mut rng);
            let res = g.add(x, attn);
            let (gamma, beta) = (scope.bind(g, layer.ln1_gamma), scope.bind(g, layer.ln1_beta));
            x = g.layer_norm(res, gamma, beta, LN_EPS);

            let hidden = self.bias(g, scope, x, layer.ffn_w1, layer.ffn_b1);
            let hidden = g.relu(hidden);
            let ffn = self.bias(g, scope, hidden, layer.ffn_w2, layer.ffn_b2);
            let ffn = self.dropout(g, ffn, &mut rng);
            let res = g.add(x, ffn);
            let (gamma, beta) = (scope.bind(g, layer.ln2_gamma), scope.bind(g, layer.ln2_beta));
            x = g.layer_norm(res, gamma, beta, LN_EPS);
        }
        x
    }

    /// Unit-norm sequence representations `batch×d_V`, read out at the last
    /// real position of each sequence.
    pub fn record(
        &self,
        g: &mut Graph,
        scope: &ParamScope,
        item_vecs: Var,
        id_vecs: Option<Var>,
        batch: &SequenceBatch,
        rng: Option<&mut Rng>,
    ) -> Result<Var> {
        let f0 = self.record_input(g, scope, item_vecs, id_vecs, batch)?;
        let h = self.record_hidden(g, scope, f0, batch, rng);
        let n = batch.max_len();
        let last = batch
            .items
            .iter()
            .enumerate()
            .map(|(b, s)| Some(b * n + s.len() - 1))
            .collect();
        let out = g.gather_rows(h, last);
        Ok(g.l2_normalize_rows(out))
    }

    /// Encodes one sequence given its item vectors (`n×d_V`, row-major).
    pub fn encode_sequence(
        &self,
        store: &ParamStore,
        item_vecs: &[f32],
        train_rng: Option<&mut Rng>,
    ) -> Result<Vec<f32>> {
        let d = self.config.d_v;
        if item_vecs.is_empty() {
            return Err(Error::DegenerateInput("sequence has no real positions".into()));
        }
        if !item_vecs.len().is_multiple_of(d) {
            return Err(Error::DimensionMismatch(format!(
                "{} values do not form rows of width {d}",
                item_vecs.len()
            )));
        }
        let n = item_vecs.len() / d;
        let window = &item_vecs[n.saturating_sub(self.config.n_max) * d..];
        let n = window.len() / d;
        let scope = ParamScope::inference(store);
        let mut g = Graph::new();
        let table = g.constant_f32(n, d, window);
        let batch = SequenceBatch {
            items: vec![(0..n).collect()],
            ids: None,
        };
        let s = self.record(&mut g, &scope, table, None, &batch, train_rng)?;
        Ok(g.value(s).iter().map(|&v| v as f32).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{finite_diff_check, GradCheckOptions};

    fn tiny(layers: usize, n_max: usize, seed: u64) -> (ParamStore, SequenceEncoder) {
        let config = TransformerConfig {
            layers,
            heads: 2,
            d_v: 4,
            d_ff: 6,
            n_max,
            dropout: 0.0,
        };
        let mut store = ParamStore::new();
        let enc = SequenceEncoder::init(&mut store, config, &mut Rng::new(seed)).unwrap();
        // Larger weights than the init so that every path matters.
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.get(id).name().to_string();
            if name.contains("gamma") || name.contains("beta") {
                continue;
            }
            let mut r = Rng::stream(seed, &name, 0);
            for v in store.get_mut(id).values.iter_mut() {
                *v = (r.normal() * 0.5) as f32;
            }
        }
        (store, enc)
    }

    fn random_rows(n: usize, d: usize, seed: u64) -> Vec<f32> {
        let mut r = Rng::new(seed);
        (0..n * d).map(|_| r.normal() as f32).collect()
    }

    fn norm(v: &[f32]) -> f64 {
        v.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt()
    }

    fn hidden_states(store: &ParamStore, enc: &SequenceEncoder, rows: &[f32]) -> Vec<f64> {
        let d = enc.config.d_v;
        let n = rows.len() / d;
        let scope = ParamScope::inference(store);
        let mut g = Graph::new();
        let table = g.constant_f32(n, d, rows);
        let batch = SequenceBatch {
            items: vec![(0..n).collect()],
            ids: None,
        };
        let f0 = enc.record_input(&mut g, &scope, table, None, &batch).unwrap();
        let h = enc.record_hidden(&mut g, &scope, f0, &batch, None);
        g.value(h).to_vec()
    }

    #[test]
    fn config_validation() {
        let mut c = TransformerConfig::with_width(6);
        c.heads = 4;
        assert!(c.validate().is_err());
        c.heads = 3;
        assert!(c.validate().is_ok());
        c.dropout = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn output_is_unit_norm() {
        let (store, enc) = tiny(2, 8, 1);
        for n in 1..=8 {
            let s = enc.encode_sequence(&store, &random_rows(n, 4, n as u64), None).unwrap();
            assert!((norm(&s) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_sequence_is_degenerate() {
        let (store, enc) = tiny(1, 8, 1);
        assert!(matches!(
            enc.encode_sequence(&store, &[], None),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn zero_layers_normalizes_the_last_input() {
        let (mut store, enc) = tiny(0, 4, 2);
        let rows = random_rows(3, 4, 3);
        let s = enc.encode_sequence(&store, &rows, None).unwrap();
        let p = &store.get(enc.position).values;
        let f: Vec<f64> = (0..4).map(|c| f64::from(rows[8 + c]) + f64::from(p[8 + c])).collect();
        let nf = f.iter().map(|x| x * x).sum::<f64>().sqrt();
        for c in 0..4 {
            assert!((f64::from(s[c]) - f[c] / nf).abs() < 1e-6);
        }
        // Single item with position row 0 zeroed: F⁰ = [v].
        store.get_mut(enc.position).values[..4].fill(0.0);
        let v = [3.0, 0.0, -4.0, 0.0];
        assert_eq!(
            enc.encode_sequence(&store, &v, None).unwrap(),
            vec![0.6, 0.0, -0.8, 0.0]
        );
    }

    #[test]
    fn padding_is_bit_identical() {
        let (store, enc) = tiny(2, 8, 4);
        let table = random_rows(8, 4, 5);
        let run = |items: Vec<Vec<usize>>| {
            let scope = ParamScope::inference(&store);
            let mut g = Graph::new();
            let t = g.constant_f32(8, 4, &table);
            let batch = SequenceBatch { items, ids: None };
            let s = enc.record(&mut g, &scope, t, None, &batch, None).unwrap();
            g.value(s)[..4].to_vec()
        };
        let alone = run(vec![vec![0, 1, 2]]);
        let padded = run(vec![vec![0, 1, 2], vec![3, 4, 5, 6, 7, 0, 1]]);
        assert_eq!(alone, padded);
    }

    #[test]
    fn truncation_keeps_the_most_recent_window() {
        let (store, enc) = tiny(1, 5, 6);
        let rows = random_rows(7, 4, 7);
        let full = enc.encode_sequence(&store, &rows, None).unwrap();
        let tail = enc.encode_sequence(&store, &rows[2 * 4..], None).unwrap();
        assert_eq!(full, tail);
    }

    #[test]
    fn earlier_positions_ignore_later_items() {
        let (store, enc) = tiny(2, 8, 8);
        let rows = random_rows(6, 4, 9);
        let base = hidden_states(&store, &enc, &rows);
        for k in 0..6 {
            let mut changed = rows.clone();
            for c in 0..4 {
                changed[k * 4 + c] += 1.5;
            }
            let h = hidden_states(&store, &enc, &changed);
            assert_eq!(&h[..k * 4], &base[..k * 4], "positions before {k} moved");
            assert_ne!(&h[k * 4..], &base[k * 4..]);
        }
    }

    #[test]
    fn swapping_items_changes_the_output() {
        let (store, enc) = tiny(2, 8, 10);
        let mut changed = 0;
        for trial in 0..20 {
            let rows = random_rows(5, 4, 100 + trial);
            let mut swapped = rows.clone();
            for c in 0..4 {
                swapped.swap(c, 2 * 4 + c);
            }
            let a = enc.encode_sequence(&store, &rows, None).unwrap();
            let b = enc.encode_sequence(&store, &swapped, None).unwrap();
            if a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-6) {
                changed += 1;
            }
        }
        assert_eq!(changed, 20);
    }

    #[test]
    fn dropout_only_in_training() {
        let (store, mut enc) = tiny(1, 8, 11);
        enc.config.dropout = 0.5;
        let rows = random_rows(4, 4, 12);
        let eval_a = enc.encode_sequence(&store, &rows, None).unwrap();
        let eval_b = enc.encode_sequence(&store, &rows, None).unwrap();
        assert_eq!(eval_a, eval_b);
        let train = enc.encode_sequence(&store, &rows, Some(&mut Rng::new(1))).unwrap();
        assert_ne!(train, eval_a);
    }

    #[test]
    fn zero_id_rows_leave_the_input_unchanged() {
        let (store, enc) = tiny(1, 8, 13);
        let table = random_rows(5, 4, 14);
        let scope = ParamScope::inference(&store);
        let mut g = Graph::new();
        let t = g.constant_f32(5, 4, &table);
        let zeros = g.constant(5, 4, vec![0.0; 20]);
        let plain = SequenceBatch {
            items: vec![vec![0, 2, 4]],
            ids: None,
        };
        let with_ids = SequenceBatch {
            items: vec![vec![0, 2, 4]],
            ids: Some(vec![vec![0, 2, 4]]),
        };
        let a = enc.record_input(&mut g, &scope, t, None, &plain).unwrap();
        let b = enc.record_input(&mut g, &scope, t, Some(zeros), &with_ids).unwrap();
        assert_eq!(g.value(a), g.value(b));
        let bad = SequenceBatch {
            items: vec![vec![0, 2, 4]],
            ids: Some(vec![vec![0, 2]]),
        };
        assert!(enc.record_input(&mut g, &scope, t, Some(zeros), &bad).is_err());
    }

    #[test]
    fn restored_encoder_matches() {
        let (store, enc) = tiny(2, 8, 15);
        let again = SequenceEncoder::from_store(&store, enc.config.clone()).unwrap();
        assert_eq!(again, enc);
        let mut wider = enc.config.clone();
        wider.d_ff = 7;
        assert!(matches!(
            SequenceEncoder::from_store(&store, wider),
            Err(Error::Incompatible(_))
        ));
        let mut fewer = enc.config.clone();
        fewer.layers = 1;
        assert!(SequenceEncoder::from_store(&store, fewer).is_err());
    }

    #[test]
    fn encoder_gradients_pass_finite_differences() {
        let (mut store, enc) = tiny(2, 6, 16);
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.get(id).name().to_string();
            if name.contains("gamma") || name.contains("beta") {
                let mut r = Rng::stream(17, &name, 0);
                for v in store.get_mut(id).values.iter_mut() {
                    *v += (r.normal() * 0.3) as f32;
                }
            }
        }
        let table = random_rows(6, 4, 18);
        let target: Vec<f64> = {
            let mut r = Rng::new(19);
            (0..3 * 4).map(|_| r.normal()).collect()
        };
        let batch = SequenceBatch {
            items: vec![vec![0, 1, 2, 3], vec![4, 5], vec![1, 3, 5, 0, 2, 4]],
            ids: None,
        };
        let ids = enc.param_ids();
        let report = finite_diff_check(&mut store, &ids, &GradCheckOptions::default(), |s, g| {
            let scope = ParamScope::training(s);
            let t = g.constant_f32(6, 4, &table);
            let out = enc.record(g, &scope, t, None, &batch, None)?;
            let tv = g.constant(3, 4, target.clone());
            let prod = g.mul(out, tv);
            Ok(g.sum(prod))
        })
        .unwrap();
        assert!(report.passed(), "{report}");
    }
}
