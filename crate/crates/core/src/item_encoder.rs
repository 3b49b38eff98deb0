//! Universal item representations from text embeddings.
//!
//! Each whitening expert centers and projects a text embedding,
//! `x̃ = (x − b) · W1`. A router mixes the `G` experts with
//! `g = softmax(x · W2 + δ)`, where during pre-training
//! `δ = ε ⊙ softplus(x · W3)` with `ε ~ N(0, I)` redrawn on every call.
//! The item representation is the convex combination `v = Σ_k g_k x̃⁽ᵏ⁾`.

use crate::error::{Error, Result};
use crate::numeric::{Graph, ParamId, ParamStore, Rng, Var, INIT_STD};
use crate::scope::ParamScope;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WhiteningExpert {
    pub b: ParamId,
    pub w1: ParamId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MoEAdaptor {
    pub experts: Vec<WhiteningExpert>,
    pub w2: ParamId,
    pub w3: ParamId,
    pub d_w: usize,
    pub d_v: usize,
    /// Gaussian router noise; on only while pre-training.
    pub noise_active: bool,
}

fn expert_names(k: usize) -> (String, String) {
    (format!("adaptor.expert{k}.b"), format!("adaptor.expert{k}.w1"))
}

const W2_NAME: &str = "adaptor.router.w2";
const W3_NAME: &str = "adaptor.router.w3";

impl MoEAdaptor {
    pub fn init(store: &mut ParamStore, d_w: usize, d_v: usize, experts: usize, rng: &mut Rng) -> Result<Self> {
        if experts == 0 {
            return Err(Error::Config("the adaptor needs at least one expert".into()));
        }
        let mut list = Vec::with_capacity(experts);
        for k in 0..experts {
            let (b_name, w_name) = expert_names(k);
            let b = store.insert_filled(&b_name, &[d_w], 0.0)?;
            let w1 = store.insert_normal(&w_name, &[d_w, d_v], INIT_STD, rng)?;
            list.push(WhiteningExpert { b, w1 });
        }
        let w2 = store.insert_normal(W2_NAME, &[d_w, experts], INIT_STD, rng)?;
        let w3 = store.insert_normal(W3_NAME, &[d_w, experts], INIT_STD, rng)?;
        Ok(Self {
            experts: list,
            w2,
            w3,
            d_w,
            d_v,
            noise_active: false,
        })
    }

    /// Re-binds an adaptor to tensors already present in `store`.
    pub fn from_store(store: &ParamStore, d_w: usize, d_v: usize, experts: usize) -> Result<Self> {
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
        let mut list = Vec::with_capacity(experts);
        for k in 0..experts {
            let (b_name, w_name) = expert_names(k);
            list.push(WhiteningExpert {
                b: find(&b_name, &[d_w])?,
                w1: find(&w_name, &[d_w, d_v])?,
            });
        }
        if store.id(&expert_names(experts).0).is_some() {
            return Err(Error::Incompatible(format!(
                "checkpoint has more than {experts} experts"
            )));
        }
        Ok(Self {
            experts: list,
            w2: find(W2_NAME, &[d_w, experts])?,
            w3: find(W3_NAME, &[d_w, experts])?,
            d_w,
            d_v,
            noise_active: false,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    /// Every adaptor tensor: each expert's `b` and `W1`, then `W2`, `W3`.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.experts.iter().flat_map(|e| [e.b, e.w1]).collect();
        ids.push(self.w2);
        ids.push(self.w3);
        ids
    }

    pub fn whitening_ids(&self) -> Vec<ParamId> {
        self.experts.iter().flat_map(|e| [e.b, e.w1]).collect()
    }

    /// `(x − b) · W1` for a batch of rows `x` (`N×d_W`).
    pub fn record_whiten(&self, g: &mut Graph, scope: &ParamScope, x: Var, expert: usize) -> Var {
        let e = self.experts[expert];
        let b = scope.bind(g, e.b);
        let w1 = scope.bind(g, e.w1);
        // (x − b)·W1 as x·W1 − b·W1: with x constant, the bias gradient is
        // then a single row instead of a pass over every input row.
        let xw = g.matmul(x, w1);
        let bw = g.matmul(b, w1);
        g.sub_row(xw, bw)
    }

    /// Router weights `N×G`. Noise is drawn from `rng` only when active.
    pub fn record_gate(&self, g: &mut Graph, scope: &ParamScope, x: Var, rng: &mut Rng) -> Var {
        let w2 = scope.bind(g, self.w2);
        let mut logits = g.matmul(x, w2);
        if self.noise_active {
            let w3 = scope.bind(g, self.w3);
            let raw = g.matmul(x, w3);
            let scale = g.softplus(raw);
            let (n, k) = g.shape(scale);
            let eps: Vec<f64> = (0..n * k).map(|_| rng.normal()).collect();
            let delta = g.mul_const(scale, eps);
            logits = g.add(logits, delta);
        }
        g.softmax_rows(logits)
    }

    /// Item representations `N×d_V` for text embeddings `x` (`N×d_W`).
    pub fn record(&self, g: &mut Graph, scope: &ParamScope, x: Var, rng: &mut Rng) -> Var {
        assert_eq!(g.shape(x).1, self.d_w, "adaptor input width");
        let gate = self.record_gate(g, scope, x, rng);
        let mut out: Option<Var> = None;
        for k in 0..self.experts.len() {
            let whitened = self.record_whiten(g, scope, x, k);
            let weighted = g.scale_by_col(whitened, gate, k);
            out = Some(match out {
                None => weighted,
                Some(acc) => g.add(acc, weighted),
            });
        }
        out.expect("at least one expert")
    }

    fn check_input(&self, x: &[f32]) -> Result<()> {
        if x.len() != self.d_w {
            return Err(Error::DimensionMismatch(format!(
                "item embedding has width {}, adaptor expects {}",
                x.len(),
                self.d_w
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite item embedding".into()));
        }
        Ok(())
    }

    fn run_single(
        &self,
        store: &ParamStore,
        x: &[f32],
        f: impl FnOnce(&mut Graph, &ParamScope, Var) -> Var,
    ) -> Result<Vec<f32>> {
        self.check_input(x)?;
        let scope = ParamScope::inference(store);
        let mut g = Graph::new();
        let xv = g.constant_f32(1, self.d_w, x);
        let out = f(&mut g, &scope, xv);
        Ok(g.value(out).iter().map(|&v| v as f32).collect())
    }

    /// Whitened embedding under one expert.
    pub fn whiten(&self, store: &ParamStore, x: &[f32], expert: usize) -> Result<Vec<f32>> {
        if expert >= self.experts.len() {
            return Err(Error::InvalidParameter(format!(
                "expert {expert} of {}",
                self.experts.len()
            )));
        }
        self.run_single(store, x, |g, s, xv| self.record_whiten(g, s, xv, expert))
    }

    pub fn gate(&self, store: &ParamStore, x: &[f32], rng: &mut Rng) -> Result<Vec<f32>> {
        self.run_single(store, x, |g, s, xv| self.record_gate(g, s, xv, rng))
    }

    pub fn encode_item(&self, store: &ParamStore, x: &[f32], rng: &mut Rng) -> Result<Vec<f32>> {
        self.run_single(store, x, |g, s, xv| self.record(g, s, xv, rng))
    }

    /// Noise-free representations for many rows, row-major `N×d_V` in `f64`.
    pub fn encode_rows(&self, store: &ParamStore, rows: &[f32]) -> Vec<f64> {
        let n = rows.len() / self.d_w;
        let scope = ParamScope::inference(store);
        let mut g = Graph::new();
        let x = g.constant_f32(n, self.d_w, rows);
        let quiet = MoEAdaptor {
            noise_active: false,
            ..self.clone()
        };
        let mut unused = Rng::new(0);
        let v = quiet.record(&mut g, &scope, x, &mut unused);
        g.value(v).to_vec()
    }
}
