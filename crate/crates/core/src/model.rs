use crate::corpus::{EmbeddingTable, ItemId};
use crate::error::{Error, Result};
use crate::item_encoder::MoEAdaptor;
use crate::numeric::{ParamId, ParamStore, Rng};
use crate::seq_encoder::{SequenceEncoder, TransformerConfig};

pub const ID_EMBEDDING_NAME: &str = "id_embedding";

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_w: usize,
    pub d_v: usize,
    pub experts: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub n_max: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_w: 768,
            d_v: 300,
            experts: 8,
            layers: 2,
            heads: 2,
            d_ff: 1200,
            n_max: 50,
            dropout: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn transformer(&self) -> TransformerConfig {
        TransformerConfig {
            layers: self.layers,
            heads: self.heads,
            d_v: self.d_v,
            d_ff: self.d_ff,
            n_max: self.n_max,
            dropout: self.dropout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_w == 0 {
            return Err(Error::Config("d_w must be positive".into()));
        }
        if self.experts == 0 {
            return Err(Error::Config("the adaptor needs at least one expert".into()));
        }
        self.transformer().validate()
    }

    /// Flat numeric form stored in checkpoints.
    pub fn to_meta(&self) -> Vec<f32> {
        [
            self.d_w,
            self.d_v,
            self.experts,
            self.layers,
            self.heads,
            self.d_ff,
            self.n_max,
        ]
        .iter()
        .map(|&v| v as f32)
        .chain(std::iter::once(self.dropout as f32))
        .collect()
    }

    pub fn from_meta(meta: &[f32]) -> Result<Self> {
        if meta.len() != 8 {
            return Err(Error::Format(format!(
                "model metadata has {} fields, expected 8",
                meta.len()
            )));
        }
        let int = |v: f32| -> Result<usize> {
            if v < 0.0 || v.fract() != 0.0 || v > 1e9 {
                return Err(Error::Format(format!("bad integer {v} in model metadata")));
            }
            Ok(v as usize)
        };
        let config = Self {
            d_w: int(meta[0])?,
            d_v: int(meta[1])?,
            experts: int(meta[2])?,
            layers: int(meta[3])?,
            heads: int(meta[4])?,
            d_ff: int(meta[5])?,
            n_max: int(meta[6])?,
            // Shortest decimal form, so 0.1 comes back as 0.1 and not 0.10000000149.
            dropout: meta[7].to_string().parse().unwrap_or(f64::NAN),
        };
        config.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(config)
    }
}

/// Adaptor, encoder and (optionally) ID embeddings over one parameter store.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub adaptor: MoEAdaptor,
    pub encoder: SequenceEncoder,
    pub id_embedding: Option<ParamId>,
    /// True when the weights come from a pre-training run.
    pub pretrained: bool,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = Rng::stream(seed, "init", 0);
        let adaptor = MoEAdaptor::init(&mut params, config.d_w, config.d_v, config.experts, &mut rng)?;
        let encoder = SequenceEncoder::init(&mut params, config.transformer(), &mut rng)?;
        Ok(Self {
            config,
            params,
            adaptor,
            encoder,
            id_embedding: None,
            pretrained: false,
        })
    }

    /// Binds a model to tensors restored from a checkpoint.
    pub fn from_params(config: ModelConfig, params: ParamStore, pretrained: bool) -> Result<Self> {
        config.validate()?;
        let adaptor = MoEAdaptor::from_store(&params, config.d_w, config.d_v, config.experts)?;
        let encoder = SequenceEncoder::from_store(&params, config.transformer())?;
        let id_embedding = params.id(ID_EMBEDDING_NAME);
        if let Some(id) = id_embedding {
            let shape = params.get(id).shape();
            if shape.len() != 2 || shape[1] != config.d_v {
                return Err(Error::Incompatible(format!("ID embedding shape {shape:?}")));
            }
        }
        Ok(Self {
            config,
            params,
            adaptor,
            encoder,
            id_embedding,
            pretrained,
        })
    }

    /// Adds a zero ID-embedding table with one row per vocabulary item.
    pub fn add_id_embedding(&mut self, vocab: usize) -> Result<ParamId> {
        if let Some(id) = self.id_embedding {
            if self.params.get(id).shape() == [vocab, self.config.d_v] {
                return Ok(id);
            }
            return Err(Error::Incompatible(format!(
                "existing ID embedding has shape {:?}, vocabulary has {vocab} items",
                self.params.get(id).shape()
            )));
        }
        let id = self
            .params
            .insert_filled(ID_EMBEDDING_NAME, &[vocab, self.config.d_v], 0.0)?;
        self.id_embedding = Some(id);
        Ok(id)
    }

    /// Parameters of the pre-trained architecture (adaptor and encoder).
    pub fn backbone_ids(&self) -> Vec<ParamId> {
        let mut ids = self.adaptor.param_ids();
        ids.extend(self.encoder.param_ids());
        ids
    }

    /// Noise-free item representations for `items`, row-major `f64`.
    pub fn item_vectors(&self, table: &EmbeddingTable, items: &[ItemId]) -> Vec<f64> {
        let mut rows = Vec::with_capacity(items.len() * self.config.d_w);
        for &id in items {
            rows.extend_from_slice(table.vector(id));
        }
        self.adaptor.encode_rows(&self.params, &rows)
    }

    pub fn check_table(&self, table: &EmbeddingTable) -> Result<()> {
        if table.dim() != self.config.d_w {
            return Err(Error::DimensionMismatch(format!(
                "embedding table width {} differs from model input width {}",
                table.dim(),
                self.config.d_w
            )));
        }
        Ok(())
    }
}
