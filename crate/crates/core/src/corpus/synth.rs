//! Synthetic multi-domain corpora with a shared topic-level Markov chain.
//!
//! Every item belongs to a latent topic. Its text embedding is the topic
//! centroid plus the mean of a few "word" noise vectors (plus an optional
//! per-domain offset and a corpus-wide common direction). User sequences
//! walk a topic transition matrix shared by all domains and pick items
//! uniformly within the current topic. Domains have disjoint vocabularies,
//! so the only thing that transfers between them is the topic-level
//! sequential pattern expressed through the embeddings.
//!
//! The augmented embedding of an item drops each of its words independently
//! (keeping at least one) and re-averages, mirroring word-drop on real text.

use std::fmt::Write as _;

use crate::corpus::{EmbeddingTable, InteractionSequence, ItemId, ItemRef};
use crate::error::{Error, Result};
use crate::numeric::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub domains: usize,
    pub items_per_domain: usize,
    pub users_per_domain: usize,
    pub topics: usize,
    pub dim: usize,
    /// Probability of staying in the same topic.
    pub self_loop: f64,
    /// Probability of moving to the next topic `(t + 1) mod T`.
    pub next_topic: f64,
    /// Explicit row-stochastic transition matrix; overrides the two above.
    pub transition: Option<Vec<Vec<f64>>>,
    pub min_len: usize,
    pub max_len: usize,
    pub centroid_std: f64,
    /// Per-coordinate std of an item's deviation from its topic centroid.
    pub noise_std: f64,
    pub words_per_item: usize,
    pub word_drop: f64,
    pub domain_shift: f64,
    /// Norm scale of a direction shared by every embedding.
    pub anisotropy: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            domains: 4,
            items_per_domain: 1000,
            users_per_domain: 2000,
            topics: 8,
            dim: 32,
            self_loop: 0.6,
            next_topic: 0.3,
            transition: None,
            min_len: 5,
            max_len: 12,
            centroid_std: 1.0,
            noise_std: 0.5,
            words_per_item: 4,
            word_drop: 0.15,
            domain_shift: 0.3,
            anisotropy: 2.0,
            seed: 2022,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| Error::InvalidSpec(format!("line {line}: bad value `{value}` for {key}: {e}")))
}

impl SyntheticSpec {
    /// Parses `key=value` lines; `#` starts a comment. Missing keys keep
    /// their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| Error::InvalidSpec(format!("line {line}: expected key=value")))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "domains" => spec.domains = parse_value(key, value, line)?,
                "items_per_domain" => spec.items_per_domain = parse_value(key, value, line)?,
                "users_per_domain" => spec.users_per_domain = parse_value(key, value, line)?,
                "topics" => spec.topics = parse_value(key, value, line)?,
                "dim" => spec.dim = parse_value(key, value, line)?,
                "self_loop" => spec.self_loop = parse_value(key, value, line)?,
                "next_topic" => spec.next_topic = parse_value(key, value, line)?,
                "transition" => {
                    let rows = value
                        .split(';')
                        .map(|row| {
                            row.split(',')
                                .map(|v| parse_value::<f64>(key, v.trim(), line))
                                .collect::<Result<Vec<f64>>>()
                        })
                        .collect::<Result<Vec<_>>>()?;
                    spec.transition = Some(rows);
                }
                "min_len" => spec.min_len = parse_value(key, value, line)?,
                "max_len" => spec.max_len = parse_value(key, value, line)?,
                "centroid_std" => spec.centroid_std = parse_value(key, value, line)?,
                "noise_std" => spec.noise_std = parse_value(key, value, line)?,
                "words_per_item" => spec.words_per_item = parse_value(key, value, line)?,
                "word_drop" => spec.word_drop = parse_value(key, value, line)?,
                "domain_shift" => spec.domain_shift = parse_value(key, value, line)?,
                "anisotropy" => spec.anisotropy = parse_value(key, value, line)?,
                "seed" => spec.seed = parse_value(key, value, line)?,
                other => return Err(Error::InvalidSpec(format!("line {line}: unknown key `{other}`"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Renders the spec in the `key=value` form accepted by [`SyntheticSpec::parse`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "domains={}", self.domains);
        let _ = writeln!(s, "items_per_domain={}", self.items_per_domain);
        let _ = writeln!(s, "users_per_domain={}", self.users_per_domain);
        let _ = writeln!(s, "topics={}", self.topics);
        let _ = writeln!(s, "dim={}", self.dim);
        let _ = writeln!(s, "self_loop={}", self.self_loop);
        let _ = writeln!(s, "next_topic={}", self.next_topic);
        if let Some(m) = &self.transition {
            let rows: Vec<String> = m
                .iter()
                .map(|r| r.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","))
                .collect();
            let _ = writeln!(s, "transition={}", rows.join(";"));
        }
        let _ = writeln!(s, "min_len={}", self.min_len);
        let _ = writeln!(s, "max_len={}", self.max_len);
        let _ = writeln!(s, "centroid_std={}", self.centroid_std);
        let _ = writeln!(s, "noise_std={}", self.noise_std);
        let _ = writeln!(s, "words_per_item={}", self.words_per_item);
        let _ = writeln!(s, "word_drop={}", self.word_drop);
        let _ = writeln!(s, "domain_shift={}", self.domain_shift);
        let _ = writeln!(s, "anisotropy={}", self.anisotropy);
        let _ = writeln!(s, "seed={}", self.seed);
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.domains == 0 || self.items_per_domain == 0 || self.users_per_domain == 0 {
            return bad("domains, items_per_domain and users_per_domain must be positive".into());
        }
        if self.topics == 0 || self.topics > self.items_per_domain {
            return bad(format!("topics must be in 1..={}", self.items_per_domain));
        }
        if self.dim == 0 {
            return bad("dim must be positive".into());
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad(format!(
                "need 1 <= min_len <= max_len, got {}..{}",
                self.min_len, self.max_len
            ));
        }
        if self.words_per_item == 0 {
            return bad("words_per_item must be positive".into());
        }
        if !(0.0..1.0).contains(&self.word_drop) {
            return bad(format!("word_drop must be in [0, 1), got {}", self.word_drop));
        }
        if self.noise_std < 0.0 || self.centroid_std < 0.0 || self.domain_shift < 0.0 || self.anisotropy < 0.0 {
            return bad("standard deviations must be nonnegative".into());
        }
        self.transition_matrix().map(|_| ())
    }

    /// The `T×T` row-stochastic topic transition matrix.
    pub fn transition_matrix(&self) -> Result<Vec<Vec<f64>>> {
        let t = self.topics;
        let m = match &self.transition {
            Some(m) => m.clone(),
            None => {
                if t == 1 {
                    vec![vec![1.0]]
                } else {
                    let p_self = self.self_loop;
                    let p_next = self.next_topic;
                    if !(0.0..=1.0).contains(&p_self) || p_next < 0.0 || p_self + p_next > 1.0 + 1e-12 {
                        return Err(Error::InvalidSpec(format!(
                            "self_loop={p_self} and next_topic={p_next} do not form a distribution"
                        )));
                    }
                    let rest = (1.0 - p_self - p_next).max(0.0);
                    let mut m = vec![vec![0.0; t]; t];
                    for (i, row) in m.iter_mut().enumerate() {
                        row[i] += p_self;
                        if t == 2 {
                            row[(i + 1) % t] += p_next + rest;
                        } else {
                            row[(i + 1) % t] += p_next;
                            let share = rest / (t - 2) as f64;
                            for (j, v) in row.iter_mut().enumerate() {
                                if j != i && j != (i + 1) % t {
                                    *v += share;
                                }
                            }
                        }
                    }
                    m
                }
            }
        };
        if m.len() != t || m.iter().any(|r| r.len() != t) {
            return Err(Error::InvalidSpec(format!("transition matrix must be {t}×{t}")));
        }
        for (i, row) in m.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidSpec(format!(
                    "transition row {i} is not a distribution (sum {sum})"
                )));
            }
        }
        Ok(m)
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub table: EmbeddingTable,
    pub sequences: Vec<InteractionSequence>,
    /// Latent topic of each item, indexed by [`ItemId`].
    pub item_topics: Vec<usize>,
    pub transition: Vec<Vec<f64>>,
}

impl SyntheticCorpus {
    pub fn domain_name(d: usize) -> String {
        format!("domain{d}")
    }

    /// Sequences of a single domain.
    pub fn domain_sequences(&self, domain: &str) -> Vec<InteractionSequence> {
        self.sequences.iter().filter(|s| s.domain == domain).cloned().collect()
    }
}

fn gaussian_vec(rng: &mut Rng, dim: usize, std: f64) -> Vec<f64> {
    (0..dim).map(|_| rng.normal() * std).collect()
}

pub fn generate_synthetic_corpus(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let transition = spec.transition_matrix()?;
    let dim = spec.dim;

    let mut shared = Rng::stream(spec.seed, "synth.shared", 0);
    let centroids: Vec<Vec<f64>> = (0..spec.topics)
        .map(|_| gaussian_vec(&mut shared, dim, spec.centroid_std))
        .collect();
    let common = gaussian_vec(&mut shared, dim, spec.anisotropy / (dim as f64).sqrt());

    let words = spec.words_per_item;
    // Mean of `words` vectors of this std has std `noise_std`.
    let word_std = spec.noise_std * (words as f64).sqrt();

    let mut rows: Vec<f32> = Vec::with_capacity(spec.domains * spec.items_per_domain * 2 * dim);
    let mut items = Vec::with_capacity(spec.domains * spec.items_per_domain);
    let mut item_topics = Vec::with_capacity(items.capacity());
    let mut sequences = Vec::with_capacity(spec.domains * spec.users_per_domain);
    let token_width = spec.items_per_domain.to_string().len();
    let user_width = spec.users_per_domain.to_string().len();

    for d in 0..spec.domains {
        let domain = SyntheticCorpus::domain_name(d);
        let mut rng = Rng::stream(spec.seed, "synth.items", d as u64);
        let offset = gaussian_vec(&mut rng, dim, spec.domain_shift);

        let mut topic_of: Vec<usize> = (0..spec.items_per_domain).map(|j| j % spec.topics).collect();
        rng.shuffle(&mut topic_of);
        let first_id = items.len();
        let mut by_topic: Vec<Vec<ItemId>> = vec![Vec::new(); spec.topics];
        for (j, &topic) in topic_of.iter().enumerate() {
            let word_vecs: Vec<Vec<f64>> = (0..words).map(|_| gaussian_vec(&mut rng, dim, word_std)).collect();
            let mut kept: Vec<bool> = (0..words).map(|_| rng.uniform() >= spec.word_drop).collect();
            if !kept.iter().any(|&k| k) {
                kept[rng.below(words)] = true;
            }
            let embed = |mask: &dyn Fn(usize) -> bool| -> Vec<f32> {
                let n = (0..words).filter(|&w| mask(w)).count() as f64;
                (0..dim)
                    .map(|c| {
                        let mean: f64 = (0..words).filter(|&w| mask(w)).map(|w| word_vecs[w][c]).sum::<f64>() / n;
                        (centroids[topic][c] + offset[c] + common[c] + mean) as f32
                    })
                    .collect()
            };
            let row = rows.len() / dim;
            rows.extend(embed(&|_| true));
            rows.extend(embed(&|w| kept[w]));
            let id = ItemId((first_id + j) as u32);
            items.push(ItemRef {
                domain: domain.clone(),
                token: format!("item{j:0token_width$}"),
                row,
                aug_row: Some(row + 1),
            });
            item_topics.push(topic);
            by_topic[topic].push(id);
        }

        let mut rng = Rng::stream(spec.seed, "synth.sequences", d as u64);
        for u in 0..spec.users_per_domain {
            let len = spec.min_len + rng.below(spec.max_len - spec.min_len + 1);
            let mut topic = rng.below(spec.topics);
            let mut t: i64 = 1_500_000_000 + rng.below(10_000_000) as i64;
            let mut seq = InteractionSequence {
                user: format!("user{u:0user_width$}"),
                domain: domain.clone(),
                items: Vec::with_capacity(len),
                timestamps: Vec::with_capacity(len),
            };
            for step in 0..len {
                if step > 0 {
                    topic = rng.categorical(&transition[topic]);
                    t += 1 + rng.below(86_400) as i64;
                }
                let pool = &by_topic[topic];
                seq.items.push(pool[rng.below(pool.len())]);
                seq.timestamps.push(t);
            }
            sequences.push(seq);
        }
    }

    let table = EmbeddingTable::new(dim, rows, items)?;
    Ok(SyntheticCorpus {
        table,
        sequences,
        item_topics,
        transition,
    })
}
