use std::collections::HashMap;
use std::path::Path;

use log::{debug, info};

use crate::checkpoint::{Checkpoint, Progress, Stage};
use crate::corpus::{five_core_filter, leave_one_out_split, EmbeddingTable, InteractionSequence, SplitCorpus};
use crate::error::{Error, Result};
use crate::eval::{long_tail_report, popularity, rank_instances_parallel, MetricsReport, DEFAULT_BUCKETS};
use crate::finetune::{
    build_finetune_instances, finetune_step, make_freeze_plan, FinetuneInstance, FinetuneMode, FinetuneOptions,
    FreezePlan, TuneScope, Vocabulary,
};
use crate::model::Model;
use crate::numeric::{ParamId, ParamStore, Rng};
use crate::pretrain::{build_instances, epoch_batches, pretrain_step, Augmentation, PretrainInstance, PretrainOptions};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Fixed epoch count when pre-training; the upper bound when fine-tuning.
    pub epochs: usize,
    pub patience: usize,
    pub tau: f64,
    pub lambda: f64,
    pub item_drop_ratio: f64,
    pub augmentation: Augmentation,
    pub gate_noise: bool,
    pub negatives: usize,
    pub mode: FinetuneMode,
    pub finetune_scope: TuneScope,
    /// Save every this many pre-training epochs (0: only at the end).
    pub checkpoint_interval: usize,
    pub eval_batch: usize,
    pub long_tail_buckets: Vec<usize>,
    pub seed: u64,
    /// Evaluation workers.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 256,
            epochs: 30,
            patience: 10,
            tau: 0.07,
            lambda: 1e-3,
            item_drop_ratio: 0.2,
            augmentation: Augmentation::Both,
            gate_noise: true,
            negatives: 99,
            mode: FinetuneMode::Inductive,
            finetune_scope: TuneScope::Adaptor,
            checkpoint_interval: 0,
            eval_batch: 256,
            long_tail_buckets: DEFAULT_BUCKETS.to_vec(),
            seed: 2022,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.eval_batch == 0 {
            return Err(Error::Config("batch sizes must be at least 1".into()));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.long_tail_buckets.is_empty() || self.long_tail_buckets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "long-tail buckets must be strictly increasing: {:?}",
                self.long_tail_buckets
            )));
        }
        self.pretrain_options().validate()
    }

    pub fn pretrain_options(&self) -> PretrainOptions {
        PretrainOptions {
            tau: self.tau,
            lambda: self.lambda,
            item_drop_ratio: self.item_drop_ratio,
            augmentation: self.augmentation,
            gate_noise: self.gate_noise,
            dropout: true,
        }
    }
}

/// Adam with bias correction; moments are kept per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed steps.
    pub t: u64,
    pub m: HashMap<ParamId, Vec<f32>>,
    pub v: HashMap<ParamId, Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// One update of the tensors `ids` from their accumulated gradients.
    pub fn step(&mut self, store: &mut ParamStore, ids: &[ParamId]) {
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for &id in ids {
            let tensor = store.get_mut(id);
            let n = tensor.len();
            let m = self.m.entry(id).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(id).or_insert_with(|| vec![0.0; n]);
            for i in 0..n {
                let g = f64::from(tensor.grad[i]);
                let mi = self.beta1 * f64::from(m[i]) + (1.0 - self.beta1) * g;
                let vi = self.beta2 * f64::from(v[i]) + (1.0 - self.beta2) * g * g;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = self.lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
                tensor.values[i] = (f64::from(tensor.values[i]) - update) as f32;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EarlyStop {
    pub stop: bool,
    /// 1-based epoch of the best value so far.
    pub best_epoch: usize,
}

/// Stops once `patience` consecutive epochs fail to strictly beat the best.
pub fn early_stop(history: &[f64], patience: usize) -> EarlyStop {
    let mut best_epoch = 0;
    for (i, &v) in history.iter().enumerate() {
        if i == 0 || v > history[best_epoch] {
            best_epoch = i;
        }
    }
    EarlyStop {
        stop: !history.is_empty() && history.len() - 1 - best_epoch >= patience,
        best_epoch: best_epoch + 1,
    }
}

/// Pre-training log.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PretrainRun {
    pub instances: usize,
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
}

/// Source-domain instances: 5-core filtering, then the training part of
/// the leave-one-out split of every domain.
pub fn source_instances(sequences: &[InteractionSequence], n_max: usize) -> Vec<PretrainInstance> {
    let filtered = five_core_filter(sequences);
    let split = leave_one_out_split(&filtered, 3);
    build_instances(&split.train, n_max)
}

/// Fixed-epoch pre-training from `progress.epoch` to `config.epochs`.
/// Batches and every random draw are keyed by epoch and step, so a run
/// resumed from a checkpoint continues exactly as an uninterrupted one.
pub fn run_pretrain(
    model: &mut Model,
    adam: &mut Adam,
    progress: &mut Progress,
    table: &EmbeddingTable,
    instances: &[PretrainInstance],
    config: &TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<PretrainRun> {
    config.validate()?;
    model.check_table(table)?;
    if instances.is_empty() {
        return Err(Error::EmptyData("no pre-training instances".into()));
    }
    let opts = config.pretrain_options();
    let ids: Vec<ParamId> = model.params.ids().collect();
    adam.lr = config.lr;
    let mut run = PretrainRun {
        instances: instances.len(),
        ..Default::default()
    };
    while (progress.epoch as usize) < config.epochs {
        let epoch = u64::from(progress.epoch);
        let mut rng = Rng::stream(config.seed, "pretrain.batches", epoch);
        let mut total = 0.0;
        for batch in epoch_batches(instances.len(), config.batch_size, &mut rng) {
            let refs: Vec<&PretrainInstance> = batch.iter().map(|&i| &instances[i]).collect();
            let loss = pretrain_step(model, table, &refs, &opts, config.seed, adam.t)?;
            adam.step(&mut model.params, &ids);
            debug!("step {} loss {:.6}", adam.t, loss.total);
            run.step_losses.push(loss.total);
            total += loss.total;
        }
        progress.epoch += 1;
        run.epoch_losses.push(total);
        info!("pre-train epoch {} loss {:.4}", progress.epoch, total);
        if let Some(path) = checkpoint {
            let interval = config.checkpoint_interval;
            if interval > 0
                && (progress.epoch as usize).is_multiple_of(interval)
                && (progress.epoch as usize) < config.epochs
            {
                Checkpoint::capture(model, Some(adam), *progress)?.save(path)?;
            }
        }
    }
    model.pretrained = true;
    progress.stage = Stage::Pretrained;
    if let Some(path) = checkpoint {
        Checkpoint::capture(model, Some(adam), *progress)?.save(path)?;
    }
    Ok(run)
}

/// A preprocessed target domain.
#[derive(Debug, Clone)]
pub struct TargetData {
    pub split: SplitCorpus,
    pub vocab: Vocabulary,
    /// Training-set interaction count of each vocabulary item.
    pub popularity: Vec<usize>,
}

impl TargetData {
    /// 5-core filtering, leave-one-out split, vocabulary of every item left.
    pub fn prepare(sequences: &[InteractionSequence], table: &EmbeddingTable) -> Result<Self> {
        let filtered = five_core_filter(sequences);
        let split = leave_one_out_split(&filtered, 3);
        if split.test.is_empty() {
            return Err(Error::EmptyData(
                "target domain has no test instances after filtering".into(),
            ));
        }
        let vocab = Vocabulary::from_sequences(&filtered, table);
        let counts = popularity(&split.train);
        let popularity = vocab
            .items
            .iter()
            .map(|id| counts.get(id).copied().unwrap_or(0))
            .collect();
        Ok(Self {
            split,
            vocab,
            popularity,
        })
    }

    /// Training popularity of each test instance's target.
    pub fn test_popularity(&self) -> Vec<usize> {
        self.split
            .test
            .iter()
            .map(|inst| self.vocab.position(inst.target).map_or(0, |p| self.popularity[p]))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneRun {
    pub plan: FreezePlan,
    pub valid_history: Vec<f64>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub test_ranks: Vec<usize>,
    pub report: MetricsReport,
    pub progress: Progress,
}

/// Fine-tunes `model` on the target domain with early stopping on
/// validation NDCG@10, restores the best epoch and evaluates on test.
/// `from_scratch` trains every tensor of an unpretrained model.
pub fn run_finetune(
    model: &mut Model,
    table: &EmbeddingTable,
    data: &TargetData,
    config: &TrainConfig,
    from_scratch: bool,
) -> Result<FinetuneRun> {
    config.validate()?;
    model.check_table(table)?;
    let mode = config.mode;
    if mode == FinetuneMode::Transductive {
        model.add_id_embedding(data.vocab.len())?;
    }
    let plan = if from_scratch {
        FreezePlan::all(model)
    } else {
        make_freeze_plan(model, mode, config.finetune_scope)?
    };
    let trainable_set = plan.trainable_ids(model);
    let mut trainable: Vec<ParamId> = trainable_set.iter().copied().collect();
    trainable.sort_by_key(|id| id.index());
    let rows = data.vocab.text_rows(table);
    let instances = build_finetune_instances(&data.split.train, &data.vocab, table, model.config.n_max)?;
    let opts = FinetuneOptions {
        mode,
        negatives: config.negatives,
        dropout: true,
    };
    let mut adam = Adam::new(config.lr);
    let mut history = Vec::new();
    let mut best: Option<Vec<Vec<f32>>> = None;
    let mut best_epoch = 0;
    let snapshot = |m: &Model| {
        trainable
            .iter()
            .map(|&id| m.params.get(id).values.clone())
            .collect::<Vec<_>>()
    };
    for epoch in 0..config.epochs {
        if instances.is_empty() {
            return Err(Error::EmptyData("no fine-tuning instances".into()));
        }
        let mut rng = Rng::stream(config.seed, "finetune.batches", epoch as u64);
        let mut total = 0.0;
        for batch in epoch_batches(instances.len(), config.batch_size, &mut rng) {
            let refs: Vec<&FinetuneInstance> = batch.iter().map(|&i| &instances[i]).collect();
            total += finetune_step(model, &trainable_set, &rows, &refs, &opts, config.seed, adam.t)?;
            adam.step(&mut model.params, &trainable);
        }
        let valid = rank_instances_parallel(
            model,
            table,
            &data.vocab,
            &data.split.valid,
            mode,
            config.eval_batch,
            config.threads,
        )?;
        let ndcg = MetricsReport::from_ranks(&valid)?.ndcg_at(10);
        history.push(ndcg);
        info!(
            "fine-tune epoch {} loss {:.4} valid NDCG@10 {:.4}",
            epoch + 1,
            total,
            ndcg
        );
        let state = early_stop(&history, config.patience);
        if state.best_epoch == epoch + 1 {
            best = Some(snapshot(model));
            best_epoch = epoch + 1;
        }
        if state.stop {
            break;
        }
    }
    if let Some(values) = best {
        for (&id, v) in trainable.iter().zip(values) {
            model.params.get_mut(id).values = v;
        }
    }
    let test_ranks = rank_instances_parallel(
        model,
        table,
        &data.vocab,
        &data.split.test,
        mode,
        config.eval_batch,
        config.threads,
    )?;
    let mut report = MetricsReport::from_ranks(&test_ranks)?;
    let pops = data.test_popularity();
    report.per_group = Some(long_tail_report(&test_ranks, &pops, &config.long_tail_buckets, None)?);
    model.params.zero_grad();
    let progress = Progress {
        epoch: history.len() as u32,
        best_metric: history.get(best_epoch.wrapping_sub(1)).copied().unwrap_or(0.0) as f32,
        best_epoch: best_epoch as u32,
        stage: Stage::Finetuned,
    };
    Ok(FinetuneRun {
        plan,
        epochs_run: history.len(),
        valid_history: history,
        best_epoch,
        test_ranks,
        report,
        progress,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, SyntheticCorpus, SyntheticSpec};
    use crate::model::ModelConfig;
    use crate::numeric::ParamTensor;

    #[test]
    fn adam_matches_a_hand_rolled_trace() {
        let mut store = ParamStore::new();
        let id = store
            .insert(ParamTensor::from_values("w", &[1], vec![0.5]).unwrap())
            .unwrap();
        let mut adam = Adam::new(0.1);
        let grads = [0.3f64, -1.2, 0.05];
        // Independent trace.
        let (mut w, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for (t, &g) in grads.iter().enumerate() {
            let t = t as i32 + 1;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= 0.1 * mh / (vh.sqrt() + 1e-8);
            store.get_mut(id).grad[0] = g as f32;
            adam.step(&mut store, &[id]);
            assert!((f64::from(store.get(id).values[0]) - w).abs() < 1e-6, "step {t}");
        }
        // First step moves by lr in the direction of −sign(g).
        assert!((0.5 - 0.4f64).abs() - 0.1 < 1e-12);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut store = ParamStore::new();
        let id = store
            .insert(ParamTensor::from_values("w", &[3], vec![1.0, -2.0, 0.5]).unwrap())
            .unwrap();
        let mut adam = Adam::new(0.01);
        adam.step(&mut store, &[id]);
        assert_eq!(store.get(id).values, vec![1.0, -2.0, 0.5]);
        store.get_mut(id).grad = vec![2.0, -0.5, 1e-3];
        let mut fresh = Adam::new(0.01);
        fresh.step(&mut store, &[id]);
        let moved: Vec<f32> = store.get(id).values.clone();
        for (a, b) in moved.iter().zip([1.0f32 - 0.01, -2.0 + 0.01, 0.5 - 0.01]) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn early_stop_examples() {
        assert_eq!(
            early_stop(&[0.1, 0.2, 0.3, 0.4, 0.5], 1),
            EarlyStop {
                stop: false,
                best_epoch: 5
            }
        );
        assert_eq!(
            early_stop(&[0.3, 0.2, 0.2], 3),
            EarlyStop {
                stop: false,
                best_epoch: 1
            }
        );
        assert_eq!(
            early_stop(&[0.3, 0.2, 0.2, 0.2], 3),
            EarlyStop {
                stop: true,
                best_epoch: 1
            }
        );
        assert_eq!(
            early_stop(&[0.3, 0.2, 0.2, 0.4, 0.1], 3),
            EarlyStop {
                stop: false,
                best_epoch: 4
            }
        );
        assert_eq!(
            early_stop(&[0.3, 0.3], 1),
            EarlyStop {
                stop: true,
                best_epoch: 1
            }
        );
    }

    fn corpus() -> SyntheticCorpus {
        let spec = SyntheticSpec {
            domains: 2,
            items_per_domain: 40,
            users_per_domain: 60,
            dim: 8,
            min_len: 5,
            max_len: 9,
            ..SyntheticSpec::default()
        };
        generate_synthetic_corpus(&spec).unwrap()
    }

    fn small_config() -> ModelConfig {
        ModelConfig {
            d_w: 8,
            d_v: 8,
            experts: 2,
            layers: 1,
            heads: 2,
            d_ff: 16,
            n_max: 6,
            dropout: 0.1,
        }
    }

    #[test]
    fn pretrain_step_count_and_determinism() {
        let c = corpus();
        let inst = build_instances(&c.sequences, 6);
        let config = TrainConfig {
            epochs: 1,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let ten = &inst[..10];
        let mut model = Model::new(small_config(), 1).unwrap();
        let mut adam = Adam::new(config.lr);
        let mut progress = Progress::default();
        let run = run_pretrain(&mut model, &mut adam, &mut progress, &c.table, ten, &config, None).unwrap();
        assert_eq!(run.step_losses.len(), 3);
        assert_eq!(adam.t, 3);
        assert!(model.pretrained);

        let mut again = Model::new(small_config(), 1).unwrap();
        let mut adam2 = Adam::new(config.lr);
        let mut p2 = Progress::default();
        let run2 = run_pretrain(&mut again, &mut adam2, &mut p2, &c.table, ten, &config, None).unwrap();
        assert_eq!(run.step_losses, run2.step_losses);
        let a = Checkpoint::capture(&model, Some(&adam), progress)
            .unwrap()
            .to_bytes()
            .unwrap();
        let b = Checkpoint::capture(&again, Some(&adam2), p2)
            .unwrap()
            .to_bytes()
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn resume_matches_an_uninterrupted_run() {
        let c = corpus();
        let inst = source_instances(&c.sequences, 6);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pt.ckpt");
        let two = TrainConfig {
            epochs: 2,
            batch_size: 64,
            ..TrainConfig::default()
        };
        let mut full = Model::new(small_config(), 2).unwrap();
        let mut adam = Adam::new(two.lr);
        let mut progress = Progress::default();
        run_pretrain(&mut full, &mut adam, &mut progress, &c.table, &inst, &two, None).unwrap();

        let one = TrainConfig {
            epochs: 1,
            ..two.clone()
        };
        let mut first = Model::new(small_config(), 2).unwrap();
        let mut a1 = Adam::new(one.lr);
        let mut p1 = Progress::default();
        run_pretrain(&mut first, &mut a1, &mut p1, &c.table, &inst, &one, Some(&path)).unwrap();
        let (mut resumed, a2, mut p2) = Checkpoint::load(&path).unwrap().restore().unwrap();
        let mut a2 = a2.unwrap();
        run_pretrain(&mut resumed, &mut a2, &mut p2, &c.table, &inst, &two, None).unwrap();
        let x = Checkpoint::capture(&full, Some(&adam), progress).unwrap();
        let y = Checkpoint::capture(&resumed, Some(&a2), p2).unwrap();
        for (a, b) in x.tensors.iter().zip(&y.tensors) {
            assert_eq!(a.name(), b.name());
            assert_eq!(a.values, b.values, "{}", a.name());
        }
        assert_eq!(x.to_bytes().unwrap(), y.to_bytes().unwrap());
    }

    #[test]
    fn pretraining_loss_trends_down() {
        let c = corpus();
        let inst = source_instances(&c.sequences, 6);
        let config = TrainConfig {
            epochs: 3,
            batch_size: 32,
            lr: 3e-3,
            ..TrainConfig::default()
        };
        let mut model = Model::new(small_config(), 3).unwrap();
        let mut adam = Adam::new(config.lr);
        let mut progress = Progress::default();
        let run = run_pretrain(&mut model, &mut adam, &mut progress, &c.table, &inst, &config, None).unwrap();
        let ys = &run.step_losses[..20];
        let n = ys.len() as f64;
        let mx = (n - 1.0) / 2.0;
        let my = ys.iter().sum::<f64>() / n;
        let slope: f64 = ys
            .iter()
            .enumerate()
            .map(|(i, y)| (i as f64 - mx) * (y - my))
            .sum::<f64>()
            / (0..ys.len()).map(|i| (i as f64 - mx).powi(2)).sum::<f64>();
        assert!(slope < 0.0, "slope {slope}");
    }

    #[test]
    fn finetune_respects_the_freeze_contract() {
        let c = corpus();
        let target = c.domain_sequences(&SyntheticCorpus::domain_name(1));
        let data = TargetData::prepare(&target, &c.table).unwrap();
        for mode in [FinetuneMode::Inductive, FinetuneMode::Transductive] {
            let mut model = Model::new(small_config(), 4).unwrap();
            let config = TrainConfig {
                epochs: 2,
                batch_size: 32,
                negatives: 10,
                mode,
                ..TrainConfig::default()
            };
            assert!(matches!(
                run_finetune(&mut model.clone(), &c.table, &data, &config, false),
                Err(Error::NotPretrained)
            ));
            model.pretrained = true;
            let before: Vec<(String, [u8; 32])> = model
                .params
                .iter()
                .map(|(_, t)| (t.name().to_string(), t.value_hash()))
                .collect();
            let run = run_finetune(&mut model, &c.table, &data, &config, false).unwrap();
            assert_eq!(run.epochs_run, 2);
            // The noise projection only feeds the pre-training gate, so it
            // is trainable but receives no gradient here.
            for (name, hash) in &before {
                let changed = model.params.by_name(name).unwrap().value_hash() != *hash;
                let expect = run.plan.trainable.contains(name) && name != "adaptor.router.w3";
                assert_eq!(changed, expect, "{name}");
            }
            let report = &run.report;
            assert!(report.recall_at(10) <= report.recall_at(50));
            let groups = report.per_group.as_ref().unwrap();
            assert_eq!(groups.iter().map(|g| g.count).sum::<usize>(), data.split.test.len());
        }
    }

    #[test]
    fn zero_epochs_is_zero_shot() {
        let c = corpus();
        let data = TargetData::prepare(&c.domain_sequences(&SyntheticCorpus::domain_name(0)), &c.table).unwrap();
        let mut model = Model::new(small_config(), 5).unwrap();
        model.pretrained = true;
        let before = model.params.clone();
        let config = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let run = run_finetune(&mut model, &c.table, &data, &config, false).unwrap();
        assert_eq!(run.epochs_run, 0);
        for (id, t) in before.iter() {
            assert_eq!(model.params.get(id).values, t.values);
        }
        assert_eq!(run.report.user_count, data.split.test.len());
    }

    #[test]
    fn finetune_loss_decreases_on_a_fixed_batch() {
        let c = corpus();
        let data = TargetData::prepare(&c.domain_sequences(&SyntheticCorpus::domain_name(1)), &c.table).unwrap();
        let mut model = Model::new(small_config(), 6).unwrap();
        model.pretrained = true;
        let plan = make_freeze_plan(&model, FinetuneMode::Inductive, TuneScope::Adaptor).unwrap();
        let trainable = plan.trainable_ids(&model);
        let ids: Vec<ParamId> = trainable.iter().copied().collect();
        let rows = data.vocab.text_rows(&c.table);
        let inst = build_finetune_instances(&data.split.train, &data.vocab, &c.table, 6).unwrap();
        let batch: Vec<&FinetuneInstance> = inst.iter().take(32).collect();
        let opts = FinetuneOptions {
            mode: FinetuneMode::Inductive,
            negatives: 10,
            dropout: false,
        };
        let mut adam = Adam::new(TrainConfig::default().lr);
        let mut losses = Vec::new();
        for _ in 0..10 {
            losses.push(finetune_step(&mut model, &trainable, &rows, &batch, &opts, 1, 0).unwrap());
            adam.step(&mut model.params, &ids);
        }
        assert!(losses[9] < losses[0], "{losses:?}");
    }
}
