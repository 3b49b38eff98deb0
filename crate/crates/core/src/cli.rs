//! Command-line surface. Every command returns a process exit code:
//! 0 ok, 1 verification failure, 2 bad input file, 3 config or shape
//! error, 4 empty data.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::info;

use crate::checkpoint::{Checkpoint, Progress};
use crate::config::RunConfig;
use crate::corpus::{generate_synthetic_corpus, load_data_dir, load_data_dirs, write_domain_dir, SyntheticSpec};
use crate::error::{Error, Result};
use crate::eval::{fmt6, long_tail_report, MetricsReport};
use crate::finetune::FinetuneMode;
use crate::model::{Model, ModelConfig};
use crate::numeric::{finite_diff_check, GradCheckOptions, GradCheckReport, Rng};
use crate::pretrain::{build_instances, epoch_batches, record_pretrain_loss, PretrainInstance};
use crate::scope::ParamScope;
use crate::trainer::{run_finetune, run_pretrain, source_instances, Adam, TargetData};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_EMPTY: i32 = 4;

/// The configuration `gradcheck` uses when no `--config` is given; also
/// shipped as `configs/gradcheck_tiny.conf`.
pub const TINY_GRADCHECK_CONFIG: &str = include_str!("../configs/gradcheck_tiny.conf");

#[derive(Debug, Parser)]
#[command(name = "unisrec", version, about = "ID-agnostic sequential recommendation")]
pub struct Cli {
    /// Overrides the seed of the spec or config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Evaluation worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-domain corpus, one directory per domain.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Contrastive pre-training over pooled source domains.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Source-domain directories (repeatable).
        #[arg(long, num_args = 1..)]
        data: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the checkpoint at the output path.
        #[arg(long)]
        resume: bool,
    },
    /// Fine-tune on a target domain and report test metrics.
    Finetune {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        mode: Option<FinetuneMode>,
        #[arg(long)]
        config: PathBuf,
        /// Metrics TSV.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Fine-tuned checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Full report with the long-tail breakdown, as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Test ranks, one per line.
        #[arg(long)]
        ranks_out: Option<PathBuf>,
        /// Test ranks of a baseline run, for per-bucket improvements.
        #[arg(long)]
        baseline_ranks: Option<PathBuf>,
        /// Random initialization, every tensor trainable.
        #[arg(long)]
        from_scratch: bool,
        /// Evaluate without training.
        #[arg(long)]
        eval_only: bool,
    },
    /// Finite-difference check of the full pre-training loss.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Scales the analytic gradient before comparing (test hook).
        #[arg(long, hide = true)]
        corrupt_grad: Option<f64>,
    },
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io { .. }
        | Error::Format(_)
        | Error::Parse { .. }
        | Error::DuplicateKey { .. }
        | Error::MissingEmbedding { .. }
        | Error::InvalidSpec(_)
        | Error::Range(_)
        | Error::InvalidInput(_) => EXIT_INPUT,
        Error::Config(_)
        | Error::Incompatible(_)
        | Error::DimensionMismatch(_)
        | Error::NotPretrained
        | Error::InvalidParameter(_) => EXIT_CONFIG,
        Error::EmptyData(_) => EXIT_EMPTY,
        Error::DegenerateVector { .. } | Error::DegenerateInput(_) | Error::NumericFailure { .. } => EXIT_VERIFY,
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Synth { spec, out } => cmd_synth(spec, out, cli.seed),
        Command::Pretrain {
            config,
            data,
            out,
            resume,
        } => {
            let mut cfg = load_config(config, cli)?;
            if !data.is_empty() {
                cfg.data = data.clone();
            }
            if out.is_some() {
                cfg.out = out.clone();
            }
            cmd_pretrain(&cfg, *resume)
        }
        Command::Finetune {
            ckpt,
            data,
            mode,
            config,
            report,
            out,
            json,
            ranks_out,
            baseline_ranks,
            from_scratch,
            eval_only,
        } => {
            let mut cfg = load_config(config, cli)?;
            if let Some(d) = data {
                cfg.data = vec![d.clone()];
            }
            if ckpt.is_some() {
                cfg.ckpt = ckpt.clone();
            }
            if report.is_some() {
                cfg.report = report.clone();
            }
            if out.is_some() {
                cfg.out = out.clone();
            }
            if let Some(m) = mode {
                cfg.train.mode = *m;
            }
            let extras = FinetuneOutputs {
                json: json.clone(),
                ranks_out: ranks_out.clone(),
                baseline_ranks: baseline_ranks.clone(),
            };
            cmd_finetune(&cfg, *from_scratch, *eval_only, &extras)
        }
        Command::Gradcheck { config, corrupt_grad } => {
            let mut cfg = match config {
                Some(path) => RunConfig::load(path)?,
                None => RunConfig::parse(TINY_GRADCHECK_CONFIG)?,
            };
            if let Some(seed) = cli.seed {
                cfg.train.seed = seed;
            }
            let report = pretrain_gradcheck(&cfg, *corrupt_grad)?;
            print!("{report}");
            Ok(if report.passed() { EXIT_OK } else { EXIT_VERIFY })
        }
    }
}

fn load_config(path: &Path, cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    if let Some(t) = cli.threads {
        cfg.train.threads = t;
    }
    cfg.train.validate()?;
    Ok(cfg)
}

pub fn cmd_synth(spec_path: &Path, out: &Path, seed: Option<u64>) -> Result<i32> {
    let text = fs::read_to_string(spec_path).map_err(|e| Error::io(spec_path, e))?;
    let mut spec = SyntheticSpec::parse(&text)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let corpus = generate_synthetic_corpus(&spec)?;
    for domain in corpus.table.domains() {
        write_domain_dir(&corpus.table, &corpus.sequences, &domain, &out.join(&domain))?;
    }
    let spec_out = out.join("spec.txt");
    fs::write(&spec_out, spec.to_text()).map_err(|e| Error::io(&spec_out, e))?;
    println!("domains\t{}", spec.domains);
    println!("items\t{}", corpus.table.len());
    println!("sequences\t{}", corpus.sequences.len());
    Ok(EXIT_OK)
}

pub fn cmd_pretrain(cfg: &RunConfig, resume: bool) -> Result<i32> {
    let out = cfg
        .out
        .as_deref()
        .ok_or_else(|| Error::Config("pretrain needs an output checkpoint path".into()))?;
    let (table, sequences) = load_data_dirs(&cfg.data)?;
    let model_config = cfg.model.resolve(table.dim())?;
    let instances = source_instances(&sequences, model_config.n_max);
    info!(
        "{} pre-training instances from {} sequences",
        instances.len(),
        sequences.len()
    );
    let (mut model, mut adam, mut progress) = if resume && out.exists() {
        let (model, adam, progress) = Checkpoint::load(out)?.restore()?;
        if model.config != model_config {
            return Err(Error::Incompatible(format!(
                "checkpoint architecture {:?} differs from the configuration {model_config:?}",
                model.config
            )));
        }
        let adam = adam.ok_or_else(|| Error::Incompatible("checkpoint holds no optimizer state".into()))?;
        info!("resuming at epoch {}", progress.epoch);
        (model, adam, progress)
    } else {
        (
            Model::new(model_config, cfg.train.seed)?,
            Adam::new(cfg.train.lr),
            Progress::default(),
        )
    };
    let run = run_pretrain(
        &mut model,
        &mut adam,
        &mut progress,
        &table,
        &instances,
        &cfg.train,
        Some(out),
    )?;
    println!("instances\t{}", run.instances);
    println!("epochs\t{}", progress.epoch);
    println!("steps\t{}", adam.t);
    if let Some(last) = run.epoch_losses.last() {
        println!("final_epoch_loss\t{}", fmt6(*last));
    }
    Ok(EXIT_OK)
}

#[derive(Debug, Clone, Default)]
pub struct FinetuneOutputs {
    pub json: Option<PathBuf>,
    pub ranks_out: Option<PathBuf>,
    pub baseline_ranks: Option<PathBuf>,
}

fn read_ranks(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse().map_err(|_| Error::Parse {
                line: i + 1,
                message: format!("bad rank `{l}`"),
            })
        })
        .collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn cmd_finetune(cfg: &RunConfig, from_scratch: bool, eval_only: bool, outputs: &FinetuneOutputs) -> Result<i32> {
    let report_path = cfg
        .report
        .as_deref()
        .ok_or_else(|| Error::Config("finetune needs a report path".into()))?;
    let data_dir = match cfg.data.as_slice() {
        [one] => one,
        [] => return Err(Error::Config("finetune needs a target data directory".into())),
        _ => return Err(Error::Config("finetune takes exactly one target data directory".into())),
    };
    let (table, sequences) = load_data_dir(data_dir)?;
    let data = TargetData::prepare(&sequences, &table)?;
    let mut model = if from_scratch {
        Model::new(cfg.model.resolve(table.dim())?, cfg.train.seed)?
    } else {
        let path = cfg
            .ckpt
            .as_deref()
            .ok_or_else(|| Error::Config("finetune needs --ckpt unless --from-scratch is given".into()))?;
        let (model, _, _) = Checkpoint::load(path)?.restore()?;
        cfg.model.check_against(&model.config)?;
        model
    };
    let mut train = cfg.train.clone();
    if eval_only {
        train.epochs = 0;
    }
    let run = run_finetune(&mut model, &table, &data, &train, from_scratch)?;
    let mut report = run.report;
    if let Some(path) = &outputs.baseline_ranks {
        let baseline = read_ranks(path)?;
        let pops = data.test_popularity();
        report.per_group = Some(long_tail_report(
            &run.test_ranks,
            &pops,
            &train.long_tail_buckets,
            Some(&baseline),
        )?);
    }
    write_text(report_path, &report.to_tsv())?;
    if let Some(path) = &outputs.json {
        write_text(path, &report.to_json())?;
    }
    if let Some(path) = &outputs.ranks_out {
        let text: String = run.test_ranks.iter().map(|r| format!("{r}\n")).collect();
        write_text(path, &text)?;
    }
    if !eval_only {
        if let Some(out) = &cfg.out {
            Checkpoint::capture(&model, None, run.progress)?.save(out)?;
        }
    }
    print!("{}", summary(&report, run.epochs_run, run.best_epoch));
    Ok(EXIT_OK)
}

fn summary(report: &MetricsReport, epochs: usize, best: usize) -> String {
    let mut s = report.to_tsv();
    let _ = writeln!(s, "users\t{}", report.user_count);
    let _ = writeln!(s, "epochs\t{epochs}\tbest\t{best}");
    if let Some(groups) = &report.per_group {
        for g in groups {
            let upper = g.upper.map_or("inf".to_string(), |u| u.to_string());
            let imp = g.improvement.map_or("-".to_string(), fmt6);
            let _ = writeln!(
                s,
                "bucket\t[{}, {upper})\t{}\t{}\t{imp}",
                g.lower,
                g.count,
                fmt6(g.recall10)
            );
        }
    }
    s
}

/// Finite-difference check of the full pre-training loss on one batch of
/// a small synthetic corpus. Weights are the seeded initialization plus
/// `N(0, perturb²)` so that the normalizations are evaluated away from
/// their high-curvature small-norm regime.
pub fn pretrain_gradcheck(cfg: &RunConfig, corrupt: Option<f64>) -> Result<GradCheckReport> {
    let d_w = cfg
        .model
        .d_w
        .ok_or_else(|| Error::Config("gradcheck needs d_w in its configuration".into()))?;
    let model_config: ModelConfig = cfg.model.resolve(d_w)?;
    let seed = cfg.train.seed;
    let spec = SyntheticSpec {
        domains: 2,
        items_per_domain: 12,
        users_per_domain: 8,
        topics: 4,
        dim: d_w,
        min_len: 3,
        max_len: model_config.n_max + 2,
        seed,
        ..SyntheticSpec::default()
    };
    let corpus = generate_synthetic_corpus(&spec)?;
    let instances = build_instances(&corpus.sequences, model_config.n_max);
    let mut rng = Rng::stream(seed, "gradcheck.batch", 0);
    let first = epoch_batches(instances.len(), cfg.train.batch_size, &mut rng).swap_remove(0);
    let batch: Vec<&PretrainInstance> = first.iter().map(|&i| &instances[i]).collect();

    let mut model = Model::new(model_config, seed)?;
    let ids: Vec<_> = model.params.ids().collect();
    for &id in &ids {
        let name = model.params.get(id).name().to_string();
        let mut r = Rng::stream(seed, &format!("gradcheck.perturb.{name}"), 0);
        for v in model.params.get_mut(id).values.iter_mut() {
            *v += (r.normal() * cfg.gradcheck.perturb) as f32;
        }
    }
    let opts = cfg.train.pretrain_options();
    let options = GradCheckOptions {
        eps: cfg.gradcheck.eps,
        tol: cfg.gradcheck.tol,
        max_coords: cfg.gradcheck.max_coords,
        seed,
        corrupt_factor: corrupt,
    };
    let (adaptor, encoder) = (model.adaptor.clone(), model.encoder.clone());
    let table = &corpus.table;
    finite_diff_check(&mut model.params, &ids, &options, |s, g| {
        let scope = ParamScope::training(s);
        Ok(record_pretrain_loss(g, &scope, &adaptor, &encoder, table, &batch, &opts, seed, 0)?.total)
    })
}
