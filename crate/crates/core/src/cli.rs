//! Command-line front end. Exit codes: 0 success, 1 usage or configuration,
//! 2 data, 3 numeric failure.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::corpus::{generate_corpus, read_corpus, CorpusConfig, Task};
use crate::data::{build_vocabulary, check_disjoint, load_dataset, split_path, Dataset};
use crate::model::{load_checkpoint, ClassSource, Model, PlanCache, TokenVocabulary};
use crate::objectives::Objectives;
use crate::tensor::{DType, Scalar};
use crate::trainer::{
    ablation_csv, evaluate, finetune, load_train_state, pretrain, run_ablation, write_text, AblationData, EvalOptions,
    FinetuneInit, RunDir,
};
use crate::verify::{gradcheck_suite, primitive_suite, SuiteOptions};
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "vista3d", version, about = "Scene/text transformer: corpus generation, pre-training, fine-tuning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic scene/text corpus as JSONL files.
    GenCorpus(GenCorpusArgs),
    /// Pre-train with masked words, masked objects and scene-text matching.
    Pretrain(PretrainArgs),
    /// Fine-tune on grounding, qa or caption.
    Finetune(FinetuneArgs),
    /// Evaluate a checkpoint on a held-out split.
    Eval(EvalArgs),
    /// Finite-difference check of every primitive and every loss on a tiny model.
    Gradcheck(GradcheckArgs),
    /// Run the depth / objective / data-fraction matrix and write a CSV.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub scenes: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ModelOverrides {
    #[arg(long)]
    pub model_seed: Option<u64>,
    #[arg(long)]
    pub fusion_layers: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long, value_parser = parse_dtype)]
    pub dtype: Option<DType>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory written by gen-corpus.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Run directory: checkpoint, metrics, config echo.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Data-order and corruption seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Subset such as `mlm+mom`.
    #[arg(long)]
    pub objectives: Option<String>,
    /// Stop after this many epochs without shortening the schedule.
    #[arg(long)]
    pub stop_after: Option<usize>,
    /// Continue from the checkpoint and optimizer state in --out.
    #[arg(long)]
    pub resume: bool,
    #[command(flatten)]
    pub model: ModelOverrides,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = parse_task)]
    pub task: Task,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// `scratch` or a checkpoint path.
    #[arg(long, default_value = "scratch")]
    pub init: String,
    #[arg(long)]
    pub fraction: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub qa_lambda: Option<f64>,
    #[command(flatten)]
    pub model: ModelOverrides,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_parser = parse_task)]
    pub task: Task,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Split file to read (`eval` or `train`; training splits are refused).
    #[arg(long, default_value = "eval")]
    pub split: String,
    /// Class ids fed to the object tokens: `predicted` or `truth`.
    #[arg(long, default_value = "predicted")]
    pub classes: String,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    /// Also write the metrics as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-3)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    /// Check at most this many elements per parameter.
    #[arg(long)]
    pub max_elements: Option<usize>,
    /// Negate the analytic gradient of this parameter (the check must then fail).
    #[arg(long)]
    pub negate: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated fusion depths, e.g. `2,4`.
    #[arg(long)]
    pub depths: Option<String>,
    /// Comma-separated objective subsets, e.g. `mlm,mlm+mom,mlm+mom+stm`.
    #[arg(long)]
    pub objective_sets: Option<String>,
    #[arg(long)]
    pub tasks: Option<String>,
    #[arg(long)]
    pub fractions: Option<String>,
    /// Comma-separated `scratch` / `pretrained`.
    #[arg(long)]
    pub inits: Option<String>,
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long)]
    pub finetune_epochs: Option<usize>,
    #[command(flatten)]
    pub model: ModelOverrides,
}

fn parse_task(s: &str) -> std::result::Result<Task, String> {
    s.parse::<Task>().map_err(|e| e.to_string())
}

fn parse_dtype(s: &str) -> std::result::Result<DType, String> {
    match s {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        _ => Err(format!("unknown dtype {s:?} (f32 or f64)")),
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<T>().map_err(|e| Error::Config(format!("bad {what} {p:?}: {e}"))))
        .collect()
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl ModelOverrides {
    fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.model_seed, self.model_seed);
        set(&mut cfg.model.fusion_layers, self.fusion_layers);
        if let Some(d) = self.dim {
            cfg.model.d = d;
            cfg.model.d_ff = d * 8 / 3;
            cfg.model.grounding_hidden = d / 2;
        }
        set(&mut cfg.model.dtype, self.dtype);
    }
}

fn class_names(corpus: &CorpusConfig) -> Vec<String> {
    corpus.classes.iter().map(|c| c.name.clone()).collect()
}

fn load_split(
    dir: &Path,
    task: Task,
    split: &str,
    cfg: &RunConfig,
    vocab: &TokenVocabulary,
    max_text_len: usize,
    cache: &mut PlanCache,
) -> Result<Dataset> {
    load_dataset(&split_path(dir, task, split), task, &cfg.corpus, vocab, max_text_len, cache)
}

fn print_json<S: serde::Serialize>(value: &S) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializes"));
}

fn gen_corpus(a: GenCorpusArgs) -> Result<()> {
    let mut cfg = RunConfig::load_or_default(a.config.as_deref())?;
    set(&mut cfg.corpus_seed, a.seed);
    set(&mut cfg.scenes, a.scenes);
    if cfg.scenes == 0 {
        return Err(Error::Config("--scenes must be positive".into()));
    }
    let summary = generate_corpus(cfg.corpus_seed, cfg.scenes, &a.out, &cfg.corpus)?;
    cfg.echo(&a.out)?;
    println!("scenes: {} (mean {:.2} objects)", summary.scenes, summary.mean_objects);
    for (task, c) in &summary.counts {
        println!("{task}: train {} eval {} total {}", c.train, c.eval, c.train + c.eval);
    }
    let total: usize = summary.relations.values().sum();
    println!("relations ({total} triplets):");
    for (name, n) in &summary.relations {
        println!("  {name}: {n} ({:.1}%)", 100.0 * *n as f64 / total.max(1) as f64);
    }
    for f in &summary.files {
        println!("wrote {f}");
    }
    Ok(())
}

fn with_dtype<R>(dtype: DType, f32_fn: impl FnOnce() -> R, f64_fn: impl FnOnce() -> R) -> R {
    match dtype {
        DType::F32 => f32_fn(),
        DType::F64 => f64_fn(),
    }
}

fn pretrain_cmd(a: PretrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load_or_default(a.config.as_deref())?;
    set(&mut cfg.pretrain.epochs, a.epochs);
    set(&mut cfg.pretrain.batch_size, a.batch_size);
    set(&mut cfg.pretrain.lr, a.lr);
    set(&mut cfg.pretrain.warmup_steps, a.warmup);
    set(&mut cfg.pretrain.seed, a.seed);
    set(&mut cfg.pretrain.objectives, a.objectives.clone());
    if a.stop_after.is_some() {
        cfg.pretrain.stop_after = a.stop_after;
    }
    a.model.apply(&mut cfg);
    Objectives::parse(&cfg.pretrain.objectives).map_err(Error::Config)?;
    let run = RunDir::create(&a.out)?;
    with_dtype(cfg.model.dtype, || pretrain_typed::<f32>(&a, cfg.clone(), &run), || pretrain_typed::<f64>(&a, cfg.clone(), &run))
}

fn pretrain_typed<T: Scalar>(a: &PretrainArgs, mut cfg: RunConfig, run: &RunDir) -> Result<()> {
    let (mut model, resume) = if a.resume {
        let model: Model<T> = load_checkpoint(&run.checkpoint())?.cast();
        let state = load_train_state(&run.train_state())?;
        log::info!("resuming after epoch {}", state.epochs_done);
        (model, Some(state))
    } else {
        let vocab = build_vocabulary(&a.corpus, &cfg.corpus)?;
        (Model::new(cfg.model.clone(), vocab, class_names(&cfg.corpus), cfg.model_seed)?, None)
    };
    cfg.model = model.config.clone();
    cfg.echo(&run.root)?;
    let mut cache = PlanCache::new(model.config.point_config());
    let m = model.config.max_text_len;
    let train = load_split(&a.corpus, Task::Pretrain, "train", &cfg, &model.vocab, m, &mut cache)?;
    let eval_path = split_path(&a.corpus, Task::Pretrain, "eval");
    let eval = if eval_path.exists() {
        Some(load_split(&a.corpus, Task::Pretrain, "eval", &cfg, &model.vocab, m, &mut cache)?)
    } else {
        None
    };
    if let Some(e) = &eval {
        check_disjoint(&train, e)?;
    }
    println!(
        "pre-training on {} pairs ({} parameters, {} epochs)",
        train.len(),
        model.params.num_elements(),
        cfg.pretrain.epochs
    );
    let outcome = pretrain(&mut model, &train, eval.as_ref(), &cfg.pretrain, Some(run), resume)?;
    if let Some(last) = outcome.records.last() {
        print_json(last);
    }
    println!("metrics: {}", run.metrics().display());
    println!("checkpoint: {}", run.checkpoint().display());
    Ok(())
}

fn finetune_cmd(a: FinetuneArgs) -> Result<()> {
    let mut cfg = RunConfig::load_or_default(a.config.as_deref())?;
    set(&mut cfg.finetune.fraction, a.fraction);
    set(&mut cfg.finetune.epochs, a.epochs);
    set(&mut cfg.finetune.batch_size, a.batch_size);
    set(&mut cfg.finetune.lr, a.lr);
    set(&mut cfg.finetune.warmup_steps, a.warmup);
    set(&mut cfg.finetune.seed, a.seed);
    set(&mut cfg.finetune.qa_lambda, a.qa_lambda);
    a.model.apply(&mut cfg);
    if a.task == Task::Pretrain {
        return Err(Error::Config("finetune --task must be grounding, qa or caption".into()));
    }
    let run = RunDir::create(&a.out)?;
    with_dtype(cfg.model.dtype, || finetune_typed::<f32>(&a, cfg.clone(), &run), || finetune_typed::<f64>(&a, cfg.clone(), &run))
}

fn finetune_typed<T: Scalar>(a: &FinetuneArgs, mut cfg: RunConfig, run: &RunDir) -> Result<()> {
    let mut model: Model<T> = if a.init == FinetuneInit::Scratch.name() {
        let vocab = build_vocabulary(&a.corpus, &cfg.corpus)?;
        Model::new(cfg.model.clone(), vocab, class_names(&cfg.corpus), cfg.model_seed)?
    } else {
        load_checkpoint(Path::new(&a.init))?.cast()
    };
    cfg.model = model.config.clone();
    cfg.echo(&run.root)?;
    let mut cache = PlanCache::new(model.config.point_config());
    let m = model.config.max_text_len;
    let train = load_split(&a.corpus, a.task, "train", &cfg, &model.vocab, m, &mut cache)?;
    let eval = load_split(&a.corpus, a.task, "eval", &cfg, &model.vocab, m, &mut cache)?;
    println!(
        "fine-tuning {} from {} on {:.0}% of {} samples",
        a.task,
        a.init,
        cfg.finetune.fraction * 100.0,
        train.len()
    );
    let outcome = finetune(&mut model, &train, Some(&eval), &cfg.finetune, Some(run))?;
    if let Some(last) = outcome.records.last() {
        print_json(last);
    }
    println!("metrics: {}", run.metrics().display());
    println!("checkpoint: {}", run.checkpoint().display());
    Ok(())
}

fn training_scene_ids(dir: &Path, corpus: &CorpusConfig) -> Result<BTreeSet<u64>> {
    let mut ids = BTreeSet::new();
    for task in Task::ALL {
        let path = split_path(dir, task, "train");
        if path.exists() {
            ids.extend(read_corpus(&path, corpus)?.iter().map(|p| p.scene.scene_id));
        }
    }
    Ok(ids)
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let classes = match a.classes.as_str() {
        "predicted" => ClassSource::Predicted,
        "truth" => ClassSource::GroundTruth,
        other => return Err(Error::Config(format!("--classes must be predicted or truth, got {other:?}"))),
    };
    let corpus_cfg = CorpusConfig::default();
    let model = load_checkpoint(&a.checkpoint)?;
    let mut cache = PlanCache::new(model.config.point_config());
    let path = split_path(&a.corpus, a.task, &a.split);
    let data = load_dataset(&path, a.task, &corpus_cfg, &model.vocab, model.config.max_text_len, &mut cache)?;
    let train_ids = training_scene_ids(&a.corpus, &corpus_cfg)?;
    let overlap = data.scene_ids().intersection(&train_ids).count();
    if overlap > 0 {
        return Err(Error::Data(format!(
            "{} shares {overlap} scene ids with the training splits; refusing to evaluate",
            path.display()
        )));
    }
    let opts = EvalOptions {
        classes,
        ..EvalOptions::for_model(&model, a.batch_size)
    };
    let metrics = match model.config.dtype {
        DType::F32 => evaluate(&model, &data, &opts)?,
        DType::F64 => evaluate(&model.cast::<f64>(), &data, &opts)?,
    };
    print_json(&metrics);
    if let Some(out) = &a.out {
        write_text(out, &serde_json::to_string_pretty(&metrics).expect("serializes"))?;
    }
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<()> {
    let opts = SuiteOptions {
        tolerance: a.tolerance,
        step: a.step,
        max_elements_per_param: a.max_elements,
        negate_param: a.negate,
        seed: a.seed,
        ..Default::default()
    };
    let mut entries = primitive_suite(&opts)?;
    entries.extend(gradcheck_suite(&opts)?);
    let mut failed = Vec::new();
    for e in &entries {
        let checked: usize = e.report.params.iter().map(|p| p.checked).sum();
        let worst = e.report.worst().expect("at least one parameter");
        let verdict = if e.report.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<22} {verdict:<4} max rel error {:.2e} over {checked} elements; worst {}[{}] analytic {:.6e} numeric {:.6e}",
            e.loss, worst.max_rel_error, worst.name, worst.worst_index, worst.analytic, worst.numeric
        );
        if !e.report.passed() {
            failed.push(e.loss.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "gradient check above tolerance {} for: {}",
            a.tolerance,
            failed.join(", ")
        )))
    }
}

fn ablate_cmd(a: AblateArgs) -> Result<()> {
    let mut cfg = RunConfig::load_or_default(a.config.as_deref())?;
    let spec = &mut cfg.ablation;
    if let Some(s) = &a.depths {
        spec.fusion_depths = parse_list(s, "depth")?;
    }
    if let Some(s) = &a.objective_sets {
        spec.objective_sets = parse_list(s, "objective set")?;
    }
    if let Some(s) = &a.tasks {
        spec.tasks = parse_list(s, "task")?;
    }
    if let Some(s) = &a.fractions {
        spec.fractions = parse_list(s, "fraction")?;
    }
    if let Some(s) = &a.inits {
        spec.inits = parse_list(s, "init")?;
    }
    if let Some(s) = &a.seeds {
        spec.seeds = parse_list(s, "seed")?;
    }
    set(&mut cfg.pretrain.epochs, a.pretrain_epochs);
    set(&mut cfg.finetune.epochs, a.finetune_epochs);
    a.model.apply(&mut cfg);
    if cfg.ablation.tasks.contains(&Task::Pretrain) {
        return Err(Error::Config("ablation tasks must be fine-tuning tasks".into()));
    }
    std::fs::create_dir_all(&a.out).map_err(Error::io(&a.out))?;
    cfg.echo(&a.out)?;
    let vocab = build_vocabulary(&a.corpus, &cfg.corpus)?;
    let classes = class_names(&cfg.corpus);
    let mut cache = PlanCache::new(cfg.model.point_config());
    let m = cfg.model.max_text_len;
    let mut train = BTreeMap::new();
    let mut eval = BTreeMap::new();
    let mut tasks = cfg.ablation.tasks.clone();
    if cfg.ablation.inits.contains(&FinetuneInit::Pretrained) {
        tasks.push(Task::Pretrain);
    }
    for task in tasks {
        let t = load_split(&a.corpus, task, "train", &cfg, &vocab, m, &mut cache)?;
        let e = load_split(&a.corpus, task, "eval", &cfg, &vocab, m, &mut cache)?;
        check_disjoint(&t, &e)?;
        train.insert(task, t);
        eval.insert(task, e);
    }
    let data = AblationData {
        vocab: &vocab,
        classes: &classes,
        train: &train,
        eval: &eval,
    };
    println!("{}", crate::trainer::ABLATION_CSV_HEADER);
    let on_row = |r: &crate::trainer::AblationRow| println!("{}", r.csv_line());
    let rows = with_dtype(
        cfg.model.dtype,
        || run_ablation::<f32>(&cfg.ablation, &cfg.model, cfg.model_seed, &data, &cfg.pretrain, &cfg.finetune, on_row),
        || run_ablation::<f64>(&cfg.ablation, &cfg.model, cfg.model_seed, &data, &cfg.pretrain, &cfg.finetune, on_row),
    )?;
    let path = a.out.join("ablation.csv");
    write_text(&path, &ablation_csv(&rows))?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus(a) => gen_corpus(a),
        Command::Pretrain(a) => pretrain_cmd(a),
        Command::Finetune(a) => finetune_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
    }
}

/// Parses `args` (program name first), runs, and returns the exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
