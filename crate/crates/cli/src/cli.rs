use std::io::Write;
use std::net::TcpListener;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use warp_core::analysis::{interpretation_report, trainable_census};
use warp_core::data::synthetic::{generate_synthetic, SyntheticKind};
use warp_core::data::{compute_metric, Dataset, Label, MetricValue, Split, TaskSpec};
use warp_core::fewshot::{ensemble_predict, run_seeds, select_lr, train_ensemble, FewShotPlan, VoteMode};
use warp_core::lm::{pretrain_toy, FrozenLm, LmConfig, PretrainConfig};
use warp_core::registry::TaskRegistry;
use warp_core::rng;
use warp_core::template::Template;
use warp_core::trainer::{evaluate, prepare_inputs, train, InitStrategy, Prediction, TrainConfig, WarmSource};
use warp_core::vocab::Vocab;

use crate::checkpoint::{load_lm, load_warp, save_lm, save_warp, WarpCheckpoint};
use crate::ensemble::{load_ensemble, save_ensemble};
use crate::runner::Threaded;
use crate::serve::{serve_stream, serve_tcp};
use crate::task::{load_task, render_predictions, write_task, TaskDir};

#[derive(Debug, Parser)]
#[command(name = "warp", version, about = "Train prompt and verbalizer embeddings against a frozen masked LM")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic task directory and its pretraining corpus.
    Synth(SynthArgs),
    /// Pretrain a toy masked LM on a corpus and write its checkpoint.
    PretrainLm(PretrainArgs),
    /// Train prompts and verbalizers on a task.
    Train(TrainArgs),
    /// Score a prompt checkpoint or an ensemble on a split.
    Eval(EvalArgs),
    /// Few-shot protocol: learning-rate selection, then a voting ensemble.
    Fewshot(FewshotArgs),
    /// Nearest vocabulary words to each learned embedding.
    Interpret(InterpretArgs),
    /// Count the trainable scalars of a prompt checkpoint.
    Params(ParamsArgs),
    /// Answer JSON requests for several tasks over one shared model.
    Serve(ServeArgs),
    /// Predict the most frequent training label for every example.
    PredictConstant(ConstantArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// keyword-sentiment, pair-match or pair-score.
    #[arg(long, default_value = "keyword-sentiment")]
    pub kind: String,
    #[arg(long, default_value_t = 256)]
    pub vocab: usize,
    #[arg(long, default_value_t = 256)]
    pub train: usize,
    #[arg(long, default_value_t = 256)]
    pub dev: usize,
    #[arg(long)]
    pub seed: u64,
    /// Task directory; the corpus goes to `corpus.txt` inside it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// One whitespace-tokenized sentence per line.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 256)]
    pub vocab: usize,
    #[arg(long, default_value_t = 32)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 64)]
    pub ffn_dim: usize,
    #[arg(long, default_value_t = 64)]
    pub max_positions: usize,
    #[arg(long, default_value_t = PretrainConfig::default().steps)]
    pub steps: usize,
    #[arg(long, default_value_t = PretrainConfig::default().batch_size)]
    pub batch_size: usize,
    #[arg(long, default_value_t = PretrainConfig::default().lr)]
    pub lr: f64,
    #[arg(long, default_value_t = PretrainConfig::default().mask_prob)]
    pub mask_prob: f64,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RecipeArgs {
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    /// Replace the task template with the default one holding K prompts.
    #[arg(long)]
    pub prompts: Option<usize>,
    /// mask, random, `manual:<prompt words>|<verbalizer words>` or
    /// `warm:<checkpoint>`; defaults to the task's `init`.
    #[arg(long)]
    pub init: Option<String>,
    #[arg(long, default_value_t = 1024)]
    pub max_tokens: usize,
    #[arg(long, default_value_t = 8)]
    pub max_examples: usize,
    #[arg(long, default_value_t = 0.1)]
    pub padding_noise: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub task: PathBuf,
    #[arg(long)]
    pub lm: PathBuf,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[command(flatten)]
    pub recipe: RecipeArgs,
    #[arg(long)]
    pub seed: u64,
    /// Keep the last epoch instead of the best one on dev.
    #[arg(long)]
    pub no_early_stopping: bool,
    #[arg(long)]
    pub out: PathBuf,
    /// Write the per-epoch history as JSON lines.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub task: PathBuf,
    #[arg(long)]
    pub lm: PathBuf,
    #[arg(long, conflicts_with = "ensemble", required_unless_present = "ensemble")]
    pub warp: Option<PathBuf>,
    #[arg(long)]
    pub ensemble: Option<PathBuf>,
    #[arg(long, default_value = "dev")]
    pub split: String,
    /// Ensemble voting: majority or probsum.
    #[arg(long, default_value = "majority")]
    pub vote: String,
    /// Write one predicted label or score per line.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FewshotArgs {
    #[arg(long)]
    pub task: PathBuf,
    #[arg(long)]
    pub lm: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub runs: usize,
    /// Comma-separated candidate learning rates.
    #[arg(long, value_delimiter = ',', required = true)]
    pub lrs: Vec<f64>,
    /// Training examples per selection split; the rest of train is its dev.
    #[arg(long, default_value_t = 16)]
    pub split_train: usize,
    #[command(flatten)]
    pub recipe: RecipeArgs,
    #[arg(long)]
    pub seed: u64,
    /// Worker threads (defaults to the available cores).
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InterpretArgs {
    #[arg(long)]
    pub warp: PathBuf,
    #[arg(long)]
    pub lm: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub top_k: usize,
    /// Task directory supplying class names.
    #[arg(long)]
    pub task: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    #[arg(long)]
    pub warp: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub lm: PathBuf,
    /// Prompt checkpoints to register, one per task.
    #[arg(long, required = true)]
    pub warp: Vec<PathBuf>,
    /// Task directories supplying class names, matched by task name.
    #[arg(long)]
    pub task: Vec<PathBuf>,
    /// Listen on this TCP address instead of reading stdin.
    #[arg(long)]
    pub listen: Option<String>,
    #[arg(long, default_value_t = 32)]
    pub max_batch: usize,
}

#[derive(Debug, Args)]
pub struct ConstantArgs {
    #[arg(long)]
    pub task: PathBuf,
    #[arg(long, default_value_t = 256)]
    pub vocab: usize,
    #[arg(long, default_value = "dev")]
    pub split: String,
    #[arg(long)]
    pub predictions: Option<PathBuf>,
}

pub fn run(cli: Cli, out: &mut dyn Write) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a, out),
        Command::PretrainLm(a) => pretrain(a, out),
        Command::Train(a) => train_cmd(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Fewshot(a) => fewshot(a, out),
        Command::Interpret(a) => interpret(a, out),
        Command::Params(a) => {
            let c = load_warp(&a.warp)?;
            writeln!(out, "{}", trainable_census(&c.params))?;
            Ok(())
        }
        Command::Serve(a) => serve(a),
        Command::PredictConstant(a) => constant(a, out),
    }
}

fn write_file(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn synth(a: SynthArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let kind = SyntheticKind::parse(&a.kind).context("--kind")?;
    let vocab = Vocab::synthetic(a.vocab).context("--vocab")?;
    let t = generate_synthetic(kind, &vocab, a.train, a.dev, a.seed)?;
    let dir = TaskDir { spec: t.spec, train: t.train, dev: t.dev, test: None };
    write_task(&a.out, &dir, &vocab)?;
    let corpus: String = t.corpus.iter().map(|s| vocab.decode(s) + "\n").collect();
    write_file(&a.out.join("corpus.txt"), &corpus)?;
    writeln!(out, "wrote {} ({} train, {} dev, {} corpus lines)", a.out.display(), a.train, a.dev, t.corpus.len())?;
    Ok(())
}

fn pretrain(a: PretrainArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let vocab = Vocab::synthetic(a.vocab).context("--vocab")?;
    let text = std::fs::read_to_string(&a.corpus).with_context(|| format!("reading {}", a.corpus.display()))?;
    let corpus: Vec<Vec<u32>> = text.lines().map(|l| vocab.encode(l)).filter(|s| !s.is_empty()).collect();
    let config = LmConfig {
        vocab_size: a.vocab,
        embed_dim: a.embed_dim,
        num_layers: a.layers,
        num_heads: a.heads,
        ffn_dim: a.ffn_dim,
        max_positions: a.max_positions,
        ..LmConfig::default()
    };
    let pc = PretrainConfig { mask_prob: a.mask_prob, steps: a.steps, batch_size: a.batch_size, lr: a.lr, seed: a.seed, ..PretrainConfig::default() };
    let (model, report) = pretrain_toy(&corpus, config, &pc)?;
    save_lm(&a.out, &model)?;
    writeln!(
        out,
        "final loss {:.4}, held-out masked-token accuracy {:.4} over {} tokens",
        report.final_loss, report.heldout_accuracy, report.heldout_masked
    )?;
    Ok(())
}

fn parse_split(s: &str) -> anyhow::Result<Split> {
    Split::parse(s).context("--split")
}

fn vocab_for(model: &FrozenLm<f32>) -> anyhow::Result<Vocab> {
    Ok(Vocab::synthetic(model.config.vocab_size)?)
}

/// The task spec with the recipe's template and init overrides applied and
/// a warm-start path resolved to loaded parameters.
fn apply_recipe(spec: &TaskSpec, r: &RecipeArgs) -> anyhow::Result<TaskSpec> {
    let mut spec = spec.clone();
    if let Some(k) = r.prompts {
        spec.template = Template::default_for(spec.kind.num_sentences(), k).render();
    }
    if let Some(init) = &r.init {
        spec.init = InitStrategy::parse(init).context("--init")?;
    }
    if let InitStrategy::WarmStart(WarmSource::Path(p)) = &spec.init {
        let c = load_warp(Path::new(p))?;
        spec.init = InitStrategy::WarmStart(WarmSource::Loaded(Box::new(c.params)));
    }
    Ok(spec)
}

fn check_lr(flag: &str, lr: f64) -> anyhow::Result<()> {
    if !(lr.is_finite() && lr >= 0.0) {
        bail!("{flag}: learning rate {lr} must be finite and non-negative");
    }
    Ok(())
}

fn check_recipe(r: &RecipeArgs) -> anyhow::Result<()> {
    if !(0.0..1.0).contains(&r.padding_noise) {
        bail!("--padding-noise must lie in [0, 1)");
    }
    if r.max_examples == 0 || r.max_tokens == 0 {
        bail!("--max-examples and --max-tokens must be positive");
    }
    Ok(())
}

fn recipe_config(spec: &TaskSpec, r: &RecipeArgs, lr: f64, seed: u64, early_stopping: bool) -> TrainConfig {
    TrainConfig {
        lr_max: lr,
        epochs: r.epochs,
        max_tokens_per_batch: r.max_tokens,
        max_examples_per_batch: r.max_examples,
        padding_noise: r.padding_noise,
        seed,
        init: spec.init.clone(),
        early_stopping,
        validation_metric: spec.metric,
        ..TrainConfig::default()
    }
}

fn show_metric(out: &mut dyn Write, label: &str, spec: &TaskSpec, m: MetricValue) -> anyhow::Result<()> {
    let flag = if m.degenerate { " (undefined, reported as 0)" } else { "" };
    writeln!(out, "{label}{} {:.6}{flag}", spec.metric.name(), m.value)?;
    Ok(())
}

fn train_cmd(a: TrainArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    check_lr("--lr", a.lr)?;
    check_recipe(&a.recipe)?;
    let model = load_lm(&a.lm)?;
    let vocab = vocab_for(&model)?;
    let task = load_task(&a.task, &vocab)?;
    let spec = apply_recipe(&task.spec, &a.recipe)?;
    let early = !a.no_early_stopping && !task.dev.is_empty();
    let config = recipe_config(&spec, &a.recipe, a.lr, a.seed, early);
    let outcome = train(&model, &spec, &vocab, &task.train, &task.dev, &config)?;
    let ckpt = WarpCheckpoint { task: spec.name.clone(), template: spec.template.clone(), params: outcome.params };
    save_warp(&a.out, &ckpt)?;
    if let Some(path) = &a.history {
        let mut text = String::new();
        for h in &outcome.history {
            let row = serde_json::json!({"epoch": h.epoch, "mean_loss": h.mean_loss, "metric": h.metric, "lr": h.lr});
            text.push_str(&row.to_string());
            text.push('\n');
        }
        write_file(path, &text)?;
    }
    writeln!(out, "selected epoch {} of {}", outcome.selected_epoch, config.epochs)?;
    if !task.dev.is_empty() {
        let template = Template::parse(&ckpt.template)?;
        let (m, _) = evaluate(&model, &ckpt.params, &template, &vocab, &task.dev, spec.metric)?;
        show_metric(out, "dev ", &spec, m)?;
    }
    Ok(())
}

fn split_of<'a>(task: &'a TaskDir, name: &str) -> anyhow::Result<&'a Dataset> {
    let split = parse_split(name)?;
    match task.split(split) {
        Some(d) if !d.is_empty() => Ok(d),
        _ => bail!("task has no {} examples", split.name()),
    }
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let model = load_lm(&a.lm)?;
    let vocab = vocab_for(&model)?;
    let task = load_task(&a.task, &vocab)?;
    let data = split_of(&task, &a.split)?;
    let preds: Vec<Prediction> = match (&a.warp, &a.ensemble) {
        (Some(path), _) => {
            let c = load_warp(path)?;
            let template = Template::parse(&c.template)?;
            evaluate(&model, &c.params, &template, &vocab, data, task.spec.metric)?.1
        }
        (None, Some(dir)) => {
            let e = load_ensemble(dir)?;
            let mode = match a.vote.as_str() {
                "majority" => VoteMode::Majority,
                "probsum" => VoteMode::ProbabilitySum,
                v => bail!("--vote: expected majority or probsum, got `{v}`"),
            };
            let inputs = prepare_inputs(&Template::parse(&e.template)?, &vocab, &data.examples, model.config.max_positions)?;
            let labels = ensemble_predict(&model, &e, &inputs, mode)?;
            labels.into_iter().map(|label| Prediction::Class { label, probs: Vec::new() }).collect()
        }
        (None, None) => bail!("one of --warp or --ensemble is required"),
    };
    let values: Vec<f64> = preds.iter().map(Prediction::value).collect();
    let m = compute_metric(task.spec.metric, &values, &data.golds())?;
    if let Some(path) = &a.predictions {
        write_file(path, &render_predictions(&preds, &task.spec))?;
    }
    show_metric(out, "", &task.spec, m)
}

fn fewshot(a: FewshotArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    if a.runs == 0 {
        bail!("--runs must be at least 1");
    }
    for &lr in &a.lrs {
        check_lr("--lrs", lr)?;
    }
    check_recipe(&a.recipe)?;
    let model = load_lm(&a.lm)?;
    let vocab = vocab_for(&model)?;
    let task = load_task(&a.task, &vocab)?;
    let spec = apply_recipe(&task.spec, &a.recipe)?;
    let runner = a.threads.map_or_else(Threaded::available, Threaded::new);
    let base = recipe_config(&spec, &a.recipe, 0.0, 0, false);
    let plan = FewShotPlan { n_runs: a.runs, split_train: a.split_train, ..FewShotPlan::new(a.lrs.clone(), base.clone(), a.seed) };
    let sel = select_lr(&model, &spec, &vocab, &task.train, &plan, &runner)?;
    for (lr, m) in &sel.means {
        writeln!(out, "lr {lr:e}: mean split {} {m:.6}", spec.metric.name())?;
    }
    writeln!(out, "selected lr {:e}", sel.lr)?;
    let seeds = run_seeds(rng::derive(a.seed, 1), a.runs);
    let ens = train_ensemble(&model, &spec, &vocab, &task.train, &base, sel.lr, &seeds, &runner)?;
    save_ensemble(&a.out, &ens)?;
    if !task.dev.is_empty() && !spec.kind.is_regression() {
        let inputs = prepare_inputs(&Template::parse(&ens.template)?, &vocab, &task.dev.examples, model.config.max_positions)?;
        let labels = ensemble_predict(&model, &ens, &inputs, VoteMode::Majority)?;
        let values: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
        show_metric(out, "ensemble dev ", &spec, compute_metric(spec.metric, &values, &task.dev.golds())?)?;
    }
    writeln!(out, "wrote {} members to {}", ens.len(), a.out.display())?;
    Ok(())
}

fn interpret(a: InterpretArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let model = load_lm(&a.lm)?;
    let vocab = vocab_for(&model)?;
    let c = load_warp(&a.warp)?;
    if c.params.embed_dim() != model.config.embed_dim {
        bail!("checkpoint embed dim {} does not match the model's {}", c.params.embed_dim(), model.config.embed_dim);
    }
    let classes = match &a.task {
        Some(dir) => load_task(dir, &vocab)?.spec.classes,
        None => Vec::new(),
    };
    let template = Template::parse(&c.template)?;
    let report = interpretation_report(&c.params, &template, &model.word_embeddings, &vocab, &classes, a.top_k)?;
    write!(out, "{report}")?;
    Ok(())
}

fn serve(a: ServeArgs) -> anyhow::Result<()> {
    let model = load_lm(&a.lm)?;
    let vocab = vocab_for(&model)?;
    let mut class_names = std::collections::BTreeMap::new();
    for dir in &a.task {
        let spec = load_task(dir, &vocab)?.spec;
        class_names.insert(spec.name.clone(), spec.classes);
    }
    let mut registry = TaskRegistry::new(&model, vocab);
    for path in &a.warp {
        let c = load_warp(path)?;
        let classes = class_names.get(&c.task).cloned().unwrap_or_default();
        registry
            .register(&c.task, Template::parse(&c.template)?, c.params, classes)
            .with_context(|| format!("registering {}", path.display()))?;
    }
    match &a.listen {
        Some(addr) => {
            let listener = TcpListener::bind(addr).with_context(|| format!("--listen {addr}"))?;
            eprintln!("listening on {}", listener.local_addr()?);
            serve_tcp(&registry, &listener, a.max_batch, None)?;
        }
        None => serve_stream(&registry, std::io::stdin().lock(), std::io::stdout().lock())?,
    }
    Ok(())
}

fn constant(a: ConstantArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let vocab = Vocab::synthetic(a.vocab).context("--vocab")?;
    let task = load_task(&a.task, &vocab)?;
    if task.spec.kind.is_regression() {
        bail!("a constant label needs a classification task");
    }
    let mut counts = vec![0usize; task.spec.classes.len()];
    for ex in &task.train.examples {
        if let Label::Class(c) = ex.label {
            counts[c] += 1;
        }
    }
    // ties go to the lowest class index
    let label = counts.iter().enumerate().fold(0, |best, (i, &n)| if n > counts[best] { i } else { best });
    let data = split_of(&task, &a.split)?;
    let preds = vec![Prediction::Class { label, probs: Vec::new() }; data.len()];
    if let Some(path) = &a.predictions {
        write_file(path, &render_predictions(&preds, &task.spec))?;
    }
    writeln!(out, "constant label {}", task.spec.classes[label])?;
    let m = compute_metric(task.spec.metric, &vec![label as f64; data.len()], &data.golds())?;
    show_metric(out, "", &task.spec, m)
}
