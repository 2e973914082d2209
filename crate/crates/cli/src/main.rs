use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use isan::basis::{
    apply_basis, bias_cosine_matrices, bias_subspace_norms, block_view, collect_states, find_counting_basis,
    pca_explained_variance, readout_split, CountingOptions,
};
use isan::checkpoint::{self, BasisRecord};
use isan::composition::{bench, build_table, TablePolicy};
use isan::data::{
    bigram_means, compare_bigram, compare_unigram, empirical_ngrams, gen_paren, load_text_corpus, Corpus, ProbSpace,
    Split, PAREN_NOISE,
};
use isan::decomposition::{
    decay_curve, kappa, position_in_word_ce, truncated_history_curve, word_contributions, PositionMode,
};
use isan::export::{self, HeatmapView};
use isan::model::{evaluate_bpc, sample, Mode, ModelParams};
use isan::training::{
    paren_accuracy, paren_mse, train_from, initial_model, LossConfig, OptimizerKind, Task, TrainingConfig,
};

/// Usage problems found after flag parsing; exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn as_display<T: std::fmt::Display, S: serde::Serializer>(v: &T, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_str(v)
}

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(UsageError(msg.into()).into())
}

#[derive(Parser, Debug)]
#[command(name = "isan", version, about = "Input-switched affine networks: training and analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on a text corpus or on the bracket-counting task.
    Train(TrainArgs),
    /// Score a checkpoint: bits per character, or MSE and accuracy on bracket streams.
    Eval(EvalArgs),
    /// Generate text from a prompt.
    Sample(SampleArgs),
    /// Per-step logit contributions of a text.
    Decompose(DecomposeArgs),
    /// Contributions aggregated over words.
    Words(WordsArgs),
    /// Contribution decay, truncated-history and word-position cross entropy.
    Decay(DecayArgs),
    /// Readout-subspace split, bias geometry and hidden-state PCA.
    Basis(BasisArgs),
    /// Compare the model's bias predictions with corpus n-grams.
    Ngram(NgramArgs),
    /// Find the counting basis of a bracket model and export its blocks.
    ParenReverse(ParenReverseArgs),
    /// Write a generated bracket dataset.
    ParenData(ParenDataArgs),
    /// Time per-token stepping against precomputed word maps.
    ComposeBench(ComposeBenchArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum TaskArg {
    Text,
    Paren,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum LossArg {
    Ce,
    L2,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum SpaceArg {
    Prob,
    Log,
}

impl From<SpaceArg> for ProbSpace {
    fn from(s: SpaceArg) -> Self {
        match s {
            SpaceArg::Prob => ProbSpace::Probability,
            SpaceArg::Log => ProbSpace::Log,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct Output {
    /// Directory for every artifact of the run (created if missing).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct CorpusArgs {
    /// Plain-text corpus, normalised to lowercase letters and spaces.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Read at most this many characters of the corpus.
    #[arg(long)]
    max_chars: Option<usize>,
}

impl CorpusArgs {
    fn load(&self) -> Result<Corpus> {
        let Some(path) = &self.corpus else {
            return usage("--corpus is required");
        };
        Ok(load_text_corpus(path, self.max_chars)?)
    }
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[command(flatten)]
    output: Output,
    #[arg(long, value_enum, default_value = "text")]
    task: TaskArg,
    #[command(flatten)]
    corpus: CorpusArgs,
    /// JSON training config; flags given on the command line override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from this checkpoint instead of a fresh initialisation.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// adam, adagrad or sgd.
    #[arg(long)]
    optimizer: Option<OptimizerKind>,
    #[arg(long)]
    lr: Option<f64>,
    /// Global gradient-norm clip; 0 disables clipping.
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Validation characters (text) or sequences (paren) per evaluation.
    #[arg(long)]
    eval_size: Option<usize>,
    #[arg(long)]
    lr_drop_at: Option<usize>,
    #[arg(long)]
    lr_drop_factor: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Probability of the noise symbol in bracket streams.
    #[arg(long, default_value_t = PAREN_NOISE)]
    p_noise: f64,
}

#[derive(Args, Debug, Serialize)]
struct CheckpointArg {
    /// Checkpoint directory (manifest.json + weights.bin).
    #[arg(long)]
    checkpoint: PathBuf,
}

impl CheckpointArg {
    fn load(&self) -> Result<ModelParams> {
        Ok(checkpoint::load(&self.checkpoint)?.params)
    }
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[command(flatten)]
    output: Output,
    #[command(flatten)]
    checkpoint: CheckpointArg,
    #[command(flatten)]
    corpus: CorpusArgs,
    /// train, validation or test.
    #[arg(long, default_value = "test")]
    #[serde(serialize_with = "as_display")]
    split: Split,
    /// Bracket models: number and length of held-out sequences.
    #[arg(long, default_value_t = 500)]
    samples: usize,
    #[arg(long, default_value_t = 50)]
    length: usize,
    #[arg(long, default_value_t = PAREN_NOISE)]
    p_noise: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args, Debug, Serialize)]
struct SampleArgs {
    #[command(flatten)]
    output: Output,
    #[command(flatten)]
    checkpoint: CheckpointArg,
    /// `_` may stand for a space.
    #[arg(long, default_value = "_")]
    prompt: String,
    #[arg(long, default_value_t = 200)]
    length: usize,
    /// Inverse temperature; `inf` decodes greedily.
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Serialize)]
struct DecomposeArgs {
    #[command(flatten)]
    output: Output,
    #[command(flatten)]
    checkpoint: CheckpointArg,
    /// Text to decompose; `_` may stand for a space.
    #[arg(long)]
    text: String,
    /// Also write one logit heatmap per listed symbol.
    #[arg(long, default_value = "")]
    symbols: String,
}

#[derive(Args, Debug, Serialize)]
struct WordsArgs {
    #[command(flatten)]
    output: Output,
    #[command(flatten)]
    checkpoint: CheckpointArg,
    #[arg(long)]
    text: String,
}

#[derive(Args, Debug, Serialize)]
struct DecayArgs {
    #[command(flatten)]
    output: Output,
    #[command(flatten)]
    checkpoint: CheckpointArg,
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long, default_value = "validation")]
    #[serde(serialize_with = "as_display")]
    split: Split,
    /// Length of the analysed excerpt.
    #[arg(long, default_value_t = 10_000)]
    tokens: usize,
    #[arg(long, default_value_t = 100)]
    max_lag: usize,
    #[arg(long, default_value_t = 20)]
    max_history: usize,
}

#[derive(Args, Debug, Serialize)]
struct BasisArgs {
    #[command(flatten)]
    output: Output,
    #[command(flatten)]
    checkpoint: CheckpointArg,
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Hidden states for PCA come from this many validation characters.
    #[arg(long, default_value_t = 10_000)]
    tokens: usize,
}

#[derive(Args, Debug, Serialize)]
struct NgramArgs {
    #[command(flatten)]
    output: Output,
    #[command(flatten)]
    checkpoint: CheckpointArg,
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long, value_enum, default_value = "prob")]
    space: SpaceArg,
}

#[derive(Args, Debug, Serialize)]
struct ParenReverseArgs {
    #[command(flatten)]
    output: Output,
    #[command(flatten)]
    checkpoint: CheckpointArg,
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, default_value_t = 50)]
    length: usize,
    #[arg(long, default_value_t = PAREN_NOISE)]
    p_noise: f64,
    #[arg(long, default_value_t = 5)]
    seed: u64,
    #[arg(long, default_value_t = CountingOptions::default().refine_steps)]
    refine_steps: usize,
    #[arg(long, default_value_t = CountingOptions::default().restarts)]
    restarts: usize,
}

#[derive(Args, Debug, Serialize)]
struct ParenDataArgs {
    #[command(flatten)]
    output: Output,
    #[arg(long, default_value_t = 100)]
    samples: usize,
    #[arg(long, default_value_t = 50)]
    length: usize,
    #[arg(long, default_value_t = PAREN_NOISE)]
    p_noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Serialize)]
struct ComposeBenchArgs {
    #[command(flatten)]
    output: Output,
    #[command(flatten)]
    checkpoint: CheckpointArg,
    #[command(flatten)]
    corpus: CorpusArgs,
    /// `top-words:K` or `ngrams:L`; tables are built from the training split.
    #[arg(long, default_value = "top-words:2000")]
    #[serde(serialize_with = "as_display")]
    policy: TablePolicy,
    /// Cap on stored reals across all table entries.
    #[arg(long)]
    max_reals: Option<usize>,
    /// Characters of the test split to time.
    #[arg(long, default_value_t = 100_000)]
    tokens: usize,
    #[arg(long, default_value_t = 5)]
    repetitions: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<UsageError>() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Decompose(a) => cmd_decompose(a),
        Command::Words(a) => cmd_words(a),
        Command::Decay(a) => cmd_decay(a),
        Command::Basis(a) => cmd_basis(a),
        Command::Ngram(a) => cmd_ngram(a),
        Command::ParenReverse(a) => cmd_paren_reverse(a),
        Command::ParenData(a) => cmd_paren_data(a),
        Command::ComposeBench(a) => cmd_compose_bench(a),
    }
}

/// Create the output directory and snapshot the command's arguments.
fn prepare<A: Serialize>(command: &str, out: &Path, args: &A, extra: serde_json::Value) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let snapshot = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "args": args,
        "resolved": extra,
    });
    write_json(&out.join("config.json"), &snapshot)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    use std::io::Write;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn encode(params: &ModelParams, text: &str) -> Result<Vec<usize>> {
    if !params.vocab.is_text() {
        return usage("this command needs a text model");
    }
    Ok(params.vocab.encode(text)?)
}

fn resolve_train_config(a: &TrainArgs) -> Result<TrainingConfig> {
    let mut c = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => match a.task {
            TaskArg::Text => TrainingConfig::text(),
            TaskArg::Paren => TrainingConfig::paren(),
        },
    };
    macro_rules! set {
        ($flag:expr, $field:expr) => {
            if let Some(v) = $flag {
                $field = v;
            }
        };
    }
    set!(a.hidden, c.hidden);
    set!(a.mode, c.mode);
    set!(a.seq_len, c.seq_len);
    set!(a.batch_size, c.batch_size);
    set!(a.optimizer, c.optimizer.kind);
    set!(a.lr, c.optimizer.learning_rate);
    set!(a.steps, c.max_steps);
    set!(a.eval_every, c.eval_every);
    set!(a.eval_size, c.eval_size);
    set!(a.seed, c.seed);
    set!(a.lr_drop_factor, c.lr_drop_factor);
    if let Some(at) = a.lr_drop_at {
        c.lr_drop_at = Some(at);
    }
    if let Some(clip) = a.clip {
        c.optimizer.clip_norm = (clip > 0.0).then_some(clip);
    }
    match a.loss {
        Some(LossArg::Ce) => c.loss = LossConfig::CrossEntropy,
        Some(LossArg::L2) => c.loss = LossConfig::L2,
        None => {}
    }
    match (a.task, c.loss) {
        (TaskArg::Text, LossConfig::L2) => return usage("the text task trains with --loss ce"),
        (TaskArg::Paren, LossConfig::CrossEntropy) => return usage("the paren task trains with --loss l2"),
        _ => {}
    }
    c.checkpoint_dir = Some(a.output.out.join("checkpoint"));
    c.validate().map_err(|e| UsageError(e.to_string()))?;
    Ok(c)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    if a.task == TaskArg::Text && a.corpus.corpus.is_none() {
        return usage("--corpus is required for the text task");
    }
    let config = resolve_train_config(&a)?;
    prepare("train", &a.output.out, &a, serde_json::to_value(&config)?)?;
    let corpus = match a.task {
        TaskArg::Text => Some(a.corpus.load()?),
        TaskArg::Paren => None,
    };
    let task = match &corpus {
        Some(c) => Task::Text {
            vocab: &c.vocab,
            train: &c.train,
            validation: &c.validation,
        },
        None => Task::Paren { p_noise: a.p_noise },
    };
    let params = match &a.init {
        Some(dir) => checkpoint::load(dir)?.params,
        None => initial_model(&config, &task)?,
    };
    let mut log = csv::Writer::from_writer(create(&a.output.out.join("metrics.csv"))?);
    let mut log_error = None;
    let outcome = train_from(&config, task, params, &mut |row| {
        eprintln!(
            "step {:>7}  train {:.4}  val {:.4}  |g| {:.3e}",
            row.step, row.train_bpc_or_mse, row.val_metric, row.grad_norm
        );
        if let Err(e) = log.serialize(row).and_then(|_| log.flush().map_err(Into::into)) {
            log_error.get_or_insert(e);
        }
    });
    if let Some(e) = log_error {
        return Err(e).context("writing metrics.csv");
    }
    let outcome = outcome?;
    checkpoint::save(&outcome.best, &a.output.out.join("best"), None)?;
    if let Some(last) = outcome.log.last() {
        println!("final validation metric {:.6} after {} steps", last.val_metric, last.step);
    }
    if let Some(row) = outcome.log.iter().find(|r| r.step == outcome.best_step) {
        println!("best validation metric {:.6} at step {} (saved to best/)", row.val_metric, row.step);
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    prepare("eval", &a.output.out, &a, json!(null))?;
    let params = a.checkpoint.load()?;
    let report = if params.vocab.is_text() {
        let corpus = a.corpus.load()?;
        if corpus.vocab != params.vocab {
            bail!("corpus and model vocabularies differ");
        }
        let tokens = corpus.split(a.split);
        let bpc = evaluate_bpc(&params, tokens)?;
        println!("{bpc:.6} bpc on {} characters", tokens.len());
        json!({ "split": a.split.to_string(), "tokens": tokens.len(), "bpc": bpc })
    } else {
        let samples = gen_paren(a.samples, a.length, a.p_noise, a.seed)?;
        let mse = paren_mse(&params, &samples)?;
        let acc = paren_accuracy(&params, &samples)?;
        println!("per-dim mse {mse:.3e}, accuracy {:.4} / {:.4}", acc[0], acc[1]);
        json!({ "samples": a.samples, "length": a.length, "mse": mse, "accuracy": acc })
    };
    write_json(&a.output.out.join("eval.json"), &report)
}

fn cmd_sample(a: SampleArgs) -> Result<()> {
    prepare("sample", &a.output.out, &a, json!(null))?;
    let params = a.checkpoint.load()?;
    let prompt = encode(&params, &a.prompt)?;
    let out = sample(&params, &prompt, a.length, a.beta, a.seed)?;
    let text = params.vocab.decode(&out)?;
    println!("{}{}", a.prompt, text);
    fs::write(a.output.out.join("sample.txt"), format!("{}{}\n", a.prompt, text))?;
    Ok(())
}

fn cmd_decompose(a: DecomposeArgs) -> Result<()> {
    prepare("decompose", &a.output.out, &a, json!(null))?;
    let params = a.checkpoint.load()?;
    let tokens = encode(&params, &a.text)?;
    let k = kappa(&params, &tokens)?;
    export::write_kappa_heatmap(create(&a.output.out.join("kappa_norm.csv"))?, &k, HeatmapView::Norm)?;
    for c in a.symbols.chars() {
        let x = params.vocab.index_of(c)?;
        let name = format!("kappa_logit_{}.csv", export::symbol_labels(&params.vocab)[x]);
        export::write_kappa_heatmap(create(&a.output.out.join(name))?, &k, HeatmapView::Logit(x))?;
    }
    // long-form stack: every source's share of the logit of the character that comes next
    let labels = export::symbol_labels(&params.vocab);
    let mut rows = Vec::new();
    for (t, &target) in tokens.iter().enumerate() {
        let bias = k.readout_bias()[target];
        rows.push(vec![t.to_string(), labels[target].clone(), "bias".into(), String::new(), bias.to_string()]);
        for s in 0..=t {
            let source = k.source_token(s).map_or("h0".to_string(), |x| labels[x].clone());
            let v = k.get(s, t)?[target];
            rows.push(vec![t.to_string(), labels[target].clone(), s.to_string(), source, v.to_string()]);
        }
    }
    export::write_table(
        create(&a.output.out.join("contributions.csv"))?,
        &["step", "target", "source", "source_symbol", "logit_contribution"],
        rows,
    )?;
    Ok(())
}

fn cmd_words(a: WordsArgs) -> Result<()> {
    prepare("words", &a.output.out, &a, json!(null))?;
    let params = a.checkpoint.load()?;
    let tokens = encode(&params, &a.text)?;
    let k = kappa(&params, &tokens)?;
    let words = word_contributions(&k)?;
    export::write_word_heatmap(create(&a.output.out.join("words.csv"))?, &words)?;
    Ok(())
}

fn excerpt<'a>(corpus: &'a Corpus, split: Split, n: usize) -> Result<&'a [usize]> {
    let tokens = corpus.split(split);
    if tokens.len() < 2 {
        bail!("the {split} split is too short");
    }
    Ok(&tokens[..n.min(tokens.len())])
}

fn cmd_decay(a: DecayArgs) -> Result<()> {
    prepare("decay", &a.output.out, &a, json!(null))?;
    let params = a.checkpoint.load()?;
    let corpus = a.corpus.load()?;
    let tokens = excerpt(&corpus, a.split, a.tokens)?;
    let out = &a.output.out;

    let decay = decay_curve(&params, tokens, a.max_lag)?;
    let rows = decay.mean_norm.iter().enumerate().skip(1).filter(|(lag, _)| decay.counts[*lag] > 0);
    export::write_pairs(create(&out.join("decay.csv"))?, ["lag", "mean_norm"], rows.map(|(l, &v)| (l, v)))?;

    let curve = truncated_history_curve(&params, tokens, a.max_history)?;
    export::write_pairs(
        create(&out.join("truncated_history.csv"))?,
        ["n", "bpc"],
        curve.iter().enumerate().map(|(n, &v)| (n, v)),
    )?;
    let full = evaluate_bpc(&params, tokens)?;
    write_json(&out.join("full_history.json"), &json!({ "tokens": tokens.len(), "bpc": full }))?;

    for mode in [PositionMode::All, PositionMode::OnlySpace, PositionMode::WithoutSpace] {
        let ce = position_in_word_ce(&params, tokens, mode)?;
        export::write_pairs(
            create(&out.join(format!("position_ce_{mode}.csv")))?,
            ["position", "median_bits"],
            ce.iter().map(|p| (p.position, p.median_bits)),
        )?;
    }
    Ok(())
}

fn cmd_basis(a: BasisArgs) -> Result<()> {
    prepare("basis", &a.output.out, &a, json!(null))?;
    let params = a.checkpoint.load()?;
    let corpus = a.corpus.load()?;
    if corpus.vocab != params.vocab {
        bail!("corpus and model vocabularies differ");
    }
    let out = &a.output.out;
    let split = readout_split(&params.readout.weight)?;
    let stats = empirical_ngrams(&corpus.train, params.vocab_size())?;
    let norms = bias_subspace_norms(&params, &split, &stats)?;
    let labels = export::symbol_labels(&params.vocab);
    export::write_table(
        create(&out.join("bias_norms.csv"))?,
        &["symbol", "full", "parallel", "perpendicular", "log_unigram"],
        (0..labels.len()).map(|x| {
            vec![
                labels[x].clone(),
                norms.full[x].to_string(),
                norms.parallel[x].to_string(),
                norms.perpendicular[x].to_string(),
                norms.log_unigram[x].to_string(),
            ]
        }),
    )?;
    write_json(
        &out.join("bias_correlations.json"),
        &json!({
            "readout_rank": split.rank(),
            "full": norms.corr_full,
            "parallel": norms.corr_parallel,
            "perpendicular": norms.corr_perpendicular,
        }),
    )?;
    let cos = bias_cosine_matrices(&params, &split);
    for (name, m) in [("full", &cos.full), ("parallel", &cos.parallel), ("perpendicular", &cos.perpendicular)] {
        export::write_matrix(create(&out.join(format!("cosine_{name}.csv")))?, m, Some(&labels), Some(&labels))?;
    }
    let tokens = excerpt(&corpus, Split::Validation, a.tokens)?;
    let states = collect_states(&params, &[tokens])?;
    let ratios = pca_explained_variance(&states)?;
    export::write_pairs(
        create(&out.join("pca.csv"))?,
        ["component", "explained_variance_ratio"],
        ratios.iter().enumerate().map(|(i, &r)| (i + 1, r)),
    )?;
    Ok(())
}

fn cmd_ngram(a: NgramArgs) -> Result<()> {
    prepare("ngram", &a.output.out, &a, json!(null))?;
    let params = a.checkpoint.load()?;
    let corpus = a.corpus.load()?;
    if corpus.vocab != params.vocab {
        bail!("corpus and model vocabularies differ");
    }
    let stats = empirical_ngrams(&corpus.train, params.vocab_size())?;
    let space = ProbSpace::from(a.space);
    let unigram = compare_unigram(&params, &stats, space)?;
    let rows = compare_bigram(&params, &stats, space)?;
    let labels = export::symbol_labels(&params.vocab);
    let cell = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    export::write_table(
        create(&a.output.out.join("bigram.csv"))?,
        &["symbol", "model_corr", "unigram_baseline_corr"],
        rows.iter().map(|r| {
            vec![
                labels[params.vocab.index_of(r.symbol)?].clone(),
                cell(r.model),
                cell(r.unigram_baseline),
            ]
            .into_iter()
            .map(Ok)
            .collect::<Result<Vec<String>>>()
        })
        .collect::<Result<Vec<_>>>()?,
    )?;
    let (model_mean, baseline_mean) = bigram_means(&rows);
    write_json(
        &a.output.out.join("summary.json"),
        &json!({
            "unigram_corr": unigram,
            "bigram_model_mean": model_mean,
            "bigram_baseline_mean": baseline_mean,
        }),
    )?;
    println!(
        "unigram corr {}, bigram mean {} vs baseline {}",
        cell(unigram),
        cell(model_mean),
        cell(baseline_mean)
    );
    Ok(())
}

fn cmd_paren_reverse(a: ParenReverseArgs) -> Result<()> {
    let options = CountingOptions {
        refine_steps: a.refine_steps,
        restarts: a.restarts,
        seed: a.seed,
        ..CountingOptions::default()
    };
    prepare(
        "paren-reverse",
        &a.output.out,
        &a,
        json!({ "ridge": options.ridge, "max_residual_rms": options.max_residual_rms, "refine_rate": options.refine_rate }),
    )?;
    let out = &a.output.out;
    let params = a.checkpoint.load()?;
    let samples = gen_paren(a.samples, a.length, a.p_noise, a.seed)?;
    let found = find_counting_basis(&params, &samples, &options)?;
    let moved = apply_basis(&params, &found.transform)?;
    checkpoint::save(
        &moved,
        &out.join("transformed"),
        Some(&BasisRecord::from_matrix(found.transform.matrix(), true)),
    )?;

    let views = block_view(&moved, isan::data::PAREN_CODE_DIM)?;
    export::write_table(
        create(&out.join("block_norms.csv"))?,
        &["symbol", "w_rr", "w_rc", "w_cr", "w_cc", "b_r", "b_c", "w_rc_identity_error"],
        views.iter().map(|(_, n)| {
            vec![
                n.symbol.to_string(),
                n.w_rr.to_string(),
                n.w_rc.to_string(),
                n.w_cr.to_string(),
                n.w_cc.to_string(),
                n.b_r.to_string(),
                n.b_c.to_string(),
                n.w_rc_identity_error.to_string(),
            ]
        }),
    )?;
    let names = ["open_round", "close_round", "open_square", "close_square", "noise"];
    for (x, (view, _)) in views.iter().enumerate() {
        let m = view.reassemble();
        export::write_matrix(create(&out.join(format!("matrix_{}.csv", names[x])))?, m.matrix(), None, None)?;
    }
    let first = &samples[0];
    let traj = isan::model::run(&moved, &first.tokens)?;
    let mut states = nalgebra::DMatrix::zeros(traj.states.len(), moved.hidden_dim());
    for (t, h) in traj.states.iter().enumerate() {
        states.set_row(t, &h.transpose());
    }
    let row_labels: Vec<String> = std::iter::once("h0".to_string())
        .chain(first.tokens.iter().map(|&x| params.vocab.symbol(x).map(String::from).unwrap_or_default()))
        .collect();
    export::write_matrix(create(&out.join("states.csv"))?, &states, Some(&row_labels), None)?;

    let worst = views
        .iter()
        .map(|(_, n)| (n.w_rr.max(n.w_cr) / n.w_rc, n.w_rc_identity_error))
        .fold((0.0f64, 0.0f64), |acc, v| (acc.0.max(v.0), acc.1.max(v.1)));
    write_json(
        &out.join("summary.json"),
        &json!({
            "span_dim": found.span_dim,
            "residual_rms": found.residual_rms,
            "residual_max": found.residual_max,
            "condition": found.transform.condition(),
            "sparsity_before": found.sparsity_before,
            "sparsity_after": found.sparsity_after,
            "worst_off_block_ratio": worst.0,
            "worst_identity_error": worst.1,
        }),
    )?;
    println!(
        "counting basis: span {} residual {:.3e} worst off-block ratio {:.3} identity error {:.3}",
        found.span_dim, found.residual_rms, worst.0, worst.1
    );
    Ok(())
}

fn cmd_paren_data(a: ParenDataArgs) -> Result<()> {
    prepare("paren-data", &a.output.out, &a, json!(null))?;
    let samples = gen_paren(a.samples, a.length, a.p_noise, a.seed)?;
    let mut text = String::new();
    for s in &samples {
        text.push_str(&s.to_line());
        text.push('\n');
    }
    fs::write(a.output.out.join("paren.txt"), text)?;
    Ok(())
}

fn cmd_compose_bench(a: ComposeBenchArgs) -> Result<()> {
    prepare("compose-bench", &a.output.out, &a, json!(null))?;
    let params = a.checkpoint.load()?;
    let corpus = a.corpus.load()?;
    if corpus.vocab != params.vocab {
        bail!("corpus and model vocabularies differ");
    }
    let table = build_table(&params, &corpus.train, a.policy, a.max_reals)?;
    let tokens = excerpt(&corpus, Split::Test, a.tokens)?;
    let report = bench(&params, &table, tokens, a.repetitions)?;
    println!(
        "{} entries, {} hits / {} misses, speedup {:.2}x (matvec ratio {:.2})",
        report.entries, report.hits, report.misses, report.speedup, report.matvec_ratio
    );
    write_json(&a.output.out.join("bench.json"), &report)
}
