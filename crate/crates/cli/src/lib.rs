//! Command-line front end for the aspect-term-extraction engine.
//!
//! Exit codes: 0 success, 1 bad flags, 2 data errors (reported as
//! `file:line: message`), 3 numeric failure during training, 4 gradient
//! check over threshold. Reports go to standard output, diagnostics to
//! standard error.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use bidtreecrf::bidtree::WeightSharing;
use bidtreecrf::corpus::{
    self, parse_corpus, random_embeddings, CorpusError, DepTree, EmbeddingTable, Vocabulary,
};
use bidtreecrf::pipeline::{
    build_model, load_model, model_grad_check, save_model, Ablation, Model, ModelConfig,
    TrainError, TrainHistory,
};
use bidtreecrf::synthetic;

const EXIT_OK: i32 = 0;
const EXIT_FLAGS: i32 = 1;
const EXIT_DATA: i32 = 2;
const EXIT_NUMERIC: i32 = 3;
const EXIT_GRADCHECK: i32 = 4;

#[derive(Parser)]
#[command(
    name = "bidtreecrf",
    version,
    about = "Aspect term extraction with a bidirectional dependency-tree LSTM, BiLSTM, and CRF"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write it to --out
    Train(TrainArgs),
    /// Label a corpus and print its aspect spans
    Predict(PredictArgs),
    /// Score predictions against gold labels (span-exact P/R/F1)
    Eval(EvalArgs),
    /// Verify analytic gradients against finite differences
    Gradcheck(GradcheckArgs),
    /// Print corpus and embedding statistics
    Inspect(InspectArgs),
}

#[derive(Args, Clone)]
struct ModelFlags {
    /// Word/relation embedding dimension d
    #[arg(long, default_value_t = 300)]
    dim: usize,
    /// Weight-sharing variant: 1 shared, 2 per-relation forget, 3 per-relation
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u8).range(1..=3))]
    variant: u8,
    /// Model wiring: full|dtree-up|dtree-down|bidtree-crf|bilstm-crf
    #[arg(long, default_value = "full", value_parser = parse_ablation)]
    ablation: Ablation,
    /// Drop the relation-embedding terms from gate pre-activations
    #[arg(long)]
    no_relation_terms: bool,
    /// Dropout rate on encoder outputs
    #[arg(long, default_value_t = 0.5)]
    dropout: f64,
    /// L2 regularization coefficient
    #[arg(long, default_value_t = 0.001)]
    l2: f64,
    /// Adam learning rate
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    /// Mini-batch size
    #[arg(long, default_value_t = 20)]
    batch: usize,
    /// Global gradient-norm clip
    #[arg(long, default_value_t = 5.0)]
    clip: f64,
    /// Early-stopping patience in epochs
    #[arg(long, default_value_t = 5)]
    patience: usize,
    /// Maximum training epochs
    #[arg(long, default_value_t = 100)]
    max_epochs: usize,
    /// Run seed (parameters, shuffling, dropout)
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Reject training sentences longer than this
    #[arg(long, default_value_t = 200)]
    max_sentence_len: usize,
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    Ablation::parse(s).ok_or_else(|| {
        format!("{s:?} is not one of full, dtree-up, dtree-down, bidtree-crf, bilstm-crf")
    })
}

impl ModelFlags {
    fn to_config(&self) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            variant: WeightSharing::from_index(self.variant).expect("range-checked"),
            ablation: self.ablation,
            use_relation_terms: !self.no_relation_terms,
            dropout: self.dropout,
            l2: self.l2,
            lr: self.lr,
            batch_size: self.batch,
            clip_norm: self.clip,
            patience: self.patience,
            max_epochs: self.max_epochs,
            seed: self.seed,
            max_sentence_len: self.max_sentence_len,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Labeled training corpus
    #[arg(long)]
    corpus: PathBuf,
    /// Labeled validation corpus for early stopping
    #[arg(long)]
    dev: PathBuf,
    /// Pretrained word vectors (text format)
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Initialize all word vectors randomly instead of loading a file
    #[arg(long)]
    random_embeddings: bool,
    /// Where to write the trained model
    #[arg(long)]
    out: PathBuf,
    /// Worker threads for per-sentence forward/backward
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Repeat training this many times (seed, seed+1, ...) and report
    /// mean and standard deviation of the F1 scores
    #[arg(long, default_value_t = 1)]
    runs: usize,
    /// Labeled test corpus scored after each run
    #[arg(long)]
    test: Option<PathBuf>,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Args)]
struct PredictArgs {
    /// Trained model file
    #[arg(long)]
    model: PathBuf,
    /// Corpus to label (labels optional, ignored)
    #[arg(long)]
    input: PathBuf,
    /// Write span lines here instead of standard output
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Trained model file
    #[arg(long)]
    model: PathBuf,
    /// Labeled corpus to score
    #[arg(long)]
    input: PathBuf,
    /// Expected embedding dimension; the model file's config wins
    #[arg(long)]
    dim: Option<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Corpus whose first sentence is checked (default: built-in fixture)
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Maximum relative error accepted per parameter group
    #[arg(long, default_value_t = 1e-4)]
    threshold: f64,
    /// Finite-difference step
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    /// Coordinates sampled per parameter tensor
    #[arg(long, default_value_t = 64)]
    max_coords: usize,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Args)]
struct InspectArgs {
    /// Corpus to summarize
    #[arg(long)]
    corpus: PathBuf,
    /// Embedding file to check coverage against the corpus vocabulary
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Embedding dimension (required with --embeddings)
    #[arg(long)]
    dim: Option<usize>,
    /// Seed for the random rows of missing words
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

/// Parse and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_FLAGS,
            };
            let _ = e.print();
            return code;
        }
    };
    match cli.cmd {
        Cmd::Train(args) => cmd_train(args),
        Cmd::Predict(args) => cmd_predict(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Gradcheck(args) => cmd_gradcheck(args),
        Cmd::Inspect(args) => cmd_inspect(args),
    }
}

fn report_corpus_error(path: &Path, err: &CorpusError) {
    match err.line() {
        Some(line) => eprintln!("{}:{line}: {err}", path.display()),
        None => eprintln!("{}: {err}", path.display()),
    }
}

fn read_corpus(path: &Path) -> Result<Vec<DepTree>, i32> {
    let file = File::open(path).map_err(|e| {
        eprintln!("{}: {e}", path.display());
        EXIT_DATA
    })?;
    parse_corpus(BufReader::new(file)).map_err(|e| {
        report_corpus_error(path, &e);
        EXIT_DATA
    })
}

fn load_table(
    path: &Path,
    vocab: &Vocabulary,
    dim: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EmbeddingTable, i32> {
    let file = File::open(path).map_err(|e| {
        eprintln!("{}: {e}", path.display());
        EXIT_DATA
    })?;
    corpus::load_embeddings(BufReader::new(file), vocab, dim, rng).map_err(|e| {
        eprintln!("{}: {e}", path.display());
        EXIT_DATA
    })
}

fn warn_unknown_relations(model: &Model, sentences: &[DepTree]) {
    let mut unknown: Vec<&str> = Vec::new();
    for tree in sentences {
        for t in tree.tokens() {
            if !model.vocab.contains_relation(&t.relation) && !unknown.contains(&t.relation.as_str())
            {
                unknown.push(&t.relation);
            }
        }
    }
    if !unknown.is_empty() {
        eprintln!(
            "warning: {} relation type(s) not in the model vocabulary, mapped to <unk>: {}",
            unknown.len(),
            unknown.join(", ")
        );
    }
}

fn percent(x: f64) -> f64 {
    100.0 * x
}

fn cmd_train(args: TrainArgs) -> i32 {
    if args.embeddings.is_some() == args.random_embeddings {
        eprintln!("error: exactly one of --embeddings <FILE> or --random-embeddings is required");
        return EXIT_FLAGS;
    }
    if args.runs == 0 {
        eprintln!("error: --runs must be at least 1");
        return EXIT_FLAGS;
    }
    let train_corpus = match read_corpus(&args.corpus) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let dev_corpus = match read_corpus(&args.dev) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let test_corpus = match &args.test {
        None => None,
        Some(path) => match read_corpus(path) {
            Ok(c) => Some(c),
            Err(code) => return code,
        },
    };
    let vocab = Vocabulary::build(&train_corpus);
    let base = args.model.to_config();

    let mut dev_f1s = Vec::with_capacity(args.runs);
    let mut test_f1s = Vec::with_capacity(args.runs);
    let mut best: Option<(f64, Model, TrainHistory)> = None;

    for run in 0..args.runs {
        let config = ModelConfig {
            seed: base.seed.wrapping_add(run as u64),
            ..base.clone()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let table = match &args.embeddings {
            Some(path) => match load_table(path, &vocab, config.dim, &mut rng) {
                Ok(t) => t,
                Err(code) => return code,
            },
            None => random_embeddings(&vocab, config.dim, &mut rng),
        };
        if table.oov_count() > 0 && args.embeddings.is_some() {
            eprintln!(
                "note: {} vocabulary word(s) missing from the embedding file, randomly initialized",
                table.oov_count()
            );
        }
        let model = match build_model(config, vocab.clone(), &table) {
            Ok(m) => m,
            Err(e) => {
                eprintln!("error: {e}");
                return EXIT_DATA;
            }
        };
        let (model, history) = match model.train(&train_corpus, &dev_corpus, args.workers) {
            Ok(out) => out,
            Err(TrainError::NonFiniteLoss { epoch, batch }) => {
                eprintln!("error: non-finite loss at epoch {epoch}, batch {batch}");
                return EXIT_NUMERIC;
            }
            Err(e) => {
                eprintln!("error: {e}");
                return EXIT_DATA;
            }
        };

        if args.runs > 1 {
            println!("run {run}: seed {}", model.config.seed);
        }
        for (i, ep) in history.epochs.iter().enumerate() {
            println!(
                "epoch {:>3}  loss {:>12.6}  dev-F1 {:.1}",
                i + 1,
                ep.train_loss,
                percent(ep.val_f1)
            );
        }
        let dev_f1 = history.best_val_f1();
        println!(
            "best epoch {} (dev-F1 {:.1}, {})",
            history.best_epoch,
            percent(dev_f1),
            match history.stop {
                bidtreecrf::pipeline::StopReason::EarlyStopped => "early stop",
                bidtreecrf::pipeline::StopReason::MaxEpochs => "max epochs",
            }
        );
        dev_f1s.push(percent(dev_f1));
        if let Some(test) = &test_corpus {
            warn_unknown_relations(&model, test);
            match model.evaluate(test) {
                Ok(report) => {
                    println!("test-F1 {:.1}", percent(report.f1));
                    test_f1s.push(percent(report.f1));
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    return EXIT_DATA;
                }
            }
        }
        match &best {
            Some((f1, _, _)) if *f1 >= dev_f1 => {}
            _ => best = Some((dev_f1, model, history)),
        }
    }

    if args.runs > 1 {
        let (mean, std) = mean_std(&dev_f1s);
        println!("dev-F1 over {} runs: {mean:.2} \u{00b1} {std:.2}", args.runs);
        if !test_f1s.is_empty() {
            let (mean, std) = mean_std(&test_f1s);
            println!("test-F1 over {} runs: {mean:.2} \u{00b1} {std:.2}", args.runs);
        }
    }

    let (_, model, _) = best.expect("at least one run");
    if let Err(e) = save_model(&model, &args.out) {
        eprintln!("{}: {e}", args.out.display());
        return EXIT_DATA;
    }
    EXIT_OK
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn open_model(path: &Path) -> Result<Model, i32> {
    load_model(path).map_err(|e| {
        eprintln!("{}: {e}", path.display());
        EXIT_DATA
    })
}

fn cmd_predict(args: PredictArgs) -> i32 {
    let model = match open_model(&args.model) {
        Ok(m) => m,
        Err(code) => return code,
    };
    let corpus = match read_corpus(&args.input) {
        Ok(c) => c,
        Err(code) => return code,
    };
    warn_unknown_relations(&model, &corpus);
    let spans = model.predict(&corpus);
    let out: Box<dyn Write> = match &args.output {
        Some(path) => match File::create(path) {
            Ok(f) => Box::new(BufWriter::new(f)),
            Err(e) => {
                eprintln!("{}: {e}", path.display());
                return EXIT_DATA;
            }
        },
        None => Box::new(std::io::stdout().lock()),
    };
    let mut out = out;
    for (sent_id, sentence_spans) in spans.iter().enumerate() {
        for s in sentence_spans {
            if writeln!(out, "{}\t{}\t{}\t{}", sent_id + 1, s.begin, s.end, s.text).is_err() {
                eprintln!("error writing predictions");
                return EXIT_DATA;
            }
        }
    }
    EXIT_OK
}

fn cmd_eval(args: EvalArgs) -> i32 {
    let model = match open_model(&args.model) {
        Ok(m) => m,
        Err(code) => return code,
    };
    if let Some(dim) = args.dim {
        if dim != model.config.dim {
            eprintln!(
                "warning: --dim {dim} ignored; the model file was trained with dim {}",
                model.config.dim
            );
        }
    }
    let corpus = match read_corpus(&args.input) {
        Ok(c) => c,
        Err(code) => return code,
    };
    warn_unknown_relations(&model, &corpus);
    match model.evaluate(&corpus) {
        Ok(report) => {
            println!(
                "P: {:.1} R: {:.1} F1: {:.1}",
                percent(report.precision),
                percent(report.recall),
                percent(report.f1)
            );
            EXIT_OK
        }
        Err(e) => {
            eprintln!("{}: {e}", args.input.display());
            EXIT_DATA
        }
    }
}

fn cmd_gradcheck(args: GradcheckArgs) -> i32 {
    let corpus = match &args.corpus {
        Some(path) => match read_corpus(path) {
            Ok(c) => c,
            Err(code) => return code,
        },
        None => synthetic::gradcheck_fixture(),
    };
    let Some(first) = corpus.first() else {
        eprintln!("error: gradcheck corpus is empty");
        return EXIT_DATA;
    };
    if first.labels().is_none() {
        eprintln!("error: gradcheck sentence has no gold labels");
        return EXIT_DATA;
    }
    let config = args.model.to_config();
    let sample = vec![first.clone()];
    let vocab = Vocabulary::build(&sample);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let table = random_embeddings(&vocab, config.dim, &mut rng);
    let mut model = match build_model(config, vocab, &table) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_DATA;
        }
    };
    let batch = vec![first];
    let checks = match model_grad_check(&mut model, &batch, args.eps, args.max_coords) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_DATA;
        }
    };
    let mut failed = Vec::new();
    for c in &checks {
        println!(
            "{:<28} max_rel_err {:>12.3e}  ({} coords)",
            c.name, c.max_rel_err, c.coords_checked
        );
        if c.max_rel_err >= args.threshold {
            failed.push(c);
        }
    }
    if failed.is_empty() {
        println!("gradcheck OK: all {} groups below {:.1e}", checks.len(), args.threshold);
        EXIT_OK
    } else {
        println!("gradcheck FAILED: {} group(s) at or above {:.1e}", failed.len(), args.threshold);
        for c in failed {
            println!(
                "  {} coord {}: analytic {:.9e} vs numeric {:.9e}",
                c.name, c.worst_coord, c.analytic_at_worst, c.numeric_at_worst
            );
        }
        EXIT_GRADCHECK
    }
}

fn cmd_inspect(args: InspectArgs) -> i32 {
    let corpus = match read_corpus(&args.corpus) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let vocab = Vocabulary::build(&corpus);
    let tokens: usize = corpus.iter().map(|t| t.len()).sum();
    let labeled = corpus.iter().filter(|t| t.labels().is_some()).count();
    let mut label_counts = [0usize; 3];
    let mut aspect_spans = 0usize;
    for tree in &corpus {
        if let Some(labels) = tree.labels() {
            for l in &labels {
                label_counts[l.id()] += 1;
            }
            let surfaces = tree.surfaces();
            aspect_spans += bidtreecrf::spans::decode_spans(&labels, &surfaces)
                .map(|s| s.len())
                .unwrap_or(0);
        }
    }
    println!("sentences: {}", corpus.len());
    println!("tokens: {tokens}");
    println!("labeled sentences: {labeled}");
    println!(
        "labels: B-AP {} I-AP {} O {} (spans: {aspect_spans})",
        label_counts[0], label_counts[1], label_counts[2]
    );
    println!(
        "vocabulary: {} words, {} forward relations, {} inverse relations",
        vocab.num_words(),
        vocab.num_fwd_relations(),
        vocab.num_inv_relations()
    );
    println!("relations: {}", vocab.fwd_relations().join(" "));

    if let Some(path) = &args.embeddings {
        let Some(dim) = args.dim else {
            eprintln!("error: --embeddings requires --dim");
            return EXIT_FLAGS;
        };
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
        let table = match load_table(path, &vocab, dim, &mut rng) {
            Ok(t) => t,
            Err(code) => return code,
        };
        println!(
            "embedding coverage: {}/{} vocabulary words in file ({} randomly initialized)",
            vocab.num_words() - table.oov_count(),
            vocab.num_words(),
            table.oov_count()
        );
    }
    EXIT_OK
}
