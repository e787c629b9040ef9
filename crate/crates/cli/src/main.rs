//! `qa-cnn`: synthetic data, training, evaluation, prediction and gradient
//! checks from the command line.

mod config;

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use qa_cnn::data::{
    build_vocabs_truncated, generate_synthetic, load_triplets, save_triplets, shuffle_question_words, tokenize, AnswerVocab, Vocab,
};
use qa_cnn::image::{load_features, ImageFeatureStore, DEFAULT_FEATURE_DIM};
use qa_cnn::layers::Activation;
use qa_cnn::metrics::TaxonomyTree;
use qa_cnn::model::load_checkpoint;
use qa_cnn::trainer::{evaluate, gradient_check, EvalSet, GradCheckReport, Trainer, GRADCHECK_TOLERANCE};
use qa_cnn::{Mode, Model, ModelConfig};

use config::{set, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] qa_cnn::Error),
    #[error("{0}")]
    Check(String),
    #[error("{}: {source}", path.display())]
    File { path: PathBuf, source: qa_cnn::Error },
}

/// Attaches the offending path to a file-level error.
fn at<T>(path: &Path, r: qa_cnn::Result<T>) -> Result<T, Failure> {
    r.map_err(|source| Failure::File {
        path: path.to_path_buf(),
        source,
    })
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) | Failure::Runtime(qa_cnn::Error::Argument(_)) => 2,
            Failure::Runtime(_) | Failure::Check(_) | Failure::File { .. } => 1,
        }
    }
}

type Outcome = Result<(), Failure>;

#[derive(Debug, Parser)]
#[command(name = "qa-cnn", version, about = "Convolutional image question answering", args_override_self = true)]
struct Cli {
    /// Worker threads for batch gradients and evaluation.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log level: error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "warn")]
    log_level: log::LevelFilter,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint plus a JSON-lines log.
    Train(TrainArgs),
    /// Score a checkpoint on a triplet file and print a JSON report.
    Eval(EvalArgs),
    /// Answer one question.
    Predict(PredictArgs),
    /// Compare analytic and finite-difference gradients on a tiny model.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    samples: Option<usize>,
    /// Extra samples written to `test.tsv`, sharing the feature file.
    #[arg(long, default_value_t = 0)]
    test_samples: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    objects: Option<usize>,
    #[arg(long)]
    colors: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    /// Write features in the binary format.
    #[arg(long)]
    binary: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training triplet file.
    #[arg(long)]
    train: Option<PathBuf>,
    /// Held-out triplets evaluated during training.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    taxonomy: Option<PathBuf>,
    /// Output directory for the checkpoint, log and resolved config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    mode: Option<Mode>,
    /// Seeds both initialization and shuffling.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_decay: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    /// Sentence feature maps per stage, e.g. `300,400,400`.
    #[arg(long, value_delimiter = ',')]
    feature_maps: Option<Vec<usize>>,
    #[arg(long)]
    multimodal_maps: Option<usize>,
    #[arg(long)]
    embedding_init: Option<f64>,
    #[arg(long)]
    activation: Option<Activation>,
    #[arg(long)]
    max_answers: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Triplets to score.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    features: Option<PathBuf>,
    /// Adds WUPS@0.0 and WUPS@0.9 to the report.
    #[arg(long)]
    taxonomy: Option<PathBuf>,
    /// Reshuffle the words of every question with this seed before scoring.
    #[arg(long, value_name = "SEED")]
    shuffle_questions: Option<u64>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    question: String,
    #[arg(long)]
    image: Option<String>,
    #[arg(long)]
    features: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Check one mode only.
    #[arg(long)]
    mode: Option<Mode>,
    /// First seed; `--seeds` consecutive seeds are checked per mode.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long, hide = true)]
    corrupt_backward: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().filter_level(cli.log_level).format_timestamp(None).init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().expect("thread pool configured once");
    }
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.exit_code() == 2 {
                eprintln!("run with --help for usage");
            }
            ExitCode::from(e.exit_code())
        }
    }
}

fn require<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, Failure> {
    value.as_deref().ok_or_else(|| Failure::Usage(format!("missing --{flag}")))
}

fn create_dir(dir: &Path) -> Outcome {
    fs::create_dir_all(dir).map_err(|e| Failure::Runtime(e.into()))
}

fn synth(a: SynthArgs) -> Outcome {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    let synth = &mut cfg.synth;
    set!(synth.samples, a.samples);
    set!(synth.seed, a.seed);
    set!(synth.objects, a.objects);
    set!(synth.colors, a.colors);
    set!(synth.feature_dim, a.feature_dim);
    set!(synth.noise, a.noise);
    if a.out.is_some() {
        cfg.data.out = a.out.clone();
    }
    let out = require(&cfg.data.out, "out")?.to_path_buf();
    synth.validate()?;

    let train_n = synth.samples;
    let mut full = synth.clone();
    full.samples += a.test_samples;
    let data = generate_synthetic(&full)?;
    create_dir(&out)?;
    let (train, test) = data.split(train_n);
    save_triplets(out.join("triplets.tsv"), &train)?;
    if !test.is_empty() {
        save_triplets(out.join("test.tsv"), &test)?;
    }
    let feature_file = out.join(if a.binary { "features.bin" } else { "features.txt" });
    data.features.save(&feature_file)?;
    let mut sidecar = BufWriter::new(File::create(out.join("scenes.json")).map_err(qa_cnn::Error::from)?);
    data.write_scenes_json(&mut sidecar)?;
    sidecar.flush().map_err(qa_cnn::Error::from)?;
    cfg.save(&out)?;
    println!(
        "wrote {} training and {} test triplets, {} feature vectors to {}",
        train.len(),
        test.len(),
        data.features.len(),
        out.display()
    );
    Ok(())
}

fn load_store(path: Option<&Path>, mode: Mode) -> Result<Option<ImageFeatureStore>, Failure> {
    match path {
        Some(p) => Ok(Some(at(p, load_features(p))?)),
        None if mode.uses_image() => Err(Failure::Usage(format!("--features is required in {mode} mode"))),
        None => Ok(None),
    }
}

fn train(a: TrainArgs) -> Outcome {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    let (m, t, d) = (&mut cfg.model, &mut cfg.train, &mut cfg.data);
    set!(m.mode, a.mode);
    set!(m.dropout, a.dropout);
    set!(m.max_len, a.max_len);
    set!(m.embed_dim, a.embed_dim);
    set!(m.multimodal_maps, a.multimodal_maps);
    set!(m.embedding_init, a.embedding_init);
    set!(m.activation, a.activation);
    if let Some(maps) = &a.feature_maps {
        m.feature_maps = maps
            .as_slice()
            .try_into()
            .map_err(|_| Failure::Usage(format!("--feature-maps takes 3 values, got {}", maps.len())))?;
    }
    if let Some(seed) = a.seed {
        m.seed = seed;
        t.seed = seed;
    }
    set!(t.learning_rate, a.lr);
    set!(t.epochs, a.epochs);
    set!(t.batch_size, a.batch_size);
    set!(t.eval_every, a.eval_every);
    if a.lr_decay.is_some() {
        t.lr_decay = a.lr_decay;
    }
    if a.checkpoint_every.is_some() {
        t.checkpoint_every = a.checkpoint_every;
    }
    for (slot, flag) in [
        (&mut d.train, &a.train),
        (&mut d.test, &a.test),
        (&mut d.features, &a.features),
        (&mut d.taxonomy, &a.taxonomy),
        (&mut d.out, &a.out),
    ] {
        if flag.is_some() {
            *slot = flag.clone();
        }
    }
    if a.max_answers.is_some() {
        d.max_answers = a.max_answers;
    }
    t.validate()?;
    let out = require(&cfg.data.out, "out")?.to_path_buf();
    let train_path = require(&cfg.data.train, "train")?;

    let train = at(train_path, load_triplets(train_path))?;
    if train.is_empty() {
        return Err(Failure::Usage(format!("{} holds no triplets", train_path.display())));
    }
    let test = cfg.data.test.as_deref().map(|p| at(p, load_triplets(p))).transpose()?;
    let taxonomy = cfg.data.taxonomy.as_deref().map(|p| at(p, TaxonomyTree::load(p))).transpose()?;
    let store = load_store(cfg.data.features.as_deref(), cfg.model.mode)?;
    let (vocab, answers) = build_vocabs_truncated(&train, cfg.data.max_answers);
    let feature_dim = cfg
        .model
        .feature_dim
        .or_else(|| store.as_ref().and_then(|s| s.dim()))
        .unwrap_or(DEFAULT_FEATURE_DIM);
    let model_config = cfg.model.resolve(vocab.len(), answers.len(), feature_dim);
    let mut model = Model::new(model_config)?;
    info!("{} parameters, {} answer classes", model.params.num_params(), answers.len());

    create_dir(&out)?;
    cfg.save(&out)?;
    let mut log = BufWriter::new(File::create(out.join("train_log.jsonl")).map_err(qa_cnn::Error::from)?);
    let mut trainer = Trainer::new(cfg.train.clone(), &vocab, &answers, store.as_ref());
    trainer.eval = test.as_deref().map(|triplets| EvalSet {
        triplets,
        taxonomy: taxonomy.as_ref(),
    });
    trainer.log = Some(&mut log);
    trainer.checkpoint = Some(out.join("model.ckpt"));
    let records = trainer.run(&mut model, &train)?;
    if let Some(last) = records.last() {
        println!("{}", serde_json::to_string(last).expect("record serializes"));
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<(Model, Vocab, AnswerVocab), Failure> {
    let (model, header) = at(path, load_checkpoint(path, None))?;
    let vocab = Vocab::from_tokens(header.question_vocab)?;
    let answers = AnswerVocab::from_answers(header.answers)?;
    Ok((model, vocab, answers))
}

fn eval(a: EvalArgs) -> Outcome {
    let (model, vocab, answers) = load_model(&a.checkpoint)?;
    let store = load_store(a.features.as_deref(), model.config.mode)?;
    let taxonomy = a.taxonomy.as_deref().map(|p| at(p, TaxonomyTree::load(p))).transpose()?;
    let mut triplets = at(&a.data, load_triplets(&a.data))?;
    if triplets.is_empty() {
        return Err(Failure::Usage(format!("{} holds no triplets", a.data.display())));
    }
    if let Some(seed) = a.shuffle_questions {
        triplets = shuffle_question_words(&triplets, seed);
    }
    let report = evaluate(&model, &triplets, &vocab, &answers, store.as_ref(), taxonomy.as_ref())?;
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    Ok(())
}

fn predict(a: PredictArgs) -> Outcome {
    let (model, vocab, answers) = load_model(&a.checkpoint)?;
    let tokens = tokenize(&a.question);
    if tokens.is_empty() {
        return Err(Failure::Usage("empty question".into()));
    }
    let store = load_store(a.features.as_deref(), model.config.mode)?;
    let image = match (&store, model.config.mode.uses_image()) {
        (Some(store), true) => {
            let id = a.image.as_deref().ok_or_else(|| Failure::Usage("--image is required with image features".into()))?;
            Some(store.require(id)?)
        }
        _ => None,
    };
    let class = model.predict(&vocab.encode(&tokens), image)?;
    println!("{}", answers.answer(class).expect("class inside answer set"));
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Outcome {
    if a.seeds == 0 {
        return Err(Failure::Usage("--seeds must be at least 1".into()));
    }
    let modes: Vec<Mode> = match a.mode {
        Some(m) => vec![m],
        None => Mode::ALL.to_vec(),
    };
    let mut all_pass = true;
    let stdout = io::stdout();
    let mut out = stdout.lock();
    for mode in modes {
        let config = ModelConfig::tiny(mode);
        let mut worst = None;
        for seed in a.seed..a.seed + a.seeds {
            let report = gradient_check(&config, seed, a.corrupt_backward)?;
            if worst.as_ref().map_or(true, |w: &GradCheckReport| report.max_relative_error > w.max_relative_error) {
                worst = Some(report);
            }
        }
        let r = worst.expect("at least one seed");
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        all_pass &= r.passed();
        writeln!(
            out,
            "{verdict} {mode}: max relative error {:.3e} at {}[{}] (analytic {:.6e}, numeric {:.6e}, seed {}, {} coordinates)",
            r.max_relative_error, r.worst_group, r.worst_offset, r.analytic, r.numeric, r.seed, r.checked
        )
        .map_err(qa_cnn::Error::from)?;
    }
    if all_pass {
        Ok(())
    } else {
        Err(Failure::Check(format!("relative error at or above {GRADCHECK_TOLERANCE}")))
    }
}
