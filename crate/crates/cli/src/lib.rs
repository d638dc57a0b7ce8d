//! Command-line driver: data generation and conversion, training,
//! evaluation, few-shot sweeps and an interactive demo.

pub mod chat;
pub mod config;

use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use protodiag::corpus::{generate_synthetic, load_corpus, validate_corpus, Corpus, CorpusError};
use protodiag::experiments::{
    results_to_string, run_fewshot_all_folds, run_supervised, AgentKind, Checkpoint, Fold,
    Protocol, ResultRow, ResultsTable, RunMetadata,
};
use protodiag::muzhi::convert_muzhi;
use protodiag::seeding::derive_seed;
use protodiag::simulator::SimConfig;
use thiserror::Error;

use crate::config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }

    /// Stable prefix for scripts: `error[usage]`, `error[data]` or
    /// `error[runtime]`.
    pub fn tag(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "error[usage]",
            CliError::Data(_) => "error[data]",
            CliError::Runtime(_) => "error[runtime]",
        }
    }
}

impl From<protodiag::Error> for CliError {
    fn from(e: protodiag::Error) -> Self {
        use protodiag::Error as E;
        match e {
            E::Corpus(CorpusError::InfeasibleSpec(_)) => CliError::Usage(e.to_string()),
            E::Corpus(_) | E::Checkpoint(_) | E::NoTrainingGoals | E::NoEvalGoals => {
                CliError::Data(e.to_string())
            }
            E::Config(_) | E::FewShot(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        protodiag::Error::from(e).into()
    }
}

#[derive(Debug, Parser)]
#[command(name = "protodiag", version, about = "Symptom-inquiry dialog policies: DQN and prototypical Q networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus (vocab.json + goals.jsonl).
    GenData(GenDataArgs),
    /// Convert a Muzhi goal dump into the corpus format.
    ConvertMuzhi(ConvertArgs),
    /// Check a corpus and print its validation report.
    Validate(ValidateArgs),
    /// Train on the train split and evaluate on the test split.
    Train(TrainArgs),
    /// Evaluate a checkpoint greedily on the test split.
    Eval(EvalArgs),
    /// Leave-one-disease-out few-shot sweep over noise levels.
    Fewshot(FewshotArgs),
    /// Play the patient against a trained policy.
    Chat(ChatArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// JSON run config; its `synth` section provides defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of diseases.
    #[arg(long)]
    pub diseases: Option<usize>,
    /// Number of symptoms.
    #[arg(long)]
    pub symptoms: Option<usize>,
    /// Symptoms in each disease signature.
    #[arg(long)]
    pub signature_size: Option<usize>,
    /// Symptoms shared by every pair of disease signatures.
    #[arg(long)]
    pub overlap: Option<usize>,
    /// Self-reported symptoms per goal.
    #[arg(long)]
    pub explicit: Option<usize>,
    /// Hidden present symptoms per goal.
    #[arg(long)]
    pub implicit_present: Option<usize>,
    /// Hidden absent symptoms per goal.
    #[arg(long)]
    pub implicit_absent: Option<usize>,
    /// Train goals per disease.
    #[arg(long)]
    pub train_goals: Option<usize>,
    /// Test goals per disease.
    #[arg(long)]
    pub test_goals: Option<usize>,
    /// Base random seed.
    #[arg(long, env = "PROTODIAG_SEED")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    /// Muzhi goal dump as JSON with `train` and `test` arrays.
    #[arg(long)]
    pub input: PathBuf,
    /// Output corpus directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// Directory holding vocab.json and goals.jsonl.
    #[arg(long)]
    pub corpus: PathBuf,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Directory holding vocab.json and goals.jsonl.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// JSON run config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Probability that a user reply is replaced by a uniformly random one.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Base random seed.
    #[arg(long, env = "PROTODIAG_SEED")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Agent to train: dqn or proto.
    #[arg(long)]
    pub agent: AgentKind,
    #[command(flatten)]
    pub common: CommonArgs,
    /// Training episodes.
    #[arg(long)]
    pub episodes: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// checkpoint.json written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus directory; the test split is evaluated.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Probability that a user reply is replaced by a uniformly random one.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Base random seed.
    #[arg(long, env = "PROTODIAG_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Directory for results.csv; metrics are always printed.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FewshotArgs {
    /// Comma-separated agents, e.g. `dqn,proto`.
    #[arg(long, value_delimiter = ',', required = true)]
    pub agent: Vec<AgentKind>,
    #[command(flatten)]
    pub common: CommonArgs,
    /// Training cases per disease in the adaptation pool.
    #[arg(long)]
    pub shots: Option<usize>,
    /// Comma-separated noise levels.
    #[arg(long, value_delimiter = ',')]
    pub noise_levels: Option<Vec<f64>>,
    /// Episodes of pretraining without the held-out disease.
    #[arg(long)]
    pub pretrain_episodes: Option<usize>,
    /// Fine-tuning episodes on the adaptation pool.
    #[arg(long)]
    pub adapt_episodes: Option<usize>,
    /// Worker threads for independent cells (default: all cores).
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ChatArgs {
    /// checkpoint.json written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus the checkpoint was trained on (vocabulary and, for
    /// prototypical agents, the support set).
    #[arg(long)]
    pub corpus: PathBuf,
}

fn io_err(what: &str, path: &Path, e: io::Error) -> CliError {
    CliError::Runtime(format!("{what} {}: {e}", path.display()))
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_err("cannot write", path, e))
}

fn make_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| io_err("cannot create", path, e))
}

pub fn read_corpus(dir: &Path) -> Result<Corpus, CliError> {
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read_to_string(&p).map_err(|e| CliError::Data(format!("cannot read {}: {e}", p.display())))
    };
    let vocab = read("vocab.json")?;
    let goals = read("goals.jsonl")?;
    Ok(load_corpus(&vocab, &goals)?)
}

fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<(), CliError> {
    make_dir(dir)?;
    write_file(&dir.join("vocab.json"), &corpus.vocab_json())?;
    write_file(&dir.join("goals.jsonl"), &corpus.goals_jsonl())
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn check_noise(noise: f64) -> Result<(), CliError> {
    if !(0.0..=1.0).contains(&noise) {
        return Err(CliError::Usage(format!("noise {noise} not in [0, 1]")));
    }
    Ok(())
}

fn resolve<'a>(flag: &'a Option<PathBuf>, file: &'a Option<PathBuf>, what: &str) -> Result<&'a Path, CliError> {
    flag.as_deref()
        .or(file.as_deref())
        .ok_or_else(|| CliError::Usage(format!("--{what} is required (or set `{what}` in the config)")))
}

/// Loads the config and applies the shared flag overrides.
fn common_config(c: &CommonArgs) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(c.config.as_deref())?;
    if let Some(n) = c.noise {
        check_noise(n)?;
        cfg.sim.noise = n;
    }
    if let Some(s) = c.seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

pub fn run<W: Write>(cli: Cli, out: &mut W) -> Result<(), CliError> {
    let mut say = |s: String| {
        writeln!(out, "{s}").map_err(|e| CliError::Runtime(format!("writing output: {e}")))
    };
    match cli.command {
        Command::GenData(a) => {
            let cfg = RunConfig::load(a.config.as_deref())?;
            let mut spec = cfg.synth;
            let set = |dst: &mut usize, v: Option<usize>| {
                if let Some(v) = v {
                    *dst = v;
                }
            };
            set(&mut spec.n_diseases, a.diseases);
            set(&mut spec.n_symptoms, a.symptoms);
            set(&mut spec.signature_size, a.signature_size);
            set(&mut spec.overlap, a.overlap);
            set(&mut spec.explicit_per_goal, a.explicit);
            set(&mut spec.implicit_present_per_goal, a.implicit_present);
            set(&mut spec.implicit_absent_per_goal, a.implicit_absent);
            set(&mut spec.goals_per_disease_train, a.train_goals);
            set(&mut spec.goals_per_disease_test, a.test_goals);
            if let Some(s) = a.seed {
                spec.seed = s;
            }
            let corpus = generate_synthetic(&spec)?;
            write_corpus(&corpus, &a.out)?;
            let (train, test) = corpus.split_counts();
            say(format!(
                "wrote {} goals ({train} train, {test} test), {} symptoms, {} diseases to {}",
                corpus.goals.len(),
                corpus.vocab.n_symptoms(),
                corpus.vocab.n_diseases(),
                a.out.display()
            ))
        }
        Command::ConvertMuzhi(a) => {
            let text = fs::read_to_string(&a.input)
                .map_err(|e| CliError::Data(format!("cannot read {}: {e}", a.input.display())))?;
            let conv = convert_muzhi(&text)?;
            write_corpus(&conv.corpus, &a.out)?;
            for note in &conv.notes {
                say(format!("note: {note}"))?;
            }
            let (train, test) = conv.corpus.split_counts();
            say(format!(
                "converted {} goals ({train} train, {test} test), {} symptoms, {} diseases",
                conv.corpus.goals.len(),
                conv.corpus.vocab.n_symptoms(),
                conv.corpus.vocab.n_diseases()
            ))
        }
        Command::Validate(a) => {
            let corpus = read_corpus(&a.corpus)?;
            let report = validate_corpus(&corpus);
            for w in &report.warnings {
                say(format!("warning: {w}"))?;
            }
            let (train, test) = corpus.split_counts();
            say(format!("{} goals ({train} train, {test} test): ok", corpus.goals.len()))
        }
        Command::Train(a) => {
            let mut cfg = common_config(&a.common)?;
            if let Some(e) = a.episodes {
                cfg.train.episodes = e;
            }
            let corpus = read_corpus(resolve(&a.common.corpus, &cfg.corpus, "corpus")?)?;
            let out_dir = resolve(&a.common.out, &cfg.out, "out")?.to_path_buf();
            let exp = cfg.experiment();
            let run = run_supervised(a.agent, &corpus, &exp)?;
            make_dir(&out_dir)?;
            write_file(&out_dir.join("checkpoint.json"), &run.checkpoint.to_json())?;
            write_file(&out_dir.join("train_log.jsonl"), &run.log.to_jsonl())?;
            let table = ResultsTable {
                rows: vec![ResultRow::new(
                    a.agent,
                    Protocol::Supervised,
                    exp.sim.noise,
                    Fold::All,
                    &run.metrics,
                )],
            };
            write_file(&out_dir.join("results.csv"), &results_to_string(&table))?;
            let meta = RunMetadata::new("train", Some(a.agent), &corpus, &exp);
            write_file(&out_dir.join("run.json"), &to_json(&meta))?;
            let m = &run.metrics;
            say(format!(
                "{}: last-100 training success {:.2}%",
                a.agent,
                run.log.recent_success(100)
            ))?;
            say(format!(
                "test: success_rate={:.2} mean_reward={:.4} mean_turns={:.4} episodes={}",
                m.success_rate, m.mean_reward, m.mean_turns, m.episodes
            ))
        }
        Command::Eval(a) => {
            check_noise(a.noise)?;
            let text = fs::read_to_string(&a.checkpoint)
                .map_err(|e| CliError::Data(format!("cannot read {}: {e}", a.checkpoint.display())))?;
            let ck = Checkpoint::from_json(&text)?;
            let corpus = read_corpus(&a.corpus)?;
            let restored = ck.restore(&corpus)?;
            let sim = SimConfig {
                noise: a.noise,
                max_turns: ck.max_turns,
                ..SimConfig::default()
            };
            let test: Vec<_> = corpus.test_goals().collect();
            let m = protodiag::experiments::evaluate_policy(
                restored.as_policy(),
                &test,
                &sim,
                derive_seed(a.seed, "eval"),
            )?;
            say(format!(
                "success_rate={:.2} mean_reward={:.4} mean_turns={:.4} episodes={}",
                m.success_rate, m.mean_reward, m.mean_turns, m.episodes
            ))?;
            if let Some(dir) = &a.out {
                make_dir(dir)?;
                let table = ResultsTable {
                    rows: vec![ResultRow::new(ck.kind(), Protocol::Supervised, a.noise, Fold::All, &m)],
                };
                write_file(&dir.join("results.csv"), &results_to_string(&table))?;
            }
            Ok(())
        }
        Command::Fewshot(a) => {
            let mut cfg = common_config(&a.common)?;
            if let Some(n) = a.shots {
                cfg.fewshot.shots_n = n;
            }
            if cfg.fewshot.shots_n == 0 {
                return Err(CliError::Usage("--shots must be at least 1".into()));
            }
            match (&a.noise_levels, a.common.noise) {
                (Some(_), Some(_)) => {
                    return Err(CliError::Usage("give either --noise or --noise-levels, not both".into()))
                }
                (Some(levels), None) => cfg.noise_levels = levels.clone(),
                (None, Some(n)) => cfg.noise_levels = vec![n],
                (None, None) => {}
            }
            if cfg.noise_levels.is_empty() {
                return Err(CliError::Usage("no noise levels given".into()));
            }
            for &n in &cfg.noise_levels {
                check_noise(n)?;
            }
            if let Some(e) = a.pretrain_episodes {
                cfg.fewshot.pretrain_episodes = e;
            }
            if let Some(e) = a.adapt_episodes {
                cfg.fewshot.adapt_episodes = e;
            }
            let corpus = read_corpus(resolve(&a.common.corpus, &cfg.corpus, "corpus")?)?;
            let out_dir = resolve(&a.common.out, &cfg.out, "out")?.to_path_buf();
            let exp = cfg.experiment();
            let sweep = || -> Result<ResultsTable, CliError> {
                let mut table = ResultsTable::default();
                for &agent in &a.agent {
                    table.extend(run_fewshot_all_folds(
                        agent,
                        &corpus,
                        &cfg.fewshot,
                        &cfg.noise_levels,
                        &exp,
                    )?);
                }
                table.sort();
                Ok(table)
            };
            let table = match a.jobs {
                Some(0) => return Err(CliError::Usage("--jobs must be at least 1".into())),
                Some(j) => rayon::ThreadPoolBuilder::new()
                    .num_threads(j)
                    .build()
                    .map_err(|e| CliError::Runtime(e.to_string()))?
                    .install(sweep)?,
                None => sweep()?,
            };
            make_dir(&out_dir)?;
            let csv = results_to_string(&table);
            write_file(&out_dir.join("results.csv"), &csv)?;
            let mut meta = RunMetadata::new("fewshot", None, &corpus, &exp);
            meta.fewshot = Some(cfg.fewshot.clone());
            meta.noise_levels = Some(cfg.noise_levels.clone());
            write_file(&out_dir.join("run.json"), &to_json(&meta))?;
            for r in table.rows.iter().filter(|r| r.fold == Fold::Avg) {
                say(format!(
                    "{} noise={} success_rate={:.2} mean_reward={:.4} mean_turns={:.4}",
                    r.agent, r.noise, r.success_rate, r.mean_reward, r.mean_turns
                ))?;
            }
            Ok(())
        }
        Command::Chat(a) => {
            let text = fs::read_to_string(&a.checkpoint)
                .map_err(|e| CliError::Data(format!("cannot read {}: {e}", a.checkpoint.display())))?;
            let ck = Checkpoint::from_json(&text)?;
            let corpus = read_corpus(&a.corpus)?;
            let restored = ck.restore(&corpus)?;
            let stdin = io::stdin();
            let mut input = stdin.lock();
            run_chat_io(&restored, &corpus, ck.max_turns, &mut input, out)
        }
    }
}

fn run_chat_io<R: BufRead, W: Write>(
    restored: &protodiag::experiments::RestoredPolicy,
    corpus: &Corpus,
    max_turns: usize,
    input: &mut R,
    out: &mut W,
) -> Result<(), CliError> {
    chat::run_chat(restored.as_policy(), &corpus.vocab, max_turns, input, out).map(|_| ())
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            eprintln!("error[usage]: {first} (see --help)");
            return 2;
        }
    };
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match run(cli, &mut out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}: {}", e.tag(), e.to_string().replace('\n', " "));
            e.exit_code()
        }
    }
}
