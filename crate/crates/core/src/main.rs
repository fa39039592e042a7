use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use e2esv::corpus::{generate_corpus, Corpus, Split, SynthSpec};
use e2esv::metrics::{score_trials, write_evaluation};
use e2esv::model::EndToEndModel;
use e2esv::phonetic::{train_phonetic, LabeledUtterance, PhoneticModel, PhoneticTrainConfig};
use e2esv::pooling::{PoolingKind, Supervector};
use e2esv::scoring::{cosine_score, enroll, read_trials, SpeakerStore};
use e2esv::speaker_net::Architecture;
use e2esv::trainer::{train, write_loss_history, MinerKind, TrainConfig};
use e2esv::{Error, Result};

#[derive(Parser)]
#[command(
    name = "e2esv",
    version,
    about = "End-to-end text-dependent speaker verification"
)]
struct Cli {
    /// Seed for every random choice of the subcommand.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic keyword corpus.
    GenCorpus {
        /// JSON spec; the built-in reference spec when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the frame-level phonetic network.
    TrainPhonetic {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        #[arg(long, default_value_t = 256)]
        batch_frames: usize,
    },
    /// Train the speaker network, attention and logistic head jointly.
    TrainE2e(TrainArgs),
    /// Enroll speakers from their enrollment utterances.
    Enroll {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Comma-separated speaker ids, or `all` for every enrollment speaker.
        #[arg(long, default_value = "all")]
        speakers: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score one utterance against one enrolled speaker.
    Verify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        utterance: String,
        #[arg(long)]
        speaker: String,
    },
    /// Score a trial list and write scored trials, EER and DET points.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PoolingArg {
    Mean,
    Posterior,
    Attention,
}

#[derive(Clone, Copy, ValueEnum)]
enum NetArg {
    Cnn,
    Dnn,
}

#[derive(Clone, Copy, ValueEnum)]
enum MinerArg {
    Knn,
    Random,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    phonetic: PathBuf,
    #[arg(long, value_enum, default_value = "attention")]
    pooling: PoolingArg,
    #[arg(long, value_enum, default_value = "cnn")]
    speaker_net: NetArg,
    #[arg(long, value_enum, default_value = "knn")]
    miner: MinerArg,
    #[arg(long)]
    out: PathBuf,
    /// Loss history CSV; defaults to the model path with a `.loss.csv` suffix.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    sweeps: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    speakers_per_batch: usize,
    #[arg(long, default_value_t = 6)]
    n_enroll: usize,
    #[arg(long, default_value_t = 1)]
    t1: usize,
    #[arg(long, default_value_t = 5)]
    t2: usize,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 10.0)]
    head_w: f64,
    #[arg(long, default_value_t = -5.0, allow_hyphen_values = true)]
    head_b: f64,
    /// CNN conv widths: blocks separated by `/`, layers by `,`.
    #[arg(long, default_value = "32,32/64,64")]
    channels: String,
}

fn parse_blocks(s: &str) -> Result<Vec<Vec<usize>>> {
    s.split('/')
        .map(|block| {
            block
                .split(',')
                .map(|c| {
                    c.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::InvalidArgument(format!("bad channel list {s:?}")))
                })
                .collect()
        })
        .collect()
}

fn gen_corpus(spec: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut spec = match spec {
        Some(p) => SynthSpec::load(p)?,
        None => SynthSpec::reference(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let paths = generate_corpus(&spec, out)?;
    println!("{}", paths.manifest.display());
    Ok(())
}

fn train_phonetic_cmd(corpus: &Path, out: &Path, cfg: PhoneticTrainConfig) -> Result<()> {
    let corpus = Corpus::load(corpus)?;
    let mut frames = Vec::new();
    for (i, r) in corpus.records().iter().enumerate() {
        if r.split == Split::Train && r.labels.is_some() {
            frames.push((corpus.features(i)?, corpus.labels(i)?));
        }
    }
    if frames.is_empty() {
        return Err(Error::Data("no labeled training utterances".into()));
    }
    let labeled: Vec<LabeledUtterance<'_>> = frames
        .iter()
        .map(|(f, l)| LabeledUtterance {
            frames: f,
            labels: l,
        })
        .collect();
    let (model, report) = train_phonetic(&labeled, &cfg)?;
    log::info!(
        "phonetic loss {:.6} -> {:.6}",
        report.initial_loss,
        report.final_loss
    );
    model.save(out)
}

fn train_e2e_cmd(a: &TrainArgs, seed: Option<u64>) -> Result<()> {
    let architecture = match a.speaker_net {
        NetArg::Cnn => Architecture::cnn_with_blocks(parse_blocks(&a.channels)?),
        NetArg::Dnn => Architecture::frame_dnn(),
    };
    let config = TrainConfig {
        speakers_per_batch: a.speakers_per_batch,
        n_enroll: a.n_enroll,
        t1: a.t1,
        t2: a.t2,
        k: a.k,
        learning_rate: a.lr,
        sweeps: a.sweeps,
        seed: seed.unwrap_or(0),
        pooling: match a.pooling {
            PoolingArg::Mean => PoolingKind::Mean,
            PoolingArg::Posterior => PoolingKind::Posterior,
            PoolingArg::Attention => PoolingKind::Attention,
        },
        miner: match a.miner {
            MinerArg::Knn => MinerKind::Knn,
            MinerArg::Random => MinerKind::Random,
        },
        architecture,
        head_w: a.head_w,
        head_b: a.head_b,
        freeze_attention: false,
    };
    let corpus = Corpus::load(&a.corpus)?;
    let phonetic = PhoneticModel::load(&a.phonetic)?;
    let outcome = train(&config, &corpus, phonetic)?;
    outcome.model.save(&a.out)?;
    let csv = a
        .loss_csv
        .clone()
        .unwrap_or_else(|| a.out.with_extension("loss.csv"));
    write_loss_history(&csv, &outcome.history)
}

fn embed_utterances(
    model: &EndToEndModel,
    corpus: &Corpus,
    ids: &[&str],
) -> Result<BTreeMap<String, Supervector>> {
    let mut data = Vec::with_capacity(ids.len());
    for id in ids {
        let i = corpus
            .index_of(id)
            .ok_or_else(|| Error::Data(format!("utterance {id} not in corpus")))?;
        data.push(model.utterance_data(corpus.features(i)?)?);
    }
    let refs: Vec<_> = data.iter().collect();
    let svs = model.embed_all(&refs)?;
    Ok(ids.iter().map(|s| s.to_string()).zip(svs).collect())
}

fn enroll_cmd(model: &Path, corpus: &Path, speakers: &str, out: &Path) -> Result<()> {
    let model = EndToEndModel::load(model)?;
    let corpus = Corpus::load(corpus)?;
    let available = corpus.speakers(Split::Enroll);
    let wanted: Vec<&str> = if speakers == "all" {
        available.clone()
    } else {
        speakers
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .collect()
    };
    let missing: Vec<String> = wanted
        .iter()
        .filter(|s| !available.contains(s))
        .map(|s| s.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::UnknownSpeakers(missing));
    }
    let mut store = SpeakerStore::default();
    for spk in wanted {
        let ids: Vec<String> = corpus
            .utterances_of(spk, Split::Enroll)
            .into_iter()
            .map(|i| corpus.record(i).id.clone())
            .collect();
        let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let svs: Vec<Supervector> = embed_utterances(&model, &corpus, &refs)?
            .into_values()
            .collect();
        store.insert(enroll(&svs, spk)?);
    }
    store.save(out)
}

fn verify_cmd(
    model: &Path,
    store: &Path,
    corpus: &Path,
    utterance: &str,
    speaker: &str,
) -> Result<()> {
    let model = EndToEndModel::load(model)?;
    let store = SpeakerStore::load(store)?;
    let corpus = Corpus::load(corpus)?;
    let target = store
        .get(speaker)
        .ok_or_else(|| Error::UnknownSpeakers(vec![speaker.to_string()]))?;
    let sv = embed_utterances(&model, &corpus, &[utterance])?
        .remove(utterance)
        .expect("embedded");
    let score = cosine_score(&sv, target)?;
    let head = model.logistic_head();
    let decision = if head.accepts(score) {
        "accept"
    } else {
        "reject"
    };
    println!(
        "score={score}\tp_accept={}\tthreshold={}\tdecision={decision}",
        head.accept_probability(score),
        head.threshold()
    );
    Ok(())
}

fn evaluate_cmd(
    model: &Path,
    store: &Path,
    corpus: &Path,
    trials: &Path,
    out: &Path,
) -> Result<()> {
    let model = EndToEndModel::load(model)?;
    let store = SpeakerStore::load(store)?;
    let corpus = Corpus::load(corpus)?;
    let trials = read_trials(trials)?;
    let mut ids: Vec<&str> = trials.iter().map(|t| t.utterance.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    let tests = embed_utterances(&model, &corpus, &ids)?;
    let (set, scored) = score_trials(&trials, &store, &tests)?;
    let eer = write_evaluation(out, &scored, &set)?;
    println!("EER={}\tthreshold={}", eer.eer, eer.threshold);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::GenCorpus { spec, out } => gen_corpus(spec.as_deref(), &out, seed),
        Command::TrainPhonetic {
            corpus,
            out,
            epochs,
            lr,
            batch_frames,
        } => train_phonetic_cmd(
            &corpus,
            &out,
            PhoneticTrainConfig {
                epochs,
                learning_rate: lr,
                batch_frames,
                seed: seed.unwrap_or(0),
            },
        ),
        Command::TrainE2e(args) => train_e2e_cmd(&args, seed),
        Command::Enroll {
            model,
            corpus,
            speakers,
            out,
        } => enroll_cmd(&model, &corpus, &speakers, &out),
        Command::Verify {
            model,
            store,
            corpus,
            utterance,
            speaker,
        } => verify_cmd(&model, &store, &corpus, &utterance, &speaker),
        Command::Evaluate {
            model,
            store,
            corpus,
            trials,
            out,
        } => evaluate_cmd(&model, &store, &corpus, &trials, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("E2E_LOG_LEVEL", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
