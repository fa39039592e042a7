//! End-to-end training: minibatches of target speakers with enrollment,
//! positive and hard-negative test utterances, joint SGD through scoring,
//! pooling and the speaker network, and a pool refresh after every sweep.

use std::collections::HashMap;
use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, TrainingSet};
use crate::error::{Error, Result};
use crate::features::make_context_windows;
use crate::miner::{
    build_impostor_table, compute_pool_vectors, refresh_pool, sample_impostor_utterances,
    sample_random_impostors, ImpostorTable, SpeakerVectorPool,
};
use crate::model::{EndToEndModel, UtteranceData};
use crate::nn::{HasParams, Mode, Tape, Var};
use crate::par;
use crate::phonetic::PhoneticModel;
use crate::pooling::{pool_on_tape, PoolInputs, PoolingKind};
use crate::scoring::{HEAD_B, HEAD_W};
use crate::speaker_net::Architecture;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MinerKind {
    /// Negatives from the k most similar speakers in the pool.
    Knn,
    /// Negatives from any other speaker.
    Random,
}

impl fmt::Display for MinerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MinerKind::Knn => "knn",
            MinerKind::Random => "random",
        })
    }
}

impl FromStr for MinerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "knn" => Ok(MinerKind::Knn),
            "random" => Ok(MinerKind::Random),
            _ => Err(Error::InvalidArgument(format!("unknown miner {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub speakers_per_batch: usize,
    pub n_enroll: usize,
    pub t1: usize,
    pub t2: usize,
    pub k: usize,
    pub learning_rate: f64,
    pub sweeps: usize,
    pub seed: u64,
    pub pooling: PoolingKind,
    pub miner: MinerKind,
    pub architecture: Architecture,
    pub head_w: f64,
    pub head_b: f64,
    pub freeze_attention: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            speakers_per_batch: 64,
            n_enroll: 6,
            t1: 1,
            t2: 5,
            k: 10,
            learning_rate: 0.05,
            sweeps: 3,
            seed: 0,
            pooling: PoolingKind::Attention,
            miner: MinerKind::Knn,
            architecture: Architecture::canonical_cnn(),
            head_w: 10.0,
            head_b: -5.0,
            freeze_attention: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.speakers_per_batch < 2 {
            return bad(format!(
                "speakers per batch must be at least 2, got {}",
                self.speakers_per_batch
            ));
        }
        if self.n_enroll == 0 || self.k == 0 {
            return bad("enrollment count and k must be positive".into());
        }
        if self.t1 + self.t2 == 0 {
            return bad("a batch needs at least one trial per target".into());
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("bad learning rate {}", self.learning_rate));
        }
        if !self.head_w.is_finite() || !self.head_b.is_finite() {
            return bad("logistic head initialization must be finite".into());
        }
        Ok(())
    }

    /// Utterances a speaker needs to be usable for training.
    pub fn min_utterances(&self) -> usize {
        self.n_enroll + self.t1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetPlan {
    pub speaker: String,
    pub enroll: Vec<usize>,
    pub positives: Vec<usize>,
    /// `(utterance, impostor speaker)` pairs.
    pub negatives: Vec<(usize, String)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchPlan {
    pub targets: Vec<TargetPlan>,
    /// Some negative draw had to repeat utterances.
    pub with_replacement: bool,
}

impl BatchPlan {
    pub fn num_positive(&self) -> usize {
        self.targets.iter().map(|t| t.positives.len()).sum()
    }

    pub fn num_negative(&self) -> usize {
        self.targets.iter().map(|t| t.negatives.len()).sum()
    }

    pub fn num_trials(&self) -> usize {
        self.num_positive() + self.num_negative()
    }

    /// Distinct utterances in first-use order.
    pub fn utterances(&self) -> Vec<usize> {
        let mut seen = HashMap::new();
        let mut out = Vec::new();
        for t in &self.targets {
            let all = t
                .enroll
                .iter()
                .chain(&t.positives)
                .chain(t.negatives.iter().map(|(u, _)| u));
            for &u in all {
                seen.entry(u).or_insert_with(|| {
                    out.push(u);
                });
            }
        }
        out
    }
}

/// Composes one minibatch for the given target speakers (indices into
/// `set`). `table` is required for the k-NN miner.
pub fn build_batch<R: Rng>(
    config: &TrainConfig,
    set: &TrainingSet,
    speakers: &[usize],
    table: Option<&ImpostorTable>,
    rng: &mut R,
) -> Result<BatchPlan> {
    let need = config.min_utterances();
    let mut plan = BatchPlan {
        targets: Vec::with_capacity(speakers.len()),
        with_replacement: false,
    };
    for &s in speakers {
        let spk = &set.speakers[s];
        let utts = &set.utterances[s];
        if utts.len() < need {
            return Err(Error::Data(format!(
                "speaker {spk} has {} utterances, needs {need}",
                utts.len()
            )));
        }
        let own: Vec<usize> = index::sample(rng, utts.len(), need)
            .into_iter()
            .map(|i| utts[i])
            .collect();
        let negatives = if config.t2 == 0 {
            Vec::new()
        } else {
            let draw = match config.miner {
                MinerKind::Knn => {
                    let table = table.ok_or_else(|| {
                        Error::InvalidArgument("k-NN miner needs an impostor table".into())
                    })?;
                    sample_impostor_utterances(table, spk, set, config.t2, rng)?
                }
                MinerKind::Random => sample_random_impostors(spk, set, config.t2, rng)?,
            };
            plan.with_replacement |= draw.with_replacement;
            draw.utterances
        };
        plan.targets.push(TargetPlan {
            speaker: spk.clone(),
            enroll: own[..config.n_enroll].to_vec(),
            positives: own[config.n_enroll..].to_vec(),
            negatives,
        });
    }
    Ok(plan)
}

/// Shuffles speakers and splits them into batches; a short final batch is
/// kept when it has at least two speakers.
pub fn plan_sweep<R: Rng>(num_speakers: usize, per_batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..num_speakers).collect();
    order.shuffle(rng);
    order
        .chunks(per_batch.max(1))
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Utterance data by corpus index.
pub type DataMap = HashMap<usize, UtteranceData>;

/// The recorded batch loss and the per-trial bookkeeping behind it.
pub struct BatchLoss {
    pub loss: Var,
    pub scores: Var,
    /// `(target speaker, test utterance, label)` per trial, in score order.
    pub trials: Vec<(String, usize, bool)>,
}

fn data_of(data: &DataMap, u: usize) -> Result<&UtteranceData> {
    data.get(&u)
        .ok_or_else(|| Error::Data(format!("no features loaded for utterance index {u}")))
}

/// Records the end-to-end loss of `plan` on `tape`: one train-mode pass of
/// the speaker network over all distinct utterances, pooling, enrollment
/// averaging, cosine scores, logistic head and cross-entropy.
pub fn record_batch_loss(
    model: &mut EndToEndModel,
    tape: &mut Tape,
    plan: &BatchPlan,
    data: &DataMap,
) -> Result<BatchLoss> {
    let utts = plan.utterances();
    let windows: Vec<Vec<f64>> = par::map_slice(&utts, |&u| -> Result<Vec<f64>> {
        Ok(make_context_windows(&data_of(data, u)?.features)?.into_values())
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let flat = windows.concat();
    drop(windows);
    let h_all = model.net.forward(tape, &flat, Mode::Train)?;
    drop(flat);

    let mut pooled = HashMap::new();
    let mut offset = 0;
    for &u in &utts {
        let d = data_of(data, u)?;
        let t = d.num_frames();
        let h = tape.slice_rows(h_all, offset, t)?;
        offset += t;
        let inputs = PoolInputs {
            h,
            gamma: &d.gamma,
            bottleneck: &d.bottleneck,
        };
        let (f, _) = pool_on_tape(tape, model.pooling(), &inputs, &model.attention)?;
        pooled.insert(u, f);
    }

    let mut scores = Vec::new();
    let mut trials = Vec::new();
    for target in &plan.targets {
        let enroll: Vec<Var> = target.enroll.iter().map(|u| pooled[u]).collect();
        let model_vec = tape.mean(&enroll)?;
        let tests = target
            .positives
            .iter()
            .map(|&u| (u, true))
            .chain(target.negatives.iter().map(|(u, _)| (*u, false)));
        for (u, label) in tests {
            scores.push(tape.cosine(pooled[&u], model_vec)?);
            trials.push((target.speaker.clone(), u, label));
        }
    }
    let x = tape.concat(&scores)?;
    let w = tape.param(&model.head, HEAD_W)?;
    let b = tape.param(&model.head, HEAD_B)?;
    let z = tape.scale_shift(x, w, b)?;
    let labels: Vec<f64> = trials.iter().map(|t| if t.2 { 1.0 } else { 0.0 }).collect();
    let loss = tape.bce(z, &labels)?;
    Ok(BatchLoss {
        loss,
        scores: x,
        trials,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    /// Loss before the update.
    pub loss: f64,
    pub positives: usize,
    pub negatives: usize,
}

/// One SGD step on `plan`: `W <- W - lr * grad` for every trainable tensor.
pub fn train_step(
    model: &mut EndToEndModel,
    plan: &BatchPlan,
    data: &DataMap,
    lr: f64,
) -> Result<StepOutcome> {
    let mut tape = Tape::new();
    let batch = record_batch_loss(model, &mut tape, plan, data)?;
    let loss = tape.scalar(batch.loss);
    if !loss.is_finite() {
        let scores = tape.value(batch.scores);
        let culprit = batch
            .trials
            .iter()
            .zip(scores)
            .find(|(_, s)| !s.is_finite())
            .map(|((spk, u, label), s)| {
                format!(
                    "; trial target={spk} utterance={} label={label} score={s}",
                    data[u].features.utt_id
                )
            })
            .unwrap_or_default();
        return Err(Error::NonFinite(format!("batch loss {loss}{culprit}")));
    }
    let grads = tape.backward(batch.loss);
    for store in model.stores_mut() {
        store.zero_grads();
        tape.accumulate_param_grads(&grads, store)?;
        if let Some((name, _)) = store.iter().find(|(_, p)| {
            p.tensor
                .grad()
                .is_some_and(|g| g.iter().any(|v| !v.is_finite()))
        }) {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    for store in model.stores_mut() {
        store.sgd_step(lr);
    }
    Ok(StepOutcome {
        loss,
        positives: plan.num_positive(),
        negatives: plan.num_negative(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub sweep: usize,
    pub batch: usize,
    pub loss: f64,
    pub positives: usize,
    pub negatives: usize,
}

pub fn loss_history_csv(history: &[LossRecord]) -> String {
    let mut s = String::from("sweep,batch,loss,pos_trials,neg_trials\n");
    for r in history {
        writeln!(
            s,
            "{},{},{},{},{}",
            r.sweep, r.batch, r.loss, r.positives, r.negatives
        )
        .unwrap();
    }
    s
}

pub fn write_loss_history(path: &Path, history: &[LossRecord]) -> Result<()> {
    std::fs::write(path, loss_history_csv(history)).map_err(|e| Error::io(path, e))
}

pub struct TrainOutcome {
    pub model: EndToEndModel,
    pub history: Vec<LossRecord>,
    /// Final pool (empty for the random miner).
    pub pool: SpeakerVectorPool,
}

/// Loads features for `indices` and runs the frozen phonetic network on them.
pub fn load_utterance_data(
    corpus: &Corpus,
    indices: &[usize],
    phonetic: &PhoneticModel,
) -> Result<DataMap> {
    let loaded = par::map_slice(indices, |&i| -> Result<(usize, UtteranceData)> {
        Ok((i, UtteranceData::new(corpus.features(i)?, phonetic)?))
    });
    loaded.into_iter().collect()
}

/// Utterances used to initialize batch-norm statistics before the first
/// pool is built.
const CALIBRATION_UTTERANCES: usize = 16;

fn build_pool(
    model: &EndToEndModel,
    set: &TrainingSet,
    data: &DataMap,
    n_enroll: usize,
    rng: &mut ChaCha8Rng,
) -> Result<std::collections::BTreeMap<String, Vec<f64>>> {
    compute_pool_vectors(set, n_enroll, rng, |u| {
        Ok(model.embed(data_of(data, u)?)?.values)
    })
}

/// Runs the full training loop.
pub fn train(
    config: &TrainConfig,
    corpus: &Corpus,
    phonetic: PhoneticModel,
) -> Result<TrainOutcome> {
    config.validate()?;
    let set = TrainingSet::new(corpus, config.min_utterances())?;
    let data = load_utterance_data(corpus, &set.all_utterances(), &phonetic)?;
    train_on(config, &set, &data, phonetic)
}

/// Training loop over preloaded utterance data.
pub fn train_on(
    config: &TrainConfig,
    set: &TrainingSet,
    data: &DataMap,
    phonetic: PhoneticModel,
) -> Result<TrainOutcome> {
    let mut model = EndToEndModel::init(config.clone(), phonetic)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let mut history = Vec::new();
    let mut pool = SpeakerVectorPool::default();
    if config.sweeps == 0 {
        return Ok(TrainOutcome {
            model,
            history,
            pool,
        });
    }

    let all = set.all_utterances();
    let n_cal = CALIBRATION_UTTERANCES.min(all.len());
    let cal: Vec<&UtteranceData> = index::sample(&mut rng, all.len(), n_cal)
        .into_iter()
        .map(|i| data_of(data, all[i]))
        .collect::<Result<_>>()?;
    model.calibrate(&cal)?;

    let mut table = None;
    if config.miner == MinerKind::Knn {
        pool.vectors = build_pool(&model, set, data, config.n_enroll, &mut rng)?;
        table = Some(build_impostor_table(&pool, config.k)?);
    }

    for sweep in 1..=config.sweeps {
        for (b, speakers) in plan_sweep(set.num_speakers(), config.speakers_per_batch, &mut rng)
            .iter()
            .enumerate()
        {
            let plan = build_batch(config, set, speakers, table.as_ref(), &mut rng)?;
            if plan.with_replacement {
                log::warn!(
                    "sweep {sweep} batch {}: impostor utterances sampled with replacement",
                    b + 1
                );
            }
            let out = train_step(&mut model, &plan, data, config.learning_rate)?;
            log::debug!("sweep {sweep} batch {} loss {:.6}", b + 1, out.loss);
            history.push(LossRecord {
                sweep,
                batch: b + 1,
                loss: out.loss,
                positives: out.positives,
                negatives: out.negatives,
            });
        }
        let last: Vec<f64> = history
            .iter()
            .filter(|r| r.sweep == sweep)
            .map(|r| r.loss)
            .collect();
        log::info!(
            "sweep {sweep}: mean loss {:.6}",
            last.iter().sum::<f64>() / last.len().max(1) as f64
        );
        if config.miner == MinerKind::Knn {
            refresh_pool(&mut pool, set, config.n_enroll, &mut rng, |u| {
                Ok(model.embed(data_of(data, u)?)?.values)
            })?;
            table = Some(build_impostor_table(&pool, config.k)?);
        }
    }
    Ok(TrainOutcome {
        model,
        history,
        pool,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(sizes: &[usize]) -> TrainingSet {
        let mut next = 0;
        let mut s = TrainingSet {
            speakers: Vec::new(),
            utterances: Vec::new(),
            excluded: Vec::new(),
        };
        for (i, n) in sizes.iter().enumerate() {
            s.speakers.push(format!("s{i:03}"));
            s.utterances.push((next..next + n).collect());
            next += n;
        }
        s
    }

    #[test]
    fn default_batch_has_384_trials() {
        let s = set(&[10; 70]);
        let cfg = TrainConfig {
            miner: MinerKind::Random,
            ..TrainConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batches = plan_sweep(s.num_speakers(), cfg.speakers_per_batch, &mut rng);
        assert_eq!(batches.len(), 2);
        assert_eq!(batches[0].len(), 64);
        let plan = build_batch(&cfg, &s, &batches[0], None, &mut rng).unwrap();
        assert_eq!(plan.num_trials(), 384);
        assert_eq!(plan.num_positive(), 64);
        assert_eq!(plan.num_negative(), 320);
    }

    #[test]
    fn tiny_batch_and_determinism() {
        let s = set(&[4, 4, 4]);
        let cfg = TrainConfig {
            n_enroll: 2,
            t1: 1,
            t2: 1,
            miner: MinerKind::Random,
            ..TrainConfig::default()
        };
        let a = build_batch(&cfg, &s, &[0, 2], None, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = build_batch(&cfg, &s, &[0, 2], None, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.num_trials(), 4);
        for t in &a.targets {
            assert!(t.enroll.iter().all(|u| !t.positives.contains(u)));
        }
    }

    #[test]
    fn knn_batch_requires_table() {
        let s = set(&[4, 4]);
        let cfg = TrainConfig {
            n_enroll: 2,
            ..TrainConfig::default()
        };
        assert!(build_batch(&cfg, &s, &[0, 1], None, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn short_remainder_batches_are_dropped() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = plan_sweep(9, 4, &mut rng);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4]);
        let b = plan_sweep(10, 4, &mut rng);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn config_validation_and_json() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig {
            speakers_per_batch: 1,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            t1: 0,
            t2: 0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            learning_rate: f64::NAN,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        let c = TrainConfig::default();
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&json).unwrap(), c);
        assert_eq!("random".parse::<MinerKind>().unwrap(), MinerKind::Random);
        assert!("best".parse::<MinerKind>().is_err());
    }

    #[test]
    fn loss_csv_format() {
        let h = [LossRecord {
            sweep: 1,
            batch: 2,
            loss: 0.5,
            positives: 3,
            negatives: 15,
        }];
        assert_eq!(
            loss_history_csv(&h),
            "sweep,batch,loss,pos_trials,neg_trials\n1,2,0.5,3,15\n"
        );
    }
}
