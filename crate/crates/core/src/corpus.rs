//! Corpus manifests, frame-label files, and the synthetic keyword corpus.
//!
//! A manifest is UTF-8 TSV, one utterance per line:
//! `utt_id<TAB>spk_id<TAB>feature_path[<TAB>label_path]`. Lines starting
//! with `#` are comments, except `# split: <train|enroll|test>` which sets
//! the split of the records that follow (default `train`). Relative paths
//! resolve against the manifest's directory.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{read_feature_file, write_feature_file, FrameSequence, FEATURE_DIM};
use crate::nn::{read_file, ByteReader, ByteWriter, FORMAT_VERSION};
use crate::phonetic::{GARBAGE, NUM_CLASSES};
use crate::scoring::{write_trials, Trial};

const LABEL_MAGIC: &[u8; 4] = b"E2EL";
pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const TRIALS_FILE: &str = "trials.tsv";
pub const TRUTH_FILE: &str = "truth.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Enroll,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Enroll => "enroll",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "enroll" => Some(Split::Enroll),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceRecord {
    pub id: String,
    pub speaker: String,
    pub features: PathBuf,
    pub labels: Option<PathBuf>,
    pub split: Split,
}

/// Validated manifest with per-speaker utterance lists.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    records: Vec<UtteranceRecord>,
    by_id: HashMap<String, usize>,
    by_speaker: BTreeMap<String, Vec<usize>>,
}

impl Corpus {
    /// Indexes records, rejecting duplicate ids and speakers that appear
    /// both in training and in enrollment/test.
    pub fn from_records(records: Vec<UtteranceRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Data("no utterances".into()));
        }
        let mut by_id = HashMap::new();
        let mut by_speaker: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut train = BTreeSet::new();
        let mut eval = BTreeSet::new();
        for (i, r) in records.iter().enumerate() {
            if by_id.insert(r.id.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate utterance id {}", r.id)));
            }
            by_speaker.entry(r.speaker.clone()).or_default().push(i);
            if r.split == Split::Train {
                train.insert(r.speaker.as_str());
            } else {
                eval.insert(r.speaker.as_str());
            }
        }
        if let Some(spk) = train.intersection(&eval).next() {
            return Err(Error::Data(format!(
                "speaker {spk} appears in both training and evaluation splits"
            )));
        }
        Ok(Corpus {
            records,
            by_id,
            by_speaker,
        })
    }

    pub fn parse_manifest(text: &str, base: &Path, path: &Path) -> Result<Self> {
        let mut split = Split::Train;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(name) = comment.trim().strip_prefix("split:") {
                    split = Split::parse(name.trim()).ok_or_else(|| {
                        Error::format(
                            path,
                            format!("line {}: unknown split {:?}", i + 1, name.trim()),
                        )
                    })?;
                }
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() < 3 || f.len() > 4 || f.iter().any(|s| s.is_empty()) {
                return Err(Error::format(
                    path,
                    format!(
                        "line {}: expected utt<TAB>spk<TAB>features[<TAB>labels]",
                        i + 1
                    ),
                ));
            }
            records.push(UtteranceRecord {
                id: f[0].to_string(),
                speaker: f[1].to_string(),
                features: base.join(f[2]),
                labels: f.get(3).map(|p| base.join(p)),
                split,
            });
        }
        Self::from_records(records)
    }

    /// Loads and validates a manifest, including that every referenced file
    /// exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let corpus = Self::parse_manifest(&text, base, path)?;
        for r in &corpus.records {
            for p in std::iter::once(&r.features).chain(r.labels.as_ref()) {
                if !p.is_file() {
                    return Err(Error::Data(format!(
                        "utterance {}: missing file {}",
                        r.id,
                        p.display()
                    )));
                }
            }
        }
        Ok(corpus)
    }

    pub fn records(&self) -> &[UtteranceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn record(&self, idx: usize) -> &UtteranceRecord {
        &self.records[idx]
    }

    pub fn index_of(&self, utt_id: &str) -> Option<usize> {
        self.by_id.get(utt_id).copied()
    }

    /// Speaker ids (sorted) having at least one utterance in `split`.
    pub fn speakers(&self, split: Split) -> Vec<&str> {
        self.by_speaker
            .iter()
            .filter(|(_, u)| u.iter().any(|&i| self.records[i].split == split))
            .map(|(s, _)| s.as_str())
            .collect()
    }

    /// Utterance indices of `speaker` within `split`, in manifest order.
    pub fn utterances_of(&self, speaker: &str, split: Split) -> Vec<usize> {
        self.by_speaker
            .get(speaker)
            .map(|u| {
                u.iter()
                    .copied()
                    .filter(|&i| self.records[i].split == split)
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn features(&self, idx: usize) -> Result<FrameSequence> {
        read_feature_file(&self.records[idx].features)
    }

    pub fn labels(&self, idx: usize) -> Result<Vec<u8>> {
        let r = &self.records[idx];
        let p = r
            .labels
            .as_ref()
            .ok_or_else(|| Error::Data(format!("utterance {} has no frame labels", r.id)))?;
        read_label_file(p)
    }

    pub fn to_manifest(&self, base: &Path) -> String {
        let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
        let mut out = String::new();
        let mut current = None;
        for r in &self.records {
            if current != Some(r.split) {
                out.push_str(&format!("# split: {}\n", r.split));
                current = Some(r.split);
            }
            out.push_str(&format!("{}\t{}\t{}", r.id, r.speaker, rel(&r.features)));
            if let Some(l) = &r.labels {
                out.push('\t');
                out.push_str(&rel(l));
            }
            out.push('\n');
        }
        out
    }
}

/// Training view: speakers with enough utterances, and their utterance
/// index lists.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSet {
    pub speakers: Vec<String>,
    pub utterances: Vec<Vec<usize>>,
    pub excluded: Vec<String>,
}

impl TrainingSet {
    pub fn new(corpus: &Corpus, min_utterances: usize) -> Result<Self> {
        let mut set = TrainingSet {
            speakers: Vec::new(),
            utterances: Vec::new(),
            excluded: Vec::new(),
        };
        for spk in corpus.speakers(Split::Train) {
            let utts = corpus.utterances_of(spk, Split::Train);
            if utts.len() < min_utterances {
                log::warn!(
                    "excluding speaker {spk}: {} utterances < {min_utterances}",
                    utts.len()
                );
                set.excluded.push(spk.to_string());
            } else {
                set.speakers.push(spk.to_string());
                set.utterances.push(utts);
            }
        }
        if set.speakers.len() < 2 {
            return Err(Error::Data(format!(
                "need at least 2 training speakers with {min_utterances} utterances, found {}",
                set.speakers.len()
            )));
        }
        Ok(set)
    }

    pub fn num_speakers(&self) -> usize {
        self.speakers.len()
    }

    pub fn all_utterances(&self) -> Vec<usize> {
        self.utterances.iter().flatten().copied().collect()
    }
}

pub fn write_label_file(path: &Path, labels: &[u8]) -> Result<()> {
    let mut w = ByteWriter::new();
    w.magic(LABEL_MAGIC)
        .u32(FORMAT_VERSION)
        .u32(labels.len() as u32)
        .bytes(labels);
    w.write_to(path)
}

pub fn read_label_file(path: &Path) -> Result<Vec<u8>> {
    let buf = read_file(path)?;
    let mut r = ByteReader::new(&buf, path);
    r.expect_magic(LABEL_MAGIC)?;
    r.expect_version()?;
    let n = r.u32()? as usize;
    let labels = r.bytes(n)?.to_vec();
    r.expect_end()?;
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
        return Err(r.err(format!("label {bad} outside 0..{NUM_CLASSES}")));
    }
    Ok(labels)
}

/// Parameters of the synthetic keyword corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub train_speakers: usize,
    /// Inclusive range of utterances per training speaker.
    pub utterances_per_speaker: [usize; 2],
    pub eval_speakers: usize,
    pub enroll_utterances: usize,
    pub test_utterances: usize,
    /// Inclusive range of frames per utterance.
    pub frames: [usize; 2],
    pub latent_dim: usize,
    /// Standard deviation of each coordinate of the speaker offset.
    pub speaker_spread: f64,
    /// Standard deviation of the phoneme class mean coordinates.
    pub class_mean_scale: f64,
    pub noise_std: f64,
    pub garbage_prob: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            train_speakers: 100,
            utterances_per_speaker: [10, 50],
            eval_speakers: 20,
            enroll_utterances: 6,
            test_utterances: 4,
            frames: [65, 110],
            latent_dim: 8,
            speaker_spread: 0.5,
            class_mean_scale: 2.0,
            noise_std: 1.0,
            garbage_prob: 0.3,
            seed: 0,
        }
    }
}

impl SynthSpec {
    /// The shipped desk-scale spec: 50 training speakers with 15 utterances,
    /// 20 evaluation speakers with 6 enrollment and 4 test utterances.
    pub fn reference() -> Self {
        SynthSpec {
            train_speakers: 50,
            utterances_per_speaker: [15, 15],
            speaker_spread: 1.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("synthetic spec: {m}")));
        if self.utterances_per_speaker[0] == 0
            || self.utterances_per_speaker[0] > self.utterances_per_speaker[1]
        {
            return bad("utterance range must be nonempty and positive");
        }
        if self.frames[0] < PHONE_SEQUENCE.len() || self.frames[0] > self.frames[1] {
            return bad("frame range must be nonempty with at least one frame per phoneme");
        }
        if self.train_speakers + self.eval_speakers == 0 {
            return bad("no speakers");
        }
        if self.eval_speakers > 0 && (self.enroll_utterances == 0 || self.test_utterances == 0) {
            return bad("evaluation speakers need enrollment and test utterances");
        }
        if self.latent_dim == 0 || !(self.speaker_spread > 0.0) {
            return bad("speaker spread must be positive");
        }
        if !(self.noise_std >= 0.0)
            || !(self.class_mean_scale >= 0.0)
            || !(0.0..=1.0).contains(&self.garbage_prob)
        {
            return bad("noise, class scale and garbage probability out of range");
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: SynthSpec =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// The keyword's phoneme classes in order.
pub const PHONE_SEQUENCE: [u8; 9] = [0, 1, 2, 3, 4, 5, 6, 7, 8];

/// Hidden generator state, kept for oracle experiments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorTruth {
    /// `NUM_CLASSES x 38` class means.
    pub class_means: Vec<Vec<f64>>,
    /// `38 x latent_dim` projection.
    pub projection: Vec<Vec<f64>>,
    /// Latent vector per speaker.
    pub latents: BTreeMap<String, Vec<f64>>,
}

impl GeneratorTruth {
    /// `A s` for a speaker.
    pub fn offset(&self, speaker: &str) -> Option<Vec<f64>> {
        let s = self.latents.get(speaker)?;
        Some(
            self.projection
                .iter()
                .map(|row| row.iter().zip(s).map(|(a, b)| a * b).sum())
                .collect(),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// One generated utterance in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthUtterance {
    pub record: UtteranceRecord,
    pub features: FrameSequence,
    pub labels: Vec<u8>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Splits `total` frames over the keyword's phonemes, at least one each.
fn phone_durations(rng: &mut ChaCha8Rng, total: usize) -> Vec<usize> {
    let n = PHONE_SEQUENCE.len();
    let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
    let wsum: f64 = weights.iter().sum();
    let spare = total - n;
    let mut d: Vec<usize> = weights
        .iter()
        .map(|w| 1 + (w / wsum * spare as f64).floor() as usize)
        .collect();
    let mut left = total - d.iter().sum::<usize>();
    let mut i = 0;
    while left > 0 {
        d[i % n] += 1;
        left -= 1;
        i += 1;
    }
    d
}

/// Generates the synthetic corpus in memory.
pub fn synthesize(spec: &SynthSpec) -> Result<(Vec<SynthUtterance>, GeneratorTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let class_means: Vec<Vec<f64>> = (0..NUM_CLASSES)
        .map(|_| {
            (0..FEATURE_DIM)
                .map(|_| spec.class_mean_scale * normal(&mut rng))
                .collect()
        })
        .collect();
    let proj_scale = spec.speaker_spread / (spec.latent_dim as f64).sqrt();
    let projection: Vec<Vec<f64>> = (0..FEATURE_DIM)
        .map(|_| {
            (0..spec.latent_dim)
                .map(|_| proj_scale * normal(&mut rng))
                .collect()
        })
        .collect();
    let mut truth = GeneratorTruth {
        class_means,
        projection,
        latents: BTreeMap::new(),
    };

    let mut plan: Vec<(String, Vec<(String, Split)>)> = Vec::new();
    for s in 0..spec.train_speakers {
        let spk = format!("tr{s:04}");
        let n = rng.gen_range(spec.utterances_per_speaker[0]..=spec.utterances_per_speaker[1]);
        let utts = (0..n)
            .map(|u| (format!("{spk}_u{u:02}"), Split::Train))
            .collect();
        plan.push((spk, utts));
    }
    for s in 0..spec.eval_speakers {
        let spk = format!("ev{s:04}");
        let mut utts: Vec<(String, Split)> = (0..spec.enroll_utterances)
            .map(|u| (format!("{spk}_e{u:02}"), Split::Enroll))
            .collect();
        utts.extend((0..spec.test_utterances).map(|u| (format!("{spk}_t{u:02}"), Split::Test)));
        plan.push((spk, utts));
    }

    let mut out = Vec::new();
    for (spk, utts) in plan {
        let latent: Vec<f64> = (0..spec.latent_dim).map(|_| normal(&mut rng)).collect();
        truth.latents.insert(spk.clone(), latent);
        let offset = truth.offset(&spk).expect("just inserted");
        for (id, split) in utts {
            let t = rng.gen_range(spec.frames[0]..=spec.frames[1]);
            let durations = phone_durations(&mut rng, t);
            let mut frames = Vec::with_capacity(t * FEATURE_DIM);
            let mut labels = Vec::with_capacity(t);
            for (&phone, &dur) in PHONE_SEQUENCE.iter().zip(&durations) {
                for _ in 0..dur {
                    let garbage = rng.gen_bool(spec.garbage_prob);
                    let class = if garbage { GARBAGE } else { phone };
                    let mean = &truth.class_means[class as usize];
                    for (j, m) in mean.iter().enumerate() {
                        let speaker = if garbage { 0.0 } else { offset[j] };
                        frames.push(m + speaker + spec.noise_std * normal(&mut rng));
                    }
                    labels.push(class);
                }
            }
            let features = FrameSequence::new(id.clone(), frames, FEATURE_DIM)?;
            out.push(SynthUtterance {
                record: UtteranceRecord {
                    features: PathBuf::from("feats").join(format!("{id}.fea")),
                    labels: Some(PathBuf::from("labels").join(format!("{id}.lab"))),
                    id,
                    speaker: spk.clone(),
                    split,
                },
                features,
                labels,
            });
        }
    }
    Ok((out, truth))
}

/// Every enrollment speaker against every test utterance, sorted by test
/// utterance then claimed speaker.
pub fn all_pairs_trials(corpus: &Corpus) -> Vec<Trial> {
    let speakers = corpus.speakers(Split::Enroll);
    let mut trials = Vec::new();
    for r in corpus.records().iter().filter(|r| r.split == Split::Test) {
        for &spk in &speakers {
            trials.push(Trial {
                utterance: r.id.clone(),
                speaker: spk.to_string(),
                label: Some(r.speaker == spk),
                score: None,
            });
        }
    }
    trials
}

/// Paths written by [`generate_corpus`].
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedCorpus {
    pub manifest: PathBuf,
    pub trials: PathBuf,
    pub truth: PathBuf,
}

/// Writes feature files, label files, the manifest, an all-pairs trial list
/// and the generator truth under `out`.
pub fn generate_corpus(spec: &SynthSpec, out: &Path) -> Result<GeneratedCorpus> {
    let (utts, truth) = synthesize(spec)?;
    let mut records = Vec::with_capacity(utts.len());
    for u in &utts {
        write_feature_file(&out.join(&u.record.features), &u.features)?;
        write_label_file(
            &out.join(u.record.labels.as_ref().expect("synthetic labels")),
            &u.labels,
        )?;
        records.push(u.record.clone());
    }
    let corpus = Corpus::from_records(records)?;
    let paths = GeneratedCorpus {
        manifest: out.join(MANIFEST_FILE),
        trials: out.join(TRIALS_FILE),
        truth: out.join(TRUTH_FILE),
    };
    std::fs::write(&paths.manifest, corpus.to_manifest(Path::new("")))
        .map_err(|e| Error::io(&paths.manifest, e))?;
    write_trials(&paths.trials, &all_pairs_trials(&corpus))?;
    let json = serde_json::to_string(&truth).expect("truth serializes");
    std::fs::write(&paths.truth, json).map_err(|e| Error::io(&paths.truth, e))?;
    Ok(paths)
}
