//! Enrollment, cosine scoring, the logistic accept/reject head, the
//! end-to-end verification loss, and trial/enrollment-store files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{
    read_file, sigmoid, ByteReader, ByteWriter, ParamStore, Tape, Tensor, FORMAT_VERSION,
};
use crate::pooling::{PoolingKind, Supervector};

pub const HEAD_W: &str = "head.w";
pub const HEAD_B: &str = "head.b";
const STORE_MAGIC: &[u8; 4] = b"E2ES";

/// An enrolled speaker: the mean of its enrollment supervectors.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerModel {
    pub speaker_id: String,
    pub vector: Supervector,
    pub count: usize,
}

/// Averages enrollment supervectors into a speaker model.
pub fn enroll(supervectors: &[Supervector], speaker_id: &str) -> Result<SpeakerModel> {
    let first = supervectors.first().ok_or_else(|| {
        Error::InvalidArgument(format!("no enrollment supervectors for {speaker_id}"))
    })?;
    let mut sum = vec![0.0; first.dim()];
    for sv in supervectors {
        if sv.dim() != first.dim() || sv.kind != first.kind {
            return Err(Error::InvalidArgument(format!(
                "mixed enrollment supervectors for {speaker_id}: {} ({}) vs {} ({})",
                first.kind,
                first.dim(),
                sv.kind,
                sv.dim()
            )));
        }
        for (s, v) in sum.iter_mut().zip(&sv.values) {
            *s += v;
        }
    }
    let n = supervectors.len() as f64;
    sum.iter_mut().for_each(|s| *s /= n);
    let vector = Supervector::new(first.kind, sum)?;
    if vector.norm() == 0.0 {
        return Err(Error::DegenerateSupervector);
    }
    Ok(SpeakerModel {
        speaker_id: speaker_id.to_string(),
        vector,
        count: supervectors.len(),
    })
}

/// Cosine similarity of two vectors, clamped to `[-1, 1]`.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine", &[a.len()], &[b.len()]));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(Error::DegenerateSupervector);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

pub fn cosine_score(test: &Supervector, model: &SpeakerModel) -> Result<f64> {
    if test.kind != model.vector.kind {
        return Err(Error::InvalidArgument(format!(
            "test supervector is {} pooled but model {} is {}",
            test.kind, model.speaker_id, model.vector.kind
        )));
    }
    cosine(&test.values, &model.vector.values)
}

/// `P(accept | S) = sigmoid(w S + b)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogisticHead {
    pub w: f64,
    pub b: f64,
}

impl Default for LogisticHead {
    fn default() -> Self {
        LogisticHead { w: 10.0, b: -5.0 }
    }
}

impl LogisticHead {
    pub fn accept_probability(&self, score: f64) -> f64 {
        sigmoid(self.w * score + self.b)
    }

    pub fn reject_probability(&self, score: f64) -> f64 {
        1.0 - self.accept_probability(score)
    }

    /// Score at which accept and reject are equally likely.
    pub fn threshold(&self) -> f64 {
        -self.b / self.w
    }

    pub fn accepts(&self, score: f64) -> bool {
        score >= self.threshold()
    }

    pub fn to_params(self) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert(HEAD_W, Tensor::scalar(self.w), true)
            .expect("fresh store");
        p.insert(HEAD_B, Tensor::scalar(self.b), true)
            .expect("fresh store");
        p
    }

    pub fn from_params(p: &ParamStore) -> Result<Self> {
        Ok(LogisticHead {
            w: p.get(HEAD_W)?.values()[0],
            b: p.get(HEAD_B)?.values()[0],
        })
    }
}

/// Loss value and its gradients with respect to `w`, `b` and every score.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub dw: f64,
    pub db: f64,
    pub dscores: Vec<f64>,
}

/// Mean binary cross-entropy of `sigmoid(w x_i + b)` against labels `y_i`.
pub fn e2e_loss(head: LogisticHead, scores: &[f64], labels: &[bool]) -> Result<LossGrad> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("no trials".into()));
    }
    if scores.len() != labels.len() {
        return Err(Error::shape("e2e_loss", &[scores.len()], &[labels.len()]));
    }
    let params = head.to_params();
    let mut tape = Tape::new();
    let x = tape.variable(vec![scores.len()], scores.to_vec())?;
    let w = tape.param(&params, HEAD_W)?;
    let b = tape.param(&params, HEAD_B)?;
    let z = tape.scale_shift(x, w, b)?;
    let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
    let loss = tape.bce(z, &y)?;
    let grads = tape.backward(loss);
    Ok(LossGrad {
        loss: tape.scalar(loss),
        dw: grads.wrt(w).map_or(0.0, |g| g[0]),
        db: grads.wrt(b).map_or(0.0, |g| g[0]),
        dscores: grads
            .wrt(x)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; scores.len()]),
    })
}

/// One verification trial: a test utterance against a claimed speaker.
#[derive(Clone, Debug, PartialEq)]
pub struct Trial {
    pub utterance: String,
    pub speaker: String,
    pub label: Option<bool>,
    pub score: Option<f64>,
}

fn label_str(label: Option<bool>) -> &'static str {
    match label {
        Some(true) => "1",
        Some(false) => "0",
        None => "?",
    }
}

pub fn parse_trials(text: &str, path: &Path) -> Result<Vec<Trial>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let bad = |why: &str| Error::format(path, format!("line {}: {why}", i + 1));
        if fields.len() < 3 || fields.len() > 4 {
            return Err(bad("expected utt<TAB>spk<TAB>label[<TAB>score]"));
        }
        let label = match fields[2] {
            "1" => Some(true),
            "0" => Some(false),
            "?" => None,
            other => return Err(bad(&format!("bad label {other:?}"))),
        };
        let score = match fields.get(3) {
            Some(s) => Some(
                s.parse::<f64>()
                    .map_err(|_| bad(&format!("bad score {s:?}")))?,
            ),
            None => None,
        };
        out.push(Trial {
            utterance: fields[0].to_string(),
            speaker: fields[1].to_string(),
            label,
            score,
        });
    }
    Ok(out)
}

pub fn read_trials(path: &Path) -> Result<Vec<Trial>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trials(&text, path)
}

pub fn format_trials(trials: &[Trial]) -> String {
    let mut s = String::new();
    for t in trials {
        write!(s, "{}\t{}\t{}", t.utterance, t.speaker, label_str(t.label)).unwrap();
        if let Some(score) = t.score {
            write!(s, "\t{score}").unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn write_trials(path: &Path, trials: &[Trial]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, format_trials(trials)).map_err(|e| Error::io(path, e))
}

/// Enrolled speaker models keyed by speaker id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SpeakerStore {
    pub models: BTreeMap<String, SpeakerModel>,
}

impl SpeakerStore {
    pub fn insert(&mut self, model: SpeakerModel) {
        self.models.insert(model.speaker_id.clone(), model);
    }

    pub fn get(&self, id: &str) -> Option<&SpeakerModel> {
        self.models.get(id)
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = ByteWriter::new();
        w.magic(STORE_MAGIC)
            .u32(FORMAT_VERSION)
            .u32(self.models.len() as u32);
        for m in self.models.values() {
            w.str(&m.speaker_id)
                .u32(m.vector.kind.code())
                .u32(m.count as u32)
                .tensor(&Tensor::from_vec(m.vector.values.clone()));
        }
        w.write_to(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let mut r = ByteReader::new(&bytes, path);
        r.expect_magic(STORE_MAGIC)?;
        r.expect_version()?;
        let n = r.u32()?;
        let mut store = SpeakerStore::default();
        for _ in 0..n {
            let id = r.str()?;
            let code = r.u32()?;
            let kind = PoolingKind::from_code(code)
                .ok_or_else(|| r.err(format!("bad pooling code {code}")))?;
            let count = r.u32()? as usize;
            let t = r.tensor()?;
            store.insert(SpeakerModel {
                speaker_id: id,
                vector: Supervector::new(kind, t.into_values())?,
                count,
            });
        }
        r.expect_end()?;
        Ok(store)
    }
}
