//! Equal error rate, DET points, and trial scoring.
//!
//! A trial is accepted when `score >= threshold`, so at threshold `t`
//! `FAR(t)` is the fraction of impostor scores `>= t` and `FRR(t)` the
//! fraction of target scores `< t`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::pooling::Supervector;
use crate::scoring::{cosine_score, SpeakerStore, Trial};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreSet {
    pub targets: Vec<f64>,
    pub impostors: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Eer {
    pub eer: f64,
    pub threshold: f64,
}

impl ScoreSet {
    fn check(&self) -> Result<()> {
        if self.targets.is_empty() || self.impostors.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "EER needs target and impostor scores, got {} and {}",
                self.targets.len(),
                self.impostors.len()
            )));
        }
        if let Some(v) = self
            .targets
            .iter()
            .chain(&self.impostors)
            .find(|v| !v.is_finite())
        {
            return Err(Error::NonFinite(format!("score {v}")));
        }
        Ok(())
    }
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// One point per distinct score used as threshold, in increasing threshold
/// order. FAR is nonincreasing and FRR nondecreasing along the list.
pub fn det_points(s: &ScoreSet) -> Result<Vec<DetPoint>> {
    s.check()?;
    let tar = sorted(&s.targets);
    let imp = sorted(&s.impostors);
    let thresholds: BTreeSet<u64> = tar.iter().chain(&imp).map(|v| ordered_bits(*v)).collect();
    let (nt, ni) = (tar.len() as f64, imp.len() as f64);
    Ok(thresholds
        .into_iter()
        .map(|bits| {
            let t = from_ordered_bits(bits);
            let rejected_targets = tar.partition_point(|&v| v < t);
            let rejected_impostors = imp.partition_point(|&v| v < t);
            DetPoint {
                threshold: t,
                far: (imp.len() - rejected_impostors) as f64 / ni,
                frr: rejected_targets as f64 / nt,
            }
        })
        .collect())
}

// Monotone map from f64 to u64 so distinct scores can live in a BTreeSet.
fn ordered_bits(v: f64) -> u64 {
    let v = if v == 0.0 { 0.0 } else { v };
    let b = v.to_bits();
    if b >> 63 == 1 {
        !b
    } else {
        b | (1 << 63)
    }
}

fn from_ordered_bits(b: u64) -> f64 {
    if b >> 63 == 1 {
        f64::from_bits(b & !(1 << 63))
    } else {
        f64::from_bits(!b)
    }
}

/// EER at the crossing of FAR and FRR, linearly interpolated between the
/// two adjacent thresholds where `FAR - FRR` changes sign. Above the
/// largest score every trial is rejected (`FAR = 0`, `FRR = 1`); that end
/// point takes the largest score as its threshold.
pub fn compute_eer(s: &ScoreSet) -> Result<Eer> {
    let mut pts = det_points(s)?;
    let last = pts.last().expect("nonempty").threshold;
    pts.push(DetPoint {
        threshold: last,
        far: 0.0,
        frr: 1.0,
    });
    let i = pts
        .iter()
        .position(|p| p.far - p.frr <= 0.0)
        .expect("end point has FAR < FRR");
    if i == 0 {
        return Ok(Eer {
            eer: pts[0].far,
            threshold: pts[0].threshold,
        });
    }
    let (a, b) = (pts[i - 1], pts[i]);
    let da = a.far - a.frr;
    let db = b.far - b.frr;
    let lambda = da / (da - db);
    Ok(Eer {
        eer: a.far + lambda * (b.far - a.far),
        threshold: a.threshold + lambda * (b.threshold - a.threshold),
    })
}

pub fn eer_report(e: &Eer) -> String {
    format!("EER={}\tthreshold={}\n", e.eer, e.threshold)
}

pub fn det_csv(points: &[DetPoint]) -> String {
    let mut s = String::from("threshold,far,frr\n");
    for p in points {
        writeln!(s, "{},{},{}", p.threshold, p.far, p.frr).unwrap();
    }
    s
}

/// Scores every trial against the enrolled models. Returns the labeled
/// scores split by label and the trials with scores filled in.
pub fn score_trials(
    trials: &[Trial],
    store: &SpeakerStore,
    tests: &BTreeMap<String, Supervector>,
) -> Result<(ScoreSet, Vec<Trial>)> {
    let missing: BTreeSet<String> = trials
        .iter()
        .filter(|t| store.get(&t.speaker).is_none())
        .map(|t| t.speaker.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::UnknownSpeakers(missing.into_iter().collect()));
    }
    let mut set = ScoreSet::default();
    let mut out = Vec::with_capacity(trials.len());
    for t in trials {
        let test = tests.get(&t.utterance).ok_or_else(|| {
            Error::Data(format!("no supervector for test utterance {}", t.utterance))
        })?;
        let score = cosine_score(test, store.get(&t.speaker).expect("checked above"))?;
        match t.label {
            Some(true) => set.targets.push(score),
            Some(false) => set.impostors.push(score),
            None => {}
        }
        out.push(Trial {
            score: Some(score),
            ..t.clone()
        });
    }
    Ok((set, out))
}

/// Writes `scored_trials.tsv`, `eer.txt` and `det.csv` into `dir`.
pub fn write_evaluation(dir: &Path, scored: &[Trial], set: &ScoreSet) -> Result<Eer> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    crate::scoring::write_trials(&dir.join("scored_trials.tsv"), scored)?;
    let eer = compute_eer(set)?;
    let p = dir.join("eer.txt");
    std::fs::write(&p, eer_report(&eer)).map_err(|e| Error::io(&p, e))?;
    let p = dir.join("det.csv");
    std::fs::write(&p, det_csv(&det_points(set)?)).map_err(|e| Error::io(&p, e))?;
    Ok(eer)
}
