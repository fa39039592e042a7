//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion.
//! With `E2ESV_ACCEPTANCE_STRICT=1` the run exits nonzero if any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use e2esv::corpus::{generate_corpus, Corpus, GeneratorTruth, Split, SynthSpec, TrainingSet};
use e2esv::features::FrameSequence;
use e2esv::metrics::{compute_eer, ScoreSet};
use e2esv::miner::{build_impostor_table, Neighbor, SpeakerVectorPool};
use e2esv::model::EndToEndModel;
use e2esv::nn::{gradient_check, GradCheckOptions, HasParams, Tape};
use e2esv::phonetic::{PhoneticModel, BOTTLENECK_DIM, GARBAGE, NUM_CLASSES};
use e2esv::pooling::{attention_pool, posterior_pool, AttentionParams};
use e2esv::scoring::{cosine, read_trials};
use e2esv::speaker_net::{Architecture, EMBED_DIM};
use e2esv::trainer::{build_batch, load_utterance_data, record_batch_loss, MinerKind, TrainConfig};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

/// Flags shared by every end-to-end training run below.
const TRAIN_FLAGS: [&str; 8] = [
    "--channels",
    "4,4/8,8",
    "--speakers-per-batch",
    "2",
    "--lr",
    "0.2",
    "--sweeps",
    "3",
];
const SEEDS: [u64; 3] = [1, 2, 3];

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_e2esv")
}

fn cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(bin())
        .args(args)
        .env("E2E_LOG_LEVEL", "error")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(r: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(-scale..scale)).collect()
}

fn posteriors(r: &mut ChaCha8Rng, t: usize) -> Vec<f64> {
    let mut g = Vec::new();
    for _ in 0..t {
        let row: Vec<f64> = (0..NUM_CLASSES)
            .map(|_| r.gen_range(0.0..1.0f64).powi(2) + 1e-6)
            .collect();
        let z: f64 = row.iter().sum();
        g.extend(row.iter().map(|v| v / z));
    }
    g
}

// ---------------------------------------------------------------- 1

fn gradient_integrity() -> Check {
    const PER_TENSOR: usize = 8;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let spec = SynthSpec {
        train_speakers: 3,
        utterances_per_speaker: [3, 3],
        eval_speakers: 0,
        frames: [9, 10],
        seed: 21,
        ..SynthSpec::default()
    };
    let g = generate_corpus(&spec, dir.path()).map_err(|e| e.to_string())?;
    let corpus = Corpus::load(&g.manifest).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        n_enroll: 1,
        t1: 1,
        t2: 1,
        miner: MinerKind::Random,
        architecture: Architecture::canonical_cnn(),
        seed: 3,
        ..TrainConfig::default()
    };
    let set = TrainingSet::new(&corpus, cfg.min_utterances()).map_err(|e| e.to_string())?;
    let phonetic = PhoneticModel::init(5);
    let data = load_utterance_data(&corpus, &set.all_utterances(), &phonetic)
        .map_err(|e| e.to_string())?;
    let mut model = EndToEndModel::init(cfg.clone(), phonetic).map_err(|e| e.to_string())?;
    let utts: Vec<_> = data.values().collect();
    model.calibrate(&utts).map_err(|e| e.to_string())?;
    let mut r = rng(8);
    model.attention = AttentionParams::from_rows(
        uniform(&mut r, EMBED_DIM, 0.1),
        uniform(&mut r, BOTTLENECK_DIM, 0.1),
    )
    .map_err(|e| e.to_string())?;
    let plan = build_batch(&cfg, &set, &[0, 2], None, &mut r).map_err(|e| e.to_string())?;
    let opts = GradCheckOptions {
        max_entries_per_tensor: Some(PER_TENSOR),
        ..GradCheckOptions::default()
    };
    let sizes: Vec<usize> = model
        .stores()
        .iter()
        .flat_map(|st| {
            st.trainable_names()
                .into_iter()
                .map(|n| st.get(&n).unwrap().values().len())
                .collect::<Vec<_>>()
        })
        .collect();
    let tensors = sizes.len();
    let expected: usize = sizes.iter().map(|&n| n.min(PER_TENSOR)).sum();
    let report = gradient_check(&mut model, &opts, |m, tape| {
        Ok(record_batch_loss(m, tape, &plan, &data)?.loss)
    })
    .map_err(|e| e.to_string())?;
    let detail = format!(
        "max rel error {:.2e} over {} entries in {tensors} tensors (worst {:?})",
        report.max_rel_error, report.entries_checked, report.worst
    );
    if report.max_rel_error < 1e-4 && report.entries_checked == expected {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 2

fn naive_posterior(h: &[f64], d: usize, gamma: &[f64]) -> Vec<f64> {
    let t = h.len() / d;
    let mut f = vec![0.0; NUM_CLASSES * d];
    for p in 0..NUM_CLASSES {
        for j in 0..d {
            for s in 0..t {
                f[p * d + j] += gamma[s * NUM_CLASSES + p] * h[s * d + j];
            }
        }
    }
    f
}

fn naive_attention(
    h: &[f64],
    d: usize,
    gamma: &[f64],
    b: &[f64],
    wh: &[f64],
    wb: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let t = h.len() / d;
    let bd = wb.len();
    let mut e = vec![0.0; t];
    for s in 0..t {
        let mut z = 0.0;
        for j in 0..d {
            z += wh[j] * h[s * d + j];
        }
        for k in 0..bd {
            z += wb[k] * b[s * bd + k];
        }
        e[s] = z.tanh();
    }
    let total: f64 = e.iter().map(|v| v.exp()).sum();
    let alpha: Vec<f64> = e.iter().map(|v| v.exp() / total).collect();
    let mut f = vec![0.0; NUM_CLASSES * d];
    for p in 0..NUM_CLASSES {
        for j in 0..d {
            for s in 0..t {
                f[p * d + j] += alpha[s] * gamma[s * NUM_CLASSES + p] * h[s * d + j];
            }
        }
    }
    (f, alpha)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn pooling_oracle() -> Check {
    let mut r = rng(2);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let t = r.gen_range(1..=10);
        let h = uniform(&mut r, t * EMBED_DIM, 2.0);
        let b = uniform(&mut r, t * BOTTLENECK_DIM, 4.0);
        let g = posteriors(&mut r, t);
        let wh = uniform(&mut r, EMBED_DIM, 0.5);
        let wb = uniform(&mut r, BOTTLENECK_DIM, 0.5);
        let post = posterior_pool(&h, EMBED_DIM, &g).map_err(|e| e.to_string())?;
        worst = worst.max(max_abs_diff(
            &post.values,
            &naive_posterior(&h, EMBED_DIM, &g),
        ));
        let att = AttentionParams::from_rows(wh.clone(), wb.clone()).map_err(|e| e.to_string())?;
        let (f, alpha) = attention_pool(&h, EMBED_DIM, &g, &b, &att).map_err(|e| e.to_string())?;
        let (nf, nalpha) = naive_attention(&h, EMBED_DIM, &g, &b, &wh, &wb);
        worst = worst
            .max(max_abs_diff(&f.values, &nf))
            .max(max_abs_diff(&alpha, &nalpha));
    }
    let detail = format!("100 instances, max abs deviation {worst:.2e}");
    if worst <= 1e-12 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 3

fn brute_force_eer(tar: &[f64], imp: &[f64]) -> f64 {
    let mut thresholds: Vec<f64> = tar.iter().chain(imp).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let mut curve: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&th| {
            let far = imp.iter().filter(|&&v| v >= th).count() as f64 / imp.len() as f64;
            let frr = tar.iter().filter(|&&v| v < th).count() as f64 / tar.len() as f64;
            (far, frr)
        })
        .collect();
    curve.push((0.0, 1.0));
    let i = curve
        .iter()
        .position(|(far, frr)| far - frr <= 0.0)
        .expect("end point");
    if i == 0 {
        return curve[0].0;
    }
    let ((pa, pr), (a, rr)) = (curve[i - 1], curve[i]);
    let (da, db) = (pa - pr, a - rr);
    pa + da / (da - db) * (a - pa)
}

fn eer_oracle() -> Check {
    let mut r = rng(3);
    let (mut worst, mut worst_transform): (f64, f64) = (0.0, 0.0);
    for i in 0..1000 {
        let nt = r.gen_range(1..40);
        let ni = r.gen_range(1..40);
        // every third set is quantized so that ties occur
        let draw = |r: &mut ChaCha8Rng| {
            let v: f64 = r.gen_range(-1.0..1.0);
            if i % 3 == 0 {
                (v * 8.0).round() / 8.0
            } else {
                v
            }
        };
        let tar: Vec<f64> = (0..nt).map(|_| draw(&mut r) + 0.3).collect();
        let imp: Vec<f64> = (0..ni).map(|_| draw(&mut r)).collect();
        let e = compute_eer(&ScoreSet {
            targets: tar.clone(),
            impostors: imp.clone(),
        })
        .map_err(|e| e.to_string())?
        .eer;
        worst = worst.max((e - brute_force_eer(&tar, &imp)).abs());
        let f = |v: &f64| (3.0 * v).exp() + v.powi(3);
        let moved = ScoreSet {
            targets: tar.iter().map(f).collect(),
            impostors: imp.iter().map(f).collect(),
        };
        worst_transform =
            worst_transform.max((compute_eer(&moved).map_err(|e| e.to_string())?.eer - e).abs());
    }
    let detail = format!("1000 sets, max deviation {worst:.2e}, max change under increasing transform {worst_transform:.2e}");
    if worst <= 1e-9 && worst_transform <= 1e-9 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 4

fn exhaustive_neighbors(pool: &SpeakerVectorPool, k: usize) -> BTreeMap<String, Vec<Neighbor>> {
    let mut out = BTreeMap::new();
    for (q, qv) in &pool.vectors {
        let mut all: Vec<Neighbor> = Vec::new();
        for (id, v) in &pool.vectors {
            if id != q {
                all.push(Neighbor {
                    speaker: id.clone(),
                    similarity: cosine(qv, v).unwrap(),
                });
            }
        }
        // selection by repeated scans for the best remaining candidate
        let mut picked = Vec::new();
        while picked.len() < k && !all.is_empty() {
            let mut best = 0;
            for i in 1..all.len() {
                let (a, b) = (&all[i], &all[best]);
                if a.similarity > b.similarity
                    || (a.similarity == b.similarity && a.speaker < b.speaker)
                {
                    best = i;
                }
            }
            picked.push(all.remove(best));
        }
        out.insert(q.clone(), picked);
    }
    out
}

fn miner_oracle() -> Check {
    let mut r = rng(4);
    let mut compared = 0;
    for round in 0..12 {
        let n = if round == 0 {
            200
        } else {
            r.gen_range(2..=200)
        };
        let k = r.gen_range(1..=8);
        let dim = r.gen_range(2..=12);
        let levels = if round % 2 == 0 { 3.0 } else { 1e6 };
        let mut vectors = BTreeMap::new();
        for i in 0..n {
            // coarse levels make duplicate vectors and exact ties common
            let v: Vec<f64> = (0..dim)
                .map(|_| (r.gen_range(-1.0..1.0f64) * levels).round() / levels + 0.01)
                .collect();
            vectors.insert(format!("spk{:04}", r.gen_range(0..100_000) * 1000 + i), v);
        }
        let pool = SpeakerVectorPool {
            vectors,
            generation: 0,
        };
        let table = build_impostor_table(&pool, k).map_err(|e| e.to_string())?;
        if table.neighbors != exhaustive_neighbors(&pool, k) {
            return Err(format!("mismatch for n={n} k={k}"));
        }
        compared += n;
    }
    Ok(format!(
        "12 pools (up to 200 speakers, {compared} query lists) identical including tie order"
    ))
}

// ---------------------------------------------------------------- 5-8

struct RunResult {
    eer: f64,
    model: PathBuf,
    elapsed: Duration,
}

struct Reference {
    dir: tempfile::TempDir,
    manifest: PathBuf,
    trials: PathBuf,
    setup: Duration,
    oracle_eer: f64,
    runs: BTreeMap<(String, u64), RunResult>,
}

impl Reference {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&mut self, pooling: &str, miner: &str, seed: u64) -> Result<&RunResult, String> {
        let key = (format!("{pooling}/{miner}"), seed);
        if !self.runs.contains_key(&key) {
            let start = Instant::now();
            let name = format!("{pooling}_{miner}_{seed}");
            let model = self.path(&format!("{name}.bin"));
            let store = self.path(&format!("{name}.store"));
            let seed_s = seed.to_string();
            let mut args = vec![
                "--seed",
                &seed_s,
                "train-e2e",
                "--corpus",
                s(&self.manifest),
                "--phonetic",
            ];
            let phon = self.path("phonetic.bin");
            args.extend([
                s(&phon),
                "--out",
                s(&model),
                "--pooling",
                pooling,
                "--speaker-net",
                "cnn",
                "--miner",
                miner,
            ]);
            args.extend(TRAIN_FLAGS);
            cli(&args)?;
            cli(&[
                "enroll",
                "--model",
                s(&model),
                "--corpus",
                s(&self.manifest),
                "--out",
                s(&store),
            ])?;
            let eval = self.path(&format!("eval_{name}"));
            let line = cli(&[
                "evaluate",
                "--model",
                s(&model),
                "--store",
                s(&store),
                "--corpus",
                s(&self.manifest),
                "--trials",
                s(&self.trials),
                "--out",
                s(&eval),
            ])?;
            let eer = parse_eer(&line)?;
            self.runs.insert(
                key.clone(),
                RunResult {
                    eer,
                    model,
                    elapsed: start.elapsed(),
                },
            );
        }
        Ok(&self.runs[&key])
    }

    fn mean_eer(
        &mut self,
        pooling: &str,
        miner: &str,
    ) -> Result<(f64, Vec<f64>, Duration), String> {
        let mut eers = Vec::new();
        let mut time = Duration::ZERO;
        for seed in SEEDS {
            let r = self.run(pooling, miner, seed)?;
            eers.push(r.eer);
            time += r.elapsed;
        }
        Ok((eers.iter().sum::<f64>() / eers.len() as f64, eers, time))
    }
}

fn parse_eer(line: &str) -> Result<f64, String> {
    line.trim()
        .split('\t')
        .next()
        .and_then(|f| f.strip_prefix("EER="))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| format!("unexpected evaluate output {line:?}"))
}

fn mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut m = vec![0.0; rows[0].len()];
    for r in rows {
        m.iter_mut().zip(r).for_each(|(a, b)| *a += b);
    }
    m.iter_mut().for_each(|a| *a /= rows.len() as f64);
    m
}

// Least-squares latent offset of one utterance: solve (A^T A) s = A^T r with
// r the mean residual of its speech frames around their class means.
fn latent_offset(truth: &GeneratorTruth, x: &FrameSequence, labels: &[u8]) -> Vec<f64> {
    let d = x.dim();
    let mut r = vec![0.0; d];
    let mut n = 0.0f64;
    for (t, &l) in labels.iter().enumerate() {
        if l == GARBAGE {
            continue;
        }
        for j in 0..d {
            r[j] += x.frame(t)[j] - truth.class_means[l as usize][j];
        }
        n += 1.0;
    }
    r.iter_mut().for_each(|v| *v /= n.max(1.0));
    let a = &truth.projection;
    let q = a[0].len();
    let mut m = vec![vec![0.0; q + 1]; q];
    for i in 0..q {
        for j in 0..q {
            m[i][j] = (0..d).map(|k| a[k][i] * a[k][j]).sum();
        }
        m[i][q] = (0..d).map(|k| a[k][i] * r[k]).sum();
    }
    for c in 0..q {
        let p = (c..q)
            .max_by(|&x, &y| m[x][c].abs().total_cmp(&m[y][c].abs()))
            .unwrap();
        m.swap(c, p);
        for row in 0..q {
            if row != c {
                let f = m[row][c] / m[c][c];
                for col in c..=q {
                    m[row][col] -= f * m[c][col];
                }
            }
        }
    }
    (0..q).map(|i| m[i][q] / m[i][i]).collect()
}

fn oracle_eer(manifest: &Path, trials: &Path, truth: &Path) -> Result<f64, String> {
    let corpus = Corpus::load(manifest).map_err(|e| e.to_string())?;
    let truth = GeneratorTruth::load(truth).map_err(|e| e.to_string())?;
    let offset = |i: usize| -> Result<Vec<f64>, String> {
        let x = corpus.features(i).map_err(|e| e.to_string())?;
        let l = corpus.labels(i).map_err(|e| e.to_string())?;
        Ok(latent_offset(&truth, &x, &l))
    };
    let mut centers = BTreeMap::new();
    for spk in corpus.speakers(Split::Enroll) {
        let rows = corpus
            .utterances_of(spk, Split::Enroll)
            .into_iter()
            .map(offset)
            .collect::<Result<Vec<_>, _>>()?;
        centers.insert(spk.to_string(), mean_rows(&rows));
    }
    let mut set = ScoreSet::default();
    for t in read_trials(trials).map_err(|e| e.to_string())? {
        let i = corpus
            .index_of(&t.utterance)
            .ok_or("trial utterance missing")?;
        let v = offset(i)?;
        let c = &centers[&t.speaker];
        let score = -v
            .iter()
            .zip(c)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        match t.label {
            Some(true) => set.targets.push(score),
            Some(false) => set.impostors.push(score),
            None => {}
        }
    }
    Ok(compute_eer(&set).map_err(|e| e.to_string())?.eer)
}

fn reference_setup() -> Result<Reference, String> {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let corpus = dir.path().join("corpus");
    cli(&["gen-corpus", "--out", s(&corpus)])?;
    let manifest = corpus.join("manifest.tsv");
    let trials = corpus.join("trials.tsv");
    let phon = dir.path().join("phonetic.bin");
    cli(&[
        "train-phonetic",
        "--corpus",
        s(&manifest),
        "--out",
        s(&phon),
    ])?;
    let oracle_eer = oracle_eer(&manifest, &trials, &corpus.join("truth.json"))?;
    Ok(Reference {
        dir,
        manifest,
        trials,
        setup: start.elapsed(),
        oracle_eer,
        runs: BTreeMap::new(),
    })
}

fn end_to_end(reference: &mut Reference) -> Check {
    let oracle = reference.oracle_eer;
    let setup = reference.setup;
    let r = reference.run("attention", "knn", SEEDS[0])?;
    let total = setup + r.elapsed;
    let detail = format!(
        "EER {:.4} (bound 0.10), latent-offset oracle EER {oracle:.4} (bound 0.02), {:.0} s",
        r.eer,
        total.as_secs_f64()
    );
    if r.eer <= 0.10 && oracle <= 0.02 && total < Duration::from_secs(15 * 60) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn pooling_trend(reference: &mut Reference) -> Check {
    let (att, att_all, t1) = reference.mean_eer("attention", "knn")?;
    let (post, post_all, t2) = reference.mean_eer("posterior", "knn")?;
    let (mean, mean_all, t3) = reference.mean_eer("mean", "knn")?;
    let total = t1 + t2 + t3;
    let detail = format!(
        "mean EER attention {att:.4} {att_all:.3?}, posterior {post:.4} {post_all:.3?}, mean {mean:.4} {mean_all:.3?}, {:.0} s",
        total.as_secs_f64()
    );
    if att <= post && post <= mean && total < Duration::from_secs(45 * 60) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn mining_trend(reference: &mut Reference) -> Check {
    let (knn, knn_all, t1) = reference.mean_eer("attention", "knn")?;
    let (random, random_all, t2) = reference.mean_eer("attention", "random")?;
    let total = t1 + t2;
    let detail = format!(
        "mean EER knn {knn:.4} {knn_all:.3?}, random {random:.4} {random_all:.3?}, {:.0} s",
        total.as_secs_f64()
    );
    if knn <= random && total < Duration::from_secs(30 * 60) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn attention_diagnosis(reference: &mut Reference) -> Check {
    let corpus = Corpus::load(&reference.manifest).map_err(|e| e.to_string())?;
    let mut lines = Vec::new();
    let mut ok = true;
    for seed in SEEDS {
        let path = reference.run("attention", "knn", seed)?.model.clone();
        let model = EndToEndModel::load(&path).map_err(|e| e.to_string())?;
        let (mut garbage, mut speech) = ((0.0, 0usize), (0.0, 0usize));
        for (i, rec) in corpus.records().iter().enumerate() {
            if rec.split == Split::Train {
                continue;
            }
            let utt = model
                .utterance_data(corpus.features(i).map_err(|e| e.to_string())?)
                .map_err(|e| e.to_string())?;
            let (_, alpha) = model.embed_with_weights(&utt).map_err(|e| e.to_string())?;
            let alpha = alpha.ok_or("attention model returned no weights")?;
            for (a, &l) in alpha
                .iter()
                .zip(&corpus.labels(i).map_err(|e| e.to_string())?)
            {
                let slot = if l == GARBAGE {
                    &mut garbage
                } else {
                    &mut speech
                };
                slot.0 += a;
                slot.1 += 1;
            }
        }
        let (g, p) = (garbage.0 / garbage.1 as f64, speech.0 / speech.1 as f64);
        ok &= g < p;
        lines.push(format!("seed {seed}: garbage {g:.5} vs phoneme {p:.5}"));
    }
    if ok {
        Ok(lines.join("; "))
    } else {
        Err(lines.join("; "))
    }
}

// ---------------------------------------------------------------- 9

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn same_tree(a: &Path, b: &Path) -> Result<usize, String> {
    let (fa, fb) = (files_under(a), files_under(b));
    if fa != fb {
        return Err(format!(
            "{} and {} hold different files",
            a.display(),
            b.display()
        ));
    }
    for f in &fa {
        if fs::read(a.join(f)).unwrap() != fs::read(b.join(f)).unwrap() {
            return Err(format!("{} differs", f.display()));
        }
    }
    Ok(fa.len())
}

fn same_files(a: &Path, b: &Path) -> Result<(), String> {
    if fs::read(a).map_err(|e| e.to_string())? == fs::read(b).map_err(|e| e.to_string())? {
        Ok(())
    } else {
        Err(format!("{} and {} differ", a.display(), b.display()))
    }
}

fn determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |n: &str| dir.path().join(n);
    fs::write(
        p("spec.json"),
        r#"{"train_speakers": 5, "utterances_per_speaker": [5, 7], "eval_speakers": 3, "enroll_utterances": 2, "test_utterances": 2, "frames": [15, 25]}"#,
    )
    .map_err(|e| e.to_string())?;
    for run in ["a", "b"] {
        cli(&[
            "--seed",
            "17",
            "gen-corpus",
            "--spec",
            s(&p("spec.json")),
            "--out",
            s(&p(&format!("corpus_{run}"))),
        ])?;
    }
    let n = same_tree(&p("corpus_a"), &p("corpus_b"))?;
    let manifest = p("corpus_a/manifest.tsv");
    for run in ["a", "b"] {
        cli(&[
            "--seed",
            "17",
            "train-phonetic",
            "--corpus",
            s(&manifest),
            "--out",
            s(&p(&format!("phon_{run}.bin"))),
            "--epochs",
            "2",
        ])?;
    }
    same_files(&p("phon_a.bin"), &p("phon_b.bin"))?;
    for run in ["a", "b"] {
        cli(&[
            "--seed",
            "17",
            "train-e2e",
            "--corpus",
            s(&manifest),
            "--phonetic",
            s(&p("phon_a.bin")),
            "--out",
            s(&p(&format!("e2e_{run}.bin"))),
            "--channels",
            "2/3",
            "--speakers-per-batch",
            "2",
            "--n-enroll",
            "2",
            "--t2",
            "2",
            "--k",
            "2",
            "--sweeps",
            "2",
        ])?;
    }
    same_files(&p("e2e_a.bin"), &p("e2e_b.bin"))?;
    same_files(&p("e2e_a.loss.csv"), &p("e2e_b.loss.csv"))?;
    for run in ["a", "b"] {
        cli(&[
            "--seed",
            "17",
            "enroll",
            "--model",
            s(&p("e2e_a.bin")),
            "--corpus",
            s(&manifest),
            "--out",
            s(&p(&format!("store_{run}.bin"))),
        ])?;
    }
    same_files(&p("store_a.bin"), &p("store_b.bin"))?;
    let verify: Vec<String> = ["a", "b"]
        .iter()
        .map(|_| {
            cli(&[
                "--seed",
                "17",
                "verify",
                "--model",
                s(&p("e2e_a.bin")),
                "--store",
                s(&p("store_a.bin")),
                "--corpus",
                s(&manifest),
                "--utterance",
                "ev0000_t00",
                "--speaker",
                "ev0001",
            ])
        })
        .collect::<Result<_, _>>()?;
    if verify[0] != verify[1] {
        return Err("verify output differs".into());
    }
    for run in ["a", "b"] {
        cli(&[
            "--seed",
            "17",
            "evaluate",
            "--model",
            s(&p("e2e_a.bin")),
            "--store",
            s(&p("store_a.bin")),
            "--corpus",
            s(&manifest),
            "--trials",
            s(&p("corpus_a/trials.tsv")),
            "--out",
            s(&p(&format!("eval_{run}"))),
        ])?;
    }
    let m = same_tree(&p("eval_a"), &p("eval_b"))?;
    Ok(format!("6 subcommands byte-identical across repeated runs ({n} corpus files, {m} evaluation files)"))
}

// ---------------------------------------------------------------- 10

fn invariant_suites() -> Check {
    const CASES: u32 = 256;
    let mut runner = TestRunner::new(Config {
        cases: CASES,
        failure_persistence: None,
        ..Config::default()
    });
    let mut names = Vec::new();
    let mut check = |name: &str, result: Result<(), String>| -> Result<(), String> {
        names.push(name.to_string());
        result.map_err(|e| format!("{name}: {e}"))
    };

    check(
        "softmax rows",
        runner
            .run(
                &(1usize..6, 1usize..12, 0.01f64..300.0, any::<u64>()),
                |(rows, cols, scale, seed)| {
                    let mut r = rng(seed);
                    let mut tape = Tape::new();
                    let x = tape
                        .constant(vec![rows, cols], uniform(&mut r, rows * cols, scale))
                        .unwrap();
                    let y = tape.softmax(x);
                    for row in tape.value(y).chunks(cols) {
                        prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
                        prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                    }
                    Ok(())
                },
            )
            .map_err(|e| e.to_string()),
    )?;

    check(
        "posterior rows",
        runner
            .run(
                &(1usize..30, 0.1f64..50.0, any::<u64>()),
                |(t, scale, seed)| {
                    let mut r = rng(seed);
                    let x = FrameSequence::new("u", uniform(&mut r, t * 38, scale), 38).unwrap();
                    let post = PhoneticModel::init(seed).posteriors(&x).unwrap();
                    prop_assert_eq!(post.len(), t * NUM_CLASSES);
                    for row in post.chunks(NUM_CLASSES) {
                        prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
                        prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                    }
                    Ok(())
                },
            )
            .map_err(|e| e.to_string()),
    )?;

    check(
        "cosine scale invariance",
        runner
            .run(&(1usize..40, -30i32..30, any::<u64>()), |(n, exp, seed)| {
                let mut r = rng(seed);
                let mut a = uniform(&mut r, n, 1.0);
                a[0] += 1.5;
                let b = uniform(&mut r, n, 1.0);
                let c = 2f64.powi(exp);
                let scaled: Vec<f64> = a.iter().map(|v| v * c).collect();
                prop_assert_eq!(cosine(&scaled, &b).unwrap(), cosine(&a, &b).unwrap());
                Ok(())
            })
            .map_err(|e| e.to_string()),
    )?;

    check(
        "trial ratio and impostor identity",
        runner
            .run(
                &(
                    2usize..20,
                    2usize..8,
                    1usize..4,
                    1usize..3,
                    0usize..7,
                    1usize..5,
                    any::<bool>(),
                    any::<u64>(),
                ),
                |(n, per_batch, n_enroll, t1, t2, k, knn, seed)| {
                    let mut r = rng(seed);
                    let need = n_enroll + t1;
                    let mut next = 0;
                    let mut set = TrainingSet {
                        speakers: Vec::new(),
                        utterances: Vec::new(),
                        excluded: Vec::new(),
                    };
                    for i in 0..n {
                        let m = r.gen_range(need..need + 5);
                        set.speakers.push(format!("s{i:02}"));
                        set.utterances.push((next..next + m).collect());
                        next += m;
                    }
                    let pool = SpeakerVectorPool {
                        vectors: set
                            .speakers
                            .iter()
                            .map(|sp| (sp.clone(), uniform(&mut r, 4, 1.0)))
                            .collect(),
                        generation: 1,
                    };
                    let table = build_impostor_table(&pool, k).unwrap();
                    let cfg = TrainConfig {
                        speakers_per_batch: per_batch,
                        n_enroll,
                        t1,
                        t2,
                        k,
                        miner: if knn {
                            MinerKind::Knn
                        } else {
                            MinerKind::Random
                        },
                        ..TrainConfig::default()
                    };
                    let speakers: Vec<usize> =
                        rand::seq::index::sample(&mut r, n, per_batch.min(n)).into_vec();
                    let plan = build_batch(&cfg, &set, &speakers, Some(&table), &mut r).unwrap();
                    prop_assert_eq!(plan.num_positive() * t2, plan.num_negative() * t1);
                    for (target, &si) in plan.targets.iter().zip(&speakers) {
                        prop_assert_eq!(target.positives.len() * t2, target.negatives.len() * t1);
                        for (u, from) in &target.negatives {
                            prop_assert!(from != &target.speaker);
                            prop_assert!(!set.utterances[si].contains(u));
                        }
                    }
                    Ok(())
                },
            )
            .map_err(|e| e.to_string()),
    )?;

    Ok(format!("{} property suites x {CASES} cases", names.len()))
}

// ----------------------------------------------------------------

fn report(id: usize, name: &str, start: Instant, result: &Check) -> bool {
    let secs = start.elapsed().as_secs_f64();
    match result {
        Ok(d) => println!("criterion {id:>2} PASS  {name}: {d} [{secs:.1} s]"),
        Err(d) => println!("criterion {id:>2} FAIL  {name}: {d} [{secs:.1} s]"),
    }
    result.is_ok()
}

fn main() -> ExitCode {
    let mut all = true;
    let quick: [(usize, &str, fn() -> Check, u64); 4] = [
        (1, "gradient integrity", gradient_integrity, 120),
        (2, "pooling oracle", pooling_oracle, 10),
        (3, "EER oracle", eer_oracle, 30),
        (4, "miner oracle", miner_oracle, 10),
    ];
    for (id, name, f, budget) in quick {
        let start = Instant::now();
        let result = f().and_then(|d| {
            if start.elapsed() < Duration::from_secs(budget) {
                Ok(d)
            } else {
                Err(format!("{d}; over the {budget} s budget"))
            }
        });
        all &= report(id, name, start, &result);
    }

    let start = Instant::now();
    match reference_setup() {
        Ok(mut reference) => {
            let staged: [(usize, &str, fn(&mut Reference) -> Check); 4] = [
                (5, "end-to-end learning", end_to_end),
                (6, "pooling trend", pooling_trend),
                (7, "mining trend", mining_trend),
                (8, "attention diagnosis", attention_diagnosis),
            ];
            for (id, name, f) in staged {
                let start = Instant::now();
                all &= report(id, name, start, &f(&mut reference));
            }
        }
        Err(e) => {
            for (id, name) in [
                (5, "end-to-end learning"),
                (6, "pooling trend"),
                (7, "mining trend"),
                (8, "attention diagnosis"),
            ] {
                all &= report(
                    id,
                    name,
                    start,
                    &Err(format!("reference corpus setup failed: {e}")),
                );
            }
        }
    }

    for (id, name, f) in [
        (9, "determinism", determinism as fn() -> Check),
        (10, "invariant suites", invariant_suites),
    ] {
        let start = Instant::now();
        all &= report(id, name, start, &f());
    }
    let strict = std::env::var("E2ESV_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if all {
        println!("acceptance: all criteria pass");
        ExitCode::SUCCESS
    } else if strict {
        ExitCode::FAILURE
    } else {
        println!("acceptance: some criteria FAIL (set E2ESV_ACCEPTANCE_STRICT=1 to fail the run)");
        ExitCode::SUCCESS
    }
}
