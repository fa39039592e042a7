//! Frame-level keyword phoneme classifier (38 -> 128 -> 64 -> 10).
//!
//! Its softmax outputs are the per-frame phoneme posteriors used to align
//! speaker features into phoneme blocks, and the pre-sigmoid outputs of the
//! second hidden layer are the 64-dim bottleneck context for attention.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::{FrameSequence, FEATURE_DIM};
use crate::nn::{
    glorot_uniform, read_file, sigmoid, softmax_row, ByteReader, ByteWriter, ParamStore, Tape,
    Tensor, FORMAT_VERSION,
};

pub const PHONEMES: [&str; 10] = ["hh", "ey", "k", "ao", "r", "t", "aa", "n", "er", "garbage"];
pub const NUM_CLASSES: usize = 10;
pub const GARBAGE: u8 = 9;
pub const HIDDEN1: usize = 128;
pub const BOTTLENECK_DIM: usize = 64;

const MODEL_MAGIC: &[u8; 4] = b"E2EP";
const LAYERS: [(&str, usize, usize); 3] = [
    ("l1", FEATURE_DIM, HIDDEN1),
    ("l2", HIDDEN1, BOTTLENECK_DIM),
    ("out", BOTTLENECK_DIM, NUM_CLASSES),
];

#[derive(Clone, Debug, PartialEq)]
pub struct PhoneticModel {
    pub params: ParamStore,
}

/// Posterior (`T x 10`) and bottleneck (`T x 64`) features of one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct PhoneticFeatures {
    pub num_frames: usize,
    pub posteriors: Vec<f64>,
    pub bottleneck: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct PhoneticTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_frames: usize,
    pub seed: u64,
}

impl Default for PhoneticTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            learning_rate: 0.1,
            batch_frames: 256,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhoneticTrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub epoch_losses: Vec<f64>,
}

/// One labeled utterance for phonetic training.
pub struct LabeledUtterance<'a> {
    pub frames: &'a FrameSequence,
    pub labels: &'a [u8],
}

fn affine(x: &[f64], w: &[f64], b: &[f64], n_in: usize) -> Vec<f64> {
    b.iter()
        .enumerate()
        .map(|(i, bi)| {
            bi + w[i * n_in..(i + 1) * n_in]
                .iter()
                .zip(x)
                .map(|(a, c)| a * c)
                .sum::<f64>()
        })
        .collect()
}

impl PhoneticModel {
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, n_in, n_out) in LAYERS {
            params
                .insert(
                    &format!("{name}.W"),
                    glorot_uniform(&mut rng, vec![n_out, n_in], n_in, n_out),
                    true,
                )
                .expect("unique");
            params
                .insert(
                    &format!("{name}.b"),
                    Tensor::zeros(vec![n_out]).expect("positive"),
                    true,
                )
                .expect("unique");
        }
        PhoneticModel { params }
    }

    fn layer(&self, name: &str) -> (&[f64], &[f64]) {
        (
            self.params
                .get(&format!("{name}.W"))
                .expect("layer weight")
                .values(),
            self.params
                .get(&format!("{name}.b"))
                .expect("layer bias")
                .values(),
        )
    }

    /// Layer-2 pre-activation and output posteriors for one frame.
    fn forward_frame(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (w1, b1) = self.layer("l1");
        let (w2, b2) = self.layer("l2");
        let (w3, b3) = self.layer("out");
        let a1: Vec<f64> = affine(x, w1, b1, FEATURE_DIM)
            .into_iter()
            .map(sigmoid)
            .collect();
        let pre2 = affine(&a1, w2, b2, HIDDEN1);
        let a2: Vec<f64> = pre2.iter().map(|&v| sigmoid(v)).collect();
        let logits = affine(&a2, w3, b3, BOTTLENECK_DIM);
        let mut post = vec![0.0; NUM_CLASSES];
        softmax_row(&logits, &mut post);
        (pre2, post)
    }

    fn check_dim(x: &FrameSequence) -> Result<()> {
        if x.dim() != FEATURE_DIM {
            return Err(Error::shape(
                "phonetic input",
                &[x.num_frames(), x.dim()],
                &[x.num_frames(), FEATURE_DIM],
            ));
        }
        Ok(())
    }

    /// Both feature streams in one pass.
    pub fn extract(&self, x: &FrameSequence) -> Result<PhoneticFeatures> {
        Self::check_dim(x)?;
        let t = x.num_frames();
        let mut posteriors = Vec::with_capacity(t * NUM_CLASSES);
        let mut bottleneck = Vec::with_capacity(t * BOTTLENECK_DIM);
        for ti in 0..t {
            let (b, p) = self.forward_frame(x.frame(ti));
            bottleneck.extend(b);
            posteriors.extend(p);
        }
        Ok(PhoneticFeatures {
            num_frames: t,
            posteriors,
            bottleneck,
        })
    }

    /// `T x 10` phoneme posteriors, row-major.
    pub fn posteriors(&self, x: &FrameSequence) -> Result<Vec<f64>> {
        Ok(self.extract(x)?.posteriors)
    }

    /// `T x 64` pre-sigmoid outputs of the second hidden layer.
    pub fn bottleneck(&self, x: &FrameSequence) -> Result<Vec<f64>> {
        Ok(self.extract(x)?.bottleneck)
    }

    fn batch_loss(
        &self,
        tape: &mut Tape,
        frames: Vec<f64>,
        labels: &[usize],
    ) -> Result<crate::nn::Var> {
        let rows = labels.len();
        let x = tape.constant(vec![rows, FEATURE_DIM], frames)?;
        let mut h = x;
        for (i, (name, _, _)) in LAYERS.iter().enumerate() {
            let w = tape.param(&self.params, &format!("{name}.W"))?;
            let b = tape.param(&self.params, &format!("{name}.b"))?;
            h = tape.linear(h, w, Some(b))?;
            if i + 1 < LAYERS.len() {
                h = tape.sigmoid(h);
            }
        }
        tape.cross_entropy(h, labels)
    }

    /// Mean cross-entropy over every labeled frame.
    pub fn corpus_loss(&self, corpus: &[LabeledUtterance<'_>]) -> Result<f64> {
        let mut total = 0.0;
        let mut n = 0usize;
        for u in corpus {
            for (t, &lab) in u.labels.iter().enumerate() {
                let (_, p) = self.forward_frame(u.frames.frame(t));
                total -= p[lab as usize].max(1e-300).ln();
                n += 1;
            }
        }
        Ok(total / n.max(1) as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = ByteWriter::new();
        w.magic(MODEL_MAGIC).u32(FORMAT_VERSION);
        self.write_into(&mut w);
        w.write_to(path)
    }

    pub(crate) fn write_into(&self, w: &mut ByteWriter) {
        w.named_tensors(&self.params);
    }

    pub(crate) fn read_from(r: &mut ByteReader<'_>) -> Result<Self> {
        let params = r.named_tensors()?;
        for (name, n_in, n_out) in LAYERS {
            let w = params
                .get(&format!("{name}.W"))
                .map_err(|e| r.err(e.to_string()))?;
            let b = params
                .get(&format!("{name}.b"))
                .map_err(|e| r.err(e.to_string()))?;
            if w.shape() != [n_out, n_in] || b.shape() != [n_out] {
                return Err(r.err(format!("layer {name} has wrong shape")));
            }
        }
        Ok(PhoneticModel { params })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let mut r = ByteReader::new(&bytes, path);
        r.expect_magic(MODEL_MAGIC)?;
        r.expect_version()?;
        let m = Self::read_from(&mut r)?;
        r.expect_end()?;
        Ok(m)
    }
}

/// Minibatch SGD on frame cross-entropy. Frames are reshuffled every epoch.
pub fn train_phonetic(
    corpus: &[LabeledUtterance<'_>],
    cfg: &PhoneticTrainConfig,
) -> Result<(PhoneticModel, PhoneticTrainReport)> {
    let mut index: Vec<(usize, usize)> = Vec::new();
    for (u, utt) in corpus.iter().enumerate() {
        PhoneticModel::check_dim(utt.frames)?;
        if utt.labels.len() != utt.frames.num_frames() {
            return Err(Error::Data(format!(
                "utterance {}: {} labels for {} frames",
                utt.frames.utt_id,
                utt.labels.len(),
                utt.frames.num_frames()
            )));
        }
        if let Some(&bad) = utt.labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::Data(format!(
                "utterance {}: label {bad} outside 0..{NUM_CLASSES}",
                utt.frames.utt_id
            )));
        }
        index.extend((0..utt.labels.len()).map(|t| (u, t)));
    }
    if index.is_empty() {
        return Err(Error::Data("empty phonetic training corpus".into()));
    }
    if cfg.batch_frames == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut model = PhoneticModel::init(cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let initial_loss = model.corpus_loss(corpus)?;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        index.shuffle(&mut rng);
        for batch in index.chunks(cfg.batch_frames) {
            let mut frames = Vec::with_capacity(batch.len() * FEATURE_DIM);
            let mut labels = Vec::with_capacity(batch.len());
            for &(u, t) in batch {
                frames.extend_from_slice(corpus[u].frames.frame(t));
                labels.push(corpus[u].labels[t] as usize);
            }
            let mut tape = Tape::new();
            let loss = model.batch_loss(&mut tape, frames, &labels)?;
            if !tape.scalar(loss).is_finite() {
                return Err(Error::NonFinite("phonetic training loss".into()));
            }
            model.params.zero_grads();
            let grads = tape.backward(loss);
            tape.accumulate_param_grads(&grads, &mut model.params)?;
            model.params.sgd_step(cfg.learning_rate);
        }
        epoch_losses.push(model.corpus_loss(corpus)?);
    }
    let final_loss = epoch_losses.last().copied().unwrap_or(initial_loss);
    Ok((
        model,
        PhoneticTrainReport {
            initial_loss,
            final_loss,
            epoch_losses,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    /// Ten well separated Gaussian classes in 38 dims.
    fn gaussian_corpus(
        seed: u64,
        utts: usize,
        frames: usize,
    ) -> (Vec<FrameSequence>, Vec<Vec<u8>>, Vec<Vec<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let means: Vec<Vec<f64>> = (0..NUM_CLASSES)
            .map(|_| {
                (0..FEATURE_DIM)
                    .map(|_| 1.5 * normal.sample(&mut rng))
                    .collect()
            })
            .collect();
        let mut seqs = Vec::new();
        let mut labels = Vec::new();
        for u in 0..utts {
            let mut v = Vec::new();
            let mut l = Vec::new();
            for _ in 0..frames {
                let c = rng.gen_range(0..NUM_CLASSES);
                l.push(c as u8);
                v.extend(means[c].iter().map(|m| m + 0.3 * normal.sample(&mut rng)));
            }
            seqs.push(FrameSequence::new(format!("u{u}"), v, FEATURE_DIM).unwrap());
            labels.push(l);
        }
        (seqs, labels, means)
    }

    fn labeled<'a>(s: &'a [FrameSequence], l: &'a [Vec<u8>]) -> Vec<LabeledUtterance<'a>> {
        s.iter()
            .zip(l)
            .map(|(frames, labels)| LabeledUtterance { frames, labels })
            .collect()
    }

    fn accuracy(m: &PhoneticModel, s: &[FrameSequence], l: &[Vec<u8>]) -> f64 {
        let mut ok = 0;
        let mut n = 0;
        for (x, lab) in s.iter().zip(l) {
            let p = m.posteriors(x).unwrap();
            for (t, &y) in lab.iter().enumerate() {
                let row = &p[t * NUM_CLASSES..(t + 1) * NUM_CLASSES];
                let arg = (0..NUM_CLASSES)
                    .max_by(|&a, &b| row[a].total_cmp(&row[b]))
                    .unwrap();
                ok += (arg == y as usize) as usize;
                n += 1;
            }
        }
        ok as f64 / n as f64
    }

    #[test]
    fn separable_classes_are_learned() {
        let (s, l, means) = gaussian_corpus(3, 40, 50);
        // Nearest-class-mean oracle on the same frames.
        let mut ok = 0;
        for (x, lab) in s.iter().zip(&l) {
            for (t, &y) in lab.iter().enumerate() {
                let f = x.frame(t);
                let best = (0..NUM_CLASSES)
                    .min_by(|&a, &b| {
                        let da: f64 = f.iter().zip(&means[a]).map(|(p, q)| (p - q).powi(2)).sum();
                        let db: f64 = f.iter().zip(&means[b]).map(|(p, q)| (p - q).powi(2)).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                ok += (best == y as usize) as usize;
            }
        }
        assert!(ok as f64 / 2000.0 > 0.99);

        let cfg = PhoneticTrainConfig {
            seed: 5,
            ..Default::default()
        };
        let (m, report) = train_phonetic(&labeled(&s, &l), &cfg).unwrap();
        assert!(report.final_loss < report.initial_loss);
        assert!(
            accuracy(&m, &s, &l) > 0.95,
            "accuracy {}",
            accuracy(&m, &s, &l)
        );

        // A frame deep inside a cluster is classified as that cluster.
        for (c, mean) in means.iter().enumerate() {
            let x = FrameSequence::new("c", mean.clone(), FEATURE_DIM).unwrap();
            let p = m.posteriors(&x).unwrap();
            let arg = (0..NUM_CLASSES)
                .max_by(|&a, &b| p[a].total_cmp(&p[b]))
                .unwrap();
            assert_eq!(arg, c);
        }
    }

    #[test]
    fn single_class_corpus_saturates() {
        let (s, mut l, _) = gaussian_corpus(4, 10, 40);
        l.iter_mut().for_each(|v| v.iter_mut().for_each(|y| *y = 4));
        let cfg = PhoneticTrainConfig {
            epochs: 30,
            learning_rate: 0.5,
            ..Default::default()
        };
        let (m, _) = train_phonetic(&labeled(&s, &l), &cfg).unwrap();
        for x in &s {
            let p = m.posteriors(x).unwrap();
            for row in p.chunks(NUM_CLASSES) {
                assert!(row[4] > 0.99, "{}", row[4]);
            }
        }
    }

    #[test]
    fn zero_epochs_returns_init() {
        let (s, l, _) = gaussian_corpus(5, 2, 10);
        let cfg = PhoneticTrainConfig {
            epochs: 0,
            seed: 9,
            ..Default::default()
        };
        let (m, r) = train_phonetic(&labeled(&s, &l), &cfg).unwrap();
        assert_eq!(m, PhoneticModel::init(9));
        assert_eq!(r.initial_loss, r.final_loss);
    }

    #[test]
    fn training_errors() {
        assert!(matches!(
            train_phonetic(&[], &PhoneticTrainConfig::default()),
            Err(Error::Data(_))
        ));
        let (s, mut l, _) = gaussian_corpus(6, 1, 5);
        l[0][2] = 10;
        assert!(train_phonetic(&labeled(&s, &l), &PhoneticTrainConfig::default()).is_err());
    }

    #[test]
    fn posterior_rows_sum_to_one_and_shapes() {
        let m = PhoneticModel::init(1);
        let x = FrameSequence::new(
            "x",
            (0..7 * FEATURE_DIM)
                .map(|i| (i as f64 * 0.37).sin() * 50.0)
                .collect(),
            FEATURE_DIM,
        )
        .unwrap();
        let f = m.extract(&x).unwrap();
        assert_eq!(f.posteriors.len(), 7 * NUM_CLASSES);
        assert_eq!(f.bottleneck.len(), 7 * BOTTLENECK_DIM);
        for row in f.posteriors.chunks(NUM_CLASSES) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
        let bad = FrameSequence::new("b", vec![0.0; 13], 13).unwrap();
        assert!(matches!(m.posteriors(&bad), Err(Error::Shape { .. })));
    }

    #[test]
    fn bottleneck_is_layer2_preactivation() {
        let m = PhoneticModel::init(2);
        let frame: Vec<f64> = (0..FEATURE_DIM).map(|i| (i as f64).cos()).collect();
        let x =
            FrameSequence::new("x", [frame.clone(), frame.clone()].concat(), FEATURE_DIM).unwrap();
        let b = m.bottleneck(&x).unwrap();
        assert_eq!(&b[..BOTTLENECK_DIM], &b[BOTTLENECK_DIM..]);
        // Recompute layer 2 activations directly.
        let (w1, b1) = m.layer("l1");
        let (w2, b2) = m.layer("l2");
        for i in 0..BOTTLENECK_DIM {
            let mut a2 = b2[i];
            for j in 0..HIDDEN1 {
                let mut a1 = b1[j];
                for k in 0..FEATURE_DIM {
                    a1 += w1[j * FEATURE_DIM + k] * frame[k];
                }
                a2 += w2[i * HIDDEN1 + j] * sigmoid(a1);
            }
            assert!((sigmoid(b[i]) - sigmoid(a2)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weight_bottleneck_equals_bias() {
        let mut m = PhoneticModel::init(3);
        for name in ["l1.W", "l2.W"] {
            m.params
                .get_mut(name)
                .unwrap()
                .values_mut()
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
        let bias: Vec<f64> = (0..BOTTLENECK_DIM).map(|i| i as f64 * 0.1 - 2.0).collect();
        m.params
            .get_mut("l2.b")
            .unwrap()
            .values_mut()
            .copy_from_slice(&bias);
        let x = FrameSequence::new("x", vec![1.0; 2 * FEATURE_DIM], FEATURE_DIM).unwrap();
        let b = m.bottleneck(&x).unwrap();
        assert_eq!(&b[..BOTTLENECK_DIM], bias.as_slice());
    }

    #[test]
    fn training_is_deterministic_and_file_roundtrips() {
        let (s, l, _) = gaussian_corpus(7, 4, 20);
        let cfg = PhoneticTrainConfig {
            epochs: 2,
            ..Default::default()
        };
        let (a, _) = train_phonetic(&labeled(&s, &l), &cfg).unwrap();
        let (b, _) = train_phonetic(&labeled(&s, &l), &cfg).unwrap();
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.bin");
        a.save(&p).unwrap();
        assert_eq!(PhoneticModel::load(&p).unwrap(), a);
    }
}
