//! Frame-level speaker networks mapping a `3 x 31 x 12` context window to a
//! 64-dim speaker feature.
//!
//! The CNN is VGG-style: blocks of 3x3 conv -> batch-norm -> ReLU, each block
//! closed by 2x2/stride-2 max pooling, then a linear projection. The frame
//! DNN (1116 -> 256 -> 64) is the ablation alternative behind the same API.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{ContextWindowBatch, CHANNELS, CHANNEL_DIM, CONTEXT_FRAMES, WINDOW_LEN};
use crate::nn::{
    batchnorm, glorot_uniform, read_file, BatchNormState, ByteReader, ByteWriter, HasParams, Mode,
    ParamStore, Tape, Tensor, Var, FORMAT_VERSION,
};

pub const EMBED_DIM: usize = 64;
const MODEL_MAGIC: &[u8; 4] = b"E2EC";
/// Frames per forward chunk in infer mode (bounds activation memory).
const INFER_CHUNK: usize = 256;

/// Layer layout, stored in model files as JSON with a fixed key order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Architecture {
    Cnn {
        input: [usize; 3],
        /// Output channels of each conv layer, grouped into pooling blocks.
        blocks: Vec<Vec<usize>>,
        embed_dim: usize,
    },
    Dnn {
        input: [usize; 3],
        hidden: Vec<usize>,
        embed_dim: usize,
    },
}

impl Architecture {
    /// conv(3->32) x2, pool, conv(32->64) x2, pool, linear(1536->64).
    pub fn canonical_cnn() -> Self {
        Self::cnn_with_blocks(vec![vec![32, 32], vec![64, 64]])
    }

    pub fn cnn_with_blocks(blocks: Vec<Vec<usize>>) -> Self {
        Architecture::Cnn {
            input: [CHANNELS, CONTEXT_FRAMES, CHANNEL_DIM],
            blocks,
            embed_dim: EMBED_DIM,
        }
    }

    /// Two hidden layers (256, 64) over the flattened window.
    pub fn frame_dnn() -> Self {
        Architecture::Dnn {
            input: [CHANNELS, CONTEXT_FRAMES, CHANNEL_DIM],
            hidden: vec![256],
            embed_dim: EMBED_DIM,
        }
    }

    pub fn embed_dim(&self) -> usize {
        match self {
            Architecture::Cnn { embed_dim, .. } | Architecture::Dnn { embed_dim, .. } => *embed_dim,
        }
    }

    pub fn input(&self) -> [usize; 3] {
        match self {
            Architecture::Cnn { input, .. } | Architecture::Dnn { input, .. } => *input,
        }
    }

    /// Output shape `(channels, height, width)` of the last conv block.
    fn cnn_flat_dims(input: [usize; 3], blocks: &[Vec<usize>]) -> (usize, usize, usize) {
        let (mut c, mut h, mut w) = (input[0], input[1], input[2]);
        for block in blocks {
            if let Some(&last) = block.last() {
                c = last;
            }
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        (c, h, w)
    }

    /// Human-readable layer list.
    pub fn describe(&self) -> Vec<String> {
        let mut out = Vec::new();
        match self {
            Architecture::Cnn {
                input,
                blocks,
                embed_dim,
            } => {
                let (mut c, mut h, mut w) = (input[0], input[1], input[2]);
                for block in blocks {
                    for &o in block {
                        out.push(format!("conv3x3({c}->{o}) -> bn -> relu  [{o}x{h}x{w}]"));
                        c = o;
                    }
                    h = h.div_ceil(2);
                    w = w.div_ceil(2);
                    out.push(format!("maxpool2  [{c}x{h}x{w}]"));
                }
                out.push(format!("linear({}->{embed_dim})", c * h * w));
            }
            Architecture::Dnn {
                input,
                hidden,
                embed_dim,
            } => {
                let mut n = input.iter().product::<usize>();
                for &hdim in hidden {
                    out.push(format!("linear({n}->{hdim}) -> relu"));
                    n = hdim;
                }
                out.push(format!("linear({n}->{embed_dim})"));
            }
        }
        out
    }

    fn to_json(&self) -> String {
        serde_json::to_string(self).expect("architecture serializes")
    }
}

fn conv_name(block: usize, layer: usize) -> String {
    format!("conv{block}_{layer}")
}

/// Speaker network parameters plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerNet {
    pub arch: Architecture,
    pub params: ParamStore,
    pub bn: Vec<BatchNormState>,
}

impl HasParams for SpeakerNet {
    fn stores(&self) -> Vec<&ParamStore> {
        vec![&self.params]
    }
    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        vec![&mut self.params]
    }
}

impl SpeakerNet {
    /// Glorot-uniform kernels and weights, zero biases, BN scale 1 / shift 0.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut bn = Vec::new();
        match &arch {
            Architecture::Cnn {
                input,
                blocks,
                embed_dim,
            } => {
                if blocks.is_empty() || blocks.iter().any(|b| b.is_empty() || b.contains(&0)) {
                    return Err(Error::InvalidArgument(
                        "CNN blocks must be nonempty with positive widths".into(),
                    ));
                }
                let mut c = input[0];
                for (bi, block) in blocks.iter().enumerate() {
                    for (li, &o) in block.iter().enumerate() {
                        let name = conv_name(bi, li);
                        params.insert(
                            &format!("{name}.K"),
                            glorot_uniform(&mut rng, vec![o, c, 3, 3], c * 9, o * 9),
                            true,
                        )?;
                        params.insert(
                            &format!("{name}.bn_scale"),
                            Tensor::new(vec![o], vec![1.0; o])?,
                            true,
                        )?;
                        params.insert(
                            &format!("{name}.bn_shift"),
                            Tensor::zeros(vec![o])?,
                            true,
                        )?;
                        bn.push(BatchNormState::default());
                        c = o;
                    }
                }
                let (fc, fh, fw) = Architecture::cnn_flat_dims(*input, blocks);
                let flat = fc * fh * fw;
                params.insert(
                    "proj.W",
                    glorot_uniform(&mut rng, vec![*embed_dim, flat], flat, *embed_dim),
                    true,
                )?;
                params.insert("proj.b", Tensor::zeros(vec![*embed_dim])?, true)?;
            }
            Architecture::Dnn {
                input,
                hidden,
                embed_dim,
            } => {
                let mut n = input.iter().product::<usize>();
                for (i, &hdim) in hidden.iter().chain(std::iter::once(embed_dim)).enumerate() {
                    params.insert(
                        &format!("fc{i}.W"),
                        glorot_uniform(&mut rng, vec![hdim, n], n, hdim),
                        true,
                    )?;
                    params.insert(&format!("fc{i}.b"), Tensor::zeros(vec![hdim])?, true)?;
                    n = hdim;
                }
            }
        }
        Ok(SpeakerNet { arch, params, bn })
    }

    pub fn init_canonical(seed: u64) -> Result<Self> {
        Self::init(Architecture::canonical_cnn(), seed)
    }

    pub fn embed_dim(&self) -> usize {
        self.arch.embed_dim()
    }

    /// Records the network on `tape` for a flat `[frames x 3 x 31 x 12]`
    /// window buffer. Returns a `[frames, 64]` node. In train mode every
    /// batch-norm layer normalizes with statistics over all frames of the call
    /// and updates its running statistics.
    pub fn forward(&mut self, tape: &mut Tape, windows: &[f64], mode: Mode) -> Result<Var> {
        forward_impl(&self.arch, &self.params, &mut self.bn, tape, windows, mode)
    }

    /// Infer-mode forward that leaves the model untouched.
    pub fn forward_infer(&self, tape: &mut Tape, windows: &[f64]) -> Result<Var> {
        let mut bn = self.bn.clone();
        forward_impl(
            &self.arch,
            &self.params,
            &mut bn,
            tape,
            windows,
            Mode::Infer,
        )
    }

    /// `T x 64` frame features without gradients. Train mode runs the whole
    /// batch at once (batch statistics); infer mode works in chunks.
    pub fn extract_frame_features(
        &mut self,
        windows: &ContextWindowBatch,
        mode: Mode,
    ) -> Result<Vec<f64>> {
        match mode {
            Mode::Train => {
                self.check_window_len()?;
                let mut tape = Tape::new();
                let h = self.forward(&mut tape, windows.as_slice(), Mode::Train)?;
                Ok(tape.value(h).to_vec())
            }
            Mode::Infer => self.infer_frame_features(windows),
        }
    }

    /// Infer-mode frame features; a pure function of model and windows.
    pub fn infer_frame_features(&self, windows: &ContextWindowBatch) -> Result<Vec<f64>> {
        self.check_window_len()?;
        let mut out = Vec::with_capacity(windows.num_frames() * self.embed_dim());
        for chunk in windows.as_slice().chunks(INFER_CHUNK * WINDOW_LEN) {
            let mut tape = Tape::new();
            let h = self.forward_infer(&mut tape, chunk)?;
            out.extend_from_slice(tape.value(h));
        }
        Ok(out)
    }

    fn check_window_len(&self) -> Result<()> {
        if self.arch.input().iter().product::<usize>() != WINDOW_LEN {
            return Err(Error::shape(
                "extract_frame_features",
                &[WINDOW_LEN],
                &self.arch.input(),
            ));
        }
        Ok(())
    }

    /// Initializes batch-norm running statistics from one train-mode pass
    /// over `windows` if they are not set yet.
    pub fn ensure_bn_stats(&mut self, windows: &[f64]) -> Result<()> {
        if self.bn.iter().all(BatchNormState::is_initialized) {
            return Ok(());
        }
        let mut tape = Tape::new();
        self.forward(&mut tape, windows, Mode::Train)?;
        Ok(())
    }

    fn bn_layer_names(&self) -> Vec<String> {
        match &self.arch {
            Architecture::Cnn { blocks, .. } => blocks
                .iter()
                .enumerate()
                .flat_map(|(bi, b)| (0..b.len()).map(move |li| conv_name(bi, li)))
                .collect(),
            Architecture::Dnn { .. } => Vec::new(),
        }
    }

    pub(crate) fn write_into(&self, w: &mut ByteWriter) -> Result<()> {
        w.magic(MODEL_MAGIC)
            .u32(FORMAT_VERSION)
            .str(&self.arch.to_json());
        let mut all = self.params.clone();
        for (name, state) in self.bn_layer_names().iter().zip(&self.bn) {
            if let (Some(m), Some(v)) = (&state.running_mean, &state.running_var) {
                all.insert(
                    &format!("{name}.running_mean"),
                    Tensor::from_vec(m.clone()),
                    false,
                )?;
                all.insert(
                    &format!("{name}.running_var"),
                    Tensor::from_vec(v.clone()),
                    false,
                )?;
            }
        }
        w.named_tensors(&all);
        Ok(())
    }

    pub(crate) fn read_from(r: &mut ByteReader<'_>) -> Result<Self> {
        r.expect_magic(MODEL_MAGIC)?;
        r.expect_version()?;
        let json = r.str()?;
        let arch: Architecture = serde_json::from_str(&json)
            .map_err(|e| r.err(format!("bad architecture descriptor: {e}")))?;
        let stored = r.named_tensors()?;
        let mut net = SpeakerNet::init(arch, 0).map_err(|e| r.err(e.to_string()))?;
        let names: Vec<String> = net.params.names().map(str::to_string).collect();
        for name in names {
            let t = stored.get(&name).map_err(|e| r.err(e.to_string()))?;
            if t.shape() != net.params.get(&name)?.shape() {
                return Err(r.err(format!("parameter {name} has shape {:?}", t.shape())));
            }
            *net.params.get_mut(&name)? = t.clone();
        }
        for (name, state) in net.bn_layer_names().iter().zip(net.bn.iter_mut()) {
            let m = format!("{name}.running_mean");
            let v = format!("{name}.running_var");
            if stored.contains(&m) && stored.contains(&v) {
                state.running_mean = Some(stored.get(&m)?.values().to_vec());
                state.running_var = Some(stored.get(&v)?.values().to_vec());
            }
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = ByteWriter::new();
        self.write_into(&mut w)?;
        w.write_to(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let mut r = ByteReader::new(&bytes, path);
        let net = Self::read_from(&mut r)?;
        r.expect_end()?;
        Ok(net)
    }
}

fn forward_impl(
    arch: &Architecture,
    params: &ParamStore,
    bn: &mut [BatchNormState],
    tape: &mut Tape,
    windows: &[f64],
    mode: Mode,
) -> Result<Var> {
    let input = arch.input();
    let per = input.iter().product::<usize>();
    if windows.is_empty() || windows.len() % per != 0 {
        return Err(Error::shape("speaker net input", &[windows.len()], &input));
    }
    let frames = windows.len() / per;
    match arch {
        Architecture::Cnn { blocks, .. } => {
            let mut x =
                tape.constant(vec![frames, input[0], input[1], input[2]], windows.to_vec())?;
            let mut layer = 0;
            for (bi, block) in blocks.iter().enumerate() {
                for li in 0..block.len() {
                    let name = conv_name(bi, li);
                    let k = tape.param(params, &format!("{name}.K"))?;
                    let scale = tape.param(params, &format!("{name}.bn_scale"))?;
                    let shift = tape.param(params, &format!("{name}.bn_shift"))?;
                    let conv = tape.conv2d(x, k)?;
                    let norm = batchnorm(tape, conv, scale, shift, &mut bn[layer], mode)?;
                    x = tape.relu(norm);
                    layer += 1;
                }
                x = tape.maxpool2(x)?;
            }
            let flat: usize = tape.shape(x)[1..].iter().product();
            let x = tape.reshape(x, vec![frames, flat])?;
            let w = tape.param(params, "proj.W")?;
            let b = tape.param(params, "proj.b")?;
            tape.linear(x, w, Some(b))
        }
        Architecture::Dnn { hidden, .. } => {
            let mut x = tape.constant(vec![frames, per], windows.to_vec())?;
            for i in 0..=hidden.len() {
                let w = tape.param(params, &format!("fc{i}.W"))?;
                let b = tape.param(params, &format!("fc{i}.b"))?;
                x = tape.linear(x, w, Some(b))?;
                if i < hidden.len() {
                    x = tape.relu(x);
                }
            }
            Ok(x)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{gradient_check, GradCheckOptions};
    use rand::Rng;

    fn random_windows(seed: u64, frames: usize) -> ContextWindowBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ContextWindowBatch::from_values(
            (0..frames * WINDOW_LEN)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    fn small_arch() -> Architecture {
        Architecture::cnn_with_blocks(vec![vec![3, 3], vec![4]])
    }

    #[test]
    fn canonical_layout() {
        let net = SpeakerNet::init_canonical(0).unwrap();
        assert_eq!(net.params.get("conv0_0.K").unwrap().shape(), [32, 3, 3, 3]);
        assert_eq!(net.params.get("conv1_1.K").unwrap().shape(), [64, 64, 3, 3]);
        assert_eq!(net.params.get("proj.W").unwrap().shape(), [64, 1536]);
        assert_eq!(net.bn.len(), 4);
        let d = Architecture::canonical_cnn().describe();
        assert!(d.contains(&"maxpool2  [32x16x6]".to_string()));
        assert!(d.contains(&"maxpool2  [64x8x3]".to_string()));
        assert_eq!(d.last().unwrap(), "linear(1536->64)");
    }

    #[test]
    fn shapes_and_determinism() {
        let mut net = SpeakerNet::init_canonical(1).unwrap();
        let w = random_windows(2, 5);
        let h = net.extract_frame_features(&w, Mode::Train).unwrap();
        assert_eq!(h.len(), 5 * EMBED_DIM);
        assert!(h.iter().all(|v| v.is_finite()));

        let one = w.window(3).to_vec();
        let twice = ContextWindowBatch::from_values([one.clone(), one].concat()).unwrap();
        let hi = net.extract_frame_features(&twice, Mode::Infer).unwrap();
        assert_eq!(&hi[..EMBED_DIM], &hi[EMBED_DIM..]);

        let single = ContextWindowBatch::from_values(w.window(0).to_vec()).unwrap();
        assert_eq!(
            net.extract_frame_features(&single, Mode::Infer)
                .unwrap()
                .len(),
            EMBED_DIM
        );
    }

    #[test]
    fn infer_before_training_fails() {
        let mut net = SpeakerNet::init(small_arch(), 0).unwrap();
        let err = net
            .extract_frame_features(&random_windows(0, 2), Mode::Infer)
            .unwrap_err();
        assert!(err
            .to_string()
            .contains("uninitialized normalization statistics"));
    }

    #[test]
    fn same_seed_same_model_and_zero_biases() {
        let a = SpeakerNet::init_canonical(7).unwrap();
        let b = SpeakerNet::init_canonical(7).unwrap();
        assert_eq!(a, b);
        assert!(a
            .params
            .get("proj.b")
            .unwrap()
            .values()
            .iter()
            .all(|&v| v == 0.0));
        assert!(a
            .params
            .get("conv1_0.bn_shift")
            .unwrap()
            .values()
            .iter()
            .all(|&v| v == 0.0));
        assert!(a
            .params
            .get("conv1_0.bn_scale")
            .unwrap()
            .values()
            .iter()
            .all(|&v| v == 1.0));
    }

    #[test]
    fn weight_mean_is_centered() {
        let net = SpeakerNet::init_canonical(11).unwrap();
        let w = net.params.get("proj.W").unwrap().values();
        assert!(w.len() >= 10_000);
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let limit = (6.0_f64 / (1536.0 + 64.0)).sqrt();
        assert!(w.iter().all(|v| v.abs() <= limit));
        // Uniform(-a, a) has std a / sqrt(3).
        let stderr = limit / 3f64.sqrt() / n.sqrt();
        assert!(mean.abs() < 3.0 * stderr, "mean {mean}, stderr {stderr}");
    }

    #[test]
    fn sensitive_to_every_kernel_tensor() {
        let mut net = SpeakerNet::init(small_arch(), 3).unwrap();
        let w = random_windows(4, 3);
        net.ensure_bn_stats(w.as_slice()).unwrap();
        let base = net.extract_frame_features(&w, Mode::Infer).unwrap();
        for name in ["conv0_0.K", "conv0_1.K", "conv1_0.K"] {
            let mut p = net.clone();
            p.params.get_mut(name).unwrap().values_mut()[5] += 1e-3;
            let out = p.extract_frame_features(&w, Mode::Infer).unwrap();
            let diff = base
                .iter()
                .zip(&out)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff > 0.0, "{name} had no effect");
        }
    }

    #[test]
    fn gradient_check_through_full_cnn() {
        let mut net = SpeakerNet::init(
            Architecture::cnn_with_blocks(vec![vec![2, 2], vec![3, 3]]),
            5,
        )
        .unwrap();
        let w = random_windows(6, 2);
        let target: Vec<f64> = (0..2 * EMBED_DIM).map(|i| (i as f64 * 0.3).sin()).collect();
        let report = gradient_check(
            &mut net,
            &GradCheckOptions {
                max_entries_per_tensor: Some(40),
                ..Default::default()
            },
            |net, tape| {
                let h = net.forward(tape, w.as_slice(), Mode::Train)?;
                let t = tape.constant(vec![2, EMBED_DIM], target.clone())?;
                let d = tape.add(h, t)?;
                Ok(tape.sum_squares(d))
            },
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
        assert!(report.entries_checked > 100);
    }

    #[test]
    fn dnn_has_same_interface() {
        let mut net = SpeakerNet::init(Architecture::frame_dnn(), 1).unwrap();
        let w = random_windows(1, 4);
        let h = net.extract_frame_features(&w, Mode::Infer).unwrap();
        assert_eq!(h.len(), 4 * EMBED_DIM);
        assert_eq!(net.params.get("fc0.W").unwrap().shape(), [256, WINDOW_LEN]);
    }

    #[test]
    fn model_file_roundtrip() {
        let mut net = SpeakerNet::init(small_arch(), 9).unwrap();
        net.ensure_bn_stats(random_windows(1, 3).as_slice())
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cnn.bin");
        net.save(&p).unwrap();
        assert_eq!(SpeakerNet::load(&p).unwrap(), net);
    }
}
