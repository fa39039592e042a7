//! The jointly trained verification model: speaker network, attention
//! weights and logistic head, bundled with the frozen phonetic network.

use std::path::Path;

use crate::error::{Error, Result};
use crate::features::{make_context_windows, FrameSequence};
use crate::nn::{read_file, ByteReader, ByteWriter, HasParams, ParamStore, FORMAT_VERSION};
use crate::par;
use crate::phonetic::PhoneticModel;
use crate::pooling::{pool_on_tape, AttentionParams, PoolInputs, PoolingKind, Supervector};
use crate::scoring::LogisticHead;
use crate::speaker_net::SpeakerNet;
use crate::trainer::TrainConfig;

const E2E_MAGIC: &[u8; 4] = b"E2EE";

/// Frame features of one utterance plus its frozen phonetic streams.
#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceData {
    pub features: FrameSequence,
    /// `T x 10` posteriors.
    pub gamma: Vec<f64>,
    /// `T x 64` bottleneck features.
    pub bottleneck: Vec<f64>,
}

impl UtteranceData {
    pub fn new(features: FrameSequence, phonetic: &PhoneticModel) -> Result<Self> {
        let p = phonetic.extract(&features)?;
        Ok(UtteranceData {
            features,
            gamma: p.posteriors,
            bottleneck: p.bottleneck,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.features.num_frames()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EndToEndModel {
    pub config: TrainConfig,
    pub net: SpeakerNet,
    pub attention: AttentionParams,
    pub head: ParamStore,
    pub phonetic: PhoneticModel,
}

impl HasParams for EndToEndModel {
    fn stores(&self) -> Vec<&ParamStore> {
        vec![&self.net.params, &self.attention.params, &self.head]
    }
    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        vec![
            &mut self.net.params,
            &mut self.attention.params,
            &mut self.head,
        ]
    }
}

impl EndToEndModel {
    pub fn init(config: TrainConfig, phonetic: PhoneticModel) -> Result<Self> {
        config.validate()?;
        let net = SpeakerNet::init(config.architecture.clone(), config.seed)?;
        let attention = AttentionParams::zeros(net.embed_dim(), crate::phonetic::BOTTLENECK_DIM);
        let head = LogisticHead {
            w: config.head_w,
            b: config.head_b,
        }
        .to_params();
        let mut model = EndToEndModel {
            config,
            net,
            attention,
            head,
            phonetic,
        };
        model.sync_trainable();
        Ok(model)
    }

    pub fn pooling(&self) -> PoolingKind {
        self.config.pooling
    }

    pub fn logistic_head(&self) -> LogisticHead {
        LogisticHead::from_params(&self.head).expect("head parameters present")
    }

    pub fn utterance_data(&self, features: FrameSequence) -> Result<UtteranceData> {
        UtteranceData::new(features, &self.phonetic)
    }

    /// Infer-mode supervector and, for attention pooling, frame weights.
    pub fn embed_with_weights(
        &self,
        utt: &UtteranceData,
    ) -> Result<(Supervector, Option<Vec<f64>>)> {
        let windows = make_context_windows(&utt.features)?;
        let mut tape = crate::nn::Tape::new();
        let frames = self.net.infer_frame_features(&windows)?;
        let h = tape.constant(vec![utt.num_frames(), self.net.embed_dim()], frames)?;
        let inputs = PoolInputs {
            h,
            gamma: &utt.gamma,
            bottleneck: &utt.bottleneck,
        };
        let (f, alpha) = pool_on_tape(&mut tape, self.pooling(), &inputs, &self.attention)?;
        let sv = Supervector::new(self.pooling(), tape.value(f).to_vec())?;
        Ok((sv, alpha.map(|a| tape.value(a).to_vec())))
    }

    pub fn embed(&self, utt: &UtteranceData) -> Result<Supervector> {
        Ok(self.embed_with_weights(utt)?.0)
    }

    /// Embeds many utterances, in parallel when enabled.
    pub fn embed_all(&self, utts: &[&UtteranceData]) -> Result<Vec<Supervector>> {
        par::map_slice(utts, |u| self.embed(u))
            .into_iter()
            .collect()
    }

    /// Runs one train-mode pass over `utts` when batch-norm running
    /// statistics are not yet initialized.
    pub fn calibrate(&mut self, utts: &[&UtteranceData]) -> Result<()> {
        let mut windows = Vec::new();
        for u in utts {
            windows.extend(make_context_windows(&u.features)?.into_values());
        }
        if windows.is_empty() {
            return Err(Error::InvalidArgument("no calibration frames".into()));
        }
        self.net.ensure_bn_stats(&windows)
    }

    pub fn is_calibrated(&self) -> bool {
        self.net.bn.iter().all(|s| s.is_initialized())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = ByteWriter::new();
        let config = serde_json::to_string(&self.config).expect("config serializes");
        w.magic(E2E_MAGIC).u32(FORMAT_VERSION).str(&config);
        self.net.write_into(&mut w)?;
        w.named_tensors(&self.attention.params)
            .named_tensors(&self.head);
        self.phonetic.write_into(&mut w);
        w.write_to(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let mut r = ByteReader::new(&bytes, path);
        r.expect_magic(E2E_MAGIC)?;
        r.expect_version()?;
        let json = r.str()?;
        let config: TrainConfig =
            serde_json::from_str(&json).map_err(|e| r.err(format!("bad config: {e}")))?;
        let net = SpeakerNet::read_from(&mut r)?;
        let attention = AttentionParams {
            params: r.named_tensors()?,
        };
        let head = r.named_tensors()?;
        let phonetic = PhoneticModel::read_from(&mut r)?;
        r.expect_end()?;
        for (name, dim) in [
            (crate::pooling::ATT_WH, net.embed_dim()),
            (crate::pooling::ATT_WB, crate::phonetic::BOTTLENECK_DIM),
        ] {
            let t = attention
                .params
                .get(name)
                .map_err(|e| r.err(e.to_string()))?;
            if t.shape() != [1, dim] {
                return Err(r.err(format!("{name} has shape {:?}", t.shape())));
            }
        }
        LogisticHead::from_params(&head).map_err(|e| r.err(e.to_string()))?;
        let mut model = EndToEndModel {
            config,
            net,
            attention,
            head,
            phonetic,
        };
        model.sync_trainable();
        Ok(model)
    }

    /// Applies the configured frozen/trainable flags.
    fn sync_trainable(&mut self) {
        let att = self.config.pooling == PoolingKind::Attention && !self.config.freeze_attention;
        for name in [crate::pooling::ATT_WH, crate::pooling::ATT_WB] {
            self.attention
                .params
                .set_trainable(name, att)
                .expect("attention params present");
        }
    }
}
