//! Utterance-level pooling of frame features: mean (d-vector), posterior
//! weighted Kronecker pooling, and learned-weight attention pooling.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tape, Tensor, Var};
use crate::phonetic::{BOTTLENECK_DIM, NUM_CLASSES};
use crate::speaker_net::EMBED_DIM;

pub const SUPERVECTOR_DIM: usize = NUM_CLASSES * EMBED_DIM;
pub const ATT_WH: &str = "att.Wh";
pub const ATT_WB: &str = "att.Wb";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingKind {
    Mean,
    Posterior,
    Attention,
}

impl PoolingKind {
    pub const ALL: [PoolingKind; 3] = [
        PoolingKind::Mean,
        PoolingKind::Posterior,
        PoolingKind::Attention,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PoolingKind::Mean => "mean",
            PoolingKind::Posterior => "posterior",
            PoolingKind::Attention => "attention",
        }
    }

    pub fn output_dim(self, embed_dim: usize) -> usize {
        match self {
            PoolingKind::Mean => embed_dim,
            PoolingKind::Posterior | PoolingKind::Attention => NUM_CLASSES * embed_dim,
        }
    }

    pub(crate) fn code(self) -> u32 {
        self as u32
    }

    pub(crate) fn from_code(c: u32) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }
}

impl fmt::Display for PoolingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PoolingKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown pooling kind {s:?}")))
    }
}

/// Utterance representation tagged with the pooling that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Supervector {
    pub kind: PoolingKind,
    pub values: Vec<f64>,
}

impl Supervector {
    pub fn new(kind: PoolingKind, values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("empty supervector".into()));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("supervector entry {v}")));
        }
        Ok(Supervector { kind, values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Two `1 x 64` row vectors scoring each frame from its speaker feature and
/// its phonetic bottleneck feature. Zero-initialized (uniform attention).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub params: ParamStore,
}

impl Default for AttentionParams {
    fn default() -> Self {
        Self::zeros(EMBED_DIM, BOTTLENECK_DIM)
    }
}

impl AttentionParams {
    pub fn zeros(embed_dim: usize, bottleneck_dim: usize) -> Self {
        let mut params = ParamStore::new();
        params
            .insert(
                ATT_WH,
                Tensor::zeros(vec![1, embed_dim]).expect("nonzero dim"),
                true,
            )
            .expect("fresh store");
        params
            .insert(
                ATT_WB,
                Tensor::zeros(vec![1, bottleneck_dim]).expect("nonzero dim"),
                true,
            )
            .expect("fresh store");
        AttentionParams { params }
    }

    pub fn from_rows(wh: Vec<f64>, wb: Vec<f64>) -> Result<Self> {
        let mut a = Self::zeros(wh.len().max(1), wb.len().max(1));
        if wh.is_empty() || wb.is_empty() {
            return Err(Error::InvalidArgument(
                "attention rows must be nonempty".into(),
            ));
        }
        a.params.get_mut(ATT_WH)?.values_mut().copy_from_slice(&wh);
        a.params.get_mut(ATT_WB)?.values_mut().copy_from_slice(&wb);
        Ok(a)
    }

    pub fn wh(&self) -> &[f64] {
        self.params.get(ATT_WH).expect("att.Wh present").values()
    }

    pub fn wb(&self) -> &[f64] {
        self.params.get(ATT_WB).expect("att.Wb present").values()
    }
}

fn rows(len: usize, dim: usize, what: &str) -> Result<usize> {
    if dim == 0 || len == 0 || len % dim != 0 {
        return Err(Error::InvalidArgument(format!(
            "{what}: {len} values do not form rows of {dim}"
        )));
    }
    Ok(len / dim)
}

/// Frame inputs for pooling one utterance: `h` is `T x d` (a tape node),
/// `gamma` is `T x 10`, `bottleneck` is `T x 64`.
pub struct PoolInputs<'a> {
    pub h: Var,
    pub gamma: &'a [f64],
    pub bottleneck: &'a [f64],
}

/// Records pooling of `inputs` on `tape`; returns the rank-1 supervector
/// node and, for attention pooling, the frame weight node `[T]`.
pub fn pool_on_tape(
    tape: &mut Tape,
    kind: PoolingKind,
    inputs: &PoolInputs<'_>,
    att: &AttentionParams,
) -> Result<(Var, Option<Var>)> {
    let hs = tape.shape(inputs.h).to_vec();
    if hs.len() != 2 {
        return Err(Error::shape("pool", &hs, &[0, EMBED_DIM]));
    }
    let t = hs[0];
    if kind != PoolingKind::Mean && rows(inputs.gamma.len(), NUM_CLASSES, "posteriors")? != t {
        return Err(Error::shape(
            "pool posteriors",
            &hs,
            &[inputs.gamma.len() / NUM_CLASSES, NUM_CLASSES],
        ));
    }
    match kind {
        PoolingKind::Mean => Ok((tape.mean_rows(inputs.h)?, None)),
        PoolingKind::Posterior => {
            let ones = tape.constant(vec![t], vec![1.0; t])?;
            Ok((
                tape.kron_pool(inputs.h, ones, inputs.gamma, NUM_CLASSES)?,
                None,
            ))
        }
        PoolingKind::Attention => {
            let bdim = att.wb().len();
            if rows(inputs.bottleneck.len(), bdim, "bottleneck")? != t {
                return Err(Error::shape(
                    "pool bottleneck",
                    &hs,
                    &[inputs.bottleneck.len() / bdim, bdim],
                ));
            }
            let wh = tape.param(&att.params, ATT_WH)?;
            let wb = tape.param(&att.params, ATT_WB)?;
            let b = tape.constant(vec![t, bdim], inputs.bottleneck.to_vec())?;
            let eh = tape.linear(inputs.h, wh, None)?;
            let eb = tape.linear(b, wb, None)?;
            let e = tape.add(eh, eb)?;
            let e = tape.tanh(e);
            let e = tape.reshape(e, vec![1, t])?;
            let alpha = tape.softmax(e);
            let alpha = tape.reshape(alpha, vec![t])?;
            let f = tape.kron_pool(inputs.h, alpha, inputs.gamma, NUM_CLASSES)?;
            Ok((f, Some(alpha)))
        }
    }
}

fn pool_plain(
    kind: PoolingKind,
    h: &[f64],
    dim: usize,
    gamma: &[f64],
    bottleneck: &[f64],
    att: &AttentionParams,
) -> Result<(Supervector, Option<Vec<f64>>)> {
    let t = rows(h.len(), dim, "frame features")?;
    let mut tape = Tape::new();
    let hv = tape.constant(vec![t, dim], h.to_vec())?;
    let (f, alpha) = pool_on_tape(
        &mut tape,
        kind,
        &PoolInputs {
            h: hv,
            gamma,
            bottleneck,
        },
        att,
    )?;
    let alpha = alpha.map(|a| tape.value(a).to_vec());
    Ok((Supervector::new(kind, tape.value(f).to_vec())?, alpha))
}

/// Column means of the `T x dim` matrix `h`.
pub fn mean_pool(h: &[f64], dim: usize) -> Result<Supervector> {
    Ok(pool_plain(
        PoolingKind::Mean,
        h,
        dim,
        &[],
        &[],
        &AttentionParams::default(),
    )?
    .0)
}

/// `sum_t h_t (x) gamma_t`: block `p` is `sum_t gamma_t[p] * h_t`.
pub fn posterior_pool(h: &[f64], dim: usize, gamma: &[f64]) -> Result<Supervector> {
    Ok(pool_plain(
        PoolingKind::Posterior,
        h,
        dim,
        gamma,
        &[],
        &AttentionParams::default(),
    )?
    .0)
}

/// Attention pooling; returns the supervector and the frame weights alpha.
pub fn attention_pool(
    h: &[f64],
    dim: usize,
    gamma: &[f64],
    bottleneck: &[f64],
    att: &AttentionParams,
) -> Result<(Supervector, Vec<f64>)> {
    let (f, alpha) = pool_plain(PoolingKind::Attention, h, dim, gamma, bottleneck, att)?;
    Ok((f, alpha.expect("attention returns weights")))
}
