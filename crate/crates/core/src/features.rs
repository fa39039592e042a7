//! Cepstral front end: MFCCs, deltas, rolling mean normalization and the
//! three-channel asymmetric context windows fed to the speaker CNN.

use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::nn::{read_file, ByteReader, ByteWriter, FORMAT_VERSION};

pub const SAMPLE_RATE: u32 = 16_000;
pub const WINDOW_SAMPLES: usize = 400;
pub const HOP_SAMPLES: usize = 160;
pub const FFT_SIZE: usize = 512;
pub const NUM_FILTERS: usize = 13;
pub const NUM_CEPSTRA: usize = 13;
pub const PRE_EMPHASIS: f64 = 0.97;
pub const LOG_FLOOR: f64 = 1e-10;

/// 12 static + 13 delta + 13 delta-delta.
pub const FEATURE_DIM: usize = 38;
pub const CMN_WINDOW: usize = 41;

pub const CONTEXT_PAST: usize = 25;
pub const CONTEXT_FUTURE: usize = 5;
pub const CONTEXT_FRAMES: usize = CONTEXT_PAST + 1 + CONTEXT_FUTURE;
pub const CHANNEL_DIM: usize = 12;
pub const CHANNELS: usize = 3;
/// Flat size of one `3 x 31 x 12` context window.
pub const WINDOW_LEN: usize = CHANNELS * CONTEXT_FRAMES * CHANNEL_DIM;

/// Column offsets of the three CNN channels inside a 38-dim frame. The delta
/// channels skip their energy (C0) coefficient.
const CHANNEL_OFFSETS: [usize; 3] = [0, 13, 26];

const FEATURE_MAGIC: &[u8; 4] = b"E2EF";

/// Per-utterance `T x d` feature matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    pub utt_id: String,
    frames: Vec<f64>,
    num_frames: usize,
    dim: usize,
    pub frame_period_ms: f64,
}

impl FrameSequence {
    pub fn new(utt_id: impl Into<String>, frames: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || frames.is_empty() || frames.len() % dim != 0 {
            return Err(Error::InvalidArgument(format!(
                "frame buffer of length {} is not a nonempty multiple of {dim}",
                frames.len()
            )));
        }
        if let Some(v) = frames.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature value {v}")));
        }
        Ok(FrameSequence {
            utt_id: utt_id.into(),
            num_frames: frames.len() / dim,
            frames,
            dim,
            frame_period_ms: 10.0,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.frames[t * self.dim..(t + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.frames
    }

    fn with_frames(&self, frames: Vec<f64>, dim: usize) -> Self {
        FrameSequence {
            utt_id: self.utt_id.clone(),
            num_frames: frames.len() / dim,
            frames,
            dim,
            frame_period_ms: self.frame_period_ms,
        }
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filter weights, `NUM_FILTERS x (FFT_SIZE/2 + 1)`, spanning
/// 0 Hz to Nyquist.
pub fn mel_filterbank() -> Vec<Vec<f64>> {
    let nyquist = SAMPLE_RATE as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..NUM_FILTERS + 2)
        .map(|i| mel_to_hz(top * i as f64 / (NUM_FILTERS + 1) as f64))
        .collect();
    let bins = FFT_SIZE / 2 + 1;
    (0..NUM_FILTERS)
        .map(|m| {
            let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * SAMPLE_RATE as f64 / FFT_SIZE as f64;
                    if f >= lo && f <= c {
                        (f - lo) / (c - lo)
                    } else if f > c && f <= hi {
                        (hi - f) / (hi - c)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

/// Number of 25 ms / 10 ms frames in `len` samples.
pub fn frame_count(len: usize) -> usize {
    if len < WINDOW_SAMPLES {
        0
    } else {
        (len - WINDOW_SAMPLES) / HOP_SAMPLES + 1
    }
}

/// Mel filterbank energies per frame (before the log), `T x NUM_FILTERS`.
pub fn filterbank_energies(waveform: &[f64], sample_rate: u32) -> Result<Vec<Vec<f64>>> {
    if sample_rate != SAMPLE_RATE {
        return Err(Error::InvalidArgument(format!(
            "sample rate {sample_rate} Hz unsupported; expected {SAMPLE_RATE}"
        )));
    }
    let t = frame_count(waveform.len());
    if t == 0 {
        return Err(Error::UtteranceTooShort);
    }
    let mut emph = Vec::with_capacity(waveform.len());
    emph.push(waveform[0]);
    for i in 1..waveform.len() {
        emph.push(waveform[i] - PRE_EMPHASIS * waveform[i - 1]);
    }
    let hamming: Vec<f64> = (0..WINDOW_SAMPLES)
        .map(|n| {
            0.54 - 0.46
                * (2.0 * std::f64::consts::PI * n as f64 / (WINDOW_SAMPLES - 1) as f64).cos()
        })
        .collect();
    let fb = mel_filterbank();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(FFT_SIZE);
    let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
    let mut out = Vec::with_capacity(t);
    for f in 0..t {
        let start = f * HOP_SAMPLES;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = if i < WINDOW_SAMPLES {
                Complex::new(emph[start + i] * hamming[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..FFT_SIZE / 2 + 1]
            .iter()
            .map(|c| c.norm_sqr())
            .collect();
        out.push(
            fb.iter()
                .map(|w| w.iter().zip(&power).map(|(a, p)| a * p).sum())
                .collect(),
        );
    }
    Ok(out)
}

/// Orthonormal DCT-II of one log-energy vector to `NUM_CEPSTRA` coefficients.
pub fn dct_ii(log_energies: &[f64]) -> Vec<f64> {
    let m = log_energies.len() as f64;
    (0..NUM_CEPSTRA)
        .map(|k| {
            let norm = if k == 0 {
                (1.0 / m).sqrt()
            } else {
                (2.0 / m).sqrt()
            };
            norm * log_energies
                .iter()
                .enumerate()
                .map(|(i, e)| e * (std::f64::consts::PI * k as f64 * (i as f64 + 0.5) / m).cos())
                .sum::<f64>()
        })
        .collect()
}

/// C0..C12 per 25 ms frame of 16 kHz audio.
pub fn compute_mfcc(utt_id: &str, waveform: &[f64], sample_rate: u32) -> Result<FrameSequence> {
    let energies = filterbank_energies(waveform, sample_rate)?;
    let mut frames = Vec::with_capacity(energies.len() * NUM_CEPSTRA);
    for e in energies {
        let logs: Vec<f64> = e.iter().map(|v| v.max(LOG_FLOOR).ln()).collect();
        frames.extend(dct_ii(&logs));
    }
    FrameSequence::new(utt_id, frames, NUM_CEPSTRA)
}

/// Two-frame regression deltas with edge replication, column by column.
fn deltas(x: &[f64], t: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; t * d];
    let clamp = |i: isize| i.clamp(0, t as isize - 1) as usize;
    for ti in 0..t {
        for c in 0..d {
            let mut acc = 0.0;
            for n in 1..=2isize {
                let fwd = x[clamp(ti as isize + n) * d + c];
                let back = x[clamp(ti as isize - n) * d + c];
                acc += n as f64 * (fwd - back);
            }
            out[ti * d + c] = acc / 10.0;
        }
    }
    out
}

/// `[C0..C12]` -> `[C1..C12 | d(C0..C12) | dd(C0..C12)]`.
pub fn append_deltas(x: &FrameSequence) -> Result<FrameSequence> {
    if x.dim() != NUM_CEPSTRA {
        return Err(Error::shape(
            "append_deltas",
            &[x.num_frames(), x.dim()],
            &[x.num_frames(), NUM_CEPSTRA],
        ));
    }
    let (t, d) = (x.num_frames(), x.dim());
    let d1 = deltas(x.as_slice(), t, d);
    let d2 = deltas(&d1, t, d);
    let mut out = Vec::with_capacity(t * FEATURE_DIM);
    for ti in 0..t {
        out.extend_from_slice(&x.frame(ti)[1..]);
        out.extend_from_slice(&d1[ti * d..(ti + 1) * d]);
        out.extend_from_slice(&d2[ti * d..(ti + 1) * d]);
    }
    Ok(x.with_frames(out, FEATURE_DIM))
}

/// Subtracts the mean of a centered 41-frame window (clipped at the edges).
/// Utterances shorter than the window subtract their global mean.
pub fn rolling_cmn(x: &FrameSequence) -> FrameSequence {
    let (t, d) = (x.num_frames(), x.dim());
    let half = CMN_WINDOW / 2;
    let mut out = vec![0.0; t * d];
    for ti in 0..t {
        let (lo, hi) = if t < CMN_WINDOW {
            (0, t)
        } else {
            (ti.saturating_sub(half), (ti + half + 1).min(t))
        };
        let n = (hi - lo) as f64;
        for c in 0..d {
            let mean = (lo..hi).map(|j| x.frame(j)[c]).sum::<f64>() / n;
            out[ti * d + c] = x.frame(ti)[c] - mean;
        }
    }
    x.with_frames(out, d)
}

/// One zero-padded `3 x 31 x 12` window per frame, flat and frame-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextWindowBatch {
    num_frames: usize,
    values: Vec<f64>,
}

impl ContextWindowBatch {
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.len() % WINDOW_LEN != 0 {
            return Err(Error::shape(
                "context windows",
                &[values.len()],
                &[WINDOW_LEN],
            ));
        }
        Ok(ContextWindowBatch {
            num_frames: values.len() / WINDOW_LEN,
            values,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn window(&self, t: usize) -> &[f64] {
        &self.values[t * WINDOW_LEN..(t + 1) * WINDOW_LEN]
    }

    /// Entry at (frame, channel, row, coefficient); row 25 is the frame itself.
    pub fn at(&self, t: usize, channel: usize, row: usize, coef: usize) -> f64 {
        self.values[t * WINDOW_LEN + (channel * CONTEXT_FRAMES + row) * CHANNEL_DIM + coef]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Concatenates several batches in order.
    pub fn concat(parts: &[&ContextWindowBatch]) -> Result<Self> {
        let mut values = Vec::with_capacity(parts.iter().map(|p| p.values.len()).sum());
        for p in parts {
            values.extend_from_slice(&p.values);
        }
        Self::from_values(values)
    }
}

/// Asymmetric windows over frames `t-25 ..= t+5`; frames outside the
/// utterance are zero.
pub fn make_context_windows(x: &FrameSequence) -> Result<ContextWindowBatch> {
    if x.dim() != FEATURE_DIM {
        return Err(Error::shape(
            "make_context_windows",
            &[x.num_frames(), x.dim()],
            &[x.num_frames(), FEATURE_DIM],
        ));
    }
    let t = x.num_frames();
    let mut values = vec![0.0; t * WINDOW_LEN];
    for ti in 0..t {
        let win = &mut values[ti * WINDOW_LEN..(ti + 1) * WINDOW_LEN];
        for row in 0..CONTEXT_FRAMES {
            let src = ti as isize - CONTEXT_PAST as isize + row as isize;
            if src < 0 || src >= t as isize {
                continue;
            }
            let frame = x.frame(src as usize);
            for (ch, &off) in CHANNEL_OFFSETS.iter().enumerate() {
                let dst = (ch * CONTEXT_FRAMES + row) * CHANNEL_DIM;
                win[dst..dst + CHANNEL_DIM].copy_from_slice(&frame[off..off + CHANNEL_DIM]);
            }
        }
    }
    ContextWindowBatch::from_values(values)
}

pub fn write_feature_file(path: &Path, x: &FrameSequence) -> Result<()> {
    let mut w = ByteWriter::new();
    w.magic(FEATURE_MAGIC)
        .u32(FORMAT_VERSION)
        .u32(x.num_frames() as u32)
        .u32(x.dim() as u32)
        .f64s(x.as_slice())
        .str(&x.utt_id);
    w.write_to(path)
}

pub fn read_feature_file(path: &Path) -> Result<FrameSequence> {
    let bytes = read_file(path)?;
    let mut r = ByteReader::new(&bytes, path);
    r.expect_magic(FEATURE_MAGIC)?;
    r.expect_version()?;
    let t = r.u32()? as usize;
    let d = r.u32()? as usize;
    let frames = r.f64s(t * d)?;
    let id = r.str()?;
    r.expect_end()?;
    FrameSequence::new(id, frames, d).map_err(|e| r.err(e.to_string()))
}

/// Reads a 16-bit PCM mono WAV file into samples scaled to [-1, 1).
pub fn read_wav_pcm16(path: &Path) -> Result<(Vec<f64>, u32)> {
    let bytes = read_file(path)?;
    let bad = |why: &str| Error::format(path, why.to_string());
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(bad("not a RIFF/WAVE file"));
    }
    let le16 = |b: &[u8]| u16::from_le_bytes([b[0], b[1]]);
    let le32 = |b: &[u8]| u32::from_le_bytes([b[0], b[1], b[2], b[3]]);
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = le32(&bytes[pos + 4..]) as usize;
        let body = pos + 8;
        if body + size > bytes.len() {
            return Err(bad("truncated chunk"));
        }
        if id == b"fmt " && size >= 16 {
            let b = &bytes[body..];
            fmt = Some((le16(b), le16(&b[2..]), le32(&b[4..]), le16(&b[14..])));
        } else if id == b"data" {
            let (format, channels, rate, bits) =
                fmt.ok_or_else(|| bad("data chunk before fmt chunk"))?;
            if format != 1 || channels != 1 || bits != 16 {
                return Err(bad("only 16-bit PCM mono is supported"));
            }
            let samples = bytes[body..body + size]
                .chunks_exact(2)
                .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
                .collect();
            return Ok((samples, rate));
        }
        pos = body + size + (size & 1);
    }
    Err(bad("no data chunk"))
}

/// Writes 16-bit PCM mono samples (clipped to [-1, 1]).
pub fn write_wav_pcm16(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let data_len = (samples.len() * 2) as u32;
    let mut w = ByteWriter::new();
    w.bytes(b"RIFF").u32(36 + data_len).bytes(b"WAVE");
    w.bytes(b"fmt ").u32(16);
    w.bytes(&1u16.to_le_bytes()).bytes(&1u16.to_le_bytes());
    w.u32(sample_rate).u32(sample_rate * 2);
    w.bytes(&2u16.to_le_bytes()).bytes(&16u16.to_le_bytes());
    w.bytes(b"data").u32(data_len);
    for s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.bytes(&v.to_le_bytes());
    }
    w.write_to(path)
}
