use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{AudioSignal, FeatureError, FeatureMatrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FbankConfig {
    pub sample_rate: u32,
    /// Window length in samples (25 ms at 16 kHz).
    pub window: usize,
    /// Hop in samples (10 ms at 16 kHz).
    pub hop: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub low_hz: f64,
    /// Upper edge of the mel bank; `None` means Nyquist.
    pub high_hz: Option<f64>,
    /// Natural-log floor applied to mel energies.
    pub log_floor: f64,
    /// Append the three pitch slots (voicing, log f0, delta log f0).
    pub pitch: bool,
    pub pitch_min_hz: f64,
    pub pitch_max_hz: f64,
}

impl Default for FbankConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            window: 400,
            hop: 160,
            n_fft: 512,
            n_mels: 80,
            low_hz: 20.0,
            high_hz: None,
            log_floor: 1e-10f64.ln(),
            pitch: true,
            pitch_min_hz: 60.0,
            pitch_max_hz: 400.0,
        }
    }
}

impl FbankConfig {
    pub fn dim(&self) -> usize {
        self.n_mels + if self.pitch { 3 } else { 0 }
    }

    fn high(&self) -> f64 {
        self.high_hz.unwrap_or(self.sample_rate as f64 / 2.0)
    }

    pub fn num_frames(&self, samples: usize) -> usize {
        if samples < self.window {
            0
        } else {
            (samples - self.window) / self.hop + 1
        }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Center frequency in Hz of each triangular mel filter.
pub fn mel_center_frequencies(cfg: &FbankConfig) -> Vec<f64> {
    mel_edges(cfg).windows(3).map(|w| mel_to_hz(w[1])).collect()
}

fn mel_edges(cfg: &FbankConfig) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(cfg.low_hz), hz_to_mel(cfg.high()));
    let step = (hi - lo) / (cfg.n_mels + 1) as f64;
    (0..cfg.n_mels + 2).map(|i| lo + step * i as f64).collect()
}

/// Sparse triangular weights: for each filter, the first FFT bin and the
/// weights from there on.
fn mel_bank(cfg: &FbankConfig) -> Vec<(usize, Vec<f64>)> {
    let edges = mel_edges(cfg);
    let bins = cfg.n_fft / 2 + 1;
    let bin_mel: Vec<f64> =
        (0..bins).map(|k| hz_to_mel(k as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64)).collect();
    edges
        .windows(3)
        .map(|w| {
            let (left, center, right) = (w[0], w[1], w[2]);
            let weights: Vec<(usize, f64)> = bin_mel
                .iter()
                .enumerate()
                .filter(|(_, &m)| m > left && m < right)
                .map(|(k, &m)| {
                    let v = if m <= center { (m - left) / (center - left) } else { (right - m) / (right - center) };
                    (k, v)
                })
                .collect();
            let start = weights.first().map(|(k, _)| *k).unwrap_or(0);
            (start, weights.into_iter().map(|(_, v)| v).collect())
        })
        .collect()
}

fn hamming(n: usize) -> Vec<f64> {
    let denom = (n.max(2) - 1) as f64;
    (0..n).map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / denom).cos()).collect()
}

/// Log-mel energies (plus pitch slots when enabled) at a fixed hop.
pub fn compute_filterbank(audio: &AudioSignal, cfg: &FbankConfig) -> Result<FeatureMatrix, FeatureError> {
    let n = audio.samples.len();
    if n < cfg.window {
        return Err(FeatureError::TooShort { samples: n, window: cfg.window });
    }
    if cfg.n_fft < cfg.window {
        return Err(FeatureError::InvalidAudio(format!("n_fft {} shorter than window {}", cfg.n_fft, cfg.window)));
    }
    let frames = cfg.num_frames(n);
    let dim = cfg.dim();
    let window = hamming(cfg.window);
    let bank = mel_bank(cfg);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.n_fft];
    let mut power = vec![0f64; cfg.n_fft / 2 + 1];
    let mut out = vec![0f32; frames * dim];
    let mut pitch = Vec::with_capacity(if cfg.pitch { frames } else { 0 });

    for t in 0..frames {
        let frame = &audio.samples[t * cfg.hop..t * cfg.hop + cfg.window];
        let mean = frame.iter().map(|&s| s as f64).sum::<f64>() / cfg.window as f64;
        for (i, c) in buf.iter_mut().enumerate() {
            *c = if i < cfg.window {
                Complex::new((frame[i] as f64 - mean) * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        let row = &mut out[t * dim..(t + 1) * dim];
        for (m, (start, weights)) in bank.iter().enumerate() {
            let e: f64 = weights.iter().zip(&power[*start..]).map(|(w, p)| w * p).sum();
            row[m] = if e > 0.0 { e.ln().max(cfg.log_floor) as f32 } else { cfg.log_floor as f32 };
        }
        if cfg.pitch {
            pitch.push(estimate_pitch(frame, mean, cfg));
        }
    }

    if cfg.pitch {
        let log_f0: Vec<f64> = pitch.iter().map(|&(_, f0)| if f0 > 0.0 { f0.ln() } else { 0.0 }).collect();
        for t in 0..frames {
            let prev = log_f0[t.saturating_sub(1)];
            let next = log_f0[(t + 1).min(frames - 1)];
            let row = &mut out[t * dim + cfg.n_mels..(t + 1) * dim];
            row[0] = pitch[t].0 as f32;
            row[1] = log_f0[t] as f32;
            row[2] = ((next - prev) / 2.0) as f32;
        }
    }
    FeatureMatrix::new(frames, dim, out)
}

/// Normalized autocorrelation pitch estimate: `(voicing, f0_hz)`, both 0 for
/// silent frames.
fn estimate_pitch(frame: &[f32], mean: f64, cfg: &FbankConfig) -> (f64, f64) {
    let x: Vec<f64> = frame.iter().map(|&s| s as f64 - mean).collect();
    let energy: f64 = x.iter().map(|v| v * v).sum();
    if energy < 1e-12 {
        return (0.0, 0.0);
    }
    let sr = cfg.sample_rate as f64;
    let min_lag = (sr / cfg.pitch_max_hz).floor().max(1.0) as usize;
    let max_lag = ((sr / cfg.pitch_min_hz).ceil() as usize).min(x.len() - 1);
    let mut best = (f64::NEG_INFINITY, 0usize);
    for lag in min_lag..=max_lag {
        let (a, b) = (&x[..x.len() - lag], &x[lag..]);
        let num: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
        let ea: f64 = a.iter().map(|v| v * v).sum();
        let eb: f64 = b.iter().map(|v| v * v).sum();
        let denom = (ea * eb).sqrt();
        let r = if denom > 0.0 { num / denom } else { 0.0 };
        if r > best.0 {
            best = (r, lag);
        }
    }
    if best.1 == 0 {
        return (0.0, 0.0);
    }
    (best.0, sr / best.1 as f64)
}
