use std::path::Path;

use super::{sluf, FeatureError};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

#[derive(Clone, Debug, PartialEq)]
pub struct AudioSignal {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioSignal {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self, FeatureError> {
        if sample_rate == 0 {
            return Err(FeatureError::InvalidAudio("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(FeatureError::InvalidAudio("non-finite sample".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Resamples by linear interpolation so that the output plays `factor`
/// times faster: the length becomes `ceil(n / factor)`.
pub fn speed_perturb(audio: &AudioSignal, factor: f32) -> Result<AudioSignal, FeatureError> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(FeatureError::BadFactor(factor));
    }
    if factor == 1.0 {
        return Ok(audio.clone());
    }
    let src = &audio.samples;
    if src.is_empty() {
        return Ok(audio.clone());
    }
    let n_out = (src.len() as f64 / factor as f64).ceil() as usize;
    let last = src.len() - 1;
    let samples = (0..n_out)
        .map(|i| {
            let pos = i as f64 * factor as f64;
            let i0 = (pos.floor() as usize).min(last);
            let i1 = (i0 + 1).min(last);
            let frac = pos - i0 as f64;
            (src[i0] as f64 * (1.0 - frac) + src[i1] as f64 * frac) as f32
        })
        .collect();
    Ok(AudioSignal { samples, sample_rate: audio.sample_rate })
}

pub fn read_wav(path: &Path) -> Result<AudioSignal, FeatureError> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(FeatureError::InvalidAudio(format!(
            "{}: expected 16-bit PCM mono, got {} channels at {} bits",
            path.display(),
            spec.channels,
            spec.bits_per_sample
        )));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<Result<Vec<_>, _>>()?;
    AudioSignal::new(samples, spec.sample_rate)
}

pub fn write_wav(path: &Path, audio: &AudioSignal) -> Result<(), FeatureError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in &audio.samples {
        writer.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
    }
    writer.finalize()?;
    Ok(())
}

/// Raw float audio: the feature-file layout with magic `RAWF` and one column.
/// The sample rate is fixed at 16 kHz.
pub fn read_rawf(path: &Path) -> Result<AudioSignal, FeatureError> {
    let bytes = std::fs::read(path).map_err(|source| FeatureError::Io { path: path.display().to_string(), source })?;
    let m = sluf::decode_with_magic(&bytes, b"RAWF")?;
    if m.cols() != 1 {
        return Err(FeatureError::DimMismatch { expected: 1, got: m.cols() });
    }
    AudioSignal::new(m.into_data(), DEFAULT_SAMPLE_RATE)
}

pub fn write_rawf(path: &Path, audio: &AudioSignal) -> Result<(), FeatureError> {
    let bytes = sluf::encode_with_magic(b"RAWF", audio.samples.len(), 1, &audio.samples);
    std::fs::write(path, bytes).map_err(|source| FeatureError::Io { path: path.display().to_string(), source })
}

/// Loads `.wav` (PCM16 mono) or `.rawf` audio by extension.
pub fn load_audio(path: &Path) -> Result<AudioSignal, FeatureError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("rawf") => read_rawf(path),
        _ => read_wav(path),
    }
}
