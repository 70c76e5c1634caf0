//! Acoustic front end: audio containers, log-mel filterbank with pitch
//! slots, feature-file I/O, input projection and speed perturbation.

mod audio;
mod filterbank;
mod projection;
mod sluf;

pub use audio::{DEFAULT_SAMPLE_RATE, load_audio, read_rawf, read_wav, speed_perturb, write_rawf, write_wav, AudioSignal};
pub use filterbank::{compute_filterbank, hz_to_mel, mel_center_frequencies, mel_to_hz, FbankConfig};
pub use projection::{project_features, Projection};
pub use sluf::{decode_sluf, encode_sluf, load_features, save_features, MAGIC};

use thiserror::Error;

/// Frame rate of every feature stream, in milliseconds.
pub const FRAME_SHIFT_MS: f32 = 10.0;
/// Internal filterbank dimension: 80 log-mel energies plus 3 pitch slots.
pub const FBANK_DIM: usize = 83;
/// Dimension of externally extracted self-supervised features.
pub const EXTERNAL_DIM: usize = 512;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("audio has {samples} samples, shorter than one {window}-sample window")]
    TooShort { samples: usize, window: usize },
    #[error("invalid audio: {0}")]
    InvalidAudio(String),
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error("feature matrix has zero rows")]
    Empty,
    #[error("dimension mismatch: expected {expected} columns, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("speed factor must be positive, got {0}")]
    BadFactor(f32),
    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// `rows × cols` frame matrix at a fixed frame shift.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
    pub frame_shift_ms: f32,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, FeatureError> {
        if rows == 0 || cols == 0 {
            return Err(FeatureError::Empty);
        }
        if data.len() != rows * cols {
            return Err(FeatureError::Format {
                offset: 0,
                message: format!("{} values for a {rows}x{cols} matrix", data.len()),
            });
        }
        Ok(Self { rows, cols, data, frame_shift_ms: FRAME_SHIFT_MS })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dim(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}
