//! Mono PCM16 WAV input/output.
//!
//! Everything inside the pipeline runs at [`SAMPLE_RATE`]; files at any other
//! rate are rejected rather than resampled. Integer samples map to floats by
//! dividing by 32768, so `-32768` becomes exactly `-1.0`.

use std::fs;
use std::path::Path;

use thiserror::Error;

/// The only sample rate the pipeline accepts.
pub const SAMPLE_RATE: u32 = 16_000;

const PCM_SCALE: f32 = 32768.0;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("not a RIFF/WAVE file")]
    NotWav,
    #[error("unsupported WAV format: {0}")]
    UnsupportedFormat(String),
    #[error("wrong sample rate: found {found} Hz, expected {SAMPLE_RATE} Hz")]
    WrongSampleRate { found: u32 },
    #[error("malformed WAV: {0}")]
    Malformed(String),
    #[error("sample {index} out of range: {value}")]
    SampleOutOfRange { index: usize, value: f32 },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A mono waveform with amplitudes in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioBuffer {
    /// Builds a buffer, rejecting non-finite or out-of-range samples.
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self, AudioError> {
        if let Some((index, &value)) = samples
            .iter()
            .enumerate()
            .find(|(_, s)| !s.is_finite() || s.abs() > 1.0)
        {
            return Err(AudioError::SampleOutOfRange { index, value });
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    /// A 16 kHz buffer; the common case.
    pub fn from_samples(samples: Vec<f32>) -> Result<Self, AudioError> {
        Self::new(samples, SAMPLE_RATE)
    }

    pub fn silence(len: usize) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate: SAMPLE_RATE,
        }
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Converts a float sample to PCM16 with symmetric scaling and clipping.
pub fn float_to_pcm16(s: f32) -> i16 {
    (s * PCM_SCALE).round().clamp(-32768.0, 32767.0) as i16
}

pub fn pcm16_to_float(s: i16) -> f32 {
    s as f32 / PCM_SCALE
}

fn read_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Parses an in-memory RIFF/WAVE file. Chunks other than `fmt ` and `data`
/// are skipped.
pub fn decode_wav(bytes: &[u8]) -> Result<AudioBuffer, AudioError> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(AudioError::NotWav);
    }
    let mut pos = 12;
    let mut format: Option<(u32, u16, u16, u16)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let declared = read_u32(bytes, pos + 4) as usize;
        let body_start = pos + 8;
        let body_end = body_start.saturating_add(declared).min(bytes.len());
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(AudioError::Malformed("fmt chunk shorter than 16 bytes".into()));
                }
                let tag = read_u16(body, 0);
                let channels = read_u16(body, 2);
                let rate = read_u32(body, 4);
                let bits = read_u16(body, 14);
                format = Some((rate, tag, channels, bits));
            }
            b"data" => {
                let (rate, tag, channels, bits) = format
                    .ok_or_else(|| AudioError::Malformed("data chunk before fmt chunk".into()))?;
                if tag != 1 {
                    return Err(AudioError::UnsupportedFormat(format!(
                        "format tag {tag} (only PCM = 1)"
                    )));
                }
                if channels != 1 {
                    return Err(AudioError::UnsupportedFormat(format!(
                        "{channels} channels (only mono)"
                    )));
                }
                if bits != 16 {
                    return Err(AudioError::UnsupportedFormat(format!(
                        "{bits} bits per sample (only 16)"
                    )));
                }
                if rate != SAMPLE_RATE {
                    return Err(AudioError::WrongSampleRate { found: rate });
                }
                let samples = body
                    .chunks_exact(2)
                    .map(|c| pcm16_to_float(i16::from_le_bytes([c[0], c[1]])))
                    .collect();
                return Ok(AudioBuffer {
                    samples,
                    sample_rate: rate,
                });
            }
            _ => {}
        }
        // chunks are word aligned
        pos = body_start.saturating_add(declared).saturating_add(declared & 1);
    }
    match format {
        None => Err(AudioError::Malformed("missing fmt chunk".into())),
        Some(_) => Err(AudioError::Malformed("missing data chunk".into())),
    }
}

/// Serializes a buffer as a canonical 44-byte-header PCM16 mono file.
pub fn encode_wav(buffer: &AudioBuffer) -> Vec<u8> {
    let data_len = buffer.samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&buffer.sample_rate.to_le_bytes());
    out.extend_from_slice(&(buffer.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in &buffer.samples {
        out.extend_from_slice(&float_to_pcm16(s).to_le_bytes());
    }
    out
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioBuffer, AudioError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| AudioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_wav(&bytes)
}

pub fn write_wav(buffer: &AudioBuffer, path: impl AsRef<Path>) -> Result<(), AudioError> {
    let path = path.as_ref();
    fs::write(path, encode_wav(buffer)).map_err(|source| AudioError::Io {
        path: path.display().to_string(),
        source,
    })
}
