//! Frame-level acoustic features: power spectrogram, mel filterbank, log-mel
//! and MFCC.
//!
//! Framing is 25 ms Hamming windows every 20 ms (50 frames/s) zero-padded to a
//! 512-point FFT. Arithmetic is in `f64`; finished matrices are stored as
//! `f32`, which is also the on-disk precision of the feature file.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use crate::audio::{AudioBuffer, SAMPLE_RATE};

/// Added to filterbank energies before the logarithm.
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("invalid feature config: {0}")]
    InvalidConfig(String),
    #[error("mel filter {0} covers no FFT bin; increase fft_size or reduce num_mel_filters")]
    DegenerateFilter(usize),
    #[error("audio sample rate {found} Hz, features require {SAMPLE_RATE} Hz")]
    WrongSampleRate { found: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeatureKind {
    Mfcc,
    LogMel,
    Imported,
}

impl FeatureKind {
    pub fn code(self) -> u8 {
        match self {
            FeatureKind::Mfcc => 0,
            FeatureKind::LogMel => 1,
            FeatureKind::Imported => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(FeatureKind::Mfcc),
            1 => Some(FeatureKind::LogMel),
            2 => Some(FeatureKind::Imported),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::Mfcc => "mfcc",
            FeatureKind::LogMel => "logmel",
            FeatureKind::Imported => "imported",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mfcc" => Some(FeatureKind::Mfcc),
            "logmel" => Some(FeatureKind::LogMel),
            "imported" => Some(FeatureKind::Imported),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConfig {
    pub window_ms: f64,
    pub hop_ms: f64,
    pub fft_size: usize,
    pub num_mel_filters: usize,
    pub num_ceps: usize,
    pub preemphasis: f64,
    pub fmin: f64,
    pub fmax: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self::mfcc()
    }
}

impl FeatureConfig {
    /// 26 filters, 13 cepstra.
    pub fn mfcc() -> Self {
        Self {
            window_ms: 25.0,
            hop_ms: 20.0,
            fft_size: 512,
            num_mel_filters: 26,
            num_ceps: 13,
            preemphasis: 0.97,
            fmin: 0.0,
            fmax: 8000.0,
        }
    }

    /// 80 mel bins, the spectrogram-style frontend.
    pub fn log_mel() -> Self {
        Self {
            num_mel_filters: 80,
            ..Self::mfcc()
        }
    }

    pub fn window_samples(&self) -> usize {
        (self.window_ms * SAMPLE_RATE as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop_ms * SAMPLE_RATE as f64 / 1000.0).round() as usize
    }

    pub fn frame_rate(&self) -> f64 {
        SAMPLE_RATE as f64 / self.hop_samples() as f64
    }

    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        let bad = |m: String| Err(FeatureError::InvalidConfig(m));
        if self.window_samples() == 0 || self.hop_samples() == 0 {
            return bad("window and hop must be at least one sample".into());
        }
        if self.fft_size < self.window_samples() {
            return bad(format!(
                "fft_size {} smaller than window of {} samples",
                self.fft_size,
                self.window_samples()
            ));
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax) {
            return bad(format!("need 0 <= fmin < fmax, got {}..{}", self.fmin, self.fmax));
        }
        if self.fmax > SAMPLE_RATE as f64 / 2.0 {
            return bad(format!("fmax {} above Nyquist", self.fmax));
        }
        if self.num_mel_filters == 0 {
            return bad("num_mel_filters must be positive".into());
        }
        if self.num_ceps == 0 || self.num_ceps > self.num_mel_filters {
            return bad(format!(
                "num_ceps {} must be in 1..={}",
                self.num_ceps, self.num_mel_filters
            ));
        }
        if !(0.0..1.0).contains(&self.preemphasis) {
            return bad(format!("preemphasis {} outside [0, 1)", self.preemphasis));
        }
        Ok(())
    }
}

/// Number of analysis frames for a signal of `num_samples`.
pub fn frame_count(num_samples: usize, window: usize, hop: usize) -> usize {
    if num_samples < window {
        0
    } else {
        (num_samples - window) / hop + 1
    }
}

/// A `frames x dims` feature matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: Vec<f32>,
    frames: usize,
    dims: usize,
    kind: FeatureKind,
}

impl FeatureMatrix {
    pub fn new(data: Vec<f32>, frames: usize, dims: usize, kind: FeatureKind) -> Self {
        assert_eq!(data.len(), frames * dims, "feature data length mismatch");
        Self {
            data,
            frames,
            dims,
            kind,
        }
    }

    pub fn empty(dims: usize, kind: FeatureKind) -> Self {
        Self::new(Vec::new(), 0, dims, kind)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn with_kind(mut self, kind: FeatureKind) -> Self {
        self.kind = kind;
        self
    }

    /// Frames per second; every producer here runs at the 20 ms hop.
    pub fn frame_rate(&self) -> f64 {
        FeatureConfig::default().frame_rate()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.dims..(t + 1) * self.dims]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dims.max(1)).take(self.frames)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `y[0] = x[0]`, `y[t] = x[t] - alpha * x[t-1]`.
///
/// The result can leave `[-1, 1]`, so it is returned as a plain signal rather
/// than an [`AudioBuffer`].
pub fn preemphasize(samples: &[f32], alpha: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(samples.len());
    let mut prev = 0.0f64;
    for (t, &s) in samples.iter().enumerate() {
        let x = s as f64;
        out.push(if t == 0 { x } else { x - alpha * prev });
        prev = x;
    }
    out
}

/// `2595 * log10(1 + f / 700)`.
pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Symmetric Hamming window.
pub fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Dense row-major real matrix used for intermediate DSP results.
#[derive(Debug, Clone, PartialEq)]
pub struct RealMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl RealMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// Triangular filters with peaks evenly spaced on the mel axis, evaluated at
/// the FFT bin centre frequencies. Weights peak at 1.
pub fn mel_filterbank(cfg: &FeatureConfig) -> Result<RealMatrix, FeatureError> {
    cfg.validate()?;
    let n_filters = cfg.num_mel_filters;
    let n_bins = cfg.num_bins();
    let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
    let edges: Vec<f64> = (0..n_filters + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_filters + 1) as f64))
        .collect();
    let bin_hz = SAMPLE_RATE as f64 / cfg.fft_size as f64;
    let mut fb = RealMatrix::zeros(n_filters, n_bins);
    for m in 0..n_filters {
        let (left, centre, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = fb.row_mut(m);
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            let rising = (f - left) / (centre - left);
            let falling = (right - f) / (right - centre);
            *w = rising.min(falling).max(0.0);
        }
        if !row.iter().any(|&w| w > 0.0) {
            return Err(FeatureError::DegenerateFilter(m));
        }
    }
    Ok(fb)
}

/// `num_out x n` orthonormal DCT-II basis.
fn dct_basis(n: usize, num_out: usize) -> RealMatrix {
    let mut basis = RealMatrix::zeros(num_out, n);
    for k in 0..num_out {
        let scale = if k == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        for (i, b) in basis.row_mut(k).iter_mut().enumerate() {
            *b = scale * (PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos();
        }
    }
    basis
}

/// Orthonormal DCT-II of `x`, all coefficients.
pub fn dct2(x: &[f64]) -> Vec<f64> {
    let basis = dct_basis(x.len(), x.len());
    (0..x.len())
        .map(|k| basis.row(k).iter().zip(x).map(|(b, v)| b * v).sum())
        .collect()
}

/// Reusable extractor: owns the FFT plan, window, filterbank and DCT basis.
pub struct FeatureExtractor {
    cfg: FeatureConfig,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    filterbank: RealMatrix,
    dct: RealMatrix,
}

impl std::fmt::Debug for FeatureExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FeatureExtractor").field("cfg", &self.cfg).finish()
    }
}

impl FeatureExtractor {
    pub fn new(cfg: FeatureConfig) -> Result<Self, FeatureError> {
        let filterbank = mel_filterbank(&cfg)?;
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
        Ok(Self {
            window: hamming(cfg.window_samples()),
            dct: dct_basis(cfg.num_mel_filters, cfg.num_ceps),
            filterbank,
            fft,
            cfg,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &RealMatrix {
        &self.filterbank
    }

    fn check_rate(audio: &AudioBuffer) -> Result<(), FeatureError> {
        if audio.sample_rate() != SAMPLE_RATE {
            return Err(FeatureError::WrongSampleRate {
                found: audio.sample_rate(),
            });
        }
        Ok(())
    }

    /// One-sided power spectrum `|X_k|^2` of every frame of `signal`.
    pub fn power_frames(&self, signal: &[f64]) -> RealMatrix {
        let win = self.cfg.window_samples();
        let hop = self.cfg.hop_samples();
        let n_frames = frame_count(signal.len(), win, hop);
        let n_bins = self.cfg.num_bins();
        let mut out = RealMatrix::zeros(n_frames, n_bins);
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.fft_size];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for t in 0..n_frames {
            let frame = &signal[t * hop..t * hop + win];
            for (i, c) in buf.iter_mut().enumerate() {
                *c = if i < win {
                    Complex::new(frame[i] * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in out.row_mut(t).iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
        }
        out
    }

    /// Power spectrogram of the raw (not pre-emphasized) audio.
    pub fn stft_power(&self, audio: &AudioBuffer) -> Result<RealMatrix, FeatureError> {
        Self::check_rate(audio)?;
        let signal: Vec<f64> = audio.samples().iter().map(|&s| s as f64).collect();
        Ok(self.power_frames(&signal))
    }

    /// Filterbank energies of the pre-emphasized signal, before the log.
    pub fn mel_energies(&self, audio: &AudioBuffer) -> Result<RealMatrix, FeatureError> {
        Self::check_rate(audio)?;
        let power = self.power_frames(&preemphasize(audio.samples(), self.cfg.preemphasis));
        let n_filters = self.cfg.num_mel_filters;
        let mut out = RealMatrix::zeros(power.rows, n_filters);
        for t in 0..power.rows {
            let spec = power.row(t);
            for m in 0..n_filters {
                out.data[t * n_filters + m] = self
                    .filterbank
                    .row(m)
                    .iter()
                    .zip(spec)
                    .map(|(w, p)| w * p)
                    .sum();
            }
        }
        Ok(out)
    }

    pub fn log_mel(&self, audio: &AudioBuffer) -> Result<FeatureMatrix, FeatureError> {
        let energies = self.mel_energies(audio)?;
        let data = energies
            .data
            .iter()
            .map(|&e| (e + LOG_FLOOR).ln() as f32)
            .collect();
        Ok(FeatureMatrix::new(
            data,
            energies.rows,
            energies.cols,
            FeatureKind::LogMel,
        ))
    }

    pub fn mfcc(&self, audio: &AudioBuffer) -> Result<FeatureMatrix, FeatureError> {
        let energies = self.mel_energies(audio)?;
        let n_ceps = self.cfg.num_ceps;
        let mut data = Vec::with_capacity(energies.rows * n_ceps);
        let mut logs = vec![0.0; energies.cols];
        for t in 0..energies.rows {
            for (l, &e) in logs.iter_mut().zip(energies.row(t)) {
                *l = (e + LOG_FLOOR).ln();
            }
            for k in 0..n_ceps {
                let c: f64 = self.dct.row(k).iter().zip(&logs).map(|(b, v)| b * v).sum();
                data.push(c as f32);
            }
        }
        Ok(FeatureMatrix::new(data, energies.rows, n_ceps, FeatureKind::Mfcc))
    }

    /// Features of the kind this extractor's config is meant for.
    pub fn extract(&self, audio: &AudioBuffer, kind: FeatureKind) -> Result<FeatureMatrix, FeatureError> {
        match kind {
            FeatureKind::LogMel => self.log_mel(audio),
            _ => self.mfcc(audio),
        }
    }

    /// Crude waveform from MFCC or log-mel frames: undo the DCT and log, spread
    /// mel energies back over FFT bins and drive a bank of phase-continuous
    /// sinusoids. Only meant for listening checks; it is not a vocoder.
    pub fn resynthesize(&self, features: &FeatureMatrix) -> AudioBuffer {
        let n_filters = self.cfg.num_mel_filters;
        let n_bins = self.cfg.num_bins();
        let hop = self.cfg.hop_samples();
        let fb = &self.filterbank;
        let full_dct = dct_basis(n_filters, n_filters);
        let window_sum: f64 = self.window.iter().sum();

        let amplitudes: Vec<Vec<f64>> = features
            .rows()
            .map(|row| {
                let log_mel: Vec<f64> = if features.dims() == n_filters {
                    row.iter().map(|&v| v as f64).collect()
                } else {
                    // inverse of the orthonormal DCT is its transpose
                    (0..n_filters)
                        .map(|i| {
                            row.iter()
                                .enumerate()
                                .filter(|(k, _)| *k < n_filters)
                                .map(|(k, &c)| full_dct.get(k, i) * c as f64)
                                .sum()
                        })
                        .collect()
                };
                let energies: Vec<f64> = log_mel.iter().map(|l| (l.exp() - LOG_FLOOR).max(0.0)).collect();
                (0..n_bins)
                    .map(|k| {
                        let (num, den) = (0..n_filters).fold((0.0, 0.0), |(n, d), m| {
                            let w = fb.get(m, k);
                            (n + w * energies[m], d + w * w)
                        });
                        if den > 0.0 {
                            2.0 * (num / den).sqrt() / window_sum
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();

        let total = amplitudes.len() * hop;
        let mut out = vec![0.0f64; total];
        let mut phase = vec![0.0f64; n_bins];
        let omega: Vec<f64> = (0..n_bins)
            .map(|k| 2.0 * PI * k as f64 / self.cfg.fft_size as f64)
            .collect();
        for (t, amps) in amplitudes.iter().enumerate() {
            let next = amplitudes.get(t + 1).unwrap_or(amps);
            for k in 1..n_bins - 1 {
                if amps[k] == 0.0 && next[k] == 0.0 {
                    phase[k] = (phase[k] + omega[k] * hop as f64) % (2.0 * PI);
                    continue;
                }
                for i in 0..hop {
                    let frac = i as f64 / hop as f64;
                    let a = amps[k] * (1.0 - frac) + next[k] * frac;
                    out[t * hop + i] += a * (phase[k] + omega[k] * i as f64).cos();
                }
                phase[k] = (phase[k] + omega[k] * hop as f64) % (2.0 * PI);
            }
        }
        let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let gain = if peak > 0.9 { 0.9 / peak } else { 1.0 };
        let samples = out.iter().map(|v| (v * gain) as f32).collect();
        AudioBuffer::from_samples(samples).expect("resynthesis is normalized to [-0.9, 0.9]")
    }
}

/// One-shot power spectrogram.
pub fn stft_power(audio: &AudioBuffer, cfg: &FeatureConfig) -> Result<RealMatrix, FeatureError> {
    FeatureExtractor::new(cfg.clone())?.stft_power(audio)
}

/// One-shot MFCC.
pub fn mfcc(audio: &AudioBuffer, cfg: &FeatureConfig) -> Result<FeatureMatrix, FeatureError> {
    FeatureExtractor::new(cfg.clone())?.mfcc(audio)
}

/// One-shot log-mel.
pub fn log_mel(audio: &AudioBuffer, cfg: &FeatureConfig) -> Result<FeatureMatrix, FeatureError> {
    FeatureExtractor::new(cfg.clone())?.log_mel(audio)
}
