//! Deterministic toy parallel "speech" corpus.
//!
//! Each symbol of a small alphabet is a 100 ms sinusoid; source and target
//! languages use disjoint frequency bands. A target utterance spells the
//! source string reversed and then mapped through a fixed permutation, so a
//! translator has to reorder globally rather than copy frame by frame.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::audio::{write_wav, AudioBuffer, AudioError, SAMPLE_RATE};
use crate::seqprep::{ManifestRecord, ParallelManifest, SeqError, Split};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid toy spec: {0}")]
    InvalidSpec(String),
    #[error("split fractions must be non-negative and sum to 1, got {0:?}")]
    BadFractions([f64; 3]),
    #[error("pairs must be ≥ 1")]
    NoPairs,
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Manifest(#[from] SeqError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToySpec {
    pub alphabet_size: usize,
    pub min_symbols: usize,
    pub max_symbols: usize,
    pub symbol_ms: f64,
    pub fade_ms: f64,
    pub amplitude: f64,
    /// Half-width of additive uniform noise; 0 disables it.
    pub noise: f64,
    pub source_freqs: Vec<f64>,
    pub target_freqs: Vec<f64>,
    /// `permutation[s]` is the target symbol for source symbol `s`.
    pub permutation: Vec<usize>,
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Affine permutation `s -> (a*s + b) mod m` with `a` coprime to `m`.
pub fn default_permutation(m: usize) -> Vec<usize> {
    let a = (3..).find(|&a| gcd(a, m) == 1).unwrap();
    let b = m / 2 + 1;
    (0..m).map(|s| (a * s + b) % m).collect()
}

impl Default for ToySpec {
    fn default() -> Self {
        Self::with_alphabet(8)
    }
}

impl ToySpec {
    /// Source band 300..3000 Hz, target band 3500..7500 Hz, evenly spaced.
    pub fn with_alphabet(m: usize) -> Self {
        Self {
            alphabet_size: m,
            min_symbols: 3,
            max_symbols: 12,
            symbol_ms: 100.0,
            fade_ms: 10.0,
            amplitude: 0.5,
            noise: 0.0,
            source_freqs: linspace(300.0, 3000.0, m),
            target_freqs: linspace(3500.0, 7500.0, m),
            permutation: default_permutation(m),
        }
    }

    pub fn symbol_samples(&self) -> usize {
        (self.symbol_ms * SAMPLE_RATE as f64 / 1000.0).round() as usize
    }

    pub fn symbol_name(s: usize) -> String {
        ((b'a' + s as u8) as char).to_string()
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        let m = self.alphabet_size;
        if !(2..=26).contains(&m) {
            return bad(format!("alphabet_size {m} outside 2..=26"));
        }
        if self.min_symbols == 0 || self.min_symbols > self.max_symbols {
            return bad("need 1 <= min_symbols <= max_symbols".into());
        }
        if self.symbol_samples() == 0 || !(self.fade_ms >= 0.0) || 2.0 * self.fade_ms > self.symbol_ms {
            return bad("symbol duration must exceed both fades".into());
        }
        if !(self.amplitude > 0.0 && self.amplitude + self.noise <= 1.0 && self.noise >= 0.0) {
            return bad("amplitude + noise must lie in (0, 1]".into());
        }
        if self.source_freqs.len() != m || self.target_freqs.len() != m {
            return bad(format!("need {m} source and target frequencies"));
        }
        let all: Vec<f64> = self.source_freqs.iter().chain(&self.target_freqs).copied().collect();
        for (i, a) in all.iter().enumerate() {
            if !(*a > 0.0 && *a < 8000.0) {
                return bad(format!("frequency {a} outside (0, 8000) Hz"));
            }
            for b in &all[i + 1..] {
                if (a - b).abs() < 100.0 {
                    return bad(format!("frequencies {a} and {b} closer than 100 Hz"));
                }
            }
        }
        let (src_lo, src_hi) = min_max(&self.source_freqs);
        let (tgt_lo, tgt_hi) = min_max(&self.target_freqs);
        if !(src_hi < tgt_lo || tgt_hi < src_lo) {
            return bad("source and target bands overlap".into());
        }
        let mut seen = HashSet::new();
        if self.permutation.len() != m || !self.permutation.iter().all(|&p| p < m && seen.insert(p)) {
            return bad("permutation must be a bijection on the alphabet".into());
        }
        Ok(())
    }

    /// Reverse, then map each symbol through the permutation.
    pub fn translate(&self, source: &[usize]) -> Vec<usize> {
        source.iter().rev().map(|&s| self.permutation[s]).collect()
    }

    /// Parses `key = value` lines; unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self, SynthError> {
        let mut spec = ToySpec::default();
        let mut explicit_freqs = (false, false, false);
        let bad = |m: String| SynthError::InvalidSpec(m);
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("line {}: expected key = value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let num = |v: &str| v.parse::<f64>().map_err(|_| bad(format!("{key}: bad number {v:?}")));
            let int = |v: &str| v.parse::<usize>().map_err(|_| bad(format!("{key}: bad integer {v:?}")));
            let list = |v: &str| v.split(',').map(|x| num(x.trim())).collect::<Result<Vec<_>, _>>();
            match key {
                "alphabet_size" => {
                    let m = int(value)?;
                    if !(2..=26).contains(&m) {
                        return Err(bad(format!("alphabet_size {m} outside 2..=26")));
                    }
                    let fresh = ToySpec::with_alphabet(m);
                    spec.alphabet_size = m;
                    if !explicit_freqs.0 {
                        spec.source_freqs = fresh.source_freqs;
                    }
                    if !explicit_freqs.1 {
                        spec.target_freqs = fresh.target_freqs;
                    }
                    if !explicit_freqs.2 {
                        spec.permutation = fresh.permutation;
                    }
                }
                "min_symbols" => spec.min_symbols = int(value)?,
                "max_symbols" => spec.max_symbols = int(value)?,
                "symbol_ms" => spec.symbol_ms = num(value)?,
                "fade_ms" => spec.fade_ms = num(value)?,
                "amplitude" => spec.amplitude = num(value)?,
                "noise" => spec.noise = num(value)?,
                "source_freqs" => {
                    spec.source_freqs = list(value)?;
                    explicit_freqs.0 = true;
                }
                "target_freqs" => {
                    spec.target_freqs = list(value)?;
                    explicit_freqs.1 = true;
                }
                "permutation" => {
                    spec.permutation = value
                        .split(',')
                        .map(|x| int(x.trim()))
                        .collect::<Result<Vec<_>, _>>()?;
                    explicit_freqs.2 = true;
                }
                other => return Err(bad(format!("unknown key {other:?}"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Sinusoid per symbol with raised-cosine fades at segment edges, plus
    /// optional noise drawn from `rng`.
    pub fn render(&self, symbols: &[usize], freqs: &[f64], rng: &mut ChaCha8Rng) -> AudioBuffer {
        let seg = self.symbol_samples();
        let fade = (self.fade_ms * SAMPLE_RATE as f64 / 1000.0).round() as usize;
        let mut samples = Vec::with_capacity(seg * symbols.len());
        for &s in symbols {
            let w = 2.0 * PI * freqs[s] / SAMPLE_RATE as f64;
            for i in 0..seg {
                let env = if i < fade {
                    0.5 - 0.5 * (PI * i as f64 / fade as f64).cos()
                } else if i >= seg - fade {
                    0.5 - 0.5 * (PI * (seg - 1 - i) as f64 / fade as f64).cos()
                } else {
                    1.0
                };
                let mut v = self.amplitude * env * (w * i as f64).sin();
                if self.noise > 0.0 {
                    v += rng.gen_range(-self.noise..=self.noise);
                }
                samples.push(v.clamp(-1.0, 1.0) as f32);
            }
        }
        AudioBuffer::from_samples(samples).expect("rendered samples are clamped")
    }
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

/// One generated pair, before anything touches the filesystem.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPair {
    pub id: String,
    pub source_symbols: Vec<usize>,
    pub target_symbols: Vec<usize>,
    pub source_audio: AudioBuffer,
    pub target_audio: AudioBuffer,
}

pub fn symbols_text(symbols: &[usize]) -> String {
    symbols.iter().map(|&s| ToySpec::symbol_name(s)).collect::<Vec<_>>().join(" ")
}

/// Pair `index` of the corpus for `seed`; independent of the other pairs.
pub fn generate_pair(spec: &ToySpec, seed: u64, index: usize) -> ToyPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index as u64);
    let n = rng.gen_range(spec.min_symbols..=spec.max_symbols);
    let source_symbols: Vec<usize> = (0..n).map(|_| rng.gen_range(0..spec.alphabet_size)).collect();
    let target_symbols = spec.translate(&source_symbols);
    let source_audio = spec.render(&source_symbols, &spec.source_freqs, &mut rng);
    let target_audio = spec.render(&target_symbols, &spec.target_freqs, &mut rng);
    ToyPair {
        id: format!("pair{index:05}"),
        source_symbols,
        target_symbols,
        source_audio,
        target_audio,
    }
}

#[derive(Debug, Clone)]
pub struct ToyCorpus {
    pub manifest: ParallelManifest,
    pub source_symbols: Vec<Vec<usize>>,
    pub target_symbols: Vec<Vec<usize>>,
}

/// Writes `num_pairs` WAV pairs under `out_dir/wav` and `out_dir/all.jsonl`.
pub fn generate(spec: &ToySpec, num_pairs: usize, seed: u64, out_dir: &Path) -> Result<ToyCorpus, SynthError> {
    spec.validate()?;
    if num_pairs == 0 {
        return Err(SynthError::NoPairs);
    }
    let wav_dir = out_dir.join("wav");
    fs::create_dir_all(&wav_dir).map_err(|source| SynthError::Io {
        path: wav_dir.display().to_string(),
        source,
    })?;
    let mut records = Vec::with_capacity(num_pairs);
    let mut source_symbols = Vec::with_capacity(num_pairs);
    let mut target_symbols = Vec::with_capacity(num_pairs);
    for i in 0..num_pairs {
        let pair = generate_pair(spec, seed, i);
        let src = format!("wav/{}_src.wav", pair.id);
        let tgt = format!("wav/{}_tgt.wav", pair.id);
        write_wav(&pair.source_audio, out_dir.join(&src))?;
        write_wav(&pair.target_audio, out_dir.join(&tgt))?;
        let mut rec = ManifestRecord::new(pair.id, src, tgt);
        rec.source_text = Some(symbols_text(&pair.source_symbols));
        rec.target_text = Some(symbols_text(&pair.target_symbols));
        records.push(rec);
        source_symbols.push(pair.source_symbols);
        target_symbols.push(pair.target_symbols);
    }
    let manifest = ParallelManifest::new(records, out_dir);
    manifest.save(out_dir.join("all.jsonl"))?;
    Ok(ToyCorpus {
        manifest,
        source_symbols,
        target_symbols,
    })
}

/// Seeded disjoint train/dev/test split. Dev and test sizes are rounded;
/// train takes the remainder.
pub fn split(
    manifest: &ParallelManifest,
    fractions: [f64; 3],
    seed: u64,
) -> Result<[ParallelManifest; 3], SynthError> {
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(SynthError::BadFractions(fractions));
    }
    let n = manifest.len();
    let n_dev = (fractions[1] * n as f64).round() as usize;
    let n_test = ((fractions[2] * n as f64).round() as usize).min(n - n_dev);
    let n_train = n - n_dev - n_test;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (train_idx, rest) = order.split_at(n_train);
    let (dev_idx, test_idx) = rest.split_at(n_dev);
    let pick = |idx: &[usize], split: Split| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        let mut m = ParallelManifest::new(
            idx.iter().map(|&i| manifest.records[i].clone()).collect(),
            manifest.base_dir.clone(),
        );
        m.split = Some(split);
        m
    };
    Ok([
        pick(train_idx, Split::Train),
        pick(dev_idx, Split::Dev),
        pick(test_idx, Split::Test),
    ])
}
