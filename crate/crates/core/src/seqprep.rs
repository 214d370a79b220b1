//! Fixed-length token sequences, parallel manifests, unit cache files and
//! batching.
//!
//! Token ids 0..3 are reserved (`PAD`, `BOS`, `EOS`); unit `u` becomes token
//! `u + 3`. Sources carry no specials. Targets are split teacher-forcing
//! style into a decoder input starting with `BOS` and a decoder target ending
//! with `EOS`, one position apart.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binio::{read_file, write_atomic, FormatError, Reader};
use crate::features::FeatureMatrix;
use crate::quantizer::UnitSequence;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const NUM_SPECIALS: u32 = 3;
/// Model sequence length.
pub const SEQ_LEN: usize = 300;

pub const UNITS_MAGIC: &[u8; 4] = b"U2UU";
pub const UNITS_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SeqError {
    #[error("manifest line {line}: {message}")]
    BadManifest { line: usize, message: String },
    #[error("duplicate record id {0:?}")]
    DuplicateId(String),
    #[error("record {id:?}: file {path} does not exist")]
    MissingFile { id: String, path: String },
    #[error("record {id:?} has no cached {side} units")]
    MissingUnits { id: String, side: &'static str },
    #[error("unit id {0} does not fit the unit cache format")]
    UnitTooLarge(u32),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Vocabulary size for a codebook of `k` units.
pub fn vocab_size(k: usize) -> usize {
    k + NUM_SPECIALS as usize
}

pub fn unit_to_token(u: u32) -> u32 {
    u + NUM_SPECIALS
}

/// A token sequence of exactly the model length with a PAD-only suffix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence(Vec<u32>);

impl TokenSequence {
    fn pad_to(mut tokens: Vec<u32>, len: usize) -> Self {
        tokens.resize(len, PAD);
        TokenSequence(tokens)
    }

    pub fn tokens(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of positions before the PAD suffix.
    pub fn content_len(&self) -> usize {
        self.0.iter().rposition(|&t| t != PAD).map_or(0, |p| p + 1)
    }
}

/// Units shifted past the specials, trimmed to the first `len` or padded.
pub fn encode_source(units: &UnitSequence, len: usize) -> TokenSequence {
    let tokens = units.ids().iter().take(len).map(|&u| unit_to_token(u)).collect();
    TokenSequence::pad_to(tokens, len)
}

/// Teacher-forcing pair from `BOS + units[..len-2] + EOS`.
pub fn encode_target(units: &UnitSequence, len: usize) -> (TokenSequence, TokenSequence) {
    let keep = len.saturating_sub(2);
    let mut core = Vec::with_capacity(units.len().min(keep) + 2);
    core.push(BOS);
    core.extend(units.ids().iter().take(keep).map(|&u| unit_to_token(u)));
    core.push(EOS);
    let input = core[..core.len() - 1].to_vec();
    let target = core[1..].to_vec();
    (TokenSequence::pad_to(input, len), TokenSequence::pad_to(target, len))
}

/// Units up to the first EOS, ignoring PAD and BOS.
pub fn decode_tokens(tokens: &[u32]) -> UnitSequence {
    UnitSequence(
        tokens
            .iter()
            .take_while(|&&t| t != EOS)
            .filter(|&&t| t >= NUM_SPECIALS)
            .map(|&t| t - NUM_SPECIALS)
            .collect(),
    )
}

/// Collapses runs of repeated units.
pub fn dedup(units: &UnitSequence) -> UnitSequence {
    let mut out = units.0.clone();
    out.dedup();
    UnitSequence(out)
}

pub fn encode_units(units: &UnitSequence) -> Result<Vec<u8>, SeqError> {
    let mut out = Vec::with_capacity(12 + units.len() * 2);
    out.extend_from_slice(UNITS_MAGIC);
    out.extend_from_slice(&UNITS_VERSION.to_le_bytes());
    out.extend_from_slice(&(units.len() as u32).to_le_bytes());
    for &u in units.ids() {
        let v = u16::try_from(u).map_err(|_| SeqError::UnitTooLarge(u))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_units(bytes: &[u8]) -> Result<UnitSequence, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(UNITS_MAGIC)?;
    let version = r.u32()?;
    if version != UNITS_VERSION {
        return Err(FormatError::VersionUnsupported(version));
    }
    let count = r.u32()? as usize;
    let payload = r.take(count.checked_mul(2).ok_or(FormatError::TruncatedFile)?)?;
    r.finish()?;
    Ok(UnitSequence(
        payload
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]) as u32)
            .collect(),
    ))
}

pub fn write_units(units: &UnitSequence, path: impl AsRef<Path>) -> Result<(), SeqError> {
    Ok(write_atomic(path.as_ref(), &encode_units(units)?)?)
}

pub fn read_units(path: impl AsRef<Path>) -> Result<UnitSequence, FormatError> {
    decode_units(&read_file(path.as_ref())?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Source,
    Target,
}

impl Side {
    pub fn name(self) -> &'static str {
        match self {
            Side::Source => "source",
            Side::Target => "target",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

/// One parallel utterance pair. Paths are relative to the manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub source: String,
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_text: Option<String>,
    /// Unit cache file written by unit extraction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_units: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_units: Option<String>,
}

impl ManifestRecord {
    pub fn new(id: impl Into<String>, source: impl Into<String>, target: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            source: source.into(),
            target: target.into(),
            source_text: None,
            target_text: None,
            source_units: None,
            target_units: None,
        }
    }

    pub fn path(&self, side: Side) -> &str {
        match side {
            Side::Source => &self.source,
            Side::Target => &self.target,
        }
    }

    pub fn text(&self, side: Side) -> Option<&str> {
        match side {
            Side::Source => self.source_text.as_deref(),
            Side::Target => self.target_text.as_deref(),
        }
    }

    pub fn units_path(&self, side: Side) -> Option<&str> {
        let explicit = match side {
            Side::Source => self.source_units.as_deref(),
            Side::Target => self.target_units.as_deref(),
        };
        explicit.or_else(|| {
            let p = self.path(side);
            p.ends_with(".u2uu").then_some(p)
        })
    }

    pub fn set_units_path(&mut self, side: Side, path: String) {
        match side {
            Side::Source => self.source_units = Some(path),
            Side::Target => self.target_units = Some(path),
        }
    }
}

/// Parses JSON-lines manifest text; blank lines are ignored.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRecord>, SeqError> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(line).map_err(|e| SeqError::BadManifest {
            line: i + 1,
            message: e.to_string(),
        })?;
        if rec.id.is_empty() {
            return Err(SeqError::BadManifest {
                line: i + 1,
                message: "empty id".into(),
            });
        }
        if !seen.insert(rec.id.clone()) {
            return Err(SeqError::DuplicateId(rec.id));
        }
        records.push(rec);
    }
    Ok(records)
}

/// Records plus the directory their relative paths resolve against.
#[derive(Debug, Clone, PartialEq)]
pub struct ParallelManifest {
    pub records: Vec<ManifestRecord>,
    pub base_dir: PathBuf,
    pub split: Option<Split>,
}

impl ParallelManifest {
    pub fn new(records: Vec<ManifestRecord>, base_dir: impl Into<PathBuf>) -> Self {
        Self {
            records,
            base_dir: base_dir.into(),
            split: None,
        }
    }

    /// Loads and checks that every referenced file exists.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, SeqError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| SeqError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let manifest = Self::new(parse_manifest(&text)?, base);
        for rec in &manifest.records {
            let mut paths = vec![rec.source.as_str(), rec.target.as_str()];
            paths.extend(rec.source_units.as_deref());
            paths.extend(rec.target_units.as_deref());
            for p in paths {
                let full = manifest.resolve(p);
                if !full.exists() {
                    return Err(SeqError::MissingFile {
                        id: rec.id.clone(),
                        path: full.display().to_string(),
                    });
                }
            }
        }
        Ok(manifest)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for rec in &self.records {
            out.push_str(&serde_json::to_string(rec).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SeqError> {
        Ok(write_atomic(path.as_ref(), self.to_jsonl().as_bytes())?)
    }

    pub fn resolve(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Cached units of one side of every record, in manifest order.
    pub fn load_units(&self, side: Side) -> Result<Vec<UnitSequence>, SeqError> {
        self.records
            .iter()
            .map(|rec| {
                let p = rec.units_path(side).ok_or_else(|| SeqError::MissingUnits {
                    id: rec.id.clone(),
                    side: side.name(),
                })?;
                Ok(read_units(self.resolve(p))?)
            })
            .collect()
    }
}

/// What the encoder consumes for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub enum SourceData {
    Units(UnitSequence),
    Features(FeatureMatrix),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub source: SourceData,
    pub target: UnitSequence,
}

/// Loads unit-to-unit examples from cached units, optionally collapsing repeats.
pub fn load_unit_examples(manifest: &ParallelManifest, dedup_units: bool) -> Result<Vec<Example>, SeqError> {
    let src = manifest.load_units(Side::Source)?;
    let tgt = manifest.load_units(Side::Target)?;
    let prep = |u: UnitSequence| if dedup_units { dedup(&u) } else { u };
    Ok(manifest
        .records
        .iter()
        .zip(src.into_iter().zip(tgt))
        .map(|(rec, (s, t))| Example {
            id: rec.id.clone(),
            source: SourceData::Units(prep(s)),
            target: prep(t),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub enum EncoderInput {
    /// `batch x len` source tokens.
    Tokens(Vec<u32>),
    /// Raw feature frames per utterance; stacking happens in the model.
    Features(Vec<FeatureMatrix>),
}

/// A mini-batch of teacher-forcing examples, `batch x len` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    pub len: usize,
    pub encoder: EncoderInput,
    pub decoder_input: Vec<u32>,
    pub decoder_target: Vec<u32>,
    /// `true` where the source token is not PAD (token input only).
    pub encoder_mask: Vec<bool>,
    pub decoder_mask: Vec<bool>,
    pub target_mask: Vec<bool>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.ids.len()
    }

    pub fn from_examples(examples: &[&Example], len: usize) -> Self {
        let mut enc_tokens = Vec::new();
        let mut enc_feats = Vec::new();
        let mut decoder_input = Vec::with_capacity(examples.len() * len);
        let mut decoder_target = Vec::with_capacity(examples.len() * len);
        for ex in examples {
            match &ex.source {
                SourceData::Units(u) => enc_tokens.extend_from_slice(encode_source(u, len).tokens()),
                SourceData::Features(f) => enc_feats.push(f.clone()),
            }
            let (i, t) = encode_target(&ex.target, len);
            decoder_input.extend_from_slice(i.tokens());
            decoder_target.extend_from_slice(t.tokens());
        }
        assert!(
            enc_tokens.is_empty() || enc_feats.is_empty(),
            "batch mixes token and feature sources"
        );
        let encoder_mask = enc_tokens.iter().map(|&t| t != PAD).collect();
        let encoder = if enc_feats.is_empty() {
            EncoderInput::Tokens(enc_tokens)
        } else {
            EncoderInput::Features(enc_feats)
        };
        Batch {
            ids: examples.iter().map(|e| e.id.clone()).collect(),
            len,
            encoder,
            decoder_mask: decoder_input.iter().map(|&t| t != PAD).collect(),
            target_mask: decoder_target.iter().map(|&t| t != PAD).collect(),
            decoder_input,
            decoder_target,
            encoder_mask,
        }
    }
}

/// Example order for one pass: manifest order, or a seeded shuffle.
pub fn batch_order(n: usize, seed: u64, shuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
}

/// Splits examples into batches of `batch_size`; the last may be smaller.
pub fn make_batches(
    examples: &[Example],
    batch_size: usize,
    seed: u64,
    shuffle: bool,
    len: usize,
) -> Vec<Batch> {
    assert!(batch_size > 0, "batch_size must be positive");
    let order = batch_order(examples.len(), seed, shuffle);
    order
        .chunks(batch_size)
        .map(|idx| {
            let refs: Vec<&Example> = idx.iter().map(|&i| &examples[i]).collect();
            Batch::from_examples(&refs, len)
        })
        .collect()
}

/// Batches straight from a manifest with cached units on both sides.
pub fn make_manifest_batches(
    manifest: &ParallelManifest,
    batch_size: usize,
    seed: u64,
    shuffle: bool,
) -> Result<Vec<Batch>, SeqError> {
    let examples = load_unit_examples(manifest, false)?;
    Ok(make_batches(&examples, batch_size, seed, shuffle, SEQ_LEN))
}

pub fn num_batches(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}
