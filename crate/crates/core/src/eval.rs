//! Greedy decoding and the BLEU / WER scoring used for evaluation.

use std::collections::HashMap;
use std::fmt;
use std::hash::Hash;
use std::path::Path;

use thiserror::Error;

use crate::binio::read_file;
use crate::model::{encode, IncrementalDecoder, ModelConfig, ModelError, Params, Scalar};
use crate::quantizer::UnitSequence;
use crate::seqprep::{decode_tokens, encode_source, EncoderInput, Example, SourceData, BOS, EOS};
use crate::FormatError;

pub const MAX_ORDER: usize = 4;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("{hypotheses} hypotheses for {references} references")]
    LengthMismatch { hypotheses: usize, references: usize },
    #[error("reference is empty")]
    EmptyReference,
    #[error("hypothesis file has {hypotheses} lines, reference file has {references}")]
    LineCountMismatch { hypotheses: usize, references: usize },
    #[error("{0} is not valid UTF-8")]
    NotUtf8(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Corpus BLEU with its ingredients. `bleu` is on the 0-100 scale.
#[derive(Debug, Clone, PartialEq)]
pub struct BleuScore {
    pub bleu: f64,
    /// Smoothed precisions p1..p4.
    pub precisions: [f64; MAX_ORDER],
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU over one reference per hypothesis.
///
/// Clipped n-gram matches are summed over the whole corpus before the
/// precisions are formed. An order with no matches gets
/// `1 / (2^q * max(1, total))`, `q` counting such orders from 1.
pub fn corpus_bleu<T: Eq + Hash>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<BleuScore, EvalError> {
    if hypotheses.len() != references.len() {
        return Err(EvalError::LengthMismatch {
            hypotheses: hypotheses.len(),
            references: references.len(),
        });
    }
    if hypotheses.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hypotheses.iter().zip(references) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let rc = ngram_counts(r, n);
            for (gram, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(gram).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    let mut precisions = [0.0; MAX_ORDER];
    let mut q = 0;
    for n in 0..MAX_ORDER {
        precisions[n] = if matches[n] == 0 {
            q += 1;
            1.0 / (2f64.powi(q) * totals[n].max(1) as f64)
        } else {
            matches[n] as f64 / totals[n] as f64
        };
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let bleu = if hyp_len == 0 {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
        100.0 * brevity_penalty * log_mean.exp()
    };
    Ok(BleuScore {
        bleu,
        precisions,
        matches,
        totals,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Word error rate in percent. Exceeds 100 when the hypothesis is long.
pub fn wer<T: PartialEq>(hypothesis: &[T], reference: &[T]) -> Result<f64, EvalError> {
    if reference.is_empty() {
        return Err(EvalError::EmptyReference);
    }
    Ok(100.0 * edit_distance(hypothesis, reference) as f64 / reference.len() as f64)
}

/// `100 * total edits / total reference length`.
pub fn corpus_wer<T: PartialEq>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<f64, EvalError> {
    if hypotheses.len() != references.len() {
        return Err(EvalError::LengthMismatch {
            hypotheses: hypotheses.len(),
            references: references.len(),
        });
    }
    let edits: usize = hypotheses.iter().zip(references).map(|(h, r)| edit_distance(h, r)).sum();
    let total: usize = references.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(EvalError::EmptyReference);
    }
    Ok(100.0 * edits as f64 / total as f64)
}

const PUNCTUATION: &[char] = &['.', ',', '!', '?', ';', ':', '(', ')', '"', '\''];

/// Whitespace tokenization with punctuation split into its own tokens.
/// Case is left alone.
pub fn tokenize_text(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut cur = String::new();
        for c in word.chars() {
            if PUNCTUATION.contains(&c) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(c.to_string());
            } else {
                cur.push(c);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub bleu: BleuScore,
    pub wer: f64,
    pub samples: usize,
    /// Fraction of hypotheses identical to their reference.
    pub exact_match: f64,
}

pub const REPORT_CSV_HEADER: &str = "samples,bleu,p1,p2,p3,p4,brevity_penalty,hyp_len,ref_len,wer,exact_match";

impl EvalReport {
    pub fn from_pairs<T: Eq + Hash>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<Self, EvalError> {
        let bleu = corpus_bleu(hypotheses, references)?;
        let wer = corpus_wer(hypotheses, references)?;
        let exact = hypotheses.iter().zip(references).filter(|(h, r)| h == r).count();
        Ok(Self {
            bleu,
            wer,
            samples: hypotheses.len(),
            exact_match: exact as f64 / hypotheses.len() as f64,
        })
    }

    /// Full-precision values, for machine comparison; `Display` rounds.
    pub fn csv_row(&self) -> String {
        let p = &self.bleu.precisions;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.samples,
            self.bleu.bleu,
            p[0],
            p[1],
            p[2],
            p[3],
            self.bleu.brevity_penalty,
            self.bleu.hyp_len,
            self.bleu.ref_len,
            self.wer,
            self.exact_match
        )
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = &self.bleu;
        writeln!(f, "BLEU = {:.4}", b.bleu)?;
        writeln!(
            f,
            "precisions = {:.4}/{:.4}/{:.4}/{:.4}",
            b.precisions[0], b.precisions[1], b.precisions[2], b.precisions[3]
        )?;
        writeln!(
            f,
            "BP = {:.4} (hyp_len = {}, ref_len = {})",
            b.brevity_penalty, b.hyp_len, b.ref_len
        )?;
        writeln!(f, "WER = {:.2}", self.wer)?;
        writeln!(f, "exact = {:.4}", self.exact_match)?;
        write!(f, "samples = {}", self.samples)
    }
}

/// Index of the largest score; ties go to the lowest index.
fn argmax<F: Scalar>(row: &[F]) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

fn encoder_input(cfg: &ModelConfig, sources: &[&SourceData]) -> EncoderInput {
    match sources.first() {
        Some(SourceData::Features(_)) => EncoderInput::Features(
            sources
                .iter()
                .map(|s| match s {
                    SourceData::Features(f) => f.clone(),
                    SourceData::Units(_) => panic!("mixed source kinds"),
                })
                .collect(),
        ),
        _ => EncoderInput::Tokens(
            sources
                .iter()
                .flat_map(|s| match s {
                    SourceData::Units(u) => encode_source(u, cfg.max_len).tokens().to_vec(),
                    SourceData::Features(_) => panic!("mixed source kinds"),
                })
                .collect(),
        ),
    }
}

/// Greedy decoding of a batch of sources: start from BOS, take the argmax
/// token at each step and stop at EOS or after `max_len` tokens.
pub fn greedy_decode_batch<F: Scalar>(
    p: &Params<F>,
    cfg: &ModelConfig,
    sources: &[&SourceData],
    max_len: usize,
) -> Result<Vec<UnitSequence>, EvalError> {
    if sources.is_empty() {
        return Ok(Vec::new());
    }
    let n = sources.len();
    let enc = encode(p, cfg, &encoder_input(cfg, sources), n, cfg.max_len)?;
    let mut emitted: Vec<Vec<u32>> = vec![Vec::new(); n];
    let mut done = vec![false; n];
    let mut dec = IncrementalDecoder::new(p, cfg, &enc, max_len.max(1))?;
    let mut next = vec![BOS; n];
    for _ in 0..max_len {
        let logits = dec.step(&next)?;
        for (b, row) in logits.chunks_exact(cfg.vocab).enumerate() {
            if done[b] {
                continue;
            }
            let tok = argmax(row);
            emitted[b].push(tok);
            next[b] = tok;
            done[b] = tok == EOS;
        }
        if done.iter().all(|&d| d) {
            break;
        }
    }
    Ok(emitted.iter().map(|e| decode_tokens(e)).collect())
}

pub fn greedy_decode<F: Scalar>(
    p: &Params<F>,
    cfg: &ModelConfig,
    source: &SourceData,
    max_len: usize,
) -> Result<UnitSequence, EvalError> {
    Ok(greedy_decode_batch(p, cfg, &[source], max_len)?.remove(0))
}

/// Decodes every example and scores the output units against the targets.
pub fn evaluate_units<F: Scalar>(
    p: &Params<F>,
    cfg: &ModelConfig,
    examples: &[Example],
    max_len: usize,
    batch_size: usize,
) -> Result<(EvalReport, Vec<UnitSequence>), EvalError> {
    let mut hyps = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(batch_size.max(1)) {
        let sources: Vec<&SourceData> = chunk.iter().map(|e| &e.source).collect();
        hyps.extend(greedy_decode_batch(p, cfg, &sources, max_len)?);
    }
    let h: Vec<Vec<u32>> = hyps.iter().map(|u| u.0.clone()).collect();
    let r: Vec<Vec<u32>> = examples.iter().map(|e| e.target.0.clone()).collect();
    Ok((EvalReport::from_pairs(&h, &r)?, hyps))
}

/// Scores line-aligned transcript text.
pub fn evaluate_transcript_text(hypotheses: &str, references: &str) -> Result<EvalReport, EvalError> {
    let h: Vec<Vec<String>> = hypotheses.lines().map(tokenize_text).collect();
    let r: Vec<Vec<String>> = references.lines().map(tokenize_text).collect();
    if h.len() != r.len() {
        return Err(EvalError::LineCountMismatch {
            hypotheses: h.len(),
            references: r.len(),
        });
    }
    EvalReport::from_pairs(&h, &r)
}

pub fn evaluate_transcripts(hyp_file: impl AsRef<Path>, ref_file: impl AsRef<Path>) -> Result<EvalReport, EvalError> {
    let read = |p: &Path| -> Result<String, EvalError> {
        String::from_utf8(read_file(p)?).map_err(|_| EvalError::NotUtf8(p.display().to_string()))
    };
    evaluate_transcript_text(&read(hyp_file.as_ref())?, &read(ref_file.as_ref())?)
}
