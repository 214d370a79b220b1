//! Whole-model forward and backward passes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ops::{
    add_into, attend, cross_entropy, dropout, dropout_backward, feed_forward, feed_forward_backward, layer_norm,
    layer_norm_backward, linear, linear_backward, multi_head_attention, multi_head_attention_backward,
    positional_encoding, AttnCache, AttnMask, AttnShape, FfnCache, NormCache,
};
use super::params::Params;
use super::scalar::Scalar;
use super::{Frontend, Mode, ModelConfig, ModelError};
use crate::features::FeatureMatrix;
use crate::seqprep::{Batch, EncoderInput, PAD};

/// Next-token scores, `batch x len x vocab` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits<F> {
    pub data: Vec<F>,
    pub batch: usize,
    pub len: usize,
    pub vocab: usize,
}

impl<F: Scalar> Logits<F> {
    pub fn row(&self, b: usize, t: usize) -> &[F] {
        let start = (b * self.len + t) * self.vocab;
        &self.data[start..start + self.vocab]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    pub mode: Mode,
    /// Seeds the dropout masks in train mode.
    pub seed: u64,
    /// Run only up to the longest non-PAD prefix on each side. Positions past
    /// it are PAD on both source and target, so this changes no loss value or
    /// in-range logit; it only skips work.
    pub trim: bool,
    /// Keep activations for [`backward`].
    pub keep_cache: bool,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            seed: 0,
            trim: true,
            keep_cache: false,
        }
    }

    pub fn train(seed: u64) -> Self {
        Self {
            mode: Mode::Train,
            seed,
            trim: true,
            keep_cache: true,
        }
    }
}

pub struct ForwardOutput<F> {
    pub logits: Logits<F>,
    pub cache: Option<Cache<F>>,
}

/// Final encoder states plus the key mask the decoder needs.
#[derive(Debug, Clone)]
pub struct EncoderOutput<F> {
    pub states: Vec<F>,
    pub batch: usize,
    pub len: usize,
    pub key_valid: Vec<bool>,
}

enum SourceCache<F> {
    Tokens(Vec<u32>),
    Stacked(Vec<F>),
}

struct EncoderLayerCache<F> {
    x: Vec<F>,
    attn: AttnCache<F>,
    drop1: Option<Vec<F>>,
    norm1: NormCache<F>,
    h: Vec<F>,
    ffn: FfnCache<F>,
    drop2: Option<Vec<F>>,
    norm2: NormCache<F>,
}

struct EncoderCache<F> {
    source: SourceCache<F>,
    drop: Option<Vec<F>>,
    layers: Vec<EncoderLayerCache<F>>,
}

struct DecoderLayerCache<F> {
    x: Vec<F>,
    self_attn: AttnCache<F>,
    drop1: Option<Vec<F>>,
    norm1: NormCache<F>,
    h1: Vec<F>,
    cross_attn: AttnCache<F>,
    drop2: Option<Vec<F>>,
    norm2: NormCache<F>,
    h2: Vec<F>,
    ffn: FfnCache<F>,
    drop3: Option<Vec<F>>,
    norm3: NormCache<F>,
}

struct DecoderCache<F> {
    tokens: Vec<u32>,
    drop: Option<Vec<F>>,
    layers: Vec<DecoderLayerCache<F>>,
    last: Vec<F>,
}

/// Activations and dropout masks recorded by a forward pass.
pub struct Cache<F> {
    enc: EncoderCache<F>,
    enc_out: EncoderOutput<F>,
    dec: DecoderCache<F>,
    dec_len: usize,
}

/// The caller's key mask, or `token != PAD` when none is given.
fn resolve_mask(tokens: &[u32], mask: Option<&[bool]>) -> Result<Vec<bool>, ModelError> {
    match mask {
        Some(m) if m.len() != tokens.len() => Err(ModelError::ShapeMismatch(format!(
            "mask of {} for {} tokens",
            m.len(),
            tokens.len()
        ))),
        Some(m) => Ok(m.to_vec()),
        None => Ok(tokens.iter().map(|&t| t != PAD).collect()),
    }
}

/// Longest valid prefix over the rows of a `batch x len` mask, at least 1.
fn trimmed_len(mask: &[bool], len: usize) -> usize {
    mask.chunks(len.max(1))
        .map(|r| r.iter().rposition(|&v| v).map_or(0, |p| p + 1))
        .max()
        .unwrap_or(0)
        .max(1)
}

fn take_prefix<T: Copy>(rows: &[T], len: usize, t: usize) -> Vec<T> {
    rows.chunks(len.max(1)).flat_map(|r| r[..t].iter().copied()).collect()
}

fn stacked_positions(frames: usize, stack: usize, len: usize) -> usize {
    (frames / stack).min(len)
}

/// Concatenates `stack` frames per position; rows past the valid count stay zero.
fn stack_frames<F: Scalar>(feats: &[FeatureMatrix], stack: usize, t: usize) -> Vec<F> {
    let dim = feats.first().map_or(0, |f| f.dims()) * stack;
    let mut out = vec![F::zero(); feats.len() * t * dim];
    for (b, f) in feats.iter().enumerate() {
        let valid = stacked_positions(f.frames(), stack, t);
        let src = &f.data()[..valid * dim];
        for (dst, &v) in out[b * t * dim..b * t * dim + valid * dim].iter_mut().zip(src) {
            *dst = F::lit(v as f64);
        }
    }
    out
}

fn add_positions<F: Scalar>(x: &mut [F], t: usize, d: usize) -> Result<(), ModelError> {
    let pe = positional_encoding(t, d)?;
    for row in x.chunks_exact_mut(t * d) {
        for (v, &p) in row.iter_mut().zip(&pe) {
            *v += F::lit(p);
        }
    }
    Ok(())
}

fn embed<F: Scalar>(table: &[F], d: usize, tokens: &[u32]) -> Vec<F> {
    let scale = F::lit((d as f64).sqrt());
    let mut x = Vec::with_capacity(tokens.len() * d);
    for &tok in tokens {
        let row = &table[tok as usize * d..(tok as usize + 1) * d];
        x.extend(row.iter().map(|&v| v * scale));
    }
    x
}

fn embed_backward<F: Scalar>(grad: &mut [F], d: usize, tokens: &[u32], dx: &[F]) {
    let scale = F::lit((d as f64).sqrt());
    for (&tok, row) in tokens.iter().zip(dx.chunks_exact(d)) {
        for (g, &v) in grad[tok as usize * d..(tok as usize + 1) * d].iter_mut().zip(row) {
            *g += v * scale;
        }
    }
}

fn check_tokens(tokens: &[u32], vocab: usize) -> Result<(), ModelError> {
    match tokens.iter().find(|&&t| t as usize >= vocab) {
        Some(t) => Err(ModelError::ShapeMismatch(format!("token {t} outside vocab {vocab}"))),
        None => Ok(()),
    }
}

/// Runs the encoder stack. `len` is the padded sequence length of the batch.
#[allow(clippy::too_many_arguments)]
fn encode_inner<F: Scalar>(
    p: &Params<F>,
    cfg: &ModelConfig,
    input: &EncoderInput,
    mask: Option<&[bool]>,
    batch: usize,
    len: usize,
    trim: bool,
    mut rng: Option<&mut ChaCha8Rng>,
    keep: bool,
) -> Result<(EncoderOutput<F>, Option<EncoderCache<F>>), ModelError> {
    let d = cfg.d_model;
    let (t, mut x, key_valid, source) = match (input, cfg.frontend) {
        (EncoderInput::Tokens(tokens), Frontend::Discrete) => {
            if tokens.len() != batch * len {
                return Err(ModelError::ShapeMismatch(format!(
                    "{} source tokens for batch {batch} x {len}",
                    tokens.len()
                )));
            }
            check_tokens(tokens, cfg.vocab)?;
            let full_mask = resolve_mask(tokens, mask)?;
            let t = if trim { trimmed_len(&full_mask, len) } else { len };
            let trimmed = take_prefix(tokens, len, t);
            let x = embed(p.get(p.layout.source), d, &trimmed);
            let valid = take_prefix(&full_mask, len, t);
            (t, x, valid, SourceCache::Tokens(trimmed))
        }
        (
            EncoderInput::Features(feats),
            Frontend::Continuous {
                feature_dim,
                stack_factor,
            },
        ) => {
            if feats.len() != batch {
                return Err(ModelError::ShapeMismatch(format!("{} feature matrices for batch {batch}", feats.len())));
            }
            if let Some(f) = feats.iter().find(|f| f.dims() != feature_dim) {
                return Err(ModelError::DimMismatch {
                    expected: feature_dim,
                    found: f.dims(),
                });
            }
            let valid_counts: Vec<usize> =
                feats.iter().map(|f| stacked_positions(f.frames(), stack_factor, len)).collect();
            let t = if trim {
                valid_counts.iter().copied().max().unwrap_or(0).max(1)
            } else {
                len
            };
            let stacked = stack_frames::<F>(feats, stack_factor, t);
            let x = linear(&stacked, batch * t, p, p.layout.source, None);
            let valid: Vec<bool> = valid_counts.iter().flat_map(|&v| (0..t).map(move |i| i < v)).collect();
            (t, x, valid, SourceCache::Stacked(stacked))
        }
        _ => {
            return Err(ModelError::ShapeMismatch("encoder input does not match the configured frontend".into()));
        }
    };
    add_positions(&mut x, t, d)?;
    let drop = dropout(&mut x, cfg.dropout, rng.as_deref_mut());
    let shape = AttnShape {
        batch,
        tq: t,
        tk: t,
        d,
        heads: cfg.heads,
    };
    let mask = AttnMask {
        key_valid: key_valid.clone(),
        causal: false,
    };
    let n = batch * t;
    let mut layers = Vec::new();
    for ix in &p.layout.encoder {
        let (mut a, attn) = multi_head_attention(&x, &x, &shape, &mask, p, ix.attn);
        let drop1 = dropout(&mut a, cfg.dropout, rng.as_deref_mut());
        add_into(&mut a, &x);
        let (h, norm1) = layer_norm(&a, d, p, ix.norm1);
        let (mut f, ffn) = feed_forward(&h, n, p, ix.ffn);
        let drop2 = dropout(&mut f, cfg.dropout, rng.as_deref_mut());
        add_into(&mut f, &h);
        let (y, norm2) = layer_norm(&f, d, p, ix.norm2);
        if keep {
            layers.push(EncoderLayerCache {
                x,
                attn,
                drop1,
                norm1,
                h,
                ffn,
                drop2,
                norm2,
            });
        }
        x = y;
    }
    let out = EncoderOutput {
        states: x,
        batch,
        len: t,
        key_valid,
    };
    let cache = keep.then_some(EncoderCache { source, drop, layers });
    Ok((out, cache))
}

/// Runs the decoder on `tokens` (`batch x t` row-major) against `enc`.
fn decode_inner<F: Scalar>(
    p: &Params<F>,
    cfg: &ModelConfig,
    enc: &EncoderOutput<F>,
    tokens: Vec<u32>,
    key_valid: Vec<bool>,
    t: usize,
    mut rng: Option<&mut ChaCha8Rng>,
    keep: bool,
) -> Result<(Vec<F>, Option<DecoderCache<F>>), ModelError> {
    let d = cfg.d_model;
    let batch = enc.batch;
    check_tokens(&tokens, cfg.vocab)?;
    let mut x = embed(p.get(p.layout.target_embed), d, &tokens);
    add_positions(&mut x, t, d)?;
    let drop = dropout(&mut x, cfg.dropout, rng.as_deref_mut());
    let self_shape = AttnShape {
        batch,
        tq: t,
        tk: t,
        d,
        heads: cfg.heads,
    };
    let cross_shape = AttnShape {
        batch,
        tq: t,
        tk: enc.len,
        d,
        heads: cfg.heads,
    };
    let self_mask = AttnMask {
        key_valid: key_valid.clone(),
        causal: true,
    };
    let cross_mask = AttnMask {
        key_valid: enc.key_valid.clone(),
        causal: false,
    };
    let n = batch * t;
    let mut layers = Vec::new();
    for ix in &p.layout.decoder {
        let (mut a, self_attn) = multi_head_attention(&x, &x, &self_shape, &self_mask, p, ix.self_attn);
        let drop1 = dropout(&mut a, cfg.dropout, rng.as_deref_mut());
        add_into(&mut a, &x);
        let (h1, norm1) = layer_norm(&a, d, p, ix.norm1);
        let (mut c, cross_attn) = multi_head_attention(&h1, &enc.states, &cross_shape, &cross_mask, p, ix.cross_attn);
        let drop2 = dropout(&mut c, cfg.dropout, rng.as_deref_mut());
        add_into(&mut c, &h1);
        let (h2, norm2) = layer_norm(&c, d, p, ix.norm2);
        let (mut f, ffn) = feed_forward(&h2, n, p, ix.ffn);
        let drop3 = dropout(&mut f, cfg.dropout, rng.as_deref_mut());
        add_into(&mut f, &h2);
        let (y, norm3) = layer_norm(&f, d, p, ix.norm3);
        if keep {
            layers.push(DecoderLayerCache {
                x,
                self_attn,
                drop1,
                norm1,
                h1,
                cross_attn,
                drop2,
                norm2,
                h2,
                ffn,
                drop3,
                norm3,
            });
        }
        x = y;
    }
    let logits = linear(&x, n, p, p.layout.out_w, Some(p.layout.out_b));
    let cache = keep.then_some(DecoderCache {
        tokens,
        drop,
        layers,
        last: x,
    });
    Ok((logits, cache))
}

/// Encoder pass in eval mode, for decoding.
pub fn encode<F: Scalar>(
    p: &Params<F>,
    cfg: &ModelConfig,
    input: &EncoderInput,
    batch: usize,
    len: usize,
) -> Result<EncoderOutput<F>, ModelError> {
    Ok(encode_inner(p, cfg, input, None, batch, len, true, None, false)?.0)
}

/// Eval-mode logits for the last position of each `prefix` row
/// (`batch x t`), as `batch x vocab`.
pub fn greedy_step_logits<F: Scalar>(
    p: &Params<F>,
    cfg: &ModelConfig,
    enc: &EncoderOutput<F>,
    prefix: &[u32],
    t: usize,
) -> Result<Vec<F>, ModelError> {
    if prefix.len() != enc.batch * t || t == 0 {
        return Err(ModelError::ShapeMismatch(format!("prefix of {} for batch {} x {t}", prefix.len(), enc.batch)));
    }
    let valid = resolve_mask(prefix, None)?;
    let (logits, _) = decode_inner(p, cfg, enc, prefix.to_vec(), valid, t, None, false)?;
    let v = cfg.vocab;
    Ok((0..enc.batch)
        .flat_map(|b| logits[((b * t) + t - 1) * v..((b * t) + t) * v].iter().copied())
        .collect())
}

/// Step-by-step eval decoder. Keys and values of past positions are kept
/// per layer, so each step projects only the new position.
pub struct IncrementalDecoder<'a, F> {
    p: &'a Params<F>,
    cfg: &'a ModelConfig,
    enc: &'a EncoderOutput<F>,
    pe: Vec<f64>,
    cap: usize,
    /// Per layer self-attention keys and values, `batch x cap x d`.
    self_kv: Vec<(Vec<F>, Vec<F>)>,
    /// Per layer cross-attention keys and values over the encoder states.
    cross_kv: Vec<(Vec<F>, Vec<F>)>,
    t: usize,
}

impl<'a, F: Scalar> IncrementalDecoder<'a, F> {
    /// A decoder for up to `max_len` positions.
    pub fn new(p: &'a Params<F>, cfg: &'a ModelConfig, enc: &'a EncoderOutput<F>, max_len: usize) -> Result<Self, ModelError> {
        let cap = max_len.max(1);
        let (d, batch) = (cfg.d_model, enc.batch);
        let ne = batch * enc.len;
        let cross_kv = p
            .layout
            .decoder
            .iter()
            .map(|ix| {
                (
                    linear(&enc.states, ne, p, ix.cross_attn.wk, None),
                    linear(&enc.states, ne, p, ix.cross_attn.wv, None),
                )
            })
            .collect();
        let empty = vec![F::zero(); batch * cap * d];
        Ok(Self {
            p,
            cfg,
            enc,
            pe: positional_encoding(cap, d)?,
            cap,
            self_kv: vec![(empty.clone(), empty); p.layout.decoder.len()],
            cross_kv,
            t: 0,
        })
    }

    /// Positions consumed so far.
    pub fn len(&self) -> usize {
        self.t
    }

    pub fn is_empty(&self) -> bool {
        self.t == 0
    }

    /// Feeds one token per row and returns the `batch x vocab` logits for
    /// the position after it.
    pub fn step(&mut self, tokens: &[u32]) -> Result<Vec<F>, ModelError> {
        let (p, cfg, enc) = (self.p, self.cfg, self.enc);
        let (d, batch) = (cfg.d_model, enc.batch);
        if tokens.len() != batch {
            return Err(ModelError::ShapeMismatch(format!("{} step tokens for batch {batch}", tokens.len())));
        }
        if self.t >= self.cap {
            return Err(ModelError::ShapeMismatch(format!("decoder step {} past max length {}", self.t + 1, self.cap)));
        }
        check_tokens(tokens, cfg.vocab)?;
        let pos = self.t;
        let mut x = embed(p.get(p.layout.target_embed), d, tokens);
        let pe = &self.pe[pos * d..(pos + 1) * d];
        for row in x.chunks_exact_mut(d) {
            for (v, &e) in row.iter_mut().zip(pe) {
                *v += F::lit(e);
            }
        }
        self.t += 1;
        let self_shape = AttnShape {
            batch,
            tq: 1,
            tk: self.t,
            d,
            heads: cfg.heads,
        };
        let cross_shape = AttnShape {
            batch,
            tq: 1,
            tk: enc.len,
            d,
            heads: cfg.heads,
        };
        // Earlier positions are never PAD for live rows; finished rows are
        // ignored by the caller.
        let self_mask = AttnMask {
            key_valid: vec![true; batch * self.t],
            causal: false,
        };
        let cross_mask = AttnMask {
            key_valid: enc.key_valid.clone(),
            causal: false,
        };
        for ((ix, (ks, vs)), (kc, vc)) in p.layout.decoder.iter().zip(&mut self.self_kv).zip(&self.cross_kv) {
            let k_new = linear(&x, batch, p, ix.self_attn.wk, None);
            let v_new = linear(&x, batch, p, ix.self_attn.wv, None);
            for b in 0..batch {
                let at = (b * self.cap + pos) * d;
                ks[at..at + d].copy_from_slice(&k_new[b * d..(b + 1) * d]);
                vs[at..at + d].copy_from_slice(&v_new[b * d..(b + 1) * d]);
            }
            let q = linear(&x, batch, p, ix.self_attn.wq, None);
            let (_, o) = attend(&q, ks, vs, self.cap, &self_shape, &self_mask);
            let mut a = linear(&o, batch, p, ix.self_attn.wo, None);
            add_into(&mut a, &x);
            let (h1, _) = layer_norm(&a, d, p, ix.norm1);
            let q = linear(&h1, batch, p, ix.cross_attn.wq, None);
            let (_, o) = attend(&q, kc, vc, enc.len, &cross_shape, &cross_mask);
            let mut c = linear(&o, batch, p, ix.cross_attn.wo, None);
            add_into(&mut c, &h1);
            let (h2, _) = layer_norm(&c, d, p, ix.norm2);
            let (mut f, _) = feed_forward(&h2, batch, p, ix.ffn);
            add_into(&mut f, &h2);
            x = layer_norm(&f, d, p, ix.norm3).0;
        }
        Ok(linear(&x, batch, p, p.layout.out_w, Some(p.layout.out_b)))
    }
}

/// Teacher-forced forward pass over a batch.
///
/// In train mode dropout masks come from a ChaCha stream seeded with
/// `opts.seed`; eval mode is deterministic and dropout-free.
pub fn forward<F: Scalar>(
    p: &Params<F>,
    cfg: &ModelConfig,
    batch: &Batch,
    opts: ForwardOptions,
) -> Result<ForwardOutput<F>, ModelError> {
    let b = batch.size();
    let len = batch.len;
    if batch.decoder_input.len() != b * len {
        return Err(ModelError::ShapeMismatch(format!(
            "{} decoder tokens for batch {b} x {len}",
            batch.decoder_input.len()
        )));
    }
    let mut rng = match opts.mode {
        Mode::Train => Some(ChaCha8Rng::seed_from_u64(opts.seed)),
        Mode::Eval => None,
    };
    let enc_mask = match batch.encoder {
        EncoderInput::Tokens(_) => Some(batch.encoder_mask.as_slice()),
        EncoderInput::Features(_) => None,
    };
    let (enc_out, enc_cache) =
        encode_inner(p, cfg, &batch.encoder, enc_mask, b, len, opts.trim, rng.as_mut(), opts.keep_cache)?;
    let dec_mask = resolve_mask(&batch.decoder_input, Some(&batch.decoder_mask))?;
    let t = if opts.trim {
        trimmed_len(&dec_mask, len).max(trimmed_len(&batch.target_mask, len))
    } else {
        len
    };
    let tokens = take_prefix(&batch.decoder_input, len, t);
    let valid = take_prefix(&dec_mask, len, t);
    let (logits, dec_cache) = decode_inner(p, cfg, &enc_out, tokens, valid, t, rng.as_mut(), opts.keep_cache)?;
    let cache = match (enc_cache, dec_cache) {
        (Some(enc), Some(dec)) => Some(Cache {
            enc,
            enc_out,
            dec,
            dec_len: t,
        }),
        _ => None,
    };
    Ok(ForwardOutput {
        logits: Logits {
            data: logits,
            batch: b,
            len: t,
            vocab: cfg.vocab,
        },
        cache,
    })
}

/// Decoder targets and mask cut to the first `t` positions of each row.
pub fn targets_for(batch: &Batch, t: usize) -> (Vec<u32>, Vec<bool>) {
    let len = batch.len.max(1);
    let targets = batch.decoder_target.chunks(len).flat_map(|r| r[..t].iter().copied()).collect();
    let mask = batch.target_mask.chunks(len).flat_map(|r| r[..t].iter().copied()).collect();
    (targets, mask)
}

/// Mean cross-entropy over non-PAD target positions.
pub fn loss<F: Scalar>(logits: &Logits<F>, batch: &Batch) -> f64 {
    loss_and_grad(logits, batch).0
}

/// Loss and its gradient with respect to `logits.data`.
pub fn loss_and_grad<F: Scalar>(logits: &Logits<F>, batch: &Batch) -> (f64, Vec<F>) {
    let (targets, mask) = targets_for(batch, logits.len);
    cross_entropy(&logits.data, logits.vocab, &targets, &mask)
}

/// Gradient of the loss with respect to every parameter, given `dlogits`
/// (the loss gradient with respect to the logits of the cached pass).
pub fn backward<F: Scalar>(
    p: &Params<F>,
    cfg: &ModelConfig,
    cache: Option<&Cache<F>>,
    dlogits: &[F],
) -> Result<Params<F>, ModelError> {
    let cache = cache.ok_or(ModelError::MissingCache)?;
    let d = cfg.d_model;
    let batch = cache.enc_out.batch;
    let (te, td) = (cache.enc_out.len, cache.dec_len);
    if dlogits.len() != batch * td * cfg.vocab {
        return Err(ModelError::ShapeMismatch(format!("{} logit gradients", dlogits.len())));
    }
    let mut g = p.zeros_like();
    let lay = &p.layout;
    let nd = batch * td;
    let ne = batch * te;

    let mut dx = linear_backward(&cache.dec.last, nd, dlogits, p, &mut g, lay.out_w, Some(lay.out_b));
    let mut d_enc = vec![F::zero(); ne * d];
    let self_shape = AttnShape {
        batch,
        tq: td,
        tk: td,
        d,
        heads: cfg.heads,
    };
    let cross_shape = AttnShape {
        batch,
        tq: td,
        tk: te,
        d,
        heads: cfg.heads,
    };
    for (ix, c) in lay.decoder.iter().zip(&cache.dec.layers).rev() {
        let dz3 = layer_norm_backward(&dx, d, &c.norm3, p, &mut g, ix.norm3);
        let df = dropout_backward(&dz3, &c.drop3);
        let mut dh2 = feed_forward_backward(&c.h2, nd, &c.ffn, &df, p, &mut g, ix.ffn);
        add_into(&mut dh2, &dz3);
        let dz2 = layer_norm_backward(&dh2, d, &c.norm2, p, &mut g, ix.norm2);
        let dc = dropout_backward(&dz2, &c.drop2);
        let (mut dh1, dmem) = multi_head_attention_backward(
            &c.h1,
            &cache.enc_out.states,
            &cross_shape,
            &c.cross_attn,
            &dc,
            p,
            &mut g,
            ix.cross_attn,
        );
        add_into(&mut d_enc, &dmem);
        add_into(&mut dh1, &dz2);
        let dz1 = layer_norm_backward(&dh1, d, &c.norm1, p, &mut g, ix.norm1);
        let da = dropout_backward(&dz1, &c.drop1);
        let (dq, dkv) = multi_head_attention_backward(&c.x, &c.x, &self_shape, &c.self_attn, &da, p, &mut g, ix.self_attn);
        dx = dz1;
        add_into(&mut dx, &dq);
        add_into(&mut dx, &dkv);
    }
    let demb = dropout_backward(&dx, &cache.dec.drop);
    embed_backward(g.get_mut(lay.target_embed), d, &cache.dec.tokens, &demb);

    let enc_shape = AttnShape {
        batch,
        tq: te,
        tk: te,
        d,
        heads: cfg.heads,
    };
    let mut dx = d_enc;
    for (ix, c) in lay.encoder.iter().zip(&cache.enc.layers).rev() {
        let dz2 = layer_norm_backward(&dx, d, &c.norm2, p, &mut g, ix.norm2);
        let df = dropout_backward(&dz2, &c.drop2);
        let mut dh = feed_forward_backward(&c.h, ne, &c.ffn, &df, p, &mut g, ix.ffn);
        add_into(&mut dh, &dz2);
        let dz1 = layer_norm_backward(&dh, d, &c.norm1, p, &mut g, ix.norm1);
        let da = dropout_backward(&dz1, &c.drop1);
        let (dq, dkv) = multi_head_attention_backward(&c.x, &c.x, &enc_shape, &c.attn, &da, p, &mut g, ix.attn);
        dx = dz1;
        add_into(&mut dx, &dq);
        add_into(&mut dx, &dkv);
    }
    let demb = dropout_backward(&dx, &cache.enc.drop);
    match &cache.enc.source {
        SourceCache::Tokens(tokens) => embed_backward(g.get_mut(lay.source), d, tokens, &demb),
        SourceCache::Stacked(stacked) => {
            linear_backward(stacked, ne, &demb, p, &mut g, lay.source, None);
        }
    }
    Ok(g)
}
