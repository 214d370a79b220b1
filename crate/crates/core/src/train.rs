//! Adam training loop, validation tracking and checkpoints.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binio::{put_f32s, put_u32, read_file, write_atomic, Reader};
use crate::model::{
    backward, forward, init_params, loss_and_grad, ForwardOptions, ModelConfig, ModelError, Params, Scalar, Tensor,
};
use crate::seqprep::{batch_order, Batch, Example};
use crate::FormatError;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"U2UK";
pub const CHECKPOINT_VERSION: u32 = 1;

const CRC64: crc::Crc<u64> = crc::Crc::<u64>::new(&crc::CRC_64_XZ);

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("no {0} examples")]
    EmptyData(&'static str),
    #[error("interrupted; state saved to {}", .checkpoint.display())]
    Interrupted { checkpoint: PathBuf },
    #[error("checkpoint does not match the data: {0}")]
    ResumeMismatch(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Padded sequence length of every batch.
    pub seq_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 80,
            batch_size: 25,
            seed: 0,
            seq_len: crate::seqprep::SEQ_LEN,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) {
            return bad("eps must be > 0".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.seq_len < 2 {
            return bad("seq_len must be >= 2".into());
        }
        Ok(())
    }
}

/// First and second moments per parameter, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub m: Params<F>,
    pub v: Params<F>,
    pub t: u64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(params: &Params<F>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. Arithmetic runs in `f64`.
pub fn adam_step<F: Scalar>(params: &mut Params<F>, grads: &Params<F>, state: &mut AdamState<F>, cfg: &TrainConfig) {
    state.t += 1;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (ti, p) in params.tensors.iter_mut().enumerate() {
        let g = &grads.tensors[ti].data;
        let m = &mut state.m.tensors[ti].data;
        let v = &mut state.v.tensors[ti].data;
        for i in 0..p.data.len() {
            let gi = g[i].as_f64();
            let mi = b1 * m[i].as_f64() + (1.0 - b1) * gi;
            let vi = b2 * v[i].as_f64() + (1.0 - b2) * gi * gi;
            m[i] = F::lit(mi);
            v[i] = F::lit(vi);
            let step = cfg.lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
            p.data[i] = F::lit(p.data[i].as_f64() - step);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    #[serde(with = "f64_bits")]
    pub train_loss: f64,
    #[serde(with = "f64_bits")]
    pub val_loss: f64,
    #[serde(with = "f64_bits")]
    pub seconds: f64,
}

/// JSON has no encoding for infinities or NaN, so checkpoint metadata keeps
/// floats as their raw bit patterns. This also makes the round trip exact.
mod f64_bits {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(v.to_bits())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        u64::deserialize(d).map(f64::from_bits)
    }
}

pub const METRICS_HEADER: &str = "epoch,train_loss,val_loss,seconds";

pub fn metrics_csv(rows: &[EpochRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{},{:.3}\n", r.epoch, r.train_loss, r.val_loss, r.seconds));
    }
    out
}

/// Where training stands: the next batch to run and running statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    /// 1-based epoch in progress (or next to start).
    pub epoch: usize,
    /// Batches of `epoch` already applied.
    pub batch: usize,
    #[serde(with = "f64_bits")]
    pub batch_loss_sum: f64,
    #[serde(with = "f64_bits")]
    pub best_val_loss: f64,
    pub history: Vec<EpochRow>,
    pub train_examples: usize,
}

impl Progress {
    fn start(train_examples: usize) -> Self {
        Self {
            epoch: 1,
            batch: 0,
            batch_loss_sum: 0.0,
            best_val_loss: f64::INFINITY,
            history: Vec::new(),
            train_examples,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: Params<f32>,
    pub adam: AdamState<f32>,
    pub progress: Progress,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    train: TrainConfig,
    step: u64,
    progress: Progress,
}

impl Checkpoint {
    /// Serialized form: magic, version, CRC-64 of the body, then the body
    /// (JSON metadata followed by named f32 tensor records).
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = CheckpointMeta {
            model: self.model.clone(),
            train: self.train.clone(),
            step: self.adam.t,
            progress: self.progress.clone(),
        };
        let meta = serde_json::to_vec(&meta).expect("checkpoint metadata serializes");
        let mut body = Vec::new();
        put_u32(&mut body, meta.len() as u32);
        body.extend_from_slice(&meta);
        let groups = [("param", &self.params), ("adam_m", &self.adam.m), ("adam_v", &self.adam.v)];
        let count: usize = groups.iter().map(|(_, p)| p.tensors.len()).sum();
        put_u32(&mut body, count as u32);
        for (prefix, p) in groups {
            for t in &p.tensors {
                let name = format!("{prefix}/{}", t.name);
                put_u32(&mut body, name.len() as u32);
                body.extend_from_slice(name.as_bytes());
                put_u32(&mut body, t.shape.len() as u32);
                for &d in &t.shape {
                    put_u32(&mut body, d as u32);
                }
                put_f32s(&mut body, &t.data);
            }
        }
        let mut out = Vec::with_capacity(body.len() + 16);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        out.extend_from_slice(&CRC64.checksum(&body).to_le_bytes());
        out.extend_from_slice(&body);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let corrupt = |m: &str| FormatError::CorruptCheckpoint(m.to_string());
        let mut r = Reader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u32().map_err(|_| corrupt("truncated header"))?;
        if version != CHECKPOINT_VERSION {
            return Err(FormatError::VersionUnsupported(version));
        }
        let crc = r.u64().map_err(|_| corrupt("truncated header"))?;
        let body = &bytes[16..];
        if CRC64.checksum(body) != crc {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader::new(body);
        let trunc = |_| corrupt("truncated body");
        let meta_len = r.u32().map_err(trunc)? as usize;
        let meta: CheckpointMeta =
            serde_json::from_slice(r.take(meta_len).map_err(trunc)?).map_err(|e| corrupt(&format!("metadata: {e}")))?;
        meta.model.validate().map_err(|e| corrupt(&e.to_string()))?;
        let mut params = Params::<f32>::zeros(&meta.model).map_err(|e| corrupt(&e.to_string()))?;
        let mut m = params.zeros_like();
        let mut v = params.zeros_like();
        let count = r.u32().map_err(trunc)? as usize;
        let expected = 3 * params.tensors.len();
        if count != expected {
            return Err(corrupt(&format!("{count} tensor records, expected {expected}")));
        }
        for i in 0..count {
            let name_len = r.u32().map_err(trunc)? as usize;
            let name = std::str::from_utf8(r.take(name_len).map_err(trunc)?)
                .map_err(|_| corrupt("tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32().map_err(trunc)? as usize;
            if rank > 4 {
                return Err(corrupt(&format!("tensor {name} has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32().map_err(trunc)? as usize);
            }
            let per = expected / 3;
            let group = match i / per {
                0 => &mut params,
                1 => &mut m,
                _ => &mut v,
            };
            let slot: &mut Tensor<f32> = &mut group.tensors[i % per];
            let prefix = ["param", "adam_m", "adam_v"][i / per];
            if name != format!("{prefix}/{}", slot.name) || shape != slot.shape {
                return Err(corrupt(&format!("unexpected tensor record {name} {shape:?}")));
            }
            slot.data = r.f32_vec(slot.data.len()).map_err(trunc)?;
        }
        r.finish().map_err(|e| corrupt(&e.to_string()))?;
        Ok(Checkpoint {
            model: meta.model,
            train: meta.train,
            params,
            adam: AdamState { m, v, t: meta.step },
            progress: meta.progress,
        })
    }

    /// Atomic write (temp file then rename).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FormatError> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FormatError> {
        Self::from_bytes(&read_file(path.as_ref())?)
    }
}

/// Dropout seed for one batch, independent of how the run was split up.
pub fn batch_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    let mut z = seed ^ ((epoch as u64) << 32) ^ (batch as u64);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Shuffle seed of an epoch: `seed XOR epoch`.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ epoch as u64
}

/// Eval-mode mean token cross-entropy over `examples`.
pub fn dataset_loss<F: Scalar>(params: &Params<F>, cfg: &ModelConfig, examples: &[Example], batch_size: usize, seq_len: usize) -> Result<f64, ModelError> {
    let mut total = 0.0;
    let mut tokens = 0usize;
    for chunk in examples.chunks(batch_size.max(1)) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let batch = Batch::from_examples(&refs, seq_len);
        let out = forward(params, cfg, &batch, ForwardOptions::eval())?;
        let n = batch.target_mask.iter().filter(|&&m| m).count();
        total += crate::model::loss(&out.logits, &batch) * n as f64;
        tokens += n;
    }
    Ok(if tokens == 0 { 0.0 } else { total / tokens as f64 })
}

#[derive(Default)]
pub struct TrainOptions {
    /// Directory for `metrics.csv`, `last.u2uk` and `best.u2uk`.
    pub out_dir: Option<PathBuf>,
    /// Continue from this state instead of a fresh initialization.
    pub resume: Option<Checkpoint>,
    /// Return cleanly after this many completed epochs (state is saved).
    pub stop_after_epoch: Option<usize>,
    /// Checked after every batch; when set, training saves and stops.
    pub interrupt: Option<Arc<AtomicBool>>,
    /// Called after each epoch.
    pub on_epoch: Option<Box<dyn FnMut(&EpochRow)>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub rows: Vec<EpochRow>,
    pub batch_losses: Vec<f64>,
    pub steps: u64,
    pub best_val_loss: f64,
    pub last_checkpoint: Option<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
}

pub struct TrainOutcome {
    pub report: TrainReport,
    pub checkpoint: Checkpoint,
    /// Parameters with the lowest validation loss seen.
    pub best_params: Params<f32>,
}

fn io_err(path: &Path, source: std::io::Error) -> TrainError {
    TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Trains with teacher forcing and Adam, validating after every epoch.
///
/// Epoch `e` (1-based) visits the training set in the order of
/// `batch_order(n, seed ^ e)`; batch `b` of it draws dropout masks from
/// `batch_seed(seed, e, b)`. Both are functions of the position alone, so a
/// resumed run replays the uninterrupted one exactly.
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    train_set: &[Example],
    dev_set: &[Example],
    mut opts: TrainOptions,
) -> Result<TrainOutcome, TrainError> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyData("training"));
    }
    if dev_set.is_empty() {
        return Err(TrainError::EmptyData("validation"));
    }
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let mut ckpt = match opts.resume.take() {
        Some(c) => {
            if c.model != *model_cfg {
                return Err(TrainError::ResumeMismatch("model config differs".into()));
            }
            if c.progress.train_examples != train_set.len() {
                return Err(TrainError::ResumeMismatch(format!(
                    "checkpoint trained on {} examples, got {}",
                    c.progress.train_examples,
                    train_set.len()
                )));
            }
            Checkpoint {
                train: train_cfg.clone(),
                ..c
            }
        }
        None => {
            let params = init_params::<f32>(model_cfg, train_cfg.seed)?;
            Checkpoint {
                model: model_cfg.clone(),
                train: train_cfg.clone(),
                adam: AdamState::new(&params),
                params,
                progress: Progress::start(train_set.len()),
            }
        }
    };
    let best_path = opts.out_dir.as_ref().map(|d| d.join("best.u2uk"));
    let last_path = opts.out_dir.as_ref().map(|d| d.join("last.u2uk"));
    let mut best_params = match best_path.as_ref().filter(|p| p.exists() && ckpt.progress.epoch > 1) {
        Some(p) => Checkpoint::load(p)?.params,
        None => ckpt.params.clone(),
    };
    let mut batch_losses = Vec::new();
    let n = train_set.len();
    let bs = train_cfg.batch_size;
    let seq_len = train_cfg.seq_len;
    let save_last = |c: &Checkpoint| -> Result<(), TrainError> {
        if let Some(p) = &last_path {
            c.save(p)?;
        }
        Ok(())
    };

    while ckpt.progress.epoch <= train_cfg.epochs {
        let epoch = ckpt.progress.epoch;
        let started = Instant::now();
        let order = batch_order(n, epoch_seed(train_cfg.seed, epoch), true);
        let chunks: Vec<&[usize]> = order.chunks(bs).collect();
        for (bi, idx) in chunks.iter().enumerate().skip(ckpt.progress.batch) {
            let refs: Vec<&Example> = idx.iter().map(|&i| &train_set[i]).collect();
            let batch = Batch::from_examples(&refs, seq_len);
            let out = forward(
                &ckpt.params,
                model_cfg,
                &batch,
                ForwardOptions::train(batch_seed(train_cfg.seed, epoch, bi)),
            )?;
            let (loss, dlogits) = loss_and_grad(&out.logits, &batch);
            let grads = backward(&ckpt.params, model_cfg, out.cache.as_ref(), &dlogits)?;
            drop(out);
            adam_step(&mut ckpt.params, &grads, &mut ckpt.adam, train_cfg);
            batch_losses.push(loss);
            ckpt.progress.batch = bi + 1;
            ckpt.progress.batch_loss_sum += loss;
            if opts.interrupt.as_ref().is_some_and(|f| f.load(Ordering::SeqCst)) && bi + 1 < chunks.len() {
                let path = last_path.clone().unwrap_or_else(|| PathBuf::from("interrupted.u2uk"));
                ckpt.save(&path)?;
                return Err(TrainError::Interrupted { checkpoint: path });
            }
        }
        let val_loss = dataset_loss(&ckpt.params.cast::<f64>(), model_cfg, dev_set, bs, seq_len)?;
        let row = EpochRow {
            epoch,
            train_loss: ckpt.progress.batch_loss_sum / chunks.len() as f64,
            val_loss,
            seconds: started.elapsed().as_secs_f64(),
        };
        ckpt.progress.history.push(row.clone());
        ckpt.progress.epoch += 1;
        ckpt.progress.batch = 0;
        ckpt.progress.batch_loss_sum = 0.0;
        if val_loss < ckpt.progress.best_val_loss {
            ckpt.progress.best_val_loss = val_loss;
            best_params = ckpt.params.clone();
            if let Some(p) = &best_path {
                Checkpoint {
                    params: best_params.clone(),
                    ..ckpt.clone()
                }
                .save(p)?;
            }
        }
        save_last(&ckpt)?;
        if let Some(dir) = &opts.out_dir {
            write_atomic(&dir.join("metrics.csv"), metrics_csv(&ckpt.progress.history).as_bytes())?;
        }
        if let Some(cb) = opts.on_epoch.as_mut() {
            cb(&row);
        }
        let interrupted = opts.interrupt.as_ref().is_some_and(|f| f.load(Ordering::SeqCst));
        if interrupted && ckpt.progress.epoch <= train_cfg.epochs {
            let path = last_path.clone().unwrap_or_else(|| PathBuf::from("interrupted.u2uk"));
            ckpt.save(&path)?;
            return Err(TrainError::Interrupted { checkpoint: path });
        }
        if opts.stop_after_epoch.is_some_and(|s| epoch >= s) {
            break;
        }
    }
    let report = TrainReport {
        rows: ckpt.progress.history.clone(),
        batch_losses,
        steps: ckpt.adam.t,
        best_val_loss: ckpt.progress.best_val_loss,
        last_checkpoint: last_path,
        best_checkpoint: best_path,
    };
    Ok(TrainOutcome {
        report,
        checkpoint: ckpt,
        best_params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Frontend;
    use crate::quantizer::UnitSequence;
    use crate::seqprep::SourceData;

    fn scalar_params(v: f64) -> Params<f64> {
        Params {
            tensors: vec![Tensor {
                name: "x".into(),
                shape: vec![1],
                data: vec![v],
            }],
            layout: crate::model::Layout {
                source: 0,
                target_embed: 0,
                encoder: vec![],
                decoder: vec![],
                out_w: 0,
                out_b: 0,
            },
        }
    }

    #[test]
    fn adam_three_steps_match_unrolled_recurrence() {
        let cfg = TrainConfig::default();
        let mut p = scalar_params(0.5);
        let g = scalar_params(1.0);
        let mut st = AdamState::new(&p);
        for _ in 0..3 {
            adam_step(&mut p, &g, &mut st, &cfg);
        }
        // Unrolled by hand for g = 1: m_t = 1 - 0.9^t and v_t = 1 - 0.999^t,
        // so both bias-corrected moments are exactly 1 and each step moves
        // lr / (1 + eps).
        let (mut m, mut v, mut theta) = (0.0f64, 0.0f64, 0.5f64);
        for t in 1..=3 {
            m = 0.9 * m + 0.1;
            v = 0.999 * v + 0.001;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            theta -= 1e-4 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((p.tensors[0].data[0] - theta).abs() < 1e-12);
        assert!((theta - (0.5 - 3.0 * 1e-4 / (1.0 + 1e-8))).abs() < 1e-12);
        assert_eq!(st.t, 3);
    }

    #[test]
    fn adam_first_step_is_lr_sized_and_zero_grad_is_noop() {
        let cfg = TrainConfig::default();
        for g0 in [3.0, -0.02, 1e-3] {
            let mut p = scalar_params(1.0);
            let mut st = AdamState::new(&p);
            adam_step(&mut p, &scalar_params(g0), &mut st, &cfg);
            let moved = (p.tensors[0].data[0] - 1.0).abs();
            assert!((moved - 1e-4).abs() < 1e-9, "{moved}");
        }
        let mut p = scalar_params(1.0);
        let mut st = AdamState::new(&p);
        for _ in 0..10 {
            adam_step(&mut p, &scalar_params(0.0), &mut st, &cfg);
        }
        assert_eq!(p.tensors[0].data[0], 1.0);
    }

    fn toy_examples(n: usize, offset: usize) -> Vec<Example> {
        (0..n)
            .map(|i| {
                let len = 2 + (i + offset) % 4;
                let src: Vec<u32> = (0..len).map(|j| ((i + offset) * 3 + j) as u32 % 5).collect();
                let tgt: Vec<u32> = src.iter().rev().map(|u| (u + 1) % 5).collect();
                Example {
                    id: format!("e{}", i + offset),
                    source: SourceData::Units(UnitSequence(src)),
                    target: UnitSequence(tgt),
                }
            })
            .collect()
    }

    fn small_model() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            ffn_dim: 32,
            dropout: 0.1,
            vocab: 8,
            max_len: 12,
            frontend: Frontend::Discrete,
        }
    }

    fn small_train(epochs: usize) -> TrainConfig {
        TrainConfig {
            lr: 3e-3,
            epochs,
            batch_size: 4,
            seed: 9,
            seq_len: 12,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_rejected_and_steps_counted() {
        let tr = toy_examples(12, 0);
        let dev = toy_examples(4, 100);
        assert!(matches!(
            train(&small_model(), &small_train(0), &tr, &dev, TrainOptions::default()),
            Err(TrainError::InvalidConfig(_))
        ));
        let out = train(&small_model(), &small_train(1), &tr, &dev, TrainOptions::default()).unwrap();
        assert_eq!(out.report.steps, 3);
        assert_eq!(out.report.rows.len(), 1);
        let mean = out.report.batch_losses.iter().sum::<f64>() / 3.0;
        assert!((out.report.rows[0].train_loss - mean).abs() < 1e-12);
    }

    #[test]
    fn runs_are_reproducible_and_resume_is_exact() {
        let tr = toy_examples(10, 0);
        let dev = toy_examples(3, 50);
        let full = train(&small_model(), &small_train(4), &tr, &dev, TrainOptions::default()).unwrap();
        let again = train(&small_model(), &small_train(4), &tr, &dev, TrainOptions::default()).unwrap();
        let losses = |r: &TrainReport| r.rows.iter().map(|r| (r.train_loss, r.val_loss)).collect::<Vec<_>>();
        assert_eq!(losses(&full.report), losses(&again.report));
        assert_eq!(full.checkpoint.params, again.checkpoint.params);

        let dir = tempfile::tempdir().unwrap();
        let half = train(
            &small_model(),
            &small_train(4),
            &tr,
            &dev,
            TrainOptions {
                out_dir: Some(dir.path().to_path_buf()),
                stop_after_epoch: Some(2),
                ..TrainOptions::default()
            },
        )
        .unwrap();
        assert_eq!(half.report.rows.len(), 2);
        let ckpt = Checkpoint::load(dir.path().join("last.u2uk")).unwrap();
        assert_eq!(ckpt.progress.epoch, 3);
        let resumed = train(
            &small_model(),
            &small_train(4),
            &tr,
            &dev,
            TrainOptions {
                resume: Some(ckpt),
                ..TrainOptions::default()
            },
        )
        .unwrap();
        assert_eq!(resumed.checkpoint.params, full.checkpoint.params);
        assert_eq!(resumed.checkpoint.adam, full.checkpoint.adam);
        assert_eq!(losses(&resumed.report), losses(&full.report));
    }

    #[test]
    fn interrupt_mid_epoch_then_resume_matches() {
        let tr = toy_examples(10, 0);
        let dev = toy_examples(3, 50);
        let full = train(&small_model(), &small_train(2), &tr, &dev, TrainOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let flag = Arc::new(AtomicBool::new(true));
        let err = train(
            &small_model(),
            &small_train(2),
            &tr,
            &dev,
            TrainOptions {
                out_dir: Some(dir.path().to_path_buf()),
                interrupt: Some(flag),
                ..TrainOptions::default()
            },
        )
        .err()
        .unwrap();
        let path = match err {
            TrainError::Interrupted { checkpoint } => checkpoint,
            other => panic!("{other}"),
        };
        let ckpt = Checkpoint::load(&path).unwrap();
        assert_eq!((ckpt.progress.epoch, ckpt.progress.batch), (1, 1));
        let resumed = train(
            &small_model(),
            &small_train(2),
            &tr,
            &dev,
            TrainOptions {
                resume: Some(ckpt),
                ..TrainOptions::default()
            },
        )
        .unwrap();
        assert_eq!(resumed.checkpoint.params, full.checkpoint.params);
    }

    #[test]
    fn checkpoint_round_trip_preserves_logits() {
        let tr = toy_examples(8, 0);
        let dev = toy_examples(2, 20);
        let out = train(&small_model(), &small_train(1), &tr, &dev, TrainOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.u2uk");
        out.checkpoint.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, out.checkpoint);
        let refs: Vec<&Example> = dev.iter().collect();
        let batch = Batch::from_examples(&refs, 12);
        let a = forward(&out.checkpoint.params, &small_model(), &batch, ForwardOptions::eval()).unwrap();
        let b = forward(&back.params, &back.model, &batch, ForwardOptions::eval()).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn damaged_checkpoints_are_rejected() {
        let params = init_params::<f32>(&small_model(), 1).unwrap();
        let ckpt = Checkpoint {
            model: small_model(),
            train: small_train(1),
            adam: AdamState::new(&params),
            params,
            progress: Progress::start(3),
        };
        let bytes = ckpt.to_bytes();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ckpt);
        for cut in [bytes.len() - 1, bytes.len() / 2, 10] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(FormatError::CorruptCheckpoint(_))));
        }
        let mut flipped = bytes.clone();
        flipped[bytes.len() / 2] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(FormatError::CorruptCheckpoint(_))));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&v2), Err(FormatError::VersionUnsupported(2))));
        assert!(matches!(Checkpoint::from_bytes(b"NOPE...."), Err(FormatError::BadMagic { .. })));
    }

    #[test]
    fn metrics_csv_layout() {
        let rows = vec![EpochRow {
            epoch: 1,
            train_loss: 0.5,
            val_loss: 0.25,
            seconds: 1.23456,
        }];
        assert_eq!(metrics_csv(&rows), "epoch,train_loss,val_loss,seconds\n1,0.5,0.25,1.235\n");
    }
}
