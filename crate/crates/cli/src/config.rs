//! Flat `key = value` pipeline configuration.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use u2ut_core::features::{FeatureConfig, FeatureKind};
use u2ut_core::model::{Frontend, ModelConfig};
use u2ut_core::quantizer::{KMeansOptions, MAX_CLUSTERS};
use u2ut_core::seqprep::vocab_size;
use u2ut_core::train::TrainConfig;

/// Model sizes set in the config file; unset fields fall back to the
/// frontend's defaults.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelOverrides {
    pub d_model: Option<usize>,
    pub heads: Option<usize>,
    pub enc_layers: Option<usize>,
    pub dec_layers: Option<usize>,
    pub ffn_dim: Option<usize>,
    pub dropout: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Features the codebooks are trained on.
    pub unit_features: FeatureKind,
    /// Features the continuous frontend reads.
    pub input_features: FeatureKind,
    /// Analysis settings shared by both feature kinds.
    pub features: FeatureConfig,
    /// Mel bands of the continuous-frontend input.
    pub input_mel_filters: usize,
    pub k: usize,
    pub kmeans_max_iter: usize,
    pub kmeans_rel_tol: f64,
    pub dedup: bool,
    pub model: ModelOverrides,
    pub stack_factor: usize,
    pub train: TrainConfig,
    pub train_manifest: Option<PathBuf>,
    pub dev_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    pub source_codebook: PathBuf,
    pub target_codebook: PathBuf,
    pub out_dir: PathBuf,
    pub decode_max_len: usize,
    pub eval_batch: usize,
    pub ablation_epoch_cap: Option<usize>,
    pub ablation_d_model: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            unit_features: FeatureKind::Mfcc,
            input_features: FeatureKind::LogMel,
            features: FeatureConfig::mfcc(),
            input_mel_filters: FeatureConfig::log_mel().num_mel_filters,
            k: 100,
            kmeans_max_iter: KMeansOptions::default().max_iter,
            kmeans_rel_tol: KMeansOptions::default().rel_tol,
            dedup: false,
            model: ModelOverrides::default(),
            stack_factor: 1,
            train: TrainConfig::default(),
            train_manifest: None,
            dev_manifest: None,
            test_manifest: None,
            source_codebook: PathBuf::from("codebook_source.u2uc"),
            target_codebook: PathBuf::from("codebook_target.u2uc"),
            out_dir: PathBuf::from("runs"),
            decode_max_len: u2ut_core::seqprep::SEQ_LEN,
            eval_batch: 50,
            ablation_epoch_cap: None,
            ablation_d_model: None,
        }
    }
}

pub const KEYS: &[&str] = &[
    "seed",
    "k",
    "dedup",
    "features.unit_kind",
    "features.input_kind",
    "features.window_ms",
    "features.hop_ms",
    "features.fft_size",
    "features.num_mel_filters",
    "features.num_ceps",
    "features.preemphasis",
    "features.fmin",
    "features.fmax",
    "features.input_mel_filters",
    "kmeans.max_iter",
    "kmeans.rel_tol",
    "model.d_model",
    "model.heads",
    "model.enc_layers",
    "model.dec_layers",
    "model.ffn_dim",
    "model.dropout",
    "model.stack_factor",
    "train.lr",
    "train.beta1",
    "train.beta2",
    "train.eps",
    "train.epochs",
    "train.batch_size",
    "train.seq_len",
    "data.train",
    "data.dev",
    "data.test",
    "codebook.source",
    "codebook.target",
    "out_dir",
    "eval.max_len",
    "eval.batch_size",
    "ablation.epoch_cap",
    "ablation.d_model",
];

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().ok().with_context(|| format!("{key}: cannot parse {v:?}"))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => bail!("{key}: expected true or false, got {v:?}"),
    }
}

fn parse_kind(key: &str, v: &str) -> Result<FeatureKind> {
    FeatureKind::parse(v).with_context(|| format!("{key}: unknown feature kind {v:?}"))
}

impl PipelineConfig {
    /// Parses config text. Relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut c = Self::default();
        let path = |v: &str| base.join(v);
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, v) = line
                .split_once('=')
                .with_context(|| format!("line {}: expected `key = value`", n + 1))?;
            let (key, v) = (key.trim(), v.trim());
            let m = &mut c.model;
            match key {
                "seed" => c.seed = parse_num(key, v)?,
                "k" => c.k = parse_num(key, v)?,
                "dedup" => c.dedup = parse_bool(key, v)?,
                "features.unit_kind" => c.unit_features = parse_kind(key, v)?,
                "features.input_kind" => c.input_features = parse_kind(key, v)?,
                "features.window_ms" => c.features.window_ms = parse_num(key, v)?,
                "features.hop_ms" => c.features.hop_ms = parse_num(key, v)?,
                "features.fft_size" => c.features.fft_size = parse_num(key, v)?,
                "features.num_mel_filters" => c.features.num_mel_filters = parse_num(key, v)?,
                "features.num_ceps" => c.features.num_ceps = parse_num(key, v)?,
                "features.preemphasis" => c.features.preemphasis = parse_num(key, v)?,
                "features.fmin" => c.features.fmin = parse_num(key, v)?,
                "features.fmax" => c.features.fmax = parse_num(key, v)?,
                "features.input_mel_filters" => c.input_mel_filters = parse_num(key, v)?,
                "kmeans.max_iter" => c.kmeans_max_iter = parse_num(key, v)?,
                "kmeans.rel_tol" => c.kmeans_rel_tol = parse_num(key, v)?,
                "model.d_model" => m.d_model = Some(parse_num(key, v)?),
                "model.heads" => m.heads = Some(parse_num(key, v)?),
                "model.enc_layers" => m.enc_layers = Some(parse_num(key, v)?),
                "model.dec_layers" => m.dec_layers = Some(parse_num(key, v)?),
                "model.ffn_dim" => m.ffn_dim = Some(parse_num(key, v)?),
                "model.dropout" => m.dropout = Some(parse_num(key, v)?),
                "model.stack_factor" => c.stack_factor = parse_num(key, v)?,
                "train.lr" => c.train.lr = parse_num(key, v)?,
                "train.beta1" => c.train.beta1 = parse_num(key, v)?,
                "train.beta2" => c.train.beta2 = parse_num(key, v)?,
                "train.eps" => c.train.eps = parse_num(key, v)?,
                "train.epochs" => c.train.epochs = parse_num(key, v)?,
                "train.batch_size" => c.train.batch_size = parse_num(key, v)?,
                "train.seq_len" => c.train.seq_len = parse_num(key, v)?,
                "data.train" => c.train_manifest = Some(path(v)),
                "data.dev" => c.dev_manifest = Some(path(v)),
                "data.test" => c.test_manifest = Some(path(v)),
                "codebook.source" => c.source_codebook = path(v),
                "codebook.target" => c.target_codebook = path(v),
                "out_dir" => c.out_dir = path(v),
                "eval.max_len" => c.decode_max_len = parse_num(key, v)?,
                "eval.batch_size" => c.eval_batch = parse_num(key, v)?,
                "ablation.epoch_cap" => c.ablation_epoch_cap = Some(parse_num(key, v)?),
                "ablation.d_model" => c.ablation_d_model = Some(parse_num(key, v)?),
                other => bail!("line {}: unknown key {other:?}", n + 1),
            }
        }
        if c.source_codebook.is_relative() {
            c.source_codebook = base.join(&c.source_codebook);
        }
        if c.target_codebook.is_relative() {
            c.target_codebook = base.join(&c.target_codebook);
        }
        if c.out_dir.is_relative() {
            c.out_dir = base.join(&c.out_dir);
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).with_context(|| format!("in config {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        self.input_feature_config().validate()?;
        if !(2..=MAX_CLUSTERS).contains(&self.k) {
            bail!("k must be in 2..={MAX_CLUSTERS}, got {}", self.k);
        }
        if self.kmeans_max_iter == 0 || !(self.kmeans_rel_tol >= 0.0) {
            bail!("kmeans.max_iter must be >= 1 and kmeans.rel_tol >= 0");
        }
        self.train.validate()?;
        if self.decode_max_len == 0 || self.eval_batch == 0 {
            bail!("eval.max_len and eval.batch_size must be >= 1");
        }
        if self.ablation_epoch_cap == Some(0) {
            bail!("ablation.epoch_cap must be >= 1");
        }
        self.model_config(Frontend::Discrete)?;
        self.model_config(Frontend::Continuous {
            feature_dim: 1,
            stack_factor: self.stack_factor,
        })?;
        Ok(())
    }

    /// Settings for the continuous frontend's input features.
    pub fn input_feature_config(&self) -> FeatureConfig {
        match self.input_features {
            FeatureKind::LogMel => FeatureConfig {
                num_mel_filters: self.input_mel_filters,
                ..self.features.clone()
            },
            _ => self.features.clone(),
        }
    }

    pub fn kmeans(&self, seed_offset: u64) -> KMeansOptions {
        KMeansOptions {
            k: self.k,
            seed: self.seed.wrapping_add(seed_offset),
            max_iter: self.kmeans_max_iter,
            rel_tol: self.kmeans_rel_tol,
        }
    }

    /// Frontend defaults with the config's overrides applied.
    pub fn model_config(&self, frontend: Frontend) -> Result<ModelConfig> {
        let base = match frontend {
            Frontend::Discrete => ModelConfig::unit_to_unit(self.k),
            Frontend::Continuous {
                feature_dim,
                stack_factor,
            } => ModelConfig::speech_to_unit(self.k, feature_dim, stack_factor),
        };
        let m = &self.model;
        let cfg = ModelConfig {
            d_model: m.d_model.unwrap_or(base.d_model),
            heads: m.heads.unwrap_or(base.heads),
            enc_layers: m.enc_layers.unwrap_or(base.enc_layers),
            dec_layers: m.dec_layers.unwrap_or(base.dec_layers),
            ffn_dim: m.ffn_dim.unwrap_or(base.ffn_dim),
            dropout: m.dropout.unwrap_or(base.dropout),
            vocab: vocab_size(self.k),
            max_len: self.train.seq_len,
            frontend,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_reference_setup() {
        let c = PipelineConfig::parse("", Path::new("/base")).unwrap();
        assert_eq!(c.k, 100);
        let d = c.model_config(Frontend::Discrete).unwrap();
        assert_eq!((d.d_model, d.enc_layers, d.dec_layers, d.heads, d.ffn_dim), (512, 3, 3, 1, 2048));
        assert_eq!(d.vocab, 103);
        let s = c
            .model_config(Frontend::Continuous {
                feature_dim: 80,
                stack_factor: 1,
            })
            .unwrap();
        assert_eq!((s.d_model, s.enc_layers, s.dec_layers, s.heads), (256, 6, 6, 4));
        assert_eq!(c.train.lr, 1e-4);
        assert_eq!(c.train.batch_size, 25);
        assert_eq!(c.train.epochs, 80);
        assert_eq!(c.out_dir, Path::new("/base/runs"));
    }

    #[test]
    fn keys_are_applied() {
        let text = "seed = 7\nk = 16 # per side\n\nmodel.d_model = 64\nmodel.heads=2\ntrain.lr = 0.001\ndata.train = d/train.jsonl\nfeatures.unit_kind = logmel\n";
        let c = PipelineConfig::parse(text, Path::new("/x")).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.k, 16);
        assert_eq!(c.train.lr, 1e-3);
        assert_eq!(c.unit_features, FeatureKind::LogMel);
        assert_eq!(c.train_manifest.as_deref(), Some(Path::new("/x/d/train.jsonl")));
        let d = c.model_config(Frontend::Discrete).unwrap();
        assert_eq!((d.d_model, d.heads, d.vocab), (64, 2, 19));
    }

    #[test]
    fn unknown_and_invalid_keys_are_rejected() {
        let base = Path::new(".");
        assert!(PipelineConfig::parse("colour = red\n", base).unwrap_err().to_string().contains("unknown key"));
        assert!(PipelineConfig::parse("k = 1\n", base).is_err());
        assert!(PipelineConfig::parse("train.epochs = 0\n", base).is_err());
        assert!(PipelineConfig::parse("model.heads = 3\n", base).is_err());
        assert!(PipelineConfig::parse("train.lr = fast\n", base).is_err());
        assert!(PipelineConfig::parse("just words\n", base).is_err());
        assert!(PipelineConfig::parse("features.hop_ms = 0\n", base).is_err());
    }

    #[test]
    fn every_listed_key_is_accepted() {
        for key in KEYS {
            let v = match *key {
                "dedup" => "false",
                "features.unit_kind" | "features.input_kind" => "mfcc",
                k if k.starts_with("data.") || k.starts_with("codebook.") || k == "out_dir" => "p",
                "train.lr" | "kmeans.rel_tol" | "train.eps" => "0.001",
                "model.dropout" | "train.beta1" | "train.beta2" => "0.5",
                "features.fmin" => "0",
                "features.fmax" => "8000",
                "features.window_ms" => "25",
                "features.hop_ms" => "20",
                "features.fft_size" => "512",
                "features.preemphasis" => "0.97",
                "features.num_mel_filters" => "26",
                "features.num_ceps" => "13",
                "features.input_mel_filters" => "40",
                "model.d_model" => "64",
                "model.heads" => "1",
                "train.seq_len" => "300",
                "k" => "16",
                _ => "2",
            };
            PipelineConfig::parse(&format!("{key} = {v}\n"), Path::new(".")).unwrap_or_else(|e| panic!("{key}: {e:#}"));
        }
    }
}
