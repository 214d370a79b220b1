//! Command implementations behind the `u2ut` binary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use u2ut_core::ablation::{parse_grid, run_ablation, AblationSetup};
use u2ut_core::audio::write_wav;
use u2ut_core::eval::{evaluate_transcripts, greedy_decode_batch, EvalReport, REPORT_CSV_HEADER};
use u2ut_core::features::FeatureExtractor;
use u2ut_core::model::{Frontend, ModelConfig};
use u2ut_core::quantizer::{Codebook, UnitSequence};
use u2ut_core::seqprep::{load_unit_examples, read_units, write_units, Example, ParallelManifest, Side, SourceData};
use u2ut_core::synth::{generate, split, ToySpec};
use u2ut_core::train::{train, Checkpoint, TrainOptions, TrainOutcome};

use crate::config::PipelineConfig;
use crate::pipeline::{
    ensure_parent, feature_examples, fit_codebook, histogram_csv, length_histogram, manifest_features, quantize_all,
    store_units,
};

pub const SPLIT_NAMES: [&str; 3] = ["train", "dev", "test"];

/// Generates a toy corpus under `out` with `all.jsonl` and one manifest per split.
pub fn synth_data(spec: &ToySpec, pairs: usize, seed: u64, fractions: [f64; 3], out: &Path, log: &mut dyn Write) -> Result<()> {
    let corpus = generate(spec, pairs, seed, out)?;
    let splits = split(&corpus.manifest, fractions, seed)?;
    for (name, m) in SPLIT_NAMES.iter().zip(&splits) {
        m.save(out.join(format!("{name}.jsonl")))?;
        writeln!(log, "{name}: {} pairs", m.len())?;
    }
    Ok(())
}

/// Quantizes one side of a manifest, training the codebook first when the
/// codebook file does not exist yet. The manifest is rewritten in place to
/// point at the unit files.
pub fn extract_units(cfg: &PipelineConfig, manifest_path: &Path, side: Side, codebook: Option<&Path>, log: &mut dyn Write) -> Result<()> {
    let mut manifest = ParallelManifest::load(manifest_path)?;
    let fx = FeatureExtractor::new(cfg.features.clone())?;
    let feats = manifest_features(&manifest, side, &fx, cfg.unit_features)?;
    let cb_path = codebook.map(Path::to_path_buf).unwrap_or_else(|| match side {
        Side::Source => cfg.source_codebook.clone(),
        Side::Target => cfg.target_codebook.clone(),
    });
    let cb = if cb_path.exists() {
        Codebook::load(&cb_path).with_context(|| format!("loading codebook {}", cb_path.display()))?
    } else {
        let offset = match side {
            Side::Source => 1,
            Side::Target => 2,
        };
        let cb = fit_codebook(&feats, &cfg.kmeans(offset))?;
        ensure_parent(&cb_path)?;
        cb.save(&cb_path)?;
        writeln!(log, "trained {}-unit codebook -> {}", cb.k(), cb_path.display())?;
        cb
    };
    let units = quantize_all(&cb, &feats)?;
    store_units(&mut manifest, side, &units)?;
    manifest.save(manifest_path)?;
    let total: usize = units.iter().map(UnitSequence::len).sum();
    writeln!(log, "{} {} utterances, {total} units", manifest.len(), side.name())?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrontendKind {
    Discrete,
    Continuous,
}

impl FrontendKind {
    pub fn name(self) -> &'static str {
        match self {
            FrontendKind::Discrete => "discrete",
            FrontendKind::Continuous => "continuous",
        }
    }
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref().with_context(|| format!("config does not set {key}"))
}

/// Loads examples for a manifest in the form the frontend consumes.
pub fn load_examples(cfg: &PipelineConfig, manifest: &ParallelManifest, frontend: FrontendKind) -> Result<Vec<Example>> {
    match frontend {
        FrontendKind::Discrete => Ok(load_unit_examples(manifest, cfg.dedup)?),
        FrontendKind::Continuous => {
            let fx = FeatureExtractor::new(cfg.input_feature_config())?;
            feature_examples(manifest, &fx, cfg.input_features, cfg.dedup)
        }
    }
}

pub fn model_config_for(cfg: &PipelineConfig, frontend: FrontendKind, examples: &[Example]) -> Result<ModelConfig> {
    match frontend {
        FrontendKind::Discrete => cfg.model_config(Frontend::Discrete),
        FrontendKind::Continuous => {
            let feature_dim = match examples.first().map(|e| &e.source) {
                Some(SourceData::Features(f)) => f.dims(),
                _ => bail!("no feature examples to size the frontend"),
            };
            cfg.model_config(Frontend::Continuous {
                feature_dim,
                stack_factor: cfg.stack_factor,
            })
        }
    }
}

/// Trains on the configured train/dev manifests. Output goes to
/// `out_dir/<frontend>`.
pub fn train_command(
    cfg: &PipelineConfig,
    frontend: FrontendKind,
    resume: Option<&Path>,
    interrupt: Option<Arc<AtomicBool>>,
    log: &mut dyn Write,
) -> Result<TrainOutcome> {
    let train_m = ParallelManifest::load(required(&cfg.train_manifest, "data.train")?)?;
    let dev_m = ParallelManifest::load(required(&cfg.dev_manifest, "data.dev")?)?;
    let train_set = load_examples(cfg, &train_m, frontend)?;
    let dev_set = load_examples(cfg, &dev_m, frontend)?;
    let model_cfg = model_config_for(cfg, frontend, &train_set)?;
    let out_dir = cfg.out_dir.join(frontend.name());
    let resume = resume.map(Checkpoint::load).transpose()?;
    writeln!(
        log,
        "training {} model: d_model {}, {}+{} layers, {} heads, ffn {}, {} train / {} dev",
        frontend.name(),
        model_cfg.d_model,
        model_cfg.enc_layers,
        model_cfg.dec_layers,
        model_cfg.heads,
        model_cfg.ffn_dim,
        train_set.len(),
        dev_set.len()
    )?;
    let opts = TrainOptions {
        out_dir: Some(out_dir.clone()),
        resume,
        interrupt,
        on_epoch: Some(Box::new(move |row| {
            eprintln!(
                "epoch {:>3}  train {:.6}  dev {:.6}  {:.1}s",
                row.epoch, row.train_loss, row.val_loss, row.seconds
            );
        })),
        ..TrainOptions::default()
    };
    let outcome = train(&model_cfg, &cfg.train, &train_set, &dev_set, opts)?;
    writeln!(log, "metrics: {}", out_dir.join("metrics.csv").display())?;
    writeln!(log, "best dev loss {:.6}", outcome.report.best_val_loss)?;
    Ok(outcome)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TranslateOutput {
    Units,
    Wav,
}

/// Greedy-decodes every source in the manifest into `out/<id>.u2uu`, and
/// with `Wav` also `out/<id>.wav` rendered from the target codebook's
/// centroids (a listening aid, not a vocoder).
pub fn translate(
    cfg: &PipelineConfig,
    checkpoint: &Path,
    manifest_path: &Path,
    output: TranslateOutput,
    out: &Path,
    log: &mut dyn Write,
) -> Result<usize> {
    let ckpt = Checkpoint::load(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let manifest = ParallelManifest::load(manifest_path)?;
    let frontend = match ckpt.model.frontend {
        Frontend::Discrete => FrontendKind::Discrete,
        Frontend::Continuous { .. } => FrontendKind::Continuous,
    };
    let sources: Vec<SourceData> = match frontend {
        FrontendKind::Discrete => manifest.load_units(Side::Source)?.into_iter().map(SourceData::Units).collect(),
        FrontendKind::Continuous => {
            let fx = FeatureExtractor::new(cfg.input_feature_config())?;
            manifest_features(&manifest, Side::Source, &fx, cfg.input_features)?
                .into_iter()
                .map(SourceData::Features)
                .collect()
        }
    };
    let target_cb = match output {
        TranslateOutput::Wav => Some(
            Codebook::load(&cfg.target_codebook)
                .with_context(|| format!("loading target codebook {}", cfg.target_codebook.display()))?,
        ),
        TranslateOutput::Units => None,
    };
    let resynth = FeatureExtractor::new(cfg.features.clone())?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut written = 0;
    for (chunk, recs) in sources.chunks(cfg.eval_batch).zip(manifest.records.chunks(cfg.eval_batch)) {
        let refs: Vec<&SourceData> = chunk.iter().collect();
        let hyps = greedy_decode_batch(&ckpt.params, &ckpt.model, &refs, cfg.decode_max_len)?;
        for (rec, units) in recs.iter().zip(&hyps) {
            write_units(units, out.join(format!("{}.u2uu", rec.id)))?;
            if let Some(cb) = &target_cb {
                let feats = cb.invert(units)?;
                write_wav(&resynth.resynthesize(&feats), out.join(format!("{}.wav", rec.id)))?;
            }
            written += 1;
        }
    }
    writeln!(log, "translated {written} utterances into {}", out.display())?;
    Ok(written)
}

/// Scores `hyp_dir/<id>.u2uu` against the manifest's target units.
pub fn evaluate_unit_files(hyp_dir: &Path, reference: &Path) -> Result<EvalReport> {
    let manifest = ParallelManifest::load(reference)?;
    let refs: Vec<Vec<u32>> = manifest.load_units(Side::Target)?.into_iter().map(|u| u.0).collect();
    let hyps: Vec<Vec<u32>> = manifest
        .records
        .iter()
        .map(|r| {
            let p = hyp_dir.join(format!("{}.u2uu", r.id));
            read_units(&p).map(|u| u.0).with_context(|| format!("reading {}", p.display()))
        })
        .collect::<Result<_>>()?;
    Ok(EvalReport::from_pairs(&hyps, &refs)?)
}

pub fn evaluate_transcript_files(hyp: &Path, reference: &Path) -> Result<EvalReport> {
    Ok(evaluate_transcripts(hyp, reference)?)
}

pub fn write_report(report: &EvalReport, csv: Option<&Path>, log: &mut dyn Write) -> Result<()> {
    writeln!(log, "{report}")?;
    if let Some(path) = csv {
        ensure_parent(path)?;
        fs::write(path, format!("{REPORT_CSV_HEADER}\n{}\n", report.csv_row()))
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

/// Units-per-sample histogram (bin width 10) for one side of a manifest.
pub fn stats(manifest_path: &Path, side: Side) -> Result<String> {
    let manifest = ParallelManifest::load(manifest_path)?;
    let lengths: Vec<usize> = manifest.load_units(side)?.iter().map(UnitSequence::len).collect();
    Ok(histogram_csv(&length_histogram(&lengths, 10)))
}

/// Runs every grid row on the configured train/dev/test manifests.
pub fn ablate(cfg: &PipelineConfig, grid_path: &Path, epoch_cap: Option<usize>, log: &mut dyn Write) -> Result<String> {
    let text = fs::read_to_string(grid_path).with_context(|| format!("reading grid {}", grid_path.display()))?;
    let grid = parse_grid(&text)?;
    for e in &grid.errors {
        writeln!(log, "grid line {}: {}", e.line, e.message)?;
    }
    let load = |p: &Option<PathBuf>, key: &str| -> Result<Vec<Example>> {
        let m = ParallelManifest::load(required(p, key)?)?;
        Ok(load_unit_examples(&m, cfg.dedup)?)
    };
    let train_set = load(&cfg.train_manifest, "data.train")?;
    let dev_set = load(&cfg.dev_manifest, "data.dev")?;
    let test_set = load(&cfg.test_manifest, "data.test")?;
    let mut model = cfg.model_config(Frontend::Discrete)?;
    if let Some(d) = cfg.ablation_d_model {
        model.d_model = d;
    }
    let setup = AblationSetup {
        model,
        train: cfg.train.clone(),
        epoch_cap: epoch_cap.or(cfg.ablation_epoch_cap),
        out_dir: Some(cfg.out_dir.join("ablation")),
        decode_batch: cfg.eval_batch,
    };
    let report = run_ablation(&grid, &setup, &train_set, &dev_set, &test_set, |row, r| match r {
        Ok(r) => eprintln!(
            "expt {}: val_loss {:.6}  bleu {:.4}  wer {:.2}",
            row.expt_no, r.val_loss, r.bleu, r.wer
        ),
        Err(e) => eprintln!("expt {} failed: {e}", row.expt_no),
    });
    for e in report.errors.iter().skip(grid.errors.len()) {
        writeln!(log, "expt {}: {}", e.expt_no.unwrap_or(0), e.message)?;
    }
    Ok(report.to_csv())
}
