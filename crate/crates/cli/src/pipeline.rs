//! Shared pipeline steps: feature extraction, per-side codebooks, unit
//! caches, and an in-memory toy corpus builder for experiments and tests.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use u2ut_core::audio::{decode_wav, encode_wav, read_wav, AudioBuffer};
use u2ut_core::features::{FeatureConfig, FeatureExtractor, FeatureKind, FeatureMatrix};
use u2ut_core::quantizer::{train_codebook, Codebook, FramePool, KMeansOptions, UnitSequence};
use u2ut_core::seqprep::{dedup, write_units, Example, ManifestRecord, ParallelManifest, Side, SourceData};
use u2ut_core::synth::{generate_pair, split, ToySpec};

/// Features of one side of every record, in manifest order.
pub fn manifest_features(
    manifest: &ParallelManifest,
    side: Side,
    extractor: &FeatureExtractor,
    kind: FeatureKind,
) -> Result<Vec<FeatureMatrix>> {
    manifest
        .records
        .iter()
        .map(|rec| {
            let path = manifest.resolve(rec.path(side));
            let audio = read_wav(&path).with_context(|| format!("reading {}", path.display()))?;
            Ok(extractor.extract(&audio, kind)?)
        })
        .collect()
}

pub fn fit_codebook(features: &[FeatureMatrix], opts: &KMeansOptions) -> Result<Codebook> {
    let pool = FramePool::from_matrices(features)?;
    Ok(train_codebook(&pool, opts)?.0)
}

pub fn quantize_all(cb: &Codebook, features: &[FeatureMatrix]) -> Result<Vec<UnitSequence>> {
    features.iter().map(|f| Ok(cb.quantize(f)?)).collect()
}

/// Unit cache path for a record, relative to the manifest directory.
pub fn units_file(id: &str, side: Side) -> String {
    format!("units/{id}_{}.u2uu", side.name())
}

/// Writes unit files next to the manifest and points the records at them.
pub fn store_units(manifest: &mut ParallelManifest, side: Side, units: &[UnitSequence]) -> Result<()> {
    std::fs::create_dir_all(manifest.base_dir.join("units"))?;
    for (rec, u) in manifest.records.iter_mut().zip(units) {
        let rel = units_file(&rec.id, side);
        let full = manifest.base_dir.join(&rel);
        write_units(u, &full).with_context(|| format!("writing {}", full.display()))?;
        rec.set_units_path(side, rel);
    }
    Ok(())
}

/// Sources as feature matrices, targets as cached units.
pub fn feature_examples(
    manifest: &ParallelManifest,
    extractor: &FeatureExtractor,
    kind: FeatureKind,
    dedup_units: bool,
) -> Result<Vec<Example>> {
    let feats = manifest_features(manifest, Side::Source, extractor, kind)?;
    let targets = manifest.load_units(Side::Target)?;
    Ok(manifest
        .records
        .iter()
        .zip(feats.into_iter().zip(targets))
        .map(|(rec, (f, t))| Example {
            id: rec.id.clone(),
            source: SourceData::Features(f),
            target: if dedup_units { dedup(&t) } else { t },
        })
        .collect())
}

/// Everything needed to build a toy corpus in memory.
#[derive(Debug, Clone)]
pub struct ToySetup {
    pub spec: ToySpec,
    pub pairs: usize,
    pub seed: u64,
    pub fractions: [f64; 3],
    pub unit_features: FeatureConfig,
    pub k: usize,
    /// Also compute source features for the continuous frontend.
    pub input_features: Option<FeatureConfig>,
}

impl ToySetup {
    /// 8 symbols, 80/10/10 split, MFCC units.
    pub fn new(pairs: usize, seed: u64, k: usize) -> Self {
        Self {
            spec: ToySpec::default(),
            pairs,
            seed,
            fractions: [0.8, 0.1, 0.1],
            unit_features: FeatureConfig::mfcc(),
            k,
            input_features: None,
        }
    }
}

/// One split in both encodings.
#[derive(Debug, Clone, Default)]
pub struct SplitData {
    pub units: Vec<Example>,
    /// Same pairs with log-mel sources, when requested.
    pub features: Vec<Example>,
}

#[derive(Debug, Clone)]
pub struct ToyData {
    pub train: SplitData,
    pub dev: SplitData,
    pub test: SplitData,
    pub source_codebook: Codebook,
    pub target_codebook: Codebook,
    pub input_dim: usize,
}

/// Audio as it comes back from a 16-bit WAV file.
fn through_wav(audio: &AudioBuffer) -> AudioBuffer {
    decode_wav(&encode_wav(audio)).expect("encoded WAV decodes")
}

/// Builds the toy corpus the way the file-based commands do (16-bit audio,
/// codebooks trained on the training split, one per side) without touching
/// the disk.
pub fn build_toy_data(setup: &ToySetup) -> Result<ToyData> {
    setup.spec.validate()?;
    let pairs: Vec<_> = (0..setup.pairs).map(|i| generate_pair(&setup.spec, setup.seed, i)).collect();
    let records: Vec<ManifestRecord> = pairs.iter().map(|p| ManifestRecord::new(p.id.clone(), "", "")).collect();
    let [train_m, dev_m, test_m] = split(&ParallelManifest::new(records, PathBuf::new()), setup.fractions, setup.seed)?;
    let index = |m: &ParallelManifest| -> Vec<usize> {
        m.records.iter().map(|r| pairs.iter().position(|p| p.id == r.id).unwrap()).collect()
    };
    let (train_i, dev_i, test_i) = (index(&train_m), index(&dev_m), index(&test_m));

    let unit_fx = FeatureExtractor::new(setup.unit_features.clone())?;
    let src_audio: Vec<AudioBuffer> = pairs.iter().map(|p| through_wav(&p.source_audio)).collect();
    let tgt_audio: Vec<AudioBuffer> = pairs.iter().map(|p| through_wav(&p.target_audio)).collect();
    let src_feats: Vec<FeatureMatrix> = src_audio.iter().map(|a| unit_fx.mfcc(a)).collect::<Result<_, _>>()?;
    let tgt_feats: Vec<FeatureMatrix> = tgt_audio.iter().map(|a| unit_fx.mfcc(a)).collect::<Result<_, _>>()?;

    let opts = |offset: u64| KMeansOptions {
        k: setup.k,
        seed: setup.seed.wrapping_add(offset),
        ..KMeansOptions::default()
    };
    let pick = |all: &[FeatureMatrix], idx: &[usize]| -> Vec<FeatureMatrix> { idx.iter().map(|&i| all[i].clone()).collect() };
    let source_codebook = fit_codebook(&pick(&src_feats, &train_i), &opts(1))?;
    let target_codebook = fit_codebook(&pick(&tgt_feats, &train_i), &opts(2))?;
    let src_units = quantize_all(&source_codebook, &src_feats)?;
    let tgt_units = quantize_all(&target_codebook, &tgt_feats)?;

    let input = match &setup.input_features {
        Some(cfg) => {
            let fx = FeatureExtractor::new(cfg.clone())?;
            Some(src_audio.iter().map(|a| fx.log_mel(a)).collect::<Result<Vec<_>, _>>()?)
        }
        None => None,
    };
    let input_dim = input.as_ref().and_then(|v| v.first()).map_or(0, FeatureMatrix::dims);
    let build = |idx: &[usize]| SplitData {
        units: idx
            .iter()
            .map(|&i| Example {
                id: pairs[i].id.clone(),
                source: SourceData::Units(src_units[i].clone()),
                target: tgt_units[i].clone(),
            })
            .collect(),
        features: match &input {
            Some(feats) => idx
                .iter()
                .map(|&i| Example {
                    id: pairs[i].id.clone(),
                    source: SourceData::Features(feats[i].clone()),
                    target: tgt_units[i].clone(),
                })
                .collect(),
            None => Vec::new(),
        },
    };
    Ok(ToyData {
        train: build(&train_i),
        dev: build(&dev_i),
        test: build(&test_i),
        source_codebook,
        target_codebook,
        input_dim,
    })
}

/// Units-per-sample histogram as `(bin_start, count)`, covering every bin
/// from the shortest to the longest sequence.
pub fn length_histogram(lengths: &[usize], bin_width: usize) -> Vec<(usize, usize)> {
    let (Some(&lo), Some(&hi)) = (lengths.iter().min(), lengths.iter().max()) else {
        return Vec::new();
    };
    let (first, last) = (lo / bin_width, hi / bin_width);
    let mut counts = vec![0; last - first + 1];
    for &l in lengths {
        counts[l / bin_width - first] += 1;
    }
    counts.into_iter().enumerate().map(|(i, c)| ((first + i) * bin_width, c)).collect()
}

pub fn histogram_csv(bins: &[(usize, usize)]) -> String {
    let mut out = String::from("bin_start,count\n");
    for (start, count) in bins {
        out.push_str(&format!("{start},{count}\n"));
    }
    out
}

/// Creates the parent directory of `path` if needed.
pub fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_bins() {
        assert!(length_histogram(&[], 10).is_empty());
        assert_eq!(length_histogram(&[42, 42, 49], 10), [(40, 3)]);
        assert_eq!(length_histogram(&[5, 31, 12], 10), [(0, 1), (10, 1), (20, 0), (30, 1)]);
        assert_eq!(histogram_csv(&[(40, 2)]), "bin_start,count\n40,2\n");
        assert_eq!(histogram_csv(&[]), "bin_start,count\n");
    }

    #[test]
    fn small_toy_corpus_is_consistent() {
        let setup = ToySetup {
            input_features: Some(FeatureConfig::log_mel()),
            ..ToySetup::new(20, 3, 8)
        };
        let data = build_toy_data(&setup).unwrap();
        assert_eq!((data.train.units.len(), data.dev.units.len(), data.test.units.len()), (16, 2, 2));
        assert_eq!(data.train.features.len(), 16);
        assert_eq!(data.input_dim, 80);
        for (u, f) in data.train.units.iter().zip(&data.train.features) {
            assert_eq!(u.id, f.id);
            assert_eq!(u.target, f.target);
            let (SourceData::Units(units), SourceData::Features(feats)) = (&u.source, &f.source) else {
                panic!("wrong source kinds");
            };
            assert_eq!(units.len(), feats.frames());
            assert!(units.ids().iter().all(|&x| x < 8));
        }
        assert_eq!(data.source_codebook.k(), 8);
        let again = build_toy_data(&setup).unwrap();
        assert_eq!(again.train.units, data.train.units);
    }
}
