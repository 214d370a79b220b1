//! Waveform to scored units through the public library API on a small toy corpus.

use std::collections::HashSet;

use u2ut_core::audio::{read_wav, SAMPLE_RATE};
use u2ut_core::eval::EvalReport;
use u2ut_core::features::{frame_count, FeatureConfig, FeatureExtractor, FeatureKind};
use u2ut_core::quantizer::{train_codebook, Codebook, FramePool, KMeansOptions};
use u2ut_core::seqprep::{decode_tokens, encode_source, read_units, write_units, ParallelManifest, Side};
use u2ut_core::synth::{generate, generate_pair, split, ToySpec};

#[test]
fn synth_features_units_and_scores() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let spec = ToySpec::default();
    let corpus = generate(&spec, 12, 5, d).unwrap();

    // splits are disjoint and cover the corpus
    let [train, dev, test] = split(&corpus.manifest, [0.5, 0.25, 0.25], 5).unwrap();
    assert_eq!(train.len() + dev.len() + test.len(), 12);
    let ids: HashSet<&str> = [&train, &dev, &test]
        .iter()
        .flat_map(|m| m.records.iter().map(|r| r.id.as_str()))
        .collect();
    assert_eq!(ids.len(), 12);
    let reloaded = ParallelManifest::load(d.join("all.jsonl")).unwrap();
    assert_eq!(reloaded.records, corpus.manifest.records);

    // audio on disk is the generated audio up to PCM16 rounding
    let extractor = FeatureExtractor::new(FeatureConfig::mfcc()).unwrap();
    let cfg = extractor.config().clone();
    let mut mats = Vec::new();
    for (i, rec) in reloaded.records.iter().enumerate() {
        let audio = read_wav(reloaded.resolve(rec.path(Side::Source))).unwrap();
        assert_eq!(audio.sample_rate(), SAMPLE_RATE);
        let pair = generate_pair(&spec, 5, i);
        assert_eq!(audio.len(), pair.source_audio.len());
        let worst = audio
            .samples()
            .iter()
            .zip(pair.source_audio.samples())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(worst <= 1.0 / 32767.0, "sample error {worst}");
        let m = extractor.extract(&audio, FeatureKind::Mfcc).unwrap();
        assert_eq!(m.frames(), frame_count(audio.len(), cfg.window_samples(), cfg.hop_samples()));
        assert_eq!(m.dims(), 13);
        mats.push(m);
    }

    let pool = FramePool::from_matrices(&mats).unwrap();
    let opts = KMeansOptions { k: 8, seed: 1, ..KMeansOptions::default() };
    let (cb, trace) = train_codebook(&pool, &opts).unwrap();
    assert!(trace.objectives.windows(2).all(|w| w[1] <= w[0]));
    let cb_path = d.join("cb.u2cb");
    cb.save(&cb_path).unwrap();
    let cb = Codebook::load(&cb_path).unwrap();

    let mut refs = Vec::new();
    for (i, m) in mats.iter().enumerate() {
        let units = cb.quantize(m).unwrap();
        assert_eq!(units.len(), m.frames());
        assert!(units.ids().iter().all(|&u| u < 8));
        let path = d.join(format!("u{i}.u2uu"));
        write_units(&units, &path).unwrap();
        assert_eq!(read_units(&path).unwrap(), units);

        let tokens = encode_source(&units, 300);
        assert_eq!(tokens.len(), 300);
        let back = decode_tokens(tokens.tokens());
        assert!(units.ids().starts_with(back.ids()));
        refs.push(units.0);
    }

    let report = EvalReport::from_pairs(&refs, &refs).unwrap();
    assert_eq!(report.bleu.bleu, 100.0);
    assert_eq!(report.wer, 0.0);
    assert_eq!(report.exact_match, 1.0);
}
