//! End-to-end runs of the `u2ut` binary on a small toy corpus.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use u2ut_core::audio::{read_wav, SAMPLE_RATE};
use u2ut_core::eval::evaluate_transcript_text;
use u2ut_core::seqprep::{read_units, ParallelManifest, Side};

fn u2ut(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_u2ut"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn u2ut")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = u2ut(args, cwd);
    assert!(
        out.status.success(),
        "u2ut {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const CONFIG: &str = "seed = 3
k = 8
data.train = data/train.jsonl
data.dev = data/dev.jsonl
data.test = data/test.jsonl
codebook.source = cb/source.u2cb
codebook.target = cb/target.u2cb
model.d_model = 32
model.heads = 1
model.enc_layers = 1
model.dec_layers = 1
model.ffn_dim = 64
train.epochs = 2
train.batch_size = 8
eval.max_len = 80
out_dir = runs
";

/// Synthesizes 40 pairs and extracts units for every split and side.
fn prepared(dir: &Path) {
    ok(&["synth-data", "--pairs", "40", "--seed", "3", "--out", "data"], dir);
    fs::write(dir.join("u2ut.conf"), CONFIG).unwrap();
    for split in ["train", "dev", "test"] {
        for side in ["source", "target"] {
            let m = format!("data/{split}.jsonl");
            let cb = format!("cb/{side}.u2cb");
            ok(
                &["extract-units", "--config", "u2ut.conf", "--manifest", &m, "--side", side, "--codebook", &cb],
                dir,
            );
        }
    }
}

#[test]
fn synth_data_arguments() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = u2ut(&["synth-data", "--pairs", "10", "--seed", "1", "--out", "toy"], d);
    assert_eq!(out.status.code(), Some(0));
    let total: usize = ["train", "dev", "test"]
        .iter()
        .map(|s| ParallelManifest::load(d.join(format!("toy/{s}.jsonl"))).unwrap().len())
        .sum();
    assert_eq!(total, 10);

    let missing = u2ut(&["synth-data", "--pairs", "10"], d);
    assert_eq!(missing.status.code(), Some(2));

    let zero = u2ut(&["synth-data", "--pairs", "0", "--out", "z"], d);
    assert_eq!(zero.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&zero.stderr).contains("pairs must be ≥ 1"));
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = u2ut(&["train", "--config", "x.conf", "--frontend", "analog"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(u2ut(&["no-such-command"], dir.path()).status.code(), Some(2));
}

#[test]
fn extract_units_is_idempotent_and_sides_are_separate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepared(d);
    let manifest = ParallelManifest::load(d.join("data/train.jsonl")).unwrap();
    let before: Vec<Vec<u8>> = manifest
        .records
        .iter()
        .map(|r| fs::read(manifest.resolve(r.units_path(Side::Target).unwrap())).unwrap())
        .collect();
    let cb_before = fs::read(d.join("cb/target.u2cb")).unwrap();
    ok(
        &[
            "extract-units",
            "--config",
            "u2ut.conf",
            "--manifest",
            "data/train.jsonl",
            "--side",
            "target",
            "--codebook",
            "cb/target.u2cb",
        ],
        d,
    );
    let after: Vec<Vec<u8>> = manifest
        .records
        .iter()
        .map(|r| fs::read(manifest.resolve(r.units_path(Side::Target).unwrap())).unwrap())
        .collect();
    assert_eq!(before, after);
    assert_eq!(fs::read(d.join("cb/target.u2cb")).unwrap(), cb_before);
    assert_ne!(fs::read(d.join("cb/source.u2cb")).unwrap(), cb_before);
}

#[test]
fn train_translate_evaluate_round() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepared(d);
    ok(&["train", "--config", "u2ut.conf"], d);
    let metrics = fs::read_to_string(d.join("runs/discrete/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    assert!(metrics.starts_with("epoch,train_loss,val_loss,seconds\n"));

    // identical runs give identical losses
    ok(&["train", "--config", "u2ut.conf"], d);
    let again = fs::read_to_string(d.join("runs/discrete/metrics.csv")).unwrap();
    let losses = |s: &str| s.lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect::<Vec<_>>();
    assert_eq!(losses(&metrics), losses(&again));

    ok(
        &[
            "translate",
            "--config",
            "u2ut.conf",
            "--checkpoint",
            "runs/discrete/best.u2uk",
            "--manifest",
            "data/test.jsonl",
            "--out",
            "wav",
            "--out-dir",
            "hyp",
        ],
        d,
    );
    let test = ParallelManifest::load(d.join("data/test.jsonl")).unwrap();
    for rec in &test.records {
        read_units(d.join(format!("hyp/{}.u2uu", rec.id))).unwrap();
        let audio = read_wav(d.join(format!("hyp/{}.wav", rec.id))).unwrap();
        assert_eq!(audio.sample_rate(), SAMPLE_RATE);
    }
    let units = fs::read_dir(d.join("hyp")).unwrap().filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "u2uu").count();
    assert_eq!(units, test.len());

    let report = ok(
        &["evaluate", "--mode", "units", "--hyp", "hyp", "--ref", "data/test.jsonl", "--csv", "report.csv"],
        d,
    );
    assert!(report.contains("BLEU = "));
    let csv = fs::read_to_string(d.join("report.csv")).unwrap();
    assert!(csv.starts_with("samples,bleu,p1,p2,p3,p4,brevity_penalty,"));
}

#[test]
fn reference_units_score_one_hundred() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepared(d);
    let test = ParallelManifest::load(d.join("data/test.jsonl")).unwrap();
    fs::create_dir(d.join("same")).unwrap();
    for rec in &test.records {
        fs::copy(test.resolve(rec.units_path(Side::Target).unwrap()), d.join(format!("same/{}.u2uu", rec.id))).unwrap();
    }
    let out = ok(&["evaluate", "--mode", "units", "--hyp", "same", "--ref", "data/test.jsonl"], d);
    assert!(out.contains("BLEU = 100.0000"), "{out}");
    assert!(out.contains("BP = 1.0000"), "{out}");
}

#[test]
fn missing_checkpoint_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepared(d);
    let out = u2ut(
        &["translate", "--checkpoint", "nowhere.u2uk", "--manifest", "data/test.jsonl", "--out-dir", "h"],
        d,
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere.u2uk"));
}

#[test]
fn stats_histograms() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepared(d);
    let csv = ok(&["stats", "--manifest", "data/train.jsonl", "--side", "target"], d);
    let counts: Vec<usize> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(counts.iter().sum::<usize>(), 32);
    assert!(csv.lines().skip(1).all(|l| l.split(',').next().unwrap().parse::<usize>().unwrap() % 10 == 0));

    fs::write(d.join("empty.jsonl"), "").unwrap();
    ok(&["stats", "--manifest", "empty.jsonl", "--out", "stats/empty.csv"], d);
    assert_eq!(fs::read_to_string(d.join("stats/empty.csv")).unwrap(), "bin_start,count\n");
}

#[test]
fn ablate_records_bad_rows_and_continues() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepared(d);
    fs::write(
        d.join("grid.csv"),
        "expt_no,sequence_length,heads,enc_dec_layers,feedforward_dim,learning_rate,epochs\n\
         1,80,1,1,64,0.001,3\n\
         2,80,three,1,64,0.001,3\n\
         3,80,2,1,32,0.001,1\n",
    )
    .unwrap();
    let out = u2ut(&["ablate", "--grid", "grid.csv", "--config", "u2ut.conf", "--epoch-cap", "2"], d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("grid line 3"));
    let csv = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[0][0], rows[0][6]), ("1", "2"));
    assert_eq!((rows[1][0], rows[1][6]), ("3", "1"));
    assert!(rows.iter().all(|r| r.len() == 10));
}

#[test]
fn transcripts_through_files_match_the_direct_call() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("h.txt"), "the cat sat on the mat\n").unwrap();
    fs::write(d.join("r.txt"), "the cat is on the mat\n").unwrap();
    ok(
        &["evaluate", "--mode", "transcripts", "--hyp", "h.txt", "--ref", "r.txt", "--csv", "r.csv"],
        d,
    );
    let direct = evaluate_transcript_text("the cat sat on the mat\n", "the cat is on the mat\n").unwrap();
    let csv = fs::read_to_string(d.join("r.csv")).unwrap();
    let row: Vec<f64> = csv.lines().nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(row[1], direct.bleu.bleu);
    assert_eq!(row[9], direct.wer);
}
