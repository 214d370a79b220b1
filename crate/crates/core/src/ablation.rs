//! Hyperparameter grid runs: parse a grid file, train and score each row.

use std::fmt::Write as _;
use std::path::PathBuf;

use thiserror::Error;

use crate::eval::{evaluate_units, EvalError};
use crate::model::ModelConfig;
use crate::seqprep::Example;
use crate::train::{train, TrainConfig, TrainError, TrainOptions};

pub const GRID_HEADER: &str = "expt_no,sequence_length,heads,enc_dec_layers,feedforward_dim,learning_rate,epochs";
pub const RESULT_HEADER: &str =
    "expt_no,sequence_length,heads,enc_dec_layers,feedforward_dim,learning_rate,epochs,val_loss,bleu,wer";

#[derive(Debug, Error)]
pub enum GridError {
    #[error("grid header must be `{GRID_HEADER}`, found `{0}`")]
    BadHeader(String),
    #[error("grid file is empty")]
    Empty,
}

/// One configuration to train. Layers apply to encoder and decoder alike.
#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub expt_no: usize,
    pub sequence_length: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    pub learning_rate: f64,
    pub epochs: usize,
}

/// A grid line that could not be used.
#[derive(Debug, Clone, PartialEq)]
pub struct RowError {
    /// 1-based line in the grid file, or the experiment number once parsed.
    pub line: usize,
    pub expt_no: Option<usize>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Grid {
    pub rows: Vec<GridRow>,
    pub errors: Vec<RowError>,
}

fn parse_row(line: &str) -> Result<GridRow, String> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() != 7 {
        return Err(format!("expected 7 fields, found {}", fields.len()));
    }
    let int = |i: usize, name: &str| -> Result<usize, String> {
        match fields[i].parse::<usize>() {
            Ok(0) => Err(format!("{name} must be >= 1")),
            Ok(v) => Ok(v),
            Err(_) => Err(format!("{name}: `{}` is not a positive integer", fields[i])),
        }
    };
    let learning_rate = fields[5]
        .parse::<f64>()
        .ok()
        .filter(|v| *v > 0.0 && v.is_finite())
        .ok_or_else(|| format!("learning_rate: `{}` is not a positive number", fields[5]))?;
    Ok(GridRow {
        expt_no: int(0, "expt_no")?,
        sequence_length: int(1, "sequence_length")?,
        heads: int(2, "heads")?,
        layers: int(3, "enc_dec_layers")?,
        ffn_dim: int(4, "feedforward_dim")?,
        learning_rate,
        epochs: int(6, "epochs")?,
    })
}

/// Parses a grid CSV. Bad rows are collected in `errors` instead of failing
/// the whole file; blank lines and `#` comments are skipped.
pub fn parse_grid(text: &str) -> Result<Grid, GridError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let (_, header) = lines.next().ok_or(GridError::Empty)?;
    let normalized: Vec<&str> = header.split(',').map(str::trim).collect();
    if normalized.join(",") != GRID_HEADER {
        return Err(GridError::BadHeader(header.to_string()));
    }
    let mut grid = Grid::default();
    for (line, text) in lines {
        match parse_row(text) {
            Ok(row) => grid.rows.push(row),
            Err(message) => grid.errors.push(RowError {
                line,
                expt_no: text.split(',').next().and_then(|f| f.trim().parse().ok()),
                message,
            }),
        }
    }
    Ok(grid)
}

/// Everything a grid row does not set.
#[derive(Debug, Clone)]
pub struct AblationSetup {
    /// Supplies d_model, dropout, vocabulary and frontend.
    pub model: ModelConfig,
    /// Supplies batch size, seed and Adam constants.
    pub train: TrainConfig,
    /// Upper bound on the epochs of every row.
    pub epoch_cap: Option<usize>,
    /// Per-row checkpoints and metrics go under `out_dir/expt_<n>`.
    pub out_dir: Option<PathBuf>,
    pub decode_batch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationResult {
    pub row: GridRow,
    /// Epochs actually trained after the cap.
    pub epochs_run: usize,
    /// Lowest dev loss over the run.
    pub val_loss: f64,
    pub bleu: f64,
    pub wer: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AblationReport {
    pub results: Vec<AblationResult>,
    pub errors: Vec<RowError>,
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(RESULT_HEADER);
        out.push('\n');
        for r in &self.results {
            let g = &r.row;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{:.6},{:.4},{:.2}",
                g.expt_no,
                g.sequence_length,
                g.heads,
                g.layers,
                g.ffn_dim,
                g.learning_rate,
                r.epochs_run,
                r.val_loss,
                r.bleu,
                r.wer
            );
        }
        out
    }
}

#[derive(Debug, Error)]
enum RowFailure {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Model and training settings for one grid row.
pub fn row_configs(row: &GridRow, setup: &AblationSetup) -> (ModelConfig, TrainConfig) {
    let model = ModelConfig {
        heads: row.heads,
        enc_layers: row.layers,
        dec_layers: row.layers,
        ffn_dim: row.ffn_dim,
        max_len: row.sequence_length,
        ..setup.model.clone()
    };
    let epochs = setup.epoch_cap.map_or(row.epochs, |c| row.epochs.min(c));
    let train = TrainConfig {
        lr: row.learning_rate,
        epochs,
        seq_len: row.sequence_length,
        ..setup.train.clone()
    };
    (model, train)
}

fn run_row(
    row: &GridRow,
    setup: &AblationSetup,
    train_set: &[Example],
    dev_set: &[Example],
    test_set: &[Example],
) -> Result<AblationResult, RowFailure> {
    let (model_cfg, train_cfg) = row_configs(row, setup);
    let opts = TrainOptions {
        out_dir: setup.out_dir.as_ref().map(|d| d.join(format!("expt_{}", row.expt_no))),
        ..TrainOptions::default()
    };
    let outcome = train(&model_cfg, &train_cfg, train_set, dev_set, opts)?;
    let (report, _) = evaluate_units(
        &outcome.best_params,
        &model_cfg,
        test_set,
        row.sequence_length,
        setup.decode_batch,
    )?;
    Ok(AblationResult {
        row: row.clone(),
        epochs_run: train_cfg.epochs,
        val_loss: outcome.report.best_val_loss,
        bleu: report.bleu.bleu,
        wer: report.wer,
    })
}

/// Trains and scores each grid row in order. A failing row is recorded in
/// `errors` and the grid moves on.
pub fn run_ablation(
    grid: &Grid,
    setup: &AblationSetup,
    train_set: &[Example],
    dev_set: &[Example],
    test_set: &[Example],
    mut on_row: impl FnMut(&GridRow, Result<&AblationResult, &str>),
) -> AblationReport {
    let mut report = AblationReport {
        results: Vec::new(),
        errors: grid.errors.clone(),
    };
    for (i, row) in grid.rows.iter().enumerate() {
        match run_row(row, setup, train_set, dev_set, test_set) {
            Ok(r) => {
                on_row(row, Ok(&r));
                report.results.push(r);
            }
            Err(e) => {
                let message = e.to_string();
                on_row(row, Err(&message));
                report.errors.push(RowError {
                    line: i + 2,
                    expt_no: Some(row.expt_no),
                    message,
                });
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Frontend;
    use crate::quantizer::UnitSequence;
    use crate::seqprep::SourceData;

    #[test]
    fn grid_rows_and_row_errors() {
        let text = format!("{GRID_HEADER}\n1,300,1,3,2048,0.0001,80\n\n# note\n2,300,x,3,1024,0.0001,80\n3,200,1,3,1024,1e-4,80\n4,1,2\n");
        let g = parse_grid(&text).unwrap();
        assert_eq!(g.rows.len(), 2);
        assert_eq!(
            g.rows[0],
            GridRow {
                expt_no: 1,
                sequence_length: 300,
                heads: 1,
                layers: 3,
                ffn_dim: 2048,
                learning_rate: 1e-4,
                epochs: 80,
            }
        );
        assert_eq!(g.rows[1].learning_rate, 1e-4);
        assert_eq!(g.errors.len(), 2);
        assert_eq!((g.errors[0].line, g.errors[0].expt_no), (5, Some(2)));
        assert!(g.errors[0].message.contains("heads"));
        assert_eq!(g.errors[1].line, 7);
    }

    #[test]
    fn header_is_checked() {
        assert!(matches!(parse_grid(""), Err(GridError::Empty)));
        assert!(matches!(parse_grid("a,b\n1,2\n"), Err(GridError::BadHeader(_))));
        assert!(parse_grid(&format!("{GRID_HEADER}\n")).unwrap().rows.is_empty());
    }

    #[test]
    fn zero_and_negative_values_are_rejected() {
        for bad in ["1,300,0,3,2048,0.0001,80", "1,300,1,3,2048,-1,80", "1,300,1,3,2048,0.0001,0", "1,300,1,3,2048,nan,80"] {
            let g = parse_grid(&format!("{GRID_HEADER}\n{bad}\n")).unwrap();
            assert_eq!(g.errors.len(), 1, "{bad}");
        }
    }

    #[test]
    fn empty_grid_gives_header_only_csv() {
        let report = AblationReport::default();
        assert_eq!(report.to_csv(), format!("{RESULT_HEADER}\n"));
    }

    fn toy_examples(n: usize, offset: usize) -> Vec<Example> {
        (0..n)
            .map(|i| {
                let len = 2 + (i + offset) % 3;
                let src: Vec<u32> = (0..len).map(|j| ((i + offset + j) % 4) as u32).collect();
                let tgt: Vec<u32> = src.iter().rev().copied().collect();
                Example {
                    id: format!("x{}", i + offset),
                    source: SourceData::Units(UnitSequence(src)),
                    target: UnitSequence(tgt),
                }
            })
            .collect()
    }

    #[test]
    fn two_row_grid_runs_and_caps_epochs() {
        let text = format!("{GRID_HEADER}\n1,12,1,1,16,0.001,3\n2,10,2,1,8,0.001,1\n");
        let grid = parse_grid(&text).unwrap();
        let setup = AblationSetup {
            model: ModelConfig {
                d_model: 8,
                heads: 1,
                enc_layers: 1,
                dec_layers: 1,
                ffn_dim: 8,
                dropout: 0.0,
                vocab: 7,
                max_len: 12,
                frontend: Frontend::Discrete,
            },
            train: TrainConfig {
                batch_size: 4,
                ..TrainConfig::default()
            },
            epoch_cap: Some(2),
            out_dir: None,
            decode_batch: 8,
        };
        let (tr, dev, test) = (toy_examples(8, 0), toy_examples(3, 10), toy_examples(3, 20));
        let mut seen = Vec::new();
        let report = run_ablation(&grid, &setup, &tr, &dev, &test, |row, r| seen.push((row.expt_no, r.is_ok())));
        assert!(report.errors.is_empty(), "{:?}", report.errors);
        assert_eq!(seen, [(1, true), (2, true)]);
        assert_eq!(report.results[0].epochs_run, 2);
        assert_eq!(report.results[1].epochs_run, 1);
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], RESULT_HEADER);
        assert!(lines[1].starts_with("1,12,1,1,16,0.001,2,"));
        assert!(lines[2].starts_with("2,10,2,1,8,0.001,1,"));
        for l in &lines[1..] {
            assert_eq!(l.split(',').count(), 10);
        }
    }

    #[test]
    fn failing_row_is_recorded_and_grid_continues() {
        // 3 heads do not divide d_model 8
        let text = format!("{GRID_HEADER}\n1,12,3,1,8,0.001,1\n2,12,1,1,8,0.001,1\n");
        let grid = parse_grid(&text).unwrap();
        let setup = AblationSetup {
            model: ModelConfig {
                d_model: 8,
                heads: 1,
                enc_layers: 1,
                dec_layers: 1,
                ffn_dim: 8,
                dropout: 0.0,
                vocab: 7,
                max_len: 12,
                frontend: Frontend::Discrete,
            },
            train: TrainConfig {
                batch_size: 4,
                ..TrainConfig::default()
            },
            epoch_cap: None,
            out_dir: None,
            decode_batch: 8,
        };
        let report = run_ablation(&grid, &setup, &toy_examples(4, 0), &toy_examples(2, 9), &toy_examples(2, 19), |_, _| {});
        assert_eq!(report.results.len(), 1);
        assert_eq!(report.results[0].row.expt_no, 2);
        assert_eq!(report.errors.len(), 1);
        assert_eq!(report.errors[0].expt_no, Some(1));
    }
}
