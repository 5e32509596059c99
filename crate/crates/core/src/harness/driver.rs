//! Certification driver and certified-accuracy reporting: run the
//! smoothed classifier over an evaluation set, stream one TSV row per
//! example, and aggregate records into certified-accuracy tables.

use super::checkpoint::Checkpoint;
use super::config::{Mode, ReportConfig, RunConfig};
use super::data::load_dataset;
use crate::corruption::ImageTensor;
use crate::error::{Error, Result};
use crate::model::{InferenceSession, ModelParams};
use crate::numerics::RngStream;
use crate::smoothing::{BaseClassifier, CertResult, SmoothedClassifier};
use rayon::prelude::*;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

const DOMAIN_CERTIFY: u64 = 100;

/// A trained model exposed as a black-box base classifier.
pub struct ModelBaseClassifier<'a> {
    params: &'a ModelParams<f32>,
}

impl<'a> ModelBaseClassifier<'a> {
    pub fn new(params: &'a ModelParams<f32>) -> Self {
        ModelBaseClassifier { params }
    }
}

impl BaseClassifier for ModelBaseClassifier<'_> {
    fn num_classes(&self) -> usize {
        self.params.config().num_classes
    }

    fn predict_batch(&self, images: &[ImageTensor]) -> Result<Vec<usize>> {
        let mut session = InferenceSession::new(self.params);
        images.iter().map(|im| session.classify_argmax(im)).collect()
    }
}

pub const TSV_HEADER: &str = "idx\tlabel\tpredict\tradius\tcorrect\ttime";

fn tsv_row(r: &CertResult) -> String {
    format!(
        "{}\t{}\t{}\t{:.4}\t{}\t{:.3}",
        r.example_id,
        r.label,
        r.prediction.map_or(-1, |c| c as i64),
        r.radius,
        u8::from(r.correct),
        r.seconds
    )
}

/// Parse a results TSV produced by [`run_certify`].
pub fn read_results_tsv(path: &Path) -> Result<Vec<CertResult>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 {
            if line != TSV_HEADER {
                return Err(Error::format(0, format!("unexpected TSV header: {line}")));
            }
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(Error::format(
                lineno as u64,
                format!("expected 6 fields, got {}", fields.len()),
            ));
        }
        let parse_err = |what: &str| Error::format(lineno as u64, format!("bad {what}: {line}"));
        let idx: usize = fields[0].parse().map_err(|_| parse_err("idx"))?;
        let label: usize = fields[1].parse().map_err(|_| parse_err("label"))?;
        let predict: i64 = fields[2].parse().map_err(|_| parse_err("predict"))?;
        let radius: f64 = fields[3].parse().map_err(|_| parse_err("radius"))?;
        let correct: u8 = fields[4].parse().map_err(|_| parse_err("correct"))?;
        let seconds: f64 = fields[5].parse().map_err(|_| parse_err("time"))?;
        rows.push(CertResult {
            example_id: idx,
            label,
            prediction: (predict >= 0).then_some(predict as usize),
            radius,
            correct: correct != 0,
            seconds,
            failed: false,
        });
    }
    Ok(rows)
}

/// Certify every selected example of the evaluation set and stream the
/// records to `<out_dir>/certify.tsv`. Examples are processed in index
/// order; certification is parallel across examples within each chunk,
/// and rows are written in example order regardless of completion order.
pub fn run_certify(cfg: &RunConfig) -> Result<Vec<CertResult>> {
    cfg.validate_for(Mode::Certify)?;
    let cc = cfg.certify.as_ref().unwrap();
    let ds = load_dataset(cfg.data.test.as_ref().unwrap())?;
    if ds.num_classes != cfg.model.num_classes {
        return Err(Error::config(format!(
            "dataset has {} classes, model expects {}",
            ds.num_classes, cfg.model.num_classes
        )));
    }

    let ckpt = Checkpoint::load(cfg.init_from.as_ref().unwrap())?;
    if ckpt.meta.model != cfg.model {
        return Err(Error::config(
            "checkpoint model configuration differs from the [model] section",
        ));
    }
    let params = ckpt.to_params()?;

    let selected: Vec<usize> = (0..ds.len())
        .step_by(cc.stride)
        .take(cc.max_examples.unwrap_or(usize::MAX))
        .collect();

    let dir = cfg.out_dir();
    std::fs::create_dir_all(&dir)?;
    let out_path = dir.join("certify.tsv");
    let mut out = std::io::BufWriter::new(std::fs::File::create(&out_path)?);
    writeln!(out, "{TSV_HEADER}")?;

    let run = || -> Result<Vec<CertResult>> {
        let base = ModelBaseClassifier::new(&params);
        let sc = SmoothedClassifier::new(&base, cc.sigma)?;
        let cp = cc.confidence();
        let mut results = Vec::with_capacity(selected.len());
        // chunked so rows stream out in order while examples within a
        // chunk run in parallel
        for chunk in selected.chunks(32.max(rayon::current_num_threads())) {
            let chunk_results: Vec<CertResult> = chunk
                .par_iter()
                .map(|&idx| {
                    let start = Instant::now();
                    let rng = RngStream::derive(cfg.seed, &[DOMAIN_CERTIFY, idx as u64]);
                    match sc.certify(&ds.images[idx], &cp, cc.batch, &rng) {
                        Ok(outcome) => CertResult::from_outcome(
                            idx,
                            ds.labels[idx],
                            &outcome,
                            start.elapsed().as_secs_f64(),
                        ),
                        Err(err) => {
                            eprintln!("certify: example {idx} failed: {err}");
                            CertResult::failure(idx, ds.labels[idx], start.elapsed().as_secs_f64())
                        }
                    }
                })
                .collect();
            results.extend(chunk_results);
        }
        Ok(results)
    };

    let results = match cc.workers {
        Some(w) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(w)
                .build()
                .map_err(|e| Error::config(format!("worker pool: {e}")))?;
            pool.install(run)?
        }
        None => run()?,
    };

    for r in &results {
        writeln!(out, "{}", tsv_row(r))?;
    }
    out.flush()?;
    Ok(results)
}

/// Certified accuracy over a radius grid, grouped under one sigma.
#[derive(Debug, Clone, PartialEq)]
pub struct CertTable {
    pub sigma: f64,
    pub radii: Vec<f64>,
    pub accuracy: Vec<f64>,
    pub n_examples: usize,
}

/// Fraction of records that are correct AND certified at radius >= r, per
/// grid radius. Abstentions count against the accuracy. An empty record
/// list yields an explicit all-zero table.
pub fn certified_accuracy(records: &[CertResult], radii: &[f64], sigma: f64) -> Result<CertTable> {
    if radii.is_empty() {
        return Err(Error::domain("radius grid must be nonempty"));
    }
    let n = records.len();
    let accuracy = radii
        .iter()
        .map(|&r| {
            if n == 0 {
                0.0
            } else {
                let hits = records.iter().filter(|rec| rec.correct && rec.radius >= r).count();
                hits as f64 / n as f64
            }
        })
        .collect();
    Ok(CertTable { sigma, radii: radii.to_vec(), accuracy, n_examples: n })
}

/// Build the report: an aligned text table and a machine-readable CSV of
/// (sigma, radius, certified_accuracy).
pub fn run_report(cfg: &RunConfig) -> Result<(String, String)> {
    cfg.validate_for(Mode::Report)?;
    let rc: &ReportConfig = cfg.report.as_ref().unwrap();

    let mut tables = Vec::new();
    for input in &rc.inputs {
        let records = read_results_tsv(&input.tsv)?;
        tables.push(certified_accuracy(&records, &rc.radii, input.sigma)?);
    }

    let mut text = String::new();
    text.push_str(&format!("{:>8} {:>8} |", "sigma", "n"));
    for r in &rc.radii {
        text.push_str(&format!(" {:>8}", format!("r={r}")));
    }
    text.push('\n');
    let width = text.lines().next().map(|l| l.len()).unwrap_or(0);
    text.push_str(&"-".repeat(width));
    text.push('\n');
    for t in &tables {
        text.push_str(&format!("{:>8} {:>8} |", t.sigma, t.n_examples));
        for a in &t.accuracy {
            text.push_str(&format!(" {:>8.4}", a));
        }
        text.push('\n');
    }

    let mut csv = String::from("sigma,radius,certified_accuracy\n");
    for t in &tables {
        for (r, a) in t.radii.iter().zip(&t.accuracy) {
            csv.push_str(&format!("{},{},{}\n", t.sigma, r, a));
        }
    }

    if let Some(path) = &rc.csv_out {
        let full: PathBuf = if path.is_absolute() {
            path.clone()
        } else {
            cfg.out_dir().join(path)
        };
        if let Some(parent) = full.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&full, &csv)?;
    }
    Ok((text, csv))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(radius: f64, correct: bool) -> CertResult {
        CertResult {
            example_id: 0,
            label: 0,
            prediction: if correct { Some(0) } else { None },
            radius,
            correct,
            seconds: 0.0,
            failed: false,
        }
    }

    #[test]
    fn certified_accuracy_counts() {
        let records: Vec<CertResult> = (0..10).map(|_| record(1.0, true)).collect();
        let t = certified_accuracy(&records, &[0.5, 1.0, 1.5], 0.25).unwrap();
        assert_eq!(t.accuracy, vec![1.0, 1.0, 0.0]);

        let abstained: Vec<CertResult> = (0..5).map(|_| record(0.0, false)).collect();
        let t = certified_accuracy(&abstained, &[0.0, 0.5], 0.25).unwrap();
        assert_eq!(t.accuracy, vec![0.0, 0.0]);
    }

    #[test]
    fn certified_accuracy_matches_brute_force_recount() {
        let mut rng = RngStream::new(5, 0);
        let records: Vec<CertResult> = (0..200)
            .map(|i| {
                let mut r = record(rng.next_uniform() * 2.0, rng.next_uniform() < 0.6);
                r.example_id = i;
                r
            })
            .collect();
        let radii = [0.0, 0.25, 0.5, 1.0, 1.9];
        let t = certified_accuracy(&records, &radii, 0.5).unwrap();
        for (ri, &r) in radii.iter().enumerate() {
            let mut count = 0usize;
            for rec in &records {
                if rec.correct && rec.radius >= r {
                    count += 1;
                }
            }
            assert_eq!(t.accuracy[ri], count as f64 / records.len() as f64);
        }
    }

    #[test]
    fn certified_accuracy_is_monotone_nonincreasing() {
        let mut rng = RngStream::new(6, 0);
        for _ in 0..100 {
            let records: Vec<CertResult> = (0..50)
                .map(|_| record(rng.next_uniform() * 3.0, rng.next_uniform() < 0.7))
                .collect();
            let radii: Vec<f64> = (0..20).map(|i| i as f64 * 0.15).collect();
            let t = certified_accuracy(&records, &radii, 1.0).unwrap();
            for w in t.accuracy.windows(2) {
                assert!(w[1] <= w[0]);
            }
        }
    }

    #[test]
    fn empty_records_give_zero_table() {
        let t = certified_accuracy(&[], &[0.5], 0.25).unwrap();
        assert_eq!(t.accuracy, vec![0.0]);
        assert_eq!(t.n_examples, 0);
        assert!(certified_accuracy(&[], &[], 0.25).is_err());
    }

    #[test]
    fn tsv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.tsv");
        let rows = vec![
            CertResult {
                example_id: 0,
                label: 1,
                prediction: Some(1),
                radius: 0.51239,
                correct: true,
                seconds: 0.25,
                failed: false,
            },
            CertResult {
                example_id: 3,
                label: 0,
                prediction: None,
                radius: 0.0,
                correct: false,
                seconds: 0.5,
                failed: false,
            },
        ];
        let mut text = String::from(TSV_HEADER);
        text.push('\n');
        for r in &rows {
            text.push_str(&tsv_row(r));
            text.push('\n');
        }
        std::fs::write(&path, &text).unwrap();
        let back = read_results_tsv(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].prediction, Some(1));
        assert!((back[0].radius - 0.5124).abs() < 1e-9); // 4 decimals
        assert_eq!(back[1].prediction, None);
        assert!(!back[1].correct);
    }
}
