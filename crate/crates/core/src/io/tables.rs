use std::path::Path;

use serde::{Deserialize, Serialize};

use super::atomic_write;
use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::train::StepReport;

fn csv_err(e: impl std::fmt::Display) -> Error {
    Error::Format(format!("csv: {e}"))
}

/// One row of the per-step loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub hr_gradient_stopped: bool,
}

impl From<&StepReport> for LossRow {
    fn from(r: &StepReport) -> Self {
        LossRow {
            step: r.step,
            epoch: r.epoch,
            loss: r.loss,
            lr: r.lr,
            hr_gradient_stopped: r.hr_gradient_stopped,
        }
    }
}

/// Serialize flat records with a header row.
pub fn write_rows<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(csv_err)?;
    atomic_write(path, &bytes)
}

pub fn write_loss_csv(path: &Path, rows: &[LossRow]) -> Result<()> {
    if rows.is_empty() {
        return atomic_write(path, b"step,epoch,loss,lr,hr_gradient_stopped\n");
    }
    write_rows(path, rows)
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<LossRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn fmt(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".to_string()
    } else {
        v.to_string()
    }
}

/// Per-sample metrics followed by a `mean` row.
pub fn write_eval_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let layers = report.layer_psnr.len();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec![
        "index".to_string(),
        "psnr".into(),
        "ssim".into(),
        "zero_filled_psnr".into(),
        "zero_filled_ssim".into(),
    ];
    header.extend((0..layers).map(|i| format!("layer_{i}_psnr")));
    w.write_record(&header).map_err(csv_err)?;
    for s in &report.samples {
        let mut rec = vec![
            s.index.to_string(),
            fmt(s.psnr),
            fmt(s.ssim),
            fmt(s.zero_filled_psnr),
            fmt(s.zero_filled_ssim),
        ];
        rec.extend(s.layer_psnr.iter().map(|&v| fmt(v)));
        w.write_record(&rec).map_err(csv_err)?;
    }
    let mut mean = vec![
        "mean".to_string(),
        fmt(report.psnr.mean),
        fmt(report.ssim.mean),
        fmt(report.zero_filled_psnr.mean),
        fmt(report.zero_filled_ssim.mean),
    ];
    mean.extend(report.layer_psnr.iter().map(|&v| fmt(v)));
    w.write_record(&mean).map_err(csv_err)?;
    atomic_write(path, &w.into_inner().map_err(csv_err)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{EvalReport, SampleMetrics};

    #[test]
    fn loss_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("loss.csv");
        let rows = vec![
            LossRow { step: 0, epoch: 0, loss: 1.0 / 3.0, lr: 5e-4, hr_gradient_stopped: true },
            LossRow { step: 1, epoch: 0, loss: 0.1 + 0.2, lr: 4.9e-4, hr_gradient_stopped: false },
        ];
        write_loss_csv(&p, &rows).unwrap();
        assert_eq!(read_loss_csv(&p).unwrap(), rows);
        write_loss_csv(&p, &[]).unwrap();
        assert!(read_loss_csv(&p).unwrap().is_empty());
    }

    #[test]
    fn eval_csv_mean_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("eval.csv");
        let sample = |i, psnr| SampleMetrics {
            index: i,
            psnr,
            ssim: 0.5,
            zero_filled_psnr: f64::INFINITY,
            zero_filled_ssim: 1.0,
            layer_psnr: vec![psnr - 1.0, psnr],
        };
        let report = EvalReport::from_samples(vec![sample(0, 20.0), sample(1, 30.0)]);
        write_eval_csv(&p, &report).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "index,psnr,ssim,zero_filled_psnr,zero_filled_ssim,layer_0_psnr,layer_1_psnr");
        assert_eq!(lines[3], "mean,25,0.5,inf,1,24,25");
    }
}
