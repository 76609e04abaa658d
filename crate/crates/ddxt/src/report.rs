//! Evaluation report files: `report.json`, `confusion_matrix.csv` and
//! `per_class.csv`.

use std::fs;
use std::path::Path;

use ddxt_core::metrics::{ClassMetrics, EvalReport};

use crate::error::{Error, Result};

pub const REPORT_JSON: &str = "report.json";
pub const CONFUSION_CSV: &str = "confusion_matrix.csv";
pub const PER_CLASS_CSV: &str = "per_class.csv";

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::format(path, e.to_string())
}

fn metric_row(name: &str, m: &ClassMetrics) -> [String; 5] {
    [
        name.to_string(),
        format!("{:.2}", m.accuracy),
        format!("{:.2}", m.precision),
        format!("{:.2}", m.recall),
        format!("{:.4}", m.f1),
    ]
}

/// One-line summary of the headline metrics.
pub fn summary_line(r: &EvalReport) -> String {
    let gm = r.gm.map_or_else(|| "n/a".to_string(), |g| format!("{g:.2}"));
    format!(
        "GTPA@1 {:.2}  DDP {:.2}  DDR {:.2}  DDF1 {:.4}  GM {gm}",
        r.gtpa_at_1, r.ddp, r.ddr, r.ddf1
    )
}

pub fn write_confusion(path: &Path, r: &EvalReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    let mut header = vec!["ground_truth\\predicted".to_string()];
    header.extend(r.class_names.iter().cloned());
    w.write_record(&header).map_err(csv_err(path))?;
    let cm = &r.confusion;
    for (i, name) in r.class_names.iter().enumerate() {
        let mut row = vec![name.clone()];
        row.extend((0..cm.n_classes).map(|j| cm.get(i, j).to_string()));
        w.write_record(&row).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_per_class(path: &Path, r: &EvalReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["Pathology", "Acc. (%)", "Prec. (%)", "Rec. (%)", "F1"])
        .map_err(csv_err(path))?;
    for (name, m) in r.class_names.iter().zip(&r.per_class) {
        w.write_record(metric_row(name, m)).map_err(csv_err(path))?;
    }
    w.write_record(metric_row("Mean", &r.mean)).map_err(csv_err(path))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn emit(dir: &Path, r: &EvalReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = dir.join(REPORT_JSON);
    let text = serde_json::to_string_pretty(r).map_err(|e| Error::format(&json, e.to_string()))?;
    fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
    write_confusion(&dir.join(CONFUSION_CSV), r)?;
    write_per_class(&dir.join(PER_CLASS_CSV), r)
}

pub fn read_json(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}
