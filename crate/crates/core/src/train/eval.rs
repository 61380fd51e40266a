//! Case matching, per-case metrics and the CSV/JSON report.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_dir, VolumeRecord};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_case, size_report, BinSummary, CaseMetrics, SizeBins};

pub const REPORT_CSV_EXT: &str = "csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Unmatched {
    pub case_id: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class: u8,
    pub cases: usize,
    pub mean_dsc: f64,
    pub mean_hd95: Option<f64>,
}

/// Everything the `eval` report holds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<CaseMetrics>,
    pub classes: Vec<ClassSummary>,
    pub size_bins: Vec<String>,
    pub by_size: Vec<BinSummary>,
    pub unmatched: Vec<Unmatched>,
}

impl EvalReport {
    pub fn class(&self, class: u8) -> Option<&ClassSummary> {
        self.classes.iter().find(|c| c.class == class)
    }
}

fn class_summaries(rows: &[CaseMetrics]) -> Vec<ClassSummary> {
    let mut by: BTreeMap<u8, Vec<&CaseMetrics>> = BTreeMap::new();
    for r in rows {
        by.entry(r.class).or_default().push(r);
    }
    by.into_iter()
        .map(|(class, v)| {
            let hd: Vec<f64> = v.iter().filter_map(|r| r.hd95).collect();
            ClassSummary {
                class,
                cases: v.len(),
                mean_dsc: v.iter().map(|r| r.dsc).sum::<f64>() / v.len() as f64,
                mean_hd95: (!hd.is_empty()).then(|| hd.iter().sum::<f64>() / hd.len() as f64),
            }
        })
        .collect()
}

/// Scores predictions against ground truth by `case_id`. Cases present on
/// only one side, or with mismatched geometry, are listed as unmatched.
pub fn evaluate(preds: &[VolumeRecord], gts: &[VolumeRecord], classes: &[u8], bins: &SizeBins) -> Result<EvalReport> {
    let pred_by: BTreeMap<&str, &VolumeRecord> = preds.iter().map(|p| (p.case_id.as_str(), p)).collect();
    let mut rows = Vec::new();
    let mut unmatched = Vec::new();
    for gt in gts {
        let Some(pred) = pred_by.get(gt.case_id.as_str()) else {
            unmatched.push(Unmatched { case_id: gt.case_id.clone(), reason: "no prediction".into() });
            continue;
        };
        if pred.shape != gt.shape {
            unmatched.push(Unmatched {
                case_id: gt.case_id.clone(),
                reason: format!("prediction shape {:?} differs from {:?}", pred.shape, gt.shape),
            });
            continue;
        }
        rows.extend(evaluate_case(&gt.case_id, &pred.label, &gt.label, gt.shape, gt.spacing, classes, bins)?);
    }
    for p in preds {
        if !gts.iter().any(|g| g.case_id == p.case_id) {
            unmatched.push(Unmatched { case_id: p.case_id.clone(), reason: "no ground truth".into() });
        }
    }
    Ok(EvalReport {
        classes: class_summaries(&rows),
        size_bins: (0..bins.len()).map(|i| bins.label(i)).collect(),
        by_size: size_report(&rows, bins),
        rows,
        unmatched,
    })
}

/// Loads both directories and evaluates. Unreadable prediction files are
/// reported as unmatched.
pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path, classes: &[u8], bins: &SizeBins) -> Result<EvalReport> {
    let gts = load_dir(gt_dir, None)?;
    let mut preds = Vec::new();
    let mut broken = Vec::new();
    let mut paths: Vec<PathBuf> = fs::read_dir(pred_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "vol"))
        .collect();
    paths.sort();
    for p in paths {
        match crate::data::load_volume(&p) {
            Ok(r) => preds.push(r),
            Err(e) => broken.push(Unmatched { case_id: p.display().to_string(), reason: e.to_string() }),
        }
    }
    let mut report = evaluate(&preds, &gts, classes, bins)?;
    report.unmatched.extend(broken);
    Ok(report)
}

/// Writes the report as JSON at `path` and the per-case table as CSV next
/// to it.
pub fn write_report(report: &EvalReport, path: &Path) -> Result<PathBuf> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(report)?)?;
    let csv_path = path.with_extension(REPORT_CSV_EXT);
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::Invalid(e.to_string()))?;
    for r in &report.rows {
        w.serialize(r).map_err(|e| Error::Invalid(e.to_string()))?;
    }
    w.flush()?;
    Ok(csv_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::save_volume;

    fn rec(id: &str, label: Vec<u8>) -> VolumeRecord {
        VolumeRecord {
            case_id: id.into(),
            shape: [2, 2, 2],
            spacing: [1.0; 3],
            image: vec![0.0; 8],
            label,
            tumour_fraction: None,
        }
    }

    #[test]
    fn missing_prediction_is_listed() {
        let dir = tempfile::tempdir().unwrap();
        let (pd, gd) = (dir.path().join("pred"), dir.path().join("gt"));
        fs::create_dir_all(&pd).unwrap();
        fs::create_dir_all(&gd).unwrap();
        let a = rec("a", vec![0, 1, 1, 0, 0, 0, 2, 0]);
        let b = rec("b", vec![1; 8]);
        save_volume(&gd.join("a.vol"), &a).unwrap();
        save_volume(&gd.join("b.vol"), &b).unwrap();
        save_volume(&pd.join("a.vol"), &a).unwrap();
        fs::write(pd.join("junk.vol"), b"{}").unwrap();
        let report = evaluate_dirs(&pd, &gd, &[1, 2], &SizeBins::default()).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert!(report.rows.iter().all(|r| r.dsc == 1.0));
        let ids: Vec<&str> = report.unmatched.iter().map(|u| u.case_id.as_str()).collect();
        assert!(ids.contains(&"b"));
        assert_eq!(report.unmatched.len(), 2);

        let out = dir.path().join("report.json");
        let csv_path = write_report(&report, &out).unwrap();
        let text = fs::read_to_string(csv_path).unwrap();
        assert_eq!(text.lines().next().unwrap(), "case_id,class,dsc,hd95,target_fraction,size_bin");
        assert_eq!(text.lines().count(), 3);
        let back: EvalReport = serde_json::from_str(&fs::read_to_string(out).unwrap()).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn summaries_and_bins() {
        let gt = rec("a", vec![0, 1, 1, 0, 0, 0, 0, 0]);
        let pred = rec("a", vec![0, 1, 0, 0, 0, 0, 0, 0]);
        let r = evaluate(&[pred], &[gt], &[1], &SizeBins::default()).unwrap();
        let c = r.class(1).unwrap();
        assert!((c.mean_dsc - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.size_bins, ["0-0.1%", "0.1-0.3%", "0.3-0.6%", ">0.6%"]);
        assert_eq!(r.by_size.len(), 1);
        assert_eq!(r.by_size[0].size_bin, ">0.6%");
    }
}
