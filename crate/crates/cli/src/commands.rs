use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use apaseg_core::data::{save_volume, synthesize_case, DatasetIndex, IndexEntry, Split, VolumeRecord};
use apaseg_core::gradsuite::run_suite;
use apaseg_core::metrics::SizeBins;
use apaseg_core::network::{format_axis_weights, load_checkpoint, APAUNet, AxisWeightRow};
use apaseg_core::params::ParamStore;
use apaseg_core::train::{evaluate, evaluate_dirs, sliding_window_infer, write_report, EvalReport, Trainer};

use crate::config::{load_splits, read_json, relative_to, SynthConfig, TrainFile, TrainOverrides};

pub const AXIS_WEIGHTS_FILE: &str = "axis_weights.json";
pub const AXIS_TABLE_FILE: &str = "axis_weights.txt";
pub const RESOLVED_CONFIG_FILE: &str = "config.json";

pub fn synth(spec: Option<&Path>, out: &Path, count: Option<usize>, seed: Option<u64>) -> Result<bool> {
    let mut cfg: SynthConfig = read_json(spec)?;
    if let Some(s) = seed {
        cfg.spec.seed = s;
    }
    let count = count.or(cfg.count).unwrap_or(8);
    if cfg.val_count > count {
        bail!("val_count {} exceeds count {count}", cfg.val_count);
    }
    cfg.spec.validate()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut index = DatasetIndex::default();
    for i in 0..count {
        let case_id = format!("case_{i:03}");
        let rec = synthesize_case(&cfg.spec, cfg.spec.seed + i as u64, &case_id)?;
        let file = format!("{case_id}.vol");
        save_volume(&out.join(&file), &rec)?;
        let split = if i + cfg.val_count >= count { Split::Val } else { Split::Train };
        log::info!("{case_id}: tumour fraction {:.5} ({split:?})", rec.tumour_fraction.unwrap_or(0.0));
        index.cases.push(IndexEntry { case_id, path: file, split });
    }
    index.save(out)?;
    println!("wrote {count} cases to {}", out.display());
    Ok(true)
}

/// Loads a training config file, rebases its data path and applies flags.
pub fn resolve_train(config: Option<&Path>, overrides: &TrainOverrides) -> Result<(TrainFile, PathBuf)> {
    let mut file: TrainFile = read_json(config)?;
    file.data = file.data.map(|d| relative_to(config, &d));
    overrides.apply(&mut file);
    file.train.validate()?;
    let data = file.data.clone().context("no dataset: set `data` in the config or pass --data")?;
    Ok((file, data))
}

pub fn write_axis_weights(dir: &Path, rows: &[AxisWeightRow]) -> Result<()> {
    fs::write(dir.join(AXIS_WEIGHTS_FILE), serde_json::to_string_pretty(rows)?)?;
    fs::write(dir.join(AXIS_TABLE_FILE), format_axis_weights(rows))?;
    Ok(())
}

pub fn train(config: Option<&Path>, out: &Path, resume: bool, overrides: &TrainOverrides) -> Result<bool> {
    let (file, data) = resolve_train(config, overrides)?;
    let (cases, _) = load_splits(&data)?;
    if cases.is_empty() {
        bail!("no training cases in {}", data.display());
    }
    fs::create_dir_all(out)?;
    let mut trainer = if resume {
        let t = Trainer::resume(out, &cases)?;
        if t.cfg != file.train {
            log::warn!("resuming with the saved config; config file and flags are ignored");
        }
        if t.is_done() {
            println!("training in {} already finished {} epochs", out.display(), t.epoch());
            return Ok(true);
        }
        t
    } else {
        fs::write(out.join(RESOLVED_CONFIG_FILE), serde_json::to_string_pretty(&file)?)?;
        Trainer::new(&file.train, &cases)?
    };
    log::info!(
        "{} cases, {} steps/epoch, epochs {}..{}",
        cases.len(),
        trainer.steps_per_epoch(),
        trainer.epoch() + 1,
        trainer.cfg.epochs
    );
    let t0 = Instant::now();
    trainer.run(Some(out), |e| {
        log::info!(
            "epoch {:>4}  loss {:.5}  dice {:.5}  ce {:.5}  lr {:.5}  {:.0}s",
            e.epoch,
            e.loss,
            e.dice,
            e.ce,
            e.lr,
            t0.elapsed().as_secs_f64()
        );
    })?;
    let rows = trainer.net.axis_weights(&trainer.store);
    write_axis_weights(out, &rows)?;
    print!("{}", format_axis_weights(&rows));
    println!("trained {} epochs in {:.1}s; outputs in {}", trainer.epoch(), t0.elapsed().as_secs_f64(), out.display());
    Ok(true)
}

/// Sliding-window predictions, returned as label volumes on the input geometry.
pub fn predict_cases(
    net: &APAUNet,
    store: &ParamStore<f32>,
    cases: &[VolumeRecord],
    patch: [usize; 3],
    overlap: f64,
) -> Result<Vec<VolumeRecord>> {
    cases
        .iter()
        .map(|rec| {
            let out = sliding_window_infer(net, store, rec, patch, overlap)
                .with_context(|| format!("inferring {}", rec.case_id))?;
            Ok(VolumeRecord { label: out.labels, tumour_fraction: None, ..rec.clone() })
        })
        .collect()
}

pub fn score(
    net: &APAUNet,
    store: &ParamStore<f32>,
    cases: &[VolumeRecord],
    patch: [usize; 3],
    overlap: f64,
    classes: &[u8],
) -> Result<EvalReport> {
    let preds = predict_cases(net, store, cases, patch, overlap)?;
    Ok(evaluate(&preds, cases, classes, &SizeBins::default())?)
}

pub fn infer(ckpt: &Path, input: &Path, out: &Path, overlap: f64) -> Result<bool> {
    if !(0.0..1.0).contains(&overlap) {
        bail!("overlap must be in [0, 1), got {overlap}");
    }
    let (net, store, manifest) =
        load_checkpoint::<f32>(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let patch = manifest.config.patch.context("checkpoint config has no patch shape")?;
    let (mut cases, val) = load_splits(input)?;
    cases.extend(val);
    fs::create_dir_all(out)?;
    let t0 = Instant::now();
    for rec in &cases {
        let pred = predict_cases(&net, &store, std::slice::from_ref(rec), patch, overlap)?.remove(0);
        save_volume(&out.join(format!("{}.vol", rec.case_id)), &pred)?;
        log::info!("{} done", rec.case_id);
    }
    println!("predicted {} cases in {:.1}s", cases.len(), t0.elapsed().as_secs_f64());
    Ok(true)
}

pub fn format_report(report: &EvalReport) -> String {
    let mut s = format!("{:<8}{:>8}{:>10}{:>10}\n", "class", "cases", "dsc", "hd95");
    for c in &report.classes {
        let hd = c.mean_hd95.map_or("-".to_string(), |v| format!("{v:.3}"));
        s.push_str(&format!("{:<8}{:>8}{:>10.4}{:>10}\n", c.class, c.cases, c.mean_dsc, hd));
    }
    if !report.by_size.is_empty() {
        s.push_str(&format!("\n{:<12}{:<8}{:>8}{:>10}\n", "size bin", "class", "cases", "dsc"));
        for b in &report.by_size {
            s.push_str(&format!("{:<12}{:<8}{:>8}{:>10.4}\n", b.size_bin, b.class, b.cases, b.mean_dsc));
        }
    }
    for u in &report.unmatched {
        s.push_str(&format!("unmatched {}: {}\n", u.case_id, u.reason));
    }
    s
}

pub fn eval(pred: &Path, gt: &Path, report_path: &Path, classes: &[u8]) -> Result<bool> {
    let report = evaluate_dirs(pred, gt, classes, &SizeBins::default())?;
    let csv = write_report(&report, report_path)?;
    print!("{}", format_report(&report));
    println!("report: {} and {}", report_path.display(), csv.display());
    Ok(true)
}

pub fn gradcheck(filter: Option<&str>) -> Result<bool> {
    let t0 = Instant::now();
    let results = run_suite()?;
    let mut failed = 0;
    let mut ran = 0;
    for r in results.iter().filter(|r| filter.is_none_or(|f| r.name.contains(f))) {
        ran += 1;
        let ok = r.passed();
        failed += usize::from(!ok);
        let g = &r.report;
        println!(
            "{} {:<48} max rel {:.2e}  checked {:>5}  kinks {:>3}",
            if ok { "PASS" } else { "FAIL" },
            r.name,
            g.max_rel_error,
            g.checked,
            g.kinks
        );
    }
    println!("{} of {ran} checks passed in {:.1}s", ran - failed, t0.elapsed().as_secs_f64());
    Ok(failed == 0 && ran > 0)
}
