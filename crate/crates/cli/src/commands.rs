use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use dfkit_core::data::{
    decode_image, histogram_check, scan_directory, split_dataset, synth_dataset, DatasetIndex, Label, Loader, Split,
    SynthConfig,
};
use dfkit_core::metrics::{confusion, confusion_grid_csv, MetricsReport, METRICS_CSV_HEADER};
use dfkit_core::models::{load_checkpoint, save_checkpoint, Model};
use dfkit_core::optim::{curves_csv, evaluate, fit, parse_curves_csv, TrainRecord};
use dfkit_core::{Error, Tensor};

use crate::args::{EvaluateArgs, PredictArgs, ReportArgs, SplitArgs, SynthArgs, TrainArgs};
use crate::config::{default_manifest, streams, sub_seed, RunConfig};
use crate::svg::{line_chart, Series};

/// Decoded datasets up to this size are kept in memory during training.
const PRELOAD_LIMIT_BYTES: usize = 2 << 30;

fn pct(v: f64) -> String {
    format!("{:.2}%", v * 100.0)
}

fn print_counts(index: &DatasetIndex, splits: bool) {
    if splits {
        for split in Split::ALL {
            let (r, f) = (
                index.count(Some(split), Label::Real),
                index.count(Some(split), Label::Fake),
            );
            println!("{:<6} {:>6} (real {r}, fake {f})", split.name(), r + f);
        }
    }
    let (r, f) = (index.count(None, Label::Real), index.count(None, Label::Fake));
    println!("{:<6} {:>6} (real {r}, fake {f})", "total", r + f);
}

pub fn synth(a: &SynthArgs) -> anyhow::Result<()> {
    let cfg = SynthConfig {
        per_class: a.n,
        size: a.size,
        noise: a.noise,
        seed: a.seed,
    };
    let index = synth_dataset(&a.out, &cfg)?;
    println!("wrote {} images to {}", index.len(), a.out.display());
    print_counts(&index, false);
    Ok(())
}

pub fn split(a: &SplitArgs) -> anyhow::Result<()> {
    let fractions: [f64; 3] = a
        .fractions
        .as_slice()
        .try_into()
        .map_err(|_| Error::Config("--fractions needs exactly three values".into()))?;
    let index = scan_directory(&a.data)?;
    let index = if index.records.iter().all(|r| r.split.is_some()) {
        println!("using the split directories under {}", a.data.display());
        index
    } else {
        split_dataset(&index, fractions, sub_seed(a.seed, streams::SPLIT))?
    };
    let out = default_manifest(&a.data, a.out.as_deref());
    index.write_manifest(&out)?;
    println!("wrote {} ({} records)", out.display(), index.len());
    print_counts(&index, true);
    if a.histogram {
        let report = histogram_check(&index, a.histogram_threshold)?;
        println!("luma histogram L1 distances (threshold {}):", a.histogram_threshold);
        for (x, y, d) in &report.distances {
            let flag = if *d > a.histogram_threshold { "  DIVERGENT" } else { "" };
            println!("  {x}-{y}: {d:.4}{flag}");
        }
    }
    Ok(())
}

fn with_params(model: &Model, params: dfkit_core::layers::ParamStore<f32>) -> Model {
    let mut m = model.clone();
    m.params = params;
    m
}

pub fn train(a: &TrainArgs) -> anyhow::Result<()> {
    let cfg = RunConfig::resolve(a)?;
    let index = DatasetIndex::read_manifest(&cfg.manifest_path(), cfg.data_dir())?;
    let mut model = Model::build(cfg.model.clone(), sub_seed(cfg.seed, streams::INIT))?;
    let (h, w) = (model.config.height, model.config.width);
    let mut train = Loader::new(&index, Split::Train, h, w)?;
    let mut val = Loader::new(&index, Split::Val, h, w)?;
    if (train.len() + val.len()) * 3 * h * w * 4 <= PRELOAD_LIMIT_BYTES {
        train.preload()?;
        val.preload()?;
    }
    let out = cfg.out_dir();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    println!(
        "training {} ({} parameters) on {} train / {} val images for {} epochs",
        model.config.kind,
        model.count_params(),
        train.len(),
        val.len(),
        cfg.epochs
    );
    let fit_cfg = cfg.fit_config();
    let result = fit(&mut model, &train, &val, &fit_cfg, |r: &TrainRecord| {
        println!(
            "epoch {:>3}/{}  train_acc {}  train_loss {:.4}  val_acc {}  val_loss {:.4}",
            r.epoch,
            fit_cfg.epochs,
            pct(r.train_acc),
            r.train_loss,
            pct(r.val_acc),
            r.val_loss
        );
    })?;
    let best = match result.best {
        Some((epoch, params)) => {
            println!("best validation loss at epoch {epoch}");
            with_params(&model, params)
        }
        None => model.clone(),
    };
    save_checkpoint(&best, &out.join("best.ckpt"))?;
    save_checkpoint(&model, &out.join("final.ckpt"))?;
    let curves = out.join("curves.csv");
    fs::write(&curves, curves_csv(&result.records)).with_context(|| format!("writing {}", curves.display()))?;
    println!("wrote best.ckpt, final.ckpt and curves.csv to {}", out.display());
    println!("{}", epoch_table_header());
    match result.records.last() {
        Some(r) => println!("{}", epoch_table_row(model.config.kind.name(), r)),
        None => println!("{:<12} (no epochs run)", model.config.kind.name()),
    }
    Ok(())
}

fn epoch_table_header() -> String {
    format!(
        "{:<12} {:>10} {:>10} {:>10} {:>10}",
        "model", "train_acc", "train_loss", "val_acc", "val_loss"
    )
}

fn epoch_table_row(name: &str, r: &TrainRecord) -> String {
    format!(
        "{name:<12} {:>10} {:>10.4} {:>10} {:>10.4}",
        pct(r.train_acc),
        r.train_loss,
        pct(r.val_acc),
        r.val_loss
    )
}

/// Every failure to read a checkpoint counts as a checkpoint error.
fn load_model(path: &Path) -> dfkit_core::Result<Model> {
    load_checkpoint(path).map_err(|e| match e {
        Error::Checkpoint(_) => e,
        other => Error::Checkpoint(other.to_string()),
    })
}

fn sibling(checkpoint: &Path, file: &str) -> PathBuf {
    checkpoint.parent().unwrap_or(Path::new(".")).join(file)
}

pub fn evaluate_cmd(a: &EvaluateArgs) -> anyhow::Result<()> {
    let model = load_model(&a.checkpoint)?;
    let split: Split = a.split.parse().map_err(|e: Error| Error::Config(e.to_string()))?;
    if a.batch_size == 0 {
        return Err(Error::Config("--batch-size must be at least 1".into()).into());
    }
    if !(0.0..=1.0).contains(&a.threshold) {
        return Err(Error::Config(format!("threshold {} is outside [0, 1]", a.threshold)).into());
    }
    let index = DatasetIndex::read_manifest(&default_manifest(&a.data, a.manifest.as_deref()), &a.data)?;
    let loader = Loader::new(&index, split, model.config.height, model.config.width)?;
    let eval = evaluate(&model, &loader, a.batch_size)?;
    let cm = confusion(&eval.probs, &eval.labels, a.threshold)?;
    let report = MetricsReport::from_confusion(cm)?;
    let name = a.name.clone().unwrap_or_else(|| model.config.kind.name().to_string());

    println!("{name} on {} images of split `{split}`", loader.len());
    println!("accuracy   {}", pct(report.accuracy));
    println!("precision  {}", pct(report.precision.value));
    println!("recall     {}", pct(report.recall.value));
    println!("f1         {}", pct(report.f1.value));
    if report.is_degenerate() {
        println!("note: a metric denominator was zero and the metric is reported as 0");
    }
    println!("confusion (rows actual, columns predicted):");
    println!("{:>8} {:>8} {:>8}", "", "fake", "real");
    println!("{:>8} {:>8} {:>8}", "fake", cm.tp, cm.fn_);
    println!("{:>8} {:>8} {:>8}", "real", cm.fp, cm.tn);

    let metrics = a
        .metrics
        .clone()
        .unwrap_or_else(|| sibling(&a.checkpoint, "metrics.csv"));
    let grid = a
        .confusion
        .clone()
        .unwrap_or_else(|| sibling(&a.checkpoint, "confusion.csv"));
    for (path, text) in [
        (&metrics, format!("{METRICS_CSV_HEADER}\n{}\n", report.csv_row(&name))),
        (&grid, confusion_grid_csv(&cm)),
    ] {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    println!("wrote {} and {}", metrics.display(), grid.display());
    Ok(())
}

fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

fn expand_images(inputs: &[PathBuf]) -> anyhow::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .with_context(|| format!("reading {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|e| e.is_file() && is_image(e))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

/// `path, verdict, p_fake%, p_real%` with ties at the threshold called fake.
pub fn verdict_line(path: &Path, p_fake: f32) -> String {
    let fake = p_fake as f64 * 100.0;
    let verdict = if p_fake as f64 >= 0.5 { "fake" } else { "real" };
    format!("{}, {verdict}, {fake:.2}%, {:.2}%", path.display(), 100.0 - fake)
}

pub fn predict(a: &PredictArgs) -> anyhow::Result<()> {
    let model = load_model(&a.checkpoint)?;
    let (h, w) = (model.config.height, model.config.width);
    let mut ok = 0usize;
    for path in expand_images(&a.images)? {
        let scored = decode_image(&path, h, w)
            .and_then(|px| Tensor::from_vec(&[1, 3, h, w], px))
            .and_then(|x| model.predict(&x));
        match scored {
            Ok(p) => {
                println!("{}", verdict_line(&path, p[0]));
                ok += 1;
            }
            Err(e) => println!("{}, error, {e}", path.display()),
        }
    }
    if ok == 0 {
        return Err(anyhow!("no image could be classified"));
    }
    Ok(())
}

fn curve_name(spec: &str) -> (String, PathBuf) {
    if let Some((name, path)) = spec.split_once('=') {
        return (name.to_string(), PathBuf::from(path));
    }
    let path = PathBuf::from(spec);
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let name = match path.parent().and_then(|d| d.file_name()) {
        Some(dir) if stem == "curves" => dir.to_string_lossy().into_owned(),
        _ => stem,
    };
    (name, path)
}

fn read_input(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

/// Metrics rows, checked against the expected column layout.
fn metrics_rows(path: &Path) -> anyhow::Result<Vec<String>> {
    let text = read_input(path)?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(METRICS_CSV_HEADER) {
        return Err(Error::Config(format!("{}: missing metrics header", path.display())).into());
    }
    let mut rows = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        let numeric = f.len() == 9
            && f[1..5].iter().all(|v| v.parse::<f64>().is_ok())
            && f[5..].iter().all(|v| v.parse::<u64>().is_ok());
        if !numeric {
            return Err(Error::Config(format!("{}: malformed row `{line}`", path.display())).into());
        }
        rows.push(line.to_string());
    }
    Ok(rows)
}

pub fn report(a: &ReportArgs) -> anyhow::Result<()> {
    if a.curves.is_empty() && a.metrics.is_empty() {
        return Err(Error::Config("nothing to report: pass --curves and/or --metrics".into()).into());
    }
    let mut curves = Vec::new();
    for spec in &a.curves {
        let (name, path) = curve_name(spec);
        let records =
            parse_curves_csv(&read_input(&path)?).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        curves.push((name, records));
    }
    let mut metrics = Vec::new();
    for path in &a.metrics {
        metrics.extend(metrics_rows(path)?);
    }

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut summary = String::new();
    if !curves.is_empty() {
        summary.push_str("# final epoch of each learning curve\n");
        summary.push_str("model,epochs,train_acc,train_loss,val_acc,val_loss\n");
        println!("{}", epoch_table_header());
    }
    for (name, records) in &curves {
        if records.is_empty() {
            eprintln!("warning: curves for `{name}` have no rows; plotting empty axes");
        }
        let pick = |f: fn(&TrainRecord) -> f64| records.iter().map(|r| (r.epoch as f64, f(r))).collect();
        let acc = [
            Series {
                label: "train",
                color: "#1f77b4",
                points: pick(|r| r.train_acc),
            },
            Series {
                label: "validation",
                color: "#ff7f0e",
                points: pick(|r| r.val_acc),
            },
        ];
        let loss = [
            Series {
                label: "train",
                color: "#1f77b4",
                points: pick(|r| r.train_loss),
            },
            Series {
                label: "validation",
                color: "#ff7f0e",
                points: pick(|r| r.val_loss),
            },
        ];
        for (file, text) in [
            (
                format!("{name}_accuracy.svg"),
                line_chart(&format!("{name} accuracy"), "accuracy", &acc, true),
            ),
            (
                format!("{name}_loss.svg"),
                line_chart(&format!("{name} loss"), "loss", &loss, false),
            ),
        ] {
            let path = a.out.join(file);
            fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        }
        match records.last() {
            Some(r) => {
                summary.push_str(&format!(
                    "{name},{},{:.6},{:.6},{:.6},{:.6}\n",
                    r.epoch, r.train_acc, r.train_loss, r.val_acc, r.val_loss
                ));
                println!("{}", epoch_table_row(name, r));
            }
            None => {
                summary.push_str(&format!("{name},0,,,,\n"));
                println!("{name:<12} (no epochs)");
            }
        }
    }
    if !metrics.is_empty() {
        if !summary.is_empty() {
            summary.push('\n');
        }
        summary.push_str("# evaluation metrics\n");
        summary.push_str(METRICS_CSV_HEADER);
        summary.push('\n');
        println!(
            "{:<12} {:>9} {:>9} {:>9} {:>9}",
            "model", "accuracy", "precision", "recall", "f1"
        );
        for row in &metrics {
            summary.push_str(row);
            summary.push('\n');
            let f: Vec<&str> = row.split(',').collect();
            let v = |i: usize| pct(f[i].parse::<f64>().unwrap_or(0.0));
            println!("{:<12} {:>9} {:>9} {:>9} {:>9}", f[0], v(1), v(2), v(3), v(4));
        }
    }
    let path = a.out.join("summary.txt");
    fs::write(&path, summary).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote report to {}", a.out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verdict_format() {
        assert_eq!(verdict_line(Path::new("a.png"), 0.97), "a.png, fake, 97.00%, 3.00%");
        assert_eq!(verdict_line(Path::new("b.png"), 0.5), "b.png, fake, 50.00%, 50.00%");
        assert_eq!(verdict_line(Path::new("c.png"), 0.25), "c.png, real, 25.00%, 75.00%");
    }

    #[test]
    fn curve_names() {
        assert_eq!(curve_name("vit=x/y.csv").0, "vit");
        assert_eq!(curve_name("runs/dfcnet/curves.csv").0, "dfcnet");
        assert_eq!(curve_name("runs/other.csv").0, "other");
    }
}
