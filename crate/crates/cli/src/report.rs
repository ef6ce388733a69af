//! `report`: merge several run directories into one per-epoch comparison
//! table, an epochs-to-threshold table, and an SVG chart of the validation
//! curves (one polyline per run).

use std::path::{Path, PathBuf};

use normlab_core::{Error, Result};

struct RunSeries {
    name: String,
    /// Rows of (epoch, train_loss, val_loss, test_acc, top5_acc).
    rows: Vec<(usize, f64, f64, f64, f64)>,
    /// Per-epoch training accuracy out of the run summary, when present.
    train_acc: Option<Vec<f64>>,
}

fn parse_metrics(path: &Path) -> Result<Vec<(usize, f64, f64, f64, f64)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    if header != "epoch,train_loss,val_loss,test_acc,top5_acc,seconds" {
        return Err(Error::Input(format!(
            "{} does not look like a metrics file (header '{header}')",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 6 {
            return Err(Error::Input(format!(
                "{} line {}: expected 6 cells, got {}",
                path.display(),
                i + 2,
                cells.len()
            )));
        }
        let num = |j: usize| -> Result<f64> {
            cells[j].parse().map_err(|_| {
                Error::Input(format!("{} line {}: bad number '{}'", path.display(), i + 2, cells[j]))
            })
        };
        rows.push((num(0)? as usize, num(1)?, num(2)?, num(3)?, num(4)?));
    }
    Ok(rows)
}

fn train_acc_from_summary(path: &Path) -> Option<Vec<f64>> {
    let text = std::fs::read_to_string(path).ok()?;
    let v: serde_json::Value = serde_json::from_str(&text).ok()?;
    v.get("train_acc")?.as_array().map(|a| a.iter().filter_map(|x| x.as_f64()).collect())
}

fn run_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
        .replace(',', "_")
}

/// First epoch whose training accuracy reaches `threshold`, 1-based.
fn first_crossing(train_acc: &[f64], threshold: f64) -> Option<usize> {
    train_acc.iter().position(|&a| a >= threshold).map(|i| i + 1)
}

const PALETTE: &[&str] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    .as_slice();

fn svg_curves(series: &[RunSeries]) -> String {
    let (width, height) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 20.0, 20.0, 40.0);
    let (pw, ph) = (width - left - right, height - top - bottom);

    let max_epoch = series.iter().flat_map(|s| s.rows.iter().map(|r| r.0)).max().unwrap_or(1);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for s in series {
        for r in &s.rows {
            lo = lo.min(r.2);
            hi = hi.max(r.2);
        }
    }
    if !lo.is_finite() || !hi.is_finite() {
        lo = 0.0;
        hi = 1.0;
    }
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }
    let pad = 0.05 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);

    let x = |epoch: usize| left + pw * (epoch.max(1) - 1) as f64 / (max_epoch.max(2) - 1) as f64;
    let y = |v: f64| top + ph * (1.0 - (v - lo) / (hi - lo));

    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    out.push_str(&format!(
        "  <rect x=\"0\" y=\"0\" width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n"
    ));
    // axes
    out.push_str(&format!(
        "  <line x1=\"{left}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        top + ph,
        left + pw,
        top + ph
    ));
    out.push_str(&format!(
        "  <line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{}\" stroke=\"black\"/>\n",
        top + ph
    ));
    out.push_str(&format!(
        "  <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">epoch</text>\n",
        left + pw / 2.0,
        height - 8.0
    ));
    out.push_str(&format!(
        "  <text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">\
         validation loss</text>\n",
        top + ph / 2.0,
        top + ph / 2.0
    ));
    out.push_str(&format!(
        "  <text x=\"{left}\" y=\"{}\" text-anchor=\"middle\">1</text>\n",
        top + ph + 16.0
    ));
    out.push_str(&format!(
        "  <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{max_epoch}</text>\n",
        left + pw,
        top + ph + 16.0
    ));
    out.push_str(&format!(
        "  <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{hi:.3}</text>\n",
        left - 6.0,
        top + 4.0
    ));
    out.push_str(&format!(
        "  <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{lo:.3}</text>\n",
        left - 6.0,
        top + ph + 4.0
    ));

    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<String> =
            s.rows.iter().map(|r| format!("{:.2},{:.2}", x(r.0), y(r.2))).collect();
        out.push_str(&format!(
            "  <polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            points.join(" ")
        ));
        let ly = top + 14.0 * (i + 1) as f64;
        out.push_str(&format!(
            "  <line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{color}\" \
             stroke-width=\"1.5\"/>\n",
            left + pw - 130.0,
            ly - 4.0,
            left + pw - 110.0,
            ly - 4.0
        ));
        out.push_str(&format!(
            "  <text x=\"{}\" y=\"{ly}\" fill=\"{color}\">{}</text>\n",
            left + pw - 104.0,
            s.name
        ));
    }
    out.push_str("</svg>\n");
    out
}

pub fn cmd_report(run_dirs: &[PathBuf], out_dir: &Path, threshold: f64) -> Result<()> {
    if run_dirs.is_empty() {
        return Err(Error::Input("no run directories given".into()));
    }
    let mut series = Vec::new();
    for dir in run_dirs {
        let metrics = dir.join("metrics.csv");
        match parse_metrics(&metrics) {
            Ok(rows) => series.push(RunSeries {
                name: run_name(dir),
                rows,
                train_acc: train_acc_from_summary(&dir.join("summary.json")),
            }),
            Err(e) => eprintln!("warning: skipping {}: {e}", dir.display()),
        }
    }
    if series.is_empty() {
        return Err(Error::Input("none of the run directories had readable metrics".into()));
    }

    std::fs::create_dir_all(out_dir)?;

    let mut comparison = String::from("run,epoch,train_loss,val_loss,test_acc,top5_acc\n");
    for s in &series {
        for r in &s.rows {
            comparison.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.6}\n",
                s.name, r.0, r.1, r.2, r.3, r.4
            ));
        }
    }
    std::fs::write(out_dir.join("comparison.csv"), comparison)?;

    let mut table = String::from("run,threshold,epochs_to_threshold\n");
    for s in &series {
        let cell = match &s.train_acc {
            Some(acc) => {
                first_crossing(acc, threshold).map_or_else(String::new, |e| e.to_string())
            }
            None => {
                eprintln!(
                    "warning: {} has no summary with training accuracy; \
                     leaving epochs-to-threshold blank",
                    s.name
                );
                String::new()
            }
        };
        table.push_str(&format!("{},{threshold},{cell}\n", s.name));
    }
    std::fs::write(out_dir.join("threshold.csv"), table)?;

    std::fs::write(out_dir.join("curves.svg"), svg_curves(&series))?;
    eprintln!(
        "wrote comparison.csv, threshold.csv, curves.svg for {} run(s) to {}",
        series.len(),
        out_dir.display()
    );
    Ok(())
}
