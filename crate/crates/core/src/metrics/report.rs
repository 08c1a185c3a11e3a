//! Evaluation report (JSON), per-class curve dumps (CSV) and SVG plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{average_precision, macro_f1, roc_auc, sweep, youden_threshold, FairnessReport, MetricError};
use crate::datakit::{LabelMatrix, ScoreMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum F1Threshold {
    Fixed(f64),
    Youden,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportOptions {
    pub f1_threshold: F1Threshold,
    /// Named class subsets (column indices) to report mAP over.
    pub subsets: Vec<(String, Vec<usize>)>,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self { f1_threshold: F1Threshold::Fixed(0.5), subsets: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub index: usize,
    pub name: String,
    pub positives: usize,
    pub ap: Option<f64>,
    pub auc: Option<f64>,
    pub f1: f64,
    pub f1_threshold: f64,
    pub youden_threshold: Option<f64>,
    pub youden_j: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_samples: usize,
    pub classes: Vec<ClassMetrics>,
    /// Mean AP over classes with at least one positive.
    pub mean_ap: f64,
    pub macro_f1: f64,
    pub mean_auc: Option<f64>,
    pub subset_map: BTreeMap<String, f64>,
    pub fairness: Vec<FairnessReport>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

pub fn build_report(scores: &ScoreMatrix, labels: &LabelMatrix, options: &ReportOptions) -> Result<EvalReport, MetricError> {
    if scores.values.dim() != labels.values.dim() {
        return Err(MetricError::Shape(format!("scores {:?} vs labels {:?}", scores.values.dim(), labels.values.dim())));
    }
    let c = labels.num_classes();
    let mut classes = Vec::with_capacity(c);
    for k in 0..c {
        let s = scores.column(k);
        let y = labels.column(k);
        let youden = youden_threshold(&s, &y).ok();
        let f1_threshold = match options.f1_threshold {
            F1Threshold::Fixed(t) => t,
            F1Threshold::Youden => youden.map(|(t, _)| t).unwrap_or(0.5),
        };
        classes.push(ClassMetrics {
            index: k,
            name: labels.class_names[k].clone(),
            positives: y.iter().filter(|&&v| v).count(),
            ap: average_precision(&s, &y).ok(),
            auc: roc_auc(&s, &y).ok().map(|(_, a)| a),
            f1: 0.0,
            f1_threshold,
            youden_threshold: youden.map(|(t, _)| t),
            youden_j: youden.map(|(_, j)| j),
        });
    }
    let thresholds: Vec<f64> = classes.iter().map(|m| m.f1_threshold).collect();
    let (mf1, per_f1) = macro_f1(scores, labels, &thresholds)?;
    for (m, f) in classes.iter_mut().zip(per_f1) {
        m.f1 = f;
    }
    let mean_ap = mean(classes.iter().filter_map(|m| m.ap))
        .ok_or_else(|| MetricError::Undefined("no class has a positive label".into()))?;
    let mut subset_map = BTreeMap::new();
    for (name, idx) in &options.subsets {
        if let Some(m) = mean(idx.iter().filter_map(|&i| classes.get(i).and_then(|m| m.ap))) {
            subset_map.insert(name.clone(), m);
        }
    }
    Ok(EvalReport {
        num_samples: labels.num_samples(),
        mean_auc: mean(classes.iter().filter_map(|m| m.auc)),
        classes,
        mean_ap,
        macro_f1: mf1,
        subset_map,
        fairness: Vec::new(),
    })
}

pub fn write_report(report: &EvalReport, path: impl AsRef<Path>) -> Result<(), MetricError> {
    if let Some(parent) = path.as_ref().parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(report)? + "\n")?;
    Ok(())
}

/// One row per unique score; undefined curve values are left empty.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveRow {
    pub threshold: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
}

pub fn curve_rows(scores: &[f64], labels: &[bool]) -> Result<Vec<CurveRow>, MetricError> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    Ok(sweep(scores, labels)?
        .into_iter()
        .map(|(t, tp, fp)| CurveRow {
            threshold: t,
            precision: (pos > 0).then(|| tp as f64 / (tp + fp) as f64),
            recall: ratio(tp, pos),
            tpr: if neg > 0 { ratio(tp, pos) } else { None },
            fpr: if pos > 0 { ratio(fp, neg) } else { None },
        })
        .collect())
}

fn file_stem(index: usize, name: &str) -> String {
    let slug: String = name.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' }).collect();
    format!("{index:02}_{slug}")
}

/// Writes `<dir>/<index>_<name>.csv` for every class.
pub fn write_curves(scores: &ScoreMatrix, labels: &LabelMatrix, dir: impl AsRef<Path>) -> Result<(), MetricError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for k in 0..labels.num_classes() {
        let rows = curve_rows(&scores.column(k), &labels.column(k))?;
        let path = dir.join(format!("{}.csv", file_stem(k, &labels.class_names[k])));
        let mut w = csv::Writer::from_path(&path).map_err(|e| MetricError::Io(std::io::Error::other(e)))?;
        for r in rows {
            w.serialize(r).map_err(|e| MetricError::Io(std::io::Error::other(e)))?;
        }
        w.flush()?;
    }
    Ok(())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Grid of per-class ROC curves with the chance diagonal and AUC in titles.
pub fn render_roc_grid(scores: &ScoreMatrix, labels: &LabelMatrix) -> String {
    const CELL: f64 = 220.0;
    const PAD: f64 = 30.0;
    let c = labels.num_classes();
    let cols = (c as f64).sqrt().ceil().max(1.0) as usize;
    let rows = c.div_ceil(cols).max(1);
    let (width, height) = (cols as f64 * CELL, rows as f64 * CELL);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="10">"#
    );
    let _ = writeln!(svg, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    for k in 0..c {
        let ox = (k % cols) as f64 * CELL + PAD;
        let oy = (k / cols) as f64 * CELL + PAD;
        let side = CELL - 2.0 * PAD;
        let px = |f: f64| ox + f * side;
        let py = |t: f64| oy + (1.0 - t) * side;
        let _ = writeln!(svg, r##"<rect x="{ox}" y="{oy}" width="{side}" height="{side}" fill="none" stroke="#444"/>"##);
        let _ = writeln!(
            svg,
            r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#bbb" stroke-dasharray="4 3"/>"##,
            px(0.0),
            py(0.0),
            px(1.0),
            py(1.0)
        );
        let title = match roc_auc(&scores.column(k), &labels.column(k)) {
            Ok((curve, auc)) => {
                let pts: Vec<String> =
                    curve.fpr.iter().zip(&curve.tpr).map(|(&f, &t)| format!("{:.2},{:.2}", px(f), py(t))).collect();
                let _ = writeln!(svg, r##"<polyline points="{}" fill="none" stroke="#1f77b4" stroke-width="1.5"/>"##, pts.join(" "));
                format!("{} (AUC {auc:.3})", labels.class_names[k])
            }
            Err(_) => format!("{} (undefined)", labels.class_names[k]),
        };
        let _ = writeln!(svg, r#"<text x="{ox}" y="{}">{}</text>"#, oy - 8.0, escape(&title));
        let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">FPR</text>"#, ox + side / 2.0, oy + side + 14.0);
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" transform="rotate(-90 {} {})" text-anchor="middle">TPR</text>"#,
            ox - 8.0,
            oy + side / 2.0,
            ox - 8.0,
            oy + side / 2.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Grouped bar chart of per-class AP, one colour per series. Missing values
/// (`None`) leave a gap.
pub fn render_ap_bars(class_names: &[String], series: &[(String, Vec<Option<f64>>)]) -> String {
    const COLOURS: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];
    let (left, top, plot_h, bottom) = (50.0, 30.0, 240.0, 140.0);
    let group_w = 14.0 * series.len().max(1) as f64 + 10.0;
    let width = left + group_w * class_names.len() as f64 + 20.0;
    let height = top + plot_h + bottom;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="10">"#
    );
    let _ = writeln!(svg, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    for tick in 0..=5 {
        let v = tick as f64 / 5.0;
        let y = top + (1.0 - v) * plot_h;
        let _ = writeln!(svg, r##"<line x1="{left}" y1="{y}" x2="{}" y2="{y}" stroke="#ddd"/>"##, width - 20.0);
        let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{v:.1}</text>"#, left - 4.0, y + 3.0);
    }
    for (s, (name, values)) in series.iter().enumerate() {
        let colour = COLOURS[s % COLOURS.len()];
        for (k, v) in values.iter().enumerate() {
            if let Some(v) = v {
                let x = left + k as f64 * group_w + 5.0 + s as f64 * 14.0;
                let h = v.clamp(0.0, 1.0) * plot_h;
                let _ = writeln!(
                    svg,
                    r#"<rect x="{x}" y="{}" width="12" height="{h}" fill="{colour}"><title>{}: {v:.3}</title></rect>"#,
                    top + plot_h - h,
                    escape(name)
                );
            }
        }
        let _ = writeln!(svg, r#"<rect x="{}" y="8" width="10" height="10" fill="{colour}"/>"#, left + s as f64 * 110.0);
        let _ = writeln!(svg, r#"<text x="{}" y="17">{}</text>"#, left + s as f64 * 110.0 + 14.0, escape(name));
    }
    for (k, name) in class_names.iter().enumerate() {
        let x = left + k as f64 * group_w + group_w / 2.0;
        let y = top + plot_h + 10.0;
        let _ = writeln!(svg, r#"<text x="{x}" y="{y}" transform="rotate(60 {x} {y})">{}</text>"#, escape(name));
    }
    svg.push_str("</svg>\n");
    svg
}
