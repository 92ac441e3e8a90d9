//! Evaluation artifacts: the serializable report plus its on-disk renderings
//! (report.json, roc.csv, roc.svg).

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{compute_metrics, compute_roc_auc, scan_threshold, split_counts, ScoredPair};
use crate::Result;

/// One ROC sweep point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
}

/// Full evaluation summary. FAR and FRR are measured at `threshold`, the
/// accuracy-optimal cut found by the scan; all rates are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold: f64,
    pub auc: f64,
    pub acc: f64,
    pub far: f64,
    pub frr: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub roc: Vec<RocPoint>,
}

/// Trapezoidal area under a ROC polyline.
pub fn auc_from_roc(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[0].tpr + w[1].tpr) * 0.5)
        .sum()
}

/// Scans the threshold, measures error rates there, and sweeps the ROC.
pub fn build_report(scored: &[ScoredPair]) -> Result<EvalReport> {
    let (n_pos, n_neg) = split_counts(scored)?;
    let (threshold, _) = scan_threshold(scored)?;
    let metrics = compute_metrics(scored, threshold)?;
    let (roc, auc) = compute_roc_auc(scored)?;
    Ok(EvalReport {
        threshold,
        auc,
        acc: metrics.acc,
        far: metrics.far,
        frr: metrics.frr,
        n_pos,
        n_neg,
        roc,
    })
}

/// CSV rendering of the curve; values use shortest-round-trip formatting, so
/// re-integrating the parsed rows reproduces the report's AUC.
pub fn roc_csv_string(points: &[RocPoint]) -> String {
    let mut out = String::from("fpr,tpr\n");
    for p in points {
        let _ = writeln!(out, "{},{}", p.fpr, p.tpr);
    }
    out
}

const SVG_MARGIN: f64 = 60.0;
const SVG_PLOT: f64 = 400.0;

fn svg_x(fpr: f64) -> f64 {
    SVG_MARGIN + fpr * SVG_PLOT
}

fn svg_y(tpr: f64) -> f64 {
    SVG_MARGIN + (1.0 - tpr) * SVG_PLOT
}

/// Self-contained vector plot of the ROC with a chance-level diagonal.
fn roc_svg_string(report: &EvalReport) -> String {
    let size = SVG_PLOT + 2.0 * SVG_MARGIN;
    let mut path = String::new();
    for (i, p) in report.roc.iter().enumerate() {
        let cmd = if i == 0 { 'M' } else { 'L' };
        let _ = write!(path, "{cmd}{:.2} {:.2} ", svg_x(p.fpr), svg_y(p.tpr));
    }
    let mut s = String::new();
    let _ = write!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {size} {size}\" \
         font-family=\"sans-serif\" font-size=\"14\">\n"
    );
    let _ = write!(
        s,
        "  <rect x=\"{m}\" y=\"{m}\" width=\"{p}\" height=\"{p}\" fill=\"none\" \
         stroke=\"#444\"/>\n",
        m = SVG_MARGIN,
        p = SVG_PLOT
    );
    // Chance-level reference.
    let _ = write!(
        s,
        "  <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y1}\" stroke=\"#999\" \
         stroke-dasharray=\"6 4\"/>\n",
        x0 = svg_x(0.0),
        y0 = svg_y(0.0),
        x1 = svg_x(1.0),
        y1 = svg_y(1.0)
    );
    for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let _ = write!(
            s,
            "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{tick}</text>\n",
            svg_x(tick),
            SVG_MARGIN + SVG_PLOT + 22.0
        );
        let _ = write!(
            s,
            "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{tick}</text>\n",
            SVG_MARGIN - 8.0,
            svg_y(tick) + 5.0
        );
    }
    let _ = write!(
        s,
        "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">false positive rate</text>\n",
        svg_x(0.5),
        SVG_MARGIN + SVG_PLOT + 45.0
    );
    let _ = write!(
        s,
        "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" \
         transform=\"rotate(-90 {:.1} {:.1})\">true positive rate</text>\n",
        SVG_MARGIN - 38.0,
        svg_y(0.5),
        SVG_MARGIN - 38.0,
        svg_y(0.5)
    );
    let _ = write!(
        s,
        "  <path d=\"{}\" fill=\"none\" stroke=\"#0b62a4\" stroke-width=\"2\"/>\n",
        path.trim_end()
    );
    let _ = write!(
        s,
        "  <text x=\"{:.1}\" y=\"{:.1}\">AUC = {:.4}</text>\n",
        svg_x(0.55),
        svg_y(0.08),
        report.auc
    );
    s.push_str("</svg>\n");
    s
}

/// Writes report.json, roc.csv, and roc.svg into `dir` (created if needed).
pub fn emit_report(report: &EvalReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    std::fs::write(dir.join("report.json"), json)?;
    std::fs::write(dir.join("roc.csv"), roc_csv_string(&report.roc))?;
    std::fs::write(dir.join("roc.svg"), roc_svg_string(report))?;
    Ok(())
}
