use std::fmt::Write as _;
use std::path::Path;

use super::{CountReport, Evaluation, ImageRow, COL_LABELS, ROW_LABELS};
use crate::dataset::{write_bytes, write_json};
use crate::error::Result;
use crate::pipelines::Task;

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_MD: &str = "report.md";
pub const PER_IMAGE_CSV: &str = "per_image.csv";

fn pct(v: f64) -> String {
    format!("{v:.2}%")
}

fn outdoor_table(out: &mut String, reports: &[&CountReport]) {
    out.push_str("| Task | Method | MAE | MAPE |\n| --- | --- | --- | --- |\n");
    for (label, pick) in [
        ("Pod counting", (|r: &CountReport| r.pods) as fn(&CountReport) -> super::ErrorMetrics),
        ("Seed counting", |r: &CountReport| r.seeds),
    ] {
        for (i, r) in reports.iter().enumerate() {
            let m = pick(r);
            let task = if i == 0 { label } else { "" };
            let method = match r.task {
                Task::OutdoorSam => format!("{} (segmented)", r.method),
                _ => r.method.clone(),
            };
            let _ = writeln!(out, "| {task} | {method} | {:.2} | {} |", m.mae, pct(m.mape));
        }
    }
}

fn indoor_table(out: &mut String, reports: &[&CountReport]) {
    out.push_str("| Method | Counting MAE | Counting MAPE |\n| --- | --- | --- |\n");
    for r in reports {
        let _ = writeln!(out, "| {} | {:.2} | {} |", r.method, r.seeds.mae, pct(r.seeds.mape));
    }
}

fn confusion_section(out: &mut String, r: &CountReport) {
    let Some(c) = &r.confusion else { return };
    let m = &c.matrix;
    let _ = writeln!(
        out,
        "\n### Confusion matrix: {} ({})\n\nRows are predicted classes, columns are ground-truth classes; \
         {} geometry, IoU >= {}. Matched {} of {} ground-truth pods.\n",
        r.method,
        r.task,
        c.geometry,
        c.iou_threshold,
        m.matched(),
        m.total_gt()
    );
    let _ = writeln!(out, "| predicted \\ truth | {} |", COL_LABELS.join(" | "));
    out.push_str("| --- | --- | --- | --- | --- | --- |\n");
    for (label, row) in ROW_LABELS.iter().zip(m.counts()) {
        let cells: Vec<String> = row.iter().map(u64::to_string).collect();
        let _ = writeln!(out, "| {label} | {} |", cells.join(" | "));
    }
}

/// Markdown tables: outdoor runs as task/method rows for pods and seeds,
/// indoor runs as seed-counting rows, then any confusion matrices.
pub fn render_markdown(reports: &[CountReport]) -> String {
    let outdoor: Vec<&CountReport> = reports.iter().filter(|r| r.task != Task::Indoor).collect();
    let indoor: Vec<&CountReport> = reports.iter().filter(|r| r.task == Task::Indoor).collect();
    let mut out = String::new();
    if !outdoor.is_empty() {
        out.push_str("## Outdoor pod and seed counting\n\n");
        outdoor_table(&mut out, &outdoor);
    }
    if !indoor.is_empty() {
        if !out.is_empty() {
            out.push('\n');
        }
        out.push_str("## Indoor seed counting\n\n");
        indoor_table(&mut out, &indoor);
    }
    for r in reports {
        confusion_section(&mut out, r);
    }
    let n: Vec<String> = reports
        .iter()
        .map(|r| format!("{}: {} images, {} MAPE", r.method, r.n_images, r.mape_mode))
        .collect();
    if !n.is_empty() {
        let _ = write!(out, "\n{}\n", n.join("; "));
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn per_image_csv(rows: &[ImageRow]) -> String {
    let mut out = String::from("image_id,pred_pods,gt_pods,pod_abs_error,pred_seeds,gt_seeds,seed_abs_error\n");
    for r in rows {
        let (p, g) = (r.predicted, r.ground_truth);
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            csv_field(&r.image_id),
            p.pod_count,
            g.pod_count,
            p.pod_count.abs_diff(g.pod_count),
            p.seed_count,
            g.seed_count,
            p.seed_count.abs_diff(g.seed_count)
        );
    }
    out
}

/// Writes `report.json`, `report.md` and `per_image.csv` into `dir`.
pub fn write_evaluation(dir: &Path, eval: &Evaluation) -> Result<()> {
    write_json(&dir.join(REPORT_JSON), &eval.report)?;
    write_bytes(
        &dir.join(REPORT_MD),
        render_markdown(std::slice::from_ref(&eval.report)).as_bytes(),
    )?;
    write_bytes(&dir.join(PER_IMAGE_CSV), per_image_csv(&eval.rows).as_bytes())
}
