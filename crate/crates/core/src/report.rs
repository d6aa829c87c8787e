//! Report emission: per-case metrics CSV, JSON summary with significance
//! markers, box-plot SVGs, and provenance documents.
//!
//! Output is fully deterministic: stable ordering everywhere and fixed
//! float formatting, so identical bundles serialize to identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::experiment::{MetricsBundle, SIGNIFICANCE_THRESHOLD};

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn fmt_dsc(v: f64) -> String {
    format!("{v:.6}")
}

/// Render metrics.csv (one row per case, setting and class).
pub fn metrics_csv(bundle: &MetricsBundle) -> String {
    let mut out = String::from(
        "case_id,family,dim,overlap_train,overlap_test,modalities,class,dsc\n",
    );
    for r in &bundle.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.case_id,
            r.family.name(),
            r.dim.name(),
            r.overlap_train.name(),
            r.overlap_test.name(),
            r.modalities,
            r.class_name,
            fmt_dsc(r.dsc)
        );
    }
    out
}

/// Render summary.json: per-setting mean ± std per class, pairwise
/// p-values with asterisk markers, and parameter counts.
pub fn summary_json(bundle: &MetricsBundle) -> Result<String> {
    let mut settings = Vec::new();
    for s in &bundle.settings {
        let per_class: BTreeMap<String, serde_json::Value> = s
            .per_class
            .iter()
            .map(|(class, (mean, std))| {
                (
                    class.clone(),
                    serde_json::json!({ "mean": mean, "std": std }),
                )
            })
            .collect();
        settings.push(serde_json::json!({
            "setting": s.setting,
            "parameter_count": s.parameter_count,
            "dsc": per_class,
            "epochs_run": s.train_reports.iter().map(|r| r.epochs_run).collect::<Vec<_>>(),
            "stopped_early": s.train_reports.iter().map(|r| r.stopped_early).collect::<Vec<_>>(),
        }));
    }
    let pairwise: Vec<serde_json::Value> = bundle
        .pairwise
        .iter()
        .map(|p| {
            serde_json::json!({
                "a": p.setting_a,
                "b": p.setting_b,
                "p_value": p.result.p_value,
                "statistic": p.result.statistic,
                "n_effective": p.result.n_effective,
                "method": p.result.method,
                "marker": if p.significant { "*" } else { "" },
            })
        })
        .collect();
    let doc = serde_json::json!({
        "study": bundle.study,
        "significance_threshold": SIGNIFICANCE_THRESHOLD,
        "settings": settings,
        "pairwise": pairwise,
        "master_seed": bundle.provenance.master_seed,
    });
    Ok(serde_json::to_string_pretty(&doc)? + "\n")
}

/// Five-number summary used by the box plots.
struct BoxStats {
    min: f64,
    q1: f64,
    median: f64,
    q3: f64,
    max: f64,
}

fn box_stats(values: &mut Vec<f64>) -> Option<BoxStats> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite dsc"));
    let q = |f: f64| -> f64 {
        let pos = f * (values.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
    };
    Some(BoxStats {
        min: values[0],
        q1: q(0.25),
        median: q(0.5),
        q3: q(0.75),
        max: values[values.len() - 1],
    })
}

/// Box plots of per-class DSC per setting, one SVG document.
pub fn boxplot_svg(bundle: &MetricsBundle) -> String {
    const CLASSES: [&str; 3] = ["csf", "gm", "wm"];
    const BOX_W: f64 = 26.0;
    const GROUP_GAP: f64 = 18.0;
    const LEFT: f64 = 70.0;
    const TOP: f64 = 30.0;
    const PLOT_H: f64 = 300.0;

    let settings: Vec<&str> = bundle.settings.iter().map(|s| s.setting.as_str()).collect();
    let group_w = CLASSES.len() as f64 * (BOX_W + 6.0) + GROUP_GAP;
    let width = LEFT + settings.len() as f64 * group_w + 40.0;
    let height = TOP + PLOT_H + 150.0;
    let y_of = |v: f64| TOP + (1.0 - v) * PLOT_H;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="monospace" font-size="11">"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{LEFT}" y="16">per-class DSC by setting (boxes: csf, gm, wm)</text>"#
    );
    // y axis
    for tick in 0..=10 {
        let v = tick as f64 / 10.0;
        let y = y_of(v);
        let _ = writeln!(
            svg,
            r##"<line x1="{:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ccc"/><text x="10" y="{:.1}">{v:.1}</text>"##,
            LEFT - 6.0,
            width - 20.0,
            y + 4.0
        );
    }
    let colors = ["#c0392b", "#2980b9", "#27ae60"];
    for (si, setting) in settings.iter().enumerate() {
        let gx = LEFT + si as f64 * group_w;
        for (ci, class) in CLASSES.iter().enumerate() {
            let mut vals: Vec<f64> = bundle
                .rows
                .iter()
                .filter(|r| r.setting == *setting && r.class_name == *class)
                .map(|r| r.dsc)
                .collect();
            let Some(stats) = box_stats(&mut vals) else { continue };
            let x = gx + ci as f64 * (BOX_W + 6.0);
            let color = colors[ci];
            let (yq1, yq3) = (y_of(stats.q1), y_of(stats.q3));
            let _ = writeln!(
                svg,
                r#"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="{color}"/>"#,
                y_of(stats.min),
                y_of(stats.max),
                cx = x + BOX_W / 2.0,
            );
            let _ = writeln!(
                svg,
                r#"<rect x="{x:.1}" y="{yq3:.1}" width="{BOX_W:.1}" height="{:.1}" fill="{color}" fill-opacity="0.35" stroke="{color}"/>"#,
                (yq1 - yq3).max(0.5),
            );
            let _ = writeln!(
                svg,
                r#"<line x1="{x:.1}" y1="{ym:.1}" x2="{:.1}" y2="{ym:.1}" stroke="{color}" stroke-width="2"/>"#,
                x + BOX_W,
                ym = y_of(stats.median),
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" transform="rotate(45 {:.1} {:.1})">{setting}</text>"#,
            gx,
            TOP + PLOT_H + 20.0,
            gx,
            TOP + PLOT_H + 20.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// File set produced by [`emit_report`].
#[derive(Debug, Clone)]
pub struct ReportPaths {
    pub metrics_csv: PathBuf,
    pub summary_json: PathBuf,
    pub plot_svg: PathBuf,
    pub provenance: Vec<PathBuf>,
}

/// Write the bundle to `<dir>/metrics.csv`, `summary.json`,
/// `plots/dsc_boxplot.svg` and `provenance/*.json`. An empty bundle is an
/// error and nothing is written.
pub fn emit_report(bundle: &MetricsBundle, dir: impl AsRef<Path>) -> Result<ReportPaths> {
    if bundle.rows.is_empty() || bundle.settings.is_empty() {
        return Err(Error::InvalidArgument(
            "refusing to emit a report for an empty metrics bundle".into(),
        ));
    }
    let dir = dir.as_ref();
    let csv_path = dir.join("metrics.csv");
    write_text(&csv_path, &metrics_csv(bundle))?;
    let summary_path = dir.join("summary.json");
    write_text(&summary_path, &summary_json(bundle)?)?;
    let plot_path = dir.join("plots").join("dsc_boxplot.svg");
    write_text(&plot_path, &boxplot_svg(bundle))?;

    let mut provenance = Vec::new();
    let prov_dir = dir.join("provenance");
    let specs_path = prov_dir.join("architectures.json");
    write_text(
        &specs_path,
        &(serde_json::to_string_pretty(&bundle.provenance.specs)? + "\n"),
    )?;
    provenance.push(specs_path);
    let plans_path = prov_dir.join("plans.json");
    write_text(
        &plans_path,
        &(serde_json::to_string_pretty(&bundle.provenance.plans)? + "\n"),
    )?;
    provenance.push(plans_path);
    let seeds_path = prov_dir.join("seeds.json");
    write_text(
        &seeds_path,
        &(serde_json::to_string_pretty(&serde_json::json!({
            "master_seed": bundle.provenance.master_seed,
            "fold_seeds": bundle.provenance.fold_seeds,
        }))? + "\n"),
    )?;
    provenance.push(seeds_path);

    Ok(ReportPaths {
        metrics_csv: csv_path,
        summary_json: summary_path,
        plot_svg: plot_path,
        provenance,
    })
}
