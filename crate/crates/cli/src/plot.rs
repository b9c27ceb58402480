//! SVG report plots from a run's metrics document: per-class confidence
//! histograms with threshold markers, the |H| trace, student accuracy
//! curves, and sweep charts (accuracy vs N, M or q) when pointed at a
//! directory of runs.

use std::fmt::Write as _;
use std::path::Path;

use dbkd_core::metrics::MetricsDoc;

use crate::pipeline::PipelineError;

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 56.0;

struct Svg {
    body: String,
}

impl Svg {
    fn new(title: &str) -> Self {
        let mut body = String::new();
        let _ = write!(
            body,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">
<rect width="{W}" height="{H}" fill="white"/>
<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{title}</text>
"#,
            W / 2.0
        );
        Svg { body }
    }

    fn axes(&mut self, x_label: &str, y_label: &str) {
        let _ = write!(
            self.body,
            r#"<line x1="{m}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/>
<line x1="{m}" y1="{t}" x2="{m}" y2="{b}" stroke="black"/>
<text x="{cx}" y="{ly}" font-family="sans-serif" font-size="12" text-anchor="middle">{x_label}</text>
<text x="16" y="{cy}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 16 {cy})">{y_label}</text>
"#,
            m = MARGIN,
            r = W - MARGIN / 2.0,
            t = 40.0,
            b = H - MARGIN,
            cx = W / 2.0,
            ly = H - 16.0,
            cy = H / 2.0,
        );
    }

    fn finish(mut self) -> String {
        self.body.push_str("</svg>\n");
        self.body
    }
}

fn x_of(frac: f64) -> f64 {
    MARGIN + frac * (W - 1.5 * MARGIN)
}

fn y_of(frac: f64) -> f64 {
    (H - MARGIN) - frac * (H - MARGIN - 40.0)
}

fn polyline(points: &[(f64, f64)], color: &str) -> String {
    let pts: Vec<String> = points.iter().map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
    format!(
        r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>
"#,
        pts.join(" ")
    )
}

/// Histogram bars over [lo, hi] with a vertical threshold marker.
pub fn histogram_svg(
    title: &str,
    lo: f64,
    hi: f64,
    counts: &[u64],
    tau: f64,
) -> String {
    let mut svg = Svg::new(title);
    svg.axes("confidence score", "count");
    let maxc = counts.iter().copied().max().unwrap_or(1).max(1) as f64;
    let n = counts.len() as f64;
    for (i, &c) in counts.iter().enumerate() {
        let x0 = x_of(i as f64 / n);
        let x1 = x_of((i as f64 + 1.0) / n);
        let y = y_of(c as f64 / maxc);
        let _ = write!(
            svg.body,
            r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="steelblue" stroke="white"/>
"#,
            x0,
            y,
            (x1 - x0).max(1.0),
            (H - MARGIN) - y
        );
    }
    let tx = x_of(((tau - lo) / (hi - lo)).clamp(0.0, 1.0));
    let _ = write!(
        svg.body,
        r#"<line x1="{tx:.1}" y1="40" x2="{tx:.1}" y2="{:.1}" stroke="crimson" stroke-width="2"/>
<text x="{tx:.1}" y="36" font-family="sans-serif" font-size="11" fill="crimson" text-anchor="middle">tau={tau:.3}</text>
"#,
        H - MARGIN
    );
    // x-axis endpoints
    let _ = write!(
        svg.body,
        r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="10" text-anchor="middle">{lo:.2}</text>
<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="10" text-anchor="middle">{hi:.2}</text>
"#,
        x_of(0.0),
        H - MARGIN + 14.0,
        x_of(1.0),
        H - MARGIN + 14.0
    );
    svg.finish()
}

fn series_svg(title: &str, x_label: &str, y_label: &str, series: &[(&str, Vec<(f64, f64)>)]) -> String {
    let mut svg = Svg::new(title);
    svg.axes(x_label, y_label);
    let all: Vec<(f64, f64)> = series.iter().flat_map(|(_, pts)| pts.iter().copied()).collect();
    if all.is_empty() {
        return svg.finish();
    }
    let (mut xmin, mut xmax) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in &all {
        xmin = xmin.min(*x);
        xmax = xmax.max(*x);
        ymin = ymin.min(*y);
        ymax = ymax.max(*y);
    }
    if (xmax - xmin).abs() < 1e-12 {
        xmax = xmin + 1.0;
    }
    if (ymax - ymin).abs() < 1e-12 {
        ymax = ymin + 1.0;
    }
    let colors = ["steelblue", "crimson", "seagreen", "darkorange", "purple"];
    for (si, (name, pts)) in series.iter().enumerate() {
        let color = colors[si % colors.len()];
        let mapped: Vec<(f64, f64)> = pts
            .iter()
            .map(|(x, y)| (x_of((x - xmin) / (xmax - xmin)), y_of((y - ymin) / (ymax - ymin))))
            .collect();
        svg.body.push_str(&polyline(&mapped, color));
        let _ = write!(
            svg.body,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" fill="{color}">{name}</text>
"#,
            W - MARGIN / 2.0 - 110.0,
            52.0 + 14.0 * si as f64
        );
    }
    // y-axis endpoints
    let _ = write!(
        svg.body,
        r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="10" text-anchor="end">{ymin:.3}</text>
<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="10" text-anchor="end">{ymax:.3}</text>
"#,
        MARGIN - 4.0,
        y_of(0.0),
        MARGIN - 4.0,
        y_of(1.0)
    );
    svg.finish()
}

/// Emits plots for a single run directory containing metrics.json.
pub fn plot_run(run_dir: &Path) -> Result<Vec<std::path::PathBuf>, PipelineError> {
    let metrics_path = run_dir.join("metrics.json");
    let text = std::fs::read_to_string(&metrics_path)
        .map_err(|_| PipelineError::MissingArtifact(metrics_path.display().to_string()))?;
    let doc: MetricsDoc = serde_json::from_str(&text)
        .map_err(|e| PipelineError::MissingArtifact(format!("metrics.json: {e}")))?;

    let plots = run_dir.join("plots");
    std::fs::create_dir_all(&plots)
        .map_err(|e| PipelineError::Stage { stage: "plot", message: e.to_string() })?;
    let mut written = Vec::new();

    for (k, hist) in doc.thresholds.histograms.iter().enumerate() {
        let svg = histogram_svg(
            &format!("class {k} confidence scores ({})", doc.dataset),
            hist.lo,
            hist.hi,
            &hist.counts,
            doc.thresholds.tau[k],
        );
        let p = plots.join(format!("confidence_class_{k}.svg"));
        std::fs::write(&p, svg)
            .map_err(|e| PipelineError::Stage { stage: "plot", message: e.to_string() })?;
        written.push(p);
    }

    let h_pts: Vec<(f64, f64)> = doc
        .gan
        .h_size_trace
        .iter()
        .enumerate()
        .map(|(i, &h)| (i as f64, h as f64))
        .collect();
    let svg = series_svg(
        "high-confidence set size per step",
        "generator step",
        "|H|",
        &[("|H|", h_pts)],
    );
    let p = plots.join("h_trace.svg");
    std::fs::write(&p, svg)
        .map_err(|e| PipelineError::Stage { stage: "plot", message: e.to_string() })?;
    written.push(p);

    let series: Vec<(&str, Vec<(f64, f64)>)> = doc
        .students
        .iter()
        .map(|s| {
            (
                s.variant.as_str(),
                s.accuracy_curve
                    .iter()
                    .enumerate()
                    .map(|(i, &a)| (i as f64, a))
                    .collect::<Vec<_>>(),
            )
        })
        .collect();
    let svg = series_svg("student test accuracy", "epoch", "accuracy", &series);
    let p = plots.join("student_accuracy.svg");
    std::fs::write(&p, svg)
        .map_err(|e| PipelineError::Stage { stage: "plot", message: e.to_string() })?;
    written.push(p);

    Ok(written)
}

/// Sweep plots across sibling run directories: accuracy versus N, M and
/// q for Standard-KD and DivBFKD.
pub fn plot_sweep(root: &Path) -> Result<Vec<std::path::PathBuf>, PipelineError> {
    let mut rows: Vec<(f64, f64, f64, f64, f64)> = Vec::new(); // (n, m, q, std_kd, divbfkd)
    for entry in std::fs::read_dir(root)
        .map_err(|e| PipelineError::Stage { stage: "plot", message: e.to_string() })?
    {
        let entry = entry.map_err(|e| PipelineError::Stage { stage: "plot", message: e.to_string() })?;
        let mp = entry.path().join("metrics.json");
        let cp = entry.path().join("config.resolved.json");
        if !mp.exists() || !cp.exists() {
            continue;
        }
        let Ok(doc) = serde_json::from_str::<MetricsDoc>(&std::fs::read_to_string(&mp).unwrap_or_default()) else {
            continue;
        };
        let Ok(cfg) = serde_json::from_str::<serde_json::Value>(&std::fs::read_to_string(&cp).unwrap_or_default()) else {
            continue;
        };
        let acc = |name: &str| {
            doc.students
                .iter()
                .find(|s| s.variant == name)
                .map(|s| s.final_accuracy)
                .unwrap_or(0.0)
        };
        rows.push((
            cfg["n_real"].as_u64().unwrap_or(0) as f64,
            cfg["m_synthetic"].as_u64().unwrap_or(0) as f64,
            cfg["quantile"].as_f64().unwrap_or(0.0),
            acc("standard_kd"),
            acc("divbfkd"),
        ));
    }
    if rows.is_empty() {
        return Err(PipelineError::MissingArtifact(format!(
            "no run directories with metrics.json under {}",
            root.display()
        )));
    }
    let plots = root.join("plots");
    std::fs::create_dir_all(&plots)
        .map_err(|e| PipelineError::Stage { stage: "plot", message: e.to_string() })?;
    let mut written = Vec::new();
    for (idx, x_label, file) in
        [(0usize, "N (real images)", "accuracy_vs_n.svg"), (1, "M (synthetic images)", "accuracy_vs_m.svg"), (2, "q (quantile)", "accuracy_vs_q.svg")]
    {
        let mut sorted = rows.clone();
        sorted.sort_by(|a, b| pick(a, idx).partial_cmp(&pick(b, idx)).unwrap());
        let std_kd: Vec<(f64, f64)> = sorted.iter().map(|r| (pick(r, idx), r.3)).collect();
        let div: Vec<(f64, f64)> = sorted.iter().map(|r| (pick(r, idx), r.4)).collect();
        let svg = series_svg(
            &format!("accuracy vs {x_label}"),
            x_label,
            "accuracy",
            &[("standard_kd", std_kd), ("divbfkd", div)],
        );
        let p = plots.join(file);
        std::fs::write(&p, svg)
            .map_err(|e| PipelineError::Stage { stage: "plot", message: e.to_string() })?;
        written.push(p);
    }
    Ok(written)
}

fn pick(r: &(f64, f64, f64, f64, f64), idx: usize) -> f64 {
    match idx {
        0 => r.0,
        1 => r.1,
        _ => r.2,
    }
}
