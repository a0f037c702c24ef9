//! Cross-seed aggregation of run CSVs into per-policy mean curves with
//! min/max bands, plus a self-contained SVG rendering of those curves.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::HarnessError;
use crate::runner::parse_series;

pub const AGGREGATE_SCHEMA: &str = "#schema=aggregate_v1";
pub const AGGREGATE_HEADER: &str = "policy,step,mean,lo,hi";

/// One aggregated point: mean with the min/max band over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct BandPoint {
    pub step: usize,
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Aggregated curves keyed by policy name, in sorted order.
pub type Curves = BTreeMap<String, Vec<BandPoint>>;

/// Splits `name_seedN.csv` into the policy name; trace files and files that
/// do not match the pattern are skipped by the caller.
fn policy_of_filename(stem: &str) -> Option<&str> {
    let idx = stem.rfind("_seed")?;
    let tail = &stem[idx + 5..];
    if tail.is_empty() || !tail.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    Some(&stem[..idx])
}

/// Reads every run CSV under `dir` and aggregates per policy. All runs of a
/// policy must share the same step grid.
pub fn aggregate_dir(dir: &Path) -> Result<Curves, HarnessError> {
    let mut names: Vec<String> = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().into_string().unwrap_or_default();
        if name.ends_with(".csv") && !name.ends_with("_trace.csv") && name != "aggregate.csv" {
            names.push(name);
        }
    }
    names.sort();
    let mut per_policy: BTreeMap<String, Vec<Vec<(usize, f64)>>> = BTreeMap::new();
    for name in &names {
        let stem = name.trim_end_matches(".csv");
        let Some(policy) = policy_of_filename(stem) else {
            continue;
        };
        let text = fs::read_to_string(dir.join(name))?;
        let series = parse_series(&text)
            .map_err(|e| HarnessError::Format(format!("{name}: {e}")))?;
        per_policy.entry(policy.to_string()).or_default().push(series);
    }
    if per_policy.is_empty() {
        return Err(HarnessError::Format(format!(
            "no run CSVs found under {}",
            dir.display()
        )));
    }
    aggregate_series(per_policy)
}

/// Aggregates already parsed per-seed series.
pub fn aggregate_series(
    per_policy: BTreeMap<String, Vec<Vec<(usize, f64)>>>,
) -> Result<Curves, HarnessError> {
    let mut out = Curves::new();
    for (policy, runs) in per_policy {
        let steps: Vec<usize> = runs[0].iter().map(|&(s, _)| s).collect();
        for run in &runs[1..] {
            let other: Vec<usize> = run.iter().map(|&(s, _)| s).collect();
            if other != steps {
                return Err(HarnessError::Format(format!(
                    "runs of policy {policy} disagree on logged steps"
                )));
            }
        }
        let mut curve = Vec::with_capacity(steps.len());
        for (i, &step) in steps.iter().enumerate() {
            let values: Vec<f64> = runs.iter().map(|r| r[i].1).collect();
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            curve.push(BandPoint { step, mean, lo, hi });
        }
        out.insert(policy, curve);
    }
    Ok(out)
}

pub fn render_aggregate_csv(curves: &Curves) -> String {
    let mut out = String::new();
    out.push_str(AGGREGATE_SCHEMA);
    out.push('\n');
    out.push_str(AGGREGATE_HEADER);
    out.push('\n');
    for (policy, curve) in curves {
        for p in curve {
            let _ = writeln!(out, "{},{},{},{},{}", policy, p.step, p.mean, p.lo, p.hi);
        }
    }
    out
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Minimal line plot: per-policy mean curve plus a translucent min/max band,
/// axes with end ticks, and a legend. No external renderer involved.
pub fn render_svg(curves: &Curves, title: &str, y_label: &str) -> String {
    let (width, height) = (800.0, 500.0);
    let (ml, mr, mt, mb) = (70.0, 20.0, 40.0, 50.0);
    let (pw, ph) = (width - ml - mr, height - mt - mb);
    let mut x_max = 1.0f64;
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for curve in curves.values() {
        for p in curve {
            x_max = x_max.max(p.step as f64);
            y_min = y_min.min(p.lo);
            y_max = y_max.max(p.hi);
        }
    }
    if !y_min.is_finite() {
        y_min = 0.0;
        y_max = 1.0;
    }
    if (y_max - y_min).abs() < 1e-12 {
        y_max = y_min + 1.0;
    }
    let pad = 0.05 * (y_max - y_min);
    let (y_lo, y_hi) = (y_min - pad, y_max + pad);
    let sx = move |step: f64| ml + pw * step / x_max;
    let sy = move |v: f64| mt + ph * (1.0 - (v - y_lo) / (y_hi - y_lo));

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{title}</text>"#,
        ml + pw / 2.0
    );
    // Axes.
    let _ = writeln!(
        svg,
        r#"<line x1="{ml}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        mt + ph,
        ml + pw,
        mt + ph
    );
    let _ = writeln!(svg, r#"<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{}" stroke="black"/>"#, mt + ph);
    for (value, frac) in [(y_lo, 0.0), ((y_lo + y_hi) / 2.0, 0.5), (y_hi, 1.0)] {
        let y = mt + ph * (1.0 - frac);
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">{value:.3}</text>"#,
            ml - 6.0,
            y + 4.0
        );
    }
    for (step, frac) in [(0.0, 0.0), (x_max / 2.0, 0.5), (x_max, 1.0)] {
        let x = ml + pw * frac;
        let _ = writeln!(
            svg,
            r#"<text x="{x}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">{step:.0}</text>"#,
            mt + ph + 18.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">step</text>"#,
        ml + pw / 2.0,
        height - 12.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 16 {})">{y_label}</text>"#,
        mt + ph / 2.0,
        mt + ph / 2.0
    );

    for (i, (policy, curve)) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        // Band: forward along hi, back along lo.
        let mut band = String::new();
        for p in curve {
            let _ = write!(band, "{:.2},{:.2} ", sx(p.step as f64), sy(p.hi));
        }
        for p in curve.iter().rev() {
            let _ = write!(band, "{:.2},{:.2} ", sx(p.step as f64), sy(p.lo));
        }
        let _ = writeln!(
            svg,
            r#"<polygon points="{}" fill="{color}" fill-opacity="0.15" stroke="none"/>"#,
            band.trim_end()
        );
        let mut line = String::new();
        for p in curve {
            let _ = write!(line, "{:.2},{:.2} ", sx(p.step as f64), sy(p.mean));
        }
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.8"/>"#,
            line.trim_end()
        );
        let ly = mt + 14.0 + 16.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="3"/>"#,
            ml + pw - 150.0,
            ml + pw - 120.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12">{policy}</text>"#,
            ml + pw - 112.0,
            ly + 4.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}
