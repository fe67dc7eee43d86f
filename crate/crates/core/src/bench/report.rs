//! CSV and SVG writers for benchmark reports.

use std::fmt::Write as _;
use std::io::Write;

use super::{BenchReport, CurvePoint, RANDOM_LABEL};
use crate::error::Result;

/// `scenario,method,t,gap`; the baseline row is the mean over repetitions.
pub fn write_runs_csv<W: Write>(out: W, report: &BenchReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["scenario", "method", "t", "gap"])?;
    for run in &report.runs {
        for (t, g) in run.gaps.iter().enumerate() {
            w.write_record([run.scenario.to_string(), run.method.clone(), (t + 1).to_string(), g.to_string()])?;
        }
    }
    for (s, gaps) in report.baseline_runs.iter().enumerate() {
        for (t, g) in gaps.iter().enumerate() {
            w.write_record([s.to_string(), RANDOM_LABEL.to_string(), (t + 1).to_string(), g.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `method,t,mean_gap,std_err,n`.
pub fn write_curves_csv<W: Write>(out: W, curves: &[CurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for c in curves {
        w.serialize(c)?;
    }
    if curves.is_empty() {
        w.write_record(["method", "t", "mean_gap", "std_err", "n"])?;
    }
    w.flush()?;
    Ok(())
}

/// `scenario,method,step,error` for runs that ended with an error.
pub fn write_failures_csv<W: Write>(out: W, report: &BenchReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["scenario", "method", "step", "error"])?;
    for run in &report.runs {
        if let Some(f) = &run.failure {
            w.write_record([run.scenario.to_string(), run.method.clone(), (run.records.len() + 1).to_string(), f.clone()])?;
        }
    }
    w.flush()?;
    Ok(())
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Mean gap against query index, one polyline per method.
pub fn write_curves_svg(curves: &[CurvePoint], title: &str) -> String {
    let (w, h, pad) = (640.0, 400.0, 50.0);
    let mut methods: Vec<&str> = Vec::new();
    for c in curves {
        if !methods.contains(&c.method.as_str()) {
            methods.push(&c.method);
        }
    }
    let t_max = curves.iter().map(|c| c.t).max().unwrap_or(1).max(1) as f64;
    let g_max = curves.iter().map(|c| c.mean_gap).fold(0.0f64, f64::max).max(1e-9);
    let sx = |t: f64| pad + (t - 1.0).max(0.0) / (t_max - 1.0).max(1.0) * (w - 2.0 * pad);
    let sy = |g: f64| h - pad - g / g_max * (h - 2.0 * pad);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<path d="M{pad},{pad} V{} H{}" fill="none" stroke="black"/>"#,
        h - pad,
        w - pad
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">query</text>"#, w / 2.0, h - 15.0);
    let _ = writeln!(s, r#"<text x="15" y="{}" transform="rotate(-90 15 {})" text-anchor="middle">mean gap</text>"#, h / 2.0, h / 2.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{g_max:.3}</text>"#, pad - 4.0, pad + 4.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">0</text>"#, pad - 4.0, h - pad + 4.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{t_max}</text>"#, w - pad, h - pad + 16.0);
    for (k, m) in methods.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let points: Vec<String> = curves
            .iter()
            .filter(|c| c.method == *m)
            .map(|c| format!("{:.2},{:.2}", sx(c.t as f64), sy(c.mean_gap)))
            .collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, points.join(" "));
        let y = pad + 16.0 * k as f64;
        let _ = writeln!(s, r#"<text x="{}" y="{y}" fill="{color}">{}</text>"#, w - pad - 100.0, escape(m));
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
