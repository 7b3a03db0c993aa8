//! Minimal accuracy-versus-DI scatter plots.

use std::fmt::Write as _;

use super::SweepReport;
use crate::optimize::MethodKind;

const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 50.0;
const ACC_RANGE: (f64, f64) = (0.4, 1.0);
const DI_RANGE: (f64, f64) = (0.0, 1.05);

fn color(kind: MethodKind) -> &'static str {
    match kind {
        MethodKind::H => "#555555",
        MethodKind::TFpr | MethodKind::TFprF => "#1f77b4",
        MethodKind::Acc | MethodKind::AccF => "#d62728",
        MethodKind::DiAcc => "#2ca02c",
    }
}

fn x(acc: f64) -> f64 {
    MARGIN + (acc.clamp(ACC_RANGE.0, ACC_RANGE.1) - ACC_RANGE.0) / (ACC_RANGE.1 - ACC_RANGE.0) * (WIDTH - 2.0 * MARGIN)
}

fn y(di: f64) -> f64 {
    HEIGHT - MARGIN - (di.clamp(DI_RANGE.0, DI_RANGE.1) - DI_RANGE.0) / (DI_RANGE.1 - DI_RANGE.0) * (HEIGHT - 2.0 * MARGIN)
}

/// Sweep points as dots and unconstrained baselines as crosses for one
/// leak diameter.
pub fn pareto_panel(report: &SweepReport, d: f64) -> String {
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">d = {} m</text>"#, WIDTH / 2.0, d).unwrap();
    let (x0, x1, y0, y1) = (x(ACC_RANGE.0), x(ACC_RANGE.1), y(DI_RANGE.0), y(DI_RANGE.1));
    writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#).unwrap();
    writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#).unwrap();
    for i in 0..=6 {
        let acc = ACC_RANGE.0 + 0.1 * i as f64;
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{acc:.1}</text>"#, x(acc), y0 + 15.0).unwrap();
    }
    for i in 0..=5 {
        let di = 0.2 * i as f64;
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{di:.1}</text>"#, x0 - 5.0, y(di) + 4.0).unwrap();
    }
    writeln!(s, r##"<line x1="{x0}" y1="{:.1}" x2="{x1}" y2="{:.1}" stroke="#999" stroke-dasharray="4 3"/>"##, y(0.8), y(0.8)).unwrap();
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">ACC</text>"#, WIDTH / 2.0, HEIGHT - 12.0).unwrap();
    writeln!(s, r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">DI</text>"#, HEIGHT / 2.0, HEIGHT / 2.0).unwrap();

    for p in report.points.iter().filter(|p| p.diameter == d) {
        writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{}" fill-opacity="0.7"/>"#,
            x(p.accuracy),
            y(p.di),
            color(p.method)
        )
        .unwrap();
    }
    for (m, _, acc, di) in report.baselines.iter().filter(|b| b.1 == d) {
        let (cx, cy) = (x(*acc), y(*di));
        writeln!(
            s,
            r#"<path d="M{:.2} {:.2}L{:.2} {:.2}M{:.2} {:.2}L{:.2} {:.2}" stroke="{}" stroke-width="2"/>"#,
            cx - 5.0,
            cy - 5.0,
            cx + 5.0,
            cy + 5.0,
            cx - 5.0,
            cy + 5.0,
            cx + 5.0,
            cy - 5.0,
            color(*m)
        )
        .unwrap();
    }

    let mut methods: Vec<MethodKind> = report
        .points
        .iter()
        .map(|p| p.method)
        .chain(report.baselines.iter().map(|b| b.0))
        .collect();
    methods.sort();
    methods.dedup();
    for (i, m) in methods.iter().enumerate() {
        let ly = MARGIN + 14.0 * i as f64;
        writeln!(s, r#"<rect x="{}" y="{}" width="8" height="8" fill="{}"/>"#, x1 - 80.0, ly - 8.0, color(*m)).unwrap();
        writeln!(s, r#"<text x="{}" y="{ly}">{m}</text>"#, x1 - 68.0).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::super::SweepPoint;
    use super::*;

    #[test]
    fn panel_contains_points_and_crosses() {
        let report = SweepReport {
            points: vec![SweepPoint {
                method: MethodKind::AccF,
                diameter: 0.1,
                hyper: 0.011,
                accuracy: 0.7,
                di: 0.9,
            }],
            baselines: vec![(MethodKind::Acc, 0.1, 0.8, 0.6), (MethodKind::Acc, 0.05, 0.7, 0.5)],
            models: Vec::new(),
        };
        let svg = pareto_panel(&report, 0.1);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<circle").count(), 1);
        assert_eq!(svg.matches("<path").count(), 1);
    }
}
