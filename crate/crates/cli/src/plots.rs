//! Static SVG figures of a metric report: a confusion matrix heat map and
//! per-class F1 bars.

use std::fmt::Write;

use amsgcn_core::metrics::MetricReport;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Confusion matrix with rows as true classes; cell shade is the row share.
pub fn confusion_svg(report: &MetricReport, title: &str) -> String {
    let n = report.class_names.len();
    let (cell, left, top) = (64.0, 140.0, 70.0);
    let width = left + cell * n as f64 + 20.0;
    let height = top + cell * n as f64 + 60.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, width / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">predicted</text>"#,
        left + cell * n as f64 / 2.0,
        top - 30.0
    );
    let _ = writeln!(s, r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">true</text>"#, top + cell * n as f64 / 2.0, top + cell * n as f64 / 2.0);
    for (j, name) in report.class_names.iter().enumerate() {
        let x = left + cell * (j as f64 + 0.5);
        let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{}</text>"#, top - 8.0, escape(name));
        let y = top + cell * (j as f64 + 0.5) + 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{y}" text-anchor="end">{}</text>"#, left - 8.0, escape(name));
    }
    for (i, row) in report.confusion_matrix.iter().enumerate() {
        let total: u64 = row.iter().sum();
        for (j, &count) in row.iter().enumerate() {
            let share = if total == 0 { 0.0 } else { count as f64 / total as f64 };
            let shade = (255.0 * (1.0 - 0.8 * share)).round() as u8;
            let (x, y) = (left + cell * j as f64, top + cell * i as f64);
            let _ = writeln!(
                s,
                r##"<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="rgb({shade},{shade},255)" stroke="#666"/>"##
            );
            let color = if share > 0.6 { "white" } else { "black" };
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle" fill="{color}">{count}</text>"#,
                x + cell / 2.0,
                y + cell / 2.0 + 4.0
            );
        }
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">weighted F1 {:.3}, accuracy {:.3}</text>"#,
        width / 2.0,
        height - 20.0,
        report.weighted_f1,
        report.accuracy
    );
    s.push_str("</svg>\n");
    s
}

/// Horizontal bars of each class's F1 on a 0 to 1 axis.
pub fn f1_bars_svg(report: &MetricReport, title: &str) -> String {
    let n = report.class_names.len();
    let (bar, gap, left, top, span) = (22.0, 10.0, 140.0, 40.0, 300.0);
    let width = left + span + 70.0;
    let height = top + (bar + gap) * n as f64 + 40.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, width / 2.0, escape(title));
    for (i, (name, &f1)) in report.class_names.iter().zip(&report.per_class_f1).enumerate() {
        let y = top + (bar + gap) * i as f64;
        let w = span * f1.clamp(0.0, 1.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, left - 8.0, y + bar / 2.0 + 4.0, escape(name));
        let _ = writeln!(s, r##"<rect x="{left}" y="{y}" width="{w}" height="{bar}" fill="#4a78c2"/>"##);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{f1:.3}</text>"#, left + w + 6.0, y + bar / 2.0 + 4.0);
    }
    let axis_y = top + (bar + gap) * n as f64;
    let _ = writeln!(s, r#"<line x1="{left}" y1="{axis_y}" x2="{}" y2="{axis_y}" stroke="black"/>"#, left + span);
    for k in 0..=4 {
        let x = left + span * k as f64 / 4.0;
        let _ = writeln!(s, r#"<line x1="{x}" y1="{axis_y}" x2="{x}" y2="{}" stroke="black"/>"#, axis_y + 4.0);
        let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{:.2}</text>"#, axis_y + 18.0, k as f64 / 4.0);
    }
    s.push_str("</svg>\n");
    s
}
