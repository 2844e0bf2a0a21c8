//! Survival curves as long-form CSV and standalone SVG step plots.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;
use crate::survival::SurvivalCurve;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 48.0;
const COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

/// `curve,time,probability`, one row per step point.
pub fn write_curves_csv(path: &Path, curves: &[(String, SurvivalCurve)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["curve", "time", "probability"])?;
    for (name, c) in curves {
        for (t, p) in c.times.iter().zip(&c.probabilities) {
            w.write_record([name.clone(), t.to_string(), p.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// One `<path>` per curve; axes and legend use other elements.
pub fn render_svg(title: &str, curves: &[(String, SurvivalCurve)]) -> String {
    let t_max = curves
        .iter()
        .flat_map(|(_, c)| c.times.last().copied())
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE);
    let x = |t: f64| MARGIN + (WIDTH - 2.0 * MARGIN) * t / t_max;
    let y = |p: f64| HEIGHT - MARGIN - (HEIGHT - 2.0 * MARGIN) * p;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(s, r#"<title>{}</title>"#, escape(title));
    let _ = writeln!(
        s,
        r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let (x0, x1, y0, y1) = (x(0.0), x(t_max), y(0.0), y(1.0));
    let _ = writeln!(
        s,
        r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">time</text>"#,
        (x0 + x1) / 2.0,
        HEIGHT - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="end">1</text>"#,
        x0 - 4.0,
        y1 + 4.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="end">0</text>"#,
        x0 - 4.0,
        y0 + 4.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="end">{}</text>"#,
        x1,
        y0 + 16.0,
        fmt_num(t_max)
    );
    for (i, (name, c)) in curves.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let mut d = format!("M{:.2} {:.2}", x(c.times[0]), y(c.probabilities[0]));
        for w in 1..c.times.len() {
            let _ = write!(d, " H{:.2} V{:.2}", x(c.times[w]), y(c.probabilities[w]));
        }
        let _ = writeln!(
            s,
            r#"<path d="{d}" fill="none" stroke="{color}" stroke-width="1.5"><title>{}</title></path>"#,
            escape(name)
        );
        let ly = MARGIN + 14.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{ly}" font-size="11" fill="{color}" text-anchor="end">{}</text>"#,
            WIDTH - MARGIN,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn fmt_num(v: f64) -> String {
    if v >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

/// Writes `<stem>.csv` and `<stem>.svg` into `dir`.
pub fn write_plot(
    dir: &Path,
    stem: &str,
    title: &str,
    curves: &[(String, SurvivalCurve)],
) -> Result<()> {
    write_curves_csv(&dir.join(format!("{stem}.csv")), curves)?;
    std::fs::write(dir.join(format!("{stem}.svg")), render_svg(title, curves))?;
    Ok(())
}
