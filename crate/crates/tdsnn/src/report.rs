//! Artifact emission: CSV tables and SVG heatmaps, all stamped with the
//! config hash and seed so a rerun with the same inputs reproduces every
//! file byte for byte (64-bit mode).
//!
//! Numbers are rendered with the shortest round-trip decimal form, so the
//! files are both stable and exact to reload.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Identity stamp embedded in every artifact.
#[derive(Debug, Clone)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn new(config_hash: impl Into<String>, seed: u64) -> Self {
        Provenance {
            config_hash: config_hash.into(),
            seed,
        }
    }

    fn comment(&self) -> String {
        format!("# config_hash={} seed={}", self.config_hash, self.seed)
    }
}

/// Render a float with full round-trip precision (shortest decimal that
/// parses back to the same bits).
pub fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        v.to_string()
    }
}

/// Write a CSV with a provenance comment line, a header row, and data rows.
pub fn write_csv(
    path: &Path,
    prov: &Provenance,
    header: &[&str],
    rows: &[Vec<String>],
) -> Result<()> {
    for (i, row) in rows.iter().enumerate() {
        if row.len() != header.len() {
            return Err(Error::Config(format!(
                "csv row {} has {} fields, header has {}",
                i,
                row.len(),
                header.len()
            )));
        }
    }
    let mut text = String::new();
    text.push_str(&prov.comment());
    text.push('\n');
    text.push_str(&header.join(","));
    text.push('\n');
    for row in rows {
        text.push_str(&row.join(","));
        text.push('\n');
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Fixed sequential colormap (light parchment → deep blue), linear in the
/// normalized value. Returns `#rrggbb`.
pub fn sequential_color(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    // Five anchor stops, linearly interpolated.
    const STOPS: [(f64, f64, f64); 5] = [
        (0.992, 0.965, 0.890),
        (0.780, 0.858, 0.886),
        (0.423, 0.684, 0.840),
        (0.164, 0.438, 0.694),
        (0.031, 0.188, 0.420),
    ];
    let x = t * (STOPS.len() - 1) as f64;
    let i = (x.floor() as usize).min(STOPS.len() - 2);
    let frac = x - i as f64;
    let lerp = |a: f64, b: f64| a + (b - a) * frac;
    let (r, g, b) = (
        lerp(STOPS[i].0, STOPS[i + 1].0),
        lerp(STOPS[i].1, STOPS[i + 1].1),
        lerp(STOPS[i].2, STOPS[i + 1].2),
    );
    format!(
        "#{:02x}{:02x}{:02x}",
        (r * 255.0).round() as u8,
        (g * 255.0).round() as u8,
        (b * 255.0).round() as u8
    )
}

/// Write a square heatmap as a standalone SVG with an embedded color scale.
/// `values` is row-major `n x n`; axis labels are the row/column indices.
pub fn svg_heatmap(
    path: &Path,
    prov: &Provenance,
    title: &str,
    n: usize,
    values: &[f64],
) -> Result<()> {
    if values.len() != n * n || n == 0 {
        return Err(Error::Config(format!(
            "heatmap needs n*n values, got {} for n={n}",
            values.len()
        )));
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in values {
        if !v.is_finite() {
            return Err(Error::Numeric("heatmap value not finite".into()));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let cell = 36usize;
    let margin = 48usize;
    let bar_w = 18usize;
    let width = margin + n * cell + 28 + bar_w + 64;
    let height = margin + n * cell + 36;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">"
    );
    let _ = writeln!(
        s,
        "<desc>config_hash={} seed={}</desc>",
        prov.config_hash, prov.seed
    );
    let _ = writeln!(
        s,
        "<text x=\"{margin}\" y=\"20\" font-family=\"monospace\" font-size=\"13\">{}</text>",
        xml_escape(title)
    );
    for r in 0..n {
        for c in 0..n {
            let v = values[r * n + c];
            let color = sequential_color((v - lo) / span);
            let x = margin + c * cell;
            let y = margin + r * cell;
            let _ = writeln!(
                s,
                "<rect x=\"{x}\" y=\"{y}\" width=\"{cell}\" height=\"{cell}\" fill=\"{color}\"><title>({r},{c}) {}</title></rect>",
                fmt_num(v)
            );
        }
    }
    // Axis labels.
    for i in 0..n {
        let cx = margin + i * cell + cell / 2;
        let cy = margin + i * cell + cell / 2 + 4;
        let _ = writeln!(
            s,
            "<text x=\"{cx}\" y=\"{}\" font-family=\"monospace\" font-size=\"11\" text-anchor=\"middle\">{i}</text>",
            margin - 8
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{cy}\" font-family=\"monospace\" font-size=\"11\" text-anchor=\"end\">{i}</text>",
            margin - 8
        );
    }
    // Color scale: vertical bar with min/max labels.
    let bar_x = margin + n * cell + 28;
    let bar_h = n * cell;
    let steps = 64usize;
    for k in 0..steps {
        let t = 1.0 - (k as f64 + 0.5) / steps as f64;
        let y = margin + k * bar_h / steps;
        let h = (margin + (k + 1) * bar_h / steps) - y;
        let _ = writeln!(
            s,
            "<rect x=\"{bar_x}\" y=\"{y}\" width=\"{bar_w}\" height=\"{h}\" fill=\"{}\"/>",
            sequential_color(t)
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"11\">{}</text>",
        bar_x + bar_w + 4,
        margin + 8,
        fmt_num(hi)
    );
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"11\">{}</text>",
        bar_x + bar_w + 4,
        margin + bar_h,
        fmt_num(lo)
    );
    let _ = writeln!(s, "</svg>");
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, s)?;
    Ok(())
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prov() -> Provenance {
        Provenance::new("deadbeef00000000", 7)
    }

    #[test]
    fn csv_has_provenance_then_header_then_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        write_csv(
            &path,
            &prov(),
            &["x", "y"],
            &[vec!["1".into(), "2".into()], vec!["3".into(), "4".into()]],
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# config_hash=deadbeef00000000 seed=7");
        assert_eq!(lines[1], "x,y");
        assert_eq!(lines[2], "1,2");
        assert_eq!(lines.len(), 4);
    }

    #[test]
    fn csv_rejects_ragged_rows() {
        let dir = tempfile::tempdir().unwrap();
        let err = write_csv(
            &dir.path().join("t.csv"),
            &prov(),
            &["x", "y"],
            &[vec!["1".into()]],
        )
        .err()
        .unwrap();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn identical_inputs_give_byte_identical_files() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![vec![fmt_num(0.1 + 0.2), fmt_num(1.0 / 3.0)]];
        let (p1, p2) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
        write_csv(&p1, &prov(), &["a", "b"], &rows).unwrap();
        write_csv(&p2, &prov(), &["a", "b"], &rows).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn numbers_round_trip_through_their_rendering() {
        for &v in &[0.1, 1.0 / 3.0, 1e-12, 123456.789, -0.0, 1.5e300] {
            let s = fmt_num(v);
            let back: f64 = s.parse().unwrap();
            assert_eq!(back.to_bits(), v.to_bits(), "{v} vs {s}");
        }
    }

    #[test]
    fn colormap_is_monotone_and_clamped() {
        assert_eq!(sequential_color(-1.0), sequential_color(0.0));
        assert_eq!(sequential_color(2.0), sequential_color(1.0));
        // Strictly darker blue channel at the extremes.
        assert_ne!(sequential_color(0.0), sequential_color(1.0));
    }

    #[test]
    fn heatmap_embeds_provenance_and_scale() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.svg");
        svg_heatmap(&path, &prov(), "demo", 2, &[0.0, 0.5, 0.5, 1.0]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("config_hash=deadbeef00000000 seed=7"));
        assert!(text.contains("</svg>"));
        assert!(text.matches("<rect").count() > 4, "cells plus scale bar");
        svg_heatmap(&path, &prov(), "bad", 2, &[0.0; 3]).unwrap_err();
    }
}
