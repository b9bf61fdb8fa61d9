//! Result persistence: a long-format `results.csv`, a `config.json` echo
//! for provenance, and simple SVG line charts (thin per-seed lines plus a
//! bold mean). Output bytes are a pure function of the inputs; no
//! timestamps or environment data are written.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};

/// One measurement row. `seed` is textual so summary rows ("mean",
/// "median") can sit alongside per-seed rows.
#[derive(Debug, Clone, Serialize)]
pub struct ResultRow {
    pub experiment: String,
    pub scenario: String,
    pub score: String,
    pub n: usize,
    pub seed: String,
    pub foreground: String,
    pub value: f64,
    pub normalized_value: Option<f64>,
    pub decision: String,
}

impl ResultRow {
    pub fn new(
        experiment: &str,
        scenario: &str,
        score: &str,
        n: usize,
        seed: impl Into<String>,
        foreground: &str,
        value: f64,
    ) -> Self {
        ResultRow {
            experiment: experiment.to_string(),
            scenario: scenario.to_string(),
            score: score.to_string(),
            n,
            seed: seed.into(),
            foreground: foreground.to_string(),
            value,
            normalized_value: None,
            decision: String::new(),
        }
    }

    pub fn with_normalized(mut self, v: f64) -> Self {
        self.normalized_value = Some(v);
        self
    }

    pub fn with_decision(mut self, d: &str) -> Self {
        self.decision = d.to_string();
        self
    }
}

/// Write `results.csv` and `config.json` into `out_dir`, returning the
/// created paths.
pub fn emit_results(
    rows: &[ResultRow],
    config: &serde_json::Value,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let csv_path = out_dir.join("results.csv");
    let mut writer = csv::Writer::from_path(&csv_path)
        .map_err(|e| Error::io(&csv_path, std::io::Error::other(e)))?;
    for row in rows {
        writer
            .serialize(row)
            .map_err(|e| Error::io(&csv_path, std::io::Error::other(e)))?;
    }
    writer.flush().map_err(|e| Error::io(&csv_path, e))?;

    let config_path = out_dir.join("config.json");
    let body = serde_json::to_string_pretty(config)
        .map_err(|e| Error::Config(format!("config serialization failed: {e}")))?;
    std::fs::write(&config_path, body.as_bytes()).map_err(|e| Error::io(&config_path, e))?;

    Ok(vec![csv_path, config_path])
}

/// Read back a results.csv produced by [`emit_results`].
pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    #[derive(serde::Deserialize)]
    struct Raw {
        experiment: String,
        scenario: String,
        score: String,
        n: usize,
        seed: String,
        foreground: String,
        value: f64,
        normalized_value: Option<f64>,
        decision: String,
    }
    let mut reader =
        csv::Reader::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    let mut rows = Vec::new();
    for rec in reader.deserialize::<Raw>() {
        let r = rec.map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        rows.push(ResultRow {
            experiment: r.experiment,
            scenario: r.scenario,
            score: r.score,
            n: r.n,
            seed: r.seed,
            foreground: r.foreground,
            value: r.value,
            normalized_value: r.normalized_value,
            decision: r.decision,
        });
    }
    Ok(rows)
}

/// One polyline of a chart.
#[derive(Debug, Clone)]
pub struct PlotSeries {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub bold: bool,
}

const PLOT_W: f64 = 640.0;
const PLOT_H: f64 = 420.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 24.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 48.0;

fn escape_xml(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Write a line chart as a standalone SVG. X values are plotted on a log10
/// axis when they span more than a decade.
pub fn write_line_plot(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[PlotSeries],
) -> Result<()> {
    let points: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.points.iter().copied())
        .collect();
    if points.is_empty() {
        return Err(Error::Input("plot needs at least one point".into()));
    }
    let (mut x_min, mut x_max) = (f64::MAX, f64::MIN);
    let (mut y_min, mut y_max) = (f64::MAX, f64::MIN);
    for &(x, y) in &points {
        x_min = x_min.min(x);
        x_max = x_max.max(x);
        y_min = y_min.min(y);
        y_max = y_max.max(y);
    }
    let log_x = x_min > 0.0 && x_max / x_min > 10.0;
    let tx = |x: f64| if log_x { x.log10() } else { x };
    let (x_lo, x_hi) = (tx(x_min), tx(x_max));
    let x_span = (x_hi - x_lo).max(1e-12);
    if (y_max - y_min).abs() < 1e-12 {
        y_min -= 1.0;
        y_max += 1.0;
    }
    let y_pad = 0.05 * (y_max - y_min);
    let (y_lo, y_hi) = (y_min - y_pad, y_max + y_pad);
    let y_span = y_hi - y_lo;

    let to_px = |x: f64, y: f64| {
        let px = MARGIN_L + (tx(x) - x_lo) / x_span * (PLOT_W - MARGIN_L - MARGIN_R);
        let py = PLOT_H - MARGIN_B - (y - y_lo) / y_span * (PLOT_H - MARGIN_T - MARGIN_B);
        (px, py)
    };

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{PLOT_W}\" height=\"{PLOT_H}\" viewBox=\"0 0 {PLOT_W} {PLOT_H}\">\n"
    ));
    svg.push_str(&format!(
        "  <rect x=\"0\" y=\"0\" width=\"{PLOT_W}\" height=\"{PLOT_H}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "  <text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"15\" text-anchor=\"middle\">{}</text>\n",
        PLOT_W / 2.0,
        escape_xml(title)
    ));
    // Axes.
    svg.push_str(&format!(
        "  <line x1=\"{MARGIN_L}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        PLOT_H - MARGIN_B,
        PLOT_W - MARGIN_R,
        PLOT_H - MARGIN_B
    ));
    svg.push_str(&format!(
        "  <line x1=\"{MARGIN_L}\" y1=\"{MARGIN_T}\" x2=\"{MARGIN_L}\" y2=\"{}\" stroke=\"black\"/>\n",
        PLOT_H - MARGIN_B
    ));
    svg.push_str(&format!(
        "  <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n",
        (MARGIN_L + PLOT_W - MARGIN_R) / 2.0,
        PLOT_H - 12.0,
        escape_xml(x_label)
    ));
    svg.push_str(&format!(
        "  <text x=\"16\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>\n",
        (MARGIN_T + PLOT_H - MARGIN_B) / 2.0,
        (MARGIN_T + PLOT_H - MARGIN_B) / 2.0,
        escape_xml(y_label)
    ));
    // Axis extremes as tick labels.
    for (val, x_axis) in [(x_min, true), (x_max, true), (y_lo, false), (y_hi, false)] {
        let (px, py, anchor) = if x_axis {
            let (px, _) = to_px(val, y_lo);
            (px, PLOT_H - MARGIN_B + 16.0, "middle")
        } else {
            let (_, py) = to_px(x_min, val);
            (MARGIN_L - 6.0, py + 4.0, "end")
        };
        svg.push_str(&format!(
            "  <text x=\"{px:.1}\" y=\"{py:.1}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"{anchor}\">{val:.3}</text>\n"
        ));
    }

    let palette = [
        "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
    ];
    let mut color_index = 0usize;
    for s in series {
        if s.points.is_empty() {
            continue;
        }
        let color = if s.bold {
            let c = palette[color_index % palette.len()];
            color_index += 1;
            c
        } else {
            "#9aa7b1"
        };
        let width = if s.bold { 2.5 } else { 0.9 };
        let opacity = if s.bold { 1.0 } else { 0.6 };
        let coords: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| {
                let (px, py) = to_px(x, y);
                format!("{px:.2},{py:.2}")
            })
            .collect();
        svg.push_str(&format!(
            "  <polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"{width}\" stroke-opacity=\"{opacity}\"/>\n",
            coords.join(" ")
        ));
        if s.bold {
            svg.push_str(&format!(
                "  <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"{color}\">{}</text>\n",
                PLOT_W - MARGIN_R - 150.0,
                MARGIN_T + 14.0 * color_index as f64,
                escape_xml(&s.label)
            ));
        }
    }
    svg.push_str("</svg>\n");

    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(svg.as_bytes())
        .map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Minimal well-formedness check: every opened tag is closed in order.
    fn assert_well_formed_xml(body: &str) {
        let mut stack: Vec<String> = Vec::new();
        let mut rest = body;
        while let Some(start) = rest.find('<') {
            let end = rest[start..].find('>').expect("unclosed angle bracket") + start;
            let tag = &rest[start + 1..end];
            rest = &rest[end + 1..];
            if tag.starts_with('?') || tag.starts_with('!') {
                continue;
            }
            if let Some(name) = tag.strip_prefix('/') {
                let open = stack.pop().expect("closing tag with empty stack");
                assert_eq!(open, name, "mismatched tags");
            } else if !tag.ends_with('/') {
                let name = tag.split_whitespace().next().unwrap().to_string();
                stack.push(name);
            }
        }
        assert!(stack.is_empty(), "unclosed tags: {stack:?}");
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            ResultRow::new("toy", "ds", "svc", 100, "0", "f1_vs_f2", 1.25)
                .with_normalized(0.0125)
                .with_decision("f1"),
            ResultRow::new("toy", "ds", "svc", 100, "mean", "f1_vs_f2", 1.5),
        ];
        let config = serde_json::json!({"command": "toy", "seeds": [0]});
        emit_results(&rows, &config, dir.path()).unwrap();

        let back = read_results(&dir.path().join("results.csv")).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].value, 1.25);
        assert_eq!(back[0].normalized_value, Some(0.0125));
        assert_eq!(back[1].normalized_value, None);
        assert_eq!(back[0].decision, "f1");
        assert_eq!(back[1].seed, "mean");
    }

    #[test]
    fn emission_is_byte_deterministic() {
        let rows = vec![
            ResultRow::new("toy", "ms", "svc", 1000, "3", "f1_vs_f2", -0.75)
                .with_normalized(-0.00075),
        ];
        let config = serde_json::json!({"command": "toy"});
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        emit_results(&rows, &config, d1.path()).unwrap();
        emit_results(&rows, &config, d2.path()).unwrap();
        let a = std::fs::read(d1.path().join("results.csv")).unwrap();
        let b = std::fs::read(d2.path().join("results.csv")).unwrap();
        assert_eq!(a, b);
        let ca = std::fs::read(d1.path().join("config.json")).unwrap();
        let cb = std::fs::read(d2.path().join("config.json")).unwrap();
        assert_eq!(ca, cb);
    }

    #[test]
    fn plot_is_valid_svg() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plot_test.svg");
        let series = vec![
            PlotSeries {
                label: "seed 0".into(),
                points: vec![(100.0, 0.5), (1000.0, 1.4), (10000.0, 1.9)],
                bold: false,
            },
            PlotSeries {
                label: "mean".into(),
                points: vec![(100.0, 0.6), (1000.0, 1.5), (10000.0, 2.0)],
                bold: true,
            },
        ];
        write_line_plot(&path, "title & <check>", "n", "statistic", &series).unwrap();
        let body = std::fs::read_to_string(&path).unwrap();
        assert!(body.starts_with("<svg"));
        assert_well_formed_xml(&body);
    }
}
