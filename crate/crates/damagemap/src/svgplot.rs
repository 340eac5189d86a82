//! Minimal deterministic SVG plotting: line charts with optional ±σ bands
//! and bar charts with error bars.
//!
//! Charts are rendered by string assembly with fixed-precision coordinates,
//! so identical inputs always produce byte-identical files — the report
//! artifacts can be diffed and golden-tested. Only the features the metric
//! reports need are implemented; this is not a general plotting layer.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Colorblind-safe line/bar color cycle (Okabe–Ito).
pub const PALETTE: [&str; 6] =
    ["#0072b2", "#d55e00", "#009e73", "#cc79a7", "#e69f00", "#56b4e9"];

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 480.0;
const MARGIN_LEFT: f64 = 72.0;
const MARGIN_RIGHT: f64 = 24.0;
const MARGIN_TOP: f64 = 46.0;
const MARGIN_BOTTOM: f64 = 58.0;

/// One plotted line; `band` optionally carries a (low, high) envelope
/// aligned index-for-index with `points`.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub band: Option<Vec<(f64, f64)>>,
}

impl Series {
    pub fn new(label: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self { label: label.into(), points, band: None }
    }

    pub fn with_band(mut self, band: Vec<(f64, f64)>) -> Self {
        self.band = Some(band);
        self
    }
}

/// One bar with a symmetric error whisker.
#[derive(Debug, Clone)]
pub struct Bar {
    pub label: String,
    pub value: f64,
    pub error: f64,
}

fn fmt_coord(v: f64) -> String {
    let s = format!("{v:.2}");
    if s == "-0.00" { "0.00".into() } else { s }
}

fn fmt_tick(v: f64) -> String {
    let mut s = format!("{v:.4}");
    while s.contains('.') && (s.ends_with('0') || s.ends_with('.')) {
        let last = s.pop();
        if last == Some('.') {
            break;
        }
    }
    if s == "-0" {
        s = "0".into();
    }
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Frame {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn from_ranges(x: (f64, f64), y: (f64, f64)) -> Self {
        let pad = |(lo, hi): (f64, f64)| {
            if lo == hi {
                (lo - 0.5, hi + 0.5)
            } else {
                let p = (hi - lo) * 0.05;
                (lo - p, hi + p)
            }
        };
        let (x_min, x_max) = pad(x);
        let (y_min, y_max) = pad(y);
        Frame { x_min, x_max, y_min, y_max }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN_LEFT + (x - self.x_min) / (self.x_max - self.x_min) * (WIDTH - MARGIN_LEFT - MARGIN_RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN_BOTTOM
            - (y - self.y_min) / (self.y_max - self.y_min) * (HEIGHT - MARGIN_TOP - MARGIN_BOTTOM)
    }
}

fn open_svg(title: &str) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    s.push_str(&format!(
        "<rect x=\"0\" y=\"0\" width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"#ffffff\"/>\n"
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"24\" font-family=\"monospace\" font-size=\"15\" \
         text-anchor=\"middle\">{}</text>\n",
        WIDTH / 2.0,
        escape(title)
    ));
    s
}

fn draw_axes(s: &mut String, frame: &Frame, x_label: &str, y_label: &str) {
    let x0 = MARGIN_LEFT;
    let x1 = WIDTH - MARGIN_RIGHT;
    let y0 = HEIGHT - MARGIN_BOTTOM;
    let y1 = MARGIN_TOP;
    let _ = writeln!(
        s,
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"#333333\"/>\n\
         <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"#333333\"/>"
    );
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let xv = frame.x_min + t * (frame.x_max - frame.x_min);
        let yv = frame.y_min + t * (frame.y_max - frame.y_min);
        let xp = fmt_coord(frame.px(xv));
        let yp = fmt_coord(frame.py(yv));
        let _ = writeln!(
            s,
            "<line x1=\"{xp}\" y1=\"{y0}\" x2=\"{xp}\" y2=\"{}\" stroke=\"#333333\"/>",
            y0 + 4.0
        );
        let _ = writeln!(
            s,
            "<text x=\"{xp}\" y=\"{}\" font-family=\"monospace\" font-size=\"11\" \
             text-anchor=\"middle\">{}</text>",
            y0 + 18.0,
            fmt_tick(xv)
        );
        let _ = writeln!(
            s,
            "<line x1=\"{}\" y1=\"{yp}\" x2=\"{x0}\" y2=\"{yp}\" stroke=\"#333333\"/>",
            x0 - 4.0
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"11\" \
             text-anchor=\"end\">{}</text>",
            x0 - 8.0,
            fmt_coord(frame.py(yv) + 4.0),
            fmt_tick(yv)
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"12\" \
         text-anchor=\"middle\">{}</text>",
        (x0 + x1) / 2.0,
        HEIGHT - 16.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        "<text x=\"18\" y=\"{}\" font-family=\"monospace\" font-size=\"12\" \
         text-anchor=\"middle\" transform=\"rotate(-90 18 {})\">{}</text>",
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    );
}

fn check_finite(values: impl IntoIterator<Item = f64>) -> Result<()> {
    for v in values {
        if !v.is_finite() {
            return Err(Error::InvalidInput(format!("non-finite plot value {v}")));
        }
    }
    Ok(())
}

/// Renders a line chart; series with bands get a translucent ±σ envelope.
pub fn line_chart(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
) -> Result<()> {
    if series.is_empty() || series.iter().any(|s| s.points.is_empty()) {
        return Err(Error::InvalidInput("line chart needs at least one non-empty series".into()));
    }
    for s in series {
        check_finite(s.points.iter().flat_map(|&(x, y)| [x, y]))?;
        if let Some(band) = &s.band {
            if band.len() != s.points.len() {
                return Err(Error::InvalidInput(format!(
                    "band length {} does not match {} points in series {}",
                    band.len(),
                    s.points.len(),
                    s.label
                )));
            }
            check_finite(band.iter().flat_map(|&(lo, hi)| [lo, hi]))?;
        }
    }

    let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
    let x_range = xs.clone().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    let mut y_lo = f64::INFINITY;
    let mut y_hi = f64::NEG_INFINITY;
    for s in series {
        for &(_, y) in &s.points {
            y_lo = y_lo.min(y);
            y_hi = y_hi.max(y);
        }
        if let Some(band) = &s.band {
            for &(lo, hi) in band {
                y_lo = y_lo.min(lo);
                y_hi = y_hi.max(hi);
            }
        }
    }
    let frame = Frame::from_ranges(x_range, (y_lo, y_hi));

    let mut svg = open_svg(title);
    draw_axes(&mut svg, &frame, x_label, y_label);

    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if let Some(band) = &s.band {
            let mut d = String::from("M");
            for (&(x, _), &(_, hi)) in s.points.iter().zip(band) {
                let _ = write!(d, " {},{}", fmt_coord(frame.px(x)), fmt_coord(frame.py(hi)));
            }
            for (&(x, _), &(lo, _)) in s.points.iter().zip(band).rev() {
                let _ = write!(d, " L {},{}", fmt_coord(frame.px(x)), fmt_coord(frame.py(lo)));
            }
            d.push_str(" Z");
            let _ = writeln!(
                svg,
                "<path d=\"{d}\" fill=\"{color}\" fill-opacity=\"0.15\" stroke=\"none\"/>"
            );
        }
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{},{}", fmt_coord(frame.px(x)), fmt_coord(frame.py(y))))
            .collect();
        let _ = writeln!(
            svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>",
            pts.join(" ")
        );
    }

    // Legend, top-right inside the plot area.
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let y = MARGIN_TOP + 14.0 + 16.0 * i as f64;
        let x = WIDTH - MARGIN_RIGHT - 150.0;
        let _ = writeln!(
            svg,
            "<line x1=\"{x}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"{color}\" \
             stroke-width=\"2\"/>\n\
             <text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"11\">{}</text>",
            x + 18.0,
            x + 24.0,
            y + 4.0,
            escape(&s.label)
        );
    }

    svg.push_str("</svg>\n");
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}

/// Renders a bar chart with symmetric error whiskers; bars rise from 0.
pub fn bar_chart(path: &Path, title: &str, y_label: &str, bars: &[Bar]) -> Result<()> {
    if bars.is_empty() {
        return Err(Error::InvalidInput("bar chart needs at least one bar".into()));
    }
    check_finite(bars.iter().flat_map(|b| [b.value, b.error]))?;
    if bars.iter().any(|b| b.error < 0.0) {
        return Err(Error::InvalidInput("bar errors must be >= 0".into()));
    }

    let y_lo = bars.iter().map(|b| (b.value - b.error).min(0.0)).fold(0.0, f64::min);
    let y_hi = bars.iter().map(|b| b.value + b.error).fold(f64::EPSILON, f64::max);
    let frame = Frame::from_ranges((0.0, bars.len() as f64), (y_lo, y_hi));

    let mut svg = open_svg(title);
    draw_axes(&mut svg, &frame, "", y_label);

    let slot = 1.0;
    let bar_w = 0.6 * slot;
    for (i, b) in bars.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let cx = i as f64 + 0.5;
        let x = frame.px(cx - bar_w / 2.0);
        let w = frame.px(cx + bar_w / 2.0) - x;
        let y_value = frame.py(b.value);
        let y_zero = frame.py(0.0);
        let _ = writeln!(
            svg,
            "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{color}\"/>",
            fmt_coord(x),
            fmt_coord(y_value.min(y_zero)),
            fmt_coord(w),
            fmt_coord((y_zero - y_value).abs().max(0.5))
        );
        if b.error > 0.0 {
            let xm = fmt_coord(frame.px(cx));
            let ylo = fmt_coord(frame.py(b.value - b.error));
            let yhi = fmt_coord(frame.py(b.value + b.error));
            let cap = 6.0;
            let _ = writeln!(
                svg,
                "<line x1=\"{xm}\" y1=\"{ylo}\" x2=\"{xm}\" y2=\"{yhi}\" stroke=\"#333333\"/>\n\
                 <line x1=\"{}\" y1=\"{ylo}\" x2=\"{}\" y2=\"{ylo}\" stroke=\"#333333\"/>\n\
                 <line x1=\"{}\" y1=\"{yhi}\" x2=\"{}\" y2=\"{yhi}\" stroke=\"#333333\"/>",
                fmt_coord(frame.px(cx) - cap),
                fmt_coord(frame.px(cx) + cap),
                fmt_coord(frame.px(cx) - cap),
                fmt_coord(frame.px(cx) + cap),
            );
        }
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"11\" \
             text-anchor=\"middle\">{}</text>",
            fmt_coord(frame.px(cx)),
            HEIGHT - MARGIN_BOTTOM + 18.0,
            escape(&b.label)
        );
    }

    svg.push_str("</svg>\n");
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    fn demo_series() -> Vec<Series> {
        vec![
            Series::new("train", vec![(0.0, 1.0), (1.0, 0.6), (2.0, 0.4)]),
            Series::new("val", vec![(0.0, 1.1), (1.0, 0.8), (2.0, 0.7)])
                .with_band(vec![(1.0, 1.2), (0.7, 0.9), (0.6, 0.8)]),
        ]
    }

    #[test]
    fn line_chart_writes_well_formed_svg() {
        let dir = tmp();
        let path = dir.path().join("loss.svg");
        line_chart(&path, "loss curves", "epoch", "loss", &demo_series()).unwrap();
        let svg = std::fs::read_to_string(&path).unwrap();
        assert!(svg.starts_with("<svg "));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("train") && svg.contains("val"));
        assert!(svg.contains("fill-opacity"), "band envelope missing");
        assert_eq!(svg.matches("<polyline").count(), 2);
    }

    #[test]
    fn identical_inputs_produce_identical_bytes() {
        let dir = tmp();
        let a = dir.path().join("a.svg");
        let b = dir.path().join("b.svg");
        line_chart(&a, "t", "x", "y", &demo_series()).unwrap();
        line_chart(&b, "t", "x", "y", &demo_series()).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

        let bars = vec![
            Bar { label: "c1".into(), value: 0.8, error: 0.05 },
            Bar { label: "c2".into(), value: 0.6, error: 0.0 },
        ];
        let c = dir.path().join("c.svg");
        let d = dir.path().join("d.svg");
        bar_chart(&c, "t", "f1", &bars).unwrap();
        bar_chart(&d, "t", "f1", &bars).unwrap();
        assert_eq!(std::fs::read(&c).unwrap(), std::fs::read(&d).unwrap());
    }

    #[test]
    fn single_point_series_is_padded_not_degenerate() {
        let dir = tmp();
        let path = dir.path().join("one.svg");
        line_chart(&path, "t", "x", "y", &[Series::new("s", vec![(0.0, 0.5)])]).unwrap();
        let svg = std::fs::read_to_string(&path).unwrap();
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
    }

    #[test]
    fn bar_chart_draws_whiskers_and_labels() {
        let dir = tmp();
        let path = dir.path().join("bars.svg");
        let bars = vec![
            Bar { label: "partial_roof_damage".into(), value: 0.82, error: 0.03 },
            Bar { label: "total_roof_damage".into(), value: 0.75, error: 0.0 },
        ];
        bar_chart(&path, "best f1", "f1", &bars).unwrap();
        let svg = std::fs::read_to_string(&path).unwrap();
        assert!(svg.contains("partial_roof_damage"));
        assert_eq!(svg.matches("<rect").count(), 2 + 1); // 2 bars + background
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let dir = tmp();
        let path = dir.path().join("bad.svg");
        assert!(line_chart(&path, "t", "x", "y", &[]).is_err());
        assert!(line_chart(&path, "t", "x", "y", &[Series::new("s", vec![])]).is_err());
        assert!(
            line_chart(&path, "t", "x", "y", &[Series::new("s", vec![(0.0, f64::NAN)])]).is_err()
        );
        let bad_band = Series::new("s", vec![(0.0, 1.0), (1.0, 2.0)]).with_band(vec![(0.0, 1.0)]);
        assert!(line_chart(&path, "t", "x", "y", &[bad_band]).is_err());
        assert!(bar_chart(&path, "t", "y", &[]).is_err());
        assert!(
            bar_chart(&path, "t", "y", &[Bar { label: "b".into(), value: 1.0, error: -0.1 }])
                .is_err()
        );
        assert!(!path.exists(), "no partial file on validation failure");
    }

    #[test]
    fn unwritable_directory_is_an_io_error() {
        let path = std::path::Path::new("/nonexistent-dir-for-test/x.svg");
        let err = line_chart(path, "t", "x", "y", &demo_series()).unwrap_err();
        assert!(matches!(err, crate::error::Error::Io { .. }), "{err}");
    }

    #[test]
    fn titles_are_xml_escaped() {
        let dir = tmp();
        let path = dir.path().join("esc.svg");
        line_chart(&path, "a < b & c", "x", "y", &demo_series()).unwrap();
        let svg = std::fs::read_to_string(&path).unwrap();
        assert!(svg.contains("a &lt; b &amp; c"));
    }
}
