//! Static SVG plots rendered from run-directory CSV files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::pipeline::{KM_TEST_FILE, KM_TRAIN_FILE, TRACE_FILE};

pub const TRACE_SVG: &str = "report.svg";
pub const KM_SVG: &str = "km.svg";

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

struct Series {
    name: String,
    points: Vec<(f64, f64)>,
    step: bool,
    dashed: bool,
}

struct Plot {
    title: String,
    x_label: String,
    y_label: String,
    series: Vec<Series>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn nice_range(lo: f64, hi: f64) -> (f64, f64) {
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

impl Plot {
    fn render(&self) -> String {
        let pts = self.series.iter().flat_map(|s| s.points.iter());
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in pts {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        let (x0, x1) = nice_range(x0, x1);
        let (y0, y1) = nice_range(y0, y1);
        let pw = WIDTH - LEFT - RIGHT;
        let ph = HEIGHT - TOP - BOTTOM;
        let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| TOP + (1.0 - (y - y0) / (y1 - y0)) * ph;

        let mut s = String::new();
        let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
            LEFT + pw / 2.0,
            escape(&self.title)
        );
        let _ = writeln!(
            s,
            r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
        );
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let xv = x0 + f * (x1 - x0);
            let yv = y0 + f * (y1 - y0);
            let _ = writeln!(
                s,
                r#"<line x1="{0:.2}" y1="{1:.2}" x2="{0:.2}" y2="{2:.2}" stroke="black"/><text x="{0:.2}" y="{3:.2}" text-anchor="middle">{4:.3}</text>"#,
                sx(xv),
                TOP + ph,
                TOP + ph + 4.0,
                TOP + ph + 16.0,
                xv
            );
            let _ = writeln!(
                s,
                r#"<line x1="{0:.2}" y1="{1:.2}" x2="{2:.2}" y2="{1:.2}" stroke="black"/><text x="{3:.2}" y="{4:.2}" text-anchor="end">{5:.3}</text>"#,
                LEFT - 4.0,
                sy(yv),
                LEFT,
                LEFT - 6.0,
                sy(yv) + 4.0,
                yv
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            LEFT + pw / 2.0,
            HEIGHT - 12.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="14" y="{0:.2}" text-anchor="middle" transform="rotate(-90 14 {0:.2})">{1}</text>"#,
            TOP + ph / 2.0,
            escape(&self.y_label)
        );
        for (i, ser) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let mut path = String::new();
            let mut prev: Option<(f64, f64)> = None;
            for &(x, y) in &ser.points {
                match prev {
                    None => {
                        let _ = write!(path, "M{:.2},{:.2}", sx(x), sy(y));
                    }
                    Some((_, py)) if ser.step => {
                        let _ = write!(path, " L{:.2},{:.2} L{:.2},{:.2}", sx(x), sy(py), sx(x), sy(y));
                    }
                    Some(_) => {
                        let _ = write!(path, " L{:.2},{:.2}", sx(x), sy(y));
                    }
                }
                prev = Some((x, y));
            }
            if !path.is_empty() {
                let dash = if ser.dashed { r#" stroke-dasharray="5,3""# } else { "" };
                let _ = writeln!(
                    s,
                    r#"<path d="{path}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>"#
                );
            }
            let ly = TOP + 12.0 + 16.0 * i as f64;
            let lx = WIDTH - RIGHT + 10.0;
            let _ = writeln!(
                s,
                r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="1.5"/><text x="{:.2}" y="{:.2}">{}</text>"#,
                lx + 20.0,
                lx + 26.0,
                ly + 4.0,
                escape(&ser.name)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

fn reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path)?;
    Ok(csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(file))
}

fn parse_err(path: &Path, line: u64, reason: impl Into<String>) -> Error {
    Error::Parse {
        file: path.to_path_buf(),
        line,
        reason: reason.into(),
    }
}

fn column(headers: &csv::StringRecord, name: &str, path: &Path) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| parse_err(path, 1, format!("missing column `{name}`")))
}

fn cell(rec: &csv::StringRecord, i: usize, path: &Path) -> Result<Option<f64>> {
    let line = rec.position().map_or(0, |p| p.line());
    match rec.get(i).map(str::trim) {
        None | Some("") => Ok(None),
        Some(v) => v.parse().map(Some).map_err(|_| parse_err(path, line, format!("not a number: `{v}`"))),
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    parse_err(path, line, e.to_string())
}

/// Loss curves and best-so-far against the evaluation index.
fn trace_plot(path: &Path) -> Result<Plot> {
    let mut rdr = reader(path)?;
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let names = ["L_s", "L_p", "L", "best"];
    let cols = names
        .iter()
        .map(|n| column(&headers, n, path))
        .collect::<Result<Vec<_>>>()?;
    let step = column(&headers, "step", path)?;
    let mut series: Vec<Series> = names
        .iter()
        .map(|n| Series {
            name: if *n == "best" { "best so far".into() } else { n.to_string() },
            points: Vec::new(),
            step: *n == "best",
            dashed: *n == "best",
        })
        .collect();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let x = cell(&rec, step, path)?.ok_or_else(|| parse_err(path, 0, "missing step"))?;
        for (ser, &c) in series.iter_mut().zip(&cols) {
            if let Some(y) = cell(&rec, c, path)?.filter(|y| y.is_finite()) {
                ser.points.push((x, y));
            }
        }
    }
    Ok(Plot {
        title: "Bayesian optimization trace".into(),
        x_label: "evaluation".into(),
        y_label: "loss".into(),
        series,
    })
}

/// Kaplan-Meier step curves, one series per group, each starting at S = 1.
fn km_series(path: &Path, label: &str, dashed: bool) -> Result<Vec<Series>> {
    let mut rdr = reader(path)?;
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let (t, sv, g) = (
        column(&headers, "time", path)?,
        column(&headers, "survival", path)?,
        column(&headers, "group", path)?,
    );
    let mut out: Vec<Series> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let group = rec.get(g).unwrap_or("").to_string();
        let (Some(time), Some(surv)) = (cell(&rec, t, path)?, cell(&rec, sv, path)?) else {
            return Err(parse_err(path, rec.position().map_or(0, |p| p.line()), "missing time or survival"));
        };
        let name = format!("{label} {group}");
        if out.last().map(|s| s.name != name).unwrap_or(true) {
            out.push(Series {
                name,
                points: vec![(0.0, 1.0)],
                step: true,
                dashed,
            });
        }
        out.last_mut().expect("pushed above").points.push((time, surv));
    }
    Ok(out)
}

/// Renders `report.svg` (optimization trace) and `km.svg` (survival
/// curves of the training groups, plus the holdout groups when
/// `km_test.csv` exists) into `run_dir`. Returns the written paths.
pub fn render_report(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let trace = run_dir.join(TRACE_FILE);
    let km_train = run_dir.join(KM_TRAIN_FILE);
    for required in [&trace, &km_train] {
        if !required.is_file() {
            return Err(Error::invalid(format!("{} not found; not a completed run directory", required.display())));
        }
    }
    let trace_svg = trace_plot(&trace)?.render();
    let mut series = km_series(&km_train, "train", false)?;
    let km_test = run_dir.join(KM_TEST_FILE);
    if km_test.is_file() {
        series.extend(km_series(&km_test, "test", true)?);
    }
    let km_svg = Plot {
        title: "Kaplan-Meier survival by risk group".into(),
        x_label: "time".into(),
        y_label: "survival probability".into(),
        series,
    }
    .render();
    let out = vec![run_dir.join(TRACE_SVG), run_dir.join(KM_SVG)];
    fs::write(&out[0], trace_svg)?;
    fs::write(&out[1], km_svg)?;
    Ok(out)
}
