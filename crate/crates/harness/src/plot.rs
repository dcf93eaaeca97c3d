//! Static SVG figures drawn from run metric logs.
//!
//! Every plot reads `metrics.csv` from each run directory and writes the SVG
//! plus a long-format `series,x,y` CSV next to it (same stem, `.csv`).
//! Output depends only on the input logs, so repeated calls are byte-identical.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotKind {
    NormCurves,
    AccuracyCurves,
    Decomposition,
    Cosines,
    QuantileBand,
    SharpnessBars,
}

impl PlotKind {
    pub const ALL: [PlotKind; 6] = [
        PlotKind::NormCurves,
        PlotKind::AccuracyCurves,
        PlotKind::Decomposition,
        PlotKind::Cosines,
        PlotKind::QuantileBand,
        PlotKind::SharpnessBars,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PlotKind::NormCurves => "norm_curves",
            PlotKind::AccuracyCurves => "accuracy_curves",
            PlotKind::Decomposition => "decomposition",
            PlotKind::Cosines => "cosines",
            PlotKind::QuantileBand => "quantile_band",
            PlotKind::SharpnessBars => "sharpness_bars",
        }
    }
}

impl FromStr for PlotKind {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        PlotKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let names: Vec<&str> = PlotKind::ALL.iter().map(|k| k.name()).collect();
            HarnessError::Config(format!(
                "unknown plot kind `{s}` (expected one of {})",
                names.join(", ")
            ))
        })
    }
}

/// `metrics.csv` of one run, columns addressed by name.
#[derive(Debug, Clone)]
pub struct MetricTable {
    pub run_id: String,
    path: PathBuf,
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl MetricTable {
    pub fn read(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join("metrics.csv");
        let mut r = csv::Reader::from_path(&path)?;
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            rows.push(rec?.iter().map(str::to_string).collect());
        }
        let run_id = header
            .iter()
            .position(|h| h == "run_id")
            .and_then(|i| rows.first().map(|r: &Vec<String>| r[i].clone()))
            .unwrap_or_else(|| {
                run_dir
                    .file_name()
                    .map_or_else(String::new, |n| n.to_string_lossy().into_owned())
            });
        Ok(Self {
            run_id,
            path,
            header,
            rows,
        })
    }

    fn missing(&self, column: &str) -> HarnessError {
        HarnessError::MissingColumn {
            file: self.path.display().to_string(),
            column: column.to_string(),
        }
    }

    fn index(&self, column: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == column)
            .ok_or_else(|| self.missing(column))
    }

    /// `(x, y)` over rows of the given record kind where both cells are numbers.
    /// A column that exists but is empty on every such row counts as missing.
    fn series(&self, kind: &str, x: &str, y: &str) -> Result<Vec<(f64, f64)>> {
        let (k, xi, yi) = (self.index("kind")?, self.index(x)?, self.index(y)?);
        let pts: Vec<(f64, f64)> = self
            .rows
            .iter()
            .filter(|r| r[k] == kind)
            .filter_map(|r| Some((r[xi].parse().ok()?, r[yi].parse().ok()?)))
            .collect();
        if pts.is_empty() {
            return Err(self.missing(y));
        }
        Ok(pts)
    }

    /// Quantile columns `q<level>`, sorted by level.
    fn quantile_columns(&self) -> Vec<(f64, usize)> {
        let mut qs: Vec<(f64, usize)> = self
            .header
            .iter()
            .enumerate()
            .filter_map(|(i, h)| Some((h.strip_prefix('q')?.parse::<f64>().ok()?, i)))
            .collect();
        qs.sort_by(|a, b| a.0.total_cmp(&b.0));
        qs
    }

    fn last_value(&self, column: &str) -> Result<Option<f64>> {
        let i = self.index(column)?;
        Ok(self.rows.iter().rev().find_map(|r| r[i].parse().ok()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Band {
    pub label: String,
    /// `(x, low, high)`
    pub points: Vec<(f64, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    pub bands: Vec<Band>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BarPanel {
    pub metric: String,
    /// `(run, value)`
    pub bars: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Figure {
    Lines(LineChart),
    Bars { title: String, panels: Vec<BarPanel> },
}

fn lines(title: &str, x: &str, y: &str) -> LineChart {
    LineChart {
        title: title.into(),
        x_label: x.into(),
        y_label: y.into(),
        series: Vec::new(),
        bands: Vec::new(),
    }
}

/// Extracts the data of a plot from metric tables.
pub fn build_figure(tables: &[MetricTable], kind: PlotKind) -> Result<Figure> {
    if tables.is_empty() {
        return Err(HarnessError::NoRuns("no runs to plot".into()));
    }
    let fig = match kind {
        PlotKind::NormCurves => {
            let mut c = lines("weight norm", "epoch", "‖w‖");
            for t in tables {
                c.series.push(Series {
                    label: t.run_id.clone(),
                    points: t.series("epoch", "epoch", "weight_norm")?,
                });
            }
            Figure::Lines(c)
        }
        PlotKind::AccuracyCurves => {
            let mut c = lines("accuracy", "epoch", "accuracy");
            for t in tables {
                for (col, tag) in [("train_acc", "train"), ("test_acc", "test")] {
                    c.series.push(Series {
                        label: format!("{} {tag}", t.run_id),
                        points: t.series("epoch", "epoch", col)?,
                    });
                }
            }
            Figure::Lines(c)
        }
        PlotKind::Decomposition => {
            let mut c = lines("per-step change of ‖w‖²", "step", "Δ‖w‖²");
            for t in tables {
                for (col, tag) in [
                    ("square_term", "square"),
                    ("cross_term", "cross"),
                    ("realized_norm_sq_change", "realized"),
                ] {
                    c.series.push(Series {
                        label: format!("{} {tag}", t.run_id),
                        points: t.series("step", "step", col)?,
                    });
                }
            }
            Figure::Lines(c)
        }
        PlotKind::Cosines => {
            let mut c = lines("gradient alignment", "step", "cos(w, −∇ℓ)");
            for t in tables {
                for (col, tag) in [("cos_pos", "pos"), ("cos_neg", "neg")] {
                    c.series.push(Series {
                        label: format!("{} {tag}", t.run_id),
                        points: t.series("step", "step", col)?,
                    });
                }
            }
            Figure::Lines(c)
        }
        PlotKind::QuantileBand => {
            let mut c = lines("buffer ratio quantiles", "epoch", "log(|m|/|w|)");
            for t in tables {
                let qs = t.quantile_columns();
                if qs.len() < 2 {
                    return Err(t.missing("q<level>"));
                }
                let (lo, hi) = (qs[0], qs[qs.len() - 1]);
                let mid = qs[qs.len() / 2];
                let name = |q: f64| format!("q{q}");
                let low = t.series("epoch", "epoch", &name(lo.0))?;
                let high = t.series("epoch", "epoch", &name(hi.0))?;
                let (lx, hx): (Vec<f64>, Vec<f64>) =
                    (low.iter().map(|p| p.0).collect(), high.iter().map(|p| p.0).collect());
                if lx != hx {
                    return Err(HarnessError::Format(format!(
                        "{}: quantile columns cover different epochs",
                        t.path.display()
                    )));
                }
                c.bands.push(Band {
                    label: format!("{} q{}–q{}", t.run_id, lo.0, hi.0),
                    points: low.iter().zip(&high).map(|(l, h)| (l.0, l.1, h.1)).collect(),
                });
                c.series.push(Series {
                    label: format!("{} q{}", t.run_id, mid.0),
                    points: t.series("epoch", "epoch", &name(mid.0))?,
                });
            }
            Figure::Lines(c)
        }
        PlotKind::SharpnessBars => {
            let metrics = [
                "sharpness_multiplicative",
                "sharpness_additive",
                "sharpness_keskar",
                "sharpness_hessian_top",
            ];
            let mut panels: Vec<BarPanel> = metrics
                .iter()
                .map(|m| BarPanel {
                    metric: m.trim_start_matches("sharpness_").to_string(),
                    bars: Vec::new(),
                })
                .collect();
            for t in tables {
                for (m, panel) in metrics.iter().zip(&mut panels) {
                    let v = t.last_value(m)?.ok_or_else(|| t.missing(m))?;
                    panel.bars.push((t.run_id.clone(), v));
                }
            }
            Figure::Bars {
                title: "sharpness at the last measured epoch".into(),
                panels,
            }
        }
    };
    Ok(fig)
}

/// Long-format CSV of the plotted data: `series,x,y`.
pub fn figure_csv(fig: &Figure) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["series", "x", "y"])?;
    match fig {
        Figure::Lines(c) => {
            for b in &c.bands {
                for &(x, lo, hi) in &b.points {
                    w.write_record([format!("{} low", b.label), x.to_string(), lo.to_string()])?;
                    w.write_record([format!("{} high", b.label), x.to_string(), hi.to_string()])?;
                }
            }
            for s in &c.series {
                for &(x, y) in &s.points {
                    w.write_record([s.label.clone(), x.to_string(), y.to_string()])?;
                }
            }
        }
        Figure::Bars { panels, .. } => {
            for p in panels {
                for (run, v) in &p.bars {
                    w.write_record([p.metric.clone(), run.clone(), v.to_string()])?;
                }
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| HarnessError::Format(e.to_string()))
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Roughly five round tick values covering `[lo, hi]`.
fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = hi - lo;
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| span / s <= 6.0)
        .unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + step * 1e-9 {
        out.push(if t.abs() < step * 1e-9 { 0.0 } else { t });
        t += step;
    }
    out
}

fn fmt_tick(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-3..1e5).contains(&a) {
        format!("{v:.1e}")
    } else {
        let s = format!("{v:.4}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn padded_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 * lo.abs().max(1.0) {
        let d = lo.abs().max(1.0) * 0.05;
        return (lo - d, hi + d);
    }
    let pad = (hi - lo) * 0.05;
    (lo - pad, hi + pad)
}

const W: f64 = 720.0;
const H: f64 = 440.0;
const LEFT: f64 = 72.0;
const RIGHT: f64 = 200.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 52.0;

fn svg_open(s: &mut String, title: &str) {
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        LEFT + (W - LEFT - RIGHT) / 2.0,
        esc(title)
    );
}

fn render_lines(c: &LineChart) -> String {
    let (pw, ph) = (W - LEFT - RIGHT, H - TOP - BOTTOM);
    let xs = c
        .series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.0))
        .chain(c.bands.iter().flat_map(|b| b.points.iter().map(|p| p.0)));
    let (x0, x1) = padded_range(xs);
    let ys = c
        .series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.1))
        .chain(c.bands.iter().flat_map(|b| b.points.iter().flat_map(|p| [p.1, p.2])));
    let (y0, y1) = padded_range(ys);
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    svg_open(&mut s, &c.title);
    for t in ticks(x0, x1) {
        let x = sx(t);
        let _ = writeln!(
            s,
            r##"<line x1="{x:.2}" y1="{TOP}" x2="{x:.2}" y2="{:.2}" stroke="#e5e5e5"/>"##,
            TOP + ph
        );
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            TOP + ph + 16.0,
            fmt_tick(t)
        );
    }
    for t in ticks(y0, y1) {
        let y = sy(t);
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#e5e5e5"/>"##,
            LEFT + pw
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            LEFT - 6.0,
            y + 4.0,
            fmt_tick(t)
        );
    }
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        H - 12.0,
        esc(&c.x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        esc(&c.y_label)
    );

    let mut legend = Vec::new();
    for (i, b) in c.bands.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut d = String::new();
        for (j, p) in b.points.iter().enumerate() {
            let _ = write!(d, "{}{:.2},{:.2} ", if j == 0 { "M" } else { "L" }, sx(p.0), sy(p.2));
        }
        for p in b.points.iter().rev() {
            let _ = write!(d, "L{:.2},{:.2} ", sx(p.0), sy(p.1));
        }
        let _ = writeln!(
            s,
            r#"<path d="{}Z" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
            d
        );
        legend.push((b.label.as_str(), color, true));
    }
    for (i, ser) in c.series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = ser
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", sx(p.0), sy(p.1)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            pts.join(" ")
        );
        legend.push((ser.label.as_str(), color, false));
    }
    for (i, (label, color, band)) in legend.iter().enumerate() {
        let y = TOP + 10.0 + 18.0 * i as f64;
        let x = LEFT + pw + 12.0;
        if *band {
            let _ = writeln!(
                s,
                r#"<rect x="{x:.2}" y="{:.2}" width="20" height="10" fill="{color}" fill-opacity="0.2"/>"#,
                y - 5.0
            );
        } else {
            let _ = writeln!(
                s,
                r#"<line x1="{x:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="{color}" stroke-width="2"/>"#,
                x + 20.0
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}">{}</text>"#,
            x + 26.0,
            y + 4.0,
            esc(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn render_bars(title: &str, panels: &[BarPanel]) -> String {
    let n = panels.len().max(1) as f64;
    let gap = 24.0;
    let pw = (W - LEFT - RIGHT - gap * (n - 1.0)) / n;
    let ph = H - TOP - BOTTOM;
    let mut s = String::new();
    svg_open(&mut s, title);
    let runs: Vec<&str> = panels
        .first()
        .map_or_else(Vec::new, |p| p.bars.iter().map(|b| b.0.as_str()).collect());
    for (pi, p) in panels.iter().enumerate() {
        let left = LEFT + pi as f64 * (pw + gap);
        let hi = p.bars.iter().map(|b| b.1).fold(0.0f64, f64::max);
        let lo = p.bars.iter().map(|b| b.1).fold(0.0f64, f64::min);
        let (y0, y1) = if hi - lo > 0.0 {
            (lo * 1.05, hi * 1.05)
        } else {
            (0.0, 1.0)
        };
        let sy = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;
        let _ = writeln!(
            s,
            r#"<rect x="{left:.2}" y="{TOP}" width="{pw:.2}" height="{ph}" fill="none" stroke="black"/>"#
        );
        for t in ticks(y0, y1) {
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="end" font-size="10">{}</text>"#,
                left - 4.0,
                sy(t) + 3.0,
                fmt_tick(t)
            );
        }
        let bw = pw / (p.bars.len().max(1) as f64);
        for (bi, (_, v)) in p.bars.iter().enumerate() {
            let color = PALETTE[bi % PALETTE.len()];
            let (ya, yb) = (sy(v.max(0.0)), sy(v.min(0.0)));
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{ya:.2}" width="{:.2}" height="{:.2}" fill="{color}"/>"#,
                left + bw * (bi as f64 + 0.15),
                bw * 0.7,
                yb - ya
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            left + pw / 2.0,
            H - 12.0,
            esc(&p.metric)
        );
    }
    for (i, run) in runs.iter().enumerate() {
        let y = TOP + 10.0 + 18.0 * i as f64;
        let x = W - RIGHT + 12.0;
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(
            s,
            r#"<rect x="{x:.2}" y="{:.2}" width="14" height="10" fill="{color}"/>"#,
            y - 5.0
        );
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, x + 20.0, y + 4.0, esc(run));
    }
    s.push_str("</svg>\n");
    s
}

pub fn render_svg(fig: &Figure) -> String {
    match fig {
        Figure::Lines(c) => render_lines(c),
        Figure::Bars { title, panels } => render_bars(title, panels),
    }
}

/// Paths written by [`plot`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlotFiles {
    pub svg: PathBuf,
    pub csv: PathBuf,
}

/// Renders `kind` for the given run directories into `out` (SVG) and its CSV sibling.
pub fn plot(run_dirs: &[PathBuf], kind: PlotKind, out: &Path) -> Result<PlotFiles> {
    if run_dirs.is_empty() {
        return Err(HarnessError::NoRuns("no runs to plot".into()));
    }
    let tables: Vec<MetricTable> = run_dirs.iter().map(|d| MetricTable::read(d)).collect::<Result<_>>()?;
    let fig = build_figure(&tables, kind)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
    }
    let csv_path = out.with_extension("csv");
    if csv_path == out {
        return Err(HarnessError::Config(format!(
            "plot output {} must not end in .csv",
            out.display()
        )));
    }
    fs::write(out, render_svg(&fig)).map_err(|e| HarnessError::io(out, e))?;
    fs::write(&csv_path, figure_csv(&fig)?).map_err(|e| HarnessError::io(&csv_path, e))?;
    Ok(PlotFiles {
        svg: out.to_path_buf(),
        csv: csv_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kinds_round_trip_through_names() {
        for k in PlotKind::ALL {
            assert_eq!(k.name().parse::<PlotKind>().unwrap(), k);
        }
        assert!("pie".parse::<PlotKind>().is_err());
    }

    #[test]
    fn ticks_are_round_and_cover_the_range() {
        assert_eq!(ticks(0.0, 10.0), vec![0.0, 2.0, 4.0, 6.0, 8.0, 10.0]);
        let t = ticks(-0.013, 0.041);
        assert!(t.len() >= 3 && t.len() <= 7, "{t:?}");
        assert!(t.iter().all(|v| (-0.013..=0.041).contains(v)));
    }

    #[test]
    fn labels_are_escaped() {
        assert_eq!(esc("a<b & \"c\""), "a&lt;b &amp; &quot;c&quot;");
    }
}
