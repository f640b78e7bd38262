//! SVG 1.1 plots of sweep results: minimum control frequency against dataset
//! size, closed-loop trajectory bands per frequency multiplier and the cost
//! heatmap with contour lines. Output depends only on the input CSVs, so
//! re-rendering unchanged inputs gives byte-identical files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::experiment::{CostGrid, McfVsN};

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("{file}: missing or malformed column `{column}`")]
    SchemaMismatch { file: String, column: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub const MCF_PLOT: &str = "mcf_vs_n.svg";
pub const TRAJECTORY_PLOT: &str = "trajectories.svg";
pub const COST_PLOT: &str = "cost_grid.svg";

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

#[derive(Debug, Default, Clone, PartialEq)]
pub struct RenderReport {
    pub written: Vec<PathBuf>,
    /// Set when the directory held nothing recognizable.
    pub note: Option<String>,
}

/// Renders every recognized CSV in `dir` into SVGs next to it.
pub fn render_outputs(dir: &Path) -> Result<RenderReport, RenderError> {
    let mut report = RenderReport::default();
    let summary = dir.join(McfVsN::SUMMARY_FILE);
    if summary.exists() {
        let trials = dir.join(McfVsN::TRIALS_FILE);
        let svg = render_mcf(&summary, trials.exists().then_some(trials.as_path()))?;
        report.written.push(write(dir.join(MCF_PLOT), &svg)?);
    }
    let cost = dir.join(CostGrid::CELLS_FILE);
    if cost.exists() {
        report.written.push(write(dir.join(COST_PLOT), &render_cost_grid(&cost)?)?);
    }
    let trajectories = trajectory_files(dir)?;
    if !trajectories.is_empty() {
        report.written.push(write(dir.join(TRAJECTORY_PLOT), &render_trajectories(&trajectories)?)?);
    }
    if report.written.is_empty() {
        report.note = Some(format!("nothing to render in {}", dir.display()));
    }
    Ok(report)
}

fn write(path: PathBuf, content: &str) -> Result<PathBuf, RenderError> {
    fs::write(&path, content)?;
    Ok(path)
}

/// `trajectory_xi{ξ}_trial{k}.csv` files grouped by ξ, both keys ascending.
fn trajectory_files(dir: &Path) -> Result<Vec<(f64, Vec<PathBuf>)>, RenderError> {
    let mut groups: Vec<(f64, Vec<(usize, PathBuf)>)> = Vec::new();
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        let Some(rest) = name.strip_prefix("trajectory_xi").and_then(|r| r.strip_suffix(".csv")) else {
            continue;
        };
        let Some((xi, trial)) = rest.split_once("_trial") else { continue };
        let (Ok(xi), Ok(trial)) = (xi.parse::<f64>(), trial.parse::<usize>()) else { continue };
        match groups.iter_mut().find(|(x, _)| *x == xi) {
            Some((_, files)) => files.push((trial, path)),
            None => groups.push((xi, vec![(trial, path)])),
        }
    }
    groups.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(groups
        .into_iter()
        .map(|(xi, mut files)| {
            files.sort();
            (xi, files.into_iter().map(|(_, p)| p).collect())
        })
        .collect())
}

// ---------------------------------------------------------------------------
// CSV access

struct Table {
    file: String,
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn read(path: &Path) -> Result<Self, RenderError> {
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
        let header = rdr.headers()?.iter().map(str::to_owned).collect();
        let rows = rdr
            .records()
            .map(|r| r.map(|r| r.iter().map(str::to_owned).collect()))
            .collect::<Result<_, _>>()?;
        let file = path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
        Ok(Self { file, header, rows })
    }

    fn mismatch(&self, column: &str) -> RenderError {
        RenderError::SchemaMismatch {
            file: self.file.clone(),
            column: column.to_owned(),
        }
    }

    fn column(&self, name: &str) -> Result<usize, RenderError> {
        self.header.iter().position(|h| h == name).ok_or_else(|| self.mismatch(name))
    }

    /// Values of a column; empty cells are `None`.
    fn floats(&self, name: &str) -> Result<Vec<Option<f64>>, RenderError> {
        let c = self.column(name)?;
        self.rows
            .iter()
            .map(|row| match row.get(c).map(|s| s.trim()) {
                None => Err(self.mismatch(name)),
                Some("") => Ok(None),
                Some(s) => s.parse().map(Some).map_err(|_| self.mismatch(name)),
            })
            .collect()
    }

    fn required(&self, name: &str) -> Result<Vec<f64>, RenderError> {
        self.floats(name)?.into_iter().map(|v| v.ok_or_else(|| self.mismatch(name))).collect()
    }
}

// ---------------------------------------------------------------------------
// SVG building blocks

/// Fixed-precision number formatting keeps the output stable.
fn num(v: f64) -> String {
    let s = format!("{v:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Svg {
    width: f64,
    height: f64,
    body: String,
}

impl Svg {
    fn new(width: f64, height: f64) -> Self {
        Self {
            width,
            height,
            body: String::new(),
        }
    }

    fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str, width: f64) {
        let _ = writeln!(
            self.body,
            r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="{stroke}" stroke-width="{}"/>"#,
            num(x1),
            num(y1),
            num(x2),
            num(y2),
            num(width)
        );
    }

    fn polyline(&mut self, pts: &[(f64, f64)], stroke: &str, width: f64, dashed: bool) {
        if pts.len() < 2 {
            return;
        }
        let dash = if dashed { r#" stroke-dasharray="6,4""# } else { "" };
        let _ = writeln!(
            self.body,
            r#"<polyline points="{}" fill="none" stroke="{stroke}" stroke-width="{}"{dash}/>"#,
            points(pts),
            num(width)
        );
    }

    fn polygon(&mut self, pts: &[(f64, f64)], fill: &str, opacity: f64) {
        let _ = writeln!(
            self.body,
            r#"<polygon points="{}" fill="{fill}" fill-opacity="{}" stroke="none"/>"#,
            points(pts),
            num(opacity)
        );
    }

    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str, stroke: &str) {
        let _ = writeln!(
            self.body,
            r#"<rect x="{}" y="{}" width="{}" height="{}" fill="{fill}" stroke="{stroke}"/>"#,
            num(x),
            num(y),
            num(w),
            num(h)
        );
    }

    fn circle(&mut self, x: f64, y: f64, r: f64, fill: &str) {
        let _ = writeln!(self.body, r#"<circle cx="{}" cy="{}" r="{}" fill="{fill}"/>"#, num(x), num(y), num(r));
    }

    fn text(&mut self, x: f64, y: f64, anchor: &str, size: f64, s: &str) {
        let _ = writeln!(
            self.body,
            r#"<text x="{}" y="{}" text-anchor="{anchor}" font-family="sans-serif" font-size="{}">{}</text>"#,
            num(x),
            num(y),
            num(size),
            escape(s)
        );
    }

    fn vertical_text(&mut self, x: f64, y: f64, size: f64, s: &str) {
        let _ = writeln!(
            self.body,
            r#"<text x="{0}" y="{1}" text-anchor="middle" font-family="sans-serif" font-size="{2}" transform="rotate(-90 {0} {1})">{3}</text>"#,
            num(x),
            num(y),
            num(size),
            escape(s)
        );
    }

    fn finish(self) -> String {
        format!(
            "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n{}</svg>\n",
            self.body,
            w = num(self.width),
            h = num(self.height)
        )
    }
}

fn points(pts: &[(f64, f64)]) -> String {
    pts.iter().map(|(x, y)| format!("{},{}", num(*x), num(*y))).collect::<Vec<_>>().join(" ")
}

/// Tick values covering `[lo, hi]` with steps of 1, 2 or 5 times a power of ten.
fn nice_ticks(lo: f64, hi: f64, target: usize) -> Vec<f64> {
    let span = (hi - lo).max(1e-12);
    let raw = span / target.max(1) as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|k| k * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    (first..=last).map(|k| k as f64 * step).collect()
}

fn tick_label(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e4 || v.abs() < 1e-2 {
        format!("{v:.0e}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_owned()
    }
}

/// Range padded by a fraction of its width, widened if degenerate.
fn padded(values: impl Iterator<Item = f64>, pad: f64) -> (f64, f64) {
    let (mut lo, mut hi) = values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        let w = lo.abs().max(1.0) * 0.1;
        lo -= w;
        hi += w;
    }
    let p = (hi - lo) * pad;
    (lo - p, hi + p)
}

/// Plot area with linear axes.
struct Frame {
    left: f64,
    top: f64,
    width: f64,
    height: f64,
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        self.left + (x - self.x.0) / (self.x.1 - self.x.0) * self.width
    }

    fn py(&self, y: f64) -> f64 {
        self.top + self.height - (y - self.y.0) / (self.y.1 - self.y.0) * self.height
    }

    fn draw_axes(&self, svg: &mut Svg, x_label: &str, y_label: &str) {
        svg.rect(self.left, self.top, self.width, self.height, "none", "#333333");
        for t in nice_ticks(self.x.0, self.x.1, 6) {
            let px = self.px(t);
            svg.line(px, self.top + self.height, px, self.top + self.height + 5.0, "#333333", 1.0);
            svg.text(px, self.top + self.height + 18.0, "middle", 11.0, &tick_label(t));
        }
        for t in nice_ticks(self.y.0, self.y.1, 5) {
            let py = self.py(t);
            svg.line(self.left - 5.0, py, self.left, py, "#333333", 1.0);
            svg.line(self.left, py, self.left + self.width, py, "#e5e5e5", 0.5);
            svg.text(self.left - 8.0, py + 4.0, "end", 11.0, &tick_label(t));
        }
        svg.text(self.left + self.width / 2.0, self.top + self.height + 36.0, "middle", 12.0, x_label);
        svg.vertical_text(self.left - 48.0, self.top + self.height / 2.0, 12.0, y_label);
    }
}

// ---------------------------------------------------------------------------
// Minimum control frequency against N

fn render_mcf(summary: &Path, trials: Option<&Path>) -> Result<String, RenderError> {
    let table = Table::read(summary)?;
    let n = table.required("N")?;
    let f = table.required("median_f_c_min_hz")?;
    let frac = table.required("feasible_fraction")?;
    let mut order: Vec<usize> = (0..n.len()).collect();
    order.sort_by(|&a, &b| n[a].total_cmp(&n[b]));

    let scatter: Vec<(f64, f64)> = match trials {
        Some(path) => {
            let t = Table::read(path)?;
            let tn = t.required("N")?;
            let tf = t.floats("f_c_min_hz")?;
            tn.into_iter().zip(tf).filter_map(|(n, f)| f.map(|f| (n, f))).collect()
        }
        None => Vec::new(),
    };

    let mut svg = Svg::new(640.0, 400.0);
    let frame = Frame {
        left: 70.0,
        top: 40.0,
        width: 490.0,
        height: 300.0,
        x: padded(n.iter().copied(), 0.08),
        y: padded(f.iter().copied().chain(scatter.iter().map(|p| p.1)), 0.1),
    };
    frame.draw_axes(&mut svg, "dataset size N", "minimum control frequency [Hz]");
    svg.text(320.0, 24.0, "middle", 14.0, "Minimum control frequency against dataset size");

    // secondary axis: feasible fraction on [0, 1]
    let right = frame.left + frame.width;
    let fy = |v: f64| frame.top + frame.height - v * frame.height;
    for k in 0..=4 {
        let v = k as f64 / 4.0;
        svg.line(right, fy(v), right + 5.0, fy(v), "#333333", 1.0);
        svg.text(right + 8.0, fy(v) + 4.0, "start", 11.0, &tick_label(v));
    }
    svg.vertical_text(right + 48.0, frame.top + frame.height / 2.0, 12.0, "feasible fraction");

    for &(x, y) in &scatter {
        svg.circle(frame.px(x), frame.py(y), 2.5, "#9ecae1");
    }
    let median: Vec<(f64, f64)> = order
        .iter()
        .filter(|&&i| f[i].is_finite())
        .map(|&i| (frame.px(n[i]), frame.py(f[i])))
        .collect();
    svg.polyline(&median, PALETTE[0], 2.0, false);
    for &(x, y) in &median {
        svg.circle(x, y, 4.0, PALETTE[0]);
    }
    let fraction: Vec<(f64, f64)> = order.iter().map(|&i| (frame.px(n[i]), fy(frac[i]))).collect();
    svg.polyline(&fraction, PALETTE[1], 1.5, true);
    for &(x, y) in &fraction {
        svg.circle(x, y, 3.0, PALETTE[1]);
    }

    svg.line(frame.left + 12.0, frame.top + 14.0, frame.left + 36.0, frame.top + 14.0, PALETTE[0], 2.0);
    svg.text(frame.left + 42.0, frame.top + 18.0, "start", 11.0, "median over trials");
    svg.line(frame.left + 12.0, frame.top + 30.0, frame.left + 36.0, frame.top + 30.0, PALETTE[1], 1.5);
    svg.text(frame.left + 42.0, frame.top + 34.0, "start", 11.0, "feasible fraction");
    Ok(svg.finish())
}

// ---------------------------------------------------------------------------
// Trajectory bands

struct Band {
    xi: f64,
    times: Vec<f64>,
    /// Per state: (mean, std) over trials at each time.
    states: Vec<Vec<(f64, f64)>>,
}

fn interpolate(times: &[f64], values: &[f64], t: f64) -> f64 {
    let k = times.partition_point(|&s| s <= t);
    if k == 0 {
        return values[0];
    }
    if k >= times.len() {
        return values[times.len() - 1];
    }
    let (t0, t1) = (times[k - 1], times[k]);
    let w = if t1 > t0 { (t - t0) / (t1 - t0) } else { 0.0 };
    values[k - 1] + w * (values[k] - values[k - 1])
}

const RESAMPLE_POINTS: usize = 200;

fn band(xi: f64, files: &[PathBuf]) -> Result<Band, RenderError> {
    let mut runs = Vec::new();
    for path in files {
        let table = Table::read(path)?;
        let t = table.required("t")?;
        if t.is_empty() {
            return Err(table.mismatch("t"));
        }
        let n = table.header.iter().filter(|h| h.starts_with("x_")).count();
        let x = (1..=n).map(|i| table.required(&format!("x_{i}"))).collect::<Result<Vec<_>, _>>()?;
        runs.push((t, x));
    }
    let n = runs[0].1.len();
    if let Some((_, bad)) = runs.iter().zip(files).find(|((_, x), _)| x.len() != n) {
        return Err(RenderError::SchemaMismatch {
            file: bad.display().to_string(),
            column: format!("x_{}", n.min(runs.iter().map(|r| r.1.len()).min().unwrap_or(0)) + 1),
        });
    }
    let end = runs.iter().map(|(t, _)| *t.last().unwrap_or(&0.0)).fold(f64::INFINITY, f64::min);
    let times: Vec<f64> = (0..RESAMPLE_POINTS).map(|k| end * k as f64 / (RESAMPLE_POINTS - 1) as f64).collect();
    let states = (0..n)
        .map(|i| {
            times
                .iter()
                .map(|&s| {
                    let v: Vec<f64> = runs.iter().map(|(t, x)| interpolate(t, &x[i], s)).collect();
                    let mean = v.iter().sum::<f64>() / v.len() as f64;
                    let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / v.len() as f64;
                    (mean, var.sqrt())
                })
                .collect()
        })
        .collect();
    Ok(Band { xi, times, states })
}

fn render_trajectories(groups: &[(f64, Vec<PathBuf>)]) -> Result<String, RenderError> {
    let bands = groups.iter().map(|(xi, files)| band(*xi, files)).collect::<Result<Vec<_>, _>>()?;
    let n = bands.iter().map(|b| b.states.len()).min().unwrap_or(0);
    let panel_h = 150.0;
    let mut svg = Svg::new(700.0, 70.0 + panel_h * n as f64 + 40.0);
    svg.text(350.0, 24.0, "middle", 14.0, "Closed-loop trajectories, mean and one standard deviation over trials");
    let t_end = bands.iter().filter_map(|b| b.times.last().copied()).fold(0.0, f64::max);
    for i in 0..n {
        let frame = Frame {
            left: 80.0,
            top: 50.0 + panel_h * i as f64,
            width: 480.0,
            height: panel_h - 50.0,
            x: (0.0, if t_end > 0.0 { t_end } else { 1.0 }),
            y: padded(bands.iter().flat_map(|b| b.states[i].iter().flat_map(|(m, s)| [m - s, m + s])), 0.05),
        };
        frame.draw_axes(&mut svg, if i + 1 == n { "time [s]" } else { "" }, &format!("x_{}", i + 1));
        for (k, b) in bands.iter().enumerate() {
            let color = PALETTE[k % PALETTE.len()];
            let upper = b.times.iter().zip(&b.states[i]).map(|(&t, (m, s))| (frame.px(t), frame.py(m + s)));
            let lower = b.times.iter().zip(&b.states[i]).rev().map(|(&t, (m, s))| (frame.px(t), frame.py(m - s)));
            svg.polygon(&upper.chain(lower).collect::<Vec<_>>(), color, 0.2);
            let mean: Vec<(f64, f64)> = b.times.iter().zip(&b.states[i]).map(|(&t, (m, _))| (frame.px(t), frame.py(*m))).collect();
            svg.polyline(&mean, color, 1.5, false);
        }
    }
    // legend, ascending ξ
    for (k, b) in bands.iter().enumerate() {
        let y = 60.0 + 20.0 * k as f64;
        let color = PALETTE[k % PALETTE.len()];
        svg.rect(580.0, y - 9.0, 14.0, 10.0, color, "none");
        svg.text(600.0, y, "start", 12.0, &format!("ξ = {}", b.xi));
    }
    Ok(svg.finish())
}

// ---------------------------------------------------------------------------
// Cost heatmap

fn color_ramp(t: f64) -> String {
    // light yellow to dark blue
    let stops = [(255.0, 255.0, 204.0), (65.0, 182.0, 196.0), (37.0, 52.0, 148.0)];
    let t = t.clamp(0.0, 1.0) * 2.0;
    let k = (t.floor() as usize).min(1);
    let w = t - k as f64;
    let c = |a: f64, b: f64| (a + w * (b - a)).round() as u8;
    let (a, b) = (stops[k], stops[k + 1]);
    format!("#{:02x}{:02x}{:02x}", c(a.0, b.0), c(a.1, b.1), c(a.2, b.2))
}

/// Marching squares on a grid of node values; returns line segments in
/// grid coordinates `(column, row)`. Squares with a missing corner are skipped.
pub(crate) fn contour_segments(values: &[Vec<Option<f64>>], level: f64) -> Vec<((f64, f64), (f64, f64))> {
    let mut out = Vec::new();
    let rows = values.len();
    let cols = values.first().map_or(0, Vec::len);
    for r in 0..rows.saturating_sub(1) {
        for c in 0..cols.saturating_sub(1) {
            let corners = [(c, r), (c + 1, r), (c + 1, r + 1), (c, r + 1)];
            let Some(v) = corners.iter().map(|&(x, y)| values[y][x]).collect::<Option<Vec<f64>>>() else {
                continue;
            };
            // crossing points along the four edges
            let mut crossings = Vec::new();
            for e in 0..4 {
                let (a, b) = (e, (e + 1) % 4);
                if (v[a] < level) != (v[b] < level) {
                    let w = (level - v[a]) / (v[b] - v[a]);
                    let (pa, pb) = (corners[a], corners[b]);
                    crossings.push((
                        pa.0 as f64 + w * (pb.0 as f64 - pa.0 as f64),
                        pa.1 as f64 + w * (pb.1 as f64 - pa.1 as f64),
                    ));
                }
            }
            match crossings.len() {
                2 => out.push((crossings[0], crossings[1])),
                4 => {
                    // saddle: pair by the center value
                    let center = v.iter().sum::<f64>() / 4.0;
                    if (center < level) == (v[0] < level) {
                        out.push((crossings[0], crossings[3]));
                        out.push((crossings[1], crossings[2]));
                    } else {
                        out.push((crossings[0], crossings[1]));
                        out.push((crossings[2], crossings[3]));
                    }
                }
                _ => {}
            }
        }
    }
    out
}

fn render_cost_grid(path: &Path) -> Result<String, RenderError> {
    let table = Table::read(path)?;
    let n = table.required("N")?;
    let f = table.required("f_c_hz")?;
    let frac = table.required("feasible_fraction")?;
    let cost = table.floats("mean_cost")?;
    table.floats("eta")?;

    let mut ns: Vec<f64> = n.clone();
    ns.sort_by(f64::total_cmp);
    ns.dedup();
    let mut fs_: Vec<f64> = f.clone();
    fs_.sort_by(f64::total_cmp);
    fs_.dedup();
    let key = |v: f64| v.to_bits();
    let mut cells: BTreeMap<(usize, usize), (Option<f64>, f64)> = BTreeMap::new();
    let n_index: BTreeMap<u64, usize> = ns.iter().enumerate().map(|(i, &v)| (key(v), i)).collect();
    let f_index: BTreeMap<u64, usize> = fs_.iter().enumerate().map(|(i, &v)| (key(v), i)).collect();
    for i in 0..n.len() {
        cells.insert((n_index[&key(n[i])], f_index[&key(f[i])]), (cost[i].filter(|c| *c > 0.0), frac[i]));
    }
    // log cost at cell centers, rows = N, columns = f_c
    let grid: Vec<Vec<Option<f64>>> = (0..ns.len())
        .map(|r| (0..fs_.len()).map(|c| cells.get(&(r, c)).and_then(|v| v.0).map(f64::ln)).collect())
        .collect();
    let (lo, hi) = padded(grid.iter().flatten().flatten().copied(), 0.0);

    let (left, top, width, height) = (90.0, 50.0, 480.0, 300.0);
    let cw = width / fs_.len() as f64;
    let ch = height / ns.len() as f64;
    let mut svg = Svg::new(700.0, 420.0);
    svg.text(330.0, 26.0, "middle", 14.0, "Mean closed-loop cost over dataset size and control frequency");
    for r in 0..ns.len() {
        for c in 0..fs_.len() {
            let x = left + c as f64 * cw;
            let y = top + height - (r + 1) as f64 * ch;
            match (grid[r][c], cells.get(&(r, c))) {
                (Some(v), Some((Some(raw), fr))) => {
                    svg.rect(x, y, cw, ch, &color_ramp((v - lo) / (hi - lo)), "white");
                    svg.text(x + cw / 2.0, y + ch / 2.0, "middle", 10.0, &format!("{raw:.3}"));
                    if *fr < 1.0 {
                        svg.text(x + cw / 2.0, y + ch / 2.0 + 12.0, "middle", 9.0, &format!("{:.0}%", fr * 100.0));
                    }
                }
                _ => {
                    svg.rect(x, y, cw, ch, "#dddddd", "white");
                    svg.text(x + cw / 2.0, y + ch / 2.0 + 4.0, "middle", 10.0, "infeasible");
                }
            }
        }
    }
    // contours through cell centers at evenly spaced log-cost levels
    let to_px = |(gc, gr): (f64, f64)| (left + (gc + 0.5) * cw, top + height - (gr + 0.5) * ch);
    let levels = 4;
    for k in 1..=levels {
        let level = lo + (hi - lo) * k as f64 / (levels + 1) as f64;
        let segs = contour_segments(&grid, level);
        for &(a, b) in &segs {
            let (a, b) = (to_px(a), to_px(b));
            svg.line(a.0, a.1, b.0, b.1, "#222222", 1.2);
        }
        if let Some(&(a, b)) = segs.first() {
            let (a, b) = (to_px(a), to_px(b));
            svg.text((a.0 + b.0) / 2.0, (a.1 + b.1) / 2.0 - 3.0, "middle", 9.0, &format!("{:.3}", level.exp()));
        }
    }
    svg.rect(left, top, width, height, "none", "#333333");
    for (c, v) in fs_.iter().enumerate() {
        svg.text(left + (c as f64 + 0.5) * cw, top + height + 18.0, "middle", 11.0, &tick_label(*v));
    }
    for (r, v) in ns.iter().enumerate() {
        svg.text(left - 8.0, top + height - (r as f64 + 0.5) * ch + 4.0, "end", 11.0, &tick_label(*v));
    }
    svg.text(left + width / 2.0, top + height + 38.0, "middle", 12.0, "control frequency [Hz]");
    svg.vertical_text(left - 50.0, top + height / 2.0, 12.0, "dataset size N");
    // color bar
    for k in 0..20 {
        let t = k as f64 / 19.0;
        svg.rect(600.0, top + height - (k + 1) as f64 * height / 20.0, 16.0, height / 20.0, &color_ramp(t), "none");
    }
    svg.text(622.0, top + height, "start", 10.0, &format!("{:.3}", lo.exp()));
    svg.text(622.0, top + 10.0, "start", 10.0, &format!("{:.3}", hi.exp()));
    svg.vertical_text(660.0, top + height / 2.0, 11.0, "mean cost (log scale)");
    Ok(svg.finish())
}
