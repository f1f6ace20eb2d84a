//! Static SVG panels: one curve per mode, median line with a min/max band
//! across seeds.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Panel {
    Loss,
    CosineMargin,
    MarginDistribution,
    Nc1,
    Nc3,
    Equinorm,
}

impl Panel {
    pub const ALL: [Panel; 6] =
        [Panel::Loss, Panel::CosineMargin, Panel::MarginDistribution, Panel::Nc1, Panel::Nc3, Panel::Equinorm];

    pub fn as_str(self) -> &'static str {
        match self {
            Panel::Loss => "loss",
            Panel::CosineMargin => "cosine_margin",
            Panel::MarginDistribution => "margin_distribution",
            Panel::Nc1 => "nc1",
            Panel::Nc3 => "nc3",
            Panel::Equinorm => "equinorm",
        }
    }

    /// Trace column plotted against iteration; `None` for the margin panel.
    pub fn column(self) -> Option<&'static str> {
        match self {
            Panel::Loss => Some("loss"),
            Panel::CosineMargin => Some("mean_cosine_margin"),
            Panel::MarginDistribution => None,
            Panel::Nc1 => Some("nc1"),
            Panel::Nc3 => Some("nc3"),
            Panel::Equinorm => Some("equinorm_gap"),
        }
    }

    fn y_label(self) -> &'static str {
        match self {
            Panel::Loss => "CE loss",
            Panel::CosineMargin => "mean cosine margin",
            Panel::MarginDistribution => "cosine margin",
            Panel::Nc1 => "log10 NC1",
            Panel::Nc3 => "NC3",
            Panel::Equinorm => "equinorm gap",
        }
    }

    /// NC1 spans many decades.
    fn transform(self, v: f64) -> f64 {
        match self {
            Panel::Nc1 => v.max(1e-16).log10(),
            _ => v,
        }
    }
}

impl std::str::FromStr for Panel {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        Panel::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| CliError::Config(format!("unknown panel `{s}`")))
    }
}

pub fn parse_panels(s: &str) -> Result<Vec<Panel>> {
    if s.trim() == "all" {
        return Ok(Panel::ALL.to_vec());
    }
    s.split(',').filter(|p| !p.trim().is_empty()).map(|p| p.trim().parse()).collect()
}

/// Expands a glob into metrics traces, dropping the companion files a run
/// writes next to them.
pub fn expand_glob(pattern: &str) -> Result<Vec<PathBuf>> {
    let paths = glob::glob(pattern).map_err(|e| CliError::Config(format!("bad glob `{pattern}`: {e}")))?;
    let mut out: Vec<PathBuf> = paths
        .filter_map(|p| p.ok())
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            !(name.ends_with("_margins.csv") || name == "runs.csv" || name == "summary.csv")
        })
        .collect();
    out.sort();
    Ok(out)
}

/// `(mode, x, y)` samples of one file.
type Samples = Vec<(String, f64, f64)>;

fn read_columns(path: &Path, x_col: &str, y_col: &str, mode: Option<&str>) -> Result<Samples> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::csv(path, e))?;
    let headers = r.headers().map_err(|e| CliError::csv(path, e))?.clone();
    let mut required = vec![x_col, y_col];
    if mode.is_none() {
        required.insert(0, "mode");
    }
    let mut idx = Vec::new();
    for col in &required {
        match headers.iter().position(|h| h == *col) {
            Some(i) => idx.push(i),
            None => return Err(CliError::Schema { path: path.to_path_buf(), column: col.to_string() }),
        }
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| CliError::csv(path, e))?;
        let get = |k: usize| rec.get(idx[k]).unwrap_or("");
        let (m, xs, ys) = match mode {
            Some(m) => (m.to_string(), get(0), get(1)),
            None => (get(0).to_string(), get(1), get(2)),
        };
        let parse = |s: &str, col: &str| {
            s.parse::<f64>()
                .map_err(|_| CliError::Plot(format!("{}: column `{col}` holds `{s}`", path.display())))
        };
        if ys.is_empty() {
            continue;
        }
        out.push((m, parse(xs, required[required.len() - 2])?, parse(ys, required[required.len() - 1])?));
    }
    Ok(out)
}

/// Per mode: `x → (median, min, max)` over the runs.
type Bands = BTreeMap<String, Vec<(f64, f64, f64, f64)>>;

fn bands(runs: &[Samples]) -> Bands {
    let mut by_mode: BTreeMap<String, BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
    for run in runs {
        for (m, x, y) in run {
            by_mode.entry(m.clone()).or_default().entry(x.to_bits()).or_default().push(*y);
        }
    }
    by_mode
        .into_iter()
        .map(|(m, xs)| {
            let mut pts: Vec<(f64, f64, f64, f64)> = xs
                .into_iter()
                .filter_map(|(xb, ys)| {
                    crate::run::median_min_max(&ys).map(|(med, lo, hi)| (f64::from_bits(xb), med, lo, hi))
                })
                .collect();
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            (m, pts)
        })
        .collect()
}

fn margin_samples(path: &Path) -> Result<Samples> {
    let mode = read_columns(path, "iteration", "loss", None)?
        .first()
        .map(|s| s.0.clone())
        .ok_or_else(|| CliError::Plot(format!("{}: no rows", path.display())))?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
    let companion = path.with_file_name(format!("{stem}_margins.csv"));
    if !companion.exists() {
        return Err(CliError::io(&companion, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    let mut margins: Vec<f64> =
        read_columns(&companion, "sample", "margin", Some(&mode))?.into_iter().map(|s| s.2).collect();
    margins.sort_by(|a, b| b.total_cmp(a));
    Ok(margins.into_iter().enumerate().map(|(i, m)| (mode.clone(), i as f64, m)).collect())
}

fn colour(i: usize) -> RGBColor {
    const PALETTE: [RGBColor; 6] = [
        RGBColor(31, 119, 180),
        RGBColor(255, 127, 14),
        RGBColor(44, 160, 44),
        RGBColor(214, 39, 40),
        RGBColor(148, 103, 189),
        RGBColor(140, 86, 75),
    ];
    PALETTE[i % PALETTE.len()]
}

fn draw(panel: Panel, bands: &Bands, path: &Path) -> Result<()> {
    let err = |e: String| CliError::Plot(format!("{}: {e}", path.display()));
    let pts = bands.values().flatten();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, _, lo, hi) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(panel.transform(lo));
        y1 = y1.max(panel.transform(hi));
    }
    if !x0.is_finite() || !y0.is_finite() || !y1.is_finite() {
        return Err(err("nothing to plot".into()));
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let pad = 0.05 * (y1 - y0).max(1e-12);
    let (y0, y1) = (y0 - pad, y1 + pad);

    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(e.to_string()))?;
    let x_label = if panel == Panel::MarginDistribution { "training example (sorted)" } else { "iteration" };
    let mut chart = ChartBuilder::on(&root)
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(|e| err(e.to_string()))?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc(panel.y_label())
        .draw()
        .map_err(|e| err(e.to_string()))?;
    for (i, (mode, pts)) in bands.iter().enumerate() {
        let c = colour(i);
        let mut band: Vec<(f64, f64)> = pts.iter().map(|p| (p.0, panel.transform(p.3))).collect();
        band.extend(pts.iter().rev().map(|p| (p.0, panel.transform(p.2))));
        chart.draw_series(std::iter::once(Polygon::new(band, c.mix(0.2)))).map_err(|e| err(e.to_string()))?;
        chart
            .draw_series(LineSeries::new(pts.iter().map(|p| (p.0, panel.transform(p.1))), c.stroke_width(2)))
            .map_err(|e| err(e.to_string()))?
            .label(mode.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], c.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| err(e.to_string()))?;
    root.present().map_err(|e| err(e.to_string()))
}

/// Writes `<out_dir>/<panel>.svg` for every requested panel and returns the
/// paths. Margin distributions are read from the `_margins.csv` file next to
/// each trace.
pub fn emit_plots(csv_paths: &[PathBuf], panels: &[Panel], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if panels.is_empty() {
        return Ok(Vec::new());
    }
    if csv_paths.is_empty() {
        return Err(CliError::Plot("no input CSV files".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let mut written = Vec::new();
    for &panel in panels {
        let runs: Vec<Samples> = csv_paths
            .iter()
            .map(|p| match panel.column() {
                Some(col) => read_columns(p, "iteration", col, None),
                None => margin_samples(p),
            })
            .collect::<Result<_>>()?;
        let path = out_dir.join(format!("{}.svg", panel.as_str()));
        draw(panel, &bands(&runs), &path)?;
        written.push(path);
    }
    Ok(written)
}
