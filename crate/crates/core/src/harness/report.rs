//! Tables and plots built from run records.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::DatasetId;
use super::run::{round2, MethodId, RunRecord};
use crate::conmix::AblationVariant;
use crate::corruption::NoiseSource;
use crate::error::{Result, TtaError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// Adapted error per method across datasets and corruptions.
    Table2,
    /// Unadapted vs adapted error with the signed change.
    Table4,
    FigBars,
    /// Per-epoch accuracy and pseudo-label loss of the ablation variants.
    AppendixCurves,
}

impl Layout {
    pub const ALL: [Layout; 4] = [Layout::Table2, Layout::Table4, Layout::FigBars, Layout::AppendixCurves];

    pub fn name(self) -> &'static str {
        match self {
            Layout::Table2 => "table2",
            Layout::Table4 => "table4",
            Layout::FigBars => "fig_bars",
            Layout::AppendixCurves => "appendix_curves",
        }
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Layout {
    type Err = TtaError;
    fn from_str(s: &str) -> Result<Self> {
        Layout::ALL.into_iter().find(|l| l.name() == s).ok_or_else(|| TtaError::Config(format!("unknown layout {s:?}")))
    }
}

/// Arrow for an adaptation change: down when adaptation lowered the error.
pub fn delta_marker(unadapted: f64, adapted: f64) -> &'static str {
    if adapted < unadapted {
        "↓"
    } else if adapted > unadapted {
        "↑"
    } else {
        "="
    }
}

/// A corruption condition: dataset, noise and severity.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Condition {
    dataset: DatasetId,
    noise: NoiseSource,
    severity: f64,
}

impl Condition {
    fn of(r: &RunRecord) -> Self {
        Self { dataset: r.cell.dataset, noise: r.cell.noise, severity: r.cell.severity }
    }

    fn key(&self) -> (DatasetId, NoiseSource, i64) {
        (self.dataset, self.noise, (self.severity * 1e6).round() as i64)
    }

    fn label(&self) -> String {
        format!("{}-{}-{}", self.dataset, self.noise, self.severity)
    }
}

fn conditions(records: &[&RunRecord]) -> Vec<Condition> {
    let mut map = BTreeMap::new();
    for r in records {
        let c = Condition::of(r);
        map.entry(c.key()).or_insert(c);
    }
    map.into_values().collect()
}

/// Seed-averaged error rates of one (method, condition).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub unadapted: f64,
    pub adapted: f64,
    pub runs: usize,
}

impl Summary {
    pub fn delta(&self) -> f64 {
        self.adapted - self.unadapted
    }
}

fn summarize(records: &[&RunRecord]) -> Option<Summary> {
    if records.is_empty() {
        return None;
    }
    let n = records.len() as f64;
    Some(Summary {
        unadapted: round2(records.iter().map(|r| r.unadapted_error).sum::<f64>() / n),
        adapted: round2(records.iter().map(|r| r.adapted_error).sum::<f64>() / n),
        runs: records.len(),
    })
}

fn aligned(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> =
        (0..cols).map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for row in rows {
        let line: Vec<String> = row.iter().enumerate().map(|(i, s)| format!("{s:>w$}", w = widths[i])).collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

fn csv(rows: &[Vec<String>]) -> String {
    rows.iter().map(|r| r.join(",") + "\n").collect()
}

fn write_table(out_dir: &Path, stem: &str, rows: &[Vec<String>], written: &mut Vec<PathBuf>) -> Result<()> {
    for (ext, body) in [("csv", csv(rows)), ("txt", aligned(rows))] {
        let path = out_dir.join(format!("{stem}.{ext}"));
        fs::write(&path, body)?;
        written.push(path);
    }
    Ok(())
}

fn plot_err<E: std::error::Error + Send + Sync>(e: DrawingAreaErrorKind<E>) -> TtaError {
    TtaError::Plot(e.to_string())
}

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

/// Writes the layout's files into `out_dir` and returns their paths. When
/// the records do not cover the full grid the partial output is still
/// written and `IncompleteGrid` lists the missing cells.
pub fn report(records: &[RunRecord], layout: Layout, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let missing = match layout {
        Layout::AppendixCurves => appendix_curves(records, out_dir, &mut written)?,
        _ => method_tables(records, layout, out_dir, &mut written)?,
    };
    if missing.is_empty() {
        Ok(written)
    } else {
        Err(TtaError::IncompleteGrid(missing))
    }
}

fn method_tables(records: &[RunRecord], layout: Layout, out_dir: &Path, written: &mut Vec<PathBuf>) -> Result<Vec<String>> {
    let main: Vec<&RunRecord> = records.iter().filter(|r| r.cell.variant.is_none()).collect();
    let methods: BTreeSet<MethodId> = main.iter().map(|r| r.cell.method).collect();
    let conds = conditions(&main);
    let mut cells: BTreeMap<(MethodId, (DatasetId, NoiseSource, i64)), Summary> = BTreeMap::new();
    let mut missing = Vec::new();
    for &m in &methods {
        for c in &conds {
            let group: Vec<&RunRecord> =
                main.iter().copied().filter(|r| r.cell.method == m && Condition::of(r).key() == c.key()).collect();
            match summarize(&group) {
                Some(s) => {
                    cells.insert((m, c.key()), s);
                }
                None => missing.push(format!("{m}/{}", c.label())),
            }
        }
    }
    let fmt = |v: f64| format!("{v:.2}");
    match layout {
        Layout::Table2 => {
            let mut rows = vec![std::iter::once("method".to_string()).chain(conds.iter().map(Condition::label)).collect()];
            for &m in &methods {
                let mut row = vec![m.to_string()];
                row.extend(conds.iter().map(|c| cells.get(&(m, c.key())).map_or("-".into(), |s| fmt(s.adapted))));
                rows.push(row);
            }
            write_table(out_dir, "table2", &rows, written)?;
        }
        Layout::Table4 => {
            let mut rows = vec![["dataset", "noise", "severity", "method", "unadapted", "adapted", "delta", "change"]
                .map(String::from)
                .to_vec()];
            for c in &conds {
                for &m in &methods {
                    if let Some(s) = cells.get(&(m, c.key())) {
                        rows.push(vec![
                            c.dataset.to_string(),
                            c.noise.to_string(),
                            c.severity.to_string(),
                            m.to_string(),
                            fmt(s.unadapted),
                            fmt(s.adapted),
                            format!("{:+.2}", s.delta()),
                            delta_marker(s.unadapted, s.adapted).to_string(),
                        ]);
                    }
                }
            }
            write_table(out_dir, "table4", &rows, written)?;
        }
        Layout::FigBars => {
            let datasets: BTreeSet<DatasetId> = conds.iter().map(|c| c.dataset).collect();
            for d in datasets {
                let dconds: Vec<&Condition> = conds.iter().filter(|c| c.dataset == d).collect();
                let path = out_dir.join(format!("fig_bars_{d}.svg"));
                bar_chart(&path, d, &dconds, &methods, &cells)?;
                written.push(path);
            }
        }
        Layout::AppendixCurves => unreachable!("handled separately"),
    }
    Ok(missing)
}

fn bar_chart(
    path: &Path,
    dataset: DatasetId,
    conds: &[&Condition],
    methods: &BTreeSet<MethodId>,
    cells: &BTreeMap<(MethodId, (DatasetId, NoiseSource, i64)), Summary>,
) -> Result<()> {
    let root = SVGBackend::new(path, (900, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let labels: Vec<String> = conds.iter().map(|c| format!("{}-{}", c.noise, c.severity)).collect();
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("{dataset}: adapted error rate (%)"), ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0f64..conds.len() as f64, 0f64..100f64)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(conds.len().max(1) * 2 + 1)
        .x_label_formatter(&|x| {
            let i = x.floor() as usize;
            if (x - i as f64 - 0.5).abs() < 1e-6 {
                labels.get(i).cloned().unwrap_or_default()
            } else {
                String::new()
            }
        })
        .y_desc("error %")
        .draw()
        .map_err(plot_err)?;
    let width = 0.8 / methods.len().max(1) as f64;
    for (mi, &m) in methods.iter().enumerate() {
        let color = PALETTE[mi % PALETTE.len()];
        let bars: Vec<Rectangle<(f64, f64)>> = conds
            .iter()
            .enumerate()
            .filter_map(|(ci, c)| {
                let s = cells.get(&(m, c.key()))?;
                let x0 = ci as f64 + 0.1 + mi as f64 * width;
                Some(Rectangle::new([(x0, 0.0), (x0 + width, s.adapted)], color.filled()))
            })
            .collect();
        chart
            .draw_series(bars)
            .map_err(plot_err)?
            .label(m.to_string())
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 12, y + 5)], color.filled()));
    }
    chart.configure_series_labels().background_style(WHITE).border_style(BLACK).draw().map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

fn epoch_mean(runs: &[&RunRecord], f: impl Fn(&RunRecord) -> &[f64]) -> Vec<f64> {
    let len = runs.iter().map(|r| f(r).len()).min().unwrap_or(0);
    (0..len).map(|e| runs.iter().map(|r| f(r)[e]).sum::<f64>() / runs.len() as f64).collect()
}

fn appendix_curves(records: &[RunRecord], out_dir: &Path, written: &mut Vec<PathBuf>) -> Result<Vec<String>> {
    let ablation: Vec<&RunRecord> = records.iter().filter(|r| r.cell.variant.is_some()).collect();
    let conds = conditions(&ablation);
    let mut rows = vec![["dataset", "noise", "severity", "variant", "epoch", "accuracy", "pl_loss"].map(String::from).to_vec()];
    let mut missing = Vec::new();
    for c in &conds {
        let mut acc_series = Vec::new();
        let mut pl_series = Vec::new();
        for v in AblationVariant::ALL {
            let runs: Vec<&RunRecord> =
                ablation.iter().copied().filter(|r| r.cell.variant == Some(v) && Condition::of(r).key() == c.key()).collect();
            if runs.is_empty() {
                missing.push(format!("{}/{v}", c.label()));
                continue;
            }
            let acc: Vec<f64> = epoch_mean(&runs, |r| &r.epoch_error_rates).into_iter().map(|e| 100.0 - e).collect();
            let pl = epoch_mean(&runs, |r| &r.epoch_pl_losses);
            for (e, a) in acc.iter().enumerate() {
                let p = pl.get(e).map_or(String::new(), |p| format!("{p:.6}"));
                rows.push(vec![
                    c.dataset.to_string(),
                    c.noise.to_string(),
                    c.severity.to_string(),
                    v.to_string(),
                    (e + 1).to_string(),
                    format!("{a:.2}"),
                    p,
                ]);
            }
            acc_series.push((v, acc));
            pl_series.push((v, pl));
        }
        let stem = format!("appendix_{}_{}_{}", c.dataset, c.noise, c.severity);
        for (suffix, series, desc) in [("acc", &acc_series, "accuracy %"), ("pl", &pl_series, "pseudo-label loss")] {
            let path = out_dir.join(format!("{stem}_{suffix}.svg"));
            line_chart(&path, &format!("{} {}: {desc}", c.dataset, c.label()), desc, series)?;
            written.push(path);
        }
    }
    write_table(out_dir, "appendix_curves", &rows, written)?;
    Ok(missing)
}

fn line_chart(path: &Path, title: &str, y_desc: &str, series: &[(AblationVariant, Vec<f64>)]) -> Result<()> {
    let epochs = series.iter().map(|(_, s)| s.len()).max().unwrap_or(1).max(1);
    let (mut lo, mut hi) = series
        .iter()
        .flat_map(|(_, s)| s.iter().copied())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-3);
    let root = SVGBackend::new(path, (800, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(1f64..(epochs as f64).max(2.0), (lo - pad)..(hi + pad))
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("epoch").y_desc(y_desc).draw().map_err(plot_err)?;
    for (i, (v, s)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(s.iter().enumerate().map(|(e, y)| ((e + 1) as f64, *y)), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(v.to_string())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart.configure_series_labels().background_style(WHITE).border_style(BLACK).draw().map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn markers() {
        assert_eq!(delta_marker(20.0, 10.0), "↓");
        assert_eq!(delta_marker(10.0, 20.0), "↑");
        assert_eq!(delta_marker(10.0, 10.0), "=");
        assert_eq!("fig_bars".parse::<Layout>().unwrap(), Layout::FigBars);
    }

    #[test]
    fn alignment_pads_columns() {
        let rows = vec![vec!["a".to_string(), "bbb".to_string()], vec!["cc".to_string(), "d".to_string()]];
        assert_eq!(aligned(&rows), " a  bbb\ncc    d\n");
    }
}
