//! Static SVG charts from the CSV logs written by training, evaluation and
//! ablation runs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::error::{Error, Result};

/// Longest polyline drawn; longer logs are averaged over equal buckets.
pub const MAX_POINTS: usize = 1000;

const SIZE: (u32, u32) = (800, 480);

/// The kinds of CSV log the renderer understands, told apart by header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogKind {
    Metrics,
    Ablation,
    Predictions,
}

pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let err = |e: csv::Error| Error::Config(format!("{}: {e}", path.display()));
        let mut r = csv::Reader::from_path(path).map_err(err)?;
        let header = r.headers().map_err(err)?.iter().map(str::to_string).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()))
            .collect::<std::result::Result<_, _>>()
            .map_err(err)?;
        Ok(Self { header, rows })
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn numbers(&self, col: usize) -> Result<Vec<f64>> {
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                r[col].parse::<f64>().map_err(|_| {
                    Error::Config(format!("row {}: `{}` is not a number in column `{}`", i + 1, r[col], self.header[col]))
                })
            })
            .collect()
    }

    pub fn kind(&self) -> Option<LogKind> {
        let has = |n: &str| self.column(n).is_some();
        if has("iteration") && has("lr") {
            Some(LogKind::Metrics)
        } else if has("label") && has("accuracy") {
            Some(LogKind::Ablation)
        } else if has("selected") && has("correct") {
            Some(LogKind::Predictions)
        } else {
            None
        }
    }
}

/// Averages `ys` over at most `max` equal buckets; x is the bucket mean too.
pub fn bucket_means(xs: &[f64], ys: &[f64], max: usize) -> Vec<(f64, f64)> {
    let n = xs.len().min(ys.len());
    if n == 0 {
        return Vec::new();
    }
    let size = n.div_ceil(max.max(1));
    (0..n)
        .step_by(size)
        .map(|s| {
            let e = (s + size).min(n);
            let k = (e - s) as f64;
            (xs[s..e].iter().sum::<f64>() / k, ys[s..e].iter().sum::<f64>() / k)
        })
        .collect()
}

fn plot_err<E: std::fmt::Debug>(e: E) -> Error {
    Error::Config(format!("plot: {e:?}"))
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

/// Line chart of named series sharing an x axis.
pub fn line_chart(title: &str, x_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> Result<String> {
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, SIZE).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let xs = range(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)));
        let ys = range(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)));
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(60)
            .build_cartesian_2d(xs.0..xs.1, ys.0..ys.1)
            .map_err(plot_err)?;
        chart
            .configure_mesh()
            .x_desc(x_label)
            .draw()
            .map_err(plot_err)?;
        for (i, (name, points)) in series.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            chart
                .draw_series(LineSeries::new(points.iter().copied(), color.stroke_width(2)))
                .map_err(plot_err)?
                .label(name.as_str())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    Ok(svg)
}

/// Vertical bar chart with one labelled bar per entry, values in [0, 1].
pub fn bar_chart(title: &str, bars: &[(String, f64)]) -> Result<String> {
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, SIZE).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let n = bars.len().max(1);
        let labels: Vec<String> = bars.iter().map(|b| b.0.clone()).collect();
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(60)
            .y_label_area_size(50)
            .build_cartesian_2d(0f64..n as f64, 0f64..1f64)
            .map_err(plot_err)?;
        chart
            .configure_mesh()
            .disable_x_mesh()
            .x_labels(n)
            .x_label_formatter(&|x| {
                let i = x.floor() as usize;
                labels.get(i).cloned().unwrap_or_default()
            })
            .draw()
            .map_err(plot_err)?;
        chart
            .draw_series(bars.iter().enumerate().map(|(i, (_, v))| {
                let x = i as f64;
                Rectangle::new([(x + 0.15, 0.0), (x + 0.85, v.clamp(0.0, 1.0))], BLUE.mix(0.6).filled())
            }))
            .map_err(plot_err)?;
        chart
            .draw_series(bars.iter().enumerate().map(|(i, (_, v))| {
                Text::new(format!("{v:.3}"), (i as f64 + 0.3, (v + 0.03).min(0.97)), ("sans-serif", 14))
            }))
            .map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    Ok(svg)
}

/// Charts for a metrics log: loss terms and learning rate against iteration.
pub fn metrics_charts(t: &Table) -> Result<Vec<(String, String)>> {
    let it = t.numbers(t.column("iteration").expect("metrics log"))?;
    let mut losses = Vec::new();
    for name in ["total", "loss_sub", "loss_obj", "loss_avis", "loss_alan", "loss_lan", "loss_att"] {
        if let Some(c) = t.column(name) {
            losses.push((name.to_string(), bucket_means(&it, &t.numbers(c)?, MAX_POINTS)));
        }
    }
    let lr = t.numbers(t.column("lr").expect("metrics log"))?;
    let lr = vec![("lr".to_string(), bucket_means(&it, &lr, MAX_POINTS))];
    Ok(vec![
        ("loss".into(), line_chart("training loss", "iteration", &losses)?),
        ("lr".into(), line_chart("learning rate", "iteration", &lr)?),
    ])
}

/// Charts for an ablation table: overall and per-kind accuracy per row.
pub fn ablation_charts(t: &Table) -> Result<Vec<(String, String)>> {
    let label = t.column("label").expect("ablation table");
    let mut out = Vec::new();
    for (i, name) in t.header.iter().enumerate() {
        if name == "accuracy" || name.starts_with("accuracy_") {
            let bars = t
                .rows
                .iter()
                .filter_map(|r| r[i].parse::<f64>().ok().map(|v| (r[label].clone(), v)))
                .collect::<Vec<_>>();
            out.push((name.clone(), bar_chart(&format!("ablation: {name}"), &bars)?));
        }
    }
    if let Some(c) = t.column("mean_candidates") {
        let vals = t.numbers(c)?;
        let max = vals.iter().copied().fold(1.0, f64::max);
        let bars = t.rows.iter().zip(&vals).map(|(r, v)| (r[label].clone(), v / max)).collect::<Vec<_>>();
        out.push(("candidates".into(), bar_chart(&format!("ablation: surviving candidates / {max:.2}"), &bars)?));
    }
    Ok(out)
}

/// Accuracy per query kind from a prediction log.
pub fn prediction_charts(t: &Table) -> Result<Vec<(String, String)>> {
    let correct = t.column("correct").expect("prediction log");
    let kind = t.column("kind");
    let mut by: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for r in &t.rows {
        let ok = r[correct] == "true";
        for k in ["all".to_string(), kind.map_or_else(String::new, |c| r[c].clone())] {
            if k.is_empty() {
                continue;
            }
            let e = by.entry(k).or_default();
            e.0 += 1;
            e.1 += ok as usize;
        }
    }
    let bars: Vec<(String, f64)> = by
        .into_iter()
        .map(|(k, (n, c))| (format!("{k} ({n})"), c as f64 / n as f64))
        .collect();
    Ok(vec![("accuracy".into(), bar_chart("accuracy by query kind", &bars)?)])
}

/// Renders every chart for the log at `input` into `out_dir`, named
/// `<input stem>_<chart>.svg`. Returns the written paths.
pub fn render(input: impl AsRef<Path>, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let input = input.as_ref();
    let out_dir = out_dir.as_ref();
    let t = Table::read(input)?;
    let charts = match t.kind() {
        Some(LogKind::Metrics) => metrics_charts(&t)?,
        Some(LogKind::Ablation) => ablation_charts(&t)?,
        Some(LogKind::Predictions) => prediction_charts(&t)?,
        None => {
            return Err(Error::Config(format!(
                "{}: not a metrics, ablation or prediction log",
                input.display()
            )))
        }
    };
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("log");
    let mut written = Vec::new();
    for (name, svg) in charts {
        let p = out_dir.join(format!("{stem}_{name}.svg"));
        std::fs::write(&p, svg).map_err(|e| Error::io(&p, e))?;
        written.push(p);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buckets_average() {
        let xs: Vec<f64> = (0..10).map(f64::from).collect();
        let b = bucket_means(&xs, &xs, 5);
        assert_eq!(b.len(), 5);
        assert_eq!(b[0], (0.5, 0.5));
        assert_eq!(bucket_means(&xs, &xs, 100).len(), 10);
        assert!(bucket_means(&[], &[], 3).is_empty());
    }

    #[test]
    fn bars_render() {
        let svg = bar_chart("t", &[("a".into(), 0.25), ("b".into(), 1.0)]).unwrap();
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("0.250"));
    }
}
