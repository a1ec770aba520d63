//! SVG figures from the CSV files a training run writes.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use plotters::prelude::*;

/// Columns of a CSV file keyed by header name. Empty cells become NaN.
struct Table {
    columns: BTreeMap<String, Vec<f64>>,
    order: Vec<String>,
}

impl Table {
    fn read(path: &Path) -> Result<Table> {
        let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
        let order: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        let mut columns: BTreeMap<String, Vec<f64>> = order.iter().map(|h| (h.clone(), Vec::new())).collect();
        for rec in r.records() {
            let rec = rec?;
            for (h, cell) in order.iter().zip(rec.iter()) {
                let v = if cell.is_empty() {
                    f64::NAN
                } else {
                    cell.parse().with_context(|| format!("bad number {cell:?} in column {h}"))?
                };
                columns.get_mut(h).expect("header").push(v);
            }
        }
        Ok(Table { columns, order })
    }

    fn col(&self, name: &str) -> Result<&[f64]> {
        match self.columns.get(name) {
            Some(c) => Ok(c),
            None => bail!("missing column {name}"),
        }
    }
}

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

fn span(values: impl Iterator<Item = f64>) -> Range<f64> {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return 0.0..1.0;
    }
    if hi - lo < 1e-12 {
        return lo - 0.5..hi + 0.5;
    }
    let pad = 0.05 * (hi - lo);
    lo - pad..hi + pad
}

fn line_chart(path: &Path, title: &str, x: &[f64], series: &[(String, Vec<f64>)], y_label: &str) -> Result<()> {
    let root = SVGBackend::new(path, (900, 540)).into_drawing_area();
    root.fill(&WHITE)?;
    let xr = span(x.iter().copied());
    let yr = span(series.iter().flat_map(|(_, ys)| ys.iter().copied()));
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(70)
        .build_cartesian_2d(xr, yr)?;
    chart.configure_mesh().x_desc("step").y_desc(y_label).draw()?;
    for (k, (name, ys)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<(f64, f64)> = x.iter().copied().zip(ys.iter().copied()).filter(|(_, y)| y.is_finite()).collect();
        chart
            .draw_series(LineSeries::new(pts, color.stroke_width(2)))?
            .label(name.as_str())
            .legend(move |(a, b)| PathElement::new(vec![(a, b), (a + 20, b)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()?;
    root.present()?;
    Ok(())
}

fn histogram(path: &Path, title: &str, groups: &[(&str, Vec<f64>)], bins: usize) -> Result<()> {
    let all = groups.iter().flat_map(|(_, v)| v.iter().copied());
    let Range { start: lo, end: hi } = span(all);
    let width = (hi - lo) / bins as f64;
    let counts: Vec<Vec<f64>> = groups
        .iter()
        .map(|(_, v)| {
            let mut c = vec![0.0; bins];
            let n = v.iter().filter(|x| x.is_finite()).count().max(1) as f64;
            for &x in v.iter().filter(|x| x.is_finite()) {
                let b = (((x - lo) / width) as usize).min(bins - 1);
                c[b] += 1.0 / n;
            }
            c
        })
        .collect();
    let top = counts.iter().flatten().copied().fold(0.0, f64::max).max(1e-12) * 1.1;
    let root = SVGBackend::new(path, (900, 540)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(70)
        .build_cartesian_2d(lo..hi, 0.0..top)?;
    chart.configure_mesh().x_desc("weight").y_desc("fraction of steps").draw()?;
    for (k, ((name, _), c)) in groups.iter().zip(&counts).enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        chart
            .draw_series(c.iter().enumerate().map(|(b, &h)| {
                let x0 = lo + b as f64 * width;
                Rectangle::new([(x0, 0.0), (x0 + width, h)], color.mix(0.45).filled())
            }))?
            .label(*name)
            .legend(move |(a, b)| Rectangle::new([(a, b - 5), (a + 15, b + 5)], color.mix(0.45).filled()));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()?;
    root.present()?;
    Ok(())
}

/// Learning curves, and when present weight trajectories, weight histograms
/// and Taylor residuals. Returns the files written.
pub fn render_run(input: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out)?;
    let mut written = Vec::new();

    let metrics = Table::read(&input.join("metrics.csv"))?;
    let steps = metrics.col("step")?.to_vec();
    let mut series = Vec::new();
    for h in metrics.order.iter().filter(|h| *h != "step") {
        series.push((h.clone(), metrics.col(h)?.to_vec()));
    }
    let p = out.join("learning_curves.svg");
    line_chart(&p, "Learning curves", &steps, &series, "loss")?;
    written.push(p);

    let weights_path = input.join("weights.csv");
    if weights_path.exists() {
        let w = Table::read(&weights_path)?;
        let (step, task) = (w.col("step")?, w.col("task")?);
        let n_tasks = task.iter().fold(0.0f64, |a, &b| a.max(b)) as usize + 1;
        let pick = |col: &str, t: usize| -> Result<Vec<f64>> {
            Ok(w.col(col)?
                .iter()
                .zip(task)
                .filter(|(_, &k)| k as usize == t)
                .map(|(v, _)| *v)
                .collect())
        };
        let x: Vec<f64> = step.iter().zip(task).filter(|(_, &k)| k == 0.0).map(|(s, _)| *s).collect();

        let totals: Vec<(String, Vec<f64>)> = (0..n_tasks)
            .map(|t| Ok((format!("task {t} total"), pick("total", t)?)))
            .collect::<Result<_>>()?;
        let p = out.join("task_weights.svg");
        line_chart(&p, "Total weight per task", &x, &totals, "weight")?;
        written.push(p);

        for t in 0..n_tasks {
            let clean = pick("mean_clean", t)?;
            let flagged = pick("mean_flagged", t)?;
            let p = out.join(format!("weights_task{t}.svg"));
            line_chart(
                &p,
                &format!("Mean sample weight, task {t}"),
                &x,
                &[("clean".into(), clean.clone()), ("noisy".into(), flagged.clone())],
                "weight",
            )?;
            written.push(p);
            let p = out.join(format!("weight_hist_task{t}.svg"));
            histogram(
                &p,
                &format!("Per-step mean sample weight, task {t}"),
                &[("clean", clean), ("noisy", flagged)],
                30,
            )?;
            written.push(p);
        }
    }

    let taylor_path = input.join("taylor.csv");
    if taylor_path.exists() {
        let t = Table::read(&taylor_path)?;
        let p = out.join("taylor.svg");
        line_chart(
            &p,
            "Meta-objective change per step",
            t.col("step")?,
            &[
                ("exact".into(), t.col("exact")?.to_vec()),
                ("first order".into(), t.col("approx")?.to_vec()),
                ("residual".into(), t.col("residual")?.to_vec()),
            ],
            "change",
        )?;
        written.push(p);
    }
    Ok(written)
}
