//! Aggregates results tables into a Markdown summary and SVG curves.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use plotters::prelude::*;

use crate::results::{read_results, ResultRow};

pub const SUMMARY_FILE: &str = "summary.md";

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

/// Per-seed differences `a - b` of one metric at one task.
#[derive(Clone, Debug, PartialEq)]
pub struct Paired {
    pub a: String,
    pub b: String,
    pub metric: String,
    pub diffs: Vec<(u64, f64)>,
}

impl Paired {
    pub fn wins(&self) -> usize {
        self.diffs.iter().filter(|(_, d)| *d > 0.0).count()
    }
}

type Key = (String, String, usize); // method, metric, task

fn values(rows: &[ResultRow]) -> BTreeMap<Key, BTreeMap<u64, f64>> {
    let mut out: BTreeMap<Key, BTreeMap<u64, f64>> = BTreeMap::new();
    for r in rows {
        out.entry((r.method.clone(), r.metric.clone(), r.task)).or_default().insert(r.seed, r.value);
    }
    out
}

/// Paired comparison of `metric` at its last task between two methods over shared seeds.
pub fn paired(rows: &[ResultRow], a: &str, b: &str, metric: &str) -> Option<Paired> {
    let vals = values(rows);
    let last = |m: &str| vals.keys().filter(|k| k.0 == m && k.1 == metric).map(|k| k.2).max();
    let (ta, tb) = (last(a)?, last(b)?);
    let va = &vals[&(a.to_string(), metric.to_string(), ta)];
    let vb = &vals[&(b.to_string(), metric.to_string(), tb)];
    let diffs: Vec<(u64, f64)> = va.iter().filter_map(|(s, x)| vb.get(s).map(|y| (*s, x - y))).collect();
    (!diffs.is_empty()).then(|| Paired { a: a.into(), b: b.into(), metric: metric.into(), diffs })
}

pub fn load_all(dirs: &[PathBuf]) -> Result<Vec<ResultRow>> {
    let mut rows = Vec::new();
    for d in dirs {
        rows.extend(read_results(d)?);
    }
    Ok(rows)
}

pub fn summary_markdown(rows: &[ResultRow], sources: &[String]) -> String {
    let vals = values(rows);
    let mut methods: Vec<String> = rows.iter().map(|r| r.method.clone()).collect();
    methods.sort();
    methods.dedup();
    let mut md = String::from("# Results summary\n\n");
    md.push_str("Sources:\n\n");
    for s in sources {
        let _ = writeln!(md, "- `{s}`");
    }

    md.push_str("\n## Final accuracy\n\n| method | seeds | mean | std |\n|---|---|---|---|\n");
    for m in &methods {
        if let Some(((_, _, _), v)) = vals.iter().filter(|(k, _)| &k.0 == m && k.1 == "final_accuracy").max_by_key(|(k, _)| k.2) {
            let xs: Vec<f64> = v.values().copied().collect();
            let (mean, std) = mean_std(&xs);
            let _ = writeln!(md, "| {m} | {} | {mean:.4} | {std:.4} |", xs.len());
        }
    }

    md.push_str("\n## Per-task metrics\n\n| method | metric | task | seeds | mean | std |\n|---|---|---|---|---|---|\n");
    for ((m, metric, task), v) in &vals {
        if metric == "final_accuracy" {
            continue;
        }
        let xs: Vec<f64> = v.values().copied().collect();
        let (mean, std) = mean_std(&xs);
        let _ = writeln!(md, "| {m} | {metric} | {task} | {} | {mean:.4} | {std:.4} |", xs.len());
    }

    let reference = if methods.iter().any(|m| m == "pocon") { "pocon" } else { methods.first().map(String::as_str).unwrap_or("") };
    let mut pairs = String::new();
    for other in methods.iter().filter(|m| m.as_str() != reference) {
        if let Some(p) = paired(rows, reference, other, "final_accuracy") {
            let d: Vec<f64> = p.diffs.iter().map(|x| x.1).collect();
            let (mean, std) = mean_std(&d);
            let _ = writeln!(pairs, "| {reference} - {other} | {} | {mean:+.4} | {std:.4} | {}/{} |", d.len(), p.wins(), d.len());
        }
    }
    if !pairs.is_empty() {
        md.push_str("\n## Paired final-accuracy differences\n\n| pair | seeds | mean | std | wins |\n|---|---|---|---|---|\n");
        md.push_str(&pairs);
    }
    md
}

/// Mean curve of `metric` over seeds for every method that reports it.
fn curves(rows: &[ResultRow], metric: &str) -> BTreeMap<String, Vec<(usize, f64)>> {
    let mut out: BTreeMap<String, Vec<(usize, f64)>> = BTreeMap::new();
    for ((m, met, task), v) in values(rows) {
        if met == metric {
            let xs: Vec<f64> = v.values().copied().collect();
            out.entry(m).or_default().push((task, mean_std(&xs).0));
        }
    }
    out
}

fn plot_curves(path: &Path, title: &str, data: &BTreeMap<String, Vec<(usize, f64)>>) -> Result<()> {
    let max_task = data.values().flatten().map(|p| p.0).max().unwrap_or(1).max(2);
    let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(1usize..max_task, 0f64..1f64)?;
    chart.configure_mesh().x_desc("task").y_desc("accuracy").draw()?;
    for (i, (method, pts)) in data.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))?
            .label(method.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        chart.draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled())))?;
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw()?;
    root.present()?;
    Ok(())
}

/// Writes `summary.md` and one SVG per curve metric into `out`; returns the written paths.
pub fn write_report(dirs: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    let rows = load_all(dirs)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let sources: Vec<String> = dirs.iter().map(|d| d.display().to_string()).collect();
    let summary = out.join(SUMMARY_FILE);
    std::fs::write(&summary, summary_markdown(&rows, &sources))?;
    let mut written = vec![summary];
    let mut metrics: Vec<String> = rows.iter().map(|r| r.metric.clone()).filter(|m| m != "final_accuracy").collect();
    metrics.sort();
    metrics.dedup();
    for metric in metrics {
        let data = curves(&rows, &metric);
        let path = out.join(format!("{metric}.svg"));
        plot_curves(&path, &metric, &data).with_context(|| format!("plotting {metric}"))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows() -> Vec<ResultRow> {
        let mut v = Vec::new();
        for seed in 0..3 {
            v.push(ResultRow::new("pocon", 2, seed, 2, "final_accuracy", 0.6 + 0.1 * seed as f64));
            v.push(ResultRow::new("ft", 2, seed, 2, "final_accuracy", 0.5));
            v.push(ResultRow::new("pocon", 2, seed, 1, "plasticity", 0.9));
        }
        v
    }

    #[test]
    fn mean_std_matches_hand_values() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert!((m - 2.5).abs() < 1e-12);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn paired_differences_follow_seeds() {
        let p = paired(&rows(), "pocon", "ft", "final_accuracy").unwrap();
        let d: Vec<f64> = p.diffs.iter().map(|x| x.1).collect();
        assert!(d.iter().zip([0.1, 0.2, 0.3]).all(|(a, b)| (a - b).abs() < 1e-12));
        assert_eq!(p.wins(), 3);
    }

    #[test]
    fn report_is_idempotent() {
        let run = tempfile::tempdir().unwrap();
        crate::results::write_results(run.path(), &crate::results::sorted(rows())).unwrap();
        let out = tempfile::tempdir().unwrap();
        let dirs = vec![run.path().to_path_buf()];
        let first: Vec<Vec<u8>> = write_report(&dirs, out.path()).unwrap().iter().map(|p| std::fs::read(p).unwrap()).collect();
        let second: Vec<Vec<u8>> = write_report(&dirs, out.path()).unwrap().iter().map(|p| std::fs::read(p).unwrap()).collect();
        assert_eq!(first, second);
        let md = String::from_utf8(first[0].clone()).unwrap();
        assert!(md.contains("| pocon - ft | 3 | +0.2000 |"), "{md}");
    }
}
