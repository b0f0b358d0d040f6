//! Aggregation of finished runs into summary tables and SVG charts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use salguide_core::domains::{SOURCE_DOMAIN, TARGET_DOMAINS};

use crate::error::{HarnessError, Result};
use crate::metrics::MetricsRow;
use crate::run::RunRecord;

pub const LAST_EPOCHS: usize = 4;

/// Mean accuracy over the last `k` epochs for which `domain` has rows.
/// Returns (mean, epochs used); `None` when the domain never appears.
pub fn last_epochs_mean(rows: &[MetricsRow], domain: &str, k: usize) -> Option<(f64, usize)> {
    let mut by_epoch: Vec<(usize, f64)> = rows
        .iter()
        .filter(|r| r.domain == domain)
        .map(|r| (r.epoch, r.accuracy))
        .collect();
    if by_epoch.is_empty() {
        return None;
    }
    by_epoch.sort_by_key(|&(e, _)| e);
    let tail = &by_epoch[by_epoch.len().saturating_sub(k)..];
    Some((tail.iter().map(|&(_, a)| a).sum::<f64>() / tail.len() as f64, tail.len()))
}

/// Bar height and whiskers across seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct BarStat {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub seeds: usize,
    /// Fewest epochs any seed contributed.
    pub epochs_used: usize,
}

impl BarStat {
    pub fn short(&self) -> bool {
        self.epochs_used < LAST_EPOCHS
    }
}

/// Mean of per-seed last-epoch means, with min/max of those means.
pub fn bar_stat(runs: &[&RunRecord], domain: &str, k: usize) -> Option<BarStat> {
    let per_seed: Vec<(f64, usize)> = runs.iter().filter_map(|r| last_epochs_mean(&r.rows, domain, k)).collect();
    if per_seed.is_empty() {
        return None;
    }
    let means: Vec<f64> = per_seed.iter().map(|p| p.0).collect();
    Some(BarStat {
        mean: means.iter().sum::<f64>() / means.len() as f64,
        min: means.iter().cloned().fold(f64::INFINITY, f64::min),
        max: means.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        seeds: means.len(),
        epochs_used: per_seed.iter().map(|p| p.1).min().unwrap_or(0),
    })
}

/// Runs grouped into series: the mode alone for the most common
/// (block, freq) setting, otherwise `mode_b<block>_f<freq>`.
pub fn group_series(runs: &[RunRecord]) -> BTreeMap<String, Vec<&RunRecord>> {
    let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for r in runs {
        *counts.entry((r.xai_block, r.freq)).or_default() += 1;
    }
    let common = counts.iter().max_by_key(|(_, &c)| c).map(|(&k, _)| k);
    let mut out: BTreeMap<String, Vec<&RunRecord>> = BTreeMap::new();
    for r in runs {
        let label = if Some((r.xai_block, r.freq)) == common || !r.mode.uses_xai() {
            r.mode.to_string()
        } else {
            format!("{}_b{}_f{}", r.mode, r.xai_block, r.freq)
        };
        out.entry(label).or_default().push(r);
    }
    out
}

/// Source hit rate per epoch averaged over a series' seeds.
pub fn hit_curve(runs: &[&RunRecord]) -> Vec<(usize, f64)> {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in runs {
        for row in r.rows.iter().filter(|x| x.domain == SOURCE_DOMAIN) {
            let e = acc.entry(row.epoch).or_default();
            e.0 += row.hit_rate();
            e.1 += 1;
        }
    }
    acc.into_iter().map(|(ep, (s, n))| (ep, s / n as f64)).collect()
}

pub const SUMMARY_HEADER: &str = "series,domain,seeds,epochs_used,mean_accuracy,min_accuracy,max_accuracy,note";

pub fn summary_csv(series: &BTreeMap<String, Vec<&RunRecord>>) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    let domains: Vec<&str> = std::iter::once(SOURCE_DOMAIN).chain(TARGET_DOMAINS).collect();
    for (label, runs) in series {
        for d in &domains {
            if let Some(s) = bar_stat(runs, d, LAST_EPOCHS) {
                let note = if s.short() { "fewer_than_4_epochs" } else { "" };
                let _ = writeln!(
                    out,
                    "{label},{d},{},{},{:.6},{:.6},{:.6},{note}",
                    s.seeds, s.epochs_used, s.mean, s.min, s.max
                );
            }
        }
    }
    out
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

fn svg_open(w: f64, h: f64, title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" viewBox=\"0 0 {w:.0} {h:.0}\" font-family=\"sans-serif\" font-size=\"12\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n<text x=\"{:.1}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        w / 2.0,
        escape(title)
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Frame {
    left: f64,
    top: f64,
    width: f64,
    height: f64,
}

impl Frame {
    fn y(&self, v: f64) -> f64 {
        self.top + self.height * (1.0 - v.clamp(0.0, 1.0))
    }

    fn axes(&self, out: &mut String, y_label: &str) {
        let (l, t, w, h) = (self.left, self.top, self.width, self.height);
        let _ = writeln!(out, "<line x1=\"{l:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>", t + h, l + w, t + h);
        let _ = writeln!(out, "<line x1=\"{l:.1}\" y1=\"{t:.1}\" x2=\"{l:.1}\" y2=\"{:.1}\" stroke=\"black\"/>", t + h);
        for i in 0..=5 {
            let v = i as f64 / 5.0;
            let y = self.y(v);
            let _ = writeln!(out, "<line x1=\"{:.1}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#ddd\"/>", l, l + w);
            let _ = writeln!(out, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{:.1}</text>", l - 4.0, y + 4.0, v);
        }
        let _ = writeln!(
            out,
            "<text x=\"14\" y=\"{:.1}\" transform=\"rotate(-90 14 {:.1})\" text-anchor=\"middle\">{}</text>",
            t + h / 2.0,
            t + h / 2.0,
            escape(y_label)
        );
    }
}

fn legend(out: &mut String, labels: &[&String], x: f64, y: f64) {
    for (i, label) in labels.iter().enumerate() {
        let yy = y + 16.0 * i as f64;
        let _ = writeln!(out, "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{}\"/>", yy - 9.0, PALETTE[i % PALETTE.len()]);
        let _ = writeln!(out, "<text x=\"{:.1}\" y=\"{yy:.1}\">{}</text>", x + 14.0, escape(label));
    }
}

/// Pointing-game hit rate per epoch, one line per series.
pub fn hits_svg(series: &BTreeMap<String, Vec<&RunRecord>>) -> String {
    let frame = Frame { left: 60.0, top: 40.0, width: 520.0, height: 300.0 };
    let mut out = svg_open(760.0, 390.0, "Source pointing-game hit rate");
    frame.axes(&mut out, "hit rate");
    let curves: Vec<(&String, Vec<(usize, f64)>)> = series.iter().map(|(k, v)| (k, hit_curve(v))).collect();
    let max_epoch = curves.iter().flat_map(|(_, c)| c.iter().map(|p| p.0)).max().unwrap_or(1).max(1);
    let x = |e: usize| frame.left + frame.width * (e as f64 - 1.0).max(0.0) / (max_epoch as f64 - 1.0).max(1.0);
    for (i, (_, curve)) in curves.iter().enumerate() {
        let pts: Vec<String> = curve.iter().map(|&(e, v)| format!("{:.1},{:.1}", x(e), frame.y(v))).collect();
        let _ = writeln!(
            out,
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"2\" points=\"{}\"/>",
            PALETTE[i % PALETTE.len()],
            pts.join(" ")
        );
    }
    let ticks = [1, max_epoch / 4, max_epoch / 2, 3 * max_epoch / 4, max_epoch];
    let mut seen = Vec::new();
    for t in ticks.into_iter().filter(|&t| t >= 1) {
        if seen.contains(&t) {
            continue;
        }
        seen.push(t);
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{t}</text>",
            x(t),
            frame.top + frame.height + 16.0
        );
    }
    let _ = writeln!(
        out,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">epoch</text>",
        frame.left + frame.width / 2.0,
        frame.top + frame.height + 34.0
    );
    let labels: Vec<&String> = curves.iter().map(|c| c.0).collect();
    legend(&mut out, &labels, frame.left + frame.width + 20.0, frame.top + 10.0);
    out.push_str("</svg>\n");
    out
}

/// Grouped bars of last-epoch mean target accuracy with min/max whiskers.
pub fn accuracy_svg(series: &BTreeMap<String, Vec<&RunRecord>>) -> String {
    let domains: Vec<&str> = TARGET_DOMAINS.to_vec();
    let labels: Vec<&String> = series.keys().collect();
    let group_w = 110.0;
    let frame = Frame {
        left: 60.0,
        top: 40.0,
        width: group_w * domains.len() as f64,
        height: 300.0,
    };
    let mut out = svg_open(frame.width + 240.0, 390.0, "Target accuracy (mean of last epochs over seeds)");
    frame.axes(&mut out, "accuracy");
    let bar_w = (group_w - 20.0) / labels.len().max(1) as f64;
    for (di, d) in domains.iter().enumerate() {
        let gx = frame.left + group_w * di as f64 + 10.0;
        for (si, runs) in series.values().enumerate() {
            let Some(s) = bar_stat(runs, d, LAST_EPOCHS) else { continue };
            let x = gx + bar_w * si as f64;
            let y = frame.y(s.mean);
            let _ = writeln!(
                out,
                "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"{}\"/>",
                bar_w - 2.0,
                frame.top + frame.height - y,
                PALETTE[si % PALETTE.len()]
            );
            let cx = x + (bar_w - 2.0) / 2.0;
            let (y0, y1) = (frame.y(s.min), frame.y(s.max));
            let _ = writeln!(out, "<line x1=\"{cx:.1}\" y1=\"{y0:.1}\" x2=\"{cx:.1}\" y2=\"{y1:.1}\" stroke=\"black\"/>");
            for yy in [y0, y1] {
                let _ = writeln!(
                    out,
                    "<line x1=\"{:.1}\" y1=\"{yy:.1}\" x2=\"{:.1}\" y2=\"{yy:.1}\" stroke=\"black\"/>",
                    cx - 3.0,
                    cx + 3.0
                );
            }
        }
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{d}</text>",
            gx + (group_w - 20.0) / 2.0,
            frame.top + frame.height + 16.0
        );
    }
    legend(&mut out, &labels, frame.left + frame.width + 20.0, frame.top + 10.0);
    out.push_str("</svg>\n");
    out
}

/// Writes `summary.csv`, `hits.svg` and `accuracy.svg` into `out`.
pub fn write_report(runs: &[RunRecord], out: &Path) -> Result<()> {
    if runs.is_empty() {
        return Err(HarnessError::Usage("no completed runs found".into()));
    }
    fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
    let series = group_series(runs);
    for (name, text) in [
        ("summary.csv", summary_csv(&series)),
        ("hits.svg", hits_svg(&series)),
        ("accuracy.svg", accuracy_svg(&series)),
    ] {
        let p = out.join(name);
        fs::write(&p, text).map_err(|e| HarnessError::io(&p, e))?;
    }
    Ok(())
}
