//! Figures and summary tables for a completed run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use cfsim_tensor::Tensor;
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalviz::artifacts::*;
use crate::evalviz::evaluate::Evaluation;
use crate::evalviz::metrics::PatternSource;
use crate::io::{ensure_dir, read_json, write_json, write_text};
use crate::synthdata::Group;
use crate::training::LossBreakdown;

pub const PANELS_PNG: &str = "panels.png";
pub const LOGITS_PNG: &str = "logit_shift.png";
pub const NCC_PNG: &str = "ncc_bars.png";
pub const GROUP_PNG: &str = "group_maps.png";
pub const LOSS_PNG: &str = "losses.png";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const SUMMARY_JSON: &str = "summary.json";

/// Files written by [`render_report`], relative to the figures directory.
pub const REPORT_FILES: [&str; 7] = [PANELS_PNG, LOGITS_PNG, NCC_PNG, GROUP_PNG, LOSS_PNG, SUMMARY_CSV, SUMMARY_JSON];

const PANEL_SUBJECTS: usize = 4;
const ZOOM: u32 = 4;
const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const GRAY: Rgb<u8> = Rgb([160, 160, 160]);
const BLACK: Rgb<u8> = Rgb([0, 0, 0]);
const BLUE: Rgb<u8> = Rgb([40, 90, 200]);
const RED: Rgb<u8> = Rgb([200, 50, 40]);
const PALETTE: [Rgb<u8>; 8] = [
    Rgb([200, 50, 40]),
    Rgb([40, 90, 200]),
    Rgb([30, 150, 60]),
    Rgb([220, 140, 20]),
    Rgb([130, 60, 170]),
    Rgb([20, 160, 170]),
    Rgb([120, 120, 120]),
    Rgb([180, 90, 140]),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub mean_ncc: f64,
    pub std_ncc: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulatorSummary {
    pub source: String,
    pub cycle_rmse: f64,
    pub cycle_rmse_over_iqr: f64,
    pub group_map_ncc: f64,
    pub spearman_remove: f64,
    pub spearman_inject: f64,
    pub mean_shift_inject: f64,
    pub mean_shift_remove: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub test_accuracy: f64,
    pub ncc: Vec<SummaryRow>,
    pub simulators: Vec<SimulatorSummary>,
}

impl Summary {
    pub fn from_evaluation(e: &Evaluation) -> Self {
        let mut ncc: Vec<SummaryRow> = e
            .simulators
            .iter()
            .map(|s| SummaryRow {
                method: s.source.tag().into(),
                mean_ncc: s.score.mean_ncc,
                std_ncc: s.score.std_ncc,
                count: s.score.count,
            })
            .collect();
        ncc.extend(e.baselines.iter().map(|b| SummaryRow {
            method: b.method.tag().into(),
            mean_ncc: b.mean_ncc,
            std_ncc: b.std_ncc,
            count: b.count,
        }));
        let simulators = e
            .simulators
            .iter()
            .map(|s| SimulatorSummary {
                source: s.source.tag().into(),
                cycle_rmse: s.cycle_rmse,
                cycle_rmse_over_iqr: s.cycle_rmse_over_iqr,
                group_map_ncc: s.group_map_ncc,
                spearman_remove: s.logits.spearman_remove,
                spearman_inject: s.logits.spearman_inject,
                mean_shift_inject: s.logits.mean_shift_inject,
                mean_shift_remove: s.logits.mean_shift_remove,
            })
            .collect();
        Self {
            test_accuracy: e.test_accuracy,
            ncc,
            simulators,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,mean_ncc,std_ncc,count\n");
        for r in &self.ncc {
            let _ = writeln!(s, "{},{},{},{}", r.method, r.mean_ncc, r.std_ncc, r.count);
        }
        s
    }
}

/// Reads a line-delimited JSON log.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|source| Error::Json {
                path: path.to_path_buf(),
                source,
            })
        })
        .collect()
}

/// Inputs [`render_report`] needs, relative to the run directory.
pub fn report_inputs() -> Vec<PathBuf> {
    let proposed = Path::new(PATTERNS_DIR).join(PatternSource::ProposedDirect.tag());
    vec![
        PathBuf::from(EVALUATION_FILE),
        PathBuf::from(SIMULATOR_LOG),
        proposed.join(PATTERN_INDEX),
        proposed.join(GROUP_AVERAGE),
        proposed.join(GROUP_TRUTH),
    ]
}

fn proposed_dir(run: &Path) -> Option<(PatternSource, PathBuf)> {
    [PatternSource::ProposedDirect, PatternSource::ProposedJacobian]
        .into_iter()
        .map(|m| (m, pattern_dir(run, m)))
        .find(|(_, d)| d.join(PATTERN_INDEX).exists())
}

/// Renders every figure and table into `run/figures` and returns the
/// written paths.
pub fn render_report(run: &Path) -> Result<Vec<PathBuf>> {
    let pdir = proposed_dir(run);
    let log_file = simulator_log(pdir.as_ref().map_or(PatternSource::ProposedDirect, |p| p.0));
    let mut missing = Vec::new();
    for p in [EVALUATION_FILE, log_file.as_str()] {
        if !run.join(p).is_file() {
            missing.push(p.to_string());
        }
    }
    match &pdir {
        Some((_, d)) => {
            for f in [GROUP_AVERAGE, GROUP_TRUTH] {
                if !d.join(f).is_file() {
                    missing.push(d.strip_prefix(run).unwrap_or(d).join(f).display().to_string());
                }
            }
        }
        None => {
            for p in report_inputs().iter().skip(2) {
                missing.push(p.display().to_string());
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingArtifacts(missing));
    }
    let (_, pdir) = pdir.expect("checked above");
    let eval: Evaluation = read_json(&run.join(EVALUATION_FILE))?;
    let log: Vec<LossBreakdown> = read_jsonl(&run.join(&log_file))?;
    let index = read_pattern_index(&pdir)?;

    let out = run.join(FIGURES_DIR);
    ensure_dir(&out)?;
    let mut written = Vec::new();
    let mut save = |img: RgbImage, name: &str| -> Result<()> {
        let path = out.join(name);
        img.save(&path)?;
        written.push(path);
        Ok(())
    };
    save(panels(&pdir, &index)?, PANELS_PNG)?;
    save(logit_plot(&eval), LOGITS_PNG)?;
    save(ncc_bars(&eval), NCC_PNG)?;
    let avg = read_map(&pdir.join(GROUP_AVERAGE), &index.shape)?;
    let truth = read_map(&pdir.join(GROUP_TRUTH), &index.shape)?;
    save(map_row(&[&avg, &truth]), GROUP_PNG)?;
    save(loss_plot(&log), LOSS_PNG)?;

    let summary = Summary::from_evaluation(&eval);
    write_text(&out.join(SUMMARY_CSV), &summary.to_csv())?;
    written.push(out.join(SUMMARY_CSV));
    write_json(&out.join(SUMMARY_JSON), &summary)?;
    written.push(out.join(SUMMARY_JSON));
    Ok(written)
}

/// Central slice along the first axis for volumes, the map itself in 2-d.
fn display_slice(map: &Tensor<f64>) -> Tensor<f64> {
    if map.ndim() == 3 {
        map.index_outer(map.shape()[0] / 2)
    } else {
        map.clone()
    }
}

fn diverging(v: f64, scale: f64) -> Rgb<u8> {
    let t = if scale > 0.0 { (v / scale).clamp(-1.0, 1.0) } else { 0.0 };
    let fade = |c: u8, t: f64| (255.0 - (255.0 - c as f64) * t.abs()) as u8;
    let target = if t >= 0.0 { RED } else { BLUE };
    Rgb([fade(target.0[0], t), fade(target.0[1], t), fade(target.0[2], t)])
}

fn grayscale(v: f64, lo: f64, hi: f64) -> Rgb<u8> {
    let t = if hi > lo { ((v - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.0 };
    let g = (t * 255.0) as u8;
    Rgb([g, g, g])
}

fn draw_map(img: &mut RgbImage, x0: u32, y0: u32, map: &Tensor<f64>, signed: bool) {
    let m = display_slice(map);
    let (h, w) = (m.shape()[0], m.shape()[1]);
    let scale = m.max_abs();
    let lo = m.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = m.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    for r in 0..h {
        for c in 0..w {
            let v = m.data()[r * w + c];
            let color = if signed { diverging(v, scale) } else { grayscale(v, lo, hi) };
            for dy in 0..ZOOM {
                for dx in 0..ZOOM {
                    img.put_pixel(x0 + c as u32 * ZOOM + dx, y0 + r as u32 * ZOOM + dy, color);
                }
            }
        }
    }
}

fn slice_dims(shape: &[usize]) -> (u32, u32) {
    let n = shape.len();
    (shape[n - 1] as u32 * ZOOM, shape[n - 2] as u32 * ZOOM)
}

fn map_row(maps: &[&Tensor<f64>]) -> RgbImage {
    let (w, h) = slice_dims(maps[0].shape());
    let pad = 4;
    let mut img = RgbImage::from_pixel(maps.len() as u32 * (w + pad) + pad, h + 2 * pad, WHITE);
    for (k, m) in maps.iter().enumerate() {
        draw_map(&mut img, pad + k as u32 * (w + pad), pad, m, true);
    }
    img
}

/// Rows of raw / simulated / pattern for a few subjects of each group.
fn panels(dir: &Path, index: &PatternIndex) -> Result<RgbImage> {
    let mut chosen = Vec::new();
    for group in [Group::Control, Group::Case] {
        chosen.extend(
            index
                .subjects
                .iter()
                .filter(|s| s.group == group)
                .take(PANEL_SUBJECTS / 2),
        );
    }
    let (w, h) = slice_dims(&index.shape);
    let pad = 4;
    let mut img = RgbImage::from_pixel(3 * (w + pad) + pad, chosen.len().max(1) as u32 * (h + pad) + pad, WHITE);
    for (row, s) in chosen.iter().enumerate() {
        let y = pad + row as u32 * (h + pad);
        let pattern = read_map(&dir.join(&s.pattern), &index.shape)?;
        if let Some(raw) = &s.raw {
            draw_map(&mut img, pad, y, &read_map(&dir.join(raw), &index.shape)?, false);
        }
        if let Some(sim) = &s.simulated {
            draw_map(&mut img, pad + w + pad, y, &read_map(&dir.join(sim), &index.shape)?, false);
        }
        draw_map(&mut img, pad + 2 * (w + pad), y, &pattern, true);
    }
    Ok(img)
}

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn fill_rect(img: &mut RgbImage, x0: u32, y0: u32, x1: u32, y1: u32, color: Rgb<u8>) {
    for y in y0.min(y1)..y0.max(y1) {
        for x in x0.min(x1)..x0.max(x1) {
            if x < img.width() && y < img.height() {
                img.put_pixel(x, y, color);
            }
        }
    }
}

struct Frame {
    w: u32,
    h: u32,
    margin: u32,
    lo: f64,
    hi: f64,
}

impl Frame {
    fn y(&self, v: f64) -> i64 {
        let t = if self.hi > self.lo { (v - self.lo) / (self.hi - self.lo) } else { 0.5 };
        (self.margin as f64 + (1.0 - t) * (self.h - 2 * self.margin) as f64).round() as i64
    }

    fn x(&self, t: f64) -> i64 {
        (self.margin as f64 + t * (self.w - 2 * self.margin) as f64).round() as i64
    }

    fn canvas(&self) -> RgbImage {
        let mut img = RgbImage::from_pixel(self.w, self.h, WHITE);
        let (l, r) = (self.margin as i64, (self.w - self.margin) as i64);
        let (t, b) = (self.margin as i64, (self.h - self.margin) as i64);
        draw_line(&mut img, (l, t), (l, b), BLACK);
        draw_line(&mut img, (l, b), (r, b), BLACK);
        if self.lo < 0.0 && self.hi > 0.0 {
            draw_line(&mut img, (l, self.y(0.0)), (r, self.y(0.0)), GRAY);
        }
        img
    }
}

fn bounds<'a>(values: impl Iterator<Item = &'a f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in values {
        if v.is_finite() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if lo > hi {
        (-1.0, 1.0)
    } else {
        (lo, hi)
    }
}

/// Raw and simulated logit per subject joined by a line, one panel per
/// simulator.
fn logit_plot(e: &Evaluation) -> RgbImage {
    let panel = 240;
    let mut img = RgbImage::from_pixel(panel * e.simulators.len().max(1) as u32, 320, WHITE);
    for (k, s) in e.simulators.iter().enumerate() {
        let l = &s.logits;
        let all = l.raw_x.iter().chain(&l.inject_x).chain(&l.raw_y).chain(&l.remove_y);
        let (lo, hi) = bounds(all);
        let frame = Frame {
            w: panel,
            h: 320,
            margin: 20,
            lo,
            hi,
        };
        let sub = frame.canvas();
        let pairs = [(&l.raw_x, &l.inject_x, BLUE), (&l.raw_y, &l.remove_y, RED)];
        let mut canvas = sub;
        for (raw, sim, color) in pairs {
            for (a, b) in raw.iter().zip(sim.iter()) {
                draw_line(&mut canvas, (frame.x(0.1), frame.y(*a)), (frame.x(0.9), frame.y(*b)), color);
            }
        }
        image::imageops::replace(&mut img, &canvas, (k as u32 * panel) as i64, 0);
    }
    img
}

/// Mean NCC per method as vertical bars around zero.
fn ncc_bars(e: &Evaluation) -> RgbImage {
    let table = e.ncc_table();
    let frame = Frame {
        w: 60 + 40 * table.len() as u32,
        h: 300,
        margin: 20,
        lo: -1.0,
        hi: 1.0,
    };
    let mut img = frame.canvas();
    let zero = frame.y(0.0) as u32;
    for (k, (_, v)) in table.iter().enumerate() {
        let x0 = frame.margin + 10 + 40 * k as u32;
        fill_rect(&mut img, x0, zero, x0 + 28, frame.y(*v) as u32, PALETTE[k % PALETTE.len()]);
    }
    img
}

/// Loss terms against optimization step.
fn loss_plot(log: &[LossBreakdown]) -> RgbImage {
    let series: [(fn(&LossBreakdown) -> f64, Rgb<u8>); 4] = [
        (|b| b.e_logit, BLUE),
        (|b| b.e_cycle, RED),
        (|b| b.e_phi, PALETTE[2]),
        (|b| b.e_total, BLACK),
    ];
    let values: Vec<f64> = log
        .iter()
        .flat_map(|b| series.iter().map(move |(f, _)| f(b)))
        .collect();
    let (lo, hi) = bounds(values.iter());
    let frame = Frame {
        w: 480,
        h: 300,
        margin: 20,
        lo,
        hi,
    };
    let mut img = frame.canvas();
    let n = log.len().max(2) - 1;
    for (f, color) in series {
        for (i, pair) in log.windows(2).enumerate() {
            let a = (frame.x(i as f64 / n as f64), frame.y(f(&pair[0])));
            let b = (frame.x((i + 1) as f64 / n as f64), frame.y(f(&pair[1])));
            draw_line(&mut img, a, b, color);
        }
    }
    img
}
