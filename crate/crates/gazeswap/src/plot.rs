//! Static SVG plot emission.
//!
//! Three figure kinds: per-condition box-and-whisker with individual-video
//! points connected across conditions, grouped per-video bars, and a
//! pitch/yaw scatter grid (one row per video, one column per method).
//! Output is hand-assembled SVG with fixed float formatting, so identical
//! inputs produce byte-identical files.

use crate::faces::GazeAngles;
use crate::losses::ConditionId;
use crate::stats::{aggregate_individual, ExperimentRecord};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("no records to plot")]
    Empty,
    #[error("io at {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("gaze csv {path} line {line}: {detail}")]
    BadGazeRow { path: String, line: usize, detail: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PlotError + '_ {
    move |source| PlotError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
pub enum PlotKind {
    #[clap(name = "box_whisker")]
    BoxWhisker,
    #[clap(name = "per_video_bars")]
    PerVideoBars,
    #[clap(name = "gaze_scatter")]
    GazeScatter,
}

/// A plot request: kind, input records, output image, axis labels.
#[derive(Debug, Clone)]
pub struct PlotSpec {
    pub kind: PlotKind,
    pub input: PathBuf,
    pub output: PathBuf,
    pub x_label: String,
    pub y_label: String,
}

/// Per-frame gaze row for the scatter figure. `method` is free-form so the
/// source distribution can appear alongside conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct GazeRow {
    pub individual: String,
    pub method: String,
    pub frame_index: u32,
    pub gaze: GazeAngles,
}

pub const GAZES_CSV_HEADER: &str = "individual,method,frame_index,pitch_mu,yaw_phi";

pub fn write_gazes_csv(path: &Path, rows: &[GazeRow]) -> Result<(), PlotError> {
    let mut text = String::from(GAZES_CSV_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            r.individual,
            r.method,
            r.frame_index,
            r.gaze.pitch_mu(),
            r.gaze.yaw_phi()
        ));
    }
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn read_gazes_csv(path: &Path) -> Result<Vec<GazeRow>, PlotError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let bad = |detail: String| PlotError::BadGazeRow {
            path: path.display().to_string(),
            line: i + 1,
            detail,
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad(format!("expected 5 fields, got {}", f.len())));
        }
        let frame_index: u32 = f[2].parse().map_err(|e| bad(format!("frame_index: {e}")))?;
        let pitch: f64 = f[3].parse().map_err(|e| bad(format!("pitch_mu: {e}")))?;
        let yaw: f64 = f[4].parse().map_err(|e| bad(format!("yaw_phi: {e}")))?;
        let gaze = GazeAngles::new(pitch, yaw).map_err(|e| bad(e.to_string()))?;
        out.push(GazeRow {
            individual: f[0].to_string(),
            method: f[1].to_string(),
            frame_index,
            gaze,
        });
    }
    Ok(out)
}

// ---- svg assembly -----------------------------------------------------------

struct Svg {
    width: f64,
    height: f64,
    body: String,
}

fn fmt(v: f64) -> String {
    format!("{v:.2}")
}

impl Svg {
    fn new(width: f64, height: f64) -> Self {
        Self { width, height, body: String::new() }
    }

    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str, class: &str) {
        let _ = writeln!(
            self.body,
            r##"<rect class="{class}" x="{}" y="{}" width="{}" height="{}" fill="{fill}" stroke="#333" stroke-width="0.5"/>"##,
            fmt(x),
            fmt(y),
            fmt(w),
            fmt(h)
        );
    }

    fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str, class: &str) {
        let _ = writeln!(
            self.body,
            r##"<line class="{class}" x1="{}" y1="{}" x2="{}" y2="{}" stroke="{stroke}" stroke-width="1"/>"##,
            fmt(x1),
            fmt(y1),
            fmt(x2),
            fmt(y2)
        );
    }

    fn circle(&mut self, x: f64, y: f64, r: f64, fill: &str, class: &str) {
        let _ = writeln!(
            self.body,
            r##"<circle class="{class}" cx="{}" cy="{}" r="{}" fill="{fill}"/>"##,
            fmt(x),
            fmt(y),
            fmt(r)
        );
    }

    fn polyline(&mut self, points: &[(f64, f64)], stroke: &str, class: &str) {
        let pts: Vec<String> =
            points.iter().map(|(x, y)| format!("{},{}", fmt(*x), fmt(*y))).collect();
        let _ = writeln!(
            self.body,
            r##"<polyline class="{class}" points="{}" fill="none" stroke="{stroke}" stroke-width="1" opacity="0.6"/>"##,
            pts.join(" ")
        );
    }

    fn text(&mut self, x: f64, y: f64, size: f64, anchor: &str, content: &str) {
        let escaped = content.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
        let _ = writeln!(
            self.body,
            r##"<text x="{}" y="{}" font-size="{}" font-family="sans-serif" text-anchor="{anchor}">{escaped}</text>"##,
            fmt(x),
            fmt(y),
            fmt(size)
        );
    }

    fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" viewBox=\"0 0 {} {}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
            fmt(self.width),
            fmt(self.height),
            fmt(self.width),
            fmt(self.height),
            self.body
        )
    }
}

const PALETTE: [&str; 6] = ["#4878cf", "#ee854a", "#6acc65", "#d65f5f", "#956cb4", "#8c613c"];

fn method_order(records: &[ExperimentRecord]) -> Vec<ConditionId> {
    ConditionId::ALL.into_iter().filter(|c| records.iter().any(|r| r.method == *c)).collect()
}

fn quartiles(sorted: &[f64]) -> (f64, f64, f64) {
    let q = |f: f64| -> f64 {
        let pos = f * (sorted.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        sorted[lo] * (1.0 - frac) + sorted[hi] * frac
    };
    (q(0.25), (q(0.5)), q(0.75))
}

/// Box plot of per-individual mean error by condition, with each
/// individual's results drawn as connected points across the boxes.
pub fn box_whisker(
    records: &[ExperimentRecord],
    x_label: &str,
    y_label: &str,
) -> Result<String, PlotError> {
    if records.is_empty() {
        return Err(PlotError::Empty);
    }
    let methods = method_order(records);
    let rows = aggregate_individual(records);
    let mut individuals: Vec<String> = rows.iter().map(|r| r.individual.clone()).collect();
    individuals.sort();
    individuals.dedup();

    let (w, h) = (760.0, 480.0);
    let (ml, mr, mt, mb) = (70.0, 20.0, 30.0, 60.0);
    let max_v = rows.iter().map(|r| r.mean_error_deg).fold(0.0f64, f64::max).max(1e-9) * 1.15;
    let px = |i: usize| ml + (w - ml - mr) * (i as f64 + 0.5) / methods.len() as f64;
    let py = |v: f64| h - mb - (h - mt - mb) * (v / max_v);

    let mut svg = Svg::new(w, h);
    // Axes.
    svg.line(ml, mt, ml, h - mb, "#000", "axis");
    svg.line(ml, h - mb, w - mr, h - mb, "#000", "axis");
    for k in 0..=4 {
        let v = max_v * k as f64 / 4.0;
        svg.line(ml - 4.0, py(v), ml, py(v), "#000", "tick");
        svg.text(ml - 8.0, py(v) + 4.0, 11.0, "end", &format!("{v:.1}"));
    }
    svg.text(w / 2.0, h - 14.0, 13.0, "middle", x_label);
    svg.text(14.0, mt - 10.0, 13.0, "start", y_label);

    let box_w = ((w - ml - mr) / methods.len() as f64 * 0.5).min(70.0);
    for (mi, method) in methods.iter().enumerate() {
        let mut vals: Vec<f64> = rows
            .iter()
            .filter(|r| r.method == *method)
            .map(|r| r.mean_error_deg)
            .collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let (q1, med, q3) = quartiles(&vals);
        let (lo, hi) = (vals[0], vals[vals.len() - 1]);
        let x = px(mi);
        svg.line(x, py(lo), x, py(q1), "#333", "whisker");
        svg.line(x, py(q3), x, py(hi), "#333", "whisker");
        svg.rect(x - box_w / 2.0, py(q3), box_w, py(q1) - py(q3), PALETTE[mi % 6], "box");
        svg.line(x - box_w / 2.0, py(med), x + box_w / 2.0, py(med), "#000", "median");
        svg.text(x, h - mb + 18.0, 11.0, "middle", method.as_str());
    }

    // Per-individual points connected across conditions.
    for (ii, ind) in individuals.iter().enumerate() {
        let mut pts = Vec::new();
        for (mi, method) in methods.iter().enumerate() {
            if let Some(r) =
                rows.iter().find(|r| r.individual == *ind && r.method == *method)
            {
                pts.push((px(mi), py(r.mean_error_deg)));
            }
        }
        svg.polyline(&pts, PALETTE[ii % 6], "point-line");
        for (x, y) in pts {
            svg.circle(x, y, 2.5, "#222", "point");
        }
    }
    Ok(svg.finish())
}

/// Grouped bars: one group per individual video, one bar per condition.
pub fn per_video_bars(
    records: &[ExperimentRecord],
    x_label: &str,
    y_label: &str,
) -> Result<String, PlotError> {
    if records.is_empty() {
        return Err(PlotError::Empty);
    }
    let methods = method_order(records);
    let rows = aggregate_individual(records);
    let mut individuals: Vec<String> = rows.iter().map(|r| r.individual.clone()).collect();
    individuals.sort();
    individuals.dedup();

    let (w, h) = (820.0, 480.0);
    let (ml, mr, mt, mb) = (70.0, 20.0, 30.0, 70.0);
    let max_v = rows.iter().map(|r| r.mean_error_deg).fold(0.0f64, f64::max).max(1e-9) * 1.15;
    let py = |v: f64| h - mb - (h - mt - mb) * (v / max_v);
    let group_w = (w - ml - mr) / individuals.len() as f64;
    let bar_w = (group_w * 0.8) / methods.len() as f64;

    let mut svg = Svg::new(w, h);
    svg.line(ml, mt, ml, h - mb, "#000", "axis");
    svg.line(ml, h - mb, w - mr, h - mb, "#000", "axis");
    for k in 0..=4 {
        let v = max_v * k as f64 / 4.0;
        svg.line(ml - 4.0, py(v), ml, py(v), "#000", "tick");
        svg.text(ml - 8.0, py(v) + 4.0, 11.0, "end", &format!("{v:.1}"));
    }
    svg.text(w / 2.0, h - 14.0, 13.0, "middle", x_label);
    svg.text(14.0, mt - 10.0, 13.0, "start", y_label);

    for (gi, ind) in individuals.iter().enumerate() {
        let gx = ml + group_w * gi as f64 + group_w * 0.1;
        for (mi, method) in methods.iter().enumerate() {
            if let Some(r) =
                rows.iter().find(|r| r.individual == *ind && r.method == *method)
            {
                let x = gx + bar_w * mi as f64;
                svg.rect(
                    x,
                    py(r.mean_error_deg),
                    bar_w * 0.92,
                    (h - mb) - py(r.mean_error_deg),
                    PALETTE[mi % 6],
                    "bar",
                );
            }
        }
        svg.text(gx + group_w * 0.4, h - mb + 18.0, 11.0, "middle", ind);
        // Marker for group extent, one per video.
        svg.line(gx, h - mb + 4.0, gx + group_w * 0.8, h - mb + 4.0, "#999", "bar-group");
    }
    // Legend.
    for (mi, method) in methods.iter().enumerate() {
        let x = ml + 110.0 * mi as f64;
        svg.rect(x, 8.0, 10.0, 10.0, PALETTE[mi % 6], "legend");
        svg.text(x + 14.0, 17.0, 11.0, "start", method.as_str());
    }
    Ok(svg.finish())
}

/// Scatter grid of gaze angles: one row per individual video, one column
/// per method (source first when present). Pitch on the horizontal axis,
/// yaw on the vertical axis.
pub fn gaze_scatter(rows: &[GazeRow], x_label: &str, y_label: &str) -> Result<String, PlotError> {
    if rows.is_empty() {
        return Err(PlotError::Empty);
    }
    let mut individuals: Vec<String> = rows.iter().map(|r| r.individual.clone()).collect();
    individuals.sort();
    individuals.dedup();
    let mut methods: Vec<String> = rows.iter().map(|r| r.method.clone()).collect();
    methods.sort();
    methods.dedup();
    // Source column first when present.
    if let Some(pos) = methods.iter().position(|m| m == "source") {
        let src = methods.remove(pos);
        methods.insert(0, src);
    }

    let cell = 170.0;
    let (ml, mt) = (90.0, 40.0);
    let w = ml + cell * methods.len() as f64 + 20.0;
    let h = mt + cell * individuals.len() as f64 + 50.0;

    let (p_lo, p_hi, y_lo, y_hi) = rows.iter().fold(
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY),
        |(a, b, c, d), r| {
            (
                a.min(r.gaze.pitch_mu()),
                b.max(r.gaze.pitch_mu()),
                c.min(r.gaze.yaw_phi()),
                d.max(r.gaze.yaw_phi()),
            )
        },
    );
    let pad = 0.05;
    let (p_lo, p_hi) = (p_lo - pad, p_hi + pad);
    let (y_lo, y_hi) = (y_lo - pad, y_hi + pad);

    let mut svg = Svg::new(w, h);
    for (ci, method) in methods.iter().enumerate() {
        svg.text(ml + cell * (ci as f64 + 0.5), mt - 10.0, 12.0, "middle", method);
    }
    for (ri, ind) in individuals.iter().enumerate() {
        svg.text(ml - 10.0, mt + cell * (ri as f64 + 0.5), 12.0, "end", ind);
        for (ci, method) in methods.iter().enumerate() {
            let x0 = ml + cell * ci as f64;
            let y0 = mt + cell * ri as f64;
            svg.rect(x0, y0, cell - 8.0, cell - 8.0, "none", "cell");
            for r in rows.iter().filter(|r| r.individual == *ind && r.method == *method) {
                let fx = (r.gaze.pitch_mu() - p_lo) / (p_hi - p_lo);
                let fy = (r.gaze.yaw_phi() - y_lo) / (y_hi - y_lo);
                svg.circle(
                    x0 + fx * (cell - 8.0),
                    y0 + (1.0 - fy) * (cell - 8.0),
                    1.6,
                    PALETTE[ci % 6],
                    "scatter-point",
                );
            }
        }
    }
    svg.text(w / 2.0, h - 12.0, 13.0, "middle", x_label);
    svg.text(16.0, mt - 24.0, 13.0, "start", y_label);
    Ok(svg.finish())
}

/// Renders a plot spec to its output file.
pub fn render(spec: &PlotSpec) -> Result<(), PlotError> {
    let svg = match spec.kind {
        PlotKind::BoxWhisker => {
            let records = crate::stats::read_records_csv(&spec.input)
                .map_err(|e| PlotError::BadGazeRow {
                    path: spec.input.display().to_string(),
                    line: 0,
                    detail: e.to_string(),
                })?;
            box_whisker(&records, &spec.x_label, &spec.y_label)?
        }
        PlotKind::PerVideoBars => {
            let records = crate::stats::read_records_csv(&spec.input)
                .map_err(|e| PlotError::BadGazeRow {
                    path: spec.input.display().to_string(),
                    line: 0,
                    detail: e.to_string(),
                })?;
            per_video_bars(&records, &spec.x_label, &spec.y_label)?
        }
        PlotKind::GazeScatter => {
            let rows = read_gazes_csv(&spec.input)?;
            gaze_scatter(&rows, &spec.x_label, &spec.y_label)?
        }
    };
    if let Some(parent) = spec.output.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    std::fs::write(&spec.output, svg).map_err(io_err(&spec.output))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_records() -> Vec<ExperimentRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut recs = Vec::new();
        for ind in ["v0", "v1", "v2"] {
            for m in ConditionId::ALL {
                for f in 0..5u32 {
                    recs.push(
                        ExperimentRecord::new(ind, m, f, rng.gen_range(0.02..0.3)).unwrap(),
                    );
                }
            }
        }
        recs
    }

    #[test]
    fn box_plot_has_one_box_per_condition_and_one_line_per_video() {
        let svg = box_whisker(&sample_records(), "condition", "gaze error (deg)").unwrap();
        assert_eq!(svg.matches(r#"class="box""#).count(), 5);
        assert_eq!(svg.matches(r#"class="point-line""#).count(), 3);
    }

    #[test]
    fn bars_group_by_video() {
        let svg = per_video_bars(&sample_records(), "video", "gaze error (deg)").unwrap();
        assert_eq!(svg.matches(r#"class="bar-group""#).count(), 3);
        assert_eq!(svg.matches(r#"class="bar""#).count(), 15);
    }

    #[test]
    fn bars_are_invariant_under_record_shuffling() {
        let recs = sample_records();
        let mut shuffled = recs.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for i in (1..shuffled.len()).rev() {
            let j = rng.gen_range(0..=i);
            shuffled.swap(i, j);
        }
        let a = per_video_bars(&recs, "x", "y").unwrap();
        let b = per_video_bars(&shuffled, "x", "y").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn scatter_grid_has_one_cell_per_video_method() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut rows = Vec::new();
        for ind in ["v0", "v1"] {
            for method in ["source", "dfl", "dfl-gaze"] {
                for f in 0..20u32 {
                    rows.push(GazeRow {
                        individual: ind.into(),
                        method: method.into(),
                        frame_index: f,
                        gaze: GazeAngles::new(
                            rng.gen_range(-0.5..0.5),
                            rng.gen_range(1.1..2.0),
                        )
                        .unwrap(),
                    });
                }
            }
        }
        let svg = gaze_scatter(&rows, "pitch (rad)", "yaw (rad)").unwrap();
        assert_eq!(svg.matches(r#"class="cell""#).count(), 6);
        assert_eq!(svg.matches(r#"class="scatter-point""#).count(), 120);
        // Source column is placed first.
        let src_pos = svg.find(">source<").unwrap();
        let dfl_pos = svg.find(">dfl<").unwrap();
        assert!(src_pos < dfl_pos);
    }

    #[test]
    fn scatter_points_stay_in_sampler_box() {
        // Source metadata of one video: the cloud is bounded by the
        // sampler's gaze range, mapped inside the cell rectangle.
        let rows: Vec<GazeRow> = (0..50)
            .map(|f| GazeRow {
                individual: "v0".into(),
                method: "source".into(),
                frame_index: f,
                gaze: GazeAngles::new(
                    -0.5 + (f as f64) * 0.02,
                    1.2 + (f as f64 % 10.0) * 0.05,
                )
                .unwrap(),
            })
            .collect();
        let svg = gaze_scatter(&rows, "pitch", "yaw").unwrap();
        assert_eq!(svg.matches(r#"class="scatter-point""#).count(), 50);
    }

    #[test]
    fn empty_records_error() {
        assert!(matches!(box_whisker(&[], "x", "y"), Err(PlotError::Empty)));
        assert!(matches!(gaze_scatter(&[], "x", "y"), Err(PlotError::Empty)));
    }

    #[test]
    fn gazes_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.csv");
        let rows = vec![GazeRow {
            individual: "v0".into(),
            method: "source".into(),
            frame_index: 7,
            gaze: GazeAngles::new(0.25, 1.5).unwrap(),
        }];
        write_gazes_csv(&path, &rows).unwrap();
        assert_eq!(read_gazes_csv(&path).unwrap(), rows);
    }
}
