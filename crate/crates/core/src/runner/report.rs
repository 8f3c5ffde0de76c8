use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::eval::Segmenter;
use super::suite::ExperimentResult;
use crate::error::{Error, Result};
use crate::scenegen::{write_json_file, write_png_rgb8, VideoSample};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub name: String,
    pub seeds: Vec<u64>,
    pub fg_ari: f64,
    pub all_ari: f64,
    pub jaccard_fg: f64,
    pub jaccard_bg: f64,
    pub fg_ari_per_seed: Vec<f64>,
    pub all_ari_per_seed: Vec<f64>,
}

/// One qualitative example: the input frame next to two predictions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Triptych {
    pub sequence: usize,
    pub frame: usize,
    pub height: usize,
    pub width: usize,
    pub baseline_name: String,
    pub model_name: String,
    /// RGB8, row-major.
    pub input: Vec<u8>,
    pub baseline: Vec<u16>,
    pub model: Vec<u16>,
}

/// Everything `emit_report` needs, also written out as `report.json` so a
/// report can be regenerated from disk.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ReportBundle {
    pub results: Vec<ExperimentResult>,
    pub summary: Vec<SummaryRow>,
    pub previews: Vec<Triptych>,
}

impl ReportBundle {
    pub fn read(directory: impl AsRef<Path>) -> Result<Self> {
        crate::scenegen::read_json_file(&directory.as_ref().join("report.json"))
    }
}

/// Last frame of the first window of each of the first `count` sequences,
/// segmented by both predictors.
pub fn make_triptychs(
    data: &[VideoSample],
    baseline: (&str, &dyn Segmenter),
    model: (&str, &dyn Segmenter),
    count: usize,
    window: usize,
) -> Result<Vec<Triptych>> {
    data.iter()
        .take(count)
        .enumerate()
        .map(|(sequence, sample)| {
            let len = window.clamp(1, sample.num_frames);
            let frame = len - 1;
            let pick = |seg: &dyn Segmenter| -> Result<Vec<u16>> {
                seg.segment(sample, sequence, 0, len)?
                    .pop()
                    .ok_or_else(|| Error::Empty("segmenter returned no frames".into()))
            };
            Ok(Triptych {
                sequence,
                frame,
                height: sample.height,
                width: sample.width,
                baseline_name: baseline.0.to_string(),
                model_name: model.0.to_string(),
                input: sample.frame(frame).iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect(),
                baseline: pick(baseline.1)?,
                model: pick(model.1)?,
            })
        })
        .collect()
}

/// Colour for a segment label; label 0 is dark grey.
pub fn label_color(label: u16) -> [u8; 3] {
    const PALETTE: [[u8; 3]; 12] = [
        [230, 25, 75],
        [60, 180, 75],
        [255, 225, 25],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
        [240, 50, 230],
        [210, 245, 60],
        [250, 190, 212],
        [0, 128, 128],
        [170, 110, 40],
    ];
    if label == 0 {
        [40, 40, 40]
    } else {
        PALETTE[(label as usize - 1) % PALETTE.len()]
    }
}

fn triptych_pixels(t: &Triptych) -> Vec<u8> {
    let (h, w) = (t.height, t.width);
    let mut out = Vec::with_capacity(h * w * 9);
    for y in 0..h {
        out.extend_from_slice(&t.input[y * w * 3..(y + 1) * w * 3]);
        for labels in [&t.baseline, &t.model] {
            for x in 0..w {
                out.extend_from_slice(&label_color(labels[y * w + x]));
            }
        }
    }
    out
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `report.json`, `metrics.csv` (one row per run), `summary.csv` (one
/// row per experiment), `losses.csv`, per-frame CSVs under `frames/`, and
/// `triptych_XX.png` images (input | baseline | model). Returns the paths
/// written. Emitting the same bundle twice produces identical files.
pub fn emit_report(bundle: &ReportBundle, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let out = out_dir.as_ref();
    let frames_dir = out.join("frames");
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    let mut written = Vec::new();

    let path = out.join("report.json");
    write_json_file(&path, bundle)?;
    written.push(path);

    let mut metrics = String::from("name,seed,fg_ari,all_ari,j_fg,j_bg,skipped_fg_frames,largest_segment_background\n");
    let mut losses = String::from("name,seed,step,mse,wbce,fgbg,total\n");
    for r in &bundle.results {
        let m = &r.report;
        let _ = writeln!(
            metrics,
            "{},{},{},{},{},{},{},{}",
            r.name, r.seed, m.fg_ari, m.all_ari, m.jaccard_fg, m.jaccard_bg, m.skipped_fg_frames, m.largest_segment_background
        );
        for (step, l) in r.losses.iter().enumerate() {
            let _ = writeln!(losses, "{},{},{step},{},{},{},{}", r.name, r.seed, l.mse, l.wbce, l.fgbg, l.total);
        }
        let path = frames_dir.join(format!("{}_seed{}.csv", r.name, r.seed));
        write_text(&path, &m.to_csv())?;
        written.push(path);
    }
    for (name, text) in [("metrics.csv", &metrics), ("losses.csv", &losses)] {
        let path = out.join(name);
        write_text(&path, text)?;
        written.push(path);
    }

    let mut summary = String::from("name,seeds,fg_ari,all_ari,j_fg,j_bg\n");
    for row in &bundle.summary {
        let _ = writeln!(
            summary,
            "{},{},{},{},{},{}",
            row.name,
            row.seeds.len(),
            row.fg_ari,
            row.all_ari,
            row.jaccard_fg,
            row.jaccard_bg
        );
    }
    let path = out.join("summary.csv");
    write_text(&path, &summary)?;
    written.push(path);

    for (i, t) in bundle.previews.iter().enumerate() {
        let path = out.join(format!("triptych_{i:02}.png"));
        write_png_rgb8(&path, 3 * t.width, t.height, &triptych_pixels(t))?;
        written.push(path);
    }
    Ok(written)
}
