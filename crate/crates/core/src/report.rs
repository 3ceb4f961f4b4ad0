//! Table rendering (CSV, aligned Markdown), causality-map heatmaps and the
//! run-directory summary.

use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Serialize};

use crate::autograd::Graph;
use crate::domain::Availability;
use crate::error::{Error, Result};
use crate::eval::{region_masks, DisentanglementReport, SubsetGrid};
use crate::experiments::{AblationTable, SweepTable, TableRow};
use crate::model::{Model, SampleInputs};
use crate::phantom::MultimodalSample;

pub const GRID_JSON: &str = "subset_grid.json";
pub const ABLATION_JSON: &str = "ablation.json";
pub const SWEEP_JSON: &str = "sweep.json";
pub const DISENTANGLEMENT_JSON: &str = "disentanglement.json";
pub const HEATMAP_DIR: &str = "heatmaps";
pub const REPORT_MD: &str = "report.md";

/// Aligned Markdown table; the first column is left-aligned, the rest right.
pub fn markdown_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let cols = header.len();
    let widths: Vec<usize> =
        (0..cols).map(|c| rows.iter().map(|r| r[c].len()).chain([header[c].len(), 3]).max().unwrap_or(3)).collect();
    let line = |cells: Vec<String>| -> String {
        let body: Vec<String> = cells
            .iter()
            .enumerate()
            .map(|(c, s)| if c == 0 { format!("{s:<w$}", w = widths[c]) } else { format!("{s:>w$}", w = widths[c]) })
            .collect();
        format!("| {} |\n", body.join(" | "))
    };
    let mut out = line(header.iter().map(|s| s.to_string()).collect());
    let rule: Vec<String> = widths
        .iter()
        .enumerate()
        .map(|(c, &w)| if c == 0 { format!(":{}", "-".repeat(w - 1)) } else { format!("{}:", "-".repeat(w - 1)) })
        .collect();
    out.push_str(&format!("| {} |\n", rule.join(" | ")));
    for r in rows {
        out.push_str(&line(r.clone()));
    }
    out
}

pub fn csv_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    out
}

fn f2(v: f64) -> String {
    format!("{v:.2}")
}

const GRID_HEADER: [&str; 8] = ["subset", "FLAIR", "T1ce", "T1", "T2", "WT", "TC", "ET"];

fn grid_rows(grid: &SubsetGrid) -> Vec<Vec<String>> {
    let mark = |a: Availability, i: usize| if a.bits() & (1 << i) != 0 { "1" } else { "0" }.to_string();
    let mut rows: Vec<Vec<String>> = grid
        .rows
        .iter()
        .map(|r| {
            let mut row = vec![r.label.clone()];
            row.extend((0..4).map(|i| mark(r.availability, i)));
            row.extend([f2(r.wt), f2(r.tc), f2(r.et)]);
            row
        })
        .collect();
    let mut avg = vec!["Average".to_string(), "".into(), "".into(), "".into(), "".into()];
    avg.extend(grid.means.iter().map(|&v| f2(v)));
    rows.push(avg);
    rows
}

/// Subset grid as CSV (availability as 0/1 columns) with an Average row.
pub fn grid_csv(grid: &SubsetGrid) -> String {
    csv_table(&GRID_HEADER, &grid_rows(grid))
}

pub fn grid_markdown(grid: &SubsetGrid) -> String {
    let mut s = markdown_table(&GRID_HEADER, &grid_rows(grid));
    let _ = writeln!(s, "\nMacro average (mean of WT/TC/ET averages): {:.2}", grid.macro_avg);
    s
}

const SCORE_HEADER: [&str; 5] = ["setting", "WT", "TC", "ET", "Avg"];

fn score_row(name: &str, r: &TableRow) -> Vec<String> {
    vec![name.to_string(), f2(r.wt), f2(r.tc), f2(r.et), f2(r.avg)]
}

pub fn ablation_rows(t: &AblationTable) -> Vec<Vec<String>> {
    t.rows.iter().map(|r| score_row(&r.name, r)).collect()
}

pub fn ablation_csv(t: &AblationTable) -> String {
    csv_table(&SCORE_HEADER, &ablation_rows(t))
}

pub fn ablation_markdown(t: &AblationTable) -> String {
    markdown_table(&SCORE_HEADER, &ablation_rows(t))
}

const SWEEP_HEADER: [&str; 7] = ["coefficient", "value", "WT", "TC", "ET", "Avg", "range"];

fn sweep_rows(t: &SweepTable) -> Vec<Vec<String>> {
    t.rows
        .iter()
        .map(|r| {
            let range = t.ranges.iter().find(|(c, _)| *c == r.coefficient).map_or(String::new(), |(_, v)| f2(*v));
            vec![
                r.coefficient.clone(),
                format!("{}", r.value),
                f2(r.row.wt),
                f2(r.row.tc),
                f2(r.row.et),
                f2(r.row.avg),
                range,
            ]
        })
        .collect()
}

pub fn sweep_csv(t: &SweepTable) -> String {
    csv_table(&SWEEP_HEADER, &sweep_rows(t))
}

pub fn sweep_markdown(t: &SweepTable) -> String {
    markdown_table(&SWEEP_HEADER, &sweep_rows(t))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    write_text(path, &(text + "\n"))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Writes `subset_grid.{json,csv,md}` into `dir`.
pub fn write_grid(dir: &Path, grid: &SubsetGrid) -> Result<()> {
    write_json(&dir.join(GRID_JSON), grid)?;
    write_text(&dir.join("subset_grid.csv"), &grid_csv(grid))?;
    write_text(&dir.join("subset_grid.md"), &grid_markdown(grid))
}

pub fn write_ablation(dir: &Path, t: &AblationTable) -> Result<()> {
    write_json(&dir.join(ABLATION_JSON), t)?;
    write_text(&dir.join("ablation.csv"), &ablation_csv(t))?;
    write_text(&dir.join("ablation.md"), &ablation_markdown(t))
}

pub fn write_sweep(dir: &Path, t: &SweepTable) -> Result<()> {
    write_json(&dir.join(SWEEP_JSON), t)?;
    write_text(&dir.join("sweep.csv"), &sweep_csv(t))?;
    write_text(&dir.join("sweep.md"), &sweep_markdown(t))
}

const HEATMAP_SCALE: usize = 4;

/// Mid-depth slice of the causality map (red) over the whole-tumour mask
/// (green), all modalities present, upscaled for viewing.
pub fn write_heatmap(model: &Model, case: &MultimodalSample, path: &Path) -> Result<()> {
    let mut g = Graph::new();
    let out = model.forward(
        &mut g,
        &SampleInputs::new(&case.volumes, Availability::ALL),
        crate::model::Heads::SEGMENTATION,
    )?;
    let map = model.causality_map(&mut g, out.fused.mediator);
    let a = g.value(map).data();
    let wt = region_masks(&case.label_map)?.wt;
    let grid = case.grid;
    let z = grid.d / 2;
    let (h, w) = (grid.h * HEATMAP_SCALE, grid.w * HEATMAP_SCALE);
    let mut pixels = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let i = grid.index(z, y / HEATMAP_SCALE, x / HEATMAP_SCALE);
            pixels.push((a[i].clamp(0.0, 1.0) * 255.0).round() as u8);
            pixels.push(if wt[i] { 200 } else { 0 });
            pixels.push(0);
        }
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(io)?;
    writer.write_image_data(&pixels).map_err(io)?;
    writer.finish().map_err(io)
}

/// Heatmaps of the first `n` cases into `dir/heatmaps/<case>.png`.
pub fn write_heatmaps(model: &Model, cases: &[MultimodalSample], dir: &Path, n: usize) -> Result<Vec<PathBuf>> {
    let hdir = dir.join(HEATMAP_DIR);
    fs::create_dir_all(&hdir).map_err(|e| Error::io(&hdir, e))?;
    cases
        .iter()
        .take(n)
        .map(|c| {
            let p = hdir.join(format!("{}.png", c.id));
            write_heatmap(model, c, &p).map(|_| p)
        })
        .collect()
}

/// Markdown summary of whatever artifacts `dir` holds. Returns the text and
/// the names of missing artifacts. Pure function of the directory contents.
pub fn render_report(dir: &Path) -> Result<(String, Vec<String>)> {
    let mut missing = Vec::new();
    let mut out = String::from("# Run report\n\n");
    let mut found = 0;

    let mut section =
        |title: &str, file: &str, render: &dyn Fn(&Path) -> Result<String>, out: &mut String| -> Result<()> {
            let path = dir.join(file);
            if path.exists() {
                let _ = write!(out, "## {title}\n\n{}\n", render(&path)?);
                found += 1;
            } else {
                missing.push(file.to_string());
            }
            Ok(())
        };
    section("Missing-modality grid (test split)", GRID_JSON, &|p| Ok(grid_markdown(&read_json(p)?)), &mut out)?;
    section("Ablation ladder", ABLATION_JSON, &|p| Ok(ablation_markdown(&read_json(p)?)), &mut out)?;
    section("Lambda sensitivity", SWEEP_JSON, &|p| Ok(sweep_markdown(&read_json(p)?)), &mut out)?;
    section(
        "Disentanglement",
        DISENTANGLEMENT_JSON,
        &|p| {
            let r: DisentanglementReport = read_json(p)?;
            let json = serde_json::to_string_pretty(&r).map_err(|e| Error::json(p, e))?;
            Ok(format!("```json\n{json}\n```\n"))
        },
        &mut out,
    )?;

    let hdir = dir.join(HEATMAP_DIR);
    let mut pngs: Vec<String> = match fs::read_dir(&hdir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.ends_with(".png"))
            .collect(),
        Err(_) => Vec::new(),
    };
    pngs.sort();
    if pngs.is_empty() {
        missing.push(format!("{HEATMAP_DIR}/*.png"));
    } else {
        found += 1;
        out.push_str("## Causality-map heatmaps\n\n");
        for p in &pngs {
            let _ = writeln!(out, "- [{p}]({HEATMAP_DIR}/{p})");
        }
        out.push('\n');
    }

    if found == 0 {
        out.push_str("No artifacts found in this directory.\n");
    } else if !missing.is_empty() {
        let _ = writeln!(out, "Missing artifacts: {}", missing.join(", "));
    }
    Ok((out, missing))
}
