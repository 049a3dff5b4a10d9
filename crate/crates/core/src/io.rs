//! On-disk corpus layout.
//!
//! ```text
//! <corpus>/labels.csv                     plot_id,date,stage,LAI,SPAD,VH
//! <corpus>/plots/<plot_id>/<band>.f32     little-endian float32, row-major
//! <corpus>/plots/<plot_id>/meta.json      {plot_id, width, height, date, stage}
//! ```
//!
//! VI caches use the same convention with one file per index.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::partition::{GrowthRecord, SplitAssignment};
use crate::spectral::{Band, BandStack, VIStack, VegIndex};
use crate::synthgen::SyntheticPlot;

pub const PLOTS_DIR: &str = "plots";
pub const LABELS_FILE: &str = "labels.csv";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlotMeta {
    pub plot_id: String,
    pub width: usize,
    pub height: usize,
    pub date: String,
    pub stage: String,
}

pub fn write_f32(path: &Path, values: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_f32(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() != expected * 4 {
        return Err(invalid(format!(
            "{}: expected {} float32 values, found {} bytes",
            path.display(),
            expected,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_meta(dir: &Path) -> Result<PlotMeta> {
    Ok(serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?)
}

pub fn write_band_dir(dir: &Path, bands: &BandStack, stage: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    for band in Band::ALL {
        write_f32(&dir.join(format!("{}.f32", band.name())), bands.band(band))?;
    }
    let meta = PlotMeta {
        plot_id: bands.plot_id.clone(),
        width: bands.width,
        height: bands.height,
        date: bands.date.clone(),
        stage: stage.to_string(),
    };
    write_json(&dir.join("meta.json"), &meta)
}

pub fn read_band_dir(dir: &Path) -> Result<(BandStack, PlotMeta)> {
    let meta = read_meta(dir)?;
    let n = meta.width * meta.height;
    let mut bands: [Vec<f64>; 5] = Default::default();
    for (slot, band) in bands.iter_mut().zip(Band::ALL) {
        *slot = read_f32(&dir.join(format!("{}.f32", band.name())), n)?;
    }
    let stack = BandStack::new(&meta.plot_id, &meta.date, meta.height, meta.width, bands)?;
    Ok((stack, meta))
}

pub fn write_vi_dir(dir: &Path, vi: &VIStack, meta: &PlotMeta) -> Result<()> {
    fs::create_dir_all(dir)?;
    for index in VegIndex::ALL {
        write_f32(&dir.join(format!("{}.f32", index.name())), vi.channel(index))?;
    }
    write_json(&dir.join("meta.json"), meta)
}

pub fn read_vi_dir(dir: &Path) -> Result<(VIStack, PlotMeta)> {
    let meta = read_meta(dir)?;
    let n = meta.width * meta.height;
    let mut channels = Vec::with_capacity(VegIndex::ALL.len());
    for index in VegIndex::ALL {
        channels.push(read_f32(&dir.join(format!("{}.f32", index.name())), n)?);
    }
    let stack = VIStack::new(&meta.plot_id, meta.height, meta.width, channels)?;
    Ok((stack, meta))
}

/// Plot directories under `<root>/plots`, sorted by name.
pub fn plot_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let base = root.join(PLOTS_DIR);
    if !base.is_dir() {
        return Err(Error::Invalid(format!("{} is not a directory", base.display())));
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(&base)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

pub fn write_labels(path: &Path, records: &[GrowthRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<Vec<GrowthRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let rec: GrowthRecord = row?;
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

/// Write a generated corpus: every plot's band directory plus labels for the labeled ones.
pub fn write_corpus(root: &Path, plots: &[SyntheticPlot]) -> Result<()> {
    fs::create_dir_all(root.join(PLOTS_DIR))?;
    for p in plots {
        write_band_dir(&root.join(PLOTS_DIR).join(&p.bands.plot_id), &p.bands, &p.stage)?;
    }
    let labels: Vec<GrowthRecord> = plots.iter().filter_map(|p| p.label.clone()).collect();
    write_labels(&root.join(LABELS_FILE), &labels)
}

pub fn write_split(path: &Path, split: &SplitAssignment) -> Result<()> {
    write_json(path, split)
}

pub fn read_split(path: &Path) -> Result<SplitAssignment> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}
