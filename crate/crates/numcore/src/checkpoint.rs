//! Zipped model snapshots.
//!
//! Each tensor is stored as `<name>.bin` (little-endian float32, row-major)
//! with a `<name>.json` sidecar `{name, shape, kind}`. Extra JSON documents
//! (architecture echo, tags) ride along as additional entries. Entries carry
//! a fixed timestamp so identical models produce identical archives.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Seek, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use zip::write::SimpleFileOptions;
use zip::{CompressionMethod, DateTime, ZipArchive, ZipWriter};

use crate::error::{NumError, Result};
use crate::params::{ParamStore, RunningStats};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Parameter,
    RunningMean,
    RunningVar,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sidecar {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: EntryKind,
}

/// Tensors and documents read back from an archive.
#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    pub params: BTreeMap<String, Tensor>,
    pub buffers: BTreeMap<String, RunningStats>,
    pub documents: BTreeMap<String, String>,
}

fn ck_err(e: impl std::fmt::Display) -> NumError {
    NumError::Checkpoint(e.to_string())
}

fn encode_f32(values: &[f64]) -> Vec<u8> {
    values
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect()
}

fn decode_f32(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 4 != 0 {
        return Err(ck_err("blob length is not a multiple of 4"));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn options() -> SimpleFileOptions {
    SimpleFileOptions::default()
        .compression_method(CompressionMethod::Stored)
        .last_modified_time(DateTime::default())
        .unix_permissions(0o644)
}

fn write_tensor<W: Write + Seek>(
    zip: &mut ZipWriter<W>,
    name: &str,
    kind: EntryKind,
    shape: &[usize],
    values: &[f64],
) -> Result<()> {
    let suffix = match kind {
        EntryKind::Parameter => "",
        EntryKind::RunningMean => ".running_mean",
        EntryKind::RunningVar => ".running_var",
    };
    let sidecar = Sidecar {
        name: name.to_string(),
        shape: shape.to_vec(),
        kind,
    };
    zip.start_file(format!("tensors/{name}{suffix}.bin"), options())
        .map_err(ck_err)?;
    zip.write_all(&encode_f32(values))?;
    zip.start_file(format!("tensors/{name}{suffix}.json"), options())
        .map_err(ck_err)?;
    zip.write_all(&serde_json::to_vec(&sidecar).map_err(ck_err)?)?;
    Ok(())
}

/// Write every parameter and buffer whose name starts with one of `prefixes`.
pub fn save(
    path: &Path,
    store: &ParamStore,
    prefixes: &[&str],
    documents: &[(&str, String)],
) -> Result<()> {
    let keep = |name: &str| prefixes.iter().any(|p| name.starts_with(p));
    let mut zip = ZipWriter::new(File::create(path)?);
    for (name, body) in documents {
        zip.start_file(*name, options()).map_err(ck_err)?;
        zip.write_all(body.as_bytes())?;
    }
    for p in store.params().iter().filter(|p| keep(&p.name)) {
        write_tensor(&mut zip, &p.name, EntryKind::Parameter, p.value.shape(), p.value.data())?;
    }
    for (name, stats) in store.buffers().filter(|(n, _)| keep(n)) {
        let shape = [stats.mean.len()];
        write_tensor(&mut zip, name, EntryKind::RunningMean, &shape, &stats.mean)?;
        write_tensor(&mut zip, name, EntryKind::RunningVar, &shape, &stats.var)?;
    }
    zip.finish().map_err(ck_err)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut archive = ZipArchive::new(File::open(path)?).map_err(ck_err)?;
    let mut blobs: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    let mut out = Checkpoint::default();
    for i in 0..archive.len() {
        let mut entry = archive.by_index(i).map_err(ck_err)?;
        let name = entry.name().to_string();
        let mut bytes = Vec::new();
        entry.read_to_end(&mut bytes)?;
        if name.starts_with("tensors/") {
            blobs.insert(name, bytes);
        } else {
            out.documents.insert(name, String::from_utf8(bytes).map_err(ck_err)?);
        }
    }
    let mut means: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut vars: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (entry, body) in blobs.iter().filter(|(n, _)| n.ends_with(".json")) {
        let sidecar: Sidecar = serde_json::from_slice(body).map_err(ck_err)?;
        let blob_name = format!("{}.bin", entry.trim_end_matches(".json"));
        let blob = blobs
            .get(&blob_name)
            .ok_or_else(|| ck_err(format!("missing blob {blob_name}")))?;
        let values = decode_f32(blob)?;
        match sidecar.kind {
            EntryKind::Parameter => {
                out.params
                    .insert(sidecar.name, Tensor::new(&sidecar.shape, values)?);
            }
            EntryKind::RunningMean => {
                means.insert(sidecar.name, values);
            }
            EntryKind::RunningVar => {
                vars.insert(sidecar.name, values);
            }
        }
    }
    for (name, mean) in means {
        let var = vars
            .remove(&name)
            .ok_or_else(|| ck_err(format!("missing running_var for {name}")))?;
        out.buffers.insert(name, RunningStats { mean, var });
    }
    Ok(out)
}

impl Checkpoint {
    /// Copy entries whose name starts with `prefix` into `store`.
    /// Every such entry must exist in `store` with the same shape.
    pub fn apply(&self, store: &mut ParamStore, prefix: &str) -> Result<usize> {
        let mut n = 0;
        for (name, t) in self.params.iter().filter(|(k, _)| k.starts_with(prefix)) {
            let id = store
                .id(name)
                .ok_or_else(|| NumError::UnknownParameter(name.clone()))?;
            let p = store.get_mut(id);
            if p.value.shape() != t.shape() {
                return Err(ck_err(format!(
                    "{name}: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
            n += 1;
        }
        for (name, stats) in self.buffers.iter().filter(|(k, _)| k.starts_with(prefix)) {
            let id = store
                .buffer_id(name)
                .ok_or_else(|| NumError::UnknownParameter(name.clone()))?;
            *store.buffer_mut(id) = stats.clone();
        }
        Ok(n)
    }
}
