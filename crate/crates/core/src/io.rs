//! File plumbing: atomic writes, little-endian `f64` blobs, point CSVs, hashes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::format(path, "path has no file name"))?
        .to_string_lossy();
    let tmp = path.with_file_name(format!(".{file_name}.tmp"));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn f64_to_le_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn f64_from_le_bytes(path: &Path, bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::format(path, format!("length {} is not a multiple of 8", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Hash of a value's canonical JSON encoding.
pub fn hash_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(value)?))
}

pub fn hash_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read(path)?))
}

/// `{:?}` prints the shortest string that round-trips to the same `f64`.
fn fmt_f64(out: &mut String, v: f64) {
    let _ = write!(out, "{v:?}");
}

/// Point CSV: header `dim_0,…,dim_{D−1},is_clean`, one row per point.
pub fn points_to_csv(points: &Tensor, clean_mask: &[bool]) -> String {
    let d = points.cols();
    let mut out = String::new();
    for j in 0..d {
        let _ = write!(out, "dim_{j},");
    }
    out.push_str("is_clean\n");
    for i in 0..points.rows() {
        for v in points.row(i) {
            fmt_f64(&mut out, *v);
            out.push(',');
        }
        out.push_str(if clean_mask.get(i).copied().unwrap_or(true) { "1\n" } else { "0\n" });
    }
    out
}

pub fn write_points_csv(path: &Path, points: &Tensor, clean_mask: &[bool]) -> Result<()> {
    atomic_write(path, points_to_csv(points, clean_mask).as_bytes())
}

pub fn read_points_csv(path: &Path) -> Result<(Tensor, Vec<bool>)> {
    let text = read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::format(path, "empty file"))?;
    let cols: Vec<&str> = header.split(',').collect();
    let d = cols.len().saturating_sub(1);
    let expected = (0..d).map(|j| format!("dim_{j}")).chain(["is_clean".to_string()]);
    if cols.len() < 2 || !cols.iter().copied().eq(expected.collect::<Vec<_>>().iter().map(String::as_str)) {
        return Err(Error::format(path, "header must be dim_0,…,dim_{D-1},is_clean"));
    }
    let mut data = Vec::new();
    let mut mask = Vec::new();
    for (lineno, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 1 {
            return Err(Error::format(path, format!("row {} has {} fields, expected {}", lineno + 1, fields.len(), d + 1)));
        }
        for f in &fields[..d] {
            data.push(
                f.parse::<f64>()
                    .map_err(|e| Error::format(path, format!("row {}: {e}", lineno + 1)))?,
            );
        }
        mask.push(match fields[d] {
            "1" | "true" => true,
            "0" | "false" => false,
            other => return Err(Error::format(path, format!("row {}: bad is_clean `{other}`", lineno + 1))),
        });
    }
    Ok((Tensor::matrix(mask.len(), d, data)?, mask))
}

/// Writes a tensor as a raw little-endian blob plus a `{shape, file}` JSON
/// manifest next to it. Returns the blob path.
pub fn write_tensor_blob(manifest_path: &Path, tensor: &Tensor) -> Result<PathBuf> {
    let blob = manifest_path.with_extension("bin");
    atomic_write(&blob, &f64_to_le_bytes(tensor.data()))?;
    let manifest = serde_json::json!({
        "shape": tensor.shape(),
        "dtype": "f64-le",
        "layout": "row-major",
        "file": blob.file_name().map(|f| f.to_string_lossy().into_owned()),
    });
    write_json(manifest_path, &manifest)?;
    Ok(blob)
}

/// Resolves `name` relative to the directory holding `anchor`.
pub fn sibling(anchor: &Path, name: &str) -> PathBuf {
    anchor.parent().map_or_else(|| PathBuf::from(name), |d| d.join(name))
}
