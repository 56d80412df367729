//! Plain-text point files and dataset manifests.
//!
//! A point file holds one point per line as three space-separated decimal
//! numbers with `\n` endings and no header. Normals, when stored, live in a
//! companion file with the same layout. A dataset directory carries a
//! `manifest.csv` with header `path,label`, paths relative to the directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;

pub const MANIFEST_NAME: &str = "manifest.csv";

pub fn format_rows(rows: &[[f64; 3]]) -> String {
    let mut out = String::with_capacity(rows.len() * 48);
    for r in rows {
        let _ = writeln!(out, "{} {} {}", r[0], r[1], r[2]);
    }
    out
}

pub fn parse_rows(text: &str) -> Result<Vec<[f64; 3]>> {
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(' ');
        let mut row = [0.0; 3];
        for slot in row.iter_mut() {
            let field = fields
                .next()
                .ok_or_else(|| Error::format(format!("line {}: expected 3 values", lineno + 1)))?;
            *slot = field.trim().parse().map_err(|_| {
                Error::format(format!("line {}: bad number '{field}'", lineno + 1))
            })?;
        }
        if fields.next().is_some() {
            return Err(Error::format(format!("line {}: more than 3 values", lineno + 1)));
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_points(path: &Path, cloud: &PointCloud) -> Result<()> {
    fs::write(path, format_rows(cloud.points())).map_err(|e| Error::io(path, e))
}

pub fn read_points(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rows = parse_rows(&text).map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    PointCloud::new(rows)
}

pub fn write_normals(path: &Path, cloud: &PointCloud) -> Result<()> {
    let normals = cloud
        .normals()
        .ok_or_else(|| Error::invalid("cloud has no normals to write"))?;
    fs::write(path, format_rows(normals)).map_err(|e| Error::io(path, e))
}

/// Reads a point file and, when given, its companion normals file.
pub fn read_cloud(points: &Path, normals: Option<&Path>) -> Result<PointCloud> {
    let cloud = read_points(points)?;
    match normals {
        None => Ok(cloud),
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            cloud.with_normals(parse_rows(&text)?)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub label: usize,
}

pub fn write_manifest(dir: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let path = dir.join(MANIFEST_NAME);
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(&path)
        .map_err(|e| csv_error(&path, e))?;
    for e in entries {
        w.serialize(e).map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST_NAME);
    if !path.exists() {
        return Err(Error::format(format!("manifest missing: {}", path.display())));
    }
    let mut r = csv::Reader::from_path(&path).map_err(|e| csv_error(&path, e))?;
    let headers = r.headers().map_err(|e| csv_error(&path, e))?;
    if headers != vec!["path", "label"] {
        return Err(Error::format(format!(
            "{}: expected header 'path,label'",
            path.display()
        )));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| csv_error(&path, e)))
        .collect()
}

/// A labelled cloud loaded from a dataset directory.
#[derive(Debug, Clone)]
pub struct Sample {
    pub path: PathBuf,
    pub cloud: PointCloud,
    pub label: usize,
}

pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    read_manifest(dir)?
        .into_iter()
        .map(|entry| {
            let path = dir.join(&entry.path);
            Ok(Sample {
                cloud: read_points(&path)?,
                path,
                label: entry.label,
            })
        })
        .collect()
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line());
    match (e.kind(), line) {
        (csv::ErrorKind::Io(_), _) => match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        },
        (_, Some(line)) => Error::format(format!("{} line {line}: {e}", path.display())),
        (_, None) => Error::format(format!("{}: {e}", path.display())),
    }
}
