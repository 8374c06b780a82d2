//! Wavefront OBJ templates and JSON region sidecars.
//!
//! A template `face.obj` looks for its regions in `regions/<name>.json` next
//! to it; each file is a JSON array of vertex indices.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::mesh_corpus::{load_vertex_sequence, FaceMesh};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Parses `v` and `f` records. Polygons are fan-triangulated; `v/vt/vn`
/// references and negative (relative) indices are accepted.
pub fn parse_obj<S: Scalar>(text: &str, path: &Path) -> Result<(Matrix<S>, Vec<[usize; 3]>)> {
    let mut positions: Vec<S> = Vec::new();
    let mut faces = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let coords: Vec<&str> = parts.collect();
                if coords.len() < 3 {
                    return Err(Error::malformed(path, format!("line {}: vertex needs 3 coordinates", lineno + 1)));
                }
                for c in &coords[..3] {
                    let x: f64 = c
                        .parse()
                        .map_err(|_| Error::malformed(path, format!("line {}: bad number {c:?}", lineno + 1)))?;
                    positions.push(S::lit(x));
                }
            }
            Some("f") => {
                let vcount = positions.len() / 3;
                let idx: Vec<usize> = parts
                    .map(|p| {
                        let first = p.split('/').next().unwrap_or("");
                        let i: i64 = first
                            .parse()
                            .map_err(|_| Error::malformed(path, format!("line {}: bad face index {p:?}", lineno + 1)))?;
                        let resolved = if i < 0 { vcount as i64 + i } else { i - 1 };
                        if resolved < 0 {
                            return Err(Error::malformed(path, format!("line {}: face index {i} out of range", lineno + 1)));
                        }
                        Ok(resolved as usize)
                    })
                    .collect::<Result<_>>()?;
                if idx.len() < 3 {
                    return Err(Error::malformed(path, format!("line {}: face needs 3 vertices", lineno + 1)));
                }
                for k in 1..idx.len() - 1 {
                    faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    let v = positions.len() / 3;
    Ok((Matrix::from_vec(v, 3, positions), faces))
}

pub fn load_obj_positions<S: Scalar>(path: impl AsRef<Path>) -> Result<(Matrix<S>, Vec<[usize; 3]>)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_obj(&text, path)
}

pub fn save_obj<S: Scalar>(path: impl AsRef<Path>, positions: &Matrix<S>, faces: &[[usize; 3]]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for r in 0..positions.rows() {
        let p = positions.row(r);
        writeln!(out, "v {} {} {}", p[0], p[1], p[2]).expect("string write");
    }
    for f in faces {
        writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1).expect("string write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn regions_dir_for(path: &Path) -> PathBuf {
    path.parent().unwrap_or_else(|| Path::new(".")).join("regions")
}

/// Reads every `<name>.json` in `dir` as a region.
pub fn load_regions(dir: impl AsRef<Path>) -> Result<BTreeMap<String, Vec<usize>>> {
    let dir = dir.as_ref();
    let mut regions = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) != Some("json") {
            continue;
        }
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::malformed(&path, "region file name is not UTF-8"))?
            .to_string();
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let idx: Vec<usize> = serde_json::from_str(&text)
            .map_err(|e| Error::malformed(&path, format!("expected a JSON array of vertex indices: {e}")))?;
        regions.insert(name, idx);
    }
    Ok(regions)
}

pub fn save_region(dir: impl AsRef<Path>, name: &str, indices: &[usize]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(format!("{name}.json"));
    let text = serde_json::to_string(indices)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Loads an OBJ (or single-frame MSEQ) template with regions from
/// `regions/` beside it.
pub fn load_template<S: Scalar>(path: impl AsRef<Path>) -> Result<FaceMesh<S>> {
    let path = path.as_ref();
    load_template_with_regions(path, regions_dir_for(path))
}

pub fn load_template_with_regions<S: Scalar>(
    path: impl AsRef<Path>,
    regions_dir: impl AsRef<Path>,
) -> Result<FaceMesh<S>> {
    let path = path.as_ref();
    let is_mseq = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("mseq"));
    let (vertices, faces) = if is_mseq {
        let seq = load_vertex_sequence::<S>(path)?;
        if seq.frames() != 1 {
            return Err(Error::malformed(path, format!("template MSEQ must have 1 frame, has {}", seq.frames())));
        }
        let row = seq.offsets().row(0).to_vec();
        (Matrix::from_vec(seq.vertices(), 3, row), Vec::new())
    } else {
        load_obj_positions(path)?
    };
    let regions = load_regions(regions_dir)?;
    FaceMesh::new(vertices, faces, regions)
}

/// Writes `path` as OBJ and every region into `regions/` beside it.
pub fn save_template<S: Scalar>(mesh: &FaceMesh<S>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    save_obj(path, mesh.vertices(), mesh.faces())?;
    let dir = regions_dir_for(path);
    for (name, idx) in mesh.regions() {
        save_region(&dir, name, idx)?;
    }
    Ok(())
}
