//! Lip vertex error, upper-face dynamics deviation, lip readability and
//! transcript character accuracy.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh_corpus::{FaceMesh, VertexSequence, LIPS, UPPER_FACE};
use crate::scalar::Scalar;

/// Threshold below which a lip vertex counts as readable, in mesh units.
pub const DEFAULT_MU: f64 = 1e-4;

/// How per-vertex lip distances are reduced within a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LveAggregation {
    /// Largest lip-vertex distance of the frame.
    #[default]
    Max,
    /// Mean lip-vertex distance of the frame.
    Mean,
}

impl std::str::FromStr for LveAggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Self::Max),
            "mean" => Ok(Self::Mean),
            other => Err(Error::Config(format!("unknown LVE aggregation {other:?}, expected max or mean"))),
        }
    }
}

fn check_pair<S: Scalar>(gt: &VertexSequence<S>, pred: &VertexSequence<S>, mesh: &FaceMesh<S>) -> Result<()> {
    gt.check_mesh(mesh)?;
    if gt.offsets().shape() != pred.offsets().shape() {
        return Err(Error::ShapeMismatch(format!(
            "ground truth is {:?} but prediction is {:?}",
            gt.offsets().shape(),
            pred.offsets().shape()
        )));
    }
    Ok(())
}

fn norm3<S: Scalar>(v: [S; 3]) -> f64 {
    v.iter().map(|x| x.to_f64().unwrap().powi(2)).sum::<f64>().sqrt()
}

fn distance<S: Scalar>(a: &VertexSequence<S>, b: &VertexSequence<S>, t: usize, v: usize) -> f64 {
    let (p, q) = (a.offset(t, v), b.offset(t, v));
    norm3([p[0] - q[0], p[1] - q[1], p[2] - q[2]])
}

/// Mean over frames of the per-frame aggregated lip-vertex L2 distance.
pub fn lve<S: Scalar>(
    gt: &VertexSequence<S>,
    pred: &VertexSequence<S>,
    mesh: &FaceMesh<S>,
    aggregation: LveAggregation,
) -> Result<f64> {
    check_pair(gt, pred, mesh)?;
    let lips = mesh.region(LIPS)?;
    let per_frame = (0..gt.frames()).map(|t| {
        let d = lips.iter().map(|&v| distance(gt, pred, t, v));
        match aggregation {
            LveAggregation::Max => d.fold(0.0, f64::max),
            LveAggregation::Mean => d.sum::<f64>() / lips.len() as f64,
        }
    });
    Ok(per_frame.sum::<f64>() / gt.frames() as f64)
}

fn population_std(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    (values.map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Mean over upper-face vertices of the prediction's temporal standard
/// deviation of offset norms minus that of the ground truth.
pub fn fdd<S: Scalar>(gt: &VertexSequence<S>, pred: &VertexSequence<S>, mesh: &FaceMesh<S>) -> Result<f64> {
    check_pair(gt, pred, mesh)?;
    let upper = mesh.region(UPPER_FACE)?;
    if gt.frames() < 2 {
        return Err(Error::ShapeMismatch(format!("fdd needs at least 2 frames, got {}", gt.frames())));
    }
    let dyn_of = |seq: &VertexSequence<S>, v: usize| population_std((0..seq.frames()).map(move |t| norm3(seq.offset(t, v))));
    let total: f64 = upper.iter().map(|&v| dyn_of(pred, v) - dyn_of(gt, v)).sum();
    Ok(total / upper.len() as f64)
}

/// Fraction of (frame, lip vertex) pairs whose distance is below `mu`.
pub fn lrp<S: Scalar>(gt: &VertexSequence<S>, pred: &VertexSequence<S>, mesh: &FaceMesh<S>, mu: f64) -> Result<f64> {
    if !(mu > 0.0) {
        return Err(Error::Config(format!("mu must be positive, got {mu}")));
    }
    check_pair(gt, pred, mesh)?;
    let lips = mesh.region(LIPS)?;
    let readable = (0..gt.frames())
        .flat_map(|t| lips.iter().map(move |&v| (t, v)))
        .filter(|&(t, v)| distance(gt, pred, t, v) < mu)
        .count();
    Ok(readable as f64 / (gt.frames() * lips.len()) as f64)
}

/// Levenshtein distance over characters.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let b: Vec<char> = b.chars().collect();
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.chars().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let next = (diag + usize::from(ca != cb)).min(row[j] + 1).min(row[j + 1] + 1);
            diag = row[j + 1];
            row[j + 1] = next;
        }
    }
    row[b.len()]
}

/// `max(0, 1 − edit_distance / |reference|)`; an empty reference scores 1
/// only against an empty hypothesis.
pub fn char_accuracy(reference: &str, hypothesis: &str) -> f64 {
    let n = reference.chars().count();
    if n == 0 {
        return if hypothesis.is_empty() { 1.0 } else { 0.0 };
    }
    (1.0 - edit_distance(reference, hypothesis) as f64 / n as f64).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub lve: f64,
    pub fdd: f64,
    pub lrp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub lve: f64,
    pub fdd: f64,
    pub lrp: f64,
    pub mu: f64,
    pub lve_aggregation: LveAggregation,
    pub lip_region: String,
    pub upper_face_region: String,
    pub per_sample: Vec<SampleMetrics>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricParams {
    pub mu: f64,
    pub lve_aggregation: LveAggregation,
}

impl Default for MetricParams {
    fn default() -> Self {
        Self {
            mu: DEFAULT_MU,
            lve_aggregation: LveAggregation::Max,
        }
    }
}

pub fn evaluate_sample<S: Scalar>(
    id: &str,
    gt: &VertexSequence<S>,
    pred: &VertexSequence<S>,
    mesh: &FaceMesh<S>,
    params: MetricParams,
) -> Result<SampleMetrics> {
    Ok(SampleMetrics {
        id: id.to_string(),
        lve: lve(gt, pred, mesh, params.lve_aggregation)?,
        fdd: fdd(gt, pred, mesh)?,
        lrp: lrp(gt, pred, mesh, params.mu)?,
    })
}

impl EvalReport {
    /// Corpus values are means of the per-sample values.
    pub fn from_samples(per_sample: Vec<SampleMetrics>, params: MetricParams) -> Result<Self> {
        if per_sample.is_empty() {
            return Err(Error::Config("cannot build a report from zero samples".into()));
        }
        let n = per_sample.len() as f64;
        let mean = |f: fn(&SampleMetrics) -> f64| per_sample.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            lve: mean(|s| s.lve),
            fdd: mean(|s| s.fdd),
            lrp: mean(|s| s.lrp),
            mu: params.mu,
            lve_aggregation: params.lve_aggregation,
            lip_region: LIPS.into(),
            upper_face_region: UPPER_FACE.into(),
            per_sample,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One `id,lve,fdd,lrp` row per sample after a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,lve,fdd,lrp\n");
        for s in &self.per_sample {
            writeln!(out, "{},{:e},{:e},{}", s.id, s.lve, s.fdd, s.lrp).unwrap();
        }
        out
    }
}
