//! Meshes, vertex-offset sequences, audio clips and transcripts; their file
//! formats; frame-rate alignment; and the seeded synthetic corpus.

mod align;
mod audio;
mod mseq;
mod obj;
mod synth;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub use align::{align_to_fps, resample_rows, resample_rows_matrix};
pub use audio::{audio_from_wav_bytes, load_audio, resample_linear, resample_sinc, save_audio, wav_bytes, SAMPLE_RATE};
pub use mseq::{decode_mseq, encode_mseq, load_vertex_sequence, save_vertex_sequence, MSEQ_MAGIC, MSEQ_VERSION};
pub use obj::{
    load_obj_positions, load_regions, load_template, load_template_with_regions, save_obj, save_region,
    save_template,
};
pub use synth::{generate_synthetic_corpus, SynthConfig, SyntheticCorpus};

pub const LIPS: &str = "lips";
pub const UPPER_FACE: &str = "upper_face";

/// Template mesh with named vertex regions.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceMesh<S> {
    vertices: Matrix<S>,
    faces: Vec<[usize; 3]>,
    regions: BTreeMap<String, Vec<usize>>,
}

impl<S: Scalar> FaceMesh<S> {
    /// `vertices` is `V × 3`. Region lists are sorted on the way in.
    pub fn new(
        vertices: Matrix<S>,
        faces: Vec<[usize; 3]>,
        regions: BTreeMap<String, Vec<usize>>,
    ) -> Result<Self> {
        if vertices.cols() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "mesh vertices must be V x 3, got {:?}",
                vertices.shape()
            )));
        }
        let v = vertices.rows();
        if v < 4 {
            return Err(Error::ShapeMismatch(format!("mesh needs at least 4 vertices, got {v}")));
        }
        if let Some(i) = vertices.as_slice().iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        if let Some(f) = faces.iter().find(|f| f.iter().any(|&i| i >= v)) {
            return Err(Error::ShapeMismatch(format!("face {f:?} references a vertex >= {v}")));
        }
        let mut sorted = BTreeMap::new();
        for (name, mut idx) in regions {
            if let Some(&bad) = idx.iter().find(|&&i| i >= v) {
                return Err(Error::RegionIndexOutOfRange {
                    region: name,
                    index: bad,
                    vertices: v,
                });
            }
            idx.sort_unstable();
            if idx.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::InvalidRegion {
                    region: name,
                    reason: "duplicate vertex index".into(),
                });
            }
            if idx.is_empty() {
                return Err(Error::InvalidRegion {
                    region: name,
                    reason: "empty region".into(),
                });
            }
            sorted.insert(name, idx);
        }
        if !sorted.contains_key(LIPS) {
            return Err(Error::MissingRegion(LIPS.into()));
        }
        Ok(Self {
            vertices,
            faces,
            regions: sorted,
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.rows()
    }

    pub fn vertices(&self) -> &Matrix<S> {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn regions(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.regions
    }

    pub fn region(&self, name: &str) -> Result<&[usize]> {
        self.regions
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingRegion(name.to_string()))
    }

    pub fn lips(&self) -> &[usize] {
        &self.regions[LIPS]
    }

    pub fn cast<T: Scalar>(&self) -> FaceMesh<T> {
        FaceMesh {
            vertices: self.vertices.cast(),
            faces: self.faces.clone(),
            regions: self.regions.clone(),
        }
    }
}

/// Per-frame vertex offsets over a template, stored as a `T × 3V` matrix
/// with row `t` laid out as `[x₀ y₀ z₀ x₁ y₁ z₁ …]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VertexSequence<S> {
    offsets: Matrix<S>,
    fps: f64,
}

impl<S: Scalar> VertexSequence<S> {
    pub fn new(offsets: Matrix<S>, fps: f64) -> Result<Self> {
        if offsets.rows() == 0 {
            return Err(Error::ShapeMismatch("vertex sequence needs at least one frame".into()));
        }
        if offsets.cols() == 0 || offsets.cols() % 3 != 0 {
            return Err(Error::ShapeMismatch(format!(
                "vertex sequence width {} is not a positive multiple of 3",
                offsets.cols()
            )));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::Config(format!("fps must be positive, got {fps}")));
        }
        if let Some(i) = offsets.as_slice().iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { offsets, fps })
    }

    pub fn zeros(frames: usize, vertices: usize, fps: f64) -> Result<Self> {
        Self::new(Matrix::zeros(frames, 3 * vertices), fps)
    }

    pub fn offsets(&self) -> &Matrix<S> {
        &self.offsets
    }

    pub fn into_offsets(self) -> Matrix<S> {
        self.offsets
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn frames(&self) -> usize {
        self.offsets.rows()
    }

    pub fn vertices(&self) -> usize {
        self.offsets.cols() / 3
    }

    pub fn offset(&self, t: usize, v: usize) -> [S; 3] {
        let row = self.offsets.row(t);
        [row[3 * v], row[3 * v + 1], row[3 * v + 2]]
    }

    pub fn duration(&self) -> f64 {
        self.frames() as f64 / self.fps
    }

    pub fn cast<T: Scalar>(&self) -> VertexSequence<T> {
        VertexSequence {
            offsets: self.offsets.cast(),
            fps: self.fps,
        }
    }

    pub fn check_mesh(&self, mesh: &FaceMesh<S>) -> Result<()> {
        if self.vertices() != mesh.vertex_count() {
            return Err(Error::ShapeMismatch(format!(
                "sequence has {} vertices, template has {}",
                self.vertices(),
                mesh.vertex_count()
            )));
        }
        Ok(())
    }
}

/// Mono PCM at [`SAMPLE_RATE`], samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyAudio);
        }
        if let Some(i) = samples.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE as f64
    }

    /// Video frame count covering the clip, `round(duration × fps)`.
    pub fn frames_at(&self, fps: f64) -> usize {
        (self.duration() * fps).round() as usize
    }
}

/// Ordered symbol set with a reserved CTC blank.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    symbols: Vec<char>,
    blank_index: usize,
}

impl Vocabulary {
    pub fn new(symbols: Vec<char>, blank_index: usize) -> Result<Self> {
        if symbols.len() < 2 {
            return Err(Error::Vocabulary(format!(
                "need at least 2 symbols, got {}",
                symbols.len()
            )));
        }
        if blank_index >= symbols.len() {
            return Err(Error::Vocabulary(format!(
                "blank index {blank_index} out of range for {} symbols",
                symbols.len()
            )));
        }
        let mut seen = symbols.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Vocabulary("duplicate symbol".into()));
        }
        Ok(Self {
            symbols,
            blank_index,
        })
    }

    /// Blank `'_'` at index 0 followed by `letters`.
    pub fn with_letters(letters: &str) -> Result<Self> {
        let mut symbols = vec!['_'];
        symbols.extend(letters.chars());
        Self::new(symbols, 0)
    }

    /// 32-entry letter vocabulary in the layout of common wav2vec 2.0 CTC
    /// heads: pad (blank), bos, eos, unk, word delimiter, 26 letters and the
    /// apostrophe. Special tokens are mapped to single characters.
    pub fn wav2vec2_letters() -> Self {
        let mut symbols = vec!['_', '<', '>', '?', '|'];
        symbols.extend("ETAONIHSRDLUMWCFGYPBVK".chars());
        symbols.push('\'');
        symbols.extend("XJQZ".chars());
        Self::new(symbols, 0).expect("static vocabulary is valid")
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn blank_index(&self) -> usize {
        self.blank_index
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        self.symbols.iter().position(|&s| s == c)
    }

    pub fn symbol(&self, index: usize) -> char {
        self.symbols[index]
    }

    /// Symbol indices of a transcript.
    pub fn encode(&self, transcript: &Transcript) -> Result<Vec<usize>> {
        transcript
            .text()
            .chars()
            .map(|c| match self.index_of(c) {
                Some(i) if i != self.blank_index => Ok(i),
                _ => Err(Error::UnknownSymbol(c)),
            })
            .collect()
    }

    /// Builds a transcript from non-blank symbol indices.
    pub fn decode(&self, indices: &[usize]) -> Transcript {
        Transcript {
            text: indices
                .iter()
                .filter(|&&i| i != self.blank_index)
                .map(|&i| self.symbols[i])
                .collect(),
        }
    }
}

/// Symbol string over a vocabulary, never containing the blank.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Transcript {
    text: String,
}

impl Transcript {
    pub fn new(text: impl Into<String>, vocab: &Vocabulary) -> Result<Self> {
        let t = Self { text: text.into() };
        vocab.encode(&t)?;
        Ok(t)
    }

    pub fn empty() -> Self {
        Self { text: String::new() }
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn len(&self) -> usize {
        self.text.chars().count()
    }

    pub fn is_empty(&self) -> bool {
        self.text.is_empty()
    }
}

impl std::fmt::Display for Transcript {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.text)
    }
}

/// One training or evaluation item.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSample<S> {
    pub sample_id: String,
    pub audio: AudioClip,
    pub gt_offsets: VertexSequence<S>,
    /// Known only for synthetic data.
    pub transcript: Option<Transcript>,
}

impl<S: Scalar> CorpusSample<S> {
    /// Checks that the offset frame count agrees with the audio length to
    /// within one frame.
    pub fn new(
        sample_id: impl Into<String>,
        audio: AudioClip,
        gt_offsets: VertexSequence<S>,
        transcript: Option<Transcript>,
    ) -> Result<Self> {
        let expected = audio.duration() * gt_offsets.fps();
        if (gt_offsets.frames() as f64 - expected).abs() > 1.0 {
            return Err(Error::ShapeMismatch(format!(
                "{} offset frames for {:.3} s of audio at {} fps",
                gt_offsets.frames(),
                audio.duration(),
                gt_offsets.fps()
            )));
        }
        Ok(Self {
            sample_id: sample_id.into(),
            audio,
            gt_offsets,
            transcript,
        })
    }
}
