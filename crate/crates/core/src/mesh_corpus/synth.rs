//! Seeded synthetic corpus in which text, audio and lip shape determine one
//! another.
//!
//! Every letter owns a pure tone and a canonical displacement pattern that is
//! large on the lip region and small elsewhere. A sample is a random letter
//! string (no letter repeated back to back); its audio concatenates the
//! letters' tones and its offsets hold each letter's pattern, cross-fading
//! linearly from the previous pattern (neutral before the first letter) at
//! the start of every letter.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh_corpus::{
    AudioClip, CorpusSample, FaceMesh, Transcript, VertexSequence, Vocabulary, LIPS, SAMPLE_RATE, UPPER_FACE,
};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Letters of the toy vocabulary; the blank is added in front.
    pub letters: String,
    pub vertices: usize,
    pub fps: f64,
    pub tokens_per_sample: usize,
    pub samples: usize,
    pub token_seconds: f64,
    /// Length of the cross-fade at the start of each letter.
    pub fade_seconds: f64,
    pub tone_base_hz: f64,
    pub tone_step_hz: f64,
    pub amplitude: f64,
    pub lip_vertices: usize,
    pub upper_face_vertices: usize,
    /// Per-axis standard deviation of lip displacements (mesh units).
    pub lip_scale: f64,
    /// Per-axis standard deviation of every other displacement.
    pub face_scale: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            letters: "abcdef".into(),
            vertices: 50,
            fps: 25.0,
            tokens_per_sample: 4,
            samples: 8,
            token_seconds: 0.2,
            fade_seconds: 0.08,
            tone_base_hz: 300.0,
            tone_step_hz: 200.0,
            amplitude: 0.5,
            lip_vertices: 12,
            upper_face_vertices: 15,
            lip_scale: 1e-3,
            face_scale: 1e-4,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.tokens_per_sample == 0 {
            return fail("tokens_per_sample must be at least 1".into());
        }
        if self.samples == 0 {
            return fail("samples must be at least 1".into());
        }
        if self.letters.chars().count() < 2 {
            return fail("need at least two letters".into());
        }
        if self.vertices < 4 {
            return fail(format!("need at least 4 vertices, got {}", self.vertices));
        }
        if self.lip_vertices == 0 || self.lip_vertices + self.upper_face_vertices > self.vertices {
            return fail(format!(
                "{} lip + {} upper-face vertices do not fit in {}",
                self.lip_vertices, self.upper_face_vertices, self.vertices
            ));
        }
        for (name, v) in [
            ("fps", self.fps),
            ("token_seconds", self.token_seconds),
            ("tone_base_hz", self.tone_base_hz),
            ("amplitude", self.amplitude),
            ("lip_scale", self.lip_scale),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.fade_seconds >= 0.0 && self.fade_seconds <= self.token_seconds) {
            return fail("fade_seconds must lie in [0, token_seconds]".into());
        }
        let top = self.token_frequency(self.letters.chars().count() - 1);
        if top >= SAMPLE_RATE as f64 / 2.0 || self.tone_step_hz <= 0.0 {
            return fail(format!("tone frequencies must increase and stay below Nyquist, top is {top} Hz"));
        }
        Ok(())
    }

    /// Tone of the `letter`-th letter (0-based, blank excluded).
    pub fn token_frequency(&self, letter: usize) -> f64 {
        self.tone_base_hz + self.tone_step_hz * letter as f64
    }

    pub fn samples_per_token(&self) -> usize {
        (self.token_seconds * SAMPLE_RATE as f64).round() as usize
    }
}

/// Output of [`generate_synthetic_corpus`] together with the tables that
/// tie its modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus<S> {
    pub config: SynthConfig,
    pub seed: u64,
    pub template: FaceMesh<S>,
    pub vocabulary: Vocabulary,
    /// Tone per vocabulary index; `0.0` for the blank.
    pub token_frequencies: Vec<f64>,
    /// Canonical `1 × 3V` displacement per vocabulary index; zeros for the blank.
    pub canonical_poses: Vec<Matrix<S>>,
    pub samples: Vec<CorpusSample<S>>,
}

impl<S: Scalar> SyntheticCorpus<S> {
    /// Vocabulary index of the canonical pose nearest to `frame` (a `3V` row).
    pub fn nearest_pose(&self, frame: &[S]) -> usize {
        self.nearest_pose_in(frame, None)
    }

    /// Like [`Self::nearest_pose`] but compares only the listed vertices.
    pub fn nearest_pose_in(&self, frame: &[S], vertices: Option<&[usize]>) -> usize {
        let blank = self.vocabulary.blank_index();
        let dist = |pose: &Matrix<S>| -> f64 {
            let p = pose.row(0);
            let mut acc = 0.0;
            let mut add = |c: usize| {
                let d = (frame[c] - p[c]).as_f64();
                acc += d * d;
            };
            match vertices {
                Some(vs) => vs.iter().for_each(|&v| (0..3).for_each(|a| add(3 * v + a))),
                None => (0..p.len()).for_each(&mut add),
            }
            acc
        };
        (0..self.canonical_poses.len())
            .filter(|&k| k != blank)
            .min_by(|&a, &b| dist(&self.canonical_poses[a]).total_cmp(&dist(&self.canonical_poses[b])))
            .expect("at least one letter")
    }
}

fn build_template<S: Scalar>(cfg: &SynthConfig) -> Result<FaceMesh<S>> {
    let v = cfg.vertices;
    let cols = (v as f64).sqrt().ceil() as usize;
    let rows = v.div_ceil(cols);
    let pos = |i: usize| -> [f64; 3] {
        let (r, c) = (i / cols, i % cols);
        let x = (c as f64 / (cols - 1).max(1) as f64 - 0.5) * 0.15;
        let y = (0.5 - r as f64 / (rows - 1).max(1) as f64) * 0.2;
        let z = 0.05 * (x * 10.0).cos() * (y * 8.0).cos();
        [x, y, z]
    };
    let vertices = Matrix::from_fn(v, 3, |i, a| S::lit(pos(i)[a]));
    let mut faces = Vec::new();
    for r in 0..rows.saturating_sub(1) {
        for c in 0..cols - 1 {
            let a = r * cols + c;
            let (b, d, e) = (a + 1, a + cols, a + cols + 1);
            if e < v {
                faces.push([a, d, b]);
                faces.push([b, d, e]);
            }
        }
    }
    // lips: the vertices closest to a mouth point low on the face
    let mouth = [0.0, -0.05];
    let mut by_mouth: Vec<usize> = (0..v).collect();
    by_mouth.sort_by(|&a, &b| {
        let d = |i: usize| {
            let p = pos(i);
            (p[0] - mouth[0]).powi(2) + (p[1] - mouth[1]).powi(2)
        };
        d(a).total_cmp(&d(b)).then(a.cmp(&b))
    });
    let lips: Vec<usize> = by_mouth[..cfg.lip_vertices].to_vec();
    let mut upper: Vec<usize> = (0..v).filter(|i| !lips.contains(i)).collect();
    upper.sort_by(|&a, &b| pos(b)[1].total_cmp(&pos(a)[1]).then(a.cmp(&b)));
    upper.truncate(cfg.upper_face_vertices);
    let mut regions = BTreeMap::from([(LIPS.to_string(), lips)]);
    if !upper.is_empty() {
        regions.insert(UPPER_FACE.to_string(), upper);
    }
    FaceMesh::new(vertices, faces, regions)
}

/// Generates the corpus described in the module docs. Identical `(cfg,
/// seed)` pairs give bit-identical output.
pub fn generate_synthetic_corpus<S: Scalar>(cfg: &SynthConfig, seed: u64) -> Result<SyntheticCorpus<S>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocabulary = Vocabulary::with_letters(&cfg.letters)?;
    let blank = vocabulary.blank_index();
    let letters: Vec<usize> = (0..vocabulary.len()).filter(|&i| i != blank).collect();
    let template = build_template::<S>(cfg)?;
    let v = cfg.vertices;

    let mut token_frequencies = vec![0.0; vocabulary.len()];
    let mut canonical_poses = vec![Matrix::zeros(1, 3 * v); vocabulary.len()];
    let lips = template.lips().to_vec();
    for (rank, &k) in letters.iter().enumerate() {
        token_frequencies[k] = cfg.token_frequency(rank);
        canonical_poses[k] = Matrix::from_fn(1, 3 * v, |_, c| {
            let scale = if lips.contains(&(c / 3)) { cfg.lip_scale } else { cfg.face_scale };
            let n: f64 = rng.sample(StandardNormal);
            S::lit(n * scale)
        });
    }
    for (i, &a) in letters.iter().enumerate() {
        for &b in &letters[i + 1..] {
            let d = canonical_poses[a].max_abs_diff(&canonical_poses[b]);
            if d <= S::zero() {
                return Err(Error::Config(format!(
                    "letters {:?} and {:?} share a canonical pose",
                    vocabulary.symbol(a),
                    vocabulary.symbol(b)
                )));
            }
        }
    }

    let per_token = cfg.samples_per_token();
    let mut samples = Vec::with_capacity(cfg.samples);
    for s in 0..cfg.samples {
        let mut tokens: Vec<usize> = Vec::with_capacity(cfg.tokens_per_sample);
        for _ in 0..cfg.tokens_per_sample {
            let choices: Vec<usize> = letters.iter().copied().filter(|&k| Some(k) != tokens.last().copied()).collect();
            tokens.push(choices[rng.random_range(0..choices.len())]);
        }

        let mut audio = Vec::with_capacity(per_token * tokens.len());
        for &k in &tokens {
            let f = token_frequencies[k];
            audio.extend((0..per_token).map(|n| {
                let phase = 2.0 * std::f64::consts::PI * f * n as f64 / SAMPLE_RATE as f64;
                (cfg.amplitude * phase.sin()) as f32
            }));
        }
        let audio = AudioClip::new(audio)?;

        let frames = audio.frames_at(cfg.fps).max(1);
        let neutral = Matrix::<S>::zeros(1, 3 * v);
        let mut offsets = Matrix::zeros(frames, 3 * v);
        for t in 0..frames {
            let time = t as f64 / cfg.fps;
            let seg = ((time / cfg.token_seconds + 1e-9).floor() as usize).min(tokens.len() - 1);
            let local = time - seg as f64 * cfg.token_seconds;
            let w = if cfg.fade_seconds > 0.0 {
                (local / cfg.fade_seconds).clamp(0.0, 1.0)
            } else {
                1.0
            };
            let cur = &canonical_poses[tokens[seg]];
            let prev = if seg == 0 { &neutral } else { &canonical_poses[tokens[seg - 1]] };
            let (w, iw) = (S::lit(w), S::lit(1.0 - w));
            for (c, o) in offsets.row_mut(t).iter_mut().enumerate() {
                *o = iw * prev.get(0, c) + w * cur.get(0, c);
            }
        }
        let transcript = Transcript::new(vocabulary.decode(&tokens).text(), &vocabulary)?;
        samples.push(CorpusSample::new(
            format!("synth_{s:04}"),
            audio,
            VertexSequence::new(offsets, cfg.fps)?,
            Some(transcript),
        )?);
    }

    Ok(SyntheticCorpus {
        config: cfg.clone(),
        seed,
        template,
        vocabulary,
        token_frequencies,
        canonical_poses,
        samples,
    })
}
