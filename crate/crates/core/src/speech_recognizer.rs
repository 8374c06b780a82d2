//! Frozen audio → (latents, text) oracle that supplies pseudo-labels for the
//! animator and lip reader.
//!
//! [`MockRecognizer`] classifies each 0.2 s window of a synthetic tone corpus
//! by its spectral peak. [`ExternalRecognizer`] wraps any pretrained model
//! behind a subprocess speaking a small JSON protocol:
//!
//! * request: the clip as 16 kHz mono PCM16 WAV bytes on stdin;
//! * response on stdout:
//!   `{"transcript": "...", "frames": [{"probs": [U floats]}, ...], "latents": "<base64>"}`
//!   where `latents` holds `T' × F2` little-endian `f32` values, row-major,
//!   and `T'` is the number of frames.

use std::io::Write as _;
use std::process::{Command, Stdio};

use base64::Engine as _;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::autograd::softmax_in_place;
use crate::error::{Error, Result};
use crate::mesh_corpus::{resample_rows, wav_bytes, AudioClip, SyntheticCorpus, Transcript, Vocabulary, SAMPLE_RATE};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

const SIMPLEX_TOL: f64 = 1e-6;

/// Per-frame feature vectors, `T × F`, on a timeline of `fps` frames per second.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence<S> {
    values: Matrix<S>,
    fps: f64,
}

impl<S: Scalar> LatentSequence<S> {
    pub fn new(values: Matrix<S>, fps: f64) -> Result<Self> {
        if values.rows() == 0 || values.cols() == 0 {
            return Err(Error::ShapeMismatch(format!("empty latent sequence {:?}", values.shape())));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::Config(format!("fps must be positive, got {fps}")));
        }
        if let Some(i) = values.as_slice().iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { values, fps })
    }

    pub fn values(&self) -> &Matrix<S> {
        &self.values
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn frames(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    /// Linear-interpolation retiming onto `frames` rows at `fps`.
    pub fn resample(&self, frames: usize, fps: f64) -> Self {
        Self {
            values: resample_rows(&self.values, self.fps, frames, fps),
            fps,
        }
    }

    pub fn cast<T: Scalar>(&self) -> LatentSequence<T> {
        LatentSequence {
            values: self.values.cast(),
            fps: self.fps,
        }
    }
}

/// Per-frame probabilities over a vocabulary, `T × U`.
#[derive(Debug, Clone, PartialEq)]
pub struct TextDistribution<S> {
    probs: Matrix<S>,
}

impl<S: Scalar> TextDistribution<S> {
    /// Rows must be non-negative and sum to one within `1e-6`.
    pub fn new(probs: Matrix<S>) -> Result<Self> {
        if probs.rows() == 0 || probs.cols() < 2 {
            return Err(Error::ShapeMismatch(format!("text distribution shape {:?}", probs.shape())));
        }
        for r in 0..probs.rows() {
            let row = probs.row(r);
            if row.iter().any(|p| !p.is_finite() || *p < S::zero()) {
                return Err(Error::ShapeMismatch(format!("row {r} has a negative or non-finite entry")));
            }
            let s: f64 = row.iter().map(|p| p.as_f64()).sum();
            if (s - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::ShapeMismatch(format!("row {r} sums to {s}")));
            }
        }
        Ok(Self { probs })
    }

    /// Row-wise softmax of raw scores.
    pub fn from_logits(logits: &Matrix<S>) -> Result<Self> {
        let mut probs = logits.clone();
        for r in 0..probs.rows() {
            softmax_in_place(probs.row_mut(r));
        }
        Self::new(probs)
    }

    pub fn uniform(frames: usize, symbols: usize) -> Result<Self> {
        Self::new(Matrix::filled(frames, symbols, S::one() / S::from_usize_lossy(symbols)))
    }

    pub fn probs(&self) -> &Matrix<S> {
        &self.probs
    }

    pub fn frames(&self) -> usize {
        self.probs.rows()
    }

    pub fn symbols(&self) -> usize {
        self.probs.cols()
    }

    /// Most probable symbol per frame, lowest index on ties.
    pub fn argmax_path(&self) -> Vec<usize> {
        (0..self.frames())
            .map(|r| {
                let row = self.probs.row(r);
                let mut best = 0;
                for (i, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    /// Retimes by linear interpolation; convex weights keep rows on the simplex.
    pub fn resample(&self, src_fps: f64, frames: usize, fps: f64) -> Self {
        Self {
            probs: resample_rows(&self.probs, src_fps, frames, fps),
        }
    }

    pub fn cast<T: Scalar>(&self) -> TextDistribution<T> {
        TextDistribution { probs: self.probs.cast() }
    }
}

/// Per-frame argmax, then merge runs of the same symbol, then drop blanks.
pub fn greedy_ctc_decode<S: Scalar>(dist: &TextDistribution<S>, vocab: &Vocabulary) -> Transcript {
    let path = dist.argmax_path();
    let mut kept = Vec::new();
    let mut prev = None;
    for &k in &path {
        if Some(k) != prev && k != vocab.blank_index() {
            kept.push(k);
        }
        prev = Some(k);
    }
    vocab.decode(&kept)
}

/// Everything a recognizer says about one clip, on its native frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct RecognizerOutput {
    pub latents: LatentSequence<f64>,
    pub logits: TextDistribution<f64>,
    pub transcript: Transcript,
}

impl RecognizerOutput {
    pub fn native_fps(&self) -> f64 {
        self.latents.fps()
    }

    /// Latents and text distribution retimed onto `frames` rows at `fps`.
    pub fn at_fps(&self, frames: usize, fps: f64) -> (LatentSequence<f64>, TextDistribution<f64>) {
        (
            self.latents.resample(frames, fps),
            self.logits.resample(self.native_fps(), frames, fps),
        )
    }
}

/// A frozen speech recognizer. Implementations never change after
/// construction.
pub trait SpeechRecognizer {
    fn vocabulary(&self) -> &Vocabulary;

    /// Width of the latents returned by [`Self::recognize`].
    fn latent_dim(&self) -> usize;

    fn recognize(&self, audio: &AudioClip) -> Result<RecognizerOutput>;

    /// Hex SHA-256 over every parameter the recognizer holds.
    fn parameter_digest(&self) -> String;
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Window length the mock classifies at once.
pub const MOCK_WINDOW_SECONDS: f64 = 0.2;
/// Native output rate of the mock.
pub const MOCK_FPS: f64 = 50.0;
const MOCK_EPSILON: f64 = 1e-3;
/// RMS below which a window counts as silence.
const SILENCE_RMS: f64 = 1e-3;

/// Tone-classifying recognizer for the synthetic corpus.
///
/// Each 0.2 s window is classified by the peak of its spectrum. Its frames
/// (ten at 50 Hz) put mass `1 − ε` on the token, except the last, which
/// favours the blank so that repeated tokens stay separable. Latents are a
/// fixed seeded embedding of the token, zero for silence.
#[derive(Debug, Clone)]
pub struct MockRecognizer {
    vocabulary: Vocabulary,
    /// Tone per vocabulary index; ignored at the blank.
    frequencies: Vec<f64>,
    embeddings: Matrix<f64>,
}

impl MockRecognizer {
    pub fn new(vocabulary: Vocabulary, frequencies: Vec<f64>, latent_dim: usize, seed: u64) -> Result<Self> {
        if frequencies.len() != vocabulary.len() {
            return Err(Error::Config(format!(
                "{} tone frequencies for {} symbols",
                frequencies.len(),
                vocabulary.len()
            )));
        }
        if latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blank = vocabulary.blank_index();
        let embeddings = Matrix::from_fn(vocabulary.len(), latent_dim, |r, _| {
            let x: f64 = rng.random_range(-1.0..1.0);
            if r == blank {
                0.0
            } else {
                x
            }
        });
        Ok(Self {
            vocabulary,
            frequencies,
            embeddings,
        })
    }

    pub fn for_corpus<S: Scalar>(corpus: &SyntheticCorpus<S>, latent_dim: usize, seed: u64) -> Result<Self> {
        Self::new(corpus.vocabulary.clone(), corpus.token_frequencies.clone(), latent_dim, seed)
    }

    /// Latent row emitted for vocabulary index `k` (zeros for the blank).
    pub fn embedding(&self, k: usize) -> &[f64] {
        self.embeddings.row(k)
    }

    fn classify(&self, window: &[f32], fft: &dyn rustfft::Fft<f64>, n: usize) -> Option<usize> {
        let rms = (window.iter().map(|&x| (x as f64).powi(2)).sum::<f64>() / n as f64).sqrt();
        if rms < SILENCE_RMS {
            return None;
        }
        let mut buf: Vec<Complex<f64>> = (0..n)
            .map(|i| Complex::new(window.get(i).map_or(0.0, |&x| x as f64), 0.0))
            .collect();
        fft.process(&mut buf);
        let peak_bin = (1..n / 2)
            .max_by(|&a, &b| buf[a].norm_sqr().total_cmp(&buf[b].norm_sqr()))
            .unwrap_or(0);
        let peak_hz = peak_bin as f64 * SAMPLE_RATE as f64 / n as f64;
        let blank = self.vocabulary.blank_index();
        (0..self.vocabulary.len())
            .filter(|&k| k != blank)
            .min_by(|&a, &b| {
                (self.frequencies[a] - peak_hz)
                    .abs()
                    .total_cmp(&(self.frequencies[b] - peak_hz).abs())
            })
    }
}

impl SpeechRecognizer for MockRecognizer {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    fn latent_dim(&self) -> usize {
        self.embeddings.cols()
    }

    fn recognize(&self, audio: &AudioClip) -> Result<RecognizerOutput> {
        let hop = (SAMPLE_RATE as f64 / MOCK_FPS).round() as usize;
        let window = (MOCK_WINDOW_SECONDS * SAMPLE_RATE as f64).round() as usize;
        let per_window = window / hop;
        let frames = ((audio.len() as f64 / hop as f64).round() as usize).max(1);
        let fft = FftPlanner::<f64>::new().plan_fft_forward(window);

        let u = self.vocabulary.len();
        let blank = self.vocabulary.blank_index();
        let mut probs = Matrix::zeros(frames, u);
        let mut latents = Matrix::zeros(frames, self.latent_dim());
        let windows = frames.div_ceil(per_window);
        for w in 0..windows {
            let start = (w * window).min(audio.len());
            let end = ((w + 1) * window).min(audio.len());
            let token = self.classify(&audio.samples()[start..end], fft.as_ref(), window);
            for n in w * per_window..((w + 1) * per_window).min(frames) {
                let row = probs.row_mut(n);
                match token {
                    None => row.fill(1.0 / u as f64),
                    Some(k) => {
                        let hot = if n % per_window == per_window - 1 { blank } else { k };
                        row.fill(MOCK_EPSILON / (u - 1) as f64);
                        row[hot] = 1.0 - MOCK_EPSILON;
                        latents.row_mut(n).copy_from_slice(self.embeddings.row(k));
                    }
                }
            }
        }
        let logits = TextDistribution::new(probs)?;
        let transcript = greedy_ctc_decode(&logits, &self.vocabulary);
        Ok(RecognizerOutput {
            latents: LatentSequence::new(latents, MOCK_FPS)?,
            logits,
            transcript,
        })
    }

    fn parameter_digest(&self) -> String {
        let mut h = Sha256::new();
        for &f in &self.frequencies {
            h.update(f.to_le_bytes());
        }
        for &x in self.embeddings.as_slice() {
            h.update(x.to_le_bytes());
        }
        h.update(self.vocabulary.symbols().iter().collect::<String>().as_bytes());
        hex(&h.finalize())
    }
}

#[derive(Debug, Deserialize)]
struct AdapterFrame {
    probs: Vec<f64>,
}

#[derive(Debug, Deserialize)]
struct AdapterResponse {
    transcript: String,
    frames: Vec<AdapterFrame>,
    latents: String,
}

/// Recognizer backed by an external process (see the module docs for the
/// protocol). Latents wider or narrower than `latent_dim` are mapped through
/// a frozen random projection seeded by `seed` and the source width.
#[derive(Debug, Clone)]
pub struct ExternalRecognizer {
    program: String,
    args: Vec<String>,
    vocabulary: Vocabulary,
    latent_dim: usize,
    seed: u64,
}

impl ExternalRecognizer {
    pub fn new(program: impl Into<String>, args: Vec<String>, vocabulary: Vocabulary, latent_dim: usize, seed: u64) -> Self {
        Self {
            program: program.into(),
            args,
            vocabulary,
            latent_dim,
            seed,
        }
    }

    fn projection(&self, from: usize) -> Matrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (from as u64).rotate_left(32));
        let scale = (1.0 / from as f64).sqrt();
        Matrix::from_fn(from, self.latent_dim, |_, _| rng.random_range(-1.0..1.0) * scale * 3f64.sqrt())
    }

    fn call(&self, wav: &[u8]) -> Result<Vec<u8>> {
        let unavailable = |e: String| Error::BackendUnavailable(format!("{}: {e}", self.program));
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| unavailable(e.to_string()))?;
        let mut stdin = child.stdin.take().expect("piped stdin");
        let payload = wav.to_vec();
        let writer = std::thread::spawn(move || stdin.write_all(&payload));
        let out = child.wait_with_output().map_err(|e| unavailable(e.to_string()))?;
        // a backend may legitimately stop reading early
        let _ = writer.join();
        if !out.status.success() {
            return Err(unavailable(format!(
                "exited with {}: {}",
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        Ok(out.stdout)
    }

    /// Decodes an adapter response for a clip lasting `duration` seconds.
    pub fn parse_response(&self, body: &[u8], duration: f64) -> Result<RecognizerOutput> {
        let resp: AdapterResponse = serde_json::from_slice(body)?;
        let t = resp.frames.len();
        let u = self.vocabulary.len();
        if t == 0 {
            return Err(Error::BackendUnavailable("response has no frames".into()));
        }
        let mut probs = Matrix::zeros(t, u);
        for (r, frame) in resp.frames.iter().enumerate() {
            if frame.probs.len() != u {
                return Err(Error::ShapeMismatch(format!(
                    "frame {r} has {} probabilities, vocabulary has {u}",
                    frame.probs.len()
                )));
            }
            let s: f64 = frame.probs.iter().sum();
            if !(s > 0.0) || frame.probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::ShapeMismatch(format!("frame {r} is not a distribution")));
            }
            for (dst, p) in probs.row_mut(r).iter_mut().zip(&frame.probs) {
                *dst = p / s;
            }
        }
        let raw = base64::engine::general_purpose::STANDARD
            .decode(resp.latents.as_bytes())
            .map_err(|e| Error::BackendUnavailable(format!("latents are not base64: {e}")))?;
        if raw.is_empty() || raw.len() % (4 * t) != 0 {
            return Err(Error::ShapeMismatch(format!("{} latent bytes for {t} frames", raw.len())));
        }
        let width = raw.len() / (4 * t);
        let values: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let mut latents = Matrix::from_vec(t, width, values);
        if width != self.latent_dim {
            latents = latents.matmul(&self.projection(width));
        }
        let fps = t as f64 / duration;
        Ok(RecognizerOutput {
            latents: LatentSequence::new(latents, fps)?,
            logits: TextDistribution::new(probs)?,
            transcript: Transcript::new(resp.transcript, &self.vocabulary)?,
        })
    }
}

impl SpeechRecognizer for ExternalRecognizer {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn recognize(&self, audio: &AudioClip) -> Result<RecognizerOutput> {
        let body = self.call(&wav_bytes(audio))?;
        self.parse_response(&body, audio.duration())
    }

    fn parameter_digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.program.as_bytes());
        for a in &self.args {
            h.update([0]);
            h.update(a.as_bytes());
        }
        h.update(self.seed.to_le_bytes());
        h.update((self.latent_dim as u64).to_le_bytes());
        hex(&h.finalize())
    }
}
