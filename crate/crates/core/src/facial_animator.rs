//! Audio → per-frame vertex offsets: an audio encoder followed by a causal
//! transformer mesh decoder.
//!
//! The `mock-conv` encoder turns 25 ms Hann-windowed frames (20 ms hop) into
//! log-magnitude spectra, runs a three-frame causal convolution over them
//! (the frozen frontend), projects to the model width and applies causal
//! transformer layers. The `external-asr-adapter` encoder starts from the
//! latents of an external recognizer instead. Either way the encoder output
//! is retimed from its native rate to the video frame rate before decoding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::mesh_corpus::{resample_rows_matrix, AudioClip, FaceMesh, VertexSequence};
use crate::nn::{sinusoidal_positions, BindMode, Bound, Linear, ParamId, ParamStore, TransformerLayer};
use crate::scalar::Scalar;
use crate::speech_recognizer::LatentSequence;
use crate::tensor::Matrix;

/// Samples per analysis frame (25 ms).
pub const FRAME_SAMPLES: usize = 400;
/// Samples between frame starts (20 ms).
pub const HOP_SAMPLES: usize = 320;
pub const FRONTEND_FPS: f64 = 50.0;
pub const SPECTRUM_BINS: usize = FRAME_SAMPLES / 2 + 1;
/// Frames seen by the frontend convolution.
pub const FRONTEND_KERNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    #[default]
    MockConv,
    ExternalAsrAdapter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnimatorConfig {
    /// Model width F1.
    pub feature_dim: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub fps: f64,
    pub vertices: usize,
    pub freeze_feature_frontend: bool,
    pub encoder_kind: EncoderKind,
    pub encoder_layers: usize,
    /// Output channels of the frontend convolution (`mock-conv`).
    pub frontend_channels: usize,
    /// Width of the external latents (`external-asr-adapter`).
    pub adapter_dim: usize,
    /// Multiplies the raw decoder output; `1e-3` makes unit activations
    /// millimetre-sized offsets when meshes are in metres.
    pub offset_scale: f64,
}

impl Default for AnimatorConfig {
    fn default() -> Self {
        Self {
            feature_dim: 64,
            decoder_layers: 4,
            heads: 4,
            ffn_dim: 256,
            fps: 25.0,
            vertices: 50,
            freeze_feature_frontend: true,
            encoder_kind: EncoderKind::MockConv,
            encoder_layers: 1,
            frontend_channels: 64,
            adapter_dim: 1024,
            offset_scale: 1e-3,
        }
    }
}

impl AnimatorConfig {
    /// wav2vec 2.0 large geometry: 24 blocks of width 1024, 16 heads, inner
    /// width 4096, 512 frontend channels. Decoder depth is a free choice.
    pub fn full_scale(vertices: usize, fps: f64) -> Self {
        Self {
            feature_dim: 1024,
            heads: 16,
            ffn_dim: 4096,
            encoder_layers: 24,
            frontend_channels: 512,
            vertices,
            fps,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.heads == 0 || self.feature_dim % self.heads != 0 {
            return fail(format!("feature_dim {} is not divisible by {} heads", self.feature_dim, self.heads));
        }
        if self.decoder_layers == 0 {
            return fail("decoder_layers must be at least 1".into());
        }
        if self.ffn_dim == 0 || self.frontend_channels == 0 || self.adapter_dim == 0 {
            return fail("layer widths must be positive".into());
        }
        if self.vertices < 4 {
            return fail(format!("need at least 4 vertices, got {}", self.vertices));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return fail(format!("fps must be positive, got {}", self.fps));
        }
        if !(self.offset_scale.is_finite() && self.offset_scale > 0.0) {
            return fail(format!("offset_scale must be positive, got {}", self.offset_scale));
        }
        Ok(())
    }
}

/// Encoder output, `T × F1` on the video timeline.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence<S> {
    values: Matrix<S>,
    fps: f64,
}

impl<S: Scalar> FeatureSequence<S> {
    pub fn new(values: Matrix<S>, fps: f64) -> Result<Self> {
        if values.rows() == 0 {
            return Err(Error::ShapeMismatch("feature sequence needs at least one frame".into()));
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
}

/// Number of analysis frames in `samples` samples; zero when shorter than one frame.
pub fn frontend_frames(samples: usize) -> usize {
    if samples < FRAME_SAMPLES {
        0
    } else {
        (samples - FRAME_SAMPLES) / HOP_SAMPLES + 1
    }
}

/// `ln(1 + |X|)` of Hann-windowed frames, `frames × SPECTRUM_BINS`.
pub fn log_spectrogram<S: Scalar>(audio: &AudioClip) -> Result<Matrix<S>> {
    let frames = frontend_frames(audio.len());
    if frames == 0 {
        return Err(Error::AudioTooShort {
            samples: audio.len(),
            required: FRAME_SAMPLES,
        });
    }
    let fft = FftPlanner::<f64>::new().plan_fft_forward(FRAME_SAMPLES);
    let window: Vec<f64> = (0..FRAME_SAMPLES)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / FRAME_SAMPLES as f64).cos())
        .collect();
    let mut out = Matrix::zeros(frames, SPECTRUM_BINS);
    let mut buf = vec![Complex::new(0.0, 0.0); FRAME_SAMPLES];
    for f in 0..frames {
        let chunk = &audio.samples()[f * HOP_SAMPLES..f * HOP_SAMPLES + FRAME_SAMPLES];
        for ((b, &x), w) in buf.iter_mut().zip(chunk).zip(&window) {
            *b = Complex::new(x as f64 * w, 0.0);
        }
        fft.process(&mut buf);
        for (dst, c) in out.row_mut(f).iter_mut().zip(&buf[..SPECTRUM_BINS]) {
            *dst = S::lit(c.norm().ln_1p());
        }
    }
    Ok(out)
}

/// Encoder input on its native timeline plus the target frame count.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderInput<S> {
    pub features: Matrix<S>,
    pub native_fps: f64,
    /// Output frames, `round(duration × fps)`.
    pub frames: usize,
}

#[derive(Debug, Clone)]
pub struct FacialAnimator {
    config: AnimatorConfig,
    frontend: Option<Linear>,
    projection: Linear,
    encoder: Vec<TransformerLayer>,
    decoder: Vec<TransformerLayer>,
    output: Linear,
}

impl FacialAnimator {
    /// Registers every parameter under `animator.` in `store`.
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, config: AnimatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f1 = config.feature_dim;
        let (frontend, projection) = match config.encoder_kind {
            EncoderKind::MockConv => {
                let conv = Linear::new(
                    store,
                    &mut rng,
                    "animator.frontend",
                    FRONTEND_KERNEL * SPECTRUM_BINS,
                    config.frontend_channels,
                );
                if config.freeze_feature_frontend {
                    for id in conv.params() {
                        store.set_trainable(id, false);
                    }
                }
                let proj = Linear::new(store, &mut rng, "animator.projection", config.frontend_channels, f1);
                (Some(conv), proj)
            }
            EncoderKind::ExternalAsrAdapter => (
                None,
                Linear::new(store, &mut rng, "animator.projection", config.adapter_dim, f1),
            ),
        };
        let encoder = (0..config.encoder_layers)
            .map(|i| {
                TransformerLayer::new(
                    store,
                    &mut rng,
                    &format!("animator.encoder.{i}"),
                    f1,
                    config.heads,
                    config.ffn_dim,
                    true,
                )
            })
            .collect::<Result<_>>()?;
        let decoder = (0..config.decoder_layers)
            .map(|i| {
                TransformerLayer::new(
                    store,
                    &mut rng,
                    &format!("animator.decoder.{i}"),
                    f1,
                    config.heads,
                    config.ffn_dim,
                    true,
                )
            })
            .collect::<Result<_>>()?;
        let output = Linear::zeroed(store, "animator.output", f1, 3 * config.vertices);
        Ok(Self {
            config,
            frontend,
            projection,
            encoder,
            decoder,
            output,
        })
    }

    pub fn config(&self) -> &AnimatorConfig {
        &self.config
    }

    /// Parameters of the convolutional frontend (empty for the adapter encoder).
    pub fn frontend_params(&self) -> Vec<ParamId> {
        self.frontend.iter().flat_map(|l| l.params()).collect()
    }

    pub fn output_layer(&self) -> Linear {
        self.output
    }

    pub fn decoder_layer(&self, index: usize) -> &TransformerLayer {
        &self.decoder[index]
    }

    /// Spectrogram input for the `mock-conv` encoder.
    pub fn audio_input<S: Scalar>(&self, audio: &AudioClip) -> Result<EncoderInput<S>> {
        if self.config.encoder_kind != EncoderKind::MockConv {
            return Err(Error::Config(
                "the external-asr-adapter encoder takes recognizer latents; use latent_input".into(),
            ));
        }
        Ok(EncoderInput {
            features: log_spectrogram(audio)?,
            native_fps: FRONTEND_FPS,
            frames: audio.frames_at(self.config.fps).max(1),
        })
    }

    /// Recognizer-latent input for the `external-asr-adapter` encoder.
    pub fn latent_input<S: Scalar>(&self, latents: &LatentSequence<f64>, audio: &AudioClip) -> Result<EncoderInput<S>> {
        if self.config.encoder_kind != EncoderKind::ExternalAsrAdapter {
            return Err(Error::Config("the mock-conv encoder takes audio; use audio_input".into()));
        }
        if latents.dim() != self.config.adapter_dim {
            return Err(Error::ShapeMismatch(format!(
                "recognizer latents have width {}, adapter expects {}",
                latents.dim(),
                self.config.adapter_dim
            )));
        }
        Ok(EncoderInput {
            features: latents.values().cast(),
            native_fps: latents.fps(),
            frames: audio.frames_at(self.config.fps).max(1),
        })
    }

    /// Encoder graph: `T × F1` features on the video timeline.
    pub fn encode<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, input: &EncoderInput<S>) -> Var {
        let x = tape.constant(input.features.clone());
        let h = match &self.frontend {
            Some(conv) => {
                let window = tape.causal_unfold(x, FRONTEND_KERNEL);
                let c = conv.forward(tape, p, window);
                tape.gelu(c)
            }
            None => x,
        };
        let mut h = self.projection.forward(tape, p, h);
        for layer in &self.encoder {
            h = layer.forward(tape, p, h);
        }
        let retime = resample_rows_matrix::<S>(input.features.rows(), input.native_fps, input.frames, self.config.fps);
        let retime = tape.constant(retime);
        tape.matmul(retime, h)
    }

    /// Decoder layer `layer_index` on its own: masked self-attention and
    /// feed-forward, each with a residual connection and normalization.
    pub fn causal_self_attention_block<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, x: Var, layer_index: usize) -> Var {
        self.decoder[layer_index].forward(tape, p, x)
    }

    /// Decoder graph: `T × 3V` offsets from `T × F1` features.
    pub fn decode<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, x: Var) -> Var {
        let (t, f1) = tape.value(x).shape();
        let positions = sinusoidal_positions::<S>(t, f1);
        let mut h = tape.add_const(x, &positions);
        for i in 0..self.decoder.len() {
            h = self.causal_self_attention_block(tape, p, h, i);
        }
        let raw = self.output.forward(tape, p, h);
        tape.scale(raw, S::lit(self.config.offset_scale))
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, input: &EncoderInput<S>) -> Var {
        let x = self.encode(tape, p, input);
        self.decode(tape, p, x)
    }

    pub fn encode_audio<S: Scalar>(&self, store: &ParamStore<S>, audio: &AudioClip) -> Result<FeatureSequence<S>> {
        let input = self.audio_input(audio)?;
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, BindMode::Inference);
        let x = self.encode(&mut tape, &p, &input);
        FeatureSequence::new(tape.value(x).clone(), self.config.fps)
    }

    pub fn decode_mesh<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        x: &FeatureSequence<S>,
        template: &FaceMesh<S>,
    ) -> Result<VertexSequence<S>> {
        self.check_template(template)?;
        if x.values().cols() != self.config.feature_dim {
            return Err(Error::ShapeMismatch(format!(
                "features have width {}, decoder expects {}",
                x.values().cols(),
                self.config.feature_dim
            )));
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, BindMode::Inference);
        let xv = tape.constant(x.values().clone());
        let y = self.decode(&mut tape, &p, xv);
        VertexSequence::new(tape.value(y).clone(), self.config.fps)
    }

    pub fn animate<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        audio: &AudioClip,
        template: &FaceMesh<S>,
    ) -> Result<VertexSequence<S>> {
        let input = self.audio_input(audio)?;
        self.animate_input(store, &input, template)
    }

    pub fn animate_input<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        input: &EncoderInput<S>,
        template: &FaceMesh<S>,
    ) -> Result<VertexSequence<S>> {
        self.check_template(template)?;
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, BindMode::Inference);
        let y = self.forward(&mut tape, &p, input);
        VertexSequence::new(tape.value(y).clone(), self.config.fps)
    }

    pub fn check_template<S: Scalar>(&self, template: &FaceMesh<S>) -> Result<()> {
        if template.vertex_count() != self.config.vertices {
            return Err(Error::ShapeMismatch(format!(
                "template has {} vertices, animator was built for {}",
                template.vertex_count(),
                self.config.vertices
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_tape_gradients;
    use crate::losses::graph;
    use crate::optim::{Adam, AdamConfig};
    use rand::Rng;
    use std::collections::BTreeMap;

    fn tiny_config() -> AnimatorConfig {
        AnimatorConfig {
            feature_dim: 8,
            decoder_layers: 2,
            heads: 2,
            ffn_dim: 16,
            vertices: 4,
            frontend_channels: 6,
            ..AnimatorConfig::default()
        }
    }

    fn tone(seconds: f64, hz: f64) -> AudioClip {
        let n = (seconds * 16_000.0) as usize;
        AudioClip::new(
            (0..n)
                .map(|i| (0.5 * (2.0 * std::f64::consts::PI * hz * i as f64 / 16_000.0).sin()) as f32)
                .collect(),
        )
        .unwrap()
    }

    fn template(v: usize) -> FaceMesh<f64> {
        let verts = Matrix::from_fn(v, 3, |r, c| (r * 3 + c) as f64 * 0.01);
        FaceMesh::new(verts, vec![], BTreeMap::from([("lips".to_string(), vec![0, 1])])).unwrap()
    }

    fn randomize_output(store: &mut ParamStore<f64>, anim: &FacialAnimator, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for id in anim.output_layer().params() {
            for x in store.get_mut(id).as_mut_slice() {
                *x = rng.random_range(-0.5..0.5);
            }
        }
    }

    #[test]
    fn one_second_gives_twenty_five_frames() {
        let mut store = ParamStore::<f64>::new();
        let anim = FacialAnimator::new(&mut store, tiny_config(), 1).unwrap();
        let clip = tone(1.0, 440.0);
        let feats = anim.encode_audio(&store, &clip).unwrap();
        assert_eq!(feats.values().shape(), (25, 8));
        assert_eq!(feats, anim.encode_audio(&store, &clip).unwrap());
    }

    #[test]
    fn short_audio_is_rejected() {
        let mut store = ParamStore::<f64>::new();
        let anim = FacialAnimator::new(&mut store, tiny_config(), 1).unwrap();
        let clip = AudioClip::new(vec![0.0; 399]).unwrap();
        assert!(matches!(anim.encode_audio(&store, &clip), Err(Error::AudioTooShort { .. })));
    }

    #[test]
    fn heads_must_divide_width() {
        let mut store = ParamStore::<f64>::new();
        let cfg = AnimatorConfig { heads: 3, ..tiny_config() };
        assert!(matches!(FacialAnimator::new(&mut store, cfg, 1), Err(Error::Config(_))));
    }

    #[test]
    fn zero_output_projection_gives_zero_offsets() {
        let mut store = ParamStore::<f64>::new();
        let anim = FacialAnimator::new(&mut store, tiny_config(), 2).unwrap();
        for t in [1usize, 3, 17] {
            let x = FeatureSequence::new(Matrix::from_fn(t, 8, |r, c| (r + c) as f64 * 0.3 - 1.0), 25.0).unwrap();
            let y = anim.decode_mesh(&store, &x, &template(4)).unwrap();
            assert_eq!(y.offsets().shape(), (t, 12));
            assert!(y.offsets().as_slice().iter().all(|&v| v == 0.0));
        }
        let x = FeatureSequence::new(Matrix::zeros(2, 8), 25.0).unwrap();
        assert!(anim.decode_mesh(&store, &x, &template(5)).is_err());
    }

    #[test]
    fn decoder_is_causal() {
        let mut store = ParamStore::<f64>::new();
        let anim = FacialAnimator::new(&mut store, tiny_config(), 3).unwrap();
        randomize_output(&mut store, &anim, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = Matrix::from_fn(9, 8, |_, _| rng.random_range(-1.0..1.0));
        let run = |x: &Matrix<f64>| {
            let seq = FeatureSequence::new(x.clone(), 25.0).unwrap();
            anim.decode_mesh(&store, &seq, &template(4)).unwrap().into_offsets()
        };
        let y0 = run(&base);
        for t in 0..8 {
            let mut x = base.clone();
            for r in t + 1..9 {
                for v in x.row_mut(r) {
                    *v += rng.random_range(-2.0..2.0);
                }
            }
            let y = run(&x);
            for r in 0..=t {
                for c in 0..12 {
                    assert!((y.get(r, c) - y0.get(r, c)).abs() <= 1e-9);
                }
            }
            assert!(y.max_abs_diff(&y0) > 0.0);
        }
    }

    /// Sets attention weights so that query/key projections vanish and the
    /// value and output projections are known.
    fn hand_set_attention(store: &mut ParamStore<f64>, anim: &FacialAnimator, wv: &Matrix<f64>, bv: &Matrix<f64>) {
        let att = anim.decoder_layer(0).attention;
        for lin in [att.query, att.key] {
            for id in lin.params() {
                store.get_mut(id).as_mut_slice().fill(0.0);
            }
        }
        *store.get_mut(att.value.weight) = wv.clone();
        *store.get_mut(att.value.bias) = bv.clone();
        *store.get_mut(att.output.weight) = Matrix::from_fn(8, 8, |r, c| if r == c { 1.0 } else { 0.0 });
        store.get_mut(att.output.bias).as_mut_slice().fill(0.0);
    }

    #[test]
    fn zero_query_key_gives_causal_prefix_mean() {
        let cfg = AnimatorConfig { heads: 1, ..tiny_config() };
        let mut store = ParamStore::<f64>::new();
        let anim = FacialAnimator::new(&mut store, cfg, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let wv = Matrix::from_fn(8, 8, |_, _| rng.random_range(-1.0..1.0));
        let bv = Matrix::from_fn(1, 8, |_, _| rng.random_range(-1.0..1.0));
        hand_set_attention(&mut store, &anim, &wv, &bv);
        let x = Matrix::from_fn(5, 8, |_, _| rng.random_range(-1.0..1.0));

        let mut tape = Tape::new();
        let p = store.bind(&mut tape, BindMode::Inference);
        let xv = tape.constant(x.clone());
        let att = anim.decoder_layer(0).attention.forward(&mut tape, &p, xv, true);
        let got = tape.value(att);

        let values = x.matmul(&wv).zip_map(&Matrix::from_fn(5, 8, |_, c| bv.get(0, c)), |a, b| a + b);
        for t in 0..5 {
            for c in 0..8 {
                let mean = (0..=t).map(|s| values.get(s, c)).sum::<f64>() / (t + 1) as f64;
                assert!((got.get(t, c) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_frame_attention_is_the_value_projection() {
        let mut store = ParamStore::<f64>::new();
        let anim = FacialAnimator::new(&mut store, tiny_config(), 8).unwrap();
        let att = anim.decoder_layer(0).attention;
        let x = Matrix::from_fn(1, 8, |_, c| c as f64 * 0.25 - 1.0);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, BindMode::Inference);
        let xv = tape.constant(x.clone());
        let out = att.forward(&mut tape, &p, xv, true);
        let add = |m: Matrix<f64>, b: &Matrix<f64>| m.zip_map(b, |a, c| a + c);
        let v = add(x.matmul(store.get(att.value.weight)), store.get(att.value.bias));
        let expected = add(v.matmul(store.get(att.output.weight)), store.get(att.output.bias));
        assert!(tape.value(out).max_abs_diff(&expected) < 1e-12);
    }

    /// Every animator parameter as a leaf, L_rec against a random target.
    fn rec_gradcheck(cfg: AnimatorConfig) {
        let mut store = ParamStore::<f64>::new();
        let anim = FacialAnimator::new(&mut store, cfg, 9).unwrap();
        randomize_output(&mut store, &anim, 10);
        let clip = tone(0.12, 700.0);
        let input: EncoderInput<f64> = anim.audio_input(&clip).unwrap();
        assert_eq!(input.frames, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let target = Matrix::from_fn(3, 12, |_, _| rng.random_range(-1.0..1.0));
        let params: Vec<Matrix<f64>> = store.entries().iter().map(|e| e.value.clone()).collect();
        // a deep graph accumulates forward round-off, so a wider step is safer
        let report = check_tape_gradients(&params, 1e-5, &|tape: &mut Tape<f64>, vars: &[Var]| {
            let p = Bound::from_vars(vars.to_vec());
            let y_hat = anim.forward(tape, &p, &input);
            let y = tape.constant(target.clone());
            graph::rec(tape, y, y_hat, 4)
        });
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn rec_gradient_matches_finite_differences() {
        // unit offset scale keeps the loss O(1) so differences stay above roundoff
        rec_gradcheck(AnimatorConfig {
            freeze_feature_frontend: false,
            frontend_channels: 3,
            offset_scale: 1.0,
            ..tiny_config()
        });
    }

    #[test]
    fn frozen_frontend_is_untouched_by_a_step() {
        let mut store = ParamStore::<f64>::new();
        let anim = FacialAnimator::new(&mut store, tiny_config(), 12).unwrap();
        let before = store.clone();
        let clip = tone(0.3, 500.0);
        let input = anim.audio_input(&clip).unwrap();
        let target = Matrix::filled(input.frames, 12, 1e-3);
        let mut adam = Adam::new(AdamConfig::default(), &store);
        for _ in 0..3 {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, BindMode::Train);
            let y_hat = anim.forward(&mut tape, &p, &input);
            let y = tape.constant(target.clone());
            let loss = graph::rec(&mut tape, y, y_hat, 4);
            let mut grads = tape.backward(loss);
            adam.update(&mut store, &p.take_grads(&mut grads));
        }
        for id in anim.frontend_params() {
            let (a, b) = (store.get(id), before.get(id));
            assert!(a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let out = anim.output_layer().weight;
        assert_ne!(store.get(out), before.get(out));
        let proj = store.id("animator.projection.weight").unwrap();
        assert_ne!(store.get(proj), before.get(proj));
    }

    #[test]
    fn silence_trained_to_neutral_is_constant() {
        let mut store = ParamStore::<f64>::new();
        let anim = FacialAnimator::new(&mut store, tiny_config(), 13).unwrap();
        let clip = AudioClip::new(vec![0.0; 8000]).unwrap();
        let input = anim.audio_input(&clip).unwrap();
        let target = Matrix::zeros(input.frames, 12);
        // start from a non-trivial output so the fit has something to remove
        randomize_output(&mut store, &anim, 14);
        let drift = |store: &ParamStore<f64>| {
            let y = anim.animate(store, &clip, &template(4)).unwrap();
            let first = y.offsets().row(0).to_vec();
            (1..y.frames())
                .flat_map(|t| y.offsets().row(t).iter().zip(&first).map(|(a, b)| (a - b).abs()).collect::<Vec<_>>())
                .fold(0.0, f64::max)
        };
        let initial = drift(&store);
        let mut adam = Adam::new(AdamConfig { lr: 1e-3, ..AdamConfig::default() }, &store);
        for _ in 0..1000 {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, BindMode::Train);
            let y_hat = anim.forward(&mut tape, &p, &input);
            let y = tape.constant(target.clone());
            let rec = graph::rec(&mut tape, y, y_hat, 4);
            // default reconstruction weight; keeps gradients well above the Adam epsilon
            let loss = tape.scale(rec, 1000.0);
            let mut grads = tape.backward(loss);
            adam.update(&mut store, &p.take_grads(&mut grads));
        }
        let last = drift(&store);
        assert!(last < 0.05 * initial, "drift {last} vs initial {initial}");
    }
}
