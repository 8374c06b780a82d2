//! Lip motion → per-frame text distributions.
//!
//! Lip-region offsets are scaled, embedded by one affine layer, given
//! sinusoidal positions and passed through bidirectional transformer layers
//! to produce the lip latents `l`. A fully connected text decoder maps `l`
//! to features `e`, and a projection plus softmax gives `p`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::mesh_corpus::{FaceMesh, Transcript, VertexSequence, Vocabulary, LIPS};
use crate::nn::{sinusoidal_positions, BindMode, Bound, Linear, ParamStore, TransformerLayer};
use crate::scalar::Scalar;
use crate::speech_recognizer::{greedy_ctc_decode, LatentSequence, TextDistribution};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LipReaderConfig {
    pub lip_region: String,
    /// Latent width F_lat; must match the recognizer latents.
    pub embed_dim: usize,
    pub encoder_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Vocabulary size U, blank included.
    pub vocab_size: usize,
    /// Multiplies lip offsets before the embedding; `1e3` reads metres as
    /// millimetres.
    pub input_scale: f64,
}

impl Default for LipReaderConfig {
    fn default() -> Self {
        Self {
            lip_region: LIPS.into(),
            embed_dim: 64,
            encoder_layers: 2,
            heads: 4,
            ffn_dim: 256,
            vocab_size: 7,
            input_scale: 1e3,
        }
    }
}

impl LipReaderConfig {
    /// Six encoder layers of width 1024 over a 32-symbol vocabulary.
    pub fn full_scale() -> Self {
        Self {
            embed_dim: 1024,
            encoder_layers: 6,
            heads: 16,
            ffn_dim: 4096,
            vocab_size: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.ffn_dim == 0 || self.vocab_size < 2 {
            return Err(Error::Config("ffn_dim must be positive and vocab_size at least 2".into()));
        }
        if !(self.input_scale.is_finite() && self.input_scale > 0.0) {
            return Err(Error::Config(format!("input_scale must be positive, got {}", self.input_scale)));
        }
        Ok(())
    }
}

/// Lip-vertex offsets flattened per frame, `T × 3·|lips|`.
#[derive(Debug, Clone, PartialEq)]
pub struct LipSequence<S> {
    values: Matrix<S>,
}

impl<S: Scalar> LipSequence<S> {
    pub fn new(values: Matrix<S>) -> Result<Self> {
        if values.rows() == 0 || values.cols() == 0 || values.cols() % 3 != 0 {
            return Err(Error::ShapeMismatch(format!("lip sequence shape {:?}", values.shape())));
        }
        if let Some(i) = values.as_slice().iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Matrix<S> {
        &self.values
    }

    pub fn frames(&self) -> usize {
        self.values.rows()
    }
}

/// Offset columns of the named region, three per vertex in region order.
pub fn region_columns<S: Scalar>(mesh: &FaceMesh<S>, region: &str) -> Result<Vec<usize>> {
    Ok(mesh.region(region)?.iter().flat_map(|&v| [3 * v, 3 * v + 1, 3 * v + 2]).collect())
}

/// Row `t` is the concatenation of `offsets[t, v, :]` over the lip vertices.
pub fn select_lips<S: Scalar>(offsets: &VertexSequence<S>, mesh: &FaceMesh<S>) -> Result<LipSequence<S>> {
    offsets.check_mesh(mesh)?;
    let cols = region_columns(mesh, LIPS)?;
    let m = offsets.offsets();
    LipSequence::new(Matrix::from_fn(m.rows(), cols.len(), |r, c| m.get(r, cols[c])))
}

#[derive(Debug, Clone)]
pub struct LipReader {
    config: LipReaderConfig,
    vocabulary: Vocabulary,
    lip_columns: Vec<usize>,
    embed: Linear,
    encoder: Vec<TransformerLayer>,
    text_decoder: Linear,
    projection: Linear,
}

/// Graph outputs of one lip-reader pass.
#[derive(Debug, Clone, Copy)]
pub struct LipReadVars {
    /// `T × F_lat`.
    pub latents: Var,
    /// Pre-softmax scores, `T × U`.
    pub logits: Var,
}

impl LipReader {
    /// Registers every parameter under `lip_reader.` in `store`.
    /// `recognizer_latent_dim` must equal `config.embed_dim`.
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        config: LipReaderConfig,
        vocabulary: Vocabulary,
        mesh: &FaceMesh<S>,
        recognizer_latent_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if recognizer_latent_dim != config.embed_dim {
            return Err(Error::Config(format!(
                "lip latents have width {} but recognizer latents have width {recognizer_latent_dim}",
                config.embed_dim
            )));
        }
        if vocabulary.len() != config.vocab_size {
            return Err(Error::Config(format!(
                "vocab_size is {} but the vocabulary has {} symbols",
                config.vocab_size,
                vocabulary.len()
            )));
        }
        let lip_columns = region_columns(mesh, &config.lip_region)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let embed = Linear::new(store, &mut rng, "lip_reader.embed", lip_columns.len(), d);
        let encoder = (0..config.encoder_layers)
            .map(|i| {
                TransformerLayer::new(
                    store,
                    &mut rng,
                    &format!("lip_reader.encoder.{i}"),
                    d,
                    config.heads,
                    config.ffn_dim,
                    false,
                )
            })
            .collect::<Result<_>>()?;
        let text_decoder = Linear::new(store, &mut rng, "lip_reader.text_decoder", d, d);
        let projection = Linear::new(store, &mut rng, "lip_reader.projection", d, config.vocab_size);
        Ok(Self {
            config,
            vocabulary,
            lip_columns,
            embed,
            encoder,
            text_decoder,
            projection,
        })
    }

    pub fn config(&self) -> &LipReaderConfig {
        &self.config
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    pub fn projection(&self) -> Linear {
        self.projection
    }

    /// Offset columns feeding the reader.
    pub fn lip_columns(&self) -> &[usize] {
        &self.lip_columns
    }

    /// Lip latents from `T × 3·|lips|` lip offsets.
    pub fn encode<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, lips: Var) -> Var {
        let scaled = tape.scale(lips, S::lit(self.config.input_scale));
        let h = self.embed.forward(tape, p, scaled);
        let (t, d) = tape.value(h).shape();
        let mut h = tape.add_const(h, &sinusoidal_positions(t, d));
        for layer in &self.encoder {
            h = layer.forward(tape, p, h);
        }
        h
    }

    /// Pre-softmax scores from lip latents.
    pub fn decode<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, latents: Var) -> Var {
        let e = self.text_decoder.forward(tape, p, latents);
        let e = tape.gelu(e);
        self.projection.forward(tape, p, e)
    }

    /// Full pass from `T × 3V` offsets; only the lip columns are read.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, offsets: Var) -> LipReadVars {
        let lips = tape.select_cols(offsets, &self.lip_columns);
        let latents = self.encode(tape, p, lips);
        let logits = self.decode(tape, p, latents);
        LipReadVars { latents, logits }
    }

    fn check_width(&self, cols: usize) -> Result<()> {
        if cols != self.lip_columns.len() {
            return Err(Error::ShapeMismatch(format!(
                "lip sequence has {cols} columns, reader expects {}",
                self.lip_columns.len()
            )));
        }
        Ok(())
    }

    pub fn encode_lips<S: Scalar>(&self, store: &ParamStore<S>, lips: &LipSequence<S>, fps: f64) -> Result<LatentSequence<S>> {
        self.check_width(lips.values().cols())?;
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, BindMode::Inference);
        let x = tape.constant(lips.values().clone());
        let l = self.encode(&mut tape, &p, x);
        LatentSequence::new(tape.value(l).clone(), fps)
    }

    pub fn decode_text<S: Scalar>(&self, store: &ParamStore<S>, latents: &LatentSequence<S>) -> Result<TextDistribution<S>> {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, BindMode::Inference);
        let l = tape.constant(latents.values().clone());
        let logits = self.decode(&mut tape, &p, l);
        TextDistribution::from_logits(tape.value(logits))
    }

    pub fn lipread<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        offsets: &VertexSequence<S>,
        mesh: &FaceMesh<S>,
    ) -> Result<(LatentSequence<S>, TextDistribution<S>, Transcript)> {
        offsets.check_mesh(mesh)?;
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, BindMode::Inference);
        let y = tape.constant(offsets.offsets().clone());
        let out = self.forward(&mut tape, &p, y);
        let latents = LatentSequence::new(tape.value(out.latents).clone(), offsets.fps())?;
        let dist = TextDistribution::from_logits(tape.value(out.logits))?;
        let transcript = greedy_ctc_decode(&dist, &self.vocabulary);
        Ok((latents, dist, transcript))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_tape_gradients;
    use crate::losses::{graph, LatentNormalization};
    use rand::Rng;
    use std::collections::BTreeMap;

    fn mesh(lips: Vec<usize>) -> FaceMesh<f64> {
        let verts = Matrix::from_fn(4, 3, |r, c| (r + c) as f64);
        FaceMesh::new(verts, vec![], BTreeMap::from([(LIPS.to_string(), lips)])).unwrap()
    }

    fn tiny() -> LipReaderConfig {
        LipReaderConfig {
            embed_dim: 8,
            encoder_layers: 2,
            heads: 2,
            ffn_dim: 12,
            vocab_size: 3,
            ..LipReaderConfig::default()
        }
    }

    fn reader(store: &mut ParamStore<f64>, lips: Vec<usize>) -> LipReader {
        LipReader::new(store, tiny(), Vocabulary::with_letters("ab").unwrap(), &mesh(lips), 8, 3).unwrap()
    }

    fn random(rows: usize, cols: usize, seed: u64, scale: f64) -> Matrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
    }

    #[test]
    fn selection_follows_region_order() {
        let m = mesh(vec![2]);
        let seq = VertexSequence::new(Matrix::from_fn(3, 12, |r, c| (10 * r + c) as f64), 25.0).unwrap();
        let lips = select_lips(&seq, &m).unwrap();
        for t in 0..3 {
            assert_eq!(lips.values().row(t), &seq.offset(t, 2));
        }
        let zero = VertexSequence::<f64>::zeros(2, 4, 25.0).unwrap();
        assert!(select_lips(&zero, &m).unwrap().values().as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn latent_width_must_match_recognizer() {
        let mut store = ParamStore::<f64>::new();
        let err = LipReader::new(&mut store, tiny(), Vocabulary::with_letters("ab").unwrap(), &mesh(vec![0]), 16, 0);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn lip_losses_never_reach_other_vertices() {
        let mut store = ParamStore::<f64>::new();
        let lr = reader(&mut store, vec![1, 3]);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, BindMode::Train);
        let y_hat = tape.leaf(random(6, 12, 1, 1e-3));
        let out = lr.forward(&mut tape, &p, y_hat);
        let target = tape.constant(random(6, 8, 2, 1.0));
        let lat = graph::lat(&mut tape, target, out.latents, LatentNormalization::FeatureMean);
        let ctc = graph::ctc(&mut tape, out.logits, &[1, 2], 0);
        let total = tape.add(lat, ctc);
        let grads = tape.backward(total);
        let g = grads.get(y_hat).unwrap();
        for r in 0..6 {
            for c in 0..12 {
                let lip = matches!(c / 3, 1 | 3);
                if lip {
                    assert!(g.get(r, c) != 0.0);
                } else {
                    assert_eq!(g.get(r, c), 0.0);
                }
            }
        }
    }

    #[test]
    fn encoder_sees_positions() {
        let mut store = ParamStore::<f64>::new();
        let lr = reader(&mut store, vec![0, 1]);
        for t in [1usize, 4, 9] {
            let lips = LipSequence::new(random(t, 6, 4, 1e-3)).unwrap();
            assert_eq!(lr.encode_lips(&store, &lips, 25.0).unwrap().values().shape(), (t, 8));
        }
        let x = random(5, 6, 5, 1e-3);
        let mut swapped = x.clone();
        swapped.row_mut(1).copy_from_slice(x.row(3));
        swapped.row_mut(3).copy_from_slice(x.row(1));
        let a = lr.encode_lips(&store, &LipSequence::new(x).unwrap(), 25.0).unwrap();
        let b = lr.encode_lips(&store, &LipSequence::new(swapped).unwrap(), 25.0).unwrap();
        for (i, j) in [(1, 3), (3, 1)] {
            let diff: f64 = a.values().row(i).iter().zip(b.values().row(j)).map(|(x, y)| (x - y).abs()).sum();
            assert!(diff > 1e-6);
        }
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let mut store = ParamStore::<f64>::new();
        let cfg = LipReaderConfig { input_scale: 1.0, ..tiny() };
        let lr = LipReader::new(&mut store, cfg, Vocabulary::with_letters("ab").unwrap(), &mesh(vec![0, 2]), 8, 6).unwrap();
        let mut inputs: Vec<Matrix<f64>> = store.entries().iter().map(|e| e.value.clone()).collect();
        inputs.push(random(3, 12, 7, 1.0));
        let target = random(3, 8, 8, 1.0);
        let report = check_tape_gradients(&inputs, 1e-5, &|tape: &mut Tape<f64>, vars: &[Var]| {
            let (params, y) = vars.split_at(vars.len() - 1);
            let p = Bound::from_vars(params.to_vec());
            let out = lr.forward(tape, &p, y[0]);
            let t = tape.constant(target.clone());
            let lat = graph::lat(tape, t, out.latents, LatentNormalization::FeatureMean);
            let ctc = graph::ctc(tape, out.logits, &[2, 1], 0);
            tape.add(lat, ctc)
        });
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn text_distribution_properties() {
        let mut store = ParamStore::<f64>::new();
        let lr = reader(&mut store, vec![0]);
        let l = LatentSequence::new(random(4, 8, 9, 3.0), 25.0).unwrap();
        let d = lr.decode_text(&store, &l).unwrap();
        for r in 0..4 {
            let s: f64 = d.probs().row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        for id in lr.projection().params() {
            store.get_mut(id).as_mut_slice().fill(0.0);
        }
        let u = lr.decode_text(&store, &l).unwrap();
        assert!(u.probs().as_slice().iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));

        let logits = random(3, 5, 10, 4.0);
        let shifted = Matrix::from_fn(3, 5, |r, c| logits.get(r, c) + 17.5 * (r as f64 - 1.0));
        let a = TextDistribution::from_logits(&logits).unwrap();
        let b = TextDistribution::from_logits(&shifted).unwrap();
        assert!(a.probs().max_abs_diff(b.probs()) < 1e-9);
    }

    #[test]
    fn lipread_is_deterministic_and_survives_stillness() {
        let mut store = ParamStore::<f64>::new();
        let lr = reader(&mut store, vec![0, 1]);
        let m = mesh(vec![0, 1]);
        let seq = VertexSequence::new(random(7, 12, 11, 1e-3), 25.0).unwrap();
        assert_eq!(lr.lipread(&store, &seq, &m).unwrap(), lr.lipread(&store, &seq, &m).unwrap());
        let still = VertexSequence::<f64>::zeros(7, 4, 25.0).unwrap();
        let (lat, dist, _) = lr.lipread(&store, &still, &m).unwrap();
        assert_eq!(lat.frames(), 7);
        assert_eq!(dist.frames(), 7);
    }
}
