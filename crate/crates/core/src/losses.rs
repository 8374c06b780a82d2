//! Reconstruction, velocity, latent-consistency and CTC text-consistency
//! losses, plus their weighted total.
//!
//! The free functions evaluate a loss on plain sequences. The [`graph`]
//! submodule builds the same quantities on a [`Tape`] for training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh_corpus::{Transcript, VertexSequence, Vocabulary};
use crate::scalar::{log_add, Scalar};
use crate::speech_recognizer::{LatentSequence, TextDistribution};
use crate::tensor::Matrix;

/// Weights of the four loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub rec: f64,
    pub vel: f64,
    pub lat: f64,
    pub ctc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rec: 1000.0,
            vel: 1000.0,
            lat: 0.001,
            ctc: 0.0001,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.rec, self.vel, self.lat, self.ctc];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative, got {all:?}"
            )));
        }
        Ok(())
    }
}

/// Unweighted loss values for one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossComponents {
    pub rec: f64,
    pub vel: f64,
    pub lat: f64,
    /// `+inf` when the CTC target is infeasible.
    pub ctc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rec: f64,
    pub vel: f64,
    pub lat: f64,
    /// `None` when the target could not be aligned and the term was dropped.
    pub ctc: Option<f64>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn ctc_skipped(&self) -> bool {
        self.ctc.is_none()
    }
}

/// Exact weighted sum. An infinite CTC value is dropped from the total and
/// reported as skipped.
pub fn total_loss(c: LossComponents, w: &LossWeights) -> LossBreakdown {
    let ctc = c.ctc.is_finite().then_some(c.ctc);
    let total = w.rec * c.rec + w.vel * c.vel + w.lat * c.lat + ctc.map_or(0.0, |v| w.ctc * v);
    LossBreakdown {
        rec: c.rec,
        vel: c.vel,
        lat: c.lat,
        ctc,
        total,
    }
}

/// How the latent-consistency loss normalizes each frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentNormalization {
    /// Mean squared difference over feature entries.
    #[default]
    FeatureMean,
    /// Squared L2 distance per frame (one sample per batch).
    FeatureSum,
}

fn check_same_shape<S: Scalar>(a: &Matrix<S>, b: &Matrix<S>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `(1/T) Σₜ (1/V) Σᵥ ‖yₜᵥ − ŷₜᵥ‖²`.
pub fn rec_loss<S: Scalar>(y: &VertexSequence<S>, y_hat: &VertexSequence<S>) -> Result<S> {
    check_same_shape(y.offsets(), y_hat.offsets(), "reconstruction loss")?;
    let sq: S = y
        .offsets()
        .as_slice()
        .iter()
        .zip(y_hat.offsets().as_slice())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    Ok(sq / S::from_usize_lossy(y.frames() * y.vertices()))
}

/// Squared error between ground-truth and predicted frame differences,
/// summed from the second frame on and normalized by `max(T − 1, 1)·V`.
pub fn vel_loss<S: Scalar>(y: &VertexSequence<S>, y_hat: &VertexSequence<S>) -> Result<S> {
    check_same_shape(y.offsets(), y_hat.offsets(), "velocity loss")?;
    let t = y.frames();
    if t < 2 {
        return Ok(S::zero());
    }
    let (a, b) = (y.offsets(), y_hat.offsets());
    let mut sq = S::zero();
    for r in 1..t {
        for c in 0..a.cols() {
            let d = (a.get(r, c) - a.get(r - 1, c)) - (b.get(r, c) - b.get(r - 1, c));
            sq += d * d;
        }
    }
    Ok(sq / S::from_usize_lossy((t - 1) * y.vertices()))
}

/// Mean over frames of the per-frame squared latent difference.
pub fn lat_loss<S: Scalar>(
    audio_latents: &LatentSequence<S>,
    lip_latents: &LatentSequence<S>,
    norm: LatentNormalization,
) -> Result<S> {
    check_same_shape(audio_latents.values(), lip_latents.values(), "latent consistency loss")?;
    let (t, f) = audio_latents.values().shape();
    let sq: S = audio_latents
        .values()
        .as_slice()
        .iter()
        .zip(lip_latents.values().as_slice())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    let denom = match norm {
        LatentNormalization::FeatureMean => t * f,
        LatentNormalization::FeatureSum => t,
    };
    Ok(sq / S::from_usize_lossy(denom))
}

/// Negative log-probability of `target` under `p`, summed over every
/// alignment that collapses to it. `+inf` when no alignment exists.
pub fn ctc_loss<S: Scalar>(p: &TextDistribution<S>, target: &Transcript, vocab: &Vocabulary) -> Result<S> {
    let labels = vocab.encode(target)?;
    let log_probs = p.probs().map(|x| x.ln());
    Ok(-ctc_log_likelihood(&log_probs, &labels, vocab.blank_index()))
}

/// Minimum frame count that admits an alignment: one frame per label plus a
/// blank between each pair of equal neighbours.
pub fn ctc_min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn extended_labels(target: &[usize], blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &l in target {
        ext.push(l);
        ext.push(blank);
    }
    ext
}

fn can_skip(ext: &[usize], s: usize, blank: usize) -> bool {
    s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]
}

fn ctc_alpha<S: Scalar>(log_probs: &Matrix<S>, ext: &[usize], blank: usize) -> Vec<Vec<S>> {
    let t_len = log_probs.rows();
    let l = ext.len();
    let ninf = S::neg_infinity();
    let mut alpha = vec![vec![ninf; l]; t_len];
    alpha[0][0] = log_probs.get(0, ext[0]);
    if l > 1 {
        alpha[0][1] = log_probs.get(0, ext[1]);
    }
    for t in 1..t_len {
        for s in 0..l {
            let mut acc = alpha[t - 1][s];
            if s >= 1 {
                acc = log_add(acc, alpha[t - 1][s - 1]);
            }
            if can_skip(ext, s, blank) {
                acc = log_add(acc, alpha[t - 1][s - 2]);
            }
            alpha[t][s] = if acc == ninf { ninf } else { acc + log_probs.get(t, ext[s]) };
        }
    }
    alpha
}

/// `log Σ_π p(π)` over alignments collapsing to `target`, by the forward
/// recursion over the blank-augmented label sequence.
pub fn ctc_log_likelihood<S: Scalar>(log_probs: &Matrix<S>, target: &[usize], blank: usize) -> S {
    if log_probs.rows() == 0 {
        return if target.is_empty() { S::zero() } else { S::neg_infinity() };
    }
    if ctc_min_frames(target) > log_probs.rows() {
        return S::neg_infinity();
    }
    let ext = extended_labels(target, blank);
    let alpha = ctc_alpha(log_probs, &ext, blank);
    let last = &alpha[log_probs.rows() - 1];
    let l = ext.len();
    if l > 1 {
        log_add(last[l - 1], last[l - 2])
    } else {
        last[0]
    }
}

/// Loss `−log p(target)` and its gradient with respect to `log_probs`.
///
/// The gradient treats every entry of `log_probs` as free (no simplex
/// constraint); chain through a log-softmax for normalized outputs.
pub fn ctc_loss_and_grad<S: Scalar>(log_probs: &Matrix<S>, target: &[usize], blank: usize) -> (S, Matrix<S>) {
    let (t_len, u) = log_probs.shape();
    let mut grad = Matrix::zeros(t_len, u);
    if t_len == 0 || ctc_min_frames(target) > t_len {
        let loss = if t_len == 0 && target.is_empty() { S::zero() } else { S::infinity() };
        return (loss, grad);
    }
    let ext = extended_labels(target, blank);
    let l = ext.len();
    let ninf = S::neg_infinity();
    let alpha = ctc_alpha(log_probs, &ext, blank);

    // beta[t][s]: log-probability of completing the alignment after frame t,
    // given state s at frame t (frame t's own emission excluded).
    let mut beta = vec![vec![ninf; l]; t_len];
    beta[t_len - 1][l - 1] = S::zero();
    if l > 1 {
        beta[t_len - 1][l - 2] = S::zero();
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..l {
            let mut acc = ninf;
            for next in [s, s + 1, s + 2] {
                if next >= l {
                    break;
                }
                if next == s + 2 && !can_skip(&ext, next, blank) {
                    continue;
                }
                let b = beta[t + 1][next];
                if b != ninf {
                    acc = log_add(acc, b + log_probs.get(t + 1, ext[next]));
                }
            }
            beta[t][s] = acc;
        }
    }

    let last = &alpha[t_len - 1];
    let log_p = if l > 1 { log_add(last[l - 1], last[l - 2]) } else { last[0] };
    if log_p == ninf {
        return (S::infinity(), grad);
    }
    for t in 0..t_len {
        for s in 0..l {
            let occ = alpha[t][s] + beta[t][s];
            if occ != ninf {
                let k = ext[s];
                let cur = grad.get(t, k);
                grad.set(t, k, cur - (occ - log_p).exp());
            }
        }
    }
    (-log_p, grad)
}

/// Tape builders for the four losses. Sequences are `T × cols` matrices.
pub mod graph {
    use super::LatentNormalization;
    use crate::autograd::{Tape, Var};
    use crate::scalar::Scalar;

    /// `y`, `y_hat`: `T × 3V`.
    pub fn rec<S: Scalar>(tape: &mut Tape<S>, y: Var, y_hat: Var, vertices: usize) -> Var {
        let t = tape.value(y).rows();
        let d = tape.sub(y, y_hat);
        let sq = tape.sum_squares(d);
        tape.scale(sq, S::one() / S::from_usize_lossy(t * vertices))
    }

    pub fn vel<S: Scalar>(tape: &mut Tape<S>, y: Var, y_hat: Var, vertices: usize) -> Var {
        let t = tape.value(y).rows();
        if t < 2 {
            let zero = tape.sub(y_hat, y_hat);
            let s = tape.sum(zero);
            return tape.scale(s, S::zero());
        }
        let vy = tape.row_diff(y);
        let vp = tape.row_diff(y_hat);
        let d = tape.sub(vy, vp);
        let sq = tape.sum_squares(d);
        tape.scale(sq, S::one() / S::from_usize_lossy((t - 1) * vertices))
    }

    pub fn lat<S: Scalar>(tape: &mut Tape<S>, audio: Var, lips: Var, norm: LatentNormalization) -> Var {
        let (t, f) = tape.value(audio).shape();
        let d = tape.sub(audio, lips);
        let sq = tape.sum_squares(d);
        let denom = match norm {
            LatentNormalization::FeatureMean => t * f,
            LatentNormalization::FeatureSum => t,
        };
        tape.scale(sq, S::one() / S::from_usize_lossy(denom))
    }

    /// `probs_logits`: pre-softmax `T × U` scores.
    pub fn ctc<S: Scalar>(tape: &mut Tape<S>, logits: Var, target: &[usize], blank: usize) -> Var {
        let lp = tape.log_softmax_rows(logits);
        tape.ctc_loss(lp, target, blank)
    }
}
