//! Linear-interpolation retiming of frame sequences.

use crate::mesh_corpus::{AudioClip, VertexSequence};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Interpolation weights `W` (`dst_rows × src_rows`) such that `W · X`
/// samples `X`, recorded at `src_rate`, at times `t / dst_rate`.
///
/// Times past the last source frame hold the last frame; a single source
/// frame is held constant.
pub fn resample_rows_matrix<S: Scalar>(src_rows: usize, src_rate: f64, dst_rows: usize, dst_rate: f64) -> Matrix<S> {
    assert!(src_rows >= 1, "cannot resample an empty sequence");
    let mut w = Matrix::zeros(dst_rows, src_rows);
    let last = (src_rows - 1) as f64;
    for t in 0..dst_rows {
        let pos = (t as f64 * src_rate / dst_rate).clamp(0.0, last);
        let i = pos.floor() as usize;
        let frac = pos - i as f64;
        if frac == 0.0 || i + 1 >= src_rows {
            w.set(t, i, S::one());
        } else {
            w.set(t, i, S::lit(1.0 - frac));
            w.set(t, i + 1, S::lit(frac));
        }
    }
    w
}

pub fn resample_rows<S: Scalar>(m: &Matrix<S>, src_rate: f64, dst_rows: usize, dst_rate: f64) -> Matrix<S> {
    resample_rows_matrix::<S>(m.rows(), src_rate, dst_rows, dst_rate).matmul(m)
}

/// Retimes `gt` to `fps` over the audio's duration: `round(duration × fps)`
/// output frames, each linearly interpolated at time `t / fps`.
pub fn align_to_fps<S: Scalar>(gt: &VertexSequence<S>, audio: &AudioClip, fps: f64) -> VertexSequence<S> {
    assert!(fps.is_finite() && fps > 0.0, "fps must be positive");
    let frames = audio.frames_at(fps).max(1);
    let offsets = resample_rows(gt.offsets(), gt.fps(), frames, fps);
    VertexSequence::new(offsets, fps).expect("interpolating finite frames stays finite")
}
