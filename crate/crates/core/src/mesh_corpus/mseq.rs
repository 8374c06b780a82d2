//! MSEQ: `"MSEQ" | version u32 | T u32 | V u32 | fps f32 | T·V·3 f32`, all
//! little-endian, payload row-major over `(t, v, xyz)`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::mesh_corpus::VertexSequence;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const MSEQ_MAGIC: &[u8; 4] = b"MSEQ";
pub const MSEQ_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

pub fn encode_mseq<S: Scalar>(seq: &VertexSequence<S>) -> Vec<u8> {
    let (t, v) = (seq.frames(), seq.vertices());
    let mut out = Vec::with_capacity(HEADER_LEN + 12 * t * v);
    out.extend_from_slice(MSEQ_MAGIC);
    out.extend_from_slice(&MSEQ_VERSION.to_le_bytes());
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(v as u32).to_le_bytes());
    out.extend_from_slice(&(seq.fps() as f32).to_le_bytes());
    for &x in seq.offsets().as_slice() {
        out.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
    }
    out
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

pub fn decode_mseq<S: Scalar>(bytes: &[u8]) -> Result<VertexSequence<S>> {
    if bytes.len() < 4 || &bytes[..4] != MSEQ_MAGIC {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned();
        return Err(Error::BadMagic {
            expected: "MSEQ".into(),
            found,
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let version = read_u32(bytes, 4);
    if version != MSEQ_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let t = read_u32(bytes, 8) as usize;
    let v = read_u32(bytes, 12) as usize;
    let fps = f32::from_le_bytes(bytes[16..20].try_into().expect("4 bytes"));
    let expected = HEADER_LEN + 12 * t * v;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::ShapeMismatch(format!(
            "{} trailing bytes after MSEQ payload",
            bytes.len() - expected
        )));
    }
    let mut data = Vec::with_capacity(3 * t * v);
    for (i, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
        let x = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !x.is_finite() {
            return Err(Error::NonFinite(i));
        }
        data.push(S::lit(x as f64));
    }
    VertexSequence::new(Matrix::from_vec(t, 3 * v, data), fps as f64)
}

pub fn save_vertex_sequence<S: Scalar>(seq: &VertexSequence<S>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_mseq(seq)).map_err(|e| Error::io(path, e))
}

pub fn load_vertex_sequence<S: Scalar>(path: impl AsRef<Path>) -> Result<VertexSequence<S>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_mseq(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_zero_frame_layout() {
        let seq = VertexSequence::<f32>::zeros(1, 1, 30.0).unwrap();
        let bytes = encode_mseq(&seq);
        assert_eq!(bytes.len(), 4 + 4 + 4 + 4 + 4 + 12);
        assert_eq!(&bytes[..4], b"MSEQ");
        assert_eq!(bytes[4..8], 1u32.to_le_bytes());
        assert_eq!(decode_mseq::<f32>(&bytes).unwrap(), seq);
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = encode_mseq(&VertexSequence::<f32>::zeros(1, 1, 30.0).unwrap());
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_mseq::<f32>(&bytes), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn rejects_truncation_and_nan() {
        let bytes = encode_mseq(&VertexSequence::<f32>::zeros(2, 3, 30.0).unwrap());
        assert!(matches!(
            decode_mseq::<f32>(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated { .. })
        ));
        let mut nan = bytes.clone();
        nan[20..24].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_mseq::<f32>(&nan), Err(Error::NonFinite(0))));
        let mut version = bytes;
        version[4] = 2;
        assert!(matches!(decode_mseq::<f32>(&version), Err(Error::UnsupportedVersion(2))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.mseq");
        let seq = VertexSequence::new(
            Matrix::from_fn(7, 15, |r, c| (r as f32 * 0.37 - c as f32 * 0.011).sin()),
            25.0,
        )
        .unwrap();
        save_vertex_sequence(&seq, &path).unwrap();
        let back: VertexSequence<f32> = load_vertex_sequence(&path).unwrap();
        assert_eq!(back, seq);
        assert_eq!(std::fs::read(&path).unwrap(), encode_mseq(&back));
    }

    proptest! {
        #[test]
        fn encode_decode_is_byte_identical(
            t in 1usize..8,
            v in 1usize..6,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let m = Matrix::from_fn(t, 3 * v, |_, _| rng.random_range(-1.0f32..1.0));
            let seq = VertexSequence::new(m, 30.0).unwrap();
            let bytes = encode_mseq(&seq);
            let back64: VertexSequence<f64> = decode_mseq(&bytes).unwrap();
            prop_assert_eq!(encode_mseq(&back64), bytes.clone());
            let back32: VertexSequence<f32> = decode_mseq(&bytes).unwrap();
            prop_assert_eq!(back32, seq);
        }
    }
}
