//! RIFF WAV PCM16 input and output, with resampling to 16 kHz mono.

use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mesh_corpus::AudioClip;

/// Rate every [`AudioClip`] is stored at.
pub const SAMPLE_RATE: u32 = 16_000;

const SINC_ZERO_CROSSINGS: f64 = 16.0;

fn decode_wav<R: std::io::Read>(reader: hound::WavReader<R>) -> Result<AudioClip> {
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::UnsupportedAudio(format!(
            "{:?} {}-bit samples; only PCM16 is supported",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::UnsupportedAudio("zero channels".into()));
    }
    let raw: Vec<i16> = reader
        .into_samples::<i16>()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::UnsupportedAudio(e.to_string()))?;
    if raw.is_empty() {
        return Err(Error::EmptyAudio);
    }
    let mono: Vec<f32> = raw
        .chunks(channels)
        .map(|frame| {
            let sum: f32 = frame.iter().map(|&s| s as f32 / 32768.0).sum();
            sum / frame.len() as f32
        })
        .collect();
    let samples = if spec.sample_rate == SAMPLE_RATE {
        mono
    } else {
        resample_sinc(&mono, spec.sample_rate, SAMPLE_RATE)
    };
    AudioClip::new(samples)
}

/// Loads a PCM16 WAV of any channel count and rate as 16 kHz mono.
pub fn load_audio(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::UnsupportedAudio(other.to_string()),
    })?;
    decode_wav(reader)
}

/// Decodes WAV bytes held in memory.
pub fn audio_from_wav_bytes(bytes: &[u8]) -> Result<AudioClip> {
    let reader = hound::WavReader::new(Cursor::new(bytes)).map_err(|e| Error::UnsupportedAudio(e.to_string()))?;
    decode_wav(reader)
}

fn quantize(x: f32) -> i16 {
    (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// 16 kHz mono PCM16 WAV encoding of `clip`.
pub fn wav_bytes(clip: &AudioClip) -> Vec<u8> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut cursor = Cursor::new(Vec::new());
    {
        let mut writer = hound::WavWriter::new(&mut cursor, spec).expect("in-memory WAV header");
        for &s in clip.samples() {
            writer.write_sample(quantize(s)).expect("in-memory WAV write");
        }
        writer.finalize().expect("in-memory WAV finalize");
    }
    cursor.into_inner()
}

pub fn save_audio(clip: &AudioClip, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, wav_bytes(clip)).map_err(|e| Error::io(path, e))
}

/// Band-limited resampling with a Blackman-windowed sinc kernel.
///
/// Output length is `round(len × to / from)`. The kernel cutoff is the lower
/// of the two Nyquist rates.
pub fn resample_sinc(input: &[f32], from: u32, to: u32) -> Vec<f32> {
    if from == to || input.is_empty() {
        return input.to_vec();
    }
    let ratio = to as f64 / from as f64;
    let out_len = ((input.len() as f64) * ratio).round().max(1.0) as usize;
    let cutoff = ratio.min(1.0);
    let half_width = SINC_ZERO_CROSSINGS / cutoff;
    let n = input.len() as isize;
    (0..out_len)
        .map(|j| {
            let center = j as f64 / ratio;
            let lo = (center - half_width).ceil() as isize;
            let hi = (center + half_width).floor() as isize;
            let mut acc = 0.0f64;
            let mut norm = 0.0f64;
            for i in lo.max(0)..=hi.min(n - 1) {
                let d = center - i as f64;
                let w = cutoff * sinc(cutoff * d) * blackman(d / half_width);
                acc += w * input[i as usize] as f64;
                norm += w;
            }
            if norm.abs() > 1e-12 {
                (acc / norm) as f32
            } else {
                0.0
            }
        })
        .collect()
}

/// Piecewise-linear resampling; output length as in [`resample_sinc`].
pub fn resample_linear(input: &[f32], from: u32, to: u32) -> Vec<f32> {
    if from == to || input.is_empty() {
        return input.to_vec();
    }
    let ratio = to as f64 / from as f64;
    let out_len = ((input.len() as f64) * ratio).round().max(1.0) as usize;
    (0..out_len)
        .map(|j| {
            let x = (j as f64 / ratio).min((input.len() - 1) as f64);
            let i = x.floor() as usize;
            let frac = x - i as f64;
            let a = input[i] as f64;
            let b = input[(i + 1).min(input.len() - 1)] as f64;
            (a + (b - a) * frac) as f32
        })
        .collect()
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Blackman window on `[-1, 1]`.
fn blackman(x: f64) -> f64 {
    if x.abs() >= 1.0 {
        return 0.0;
    }
    let t = std::f64::consts::PI * (x + 1.0);
    0.42 - 0.5 * t.cos() + 0.08 * (2.0 * t).cos()
}
