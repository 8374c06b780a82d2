//! Lip-trajectory plots.

use anyhow::{bail, Result};
use image::{Rgb, RgbImage};

use selftalk::{FaceMesh, VertexSequence};

const WIDTH: u32 = 800;
const HEIGHT: u32 = 400;
const MARGIN: u32 = 40;

/// Displacement magnitude of every lip vertex over time, one line per
/// vertex, on a shared vertical scale that starts at zero.
pub fn lip_trajectories(seq: &VertexSequence<f64>, mesh: &FaceMesh<f64>) -> Result<RgbImage> {
    let lips = mesh.lips();
    let frames = seq.frames();
    if frames == 0 {
        bail!("sequence has no frames");
    }
    let norm = |t: usize, v: usize| seq.offset(t, v).iter().map(|x| x * x).sum::<f64>().sqrt();
    let top = (0..frames)
        .flat_map(|t| lips.iter().map(move |&v| (t, v)))
        .map(|(t, v)| norm(t, v))
        .fold(0.0, f64::max);
    let top = if top > 0.0 { top } else { 1.0 };

    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let (x0, x1) = (MARGIN as f64, (WIDTH - MARGIN) as f64);
    let (y0, y1) = ((HEIGHT - MARGIN) as f64, MARGIN as f64);
    let axis = Rgb([90, 90, 90]);
    line(&mut img, (x0, y0), (x1, y0), axis);
    line(&mut img, (x0, y0), (x0, y1), axis);

    let span = (frames.max(2) - 1) as f64;
    for (i, &v) in lips.iter().enumerate() {
        let color = palette(i, lips.len());
        let point = |t: usize| (x0 + (x1 - x0) * t as f64 / span, y0 + (y1 - y0) * norm(t, v) / top);
        if frames == 1 {
            let (x, y) = point(0);
            line(&mut img, (x, y), (x1, y), color);
        }
        for t in 1..frames {
            line(&mut img, point(t - 1), point(t), color);
        }
    }
    Ok(img)
}

/// Evenly spaced hues at full saturation.
fn palette(i: usize, n: usize) -> Rgb<u8> {
    let h = 6.0 * i as f64 / n.max(1) as f64;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    let c = |f: f64| (200.0 * f) as u8;
    Rgb([c(r), c(g), c(b)])
}

fn line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), color: Rgb<u8>) {
    let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil().max(1.0) as usize;
    for k in 0..=steps {
        let s = k as f64 / steps as f64;
        let (x, y) = (a.0 + s * (b.0 - a.0), a.1 + s * (b.1 - a.1));
        let (x, y) = (x.round() as i64, y.round() as i64);
        if (0..WIDTH as i64).contains(&x) && (0..HEIGHT as i64).contains(&y) {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}
