//! Synthetic frame constructors with known ground-truth motion.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::frame::Frame;

/// Lattice spacing of the default value-noise texture.
pub const TEXTURE_CELL: usize = 12;

/// Smoothly varying grayscale value noise over a `width x height` canvas
/// (arbitrary extents, not restricted to macroblock multiples).
///
/// Two octaves of smoothstep-interpolated lattice noise keep the SAD
/// surface well conditioned for descent searches while every block stays
/// distinguishable.
pub fn smooth_texture(width: usize, height: usize, cell: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coarse = lattice(&mut rng, width, height, cell.max(2));
    let fine = lattice(&mut rng, width, height, (cell / 2).max(2));
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let v = 0.7 * sample(&coarse, x, y) + 0.3 * sample(&fine, x, y);
            out.push((24.0 + v * 208.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

struct Lattice {
    cell: usize,
    cols: usize,
    values: Vec<f64>,
}

fn lattice(rng: &mut ChaCha8Rng, width: usize, height: usize, cell: usize) -> Lattice {
    let cols = width / cell + 2;
    let rows = height / cell + 2;
    Lattice {
        cell,
        cols,
        values: (0..rows * cols).map(|_| rng.random::<f64>()).collect(),
    }
}

fn sample(l: &Lattice, x: usize, y: usize) -> f64 {
    let (gx, gy) = (x / l.cell, y / l.cell);
    let fx = smoothstep((x % l.cell) as f64 / l.cell as f64);
    let fy = smoothstep((y % l.cell) as f64 / l.cell as f64);
    let at = |c: usize, r: usize| l.values[r * l.cols + c];
    let top = at(gx, gy) * (1.0 - fx) + at(gx + 1, gy) * fx;
    let bottom = at(gx, gy + 1) * (1.0 - fx) + at(gx + 1, gy + 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

pub fn textured_frame(width: usize, height: usize, seed: u64) -> Frame {
    Frame::gray(width, height, smooth_texture(width, height, TEXTURE_CELL, seed))
        .expect("dims are caller-validated multiples of the macroblock")
}

/// Uniform i.i.d. noise; the adversarial case for descent searches.
pub fn noise_frame(width: usize, height: usize, seed: u64) -> Frame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let px = (0..width * height).map(|_| rng.random::<u8>()).collect();
    Frame::gray(width, height, px).expect("dims are caller-validated multiples of the macroblock")
}

/// Window of a larger canvas whose top-left corner sits at `(ox, oy)`.
fn crop(canvas: &[u8], canvas_w: usize, ox: usize, oy: usize, w: usize, h: usize) -> Frame {
    let mut px = Vec::with_capacity(w * h);
    for y in 0..h {
        let row = (oy + y) * canvas_w + ox;
        px.extend_from_slice(&canvas[row..row + w]);
    }
    Frame::gray(w, h, px).expect("dims are caller-validated multiples of the macroblock")
}

/// Frame pair in which all content moves by `shift = (dx, dy)`:
/// `cur(x, y) == prev(x - dx, y - dy)` wherever both are defined. Both
/// frames are crops of one textured canvas, so no pixel is synthesized at
/// the border.
pub fn translated_pair(width: usize, height: usize, shift: (i32, i32), seed: u64) -> (Frame, Frame) {
    let margin = shift.0.unsigned_abs().max(shift.1.unsigned_abs()) as usize;
    let (cw, ch) = (width + 2 * margin, height + 2 * margin);
    let canvas = smooth_texture(cw, ch, TEXTURE_CELL, seed);
    let m = margin as i32;
    let prev = crop(&canvas, cw, margin, margin, width, height);
    let cur = crop(
        &canvas,
        cw,
        (m - shift.0) as usize,
        (m - shift.1) as usize,
        width,
        height,
    );
    (prev, cur)
}

/// `n` frames of constant-velocity global translation, oldest first.
pub fn translation_sequence(
    width: usize,
    height: usize,
    velocity: (i32, i32),
    n: usize,
    seed: u64,
) -> Vec<Frame> {
    let steps = n.saturating_sub(1) as i32;
    let margin = (velocity.0.abs().max(velocity.1.abs()) * steps) as usize;
    let (cw, ch) = (width + 2 * margin, height + 2 * margin);
    let canvas = smooth_texture(cw, ch, TEXTURE_CELL, seed);
    let m = margin as i32;
    (0..n as i32)
        .map(|t| {
            let ox = m - velocity.0 * t;
            let oy = m - velocity.1 * t;
            crop(&canvas, cw, ox as usize, oy as usize, width, height)
        })
        .collect()
}

/// A textured 16x16 square that moves from `from` to `to` (top-left
/// corners) over a static textured background.
pub fn moving_square(
    width: usize,
    height: usize,
    from: (usize, usize),
    to: (usize, usize),
    seed: u64,
) -> (Frame, Frame) {
    const SIDE: usize = 16;
    let background = smooth_texture(width, height, TEXTURE_CELL, seed);
    // Distinct texture and offset brightness so the square never aliases
    // the background.
    let patch: Vec<u8> = smooth_texture(SIDE, SIDE, 6, seed ^ 0x5eed)
        .into_iter()
        .map(|v| v / 2 + 128)
        .collect();
    let paint = |at: (usize, usize)| {
        let mut px = background.clone();
        for y in 0..SIDE {
            for x in 0..SIDE {
                px[(at.1 + y) * width + at.0 + x] = patch[y * SIDE + x];
            }
        }
        Frame::gray(width, height, px).expect("dims are caller-validated multiples of the macroblock")
    };
    (paint(from), paint(to))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn translated_pair_matches_sign_convention() {
        let (prev, cur) = translated_pair(32, 32, (3, -2), 4);
        let (p, c) = (prev.pixels(), cur.pixels());
        for y in 2..30 {
            for x in 3..32 {
                let (px, py) = (x - 3, y + 2);
                if py < 32 {
                    assert_eq!(c[y * 32 + x], p[py * 32 + px]);
                }
            }
        }
    }

    #[test]
    fn texture_is_seeded_and_varied() {
        let a = smooth_texture(32, 32, 12, 1);
        assert_eq!(a, smooth_texture(32, 32, 12, 1));
        assert_ne!(a, smooth_texture(32, 32, 12, 2));
        let (lo, hi) = (a.iter().min().unwrap(), a.iter().max().unwrap());
        assert!(hi - lo > 60);
    }

    #[test]
    fn sequence_has_constant_velocity() {
        let seq = translation_sequence(32, 32, (2, 1), 4, 9);
        let w = 32;
        for t in 1..4 {
            let (p, c) = (seq[t - 1].pixels(), seq[t].pixels());
            assert_eq!(c[10 * w + 10], p[9 * w + 8]);
        }
    }
}
