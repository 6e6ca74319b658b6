use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{Error, Result};

/// Fingers are numbered thumb first; bit `f` of a class's mask says whether
/// finger `f` is extended.
pub fn finger_mask(class: usize) -> u32 {
    (class % 31) as u32 + 1
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = (h.rem_euclid(360.0)) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn capsule(p: (f64, f64), a: (f64, f64), b: (f64, f64), radius: f64) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let t = (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    (p.0 - a.0 - t * dx).hypot(p.1 - a.1 - t * dy) - radius
}

/// Signed distance (negative inside) to a palm with five fingers, in palm
/// radii.
fn hand_distance(mask: u32, u: f64, v: f64) -> f64 {
    let mut d = u.hypot(v / 1.15) - 1.0;
    for finger in 0..5 {
        let extended = mask >> finger & 1 == 1;
        let angle = if finger == 0 {
            -PI / 2.0 - 1.2
        } else {
            -PI / 2.0 + (finger as f64 - 2.0) * 0.38
        };
        let outer = finger == 0 || finger == 4;
        let length = if extended { 1.9 } else { 0.9 } * if outer { 0.8 } else { 1.0 };
        let base = (0.8 * angle.cos(), 0.8 * angle.sin());
        let tip = (base.0 + length * angle.cos(), base.1 + length * angle.sin());
        d = d.min(capsule((u, v), base, tip, 0.26));
    }
    d
}

struct Wave {
    kx: f64,
    ky: f64,
    phase: f64,
    amplitude: f64,
}

fn render(class: usize, size: u32, rng: &mut Xoshiro256PlusPlus) -> RgbImage {
    let n = size as f64;
    let backdrop = hsv(rng.gen_range(0.0..360.0), rng.gen_range(0.1..0.4), rng.gen_range(0.3..0.7));
    let waves: Vec<Wave> = (0..3)
        .map(|_| {
            let mut k = || rng.gen_range(0.5..2.5) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let (kx, ky) = (k(), k());
            Wave {
                kx,
                ky,
                phase: rng.gen_range(0.0..TAU),
                amplitude: rng.gen_range(0.03..0.1),
            }
        })
        .collect();
    let cx = n * (0.5 + rng.gen_range(-0.1..0.1));
    let cy = n * (0.58 + rng.gen_range(-0.08..0.08));
    let scale = n * rng.gen_range(0.11..0.15);
    let angle = rng.gen_range(-0.5..0.5) + ((class % 3) as f64 - 1.0) * 0.3;
    let skin = hsv(rng.gen_range(15.0..35.0), rng.gen_range(0.3..0.6), rng.gen_range(0.55..0.95));
    let light = if rng.gen_bool(0.5) { 0.15 } else { -0.15 };
    let mask = finger_mask(class);
    let (sin, cos) = angle.sin_cos();

    RgbImage::from_fn(size, size, |px, py| {
        let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
        let field: f64 = waves
            .iter()
            .map(|w| w.amplitude * (TAU * (w.kx * x + w.ky * y) / n + w.phase).sin())
            .sum();
        let (dx, dy) = (x - cx, y - cy);
        let u = (cos * dx + sin * dy) / scale;
        let v = (-sin * dx + cos * dy) / scale;
        let coverage = (0.5 - hand_distance(mask, u, v) * scale).clamp(0.0, 1.0);
        let shading = 1.0 + light * dx / n;
        Rgb(std::array::from_fn(|c| {
            let bg = (backdrop[c] + field).clamp(0.0, 1.0);
            let value = (bg * (1.0 - coverage) + skin[c] * shading * coverage).clamp(0.0, 1.0);
            (value * 255.0).round() as u8
        }))
    })
}

/// Writes `classes × per_class` PNGs under `root/class_XX/img_XXXX.png`: a
/// hand silhouette whose extended fingers identify the class, posed and lit
/// at random over a wavy backdrop. The same seed yields byte-identical files.
pub fn make_synthetic(root: impl AsRef<Path>, classes: usize, per_class: usize, size: u32, seed: u64) -> Result<()> {
    let root = root.as_ref();
    if classes == 0 || per_class == 0 || size == 0 {
        return Err(Error::Config("synthetic dataset needs classes, per_class and size ≥ 1".into()));
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    for class in 0..classes {
        let dir = root.join(format!("class_{class:02}"));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for i in 0..per_class {
            let path = dir.join(format!("img_{i:04}.png"));
            render(class, size, &mut rng).save(&path).map_err(|e| Error::Image {
                path: path.clone(),
                reason: e.to_string(),
            })?;
        }
    }
    Ok(())
}
