//! Procedural face-like images with a 68-point landmark layout.
//!
//! Landmark indices follow the common 68-point ordering: jaw 0–16, brows
//! 17–26, nose 27–35, eyes 36–47, mouth 48–67.

use std::f64::consts::PI;

use rand::Rng;

use super::image::{Image, LandmarkSet};
use crate::rng;

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Coverage (0..1) of an axis-aligned ellipse with a one-pixel soft edge.
fn ellipse_cover(x: f64, y: f64, cx: f64, cy: f64, ax: f64, ay: f64) -> f64 {
    let d = ((x - cx) / ax).hypot((y - cy) / ay);
    // Approximate distance to the rim in pixels.
    let px = (d - 1.0) * ax.min(ay);
    1.0 - smoothstep(-0.5, 0.5, px)
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [0, 1, 2].map(|i| a[i] * (1.0 - t) + b[i] * t)
}

struct Feature {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
    color: [f64; 3],
}

/// Renders a `size`×`size` toy face for `seed` and returns it with its landmarks.
pub fn gen_toy_face(seed: u64, size: usize) -> (Image, LandmarkSet) {
    let mut rng = rng::stream(seed, &[0x7f4a_ce00]);
    let s = size as f64;

    let cx = s * (0.5 + rng.random_range(-0.05..0.05));
    let cy = s * (0.52 + rng.random_range(-0.04..0.04));
    let ax = s * (0.26 + rng.random_range(-0.03..0.03));
    let ay = s * (0.34 + rng.random_range(-0.03..0.03));

    let tone = rng.random_range(0.5..0.95);
    let skin = [tone, tone * rng.random_range(0.68..0.85), tone * rng.random_range(0.52..0.72)];
    let bg_base = [
        rng.random_range(0.1..0.9),
        rng.random_range(0.1..0.9),
        rng.random_range(0.1..0.9),
    ];
    let waves: Vec<(f64, f64, f64, f64, usize)> = (0..4)
        .map(|_| {
            (
                rng.random_range(0.5..3.0) * 2.0 * PI / s,
                rng.random_range(0.5..3.0) * 2.0 * PI / s,
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.03..0.09),
                rng.random_range(0..3),
            )
        })
        .collect();

    let eye_dx = ax * rng.random_range(0.34..0.42);
    let eye_y = cy - ay * rng.random_range(0.15..0.22);
    let eye_ax = ax * rng.random_range(0.14..0.18);
    let eye_ay = ay * rng.random_range(0.055..0.08);
    let iris = [rng.random_range(0.05..0.35), rng.random_range(0.05..0.3), rng.random_range(0.05..0.3)];
    let brow_y = eye_y - ay * rng.random_range(0.13..0.17);
    let brow_color = [0.15 * tone, 0.1 * tone, 0.08 * tone];
    let mouth_y = cy + ay * rng.random_range(0.42..0.5);
    let mouth_ax = ax * rng.random_range(0.26..0.34);
    let mouth_ay = ay * rng.random_range(0.05..0.08);
    let lips = [rng.random_range(0.55..0.85), rng.random_range(0.15..0.3), rng.random_range(0.2..0.35)];
    let nose_len = ay * rng.random_range(0.25..0.32);
    let light = rng.random_range(-0.6..0.6);

    let features: Vec<Feature> = [-1.0, 1.0]
        .iter()
        .flat_map(|&side| {
            [
                Feature { cx: cx + side * eye_dx, cy: eye_y, ax: eye_ax, ay: eye_ay, color: [0.95, 0.95, 0.93] },
                Feature { cx: cx + side * eye_dx, cy: eye_y, ax: eye_ay * 0.9, ay: eye_ay * 0.9, color: iris },
                Feature { cx: cx + side * eye_dx, cy: brow_y, ax: eye_ax * 1.2, ay: ay * 0.025 + 0.5, color: brow_color },
            ]
        })
        .chain([Feature { cx, cy: mouth_y, ax: mouth_ax, ay: mouth_ay, color: lips }])
        .collect();

    // Fine texture: deterministic per-pixel noise.
    let noise: Vec<f64> = (0..3 * size * size).map(|_| rng.random_range(-1.0..1.0)).collect();

    let mut data = vec![0.0; 3 * size * size];
    for r in 0..size {
        for c in 0..size {
            let (x, y) = (c as f64, r as f64);
            let mut bg = bg_base;
            for &(fx, fy, phase, amp, ch) in &waves {
                bg[ch] += amp * (fx * x + fy * y + phase).sin();
            }
            let face = ellipse_cover(x, y, cx, cy, ax, ay);
            let shade = 1.0 - 0.18 * (((x - cx) / ax).powi(2) + ((y - cy) / ay).powi(2)) + 0.06 * light * (x - cx) / ax;
            let mut px = mix(bg, skin.map(|v| v * shade), face);
            // Nose: a faint vertical shadow line.
            let nose = (1.0 - smoothstep(0.5, 1.5, (x - cx - 0.04 * ax).abs()))
                * (1.0 - smoothstep(0.0, 1.0, (y - (eye_y + nose_len)).max(eye_y - y)));
            px = mix(px, skin.map(|v| v * 0.8), 0.6 * nose * face);
            for f in &features {
                let cover = ellipse_cover(x, y, f.cx, f.cy, f.ax, f.ay);
                if cover > 0.0 {
                    px = mix(px, f.color, cover);
                }
            }
            for ch in 0..3 {
                let amp = 0.015 + 0.02 * (1.0 - face);
                data[(ch * size + r) * size + c] = (px[ch] + amp * noise[(ch * size + r) * size + c]).clamp(0.0, 1.0);
            }
        }
    }
    let image = Image::new(size, size, data).expect("values clamped to [0, 1]");

    let mut pts: Vec<[f64; 2]> = Vec::with_capacity(68);
    // Jaw: along the face outline from the left temple, round the chin, to the right temple.
    for i in 0..17 {
        let t = (PI + 0.25) - i as f64 * (PI + 0.5) / 16.0;
        pts.push([cx + 0.97 * ax * t.cos(), cy + 0.97 * ay * t.sin()]);
    }
    // Brows: five points each, arched.
    for side in [-1.0, 1.0] {
        for i in 0..5 {
            let u = i as f64 / 4.0 - 0.5;
            pts.push([
                cx + side * eye_dx + u * 2.2 * eye_ax,
                brow_y - (1.0 - 4.0 * u * u) * ay * 0.03,
            ]);
        }
    }
    // Nose bridge and base.
    for i in 0..4 {
        pts.push([cx, eye_y + (i as f64) / 3.0 * nose_len]);
    }
    for i in 0..5 {
        let u = i as f64 / 4.0 - 0.5;
        pts.push([cx + u * 0.35 * ax, eye_y + nose_len + 0.04 * ay * (1.0 - 4.0 * u * u)]);
    }
    // Eyes: six points around each eye.
    for side in [-1.0, 1.0] {
        let ex = cx + side * eye_dx;
        for a in [PI, 1.25 * PI, 1.75 * PI, 0.0, 0.25 * PI, 0.75 * PI] {
            pts.push([ex + eye_ax * a.cos(), eye_y + eye_ay * a.sin()]);
        }
    }
    // Mouth: twelve outer and eight inner points.
    for i in 0..12 {
        let a = PI - i as f64 * 2.0 * PI / 12.0;
        pts.push([cx + mouth_ax * a.cos(), mouth_y - mouth_ay * a.sin()]);
    }
    for i in 0..8 {
        let a = PI - i as f64 * 2.0 * PI / 8.0;
        pts.push([cx + 0.7 * mouth_ax * a.cos(), mouth_y - 0.4 * mouth_ay * a.sin()]);
    }
    let lms = LandmarkSet::new(pts, size, size).expect("toy landmarks lie on the face");
    (image, lms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthesis::hull::convex_hull_mask;

    #[test]
    fn same_seed_same_face() {
        assert_eq!(gen_toy_face(17, 64), gen_toy_face(17, 64));
        assert_ne!(gen_toy_face(17, 64).0, gen_toy_face(18, 64).0);
    }

    #[test]
    fn landmarks_and_hull_coverage_over_seed_sweep() {
        for seed in 0..1000 {
            let (_, lms) = gen_toy_face(seed, 64);
            assert_eq!(lms.points().len(), 68);
            for p in lms.points() {
                assert!(p[0] >= 0.0 && p[0] <= 63.0 && p[1] >= 0.0 && p[1] <= 63.0);
            }
            let mask = convex_hull_mask(&lms).unwrap();
            let cover = mask.map().sum() / (64.0 * 64.0);
            assert!((0.05..=0.60).contains(&cover), "seed {seed}: {cover}");
            // Hull stays off the border.
            for i in 0..64 {
                assert_eq!(mask.map().get(0, i), 0.0);
                assert_eq!(mask.map().get(63, i), 0.0);
                assert_eq!(mask.map().get(i, 0), 0.0);
                assert_eq!(mask.map().get(i, 63), 0.0);
            }
        }
    }
}
