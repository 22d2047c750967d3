//! Convex hulls of landmark sets and their rasterization.

use super::image::{BlendMask, LandmarkSet, Map};
use crate::error::{Error, Result};

const AREA_EPS: f64 = 1e-9;
const EDGE_EPS: f64 = 1e-9;

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Counter-clockwise hull (in x-right, y-down pixel coordinates the winding
/// is visually clockwise) by the monotone chain algorithm. Collinear points
/// on hull edges are dropped.
pub fn convex_hull(points: &[[f64; 2]]) -> Result<Vec<[f64; 2]>> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return Err(Error::Synthesis(format!(
            "convex hull needs 3 distinct points, got {}",
            pts.len()
        )));
    }
    let mut lower: Vec<[f64; 2]> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<[f64; 2]> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    if lower.len() < 3 || polygon_area(&lower) < AREA_EPS {
        return Err(Error::Synthesis("landmarks are collinear; hull is degenerate".into()));
    }
    Ok(lower)
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
        .abs()
        / 2.0
}

/// Whether `p` lies inside or on the hull produced by [`convex_hull`].
pub fn hull_contains(hull: &[[f64; 2]], p: [f64; 2]) -> bool {
    let n = hull.len();
    (0..n).all(|i| cross(hull[i], hull[(i + 1) % n], p) >= -EDGE_EPS)
}

/// Binary mask of the landmarks' convex hull. Pixel `(r, c)` is tested at
/// its center `(x, y) = (c, r)`; points on the hull boundary count as inside.
pub fn convex_hull_mask(lms: &LandmarkSet) -> Result<BlendMask> {
    let hull = convex_hull(lms.points())?;
    let (min_y, max_y) = hull
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p[1]), hi.max(p[1])));
    let map = Map::from_fn(lms.height(), lms.width(), |r, c| {
        let y = r as f64;
        if y < min_y - 1.0 || y > max_y + 1.0 {
            return 0.0;
        }
        if hull_contains(&hull, [c as f64, y]) {
            1.0
        } else {
            0.0
        }
    });
    Ok(BlendMask::new(map))
}
