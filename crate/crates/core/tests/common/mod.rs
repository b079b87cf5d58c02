#![allow(dead_code)]

use std::path::PathBuf;

use obbkit::geometry::{canonicalize, Point2, Quad};
use rand::Rng;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

pub fn rotated_rect(cx: f64, cy: f64, w: f64, h: f64, angle: f64) -> Quad {
    let (s, c) = angle.sin_cos();
    let corners = [
        (-w / 2., -h / 2.),
        (w / 2., -h / 2.),
        (w / 2., h / 2.),
        (-w / 2., h / 2.),
    ];
    canonicalize(corners.map(|(x, y)| Point2::new(cx + x * c - y * s, cy + x * s + y * c))).unwrap()
}

pub fn random_rect(rng: &mut impl Rng, span: f64, size: (f64, f64)) -> Quad {
    rotated_rect(
        rng.random_range(0.0..span),
        rng.random_range(0.0..span),
        rng.random_range(size.0..size.1),
        rng.random_range(size.0..size.1),
        rng.random_range(-std::f64::consts::FRAC_PI_2..std::f64::consts::FRAC_PI_2),
    )
}

/// Convex quad: four points at sorted random angles on a random ellipse.
pub fn random_convex_quad(rng: &mut impl Rng, center: (f64, f64), radius: (f64, f64)) -> Quad {
    loop {
        let (rx, ry) = (
            rng.random_range(radius.0..radius.1),
            rng.random_range(radius.0..radius.1),
        );
        let tilt: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let mut angles: Vec<f64> = (0..4)
            .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
            .collect();
        angles.sort_by(f64::total_cmp);
        let pts: Vec<Point2> = angles
            .iter()
            .map(|a| {
                let (x, y) = (rx * a.cos(), ry * a.sin());
                let (s, c) = tilt.sin_cos();
                Point2::new(center.0 + x * c - y * s, center.1 + x * s + y * c)
            })
            .collect();
        if let Ok(q) = canonicalize([pts[0], pts[1], pts[2], pts[3]]) {
            if q.area() > 1.0 {
                return q;
            }
        }
    }
}
