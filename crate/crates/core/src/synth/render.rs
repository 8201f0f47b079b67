use super::scene::{Background, Color, Object, Scene, Size};
use crate::tensor::Tensor;

fn rgb(c: Color) -> [f64; 3] {
    match c {
        Color::Red => [0.90, 0.10, 0.10],
        Color::Green => [0.10, 0.75, 0.20],
        Color::Blue => [0.15, 0.30, 0.95],
        Color::Yellow => [0.95, 0.90, 0.10],
        Color::Gray => [0.55, 0.55, 0.55],
        Color::Black => [0.03, 0.03, 0.03],
    }
}

fn background(b: Background, x: usize, y: usize, side: usize) -> [f64; 3] {
    match b {
        Background::White => [0.97, 0.97, 0.97],
        Background::Dark => [0.22, 0.20, 0.30],
        Background::Grid => {
            let step = (side / 4).max(2);
            if x.is_multiple_of(step) || y.is_multiple_of(step) {
                [0.40, 0.55, 0.45]
            } else {
                [0.85, 0.88, 0.80]
            }
        }
    }
}

fn tri(u: f64, v: f64, top: f64, bottom: f64, half_width: f64, cx: f64) -> bool {
    // isosceles triangle, apex at (cx, top), base at v = bottom
    if v < top || v > bottom {
        return false;
    }
    (u - cx).abs() <= half_width * (v - top) / (bottom - top)
}

fn disc(u: f64, v: f64, cu: f64, cv: f64, r: f64) -> bool {
    (u - cu).powi(2) + (v - cv).powi(2) <= r * r
}

/// Glyph membership in normalized coordinates, `u, v` in roughly `[-1, 1]`.
fn inside(object: Object, u: f64, v: f64) -> bool {
    match object {
        Object::Ball => disc(u, v, 0.0, 0.0, 1.0),
        Object::Cube => u.abs() <= 0.8 && v.abs() <= 0.8,
        Object::Cat => {
            disc(u, v, 0.0, 0.25, 0.7) || tri(u, v, -0.95, -0.2, 0.3, -0.45) || tri(u, v, -0.95, -0.2, 0.3, 0.45)
        }
        Object::Dog => {
            (u / 0.55).powi(2) + ((v - 0.1) / 0.8).powi(2) <= 1.0
                || (u.abs() >= 0.45 && u.abs() <= 0.9 && (-0.5..=0.35).contains(&v))
        }
        Object::Car => {
            (u.abs() <= 1.0 && (-0.2..=0.35).contains(&v))
                || (u.abs() <= 0.5 && (-0.65..=-0.2).contains(&v))
                || disc(u, v, -0.55, 0.55, 0.3)
                || disc(u, v, 0.55, 0.55, 0.3)
        }
        Object::Tree => tri(u, v, -1.0, 0.4, 0.75, 0.0) || (u.abs() <= 0.17 && (0.4..=1.0).contains(&v)),
        Object::House => (u.abs() <= 0.7 && (-0.1..=0.9).contains(&v)) || tri(u, v, -0.95, -0.1, 0.95, 0.0),
        Object::Fish => {
            ((u + 0.2) / 0.7).powi(2) + (v / 0.45).powi(2) <= 1.0
                || ((0.4..=1.0).contains(&u) && v.abs() <= (u - 0.4) * 0.9)
        }
    }
}

/// Deterministic `side x side x 3` raster of a scene, values in `[0, 1]`.
pub fn render(scene: &Scene, side: usize) -> Tensor {
    let center = side as f64 / 2.0;
    let radius = side as f64
        * match scene.size {
            Size::Small => 0.22,
            Size::Large => 0.44,
        };
    let fg = rgb(scene.color);
    let mut data = Vec::with_capacity(side * side * 3);
    for y in 0..side {
        for x in 0..side {
            let u = (x as f64 + 0.5 - center) / radius;
            let v = (y as f64 + 0.5 - center) / radius;
            let px = if inside(scene.object, u, v) {
                fg
            } else {
                background(scene.background, x, y, side)
            };
            data.extend_from_slice(&px);
        }
    }
    Tensor::new(vec![side, side, 3], data).expect("render shape")
}
