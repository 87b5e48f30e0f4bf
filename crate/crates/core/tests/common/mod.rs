//! Synthetic scenes shared by the integration tests.
#![allow(dead_code)]

use std::path::Path;

use mmp_deblur::image_io::{frame_name, write_frame};
use mmp_deblur::{Shape, Tensor};

/// Smooth texture sampled at a continuous position.
fn texture(x: f64, y: f64, c: usize, phase: f64) -> f64 {
    let p = phase + c as f64 * 1.3;
    0.5 + 0.2 * (0.35 * x + 0.2 * y + p).sin() + 0.15 * (0.13 * x - 0.41 * y + 2.0 * p).sin() + 0.1 * (0.71 * x + 0.53 * y - p).sin()
}

/// Frame `t` of a scene: a background drifting at `(1, 0.5)` px/frame and a
/// disc of radius `h/6` crossing it at `(2.5, 0)` px/frame.
pub fn scene_frame(t: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
    let phase = seed as f64 * 0.77;
    let t = t as f64;
    let (cx, cy, r) = (w as f64 * 0.25 + 2.5 * t, h as f64 * 0.5, h as f64 / 6.0);
    Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
        let (xf, yf) = (x as f64, y as f64);
        let d = ((xf - cx).powi(2) + (yf - cy).powi(2)).sqrt();
        let v = if d < r {
            1.0 - texture(3.0 * (xf - 2.5 * t), 3.0 * yf, c, phase + 0.5)
        } else {
            texture(xf - t, yf - 0.5 * t, c, phase)
        };
        v.clamp(0.0, 1.0) as f32
    })
}

/// Writes `frames` sharp frames into `dir`.
pub fn write_scene(dir: &Path, frames: usize, h: usize, w: usize, seed: u64) {
    std::fs::create_dir_all(dir).unwrap();
    for t in 0..frames {
        write_frame(&dir.join(frame_name(t)), &scene_frame(t, h, w, seed)).unwrap();
    }
}
