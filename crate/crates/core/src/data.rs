//! Synthetic four-class shape images with known scale and rotation.
//!
//! Every class is sized so that a shape at scale `s` covers the same area,
//! `(0.24 · s · canvas)²`, which makes mean intensity a monotone function of
//! scale across classes. Pixels hold coverage in `[0, 1]`, estimated with a
//! 4×4 supersampling grid.

use std::f64::consts::{PI, TAU};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::random::seeded_rng;
use crate::tensor::{Real, Tensor};

pub const MIN_CANVAS: usize = 24;
pub const SCALE_RANGE: (f64, f64) = (0.5, 2.0);
const AREA_FACTOR: f64 = 0.24;
const SUPERSAMPLE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeClass {
    Disk,
    Square,
    Triangle,
    Cross,
}

impl std::str::FromStr for ShapeClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown shape class `{s}`")))
    }
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 4] = [
        ShapeClass::Disk,
        ShapeClass::Square,
        ShapeClass::Triangle,
        ShapeClass::Cross,
    ];

    pub fn label(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Disk => "disk",
            ShapeClass::Square => "square",
            ShapeClass::Triangle => "triangle",
            ShapeClass::Cross => "cross",
        }
    }

    /// Circumradius of the shape with unit area.
    fn unit_circumradius(self) -> f64 {
        match self {
            ShapeClass::Disk => (1.0 / PI).sqrt(),
            // Side 1.
            ShapeClass::Square => 0.5f64.sqrt(),
            // Equilateral, area sqrt(3)/4 · a² = 1.
            ShapeClass::Triangle => (4.0 / 3f64.sqrt()).sqrt() / 3f64.sqrt(),
            // Arm length L, half-width L/3: area (2L)(2L/3)·2 - (2L/3)² = 20L²/9.
            ShapeClass::Cross => {
                let l = (9.0 / 20.0f64).sqrt();
                (l * l + (l / 3.0) * (l / 3.0)).sqrt()
            }
        }
    }

    /// Membership of a point in the unit-area shape centered at the origin.
    fn contains_unit(self, x: f64, y: f64) -> bool {
        match self {
            ShapeClass::Disk => x * x + y * y <= 1.0 / PI,
            ShapeClass::Square => x.abs() <= 0.5 && y.abs() <= 0.5,
            ShapeClass::Triangle => {
                let r = self.unit_circumradius();
                // Inradius r/2; three half-planes at 90°, 210°, 330° normals.
                (0..3).all(|i| {
                    let a = PI / 2.0 + i as f64 * TAU / 3.0;
                    x * a.cos() + y * a.sin() <= r / 2.0
                })
            }
            ShapeClass::Cross => {
                let l = (9.0 / 20.0f64).sqrt();
                let hw = l / 3.0;
                (x.abs() <= l && y.abs() <= hw) || (y.abs() <= l && x.abs() <= hw)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSample {
    pub class: ShapeClass,
    pub scale: f64,
    /// Degrees in `[0, 360)`.
    pub rotation: f64,
    pub center: (f64, f64),
    pub canvas: usize,
    /// Row-major `canvas × canvas` coverage.
    pub pixels: Vec<f64>,
}

impl ShapeSample {
    pub fn label(&self) -> usize {
        self.class.label()
    }

    pub fn mean_intensity(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }
}

fn render(
    class: ShapeClass,
    scale: f64,
    rotation: f64,
    center: (f64, f64),
    canvas: usize,
) -> Vec<f64> {
    let side = AREA_FACTOR * scale * canvas as f64;
    let (sin, cos) = (-rotation.to_radians()).sin_cos();
    let reach = class.unit_circumradius() * side + 1.0;
    let step = 1.0 / SUPERSAMPLE as f64;
    let mut pixels = vec![0.0; canvas * canvas];
    for py in 0..canvas {
        let cy = py as f64 + 0.5;
        if (cy - center.0).abs() > reach {
            continue;
        }
        for px in 0..canvas {
            let cx = px as f64 + 0.5;
            if (cx - center.1).abs() > reach {
                continue;
            }
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let y = py as f64 + (sy as f64 + 0.5) * step - center.0;
                    let x = px as f64 + (sx as f64 + 0.5) * step - center.1;
                    let (ux, uy) = ((x * cos - y * sin) / side, (x * sin + y * cos) / side);
                    if class.contains_unit(ux, uy) {
                        hits += 1;
                    }
                }
            }
            pixels[py * canvas + px] = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
        }
    }
    pixels
}

/// `n` samples with labels cycling through the classes, so every class gets
/// `n / 4` samples (the first `n % 4` classes one more).
pub fn gen_dataset(n: usize, canvas: usize, seed: u64) -> Result<Vec<ShapeSample>> {
    if canvas < MIN_CANVAS {
        return Err(Error::Invalid(format!(
            "canvas must be at least {MIN_CANVAS}, got {canvas}"
        )));
    }
    let mut rng = seeded_rng(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let class = ShapeClass::ALL[i % 4];
        let scale = rng.random_range(SCALE_RANGE.0..SCALE_RANGE.1);
        let rotation = rng.random_range(0.0..360.0);
        let margin = class.unit_circumradius() * AREA_FACTOR * scale * canvas as f64 + 1.0;
        let span = canvas as f64 - 2.0 * margin;
        let center = (
            margin + rng.random::<f64>() * span,
            margin + rng.random::<f64>() * span,
        );
        let pixels = render(class, scale, rotation, center, canvas);
        out.push(ShapeSample {
            class,
            scale,
            rotation,
            center,
            canvas,
            pixels,
        });
    }
    Ok(out)
}

/// One shape centered on the canvas, for probing trained models.
pub fn centered_sample(
    class: ShapeClass,
    scale: f64,
    rotation: f64,
    canvas: usize,
) -> Result<ShapeSample> {
    if canvas < MIN_CANVAS {
        return Err(Error::Invalid(format!(
            "canvas must be at least {MIN_CANVAS}, got {canvas}"
        )));
    }
    if !(SCALE_RANGE.0..=SCALE_RANGE.1).contains(&scale) {
        return Err(Error::Invalid(format!(
            "scale {scale} is outside [{}, {}]",
            SCALE_RANGE.0, SCALE_RANGE.1
        )));
    }
    let c = canvas as f64 / 2.0;
    let pixels = render(class, scale, rotation, (c, c), canvas);
    Ok(ShapeSample {
        class,
        scale,
        rotation,
        center: (c, c),
        canvas,
        pixels,
    })
}

/// Stacks samples `indices` into an `(N, 1, canvas, canvas)` batch plus labels.
pub fn batch<T: Real>(
    samples: &[ShapeSample],
    indices: &[usize],
) -> Result<(Tensor<T>, Vec<usize>)> {
    let canvas = samples.first().map_or(0, |s| s.canvas);
    let mut data = Vec::with_capacity(indices.len() * canvas * canvas);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        let s = samples
            .get(i)
            .ok_or_else(|| Error::Invalid(format!("sample index {i} out of range")))?;
        data.extend(s.pixels.iter().map(|&v| T::from_f64(v)));
        labels.push(s.label());
    }
    Ok((
        Tensor::from_vec([indices.len(), 1, canvas, canvas], data)?,
        labels,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classes_are_balanced_and_deterministic() {
        let a = gen_dataset(400, 32, 0).unwrap();
        for c in ShapeClass::ALL {
            assert_eq!(a.iter().filter(|s| s.class == c).count(), 100);
        }
        assert_eq!(a, gen_dataset(400, 32, 0).unwrap());
        assert_ne!(a, gen_dataset(400, 32, 1).unwrap());
    }

    #[test]
    fn small_canvas_is_rejected() {
        assert!(gen_dataset(4, 16, 0).is_err());
    }

    #[test]
    fn parameters_stay_in_range_and_shapes_fit() {
        for s in gen_dataset(200, 32, 3).unwrap() {
            assert!((0.5..2.0).contains(&s.scale));
            assert!((0.0..360.0).contains(&s.rotation));
            assert!(s.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
            let n = s.canvas;
            let border: f64 = (0..n)
                .map(|i| {
                    s.pixels[i]
                        + s.pixels[(n - 1) * n + i]
                        + s.pixels[i * n]
                        + s.pixels[i * n + n - 1]
                })
                .sum();
            assert_eq!(border, 0.0);
        }
    }

    #[test]
    fn rendered_area_tracks_nominal_area() {
        for s in gen_dataset(40, 48, 5).unwrap() {
            let nominal = (AREA_FACTOR * s.scale * 48.0).powi(2);
            let area: f64 = s.pixels.iter().sum();
            assert!(
                (area - nominal).abs() / nominal < 0.06,
                "{:?} {area} {nominal}",
                s.class
            );
        }
    }

    #[test]
    fn unit_shapes_have_unit_area() {
        let n = 2000;
        for c in ShapeClass::ALL {
            let r = c.unit_circumradius();
            let mut hits = 0;
            for i in 0..n {
                for j in 0..n {
                    let x = -r + 2.0 * r * (i as f64 + 0.5) / n as f64;
                    let y = -r + 2.0 * r * (j as f64 + 0.5) / n as f64;
                    hits += c.contains_unit(x, y) as usize;
                }
            }
            let area = hits as f64 * (2.0 * r / n as f64).powi(2);
            assert!((area - 1.0).abs() < 5e-3, "{c:?} {area}");
        }
    }

    #[test]
    fn centered_sample_fits_at_max_scale() {
        for c in ShapeClass::ALL {
            let s = centered_sample(c, 2.0, 45.0, 32).unwrap();
            let n = s.canvas;
            assert_eq!(
                (0..n).map(|i| s.pixels[i] + s.pixels[i * n]).sum::<f64>(),
                0.0
            );
        }
        assert!(centered_sample(ShapeClass::Disk, 2.5, 0.0, 32).is_err());
    }

    #[test]
    fn batch_stacks_pixels_and_labels() {
        let d = gen_dataset(8, 24, 2).unwrap();
        let (x, y) = batch::<f32>(&d, &[1, 6]).unwrap();
        assert_eq!(x.dims(), [2, 1, 24, 24]);
        assert_eq!(y, vec![1, 2]);
        assert!(batch::<f32>(&d, &[8]).is_err());
    }
}
