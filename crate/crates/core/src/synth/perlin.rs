//! 2D gradient (Perlin) noise on a periodic lattice, evaluated at arbitrary
//! continuous coordinates so any image size and rotation work.

use std::f64::consts::{PI, SQRT_2};

use rand::Rng;

/// Random unit gradients on a `res_y x res_x` periodic lattice.
#[derive(Debug, Clone)]
pub struct PerlinField {
    res_y: usize,
    res_x: usize,
    gradients: Vec<(f64, f64)>,
}

fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

impl PerlinField {
    pub fn new(res_y: usize, res_x: usize, rng: &mut impl Rng) -> Self {
        let res_y = res_y.max(1);
        let res_x = res_x.max(1);
        let gradients = (0..res_y * res_x)
            .map(|_| {
                let a = rng.random::<f64>() * 2.0 * PI;
                (a.cos(), a.sin())
            })
            .collect();
        Self {
            res_y,
            res_x,
            gradients,
        }
    }

    fn grad(&self, iy: i64, ix: i64) -> (f64, f64) {
        let y = iy.rem_euclid(self.res_y as i64) as usize;
        let x = ix.rem_euclid(self.res_x as i64) as usize;
        self.gradients[y * self.res_x + x]
    }

    /// Noise at lattice coordinates `(u, v)`, scaled into roughly `[-1, 1]`.
    pub fn sample(&self, u: f64, v: f64) -> f64 {
        let (iy, ix) = (u.floor() as i64, v.floor() as i64);
        let (fy, fx) = (u - iy as f64, v - ix as f64);
        let dot = |dy: i64, dx: i64| {
            let (gy, gx) = self.grad(iy + dy, ix + dx);
            gy * (fy - dy as f64) + gx * (fx - dx as f64)
        };
        let (n00, n01, n10, n11) = (dot(0, 0), dot(0, 1), dot(1, 0), dot(1, 1));
        let (ty, tx) = (fade(fy), fade(fx));
        let top = n00 + (n01 - n00) * tx;
        let bottom = n10 + (n11 - n10) * tx;
        SQRT_2 * (top + (bottom - top) * ty)
    }

    /// Row-major `height x width` noise image, rotated by `angle` radians
    /// about the image center.
    pub fn render(&self, height: usize, width: usize, angle: f64) -> Vec<f64> {
        let (s, c) = angle.sin_cos();
        let (cy, cx) = (height as f64 / 2.0, width as f64 / 2.0);
        let mut out = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let ry = c * dy - s * dx + cy;
                let rx = s * dy + c * dx + cx;
                out.push(self.sample(
                    ry * self.res_y as f64 / height as f64,
                    rx * self.res_x as f64 / width as f64,
                ));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_at_lattice_points() {
        let f = PerlinField::new(4, 4, &mut ChaCha8Rng::seed_from_u64(0));
        for y in 0..4 {
            for x in 0..4 {
                assert!(f.sample(y as f64, x as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bounded_and_periodic() {
        let f = PerlinField::new(3, 5, &mut ChaCha8Rng::seed_from_u64(9));
        let img = f.render(64, 64, 0.3);
        assert!(img.iter().all(|v| v.abs() <= 1.0 + 1e-9));
        assert!((f.sample(0.3, 0.7) - f.sample(3.3, 5.7)).abs() < 1e-12);
    }
}
