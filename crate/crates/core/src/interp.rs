//! Bilinear resampling with half-pixel centers (`align_corners = false`).

use candle_core::{DType, Device, Tensor};

use crate::error::Result;

/// For every output index: the two source taps and the weight of the second.
pub fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Dense `[output, input]` interpolation matrix.
pub fn bilinear_matrix(input: usize, output: usize, dtype: DType) -> Result<Tensor> {
    let mut m = vec![0.0f64; output * input];
    for (o, (i0, i1, t)) in bilinear_taps(input, output).into_iter().enumerate() {
        m[o * input + i0] += 1.0 - t;
        m[o * input + i1] += t;
    }
    Ok(Tensor::from_vec(m, (output, input), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Resizes a row-major `h x w` map.
pub fn resize_map(src: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    if (h, w) == (oh, ow) {
        return src.to_vec();
    }
    let rows = bilinear_taps(h, oh);
    let cols = bilinear_taps(w, ow);
    let mut out = Vec::with_capacity(oh * ow);
    for &(r0, r1, ty) in &rows {
        for &(c0, c1, tx) in &cols {
            let a = src[r0 * w + c0] as f64;
            let b = src[r0 * w + c1] as f64;
            let c = src[r1 * w + c0] as f64;
            let d = src[r1 * w + c1] as f64;
            let top = a + (b - a) * tx;
            let bot = c + (d - c) * tx;
            out.push((top + (bot - top) * ty) as f32);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_when_sizes_match() {
        let m = bilinear_matrix(5, 5, DType::F64)
            .unwrap()
            .to_vec2::<f64>()
            .unwrap();
        for (i, row) in m.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert_eq!(v, if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn rows_are_convex_combinations() {
        let m = bilinear_matrix(15, 60, DType::F64)
            .unwrap()
            .to_vec2::<f64>()
            .unwrap();
        for row in m {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn constant_map_stays_constant() {
        let src = vec![0.25f32; 9];
        assert!(resize_map(&src, 3, 3, 8, 5)
            .iter()
            .all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn two_fold_upsample_matches_half_pixel_rule() {
        // Output 1 of a 2->4 resize samples source coordinate 0.25.
        let taps = bilinear_taps(2, 4);
        assert_eq!(taps[0], (0, 1, 0.0));
        assert_eq!(taps[1], (0, 1, 0.25));
        assert_eq!(taps[2], (0, 1, 0.75));
        assert_eq!(taps[3], (1, 1, 0.25));
    }
}
