//! Rotary position encoding applied per head on `[tokens, d_model]` rows.

use ndarray::{ArrayViewMut2, Axis};

/// Rotates the first `rotary_dims` features of each head, as consecutive
/// `(2i, 2i+1)` pairs, by `position * base^(-2i/rotary_dims)`. The remaining
/// features carry no position.
///
/// `sign = -1.0` applies the inverse rotation, which is also the backward pass
/// of the forward rotation (rotations are orthogonal).
pub fn rotate(mut x: ArrayViewMut2<f64>, positions: &[usize], num_heads: usize, rotary_dims: usize, base: f64, sign: f64) {
    let d = x.ncols();
    let head_dim = d / num_heads;
    let half = rotary_dims.min(head_dim) / 2;
    let inv_freq: Vec<f64> = (0..half)
        .map(|i| base.powf(-((2 * i) as f64) / (2 * half) as f64))
        .collect();
    for (mut row, &pos) in x.axis_iter_mut(Axis(0)).zip(positions) {
        for (i, &f) in inv_freq.iter().enumerate() {
            let (sin, cos) = (sign * pos as f64 * f).sin_cos();
            for h in 0..num_heads {
                let a = h * head_dim + 2 * i;
                let (x0, x1) = (row[a], row[a + 1]);
                row[a] = x0 * cos - x1 * sin;
                row[a + 1] = x0 * sin + x1 * cos;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn inverse_rotation_restores_input() {
        let orig = Array2::from_shape_fn((3, 8), |(i, j)| (i * 8 + j) as f64 * 0.1 - 1.0);
        let mut x = orig.clone();
        rotate(x.view_mut(), &[0, 5, 17], 2, 4, 10_000.0, 1.0);
        assert!(x != orig);
        rotate(x.view_mut(), &[0, 5, 17], 2, 4, 10_000.0, -1.0);
        for (a, b) in x.iter().zip(orig.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dot_product_depends_only_on_offset() {
        let q = Array2::from_shape_fn((1, 4), |(_, j)| [0.3, -0.7, 1.1, 0.2][j]);
        let k = Array2::from_shape_fn((1, 4), |(_, j)| [0.5, 0.4, -0.9, 0.6][j]);
        let score = |pq: usize, pk: usize| {
            let (mut a, mut b) = (q.clone(), k.clone());
            rotate(a.view_mut(), &[pq], 1, 4, 100.0, 1.0);
            rotate(b.view_mut(), &[pk], 1, 4, 100.0, 1.0);
            (&a * &b).sum()
        };
        assert!((score(7, 3) - score(24, 20)).abs() < 1e-12);
    }

    #[test]
    fn partial_rotation_leaves_tail_untouched() {
        let orig = Array2::from_shape_fn((2, 8), |(i, j)| (i * 8 + j) as f64 * 0.3 - 2.0);
        let mut x = orig.clone();
        rotate(x.view_mut(), &[3, 9], 2, 2, 10_000.0, 1.0);
        for h in 0..2 {
            for j in 2..4 {
                assert_eq!(x.column(h * 4 + j), orig.column(h * 4 + j));
            }
            assert!(x.column(h * 4) != orig.column(h * 4));
        }
        let mut none = orig.clone();
        rotate(none.view_mut(), &[3, 9], 2, 0, 10_000.0, 1.0);
        assert_eq!(none, orig);
    }
}
