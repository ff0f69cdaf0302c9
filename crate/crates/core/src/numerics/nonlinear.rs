use crate::numerics::Tensor2D;

/// Exact GELU, `0.5 x (1 + erf(x / sqrt 2))`.
pub fn gelu_scalar(x: f32) -> f32 {
    let x = x as f64;
    (0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))) as f32
}

pub fn gelu(x: &Tensor2D) -> Tensor2D {
    x.map(gelu_scalar)
}

/// Softmax over each row, computed in f64.
pub fn softmax_rows(x: &Tensor2D) -> Tensor2D {
    let cols = x.cols();
    let mut data = Vec::with_capacity(x.len());
    for r in 0..x.rows() {
        let row = x.row(r);
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
        let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        data.extend(exps.iter().map(|e| (e / sum) as f32));
    }
    Tensor2D::from_parts(x.rows(), cols, data)
}

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Normalizes each column (one token's feature vector) to zero mean and unit
/// variance. No affine parameters.
pub fn layernorm_columns(x: &Tensor2D) -> Tensor2D {
    let (rows, cols) = x.shape();
    let mut out = vec![0.0f32; x.len()];
    for c in 0..cols {
        let mean = (0..rows).map(|r| x.get(r, c) as f64).sum::<f64>() / rows as f64;
        let var = (0..rows)
            .map(|r| {
                let d = x.get(r, c) as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / rows as f64;
        let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
        for r in 0..rows {
            out[r * cols + c] = ((x.get(r, c) as f64 - mean) * inv) as f32;
        }
    }
    Tensor2D::from_parts(rows, cols, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_fixed_points() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        for x in [6.0f32, 8.0, 20.0] {
            assert!(((gelu_scalar(x) - x) / x).abs() < 1e-6);
        }
        // minimum of the exact form, found by golden-section search on f64
        assert!((gelu_scalar(-0.7518) - (-0.1700)).abs() < 1e-4);
    }

    #[test]
    fn gelu_monotone_above_minimum_and_bounded_below() {
        let grid: Vec<f32> = (-4000..=4000).map(|i| i as f32 * 0.0025).collect();
        let vals: Vec<f32> = grid.iter().map(|&x| gelu_scalar(x)).collect();
        assert!(vals.iter().all(|&v| v >= -0.1701));
        let argmin = (0..vals.len())
            .min_by(|&a, &b| vals[a].total_cmp(&vals[b]))
            .unwrap();
        assert!((grid[argmin] + 0.7518).abs() < 0.005);
        assert!(vals[argmin..].windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor2D::from_rows(&[vec![1.0, 2.0, 3.0], vec![-50.0, 0.0, 50.0]]).unwrap();
        let s = softmax_rows(&x);
        for r in 0..2 {
            let sum: f32 = s.row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layernorm_columns_standardized() {
        let x = Tensor2D::from_rows(&[vec![1.0, -3.0], vec![2.0, 5.0], vec![6.0, 0.5]]).unwrap();
        let y = layernorm_columns(&x);
        for c in 0..2 {
            let col: Vec<f64> = (0..3).map(|r| y.get(r, c) as f64).collect();
            let mean = col.iter().sum::<f64>() / 3.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }
}
