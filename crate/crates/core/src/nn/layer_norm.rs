use ndarray::{Array1, Array2, Axis};

pub const LN_EPS: f64 = 1e-12;

/// Row-wise affine-free layer normalization. Returns the normalized rows and
/// the per-row inverse standard deviations needed by the backward pass.
pub fn layer_norm(x: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let k = x.ncols() as f64;
    let mut y = x.clone();
    let mut inv = Array1::zeros(x.nrows());
    for (mut row, r) in y.axis_iter_mut(Axis(0)).zip(inv.iter_mut()) {
        let mu = row.sum() / k;
        row.mapv_inplace(|v| v - mu);
        let var = row.iter().map(|v| v * v).sum::<f64>() / k;
        *r = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| v * *r);
    }
    (y, inv)
}

/// `gx = r·(gy − mean(gy) − y·mean(gy ⊙ y))`, exact including the epsilon.
pub fn layer_norm_backward(y: &Array2<f64>, inv: &Array1<f64>, gy: &Array2<f64>) -> Array2<f64> {
    let k = y.ncols() as f64;
    let mut gx = gy.clone();
    for ((mut g, yr), &r) in gx.axis_iter_mut(Axis(0)).zip(y.axis_iter(Axis(0))).zip(inv) {
        let mg = g.sum() / k;
        let mgy = g.iter().zip(yr.iter()).map(|(a, b)| a * b).sum::<f64>() / k;
        for (gv, yv) in g.iter_mut().zip(yr.iter()) {
            *gv = r * (*gv - mg - yv * mgy);
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn norm_identity(xs in proptest::collection::vec(-1e3f64..1e3, 2..64)) {
            let k = xs.len();
            let spread = xs.iter().cloned().fold(f64::MIN, f64::max) - xs.iter().cloned().fold(f64::MAX, f64::min);
            prop_assume!(spread > 1e-3);
            let x = Array2::from_shape_vec((1, k), xs).unwrap();
            let (y, _) = layer_norm(&x);
            let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((norm - (k as f64).sqrt()).abs() < 1e-5);
        }
    }
}
