//! Dense kernels shared by the backbone and the decoder.

use std::cell::Cell;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

/// Matrix product that also tallies multiply-accumulates on this thread.
pub fn mm(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Array2<f64> {
    MACS.with(|c| c.set(c.get() + (a.nrows() * a.ncols() * b.ncols()) as u64));
    a.dot(b)
}

/// Runs `f` and returns the multiply-accumulates it performed through [`mm`].
pub fn count_macs<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let before = MACS.with(Cell::get);
    let out = f();
    (out, MACS.with(Cell::get) - before)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub fn gelu(z: f64) -> f64 {
    0.5 * z * (1.0 + (GELU_C * (z + GELU_K * z * z * z)).tanh())
}

pub fn gelu_grad(z: f64) -> f64 {
    let t = (GELU_C * (z + GELU_K * z * z * z)).tanh();
    0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * z * z)
}

pub const LN_EPS: f64 = 1e-5;

/// Row-wise layer norm cache: normalised rows and inverse std per row.
pub struct LayerNormCache {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

pub fn layer_norm(x: &Array2<f64>, gamma: &Array1<f64>, beta: &Array1<f64>) -> (Array2<f64>, LayerNormCache) {
    let n = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        *is = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * *is);
    }
    let y = &xhat * gamma + beta;
    (y, LayerNormCache { xhat, inv_std })
}

/// Returns dx and accumulates dgamma, dbeta.
pub fn layer_norm_backward(
    dy: &Array2<f64>,
    gamma: &Array1<f64>,
    cache: &LayerNormCache,
    dgamma: &mut Array1<f64>,
    dbeta: &mut Array1<f64>,
) -> Array2<f64> {
    *dgamma += &(dy * &cache.xhat).sum_axis(Axis(0));
    *dbeta += &dy.sum_axis(Axis(0));
    let n = dy.ncols() as f64;
    let dxhat = dy * gamma;
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let g = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let mean_g = g.sum() / n;
        let mean_gx = g.dot(&xh) / n;
        let is = cache.inv_std[i];
        for j in 0..dy.ncols() {
            dx[[i, j]] = is * (g[j] - mean_g - xh[j] * mean_gx);
        }
    }
    dx
}

/// In-place row softmax.
pub fn softmax_rows(s: &mut Array2<f64>) {
    for mut row in s.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
}

/// Backward of row softmax given its output `a` and upstream `da`.
pub fn softmax_rows_backward(a: &Array2<f64>, da: &Array2<f64>) -> Array2<f64> {
    let mut ds = Array2::zeros(a.raw_dim());
    for i in 0..a.nrows() {
        let ar: ArrayView1<f64> = a.row(i);
        let dr = da.row(i);
        let inner = ar.dot(&dr);
        for j in 0..a.ncols() {
            ds[[i, j]] = ar[j] * (dr[j] - inner);
        }
    }
    ds
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &z in &[-4.0, -1.3, -0.2, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(z + h) - gelu(z - h)) / (2.0 * h);
            assert!((fd - gelu_grad(z)).abs() < 1e-8, "z={z}");
        }
        assert_eq!(gelu(0.0), 0.0);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(800.0) == 1.0 && sigmoid(-800.0) == 0.0);
    }

    #[test]
    fn mac_counter_tallies_products() {
        let a = Array2::<f64>::ones((3, 4));
        let b = Array2::<f64>::ones((4, 5));
        let (_, macs) = count_macs(|| mm(&a.view(), &b.view()));
        assert_eq!(macs, 60);
    }
}
