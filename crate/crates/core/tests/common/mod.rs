#![allow(dead_code)]

pub mod oracles;

use std::sync::Arc;

use nalgebra::DMatrix;
use rknfc::solver::Force;

/// `f(q) = A q + g` with `A = −(MᵀM + I)`.
pub fn affine_problem(m: [f64; 9], g: [f64; 3]) -> (Arc<Force>, DMatrix<f64>) {
    let m = DMatrix::from_row_slice(3, 3, &m);
    let a = -(m.transpose() * &m + DMatrix::identity(3, 3));
    let a2 = a.clone();
    let f: Arc<Force> = Arc::new(move |q: &[f64], out: &mut [f64]| {
        for i in 0..3 {
            out[i] = g[i] + (0..3).map(|j| a2[(i, j)] * q[j]).sum::<f64>();
        }
        Ok(())
    });
    (f, a)
}
