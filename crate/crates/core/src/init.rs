//! Weight initialisers.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

/// Initialisation scheme for square projection matrices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitMode {
    /// Haar-distributed orthogonal matrix.
    Orthogonal,
    /// I.i.d. `N(0, 1/d)` entries.
    Gaussian,
}

/// Random `d x d` orthogonal matrix: QR of a Gaussian matrix with the signs of
/// `R`'s diagonal folded into `Q`, which makes the draw uniform over O(d).
pub fn orthogonal<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Tensor {
    let g = DMatrix::<f64>::from_fn(d, d, |_, _| rng.sample(StandardNormal));
    let qr = g.qr();
    let (mut q, r) = qr.unpack();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let mut data = Vec::with_capacity(d * d);
    for i in 0..d {
        for j in 0..d {
            data.push(q[(i, j)]);
        }
    }
    Tensor::new(&[d, d], data).expect("square")
}

pub fn square<R: Rng + ?Sized>(d: usize, mode: InitMode, rng: &mut R) -> Tensor {
    match mode {
        InitMode::Orthogonal => orthogonal(d, rng),
        InitMode::Gaussian => Tensor::randn(&[d, d], 1.0 / (d as f64).sqrt(), rng),
    }
}

/// Fan-in scaled Gaussian for a `[fan_in, fan_out]` weight.
pub fn fan_in<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    Tensor::randn(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn orthogonal_rows_and_columns() {
        for d in [1, 4, 33, 128] {
            let w = orthogonal(d, &mut rng::stream(5, d as u64));
            let wwt = w.matmul(&w.transpose().unwrap()).unwrap();
            assert!(wwt.max_abs_diff(&Tensor::eye(d)) < 1e-8, "d={d}");
            let wtw = w.transpose().unwrap().matmul(&w).unwrap();
            assert!(wtw.max_abs_diff(&Tensor::eye(d)) < 1e-8, "d={d}");
        }
    }

    #[test]
    fn orthogonal_is_seeded() {
        let a = orthogonal(8, &mut rng::stream(1, 0));
        let b = orthogonal(8, &mut rng::stream(1, 0));
        let c = orthogonal(8, &mut rng::stream(2, 0));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
