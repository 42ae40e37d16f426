//! Dense tensors, a reverse-mode tape, and a finite-difference oracle.

mod tape;
mod tensor;

pub use tape::{AttentionMask, AttentionWeights, Gradients, Tape, Var};
pub use tensor::{matmul_raw, Tensor};

/// Layer-norm epsilon used by the model.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Central-difference gradient of a scalar function, one coordinate at a time.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    out
}

/// Largest elementwise `|a−b| / max(|a|, |b|, 1e-8)`.
pub fn max_relative_error(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_diff_examples() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let g = finite_diff_grad(|t| t.data().iter().map(|v| v * v).sum(), &x, 1e-5);
        assert!((g.data()[0] - 2.0).abs() < 1e-6 && (g.data()[1] - 4.0).abs() < 1e-6);

        let g = finite_diff_grad(|_| 3.0, &x, 1e-5);
        assert_eq!(g.data(), &[0.0, 0.0]);

        for h in [1e-3, 1e-5] {
            let g = finite_diff_grad(|t| 2.5 * t.data().iter().sum::<f64>(), &x, h);
            assert!(g.data().iter().all(|v| (v - 2.5).abs() < 1e-9));
        }
    }
}
