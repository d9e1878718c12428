//! Shared fixtures for the criterion benches.

use fisheye_hpe::tensor::Tensor;

/// Deterministic `c × size × size` tensor with values in `[-1, 1)`.
pub fn test_tensor(c: usize, size: usize) -> Tensor {
    let n = c * size * size;
    let data = (0..n).map(|i| ((i * 2_654_435_761) % 1000) as f64 / 500.0 - 1.0).collect();
    Tensor::new(vec![c, size, size], data).expect("valid shape")
}
