use super::tensor::Tensor;

/// Central-difference gradient of a scalar-valued function at `at`.
///
/// Perturbs one coordinate at a time by `eps` in each direction, so the cost
/// is two evaluations of `f` per element. This is the reference oracle the
/// tests compare every analytic backward rule against; it is far too slow for
/// anything but checks on small tensors.
pub fn finite_difference_gradient(
    f: &mut dyn FnMut(&Tensor) -> f64,
    at: &Tensor,
    eps: f64,
) -> Tensor {
    assert!(eps > 0.0, "eps must be positive");
    let mut grad = vec![0.0; at.numel()];
    for i in 0..at.numel() {
        let mut plus = at.data().to_vec();
        let mut minus = at.data().to_vec();
        plus[i] += eps;
        minus[i] -= eps;
        let fp = f(&Tensor::from_vec(at.rows(), at.cols(), plus));
        let fm = f(&Tensor::from_vec(at.rows(), at.cols(), minus));
        grad[i] = (fp - fm) / (2.0 * eps);
    }
    Tensor::from_vec(at.rows(), at.cols(), grad)
}
