use super::{Scalar, Tensor};

/// Central-difference gradient of a scalar function:
/// `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` for every coordinate.
pub fn finite_diff_grad<T: Scalar>(
    mut f: impl FnMut(&Tensor<T>) -> T,
    x: &Tensor<T>,
    eps: T,
) -> Tensor<T> {
    assert!(eps > T::zero(), "finite-difference step must be positive");
    let two = T::one() + T::one();
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (two * eps);
    }
    grad
}

/// `max |a - b| / max(max |a|, max |b|)`, or 0 when both are zero.
pub fn relative_error<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    relative_error_all(std::slice::from_ref(a), std::slice::from_ref(b))
}

/// [`relative_error`] of two tensor lists read as one flat vector each.
///
/// Use it for the gradient of a whole parameter set: a tensor whose true
/// gradient is zero would otherwise be judged on rounding noise alone.
pub fn relative_error_all<T: Scalar>(a: &[Tensor<T>], b: &[Tensor<T>]) -> f64 {
    assert_eq!(a.len(), b.len(), "compared lists differ in length");
    let (mut diff, mut scale) = (0.0f64, 0.0f64);
    for (a, b) in a.iter().zip(b) {
        assert_eq!(a.shape(), b.shape(), "compared tensors differ in shape");
        for (x, y) in a.data().iter().zip(b.data()) {
            let (x, y) = (x.as_f64(), y.as_f64());
            diff = diff.max((x - y).abs());
            scale = scale.max(x.abs()).max(y.abs());
        }
    }
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::<f64>::from_fn(&[2, 3], |i| i as f64 * 0.7 - 1.0);
        let g = finite_diff_grad(|t| t.sum(), &x, 1e-5);
        assert!(g.data().iter().all(|v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::<f64>::new(&[1], vec![3.0]).unwrap();
        let g = finite_diff_grad(|t| t.data()[0] * t.data()[0], &x, 1e-5);
        assert!((g.data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn relative_error_is_scale_free() {
        let a = Tensor::<f64>::new(&[2], vec![100.0, 0.0]).unwrap();
        let b = Tensor::<f64>::new(&[2], vec![101.0, 0.0]).unwrap();
        assert!((relative_error(&a, &b) - 1.0 / 101.0).abs() < 1e-12);
        assert_eq!(relative_error(&Tensor::<f64>::zeros(&[3]), &Tensor::zeros(&[3])), 0.0);
    }

    #[test]
    fn list_error_uses_the_joint_scale() {
        let t = |v: Vec<f64>| Tensor::new(&[v.len()], v).unwrap();
        let a = [t(vec![2.0, -4.0]), t(vec![0.0])];
        let b = [t(vec![2.0, -4.0]), t(vec![1e-10])];
        assert!((relative_error_all(&a, &b) - 1e-10 / 4.0).abs() < 1e-20);
        assert_eq!(relative_error(&a[1], &b[1]), 1.0);
    }
}
