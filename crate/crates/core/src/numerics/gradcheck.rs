use super::matrix::Matrix;

/// Denominator floor for the relative error, so parameters whose true
/// gradient is ~0 are judged on absolute error instead.
pub const REL_FLOOR: f64 = 1e-3;

/// Compare analytic gradients against central differences
/// `(f(x+ε) − f(x−ε)) / 2ε`, one scalar at a time.
///
/// Returns the largest `|analytic − numeric| / max(|analytic|, |numeric|, REL_FLOOR)`.
pub fn finite_diff_check(
    f: impl Fn(&[Matrix]) -> f64,
    params: &[Matrix],
    analytic: &[Matrix],
    epsilon: f64,
) -> f64 {
    let mut work: Vec<Matrix> = params.to_vec();
    let mut worst: f64 = 0.0;
    for p in 0..params.len() {
        for k in 0..params[p].data().len() {
            let orig = params[p].data()[k];
            work[p].data_mut()[k] = orig + epsilon;
            let up = f(&work);
            work[p].data_mut()[k] = orig - epsilon;
            let down = f(&work);
            work[p].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let a = analytic[p].data()[k];
            let denom = a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;

    #[test]
    fn linear_function_is_exact() {
        let w = Matrix::from_rows(&[vec![0.5, -1.5, 2.0]]).unwrap();
        let x = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let f = |ps: &[Matrix]| ps[0].matmul(&x).unwrap().get(0, 0);
        let analytic = vec![x.transpose()];
        let err = finite_diff_check(f, &[w], &analytic, 1e-4);
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn constant_function() {
        let w = Matrix::from_rows(&[vec![0.5, -1.5]]).unwrap();
        let f = |_: &[Matrix]| 4.2;
        let err = finite_diff_check(f, &[w], &[Matrix::zeros(1, 2)], 1e-4);
        assert_eq!(err, 0.0);
    }

    #[test]
    fn softmax_scaling_chain() {
        let a = Matrix::from_rows(&[vec![0.3, -0.2, 0.9], vec![1.1, 0.4, -0.7]]).unwrap();
        let v = Matrix::from_rows(&[vec![0.2, 1.0], vec![-0.5, 0.3], vec![0.8, -1.2]]).unwrap();
        let loss = |ps: &[Matrix], tape: &mut Tape| {
            let a = tape.leaf(ps[0].clone());
            let v = tape.leaf(ps[1].clone());
            let s = tape.row_softmax(a);
            let s = tape.scale_rows_to_max(s, 0.6);
            let y = tape.matmul(s, v).unwrap();
            let t = Matrix::zeros(2, 2);
            (tape.smooth_l1(y, &t, &[1.0, 0.5], 1.0).unwrap(), a, v)
        };
        let mut tape = Tape::new();
        let (l, av, vv) = loss(&[a.clone(), v.clone()], &mut tape);
        let g = tape.backward(l);
        let analytic = vec![g.get(av).unwrap().clone(), g.get(vv).unwrap().clone()];
        let f = |ps: &[Matrix]| {
            let mut t = Tape::new();
            let (l, _, _) = loss(ps, &mut t);
            t.value(l).get(0, 0)
        };
        let err = finite_diff_check(f, &[a, v], &analytic, 1e-5);
        assert!(err < 1e-6, "{err}");
    }
}
