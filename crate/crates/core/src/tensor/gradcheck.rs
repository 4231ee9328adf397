use super::{Graph, Real, Result, Tensor, Var};

#[derive(Debug, Clone)]
pub struct GradCheckReport<T> {
    pub max_rel_error: T,
    pub worst_index: usize,
    pub autodiff: Vec<T>,
    pub finite_difference: Vec<T>,
}

/// Max over coordinates of `|ad − fd| / (|ad| + |fd| + 1e-8)` where `fd` is the
/// central difference with step `h`.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, h: f64) -> Result<T>
where
    T: Real,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    Ok(grad_check_report(f, x, h)?.max_rel_error)
}

pub fn grad_check_report<T, F>(f: F, x: &Tensor<T>, h: f64) -> Result<GradCheckReport<T>>
where
    T: Real,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let eval = |point: &Tensor<T>| -> Result<T> {
        let mut g = Graph::new();
        let v = g.constant(point.clone());
        let out = f(&mut g, v)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let v = g.leaf(x.clone(), true);
    let out = f(&mut g, v)?;
    let autodiff = if g.requires_grad(out) {
        g.backward(out)?;
        g.grad_or_zeros(v).into_data()
    } else {
        vec![T::zero(); x.len()]
    };

    let step = T::lit(h);
    let mut fd = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        fd.push((up - down) / (step + step));
    }

    let floor = T::lit(1e-8);
    let (worst_index, max_rel_error) = autodiff
        .iter()
        .zip(&fd)
        .map(|(&a, &d)| (a - d).abs() / (a.abs() + d.abs() + floor))
        .enumerate()
        .fold((0, T::zero()), |acc, (i, e)| if e > acc.1 { (i, e) } else { acc });
    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        autodiff,
        finite_difference: fd,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::<f64>::from_fn(&[4], |i| i as f64);
        let err = grad_check(
            |g, _x| Ok(g.constant(Tensor::scalar(3.0))),
            &x,
            1e-3,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn sum_of_squares_passes() {
        let x = Tensor::<f64>::from_fn(&[6], |i| (i as f64 * 0.37).sin());
        let err = grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                g.sum(sq)
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }
}
