use super::{Graph, Tensor, TensorError, Var};

/// Compare the reverse-mode gradient of `f` at `at` against central finite
/// differences with step `h`, returning the maximum relative error.
///
/// The relative error of a pair `(a, b)` is `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn finite_diff_check<F>(f: F, at: &Tensor<f64>, h: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var, TensorError>,
{
    assert!(h > 0.0, "finite difference step must be positive");
    let mut probe = at.clone();
    probe.requires_grad = true;

    let mut g = Graph::new();
    let x = g.leaf(&probe);
    let out = f(&mut g, x)?;
    if g.data(out).len() != 1 {
        return Err(TensorError::NonScalarLoss { shape: g.shape(out).to_vec() });
    }
    g.backward(out)?;
    let analytic: Vec<f64> = g.grad(x).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; at.numel()]);

    let eval = |t: &Tensor<f64>| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let x = g.leaf(t);
        let out = f(&mut g, x)?;
        Ok(g.data(out)[0])
    };

    let mut worst = 0.0f64;
    let mut bumped = probe.clone();
    bumped.requires_grad = false;
    for i in 0..at.numel() {
        let orig = bumped.data()[i];
        bumped.data_mut()[i] = orig + h;
        let up = eval(&bumped)?;
        bumped.data_mut()[i] = orig - h;
        let down = eval(&bumped)?;
        bumped.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}
