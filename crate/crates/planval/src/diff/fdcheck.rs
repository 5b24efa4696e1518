//! Central-difference verification of reverse-mode gradients.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::Stream;

use super::store::ParamStore;
use super::tape::Gradients;

/// Worst relative gradient error over randomly probed coordinates.
///
/// `f` must evaluate the loss and its gradients at the store's current
/// values. For each probe a parameter coordinate is nudged by ±eps and the
/// analytic derivative is compared against (f₊ − f₋)/(2·eps), scaled by
/// max(1, |analytic|, |numeric|).
pub fn finite_diff_check<F>(
    store: &mut ParamStore,
    eps: f64,
    n_probes: usize,
    rng: &mut Stream,
    mut f: F,
) -> Result<f64>
where
    F: FnMut(&ParamStore) -> Result<(f64, Gradients)>,
{
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("eps must be positive, got {eps}")));
    }
    let names: Vec<String> = store.names().map(str::to_string).collect();
    if names.is_empty() {
        return Err(Error::Contract("store has no parameters to probe".into()));
    }
    let (_, grads) = f(store)?;

    let mut worst = 0.0f64;
    for _ in 0..n_probes {
        let name = &names[rng.gen_range(0..names.len())];
        let base = store.get(name)?.clone();
        let (rows, cols) = base.dim();
        let (r, c) = (rng.gen_range(0..rows), rng.gen_range(0..cols));

        let analytic = match grads.param(name) {
            Some(g) => g[[r, c]],
            None => 0.0,
        };

        let mut plus = base.clone();
        plus[[r, c]] += eps;
        store.set_value(name, plus)?;
        let (f_plus, _) = f(store)?;

        let mut minus = base.clone();
        minus[[r, c]] -= eps;
        store.set_value(name, minus)?;
        let (f_minus, _) = f(store)?;

        store.set_value(name, base)?;

        let numeric = (f_plus - f_minus) / (2.0 * eps);
        let scale = 1.0_f64.max(analytic.abs()).max(numeric.abs());
        worst = worst.max((analytic - numeric).abs() / scale);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::nn::Mlp;
    use crate::diff::tape::Tape;
    use crate::rng;
    use ndarray::Array2;

    #[test]
    fn a_smooth_network_loss_passes_the_check() {
        let mut store = ParamStore::new();
        let mut stream = rng::derive(3, "fdcheck");
        let mlp = Mlp::init(&mut store, "f", &[3, 8, 2], &mut stream).unwrap();
        let x = Array2::from_shape_fn((5, 3), |(i, j)| ((i * 3 + j) as f64 * 0.37).sin());
        let target = Array2::from_shape_fn((5, 2), |(i, j)| ((i * 2 + j) as f64 * 0.61).cos());

        let mut probe_rng = rng::derive(4, "fdcheck-probes");
        let worst = finite_diff_check(&mut store, 1e-5, 40, &mut probe_rng, |store| {
            let mut tape = Tape::new();
            let xv = tape.input(x.clone());
            let out = mlp.forward(&mut tape, store, xv)?;
            let tv = tape.input(target.clone());
            let err = tape.sub(out, tv)?;
            let sq = tape.mul(err, err)?;
            let loss = tape.mean_all(sq);
            let value = tape.value(loss)[[0, 0]];
            Ok((value, tape.backward(loss)?))
        })
        .unwrap();
        assert!(worst < 1e-6, "worst relative error {worst}");
    }
}
