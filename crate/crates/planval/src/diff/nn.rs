//! Multilayer perceptrons and the squashed-Gaussian policy head.

use ndarray::{s, Array2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::Stream;

use super::store::ParamStore;
use super::tape::{softplus, tanh_sq_corr, Gradients, Tape, Var};

/// Clamp range for policy log standard deviations.
pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// ½ ln(2π).
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// A fully connected ReLU network bound to named parameters in a store.
/// Layer i maps `sizes[i]` to `sizes[i+1]`; the output layer is linear.
#[derive(Debug, Clone)]
pub struct Mlp {
    prefix: String,
    sizes: Vec<usize>,
}

impl Mlp {
    /// Creates parameters `{prefix}.w{i}` / `{prefix}.b{i}` with entries
    /// uniform in ±1/√fan_in, and returns the binding.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        sizes: &[usize],
        rng: &mut Stream,
    ) -> Result<Self> {
        let mlp = Self::bind(prefix, sizes)?;
        for i in 0..sizes.len() - 1 {
            let (fan_in, fan_out) = (sizes[i], sizes[i + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut w = Array2::zeros((fan_in, fan_out));
            for v in w.iter_mut() {
                *v = rng.gen_range(-bound..bound);
            }
            let mut b = Array2::zeros((1, fan_out));
            for v in b.iter_mut() {
                *v = rng.gen_range(-bound..bound);
            }
            store.insert(&mlp.w_name(i), w)?;
            store.insert(&mlp.b_name(i), b)?;
        }
        Ok(mlp)
    }

    /// Binds to already existing parameters (e.g. after loading a
    /// checkpoint) without touching the store.
    pub fn bind(prefix: &str, sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::Contract(
                "an MLP needs at least input and output sizes".into(),
            ));
        }
        if sizes.iter().any(|&s| s == 0) {
            return Err(Error::Contract("zero-width MLP layer".into()));
        }
        Ok(Self { prefix: prefix.to_string(), sizes: sizes.to_vec() })
    }

    pub fn in_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    /// Forward pass on the tape.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let (_, cols) = tape.shape(x);
        if cols != self.in_dim() {
            return Err(Error::Shape(format!(
                "{} expects {} input columns, got {cols}",
                self.prefix,
                self.in_dim()
            )));
        }
        let mut h = x;
        let layers = self.sizes.len() - 1;
        for i in 0..layers {
            let w = tape.param(store, &self.w_name(i))?;
            let b = tape.param(store, &self.b_name(i))?;
            let lin = tape.matmul(h, w)?;
            h = tape.add_bias(lin, b)?;
            if i + 1 < layers {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Forward pass without recording, for action selection and targets.
    pub fn infer(&self, store: &ParamStore, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.dim().1 != self.in_dim() {
            return Err(Error::Shape(format!(
                "{} expects {} input columns, got {}",
                self.prefix,
                self.in_dim(),
                x.dim().1
            )));
        }
        let mut h = x.clone();
        let layers = self.sizes.len() - 1;
        for i in 0..layers {
            let w = store.get(&self.w_name(i))?;
            let b = store.get(&self.b_name(i))?;
            h = h.dot(w) + b;
            if i + 1 < layers {
                h.mapv_inplace(|v| v.max(0.0));
            }
        }
        Ok(h)
    }

    fn w_name(&self, i: usize) -> String {
        format!("{}.w{i}", self.prefix)
    }

    fn b_name(&self, i: usize) -> String {
        format!("{}.b{i}", self.prefix)
    }
}

/// A reparameterized tanh-Gaussian action recorded on the tape.
pub struct GaussianSample {
    /// tanh-squashed action, n×d.
    pub action: Var,
    /// Per-row log density of the squashed sample, n×1.
    pub log_prob: Var,
    /// Pre-squash sample μ + σ·ε.
    pub pre: Var,
}

/// Splits a 2d-column head into mean and clamped log-std, draws the
/// reparameterized sample μ + exp(log_std)·noise, squashes it, and
/// accumulates the exact log density
///
///   log π(a) = Σ_d [ −log σ_d − ½ ln 2π − ½ ε_d² − ln(1 − tanh²(u_d)) ].
pub fn gaussian_head(tape: &mut Tape, head: Var, noise: Var) -> Result<GaussianSample> {
    let (rows, cols) = tape.shape(head);
    if cols % 2 != 0 {
        return Err(Error::Shape(format!(
            "gaussian head needs an even column count, got {cols}"
        )));
    }
    let d = cols / 2;
    if tape.shape(noise) != (rows, d) {
        return Err(Error::Shape(format!(
            "noise must be {rows}×{d}, got {:?}",
            tape.shape(noise)
        )));
    }
    let mean = tape.slice_cols(head, 0, d)?;
    let raw = tape.slice_cols(head, d, 2 * d)?;
    let log_std = tape.clamp(raw, LOG_STD_MIN, LOG_STD_MAX)?;
    let std = tape.exp(log_std);
    let scaled = tape.mul(std, noise)?;
    let pre = tape.add(mean, scaled)?;
    let action = tape.tanh(pre);

    let n2 = tape.mul(noise, noise)?;
    let half_n2 = tape.scale(n2, 0.5);
    let corr = tape.tanh_sq_corr(pre);
    let neg_ls = tape.scale(log_std, -1.0);
    let t = tape.add_const(neg_ls, -HALF_LN_2PI);
    let t = tape.sub(t, half_n2)?;
    let t = tape.sub(t, corr)?;
    let log_prob = tape.sum_rows(t);

    Ok(GaussianSample { action, log_prob, pre })
}

/// Splits a raw head matrix into (mean, clamped log-std) without a tape.
fn split_head(head: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
    let cols = head.dim().1;
    if cols % 2 != 0 {
        return Err(Error::Shape(format!(
            "gaussian head needs an even column count, got {cols}"
        )));
    }
    let d = cols / 2;
    let mean = head.slice(s![.., ..d]).to_owned();
    let log_std = head.slice(s![.., d..]).mapv(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX));
    Ok((mean, log_std))
}

/// Inference-path sample: returns the squashed action and its per-row log
/// density, matching [`gaussian_head`] exactly.
pub fn gaussian_sample_infer(
    head: &Array2<f64>,
    noise: &Array2<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let (mean, log_std) = split_head(head)?;
    if noise.dim() != mean.dim() {
        return Err(Error::Shape(format!(
            "noise must be {:?}, got {:?}",
            mean.dim(),
            noise.dim()
        )));
    }
    let pre = &mean + &(log_std.mapv(f64::exp) * noise);
    let action = pre.mapv(f64::tanh);
    let per_dim = ndarray::Zip::from(&log_std)
        .and(noise)
        .and(&pre)
        .map_collect(|&ls, &eps, &u| -ls - HALF_LN_2PI - 0.5 * eps * eps - tanh_sq_corr(u));
    let log_prob = per_dim.sum_axis(Axis(1)).insert_axis(Axis(1));
    Ok((action, log_prob))
}

/// Deterministic action: tanh of the head mean.
pub fn gaussian_mean_infer(head: &Array2<f64>) -> Result<Array2<f64>> {
    let (mean, _) = split_head(head)?;
    Ok(mean.mapv(f64::tanh))
}

/// Log density of an already squashed action under a head, for arbitrary
/// actions rather than reparameterized samples. Actions are pulled back
/// through atanh with a small clip away from ±1.
pub fn gaussian_log_prob_infer(head: &Array2<f64>, action: &Array2<f64>) -> Result<Array2<f64>> {
    let (mean, log_std) = split_head(head)?;
    if action.dim() != mean.dim() {
        return Err(Error::Shape(format!(
            "action must be {:?}, got {:?}",
            mean.dim(),
            action.dim()
        )));
    }
    const CLIP: f64 = 1.0 - 1e-9;
    let per_dim = ndarray::Zip::from(&mean)
        .and(&log_std)
        .and(action)
        .map_collect(|&mu, &ls, &a| {
            let u = a.clamp(-CLIP, CLIP).atanh();
            let z = (u - mu) / ls.exp();
            -ls - HALF_LN_2PI - 0.5 * z * z - tanh_sq_corr(u)
        });
    Ok(per_dim.sum_axis(Axis(1)).insert_axis(Axis(1)))
}

/// Σ_z softplus(z) helper re-exported for loss code that bounds raw values.
pub fn softplus_scalar(z: f64) -> f64 {
    softplus(z)
}

/// Gradients of a scalar loss with respect to every parameter of `store`,
/// taken at the current values. Convenience wrapper used by tests.
pub fn grads_of<F>(store: &ParamStore, f: F) -> Result<(f64, Gradients)>
where
    F: FnOnce(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let value = tape.value(loss)[[0, 0]];
    let grads = tape.backward(loss)?;
    Ok((value, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::array;

    #[test]
    fn tape_forward_equals_a_hand_rolled_forward() {
        let mut store = ParamStore::new();
        let mut stream = rng::derive(7, "mlp-test");
        let mlp = Mlp::init(&mut store, "net", &[2, 4, 1], &mut stream).unwrap();
        let x = array![[0.3, -1.2], [2.0, 0.4], [-0.5, 0.9]];

        // Same computation with plain ndarray calls.
        let w0 = store.get("net.w0").unwrap();
        let b0 = store.get("net.b0").unwrap();
        let w1 = store.get("net.w1").unwrap();
        let b1 = store.get("net.b1").unwrap();
        let h = (x.dot(w0) + b0).mapv(|v: f64| v.max(0.0));
        let expect = h.dot(w1) + b1;

        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let out = mlp.forward(&mut tape, &store, xv).unwrap();
        for (a, b) in tape.value(out).iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
        let infer = mlp.infer(&store, &x).unwrap();
        for (a, b) in infer.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn gaussian_head_matches_a_scalar_derivation() {
        // One row, one action dimension: mean 0.3, log_std −0.5, ε 0.7.
        let head = array![[0.3, -0.5]];
        let noise = array![[0.7]];
        let mut tape = Tape::new();
        let h = tape.input(head.clone());
        let n = tape.input(noise.clone());
        let sample = gaussian_head(&mut tape, h, n).unwrap();

        let pre = 0.3 + (-0.5f64).exp() * 0.7;
        let action = pre.tanh();
        let expect_lp = 0.5 - HALF_LN_2PI - 0.5 * 0.49 - (1.0 - action * action).ln();

        assert!((tape.value(sample.action)[[0, 0]] - action).abs() < 1e-12);
        assert!((tape.value(sample.log_prob)[[0, 0]] - expect_lp).abs() < 1e-12);

        let (ai, lpi) = gaussian_sample_infer(&head, &noise).unwrap();
        assert!((ai[[0, 0]] - action).abs() < 1e-15);
        assert!((lpi[[0, 0]] - expect_lp).abs() < 1e-12);
    }

    #[test]
    fn log_std_is_clamped() {
        let head = array![[0.0, 5.0]];
        let noise = array![[1.0]];
        let (action, _) = gaussian_sample_infer(&head, &noise).unwrap();
        // σ clamps to e², so the pre-squash value is exactly e².
        assert!((action[[0, 0]] - (2.0f64.exp()).tanh()).abs() < 1e-12);
    }

    #[test]
    fn density_of_a_sample_agrees_with_the_pullback_density() {
        let head = array![[0.1, -0.3, -0.2, 0.4]];
        let noise = array![[0.5, -1.1]];
        let (action, lp) = gaussian_sample_infer(&head, &noise).unwrap();
        let lp2 = gaussian_log_prob_infer(&head, &action).unwrap();
        assert!((lp[[0, 0]] - lp2[[0, 0]]).abs() < 1e-6);
    }

    #[test]
    fn mean_action_is_the_squashed_mean() {
        let head = array![[0.25, -0.75, 1.0, 1.0]];
        let mean = gaussian_mean_infer(&head).unwrap();
        assert!((mean[[0, 0]] - 0.25f64.tanh()).abs() < 1e-15);
        assert!((mean[[0, 1]] - (-0.75f64).tanh()).abs() < 1e-15);
    }
}
