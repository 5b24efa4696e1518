//! Named parameter storage with Adam state.

use std::collections::BTreeMap;

use ndarray::Array2;

use crate::error::{Error, Result};

use super::tape::Gradients;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone)]
struct Slot {
    value: Array2<f64>,
    m: Array2<f64>,
    v: Array2<f64>,
}

/// A flat map from parameter names to values plus first/second Adam
/// moments, with one step counter shared by every parameter in the store.
/// Keep one store per optimizer group so the counter matches the update
/// cadence of its parameters.
#[derive(Clone, Default)]
pub struct ParamStore {
    slots: BTreeMap<String, Slot>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new parameter; the name must be unused.
    pub fn insert(&mut self, name: &str, value: Array2<f64>) -> Result<()> {
        if self.slots.contains_key(name) {
            return Err(Error::Contract(format!("parameter {name} already exists")));
        }
        let m = Array2::zeros(value.dim());
        let v = Array2::zeros(value.dim());
        self.slots.insert(name.to_string(), Slot { value, m, v });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Array2<f64>> {
        self.slots
            .get(name)
            .map(|s| &s.value)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    /// Overwrites a parameter value, keeping its optimizer moments.
    pub fn set_value(&mut self, name: &str, value: Array2<f64>) -> Result<()> {
        let slot = self
            .slots
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
        if slot.value.dim() != value.dim() {
            return Err(Error::Shape(format!(
                "parameter {name} has shape {:?}, got {:?}",
                slot.value.dim(),
                value.dim()
            )));
        }
        slot.value = value;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Optimizer steps taken so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// One Adam update (β₁ = 0.9, β₂ = 0.999, ε = 1e-8) applied to every
    /// parameter present in `grads`; parameters without a gradient keep
    /// their state. The shared step counter advances once.
    pub fn adam_step(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::Contract(format!("learning rate must be positive, got {lr}")));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        for (name, g) in grads.params() {
            let slot = self
                .slots
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter {name}")))?;
            if slot.value.dim() != g.dim() {
                return Err(Error::Shape(format!(
                    "gradient for {name} has shape {:?}, expected {:?}",
                    g.dim(),
                    slot.value.dim()
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient for {name}")));
            }
            ndarray::Zip::from(&mut slot.m).and(g).for_each(|m, &gi| {
                *m = BETA1 * *m + (1.0 - BETA1) * gi;
            });
            ndarray::Zip::from(&mut slot.v).and(g).for_each(|v, &gi| {
                *v = BETA2 * *v + (1.0 - BETA2) * gi * gi;
            });
            ndarray::Zip::from(&mut slot.value)
                .and(&slot.m)
                .and(&slot.v)
                .for_each(|p, &m, &v| {
                    let m_hat = m / bc1;
                    let v_hat = v / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                });
        }
        Ok(())
    }

    /// Copies of all current values, e.g. for best-epoch restoration.
    pub fn snapshot_values(&self) -> BTreeMap<String, Array2<f64>> {
        self.slots.iter().map(|(k, s)| (k.clone(), s.value.clone())).collect()
    }

    /// Restores values from a snapshot; optimizer moments are untouched.
    pub fn restore_values(&mut self, snapshot: &BTreeMap<String, Array2<f64>>) -> Result<()> {
        for (name, value) in snapshot {
            self.set_value(name, value.clone())?;
        }
        Ok(())
    }

    /// Euclidean norm over every parameter entry, for diagnostics.
    pub fn l2_norm(&self) -> f64 {
        self.slots
            .values()
            .map(|s| s.value.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// (value, m, v) of one parameter, for serialization.
    pub(crate) fn slot_state(&self, name: &str) -> Result<(&Array2<f64>, &Array2<f64>, &Array2<f64>)> {
        self.slots
            .get(name)
            .map(|s| (&s.value, &s.m, &s.v))
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    /// Installs a fully specified slot, for deserialization.
    pub(crate) fn load_slot(
        &mut self,
        name: &str,
        value: Array2<f64>,
        m: Array2<f64>,
        v: Array2<f64>,
    ) -> Result<()> {
        if value.dim() != m.dim() || value.dim() != v.dim() {
            return Err(Error::Shape(format!("inconsistent moment shapes for {name}")));
        }
        self.slots.insert(name.to_string(), Slot { value, m, v });
        Ok(())
    }

    pub(crate) fn set_step(&mut self, step: u64) {
        self.step = step;
    }
}
