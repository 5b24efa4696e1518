//! The `planval-ckpt v1` checkpoint container.
//!
//! A checkpoint is a self-describing UTF-8 file: a magic header, a block of
//! `meta <key> <value>` lines, then named float64 arrays with shapes.
//! Floats are written with 17 significant digits, which IEEE-754 doubles
//! round-trip bit-exactly.
//!
//! ```text
//! planval-ckpt v1
//! meta seed 42
//! meta step 10000
//! array actor/net.w0 3 64
//! <row of 64 floats>
//! ...
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::diff::ParamStore;
use crate::error::{Error, Result};

const MAGIC: &str = "planval-ckpt v1";

/// In-memory checkpoint: string metadata plus named arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    meta: BTreeMap<String, String>,
    arrays: BTreeMap<String, Array2<f64>>,
}

fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn valid_token(name: &str) -> bool {
    !name.is_empty() && !name.contains(char::is_whitespace)
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: &str) -> Result<()> {
        if !valid_token(key) {
            return Err(Error::Contract(format!("bad metadata key {key:?}")));
        }
        if value.contains('\n') {
            return Err(Error::Contract("metadata values must be single-line".into()));
        }
        self.meta.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    /// Requires the named metadata entry.
    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.meta(key)
            .ok_or_else(|| Error::Config(format!("checkpoint is missing metadata {key}")))
    }

    pub fn insert_array(&mut self, name: &str, array: Array2<f64>) -> Result<()> {
        if !valid_token(name) {
            return Err(Error::Contract(format!("bad array name {name:?}")));
        }
        if self.arrays.contains_key(name) {
            return Err(Error::Contract(format!("array {name} already present")));
        }
        if array.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("array {name} has non-finite entries")));
        }
        self.arrays.insert(name.to_string(), array);
        Ok(())
    }

    pub fn array(&self, name: &str) -> Result<&Array2<f64>> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::Config(format!("checkpoint has no array {name}")))
    }

    pub fn array_names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(String::as_str)
    }

    /// Embeds a parameter store (values and Adam state) under `prefix`.
    pub fn put_store(&mut self, prefix: &str, store: &ParamStore) -> Result<()> {
        for name in store.names().map(str::to_string).collect::<Vec<_>>() {
            let (value, m, v) = store.slot_state(&name)?;
            self.insert_array(&format!("{prefix}/{name}"), value.clone())?;
            self.insert_array(&format!("{prefix}/{name}.adam_m"), m.clone())?;
            self.insert_array(&format!("{prefix}/{name}.adam_v"), v.clone())?;
        }
        self.set_meta(&format!("{prefix}.adam_step"), &store.step().to_string())
    }

    /// Reconstructs a parameter store embedded under `prefix`.
    pub fn get_store(&self, prefix: &str) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        let lead = format!("{prefix}/");
        for (name, value) in &self.arrays {
            let Some(param) = name.strip_prefix(&lead) else { continue };
            if param.ends_with(".adam_m") || param.ends_with(".adam_v") {
                continue;
            }
            let m = self.array(&format!("{name}.adam_m"))?.clone();
            let v = self.array(&format!("{name}.adam_v"))?.clone();
            store.load_slot(param, value.clone(), m, v)?;
        }
        if store.is_empty() {
            return Err(Error::Config(format!("checkpoint has no store under {prefix}")));
        }
        let step: u64 = self
            .require_meta(&format!("{prefix}.adam_step"))?
            .parse()
            .map_err(|_| Error::Config(format!("bad adam_step for {prefix}")))?;
        store.set_step(step);
        Ok(store)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from(MAGIC);
        out.push('\n');
        for (k, v) in &self.meta {
            out.push_str("meta ");
            out.push_str(k);
            out.push(' ');
            out.push_str(v);
            out.push('\n');
        }
        for (name, array) in &self.arrays {
            let (rows, cols) = array.dim();
            out.push_str(&format!("array {name} {rows} {cols}\n"));
            for row in array.rows() {
                let line: Vec<String> = row.iter().map(|v| fmt_f64(*v)).collect();
                out.push_str(&line.join(" "));
                out.push('\n');
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(first) if first.trim_end() == MAGIC => {}
            other => {
                return Err(Error::Config(format!(
                    "not a {MAGIC} file (first line {other:?})"
                )))
            }
        }
        let mut ckpt = Self::new();
        while let Some(line) = lines.next() {
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("meta ") {
                // An empty value loses its separating space to trim_end.
                let (key, value) = rest.split_once(' ').unwrap_or((rest, ""));
                ckpt.set_meta(key, value)?;
            } else if let Some(rest) = line.strip_prefix("array ") {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                if parts.len() != 3 {
                    return Err(Error::Config(format!("bad array header {line:?}")));
                }
                let name = parts[0];
                let rows: usize = parts[1]
                    .parse()
                    .map_err(|_| Error::Config(format!("bad row count in {line:?}")))?;
                let cols: usize = parts[2]
                    .parse()
                    .map_err(|_| Error::Config(format!("bad column count in {line:?}")))?;
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    let row_line = lines
                        .next()
                        .ok_or_else(|| Error::Config(format!("array {name} truncated")))?;
                    let mut n = 0;
                    for tok in row_line.split_whitespace() {
                        let v: f64 = tok.parse().map_err(|_| {
                            Error::Config(format!("bad float {tok:?} in array {name} row {r}"))
                        })?;
                        data.push(v);
                        n += 1;
                    }
                    if n != cols {
                        return Err(Error::Config(format!(
                            "array {name} row {r} has {n} entries, expected {cols}"
                        )));
                    }
                }
                let array = Array2::from_shape_vec((rows, cols), data)
                    .map_err(|e| Error::Config(e.to_string()))?;
                ckpt.insert_array(name, array)?;
            } else {
                return Err(Error::Config(format!("unrecognized checkpoint line {line:?}")));
            }
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::Mlp;
    use crate::rng;
    use ndarray::array;

    #[test]
    fn text_round_trip_is_bit_exact() {
        let mut ckpt = Checkpoint::new();
        ckpt.set_meta("seed", "42").unwrap();
        ckpt.set_meta("config_digest", "deadbeef").unwrap();
        ckpt.insert_array(
            "weird",
            array![[f64::MIN_POSITIVE, -0.0, std::f64::consts::PI], [1e300, -1e-300, 0.1]],
        )
        .unwrap();
        let text = ckpt.to_text();
        let back = Checkpoint::from_text(&text).unwrap();
        assert_eq!(back.meta("seed"), Some("42"));
        let a = ckpt.array("weird").unwrap();
        let b = back.array("weird").unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn an_empty_meta_value_survives_the_round_trip() {
        let mut ckpt = Checkpoint::new();
        ckpt.set_meta("tags", "").unwrap();
        ckpt.set_meta("note", "kept").unwrap();
        let back = Checkpoint::from_text(&ckpt.to_text()).unwrap();
        assert_eq!(back.meta("tags"), Some(""));
        assert_eq!(back.meta("note"), Some("kept"));
        assert_eq!(back.to_text(), ckpt.to_text());
    }

    #[test]
    fn stores_round_trip_with_optimizer_state() {
        let mut store = ParamStore::new();
        let mut stream = rng::derive(1, "ckpt-test");
        Mlp::init(&mut store, "net", &[2, 3, 1], &mut stream).unwrap();
        // Take a couple of optimizer steps so the moments are non-trivial.
        for _ in 0..3 {
            let mut tape = crate::diff::Tape::new();
            let x = tape.input(array![[0.5, -1.0]]);
            let w = tape.param(&store, "net.w0").unwrap();
            let y = tape.matmul(x, w).unwrap();
            let loss = tape.sum_all(y);
            let grads = tape.backward(loss).unwrap();
            store.adam_step(&grads, 1e-3).unwrap();
        }
        let mut ckpt = Checkpoint::new();
        ckpt.put_store("actor", &store).unwrap();
        let text = ckpt.to_text();
        let restored = Checkpoint::from_text(&text).unwrap().get_store("actor").unwrap();
        assert_eq!(restored.step(), store.step());
        for name in store.names() {
            let (v0, m0, mv0) = store.slot_state(name).unwrap();
            let (v1, m1, mv1) = restored.slot_state(name).unwrap();
            assert_eq!(v0, v1);
            assert_eq!(m0, m1);
            assert_eq!(mv0, mv1);
        }
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ckpt");
        let mut ckpt = Checkpoint::new();
        ckpt.set_meta("step", "7").unwrap();
        ckpt.insert_array("a", array![[1.0, 2.0]]).unwrap();
        ckpt.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ckpt);
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        assert!(Checkpoint::from_text("not a checkpoint").is_err());
        assert!(Checkpoint::from_text("planval-ckpt v1\narray a 1 2\n1.0\n").is_err());
        assert!(Checkpoint::from_text("planval-ckpt v1\nnonsense here\n").is_err());
        let mut ckpt = Checkpoint::new();
        assert!(ckpt.insert_array("has space", array![[1.0]]).is_err());
        assert!(ckpt.insert_array("nan", array![[f64::NAN]]).is_err());
        ckpt.insert_array("a", array![[1.0]]).unwrap();
        assert!(ckpt.insert_array("a", array![[2.0]]).is_err());
        assert!(ckpt.get_store("missing").is_err());
    }
}
