use std::collections::HashMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// A trainable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.rows(), value.cols());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }
}

/// Named parameters in insertion order. Ids are only meaningful for the
/// store that issued them.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointHeader {
    pub format: u32,
    pub names: Vec<String>,
    #[serde(flatten)]
    pub meta: Map<String, Value>,
}

#[derive(Serialize, Deserialize)]
struct ParamLine<'a> {
    name: std::borrow::Cow<'a, str>,
    rows: usize,
    cols: usize,
    data: std::borrow::Cow<'a, [f64]>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(TensorError::DuplicateParam(name));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param::new(name, value));
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name)
            .ok_or_else(|| TensorError::Checkpoint(format!("missing parameter {name:?}")))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn names(&self) -> Vec<String> {
        self.params.iter().map(|p| p.name.clone()).collect()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Copies every parameter whose name starts with `prefix` into a new store.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            out.add(p.name.clone(), p.value.clone())
                .expect("names unique in source store");
        }
        out
    }

    /// Overwrites values of same-named parameters from `other`; shapes must agree.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for p in &other.params {
            let id = self.require(&p.name)?;
            let dst = &mut self.params[id.0];
            if dst.value.shape() != p.value.shape() {
                return Err(TensorError::Checkpoint(format!(
                    "{}: shape {:?} vs {:?}",
                    p.name,
                    dst.value.shape(),
                    p.value.shape()
                )));
            }
            dst.value = p.value.clone();
        }
        Ok(())
    }

    pub fn save_checkpoint<W: Write>(&self, mut w: W, meta: Map<String, Value>) -> Result<()> {
        let header = CheckpointHeader {
            format: 1,
            names: self.names(),
            meta,
        };
        let io = |e: std::io::Error| TensorError::Checkpoint(e.to_string());
        let json = |e: serde_json::Error| TensorError::Checkpoint(e.to_string());
        serde_json::to_writer(&mut w, &header).map_err(json)?;
        w.write_all(b"\n").map_err(io)?;
        for p in &self.params {
            let line = ParamLine {
                name: p.name.as_str().into(),
                rows: p.value.rows(),
                cols: p.value.cols(),
                data: p.value.data().into(),
            };
            serde_json::to_writer(&mut w, &line).map_err(json)?;
            w.write_all(b"\n").map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn load_checkpoint<R: BufRead>(r: R) -> Result<(ParamStore, CheckpointHeader)> {
        let mut lines = r.lines();
        let err = |m: String| TensorError::Checkpoint(m);
        let header_line = lines
            .next()
            .ok_or_else(|| err("empty checkpoint".into()))?
            .map_err(|e| err(e.to_string()))?;
        let header: CheckpointHeader = serde_json::from_str(&header_line).map_err(|e| err(format!("header: {e}")))?;
        if header.format != 1 {
            return Err(err(format!("unsupported format {}", header.format)));
        }
        let mut store = ParamStore::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| err(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let p: ParamLine = serde_json::from_str(&line).map_err(|e| err(format!("line {}: {e}", i + 2)))?;
            let value = Tensor::from_vec(p.rows, p.cols, p.data.into_owned())?;
            if !value.is_finite() {
                return Err(err(format!("{}: non-finite value", p.name)));
            }
            store.add(p.name.into_owned(), value)?;
        }
        if store.names() != header.names {
            return Err(err("parameter lines disagree with header names".into()));
        }
        Ok((store, header))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut rng = seeded(1);
        let mut store = ParamStore::new();
        store.add("a", Tensor::xavier(3, 4, &mut rng)).unwrap();
        store.add("b", Tensor::xavier(1, 5, &mut rng)).unwrap();
        let mut meta = Map::new();
        meta.insert("stage".into(), Value::from("test"));
        let mut buf = Vec::new();
        store.save_checkpoint(&mut buf, meta.clone()).unwrap();
        let (back, header) = ParamStore::load_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(header.names, vec!["a", "b"]);
        assert_eq!(header.meta, meta);
        assert_eq!(back.get(ParamId(0)).value, store.get(ParamId(0)).value);
        assert_eq!(back.get(ParamId(1)).value, store.get(ParamId(1)).value);
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("{\"format\":1,\"names\":[\"a\",\"b\"]"));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(1, 1)).unwrap();
        assert_eq!(
            store.add("w", Tensor::zeros(1, 1)),
            Err(TensorError::DuplicateParam("w".into()))
        );
    }
}
