//! Named parameter tensors and the `HXC1` checkpoint format.
//!
//! Layout: ASCII `"HXC1\n"`, `u32` LE tensor count, then per tensor (in
//! name order): `u32` name length, UTF-8 name, `u32` rank, `u32` dims,
//! `f32` LE values. Names starting with `frozen.` are backbone weights that
//! training never touches; names starting with `meta.` carry architecture
//! metadata; everything else is trainable.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const HXC1_MAGIC: &[u8; 5] = b"HXC1\n";
pub const FROZEN_PREFIX: &str = "frozen.";
pub const META_PREFIX: &str = "meta.";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Frozen,
    Trainable,
    Meta,
}

pub fn kind_of(name: &str) -> ParamKind {
    if name.starts_with(FROZEN_PREFIX) {
        ParamKind::Frozen
    } else if name.starts_with(META_PREFIX) {
        ParamKind::Meta
    } else {
        ParamKind::Trainable
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn count(&self, kind: ParamKind) -> usize {
        self.tensors
            .iter()
            .filter(|(n, _)| kind_of(n) == kind)
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Total learnable parameters, frozen plus trainable (metadata excluded).
    pub fn count_params(&self) -> usize {
        self.count(ParamKind::Frozen) + self.count(ParamKind::Trainable)
    }

    /// Round every value to the nearest `f32`, the precision checkpoints keep.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    /// Register every tensor in `g`. Trainable tensors become leaves when
    /// `train` is set; everything else is a constant.
    pub fn bind(&self, g: &mut Graph, train: bool) -> BoundParams {
        self.bind_with(g, |n| train && kind_of(n) == ParamKind::Trainable)
    }

    /// Like [`ParamStore::bind`] with an explicit choice of leaves.
    pub fn bind_with(&self, g: &mut Graph, is_leaf: impl Fn(&str) -> bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .filter(|(n, _)| kind_of(n) != ParamKind::Meta)
            .map(|(n, t)| {
                let v = if is_leaf(n) {
                    g.leaf(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (n.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(HXC1_MAGIC);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 5 || &bytes[..5] != HXC1_MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: "HXC1",
            });
        }
        let mut pos = 5;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or(Error::Truncated {
                path: path.to_path_buf(),
                needed: pos + n,
                found: bytes.len(),
            })?;
            pos += n;
            Ok(s)
        };
        let u32_le = |b: &[u8]| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize;
        let count = u32_le(take(4)?);
        let mut store = ParamStore::new();
        for _ in 0..count {
            let nlen = u32_le(take(4)?);
            let name = String::from_utf8(take(nlen)?.to_vec()).map_err(|_| {
                Error::InvalidArgument(format!("{}: tensor name is not UTF-8", path.display()))
            })?;
            let rank = u32_le(take(4)?);
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32_le(take(4)?));
            }
            let numel: usize = shape.iter().product();
            let data: Vec<f64> = take(4 * numel)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("{}: tensor {name}", path.display())));
            }
            store.insert(name, Tensor::new(shape, data)?);
        }
        if pos != bytes.len() {
            return Err(Error::InvalidArgument(format!(
                "{}: {} trailing bytes",
                path.display(),
                bytes.len() - pos
            )));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        ParamStore::decode(&bytes, path)
    }
}

/// Graph handles for a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    /// Replace or add a binding, e.g. to route one tensor through a
    /// caller-owned variable.
    pub fn insert(&mut self, name: impl Into<String>, v: Var) {
        self.vars.insert(name.into(), v);
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Gradients of trainable leaves after `g.backward`, keyed by name.
    /// Leaves that received no gradient map to zeros.
    pub fn grads(&self, g: &Graph) -> BTreeMap<String, Vec<f64>> {
        self.vars
            .iter()
            .filter(|(_, &v)| g.requires_grad(v))
            .map(|(n, &v)| {
                let grad = g
                    .grad(v)
                    .map(|t| t.data().to_vec())
                    .unwrap_or_else(|| vec![0.0; g.value(v).numel()]);
                (n.clone(), grad)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("frozen.w", Tensor::matrix(2, 2, vec![1.0, -2.0, 0.5, 0.25]).unwrap());
        s.insert("head.b", Tensor::vector(vec![0.125]));
        s.insert("meta.arch", Tensor::vector(vec![64.0, 6.0]));
        s
    }

    #[test]
    fn census_by_prefix() {
        let s = store();
        assert_eq!(s.count(ParamKind::Frozen), 4);
        assert_eq!(s.count(ParamKind::Trainable), 1);
        assert_eq!(s.count_params(), 5);
    }

    #[test]
    fn checkpoint_round_trip() {
        let s = store();
        let bytes = s.encode();
        let back = ParamStore::decode(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, s);
        assert!(matches!(
            ParamStore::decode(&bytes[..bytes.len() - 1], Path::new("mem")),
            Err(Error::Truncated { .. })
        ));
        assert!(matches!(
            ParamStore::decode(b"HXT1\n", Path::new("mem")),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn frozen_tensors_bind_as_constants() {
        let s = store();
        let mut g = Graph::new();
        let b = s.bind(&mut g, true);
        assert!(!g.requires_grad(b.get("frozen.w").unwrap()));
        assert!(g.requires_grad(b.get("head.b").unwrap()));
        assert!(!b.has("meta.arch"));
    }
}
