use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use super::graph::{Grads, Graph, Var};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

const CHECKPOINT_MAGIC: &[u8; 4] = b"GFAP";
const CHECKPOINT_VERSION: u32 = 1;

/// Named parameters keyed by `/`-separated paths, plus a set of frozen
/// path prefixes.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<S = f32> {
    params: BTreeMap<String, Tensor<S>>,
    frozen: BTreeSet<String>,
}

impl<S: Real> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
            frozen: BTreeSet::new(),
        }
    }

    pub fn insert(&mut self, path: impl Into<String>, value: Tensor<S>) -> Result<()> {
        let path = path.into();
        if path.is_empty() {
            return Err(Error::arg("empty parameter path"));
        }
        if self.params.contains_key(&path) {
            return Err(Error::arg(format!("duplicate parameter path {path}")));
        }
        self.params.insert(path, value);
        Ok(())
    }

    pub fn get(&self, path: &str) -> Result<&Tensor<S>> {
        self.params
            .get(path)
            .ok_or_else(|| Error::arg(format!("no parameter named {path}")))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Tensor<S>> {
        self.params
            .get_mut(path)
            .ok_or_else(|| Error::arg(format!("no parameter named {path}")))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.params.contains_key(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<S>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn is_frozen(&self, path: &str) -> bool {
        self.frozen.iter().any(|p| path.starts_with(p.as_str()))
    }

    pub fn freeze(&mut self, prefix: impl Into<String>) {
        self.frozen.insert(prefix.into());
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
    }

    pub fn frozen_prefixes(&self) -> impl Iterator<Item = &str> {
        self.frozen.iter().map(String::as_str)
    }

    /// Freezes every parameter not under one of `trainable` prefixes.
    pub fn set_trainable<P: AsRef<str>>(&mut self, trainable: &[P]) {
        let frozen: BTreeSet<String> = self
            .params
            .keys()
            .filter(|k| !trainable.iter().any(|p| k.starts_with(p.as_ref())))
            .cloned()
            .collect();
        self.frozen = frozen;
    }

    /// Number of scalar values in unfrozen parameters.
    pub fn trainable_count(&self) -> usize {
        self.iter()
            .filter(|(p, _)| !self.is_frozen(p))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in self.params.values_mut() {
            let _ = t.set_grad(None);
        }
    }

    /// Adds gradients from a backward pass onto each named parameter.
    pub fn accumulate(&mut self, grads: &[(String, Vec<S>)]) -> Result<()> {
        for (path, g) in grads {
            let t = self.get_mut(path)?;
            if g.len() != t.numel() {
                return Err(Error::contract(format!("gradient size mismatch for {path}")));
            }
            t.accumulate_grad(g);
        }
        Ok(())
    }

    pub fn cast<T: Real>(&self) -> ParamStore<T> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            frozen: self.frozen.clone(),
        }
    }

    /// Serialises values (not gradients or the frozen set) as `f32`.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for (path, t) in &self.params {
            w.write_all(&(path.len() as u32).to_le_bytes())?;
            w.write_all(path.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.numel() * 4);
            for v in t.data() {
                buf.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::data(format!("reading checkpoint: {e}")))?;
        let mut cur = ByteCursor { bytes: &bytes, pos: 0 };
        if cur.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::data("not a parameter checkpoint (bad magic)"));
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::data(format!("unsupported checkpoint version {version}")));
        }
        let mut store = ParamStore::new();
        while cur.pos < bytes.len() {
            let len = cur.u32()? as usize;
            let path = std::str::from_utf8(cur.take(len)?)
                .map_err(|_| Error::data("parameter path is not UTF-8"))?
                .to_string();
            let rank = cur.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = cur.take(numel * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| S::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                .collect();
            store.insert(path, Tensor::new(shape, data)?)?;
        }
        Ok(store)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_checkpoint(std::io::BufReader::new(f))
    }

    /// Copies every parameter under `prefix` from `other`.
    pub fn copy_prefix_from(&mut self, other: &ParamStore<S>, prefix: &str) -> Result<usize> {
        let mut n = 0;
        for (path, t) in other.iter().filter(|(p, _)| p.starts_with(prefix)) {
            let dst = self.get_mut(path)?;
            if dst.shape() != t.shape() {
                return Err(Error::data(format!("shape mismatch for {path}")));
            }
            dst.data_mut().copy_from_slice(t.data());
            n += 1;
        }
        Ok(n)
    }
}

struct ByteCursor<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> ByteCursor<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::data("truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// A graph bound to a parameter store: parameters become borrowed leaves
/// on first use, trainable ones with gradient tracking.
pub struct Session<'a, S: Real> {
    pub graph: Graph<'a, S>,
    store: &'a ParamStore<S>,
    bound: HashMap<&'a str, Var>,
    track_grads: bool,
}

impl<'a, S: Real> Session<'a, S> {
    /// Session that records gradients for unfrozen parameters.
    pub fn training(store: &'a ParamStore<S>) -> Self {
        Session {
            graph: Graph::new(),
            store,
            bound: HashMap::new(),
            track_grads: true,
        }
    }

    /// Session with no gradient tracking.
    pub fn inference(store: &'a ParamStore<S>) -> Self {
        Session {
            track_grads: false,
            ..Self::training(store)
        }
    }

    pub fn store(&self) -> &'a ParamStore<S> {
        self.store
    }

    pub fn param(&mut self, path: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(path) {
            return Ok(v);
        }
        let (key, t) = self
            .store
            .params
            .get_key_value(path)
            .ok_or_else(|| Error::arg(format!("no parameter named {path}")))?;
        let trainable = self.track_grads && !self.store.is_frozen(path);
        let v = self.graph.leaf_ref(t, trainable);
        self.bound.insert(key.as_str(), v);
        Ok(v)
    }

    pub fn backward(&self, loss: Var) -> Result<Grads<S>> {
        self.graph.backward(loss)
    }

    /// Gradients of every bound parameter that received one, in path order.
    pub fn param_grads(&self, grads: &Grads<S>) -> Vec<(String, Vec<S>)> {
        let mut out: Vec<(String, Vec<S>)> = self
            .bound
            .iter()
            .filter_map(|(k, &v)| grads.get(v).map(|g| (k.to_string(), g.to_vec())))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("lm/embed", Tensor::matrix(2, 3, vec![1.0, -2.5, 3.25, 0.0, 1e-8, -7.0]).unwrap())
            .unwrap();
        s.insert("fusion/block3/w1", Tensor::scalar(0.0)).unwrap();
        s.insert("enc/k", Tensor::new(vec![2, 1, 2], vec![0.5; 4]).unwrap()).unwrap();
        s
    }

    #[test]
    fn duplicate_paths_rejected() {
        let mut s = sample();
        assert!(s.insert("lm/embed", Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn freeze_by_prefix() {
        let mut s = sample();
        s.freeze("lm/");
        assert!(s.is_frozen("lm/embed"));
        assert!(!s.is_frozen("fusion/block3/w1"));
        s.set_trainable(&["fusion/"]);
        assert!(s.is_frozen("lm/embed"));
        assert!(s.is_frozen("enc/k"));
        assert!(!s.is_frozen("fusion/block3/w1"));
        assert_eq!(s.trainable_count(), 1);
    }

    #[test]
    fn checkpoint_layout() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        let mut buf = Vec::new();
        s.write_checkpoint(&mut buf).unwrap();
        let mut expect = b"GFAP".to_vec();
        expect.extend(1u32.to_le_bytes());
        expect.extend(1u32.to_le_bytes());
        expect.extend(b"a");
        expect.extend(1u32.to_le_bytes());
        expect.extend(2u32.to_le_bytes());
        expect.extend(1.0f32.to_le_bytes());
        expect.extend(2.0f32.to_le_bytes());
        assert_eq!(buf, expect);
    }

    #[test]
    fn corrupt_checkpoint_rejected() {
        let mut buf = Vec::new();
        sample().write_checkpoint(&mut buf).unwrap();
        assert!(ParamStore::<f32>::read_checkpoint(&buf[..buf.len() - 1][..]).is_err());
        buf[0] = b'X';
        assert!(ParamStore::<f32>::read_checkpoint(&buf[..]).is_err());
    }

    #[test]
    fn frozen_params_are_constants_in_session() {
        let mut s = sample().cast::<f64>();
        s.freeze("lm/");
        let mut sess = Session::training(&s);
        let e = sess.param("lm/embed").unwrap();
        let w = sess.param("fusion/block3/w1").unwrap();
        assert!(!sess.graph.needs_grad(e));
        assert!(sess.graph.needs_grad(w));
        assert_eq!(sess.param("lm/embed").unwrap(), e);
    }

    proptest! {
        #[test]
        fn checkpoint_round_trip_is_bit_exact(vals in proptest::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 1..40)) {
            let mut s = ParamStore::<f32>::new();
            let n = vals.len();
            s.insert("x/y", Tensor::new(vec![n], vals).unwrap()).unwrap();
            s.insert("z", Tensor::scalar(-0.0)).unwrap();
            let mut a = Vec::new();
            s.write_checkpoint(&mut a).unwrap();
            let back = ParamStore::<f32>::read_checkpoint(&a[..]).unwrap();
            let mut b = Vec::new();
            back.write_checkpoint(&mut b).unwrap();
            prop_assert_eq!(a, b);
            for ((pa, ta), (pb, tb)) in s.iter().zip(back.iter()) {
                prop_assert_eq!(pa, pb);
                let bits_a: Vec<u32> = ta.data().iter().map(|v| v.to_bits()).collect();
                let bits_b: Vec<u32> = tb.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(bits_a, bits_b);
            }
        }
    }
}
