//! Named parameter storage, per-step graph binding, and the named-tensor
//! checkpoint container.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic    b"ALNT"
//! version  u16
//! meta     u32 length + UTF-8 JSON object
//! count    u32
//! count x { name: u32 length + UTF-8, ndim: u32, dims: ndim x u64, data: numel x f64 }
//! ```
//!
//! Tensors are written in name order, so equal stores serialize to equal bytes.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ALNT";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
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

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
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

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
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

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Drops every tensor whose name starts with `prefix`.
    pub fn retain_without_prefix(&mut self, prefix: &str) {
        self.tensors.retain(|k, _| !k.starts_with(prefix));
    }

    /// Keeps only tensors whose name starts with `prefix`.
    pub fn retain_with_prefix(&mut self, prefix: &str) {
        self.tensors.retain(|k, _| k.starts_with(prefix));
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// SHA-256 over the serialized tensors (metadata excluded).
    pub fn fingerprint(&self) -> String {
        let mut bytes = Vec::new();
        write_tensors(&mut bytes, self).expect("in-memory write");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// Deterministic initializer: every tensor draws from its own ChaCha stream
/// keyed by name, so a tensor's initial value does not depend on which other
/// tensors exist.
#[derive(Debug)]
pub struct ParamBuilder {
    seed: u64,
    store: ParamStore,
}

fn name_stream(name: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl ParamBuilder {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            store: ParamStore::new(),
        }
    }

    pub fn rng_for(seed: u64, name: &str) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(name_stream(name));
        rng
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) {
        let mut rng = Self::rng_for(self.seed, name);
        self.store.insert(name, Tensor::randn(shape, std, &mut rng));
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) {
        self.store.insert(name, Tensor::zeros(shape));
    }

    /// `{prefix}.w: [fan_in, fan_out]` scaled by `1/sqrt(fan_in)`, plus an
    /// optional zero bias `{prefix}.b: [1, fan_out]`.
    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, bias: bool) {
        self.normal(
            &format!("{prefix}.w"),
            &[fan_in, fan_out],
            1.0 / (fan_in as f64).sqrt(),
        );
        if bias {
            self.zeros(&format!("{prefix}.b"), &[1, fan_out]);
        }
    }

    /// Two linear layers with a tanh between them.
    pub fn mlp(&mut self, prefix: &str, fan_in: usize, hidden: usize, fan_out: usize) {
        self.linear(&format!("{prefix}.l1"), fan_in, hidden, true);
        self.linear(&format!("{prefix}.l2"), hidden, fan_out, true);
    }

    pub fn finish(self) -> ParamStore {
        self.store
    }
}

/// One differentiation graph plus lazily bound parameters.
///
/// A parameter becomes a graph leaf the first time it is requested, so a
/// forward pass only ever records the parameters it actually touches.
pub struct Session<'p> {
    pub g: Graph,
    params: &'p ParamStore,
    bound: HashMap<String, Var>,
    trainable: bool,
}

impl<'p> Session<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            g: Graph::new(),
            params,
            bound: HashMap::new(),
            trainable: true,
        }
    }

    /// Session whose parameters are recorded as constants.
    pub fn inference(params: &'p ParamStore) -> Self {
        Self {
            trainable: false,
            ..Self::new(params)
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self
            .params
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))?
            .clone();
        let v = self.g.leaf(t, self.trainable);
        self.bound.insert(name.to_owned(), v);
        Ok(v)
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.params.contains(name)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.g.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.g.value(v)
    }

    /// Gradients of `loss` for every parameter bound so far, keyed by name.
    pub fn gradients(&self, loss: Var) -> Result<BTreeMap<String, Tensor>> {
        let mut grads = self.g.backward(loss)?;
        let mut out = BTreeMap::new();
        for (name, &v) in &self.bound {
            out.insert(name.clone(), grads.take(v));
        }
        Ok(out)
    }
}

fn write_tensors<W: Write>(w: &mut W, store: &ParamStore) -> Result<()> {
    w.write_u32::<LittleEndian>(store.len() as u32)?;
    for (name, t) in store.iter() {
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        w.write_u32::<LittleEndian>(t.shape().len() as u32)?;
        for &d in t.shape() {
            w.write_u64::<LittleEndian>(d as u64)?;
        }
        for &v in t.data() {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

fn read_string<R: Read>(r: &mut R, limit: usize) -> Result<String> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    if len > limit {
        return Err(Error::Format(format!(
            "string length {len} exceeds {limit}"
        )));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
}

/// Parameters plus a small JSON metadata object.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_u16::<LittleEndian>(CHECKPOINT_VERSION)?;
        let meta = serde_json::to_string(&self.meta)?;
        out.write_u32::<LittleEndian>(meta.len() as u32)?;
        out.write_all(meta.as_bytes())?;
        write_tensors(&mut out, &self.params)?;
        Ok(out)
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let r = &mut bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = r.read_u16::<LittleEndian>()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let meta: serde_json::Value = serde_json::from_str(&read_string(r, 1 << 20)?)?;
        let count = r.read_u32::<LittleEndian>()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = read_string(r, 4096)?;
            let ndim = r.read_u32::<LittleEndian>()? as usize;
            if ndim == 0 || ndim > 8 {
                return Err(Error::Format(format!("tensor `{name}` has rank {ndim}")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.read_u64::<LittleEndian>()? as usize);
            }
            let numel: usize = shape.iter().product();
            if numel > r.len() / 8 {
                return Err(Error::Format(format!("tensor `{name}` truncated")));
            }
            let mut data = vec![0.0; numel];
            r.read_f64_into::<LittleEndian>(&mut data)?;
            params.insert(name, Tensor::new(shape, data)?);
        }
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
