use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_xoshiro::SplitMix64;

use super::tensor::Tensor;
use super::NnError;
use crate::rng::seeded;

/// Named trainable tensors plus the seed they were initialised from.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    seed: u64,
    tensors: BTreeMap<String, Tensor<f32>>,
}

impl ModelParams {
    pub fn new(seed: u64) -> Self {
        ModelParams { seed, tensors: BTreeMap::new() }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Generator for initialisation; callers create parameters in a fixed
    /// order so the result is a pure function of the seed.
    pub fn init_rng(&self) -> SplitMix64 {
        seeded(self.seed)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.insert(name.into(), t);
    }

    /// Uniform in `(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init_uniform(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut SplitMix64) {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound) as f32).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data));
    }

    pub fn init_const(&mut self, name: impl Into<String>, shape: &[usize], value: f32) {
        self.insert(name, Tensor::full(shape, value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<f32>)> {
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

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Copy every tensor of `other` into `self`, replacing same-named ones.
    pub fn merge(&mut self, other: &ModelParams) {
        for (k, v) in &other.tensors {
            self.tensors.insert(k.clone(), v.clone());
        }
    }
}

const MAGIC: &[u8; 8] = b"CFNPARAM";
const VERSION: u8 = 1;

/// Serialised parameters with a free-form hyperparameter header.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub hyper: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(params: ModelParams, hyper: BTreeMap<String, String>) -> Self {
        Checkpoint { params, hyper }
    }

    /// Layout (little endian): magic, version byte, seed u64, header length
    /// u32 + `key=value` lines, tensor count u32, then per tensor: name
    /// length u32 + name, rank u32, dims u64 each, f32 payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&self.params.seed.to_le_bytes());
        let header: String = self.hyper.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.params.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.params.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(NnError::Checkpoint("bad magic".into()));
        }
        let version = r.take(1)?[0];
        if version != VERSION {
            return Err(NnError::Checkpoint(format!("unsupported version {version}")));
        }
        let seed = r.u64()?;
        let hlen = r.u32()? as usize;
        let header = std::str::from_utf8(r.take(hlen)?).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        let mut hyper = BTreeMap::new();
        for line in header.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| NnError::Checkpoint(format!("bad header line {line:?}")))?;
            hyper.insert(k.to_string(), v.to_string());
        }
        let count = r.u32()?;
        let mut params = ModelParams::new(seed);
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?).map_err(|e| NnError::Checkpoint(e.to_string()))?.to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let data = r.take(n * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            params.insert(name, Tensor::new(shape, data));
        }
        if r.pos != bytes.len() {
            return Err(NnError::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint { params, hyper })
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        crate::corpus::write_atomic(path, &self.to_bytes()).map_err(|e| NnError::Checkpoint(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let bytes = std::fs::read(path).map_err(|e| NnError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| NnError::Checkpoint("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64, NnError> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}
