//! Trainable parameter registry and the `CIRC1` checkpoint container: a text
//! manifest (name, shape, byte offset) followed by little-endian f64 data.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use super::tensor::Tensor;
use crate::{Error, Result};

pub type ParamId = usize;

const MAGIC: &str = "CIRC1";

#[derive(Debug, Clone)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { names: Vec::new(), values: Vec::new(), grads: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let id = self.values.len();
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        id
    }

    /// Kaiming-uniform fan-in initialization.
    pub fn add_kaiming(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> ParamId {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data).unwrap())
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn add_const(&mut self, name: &str, shape: &[usize], v: f64) -> ParamId {
        let mut t = Tensor::zeros(shape);
        t.fill(v);
        self.add(name, t)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        0..self.values.len()
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut manifest = String::new();
        manifest.push_str(MAGIC);
        manifest.push('\n');
        manifest.push_str(&format!("{}\n", self.values.len()));
        let mut offset = 0usize;
        for (name, value) in self.names.iter().zip(&self.values) {
            let dims: Vec<String> = value.shape().iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!("{} {} {}\n", name, dims.join("x"), offset));
            offset += value.len() * 8;
        }
        manifest.push_str("---\n");

        let mut f = std::fs::File::create(path)?;
        f.write_all(manifest.as_bytes())?;
        let mut blob = Vec::with_capacity(offset);
        for value in &self.values {
            for v in value.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        f.write_all(&blob)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let sep = b"---\n";
        let split = bytes
            .windows(sep.len())
            .position(|w| w == sep)
            .ok_or_else(|| Error::Format("checkpoint: missing manifest terminator".into()))?;
        let header = std::str::from_utf8(&bytes[..split])
            .map_err(|_| Error::Format("checkpoint: manifest is not utf-8".into()))?;
        let blob = &bytes[split + sep.len()..];

        let mut lines = header.lines();
        if lines.next() != Some(MAGIC) {
            return Err(Error::Format(format!("checkpoint: expected magic {MAGIC}")));
        }
        let count: usize = lines
            .next()
            .ok_or_else(|| Error::Format("checkpoint: missing entry count".into()))?
            .trim()
            .parse()
            .map_err(|e| Error::Format(format!("checkpoint: bad entry count: {e}")))?;

        let mut out = ParamSet::new();
        for _ in 0..count {
            let line = lines
                .next()
                .ok_or_else(|| Error::Format("checkpoint: truncated manifest".into()))?;
            let mut toks = line.split_whitespace();
            let name = toks
                .next()
                .ok_or_else(|| Error::Format("checkpoint: manifest entry missing name".into()))?;
            let shape: Vec<usize> = toks
                .next()
                .ok_or_else(|| Error::Format("checkpoint: manifest entry missing shape".into()))?
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format(format!("checkpoint: bad shape: {e}")))?;
            let offset: usize = toks
                .next()
                .ok_or_else(|| Error::Format("checkpoint: manifest entry missing offset".into()))?
                .parse()
                .map_err(|e| Error::Format(format!("checkpoint: bad offset: {e}")))?;
            let n: usize = shape.iter().product();
            let end = offset + n * 8;
            if end > blob.len() {
                return Err(Error::Format(format!("checkpoint: {name} data out of range")));
            }
            let data: Vec<f64> = blob[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            out.add(name, Tensor::new(shape, data)?);
        }
        Ok(out)
    }
}
