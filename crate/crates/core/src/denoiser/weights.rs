//! Named parameter storage, initialization and the `AVDW` weight file.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! "AVDW" | version: u32 | count: u32
//! count × { name_len: u32 | name: UTF-8 | rank: u32 | dims: u32 × rank | offset: u64 }
//! payload: raw f32 values; each entry's offset is in bytes from payload start
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::config::{DenoiserConfig, LEVELS};
use crate::error::{ensure, Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"AVDW";
pub const FORMAT_VERSION: u32 = 1;

/// Freeze/unfreeze unit during staged training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Backbone,
    Motion,
    Control,
}

impl ParamGroup {
    pub fn of(name: &str) -> Self {
        if name.starts_with("control.") {
            ParamGroup::Control
        } else if name.contains(".motion.") {
            ParamGroup::Motion
        } else {
            ParamGroup::Backbone
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// U(-1/√fan_in, 1/√fan_in).
    Uniform(usize),
    Ones,
    Zeros,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Collects parameter declarations while walking the architecture.
pub(crate) struct SpecBuilder {
    pub specs: Vec<ParamSpec>,
}

impl SpecBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.specs.push(ParamSpec { name, shape, init });
    }

    pub fn conv(&mut self, name: &str, c_out: usize, c_in: usize, k: usize, zero: bool) {
        let fan = c_in * k * k;
        let init = if zero { Init::Zeros } else { Init::Uniform(fan) };
        self.push(format!("{name}.weight"), vec![c_out, c_in, k, k], init);
        self.push(format!("{name}.bias"), vec![c_out], init);
    }

    pub fn linear(&mut self, name: &str, out: usize, inp: usize, bias: bool, zero: bool) {
        let init = if zero { Init::Zeros } else { Init::Uniform(inp) };
        self.push(format!("{name}.weight"), vec![out, inp], init);
        if bias {
            self.push(format!("{name}.bias"), vec![out], init);
        }
    }

    pub fn norm(&mut self, name: &str, c: usize) {
        self.push(format!("{name}.gamma"), vec![c], Init::Ones);
        self.push(format!("{name}.beta"), vec![c], Init::Zeros);
    }
}

/// Every parameter of the network (backbone, motion modules and the
/// structure branch) in declaration order.
pub fn param_specs(cfg: &DenoiserConfig) -> Vec<ParamSpec> {
    use crate::denoiser::layers;
    let mut b = SpecBuilder { specs: Vec::new() };
    layers::backbone_specs(&mut b, cfg);
    layers::control_specs(&mut b, cfg);
    b.specs
}

/// Counterpart of a structure-branch parameter in the main encoder, if any.
pub fn control_source(name: &str) -> Option<&str> {
    let rest = name.strip_prefix("control.")?;
    let shared = ["time.", "conv_in.", "enc.", "mid."];
    shared.iter().any(|p| rest.starts_with(p)).then_some(rest)
}

fn init_tensor(spec: &ParamSpec, seed: u64) -> Tensor {
    match spec.init {
        Init::Ones => Tensor::ones(&spec.shape),
        Init::Zeros => Tensor::zeros(&spec.shape),
        Init::Uniform(fan) => {
            let mut h = Sha256::new();
            h.update(seed.to_le_bytes());
            h.update(spec.name.as_bytes());
            let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
            let bound = 1.0 / (fan as f32).sqrt();
            Tensor::rand_uniform(&spec.shape, -bound, bound, &mut rng)
        }
    }
}

/// Named tensors of one network.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Weights {
    tensors: BTreeMap<String, Tensor>,
}

impl Weights {
    /// Fresh weights: random backbone, zeroed motion outputs and a structure
    /// branch copied from the encoder with zeroed input/output projections.
    pub fn init(cfg: &DenoiserConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut tensors = BTreeMap::new();
        for spec in param_specs(cfg) {
            let t = init_tensor(&spec, seed);
            tensors.insert(spec.name, t);
        }
        let mut w = Self { tensors };
        w.copy_encoder_to_control();
        Ok(w)
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        Self { tensors }
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Lookup(format!("no weight named {name}")))
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.tensors.insert(name.to_string(), t);
    }

    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::Lookup(format!("no weight named {name}")))?;
        ensure!(slot.shape() == t.shape(), Argument, "shape change for {name}: {:?} -> {:?}", slot.shape(), t.shape());
        *slot = t;
        Ok(())
    }

    /// Adds seeded N(0, std²) noise to every tensor. Freshly initialised
    /// models predict exactly zero; this gives tests a non-degenerate network.
    pub fn jitter(&mut self, seed: u64, std: f32) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in self.tensors.values_mut() {
            let n = Tensor::randn(t.shape(), &mut rng);
            *t = t.zip_map(&n, |a, b| a + std * b).expect("same shape");
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn group(&self, group: ParamGroup) -> impl Iterator<Item = (&str, &Tensor)> {
        self.iter().filter(move |(n, _)| ParamGroup::of(n) == group)
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Re-seeds the structure branch from the current encoder weights.
    pub fn copy_encoder_to_control(&mut self) {
        let pairs: Vec<(String, Tensor)> = self
            .tensors
            .keys()
            .filter_map(|n| {
                let src = control_source(n)?;
                Some((n.clone(), self.tensors.get(src)?.clone()))
            })
            .collect();
        for (n, t) in pairs {
            self.tensors.insert(n, t);
        }
    }

    /// True when the two sets hold bitwise-identical tensors for `group`.
    pub fn group_bit_eq(&self, other: &Weights, group: ParamGroup) -> bool {
        let a: Vec<_> = self.group(group).collect();
        let b: Vec<_> = other.group(group).collect();
        a.len() == b.len() && a.iter().zip(&b).all(|((na, ta), (nb, tb))| na == nb && ta.bit_eq(tb))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_tensors(path, self.tensors.iter().map(|(k, v)| (k.as_str(), v)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self {
            tensors: load_tensors(path)?,
        })
    }

    /// Checks every declared parameter is present with the declared shape.
    pub fn check_against(&self, cfg: &DenoiserConfig) -> Result<()> {
        for spec in param_specs(cfg) {
            let t = self.get(&spec.name)?;
            ensure!(
                t.shape() == spec.shape.as_slice(),
                Format,
                "weight {} has shape {:?}, expected {:?}",
                spec.name,
                t.shape(),
                spec.shape
            );
        }
        Ok(())
    }
}

/// Writes named tensors in the `AVDW` layout.
pub fn save_tensors<'a>(path: &Path, entries: impl Iterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
    let entries: Vec<_> = entries.collect();
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(entries.len() as u32).to_le_bytes())?;
    let mut offset = 0u64;
    for (name, t) in &entries {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        out.write_all(&offset.to_le_bytes())?;
        offset += 4 * t.len() as u64;
    }
    for (_, t) in &entries {
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn load_tensors(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::Format("file too short for header".into()))?;
    ensure!(&magic == MAGIC, Format, "bad magic {:?}", magic);
    let version = read_u32(&mut r)?;
    ensure!(version == FORMAT_VERSION, Format, "unsupported format version {version}");
    let count = read_u32(&mut r)? as usize;
    let mut table = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        ensure!(len <= 4096, Format, "implausible name length {len}");
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        ensure!(rank <= 8, Format, "implausible rank {rank} for {name}");
        let shape = (0..rank).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let mut off = [0u8; 8];
        r.read_exact(&mut off)?;
        table.push((name, shape, u64::from_le_bytes(off)));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let mut out = BTreeMap::new();
    for (name, shape, off) in table {
        let n: usize = shape.iter().product();
        let start = off as usize;
        let end = start + 4 * n;
        ensure!(end <= payload.len(), Format, "payload for {name} is truncated");
        let data: Vec<f32> = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.insert(name, Tensor::new(&shape, data)?);
    }
    Ok(out)
}

/// Configuration plus weights: everything needed to run the denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: DenoiserConfig,
    pub weights: Weights,
}

pub const CONFIG_KEY: &str = "meta.config";

impl Model {
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        let weights = Weights::init(&config, seed)?;
        Ok(Self { config, weights })
    }

    /// Splits a stored tensor map into model config, weights and extra
    /// (non-parameter) records such as optimizer state.
    pub fn from_tensors(mut map: BTreeMap<String, Tensor>) -> Result<(Self, BTreeMap<String, Tensor>)> {
        let meta = map
            .remove(CONFIG_KEY)
            .ok_or_else(|| Error::Format(format!("missing {CONFIG_KEY} record")))?;
        let config = DenoiserConfig::from_meta(meta.data())?;
        let names: Vec<String> = param_specs(&config).into_iter().map(|s| s.name).collect();
        let mut params = BTreeMap::new();
        for n in names {
            let t = map.remove(&n).ok_or_else(|| Error::Format(format!("weight file lacks {n}")))?;
            params.insert(n, t);
        }
        let model = Self {
            config,
            weights: Weights::from_map(params),
        };
        model.weights.check_against(&model.config)?;
        Ok((model, map))
    }

    pub fn to_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut map: BTreeMap<String, Tensor> = self.weights.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
        let meta = self.config.to_meta();
        map.insert(CONFIG_KEY.to_string(), Tensor::from_parts(vec![meta.len()], meta));
        map
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let map = self.to_tensors();
        save_tensors(path, map.iter().map(|(k, v)| (k.as_str(), v)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_tensors(load_tensors(path)?)?.0)
    }
}

/// Number of skip tensors the encoder emits.
pub fn skip_count(cfg: &DenoiserConfig) -> usize {
    LEVELS * cfg.blocks_per_level
}
