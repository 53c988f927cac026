use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::NetConfig;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"FUSELABP";
const VERSION: u32 = 1;

/// Named network tensors plus the configuration and seed they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    cfg: NetConfig,
    seed: u64,
    tensors: BTreeMap<String, Tensor>,
}

/// Names and shapes of every tensor the network uses, in initialization order.
pub fn param_layout(cfg: &NetConfig) -> Vec<(String, Vec<usize>)> {
    let (b, k) = (cfg.base_channels, cfg.kernel);
    let mut out = Vec::new();
    let mut conv = |name: String, o: usize, i: usize, k: usize| {
        out.push((format!("{name}.w"), vec![o, i, k, k]));
        out.push((format!("{name}.b"), vec![o]));
    };
    conv("fe.conv1".into(), b, 3 * cfg.inputs, k);
    conv("fe.conv2".into(), b, b, k);
    let reduced = cfg.reduced_channels();
    let dab = |conv: &mut dyn FnMut(String, usize, usize, usize), p: &str| {
        conv(format!("{p}.conv1"), b, b, k);
        conv(format!("{p}.conv2"), b, b, k);
        conv(format!("{p}.ca.reduce"), reduced, b, 1);
        conv(format!("{p}.ca.restore"), b, reduced, 1);
        conv(format!("{p}.sa"), 1, 2, k);
        conv(format!("{p}.compress"), b, 2 * b, 1);
    };
    for l in 1..=cfg.levels {
        let entry_in = if l == 1 { b } else { 2 * b };
        conv(format!("s{l}.entry"), b, entry_in, k);
        for g in 1..=cfg.msrrg_per_scale {
            let p = format!("s{l}.g{g}");
            dab(&mut conv, &format!("{p}.half"));
            conv(format!("{p}.merge"), b, 2 * b, 1);
            for d in 1..=cfg.dabs_per_msrrg {
                dab(&mut conv, &format!("{p}.dab{d}"));
            }
            conv(format!("{p}.out"), b, b, k);
        }
        conv(format!("s{l}.head"), 3, b, k);
    }
    out
}

/// Weight names whose zeroing turns a residual block into the identity.
pub fn residual_branch_finals(cfg: &NetConfig) -> Vec<String> {
    let mut out = Vec::new();
    for l in 1..=cfg.levels {
        for g in 1..=cfg.msrrg_per_scale {
            let p = format!("s{l}.g{g}");
            out.push(format!("{p}.out"));
            out.push(format!("{p}.half.compress"));
            for d in 1..=cfg.dabs_per_msrrg {
                out.push(format!("{p}.dab{d}.compress"));
            }
        }
    }
    out
}

impl NetParams {
    /// Fan-in scaled uniform initialization, U(-√(6/fan_in), √(6/fan_in)),
    /// with zero biases. Residual branches start as the identity and the
    /// output heads start at zero, so an untrained net emits 0.5 everywhere.
    pub fn init(cfg: &NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape) in param_layout(cfg) {
            let t = if shape.len() == 4 {
                let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                let bound = (6.0 / fan_in).sqrt();
                let n = shape.iter().product();
                let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                Tensor::new(&shape, data)?
            } else {
                Tensor::zeros(&shape)
            };
            tensors.insert(name, t);
        }
        let mut params = Self {
            cfg: cfg.clone(),
            seed,
            tensors,
        };
        params.zero_residual_branches();
        for l in 1..=cfg.levels {
            if let Some(t) = params.tensors.get_mut(&format!("s{l}.head.w")) {
                t.data_mut().fill(0.0);
            }
        }
        Ok(params)
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::Shape(format!("no parameter named {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "{name}: expected {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        value.check_finite(name)?;
        *slot = value;
        Ok(())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Zeroes the last conv (weights and bias) of every residual branch.
    pub fn zero_residual_branches(&mut self) {
        for name in residual_branch_finals(&self.cfg) {
            for suffix in [".w", ".b"] {
                if let Some(t) = self.tensors.get_mut(&format!("{name}{suffix}")) {
                    t.data_mut().fill(0.0);
                }
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let echo = self.cfg.to_echo();
        buf.extend_from_slice(&(echo.len() as u32).to_le_bytes());
        buf.extend_from_slice(echo.as_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Loads a parameter file. When `expected` is given the stored
    /// configuration must equal it.
    pub fn load(path: &Path, expected: Option<&NetConfig>) -> Result<Self> {
        let file = File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        let mut bytes = Vec::new();
        BufReader::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        let mut r = Cursor { bytes: &bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::ParamFormat("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::ParamFormat(format!("unsupported version {version}")));
        }
        let echo_len = r.u32()? as usize;
        let echo = std::str::from_utf8(r.take(echo_len)?)
            .map_err(|_| Error::ParamFormat("config echo is not UTF-8".into()))?;
        let cfg = NetConfig::from_echo(echo)?;
        if let Some(exp) = expected {
            if *exp != cfg {
                return Err(Error::ParamFormat(format!(
                    "file was written for config [{}], expected [{}]",
                    cfg.to_echo(),
                    exp.to_echo()
                )));
            }
        }
        let seed = r.u64()?;
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::ParamFormat("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            if rank == 0 || rank > 4 {
                return Err(Error::ParamFormat(format!("{name}: rank {rank}")));
            }
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            if n > (bytes.len() - r.pos) / 8 {
                return Err(Error::ParamFormat(format!("{name}: truncated data")));
            }
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let t = Tensor::new(&shape, data).map_err(|e| Error::ParamFormat(e.to_string()))?;
            t.check_finite(&name)?;
            tensors.insert(name, t);
        }
        if r.pos != bytes.len() {
            return Err(Error::ParamFormat("trailing bytes".into()));
        }
        let layout = param_layout(&cfg);
        if layout.len() != tensors.len() {
            return Err(Error::ParamFormat(format!(
                "expected {} tensors, found {}",
                layout.len(),
                tensors.len()
            )));
        }
        for (name, shape) in layout {
            match tensors.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::ParamFormat(format!(
                        "{name}: expected shape {shape:?}, found {:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::ParamFormat(format!("missing tensor {name}"))),
            }
        }
        Ok(Self { cfg, seed, tensors })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::ParamFormat("unexpected end of file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
