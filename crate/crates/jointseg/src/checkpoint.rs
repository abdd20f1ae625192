//! Binary training checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! magic            8 bytes  "JSEGCKPT"
//! version          u32      1
//! dtype            u32      4 (f32 payload) or 8 (f64 payload)
//! iteration        u64      iterations run across all stages
//! stages_completed u32
//! stage_iteration  u64      iterations run in the stage in progress
//! seed             u64      training seed
//! param_seed       u64      seed the weights were initialized with
//! tensor_count     u32
//! tensor_count x
//!   name_len u32, name (UTF-8)
//!   ndim u32, dims (u32 each)
//!   payload: prod(dims) values of dtype
//! ```
//!
//! Tensors are `net/<layer>/weight` (`kh x kw x in x out`), `net/<layer>/bias`,
//! the same under `momentum/`, then `crf/mu`, `crf/w1`..`crf/w3` (`C x C`),
//! `crf/theta` (alpha, beta, gamma, zeta, tau) and `crf-momentum/mu`, `crf-momentum/w1`..`w3`.

use std::fs;
use std::path::Path;

use jointseg_core::crf::{CrfParams, NUM_KERNELS};
use jointseg_core::net::{LayerParams, NetworkConfig, NetworkParams};
use jointseg_core::train::{CrfVelocity, TrainState};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"JSEGCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u32 {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            4 => Some(Dtype::F32),
            8 => Some(Dtype::F64),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>) -> Self {
        Tensor { name: name.into(), dims, data }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub dtype: Dtype,
    pub iteration: u64,
    pub stages_completed: u8,
    pub stage_iteration: u64,
    pub seed: u64,
    pub param_seed: u64,
    pub tensors: Vec<Tensor>,
}

fn layer_tensors(prefix: &str, params: &NetworkParams, out: &mut Vec<Tensor>) {
    for l in &params.layers {
        out.push(Tensor::new(
            format!("{prefix}/{}/weight", l.name),
            vec![l.kh, l.kw, l.cin, l.cout],
            l.weight.clone(),
        ));
        out.push(Tensor::new(format!("{prefix}/{}/bias", l.name), vec![l.cout], l.bias.clone()));
    }
}

fn crf_tensors(prefix: &str, mu: &[f64], w: &[Vec<f64>; NUM_KERNELS], c: usize, out: &mut Vec<Tensor>) {
    out.push(Tensor::new(format!("{prefix}/mu"), vec![c, c], mu.to_vec()));
    for (m, w) in w.iter().enumerate() {
        out.push(Tensor::new(format!("{prefix}/w{}", m + 1), vec![c, c], w.clone()));
    }
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, dtype: Dtype) -> Self {
        let c = state.crf.num_classes;
        let mut tensors = Vec::new();
        layer_tensors("net", &state.params, &mut tensors);
        layer_tensors("momentum", &state.velocity, &mut tensors);
        crf_tensors("crf", &state.crf.mu, &state.crf.w, c, &mut tensors);
        tensors.push(Tensor::new("crf/theta", vec![5], state.crf.thetas().to_vec()));
        crf_tensors("crf-momentum", &state.crf_velocity.mu, &state.crf_velocity.w, c, &mut tensors);
        Checkpoint {
            dtype,
            iteration: state.iteration,
            stages_completed: state.stages_completed,
            stage_iteration: state.stage_iteration,
            seed: state.seed,
            param_seed: state.params.seed,
            tensors,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    fn expect(&self, name: &str, dims: &[usize]) -> Result<&[f64]> {
        let t = self
            .tensor(name)
            .ok_or_else(|| Error::Invalid(format!("checkpoint has no tensor {name}")))?;
        if t.dims != dims {
            return Err(Error::Invalid(format!(
                "checkpoint tensor {name} is {:?}, expected {dims:?}",
                t.dims
            )));
        }
        Ok(&t.data)
    }

    fn layers(&self, prefix: &str, cfg: &NetworkConfig, seed: u64) -> Result<NetworkParams> {
        let mut layers = Vec::new();
        for s in cfg.param_shapes()? {
            let mut l = LayerParams::zeros(&s);
            l.weight = self.expect(&format!("{prefix}/{}/weight", s.name), &[s.kh, s.kw, s.cin, s.cout])?.to_vec();
            l.bias = self.expect(&format!("{prefix}/{}/bias", s.name), &[s.cout])?.to_vec();
            layers.push(l);
        }
        Ok(NetworkParams { layers, seed })
    }

    fn matrices(&self, prefix: &str, c: usize) -> Result<(Vec<f64>, [Vec<f64>; NUM_KERNELS])> {
        let mu = self.expect(&format!("{prefix}/mu"), &[c, c])?.to_vec();
        let w = |m: usize| self.expect(&format!("{prefix}/w{m}"), &[c, c]).map(<[f64]>::to_vec);
        Ok((mu, [w(1)?, w(2)?, w(3)?]))
    }

    /// Rebuilds the training state for `cfg`; every tensor must be present with the
    /// shape the config implies.
    pub fn to_state(&self, cfg: &NetworkConfig) -> Result<TrainState> {
        cfg.validate()?;
        let c = cfg.num_classes;
        let params = self.layers("net", cfg, self.param_seed)?;
        let velocity = self.layers("momentum", cfg, 0)?;
        let (mu, w) = self.matrices("crf", c)?;
        let th = self.expect("crf/theta", &[5])?;
        let crf = CrfParams {
            num_classes: c,
            mu,
            w,
            theta_alpha: th[0],
            theta_beta: th[1],
            theta_gamma: th[2],
            theta_zeta: th[3],
            theta_tau: th[4],
        };
        let (vmu, vw) = self.matrices("crf-momentum", c)?;
        let state = TrainState {
            params,
            velocity,
            crf,
            crf_velocity: CrfVelocity { mu: vmu, w: vw },
            iteration: self.iteration,
            stage_iteration: self.stage_iteration,
            stages_completed: self.stages_completed,
            seed: self.seed,
        };
        state.validate(cfg)?;
        Ok(state)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&self.dtype.code().to_le_bytes());
        b.extend_from_slice(&self.iteration.to_le_bytes());
        b.extend_from_slice(&u32::from(self.stages_completed).to_le_bytes());
        b.extend_from_slice(&self.stage_iteration.to_le_bytes());
        b.extend_from_slice(&self.seed.to_le_bytes());
        b.extend_from_slice(&self.param_seed.to_le_bytes());
        b.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            b.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            b.extend_from_slice(t.name.as_bytes());
            b.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for &d in &t.dims {
                b.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &t.data {
                match self.dtype {
                    Dtype::F32 => b.extend_from_slice(&(v as f32).to_le_bytes()),
                    Dtype::F64 => b.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        b
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let code = r.u32()?;
        let dtype = Dtype::from_code(code).ok_or_else(|| format!("unknown dtype code {code}"))?;
        let iteration = r.u64()?;
        let stages_completed =
            u8::try_from(r.u32()?).map_err(|_| "stage count out of range".to_string())?;
        let stage_iteration = r.u64()?;
        let seed = r.u64()?;
        let param_seed = r.u64()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| "tensor name is not UTF-8")?;
            let ndim = r.u32()? as usize;
            let dims = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| format!("tensor {name} is too large"))?;
            let data = match dtype {
                Dtype::F32 => (0..n).map(|_| r.f32().map(f64::from)).collect::<std::result::Result<Vec<_>, _>>()?,
                Dtype::F64 => (0..n).map(|_| r.f64()).collect::<std::result::Result<Vec<_>, _>>()?,
            };
            tensors.push(Tensor { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        Ok(Checkpoint { dtype, iteration, stages_completed, stage_iteration, seed, param_seed, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(Error::io(dir))?;
        }
        fs::write(path, self.encode()).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(Error::io(path))?;
        Checkpoint::decode(&bytes).map_err(|d| Error::format(path, d))
    }
}

pub fn save_state(path: &Path, state: &TrainState, dtype: Dtype) -> Result<()> {
    Checkpoint::from_state(state, dtype).save(path)
}

pub fn load_state(path: &Path, cfg: &NetworkConfig) -> Result<TrainState> {
    Checkpoint::load(path)?.to_state(cfg).map_err(|e| match e {
        Error::Invalid(d) => Error::format(path, d),
        e => e,
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> std::result::Result<[u8; N], String> {
        let mut a = [0u8; N];
        a.copy_from_slice(self.take(N)?);
        Ok(a)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        self.array().map(u32::from_le_bytes)
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        self.array().map(u64::from_le_bytes)
    }

    fn f32(&mut self) -> std::result::Result<f32, String> {
        self.array().map(f32::from_le_bytes)
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        self.array().map(f64::from_le_bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state() -> (NetworkConfig, TrainState) {
        let cfg = NetworkConfig::desk();
        let mut s = TrainState::new(&cfg, 7).unwrap();
        s.iteration = 123;
        s.stage_iteration = 23;
        s.stages_completed = 1;
        s.velocity.layers[0].weight[3] = 0.25;
        s.crf_velocity.w[2][1] = -1.5;
        (cfg, s)
    }

    #[test]
    fn f64_round_trip_is_exact() {
        let (cfg, s) = state();
        let bytes = Checkpoint::from_state(&s, Dtype::F64).encode();
        let back = Checkpoint::decode(&bytes).unwrap().to_state(&cfg).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn f32_round_trip_rounds_values() {
        let (cfg, s) = state();
        let bytes = Checkpoint::from_state(&s, Dtype::F32).encode();
        let ck = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(ck.dtype, Dtype::F32);
        let back = ck.to_state(&cfg).unwrap();
        let w = &s.params.layers[0].weight;
        let wb = &back.params.layers[0].weight;
        assert!(w.iter().zip(wb).all(|(a, b)| *b == f64::from(*a as f32)));
        assert_eq!(back.iteration, 123);
    }

    #[test]
    fn header_fields_are_little_endian() {
        let (_, s) = state();
        let b = Checkpoint::from_state(&s, Dtype::F64).encode();
        assert_eq!(&b[..8], MAGIC);
        assert_eq!(b[8..12], 1u32.to_le_bytes());
        assert_eq!(b[12..16], 8u32.to_le_bytes());
        assert_eq!(b[16..24], 123u64.to_le_bytes());
        assert_eq!(b[24..28], 1u32.to_le_bytes());
        assert_eq!(b[28..36], 23u64.to_le_bytes());
    }

    #[test]
    fn corrupt_bytes_are_rejected() {
        let (_, s) = state();
        let b = Checkpoint::from_state(&s, Dtype::F64).encode();
        assert!(Checkpoint::decode(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(Checkpoint::decode(&bad).unwrap_err().contains("magic"));
        let mut bad = b.clone();
        bad[12] = 5;
        assert!(Checkpoint::decode(&bad).unwrap_err().contains("dtype"));
        let mut extra = b;
        extra.push(0);
        assert!(Checkpoint::decode(&extra).is_err());
    }

    #[test]
    fn mismatched_config_is_rejected() {
        let (_, s) = state();
        let ck = Checkpoint::from_state(&s, Dtype::F64);
        let mut other = NetworkConfig::desk();
        other.num_classes = 5;
        other.branches.iter_mut().for_each(|b| b.seg_head.out_channels = 5);
        assert!(ck.to_state(&other).is_err());
    }
}
