use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::GaussianMixture;
use crate::loss::BetaSchedule;
use crate::optim::Adam;
use crate::tensor::RunningStats;
use crate::vae::{ModelConfig, Vae};

const MAGIC: &[u8; 8] = b"SVAECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const TAG_CONFIG: &[u8; 4] = b"CONF";
const TAG_PARAMS: &[u8; 4] = b"PARM";
const TAG_BN: &[u8; 4] = b"BNST";
const TAG_OPTIM: &[u8; 4] = b"OPTM";
const TAG_BETA: &[u8; 4] = b"BETA";
const TAG_TRAIN: &[u8; 4] = b"TRST";
const TAG_GMM: &[u8; 4] = b"GMMX";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Position of a training run: every random stream is derived from `seed`
/// and the step or epoch index, so these counters are the full stream state.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub seed: u64,
    pub epoch: u64,
    pub step: u64,
    pub best_fid: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: Vec<NamedBlock>,
    pub bn: Vec<(String, RunningStats)>,
    pub optimizer: Option<Adam>,
    pub schedule: Option<BetaSchedule>,
    pub train: TrainState,
    pub gmm: Option<GaussianMixture>,
}

impl Checkpoint {
    pub fn from_model(model: &Vae) -> Self {
        let p = model.params();
        Self {
            model: model.config().clone(),
            params: p
                .names()
                .iter()
                .zip(p.tensors())
                .map(|(n, t)| NamedBlock { name: n.clone(), shape: t.shape().to_vec(), data: t.data().to_vec() })
                .collect(),
            bn: p.bn_names().iter().cloned().zip(p.bn_stats().iter().cloned()).collect(),
            optimizer: None,
            schedule: None,
            train: TrainState::default(),
            gmm: None,
        }
    }

    /// Copies every block into `model`, which must have exactly the same
    /// block names and shapes. Nothing is written unless all blocks match.
    pub fn restore_into(&self, model: &mut Vae) -> Result<()> {
        let store = model.params();
        if store.names() != self.params.iter().map(|b| b.name.clone()).collect::<Vec<_>>().as_slice() {
            let ours: Vec<&String> = store.names().iter().filter(|n| !self.params.iter().any(|b| &&b.name == n)).collect();
            let theirs: Vec<&String> = self.params.iter().map(|b| &b.name).filter(|n| !store.names().contains(n)).collect();
            return Err(Error::BlockMismatch(format!(
                "model-only blocks {ours:?}, checkpoint-only blocks {theirs:?}"
            )));
        }
        for (b, t) in self.params.iter().zip(store.tensors()) {
            if b.shape != t.shape() {
                return Err(Error::BlockMismatch(format!(
                    "`{}` has shape {:?} in the checkpoint but {:?} in the model",
                    b.name,
                    b.shape,
                    t.shape()
                )));
            }
        }
        let bn_matches = store.bn_names().len() == self.bn.len()
            && store
                .bn_names()
                .iter()
                .zip(store.bn_stats())
                .zip(&self.bn)
                .all(|((n, dst), (m, s))| n == m && s.mean.len() == dst.mean.len());
        if !bn_matches {
            return Err(Error::BlockMismatch("batch-norm statistics do not match the model".into()));
        }
        let store = model.params_mut();
        for (b, t) in self.params.iter().zip(store.tensors_mut()) {
            t.data_mut().copy_from_slice(&b.data);
        }
        for ((_, s), dst) in self.bn.iter().zip(store.bn_stats_mut()) {
            *dst = s.clone();
        }
        Ok(())
    }

    /// Rebuilds the model described by the configuration section.
    pub fn build_model(&self) -> Result<Vae> {
        let mut m = Vae::new(self.model.clone(), self.train.seed)?;
        self.restore_into(&mut m)?;
        Ok(m)
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    section: &'static str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], section: &'static str) -> Self {
        Self { bytes, pos: 0, section }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("section `{}` is truncated", self.section)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(raw.chunks(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Format(e.to_string()))
    }
    fn done(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!("trailing bytes in section `{}`", self.section)));
        }
        Ok(())
    }
}

fn encode_params(blocks: &[NamedBlock]) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.u32(blocks.len() as u32);
    for b in blocks {
        w.str(&b.name);
        w.u32(b.shape.len() as u32);
        for &d in &b.shape {
            w.u64(d as u64);
        }
        w.f64s(&b.data);
    }
    w.0
}

fn decode_params(bytes: &[u8]) -> Result<Vec<NamedBlock>> {
    let mut r = Reader::new(bytes, "params");
    let n = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..n {
        let name = r.str()?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let data = r.f64s()?;
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::BlockMismatch(format!(
                "`{name}` declares shape {shape:?} but holds {} values",
                data.len()
            )));
        }
        out.push(NamedBlock { name, shape, data });
    }
    r.done()?;
    Ok(out)
}

fn encode_bn(bn: &[(String, RunningStats)]) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.u32(bn.len() as u32);
    for (name, s) in bn {
        w.str(name);
        w.f64s(&s.mean);
        w.f64s(&s.var);
    }
    w.0
}

fn decode_bn(bytes: &[u8]) -> Result<Vec<(String, RunningStats)>> {
    let mut r = Reader::new(bytes, "bn");
    let n = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..n {
        let name = r.str()?;
        let mean = r.f64s()?;
        let var = r.f64s()?;
        if mean.len() != var.len() {
            return Err(Error::BlockMismatch(format!("`{name}` mean/var lengths differ")));
        }
        out.push((name, RunningStats { mean, var }));
    }
    r.done()?;
    Ok(out)
}

fn encode_optim(a: &Adam) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.u64(a.step);
    w.f64s(&[a.lr, a.beta1, a.beta2, a.eps]);
    let (m, v) = a.moments();
    w.u32(m.len() as u32);
    for (mi, vi) in m.iter().zip(v) {
        w.f64s(mi);
        w.f64s(vi);
    }
    w.0
}

fn decode_optim(bytes: &[u8]) -> Result<Adam> {
    let mut r = Reader::new(bytes, "optimizer");
    let step = r.u64()?;
    let h = r.f64s()?;
    if h.len() != 4 {
        return Err(Error::Format("optimizer hyperparameters malformed".into()));
    }
    let n = r.u32()?;
    let (mut m, mut v) = (Vec::new(), Vec::new());
    for _ in 0..n {
        m.push(r.f64s()?);
        v.push(r.f64s()?);
    }
    r.done()?;
    let mut a = Adam::new(h[0]);
    a.beta1 = h[1];
    a.beta2 = h[2];
    a.eps = h[3];
    a.step = step;
    a.set_moments(m, v);
    Ok(a)
}

/// Little-endian layout:
/// `magic | version u32 | count u32 | (tag[4] | len u64 | payload | crc32 u32)*`
pub fn encode_checkpoint(c: &Checkpoint) -> Result<Vec<u8>> {
    let mut sections: Vec<(&[u8; 4], Vec<u8>)> = vec![
        (TAG_CONFIG, serde_json::to_vec(&c.model)?),
        (TAG_PARAMS, encode_params(&c.params)),
        (TAG_BN, encode_bn(&c.bn)),
        (TAG_TRAIN, serde_json::to_vec(&c.train)?),
    ];
    if let Some(o) = &c.optimizer {
        sections.push((TAG_OPTIM, encode_optim(o)));
    }
    if let Some(s) = &c.schedule {
        sections.push((TAG_BETA, serde_json::to_vec(s)?));
    }
    if let Some(g) = &c.gmm {
        sections.push((TAG_GMM, serde_json::to_vec(g)?));
    }
    let mut w = Writer(MAGIC.to_vec());
    w.u32(CHECKPOINT_VERSION);
    w.u32(sections.len() as u32);
    for (tag, payload) in sections {
        w.0.extend_from_slice(tag);
        w.u64(payload.len() as u64);
        w.0.extend_from_slice(&payload);
        w.u32(crc32fast::hash(&payload));
    }
    Ok(w.0)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes, "header");
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version { found: version, expected: CHECKPOINT_VERSION });
    }
    let count = r.u32()?;
    let mut sections = Vec::new();
    for _ in 0..count {
        let tag: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        let len = r.u64()? as usize;
        let payload = r.take(len)?;
        let crc = r.u32()?;
        let name = String::from_utf8_lossy(&tag).into_owned();
        if crc32fast::hash(payload) != crc {
            return Err(Error::Checksum(name));
        }
        sections.push((tag, payload));
    }
    r.done()?;
    let find = |tag: &[u8; 4]| sections.iter().find(|(t, _)| t == tag).map(|(_, p)| *p);
    let need = |tag: &[u8; 4]| {
        find(tag).ok_or_else(|| Error::Format(format!("missing section `{}`", String::from_utf8_lossy(tag))))
    };
    Ok(Checkpoint {
        model: serde_json::from_slice(need(TAG_CONFIG)?)?,
        params: decode_params(need(TAG_PARAMS)?)?,
        bn: decode_bn(need(TAG_BN)?)?,
        train: serde_json::from_slice(need(TAG_TRAIN)?)?,
        optimizer: find(TAG_OPTIM).map(decode_optim).transpose()?,
        schedule: find(TAG_BETA).map(serde_json::from_slice).transpose()?,
        gmm: find(TAG_GMM).map(serde_json::from_slice).transpose()?,
    })
}

/// Writes through a temporary sibling file, then renames into place.
pub fn save_checkpoint(c: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(c)?;
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path.as_ref())?)
}
