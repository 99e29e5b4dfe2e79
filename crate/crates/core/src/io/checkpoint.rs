//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "CTSNETCK" | version u32 | kind u8 | config len u32 | config utf-8
//! | param count u32 | per param: name len u32, name, ndim u32, dims u64..., f32 values
//! | sha-256 of everything before it (32 bytes)
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::parse_kv;
use crate::error::{Error, Result};
use crate::nets::{CmeNet, CtsNet, NetConfig};
use crate::nn::ParamStore;
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 8] = b"CTSNETCK";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Cme,
    Cts,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Cme => "cme",
            ModelKind::Cts => "cts",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SavedParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub config: NetConfig,
    pub params: Vec<SavedParam>,
}

fn save_store<T: Real>(store: &ParamStore<T>, out: &mut Vec<SavedParam>) {
    for p in store.iter() {
        out.push(SavedParam {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            values: p.value.data().iter().map(|v| v.as_f64() as f32).collect(),
        });
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Corrupt("invalid utf-8".into()))
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

impl Checkpoint {
    pub fn from_cme<T: Real>(net: &CmeNet<T>) -> Self {
        let mut params = Vec::new();
        save_store(&net.store, &mut params);
        Self {
            kind: ModelKind::Cme,
            config: net.cfg.clone(),
            params,
        }
    }

    pub fn from_cts<T: Real>(net: &CtsNet<T>) -> Self {
        let mut params = Vec::new();
        save_store(&net.cme.store, &mut params);
        save_store(&net.csr.store, &mut params);
        Self {
            kind: ModelKind::Cts,
            config: net.cfg().clone(),
            params,
        }
    }

    fn config_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.config.entries() {
            s.push_str(&format!("{k}={v}\n"));
        }
        s.push_str(&format!("seed={}\n", self.config.seed));
        s
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(match self.kind {
            ModelKind::Cme => 0,
            ModelKind::Cts => 1,
        });
        let cfg = self.config_text();
        put_u32(&mut out, cfg.len());
        out.extend_from_slice(cfg.as_bytes());
        put_u32(&mut out, self.params.len());
        for p in &self.params {
            put_u32(&mut out, p.name.len());
            out.extend_from_slice(p.name.as_bytes());
            put_u32(&mut out, p.shape.len());
            for &d in &p.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &p.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < MAGIC.len() + 4 + DIGEST_LEN || &buf[..MAGIC.len()] != MAGIC {
            return Err(Error::Corrupt("missing header".into()));
        }
        let version = u32::from_le_bytes(buf[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let (body, digest) = buf.split_at(buf.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Corrupt("digest mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 12 };
        let kind = match r.take(1)?[0] {
            0 => ModelKind::Cme,
            1 => ModelKind::Cts,
            k => return Err(Error::Corrupt(format!("unknown model kind {k}"))),
        };
        let mut config = NetConfig::full();
        for (k, v) in parse_kv(&r.string()?)? {
            if !config.apply(&k, &v)? {
                return Err(Error::Corrupt(format!("unknown config key {k:?}")));
            }
        }
        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Corrupt("oversized tensor".into()))?)?;
            let values = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            params.push(SavedParam { name, shape, values });
        }
        if r.pos != body.len() {
            return Err(Error::Corrupt(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Self { kind, config, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Structural fields that differ from `expected`.
    pub fn config_mismatches(&self, expected: &NetConfig) -> Vec<String> {
        self.config
            .entries()
            .into_iter()
            .zip(expected.entries())
            .filter(|(a, b)| a.1 != b.1)
            .map(|((k, got), (_, want))| format!("{k}: checkpoint {got}, model {want}"))
            .collect()
    }

    /// Copy the saved values into every parameter of `store`.
    pub fn fill<T: Real>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let mut problems = Vec::new();
        let mut staged = Vec::with_capacity(store.len());
        for p in store.iter() {
            match self.params.iter().find(|s| s.name == p.name) {
                None => problems.push(format!("{}: missing", p.name)),
                Some(s) if s.shape != p.value.shape() => {
                    problems.push(format!("{}: shape {:?} vs {:?}", p.name, s.shape, p.value.shape()))
                }
                Some(s) => staged.push(Tensor::new(
                    s.shape.clone(),
                    s.values.iter().map(|&v| T::from_f64(v as f64)).collect(),
                )?),
            }
        }
        if !problems.is_empty() {
            return Err(Error::Mismatch(problems));
        }
        for (p, v) in store.iter_mut().zip(staged) {
            p.value = v;
        }
        Ok(())
    }

    /// Stage-1 network; works for both kinds.
    pub fn cme<T: Real>(&self) -> Result<CmeNet<T>> {
        let mut net = CmeNet::new(&self.config)?;
        self.fill(&mut net.store)?;
        Ok(net)
    }

    /// Full network. A stage-1 checkpoint initializes CME-Net and leaves
    /// CSR-Net freshly initialized.
    pub fn cts<T: Real>(&self) -> Result<CtsNet<T>> {
        let mut net = CtsNet::new(&self.config)?;
        self.fill(&mut net.cme.store)?;
        if self.kind == ModelKind::Cts {
            self.fill(&mut net.csr.store)?;
        }
        Ok(net)
    }

    /// Like [`Checkpoint::cts`] but rejects a structural mismatch with `expected`.
    pub fn cts_matching<T: Real>(&self, expected: &NetConfig) -> Result<CtsNet<T>> {
        let bad = self.config_mismatches(expected);
        if !bad.is_empty() {
            return Err(Error::Mismatch(bad));
        }
        self.cts()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro() -> NetConfig {
        NetConfig {
            channels: 4,
            tcm_hidden: 4,
            seed: 5,
            ..NetConfig::tiny()
        }
    }

    #[test]
    fn bytes_round_trip_bit_exact() {
        let net = CtsNet::<f32>::new(&micro()).unwrap();
        let ck = Checkpoint::from_cts(&net);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        let net2: CtsNet<f32> = back.cts().unwrap();
        for (a, b) in net.csr.store.iter().zip(net2.csr.store.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn corruption_and_version() {
        let bytes = Checkpoint::from_cme(&CmeNet::<f32>::new(&micro()).unwrap()).to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() / 2]), Err(Error::Corrupt(_))));
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Corrupt(_))));
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(matches!(Checkpoint::from_bytes(&v2), Err(Error::Version { found: 2, .. })));
        assert!(matches!(Checkpoint::from_bytes(b"nope"), Err(Error::Corrupt(_))));
    }

    #[test]
    fn stage_one_checkpoint_seeds_full_model() {
        let cme = CmeNet::<f32>::new(&micro()).unwrap();
        let ck = Checkpoint::from_cme(&cme);
        let cts: CtsNet<f32> = ck.cts().unwrap();
        for (a, b) in cme.store.iter().zip(cts.cme.store.iter()) {
            assert_eq!(a.value, b.value);
        }
        let fresh = CtsNet::<f32>::new(&micro()).unwrap();
        for (a, b) in fresh.csr.store.iter().zip(cts.csr.store.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn structural_mismatch_lists_fields() {
        let ck = Checkpoint::from_cme(&CmeNet::<f32>::new(&micro()).unwrap());
        let other = NetConfig {
            channels: 8,
            gate_weight_sharing: true,
            ..micro()
        };
        match ck.cts_matching::<f32>(&other) {
            Err(Error::Mismatch(fields)) => {
                assert_eq!(fields.len(), 2);
                assert!(fields[0].starts_with("channels"));
                assert!(fields[1].starts_with("gate_weight_sharing"));
            }
            other => panic!("{other:?}"),
        }
        let mut wrong = CmeNet::<f32>::new(&other).unwrap();
        assert!(matches!(ck.fill(&mut wrong.store), Err(Error::Mismatch(_))));
    }
}
