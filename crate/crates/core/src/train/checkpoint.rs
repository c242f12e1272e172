//! Versioned binary checkpoint container.
//!
//! Layout (little-endian): magic `CTCK`, u32 version, 64 hex bytes of config
//! hash, u32 section count, then per section a 4-byte tag, u64 payload length,
//! 32-byte SHA-256 of the payload and the payload itself. Sections are `CONF`
//! (canonical config text), `PARM` (parameters), `ADAM` (optimizer state) and
//! `TRNS` (schedule position and PRNG state). Floats are stored as f64.

use std::path::Path;

use indexmap::IndexMap;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{Config, Progress};
use crate::error::{Error, Result};
use crate::numerics::{AdamState, ParamStore, Tensor};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CTCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const SECTIONS: [&[u8; 4]; 4] = [b"CONF", b"PARM", b"ADAM", b"TRNS"];

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<S: Scalar = f64> {
    pub config_text: String,
    pub config_hash: String,
    pub params: IndexMap<String, Tensor<S>>,
    pub adam: AdamState<S>,
    pub progress: Progress,
    pub rng: ChaCha8Rng,
}

impl<S: Scalar> Checkpoint<S> {
    pub fn capture(
        config: &Config,
        params: &ParamStore<S>,
        adam: &AdamState<S>,
        progress: &Progress,
        rng: &ChaCha8Rng,
    ) -> Self {
        Checkpoint {
            config_text: config.to_text(),
            config_hash: config.hash(),
            params: params.iter().map(|(n, p)| (n.to_string(), p.value.clone())).collect(),
            adam: adam.clone(),
            progress: progress.clone(),
            rng: rng.clone(),
        }
    }

    pub fn config(&self) -> Result<Config> {
        Config::parse(&self.config_text, Path::new("<checkpoint>"))
    }

    /// Copies stored values into `store`, which must hold exactly the same names and shapes.
    pub fn restore_params(&self, store: &mut ParamStore<S>) -> Result<()> {
        if store.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "{} stored parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, value) in &self.params {
            let p = store.get_mut(name).ok_or_else(|| Error::Checkpoint(format!("model has no parameter `{name}`")))?;
            if p.value.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` stored as {:?}, model expects {:?}",
                    value.shape(),
                    p.value.shape()
                )));
            }
            p.value = value.clone();
            p.grad = None;
        }
        Ok(())
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
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn tensor<S: Scalar>(&mut self, t: &Tensor<S>) {
        self.u32(t.ndim() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &x in t.data() {
            self.f64(x.to_f64_exact());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    section: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("section {} ends early", self.section)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
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
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("non-UTF-8 text in {}", self.section)))
    }
    fn tensor<S: Scalar>(&mut self) -> Result<Tensor<S>> {
        let ndim = self.u32()? as usize;
        let shape = (0..ndim).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        if n > self.bytes.len() / 8 {
            return Err(Error::Checkpoint(format!("implausible tensor size in {}", self.section)));
        }
        let data = (0..n).map(|_| self.f64().map(S::lit)).collect::<Result<Vec<_>>>()?;
        Tensor::from_vec(shape, data)
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Checkpoint(format!("trailing bytes in section {}", self.section)));
        }
        Ok(())
    }
}

fn digest(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

pub fn encode_checkpoint<S: Scalar>(ck: &Checkpoint<S>) -> Vec<u8> {
    let conf = ck.config_text.as_bytes().to_vec();

    let mut parm = Writer(Vec::new());
    parm.u32(ck.params.len() as u32);
    for (name, t) in &ck.params {
        parm.str(name);
        parm.tensor(t);
    }

    let mut adam = Writer(Vec::new());
    let a = &ck.adam;
    for x in [a.lr, a.base_lr, a.beta1, a.beta2, a.eps] {
        adam.f64(x.to_f64_exact());
    }
    adam.u64(a.step);
    adam.u32(a.moments.len() as u32);
    for (name, (m, v)) in &a.moments {
        adam.str(name);
        adam.tensor(m);
        adam.tensor(v);
    }

    let mut trns = Writer(Vec::new());
    let p = &ck.progress;
    trns.u64(p.epoch);
    trns.u64(p.position as u64);
    trns.u64(p.global_step);
    trns.u32(p.order.len() as u32);
    for &i in &p.order {
        trns.u64(i as u64);
    }
    trns.0.extend_from_slice(&ck.rng.get_seed());
    trns.u64(ck.rng.get_stream());
    trns.0.extend_from_slice(&ck.rng.get_word_pos().to_le_bytes());

    let mut out = Writer(Vec::new());
    out.0.extend_from_slice(CHECKPOINT_MAGIC);
    out.u32(CHECKPOINT_VERSION);
    out.0.extend_from_slice(ck.config_hash.as_bytes());
    out.u32(SECTIONS.len() as u32);
    for (tag, payload) in SECTIONS.iter().zip([conf, parm.0, adam.0, trns.0]) {
        out.0.extend_from_slice(*tag);
        out.u64(payload.len() as u64);
        out.0.extend_from_slice(&digest(&payload));
        out.0.extend_from_slice(&payload);
    }
    out.0
}

/// Decodes a checkpoint, refusing it when `expected` is given and hashes differently.
pub fn decode_checkpoint<S: Scalar>(path: &Path, bytes: &[u8], expected: Option<&Config>) -> Result<Checkpoint<S>> {
    let mut r = Reader { bytes, pos: 0, section: "header" };
    let truncated = |found| Error::Truncated { path: path.to_path_buf(), expected: 76, found };
    if bytes.len() < 76 {
        return Err(truncated(bytes.len()));
    }
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic { path: path.to_path_buf(), expected: "CTCK" });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch { path: path.to_path_buf(), found: version, expected: CHECKPOINT_VERSION });
    }
    let hash =
        String::from_utf8(r.take(64)?.to_vec()).map_err(|_| Error::Checkpoint("malformed config hash".into()))?;
    if let Some(cfg) = expected {
        let want = cfg.hash();
        if want != hash {
            return Err(Error::ConfigHashMismatch { expected: want, found: hash });
        }
    }
    let count = r.u32()? as usize;
    if count != SECTIONS.len() {
        return Err(Error::Checkpoint(format!("expected {} sections, found {count}", SECTIONS.len())));
    }
    let mut payloads = Vec::with_capacity(count);
    for tag in SECTIONS {
        let name: &'static str = std::str::from_utf8(tag).expect("ascii tag");
        r.section = name;
        if r.take(4)? != tag {
            return Err(Error::Checkpoint(format!("expected section {name}")));
        }
        let len = usize::try_from(r.u64()?).map_err(|_| Error::Checkpoint("section too large".into()))?;
        let stored: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let payload = r.take(len)?;
        if digest(payload) != stored {
            return Err(Error::Integrity(name.to_string()));
        }
        payloads.push((name, payload));
    }
    r.section = "trailer";
    r.finish()?;

    let config_text =
        String::from_utf8(payloads[0].1.to_vec()).map_err(|_| Error::Checkpoint("config text is not UTF-8".into()))?;
    let config = Config::parse(&config_text, path)?;
    if config.hash() != hash {
        return Err(Error::Checkpoint("stored config does not match its hash".into()));
    }

    let mut p = Reader { bytes: payloads[1].1, pos: 0, section: "PARM" };
    let n = p.u32()? as usize;
    let mut params = IndexMap::with_capacity(n);
    for _ in 0..n {
        let name = p.str()?;
        params.insert(name, p.tensor()?);
    }
    p.finish()?;

    let mut a = Reader { bytes: payloads[2].1, pos: 0, section: "ADAM" };
    let (lr, base_lr, beta1, beta2, eps) = (a.f64()?, a.f64()?, a.f64()?, a.f64()?, a.f64()?);
    let step = a.u64()?;
    let n = a.u32()? as usize;
    let mut moments = IndexMap::with_capacity(n);
    for _ in 0..n {
        let name = a.str()?;
        let m = a.tensor()?;
        let v = a.tensor()?;
        moments.insert(name, (m, v));
    }
    a.finish()?;
    let adam = AdamState {
        lr: S::lit(lr),
        base_lr: S::lit(base_lr),
        beta1: S::lit(beta1),
        beta2: S::lit(beta2),
        eps: S::lit(eps),
        step,
        moments,
    };

    let mut t = Reader { bytes: payloads[3].1, pos: 0, section: "TRNS" };
    let epoch = t.u64()?;
    let position = t.u64()? as usize;
    let global_step = t.u64()?;
    let n = t.u32()? as usize;
    let order = (0..n).map(|_| t.u64().map(|i| i as usize)).collect::<Result<Vec<_>>>()?;
    let seed: [u8; 32] = t.take(32)?.try_into().expect("32 bytes");
    let stream = t.u64()?;
    let word_pos = u128::from_le_bytes(t.take(16)?.try_into().expect("16 bytes"));
    t.finish()?;
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);

    Ok(Checkpoint {
        config_text,
        config_hash: hash,
        params,
        adam,
        progress: Progress { epoch, position, global_step, order },
        rng,
    })
}

pub fn write_checkpoint<S: Scalar>(ck: &Checkpoint<S>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ck))?;
    Ok(())
}

pub fn read_checkpoint<S: Scalar>(path: impl AsRef<Path>, expected: Option<&Config>) -> Result<Checkpoint<S>> {
    let path = path.as_ref();
    decode_checkpoint(path, &std::fs::read(path)?, expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::tests::{tiny_config, tiny_data};
    use crate::train::Trainer;

    #[test]
    fn round_trip_is_exact() {
        let mut t = Trainer::new(&tiny_config(), &tiny_data()).unwrap();
        t.run_steps(2).unwrap();
        let ck = t.checkpoint();
        let bytes = encode_checkpoint(&ck);
        let back: Checkpoint<f64> = decode_checkpoint(Path::new("x"), &bytes, Some(&tiny_config())).unwrap();
        assert_eq!(back, ck);
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn refuses_other_configs_and_corruption() {
        let t = Trainer::new(&tiny_config(), &tiny_data()).unwrap();
        let bytes = encode_checkpoint(&t.checkpoint());
        let other = Config { seed: 9, ..tiny_config() };
        assert!(matches!(
            decode_checkpoint::<f64>(Path::new("x"), &bytes, Some(&other)),
            Err(Error::ConfigHashMismatch { .. })
        ));
        let mut bad = bytes.clone();
        let last = bad.len() - 20;
        bad[last] ^= 0x40;
        assert!(
            matches!(decode_checkpoint::<f64>(Path::new("x"), &bad, None), Err(Error::Integrity(s)) if s == "TRNS")
        );
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(decode_checkpoint::<f64>(Path::new("x"), &magic, None), Err(Error::BadMagic { .. })));
        let mut version = bytes.clone();
        version[4] = 9;
        assert!(matches!(decode_checkpoint::<f64>(Path::new("x"), &version, None), Err(Error::VersionMismatch { .. })));
        assert!(decode_checkpoint::<f64>(Path::new("x"), &bytes[..bytes.len() - 1], None).is_err());
    }
}
