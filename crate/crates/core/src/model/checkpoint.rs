//! Checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "NVOLCKPT"
//! version      u32      currently 1
//! config       u32 length + UTF-8 TOML of the ModelConfig
//! val_loss     f64      validation loss at save time (NaN if unknown)
//! 3 sections   parameters, buffers, optimizer velocity; each is
//!              u32 count, then per tensor:
//!                u32 name length, name bytes, u8 rank, rank x u64 extents,
//!                f32 payload
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Network};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NVOLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub network: Network<f32>,
    /// Momentum buffers by parameter name (empty if none were saved).
    pub velocity: BTreeMap<String, Tensor<f32>>,
    pub val_loss: f64,
}

fn put_tensors<'a>(buf: &mut Vec<u8>, tensors: impl ExactSizeIterator<Item = (&'a String, &'a Tensor<f32>)>) {
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.rank() as u8);
        for &e in t.shape() {
            buf.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

/// Serialize into memory; see the module docs for the layout.
pub fn to_bytes(net: &Network<f32>, velocity: &BTreeMap<String, Tensor<f32>>, val_loss: f64) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = net.config().to_toml();
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(cfg.as_bytes());
    buf.extend_from_slice(&val_loss.to_le_bytes());
    put_tensors(&mut buf, net.params().iter());
    put_tensors(&mut buf, net.buffers().iter());
    put_tensors(&mut buf, velocity.iter());
    buf
}

/// Write atomically (temp file + rename) so an interrupted save never
/// leaves a half-written best checkpoint behind.
pub fn save(path: &Path, net: &Network<f32>, velocity: &BTreeMap<String, Tensor<f32>>, val_loss: f64) -> Result<()> {
    let bytes = to_bytes(net, velocity, val_loss);
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated {
                what: "checkpoint".into(),
                detail: format!("{what}: need {n} bytes at offset {}, {} left", self.pos, self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn tensors(&mut self, section: &str) -> Result<Vec<(String, Tensor<f32>)>> {
        let count = self.u32(&format!("{section} count"))?;
        let mut out = Vec::with_capacity(count as usize);
        for i in 0..count {
            let ctx = format!("{section} entry {i}");
            let len = self.u32(&ctx)? as usize;
            let name = String::from_utf8(self.take(len, &ctx)?.to_vec())
                .map_err(|_| Error::invalid(format!("checkpoint: {ctx} has a non-UTF-8 name")))?;
            let ctx = format!("tensor `{name}`");
            let rank = self.take(1, &ctx)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(self.u64(&ctx)? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::invalid("tensor too large"))?, &ctx)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            out.push((name, Tensor::new(&shape, data)?));
        }
        Ok(out)
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(8, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            what: "checkpoint",
            found: magic.to_vec(),
        });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            what: "checkpoint",
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let len = r.u32("config length")? as usize;
    let text = std::str::from_utf8(r.take(len, "config text")?)
        .map_err(|_| Error::invalid("checkpoint config is not UTF-8"))?;
    let config = ModelConfig::from_toml(text)?;
    let val_loss = f64::from_le_bytes(r.take(8, "validation loss")?.try_into().expect("8 bytes"));

    let mut network = Network::<f32>::build_with(&config, |_, shape, _| Tensor::zeros(shape))?;
    let expected: Vec<String> = network.params().keys().chain(network.buffers().keys()).cloned().collect();
    let mut params = r.tensors("parameters")?;
    params.extend(r.tensors("buffers")?);
    let mut seen = std::collections::BTreeSet::new();
    for (name, t) in params {
        network
            .set_tensor(&name, t)
            .map_err(|e| Error::ConfigMismatch(format!("tensor `{name}`: {e}")))?;
        seen.insert(name);
    }
    if let Some(missing) = expected.iter().find(|n| !seen.contains(*n)) {
        return Err(Error::Truncated {
            what: "checkpoint".into(),
            detail: format!("tensor `{missing}` is missing"),
        });
    }
    let velocity: BTreeMap<_, _> = r.tensors("velocity")?.into_iter().collect();
    for (name, v) in &velocity {
        match network.param(name) {
            Some(p) if p.shape() == v.shape() => {}
            _ => return Err(Error::ConfigMismatch(format!("velocity `{name}` has no matching parameter"))),
        }
    }
    if r.pos != buf.len() {
        return Err(Error::invalid(format!(
            "checkpoint has {} trailing bytes",
            buf.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        network,
        velocity,
        val_loss,
    })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&buf)
}

/// Load and require the stored configuration to equal `expected`.
pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let ckpt = load(path)?;
    if ckpt.network.config() != expected {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint holds {:?}, requested {:?}",
            ckpt.network.config(),
            expected
        )));
    }
    Ok(ckpt)
}
