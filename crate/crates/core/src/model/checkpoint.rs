use super::{ModelConfig, ToyDiT};
use crate::error::{Error, Result};
use crate::numerics::io::{put_str, put_u32, put_u64, write_tensor, ByteReader};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8] = b"TOYDIT\x01";

impl ToyDiT {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let c = &self.config;
        let mut buf = CHECKPOINT_MAGIC.to_vec();
        for v in [c.layer_count, c.heads, c.head_dim, c.ffn_hidden, c.lora_rank, c.embed_dim] {
            put_u32(&mut buf, to_u32(v)?);
        }
        put_u64(&mut buf, c.lora_alpha.to_bits());
        for v in c.latent {
            put_u32(&mut buf, to_u32(v)?);
        }
        let tensors = self.tensors();
        put_u32(&mut buf, to_u32(tensors.len())?);
        for (name, t) in tensors {
            put_str(&mut buf, &name)?;
            write_tensor(&mut buf, t)?;
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(CHECKPOINT_MAGIC)?;
        let mut head = [0usize; 6];
        for v in &mut head {
            *v = r.len()?;
        }
        let alpha = f64::from_bits(r.u64()?);
        let mut latent = [0usize; 4];
        for v in &mut latent {
            *v = r.len()?;
        }
        let config = ModelConfig {
            layer_count: head[0],
            heads: head[1],
            head_dim: head[2],
            ffn_hidden: head[3],
            lora_rank: head[4],
            embed_dim: head[5],
            lora_alpha: alpha,
            latent,
        };
        let at = r.offset();
        let mut model = ToyDiT::zeros(config).map_err(|e| Error::Corrupt { offset: at, msg: e.to_string() })?;
        let count = r.len()?;
        let expected = model.tensors().len();
        if count != expected {
            return r.corrupt(format!("{count} tensors stored, model has {expected}"));
        }
        for (name, slot) in model.tensors_mut() {
            let at = r.offset();
            let stored = r.string()?;
            if stored != name {
                return Err(Error::Corrupt { offset: at, msg: format!("expected tensor {name}, found {stored}") });
            }
            let at = r.offset();
            let t = r.tensor()?;
            if t.shape() != slot.shape() {
                return Err(Error::Corrupt {
                    offset: at,
                    msg: format!("{name} stored as {:?}, expected {:?}", t.shape(), slot.shape()),
                });
            }
            *slot = t;
        }
        if !r.is_at_end() {
            return r.corrupt("trailing bytes after the last tensor");
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Size(format!("{v} does not fit a u32 header field")))
}
