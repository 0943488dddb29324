//! Model checkpoints: little-endian binary with the configuration text
//! embedded, parameter tensors stored by name, and full validation against
//! the live architecture before any weight is touched.

use crate::error::{CoreError, Result};
use crate::model::DualDomainModel;
use crate::tensor::Tensor;
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"MMCK";
const VERSION: u16 = 1;

/// Parameters plus the configuration echo they were trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub echo: String,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn of_model(model: &DualDomainModel, echo: &str) -> Self {
        Self {
            echo: echo.to_string(),
            params: model
                .params()
                .into_iter()
                .map(|(name, t)| (name, t.clone()))
                .collect(),
        }
    }
}

pub fn save_checkpoint(path: &Path, model: &DualDomainModel, echo: &str) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let echo_bytes = echo.as_bytes();
    w.write_all(&(echo_bytes.len() as u32).to_le_bytes())?;
    w.write_all(echo_bytes)?;
    let params = model.params();
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params {
        let nb = name.as_bytes();
        if nb.len() > u16::MAX as usize {
            return Err(CoreError::InvalidArgument("parameter name too long".into()));
        }
        w.write_all(&(nb.len() as u16).to_le_bytes())?;
        w.write_all(nb)?;
        let shape = t.shape();
        if shape.len() > u8::MAX as usize {
            return Err(CoreError::InvalidArgument("parameter rank too high".into()));
        }
        w.write_all(&[shape.len() as u8])?;
        for &d in shape {
            if d > u32::MAX as usize {
                return Err(CoreError::InvalidArgument("dimension exceeds u32".into()));
            }
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn take(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let at = self.offset;
        self.inner.read_exact(buf).map_err(|e| CoreError::Data {
            offset: at,
            msg: format!("reading {what}: {e}"),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        let mut b = [0u8; 1];
        self.take(&mut b, what)?;
        Ok(b[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let mut b = [0u8; 2];
        self.take(&mut b, what)?;
        Ok(u16::from_le_bytes(b))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.take(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let mut b = [0u8; 8];
        self.take(&mut b, what)?;
        Ok(f64::from_le_bytes(b))
    }

    fn string(&mut self, len: usize, what: &str) -> Result<String> {
        let at = self.offset;
        let mut buf = vec![0u8; len];
        self.take(&mut buf, what)?;
        String::from_utf8(buf).map_err(|_| CoreError::Data {
            offset: at,
            msg: format!("{what} is not valid UTF-8"),
        })
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut c = Cursor {
        inner: BufReader::new(File::open(path)?),
        offset: 0,
    };
    let mut magic = [0u8; 4];
    c.take(&mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(CoreError::Data {
            offset: 0,
            msg: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let version = c.u16("version")?;
    if version != VERSION {
        return Err(CoreError::Data {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let echo_len = c.u32("config echo length")? as usize;
    let echo = c.string(echo_len, "config echo")?;
    let count = c.u32("parameter count")? as usize;
    let mut params = Vec::with_capacity(count);
    for pi in 0..count {
        let name_len = c.u16("parameter name length")? as usize;
        let name = c.string(name_len, "parameter name")?;
        let rank = c.u8("parameter rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32("dimension")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let at = c.offset;
            let v = c.f64("parameter value")?;
            if !v.is_finite() {
                return Err(CoreError::Data {
                    offset: at,
                    msg: format!("non-finite value in parameter '{name}' (index {pi})"),
                });
            }
            data.push(v);
        }
        params.push((name, Tensor::new(shape, data)?));
    }
    let mut probe = [0u8; 1];
    if c.inner.read(&mut probe).map_err(CoreError::Io)? != 0 {
        return Err(CoreError::Data {
            offset: c.offset,
            msg: "trailing bytes after final parameter".into(),
        });
    }
    Ok(Checkpoint { echo, params })
}

/// Copies checkpoint weights into the model. The name set and every shape
/// are checked first; on any mismatch the model is left untouched.
pub fn apply_checkpoint(model: &mut DualDomainModel, ckpt: &Checkpoint) -> Result<()> {
    let stored: HashMap<&str, &Tensor> = ckpt
        .params
        .iter()
        .map(|(n, t)| (n.as_str(), t))
        .collect();
    if stored.len() != ckpt.params.len() {
        return Err(CoreError::ArchitectureMismatch {
            msg: "checkpoint contains duplicate parameter names".into(),
        });
    }
    let live = model.params();
    for (name, t) in &live {
        match stored.get(name.as_str()) {
            None => {
                return Err(CoreError::ArchitectureMismatch {
                    msg: format!("checkpoint is missing parameter '{name}'"),
                })
            }
            Some(s) if s.shape() != t.shape() => {
                return Err(CoreError::ArchitectureMismatch {
                    msg: format!(
                        "parameter '{name}' has shape {:?} in checkpoint, model expects {:?}",
                        s.shape(),
                        t.shape()
                    ),
                })
            }
            _ => {}
        }
    }
    if stored.len() != live.len() {
        let known: Vec<&str> = live.iter().map(|(n, _)| n.as_str()).collect();
        let extra = ckpt
            .params
            .iter()
            .map(|(n, _)| n.as_str())
            .find(|n| !known.contains(n))
            .unwrap_or("?");
        return Err(CoreError::ArchitectureMismatch {
            msg: format!("checkpoint carries unknown parameter '{extra}'"),
        });
    }
    for (name, param) in model.params_mut() {
        let src = stored[name.as_str()];
        param.data_mut().copy_from_slice(src.data());
    }
    Ok(())
}

/// Convenience: load from disk and apply in one call, returning the echo.
pub fn restore(path: &Path, model: &mut DualDomainModel) -> Result<String> {
    let ckpt = load_checkpoint(path)?;
    apply_checkpoint(model, &ckpt)?;
    Ok(ckpt.echo)
}

/// Reconstructs the architecture a checkpoint was saved under. Network
/// widths and class counts are read off the stored shapes; the image
/// geometry (k, g) and the question length cap are not part of any weight
/// and must be supplied by the caller.
pub fn model_config_from_checkpoint(
    ckpt: &Checkpoint,
    k: usize,
    g: usize,
    max_question_len: usize,
) -> Result<crate::model::ModelConfig> {
    let shape = |name: &str| -> Result<&[usize]> {
        ckpt.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.shape())
            .ok_or_else(|| CoreError::ArchitectureMismatch {
                msg: format!("checkpoint is missing parameter '{name}'"),
            })
    };
    let dim = |name: &str, axis: usize| -> Result<usize> {
        let s = shape(name)?;
        s.get(axis).copied().ok_or_else(|| {
            CoreError::ArchitectureMismatch {
                msg: format!("parameter '{name}' has rank {} (< {})", s.len(), axis + 1),
            }
        })
    };
    Ok(crate::model::ModelConfig {
        d_q: dim("gru.update.w", 0)?,
        d_v: dim("attention.key_proj", 1)?,
        k,
        g,
        d_e: dim("fuse_q.weight", 0)?,
        embed_dim: dim("embedding.rows", 1)?,
        attn_dim: dim("attention.query_proj", 0)?,
        classifier_hidden: dim("classifier_source.0.weight", 0)?,
        discriminator_hidden: dim("discriminator.0.weight", 0)?,
        max_question_len,
        token_vocab: dim("embedding.rows", 0)?,
        source_classes: dim("classifier_source.1.weight", 0)?,
        target_classes: dim("classifier_target.1.weight", 0)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::fs;

    fn small_model(seed: u64) -> DualDomainModel {
        let cfg = ModelConfig {
            d_q: 6,
            d_v: 4,
            k: 2,
            g: 2,
            d_e: 8,
            embed_dim: 5,
            attn_dim: 6,
            classifier_hidden: 7,
            discriminator_hidden: 5,
            max_question_len: 10,
            token_vocab: 12,
            source_classes: 4,
            target_classes: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DualDomainModel::init(cfg, &mut rng).unwrap()
    }

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("madapt-ckpt-tests");
        fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn roundtrip_restores_every_bit_and_the_echo() {
        let model = small_model(1);
        let path = tmp("roundtrip.ckpt");
        save_checkpoint(&path, &model, "seed=1\nmode=adapt\n").unwrap();
        let mut other = small_model(2);
        let echo = restore(&path, &mut other).unwrap();
        assert_eq!(echo, "seed=1\nmode=adapt\n");
        for ((na, a), (nb, b)) in model.params().iter().zip(other.params().iter()) {
            assert_eq!(na, nb);
            let eq = a
                .data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(eq, "parameter {na} diverged");
        }
    }

    #[test]
    fn truncated_file_reports_offset() {
        let model = small_model(3);
        let path = tmp("trunc.ckpt");
        save_checkpoint(&path, &model, "x=1\n").unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        match load_checkpoint(&path) {
            Err(CoreError::Data { offset, .. }) => assert!(offset > 0),
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_is_rejected_at_offset_zero() {
        let path = tmp("magic.ckpt");
        fs::write(&path, b"NOPE rest of file").unwrap();
        match load_checkpoint(&path) {
            Err(CoreError::Data { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let model = small_model(4);
        let path = tmp("trailing.ckpt");
        save_checkpoint(&path, &model, "").unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let clean = bytes.len() as u64;
        bytes.push(0);
        fs::write(&path, &bytes).unwrap();
        match load_checkpoint(&path) {
            Err(CoreError::Data { offset, msg }) => {
                assert_eq!(offset, clean);
                assert!(msg.contains("trailing"));
            }
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_shape_names_the_parameter_and_leaves_model_untouched() {
        let model = small_model(5);
        let path = tmp("shape.ckpt");
        save_checkpoint(&path, &model, "").unwrap();
        let mut ckpt = load_checkpoint(&path).unwrap();
        let idx = ckpt
            .params
            .iter()
            .position(|(n, _)| n == "fuse_q.bias")
            .unwrap();
        ckpt.params[idx].1 = Tensor::zeros(vec![3]);

        let mut victim = small_model(6);
        let before: Vec<Vec<f64>> = victim
            .params()
            .iter()
            .map(|(_, t)| t.data().to_vec())
            .collect();
        match apply_checkpoint(&mut victim, &ckpt) {
            Err(CoreError::ArchitectureMismatch { msg }) => {
                assert!(msg.contains("fuse_q.bias"), "{msg}");
            }
            other => panic!("expected mismatch, got {other:?}"),
        }
        for ((_, t), b) in victim.params().iter().zip(&before) {
            assert_eq!(t.data(), &b[..], "model mutated on failed restore");
        }
    }

    #[test]
    fn missing_and_extra_parameters_are_named() {
        let model = small_model(7);
        let path = tmp("names.ckpt");
        save_checkpoint(&path, &model, "").unwrap();
        let mut ckpt = load_checkpoint(&path).unwrap();
        let (orig, t) = ckpt.params.pop().unwrap();
        ckpt.params.push(("discriminator.9.weight".into(), t));

        let mut victim = small_model(8);
        match apply_checkpoint(&mut victim, &ckpt) {
            Err(CoreError::ArchitectureMismatch { msg }) => {
                assert!(msg.contains(&orig), "{msg}");
            }
            other => panic!("expected mismatch, got {other:?}"),
        }
    }

    #[test]
    fn architecture_is_recovered_from_stored_shapes() {
        let model = small_model(11);
        let ckpt = Checkpoint::of_model(&model, "");
        let cfg = model_config_from_checkpoint(&ckpt, model.config.k, model.config.g, 10).unwrap();
        assert_eq!(cfg, model.config);
        let mut empty = ckpt.clone();
        empty.params.retain(|(n, _)| n != "fuse_q.weight");
        assert!(matches!(
            model_config_from_checkpoint(&empty, 2, 2, 10),
            Err(CoreError::ArchitectureMismatch { .. })
        ));
    }

    #[test]
    fn differently_sized_architecture_is_rejected() {
        let model = small_model(9);
        let path = tmp("arch.ckpt");
        save_checkpoint(&path, &model, "").unwrap();
        let ckpt = load_checkpoint(&path).unwrap();
        let mut bigger = {
            let cfg = ModelConfig {
                d_e: 12,
                ..model.config
            };
            let mut rng = ChaCha8Rng::seed_from_u64(10);
            DualDomainModel::init(cfg, &mut rng).unwrap()
        };
        assert!(matches!(
            apply_checkpoint(&mut bigger, &ckpt),
            Err(CoreError::ArchitectureMismatch { .. })
        ));
    }
}
