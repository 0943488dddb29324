//! Binary dataset files: little-endian, f32 features on disk, f64 in memory.
//!
//! Layout: magic `MMDA`, version u16, record count u32, then k/g/d_v as u16
//! and the token vocabulary size as u32, followed by the records. Every
//! parse error reports the byte offset it occurred at.

use crate::data::{Category, Dataset, Domain, Sample, ANSWERS_PER_QUESTION};
use crate::error::{CoreError, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"MMDA";
const VERSION: u16 = 1;
const MAX_TOKENS: usize = 24;

fn category_code(c: Category) -> u8 {
    match c {
        Category::YesNo => 0,
        Category::Number => 1,
        Category::Other => 2,
        Category::Unanswerable => 3,
    }
}

fn category_from(code: u8, offset: u64) -> Result<Category> {
    match code {
        0 => Ok(Category::YesNo),
        1 => Ok(Category::Number),
        2 => Ok(Category::Other),
        3 => Ok(Category::Unanswerable),
        other => Err(CoreError::Data {
            offset,
            msg: format!("unknown category code {other}"),
        }),
    }
}

fn domain_code(d: Domain) -> u8 {
    match d {
        Domain::Source => 0,
        Domain::Target => 1,
    }
}

fn domain_from(code: u8, offset: u64) -> Result<Domain> {
    match code {
        0 => Ok(Domain::Source),
        1 => Ok(Domain::Target),
        other => Err(CoreError::Data {
            offset,
            msg: format!("unknown domain code {other}"),
        }),
    }
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    ds.validate()?;
    if ds.len() > u32::MAX as usize {
        return Err(CoreError::InvalidArgument("too many records".into()));
    }
    for (dim, name) in [(ds.k, "k"), (ds.g, "g"), (ds.d_v, "d_v")] {
        if dim > u16::MAX as usize {
            return Err(CoreError::InvalidArgument(format!("{name} exceeds u16")));
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(ds.len() as u32).to_le_bytes())?;
    w.write_all(&(ds.k as u16).to_le_bytes())?;
    w.write_all(&(ds.g as u16).to_le_bytes())?;
    w.write_all(&(ds.d_v as u16).to_le_bytes())?;
    w.write_all(&ds.token_vocab.to_le_bytes())?;

    for s in &ds.samples {
        for &v in s.regions.iter().chain(&s.grids) {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        w.write_all(&(s.tokens.len() as u16).to_le_bytes())?;
        for &t in &s.tokens {
            w.write_all(&t.to_le_bytes())?;
        }
        for a in &s.answers {
            let bytes = a.as_bytes();
            if bytes.len() > u16::MAX as usize {
                return Err(CoreError::InvalidArgument("answer string too long".into()));
            }
            w.write_all(&(bytes.len() as u16).to_le_bytes())?;
            w.write_all(bytes)?;
        }
        w.write_all(&[category_code(s.category), domain_code(s.domain)])?;
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

    fn f32(&mut self, what: &str) -> Result<f32> {
        let mut b = [0u8; 4];
        self.take(&mut b, what)?;
        Ok(f32::from_le_bytes(b))
    }
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
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
    let count = c.u32("record count")? as usize;
    let k = c.u16("k")? as usize;
    let g = c.u16("g")? as usize;
    let d_v = c.u16("d_v")? as usize;
    let token_vocab = c.u32("token vocab")?;

    let mut samples = Vec::with_capacity(count);
    for rec in 0..count {
        let feat = |c: &mut Cursor<_>, n: usize, what: &str| -> Result<Vec<f64>> {
            let mut out = Vec::with_capacity(n);
            for _ in 0..n {
                let at = c.offset;
                let v = c.f32(what)?;
                if !v.is_finite() {
                    return Err(CoreError::Data {
                        offset: at,
                        msg: format!("non-finite {what} in record {rec}"),
                    });
                }
                out.push(v as f64);
            }
            Ok(out)
        };
        let regions = feat(&mut c, k * d_v, "region feature")?;
        let grids = feat(&mut c, g * d_v, "grid feature")?;

        let at = c.offset;
        let n_tokens = c.u16("token count")? as usize;
        if n_tokens == 0 || n_tokens > MAX_TOKENS {
            return Err(CoreError::Data {
                offset: at,
                msg: format!("record {rec} token count {n_tokens} outside 1..={MAX_TOKENS}"),
            });
        }
        let mut tokens = Vec::with_capacity(n_tokens);
        for _ in 0..n_tokens {
            let at = c.offset;
            let t = c.u32("token")?;
            if t == 0 || t >= token_vocab {
                return Err(CoreError::Data {
                    offset: at,
                    msg: format!("record {rec} token {t} outside 1..{token_vocab}"),
                });
            }
            tokens.push(t);
        }

        let mut answers = Vec::with_capacity(ANSWERS_PER_QUESTION);
        for _ in 0..ANSWERS_PER_QUESTION {
            let len = c.u16("answer length")? as usize;
            let at = c.offset;
            let mut bytes = vec![0u8; len];
            c.take(&mut bytes, "answer text")?;
            let text = String::from_utf8(bytes).map_err(|e| CoreError::Data {
                offset: at,
                msg: format!("answer not UTF-8: {e}"),
            })?;
            answers.push(text);
        }

        let at = c.offset;
        let category = category_from(c.u8("category")?, at)?;
        let at = c.offset;
        let domain = domain_from(c.u8("domain")?, at)?;

        samples.push(Sample {
            regions,
            grids,
            tokens,
            answers,
            category,
            domain,
        });
    }

    let mut rest = [0u8; 1];
    if c.inner.read(&mut rest).map_err(CoreError::Io)? != 0 {
        return Err(CoreError::Data {
            offset: c.offset,
            msg: "trailing bytes after final record".into(),
        });
    }

    let ds = Dataset {
        samples,
        k,
        g,
        d_v,
        token_vocab,
    };
    ds.validate()?;
    Ok(ds)
}
