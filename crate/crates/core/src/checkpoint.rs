//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"DNAS"
//! version u16
//! arch    u32 block count, then per block: u32 layer count, layer bytes (u8 kernel size)
//! records repeated until EOF:
//!         u16 name length, name bytes (utf-8),
//!         u8 rank, rank x u32 dims,
//!         product(dims) f32 values
//! ```
//!
//! Round-trips are bit-exact: f32 payloads are written and read as raw
//! little-endian bit patterns.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::tensor::{ParamStore, Tensor};
use crate::unet::{BlockArch, Kernel, SubnetArch};

pub const MAGIC: [u8; 4] = *b"DNAS";
pub const VERSION: u16 = 1;

/// A parameter store plus the architecture it belongs to.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub arch: SubnetArch,
    pub params: ParamStore,
}

struct CountingWriter<W: Write> {
    inner: W,
    written: u64,
}

impl<W: Write> CountingWriter<W> {
    fn put(&mut self, bytes: &[u8]) -> Result<()> {
        self.inner.write_all(bytes)?;
        self.written += bytes.len() as u64;
        Ok(())
    }
}

pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = CountingWriter {
        inner: BufWriter::new(file),
        written: 0,
    };
    w.put(&MAGIC)?;
    w.put(&VERSION.to_le_bytes())?;
    w.put(&(ckpt.arch.blocks().len() as u32).to_le_bytes())?;
    for block in ckpt.arch.blocks() {
        w.put(&(block.choices().len() as u32).to_le_bytes())?;
        for k in block.choices() {
            w.put(&[k.size() as u8])?;
        }
    }
    for p in ckpt.params.iter() {
        let name = p.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(CoreError::Contract(format!(
                "parameter name too long: {:?}",
                p.name
            )));
        }
        w.put(&(name.len() as u16).to_le_bytes())?;
        w.put(name)?;
        let shape = p.tensor.shape();
        if shape.len() > u8::MAX as usize {
            return Err(CoreError::Contract(format!(
                "parameter rank too large on {:?}",
                p.name
            )));
        }
        w.put(&[shape.len() as u8])?;
        for &d in shape {
            w.put(&(d as u32).to_le_bytes())?;
        }
        for &v in p.tensor.data() {
            w.put(&v.to_le_bytes())?;
        }
    }
    w.inner.flush()?;
    Ok(())
}

struct CountingReader<R: Read> {
    inner: R,
    offset: u64,
}

impl<R: Read> CountingReader<R> {
    fn take(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let at = self.offset;
        self.inner.read_exact(buf).map_err(|_| CoreError::Format {
            offset: at,
            message: format!("truncated while reading {what}"),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
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

    /// None on clean EOF, Some(byte) otherwise.
    fn maybe_u8(&mut self) -> Result<Option<u8>> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b)? {
            0 => Ok(None),
            _ => {
                self.offset += 1;
                Ok(Some(b[0]))
            }
        }
    }
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path)?;
    let mut r = CountingReader {
        inner: BufReader::new(file),
        offset: 0,
    };
    let mut magic = [0u8; 4];
    r.take(&mut magic, "magic")?;
    if magic != MAGIC {
        return Err(CoreError::Format {
            offset: 0,
            message: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(CoreError::Format {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let block_count = r.u32("block count")? as usize;
    if block_count > 1024 {
        return Err(CoreError::Format {
            offset: 6,
            message: format!("implausible block count {block_count}"),
        });
    }
    let mut blocks = Vec::with_capacity(block_count);
    for _ in 0..block_count {
        let at = r.offset;
        let layers = r.u32("layer count")? as usize;
        if layers > 64 {
            return Err(CoreError::Format {
                offset: at,
                message: format!("implausible layer count {layers}"),
            });
        }
        let mut choices = Vec::with_capacity(layers);
        for _ in 0..layers {
            let at = r.offset;
            let mut b = [0u8; 1];
            r.take(&mut b, "kernel choice")?;
            let k = Kernel::from_size(b[0] as usize).ok_or_else(|| CoreError::Format {
                offset: at,
                message: format!("kernel size {} not in {{1,3,5}}", b[0]),
            })?;
            choices.push(k);
        }
        blocks.push(BlockArch::new(choices));
    }
    let arch = SubnetArch::from_blocks(blocks);

    let mut params = ParamStore::new();
    loop {
        let rec_start = r.offset;
        // Records run to EOF; peek one byte to distinguish end from truncation.
        let first = match r.maybe_u8()? {
            None => break,
            Some(b) => b,
        };
        let mut second = [0u8; 1];
        r.take(&mut second, "record name length")?;
        let name_len = u16::from_le_bytes([first, second[0]]) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.take(&mut name_bytes, "record name")?;
        let name = String::from_utf8(name_bytes).map_err(|_| CoreError::Format {
            offset: rec_start + 2,
            message: "parameter name is not utf-8".into(),
        })?;
        let mut rank = [0u8; 1];
        r.take(&mut rank, "record rank")?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        let mut numel: u64 = 1;
        for _ in 0..rank[0] {
            let at = r.offset;
            let d = r.u32("record dim")? as u64;
            numel = numel.checked_mul(d).ok_or_else(|| CoreError::Format {
                offset: at,
                message: "dimension product overflow".into(),
            })?;
            shape.push(d as usize);
        }
        if numel > (1 << 31) {
            return Err(CoreError::Format {
                offset: rec_start,
                message: format!("record {name:?} implausibly large ({numel} values)"),
            });
        }
        let mut data = vec![0f32; numel as usize];
        let mut buf = vec![0u8; numel as usize * 4];
        r.take(&mut buf, "record payload")?;
        for (i, chunk) in buf.chunks_exact(4).enumerate() {
            data[i] = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        }
        params.insert(&name, Tensor::from_vec(&shape, data)?)?;
    }
    Ok(Checkpoint { arch, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn sample_checkpoint() -> Checkpoint {
        let mut rng = Rng::seed_from(9);
        let mut params = ParamStore::new();
        params
            .insert("e0.l0.conv.w", Tensor::randn(&[4, 2, 3, 3], &mut rng))
            .unwrap();
        params
            .insert("e0.l0.conv.b", Tensor::randn(&[4], &mut rng))
            .unwrap();
        params
            .insert("head.w", Tensor::randn(&[1, 4, 3, 3], &mut rng))
            .unwrap();
        let arch = SubnetArch::from_blocks(vec![
            BlockArch::new(vec![Kernel::K3, Kernel::K1]),
            BlockArch::new(vec![Kernel::K5, Kernel::K3]),
        ]);
        Checkpoint { arch, params }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = std::env::temp_dir().join("dnas-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rt.dnas");
        let ckpt = sample_checkpoint();
        save(&ckpt, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.arch, ckpt.arch);
        assert_eq!(back.params.len(), ckpt.params.len());
        for (a, b) in ckpt.params.iter().zip(back.params.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.tensor.shape(), b.tensor.shape());
            let bits_a: Vec<u32> = a.tensor.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = b.tensor.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let dir = std::env::temp_dir().join("dnas-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.dnas");
        std::fs::write(&path, b"NOPE").unwrap();
        match load(&path) {
            Err(CoreError::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn truncated_payload_names_offset() {
        let dir = std::env::temp_dir().join("dnas-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("trunc.dnas");
        let ckpt = sample_checkpoint();
        save(&ckpt, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        match load(&path) {
            Err(CoreError::Format { offset, .. }) => assert!(offset > 0),
            other => panic!("expected format error, got {other:?}"),
        }
        std::fs::remove_file(&path).unwrap();
    }
}
