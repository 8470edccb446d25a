//! Binary checkpoint format, bit-exact round trip.
//!
//! Layout: magic `PBNN`, format version (u16 LE), a length-prefixed UTF-8
//! JSON metadata document (arch spec, placement, seed, training step), then
//! named tensors, each as name length + name + dtype tag + rank + dims
//! (all u32 LE) + raw little-endian f32 payload.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ArchSpec, Model, PlacementConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"PBNN";
const FORMAT_VERSION: u16 = 1;
const DTYPE_F32: u8 = 1;

#[derive(serde::Serialize, serde::Deserialize)]
struct Metadata {
    arch: ArchSpec,
    placement: PlacementConfig,
    seed: u64,
    step: u64,
}

fn ck<T>(r: std::io::Result<T>, what: &str) -> Result<T> {
    r.map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Checkpoint(format!("truncated while reading {what}"))
        } else {
            Error::Checkpoint(format!("reading {what}: {e}"))
        }
    })
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    ck(r.read_exact(&mut buf), what)?;
    Ok(u32::from_le_bytes(buf))
}

impl Model<f32> {
    /// Serialize every persistent tensor. The written byte stream is a pure
    /// function of the model state.
    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;

        let meta = Metadata {
            arch: self.arch.clone(),
            placement: self.placement.clone(),
            seed: self.seed,
            step: self.step,
        };
        let meta_bytes = serde_json::to_vec(&meta)
            .map_err(|e| Error::Checkpoint(format!("encoding metadata: {e}")))?;
        w.write_all(&(meta_bytes.len() as u32).to_le_bytes())?;
        w.write_all(&meta_bytes)?;

        let mut io_err: Option<std::io::Error> = None;
        self.for_each_tensor(|name, tensor| {
            if io_err.is_some() {
                return;
            }
            let mut write = || -> std::io::Result<()> {
                let name_bytes = name.as_bytes();
                w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
                w.write_all(name_bytes)?;
                w.write_all(&[DTYPE_F32])?;
                w.write_all(&(tensor.rank() as u32).to_le_bytes())?;
                for &d in tensor.shape() {
                    w.write_all(&(d as u32).to_le_bytes())?;
                }
                for &v in tensor.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
                Ok(())
            };
            if let Err(e) = write() {
                io_err = Some(e);
            }
        });
        if let Some(e) = io_err {
            return Err(e.into());
        }
        w.flush()?;
        Ok(())
    }

    /// Load a checkpoint. Fails on magic/version mismatch, truncation, or
    /// any disagreement between the stored tensors and the embedded arch;
    /// never yields a partially filled model.
    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model<f32>> {
        let mut r = BufReader::new(File::open(path)?);

        let mut magic = [0u8; 4];
        ck(r.read_exact(&mut magic), "magic")?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic {magic:?}, expected {MAGIC:?}"
            )));
        }
        let mut ver = [0u8; 2];
        ck(r.read_exact(&mut ver), "format version")?;
        let version = u16::from_le_bytes(ver);
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}, expected {FORMAT_VERSION}"
            )));
        }

        let meta_len = read_u32(&mut r, "metadata length")? as usize;
        if meta_len > 1 << 20 {
            return Err(Error::Checkpoint(format!("metadata length {meta_len} implausible")));
        }
        let mut meta_bytes = vec![0u8; meta_len];
        ck(r.read_exact(&mut meta_bytes), "metadata")?;
        let meta: Metadata = serde_json::from_slice(&meta_bytes)
            .map_err(|e| Error::Checkpoint(format!("decoding metadata: {e}")))?;

        // Read every tensor record up to EOF.
        let mut tensors: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
        loop {
            let mut len_buf = [0u8; 4];
            match r.read_exact(&mut len_buf) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
                Err(e) => return Err(e.into()),
            }
            let name_len = u32::from_le_bytes(len_buf) as usize;
            if name_len > 4096 {
                return Err(Error::Checkpoint(format!("tensor name length {name_len} implausible")));
            }
            let mut name_bytes = vec![0u8; name_len];
            ck(r.read_exact(&mut name_bytes), "tensor name")?;
            let name = String::from_utf8(name_bytes)
                .map_err(|e| Error::Checkpoint(format!("tensor name not UTF-8: {e}")))?;
            let mut dtype = [0u8; 1];
            ck(r.read_exact(&mut dtype), "dtype tag")?;
            if dtype[0] != DTYPE_F32 {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: unsupported dtype tag {}",
                    dtype[0]
                )));
            }
            let rank = read_u32(&mut r, "rank")? as usize;
            if rank > 8 {
                return Err(Error::Checkpoint(format!("tensor {name}: rank {rank} implausible")));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(read_u32(&mut r, "dims")? as usize);
            }
            let count: usize = dims.iter().product();
            let mut payload = vec![0u8; count * 4];
            ck(r.read_exact(&mut payload), &format!("tensor {name} payload"))?;
            let data: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let tensor = Tensor::new(dims, data)
                .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
            if tensors.insert(name.clone(), tensor).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
            }
        }

        // Build the skeleton from the embedded arch/placement, then fill it.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Model::build(meta.arch, meta.placement, &mut rng)?;
        model.seed = meta.seed;
        model.step = meta.step;

        let mut fill_err: Option<Error> = None;
        model.for_each_tensor_mut(|name, slot| {
            if fill_err.is_some() {
                return;
            }
            match tensors.remove(name) {
                Some(t) if t.shape() == slot.shape() => *slot = t,
                Some(t) => {
                    fill_err = Some(Error::Checkpoint(format!(
                        "tensor {name}: shape {:?} disagrees with arch shape {:?}",
                        t.shape(),
                        slot.shape()
                    )));
                }
                None => {
                    fill_err = Some(Error::Checkpoint(format!("missing tensor {name}")));
                }
            }
        });
        if let Some(e) = fill_err {
            return Err(e);
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Checkpoint(format!(
                "unexpected tensor {extra} not part of the embedded arch"
            )));
        }
        Ok(model)
    }
}
