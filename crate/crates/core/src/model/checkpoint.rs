use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autodiff::{ParamSet, Tensor};

use super::{LanguageModel, ModelConfig, ModelError};

const MAGIC: &[u8; 8] = b"ULLMCKPT";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 4;
const MAX_ID_LEN: usize = 1 << 12;
const MAX_NDIM: usize = 8;

pub fn write_checkpoint<W: Write>(model: &LanguageModel<f32>, mut w: W) -> Result<(), ModelError> {
    let c = model.config();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[DTYPE_F32])?;
    for v in [
        c.vocab_size,
        c.context_length,
        c.embed_dim,
        c.n_layers,
        c.n_heads,
        c.mlp_hidden,
    ] {
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    w.write_all(&c.seed.to_le_bytes())?;
    w.write_all(&c.init_std.to_le_bytes())?;
    w.write_all(&(model.params().len() as u64).to_le_bytes())?;
    for (id, t) in model.params().iter() {
        w.write_all(&(id.len() as u32).to_le_bytes())?;
        w.write_all(id.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 4);
        for v in t.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N], ModelError> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => ModelError::Checkpoint("truncated file".into()),
        _ => ModelError::Io(e),
    })?;
    Ok(b)
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, ModelError> {
    Ok(u64::from_le_bytes(read_array(r)?))
}

fn read_usize<R: Read>(r: &mut R) -> Result<usize, ModelError> {
    usize::try_from(read_u64(r)?).map_err(|_| ModelError::Checkpoint("size overflow".into()))
}

fn read_u32<R: Read>(r: &mut R) -> Result<usize, ModelError> {
    Ok(u32::from_le_bytes(read_array(r)?) as usize)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<LanguageModel<f32>, ModelError> {
    if &read_array::<8, _>(&mut r)? != MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
    }
    let [dtype] = read_array::<1, _>(&mut r)?;
    if dtype != DTYPE_F32 {
        return Err(ModelError::Checkpoint(format!("unsupported dtype {dtype}")));
    }
    let config = ModelConfig {
        vocab_size: read_usize(&mut r)?,
        context_length: read_usize(&mut r)?,
        embed_dim: read_usize(&mut r)?,
        n_layers: read_usize(&mut r)?,
        n_heads: read_usize(&mut r)?,
        mlp_hidden: read_usize(&mut r)?,
        seed: read_u64(&mut r)?,
        init_std: f64::from_le_bytes(read_array(&mut r)?),
    };
    config.validate()?;
    let count = read_usize(&mut r)?;
    if count != config.module_count() {
        return Err(ModelError::Checkpoint(format!(
            "expected {} modules, found {count}",
            config.module_count()
        )));
    }
    let mut params = ParamSet::new();
    for _ in 0..count {
        let id_len = read_u32(&mut r)?;
        if id_len > MAX_ID_LEN {
            return Err(ModelError::Checkpoint("module id too long".into()));
        }
        let mut id = vec![0u8; id_len];
        r.read_exact(&mut id)
            .map_err(|_| ModelError::Checkpoint("truncated file".into()))?;
        let id = String::from_utf8(id)
            .map_err(|_| ModelError::Checkpoint("module id is not UTF-8".into()))?;
        let ndim = read_u32(&mut r)?;
        if ndim == 0 || ndim > MAX_NDIM {
            return Err(ModelError::Checkpoint(format!("module {id:?} has {ndim} dims")));
        }
        let shape = (0..ndim).map(|_| read_usize(&mut r)).collect::<Result<Vec<_>, _>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n <= 1 << 30)
            .ok_or_else(|| ModelError::Checkpoint(format!("module {id:?} is too large")))?;
        let mut raw = vec![0u8; numel * 4];
        r.read_exact(&mut raw)
            .map_err(|_| ModelError::Checkpoint("truncated file".into()))?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params
            .insert(id, Tensor::new(shape, values)?)
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(ModelError::Checkpoint("trailing bytes".into()));
    }
    LanguageModel::from_params(config, params)
}

pub fn save_checkpoint(model: &LanguageModel<f32>, path: &Path) -> Result<(), ModelError> {
    write_checkpoint(model, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: &Path) -> Result<LanguageModel<f32>, ModelError> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
