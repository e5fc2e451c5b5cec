//! Model checkpoints: magic "MODBAL1", version, model config header,
//! then every parameter (path, group, shape, float64 values), closed by
//! a SHA-256 checksum.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::{ModalityId, ModelConfig, MultiModalModel, ParamGroup};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MODBAL1\0";
pub const CHECKPOINT_VERSION: u32 = 1;

fn group_tag(g: ParamGroup) -> u8 {
    match g {
        ParamGroup::Modality(m) => m.index() as u8,
        ParamGroup::Shared => 4,
    }
}

fn group_from_tag(tag: u8, path: &str, file: &str) -> Result<ParamGroup> {
    match tag {
        0..=3 => Ok(ParamGroup::Modality(ModalityId::from_index(tag as usize))),
        4 => Ok(ParamGroup::Shared),
        _ => Err(Error::MalformedFile {
            path: file.into(),
            detail: format!("bad group tag {tag} for `{path}`"),
        }),
    }
}

pub fn save(model: &MultiModalModel, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let header = serde_json::to_vec(model.config())?;
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    let store = model.params();
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for id in store.ids() {
        let p = store.path(id).as_bytes();
        buf.extend_from_slice(&(p.len() as u16).to_le_bytes());
        buf.extend_from_slice(p);
        buf.push(group_tag(store.group(id)));
        let value = store.value(id);
        buf.push(value.shape().len() as u8);
        for &d in value.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<MultiModalModel> {
    let pstr = path.display().to_string();
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < CHECKPOINT_MAGIC.len() + 8 + 32 {
        return Err(Error::MalformedFile { path: pstr, detail: "too short".into() });
    }
    if &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic { path: pstr, expected: "MODBAL1" });
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::ChecksumMismatch { path: pstr });
    }
    let mut pos = CHECKPOINT_MAGIC.len();
    let version = u32::from_le_bytes(body[pos..pos + 4].try_into().unwrap());
    pos += 4;
    if version > CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            path: pstr,
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let hlen = u32::from_le_bytes(body[pos..pos + 4].try_into().unwrap()) as usize;
    pos += 4;
    let config: ModelConfig = serde_json::from_slice(&body[pos..pos + hlen])?;
    pos += hlen;
    let count = u32::from_le_bytes(body[pos..pos + 4].try_into().unwrap()) as usize;
    pos += 4;

    // Rebuild the skeleton from the config (parameter layout is
    // deterministic), then overwrite every value from the file.
    let mut model = MultiModalModel::new(config, 0);
    if model.params().len() != count {
        return Err(Error::MalformedFile {
            path: pstr,
            detail: format!(
                "parameter count {} does not match config layout {}",
                count,
                model.params().len()
            ),
        });
    }
    for id in model.params().specs().iter().map(|(id, _)| *id) {
        let plen = u16::from_le_bytes(body[pos..pos + 2].try_into().unwrap()) as usize;
        pos += 2;
        let p = std::str::from_utf8(&body[pos..pos + plen])
            .map_err(|_| Error::MalformedFile { path: pstr.clone(), detail: "bad path utf8".into() })?
            .to_string();
        pos += plen;
        let group = group_from_tag(body[pos], &p, &pstr)?;
        pos += 1;
        let rank = body[pos] as usize;
        pos += 1;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(body[pos..pos + 4].try_into().unwrap()) as usize);
            pos += 4;
        }
        let n: usize = shape.iter().product();
        if pos + n * 8 > body.len() {
            return Err(Error::MalformedFile { path: pstr, detail: format!("values of `{p}`") });
        }
        let data: Vec<f64> = body[pos..pos + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        pos += n * 8;
        let store = model.params();
        if store.path(id) != p || store.group(id) != group || store.value(id).shape() != &shape[..] {
            return Err(Error::MalformedFile {
                path: pstr,
                detail: format!("parameter `{p}` does not match the config layout"),
            });
        }
        model.params_mut().set_data(id, &data);
    }
    if pos != body.len() {
        return Err(Error::MalformedFile { path: pstr, detail: "trailing bytes".into() });
    }
    Ok(model)
}
