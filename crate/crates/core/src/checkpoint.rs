//! Named-parameter archive for a [`Network`].
//!
//! Layout (little-endian): magic `TGCK`, `u32` version, `u32` metadata length,
//! metadata JSON, `u32` entry count, then per entry a `u32` name length, the
//! UTF-8 name (`layer/role`) and one serialized [`Tensor`]. Entries are in
//! name order and nothing time-dependent is stored, so equal networks give
//! byte-identical archives.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::arch::{build, ArchId, Network, NetworkSpec};
use crate::error::{Error, Result};
use crate::tensor::{read_u32, Tensor};
use crate::SeededRng;

const MAGIC: &[u8; 4] = b"TGCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub arch: ArchId,
    pub widths: Vec<usize>,
    pub seed: u64,
    pub spec: NetworkSpec,
}

fn entries(net: &Network) -> BTreeMap<String, &Tensor> {
    let mut out = BTreeMap::new();
    for layer in &net.layers {
        for (role, t) in layer.params.params.iter().chain(&layer.params.state) {
            out.insert(format!("{}/{role}", layer.name), t);
        }
    }
    out
}

pub fn to_bytes(net: &Network, seed: u64) -> Result<Vec<u8>> {
    let meta = CheckpointMeta {
        arch: net.spec.id(),
        widths: net.spec.widths.clone(),
        seed,
        spec: net.spec.clone(),
    };
    let meta = serde_json::to_vec(&meta)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta);
    let entries = entries(net);
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        t.write_to(&mut buf)?;
    }
    Ok(buf)
}

fn read_exact(r: &mut &[u8], n: usize, what: &str) -> Result<Vec<u8>> {
    if r.len() < n {
        return Err(Error::Format(format!("checkpoint truncated in {what}")));
    }
    let mut v = vec![0; n];
    r.read_exact(&mut v)?;
    Ok(v)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Network, CheckpointMeta)> {
    let mut r = bytes;
    if read_exact(&mut r, 4, "magic")? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = read_u32(&mut r)? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(&read_exact(&mut r, meta_len, "metadata")?)?;
    if meta.arch != meta.spec.id() || meta.widths != meta.spec.widths {
        return Err(Error::Format("checkpoint metadata disagrees with its spec".into()));
    }
    let mut net = build(&meta.spec, &mut SeededRng::seed_from_u64(0))?;
    let mut expected: BTreeMap<String, Vec<usize>> =
        entries(&net).into_iter().map(|(k, t)| (k, t.shape().to_vec())).collect();
    let mut loaded = BTreeMap::new();
    for _ in 0..read_u32(&mut r)? {
        let len = read_u32(&mut r)? as usize;
        let name = String::from_utf8(read_exact(&mut r, len, "entry name")?)
            .map_err(|_| Error::Format("entry name is not UTF-8".into()))?;
        let t = Tensor::read_from(&mut r)?;
        match expected.remove(&name) {
            Some(shape) if shape == t.shape() => {}
            Some(shape) => {
                return Err(Error::Format(format!(
                    "`{name}` has shape {:?}, spec requires {shape:?}",
                    t.shape()
                )))
            }
            None => return Err(Error::Format(format!("unexpected entry `{name}`"))),
        }
        loaded.insert(name, t);
    }
    if let Some(name) = expected.keys().next() {
        return Err(Error::Format(format!("missing entry `{name}`")));
    }
    if !r.is_empty() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    for layer in &mut net.layers {
        for (role, t) in layer.params.params.iter_mut().chain(layer.params.state.iter_mut()) {
            *t = loaded.remove(&format!("{}/{role}", layer.name)).expect("checked above");
        }
    }
    Ok((net, meta))
}

pub fn save(net: &Network, seed: u64, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(net, seed)?;
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(|e| Error::file(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<(Network, CheckpointMeta)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::ArchitectureTemplate;

    fn net(seed: u64) -> Network {
        let spec = ArchitectureTemplate::compact(ArchId::Crnn).at_multiplier(0.2).unwrap();
        build(&spec, &mut SeededRng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn round_trip_restores_every_tensor() {
        let mut a = net(1);
        a.layers[0].params.state.get_mut("bn_running_mean").unwrap().data_mut()[0] = 0.25;
        let bytes = to_bytes(&a, 1).unwrap();
        let (b, meta) = from_bytes(&bytes).unwrap();
        assert_eq!(a, b);
        assert_eq!(meta.seed, 1);
        assert_eq!(meta.arch, ArchId::Crnn);
        assert_eq!(to_bytes(&b, 1).unwrap(), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let a = net(2);
        save(&a, 2, &path).unwrap();
        assert_eq!(load(&path).unwrap().0, a);
        assert!(matches!(load(dir.path().join("absent")), Err(Error::File { .. })));
    }

    #[test]
    fn corrupt_archives_are_rejected() {
        let bytes = to_bytes(&net(3), 3).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(Error::Format(_))));
        assert!(from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(from_bytes(&long), Err(Error::Format(_))));
    }

    #[test]
    fn mismatched_spec_is_rejected() {
        let a = net(4);
        let mut b = a.clone();
        b.layers[0].params.params.remove("bias");
        let bytes = to_bytes(&b, 4).unwrap();
        let err = from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("conv1/bias"), "{err}");
    }
}
