//! Checkpoint directories: `manifest.json` plus one little-endian `f64` blob.
//!
//! Tensors are stored once, in name order, back to back. Aliases are listed
//! in the manifest and restored as aliases.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::params::ParamStore;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";
pub const FORMAT: &str = "gbt-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: String,
    pub offset: usize,
    pub nbytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub byte_order: String,
    pub blob: String,
    pub blob_bytes: usize,
    pub tensors: Vec<TensorEntry>,
    /// Alias → canonical name.
    pub aliases: BTreeMap<String, String>,
}

/// Manifest and blob bytes of `store`.
pub fn encode(store: &ParamStore) -> (Manifest, Vec<u8>) {
    let mut blob = Vec::with_capacity(store.num_scalars() * 8);
    let mut tensors = Vec::with_capacity(store.tensor_count());
    for (name, t) in store.iter() {
        let offset = blob.len();
        for x in t.value.data() {
            blob.extend_from_slice(&x.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: [t.value.rows(), t.value.cols()],
            dtype: "f64".into(),
            offset,
            nbytes: blob.len() - offset,
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        byte_order: "little".into(),
        blob: BLOB_FILE.into(),
        blob_bytes: blob.len(),
        tensors,
        aliases: store.aliases().clone(),
    };
    (manifest, blob)
}

/// Rebuilds a store, checking every offset and size against the blob.
pub fn decode(manifest: &Manifest, blob: &[u8]) -> Result<ParamStore> {
    let bad = |m: String| Err(Error::CorruptManifest(m));
    if manifest.format != FORMAT || manifest.version != VERSION {
        return bad(format!("unsupported format {} v{}", manifest.format, manifest.version));
    }
    if manifest.byte_order != "little" {
        return bad(format!("unsupported byte order {}", manifest.byte_order));
    }
    if blob.len() != manifest.blob_bytes {
        return bad(format!("blob has {} bytes, manifest says {}", blob.len(), manifest.blob_bytes));
    }
    let mut store = ParamStore::new();
    let mut end = 0;
    for t in &manifest.tensors {
        if t.dtype != "f64" {
            return bad(format!("`{}` has dtype {}", t.name, t.dtype));
        }
        let [r, c] = t.shape;
        if r.checked_mul(c).and_then(|n| n.checked_mul(8)) != Some(t.nbytes) {
            return bad(format!("`{}` is {r}x{c} but spans {} bytes", t.name, t.nbytes));
        }
        if t.offset != end {
            return bad(format!("`{}` starts at byte {}, expected {end}", t.name, t.offset));
        }
        end += t.nbytes;
        if end > blob.len() {
            return bad(format!("`{}` runs past the end of the blob", t.name));
        }
        let data = blob[t.offset..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        if store.contains(&t.name) {
            return bad(format!("`{}` appears twice", t.name));
        }
        store
            .insert(t.name.clone(), Mat::new(r, c, data)?)
            .map_err(|e| Error::CorruptManifest(e.to_string()))?;
    }
    if end != blob.len() {
        return bad(format!("{} unclaimed bytes at the end of the blob", blob.len() - end));
    }
    for (alias, canonical) in &manifest.aliases {
        store
            .alias(alias.clone(), canonical)
            .map_err(|e| Error::CorruptManifest(format!("alias `{alias}`: {e}")))?;
    }
    Ok(store)
}

pub fn save_checkpoint(store: &ParamStore, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (manifest, blob) = encode(store);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Io(e.to_string()))?;
    fs::write(dir.join(BLOB_FILE), blob)?;
    fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<ParamStore> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::CorruptManifest(format!("line {}: {e}", e.line())))?;
    if manifest.blob.contains(['/', '\\']) || manifest.blob == ".." {
        return Err(Error::CorruptManifest(format!("blob name `{}` is not a plain file name", manifest.blob)));
    }
    let blob = fs::read(dir.join(&manifest.blob))?;
    decode(&manifest, &blob)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::preset;
    use crate::equivalence::scrambled_params;

    fn bit_identical(a: &ParamStore, b: &ParamStore) -> bool {
        a.aliases() == b.aliases()
            && a.tensor_count() == b.tensor_count()
            && a.iter().zip(b.iter()).all(|((na, ta), (nb, tb))| {
                na == nb
                    && ta.value.shape() == tb.value.shape()
                    && ta.value.data().iter().zip(tb.value.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    #[test]
    fn round_trip_is_bit_identical_and_keeps_aliases() {
        let spec = preset("lxmert").unwrap();
        let store = scrambled_params(&spec, 3);
        assert!(store.alias_count() > 0);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&store, dir.path()).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert!(bit_identical(&store, &back));
        assert_eq!(back.alias_count(), store.alias_count());
        let blob = fs::read(dir.path().join(BLOB_FILE)).unwrap();
        assert_eq!(blob.len(), store.num_scalars() * 8);
    }

    #[test]
    fn special_values_survive() {
        let mut s = ParamStore::new();
        s.insert("x", Mat::from_rows(&[[-0.0, f64::MIN_POSITIVE, f64::MAX, 1e-300]]).unwrap()).unwrap();
        let (m, blob) = encode(&s);
        let back = decode(&m, &blob).unwrap();
        assert!(bit_identical(&s, &back));
    }

    #[test]
    fn truncated_blob_is_corrupt() {
        let store = scrambled_params(&preset("uniter").unwrap(), 0);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&store, dir.path()).unwrap();
        let path = dir.path().join(BLOB_FILE);
        let blob = fs::read(&path).unwrap();
        fs::write(&path, &blob[..blob.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::CorruptManifest(_))));
    }

    #[test]
    fn inconsistent_manifests_are_corrupt() {
        let mut s = ParamStore::new();
        s.insert("a", Mat::filled(2, 3, 1.5)).unwrap();
        s.insert("b", Mat::filled(1, 3, 2.5)).unwrap();
        s.alias("c", "a").unwrap();
        let (m, blob) = encode(&s);
        let corrupt = |f: &dyn Fn(&mut Manifest)| {
            let mut m = m.clone();
            f(&mut m);
            matches!(decode(&m, &blob), Err(Error::CorruptManifest(_)))
        };
        assert!(corrupt(&|m| m.tensors[0].shape = [3, 3]));
        assert!(corrupt(&|m| m.tensors[1].offset = 8));
        assert!(corrupt(&|m| m.blob_bytes += 8));
        assert!(corrupt(&|m| m.tensors[0].dtype = "f32".into()));
        assert!(corrupt(&|m| {
            m.aliases.insert("d".into(), "zz".into());
        }));
        assert!(corrupt(&|m| m.version = 9));
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), "{ not json").unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::CorruptManifest(_))));
    }
}
