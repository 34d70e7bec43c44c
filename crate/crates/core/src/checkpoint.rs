//! Parameter checkpoints: a `manifest.tsv` plus one VEM1 block per tensor.

use std::path::Path;

use crate::autograd::Mat;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::vocab_store::{read_matrix, write_matrix};

pub const MANIFEST: &str = "manifest.tsv";

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub name: String,
    pub matrix: Mat,
    pub frozen: bool,
}

fn file_name(i: usize, name: &str) -> String {
    let clean: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '.' { c } else { '_' })
        .collect();
    format!("{i:04}_{clean}.vem")
}

/// Manifest columns: `name rows cols frozen file`.
pub fn save_blocks(dir: &Path, blocks: &[(String, &Mat, bool)]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for (i, (name, m, frozen)) in blocks.iter().enumerate() {
        let file = file_name(i, name);
        write_matrix(&dir.join(&file), m)?;
        manifest.push_str(&format!("{name}\t{}\t{}\t{}\t{file}\n", m.nrows(), m.ncols(), u8::from(*frozen)));
    }
    let path = dir.join(MANIFEST);
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

pub fn load_blocks(dir: &Path) -> Result<Vec<Block>> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split('\t').collect();
        let bad = |m: &str| Error::Parse {
            line: n + 1,
            message: m.to_string(),
        };
        if f.len() != 5 {
            return Err(bad("expected 5 tab-separated fields"));
        }
        let rows: usize = f[1].parse().map_err(|_| bad("bad row count"))?;
        let cols: usize = f[2].parse().map_err(|_| bad("bad column count"))?;
        let frozen = match f[3] {
            "0" => false,
            "1" => true,
            _ => return Err(bad("frozen flag must be 0 or 1")),
        };
        let matrix = read_matrix(&dir.join(f[4]))?;
        if matrix.dim() != (rows, cols) {
            return Err(Error::Format(format!("block {} has shape {:?}", f[0], matrix.dim())));
        }
        out.push(Block {
            name: f[0].to_string(),
            matrix,
            frozen,
        });
    }
    Ok(out)
}

pub fn save_store(dir: &Path, store: &ParamStore) -> Result<()> {
    let blocks: Vec<(String, &Mat, bool)> = store
        .entries()
        .iter()
        .map(|e| (e.name.clone(), &*e.value, e.frozen))
        .collect();
    save_blocks(dir, &blocks)
}

/// Restores every block into the parameter of the same name.
pub fn load_into_store(dir: &Path, store: &mut ParamStore) -> Result<()> {
    for b in load_blocks(dir)? {
        let id = store
            .find(&b.name)
            .ok_or_else(|| Error::Format(format!("unknown parameter {}", b.name)))?;
        if store.get(id).dim() != b.matrix.dim() {
            return Err(Error::Format(format!("shape mismatch for {}", b.name)));
        }
        store.set(id, b.matrix);
        store.set_frozen(id, b.frozen);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn blocks_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let a = array![[1.0, 2.5], [-0.5, 0.0]];
        let b = array![[4.0]];
        save_blocks(dir.path(), &[("x/a".into(), &a, false), ("b".into(), &b, true)]).unwrap();
        let back = load_blocks(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].name, "x/a");
        assert_eq!(back[0].matrix, a);
        assert!(back[1].frozen);
    }

    #[test]
    fn store_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParamStore::new();
        let id = s.add("p", array![[0.25, 8.0]]);
        s.set_frozen(id, true);
        save_store(dir.path(), &s).unwrap();
        let mut t = ParamStore::new();
        let id2 = t.add("p", Mat::zeros((1, 2)));
        load_into_store(dir.path(), &mut t).unwrap();
        assert_eq!(**t.get(id2), array![[0.25, 8.0]]);
        assert!(t.is_frozen(id2));
    }
}
