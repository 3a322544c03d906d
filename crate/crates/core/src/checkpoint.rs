//! Checkpoint directories.
//!
//! ```text
//! <dir>/manifest.tsv     name  file  dims  kind   (one row per tensor)
//! <dir>/tensors/*.mptd   one tensor dump per row
//! <dir>/state.txt        step and optimizer counter
//! <dir>/config.txt       the run configuration
//! ```
//!
//! Parameters appear under their store names with their [`ParamKind`];
//! optimizer moments appear as `adam.m.<name>` / `adam.v.<name>` with kind
//! `moment`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::param::{ParamKind, ParamStore};
use crate::tensor::{DType, Tensor};

pub const MANIFEST: &str = "manifest.tsv";
const MOMENT: &str = "moment";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub name: String,
    pub file: String,
    pub dims: Vec<usize>,
    pub kind: String,
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRow>> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let cols: Vec<&str> = line.split('\t').collect();
        let [name, file, dims, kind] = cols[..] else {
            return Err(Error::Format(format!("{MANIFEST} line {}: expected 4 columns", n + 1)));
        };
        let dims = if dims.is_empty() {
            Vec::new()
        } else {
            dims.split('x')
                .map(|d| d.parse().map_err(|_| Error::Format(format!("{MANIFEST} line {}: bad dims {dims:?}", n + 1))))
                .collect::<Result<_>>()?
        };
        rows.push(ManifestRow { name: name.into(), file: file.into(), dims, kind: kind.into() });
    }
    Ok(rows)
}

fn dims_text(d: &[usize]) -> String {
    d.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("x")
}

/// Writes every parameter of `store` (and the optimizer moments, if given).
pub fn save(
    dir: &Path,
    store: &ParamStore,
    adam: Option<&Adam>,
    step: usize,
    config: &RunConfig,
    dtype: DType,
) -> Result<()> {
    fs::create_dir_all(dir.join("tensors"))?;
    let mut entries: Vec<(String, &Tensor, String)> =
        store.iter().map(|(_, p)| (p.name.clone(), &p.value, p.kind.as_str().to_string())).collect();
    if let Some(a) = adam {
        for (i, &id) in a.ids.iter().enumerate() {
            let name = &store.get(id).name;
            entries.push((format!("adam.m.{name}"), &a.m[i], MOMENT.into()));
            entries.push((format!("adam.v.{name}"), &a.v[i], MOMENT.into()));
        }
    }
    let mut manifest = String::from("name\tfile\tdims\tkind\n");
    for (i, (name, t, kind)) in entries.iter().enumerate() {
        let file = format!("tensors/{i:05}.mptd");
        let mut w = BufWriter::new(File::create(dir.join(&file))?);
        t.write_dump(&mut w, dtype)?;
        w.flush()?;
        manifest.push_str(&format!("{name}\t{file}\t{}\t{kind}\n", dims_text(t.dims())));
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    let t = adam.map_or(0, |a| a.t);
    fs::write(dir.join("state.txt"), format!("step = {step}\nadam_t = {t}\n"))?;
    fs::write(dir.join("config.txt"), config.to_text())?;
    Ok(())
}

fn read_tensor(dir: &Path, row: &ManifestRow) -> Result<Tensor> {
    let (t, _) = Tensor::read_dump(&mut BufReader::new(File::open(dir.join(&row.file))?))?;
    if t.dims() != row.dims.as_slice() {
        return Err(Error::Format(format!(
            "{}: dump dims {:?} disagree with manifest {:?}",
            row.name,
            t.dims(),
            row.dims
        )));
    }
    Ok(t)
}

/// Copies every manifest parameter that exists in `store` into it. Names
/// missing from `store` are ignored; a dims or kind mismatch is an error.
/// Returns how many parameters were loaded.
pub fn load_params(dir: &Path, store: &mut ParamStore) -> Result<usize> {
    let mut loaded = 0;
    for row in read_manifest(dir)? {
        if row.kind == MOMENT {
            continue;
        }
        let Some(id) = store.find(&row.name) else { continue };
        let kind = ParamKind::parse(&row.kind)?;
        if store.kind(id) != kind {
            return Err(Error::Format(format!(
                "{}: stored as {} but model has {}",
                row.name,
                row.kind,
                store.kind(id).as_str()
            )));
        }
        store.set_value(id, read_tensor(dir, &row)?)?;
        loaded += 1;
    }
    Ok(loaded)
}

/// Restores parameters and optimizer state; returns the saved step.
pub fn resume(dir: &Path, store: &mut ParamStore, adam: &mut Adam) -> Result<usize> {
    load_params(dir, store)?;
    let rows = read_manifest(dir)?;
    for (i, &id) in adam.ids.iter().enumerate() {
        let name = store.get(id).name.clone();
        for (prefix, slot) in [("adam.m.", &mut adam.m[i]), ("adam.v.", &mut adam.v[i])] {
            let key = format!("{prefix}{name}");
            let row = rows
                .iter()
                .find(|r| r.name == key)
                .ok_or_else(|| Error::Format(format!("checkpoint has no optimizer state {key}")))?;
            *slot = read_tensor(dir, row)?;
        }
    }
    let state = fs::read_to_string(dir.join("state.txt"))?;
    let mut step = None;
    for line in state.lines() {
        if let Some((k, v)) = line.split_once('=') {
            let v: u64 = v.trim().parse().map_err(|_| Error::Format(format!("state.txt: bad value in {line:?}")))?;
            match k.trim() {
                "step" => step = Some(v as usize),
                "adam_t" => adam.t = v,
                _ => {}
            }
        }
    }
    step.ok_or_else(|| Error::Format("state.txt has no step".into()))
}

pub fn read_config(dir: &Path) -> Result<RunConfig> {
    RunConfig::load(&dir.join("config.txt"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::AdamConfig;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a", Tensor::new(vec![2, 3], vec![0.1, -2.0, 3.5, 1e-9, 5.0, 6.0]).unwrap(), ParamKind::Trainable);
        s.add("b", Tensor::vector(&[7.0]).unwrap(), ParamKind::Frozen);
        s.add("c", Tensor::vector(&[1.0, 2.0]).unwrap(), ParamKind::Buffer);
        s
    }

    #[test]
    fn roundtrip_is_bitwise_at_f64() {
        let dir = tempfile::tempdir().unwrap();
        let src = store();
        let a = src.find("a").unwrap();
        let mut adam = Adam::new(&src, vec![a], AdamConfig::default()).unwrap();
        adam.m[0].data_mut()[1] = 0.25;
        adam.v[0].data_mut()[2] = 1.0 / 3.0;
        adam.t = 9;
        save(dir.path(), &src, Some(&adam), 12, &RunConfig::default(), DType::F64).unwrap();

        let rows = read_manifest(dir.path()).unwrap();
        assert_eq!(rows.len(), 5);
        assert_eq!(
            rows[0],
            ManifestRow {
                name: "a".into(),
                file: "tensors/00000.mptd".into(),
                dims: vec![2, 3],
                kind: "trainable".into()
            }
        );

        let mut dst = store();
        for id in dst.ids().collect::<Vec<_>>() {
            dst.value_mut(id).data_mut().fill(0.0);
        }
        let mut fresh = Adam::new(&dst, vec![a], AdamConfig::default()).unwrap();
        assert_eq!(resume(dir.path(), &mut dst, &mut fresh).unwrap(), 12);
        for (id, p) in src.iter() {
            assert_eq!(dst.value(id), &p.value);
        }
        assert_eq!(fresh.m, adam.m);
        assert_eq!(fresh.v, adam.v);
        assert_eq!(fresh.t, 9);
        assert_eq!(read_config(dir.path()).unwrap(), RunConfig::default());
    }

    #[test]
    fn kind_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &store(), None, 0, &RunConfig::default(), DType::F32).unwrap();
        let mut other = ParamStore::new();
        other.add("b", Tensor::vector(&[0.0]).unwrap(), ParamKind::Trainable);
        assert!(load_params(dir.path(), &mut other).is_err());
        let mut partial = ParamStore::new();
        partial.add("c", Tensor::vector(&[0.0, 0.0]).unwrap(), ParamKind::Buffer);
        assert_eq!(load_params(dir.path(), &mut partial).unwrap(), 1);
        assert_eq!(partial.value(partial.find("c").unwrap()).data(), &[1.0, 2.0]);
    }
}
