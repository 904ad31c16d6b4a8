//! Dataset directory format.
//!
//! A dataset directory holds `metadata.json` plus one `traj_{i:06}.bin`
//! record per trajectory. Record layout (little-endian):
//!
//! ```text
//! magic  "LWTR"           4 bytes
//! version u32             = 1
//! name_len u32, env_name  UTF-8
//! seed u64
//! t u32, p u32, a u32
//! observations            t * 224 * 224 * 3 bytes, u8 RGB row-major
//! proprio                 t * p little-endian f32
//! actions                 (t-1) * a little-endian f32
//! ```
//!
//! Images are stored raw so round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::prelude::*;

use crate::error::{Error, Result};

use super::{Dataset, DatasetMeta, Obs, Trajectory, IMG};

const MAGIC: &[u8; 4] = b"LWTR";
const VERSION: u32 = 1;

pub fn record_name(i: usize) -> String {
    format!("traj_{i:06}.bin")
}

/// Write a whole dataset directory. Re-reading round-trips bit-exactly.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    for (i, tr) in dataset.trajectories.iter().enumerate() {
        tr.validate()
            .map_err(|e| Error::Validation(format!("trajectory {i}: {e}")))?;
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta_path = dir.join("metadata.json");
    let meta = serde_json::to_vec_pretty(&dataset.metadata).expect("meta serializes");
    std::fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))?;
    for (i, tr) in dataset.trajectories.iter().enumerate() {
        write_record(&dir.join(record_name(i)), tr)?;
    }
    Ok(())
}

pub fn write_record(path: &Path, tr: &Trajectory) -> Result<()> {
    tr.validate()?;
    let mut f = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    let w = |f: &mut BufWriter<File>, b: &[u8]| f.write_all(b).map_err(|e| Error::io(path, e));
    w(&mut f, MAGIC)?;
    w(&mut f, &VERSION.to_le_bytes())?;
    w(&mut f, &(tr.env_name.len() as u32).to_le_bytes())?;
    w(&mut f, tr.env_name.as_bytes())?;
    w(&mut f, &tr.seed.to_le_bytes())?;
    w(&mut f, &(tr.len() as u32).to_le_bytes())?;
    w(&mut f, &(tr.proprio_dim() as u32).to_le_bytes())?;
    w(&mut f, &(tr.action_dim() as u32).to_le_bytes())?;
    for obs in &tr.observations {
        w(&mut f, obs.as_slice().expect("contiguous obs"))?;
    }
    for v in tr.proprio.iter() {
        w(&mut f, &v.to_le_bytes())?;
    }
    for v in tr.actions.iter() {
        w(&mut f, &v.to_le_bytes())?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn read_record(path: &Path) -> Result<Trajectory> {
    let mut f = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let corrupt = |reason: &str| Error::Corrupt { path: path.to_path_buf(), reason: reason.into() };
    let mut exact = |n: usize| -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        f.read_exact(&mut buf)
            .map_err(|_| Error::Corrupt { path: path.to_path_buf(), reason: "truncated".into() })?;
        Ok(buf)
    };
    if exact(4)? != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(exact(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    let name_len = u32::from_le_bytes(exact(4)?.try_into().unwrap()) as usize;
    if name_len > 4096 {
        return Err(corrupt("absurd env name length"));
    }
    let env_name = String::from_utf8(exact(name_len)?).map_err(|_| corrupt("bad env name"))?;
    let seed = u64::from_le_bytes(exact(8)?.try_into().unwrap());
    let t = u32::from_le_bytes(exact(4)?.try_into().unwrap()) as usize;
    let p = u32::from_le_bytes(exact(4)?.try_into().unwrap()) as usize;
    let a = u32::from_le_bytes(exact(4)?.try_into().unwrap()) as usize;
    if t < 2 || t > 1_000_000 {
        return Err(corrupt("bad frame count"));
    }
    let mut observations: Vec<Obs> = Vec::with_capacity(t);
    for _ in 0..t {
        let bytes = exact(IMG * IMG * 3)?;
        observations.push(Array3::from_shape_vec((IMG, IMG, 3), bytes).unwrap());
    }
    let read_f32s = |bytes: Vec<u8>| -> Vec<f32> {
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    };
    let proprio = Array2::from_shape_vec((t, p), read_f32s(exact(t * p * 4)?)).unwrap();
    let actions = Array2::from_shape_vec((t - 1, a), read_f32s(exact((t - 1) * a * 4)?)).unwrap();
    let tr = Trajectory { observations, proprio, actions, env_name, seed };
    tr.validate()?;
    Ok(tr)
}

/// Lazy dataset directory handle: metadata up front, records on demand.
pub struct DatasetReader {
    dir: PathBuf,
    pub meta: DatasetMeta,
}

impl DatasetReader {
    pub fn open(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("metadata.json");
        if !meta_path.exists() {
            return Err(Error::Corrupt {
                path: dir.to_path_buf(),
                reason: "no metadata.json (not a dataset directory)".into(),
            });
        }
        let raw = std::fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: DatasetMeta = serde_json::from_slice(&raw).map_err(|e| Error::Corrupt {
            path: meta_path.clone(),
            reason: format!("bad metadata: {e}"),
        })?;
        Ok(DatasetReader { dir: dir.to_path_buf(), meta })
    }

    /// Read record `i` and check it against the metadata.
    pub fn read(&self, i: usize) -> Result<Trajectory> {
        let path = self.dir.join(record_name(i));
        let tr = read_record(&path)?;
        if tr.env_name != self.meta.env_name
            || tr.action_dim() != self.meta.action_dim
            || tr.proprio_dim() != self.meta.proprio_dim
        {
            return Err(Error::Mismatch(format!(
                "{}: record (env={}, A={}, P={}) does not match metadata (env={}, A={}, P={})",
                path.display(),
                tr.env_name,
                tr.action_dim(),
                tr.proprio_dim(),
                self.meta.env_name,
                self.meta.action_dim,
                self.meta.proprio_dim
            )));
        }
        Ok(tr)
    }
}

/// Read a full dataset directory into memory.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let reader = DatasetReader::open(dir)?;
    let mut trajectories = Vec::with_capacity(reader.meta.n_traj);
    for i in 0..reader.meta.n_traj {
        trajectories.push(reader.read(i)?);
    }
    let ds = Dataset::new(trajectories)?;
    if ds.metadata != reader.meta {
        return Err(Error::Mismatch(format!(
            "metadata.json disagrees with records: {:?} vs {:?}",
            reader.meta, ds.metadata
        )));
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::super::tests::tiny_traj;
    use super::*;

    #[test]
    fn round_trip_identity() {
        let ds = Dataset::new(vec![
            tiny_traj("wall", 5, 2, 0, 0),
            tiny_traj("wall", 5, 2, 0, 1),
        ])
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn empty_dir_is_no_metadata_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        assert!(format!("{err}").contains("metadata"));
    }

    #[test]
    fn metadata_record_mismatch_detected() {
        let ds = Dataset::new(vec![tiny_traj("wall", 5, 2, 0, 0)]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        // overwrite the record with an A=3 one
        let other = tiny_traj("wall", 5, 3, 0, 0);
        write_record(&dir.path().join(record_name(0)), &other).unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Mismatch(_)), "{err}");
    }

    #[test]
    fn corrupt_record_names_file() {
        let ds = Dataset::new(vec![tiny_traj("wall", 4, 2, 1, 0)]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let rec = dir.path().join(record_name(0));
        let mut bytes = std::fs::read(&rec).unwrap();
        bytes.truncate(bytes.len() / 2);
        std::fs::write(&rec, bytes).unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        assert!(format!("{err}").contains("traj_000000.bin"), "{err}");
    }
}
