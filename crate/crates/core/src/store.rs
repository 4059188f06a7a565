//! Binary sample store written by `prepare` and read by training and evaluation.
//!
//! Layout (little endian):
//!
//! ```text
//! magic     8 bytes  "SRSUPMSS"
//! version   u32
//! meta_len  u32      followed by meta_len bytes of JSON (config, report, catalog, provenance)
//! 3 × split (train, val, test):
//!   count   u64
//!   per sample: user u32, target u32, level u32, history_len u32, history_len × u32
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::Provenance;
use crate::corpus::{Catalog, DatasetReport, Sample, Splits};
use crate::pipeline::{PrepareConfig, Prepared};

pub const STORE_MAGIC: &[u8; 8] = b"SRSUPMSS";
pub const STORE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("not a sample store (bad magic)")]
    BadMagic,
    #[error("unsupported sample store version {0}")]
    Version(u32),
    #[error("corrupt sample store: {0}")]
    Corrupt(String),
    #[error("value {0} does not fit the store's 32-bit fields")]
    Overflow(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    prepare: PrepareConfig,
    report: DatasetReport,
    catalog: Catalog,
    excluded_users: usize,
    provenance: Provenance,
}

/// Everything training and evaluation need from a prepared dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleStore {
    pub prepare: PrepareConfig,
    pub report: DatasetReport,
    /// Catalog of the filtered dataset (labels before any dropout).
    pub catalog: Catalog,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    pub excluded_users: usize,
    pub provenance: Provenance,
}

impl SampleStore {
    pub fn from_prepared(p: &Prepared, prepare: &PrepareConfig, provenance: Provenance) -> Self {
        Self {
            prepare: prepare.clone(),
            report: p.report.clone(),
            catalog: p.dataset.catalog.clone(),
            train: p.splits.train.clone(),
            val: p.splits.val.clone(),
            test: p.splits.test.clone(),
            excluded_users: p.splits.excluded_users,
            provenance,
        }
    }

    pub fn num_items(&self) -> usize {
        self.catalog.num_items()
    }

    pub fn splits(&self) -> Splits {
        Splits {
            train: self.train.clone(),
            val: self.val.clone(),
            test: self.test.clone(),
            excluded_users: self.excluded_users,
        }
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<(), StoreError> {
        w.write_all(STORE_MAGIC)?;
        w.write_all(&STORE_VERSION.to_le_bytes())?;
        let meta = serde_json::to_vec(&Meta {
            prepare: self.prepare.clone(),
            report: self.report.clone(),
            catalog: self.catalog.clone(),
            excluded_users: self.excluded_users,
            provenance: self.provenance.clone(),
        })
        .map_err(|e| StoreError::Corrupt(e.to_string()))?;
        w.write_all(&u32_of(meta.len())?.to_le_bytes())?;
        w.write_all(&meta)?;
        for split in [&self.train, &self.val, &self.test] {
            w.write_all(&(split.len() as u64).to_le_bytes())?;
            for s in split {
                for v in [s.user, s.target, s.level, s.history.len()] {
                    w.write_all(&u32_of(v)?.to_le_bytes())?;
                }
                for &i in &s.history {
                    w.write_all(&u32_of(i)?.to_le_bytes())?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self, StoreError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != STORE_MAGIC {
            return Err(StoreError::BadMagic);
        }
        let version = read_u32(&mut r)?;
        if version != STORE_VERSION {
            return Err(StoreError::Version(version));
        }
        let meta_len = read_u32(&mut r)? as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta)?;
        let meta: Meta = serde_json::from_slice(&meta).map_err(|e| StoreError::Corrupt(e.to_string()))?;
        let n_items = meta.catalog.num_items();
        let mut splits: [Vec<Sample>; 3] = Default::default();
        for split in splits.iter_mut() {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            let count = u64::from_le_bytes(b) as usize;
            split.reserve(count.min(1 << 20));
            for _ in 0..count {
                let user = read_u32(&mut r)? as usize;
                let target = read_u32(&mut r)? as usize;
                let level = read_u32(&mut r)? as usize;
                let len = read_u32(&mut r)? as usize;
                let history = (0..len)
                    .map(|_| read_u32(&mut r).map(|v| v as usize))
                    .collect::<Result<Vec<_>, _>>()?;
                if target == 0 || target > n_items || history.iter().any(|&i| i == 0 || i > n_items) {
                    return Err(StoreError::Corrupt(format!("item index out of range for user {user}")));
                }
                split.push(Sample {
                    user,
                    history,
                    target,
                    level,
                });
            }
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(StoreError::Corrupt("trailing bytes".into()));
        }
        let [train, val, test] = splits;
        Ok(Self {
            prepare: meta.prepare,
            report: meta.report,
            catalog: meta.catalog,
            train,
            val,
            test,
            excluded_users: meta.excluded_users,
            provenance: meta.provenance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        self.write(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self, StoreError> {
        Self::read(BufReader::new(File::open(path)?))
    }
}

fn u32_of(v: usize) -> Result<u32, StoreError> {
    u32::try_from(v).map_err(|_| StoreError::Overflow(v))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, StoreError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
