//! On-disk teacher logits cache.
//!
//! Little-endian layout:
//!
//! ```text
//! magic   4 bytes  "RLGC"
//! version u32
//! num_classes u32
//! num_teachers u32
//! teacher ids: per teacher, u32 length + utf-8 bytes
//! num_records u64
//! index: num_records x { sample_id u64, epoch u32, offset u64 }
//! records: { sample_id u64, epoch u32, desc_len u32, descriptor bytes,
//!            num_teachers x num_classes f32 }
//! ```
//!
//! One record per (sample, epoch); offsets are absolute. The index lives in
//! the header so readers can seek records independently.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::audio::augment::{AugmentDescriptor, DESCRIPTOR_BYTES};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"RLGC";
const VERSION: u32 = 1;
const INDEX_ENTRY_BYTES: u64 = 8 + 4 + 8;

#[derive(Debug, Clone, PartialEq)]
pub struct CacheRecord {
    pub sample_id: u64,
    pub epoch: u32,
    pub descriptor: AugmentDescriptor,
    /// `num_teachers * num_classes` values, teacher-major.
    pub logits: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct LogitsCache {
    pub num_classes: u32,
    pub teacher_ids: Vec<String>,
    records: Vec<CacheRecord>,
    index: HashMap<(u64, u32), usize>,
}

impl LogitsCache {
    pub fn new(num_classes: u32, teacher_ids: Vec<String>) -> Self {
        LogitsCache {
            num_classes,
            teacher_ids,
            records: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn num_teachers(&self) -> usize {
        self.teacher_ids.len()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[CacheRecord] {
        &self.records
    }

    pub fn push(&mut self, record: CacheRecord) -> Result<()> {
        if record.logits.len() != self.num_teachers() * self.num_classes as usize {
            return Err(Error::Dimension(format!(
                "record carries {} logits, cache expects {}",
                record.logits.len(),
                self.num_teachers() * self.num_classes as usize
            )));
        }
        let key = (record.sample_id, record.epoch);
        if self.index.contains_key(&key) {
            return Err(Error::Data(format!(
                "duplicate cache record for sample {} epoch {}",
                key.0, key.1
            )));
        }
        self.index.insert(key, self.records.len());
        self.records.push(record);
        Ok(())
    }

    pub fn lookup(&self, sample_id: u64, epoch: u32) -> Result<&CacheRecord> {
        self.index
            .get(&(sample_id, epoch))
            .map(|&i| &self.records[i])
            .ok_or(Error::CacheMiss {
                sample: sample_id,
                epoch,
            })
    }

    /// Teacher `k`'s logits slice of a record.
    pub fn teacher_logits<'a>(&self, record: &'a CacheRecord, k: usize) -> &'a [f32] {
        let c = self.num_classes as usize;
        &record.logits[k * c..(k + 1) * c]
    }

    fn header_bytes(&self) -> u64 {
        let ids: u64 = self.teacher_ids.iter().map(|s| 4 + s.len() as u64).sum();
        4 + 4 + 4 + 4 + ids + 8 + self.records.len() as u64 * INDEX_ENTRY_BYTES
    }

    fn record_bytes(&self) -> u64 {
        (8 + 4 + 4 + DESCRIPTOR_BYTES) as u64
            + 4 * self.num_teachers() as u64 * self.num_classes as u64
    }

    /// Exact file size the write path produces: header plus the records.
    pub fn expected_file_size(&self) -> u64 {
        self.header_bytes() + self.records.len() as u64 * self.record_bytes()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        let mut buf: Vec<u8> = Vec::with_capacity(self.expected_file_size() as usize);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&self.num_classes.to_le_bytes());
        buf.extend_from_slice(&(self.num_teachers() as u32).to_le_bytes());
        for id in &self.teacher_ids {
            buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
            buf.extend_from_slice(id.as_bytes());
        }
        buf.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        let mut offset = self.header_bytes();
        for r in &self.records {
            buf.extend_from_slice(&r.sample_id.to_le_bytes());
            buf.extend_from_slice(&r.epoch.to_le_bytes());
            buf.extend_from_slice(&offset.to_le_bytes());
            offset += self.record_bytes();
        }
        for r in &self.records {
            buf.extend_from_slice(&r.sample_id.to_le_bytes());
            buf.extend_from_slice(&r.epoch.to_le_bytes());
            let desc = r.descriptor.to_bytes();
            buf.extend_from_slice(&(desc.len() as u32).to_le_bytes());
            buf.extend_from_slice(&desc);
            for v in &r.logits {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        fs::File::open(path)
            .map_err(|e| Error::Input(format!("cannot open {}: {}", path.display(), e)))?
            .read_to_end(&mut buf)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > buf.len() {
                return Err(Error::Format("cache file truncated".into()));
            }
            let s = &buf[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let u32_at = |pos: &mut usize| -> Result<u32> {
            Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()))
        };
        let u64_at = |pos: &mut usize| -> Result<u64> {
            Ok(u64::from_le_bytes(take(pos, 8)?.try_into().unwrap()))
        };

        if take(&mut pos, 4)? != MAGIC {
            return Err(Error::Format("bad cache magic (expected RLGC)".into()));
        }
        let version = u32_at(&mut pos)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported cache version {}", version)));
        }
        let num_classes = u32_at(&mut pos)?;
        let num_teachers = u32_at(&mut pos)? as usize;
        let mut teacher_ids = Vec::with_capacity(num_teachers);
        for _ in 0..num_teachers {
            let len = u32_at(&mut pos)? as usize;
            let bytes = take(&mut pos, len)?;
            teacher_ids.push(
                String::from_utf8(bytes.to_vec())
                    .map_err(|_| Error::Format("teacher id is not utf-8".into()))?,
            );
        }
        let num_records = u64_at(&mut pos)? as usize;
        let mut offsets = Vec::with_capacity(num_records);
        for _ in 0..num_records {
            let _sample = u64_at(&mut pos)?;
            let _epoch = u32_at(&mut pos)?;
            offsets.push(u64_at(&mut pos)? as usize);
        }

        let mut cache = LogitsCache::new(num_classes, teacher_ids);
        for off in offsets {
            let mut p = off;
            let sample_id = u64_at(&mut p)?;
            let epoch = u32_at(&mut p)?;
            let dlen = u32_at(&mut p)? as usize;
            let descriptor = AugmentDescriptor::from_bytes(take(&mut p, dlen)?)?;
            let n = num_teachers * num_classes as usize;
            let mut logits = Vec::with_capacity(n);
            for _ in 0..n {
                logits.push(f32::from_le_bytes(take(&mut p, 4)?.try_into().unwrap()));
            }
            cache.push(CacheRecord {
                sample_id,
                epoch,
                descriptor,
                logits,
            })?;
        }
        Ok(cache)
    }
}
