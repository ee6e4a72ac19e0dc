//! Raw feature vectors grouped by leaf-group.
//!
//! An append-only file of checksummed chunks. Each chunk belongs to one group;
//! a group's features are the union of its chunks. Splits write fresh chunks
//! for the new groups and simply forget the old group's chunks.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::os::unix::fs::FileExt;
use std::path::Path;

use crate::error::{corrupt, invalid, Error, Result};
use crate::geometry::Vector;

const CHUNK_MAGIC: u32 = u32::from_le_bytes(*b"FCHK");
const CHUNK_HEADER: usize = 20;
const FILE_HEADER: u64 = 16;
const FILE_MAGIC: &[u8; 8] = b"NVFEAT01";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Chunk {
    pub offset: u64,
    pub count: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FeatureWatermark {
    pub end: u64,
    pub directory: Vec<(u64, Vec<Chunk>)>,
}

#[derive(Debug)]
pub struct FeatureStore {
    file: File,
    dim: usize,
    end: u64,
    directory: HashMap<u64, Vec<Chunk>>,
}

impl FeatureStore {
    pub fn create(path: &Path, dim: usize) -> Result<Self> {
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create_new(true)
            .open(path)?;
        let mut header = [0u8; FILE_HEADER as usize];
        header[..8].copy_from_slice(FILE_MAGIC);
        header[8..12].copy_from_slice(&(dim as u32).to_le_bytes());
        file.write_all_at(&header, 0)?;
        file.sync_all()?;
        Ok(Self {
            file,
            dim,
            end: FILE_HEADER,
            directory: HashMap::new(),
        })
    }

    /// Reopens as of `watermark`, discarding anything appended after it.
    pub fn open(path: &Path, dim: usize, watermark: &FeatureWatermark) -> Result<Self> {
        let file = OpenOptions::new().read(true).write(true).open(path)?;
        let mut header = [0u8; FILE_HEADER as usize];
        file.read_exact_at(&mut header, 0)?;
        if &header[..8] != FILE_MAGIC {
            return Err(corrupt(format!("{}: not a feature file", path.display())));
        }
        let stored = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        if stored != dim {
            return Err(corrupt(format!(
                "{}: dimension {stored}, expected {dim}",
                path.display()
            )));
        }
        let end = watermark.end.max(FILE_HEADER);
        if file.metadata()?.len() < end {
            return Err(corrupt(format!(
                "{}: shorter than its watermark",
                path.display()
            )));
        }
        file.set_len(end)?;
        Ok(Self {
            file,
            dim,
            end,
            directory: watermark.directory.iter().cloned().collect(),
        })
    }

    fn record_size(&self) -> usize {
        8 + 4 * self.dim
    }

    pub fn has_group(&self, group: u64) -> bool {
        self.directory.contains_key(&group)
    }

    pub fn group_ids(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self.directory.keys().copied().collect();
        ids.sort_unstable();
        ids
    }

    /// Makes `group` known with no features.
    pub fn register_group(&mut self, group: u64) {
        self.directory.entry(group).or_default();
    }

    pub fn append_features(&mut self, group: u64, vectors: &[Vector]) -> Result<()> {
        if vectors.iter().any(|v| v.dim() != self.dim) {
            return Err(invalid(format!(
                "feature dimension differs from {}",
                self.dim
            )));
        }
        let entry = self.directory.entry(group).or_default();
        if vectors.is_empty() {
            return Ok(());
        }
        let mut buf = Vec::with_capacity(CHUNK_HEADER + vectors.len() * (8 + 4 * self.dim));
        buf.extend_from_slice(&CHUNK_MAGIC.to_le_bytes());
        buf.extend_from_slice(&group.to_le_bytes());
        buf.extend_from_slice(&(vectors.len() as u32).to_le_bytes());
        buf.extend_from_slice(&[0u8; 4]);
        for v in vectors {
            buf.extend_from_slice(&v.id.to_le_bytes());
            for c in &v.components {
                buf.extend_from_slice(&c.to_le_bytes());
            }
        }
        let crc = chunk_crc(&buf);
        buf[16..20].copy_from_slice(&crc.to_le_bytes());
        self.file.write_all_at(&buf, self.end)?;
        entry.push(Chunk {
            offset: self.end,
            count: vectors.len() as u32,
        });
        self.end += buf.len() as u64;
        Ok(())
    }

    pub fn fetch_group_features(&self, group: u64) -> Result<Vec<Vector>> {
        let chunks = self
            .directory
            .get(&group)
            .ok_or_else(|| Error::NotFound(format!("features of group {group}")))?;
        let mut out = Vec::new();
        for chunk in chunks {
            self.read_chunk(group, *chunk, &mut out)?;
        }
        Ok(out)
    }

    fn read_chunk(&self, group: u64, chunk: Chunk, out: &mut Vec<Vector>) -> Result<()> {
        let len = CHUNK_HEADER + chunk.count as usize * self.record_size();
        let mut buf = vec![0u8; len];
        self.file.read_exact_at(&mut buf, chunk.offset)?;
        let magic = u32::from_le_bytes(buf[0..4].try_into().unwrap());
        let owner = u64::from_le_bytes(buf[4..12].try_into().unwrap());
        let count = u32::from_le_bytes(buf[12..16].try_into().unwrap());
        let crc = u32::from_le_bytes(buf[16..20].try_into().unwrap());
        if magic != CHUNK_MAGIC || owner != group || count != chunk.count || crc != chunk_crc(&buf)
        {
            return Err(corrupt(format!(
                "feature chunk at {} for group {group} is damaged",
                chunk.offset
            )));
        }
        for rec in buf[CHUNK_HEADER..].chunks_exact(self.record_size()) {
            let id = u64::from_le_bytes(rec[..8].try_into().unwrap());
            let components = rec[8..]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            out.push(Vector { id, components });
        }
        Ok(())
    }

    /// Drops `old` and writes the given groups as fresh entries.
    pub fn replace_group(&mut self, old: u64, new: &[(u64, Vec<Vector>)]) -> Result<()> {
        self.directory.remove(&old);
        for (gid, vectors) in new {
            self.directory.remove(gid);
            self.append_features(*gid, vectors)?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<FeatureWatermark> {
        self.file.sync_data()?;
        let mut directory: Vec<(u64, Vec<Chunk>)> = self
            .directory
            .iter()
            .map(|(k, v)| (*k, v.clone()))
            .collect();
        directory.sort_unstable_by_key(|(k, _)| *k);
        Ok(FeatureWatermark {
            end: self.end,
            directory,
        })
    }

    pub fn file_size(&self) -> u64 {
        self.end
    }
}

fn chunk_crc(buf: &[u8]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    h.update(&buf[..16]);
    h.update(&buf[CHUNK_HEADER..]);
    h.finalize()
}
