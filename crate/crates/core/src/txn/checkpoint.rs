//! Checkpoint images: a durable description of the committed index state.
//!
//! Published by writing `checkpoint-{id:08}.tmp`, syncing it, renaming it to
//! `checkpoint-{id:08}` and syncing the directory. The two newest images are
//! kept; loading falls back to the older one if the newer is damaged.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{corrupt, Result};
use crate::fault;
use crate::storage::features::Chunk;
use crate::storage::leaf::Reader;
use crate::storage::{Extent, FeatureWatermark, LeafWatermark};
use crate::tree::image::{decode_shape, encode_shape};
use crate::tree::TreeImage;
use crate::txn::log::{sync_dir, Tid};

const MAGIC: &[u8; 8] = b"NVCKPT01";
const VERSION: u32 = 1;
pub const KEEP_CHECKPOINTS: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct MediaEntry {
    pub media: u64,
    pub start: u64,
    pub end: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointImage {
    pub id: u64,
    pub last_tid: Tid,
    /// First vector id not allocated to a committed transaction.
    pub id_limit: u64,
    pub global_log_start: u64,
    pub trees: Vec<TreeImage>,
    pub media: Vec<MediaEntry>,
    /// Media whose deletion was announced but has not committed.
    pub deleting: Vec<u64>,
}

impl CheckpointImage {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for v in [self.id, self.last_tid, self.id_limit, self.global_log_start] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.trees.len() as u32).to_le_bytes());
        for t in &self.trees {
            encode_tree(t, &mut out);
        }
        out.extend_from_slice(&(self.media.len() as u64).to_le_bytes());
        for m in &self.media {
            for v in [m.media, m.start, m.end] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.deleting.len() as u64).to_le_bytes());
        for m in &self.deleting {
            out.extend_from_slice(&m.to_le_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(corrupt("checkpoint too short"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
            return Err(corrupt("checkpoint checksum mismatch"));
        }
        let mut r = Reader::new(body);
        if r.take(8)? != MAGIC {
            return Err(corrupt("not a checkpoint image"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(corrupt(format!("unsupported checkpoint version {version}")));
        }
        let id = r.u64()?;
        let last_tid = r.u64()?;
        let id_limit = r.u64()?;
        let global_log_start = r.u64()?;
        let n = r.u32()? as usize;
        let trees = (0..n)
            .map(|_| decode_tree(&mut r))
            .collect::<Result<Vec<_>>>()?;
        let n = r.u64()? as usize;
        let mut media = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            media.push(MediaEntry {
                media: r.u64()?,
                start: r.u64()?,
                end: r.u64()?,
            });
        }
        let n = r.u64()? as usize;
        let deleting = (0..n).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        if r.remaining() != 0 {
            return Err(corrupt("trailing bytes in checkpoint"));
        }
        Ok(Self {
            id,
            last_tid,
            id_limit,
            global_log_start,
            trees,
            media,
            deleting,
        })
    }
}

fn encode_tree(t: &TreeImage, out: &mut Vec<u8>) {
    out.extend_from_slice(&t.next_group_id.to_le_bytes());
    out.extend_from_slice(&t.log_start.to_le_bytes());
    encode_shape(&t.shape, out);
    out.extend_from_slice(&t.leaves.end_block.to_le_bytes());
    out.extend_from_slice(&(t.leaves.directory.len() as u64).to_le_bytes());
    for (gid, e) in &t.leaves.directory {
        out.extend_from_slice(&gid.to_le_bytes());
        out.extend_from_slice(&e.block.to_le_bytes());
        out.extend_from_slice(&e.len.to_le_bytes());
    }
    out.extend_from_slice(&t.features.end.to_le_bytes());
    out.extend_from_slice(&(t.features.directory.len() as u64).to_le_bytes());
    for (gid, chunks) in &t.features.directory {
        out.extend_from_slice(&gid.to_le_bytes());
        out.extend_from_slice(&(chunks.len() as u32).to_le_bytes());
        for c in chunks {
            out.extend_from_slice(&c.offset.to_le_bytes());
            out.extend_from_slice(&c.count.to_le_bytes());
        }
    }
}

fn decode_tree(r: &mut Reader<'_>) -> Result<TreeImage> {
    let next_group_id = r.u64()?;
    let log_start = r.u64()?;
    let shape = decode_shape(r)?;
    let end_block = r.u64()?;
    let n = r.u64()? as usize;
    let mut directory = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let gid = r.u64()?;
        let block = r.u64()?;
        let len = r.u32()?;
        directory.push((gid, Extent { block, len }));
    }
    let leaves = LeafWatermark {
        end_block,
        directory,
    };
    let end = r.u64()?;
    let n = r.u64()? as usize;
    let mut directory = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let gid = r.u64()?;
        let m = r.u32()? as usize;
        let mut chunks = Vec::with_capacity(m.min(1 << 20));
        for _ in 0..m {
            chunks.push(Chunk {
                offset: r.u64()?,
                count: r.u32()?,
            });
        }
        directory.push((gid, chunks));
    }
    Ok(TreeImage {
        next_group_id,
        shape,
        leaves,
        features: FeatureWatermark { end, directory },
        log_start,
    })
}

fn checkpoint_path(dir: &Path, id: u64) -> PathBuf {
    dir.join(format!("checkpoint-{id:08}"))
}

/// Checkpoint ids present in `dir`, newest first.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<u64>> {
    let mut ids: Vec<u64> = Vec::new();
    for entry in fs::read_dir(dir)? {
        let name = entry?.file_name();
        let Some(name) = name.to_str() else { continue };
        if let Some(num) = name.strip_prefix("checkpoint-") {
            if num.len() == 8 {
                if let Ok(id) = num.parse() {
                    ids.push(id);
                }
            }
        }
    }
    ids.sort_unstable_by(|a, b| b.cmp(a));
    Ok(ids)
}

/// Writes and atomically publishes `image`, then drops all but the newest images.
pub fn write_checkpoint(dir: &Path, image: &CheckpointImage) -> Result<()> {
    let bytes = image.encode();
    let tmp = dir.join(format!("checkpoint-{:08}.tmp", image.id));
    let mut f = File::create(&tmp)?;
    let half = bytes.len() / 2;
    f.write_all(&bytes[..half])?;
    fault::hit("checkpoint-mid-write");
    f.write_all(&bytes[half..])?;
    f.sync_all()?;
    drop(f);
    fault::hit("checkpoint-before-publish");
    fs::rename(&tmp, checkpoint_path(dir, image.id))?;
    sync_dir(dir)?;
    fault::hit("checkpoint-after-publish");
    for old in list_checkpoints(dir)?.into_iter().skip(KEEP_CHECKPOINTS) {
        fs::remove_file(checkpoint_path(dir, old))?;
    }
    Ok(())
}

/// Newest intact checkpoint, or `None` if there is none.
pub fn load_latest(dir: &Path) -> Result<Option<CheckpointImage>> {
    for id in list_checkpoints(dir)? {
        let bytes = fs::read(checkpoint_path(dir, id))?;
        match CheckpointImage::decode(&bytes) {
            Ok(img) if img.id == id => return Ok(Some(img)),
            Ok(_) => tracing::warn!(id, "checkpoint file name and contents disagree; skipping"),
            Err(e) => tracing::warn!(id, error = %e, "damaged checkpoint; falling back"),
        }
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::Shape;

    fn image(id: u64) -> CheckpointImage {
        CheckpointImage {
            id,
            last_tid: 7,
            id_limit: 1000,
            global_log_start: 12,
            trees: vec![TreeImage {
                next_group_id: 3,
                shape: Shape::Group(2),
                leaves: LeafWatermark {
                    end_block: 9,
                    directory: vec![(
                        2,
                        Extent {
                            block: 1,
                            len: 5000,
                        },
                    )],
                },
                features: FeatureWatermark {
                    end: 4096,
                    directory: vec![(
                        2,
                        vec![Chunk {
                            offset: 16,
                            count: 3,
                        }],
                    )],
                },
                log_start: 40,
            }],
            media: vec![MediaEntry {
                media: 5,
                start: 0,
                end: 1000,
            }],
            deleting: vec![5],
        }
    }

    #[test]
    fn image_round_trips() {
        let img = image(3);
        assert_eq!(CheckpointImage::decode(&img.encode()).unwrap(), img);
    }

    #[test]
    fn latest_wins_and_torn_latest_falls_back() {
        let dir = tempfile::tempdir().unwrap();
        write_checkpoint(dir.path(), &image(1)).unwrap();
        write_checkpoint(dir.path(), &image(2)).unwrap();
        assert_eq!(load_latest(dir.path()).unwrap().unwrap().id, 2);
        let p = checkpoint_path(dir.path(), 2);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 10]).unwrap();
        assert_eq!(load_latest(dir.path()).unwrap().unwrap().id, 1);
    }

    #[test]
    fn only_two_images_are_kept() {
        let dir = tempfile::tempdir().unwrap();
        for id in 1..=4 {
            write_checkpoint(dir.path(), &image(id)).unwrap();
        }
        assert_eq!(list_checkpoints(dir.path()).unwrap(), vec![4, 3]);
    }
}
