//! Segmented write-ahead logs.
//!
//! Each tree owns one log and the ensemble owns a global log. A log is a
//! sequence of segment files `{prefix}-{first_lsn:020}.wal`; a new segment is
//! started at every checkpoint so old segments can be dropped whole.
//!
//! Record framing: `[len u32][crc u32][lsn u64][kind u8][payload]`, where
//! `len` counts everything after the crc and the crc covers the same bytes.

use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{corrupt, Result};
use crate::geometry::Vector;
use crate::storage::leaf::Reader;

const SEGMENT_MAGIC: &[u8; 8] = b"NVWAL001";
const SEGMENT_HEADER: usize = 20;
const MAX_RECORD: usize = 1 << 30;

pub type Tid = u64;

/// Media bookkeeping carried by a commit record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MediaOp {
    None,
    Inserted { media: u64, start: u64, end: u64 },
    Deleted { media: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum LogRecord {
    InsertVector {
        tid: Tid,
        vector: Vector,
    },
    DeleteVector {
        tid: Tid,
        id: u64,
    },
    /// `payload` is a subtree image including the new groups' contents.
    Split {
        tid: Tid,
        old_group: u64,
        new_groups: Vec<u64>,
        payload: Vec<u8>,
    },
    Commit {
        tid: Tid,
        id_end: u64,
        media: MediaOp,
    },
    CheckpointMark {
        checkpoint: u64,
    },
    /// A media item entered the deletion list; logged before any removal.
    DeleteIntent {
        tid: Tid,
        media: u64,
    },
}

impl LogRecord {
    fn kind(&self) -> u8 {
        match self {
            LogRecord::InsertVector { .. } => 1,
            LogRecord::DeleteVector { .. } => 2,
            LogRecord::Split { .. } => 3,
            LogRecord::Commit { .. } => 4,
            LogRecord::CheckpointMark { .. } => 5,
            LogRecord::DeleteIntent { .. } => 6,
        }
    }

    pub fn tid(&self) -> Option<Tid> {
        match self {
            LogRecord::InsertVector { tid, .. }
            | LogRecord::DeleteVector { tid, .. }
            | LogRecord::Split { tid, .. }
            | LogRecord::Commit { tid, .. }
            | LogRecord::DeleteIntent { tid, .. } => Some(*tid),
            LogRecord::CheckpointMark { .. } => None,
        }
    }

    fn encode_payload(&self, out: &mut Vec<u8>) {
        match self {
            LogRecord::InsertVector { tid, vector } => {
                out.extend_from_slice(&tid.to_le_bytes());
                out.extend_from_slice(&vector.id.to_le_bytes());
                out.extend_from_slice(&(vector.components.len() as u32).to_le_bytes());
                for c in &vector.components {
                    out.extend_from_slice(&c.to_le_bytes());
                }
            }
            LogRecord::DeleteVector { tid, id } => {
                out.extend_from_slice(&tid.to_le_bytes());
                out.extend_from_slice(&id.to_le_bytes());
            }
            LogRecord::Split {
                tid,
                old_group,
                new_groups,
                payload,
            } => {
                out.extend_from_slice(&tid.to_le_bytes());
                out.extend_from_slice(&old_group.to_le_bytes());
                out.extend_from_slice(&(new_groups.len() as u32).to_le_bytes());
                for g in new_groups {
                    out.extend_from_slice(&g.to_le_bytes());
                }
                out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
                out.extend_from_slice(payload);
            }
            LogRecord::Commit { tid, id_end, media } => {
                out.extend_from_slice(&tid.to_le_bytes());
                out.extend_from_slice(&id_end.to_le_bytes());
                match media {
                    MediaOp::None => out.push(0),
                    MediaOp::Inserted { media, start, end } => {
                        out.push(1);
                        out.extend_from_slice(&media.to_le_bytes());
                        out.extend_from_slice(&start.to_le_bytes());
                        out.extend_from_slice(&end.to_le_bytes());
                    }
                    MediaOp::Deleted { media } => {
                        out.push(2);
                        out.extend_from_slice(&media.to_le_bytes());
                    }
                }
            }
            LogRecord::CheckpointMark { checkpoint } => {
                out.extend_from_slice(&checkpoint.to_le_bytes())
            }
            LogRecord::DeleteIntent { tid, media } => {
                out.extend_from_slice(&tid.to_le_bytes());
                out.extend_from_slice(&media.to_le_bytes());
            }
        }
    }

    fn decode(kind: u8, r: &mut Reader<'_>) -> Result<Self> {
        let rec = match kind {
            1 => {
                let tid = r.u64()?;
                let id = r.u64()?;
                let dim = r.u32()? as usize;
                let mut components = Vec::with_capacity(dim);
                for _ in 0..dim {
                    components.push(r.f32()?);
                }
                LogRecord::InsertVector {
                    tid,
                    vector: Vector { id, components },
                }
            }
            2 => LogRecord::DeleteVector {
                tid: r.u64()?,
                id: r.u64()?,
            },
            3 => {
                let tid = r.u64()?;
                let old_group = r.u64()?;
                let n = r.u32()? as usize;
                let mut new_groups = Vec::with_capacity(n.min(64));
                for _ in 0..n {
                    new_groups.push(r.u64()?);
                }
                let len = r.u32()? as usize;
                let payload = r.take(len)?.to_vec();
                LogRecord::Split {
                    tid,
                    old_group,
                    new_groups,
                    payload,
                }
            }
            4 => {
                let tid = r.u64()?;
                let id_end = r.u64()?;
                let media = match r.u8()? {
                    0 => MediaOp::None,
                    1 => MediaOp::Inserted {
                        media: r.u64()?,
                        start: r.u64()?,
                        end: r.u64()?,
                    },
                    2 => MediaOp::Deleted { media: r.u64()? },
                    other => return Err(corrupt(format!("unknown media op {other}"))),
                };
                LogRecord::Commit { tid, id_end, media }
            }
            5 => LogRecord::CheckpointMark {
                checkpoint: r.u64()?,
            },
            6 => LogRecord::DeleteIntent {
                tid: r.u64()?,
                media: r.u64()?,
            },
            other => return Err(corrupt(format!("unknown log record kind {other}"))),
        };
        if r.remaining() != 0 {
            return Err(corrupt("trailing bytes in log record"));
        }
        Ok(rec)
    }
}

fn frame(lsn: u64, rec: &LogRecord, out: &mut Vec<u8>) {
    let start = out.len();
    out.extend_from_slice(&[0u8; 8]);
    out.extend_from_slice(&lsn.to_le_bytes());
    out.push(rec.kind());
    rec.encode_payload(out);
    let body = &out[start + 8..];
    let len = body.len() as u32;
    let crc = crc32fast::hash(body);
    out[start..start + 4].copy_from_slice(&len.to_le_bytes());
    out[start + 4..start + 8].copy_from_slice(&crc.to_le_bytes());
}

fn segment_name(prefix: &str, first_lsn: u64) -> String {
    format!("{prefix}-{first_lsn:020}.wal")
}

/// Segment files of one log, ordered by first LSN.
pub fn list_segments(dir: &Path, prefix: &str) -> Result<Vec<(u64, PathBuf)>> {
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        let Some(rest) = name.strip_prefix(prefix).and_then(|r| r.strip_prefix('-')) else {
            continue;
        };
        let Some(num) = rest.strip_suffix(".wal") else {
            continue;
        };
        if num.len() != 20 {
            continue;
        }
        if let Ok(lsn) = num.parse::<u64>() {
            out.push((lsn, entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

/// Result of scanning a log: every intact record plus where the valid prefix ends.
#[derive(Debug, Default)]
pub struct LogScan {
    pub records: Vec<(u64, LogRecord)>,
    pub next_lsn: u64,
    /// Segment holding the last valid byte and the length of its valid prefix.
    pub tail: Option<(u64, PathBuf, u64)>,
    /// Segments after a damaged record; recovery deletes them.
    pub orphaned: Vec<PathBuf>,
    pub truncated: bool,
}

/// Reads every record with `lsn >= from_lsn`; stops at the first damaged record.
pub fn scan_log(dir: &Path, prefix: &str, owner: u32, from_lsn: u64) -> Result<LogScan> {
    let segments = list_segments(dir, prefix)?;
    let mut scan = LogScan::default();
    let mut broken = false;
    for (first, path) in segments {
        if broken {
            scan.orphaned.push(path);
            continue;
        }
        let mut bytes = Vec::new();
        File::open(&path)?.read_to_end(&mut bytes)?;
        if bytes.len() < SEGMENT_HEADER
            || &bytes[..8] != SEGMENT_MAGIC
            || u32::from_le_bytes(bytes[8..12].try_into().unwrap()) != owner
            || u64::from_le_bytes(bytes[12..20].try_into().unwrap()) != first
        {
            // A segment whose header never made it to disk holds nothing.
            broken = true;
            scan.truncated = true;
            scan.orphaned.push(path);
            continue;
        }
        let mut pos = SEGMENT_HEADER;
        let mut expected = first;
        while pos < bytes.len() {
            match parse_record(&bytes[pos..]) {
                Some((lsn, rec, used)) if lsn == expected => {
                    if lsn >= from_lsn {
                        scan.records.push((lsn, rec));
                    }
                    expected += 1;
                    pos += used;
                }
                _ => {
                    broken = true;
                    scan.truncated = true;
                    break;
                }
            }
        }
        scan.next_lsn = expected;
        scan.tail = Some((first, path, pos as u64));
    }
    Ok(scan)
}

fn parse_record(buf: &[u8]) -> Option<(u64, LogRecord, usize)> {
    if buf.len() < 8 {
        return None;
    }
    let len = u32::from_le_bytes(buf[0..4].try_into().unwrap()) as usize;
    let crc = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if !(9..=MAX_RECORD).contains(&len) || buf.len() < 8 + len {
        return None;
    }
    let body = &buf[8..8 + len];
    if crc32fast::hash(body) != crc {
        return None;
    }
    let lsn = u64::from_le_bytes(body[..8].try_into().unwrap());
    let mut r = Reader::new(&body[9..]);
    let rec = LogRecord::decode(body[8], &mut r).ok()?;
    Some((lsn, rec, 8 + len))
}

/// Appends records to the newest segment; records become durable at `flush`.
#[derive(Debug)]
pub struct LogWriter {
    dir: PathBuf,
    prefix: String,
    owner: u32,
    file: File,
    segment_first: u64,
    next_lsn: u64,
    durable_lsn: u64,
    buf: Vec<u8>,
    bytes_written: u64,
    flushes: u64,
}

impl LogWriter {
    /// Starts a fresh log whose first record will carry `first_lsn`.
    pub fn create(dir: &Path, prefix: &str, owner: u32, first_lsn: u64) -> Result<Self> {
        let file = new_segment(dir, prefix, owner, first_lsn)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            prefix: prefix.to_string(),
            owner,
            file,
            segment_first: first_lsn,
            next_lsn: first_lsn,
            durable_lsn: first_lsn,
            buf: Vec::new(),
            bytes_written: 0,
            flushes: 0,
        })
    }

    /// Continues after a scan, cutting off any damaged tail.
    pub fn resume(dir: &Path, prefix: &str, owner: u32, scan: &LogScan) -> Result<Self> {
        for path in &scan.orphaned {
            fs::remove_file(path)?;
        }
        match &scan.tail {
            Some((first, path, valid)) => {
                let file = OpenOptions::new().read(true).write(true).open(path)?;
                file.set_len(*valid)?;
                file.sync_all()?;
                let mut file = file;
                use std::io::Seek;
                file.seek(std::io::SeekFrom::End(0))?;
                Ok(Self {
                    dir: dir.to_path_buf(),
                    prefix: prefix.to_string(),
                    owner,
                    file,
                    segment_first: *first,
                    next_lsn: scan.next_lsn,
                    durable_lsn: scan.next_lsn,
                    buf: Vec::new(),
                    bytes_written: 0,
                    flushes: 0,
                })
            }
            None => {
                sync_dir(dir)?;
                Self::create(dir, prefix, owner, scan.next_lsn)
            }
        }
    }

    pub fn append(&mut self, rec: &LogRecord) -> u64 {
        let lsn = self.next_lsn;
        frame(lsn, rec, &mut self.buf);
        self.next_lsn += 1;
        lsn
    }

    /// Writes and syncs everything appended so far.
    pub fn flush(&mut self) -> Result<()> {
        if self.buf.is_empty() {
            return Ok(());
        }
        self.file.write_all(&self.buf)?;
        self.file.sync_data()?;
        self.bytes_written += self.buf.len() as u64;
        self.buf.clear();
        self.durable_lsn = self.next_lsn;
        self.flushes += 1;
        Ok(())
    }

    pub fn next_lsn(&self) -> u64 {
        self.next_lsn
    }

    /// LSNs below this value are on disk.
    pub fn durable_lsn(&self) -> u64 {
        self.durable_lsn
    }

    pub fn has_unflushed(&self) -> bool {
        !self.buf.is_empty()
    }

    pub fn bytes_written(&self) -> u64 {
        self.bytes_written
    }

    pub fn flush_count(&self) -> u64 {
        self.flushes
    }

    /// Flushes and starts a new segment; returns its first LSN.
    pub fn rotate(&mut self) -> Result<u64> {
        self.flush()?;
        if self.next_lsn == self.segment_first {
            return Ok(self.next_lsn);
        }
        self.file = new_segment(&self.dir, &self.prefix, self.owner, self.next_lsn)?;
        self.segment_first = self.next_lsn;
        Ok(self.next_lsn)
    }

    /// Removes segments that hold only records below `lsn`.
    pub fn truncate_before(&mut self, lsn: u64) -> Result<()> {
        let segments = list_segments(&self.dir, &self.prefix)?;
        for (i, (first, path)) in segments.iter().enumerate() {
            let next_first = segments.get(i + 1).map(|s| s.0);
            match next_first {
                Some(nf) if nf <= lsn && *first != self.segment_first => fs::remove_file(path)?,
                _ => {}
            }
        }
        Ok(())
    }
}

fn new_segment(dir: &Path, prefix: &str, owner: u32, first_lsn: u64) -> Result<File> {
    let path = dir.join(segment_name(prefix, first_lsn));
    let mut file = OpenOptions::new()
        .create(true)
        .truncate(true)
        .write(true)
        .open(&path)?;
    let mut header = Vec::with_capacity(SEGMENT_HEADER);
    header.extend_from_slice(SEGMENT_MAGIC);
    header.extend_from_slice(&owner.to_le_bytes());
    header.extend_from_slice(&first_lsn.to_le_bytes());
    file.write_all(&header)?;
    file.sync_all()?;
    sync_dir(dir)?;
    Ok(file)
}

pub(crate) fn sync_dir(dir: &Path) -> Result<()> {
    File::open(dir)?.sync_all()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<LogRecord> {
        vec![
            LogRecord::InsertVector {
                tid: 1,
                vector: Vector::new(10, vec![1.0, 2.0, -3.5]).unwrap(),
            },
            LogRecord::DeleteVector { tid: 2, id: 10 },
            LogRecord::Split {
                tid: 2,
                old_group: 4,
                new_groups: vec![5, 6, 7, 8],
                payload: vec![1, 2, 3],
            },
            LogRecord::Commit {
                tid: 2,
                id_end: 11,
                media: MediaOp::Inserted {
                    media: 9,
                    start: 0,
                    end: 11,
                },
            },
            LogRecord::DeleteIntent { tid: 3, media: 9 },
            LogRecord::Commit {
                tid: 3,
                id_end: 11,
                media: MediaOp::Deleted { media: 9 },
            },
            LogRecord::CheckpointMark { checkpoint: 2 },
        ]
    }

    #[test]
    fn records_round_trip_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = LogWriter::create(dir.path(), "t0", 0, 0).unwrap();
        for r in sample() {
            w.append(&r);
        }
        w.flush().unwrap();
        let scan = scan_log(dir.path(), "t0", 0, 0).unwrap();
        assert!(!scan.truncated);
        let recs: Vec<LogRecord> = scan.records.into_iter().map(|(_, r)| r).collect();
        assert_eq!(recs, sample());
        assert_eq!(scan.next_lsn, 7);
    }

    #[test]
    fn unflushed_records_are_not_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = LogWriter::create(dir.path(), "g", 9, 0).unwrap();
        w.append(&sample()[0]);
        let scan = scan_log(dir.path(), "g", 9, 0).unwrap();
        assert!(scan.records.is_empty());
    }

    #[test]
    fn torn_tail_is_truncated_and_appending_resumes() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = LogWriter::create(dir.path(), "t1", 1, 0).unwrap();
        for r in sample() {
            w.append(&r);
        }
        w.flush().unwrap();
        drop(w);
        let (_, path) = list_segments(dir.path(), "t1").unwrap().pop().unwrap();
        let len = fs::metadata(&path).unwrap().len();
        let f = OpenOptions::new().write(true).open(&path).unwrap();
        f.set_len(len - 3).unwrap();
        let scan = scan_log(dir.path(), "t1", 1, 0).unwrap();
        assert!(scan.truncated);
        assert_eq!(scan.records.len(), 6);
        let mut w = LogWriter::resume(dir.path(), "t1", 1, &scan).unwrap();
        w.append(&LogRecord::CheckpointMark { checkpoint: 7 });
        w.flush().unwrap();
        let scan = scan_log(dir.path(), "t1", 1, 0).unwrap();
        assert!(!scan.truncated);
        assert_eq!(scan.records.len(), 7);
        assert_eq!(
            scan.records[6],
            (6, LogRecord::CheckpointMark { checkpoint: 7 })
        );
    }

    #[test]
    fn rotation_and_truncation_keep_requested_records() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = LogWriter::create(dir.path(), "t2", 2, 0).unwrap();
        w.append(&sample()[0]);
        let a = w.rotate().unwrap();
        w.append(&sample()[1]);
        let b = w.rotate().unwrap();
        w.append(&sample()[2]);
        w.flush().unwrap();
        assert_eq!((a, b), (1, 2));
        w.truncate_before(a).unwrap();
        assert_eq!(list_segments(dir.path(), "t2").unwrap().len(), 2);
        let scan = scan_log(dir.path(), "t2", 2, a).unwrap();
        assert_eq!(scan.records.len(), 2);
        w.truncate_before(b).unwrap();
        assert_eq!(list_segments(dir.path(), "t2").unwrap().len(), 1);
    }

    #[test]
    fn flipped_byte_stops_the_scan() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = LogWriter::create(dir.path(), "t3", 3, 0).unwrap();
        for r in sample() {
            w.append(&r);
        }
        w.flush().unwrap();
        let (_, path) = list_segments(dir.path(), "t3").unwrap().pop().unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[SEGMENT_HEADER + 12] ^= 0x10;
        fs::write(&path, &bytes).unwrap();
        let scan = scan_log(dir.path(), "t3", 3, 0).unwrap();
        assert!(scan.records.is_empty());
        assert!(scan.truncated);
    }
}
