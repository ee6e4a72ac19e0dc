//! Vector files: little-endian records of (u32 dimension, D × f32).

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};

pub fn write_vectors(path: &Path, vectors: &[Vec<f32>]) -> Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(f);
    for v in vectors {
        w.write_all(&(v.len() as u32).to_le_bytes())?;
        for c in v {
            w.write_all(&c.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_vectors(path: &Path) -> Result<Vec<Vec<f32>>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut r = BufReader::new(f);
    let mut out = Vec::new();
    let mut dim_buf = [0u8; 4];
    let mut dim: Option<usize> = None;
    loop {
        match r.read_exact(&mut dim_buf) {
            Ok(()) => {}
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let d = u32::from_le_bytes(dim_buf) as usize;
        if d == 0 {
            bail!("{}: record {} has dimension 0", path.display(), out.len());
        }
        if *dim.get_or_insert(d) != d {
            bail!(
                "{}: record {} has dimension {d}, expected {}",
                path.display(),
                out.len(),
                dim.unwrap()
            );
        }
        let mut buf = vec![0u8; d * 4];
        r.read_exact(&mut buf)
            .with_context(|| format!("{}: truncated record {}", path.display(), out.len()))?;
        out.push(
            buf.chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        );
    }
    Ok(out)
}
