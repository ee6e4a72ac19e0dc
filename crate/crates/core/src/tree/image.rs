//! Binary images of tree structure, used by checkpoints and split records.

use crate::error::{corrupt, Result};
use crate::storage::leaf::{decode_spec, encode_spec, LeafGroup, Reader};
use crate::tree::Shape;

const SHAPE_VERSION: u8 = 1;
const MAX_DEPTH: usize = 64;

pub fn encode_shape(shape: &Shape, out: &mut Vec<u8>) {
    out.push(SHAPE_VERSION);
    encode_node(shape, out);
}

fn encode_node(shape: &Shape, out: &mut Vec<u8>) {
    match shape {
        Shape::Group(gid) => {
            out.push(0);
            out.extend_from_slice(&gid.to_le_bytes());
        }
        Shape::Inner {
            seed,
            spec,
            children,
        } => {
            out.push(1);
            out.extend_from_slice(&seed.to_le_bytes());
            encode_spec(out, spec);
            out.push(children.len() as u8);
            for c in children {
                encode_node(c, out);
            }
        }
    }
}

pub(crate) fn decode_shape(r: &mut Reader<'_>) -> Result<Shape> {
    let version = r.u8()?;
    if version != SHAPE_VERSION {
        return Err(corrupt(format!("unsupported tree image version {version}")));
    }
    decode_node(r, 0)
}

fn decode_node(r: &mut Reader<'_>, depth: usize) -> Result<Shape> {
    if depth > MAX_DEPTH {
        return Err(corrupt("tree image nested too deeply"));
    }
    match r.u8()? {
        0 => Ok(Shape::Group(r.u64()?)),
        1 => {
            let seed = r.u64()?;
            let spec = decode_spec(r)?;
            let n = r.u8()? as usize;
            if n != spec.fanout() {
                return Err(corrupt("inner node child count differs from its fanout"));
            }
            let children = (0..n)
                .map(|_| decode_node(r, depth + 1))
                .collect::<Result<Vec<_>>>()?;
            Ok(Shape::Inner {
                seed,
                spec,
                children,
            })
        }
        t => Err(corrupt(format!("unknown tree image tag {t}"))),
    }
}

/// Replacement subtree produced by a split, with the contents of its groups.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitImage {
    pub generation: u32,
    pub shape: Shape,
    pub groups: Vec<LeafGroup>,
}

impl SplitImage {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.generation.to_le_bytes());
        encode_shape(&self.shape, &mut out);
        out.extend_from_slice(&(self.groups.len() as u32).to_le_bytes());
        for g in &self.groups {
            let bytes = g.encode()?;
            out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
            out.extend_from_slice(&bytes);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8], dim: usize) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let generation = r.u32()?;
        let shape = decode_shape(&mut r)?;
        let n = r.u32()? as usize;
        let mut groups = Vec::with_capacity(n.min(64));
        for _ in 0..n {
            let len = r.u32()? as usize;
            groups.push(LeafGroup::decode(r.take(len)?, dim)?);
        }
        if r.remaining() != 0 {
            return Err(corrupt("trailing bytes in split image"));
        }
        Ok(Self {
            generation,
            shape,
            groups,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{PartitionSpec, PartitionStrategy};

    #[test]
    fn shape_round_trips() {
        let spec = PartitionSpec::from_parts(
            vec![-1.0, 0.0, 1.0],
            PartitionStrategy::EqualDistance,
            -2.0,
            2.0,
        )
        .unwrap();
        let shape = Shape::Inner {
            seed: 42,
            spec: spec.clone(),
            children: vec![
                Shape::Group(1),
                Shape::Inner {
                    seed: 7,
                    spec,
                    children: (2..6).map(Shape::Group).collect(),
                },
                Shape::Group(6),
                Shape::Group(7),
            ],
        };
        let mut out = Vec::new();
        encode_shape(&shape, &mut out);
        let back = decode_shape(&mut Reader::new(&out)).unwrap();
        assert_eq!(back, shape);
        assert!(decode_shape(&mut Reader::new(&out[..out.len() - 1])).is_err());
    }

    #[test]
    fn split_image_round_trips() {
        let img = SplitImage {
            generation: 3,
            shape: Shape::Group(9),
            groups: vec![LeafGroup::empty(9, 5, 4).unwrap()],
        };
        let bytes = img.encode().unwrap();
        assert_eq!(SplitImage::decode(&bytes, 4).unwrap(), img);
    }
}
