//! Leaf pages and leaf-groups, in memory and in their on-disk encoding.
//!
//! A leaf-group is the unit of I/O: up to six internal nodes, each with up to
//! six leaves, serialized back to back so that one read fetches all of it.
//!
//! ```text
//! group header (little-endian)
//!   magic          u32   "NVLG"
//!   version        u16
//!   node_count     u8
//!   flags          u8
//!   total_len      u32   bytes, header included
//!   crc32          u32   over every other byte of the group
//!   group_id       u64
//!   id_epoch       u32   high 24 bits shared by every id in the group
//!   generation     u32
//!   line_seed      u64
//!   node partition spec
//!   per node: leaf partition spec, leaf_count u8
//! leaves, node-major
//!   leaf header (16 bytes): count u16, flags u16, line_ref u32, lo f32, hi f32
//!   entries (7 bytes): id low 40 bits, quantized position u16
//! ```
//!
//! A spec is encoded as `strategy u8, n u8, n boundaries f64, min f64, max f64`.

use crate::error::{corrupt, Error, Result};
use crate::geometry::{derive_seed, make_line, PartitionSpec, PartitionStrategy, ProjectionLine};

pub const PAGE_SIZE: usize = 4096;
pub const LEAF_HEADER_SIZE: usize = 16;
pub const ENTRY_SIZE: usize = 7;
/// floor((4096 - 16) / 7)
pub const LEAF_CAPACITY: usize = (PAGE_SIZE - LEAF_HEADER_SIZE) / ENTRY_SIZE;
pub const MAX_NODES: usize = 6;
pub const MAX_LEAVES_PER_NODE: usize = 6;
pub const MAX_LEAVES: usize = MAX_NODES * MAX_LEAVES_PER_NODE;

pub const GROUP_MAGIC: u32 = u32::from_le_bytes(*b"NVLG");
pub const GROUP_VERSION: u16 = 1;
const GROUP_FIXED_HEADER: usize = 40;

pub const ID_LOW_BITS: u32 = 40;
const ID_LOW_MASK: u64 = (1 << ID_LOW_BITS) - 1;
const QUANT_MAX: f64 = u16::MAX as f64;

pub fn id_epoch(id: u64) -> u32 {
    (id >> ID_LOW_BITS) as u32
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LeafEntry {
    pub id: u64,
    /// Linear quantization of the final-line projection over the leaf range.
    pub pos: u16,
}

const RESCALE_BELOW: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Leaf {
    pub line_ref: u32,
    pub flags: u16,
    pub lo: f32,
    pub hi: f32,
    /// Sorted by `pos`; equal positions keep insertion order.
    pub entries: Vec<LeafEntry>,
}

impl Leaf {
    pub fn empty(line_ref: u32) -> Self {
        Self {
            line_ref,
            flags: 0,
            lo: 0.0,
            hi: 0.0,
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() >= LEAF_CAPACITY
    }

    pub fn fill(&self) -> f64 {
        self.entries.len() as f64 / LEAF_CAPACITY as f64
    }

    /// Monotone map from a projected value to a 16-bit position.
    pub fn quantize(&self, value: f64) -> u16 {
        let (lo, hi) = (self.lo as f64, self.hi as f64);
        if hi <= lo {
            return if value < lo {
                0
            } else if value > lo {
                u16::MAX
            } else {
                u16::MAX / 2
            };
        }
        let scaled = ((value - lo) / (hi - lo) * QUANT_MAX).round();
        scaled.clamp(0.0, QUANT_MAX) as u16
    }

    /// Width of one quantization step in projection units.
    pub fn step(&self) -> f64 {
        let span = self.hi as f64 - self.lo as f64;
        if span > 0.0 {
            span / QUANT_MAX
        } else {
            1.0
        }
    }

    /// Inserts `id` at projected `value`. A leaf with few entries first widens
    /// its quantization range if `value` would be clamped to an end position;
    /// fuller leaves clamp, since re-quantizing shifts existing positions.
    pub fn insert_value(&mut self, id: u64, value: f64) {
        if self.entries.is_empty() {
            self.lo = value as f32;
            self.hi = value as f32;
        } else {
            let (lo, hi) = (self.lo as f64, self.hi as f64);
            let half = self.step() / 2.0;
            if self.entries.len() < RESCALE_BELOW && (value < lo - half || value > hi + half) {
                let margin = (hi.max(value) - lo.min(value)) / 8.0;
                let nlo = if value < lo { value - margin } else { lo };
                let nhi = if value > hi { value + margin } else { hi };
                self.rescale(nlo as f32, nhi as f32);
            }
        }
        let pos = self.quantize(value);
        self.insert(LeafEntry { id, pos });
    }

    /// Value a position stands for.
    fn value_at(&self, pos: u16) -> f64 {
        if self.hi <= self.lo {
            self.lo as f64
        } else {
            self.lo as f64 + pos as f64 * self.step()
        }
    }

    fn rescale(&mut self, lo: f32, hi: f32) {
        let old: Vec<f64> = self.entries.iter().map(|e| self.value_at(e.pos)).collect();
        self.lo = lo;
        self.hi = hi;
        for (e, v) in self.entries.iter_mut().zip(old) {
            let (lo, hi) = (self.lo as f64, self.hi as f64);
            e.pos = if hi <= lo {
                u16::MAX / 2
            } else {
                ((v - lo) / (hi - lo) * QUANT_MAX)
                    .round()
                    .clamp(0.0, QUANT_MAX) as u16
            };
        }
    }

    /// Inserts after any entry with the same position.
    pub fn insert(&mut self, entry: LeafEntry) {
        let at = self.entries.partition_point(|e| e.pos <= entry.pos);
        self.entries.insert(at, entry);
    }

    pub fn remove(&mut self, id: u64) -> bool {
        match self.entries.iter().position(|e| e.id == id) {
            Some(i) => {
                self.entries.remove(i);
                true
            }
            None => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupNode {
    /// Partitions the node's projection line into its leaves.
    pub spec: PartitionSpec,
    pub leaves: Vec<Leaf>,
}

/// Projection lines of one group, regenerated from the group's line seed.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupLines {
    pub node_line: ProjectionLine,
    pub leaf_lines: Vec<ProjectionLine>,
    pub final_lines: Vec<Vec<ProjectionLine>>,
}

/// Seed tags for the lines inside a group.
pub fn node_line_seed(line_seed: u64) -> u64 {
    derive_seed(line_seed, 0)
}

pub fn leaf_line_seed(line_seed: u64, node: usize) -> u64 {
    derive_seed(line_seed, 1 + node as u64)
}

pub fn final_line_seed(line_seed: u64, line_ref: u32) -> u64 {
    derive_seed(line_seed, 16 + line_ref as u64)
}

pub fn line_ref(node: usize, leaf: usize) -> u32 {
    (node * MAX_LEAVES_PER_NODE + leaf) as u32
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeafGroup {
    pub id: u64,
    pub epoch: u32,
    pub generation: u32,
    pub line_seed: u64,
    /// Partitions the group line into internal nodes.
    pub spec: PartitionSpec,
    pub nodes: Vec<GroupNode>,
    pub lines: GroupLines,
}

impl LeafGroup {
    pub fn new(
        id: u64,
        epoch: u32,
        generation: u32,
        line_seed: u64,
        spec: PartitionSpec,
        nodes: Vec<GroupNode>,
        dim: usize,
    ) -> Result<Self> {
        let lines = Self::make_lines(line_seed, &nodes, dim)?;
        let group = Self {
            id,
            epoch,
            generation,
            line_seed,
            spec,
            nodes,
            lines,
        };
        group.validate()?;
        Ok(group)
    }

    /// A group with one node holding one empty leaf.
    pub fn empty(id: u64, line_seed: u64, dim: usize) -> Result<Self> {
        let node = GroupNode {
            spec: PartitionSpec::single(0.0, 0.0),
            leaves: vec![Leaf::empty(line_ref(0, 0))],
        };
        Self::new(
            id,
            0,
            0,
            line_seed,
            PartitionSpec::single(0.0, 0.0),
            vec![node],
            dim,
        )
    }

    fn make_lines(line_seed: u64, nodes: &[GroupNode], dim: usize) -> Result<GroupLines> {
        let node_line = make_line(node_line_seed(line_seed), dim)?;
        let mut leaf_lines = Vec::with_capacity(nodes.len());
        let mut final_lines = Vec::with_capacity(nodes.len());
        for (i, node) in nodes.iter().enumerate() {
            leaf_lines.push(make_line(leaf_line_seed(line_seed, i), dim)?);
            let lines = node
                .leaves
                .iter()
                .map(|leaf| make_line(final_line_seed(line_seed, leaf.line_ref), dim))
                .collect::<Result<Vec<_>>>()?;
            final_lines.push(lines);
        }
        Ok(GroupLines {
            node_line,
            leaf_lines,
            final_lines,
        })
    }

    pub fn dim(&self) -> usize {
        self.lines.node_line.dim()
    }

    fn validate(&self) -> Result<()> {
        if self.nodes.is_empty() || self.nodes.len() > MAX_NODES {
            return Err(corrupt(format!(
                "group {} has {} nodes",
                self.id,
                self.nodes.len()
            )));
        }
        if self.spec.fanout() != self.nodes.len() {
            return Err(corrupt(format!(
                "group {} node spec does not match node count",
                self.id
            )));
        }
        for node in &self.nodes {
            if node.leaves.is_empty()
                || node.leaves.len() > MAX_LEAVES_PER_NODE
                || node.spec.fanout() != node.leaves.len()
            {
                return Err(corrupt(format!("group {} has a malformed node", self.id)));
            }
            if node.leaves.iter().any(|l| l.len() > LEAF_CAPACITY) {
                return Err(corrupt(format!("group {} has an overfull leaf", self.id)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.nodes
            .iter()
            .flat_map(|n| &n.leaves)
            .map(Leaf::len)
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().map(|n| n.leaves.len()).sum()
    }

    pub fn leaves(&self) -> impl Iterator<Item = &Leaf> {
        self.nodes.iter().flat_map(|n| n.leaves.iter())
    }

    pub fn ids(&self) -> Vec<u64> {
        self.leaves()
            .flat_map(|l| l.entries.iter().map(|e| e.id))
            .collect()
    }

    pub fn contains(&self, id: u64) -> bool {
        self.leaves().any(|l| l.entries.iter().any(|e| e.id == id))
    }

    /// Node and leaf that own `components` by interval membership.
    pub fn route(&self, components: &[f32]) -> (usize, usize) {
        let p0 = self.lines.node_line.project_unchecked(components);
        let node = self.spec.interval_of(p0);
        let p1 = self.lines.leaf_lines[node].project_unchecked(components);
        let leaf = self.nodes[node].spec.interval_of(p1);
        (node, leaf)
    }

    pub fn remove(&mut self, id: u64) -> bool {
        self.nodes
            .iter_mut()
            .flat_map(|n| n.leaves.iter_mut())
            .any(|leaf| leaf.remove(id))
    }

    /// Exact encoded size in bytes.
    pub fn encoded_len(&self) -> usize {
        let spec_len = |s: &PartitionSpec| 2 + 8 * s.boundaries().len() + 16;
        let mut len = GROUP_FIXED_HEADER + spec_len(&self.spec);
        for node in &self.nodes {
            len += spec_len(&node.spec) + 1;
            len += node
                .leaves
                .iter()
                .map(|l| LEAF_HEADER_SIZE + ENTRY_SIZE * l.len())
                .sum::<usize>();
        }
        len
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let total = self.encoded_len();
        let mut out = Vec::with_capacity(total);
        out.extend_from_slice(&GROUP_MAGIC.to_le_bytes());
        out.extend_from_slice(&GROUP_VERSION.to_le_bytes());
        out.push(self.nodes.len() as u8);
        out.push(0);
        out.extend_from_slice(&(total as u32).to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        out.extend_from_slice(&self.id.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.generation.to_le_bytes());
        out.extend_from_slice(&self.line_seed.to_le_bytes());
        encode_spec(&mut out, &self.spec);
        for node in &self.nodes {
            encode_spec(&mut out, &node.spec);
            out.push(node.leaves.len() as u8);
        }
        for leaf in self.leaves() {
            out.extend_from_slice(&(leaf.entries.len() as u16).to_le_bytes());
            out.extend_from_slice(&leaf.flags.to_le_bytes());
            out.extend_from_slice(&leaf.line_ref.to_le_bytes());
            out.extend_from_slice(&leaf.lo.to_le_bytes());
            out.extend_from_slice(&leaf.hi.to_le_bytes());
            for e in &leaf.entries {
                if id_epoch(e.id) != self.epoch {
                    return Err(Error::Integrity(format!(
                        "id {} does not belong to epoch {} of group {}",
                        e.id, self.epoch, self.id
                    )));
                }
                out.extend_from_slice(&(e.id & ID_LOW_MASK).to_le_bytes()[..5]);
                out.extend_from_slice(&e.pos.to_le_bytes());
            }
        }
        debug_assert_eq!(out.len(), total);
        let crc = group_crc(&out);
        out[12..16].copy_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    /// Decodes and verifies a group; any damage yields a corruption error.
    pub fn decode(bytes: &[u8], dim: usize) -> Result<Self> {
        if bytes.len() < GROUP_FIXED_HEADER {
            return Err(corrupt("leaf-group shorter than its header"));
        }
        let mut r = Reader::new(bytes);
        if r.u32()? != GROUP_MAGIC {
            return Err(corrupt("bad leaf-group magic"));
        }
        let version = r.u16()?;
        if version != GROUP_VERSION {
            return Err(corrupt(format!("unsupported leaf-group version {version}")));
        }
        let node_count = r.u8()? as usize;
        let _flags = r.u8()?;
        let total = r.u32()? as usize;
        if total != bytes.len() {
            return Err(corrupt(format!(
                "leaf-group length {total} != {}",
                bytes.len()
            )));
        }
        let crc = r.u32()?;
        if group_crc(bytes) != crc {
            return Err(corrupt("leaf-group checksum mismatch"));
        }
        let id = r.u64()?;
        let epoch = r.u32()?;
        let generation = r.u32()?;
        let line_seed = r.u64()?;
        let spec = decode_spec(&mut r)?;
        if node_count == 0 || node_count > MAX_NODES {
            return Err(corrupt("leaf-group node count out of range"));
        }
        let mut shapes = Vec::with_capacity(node_count);
        for _ in 0..node_count {
            let spec = decode_spec(&mut r)?;
            let leaves = r.u8()? as usize;
            shapes.push((spec, leaves));
        }
        let mut nodes = Vec::with_capacity(node_count);
        for (spec, leaf_count) in shapes {
            let mut leaves = Vec::with_capacity(leaf_count);
            for _ in 0..leaf_count {
                let count = r.u16()? as usize;
                let flags = r.u16()?;
                let line_ref = r.u32()?;
                let lo = r.f32()?;
                let hi = r.f32()?;
                if count > LEAF_CAPACITY {
                    return Err(corrupt("leaf entry count exceeds capacity"));
                }
                let mut entries = Vec::with_capacity(count);
                for _ in 0..count {
                    let raw = r.take(ENTRY_SIZE)?;
                    let mut low = [0u8; 8];
                    low[..5].copy_from_slice(&raw[..5]);
                    let id = u64::from_le_bytes(low) | ((epoch as u64) << ID_LOW_BITS);
                    let pos = u16::from_le_bytes([raw[5], raw[6]]);
                    entries.push(LeafEntry { id, pos });
                }
                leaves.push(Leaf {
                    line_ref,
                    flags,
                    lo,
                    hi,
                    entries,
                });
            }
            nodes.push(GroupNode { spec, leaves });
        }
        if r.remaining() != 0 {
            return Err(corrupt("trailing bytes after leaf-group"));
        }
        Self::new(id, epoch, generation, line_seed, spec, nodes, dim)
    }
}

fn group_crc(bytes: &[u8]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    h.update(&bytes[..12]);
    h.update(&bytes[16..]);
    h.finalize()
}

pub(crate) fn encode_spec(out: &mut Vec<u8>, spec: &PartitionSpec) {
    out.push(spec.strategy() as u8);
    out.push(spec.boundaries().len() as u8);
    for b in spec.boundaries() {
        out.extend_from_slice(&b.to_le_bytes());
    }
    out.extend_from_slice(&spec.min().to_le_bytes());
    out.extend_from_slice(&spec.max().to_le_bytes());
}

pub(crate) fn decode_spec(r: &mut Reader<'_>) -> Result<PartitionSpec> {
    let strategy = PartitionStrategy::from_wire(r.u8()?)
        .ok_or_else(|| corrupt("unknown partition strategy"))?;
    let n = r.u8()? as usize;
    let mut boundaries = Vec::with_capacity(n);
    for _ in 0..n {
        boundaries.push(r.f64()?);
    }
    let min = r.f64()?;
    let max = r.f64()?;
    PartitionSpec::from_parts(boundaries, strategy, min, max)
        .map_err(|e| corrupt(format!("bad partition spec: {e}")))
}

/// Little-endian cursor over a byte slice that reports truncation as corruption.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(corrupt("unexpected end of data"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
