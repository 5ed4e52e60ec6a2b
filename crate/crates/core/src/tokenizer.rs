//! Bigram tokenization of packet bytes and assembly of per-flow token grids.
//!
//! Every pair of consecutive bytes `(b1, b2)` becomes the content id
//! `256 * b1 + b2`, so the content vocabulary is exactly `0..65536`. The three
//! special tokens are appended after it.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::ingest::{select_packets, FlowRecord, SelectionPolicy};

pub const CONTENT_VOCAB: u32 = 65_536;
pub const CLS: u32 = 65_536;
pub const PAD: u32 = 65_537;
pub const MASK: u32 = 65_538;
pub const VOCAB_SIZE: usize = 65_539;

pub fn is_content(id: u32) -> bool {
    id < CONTENT_VOCAB
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedPacket {
    pub ids: Vec<u32>,
    pub content_len: usize,
}

/// `[CLS]` followed by overlapping bigrams of `bytes`, truncated to `len - 1`
/// content tokens and padded with `[PAD]` to exactly `len`.
pub fn encode_packet(bytes: &[u8], len: usize) -> Result<TokenizedPacket> {
    if bytes.is_empty() {
        return Err(Error::EmptyInput);
    }
    if len < 2 {
        return Err(Error::InvalidConfig(format!("packet length {len} < 2")));
    }
    let mut ids = Vec::with_capacity(len);
    ids.push(CLS);
    ids.extend(
        bytes
            .windows(2)
            .take(len - 1)
            .map(|w| 256 * u32::from(w[0]) + u32::from(w[1])),
    );
    let content_len = ids.len() - 1;
    ids.resize(len, PAD);
    Ok(TokenizedPacket { ids, content_len })
}

/// Token ids for one flow, `packets x len`, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    packets: usize,
    len: usize,
    ids: Vec<u32>,
    /// Number of leading rows that came from real packets.
    real_rows: usize,
}

impl TokenGrid {
    pub fn from_ids(packets: usize, len: usize, ids: Vec<u32>, real_rows: usize) -> Result<Self> {
        if ids.len() != packets * len || real_rows > packets {
            return Err(Error::ShapeMismatch(format!(
                "{} ids / {real_rows} real rows for a {packets}x{len} grid",
                ids.len()
            )));
        }
        Ok(TokenGrid { packets, len, ids, real_rows })
    }

    pub fn packets(&self) -> usize {
        self.packets
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn real_rows(&self) -> usize {
        self.real_rows
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn ids_mut(&mut self) -> &mut [u32] {
        &mut self.ids
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.ids[i * self.len..(i + 1) * self.len]
    }

    pub fn get(&self, packet: usize, pos: usize) -> u32 {
        self.ids[packet * self.len + pos]
    }

    pub fn content_tokens(&self) -> usize {
        self.ids.iter().filter(|&&id| is_content(id)).count()
    }

    /// Builds a grid of `rows.len()` rows from the given source rows, padding
    /// up to `packets` rows. `real_rows` counts source rows that were real.
    pub fn gather_rows(&self, rows: &[usize], packets: usize) -> Result<TokenGrid> {
        if rows.len() > packets {
            return Err(Error::TooManyPackets { got: rows.len(), max: packets });
        }
        let mut ids = Vec::with_capacity(packets * self.len);
        for &r in rows {
            ids.extend_from_slice(self.row(r));
        }
        for _ in rows.len()..packets {
            push_padding_row(&mut ids, self.len);
        }
        let real = rows.iter().filter(|&&r| r < self.real_rows).count();
        Ok(TokenGrid { packets, len: self.len, ids, real_rows: real })
    }

    /// Reorders rows so that output row `i` is input row `order[i]`.
    pub fn permute_rows(&self, order: &[usize]) -> TokenGrid {
        debug_assert_eq!(order.len(), self.packets);
        let mut ids = Vec::with_capacity(self.ids.len());
        for &r in order {
            ids.extend_from_slice(self.row(r));
        }
        TokenGrid { packets: self.packets, len: self.len, ids, real_rows: self.real_rows }
    }
}

fn push_padding_row(ids: &mut Vec<u32>, len: usize) {
    ids.push(CLS);
    ids.extend(std::iter::repeat_n(PAD, len - 1));
}

/// Stacks up to `packets` encoded packets; missing rows become `[CLS, PAD, ...]`.
pub fn build_token_grid<B: AsRef<[u8]>>(rows: &[B], packets: usize, len: usize) -> Result<TokenGrid> {
    if rows.is_empty() {
        return Err(Error::EmptyInput);
    }
    if rows.len() > packets {
        return Err(Error::TooManyPackets { got: rows.len(), max: packets });
    }
    let mut ids = Vec::with_capacity(packets * len);
    for r in rows {
        ids.extend(encode_packet(r.as_ref(), len)?.ids);
    }
    for _ in rows.len()..packets {
        push_padding_row(&mut ids, len);
    }
    Ok(TokenGrid { packets, len, ids, real_rows: rows.len() })
}

/// Labeled token grids sharing one `(packets, len)` shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenDataset {
    pub packets: usize,
    pub len: usize,
    pub records: Vec<DatasetRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetRecord {
    pub label: Option<u32>,
    pub grid: TokenGrid,
}

impl TokenDataset {
    pub fn new(packets: usize, len: usize) -> Self {
        TokenDataset { packets, len, records: Vec::new() }
    }

    pub fn push(&mut self, label: Option<u32>, grid: TokenGrid) -> Result<()> {
        if grid.packets() != self.packets || grid.len() != self.len {
            return Err(Error::ShapeMismatch(format!(
                "grid {}x{} in a {}x{} dataset",
                grid.packets(),
                grid.len(),
                self.packets,
                self.len
            )));
        }
        self.records.push(DatasetRecord { label, grid });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Number of classes implied by the largest label.
    pub fn class_count(&self) -> usize {
        self.records
            .iter()
            .filter_map(|r| r.label)
            .max()
            .map_or(0, |m| m as usize + 1)
    }

    /// Deterministic shuffled split; returns `(train, test)`.
    pub fn split(&self, test_fraction: f64, seed: u64) -> (TokenDataset, TokenDataset) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut order: Vec<usize> = (0..self.records.len()).collect();
        order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let n_test = ((self.records.len() as f64) * test_fraction).round() as usize;
        let mut test = TokenDataset::new(self.packets, self.len);
        let mut train = TokenDataset::new(self.packets, self.len);
        for (i, &r) in order.iter().enumerate() {
            let dst = if i < n_test { &mut test } else { &mut train };
            dst.records.push(self.records[r].clone());
        }
        (train, test)
    }

    /// Binary layout, all little-endian 32-bit: `packets, len, count`, then per
    /// record `label` (-1 when absent) followed by `packets * len` token ids.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&(self.packets as u32).to_le_bytes())?;
        w.write_all(&(self.len as u32).to_le_bytes())?;
        w.write_all(&(self.records.len() as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(4 * (1 + self.packets * self.len));
        for r in &self.records {
            buf.clear();
            let label = r.label.map_or(-1i32, |l| l as i32);
            buf.extend_from_slice(&label.to_le_bytes());
            for id in r.grid.ids() {
                buf.extend_from_slice(&id.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let word = |i: usize| -> Result<u32> {
            bytes
                .get(4 * i..4 * i + 4)
                .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .ok_or_else(|| Error::Dataset(format!("truncated at word {i}")))
        };
        let packets = word(0)? as usize;
        let len = word(1)? as usize;
        let count = word(2)? as usize;
        if packets == 0 || len < 2 {
            return Err(Error::Dataset(format!("invalid grid shape {packets}x{len}")));
        }
        let per = 1 + packets * len;
        let expected = 4 * (3 + count * per);
        if bytes.len() != expected {
            return Err(Error::Dataset(format!(
                "expected {expected} bytes for {count} records, found {}",
                bytes.len()
            )));
        }
        let mut ds = TokenDataset::new(packets, len);
        for rec in 0..count {
            let base = 3 + rec * per;
            let label = word(base)? as i32;
            let label = match label {
                -1 => None,
                l if l >= 0 => Some(l as u32),
                l => return Err(Error::Dataset(format!("record {rec} has label {l}"))),
            };
            let ids = (0..packets * len)
                .map(|i| word(base + 1 + i))
                .collect::<Result<Vec<_>>>()?;
            if let Some(&bad) = ids.iter().find(|&&id| id as usize >= VOCAB_SIZE) {
                return Err(Error::IdOutOfRange { id: bad, vocab_size: VOCAB_SIZE });
            }
            let real_rows = (0..packets)
                .take_while(|&p| ids[p * len + 1] != PAD)
                .count();
            ds.records.push(DatasetRecord { label, grid: TokenGrid::from_ids(packets, len, ids, real_rows)? });
        }
        Ok(ds)
    }
}

/// Selects packets from every flow and tokenizes them into a dataset of
/// `policy.count()` rows of `len` tokens. A random policy is reseeded per flow
/// with `seed + flow index`.
pub fn tokenize_flows(flows: &[FlowRecord], policy: SelectionPolicy, len: usize) -> Result<TokenDataset> {
    let packets = policy.count();
    let mut out = TokenDataset::new(packets, len);
    for (i, flow) in flows.iter().enumerate() {
        let policy = match policy {
            SelectionPolicy::RandomKofFirstM { seed, .. } => policy.reseeded(seed.wrapping_add(i as u64)),
            p => p,
        };
        let picked = select_packets(flow, policy)?;
        let rows: Vec<&[u8]> = picked.iter().map(|p| p.bytes.as_slice()).collect();
        out.push(flow.label, build_token_grid(&rows, packets, len)?)?;
    }
    Ok(out)
}
