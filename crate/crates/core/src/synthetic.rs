//! Deterministic labeled traffic for tests and demos.
//!
//! Every flow is a TCP session between a unique client and a server on port
//! 443. Payload bytes are uniformly random except for a class motif written
//! at a class-specific payload offset; a fixed fraction of each flow's packets
//! (the noise rate, rounded down) carry no motif. Header fields other than the
//! endpoints are random and do not depend on the class.

use std::collections::BTreeMap;
use std::net::Ipv4Addr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{anonymize, write_pcap, AnonymizedPacket, Endpoint, FlowKey, FlowRecord, Protocol, RawPacketRecord, SelectionPolicy};
use crate::tokenizer::{tokenize_flows, TokenDataset};

const IPV4_HEADER: usize = 20;
const TCP_HEADER: usize = 20;
/// Offset of the payload inside an IPv4/TCP packet built here.
pub const PAYLOAD_OFFSET: usize = IPV4_HEADER + TCP_HEADER;
const SERVER_PORT: u16 = 443;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub class_count: usize,
    pub flows_per_class: usize,
    pub packets_min: usize,
    pub packets_max: usize,
    pub payload_min: usize,
    pub payload_max: usize,
    pub motif_len: usize,
    /// Motifs start somewhere in the first `motif_span` payload bytes.
    pub motif_span: usize,
    pub noise_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            class_count: 4,
            flows_per_class: 60,
            packets_min: 6,
            packets_max: 12,
            payload_min: 24,
            payload_max: 96,
            motif_len: 4,
            motif_span: 16,
            noise_rate: 0.1,
            seed: 0,
        }
    }
}

/// Where and what a class writes into its payloads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassPattern {
    pub motif: Vec<u8>,
    pub offset: usize,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("synthetic spec: {m}")));
        if self.class_count < 1 || self.flows_per_class < 1 {
            return bad("needs at least one class and one flow per class");
        }
        if self.packets_min < 1 || self.packets_min > self.packets_max {
            return bad("packet count range is empty");
        }
        if self.motif_len < 2 || self.motif_span < self.motif_len {
            return bad("motif must be at least 2 bytes and fit its span");
        }
        if self.payload_min < self.motif_span || self.payload_min > self.payload_max || self.payload_max > 1400 {
            return bad("payload length range must cover the motif span and stay under 1400");
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return bad("noise rate must be in [0, 1)");
        }
        Ok(())
    }

    pub fn total_flows(&self) -> usize {
        self.class_count * self.flows_per_class
    }

    /// Pairwise distinct motifs, one per class.
    pub fn patterns(&self) -> Vec<ClassPattern> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(u64::MAX);
        let slots = self.motif_span - self.motif_len + 1;
        let mut out: Vec<ClassPattern> = Vec::with_capacity(self.class_count);
        while out.len() < self.class_count {
            let motif: Vec<u8> = (0..self.motif_len).map(|_| rng.gen()).collect();
            if out.iter().any(|p| p.motif == motif) {
                continue;
            }
            let offset = (out.len() * self.motif_len) % slots;
            out.push(ClassPattern { motif, offset });
        }
        out
    }

    /// Number of motif-free packets in a flow of `packets`.
    pub fn noise_packets(&self, packets: usize) -> usize {
        (self.noise_rate * packets as f64).floor() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticPacket {
    pub from_client: bool,
    /// Complete IPv4 packet.
    pub ip: Vec<u8>,
    pub has_motif: bool,
    pub ts_usec: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticFlow {
    pub label: u32,
    pub client: Endpoint,
    pub server: Endpoint,
    pub packets: Vec<SyntheticPacket>,
}

impl SyntheticFlow {
    pub fn key(&self) -> FlowKey {
        FlowKey::canonical(self.client, self.server, Protocol::Tcp).0
    }

    /// The flow as ingest would produce it.
    pub fn to_record(&self) -> Result<FlowRecord> {
        let packets = self
            .packets
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let (src, dst) = if p.from_client { (self.client, self.server) } else { (self.server, self.client) };
                let direction = FlowKey::canonical(src, dst, Protocol::Tcp).1;
                Ok(AnonymizedPacket { direction, bytes: anonymize(&p.ip)?, arrival_index: i })
            })
            .collect::<Result<_>>()?;
        Ok(FlowRecord { key: self.key(), packets, label: Some(self.label) })
    }
}

fn ipv4_checksum(header: &[u8]) -> u16 {
    let mut sum: u32 = header.chunks(2).map(|w| u32::from(u16::from_be_bytes([w[0], w[1]]))).sum();
    while sum > 0xffff {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    !(sum as u16)
}

fn tcp_packet(src: Endpoint, dst: Endpoint, seq: u32, ack: u32, payload: &[u8], rng: &mut ChaCha8Rng) -> Vec<u8> {
    let total = (PAYLOAD_OFFSET + payload.len()) as u16;
    let mut p = Vec::with_capacity(total as usize);
    p.extend_from_slice(&[0x45, 0x00]);
    p.extend_from_slice(&total.to_be_bytes());
    p.extend_from_slice(&rng.gen::<u16>().to_be_bytes());
    p.extend_from_slice(&[0x40, 0x00, 64, 6, 0, 0]);
    p.extend_from_slice(&src.ip.octets());
    p.extend_from_slice(&dst.ip.octets());
    let csum = ipv4_checksum(&p[..IPV4_HEADER]);
    p[10..12].copy_from_slice(&csum.to_be_bytes());
    p.extend_from_slice(&src.port.to_be_bytes());
    p.extend_from_slice(&dst.port.to_be_bytes());
    p.extend_from_slice(&seq.to_be_bytes());
    p.extend_from_slice(&ack.to_be_bytes());
    p.extend_from_slice(&[0x50, 0x18]);
    p.extend_from_slice(&rng.gen::<u16>().to_be_bytes());
    p.extend_from_slice(&[0, 0, 0, 0]);
    p.extend_from_slice(payload);
    p
}

fn generate_flow(spec: &SyntheticSpec, patterns: &[ClassPattern], index: usize) -> SyntheticFlow {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let label = (index % spec.class_count) as u32;
    let pattern = &patterns[label as usize];
    let client = Endpoint { ip: Ipv4Addr::from(0x0a00_0001u32 + index as u32), port: rng.gen_range(32768..61000) };
    let server = Endpoint { ip: Ipv4Addr::new(172, 16, (index >> 8) as u8, index as u8), port: SERVER_PORT };
    let count = rng.gen_range(spec.packets_min..=spec.packets_max);
    let noisy: Vec<usize> = sample(&mut rng, count, spec.noise_packets(count)).into_vec();
    let mut seq = [rng.gen::<u32>(), rng.gen::<u32>()];
    let mut ts = rng.gen_range(0..10_000_000u64);
    let mut packets = Vec::with_capacity(count);
    for i in 0..count {
        let from_client = i == 0 || rng.gen_bool(0.5);
        let len = rng.gen_range(spec.payload_min..=spec.payload_max);
        let mut payload: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
        let has_motif = !noisy.contains(&i);
        if has_motif {
            payload[pattern.offset..pattern.offset + pattern.motif.len()].copy_from_slice(&pattern.motif);
        }
        let (s, d, dir) = if from_client { (client, server, 0) } else { (server, client, 1) };
        let ip = tcp_packet(s, d, seq[dir], seq[1 - dir], &payload, &mut rng);
        seq[dir] = seq[dir].wrapping_add(len as u32);
        packets.push(SyntheticPacket { from_client, ip, has_motif, ts_usec: ts });
        ts += rng.gen_range(1..50_000);
    }
    SyntheticFlow { label, client, server, packets }
}

/// All flows of the spec; flow `i` belongs to class `i % class_count`.
pub fn generate_flows(spec: &SyntheticSpec) -> Result<Vec<SyntheticFlow>> {
    spec.validate()?;
    let patterns = spec.patterns();
    Ok((0..spec.total_flows()).map(|i| generate_flow(spec, &patterns, i)).collect())
}

/// A classic pcap of all flows interleaved by timestamp, and the flow labels.
pub fn generate_pcap(spec: &SyntheticSpec) -> Result<(Vec<u8>, BTreeMap<FlowKey, u32>)> {
    let flows = generate_flows(spec)?;
    let mut events: Vec<(u64, usize, usize)> = flows
        .iter()
        .enumerate()
        .flat_map(|(f, flow)| flow.packets.iter().enumerate().map(move |(p, pk)| (pk.ts_usec, f, p)))
        .collect();
    events.sort_unstable();
    let records: Vec<RawPacketRecord> = events
        .iter()
        .map(|&(ts, f, p)| {
            let mut frame = Vec::with_capacity(14 + flows[f].packets[p].ip.len());
            frame.extend_from_slice(&[0x02, 0, 0, 0, 0, 0x02, 0x02, 0, 0, 0, 0, 0x01, 0x08, 0x00]);
            frame.extend_from_slice(&flows[f].packets[p].ip);
            RawPacketRecord { ts_sec: (ts / 1_000_000) as u32, ts_usec: (ts % 1_000_000) as u32, original_len: frame.len() as u32, captured: frame }
        })
        .collect();
    let labels = flows.iter().map(|f| (f.key(), f.label)).collect();
    Ok((write_pcap(&records, 65_535), labels))
}

/// Token grids for every flow, built without going through a capture file.
pub fn generate_token_dataset(spec: &SyntheticSpec, policy: SelectionPolicy, len: usize) -> Result<TokenDataset> {
    let records = generate_flows(spec)?.iter().map(SyntheticFlow::to_record).collect::<Result<Vec<_>>>()?;
    tokenize_flows(&records, policy, len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{parse_pcap, segment_flows};

    #[test]
    fn patterns_are_distinct_and_fit() {
        let spec = SyntheticSpec { class_count: 9, ..Default::default() };
        let pats = spec.patterns();
        for (i, a) in pats.iter().enumerate() {
            assert!(a.offset + a.motif.len() <= spec.motif_span);
            for b in &pats[i + 1..] {
                assert_ne!(a.motif, b.motif);
            }
        }
        assert_eq!(SyntheticSpec::default().patterns().iter().map(|p| p.offset).collect::<Vec<_>>(), vec![0, 4, 8, 12]);
    }

    #[test]
    fn pcap_is_seeded_and_ingestible() {
        let spec = SyntheticSpec { class_count: 2, flows_per_class: 10, ..Default::default() };
        let (a, labels) = generate_pcap(&spec).unwrap();
        assert_eq!(a, generate_pcap(&spec).unwrap().0);
        assert_ne!(a, generate_pcap(&SyntheticSpec { seed: 1, ..spec.clone() }).unwrap().0);
        let seg = segment_flows(&parse_pcap(&a).unwrap());
        assert_eq!(seg.flows.len(), 20);
        assert_eq!(seg.stats.dropped(), 0);
        for f in &seg.flows {
            assert!(labels.contains_key(&f.key));
        }
    }

    #[test]
    fn motif_coverage_meets_noise_bound() {
        let spec = SyntheticSpec { noise_rate: 0.3, ..Default::default() };
        let pats = spec.patterns();
        for flow in generate_flows(&spec).unwrap() {
            let p = &pats[flow.label as usize];
            let at = PAYLOAD_OFFSET + p.offset;
            let hits = flow.packets.iter().filter(|pk| pk.ip[at..at + p.motif.len()] == p.motif[..]).count();
            assert!(hits as f64 >= (1.0 - spec.noise_rate) * flow.packets.len() as f64 - 1e-9);
        }
    }

    #[test]
    fn checksum_of_valid_header_is_zero() {
        let flows = generate_flows(&SyntheticSpec { flows_per_class: 1, ..Default::default() }).unwrap();
        assert_eq!(ipv4_checksum(&flows[0].packets[0].ip[..20]), 0);
    }
}
