use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

use super::anonymize::{anonymize, ipv4_transport_offset, PROTO_TCP, PROTO_UDP};
use super::pcap::RawPacketRecord;

const ETHERNET_HEADER_LEN: usize = 14;
const ETHERTYPE_IPV4: u16 = 0x0800;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Protocol {
    Tcp,
    Udp,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Tcp => "tcp",
            Protocol::Udp => "udp",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Endpoint {
    pub ip: Ipv4Addr,
    pub port: u16,
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.ip, self.port)
    }
}

/// Direction-invariant session key: `a <= b` always holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FlowKey {
    pub a: Endpoint,
    pub b: Endpoint,
    pub protocol: Protocol,
}

impl FlowKey {
    /// Builds the canonical key for a packet travelling `src -> dst`, and the
    /// direction of that packet relative to the key.
    pub fn canonical(src: Endpoint, dst: Endpoint, protocol: Protocol) -> (Self, Direction) {
        if src <= dst {
            (FlowKey { a: src, b: dst, protocol }, Direction::AtoB)
        } else {
            (FlowKey { a: dst, b: src, protocol }, Direction::BtoA)
        }
    }
}

impl fmt::Display for FlowKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.protocol, self.a, self.b)
    }
}

impl FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "tcp" => Ok(Protocol::Tcp),
            "udp" => Ok(Protocol::Udp),
            other => Err(format!("unknown protocol {other:?}")),
        }
    }
}

impl FromStr for Endpoint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (ip, port) = s.rsplit_once(':').ok_or_else(|| format!("endpoint {s:?} lacks a port"))?;
        Ok(Endpoint {
            ip: ip.parse().map_err(|e| format!("{ip:?}: {e}"))?,
            port: port.parse().map_err(|e| format!("{port:?}: {e}"))?,
        })
    }
}

/// Parses the `Display` form `proto a b`, canonicalizing the endpoint order.
impl FromStr for FlowKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let mut parts = s.split_whitespace();
        let (Some(p), Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
            return Err(format!("flow key {s:?} needs protocol and two endpoints"));
        };
        Ok(FlowKey::canonical(a.parse()?, b.parse()?, p.parse()?).0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    AtoB,
    BtoA,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnonymizedPacket {
    pub direction: Direction,
    /// IP header onward, addresses and ports zeroed.
    pub bytes: Vec<u8>,
    pub arrival_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowRecord {
    pub key: FlowKey,
    pub packets: Vec<AnonymizedPacket>,
    pub label: Option<u32>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SegmentStats {
    pub admitted: usize,
    pub non_ipv4: usize,
    pub non_tcp_udp: usize,
    pub malformed: usize,
}

impl SegmentStats {
    pub fn dropped(&self) -> usize {
        self.non_ipv4 + self.non_tcp_udp + self.malformed
    }
}

#[derive(Debug, Clone, Default)]
pub struct Segmentation {
    pub flows: Vec<FlowRecord>,
    pub stats: SegmentStats,
}

enum Admission {
    Packet {
        key: FlowKey,
        direction: Direction,
        bytes: Vec<u8>,
    },
    NonIpv4,
    NonTcpUdp,
    Malformed,
}

fn admit(frame: &[u8]) -> Admission {
    if frame.len() < ETHERNET_HEADER_LEN {
        return Admission::Malformed;
    }
    let ethertype = u16::from_be_bytes([frame[12], frame[13]]);
    if ethertype != ETHERTYPE_IPV4 {
        return Admission::NonIpv4;
    }
    let ip = &frame[ETHERNET_HEADER_LEN..];
    if ip.len() < 20 || ip[0] >> 4 != 4 {
        return Admission::Malformed;
    }
    let protocol = match ip[9] {
        PROTO_TCP => Protocol::Tcp,
        PROTO_UDP => Protocol::Udp,
        _ => return Admission::NonTcpUdp,
    };
    // non-first fragments carry no transport header
    let frag_offset = u16::from_be_bytes([ip[6], ip[7]]) & 0x1fff;
    if frag_offset != 0 {
        return Admission::Malformed;
    }
    // drop Ethernet trailer padding beyond the IP total length
    let total = usize::from(u16::from_be_bytes([ip[2], ip[3]]));
    let ip = if total >= 20 && total < ip.len() { &ip[..total] } else { ip };
    let ihl = match ipv4_transport_offset(ip) {
        Ok(ihl) => ihl,
        Err(_) => return Admission::Malformed,
    };
    let src = Endpoint {
        ip: Ipv4Addr::new(ip[12], ip[13], ip[14], ip[15]),
        port: u16::from_be_bytes([ip[ihl], ip[ihl + 1]]),
    };
    let dst = Endpoint {
        ip: Ipv4Addr::new(ip[16], ip[17], ip[18], ip[19]),
        port: u16::from_be_bytes([ip[ihl + 2], ip[ihl + 3]]),
    };
    let (key, direction) = FlowKey::canonical(src, dst, protocol);
    match anonymize(ip) {
        Ok(bytes) => Admission::Packet { key, direction, bytes },
        Err(_) => Admission::Malformed,
    }
}

/// Groups Ethernet/IPv4/TCP-UDP frames into bidirectional sessions over the
/// whole capture. Flows are ordered by their first packet; packets within a
/// flow keep capture order. Everything else is counted and skipped.
pub fn segment_flows(packets: &[RawPacketRecord]) -> Segmentation {
    let mut index: HashMap<FlowKey, usize> = HashMap::new();
    let mut seg = Segmentation::default();
    for rec in packets {
        match admit(&rec.captured) {
            Admission::Packet { key, direction, bytes } => {
                seg.stats.admitted += 1;
                let slot = *index.entry(key).or_insert_with(|| {
                    seg.flows.push(FlowRecord { key, packets: Vec::new(), label: None });
                    seg.flows.len() - 1
                });
                let flow = &mut seg.flows[slot];
                let arrival_index = flow.packets.len();
                flow.packets.push(AnonymizedPacket { direction, bytes, arrival_index });
            }
            Admission::NonIpv4 => seg.stats.non_ipv4 += 1,
            Admission::NonTcpUdp => seg.stats.non_tcp_udp += 1,
            Admission::Malformed => seg.stats.malformed += 1,
        }
    }
    seg
}
