use crate::error::{Error, Result};

pub const LINKTYPE_ETHERNET: u32 = 1;

const MAGIC_MICROS: u32 = 0xA1B2_C3D4;
const MAGIC_NANOS: u32 = 0xA1B2_3C4D;
const GLOBAL_HEADER_LEN: usize = 24;
const RECORD_HEADER_LEN: usize = 16;

/// One captured link-layer frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawPacketRecord {
    pub ts_sec: u32,
    pub ts_usec: u32,
    pub captured: Vec<u8>,
    pub original_len: u32,
}

#[derive(Clone, Copy)]
enum Endian {
    Little,
    Big,
}

impl Endian {
    fn u32(self, b: &[u8]) -> u32 {
        let arr = [b[0], b[1], b[2], b[3]];
        match self {
            Endian::Little => u32::from_le_bytes(arr),
            Endian::Big => u32::from_be_bytes(arr),
        }
    }
}

/// Parses a classic libpcap capture (either byte order, micro- or nanosecond
/// timestamps). Timestamps are always reported in microseconds.
pub fn parse_pcap(bytes: &[u8]) -> Result<Vec<RawPacketRecord>> {
    if bytes.len() < GLOBAL_HEADER_LEN {
        return Err(Error::MalformedHeader(format!(
            "global header needs {GLOBAL_HEADER_LEN} bytes, got {}",
            bytes.len()
        )));
    }
    let le = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let (endian, nanos) = match le {
        MAGIC_MICROS => (Endian::Little, false),
        MAGIC_NANOS => (Endian::Little, true),
        m if m.swap_bytes() == MAGIC_MICROS => (Endian::Big, false),
        m if m.swap_bytes() == MAGIC_NANOS => (Endian::Big, true),
        m => return Err(Error::MalformedHeader(format!("bad magic {m:#010x}"))),
    };
    let snaplen = endian.u32(&bytes[16..20]) as usize;
    let link_type = endian.u32(&bytes[20..24]);
    if link_type != LINKTYPE_ETHERNET {
        return Err(Error::UnsupportedLinkType(link_type));
    }

    let mut records = Vec::new();
    let mut pos = GLOBAL_HEADER_LEN;
    while pos < bytes.len() {
        let index = records.len();
        let remaining = bytes.len() - pos;
        if remaining < RECORD_HEADER_LEN {
            return Err(Error::TruncatedRecord {
                index,
                claimed: RECORD_HEADER_LEN,
                remaining,
            });
        }
        let hdr = &bytes[pos..pos + RECORD_HEADER_LEN];
        let ts_sec = endian.u32(&hdr[0..4]);
        let frac = endian.u32(&hdr[4..8]);
        let incl = endian.u32(&hdr[8..12]) as usize;
        let orig = endian.u32(&hdr[12..16]);
        pos += RECORD_HEADER_LEN;

        if incl > bytes.len() - pos {
            return Err(Error::TruncatedRecord {
                index,
                claimed: incl,
                remaining: bytes.len() - pos,
            });
        }
        if incl > orig as usize {
            return Err(Error::MalformedRecord {
                index,
                reason: format!("captured length {incl} exceeds original length {orig}"),
            });
        }
        if snaplen > 0 && incl > snaplen {
            return Err(Error::MalformedRecord {
                index,
                reason: format!("captured length {incl} exceeds snap length {snaplen}"),
            });
        }
        records.push(RawPacketRecord {
            ts_sec,
            ts_usec: if nanos { frac / 1000 } else { frac },
            captured: bytes[pos..pos + incl].to_vec(),
            original_len: orig,
        });
        pos += incl;
    }
    Ok(records)
}

/// Serializes records as a little-endian, microsecond-resolution Ethernet capture.
pub fn write_pcap(records: &[RawPacketRecord], snaplen: u32) -> Vec<u8> {
    let body: usize = records.iter().map(|r| RECORD_HEADER_LEN + r.captured.len()).sum();
    let mut out = Vec::with_capacity(GLOBAL_HEADER_LEN + body);
    out.extend_from_slice(&MAGIC_MICROS.to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&4u16.to_le_bytes());
    out.extend_from_slice(&0i32.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&snaplen.to_le_bytes());
    out.extend_from_slice(&LINKTYPE_ETHERNET.to_le_bytes());
    for r in records {
        out.extend_from_slice(&r.ts_sec.to_le_bytes());
        out.extend_from_slice(&r.ts_usec.to_le_bytes());
        out.extend_from_slice(&(r.captured.len() as u32).to_le_bytes());
        out.extend_from_slice(&r.original_len.to_le_bytes());
        out.extend_from_slice(&r.captured);
    }
    out
}
