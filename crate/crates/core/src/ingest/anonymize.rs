use crate::error::{Error, Result};

pub(crate) const PROTO_TCP: u8 = 6;
pub(crate) const PROTO_UDP: u8 = 17;

/// Checks that `bytes` starts with an IPv4 header followed by at least the
/// port fields of a TCP or UDP header. Returns the IP header length.
pub(crate) fn ipv4_transport_offset(bytes: &[u8]) -> Result<usize> {
    if bytes.len() < 20 {
        return Err(Error::MalformedPacket(format!(
            "IPv4 header needs 20 bytes, got {}",
            bytes.len()
        )));
    }
    let version = bytes[0] >> 4;
    if version != 4 {
        return Err(Error::MalformedPacket(format!("IP version {version}, expected 4")));
    }
    let ihl = usize::from(bytes[0] & 0x0f) * 4;
    if ihl < 20 {
        return Err(Error::MalformedPacket(format!("IHL of {ihl} bytes")));
    }
    let proto = bytes[9];
    if proto != PROTO_TCP && proto != PROTO_UDP {
        return Err(Error::MalformedPacket(format!("transport protocol {proto}")));
    }
    if bytes.len() < ihl + 4 {
        return Err(Error::MalformedPacket(format!(
            "transport ports missing: {} bytes after a {ihl}-byte IP header",
            bytes.len().saturating_sub(ihl)
        )));
    }
    Ok(ihl)
}

/// Zeroes source/destination addresses and ports. Checksums are left as they were.
pub fn anonymize(packet: &[u8]) -> Result<Vec<u8>> {
    let ihl = ipv4_transport_offset(packet)?;
    let mut out = packet.to_vec();
    out[12..20].fill(0);
    out[ihl..ihl + 4].fill(0);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tcp_packet() -> Vec<u8> {
        let mut p = vec![
            0x45, 0x00, 0x00, 0x2c, 0x12, 0x34, 0x40, 0x00, 0x40, 0x06, 0xab, 0xcd,
            192, 168, 1, 5, // src
            10, 0, 0, 1, // dst
        ];
        p.extend_from_slice(&4431u16.to_be_bytes());
        p.extend_from_slice(&443u16.to_be_bytes());
        p.extend_from_slice(&[0x11; 16]);
        p.extend_from_slice(b"data");
        p
    }

    #[test]
    fn zeroes_addresses_and_ports_only() {
        let p = tcp_packet();
        let a = anonymize(&p).unwrap();
        assert_eq!(a.len(), p.len());
        assert_eq!(&a[12..24], &[0u8; 12]);
        assert_eq!(&a[..12], &p[..12]);
        assert_eq!(&a[24..], &p[24..]);
        // checksum untouched
        assert_eq!(&a[10..12], &[0xab, 0xcd]);
    }

    #[test]
    fn rejects_short_and_non_v4() {
        assert!(matches!(anonymize(&[0x45; 10]), Err(Error::MalformedPacket(_))));
        let mut v6 = tcp_packet();
        v6[0] = 0x60;
        assert!(matches!(anonymize(&v6), Err(Error::MalformedPacket(_))));
        let mut icmp = tcp_packet();
        icmp[9] = 1;
        assert!(anonymize(&icmp).is_err());
    }

    #[test]
    fn honours_ip_options() {
        let mut p = tcp_packet();
        p[0] = 0x46;
        p.splice(20..20, [1u8, 1, 1, 1]);
        let a = anonymize(&p).unwrap();
        assert_eq!(&a[20..24], &[1, 1, 1, 1]);
        assert_eq!(&a[24..28], &[0, 0, 0, 0]);
    }

    proptest! {
        #[test]
        fn idempotent_and_length_preserving(tail in proptest::collection::vec(any::<u8>(), 4..80),
                                            addrs in proptest::collection::vec(any::<u8>(), 8),
                                            udp in any::<bool>()) {
            let mut p = tcp_packet()[..12].to_vec();
            if udp { p[9] = PROTO_UDP; }
            p.extend_from_slice(&addrs);
            p.extend_from_slice(&tail);
            let once = anonymize(&p).unwrap();
            prop_assert_eq!(once.len(), p.len());
            prop_assert_eq!(anonymize(&once).unwrap(), once);
        }
    }
}
