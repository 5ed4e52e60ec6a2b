//! Capture ingestion: classic pcap parsing, bidirectional session grouping,
//! endpoint anonymization and per-flow packet selection.

mod anonymize;
mod flow;
mod interchange;
mod labels;
mod pcap;
mod select;

pub use anonymize::anonymize;
pub use flow::{
    segment_flows, AnonymizedPacket, Direction, Endpoint, FlowKey, FlowRecord, Protocol,
    SegmentStats, Segmentation,
};
pub use interchange::{parse_hex_flows, read_hex_flows, write_hex_flows, HexFlow};
pub use labels::{apply_labels, parse_label_file, read_label_file, write_label_file};
pub use pcap::{parse_pcap, write_pcap, RawPacketRecord, LINKTYPE_ETHERNET};
pub use select::{select_packets, SelectionPolicy};
