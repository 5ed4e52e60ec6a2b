//! Line-oriented hex record format shared between preprocessing and training:
//!
//! ```text
//! <label or -1>\t<packet 0>\t<packet 1>...
//! ```
//!
//! where each packet is its bytes as two-digit lowercase hex separated by a
//! single space.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HexFlow {
    pub label: Option<u32>,
    pub packets: Vec<Vec<u8>>,
}

fn encode_packet(bytes: &[u8], out: &mut String) {
    for (i, b) in bytes.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{b:02x}");
    }
}

pub fn write_hex_flows<W: Write>(mut w: W, flows: &[HexFlow]) -> Result<()> {
    let mut line = String::new();
    for f in flows {
        line.clear();
        match f.label {
            Some(l) => {
                let _ = write!(line, "{l}");
            }
            None => line.push_str("-1"),
        }
        for p in &f.packets {
            line.push('\t');
            encode_packet(p, &mut line);
        }
        line.push('\n');
        w.write_all(line.as_bytes())?;
    }
    Ok(())
}

fn parse_line(line: &str, lineno: usize) -> Result<HexFlow> {
    let err = |reason: String| Error::Interchange { line: lineno, reason };
    let mut fields = line.split('\t');
    let label_field = fields.next().unwrap_or_default();
    let label: i64 = label_field
        .parse()
        .map_err(|_| err(format!("bad label {label_field:?}")))?;
    let label = match label {
        -1 => None,
        l if (0..=i64::from(u32::MAX)).contains(&l) => Some(l as u32),
        l => return Err(err(format!("label {l} out of range"))),
    };
    let packets = fields
        .map(|field| {
            field
                .split(' ')
                .map(|h| {
                    if h.len() != 2 || h.bytes().any(|c| c.is_ascii_uppercase()) {
                        return Err(err(format!("bad hex byte {h:?}")));
                    }
                    u8::from_str_radix(h, 16).map_err(|_| err(format!("bad hex byte {h:?}")))
                })
                .collect::<Result<Vec<u8>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HexFlow { label, packets })
}

pub fn read_hex_flows<R: BufRead>(r: R) -> Result<Vec<HexFlow>> {
    let mut flows = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        flows.push(parse_line(&line, i + 1)?);
    }
    Ok(flows)
}

pub fn parse_hex_flows(text: &str) -> Result<Vec<HexFlow>> {
    read_hex_flows(text.as_bytes())
}
