//! Label files: one `protocol a_ip:port b_ip:port<TAB>class` line per flow.
//! Blank lines and lines starting with `#` are ignored.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use super::flow::{FlowKey, FlowRecord};
use crate::error::{Error, Result};

pub fn write_label_file<W: Write>(mut w: W, labels: &BTreeMap<FlowKey, u32>) -> Result<()> {
    for (key, label) in labels {
        writeln!(w, "{key}\t{label}")?;
    }
    Ok(())
}

pub fn read_label_file<R: BufRead>(r: R) -> Result<BTreeMap<FlowKey, u32>> {
    let mut out = BTreeMap::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |reason: String| Error::Interchange { line: i + 1, reason };
        let (key, label) = line.rsplit_once('\t').ok_or_else(|| bad("expected key<TAB>label".into()))?;
        let key: FlowKey = key.parse().map_err(bad)?;
        let label = label.trim().parse().map_err(|e| bad(format!("label: {e}")))?;
        if out.insert(key, label).is_some() {
            return Err(bad(format!("flow {key} labeled twice")));
        }
    }
    Ok(out)
}

pub fn parse_label_file(text: &str) -> Result<BTreeMap<FlowKey, u32>> {
    read_label_file(text.as_bytes())
}

/// Sets each flow's label from the map; returns how many flows had none.
pub fn apply_labels(flows: &mut [FlowRecord], labels: &BTreeMap<FlowKey, u32>) -> usize {
    let mut missing = 0;
    for f in flows {
        f.label = labels.get(&f.key).copied();
        missing += usize::from(f.label.is_none());
    }
    missing
}
