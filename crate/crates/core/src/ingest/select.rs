use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::flow::{AnonymizedPacket, FlowRecord};
use crate::error::{Error, Result};

/// Which packets of a flow feed the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectionPolicy {
    /// The first `k` packets (fine-tuning uses the first five).
    FirstK(usize),
    /// `k` packets sampled without replacement from the first `m`, returned
    /// in arrival order (pre-training uses five of the first ten).
    RandomKofFirstM { k: usize, m: usize, seed: u64 },
}

impl SelectionPolicy {
    pub fn count(&self) -> usize {
        match *self {
            SelectionPolicy::FirstK(k) => k,
            SelectionPolicy::RandomKofFirstM { k, .. } => k,
        }
    }

    /// Same policy with the seed replaced, used to give each flow its own draw.
    pub fn reseeded(self, seed: u64) -> Self {
        match self {
            SelectionPolicy::RandomKofFirstM { k, m, .. } => SelectionPolicy::RandomKofFirstM { k, m, seed },
            p => p,
        }
    }
}

/// `first:K` or `random:KofM`; the seed of a parsed random policy is zero.
impl FromStr for SelectionPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidPolicy(format!("{s:?} (expected first:K or random:KofM)"));
        let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
        match kind {
            "first" => Ok(SelectionPolicy::FirstK(rest.parse().map_err(|_| bad())?)),
            "random" => {
                let (k, m) = rest.split_once("of").ok_or_else(bad)?;
                let (k, m) = (k.parse().map_err(|_| bad())?, m.parse().map_err(|_| bad())?);
                if k > m {
                    return Err(Error::InvalidPolicy(format!("k = {k} exceeds m = {m}")));
                }
                Ok(SelectionPolicy::RandomKofFirstM { k, m, seed: 0 })
            }
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for SelectionPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            SelectionPolicy::FirstK(k) => write!(f, "first:{k}"),
            SelectionPolicy::RandomKofFirstM { k, m, .. } => write!(f, "random:{k}of{m}"),
        }
    }
}

pub fn select_packets(flow: &FlowRecord, policy: SelectionPolicy) -> Result<Vec<AnonymizedPacket>> {
    if flow.packets.is_empty() {
        return Err(Error::EmptyFlow);
    }
    match policy {
        SelectionPolicy::FirstK(k) => Ok(flow.packets.iter().take(k).cloned().collect()),
        SelectionPolicy::RandomKofFirstM { k, m, seed } => {
            if k > m {
                return Err(Error::InvalidPolicy(format!("k = {k} exceeds m = {m}")));
            }
            let pool = m.min(flow.packets.len());
            let amount = k.min(pool);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked = index::sample(&mut rng, pool, amount).into_vec();
            picked.sort_unstable();
            Ok(picked.into_iter().map(|i| flow.packets[i].clone()).collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{Direction, Endpoint, FlowKey, Protocol};
    use std::net::Ipv4Addr;

    fn flow(n: usize) -> FlowRecord {
        let ep = Endpoint { ip: Ipv4Addr::UNSPECIFIED, port: 0 };
        FlowRecord {
            key: FlowKey { a: ep, b: ep, protocol: Protocol::Tcp },
            packets: (0..n)
                .map(|i| AnonymizedPacket { direction: Direction::AtoB, bytes: vec![i as u8; 4], arrival_index: i })
                .collect(),
            label: None,
        }
    }

    fn arrivals(p: &[AnonymizedPacket]) -> Vec<usize> {
        p.iter().map(|p| p.arrival_index).collect()
    }

    #[test]
    fn first_k() {
        assert_eq!(arrivals(&select_packets(&flow(12), SelectionPolicy::FirstK(5)).unwrap()), vec![0, 1, 2, 3, 4]);
        assert_eq!(arrivals(&select_packets(&flow(3), SelectionPolicy::FirstK(5)).unwrap()), vec![0, 1, 2]);
    }

    #[test]
    fn random_k_of_first_m_is_seeded_sorted_and_bounded() {
        let pol = SelectionPolicy::RandomKofFirstM { k: 5, m: 10, seed: 7 };
        let a = arrivals(&select_packets(&flow(12), pol).unwrap());
        let b = arrivals(&select_packets(&flow(12), pol).unwrap());
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert!(a.iter().all(|&i| i < 10));
        assert_eq!(arrivals(&select_packets(&flow(4), pol).unwrap()), vec![0, 1, 2, 3]);
    }

    #[test]
    fn errors() {
        assert!(matches!(select_packets(&flow(0), SelectionPolicy::FirstK(5)), Err(Error::EmptyFlow)));
        let bad = SelectionPolicy::RandomKofFirstM { k: 6, m: 5, seed: 0 };
        assert!(matches!(select_packets(&flow(8), bad), Err(Error::InvalidPolicy(_))));
    }

    #[test]
    fn policy_text_round_trip() {
        for text in ["first:5", "random:5of10"] {
            let p: SelectionPolicy = text.parse().unwrap();
            assert_eq!(p.to_string(), text);
        }
        assert_eq!("random:5of10".parse::<SelectionPolicy>().unwrap(), SelectionPolicy::RandomKofFirstM { k: 5, m: 10, seed: 0 });
        for bad in ["first", "first:x", "random:5", "random:11of10", "last:3"] {
            assert!(bad.parse::<SelectionPolicy>().is_err(), "{bad}");
        }
    }
}
