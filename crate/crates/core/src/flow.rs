//! Bidirectional flow assembly and burst segmentation.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::net::Ipv4Addr;

use thiserror::Error;

use crate::packet::ParsedPacket;

/// Default inter-packet gap (inclusive) that keeps packets in one burst.
pub const DEFAULT_GAP_THRESHOLD_US: u64 = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Endpoint {
    pub ip: Ipv4Addr,
    pub port: u16,
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.ip, self.port)
    }
}

/// Canonical bidirectional 5-tuple: `lo <= hi` so both directions of a
/// conversation share one key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FlowKey {
    pub lo: Endpoint,
    pub hi: Endpoint,
    pub proto: u8,
}

impl FlowKey {
    pub fn new(a: Endpoint, b: Endpoint, proto: u8) -> Self {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        FlowKey { lo, hi, proto }
    }
}

pub fn flow_key(p: &ParsedPacket) -> FlowKey {
    FlowKey::new(
        Endpoint {
            ip: p.src_ip,
            port: p.src_port,
        },
        Endpoint {
            ip: p.dst_ip,
            port: p.dst_port,
        },
        p.ip_proto,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    /// Sent by the flow initiator.
    Outbound,
    Inbound,
}

impl Direction {
    pub fn as_feature(self) -> f32 {
        match self {
            Direction::Outbound => 0.0,
            Direction::Inbound => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Flow {
    pub key: FlowKey,
    pub initiator: Endpoint,
    pub packets: Vec<ParsedPacket>,
    pub directions: Vec<Direction>,
}

impl Flow {
    pub fn len(&self) -> usize {
        self.packets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.packets.is_empty()
    }

    pub fn first_timestamp_us(&self) -> u64 {
        self.packets[0].timestamp_us
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Burst {
    pub direction: Direction,
    pub packets: Vec<ParsedPacket>,
    pub start_time_us: u64,
    /// Sum of on-wire lengths.
    pub total_bytes: u64,
}

impl Burst {
    pub fn packet_count(&self) -> usize {
        self.packets.len()
    }
}

/// Group packets into flows. Input is stably sorted by timestamp first;
/// flows come out in order of their first packet.
pub fn assemble_flows(packets: Vec<ParsedPacket>) -> Vec<Flow> {
    let mut packets = packets;
    packets.sort_by_key(|p| p.timestamp_us);
    let mut index: HashMap<FlowKey, usize> = HashMap::new();
    let mut flows: Vec<Flow> = Vec::new();
    for p in packets {
        let key = flow_key(&p);
        let src = Endpoint {
            ip: p.src_ip,
            port: p.src_port,
        };
        let slot = *index.entry(key).or_insert_with(|| {
            flows.push(Flow {
                key,
                initiator: src,
                packets: Vec::new(),
                directions: Vec::new(),
            });
            flows.len() - 1
        });
        let flow = &mut flows[slot];
        let dir = if src == flow.initiator {
            Direction::Outbound
        } else {
            Direction::Inbound
        };
        flow.directions.push(dir);
        flow.packets.push(p);
    }
    flows
}

/// Split a flow into bursts: a new burst starts when the direction changes
/// or the gap to the previous packet exceeds `gap_threshold_us`.
pub fn segment_bursts(flow: &Flow, gap_threshold_us: u64) -> Vec<Burst> {
    let mut bursts: Vec<Burst> = Vec::new();
    let mut prev_ts: Option<u64> = None;
    for (p, &dir) in flow.packets.iter().zip(&flow.directions) {
        let extend = match (bursts.last(), prev_ts) {
            (Some(b), Some(t)) => b.direction == dir && p.timestamp_us - t <= gap_threshold_us,
            _ => false,
        };
        if extend {
            let b = bursts.last_mut().expect("checked above");
            b.total_bytes += p.wire_len as u64;
            b.packets.push(p.clone());
        } else {
            bursts.push(Burst {
                direction: dir,
                packets: vec![p.clone()],
                start_time_us: p.timestamp_us,
                total_bytes: p.wire_len as u64,
            });
        }
        prev_ts = Some(p.timestamp_us);
    }
    bursts
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FilterConfig {
    pub min_packets: usize,
    /// Drop flows in which no burst has more than two packets.
    pub require_burst_depth: bool,
    pub gap_threshold_us: u64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            min_packets: 3,
            require_burst_depth: false,
            gap_threshold_us: DEFAULT_GAP_THRESHOLD_US,
        }
    }
}

pub fn keep_flow(flow: &Flow, cfg: &FilterConfig) -> bool {
    if flow.len() < cfg.min_packets {
        return false;
    }
    if cfg.require_burst_depth {
        return segment_bursts(flow, cfg.gap_threshold_us)
            .iter()
            .any(|b| b.packet_count() > 2);
    }
    true
}

pub fn filter_flows(flows: Vec<Flow>, cfg: &FilterConfig) -> Vec<Flow> {
    flows.into_iter().filter(|f| keep_flow(f, cfg)).collect()
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StatsError {
    #[error("composition statistics need at least one flow")]
    EmptyCorpus,
    #[error("malformed statistics line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompositionStats {
    pub median_packets_per_burst: usize,
    pub median_bursts_per_flow: usize,
    pub packets_per_burst: BTreeMap<usize, usize>,
    pub bursts_per_flow: BTreeMap<usize, usize>,
    pub computed_after_filter: bool,
}

/// Lower median of a histogram (value -> count).
pub fn histogram_lower_median(hist: &BTreeMap<usize, usize>) -> Option<usize> {
    let total: usize = hist.values().sum();
    if total == 0 {
        return None;
    }
    // 0-based rank of the lower median.
    let rank = (total - 1) / 2;
    let mut seen = 0;
    for (&value, &count) in hist {
        seen += count;
        if seen > rank {
            return Some(value);
        }
    }
    unreachable!("rank is below the histogram total")
}

pub fn composition_stats(
    flows: &[Flow],
    gap_threshold_us: u64,
    computed_after_filter: bool,
) -> Result<CompositionStats, StatsError> {
    if flows.is_empty() {
        return Err(StatsError::EmptyCorpus);
    }
    let mut packets_per_burst = BTreeMap::new();
    let mut bursts_per_flow = BTreeMap::new();
    for flow in flows {
        let bursts = segment_bursts(flow, gap_threshold_us);
        *bursts_per_flow.entry(bursts.len()).or_insert(0) += 1;
        for b in &bursts {
            *packets_per_burst.entry(b.packet_count()).or_insert(0) += 1;
        }
    }
    Ok(CompositionStats {
        median_packets_per_burst: histogram_lower_median(&packets_per_burst)
            .ok_or(StatsError::EmptyCorpus)?,
        median_bursts_per_flow: histogram_lower_median(&bursts_per_flow)
            .ok_or(StatsError::EmptyCorpus)?,
        packets_per_burst,
        bursts_per_flow,
        computed_after_filter,
    })
}

impl CompositionStats {
    /// Key-value text form:
    ///
    /// ```text
    /// median_packets_per_burst=6
    /// median_bursts_per_flow=12
    /// computed_after_filter=true
    /// packets_per_burst.<n>=<count>
    /// bursts_per_flow.<n>=<count>
    /// ```
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("median_packets_per_burst={}\n", self.median_packets_per_burst));
        s.push_str(&format!("median_bursts_per_flow={}\n", self.median_bursts_per_flow));
        s.push_str(&format!("computed_after_filter={}\n", self.computed_after_filter));
        for (k, v) in &self.packets_per_burst {
            s.push_str(&format!("packets_per_burst.{k}={v}\n"));
        }
        for (k, v) in &self.bursts_per_flow {
            s.push_str(&format!("bursts_per_flow.{k}={v}\n"));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, StatsError> {
        let mut stats = CompositionStats {
            median_packets_per_burst: 0,
            median_bursts_per_flow: 0,
            packets_per_burst: BTreeMap::new(),
            bursts_per_flow: BTreeMap::new(),
            computed_after_filter: false,
        };
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |reason: &str| StatsError::Parse {
                line: i + 1,
                reason: reason.to_string(),
            };
            let (key, value) = line.split_once('=').ok_or_else(|| err("missing '='"))?;
            let num = || value.parse::<usize>().map_err(|_| err("not an integer"));
            match key {
                "median_packets_per_burst" => stats.median_packets_per_burst = num()?,
                "median_bursts_per_flow" => stats.median_bursts_per_flow = num()?,
                "computed_after_filter" => {
                    stats.computed_after_filter = value.parse().map_err(|_| err("not a bool"))?
                }
                _ => {
                    let (family, bucket) = key.split_once('.').ok_or_else(|| err("unknown key"))?;
                    let bucket = bucket.parse::<usize>().map_err(|_| err("bad bucket"))?;
                    let map = match family {
                        "packets_per_burst" => &mut stats.packets_per_burst,
                        "bursts_per_flow" => &mut stats.bursts_per_flow,
                        _ => return Err(err("unknown key")),
                    };
                    map.insert(bucket, num()?);
                }
            }
        }
        Ok(stats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::packet::{IpHeader, Transport, PROTO_TCP, PROTO_UDP};

    pub(crate) fn pkt(ts_us: u64, src: (u8, u16), dst: (u8, u16), proto: u8) -> ParsedPacket {
        let transport = match proto {
            PROTO_TCP => Transport::Tcp {
                flags: 0x10,
                window: 1000,
                seq: 1,
                ack: 1,
                urgent: 0,
            },
            PROTO_UDP => Transport::Udp { length: 8 },
            _ => Transport::Icmp {
                icmp_type: 8,
                code: 0,
            },
        };
        ParsedPacket {
            timestamp_us: ts_us,
            src_ip: Ipv4Addr::new(10, 0, 0, src.0),
            dst_ip: Ipv4Addr::new(10, 0, 0, dst.0),
            src_port: src.1,
            dst_port: dst.1,
            ip_proto: proto,
            ip: IpHeader {
                ihl: 5,
                tos: 0,
                total_len: 40,
                flags: 2,
                ttl: 64,
            },
            transport,
            payload_prefix: vec![],
            wire_len: 60,
        }
    }

    #[test]
    fn key_is_symmetric_and_proto_sensitive() {
        let a = pkt(0, (1, 1234), (2, 443), PROTO_TCP);
        let b = pkt(0, (2, 443), (1, 1234), PROTO_TCP);
        assert_eq!(flow_key(&a), flow_key(&b));
        let c = pkt(0, (1, 1234), (2, 443), PROTO_UDP);
        assert_ne!(flow_key(&a), flow_key(&c));
        let icmp = pkt(0, (1, 0), (2, 0), 1);
        let k = flow_key(&icmp);
        assert_eq!((k.lo.port, k.hi.port), (0, 0));
    }

    #[test]
    fn one_conversation_both_directions() {
        let flows = assemble_flows(vec![
            pkt(0, (1, 1234), (2, 443), PROTO_TCP),
            pkt(10, (2, 443), (1, 1234), PROTO_TCP),
            pkt(20, (1, 1234), (2, 443), PROTO_TCP),
        ]);
        assert_eq!(flows.len(), 1);
        assert_eq!(
            flows[0].directions,
            vec![Direction::Outbound, Direction::Inbound, Direction::Outbound]
        );
        assert_eq!(flows[0].initiator.port, 1234);
    }

    #[test]
    fn empty_input_gives_no_flows() {
        assert!(assemble_flows(vec![]).is_empty());
    }

    #[test]
    fn out_of_order_input_is_sorted() {
        let flows = assemble_flows(vec![
            pkt(50, (2, 443), (1, 1234), PROTO_TCP),
            pkt(0, (1, 1234), (2, 443), PROTO_TCP),
        ]);
        assert_eq!(flows[0].initiator.port, 1234);
        assert_eq!(flows[0].packets[0].timestamp_us, 0);
    }

    fn flow_from(spec: &[(u64, Direction)]) -> Flow {
        let mut packets = Vec::new();
        let mut directions = Vec::new();
        for &(ms, d) in spec {
            let p = match d {
                Direction::Outbound => pkt(ms * 1000, (1, 1000), (2, 80), PROTO_TCP),
                Direction::Inbound => pkt(ms * 1000, (2, 80), (1, 1000), PROTO_TCP),
            };
            packets.push(p);
            directions.push(d);
        }
        Flow {
            key: flow_key(&packets[0]),
            initiator: Endpoint {
                ip: Ipv4Addr::new(10, 0, 0, 1),
                port: 1000,
            },
            packets,
            directions,
        }
    }

    fn sizes(bursts: &[Burst]) -> Vec<usize> {
        bursts.iter().map(Burst::packet_count).collect()
    }

    #[test]
    fn segmentation_hand_trace() {
        use Direction::*;
        let f = flow_from(&[(0, Outbound), (5, Outbound), (30, Outbound), (35, Inbound)]);
        let bursts = segment_bursts(&f, DEFAULT_GAP_THRESHOLD_US);
        assert_eq!(sizes(&bursts), vec![2, 1, 1]);
        assert_eq!(bursts[1].start_time_us, 30_000);
        assert_eq!(bursts[0].total_bytes, 120);
    }

    #[test]
    fn gap_of_exactly_ten_ms_stays_in_burst() {
        use Direction::*;
        let f = flow_from(&[(0, Outbound), (10, Outbound)]);
        assert_eq!(sizes(&segment_bursts(&f, DEFAULT_GAP_THRESHOLD_US)), vec![2]);
        let f = flow_from(&[(0, Outbound)]);
        assert_eq!(sizes(&segment_bursts(&f, DEFAULT_GAP_THRESHOLD_US)), vec![1]);
    }

    #[test]
    fn filter_rules() {
        use Direction::*;
        let cfg = FilterConfig {
            min_packets: 3,
            ..FilterConfig::default()
        };
        let two = flow_from(&[(0, Outbound), (1, Inbound)]);
        assert!(!keep_flow(&two, &cfg));

        let deep = FilterConfig {
            min_packets: 6,
            require_burst_depth: true,
            ..FilterConfig::default()
        };
        let three_three = flow_from(&[
            (0, Outbound),
            (1, Outbound),
            (2, Outbound),
            (50, Inbound),
            (51, Inbound),
            (52, Inbound),
        ]);
        assert!(keep_flow(&three_three, &deep));
        let two_two_two = flow_from(&[
            (0, Outbound),
            (1, Outbound),
            (50, Inbound),
            (51, Inbound),
            (100, Outbound),
            (101, Outbound),
        ]);
        assert!(!keep_flow(&two_two_two, &deep));
    }

    #[test]
    fn stats_medians() {
        use Direction::*;
        let f = flow_from(&[
            (0, Outbound),
            (50, Inbound),
            (51, Inbound),
            (52, Inbound),
            (100, Outbound),
            (101, Outbound),
            (102, Outbound),
            (103, Outbound),
            (104, Outbound),
        ]);
        let s = composition_stats(&[f], DEFAULT_GAP_THRESHOLD_US, true).unwrap();
        assert_eq!(s.median_packets_per_burst, 3);
        assert_eq!(s.median_bursts_per_flow, 3);
        assert_eq!(
            composition_stats(&[], DEFAULT_GAP_THRESHOLD_US, true),
            Err(StatsError::EmptyCorpus)
        );
    }

    #[test]
    fn lower_median_for_even_counts() {
        let hist: BTreeMap<usize, usize> = [(1, 1), (4, 1)].into_iter().collect();
        assert_eq!(histogram_lower_median(&hist), Some(1));
    }

    #[test]
    fn stats_text_round_trip() {
        let s = CompositionStats {
            median_packets_per_burst: 6,
            median_bursts_per_flow: 12,
            packets_per_burst: [(6, 24)].into_iter().collect(),
            bursts_per_flow: [(12, 2)].into_iter().collect(),
            computed_after_filter: true,
        };
        assert_eq!(CompositionStats::from_text(&s.to_text()).unwrap(), s);
    }
}
