//! Deterministic synthetic traffic.
//!
//! Each scenario is a traffic class with its own protocol behaviour: TCP
//! request/response exchanges (full handshake, cumulative seq/ack, FIN
//! teardown) or DNS-like UDP query/response pairs. Class signals live only
//! in tokenized fields (window, burst shape, lengths, payload prefixes) and
//! never in addresses or ports.

use std::fs;
use std::io::{self, BufWriter};
use std::net::Ipv4Addr;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::flow::{Endpoint, FlowKey};
use crate::packet::{encode_frame, IpHeader, ParsedPacket, Transport, PAYLOAD_PREFIX_LEN, PROTO_TCP, PROTO_UDP};
use crate::pcap::{write_pcap, LinkType, RawPacketRecord};

pub const TCP_SYN: u8 = 0x02;
pub const TCP_FIN: u8 = 0x01;
pub const TCP_PSH: u8 = 0x08;
pub const TCP_ACK: u8 = 0x10;

const BASE_TIME_US: u64 = 1_700_000_000_000_000;
const IP_DF: u8 = 0b010;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PayloadStyle {
    /// TLS application-data records.
    Tls,
    /// HTTP/1.1 requests and responses.
    Http,
    /// DNS header followed by an opaque question.
    Dns,
    Random,
}

/// One traffic class.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub class_id: i32,
    pub flow_count: usize,
    /// Probability that a flow is TCP rather than UDP.
    pub tcp_fraction: f64,
    /// Receive window advertised by the client; the server uses `server_window`.
    pub client_window: u16,
    pub server_window: u16,
    /// Inclusive ranges.
    pub rounds: (usize, usize),
    pub request_packets: (usize, usize),
    pub response_packets: (usize, usize),
    pub request_bytes: (usize, usize),
    pub response_bytes: (usize, usize),
    /// Gap between packets of one burst (kept under 10 ms).
    pub intra_gap_us: (u64, u64),
    /// Round-trip / think time between bursts (above 10 ms).
    pub rtt_us: (u64, u64),
    /// Chance that a same-direction run is split by a pause above 10 ms.
    pub split_prob: f64,
    pub payload: PayloadStyle,
    pub server_port: u16,
    pub seed: u64,
}

impl ScenarioSpec {
    /// Interactive TLS-style class: small window, single-packet responses.
    pub fn class_a(flow_count: usize, seed: u64) -> Self {
        ScenarioSpec {
            class_id: 0,
            flow_count,
            tcp_fraction: 1.0,
            client_window: 502,
            server_window: 501,
            rounds: (1, 2),
            request_packets: (1, 3),
            response_packets: (1, 1),
            request_bytes: (40, 300),
            response_bytes: (60, 600),
            intra_gap_us: (100, 3_000),
            rtt_us: (15_000, 60_000),
            split_prob: 0.1,
            payload: PayloadStyle::Tls,
            server_port: 443,
            seed,
        }
    }

    /// Bulk HTTP-style class: large window, three-packet responses.
    pub fn class_b(flow_count: usize, seed: u64) -> Self {
        ScenarioSpec {
            class_id: 1,
            flow_count,
            tcp_fraction: 1.0,
            client_window: 8192,
            server_window: 8192,
            rounds: (1, 2),
            request_packets: (1, 2),
            response_packets: (3, 3),
            request_bytes: (80, 400),
            response_bytes: (900, 1460),
            intra_gap_us: (50, 2_000),
            rtt_us: (12_000, 45_000),
            split_prob: 0.1,
            payload: PayloadStyle::Http,
            server_port: 80,
            seed,
        }
    }

    /// DNS-like UDP class with distinctive datagram lengths.
    pub fn class_c(flow_count: usize, seed: u64) -> Self {
        ScenarioSpec {
            class_id: 2,
            flow_count,
            tcp_fraction: 0.0,
            client_window: 0,
            server_window: 0,
            rounds: (3, 4),
            request_packets: (1, 1),
            response_packets: (1, 1),
            request_bytes: (28, 60),
            response_bytes: (90, 220),
            intra_gap_us: (100, 2_000),
            rtt_us: (11_000, 40_000),
            split_prob: 0.0,
            payload: PayloadStyle::Dns,
            server_port: 53,
            seed,
        }
    }

    /// The three-class task used for pre-training and fine-tuning.
    pub fn standard_classes(flows_per_class: usize, seed: u64) -> Vec<ScenarioSpec> {
        vec![
            Self::class_a(flows_per_class, seed),
            Self::class_b(flows_per_class, seed.wrapping_add(1)),
            Self::class_c(flows_per_class, seed.wrapping_add(2)),
        ]
    }
}

/// A generated flow: wire records plus the packets they encode.
#[derive(Debug, Clone)]
pub struct SyntheticFlow {
    pub key: FlowKey,
    pub class_id: i32,
    pub packets: Vec<ParsedPacket>,
    pub records: Vec<RawPacketRecord>,
}

impl SyntheticFlow {
    pub fn first_timestamp_us(&self) -> u64 {
        self.packets[0].timestamp_us
    }
}

/// SplitMix64 step, used to derive independent per-flow seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn pick(rng: &mut ChaCha8Rng, range: (usize, usize)) -> usize {
    rng.gen_range(range.0..=range.1)
}

fn pick_u64(rng: &mut ChaCha8Rng, range: (u64, u64)) -> u64 {
    rng.gen_range(range.0..=range.1)
}

fn client_address(flow_index: u64) -> Ipv4Addr {
    let n = flow_index + 1;
    Ipv4Addr::new(10, (n >> 16) as u8, (n >> 8) as u8, n as u8)
}

struct Side {
    endpoint: Endpoint,
    ttl: u8,
    window: u16,
    /// Next sequence number this side will send.
    next_seq: u32,
}

struct FlowBuilder<'a> {
    rng: &'a mut ChaCha8Rng,
    style: PayloadStyle,
    proto: u8,
    out: Vec<(ParsedPacket, Vec<u8>)>,
    now: u64,
    /// Transaction id of the outstanding DNS query.
    txid: [u8; 2],
}

impl FlowBuilder<'_> {
    fn payload(&mut self, len: usize, from_client: bool, first_of_message: bool) -> Vec<u8> {
        let mut body: Vec<u8> = (0..len).map(|_| self.rng.gen_range(1..=255u8)).collect();
        if !first_of_message || len == 0 {
            return body;
        }
        let header: Vec<u8> = match self.style {
            PayloadStyle::Tls => {
                let rec_len = (len.saturating_sub(5)) as u16;
                let mut h = vec![0x17, 0x03, 0x03];
                h.extend_from_slice(&rec_len.to_be_bytes());
                h
            }
            PayloadStyle::Http if from_client => b"GET /api/v1/".to_vec(),
            PayloadStyle::Http => b"HTTP/1.1 200".to_vec(),
            PayloadStyle::Dns => {
                if from_client {
                    self.txid = self.rng.gen();
                }
                let txid = self.txid;
                let flags: u16 = if from_client { 0x0100 } else { 0x8180 };
                let answers: u16 = if from_client { 0 } else { self.rng.gen_range(1..=3) };
                let mut h = txid.to_vec();
                h.extend_from_slice(&flags.to_be_bytes());
                h.extend_from_slice(&1u16.to_be_bytes());
                h.extend_from_slice(&answers.to_be_bytes());
                h.extend_from_slice(&[0, 0, 0, 0]);
                h
            }
            PayloadStyle::Random => Vec::new(),
        };
        let n = header.len().min(len);
        body[..n].copy_from_slice(&header[..n]);
        body
    }

    fn push_tcp(&mut self, from: &mut Side, to: &Side, flags: u8, payload: Vec<u8>) {
        let seq = from.next_seq;
        let ack = if flags & TCP_ACK != 0 { to.next_seq } else { 0 };
        let mut advance = payload.len() as u32;
        if flags & (TCP_SYN | TCP_FIN) != 0 {
            advance += 1;
        }
        from.next_seq = from.next_seq.wrapping_add(advance);
        let p = ParsedPacket {
            timestamp_us: self.now,
            src_ip: from.endpoint.ip,
            dst_ip: to.endpoint.ip,
            src_port: from.endpoint.port,
            dst_port: to.endpoint.port,
            ip_proto: PROTO_TCP,
            ip: IpHeader {
                ihl: 5,
                tos: 0,
                total_len: (40 + payload.len()) as u16,
                flags: IP_DF,
                ttl: from.ttl,
            },
            transport: Transport::Tcp {
                flags,
                window: from.window,
                seq,
                ack,
                urgent: 0,
            },
            payload_prefix: payload[..payload.len().min(PAYLOAD_PREFIX_LEN)].to_vec(),
            wire_len: 0,
        };
        self.out.push((p, payload));
    }

    fn push_udp(&mut self, from: &Side, to: &Side, payload: Vec<u8>) {
        let p = ParsedPacket {
            timestamp_us: self.now,
            src_ip: from.endpoint.ip,
            dst_ip: to.endpoint.ip,
            src_port: from.endpoint.port,
            dst_port: to.endpoint.port,
            ip_proto: PROTO_UDP,
            ip: IpHeader {
                ihl: 5,
                tos: 0,
                total_len: (28 + payload.len()) as u16,
                flags: 0,
                ttl: from.ttl,
            },
            transport: Transport::Udp {
                length: (8 + payload.len()) as u16,
            },
            payload_prefix: payload[..payload.len().min(PAYLOAD_PREFIX_LEN)].to_vec(),
            wire_len: 0,
        };
        self.out.push((p, payload));
    }

    /// Advance the clock by an intra-burst gap, occasionally by a pause that
    /// splits the run into two bursts.
    fn step_within_burst(&mut self, spec: &ScenarioSpec) {
        let gap = if self.rng.gen_bool(spec.split_prob) {
            pick_u64(self.rng, spec.rtt_us)
        } else {
            pick_u64(self.rng, spec.intra_gap_us)
        };
        self.now += gap;
    }

    fn split_sizes(&mut self, total: usize, packets: usize) -> Vec<usize> {
        // Full-size segments followed by the remainder, at least one byte each.
        let per = total.div_ceil(packets).max(1);
        let mut left = total.max(packets);
        (0..packets)
            .map(|i| {
                let n = if i + 1 == packets { left } else { per.min(left - (packets - i - 1)) };
                left -= n;
                n
            })
            .collect()
    }
}

/// Generate one flow. `flow_index` must be unique across a corpus; it
/// determines the client address so that flow keys never collide.
pub fn generate_flow(spec: &ScenarioSpec, rng: &mut ChaCha8Rng, flow_index: u64, start_us: u64) -> SyntheticFlow {
    let is_tcp = rng.gen_bool(spec.tcp_fraction.clamp(0.0, 1.0));
    let proto = if is_tcp { PROTO_TCP } else { PROTO_UDP };
    let mut client = Side {
        endpoint: Endpoint {
            ip: client_address(flow_index),
            port: rng.gen_range(32_768..=60_999),
        },
        ttl: if rng.gen_bool(0.5) { 64 } else { 128 },
        window: spec.client_window,
        next_seq: rng.gen(),
    };
    let mut server = Side {
        endpoint: Endpoint {
            ip: Ipv4Addr::new(172, 16, rng.gen_range(0..=3), rng.gen_range(1..=254)),
            port: spec.server_port,
        },
        ttl: rng.gen_range(48..=58),
        window: spec.server_window,
        next_seq: rng.gen(),
    };
    let mut b = FlowBuilder {
        rng,
        style: spec.payload,
        proto,
        out: Vec::new(),
        now: start_us,
        txid: [0, 0],
    };
    let rounds = pick(b.rng, spec.rounds);
    if b.proto == PROTO_TCP {
        b.push_tcp(&mut client, &server, TCP_SYN, vec![]);
        b.now += pick_u64(b.rng, spec.rtt_us);
        b.push_tcp(&mut server, &client, TCP_SYN | TCP_ACK, vec![]);
        b.now += pick_u64(b.rng, (50, 500));
        b.push_tcp(&mut client, &server, TCP_ACK, vec![]);
        for round in 0..rounds {
            if round == 0 {
                b.now += pick_u64(b.rng, spec.intra_gap_us);
            } else {
                b.now += pick_u64(b.rng, spec.rtt_us);
            }
            let n_req = pick(b.rng, spec.request_packets);
            let req_total = pick(b.rng, spec.request_bytes);
            let sizes = b.split_sizes(req_total, n_req);
            for (i, &len) in sizes.iter().enumerate() {
                if i > 0 {
                    b.step_within_burst(spec);
                }
                let payload = b.payload(len, true, i == 0);
                let flags = if i + 1 == n_req { TCP_PSH | TCP_ACK } else { TCP_ACK };
                b.push_tcp(&mut client, &server, flags, payload);
            }
            b.now += pick_u64(b.rng, spec.rtt_us);
            let n_resp = pick(b.rng, spec.response_packets);
            let resp_total = pick(b.rng, spec.response_bytes) * n_resp;
            let sizes = b.split_sizes(resp_total, n_resp);
            for (i, &len) in sizes.iter().enumerate() {
                if i > 0 {
                    b.step_within_burst(spec);
                }
                let payload = b.payload(len, false, i == 0);
                let flags = if i + 1 == n_resp { TCP_PSH | TCP_ACK } else { TCP_ACK };
                b.push_tcp(&mut server, &client, flags, payload);
            }
        }
        b.now += pick_u64(b.rng, spec.rtt_us);
        b.push_tcp(&mut client, &server, TCP_FIN | TCP_ACK, vec![]);
        b.now += pick_u64(b.rng, spec.rtt_us);
        b.push_tcp(&mut server, &client, TCP_FIN | TCP_ACK, vec![]);
        b.now += pick_u64(b.rng, (50, 500));
        b.push_tcp(&mut client, &server, TCP_ACK, vec![]);
    } else {
        for round in 0..rounds.max(3) {
            if round > 0 {
                b.now += pick_u64(b.rng, spec.rtt_us);
            }
            let q = pick(b.rng, spec.request_bytes).max(12);
            let payload = b.payload(q, true, true);
            b.push_udp(&client, &server, payload);
            b.now += pick_u64(b.rng, spec.rtt_us);
            let r = pick(b.rng, spec.response_bytes).max(12);
            let payload = b.payload(r, false, true);
            b.push_udp(&server, &client, payload);
        }
    }

    let mut packets = Vec::with_capacity(b.out.len());
    let mut records = Vec::with_capacity(b.out.len());
    for (mut p, payload) in b.out {
        let frame = encode_frame(&p, &payload);
        p.wire_len = frame.len() as u32;
        records.push(RawPacketRecord {
            timestamp_us: p.timestamp_us,
            original_length: frame.len() as u32,
            captured: frame,
        });
        packets.push(p);
    }
    SyntheticFlow {
        key: FlowKey::new(client.endpoint, server.endpoint, proto),
        class_id: spec.class_id,
        packets,
        records,
    }
}

/// How flows are laid out in the capture file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Emission {
    /// Packets of all flows merged in timestamp order.
    Interleaved,
    /// Each flow's packets written contiguously.
    Sequential,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusOptions {
    pub emission: Emission,
    /// Flow start times are spread uniformly over this window.
    pub span_us: u64,
    pub seed: u64,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        CorpusOptions {
            emission: Emission::Interleaved,
            span_us: 600_000_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelRow {
    pub key: FlowKey,
    pub first_ts_us: u64,
    pub class_id: i32,
}

/// Generate every flow of every scenario, in deterministic order.
pub fn generate_flows(specs: &[ScenarioSpec], opts: &CorpusOptions) -> Vec<SyntheticFlow> {
    let mut flows = Vec::new();
    let mut flow_index = 0u64;
    for spec in specs {
        for i in 0..spec.flow_count {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(opts.seed, spec.seed), i as u64));
            let start = BASE_TIME_US + rng.gen_range(0..opts.span_us.max(1));
            flows.push(generate_flow(spec, &mut rng, flow_index, start));
            flow_index += 1;
        }
    }
    flows
}

/// Serialize flows into capture records according to `emission`.
pub fn corpus_records(flows: &[SyntheticFlow], emission: Emission) -> Vec<RawPacketRecord> {
    let mut records: Vec<RawPacketRecord> = flows.iter().flat_map(|f| f.records.iter().cloned()).collect();
    if emission == Emission::Interleaved {
        records.sort_by_key(|r| r.timestamp_us);
    }
    records
}

pub fn label_rows(flows: &[SyntheticFlow]) -> Vec<LabelRow> {
    flows
        .iter()
        .map(|f| LabelRow {
            key: f.key,
            first_ts_us: f.first_timestamp_us(),
            class_id: f.class_id,
        })
        .collect()
}

pub const LABEL_HEADER: &str = "lo_ip,lo_port,hi_ip,hi_port,proto,first_ts_us,class";

pub fn labels_to_csv(rows: &[LabelRow]) -> String {
    let mut s = String::from(LABEL_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.key.lo.ip, r.key.lo.port, r.key.hi.ip, r.key.hi.port, r.key.proto, r.first_ts_us, r.class_id
        ));
    }
    s
}

pub fn labels_from_csv(text: &str) -> Result<Vec<LabelRow>, String> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 && line.trim() == LABEL_HEADER {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 7 {
            return Err(format!("line {}: expected 7 fields, got {}", i + 1, f.len()));
        }
        let bad = |what: &str| format!("line {}: bad {what}", i + 1);
        let lo = Endpoint {
            ip: f[0].parse().map_err(|_| bad("lo_ip"))?,
            port: f[1].parse().map_err(|_| bad("lo_port"))?,
        };
        let hi = Endpoint {
            ip: f[2].parse().map_err(|_| bad("hi_ip"))?,
            port: f[3].parse().map_err(|_| bad("hi_port"))?,
        };
        rows.push(LabelRow {
            key: FlowKey::new(lo, hi, f[4].parse().map_err(|_| bad("proto"))?),
            first_ts_us: f[5].parse().map_err(|_| bad("first_ts_us"))?,
            class_id: f[6].parse().map_err(|_| bad("class"))?,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusSummary {
    pub flows: usize,
    pub packets: usize,
}

/// Write a capture file and its label CSV.
pub fn generate_corpus(
    specs: &[ScenarioSpec],
    opts: &CorpusOptions,
    pcap_path: &Path,
    labels_path: &Path,
) -> io::Result<CorpusSummary> {
    let flows = generate_flows(specs, opts);
    let records = corpus_records(&flows, opts.emission);
    let file = fs::File::create(pcap_path)?;
    write_pcap(BufWriter::new(file), LinkType::Ethernet, 65_535, &records)?;
    fs::write(labels_path, labels_to_csv(&label_rows(&flows)))?;
    Ok(CorpusSummary {
        flows: flows.len(),
        packets: records.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{assemble_flows, flow_key, segment_bursts, DEFAULT_GAP_THRESHOLD_US};
    use crate::packet::parse_packet;
    use crate::tokenizer::{tokenize_flow, token_value, CompositionConfig};

    fn one(spec: &ScenarioSpec, idx: u64) -> SyntheticFlow {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, idx));
        generate_flow(spec, &mut rng, idx, BASE_TIME_US)
    }

    /// Replays a TCP flow and checks cumulative seq/ack arithmetic.
    fn check_seq_ack(flow: &SyntheticFlow) -> Result<(), String> {
        let client = Endpoint {
            ip: flow.packets[0].src_ip,
            port: flow.packets[0].src_port,
        };
        // next expected seq for (client, server)
        let mut next: [Option<u32>; 2] = [None, None];
        for (i, p) in flow.packets.iter().enumerate() {
            let Transport::Tcp { flags, seq, ack, .. } = p.transport else {
                return Err("not tcp".into());
            };
            let side = usize::from(Endpoint { ip: p.src_ip, port: p.src_port } != client);
            if let Some(expect) = next[side] {
                if seq != expect {
                    return Err(format!("packet {i}: seq {seq} expected {expect}"));
                }
            }
            if flags & TCP_ACK != 0 {
                let peer = next[1 - side].ok_or(format!("packet {i}: ACK before peer spoke"))?;
                if ack != peer {
                    return Err(format!("packet {i}: ack {ack} expected {peer}"));
                }
            }
            let payload_len = p.ip.total_len as u32 - 40;
            let mut adv = payload_len;
            if flags & (TCP_SYN | TCP_FIN) != 0 {
                adv += 1;
            }
            next[side] = Some(seq.wrapping_add(adv));
        }
        Ok(())
    }

    #[test]
    fn handshake_flags_lead_every_tcp_flow() {
        for spec in [ScenarioSpec::class_a(1, 5), ScenarioSpec::class_b(1, 6)] {
            for idx in 0..50 {
                let f = one(&spec, idx);
                let parsed: Vec<_> = f
                    .records
                    .iter()
                    .map(|r| parse_packet(r, LinkType::Ethernet).unwrap())
                    .collect();
                let flows = assemble_flows(parsed);
                let tf = tokenize_flow(&flows[0], &CompositionConfig::default(), DEFAULT_GAP_THRESHOLD_US)
                    .unwrap();
                let mut flag_values = Vec::new();
                for b in 0..3 {
                    flag_values.push(token_value(tf.token(b, 1 + 5)).unwrap());
                }
                assert_eq!(flag_values, vec![0x0002, 0x0012, 0x0010]);
            }
        }
    }

    #[test]
    fn seq_ack_consistency() {
        for spec in [ScenarioSpec::class_a(1, 11), ScenarioSpec::class_b(1, 12)] {
            for idx in 0..200 {
                check_seq_ack(&one(&spec, idx)).unwrap();
            }
        }
    }

    #[test]
    fn parse_inverts_encode() {
        for spec in ScenarioSpec::standard_classes(1, 3) {
            for idx in 0..30 {
                let f = one(&spec, idx);
                for (p, r) in f.packets.iter().zip(&f.records) {
                    assert_eq!(&parse_packet(r, LinkType::Ethernet).unwrap(), p);
                }
            }
        }
    }

    #[test]
    fn fixed_seed_is_byte_identical() {
        let specs = ScenarioSpec::standard_classes(20, 9);
        let opts = CorpusOptions::default();
        let a = corpus_records(&generate_flows(&specs, &opts), Emission::Interleaved);
        let b = corpus_records(&generate_flows(&specs, &opts), Emission::Interleaved);
        assert_eq!(a, b);
    }

    #[test]
    fn flows_meet_minimum_size_and_shape() {
        for spec in ScenarioSpec::standard_classes(1, 21) {
            for idx in 0..100 {
                let f = one(&spec, idx);
                assert!(f.packets.len() >= 6, "class {} produced {} packets", spec.class_id, f.packets.len());
                assert!(f.packets.iter().all(|p| p.ip.ihl == 5 && p.ip.tos == 0));
                assert!(f.packets.iter().all(|p| flow_key(p) == f.key));
            }
        }
    }

    #[test]
    fn class_b_responses_form_three_packet_bursts() {
        let spec = ScenarioSpec {
            split_prob: 0.0,
            ..ScenarioSpec::class_b(1, 4)
        };
        let f = one(&spec, 0);
        let flows = assemble_flows(f.packets.clone());
        let bursts = segment_bursts(&flows[0], DEFAULT_GAP_THRESHOLD_US);
        assert!(bursts
            .iter()
            .filter(|b| b.direction == crate::flow::Direction::Inbound)
            .any(|b| b.packet_count() == 3));
    }

    #[test]
    fn label_csv_round_trip() {
        let flows = generate_flows(&ScenarioSpec::standard_classes(3, 1), &CorpusOptions::default());
        let rows = label_rows(&flows);
        assert_eq!(labels_from_csv(&labels_to_csv(&rows)).unwrap(), rows);
    }

    #[test]
    fn split_sizes_preserve_total() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = FlowBuilder {
            rng: &mut rng,
            style: PayloadStyle::Random,
            proto: PROTO_TCP,
            out: vec![],
            now: 0,
            txid: [0, 0],
        };
        for (total, n) in [(100, 3), (5, 3), (1460 * 3, 3), (2, 1)] {
            let s = b.split_sizes(total, n);
            assert_eq!(s.len(), n);
            assert_eq!(s.iter().sum::<usize>(), total.max(n));
            assert!(s.iter().all(|&x| x > 0));
        }
    }
}
