//! Protocol-aware tokenization.
//!
//! Every header field is widened (or split) to a 16-bit value and mapped to
//! its own token, so field boundaries survive. A packet occupies 18 slots:
//!
//! | slots  | TCP                                        | UDP        | ICMP        |
//! |--------|--------------------------------------------|------------|-------------|
//! | 0..5   | IHL, ToS, TotalLen, IP flags, TTL          | same       | same        |
//! | 5..    | Flags, Window, SeqHi, SeqLo, AckHi, AckLo, Urgent | Length | Type, Code |
//! | then   | 6 payload tokens (byte pairs)              | 6 payload  | 6 payload   |
//! | rest   | -                                          | 6 PAD      | 5 PAD       |
//!
//! A burst row is `[CLS_B] + 6 packets x 18 slots` = 109 positions, and a
//! flow is 12 such rows.

use std::fmt;

use thiserror::Error;

use crate::flow::{segment_bursts, Burst, Flow};
use crate::packet::{ParsedPacket, Transport, PAYLOAD_PREFIX_LEN, PROTO_ICMP, PROTO_TCP, PROTO_UDP};

pub const PAD: u32 = 0;
pub const MASK: u32 = 1;
pub const CLS_B: u32 = 2;
pub const CLS_F: u32 = 3;
/// First field-token ID; a 16-bit value `v` maps to `v + FIELD_OFFSET`.
pub const FIELD_OFFSET: u32 = 4;
pub const VOCAB_SIZE: usize = 65_536 + FIELD_OFFSET as usize;

pub const SLOTS_PER_PACKET: usize = 18;
pub const MAX_PACKETS_PER_BURST: usize = 6;
pub const MAX_BURSTS: usize = 12;
/// CLS_B plus the packet slots.
pub const BURST_LEN: usize = 1 + MAX_PACKETS_PER_BURST * SLOTS_PER_PACKET;
pub const GRID_LEN: usize = MAX_BURSTS * BURST_LEN;
pub const META_WIDTH: usize = 5;
const PAYLOAD_TOKENS: usize = PAYLOAD_PREFIX_LEN / 2;

#[inline]
pub fn field_token(value: u16) -> u32 {
    value as u32 + FIELD_OFFSET
}

#[inline]
pub fn is_field_token(id: u32) -> bool {
    (FIELD_OFFSET..VOCAB_SIZE as u32).contains(&id)
}

/// Inverse of [`field_token`].
pub fn token_value(id: u32) -> Option<u16> {
    is_field_token(id).then(|| (id - FIELD_OFFSET) as u16)
}

/// Header field carried by a token slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Field {
    IpHeaderLen,
    IpTos,
    IpTotalLen,
    IpFlags,
    IpTtl,
    TcpFlags,
    TcpWindow,
    TcpSeqHi,
    TcpSeqLo,
    TcpAckHi,
    TcpAckLo,
    TcpUrgent,
    UdpLength,
    IcmpType,
    IcmpCode,
    /// 1-based index of the payload byte pair.
    Payload(u8),
}

impl Field {
    pub fn name(&self) -> String {
        match self {
            Field::IpHeaderLen => "IP.HeaderLen".into(),
            Field::IpTos => "IP.ToS".into(),
            Field::IpTotalLen => "IP.TotalLen".into(),
            Field::IpFlags => "IP.Flags".into(),
            Field::IpTtl => "IP.TTL".into(),
            Field::TcpFlags => "TCP.Flags".into(),
            Field::TcpWindow => "TCP.Window".into(),
            Field::TcpSeqHi => "TCP.SeqHi".into(),
            Field::TcpSeqLo => "TCP.SeqLo".into(),
            Field::TcpAckHi => "TCP.AckHi".into(),
            Field::TcpAckLo => "TCP.AckLo".into(),
            Field::TcpUrgent => "TCP.Urgent".into(),
            Field::UdpLength => "UDP.Length".into(),
            Field::IcmpType => "ICMP.Type".into(),
            Field::IcmpCode => "ICMP.Code".into(),
            Field::Payload(i) => format!("Payload{i}"),
        }
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

const IP_FIELDS: [Field; 5] = [
    Field::IpHeaderLen,
    Field::IpTos,
    Field::IpTotalLen,
    Field::IpFlags,
    Field::IpTtl,
];

fn transport_fields(proto: u8) -> &'static [Field] {
    match proto {
        PROTO_TCP => &[
            Field::TcpFlags,
            Field::TcpWindow,
            Field::TcpSeqHi,
            Field::TcpSeqLo,
            Field::TcpAckHi,
            Field::TcpAckLo,
            Field::TcpUrgent,
        ],
        PROTO_UDP => &[Field::UdpLength],
        PROTO_ICMP => &[Field::IcmpType, Field::IcmpCode],
        _ => &[],
    }
}

/// Which field a packet slot (0..18) holds for the given protocol; `None`
/// for alignment padding.
pub fn slot_field(proto: u8, slot: usize) -> Option<Field> {
    let transport = transport_fields(proto);
    let header = IP_FIELDS.len() + transport.len();
    if slot < IP_FIELDS.len() {
        Some(IP_FIELDS[slot])
    } else if slot < header {
        Some(transport[slot - IP_FIELDS.len()])
    } else if slot < header + PAYLOAD_TOKENS {
        Some(Field::Payload((slot - header + 1) as u8))
    } else {
        None
    }
}

/// Human-readable label for a position inside a burst row.
pub fn position_label(proto: u8, position: usize) -> String {
    if position == 0 {
        return "CLS_B".into();
    }
    let pkt = (position - 1) / SLOTS_PER_PACKET;
    let slot = (position - 1) % SLOTS_PER_PACKET;
    match slot_field(proto, slot) {
        Some(Field::Payload(i)) => format!("pkt{}.Payload{}", pkt + 1, i),
        Some(f) => format!("pkt{}.{}", pkt + 1, f.name()),
        None => format!("pkt{}.Align{}", pkt + 1, slot),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PacketTokens {
    pub slots: [u32; SLOTS_PER_PACKET],
    pub valid: [bool; SLOTS_PER_PACKET],
}

impl PacketTokens {
    /// Raw 16-bit values for real slots, `None` for PAD.
    pub fn values(&self) -> [Option<u16>; SLOTS_PER_PACKET] {
        let mut out = [None; SLOTS_PER_PACKET];
        for (o, &id) in out.iter_mut().zip(&self.slots) {
            *o = token_value(id);
        }
        out
    }
}

pub fn tokenize_packet(p: &ParsedPacket) -> PacketTokens {
    let mut values: Vec<u16> = vec![
        p.ip.ihl as u16,
        p.ip.tos as u16,
        p.ip.total_len,
        p.ip.flags as u16,
        p.ip.ttl as u16,
    ];
    match p.transport {
        Transport::Tcp {
            flags,
            window,
            seq,
            ack,
            urgent,
        } => values.extend_from_slice(&[
            flags as u16,
            window,
            (seq >> 16) as u16,
            seq as u16,
            (ack >> 16) as u16,
            ack as u16,
            urgent,
        ]),
        Transport::Udp { length } => values.push(length),
        Transport::Icmp { icmp_type, code } => values.extend_from_slice(&[icmp_type as u16, code as u16]),
    }
    let header_slots = values.len();
    let mut slots = [PAD; SLOTS_PER_PACKET];
    let mut valid = [false; SLOTS_PER_PACKET];
    for (i, v) in values.into_iter().enumerate() {
        slots[i] = field_token(v);
        valid[i] = true;
    }
    let payload = &p.payload_prefix[..p.payload_prefix.len().min(PAYLOAD_PREFIX_LEN)];
    for (j, pair) in payload.chunks(2).enumerate() {
        let hi = pair[0] as u16;
        let lo = pair.get(1).copied().unwrap_or(0) as u16;
        slots[header_slots + j] = field_token(hi << 8 | lo);
        valid[header_slots + j] = true;
    }
    PacketTokens { slots, valid }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TokenizeError {
    #[error("burst starts at {start} us, before the previous burst at {prev} us")]
    NegativeInterarrival { start: u64, prev: u64 },
    #[error("composition {bursts}x{packets} exceeds the {max_b}x{max_p} grid")]
    CompositionTooLarge {
        bursts: usize,
        packets: usize,
        max_b: usize,
        max_p: usize,
    },
}

/// Per-burst side information, stored raw:
/// `[direction, packets, bytes, interarrival_us, proto]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetadataVector(pub [f32; META_WIDTH]);

impl MetadataVector {
    pub fn direction(&self) -> f32 {
        self.0[0]
    }
    pub fn packets(&self) -> f32 {
        self.0[1]
    }
    pub fn bytes(&self) -> f32 {
        self.0[2]
    }
    pub fn interarrival_us(&self) -> f32 {
        self.0[3]
    }
    pub fn proto(&self) -> f32 {
        self.0[4]
    }
}

pub fn burst_metadata(b: &Burst, prev: Option<&Burst>, proto: u8) -> Result<MetadataVector, TokenizeError> {
    let interarrival = match prev {
        None => 0,
        Some(p) if b.start_time_us < p.start_time_us => {
            return Err(TokenizeError::NegativeInterarrival {
                start: b.start_time_us,
                prev: p.start_time_us,
            })
        }
        Some(p) => b.start_time_us - p.start_time_us,
    };
    Ok(MetadataVector([
        b.direction.as_feature(),
        b.packet_count() as f32,
        b.total_bytes as f32,
        interarrival as f32,
        proto as f32,
    ]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompositionConfig {
    pub bursts: usize,
    pub packets: usize,
}

impl Default for CompositionConfig {
    fn default() -> Self {
        CompositionConfig {
            bursts: MAX_BURSTS,
            packets: MAX_PACKETS_PER_BURST,
        }
    }
}

/// Fixed-shape token grid for one flow.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedFlow {
    /// `MAX_BURSTS x BURST_LEN`, row-major.
    pub tokens: Vec<u32>,
    pub valid: Vec<bool>,
    pub metadata: Vec<MetadataVector>,
    pub proto: u8,
    pub label: Option<i32>,
}

impl TokenizedFlow {
    pub fn empty(proto: u8) -> Self {
        TokenizedFlow {
            tokens: vec![PAD; GRID_LEN],
            valid: vec![false; GRID_LEN],
            metadata: vec![MetadataVector::default(); MAX_BURSTS],
            proto,
            label: None,
        }
    }

    #[inline]
    pub fn index(burst: usize, position: usize) -> usize {
        burst * BURST_LEN + position
    }

    pub fn token(&self, burst: usize, position: usize) -> u32 {
        self.tokens[Self::index(burst, position)]
    }

    pub fn is_valid(&self, burst: usize, position: usize) -> bool {
        self.valid[Self::index(burst, position)]
    }

    pub fn burst_valid(&self, burst: usize) -> bool {
        self.is_valid(burst, 0)
    }

    pub fn valid_burst_count(&self) -> usize {
        (0..MAX_BURSTS).filter(|&b| self.burst_valid(b)).count()
    }

    /// Number of valid field tokens (CLS excluded).
    pub fn field_token_count(&self) -> usize {
        (0..MAX_BURSTS)
            .map(|b| (1..BURST_LEN).filter(|&p| self.is_valid(b, p)).count())
            .sum()
    }

    /// Mark burst `b` absent: all PAD, invalid, zero metadata.
    pub fn clear_burst(&mut self, b: usize) {
        for p in 0..BURST_LEN {
            let i = Self::index(b, p);
            self.tokens[i] = PAD;
            self.valid[i] = false;
        }
        self.metadata[b] = MetadataVector::default();
    }
}

/// Lay out already-segmented bursts on the grid.
pub fn tokenize_bursts(
    bursts: &[Burst],
    proto: u8,
    comp: &CompositionConfig,
) -> Result<TokenizedFlow, TokenizeError> {
    if comp.bursts > MAX_BURSTS || comp.packets > MAX_PACKETS_PER_BURST {
        return Err(TokenizeError::CompositionTooLarge {
            bursts: comp.bursts,
            packets: comp.packets,
            max_b: MAX_BURSTS,
            max_p: MAX_PACKETS_PER_BURST,
        });
    }
    let mut tf = TokenizedFlow::empty(proto);
    for (b, burst) in bursts.iter().take(comp.bursts).enumerate() {
        let prev = b.checked_sub(1).map(|i| &bursts[i]);
        tf.metadata[b] = burst_metadata(burst, prev, proto)?;
        let row = b * BURST_LEN;
        tf.tokens[row] = CLS_B;
        tf.valid[row] = true;
        for (k, p) in burst.packets.iter().take(comp.packets).enumerate() {
            let pt = tokenize_packet(p);
            let base = row + 1 + k * SLOTS_PER_PACKET;
            tf.tokens[base..base + SLOTS_PER_PACKET].copy_from_slice(&pt.slots);
            tf.valid[base..base + SLOTS_PER_PACKET].copy_from_slice(&pt.valid);
        }
    }
    Ok(tf)
}

pub fn tokenize_flow(
    flow: &Flow,
    comp: &CompositionConfig,
    gap_threshold_us: u64,
) -> Result<TokenizedFlow, TokenizeError> {
    let bursts = segment_bursts(flow, gap_threshold_us);
    tokenize_bursts(&bursts, flow.key.proto, comp)
}
