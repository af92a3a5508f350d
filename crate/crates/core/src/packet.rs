//! Ethernet / IPv4 / transport header decoding, and the matching frame
//! encoder used by the synthetic generator.

use std::fmt;
use std::net::Ipv4Addr;

use crate::pcap::{LinkType, RawPacketRecord};

/// Number of application-layer bytes kept per packet.
pub const PAYLOAD_PREFIX_LEN: usize = 12;

pub const PROTO_ICMP: u8 = 1;
pub const PROTO_TCP: u8 = 6;
pub const PROTO_UDP: u8 = 17;

const ETHERTYPE_IPV4: u16 = 0x0800;
const ETHERTYPE_VLAN: u16 = 0x8100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct IpHeader {
    /// Header length in 32-bit words.
    pub ihl: u8,
    pub tos: u8,
    pub total_len: u16,
    /// Reserved / DF / MF bits only; the fragment offset is dropped.
    pub flags: u8,
    pub ttl: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Transport {
    Tcp {
        flags: u8,
        window: u16,
        seq: u32,
        ack: u32,
        urgent: u16,
    },
    Udp {
        length: u16,
    },
    Icmp {
        icmp_type: u8,
        code: u8,
    },
}

impl Transport {
    pub fn proto(&self) -> u8 {
        match self {
            Transport::Tcp { .. } => PROTO_TCP,
            Transport::Udp { .. } => PROTO_UDP,
            Transport::Icmp { .. } => PROTO_ICMP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ParsedPacket {
    pub timestamp_us: u64,
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    /// Zero for ICMP.
    pub src_port: u16,
    pub dst_port: u16,
    pub ip_proto: u8,
    pub ip: IpHeader,
    pub transport: Transport,
    /// At most [`PAYLOAD_PREFIX_LEN`] bytes following the transport header.
    pub payload_prefix: Vec<u8>,
    /// Length of the frame on the wire (pcap original length).
    pub wire_len: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SkipReason {
    NonIpv4,
    UnsupportedTransport(u8),
    Truncated,
    MalformedIpHeader,
    NonFirstFragment,
}

impl fmt::Display for SkipReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SkipReason::NonIpv4 => write!(f, "non-ipv4"),
            SkipReason::UnsupportedTransport(p) => write!(f, "unsupported-transport-{p}"),
            SkipReason::Truncated => write!(f, "truncated"),
            SkipReason::MalformedIpHeader => write!(f, "malformed-ip-header"),
            SkipReason::NonFirstFragment => write!(f, "non-first-fragment"),
        }
    }
}

fn be16(b: &[u8], at: usize) -> u16 {
    u16::from_be_bytes([b[at], b[at + 1]])
}

fn be32(b: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Decode one captured frame. Anything that is not a complete first
/// fragment of an IPv4 TCP/UDP/ICMP packet is skipped with a reason.
pub fn parse_packet(rec: &RawPacketRecord, link: LinkType) -> Result<ParsedPacket, SkipReason> {
    let ip_bytes = match link {
        LinkType::RawIp => &rec.captured[..],
        LinkType::Ethernet => {
            let frame = &rec.captured;
            if frame.len() < 14 {
                return Err(SkipReason::Truncated);
            }
            let mut ethertype = be16(frame, 12);
            let mut start = 14;
            if ethertype == ETHERTYPE_VLAN {
                if frame.len() < 18 {
                    return Err(SkipReason::Truncated);
                }
                ethertype = be16(frame, 16);
                start = 18;
            }
            if ethertype != ETHERTYPE_IPV4 {
                return Err(SkipReason::NonIpv4);
            }
            &frame[start..]
        }
    };
    parse_ipv4(ip_bytes, rec.timestamp_us, rec.original_length)
}

fn parse_ipv4(b: &[u8], timestamp_us: u64, wire_len: u32) -> Result<ParsedPacket, SkipReason> {
    if b.is_empty() {
        return Err(SkipReason::Truncated);
    }
    if b[0] >> 4 != 4 {
        return Err(SkipReason::NonIpv4);
    }
    if b.len() < 20 {
        return Err(SkipReason::Truncated);
    }
    let ihl = b[0] & 0x0F;
    let header_len = ihl as usize * 4;
    if ihl < 5 {
        return Err(SkipReason::MalformedIpHeader);
    }
    if b.len() < header_len {
        return Err(SkipReason::Truncated);
    }
    let total_len = be16(b, 2);
    if (total_len as usize) < header_len {
        return Err(SkipReason::MalformedIpHeader);
    }
    let flags = b[6] >> 5;
    let frag_offset = be16(b, 6) & 0x1FFF;
    if frag_offset != 0 {
        return Err(SkipReason::NonFirstFragment);
    }
    let ip = IpHeader {
        ihl,
        tos: b[1],
        total_len,
        flags,
        ttl: b[8],
    };
    let ip_proto = b[9];
    let src_ip = Ipv4Addr::new(b[12], b[13], b[14], b[15]);
    let dst_ip = Ipv4Addr::new(b[16], b[17], b[18], b[19]);
    // Ethernet trailer padding beyond the datagram is not payload.
    let end = b.len().min(total_len as usize);
    let l4 = &b[header_len..end];

    let (transport, src_port, dst_port, l4_header_len) = match ip_proto {
        PROTO_TCP => {
            if l4.len() < 20 {
                return Err(SkipReason::Truncated);
            }
            let data_offset = (l4[12] >> 4) as usize * 4;
            if data_offset < 20 {
                return Err(SkipReason::MalformedIpHeader);
            }
            if l4.len() < data_offset {
                return Err(SkipReason::Truncated);
            }
            let t = Transport::Tcp {
                flags: l4[13],
                window: be16(l4, 14),
                seq: be32(l4, 4),
                ack: be32(l4, 8),
                urgent: be16(l4, 18),
            };
            (t, be16(l4, 0), be16(l4, 2), data_offset)
        }
        PROTO_UDP => {
            if l4.len() < 8 {
                return Err(SkipReason::Truncated);
            }
            (Transport::Udp { length: be16(l4, 4) }, be16(l4, 0), be16(l4, 2), 8)
        }
        PROTO_ICMP => {
            if l4.len() < 8 {
                return Err(SkipReason::Truncated);
            }
            (
                Transport::Icmp {
                    icmp_type: l4[0],
                    code: l4[1],
                },
                0,
                0,
                8,
            )
        }
        other => return Err(SkipReason::UnsupportedTransport(other)),
    };
    let payload = &l4[l4_header_len..];
    let take = payload.len().min(PAYLOAD_PREFIX_LEN);
    Ok(ParsedPacket {
        timestamp_us,
        src_ip,
        dst_ip,
        src_port,
        dst_port,
        ip_proto,
        ip,
        transport,
        payload_prefix: payload[..take].to_vec(),
        wire_len,
    })
}

/// Per-reason tally of skipped packets.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SkipCounts(pub std::collections::BTreeMap<SkipReason, usize>);

impl SkipCounts {
    pub fn record(&mut self, reason: SkipReason) {
        *self.0.entry(reason).or_default() += 1;
    }

    pub fn total(&self) -> usize {
        self.0.values().sum()
    }
}

/// Parse every record, keeping file order, and tally the skips.
pub fn parse_all(records: &[RawPacketRecord], link: LinkType) -> (Vec<ParsedPacket>, SkipCounts) {
    let mut packets = Vec::with_capacity(records.len());
    let mut skips = SkipCounts::default();
    for rec in records {
        match parse_packet(rec, link) {
            Ok(p) => packets.push(p),
            Err(reason) => skips.record(reason),
        }
    }
    (packets, skips)
}

fn checksum(chunks: &[&[u8]]) -> u16 {
    let mut sum: u32 = 0;
    for chunk in chunks {
        let mut it = chunk.chunks_exact(2);
        for w in &mut it {
            sum += u16::from_be_bytes([w[0], w[1]]) as u32;
        }
        if let [last] = it.remainder() {
            sum += (*last as u32) << 8;
        }
    }
    while sum >> 16 != 0 {
        sum = (sum & 0xFFFF) + (sum >> 16);
    }
    !(sum as u16)
}

/// Encode a packet as an Ethernet II frame carrying the full `payload`.
///
/// Header fields come from `p`; `p.ip.total_len`, the UDP length and the
/// payload prefix are expected to be consistent with `payload` (the
/// generator guarantees this). Checksums are computed.
pub fn encode_frame(p: &ParsedPacket, payload: &[u8]) -> Vec<u8> {
    let mut l4 = Vec::with_capacity(20 + payload.len());
    match p.transport {
        Transport::Tcp {
            flags,
            window,
            seq,
            ack,
            urgent,
        } => {
            l4.extend_from_slice(&p.src_port.to_be_bytes());
            l4.extend_from_slice(&p.dst_port.to_be_bytes());
            l4.extend_from_slice(&seq.to_be_bytes());
            l4.extend_from_slice(&ack.to_be_bytes());
            l4.push(5 << 4);
            l4.push(flags);
            l4.extend_from_slice(&window.to_be_bytes());
            l4.extend_from_slice(&[0, 0]);
            l4.extend_from_slice(&urgent.to_be_bytes());
        }
        Transport::Udp { length } => {
            l4.extend_from_slice(&p.src_port.to_be_bytes());
            l4.extend_from_slice(&p.dst_port.to_be_bytes());
            l4.extend_from_slice(&length.to_be_bytes());
            l4.extend_from_slice(&[0, 0]);
        }
        Transport::Icmp { icmp_type, code } => {
            l4.extend_from_slice(&[icmp_type, code, 0, 0, 0, 1, 0, 1]);
        }
    }
    l4.extend_from_slice(payload);
    let l4_len = l4.len() as u16;
    match p.transport {
        Transport::Tcp { .. } | Transport::Udp { .. } => {
            let mut pseudo = Vec::with_capacity(12);
            pseudo.extend_from_slice(&p.src_ip.octets());
            pseudo.extend_from_slice(&p.dst_ip.octets());
            pseudo.extend_from_slice(&[0, p.ip_proto]);
            pseudo.extend_from_slice(&l4_len.to_be_bytes());
            let c = checksum(&[&pseudo, &l4]);
            let at = if p.ip_proto == PROTO_TCP { 16 } else { 6 };
            l4[at..at + 2].copy_from_slice(&c.to_be_bytes());
        }
        Transport::Icmp { .. } => {
            let c = checksum(&[&l4]);
            l4[2..4].copy_from_slice(&c.to_be_bytes());
        }
    }

    let mut ip = [0u8; 20];
    ip[0] = 0x40 | (p.ip.ihl & 0x0F);
    ip[1] = p.ip.tos;
    ip[2..4].copy_from_slice(&p.ip.total_len.to_be_bytes());
    ip[4..6].copy_from_slice(&0x1c46u16.to_be_bytes());
    ip[6] = (p.ip.flags & 0x07) << 5;
    ip[8] = p.ip.ttl;
    ip[9] = p.ip_proto;
    ip[12..16].copy_from_slice(&p.src_ip.octets());
    ip[16..20].copy_from_slice(&p.dst_ip.octets());
    let c = checksum(&[&ip]);
    ip[10..12].copy_from_slice(&c.to_be_bytes());

    let mut frame = Vec::with_capacity(14 + 20 + l4.len());
    frame.extend_from_slice(&[0x02, 0, 0, 0, 0, 0x02]);
    frame.extend_from_slice(&[0x02, 0, 0, 0, 0, 0x01]);
    frame.extend_from_slice(&ETHERTYPE_IPV4.to_be_bytes());
    frame.extend_from_slice(&ip);
    frame.extend_from_slice(&l4);
    // Ethernet minimum frame size (without FCS).
    if frame.len() < 60 {
        frame.resize(60, 0);
    }
    frame
}
