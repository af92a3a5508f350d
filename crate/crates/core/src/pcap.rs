//! Classic libpcap file format.
//!
//! Both byte orders are accepted, as is the nanosecond-resolution magic.
//! The writer always emits little-endian microsecond files.

use std::io::{self, Write};

use thiserror::Error;

pub const MAGIC_MICROS: u32 = 0xA1B2_C3D4;
pub const MAGIC_NANOS: u32 = 0xA1B2_3C4D;

const GLOBAL_HEADER_LEN: usize = 24;
const RECORD_HEADER_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum PcapError {
    #[error("pcap global header truncated ({0} bytes)")]
    TruncatedHeader(usize),
    #[error("unrecognised pcap magic 0x{0:08x}")]
    BadMagic(u32),
    #[error("unsupported link type {0}")]
    UnsupportedLinkType(u32),
    #[error("record at offset {offset} captures {captured} bytes but original length is {original}")]
    CaptureExceedsOriginal {
        offset: usize,
        captured: u32,
        original: u32,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LinkType {
    Ethernet,
    RawIp,
}

impl LinkType {
    pub fn code(self) -> u32 {
        match self {
            LinkType::Ethernet => 1,
            LinkType::RawIp => 101,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            1 => Some(LinkType::Ethernet),
            101 => Some(LinkType::RawIp),
            _ => None,
        }
    }
}

/// One captured frame as it sits in the file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawPacketRecord {
    pub timestamp_us: u64,
    pub captured: Vec<u8>,
    pub original_length: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PcapWarning {
    /// The file ended part-way through a record; the partial record was dropped.
    TruncatedRecord { offset: usize },
    /// A record claimed more captured bytes than the snap length; it was clipped.
    ClippedToSnapLength { offset: usize },
}

#[derive(Debug, Clone)]
pub struct PcapCapture {
    pub link_type: LinkType,
    pub snaplen: u32,
    pub nanosecond: bool,
    pub records: Vec<RawPacketRecord>,
    pub warnings: Vec<PcapWarning>,
}

#[derive(Clone, Copy)]
enum Endian {
    Little,
    Big,
}

impl Endian {
    fn u32(self, b: &[u8]) -> u32 {
        let a = [b[0], b[1], b[2], b[3]];
        match self {
            Endian::Little => u32::from_le_bytes(a),
            Endian::Big => u32::from_be_bytes(a),
        }
    }
}

/// Decode an in-memory pcap file.
pub fn read_pcap(bytes: &[u8]) -> Result<PcapCapture, PcapError> {
    if bytes.len() < GLOBAL_HEADER_LEN {
        return Err(PcapError::TruncatedHeader(bytes.len()));
    }
    let le = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let (endian, nanosecond) = match le {
        MAGIC_MICROS => (Endian::Little, false),
        MAGIC_NANOS => (Endian::Little, true),
        m if m.swap_bytes() == MAGIC_MICROS => (Endian::Big, false),
        m if m.swap_bytes() == MAGIC_NANOS => (Endian::Big, true),
        m => return Err(PcapError::BadMagic(m)),
    };
    let snaplen = endian.u32(&bytes[16..20]);
    let link_code = endian.u32(&bytes[20..24]);
    let link_type =
        LinkType::from_code(link_code).ok_or(PcapError::UnsupportedLinkType(link_code))?;

    let mut records = Vec::new();
    let mut warnings = Vec::new();
    let mut offset = GLOBAL_HEADER_LEN;
    while offset < bytes.len() {
        if bytes.len() - offset < RECORD_HEADER_LEN {
            warnings.push(PcapWarning::TruncatedRecord { offset });
            break;
        }
        let hdr = &bytes[offset..offset + RECORD_HEADER_LEN];
        let ts_sec = endian.u32(&hdr[0..4]) as u64;
        let ts_frac = endian.u32(&hdr[4..8]) as u64;
        let incl_len = endian.u32(&hdr[8..12]);
        let orig_len = endian.u32(&hdr[12..16]);
        if incl_len > orig_len {
            return Err(PcapError::CaptureExceedsOriginal {
                offset,
                captured: incl_len,
                original: orig_len,
            });
        }
        let data_start = offset + RECORD_HEADER_LEN;
        let data_end = data_start + incl_len as usize;
        if data_end > bytes.len() {
            warnings.push(PcapWarning::TruncatedRecord { offset });
            break;
        }
        let mut captured = bytes[data_start..data_end].to_vec();
        if snaplen > 0 && captured.len() > snaplen as usize {
            captured.truncate(snaplen as usize);
            warnings.push(PcapWarning::ClippedToSnapLength { offset });
        }
        let frac_us = if nanosecond { ts_frac / 1000 } else { ts_frac };
        records.push(RawPacketRecord {
            timestamp_us: ts_sec * 1_000_000 + frac_us,
            captured,
            original_length: orig_len,
        });
        offset = data_end;
    }
    Ok(PcapCapture {
        link_type,
        snaplen,
        nanosecond,
        records,
        warnings,
    })
}

/// Write a little-endian microsecond pcap file.
pub fn write_pcap<W: Write>(
    mut sink: W,
    link_type: LinkType,
    snaplen: u32,
    records: &[RawPacketRecord],
) -> io::Result<()> {
    write_global_header(&mut sink, link_type, snaplen)?;
    for rec in records {
        write_record(&mut sink, rec)?;
    }
    sink.flush()
}

pub fn write_global_header<W: Write>(sink: &mut W, link_type: LinkType, snaplen: u32) -> io::Result<()> {
    let mut hdr = [0u8; GLOBAL_HEADER_LEN];
    hdr[0..4].copy_from_slice(&MAGIC_MICROS.to_le_bytes());
    hdr[4..6].copy_from_slice(&2u16.to_le_bytes());
    hdr[6..8].copy_from_slice(&4u16.to_le_bytes());
    hdr[16..20].copy_from_slice(&snaplen.to_le_bytes());
    hdr[20..24].copy_from_slice(&link_type.code().to_le_bytes());
    sink.write_all(&hdr)
}

pub fn write_record<W: Write>(sink: &mut W, rec: &RawPacketRecord) -> io::Result<()> {
    let secs = u32::try_from(rec.timestamp_us / 1_000_000)
        .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "timestamp beyond 2106"))?;
    let micros = (rec.timestamp_us % 1_000_000) as u32;
    let mut hdr = [0u8; RECORD_HEADER_LEN];
    hdr[0..4].copy_from_slice(&secs.to_le_bytes());
    hdr[4..8].copy_from_slice(&micros.to_le_bytes());
    hdr[8..12].copy_from_slice(&(rec.captured.len() as u32).to_le_bytes());
    hdr[12..16].copy_from_slice(&rec.original_length.to_le_bytes());
    sink.write_all(&hdr)?;
    sink.write_all(&rec.captured)
}
