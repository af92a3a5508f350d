//! Data side of the netFound pipeline: pcap traces in, fixed-shape token
//! grids out.
//!
//! The stages are deliberately separate so each can be tested on its own:
//!
//! * [`pcap`] reads and writes classic libpcap capture files.
//! * [`packet`] decodes Ethernet/IPv4/TCP/UDP/ICMP headers into [`ParsedPacket`]s.
//! * [`flow`] groups packets into bidirectional flows and splits flows into
//!   direction-homogeneous bursts.
//! * [`tokenizer`] turns bursts into the 12 x 109 token grid with per-burst
//!   metadata, and [`dataset`] stores those grids in the `NFND` format.
//! * [`synthgen`] produces protocol-consistent synthetic captures.

pub mod dataset;
pub mod flow;
pub mod packet;
pub mod pcap;
pub mod pipeline;
pub mod synthgen;
pub mod tokenizer;

pub use flow::{Burst, CompositionStats, Direction, Endpoint, FilterConfig, Flow, FlowKey};
pub use packet::{IpHeader, ParsedPacket, SkipReason, Transport};
pub use pcap::{LinkType, RawPacketRecord};
pub use tokenizer::{CompositionConfig, MetadataVector, PacketTokens, TokenizedFlow};
