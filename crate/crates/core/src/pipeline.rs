//! Glue between the stages: capture bytes to filtered flows to token grids.

use std::collections::HashMap;

use thiserror::Error;

use crate::flow::{assemble_flows, filter_flows, FilterConfig, Flow, FlowKey};
use crate::packet::{parse_all, SkipCounts};
use crate::pcap::{read_pcap, write_pcap, LinkType, PcapError, PcapWarning};
use crate::synthgen::{corpus_records, generate_flows, label_rows, CorpusOptions, LabelRow, ScenarioSpec};
use crate::tokenizer::{tokenize_flow, CompositionConfig, TokenizeError, TokenizedFlow};

#[derive(Debug, Clone)]
pub struct ExtractedFlows {
    pub flows: Vec<Flow>,
    /// Flows assembled before filtering.
    pub assembled: usize,
    pub skips: SkipCounts,
    pub warnings: Vec<PcapWarning>,
}

pub fn flows_from_pcap(bytes: &[u8], filter: &FilterConfig) -> Result<ExtractedFlows, PcapError> {
    let capture = read_pcap(bytes)?;
    let (packets, skips) = parse_all(&capture.records, capture.link_type);
    let flows = assemble_flows(packets);
    let assembled = flows.len();
    Ok(ExtractedFlows {
        flows: filter_flows(flows, filter),
        assembled,
        skips,
        warnings: capture.warnings,
    })
}

pub type LabelIndex = HashMap<(FlowKey, u64), i32>;

pub fn label_index(rows: &[LabelRow]) -> LabelIndex {
    rows.iter().map(|r| ((r.key, r.first_ts_us), r.class_id)).collect()
}

/// Tokenize flows in order, attaching labels looked up by
/// `(key, first packet timestamp)` when an index is given.
pub fn tokenize_flows(
    flows: &[Flow],
    comp: &CompositionConfig,
    gap_threshold_us: u64,
    labels: Option<&LabelIndex>,
) -> Result<Vec<TokenizedFlow>, TokenizeError> {
    flows
        .iter()
        .map(|f| {
            let mut tf = tokenize_flow(f, comp, gap_threshold_us)?;
            if let Some(index) = labels {
                tf.label = index.get(&(f.key, f.first_timestamp_us())).copied();
            }
            Ok(tf)
        })
        .collect()
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Pcap(#[from] PcapError),
    #[error(transparent)]
    Tokenize(#[from] TokenizeError),
}

/// Labelled token grids for a synthetic corpus. The flows are written to an
/// in-memory capture and read back, so the whole pipeline is exercised.
pub fn synthetic_grids(
    specs: &[ScenarioSpec],
    opts: &CorpusOptions,
    filter: &FilterConfig,
    comp: &CompositionConfig,
    gap_threshold_us: u64,
) -> Result<Vec<TokenizedFlow>, PipelineError> {
    let flows = generate_flows(specs, opts);
    let mut bytes = Vec::new();
    write_pcap(&mut bytes, LinkType::Ethernet, 65_535, &corpus_records(&flows, opts.emission))
        .map_err(PcapError::Io)?;
    let extracted = flows_from_pcap(&bytes, filter)?;
    let index = label_index(&label_rows(&flows));
    Ok(tokenize_flows(&extracted.flows, comp, gap_threshold_us, Some(&index))?)
}
