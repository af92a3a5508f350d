use netfound_core::tokenizer::{TokenizedFlow, BURST_LEN, GRID_LEN, MAX_BURSTS, META_WIDTH, VOCAB_SIZE};
use netfound_tensor::Segment;

use crate::ModelError;

/// One valid burst in a packed batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PackedBurst {
    pub flow: usize,
    /// Burst slot within the flow, `0..MAX_BURSTS`.
    pub slot: usize,
    /// First packed row (the CLS_B token).
    pub start: usize,
    pub len: usize,
}

const NO_ROW: u32 = u32::MAX;

/// Flows packed down to their valid positions.
///
/// Only valid tokens of valid bursts become rows, so PAD positions cannot
/// influence anything downstream.
#[derive(Debug, Clone)]
pub struct FlowBatch {
    pub flow_count: usize,
    pub tokens: Vec<usize>,
    /// Position within the burst, `0..BURST_LEN`.
    pub positions: Vec<usize>,
    /// Packed burst index of each row.
    pub row_burst: Vec<usize>,
    pub bursts: Vec<PackedBurst>,
    /// Raw metadata of each packed burst.
    pub metadata: Vec<[f32; META_WIDTH]>,
    /// Packed burst index for each flow's burst slots.
    pub slots: Vec<[Option<usize>; MAX_BURSTS]>,
    pub protos: Vec<u8>,
    grid_rows: Vec<u32>,
}

impl FlowBatch {
    pub fn new(flows: &[&TokenizedFlow]) -> Result<Self, ModelError> {
        let mut b = FlowBatch {
            flow_count: flows.len(),
            tokens: Vec::new(),
            positions: Vec::new(),
            row_burst: Vec::new(),
            bursts: Vec::new(),
            metadata: Vec::new(),
            slots: Vec::with_capacity(flows.len()),
            protos: Vec::with_capacity(flows.len()),
            grid_rows: vec![NO_ROW; flows.len() * GRID_LEN],
        };
        for (fi, f) in flows.iter().enumerate() {
            let mut slots = [None; MAX_BURSTS];
            for (s, slot) in slots.iter_mut().enumerate() {
                if !f.burst_valid(s) {
                    continue;
                }
                let bi = b.bursts.len();
                let start = b.tokens.len();
                for p in 0..BURST_LEN {
                    let g = TokenizedFlow::index(s, p);
                    if !f.valid[g] {
                        continue;
                    }
                    let t = f.tokens[g] as usize;
                    if t >= VOCAB_SIZE {
                        return Err(ModelError::TokenOutOfRange { flow: fi, index: g, token: f.tokens[g] });
                    }
                    b.grid_rows[fi * GRID_LEN + g] = b.tokens.len() as u32;
                    b.tokens.push(t);
                    b.positions.push(p);
                    b.row_burst.push(bi);
                }
                b.bursts.push(PackedBurst {
                    flow: fi,
                    slot: s,
                    start,
                    len: b.tokens.len() - start,
                });
                b.metadata.push(f.metadata[s].0);
                *slot = Some(bi);
            }
            b.slots.push(slots);
            b.protos.push(f.proto);
        }
        Ok(b)
    }

    pub fn rows(&self) -> usize {
        self.tokens.len()
    }

    /// Packed row of grid index `g` in flow `flow`, if that position is valid.
    pub fn row(&self, flow: usize, g: usize) -> Option<usize> {
        match self.grid_rows[flow * GRID_LEN + g] {
            NO_ROW => None,
            r => Some(r as usize),
        }
    }

    pub fn burst_segments(&self) -> Vec<Segment> {
        self.bursts.iter().map(|b| Segment::new(b.start, b.len)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use netfound_core::tokenizer::{field_token, CLS_B};

    #[test]
    fn packs_only_valid_positions() {
        let mut f = TokenizedFlow::empty(6);
        for (s, n) in [(0usize, 3usize), (2, 1)] {
            f.tokens[TokenizedFlow::index(s, 0)] = CLS_B;
            f.valid[TokenizedFlow::index(s, 0)] = true;
            for p in 1..=n {
                f.tokens[TokenizedFlow::index(s, p)] = field_token(p as u16);
                f.valid[TokenizedFlow::index(s, p)] = true;
            }
        }
        // A stray token in an invalid position is ignored.
        f.tokens[TokenizedFlow::index(1, 4)] = field_token(9);
        let b = FlowBatch::new(&[&f, &f]).unwrap();
        assert_eq!(b.rows(), 12);
        assert_eq!(b.bursts.len(), 4);
        assert_eq!(b.slots[1], {
            let mut s = [None; MAX_BURSTS];
            s[0] = Some(2);
            s[2] = Some(3);
            s
        });
        assert_eq!(b.row(1, TokenizedFlow::index(2, 1)), Some(11));
        assert_eq!(b.row(0, TokenizedFlow::index(1, 4)), None);
        assert_eq!(b.positions[..4], [0, 1, 2, 3]);
    }

    #[test]
    fn rejects_out_of_range_ids() {
        let mut f = TokenizedFlow::empty(6);
        f.tokens[0] = VOCAB_SIZE as u32;
        f.valid[0] = true;
        assert!(matches!(FlowBatch::new(&[&f]), Err(ModelError::TokenOutOfRange { .. })));
    }
}
