use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Modality tag of one sequence position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Segment {
    System,
    Visual,
    Instruction,
    Response,
}

/// Per-position segment tags. Tags form contiguous blocks in the order
/// system, visual, instruction, response, so each index set is a range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentMap {
    lens: [usize; 4],
}

impl SegmentMap {
    pub fn from_lengths(system: usize, visual: usize, instruction: usize, response: usize) -> Self {
        Self {
            lens: [system, visual, instruction, response],
        }
    }

    /// Validates that `tags` are ordered blocks.
    pub fn from_tags(tags: &[Segment]) -> Result<Self> {
        let mut lens = [0usize; 4];
        let mut last = 0usize;
        for (pos, tag) in tags.iter().enumerate() {
            let k = tag_index(*tag);
            if k < last {
                return Err(Error::Contract(format!(
                    "segment tag {tag:?} at position {pos} breaks the system/visual/instruction/response order"
                )));
            }
            last = k;
            lens[k] += 1;
        }
        Ok(Self { lens })
    }

    pub fn len(&self) -> usize {
        self.lens.iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tag(&self, pos: usize) -> Segment {
        let mut end = 0;
        for (k, l) in self.lens.iter().enumerate() {
            end += l;
            if pos < end {
                return SEGMENTS[k];
            }
        }
        panic!("position {pos} outside segment map of length {}", self.len());
    }

    pub fn tags(&self) -> Vec<Segment> {
        (0..self.len()).map(|p| self.tag(p)).collect()
    }

    fn range(&self, k: usize) -> Range<usize> {
        let start: usize = self.lens[..k].iter().sum();
        start..start + self.lens[k]
    }

    /// 𝒮
    pub fn system(&self) -> Range<usize> {
        self.range(0)
    }

    /// 𝒱
    pub fn visual(&self) -> Range<usize> {
        self.range(1)
    }

    /// 𝒯
    pub fn instruction(&self) -> Range<usize> {
        self.range(2)
    }

    pub fn response(&self) -> Range<usize> {
        self.range(3)
    }

    /// Appends one generated position.
    pub fn push_response(&mut self) {
        self.lens[3] += 1;
    }
}

const SEGMENTS: [Segment; 4] = [
    Segment::System,
    Segment::Visual,
    Segment::Instruction,
    Segment::Response,
];

fn tag_index(tag: Segment) -> usize {
    match tag {
        Segment::System => 0,
        Segment::Visual => 1,
        Segment::Instruction => 2,
        Segment::Response => 3,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use Segment::*;

    #[test]
    fn ranges_follow_block_order() {
        let seg = SegmentMap::from_lengths(2, 3, 2, 1);
        assert_eq!(seg.system(), 0..2);
        assert_eq!(seg.visual(), 2..5);
        assert_eq!(seg.instruction(), 5..7);
        assert_eq!(seg.response(), 7..8);
        assert_eq!(seg.tag(4), Visual);
        assert_eq!(SegmentMap::from_tags(&seg.tags()).unwrap(), seg);
    }

    #[test]
    fn out_of_order_tags_rejected() {
        assert!(SegmentMap::from_tags(&[System, Instruction, Visual]).is_err());
    }

    #[test]
    fn response_grows() {
        let mut seg = SegmentMap::from_lengths(1, 1, 1, 0);
        seg.push_response();
        assert_eq!(seg.response(), 3..4);
        assert_eq!(seg.tag(3), Response);
    }
}
