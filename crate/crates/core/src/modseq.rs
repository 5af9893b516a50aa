//! Interleaved image/text token layouts.
//!
//! A [`ModalitySequence`] records, for every token position, whether the token
//! is text or belongs to an image block. Every mask, attention call and
//! rendered sample is defined over one of these.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Tokens one image expands to at full scale.
pub const DEFAULT_IMAGE_TOKENS: usize = 256;
/// Sequence cap at full scale.
pub const DEFAULT_MAX_SEQUENCE_LENGTH: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SeqError {
    #[error("empty sequence")]
    Empty,
    #[error("segment {index} has zero tokens")]
    ZeroLengthSegment { index: usize },
    #[error("image block {block_id} is split (resumes at position {position})")]
    SplitBlock { block_id: u32, position: usize },
    #[error("image block {block_id} at position {position} is out of order")]
    BlockOrder { block_id: u32, position: usize },
    #[error("bad layout spec {spec:?}: {reason}")]
    BadSpec { spec: String, reason: String },
    #[error("invalid layout: {0}")]
    Layout(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Text,
    Image,
}

/// Per-token modality. Image tokens carry the 1-based id of their image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModalityTag {
    Text,
    Image { block_id: u32 },
}

impl ModalityTag {
    pub fn kind(self) -> Modality {
        match self {
            ModalityTag::Text => Modality::Text,
            ModalityTag::Image { .. } => Modality::Image,
        }
    }

    pub fn block_id(self) -> Option<u32> {
        match self {
            ModalityTag::Text => None,
            ModalityTag::Image { block_id } => Some(block_id),
        }
    }

    pub fn is_text(self) -> bool {
        matches!(self, ModalityTag::Text)
    }

    pub fn is_image(self) -> bool {
        !self.is_text()
    }
}

/// Half-open span `[start, end)` of one image's tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageBlock {
    pub block_id: u32,
    pub start: usize,
    pub end: usize,
}

impl ImageBlock {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn contains(&self, position: usize) -> bool {
        (self.start..self.end).contains(&position)
    }
}

/// A validated, non-empty token layout with contiguous, increasing image blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModalitySequence {
    tags: Vec<ModalityTag>,
}

impl ModalitySequence {
    /// Validates contiguity and ordering of image blocks.
    pub fn from_tags(tags: Vec<ModalityTag>) -> Result<Self, SeqError> {
        if tags.is_empty() {
            return Err(SeqError::Empty);
        }
        let mut last_block: Option<u32> = None;
        let mut prev: Option<ModalityTag> = None;
        for (position, &tag) in tags.iter().enumerate() {
            if let ModalityTag::Image { block_id } = tag {
                let continues = prev == Some(tag);
                if !continues {
                    match last_block {
                        Some(b) if b == block_id => {
                            return Err(SeqError::SplitBlock { block_id, position })
                        }
                        Some(b) if block_id < b => {
                            return Err(SeqError::BlockOrder { block_id, position })
                        }
                        _ => {}
                    }
                    last_block = Some(block_id);
                }
            }
            prev = Some(tag);
        }
        Ok(Self { tags })
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    /// Always false; kept for clippy's `len_without_is_empty`.
    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn tags(&self) -> &[ModalityTag] {
        &self.tags
    }

    pub fn tag(&self, position: usize) -> ModalityTag {
        self.tags[position]
    }

    pub fn is_text(&self, position: usize) -> bool {
        self.tags[position].is_text()
    }

    pub fn has_images(&self) -> bool {
        self.tags.iter().any(|t| t.is_image())
    }

    /// One span per image block, in block order.
    pub fn image_blocks(&self) -> Vec<ImageBlock> {
        let mut blocks: Vec<ImageBlock> = Vec::new();
        for (position, tag) in self.tags.iter().enumerate() {
            if let ModalityTag::Image { block_id } = *tag {
                match blocks.last_mut() {
                    Some(b) if b.block_id == block_id && b.end == position => b.end += 1,
                    _ => blocks.push(ImageBlock {
                        block_id,
                        start: position,
                        end: position + 1,
                    }),
                }
            }
        }
        blocks
    }

    /// Run-length view of the tags. Adjacent image blocks stay separate runs.
    pub fn segments(&self) -> Vec<(Modality, usize)> {
        let mut out: Vec<(Modality, usize)> = Vec::new();
        let mut prev: Option<ModalityTag> = None;
        for &tag in &self.tags {
            if prev == Some(tag) {
                out.last_mut().expect("run started").1 += 1;
            } else {
                out.push((tag.kind(), 1));
            }
            prev = Some(tag);
        }
        out
    }
}

/// Builds a layout from `(kind, token_count)` runs. Image runs receive block
/// ids 1, 2, ... in order; each image run is its own block.
pub fn build_sequence(segments: &[(Modality, usize)]) -> Result<ModalitySequence, SeqError> {
    if segments.is_empty() {
        return Err(SeqError::Empty);
    }
    let mut tags = Vec::with_capacity(segments.iter().map(|s| s.1).sum());
    let mut next_block = 1u32;
    for (index, &(kind, count)) in segments.iter().enumerate() {
        if count == 0 {
            return Err(SeqError::ZeroLengthSegment { index });
        }
        let tag = match kind {
            Modality::Text => ModalityTag::Text,
            Modality::Image => {
                let t = ModalityTag::Image {
                    block_id: next_block,
                };
                next_block += 1;
                t
            }
        };
        tags.extend(std::iter::repeat_n(tag, count));
    }
    ModalitySequence::from_tags(tags)
}

/// Parsed form of the `"i3,t7"` layout mini-grammar: comma-separated runs,
/// `i<N>` for an image block of N tokens and `t<N>` for N text tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutSpec(pub Vec<(Modality, usize)>);

impl LayoutSpec {
    pub fn build(&self) -> Result<ModalitySequence, SeqError> {
        build_sequence(&self.0)
    }
}

impl FromStr for LayoutSpec {
    type Err = SeqError;

    fn from_str(spec: &str) -> Result<Self, SeqError> {
        let bad = |reason: String| SeqError::BadSpec {
            spec: spec.to_string(),
            reason,
        };
        let mut segments = Vec::new();
        for part in spec.split(',') {
            let part = part.trim();
            let mut chars = part.chars();
            let kind = match chars.next() {
                Some('i') | Some('I') => Modality::Image,
                Some('t') | Some('T') => Modality::Text,
                Some(c) => return Err(bad(format!("unknown segment kind '{c}'"))),
                None => return Err(bad("empty segment".into())),
            };
            let count: usize = chars
                .as_str()
                .parse()
                .map_err(|_| bad(format!("segment '{part}' needs a token count")))?;
            if count == 0 {
                return Err(bad(format!("segment '{part}' has zero tokens")));
            }
            segments.push((kind, count));
        }
        Ok(LayoutSpec(segments))
    }
}

impl fmt::Display for LayoutSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (idx, (kind, count)) in self.0.iter().enumerate() {
            if idx > 0 {
                f.write_str(",")?;
            }
            let c = match kind {
                Modality::Text => 't',
                Modality::Image => 'i',
            };
            write!(f, "{c}{count}")?;
        }
        Ok(())
    }
}

/// Token-layout limits used when expanding images and rendering templates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LayoutConfig {
    image_token_count: usize,
    max_sequence_length: usize,
}

impl LayoutConfig {
    pub fn new(image_token_count: usize, max_sequence_length: usize) -> Result<Self, SeqError> {
        if image_token_count == 0 {
            return Err(SeqError::Layout("image_token_count must be >= 1".into()));
        }
        if max_sequence_length < image_token_count {
            return Err(SeqError::Layout(format!(
                "max_sequence_length {max_sequence_length} is below image_token_count {image_token_count}"
            )));
        }
        Ok(Self {
            image_token_count,
            max_sequence_length,
        })
    }

    pub fn image_token_count(&self) -> usize {
        self.image_token_count
    }

    pub fn max_sequence_length(&self) -> usize {
        self.max_sequence_length
    }
}

impl Default for LayoutConfig {
    fn default() -> Self {
        Self {
            image_token_count: DEFAULT_IMAGE_TOKENS,
            max_sequence_length: DEFAULT_MAX_SEQUENCE_LENGTH,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use Modality::{Image, Text};

    #[test]
    fn one_image_then_text() {
        let seq = build_sequence(&[(Image, 3), (Text, 7)]).unwrap();
        assert_eq!(seq.len(), 10);
        for i in 0..3 {
            assert_eq!(seq.tag(i), ModalityTag::Image { block_id: 1 });
        }
        for i in 3..10 {
            assert_eq!(seq.tag(i), ModalityTag::Text);
        }
        assert_eq!(
            seq.image_blocks(),
            vec![ImageBlock {
                block_id: 1,
                start: 0,
                end: 3
            }]
        );
    }

    #[test]
    fn text_only_has_no_blocks() {
        let seq = build_sequence(&[(Text, 5)]).unwrap();
        assert_eq!(seq.len(), 5);
        assert!(seq.tags().iter().all(|t| t.block_id().is_none()));
        assert!(seq.image_blocks().is_empty());
    }

    #[test]
    fn two_blocks_positions() {
        let seq =
            build_sequence(&[(Text, 2), (Image, 4), (Text, 3), (Image, 4), (Text, 1)]).unwrap();
        assert_eq!(seq.len(), 14);
        let spans: Vec<_> = seq
            .image_blocks()
            .iter()
            .map(|b| (b.block_id, b.start, b.end))
            .collect();
        assert_eq!(spans, vec![(1, 2, 6), (2, 9, 13)]);
    }

    #[test]
    fn empty_and_zero_segments_rejected() {
        assert_eq!(build_sequence(&[]), Err(SeqError::Empty));
        assert_eq!(
            build_sequence(&[(Text, 2), (Image, 0)]),
            Err(SeqError::ZeroLengthSegment { index: 1 })
        );
    }

    #[test]
    fn split_and_unordered_blocks_rejected() {
        let b = |id| ModalityTag::Image { block_id: id };
        let split = vec![b(1), ModalityTag::Text, b(1)];
        assert!(matches!(
            ModalitySequence::from_tags(split),
            Err(SeqError::SplitBlock {
                block_id: 1,
                position: 2
            })
        ));
        let unordered = vec![b(2), ModalityTag::Text, b(1)];
        assert!(matches!(
            ModalitySequence::from_tags(unordered),
            Err(SeqError::BlockOrder { .. })
        ));
        // adjacent distinct blocks are fine
        assert!(ModalitySequence::from_tags(vec![b(1), b(2)]).is_ok());
    }

    #[test]
    fn layout_spec_grammar() {
        let spec: LayoutSpec = "i3,t7".parse().unwrap();
        assert_eq!(spec.0, vec![(Image, 3), (Text, 7)]);
        assert_eq!(spec.to_string(), "i3,t7");
        assert!("x9".parse::<LayoutSpec>().is_err());
        assert!("i".parse::<LayoutSpec>().is_err());
        assert!("t0".parse::<LayoutSpec>().is_err());
        assert!("".parse::<LayoutSpec>().is_err());
    }

    #[test]
    fn layout_config_bounds() {
        let d = LayoutConfig::default();
        assert_eq!(d.image_token_count(), 256);
        assert_eq!(d.max_sequence_length(), 4096);
        assert!(LayoutConfig::new(0, 10).is_err());
        assert!(LayoutConfig::new(8, 4).is_err());
        assert!(LayoutConfig::new(4, 4).is_ok());
    }

    /// Canonical segment lists: no two adjacent text runs (they would merge).
    fn canonical_segments() -> impl Strategy<Value = Vec<(Modality, usize)>> {
        prop::collection::vec((prop::bool::ANY, 1usize..6), 1..10).prop_map(|raw| {
            let mut out: Vec<(Modality, usize)> = Vec::new();
            for (is_image, n) in raw {
                let kind = if is_image { Image } else { Text };
                if kind == Text && out.last().map(|s| s.0) == Some(Text) {
                    continue;
                }
                out.push((kind, n));
            }
            out
        })
    }

    proptest! {
        #[test]
        fn segments_round_trip(segs in canonical_segments()) {
            let seq = build_sequence(&segs).unwrap();
            prop_assert_eq!(seq.segments(), segs);
        }

        #[test]
        fn blocks_cover_image_positions(segs in canonical_segments()) {
            let seq = build_sequence(&segs).unwrap();
            let blocks = seq.image_blocks();
            for w in blocks.windows(2) {
                prop_assert!(w[0].end <= w[1].start);
                prop_assert!(w[0].block_id < w[1].block_id);
            }
            for p in 0..seq.len() {
                let covered = blocks.iter().filter(|b| b.contains(p)).count();
                prop_assert_eq!(covered, usize::from(seq.tag(p).is_image()));
            }
        }
    }
}
