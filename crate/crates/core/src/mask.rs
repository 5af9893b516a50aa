//! Integer attention masks for causal, cross and multi-modal causal attention.
//!
//! Entry values: `0` forbids the edge, `1` allows it with a text key, `2`
//! allows it with an image key. The boolean partitions `M1 = [M == 1]` and
//! `M2 = [M == 2]` drive the two softmaxes of MMCA.

use std::fmt;
use std::str::FromStr;

use crate::modseq::ModalitySequence;

pub const FORBIDDEN: u8 = 0;
pub const TEXT_KEY: u8 = 1;
pub const IMAGE_KEY: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum AttentionVariant {
    /// Standard lower-triangular attention; image tokens are treated as text.
    #[serde(rename = "causal")]
    CausalOnly,
    /// Causal text attention plus text-to-image attention through separate
    /// key/value parameters.
    #[serde(rename = "cross")]
    CausalPlusCross,
    /// Image tokens attend within their own image; text tokens run two
    /// independently normalized softmaxes over previous text and image keys.
    #[serde(rename = "mmca")]
    Mmca,
}

impl AttentionVariant {
    pub const ALL: [AttentionVariant; 3] = [
        AttentionVariant::CausalOnly,
        AttentionVariant::CausalPlusCross,
        AttentionVariant::Mmca,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttentionVariant::CausalOnly => "causal",
            AttentionVariant::CausalPlusCross => "cross",
            AttentionVariant::Mmca => "mmca",
        }
    }
}

impl fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttentionVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "causal" | "ca" => Ok(AttentionVariant::CausalOnly),
            "cross" | "cra" => Ok(AttentionVariant::CausalPlusCross),
            "mmca" => Ok(AttentionVariant::Mmca),
            other => Err(format!(
                "unknown attention variant '{other}' (causal, cross, mmca)"
            )),
        }
    }
}

/// How an image token attends inside its own image.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, Default, serde::Serialize, serde::Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum ImageSelfAttention {
    /// Bidirectional attention over every token of the same image.
    #[default]
    Block,
    /// Each image token attends only to itself.
    Diagonal,
}

impl FromStr for ImageSelfAttention {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "block" => Ok(ImageSelfAttention::Block),
            "diagonal" => Ok(ImageSelfAttention::Diagonal),
            other => Err(format!(
                "unknown image self-attention mode '{other}' (block, diagonal)"
            )),
        }
    }
}

/// Square `d×d` mask with entries in `{0, 1, 2}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MmcaMask {
    d: usize,
    entries: Vec<u8>,
}

impl MmcaMask {
    /// Returns `None` if the data is not `d×d` or holds a value outside `{0,1,2}`.
    pub fn from_entries(d: usize, entries: Vec<u8>) -> Option<Self> {
        if entries.len() != d * d || entries.iter().any(|&e| e > IMAGE_KEY) {
            return None;
        }
        Some(Self { d, entries })
    }

    fn zeros(d: usize) -> Self {
        Self {
            d,
            entries: vec![FORBIDDEN; d * d],
        }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn get(&self, query: usize, key: usize) -> u8 {
        self.entries[query * self.d + key]
    }

    fn set(&mut self, query: usize, key: usize, v: u8) {
        self.entries[query * self.d + key] = v;
    }

    pub fn row(&self, query: usize) -> &[u8] {
        &self.entries[query * self.d..(query + 1) * self.d]
    }

    pub fn entries(&self) -> &[u8] {
        &self.entries
    }

    /// Allowed edges (any non-zero entry).
    pub fn support(&self) -> BoolMask {
        BoolMask {
            d: self.d,
            bits: self.entries.iter().map(|&e| e != FORBIDDEN).collect(),
        }
    }

    /// Rebuilds a mask from its two partitions. Returns `None` if the
    /// partitions overlap or disagree on size.
    pub fn from_partition(m1: &BoolMask, m2: &BoolMask) -> Option<Self> {
        if m1.d != m2.d {
            return None;
        }
        let mut entries = Vec::with_capacity(m1.d * m1.d);
        for (&a, &b) in m1.bits.iter().zip(&m2.bits) {
            entries.push(match (a, b) {
                (false, false) => FORBIDDEN,
                (true, false) => TEXT_KEY,
                (false, true) => IMAGE_KEY,
                (true, true) => return None,
            });
        }
        Some(Self { d: m1.d, entries })
    }
}

/// Square boolean matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoolMask {
    d: usize,
    bits: Vec<bool>,
}

impl BoolMask {
    pub fn from_fn(d: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(d * d);
        for i in 0..d {
            for j in 0..d {
                bits.push(f(i, j));
            }
        }
        Self { d, bits }
    }

    pub fn all(d: usize, value: bool) -> Self {
        Self {
            d,
            bits: vec![value; d * d],
        }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.d + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.d..(i + 1) * self.d]
    }

    pub fn row_is_empty(&self, i: usize) -> bool {
        !self.row(i).iter().any(|&b| b)
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Keeps only the rows for which `keep_row` holds.
    pub fn restrict_rows(&self, keep_row: impl Fn(usize) -> bool) -> Self {
        Self::from_fn(self.d, |i, j| keep_row(i) && self.get(i, j))
    }
}

/// Text rows shared by the cross and MMCA geometries: previous text keys get
/// `1`, previous image keys get `2`.
fn fill_text_rows(seq: &ModalitySequence, mask: &mut MmcaMask) {
    for i in 0..seq.len() {
        if !seq.is_text(i) {
            continue;
        }
        for j in 0..=i {
            let v = if seq.is_text(j) { TEXT_KEY } else { IMAGE_KEY };
            mask.set(i, j, v);
        }
    }
}

fn fill_image_rows(seq: &ModalitySequence, mode: ImageSelfAttention, mask: &mut MmcaMask) {
    for block in seq.image_blocks() {
        for i in block.start..block.end {
            match mode {
                ImageSelfAttention::Block => {
                    for j in block.start..block.end {
                        mask.set(i, j, IMAGE_KEY);
                    }
                }
                ImageSelfAttention::Diagonal => mask.set(i, i, IMAGE_KEY),
            }
        }
    }
}

pub fn build_mmca_mask(seq: &ModalitySequence) -> MmcaMask {
    build_mmca_mask_with(seq, ImageSelfAttention::Block)
}

pub fn build_mmca_mask_with(seq: &ModalitySequence, mode: ImageSelfAttention) -> MmcaMask {
    let mut mask = MmcaMask::zeros(seq.len());
    fill_text_rows(seq, &mut mask);
    fill_image_rows(seq, mode, &mut mask);
    mask
}

/// Lower-triangular ones; modality is ignored.
pub fn build_causal_mask(seq: &ModalitySequence) -> MmcaMask {
    let d = seq.len();
    let mut mask = MmcaMask::zeros(d);
    for i in 0..d {
        for j in 0..=i {
            mask.set(i, j, TEXT_KEY);
        }
    }
    mask
}

/// Same geometry as MMCA; the cross variant differs in how the image-key
/// edges of text rows are computed.
pub fn build_cross_mask(seq: &ModalitySequence) -> MmcaMask {
    build_cross_mask_with(seq, ImageSelfAttention::Block)
}

pub fn build_cross_mask_with(seq: &ModalitySequence, mode: ImageSelfAttention) -> MmcaMask {
    build_mmca_mask_with(seq, mode)
}

pub fn build_mask(
    variant: AttentionVariant,
    seq: &ModalitySequence,
    mode: ImageSelfAttention,
) -> MmcaMask {
    match variant {
        AttentionVariant::CausalOnly => build_causal_mask(seq),
        AttentionVariant::CausalPlusCross => build_cross_mask_with(seq, mode),
        AttentionVariant::Mmca => build_mmca_mask_with(seq, mode),
    }
}

/// Splits a mask into `(M1, M2) = ([M == 1], [M == 2])`.
pub fn partition(mask: &MmcaMask) -> (BoolMask, BoolMask) {
    let m1 = BoolMask {
        d: mask.d,
        bits: mask.entries.iter().map(|&e| e == TEXT_KEY).collect(),
    };
    let m2 = BoolMask {
        d: mask.d,
        bits: mask.entries.iter().map(|&e| e == IMAGE_KEY).collect(),
    };
    (m1, m2)
}

/// `d` lines of `d` characters, `·` for forbidden edges. No trailing newline.
pub fn render_mask(mask: &MmcaMask) -> String {
    let mut out = String::with_capacity(mask.d * (mask.d * 2 + 1));
    for i in 0..mask.d {
        if i > 0 {
            out.push('\n');
        }
        for &e in mask.row(i) {
            out.push(match e {
                FORBIDDEN => '·',
                TEXT_KEY => '1',
                _ => '2',
            });
        }
    }
    out
}
