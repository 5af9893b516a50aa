//! Synthesizing multi-round, multi-image conversations from single-image
//! datasets.
//!
//! Two procedures: seeded random concatenation of whole samples, and the
//! image-id join that prefixes each image-pair conversation with every
//! single-image conversation about either of its images. Records travel as
//! JSON lines: `{dataset, image_ids, system, rounds: [{images, question, answer}]}`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::modseq::LayoutConfig;
use crate::template::{self, Conversation, Round, TemplateError, Tokenizer};

#[derive(Debug, Error)]
pub enum BlendError {
    #[error("line {line}: {message}")]
    Json { line: usize, message: String },
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("invalid blend spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dataset {
    Llava,
    LlavaDial,
    OtterCgd,
    LlavaOtterBlend,
    Other,
}

impl Dataset {
    /// Images per record required of raw (un-blended) inputs.
    pub fn expected_images(self) -> Option<usize> {
        match self {
            Dataset::Llava | Dataset::LlavaDial => Some(1),
            Dataset::OtterCgd => Some(2),
            Dataset::LlavaOtterBlend | Dataset::Other => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceRecord {
    pub dataset: Dataset,
    pub image_ids: Vec<String>,
    #[serde(flatten)]
    pub conversation: Conversation,
}

impl SourceRecord {
    /// The conversation must be valid and reference exactly the images in
    /// `image_ids`, each once.
    pub fn validate(&self) -> Result<(), BlendError> {
        self.conversation
            .validate()
            .map_err(|e| BlendError::InvalidRecord(e.to_string()))?;
        let listed: HashSet<&str> = self.image_ids.iter().map(String::as_str).collect();
        if listed.len() != self.image_ids.len() {
            return Err(BlendError::InvalidRecord(
                "duplicate entry in image_ids".into(),
            ));
        }
        let used: HashSet<&str> = self.conversation.image_ids().into_iter().collect();
        if used != listed {
            return Err(BlendError::InvalidRecord(format!(
                "rounds reference images {:?} but image_ids is {:?}",
                self.conversation.image_ids(),
                self.image_ids
            )));
        }
        Ok(())
    }

    /// [`validate`](Self::validate) plus the per-dataset image count of raw inputs.
    pub fn validate_source(&self) -> Result<(), BlendError> {
        self.validate()?;
        if let Some(n) = self.dataset.expected_images() {
            if self.image_ids.len() != n {
                return Err(BlendError::InvalidRecord(format!(
                    "{:?} records carry exactly {n} image(s), found {}",
                    self.dataset,
                    self.image_ids.len()
                )));
            }
        }
        Ok(())
    }

    pub fn round_count(&self) -> usize {
        self.conversation.rounds.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlendSpec {
    pub min_group: usize,
    pub max_group: usize,
    pub seed: u64,
    pub max_images: usize,
    pub layout: LayoutConfig,
}

impl BlendSpec {
    pub fn new(min_group: usize, max_group: usize, seed: u64) -> Result<Self, BlendError> {
        if min_group == 0 || min_group > max_group {
            return Err(BlendError::Spec(format!(
                "need 1 <= min_group <= max_group, got {min_group}..{max_group}"
            )));
        }
        Ok(Self {
            min_group,
            max_group,
            seed,
            max_images: 8,
            layout: LayoutConfig::default(),
        })
    }

    /// Group sizes used for each source: llava 1–3, llava_dial 1–2, others 1.
    pub fn for_dataset(dataset: Dataset, seed: u64) -> Self {
        let (lo, hi) = match dataset {
            Dataset::Llava => (1, 3),
            Dataset::LlavaDial => (1, 2),
            _ => (1, 1),
        };
        Self::new(lo, hi, seed).expect("static ranges are valid")
    }

    pub fn with_max_images(mut self, max_images: usize) -> Result<Self, BlendError> {
        if max_images == 0 {
            return Err(BlendError::Spec("max_images must be positive".into()));
        }
        self.max_images = max_images;
        Ok(self)
    }

    pub fn with_layout(mut self, layout: LayoutConfig) -> Self {
        self.layout = layout;
        self
    }
}

/// Appends `rounds` to `out`, dropping images that were already shown.
fn append_rounds(out: &mut Vec<Round>, shown: &mut Vec<String>, rounds: &[Round]) {
    for round in rounds {
        let mut r = round.clone();
        r.images.retain(|id| {
            if shown.contains(id) {
                false
            } else {
                shown.push(id.clone());
                true
            }
        });
        out.push(r);
    }
}

fn merge_images(target: &mut Vec<String>, ids: &[String]) {
    for id in ids {
        if !target.contains(id) {
            target.push(id.clone());
        }
    }
}

fn concat_group(group: &[&SourceRecord]) -> SourceRecord {
    let first = group[0];
    let dataset = if group.iter().all(|r| r.dataset == first.dataset) {
        first.dataset
    } else {
        Dataset::Other
    };
    let mut rounds = Vec::new();
    let mut shown = Vec::new();
    let mut image_ids = Vec::new();
    for r in group {
        append_rounds(&mut rounds, &mut shown, &r.conversation.rounds);
        merge_images(&mut image_ids, &r.image_ids);
    }
    SourceRecord {
        dataset,
        image_ids,
        conversation: Conversation {
            system: first.conversation.system.clone(),
            rounds,
        },
    }
}

/// Shuffles with the seeded generator, then cuts the permutation into groups
/// whose sizes are drawn uniformly from `[min_group, max_group]`. Every input
/// lands in exactly one output; the last group may be short.
pub fn concat_blend(records: &[SourceRecord], spec: &BlendSpec) -> Vec<SourceRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut rng);
    let mut out = Vec::new();
    let mut rest = order.as_slice();
    while !rest.is_empty() {
        let size = rng
            .random_range(spec.min_group..=spec.max_group)
            .min(rest.len());
        let (head, tail) = rest.split_at(size);
        let group: Vec<&SourceRecord> = head.iter().map(|&i| &records[i]).collect();
        out.push(concat_group(&group));
        rest = tail;
    }
    out
}

/// For every pair record, prepends all rounds of the single-image records
/// (llava first, then llava_dial, in input order) that share its first
/// image, then those sharing its second image; the pair round stays last.
/// Single-image records can be matched by many pairs. Pairs without any
/// match pass through unchanged.
pub fn llava_otter_blend(
    llava: &[SourceRecord],
    llava_dial: &[SourceRecord],
    otter: &[SourceRecord],
) -> Vec<SourceRecord> {
    let mut by_image: HashMap<&str, Vec<&SourceRecord>> = HashMap::new();
    for r in llava.iter().chain(llava_dial) {
        for id in &r.image_ids {
            by_image.entry(id.as_str()).or_default().push(r);
        }
    }
    otter
        .iter()
        .map(|pair| {
            let mut image_ids: Vec<String> = Vec::new();
            merge_images(&mut image_ids, &pair.image_ids);
            let matched: Vec<&SourceRecord> = image_ids
                .iter()
                .flat_map(|id| by_image.get(id.as_str()).into_iter().flatten().copied())
                .collect();
            if matched.is_empty() {
                return pair.clone();
            }
            let mut rounds = Vec::new();
            let mut shown = Vec::new();
            for m in &matched {
                append_rounds(&mut rounds, &mut shown, &m.conversation.rounds);
            }
            append_rounds(&mut rounds, &mut shown, &pair.conversation.rounds);
            SourceRecord {
                dataset: Dataset::LlavaOtterBlend,
                image_ids,
                conversation: Conversation {
                    system: pair.conversation.system.clone(),
                    rounds,
                },
            }
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropStats {
    pub kept: usize,
    pub too_many_images: usize,
    pub over_length: usize,
    pub invalid: usize,
}

impl DropStats {
    pub fn dropped(&self) -> usize {
        self.too_many_images + self.over_length + self.invalid
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropReason {
    TooManyImages,
    OverLength,
    Invalid,
}

/// Why `record` would be dropped under `spec`, or `None` to keep it.
pub fn drop_reason(
    record: &SourceRecord,
    spec: &BlendSpec,
    tokenizer: &dyn Tokenizer,
) -> Option<DropReason> {
    if record.image_ids.len() > spec.max_images {
        return Some(DropReason::TooManyImages);
    }
    match template::render(&record.conversation, tokenizer, &spec.layout) {
        Ok(_) => None,
        Err(TemplateError::OverLength { .. }) => Some(DropReason::OverLength),
        Err(_) => Some(DropReason::Invalid),
    }
}

/// Drops records with more than `max_images` images or whose rendering
/// exceeds the sequence cap.
pub fn filter_limits(
    records: Vec<SourceRecord>,
    spec: &BlendSpec,
    tokenizer: &dyn Tokenizer,
) -> (Vec<SourceRecord>, DropStats) {
    let mut stats = DropStats::default();
    let mut kept = Vec::with_capacity(records.len());
    for r in records {
        match drop_reason(&r, spec, tokenizer) {
            None => kept.push(r),
            Some(DropReason::TooManyImages) => stats.too_many_images += 1,
            Some(DropReason::OverLength) => stats.over_length += 1,
            Some(DropReason::Invalid) => stats.invalid += 1,
        }
    }
    stats.kept = kept.len();
    (kept, stats)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub total_samples: usize,
    pub samples_per_dataset: BTreeMap<Dataset, usize>,
    /// images per sample → number of samples
    pub image_histogram: BTreeMap<usize, usize>,
    /// rounds per sample → number of samples
    pub round_histogram: BTreeMap<usize, usize>,
}

pub fn dataset_stats(records: &[SourceRecord]) -> DatasetStats {
    let mut stats = DatasetStats {
        total_samples: records.len(),
        ..Default::default()
    };
    for r in records {
        *stats.samples_per_dataset.entry(r.dataset).or_default() += 1;
        *stats.image_histogram.entry(r.image_ids.len()).or_default() += 1;
        *stats.round_histogram.entry(r.round_count()).or_default() += 1;
    }
    stats
}

/// Reads one record per non-empty line. Errors carry the 1-based line number.
pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Vec<SourceRecord>, BlendError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SourceRecord = serde_json::from_str(&line).map_err(|e| BlendError::Json {
            line: idx + 1,
            message: e.to_string(),
        })?;
        record.validate().map_err(|e| BlendError::Json {
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_jsonl<W: Write>(records: &[SourceRecord], mut writer: W) -> Result<(), BlendError> {
    for r in records {
        serde_json::to_writer(&mut writer, r).map_err(std::io::Error::from)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}
