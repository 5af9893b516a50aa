//! Interleaved instruction template.
//!
//! Text form (one line each, `\n` separated):
//!
//! ```text
//! <system>
//!
//! ### Image 1: <image:ID>
//! ### Question: <question>
//! ### Answer: <answer>
//!
//! ### Image 2: <image:ID>
//! ### Image 3: <image:ID>
//! ### Question: <question>
//! ### Answer: <answer>
//! ```
//!
//! Image numbers are global across rounds. Headers are ordinary text; the
//! token form replaces each `<image:ID>` with `image_token_count` image tokens.
//! Only answer bodies and their closing newline carry loss.

use std::collections::HashSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::modseq::{LayoutConfig, ModalitySequence, ModalityTag, SeqError};

pub const IMAGE_TOKEN_ID: u32 = 0;
pub const NEWLINE_TOKEN_ID: u32 = 1;
const FIRST_WORD_ID: u32 = 2;

const QUESTION_HEADER: &str = "### Question: ";
const ANSWER_HEADER: &str = "### Answer: ";
const IMAGE_HEADER_PREFIX: &str = "### Image ";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TemplateError {
    #[error("invalid conversation: {0}")]
    InvalidConversation(String),
    #[error("over_length: rendered {length} tokens, limit {max}")]
    OverLength { length: usize, max: usize },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Seq(#[from] SeqError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Round {
    #[serde(default)]
    pub images: Vec<String>,
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub system: String,
    pub rounds: Vec<Round>,
}

fn single_line(field: &str, value: &str) -> Result<(), TemplateError> {
    if value.contains(['\n', '\r']) {
        return Err(TemplateError::InvalidConversation(format!(
            "{field} must be a single line"
        )));
    }
    Ok(())
}

fn non_blank_line(field: &str, value: &str) -> Result<(), TemplateError> {
    single_line(field, value)?;
    if value.trim().is_empty() {
        return Err(TemplateError::InvalidConversation(format!(
            "{field} is empty"
        )));
    }
    Ok(())
}

pub fn valid_image_id(id: &str) -> bool {
    !id.is_empty() && !id.contains(|c: char| c.is_whitespace() || c == '>' || c == '<')
}

impl Conversation {
    pub fn validate(&self) -> Result<(), TemplateError> {
        single_line("system", &self.system)?;
        if self.rounds.is_empty() {
            return Err(TemplateError::InvalidConversation("no rounds".into()));
        }
        let mut seen = HashSet::new();
        for (r, round) in self.rounds.iter().enumerate() {
            non_blank_line(&format!("round {} question", r + 1), &round.question)?;
            non_blank_line(&format!("round {} answer", r + 1), &round.answer)?;
            for id in &round.images {
                if !valid_image_id(id) {
                    return Err(TemplateError::InvalidConversation(format!(
                        "bad image id {id:?}"
                    )));
                }
                if !seen.insert(id.as_str()) {
                    return Err(TemplateError::InvalidConversation(format!(
                        "image id {id:?} appears twice"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Image ids in order of appearance.
    pub fn image_ids(&self) -> Vec<&str> {
        self.rounds
            .iter()
            .flat_map(|r| r.images.iter().map(String::as_str))
            .collect()
    }

    pub fn image_count(&self) -> usize {
        self.rounds.iter().map(|r| r.images.len()).sum()
    }
}

/// Deterministic text → token-id mapping.
pub trait Tokenizer {
    fn encode(&self, text: &str) -> Vec<u32>;
    fn vocab_size(&self) -> usize;
}

/// Whitespace splitter with a stable FNV-1a word hash. Ids 0 and 1 are
/// reserved for image tokens and newlines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashTokenizer {
    vocab_size: usize,
}

impl HashTokenizer {
    /// Panics if `vocab_size < 3`.
    pub fn new(vocab_size: usize) -> Self {
        assert!(
            vocab_size > FIRST_WORD_ID as usize,
            "vocab_size must be at least 3"
        );
        Self { vocab_size }
    }

    pub fn word_id(&self, word: &str) -> u32 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in word.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        let range = (self.vocab_size as u64) - u64::from(FIRST_WORD_ID);
        FIRST_WORD_ID + (h % range) as u32
    }
}

impl Tokenizer for HashTokenizer {
    fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(|w| self.word_id(w)).collect()
    }

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece<'a> {
    Text { text: String, loss: bool },
    Newline { loss: bool },
    Image { id: &'a str },
}

fn pieces(conv: &Conversation) -> Vec<Piece<'_>> {
    let text = |t: &str| Piece::Text {
        text: t.to_string(),
        loss: false,
    };
    let newline = Piece::Newline { loss: false };
    let mut out = vec![text(&conv.system), newline.clone()];
    let mut image_no = 0usize;
    for round in &conv.rounds {
        out.push(newline.clone());
        for id in &round.images {
            image_no += 1;
            out.push(text(&format!("{IMAGE_HEADER_PREFIX}{image_no}: ")));
            out.push(Piece::Image { id });
            out.push(newline.clone());
        }
        out.push(text(QUESTION_HEADER));
        out.push(text(&round.question));
        out.push(newline.clone());
        out.push(text(ANSWER_HEADER));
        out.push(Piece::Text {
            text: round.answer.clone(),
            loss: true,
        });
        out.push(Piece::Newline { loss: true });
    }
    out
}

/// The text form of `conv`. Round-trips through [`parse`].
pub fn render_text(conv: &Conversation) -> Result<String, TemplateError> {
    conv.validate()?;
    let mut s = String::new();
    for p in pieces(conv) {
        match p {
            Piece::Text { text, .. } => s.push_str(&text),
            Piece::Newline { .. } => s.push('\n'),
            Piece::Image { id } => {
                s.push_str("<image:");
                s.push_str(id);
                s.push('>');
            }
        }
    }
    Ok(s)
}

/// Token ids, modality tags and loss mask of one conversation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedSample {
    pub token_ids: Vec<u32>,
    pub tags: ModalitySequence,
    pub loss_mask: Vec<bool>,
    pub image_count: usize,
    /// Image id of block `k` at index `k - 1`.
    pub image_ids: Vec<String>,
}

impl RenderedSample {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

pub fn render(
    conv: &Conversation,
    tokenizer: &dyn Tokenizer,
    layout: &LayoutConfig,
) -> Result<RenderedSample, TemplateError> {
    conv.validate()?;
    let mut token_ids = Vec::new();
    let mut tags = Vec::new();
    let mut loss_mask = Vec::new();
    let mut image_ids = Vec::new();
    for p in pieces(conv) {
        match p {
            Piece::Text { text, loss } => {
                for id in tokenizer.encode(&text) {
                    token_ids.push(id);
                    tags.push(ModalityTag::Text);
                    loss_mask.push(loss);
                }
            }
            Piece::Newline { loss } => {
                token_ids.push(NEWLINE_TOKEN_ID);
                tags.push(ModalityTag::Text);
                loss_mask.push(loss);
            }
            Piece::Image { id } => {
                image_ids.push(id.to_string());
                let tag = ModalityTag::Image {
                    block_id: image_ids.len() as u32,
                };
                for _ in 0..layout.image_token_count() {
                    token_ids.push(IMAGE_TOKEN_ID);
                    tags.push(tag);
                    loss_mask.push(false);
                }
            }
        }
    }
    if token_ids.len() > layout.max_sequence_length() {
        return Err(TemplateError::OverLength {
            length: token_ids.len(),
            max: layout.max_sequence_length(),
        });
    }
    Ok(RenderedSample {
        token_ids,
        tags: ModalitySequence::from_tags(tags)?,
        loss_mask,
        image_count: image_ids.len(),
        image_ids,
    })
}

/// Maximal runs of `true` in the loss mask, one per answer.
pub fn loss_positions(sample: &RenderedSample) -> Vec<Range<usize>> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, &on) in sample.loss_mask.iter().enumerate() {
        match (on, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                spans.push(s..i);
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        spans.push(s..sample.loss_mask.len());
    }
    spans
}

/// Parses the text form back into a conversation.
pub fn parse(text: &str) -> Result<Conversation, TemplateError> {
    let err = |line: usize, message: String| TemplateError::Parse { line, message };
    let Some(body) = text.strip_suffix('\n') else {
        return Err(err(
            text.lines().count().max(1),
            "missing final newline".into(),
        ));
    };
    let lines: Vec<&str> = body.split('\n').collect();
    let system = lines[0].to_string();
    let mut rounds = Vec::new();
    let mut image_no = 0usize;
    let mut i = 1;
    while i < lines.len() {
        if !lines[i].is_empty() {
            return Err(err(i + 1, "expected blank line before round".into()));
        }
        i += 1;
        let mut images = Vec::new();
        while let Some(rest) = lines
            .get(i)
            .and_then(|l| l.strip_prefix(IMAGE_HEADER_PREFIX))
        {
            let (num, placeholder) = rest
                .split_once(": ")
                .ok_or_else(|| err(i + 1, "malformed image header".into()))?;
            image_no += 1;
            if num.parse::<usize>().ok() != Some(image_no) {
                return Err(err(
                    i + 1,
                    format!("expected image number {image_no}, found {num:?}"),
                ));
            }
            let id = placeholder
                .strip_prefix("<image:")
                .and_then(|p| p.strip_suffix('>'))
                .filter(|id| valid_image_id(id))
                .ok_or_else(|| {
                    err(
                        i + 1,
                        format!("malformed image placeholder {placeholder:?}"),
                    )
                })?;
            images.push(id.to_string());
            i += 1;
        }
        let line = lines
            .get(i)
            .ok_or_else(|| err(i + 1, "unexpected end of input, expected question".into()))?;
        if line.starts_with(ANSWER_HEADER.trim_end()) {
            return Err(err(i + 1, "answer before question".into()));
        }
        let question = line
            .strip_prefix(QUESTION_HEADER)
            .ok_or_else(|| err(i + 1, "expected question header".into()))?;
        i += 1;
        let line = lines
            .get(i)
            .ok_or_else(|| err(i + 1, "unexpected end of input, expected answer".into()))?;
        let answer = line
            .strip_prefix(ANSWER_HEADER)
            .ok_or_else(|| err(i + 1, "expected answer header".into()))?;
        i += 1;
        rounds.push(Round {
            images,
            question: question.to_string(),
            answer: answer.to_string(),
        });
    }
    let conv = Conversation { system, rounds };
    conv.validate()
        .map_err(|e| err(lines.len(), e.to_string()))?;
    Ok(conv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn round(images: &[&str], q: &str, a: &str) -> Round {
        Round {
            images: images.iter().map(|s| s.to_string()).collect(),
            question: q.into(),
            answer: a.into(),
        }
    }

    fn tok() -> HashTokenizer {
        HashTokenizer::new(1000)
    }

    #[test]
    fn one_round_one_image_layout() {
        let conv = Conversation {
            system: "You are helpful.".into(),
            rounds: vec![round(&["img"], "What is it?", "A cat.")],
        };
        let layout = LayoutConfig::new(2, 4096).unwrap();
        let s = render(&conv, &tok(), &layout).unwrap();
        assert_eq!(s.image_count, 1);
        let blocks = s.tags.image_blocks();
        assert_eq!(blocks.len(), 1);
        assert_eq!(blocks[0].len(), 2);
        assert!(s.tags.is_text(0));
        assert!(s.tags.is_text(s.len() - 1));
        // "A cat." is two words plus the closing newline
        assert_eq!(s.loss_mask.iter().filter(|&&b| b).count(), 3);
        let span = &loss_positions(&s)[0];
        assert_eq!(span.end, s.len());
        assert_eq!(
            &s.token_ids[span.clone()],
            &[tok().word_id("A"), tok().word_id("cat."), NEWLINE_TOKEN_ID]
        );
    }

    #[test]
    fn image_numbering_is_global() {
        let conv = Conversation {
            system: "sys".into(),
            rounds: vec![
                round(&["a"], "q1", "a1"),
                round(&["b"], "q2", "a2"),
                round(&[], "q3", "a3"),
            ],
        };
        let text = render_text(&conv).unwrap();
        assert!(text.contains("### Image 1: <image:a>\n"));
        assert!(text.contains("### Image 2: <image:b>\n"));
        assert!(!text.contains("### Image 3"));
    }

    #[test]
    fn fig2_shape_text() {
        let conv = Conversation {
            system: "<System Instruction>".into(),
            rounds: vec![
                round(&["x1"], "<question>", "<answer>"),
                round(&["x2", "x3"], "<question>", "<answer>"),
            ],
        };
        let text = render_text(&conv).unwrap();
        let expected = "<System Instruction>\n\n### Image 1: <image:x1>\n### Question: <question>\n### Answer: <answer>\n\n### Image 2: <image:x2>\n### Image 3: <image:x3>\n### Question: <question>\n### Answer: <answer>\n";
        assert_eq!(text, expected);
        assert_eq!(parse(&text).unwrap(), conv);
    }

    #[test]
    fn over_length_with_defaults() {
        let images: Vec<String> = (0..16).map(|i| format!("im{i}")).collect();
        let conv = Conversation {
            system: String::new(),
            rounds: vec![Round {
                images,
                question: "q".into(),
                answer: "a".into(),
            }],
        };
        match render(&conv, &tok(), &LayoutConfig::default()) {
            Err(TemplateError::OverLength { length, max: 4096 }) => assert!(length > 4096),
            other => panic!("expected over_length, got {other:?}"),
        }
    }

    #[test]
    fn loss_spans_per_round() {
        let conv = Conversation {
            system: "s".into(),
            rounds: vec![
                round(&["a"], "q", "one two"),
                round(&[], "q", "three"),
                round(&["b", "c"], "q", "four five six"),
            ],
        };
        let s = render(&conv, &tok(), &LayoutConfig::new(3, 4096).unwrap()).unwrap();
        let spans = loss_positions(&s);
        assert_eq!(
            spans.iter().map(|r| r.len()).collect::<Vec<_>>(),
            vec![3, 2, 4]
        );
        assert!(spans.windows(2).all(|w| w[0].end < w[1].start));
        for span in &spans {
            for p in span.clone() {
                assert!(s.tags.is_text(p));
            }
        }
    }

    #[test]
    fn one_round_span() {
        let conv = Conversation {
            system: "".into(),
            rounds: vec![round(&[], "hello", "world")],
        };
        let s = render(&conv, &tok(), &LayoutConfig::default()).unwrap();
        assert_eq!(loss_positions(&s).len(), 1);
        assert_eq!(parse(&render_text(&conv).unwrap()).unwrap(), conv);
    }

    #[test]
    fn answer_before_question_is_an_error() {
        let text = "sys\n\n### Answer: a\n### Question: q\n";
        match parse(text) {
            Err(TemplateError::Parse { line: 3, message }) => {
                assert!(message.contains("answer before question"))
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_headers() {
        assert!(matches!(
            parse("sys\n\n### Image 2: <image:a>\n### Question: q\n### Answer: a\n"),
            Err(TemplateError::Parse { line: 3, .. })
        ));
        assert!(matches!(
            parse("sys\n\n### Question: q\n"),
            Err(TemplateError::Parse { .. })
        ));
        assert!(matches!(
            parse("sys\n\n### Question: q\n### Answer: a"),
            Err(TemplateError::Parse { .. })
        ));
        assert!(matches!(
            parse("sys\nnot blank\n"),
            Err(TemplateError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn invalid_conversations_rejected() {
        let bad = [
            Conversation {
                system: "s".into(),
                rounds: vec![],
            },
            Conversation {
                system: "s".into(),
                rounds: vec![round(&[], " ", "a")],
            },
            Conversation {
                system: "s".into(),
                rounds: vec![round(&[], "q", "a\nb")],
            },
            Conversation {
                system: "s".into(),
                rounds: vec![round(&["a"], "q", "a"), round(&["a"], "q", "a")],
            },
            Conversation {
                system: "s".into(),
                rounds: vec![round(&["has space"], "q", "a")],
            },
        ];
        for c in bad {
            assert!(
                matches!(c.validate(), Err(TemplateError::InvalidConversation(_))),
                "{c:?}"
            );
        }
    }

    #[test]
    fn tokenizer_is_stable() {
        let t = HashTokenizer::new(32);
        assert_eq!(
            t.encode("a  b\tc"),
            vec![t.word_id("a"), t.word_id("b"), t.word_id("c")]
        );
        assert!(t.encode("x y z w").iter().all(|&id| (2..32).contains(&id)));
        // FNV-1a of "a" is 0xaf63dc4c8601ec8c
        assert_eq!(
            HashTokenizer::new(1002).word_id("a"),
            2 + (0xaf63_dc4c_8601_ec8c_u64 % 1000) as u32
        );
    }

    fn line() -> impl Strategy<Value = String> {
        "[a-zA-Z0-9#:<> .?!]{0,20}"
    }

    fn non_blank() -> impl Strategy<Value = String> {
        line().prop_filter("non-blank", |s| !s.trim().is_empty())
    }

    fn conversation() -> impl Strategy<Value = Conversation> {
        let round = (
            prop::collection::vec(0u8..3, 0..3),
            non_blank(),
            non_blank(),
        );
        (line(), prop::collection::vec(round, 1..5)).prop_map(|(system, raw)| {
            let mut next = 0;
            let rounds = raw
                .into_iter()
                .map(|(imgs, question, answer)| Round {
                    images: imgs
                        .into_iter()
                        .map(|_| {
                            next += 1;
                            format!("coco_{next}")
                        })
                        .collect(),
                    question,
                    answer,
                })
                .collect();
            Conversation { system, rounds }
        })
    }

    proptest! {
        #[test]
        fn parse_inverts_render_text(conv in conversation()) {
            let text = render_text(&conv).unwrap();
            prop_assert_eq!(parse(&text).unwrap(), conv);
        }

        #[test]
        fn loss_mask_sound(conv in conversation()) {
            let t = tok();
            let s = render(&conv, &t, &LayoutConfig::new(2, 4096).unwrap()).unwrap();
            let answer_tokens: usize = conv.rounds.iter().map(|r| t.encode(&r.answer).len() + 1).sum();
            prop_assert_eq!(s.loss_mask.iter().filter(|&&b| b).count(), answer_tokens);
            prop_assert_eq!(loss_positions(&s).len(), conv.rounds.len());
            for (p, &on) in s.loss_mask.iter().enumerate() {
                prop_assert!(!on || s.tags.is_text(p));
            }
            prop_assert_eq!(s.image_count, s.tags.image_blocks().len());
            prop_assert_eq!(s.image_count, conv.image_count());
        }

        #[test]
        fn adding_a_round_grows_length(conv in conversation(), q in non_blank(), a in non_blank()) {
            let layout = LayoutConfig::new(2, 4096).unwrap();
            let before = render(&conv, &tok(), &layout).unwrap().len();
            let mut longer = conv.clone();
            longer.rounds.push(Round { images: vec![], question: q, answer: a });
            prop_assert!(render(&longer, &tok(), &layout).unwrap().len() > before);
        }
    }
}
