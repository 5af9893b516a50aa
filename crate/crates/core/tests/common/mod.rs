//! Independent reference implementations shared by the integration tests.
//! Everything here works on plain nested vectors with explicit loops so it
//! shares no arithmetic path with the library kernels.

#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};

use mmca::blend::{Dataset, SourceRecord};
use mmca::modseq::{build_sequence, Modality, ModalitySequence, ModalityTag};
use mmca::template::{Conversation, Round};
use mmca::tensor::Matrix;
use rand::Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(m: &Matrix) -> Mat {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

pub fn max_diff(a: &Mat, b: &Matrix) -> f64 {
    let mut worst = 0.0f64;
    for (i, row) in a.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            worst = worst.max((v - b[(i, j)]).abs());
        }
    }
    worst
}

/// Block id per token, or `None` for text.
pub fn blocks(seq: &ModalitySequence) -> Vec<Option<u32>> {
    seq.tags()
        .iter()
        .map(|t| match t {
            ModalityTag::Text => None,
            ModalityTag::Image { block_id } => Some(*block_id),
        })
        .collect()
}

/// Mask value of edge `(i, j)` evaluated straight from the attention rules.
pub fn rule_entry(b: &[Option<u32>], i: usize, j: usize, diagonal_images: bool) -> u8 {
    match b[i] {
        Some(block) => {
            let same = if diagonal_images {
                i == j
            } else {
                b[j] == Some(block)
            };
            if same {
                2
            } else {
                0
            }
        }
        None => {
            if j > i {
                0
            } else if b[j].is_none() {
                1
            } else {
                2
            }
        }
    }
}

/// Random segment list of total length `d`; consecutive image runs become
/// separate images.
pub fn random_segments<R: Rng>(d: usize, rng: &mut R) -> Vec<(Modality, usize)> {
    let mut out = Vec::new();
    let mut left = d;
    while left > 0 {
        let n = rng.random_range(1..=left.min(9));
        let kind = if rng.random_bool(0.5) {
            Modality::Image
        } else {
            Modality::Text
        };
        match out.last_mut() {
            Some((Modality::Text, len)) if kind == Modality::Text => *len += n,
            _ => out.push((kind, n)),
        }
        left -= n;
    }
    out
}

pub fn random_sequence<R: Rng>(max_d: usize, rng: &mut R) -> ModalitySequence {
    let d = rng.random_range(1..=max_d);
    build_sequence(&random_segments(d, rng)).unwrap()
}

/// Mixed sequence: at least one text and one image token.
pub fn random_mixed_sequence<R: Rng>(min_d: usize, max_d: usize, rng: &mut R) -> ModalitySequence {
    loop {
        let d = rng.random_range(min_d.max(2)..=max_d);
        let seq = build_sequence(&random_segments(d, rng)).unwrap();
        if seq.has_images() && seq.tags().iter().any(|t| t.is_text()) {
            return seq;
        }
    }
}

pub fn random_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.5..1.5))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Softmax of `q_i · k_j * scale` over the keys where `allow(j)`; empty
/// support yields all zeros.
pub fn softmax_row(q: &[f64], k: &Mat, scale: f64, allow: impl Fn(usize) -> bool) -> Vec<f64> {
    let d = k.len();
    let scores: Vec<Option<f64>> = (0..d)
        .map(|j| allow(j).then(|| scale * dot(q, &k[j])))
        .collect();
    let max = scores
        .iter()
        .flatten()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return vec![0.0; d];
    }
    let exps: Vec<f64> = scores
        .iter()
        .map(|s| s.map_or(0.0, |s| (s - max).exp()))
        .collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

fn weighted(w: &[f64], v: &Mat) -> Vec<f64> {
    let mut out = vec![0.0; v[0].len()];
    for (j, wj) in w.iter().enumerate() {
        for (o, x) in out.iter_mut().zip(&v[j]) {
            *o += wj * x;
        }
    }
    out
}

/// Returns `(output, A1, A2)`.
pub fn naive_mmca(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    b: &[Option<u32>],
    scale: f64,
    coef: f64,
) -> (Mat, Mat, Mat) {
    let mut out = Vec::new();
    let mut a1 = Vec::new();
    let mut a2 = Vec::new();
    for (i, qi) in q.iter().enumerate() {
        let r1 = softmax_row(qi, k, scale, |j| rule_entry(b, i, j, false) == 1);
        let r2 = softmax_row(qi, k, scale, |j| rule_entry(b, i, j, false) == 2);
        let w: Vec<f64> = r1.iter().zip(&r2).map(|(x, y)| coef * (x + y)).collect();
        out.push(weighted(&w, v));
        a1.push(r1);
        a2.push(r2);
    }
    (out, a1, a2)
}

pub fn naive_causal(q: &Mat, k: &Mat, v: &Mat, scale: f64) -> Mat {
    (0..q.len())
        .map(|i| weighted(&softmax_row(&q[i], k, scale, |j| j <= i), v))
        .collect()
}

/// Text rows: text keys with `k`/`v` plus earlier image keys with `kx`/`vx`.
/// Image rows: own image with `k`/`v`.
pub fn naive_cross(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    kx: &Mat,
    vx: &Mat,
    b: &[Option<u32>],
    scale: f64,
) -> Mat {
    (0..q.len())
        .map(|i| match b[i] {
            Some(block) => weighted(&softmax_row(&q[i], k, scale, |j| b[j] == Some(block)), v),
            None => {
                let t = weighted(
                    &softmax_row(&q[i], k, scale, |j| j <= i && b[j].is_none()),
                    v,
                );
                let x = weighted(
                    &softmax_row(&q[i], kx, scale, |j| j <= i && b[j].is_some()),
                    vx,
                );
                t.iter().zip(&x).map(|(a, c)| a + c).collect()
            }
        })
        .collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let n = b[0].len();
    a.iter()
        .map(|row| {
            (0..n)
                .map(|c| row.iter().enumerate().map(|(k, x)| x * b[k][c]).sum())
                .collect()
        })
        .collect()
}

pub fn columns(a: &Mat, start: usize, width: usize) -> Mat {
    a.iter().map(|r| r[start..start + width].to_vec()).collect()
}

// ---- template oracles -------------------------------------------------

const WORDS: &[&str] = &[
    "a", "cat", "dog", "is", "on", "the", "mat", "what", "colour", "red", "two", "image", "left",
    "right", "why?", "Describe", "scene.", "#", "##", "Question", "Answer", "1:", "Image",
];

pub fn random_text<R: Rng>(rng: &mut R, min_words: usize, max_words: usize) -> String {
    let n = rng.random_range(min_words..=max_words);
    let mut s = String::new();
    for i in 0..n {
        if i > 0 {
            s.push_str(if rng.random_bool(0.2) { "  " } else { " " });
        }
        s.push_str(WORDS[rng.random_range(0..WORDS.len())]);
    }
    s
}

/// Random valid conversation with globally unique image ids drawn from
/// `next_image`.
pub fn random_conversation<R: Rng>(rng: &mut R, next_image: &mut usize) -> Conversation {
    let rounds = (0..rng.random_range(1..=4))
        .map(|_| {
            let images = (0..rng.random_range(0..=2))
                .map(|_| {
                    *next_image += 1;
                    format!("im{}-{}", *next_image, rng.random_range(0..100))
                })
                .collect();
            Round {
                images,
                question: random_text(rng, 1, 8),
                answer: random_text(rng, 1, 8),
            }
        })
        .collect();
    Conversation {
        system: random_text(rng, 0, 6),
        rounds,
    }
}

/// Rendered token count from the template layout.
pub fn oracle_length(conv: &Conversation, image_tokens: usize) -> usize {
    let words = |s: &str| s.split_whitespace().count();
    let mut n = words(&conv.system) + 1;
    for r in &conv.rounds {
        n += 1;
        n += r.images.len() * (3 + image_tokens + 1);
        n += 2 + words(&r.question) + 1;
        n += 2 + words(&r.answer) + 1;
    }
    n
}

// ---- blending oracles -------------------------------------------------

pub fn single_record<R: Rng>(rng: &mut R, dataset: Dataset, image: String) -> SourceRecord {
    let n_rounds = match dataset {
        Dataset::LlavaDial => rng.random_range(2..=4),
        _ => 1,
    };
    let rounds = (0..n_rounds)
        .map(|r| Round {
            images: if r == 0 {
                vec![image.clone()]
            } else {
                Vec::new()
            },
            question: random_text(rng, 1, 6),
            answer: random_text(rng, 1, 6),
        })
        .collect();
    SourceRecord {
        dataset,
        image_ids: vec![image],
        conversation: Conversation {
            system: "sys".into(),
            rounds,
        },
    }
}

pub struct Corpus {
    pub llava: Vec<SourceRecord>,
    pub llava_dial: Vec<SourceRecord>,
    pub otter: Vec<SourceRecord>,
}

/// Synthetic corpus over a shared image pool, so image-pair records find
/// single-image conversations about the same images.
pub fn random_corpus<R: Rng>(rng: &mut R, n_llava: usize, n_dial: usize, n_otter: usize) -> Corpus {
    let pool = (n_llava + n_dial) / 2 + 1;
    let pick = |rng: &mut R| format!("coco{}", rng.random_range(0..pool));
    let llava = (0..n_llava)
        .map(|_| {
            let im = pick(rng);
            single_record(rng, Dataset::Llava, im)
        })
        .collect();
    let llava_dial = (0..n_dial)
        .map(|_| {
            let im = pick(rng);
            single_record(rng, Dataset::LlavaDial, im)
        })
        .collect();
    let otter = (0..n_otter)
        .map(|_| {
            let a = pick(rng);
            let mut b = pick(rng);
            while b == a {
                b = format!("coco{}", rng.random_range(0..pool));
            }
            SourceRecord {
                dataset: Dataset::OtterCgd,
                image_ids: vec![a.clone(), b.clone()],
                conversation: Conversation {
                    system: "pair".into(),
                    rounds: vec![Round {
                        images: vec![a, b],
                        question: random_text(rng, 2, 6),
                        answer: random_text(rng, 2, 6),
                    }],
                },
            }
        })
        .collect();
    Corpus {
        llava,
        llava_dial,
        otter,
    }
}

/// Nested-loop join: for each pair, scan llava then llava_dial for each of
/// the pair's images in order and concatenate rounds, removing any image
/// already shown earlier in the merged conversation.
pub fn oracle_join(
    llava: &[SourceRecord],
    dial: &[SourceRecord],
    otter: &[SourceRecord],
) -> Vec<SourceRecord> {
    let mut out = Vec::new();
    for pair in otter {
        let mut parts: Vec<&SourceRecord> = Vec::new();
        for img in &pair.image_ids {
            for r in llava.iter().chain(dial) {
                if r.image_ids.contains(img) {
                    parts.push(r);
                }
            }
        }
        if parts.is_empty() {
            out.push(pair.clone());
            continue;
        }
        parts.push(pair);
        let mut seen: Vec<String> = Vec::new();
        let mut rounds = Vec::new();
        for p in parts {
            for r in &p.conversation.rounds {
                let images: Vec<String> = r
                    .images
                    .iter()
                    .filter(|i| !seen.contains(i))
                    .cloned()
                    .collect();
                seen.extend(images.iter().cloned());
                rounds.push(Round {
                    images,
                    question: r.question.clone(),
                    answer: r.answer.clone(),
                });
            }
        }
        out.push(SourceRecord {
            dataset: Dataset::LlavaOtterBlend,
            image_ids: pair.image_ids.clone(),
            conversation: Conversation {
                system: pair.conversation.system.clone(),
                rounds,
            },
        });
    }
    out
}

/// Multiset of `(question, answer)` pairs.
pub fn qa_multiset(records: &[SourceRecord]) -> BTreeMap<(String, String), usize> {
    let mut m = BTreeMap::new();
    for r in records {
        for round in &r.conversation.rounds {
            *m.entry((round.question.clone(), round.answer.clone()))
                .or_insert(0) += 1;
        }
    }
    m
}

pub fn image_multiset(records: &[SourceRecord]) -> HashMap<String, usize> {
    let mut m = HashMap::new();
    for r in records {
        for round in &r.conversation.rounds {
            for i in &round.images {
                *m.entry(i.clone()).or_insert(0) += 1;
            }
        }
    }
    m
}
