//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::attn::{AttentionInputs, AttentionPlan, AttnError, CrossInputs, DualCombine};
use crate::mask::{build_mask, AttentionVariant, ImageSelfAttention, MmcaMask};
use crate::modseq::{build_sequence, Modality, ModalitySequence};
use crate::tensor::Matrix;

/// Relative-error threshold used by every gradient check in this crate.
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradCheckError {
    #[error("eps {0} outside [1e-7, 1e-3]")]
    BadEps(f64),
    #[error("non-finite value during gradient check: {0}")]
    NonFinite(String),
    #[error("gradient shape mismatch for parameter {0}")]
    Shape(usize),
    #[error(transparent)]
    Attn(#[from] AttnError),
}

/// A function of a list of matrices with a hand-written backward pass.
pub trait DifferentiableOp {
    fn forward(&self, params: &[Matrix]) -> Result<Matrix, GradCheckError>;

    /// Gradients of `sum(d_out ⊙ forward(params))`, one per parameter.
    fn backward(&self, params: &[Matrix], d_out: &Matrix) -> Result<Vec<Matrix>, GradCheckError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(parameter index, flat entry index)` of the worst entry.
    pub worst: (usize, usize),
    pub entries_checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error < GRAD_TOLERANCE
    }
}

/// Compares the analytic gradient of `sum(forward(params))` with central
/// differences. Relative error per entry uses the denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check(
    op: &dyn DifferentiableOp,
    params: &[Matrix],
    eps: f64,
) -> Result<GradCheckReport, GradCheckError> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(GradCheckError::BadEps(eps));
    }
    let out = op.forward(params)?;
    if !out.is_finite() {
        return Err(GradCheckError::NonFinite("forward output".into()));
    }
    let ones = Matrix::from_fn(out.rows(), out.cols(), |_, _| 1.0);
    let analytic = op.backward(params, &ones)?;
    let mut worst = (0, 0);
    let mut max_rel = 0.0f64;
    let mut checked = 0;
    let mut work: Vec<Matrix> = params.to_vec();
    for (p, grad) in analytic.iter().enumerate() {
        if grad.shape() != params[p].shape() {
            return Err(GradCheckError::Shape(p));
        }
        if !grad.is_finite() {
            return Err(GradCheckError::NonFinite(format!("analytic gradient {p}")));
        }
        for idx in 0..params[p].as_slice().len() {
            let orig = params[p].as_slice()[idx];
            work[p].as_mut_slice()[idx] = orig + eps;
            let plus = op.forward(&work)?.sum();
            work[p].as_mut_slice()[idx] = orig - eps;
            let minus = op.forward(&work)?.sum();
            work[p].as_mut_slice()[idx] = orig;
            if !(plus.is_finite() && minus.is_finite()) {
                return Err(GradCheckError::NonFinite(format!(
                    "perturbed forward {p}/{idx}"
                )));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.as_slice()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
                worst = (p, idx);
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_relative_error: max_rel,
        worst,
        entries_checked: checked,
    })
}

/// Single-head attention as a differentiable op over `[Q, K, V]`, or
/// `[Q, K, V, Kx, Vx]` for the cross variant.
#[derive(Debug, Clone)]
pub struct AttentionOp {
    plan: AttentionPlan,
    scale: f64,
    /// Test hook: perturbs the analytic gradient to prove the harness catches errors.
    corrupt: bool,
}

impl AttentionOp {
    pub fn new(
        variant: AttentionVariant,
        mask: &MmcaMask,
        scale: f64,
        combine: DualCombine,
    ) -> Self {
        Self {
            plan: AttentionPlan::new(variant, mask, combine),
            scale,
            corrupt: false,
        }
    }

    pub fn corrupted(mut self) -> Self {
        self.corrupt = true;
        self
    }

    fn split(
        &self,
        params: &[Matrix],
    ) -> Result<(AttentionInputs, Option<CrossInputs>), GradCheckError> {
        let inputs = AttentionInputs::new(params[0].clone(), params[1].clone(), params[2].clone())?;
        let cross = match params.len() {
            5 => Some(CrossInputs {
                kx: params[3].clone(),
                vx: params[4].clone(),
            }),
            _ => None,
        };
        Ok((inputs, cross))
    }
}

impl DifferentiableOp for AttentionOp {
    fn forward(&self, params: &[Matrix]) -> Result<Matrix, GradCheckError> {
        let (inputs, cross) = self.split(params)?;
        Ok(self
            .plan
            .forward(&inputs, cross.as_ref(), self.scale)?
            .output)
    }

    fn backward(&self, params: &[Matrix], d_out: &Matrix) -> Result<Vec<Matrix>, GradCheckError> {
        let (inputs, cross) = self.split(params)?;
        let fwd = self.plan.forward(&inputs, cross.as_ref(), self.scale)?;
        let g = self
            .plan
            .backward(&inputs, cross.as_ref(), self.scale, &fwd, d_out)?;
        let mut out = vec![g.dq, g.dk, g.dv];
        if let (Some(a), Some(b)) = (g.dkx, g.dvx) {
            out.push(a);
            out.push(b);
        }
        if self.corrupt {
            out[0].as_mut_slice()[0] += 1.0;
        }
        Ok(out)
    }
}

/// Random modality layout of exactly `d` tokens; mixes text and image runs
/// whenever `d >= 2`.
pub fn random_layout<R: Rng + ?Sized>(d: usize, rng: &mut R) -> ModalitySequence {
    assert!(d >= 1);
    let mut segments = Vec::new();
    let mut remaining = d;
    let mut image = rng.random_bool(0.5);
    while remaining > 0 {
        let n = rng.random_range(1..=remaining.min(4));
        segments.push((
            if image {
                Modality::Image
            } else {
                Modality::Text
            },
            n,
        ));
        remaining -= n;
        image = rng.random_bool(0.5) || !image;
    }
    if d >= 2 && segments.iter().all(|s| s.0 == segments[0].0) {
        // force both modalities: flip the last token's run
        let last = segments.last_mut().expect("non-empty");
        let flipped = match last.0 {
            Modality::Text => Modality::Image,
            Modality::Image => Modality::Text,
        };
        if last.1 > 1 {
            last.1 -= 1;
            segments.push((flipped, 1));
        } else {
            last.0 = flipped;
        }
    }
    build_sequence(&segments).expect("generated segments are valid")
}

/// Seeded gradient check of one variant on a random `d`-token mixed layout.
pub fn check_variant(
    variant: AttentionVariant,
    d: usize,
    head_dim: usize,
    seed: u64,
    eps: f64,
) -> Result<GradCheckReport, GradCheckError> {
    check_variant_with(variant, d, head_dim, seed, eps, false)
}

pub fn check_variant_with(
    variant: AttentionVariant,
    d: usize,
    head_dim: usize,
    seed: u64,
    eps: f64,
    corrupt: bool,
) -> Result<GradCheckReport, GradCheckError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seq = random_layout(d, &mut rng);
    let mask = build_mask(variant, &seq, ImageSelfAttention::Block);
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut op = AttentionOp::new(variant, &mask, scale, DualCombine::Sum);
    if corrupt {
        op = op.corrupted();
    }
    let n = if variant == AttentionVariant::CausalPlusCross {
        5
    } else {
        3
    };
    let params: Vec<Matrix> = (0..n)
        .map(|_| Matrix::random_normal(d, head_dim, 1.0, &mut rng))
        .collect();
    grad_check(&op, &params, eps)
}
