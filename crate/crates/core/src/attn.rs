//! Attention kernels for the three variants, with analytic gradients.
//!
//! Every variant is expressed as a sum of masked-softmax terms
//!
//! ```text
//! out = Σ_t  c_t · softmax_{allow_t}(scale · Q · K_{s(t)}ᵀ) · V_{s(t)}
//! ```
//!
//! where `s(t)` picks either the layer's own key/value matrices or the
//! separate cross-attention ones. MMCA is the two-term case
//! `softmax(S on M1) + softmax(S on M2)`, causal attention a single term over
//! the whole support, and the cross baseline routes the text-row image edges
//! through the cross parameters.

use rand::Rng;
use thiserror::Error;

use crate::mask::{self, AttentionVariant, BoolMask, ImageSelfAttention, MmcaMask, TEXT_KEY};
use crate::modseq::ModalitySequence;
use crate::tensor::Matrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttnError {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("cross attention requires separate key/value parameters")]
    MissingCrossParams,
    #[error("invalid attention config: {0}")]
    Config(String),
}

/// How the two MMCA softmaxes are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DualCombine {
    /// `A1 + A2`, text rows carry total weight up to 2.
    #[default]
    Sum,
    /// `(A1 + A2) / 2`.
    Average,
}

impl DualCombine {
    fn coefficient(self) -> f64 {
        match self {
            DualCombine::Sum => 1.0,
            DualCombine::Average => 0.5,
        }
    }
}

/// Softmax over the allowed entries of each row, shifted by the row maximum.
/// Rows with no allowed entry come back as zeros.
pub fn masked_softmax(scores: &Matrix, allow: &BoolMask) -> Result<Matrix, AttnError> {
    let (rows, cols) = scores.shape();
    if rows != allow.d() || cols != allow.d() {
        return Err(AttnError::Shape(format!(
            "scores {rows}x{cols} vs mask {d}x{d}",
            d = allow.d()
        )));
    }
    if !scores.is_finite() {
        return Err(AttnError::NonFinite("attention scores"));
    }
    let mut out = Matrix::zeros(rows, cols);
    for i in 0..rows {
        let allowed = allow.row(i);
        let row = scores.row(i);
        let max = row
            .iter()
            .zip(allowed)
            .filter(|(_, &a)| a)
            .map(|(&s, _)| s)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let out_row = out.row_mut(i);
        let mut total = 0.0;
        for j in 0..cols {
            if allowed[j] {
                let e = (row[j] - max).exp();
                out_row[j] = e;
                total += e;
            }
        }
        for v in out_row.iter_mut() {
            *v /= total;
        }
    }
    Ok(out)
}

/// Single-head query/key/value matrices, each `d × head_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionInputs {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
}

impl AttentionInputs {
    pub fn new(q: Matrix, k: Matrix, v: Matrix) -> Result<Self, AttnError> {
        let inputs = Self { q, k, v };
        inputs.validate()?;
        Ok(inputs)
    }

    fn validate(&self) -> Result<(), AttnError> {
        let d = self.q.rows();
        if self.k.rows() != d || self.v.rows() != d {
            return Err(AttnError::Shape(format!(
                "Q/K/V row counts {}/{}/{}",
                d,
                self.k.rows(),
                self.v.rows()
            )));
        }
        if self.q.cols() != self.k.cols() {
            return Err(AttnError::Shape(format!(
                "Q has {} columns but K has {}",
                self.q.cols(),
                self.k.cols()
            )));
        }
        if !(self.q.is_finite() && self.k.is_finite() && self.v.is_finite()) {
            return Err(AttnError::NonFinite("attention inputs"));
        }
        Ok(())
    }

    pub fn d(&self) -> usize {
        self.q.rows()
    }
}

/// Keys and values produced by the cross-attention parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossInputs {
    pub kx: Matrix,
    pub vx: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Own,
    Cross,
}

#[derive(Debug, Clone)]
struct Term {
    slot: Slot,
    allow: BoolMask,
    coef: f64,
}

/// A variant bound to a concrete mask: the list of softmax terms to evaluate.
#[derive(Debug, Clone)]
pub struct AttentionPlan {
    variant: AttentionVariant,
    d: usize,
    terms: Vec<Term>,
}

impl AttentionPlan {
    pub fn new(variant: AttentionVariant, mask: &MmcaMask, combine: DualCombine) -> Self {
        let d = mask.d();
        let terms = match variant {
            AttentionVariant::CausalOnly => vec![Term {
                slot: Slot::Own,
                allow: mask.support(),
                coef: 1.0,
            }],
            AttentionVariant::Mmca => {
                let (m1, m2) = mask::partition(mask);
                let c = combine.coefficient();
                vec![
                    Term {
                        slot: Slot::Own,
                        allow: m1,
                        coef: c,
                    },
                    Term {
                        slot: Slot::Own,
                        allow: m2,
                        coef: c,
                    },
                ]
            }
            AttentionVariant::CausalPlusCross => {
                // A row is a text query iff its diagonal entry carries the text value.
                let (m1, m2) = mask::partition(mask);
                let text_row = |i: usize| mask.get(i, i) == TEXT_KEY;
                vec![
                    Term {
                        slot: Slot::Own,
                        allow: m1,
                        coef: 1.0,
                    },
                    Term {
                        slot: Slot::Own,
                        allow: m2.restrict_rows(|i| !text_row(i)),
                        coef: 1.0,
                    },
                    Term {
                        slot: Slot::Cross,
                        allow: m2.restrict_rows(text_row),
                        coef: 1.0,
                    },
                ]
            }
        };
        Self { variant, d, terms }
    }

    pub fn variant(&self) -> AttentionVariant {
        self.variant
    }

    fn uses_cross(&self) -> bool {
        self.terms
            .iter()
            .any(|t| t.slot == Slot::Cross && t.allow.count() > 0)
    }

    fn check(
        &self,
        inputs: &AttentionInputs,
        cross: Option<&CrossInputs>,
    ) -> Result<(), AttnError> {
        inputs.validate()?;
        if inputs.d() != self.d {
            return Err(AttnError::Shape(format!(
                "inputs have {} rows but mask is {}x{}",
                inputs.d(),
                self.d,
                self.d
            )));
        }
        if self.variant == AttentionVariant::CausalPlusCross {
            let cross = cross.ok_or(AttnError::MissingCrossParams)?;
            if cross.kx.shape() != inputs.k.shape() || cross.vx.shape() != inputs.v.shape() {
                return Err(AttnError::Shape(format!(
                    "cross keys/values {:?}/{:?} vs own {:?}/{:?}",
                    cross.kx.shape(),
                    cross.vx.shape(),
                    inputs.k.shape(),
                    inputs.v.shape()
                )));
            }
            if !(cross.kx.is_finite() && cross.vx.is_finite()) {
                return Err(AttnError::NonFinite("cross inputs"));
            }
        }
        Ok(())
    }

    fn key_value<'a>(
        slot: Slot,
        inputs: &'a AttentionInputs,
        cross: Option<&'a CrossInputs>,
    ) -> (&'a Matrix, &'a Matrix) {
        match (slot, cross) {
            (Slot::Own, _) => (&inputs.k, &inputs.v),
            (Slot::Cross, Some(c)) => (&c.kx, &c.vx),
            (Slot::Cross, None) => unreachable!("checked before evaluation"),
        }
    }

    pub fn forward(
        &self,
        inputs: &AttentionInputs,
        cross: Option<&CrossInputs>,
        scale: f64,
    ) -> Result<PlanForward, AttnError> {
        self.check(inputs, cross)?;
        let h = inputs.v.cols();
        let own_scores = inputs.q.matmul_t(&inputs.k).scale(scale);
        let cross_scores = if self.uses_cross() {
            let c = cross.expect("checked");
            Some(inputs.q.matmul_t(&c.kx).scale(scale))
        } else {
            None
        };
        let mut weights = Vec::with_capacity(self.terms.len());
        let mut own_w = Matrix::zeros(self.d, self.d);
        let mut cross_w = Matrix::zeros(self.d, self.d);
        for term in &self.terms {
            let scores = match term.slot {
                Slot::Own => &own_scores,
                Slot::Cross => match &cross_scores {
                    Some(s) => s,
                    None => {
                        weights.push(Matrix::zeros(self.d, self.d));
                        continue;
                    }
                },
            };
            let a = masked_softmax(scores, &term.allow)?;
            let acc = match term.slot {
                Slot::Own => &mut own_w,
                Slot::Cross => &mut cross_w,
            };
            acc.add_assign(&a.scale(term.coef));
            weights.push(a);
        }
        let mut output = own_w.matmul(&inputs.v);
        if let Some(c) = cross.filter(|_| cross_scores.is_some()) {
            output.add_assign(&cross_w.matmul(&c.vx));
        }
        debug_assert_eq!(output.cols(), h);
        if !output.is_finite() {
            return Err(AttnError::NonFinite("attention output"));
        }
        Ok(PlanForward { output, weights })
    }

    /// Gradients of `sum(d_out ⊙ out)` with respect to every input matrix.
    pub fn backward(
        &self,
        inputs: &AttentionInputs,
        cross: Option<&CrossInputs>,
        scale: f64,
        forward: &PlanForward,
        d_out: &Matrix,
    ) -> Result<AttentionGrads, AttnError> {
        self.check(inputs, cross)?;
        if d_out.shape() != forward.output.shape() {
            return Err(AttnError::Shape(format!(
                "upstream gradient {:?} vs output {:?}",
                d_out.shape(),
                forward.output.shape()
            )));
        }
        let mut dq = Matrix::zeros(inputs.q.rows(), inputs.q.cols());
        let mut dk = Matrix::zeros(inputs.k.rows(), inputs.k.cols());
        let mut dv = Matrix::zeros(inputs.v.rows(), inputs.v.cols());
        let mut cross_grads = cross.map(|c| {
            (
                Matrix::zeros(c.kx.rows(), c.kx.cols()),
                Matrix::zeros(c.vx.rows(), c.vx.cols()),
            )
        });
        for (term, a) in self.terms.iter().zip(&forward.weights) {
            if term.allow.count() == 0 {
                continue;
            }
            let (k, v) = Self::key_value(term.slot, inputs, cross);
            // dA = c · dO · Vᵀ ; dV += c · Aᵀ · dO
            let da = d_out.matmul_t(v).scale(term.coef);
            let dv_term = a.t_matmul(d_out).scale(term.coef);
            // softmax Jacobian per row: dS = A ⊙ (dA − Σ_j A·dA)
            let mut ds = Matrix::zeros(self.d, self.d);
            for i in 0..self.d {
                let dot: f64 = a.row(i).iter().zip(da.row(i)).map(|(x, y)| x * y).sum();
                for j in 0..self.d {
                    ds[(i, j)] = a[(i, j)] * (da[(i, j)] - dot);
                }
            }
            dq.add_assign(&ds.matmul(k).scale(scale));
            let dk_term = ds.t_matmul(&inputs.q).scale(scale);
            match term.slot {
                Slot::Own => {
                    dk.add_assign(&dk_term);
                    dv.add_assign(&dv_term);
                }
                Slot::Cross => {
                    let (dkx, dvx) = cross_grads.as_mut().expect("checked");
                    dkx.add_assign(&dk_term);
                    dvx.add_assign(&dv_term);
                }
            }
        }
        let (dkx, dvx) = match cross_grads {
            Some((a, b)) => (Some(a), Some(b)),
            None => (None, None),
        };
        Ok(AttentionGrads {
            dq,
            dk,
            dv,
            dkx,
            dvx,
        })
    }
}

/// Forward result of an [`AttentionPlan`]: the output and the per-term weights.
#[derive(Debug, Clone)]
pub struct PlanForward {
    pub output: Matrix,
    weights: Vec<Matrix>,
}

impl PlanForward {
    pub fn term_weights(&self) -> &[Matrix] {
        &self.weights
    }
}

#[derive(Debug, Clone)]
pub struct AttentionGrads {
    pub dq: Matrix,
    pub dk: Matrix,
    pub dv: Matrix,
    pub dkx: Option<Matrix>,
    pub dvx: Option<Matrix>,
}

/// MMCA output together with the two softmax weight matrices.
#[derive(Debug, Clone)]
pub struct MmcaOutput {
    pub output: Matrix,
    pub a1: Matrix,
    pub a2: Matrix,
}

/// `(softmax(S on M1) + softmax(S on M2)) · V` with `S = scale · Q Kᵀ`.
pub fn mmca_forward(
    inputs: &AttentionInputs,
    mask: &MmcaMask,
    scale: f64,
) -> Result<MmcaOutput, AttnError> {
    mmca_forward_with(inputs, mask, scale, DualCombine::Sum)
}

pub fn mmca_forward_with(
    inputs: &AttentionInputs,
    mask: &MmcaMask,
    scale: f64,
    combine: DualCombine,
) -> Result<MmcaOutput, AttnError> {
    let plan = AttentionPlan::new(AttentionVariant::Mmca, mask, combine);
    let mut fwd = plan.forward(inputs, None, scale)?;
    let a2 = fwd.weights.pop().expect("two terms");
    let a1 = fwd.weights.pop().expect("two terms");
    Ok(MmcaOutput {
        output: fwd.output,
        a1,
        a2,
    })
}

/// One softmax over every allowed edge of `mask`.
pub fn causal_forward(
    inputs: &AttentionInputs,
    mask: &MmcaMask,
    scale: f64,
) -> Result<Matrix, AttnError> {
    let plan = AttentionPlan::new(AttentionVariant::CausalOnly, mask, DualCombine::Sum);
    Ok(plan.forward(inputs, None, scale)?.output)
}

/// Text rows: causal softmax over text keys with `V`, plus a softmax over
/// previous image keys computed with the separate `Kx`/`Vx`. Image rows attend
/// inside their own image with the layer's own keys and values.
pub fn cross_forward(
    inputs: &AttentionInputs,
    cross: Option<&CrossInputs>,
    mask: &MmcaMask,
    scale: f64,
) -> Result<Matrix, AttnError> {
    let plan = AttentionPlan::new(AttentionVariant::CausalPlusCross, mask, DualCombine::Sum);
    Ok(plan.forward(inputs, cross, scale)?.output)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionConfig {
    pub variant: AttentionVariant,
    pub num_heads: usize,
    pub model_dim: usize,
    pub scale: f64,
    pub normalize_dual_softmax: bool,
    pub image_self: ImageSelfAttention,
}

impl AttentionConfig {
    /// Scale defaults to `1 / sqrt(head_dim)`.
    pub fn new(
        variant: AttentionVariant,
        num_heads: usize,
        model_dim: usize,
    ) -> Result<Self, AttnError> {
        if num_heads == 0 || model_dim == 0 {
            return Err(AttnError::Config(
                "num_heads and model_dim must be positive".into(),
            ));
        }
        if !model_dim.is_multiple_of(num_heads) {
            return Err(AttnError::Config(format!(
                "model_dim {model_dim} is not divisible by num_heads {num_heads}"
            )));
        }
        Ok(Self {
            variant,
            num_heads,
            model_dim,
            scale: 1.0 / ((model_dim / num_heads) as f64).sqrt(),
            normalize_dual_softmax: false,
            image_self: ImageSelfAttention::Block,
        })
    }

    pub fn with_scale(mut self, scale: f64) -> Result<Self, AttnError> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(AttnError::Config(format!(
                "scale must be positive, got {scale}"
            )));
        }
        self.scale = scale;
        Ok(self)
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn combine(&self) -> DualCombine {
        if self.normalize_dual_softmax {
            DualCombine::Average
        } else {
            DualCombine::Sum
        }
    }

    pub fn build_mask(&self, seq: &ModalitySequence) -> MmcaMask {
        mask::build_mask(self.variant, seq, self.image_self)
    }

    /// Learned parameters of one attention layer for this variant.
    pub fn parameter_count(&self) -> usize {
        let square = self.model_dim * self.model_dim;
        match self.variant {
            AttentionVariant::CausalPlusCross => 6 * square,
            AttentionVariant::CausalOnly | AttentionVariant::Mmca => 4 * square,
        }
    }
}

/// Separate key/value projections used only by the cross variant.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossProjection {
    pub wkx: Matrix,
    pub wvx: Matrix,
}

/// Projection weights of one multi-head attention layer, all `model_dim × model_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub cross: Option<CrossProjection>,
}

impl AttentionParams {
    /// Gaussian init with std `1/sqrt(model_dim)`; cross projections only for
    /// the cross variant.
    pub fn random<R: Rng + ?Sized>(config: &AttentionConfig, rng: &mut R) -> Self {
        let m = config.model_dim;
        let std = 1.0 / (m as f64).sqrt();
        let mut draw = || Matrix::random_normal(m, m, std, rng);
        let wq = draw();
        let wk = draw();
        let wv = draw();
        let wo = draw();
        let cross =
            (config.variant == AttentionVariant::CausalPlusCross).then(|| CrossProjection {
                wkx: draw(),
                wvx: draw(),
            });
        Self {
            wq,
            wk,
            wv,
            wo,
            cross,
        }
    }

    pub fn parameter_count(&self) -> usize {
        let base = [&self.wq, &self.wk, &self.wv, &self.wo]
            .iter()
            .map(|m| m.rows() * m.cols())
            .sum::<usize>();
        base + self.cross.as_ref().map_or(0, |c| {
            c.wkx.rows() * c.wkx.cols() + c.wvx.rows() * c.wvx.cols()
        })
    }

    /// Named matrices in a fixed order.
    pub fn named(&self) -> Vec<(&'static str, &Matrix)> {
        let mut out = vec![
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
        ];
        if let Some(c) = &self.cross {
            out.push(("wkx", &c.wkx));
            out.push(("wvx", &c.wvx));
        }
        out
    }

    fn check(&self, config: &AttentionConfig) -> Result<(), AttnError> {
        let m = config.model_dim;
        for (name, w) in self.named() {
            if w.shape() != (m, m) {
                return Err(AttnError::Shape(format!(
                    "{name} is {:?}, expected {m}x{m}",
                    w.shape()
                )));
            }
        }
        if config.variant == AttentionVariant::CausalPlusCross && self.cross.is_none() {
            return Err(AttnError::MissingCrossParams);
        }
        Ok(())
    }
}

/// Intermediate values of [`multi_head_forward_cached`] needed by the backward pass.
#[derive(Debug, Clone)]
pub struct MultiHeadCache {
    x: Matrix,
    plan: AttentionPlan,
    heads: Vec<(AttentionInputs, Option<CrossInputs>, PlanForward)>,
    concat: Matrix,
}

pub fn multi_head_forward(
    config: &AttentionConfig,
    x: &Matrix,
    params: &AttentionParams,
    seq: &ModalitySequence,
) -> Result<Matrix, AttnError> {
    Ok(multi_head_forward_cached(config, x, params, seq)?.0)
}

pub fn multi_head_forward_cached(
    config: &AttentionConfig,
    x: &Matrix,
    params: &AttentionParams,
    seq: &ModalitySequence,
) -> Result<(Matrix, MultiHeadCache), AttnError> {
    params.check(config)?;
    if x.shape() != (seq.len(), config.model_dim) {
        return Err(AttnError::Shape(format!(
            "input is {:?}, expected {}x{}",
            x.shape(),
            seq.len(),
            config.model_dim
        )));
    }
    let mask = config.build_mask(seq);
    let plan = AttentionPlan::new(config.variant, &mask, config.combine());
    let q = x.matmul(&params.wq);
    let k = x.matmul(&params.wk);
    let v = x.matmul(&params.wv);
    let cross = params
        .cross
        .as_ref()
        .filter(|_| config.variant == AttentionVariant::CausalPlusCross)
        .map(|c| (x.matmul(&c.wkx), x.matmul(&c.wvx)));
    let hd = config.head_dim();
    let mut concat = Matrix::zeros(seq.len(), config.model_dim);
    let mut heads = Vec::with_capacity(config.num_heads);
    for head in 0..config.num_heads {
        let start = head * hd;
        let inputs = AttentionInputs {
            q: q.column_block(start, hd),
            k: k.column_block(start, hd),
            v: v.column_block(start, hd),
        };
        let head_cross = cross.as_ref().map(|(kx, vx)| CrossInputs {
            kx: kx.column_block(start, hd),
            vx: vx.column_block(start, hd),
        });
        let fwd = plan.forward(&inputs, head_cross.as_ref(), config.scale)?;
        concat.set_column_block(start, &fwd.output);
        heads.push((inputs, head_cross, fwd));
    }
    let out = concat.matmul(&params.wo);
    Ok((
        out,
        MultiHeadCache {
            x: x.clone(),
            plan,
            heads,
            concat,
        },
    ))
}

impl MultiHeadCache {
    pub fn concat(&self) -> &Matrix {
        &self.concat
    }
}

/// Gradient of `sum(d_out ⊙ out)` with respect to the layer input only; the
/// projection weights are treated as constants.
pub fn multi_head_backward_input(
    config: &AttentionConfig,
    params: &AttentionParams,
    cache: &MultiHeadCache,
    d_out: &Matrix,
) -> Result<Matrix, AttnError> {
    let d = cache.x.rows();
    if d_out.shape() != (d, config.model_dim) {
        return Err(AttnError::Shape(format!(
            "upstream gradient {:?}, expected {}x{}",
            d_out.shape(),
            d,
            config.model_dim
        )));
    }
    let hd = config.head_dim();
    let d_concat = d_out.matmul_t(&params.wo);
    let mut dq = Matrix::zeros(d, config.model_dim);
    let mut dk = Matrix::zeros(d, config.model_dim);
    let mut dv = Matrix::zeros(d, config.model_dim);
    let mut dkx = Matrix::zeros(d, config.model_dim);
    let mut dvx = Matrix::zeros(d, config.model_dim);
    for (head, (inputs, head_cross, fwd)) in cache.heads.iter().enumerate() {
        let start = head * hd;
        let g = cache.plan.backward(
            inputs,
            head_cross.as_ref(),
            config.scale,
            fwd,
            &d_concat.column_block(start, hd),
        )?;
        dq.set_column_block(start, &g.dq);
        dk.set_column_block(start, &g.dk);
        dv.set_column_block(start, &g.dv);
        if let (Some(a), Some(b)) = (g.dkx, g.dvx) {
            dkx.set_column_block(start, &a);
            dvx.set_column_block(start, &b);
        }
    }
    let mut dx = dq.matmul_t(&params.wq);
    dx.add_assign(&dk.matmul_t(&params.wk));
    dx.add_assign(&dv.matmul_t(&params.wv));
    if let Some(c) = params
        .cross
        .as_ref()
        .filter(|_| config.variant == AttentionVariant::CausalPlusCross)
    {
        dx.add_assign(&dkx.matmul_t(&c.wkx));
        dx.add_assign(&dvx.matmul_t(&c.wvx));
    }
    Ok(dx)
}
