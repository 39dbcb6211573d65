//! Diagnostic functions (IRT, MIRT, NeuralCD) with exact analytic gradients.
//!
//! Every kind fuses concept features into the student state and the question
//! vector with the same per-concept dense layer,
//!
//! ```text
//! fuse(x, c) = w[..F] . x + w[F..] . (c * x) + bias
//! ```
//!
//! where `c` is a concept vector. The layer is shared across domains, so a new
//! domain's concepts (derived from question text) can be scored without
//! retraining. NeuralCD's interaction net takes a fixed `k_max`-wide input;
//! domains with fewer concepts leave the tail at zero.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{all_finite, sigmoid, softplus, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CdmKind {
    Irt,
    Mirt,
    NeuralCd,
}

impl std::str::FromStr for CdmKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "irt" => Ok(CdmKind::Irt),
            "mirt" => Ok(CdmKind::Mirt),
            "neuralcd" => Ok(CdmKind::NeuralCd),
            other => Err(Error::Config(format!("unknown CDM kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for CdmKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CdmKind::Irt => "irt",
            CdmKind::Mirt => "mirt",
            CdmKind::NeuralCd => "neuralcd",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub kind: CdmKind,
    pub dim: usize,
    pub k_max: usize,
    pub hidden: [usize; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Offsets {
    student: usize,
    question: usize,
    disc: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    len: usize,
}

impl Offsets {
    fn new(shape: &ModelShape) -> Self {
        let fusion = 2 * shape.dim + 1;
        let student = 0;
        let question = fusion;
        let mut next = 2 * fusion;
        let disc = next;
        if shape.kind == CdmKind::Mirt {
            next += fusion;
        }
        let [h1, h2] = shape.hidden;
        let (w1, b1, w2, b2, w3, b3);
        if shape.kind == CdmKind::NeuralCd {
            w1 = next;
            b1 = w1 + h1 * shape.k_max;
            w2 = b1 + h1;
            b2 = w2 + h2 * h1;
            w3 = b2 + h2;
            b3 = w3 + h2;
            next = b3 + 1;
        } else {
            (w1, b1, w2, b2, w3, b3) = (next, next, next, next, next, next);
        }
        Self {
            student,
            question,
            disc,
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            len: next,
        }
    }

    fn segments(&self, shape: &ModelShape) -> Vec<(&'static str, usize, usize)> {
        let fusion = 2 * shape.dim + 1;
        let mut out = vec![
            ("student_fusion", self.student, fusion),
            ("question_fusion", self.question, fusion),
        ];
        if shape.kind == CdmKind::Mirt {
            out.push(("discrimination", self.disc, fusion));
        }
        if shape.kind == CdmKind::NeuralCd {
            let [h1, h2] = shape.hidden;
            out.extend([
                ("net.w1", self.w1, h1 * shape.k_max),
                ("net.b1", self.b1, h1),
                ("net.w2", self.w2, h2 * h1),
                ("net.b2", self.b2, h2),
                ("net.w3", self.w3, h2),
                ("net.b3", self.b3, 1),
            ]);
        }
        out
    }
}

/// Concept features of the domain a question belongs to.
#[derive(Debug, Clone, Copy)]
pub struct ConceptCtx<'a> {
    pub concepts: &'a Matrix,
    pub concept_mean: &'a [f64],
}

impl<'a> ConceptCtx<'a> {
    pub fn new(concepts: &'a Matrix, concept_mean: &'a [f64]) -> Self {
        Self {
            concepts,
            concept_mean,
        }
    }
}

impl<'a> From<&'a crate::embed::DomainEmbedding> for ConceptCtx<'a> {
    fn from(e: &'a crate::embed::DomainEmbedding) -> Self {
        Self::new(&e.concept_vecs, &e.concept_mean)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probability: f64,
    pub mastery: Option<Vec<f64>>,
    pub difficulty: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub state: Vec<f64>,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticModel {
    shape: ModelShape,
    offsets: Offsets,
    params: Vec<f64>,
}

#[inline]
fn fuse(w: &[f64], x: &[f64], c: &[f64]) -> f64 {
    let f = x.len();
    let mut z = w[2 * f];
    for j in 0..f {
        z += (w[j] + w[f + j] * c[j]) * x[j];
    }
    z
}

/// Accumulates `dz * d fuse / d(w, x)`.
#[inline]
fn fuse_backward(w: &[f64], x: &[f64], c: &[f64], dz: f64, gw: &mut [f64], gx: Option<&mut [f64]>) {
    let f = x.len();
    for j in 0..f {
        gw[j] += dz * x[j];
        gw[f + j] += dz * c[j] * x[j];
    }
    gw[2 * f] += dz;
    if let Some(gx) = gx {
        for j in 0..f {
            gx[j] += dz * (w[j] + w[f + j] * c[j]);
        }
    }
}

/// Mask-weighted mean of the associated concept rows.
fn masked_concept_mean(ctx: &ConceptCtx<'_>, mask: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|x| *x = 0.0);
    let mut total = 0.0;
    for (c, &m) in mask.iter().enumerate() {
        if m != 0.0 {
            total += m;
            for (o, x) in out.iter_mut().zip(ctx.concepts.row(c)) {
                *o += m * x;
            }
        }
    }
    if total != 0.0 {
        out.iter_mut().for_each(|x| *x /= total);
    }
}

impl DiagnosticModel {
    /// Seeded initialization; interaction-net weights start nonnegative.
    pub fn new(shape: ModelShape, seed: u64) -> Result<Self> {
        if shape.dim == 0 || shape.k_max == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if shape.kind == CdmKind::NeuralCd && (shape.hidden[0] == 0 || shape.hidden[1] == 0) {
            return Err(Error::Config("hidden sizes must be positive".into()));
        }
        let offsets = Offsets::new(&shape);
        let mut params = vec![0.0; offsets.len];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = shape.dim;
        let a = (6.0 / (2 * f + 1) as f64).sqrt();
        let mut fusions = vec![offsets.student, offsets.question];
        if shape.kind == CdmKind::Mirt {
            fusions.push(offsets.disc);
        }
        for start in fusions {
            for w in &mut params[start..start + 2 * f] {
                *w = rng.gen_range(-a..=a);
            }
        }
        if shape.kind == CdmKind::NeuralCd {
            let [h1, h2] = shape.hidden;
            for (start, fan_in, fan_out) in [
                (offsets.w1, shape.k_max, h1),
                (offsets.w2, h1, h2),
                (offsets.w3, h2, 1),
            ] {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                for w in &mut params[start..start + fan_in * fan_out] {
                    *w = rng.gen_range(0.0..=bound);
                }
            }
        }
        Ok(Self {
            shape,
            offsets,
            params,
        })
    }

    pub fn shape(&self) -> &ModelShape {
        &self.shape
    }

    pub fn kind(&self) -> CdmKind {
        self.shape.kind
    }

    pub fn dim(&self) -> usize {
        self.shape.dim
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Parameters as named flat arrays, in layout order.
    pub fn named_params(&self) -> BTreeMap<String, Vec<f64>> {
        self.offsets
            .segments(&self.shape)
            .into_iter()
            .map(|(name, start, len)| (name.to_string(), self.params[start..start + len].to_vec()))
            .collect()
    }

    pub fn from_named_params(shape: ModelShape, named: &BTreeMap<String, Vec<f64>>) -> Result<Self> {
        let offsets = Offsets::new(&shape);
        let mut params = vec![0.0; offsets.len];
        for (name, start, len) in offsets.segments(&shape) {
            let values = named
                .get(name)
                .ok_or_else(|| Error::Validation(format!("checkpoint lacks parameter `{name}`")))?;
            if values.len() != len {
                return Err(Error::Dimension(format!(
                    "parameter `{name}` has {} values, expected {len}",
                    values.len()
                )));
            }
            params[start..start + len].copy_from_slice(values);
        }
        if !all_finite(&params) {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(Self {
            shape,
            offsets,
            params,
        })
    }

    fn student_w(&self) -> &[f64] {
        let f = self.shape.dim;
        &self.params[self.offsets.student..self.offsets.student + 2 * f + 1]
    }

    fn question_w(&self) -> &[f64] {
        let f = self.shape.dim;
        &self.params[self.offsets.question..self.offsets.question + 2 * f + 1]
    }

    fn disc_w(&self) -> &[f64] {
        let f = self.shape.dim;
        &self.params[self.offsets.disc..self.offsets.disc + 2 * f + 1]
    }

    fn check(&self, u: &[f64], v: &[f64], ctx: &ConceptCtx<'_>, mask: &[f64]) -> Result<()> {
        let f = self.shape.dim;
        if u.len() != f || v.len() != f || ctx.concepts.cols() != f || ctx.concept_mean.len() != f {
            return Err(Error::Dimension(format!(
                "expected vectors of length {f} (student {}, question {}, concepts {})",
                u.len(),
                v.len(),
                ctx.concepts.cols()
            )));
        }
        if mask.len() != ctx.concepts.rows() {
            return Err(Error::Dimension(format!(
                "mask has {} entries for {} concepts",
                mask.len(),
                ctx.concepts.rows()
            )));
        }
        if ctx.concepts.rows() > self.shape.k_max {
            return Err(Error::Dimension(format!(
                "domain has {} concepts but the model supports at most {}",
                ctx.concepts.rows(),
                self.shape.k_max
            )));
        }
        if !all_finite(u) || !all_finite(v) || !all_finite(ctx.concepts.as_slice()) {
            return Err(Error::NonFinite("model input".into()));
        }
        Ok(())
    }

    /// Predicted probability of a correct response, with per-concept mastery and
    /// difficulty where the kind defines them.
    pub fn predict(&self, u: &[f64], v: &[f64], concepts: &Matrix, mask: &[f64]) -> Result<Prediction> {
        let mean = concepts.mean_row();
        let ctx = ConceptCtx::new(concepts, &mean);
        self.check(u, v, &ctx, mask)?;
        let probability = self.forward(u, v, &ctx, mask);
        let (mastery, difficulty) = match self.shape.kind {
            CdmKind::Irt => (None, None),
            CdmKind::Mirt => (Some(self.mastery(u, &ctx)), None),
            CdmKind::NeuralCd => (
                Some(self.mastery(u, &ctx)),
                Some(
                    (0..concepts.rows())
                        .map(|c| sigmoid(fuse(self.question_w(), v, concepts.row(c))))
                        .collect(),
                ),
            ),
        };
        Ok(Prediction {
            probability,
            mastery,
            difficulty,
        })
    }

    /// Squared residual `(y - p)^2`.
    pub fn loss(&self, u: &[f64], v: &[f64], concepts: &Matrix, mask: &[f64], y: f64) -> Result<f64> {
        let p = self.predict(u, v, concepts, mask)?.probability;
        Ok((y - p) * (y - p))
    }

    /// Exact gradient of the squared residual with respect to the student state and all parameters.
    pub fn grad(&self, u: &[f64], v: &[f64], concepts: &Matrix, mask: &[f64], y: f64) -> Result<Gradients> {
        let mean = concepts.mean_row();
        let ctx = ConceptCtx::new(concepts, &mean);
        self.check(u, v, &ctx, mask)?;
        let mut params = vec![0.0; self.params.len()];
        let mut state = vec![0.0; self.shape.dim];
        self.accumulate(u, v, &ctx, mask, y, 1.0, &mut params, Some(&mut state));
        Ok(Gradients { state, params })
    }

    /// Probability only; inputs are assumed validated.
    pub fn forward(&self, u: &[f64], v: &[f64], ctx: &ConceptCtx<'_>, mask: &[f64]) -> f64 {
        let mut scratch = vec![0.0; self.shape.dim];
        match self.shape.kind {
            CdmKind::Irt => {
                masked_concept_mean(ctx, mask, &mut scratch);
                let theta = fuse(self.student_w(), u, ctx.concept_mean);
                let b = fuse(self.question_w(), v, &scratch);
                sigmoid(theta - b)
            }
            CdmKind::Mirt => {
                masked_concept_mean(ctx, mask, &mut scratch);
                let b = fuse(self.question_w(), v, &scratch);
                let mut logit = -b;
                for (c, &m) in mask.iter().enumerate() {
                    if m != 0.0 {
                        let row = ctx.concepts.row(c);
                        let theta = sigmoid(fuse(self.student_w(), u, row));
                        let a = softplus(fuse(self.disc_w(), v, row));
                        logit += m * a * theta;
                    }
                }
                sigmoid(logit)
            }
            CdmKind::NeuralCd => {
                let mut x = vec![0.0; mask.len()];
                for (c, &m) in mask.iter().enumerate() {
                    if m != 0.0 {
                        let row = ctx.concepts.row(c);
                        let p = sigmoid(fuse(self.student_w(), u, row));
                        let d = sigmoid(fuse(self.question_w(), v, row));
                        x[c] = m * (p - d);
                    }
                }
                self.net_forward(&x).2
            }
        }
    }

    /// Hidden activations and output of the interaction net for a (possibly short) input.
    fn net_forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
        let [h1, h2] = self.shape.hidden;
        let k = self.shape.k_max;
        let o = &self.offsets;
        let p = &self.params;
        let mut a1 = p[o.b1..o.b1 + h1].to_vec();
        for (c, &xc) in x.iter().enumerate() {
            if xc != 0.0 {
                for (i, a) in a1.iter_mut().enumerate() {
                    *a += p[o.w1 + i * k + c] * xc;
                }
            }
        }
        let hid1: Vec<f64> = a1.iter().map(|a| a.tanh()).collect();
        let mut hid2 = Vec::with_capacity(h2);
        for r in 0..h2 {
            let w = &p[o.w2 + r * h1..o.w2 + (r + 1) * h1];
            let a = p[o.b2 + r] + crate::linalg::dot(w, &hid1);
            hid2.push(a.tanh());
        }
        let a3 = p[o.b3] + crate::linalg::dot(&p[o.w3..o.w3 + h2], &hid2);
        (hid1, hid2, sigmoid(a3))
    }

    /// Adds `weight * d (y - p)^2` to `gp` (parameters) and `gu` (student
    /// state). Returns the prediction.
    #[allow(clippy::too_many_arguments)]
    pub fn accumulate(
        &self,
        u: &[f64],
        v: &[f64],
        ctx: &ConceptCtx<'_>,
        mask: &[f64],
        y: f64,
        weight: f64,
        gp: &mut [f64],
        mut gu: Option<&mut [f64]>,
    ) -> f64 {
        let f = self.shape.dim;
        let o = self.offsets;
        let sw = o.student..o.student + 2 * f + 1;
        let qw = o.question..o.question + 2 * f + 1;
        let dw = o.disc..o.disc + 2 * f + 1;
        match self.shape.kind {
            CdmKind::Irt => {
                let mut cq = vec![0.0; f];
                masked_concept_mean(ctx, mask, &mut cq);
                let theta = fuse(self.student_w(), u, ctx.concept_mean);
                let b = fuse(self.question_w(), v, &cq);
                let yhat = sigmoid(theta - b);
                let gz = weight * -2.0 * (y - yhat) * yhat * (1.0 - yhat);
                fuse_backward(self.student_w(), u, ctx.concept_mean, gz, &mut gp[sw], gu.as_deref_mut());
                fuse_backward(self.question_w(), v, &cq, -gz, &mut gp[qw], None);
                yhat
            }
            CdmKind::Mirt => {
                let mut cq = vec![0.0; f];
                masked_concept_mean(ctx, mask, &mut cq);
                let b = fuse(self.question_w(), v, &cq);
                let active: Vec<(usize, f64, f64, f64, f64)> = mask
                    .iter()
                    .enumerate()
                    .filter(|(_, &m)| m != 0.0)
                    .map(|(c, &m)| {
                        let row = ctx.concepts.row(c);
                        let theta = sigmoid(fuse(self.student_w(), u, row));
                        let za = fuse(self.disc_w(), v, row);
                        (c, m, theta, softplus(za), za)
                    })
                    .collect();
                let logit = active.iter().map(|&(_, m, t, a, _)| m * a * t).sum::<f64>() - b;
                let yhat = sigmoid(logit);
                let gz = weight * -2.0 * (y - yhat) * yhat * (1.0 - yhat);
                for &(c, m, theta, a, za) in &active {
                    let row = ctx.concepts.row(c);
                    let dtheta = gz * m * a * theta * (1.0 - theta);
                    let da = gz * m * theta * sigmoid(za);
                    fuse_backward(self.student_w(), u, row, dtheta, &mut gp[sw.clone()], gu.as_deref_mut());
                    fuse_backward(self.disc_w(), v, row, da, &mut gp[dw.clone()], None);
                }
                fuse_backward(self.question_w(), v, &cq, -gz, &mut gp[qw], None);
                yhat
            }
            CdmKind::NeuralCd => {
                let k = self.shape.k_max;
                let [h1, h2] = self.shape.hidden;
                let mut x = vec![0.0; mask.len()];
                let mut pd = vec![(0.0, 0.0); mask.len()];
                for (c, &m) in mask.iter().enumerate() {
                    if m != 0.0 {
                        let row = ctx.concepts.row(c);
                        let p = sigmoid(fuse(self.student_w(), u, row));
                        let d = sigmoid(fuse(self.question_w(), v, row));
                        pd[c] = (p, d);
                        x[c] = m * (p - d);
                    }
                }
                let (hid1, hid2, yhat) = self.net_forward(&x);
                let g3 = weight * -2.0 * (y - yhat) * yhat * (1.0 - yhat);
                let p = &self.params;
                gp[o.b3] += g3;
                let mut da2 = vec![0.0; h2];
                for r in 0..h2 {
                    gp[o.w3 + r] += g3 * hid2[r];
                    da2[r] = g3 * p[o.w3 + r] * (1.0 - hid2[r] * hid2[r]);
                }
                let mut dh1 = vec![0.0; h1];
                for r in 0..h2 {
                    if da2[r] == 0.0 {
                        continue;
                    }
                    gp[o.b2 + r] += da2[r];
                    let row = o.w2 + r * h1;
                    for i in 0..h1 {
                        gp[row + i] += da2[r] * hid1[i];
                        dh1[i] += p[row + i] * da2[r];
                    }
                }
                let da1: Vec<f64> = dh1.iter().zip(&hid1).map(|(d, h)| d * (1.0 - h * h)).collect();
                for i in 0..h1 {
                    gp[o.b1 + i] += da1[i];
                }
                for (c, &m) in mask.iter().enumerate() {
                    if m == 0.0 {
                        continue;
                    }
                    let mut dx = 0.0;
                    for i in 0..h1 {
                        gp[o.w1 + i * k + c] += da1[i] * x[c];
                        dx += p[o.w1 + i * k + c] * da1[i];
                    }
                    let (pc, dc) = pd[c];
                    let row = ctx.concepts.row(c);
                    let dzp = dx * m * pc * (1.0 - pc);
                    let dzd = -dx * m * dc * (1.0 - dc);
                    fuse_backward(self.student_w(), u, row, dzp, &mut gp[sw.clone()], gu.as_deref_mut());
                    fuse_backward(self.question_w(), v, row, dzd, &mut gp[qw.clone()], None);
                }
                yhat
            }
        }
    }

    /// Clamps interaction-net weights to be nonnegative. IRT and MIRT are
    /// monotone by construction and are left unchanged.
    pub fn project_monotone(&mut self) {
        if self.shape.kind != CdmKind::NeuralCd {
            return;
        }
        let [h1, h2] = self.shape.hidden;
        let o = self.offsets;
        for range in [
            o.w1..o.w1 + h1 * self.shape.k_max,
            o.w2..o.w2 + h2 * h1,
            o.w3..o.w3 + h2,
        ] {
            for w in &mut self.params[range] {
                if *w < 0.0 {
                    *w = 0.0;
                }
            }
        }
    }

    /// True when every interaction-net weight is nonnegative.
    pub fn is_monotone(&self) -> bool {
        if self.shape.kind != CdmKind::NeuralCd {
            return true;
        }
        let [h1, h2] = self.shape.hidden;
        let o = self.offsets;
        self.params[o.w1..o.w1 + h1 * self.shape.k_max]
            .iter()
            .chain(&self.params[o.w2..o.w2 + h2 * h1])
            .chain(&self.params[o.w3..o.w3 + h2])
            .all(|&w| w >= 0.0)
    }

    /// Per-concept mastery in (0,1). IRT reports its single ability on every concept.
    pub fn mastery(&self, u: &[f64], ctx: &ConceptCtx<'_>) -> Vec<f64> {
        let k = ctx.concepts.rows();
        match self.shape.kind {
            CdmKind::Irt => vec![sigmoid(fuse(self.student_w(), u, ctx.concept_mean)); k],
            _ => (0..k)
                .map(|c| sigmoid(fuse(self.student_w(), u, ctx.concepts.row(c))))
                .collect(),
        }
    }

    /// Question difficulty in (0,1): mean of `d_v` over the associated
    /// concepts for NeuralCD, `sigmoid(b_v)` otherwise.
    pub fn difficulty(&self, v: &[f64], ctx: &ConceptCtx<'_>, mask: &[f64]) -> f64 {
        match self.shape.kind {
            CdmKind::NeuralCd => {
                let (mut sum, mut n) = (0.0, 0.0);
                for (c, &m) in mask.iter().enumerate() {
                    if m != 0.0 {
                        sum += sigmoid(fuse(self.question_w(), v, ctx.concepts.row(c)));
                        n += 1.0;
                    }
                }
                if n == 0.0 {
                    0.5
                } else {
                    sum / n
                }
            }
            _ => {
                let mut cq = vec![0.0; self.shape.dim];
                masked_concept_mean(ctx, mask, &mut cq);
                sigmoid(fuse(self.question_w(), v, &cq))
            }
        }
    }

    /// Prediction from an explicit mastery vector (the NeuralCD `p_u`, the
    /// MIRT `theta_u`, or the IRT ability broadcast over concepts).
    pub fn predict_from_mastery(&self, mastery: &[f64], v: &[f64], ctx: &ConceptCtx<'_>, mask: &[f64]) -> f64 {
        match self.shape.kind {
            CdmKind::Irt => {
                let m = mastery.iter().sum::<f64>() / mastery.len().max(1) as f64;
                let theta = (m / (1.0 - m)).ln();
                let mut cq = vec![0.0; self.shape.dim];
                masked_concept_mean(ctx, mask, &mut cq);
                sigmoid(theta - fuse(self.question_w(), v, &cq))
            }
            CdmKind::Mirt => {
                let mut cq = vec![0.0; self.shape.dim];
                masked_concept_mean(ctx, mask, &mut cq);
                let mut logit = -fuse(self.question_w(), v, &cq);
                for (c, &m) in mask.iter().enumerate() {
                    if m != 0.0 {
                        logit += m * softplus(fuse(self.disc_w(), v, ctx.concepts.row(c))) * mastery[c];
                    }
                }
                sigmoid(logit)
            }
            CdmKind::NeuralCd => {
                let x: Vec<f64> = mask
                    .iter()
                    .enumerate()
                    .map(|(c, &m)| {
                        if m != 0.0 {
                            m * (mastery[c] - sigmoid(fuse(self.question_w(), v, ctx.concepts.row(c))))
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.net_forward(&x).2
            }
        }
    }

    /// Sets the fusion layers from explicit values (`weight` has `2F` entries).
    pub fn set_student_fusion(&mut self, weight: &[f64], bias: f64) {
        let f = self.shape.dim;
        let s = self.offsets.student;
        self.params[s..s + 2 * f].copy_from_slice(weight);
        self.params[s + 2 * f] = bias;
    }

    pub fn set_question_fusion(&mut self, weight: &[f64], bias: f64) {
        let f = self.shape.dim;
        let s = self.offsets.question;
        self.params[s..s + 2 * f].copy_from_slice(weight);
        self.params[s + 2 * f] = bias;
    }

    /// Zeroes every bias of the interaction net.
    pub fn zero_net_biases(&mut self) {
        if self.shape.kind != CdmKind::NeuralCd {
            return;
        }
        let [h1, h2] = self.shape.hidden;
        let o = self.offsets;
        self.params[o.b1..o.b1 + h1].iter_mut().for_each(|b| *b = 0.0);
        self.params[o.b2..o.b2 + h2].iter_mut().for_each(|b| *b = 0.0);
        self.params[o.b3] = 0.0;
    }

    /// Index range of the interaction-net weight matrices inside the flat parameter vector.
    pub fn net_weight_ranges(&self) -> Vec<std::ops::Range<usize>> {
        if self.shape.kind != CdmKind::NeuralCd {
            return Vec::new();
        }
        let [h1, h2] = self.shape.hidden;
        let o = self.offsets;
        vec![o.w1..o.w1 + h1 * self.shape.k_max, o.w2..o.w2 + h2 * h1, o.w3..o.w3 + h2]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(kind: CdmKind) -> ModelShape {
        ModelShape {
            kind,
            dim: 4,
            k_max: 3,
            hidden: [6, 4],
        }
    }

    fn concepts() -> Matrix {
        Matrix::from_rows(&[
            vec![0.5, -0.2, 0.1, 0.3],
            vec![-0.4, 0.6, 0.2, 0.0],
            vec![0.1, 0.1, -0.7, 0.2],
        ])
    }

    #[test]
    fn irt_equal_scalars_give_half() {
        let mut m = DiagnosticModel::new(shape(CdmKind::Irt), 1).unwrap();
        // identical fusion for student and question, u == v
        let w = vec![0.3, -0.1, 0.2, 0.4, 0.1, 0.0, -0.2, 0.5];
        m.set_student_fusion(&w, 0.0);
        m.set_question_fusion(&w, 0.0);
        let c = Matrix::from_rows(&[vec![0.2, 0.2, 0.2, 0.2], vec![0.2, 0.2, 0.2, 0.2]]);
        let u = [0.1, 0.7, -0.3, 0.2];
        let p = m.predict(&u, &u, &c, &[1.0, 0.0]).unwrap();
        assert!((p.probability - 0.5).abs() < 1e-15);
    }

    #[test]
    fn irt_log_three_gives_three_quarters() {
        let mut m = DiagnosticModel::new(shape(CdmKind::Irt), 1).unwrap();
        // theta = ln 3 through the bias alone; b = 0
        m.set_student_fusion(&[0.0; 8], 3f64.ln());
        m.set_question_fusion(&[0.0; 8], 0.0);
        let p = m.predict(&[1.0; 4], &[1.0; 4], &concepts(), &[1.0, 0.0, 0.0]).unwrap();
        assert!((p.probability - 0.75).abs() < 1e-12);
        let l = m.loss(&[1.0; 4], &[1.0; 4], &concepts(), &[1.0, 0.0, 0.0], 1.0).unwrap();
        assert!((l - 0.0625).abs() < 1e-12);
    }

    #[test]
    fn neuralcd_equal_mastery_and_difficulty_give_half() {
        let mut m = DiagnosticModel::new(shape(CdmKind::NeuralCd), 5).unwrap();
        m.zero_net_biases();
        let w = vec![0.3, -0.1, 0.2, 0.4, 0.1, 0.0, -0.2, 0.5];
        m.set_student_fusion(&w, 0.1);
        m.set_question_fusion(&w, 0.1);
        let u = [0.2, -0.5, 0.9, 0.1];
        let p = m.predict(&u, &u, &concepts(), &[0.0, 1.0, 1.0]).unwrap();
        assert_eq!(p.probability, 0.5);
        assert_eq!(p.mastery, p.difficulty);
    }

    #[test]
    fn loss_is_bounded_and_zero_at_target() {
        for kind in [CdmKind::Irt, CdmKind::Mirt, CdmKind::NeuralCd] {
            let m = DiagnosticModel::new(shape(kind), 2).unwrap();
            let u = [0.3, -0.2, 0.8, 0.1];
            let v = [0.5, 0.5, -0.5, 0.5];
            let p = m.predict(&u, &v, &concepts(), &[1.0, 0.0, 0.0]).unwrap().probability;
            assert!(p > 0.0 && p < 1.0);
            for y in [0.0, 1.0] {
                let l = m.loss(&u, &v, &concepts(), &[1.0, 0.0, 0.0], y).unwrap();
                assert!((0.0..=1.0).contains(&l));
            }
            let g = m.grad(&u, &v, &concepts(), &[1.0, 0.0, 0.0], p).unwrap();
            assert!(g.params.iter().chain(&g.state).all(|&x| x == 0.0));
        }
    }

    #[test]
    fn predict_rejects_bad_dimensions() {
        let m = DiagnosticModel::new(shape(CdmKind::Mirt), 2).unwrap();
        assert!(matches!(
            m.predict(&[0.0; 3], &[0.0; 4], &concepts(), &[1.0, 0.0, 0.0]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            m.predict(&[0.0; 4], &[0.0; 4], &concepts(), &[1.0, 0.0]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            m.predict(&[f64::NAN, 0.0, 0.0, 0.0], &[0.0; 4], &concepts(), &[1.0, 0.0, 0.0]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn projection_clamps_negative_weights() {
        let mut m = DiagnosticModel::new(shape(CdmKind::NeuralCd), 2).unwrap();
        let ranges = m.net_weight_ranges();
        let first = ranges[0].start;
        m.params_mut()[first] = -0.3;
        m.params_mut()[first + 1] = 0.25;
        assert!(!m.is_monotone());
        m.project_monotone();
        assert_eq!(m.params()[first], 0.0);
        assert_eq!(m.params()[first + 1], 0.25);
        let before = m.clone();
        m.project_monotone();
        assert_eq!(before, m);
    }

    #[test]
    fn named_params_round_trip() {
        for kind in [CdmKind::Irt, CdmKind::Mirt, CdmKind::NeuralCd] {
            let m = DiagnosticModel::new(shape(kind), 9).unwrap();
            let back = DiagnosticModel::from_named_params(*m.shape(), &m.named_params()).unwrap();
            assert_eq!(m, back);
        }
    }

    #[test]
    fn kind_parses() {
        assert_eq!("NeuralCD".parse::<CdmKind>().unwrap(), CdmKind::NeuralCd);
        assert_eq!("irt".parse::<CdmKind>().unwrap(), CdmKind::Irt);
        assert!("dina".parse::<CdmKind>().is_err());
    }
}
