//! Embedding backbone with a cosine-margin head, trained by plain SGD.
//!
//! The backbone is a two-layer MLP `x -> relu(W1·x + b1) -> W2·h + b2`
//! followed by L2 normalization. Heads hold one unnormalized weight row per
//! local class; rows are normalized just before logits are formed. All
//! gradients are analytic and checked against central differences in tests.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::SimRng;

/// Pre-normalization embeddings smaller than this are rejected.
pub const MIN_EMBED_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneDims {
    pub d_in: usize,
    pub d_h: usize,
    pub d_e: usize,
}

impl BackboneDims {
    /// Length of the flat parameter vector.
    pub fn len(&self) -> usize {
        self.d_h * self.d_in + self.d_h + self.d_e * self.d_h + self.d_e
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    pub dims: BackboneDims,
    /// `d_h × d_in`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `d_e × d_h`, row-major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl BackboneParams {
    pub fn zeros(dims: BackboneDims) -> Self {
        BackboneParams {
            dims,
            w1: vec![0.0; dims.d_h * dims.d_in],
            b1: vec![0.0; dims.d_h],
            w2: vec![0.0; dims.d_e * dims.d_h],
            b2: vec![0.0; dims.d_e],
        }
    }

    /// He-normal weights, zero biases.
    pub fn init(dims: BackboneDims, rng: &mut SimRng) -> Self {
        let mut p = Self::zeros(dims);
        let s1 = (2.0 / dims.d_in as f64).sqrt();
        let s2 = (2.0 / dims.d_h as f64).sqrt();
        for w in p.w1.iter_mut() {
            *w = s1 * rng.sample::<f64, _>(StandardNormal);
        }
        for w in p.w2.iter_mut() {
            *w = s2 * rng.sample::<f64, _>(StandardNormal);
        }
        p
    }

    /// Canonical order: W1 (row-major), b1, W2 (row-major), b2.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dims.len());
        v.extend_from_slice(&self.w1);
        v.extend_from_slice(&self.b1);
        v.extend_from_slice(&self.w2);
        v.extend_from_slice(&self.b2);
        v
    }

    pub fn unflatten(dims: BackboneDims, flat: &[f64]) -> Result<Self> {
        if flat.len() != dims.len() {
            return Err(Error::Shape(format!(
                "flat backbone has {} values, dims need {}",
                flat.len(),
                dims.len()
            )));
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite backbone parameter".into()));
        }
        let (w1, rest) = flat.split_at(dims.d_h * dims.d_in);
        let (b1, rest) = rest.split_at(dims.d_h);
        let (w2, b2) = rest.split_at(dims.d_e * dims.d_h);
        Ok(BackboneParams {
            dims,
            w1: w1.to_vec(),
            b1: b1.to_vec(),
            w2: w2.to_vec(),
            b2: b2.to_vec(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub classes: usize,
    pub dim: usize,
    /// `classes × dim`, row-major, stored unnormalized.
    pub weights: Vec<f64>,
}

impl HeadParams {
    pub fn new(classes: usize, dim: usize, weights: Vec<f64>) -> Result<Self> {
        if classes == 0 {
            return Err(Error::config("head.classes", "a head needs at least one class"));
        }
        if weights.len() != classes * dim {
            return Err(Error::Shape(format!(
                "head weights have {} values, expected {classes}×{dim}",
                weights.len()
            )));
        }
        Ok(HeadParams { classes, dim, weights })
    }

    /// Rows drawn from `N(0, 1/dim)`, so their norms start near one.
    pub fn init(classes: usize, dim: usize, rng: &mut SimRng) -> Result<Self> {
        let s = (1.0 / dim as f64).sqrt();
        let weights = (0..classes * dim)
            .map(|_| s * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self::new(classes, dim, weights)
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.weights[j * self.dim..(j + 1) * self.dim]
    }
}

/// Scale and additive angular margin of the face loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginConfig {
    pub scale: f64,
    pub margin: f64,
}

impl Default for MarginConfig {
    fn default() -> Self {
        MarginConfig {
            scale: 16.0,
            margin: 0.3,
        }
    }
}

impl MarginConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::config("model.scale", "must be positive"));
        }
        if !(self.margin >= 0.0 && self.margin < std::f64::consts::FRAC_PI_2) {
            return Err(Error::config("model.margin", "must lie in [0, pi/2)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub backbone: BackboneParams,
    pub head: HeadParams,
    pub loss: MarginConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub loss_face: f64,
    pub loss_dcl: f64,
    pub grad_backbone: Vec<f64>,
    /// Same layout as [`HeadParams::weights`].
    pub grad_head: Vec<f64>,
}

struct Forward {
    pre1: Vec<f64>,
    hidden: Vec<f64>,
    z_norm: f64,
    embedding: Vec<f64>,
}

fn forward(backbone: &BackboneParams, x: &[f64]) -> Result<Forward> {
    let d = backbone.dims;
    if x.len() != d.d_in {
        return Err(Error::Shape(format!(
            "input has {} features, backbone expects {}",
            x.len(),
            d.d_in
        )));
    }
    let mut pre1 = linalg::matvec(&backbone.w1, d.d_h, x);
    for (p, b) in pre1.iter_mut().zip(&backbone.b1) {
        *p += b;
    }
    let hidden: Vec<f64> = pre1.iter().map(|v| v.max(0.0)).collect();
    let mut z = linalg::matvec(&backbone.w2, d.d_e, &hidden);
    for (v, b) in z.iter_mut().zip(&backbone.b2) {
        *v += b;
    }
    let z_norm = linalg::norm(&z);
    if !(z_norm >= MIN_EMBED_NORM) || !z_norm.is_finite() {
        return Err(Error::Numeric(format!(
            "degenerate embedding (pre-normalization norm {z_norm:e})"
        )));
    }
    let embedding = z.iter().map(|v| v / z_norm).collect();
    Ok(Forward {
        pre1,
        hidden,
        z_norm,
        embedding,
    })
}

/// Unit-norm embedding of one input.
pub fn forward_embed(backbone: &BackboneParams, x: &[f64]) -> Result<Vec<f64>> {
    forward(backbone, x).map(|f| f.embedding)
}

/// `cos(θ + m)` and its derivative with respect to `cos θ`.
///
/// Past `θ + m > π` the usual `cos θ − m·sin m` substitute keeps the target
/// logit monotone in θ.
fn margin_cosine(cos_t: f64, margin: f64) -> (f64, f64) {
    if margin == 0.0 {
        return (cos_t, 1.0);
    }
    let c = cos_t.clamp(-1.0, 1.0);
    let (sin_m, cos_m) = margin.sin_cos();
    if c >= -cos_m {
        let sin_t = (1.0 - c * c).max(0.0).sqrt();
        let value = c * cos_m - sin_t * sin_m;
        let deriv = if sin_t > 1e-12 {
            cos_m + c * sin_m / sin_t
        } else {
            cos_m
        };
        (value, deriv)
    } else {
        (c - margin * sin_m, 1.0)
    }
}

/// Margin softmax on precomputed unit embeddings.
///
/// Returns the batch-mean loss, the gradient with respect to each embedding,
/// and the gradient with respect to the head weights.
pub fn margin_softmax(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    head: &HeadParams,
    cfg: MarginConfig,
) -> Result<(f64, Vec<Vec<f64>>, Vec<f64>)> {
    if head.classes == 0 {
        return Err(Error::config("head.classes", "a head needs at least one class"));
    }
    if embeddings.is_empty() {
        return Err(Error::Size("empty batch".into()));
    }
    if embeddings.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} embeddings but {} labels",
            embeddings.len(),
            labels.len()
        )));
    }
    let dim = head.dim;
    let mut row_norms = Vec::with_capacity(head.classes);
    let mut rows_hat = Vec::with_capacity(head.classes * dim);
    for j in 0..head.classes {
        let row = head.row(j);
        let n = linalg::norm(row);
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::Numeric(format!("head row {j} has norm {n}")));
        }
        row_norms.push(n);
        rows_hat.extend(row.iter().map(|v| v / n));
    }

    let batch = embeddings.len() as f64;
    let mut total = 0.0;
    let mut grad_emb = Vec::with_capacity(embeddings.len());
    // Gradient with respect to normalized rows; projected at the end.
    let mut grad_rows_hat = vec![0.0; head.classes * dim];
    let mut logits = vec![0.0; head.classes];
    let mut cosines = vec![0.0; head.classes];

    for (e, &y) in embeddings.iter().zip(labels) {
        if y >= head.classes {
            return Err(Error::Label {
                label: y,
                classes: head.classes,
            });
        }
        if e.len() != dim {
            return Err(Error::Shape(format!(
                "embedding has {} values, head expects {dim}",
                e.len()
            )));
        }
        for j in 0..head.classes {
            cosines[j] = linalg::dot(e, &rows_hat[j * dim..(j + 1) * dim]);
            logits[j] = cfg.scale * cosines[j];
        }
        let (psi, dpsi) = margin_cosine(cosines[y], cfg.margin);
        logits[y] = cfg.scale * psi;

        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - logits[y];

        let mut ge = vec![0.0; dim];
        for j in 0..head.classes {
            let p = (logits[j] - lse).exp();
            // dL/dcos_j
            let g = if j == y {
                cfg.scale * (p - 1.0) * dpsi
            } else {
                cfg.scale * p
            } / batch;
            let row_hat = &rows_hat[j * dim..(j + 1) * dim];
            for k in 0..dim {
                ge[k] += g * row_hat[k];
                grad_rows_hat[j * dim + k] += g * e[k];
            }
        }
        grad_emb.push(ge);
    }

    let mut grad_head = vec![0.0; head.classes * dim];
    for j in 0..head.classes {
        let row_hat = &rows_hat[j * dim..(j + 1) * dim];
        let g = &grad_rows_hat[j * dim..(j + 1) * dim];
        let radial = linalg::dot(g, row_hat);
        for k in 0..dim {
            grad_head[j * dim + k] = (g[k] - radial * row_hat[k]) / row_norms[j];
        }
    }
    Ok((total / batch, grad_emb, grad_head))
}

/// Batch-mean face loss with gradients for backbone and head.
pub fn face_loss(
    backbone: &BackboneParams,
    head: &HeadParams,
    inputs: &[&[f64]],
    labels: &[usize],
    cfg: MarginConfig,
) -> Result<LossReport> {
    if head.dim != backbone.dims.d_e {
        return Err(Error::Shape(format!(
            "head dim {} does not match embedding dim {}",
            head.dim, backbone.dims.d_e
        )));
    }
    let passes: Vec<Forward> = inputs.iter().map(|x| forward(backbone, x)).collect::<Result<_>>()?;
    let embeddings: Vec<Vec<f64>> = passes.iter().map(|f| f.embedding.clone()).collect();
    let (loss, grad_emb, grad_head) = margin_softmax(&embeddings, labels, head, cfg)?;

    let d = backbone.dims;
    let mut gw1 = vec![0.0; d.d_h * d.d_in];
    let mut gb1 = vec![0.0; d.d_h];
    let mut gw2 = vec![0.0; d.d_e * d.d_h];
    let mut gb2 = vec![0.0; d.d_e];
    for ((fw, ge), x) in passes.iter().zip(&grad_emb).zip(inputs) {
        let radial = linalg::dot(ge, &fw.embedding);
        let gz: Vec<f64> = ge
            .iter()
            .zip(&fw.embedding)
            .map(|(g, e)| (g - radial * e) / fw.z_norm)
            .collect();
        let mut gh = vec![0.0; d.d_h];
        for k in 0..d.d_e {
            gb2[k] += gz[k];
            let row = &d_row(&backbone.w2, k, d.d_h);
            for i in 0..d.d_h {
                gw2[k * d.d_h + i] += gz[k] * fw.hidden[i];
                gh[i] += gz[k] * row[i];
            }
        }
        for i in 0..d.d_h {
            if fw.pre1[i] <= 0.0 {
                continue;
            }
            gb1[i] += gh[i];
            for (k, xv) in x.iter().enumerate() {
                gw1[i * d.d_in + k] += gh[i] * xv;
            }
        }
    }
    let mut grad_backbone = gw1;
    grad_backbone.extend(gb1);
    grad_backbone.extend(gw2);
    grad_backbone.extend(gb2);
    Ok(LossReport {
        loss_face: loss,
        loss_dcl: 0.0,
        grad_backbone,
        grad_head,
    })
}

fn d_row(m: &[f64], r: usize, cols: usize) -> &[f64] {
    &m[r * cols..(r + 1) * cols]
}

/// Proximal penalty `(λ/2)·‖θ − θ_ref‖²` and its gradient `λ·(θ − θ_ref)`.
pub fn dcl_penalty(theta: &[f64], theta_ref: &[f64], lambda: f64) -> Result<(f64, Vec<f64>)> {
    if theta.len() != theta_ref.len() {
        return Err(Error::Shape(format!(
            "parameter vectors differ in length: {} vs {}",
            theta.len(),
            theta_ref.len()
        )));
    }
    if !(lambda >= 0.0) {
        return Err(Error::config("fed.lambda", "must be non-negative"));
    }
    if lambda == 0.0 {
        return Ok((0.0, vec![0.0; theta.len()]));
    }
    let grad: Vec<f64> = theta.iter().zip(theta_ref).map(|(a, b)| lambda * (a - b)).collect();
    let loss = 0.5 * lambda * linalg::sq_dist(theta, theta_ref);
    Ok((loss, grad))
}

pub fn sgd_step(params: &[f64], grad: &[f64], lr: f64) -> Result<Vec<f64>> {
    let mut out = params.to_vec();
    sgd_step_in_place(&mut out, grad, lr)?;
    Ok(out)
}

/// In-place `params -= lr·grad`; refuses the step if any gradient is non-finite.
pub fn sgd_step_in_place(params: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
    if params.len() != grad.len() {
        return Err(Error::Shape(format!(
            "params have {} values, gradient {}",
            params.len(),
            grad.len()
        )));
    }
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::config("lr", "must be finite and non-negative"));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient at coordinate {i}")));
    }
    for (p, g) in params.iter_mut().zip(grad) {
        *p -= lr * g;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_coordinate: usize,
    pub passed: bool,
}

/// Denominator floor of the relative error, so coordinates whose true
/// gradient is ~0 are judged on absolute error.
pub const FD_REL_FLOOR: f64 = 1e-6;

/// Compares the analytic gradient returned by `loss_fn` with central
/// differences `(f(θ + h·e_i) − f(θ − h·e_i)) / 2h` on every coordinate.
///
/// The relative error of a coordinate is
/// `|g − g_fd| / max(|g|, |g_fd|, FD_REL_FLOOR)`.
pub fn finite_diff_check<F>(loss_fn: F, params: &[f64], h: f64, tol: f64) -> Result<FdReport>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(h > 0.0) {
        return Err(Error::config("h", "step must be positive"));
    }
    let (_, analytic) = loss_fn(params)?;
    if analytic.len() != params.len() {
        return Err(Error::Shape("analytic gradient length differs from params".into()));
    }
    let mut probe = params.to_vec();
    let mut report = FdReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_coordinate: 0,
        passed: true,
    };
    for i in 0..params.len() {
        probe[i] = params[i] + h;
        let (up, _) = loss_fn(&probe)?;
        probe[i] = params[i] - h;
        let (down, _) = loss_fn(&probe)?;
        probe[i] = params[i];
        let numeric = (up - down) / (2.0 * h);
        let abs = (analytic[i] - numeric).abs();
        let rel = abs / analytic[i].abs().max(numeric.abs()).max(FD_REL_FLOOR);
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_coordinate = i;
        }
    }
    report.passed = report.max_rel_error < tol;
    Ok(report)
}

/// Loss of one SGD step, split by term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    pub face: f64,
    pub dcl: f64,
}

/// One SGD step on backbone and head. When `proximal` is given, the DCL
/// term `(λ/2)·‖θ − θ_ref‖²` is added to the backbone objective.
pub fn train_step(
    model: &mut ModelState,
    inputs: &[&[f64]],
    labels: &[usize],
    proximal: Option<(&[f64], f64)>,
    lr: f64,
) -> Result<StepLoss> {
    let report = face_loss(&model.backbone, &model.head, inputs, labels, model.loss)?;
    let mut theta = model.backbone.flatten();
    let mut grad = report.grad_backbone;
    let mut dcl = 0.0;
    if let Some((reference, lambda)) = proximal {
        let (loss, g) = dcl_penalty(&theta, reference, lambda)?;
        dcl = loss;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    if !(report.loss_face.is_finite() && dcl.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite loss (face {}, dcl {dcl})",
            report.loss_face
        )));
    }
    sgd_step_in_place(&mut theta, &grad, lr)?;
    sgd_step_in_place(&mut model.head.weights, &report.grad_head, lr)?;
    model.backbone = BackboneParams::unflatten(model.backbone.dims, &theta)?;
    Ok(StepLoss {
        face: report.loss_face,
        dcl,
    })
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"FDFR";
const CHECKPOINT_VERSION: u32 = 1;

/// Backbone plus optional head, as persisted between pipeline stages.
/// A head with zero classes on disk means "backbone only".
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub backbone: BackboneParams,
    pub head: Option<HeadParams>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let d = self.backbone.dims;
        let classes = self.head.as_ref().map_or(0, |h| h.classes);
        let mut out = Vec::with_capacity(24 + 8 * (d.len() + classes * d.d_e));
        out.extend_from_slice(CHECKPOINT_MAGIC);
        for v in [
            CHECKPOINT_VERSION,
            d.d_in as u32,
            d.d_h as u32,
            d.d_e as u32,
            classes as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in self.backbone.flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(h) = &self.head {
            for v in &h.weights {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |offset: usize, reason: &str| Error::Parse {
            location: format!("byte {offset}"),
            reason: reason.into(),
        };
        if bytes.len() < 24 {
            return Err(bad(0, "checkpoint shorter than its header"));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad(0, "bad magic"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        if word(0) != CHECKPOINT_VERSION {
            return Err(bad(4, "unsupported checkpoint version"));
        }
        let dims = BackboneDims {
            d_in: word(1) as usize,
            d_h: word(2) as usize,
            d_e: word(3) as usize,
        };
        let classes = word(4) as usize;
        let expected = 24 + 8 * (dims.len() + classes * dims.d_e);
        if bytes.len() != expected {
            return Err(bad(
                bytes.len().min(expected),
                &format!("expected {expected} bytes, found {}", bytes.len()),
            ));
        }
        let floats: Vec<f64> = bytes[24..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let (flat, head) = floats.split_at(dims.len());
        let backbone = BackboneParams::unflatten(dims, flat)?;
        let head = if classes == 0 {
            None
        } else {
            Some(HeadParams::new(classes, dims.d_e, head.to_vec())?)
        };
        Ok(Checkpoint { backbone, head })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn dims() -> BackboneDims {
        BackboneDims {
            d_in: 5,
            d_h: 7,
            d_e: 4,
        }
    }

    fn random_setup(
        seed: u64,
        batch: usize,
        classes: usize,
    ) -> (BackboneParams, HeadParams, Vec<Vec<f64>>, Vec<usize>) {
        let mut r = rng::stream(seed, 99);
        let backbone = BackboneParams::init(dims(), &mut r);
        let mut backbone = backbone;
        for b in backbone.b1.iter_mut().chain(backbone.b2.iter_mut()) {
            *b = 0.1 * r.sample::<f64, _>(StandardNormal);
        }
        let head = HeadParams::init(classes, dims().d_e, &mut r).unwrap();
        let inputs = (0..batch)
            .map(|_| (0..dims().d_in).map(|_| r.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let labels = (0..batch).map(|i| i % classes).collect();
        (backbone, head, inputs, labels)
    }

    #[test]
    fn zero_backbone_returns_normalized_bias() {
        let mut p = BackboneParams::zeros(dims());
        p.b2 = vec![3.0, 0.0, 4.0, 0.0];
        let e = forward_embed(&p, &[1.0; 5]).unwrap();
        assert_eq!(e, vec![0.6, 0.0, 0.8, 0.0]);
    }

    #[test]
    fn zero_embedding_is_numeric_error() {
        let p = BackboneParams::zeros(dims());
        assert!(matches!(forward_embed(&p, &[1.0; 5]), Err(Error::Numeric(_))));
    }

    #[test]
    fn wrong_input_length_is_shape_error() {
        let p = BackboneParams::zeros(dims());
        assert!(matches!(forward_embed(&p, &[1.0; 3]), Err(Error::Shape(_))));
    }

    #[test]
    fn hand_evaluated_two_by_two_forward() {
        let d = BackboneDims {
            d_in: 2,
            d_h: 2,
            d_e: 2,
        };
        let p = BackboneParams {
            dims: d,
            w1: vec![1.0, 2.0, -1.0, 0.5],
            b1: vec![0.5, 0.25],
            w2: vec![2.0, -1.0, 0.5, 3.0],
            b2: vec![0.1, -0.2],
        };
        // pre1 = (1·1 + 0.5, −1·1 + 0.25) = (1.5, −0.75) -> h = (1.5, 0)
        // z = (2·1.5 + 0.1, 0.5·1.5 − 0.2) = (3.1, 0.55)
        let n = (3.1f64 * 3.1 + 0.55 * 0.55).sqrt();
        let e = forward_embed(&p, &[1.0, 0.0]).unwrap();
        assert!((e[0] - 3.1 / n).abs() < 1e-9);
        assert!((e[1] - 0.55 / n).abs() < 1e-9);
    }

    #[test]
    fn single_class_zero_margin_loss_is_zero() {
        let head = HeadParams::new(1, 2, vec![0.3, 0.4]).unwrap();
        let emb = vec![vec![0.6, 0.8], vec![1.0, 0.0]];
        let cfg = MarginConfig {
            scale: 16.0,
            margin: 0.0,
        };
        let (loss, _, _) = margin_softmax(&emb, &[0, 0], &head, cfg).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn two_class_hand_value() {
        let head = HeadParams::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let cfg = MarginConfig {
            scale: 1.0,
            margin: 0.0,
        };
        let (loss, _, _) = margin_softmax(&[vec![1.0, 0.0]], &[0], &head, cfg).unwrap();
        let e = std::f64::consts::E;
        assert!((loss - (-(e / (e + 1.0)).ln())).abs() < 1e-12);
        assert!((loss - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn label_out_of_range() {
        let head = HeadParams::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let err = margin_softmax(&[vec![1.0, 0.0]], &[2], &head, MarginConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Label { label: 2, classes: 2 }));
    }

    #[test]
    fn zero_classes_is_config_error() {
        assert!(matches!(HeadParams::new(0, 2, vec![]), Err(Error::Config { .. })));
    }

    #[test]
    fn margin_fallback_past_pi() {
        let m = 0.3;
        let (v, d) = margin_cosine(-0.999, m);
        assert!((v - (-0.999 - m * m.sin())).abs() < 1e-15);
        assert_eq!(d, 1.0);
        let (v, _) = margin_cosine(0.5, m);
        assert!((v - (0.5f64.acos() + m).cos()).abs() < 1e-12);
    }

    fn face_flat(
        params: &[f64],
        head_shape: (usize, usize),
        inputs: &[Vec<f64>],
        labels: &[usize],
        cfg: MarginConfig,
    ) -> Result<(f64, Vec<f64>)> {
        let n = dims().len();
        let backbone = BackboneParams::unflatten(dims(), &params[..n])?;
        let head = HeadParams::new(head_shape.0, head_shape.1, params[n..].to_vec())?;
        let refs: Vec<&[f64]> = inputs.iter().map(|v| v.as_slice()).collect();
        let r = face_loss(&backbone, &head, &refs, labels, cfg)?;
        let mut g = r.grad_backbone;
        g.extend(r.grad_head);
        Ok((r.loss_face, g))
    }

    #[test]
    fn face_loss_matches_finite_differences() {
        for seed in 0..5 {
            let (backbone, head, inputs, labels) = random_setup(seed, 8, 3);
            let mut params = backbone.flatten();
            params.extend(&head.weights);
            let cfg = MarginConfig::default();
            let report = finite_diff_check(
                |p| face_flat(p, (3, dims().d_e), &inputs, &labels, cfg),
                &params,
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(report.passed, "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn linear_loss_exact() {
        let c = vec![0.5, -2.0, 3.0];
        let f = |p: &[f64]| Ok((linalg::dot(&c, p), c.clone()));
        let r = finite_diff_check(f, &[1.0, 2.0, 3.0], 1e-5, 1e-9).unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn dcl_matches_finite_differences() {
        let reference = vec![0.3, -1.0, 2.0, 0.0];
        let f = |p: &[f64]| dcl_penalty(p, &reference, 0.01);
        let r = finite_diff_check(f, &[1.0, 2.0, -3.0, 0.5], 1e-5, 1e-8).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn dcl_closed_forms() {
        let (loss, grad) = dcl_penalty(&[1.0, 2.0], &[1.0, 2.0], 0.5).unwrap();
        assert_eq!((loss, grad), (0.0, vec![0.0, 0.0]));
        let (loss, grad) = dcl_penalty(&[3.0, 1.0], &[1.0, 1.0], 0.01).unwrap();
        assert!((loss - 0.02).abs() < 1e-15);
        assert!((grad[0] - 0.02).abs() < 1e-15 && grad[1] == 0.0);
        let (loss, grad) = dcl_penalty(&[5.0, -7.0], &[0.0, 0.0], 0.0).unwrap();
        assert_eq!((loss, grad), (0.0, vec![0.0, 0.0]));
        assert!(matches!(dcl_penalty(&[1.0], &[1.0, 2.0], 1.0), Err(Error::Shape(_))));
    }

    #[test]
    fn sgd_arithmetic() {
        assert_eq!(sgd_step(&[1.0, 1.0], &[1.0, -1.0], 0.5).unwrap(), vec![0.5, 1.5]);
        assert_eq!(sgd_step(&[1.0, 2.0], &[0.0, 0.0], 0.3).unwrap(), vec![1.0, 2.0]);
        assert!(matches!(sgd_step(&[1.0], &[f64::NAN], 0.1), Err(Error::Numeric(_))));
    }

    #[test]
    fn sgd_geometric_decay_on_quadratic() {
        let mut theta = vec![1.0];
        for _ in 0..10 {
            let grad = theta.clone();
            theta = sgd_step(&theta, &grad, 0.1).unwrap();
        }
        assert!((theta[0] - 0.9f64.powi(10)).abs() < 1e-12);
        assert!((theta[0] - 0.34868).abs() < 1e-5);
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let (backbone, head, _, _) = random_setup(3, 1, 4);
        let ck = Checkpoint {
            backbone,
            head: Some(head),
        };
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..4], b"FDFR");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back, ck);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let bare = Checkpoint { head: None, ..ck };
        assert_eq!(Checkpoint::from_bytes(&bare.to_bytes()).unwrap(), bare);
    }

    proptest! {
        #[test]
        fn flatten_unflatten_bijection(seed in any::<u64>()) {
            let mut r = rng::stream(seed, 1);
            let p = BackboneParams::init(dims(), &mut r);
            let back = BackboneParams::unflatten(dims(), &p.flatten()).unwrap();
            prop_assert_eq!(back, p);
        }

        #[test]
        fn embeddings_are_unit_norm(seed in any::<u64>()) {
            let (backbone, _, inputs, _) = random_setup(seed, 4, 2);
            for x in &inputs {
                if let Ok(e) = forward_embed(&backbone, x) {
                    prop_assert!((linalg::norm(&e) - 1.0).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn face_loss_permutation_invariant(seed in any::<u64>(), rot in 1usize..8) {
            let (backbone, head, inputs, labels) = random_setup(seed, 8, 3);
            let refs: Vec<&[f64]> = inputs.iter().map(|v| v.as_slice()).collect();
            let a = face_loss(&backbone, &head, &refs, &labels, MarginConfig::default());
            let mut rr = refs.clone();
            let mut ll = labels.clone();
            rr.rotate_left(rot);
            ll.rotate_left(rot);
            let b = face_loss(&backbone, &head, &rr, &ll, MarginConfig::default());
            if let (Ok(a), Ok(b)) = (a, b) {
                prop_assert!((a.loss_face - b.loss_face).abs() < 1e-12);
            }
        }

        #[test]
        fn dcl_symmetric(a in prop::collection::vec(-10.0f64..10.0, 6), b in prop::collection::vec(-10.0f64..10.0, 6), lambda in 0.0f64..5.0) {
            let (l1, _) = dcl_penalty(&a, &b, lambda).unwrap();
            let (l2, _) = dcl_penalty(&b, &a, lambda).unwrap();
            prop_assert_eq!(l1, l2);
        }

        #[test]
        fn margin_never_decreases_loss(
            cy in 0.2f64..1.0,
            others in prop::collection::vec(-1.0f64..1.0, 3),
            m1 in 0.0f64..1.5,
            dm in 0.0f64..0.07,
        ) {
            // Embedding e1; head rows placed at prescribed cosines with e1.
            let dim = 5;
            let mut rows = Vec::new();
            let mut make_row = |c: f64, axis: usize| {
                let mut r = vec![0.0; dim];
                r[0] = c;
                r[axis] = (1.0 - c * c).sqrt();
                rows.extend(r);
            };
            make_row(cy, 1);
            for (i, c) in others.iter().enumerate() {
                make_row(c.min(cy - 0.1), i + 2);
            }
            let head = HeadParams::new(4, dim, rows).unwrap();
            let e = vec![1.0, 0.0, 0.0, 0.0, 0.0];
            let cfg = |m| MarginConfig { scale: 16.0, margin: m };
            let (l1, _, _) = margin_softmax(std::slice::from_ref(&e), &[0], &head, cfg(m1)).unwrap();
            let (l2, _, _) = margin_softmax(&[e], &[0], &head, cfg(m1 + dm)).unwrap();
            prop_assert!(l2 >= l1 - 1e-12, "{} < {}", l2, l1);
        }
    }
}
