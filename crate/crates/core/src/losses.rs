//! The supervised re-identification objective: batch-hard triplet losses,
//! identity cross-entropy, label smoothing, and the KL feedback that pulls
//! each specific branch toward the joint branch's posterior.
//!
//! Functions suffixed `_var` record onto an autograd tape; the plain
//! functions evaluate the same tape on constants.

use agm_autograd::{CustomOp, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::backbone::EmbeddingBatch;
use crate::error::{AgmError, Result};

/// Floor applied to probabilities inside every logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub xi: f64,
    pub epsilon: f64,
    pub omega: f64,
    pub lambda3: f64,
    pub lambda4: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            xi: 0.3,
            epsilon: 0.1,
            omega: 1.0,
            lambda3: 1.0,
            lambda4: 1.5,
        }
    }
}

impl LossConfig {
    pub fn regdb() -> Self {
        LossConfig {
            omega: 0.7,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.xi > 0.0) {
            return Err(AgmError::Config(format!("margin must be positive, got {}", self.xi)));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(AgmError::Config(format!("smoothing must lie in [0,1), got {}", self.epsilon)));
        }
        for (name, v) in [("omega", self.omega), ("lambda3", self.lambda3), ("lambda4", self.lambda4)] {
            if !(v >= 0.0) {
                return Err(AgmError::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Row-stochastic `N × C` matrix of class posteriors.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbBatch {
    probs: Tensor,
}

impl ProbBatch {
    pub fn new(probs: Tensor) -> Result<Self> {
        if probs.ndim() != 2 || probs.is_empty() {
            return Err(AgmError::ShapeMismatch(format!(
                "probabilities must be a non-empty N×C matrix, got {:?}",
                probs.shape()
            )));
        }
        let (n, _) = probs.dims2();
        for i in 0..n {
            let row = probs.row(i);
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(AgmError::Precondition(format!("row {i} is not a probability distribution (sum {sum})")));
            }
        }
        Ok(ProbBatch { probs })
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    pub fn rows(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.probs.row(i)
    }
}

fn check_labels(labels: &[u32], n: usize, classes: usize) -> Result<()> {
    if labels.len() != n {
        return Err(AgmError::LabelMismatch(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(AgmError::LabelMismatch(format!("label {bad} outside [0, {classes})")));
    }
    Ok(())
}

fn eval_scalar(build: impl FnOnce(&mut Graph) -> Var) -> f64 {
    let mut g = Graph::new();
    let out = build(&mut g);
    g.value(out).item()
}

/// Hardest positive and negative for one anchor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HardPair {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    pub d_pos: f64,
    pub d_neg: f64,
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Batch-hard mining over Euclidean distances. Positives include the anchor
/// itself; ties resolve to the lowest sample index.
pub fn hard_pairs(vectors: &Tensor, labels: &[u32]) -> Result<Vec<HardPair>> {
    let (n, _) = vectors.dims2();
    if labels.len() != n {
        return Err(AgmError::LabelMismatch(format!("{} labels for {n} embeddings", labels.len())));
    }
    let mut sorted = labels.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() < 2 {
        return Err(AgmError::Precondition("triplet mining needs at least two identities".into()));
    }
    if sorted.len() == n {
        return Err(AgmError::Precondition("triplet mining needs two samples of some identity".into()));
    }
    let mut pairs = Vec::with_capacity(n);
    for a in 0..n {
        let (mut positive, mut d_pos) = (a, 0.0);
        let (mut negative, mut d_neg) = (usize::MAX, f64::INFINITY);
        for j in 0..n {
            let d = euclidean(vectors.row(a), vectors.row(j));
            if labels[j] == labels[a] {
                if d > d_pos {
                    positive = j;
                    d_pos = d;
                }
            } else if d < d_neg {
                negative = j;
                d_neg = d;
            }
        }
        pairs.push(HardPair {
            anchor: a,
            positive,
            negative,
            d_pos,
            d_neg,
        });
    }
    Ok(pairs)
}

#[derive(Debug)]
struct TripletOp {
    pairs: Vec<HardPair>,
    xi: f64,
}

impl CustomOp for TripletOp {
    fn name(&self) -> &str {
        "hard_triplet"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor) -> Vec<Option<Tensor>> {
        let x = inputs[0];
        let (n, d) = x.dims2();
        let scale = grad_out.item() / n as f64;
        let mut dx = Tensor::zeros(x.shape());
        // ∂‖a−b‖/∂a = (a−b)/‖a−b‖; zero at coincident points.
        let push = |dx: &mut Tensor, i: usize, j: usize, dist: f64, sign: f64| {
            if dist <= 0.0 {
                return;
            }
            for k in 0..d {
                let u = (x.row(i)[k] - x.row(j)[k]) / dist;
                dx.data_mut()[i * d + k] += sign * scale * u;
                dx.data_mut()[j * d + k] -= sign * scale * u;
            }
        };
        for p in &self.pairs {
            if p.d_pos - p.d_neg + self.xi > 0.0 {
                push(&mut dx, p.anchor, p.positive, p.d_pos, 1.0);
                push(&mut dx, p.anchor, p.negative, p.d_neg, -1.0);
            }
        }
        vec![Some(dx)]
    }
}

/// Mean over anchors of `max(d_pos − d_neg + ξ, 0)`.
pub fn hard_triplet_var(g: &mut Graph, emb: Var, labels: &[u32], xi: f64) -> Result<Var> {
    let pairs = hard_pairs(g.value(emb), labels)?;
    let loss = pairs.iter().map(|p| (p.d_pos - p.d_neg + xi).max(0.0)).sum::<f64>() / pairs.len() as f64;
    Ok(g.custom(Box::new(TripletOp { pairs, xi }), &[emb], Tensor::scalar(loss)))
}

pub fn hard_triplet(emb: &EmbeddingBatch, xi: f64) -> Result<f64> {
    let mut g = Graph::new();
    let v = g.constant(emb.vectors().clone());
    let out = hard_triplet_var(&mut g, v, emb.labels(), xi)?;
    Ok(g.value(out).item())
}

/// Row-wise softmax of `v · Wᵀ` for a classifier weight `W` of shape `C × D`.
pub fn posterior(weights: &Tensor, emb: &EmbeddingBatch) -> Result<ProbBatch> {
    if weights.ndim() != 2 || weights.shape()[1] != emb.dim() {
        return Err(AgmError::ShapeMismatch(format!(
            "classifier weight {:?} does not accept {}-dimensional embeddings",
            weights.shape(),
            emb.dim()
        )));
    }
    let mut g = Graph::new();
    let x = g.constant(emb.vectors().clone());
    let w = g.constant(weights.clone());
    let logits = g.matmul_nt(x, w);
    let p = g.softmax_rows(logits);
    ProbBatch::new(g.value(p).clone())
}

pub fn one_hot(labels: &[u32], classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &l) in labels.iter().enumerate() {
        t.data_mut()[i * classes + l as usize] = 1.0;
    }
    t
}

/// Smoothed targets: `1 − ε + ε/C` on the true class, `ε/C` elsewhere.
pub fn lsr_targets(labels: &[u32], classes: usize, eps: f64) -> Result<ProbBatch> {
    if !(0.0..1.0).contains(&eps) {
        return Err(AgmError::Config(format!("smoothing must lie in [0,1), got {eps}")));
    }
    if classes == 0 || labels.is_empty() {
        return Err(AgmError::Precondition("smoothed targets need labels and classes".into()));
    }
    check_labels(labels, labels.len(), classes)?;
    let off = eps / classes as f64;
    let on = 1.0 - eps + off;
    let mut t = Tensor::full(&[labels.len(), classes], off);
    for (i, &l) in labels.iter().enumerate() {
        t.data_mut()[i * classes + l as usize] = on;
    }
    ProbBatch::new(t)
}

/// `−mean_i Σ_k q_ik ln max(p_ik, floor)` against constant targets.
pub fn soft_ce_var(g: &mut Graph, probs: Var, targets: &Tensor) -> Var {
    let n = g.value(probs).shape()[0];
    let lp = g.clamp_log(probs, LOG_FLOOR, f64::MAX);
    let q = g.constant(targets.clone());
    let weighted = g.mul(lp, q);
    let s = g.sum(weighted);
    g.scale(s, -1.0 / n as f64)
}

pub fn identity_ce_var(g: &mut Graph, probs: Var, labels: &[u32]) -> Var {
    let classes = g.value(probs).shape()[1];
    soft_ce_var(g, probs, &one_hot(labels, classes))
}

/// `CE + ω · LSR` on the joint posterior.
pub fn joint_hybrid_var(g: &mut Graph, probs: Var, labels: &[u32], cfg: &LossConfig) -> Result<Var> {
    let classes = g.value(probs).shape()[1];
    let targets = lsr_targets(labels, classes, cfg.epsilon)?;
    let ce = identity_ce_var(g, probs, labels);
    let lsr = soft_ce_var(g, probs, targets.probs());
    let weighted = g.scale(lsr, cfg.omega);
    Ok(g.add(ce, weighted))
}

/// `mean_i Σ_k t_ik (ln t_ik − ln p_ik)` with both logs floored. The teacher
/// enters as a constant, so no gradient reaches it.
pub fn kl_feedback_var(g: &mut Graph, teacher: &Tensor, student: Var) -> Var {
    let n = teacher.shape()[0];
    let neg_entropy = teacher
        .data()
        .iter()
        .map(|&t| t * t.max(LOG_FLOOR).ln())
        .sum::<f64>()
        / n as f64;
    let ce = soft_ce_var(g, student, teacher);
    g.add_scalar(ce, neg_entropy)
}

pub fn identity_ce(probs: &ProbBatch, labels: &[u32]) -> Result<f64> {
    check_labels(labels, probs.rows(), probs.classes())?;
    Ok(eval_scalar(|g| {
        let p = g.constant(probs.probs().clone());
        identity_ce_var(g, p, labels)
    }))
}

pub fn lsr_loss(probs: &ProbBatch, targets: &ProbBatch) -> Result<f64> {
    if probs.probs().shape() != targets.probs().shape() {
        return Err(AgmError::ShapeMismatch(format!(
            "probabilities {:?} vs targets {:?}",
            probs.probs().shape(),
            targets.probs().shape()
        )));
    }
    Ok(eval_scalar(|g| {
        let p = g.constant(probs.probs().clone());
        soft_ce_var(g, p, targets.probs())
    }))
}

pub fn joint_hybrid_loss(joint: &ProbBatch, labels: &[u32], cfg: &LossConfig) -> Result<f64> {
    check_labels(labels, joint.rows(), joint.classes())?;
    let mut g = Graph::new();
    let p = g.constant(joint.probs().clone());
    let out = joint_hybrid_var(&mut g, p, labels, cfg)?;
    Ok(g.value(out).item())
}

pub fn kl_feedback(teacher: &ProbBatch, student: &ProbBatch) -> Result<f64> {
    if teacher.probs().shape() != student.probs().shape() {
        return Err(AgmError::ShapeMismatch(format!(
            "teacher {:?} vs student {:?}",
            teacher.probs().shape(),
            student.probs().shape()
        )));
    }
    Ok(eval_scalar(|g| {
        let s = g.constant(student.probs().clone());
        kl_feedback_var(g, teacher.probs(), s)
    }))
}

/// Branch identity losses regularized toward the joint posterior:
/// `(CE(p_g) + λ3·KL(p_joint‖p_g), CE(p_h) + λ4·KL(p_joint‖p_h))`.
pub fn regularized_branch_losses(
    p_g: &ProbBatch,
    p_h: &ProbBatch,
    p_joint: &ProbBatch,
    labels: &[u32],
    cfg: &LossConfig,
) -> Result<(f64, f64)> {
    let loss_g = identity_ce(p_g, labels)? + cfg.lambda3 * kl_feedback(p_joint, p_g)?;
    let loss_h = identity_ce(p_h, labels)? + cfg.lambda4 * kl_feedback(p_joint, p_h)?;
    Ok((loss_g, loss_h))
}

/// Named scalar losses. `terms` add up to `total`; `diagnostics` are
/// reported alongside but already folded into some term.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBundle {
    terms: Vec<(String, f64)>,
    diagnostics: Vec<(String, f64)>,
    total: f64,
}

impl LossBundle {
    pub fn new(terms: Vec<(String, f64)>, diagnostics: Vec<(String, f64)>) -> Result<Self> {
        if let Some((name, _)) = terms.iter().chain(&diagnostics).find(|(_, v)| !v.is_finite()) {
            return Err(AgmError::NonFinite { term: name.clone() });
        }
        let total = terms.iter().map(|(_, v)| v).sum();
        Ok(LossBundle {
            terms,
            diagnostics,
            total,
        })
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn terms(&self) -> &[(String, f64)] {
        &self.terms
    }

    pub fn diagnostics(&self) -> &[(String, f64)] {
        &self.diagnostics
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        if name == "total" {
            return Some(self.total);
        }
        self.terms
            .iter()
            .chain(&self.diagnostics)
            .find(|(n, _)| n == name)
            .map(|&(_, v)| v)
    }

    /// Flat JSON object of every term, diagnostic and the total.
    pub fn to_json(&self) -> serde_json::Map<String, serde_json::Value> {
        let mut m = serde_json::Map::new();
        for (k, v) in self.terms.iter().chain(&self.diagnostics) {
            m.insert(k.clone(), serde_json::json!(v));
        }
        m.insert("total".into(), serde_json::json!(self.total));
        m
    }

    /// Element-wise mean of bundles with identical term names.
    pub fn mean(bundles: &[LossBundle]) -> Option<LossBundle> {
        let first = bundles.first()?;
        let n = bundles.len() as f64;
        let avg = |pick: fn(&LossBundle) -> &[(String, f64)]| -> Vec<(String, f64)> {
            pick(first)
                .iter()
                .enumerate()
                .map(|(i, (name, _))| (name.clone(), bundles.iter().map(|b| pick(b)[i].1).sum::<f64>() / n))
                .collect()
        };
        let terms = avg(|b| &b.terms);
        let diagnostics = avg(|b| &b.diagnostics);
        let total = terms.iter().map(|(_, v)| v).sum();
        Some(LossBundle {
            terms,
            diagnostics,
            total,
        })
    }
}

/// The six summed terms of the re-identification objective, plus the two KL
/// values already folded into the regularized branch losses.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ReidTerms {
    pub id_g: f64,
    pub id_h: f64,
    pub id_joint: f64,
    pub t_g: f64,
    pub t_h: f64,
    pub t_joint: f64,
    pub kl_g: f64,
    pub kl_h: f64,
}

pub fn total_loss(t: &ReidTerms) -> Result<LossBundle> {
    let named = |pairs: &[(&str, f64)]| pairs.iter().map(|&(k, v)| (k.to_string(), v)).collect();
    LossBundle::new(
        named(&[
            ("l_id_g", t.id_g),
            ("l_id_h", t.id_h),
            ("l_id_joint", t.id_joint),
            ("l_t_g", t.t_g),
            ("l_t_h", t.t_h),
            ("l_t_joint", t.t_joint),
        ]),
        named(&[("kl_g", t.kl_g), ("kl_h", t.kl_h)]),
    )
}
