//! Expected information gain over structures and forms, their weighted
//! combination, and the softmax choice rule.
//!
//! Every candidate intervention is scored by the mutual information between
//! the target variable and the machine's binary outcome,
//! `I(X; O | q) = H(X) + H(O | q) - H(X, O | q)`, which is the prior entropy
//! of `X` minus its expected posterior entropy.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::BlockSet;
use crate::error::{Error, Result};
use crate::inference::{entropy, JointBelief};

/// Which marginal an information gain is measured on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Structures,
    Forms,
}

/// Weight on form information `w` and softmax temperature `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub w: f64,
    pub t: f64,
}

impl PolicyParams {
    pub fn new(w: f64, t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&w) {
            return Err(Error::invalid(format!("weight w={w} outside [0, 1]")));
        }
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::invalid(format!("temperature t={t} must be positive")));
        }
        Ok(PolicyParams { w, t })
    }
}

/// Temperatures searched when fitting.
pub const TEMPERATURE_GRID: [f64; 6] = [0.001, 0.01, 0.1, 1.0, 10.0, 100.0];
/// Form-information weights searched when fitting every model except the
/// structure-only ablation, which uses `w = 0` alone.
pub const WEIGHT_GRID: [f64; 10] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

/// Every intervention of an `n_blocks` task, in bitmask order.
pub fn candidates(n_blocks: usize) -> Vec<BlockSet> {
    BlockSet::power_set(n_blocks).collect()
}

#[inline]
fn xlog2x(x: f64) -> f64 {
    if x > 0.0 {
        x * x.log2()
    } else {
        0.0
    }
}

/// Per-belief quantities shared by all candidates.
struct GainContext<'a> {
    belief: &'a JointBelief,
    act: Vec<f64>,
    /// `Σ_f P(s, f) a_f(k)` and `Σ_f P(s, f) (1 - a_f(k))`, laid out `[s * (n + 1) + k]`.
    on_by_count: Vec<f64>,
    off_by_count: Vec<f64>,
    structure_entropy: f64,
    form_entropy: f64,
}

impl<'a> GainContext<'a> {
    fn new(belief: &'a JointBelief) -> Self {
        let n = belief.n_blocks();
        let n_forms = belief.n_forms();
        let act = belief.activation_table();
        let mut on_by_count = Vec::with_capacity(belief.n_structures() * (n + 1));
        let mut off_by_count = Vec::with_capacity(belief.n_structures() * (n + 1));
        let mut structure_marginal = Vec::with_capacity(belief.n_structures());
        for row in belief.rows() {
            for k in 0..=n {
                let a = &act[k * n_forms..(k + 1) * n_forms];
                let (mut on, mut off) = (0.0, 0.0);
                for (p, l) in row.iter().zip(a) {
                    on += p * l;
                    off += p * (1.0 - l);
                }
                on_by_count.push(on);
                off_by_count.push(off);
            }
            structure_marginal.push(row.iter().sum::<f64>());
        }
        GainContext {
            belief,
            act,
            on_by_count,
            off_by_count,
            structure_entropy: entropy(&structure_marginal),
            form_entropy: entropy(belief.form_marginal().weights()),
        }
    }

    /// Returns `(P(o = 1 | q), EIG on structures, EIG on forms)`.
    fn gains(&self, q: BlockSet, forms_buf: &mut Vec<f64>) -> (f64, f64, f64) {
        let n = self.belief.n_blocks();
        let n_forms = self.belief.n_forms();
        let stride = n + 1;

        let (mut p_on, mut p_off) = (0.0, 0.0);
        let mut joint_structures = 0.0;
        for s in 0..self.belief.n_structures() {
            let k = q.intersection_len(BlockSet::from_bits(s as u32));
            let on = self.on_by_count[s * stride + k];
            let off = self.off_by_count[s * stride + k];
            p_on += on;
            p_off += off;
            joint_structures += xlog2x(on) + xlog2x(off);
        }
        let outcome_entropy = -(xlog2x(p_on) + xlog2x(p_off));
        let structures = self.structure_entropy + outcome_entropy + joint_structures;

        // Mass of each form among structures sharing a blicket count with q.
        forms_buf.clear();
        forms_buf.resize(stride * n_forms, 0.0);
        for (s, row) in self.belief.rows().enumerate() {
            let k = q.intersection_len(BlockSet::from_bits(s as u32));
            let acc = &mut forms_buf[k * n_forms..(k + 1) * n_forms];
            acc.iter_mut().zip(row).for_each(|(a, p)| *a += p);
        }
        let mut joint_forms = 0.0;
        for f in 0..n_forms {
            let (mut on, mut off) = (0.0, 0.0);
            for k in 0..stride {
                let mass = forms_buf[k * n_forms + f];
                let a = self.act[k * n_forms + f];
                on += mass * a;
                off += mass * (1.0 - a);
            }
            joint_forms += xlog2x(on) + xlog2x(off);
        }
        let forms = self.form_entropy + outcome_entropy + joint_forms;

        (p_on / (p_on + p_off), structures, forms)
    }
}

/// Information gains for every candidate intervention of a belief.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigTable {
    pub candidates: Vec<BlockSet>,
    pub structures: Vec<f64>,
    pub forms: Vec<f64>,
    pub p_activate: Vec<f64>,
}

impl EigTable {
    pub fn compute(belief: &JointBelief) -> Self {
        let context = GainContext::new(belief);
        let candidates = candidates(belief.n_blocks());
        let mut buf = Vec::new();
        let mut table = EigTable {
            structures: Vec::with_capacity(candidates.len()),
            forms: Vec::with_capacity(candidates.len()),
            p_activate: Vec::with_capacity(candidates.len()),
            candidates,
        };
        for &q in &table.candidates {
            let (p, s, f) = context.gains(q, &mut buf);
            table.p_activate.push(p);
            table.structures.push(s);
            table.forms.push(f);
        }
        table
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn target(&self, target: Target) -> &[f64] {
        match target {
            Target::Structures => &self.structures,
            Target::Forms => &self.forms,
        }
    }

    /// `w * EIG(forms) + (1 - w) * EIG(structures)` per candidate.
    pub fn combined(&self, w: f64) -> Vec<f64> {
        self.forms
            .iter()
            .zip(&self.structures)
            .map(|(f, s)| combine(*f, *s, w))
            .collect()
    }

    /// Softmax choice distribution over the candidates.
    pub fn policy(&self, params: PolicyParams) -> Vec<f64> {
        softmax(&self.combined(params.w), params.t)
            .expect("information gains are finite and t is validated")
    }
}

#[inline]
fn combine(forms: f64, structures: f64, w: f64) -> f64 {
    w * forms + (1.0 - w) * structures
}

fn check_candidate(belief: &JointBelief, q: BlockSet) -> Result<()> {
    if !q.fits(belief.n_blocks()) {
        return Err(Error::invalid(format!(
            "intervention {q:?} outside a {}-block task",
            belief.n_blocks()
        )));
    }
    Ok(())
}

/// Probability that the machine activates when `q` is placed on it.
pub fn outcome_predictive(belief: &JointBelief, q: BlockSet) -> Result<f64> {
    check_candidate(belief, q)?;
    let n_forms = belief.n_forms();
    let act = belief.activation_table();
    let mut p = 0.0;
    for (s, row) in belief.rows().enumerate() {
        let k = q.intersection_len(BlockSet::from_bits(s as u32));
        let a = &act[k * n_forms..(k + 1) * n_forms];
        p += row.iter().zip(a).map(|(p, l)| p * l).sum::<f64>();
    }
    Ok(p)
}

/// Expected information gain of `q` about `target`, in bits.
pub fn eig(belief: &JointBelief, q: BlockSet, target: Target) -> Result<f64> {
    check_candidate(belief, q)?;
    let (_, s, f) = GainContext::new(belief).gains(q, &mut Vec::new());
    Ok(match target {
        Target::Structures => s,
        Target::Forms => f,
    })
}

pub fn combined_eig(belief: &JointBelief, q: BlockSet, w: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::invalid(format!("weight w={w} outside [0, 1]")));
    }
    check_candidate(belief, q)?;
    let (_, s, f) = GainContext::new(belief).gains(q, &mut Vec::new());
    Ok(combine(f, s, w))
}

/// Information gain about the joint (structure, form) variable. Kept as a
/// diagnostic against the weighted decomposition.
pub fn joint_eig(belief: &JointBelief, q: BlockSet) -> Result<f64> {
    check_candidate(belief, q)?;
    let n_forms = belief.n_forms();
    let act = belief.activation_table();
    let (mut p_on, mut joint) = (0.0, 0.0);
    for (s, row) in belief.rows().enumerate() {
        let k = q.intersection_len(BlockSet::from_bits(s as u32));
        let a = &act[k * n_forms..(k + 1) * n_forms];
        for (p, l) in row.iter().zip(a) {
            p_on += p * l;
            joint += xlog2x(p * l) + xlog2x(p * (1.0 - l));
        }
    }
    let outcome_entropy = -(xlog2x(p_on) + xlog2x(1.0 - p_on));
    Ok(entropy(belief.probs()) + outcome_entropy + joint)
}

/// `exp(score_i / t) / Σ_j exp(score_j / t)`, shifted by the maximum score.
pub fn softmax(scores: &[f64], t: f64) -> Result<Vec<f64>> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::invalid(format!("temperature t={t} must be positive")));
    }
    if scores.is_empty() || scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("softmax needs a nonempty list of finite scores"));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores.iter().map(|s| ((s - max) / t).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    Ok(out)
}

/// Uniform distribution over the `2^n` candidates.
pub fn random_policy(n_blocks: usize) -> Vec<f64> {
    let n = 1usize << n_blocks;
    vec![1.0 / n as f64; n]
}

/// Draws a candidate index from a choice distribution.
pub fn sample_index<R: Rng + ?Sized>(dist: &[f64], rng: &mut R) -> Result<usize> {
    let index = WeightedIndex::new(dist)
        .map_err(|e| Error::invalid(format!("cannot sample from policy: {e}")))?;
    Ok(index.sample(rng))
}

pub fn sample_intervention<R: Rng + ?Sized>(dist: &[f64], rng: &mut R) -> Result<BlockSet> {
    Ok(BlockSet::from_bits(sample_index(dist, rng)? as u32))
}
