//! Exact joint belief over causal structures and functional forms.
//!
//! The table is stored structure-major: row `s` holds the probabilities of
//! every form given that the blickets are exactly the blocks in bitmask `s`.
//! Structures are enumerated in bitmask order.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::blocks::BlockSet;
use crate::error::{Error, Result};
use crate::forms::{FormPrior, SigmoidForm};

/// Enumeration bound on task size.
pub const MAX_ENUMERATION_BLOCKS: usize = 12;
/// Default clamp applied to every likelihood: values live in `[floor, 1 - floor]`.
pub const LIKELIHOOD_FLOOR: f64 = 1e-9;
const MIN_NORMALIZER: f64 = 1e-300;

/// One trial: the blocks placed on the machine and whether it activated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Event {
    pub intervention: BlockSet,
    pub activated: bool,
}

impl Event {
    pub fn new(intervention: BlockSet, activated: bool) -> Self {
        Event {
            intervention,
            activated,
        }
    }
}

#[inline]
fn clamp_probability(p: f64, floor: f64) -> f64 {
    p.clamp(floor, 1.0 - floor)
}

/// Probability of `event` if the blickets are `structure` and the machine follows `form`.
pub fn likelihood(event: &Event, structure: BlockSet, form: &SigmoidForm) -> f64 {
    likelihood_with_floor(event, structure, form, LIKELIHOOD_FLOOR)
}

pub fn likelihood_with_floor(
    event: &Event,
    structure: BlockSet,
    form: &SigmoidForm,
    floor: f64,
) -> f64 {
    let k = event.intervention.intersection_len(structure);
    let p = clamp_probability(form.activation_probability(k), floor);
    if event.activated {
        p
    } else {
        1.0 - p
    }
}

/// Clamped activation probabilities laid out `[k * n_forms + f]` for `k` in `0..=n_blocks`.
pub(crate) fn activation_table(forms: &[SigmoidForm], n_blocks: usize, floor: f64) -> Vec<f64> {
    let mut table = Vec::with_capacity((n_blocks + 1) * forms.len());
    for k in 0..=n_blocks {
        table.extend(
            forms
                .iter()
                .map(|f| clamp_probability(f.activation_probability(k), floor)),
        );
    }
    table
}

/// Normalized probability table over (structure, form) pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct JointBelief {
    n_blocks: usize,
    forms: Arc<[SigmoidForm]>,
    probs: Vec<f64>,
    floor: f64,
}

impl JointBelief {
    /// Uniform over the `2^n` structures times `form_prior`.
    pub fn uniform_structures(
        n_blocks: usize,
        forms: Arc<[SigmoidForm]>,
        form_prior: &FormPrior,
    ) -> Result<Self> {
        if n_blocks == 0 || n_blocks > MAX_ENUMERATION_BLOCKS {
            return Err(Error::TooManyBlocks {
                n_blocks,
                max: MAX_ENUMERATION_BLOCKS,
            });
        }
        if form_prior.len() != forms.len() {
            return Err(Error::invalid(format!(
                "form prior has {} weights for {} forms",
                form_prior.len(),
                forms.len()
            )));
        }
        let n_structures = 1usize << n_blocks;
        let scale = 1.0 / n_structures as f64;
        let row: Vec<f64> = form_prior.weights().iter().map(|w| w * scale).collect();
        let mut probs = Vec::with_capacity(n_structures * row.len());
        for _ in 0..n_structures {
            probs.extend_from_slice(&row);
        }
        Ok(JointBelief {
            n_blocks,
            forms,
            probs,
            floor: LIKELIHOOD_FLOOR,
        })
    }

    /// Overrides the likelihood clamp used by later updates.
    pub fn with_likelihood_floor(mut self, floor: f64) -> Result<Self> {
        if !(0.0..0.5).contains(&floor) {
            return Err(Error::invalid(format!("likelihood floor {floor} outside [0, 0.5)")));
        }
        self.floor = floor;
        Ok(self)
    }

    pub fn n_blocks(&self) -> usize {
        self.n_blocks
    }

    pub fn n_structures(&self) -> usize {
        1 << self.n_blocks
    }

    pub fn forms(&self) -> &Arc<[SigmoidForm]> {
        &self.forms
    }

    pub fn n_forms(&self) -> usize {
        self.forms.len()
    }

    pub fn likelihood_floor(&self) -> f64 {
        self.floor
    }

    /// Row-major table, `probs[s * n_forms + f]`.
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, structure: BlockSet, form: usize) -> f64 {
        self.probs[structure.bits() as usize * self.n_forms() + form]
    }

    pub(crate) fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.probs.chunks_exact(self.n_forms())
    }

    pub(crate) fn activation_table(&self) -> Vec<f64> {
        activation_table(&self.forms, self.n_blocks, self.floor)
    }

    fn check_event(&self, event: &Event) -> Result<()> {
        if !event.intervention.fits(self.n_blocks) {
            return Err(Error::invalid(format!(
                "intervention {:?} outside a {}-block task",
                event.intervention, self.n_blocks
            )));
        }
        Ok(())
    }

    /// Conditions on one event and renormalizes. `self` is left untouched.
    pub fn update(&self, event: &Event) -> Result<JointBelief> {
        self.check_event(event)?;
        let n_forms = self.n_forms();
        let act = self.activation_table();
        let mut probs = self.probs.clone();
        for (s, row) in probs.chunks_exact_mut(n_forms).enumerate() {
            let k = event.intervention.intersection_len(BlockSet::from_bits(s as u32));
            let a = &act[k * n_forms..(k + 1) * n_forms];
            if event.activated {
                row.iter_mut().zip(a).for_each(|(p, l)| *p *= l);
            } else {
                row.iter_mut().zip(a).for_each(|(p, l)| *p *= 1.0 - l);
            }
        }
        let total: f64 = probs.iter().sum();
        if !(total >= MIN_NORMALIZER) {
            return Err(Error::DegenerateEvidence(total));
        }
        let inv = 1.0 / total;
        probs.iter_mut().for_each(|p| *p *= inv);
        Ok(JointBelief {
            probs,
            forms: Arc::clone(&self.forms),
            ..*self
        })
    }

    pub fn update_all<'a, I>(&self, events: I) -> Result<JointBelief>
    where
        I: IntoIterator<Item = &'a Event>,
    {
        let mut belief = self.clone();
        for event in events {
            belief = belief.update(event)?;
        }
        Ok(belief)
    }

    /// Recomputes the posterior from this prior in one pass, accumulating
    /// log-likelihoods and renormalizing once.
    pub fn posterior_batch(&self, events: &[Event]) -> Result<JointBelief> {
        for e in events {
            self.check_event(e)?;
        }
        let n_forms = self.n_forms();
        let act = self.activation_table();
        let mut log_probs: Vec<f64> = self.probs.iter().map(|p| p.ln()).collect();
        for (s, row) in log_probs.chunks_exact_mut(n_forms).enumerate() {
            let structure = BlockSet::from_bits(s as u32);
            for event in events {
                let k = event.intervention.intersection_len(structure);
                let a = &act[k * n_forms..(k + 1) * n_forms];
                for (lp, l) in row.iter_mut().zip(a) {
                    *lp += if event.activated { l.ln() } else { (1.0 - l).ln() };
                }
            }
        }
        let max = log_probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::DegenerateEvidence(0.0));
        }
        let mut probs: Vec<f64> = log_probs.iter().map(|lp| (lp - max).exp()).collect();
        let total: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= total);
        Ok(JointBelief {
            probs,
            forms: Arc::clone(&self.forms),
            ..*self
        })
    }

    pub fn form_marginal(&self) -> FormPrior {
        let mut marginal = vec![0.0; self.n_forms()];
        for row in self.rows() {
            marginal.iter_mut().zip(row).for_each(|(m, p)| *m += p);
        }
        FormPrior::from_unnormalized(marginal).expect("belief table is normalized")
    }

    /// Probability of each structure, in bitmask order.
    pub fn structure_marginal(&self) -> Vec<f64> {
        self.rows().map(|row| row.iter().sum()).collect()
    }

    pub fn blicket_probability(&self, block: usize) -> Result<f64> {
        if block >= self.n_blocks {
            return Err(Error::invalid(format!(
                "block {block} outside a {}-block task",
                self.n_blocks
            )));
        }
        Ok(self
            .structure_marginal()
            .iter()
            .enumerate()
            .filter(|(s, _)| s & (1 << block) != 0)
            .map(|(_, p)| p)
            .sum())
    }

    pub fn blicket_probabilities(&self) -> Vec<f64> {
        let marginal = self.structure_marginal();
        (0..self.n_blocks)
            .map(|b| {
                marginal
                    .iter()
                    .enumerate()
                    .filter(|(s, _)| s & (1 << b) != 0)
                    .map(|(_, p)| p)
                    .sum()
            })
            .collect()
    }

    pub fn snapshot(&self) -> BeliefSnapshot {
        BeliefSnapshot {
            structures: (0..self.n_structures() as u32).collect(),
            forms: self.forms.iter().map(|f| [f.bias, f.gain]).collect(),
            probs: self.probs.clone(),
        }
    }

    pub fn from_snapshot(snapshot: &BeliefSnapshot) -> Result<Self> {
        let n_structures = snapshot.structures.len();
        if !n_structures.is_power_of_two() || n_structures < 2 {
            return Err(Error::invalid("structure count must be a power of two"));
        }
        let n_blocks = n_structures.trailing_zeros() as usize;
        if n_blocks > MAX_ENUMERATION_BLOCKS {
            return Err(Error::TooManyBlocks {
                n_blocks,
                max: MAX_ENUMERATION_BLOCKS,
            });
        }
        if snapshot
            .structures
            .iter()
            .enumerate()
            .any(|(i, s)| *s as usize != i)
        {
            return Err(Error::invalid("structures must be listed in bitmask order"));
        }
        let forms: Vec<SigmoidForm> = snapshot
            .forms
            .iter()
            .map(|[b, g]| SigmoidForm::new(*b, *g))
            .collect::<Result<_>>()?;
        if snapshot.probs.len() != n_structures * forms.len() {
            return Err(Error::invalid("probability table has the wrong size"));
        }
        let total: f64 = snapshot.probs.iter().sum();
        if snapshot.probs.iter().any(|p| *p < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("probability table is not normalized"));
        }
        Ok(JointBelief {
            n_blocks,
            forms: forms.into(),
            probs: snapshot.probs.clone(),
            floor: LIKELIHOOD_FLOOR,
        })
    }
}

/// Serialized belief: structures as bitmasks, forms as `[bias, gain]`, and
/// the row-major probability table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefSnapshot {
    pub structures: Vec<u32>,
    pub forms: Vec<[f64; 2]>,
    pub probs: Vec<f64>,
}

/// Shannon entropy in bits, with `0 log 0 = 0`.
pub fn entropy(dist: &[f64]) -> f64 {
    -dist
        .iter()
        .filter(|p| **p > 0.0)
        .map(|p| p * p.log2())
        .sum::<f64>()
}
