//! Sigmoid functional forms, the canonical experiment forms, and discretized
//! gamma priors over the bias/gain grid.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, Gamma};

use crate::error::{Error, Result};

/// Gain used for the deterministic ("gain much greater than one") forms.
pub const DETERMINISTIC_GAIN: f64 = 100.0;
/// Gain of the noisy forms; gives activation probability .75 at threshold.
pub const NOISY_GAIN: f64 = 11.0;

pub const GRID_SIDE: usize = 20;
pub const BIAS_STEP: f64 = 0.15;
pub const GAIN_STEP: f64 = 2.0;

/// A member of the sigmoid family: maps a blicket count to an activation probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmoidForm {
    pub bias: f64,
    pub gain: f64,
}

impl SigmoidForm {
    pub fn new(bias: f64, gain: f64) -> Result<Self> {
        if !(bias.is_finite() && gain.is_finite()) || bias < 0.0 || gain < 0.0 {
            return Err(Error::invalid(format!(
                "sigmoid form needs finite bias, gain >= 0 (got {bias}, {gain})"
            )));
        }
        Ok(SigmoidForm { bias, gain })
    }

    /// `1 / (1 + exp(-gain * (n - bias)))`.
    pub fn activation_probability(&self, n_blickets: usize) -> f64 {
        let z = self.gain * (n_blickets as f64 - self.bias);
        if z >= 0.0 {
            1.0 / (1.0 + (-z).exp())
        } else {
            let e = z.exp();
            e / (1.0 + e)
        }
    }
}

/// The six named forms used as ground truth in the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CanonicalForm {
    Disjunctive,
    NoisyDisjunctive,
    Conjunctive,
    NoisyConjunctive,
    ThreeConjunctive,
    NoisyThreeConjunctive,
}

impl CanonicalForm {
    pub const ALL: [CanonicalForm; 6] = [
        CanonicalForm::Disjunctive,
        CanonicalForm::NoisyDisjunctive,
        CanonicalForm::Conjunctive,
        CanonicalForm::NoisyConjunctive,
        CanonicalForm::ThreeConjunctive,
        CanonicalForm::NoisyThreeConjunctive,
    ];

    /// Minimum number of blickets that can activate the machine.
    pub fn threshold(self) -> usize {
        use CanonicalForm::*;
        match self {
            Disjunctive | NoisyDisjunctive => 1,
            Conjunctive | NoisyConjunctive => 2,
            ThreeConjunctive | NoisyThreeConjunctive => 3,
        }
    }

    pub fn is_noisy(self) -> bool {
        use CanonicalForm::*;
        matches!(
            self,
            NoisyDisjunctive | NoisyConjunctive | NoisyThreeConjunctive
        )
    }

    pub fn params(self) -> SigmoidForm {
        use CanonicalForm::*;
        let bias = match self {
            Disjunctive => 0.5,
            NoisyDisjunctive => 0.9,
            Conjunctive => 1.5,
            NoisyConjunctive => 1.9,
            ThreeConjunctive => 2.5,
            NoisyThreeConjunctive => 2.9,
        };
        let gain = if self.is_noisy() {
            NOISY_GAIN
        } else {
            DETERMINISTIC_GAIN
        };
        SigmoidForm { bias, gain }
    }

    pub fn name(self) -> &'static str {
        use CanonicalForm::*;
        match self {
            Disjunctive => "disjunctive",
            NoisyDisjunctive => "noisy-disjunctive",
            Conjunctive => "conjunctive",
            NoisyConjunctive => "noisy-conjunctive",
            ThreeConjunctive => "3-conjunctive",
            NoisyThreeConjunctive => "noisy-3-conjunctive",
        }
    }
}

impl fmt::Display for CanonicalForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CanonicalForm {
    type Err = Error;

    /// Accepts kebab, snake or camel case, with "3" or "three".
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| !matches!(c, '-' | '_' | ' '))
            .flat_map(char::to_lowercase)
            .collect::<String>()
            .replace('3', "three");
        use CanonicalForm::*;
        Ok(match key.as_str() {
            "disjunctive" | "disj" => Disjunctive,
            "noisydisjunctive" | "noisydisj" => NoisyDisjunctive,
            "conjunctive" | "conj" => Conjunctive,
            "noisyconjunctive" | "noisyconj" => NoisyConjunctive,
            "threeconjunctive" | "threeconj" => ThreeConjunctive,
            "noisythreeconjunctive" | "noisythreeconj" => NoisyThreeConjunctive,
            _ => {
                return Err(Error::Unknown {
                    what: "form",
                    name: s.to_string(),
                })
            }
        })
    }
}

impl Serialize for CanonicalForm {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for CanonicalForm {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Discretized hypothesis space of forms: the cartesian product of a bias
/// axis and a gain axis, stored bias-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormGrid {
    pub biases: Vec<f64>,
    pub gains: Vec<f64>,
}

impl FormGrid {
    /// Biases `0.15 i` and gains `2 j` for `i, j` in `0..20`.
    pub fn standard() -> Self {
        FormGrid {
            biases: (0..GRID_SIDE).map(|i| BIAS_STEP * i as f64).collect(),
            gains: (0..GRID_SIDE).map(|j| GAIN_STEP * j as f64).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.biases.len() * self.gains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell(&self, index: usize) -> SigmoidForm {
        let g = self.gains.len();
        SigmoidForm {
            bias: self.biases[index / g],
            gain: self.gains[index % g],
        }
    }

    pub fn cells(&self) -> Vec<SigmoidForm> {
        self.biases
            .iter()
            .flat_map(|&bias| self.gains.iter().map(move |&gain| SigmoidForm { bias, gain }))
            .collect()
    }
}

/// Gamma distribution by shape and scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaParams {
    pub shape: f64,
    pub scale: f64,
}

impl GammaParams {
    pub const fn new(shape: f64, scale: f64) -> Self {
        GammaParams { shape, scale }
    }

    pub fn mode(&self) -> f64 {
        ((self.shape - 1.0) * self.scale).max(0.0)
    }

    fn distribution(&self) -> Result<Gamma> {
        Gamma::new(self.shape, 1.0 / self.scale)
            .map_err(|e| Error::invalid(format!("gamma({}, {}): {e}", self.shape, self.scale)))
    }

    pub fn ln_pdf(&self, x: f64) -> Result<f64> {
        Ok(self.distribution()?.ln_pdf(x))
    }
}

/// A pair of gamma priors, one over bias and one over gain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub bias: GammaParams,
    pub gain: GammaParams,
}

const BIAS_PRIORS: [GammaParams; 6] = [
    GammaParams::new(4.0, 0.1),
    GammaParams::new(2.2, 0.25),
    GammaParams::new(6.0, 0.1),
    GammaParams::new(3.0, 0.25),
    GammaParams::new(9.0, 0.1),
    GammaParams::new(4.2, 0.25),
];

const GAIN_PRIORS: [GammaParams; 4] = [
    GammaParams::new(101.0, 0.1),
    GammaParams::new(11.0, 1.0),
    GammaParams::new(201.0, 0.1),
    GammaParams::new(21.0, 1.0),
];

pub const N_PRIORS: usize = BIAS_PRIORS.len() * GAIN_PRIORS.len();

/// The 24 bias/gain prior pairs, bias-major: each bias prior is crossed
/// with the four gain priors.
pub fn prior_grid() -> Vec<PriorSpec> {
    BIAS_PRIORS
        .iter()
        .flat_map(|&bias| GAIN_PRIORS.iter().map(move |&gain| PriorSpec { bias, gain }))
        .collect()
}

/// One-based row lookup into [`prior_grid`].
pub fn prior_row(index: usize) -> Result<PriorSpec> {
    if !(1..=N_PRIORS).contains(&index) {
        return Err(Error::invalid(format!(
            "prior index {index} outside 1..={N_PRIORS}"
        )));
    }
    Ok(prior_grid()[index - 1])
}

/// Probability weights over a list of forms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormPrior {
    weights: Vec<f64>,
}

impl FormPrior {
    /// Normalizes nonnegative weights; rejects an all-zero or non-finite input.
    pub fn from_unnormalized(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("form weights must be finite and >= 0"));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::invalid("form weights are all zero"));
        }
        Ok(FormPrior {
            weights: weights.into_iter().map(|w| w / total).collect(),
        })
    }

    pub fn point_mass() -> Self {
        FormPrior { weights: vec![1.0] }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Total mass on cells whose bias lies in `(lo, hi]`.
    pub fn mass_on_bias(&self, forms: &[SigmoidForm], lo: f64, hi: f64) -> f64 {
        forms
            .iter()
            .zip(&self.weights)
            .filter(|(f, _)| f.bias > lo && f.bias <= hi)
            .map(|(_, w)| w)
            .sum()
    }
}

/// Evaluates independent gamma densities at each grid cell and normalizes.
pub fn discretized_prior(
    bias_prior: GammaParams,
    gain_prior: GammaParams,
    grid: &FormGrid,
) -> Result<FormPrior> {
    let bias_ln: Vec<f64> = grid
        .biases
        .iter()
        .map(|&b| bias_prior.ln_pdf(b))
        .collect::<Result<_>>()?;
    let gain_ln: Vec<f64> = grid
        .gains
        .iter()
        .map(|&g| gain_prior.ln_pdf(g))
        .collect::<Result<_>>()?;
    let ln_weights: Vec<f64> = bias_ln
        .iter()
        .flat_map(|&lb| gain_ln.iter().map(move |&lg| lb + lg))
        .collect();
    let max = ln_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::invalid("prior density is zero on every grid cell"));
    }
    FormPrior::from_unnormalized(ln_weights.iter().map(|lw| (lw - max).exp()).collect())
}

impl PriorSpec {
    pub fn discretize(&self, grid: &FormGrid) -> Result<FormPrior> {
        discretized_prior(self.bias, self.gain, grid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn noisy_conjunctive_at_threshold() {
        let p = SigmoidForm::new(1.9, 11.0).unwrap().activation_probability(2);
        // 1 / (1 + e^-1.1)
        assert!(close(p, 0.750_260_105_595_117_8, 1e-12), "{p}");
        let p = SigmoidForm::new(0.9, 11.0).unwrap().activation_probability(1);
        assert!(close(p, 0.750_260_105_595_117_8, 1e-12), "{p}");
    }

    #[test]
    fn midpoint_is_one_half() {
        for gain in [0.0, 2.0, 11.0, 100.0] {
            let f = SigmoidForm::new(2.0, gain).unwrap();
            assert!(close(f.activation_probability(2), 0.5, 1e-15));
        }
    }

    #[test]
    fn rejects_negative_parameters() {
        assert!(SigmoidForm::new(-0.1, 1.0).is_err());
        assert!(SigmoidForm::new(0.1, f64::NAN).is_err());
    }

    #[test]
    fn canonical_values() {
        let c = CanonicalForm::Conjunctive.params();
        assert_eq!((c.bias, c.gain), (1.5, 100.0));
        assert!(c.activation_probability(2) >= 0.999);
        let n3 = CanonicalForm::NoisyThreeConjunctive.params();
        assert_eq!((n3.bias, n3.gain), (2.9, 11.0));
        // sigmoid(-50)
        assert!(CanonicalForm::Disjunctive.params().activation_probability(0) <= 1e-9);
    }

    #[test]
    fn canonical_table_fidelity() {
        for form in CanonicalForm::ALL {
            let f = form.params();
            let at = f.activation_probability(form.threshold());
            let below = f.activation_probability(form.threshold() - 1);
            if form.is_noisy() {
                assert!((at - 0.75).abs() < 5e-3, "{form}: {at}");
            } else {
                assert!(at > 0.999, "{form}: {at}");
            }
            assert!(below < 1e-3, "{form}: {below}");
        }
    }

    #[test]
    fn parses_names() {
        assert_eq!(
            "NoisyThreeConjunctive".parse::<CanonicalForm>().unwrap(),
            CanonicalForm::NoisyThreeConjunctive
        );
        assert_eq!(
            "noisy-3-conjunctive".parse::<CanonicalForm>().unwrap(),
            CanonicalForm::NoisyThreeConjunctive
        );
        assert_eq!("conj".parse::<CanonicalForm>().unwrap(), CanonicalForm::Conjunctive);
        for form in CanonicalForm::ALL {
            assert_eq!(form.name().parse::<CanonicalForm>().unwrap(), form);
        }
        assert!("quadrajunctive".parse::<CanonicalForm>().is_err());
    }

    #[test]
    fn grid_matches_definition() {
        let grid = FormGrid::standard();
        assert_eq!(grid.len(), 400);
        for (i, b) in grid.biases.iter().enumerate() {
            assert_eq!(*b, 0.15 * i as f64);
        }
        for (j, g) in grid.gains.iter().enumerate() {
            assert_eq!(*g, 2.0 * j as f64);
        }
        assert_eq!(grid.cell(0), SigmoidForm { bias: 0.0, gain: 0.0 });
        assert_eq!(grid.cell(21), SigmoidForm { bias: 0.15, gain: 2.0 });
        assert_eq!(grid.cells()[399], grid.cell(399));
    }

    #[test]
    fn prior_grid_rows() {
        let rows = prior_grid();
        assert_eq!(rows.len(), 24);
        assert_eq!(rows[0].bias, GammaParams::new(4.0, 0.1));
        assert_eq!(rows[0].gain, GammaParams::new(101.0, 0.1));
        assert_eq!(rows[23].bias, GammaParams::new(4.2, 0.25));
        assert_eq!(rows[23].gain, GammaParams::new(21.0, 1.0));
        let bias_modes = [0.3, 0.3, 0.5, 0.5, 0.8, 0.8];
        let gain_modes = [10.0, 10.0, 20.0, 20.0];
        for (r, row) in rows.iter().enumerate() {
            assert!(close(row.bias.mode(), bias_modes[r / 4], 1e-12), "row {}", r + 1);
            assert!(close(row.gain.mode(), gain_modes[r % 4], 1e-12), "row {}", r + 1);
        }
        assert!(prior_row(0).is_err());
        assert!(prior_row(25).is_err());
        assert_eq!(prior_row(24).unwrap(), rows[23]);
    }

    #[test]
    fn discretized_prior_peaks_at_modes() {
        let grid = FormGrid::standard();
        let prior =
            discretized_prior(GammaParams::new(4.0, 0.1), GammaParams::new(101.0, 0.1), &grid)
                .unwrap();
        let total: f64 = prior.weights().iter().sum();
        assert!(close(total, 1.0, 1e-9));
        let (argmax, _) = prior
            .weights()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        let peak = grid.cell(argmax);
        assert!(close(peak.bias, 0.3, 1e-12), "{peak:?}");
        assert!(close(peak.gain, 10.0, 1e-12), "{peak:?}");
        for i in 0..GRID_SIDE {
            assert_eq!(prior.weights()[i * GRID_SIDE], 0.0);
        }
    }

    #[test]
    fn every_row_normalizes() {
        let grid = FormGrid::standard();
        for row in prior_grid() {
            let p = row.discretize(&grid).unwrap();
            assert!(close(p.weights().iter().sum::<f64>(), 1.0, 1e-9));
            assert!(p.weights().iter().all(|w| *w >= 0.0));
        }
    }

    #[test]
    fn normalization_is_scale_invariant() {
        let raw = vec![0.2, 3.0, 0.0, 7.5];
        let a = FormPrior::from_unnormalized(raw.clone()).unwrap();
        let b = FormPrior::from_unnormalized(raw.iter().map(|w| w * 1234.5).collect()).unwrap();
        for (x, y) in a.weights().iter().zip(b.weights()) {
            assert!(close(*x, *y, 1e-15));
        }
        assert!(FormPrior::from_unnormalized(vec![0.0, 0.0]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn activation_is_monotone_and_bounded(i in 0usize..20, j in 0usize..20, n in 0usize..12) {
            let f = FormGrid::standard().cell(i * GRID_SIDE + j);
            let lo = f.activation_probability(n);
            let hi = f.activation_probability(n + 1);
            proptest::prop_assert!(hi >= lo);
            proptest::prop_assert!((0.0..=1.0).contains(&lo));
        }
    }
}
