//! Numerical checks of the identifiability conditions for conditionally
//! exponential source families.
//!
//! A family gives the per-component conditional log-density
//! `qᵢ(s, u) = Qᵢ(s) − log Zᵢ(u) + Σⱼ q̃ᵢⱼ(s) λᵢⱼ(u)`, either in this closed
//! form ([`ExpFamily`]) or as an opaque evaluator ([`BlackBoxFamily`]) whose
//! derivatives are taken by central differences.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{condition_number, numerical_rank, Matrix, SeededRng, DEFAULT_RANK_TOL};

/// Step of the first-derivative stencil in `s`.
pub const FIRST_DERIVATIVE_STEP: f64 = 1e-4;
/// Step of the second-derivative stencil in `s` and of every stencil in `u`.
pub const SECOND_DERIVATIVE_STEP: f64 = 1e-3;
/// Tolerances reported alongside the default in every rank verdict.
pub const SENSITIVITY_TOLS: [f64; 3] = [1e-4, 1e-6, 1e-8];

#[derive(Debug, Error)]
pub enum TheoryError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("sufficient statistics of component {component} are linearly dependent (rank {rank} < {k})")]
    DependentStatistics { component: usize, rank: usize, k: usize },
    #[error("non-finite derivative for component {component} at s = {s}")]
    Evaluation { component: usize, s: f64 },
    #[error("inapplicable: {0}")]
    Inapplicable(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, TheoryError> {
    Err(TheoryError::InvalidInput(msg.into()))
}

// ---------------------------------------------------------------------------
// Catalog
// ---------------------------------------------------------------------------

/// Scalar functions of `s` used as sufficient statistics or base measures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Statistic {
    /// `c · s^p`
    Poly {
        p: u32,
        #[serde(default = "one")]
        coef: f64,
    },
    /// `c · |s|`
    Abs {
        #[serde(default = "one")]
        coef: f64,
    },
    /// `c · tanh(s)`
    Tanh {
        #[serde(default = "one")]
        coef: f64,
    },
    /// `c · log cosh(s)`
    LogCosh {
        #[serde(default = "one")]
        coef: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl Statistic {
    pub fn value(&self, s: f64) -> f64 {
        match *self {
            Statistic::Poly { p, coef } => coef * s.powi(p as i32),
            Statistic::Abs { coef } => coef * s.abs(),
            Statistic::Tanh { coef } => coef * s.tanh(),
            Statistic::LogCosh { coef } => {
                let a = s.abs();
                coef * (a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2)
            }
        }
    }

    /// First and second derivatives in `s`; `|s|` uses `sign(0) = +1`.
    pub fn derivatives(&self, s: f64) -> (f64, f64) {
        match *self {
            Statistic::Poly { p, coef } => {
                let pf = p as f64;
                let d1 = if p >= 1 { coef * pf * s.powi(p as i32 - 1) } else { 0.0 };
                let d2 = if p >= 2 {
                    coef * pf * (pf - 1.0) * s.powi(p as i32 - 2)
                } else {
                    0.0
                };
                (d1, d2)
            }
            Statistic::Abs { coef } => (coef * if s < 0.0 { -1.0 } else { 1.0 }, 0.0),
            Statistic::Tanh { coef } => {
                let t = s.tanh();
                let sech2 = 1.0 - t * t;
                (coef * sech2, -2.0 * coef * t * sech2)
            }
            Statistic::LogCosh { coef } => {
                let t = s.tanh();
                (coef * t, coef * (1.0 - t * t))
            }
        }
    }
}

/// Functions of the auxiliary variable `u` used as modulators `λ(u)` or log-partitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Modulator {
    Constant {
        value: f64,
    },
    /// `offset + Σⱼ slopesⱼ uⱼ`
    Affine {
        #[serde(default)]
        offset: f64,
        slopes: Vec<f64>,
    },
    /// `offset + amplitude · sin(frequency · u_coord + phase)`
    Sinusoid {
        #[serde(default)]
        offset: f64,
        amplitude: f64,
        frequency: f64,
        #[serde(default)]
        phase: f64,
        #[serde(default)]
        coord: usize,
    },
    /// `offset + amplitude · exp(−‖u − center‖² / (2 width²))`
    Rbf {
        #[serde(default)]
        offset: f64,
        amplitude: f64,
        center: Vec<f64>,
        width: f64,
    },
    /// Table indexed by the segment label `u₀`.
    PerSegment {
        values: Vec<f64>,
    },
    /// Table of uniform draws on `[low, high)`, one per segment, resolved when
    /// the family is built.
    RandomSegments {
        low: f64,
        high: f64,
        seed: u64,
    },
}

impl Modulator {
    fn resolve(&self, aux: &AuxDomain, rng_label: u64) -> Result<Modulator, TheoryError> {
        match self {
            Modulator::RandomSegments { low, high, seed } => {
                let AuxDomain::Segments { count } = aux else {
                    return invalid("random_segments modulators need a segment domain");
                };
                if !(low < high) {
                    return invalid("random_segments requires low < high");
                }
                let mut rng = SeededRng::new(*seed).split(rng_label);
                Ok(Modulator::PerSegment {
                    values: (0..*count).map(|_| rng.uniform_range(*low, *high)).collect(),
                })
            }
            Modulator::PerSegment { values } => match aux {
                AuxDomain::Segments { count } if values.len() == *count => Ok(self.clone()),
                AuxDomain::Segments { count } => invalid(format!(
                    "per_segment table has {} values for {count} segments",
                    values.len()
                )),
                AuxDomain::Box { .. } => invalid("per_segment modulators need a segment domain"),
            },
            Modulator::Affine { slopes, .. } if slopes.len() != aux.dim() => {
                invalid("affine slopes must match the aux dimension")
            }
            Modulator::Sinusoid { coord, .. } if *coord >= aux.dim() => invalid("sinusoid coord out of range"),
            Modulator::Rbf { center, width, .. } if center.len() != aux.dim() || !(*width > 0.0) => {
                invalid("rbf center must match the aux dimension and width must be positive")
            }
            _ => Ok(self.clone()),
        }
    }

    pub fn value(&self, u: &[f64]) -> f64 {
        match self {
            Modulator::Constant { value } => *value,
            Modulator::Affine { offset, slopes } => offset + slopes.iter().zip(u).map(|(a, b)| a * b).sum::<f64>(),
            Modulator::Sinusoid {
                offset,
                amplitude,
                frequency,
                phase,
                coord,
            } => offset + amplitude * (frequency * u[*coord] + phase).sin(),
            Modulator::Rbf {
                offset,
                amplitude,
                center,
                width,
            } => offset + amplitude * rbf_kernel(u, center, *width),
            Modulator::PerSegment { values } => values[u[0] as usize],
            Modulator::RandomSegments { .. } => unreachable!("resolved at family construction"),
        }
    }

    /// `∂λ/∂u_j`, or `None` for piecewise-constant tables.
    pub fn du(&self, u: &[f64], j: usize) -> Option<f64> {
        match self {
            Modulator::Constant { .. } => Some(0.0),
            Modulator::Affine { slopes, .. } => Some(slopes[j]),
            Modulator::Sinusoid {
                amplitude,
                frequency,
                phase,
                coord,
                ..
            } => Some(if j == *coord {
                amplitude * frequency * (frequency * u[*coord] + phase).cos()
            } else {
                0.0
            }),
            Modulator::Rbf {
                amplitude,
                center,
                width,
                ..
            } => Some(-amplitude * (u[j] - center[j]) / (width * width) * rbf_kernel(u, center, *width)),
            Modulator::PerSegment { .. } | Modulator::RandomSegments { .. } => None,
        }
    }
}

fn rbf_kernel(u: &[f64], center: &[f64], width: f64) -> f64 {
    let d2: f64 = u.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum();
    (-d2 / (2.0 * width * width)).exp()
}

/// Where `u` lives and how the checks sample it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AuxDomain {
    /// Segment labels `0..count`, encoded as a one-element `u`.
    Segments { count: usize },
    /// Uniform on the axis-aligned box `[low, high]`.
    Box { low: Vec<f64>, high: Vec<f64> },
}

impl AuxDomain {
    pub fn dim(&self) -> usize {
        match self {
            AuxDomain::Segments { .. } => 1,
            AuxDomain::Box { low, .. } => low.len(),
        }
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, AuxDomain::Segments { .. })
    }

    fn validate(&self) -> Result<(), TheoryError> {
        match self {
            AuxDomain::Segments { count } if *count == 0 => invalid("segment count must be positive"),
            AuxDomain::Box { low, high } => {
                if low.is_empty() || low.len() != high.len() || low.iter().zip(high).any(|(l, h)| !(l < h)) {
                    invalid("box bounds must be nonempty with low < high")
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    /// `count` values of `u`; segment labels are distinct whenever possible.
    pub fn sample(&self, count: usize, rng: &mut SeededRng) -> Vec<Vec<f64>> {
        match self {
            AuxDomain::Segments { count: k } => {
                let labels = if count <= *k {
                    rng.sample_distinct(*k, count)
                } else {
                    (0..count).map(|_| rng.index(*k)).collect()
                };
                labels.into_iter().map(|l| vec![l as f64]).collect()
            }
            AuxDomain::Box { low, high } => (0..count)
                .map(|_| low.iter().zip(high).map(|(l, h)| rng.uniform_range(*l, *h)).collect())
                .collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Families
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    pub statistics: Vec<Statistic>,
    pub modulators: Vec<Modulator>,
    #[serde(default)]
    pub base: Option<Statistic>,
    #[serde(default)]
    pub log_partition: Option<Modulator>,
}

/// Declarative description of a conditionally exponential family. A single
/// component entry is replicated for all `n` components, with random
/// modulator tables drawn independently per component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpFamilySpec {
    pub n: usize,
    pub k: usize,
    pub aux: AuxDomain,
    pub components: Vec<ComponentSpec>,
}

/// A validated conditionally exponential family of order `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpFamily {
    pub n: usize,
    pub k: usize,
    pub aux: AuxDomain,
    pub components: Vec<ComponentSpec>,
}

impl ExpFamily {
    /// Validates shapes, resolves random tables and checks that each
    /// component's statistics are linearly independent on 10 000 sampled `s`.
    pub fn new(spec: &ExpFamilySpec) -> Result<Self, TheoryError> {
        if spec.n == 0 || spec.k == 0 {
            return invalid("n and k must be positive");
        }
        spec.aux.validate()?;
        let templates: Vec<&ComponentSpec> = match spec.components.len() {
            1 => vec![&spec.components[0]; spec.n],
            len if len == spec.n => spec.components.iter().collect(),
            len => return invalid(format!("{len} components given for n = {}", spec.n)),
        };
        let mut components = Vec::with_capacity(spec.n);
        for (i, c) in templates.into_iter().enumerate() {
            if c.statistics.len() != spec.k || c.modulators.len() != spec.k {
                return invalid(format!(
                    "component {i} needs exactly k = {} statistics and modulators",
                    spec.k
                ));
            }
            let modulators = c
                .modulators
                .iter()
                .enumerate()
                .map(|(j, m)| m.resolve(&spec.aux, (i * spec.k + j) as u64))
                .collect::<Result<Vec<_>, _>>()?;
            let log_partition = c
                .log_partition
                .as_ref()
                .map(|m| m.resolve(&spec.aux, (spec.n * spec.k + i) as u64))
                .transpose()?;
            let comp = ComponentSpec {
                statistics: c.statistics.clone(),
                modulators,
                base: c.base.clone(),
                log_partition,
            };
            check_independence(i, &comp.statistics)?;
            components.push(comp);
        }
        Ok(Self {
            n: spec.n,
            k: spec.k,
            aux: spec.aux.clone(),
            components,
        })
    }

    pub fn log_density(&self, i: usize, s: f64, u: &[f64]) -> f64 {
        let c = &self.components[i];
        let mut q: f64 = c
            .statistics
            .iter()
            .zip(&c.modulators)
            .map(|(t, l)| t.value(s) * l.value(u))
            .sum();
        if let Some(b) = &c.base {
            q += b.value(s);
        }
        if let Some(z) = &c.log_partition {
            q -= z.value(u);
        }
        q
    }

    /// `λᵢⱼ(u)`
    pub fn lambda(&self, i: usize, j: usize, u: &[f64]) -> f64 {
        self.components[i].modulators[j].value(u)
    }
}

fn check_independence(component: usize, stats: &[Statistic]) -> Result<(), TheoryError> {
    const SAMPLES: usize = 10_000;
    let mut rng = SeededRng::new(0x5eed).split(component as u64);
    let k = stats.len();
    let mut values = Matrix::zeros((SAMPLES, k));
    for r in 0..SAMPLES {
        let s = rng.uniform_range(-3.0, 3.0);
        for (j, t) in stats.iter().enumerate() {
            values[[r, j]] = t.value(s);
        }
    }
    let rank = numerical_rank(values.view(), DEFAULT_RANK_TOL).map_err(|e| TheoryError::InvalidInput(e.to_string()))?;
    if rank < k {
        return Err(TheoryError::DependentStatistics { component, rank, k });
    }
    Ok(())
}

/// Opaque log-density `q(i, s, u)` differentiated numerically.
#[derive(Clone)]
pub struct BlackBoxFamily {
    pub n: usize,
    pub aux: AuxDomain,
    pub q: Arc<dyn Fn(usize, f64, &[f64]) -> f64 + Send + Sync>,
}

impl fmt::Debug for BlackBoxFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BlackBoxFamily")
            .field("n", &self.n)
            .field("aux", &self.aux)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone)]
pub enum ConditionalFamily {
    Exponential(ExpFamily),
    BlackBox(BlackBoxFamily),
}

impl ConditionalFamily {
    pub fn from_spec(spec: &ExpFamilySpec) -> Result<Self, TheoryError> {
        Ok(ConditionalFamily::Exponential(ExpFamily::new(spec)?))
    }

    /// The same family seen only through its log-density.
    pub fn as_black_box(&self) -> ConditionalFamily {
        match self {
            ConditionalFamily::Exponential(f) => {
                let fam = f.clone();
                ConditionalFamily::BlackBox(BlackBoxFamily {
                    n: f.n,
                    aux: f.aux.clone(),
                    q: Arc::new(move |i, s, u| fam.log_density(i, s, u)),
                })
            }
            ConditionalFamily::BlackBox(_) => self.clone(),
        }
    }

    pub fn n(&self) -> usize {
        match self {
            ConditionalFamily::Exponential(f) => f.n,
            ConditionalFamily::BlackBox(f) => f.n,
        }
    }

    pub fn aux(&self) -> &AuxDomain {
        match self {
            ConditionalFamily::Exponential(f) => &f.aux,
            ConditionalFamily::BlackBox(f) => &f.aux,
        }
    }

    /// `(∂q/∂s, ∂²q/∂s²)` of component `i`.
    fn s_derivatives(&self, i: usize, s: f64, u: &[f64]) -> (f64, f64) {
        match self {
            ConditionalFamily::Exponential(f) => {
                let c = &f.components[i];
                let (mut d1, mut d2) = c
                    .statistics
                    .iter()
                    .zip(&c.modulators)
                    .fold((0.0, 0.0), |(a, b), (t, l)| {
                        let (t1, t2) = t.derivatives(s);
                        let lv = l.value(u);
                        (a + t1 * lv, b + t2 * lv)
                    });
                if let Some(base) = &c.base {
                    let (b1, b2) = base.derivatives(s);
                    d1 += b1;
                    d2 += b2;
                }
                (d1, d2)
            }
            ConditionalFamily::BlackBox(f) => {
                let q = |s: f64| (f.q)(i, s, u);
                let h1 = FIRST_DERIVATIVE_STEP;
                let h2 = SECOND_DERIVATIVE_STEP;
                let d1 = (q(s + h1) - q(s - h1)) / (2.0 * h1);
                let d2 = (q(s + h2) - 2.0 * q(s) + q(s - h2)) / (h2 * h2);
                (d1, d2)
            }
        }
    }

    /// `(∂²q/∂s∂u_j, ∂³q/∂s²∂u_j)` of component `i`.
    fn mixed_derivatives(&self, i: usize, s: f64, u: &[f64], j: usize) -> Result<(f64, f64), TheoryError> {
        match self {
            ConditionalFamily::Exponential(f) => {
                let c = &f.components[i];
                let mut out = (0.0, 0.0);
                for (t, l) in c.statistics.iter().zip(&c.modulators) {
                    let dl = l
                        .du(u, j)
                        .ok_or_else(|| TheoryError::Inapplicable("piecewise-constant modulator".into()))?;
                    let (t1, t2) = t.derivatives(s);
                    out.0 += t1 * dl;
                    out.1 += t2 * dl;
                }
                Ok(out)
            }
            ConditionalFamily::BlackBox(_) => {
                let h = SECOND_DERIVATIVE_STEP;
                let mut up = u.to_vec();
                let mut down = u.to_vec();
                up[j] += h;
                down[j] -= h;
                let (a1, a2) = self.s_derivatives(i, s, &up);
                let (b1, b2) = self.s_derivatives(i, s, &down);
                Ok(((a1 - b1) / (2.0 * h), (a2 - b2) / (2.0 * h)))
            }
        }
    }
}

fn check_point(fam: &ConditionalFamily, y: &[f64], u: &[f64]) -> Result<(), TheoryError> {
    if y.len() != fam.n() {
        return invalid(format!("y has {} entries for n = {}", y.len(), fam.n()));
    }
    if u.len() != fam.aux().dim() {
        return invalid(format!("u has {} entries, aux dimension is {}", u.len(), fam.aux().dim()));
    }
    Ok(())
}

/// First derivatives `∂qᵢ/∂sᵢ` at `yᵢ` followed by second derivatives.
pub fn w_vector(fam: &ConditionalFamily, y: &[f64], u: &[f64]) -> Result<Vec<f64>, TheoryError> {
    check_point(fam, y, u)?;
    let n = fam.n();
    let mut w = vec![0.0; 2 * n];
    for i in 0..n {
        let (d1, d2) = fam.s_derivatives(i, y[i], u);
        if !d1.is_finite() || !d2.is_finite() {
            return Err(TheoryError::Evaluation { component: i, s: y[i] });
        }
        w[i] = d1;
        w[n + i] = d2;
    }
    Ok(w)
}

/// Mixed derivatives with respect to `s` and the aux coordinate `j`, laid out as [`w_vector`].
pub fn w_tilde(fam: &ConditionalFamily, y: &[f64], u: &[f64], j: usize) -> Result<Vec<f64>, TheoryError> {
    check_point(fam, y, u)?;
    if fam.aux().is_discrete() {
        return Err(TheoryError::Inapplicable(
            "mixed u-derivatives need a continuous auxiliary variable".into(),
        ));
    }
    if j >= fam.aux().dim() {
        return invalid(format!("aux coordinate {j} out of range"));
    }
    let n = fam.n();
    let mut w = vec![0.0; 2 * n];
    for i in 0..n {
        let (d1, d2) = fam.mixed_derivatives(i, y[i], u, j)?;
        if !d1.is_finite() || !d2.is_finite() {
            return Err(TheoryError::Evaluation { component: i, s: y[i] });
        }
        w[i] = d1;
        w[n + i] = d2;
    }
    Ok(w)
}

// ---------------------------------------------------------------------------
// Rank verdicts
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToleranceCount {
    pub rel_tol: f64,
    pub successes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariabilityVerdict {
    /// Largest rank seen in any trial.
    pub rank_achieved: usize,
    pub rank_required: usize,
    pub n_trials: usize,
    pub successes: usize,
    pub rel_tol: f64,
    /// The `u` values of the first full-rank trial. Absence means none was
    /// found in `n_trials`, which is not a proof of non-existence.
    pub witness: Option<Vec<Vec<f64>>>,
    pub sensitivity: Vec<ToleranceCount>,
}

impl VariabilityVerdict {
    pub fn holds(&self) -> bool {
        self.successes > 0
    }
}

struct RankTally {
    required: usize,
    best: usize,
    successes: usize,
    per_tol: Vec<usize>,
    witness: Option<Vec<Vec<f64>>>,
    trials: usize,
}

impl RankTally {
    fn new(required: usize) -> Self {
        Self {
            required,
            best: 0,
            successes: 0,
            per_tol: vec![0; SENSITIVITY_TOLS.len()],
            witness: None,
            trials: 0,
        }
    }

    fn add(&mut self, m: &Matrix, us: Vec<Vec<f64>>) -> Result<(), TheoryError> {
        let rank = |tol| numerical_rank(m.view(), tol).map_err(|e| TheoryError::InvalidInput(e.to_string()));
        let r = rank(DEFAULT_RANK_TOL)?;
        self.trials += 1;
        self.best = self.best.max(r);
        if r == self.required {
            self.successes += 1;
            if self.witness.is_none() {
                self.witness = Some(us);
            }
        }
        for (count, &tol) in self.per_tol.iter_mut().zip(&SENSITIVITY_TOLS) {
            if rank(tol)? == self.required {
                *count += 1;
            }
        }
        Ok(())
    }

    fn verdict(self) -> VariabilityVerdict {
        VariabilityVerdict {
            rank_achieved: self.best,
            rank_required: self.required,
            n_trials: self.trials,
            successes: self.successes,
            rel_tol: DEFAULT_RANK_TOL,
            witness: self.witness,
            sensitivity: SENSITIVITY_TOLS
                .iter()
                .zip(self.per_tol)
                .map(|(&rel_tol, successes)| ToleranceCount { rel_tol, successes })
                .collect(),
        }
    }
}

/// Monte-Carlo search for `2n + 1` aux values whose `w` differences
/// `w(y, u_l) − w(y, u₀)` span `ℝ^{2n}`. Trial `t` draws from `rng.split(t)`.
pub fn check_variability(
    fam: &ConditionalFamily,
    y: &[f64],
    n_trials: usize,
    rng: &SeededRng,
) -> Result<VariabilityVerdict, TheoryError> {
    if n_trials == 0 {
        return invalid("n_trials must be at least 1");
    }
    let n2 = 2 * fam.n();
    let mut tally = RankTally::new(n2);
    for trial in 0..n_trials {
        let mut r = rng.split(trial as u64);
        let us = fam.aux().sample(n2 + 1, &mut r);
        let w0 = w_vector(fam, y, &us[0])?;
        let mut m = Matrix::zeros((n2, n2));
        for (l, u) in us[1..].iter().enumerate() {
            let w = w_vector(fam, y, u)?;
            for row in 0..n2 {
                m[[row, l]] = w[row] - w0[row];
            }
        }
        tally.add(&m, us)?;
    }
    Ok(tally.verdict())
}

/// As [`check_variability`] for the mixed-derivative vectors `w̃(y, u_l)`,
/// `l = 1..2n`, without a baseline.
pub fn check_alt_variability(
    fam: &ConditionalFamily,
    y: &[f64],
    j: usize,
    n_trials: usize,
    rng: &SeededRng,
) -> Result<VariabilityVerdict, TheoryError> {
    if n_trials == 0 {
        return invalid("n_trials must be at least 1");
    }
    if fam.aux().is_discrete() {
        return Err(TheoryError::Inapplicable(
            "the derivative-based condition needs a continuous auxiliary variable".into(),
        ));
    }
    let n2 = 2 * fam.n();
    let mut tally = RankTally::new(n2);
    for trial in 0..n_trials {
        let mut r = rng.split(trial as u64);
        let us = fam.aux().sample(n2, &mut r);
        let mut m = Matrix::zeros((n2, n2));
        for (l, u) in us.iter().enumerate() {
            let w = w_tilde(fam, y, u, j)?;
            for row in 0..n2 {
                m[[row, l]] = w[row];
            }
        }
        tally.add(&m, us)?;
    }
    Ok(tally.verdict())
}

/// `nk × nk` matrix with row `(i, j)` and column `l` equal to
/// `λᵢⱼ(u_l) − λᵢⱼ(u₀)`, for exactly `nk + 1` points.
pub fn lambda_bar(fam: &ExpFamily, u_points: &[Vec<f64>]) -> Result<Matrix, TheoryError> {
    let nk = fam.n * fam.k;
    if u_points.len() != nk + 1 {
        return invalid(format!("need exactly {} aux points, got {}", nk + 1, u_points.len()));
    }
    if let Some(bad) = u_points.iter().find(|u| u.len() != fam.aux.dim()) {
        return invalid(format!("aux point {bad:?} has the wrong dimension"));
    }
    if let AuxDomain::Segments { count } = fam.aux {
        if u_points.iter().any(|u| !(u[0] >= 0.0 && (u[0] as usize) < count && u[0].fract() == 0.0)) {
            return invalid("segment labels must be integers in range");
        }
    }
    let mut m = Matrix::zeros((nk, nk));
    for i in 0..fam.n {
        for j in 0..fam.k {
            let base = fam.lambda(i, j, &u_points[0]);
            for l in 1..=nk {
                m[[i * fam.k + j, l - 1]] = fam.lambda(i, j, &u_points[l]) - base;
            }
        }
    }
    Ok(m)
}

/// Condition number of [`lambda_bar`], `INFINITY` when singular.
pub fn lambda_bar_condition(fam: &ExpFamily, u_points: &[Vec<f64>]) -> Result<f64, TheoryError> {
    let m = lambda_bar(fam, u_points)?;
    condition_number(m.view()).map_err(|e| TheoryError::InvalidInput(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub k: usize,
    /// Per component: every pair of statistics was non-proportional at ≥ 99% of sampled `s`.
    pub per_component: Vec<bool>,
    /// Smallest non-proportional fraction over the pairs of each component.
    pub fractions: Vec<f64>,
    pub overall: bool,
    pub note: Option<String>,
}

/// Tests whether, for each component, the vectors `(∂q̃ᵢⱼ/∂s, ∂²q̃ᵢⱼ/∂s²)`
/// are pairwise non-proportional at 1000 sampled `s`.
pub fn check_expfam_consistency_form(fam: &ExpFamily) -> ConsistencyReport {
    const SAMPLES: usize = 1000;
    const DET_TOL: f64 = 1e-8;
    if fam.k == 1 {
        return ConsistencyReport {
            k: 1,
            per_component: vec![false; fam.n],
            fractions: vec![0.0; fam.n],
            overall: false,
            note: Some("order-1 family: the Assumption of Variability is impossible".into()),
        };
    }
    let mut per_component = Vec::with_capacity(fam.n);
    let mut fractions = Vec::with_capacity(fam.n);
    for (i, c) in fam.components.iter().enumerate() {
        let mut rng = SeededRng::new(0xc0de).split(i as u64);
        let samples: Vec<f64> = (0..SAMPLES).map(|_| rng.uniform_range(-3.0, 3.0)).collect();
        let mut worst: f64 = 1.0;
        for a in 0..fam.k {
            for b in a + 1..fam.k {
                let ok = samples
                    .iter()
                    .filter(|&&s| {
                        let (a1, a2) = c.statistics[a].derivatives(s);
                        let (b1, b2) = c.statistics[b].derivatives(s);
                        let na = a1.hypot(a2);
                        let nb = b1.hypot(b2);
                        na > 0.0 && nb > 0.0 && ((a1 * b2 - a2 * b1) / (na * nb)).abs() > DET_TOL
                    })
                    .count();
                worst = worst.min(ok as f64 / SAMPLES as f64);
            }
        }
        fractions.push(worst);
        per_component.push(worst >= 0.99);
    }
    let overall = per_component.iter().all(|&b| b);
    ConsistencyReport {
        k: fam.k,
        per_component,
        fractions,
        overall,
        note: None,
    }
}

// ---------------------------------------------------------------------------
// Ready-made families
// ---------------------------------------------------------------------------

/// `qᵢ = −λᵢ(u) s² / 2` with random segment precisions on `[low, high)`.
pub fn gaussian_variance_family(n: usize, segments: usize, low: f64, high: f64, seed: u64) -> ExpFamilySpec {
    ExpFamilySpec {
        n,
        k: 1,
        aux: AuxDomain::Segments { count: segments },
        components: vec![ComponentSpec {
            statistics: vec![Statistic::Poly { p: 2, coef: -0.5 }],
            modulators: vec![Modulator::RandomSegments { low, high, seed }],
            base: None,
            log_partition: None,
        }],
    }
}

/// Statistics `(s, s²)` with independent random segment modulators.
pub fn location_scale_family(n: usize, segments: usize, seed: u64) -> ExpFamilySpec {
    ExpFamilySpec {
        n,
        k: 2,
        aux: AuxDomain::Segments { count: segments },
        components: vec![ComponentSpec {
            statistics: vec![Statistic::Poly { p: 1, coef: 1.0 }, Statistic::Poly { p: 2, coef: -0.5 }],
            modulators: vec![
                Modulator::RandomSegments {
                    low: -1.0,
                    high: 1.0,
                    seed,
                },
                Modulator::RandomSegments {
                    low: 0.2,
                    high: 2.0,
                    seed: seed ^ 0x9e37_79b9,
                },
            ],
            base: None,
            log_partition: None,
        }],
    }
}
