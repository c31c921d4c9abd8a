//! The migration operator 𝒜: a finite symmetric Q-matrix with semigroup,
//! Green-function, and recurrence diagnostics.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::linalg::adaptive_simpson;
use crate::uniformization::{semigroup_apply, LinearOp};

/// Series truncation used for every semigroup evaluation.
pub const SEMIGROUP_TOL: f64 = 1e-12;
/// Absolute quadrature tolerance for Green and log-Green integrals.
pub const GREEN_TOL: f64 = 1e-8;

/// Kernel families accepted in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum KernelSpec {
    /// Discrete Laplacian on a d-dimensional torus of given side length:
    /// rate 1/(2d) to each of the 2d periodic neighbors.
    TorusLaplacian { d: usize, side: usize },
    /// a(i,j) = 1/n for i ≠ j.
    CompleteGraph { n: usize },
    /// One site, zero generator.
    SingleSite,
    /// Full rate matrix including the diagonal; must be symmetric with rows
    /// summing to zero.
    Custom { rates: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecurrenceFlag {
    Recurrent,
    Transient,
    Unknown,
}

/// Symmetric conservative generator on a finite site set.
#[derive(Debug, Clone)]
pub struct MigrationKernel {
    n: usize,
    /// Off-diagonal entries per row: (column, rate), rate > 0.
    neighbors: Vec<Vec<(usize, f64)>>,
    diag: Vec<f64>,
    max_rate: f64,
    spec: KernelSpec,
    recurrence_flag: RecurrenceFlag,
}

impl MigrationKernel {
    pub fn from_spec(spec: &KernelSpec) -> Result<Self> {
        match spec {
            KernelSpec::TorusLaplacian { d, side } => Self::torus_laplacian(*d, *side),
            KernelSpec::CompleteGraph { n } => Self::complete_graph(*n),
            KernelSpec::SingleSite => Ok(Self::single_site()),
            KernelSpec::Custom { rates } => Self::custom(rates.clone()),
        }
    }

    /// Sites are indexed in mixed radix: coordinate k of site i is
    /// (i / side^k) mod side.
    pub fn torus_laplacian(d: usize, side: usize) -> Result<Self> {
        if d == 0 || side == 0 {
            return Err(SimError::domain("torus needs d ≥ 1 and side ≥ 1"));
        }
        let n = side
            .checked_pow(d as u32)
            .ok_or_else(|| SimError::domain("torus size overflows"))?;
        let rate = 1.0 / (2.0 * d as f64);
        let mut neighbors: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for (i, row) in neighbors.iter_mut().enumerate() {
            let mut add = |j: usize| {
                if j == i {
                    return; // side ≤ 2 folds a neighbor onto i itself; no self-jump
                }
                if let Some(e) = row.iter_mut().find(|e| e.0 == j) {
                    e.1 += rate;
                } else {
                    row.push((j, rate));
                }
            };
            let mut stride = 1;
            for _ in 0..d {
                let coord = (i / stride) % side;
                let up = i - coord * stride + ((coord + 1) % side) * stride;
                let down = i - coord * stride + ((coord + side - 1) % side) * stride;
                add(up);
                add(down);
                stride *= side;
            }
            row.sort_by_key(|e| e.0);
        }
        let flag = if d <= 2 {
            RecurrenceFlag::Recurrent
        } else {
            RecurrenceFlag::Transient
        };
        Ok(Self::assemble(
            neighbors,
            KernelSpec::TorusLaplacian { d, side },
            flag,
        ))
    }

    pub fn complete_graph(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(SimError::domain("complete graph needs n ≥ 1"));
        }
        let rate = 1.0 / n as f64;
        let neighbors = (0..n)
            .map(|i| {
                (0..n)
                    .filter(|&j| j != i)
                    .map(|j| (j, rate))
                    .collect::<Vec<_>>()
            })
            .collect();
        Ok(Self::assemble(
            neighbors,
            KernelSpec::CompleteGraph { n },
            RecurrenceFlag::Recurrent,
        ))
    }

    pub fn single_site() -> Self {
        Self::assemble(
            vec![Vec::new()],
            KernelSpec::SingleSite,
            RecurrenceFlag::Recurrent,
        )
    }

    pub fn custom(rates: Vec<Vec<f64>>) -> Result<Self> {
        let n = rates.len();
        if n == 0 {
            return Err(SimError::domain("custom kernel needs at least one site"));
        }
        for row in &rates {
            if row.len() != n {
                return Err(SimError::domain("custom rate matrix must be square"));
            }
        }
        let mut neighbors: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for i in 0..n {
            let mut row_sum = 0.0;
            for j in 0..n {
                let r = rates[i][j];
                if !r.is_finite() {
                    return Err(SimError::domain(format!("rate ({i},{j}) is not finite")));
                }
                if rates[j][i] != r {
                    return Err(SimError::domain(format!(
                        "rate matrix not symmetric at ({i},{j})"
                    )));
                }
                row_sum += r;
                if i != j {
                    if r < 0.0 {
                        return Err(SimError::domain(format!(
                            "negative off-diagonal rate at ({i},{j})"
                        )));
                    }
                    if r > 0.0 {
                        neighbors[i].push((j, r));
                    }
                }
            }
            if row_sum.abs() > 1e-12 {
                return Err(SimError::domain(format!(
                    "row {i} sums to {row_sum:e}, not zero"
                )));
            }
        }
        Ok(Self::assemble(
            neighbors,
            KernelSpec::Custom { rates },
            RecurrenceFlag::Unknown,
        ))
    }

    fn assemble(
        neighbors: Vec<Vec<(usize, f64)>>,
        spec: KernelSpec,
        recurrence_flag: RecurrenceFlag,
    ) -> Self {
        let n = neighbors.len();
        let diag: Vec<f64> = neighbors
            .iter()
            .map(|row| -row.iter().map(|e| e.1).sum::<f64>())
            .collect();
        let max_rate = diag.iter().map(|d| d.abs()).fold(0.0, f64::max);
        MigrationKernel {
            n,
            neighbors,
            diag,
            max_rate,
            spec,
            recurrence_flag,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// sup_i |a(i,i)|, the uniformization rate.
    pub fn max_rate(&self) -> f64 {
        self.max_rate
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn recurrence_flag(&self) -> RecurrenceFlag {
        self.recurrence_flag
    }

    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.neighbors[i]
    }

    pub fn diag(&self, i: usize) -> f64 {
        self.diag[i]
    }

    fn check_site(&self, i: usize) -> Result<()> {
        if i < self.n {
            Ok(())
        } else {
            Err(SimError::SiteIndex {
                index: i,
                n: self.n,
            })
        }
    }

    /// y = 𝒜x.
    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        for i in 0..self.n {
            let mut acc = self.diag[i] * x[i];
            for &(j, r) in &self.neighbors[i] {
                acc += r * x[j];
            }
            y[i] = acc;
        }
    }

    /// Full row p_t(i, ·) of the semigroup, truncation error ≤ 1e−12.
    pub fn transition_row(&self, t: f64, i: usize) -> Result<Vec<f64>> {
        self.check_site(i)?;
        if !(t >= 0.0 && t.is_finite()) {
            return Err(SimError::domain(format!("time {t} must be finite and ≥ 0")));
        }
        let mut e = vec![0.0; self.n];
        e[i] = 1.0;
        Ok(semigroup_apply(self, t, &e, SEMIGROUP_TOL))
    }

    pub fn transition_probability(&self, t: f64, i: usize, j: usize) -> Result<f64> {
        self.check_site(j)?;
        Ok(self.transition_row(t, i)?[j])
    }

    /// g_T(j,k) = ∫₀^T p_s(j,k) ds by adaptive quadrature over semigroup
    /// evaluations, absolute error ≤ 1e−8.
    pub fn green_function(&self, horizon: f64, j: usize, k: usize) -> Result<f64> {
        self.check_site(j)?;
        self.check_site(k)?;
        if !(horizon >= 0.0 && horizon.is_finite()) {
            return Err(SimError::domain(format!(
                "horizon {horizon} must be finite and ≥ 0"
            )));
        }
        Ok(adaptive_simpson(
            |s| self.transition_probability(s, j, k).expect("validated args"),
            0.0,
            horizon,
            GREEN_TOL,
        ))
    }

    /// g_{T,log}(j,k) = ∫₀^T p_s(j,k)(1 + |log p_s(j,k)|) ds with the
    /// integrand set to 0 where p vanishes.
    pub fn log_green_function(&self, horizon: f64, j: usize, k: usize) -> Result<f64> {
        self.check_site(j)?;
        self.check_site(k)?;
        if !(horizon >= 0.0 && horizon.is_finite()) {
            return Err(SimError::domain(format!(
                "horizon {horizon} must be finite and ≥ 0"
            )));
        }
        Ok(adaptive_simpson(
            |s| {
                let p = self.transition_probability(s, j, k).expect("validated args");
                if p <= 0.0 {
                    0.0
                } else {
                    p * (1.0 + p.ln().abs())
                }
            },
            0.0,
            horizon,
            GREEN_TOL,
        ))
    }

    /// Recurrence classification. Built-in families carry an analytic flag
    /// (the torus answers are infinite-lattice idealizations: d ≤ 2
    /// recurrent, d ≥ 3 transient). Custom kernels are never classified —
    /// every finite chain is recurrent, so the honest answer is
    /// `Undetermined` plus a diagonal Green growth profile for
    /// extrapolation.
    pub fn classify_recurrence(&self, probe_horizons: &[f64]) -> Result<RecurrenceReport> {
        if probe_horizons.is_empty() {
            return Err(SimError::precondition("probe_horizons must be nonempty"));
        }
        if probe_horizons.windows(2).any(|w| w[0] >= w[1]) {
            return Err(SimError::precondition(
                "probe_horizons must be strictly increasing",
            ));
        }
        let (class, note) = match &self.spec {
            KernelSpec::TorusLaplacian { d, .. } if *d <= 2 => (
                RecurrenceClass::Recurrent,
                "analytic flag, as infinite-lattice idealization",
            ),
            KernelSpec::TorusLaplacian { .. } => (
                RecurrenceClass::Transient,
                "analytic flag, as infinite-lattice idealization",
            ),
            KernelSpec::CompleteGraph { .. } | KernelSpec::SingleSite => {
                (RecurrenceClass::Recurrent, "analytic flag, finite chain")
            }
            KernelSpec::Custom { .. } => (
                RecurrenceClass::Undetermined,
                "finite S is always recurrent; the growth profile is for \
                 extrapolation only, never a proof",
            ),
        };
        let green_profile = if class == RecurrenceClass::Undetermined {
            // Track the slowest-mixing diagonal: the site with the largest
            // Green value at the final horizon.
            let last = *probe_horizons.last().unwrap();
            let mut site = 0;
            let mut best = f64::NEG_INFINITY;
            for j in 0..self.n {
                let g = self.green_function(last, j, j)?;
                if g > best {
                    best = g;
                    site = j;
                }
            }
            probe_horizons
                .iter()
                .map(|&t| {
                    self.green_function(t, site, site)
                        .map(|g| GreenProbe { horizon: t, site, value: g })
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(RecurrenceReport {
            class,
            note: note.to_string(),
            green_profile,
        })
    }

    /// Checks g_T(j,j) ≥ C·sup_k g_T(k,k) for every j; on failure the
    /// witness carries the worst site and its ratio to the supremum.
    pub fn uniformity_condition_check(&self, horizon: f64, c: f64) -> Result<UniformityCheck> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(SimError::domain("horizon must be positive and finite"));
        }
        if !(c > 0.0 && c <= 1.0) {
            return Err(SimError::domain("C must lie in (0, 1]"));
        }
        let diagonals: Vec<f64> = (0..self.n)
            .map(|j| self.green_function(horizon, j, j))
            .collect::<Result<Vec<_>>>()?;
        let sup = diagonals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let (worst_site, worst) = diagonals
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(j, &g)| (j, g))
            .unwrap();
        let ratio = if sup > 0.0 { worst / sup } else { 1.0 };
        Ok(UniformityCheck {
            holds: ratio >= c,
            sup,
            witness: if ratio >= c {
                None
            } else {
                Some(UniformityWitness {
                    site: worst_site,
                    ratio,
                })
            },
        })
    }

    /// Semigroup matrices over a time grid, for dumps and consistency
    /// checks.
    pub fn semigroup_table(&self, times: &[f64]) -> Result<SemigroupTable> {
        let mut probs = Vec::with_capacity(times.len());
        for &t in times {
            let mut rows = Vec::with_capacity(self.n);
            for i in 0..self.n {
                rows.push(self.transition_row(t, i)?);
            }
            probs.push(rows);
        }
        Ok(SemigroupTable {
            times: times.to_vec(),
            probs,
            method_tolerance: SEMIGROUP_TOL,
        })
    }
}

impl LinearOp for MigrationKernel {
    fn dim(&self) -> usize {
        self.n
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        MigrationKernel::apply(self, x, y)
    }
    fn unif_rate(&self) -> f64 {
        self.max_rate
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RecurrenceClass {
    Recurrent,
    Transient,
    Undetermined,
}

#[derive(Debug, Clone, Serialize)]
pub struct GreenProbe {
    pub horizon: f64,
    pub site: usize,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RecurrenceReport {
    pub class: RecurrenceClass,
    pub note: String,
    /// Diagonal Green values over the probe horizons (custom kernels only).
    pub green_profile: Vec<GreenProbe>,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct UniformityWitness {
    pub site: usize,
    pub ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct UniformityCheck {
    pub holds: bool,
    /// sup_k g_T(k,k).
    pub sup: f64,
    pub witness: Option<UniformityWitness>,
}

/// Cached semigroup evaluations on a fixed grid.
#[derive(Debug, Clone)]
pub struct SemigroupTable {
    pub times: Vec<f64>,
    /// probs[g][i][j] = p_{times[g]}(i,j).
    pub probs: Vec<Vec<Vec<f64>>>,
    pub method_tolerance: f64,
}
