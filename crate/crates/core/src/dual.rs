//! The dual description of second moments: two independent copies of the
//! migration chain and their collision time L_t = ∫₀^t 𝟙{ξ¹_s = ξ²_s} ds.
//!
//! Second moments of the field pair satisfy
//!
//!   E[u_t(a)v_t(b)] = E^{a,b}[u₀(ξ¹_t)v₀(ξ²_t)·e^{ργL_t}],
//!
//! with e^{ργL_t} replaced by 𝟙{L_t = 0} in the infinite-rate limit. Both
//! sides are computable here: Monte Carlo over exact event-driven chain
//! pairs (no time discretization), and deterministic evaluation of the
//! Feynman–Kac semigroup e^{t(𝒜⊗I + I⊗𝒜 + ργD)} where D = diag(𝟙{i=j}).
//! The γ = ∞ functional uses the pair chain with an absorbing diagonal
//! instead of thresholding simulated collision times.

use rand::Rng;

use crate::error::{Result, SimError};
use crate::linalg::expm;
use crate::migration::MigrationKernel;
use crate::noise::{substream, DOMAIN_DUAL};
use crate::sbm::Gamma;
use crate::stats::{try_parallel_chunked, MeanSe};
use crate::uniformization::{semigroup_apply, LinearOp};

use ndarray::Array2;

/// Series truncation for pair-semigroup evaluations.
const PAIR_TOL: f64 = 1e-12;
/// Largest site count the dense matrix-exponential route accepts.
pub const DENSE_SITE_LIMIT: usize = 64;

/// One exact realization of the dual pair over [0, t].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualSample {
    pub start: (usize, usize),
    pub end: (usize, usize),
    /// L_t = Lebesgue time spent with ξ¹ = ξ².
    pub collision_time: f64,
    /// True iff the chains never occupied a common site within [0, t].
    pub never_met: bool,
}

/// Generator of the pair chain (ξ¹, ξ²) on S×S in flat index i·N + j:
/// 𝒜⊗I + I⊗𝒜, optionally with a collision surcharge w·D on the diagonal
/// {(i,i)}, or with the diagonal made absorbing (the γ = ∞ limit operator
/// ΠGΠ, Π = off-diagonal projection).
#[derive(Debug, Clone)]
pub struct PairGenerator<'a> {
    kernel: &'a MigrationKernel,
    collision_weight: f64,
    absorbing: bool,
}

impl<'a> PairGenerator<'a> {
    pub fn plain(kernel: &'a MigrationKernel) -> Self {
        PairGenerator {
            kernel,
            collision_weight: 0.0,
            absorbing: false,
        }
    }

    /// Pair generator plus w on diagonal states; w = ργ realizes the
    /// Feynman–Kac weight e^{ργL_t}.
    pub fn weighted(kernel: &'a MigrationKernel, collision_weight: f64) -> Self {
        PairGenerator {
            kernel,
            collision_weight,
            absorbing: false,
        }
    }

    /// Sub-Markov generator of the pair chain killed on the diagonal.
    pub fn absorbing(kernel: &'a MigrationKernel) -> Self {
        PairGenerator {
            kernel,
            collision_weight: 0.0,
            absorbing: true,
        }
    }

    pub fn pair_index(&self, i: usize, j: usize) -> usize {
        i * self.kernel.n() + j
    }

    /// Dense realization, for cross-checks and the dense oracle route.
    pub fn to_dense(&self) -> Array2<f64> {
        let n = self.kernel.n();
        let dim = n * n;
        let mut g = Array2::<f64>::zeros((dim, dim));
        let mut basis = vec![0.0; dim];
        let mut col = vec![0.0; dim];
        for s in 0..dim {
            basis[s] = 1.0;
            self.apply_vec(&basis, &mut col);
            for r in 0..dim {
                g[[r, s]] = col[r];
            }
            basis[s] = 0.0;
        }
        g
    }

    fn apply_vec(&self, x: &[f64], y: &mut [f64]) {
        let n = self.kernel.n();
        for i in 0..n {
            let di = self.kernel.diag(i);
            let row_i = self.kernel.neighbors(i);
            for j in 0..n {
                if self.absorbing && i == j {
                    y[i * n + j] = 0.0;
                    continue;
                }
                let mut diag = di + self.kernel.diag(j);
                if i == j {
                    diag += self.collision_weight;
                }
                let mut acc = diag * x[i * n + j];
                for &(k, r) in row_i {
                    if !(self.absorbing && k == j) {
                        acc += r * x[k * n + j];
                    }
                }
                for &(k, r) in self.kernel.neighbors(j) {
                    if !(self.absorbing && i == k) {
                        acc += r * x[i * n + k];
                    }
                }
                y[i * n + j] = acc;
            }
        }
    }
}

impl LinearOp for PairGenerator<'_> {
    fn dim(&self) -> usize {
        self.kernel.n() * self.kernel.n()
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.apply_vec(x, y)
    }
    fn unif_rate(&self) -> f64 {
        2.0 * self.kernel.max_rate() + self.collision_weight.abs()
    }
    fn row_sum_excess(&self) -> f64 {
        self.collision_weight.max(0.0)
    }
}

fn check_site(kernel: &MigrationKernel, i: usize) -> Result<()> {
    if i < kernel.n() {
        Ok(())
    } else {
        Err(SimError::SiteIndex {
            index: i,
            n: kernel.n(),
        })
    }
}

fn check_time(t: f64) -> Result<()> {
    if t >= 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(SimError::domain(format!("time {t} must be finite and ≥ 0")))
    }
}

fn check_field(kernel: &MigrationKernel, w: &[f64], name: &str) -> Result<()> {
    if w.len() != kernel.n() {
        return Err(SimError::precondition(format!(
            "{name} has {} entries, kernel has {} sites",
            w.len(),
            kernel.n()
        )));
    }
    for (i, x) in w.iter().enumerate() {
        if !(x.is_finite() && *x >= 0.0) {
            return Err(SimError::domain(format!(
                "{name}({i}) = {x} must be finite and ≥ 0"
            )));
        }
    }
    Ok(())
}

#[inline]
fn exp_unit<R: Rng>(rng: &mut R) -> f64 {
    // 1 − U ∈ (0, 1] keeps the logarithm finite.
    -(1.0 - rng.random::<f64>()).ln()
}

fn jump_target<R: Rng>(kernel: &MigrationKernel, x: usize, rng: &mut R) -> usize {
    let row = kernel.neighbors(x);
    let total: f64 = row.iter().map(|e| e.1).sum();
    let mut w = rng.random::<f64>() * total;
    for &(k, r) in row {
        w -= r;
        if w <= 0.0 {
            return k;
        }
    }
    row.last().map_or(x, |e| e.0)
}

/// Exact event-driven simulation of the independent pair over [0, t]: each
/// chain holds Exp(|a(x,x)|) and jumps proportionally to its rates;
/// collision time accrues at rate 1 over holding intervals with ξ¹ = ξ².
/// Jump-instant ties carry Lebesgue measure zero and are ignored.
pub fn simulate_dual<R: Rng>(
    kernel: &MigrationKernel,
    a: usize,
    b: usize,
    t: f64,
    rng: &mut R,
) -> Result<DualSample> {
    check_site(kernel, a)?;
    check_site(kernel, b)?;
    check_time(t)?;
    let (mut x1, mut x2) = (a, b);
    let mut s = 0.0;
    let mut l = 0.0;
    let mut met = a == b;
    loop {
        let together = x1 == x2;
        let r1 = -kernel.diag(x1);
        let r2 = -kernel.diag(x2);
        let total = r1 + r2;
        let tau = if total > 0.0 {
            exp_unit(rng) / total
        } else {
            f64::INFINITY
        };
        if s + tau >= t {
            if together {
                l += t - s;
            }
            break;
        }
        if together {
            l += tau;
        }
        s += tau;
        // Competing exponentials: the mover is chain 1 w.p. r1/total.
        if rng.random::<f64>() * total < r1 {
            x1 = jump_target(kernel, x1, rng);
        } else {
            x2 = jump_target(kernel, x2, rng);
        }
        if x1 == x2 {
            met = true;
        }
    }
    Ok(DualSample {
        start: (a, b),
        end: (x1, x2),
        collision_time: l,
        never_met: !met,
    })
}

/// How `fk_oracle` evaluates the pair semigroup.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FkMethod {
    /// Dense for small site sets, series otherwise.
    Auto,
    /// Dense N²×N² matrix exponential; rejected above `DENSE_SITE_LIMIT`
    /// sites.
    Dense,
    /// Matrix-free uniformization series (truncation ≤ 1e−12).
    Series,
}

/// Deterministic evaluation of the duality functional
/// w_t(a,b) = E^{a,b}[u₀(ξ¹_t)v₀(ξ²_t)e^{ργL_t}]
/// as the solution of d/dt w = (𝒜⊗I + I⊗𝒜 + ργD)w, w₀(i,j) = u₀(i)v₀(j).
/// This is the ground-truth oracle for all finite-γ duality checks.
pub fn fk_oracle(
    kernel: &MigrationKernel,
    gamma: f64,
    rho: f64,
    u0: &[f64],
    v0: &[f64],
    a: usize,
    b: usize,
    t: f64,
) -> Result<f64> {
    fk_oracle_with(FkMethod::Auto, kernel, gamma, rho, u0, v0, a, b, t)
}

#[allow(clippy::too_many_arguments)]
pub fn fk_oracle_with(
    method: FkMethod,
    kernel: &MigrationKernel,
    gamma: f64,
    rho: f64,
    u0: &[f64],
    v0: &[f64],
    a: usize,
    b: usize,
    t: f64,
) -> Result<f64> {
    check_site(kernel, a)?;
    check_site(kernel, b)?;
    check_time(t)?;
    check_field(kernel, u0, "u0")?;
    check_field(kernel, v0, "v0")?;
    if !(gamma.is_finite() && gamma >= 0.0) {
        return Err(SimError::precondition(format!(
            "fk_oracle requires finite gamma ≥ 0, got {gamma}"
        )));
    }
    if !(rho.is_finite() && (-1.0..=1.0).contains(&rho)) {
        return Err(SimError::domain(format!("rho {rho} must lie in [-1, 1]")));
    }
    let n = kernel.n();
    let mut w0 = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            w0[i * n + j] = u0[i] * v0[j];
        }
    }
    let op = PairGenerator::weighted(kernel, rho * gamma);
    let dense = match method {
        FkMethod::Dense => {
            if n > DENSE_SITE_LIMIT {
                return Err(SimError::domain(format!(
                    "dense oracle limited to {DENSE_SITE_LIMIT} sites, kernel has {n}"
                )));
            }
            true
        }
        FkMethod::Series => false,
        FkMethod::Auto => n * n <= 256,
    };
    if dense {
        let p = expm(&(op.to_dense() * t));
        let idx = a * n + b;
        Ok((0..n * n).map(|s| p[[idx, s]] * w0[s]).sum())
    } else {
        Ok(semigroup_apply(&op, t, &w0, PAIR_TOL)[a * n + b])
    }
}

/// Monte Carlo estimate of the same functional over exact dual samples.
/// Deterministic given the seed; replica r draws from its own substream.
#[allow(clippy::too_many_arguments)]
pub fn dual_moment_estimate(
    kernel: &MigrationKernel,
    u0: &[f64],
    v0: &[f64],
    gamma: f64,
    rho: f64,
    a: usize,
    b: usize,
    t: f64,
    replicas: u64,
    seed: u64,
) -> Result<MeanSe> {
    check_site(kernel, a)?;
    check_site(kernel, b)?;
    check_time(t)?;
    check_field(kernel, u0, "u0")?;
    check_field(kernel, v0, "v0")?;
    if !(gamma.is_finite() && gamma >= 0.0) {
        return Err(SimError::precondition(format!(
            "dual_moment_estimate requires finite gamma ≥ 0, got {gamma}"
        )));
    }
    let weight = rho * gamma;
    try_parallel_chunked(
        replicas,
        MeanSe::default,
        |acc: &mut MeanSe, replica| -> Result<()> {
            let mut rng = substream(seed, replica, DOMAIN_DUAL, 0);
            let s = simulate_dual(kernel, a, b, t, &mut rng)?;
            acc.push(u0[s.end.0] * v0[s.end.1] * (weight * s.collision_time).exp());
            Ok(())
        },
    )
}

/// Monte Carlo estimate of P^{a,b}(ξ¹_s ≠ ξ²_s for all s ≤ t).
pub fn no_collision_probability(
    kernel: &MigrationKernel,
    a: usize,
    b: usize,
    t: f64,
    replicas: u64,
    seed: u64,
) -> Result<MeanSe> {
    check_site(kernel, a)?;
    check_site(kernel, b)?;
    check_time(t)?;
    try_parallel_chunked(
        replicas,
        MeanSe::default,
        |acc: &mut MeanSe, replica| -> Result<()> {
            let mut rng = substream(seed, replica, DOMAIN_DUAL, 0);
            let s = simulate_dual(kernel, a, b, t, &mut rng)?;
            acc.push(if s.never_met { 1.0 } else { 0.0 });
            Ok(())
        },
    )
}

/// The same probability evaluated exactly: the pair semigroup restricted to
/// the off-diagonal with an absorbing diagonal, applied to 𝟙_{i≠j}.
pub fn no_collision_exact(kernel: &MigrationKernel, a: usize, b: usize, t: f64) -> Result<f64> {
    check_site(kernel, a)?;
    check_site(kernel, b)?;
    check_time(t)?;
    if a == b {
        return Ok(0.0);
    }
    let n = kernel.n();
    let mut ones = vec![1.0; n * n];
    for i in 0..n {
        ones[i * n + i] = 0.0;
    }
    let op = PairGenerator::absorbing(kernel);
    Ok(semigroup_apply(&op, t, &ones, PAIR_TOL)[a * n + b])
}

/// Exact second moment of the infinite-rate model:
/// E[u_t(a)v_t(b)] = E^{a,b}[u₀(ξ¹_t)v₀(ξ²_t); L_t = 0], evaluated with the
/// absorbing pair semigroup. Requires site-wise u₀·v₀ = 0 (the model's
/// state space); the diagonal a = b yields exactly 0.
pub fn infinite_moment_oracle(
    kernel: &MigrationKernel,
    u0: &[f64],
    v0: &[f64],
    a: usize,
    b: usize,
    t: f64,
) -> Result<f64> {
    check_site(kernel, a)?;
    check_site(kernel, b)?;
    check_time(t)?;
    check_field(kernel, u0, "u0")?;
    check_field(kernel, v0, "v0")?;
    let n = kernel.n();
    for i in 0..n {
        if u0[i] * v0[i] != 0.0 {
            return Err(SimError::precondition(format!(
                "infinite-rate moments need u0·v0 = 0 site-wise; site {i} has {}",
                u0[i] * v0[i]
            )));
        }
    }
    let mut w0 = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            w0[i * n + j] = u0[i] * v0[j];
        }
    }
    let op = PairGenerator::absorbing(kernel);
    Ok(semigroup_apply(&op, t, &w0, PAIR_TOL)[a * n + b])
}

/// E[M_t] = Σ_{i,j} u₀(i)v₀(j)·E^{i,j}[e^{ργL_t}] per grid time, via the
/// weighted pair semigroup applied to 𝟙. At γ = ∞ the weight becomes
/// 𝟙{L_t = 0} (absorbing diagonal) and the initial pair must be E-valued so
/// the diagonal terms vanish.
pub fn coexistence_functional(
    kernel: &MigrationKernel,
    u0: &[f64],
    v0: &[f64],
    gamma: Gamma,
    rho: f64,
    time_grid: &[f64],
) -> Result<Vec<(f64, f64)>> {
    check_field(kernel, u0, "u0")?;
    check_field(kernel, v0, "v0")?;
    if !(rho.is_finite() && (-1.0..=1.0).contains(&rho)) {
        return Err(SimError::domain(format!("rho {rho} must lie in [-1, 1]")));
    }
    let n = kernel.n();
    let (op, x) = match gamma {
        Gamma::Finite(g) => {
            if !(g > 0.0 && g.is_finite()) {
                return Err(SimError::domain(format!(
                    "coexistence functional needs gamma in (0, ∞], got {g}"
                )));
            }
            (PairGenerator::weighted(kernel, rho * g), vec![1.0; n * n])
        }
        Gamma::Infinite => {
            for i in 0..n {
                if u0[i] * v0[i] != 0.0 {
                    return Err(SimError::precondition(format!(
                        "gamma = ∞ requires u0·v0 = 0 site-wise; site {i} has {}",
                        u0[i] * v0[i]
                    )));
                }
            }
            let mut ones = vec![1.0; n * n];
            for i in 0..n {
                ones[i * n + i] = 0.0;
            }
            (PairGenerator::absorbing(kernel), ones)
        }
    };
    let mut curve = Vec::with_capacity(time_grid.len());
    for &t in time_grid {
        check_time(t)?;
        let y = semigroup_apply(&op, t, &x, PAIR_TOL);
        let mut total = 0.0;
        for i in 0..n {
            let row = &y[i * n..(i + 1) * n];
            let s: f64 = row.iter().zip(v0).map(|(w, v)| w * v).sum();
            total += u0[i] * s;
        }
        curve.push((t, total));
    }
    Ok(curve)
}
