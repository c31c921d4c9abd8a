//! Trotter scheme for the infinite-branching-rate model.
//!
//! At γ = ∞ the two fields cannot coexist at a site: the state lives on
//! E = {(x, y) : x·y = 0} site-wise, and any overlap created by migration is
//! resolved instantaneously through the first-exit law of the ρ-correlated
//! planar pair from the open quadrant. The scheme alternates an explicit
//! heat sub-step with that per-site resolution, so every full step lands
//! back in E. Verification is against the exact absorbing-pair second
//! moments (`dual::infinite_moment_oracle`).

use rand_chacha::ChaCha8Rng;

use crate::dual::PairGenerator;
use crate::error::{Result, SimError};
use crate::migration::MigrationKernel;
use crate::noise::{substream, DOMAIN_RESOLUTION};
use crate::quadrant::{sample_exit, sample_exit_point};
use crate::sbm::{EnsembleOptions, EnsembleReport, Gamma, MassTallies, ModelParams, ReplicaAccum};
use crate::stats::try_parallel_chunked;
use crate::uniformization::semigroup_apply;

/// Truncation tolerance for the deterministic pair-semigroup evaluations.
const STUDY_TOL: f64 = 1e-12;
/// Slack when checking that γ-gaps do not increase: gaps that agree to
/// rounding (e.g. on disconnected kernels, where they are all zero) still
/// count as non-increasing.
const MONOTONE_TOL: f64 = 1e-12;

/// A field pair constrained to the separated set E: at every site at most
/// one of u(i), v(i) is nonzero. Construction is the only door, so a value
/// of this type always satisfies the invariant exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct EFieldPair {
    u: Vec<f64>,
    v: Vec<f64>,
}

impl EFieldPair {
    /// Validates componentwise nonnegativity, finiteness, and exact
    /// site-wise separation u(i)·v(i) = 0.
    pub fn new(u: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if u.len() != v.len() || u.is_empty() {
            return Err(SimError::precondition(
                "field pair needs equal, nonzero site counts",
            ));
        }
        for (i, (&x, &y)) in u.iter().zip(&v).enumerate() {
            if !(x.is_finite() && y.is_finite() && x >= 0.0 && y >= 0.0) {
                return Err(SimError::domain(format!(
                    "fields must be nonnegative and finite; site {i} has ({x}, {y})"
                )));
            }
            if x * y != 0.0 {
                return Err(SimError::precondition(format!(
                    "state is not E-valued: site {i} carries both types ({x}, {y})"
                )));
            }
        }
        Ok(EFieldPair { u, v })
    }

    /// u = 𝟙 at site k, v = 𝟙 at site l, zero elsewhere; k ≠ l keeps the
    /// pair separated.
    pub fn localized(n: usize, k: usize, l: usize) -> Result<Self> {
        if k >= n {
            return Err(SimError::SiteIndex { index: k, n });
        }
        if l >= n {
            return Err(SimError::SiteIndex { index: l, n });
        }
        if k == l {
            return Err(SimError::precondition(
                "localized E-valued pair needs distinct sites",
            ));
        }
        let mut u = vec![0.0; n];
        let mut v = vec![0.0; n];
        u[k] = 1.0;
        v[l] = 1.0;
        Ok(EFieldPair { u, v })
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    pub fn mass_u(&self) -> f64 {
        self.u.iter().sum()
    }

    pub fn mass_v(&self) -> f64 {
        self.v.iter().sum()
    }
}

/// How the resolution sub-step draws the quadrant exit.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum ResolutionPolicy {
    /// Exact exit-point law via the conformal wedge map
    /// ([`quadrant::sample_exit_point`](crate::quadrant::sample_exit_point)).
    /// The resolution is instantaneous, so only the exit location enters the
    /// dynamics, and this draws it without discretization error.
    #[default]
    ExactExitLaw,
    /// Discretized Euler walk run to actual exit, inner step = dt / divisor.
    /// Kept for cross-validation: migration creates overlaps of size O(dt),
    /// and an inner step proportional to dt keeps a resolution bias that
    /// does not vanish as dt → 0, so the exact law is the default.
    InnerWalk { divisor: f64 },
}

/// Replica-scoped source of per-site resolution randomness. Stream
/// derivation is keyed by (step, site), so resolutions at distinct sites are
/// independent and the result does not depend on the order sites are
/// processed in.
#[derive(Debug, Clone, Copy)]
pub struct TrotterStream {
    seed: u64,
    replica: u64,
}

impl TrotterStream {
    pub fn new(seed: u64, replica: u64) -> Self {
        TrotterStream { seed, replica }
    }

    fn site_rng(&self, n_sites: usize, step: u64, site: usize) -> ChaCha8Rng {
        substream(
            self.seed,
            self.replica,
            DOMAIN_RESOLUTION,
            step * n_sites as u64 + site as u64,
        )
    }
}

/// Draws the post-resolution value of one site carrying both types, using
/// the same exit laws the Trotter step uses. `dt_hint` is the outer step
/// size the inner-walk policy divides.
pub fn resolve_overlap<R: rand::Rng + ?Sized>(
    rho: f64,
    amount: (f64, f64),
    policy: ResolutionPolicy,
    dt_hint: f64,
    rng: &mut R,
) -> Result<(f64, f64)> {
    match policy {
        ResolutionPolicy::ExactExitLaw => sample_exit_point(rho, amount, rng),
        ResolutionPolicy::InnerWalk { divisor } => {
            if !(divisor.is_finite() && divisor > 0.0) {
                return Err(SimError::domain(format!(
                    "inner-walk divisor must be positive, got {divisor}"
                )));
            }
            Ok(sample_exit(rho, amount, dt_hint / divisor, rng)?.exit_point)
        }
    }
}

fn check_step_inputs(kernel: &MigrationKernel, n: usize, dt: f64, rho: f64) -> Result<()> {
    if kernel.n() != n {
        return Err(SimError::precondition(format!(
            "state has {n} sites, kernel has {}",
            kernel.n()
        )));
    }
    if !(dt.is_finite() && dt > 0.0) {
        return Err(SimError::domain(format!("dt must be positive, got {dt}")));
    }
    if !rho.is_finite() || !(-1.0..1.0).contains(&rho) {
        return Err(SimError::domain(format!(
            "correlation must lie in [-1, 1), got {rho}"
        )));
    }
    Ok(())
}

/// Heat sub-step followed by per-site resolution, in place. `au`/`av` are
/// scratch of length n. Returns the largest overlap product created by the
/// heat flow (a coexistence diagnostic).
#[allow(clippy::too_many_arguments)]
fn step_in_place(
    u: &mut [f64],
    v: &mut [f64],
    au: &mut [f64],
    av: &mut [f64],
    kernel: &MigrationKernel,
    dt: f64,
    rho: f64,
    policy: ResolutionPolicy,
    stream: &TrotterStream,
    step: u64,
) -> Result<()> {
    let n = u.len();
    kernel.apply(u, au);
    kernel.apply(v, av);
    for i in 0..n {
        // Explicit Euler heat flow; the clamp only fires when dt·max_rate
        // exceeds 1, but resolution requires nonnegative coordinates
        // unconditionally.
        u[i] = (u[i] + dt * au[i]).max(0.0);
        v[i] = (v[i] + dt * av[i]).max(0.0);
    }
    for i in 0..n {
        if u[i] > 0.0 && v[i] > 0.0 {
            let mut rng = stream.site_rng(n, step, i);
            let (x, y) = resolve_overlap(rho, (u[i], v[i]), policy, dt, &mut rng)?;
            if !(x.is_finite() && y.is_finite()) {
                return Err(SimError::Blowup {
                    replica: stream.replica,
                    step,
                    site: i,
                    value: x.max(y),
                });
            }
            u[i] = x;
            v[i] = y;
        }
    }
    Ok(())
}

/// One Trotter step: u ← u + 𝒜u·dt, v ← v + 𝒜v·dt (clamped at 0), then
/// every site holding both types is replaced by a draw from the exit-point
/// law of the ρ-correlated pair started at (u(i), v(i)). The result is
/// E-valued by construction. `step` indexes the site-keyed randomness; pass
/// consecutive values when composing steps.
pub fn trotter_step(
    state: &EFieldPair,
    kernel: &MigrationKernel,
    dt: f64,
    rho: f64,
    stream: &TrotterStream,
    step: u64,
) -> Result<EFieldPair> {
    trotter_step_with(
        ResolutionPolicy::default(),
        state,
        kernel,
        dt,
        rho,
        stream,
        step,
    )
}

/// [`trotter_step`] with an explicit resolution policy.
pub fn trotter_step_with(
    policy: ResolutionPolicy,
    state: &EFieldPair,
    kernel: &MigrationKernel,
    dt: f64,
    rho: f64,
    stream: &TrotterStream,
    step: u64,
) -> Result<EFieldPair> {
    check_step_inputs(kernel, state.len(), dt, rho)?;
    let mut u = state.u.clone();
    let mut v = state.v.clone();
    let n = u.len();
    let mut au = vec![0.0; n];
    let mut av = vec![0.0; n];
    step_in_place(
        &mut u, &mut v, &mut au, &mut av, kernel, dt, rho, policy, stream, step,
    )?;
    // The resolution projects exactly onto a coordinate axis, so the
    // invariant holds without re-validation.
    Ok(EFieldPair { u, v })
}

/// Runs `params.replicas` independent Trotter trajectories from `init` and
/// aggregates the same functionals as the finite-rate ensemble. Requires
/// `gamma = inf` and ρ < 0 (the infinite-rate model is constructed from
/// negatively correlated noises; exit-coordinate second moments diverge for
/// ρ ≥ 0 and ensemble statistics would not converge). Deterministic given
/// the seed at any thread count.
pub fn simulate_infinite(
    kernel: &MigrationKernel,
    params: &ModelParams,
    init: &EFieldPair,
    opts: &EnsembleOptions,
) -> Result<EnsembleReport> {
    simulate_infinite_with(ResolutionPolicy::default(), kernel, params, init, opts)
}

/// [`simulate_infinite`] with an explicit resolution policy.
pub fn simulate_infinite_with(
    policy: ResolutionPolicy,
    kernel: &MigrationKernel,
    params: &ModelParams,
    init: &EFieldPair,
    opts: &EnsembleOptions,
) -> Result<EnsembleReport> {
    params.validate()?;
    if params.gamma != Gamma::Infinite {
        return Err(SimError::precondition(
            "simulate_infinite requires gamma = inf; use simulate_ensemble for finite rates",
        ));
    }
    if !(params.rho < 0.0) {
        return Err(SimError::precondition(format!(
            "the infinite-rate model requires rho < 0, got {}",
            params.rho
        )));
    }
    let n = kernel.n();
    if init.len() != n {
        return Err(SimError::precondition(format!(
            "initial state has {} sites, kernel has {n}",
            init.len()
        )));
    }
    for &(a, b) in &opts.tracked_pairs {
        if a >= n {
            return Err(SimError::SiteIndex { index: a, n });
        }
        if b >= n {
            return Err(SimError::SiteIndex { index: b, n });
        }
    }
    let n_steps = params.n_steps()?;
    let record_steps = params.record_steps()?;
    let times = params.record_times.clone();
    let dt = params.dt;
    let rho = params.rho;

    let acc = try_parallel_chunked(
        params.replicas,
        || ReplicaAccum::new(&times, n, opts.tracked_pairs.len(), opts),
        |acc: &mut ReplicaAccum, replica| -> Result<()> {
            let stream = TrotterStream::new(params.seed, replica);
            let mut u = init.u.clone();
            let mut v = init.v.clone();
            let mut au = vec![0.0; n];
            let mut av = vec![0.0; n];

            let mut tallies = MassTallies::start(&u, &v);
            let mut sup_mass = tallies.mass_u + tallies.mass_v;
            let mut path = Vec::new();
            let mut rec_idx = 0;
            acc.observe(
                &record_steps,
                &times,
                &opts.tracked_pairs,
                0,
                &mut rec_idx,
                &u,
                &v,
                &tallies,
                &mut path,
            );

            for step in 1..=n_steps {
                step_in_place(
                    &mut u, &mut v, &mut au, &mut av, kernel, dt, rho, policy, &stream, step,
                )?;
                tallies.advance_masses(u.iter().sum(), v.iter().sum());
                if tallies.mass_u + tallies.mass_v > sup_mass {
                    sup_mass = tallies.mass_u + tallies.mass_v;
                }
                // ⟨u_t, v_t⟩ = 0 at every step end on E, so the coexistence
                // integral stays identically zero and needs no update.
                acc.observe(
                    &record_steps,
                    &times,
                    &opts.tracked_pairs,
                    step,
                    &mut rec_idx,
                    &u,
                    &v,
                    &tallies,
                    &mut path,
                );
            }
            acc.finish_replica(path, sup_mass);
            Ok(())
        },
    )?;

    Ok(acc.into_report(
        times,
        opts.tracked_pairs.clone(),
        dt * kernel.max_rate(),
        params.replicas,
    ))
}

/// Deterministic table of duality second moments across branching rates,
/// against their γ = ∞ limit.
#[derive(Debug, Clone, serde::Serialize)]
pub struct GammaStudyReport {
    pub times: Vec<f64>,
    pub gammas: Vec<f64>,
    pub n_sites: usize,
    /// w_t(a,b) at finite γ, indexed \[time]\[gamma]\[a·n + b].
    pub finite_values: Vec<Vec<Vec<f64>>>,
    /// Absorbing-pair limit values, indexed \[time]\[a·n + b]. Diagonal
    /// entries are exactly 0.
    pub limit_values: Vec<Vec<f64>>,
    /// max over pairs of |finite − limit|, indexed \[time]\[gamma].
    pub max_gaps: Vec<Vec<f64>>,
    /// True when, for every time and every pair, the gap to the limit is
    /// non-increasing along the γ grid (up to rounding slack).
    pub monotone: bool,
}

impl GammaStudyReport {
    pub fn finite_value(&self, time_idx: usize, gamma_idx: usize, a: usize, b: usize) -> f64 {
        self.finite_values[time_idx][gamma_idx][a * self.n_sites + b]
    }

    pub fn limit_value(&self, time_idx: usize, a: usize, b: usize) -> f64 {
        self.limit_values[time_idx][a * self.n_sites + b]
    }
}

/// Tabulates w_t(a,b) = E^{a,b}[u₀(ξ¹)v₀(ξ²)e^{ργL_t}] over an increasing
/// γ grid together with the absorbing-chain limit
/// E^{a,b}[u₀(ξ¹)v₀(ξ²); L_t = 0], for every pair (a,b). For ρ < 0 the
/// weight e^{ργL} decreases to 𝟙{L = 0} pointwise as γ grows, so each gap
/// column must shrink monotonically; `monotone` reports that check.
pub fn gamma_convergence_study(
    kernel: &MigrationKernel,
    rho: f64,
    u0: &[f64],
    v0: &[f64],
    gamma_list: &[f64],
    t_list: &[f64],
) -> Result<GammaStudyReport> {
    if !rho.is_finite() || !(-1.0..0.0).contains(&rho) {
        return Err(SimError::precondition(format!(
            "gamma convergence requires rho in [-1, 0), got {rho}"
        )));
    }
    if gamma_list.is_empty() || t_list.is_empty() {
        return Err(SimError::precondition(
            "gamma_list and t_list must be non-empty",
        ));
    }
    if !gamma_list
        .iter()
        .all(|g| g.is_finite() && *g > 0.0)
    {
        return Err(SimError::precondition(
            "gamma_list entries must be positive and finite",
        ));
    }
    if !gamma_list.windows(2).all(|w| w[0] < w[1]) {
        return Err(SimError::precondition(
            "gamma_list must be strictly increasing",
        ));
    }
    if !t_list.iter().all(|t| t.is_finite() && *t >= 0.0) {
        return Err(SimError::precondition(
            "t_list entries must be nonnegative and finite",
        ));
    }
    let n = kernel.n();
    if u0.len() != n || v0.len() != n {
        return Err(SimError::precondition(format!(
            "initial fields must have {n} sites"
        )));
    }
    for (i, (&x, &y)) in u0.iter().zip(v0).enumerate() {
        if !(x.is_finite() && y.is_finite() && x >= 0.0 && y >= 0.0) {
            return Err(SimError::domain(format!(
                "fields must be nonnegative and finite; site {i} has ({x}, {y})"
            )));
        }
    }

    let mut w0 = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            w0[i * n + j] = u0[i] * v0[j];
        }
    }
    // The absorbing limit kills diagonal weight instantly, so the limit
    // evolution starts from the off-diagonal part of w₀.
    let mut w0_offdiag = w0.clone();
    for i in 0..n {
        w0_offdiag[i * n + i] = 0.0;
    }
    let absorbing = PairGenerator::absorbing(kernel);

    let mut finite_values = Vec::with_capacity(t_list.len());
    let mut limit_values = Vec::with_capacity(t_list.len());
    let mut max_gaps = Vec::with_capacity(t_list.len());
    let mut monotone = true;
    for &t in t_list {
        let limit = semigroup_apply(&absorbing, t, &w0_offdiag, STUDY_TOL);
        let mut per_gamma = Vec::with_capacity(gamma_list.len());
        let mut gaps_row = Vec::with_capacity(gamma_list.len());
        for &gamma in gamma_list {
            let op = PairGenerator::weighted(kernel, rho * gamma);
            let w = semigroup_apply(&op, t, &w0, STUDY_TOL);
            let max_gap = w
                .iter()
                .zip(&limit)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            gaps_row.push(max_gap);
            per_gamma.push(w);
        }
        for pair in 0..n * n {
            let mut prev = f64::INFINITY;
            for w in &per_gamma {
                let gap = (w[pair] - limit[pair]).abs();
                if gap > prev + MONOTONE_TOL {
                    monotone = false;
                }
                prev = gap;
            }
        }
        finite_values.push(per_gamma);
        limit_values.push(limit);
        max_gaps.push(gaps_row);
    }

    Ok(GammaStudyReport {
        times: t_list.to_vec(),
        gammas: gamma_list.to_vec(),
        n_sites: n,
        finite_values,
        limit_values,
        max_gaps,
        monotone,
    })
}
