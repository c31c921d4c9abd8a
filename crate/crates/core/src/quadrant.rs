//! First-quadrant exit of a ρ-correlated planar Brownian pair.
//!
//! The pair (W¹, W²) starts strictly inside {w₁ > 0, w₂ > 0} and is run by
//! Euler increments until a coordinate first reaches zero. The exit time τ
//! carries a power-law tail P(τ > s) ~ c·s^(−p*) whose exponent
//! p*(ρ) = π / (2·arccos(−ρ)) is the critical moment order: E[τ^p] < ∞
//! exactly for p < p*. This module samples exits, fits the tail exponent
//! from simulation, and probes (2+ε)-moments of the interacting system's
//! total mass against the companion exit-time moment of the same order.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, SimError};
use crate::migration::MigrationKernel;
use crate::noise::{substream, DOMAIN_EXIT};
use crate::sbm::{EnsembleOptions, FieldPair, Gamma, ModelParams};
use crate::stats::{log_log_survival_slope, try_parallel_chunked, MeanSe, Merge, TailFit};

/// Rank-fraction window for tail regressions: the top decile of τ samples…
pub const TAIL_FIT_LO: f64 = 0.90;
/// …excluding the extreme half-percent, where order statistics (and any
/// censoring cap) dominate the noise.
pub const TAIL_FIT_HI: f64 = 0.995;

/// One sampled first-exit from the open quadrant.
///
/// Crossing is detected by sign change at step ends; the crossing time and
/// location are linearly interpolated within the straddling step and the
/// exit point is projected onto the boundary, so `exit_point.0.min(exit_point.1)`
/// is exactly `0.0`. No exponential-bridge correction is applied: excursions
/// that dip out and back between step ends are missed, giving the sampler an
/// O(√step_dt) bias toward late exits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExitSample {
    /// Starting point, strictly inside the quadrant.
    pub start: (f64, f64),
    /// Interpolated first-exit time; strictly positive.
    pub tau: f64,
    /// Interpolated boundary point; the smaller coordinate is exactly 0.
    pub exit_point: (f64, f64),
    /// Euler step used by the walk.
    pub step_dt: f64,
}

/// Exit walk outcome under a time cap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExitOutcome {
    Exited(ExitSample),
    /// Both coordinates were still positive when the walk reached the cap.
    Censored { cap: f64 },
}

fn check_rho_start(rho: f64, start: (f64, f64)) -> Result<()> {
    // ρ = −1 is admitted (the anticorrelated degeneration conserves w₁+w₂);
    // ρ = +1 is not: the fully correlated pair moves on the diagonal and has
    // no two-sided exit law.
    if !rho.is_finite() || !(-1.0..1.0).contains(&rho) {
        return Err(SimError::domain(format!(
            "correlation must lie in [-1, 1), got {rho}"
        )));
    }
    if !(start.0.is_finite() && start.1.is_finite()) || start.0 <= 0.0 || start.1 <= 0.0 {
        return Err(SimError::domain(format!(
            "start must be strictly inside the quadrant, got ({}, {})",
            start.0, start.1
        )));
    }
    Ok(())
}

fn check_exit_inputs(rho: f64, start: (f64, f64), step_dt: f64) -> Result<()> {
    check_rho_start(rho, start)?;
    if !step_dt.is_finite() || step_dt <= 0.0 {
        return Err(SimError::domain(format!(
            "step_dt must be positive and finite, got {step_dt}"
        )));
    }
    Ok(())
}

/// Open-interval uniform in (0, 1): the 53-bit lattice midpoints never hit
/// the endpoints, keeping tan(π(u − ½)) finite.
fn unit_open_interior<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64
}

/// Draws the first-exit location of the ρ-correlated pair from the open
/// quadrant, exactly — no time discretization.
///
/// The whitened pair Y = (W¹, (W² − ρW¹)/√(1−ρ²)) is a standard planar
/// Brownian motion, and the quadrant becomes the wedge between the rays
/// θ = θ_B (the image of {w₂ = 0}, with sin θ_B = −ρ) and θ = π/2 (the
/// image of {w₁ = 0}), of opening α = arccos(−ρ). The power map
/// z ↦ z^(π/α) takes the wedge to the upper half-plane and preserves
/// Brownian paths up to a time change, and half-plane exit from ξ + iη is
/// Cauchy(ξ, η) on the real axis. Pulling a Cauchy draw back along the
/// matching wedge edge yields the exit point; only the exit time is lost in
/// the time change. One uniform is consumed per call.
///
/// At ρ = −1 the law degenerates to the two corners {(0, a+b), (a+b, 0)}
/// hit with the gambler's-ruin probabilities of w₁.
pub fn sample_exit_point<R: Rng + ?Sized>(
    rho: f64,
    start: (f64, f64),
    rng: &mut R,
) -> Result<(f64, f64)> {
    check_rho_start(rho, start)?;
    let (a, b) = start;
    let u = unit_open_interior(rng);
    if rho == -1.0 {
        let total = a + b;
        // W¹ from a on (0, total): hits 0 first with probability b/total.
        return Ok(if u < b / total {
            (0.0, total)
        } else {
            (total, 0.0)
        });
    }
    let s = (1.0 - rho * rho).sqrt();
    let alpha = (-rho).acos();
    let power = std::f64::consts::PI / alpha;
    let y1 = a;
    let y2 = (b - rho * a) / s;
    let r0 = y1.hypot(y2);
    // Angle inside the wedge, measured from the {w₂ = 0} edge; rounding can
    // push a start lying very close to an edge onto it, so clamp strictly
    // inside.
    let phi = (y2.atan2(y1) - (-rho).asin()).clamp(1e-15, alpha - 1e-15);
    let psi = (phi * power).clamp(1e-15, std::f64::consts::PI - 1e-15);
    // Half-plane start (normalized to unit wedge radius): ξ + iη = e^(iψ).
    let c = psi.cos() + psi.sin() * (std::f64::consts::PI * (u - 0.5)).tan();
    // Positive Cauchy draws land on the image of {w₂ = 0}, negative ones on
    // the image of {w₁ = 0}; both edges scale by √(1−ρ²) back in (w₁, w₂).
    let r_exit = r0 * c.abs().powf(1.0 / power) * s;
    Ok(if c >= 0.0 {
        (r_exit, 0.0)
    } else {
        (0.0, r_exit)
    })
}

/// Runs the correlated pair from `start` until the first step end with a
/// non-positive coordinate, then interpolates the crossing.
///
/// The increments are dW¹ = √dt·Z₁ and dW² = √dt·(ρZ₁ + √(1−ρ²)Z₂) with
/// independent standard normals, so at ρ = −1 the sum w₁ + w₂ is conserved
/// bitwise along the walk.
pub fn sample_exit<R: Rng + ?Sized>(
    rho: f64,
    start: (f64, f64),
    step_dt: f64,
    rng: &mut R,
) -> Result<ExitSample> {
    match sample_exit_capped(rho, start, step_dt, f64::INFINITY, rng)? {
        ExitOutcome::Exited(sample) => Ok(sample),
        ExitOutcome::Censored { .. } => unreachable!("uncapped walk cannot censor"),
    }
}

/// Like [`sample_exit`] but gives up once the walk time passes `cap`,
/// reporting censoring instead. Heavy tails (ρ near 0 has E[τ] = ∞ from any
/// interior start) make a cap mandatory for ensemble studies.
pub fn sample_exit_capped<R: Rng + ?Sized>(
    rho: f64,
    start: (f64, f64),
    step_dt: f64,
    cap: f64,
    rng: &mut R,
) -> Result<ExitOutcome> {
    check_exit_inputs(rho, start, step_dt)?;
    if cap <= 0.0 || cap.is_nan() {
        return Err(SimError::domain(format!(
            "cap must be positive, got {cap}"
        )));
    }
    let sqrt_dt = step_dt.sqrt();
    let cross = (1.0 - rho * rho).sqrt();
    let (mut w1, mut w2) = start;
    let mut steps: u64 = 0;
    loop {
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        let dw1 = sqrt_dt * z1;
        let dw2 = sqrt_dt * (rho * z1 + cross * z2);
        let n1 = w1 + dw1;
        let n2 = w2 + dw2;
        steps += 1;
        if n1 <= 0.0 || n2 <= 0.0 {
            // θ_i = fraction of the step at which coordinate i reaches 0,
            // by linear interpolation; the earlier crossing wins and the
            // other coordinate is evaluated at that fraction.
            let theta1 = if n1 <= 0.0 { w1 / (w1 - n1) } else { f64::INFINITY };
            let theta2 = if n2 <= 0.0 { w2 / (w2 - n2) } else { f64::INFINITY };
            let (theta, exit_point) = if theta1 <= theta2 {
                (theta1, (0.0, (w2 + theta1 * dw2).max(0.0)))
            } else {
                (theta2, ((w1 + theta2 * dw1).max(0.0), 0.0))
            };
            let tau = ((steps - 1) as f64 + theta) * step_dt;
            return Ok(ExitOutcome::Exited(ExitSample {
                start,
                // The start is strictly interior, so θ > 0 on the first step
                // and τ > 0 always; clamp guards against underflow to 0.
                tau: tau.max(f64::MIN_POSITIVE),
                exit_point,
                step_dt,
            }));
        }
        w1 = n1;
        w2 = n2;
        if steps as f64 * step_dt >= cap {
            return Ok(ExitOutcome::Censored { cap });
        }
    }
}

/// Critical moment order p*(ρ) = π / (2·arccos(−ρ)) of the quadrant exit
/// time: E[τ^p] < ∞ iff p < p*(ρ). The correlated pair is a standard planar
/// motion in a wedge of opening arccos(−ρ), so p* is strictly decreasing in
/// ρ: p*(0) = 1, p* ↑ ∞ as ρ ↓ −1 (the wedge closes), p* ↓ 1/2 as ρ ↑ 1
/// (the wedge opens to a half-plane).
pub fn critical_moment_exponent(rho: f64) -> Result<f64> {
    if !rho.is_finite() || rho <= -1.0 || rho >= 1.0 {
        return Err(SimError::domain(format!(
            "critical moment exponent requires correlation in (-1, 1), got {rho}"
        )));
    }
    Ok(std::f64::consts::PI / (2.0 * (-rho).acos()))
}

/// One exit replica: `exit` is `None` when the walk was censored at the
/// ensemble cap.
#[derive(Debug, Clone, Copy)]
pub struct ExitRow {
    pub replica: u64,
    pub tau: f64,
    pub exit: Option<(f64, f64)>,
}

/// Ensemble of independent exit walks with a common start and cap.
#[derive(Debug, Clone)]
pub struct ExitEnsemble {
    pub rho: f64,
    pub start: (f64, f64),
    pub step_dt: f64,
    pub cap: f64,
    /// One row per replica in replica order. Censored rows carry tau = cap.
    pub rows: Vec<ExitRow>,
    pub censored: u64,
}

struct RowChunk {
    rows: Vec<ExitRow>,
    censored: u64,
}

impl Merge for RowChunk {
    fn merge(&mut self, other: Self) {
        self.rows.extend(other.rows);
        self.censored += other.censored;
    }
}

/// Runs `replicas` independent exit walks. Replica r draws from the
/// counter-based stream (seed, r, exit domain), so the ensemble is bitwise
/// reproducible at any thread count and any single replica can be replayed
/// in isolation.
pub fn sample_exit_ensemble(
    rho: f64,
    start: (f64, f64),
    step_dt: f64,
    cap: f64,
    replicas: u64,
    seed: u64,
) -> Result<ExitEnsemble> {
    check_exit_inputs(rho, start, step_dt)?;
    if replicas == 0 {
        return Err(SimError::precondition("exit ensemble needs replicas >= 1"));
    }
    let chunk = try_parallel_chunked(
        replicas,
        || RowChunk { rows: Vec::new(), censored: 0 },
        |acc, replica| -> Result<()> {
            let mut rng = substream(seed, replica, DOMAIN_EXIT, 0);
            let row = match sample_exit_capped(rho, start, step_dt, cap, &mut rng)? {
                ExitOutcome::Exited(s) => ExitRow {
                    replica,
                    tau: s.tau,
                    exit: Some(s.exit_point),
                },
                ExitOutcome::Censored { cap } => {
                    acc.censored += 1;
                    ExitRow {
                        replica,
                        tau: cap,
                        exit: None,
                    }
                }
            };
            acc.rows.push(row);
            Ok(())
        },
    )?;
    Ok(ExitEnsemble {
        rho,
        start,
        step_dt,
        cap,
        rows: chunk.rows,
        censored: chunk.censored,
    })
}

/// Tail-exponent estimate of the exit-time law, contrasted with the
/// closed-form critical order.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ExponentReport {
    pub rho: f64,
    /// π / (2·arccos(−ρ)).
    pub p_star_formula: f64,
    /// −slope of the log-log survival regression over the tail window.
    pub p_star_fitted: f64,
    /// p_star_fitted ± 1.96·(regression slope SE). The width treats the
    /// windowed survival points as independent, so it is a reproducible
    /// scale, not a calibrated 95% interval.
    pub ci: (f64, f64),
    pub n_samples: u64,
    pub censored: u64,
    pub step_dt: f64,
    pub cap: f64,
    /// Rank-fraction window of the regression.
    pub fit_window: (f64, f64),
    pub fit_points: usize,
}

/// Fits the survival tail of an exit ensemble on the window
/// [`TAIL_FIT_LO`, `TAIL_FIT_HI`], clipped below the censoring cap so that
/// censored replicas enter only through the survival denominator.
pub fn exponent_report(ensemble: &ExitEnsemble) -> Result<ExponentReport> {
    let p_star_formula = critical_moment_exponent(ensemble.rho)?;
    let total = ensemble.rows.len() as u64;
    let mut taus: Vec<f64> = ensemble
        .rows
        .iter()
        .filter(|r| r.exit.is_some())
        .map(|r| r.tau)
        .collect();
    taus.sort_by(f64::total_cmp);
    let exited_frac = taus.len() as f64 / total as f64;
    let hi = TAIL_FIT_HI.min(exited_frac - 0.001);
    if hi <= TAIL_FIT_LO {
        return Err(SimError::precondition(format!(
            "censoring too heavy for the tail window: only {:.1}% of walks exited",
            100.0 * exited_frac
        )));
    }
    // The regression needs 8 window points and 16 exited walks; thin
    // ensembles surface here as a clean error rather than downstream.
    let window_points = ((hi - TAIL_FIT_LO) * total as f64).floor();
    if taus.len() < 16 || window_points < 8.0 {
        return Err(SimError::precondition(format!(
            "tail window too thin: {window_points:.0} rank points between {TAIL_FIT_LO} and \
             {hi:.4}; raise replicas or the cap"
        )));
    }
    let TailFit { slope, se, points } = log_log_survival_slope(&taus, total, TAIL_FIT_LO, hi);
    let fitted = -slope;
    Ok(ExponentReport {
        rho: ensemble.rho,
        p_star_formula,
        p_star_fitted: fitted,
        ci: (fitted - 1.96 * se, fitted + 1.96 * se),
        n_samples: total,
        censored: ensemble.censored,
        step_dt: ensemble.step_dt,
        cap: ensemble.cap,
        fit_window: (TAIL_FIT_LO, hi),
        fit_points: points,
    })
}

/// Controls for the exit side of [`moment_bound_probe`].
#[derive(Debug, Clone)]
pub struct ProbeOptions {
    pub exit_replicas: u64,
    pub exit_step_dt: f64,
    /// Censoring cap for the companion exit walks; censored replicas
    /// contribute cap^p, biasing the exit moment low by a controlled amount.
    pub exit_cap: f64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions {
            exit_replicas: 10_000,
            exit_step_dt: 1e-3,
            exit_cap: 1e4,
        }
    }
}

/// One branching rate's sup-mass moment.
#[derive(Debug, Clone)]
pub struct ProbeRow {
    pub gamma: f64,
    /// Mean and SE of (sup_{t ≤ horizon} total mass)^(2+ε) over replicas.
    pub sup_mass_moment: MeanSe,
}

/// Output of [`moment_bound_probe`].
#[derive(Debug, Clone)]
pub struct ProbeReport {
    pub rho: f64,
    pub epsilon: f64,
    /// Moment order 1 + ε/2 of the companion exit time, i.e. (2+ε)/2.
    pub exit_moment_order: f64,
    pub rows: Vec<ProbeRow>,
    /// Mean and SE of τ^((2+ε)/2) for the exit walk started at the initial
    /// total masses (⟨u₀,1⟩, ⟨v₀,1⟩).
    pub exit_moment: MeanSe,
    pub exit_censored: u64,
    /// True when the sup-mass moment grows significantly across the γ grid:
    /// last − first > 3·√(se_first² + se_last²) with no significant
    /// intermediate drop. A bounded-in-γ moment keeps this false.
    pub growth_flag: bool,
}

/// Estimates E[(sup total mass)^(2+ε)] across branching rates and the
/// companion exit-time moment E[τ^((2+ε)/2)] of the quadrant walk started at
/// the initial masses. For ρ < 0 and (2+ε)/2 < p*(ρ) both are finite
/// uniformly in γ; the probe reports the estimates and flags growth trends.
pub fn moment_bound_probe(
    kernel: &MigrationKernel,
    params: &ModelParams,
    init: &FieldPair,
    epsilon: f64,
    gamma_list: &[f64],
    opts: &ProbeOptions,
) -> Result<ProbeReport> {
    let rho = params.rho;
    if rho >= 0.0 {
        return Err(SimError::precondition(format!(
            "moment bound probe requires rho < 0 (got {rho}): for rho >= 0 \
             no moment order above 2 is admissible"
        )));
    }
    let p_star = critical_moment_exponent(rho)?;
    let eps_max = 2.0 * p_star - 2.0;
    if !(epsilon > 0.0) || (2.0 + epsilon) / 2.0 >= p_star {
        return Err(SimError::precondition(format!(
            "epsilon = {epsilon} violates (2 + epsilon)/2 < p*({rho}) = {p_star:.6}; \
             admissible range is 0 < epsilon < {eps_max:.6}"
        )));
    }
    if gamma_list.is_empty() {
        return Err(SimError::precondition("gamma_list must be non-empty"));
    }
    let order = 2.0 + epsilon;

    let mut rows = Vec::with_capacity(gamma_list.len());
    for &gamma in gamma_list {
        let mut p = params.clone();
        p.gamma = Gamma::finite(gamma)?;
        let ens_opts = EnsembleOptions {
            track_sup_mass: true,
            ..Default::default()
        };
        let report = crate::sbm::simulate_ensemble(kernel, &p, init, &ens_opts)?;
        let sups = report
            .sup_total_mass
            .expect("track_sup_mass was requested");
        let mut moment = MeanSe::default();
        for s in sups {
            moment.push(s.powf(order));
        }
        rows.push(ProbeRow {
            gamma,
            sup_mass_moment: moment,
        });
    }

    let start = (init.mass_u(), init.mass_v());
    let exits = sample_exit_ensemble(
        rho,
        start,
        opts.exit_step_dt,
        opts.exit_cap,
        opts.exit_replicas,
        params.seed,
    )?;
    let mut exit_moment = MeanSe::default();
    for row in &exits.rows {
        exit_moment.push(row.tau.powf(order / 2.0));
    }

    let first = &rows.first().unwrap().sup_mass_moment;
    let last = &rows.last().unwrap().sup_mass_moment;
    let significant_rise = last.mean() - first.mean()
        > 3.0 * (first.se() * first.se() + last.se() * last.se()).sqrt();
    let no_significant_drop = rows.windows(2).all(|w| {
        let (a, b) = (&w[0].sup_mass_moment, &w[1].sup_mass_moment);
        b.mean() - a.mean() >= -3.0 * (a.se() * a.se() + b.se() * b.se()).sqrt()
    });

    Ok(ProbeReport {
        rho,
        epsilon,
        exit_moment_order: order / 2.0,
        rows,
        exit_moment,
        exit_censored: exits.censored,
        growth_flag: significant_rise && no_significant_drop,
    })
}
