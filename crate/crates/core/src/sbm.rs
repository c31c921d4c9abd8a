//! Euler–Maruyama ensembles for the finite-branching-rate system
//!
//!   du_t(i) = 𝒜u_t(i) dt + √(γ u_t(i) v_t(i)) dB¹_t(i)
//!   dv_t(i) = 𝒜v_t(i) dt + √(γ u_t(i) v_t(i)) dB²_t(i)
//!
//! with corr(dB¹(i), dB²(i)) = ρ, plus total-mass, cross-variation, and
//! moment trackers.
//!
//! The scheme is explicit Euler with post-step clamping at zero and a
//! clamped product under the square root. The diffusion coefficient is
//! evaluated once per site and reused for both equations, which makes the
//! two degenerations exact in floating point: at ρ = −1 with u₀+v₀ ≡ 1 the
//! noise terms cancel site-wise, and at ρ = 1 with u₀ = v₀ the two fields
//! stay bitwise identical.

use crate::error::{Result, SimError};
use crate::migration::MigrationKernel;
use crate::noise::NoiseStream;
use crate::stats::{try_parallel_chunked, MeanSe, Merge};

/// Relative slack when matching times to the step grid.
const GRID_TOL: f64 = 1e-9;
/// Warn threshold for dt · max_i |a(i,i)|.
pub const MIGRATION_GUARD: f64 = 0.2;
/// Warn threshold for dt · γ · max_i u(i)v(i).
pub const DIFFUSION_GUARD: f64 = 0.1;

/// Branching rate: finite (≥ 0; the zero limit freezes the diffusion term)
/// or infinite (handled by the infinite-rate scheme, rejected here).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Gamma {
    Finite(f64),
    Infinite,
}

impl Gamma {
    pub fn finite(g: f64) -> Result<Self> {
        if !(g.is_finite() && g >= 0.0) {
            return Err(SimError::domain(format!(
                "gamma {g} must be finite and ≥ 0 (use Gamma::Infinite for the limit model)"
            )));
        }
        Ok(Gamma::Finite(g))
    }

    pub fn value(&self) -> Option<f64> {
        match self {
            Gamma::Finite(g) => Some(*g),
            Gamma::Infinite => None,
        }
    }

    pub fn is_infinite(&self) -> bool {
        matches!(self, Gamma::Infinite)
    }
}

impl std::fmt::Display for Gamma {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Gamma::Finite(g) => write!(f, "{g}"),
            Gamma::Infinite => write!(f, "inf"),
        }
    }
}

/// A nonnegative field pair (u, v) over the site set.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldPair {
    u: Vec<f64>,
    v: Vec<f64>,
}

impl FieldPair {
    pub fn new(u: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if u.len() != v.len() {
            return Err(SimError::precondition("u and v differ in length"));
        }
        for (i, x) in u.iter().chain(v.iter()).enumerate() {
            if !(x.is_finite() && *x >= 0.0) {
                return Err(SimError::domain(format!(
                    "field value {x} at flat index {i} must be finite and ≥ 0"
                )));
            }
        }
        Ok(FieldPair { u, v })
    }

    /// u₀ = v₀ ≡ 1.
    pub fn homogeneous(n: usize) -> Self {
        FieldPair {
            u: vec![1.0; n],
            v: vec![1.0; n],
        }
    }

    /// u₀ = 𝟙_k, v₀ = 𝟙_l.
    pub fn localized(n: usize, k: usize, l: usize) -> Result<Self> {
        if k >= n {
            return Err(SimError::SiteIndex { index: k, n });
        }
        if l >= n {
            return Err(SimError::SiteIndex { index: l, n });
        }
        let mut u = vec![0.0; n];
        let mut v = vec![0.0; n];
        u[k] = 1.0;
        v[l] = 1.0;
        Ok(FieldPair { u, v })
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

    /// True iff u(i)·v(i) = 0 exactly at every site (the state space of the
    /// infinite-rate limit).
    pub fn e_valued(&self) -> bool {
        self.u.iter().zip(&self.v).all(|(a, b)| a * b == 0.0)
    }

    pub fn mass_u(&self) -> f64 {
        self.u.iter().sum()
    }

    pub fn mass_v(&self) -> f64 {
        self.v.iter().sum()
    }
}

/// Full parameter set for one ensemble run.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub rho: f64,
    pub gamma: Gamma,
    pub dt: f64,
    pub horizon: f64,
    pub replicas: u64,
    pub seed: u64,
    /// Output grid; every entry must sit on the step grid.
    pub record_times: Vec<f64>,
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho.is_finite() && (-1.0..=1.0).contains(&self.rho)) {
            return Err(SimError::domain(format!(
                "rho {} must lie in [-1, 1]",
                self.rho
            )));
        }
        if let Gamma::Finite(g) = self.gamma {
            if !(g.is_finite() && g >= 0.0) {
                return Err(SimError::domain(format!("gamma {g} must be finite and ≥ 0")));
            }
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(SimError::domain(format!(
                "dt {} must be positive and finite",
                self.dt
            )));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(SimError::domain(format!(
                "horizon {} must be positive and finite",
                self.horizon
            )));
        }
        if self.replicas == 0 {
            return Err(SimError::domain("replicas must be ≥ 1"));
        }
        self.n_steps()?;
        self.record_steps()?;
        Ok(())
    }

    fn grid_index(&self, t: f64, what: &str) -> Result<u64> {
        let k = (t / self.dt).round();
        if (k * self.dt - t).abs() > GRID_TOL * t.abs().max(1.0) {
            return Err(SimError::domain(format!(
                "{what} {t} is not on the step grid (dt = {})",
                self.dt
            )));
        }
        Ok(k as u64)
    }

    pub fn n_steps(&self) -> Result<u64> {
        let n = self.grid_index(self.horizon, "horizon")?;
        if n == 0 {
            return Err(SimError::domain("horizon must be at least one step"));
        }
        Ok(n)
    }

    /// Step indices of the record times; strictly increasing, ≤ n_steps.
    pub fn record_steps(&self) -> Result<Vec<u64>> {
        let n = self.grid_index(self.horizon, "horizon")?;
        let mut steps = Vec::with_capacity(self.record_times.len());
        for &t in &self.record_times {
            if !(t.is_finite() && t >= 0.0) {
                return Err(SimError::domain(format!(
                    "record time {t} must be finite and ≥ 0"
                )));
            }
            let k = self.grid_index(t, "record time")?;
            if k > n {
                return Err(SimError::domain(format!(
                    "record time {t} lies beyond the horizon {}",
                    self.horizon
                )));
            }
            if let Some(&last) = steps.last() {
                if k <= last {
                    return Err(SimError::domain(
                        "record times must be strictly increasing",
                    ));
                }
            }
            steps.push(k);
        }
        Ok(steps)
    }
}

/// Per-replica mass functionals at one record time. All cumulative columns
/// run from time 0 on the step grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MassRecord {
    pub time: f64,
    /// ⟨u_t, 1⟩.
    pub mass_u: f64,
    /// ⟨v_t, 1⟩.
    pub mass_v: f64,
    /// M_t = ⟨u_t,1⟩·⟨v_t,1⟩.
    pub mass_product: f64,
    /// Trapezoid ∫₀^t ⟨u_s, v_s⟩ ds.
    pub int_uv: f64,
    /// Realized quadratic variation Σ (Δ⟨u,1⟩)² of the u-mass path.
    pub qv_u: f64,
    /// Realized quadratic variation of the v-mass path.
    pub qv_v: f64,
    /// Realized cross-variation Σ Δ⟨u,1⟩·Δ⟨v,1⟩.
    pub cross_variation: f64,
}

impl MassRecord {
    /// The empirical time change A_t: the realized quadratic variation of
    /// the u-mass martingale (its compensator is γ∫₀^t⟨u_s,v_s⟩ds).
    pub fn time_change(&self) -> f64 {
        self.qv_u
    }
}

/// Ensemble statistics of the mass functionals at one record time.
#[derive(Debug, Clone)]
pub struct MassStats {
    pub time: f64,
    pub mass_u: MeanSe,
    pub mass_v: MeanSe,
    pub mass_product: MeanSe,
    pub int_uv: MeanSe,
    pub qv_u: MeanSe,
    pub qv_v: MeanSe,
    pub cross_variation: MeanSe,
}

impl MassStats {
    fn new(time: f64) -> Self {
        MassStats {
            time,
            mass_u: MeanSe::default(),
            mass_v: MeanSe::default(),
            mass_product: MeanSe::default(),
            int_uv: MeanSe::default(),
            qv_u: MeanSe::default(),
            qv_v: MeanSe::default(),
            cross_variation: MeanSe::default(),
        }
    }

    fn push(&mut self, r: &MassRecord) {
        self.mass_u.push(r.mass_u);
        self.mass_v.push(r.mass_v);
        self.mass_product.push(r.mass_product);
        self.int_uv.push(r.int_uv);
        self.qv_u.push(r.qv_u);
        self.qv_v.push(r.qv_v);
        self.cross_variation.push(r.cross_variation);
    }

    fn merge(&mut self, other: MassStats) {
        self.mass_u.merge(other.mass_u);
        self.mass_v.merge(other.mass_v);
        self.mass_product.merge(other.mass_product);
        self.int_uv.merge(other.int_uv);
        self.qv_u.merge(other.qv_u);
        self.qv_v.merge(other.qv_v);
        self.cross_variation.merge(other.cross_variation);
    }
}

/// Step-control diagnostics aggregated over the whole ensemble. The run is
/// not aborted when a guard trips; callers decide how loudly to warn.
#[derive(Debug, Clone, Copy, Default)]
pub struct StabilityReport {
    /// dt · max_i |a(i,i)|; explicit heat flow wants this well below 1.
    pub dt_times_max_rate: f64,
    /// dt · max_rate exceeded 0.2.
    pub migration_guard_tripped: bool,
    /// Largest dt · γ · u(i)v(i) seen at any site, step, replica.
    pub max_dt_gamma_uv: f64,
    /// Number of steps (summed over replicas) where that product exceeded
    /// 0.1.
    pub diffusion_guard_steps: u64,
}

/// What `simulate_ensemble` tracks beyond the mass functionals.
#[derive(Debug, Clone, Default)]
pub struct EnsembleOptions {
    /// Site pairs (a, b) whose product u_t(a)·v_t(b) is accumulated at every
    /// record time.
    pub tracked_pairs: Vec<(usize, usize)>,
    /// Keep every replica's MassRecord rows (memory: replicas × record
    /// times).
    pub store_mass_paths: bool,
    /// Keep per-replica sup_{steps ≤ horizon} (⟨u_t,1⟩ + ⟨v_t,1⟩) for moment
    /// probes.
    pub track_sup_mass: bool,
}

/// Ensemble output: per-record-time statistics, optional per-replica rows,
/// and stability diagnostics. Bitwise deterministic given (seed, params) —
/// replicas reduce in fixed chunk order regardless of thread count.
#[derive(Debug, Clone)]
pub struct EnsembleReport {
    pub times: Vec<f64>,
    pub mass_stats: Vec<MassStats>,
    /// Ensemble mean of u_t(i): indexed [record time][site].
    pub site_mean_u: Vec<Vec<MeanSe>>,
    /// Ensemble mean of v_t(i): indexed [record time][site].
    pub site_mean_v: Vec<Vec<MeanSe>>,
    pub tracked_pairs: Vec<(usize, usize)>,
    /// Ensemble mean of u_t(a)·v_t(b): indexed [record time][pair].
    pub pair_moments: Vec<Vec<MeanSe>>,
    /// Per-replica mass rows, indexed [replica][record time].
    pub mass_paths: Option<Vec<Vec<MassRecord>>>,
    /// Per-replica sup of ⟨u,1⟩ + ⟨v,1⟩ over the step grid (including t = 0).
    pub sup_total_mass: Option<Vec<f64>>,
    pub stability: StabilityReport,
    pub replicas: u64,
}

impl EnsembleReport {
    fn time_index(&self, t: f64) -> Result<usize> {
        self.times
            .iter()
            .position(|&s| (s - t).abs() <= GRID_TOL * t.abs().max(1.0))
            .ok_or_else(|| SimError::domain(format!("time {t} is not on the record grid")))
    }

    pub fn mass_stats_at(&self, t: f64) -> Result<&MassStats> {
        Ok(&self.mass_stats[self.time_index(t)?])
    }

    /// Ensemble mean ± SE of u_t(a)·v_t(b); (a, b) must have been tracked.
    pub fn second_moment_estimate(&self, a: usize, b: usize, t: f64) -> Result<MeanSe> {
        let ti = self.time_index(t)?;
        let pi = self
            .tracked_pairs
            .iter()
            .position(|&p| p == (a, b))
            .ok_or_else(|| SimError::domain(format!("pair ({a}, {b}) was not tracked")))?;
        Ok(self.pair_moments[ti][pi])
    }
}

/// Realized vs. predicted variation of the mass paths at one record time.
/// Ratios are NaN when the predicted side is numerically zero.
#[derive(Debug, Clone)]
pub struct VariationRow {
    pub time: f64,
    /// Ensemble mean of Σ Δ⟨u,1⟩Δ⟨v,1⟩.
    pub realized_cross: MeanSe,
    /// ργ · E[∫₀^t⟨u,v⟩ds].
    pub predicted_cross: f64,
    pub predicted_cross_se: f64,
    pub cross_ratio: f64,
    pub realized_qv_u: MeanSe,
    pub realized_qv_v: MeanSe,
    /// γ · E[∫₀^t⟨u,v⟩ds], the common compensator of both mass paths.
    pub predicted_qv: f64,
    pub predicted_qv_se: f64,
    pub qv_u_ratio: f64,
    pub qv_v_ratio: f64,
}

/// Compares realized quadratic/cross-variation of the mass paths with the
/// Itô predictions ργ∫⟨u,v⟩ds and γ∫⟨u,v⟩ds.
pub fn cross_variation_report(report: &EnsembleReport, rho: f64, gamma: f64) -> Vec<VariationRow> {
    report
        .mass_stats
        .iter()
        .map(|s| {
            let int_mean = s.int_uv.mean();
            let int_se = s.int_uv.se();
            let predicted_cross = rho * gamma * int_mean;
            let predicted_qv = gamma * int_mean;
            let ratio = |real: f64, pred: f64| {
                if pred.abs() > 0.0 {
                    real / pred
                } else {
                    f64::NAN
                }
            };
            VariationRow {
                time: s.time,
                realized_cross: s.cross_variation,
                predicted_cross,
                predicted_cross_se: (rho * gamma).abs() * int_se,
                cross_ratio: ratio(s.cross_variation.mean(), predicted_cross),
                realized_qv_u: s.qv_u,
                realized_qv_v: s.qv_v,
                predicted_qv,
                predicted_qv_se: gamma.abs() * int_se,
                qv_u_ratio: ratio(s.qv_u.mean(), predicted_qv),
                qv_v_ratio: ratio(s.qv_v.mean(), predicted_qv),
            }
        })
        .collect()
}

/// One explicit Euler step scan: the largest site product u·v and the first
/// non-finite update, if any.
struct StepScan {
    max_uv: f64,
    bad: Option<(usize, f64)>,
}

/// Writes the clamped Euler update into (out_u, out_v). `au`/`av` carry the
/// precomputed generator actions 𝒜u, 𝒜v.
#[allow(clippy::too_many_arguments)]
fn em_update(
    u: &[f64],
    v: &[f64],
    au: &[f64],
    av: &[f64],
    gamma: f64,
    dt: f64,
    db1: &[f64],
    db2: &[f64],
    out_u: &mut [f64],
    out_v: &mut [f64],
) -> StepScan {
    let mut scan = StepScan {
        max_uv: 0.0,
        bad: None,
    };
    for i in 0..u.len() {
        let uv = (u[i] * v[i]).max(0.0);
        if uv > scan.max_uv {
            scan.max_uv = uv;
        }
        // One coefficient for both equations; independent roundings would
        // break the exact ρ = ±1 degenerations.
        let coeff = (gamma * uv).sqrt();
        let nu = u[i] + au[i] * dt + coeff * db1[i];
        let nv = v[i] + av[i] * dt + coeff * db2[i];
        if !(nu.is_finite() && nv.is_finite()) && scan.bad.is_none() {
            scan.bad = Some((i, if nu.is_finite() { nv } else { nu }));
        }
        out_u[i] = if nu < 0.0 { 0.0 } else { nu };
        out_v[i] = if nv < 0.0 { 0.0 } else { nv };
    }
    scan
}

/// One explicit Euler–Maruyama step:
/// u'(i) = max(0, u(i) + (𝒜u)(i)·dt + √(γ·max(0, u(i)v(i)))·dB¹(i)),
/// and the same update for v with dB².
///
/// Requires a finite branching rate; increments must be sampled for this
/// dt. Non-finite updates surface as a blowup error carrying the site (the
/// caller contributes replica and step context).
pub fn em_step(
    state: &FieldPair,
    kernel: &MigrationKernel,
    params: &ModelParams,
    db1: &[f64],
    db2: &[f64],
) -> Result<FieldPair> {
    let gamma = params
        .gamma
        .value()
        .ok_or_else(|| SimError::precondition("em_step requires a finite gamma"))?;
    let n = state.len();
    if kernel.n() != n || db1.len() != n || db2.len() != n {
        return Err(SimError::precondition(
            "state, kernel, and increments must agree on the site count",
        ));
    }
    let mut au = vec![0.0; n];
    let mut av = vec![0.0; n];
    kernel.apply(&state.u, &mut au);
    kernel.apply(&state.v, &mut av);
    let mut out_u = vec![0.0; n];
    let mut out_v = vec![0.0; n];
    let scan = em_update(
        &state.u, &state.v, &au, &av, gamma, params.dt, db1, db2, &mut out_u, &mut out_v,
    );
    if let Some((site, value)) = scan.bad {
        return Err(SimError::Blowup {
            replica: 0,
            step: 0,
            site,
            value,
        });
    }
    Ok(FieldPair { u: out_u, v: out_v })
}

/// Running per-replica mass functionals carried along the step loop.
#[derive(Debug, Clone, Copy)]
pub(crate) struct MassTallies {
    pub(crate) mass_u: f64,
    pub(crate) mass_v: f64,
    pub(crate) int_uv: f64,
    pub(crate) qv_u: f64,
    pub(crate) qv_v: f64,
    pub(crate) cross: f64,
}

impl MassTallies {
    pub(crate) fn start(u: &[f64], v: &[f64]) -> Self {
        MassTallies {
            mass_u: u.iter().sum(),
            mass_v: v.iter().sum(),
            int_uv: 0.0,
            qv_u: 0.0,
            qv_v: 0.0,
            cross: 0.0,
        }
    }

    /// Accumulates the quadratic and cross variation of the mass jump to
    /// (new_mass_u, new_mass_v) and moves the masses forward.
    pub(crate) fn advance_masses(&mut self, new_mass_u: f64, new_mass_v: f64) {
        let dm_u = new_mass_u - self.mass_u;
        let dm_v = new_mass_v - self.mass_v;
        self.qv_u += dm_u * dm_u;
        self.qv_v += dm_v * dm_v;
        self.cross += dm_u * dm_v;
        self.mass_u = new_mass_u;
        self.mass_v = new_mass_v;
    }
}

/// Per-chunk accumulator for the parallel ensemble reduction. Shared by the
/// finite-rate Euler ensemble and the infinite-rate Trotter ensemble.
pub(crate) struct ReplicaAccum {
    mass: Vec<MassStats>,
    site_u: Vec<Vec<MeanSe>>,
    site_v: Vec<Vec<MeanSe>>,
    pairs: Vec<Vec<MeanSe>>,
    paths: Option<Vec<Vec<MassRecord>>>,
    sups: Option<Vec<f64>>,
    max_dt_gamma_uv: f64,
    diffusion_guard_steps: u64,
}

impl ReplicaAccum {
    pub(crate) fn new(
        times: &[f64],
        n_sites: usize,
        n_pairs: usize,
        opts: &EnsembleOptions,
    ) -> Self {
        ReplicaAccum {
            mass: times.iter().map(|&t| MassStats::new(t)).collect(),
            site_u: vec![vec![MeanSe::default(); n_sites]; times.len()],
            site_v: vec![vec![MeanSe::default(); n_sites]; times.len()],
            pairs: vec![vec![MeanSe::default(); n_pairs]; times.len()],
            paths: opts.store_mass_paths.then(Vec::new),
            sups: opts.track_sup_mass.then(Vec::new),
            max_dt_gamma_uv: 0.0,
            diffusion_guard_steps: 0,
        }
    }

    pub(crate) fn note_diffusion_guard(&mut self, dt_gamma_uv: f64, tripped: bool) {
        if dt_gamma_uv > self.max_dt_gamma_uv {
            self.max_dt_gamma_uv = dt_gamma_uv;
        }
        if tripped {
            self.diffusion_guard_steps += 1;
        }
    }

    /// Records the state into every record slot whose step index equals
    /// `step`, advancing `rec_idx` past them.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn observe(
        &mut self,
        record_steps: &[u64],
        times: &[f64],
        tracked_pairs: &[(usize, usize)],
        step: u64,
        rec_idx: &mut usize,
        u: &[f64],
        v: &[f64],
        tallies: &MassTallies,
        path: &mut Vec<MassRecord>,
    ) {
        while *rec_idx < record_steps.len() && record_steps[*rec_idx] == step {
            let rec = MassRecord {
                time: times[*rec_idx],
                mass_u: tallies.mass_u,
                mass_v: tallies.mass_v,
                mass_product: tallies.mass_u * tallies.mass_v,
                int_uv: tallies.int_uv,
                qv_u: tallies.qv_u,
                qv_v: tallies.qv_v,
                cross_variation: tallies.cross,
            };
            self.mass[*rec_idx].push(&rec);
            for (i, stat) in self.site_u[*rec_idx].iter_mut().enumerate() {
                stat.push(u[i]);
            }
            for (i, stat) in self.site_v[*rec_idx].iter_mut().enumerate() {
                stat.push(v[i]);
            }
            for (p, &(a, b)) in tracked_pairs.iter().enumerate() {
                self.pairs[*rec_idx][p].push(u[a] * v[b]);
            }
            if self.paths.is_some() {
                path.push(rec);
            }
            *rec_idx += 1;
        }
    }

    /// Banks the per-replica rows once a replica's loop finishes.
    pub(crate) fn finish_replica(&mut self, path: Vec<MassRecord>, sup_mass: f64) {
        if let Some(paths) = self.paths.as_mut() {
            paths.push(path);
        }
        if let Some(sups) = self.sups.as_mut() {
            sups.push(sup_mass);
        }
    }

    /// Assembles the ensemble report around the reduced statistics.
    pub(crate) fn into_report(
        self,
        times: Vec<f64>,
        tracked_pairs: Vec<(usize, usize)>,
        dt_times_max_rate: f64,
        replicas: u64,
    ) -> EnsembleReport {
        EnsembleReport {
            times,
            mass_stats: self.mass,
            site_mean_u: self.site_u,
            site_mean_v: self.site_v,
            tracked_pairs,
            pair_moments: self.pairs,
            mass_paths: self.paths,
            sup_total_mass: self.sups,
            stability: StabilityReport {
                dt_times_max_rate,
                migration_guard_tripped: dt_times_max_rate > MIGRATION_GUARD,
                max_dt_gamma_uv: self.max_dt_gamma_uv,
                diffusion_guard_steps: self.diffusion_guard_steps,
            },
            replicas,
        }
    }
}

impl Merge for ReplicaAccum {
    fn merge(&mut self, other: Self) {
        for (a, b) in self.mass.iter_mut().zip(other.mass) {
            a.merge(b);
        }
        for (a, b) in self.site_u.iter_mut().zip(other.site_u) {
            Merge::merge(a, b);
        }
        for (a, b) in self.site_v.iter_mut().zip(other.site_v) {
            Merge::merge(a, b);
        }
        for (a, b) in self.pairs.iter_mut().zip(other.pairs) {
            Merge::merge(a, b);
        }
        if let (Some(a), Some(b)) = (self.paths.as_mut(), other.paths) {
            a.extend(b);
        }
        if let (Some(a), Some(b)) = (self.sups.as_mut(), other.sups) {
            a.extend(b);
        }
        self.max_dt_gamma_uv = self.max_dt_gamma_uv.max(other.max_dt_gamma_uv);
        self.diffusion_guard_steps += other.diffusion_guard_steps;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Runs `params.replicas` independent Euler trajectories from `init` and
/// aggregates the requested functionals. Deterministic given the seed: the
/// result is bitwise identical at any thread count.
pub fn simulate_ensemble(
    kernel: &MigrationKernel,
    params: &ModelParams,
    init: &FieldPair,
    opts: &EnsembleOptions,
) -> Result<EnsembleReport> {
    params.validate()?;
    let gamma = params
        .gamma
        .value()
        .ok_or_else(|| SimError::precondition("simulate_ensemble requires a finite gamma"))?;
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

    let acc = try_parallel_chunked(
        params.replicas,
        || ReplicaAccum::new(&times, n, opts.tracked_pairs.len(), opts),
        |acc: &mut ReplicaAccum, replica| -> Result<()> {
            let mut noise = NoiseStream::new(params.seed, replica, params.rho)?;
            let mut u = init.u.clone();
            let mut v = init.v.clone();
            let mut au = vec![0.0; n];
            let mut av = vec![0.0; n];
            let mut db1 = vec![0.0; n];
            let mut db2 = vec![0.0; n];
            let mut next_u = vec![0.0; n];
            let mut next_v = vec![0.0; n];

            let mut tallies = MassTallies::start(&u, &v);
            let mut inner = dot(&u, &v);
            let mut sup_mass = tallies.mass_u + tallies.mass_v;
            let mut path: Vec<MassRecord> = Vec::new();

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
                noise.fill_increments(dt, &mut db1, &mut db2)?;
                kernel.apply(&u, &mut au);
                kernel.apply(&v, &mut av);
                let scan = em_update(
                    &u, &v, &au, &av, gamma, dt, &db1, &db2, &mut next_u, &mut next_v,
                );
                if let Some((site, value)) = scan.bad {
                    return Err(SimError::Blowup {
                        replica,
                        step,
                        site,
                        value,
                    });
                }
                std::mem::swap(&mut u, &mut next_u);
                std::mem::swap(&mut v, &mut next_v);

                let guard_product = dt * gamma * scan.max_uv;
                acc.note_diffusion_guard(guard_product, guard_product > DIFFUSION_GUARD);

                tallies.advance_masses(u.iter().sum(), v.iter().sum());
                if tallies.mass_u + tallies.mass_v > sup_mass {
                    sup_mass = tallies.mass_u + tallies.mass_v;
                }
                let new_inner = dot(&u, &v);
                tallies.int_uv += 0.5 * dt * (inner + new_inner);
                inner = new_inner;

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
