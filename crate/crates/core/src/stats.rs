//! Ensemble statistics with a deterministic parallel reduction, plus the
//! small estimators (Kolmogorov–Smirnov, log-log tail slope) used by the
//! exit-time experiments.

use rayon::prelude::*;

/// Streaming mean / standard error accumulator (Welford).
#[derive(Debug, Clone, Copy, Default)]
pub struct MeanSe {
    n: u64,
    mean: f64,
    m2: f64,
}

impl MeanSe {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    /// Combines two accumulators (Chan et al.). The result depends only on
    /// the operand order, so a fixed merge order gives bit-stable output.
    pub fn merge(&mut self, other: MeanSe) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = other;
            return;
        }
        let n1 = self.n as f64;
        let n2 = other.n as f64;
        let d = other.mean - self.mean;
        let n = n1 + n2;
        self.mean += d * n2 / n;
        self.m2 += other.m2 + d * d * n1 * n2 / n;
        self.n += other.n;
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance; 0 for fewer than two observations.
    pub fn var(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    pub fn sd(&self) -> f64 {
        self.var().sqrt()
    }

    /// Standard error of the mean.
    pub fn se(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            (self.var() / self.n as f64).sqrt()
        }
    }
}

/// Replicas are processed in fixed-size chunks; each chunk accumulates
/// sequentially and the per-chunk partials are merged in chunk order. The
/// result is therefore independent of how rayon schedules the chunks —
/// identical seeds give byte-identical statistics at any thread count.
pub const REDUCTION_CHUNK: u64 = 256;

pub fn parallel_chunked<A, G, F>(replicas: u64, init: G, per_replica: F) -> A
where
    A: Send,
    G: Fn() -> A + Sync,
    F: Fn(&mut A, u64) + Sync,
    A: Merge,
{
    let n_chunks = replicas.div_ceil(REDUCTION_CHUNK);
    let parts: Vec<A> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * REDUCTION_CHUNK;
            let hi = (lo + REDUCTION_CHUNK).min(replicas);
            let mut acc = init();
            for r in lo..hi {
                per_replica(&mut acc, r);
            }
            acc
        })
        .collect();
    let mut iter = parts.into_iter();
    let mut out = iter.next().unwrap_or_else(init);
    for p in iter {
        out.merge(p);
    }
    out
}

/// Fallible variant of `parallel_chunked`: replicas still reduce in fixed
/// chunk order, and the error from the lowest-numbered failing replica
/// wins, so failure reporting is as deterministic as success.
pub fn try_parallel_chunked<A, G, F, E>(replicas: u64, init: G, per_replica: F) -> Result<A, E>
where
    A: Send + Merge,
    E: Send,
    G: Fn() -> A + Sync,
    F: Fn(&mut A, u64) -> Result<(), E> + Sync,
{
    let n_chunks = replicas.div_ceil(REDUCTION_CHUNK);
    let parts: Vec<Result<A, E>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * REDUCTION_CHUNK;
            let hi = (lo + REDUCTION_CHUNK).min(replicas);
            let mut acc = init();
            for r in lo..hi {
                per_replica(&mut acc, r)?;
            }
            Ok(acc)
        })
        .collect();
    let mut out: Option<A> = None;
    for p in parts {
        let p = p?;
        match &mut out {
            Some(acc) => acc.merge(p),
            None => out = Some(p),
        }
    }
    Ok(out.unwrap_or_else(init))
}

/// Order-sensitive combination of per-chunk partial results.
pub trait Merge {
    fn merge(&mut self, other: Self);
}

impl Merge for MeanSe {
    fn merge(&mut self, other: Self) {
        MeanSe::merge(self, other);
    }
}

impl Merge for Vec<MeanSe> {
    fn merge(&mut self, other: Self) {
        assert_eq!(self.len(), other.len());
        for (a, b) in self.iter_mut().zip(other) {
            a.merge(b);
        }
    }
}

/// Two-sample Kolmogorov–Smirnov test with the asymptotic p-value.
#[derive(Debug, Clone, Copy)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

pub fn two_sample_ks(a: &[f64], b: &[f64]) -> KsResult {
    assert!(!a.is_empty() && !b.is_empty());
    let mut xs: Vec<f64> = a.to_vec();
    let mut ys: Vec<f64> = b.to_vec();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let (n, m) = (xs.len(), ys.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < n && j < m {
        let x = xs[i];
        let y = ys[j];
        let t = x.min(y);
        while i < n && xs[i] <= t {
            i += 1;
        }
        while j < m && ys[j] <= t {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let en = ((n * m) as f64 / (n + m) as f64).sqrt();
    let lambda = (en + 0.12 + 0.11 / en) * d;
    KsResult {
        statistic: d,
        p_value: kolmogorov_survival(lambda),
    }
}

/// Q_KS(λ) = 2 Σ_{k≥1} (−1)^{k−1} exp(−2 k² λ²), clamped to [0,1].
fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda < 1e-8 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=100 {
        let term = (-2.0 * (k as f64).powi(2) * lambda * lambda).exp();
        sum += sign * term;
        if term < 1e-16 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Least-squares fit of log empirical survival against log value over a
/// rank-fraction window.
#[derive(Debug, Clone, Copy)]
pub struct TailFit {
    /// Fitted slope; for a power-law tail P(τ > x) ~ c·x^(−p) this estimates −p.
    pub slope: f64,
    /// Standard error of the slope from the regression residuals. This treats
    /// the windowed points as independent, which understates the true
    /// sampling error of correlated order statistics; it is a reproducible
    /// width, not a calibrated confidence level.
    pub se: f64,
    /// Number of points entering the regression.
    pub points: usize,
}

/// Fits log survival vs log value on the sorted uncensored sample.
///
/// `total` is the full trial count including right-censored observations;
/// censored values exceed every entry of `sorted`, so the empirical survival
/// at the (i+1)-th smallest uncensored value is (total − (i+1)) / total.
/// `lo_frac`/`hi_frac` select rank fractions (i+1)/total in [lo, hi]; the top
/// extreme is left out because the highest order statistics (and any
/// censoring cap) carry most of the noise.
pub fn log_log_survival_slope(sorted: &[f64], total: u64, lo_frac: f64, hi_frac: f64) -> TailFit {
    assert!(sorted.len() >= 16, "tail fit needs a real sample");
    assert!(sorted.len() as u64 <= total);
    assert!(0.0 < lo_frac && lo_frac < hi_frac && hi_frac < 1.0);
    let n = total as f64;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (i, &tau) in sorted.iter().enumerate() {
        let rank = (i + 1) as f64 / n;
        if rank < lo_frac || rank > hi_frac || tau <= 0.0 {
            continue;
        }
        let surv = 1.0 - rank;
        if surv <= 0.0 {
            continue;
        }
        xs.push(tau.ln());
        ys.push(surv.ln());
    }
    let k = xs.len();
    assert!(k >= 8, "tail window selected too few points");
    let kf = k as f64;
    let mx = xs.iter().sum::<f64>() / kf;
    let my = ys.iter().sum::<f64>() / kf;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    let slope = sxy / sxx;
    let mut ss_res = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        let r = (y - my) - slope * (x - mx);
        ss_res += r * r;
    }
    let se = (ss_res / (kf - 2.0) / sxx).sqrt();
    TailFit { slope, se, points: k }
}
