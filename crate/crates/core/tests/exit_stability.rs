//! Discretization stability of the exit-time tail fit: halving the walk
//! step must leave the fitted exponent essentially unchanged and inside
//! the theoretical band around π/(2·arccos(−ρ)).

use symbranch_core::quadrant::{
    critical_moment_exponent, exponent_report, sample_exit_ensemble,
};

#[test]
fn tail_exponent_is_stable_under_step_halving() {
    let rho = -0.5;
    let target = critical_moment_exponent(rho).unwrap();
    let mut fits = Vec::new();
    for dt in [1e-4, 5e-5] {
        let ens = sample_exit_ensemble(rho, (1.0, 1.0), dt, 400.0, 10_000, 2026).unwrap();
        let report = exponent_report(&ens).unwrap();
        assert!(
            (report.p_star_fitted - target).abs() < 0.15,
            "dt={dt}: fitted {} vs {target}",
            report.p_star_fitted
        );
        fits.push(report.p_star_fitted);
    }
    let shift = (fits[0] - fits[1]).abs();
    assert!(shift < 0.05, "halving dt moved the fit by {shift}");
}
