//! Criticality analysis of the quadratic iteration: the closed-form
//! critical coupling line (K = 2), fixed points and their stability,
//! empirical sub/supercritical classification by bisection, the critical
//! slowing-down scaling experiment, the supercritical growth constant ρ(b)
//! carried in log space, and the least-squares fits used by the sweeps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::OffspringDist;
use crate::recursion::{df_map, Blocks, LogRecursion, Recursion};

/// Trajectories whose `v` exceeds this are classified divergent: bounded
/// trajectories stay within a few units of 1, while unbounded ones grow
/// doubly exponentially once they escape.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;
/// Step-to-step displacement below which a trajectory counts as converged.
pub const CONVERGENCE_DISPLACEMENT: f64 = 1e-13;
/// Default relative tolerance on the growth-constant sequence.
pub const RHO_TOL_DEFAULT: f64 = 1e-9;
/// Iteration cap for the growth-constant estimate.
pub const RHO_N_MAX: usize = 1_000_000;

// ─────────────────────── closed-form critical line ───────────────────────

/// A point of the critical coupling line for `K = 2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticalPoint {
    pub p0: f64,
    pub p2: f64,
    pub beta_c: f64,
    pub b_c: f64,
}

/// Critical coupling for a `K = 2` offspring law `(p₀, 1-p₀-p₂, p₂)`:
///
/// ```text
/// b_c = 1 + (p₀+p₂)/(4 p₀ p₂) − 1/(p₀+p₂)
/// ```
///
/// the coupling at which the fixed-point quadratic acquires a double root.
/// Requires `p₂ > 0` and `p₀ ≥ p₂`; for `p₀ < p₂` the interaction-free
/// process is already supercritical and no finite critical coupling exists.
pub fn beta_c(p0: f64, p2: f64) -> Result<CriticalPoint> {
    if !(p0.is_finite() && p2.is_finite()) || p0 <= 0.0 || p2 < 0.0 || p0 + p2 > 1.0 + 1e-12 {
        return Err(Error::InvalidParams(format!(
            "(p0, p2) = ({p0}, {p2}) lies outside the probability triangle"
        )));
    }
    if p2 == 0.0 {
        return Err(Error::InvalidParams(
            "p2 = 0: multi-offspring pairs never occur and the critical coupling diverges".into(),
        ));
    }
    if p2 > p0 {
        return Err(Error::InvalidParams(format!(
            "p2 = {p2} exceeds p0 = {p0}: the interaction-free process is supercritical, \
             so no finite critical coupling exists"
        )));
    }
    let s = p0 + p2;
    let b_c = 1.0 + s / (4.0 * p0 * p2) - 1.0 / s;
    Ok(CriticalPoint {
        p0,
        p2,
        beta_c: b_c.ln(),
        b_c,
    })
}

// ───────────────────────────── fixed points ─────────────────────────────

/// Fixed point of the iteration reached from `(1,1)`, when one exists.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedPointResult {
    pub exists: bool,
    pub u: f64,
    pub v: f64,
    /// True when the fixed-point quadratic has a double root (criticality).
    pub double_root: bool,
    /// Largest eigenvalue modulus of the Jacobian at the fixed point.
    pub spectral_radius: f64,
    /// Why no fixed point is reached, when `exists` is false.
    pub reason: Option<String>,
}

/// Solve for the fixed point (`K = 2`, `b ≥ 1`).  Eliminating `u` leaves
/// the quadratic `A v² − v + C = 0` with `A = p₂(b−1) + p₂/(p₀+p₂)` and
/// `C = p₀/(p₀+p₂)`; the trajectory from `(1,1)` reaches the smaller root,
/// provided that root lies at or above 1.  The smaller root is computed in
/// the cancellation-free form `2C/(1+√D)`.
pub fn fixed_point(dist: &OffspringDist, b: f64) -> Result<FixedPointResult> {
    if dist.k_max() != 2 {
        return Err(Error::Unsupported(
            "closed-form fixed points are derived for K = 2 only".into(),
        ));
    }
    if !(b.is_finite() && b >= 1.0) {
        return Err(Error::InvalidParams(format!(
            "fixed-point analysis requires b ≥ 1, got {b}"
        )));
    }
    let (p0, p2) = (dist.prob(0), dist.prob(2));
    let s = p0 + p2;
    let a = p2 * (b - 1.0) + p2 / s;
    let c = p0 / s;
    let disc = 1.0 - 4.0 * a * c;

    let missing = |reason: String| FixedPointResult {
        exists: false,
        u: f64::NAN,
        v: f64::NAN,
        double_root: false,
        spectral_radius: f64::NAN,
        reason: Some(reason),
    };

    if disc < 0.0 {
        return Ok(missing(format!(
            "no real fixed point: discriminant {disc:.3e} < 0, coupling above critical"
        )));
    }
    let sq = disc.sqrt();
    let v_small = 2.0 * c / (1.0 + sq);
    let v_large = (1.0 + sq) / (2.0 * a);
    let v = if v_small >= 1.0 - 1e-12 {
        v_small
    } else if b == 1.0 && v_large >= 1.0 - 1e-12 {
        // without interaction the iteration fixes (1,1) even when the
        // process is supercritical; 1 is then the larger root
        v_large
    } else if p0 < p2 && b > 1.0 {
        return Ok(missing(
            "supercritical: both roots lie below 1, the trajectory from (1,1) diverges".into(),
        ));
    } else {
        return Ok(missing("no root at or above 1".into()));
    };
    let u = (p0 + p2 * v * v) / s;
    let jac = df_map(u, v, dist, b);
    let tr = jac[0][0] + jac[1][1];
    let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
    let edisc = (tr * tr - 4.0 * det).max(0.0).sqrt();
    let spectral_radius = ((tr + edisc) / 2.0).abs().max(((tr - edisc) / 2.0).abs());
    Ok(FixedPointResult {
        exists: true,
        u,
        v,
        double_root: disc.abs() <= 1e-9,
        spectral_radius,
        reason: None,
    })
}

// ─────────────────────── empirical classification ───────────────────────

/// How a trajectory from `(1,1)` behaves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trajectory {
    Converges,
    Diverges,
}

/// Classify the trajectory at coupling `b`: divergent once `v` passes
/// [`DIVERGENCE_THRESHOLD`] (or overflows), convergent once the
/// step-to-step displacement drops below [`CONVERGENCE_DISPLACEMENT`].
/// A trajectory still bounded after `n_max` steps counts as convergent.
pub fn classify_trajectory(dist: &OffspringDist, b: f64, n_max: usize) -> Result<Trajectory> {
    let mut rec = Recursion::new(dist, b, Blocks::none())?;
    let (mut pu, mut pv) = (1.0, 1.0);
    for _ in 0..n_max {
        match rec.advance() {
            Err(Error::Overflow { .. }) => return Ok(Trajectory::Diverges),
            Err(e) => return Err(e),
            Ok(st) => {
                if st.v > DIVERGENCE_THRESHOLD {
                    return Ok(Trajectory::Diverges);
                }
                if (st.u - pu).abs() + (st.v - pv).abs() < CONVERGENCE_DISPLACEMENT {
                    return Ok(Trajectory::Converges);
                }
                pu = st.u;
                pv = st.v;
            }
        }
    }
    Ok(Trajectory::Converges)
}

/// Bisection bracket around the empirical critical coupling.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticalityBracket {
    pub lo: f64,
    pub hi: f64,
}

impl CriticalityBracket {
    pub fn estimate(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

/// Locate the transition coupling by bisection on trajectory
/// classification, narrowing `search` down to a bracket of width at most
/// `bracket_tol`.  Unlike the closed form this works for any supported `K`.
pub fn empirical_criticality(
    dist: &OffspringDist,
    search: (f64, f64),
    bracket_tol: f64,
) -> Result<CriticalityBracket> {
    let (mut lo, mut hi) = search;
    if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && hi > lo) {
        return Err(Error::InvalidParams(format!(
            "invalid search interval ({lo}, {hi})"
        )));
    }
    if !(bracket_tol.is_finite() && bracket_tol > 0.0) {
        return Err(Error::InvalidParams(
            "bracket tolerance must be positive".into(),
        ));
    }
    let n_max = 400_000;
    if classify_trajectory(dist, lo, n_max)? != Trajectory::Converges {
        return Err(Error::NoBracket {
            lo,
            hi,
            reason: "the lower endpoint already diverges".into(),
        });
    }
    if classify_trajectory(dist, hi, n_max)? != Trajectory::Diverges {
        return Err(Error::NoBracket {
            lo,
            hi,
            reason: "the upper endpoint still converges".into(),
        });
    }
    while hi - lo > bracket_tol {
        let mid = 0.5 * (lo + hi);
        match classify_trajectory(dist, mid, n_max)? {
            Trajectory::Converges => lo = mid,
            Trajectory::Diverges => hi = mid,
        }
    }
    Ok(CriticalityBracket { lo, hi })
}

// ───────────────────────── critical slowing down ─────────────────────────

/// Mean frontier counts along the critical line and their power-law fit.
#[derive(Clone, Debug)]
pub struct ScalingResult {
    pub b_c: f64,
    /// `(n, mean frontier count at depth n)` for `n = 1..=n_max`.
    pub series: Vec<(u64, f64)>,
    /// Fitted decay: `meanN ≈ amplitude · n^exponent` over `window`.
    pub exponent: f64,
    pub amplitude: f64,
    /// RMS residual of the fit in log-log coordinates.
    pub rms_residual: f64,
    /// Fit window `[n_max/10, n_max]`.
    pub window: (u64, u64),
}

/// Run the recursion at the closed-form critical coupling and fit the decay
/// exponent of the mean frontier count over the top decade of depths.
pub fn critical_scaling(dist: &OffspringDist, boundary: u8, n_max: usize) -> Result<ScalingResult> {
    if dist.k_max() != 2 {
        return Err(Error::Unsupported(
            "the closed-form critical coupling needs K = 2".into(),
        ));
    }
    if n_max < 10 {
        return Err(Error::InvalidParams(
            "need n_max ≥ 10 for a fit window".into(),
        ));
    }
    let (p0, p2) = (dist.prob(0), dist.prob(2));
    if p2 > p0 {
        return Err(Error::FitRejected(format!(
            "p2 = {p2} exceeds p0 = {p0}: the mean frontier count grows exponentially \
             (supercritical even without interaction), no power law to fit"
        )));
    }
    let critical = beta_c(p0, p2)?;
    let mut rec = Recursion::new(
        dist,
        critical.b_c,
        Blocks {
            leaves: true,
            energy: false,
            variance: false,
        },
    )?;
    let overflowed = |e: Error| match e {
        Error::Overflow { last_step } => Error::Numerical(format!(
            "trajectory at the critical coupling overflowed at step {last_step}"
        )),
        other => other,
    };
    rec.advance().map_err(overflowed)?;
    let mut series = Vec::with_capacity(n_max);
    for n in 1..=n_max {
        // the state after n+1 steps carries the depth-n observables
        let st = rec.advance().map_err(overflowed)?;
        let mean = st
            .mean_n(boundary)
            .expect("leaves block is active by construction");
        series.push((n as u64, mean));
    }
    let window = ((n_max / 10).max(1) as u64, n_max as u64);
    let (xs, ys): (Vec<f64>, Vec<f64>) = series
        .iter()
        .filter(|(n, _)| *n >= window.0)
        .map(|&(n, m)| (n as f64, m))
        .unzip();
    let fitted = fit_series(&xs, &ys, FitModel::PowerLaw)?;
    Ok(ScalingResult {
        b_c: critical.b_c,
        series,
        exponent: fitted.c1,
        amplitude: fitted.c0,
        rms_residual: fitted.rms_residual,
        window,
    })
}

// ───────────────────── supercritical growth constant ─────────────────────

/// Growth-constant estimate at one coupling.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RhoResult {
    pub b: f64,
    /// `log ρ`: the limit of the increasing sequence `2⁻ⁿ(log(p₂b) + Lv_n)`.
    pub log_rho: f64,
    /// `log log ρ`.
    pub loglog_rho: f64,
    /// Two-sided bounds on ρ itself: `√(p₂b(p₁+p₂b)) ≤ ρ ≤ p₁+p₂b`.
    pub lower_bound: f64,
    pub upper_bound: f64,
    pub n_used: usize,
    pub converged: bool,
}

/// Doubly-exponential growth constant of the partition value for the
/// offspring law `(0, p₁, 1−p₁)` at coupling `b > 1`: `v_n ~ ρ^(2ⁿ)` with
/// `log ρ = lim 2⁻ⁿ(log(p₂b) + log v_n)`, an increasing sequence iterated
/// in log space until its relative increment drops below `tol`.
pub fn rho(p1: f64, b: f64, tol: f64) -> Result<RhoResult> {
    if !(p1.is_finite() && p1 > 0.0 && p1 < 1.0) {
        return Err(Error::InvalidParams(format!(
            "the growth constant needs 0 < p1 < 1 (with p0 = 0), got p1 = {p1}"
        )));
    }
    if !(b.is_finite() && b > 1.0) {
        return Err(Error::InvalidParams(format!(
            "the growth constant needs b > 1 (at b = 1 the law is critical), got b = {b}"
        )));
    }
    if !(tol.is_finite() && tol > 0.0) {
        return Err(Error::InvalidParams("tolerance must be positive".into()));
    }
    let p2 = 1.0 - p1;
    let dist = OffspringDist::new(vec![0.0, p1, p2])?;
    let ln_p2b = (p2 * b).ln();
    let mut lr = LogRecursion::new(&dist, b)?;
    let mut s_prev = f64::NAN;
    let mut s = f64::NAN;
    let mut n_used = 0;
    let mut converged = false;
    for n in 1..=RHO_N_MAX {
        match lr.advance() {
            Err(Error::Overflow { .. }) => break,
            Err(e) => return Err(e),
            Ok(st) => {
                let s_next = 0.5f64.powi(n as i32) * (ln_p2b + st.lv);
                n_used = n;
                if s_prev.is_finite() {
                    let delta = s_next - s_prev;
                    if delta.abs() <= tol * s_next.abs() {
                        s = s_next;
                        converged = true;
                        break;
                    }
                    if delta < 0.0 {
                        return Err(Error::Numerical(format!(
                            "growth sequence decreased at n = {n} (Δ = {delta:.3e}); \
                             it is increasing by construction"
                        )));
                    }
                }
                s = s_next;
                s_prev = s_next;
            }
        }
    }
    let upper = p1 + p2 * b;
    let lower = (p2 * b * upper).sqrt();
    if converged {
        if s <= 0.0 {
            return Err(Error::Numerical(format!(
                "growth-constant estimate log ρ = {s:.3e} did not exceed 0"
            )));
        }
        if s > upper.ln() + 1e-9 || s < lower.ln() - 1e-9 {
            return Err(Error::Numerical(format!(
                "estimate log ρ = {s:.6e} violates the two-sided bound [{:.6e}, {:.6e}]",
                lower.ln(),
                upper.ln()
            )));
        }
    }
    Ok(RhoResult {
        b,
        log_rho: s,
        loglog_rho: if s > 0.0 { s.ln() } else { f64::NAN },
        lower_bound: lower,
        upper_bound: upper,
        n_used,
        converged,
    })
}

/// [`rho`] over a grid of couplings.
pub fn rho_sweep(p1: f64, b_values: &[f64], tol: f64) -> Result<Vec<RhoResult>> {
    b_values.iter().map(|&b| rho(p1, b, tol)).collect()
}

/// The crossover diagnostic `y_n = log(log u_n)/n` for the law
/// `(0, p₁, 1−p₁)` at coupling `b > 1`, for every `n ≤ n_max` with
/// `log u_n > 0`.  Iteration stops early if even the logarithm overflows.
pub fn loglog_u_series(p1: f64, b: f64, n_max: usize) -> Result<Vec<(u64, f64)>> {
    if !(p1.is_finite() && p1 > 0.0 && p1 < 1.0) {
        return Err(Error::InvalidParams(format!(
            "the crossover series needs 0 < p1 < 1 (with p0 = 0), got p1 = {p1}"
        )));
    }
    if !(b.is_finite() && b > 1.0) {
        return Err(Error::InvalidParams(format!(
            "the crossover series needs b > 1, got b = {b}"
        )));
    }
    let dist = OffspringDist::new(vec![0.0, p1, 1.0 - p1])?;
    let mut lr = LogRecursion::new(&dist, b)?;
    let mut series = Vec::new();
    for n in 1..=n_max {
        match lr.advance() {
            Err(Error::Overflow { .. }) => break,
            Err(e) => return Err(e),
            Ok(st) => {
                if st.lu > 0.0 {
                    series.push((n as u64, st.lu.ln() / n as f64));
                }
            }
        }
    }
    Ok(series)
}

// ─────────────────────────── least-squares fits ───────────────────────────

/// Fit models for the sweep outputs.  All are ordinary least squares on
/// transformed coordinates:
///
/// * `PowerLaw`:   `y = c0 · x^c1`        (regress `log y` on `log x`)
/// * `GammaDelta`: `y = c0 − c1/x`        (regress `y` on `1/x`)
/// * `LogLinear`:  `y = c0 + c1·log(x−1)` (regress `y` on `log(x−1)`)
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitModel {
    PowerLaw,
    GammaDelta,
    LogLinear,
}

/// Fitted coefficients; `rms_residual` is measured in the regression
/// coordinates of the model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model: FitModel,
    pub c0: f64,
    pub c1: f64,
    pub rms_residual: f64,
    pub points: usize,
}

fn ols(ts: &[f64], zs: &[f64]) -> Result<(f64, f64, f64)> {
    let n = ts.len() as f64;
    let t_bar = ts.iter().sum::<f64>() / n;
    let z_bar = zs.iter().sum::<f64>() / n;
    let mut s_tt = 0.0;
    let mut s_tz = 0.0;
    for (t, z) in ts.iter().zip(zs) {
        s_tt += (t - t_bar) * (t - t_bar);
        s_tz += (t - t_bar) * (z - z_bar);
    }
    if s_tt <= 1e-24 * n * t_bar.mul_add(t_bar, 1.0) {
        return Err(Error::FitRejected(
            "degenerate design: the abscissas do not vary".into(),
        ));
    }
    let slope = s_tz / s_tt;
    let intercept = z_bar - slope * t_bar;
    let rss = ts
        .iter()
        .zip(zs)
        .map(|(t, z)| {
            let r = z - (intercept + slope * t);
            r * r
        })
        .sum::<f64>();
    Ok((intercept, slope, (rss / n).sqrt()))
}

/// Least-squares fit of `ys` against `xs` under the given model.
pub fn fit_series(xs: &[f64], ys: &[f64], model: FitModel) -> Result<FitResult> {
    if xs.len() != ys.len() {
        return Err(Error::InvalidParams(format!(
            "mismatched series lengths {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 3 {
        return Err(Error::InvalidParams(format!(
            "need at least 3 points to fit, got {}",
            xs.len()
        )));
    }
    if xs.iter().chain(ys).any(|t| !t.is_finite()) {
        return Err(Error::InvalidParams(
            "fit input contains non-finite values".into(),
        ));
    }
    let (ts, zs): (Vec<f64>, Vec<f64>) = match model {
        FitModel::PowerLaw => {
            if xs.iter().any(|&x| x <= 0.0) || ys.iter().any(|&y| y <= 0.0) {
                return Err(Error::InvalidParams(
                    "power-law fit needs strictly positive coordinates".into(),
                ));
            }
            (
                xs.iter().map(|x| x.ln()).collect(),
                ys.iter().map(|y| y.ln()).collect(),
            )
        }
        FitModel::GammaDelta => {
            if xs.iter().any(|&x| x == 0.0) {
                return Err(Error::InvalidParams(
                    "offset-decay fit needs nonzero abscissas".into(),
                ));
            }
            (xs.iter().map(|x| 1.0 / x).collect(), ys.to_vec())
        }
        FitModel::LogLinear => {
            if xs.iter().any(|&x| x <= 1.0) {
                return Err(Error::InvalidParams(
                    "log-linear fit needs abscissas above 1".into(),
                ));
            }
            (xs.iter().map(|x| (x - 1.0).ln()).collect(), ys.to_vec())
        }
    };
    let (intercept, slope, rms) = ols(&ts, &zs)?;
    let (c0, c1) = match model {
        FitModel::PowerLaw => (intercept.exp(), slope),
        FitModel::GammaDelta => (intercept, -slope),
        FitModel::LogLinear => (intercept, slope),
    };
    Ok(FitResult {
        model,
        c0,
        c1,
        rms_residual: rms,
        points: xs.len(),
    })
}

// ───────────────────────────── surface scan ─────────────────────────────

/// One grid point of the critical-line scan.
#[derive(Clone, Debug, PartialEq)]
pub enum SurfaceEntry {
    Point(CriticalPoint),
    Skipped { p0: f64, p2: f64, reason: String },
}

/// Evaluate the closed-form critical coupling on an inclusive
/// `steps × steps` grid; grid points outside the valid region become
/// `Skipped` entries carrying the reason.
pub fn scan_surface(
    p0_range: (f64, f64),
    p2_range: (f64, f64),
    steps: usize,
) -> Result<Vec<SurfaceEntry>> {
    if steps == 0 {
        return Err(Error::InvalidParams("grid needs at least one step".into()));
    }
    for (lo, hi) in [p0_range, p2_range] {
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::InvalidParams(format!(
                "invalid grid range ({lo}, {hi})"
            )));
        }
    }
    let axis = |range: (f64, f64)| -> Vec<f64> {
        if steps == 1 {
            vec![range.0]
        } else {
            (0..steps)
                .map(|i| range.0 + (range.1 - range.0) * i as f64 / (steps - 1) as f64)
                .collect()
        }
    };
    let mut entries = Vec::with_capacity(steps * steps);
    for &p0 in &axis(p0_range) {
        for &p2 in &axis(p2_range) {
            entries.push(match beta_c(p0, p2) {
                Ok(point) => SurfaceEntry::Point(point),
                Err(e) => SurfaceEntry::Skipped {
                    p0,
                    p2,
                    reason: e.to_string(),
                },
            });
        }
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recursion::f_map;

    fn dist(probs: &[f64]) -> OffspringDist {
        OffspringDist::new(probs.to_vec()).unwrap()
    }

    #[test]
    fn critical_line_frozen_values() {
        let cp = beta_c(0.4, 0.3).unwrap();
        assert!((cp.b_c - 1.0297619047619047).abs() < 1e-14, "{}", cp.b_c);
        assert!((cp.beta_c - 0.0293278).abs() < 1e-6, "{}", cp.beta_c);

        let cp = beta_c(0.5, 0.2).unwrap();
        assert!((cp.b_c - 1.3214285714285714).abs() < 1e-14, "{}", cp.b_c);

        let cp = beta_c(0.45, 0.25).unwrap();
        assert!((cp.b_c - 1.126984126984127).abs() < 1e-12, "{}", cp.b_c);

        // equal weights sit exactly on the interaction-free critical line
        let cp = beta_c(0.35, 0.35).unwrap();
        assert!((cp.b_c - 1.0).abs() < 1e-12);
        assert!(cp.beta_c.abs() < 1e-12);
    }

    #[test]
    fn critical_line_domain_errors() {
        assert!(beta_c(0.4, 0.0).is_err());
        assert!(beta_c(0.2, 0.3).is_err()); // supercritical
        assert!(beta_c(0.6, 0.5).is_err()); // outside the triangle
        assert!(beta_c(0.0, 0.3).is_err());
        let msg = beta_c(0.2, 0.3).unwrap_err().to_string();
        assert!(msg.contains("supercritical"), "{msg}");
    }

    #[test]
    fn fixed_point_at_critical_coupling_is_double_root() {
        let d = dist(&[0.4, 0.3, 0.3]);
        let b_c = beta_c(0.4, 0.3).unwrap().b_c;
        let fp = fixed_point(&d, b_c).unwrap();
        assert!(fp.exists);
        assert!(fp.double_root, "discriminant should vanish at b_c");
        assert!((fp.v - 1.1428571428571428).abs() < 1e-6, "{}", fp.v);
        assert!((fp.u - 1.1311953352769679).abs() < 1e-6, "{}", fp.u);
        assert!(
            (fp.spectral_radius - 1.0).abs() < 1e-6,
            "tangency makes the map neutral: {}",
            fp.spectral_radius
        );
        let (fu, fv) = f_map(fp.u, fp.v, &d, b_c);
        assert!((fu - fp.u).abs() < 1e-10 && (fv - fp.v).abs() < 1e-10);
    }

    #[test]
    fn fixed_point_generic_frozen_values() {
        let d = dist(&[0.5, 0.3, 0.2]);
        let fp = fixed_point(&d, 1.2).unwrap();
        assert!(fp.exists && !fp.double_root);
        assert!((fp.u - 1.0795800).abs() < 5e-6, "{}", fp.u);
        assert!((fp.v - 1.1307210).abs() < 5e-6, "{}", fp.v);
        assert!(fp.spectral_radius < 1.0, "{}", fp.spectral_radius);
        let (fu, fv) = f_map(fp.u, fp.v, &d, 1.2);
        assert!((fu - fp.u).abs() < 1e-12 && (fv - fp.v).abs() < 1e-12);
    }

    #[test]
    fn fixed_point_without_interaction() {
        let fp = fixed_point(&dist(&[0.4, 0.3, 0.3]), 1.0).unwrap();
        assert!(fp.exists);
        assert!((fp.u - 1.0).abs() < 1e-12 && (fp.v - 1.0).abs() < 1e-12);
        assert!((fp.spectral_radius - 0.9).abs() < 1e-12); // p1 + 2 p2

        // a supercritical law still fixes (1,1) at b = 1, but unstably
        let fp = fixed_point(&dist(&[0.2, 0.3, 0.5]), 1.0).unwrap();
        assert!(fp.exists);
        assert!((fp.v - 1.0).abs() < 1e-12);
        assert!(fp.spectral_radius > 1.0);
    }

    #[test]
    fn fixed_point_missing_cases() {
        let fp = fixed_point(&dist(&[0.2, 0.3, 0.5]), 1.2).unwrap();
        assert!(!fp.exists);
        assert!(fp.reason.as_deref().unwrap().contains("supercritical"));
        assert!(fp.u.is_nan());

        let fp = fixed_point(&dist(&[0.4, 0.3, 0.3]), 1.2).unwrap();
        assert!(!fp.exists, "b = 1.2 exceeds b_c ≈ 1.0298");
        assert!(fp.reason.as_deref().unwrap().contains("discriminant"));

        assert!(fixed_point(&dist(&[0.4, 0.3, 0.3]), 0.5).is_err());
        assert!(fixed_point(&dist(&[0.3, 0.2, 0.2, 0.3]), 1.1).is_err());
    }

    #[test]
    fn fixed_point_matches_trajectory_limit() {
        let d = dist(&[0.4, 0.3, 0.3]);
        let fp = fixed_point(&d, 1.02).unwrap();
        let mut rec = Recursion::new(&d, 1.02, Blocks::none()).unwrap();
        let (mut pu, mut pv) = (1.0, 1.0);
        for _ in 0..200_000 {
            let st = rec.advance().unwrap();
            if (st.u - pu).abs() + (st.v - pv).abs() < 1e-15 {
                break;
            }
            pu = st.u;
            pv = st.v;
        }
        assert!((pu - fp.u).abs() < 1e-9, "{pu} vs {}", fp.u);
        assert!((pv - fp.v).abs() < 1e-9, "{pv} vs {}", fp.v);
    }

    #[test]
    fn trajectory_classification() {
        let d = dist(&[0.4, 0.3, 0.3]);
        assert_eq!(
            classify_trajectory(&d, 1.0, 1000).unwrap(),
            Trajectory::Converges
        );
        assert_eq!(
            classify_trajectory(&d, 1.05, 100_000).unwrap(),
            Trajectory::Diverges
        );
    }

    #[test]
    fn empirical_criticality_matches_closed_form() {
        let d = dist(&[0.4, 0.3, 0.3]);
        let bracket = empirical_criticality(&d, (1.0, 1.1), 1e-4).unwrap();
        assert!(bracket.width() <= 1e-4);
        assert!(
            (bracket.estimate() - 1.0297619047619047).abs() < 1e-3,
            "estimate {}",
            bracket.estimate()
        );
    }

    #[test]
    fn empirical_criticality_bracket_errors() {
        let d = dist(&[0.4, 0.3, 0.3]);
        match empirical_criticality(&d, (1.2, 1.5), 1e-4) {
            Err(Error::NoBracket { reason, .. }) => assert!(reason.contains("lower")),
            other => panic!("expected NoBracket, got {other:?}"),
        }
        match empirical_criticality(&d, (1.0, 1.01), 1e-4) {
            Err(Error::NoBracket { reason, .. }) => assert!(reason.contains("upper")),
            other => panic!("expected NoBracket, got {other:?}"),
        }
        assert!(empirical_criticality(&d, (0.0, 1.1), 1e-4).is_err());
        assert!(empirical_criticality(&d, (1.0, 1.1), 0.0).is_err());
    }

    #[test]
    fn critical_scaling_decays_quadratically() {
        let d = dist(&[0.4, 0.3, 0.3]);
        let res = critical_scaling(&d, 1, 20_000).unwrap();
        assert!(
            (res.exponent + 2.0).abs() < 0.15,
            "exponent {}",
            res.exponent
        );
        // n² · meanN approaches a constant
        let at = |n: u64| {
            let (m, v) = res.series[(n - 1) as usize];
            assert_eq!(m, n);
            v * (n as f64) * (n as f64)
        };
        let (a, b) = (at(10_000), at(20_000));
        assert!(
            (a - b).abs() / b < 0.1,
            "n²·meanN drifts: {a:.6e} vs {b:.6e}"
        );
    }

    #[test]
    fn critical_scaling_free_critical_law_is_flat() {
        // p0 = p2 puts b_c at 1; the mean frontier count is then exactly 1
        let res = critical_scaling(&dist(&[0.3, 0.4, 0.3]), 1, 500).unwrap();
        assert!(res.exponent.abs() < 1e-9, "{}", res.exponent);
        assert!((res.amplitude - 1.0).abs() < 1e-9);
        for &(_, m) in &res.series {
            assert!((m - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn critical_scaling_refuses_exponential_growth() {
        match critical_scaling(&dist(&[0.2, 0.3, 0.5]), 1, 100) {
            Err(Error::FitRejected(msg)) => assert!(msg.contains("exponential")),
            other => panic!("expected FitRejected, got {other:?}"),
        }
    }

    #[test]
    fn growth_constant_frozen_value_and_bounds() {
        let r = rho(0.9, 1.1, 1e-9).unwrap();
        assert!(r.converged);
        assert!(r.n_used < 100, "n_used {}", r.n_used);
        assert!(
            (r.loglog_rho + 30.0).abs() < 0.5,
            "loglog ρ = {}",
            r.loglog_rho
        );
        let rho_val = r.log_rho.exp();
        assert!(r.lower_bound <= rho_val + 1e-12);
        assert!(rho_val <= r.upper_bound + 1e-12);
        assert!(r.log_rho > 0.0);
    }

    #[test]
    fn growth_constant_monotone_in_coupling() {
        let sweep = rho_sweep(0.9, &[1.1, 1.2, 1.5], 1e-9).unwrap();
        assert!(sweep[0].log_rho < sweep[1].log_rho);
        assert!(sweep[1].log_rho < sweep[2].log_rho);
        for r in &sweep {
            assert!(r.converged);
        }
    }

    #[test]
    fn growth_constant_domain_errors() {
        assert!(rho(0.0, 1.1, 1e-9).is_err());
        assert!(rho(1.0, 1.1, 1e-9).is_err());
        assert!(rho(0.9, 1.0, 1e-9).is_err());
        assert!(rho(0.9, 1.1, 0.0).is_err());
    }

    #[test]
    fn crossover_fits_frozen_values() {
        let series = loglog_u_series(0.9, 1.1, 1000).unwrap();
        let window = |lo: u64, hi: u64| -> (Vec<f64>, Vec<f64>) {
            series
                .iter()
                .filter(|(n, _)| *n >= lo && *n <= hi)
                .map(|&(n, y)| (n as f64, y))
                .unzip()
        };

        // plateau regime: slow apparent growth
        let (xs, ys) = window(10, 50);
        let fit = fit_series(&xs, &ys, FitModel::GammaDelta).unwrap();
        assert!((fit.c0 - 0.14494).abs() < 5e-3, "γ = {}", fit.c0);
        assert!((fit.c1 - 5.065).abs() < 0.2, "δ = {}", fit.c1);

        // asymptotic regime: doubling rate log 2
        let (xs, ys) = window(50, 1000);
        let fit = fit_series(&xs, &ys, FitModel::GammaDelta).unwrap();
        assert!(
            (fit.c0 - std::f64::consts::LN_2).abs() < 5e-3,
            "γ = {}",
            fit.c0
        );
        assert!((fit.c1 - 29.997).abs() < 0.5, "δ = {}", fit.c1);
    }

    #[test]
    fn free_energy_density_matches_growth_constant() {
        // -log(partition)/|Λ| at large depth converges to -log ρ
        // -log(partition)/|Λ| carries a log(p₂b)/2ⁿ bias relative to the
        // tiny log ρ ≈ 9.4e-14, so the depth must be large enough for
        // 2.21/2ⁿ to drop below 1e-6 of it: n ≥ 70
        let r = rho(0.9, 1.1, 1e-9).unwrap();
        let d = dist(&[0.0, 0.9, 0.1]);
        let mut lr = LogRecursion::new(&d, 1.1).unwrap();
        for _ in 0..80 {
            lr.advance().unwrap();
        }
        let lam = (2.0f64).powi(80) - 1.0;
        let psi = -lr.state().lv / lam;
        assert!(
            (-psi - r.log_rho).abs() <= 1e-6 * r.log_rho,
            "psi = {psi:.6e}, log ρ = {:.6e}",
            r.log_rho
        );
    }

    #[test]
    fn fits_recover_synthetic_data_exactly() {
        let xs: Vec<f64> = (1..=20).map(|i| i as f64).collect();

        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x.powf(-2.0)).collect();
        let fit = fit_series(&xs, &ys, FitModel::PowerLaw).unwrap();
        assert!((fit.c0 - 3.0).abs() < 1e-9 && (fit.c1 + 2.0).abs() < 1e-12);
        assert!(fit.rms_residual < 1e-12);

        let ys: Vec<f64> = xs.iter().map(|x| 0.7 - 5.0 / x).collect();
        let fit = fit_series(&xs, &ys, FitModel::GammaDelta).unwrap();
        assert!((fit.c0 - 0.7).abs() < 1e-12 && (fit.c1 - 5.0).abs() < 1e-12);

        let xs: Vec<f64> = (1..=20).map(|i| 1.0 + 0.025 * i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| -12.0 + 7.5 * (x - 1.0).ln()).collect();
        let fit = fit_series(&xs, &ys, FitModel::LogLinear).unwrap();
        assert!((fit.c0 + 12.0).abs() < 1e-9 && (fit.c1 - 7.5).abs() < 1e-12);
    }

    #[test]
    fn fit_rejects_bad_input() {
        assert!(fit_series(&[1.0, 2.0], &[1.0, 2.0], FitModel::PowerLaw).is_err());
        assert!(fit_series(&[1.0, 2.0, 3.0], &[1.0, 2.0], FitModel::PowerLaw).is_err());
        assert!(fit_series(&[1.0, 2.0, 3.0], &[1.0, -2.0, 3.0], FitModel::PowerLaw).is_err());
        assert!(fit_series(&[0.5, 2.0, 3.0], &[1.0, 2.0, 3.0], FitModel::LogLinear).is_err());
        match fit_series(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0], FitModel::GammaDelta) {
            Err(Error::FitRejected(msg)) => assert!(msg.contains("degenerate")),
            other => panic!("expected FitRejected, got {other:?}"),
        }
    }

    #[test]
    fn surface_scan_covers_grid_and_skips_invalid() {
        let entries = scan_surface((0.1, 0.9), (0.1, 0.5), 5).unwrap();
        assert_eq!(entries.len(), 25);
        let skipped = entries
            .iter()
            .filter(|e| matches!(e, SurfaceEntry::Skipped { .. }))
            .count();
        assert!(skipped > 0, "the grid leaves the valid region");
        for e in &entries {
            match e {
                SurfaceEntry::Point(cp) => {
                    assert!(cp.p0 >= cp.p2 && cp.p0 + cp.p2 <= 1.0 + 1e-12);
                    assert!(cp.b_c >= 1.0 - 1e-12);
                }
                SurfaceEntry::Skipped { reason, .. } => assert!(!reason.is_empty()),
            }
        }
        // along a fixed p0 row the critical coupling decreases with p2
        let row: Vec<&CriticalPoint> = entries
            .iter()
            .filter_map(|e| match e {
                SurfaceEntry::Point(cp) if (cp.p0 - 0.5).abs() < 1e-12 => Some(cp),
                _ => None,
            })
            .collect();
        assert!(row.len() >= 3);
        for w in row.windows(2) {
            assert!(w[0].b_c > w[1].b_c);
        }
    }
}
