//! The central reduction: partition values for arbitrary depth by iterating
//! a two-dimensional quadratic map, with optional derivative blocks that
//! propagate frontier-count and coupling derivatives alongside, and a
//! log-space variant for the supercritical regime where values grow doubly
//! exponentially.
//!
//! State after `n+1` steps from `(1,1)` equals the depth-`n` partition
//! values: `u_{n+1}` for boundary `x = 1` and `v_{n+1}` for `x ≥ 2`.

use crate::error::{Error, Result};
use crate::model::{InteractionKind, ModelParams, OffspringDist};

/// Power sums of the offspring law at the current `v`:
/// `S0 = Σ_{k≥2} p_k v^k`, `S1 = Σ_{k≥2} k p_k v^{k-1}`,
/// `S2 = Σ_{k≥2} k(k-1) p_k v^{k-2}`.
fn power_sums(dist: &OffspringDist, v: f64) -> (f64, f64, f64) {
    let mut s0 = 0.0;
    let mut s1 = 0.0;
    let mut s2 = 0.0;
    for k in 2..=dist.k_max() {
        let p = dist.prob(k);
        if p == 0.0 {
            continue;
        }
        let kf = k as f64;
        let vk2 = v.powi(k as i32 - 2);
        s2 += kf * (kf - 1.0) * p * vk2;
        s1 += kf * p * vk2 * v;
        s0 += p * vk2 * v * v;
    }
    (s0, s1, s2)
}

/// One application of the map:
/// `u′ = p₀ + p₁u + Σ_{k≥2} p_k v^k`, `v′ = p₀ + p₁u + b·Σ_{k≥2} p_k v^k`.
/// Maps `[1,∞)²` into itself for `b ≥ 1`, with `u′ ≤ v′`.
pub fn f_map(u: f64, v: f64, dist: &OffspringDist, b: f64) -> (f64, f64) {
    let (s0, _, _) = power_sums(dist, v);
    let common = dist.prob(0) + dist.prob(1) * u;
    (common + s0, common + b * s0)
}

/// Jacobian of the map: `[[p₁, S1], [p₁, b·S1]]`.
pub fn df_map(_u: f64, v: f64, dist: &OffspringDist, b: f64) -> [[f64; 2]; 2] {
    let (_, s1, _) = power_sums(dist, v);
    let p1 = dist.prob(1);
    [[p1, s1], [p1, b * s1]]
}

/// Which derivative blocks to carry along the iteration.
///
/// * `leaves`: the four derivatives with respect to the starting point
///   `(u,v)`, which grade the frontier-slot counts.
/// * `energy`: the two derivatives with respect to the coupling `b`, which
///   grade the favoured-link count.
/// * `variance`: the two second `b`-derivatives (requires `energy`).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Blocks {
    pub leaves: bool,
    pub energy: bool,
    pub variance: bool,
}

impl Blocks {
    pub fn none() -> Self {
        Blocks::default()
    }

    pub fn all() -> Self {
        Blocks {
            leaves: true,
            energy: true,
            variance: true,
        }
    }

    /// The second-derivative update consumes the first derivative, so
    /// `variance` forces `energy` on.
    fn normalized(mut self) -> Self {
        if self.variance {
            self.energy = true;
        }
        self
    }
}

/// Iteration state: step count, `(u,v)`, and the active derivative blocks.
///
/// Block layouts: `d_uv = [∂u/∂u, ∂v/∂u, ∂u/∂v, ∂v/∂v]` (derivatives of the
/// current values with respect to the starting point, identity at step 0);
/// `d_b = [du/db, dv/db]`; `d_bb = [d²u/db², d²v/db²]` (zero at step 0).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RecState {
    pub n: usize,
    pub u: f64,
    pub v: f64,
    pub d_uv: Option<[f64; 4]>,
    pub d_b: Option<[f64; 2]>,
    pub d_bb: Option<[f64; 2]>,
}

impl RecState {
    fn start(blocks: Blocks) -> Self {
        RecState {
            n: 0,
            u: 1.0,
            v: 1.0,
            d_uv: blocks.leaves.then_some([1.0, 0.0, 0.0, 1.0]),
            d_b: blocks.energy.then_some([0.0, 0.0]),
            d_bb: blocks.variance.then_some([0.0, 0.0]),
        }
    }

    fn all_finite(&self) -> bool {
        let mut ok = self.u.is_finite() && self.v.is_finite();
        if let Some(d) = self.d_uv {
            ok &= d.iter().all(|x| x.is_finite());
        }
        if let Some(d) = self.d_b {
            ok &= d.iter().all(|x| x.is_finite());
        }
        if let Some(d) = self.d_bb {
            ok &= d.iter().all(|x| x.is_finite());
        }
        ok
    }

    fn row(&self, boundary: u8) -> usize {
        if boundary == 1 {
            0
        } else {
            1
        }
    }

    /// Partition value for the given boundary (`u` for x=1, `v` for x≥2).
    pub fn partition(&self, boundary: u8) -> f64 {
        if boundary == 1 {
            self.u
        } else {
            self.v
        }
    }

    /// Mean frontier-slot count from single-offspring parents
    /// (`(∂·/∂u)/·` on the row matching the boundary).  Needs `leaves`.
    pub fn mean_l(&self, boundary: u8) -> Option<f64> {
        let d = self.d_uv?;
        Some(d[self.row(boundary)] / self.partition(boundary))
    }

    /// Mean frontier-slot count from multi-offspring parents.  Needs `leaves`.
    pub fn mean_q(&self, boundary: u8) -> Option<f64> {
        let d = self.d_uv?;
        Some(d[2 + self.row(boundary)] / self.partition(boundary))
    }

    /// Mean total frontier-slot count.  Needs `leaves`.
    pub fn mean_n(&self, boundary: u8) -> Option<f64> {
        Some(self.mean_l(boundary)? + self.mean_q(boundary)?)
    }

    /// Mean favoured-link count `(b·d·/db)/·`.  Needs `energy`.
    pub fn mean_n22(&self, boundary: u8, b: f64) -> Option<f64> {
        let d = self.d_b?;
        Some(b * d[self.row(boundary)] / self.partition(boundary))
    }

    /// Variance of the favoured-link count
    /// `(b²·d²·/db²)/· + m − m²`.  Needs `energy` and `variance`.
    pub fn var_n22(&self, boundary: u8, b: f64) -> Option<f64> {
        let d2 = self.d_bb?;
        let m = self.mean_n22(boundary, b)?;
        Some(b * b * d2[self.row(boundary)] / self.partition(boundary) + m - m * m)
    }

    /// Free energy per site of the maximal tree,
    /// `-log Ξ / |Λ_n|` with `n = self.n - 1`; `None` at step 0.
    pub fn psi(&self, boundary: u8, k_max: u8) -> Option<f64> {
        if self.n == 0 {
            return None;
        }
        let k = k_max as f64;
        // |Λ_{n-1}| with n-1 = self.n - 1: (K^{self.n} - 1)/(K - 1)
        let lam = (k.powi(self.n as i32) - 1.0) / (k - 1.0);
        if lam.is_infinite() {
            // free energy per site of an astronomically large lattice
            return Some(0.0);
        }
        Some(-self.partition(boundary).ln() / lam)
    }
}

/// Iterator of the map with selected derivative blocks, starting from
/// `(u,v) = (1,1)` with identity/zero derivative initial values.
#[derive(Clone, Debug)]
pub struct Recursion {
    dist: OffspringDist,
    b: f64,
    state: RecState,
}

impl Recursion {
    /// `b` must be positive and finite.  `b < 1` iterates the same map but
    /// the `1 ≤ u ≤ v` ordering no longer holds.
    pub fn new(dist: &OffspringDist, b: f64, blocks: Blocks) -> Result<Self> {
        if !(b.is_finite() && b > 0.0) {
            return Err(Error::InvalidParams(format!(
                "coupling b must be positive and finite, got {b}"
            )));
        }
        Ok(Recursion {
            dist: dist.clone(),
            b,
            state: RecState::start(blocks.normalized()),
        })
    }

    pub fn state(&self) -> &RecState {
        &self.state
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    /// Apply one step of the map to the state and every active block.
    /// On overflow the state stays at the last finite step and an error
    /// reporting that step is returned; switch to [`LogRecursion`] for
    /// supercritical growth.
    pub fn advance(&mut self) -> Result<&RecState> {
        let s = &self.state;
        let (s0, s1, s2) = power_sums(&self.dist, s.v);
        let p1 = self.dist.prob(1);
        let b = self.b;
        let common = self.dist.prob(0) + p1 * s.u;

        let mut next = RecState {
            n: s.n + 1,
            u: common + s0,
            v: common + b * s0,
            d_uv: None,
            d_b: None,
            d_bb: None,
        };
        if let Some([duu, dvu, duv, dvv]) = s.d_uv {
            next.d_uv = Some([
                p1 * duu + s1 * dvu,
                p1 * duu + b * s1 * dvu,
                p1 * duv + s1 * dvv,
                p1 * duv + b * s1 * dvv,
            ]);
        }
        if let Some([ub, vb]) = s.d_b {
            next.d_b = Some([p1 * ub + s1 * vb, s0 + p1 * ub + b * s1 * vb]);
            if let Some([ubb, vbb]) = s.d_bb {
                // second b-derivatives; the chain rule through v produces
                // both the curvature term S2·(dv/db)² and, in the v-row,
                // the cross term 2·S1·(dv/db) from differentiating b·S0(v)
                // twice
                next.d_bb = Some([
                    p1 * ubb + s1 * vbb + s2 * vb * vb,
                    2.0 * s1 * vb + p1 * ubb + b * s1 * vbb + b * s2 * vb * vb,
                ]);
            }
        }
        if !next.all_finite() {
            return Err(Error::Overflow { last_step: s.n });
        }
        self.state = next;
        Ok(&self.state)
    }

    /// Advance until the state counter reaches `n_steps`.
    pub fn run_to(&mut self, n_steps: usize) -> Result<&RecState> {
        while self.state.n < n_steps {
            self.advance()?;
        }
        Ok(&self.state)
    }
}

// ───────────────────────────── observables ─────────────────────────────

/// Depth-`n` observables extracted from the recursion state at step `n+1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observables {
    pub n: usize,
    pub boundary: u8,
    /// Partition value Ξ at (1,1).
    pub partition: f64,
    /// Mean frontier slots under single-offspring parents.
    pub mean_l: f64,
    /// Mean frontier slots under multi-offspring parents.
    pub mean_q: f64,
    /// Mean total frontier slots.
    pub mean_n: f64,
    /// Mean favoured-link count.
    pub mean_n22: f64,
    /// Variance of the favoured-link count.
    pub var_n22: f64,
    /// Free energy per site of the maximal tree.
    pub psi: f64,
    /// Mean interaction energy, `-⟨N₂₂⟩` for β > 0.
    pub mean_energy: f64,
    /// True when β = 0 makes the energy identically zero (0·N₂₂).
    pub energy_degenerate: bool,
}

/// Compute all depth-`n` observables for the given model by running the
/// recursion with every block active.  Two-class interactions only — no
/// closed recursion exists for general tables.
pub fn observables(params: &ModelParams, n: usize) -> Result<Observables> {
    if params.interaction.kind() != InteractionKind::TwoClassIndicator {
        return Err(Error::Unsupported(
            "the recursion applies to the two-class interaction only; \
             use exhaustive enumeration for general tables"
                .into(),
        ));
    }
    let b = params.interaction.b();
    let x = params.boundary;
    let mut rec = Recursion::new(&params.dist, b, Blocks::all())?;
    rec.run_to(n + 1)?;
    let st = *rec.state();
    let beta = params.interaction.beta();
    let mean_n22 = st.mean_n22(x, b).expect("energy block active");
    let (mean_energy, energy_degenerate) = if beta == 0.0 {
        (0.0, true)
    } else {
        (-mean_n22, false)
    };
    Ok(Observables {
        n,
        boundary: x,
        partition: st.partition(x),
        mean_l: st.mean_l(x).expect("leaves block active"),
        mean_q: st.mean_q(x).expect("leaves block active"),
        mean_n: st.mean_n(x).expect("leaves block active"),
        mean_n22,
        var_n22: st.var_n22(x, b).expect("variance block active"),
        psi: st.psi(x, params.k_max()).expect("n+1 ≥ 1"),
        mean_energy,
        energy_degenerate,
    })
}

/// Mean total offspring announced by generation `m` in the depth-`n`
/// ensemble (`n = params.depth`):  grade every generation-(m+1) individual
/// by `s`, i.e. start a directional derivative at the stage-`m+1` boundary,
/// and propagate it through the remaining steps with the Jacobian.
pub fn generation_mean(params: &ModelParams, m: usize) -> Result<f64> {
    if params.interaction.kind() != InteractionKind::TwoClassIndicator {
        return Err(Error::Unsupported(
            "the recursion applies to the two-class interaction only".into(),
        ));
    }
    let n = params.depth;
    if m > n {
        return Err(Error::InvalidParams(format!(
            "generation {m} exceeds depth {n}"
        )));
    }
    let b = params.interaction.b();
    let mut rec = Recursion::new(&params.dist, b, Blocks::none())?;
    rec.run_to(n - m)?;
    let (mut u, mut v) = (rec.state().u, rec.state().v);
    // d/ds of (s·u, s·v) at s=1
    let (mut au, mut av) = (u, v);
    for _ in 0..=m {
        let jac = df_map(u, v, &params.dist, b);
        let (nau, nav) = (
            jac[0][0] * au + jac[0][1] * av,
            jac[1][0] * au + jac[1][1] * av,
        );
        let (nu, nv) = f_map(u, v, &params.dist, b);
        au = nau;
        av = nav;
        u = nu;
        v = nv;
        if !(u.is_finite() && v.is_finite() && au.is_finite() && av.is_finite()) {
            return Err(Error::Overflow { last_step: n - m });
        }
    }
    Ok(if params.boundary == 1 { au / u } else { av / v })
}

// ───────────────────────────── log space ─────────────────────────────

/// Numerically stable `log Σ exp(tᵢ)`; `-∞` entries drop out, an `+∞`
/// entry dominates.
pub fn logsumexp(terms: &[f64]) -> f64 {
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY || m.is_infinite() {
        return m;
    }
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// Log-space iteration state: `Lu = log u`, `Lv = log v`, plus optional
/// logarithmic coupling derivatives `d log u/db`, `d log v/db`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRecState {
    pub n: usize,
    pub lu: f64,
    pub lv: f64,
    pub dlogu_db: Option<f64>,
    pub dlogv_db: Option<f64>,
}

/// The same iteration carried in log coordinates via log-sum-exp, stable
/// far beyond the floating-point range of `u, v` themselves.  In the
/// supercritical regime `Lv` grows like `2ⁿ`, so even the logarithm leaves
/// the double range near `n ≈ 1070`; overflow is reported, never silently
/// saturated.
#[derive(Clone, Debug)]
pub struct LogRecursion {
    dist: OffspringDist,
    b: f64,
    ln_b: f64,
    ln_p: Vec<f64>,
    track_b: bool,
    state: LogRecState,
}

impl LogRecursion {
    /// `b ≥ 1` (the ordering `0 ≤ Lu ≤ Lv` is relied on internally).
    pub fn new(dist: &OffspringDist, b: f64) -> Result<Self> {
        if !(b.is_finite() && b >= 1.0) {
            return Err(Error::InvalidParams(format!(
                "log-space iteration requires b ≥ 1, got {b}"
            )));
        }
        Ok(LogRecursion {
            dist: dist.clone(),
            b,
            ln_b: b.ln(),
            ln_p: dist.probs().iter().map(|p| p.ln()).collect(),
            track_b: false,
            state: LogRecState {
                n: 0,
                lu: 0.0,
                lv: 0.0,
                dlogu_db: None,
                dlogv_db: None,
            },
        })
    }

    /// Also carry `d log u/db` and `d log v/db` (zero at step 0).
    pub fn with_b_derivative(mut self) -> Self {
        self.track_b = true;
        self.state.dlogu_db = Some(0.0);
        self.state.dlogv_db = Some(0.0);
        self
    }

    pub fn state(&self) -> &LogRecState {
        &self.state
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn advance(&mut self) -> Result<&LogRecState> {
        let s = &self.state;
        let k_max = self.dist.k_max();
        // terms of log(p₀ + p₁u + Σ_{k≥2} p_k v^k)
        let mut terms = Vec::with_capacity(k_max as usize + 1);
        terms.push(self.ln_p[0]);
        terms.push(self.ln_p[1] + s.lu);
        for k in 2..=k_max {
            terms.push(self.ln_p[k as usize] + k as f64 * s.lv);
        }
        let lu_next = logsumexp(&terms);
        // v-row: the k ≥ 2 terms gain a factor b
        for t in terms.iter_mut().skip(2) {
            *t += self.ln_b;
        }
        let lv_next = logsumexp(&terms);

        let mut next = LogRecState {
            n: s.n + 1,
            lu: lu_next,
            lv: lv_next,
            dlogu_db: None,
            dlogv_db: None,
        };
        if self.track_b {
            let (gu, gv) = (s.dlogu_db.unwrap(), s.dlogv_db.unwrap());
            // t0 = log Σ_{k≥2} p_k v^k,  t1 = log Σ_{k≥2} k p_k v^k
            let mut t0_terms = Vec::with_capacity(k_max as usize - 1);
            let mut t1_terms = Vec::with_capacity(k_max as usize - 1);
            for k in 2..=k_max {
                let base = self.ln_p[k as usize] + k as f64 * s.lv;
                t0_terms.push(base);
                t1_terms.push((k as f64).ln() + base);
            }
            let t0 = logsumexp(&t0_terms);
            let t1 = logsumexp(&t1_terms);
            let p1 = self.dist.prob(1);
            next.dlogu_db = Some(p1 * (s.lu - lu_next).exp() * gu + (t1 - lu_next).exp() * gv);
            next.dlogv_db = Some(
                (t0 - lv_next).exp()
                    + p1 * (s.lu - lv_next).exp() * gu
                    + (self.ln_b + t1 - lv_next).exp() * gv,
            );
        }
        let finite = next.lu.is_finite()
            && next.lv.is_finite()
            && next.dlogu_db.map_or(true, f64::is_finite)
            && next.dlogv_db.map_or(true, f64::is_finite);
        if !finite {
            return Err(Error::Overflow { last_step: s.n });
        }
        self.state = next;
        Ok(&self.state)
    }

    pub fn run_to(&mut self, n_steps: usize) -> Result<&LogRecState> {
        while self.state.n < n_steps {
            self.advance()?;
        }
        Ok(&self.state)
    }
}
