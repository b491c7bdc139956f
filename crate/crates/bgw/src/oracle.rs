//! Exhaustive ground truth at small depth: depth-first enumeration of every
//! tree, exact partition functions and Gibbs expectations with compensated
//! summation, the product-measure relaxation of the spin representation, and
//! randomized correlation-inequality suites.
//!
//! Everything here is brute force by design; the recursion and MCMC modules
//! are tested against these values.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    gibbs_weight, lattice_size, InteractionKind, Label, ModelParams, OffspringDist, Tree,
};

/// Maximum tree count for APIs that materialize the whole list.
pub const MATERIALIZE_BUDGET: u128 = 100_000;
/// Maximum tree count for streaming enumeration (depth 4 at K=2 is ≈1.13e9).
pub const STREAM_BUDGET: u128 = 2_000_000_000;
/// Maximum number of spin configurations for full state-space sums.
pub const SPIN_STATE_BUDGET: u128 = 2_000_000;
/// Relative tolerance used when comparing against oracle values.
pub const ORACLE_REL_TOL: f64 = 1e-12;

// ───────────────────── compensated accumulation ─────────────────────

/// Kahan compensated accumulator; keeps error O(ε) independent of the
/// number of terms, which matters for sums over ~10⁹ trees.
#[derive(Clone, Copy, Debug, Default)]
pub struct Kahan {
    sum: f64,
    carry: f64,
}

impl Kahan {
    pub fn add(&mut self, x: f64) {
        let y = x - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum
    }
}

// ───────────────────────── tree enumeration ─────────────────────────

/// Number of distinct trees of the given depth:
/// `C₀ = K+1`, `C_n = Σ_{k=0}^{K} C_{n−1}^k` (saturating — values beyond
/// u128 only ever feed budget comparisons).
pub fn tree_count(depth: usize, k_max: u8) -> u128 {
    let mut c: u128 = k_max as u128 + 1;
    for _ in 0..depth {
        let mut s: u128 = 0;
        let mut pw: u128 = 1;
        for _ in 0..=k_max {
            s = s.saturating_add(pw);
            pw = pw.saturating_mul(c);
        }
        c = s;
    }
    c
}

fn check_budget(depth: usize, k_max: u8, budget: u128) -> Result<()> {
    if !(2..=9).contains(&k_max) {
        return Err(Error::InvalidParams(format!(
            "K must be in 2..=9, got {k_max}"
        )));
    }
    let count = tree_count(depth, k_max);
    if count > budget {
        return Err(Error::EnumerationBudget {
            depth,
            k: k_max,
            count,
            budget,
        });
    }
    Ok(())
}

fn dfs_trees<F: FnMut(&Tree)>(
    tree: &mut Tree,
    stack: &mut Vec<Label>,
    depth: usize,
    k_max: u8,
    visit: &mut F,
) {
    let Some(lab) = stack.pop() else {
        visit(tree);
        return;
    };
    let gen = lab.generation();
    for x in 0..=k_max {
        tree.nodes_mut().insert(lab.clone(), x);
        let kids = if gen < depth { x } else { 0 };
        for r in 1..=kids {
            stack.push(lab.child(r));
        }
        dfs_trees(tree, stack, depth, k_max, visit);
        for _ in 0..kids {
            stack.pop();
        }
    }
    tree.nodes_mut().remove(&lab);
    stack.push(lab);
}

/// Visit every tree of the given depth exactly once, depth-first, without
/// materializing the list.  Refuses when the count exceeds [`STREAM_BUDGET`].
pub fn for_each_tree<F: FnMut(&Tree)>(depth: usize, k_max: u8, mut visit: F) -> Result<()> {
    check_budget(depth, k_max, STREAM_BUDGET)?;
    let mut tree = Tree::from_nodes(depth, k_max, [(Label::root(), 0u8)])?;
    tree.nodes_mut().clear();
    let mut stack = vec![Label::root()];
    dfs_trees(&mut tree, &mut stack, depth, k_max, &mut visit);
    Ok(())
}

/// Materialize all trees of the given depth.  Refuses when the count
/// exceeds [`MATERIALIZE_BUDGET`]; use [`for_each_tree`] beyond that.
pub fn enumerate_trees(depth: usize, k_max: u8) -> Result<Vec<Tree>> {
    check_budget(depth, k_max, MATERIALIZE_BUDGET)?;
    let mut out = Vec::with_capacity(tree_count(depth, k_max) as usize);
    for_each_tree(depth, k_max, |t| out.push(t.clone()))?;
    Ok(out)
}

// ───────────────────────── exact Gibbs measure ─────────────────────────

/// The full exact Gibbs measure at small depth: every tree with its
/// normalized probability, plus the partition value.
pub struct ExactMeasure {
    params: ModelParams,
    entries: Vec<(Tree, f64)>,
    index: BTreeMap<Tree, usize>,
    partition: f64,
}

impl ExactMeasure {
    /// Enumerate, weigh, and normalize.  Requires the tree count within
    /// [`MATERIALIZE_BUDGET`].
    pub fn new(params: ModelParams) -> Result<Self> {
        check_budget(params.depth, params.k_max(), MATERIALIZE_BUDGET)?;
        let mut weights = Vec::new();
        let mut z = Kahan::default();
        let mut err = None;
        for_each_tree(params.depth, params.k_max(), |t| {
            if err.is_some() {
                return;
            }
            match gibbs_weight(t, &params) {
                Ok(w) => {
                    z.add(w);
                    weights.push((t.clone(), w));
                }
                Err(e) => err = Some(e),
            }
        })?;
        if let Some(e) = err {
            return Err(e);
        }
        let partition = z.value();
        if !(partition.is_finite() && partition > 0.0) {
            return Err(Error::Numerical(format!(
                "partition value {partition} is not a positive finite number"
            )));
        }
        let entries: Vec<(Tree, f64)> = weights
            .into_iter()
            .map(|(t, w)| (t, w / partition))
            .collect();
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, (t, _))| (t.clone(), i))
            .collect();
        Ok(ExactMeasure {
            params,
            entries,
            index,
            partition,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    /// Partition value `Ξ` at `(u,v) = (1,1)`.
    pub fn partition(&self) -> f64 {
        self.partition
    }

    /// All trees with their normalized probabilities, in enumeration order.
    pub fn entries(&self) -> &[(Tree, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Index of a tree in enumeration order.
    pub fn index_of(&self, tree: &Tree) -> Option<usize> {
        self.index.get(tree).copied()
    }

    /// Normalized probability of one tree.
    pub fn probability(&self, tree: &Tree) -> Option<f64> {
        self.index_of(tree).map(|i| self.entries[i].1)
    }

    /// `⟨f⟩` under the exact measure.
    pub fn expectation(&self, f: impl Fn(&Tree) -> f64) -> f64 {
        let mut acc = Kahan::default();
        for (t, p) in &self.entries {
            acc.add(p * f(t));
        }
        acc.value()
    }

    /// `⟨f;g⟩ = ⟨fg⟩ − ⟨f⟩⟨g⟩`.
    pub fn covariance(&self, f: impl Fn(&Tree) -> f64, g: impl Fn(&Tree) -> f64) -> f64 {
        let mut sf = Kahan::default();
        let mut sg = Kahan::default();
        let mut sfg = Kahan::default();
        for (t, p) in &self.entries {
            let fv = f(t);
            let gv = g(t);
            sf.add(p * fv);
            sg.add(p * gv);
            sfg.add(p * fv * gv);
        }
        sfg.value() - sf.value() * sg.value()
    }

    /// Total-variation distance to an empirical distribution given as
    /// per-tree visit counts (trees outside the support contribute their
    /// full empirical mass).
    pub fn tv_distance_to_counts(&self, counts: &BTreeMap<Tree, u64>, total: u64) -> f64 {
        let total = total as f64;
        let mut acc = Kahan::default();
        for (t, p) in &self.entries {
            let q = counts.get(t).map(|&c| c as f64 / total).unwrap_or(0.0);
            acc.add((p - q).abs());
        }
        for (t, &c) in counts {
            if self.index_of(t).is_none() {
                acc.add(c as f64 / total);
            }
        }
        0.5 * acc.value()
    }
}

// ─────────────────── streaming exact functionals ───────────────────

/// Graded partition value `Σ_ω P^GW(ω) e^{−βH^x(ω)} u^{L} v^{Q}` where `L`
/// and `Q` are the frontier-slot counts.  The `(u,v)` grading is defined for
/// the two-class interaction; general tables are accepted only at
/// `u = v = 1`.
pub fn partition_function(params: &ModelParams, u: f64, v: f64) -> Result<f64> {
    if !(u.is_finite() && v.is_finite() && u > 0.0 && v > 0.0) {
        return Err(Error::InvalidParams(format!(
            "grading point (u,v)=({u},{v}) must be positive and finite"
        )));
    }
    if params.interaction.kind() == InteractionKind::GeneralTable && (u != 1.0 || v != 1.0) {
        return Err(Error::Unsupported(
            "the (u,v) grading by frontier counts applies to the two-class interaction; \
             general tables are summed only at u=v=1"
                .into(),
        ));
    }
    check_budget(params.depth, params.k_max(), STREAM_BUDGET)?;
    let mut z = Kahan::default();
    let mut err = None;
    for_each_tree(params.depth, params.k_max(), |t| {
        if err.is_some() {
            return;
        }
        match gibbs_weight(t, params) {
            Ok(w) => {
                let (l, q) = t.frontier_counts();
                z.add(w * u.powi(l as i32) * v.powi(q as i32));
            }
            Err(e) => err = Some(e),
        }
    })?;
    if let Some(e) = err {
        return Err(e);
    }
    Ok(z.value())
}

/// Exact Gibbs expectation by a single streaming pass
/// (`Σ w f / Σ w`), usable beyond the materialization budget.
pub fn expectation(params: &ModelParams, f: impl Fn(&Tree) -> f64) -> Result<f64> {
    check_budget(params.depth, params.k_max(), STREAM_BUDGET)?;
    let mut z = Kahan::default();
    let mut num = Kahan::default();
    let mut err = None;
    for_each_tree(params.depth, params.k_max(), |t| {
        if err.is_some() {
            return;
        }
        match gibbs_weight(t, params) {
            Ok(w) => {
                z.add(w);
                num.add(w * f(t));
            }
            Err(e) => err = Some(e),
        }
    })?;
    if let Some(e) = err {
        return Err(e);
    }
    Ok(num.value() / z.value())
}

/// Exact Gibbs covariance `⟨fg⟩ − ⟨f⟩⟨g⟩` by a single streaming pass.
pub fn covariance(
    params: &ModelParams,
    f: impl Fn(&Tree) -> f64,
    g: impl Fn(&Tree) -> f64,
) -> Result<f64> {
    check_budget(params.depth, params.k_max(), STREAM_BUDGET)?;
    let mut z = Kahan::default();
    let mut sf = Kahan::default();
    let mut sg = Kahan::default();
    let mut sfg = Kahan::default();
    let mut err = None;
    for_each_tree(params.depth, params.k_max(), |t| {
        if err.is_some() {
            return;
        }
        match gibbs_weight(t, params) {
            Ok(w) => {
                let fv = f(t);
                let gv = g(t);
                z.add(w);
                sf.add(w * fv);
                sg.add(w * gv);
                sfg.add(w * fv * gv);
            }
            Err(e) => err = Some(e),
        }
    })?;
    if let Some(e) = err {
        return Err(e);
    }
    let zz = z.value();
    Ok(sfg.value() / zz - (sf.value() / zz) * (sg.value() / zz))
}

/// `⟨Σ_{|i|=m} X_i⟩`: mean total offspring announced by generation `m`,
/// i.e. the mean population of generation `m+1`.
pub fn generation_offspring_mean(params: &ModelParams, m: usize) -> Result<f64> {
    if m > params.depth {
        return Err(Error::InvalidParams(format!(
            "generation {m} exceeds depth {}",
            params.depth
        )));
    }
    expectation(params, |t| t.generation_offspring_total(m) as f64)
}

// ─────────────── product-measure relaxation (spin space) ───────────────

/// Total-variation distance between the soft product measure
/// `μ_λ(χ) ∝ e^{λ·S(χ)} Π p_{X_i}` (with `p_{-1} = 1` and `S` the number
/// of satisfied presence constraints) and the exact hard-constraint measure
/// `μ(χ) = Π p_{X_i} · 1{χ valid}`, summed over the full spin state space
/// `{-1,…,K}^{Λ_n}`.  The distance decreases to 0 as `λ → ∞`.
pub fn mu_lambda_tv(dist: &OffspringDist, depth: usize, boundary: u8, lambda: f64) -> Result<f64> {
    let k_max = dist.k_max();
    if boundary < 1 || boundary > k_max {
        return Err(Error::InvalidParams(format!(
            "boundary x={boundary} outside 1..={k_max}"
        )));
    }
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::InvalidParams(format!(
            "λ must be finite and ≥ 0, got {lambda}"
        )));
    }
    let sites = lattice_size(depth, k_max)?;
    let values = k_max as u128 + 2; // spin alphabet {-1, 0, …, K}
    let states = values
        .checked_pow(u32::try_from(sites).unwrap_or(u32::MAX))
        .unwrap_or(u128::MAX);
    if states > SPIN_STATE_BUDGET {
        return Err(Error::EnumerationBudget {
            depth,
            k: k_max,
            count: states,
            budget: SPIN_STATE_BUDGET,
        });
    }

    let k = k_max as usize;
    // per-site constraint with the boundary standing in for the root parent
    let constraint_ok = |spins: &[i8], site: usize| -> bool {
        let xa = if site == 0 {
            boundary as i8
        } else {
            spins[(site - 1) / k]
        };
        let r = if site == 0 {
            1
        } else {
            ((site - 1) % k) as i8 + 1
        };
        let x = spins[site];
        (xa >= r && x >= 0) || (xa < r && x < 0)
    };

    // Pass 1: the soft normalizer, with the exponent shifted by the ground
    // level so every Boltzmann factor is ≤ 1 (λ·|Λ_n| can otherwise
    // overflow the exponential).
    let mut spins = vec![-1i8; sites];
    let mut z_soft = Kahan::default();
    let mut done = false;
    while !done {
        let mut weight = 1.0f64;
        let mut satisfied = 0usize;
        for site in 0..sites {
            let s = spins[site];
            if s >= 0 {
                weight *= dist.prob(s as u8);
            }
            if constraint_ok(&spins, site) {
                satisfied += 1;
            }
        }
        z_soft.add(weight * (lambda * (satisfied as f64 - sites as f64)).exp());
        // odometer over {-1,…,K}^sites
        done = true;
        for s in spins.iter_mut() {
            if *s < k_max as i8 {
                *s += 1;
                done = false;
                break;
            } else {
                *s = -1;
            }
        }
    }
    let z_soft = z_soft.value();

    // Pass 2: TV distance.  The hard measure is already normalized
    // (valid-config weights sum over exactly the depth-n trees).
    let mut spins = vec![-1i8; sites];
    let mut tv = Kahan::default();
    let mut done = false;
    while !done {
        let mut weight = 1.0f64;
        let mut satisfied = 0usize;
        for site in 0..sites {
            let s = spins[site];
            if s >= 0 {
                weight *= dist.prob(s as u8);
            }
            if constraint_ok(&spins, site) {
                satisfied += 1;
            }
        }
        let soft = weight * (lambda * (satisfied as f64 - sites as f64)).exp() / z_soft;
        let hard = if satisfied == sites { weight } else { 0.0 };
        tv.add((soft - hard).abs());
        done = true;
        for s in spins.iter_mut() {
            if *s < k_max as i8 {
                *s += 1;
                done = false;
                break;
            } else {
                *s = -1;
            }
        }
    }
    Ok(0.5 * tv.value())
}

// ───────────────────── random observables & suites ─────────────────────

/// Declared monotonicity class of an observable, deciding which inequality
/// suite may use it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObservableClass {
    /// Sum with nonnegative coefficients of products of nondecreasing
    /// nonnegative single-site spin functions vanishing on absent sites.
    Cone,
    /// Nondecreasing function of the full spin vector.
    Monotone,
    /// No structure claimed.
    General,
}

/// A tree observable with its declared class.  The class declaration is the
/// caller's responsibility; suites only pair same-class observables.
pub struct Observable {
    class: ObservableClass,
    f: Box<dyn Fn(&Tree) -> f64 + Send + Sync>,
}

impl Observable {
    pub fn new(class: ObservableClass, f: impl Fn(&Tree) -> f64 + Send + Sync + 'static) -> Self {
        Observable { class, f: Box::new(f) }
    }

    pub fn class(&self) -> ObservableClass {
        self.class
    }

    pub fn eval(&self, tree: &Tree) -> f64 {
        (self.f)(tree)
    }

    /// Spin value at a label: the offspring count if present, -1 if absent.
    pub fn spin_of(tree: &Tree, label: &Label) -> i8 {
        tree.offspring(label).map(|x| x as i8).unwrap_or(-1)
    }

    /// Random cone observable: `Σ_m w_m Π_j g_{m,j}(X_{i_{m,j}})` with
    /// `w_m ≥ 0` and each factor either a threshold indicator `1{X ≥ t}`
    /// (`t ≥ 0`) or a power `((X+1)/(K+1))^a` — nondecreasing, nonnegative,
    /// and vanishing at -1.
    pub fn random_cone<R: Rng + ?Sized>(depth: usize, k_max: u8, rng: &mut R) -> Observable {
        #[derive(Clone)]
        enum Factor {
            Threshold(i8),
            Power(i32),
        }
        let n_monomials = rng.random_range(1..=3usize);
        let mut monomials = Vec::with_capacity(n_monomials);
        for _ in 0..n_monomials {
            let w: f64 = rng.random::<f64>();
            let n_factors = rng.random_range(1..=3usize);
            let mut factors = Vec::with_capacity(n_factors);
            for _ in 0..n_factors {
                let label = random_label(depth, k_max, rng);
                let factor = if rng.random::<bool>() {
                    Factor::Threshold(rng.random_range(0..=k_max as i8))
                } else {
                    Factor::Power(rng.random_range(1..=2i32))
                };
                factors.push((label, factor));
            }
            monomials.push((w, factors));
        }
        let k1 = (k_max + 1) as f64;
        Observable::new(ObservableClass::Cone, move |tree| {
            let mut total = 0.0;
            for (w, factors) in &monomials {
                let mut prod = *w;
                for (label, factor) in factors {
                    let x = Observable::spin_of(tree, label);
                    prod *= match factor {
                        Factor::Threshold(t) => {
                            if x >= *t {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Factor::Power(a) => ((x + 1) as f64 / k1).powi(*a),
                    };
                }
                total += prod;
            }
            total
        })
    }

    /// Random monotone observable: `Σ_i w_i 1{X_i ≥ t_i}` over a random
    /// subset of sites with nonnegative weights and thresholds in `{0..K}`.
    pub fn random_monotone<R: Rng + ?Sized>(depth: usize, k_max: u8, rng: &mut R) -> Observable {
        let mut terms: Vec<(Label, i8, f64)> = Vec::new();
        for gen in 0..=depth {
            for_each_label_of_generation(gen, k_max, &mut |label| {
                if rng.random::<f64>() < 0.5 {
                    terms.push((
                        label.clone(),
                        rng.random_range(0..=k_max as i8),
                        rng.random::<f64>(),
                    ));
                }
            });
        }
        Observable::new(ObservableClass::Monotone, move |tree| {
            terms
                .iter()
                .map(|(label, t, w)| {
                    if Observable::spin_of(tree, label) >= *t {
                        *w
                    } else {
                        0.0
                    }
                })
                .sum()
        })
    }
}

fn random_label<R: Rng + ?Sized>(depth: usize, k_max: u8, rng: &mut R) -> Label {
    let gen = rng.random_range(0..=depth);
    let digits: Vec<u8> = (0..gen).map(|_| rng.random_range(1..=k_max)).collect();
    Label::from_digits(&digits).expect("digits are 1-based")
}

fn for_each_label_of_generation(gen: usize, k_max: u8, visit: &mut impl FnMut(&Label)) {
    fn rec(prefix: &mut Vec<u8>, remaining: usize, k_max: u8, visit: &mut impl FnMut(&Label)) {
        if remaining == 0 {
            visit(&Label::from_digits(prefix).expect("digits are 1-based"));
            return;
        }
        for d in 1..=k_max {
            prefix.push(d);
            rec(prefix, remaining - 1, k_max, visit);
            prefix.pop();
        }
    }
    rec(&mut Vec::new(), gen, k_max, visit);
}

/// Result of a randomized correlation-inequality run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SuiteReport {
    pub min_covariance: f64,
    pub trials: u64,
    pub seed: u64,
    pub pass: bool,
}

/// Draw `trials` random observable pairs of the given class, compute their
/// exact covariances under the Gibbs measure, and report the minimum.
/// Passes iff the minimum is ≥ -1e-12.
///
/// Preconditions checked here: the `Cone` suite requires `-φ` in the
/// positive cone (attractive product structure); the `Monotone` suite
/// requires the lattice condition on `φ`.
pub fn inequality_suite(
    params: &ModelParams,
    class: ObservableClass,
    trials: u64,
    seed: u64,
) -> Result<SuiteReport> {
    match class {
        ObservableClass::Cone => {
            if let Some(v) = params.interaction.cone_condition_check() {
                return Err(Error::HypothesisViolated(format!(
                    "-φ is not in the positive cone: negative mixed difference {:.3e} at {:?}",
                    v.gap, v.first
                )));
            }
        }
        ObservableClass::Monotone => {
            if let Some(v) = params.interaction.fkg_condition_check() {
                return Err(Error::HypothesisViolated(format!(
                    "φ violates the lattice condition at {:?} vs {:?} by {:.3e}",
                    v.first, v.second, v.gap
                )));
            }
        }
        ObservableClass::General => {
            return Err(Error::InvalidParams(
                "no inequality is claimed for the General class".into(),
            ));
        }
    }
    let measure = ExactMeasure::new(params.clone())?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut min_cov = f64::INFINITY;
    for _ in 0..trials {
        let (f, g) = match class {
            ObservableClass::Cone => (
                Observable::random_cone(params.depth, params.k_max(), &mut rng),
                Observable::random_cone(params.depth, params.k_max(), &mut rng),
            ),
            ObservableClass::Monotone => (
                Observable::random_monotone(params.depth, params.k_max(), &mut rng),
                Observable::random_monotone(params.depth, params.k_max(), &mut rng),
            ),
            ObservableClass::General => unreachable!(),
        };
        let cov = measure.covariance(|t| f.eval(t), |t| g.eval(t));
        if cov < min_cov {
            min_cov = cov;
        }
    }
    if trials == 0 {
        min_cov = 0.0;
    }
    Ok(SuiteReport {
        min_covariance: min_cov,
        trials,
        seed,
        pass: min_cov >= -1e-12,
    })
}
