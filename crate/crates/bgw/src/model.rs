//! Core domain types: offspring distributions, pair interactions, trees with
//! Neveu labels, and the equivalent spin representation on the maximal tree.
//!
//! Conventions used throughout the crate:
//!
//! * A tree of depth `n` assigns an offspring count `X_i ∈ {0..K}` to every
//!   present node of generations `0..=n`.  Children of generation-`n` nodes
//!   are *external* slots: they are counted by the frontier observables but
//!   carry no offspring variable of their own.
//! * Node addresses are Neveu labels: the digit string of child ranks from
//!   the root, with the root the empty string.  Digits are 1-based, so the
//!   children of `i` are `i·1 … i·X_i`.
//! * The energy of a tree is the sum over present nodes `i` of
//!   `φ(X_{a(i)}, X_i)` where `a(i)` is the parent; the root link uses the
//!   boundary value `x ∈ {1..K}` in place of the missing parent.
//! * The spin representation lives on the maximal K-ary tree of depth `n`:
//!   `-1` marks an absent site, `0..K` the offspring count of a present one.
//!   The root is treated as the first child of its virtual ancestor, i.e.
//!   its rank is 1.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities are accepted as normalized when their sum is within this
/// distance of 1; no silent renormalization is ever applied.
pub const PROB_SUM_TOL: f64 = 1e-12;

// ───────────────────────────── Neveu labels ─────────────────────────────

/// A node address: the digit string of 1-based child ranks from the root.
/// The root is the empty string.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Default)]
pub struct Label(Vec<u8>);

impl Label {
    /// The root address (empty digit string).
    pub fn root() -> Self {
        Label(Vec::new())
    }

    /// Build a label from explicit digits; digits must be ≥ 1.
    pub fn from_digits(digits: &[u8]) -> Result<Self> {
        if digits.iter().any(|&d| d == 0) {
            return Err(Error::InvalidTree("label digits are 1-based".into()));
        }
        Ok(Label(digits.to_vec()))
    }

    /// The address of this node's `rank`-th child.
    pub fn child(&self, rank: u8) -> Label {
        let mut d = self.0.clone();
        d.push(rank);
        Label(d)
    }

    /// Parent address, or `None` for the root.
    pub fn parent(&self) -> Option<Label> {
        if self.0.is_empty() {
            None
        } else {
            Label(self.0[..self.0.len() - 1].to_vec()).into()
        }
    }

    /// Child rank within the parent.  The root counts as the first (and
    /// only) child of its virtual ancestor, so its rank is 1.
    pub fn rank(&self) -> u8 {
        self.0.last().copied().unwrap_or(1)
    }

    /// Generation (distance from the root).
    pub fn generation(&self) -> usize {
        self.0.len()
    }

    pub fn digits(&self) -> &[u8] {
        &self.0
    }

    /// Breadth-first site index in the maximal K-ary tree
    /// (root = 0, children of site `m` are `mK+1 … mK+K`).
    pub fn site_index(&self, k_max: u8) -> usize {
        let k = k_max as usize;
        self.0.iter().fold(0usize, |idx, &d| idx * k + d as usize)
    }

    /// Inverse of [`site_index`](Self::site_index).
    pub fn from_site_index(k_max: u8, mut idx: usize) -> Label {
        let k = k_max as usize;
        let mut digits = Vec::new();
        while idx > 0 {
            let d = (idx - 1) % k + 1;
            digits.push(d as u8);
            idx = (idx - 1) / k;
        }
        digits.reverse();
        Label(digits)
    }

    /// Parse a digit string, e.g. `""` (root), `"21"`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut digits = Vec::with_capacity(s.len());
        for c in s.chars() {
            let d = c
                .to_digit(10)
                .ok_or_else(|| Error::InvalidTree(format!("bad label character {c:?}")))?;
            if d == 0 {
                return Err(Error::InvalidTree("label digits are 1-based".into()));
            }
            digits.push(d as u8);
        }
        Ok(Label(digits))
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for d in &self.0 {
            write!(f, "{d}")?;
        }
        Ok(())
    }
}

// ─────────────────────── offspring distribution ───────────────────────

/// A bounded offspring distribution `p_0 … p_K` with `K ≥ 2` and `p_K > 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct OffspringDist {
    probs: Vec<f64>,
    mean: f64,
}

impl OffspringDist {
    /// Validate and build.  Requirements: length `K+1` with `2 ≤ K ≤ 9`
    /// (labels are single decimal digits), entries finite and nonnegative,
    /// sum within [`PROB_SUM_TOL`] of 1, and `p_K > 0` so that `K` really is
    /// the maximum of the support.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 3 {
            return Err(Error::InvalidDistribution(format!(
                "need K ≥ 2 (at least p0,p1,p2), got {} entries",
                probs.len()
            )));
        }
        if probs.len() > 10 {
            return Err(Error::InvalidDistribution(
                "K ≤ 9 supported (node labels are single decimal digits)".into(),
            ));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidDistribution(
                "entries must be finite and nonnegative".into(),
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::InvalidDistribution(format!(
                "probabilities sum to {sum:.17}, off by more than {PROB_SUM_TOL:e}; \
                 renormalize explicitly with OffspringDist::renormalized if intended"
            )));
        }
        if *probs.last().unwrap() <= 0.0 {
            return Err(Error::InvalidDistribution(
                "p_K must be positive (drop trailing zeros)".into(),
            ));
        }
        let mean = probs.iter().enumerate().map(|(k, p)| k as f64 * p).sum();
        Ok(OffspringDist { probs, mean })
    }

    /// Build after explicitly rescaling the entries to sum to 1.
    pub fn renormalized(probs: Vec<f64>) -> Result<Self> {
        let sum: f64 = probs.iter().sum();
        if !(sum.is_finite() && sum > 0.0) {
            return Err(Error::InvalidDistribution(
                "cannot renormalize: entries do not sum to a positive number".into(),
            ));
        }
        Self::new(probs.into_iter().map(|p| p / sum).collect())
    }

    /// Maximum offspring count `K`.
    pub fn k_max(&self) -> u8 {
        (self.probs.len() - 1) as u8
    }

    /// `p_k`; zero outside `0..=K`.
    pub fn prob(&self, k: u8) -> f64 {
        self.probs.get(k as usize).copied().unwrap_or(0.0)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Mean offspring number `k̄ = Σ k p_k` (cached).
    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Largest probability, used by the accelerated chain variant.
    pub fn max_prob(&self) -> f64 {
        self.probs.iter().cloned().fold(0.0, f64::max)
    }

    /// Draw one offspring count by inverse CDF.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u8 {
        let mut t: f64 = rng.random();
        for (k, p) in self.probs.iter().enumerate() {
            t -= p;
            if t < 0.0 {
                return k as u8;
            }
        }
        self.k_max()
    }
}

// ───────────────────────────── interaction ─────────────────────────────

/// Which family an interaction table belongs to.  The two-class indicator
/// `φ(X,Y) = -1_{X≥2} 1_{Y≥2}` is the form with a closed recursion; general
/// tables are served by enumeration and MCMC only.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InteractionKind {
    TwoClassIndicator,
    GeneralTable,
}

/// Pair energy `φ(X_parent, X_child)` on `{-1,0,…,K}²`, extended by zero
/// whenever either argument is `-1` (absent site).
#[derive(Clone, Debug)]
pub struct Interaction {
    k_max: u8,
    beta: f64,
    b: f64,
    kind: InteractionKind,
    table: Vec<f64>, // (K+2)² row-major, row = parent value + 1
}

/// First quadruple violating the FKG lattice condition, with the gap
/// `φ(min)+φ(max) - φ(s)-φ(s')` (negative on violation).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatticeViolation {
    pub first: (i8, i8),
    pub second: (i8, i8),
    pub gap: f64,
}

impl Interaction {
    fn idx(&self, xa: i8, xi: i8) -> usize {
        let side = self.k_max as usize + 2;
        (xa + 1) as usize * side + (xi + 1) as usize
    }

    fn build_table(k_max: u8, phi: impl Fn(i8, i8) -> f64) -> Vec<f64> {
        let side = k_max as usize + 2;
        let mut table = vec![0.0; side * side];
        for xa in -1..=k_max as i8 {
            for xi in -1..=k_max as i8 {
                let v = if xa < 0 || xi < 0 { 0.0 } else { phi(xa, xi) };
                table[(xa + 1) as usize * side + (xi + 1) as usize] = v;
            }
        }
        table
    }

    fn check_k(k_max: u8) -> Result<()> {
        if !(2..=9).contains(&k_max) {
            return Err(Error::InvalidInteraction(format!(
                "K must be in 2..=9, got {k_max}"
            )));
        }
        Ok(())
    }

    /// The two-class indicator `φ(X,Y) = -1_{X≥2} 1_{Y≥2}` at inverse
    /// temperature `β`; each favoured link multiplies the Gibbs weight by
    /// `b = e^β`.
    pub fn two_class(k_max: u8, beta: f64) -> Result<Self> {
        Self::check_k(k_max)?;
        if !beta.is_finite() {
            return Err(Error::InvalidInteraction("β must be finite".into()));
        }
        let b = beta.exp();
        if !b.is_finite() || b <= 0.0 {
            return Err(Error::InvalidInteraction(format!(
                "e^β not representable for β = {beta}"
            )));
        }
        Ok(Interaction {
            k_max,
            beta,
            b,
            kind: InteractionKind::TwoClassIndicator,
            table: Self::build_table(k_max, |xa, xi| {
                if xa >= 2 && xi >= 2 {
                    -1.0
                } else {
                    0.0
                }
            }),
        })
    }

    /// Two-class indicator parametrized by the link weight `b = e^β > 0`.
    pub fn two_class_from_b(k_max: u8, b: f64) -> Result<Self> {
        if !(b.is_finite() && b > 0.0) {
            return Err(Error::InvalidInteraction(format!(
                "link weight b must be positive and finite, got {b}"
            )));
        }
        let mut it = Self::two_class(k_max, b.ln())?;
        it.b = b; // keep the caller's b exactly
        Ok(it)
    }

    /// A general pair energy given as a table on `{0..K}²`; the extension by
    /// zero to absent sites is applied here.
    pub fn general(k_max: u8, beta: f64, phi: impl Fn(i8, i8) -> f64) -> Result<Self> {
        Self::check_k(k_max)?;
        if !beta.is_finite() {
            return Err(Error::InvalidInteraction("β must be finite".into()));
        }
        let table = Self::build_table(k_max, phi);
        if table.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInteraction(
                "φ values must be finite".into(),
            ));
        }
        Ok(Interaction {
            k_max,
            beta,
            b: beta.exp(),
            kind: InteractionKind::GeneralTable,
            table,
        })
    }

    pub fn k_max(&self) -> u8 {
        self.k_max
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Per-favoured-link weight `e^β`; meaningful for the two-class kind.
    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn kind(&self) -> InteractionKind {
        self.kind
    }

    /// `φ(xa, xi)`, zero when either argument is -1.
    pub fn phi(&self, xa: i8, xi: i8) -> f64 {
        debug_assert!(xa >= -1 && xa <= self.k_max as i8);
        debug_assert!(xi >= -1 && xi <= self.k_max as i8);
        self.table[self.idx(xa, xi)]
    }

    /// Check the FKG lattice condition
    /// `φ(s∧s') + φ(s∨s') ≤ φ(s) + φ(s')` for all pairs of spin pairs,
    /// returning the first violating quadruple if any.
    pub fn fkg_condition_check(&self) -> Option<LatticeViolation> {
        let k = self.k_max as i8;
        for xa in -1..=k {
            for xi in -1..=k {
                for ya in -1..=k {
                    for yi in -1..=k {
                        let lo = self.phi(xa.min(ya), xi.min(yi));
                        let hi = self.phi(xa.max(ya), xi.max(yi));
                        let gap = self.phi(xa, xi) + self.phi(ya, yi) - lo - hi;
                        if gap < -1e-12 {
                            return Some(LatticeViolation {
                                first: (xa, xi),
                                second: (ya, yi),
                                gap: -gap,
                            });
                        }
                    }
                }
            }
        }
        None
    }

    /// Check that `-φ` lies in the positive cone of products of
    /// nondecreasing nonnegative single-spin functions vanishing at -1.
    /// Equivalent criterion: every two-dimensional finite difference of
    /// `-φ` over `{0..K}²` (with the zero extension at -1) is nonnegative.
    /// Returns the first negative difference if any.
    pub fn cone_condition_check(&self) -> Option<LatticeViolation> {
        let h = |xa: i8, xi: i8| -self.phi(xa, xi);
        let k = self.k_max as i8;
        for s in 0..=k {
            for t in 0..=k {
                let c = h(s, t) - h(s - 1, t) - h(s, t - 1) + h(s - 1, t - 1);
                if c < -1e-12 {
                    return Some(LatticeViolation {
                        first: (s, t),
                        second: (s - 1, t - 1),
                        gap: -c,
                    });
                }
            }
        }
        None
    }
}

// ───────────────────────────── parameters ─────────────────────────────

/// A complete model: offspring law, interaction, boundary value for the
/// root's virtual parent, and tree depth.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub dist: OffspringDist,
    pub interaction: Interaction,
    /// Boundary offspring value `x ∈ {1..K}` of the root's virtual parent.
    pub boundary: u8,
    /// Offspring variables are assigned for generations `0..=depth`.
    pub depth: usize,
}

impl ModelParams {
    pub fn new(
        dist: OffspringDist,
        interaction: Interaction,
        boundary: u8,
        depth: usize,
    ) -> Result<Self> {
        if interaction.k_max() != dist.k_max() {
            return Err(Error::InvalidParams(format!(
                "interaction K={} does not match distribution K={}",
                interaction.k_max(),
                dist.k_max()
            )));
        }
        if boundary < 1 || boundary > dist.k_max() {
            return Err(Error::InvalidParams(format!(
                "boundary x must lie in 1..={}, got {boundary}",
                dist.k_max()
            )));
        }
        Ok(ModelParams {
            dist,
            interaction,
            boundary,
            depth,
        })
    }

    pub fn k_max(&self) -> u8 {
        self.dist.k_max()
    }
}

// ──────────────────────────────── trees ────────────────────────────────

/// A finite tree of depth `n`: an offspring count for every present node of
/// generations `0..=n`, stored by Neveu label.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Tree {
    depth: usize,
    k_max: u8,
    nodes: BTreeMap<Label, u8>,
}

impl Tree {
    /// A depth-0 tree: only the root carries an offspring count.
    pub fn root_only(depth: usize, k_max: u8, x0: u8) -> Result<Self> {
        if x0 > k_max {
            return Err(Error::InvalidTree(format!("X₀={x0} exceeds K={k_max}")));
        }
        let mut nodes = BTreeMap::new();
        nodes.insert(Label::root(), x0);
        let t = Tree {
            depth,
            k_max,
            nodes,
        };
        if depth > 0 && x0 > 0 {
            // children of the root would be unassigned
            return Err(Error::InvalidTree(
                "root_only requires X₀=0 when depth > 0".into(),
            ));
        }
        Ok(t)
    }

    /// Assemble from explicit (label, offspring) pairs and validate.
    pub fn from_nodes(
        depth: usize,
        k_max: u8,
        nodes: impl IntoIterator<Item = (Label, u8)>,
    ) -> Result<Self> {
        let t = Tree {
            depth,
            k_max,
            nodes: nodes.into_iter().collect(),
        };
        t.validate()?;
        Ok(t)
    }

    /// Draw a tree of the given depth from the free branching measure:
    /// every present node of generations `0..=depth` begets `k` children
    /// with probability `p_k`, independently.
    pub fn sample_gw<R: Rng + ?Sized>(depth: usize, dist: &OffspringDist, rng: &mut R) -> Tree {
        let mut nodes = BTreeMap::new();
        let mut frontier = vec![Label::root()];
        for gen in 0..=depth {
            let mut next = Vec::new();
            for lab in frontier {
                let x = dist.sample(rng);
                if gen < depth {
                    for r in 1..=x {
                        next.push(lab.child(r));
                    }
                }
                nodes.insert(lab, x);
            }
            frontier = next;
        }
        Tree {
            depth,
            k_max: dist.k_max(),
            nodes,
        }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn k_max(&self) -> u8 {
        self.k_max
    }

    /// Number of present nodes (with assigned offspring counts).
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn offspring(&self, label: &Label) -> Option<u8> {
        self.nodes.get(label).copied()
    }

    pub fn contains(&self, label: &Label) -> bool {
        self.nodes.contains_key(label)
    }

    /// Nodes in label (depth-first) order.
    pub fn nodes(&self) -> impl Iterator<Item = (&Label, u8)> {
        self.nodes.iter().map(|(l, &x)| (l, x))
    }

    pub(crate) fn nodes_mut(&mut self) -> &mut BTreeMap<Label, u8> {
        &mut self.nodes
    }

    /// Structural invariants: root present; every node's label digits obey
    /// `1 ≤ digit ≤ X_parent`; offspring counts ≤ K; every non-frontier node
    /// has exactly its announced children present; generations ≤ depth.
    pub fn validate(&self) -> Result<()> {
        if !self.contains(&Label::root()) {
            return Err(Error::InvalidTree("root absent".into()));
        }
        for (lab, x) in self.nodes() {
            if x > self.k_max {
                return Err(Error::InvalidTree(format!(
                    "node {lab} has offspring {x} > K={}",
                    self.k_max
                )));
            }
            let gen = lab.generation();
            if gen > self.depth {
                return Err(Error::InvalidTree(format!(
                    "node {lab} beyond depth {}",
                    self.depth
                )));
            }
            if let Some(parent) = lab.parent() {
                match self.offspring(&parent) {
                    None => {
                        return Err(Error::InvalidTree(format!("node {lab} has absent parent")))
                    }
                    Some(px) if lab.rank() > px => {
                        return Err(Error::InvalidTree(format!(
                            "node {lab} has rank {} but parent offspring {px}",
                            lab.rank()
                        )))
                    }
                    _ => {}
                }
            }
            if gen < self.depth {
                for r in 1..=x {
                    if !self.contains(&lab.child(r)) {
                        return Err(Error::InvalidTree(format!(
                            "node {lab} announces {x} children but child {r} is absent"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Frontier slot counts `(L, Q)`: external (generation depth+1) slots
    /// whose parent has exactly one offspring, respectively at least two.
    pub fn frontier_counts(&self) -> (u64, u64) {
        let mut l = 0;
        let mut q = 0;
        for (lab, x) in self.nodes() {
            if lab.generation() == self.depth {
                if x == 1 {
                    l += 1;
                } else if x >= 2 {
                    q += x as u64;
                }
            }
        }
        (l, q)
    }

    /// Number of favoured links: parent-child links (including the root's
    /// boundary link) whose two offspring counts are both ≥ 2.
    pub fn favoured_links(&self, boundary: u8) -> u64 {
        let mut n22 = 0;
        for (lab, x) in self.nodes() {
            let xa = match lab.parent() {
                None => boundary,
                Some(p) => self.offspring(&p).expect("validated tree"),
            };
            if xa >= 2 && x >= 2 {
                n22 += 1;
            }
        }
        n22
    }

    /// `Σ_{|i|=m} X_i`: total offspring announced by generation-`m` nodes,
    /// i.e. the population of generation `m+1` (external slots when
    /// `m = depth`).
    pub fn generation_offspring_total(&self, m: usize) -> u64 {
        self.nodes()
            .filter(|(lab, _)| lab.generation() == m)
            .map(|(_, x)| x as u64)
            .sum()
    }

    /// Serialize with the boundary value to the interchange JSON form
    /// `{"n":…, "x":…, "offspring": {"": X₀, "1": X₁, …}}`.
    pub fn to_json(&self, boundary: u8) -> String {
        let record = TreeRecord {
            n: self.depth,
            x: boundary,
            offspring: self
                .nodes()
                .map(|(lab, x)| (lab.to_string(), x))
                .collect(),
        };
        serde_json::to_string(&record).expect("tree record serializes")
    }

    /// Parse the interchange JSON form; `k_max` comes from the surrounding
    /// model because the schema does not carry it.  Returns the tree and
    /// the boundary value.
    pub fn from_json(text: &str, k_max: u8) -> Result<(Tree, u8)> {
        let record: TreeRecord = serde_json::from_str(text)
            .map_err(|e| Error::InvalidTree(format!("bad tree JSON: {e}")))?;
        let mut nodes = BTreeMap::new();
        for (key, x) in record.offspring {
            nodes.insert(Label::parse(&key)?, x);
        }
        let tree = Tree {
            depth: record.n,
            k_max,
            nodes,
        };
        tree.validate()?;
        if record.x < 1 || record.x > k_max {
            return Err(Error::InvalidTree(format!(
                "boundary x={} outside 1..={k_max}",
                record.x
            )));
        }
        Ok((tree, record.x))
    }
}

#[derive(Serialize, Deserialize)]
struct TreeRecord {
    n: usize,
    x: u8,
    offspring: BTreeMap<String, u8>,
}

// ─────────────────────────── tree functionals ───────────────────────────

/// Probability of the tree under the free branching measure:
/// `Π_{i} p_{X_i}` over present nodes.
pub fn gw_probability(tree: &Tree, dist: &OffspringDist) -> Result<f64> {
    if tree.k_max() != dist.k_max() {
        return Err(Error::InvalidParams(format!(
            "tree K={} vs distribution K={}",
            tree.k_max(),
            dist.k_max()
        )));
    }
    Ok(tree.nodes().map(|(_, x)| dist.prob(x)).product())
}

/// Total pair energy `H^x(ω) = Σ_i φ(X_{a(i)}, X_i)` with the boundary
/// value standing in for the root's parent.
pub fn hamiltonian(tree: &Tree, params: &ModelParams) -> Result<f64> {
    if tree.k_max() != params.k_max() {
        return Err(Error::InvalidParams("tree K mismatch".into()));
    }
    let mut h = 0.0;
    for (lab, x) in tree.nodes() {
        let xa = match lab.parent() {
            None => params.boundary,
            Some(p) => tree
                .offspring(&p)
                .ok_or_else(|| Error::InvalidTree(format!("node {lab} has absent parent")))?,
        };
        h += params.interaction.phi(xa as i8, x as i8);
    }
    Ok(h)
}

/// Unnormalized Gibbs weight `P^GW(ω) e^{-βH^x(ω)}`.  For the two-class
/// indicator this is computed as `P^GW(ω) b^{N₂₂}` with an integer power,
/// which matches the recursion module bit for bit.
pub fn gibbs_weight(tree: &Tree, params: &ModelParams) -> Result<f64> {
    let p = gw_probability(tree, &params.dist)?;
    match params.interaction.kind() {
        InteractionKind::TwoClassIndicator => {
            let n22 = tree.favoured_links(params.boundary);
            Ok(p * params.interaction.b().powi(n22 as i32))
        }
        InteractionKind::GeneralTable => {
            let h = hamiltonian(tree, params)?;
            Ok(p * (-params.interaction.beta() * h).exp())
        }
    }
}

// ────────────────────────── spin representation ──────────────────────────

/// Number of sites of the maximal K-ary tree of depth `n`:
/// `(K^{n+1} - 1)/(K - 1)`.
pub fn lattice_size(depth: usize, k_max: u8) -> Result<usize> {
    let k = k_max as u128;
    let mut size: u128 = 0;
    let mut level: u128 = 1;
    for _ in 0..=depth {
        size += level;
        if size > usize::MAX as u128 {
            return Err(Error::EnumerationBudget {
                depth,
                k: k_max,
                count: u128::MAX,
                budget: usize::MAX as u128,
            });
        }
        level = level.saturating_mul(k);
    }
    Ok(size as usize)
}

/// Spin configuration on the maximal K-ary tree of depth `n`, stored as a
/// flat array in breadth-first site order.  Values: `-1` absent, `0..=K`
/// the offspring count of a present site.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpinConfig {
    depth: usize,
    k_max: u8,
    spins: Vec<i8>,
}

impl SpinConfig {
    pub fn new(depth: usize, k_max: u8, spins: Vec<i8>) -> Result<Self> {
        let want = lattice_size(depth, k_max)?;
        if spins.len() != want {
            return Err(Error::InvalidParams(format!(
                "spin vector has {} entries, lattice needs {want}",
                spins.len()
            )));
        }
        if spins.iter().any(|&s| s < -1 || s > k_max as i8) {
            return Err(Error::InvalidParams(format!(
                "spins must lie in -1..={k_max}"
            )));
        }
        Ok(SpinConfig {
            depth,
            k_max,
            spins,
        })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn k_max(&self) -> u8 {
        self.k_max
    }

    pub fn spins(&self) -> &[i8] {
        &self.spins
    }

    /// Spin by breadth-first site index.
    pub fn spin(&self, site: usize) -> i8 {
        self.spins[site]
    }

    /// Spin by Neveu label.
    pub fn spin_at(&self, label: &Label) -> i8 {
        self.spins[label.site_index(self.k_max)]
    }

    /// Parent site index (`None` for the root).
    pub fn parent_site(&self, site: usize) -> Option<usize> {
        (site > 0).then(|| (site - 1) / self.k_max as usize)
    }

    /// Child rank of a site (root counts as rank 1).
    pub fn rank(&self, site: usize) -> u8 {
        if site == 0 {
            1
        } else {
            ((site - 1) % self.k_max as usize) as u8 + 1
        }
    }
}

/// Embed a tree into the maximal tree: present nodes keep their offspring
/// count, all other sites get spin -1.
pub fn tree_to_spin(tree: &Tree) -> Result<SpinConfig> {
    let size = lattice_size(tree.depth(), tree.k_max())?;
    let mut spins = vec![-1i8; size];
    for (lab, x) in tree.nodes() {
        spins[lab.site_index(tree.k_max())] = x as i8;
    }
    SpinConfig::new(tree.depth(), tree.k_max(), spins)
}

/// Test the presence/absence constraint at one site:
/// `(X_a ≥ r and X ≥ 0) or (X_a < r and X < 0)` where `r` is the site's
/// child rank and `X_a` the parent spin (boundary `x ≥ 1` for the root).
fn site_constraint_holds(spin: &SpinConfig, site: usize, boundary: u8) -> bool {
    let xa = match spin.parent_site(site) {
        None => boundary as i8,
        Some(p) => spin.spin(p),
    };
    let r = spin.rank(site) as i8;
    let x = spin.spin(site);
    (xa >= r && x >= 0) || (xa < r && x < 0)
}

/// Recover the tree from a spin configuration, or report the breadth-first
/// index and label of the first site violating the presence constraint.
/// Validity does not depend on the boundary value as long as `x ≥ 1`, so
/// none is taken here.
pub fn spin_to_tree(spin: &SpinConfig) -> Result<Tree> {
    for site in 0..spin.spins().len() {
        if !site_constraint_holds(spin, site, 1) {
            let label = Label::from_site_index(spin.k_max(), site);
            let reason = if spin.spin(site) >= 0 {
                "present site whose parent does not announce it"
            } else {
                "absent site announced by its parent"
            };
            return Err(Error::InvalidSpin {
                site,
                label: label.to_string(),
                reason: reason.into(),
            });
        }
    }
    let mut nodes = BTreeMap::new();
    for (site, &s) in spin.spins().iter().enumerate() {
        if s >= 0 {
            nodes.insert(Label::from_site_index(spin.k_max(), site), s as u8);
        }
    }
    Ok(Tree {
        depth: spin.depth(),
        k_max: spin.k_max(),
        nodes,
    })
}

/// Spin-representation energy: minus the number of sites whose presence
/// constraint holds.  Ground states (energy `-|Λ_n|`) are exactly the valid
/// configurations; every constraint violation costs one unit.
pub fn gw_spin_hamiltonian(spin: &SpinConfig, boundary: u8) -> Result<f64> {
    if boundary < 1 || boundary > spin.k_max() {
        return Err(Error::InvalidParams(format!(
            "boundary x={boundary} outside 1..={}",
            spin.k_max()
        )));
    }
    let satisfied = (0..spin.spins().len())
        .filter(|&site| site_constraint_holds(spin, site, boundary))
        .count();
    Ok(-(satisfied as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dist433() -> OffspringDist {
        OffspringDist::new(vec![0.4, 0.3, 0.3]).unwrap()
    }

    fn params(b: f64, x: u8, depth: usize) -> ModelParams {
        ModelParams::new(
            dist433(),
            Interaction::two_class_from_b(2, b).unwrap(),
            x,
            depth,
        )
        .unwrap()
    }

    /// depth-1 tree with X₀=2 and the given child offspring counts
    fn tree2(depth: usize, x1: u8, x2: u8) -> Tree {
        Tree::from_nodes(
            depth,
            2,
            [
                (Label::root(), 2),
                (Label::root().child(1), x1),
                (Label::root().child(2), x2),
            ],
        )
        .unwrap()
    }

    #[test]
    fn dist_validation() {
        assert!(OffspringDist::new(vec![0.4, 0.3, 0.3]).is_ok());
        // K < 2
        assert!(OffspringDist::new(vec![0.5, 0.5]).is_err());
        // bad sum, not silently renormalized
        assert!(OffspringDist::new(vec![0.4, 0.3, 0.4]).is_err());
        // but explicit renormalization works
        let d = OffspringDist::renormalized(vec![4.0, 3.0, 3.0]).unwrap();
        assert!((d.prob(0) - 0.4).abs() < 1e-15);
        // p_K = 0
        assert!(OffspringDist::new(vec![0.5, 0.5, 0.0]).is_err());
        // negative entry
        assert!(OffspringDist::new(vec![1.1, 0.0, -0.1]).is_err());
        assert!((dist433().mean() - 0.9).abs() < 1e-15);
    }

    #[test]
    fn label_arithmetic() {
        let root = Label::root();
        assert_eq!(root.generation(), 0);
        assert_eq!(root.rank(), 1);
        assert_eq!(root.site_index(2), 0);
        let l21 = root.child(2).child(1);
        assert_eq!(l21.to_string(), "21");
        assert_eq!(l21.generation(), 2);
        assert_eq!(l21.rank(), 1);
        // BFS indices for K=2: root 0, then 1,2, then 3,4,5,6
        assert_eq!(root.child(1).site_index(2), 1);
        assert_eq!(root.child(2).site_index(2), 2);
        assert_eq!(l21.site_index(2), 5);
        assert_eq!(Label::from_site_index(2, 5), l21);
        assert_eq!(Label::parse("21").unwrap(), l21);
    }

    proptest! {
        #[test]
        fn label_site_roundtrip(k in 2u8..=9, digits in proptest::collection::vec(1u8..=9, 0..6)) {
            let digits: Vec<u8> = digits.into_iter().map(|d| d.min(k)).collect();
            let lab = Label::from_digits(&digits).unwrap();
            let idx = lab.site_index(k);
            prop_assert_eq!(Label::from_site_index(k, idx), lab);
        }
    }

    #[test]
    fn tree_validation_catches_structure_errors() {
        // child with rank above parent's offspring count
        let bad = Tree::from_nodes(
            1,
            2,
            [
                (Label::root(), 1),
                (Label::root().child(2), 0),
            ],
        );
        assert!(bad.is_err());
        // announced child missing
        let bad = Tree::from_nodes(1, 2, [(Label::root(), 2), (Label::root().child(1), 0)]);
        assert!(bad.is_err());
        assert!(tree2(1, 0, 0).validate().is_ok());
    }

    #[test]
    fn gw_probability_examples() {
        let d = dist433();
        let t = Tree::root_only(0, 2, 1).unwrap();
        assert!((gw_probability(&t, &d).unwrap() - 0.3).abs() < 1e-15);
        // depth 1, X₀=2, children (0, 1): 0.3 · 0.4 · 0.3
        let t = tree2(1, 0, 1);
        assert!((gw_probability(&t, &d).unwrap() - 0.036).abs() < 1e-15);
    }

    #[test]
    fn hamiltonian_and_gibbs_weight_examples() {
        // depth 1, X₀=2, children (2, 0): root link + first child link favoured
        let t = tree2(1, 2, 0);
        assert_eq!(hamiltonian(&t, &params(2.0, 2, 1)).unwrap(), -2.0);
        assert_eq!(hamiltonian(&t, &params(2.0, 1, 1)).unwrap(), -1.0);
        // depth 0: weight p₂ · b for the single favoured boundary link
        let t0 = Tree::root_only(0, 2, 2).unwrap();
        let w = gibbs_weight(&t0, &params(2.0, 2, 0)).unwrap();
        assert!((w - 0.6).abs() < 1e-15);
        // general-table path agrees with the b^{N22} fast path
        let p = params(2.0, 2, 1);
        let general = ModelParams::new(
            dist433(),
            Interaction::general(2, 2f64.ln(), |xa, xi| {
                if xa >= 2 && xi >= 2 {
                    -1.0
                } else {
                    0.0
                }
            })
            .unwrap(),
            2,
            1,
        )
        .unwrap();
        let a = gibbs_weight(&t, &p).unwrap();
        let b = gibbs_weight(&t, &general).unwrap();
        assert!((a - b).abs() <= 1e-14 * a);
    }

    #[test]
    fn favoured_links_include_boundary() {
        let t = tree2(1, 2, 2);
        assert_eq!(t.favoured_links(2), 3);
        assert_eq!(t.favoured_links(1), 2);
        let (l, q) = t.frontier_counts();
        assert_eq!((l, q), (0, 4));
        let (l, q) = tree2(1, 1, 0).frontier_counts();
        assert_eq!((l, q), (1, 0));
    }

    #[test]
    fn spin_roundtrip_and_first_violation() {
        let t = tree2(1, 2, 0);
        let spin = tree_to_spin(&t).unwrap();
        assert_eq!(spin.spins(), &[2, 2, 0]);
        assert_eq!(spin_to_tree(&spin).unwrap(), t);

        // flip site 2 (label "2", present with X=0) to absent: its parent
        // announces two children, so site 2 is the first violation
        let bad = SpinConfig::new(1, 2, vec![2, 2, -1]).unwrap();
        match spin_to_tree(&bad) {
            Err(Error::InvalidSpin { site, label, .. }) => {
                assert_eq!(site, 2);
                assert_eq!(label, "2");
            }
            other => panic!("expected InvalidSpin, got {other:?}"),
        }
    }

    #[test]
    fn spin_hamiltonian_counts_satisfied_constraints() {
        // valid config on Λ₁: energy -|Λ₁| = -3
        let spin = tree_to_spin(&tree2(1, 2, 0)).unwrap();
        assert_eq!(gw_spin_hamiltonian(&spin, 2).unwrap(), -3.0);
        // alternating config (absent on even generations, K on odd) has
        // every constraint violated: energy 0
        let alt = SpinConfig::new(1, 2, vec![-1, 2, 2]).unwrap();
        assert_eq!(gw_spin_hamiltonian(&alt, 1).unwrap(), 0.0);
        // flipping one constrained site of a valid config from -1 to 0
        // breaks exactly that site's constraint
        let spin = tree_to_spin(&Tree::root_only(1, 2, 0).unwrap()).unwrap();
        assert_eq!(gw_spin_hamiltonian(&spin, 1).unwrap(), -3.0);
        let flipped = SpinConfig::new(1, 2, vec![0, 0, -1]).unwrap();
        assert_eq!(gw_spin_hamiltonian(&flipped, 1).unwrap(), -2.0);
    }

    #[test]
    fn lattice_sizes() {
        assert_eq!(lattice_size(0, 2).unwrap(), 1);
        assert_eq!(lattice_size(1, 2).unwrap(), 3);
        assert_eq!(lattice_size(2, 2).unwrap(), 7);
        assert_eq!(lattice_size(3, 3).unwrap(), 40);
    }

    #[test]
    fn fkg_condition_two_class_and_product_form() {
        let two = Interaction::two_class(2, 0.7).unwrap();
        assert!(two.fkg_condition_check().is_none());
        assert!(two.cone_condition_check().is_none());

        // attractive product form φ = -f·g with nondecreasing nonnegative
        // f, g vanishing at -1
        let f = |x: i8| (x.max(0) as f64).sqrt();
        let prod = Interaction::general(2, 0.5, |xa, xi| -f(xa) * f(xi)).unwrap();
        assert!(prod.fkg_condition_check().is_none());
        assert!(prod.cone_condition_check().is_none());

        // repulsive +f·g violates both, with a counterexample reported
        let rep = Interaction::general(2, 0.5, |xa, xi| f(xa) * f(xi)).unwrap();
        let viol = rep.fkg_condition_check().expect("violation");
        assert!(viol.gap > 0.0);
        assert!(rep.cone_condition_check().is_some());
    }

    #[test]
    fn tree_json_roundtrip() {
        let t = tree2(1, 0, 1);
        let json = t.to_json(2);
        let (back, x) = Tree::from_json(&json, 2).unwrap();
        assert_eq!(back, t);
        assert_eq!(x, 2);
        // schema shape: keys n, x, offspring with digit-string labels
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["n"], 1);
        assert_eq!(v["x"], 2);
        assert_eq!(v["offspring"][""], 2);
        assert_eq!(v["offspring"]["2"], 1);
    }

    #[test]
    fn gw_sampling_respects_structure() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(7);
        let d = dist433();
        for _ in 0..200 {
            let t = Tree::sample_gw(3, &d, &mut rng);
            t.validate().unwrap();
            assert_eq!(t.depth(), 3);
        }
    }
}
