//! Two detailed-balance Markov chains targeting the interacting Gibbs
//! measure — a global resampling chain and a local single-site chain — plus
//! exact one-step transition matrices on enumerable state spaces, used to
//! certify stationarity and detailed balance against the enumeration
//! oracle.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{gw_probability, hamiltonian, Label, ModelParams, Tree};
use crate::oracle::{enumerate_trees, Kahan};

/// RNG recorded in output headers; `ChaCha12` seeded with the 64-bit run
/// seed, one stream per chain.
pub const GENERATOR_NAME: &str = "chacha12";

/// Largest state space for exact transition matrices (dense |S|² storage).
pub const MATRIX_STATE_BUDGET: usize = 2_000;

// ───────────────────────────── chain steps ─────────────────────────────

/// Metropolis acceptance probability for an energy change.
fn acceptance(beta: f64, dh: f64) -> f64 {
    if beta == 0.0 || dh == 0.0 {
        return 1.0;
    }
    (-beta * dh).exp().min(1.0)
}

fn parent_value(tree: &Tree, label: &Label, boundary: u8) -> i8 {
    match label.parent() {
        None => boundary as i8,
        Some(p) => tree.offspring(&p).expect("parent of a present node") as i8,
    }
}

/// One step of the global chain: propose an entirely fresh tree from the
/// free branching law, accept with the Metropolis probability for the full
/// energy change.  Returns whether the proposal was accepted.
pub fn global_step<R: Rng + ?Sized>(tree: &mut Tree, params: &ModelParams, rng: &mut R) -> bool {
    let proposal = Tree::sample_gw(params.depth, &params.dist, rng);
    let dh = hamiltonian(&proposal, params).expect("fresh tree is valid")
        - hamiltonian(tree, params).expect("current tree is valid");
    let acc = acceptance(params.interaction.beta(), dh);
    if acc >= 1.0 || rng.random::<f64>() < acc {
        *tree = proposal;
        true
    } else {
        false
    }
}

/// One step of the local chain.  The proposal sequence is: draw a
/// generation `m` from `lambda`; draw `m` address digits, each digit equal
/// to `l ∈ {1..K}` with probability `p_l` and aborting the step with
/// probability `p₀`; if the addressed site is not in the tree, do nothing;
/// flip a fair coin for `σ = ±1`; reject if `X_i + σ` leaves `{0..K}`;
/// draw the new value with probability `p_{X_i+σ}` (divided by `max p_k`
/// when `accelerated`); growing attaches a fresh branching subtree below
/// the new rightmost child, shrinking deletes the rightmost child's
/// subtree; finally Metropolis-accept on the energy change.  All rejection
/// branches leave the tree untouched (self-loop).  Returns whether the
/// move was applied.
pub fn local_step<R: Rng + ?Sized>(
    tree: &mut Tree,
    params: &ModelParams,
    lambda: &[f64],
    accelerated: bool,
    rng: &mut R,
) -> bool {
    debug_assert_eq!(lambda.len(), params.depth + 1);
    let depth = params.depth;
    let k_max = params.k_max();
    let dist = &params.dist;
    let phi = |xa: i8, xi: i8| params.interaction.phi(xa, xi);

    // generation, then address digits (digit 0 = abort)
    let m = sample_index(lambda, rng);
    let mut site = Label::root();
    for _ in 0..m {
        let digit = dist.sample(rng);
        if digit == 0 {
            return false;
        }
        site = site.child(digit);
    }
    let Some(old_x) = tree.offspring(&site) else {
        return false;
    };

    let grow = rng.random::<bool>();
    let new_x = if grow {
        if old_x >= k_max {
            return false;
        }
        old_x + 1
    } else {
        if old_x == 0 {
            return false;
        }
        old_x - 1
    };

    // offspring-value draw
    let mut draw_prob = dist.prob(new_x);
    if accelerated {
        draw_prob /= dist.max_prob();
    }
    if !(draw_prob >= 1.0 || rng.random::<f64>() < draw_prob) {
        return false;
    }

    let gen = site.generation();
    let xa = parent_value(tree, &site, params.boundary);
    let mut dh = phi(xa, new_x as i8) - phi(xa, old_x as i8);
    // links to the children that survive the move
    let kept = old_x.min(new_x);
    if gen < depth {
        for r in 1..=kept {
            let cx = tree.offspring(&site.child(r)).expect("announced child") as i8;
            dh += phi(new_x as i8, cx) - phi(old_x as i8, cx);
        }
    }

    if grow {
        // sample the fresh subtree below the new rightmost child first, so
        // its links enter the energy change before the accept decision
        let mut sub: Vec<(Label, u8)> = Vec::new();
        if gen < depth {
            let child = site.child(new_x);
            let mut frontier = vec![child.clone()];
            while let Some(lab) = frontier.pop() {
                let x = dist.sample(rng);
                if lab.generation() < depth {
                    for r in 1..=x {
                        frontier.push(lab.child(r));
                    }
                }
                sub.push((lab, x));
            }
            let values: BTreeMap<&Label, u8> = sub.iter().map(|(l, x)| (l, *x)).collect();
            for (lab, x) in &sub {
                let pa = if *lab == child {
                    new_x as i8
                } else {
                    values[&lab.parent().expect("below the child")] as i8
                };
                dh += phi(pa, *x as i8);
            }
        }
        let acc = acceptance(params.interaction.beta(), dh);
        if acc >= 1.0 || rng.random::<f64>() < acc {
            tree.nodes_mut().insert(site, new_x);
            tree.nodes_mut().extend(sub);
            true
        } else {
            false
        }
    } else {
        let mut removed: Vec<Label> = Vec::new();
        if gen < depth {
            let child = site.child(old_x);
            for (lab, x) in tree.nodes() {
                if lab.digits().len() >= child.digits().len()
                    && lab.digits()[..child.digits().len()] == *child.digits()
                {
                    let pa = if *lab == child {
                        old_x as i8
                    } else {
                        parent_value(tree, lab, params.boundary)
                    };
                    dh -= phi(pa, x as i8);
                    removed.push(lab.clone());
                }
            }
        }
        let acc = acceptance(params.interaction.beta(), dh);
        if acc >= 1.0 || rng.random::<f64>() < acc {
            tree.nodes_mut().insert(site, new_x);
            for lab in removed {
                tree.nodes_mut().remove(&lab);
            }
            true
        } else {
            false
        }
    }
}

fn sample_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let mut t: f64 = rng.random();
    for (i, w) in weights.iter().enumerate() {
        t -= w;
        if t < 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

// ───────────────────── exact transition matrices ─────────────────────

/// Dense one-step transition matrix over every tree of the model's depth,
/// in enumeration order.
pub struct TransitionMatrix {
    states: Vec<Tree>,
    index: BTreeMap<Tree, usize>,
    p: Vec<f64>,
}

impl TransitionMatrix {
    fn with_states(states: Vec<Tree>) -> Result<Self> {
        let dim = states.len();
        if dim > MATRIX_STATE_BUDGET {
            return Err(Error::Unsupported(format!(
                "state space of {dim} trees exceeds the dense-matrix budget {MATRIX_STATE_BUDGET}"
            )));
        }
        let index = states
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(TransitionMatrix {
            p: vec![0.0; dim * dim],
            states,
            index,
        })
    }

    pub fn dim(&self) -> usize {
        self.states.len()
    }

    pub fn states(&self) -> &[Tree] {
        &self.states
    }

    pub fn index_of(&self, tree: &Tree) -> Option<usize> {
        self.index.get(tree).copied()
    }

    pub fn at(&self, from: usize, to: usize) -> f64 {
        self.p[from * self.dim() + to]
    }

    fn add(&mut self, from: usize, to: usize, mass: f64) {
        let dim = self.dim();
        self.p[from * dim + to] += mass;
    }

    /// Fill each diagonal with the leftover self-loop mass so rows sum to 1.
    fn close_rows(&mut self) {
        let dim = self.dim();
        for i in 0..dim {
            let mut off = Kahan::default();
            for j in 0..dim {
                if j != i {
                    off.add(self.p[i * dim + j]);
                }
            }
            self.p[i * dim + i] = 1.0 - off.value();
        }
    }

    /// `max_i |Σ_j P_ij − 1|`.
    pub fn row_sum_residual(&self) -> f64 {
        let dim = self.dim();
        (0..dim)
            .map(|i| {
                let mut s = Kahan::default();
                for j in 0..dim {
                    s.add(self.p[i * dim + j]);
                }
                (s.value() - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }

    pub fn min_entry(&self) -> f64 {
        self.p.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// `max_j |Σ_i π_i P_ij − π_j|` — zero iff π is stationary.
    pub fn stationarity_residual(&self, pi: &[f64]) -> f64 {
        let dim = self.dim();
        assert_eq!(pi.len(), dim);
        (0..dim)
            .map(|j| {
                let mut s = Kahan::default();
                for i in 0..dim {
                    s.add(pi[i] * self.p[i * dim + j]);
                }
                (s.value() - pi[j]).abs()
            })
            .fold(0.0, f64::max)
    }

    /// `max_{i≠j} |π_i P_ij − π_j P_ji|` — zero iff the chain is reversible
    /// with respect to π.
    pub fn detailed_balance_residual(&self, pi: &[f64]) -> f64 {
        let dim = self.dim();
        assert_eq!(pi.len(), dim);
        let mut worst = 0.0f64;
        for i in 0..dim {
            for j in (i + 1)..dim {
                let r = (pi[i] * self.p[i * dim + j] - pi[j] * self.p[j * dim + i]).abs();
                worst = worst.max(r);
            }
        }
        worst
    }

    /// Strong connectivity of the positive-entry graph (forward and
    /// backward reachability from state 0).
    pub fn is_irreducible(&self) -> bool {
        self.reaches_all(false) && self.reaches_all(true)
    }

    fn reaches_all(&self, transpose: bool) -> bool {
        let dim = self.dim();
        let mut seen = vec![false; dim];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for j in 0..dim {
                let edge = if transpose {
                    self.p[j * dim + i]
                } else {
                    self.p[i * dim + j]
                };
                if edge > 0.0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// A positive diagonal entry plus irreducibility gives aperiodicity.
    pub fn has_positive_diagonal(&self) -> bool {
        let dim = self.dim();
        (0..dim).any(|i| self.p[i * dim + i] > 0.0)
    }
}

fn validate_lambda(lambda: &[f64], depth: usize) -> Result<()> {
    if lambda.len() != depth + 1 {
        return Err(Error::InvalidParams(format!(
            "generation weights must cover 0..={depth}, got {} entries",
            lambda.len()
        )));
    }
    if lambda.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::InvalidParams(
            "generation weights must be finite and nonnegative".into(),
        ));
    }
    let sum: f64 = lambda.iter().sum();
    if (sum - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidParams(format!(
            "generation weights sum to {sum}, expected 1"
        )));
    }
    if lambda[0] <= 0.0 {
        return Err(Error::InvalidParams(
            "the root generation must have positive weight".into(),
        ));
    }
    Ok(())
}

/// Exact one-step transition matrix of the local chain, integrating
/// analytically over every random choice (generation, address digits,
/// coin, offspring draw, attached subtree, acceptance).  Energy changes
/// are recomputed from full Hamiltonians, independently of the sampler's
/// incremental bookkeeping.
pub fn local_transition_matrix(
    params: &ModelParams,
    lambda: &[f64],
    accelerated: bool,
) -> Result<TransitionMatrix> {
    validate_lambda(lambda, params.depth)?;
    let depth = params.depth;
    let k_max = params.k_max();
    let states = enumerate_trees(depth, k_max)?;
    let mut matrix = TransitionMatrix::with_states(states)?;
    let beta = params.interaction.beta();
    let p_scale = if accelerated {
        params.dist.max_prob()
    } else {
        1.0
    };

    // all complete digit strings of length m with their draw weights
    fn digit_strings(m: usize, dist: &crate::model::OffspringDist) -> Vec<(Label, f64)> {
        let mut out = vec![(Label::root(), 1.0)];
        for _ in 0..m {
            let mut next = Vec::new();
            for (lab, w) in &out {
                for d in 1..=dist.k_max() {
                    let pd = dist.prob(d);
                    if pd > 0.0 {
                        next.push((lab.child(d), w * pd));
                    }
                }
            }
            out = next;
        }
        out
    }

    for si in 0..matrix.dim() {
        let tree = matrix.states()[si].clone();
        let h_old = hamiltonian(&tree, params)?;
        for (m, &lam) in lambda.iter().enumerate() {
            if lam == 0.0 {
                continue;
            }
            for (site, w_digits) in digit_strings(m, &params.dist) {
                let Some(old_x) = tree.offspring(&site) else {
                    continue; // self-loop mass
                };
                for (grow, new_x) in [
                    (true, old_x.checked_add(1).filter(|&x| x <= k_max)),
                    (false, old_x.checked_sub(1)),
                ] {
                    let Some(new_x) = new_x else { continue };
                    let stage = lam * w_digits * 0.5 * params.dist.prob(new_x) / p_scale;
                    if stage == 0.0 {
                        continue;
                    }
                    let gen = site.generation();
                    if grow && gen < depth {
                        // integrate over every possible attached subtree
                        for sub in enumerate_trees(depth - gen - 1, k_max)? {
                            let next = grown_tree(&tree, &site, new_x, Some(&sub))?;
                            let dh = hamiltonian(&next, params)? - h_old;
                            let mass = stage
                                * gw_probability(&sub, &params.dist)?
                                * acceptance(beta, dh);
                            let sj = matrix.index_of(&next).expect("enumerated state");
                            if sj != si {
                                matrix.add(si, sj, mass);
                            }
                        }
                    } else {
                        let next = if grow {
                            grown_tree(&tree, &site, new_x, None)?
                        } else {
                            shrunk_tree(&tree, &site, new_x)?
                        };
                        let dh = hamiltonian(&next, params)? - h_old;
                        let mass = stage * acceptance(beta, dh);
                        let sj = matrix.index_of(&next).expect("enumerated state");
                        if sj != si {
                            matrix.add(si, sj, mass);
                        }
                    }
                }
            }
        }
    }
    matrix.close_rows();
    Ok(matrix)
}

/// Exact one-step transition matrix of the global chain:
/// `P(ω→ω′) = P^GW(ω′)·min(1, e^{−βΔH})` off the diagonal.
pub fn global_transition_matrix(params: &ModelParams) -> Result<TransitionMatrix> {
    let states = enumerate_trees(params.depth, params.k_max())?;
    let mut matrix = TransitionMatrix::with_states(states)?;
    let beta = params.interaction.beta();
    let energies: Vec<f64> = matrix
        .states()
        .iter()
        .map(|t| hamiltonian(t, params))
        .collect::<Result<_>>()?;
    let gw: Vec<f64> = matrix
        .states()
        .iter()
        .map(|t| gw_probability(t, &params.dist))
        .collect::<Result<_>>()?;
    for i in 0..matrix.dim() {
        for j in 0..matrix.dim() {
            if i != j {
                let mass = gw[j] * acceptance(beta, energies[j] - energies[i]);
                matrix.add(i, j, mass);
            }
        }
    }
    matrix.close_rows();
    Ok(matrix)
}

/// The tree after raising `site` to `new_x`, with an optional subtree
/// (labels relative to the new child) grafted below the new rightmost
/// child.
fn grown_tree(tree: &Tree, site: &Label, new_x: u8, subtree: Option<&Tree>) -> Result<Tree> {
    let mut nodes: BTreeMap<Label, u8> = tree.nodes().map(|(l, x)| (l.clone(), x)).collect();
    nodes.insert(site.clone(), new_x);
    if let Some(sub) = subtree {
        let child = site.child(new_x);
        for (rel, x) in sub.nodes() {
            let mut digits = child.digits().to_vec();
            digits.extend_from_slice(rel.digits());
            nodes.insert(Label::from_digits(&digits)?, x);
        }
    }
    Tree::from_nodes(tree.depth(), tree.k_max(), nodes)
}

/// The tree after lowering `site` to `new_x`, dropping the rightmost
/// child's subtree.
fn shrunk_tree(tree: &Tree, site: &Label, new_x: u8) -> Result<Tree> {
    let child = site.child(new_x + 1);
    let nodes: Vec<(Label, u8)> = tree
        .nodes()
        .filter(|(l, _)| {
            !(l.digits().len() >= child.digits().len()
                && l.digits()[..child.digits().len()] == *child.digits())
        })
        .map(|(l, x)| {
            if l == site {
                (l.clone(), new_x)
            } else {
                (l.clone(), x)
            }
        })
        .collect();
    Tree::from_nodes(tree.depth(), tree.k_max(), nodes)
}

// ───────────────────────────── chain runs ─────────────────────────────

/// Which chain to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChainKind {
    Global,
    Local,
}

/// A complete, reproducible chain specification.
#[derive(Clone, Debug)]
pub struct ChainConfig {
    pub params: ModelParams,
    pub kind: ChainKind,
    /// Generation weights over `{0..depth}` for the local chain; the root
    /// weight must be positive.  Ignored by the global chain.
    pub lambda: Vec<f64>,
    pub steps: u64,
    pub seed: u64,
    /// RNG stream, for independent parallel chains under one seed.
    pub stream: u64,
    /// Record observables every `thinning` steps (≥ 1).
    pub thinning: u64,
    /// Divide offspring-draw probabilities by `max p_k` (local chain).
    pub accelerated: bool,
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thinning == 0 {
            return Err(Error::InvalidParams("thinning must be ≥ 1".into()));
        }
        if self.kind == ChainKind::Local {
            validate_lambda(&self.lambda, self.params.depth)?;
        }
        Ok(())
    }
}

/// Summary statistics for one recorded observable.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ObservableStats {
    pub name: String,
    pub samples: u64,
    pub mean: f64,
    /// Unbiased sample variance.
    pub variance: f64,
    /// `√(variance / ess)`.
    pub stderr: f64,
    /// Autocorrelation-adjusted effective sample size.
    pub ess: f64,
}

/// Result of a chain run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChainStats {
    pub steps: u64,
    pub acceptance: f64,
    pub seed: u64,
    pub stream: u64,
    pub generator: String,
    pub observables: Vec<ObservableStats>,
}

/// Integrated-autocorrelation effective sample size with the positive
/// initial sequence cut off at the first nonpositive autocorrelation.
pub fn effective_sample_size(samples: &[f64]) -> f64 {
    let n = samples.len();
    if n == 0 {
        return 0.0;
    }
    if n == 1 {
        return 1.0;
    }
    let nf = n as f64;
    let mean = samples.iter().sum::<f64>() / nf;
    let c0: f64 = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / nf;
    if c0 == 0.0 {
        return nf;
    }
    let max_lag = (n / 2).min(10_000);
    let mut tail = 0.0;
    for lag in 1..max_lag {
        let c: f64 = samples[lag..]
            .iter()
            .zip(&samples[..n - lag])
            .map(|(a, b)| (a - mean) * (b - mean))
            .sum::<f64>()
            / nf;
        let rho = c / c0;
        if rho <= 0.0 {
            break;
        }
        tail += rho;
    }
    (nf / (1.0 + 2.0 * tail)).clamp(1.0, nf)
}

/// Run one chain and summarize the requested observables.  Deterministic
/// given (seed, stream): the start state is a fresh branching-law sample
/// from the same stream.
pub fn run_chain(
    config: &ChainConfig,
    observables: &[(String, Box<dyn Fn(&Tree) -> f64 + Send + Sync>)],
) -> Result<ChainStats> {
    run_chain_series(config, observables).map(|(stats, _)| stats)
}

/// Like [`run_chain`], but also returns the thinned sample series, one
/// vector per observable (in the order given).  Sample `j` of each series
/// was recorded after step `(j + 1) * thinning`.
pub fn run_chain_series(
    config: &ChainConfig,
    observables: &[(String, Box<dyn Fn(&Tree) -> f64 + Send + Sync>)],
) -> Result<(ChainStats, Vec<Vec<f64>>)> {
    config.validate()?;
    let params = &config.params;
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    rng.set_stream(config.stream);
    let mut tree = Tree::sample_gw(params.depth, &params.dist, &mut rng);
    let mut series: Vec<Vec<f64>> = vec![Vec::new(); observables.len()];
    let mut accepted = 0u64;
    for t in 0..config.steps {
        let moved = match config.kind {
            ChainKind::Global => global_step(&mut tree, params, &mut rng),
            ChainKind::Local => local_step(
                &mut tree,
                params,
                &config.lambda,
                config.accelerated,
                &mut rng,
            ),
        };
        if moved {
            accepted += 1;
        }
        if (t + 1) % config.thinning == 0 {
            for (slot, (_, f)) in series.iter_mut().zip(observables) {
                slot.push(f(&tree));
            }
        }
    }
    let stats = observables
        .iter()
        .zip(&series)
        .map(|((name, _), xs)| summarize(name, xs))
        .collect();
    let stats = ChainStats {
        steps: config.steps,
        acceptance: if config.steps == 0 {
            0.0
        } else {
            accepted as f64 / config.steps as f64
        },
        seed: config.seed,
        stream: config.stream,
        generator: GENERATOR_NAME.into(),
        observables: stats,
    };
    Ok((stats, series))
}

fn summarize(name: &str, xs: &[f64]) -> ObservableStats {
    let n = xs.len() as u64;
    if n == 0 {
        return ObservableStats {
            name: name.into(),
            samples: 0,
            mean: f64::NAN,
            variance: f64::NAN,
            stderr: f64::NAN,
            ess: 0.0,
        };
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let variance = if n > 1 {
        xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n as f64 - 1.0)
    } else {
        0.0
    };
    let ess = effective_sample_size(xs);
    let stderr = if ess > 0.0 {
        (variance / ess).sqrt()
    } else {
        f64::NAN
    };
    ObservableStats {
        name: name.into(),
        samples: n,
        mean,
        variance,
        stderr,
        ess,
    }
}

/// Pool statistics from independent chains (same observables, independent
/// streams): weighted means, pooled variance, summed effective sizes.
pub fn merge_runs(runs: &[ChainStats]) -> Result<ChainStats> {
    let Some(first) = runs.first() else {
        return Err(Error::InvalidParams("no runs to merge".into()));
    };
    let names: Vec<&str> = first.observables.iter().map(|o| o.name.as_str()).collect();
    for r in runs {
        let theirs: Vec<&str> = r.observables.iter().map(|o| o.name.as_str()).collect();
        if theirs != names {
            return Err(Error::InvalidParams(
                "cannot merge runs with different observable sets".into(),
            ));
        }
    }
    let total_steps: u64 = runs.iter().map(|r| r.steps).sum();
    let acceptance = if total_steps == 0 {
        0.0
    } else {
        runs.iter()
            .map(|r| r.acceptance * r.steps as f64)
            .sum::<f64>()
            / total_steps as f64
    };
    let mut observables = Vec::with_capacity(names.len());
    for k in 0..names.len() {
        let parts: Vec<&ObservableStats> = runs.iter().map(|r| &r.observables[k]).collect();
        let n_tot: u64 = parts.iter().map(|o| o.samples).sum();
        if n_tot == 0 {
            observables.push(summarize(names[k], &[]));
            continue;
        }
        let mean = parts
            .iter()
            .map(|o| o.mean * o.samples as f64)
            .sum::<f64>()
            / n_tot as f64;
        let m2: f64 = parts
            .iter()
            .filter(|o| o.samples > 0)
            .map(|o| {
                (o.samples as f64 - 1.0) * o.variance
                    + o.samples as f64 * (o.mean - mean) * (o.mean - mean)
            })
            .sum();
        let variance = if n_tot > 1 {
            m2 / (n_tot as f64 - 1.0)
        } else {
            0.0
        };
        let ess: f64 = parts.iter().map(|o| o.ess).sum::<f64>().min(n_tot as f64);
        observables.push(ObservableStats {
            name: names[k].into(),
            samples: n_tot,
            mean,
            variance,
            stderr: if ess > 0.0 {
                (variance / ess).sqrt()
            } else {
                f64::NAN
            },
            ess,
        });
    }
    Ok(ChainStats {
        steps: total_steps,
        acceptance,
        seed: first.seed,
        stream: first.stream,
        generator: first.generator.clone(),
        observables,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Interaction, OffspringDist};
    use crate::oracle::ExactMeasure;

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

    fn gibbs_vector(measure: &ExactMeasure, states: &[Tree]) -> Vec<f64> {
        states
            .iter()
            .map(|t| measure.probability(t).expect("state in support"))
            .collect()
    }

    #[test]
    fn local_matrix_is_stochastic_and_reversible_depth_one() {
        let lambda = [0.5, 0.5];
        for b in [1.0, 2.0] {
            for x in [1u8, 2] {
                for accelerated in [false, true] {
                    let p = params(b, x, 1);
                    let m = local_transition_matrix(&p, &lambda, accelerated).unwrap();
                    assert_eq!(m.dim(), 13);
                    assert!(m.min_entry() >= 0.0);
                    assert!(m.row_sum_residual() < 1e-12);
                    let measure = ExactMeasure::new(p).unwrap();
                    let pi = gibbs_vector(&measure, m.states());
                    let stat = m.stationarity_residual(&pi);
                    let db = m.detailed_balance_residual(&pi);
                    assert!(
                        stat < 1e-12,
                        "b={b} x={x} acc={accelerated}: stationarity {stat:e}"
                    );
                    assert!(
                        db < 1e-12,
                        "b={b} x={x} acc={accelerated}: detailed balance {db:e}"
                    );
                    assert!(m.is_irreducible());
                    assert!(m.has_positive_diagonal());
                }
            }
        }
    }

    #[test]
    fn local_matrix_depth_two() {
        let p = params(2.0, 2, 2);
        let m = local_transition_matrix(&p, &[0.4, 0.3, 0.3], false).unwrap();
        assert_eq!(m.dim(), 183);
        assert!(m.row_sum_residual() < 1e-12);
        let measure = ExactMeasure::new(p).unwrap();
        let pi = gibbs_vector(&measure, m.states());
        assert!(m.stationarity_residual(&pi) < 1e-12);
        assert!(m.detailed_balance_residual(&pi) < 1e-12);
        assert!(m.is_irreducible());
    }

    #[test]
    fn beta_zero_local_chain_fixes_the_free_law() {
        let p = params(1.0, 1, 1);
        let m = local_transition_matrix(&p, &[0.5, 0.5], false).unwrap();
        let pi: Vec<f64> = m
            .states()
            .iter()
            .map(|t| gw_probability(t, &dist433()).unwrap())
            .collect();
        assert!(m.stationarity_residual(&pi) < 1e-12);
    }

    #[test]
    fn global_matrix_fixes_gibbs_depth_one() {
        for b in [1.0, 2.0] {
            for x in [1u8, 2] {
                let p = params(b, x, 1);
                let m = global_transition_matrix(&p).unwrap();
                assert!(m.row_sum_residual() < 1e-12);
                let measure = ExactMeasure::new(p).unwrap();
                let pi = gibbs_vector(&measure, m.states());
                assert!(m.stationarity_residual(&pi) < 1e-12);
                assert!(m.detailed_balance_residual(&pi) < 1e-12);
                assert!(m.is_irreducible());
                assert!(m.has_positive_diagonal());
            }
        }
    }

    #[test]
    fn matrix_budget_guard() {
        let p = params(2.0, 1, 3); // 33 673 states
        assert!(matches!(
            local_transition_matrix(&p, &[0.25; 4], false),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn sampler_agrees_with_matrix_row() {
        // draw many single steps from one fixed state and compare the
        // empirical next-state law with the exact matrix row
        let p = params(2.0, 2, 1);
        let lambda = [0.5, 0.5];
        let m = local_transition_matrix(&p, &lambda, false).unwrap();
        let start = Tree::from_nodes(
            1,
            2,
            [
                (Label::root(), 2),
                (Label::root().child(1), 1),
                (Label::root().child(2), 0),
            ],
        )
        .unwrap();
        let si = m.index_of(&start).unwrap();
        let draws = 200_000usize;
        let mut counts = vec![0u64; m.dim()];
        let mut rng = ChaCha12Rng::seed_from_u64(314159);
        for _ in 0..draws {
            let mut t = start.clone();
            local_step(&mut t, &p, &lambda, false, &mut rng);
            counts[m.index_of(&t).unwrap()] += 1;
        }
        let tv: f64 = (0..m.dim())
            .map(|j| (counts[j] as f64 / draws as f64 - m.at(si, j)).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.015, "one-step TV {tv}");
    }

    #[test]
    fn chain_preserves_tree_validity() {
        let p = params(1.8, 2, 3);
        let lambda = [0.25; 4];
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let mut tree = Tree::sample_gw(3, &dist433(), &mut rng);
        for step in 0..20_000 {
            local_step(&mut tree, &p, &lambda, true, &mut rng);
            if step % 1000 == 0 {
                tree.validate().unwrap();
            }
        }
        tree.validate().unwrap();
        let mut tree = Tree::sample_gw(3, &dist433(), &mut rng);
        for _ in 0..200 {
            global_step(&mut tree, &p, &mut rng);
        }
        tree.validate().unwrap();
    }

    #[test]
    fn runs_are_seed_deterministic() {
        let mk = || ChainConfig {
            params: params(2.0, 2, 2),
            kind: ChainKind::Local,
            lambda: vec![0.4, 0.3, 0.3],
            steps: 5_000,
            seed: 99,
            stream: 0,
            thinning: 10,
            accelerated: false,
        };
        let obs: Vec<(String, Box<dyn Fn(&Tree) -> f64 + Send + Sync>)> = vec![(
            "favoured_links".into(),
            Box::new(|t: &Tree| t.favoured_links(2) as f64),
        )];
        let a = run_chain(&mk(), &obs).unwrap();
        let b = run_chain(&mk(), &obs).unwrap();
        assert_eq!(a.observables[0].mean, b.observables[0].mean);
        assert_eq!(a.acceptance, b.acceptance);
        let mut other = mk();
        other.stream = 1;
        let c = run_chain(&other, &obs).unwrap();
        assert_ne!(a.observables[0].mean, c.observables[0].mean);
    }

    #[test]
    fn zero_steps_give_empty_stats() {
        let cfg = ChainConfig {
            params: params(1.0, 1, 1),
            kind: ChainKind::Global,
            lambda: vec![],
            steps: 0,
            seed: 1,
            stream: 0,
            thinning: 1,
            accelerated: false,
        };
        let obs: Vec<(String, Box<dyn Fn(&Tree) -> f64 + Send + Sync>)> =
            vec![("size".into(), Box::new(|t: &Tree| t.len() as f64))];
        let stats = run_chain(&cfg, &obs).unwrap();
        assert_eq!(stats.observables[0].samples, 0);
        assert_eq!(stats.observables[0].ess, 0.0);
        assert_eq!(stats.acceptance, 0.0);
    }

    #[test]
    fn chain_estimates_match_exact_mean_within_error() {
        // global chain at depth 1: ⟨N₂₂⟩ against the enumeration value
        let p = params(2.0, 2, 1);
        let measure = ExactMeasure::new(p.clone()).unwrap();
        let exact = measure.expectation(|t| t.favoured_links(2) as f64);
        let cfg = ChainConfig {
            params: p,
            kind: ChainKind::Global,
            lambda: vec![],
            steps: 200_000,
            seed: 2024,
            stream: 0,
            thinning: 10,
            accelerated: false,
        };
        let obs: Vec<(String, Box<dyn Fn(&Tree) -> f64 + Send + Sync>)> = vec![(
            "n22".into(),
            Box::new(|t: &Tree| t.favoured_links(2) as f64),
        )];
        let stats = run_chain(&cfg, &obs).unwrap();
        let o = &stats.observables[0];
        assert!(
            (o.mean - exact).abs() < 4.0 * o.stderr,
            "mean {} vs exact {exact} (stderr {})",
            o.mean,
            o.stderr
        );
        assert!(o.ess > 100.0 && o.ess <= o.samples as f64);
    }

    #[test]
    fn merged_runs_pool_samples() {
        let mk = |stream| ChainConfig {
            params: params(2.0, 2, 1),
            kind: ChainKind::Local,
            lambda: vec![0.5, 0.5],
            steps: 20_000,
            seed: 5,
            stream,
            thinning: 5,
            accelerated: true,
        };
        let obs: Vec<(String, Box<dyn Fn(&Tree) -> f64 + Send + Sync>)> = vec![(
            "n22".into(),
            Box::new(|t: &Tree| t.favoured_links(2) as f64),
        )];
        let runs: Vec<ChainStats> = (0..4)
            .map(|s| run_chain(&mk(s), &obs).unwrap())
            .collect();
        let merged = merge_runs(&runs).unwrap();
        assert_eq!(merged.observables[0].samples, 4 * 4_000);
        let expect: f64 = runs.iter().map(|r| r.observables[0].mean).sum::<f64>() / 4.0;
        assert!((merged.observables[0].mean - expect).abs() < 1e-12);
        assert_eq!(merged.steps, 80_000);
    }
}
