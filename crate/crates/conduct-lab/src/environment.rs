//! Conductance environments on lattice boxes.
//!
//! An [`Environment`] assigns a positive weight to every edge of a box and
//! caches the two vertex measures derived from it: `mu(x)`, the sum of the
//! incident conductances (the reversible measure of the constant-speed walk),
//! and `nu(x)`, the sum of their reciprocals. Generators cover constant and
//! i.i.d. laws, vertex-combined laws `omega(x,y) = combine(theta(x), theta(y))`,
//! the discrete Gaussian free field `omega(x,y) = exp(phi(x) + phi(y))`, and
//! the ergodic trap construction that plants one deep edge per percolation
//! component, surrounded by weak edges.
//!
//! Generation is deterministic given (spec, seed, box); environments are
//! immutable afterwards and serialize to JSON (weights in canonical edge
//! order) or a compact binary form, both round-tripping exactly.

use std::io::{Read, Write};
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{Ball, Boundary, LatticeBox, VertexField};
use crate::numeric::Kahan;
use crate::rng::{derive_seed, stream_rng};

/// Marginal law of a scalar conductance or vertex variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum Law {
    Constant { value: f64 },
    Uniform { lo: f64, hi: f64 },
    /// U^power for U uniform on (0,1]; power > 1 gives a density
    /// proportional to u^(1/power - 1) near zero.
    PowUniform { power: f64 },
    LogNormal { mu: f64, sigma: f64 },
}

impl Law {
    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        match *self {
            Law::Constant { value } => value,
            Law::Uniform { lo, hi } => rng.random_range(lo..hi),
            Law::PowUniform { power } => {
                let u: f64 = 1.0 - rng.random::<f64>(); // in (0, 1]
                u.powf(power)
            }
            Law::LogNormal { mu, sigma } => {
                let z: f64 = StandardNormal.sample(rng);
                (mu + sigma * z).exp()
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Law::Constant { value } => value > 0.0 && value.is_finite(),
            Law::Uniform { lo, hi } => lo > 0.0 && hi > lo,
            Law::PowUniform { power } => power > 0.0,
            Law::LogNormal { sigma, .. } => sigma >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::domain(format!(
                "law {self:?} does not have positive support"
            )))
        }
    }
}

/// How a vertex-combined environment merges the two endpoint variables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombineMode {
    Min,
    Max,
    Product,
    Sum,
}

impl CombineMode {
    pub fn apply(&self, a: f64, b: f64) -> f64 {
        match self {
            CombineMode::Min => a.min(b),
            CombineMode::Max => a.max(b),
            CombineMode::Product => a * b,
            CombineMode::Sum => a + b,
        }
    }
}

/// Recipe for generating an environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorSpec {
    Constant {
        value: f64,
    },
    Iid {
        law: Law,
    },
    /// omega(x,y) = combine(theta(x), theta(y)) with theta i.i.d. per vertex.
    VertexCombine {
        law: Law,
        mode: CombineMode,
    },
    /// omega(x,y) = exp(phi(x) + phi(y)) with phi the discrete Gaussian free
    /// field with zero boundary, sampled by exact Cholesky factorization of
    /// the box Laplacian. Requires an absorbing box.
    Dgff {
        scale: f64,
    },
    /// Trap construction: i.i.d. xi(e) uniform on [0,1]; for k = k0..k_max the
    /// edges with xi(e) <= 2^-k form an open subgraph whose connected
    /// components each receive one uniformly chosen trap edge of weight
    /// 2^(alpha k), with 2^(-beta k) on all adjacent edges, iterated over
    /// initial weights 1.
    Trap {
        alpha: f64,
        beta: f64,
        k0: u32,
        k_max: u32,
    },
}

/// Generation record kept with every environment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub spec: GeneratorSpec,
    pub seed: u64,
    #[serde(default)]
    pub notes: Vec<String>,
}

/// Positive edge weights on a box plus the derived vertex measures.
#[derive(Debug, Clone)]
pub struct Environment {
    lattice: Arc<LatticeBox>,
    weights: Vec<f64>,
    mu: Vec<f64>,
    nu: Vec<f64>,
    provenance: Provenance,
}

impl Environment {
    /// Build from explicit weights; checks positivity and caches mu, nu.
    pub fn from_weights(
        lattice: Arc<LatticeBox>,
        weights: Vec<f64>,
        provenance: Provenance,
    ) -> Result<Environment> {
        if weights.len() != lattice.n_edges() {
            return Err(Error::domain(format!(
                "expected {} edge weights, got {}",
                lattice.n_edges(),
                weights.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
            return Err(Error::domain(format!(
                "conductances must be positive and finite, found {w}"
            )));
        }
        let (mu, nu) = vertex_measures(&lattice, &weights);
        Ok(Environment {
            lattice,
            weights,
            mu,
            nu,
            provenance,
        })
    }

    pub fn lattice(&self) -> &LatticeBox {
        &self.lattice
    }

    pub fn lattice_arc(&self) -> Arc<LatticeBox> {
        Arc::clone(&self.lattice)
    }

    pub fn weight(&self, edge: usize) -> f64 {
        self.weights[edge]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// mu(x) = sum of conductances at x.
    pub fn mu(&self, x: usize) -> f64 {
        self.mu[x]
    }

    /// nu(x) = sum of reciprocal conductances at x.
    pub fn nu(&self, x: usize) -> f64 {
        self.nu[x]
    }

    pub fn mu_field(&self) -> VertexField {
        VertexField {
            shape: self.lattice.shape(),
            values: self.mu.clone(),
        }
    }

    pub fn nu_field(&self) -> VertexField {
        VertexField {
            shape: self.lattice.shape(),
            values: self.nu.clone(),
        }
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// Largest conductance.
    pub fn max_weight(&self) -> f64 {
        self.weights.iter().copied().fold(0.0, f64::max)
    }

    /// Environment shifted by z: the weight of edge {x,y} becomes the original
    /// weight of {x+z, y+z}. Only defined on periodic boxes.
    pub fn shifted(&self, z: &[i64]) -> Result<Environment> {
        if self.lattice.boundary() != Boundary::Periodic {
            return Err(Error::domain("space shifts require a periodic box"));
        }
        let b = &self.lattice;
        let mut weights = vec![0.0; b.n_edges()];
        for e in 0..b.n_edges() {
            let (tail, head) = b.edge_endpoints(e);
            let ct: Vec<i64> = b
                .coords(tail)
                .iter()
                .zip(z)
                .map(|(c, dz)| c + dz)
                .collect();
            let ch: Vec<i64> = b
                .coords(head)
                .iter()
                .zip(z)
                .map(|(c, dz)| c + dz)
                .collect();
            let st = b.index_of(&ct)?;
            let sh = b.index_of(&ch)?;
            let shifted_edge = edge_between(b, st, sh)
                .ok_or_else(|| Error::domain("shift broke adjacency (should not happen)"))?;
            weights[e] = self.weights[shifted_edge];
        }
        let mut provenance = self.provenance.clone();
        provenance.notes.push(format!("shifted by {z:?}"));
        Environment::from_weights(Arc::clone(&self.lattice), weights, provenance)
    }

    /// Copy with one edge (and optionally its neighbourhood) overwritten.
    pub fn with_weights(&self, updates: &[(usize, f64)]) -> Result<Environment> {
        let mut weights = self.weights.clone();
        for &(e, w) in updates {
            weights[e] = w;
        }
        let mut provenance = self.provenance.clone();
        provenance
            .notes
            .push(format!("{} edge weights overwritten", updates.len()));
        Environment::from_weights(Arc::clone(&self.lattice), weights, provenance)
    }
}

/// Edge id joining two adjacent vertices, if any.
pub fn edge_between(b: &LatticeBox, x: usize, y: usize) -> Option<usize> {
    b.adjacency(x)
        .iter()
        .find(|a| a.neighbor as usize == y)
        .map(|a| a.edge as usize)
}

fn vertex_measures(b: &LatticeBox, weights: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut mu = vec![0.0; b.n_vertices()];
    let mut nu = vec![0.0; b.n_vertices()];
    // geometric neighbour order keeps the sums translation invariant
    for v in 0..b.n_vertices() {
        for (_, e) in b.geometric_neighbors(v) {
            mu[v] += weights[e];
            nu[v] += 1.0 / weights[e];
        }
    }
    (mu, nu)
}

/// Generate an environment; deterministic given (spec, seed, box).
pub fn generate(
    lattice: &Arc<LatticeBox>,
    spec: &GeneratorSpec,
    seed: u64,
) -> Result<Environment> {
    let b = lattice;
    let mut notes = Vec::new();
    let weights = match spec {
        GeneratorSpec::Constant { value } => {
            if !(*value > 0.0 && value.is_finite()) {
                return Err(Error::domain("constant conductance must be positive"));
            }
            vec![*value; b.n_edges()]
        }
        GeneratorSpec::Iid { law } => {
            law.validate()?;
            let mut rng = stream_rng(seed, 0);
            (0..b.n_edges()).map(|_| law.sample(&mut rng)).collect()
        }
        GeneratorSpec::VertexCombine { law, mode } => {
            law.validate()?;
            let mut rng = stream_rng(seed, 0);
            let theta: Vec<f64> = (0..b.n_vertices()).map(|_| law.sample(&mut rng)).collect();
            (0..b.n_edges())
                .map(|e| {
                    let (tail, head) = b.edge_endpoints(e);
                    mode.apply(theta[tail], theta[head])
                })
                .collect()
        }
        GeneratorSpec::Dgff { scale } => {
            if b.boundary() != Boundary::Periodic && b.boundary() != Boundary::Absorbing {
                unreachable!()
            }
            if b.boundary() == Boundary::Periodic {
                return Err(Error::domain(
                    "the massless free field needs a zero boundary; use an absorbing box",
                ));
            }
            if !(*scale > 0.0) {
                return Err(Error::domain("dgff scale must be positive"));
            }
            let phi = sample_dgff(b, seed)?;
            (0..b.n_edges())
                .map(|e| {
                    let (tail, head) = b.edge_endpoints(e);
                    (scale * (phi[tail] + phi[head])).exp()
                })
                .collect()
        }
        GeneratorSpec::Trap {
            alpha,
            beta,
            k0,
            k_max,
        } => {
            if !(*alpha > 0.0 && *beta > 0.0) {
                return Err(Error::domain("trap parameters alpha, beta must be positive"));
            }
            if k0 > k_max {
                return Err(Error::domain("trap iteration needs k0 <= k_max"));
            }
            generate_trap_weights(b, *alpha, *beta, *k0, *k_max, seed, &mut notes)
        }
    };
    Environment::from_weights(
        Arc::clone(lattice),
        weights,
        Provenance {
            spec: spec.clone(),
            seed,
            notes,
        },
    )
}

/// Sample the zero-boundary Gaussian free field on the interior of an
/// absorbing box: covariance = inverse of the Dirichlet graph Laplacian,
/// realized by solving L^T phi = z for a Cholesky factor L and i.i.d. normal z.
fn sample_dgff(b: &LatticeBox, seed: u64) -> Result<Vec<f64>> {
    let interior = b.interior();
    let n = interior.len();
    if n == 0 {
        return Ok(vec![0.0; b.n_vertices()]);
    }
    if n > 4000 {
        return Err(Error::domain(format!(
            "dense free-field sampling is limited to 4000 interior vertices, box has {n}"
        )));
    }
    let mut pos = vec![usize::MAX; b.n_vertices()];
    for (i, &v) in interior.iter().enumerate() {
        pos[v as usize] = i;
    }
    let mut lap = nalgebra::DMatrix::<f64>::zeros(n, n);
    for (i, &v) in interior.iter().enumerate() {
        lap[(i, i)] = b.degree(v as usize) as f64;
        for adj in b.adjacency(v as usize) {
            let j = pos[adj.neighbor as usize];
            if j != usize::MAX {
                lap[(i, j)] = -1.0;
            }
        }
    }
    let chol = nalgebra::Cholesky::new(lap)
        .ok_or_else(|| Error::domain("Dirichlet Laplacian is not positive definite"))?;
    let mut rng = stream_rng(seed, 0);
    let z = nalgebra::DVector::from_iterator(
        n,
        (0..n).map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z
        }),
    );
    // phi = L^{-T} z has covariance (L L^T)^{-1}
    let phi_int = chol.l().transpose().solve_upper_triangular(&z).ok_or_else(|| {
        Error::domain("triangular solve failed while sampling the free field")
    })?;
    let mut phi = vec![0.0; b.n_vertices()];
    for (i, &v) in interior.iter().enumerate() {
        phi[v as usize] = phi_int[i];
    }
    Ok(phi)
}

/// Union-find with path halving and union by size.
struct UnionFind {
    parent: Vec<u32>,
    size: Vec<u32>,
}

impl UnionFind {
    fn new(n: usize) -> UnionFind {
        UnionFind {
            parent: (0..n as u32).collect(),
            size: vec![1; n],
        }
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let p = self.parent[x as usize];
            self.parent[x as usize] = self.parent[p as usize];
            x = p;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        if self.size[ra as usize] < self.size[rb as usize] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb as usize] = ra;
        self.size[ra as usize] += self.size[rb as usize];
    }
}

fn generate_trap_weights(
    b: &LatticeBox,
    alpha: f64,
    beta: f64,
    k0: u32,
    k_max: u32,
    seed: u64,
    notes: &mut Vec<String>,
) -> Vec<f64> {
    let mut weights = vec![1.0; b.n_edges()];
    let mut rng = stream_rng(seed, 0);
    let xi: Vec<f64> = (0..b.n_edges()).map(|_| rng.random::<f64>()).collect();

    for k in k0..=k_max {
        let threshold = 2f64.powi(-(k as i32));
        let open: Vec<usize> = (0..b.n_edges()).filter(|&e| xi[e] <= threshold).collect();
        if open.is_empty() {
            notes.push(format!("trap iteration stopped at k = {k}: no open edges"));
            return weights;
        }
        let mut uf = UnionFind::new(b.n_vertices());
        for &e in &open {
            let (tail, head) = b.edge_endpoints(e);
            uf.union(tail as u32, head as u32);
        }
        // group open edges by component, components ordered by their smallest
        // member vertex so the draw order is canonical
        let mut comp_min: std::collections::HashMap<u32, u32> = std::collections::HashMap::new();
        for &e in &open {
            let (tail, head) = b.edge_endpoints(e);
            let root = uf.find(tail as u32);
            let m = comp_min.entry(root).or_insert(u32::MAX);
            *m = (*m).min(tail as u32).min(head as u32);
        }
        let mut comps: Vec<(u32, u32)> = comp_min.into_iter().map(|(r, m)| (m, r)).collect();
        comps.sort_unstable();
        let mut comp_edges: std::collections::HashMap<u32, Vec<usize>> =
            std::collections::HashMap::new();
        for &e in &open {
            let (tail, _) = b.edge_endpoints(e);
            comp_edges.entry(uf.find(tail as u32)).or_default().push(e);
        }
        let mut rng_k = stream_rng(seed, 1 + k as u64);
        for (_, root) in comps {
            let edges = &comp_edges[&root];
            let pick = edges[rng_k.random_range(0..edges.len())];
            plant_trap_edge(b, &mut weights, pick, k, alpha, beta);
        }
    }
    notes.push(format!("trap iteration truncated at k_max = {k_max}"));
    weights
}

fn plant_trap_edge(
    b: &LatticeBox,
    weights: &mut [f64],
    edge: usize,
    k: u32,
    alpha: f64,
    beta: f64,
) {
    weights[edge] = 2f64.powf(alpha * k as f64);
    let (tail, head) = b.edge_endpoints(edge);
    for &v in &[tail, head] {
        for adj in b.adjacency(v) {
            if adj.edge as usize != edge {
                weights[adj.edge as usize] = 2f64.powf(-beta * k as f64);
            }
        }
    }
}

/// Plant a single k-trap at `edge` on top of an existing environment: the edge
/// gets weight 2^(alpha k), every adjacent edge 2^(-beta k).
pub fn plant_trap(env: &Environment, edge: usize, k: u32, alpha: f64, beta: f64) -> Result<Environment> {
    let b = env.lattice();
    if edge >= b.n_edges() {
        return Err(Error::domain("trap edge outside box"));
    }
    let mut weights = env.weights().to_vec();
    plant_trap_edge(b, &mut weights, edge, k, alpha, beta);
    let mut provenance = env.provenance().clone();
    provenance
        .notes
        .push(format!("planted {k}-trap at edge {edge} (alpha={alpha}, beta={beta})"));
    Environment::from_weights(env.lattice_arc(), weights, provenance)
}

/// Remove the trap structure at `edge`: the edge and all adjacent edges are
/// reset to weight 1.
pub fn ablate_trap(env: &Environment, edge: usize) -> Result<Environment> {
    let b = env.lattice();
    if edge >= b.n_edges() {
        return Err(Error::domain("trap edge outside box"));
    }
    let mut updates = vec![(edge, 1.0)];
    let (tail, head) = b.edge_endpoints(edge);
    for &v in &[tail, head] {
        for adj in b.adjacency(v) {
            updates.push((adj.edge as usize, 1.0));
        }
    }
    env.with_weights(&updates)
}

/// Scan for k-traps: edges e with omega(e) >= 2^(alpha k) whose adjacent edges
/// all satisfy omega(e') <= 2^(-beta k).
pub fn find_traps(env: &Environment, k: u32, alpha: f64, beta: f64) -> Vec<usize> {
    let b = env.lattice();
    let hi = 2f64.powf(alpha * k as f64);
    let lo = 2f64.powf(-beta * k as f64);
    (0..b.n_edges())
        .filter(|&e| {
            if env.weight(e) < hi {
                return false;
            }
            let (tail, head) = b.edge_endpoints(e);
            [tail, head].iter().all(|&v| {
                b.adjacency(v)
                    .iter()
                    .filter(|a| a.edge as usize != e)
                    .all(|a| env.weight(a.edge as usize) <= lo)
            })
        })
        .collect()
}

/// Empirical moment diagnostics of a conductance law.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MomentReport {
    pub p: f64,
    pub q: f64,
    pub d: usize,
    /// Monte Carlo estimate of E[omega^p] with its standard error.
    pub mean_omega_p: f64,
    pub se_omega_p: f64,
    /// Monte Carlo estimate of E[omega^-q] with its standard error.
    pub mean_omega_neg_q: f64,
    pub se_omega_neg_q: f64,
    /// Whether 1/p + 1/q < 2/d holds (exact arithmetic on the inputs).
    pub moment_condition_holds: bool,
    /// Estimate grows by more than 50% from half to full sample: the empirical
    /// moment shows no sign of converging.
    pub nonconvergent_p: bool,
    pub nonconvergent_neg_q: bool,
    /// For one environment: n, |mu|_{p,B(0,n)}, |nu|_{q,B(0,n)}.
    pub trajectory: Vec<(i64, f64, f64)>,
    /// First n at which both trajectories stay within `eps` (relative) of
    /// their value at the largest radius.
    pub stabilization_radius: Option<i64>,
    pub eps: f64,
}

/// Monte Carlo moments of the edge law over `n_envs` fresh environments, plus
/// the ergodic-average trajectories of one realized environment.
pub fn moment_report(
    lattice: &Arc<LatticeBox>,
    spec: &GeneratorSpec,
    p: f64,
    q: f64,
    n_envs: usize,
    eps: f64,
    seed: u64,
) -> Result<MomentReport> {
    if !(p > 0.0 && q > 0.0) {
        return Err(Error::domain("moment exponents p, q must be positive"));
    }
    if n_envs < 1 {
        return Err(Error::domain("moment_report needs at least one environment"));
    }
    let d = lattice.d();
    let mut samples_p: Vec<f64> = Vec::new();
    let mut samples_q: Vec<f64> = Vec::new();
    let mut first_env = None;
    for i in 0..n_envs {
        let env = generate(lattice, spec, derive_seed(seed, i as u64))?;
        for &w in env.weights() {
            samples_p.push(w.powf(p));
            samples_q.push(w.powf(-q));
        }
        if i == 0 {
            first_env = Some(env);
        }
    }
    let (mean_p, se_p, noncv_p) = mean_se_drift(&samples_p);
    let (mean_q, se_q, noncv_q) = mean_se_drift(&samples_q);

    let env = first_env.unwrap();
    let b = env.lattice();
    let center = b.index_of(&vec![0; d])?;
    let mu = env.mu_field();
    let nu = env.nu_field();
    let r_max = match b.boundary() {
        Boundary::Periodic => b.l(),
        Boundary::Absorbing => b.l() - 1,
    };
    let mut trajectory = Vec::new();
    let dist: Vec<i64> = (0..b.n_vertices()).map(|v| b.distance(center, v)).collect();
    for n in 1..=r_max.max(1) {
        let members: Vec<u32> = (0..b.n_vertices() as u32)
            .filter(|&v| dist[v as usize] <= n)
            .collect();
        let mu_norm = crate::lattice::avg_norm(&mu, &members, p.max(1.0), None)?;
        let nu_norm = crate::lattice::avg_norm(&nu, &members, q.max(1.0), None)?;
        trajectory.push((n, mu_norm, nu_norm));
    }
    let stabilization_radius = trajectory.last().map(|&(_, mu_f, nu_f)| {
        trajectory
            .iter()
            .find(|&&(_, m, v)| {
                (m - mu_f).abs() <= eps * mu_f.abs().max(1e-300)
                    && (v - nu_f).abs() <= eps * nu_f.abs().max(1e-300)
            })
            .map(|&(n, _, _)| n)
            .unwrap_or(r_max)
    });

    let inv_p = 1.0 / p;
    let inv_q = 1.0 / q;
    Ok(MomentReport {
        p,
        q,
        d,
        mean_omega_p: mean_p,
        se_omega_p: se_p,
        mean_omega_neg_q: mean_q,
        se_omega_neg_q: se_q,
        moment_condition_holds: inv_p + inv_q < 2.0 / d as f64,
        nonconvergent_p: noncv_p,
        nonconvergent_neg_q: noncv_q,
        trajectory,
        stabilization_radius,
        eps,
    })
}

/// Mean, batch standard error, and a divergence flag.
///
/// A divergent moment shows up in one of two ways at finite sample size: the
/// running mean keeps growing as samples accumulate, or a single sample
/// dominates the whole sum. Either symptom raises the flag.
fn mean_se_drift(samples: &[f64]) -> (f64, f64, bool) {
    let n = samples.len();
    let mut total = Kahan::default();
    let mut max_sample: f64 = 0.0;
    for &s in samples {
        total.add(s);
        max_sample = max_sample.max(s);
    }
    let mean = total.value() / n as f64;
    let mut half = Kahan::default();
    for &s in &samples[..n / 2] {
        half.add(s);
    }
    let half_mean = if n >= 2 { half.value() / (n / 2) as f64 } else { mean };
    let growth = if half_mean.abs() > 0.0 {
        mean / half_mean
    } else {
        1.0
    };
    let max_share = if total.value() > 0.0 {
        max_sample / total.value()
    } else {
        0.0
    };
    let nonconvergent = growth > 1.5 || max_share > 0.2;
    // batch means over 16 batches
    let n_batches = 16.min(n);
    let batch = n / n_batches.max(1);
    let mut means = Vec::new();
    for i in 0..n_batches {
        let lo = i * batch;
        let hi = if i == n_batches - 1 { n } else { lo + batch };
        if hi > lo {
            means.push(samples[lo..hi].iter().sum::<f64>() / (hi - lo) as f64);
        }
    }
    let m = means.len() as f64;
    let bm = means.iter().sum::<f64>() / m;
    let var = means.iter().map(|x| (x - bm) * (x - bm)).sum::<f64>() / (m - 1.0).max(1.0);
    let se = (var / m).sqrt();
    (mean, se, nonconvergent)
}

/// Norm data of a ball used by the Harnack constants: |mu|_{p,B(n)},
/// |nu|_{q,B(n)} and M = 1 v (|mu|_{1,B(n)} / |mu|_{1,B(n/2)}).
pub fn ball_norm_data(env: &Environment, ball_n: &Ball, ball_half: &Ball, p: f64, q: f64) -> Result<(f64, f64, f64)> {
    let mu = env.mu_field();
    let nu = env.nu_field();
    let mu_p = crate::lattice::avg_norm(&mu, &ball_n.members, p, None)?;
    let nu_q = crate::lattice::avg_norm(&nu, &ball_n.members, q, None)?;
    let m1_full = crate::lattice::avg_norm(&mu, &ball_n.members, 1.0, None)?;
    let m1_half = crate::lattice::avg_norm(&mu, &ball_half.members, 1.0, None)?;
    Ok((mu_p, nu_q, (m1_full / m1_half).max(1.0)))
}

// --- serialization ---

#[derive(Serialize, Deserialize)]
struct EnvJson {
    #[serde(rename = "box")]
    box_: crate::lattice::BoxShape,
    weights: Vec<f64>,
    provenance: Provenance,
}

/// JSON form: box descriptor, weights in canonical edge order, provenance.
pub fn env_to_json(env: &Environment) -> serde_json::Value {
    serde_json::to_value(EnvJson {
        box_: env.lattice().shape(),
        weights: env.weights().to_vec(),
        provenance: env.provenance().clone(),
    })
    .expect("environment serialization cannot fail")
}

pub fn env_from_json(v: &serde_json::Value) -> Result<Environment> {
    let parsed: EnvJson = serde_json::from_value(v.clone())?;
    let lattice = LatticeBox::new(parsed.box_.d, parsed.box_.l, parsed.box_.boundary)?;
    Environment::from_weights(lattice, parsed.weights, parsed.provenance)
}

const ENV_MAGIC: &[u8; 8] = b"CDLABENV";

/// Compact binary form: magic, JSON header (shape + provenance), then the raw
/// little-endian f64 weight array. Round-trips bit-exactly.
pub fn env_to_binary(env: &Environment, mut out: impl Write) -> Result<()> {
    out.write_all(ENV_MAGIC)?;
    let header = serde_json::to_vec(&serde_json::json!({
        "box": env.lattice().shape(),
        "provenance": env.provenance(),
    }))?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    out.write_all(&(env.weights().len() as u64).to_le_bytes())?;
    for w in env.weights() {
        out.write_all(&w.to_le_bytes())?;
    }
    Ok(())
}

pub fn env_from_binary(mut input: impl Read) -> Result<Environment> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != ENV_MAGIC {
        return Err(Error::domain("not a conduct-lab environment file"));
    }
    let mut len8 = [0u8; 8];
    input.read_exact(&mut len8)?;
    let hlen = u64::from_le_bytes(len8) as usize;
    let mut header = vec![0u8; hlen];
    input.read_exact(&mut header)?;
    let header: serde_json::Value = serde_json::from_slice(&header)?;
    let shape: crate::lattice::BoxShape = serde_json::from_value(header["box"].clone())?;
    let provenance: Provenance = serde_json::from_value(header["provenance"].clone())?;
    input.read_exact(&mut len8)?;
    let n = u64::from_le_bytes(len8) as usize;
    let mut weights = vec![0.0; n];
    let mut buf = [0u8; 8];
    for w in weights.iter_mut() {
        input.read_exact(&mut buf)?;
        *w = f64::from_le_bytes(buf);
    }
    let lattice = LatticeBox::new(shape.d, shape.l, shape.boundary)?;
    Environment::from_weights(lattice, weights, provenance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::Boundary;

    fn box2(l: i64, boundary: Boundary) -> Arc<LatticeBox> {
        LatticeBox::new(2, l, boundary).unwrap()
    }

    #[test]
    fn constant_environment_measures() {
        let b = box2(3, Boundary::Periodic);
        let env = generate(&b, &GeneratorSpec::Constant { value: 1.0 }, 0).unwrap();
        for v in 0..b.n_vertices() {
            assert_eq!(env.mu(v), 4.0);
            assert_eq!(env.nu(v), 4.0);
        }
        let env_c = generate(&b, &GeneratorSpec::Constant { value: 2.5 }, 0).unwrap();
        for v in 0..b.n_vertices() {
            assert!((env_c.mu(v) - 4.0 * 2.5).abs() < 1e-14);
            assert!((env_c.nu(v) - 4.0 / 2.5).abs() < 1e-14);
        }
    }

    #[test]
    fn mu_nu_match_recomputation() {
        let b = box2(4, Boundary::Periodic);
        let env = generate(
            &b,
            &GeneratorSpec::Iid { law: Law::Uniform { lo: 0.2, hi: 3.0 } },
            9,
        )
        .unwrap();
        for v in 0..b.n_vertices() {
            let mut mu = 0.0;
            let mut nu = 0.0;
            for adj in b.adjacency(v) {
                mu += env.weight(adj.edge as usize);
                nu += 1.0 / env.weight(adj.edge as usize);
            }
            assert!((env.mu(v) - mu).abs() <= 1e-12 * mu.abs());
            assert!((env.nu(v) - nu).abs() <= 1e-12 * nu.abs());
        }
    }

    #[test]
    fn generation_is_reproducible() {
        let b = box2(3, Boundary::Periodic);
        for spec in [
            GeneratorSpec::Iid { law: Law::Uniform { lo: 0.5, hi: 2.0 } },
            GeneratorSpec::VertexCombine {
                law: Law::PowUniform { power: 2.0 },
                mode: CombineMode::Min,
            },
            GeneratorSpec::Trap { alpha: 1.0, beta: 1.0, k0: 1, k_max: 6 },
        ] {
            let a = generate(&b, &spec, 123).unwrap();
            let c = generate(&b, &spec, 123).unwrap();
            assert_eq!(a.weights(), c.weights(), "{spec:?}");
            let d = generate(&b, &spec, 124).unwrap();
            assert_ne!(a.weights(), d.weights(), "{spec:?}");
        }
    }

    #[test]
    fn vertex_combine_bounds() {
        let b = box2(3, Boundary::Periodic);
        let law = Law::Uniform { lo: 0.1, hi: 2.0 };
        let seed = 5;
        let min = generate(&b, &GeneratorSpec::VertexCombine { law: law.clone(), mode: CombineMode::Min }, seed).unwrap();
        let max = generate(&b, &GeneratorSpec::VertexCombine { law: law.clone(), mode: CombineMode::Max }, seed).unwrap();
        let sum = generate(&b, &GeneratorSpec::VertexCombine { law, mode: CombineMode::Sum }, seed).unwrap();
        for e in 0..b.n_edges() {
            assert!(min.weight(e) <= max.weight(e) + 1e-15);
            assert!(0.5 * sum.weight(e) <= max.weight(e) + 1e-15);
            assert!(max.weight(e) <= sum.weight(e) + 1e-15);
        }
        // min of equal values is the value
        let cst = generate(
            &b,
            &GeneratorSpec::VertexCombine { law: Law::Constant { value: 0.7 }, mode: CombineMode::Min },
            seed,
        )
        .unwrap();
        assert!(cst.weights().iter().all(|&w| (w - 0.7).abs() < 1e-15));
    }

    #[test]
    fn dgff_reconstruction_and_boundary() {
        let b = box2(4, Boundary::Absorbing);
        let env = generate(&b, &GeneratorSpec::Dgff { scale: 1.0 }, 17).unwrap();
        // recover phi from the weights of edges into the zero-boundary shell:
        // for an edge {x, s} with s on the shell, omega = exp(phi(x)).
        let mut phi = vec![f64::NAN; b.n_vertices()];
        for v in b.shell() {
            phi[v as usize] = 0.0;
        }
        for e in 0..b.n_edges() {
            let (tail, head) = b.edge_endpoints(e);
            if !b.is_interior(head) && b.is_interior(tail) {
                phi[tail] = env.weight(e).ln();
            } else if !b.is_interior(tail) && b.is_interior(head) {
                phi[head] = env.weight(e).ln();
            }
        }
        // every edge weight must equal exp(phi(x) + phi(y)) where phi is known
        for e in 0..b.n_edges() {
            let (tail, head) = b.edge_endpoints(e);
            if phi[tail].is_nan() || phi[head].is_nan() {
                continue;
            }
            let expect = (phi[tail] + phi[head]).exp();
            assert!(
                (env.weight(e) - expect).abs() <= 1e-9 * expect.abs().max(1.0),
                "edge {e}"
            );
        }
        // periodic box is rejected
        let p = box2(4, Boundary::Periodic);
        assert!(generate(&p, &GeneratorSpec::Dgff { scale: 1.0 }, 17).is_err());
    }

    #[test]
    fn trap_structure_invariants() {
        let b = box2(10, Boundary::Periodic);
        let env = generate(
            &b,
            &GeneratorSpec::Trap { alpha: 1.0, beta: 1.0, k0: 2, k_max: 8 },
            31,
        )
        .unwrap();
        // no two edges with weight > 1 are adjacent
        for e in 0..b.n_edges() {
            if env.weight(e) > 1.0 {
                let (tail, head) = b.edge_endpoints(e);
                for &v in &[tail, head] {
                    for adj in b.adjacency(v) {
                        if adj.edge as usize != e {
                            assert!(
                                env.weight(adj.edge as usize) < 1.0,
                                "high-conductance edges must be isolated"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn single_k_iteration_plants_verified_traps() {
        let b = box2(8, Boundary::Periodic);
        let k = 3;
        let env = generate(
            &b,
            &GeneratorSpec::Trap { alpha: 1.0, beta: 0.5, k0: k, k_max: k },
            77,
        )
        .unwrap();
        let traps = find_traps(&env, k, 1.0, 0.5);
        assert!(!traps.is_empty(), "a 21x21 box at threshold 1/8 has open edges");
        for e in traps {
            assert!(env.weight(e) >= 2f64.powi(k as i32));
            let (tail, head) = b.edge_endpoints(e);
            for &v in &[tail, head] {
                for adj in b.adjacency(v) {
                    if adj.edge as usize != e {
                        assert!(env.weight(adj.edge as usize) <= 2f64.powf(-0.5 * k as f64) + 1e-15);
                    }
                }
            }
        }
    }

    #[test]
    fn planted_trap_scan_and_ablation() {
        let b = box2(6, Boundary::Periodic);
        let base = generate(&b, &GeneratorSpec::Constant { value: 1.0 }, 0).unwrap();
        let x = b.index_of(&[2, 0]).unwrap();
        let y = b.index_of(&[3, 0]).unwrap();
        let e = edge_between(&b, x, y).unwrap();
        let env = plant_trap(&base, e, 3, 1.0, 1.0).unwrap();
        assert_eq!(find_traps(&env, 3, 1.0, 1.0), vec![e]);
        let back = ablate_trap(&env, e).unwrap();
        assert_eq!(back.weights(), base.weights());
    }

    #[test]
    fn moment_report_constant_law() {
        let b = box2(6, Boundary::Periodic);
        let r = moment_report(&b, &GeneratorSpec::Constant { value: 1.0 }, 2.0, 2.0, 3, 0.05, 1).unwrap();
        assert_eq!(r.mean_omega_p, 1.0);
        assert_eq!(r.mean_omega_neg_q, 1.0);
        assert_eq!(r.stabilization_radius, Some(1));
        assert!(!r.nonconvergent_p);
        // d = 2, p = q = 2: 1/2 + 1/2 = 1 = 2/d is not < 2/d
        assert!(!r.moment_condition_holds);
        let r2 = moment_report(&b, &GeneratorSpec::Constant { value: 1.0 }, 8.0, 8.0, 1, 0.05, 1).unwrap();
        assert!(r2.moment_condition_holds);
    }

    #[test]
    fn moment_report_uniform_mean_and_divergence_flag() {
        let b = box2(8, Boundary::Periodic);
        // E[omega] = 1.5 for Uniform[1,2]
        let r = moment_report(
            &b,
            &GeneratorSpec::Iid { law: Law::Uniform { lo: 1.0, hi: 2.0 } },
            1.0,
            1.0,
            40,
            0.05,
            2,
        )
        .unwrap();
        assert!(
            (r.mean_omega_p - 1.5).abs() <= 3.0 * r.se_omega_p,
            "mean {} se {}",
            r.mean_omega_p,
            r.se_omega_p
        );
        assert!(!r.nonconvergent_p);

        // density ~ u^(-1/2) near 0 (PowUniform power 2): E[omega^-1] = infinity
        let div = moment_report(
            &b,
            &GeneratorSpec::Iid { law: Law::PowUniform { power: 2.0 } },
            1.0,
            1.0,
            40,
            0.05,
            3,
        )
        .unwrap();
        assert!(div.nonconvergent_neg_q, "E[omega^-1] must be flagged divergent");
    }

    #[test]
    fn environment_roundtrips() {
        let b = box2(3, Boundary::Periodic);
        let env = generate(
            &b,
            &GeneratorSpec::Iid { law: Law::LogNormal { mu: 0.0, sigma: 1.0 } },
            55,
        )
        .unwrap();
        let j = env_to_json(&env);
        let back = env_from_json(&j).unwrap();
        assert_eq!(env.weights(), back.weights());

        let mut buf = Vec::new();
        env_to_binary(&env, &mut buf).unwrap();
        let back2 = env_from_binary(buf.as_slice()).unwrap();
        assert_eq!(env.weights(), back2.weights());
    }

    #[test]
    fn shift_covariance_of_weights() {
        let b = box2(3, Boundary::Periodic);
        let env = generate(
            &b,
            &GeneratorSpec::Iid { law: Law::Uniform { lo: 0.5, hi: 2.0 } },
            8,
        )
        .unwrap();
        let z = [1i64, -2];
        let shifted = env.shifted(&z).unwrap();
        for e in 0..b.n_edges() {
            let (tail, head) = b.edge_endpoints(e);
            let ct: Vec<i64> = b.coords(tail).iter().zip(&z).map(|(c, dz)| c + dz).collect();
            let ch: Vec<i64> = b.coords(head).iter().zip(&z).map(|(c, dz)| c + dz).collect();
            let orig = edge_between(&b, b.index_of(&ct).unwrap(), b.index_of(&ch).unwrap()).unwrap();
            assert_eq!(shifted.weight(e), env.weight(orig));
        }
    }
}
