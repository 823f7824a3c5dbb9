//! Walk generators, exact finite-box heat kernels, and Green kernels.
//!
//! Three reversible walks share the jump law `p(x,y) = omega(x,y)/mu(x)`:
//! the constant-speed walk (unit holding rate, reversible for `mu`), the
//! variable-speed walk (total rate `mu(x)`, reversible for the counting
//! measure), and the time-changed walk with a positive speed measure `pi`
//! (total rate `mu(x)/pi(x)`, reversible for `pi`).
//!
//! Heat kernels are computed by uniformization: with `Lambda` an upper bound
//! on the total jump rate, the transition matrix `P_Lambda = I + Q/Lambda` is
//! (sub)stochastic and
//!
//! ```text
//! P_t = sum_{n>=0} e^{-Lambda t} (Lambda t)^n / n!  P_Lambda^n .
//! ```
//!
//! Truncating the series after N terms loses exactly the Poisson tail mass,
//! which is recorded as a rigorous l1 (hence also sup-norm) error certificate
//! on the returned distribution. For the constant-speed walk `Lambda = 1` and
//! `P_Lambda` is the jump chain itself, so the series has no slack at all.
//! Stiff environments with huge `Lambda t` are handled by splitting the time
//! interval into semigroup steps whose certificates add.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::environment::Environment;
use crate::error::{Error, Result};
use crate::lattice::{Boundary, VertexField};
use crate::numeric::{displacement_margin, ln_factorial, Kahan};
use crate::solver::{solve_spd, SpdOperator};

/// Which of the three walks an operator refers to.
#[derive(Debug, Clone)]
pub enum WalkKind {
    /// Constant-speed walk: waits Exp(1), reversible measure mu.
    Csrw,
    /// Variable-speed walk: waits Exp(mean 1/mu(x)), reversible for counting
    /// measure.
    Vsrw,
    /// Time change of the variable-speed walk by a positive speed measure.
    TimeChanged(VertexField),
}

impl WalkKind {
    pub fn tag(&self) -> &'static str {
        match self {
            WalkKind::Csrw => "csrw",
            WalkKind::Vsrw => "vsrw",
            WalkKind::TimeChanged(_) => "time_changed",
        }
    }

    /// Time change with pi = mu, which reproduces the constant-speed walk.
    pub fn time_changed_mu(env: &Environment) -> WalkKind {
        WalkKind::TimeChanged(env.mu_field())
    }

    /// Reversible measure m of the walk: mu, 1, or pi.
    pub fn speed_measure(&self, env: &Environment, x: usize) -> f64 {
        match self {
            WalkKind::Csrw => env.mu(x),
            WalkKind::Vsrw => 1.0,
            WalkKind::TimeChanged(pi) => pi.values[x],
        }
    }

    /// Total jump rate at x.
    pub fn rate(&self, env: &Environment, x: usize) -> f64 {
        match self {
            WalkKind::Csrw => 1.0,
            WalkKind::Vsrw => env.mu(x),
            WalkKind::TimeChanged(pi) => env.mu(x) / pi.values[x],
        }
    }

    fn validate(&self, env: &Environment) -> Result<()> {
        if let WalkKind::TimeChanged(pi) = self {
            env.lattice().check_shape(pi.shape, "speed measure")?;
            if pi.values.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::domain("speed measure must be positive everywhere"));
            }
        }
        Ok(())
    }
}

/// Apply the generator of the chosen walk to a vertex field:
/// `(L f)(x) = m_rate(x)^-1 sum_y omega(x,y) (f(y) - f(x))` with
/// `m_rate = mu` (constant speed), `1` (variable speed), `pi` (time change).
/// On absorbing boxes the generator acts at interior vertices only; shell
/// entries of the output are zero and shell values of `f` are read as data.
pub fn apply_generator(env: &Environment, kind: &WalkKind, f: &VertexField) -> Result<VertexField> {
    let b = env.lattice();
    b.check_shape(f.shape, "generator input")?;
    kind.validate(env)?;
    let mut out = VertexField::zeros(b);
    for x in 0..b.n_vertices() {
        if !b.is_interior(x) {
            continue;
        }
        let mut acc = 0.0;
        for adj in b.adjacency(x) {
            acc += env.weight(adj.edge as usize) * (f.values[adj.neighbor as usize] - f.values[x]);
        }
        let denom = match kind {
            WalkKind::Csrw => env.mu(x),
            WalkKind::Vsrw => 1.0,
            WalkKind::TimeChanged(pi) => pi.values[x],
        };
        out.values[x] = acc / denom;
    }
    Ok(out)
}

/// Controls for the uniformization series.
#[derive(Debug, Clone, Copy)]
pub struct KernelOptions {
    /// Total certified error budget.
    pub tol: f64,
    /// Split the horizon into semigroup steps once `Lambda t` exceeds this.
    pub split_threshold: f64,
    /// Hard ceiling on series terms per step.
    pub max_terms: usize,
    /// When false, horizons beyond `split_threshold` are an error instead of
    /// being split automatically.
    pub auto_split: bool,
}

impl Default for KernelOptions {
    fn default() -> Self {
        KernelOptions {
            tol: 1e-10,
            split_threshold: 4096.0,
            max_terms: 1 << 21,
            auto_split: true,
        }
    }
}

/// Distribution of a walk at a fixed time together with its density and a
/// certified truncation error.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelField {
    pub shape: crate::lattice::BoxShape,
    pub kind: String,
    pub t: f64,
    pub x0: usize,
    /// P(y) = probability of being at y at time t (started from x0).
    pub p: Vec<f64>,
    /// q(y) = P(y) / m(y), the density w.r.t. the reversible measure.
    pub q: Vec<f64>,
    /// Certified l1 bound on |P - P_exact|; also a sup-norm bound.
    pub err: f64,
}

impl KernelField {
    pub fn total_mass(&self) -> f64 {
        let mut k = Kahan::default();
        for &v in &self.p {
            k.add(v);
        }
        k.value()
    }

    /// Mass absorbed at the Dirichlet shell (absorbing boxes); at most `err`
    /// away from `1 - total_mass`.
    pub fn absorbed_mass(&self) -> f64 {
        (1.0 - self.total_mass()).max(0.0)
    }
}

/// Uniformized jump structure of (env, kind), with incoming-edge layout so a
/// transition step is a gather per target vertex (parallel and deterministic).
pub(crate) struct UniformChain {
    pub lambda: f64,
    n: usize,
    self_p: Vec<f64>,
    in_offsets: Vec<u32>,
    in_from: Vec<u32>,
    in_weight: Vec<f64>,
}

impl UniformChain {
    pub fn new(env: &Environment, kind: &WalkKind) -> Result<UniformChain> {
        kind.validate(env)?;
        let b = env.lattice();
        let n = b.n_vertices();
        let interior: Vec<bool> = (0..n).map(|v| b.is_interior(v)).collect();
        let mut lambda: f64 = 0.0;
        for x in 0..n {
            if interior[x] {
                lambda = lambda.max(kind.rate(env, x));
            }
        }
        if lambda <= 0.0 {
            lambda = 1.0;
        }
        // CSRW: rate is exactly 1 everywhere, Lambda = 1 with no self-loop.
        // Incoming entries are stored in local geometric order (axis by axis,
        // minus then plus) so the gather sum is translation invariant and
        // shifted environments give bit-identical kernels.
        let mut self_p = vec![0.0; n];
        for x in 0..n {
            if interior[x] {
                self_p[x] = 1.0 - kind.rate(env, x) / lambda;
            }
        }
        let mut in_offsets = vec![0u32; n + 1];
        let mut in_from: Vec<u32> = Vec::new();
        let mut in_weight: Vec<f64> = Vec::new();
        for y in 0..n {
            if interior[y] {
                for (x, edge) in b.geometric_neighbors(y) {
                    if !interior[x] {
                        continue;
                    }
                    let denom = match kind {
                        WalkKind::Csrw => env.mu(x),
                        WalkKind::Vsrw => 1.0,
                        WalkKind::TimeChanged(pi) => pi.values[x],
                    };
                    in_from.push(x as u32);
                    in_weight.push(env.weight(edge) / (denom * lambda));
                }
            }
            in_offsets[y + 1] = in_from.len() as u32;
        }
        Ok(UniformChain {
            lambda,
            n,
            self_p,
            in_offsets,
            in_from,
            in_weight,
        })
    }

    /// One application of the (sub)stochastic uniformized transition matrix to
    /// a distribution vector.
    pub fn step(&self, v: &[f64], out: &mut [f64]) {
        let chunk = 4096;
        out.par_chunks_mut(chunk).enumerate().for_each(|(ci, slab)| {
            let base = ci * chunk;
            for (i, o) in slab.iter_mut().enumerate() {
                let y = base + i;
                let mut acc = self.self_p[y] * v[y];
                let lo = self.in_offsets[y] as usize;
                let hi = self.in_offsets[y + 1] as usize;
                for k in lo..hi {
                    acc += self.in_weight[k] * v[self.in_from[k] as usize];
                }
                *o = acc;
            }
        });
    }

    /// Evolve a distribution by time `t`; returns the accumulated series and
    /// the certified tail mass dropped.
    pub fn evolve(&self, rho: &[f64], t: f64, tol: f64, max_terms: usize) -> Result<(Vec<f64>, f64)> {
        let lt = self.lambda * t;
        let mut acc = vec![0.0; self.n];
        let mut cur = rho.to_vec();
        let mut next = vec![0.0; self.n];
        let mut cum = Kahan::default();
        let ln_lt = lt.ln();
        let mut n = 0usize;
        loop {
            let w = if lt == 0.0 {
                if n == 0 {
                    1.0
                } else {
                    0.0
                }
            } else {
                (n as f64 * ln_lt - lt - ln_factorial(n)).exp()
            };
            if w > 0.0 {
                for i in 0..self.n {
                    acc[i] += w * cur[i];
                }
            }
            cum.add(w);
            let tail = 1.0 - cum.value();
            if tail <= tol || lt == 0.0 {
                return Ok((acc, tail.max(0.0)));
            }
            if n >= max_terms {
                return Err(Error::tolerance(format!(
                    "uniformization series needs more than {max_terms} terms for Lambda*t = {lt:.3e}; \
                     split the horizon into semigroup steps (see KernelOptions::split_threshold)"
                )));
            }
            self.step(&cur, &mut next);
            std::mem::swap(&mut cur, &mut next);
            n += 1;
        }
    }
}

fn finish_kernel(
    env: &Environment,
    kind: &WalkKind,
    t: f64,
    x0: usize,
    p: Vec<f64>,
    err: f64,
) -> KernelField {
    let b = env.lattice();
    let q = (0..b.n_vertices())
        .map(|y| p[y] / kind.speed_measure(env, y))
        .collect();
    KernelField {
        shape: b.shape(),
        kind: kind.tag().to_string(),
        t,
        x0,
        p,
        q,
        err,
    }
}

/// Heat kernel `P_x0[Y_t = .]` with a certified truncation error, default
/// options.
pub fn heat_kernel(env: &Environment, kind: &WalkKind, t: f64, x0: usize, tol: f64) -> Result<KernelField> {
    heat_kernel_opts(
        env,
        kind,
        t,
        x0,
        &KernelOptions {
            tol,
            ..KernelOptions::default()
        },
    )
}

pub fn heat_kernel_opts(
    env: &Environment,
    kind: &WalkKind,
    t: f64,
    x0: usize,
    opts: &KernelOptions,
) -> Result<KernelField> {
    let b = env.lattice();
    if x0 >= b.n_vertices() {
        return Err(Error::domain("kernel source outside box"));
    }
    if !b.is_interior(x0) {
        return Err(Error::domain("kernel source must be an interior vertex"));
    }
    if !(t >= 0.0) {
        return Err(Error::domain("kernel time must be non-negative"));
    }
    if !(opts.tol > 0.0) {
        return Err(Error::domain("kernel tolerance must be positive"));
    }
    let chain = UniformChain::new(env, kind)?;
    let mut rho = vec![0.0; b.n_vertices()];
    rho[x0] = 1.0;
    if t == 0.0 {
        return Ok(finish_kernel(env, kind, t, x0, rho, 0.0));
    }
    let lt = chain.lambda * t;
    let n_steps = if lt <= opts.split_threshold {
        1
    } else if opts.auto_split {
        (lt / opts.split_threshold).ceil() as usize
    } else {
        return Err(Error::tolerance(format!(
            "Lambda*t = {lt:.3e} exceeds the series threshold {}; enable auto_split or \
             propagate with semigroup_step",
            opts.split_threshold
        )));
    };
    let step_tol = opts.tol / n_steps as f64;
    let dt = t / n_steps as f64;
    let mut err = 0.0;
    for _ in 0..n_steps {
        let (next, tail) = chain.evolve(&rho, dt, step_tol, opts.max_terms)?;
        rho = next;
        err += tail;
    }
    Ok(finish_kernel(env, kind, t, x0, rho, err))
}

/// Propagate an existing kernel by additional time `s` (Chapman-Kolmogorov);
/// certificates add.
pub fn semigroup_step(
    k1: &KernelField,
    env: &Environment,
    kind: &WalkKind,
    s: f64,
    tol: f64,
) -> Result<KernelField> {
    let b = env.lattice();
    b.check_shape(k1.shape, "kernel field")?;
    if k1.kind != kind.tag() {
        return Err(Error::domain(format!(
            "kernel was computed for walk kind {}, stepping requested {}",
            k1.kind,
            kind.tag()
        )));
    }
    if !(s >= 0.0) {
        return Err(Error::domain("step time must be non-negative"));
    }
    if s == 0.0 {
        return Ok(k1.clone());
    }
    let chain = UniformChain::new(env, kind)?;
    let opts = KernelOptions::default();
    let lt = chain.lambda * s;
    let n_steps = if lt <= opts.split_threshold {
        1
    } else {
        (lt / opts.split_threshold).ceil() as usize
    };
    let mut rho = k1.p.clone();
    let mut err = k1.err;
    for _ in 0..n_steps {
        let (next, tail) = chain.evolve(&rho, s / n_steps as f64, tol / n_steps as f64, opts.max_terms)?;
        rho = next;
        err += tail;
    }
    Ok(finish_kernel(env, kind, k1.t + s, k1.x0, rho, err))
}

/// Evaluate a kernel along an increasing time grid with one chain of
/// semigroup steps; errors accumulate left to right.
pub fn heat_kernel_grid(
    env: &Environment,
    kind: &WalkKind,
    times: &[f64],
    x0: usize,
    tol: f64,
) -> Result<Vec<KernelField>> {
    if times.is_empty() {
        return Ok(Vec::new());
    }
    if times.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::domain("time grid must be non-decreasing"));
    }
    let per = tol / times.len() as f64;
    let mut out = Vec::with_capacity(times.len());
    let mut cur = heat_kernel(env, kind, times[0], x0, per)?;
    out.push(cur.clone());
    for &t in &times[1..] {
        cur = semigroup_step(&cur, env, kind, t - cur.t, per)?;
        out.push(cur.clone());
    }
    Ok(out)
}

/// Margin policy: product of box side needed so that a walk with jump-rate
/// bound `lambda` cannot feel the wrap/boundary before time `t`, at mass
/// level `eps`.
pub fn horizon_margin(d: usize, lambda: f64, t: f64, eps: f64) -> i64 {
    displacement_margin(d, lambda * t, eps)
}

/// Smallest periodic half-extent L so that kernels up to time `t` evaluated
/// within `|y|_inf <= radius` of the source carry wrap-around error below
/// `eps`.
pub fn required_half_extent(d: usize, lambda: f64, t: f64, radius: i64, eps: f64) -> i64 {
    let m = horizon_margin(d, lambda, t, eps);
    // images are at l-infinity distance >= side - radius from the source
    let side = m + radius;
    let l = (side - 1) / 2 + 1;
    l.max(radius + 1)
}

/// Green kernel of the killed walk on an absorbing box.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GreenField {
    pub shape: crate::lattice::BoxShape,
    pub kind: String,
    pub x0: usize,
    /// Green density g(x0, y) = integral of q(t, x0, y) dt; zero on the shell.
    /// Shared by all three walks (the occupation density w.r.t. the speed
    /// measure is invariant under time change).
    pub g: Vec<f64>,
    /// Occupation measure: expected time spent at y, `g(y) * m(y)`.
    pub occupation: Vec<f64>,
    pub method: String,
    pub accuracy: f64,
}

/// Dirichlet operator S(x,x) = mu(x), S(x,y) = -omega(x,y) restricted to
/// interior vertices.
struct DirichletOperator<'a> {
    env: &'a Environment,
    interior: Vec<u32>,
    pos: Vec<u32>,
}

impl<'a> DirichletOperator<'a> {
    fn new(env: &'a Environment) -> DirichletOperator<'a> {
        let b = env.lattice();
        let interior = b.interior();
        let mut pos = vec![u32::MAX; b.n_vertices()];
        for (i, &v) in interior.iter().enumerate() {
            pos[v as usize] = i as u32;
        }
        DirichletOperator { env, interior, pos }
    }
}

impl SpdOperator for DirichletOperator<'_> {
    fn len(&self) -> usize {
        self.interior.len()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let b = self.env.lattice();
        for (i, &v) in self.interior.iter().enumerate() {
            let v = v as usize;
            let mut acc = self.env.mu(v) * x[i];
            for adj in b.adjacency(v) {
                let j = self.pos[adj.neighbor as usize];
                if j != u32::MAX {
                    acc -= self.env.weight(adj.edge as usize) * x[j as usize];
                }
            }
            y[i] = acc;
        }
    }

    fn diagonal(&self) -> Vec<f64> {
        self.interior
            .iter()
            .map(|&v| self.env.mu(v as usize))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GreenMethod {
    /// Solve the sparse Dirichlet system (default).
    LinearSolve,
    /// Sum the uniformized series of occupation increments.
    Series,
}

pub fn green_kernel(
    env: &Environment,
    kind: &WalkKind,
    x0: usize,
    tol: f64,
    method: GreenMethod,
) -> Result<GreenField> {
    let b = env.lattice();
    if b.boundary() == Boundary::Periodic {
        return Err(Error::domain(
            "the Green kernel diverges on a periodic box (constant null vector); use an absorbing box",
        ));
    }
    if x0 >= b.n_vertices() || !b.is_interior(x0) {
        return Err(Error::domain("Green source must be an interior vertex"));
    }
    kind.validate(env)?;
    let (g, method_name, accuracy) = match method {
        GreenMethod::LinearSolve => {
            let op = DirichletOperator::new(env);
            let mut rhs = vec![0.0; op.len()];
            rhs[op.pos[x0] as usize] = 1.0;
            let (h, rep) = solve_spd(&op, &rhs, tol)?;
            let mut g = vec![0.0; b.n_vertices()];
            for (i, &v) in op.interior.iter().enumerate() {
                g[v as usize] = h[i];
            }
            (g, format!("linear-solve ({})", rep.method), rep.residual)
        }
        GreenMethod::Series => {
            // occupation = (1/Lambda) sum_n P_Lambda^n delta; stop when the
            // surviving mass (a geometric upper bound on the tail) is small
            let chain = UniformChain::new(env, kind)?;
            let n = b.n_vertices();
            let mut cur = vec![0.0; n];
            cur[x0] = 1.0;
            let mut occ = vec![0.0; n];
            let mut next = vec![0.0; n];
            let mut prev_mass = 1.0f64;
            let mut tail_bound = f64::INFINITY;
            let max_n = 200_000_000 / n.max(1);
            for _ in 0..max_n {
                for i in 0..n {
                    occ[i] += cur[i];
                }
                chain.step(&cur, &mut next);
                std::mem::swap(&mut cur, &mut next);
                let mass: f64 = cur.iter().sum();
                let decay = mass / prev_mass.max(1e-300);
                prev_mass = mass;
                if decay < 1.0 {
                    tail_bound = mass / (1.0 - decay);
                }
                if tail_bound <= tol {
                    break;
                }
            }
            if tail_bound > tol {
                return Err(Error::tolerance(format!(
                    "occupation series tail bound {tail_bound:.3e} above tolerance {tol:.1e}"
                )));
            }
            let mut g = vec![0.0; n];
            for v in 0..n {
                // occupation of the uniformized chain corresponds to time
                // 1/Lambda per visit; density divides out the speed measure
                let occupation_time = occ[v] / chain.lambda;
                g[v] = occupation_time / kind.speed_measure(env, v);
            }
            (g, "series".to_string(), tail_bound)
        }
    };
    let occupation = (0..b.n_vertices())
        .map(|v| g[v] * kind.speed_measure(env, v))
        .collect();
    Ok(GreenField {
        shape: b.shape(),
        kind: kind.tag().to_string(),
        x0,
        g,
        occupation,
        method: method_name,
        accuracy,
    })
}

/// JSON schema for kernel fields: metadata plus flat arrays in canonical
/// vertex order.
pub fn kernel_to_json(k: &KernelField) -> serde_json::Value {
    serde_json::to_value(k).expect("kernel serialization cannot fail")
}

pub fn green_to_json(g: &GreenField) -> serde_json::Value {
    serde_json::to_value(g).expect("green serialization cannot fail")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::{generate, GeneratorSpec, Law};
    use crate::lattice::LatticeBox;
    use std::sync::Arc;

    fn small_env(l: i64, boundary: Boundary, seed: u64) -> Environment {
        let b = LatticeBox::new(2, l, boundary).unwrap();
        generate(
            &b,
            &GeneratorSpec::Iid { law: Law::Uniform { lo: 0.5, hi: 1.5 } },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn generator_annihilates_constants() {
        let env = small_env(3, Boundary::Periodic, 1);
        let f = VertexField::constant(env.lattice(), 2.0);
        for kind in [WalkKind::Csrw, WalkKind::Vsrw, WalkKind::time_changed_mu(&env)] {
            let lf = apply_generator(&env, &kind, &f).unwrap();
            assert!(lf.values.iter().all(|&v| v.abs() < 1e-14));
        }
    }

    #[test]
    fn cosine_is_vsrw_eigenfunction() {
        // omega = 1 on a periodic box: f = cos(2 pi x1 / side) satisfies
        // L_vsrw f = -2 (1 - cos(2 pi / side)) f
        let b = LatticeBox::new(2, 5, Boundary::Periodic).unwrap();
        let env = generate(&b, &GeneratorSpec::Constant { value: 1.0 }, 0).unwrap();
        let side = (2 * b.l() + 1) as f64;
        let f = VertexField::from_fn(&b, |c| (2.0 * std::f64::consts::PI * c[0] as f64 / side).cos());
        let lf = apply_generator(&env, &WalkKind::Vsrw, &f).unwrap();
        let lam = -2.0 * (1.0 - (2.0 * std::f64::consts::PI / side).cos());
        for v in 0..b.n_vertices() {
            assert!((lf.values[v] - lam * f.values[v]).abs() < 1e-12);
        }
    }

    #[test]
    fn time_change_by_mu_is_csrw() {
        let env = small_env(3, Boundary::Periodic, 2);
        let mut rng = crate::rng::seeded_rng(5);
        let f = VertexField {
            shape: env.lattice().shape(),
            values: (0..env.lattice().n_vertices())
                .map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0))
                .collect(),
        };
        let a = apply_generator(&env, &WalkKind::Csrw, &f).unwrap();
        let b = apply_generator(&env, &WalkKind::time_changed_mu(&env), &f).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() < 1e-14);
        }
        // and the kernels agree too
        let ka = heat_kernel(&env, &WalkKind::Csrw, 1.5, 0, 1e-12).unwrap();
        let kb = heat_kernel(&env, &WalkKind::time_changed_mu(&env), 1.5, 0, 1e-12).unwrap();
        for (x, y) in ka.p.iter().zip(&kb.p) {
            assert!((x - y).abs() < 1e-11);
        }
    }

    #[test]
    fn kernel_at_time_zero_is_delta() {
        let env = small_env(2, Boundary::Periodic, 3);
        let x0 = 7;
        let k = heat_kernel(&env, &WalkKind::Csrw, 0.0, x0, 1e-10).unwrap();
        assert_eq!(k.p[x0], 1.0);
        assert_eq!(k.err, 0.0);
        assert!((k.q[x0] - 1.0 / env.mu(x0)).abs() < 1e-15);
        assert_eq!(k.p.iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn kernel_mass_certificate() {
        let env = small_env(6, Boundary::Periodic, 4);
        for kind in [WalkKind::Csrw, WalkKind::Vsrw] {
            let k = heat_kernel(&env, &kind, 3.0, 0, 1e-10).unwrap();
            assert!((k.total_mass() - 1.0).abs() <= k.err + 1e-12);
            assert!(k.p.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn absorbing_kernel_loses_mass_to_shell() {
        let env = small_env(3, Boundary::Absorbing, 5);
        let x0 = env.lattice().index_of(&[0, 0]).unwrap();
        let k = heat_kernel(&env, &WalkKind::Csrw, 2.0, x0, 1e-10).unwrap();
        let mass = k.total_mass();
        assert!(mass < 1.0);
        assert!(mass > 0.0);
        for v in env.lattice().shell() {
            assert_eq!(k.p[v as usize], 0.0);
        }
    }

    #[test]
    fn semigroup_step_matches_direct_kernel() {
        let env = small_env(5, Boundary::Periodic, 6);
        let k1 = heat_kernel(&env, &WalkKind::Vsrw, 1.0, 0, 1e-11).unwrap();
        let stepped = semigroup_step(&k1, &env, &WalkKind::Vsrw, 1.0, 1e-11).unwrap();
        let direct = heat_kernel(&env, &WalkKind::Vsrw, 2.0, 0, 1e-11).unwrap();
        let sup = stepped
            .p
            .iter()
            .zip(&direct.p)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(sup <= stepped.err + direct.err + 1e-12);
        assert!((stepped.total_mass() - 1.0).abs() <= stepped.err + 1e-12);
        // zero step is identical
        let same = semigroup_step(&k1, &env, &WalkKind::Vsrw, 0.0, 1e-11).unwrap();
        assert_eq!(same.p, k1.p);
    }

    #[test]
    fn split_and_single_series_agree() {
        let env = small_env(4, Boundary::Periodic, 7);
        let single = heat_kernel_opts(
            &env,
            &WalkKind::Vsrw,
            5.0,
            0,
            &KernelOptions { tol: 1e-11, split_threshold: 1e9, ..Default::default() },
        )
        .unwrap();
        let split = heat_kernel_opts(
            &env,
            &WalkKind::Vsrw,
            5.0,
            0,
            &KernelOptions { tol: 1e-11, split_threshold: 4.0, ..Default::default() },
        )
        .unwrap();
        let sup = single
            .p
            .iter()
            .zip(&split.p)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(sup <= single.err + split.err + 1e-12);
        // refusing to split is a tolerance error
        let refused = heat_kernel_opts(
            &env,
            &WalkKind::Vsrw,
            5.0,
            0,
            &KernelOptions { tol: 1e-11, split_threshold: 4.0, auto_split: false, ..Default::default() },
        );
        assert!(matches!(refused, Err(Error::Tolerance(_))));
    }

    #[test]
    fn detailed_balance_pairs() {
        let env = small_env(3, Boundary::Periodic, 8);
        let t = 1.3;
        for kind in [WalkKind::Csrw, WalkKind::Vsrw] {
            let kx = heat_kernel(&env, &kind, t, 3, 1e-11).unwrap();
            let ky = heat_kernel(&env, &kind, t, 17, 1e-11).unwrap();
            // density symmetry q(t,x,y) = q(t,y,x)
            let slack = kx.err / kind.speed_measure(&env, 17)
                + ky.err / kind.speed_measure(&env, 3)
                + 1e-12;
            assert!((kx.q[17] - ky.q[3]).abs() <= slack);
        }
    }

    #[test]
    fn shift_covariance_of_kernels() {
        let env = small_env(3, Boundary::Periodic, 9);
        let b = env.lattice();
        let z = [2i64, -1];
        let shifted_env = env.shifted(&z).unwrap();
        let x = b.index_of(&[0, 1]).unwrap();
        let xz = b.index_of(&[0 + z[0], 1 + z[1]]).unwrap();
        let k_shift = heat_kernel(&shifted_env, &WalkKind::Csrw, 1.7, x, 1e-11).unwrap();
        let k_orig = heat_kernel(&env, &WalkKind::Csrw, 1.7, xz, 1e-11).unwrap();
        for y in 0..b.n_vertices() {
            let cy: Vec<i64> = b.coords(y).iter().zip(&z).map(|(c, dz)| c + dz).collect();
            let yz = b.index_of(&cy).unwrap();
            assert_eq!(k_shift.p[y], k_orig.p[yz], "exact shift covariance");
        }
    }

    #[test]
    fn parity_of_jump_chain_on_absorbing_box() {
        // omega = 1: n-step jump probabilities vanish when n and the l1
        // distance have different parity (no wrap on an absorbing box)
        let b = LatticeBox::new(2, 4, Boundary::Absorbing).unwrap();
        let env = generate(&b, &GeneratorSpec::Constant { value: 1.0 }, 0).unwrap();
        let chain = UniformChain::new(&env, &WalkKind::Csrw).unwrap();
        let x0 = b.index_of(&[0, 0]).unwrap();
        let mut cur = vec![0.0; b.n_vertices()];
        cur[x0] = 1.0;
        let mut next = vec![0.0; b.n_vertices()];
        for n in 1..=6usize {
            chain.step(&cur, &mut next);
            std::mem::swap(&mut cur, &mut next);
            for v in 0..b.n_vertices() {
                let dist = b.distance(x0, v);
                if (dist as usize) % 2 != n % 2 {
                    assert_eq!(cur[v], 0.0, "n={n} v={v}");
                }
            }
        }
    }

    #[test]
    fn truncation_error_monotone_in_terms() {
        // increasing the number of series terms never increases the tail
        let lt: f64 = 7.3;
        let mut cum = Kahan::default();
        let mut prev_tail = 1.0;
        for n in 0..60 {
            cum.add((n as f64 * lt.ln() - lt - ln_factorial(n)).exp());
            let tail = (1.0 - cum.value()).max(0.0);
            assert!(tail <= prev_tail + 1e-15);
            prev_tail = tail;
        }
        assert!(prev_tail < 1e-12);
    }

    #[test]
    fn green_one_dimensional_oracle() {
        // d=1, L=1: three vertices with absorbing ends; occupation at the
        // center solves 2 G = 1 for the variable-speed walk
        let b = LatticeBox::new(1, 1, Boundary::Absorbing).unwrap();
        let env = generate(&b, &GeneratorSpec::Constant { value: 1.0 }, 0).unwrap();
        let x0 = b.index_of(&[0]).unwrap();
        let g = green_kernel(&env, &WalkKind::Vsrw, x0, 1e-12, GreenMethod::LinearSolve).unwrap();
        assert!((g.occupation[x0] - 0.5).abs() < 1e-12);
        // periodic box refused
        let p = LatticeBox::new(1, 1, Boundary::Periodic).unwrap();
        let penv = generate(&p, &GeneratorSpec::Constant { value: 1.0 }, 0).unwrap();
        assert!(green_kernel(&penv, &WalkKind::Vsrw, 0, 1e-12, GreenMethod::LinearSolve).is_err());
    }

    #[test]
    fn green_methods_and_symmetry() {
        let b = LatticeBox::new(2, 4, Boundary::Absorbing).unwrap();
        let env = generate(
            &b,
            &GeneratorSpec::Iid { law: Law::Uniform { lo: 0.5, hi: 2.0 } },
            11,
        )
        .unwrap();
        let x = b.index_of(&[0, 0]).unwrap();
        let y = b.index_of(&[1, 2]).unwrap();
        let gx = green_kernel(&env, &WalkKind::Csrw, x, 1e-11, GreenMethod::LinearSolve).unwrap();
        let gy = green_kernel(&env, &WalkKind::Csrw, y, 1e-11, GreenMethod::LinearSolve).unwrap();
        // density symmetric, occupation weighted by the speed measure
        assert!((gx.g[y] - gy.g[x]).abs() <= 1e-9 * gx.g[y].abs());
        let lhs = gx.occupation[y] / env.mu(y);
        let rhs = gy.occupation[x] / env.mu(x);
        assert!((lhs - rhs).abs() <= 1e-9 * lhs.abs());
        // series route agrees
        let gs = green_kernel(&env, &WalkKind::Csrw, x, 1e-10, GreenMethod::Series).unwrap();
        for v in 0..b.n_vertices() {
            assert!((gs.g[v] - gx.g[v]).abs() <= 1e-6 * gx.g[x].abs());
        }
    }

    #[test]
    fn required_half_extent_covers_radius() {
        let l = required_half_extent(2, 1.0, 16.0, 4, 1e-12);
        assert!(l > 4);
        let l2 = required_half_extent(2, 1.0, 64.0, 4, 1e-12);
        assert!(l2 > l);
    }

    #[test]
    fn stiff_trap_environment_splits() {
        let b = LatticeBox::new(2, 4, Boundary::Periodic).unwrap();
        let base = generate(&b, &GeneratorSpec::Constant { value: 1.0 }, 0).unwrap();
        let env = crate::environment::plant_trap(&base, 0, 12, 1.0, 1.0).unwrap();
        // VSRW rate at the trap is ~2^12; horizon 10 forces splitting
        let k = heat_kernel(&env, &WalkKind::Vsrw, 10.0, 0, 1e-9).unwrap();
        assert!((k.total_mass() - 1.0).abs() <= k.err + 1e-12);
        let _ = Arc::strong_count(&env.lattice_arc());
    }
}
