//! Finite lattice boxes and discrete vector calculus.
//!
//! A [`LatticeBox`] is the box {-L,...,L}^d with nearest-neighbour edges and
//! either periodic (toroidal) or absorbing boundary. Every vertex and edge
//! carries a fixed canonical index, and each undirected edge is assigned an
//! orientation (the lexicographically smaller endpoint is the tail `e-`, the
//! other the head `e+`). The orientation is pure bookkeeping: no computed
//! quantity depends on it, it only makes serialization deterministic.
//!
//! On top of the geometry this module provides the discrete calculus used
//! everywhere else: gradients and divergences of vertex/edge fields,
//! space-averaged l^p norms, conductance-weighted Dirichlet forms, graph
//! balls, relative boundaries, and radial cutoff functions.

use std::collections::HashSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::environment::Environment;
use crate::error::{Error, Result};

/// Boundary handling of a box.
///
/// Periodic boxes are tori (every vertex has full degree 2d); absorbing boxes
/// keep the outermost shell `|x|_inf = L` as a Dirichlet layer: walks die
/// there, solvers read prescribed values there.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    Periodic,
    Absorbing,
}

/// Cheap identity stamp of a box; fields carry it so dimension mismatches are
/// caught as domain errors instead of silent nonsense.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxShape {
    pub d: usize,
    pub l: i64,
    pub boundary: Boundary,
}

impl BoxShape {
    pub fn side(&self) -> i64 {
        2 * self.l + 1
    }

    pub fn n_vertices(&self) -> usize {
        (self.side() as usize).pow(self.d as u32)
    }
}

/// Directed adjacency entry: neighbour vertex, edge id, and whether the local
/// vertex is the edge head `e+`.
#[derive(Debug, Clone, Copy)]
pub struct Adjacency {
    pub neighbor: u32,
    pub edge: u32,
    pub is_head: bool,
}

/// Finite d-dimensional lattice box {-L,...,L}^d.
#[derive(Debug)]
pub struct LatticeBox {
    shape: BoxShape,
    side: i64,
    n_vertices: usize,
    /// Edge endpoints as [tail e-, head e+]; tail is lexicographically smaller.
    edges: Vec<[u32; 2]>,
    /// Edge weights of the adjacency structure in CSR layout.
    adj_offsets: Vec<u32>,
    adj: Vec<Adjacency>,
}

impl LatticeBox {
    pub fn new(d: usize, l: i64, boundary: Boundary) -> Result<Arc<LatticeBox>> {
        if d < 1 {
            return Err(Error::domain("dimension must be at least 1"));
        }
        if l < 0 {
            return Err(Error::domain("half-extent L must be non-negative"));
        }
        let shape = BoxShape { d, l, boundary };
        let side = shape.side();
        let n_f64 = (side as f64).powi(d as i32);
        if n_f64 > 2.0e9 {
            return Err(Error::domain(format!(
                "box with (2L+1)^d = {n_f64:.3e} vertices is too large"
            )));
        }
        let n_vertices = shape.n_vertices();

        let mut edges: Vec<[u32; 2]> = Vec::new();
        let mut coords = vec![0i64; d];
        if side > 1 {
            for v in 0..n_vertices {
                decode(v, side, l, &mut coords);
                for axis in 0..d {
                    let mut nb = coords.clone();
                    nb[axis] += 1;
                    let exists = if nb[axis] > l {
                        match boundary {
                            Boundary::Periodic => {
                                nb[axis] = -l;
                                true
                            }
                            Boundary::Absorbing => false,
                        }
                    } else {
                        true
                    };
                    if exists {
                        let w = encode(&nb, side, l);
                        let (tail, head) = if lex_less(&coords, &nb) {
                            (v as u32, w as u32)
                        } else {
                            (w as u32, v as u32)
                        };
                        edges.push([tail, head]);
                    }
                }
            }
        }

        // CSR adjacency
        let mut degree = vec![0u32; n_vertices];
        for e in &edges {
            degree[e[0] as usize] += 1;
            degree[e[1] as usize] += 1;
        }
        let mut adj_offsets = vec![0u32; n_vertices + 1];
        for v in 0..n_vertices {
            adj_offsets[v + 1] = adj_offsets[v] + degree[v];
        }
        let mut cursor: Vec<u32> = adj_offsets[..n_vertices].to_vec();
        let mut adj = vec![
            Adjacency {
                neighbor: 0,
                edge: 0,
                is_head: false
            };
            2 * edges.len()
        ];
        for (eid, e) in edges.iter().enumerate() {
            let [tail, head] = *e;
            adj[cursor[tail as usize] as usize] = Adjacency {
                neighbor: head,
                edge: eid as u32,
                is_head: false,
            };
            cursor[tail as usize] += 1;
            adj[cursor[head as usize] as usize] = Adjacency {
                neighbor: tail,
                edge: eid as u32,
                is_head: true,
            };
            cursor[head as usize] += 1;
        }

        Ok(Arc::new(LatticeBox {
            shape,
            side,
            n_vertices,
            edges,
            adj_offsets,
            adj,
        }))
    }

    pub fn shape(&self) -> BoxShape {
        self.shape
    }

    pub fn d(&self) -> usize {
        self.shape.d
    }

    pub fn l(&self) -> i64 {
        self.shape.l
    }

    pub fn boundary(&self) -> Boundary {
        self.shape.boundary
    }

    pub fn n_vertices(&self) -> usize {
        self.n_vertices
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    /// Endpoints of edge `e` as (tail `e-`, head `e+`).
    pub fn edge_endpoints(&self, e: usize) -> (usize, usize) {
        let [t, h] = self.edges[e];
        (t as usize, h as usize)
    }

    pub fn adjacency(&self, v: usize) -> &[Adjacency] {
        &self.adj[self.adj_offsets[v] as usize..self.adj_offsets[v + 1] as usize]
    }

    pub fn degree(&self, v: usize) -> usize {
        (self.adj_offsets[v + 1] - self.adj_offsets[v]) as usize
    }

    /// Coordinates of vertex `v`, each in [-L, L].
    pub fn coords(&self, v: usize) -> Vec<i64> {
        let mut c = vec![0i64; self.shape.d];
        decode(v, self.side, self.shape.l, &mut c);
        c
    }

    /// Vertex index of `coords`; periodic boxes wrap, absorbing boxes reject
    /// coordinates outside the box.
    pub fn index_of(&self, coords: &[i64]) -> Result<usize> {
        if coords.len() != self.shape.d {
            return Err(Error::domain("coordinate dimension mismatch"));
        }
        let mut wrapped = coords.to_vec();
        for c in wrapped.iter_mut() {
            if c.abs() > self.shape.l {
                match self.shape.boundary {
                    Boundary::Periodic => *c = wrap(*c, self.side),
                    Boundary::Absorbing => {
                        return Err(Error::domain(format!(
                            "vertex {coords:?} outside absorbing box with L = {}",
                            self.shape.l
                        )))
                    }
                }
            }
        }
        Ok(encode(&wrapped, self.side, self.shape.l))
    }

    /// Graph distance: l^1, toroidal in periodic mode.
    pub fn distance(&self, a: usize, b: usize) -> i64 {
        let ca = self.coords(a);
        let cb = self.coords(b);
        let mut dist = 0i64;
        for j in 0..self.shape.d {
            let mut diff = (ca[j] - cb[j]).abs();
            if self.shape.boundary == Boundary::Periodic {
                diff = diff.min(self.side - diff);
            }
            dist += diff;
        }
        dist
    }

    /// True for vertices where operators act; on absorbing boxes the outermost
    /// shell `|x|_inf = L` is excluded.
    pub fn is_interior(&self, v: usize) -> bool {
        match self.shape.boundary {
            Boundary::Periodic => true,
            Boundary::Absorbing => self.coords(v).iter().all(|&c| c.abs() < self.shape.l),
        }
    }

    /// Vertices of the absorbing shell (empty for periodic boxes).
    pub fn shell(&self) -> Vec<u32> {
        (0..self.n_vertices)
            .filter(|&v| !self.is_interior(v))
            .map(|v| v as u32)
            .collect()
    }

    pub fn interior(&self) -> Vec<u32> {
        (0..self.n_vertices)
            .filter(|&v| self.is_interior(v))
            .map(|v| v as u32)
            .collect()
    }

    /// Neighbours of `v` in local geometric order (axis by axis, minus then
    /// plus direction), with the joining edge. Accumulating in this order is
    /// translation invariant, which keeps shifted environments bit-identical.
    pub fn geometric_neighbors(&self, v: usize) -> Vec<(usize, usize)> {
        let cy = self.coords(v);
        let mut out = Vec::with_capacity(2 * self.shape.d);
        for axis in 0..self.shape.d {
            for sign in [-1i64, 1] {
                let mut cx = cy.clone();
                cx[axis] += sign;
                let Ok(x) = self.index_of(&cx) else { continue };
                if x == v {
                    continue;
                }
                if let Some(adj) = self.adjacency(v).iter().find(|a| a.neighbor as usize == x) {
                    out.push((x, adj.edge as usize));
                }
            }
        }
        out
    }

    /// Check a field stamp against this box.
    pub fn check_shape(&self, shape: BoxShape, what: &str) -> Result<()> {
        if shape != self.shape {
            return Err(Error::domain(format!(
                "{what} was built for box {:?} but this box is {:?}",
                shape, self.shape
            )));
        }
        Ok(())
    }
}

fn wrap(c: i64, side: i64) -> i64 {
    let l = (side - 1) / 2;
    let mut x = (c + l).rem_euclid(side);
    x -= l;
    x
}

fn encode(coords: &[i64], side: i64, l: i64) -> usize {
    let mut idx = 0usize;
    for &c in coords.iter().rev() {
        idx = idx * side as usize + (c + l) as usize;
    }
    idx
}

fn decode(mut v: usize, side: i64, l: i64, out: &mut [i64]) {
    for c in out.iter_mut() {
        *c = (v % side as usize) as i64 - l;
        v /= side as usize;
    }
}

fn lex_less(a: &[i64], b: &[i64]) -> bool {
    for (x, y) in a.iter().zip(b) {
        if x != y {
            return x < y;
        }
    }
    false
}

/// Real-valued function on the vertices of a box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VertexField {
    #[serde(rename = "box")]
    pub shape: BoxShape,
    pub values: Vec<f64>,
}

impl VertexField {
    pub fn zeros(b: &LatticeBox) -> VertexField {
        VertexField {
            shape: b.shape(),
            values: vec![0.0; b.n_vertices()],
        }
    }

    pub fn constant(b: &LatticeBox, c: f64) -> VertexField {
        VertexField {
            shape: b.shape(),
            values: vec![c; b.n_vertices()],
        }
    }

    pub fn from_fn(b: &LatticeBox, f: impl Fn(&[i64]) -> f64) -> VertexField {
        let values = (0..b.n_vertices()).map(|v| f(&b.coords(v))).collect();
        VertexField {
            shape: b.shape(),
            values,
        }
    }

    /// The coordinate function x -> x_axis.
    pub fn coordinate(b: &LatticeBox, axis: usize) -> VertexField {
        VertexField::from_fn(b, |c| c[axis] as f64)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Real-valued function on the oriented edges of a box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeField {
    #[serde(rename = "box")]
    pub shape: BoxShape,
    pub values: Vec<f64>,
}

impl EdgeField {
    pub fn zeros(b: &LatticeBox) -> EdgeField {
        EdgeField {
            shape: b.shape(),
            values: vec![0.0; b.n_edges()],
        }
    }
}

/// Closed graph ball intersected with the box.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Ball {
    pub center: u32,
    pub radius: i64,
    /// Members in canonical vertex order.
    pub members: Vec<u32>,
}

impl Ball {
    pub fn contains(&self, v: u32) -> bool {
        self.members.binary_search(&v).is_ok()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// All vertices at graph distance <= r from `center`.
pub fn ball(b: &LatticeBox, center: usize, r: i64) -> Result<Ball> {
    if center >= b.n_vertices() {
        return Err(Error::domain(format!(
            "ball center {center} outside box with {} vertices",
            b.n_vertices()
        )));
    }
    if r < 0 {
        return Err(Error::domain("ball radius must be non-negative"));
    }
    let members = (0..b.n_vertices())
        .filter(|&v| b.distance(center, v) <= r)
        .map(|v| v as u32)
        .collect();
    Ok(Ball {
        center: center as u32,
        radius: r,
        members,
    })
}

/// Relative internal boundary of A in B: members of A adjacent to B \ A.
pub fn relative_boundary(b: &LatticeBox, a: &[u32], bset: &[u32]) -> Result<Vec<u32>> {
    let a_set: HashSet<u32> = a.iter().copied().collect();
    let b_set: HashSet<u32> = bset.iter().copied().collect();
    if !a_set.is_subset(&b_set) {
        return Err(Error::domain("relative boundary requires A to be a subset of B"));
    }
    let mut out = Vec::new();
    for &x in a {
        let touches_complement = b
            .adjacency(x as usize)
            .iter()
            .any(|adj| b_set.contains(&adj.neighbor) && !a_set.contains(&adj.neighbor));
        if touches_complement {
            out.push(x);
        }
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

/// Space-averaged l^p norm of `f` over the vertex set `a`:
/// `(|A|^-1 sum_{x in A} |f(x)|^p w(x))^(1/p)`, and the plain maximum of |f|
/// for p = infinity (the optional weight is ignored there by definition).
pub fn avg_norm(f: &VertexField, a: &[u32], p: f64, weight: Option<&VertexField>) -> Result<f64> {
    if a.is_empty() {
        return Err(Error::domain("avg_norm over an empty vertex set"));
    }
    if !(p >= 1.0) {
        return Err(Error::domain("avg_norm requires p >= 1"));
    }
    if let Some(w) = weight {
        if w.shape != f.shape {
            return Err(Error::domain("avg_norm weight lives on a different box"));
        }
        if a.iter().any(|&v| w.values[v as usize] < 0.0) {
            return Err(Error::domain("avg_norm weight must be non-negative"));
        }
    }
    if p.is_infinite() {
        let mut m: f64 = 0.0;
        for &v in a {
            m = m.max(f.values[v as usize].abs());
        }
        return Ok(m);
    }
    let mut acc = crate::numeric::Kahan::default();
    for &v in a {
        let w = weight.map_or(1.0, |w| w.values[v as usize]);
        acc.add(f.values[v as usize].abs().powf(p) * w);
    }
    Ok((acc.value() / a.len() as f64).powf(1.0 / p))
}

/// Weighted average `(u)_{A,w} = sum w u / sum w` (w = 1 when omitted).
pub fn weighted_mean(f: &VertexField, a: &[u32], weight: Option<&VertexField>) -> Result<f64> {
    if a.is_empty() {
        return Err(Error::domain("weighted_mean over an empty vertex set"));
    }
    let mut num = crate::numeric::Kahan::default();
    let mut den = crate::numeric::Kahan::default();
    for &v in a {
        let w = weight.map_or(1.0, |w| w.values[v as usize]);
        num.add(w * f.values[v as usize]);
        den.add(w);
    }
    if den.value() <= 0.0 {
        return Err(Error::domain("weighted_mean with vanishing total weight"));
    }
    Ok(num.value() / den.value())
}

/// Discrete gradient: `(grad f)(e) = f(e+) - f(e-)`.
pub fn gradient(b: &LatticeBox, f: &VertexField) -> Result<EdgeField> {
    b.check_shape(f.shape, "gradient input")?;
    let values = (0..b.n_edges())
        .map(|e| {
            let (tail, head) = b.edge_endpoints(e);
            f.values[head] - f.values[tail]
        })
        .collect();
    Ok(EdgeField {
        shape: b.shape(),
        values,
    })
}

/// Discrete divergence, the adjoint of `gradient`:
/// `(div F)(x) = sum_{e: e+ = x} F(e) - sum_{e: e- = x} F(e)`.
pub fn divergence(b: &LatticeBox, f: &EdgeField) -> Result<VertexField> {
    b.check_shape(f.shape, "divergence input")?;
    let mut values = vec![0.0; b.n_vertices()];
    for v in 0..b.n_vertices() {
        let mut acc = 0.0;
        for adj in b.adjacency(v) {
            let val = f.values[adj.edge as usize];
            acc += if adj.is_head { val } else { -val };
        }
        values[v] = acc;
    }
    Ok(VertexField {
        shape: b.shape(),
        values,
    })
}

/// Unweighted inner product of vertex fields.
pub fn vertex_inner(f: &VertexField, g: &VertexField) -> f64 {
    f.values.iter().zip(&g.values).map(|(a, b)| a * b).sum()
}

/// Unweighted inner product of edge fields.
pub fn edge_inner(f: &EdgeField, g: &EdgeField) -> f64 {
    f.values.iter().zip(&g.values).map(|(a, b)| a * b).sum()
}

/// Edge weighting of the Dirichlet form.
#[derive(Debug, Clone, Copy)]
pub enum EnergyWeight<'a> {
    /// Plain conductances.
    Unweighted,
    /// Conductance times the mean of eta^2 at the two endpoints.
    EtaSq(&'a VertexField),
    /// Conductance times min of eta^2 at the two endpoints.
    MinEtaSq(&'a VertexField),
}

/// Conductance-weighted Dirichlet form `sum_e w(e) grad f(e) grad g(e)`.
///
/// With the unweighted option this equals `<f, -L_Y g>_{V,mu}` for the
/// constant-speed generator; the identity is exercised in tests.
pub fn dirichlet_form(
    env: &Environment,
    f: &VertexField,
    g: &VertexField,
    weight: EnergyWeight<'_>,
) -> Result<f64> {
    let b = env.lattice();
    b.check_shape(f.shape, "dirichlet_form f")?;
    b.check_shape(g.shape, "dirichlet_form g")?;
    if let EnergyWeight::EtaSq(eta) | EnergyWeight::MinEtaSq(eta) = weight {
        b.check_shape(eta.shape, "dirichlet_form eta")?;
    }
    let mut acc = crate::numeric::Kahan::default();
    for e in 0..b.n_edges() {
        let (tail, head) = b.edge_endpoints(e);
        let df = f.values[head] - f.values[tail];
        let dg = g.values[head] - g.values[tail];
        let w = match weight {
            EnergyWeight::Unweighted => env.weight(e),
            EnergyWeight::EtaSq(eta) => {
                let a = eta.values[head] * eta.values[head];
                let b2 = eta.values[tail] * eta.values[tail];
                0.5 * (a + b2) * env.weight(e)
            }
            EnergyWeight::MinEtaSq(eta) => {
                let a = eta.values[head] * eta.values[head];
                let b2 = eta.values[tail] * eta.values[tail];
                a.min(b2) * env.weight(e)
            }
        };
        acc.add(w * df * dg);
    }
    Ok(acc.value())
}

/// One-edge oscillation ratio of a non-negative field: the largest ratio
/// `f(y)/f(x)` over adjacent pairs with both values positive, clamped below
/// at 1. Controls error terms in cutoff-weighted energy estimates.
pub fn oscillation_ratio(b: &LatticeBox, f: &VertexField) -> Result<f64> {
    b.check_shape(f.shape, "oscillation_ratio input")?;
    let mut osr: f64 = 1.0;
    for e in 0..b.n_edges() {
        let (tail, head) = b.edge_endpoints(e);
        let (a, c) = (f.values[tail], f.values[head]);
        if a > 0.0 && c > 0.0 {
            osr = osr.max(a / c).max(c / a);
        }
    }
    Ok(osr)
}

/// Cutoff function with its derived control quantities.
#[derive(Debug, Clone)]
pub struct Cutoff {
    pub eta: VertexField,
    /// Maximum of |grad eta| over edges.
    pub grad_max: f64,
    /// Oscillation ratio of eta^2.
    pub osr_sq: f64,
}

/// Radial cutoff: 1 on B(x0, inner), 0 outside B(x0, outer), linear in the
/// graph distance in between. Reports `max |grad eta| <= 1/(outer - inner)`
/// and the oscillation ratio of eta^2 (at most 4 for linear profiles).
pub fn radial_cutoff(b: &LatticeBox, x0: usize, inner: f64, outer: f64) -> Result<Cutoff> {
    if !(0.0 <= inner && inner < outer) {
        return Err(Error::domain("radial_cutoff requires 0 <= inner < outer"));
    }
    if x0 >= b.n_vertices() {
        return Err(Error::domain("radial_cutoff center outside box"));
    }
    let eta = VertexField {
        shape: b.shape(),
        values: (0..b.n_vertices())
            .map(|v| {
                let dist = b.distance(x0, v) as f64;
                (1.0 - (dist - inner).max(0.0) / (outer - inner)).max(0.0)
            })
            .collect(),
    };
    let grad = gradient(b, &eta)?;
    let grad_max = grad.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let eta_sq = VertexField {
        shape: b.shape(),
        values: eta.values.iter().map(|v| v * v).collect(),
    };
    let osr_sq = oscillation_ratio(b, &eta_sq)?;
    Ok(Cutoff {
        eta,
        grad_max,
        osr_sq,
    })
}

/// JSON schema for vertex fields: box descriptor plus the flat value array in
/// canonical vertex order.
pub fn field_to_json(f: &VertexField) -> serde_json::Value {
    serde_json::json!({ "box": f.shape, "values": f.values })
}

pub fn field_from_json(v: &serde_json::Value) -> Result<VertexField> {
    Ok(serde_json::from_value(v.clone())?)
}
