//! Convex set algebra in the plane.
//!
//! Three representations are used, chosen for the operation at hand:
//!
//! * [`Box2`]: axis-aligned interval product, the form most configuration
//!   sets arrive in.
//! * [`Zonotope`]: center plus generators. Closed under linear maps and
//!   Minkowski sums, so reachable-disturbance sets flow through the pipeline
//!   in this form.
//! * [`HPolytope`]: intersection of halfspaces `n_i . x <= c_i`. Closed under
//!   Pontryagin difference against any support-computable set, so tightened
//!   constraint sets live in this form.
//!
//! Conventions:
//! * Emptiness is data, not an error. A tightened set that collapses reports
//!   `is_empty() == true` and the caller decides what that means.
//! * Membership checks use an absolute slack of [`MEMBERSHIP_SLACK`] so that
//!   points produced by exact support arithmetic on the boundary still count.
//! * Vertex enumeration assumes bounded sets. Every polytope built here comes
//!   from a bounded box tightened row-wise, which preserves boundedness as
//!   long as the result is nonempty.

use nalgebra::{Matrix2, Vector2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Absolute slack for membership tests.
pub const MEMBERSHIP_SLACK: f64 = 1e-9;

/// Tolerance below which a direction or generator is treated as zero.
const DEGENERATE_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SetError {
    /// Invariant-set iteration did not reach the requested tolerance.
    #[error("invariant set iteration did not converge within {0} powers")]
    NoConvergence(usize),
    /// Linear map of an H-polytope needs an invertible matrix.
    #[error("linear map of a halfspace polytope requires an invertible matrix")]
    SingularMap,
    /// Operation needs a generator representation but got a general polytope.
    #[error("operation requires a box or zonotope operand")]
    NeedsGenerators,
}

// ---------------------------------------------------------------------------
// Box2
// ---------------------------------------------------------------------------

/// Axis-aligned box `[lo.x, hi.x] x [lo.y, hi.y]`. May be empty (`lo > hi`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Box2 {
    pub lo: Vector2<f64>,
    pub hi: Vector2<f64>,
}

impl Box2 {
    pub fn new(lo: Vector2<f64>, hi: Vector2<f64>) -> Self {
        Self { lo, hi }
    }

    /// Symmetric box `[-h.x, h.x] x [-h.y, h.y]`.
    pub fn symmetric(halfwidth: Vector2<f64>) -> Self {
        Self { lo: -halfwidth, hi: halfwidth }
    }

    /// Smallest origin-symmetric box containing `self`: per axis the bound is
    /// the largest coordinate magnitude over the vertices.
    pub fn symmetric_hull(&self) -> Self {
        let h = Vector2::new(
            self.lo.x.abs().max(self.hi.x.abs()),
            self.lo.y.abs().max(self.hi.y.abs()),
        );
        Self::symmetric(h)
    }

    pub fn is_empty(&self) -> bool {
        self.lo.x > self.hi.x || self.lo.y > self.hi.y
    }

    pub fn center(&self) -> Vector2<f64> {
        (self.lo + self.hi) * 0.5
    }

    pub fn halfwidth(&self) -> Vector2<f64> {
        (self.hi - self.lo) * 0.5
    }

    pub fn contains(&self, p: &Vector2<f64>) -> bool {
        p.x >= self.lo.x - MEMBERSHIP_SLACK
            && p.x <= self.hi.x + MEMBERSHIP_SLACK
            && p.y >= self.lo.y - MEMBERSHIP_SLACK
            && p.y <= self.hi.y + MEMBERSHIP_SLACK
    }

    /// Componentwise clamp of `p` into the box. Requires a nonempty box.
    pub fn clamp(&self, p: &Vector2<f64>) -> Vector2<f64> {
        debug_assert!(!self.is_empty());
        Vector2::new(p.x.clamp(self.lo.x, self.hi.x), p.y.clamp(self.lo.y, self.hi.y))
    }

    /// Support function `max_{x in B} d . x`. Requires a nonempty box.
    pub fn support(&self, d: &Vector2<f64>) -> f64 {
        debug_assert!(!self.is_empty());
        let c = self.center();
        let h = self.halfwidth();
        d.dot(&c) + d.x.abs() * h.x + d.y.abs() * h.y
    }

    /// Uniform sample. Requires a nonempty box.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vector2<f64> {
        debug_assert!(!self.is_empty());
        Vector2::new(rng.gen_range(self.lo.x..=self.hi.x), rng.gen_range(self.lo.y..=self.hi.y))
    }

    pub fn to_zonotope(&self) -> Zonotope {
        let h = self.halfwidth();
        let mut generators = Vec::new();
        if h.x > 0.0 {
            generators.push(Vector2::new(h.x, 0.0));
        }
        if h.y > 0.0 {
            generators.push(Vector2::new(0.0, h.y));
        }
        Zonotope { center: self.center(), generators }
    }

    pub fn to_hpolytope(&self) -> HPolytope {
        HPolytope {
            normals: vec![
                Vector2::new(1.0, 0.0),
                Vector2::new(-1.0, 0.0),
                Vector2::new(0.0, 1.0),
                Vector2::new(0.0, -1.0),
            ],
            offsets: vec![self.hi.x, -self.lo.x, self.hi.y, -self.lo.y],
        }
    }

    pub fn vertices(&self) -> Vec<Vector2<f64>> {
        if self.is_empty() {
            return Vec::new();
        }
        vec![
            Vector2::new(self.lo.x, self.lo.y),
            Vector2::new(self.hi.x, self.lo.y),
            Vector2::new(self.hi.x, self.hi.y),
            Vector2::new(self.lo.x, self.hi.y),
        ]
    }
}

// ---------------------------------------------------------------------------
// Zonotope
// ---------------------------------------------------------------------------

/// Zonotope `{ c + sum_i a_i g_i : |a_i| <= 1 }`. Never empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Zonotope {
    pub center: Vector2<f64>,
    pub generators: Vec<Vector2<f64>>,
}

impl Zonotope {
    pub fn point(center: Vector2<f64>) -> Self {
        Self { center, generators: Vec::new() }
    }

    /// Support function `max_{x in Z} d . x`.
    pub fn support(&self, d: &Vector2<f64>) -> f64 {
        let mut s = d.dot(&self.center);
        for g in &self.generators {
            s += d.dot(g).abs();
        }
        s
    }

    pub fn linear_map(&self, m: &Matrix2<f64>) -> Zonotope {
        Zonotope {
            center: m * self.center,
            generators: self.generators.iter().map(|g| m * g).collect(),
        }
    }

    pub fn minkowski_sum(&self, other: &Zonotope) -> Zonotope {
        let mut generators = self.generators.clone();
        generators.extend(other.generators.iter().cloned());
        Zonotope { center: self.center + other.center, generators }
    }

    /// Exact halfspace representation. Facet normals of a planar zonotope are
    /// perpendicular to its generators; axis and generator directions are
    /// added so degenerate (segment or point) zonotopes are also cut exactly.
    pub fn to_hpolytope(&self) -> HPolytope {
        let mut dirs: Vec<Vector2<f64>> = Vec::new();
        let push_dir = |d: Vector2<f64>, dirs: &mut Vec<Vector2<f64>>| {
            let n = d.norm();
            if n < DEGENERATE_EPS {
                return;
            }
            let u = d / n;
            for sign in [1.0, -1.0] {
                let cand = u * sign;
                if !dirs.iter().any(|e| (e - cand).norm() < 1e-12) {
                    dirs.push(cand);
                }
            }
        };
        for g in &self.generators {
            push_dir(Vector2::new(-g.y, g.x), &mut dirs);
            push_dir(*g, &mut dirs);
        }
        push_dir(Vector2::new(1.0, 0.0), &mut dirs);
        push_dir(Vector2::new(0.0, 1.0), &mut dirs);
        let offsets = dirs.iter().map(|d| self.support(d)).collect();
        HPolytope { normals: dirs, offsets }
    }

    pub fn contains(&self, p: &Vector2<f64>) -> bool {
        self.to_hpolytope().contains(p)
    }

    /// Vertices in counterclockwise order (point and segment cases included).
    pub fn vertices(&self) -> Vec<Vector2<f64>> {
        let gens: Vec<Vector2<f64>> = self
            .generators
            .iter()
            .filter(|g| g.norm() > DEGENERATE_EPS)
            .cloned()
            .collect();
        if gens.is_empty() {
            return vec![self.center];
        }
        // Orient every generator into the upper halfplane, then sweep by
        // angle: walking the sorted generators traces half the boundary
        // starting from the vertex that minimizes the vertical coordinate.
        let mut oriented: Vec<Vector2<f64>> = gens
            .iter()
            .map(|g| if g.y < 0.0 || (g.y == 0.0 && g.x < 0.0) { -g } else { *g })
            .collect();
        oriented.sort_by(|a, b| {
            let ta = a.y.atan2(a.x);
            let tb = b.y.atan2(b.x);
            ta.partial_cmp(&tb).unwrap()
        });
        let start = self.center - oriented.iter().sum::<Vector2<f64>>();
        let mut verts = vec![start];
        let mut p = start;
        for g in &oriented {
            p += 2.0 * g;
            verts.push(p);
        }
        // Mirror the lower chain through the center for the upper chain.
        let mirrored: Vec<Vector2<f64>> =
            verts[1..verts.len() - 1].iter().map(|v| 2.0 * self.center - v).collect();
        verts.extend(mirrored);
        // Collinear generators produce repeated vertices; drop them.
        let mut out: Vec<Vector2<f64>> = Vec::new();
        for v in verts {
            if !out.iter().any(|u| (u - v).norm() < 1e-10) {
                out.push(v);
            }
        }
        out
    }

    /// Largest distance from the origin over the zonotope.
    pub fn radius(&self) -> f64 {
        self.vertices().iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// Uniform over the coefficient cube, which covers the full zonotope
    /// (non-uniformly in general).
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vector2<f64> {
        let mut p = self.center;
        for g in &self.generators {
            p += g * rng.gen_range(-1.0..=1.0);
        }
        p
    }

    /// Smallest axis-aligned box containing the zonotope.
    pub fn bounding_box(&self) -> Box2 {
        let ex = Vector2::new(1.0, 0.0);
        let ey = Vector2::new(0.0, 1.0);
        Box2::new(
            Vector2::new(-self.support(&-ex), -self.support(&-ey)),
            Vector2::new(self.support(&ex), self.support(&ey)),
        )
    }
}

// ---------------------------------------------------------------------------
// HPolytope
// ---------------------------------------------------------------------------

/// Intersection of halfspaces `normals[i] . x <= offsets[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HPolytope {
    pub normals: Vec<Vector2<f64>>,
    pub offsets: Vec<f64>,
}

impl HPolytope {
    pub fn contains(&self, p: &Vector2<f64>) -> bool {
        self.normals
            .iter()
            .zip(&self.offsets)
            .all(|(n, c)| n.dot(p) <= c + MEMBERSHIP_SLACK)
    }

    /// Worst constraint violation at `p` (negative means strictly inside).
    pub fn violation(&self, p: &Vector2<f64>) -> f64 {
        self.normals
            .iter()
            .zip(&self.offsets)
            .map(|(n, c)| n.dot(p) - c)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Candidate vertices: all feasible pairwise constraint intersections.
    /// Exact for bounded polytopes, which are the only ones built here.
    pub fn vertices(&self) -> Vec<Vector2<f64>> {
        let k = self.normals.len();
        let mut verts: Vec<Vector2<f64>> = Vec::new();
        for i in 0..k {
            for j in (i + 1)..k {
                let (a, b) = (self.normals[i], self.normals[j]);
                let det = a.x * b.y - a.y * b.x;
                if det.abs() < DEGENERATE_EPS {
                    continue;
                }
                let (ca, cb) = (self.offsets[i], self.offsets[j]);
                let p = Vector2::new(ca * b.y - cb * a.y, a.x * cb - b.x * ca) / det;
                if self.contains(&p) && !verts.iter().any(|v| (v - p).norm() < 1e-9) {
                    verts.push(p);
                }
            }
        }
        verts
    }

    /// A bounded polytope is empty iff no pairwise intersection is feasible.
    pub fn is_empty(&self) -> bool {
        self.vertices().is_empty()
    }

    /// Support function via vertex enumeration. `None` when empty.
    pub fn support(&self, d: &Vector2<f64>) -> Option<f64> {
        let verts = self.vertices();
        if verts.is_empty() {
            return None;
        }
        Some(verts.iter().map(|v| d.dot(v)).fold(f64::NEG_INFINITY, f64::max))
    }

    /// Center of the largest inscribed disc: maximize `r` subject to
    /// `n_i . x + r |n_i| <= c_i`. The optimum of this three-variable program
    /// sits on three active constraints (or two for degenerate sets), so all
    /// constraint triples are enumerated. `None` when empty.
    pub fn chebyshev_center(&self) -> Option<Vector2<f64>> {
        let k = self.normals.len();
        let norms: Vec<f64> = self.normals.iter().map(|n| n.norm()).collect();
        let feasible_r = |p: &Vector2<f64>| {
            self.normals
                .iter()
                .zip(&self.offsets)
                .zip(&norms)
                .map(|((n, c), nn)| if *nn < DEGENERATE_EPS { f64::INFINITY } else { (c - n.dot(p)) / nn })
                .fold(f64::INFINITY, f64::min)
        };
        let mut best: Option<(f64, Vector2<f64>)> = None;
        let mut consider = |p: Vector2<f64>, feasible_r: &dyn Fn(&Vector2<f64>) -> f64| {
            let r = feasible_r(&p);
            if r >= -MEMBERSHIP_SLACK {
                match best {
                    Some((rb, _)) if rb >= r => {}
                    _ => best = Some((r, p)),
                }
            }
        };
        // Triples of active constraints.
        for i in 0..k {
            for j in (i + 1)..k {
                for l in (j + 1)..k {
                    let m = nalgebra::Matrix3::new(
                        self.normals[i].x, self.normals[i].y, norms[i],
                        self.normals[j].x, self.normals[j].y, norms[j],
                        self.normals[l].x, self.normals[l].y, norms[l],
                    );
                    let rhs = nalgebra::Vector3::new(self.offsets[i], self.offsets[j], self.offsets[l]);
                    if let Some(sol) = m.lu().solve(&rhs) {
                        if sol.iter().all(|v| v.is_finite()) {
                            consider(Vector2::new(sol.x, sol.y), &feasible_r);
                        }
                    }
                }
            }
        }
        // Pairs cover degenerate (lower-dimensional) feasible sets.
        for v in self.vertices() {
            consider(v, &feasible_r);
        }
        best.map(|(_, p)| p)
    }

    /// Merge rows with the same direction, keeping the tightest offset, and
    /// scale every normal to unit length. Zonotope facet enumerations emit
    /// many parallel rows; this collapses them without changing the set.
    pub fn simplified(&self) -> HPolytope {
        let mut rows: Vec<(Vector2<f64>, f64)> = Vec::new();
        for (n, c) in self.normals.iter().zip(&self.offsets) {
            let len = n.norm();
            if len < DEGENERATE_EPS {
                if *c < -MEMBERSHIP_SLACK {
                    // 0 . x <= c < 0 marks the whole set empty; keep it.
                    rows.push((Vector2::zeros(), *c));
                }
                continue;
            }
            let dir = n / len;
            let off = c / len;
            match rows.iter_mut().find(|(d, _)| (d - dir).norm() < 1e-12) {
                Some((_, o)) => *o = o.min(off),
                None => rows.push((dir, off)),
            }
        }
        HPolytope {
            normals: rows.iter().map(|(d, _)| *d).collect(),
            offsets: rows.iter().map(|(_, o)| *o).collect(),
        }
    }

    /// Image under an invertible linear map: `x <- M x` maps rows to
    /// `n_i M^{-1} . y <= c_i`.
    pub fn linear_map(&self, m: &Matrix2<f64>) -> Result<HPolytope, SetError> {
        let inv = m.try_inverse().ok_or(SetError::SingularMap)?;
        Ok(HPolytope {
            normals: self.normals.iter().map(|n| inv.transpose() * n).collect(),
            offsets: self.offsets.clone(),
        })
    }
}

// ---------------------------------------------------------------------------
// ConvexSet
// ---------------------------------------------------------------------------

/// Tagged union over the three representations, used at configuration
/// boundaries and in serialized artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ConvexSet {
    Box(Box2),
    Zonotope(Zonotope),
    Hpoly(HPolytope),
}

impl ConvexSet {
    pub fn contains(&self, p: &Vector2<f64>) -> bool {
        match self {
            ConvexSet::Box(b) => b.contains(p),
            ConvexSet::Zonotope(z) => z.contains(p),
            ConvexSet::Hpoly(h) => h.contains(p),
        }
    }

    pub fn is_empty(&self) -> bool {
        match self {
            ConvexSet::Box(b) => b.is_empty(),
            ConvexSet::Zonotope(_) => false,
            ConvexSet::Hpoly(h) => h.is_empty(),
        }
    }

    /// Support function. `None` for an empty set.
    pub fn support(&self, d: &Vector2<f64>) -> Option<f64> {
        match self {
            ConvexSet::Box(b) => {
                if b.is_empty() {
                    None
                } else {
                    Some(b.support(d))
                }
            }
            ConvexSet::Zonotope(z) => Some(z.support(d)),
            ConvexSet::Hpoly(h) => h.support(d),
        }
    }

    /// Generator form when one exists (`Box` and `Zonotope` variants).
    pub fn to_zonotope(&self) -> Result<Zonotope, SetError> {
        match self {
            ConvexSet::Box(b) => Ok(b.to_zonotope()),
            ConvexSet::Zonotope(z) => Ok(z.clone()),
            ConvexSet::Hpoly(_) => Err(SetError::NeedsGenerators),
        }
    }

    pub fn to_hpolytope(&self) -> HPolytope {
        match self {
            ConvexSet::Box(b) => b.to_hpolytope(),
            ConvexSet::Zonotope(z) => z.to_hpolytope(),
            ConvexSet::Hpoly(h) => h.clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// Minkowski sum: concatenate generators, add centers.
pub fn minkowski_sum(a: &Zonotope, b: &Zonotope) -> Zonotope {
    a.minkowski_sum(b)
}

/// Pontryagin difference `outer - inner`, computed row-wise: each offset is
/// reduced by the inner set's support in the row's normal direction. Exact
/// for any convex inner set. The result may be empty.
pub fn pontryagin_diff(outer: &HPolytope, inner: &ConvexSet) -> HPolytope {
    let offsets = outer
        .normals
        .iter()
        .zip(&outer.offsets)
        .map(|(n, c)| c - inner.support(n).expect("inner set of a Pontryagin difference must be nonempty"))
        .collect();
    HPolytope { normals: outer.normals.clone(), offsets }
}

/// Image of a generator-form set under a linear map.
pub fn linear_map(m: &Matrix2<f64>, s: &ConvexSet) -> Result<Zonotope, SetError> {
    Ok(s.to_zonotope()?.linear_map(m))
}

/// Outer approximation of the minimal robust positively invariant set of
/// `x+ = a_cl x + d`, `d in dist`: find the smallest power `k` with
/// `a_cl^k D subset alpha D` (checked via support functions on the facet
/// normals of `D`) such that `alpha / (1 - alpha) * radius(D) <= tol`, then
/// return `(1 - alpha)^{-1} (D + a_cl D + ... + a_cl^{k-1} D)`.
///
/// The result `R` satisfies `a_cl R + D subset R` exactly, and lies within
/// `tol` (Hausdorff) of the minimal invariant set.
pub fn rpi_outer_approx(
    a_cl: &Matrix2<f64>,
    dist: &ConvexSet,
    tol: f64,
) -> Result<Zonotope, SetError> {
    const MAX_POWER: usize = 400;
    let d = dist.to_zonotope()?;
    let radius = d.radius();
    if radius < DEGENERATE_EPS {
        // Disturbance is a single point at the origin; the origin is invariant.
        return Ok(Zonotope::point(Vector2::zeros()));
    }
    let facets = d.to_hpolytope();
    let mut a_pow = *a_cl;
    for k in 1..=MAX_POWER {
        // alpha(k) = max_i h_D(A^k' n_i) / h_D(n_i) over facet normals.
        // Rows with zero support (degenerate D) demand exact containment.
        let mut alpha: f64 = 0.0;
        let mut ok = true;
        for (n, c) in facets.normals.iter().zip(&facets.offsets) {
            let num = d.support(&(a_pow.transpose() * n));
            if *c > DEGENERATE_EPS {
                alpha = alpha.max(num / c);
            } else if num > MEMBERSHIP_SLACK {
                ok = false;
                break;
            }
        }
        if ok && alpha < 1.0 && alpha / (1.0 - alpha) * radius <= tol {
            let scale = 1.0 / (1.0 - alpha);
            let mut sum = d.clone();
            let mut p = *a_cl;
            for _ in 1..k {
                sum = sum.minkowski_sum(&d.linear_map(&p));
                p = a_cl * p;
            }
            return Ok(Zonotope {
                center: sum.center * scale,
                generators: sum.generators.iter().map(|g| g * scale).collect(),
            });
        }
        a_pow = a_cl * a_pow;
    }
    Err(SetError::NoConvergence(MAX_POWER))
}

/// Membership with the shared slack, dispatching on representation.
pub fn contains(s: &ConvexSet, p: &Vector2<f64>) -> bool {
    s.contains(p)
}
