//! Incremental Delaunay triangulation (Bowyer-Watson) with exact predicates.
//!
//! Coordinates are quantised onto an integer lattice of at most 2^24 steps
//! per axis so orientation and in-circle tests can be evaluated exactly in
//! `i128`. The triangulation is seeded with a super-triangle whose vertices
//! are never real points.

use std::collections::HashMap;

const LATTICE: f64 = (1u64 << 24) as f64;
const SUPER: i64 = 1 << 26;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct P {
    x: i64,
    y: i64,
}

fn orient(a: P, b: P, c: P) -> i128 {
    let (abx, aby) = ((b.x - a.x) as i128, (b.y - a.y) as i128);
    let (acx, acy) = ((c.x - a.x) as i128, (c.y - a.y) as i128);
    abx * acy - aby * acx
}

/// Positive when `d` lies strictly inside the circumcircle of CCW `(a, b, c)`.
fn in_circle(a: P, b: P, c: P, d: P) -> i128 {
    let row = |p: P| {
        let (dx, dy) = ((p.x - d.x) as i128, (p.y - d.y) as i128);
        (dx, dy, dx * dx + dy * dy)
    };
    let (ax, ay, a2) = row(a);
    let (bx, by, b2) = row(b);
    let (cx, cy, c2) = row(c);
    ax * (by * c2 - b2 * cy) - ay * (bx * c2 - b2 * cx) + a2 * (bx * cy - by * cx)
}

#[derive(Debug, Clone)]
struct Tri {
    v: [usize; 3],
    /// `n[i]` is the neighbour across the edge opposite `v[i]`.
    n: [Option<usize>; 3],
    alive: bool,
}

/// A Delaunay triangulation of 2-D points.
#[derive(Debug, Clone)]
pub struct Triangulation {
    /// Lattice points; the first three are the super-triangle.
    pts: Vec<P>,
    /// Original coordinates of the real points (index offset by 3).
    coords: Vec<(f64, f64)>,
    tris: Vec<Tri>,
    origin: (f64, f64),
    scale: f64,
    last: usize,
}

/// Location of a query point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Location {
    /// Inside a triangle of real points: point indices and barycentric weights.
    Inside { vertices: [usize; 3], weights: [f64; 3] },
    /// Outside the convex hull of the real points.
    Outside,
}

impl Triangulation {
    /// Triangulate `coords` as `(x, y)` pairs. Points that collapse onto the
    /// same lattice node keep the first occurrence only; callers should
    /// deduplicate beforehand.
    pub fn new(coords: &[(f64, f64)]) -> Self {
        let (mut xmin, mut ymin, mut xmax, mut ymax) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for &(x, y) in coords {
            xmin = xmin.min(x);
            ymin = ymin.min(y);
            xmax = xmax.max(x);
            ymax = ymax.max(y);
        }
        let span = (xmax - xmin).max(ymax - ymin);
        let scale = if span > 0.0 && span.is_finite() { LATTICE / span } else { 1.0 };
        let mut t = Triangulation {
            pts: vec![
                P { x: -SUPER, y: -SUPER },
                P { x: 2 * SUPER, y: -SUPER },
                P { x: -SUPER, y: 2 * SUPER },
            ],
            coords: coords.to_vec(),
            tris: vec![Tri {
                v: [0, 1, 2],
                n: [None; 3],
                alive: true,
            }],
            origin: (xmin, ymin),
            scale,
            last: 0,
        };
        let mut seen = HashMap::new();
        for (i, &c) in coords.iter().enumerate() {
            let p = t.quantise(c);
            t.pts.push(p);
            if seen.insert(p, i).is_none() {
                t.insert(i + 3);
            }
        }
        t
    }

    fn quantise(&self, (x, y): (f64, f64)) -> P {
        P {
            x: ((x - self.origin.0) * self.scale).round() as i64,
            y: ((y - self.origin.1) * self.scale).round() as i64,
        }
    }

    /// Triangle containing `p` (walk from the last hit), or `None` if `p`
    /// falls outside the super-triangle.
    fn locate(&self, p: P) -> Option<usize> {
        let mut t = self.last;
        if !self.tris[t].alive {
            t = self.tris.iter().position(|t| t.alive)?;
        }
        let limit = 4 * self.tris.len() + 16;
        for _ in 0..limit {
            let tri = &self.tris[t];
            let mut moved = false;
            for i in 0..3 {
                let a = self.pts[tri.v[(i + 1) % 3]];
                let b = self.pts[tri.v[(i + 2) % 3]];
                if orient(a, b, p) < 0 {
                    match tri.n[i] {
                        Some(next) => {
                            t = next;
                            moved = true;
                            break;
                        }
                        None => return None,
                    }
                }
            }
            if !moved {
                return Some(t);
            }
        }
        // Walk did not settle; fall back to a scan.
        self.tris.iter().enumerate().find_map(|(i, tri)| {
            let inside = tri.alive
                && (0..3).all(|k| {
                    orient(self.pts[tri.v[(k + 1) % 3]], self.pts[tri.v[(k + 2) % 3]], p) >= 0
                });
            inside.then_some(i)
        })
    }

    fn insert(&mut self, pi: usize) {
        let p = self.pts[pi];
        let Some(start) = self.locate(p) else { return };
        // Cavity: triangles whose circumcircle strictly contains p, grown from the
        // containing triangle.
        let mut in_cavity = HashMap::new();
        let mut stack = vec![start];
        in_cavity.insert(start, ());
        let mut cavity = Vec::new();
        while let Some(t) = stack.pop() {
            cavity.push(t);
            for k in 0..3 {
                if let Some(nb) = self.tris[t].n[k] {
                    if in_cavity.contains_key(&nb) {
                        continue;
                    }
                    let v = self.tris[nb].v;
                    if in_circle(self.pts[v[0]], self.pts[v[1]], self.pts[v[2]], p) > 0 {
                        in_cavity.insert(nb, ());
                        stack.push(nb);
                    }
                }
            }
        }
        // Boundary edges (a, b) in CCW order seen from inside the cavity.
        let mut boundary = Vec::new();
        for &t in &cavity {
            let tri = self.tris[t].clone();
            for k in 0..3 {
                let outside = tri.n[k].filter(|nb| !in_cavity.contains_key(nb));
                if tri.n[k].is_none() || outside.is_some() {
                    boundary.push((tri.v[(k + 1) % 3], tri.v[(k + 2) % 3], outside));
                }
            }
        }
        for &t in &cavity {
            self.tris[t].alive = false;
        }
        // Fan new triangles (a, b, p) and stitch neighbours.
        let mut by_start: HashMap<usize, usize> = HashMap::new();
        let mut by_end: HashMap<usize, usize> = HashMap::new();
        let mut created = Vec::with_capacity(boundary.len());
        for &(a, b, outside) in &boundary {
            let id = self.tris.len();
            self.tris.push(Tri {
                v: [a, b, pi],
                // opposite a: edge (b, p); opposite b: edge (p, a); opposite p: edge (a, b)
                n: [None, None, outside],
                alive: true,
            });
            if let Some(o) = outside {
                let on = &mut self.tris[o];
                for k in 0..3 {
                    let (x, y) = (on.v[(k + 1) % 3], on.v[(k + 2) % 3]);
                    if (x == b && y == a) || (x == a && y == b) {
                        on.n[k] = Some(id);
                    }
                }
            }
            by_start.insert(a, id);
            by_end.insert(b, id);
            created.push(id);
        }
        for &id in &created {
            let [a, b, _] = self.tris[id].v;
            // Edge (b, p) is shared with the triangle whose boundary edge starts at b.
            if let Some(&nb) = by_start.get(&b) {
                self.tris[id].n[0] = Some(nb);
            }
            // Edge (p, a) is shared with the triangle whose boundary edge ends at a.
            if let Some(&nb) = by_end.get(&a) {
                self.tris[id].n[1] = Some(nb);
            }
        }
        if let Some(&first) = created.first() {
            self.last = first;
        }
    }

    /// Locate `(x, y)` and compute barycentric weights on original coordinates.
    pub fn locate_point(&self, x: f64, y: f64) -> Location {
        let q = self.quantise((x, y));
        let Some(t) = self.locate(q) else {
            return Location::Outside;
        };
        let v = self.tris[t].v;
        if v.iter().any(|&i| i < 3) {
            return Location::Outside;
        }
        let [a, b, c] = v.map(|i| self.coords[i - 3]);
        let det = (b.1 - c.1) * (a.0 - c.0) + (c.0 - b.0) * (a.1 - c.1);
        if det == 0.0 {
            return Location::Outside;
        }
        let wa = ((b.1 - c.1) * (x - c.0) + (c.0 - b.0) * (y - c.1)) / det;
        let wb = ((c.1 - a.1) * (x - c.0) + (a.0 - c.0) * (y - c.1)) / det;
        Location::Inside {
            vertices: v.map(|i| i - 3),
            weights: [wa, wb, 1.0 - wa - wb],
        }
    }

    /// Real triangles as point-index triples.
    pub fn triangles(&self) -> Vec<[usize; 3]> {
        self.tris
            .iter()
            .filter(|t| t.alive && t.v.iter().all(|&i| i >= 3))
            .map(|t| t.v.map(|i| i - 3))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn area(coords: &[(f64, f64)], t: [usize; 3]) -> f64 {
        let [a, b, c] = t.map(|i| coords[i]);
        0.5 * ((b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0))
    }

    #[test]
    fn square_splits_into_two_triangles() {
        let pts = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
        let t = Triangulation::new(&pts);
        let tris = t.triangles();
        assert_eq!(tris.len(), 2);
        let total: f64 = tris.iter().map(|&tr| area(&pts, tr)).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn random_points_are_delaunay_and_cover_hull() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<(f64, f64)> = (0..200)
            .map(|_| (rng.random_range(0.0..10.0), rng.random_range(-5.0..5.0)))
            .collect();
        let t = Triangulation::new(&pts);
        let tris = t.triangles();
        for &tr in &tris {
            assert!(area(&pts, tr) > 0.0, "triangles must be CCW and non-degenerate");
            let [a, b, c] = tr.map(|i| t.pts[i + 3]);
            for i in 0..pts.len() {
                if tr.contains(&i) {
                    continue;
                }
                assert!(in_circle(a, b, c, t.pts[i + 3]) <= 0, "empty-circumcircle violated");
            }
        }
        // Euler: a triangulation of n points with h on the hull has 2n - h - 2 triangles,
        // so with at most n hull points there are at least n - 2.
        assert!(tris.len() >= pts.len() - 2);
    }

    #[test]
    fn lattice_points_triangulate() {
        let mut pts = Vec::new();
        for i in 0..12 {
            for j in 0..9 {
                pts.push((30.2 + 0.3 * i as f64, -100.0 + 0.4 * j as f64));
            }
        }
        let t = Triangulation::new(&pts);
        let total: f64 = t.triangles().iter().map(|&tr| area(&pts, tr)).sum();
        assert!((total - 11.0 * 0.3 * 8.0 * 0.4).abs() < 1e-9, "hull area {total}");
    }

    #[test]
    fn collinear_points_have_no_interior() {
        let pts = [(0.0, 0.0), (1.0, 1.0), (2.0, 2.0)];
        let t = Triangulation::new(&pts);
        assert!(t.triangles().is_empty());
        assert_eq!(t.locate_point(1.0, 1.0), Location::Outside);
    }
}
