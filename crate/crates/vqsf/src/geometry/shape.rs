//! Closed-form implicit shapes: primitives, boolean composites, and the
//! seeded recipes that stand in for a mesh dataset.

use rand::RngExt;
use rand_pcg::Pcg64;

use super::{dot, norm, CUBE_MARGIN};
use crate::rng::{indexed_rng, Stream};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Sphere,
    Box,
    Torus,
    Cylinder,
    Capsule,
    /// Slab on four legs.
    Table,
    /// Hollow open-top cylinder.
    Cup,
    /// Fixed top sphere over a seed-dependent lower body; the family whose
    /// hidden half varies while the visible top stays identical.
    Stack,
}

impl ShapeKind {
    pub const ALL: &'static [ShapeKind] = &[
        ShapeKind::Sphere,
        ShapeKind::Box,
        ShapeKind::Torus,
        ShapeKind::Cylinder,
        ShapeKind::Capsule,
        ShapeKind::Table,
        ShapeKind::Cup,
        ShapeKind::Stack,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Box => "box",
            ShapeKind::Torus => "torus",
            ShapeKind::Cylinder => "cylinder",
            ShapeKind::Capsule => "capsule",
            ShapeKind::Table => "table",
            ShapeKind::Cup => "cup",
            ShapeKind::Stack => "stack",
        }
    }

    pub fn parse(s: &str) -> Result<ShapeKind> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownShapeKind(s.to_string()))
    }
}

impl std::fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone)]
enum Node {
    /// Radius r, centered at origin.
    Sphere { r: f64 },
    /// Half extents, axis-aligned in the local frame.
    Cuboid { half: [f64; 3] },
    /// Major/minor radii, axis z.
    Torus { major: f64, minor: f64 },
    /// Capped, axis z.
    Cylinder { r: f64, half_h: f64 },
    /// Segment from `a` to `b`, radius r (absolute coordinates).
    Capsule { a: [f64; 3], b: [f64; 3], r: f64 },
    Union(Vec<Node>),
    /// First minus second.
    Difference(Box<Node>, Box<Node>),
    /// Rotates by `rot_z` about the local z axis, then translates.
    Posed {
        offset: [f64; 3],
        rot_z: f64,
        child: Box<Node>,
    },
}

impl Node {
    fn sdf(&self, p: [f64; 3]) -> f64 {
        match self {
            Node::Sphere { r } => norm(&p) - r,
            Node::Cuboid { half } => {
                let q = [p[0].abs() - half[0], p[1].abs() - half[1], p[2].abs() - half[2]];
                let outside = [(q[0]).max(0.0), (q[1]).max(0.0), (q[2]).max(0.0)];
                norm(&outside) + q[0].max(q[1]).max(q[2]).min(0.0)
            }
            Node::Torus { major, minor } => {
                let qx = (p[0] * p[0] + p[1] * p[1]).sqrt() - major;
                (qx * qx + p[2] * p[2]).sqrt() - minor
            }
            Node::Cylinder { r, half_h } => {
                let d0 = (p[0] * p[0] + p[1] * p[1]).sqrt() - r;
                let d1 = p[2].abs() - half_h;
                let inside = d0.max(d1).min(0.0);
                let outside = (d0.max(0.0).powi(2) + d1.max(0.0).powi(2)).sqrt();
                inside + outside
            }
            Node::Capsule { a, b, r } => {
                let pa = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
                let ba = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
                let h = (dot(&pa, &ba) / dot(&ba, &ba)).clamp(0.0, 1.0);
                let d = [pa[0] - ba[0] * h, pa[1] - ba[1] * h, pa[2] - ba[2] * h];
                norm(&d) - r
            }
            Node::Union(children) => children.iter().map(|c| c.sdf(p)).fold(f64::INFINITY, f64::min),
            Node::Difference(a, b) => a.sdf(p).max(-b.sdf(p)),
            Node::Posed { offset, rot_z, child } => {
                let q = [p[0] - offset[0], p[1] - offset[1], p[2] - offset[2]];
                let (s, c) = rot_z.sin_cos();
                // Inverse rotation about z.
                let local = [c * q[0] + s * q[1], -s * q[0] + c * q[1], q[2]];
                child.sdf(local)
            }
        }
    }

    /// Conservative axis-aligned bounds in the parent frame.
    fn aabb(&self) -> ([f64; 3], [f64; 3]) {
        match self {
            Node::Sphere { r } => ([-r, -r, -r], [*r, *r, *r]),
            Node::Cuboid { half } => ([-half[0], -half[1], -half[2]], [half[0], half[1], half[2]]),
            Node::Torus { major, minor } => {
                let e = major + minor;
                ([-e, -e, -minor], [e, e, *minor])
            }
            Node::Cylinder { r, half_h } => ([-r, -r, -half_h], [*r, *r, *half_h]),
            Node::Capsule { a, b, r } => {
                let mut lo = [0.0; 3];
                let mut hi = [0.0; 3];
                for i in 0..3 {
                    lo[i] = a[i].min(b[i]) - r;
                    hi[i] = a[i].max(b[i]) + r;
                }
                (lo, hi)
            }
            Node::Union(children) => {
                let mut lo = [f64::INFINITY; 3];
                let mut hi = [f64::NEG_INFINITY; 3];
                for (clo, chi) in children.iter().map(|c| c.aabb()) {
                    for i in 0..3 {
                        lo[i] = lo[i].min(clo[i]);
                        hi[i] = hi[i].max(chi[i]);
                    }
                }
                (lo, hi)
            }
            Node::Difference(a, _) => a.aabb(),
            Node::Posed { offset, rot_z, child } => {
                let (clo, chi) = child.aabb();
                let (s, c) = rot_z.sin_cos();
                let mut lo = [f64::INFINITY; 3];
                let mut hi = [f64::NEG_INFINITY; 3];
                for corner in 0..8 {
                    let l = [
                        if corner & 1 == 0 { clo[0] } else { chi[0] },
                        if corner & 2 == 0 { clo[1] } else { chi[1] },
                        if corner & 4 == 0 { clo[2] } else { chi[2] },
                    ];
                    let w = [c * l[0] - s * l[1] + offset[0], s * l[0] + c * l[1] + offset[1], l[2] + offset[2]];
                    for i in 0..3 {
                        lo[i] = lo[i].min(w[i]);
                        hi[i] = hi[i].max(w[i]);
                    }
                }
                (lo, hi)
            }
        }
    }
}

/// A solid with a signed-distance evaluator and the matching inside/outside
/// predicate (`occupied(x) == (sdf(x) <= 0)`).
#[derive(Debug, Clone)]
pub struct ImplicitShape {
    root: Node,
}

impl ImplicitShape {
    fn from_root(root: Node) -> Result<Self> {
        let shape = ImplicitShape { root };
        let (lo, hi) = shape.root.aabb();
        let margin = CUBE_MARGIN - 1e-9;
        if lo.iter().any(|&v| v < margin) || hi.iter().any(|&v| v > 1.0 - margin) {
            return Err(Error::ShapeOutOfBounds(format!("bounds {lo:?}..{hi:?}")));
        }
        Ok(shape)
    }

    pub fn sphere(center: [f64; 3], r: f64) -> Result<Self> {
        Self::from_root(Node::Posed {
            offset: center,
            rot_z: 0.0,
            child: Box::new(Node::Sphere { r }),
        })
    }

    pub fn cuboid(center: [f64; 3], half: [f64; 3], rot_z: f64) -> Result<Self> {
        Self::from_root(Node::Posed {
            offset: center,
            rot_z,
            child: Box::new(Node::Cuboid { half }),
        })
    }

    pub fn torus(center: [f64; 3], major: f64, minor: f64) -> Result<Self> {
        Self::from_root(Node::Posed {
            offset: center,
            rot_z: 0.0,
            child: Box::new(Node::Torus { major, minor }),
        })
    }

    pub fn cylinder(center: [f64; 3], r: f64, half_h: f64) -> Result<Self> {
        Self::from_root(Node::Posed {
            offset: center,
            rot_z: 0.0,
            child: Box::new(Node::Cylinder { r, half_h }),
        })
    }

    pub fn capsule(a: [f64; 3], b: [f64; 3], r: f64) -> Result<Self> {
        Self::from_root(Node::Capsule { a, b, r })
    }

    /// Slab over four legs. `half` bounds the whole table, `slab_half_t` is
    /// half the slab thickness, `leg_half` the leg half-width.
    pub fn table(center: [f64; 3], half: [f64; 3], slab_half_t: f64, leg_half: f64, rot_z: f64) -> Result<Self> {
        let (hx, hy, hh) = (half[0], half[1], half[2]);
        let mut parts = vec![Node::Posed {
            offset: [0.0, 0.0, hh - slab_half_t],
            rot_z: 0.0,
            child: Box::new(Node::Cuboid {
                half: [hx, hy, slab_half_t],
            }),
        }];
        let leg_half_h = hh - slab_half_t;
        for sx in [-1.0, 1.0] {
            for sy in [-1.0, 1.0] {
                parts.push(Node::Posed {
                    offset: [sx * (hx - leg_half), sy * (hy - leg_half), -slab_half_t],
                    rot_z: 0.0,
                    child: Box::new(Node::Cuboid {
                        half: [leg_half, leg_half, leg_half_h],
                    }),
                });
            }
        }
        Self::from_root(Node::Posed {
            offset: center,
            rot_z,
            child: Box::new(Node::Union(parts)),
        })
    }

    /// Open-top hollow cylinder with wall and bottom thickness `wall`.
    pub fn cup(center: [f64; 3], outer_r: f64, half_h: f64, wall: f64) -> Result<Self> {
        let outer = Node::Cylinder {
            r: outer_r,
            half_h,
        };
        // The cavity pokes out the top so the cup is open.
        let inner = Node::Posed {
            offset: [0.0, 0.0, wall],
            rot_z: 0.0,
            child: Box::new(Node::Cylinder {
                r: outer_r - wall,
                half_h,
            }),
        };
        Self::from_root(Node::Posed {
            offset: center,
            rot_z: 0.0,
            child: Box::new(Node::Difference(Box::new(outer), Box::new(inner))),
        })
    }

    /// Top sphere joined by a thin neck to a lower body that is either a
    /// sphere or a box.
    pub fn stack(
        top_center: [f64; 3],
        top_r: f64,
        bottom_is_box: bool,
        bottom_center: [f64; 3],
        bottom_size: f64,
        bottom_aux: f64,
    ) -> Result<Self> {
        let bottom = Node::Posed {
            offset: bottom_center,
            rot_z: 0.0,
            child: Box::new(if bottom_is_box {
                Node::Cuboid {
                    half: [bottom_size, bottom_size, bottom_aux],
                }
            } else {
                Node::Sphere { r: bottom_size }
            }),
        };
        let top = Node::Posed {
            offset: top_center,
            rot_z: 0.0,
            child: Box::new(Node::Sphere { r: top_r }),
        };
        let neck = Node::Capsule {
            a: top_center,
            b: bottom_center,
            r: 0.03,
        };
        Self::from_root(Node::Union(vec![top, bottom, neck]))
    }

    /// Signed distance; negative inside.
    pub fn sdf(&self, p: [f64; 3]) -> f64 {
        self.root.sdf(p)
    }

    /// Binary occupancy, consistent with `sdf` by definition.
    pub fn occupied(&self, p: [f64; 3]) -> bool {
        self.sdf(p) <= 0.0
    }

    /// Outward surface normal from central differences of the sdf.
    pub fn normal(&self, p: [f64; 3]) -> [f64; 3] {
        let h = 1e-5;
        let mut n = [0.0; 3];
        for a in 0..3 {
            let mut pp = p;
            let mut pm = p;
            pp[a] += h;
            pm[a] -= h;
            n[a] = self.sdf(pp) - self.sdf(pm);
        }
        super::normalize(n)
    }

    pub fn aabb(&self) -> ([f64; 3], [f64; 3]) {
        self.root.aabb()
    }
}

/// The serializable description of one dataset shape: kind, parameter
/// vector, and the seed the parameters were drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeRecipe {
    pub kind: ShapeKind,
    pub params: Vec<f64>,
    pub seed: u64,
}

impl ShapeRecipe {
    /// Draws a randomized instance of `kind`. Parameters are fully
    /// determined by `seed`, so the recipe reconstructs bit-identically.
    pub fn sample(kind: ShapeKind, seed: u64) -> ShapeRecipe {
        let mut rng = indexed_rng(seed, Stream::Data, 0x5a);
        let r = &mut rng;
        let params = match kind {
            ShapeKind::Sphere => {
                let rad = r.random_range(0.16..0.28);
                let c = center_within(r, rad);
                vec![c[0], c[1], c[2], rad]
            }
            ShapeKind::Box => {
                let half: [f64; 3] = [
                    r.random_range(0.12..0.26),
                    r.random_range(0.12..0.26),
                    r.random_range(0.12..0.26),
                ];
                let rot = r.random_range(0.0..std::f64::consts::FRAC_PI_2);
                // Rotation can grow the xy footprint by up to sqrt(2).
                let reach = (half[0].max(half[1]) * std::f64::consts::SQRT_2).max(half[2]);
                let c = center_within(r, reach);
                vec![c[0], c[1], c[2], half[0], half[1], half[2], rot]
            }
            ShapeKind::Torus => {
                let major = r.random_range(0.16..0.24);
                let minor = r.random_range(0.05..0.08);
                let c = center_within(r, major + minor);
                vec![c[0], c[1], c[2], major, minor]
            }
            ShapeKind::Cylinder => {
                let rad: f64 = r.random_range(0.12..0.2);
                let hh: f64 = r.random_range(0.15..0.28);
                let c = center_within(r, rad.max(hh));
                vec![c[0], c[1], c[2], rad, hh]
            }
            ShapeKind::Capsule => {
                let rad = r.random_range(0.07..0.11);
                let a = [
                    r.random_range(0.25..0.45),
                    r.random_range(0.25..0.45),
                    r.random_range(0.25..0.45),
                ];
                let b = [
                    r.random_range(0.55..0.75),
                    r.random_range(0.55..0.75),
                    r.random_range(0.55..0.75),
                ];
                vec![a[0], a[1], a[2], b[0], b[1], b[2], rad]
            }
            ShapeKind::Table => {
                let hx: f64 = r.random_range(0.18..0.27);
                let hy: f64 = r.random_range(0.18..0.27);
                let hh = r.random_range(0.2..0.28);
                let slab = r.random_range(0.03..0.05);
                let leg = r.random_range(0.03..0.05);
                let rot = r.random_range(0.0..std::f64::consts::FRAC_PI_2);
                let reach = (hx.max(hy) * std::f64::consts::SQRT_2).max(hh);
                let c = center_within(r, reach);
                vec![c[0], c[1], c[2], hx, hy, hh, slab, leg, rot]
            }
            ShapeKind::Cup => {
                let outer: f64 = r.random_range(0.14..0.22);
                let hh: f64 = r.random_range(0.18..0.28);
                let wall = r.random_range(0.035..0.05);
                let c = center_within(r, outer.max(hh + wall));
                vec![c[0], c[1], c[2], outer, hh, wall]
            }
            ShapeKind::Stack => {
                // Top half fixed; only the hidden bottom varies.
                let top = [0.5, 0.5, 0.72, 0.13];
                let is_box = if r.random_bool(0.5) { 1.0 } else { 0.0 };
                let bx = r.random_range(0.42..0.58);
                let by = r.random_range(0.42..0.58);
                let bz = r.random_range(0.26..0.34);
                let size = r.random_range(0.1..0.17);
                let aux = r.random_range(0.08..0.14);
                vec![top[0], top[1], top[2], top[3], is_box, bx, by, bz, size, aux]
            }
        };
        ShapeRecipe {
            kind,
            params,
            seed,
        }
    }

    /// Builds the shape. Deterministic in `(kind, params)`; the seed only
    /// records provenance.
    pub fn build(&self) -> Result<ImplicitShape> {
        let p = &self.params;
        let need = |n: usize| -> Result<()> {
            if p.len() != n {
                Err(Error::InvalidArgument(format!(
                    "{} expects {n} params, got {}",
                    self.kind,
                    p.len()
                )))
            } else {
                Ok(())
            }
        };
        match self.kind {
            ShapeKind::Sphere => {
                need(4)?;
                ImplicitShape::sphere([p[0], p[1], p[2]], p[3])
            }
            ShapeKind::Box => {
                need(7)?;
                ImplicitShape::cuboid([p[0], p[1], p[2]], [p[3], p[4], p[5]], p[6])
            }
            ShapeKind::Torus => {
                need(5)?;
                ImplicitShape::torus([p[0], p[1], p[2]], p[3], p[4])
            }
            ShapeKind::Cylinder => {
                need(5)?;
                ImplicitShape::cylinder([p[0], p[1], p[2]], p[3], p[4])
            }
            ShapeKind::Capsule => {
                need(7)?;
                ImplicitShape::capsule([p[0], p[1], p[2]], [p[3], p[4], p[5]], p[6])
            }
            ShapeKind::Table => {
                need(9)?;
                ImplicitShape::table([p[0], p[1], p[2]], [p[3], p[4], p[5]], p[6], p[7], p[8])
            }
            ShapeKind::Cup => {
                need(6)?;
                ImplicitShape::cup([p[0], p[1], p[2]], p[3], p[4], p[5])
            }
            ShapeKind::Stack => {
                need(10)?;
                ImplicitShape::stack([p[0], p[1], p[2]], p[3], p[4] > 0.5, [p[5], p[6], p[7]], p[8], p[9])
            }
        }
    }
}

/// A center such that a shape of the given reach stays inside the margin.
fn center_within(rng: &mut Pcg64, reach: f64) -> [f64; 3] {
    let lo = CUBE_MARGIN + reach + 0.01;
    let hi = 1.0 - CUBE_MARGIN - reach - 0.01;
    if lo >= hi {
        return [0.5, 0.5, 0.5];
    }
    [
        rng.random_range(lo..hi),
        rng.random_range(lo..hi),
        rng.random_range(lo..hi),
    ]
}

/// Builds a shape from an explicit parameter vector, or from seeded random
/// parameters when `params` is empty.
pub fn make_shape(kind: ShapeKind, params: &[f64], seed: u64) -> Result<ImplicitShape> {
    let recipe = if params.is_empty() {
        ShapeRecipe::sample(kind, seed)
    } else {
        ShapeRecipe {
            kind,
            params: params.to_vec(),
            seed,
        }
    };
    recipe.build()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_predicate_by_definition() {
        let s = ImplicitShape::sphere([0.5, 0.5, 0.5], 0.3).unwrap();
        assert!(s.occupied([0.5, 0.5, 0.5]));
        assert!(!s.occupied([0.95, 0.5, 0.5]));
    }

    #[test]
    fn box_face_center_sdf_is_zero() {
        let b = ImplicitShape::cuboid([0.5, 0.5, 0.5], [0.2, 0.25, 0.3], 0.0).unwrap();
        assert!(b.sdf([0.7, 0.5, 0.5]).abs() < 1e-9);
        assert!(b.sdf([0.5, 0.25, 0.5]).abs() < 1e-9);
        assert!(b.sdf([0.5, 0.5, 0.8]).abs() < 1e-9);
    }

    #[test]
    fn torus_volume_monte_carlo() {
        // Enclosed volume within 2% of 2 pi^2 R r^2, 1e6 samples.
        let (major, minor) = (0.25, 0.08);
        let t = ImplicitShape::torus([0.5, 0.5, 0.5], major, minor).unwrap();
        let mut rng = indexed_rng(99, Stream::Data, 1);
        let n = 1_000_000usize;
        let mut hits = 0usize;
        for _ in 0..n {
            let p = [
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
            ];
            if t.occupied(p) {
                hits += 1;
            }
        }
        let est = hits as f64 / n as f64;
        let truth = 2.0 * std::f64::consts::PI.powi(2) * major * minor * minor;
        assert!(
            (est - truth).abs() / truth < 0.02,
            "estimate {est}, analytic {truth}"
        );
    }

    #[test]
    fn shapes_must_fit_margin_cube() {
        assert!(ImplicitShape::sphere([0.5, 0.5, 0.5], 0.5).is_err());
        assert!(ImplicitShape::sphere([0.1, 0.5, 0.5], 0.2).is_err());
    }

    #[test]
    fn unknown_kind_is_an_error() {
        assert!(ShapeKind::parse("blob").is_err());
        assert_eq!(ShapeKind::parse("table").unwrap(), ShapeKind::Table);
    }

    #[test]
    fn recipes_are_reproducible() {
        for &kind in ShapeKind::ALL {
            let a = ShapeRecipe::sample(kind, 1234);
            let b = ShapeRecipe::sample(kind, 1234);
            assert_eq!(a, b);
            a.build().unwrap();
        }
    }

    #[test]
    fn cup_is_hollow() {
        let c = ImplicitShape::cup([0.5, 0.5, 0.5], 0.2, 0.25, 0.04).unwrap();
        // Center of the cavity is empty, wall and bottom are solid.
        assert!(!c.occupied([0.5, 0.5, 0.6]));
        assert!(c.occupied([0.69, 0.5, 0.5]));
        assert!(c.occupied([0.5, 0.5, 0.27]));
    }
}
