//! Fisheye mapping on normalized image coordinates.
//!
//! Normalized coordinates put the origin at the image center with `(±1, ±1)`
//! at the four corners; `y` grows upward. The forward map squeezes a
//! rectilinear point towards the center in two steps: an axis-coupled
//! square-to-disc warp followed by a Gaussian radial scale.
//!
//! ```
//! use fisheye_hpe::geometry::{fisheye_forward, NormalizedPoint};
//!
//! let q = fisheye_forward(NormalizedPoint::new(1.0, 0.0)).unwrap();
//! assert!((q.x - (-0.5f64).exp()).abs() < 1e-12);
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default residual tolerance for [`fisheye_inverse`], in normalized units.
pub const DEFAULT_INVERSE_TOL: f64 = 1e-6;
/// Iteration cap for [`fisheye_inverse`].
pub const MAX_INVERSE_ITERS: usize = 50;
/// Edge samples per box side used by [`transport_box`], corners excluded.
pub const BOX_EDGE_SAMPLES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum GeometryError {
    #[error("point ({x}, {y}) lies outside the normalized square [-1, 1]^2")]
    OutOfDomain { x: f64, y: f64 },
    #[error("inverse did not converge for ({x}, {y}); residual {residual:e}")]
    NoConvergence { x: f64, y: f64, residual: f64 },
}

pub type Result<T> = std::result::Result<T, GeometryError>;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NormalizedPoint {
    pub x: f64,
    pub y: f64,
}

impl NormalizedPoint {
    pub const ORIGIN: Self = Self { x: 0.0, y: 0.0 };

    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    fn in_domain(self) -> bool {
        self.x.abs() <= 1.0 && self.y.abs() <= 1.0
    }
}

/// Head location in polar form: `theta` in degrees (counterclockwise, `[-180, 180]`),
/// `rho` the radial distance normalized by the canvas half-width.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PolarLocation {
    pub theta: f64,
    pub rho: f64,
}

impl PolarLocation {
    pub fn new(theta: f64, rho: f64) -> Self {
        Self { theta, rho }
    }
}

/// Axis-aligned box in normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub center: NormalizedPoint,
    pub half_width: f64,
    pub half_height: f64,
}

impl BoundingBox {
    pub fn new(center: NormalizedPoint, half_width: f64, half_height: f64) -> Self {
        Self {
            center,
            half_width,
            half_height,
        }
    }

    pub fn from_corners(min: NormalizedPoint, max: NormalizedPoint) -> Self {
        Self {
            center: NormalizedPoint::new(0.5 * (min.x + max.x), 0.5 * (min.y + max.y)),
            half_width: 0.5 * (max.x - min.x),
            half_height: 0.5 * (max.y - min.y),
        }
    }

    pub fn min(&self) -> NormalizedPoint {
        NormalizedPoint::new(self.center.x - self.half_width, self.center.y - self.half_height)
    }

    pub fn max(&self) -> NormalizedPoint {
        NormalizedPoint::new(self.center.x + self.half_width, self.center.y + self.half_height)
    }

    /// Scales both extents about the center.
    pub fn expanded(&self, factor: f64) -> Self {
        Self::new(self.center, self.half_width * factor, self.half_height * factor)
    }
}

/// Pixel raster dimensions, used to move between pixel and normalized coordinates.
///
/// Pixel `(i, j)` has its center at `(i + 0.5, j + 0.5)`; pixel rows grow downward
/// while normalized `y` grows upward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageGeometry {
    pub width_px: u32,
    pub height_px: u32,
}

impl ImageGeometry {
    pub fn new(width_px: u32, height_px: u32) -> Self {
        assert!(width_px >= 1 && height_px >= 1, "image dimensions must be positive");
        Self {
            width_px,
            height_px,
        }
    }

    /// Continuous pixel position (not pixel index) to normalized coordinates.
    pub fn to_normalized(&self, px: f64, py: f64) -> NormalizedPoint {
        let w = self.width_px as f64;
        let h = self.height_px as f64;
        NormalizedPoint::new(2.0 * px / w - 1.0, 1.0 - 2.0 * py / h)
    }

    pub fn to_pixel(&self, p: NormalizedPoint) -> (f64, f64) {
        let w = self.width_px as f64;
        let h = self.height_px as f64;
        ((p.x + 1.0) * 0.5 * w, (1.0 - p.y) * 0.5 * h)
    }

    /// Normalized coordinates of the center of pixel `(i, j)`.
    pub fn pixel_center(&self, i: u32, j: u32) -> NormalizedPoint {
        self.to_normalized(i as f64 + 0.5, j as f64 + 0.5)
    }
}

/// Value and Jacobian of the forward map. Callers guarantee the domain.
fn forward_with_jacobian(p: NormalizedPoint) -> (NormalizedPoint, [[f64; 2]; 2]) {
    let (x, y) = (p.x, p.y);
    let a = (1.0 - 0.5 * y * y).sqrt();
    let b = (1.0 - 0.5 * x * x).sqrt();
    let xp = x * a;
    let yp = y * b;
    // d(x', y') / d(x, y)
    let j1 = [[a, -0.5 * x * y / a], [-0.5 * x * y / b, b]];

    let s = (-0.5 * (xp * xp + yp * yp)).exp();
    // d(x'', y'') / d(x', y')
    let j2 = [
        [s * (1.0 - xp * xp), -s * xp * yp],
        [-s * xp * yp, s * (1.0 - yp * yp)],
    ];
    let j = [
        [
            j2[0][0] * j1[0][0] + j2[0][1] * j1[1][0],
            j2[0][0] * j1[0][1] + j2[0][1] * j1[1][1],
        ],
        [
            j2[1][0] * j1[0][0] + j2[1][1] * j1[1][0],
            j2[1][0] * j1[0][1] + j2[1][1] * j1[1][1],
        ],
    ];
    (NormalizedPoint::new(xp * s, yp * s), j)
}

/// Maps a rectilinear point to its fisheye position.
///
/// `(x', y') = (x·√(1 − y²/2), y·√(1 − x²/2))`, then both coordinates are scaled
/// by `exp(−r²/2)` where `r` is the radius of `(x', y')`.
pub fn fisheye_forward(p: NormalizedPoint) -> Result<NormalizedPoint> {
    if !p.in_domain() {
        return Err(GeometryError::OutOfDomain { x: p.x, y: p.y });
    }
    let a = (1.0 - 0.5 * p.y * p.y).sqrt();
    let b = (1.0 - 0.5 * p.x * p.x).sqrt();
    let xp = p.x * a;
    let yp = p.y * b;
    let s = (-0.5 * (xp * xp + yp * yp)).exp();
    Ok(NormalizedPoint::new(xp * s, yp * s))
}

/// Numerically inverts [`fisheye_forward`] with damped Newton iterations started at `q`.
///
/// Iterates well past `tol` so that the recovered point is accurate even where the
/// Jacobian is nearly singular (the square's edges), and reports
/// [`GeometryError::NoConvergence`] when `q` lies outside the mapped region.
pub fn fisheye_inverse(q: NormalizedPoint, tol: f64) -> Result<NormalizedPoint> {
    assert!(tol > 0.0, "tolerance must be positive");
    // r·exp(−r²/2) peaks at r = 1, so no image point lies farther out than exp(−1/2).
    if q.norm() > (-0.5f64).exp() + tol {
        return Err(GeometryError::NoConvergence {
            x: q.x,
            y: q.y,
            residual: f64::INFINITY,
        });
    }
    let mut p = NormalizedPoint::new(q.x.clamp(-1.0, 1.0), q.y.clamp(-1.0, 1.0));
    let residual_of = |f: NormalizedPoint| (f.x - q.x).abs().max((f.y - q.y).abs());

    let (mut f, mut jac) = forward_with_jacobian(p);
    let mut res = residual_of(f);
    for _ in 0..MAX_INVERSE_ITERS {
        if res <= tol * 1e-6 {
            break;
        }
        let rx = f.x - q.x;
        let ry = f.y - q.y;
        let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
        if det.abs() < 1e-300 {
            break;
        }
        let dx = (jac[1][1] * rx - jac[0][1] * ry) / det;
        let dy = (jac[0][0] * ry - jac[1][0] * rx) / det;

        let mut step = 1.0;
        let mut accepted = false;
        while step > 1e-10 {
            let cand = NormalizedPoint::new(
                (p.x - step * dx).clamp(-1.0, 1.0),
                (p.y - step * dy).clamp(-1.0, 1.0),
            );
            let (fc, jc) = forward_with_jacobian(cand);
            let rc = residual_of(fc);
            if rc < res {
                p = cand;
                f = fc;
                jac = jc;
                res = rc;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }

    if res <= tol {
        Ok(p)
    } else {
        Err(GeometryError::NoConvergence {
            x: q.x,
            y: q.y,
            residual: res,
        })
    }
}

/// Polar form of `p`; the origin maps to `theta = 0`.
pub fn to_polar(p: NormalizedPoint) -> PolarLocation {
    let rho = p.norm();
    let theta = if rho == 0.0 {
        0.0
    } else {
        p.y.atan2(p.x).to_degrees()
    };
    PolarLocation { theta, rho }
}

pub fn from_polar(l: PolarLocation) -> NormalizedPoint {
    let t = l.theta.to_radians();
    NormalizedPoint::new(l.rho * t.cos(), l.rho * t.sin())
}

/// Transports a box through the fisheye map and returns the axis-aligned hull of its
/// mapped boundary.
///
/// The boundary sample holds the corners, [`BOX_EDGE_SAMPLES`] interior points per
/// side, and every point where a side crosses a coordinate axis. Along a vertical
/// side `|x''|` peaks at the smallest `|y|` (and symmetrically for horizontal
/// sides), so the axis crossings make the hull exact rather than sampled.
pub fn transport_box(b: &BoundingBox) -> Result<BoundingBox> {
    let lo = b.min();
    let hi = b.max();
    let mut pts = Vec::with_capacity(4 * (BOX_EDGE_SAMPLES + 2) + 4);
    for k in 0..=BOX_EDGE_SAMPLES + 1 {
        let t = k as f64 / (BOX_EDGE_SAMPLES + 1) as f64;
        let x = lo.x + t * (hi.x - lo.x);
        let y = lo.y + t * (hi.y - lo.y);
        pts.push(NormalizedPoint::new(x, lo.y));
        pts.push(NormalizedPoint::new(x, hi.y));
        pts.push(NormalizedPoint::new(lo.x, y));
        pts.push(NormalizedPoint::new(hi.x, y));
    }
    if lo.x < 0.0 && hi.x > 0.0 {
        pts.push(NormalizedPoint::new(0.0, lo.y));
        pts.push(NormalizedPoint::new(0.0, hi.y));
    }
    if lo.y < 0.0 && hi.y > 0.0 {
        pts.push(NormalizedPoint::new(lo.x, 0.0));
        pts.push(NormalizedPoint::new(hi.x, 0.0));
    }

    let mut min = NormalizedPoint::new(f64::INFINITY, f64::INFINITY);
    let mut max = NormalizedPoint::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in pts {
        let q = fisheye_forward(p)?;
        min.x = min.x.min(q.x);
        min.y = min.y.min(q.y);
        max.x = max.x.max(q.x);
        max.y = max.y.max(q.y);
    }
    Ok(BoundingBox::from_corners(min, max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Reference values from a 30-digit evaluation of the forward map.
    const FWD_1_0: f64 = 0.606_530_659_712_633_4;
    const FWD_HALF_HALF: f64 = 0.375_813_271_660_410_34;

    #[test]
    fn forward_reference_values() {
        assert_eq!(fisheye_forward(NormalizedPoint::ORIGIN).unwrap(), NormalizedPoint::ORIGIN);
        let q = fisheye_forward(NormalizedPoint::new(1.0, 0.0)).unwrap();
        assert!((q.x - FWD_1_0).abs() < 1e-12 && q.y == 0.0);
        let q = fisheye_forward(NormalizedPoint::new(0.5, 0.5)).unwrap();
        assert!((q.x - FWD_HALF_HALF).abs() < 1e-12);
        assert!((q.y - FWD_HALF_HALF).abs() < 1e-12);
    }

    #[test]
    fn forward_rejects_outside_square() {
        assert!(matches!(
            fisheye_forward(NormalizedPoint::new(1.0 + 1e-9, 0.0)),
            Err(GeometryError::OutOfDomain { .. })
        ));
        assert!(fisheye_forward(NormalizedPoint::new(0.0, -1.5)).is_err());
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let p = NormalizedPoint::new(rng.gen_range(-0.95..0.95), rng.gen_range(-0.95..0.95));
            let (_, j) = forward_with_jacobian(p);
            let h = 1e-6;
            let fx1 = fisheye_forward(NormalizedPoint::new(p.x + h, p.y)).unwrap();
            let fx0 = fisheye_forward(NormalizedPoint::new(p.x - h, p.y)).unwrap();
            let fy1 = fisheye_forward(NormalizedPoint::new(p.x, p.y + h)).unwrap();
            let fy0 = fisheye_forward(NormalizedPoint::new(p.x, p.y - h)).unwrap();
            let num = [
                [(fx1.x - fx0.x) / (2.0 * h), (fy1.x - fy0.x) / (2.0 * h)],
                [(fx1.y - fx0.y) / (2.0 * h), (fy1.y - fy0.y) / (2.0 * h)],
            ];
            for r in 0..2 {
                for c in 0..2 {
                    assert!((num[r][c] - j[r][c]).abs() < 1e-7, "{num:?} vs {j:?}");
                }
            }
        }
    }

    #[test]
    fn inverse_examples() {
        assert_eq!(
            fisheye_inverse(NormalizedPoint::ORIGIN, DEFAULT_INVERSE_TOL).unwrap(),
            NormalizedPoint::ORIGIN
        );
        let p = fisheye_inverse(NormalizedPoint::new(FWD_1_0, 0.0), DEFAULT_INVERSE_TOL).unwrap();
        assert!((p.x - 1.0).abs() < 1e-6 && p.y.abs() < 1e-12);
    }

    #[test]
    fn inverse_fails_outside_mapped_region() {
        // The axis image ends at exp(-1/2); nothing maps to 0.7 on the axis.
        let err = fisheye_inverse(NormalizedPoint::new(0.7, 0.0), DEFAULT_INVERSE_TOL);
        assert!(matches!(err, Err(GeometryError::NoConvergence { .. })));
        assert!(fisheye_inverse(NormalizedPoint::new(0.9, 0.9), DEFAULT_INVERSE_TOL).is_err());
    }

    #[test]
    fn polar_examples() {
        assert_eq!(to_polar(NormalizedPoint::ORIGIN), PolarLocation::new(0.0, 0.0));
        let l = to_polar(NormalizedPoint::new(0.0, 0.5));
        assert!((l.theta - 90.0).abs() < 1e-12 && (l.rho - 0.5).abs() < 1e-15);
        let l = to_polar(NormalizedPoint::new(-0.3, -0.3));
        assert!((l.theta + 135.0).abs() < 1e-12);
    }

    #[test]
    fn polar_round_trip_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let p = NormalizedPoint::new(rng.gen_range(-0.7..0.7), rng.gen_range(-0.7..0.7));
            let back = from_polar(to_polar(p));
            assert!((back.x - p.x).abs() < 1e-14 && (back.y - p.y).abs() < 1e-14);
        }
    }

    #[test]
    fn tiny_center_box_is_fixed() {
        let b = BoundingBox::new(NormalizedPoint::ORIGIN, 1e-9, 1e-9);
        let t = transport_box(&b).unwrap();
        assert!(t.center.norm() < 1e-18);
        assert!((t.half_width - 1e-9).abs() < 1e-17);
    }

    #[test]
    fn centered_boxes_never_grow() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..1000 {
            let b = BoundingBox::new(
                NormalizedPoint::ORIGIN,
                rng.gen_range(1e-3..1.0),
                rng.gen_range(1e-3..1.0),
            );
            let t = transport_box(&b).unwrap();
            assert!(t.half_width <= b.half_width && t.half_height <= b.half_height);
            assert!(t.center.norm() < 1e-15);
        }
    }

    /// Hull of the mapped boundary sampled at 1000 points per side.
    fn dense_hull(b: &BoundingBox) -> BoundingBox {
        let (lo, hi) = (b.min(), b.max());
        let mut min = NormalizedPoint::new(f64::INFINITY, f64::INFINITY);
        let mut max = NormalizedPoint::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        let n = 1000;
        for k in 0..=n {
            let t = k as f64 / n as f64;
            let x = lo.x + t * (hi.x - lo.x);
            let y = lo.y + t * (hi.y - lo.y);
            for p in [(x, lo.y), (x, hi.y), (lo.x, y), (hi.x, y)] {
                let q = fisheye_forward(NormalizedPoint::new(p.0, p.1)).unwrap();
                min.x = min.x.min(q.x);
                min.y = min.y.min(q.y);
                max.x = max.x.max(q.x);
                max.y = max.y.max(q.y);
            }
        }
        BoundingBox::from_corners(min, max)
    }

    #[test]
    fn off_center_box_matches_dense_boundary_hull() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let hw = rng.gen_range(0.05..0.3);
            let hh = rng.gen_range(0.05..0.3);
            let c = NormalizedPoint::new(
                rng.gen_range(-1.0 + hw..1.0 - hw),
                rng.gen_range(-1.0 + hh..1.0 - hh),
            );
            let b = BoundingBox::new(c, hw, hh);
            let ours = transport_box(&b).unwrap();
            let oracle = dense_hull(&b);
            // The exact hull contains the dense one and differs from it by at most
            // the sampling gap.
            for (a, o) in [
                (ours.min().x, oracle.min().x),
                (ours.min().y, oracle.min().y),
                (ours.max().x, oracle.max().x),
                (ours.max().y, oracle.max().y),
            ] {
                assert!((a - o).abs() < 1e-5, "{ours:?} vs {oracle:?}");
            }
        }
    }

    #[test]
    fn transport_propagates_domain_error() {
        let b = BoundingBox::new(NormalizedPoint::new(0.95, 0.0), 0.1, 0.1);
        assert!(transport_box(&b).is_err());
    }

    #[test]
    fn monotone_along_positive_axis() {
        let mut prev = -1.0;
        for k in 0..1000 {
            let x = k as f64 / 1000.0;
            let q = fisheye_forward(NormalizedPoint::new(x, 0.0)).unwrap();
            assert!(q.x > prev);
            prev = q.x;
        }
    }

    proptest! {
        #[test]
        fn radial_compression(x in -1.0f64..=1.0, y in -1.0f64..=1.0) {
            let p = NormalizedPoint::new(x, y);
            let q = fisheye_forward(p).unwrap();
            if p.norm() > 1e-12 {
                prop_assert!(q.norm() < p.norm());
            } else {
                prop_assert!(q.norm() <= p.norm());
            }
        }

        #[test]
        fn square_symmetries(x in -1.0f64..=1.0, y in -1.0f64..=1.0) {
            let q = fisheye_forward(NormalizedPoint::new(x, y)).unwrap();
            let swapped = fisheye_forward(NormalizedPoint::new(y, x)).unwrap();
            prop_assert_eq!(swapped, NormalizedPoint::new(q.y, q.x));
            for (sx, sy) in [(-1.0, 1.0), (1.0, -1.0), (-1.0, -1.0)] {
                let r = fisheye_forward(NormalizedPoint::new(sx * x, sy * y)).unwrap();
                prop_assert_eq!(r, NormalizedPoint::new(sx * q.x, sy * q.y));
            }
        }

        #[test]
        fn inverse_round_trip(r in 0.0f64..0.999, t in -180.0f64..180.0) {
            let p = from_polar(PolarLocation::new(t, r));
            let back = fisheye_inverse(fisheye_forward(p).unwrap(), DEFAULT_INVERSE_TOL).unwrap();
            prop_assert!((back.x - p.x).abs() < 1e-6 && (back.y - p.y).abs() < 1e-6);
        }
    }
}
