//! Boxes, overlap ratios and the four-point perspective map used to bring
//! raw CCTV coordinates into the warped region of interest.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("invalid box [{0}, {1}, {2}, {3}]: need finite coordinates with min <= max")]
    InvalidBox(f64, f64, f64, f64),
    #[error("degenerate region quad: {0}")]
    DegenerateQuad(String),
    #[error("point ({0}, {1}) maps to infinity")]
    PointAtInfinity(f64, f64),
    #[error("homography is not invertible")]
    SingularHomography,
}

/// Axis-aligned box in pixel coordinates, y growing downward.
///
/// Serialized as `[x_min, y_min, x_max, y_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        let finite = [x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite());
        if !finite || x_min > x_max || y_min > y_max {
            return Err(GeometryError::InvalidBox(x_min, y_min, x_max, y_max));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// Builds a box from two arbitrary corners, ordering the coordinates.
    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            x_min: x0.min(x1),
            y_min: y0.min(y1),
            x_max: x0.max(x1),
            y_max: y0.max(y1),
        }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    pub fn corners(&self) -> [(f64, f64); 4] {
        [
            (self.x_min, self.y_min),
            (self.x_max, self.y_min),
            (self.x_max, self.y_max),
            (self.x_min, self.y_max),
        ]
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    /// Clips the box to `[0, width] x [0, height]`. Returns `None` when the
    /// box lies entirely outside that rectangle.
    pub fn clip_to(&self, width: f64, height: f64) -> Option<BBox> {
        if self.x_max < 0.0 || self.y_max < 0.0 || self.x_min > width || self.y_min > height {
            return None;
        }
        Some(BBox {
            x_min: self.x_min.clamp(0.0, width),
            y_min: self.y_min.clamp(0.0, height),
            x_max: self.x_max.clamp(0.0, width),
            y_max: self.y_max.clamp(0.0, height),
        })
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = GeometryError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.as_array()
    }
}

fn interval_overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

/// Intersection over union. Two zero-area boxes score 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = interval_overlap(a.x_min, a.x_max, b.x_min, b.x_max)
        * interval_overlap(a.y_min, a.y_max, b.y_min, b.y_max);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Intersection over line: overlap of the vertical extents divided by the
/// length of their hull.
pub fn iol(a: &BBox, b: &BBox) -> f64 {
    let overlap = interval_overlap(a.y_min, a.y_max, b.y_min, b.y_max);
    let hull = a.y_max.max(b.y_max) - a.y_min.min(b.y_min);
    if hull <= 0.0 {
        0.0
    } else {
        (overlap / hull).clamp(0.0, 1.0)
    }
}

/// Serialized as `[x, y]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "(f64, f64)", into = "(f64, f64)")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

impl From<(f64, f64)> for Point {
    fn from((x, y): (f64, f64)) -> Self {
        Self { x, y }
    }
}

impl From<Point> for (f64, f64) {
    fn from(p: Point) -> Self {
        (p.x, p.y)
    }
}

/// Region of interest on the raw frame, corners ordered top-left,
/// top-right, bottom-right, bottom-left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[Point; 4]", into = "[Point; 4]")]
pub struct RoiQuad {
    corners: [Point; 4],
}

impl RoiQuad {
    pub fn new(corners: [Point; 4]) -> Result<Self, GeometryError> {
        if corners.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(GeometryError::DegenerateQuad("non-finite corner".into()));
        }
        let scale = corners
            .iter()
            .flat_map(|p| [p.x.abs(), p.y.abs()])
            .fold(1.0_f64, f64::max);
        let eps = 1e-12 * scale * scale;
        let mut sign = 0.0;
        for i in 0..4 {
            let a = corners[i];
            let b = corners[(i + 1) % 4];
            let c = corners[(i + 2) % 4];
            let cross = (b.x - a.x) * (c.y - b.y) - (b.y - a.y) * (c.x - b.x);
            if cross.abs() <= eps {
                return Err(GeometryError::DegenerateQuad(format!(
                    "corners {}, {}, {} are collinear",
                    i,
                    (i + 1) % 4,
                    (i + 2) % 4
                )));
            }
            if sign == 0.0 {
                sign = cross.signum();
            } else if cross.signum() != sign {
                return Err(GeometryError::DegenerateQuad(
                    "quadrilateral is not convex".into(),
                ));
            }
        }
        Ok(Self { corners })
    }

    pub fn corners(&self) -> &[Point; 4] {
        &self.corners
    }

    /// The axis-aligned rectangle `(0,0)-(width,height)` as a quad.
    pub fn rect(width: f64, height: f64) -> Result<Self, GeometryError> {
        Self::new([
            Point::new(0.0, 0.0),
            Point::new(width, 0.0),
            Point::new(width, height),
            Point::new(0.0, height),
        ])
    }
}

impl TryFrom<[Point; 4]> for RoiQuad {
    type Error = GeometryError;

    fn try_from(c: [Point; 4]) -> Result<Self, Self::Error> {
        RoiQuad::new(c)
    }
}

impl From<RoiQuad> for [Point; 4] {
    fn from(q: RoiQuad) -> Self {
        q.corners
    }
}

/// Projective map, normalized so the bottom-right entry is 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    matrix: Matrix3<f64>,
}

impl Homography {
    pub fn new(matrix: Matrix3<f64>) -> Result<Self, GeometryError> {
        let corner = matrix[(2, 2)];
        if !corner.is_finite() || corner.abs() <= 1e-12 {
            return Err(GeometryError::SingularHomography);
        }
        let matrix = matrix / corner;
        if !matrix.iter().all(|v| v.is_finite()) || matrix.determinant().abs() <= 1e-12 {
            return Err(GeometryError::SingularHomography);
        }
        Ok(Self { matrix })
    }

    pub fn identity() -> Self {
        Self {
            matrix: Matrix3::identity(),
        }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.matrix
    }

    pub fn inverse(&self) -> Result<Self, GeometryError> {
        let inv = self
            .matrix
            .try_inverse()
            .ok_or(GeometryError::SingularHomography)?;
        Self::new(inv)
    }
}

/// Solves the exact four-point correspondence taking the quad corners onto
/// `(0,0), (W,0), (W,H), (0,H)`.
pub fn homography_from_quad(
    quad: &RoiQuad,
    target_width: f64,
    target_height: f64,
) -> Result<Homography, GeometryError> {
    if !(target_width > 0.0 && target_height > 0.0) {
        return Err(GeometryError::DegenerateQuad(format!(
            "target dimensions must be positive, got {target_width}x{target_height}"
        )));
    }
    let targets = [
        (0.0, 0.0),
        (target_width, 0.0),
        (target_width, target_height),
        (0.0, target_height),
    ];
    // Unknowns h11..h32 with h33 = 1.
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut rhs = SVector::<f64, 8>::zeros();
    for (i, (src, &(u, v))) in quad.corners().iter().zip(targets.iter()).enumerate() {
        let (x, y) = (src.x, src.y);
        let r = 2 * i;
        a.row_mut(r)
            .copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
        a.row_mut(r + 1)
            .copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
        rhs[r] = u;
        rhs[r + 1] = v;
    }
    let h = a
        .lu()
        .solve(&rhs)
        .ok_or_else(|| GeometryError::DegenerateQuad("correspondence system is singular".into()))?;
    let matrix = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0);
    Homography::new(matrix)
        .map_err(|_| GeometryError::DegenerateQuad("resulting map is not invertible".into()))
}

pub fn warp_point(h: &Homography, p: Point) -> Result<Point, GeometryError> {
    let q = h.matrix * Vector3::new(p.x, p.y, 1.0);
    if q.z.abs() <= 1e-12 || !q.z.is_finite() {
        return Err(GeometryError::PointAtInfinity(p.x, p.y));
    }
    Ok(Point::new(q.x / q.z, q.y / q.z))
}

/// Axis-aligned hull of the four warped corners.
pub fn warp_bbox(h: &Homography, b: &BBox) -> Result<BBox, GeometryError> {
    let mut x_min = f64::INFINITY;
    let mut y_min = f64::INFINITY;
    let mut x_max = f64::NEG_INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for corner in b.corners() {
        let p = warp_point(h, corner.into())?;
        x_min = x_min.min(p.x);
        y_min = y_min.min(p.y);
        x_max = x_max.max(p.x);
        y_max = y_max.max(p.y);
    }
    BBox::new(x_min, y_min, x_max, y_max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(a: f64, b: f64, c: f64, d: f64) -> BBox {
        BBox::new(a, b, c, d).unwrap()
    }

    fn pts(c: [(f64, f64); 4]) -> [Point; 4] {
        c.map(Point::from)
    }

    /// Plain Gaussian elimination with partial pivoting, kept separate from
    /// the LU path used by `homography_from_quad`.
    fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
        let n = b.len();
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
                .unwrap();
            a.swap(col, piv);
            b.swap(col, piv);
            for row in col + 1..n {
                let f = a[row][col] / a[col][col];
                for k in col..n {
                    a[row][k] -= f * a[col][k];
                }
                b[row] -= f * b[col];
            }
        }
        let mut x = vec![0.0; n];
        for row in (0..n).rev() {
            let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
            x[row] = (b[row] - s) / a[row][row];
        }
        x
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(20.0, 20.0, 30.0, 30.0)), 0.0);
        // inter 50, union 150
        let v = iou(&a, &bx(5.0, 0.0, 15.0, 10.0));
        assert!((v - 1.0 / 3.0).abs() <= 1e-12);
    }

    #[test]
    fn iou_of_degenerate_boxes_is_zero() {
        let p = bx(1.0, 1.0, 1.0, 1.0);
        assert_eq!(iou(&p, &p), 0.0);
        let line = bx(0.0, 5.0, 10.0, 5.0);
        assert_eq!(iou(&line, &line), 0.0);
    }

    #[test]
    fn iol_examples() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iol(&a, &bx(50.0, 0.0, 60.0, 10.0)), 1.0);
        let v = iol(&a, &bx(0.0, 5.0, 10.0, 15.0));
        assert!((v - 1.0 / 3.0).abs() <= 1e-12);
        assert_eq!(iol(&a, &bx(0.0, 20.0, 10.0, 30.0)), 0.0);
        let flat = bx(0.0, 3.0, 10.0, 3.0);
        assert_eq!(iol(&flat, &flat), 0.0);
    }

    #[test]
    fn invalid_boxes_rejected() {
        assert!(BBox::new(10.0, 0.0, 0.0, 5.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 5.0).is_err());
        assert!(serde_json::from_str::<BBox>("[3, 0, 1, 1]").is_err());
        let b: BBox = serde_json::from_str("[1, 2, 3, 4]").unwrap();
        assert_eq!(b, bx(1.0, 2.0, 3.0, 4.0));
    }

    #[test]
    fn quad_validation() {
        assert!(RoiQuad::new(pts([(0.0, 0.0), (1.0, 0.0), (2.0, 0.0), (0.0, 1.0)])).is_err());
        // bow-tie
        assert!(RoiQuad::new(pts([(0.0, 0.0), (1.0, 1.0), (1.0, 0.0), (0.0, 1.0)])).is_err());
        // concave dart
        assert!(RoiQuad::new(pts([(0.0, 0.0), (4.0, 0.0), (1.0, 1.0), (0.0, 4.0)])).is_err());
        assert!(RoiQuad::new(pts([(0.0, 0.0), (4.0, 0.0), (3.0, 3.0), (1.0, 3.0)])).is_ok());
    }

    #[test]
    fn unit_square_gives_identity() {
        let q = RoiQuad::rect(1.0, 1.0).unwrap();
        let h = homography_from_quad(&q, 1.0, 1.0).unwrap();
        assert!((h.matrix() - Matrix3::identity()).amax() <= 1e-12);
    }

    #[test]
    fn doubled_square_gives_half_scale() {
        let q = RoiQuad::new(pts([(0.0, 0.0), (2.0, 0.0), (2.0, 2.0), (0.0, 2.0)])).unwrap();
        let h = homography_from_quad(&q, 1.0, 1.0).unwrap();

        // Independent solve of the same 8x8 correspondence system.
        let src = [(0.0, 0.0), (2.0, 0.0), (2.0, 2.0), (0.0, 2.0)];
        let dst = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
        let mut a = Vec::new();
        let mut b = Vec::new();
        for (&(x, y), &(u, v)) in src.iter().zip(dst.iter()) {
            a.push(vec![x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
            b.push(u);
            a.push(vec![0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
            b.push(v);
        }
        let oracle = gauss_solve(a, b);
        let expected = Matrix3::new(
            oracle[0], oracle[1], oracle[2], oracle[3], oracle[4], oracle[5], oracle[6],
            oracle[7], 1.0,
        );
        assert!((h.matrix() - expected).amax() <= 1e-12);
        let scale = Matrix3::new(0.5, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 1.0);
        assert!((h.matrix() - scale).amax() <= 1e-12);

        let p = warp_point(&h, Point::new(2.0, 2.0)).unwrap();
        assert!((p.x - 1.0).abs() <= 1e-12 && (p.y - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn shifted_square_gives_translation() {
        let q = RoiQuad::new(pts([(5.0, 7.0), (6.0, 7.0), (6.0, 8.0), (5.0, 8.0)])).unwrap();
        let h = homography_from_quad(&q, 1.0, 1.0).unwrap();
        let t = Matrix3::new(1.0, 0.0, -5.0, 0.0, 1.0, -7.0, 0.0, 0.0, 1.0);
        assert!((h.matrix() - t).amax() <= 1e-9);
    }

    #[test]
    fn perspective_quad_hits_target_corners() {
        let corners = [(120.0, 40.0), (520.0, 60.0), (630.0, 470.0), (20.0, 440.0)];
        let q = RoiQuad::new(pts(corners)).unwrap();
        let (w, hgt) = (320.0, 960.0);
        let h = homography_from_quad(&q, w, hgt).unwrap();
        let targets = [(0.0, 0.0), (w, 0.0), (w, hgt), (0.0, hgt)];
        for (c, t) in corners.iter().zip(targets) {
            let p = warp_point(&h, Point::from(*c)).unwrap();
            assert!((p.x - t.0).abs() <= 1e-6 && (p.y - t.1).abs() <= 1e-6);
        }
    }

    #[test]
    fn bad_target_dims() {
        let q = RoiQuad::rect(1.0, 1.0).unwrap();
        assert!(matches!(
            homography_from_quad(&q, 0.0, 1.0),
            Err(GeometryError::DegenerateQuad(_))
        ));
    }

    #[test]
    fn warp_point_examples() {
        let id = Homography::identity();
        assert_eq!(warp_point(&id, Point::new(3.0, 4.0)).unwrap(), Point::new(3.0, 4.0));
        let s2 = Homography::new(Matrix3::new(2.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 1.0)).unwrap();
        assert_eq!(warp_point(&s2, Point::new(1.0, 1.0)).unwrap(), Point::new(2.0, 2.0));
        // w = x - 1 vanishes at x = 1
        let proj = Homography::new(Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, -1.0)).unwrap();
        assert!(matches!(
            warp_point(&proj, Point::new(1.0, 0.0)),
            Err(GeometryError::PointAtInfinity(..))
        ));
        assert!(warp_bbox(&proj, &bx(1.0, 0.0, 2.0, 1.0)).is_err());
    }

    #[test]
    fn warp_bbox_examples() {
        let b = bx(1.0, 1.0, 2.0, 2.0);
        assert_eq!(warp_bbox(&Homography::identity(), &b).unwrap(), b);
        let s2 = Homography::new(Matrix3::new(2.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 1.0)).unwrap();
        assert_eq!(warp_bbox(&s2, &b).unwrap(), bx(2.0, 2.0, 4.0, 4.0));
        // (x, y) -> (-y, x)
        let rot = Homography::new(Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0)).unwrap();
        let w = warp_bbox(&rot, &bx(0.0, 0.0, 2.0, 1.0)).unwrap();
        assert_eq!(w, bx(-1.0, 0.0, 0.0, 2.0));
    }

    #[test]
    fn singular_matrix_rejected() {
        assert!(Homography::new(Matrix3::new(1.0, 2.0, 0.0, 2.0, 4.0, 0.0, 0.0, 0.0, 1.0)).is_err());
        assert!(Homography::new(Matrix3::zeros()).is_err());
    }

    #[test]
    fn clip_to_bounds() {
        let b = bx(-10.0, 5.0, 20.0, 120.0);
        assert_eq!(b.clip_to(100.0, 100.0).unwrap(), bx(0.0, 5.0, 20.0, 100.0));
        assert!(bx(101.0, 0.0, 150.0, 10.0).clip_to(100.0, 100.0).is_none());
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-100.0..100.0f64, -100.0..100.0f64, 0.0..80.0f64, 0.0..80.0f64)
            .prop_map(|(x, y, w, h)| bx(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn overlap_ratios_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let (ab, ba) = (iou(&a, &b), iou(&b, &a));
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=1.0).contains(&ab));
            let (ab, ba) = (iol(&a, &b), iol(&b, &a));
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=1.0).contains(&ab));
            if iou(&a, &b) > 0.0 {
                prop_assert!(iol(&a, &b) > 0.0);
            }
        }

        #[test]
        fn self_overlap_is_one(a in arb_box()) {
            if a.area() > 0.0 {
                prop_assert_eq!(iou(&a, &a), 1.0);
            }
            if a.height() > 0.0 {
                prop_assert_eq!(iol(&a, &a), 1.0);
            }
        }

        #[test]
        fn warp_round_trips(
            m in prop::array::uniform8(-1.0..1.0f64),
            x in -50.0..50.0f64,
            y in -50.0..50.0f64,
        ) {
            let mat = Matrix3::new(
                1.0 + m[0], m[1], 10.0 * m[2],
                m[3], 1.0 + m[4], 10.0 * m[5],
                1e-3 * m[6], 1e-3 * m[7], 1.0,
            );
            let Ok(h) = Homography::new(mat) else { return Ok(()) };
            prop_assume!(h.matrix().determinant().abs() > 1e-3);
            let inv = h.inverse().unwrap();
            let p = Point::new(x, y);
            if let Ok(q) = warp_point(&h, p) {
                let back = warp_point(&inv, q).unwrap();
                prop_assert!((back.x - x).abs() <= 1e-9 && (back.y - y).abs() <= 1e-9);
            }
        }
    }
}
