//! Camera height model, person footprints and platform zones.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::yolox::{BoundingBox, Detection};

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid zone {name:?}: {reason}")]
    InvalidZone { name: String, reason: String },
}

/// Mounted camera: height above the platform and the distance along the
/// optical axis to where it meets the ground.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    #[serde(rename = "height_m")]
    pub camera_height_m: f64,
    #[serde(rename = "z0_m")]
    pub optical_axis_ground_m: f64,
}

impl CameraModel {
    pub fn new(camera_height_m: f64, optical_axis_ground_m: f64) -> Result<Self, GeometryError> {
        let cam = Self {
            camera_height_m,
            optical_axis_ground_m,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.camera_height_m > 0.0 && self.camera_height_m.is_finite()) {
            return Err(GeometryError::Domain(format!(
                "camera height {} must be positive",
                self.camera_height_m
            )));
        }
        if !(self.optical_axis_ground_m > 0.0 && self.optical_axis_ground_m.is_finite()) {
            return Err(GeometryError::Domain(format!(
                "optical-axis ground distance {} must be positive",
                self.optical_axis_ground_m
            )));
        }
        Ok(())
    }
}

/// Metric inputs for one height estimate.
///
/// The ray from the camera through the subject's head meets the ground at a
/// point X. `ground_hit_m` (a) is the camera-to-X distance along that ray and
/// `head_dist_m` (b) the camera-to-head distance along it. Projected onto the
/// optical axis the same ratio appears as `axial_dist_m` (z) over the axis
/// ground distance z0, so either pair determines the height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum HeightQuery {
    Ray { ground_hit_m: f64, head_dist_m: f64 },
    Axial { axial_dist_m: f64 },
}

impl HeightQuery {
    pub fn estimate(&self, camera: &CameraModel) -> Result<f64, GeometryError> {
        match *self {
            HeightQuery::Ray {
                ground_hit_m,
                head_dist_m,
            } => estimate_height(camera, ground_hit_m, head_dist_m),
            HeightQuery::Axial { axial_dist_m } => estimate_height_axial(camera, axial_dist_m),
        }
    }
}

/// `h = Hc * (1 - b / a)`
pub fn estimate_height(camera: &CameraModel, a: f64, b: f64) -> Result<f64, GeometryError> {
    if !(a > 0.0) || !a.is_finite() {
        return Err(GeometryError::Domain(format!(
            "ground-hit distance a={a} must be positive"
        )));
    }
    if !(0.0..=a).contains(&b) {
        return Err(GeometryError::Domain(format!(
            "head distance b={b} must lie in [0, a={a}]"
        )));
    }
    Ok(camera.camera_height_m * (1.0 - b / a))
}

/// `h = Hc * (1 - z / z0)`
pub fn estimate_height_axial(camera: &CameraModel, z: f64) -> Result<f64, GeometryError> {
    let z0 = camera.optical_axis_ground_m;
    if !(0.0..=z0).contains(&z) {
        return Err(GeometryError::Domain(format!(
            "axial distance z={z} must lie in [0, z0={z0}]"
        )));
    }
    Ok(camera.camera_height_m * (1.0 - z / z0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundPoint {
    pub x: f64,
    pub y: f64,
}

/// Bottom-center of the detection's box.
pub fn ground_point(detection: &Detection) -> GroundPoint {
    footprint(&detection.bbox)
}

pub fn footprint(b: &BoundingBox) -> GroundPoint {
    GroundPoint {
        x: (b.x1 + b.x2) / 2.0,
        y: b.y2,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ZoneKind {
    Danger,
    Risk,
    Monitor,
}

impl ZoneKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ZoneKind::Danger => "DANGER",
            ZoneKind::Risk => "RISK",
            ZoneKind::Monitor => "MONITOR",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Zone {
    pub name: String,
    pub kind: ZoneKind,
    pub polygon: Vec<[f64; 2]>,
}

impl Zone {
    pub fn new(
        name: impl Into<String>,
        kind: ZoneKind,
        polygon: Vec<[f64; 2]>,
    ) -> Result<Self, GeometryError> {
        let z = Self {
            name: name.into(),
            kind,
            polygon,
        };
        z.validate()?;
        Ok(z)
    }

    /// Axis-aligned rectangle zone.
    pub fn rect(
        name: impl Into<String>,
        kind: ZoneKind,
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
    ) -> Self {
        Self {
            name: name.into(),
            kind,
            polygon: vec![[x1, y1], [x2, y1], [x2, y2], [x1, y2]],
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |reason: &str| GeometryError::InvalidZone {
            name: self.name.clone(),
            reason: reason.to_string(),
        };
        let p = &self.polygon;
        if p.len() < 3 {
            return Err(bad("needs at least 3 vertices"));
        }
        if p.iter().flatten().any(|v| !v.is_finite()) {
            return Err(bad("vertex is not finite"));
        }
        if polygon_area(p) <= 0.0 {
            return Err(bad("polygon has zero area"));
        }
        let n = p.len();
        for i in 0..n {
            for j in i + 1..n {
                let adjacent = j == i + 1 || (i == 0 && j == n - 1);
                if !adjacent && segments_intersect(p[i], p[(i + 1) % n], p[j], p[(j + 1) % n]) {
                    return Err(bad("polygon self-intersects"));
                }
            }
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        polygon_area(&self.polygon)
    }

    pub fn contains(&self, p: GroundPoint) -> bool {
        point_in_zone(p, self)
    }

    /// Area of the zone covered by an axis-aligned box.
    pub fn overlap_area(&self, b: &BoundingBox) -> f64 {
        polygon_area(&clip_to_rect(&self.polygon, b))
    }
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn on_segment(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> bool {
    let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
    let tol = 1e-9 * len.max(1.0);
    cross(a, b, p).abs() <= tol * len.max(1.0)
        && p[0] >= a[0].min(b[0]) - tol
        && p[0] <= a[0].max(b[0]) + tol
        && p[1] >= a[1].min(b[1]) - tol
        && p[1] <= a[1].max(b[1]) + tol
}

fn segments_intersect(p1: [f64; 2], p2: [f64; 2], q1: [f64; 2], q2: [f64; 2]) -> bool {
    let d1 = cross(q1, q2, p1);
    let d2 = cross(q1, q2, p2);
    let d3 = cross(p1, p2, q1);
    let d4 = cross(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    on_segment(p1, q1, q2)
        || on_segment(p2, q1, q2)
        || on_segment(q1, p1, p2)
        || on_segment(q2, p1, p2)
}

/// Even-odd ray casting; points on an edge or vertex count as inside.
pub fn point_in_zone(p: GroundPoint, zone: &Zone) -> bool {
    let poly = &zone.polygon;
    let n = poly.len();
    if n < 3 {
        return false;
    }
    let q = [p.x, p.y];
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if on_segment(q, a, b) {
            return true;
        }
        if (a[1] > q[1]) != (b[1] > q[1]) {
            let x_at = a[0] + (q[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
            if q[0] < x_at {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// Shoelace area (absolute).
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let twice: f64 = poly
        .iter()
        .zip(poly.iter().cycle().skip(1))
        .map(|(a, b)| a[0] * b[1] - b[0] * a[1])
        .sum();
    twice.abs() / 2.0
}

/// Sutherland-Hodgman clip of a simple polygon against a rectangle.
fn clip_to_rect(poly: &[[f64; 2]], r: &BoundingBox) -> Vec<[f64; 2]> {
    // (axis, bound, keep side: true = keep >= bound)
    let planes = [
        (0usize, r.x1, true),
        (0, r.x2, false),
        (1, r.y1, true),
        (1, r.y2, false),
    ];
    let mut out = poly.to_vec();
    for (axis, bound, keep_ge) in planes {
        if out.is_empty() {
            break;
        }
        let inside = |v: &[f64; 2]| {
            if keep_ge {
                v[axis] >= bound
            } else {
                v[axis] <= bound
            }
        };
        let input = std::mem::take(&mut out);
        let mut prev = *input.last().unwrap();
        for cur in input {
            let (ci, pi) = (inside(&cur), inside(&prev));
            if ci != pi {
                let t = (bound - prev[axis]) / (cur[axis] - prev[axis]);
                let mut x = [
                    prev[0] + t * (cur[0] - prev[0]),
                    prev[1] + t * (cur[1] - prev[1]),
                ];
                x[axis] = bound;
                out.push(x);
            }
            if ci {
                out.push(cur);
            }
            prev = cur;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cam(hc: f64, z0: f64) -> CameraModel {
        CameraModel::new(hc, z0).unwrap()
    }

    fn unit_square() -> Zone {
        Zone::new(
            "sq",
            ZoneKind::Danger,
            vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
        )
        .unwrap()
    }

    fn gp(x: f64, y: f64) -> GroundPoint {
        GroundPoint { x, y }
    }

    #[test]
    fn height_examples() {
        assert_eq!(estimate_height(&cam(3.0, 5.0), 3.0, 1.5).unwrap(), 1.5);
        assert_eq!(estimate_height(&cam(3.0, 5.0), 2.0, 2.0).unwrap(), 0.0);
        assert!((estimate_height(&cam(2.5, 5.0), 4.0, 1.0).unwrap() - 1.875).abs() < 1e-15);
        assert!(estimate_height(&cam(3.0, 5.0), 0.0, 0.0).is_err());
        assert!(estimate_height(&cam(3.0, 5.0), 2.0, 2.5).is_err());
        assert!(estimate_height(&cam(3.0, 5.0), 2.0, -0.1).is_err());
    }

    #[test]
    fn axial_examples() {
        let c = cam(2.5, 3.0);
        assert!((estimate_height_axial(&c, 1.2).unwrap() - 1.5).abs() < 1e-15);
        assert_eq!(estimate_height_axial(&c, 3.0).unwrap(), 0.0);
        assert_eq!(estimate_height_axial(&c, 0.0).unwrap(), 2.5);
        assert!(estimate_height_axial(&c, 3.1).is_err());
        assert!(estimate_height_axial(&c, -1.0).is_err());
        assert_eq!(
            HeightQuery::Axial { axial_dist_m: 1.2 }
                .estimate(&c)
                .unwrap(),
            estimate_height_axial(&c, 1.2).unwrap()
        );
    }

    #[test]
    fn camera_rejects_non_positive() {
        assert!(CameraModel::new(0.0, 1.0).is_err());
        assert!(CameraModel::new(1.0, -1.0).is_err());
    }

    #[test]
    fn ground_point_examples() {
        let d = |x1, y1, x2, y2| Detection {
            bbox: BoundingBox::new(x1, y1, x2, y2),
            score: 1.0,
            class_id: 0,
        };
        assert_eq!(ground_point(&d(10.0, 10.0, 30.0, 50.0)), gp(20.0, 50.0));
        assert_eq!(ground_point(&d(5.0, 5.0, 5.0, 5.0)), gp(5.0, 5.0));
        assert_eq!(ground_point(&d(0.0, 0.0, 7.0, 3.0)), gp(3.5, 3.0));
    }

    /// Winding number with an explicit on-segment check, as an oracle.
    fn winding_contains(p: GroundPoint, poly: &[[f64; 2]]) -> bool {
        let n = poly.len();
        for i in 0..n {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            let along = (p.x - a[0]) * (b[0] - a[0]) + (p.y - a[1]) * (b[1] - a[1]);
            let len2 = (b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2);
            if cross(a, b, [p.x, p.y]) == 0.0 && along >= 0.0 && along <= len2 {
                return true;
            }
        }
        let mut wn = 0i32;
        for i in 0..n {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            if a[1] <= p.y {
                if b[1] > p.y && cross(a, b, [p.x, p.y]) > 0.0 {
                    wn += 1;
                }
            } else if b[1] <= p.y && cross(a, b, [p.x, p.y]) < 0.0 {
                wn -= 1;
            }
        }
        wn != 0
    }

    #[test]
    fn point_in_square() {
        let sq = unit_square();
        for (p, expect) in [
            (gp(0.5, 0.5), true),
            (gp(2.0, 2.0), false),
            (gp(1.0, 0.5), true),
        ] {
            assert_eq!(point_in_zone(p, &sq), expect, "{p:?}");
            assert_eq!(winding_contains(p, &sq.polygon), expect, "{p:?}");
        }
        assert!(point_in_zone(gp(0.0, 0.0), &sq));
        assert!(point_in_zone(gp(0.5, 1.0), &sq));
        assert!(!point_in_zone(gp(1.0000001, 0.5), &sq));
    }

    #[test]
    fn zone_validation() {
        assert!(Zone::new("two", ZoneKind::Risk, vec![[0.0, 0.0], [1.0, 1.0]]).is_err());
        let bowtie = vec![[0.0, 0.0], [2.0, 2.0], [2.0, 0.0], [0.0, 2.0]];
        assert!(Zone::new("bow", ZoneKind::Risk, bowtie).is_err());
        assert!(Zone::new(
            "flat",
            ZoneKind::Risk,
            vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]
        )
        .is_err());
        let l_shape = vec![
            [0.0, 0.0],
            [4.0, 0.0],
            [4.0, 1.0],
            [1.0, 1.0],
            [1.0, 4.0],
            [0.0, 4.0],
        ];
        let z = Zone::new("L", ZoneKind::Monitor, l_shape).unwrap();
        assert_eq!(z.area(), 7.0);
        assert!(!z.contains(gp(2.0, 2.0)));
        assert!(z.contains(gp(0.5, 3.0)));
    }

    #[test]
    fn overlap_area_of_rect_and_concave_zone() {
        let z = Zone::rect("r", ZoneKind::Risk, 0.0, 0.0, 10.0, 4.0);
        assert_eq!(
            z.overlap_area(&BoundingBox::new(-5.0, -5.0, 20.0, 20.0)),
            40.0
        );
        assert_eq!(z.overlap_area(&BoundingBox::new(0.0, 0.0, 5.0, 4.0)), 20.0);
        assert_eq!(z.overlap_area(&BoundingBox::new(20.0, 0.0, 30.0, 4.0)), 0.0);
        let l = Zone::new(
            "L",
            ZoneKind::Risk,
            vec![
                [0.0, 0.0],
                [4.0, 0.0],
                [4.0, 1.0],
                [1.0, 1.0],
                [1.0, 4.0],
                [0.0, 4.0],
            ],
        )
        .unwrap();
        assert!((l.overlap_area(&BoundingBox::new(0.0, 0.0, 2.0, 2.0)) - 3.0).abs() < 1e-12);
    }

    fn arb_poly() -> impl Strategy<Value = Vec<[f64; 2]>> {
        // star-shaped around the origin: strictly increasing angles keep it simple
        prop::collection::vec((0.2..1.0f64, 1.0..10.0f64), 3..9).prop_map(|v| {
            let total: f64 = v.iter().map(|(s, _)| s).sum();
            let mut angle = 0.0;
            v.iter()
                .map(|(step, r)| {
                    angle += step / total * std::f64::consts::TAU * 0.999;
                    [r * angle.cos(), r * angle.sin()]
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn height_forms_agree(hc in 0.5..10.0f64, a in 0.1..50.0f64, frac in 0.0..=1.0f64, z0 in 0.1..50.0f64) {
            let c = cam(hc, z0);
            let b = a * frac;
            let z = z0 * (b / a);
            let h1 = estimate_height(&c, a, b).unwrap();
            let h2 = estimate_height_axial(&c, z.min(z0)).unwrap();
            prop_assert!((h1 - h2).abs() <= 1e-12 * hc);
            prop_assert!((0.0..=hc).contains(&h1));
        }

        #[test]
        fn height_decreasing_in_b(hc in 0.5..10.0f64, a in 0.1..50.0f64, f1 in 0.0..=1.0f64, f2 in 0.0..=1.0f64) {
            let c = cam(hc, 1.0);
            let (lo, hi) = if f1 <= f2 { (f1, f2) } else { (f2, f1) };
            prop_assert!(estimate_height(&c, a, a * lo).unwrap() >= estimate_height(&c, a, a * hi).unwrap());
        }

        #[test]
        fn containment_invariant_under_rotation_and_reversal(
            poly in arb_poly(), px in -12.0..12.0f64, py in -12.0..12.0f64, shift in 0usize..9,
        ) {
            let p = gp(px, py);
            let z = Zone { name: "p".into(), kind: ZoneKind::Danger, polygon: poly.clone() };
            let base = point_in_zone(p, &z);
            prop_assert_eq!(base, winding_contains(p, &poly));
            let mut rotated = poly.clone();
            rotated.rotate_left(shift % poly.len());
            prop_assert_eq!(point_in_zone(p, &Zone { polygon: rotated, ..z.clone() }), base);
            let mut reversed = poly;
            reversed.reverse();
            prop_assert_eq!(point_in_zone(p, &Zone { polygon: reversed, ..z }), base);
        }

        #[test]
        fn ground_point_on_bottom_edge(x in -100.0..100.0f64, y in -100.0..100.0f64, w in 0.0..50.0f64, h in 0.0..50.0f64) {
            let b = BoundingBox::new(x, y, x + w, y + h);
            let g = footprint(&b);
            prop_assert_eq!(g.y, b.y2);
            prop_assert!(g.x >= b.x1 && g.x <= b.x2);
        }
    }
}
