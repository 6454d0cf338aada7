//! Planar trail geometry and the vehicle's state relative to it.
//!
//! Sign conventions: `d > 0` means the vehicle is left of the trail
//! direction, `psi > 0` means it faces left of the trail direction.

use std::fmt::Write as _;
use std::str::FromStr;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{wrap_angle, Frame, Pose3};

pub type Point2 = Vector2<f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trail {
    centerline: Vec<Point2>,
    width: f64,
    /// Arc length at the start of each centerline vertex.
    cumulative: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelativeState {
    /// Signed lateral offset, meters, `+` = left of trail direction.
    pub d: f64,
    /// Heading error, radians in `(-π, π]`, `+` = facing left of trail direction.
    pub psi: f64,
    /// Arc length of the closest centerline point.
    pub s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub s: f64,
    pub d: f64,
    pub heading: f64,
    pub closest: Point2,
}

impl Trail {
    pub fn new(centerline: Vec<Point2>, width: f64) -> Result<Self> {
        if centerline.len() < 2 {
            return Err(Error::InvalidTrail(format!(
                "centerline needs at least 2 points, got {}",
                centerline.len()
            )));
        }
        if !(width.is_finite() && width > 0.0) {
            return Err(Error::InvalidTrail(format!("width must be positive, got {width}")));
        }
        if centerline.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidTrail("non-finite waypoint".into()));
        }
        let mut cumulative = Vec::with_capacity(centerline.len());
        cumulative.push(0.0);
        for (i, w) in centerline.windows(2).enumerate() {
            let len = (w[1] - w[0]).norm();
            if len == 0.0 {
                return Err(Error::InvalidTrail(format!(
                    "waypoints {i} and {} coincide",
                    i + 1
                )));
            }
            cumulative.push(cumulative[i] + len);
        }
        Ok(Self {
            centerline,
            width,
            cumulative,
        })
    }

    pub fn centerline(&self) -> &[Point2] {
        &self.centerline
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().expect("validated non-empty")
    }

    /// Number of interior vertices where the heading changes.
    pub fn corner_count(&self) -> usize {
        self.centerline
            .windows(3)
            .filter(|w| {
                let a = w[1] - w[0];
                let b = w[2] - w[1];
                (a.x * b.y - a.y * b.x).abs() > 1e-12 * a.norm() * b.norm()
            })
            .count()
    }

    pub fn segment_heading(&self, i: usize) -> f64 {
        let v = self.centerline[i + 1] - self.centerline[i];
        v.y.atan2(v.x)
    }

    /// Point and tangent heading at arc length `s` (clamped to the trail).
    pub fn point_at(&self, s: f64) -> (Point2, f64) {
        let s = s.clamp(0.0, self.length());
        let seg = match self.cumulative.iter().rposition(|&c| c <= s) {
            Some(i) if i + 1 < self.centerline.len() => i,
            _ => self.centerline.len() - 2,
        };
        let a = self.centerline[seg];
        let b = self.centerline[seg + 1];
        let len = self.cumulative[seg + 1] - self.cumulative[seg];
        let t = ((s - self.cumulative[seg]) / len).clamp(0.0, 1.0);
        (a + (b - a) * t, self.segment_heading(seg))
    }

    pub fn project(&self, position: &Point2) -> Projection {
        let mut best: Option<(f64, Projection)> = None;
        for (i, w) in self.centerline.windows(2).enumerate() {
            let (a, b) = (w[0], w[1]);
            let ab = b - a;
            let len2 = ab.norm_squared();
            let t = ((position - a).dot(&ab) / len2).clamp(0.0, 1.0);
            let closest = a + ab * t;
            let offset = position - closest;
            let dist = offset.norm();
            // strict improvement keeps the smaller arc length on ties
            if best.as_ref().is_some_and(|(bd, _)| dist >= bd - 1e-12) {
                continue;
            }
            let cross = ab.x * offset.y - ab.y * offset.x;
            let d = if cross < 0.0 { -dist } else { dist };
            best = Some((
                dist,
                Projection {
                    s: self.cumulative[i] + t * len2.sqrt(),
                    d,
                    heading: ab.y.atan2(ab.x),
                    closest,
                },
            ));
        }
        best.expect("trail has at least one segment").1
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "width {}", self.width).unwrap();
        for p in &self.centerline {
            writeln!(out, "{} {}", p.x, p.y).unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut width = None;
        let mut points = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let first = fields.next().expect("non-empty line");
            if first == "width" {
                if width.is_some() {
                    return Err(Error::parse(line_no, "duplicate width header"));
                }
                let w = fields
                    .next()
                    .ok_or_else(|| Error::parse(line_no, "missing width value"))?;
                width = Some(parse_f64(w, line_no)?);
                if fields.next().is_some() {
                    return Err(Error::parse(line_no, "trailing fields after width"));
                }
                continue;
            }
            if width.is_none() {
                return Err(Error::parse(line_no, "expected `width <meters>` header first"));
            }
            let y = fields
                .next()
                .ok_or_else(|| Error::parse(line_no, "expected `x y`"))?;
            if fields.next().is_some() {
                return Err(Error::parse(line_no, "expected exactly two coordinates"));
            }
            points.push(Point2::new(parse_f64(first, line_no)?, parse_f64(y, line_no)?));
        }
        let width = width.ok_or_else(|| Error::parse(0, "missing width header"))?;
        Trail::new(points, width)
    }

    /// Rigidly rotates and translates the whole trail.
    pub fn transformed(&self, rotation: f64, translation: Point2) -> Result<Self> {
        let (s, c) = rotation.sin_cos();
        let pts = self
            .centerline
            .iter()
            .map(|p| Point2::new(c * p.x - s * p.y, s * p.x + c * p.y) + translation)
            .collect();
        Trail::new(pts, self.width)
    }
}

fn parse_f64(s: &str, line: usize) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|e| Error::parse(line, format!("`{s}`: {e}")))
}

pub fn project_to_centerline(trail: &Trail, position: &Point2) -> (f64, f64, f64) {
    let p = trail.project(position);
    (p.s, p.d, p.heading)
}

pub fn relative_state(trail: &Trail, pose: &Pose3) -> Result<RelativeState> {
    if pose.frame != Frame::Enu {
        return Err(Error::FrameMismatch {
            expected: Frame::Enu,
            found: pose.frame,
        });
    }
    let proj = trail.project(&Point2::new(pose.position.x, pose.position.y));
    Ok(RelativeState {
        d: proj.d,
        psi: wrap_angle(pose.yaw - proj.heading),
        s: proj.s,
    })
}

/// Boundary inclusive: `|d| == width / 2` is still on the trail.
pub fn is_off_trail(trail: &Trail, pose: &Pose3) -> Result<bool> {
    Ok(relative_state(trail, pose)?.d.abs() > trail.width() / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioKind {
    Straight100,
    Zigzag250,
    Long1k,
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "straight100" => Ok(Self::Straight100),
            "zigzag250" => Ok(Self::Zigzag250),
            "long1k" => Ok(Self::Long1k),
            other => Err(Error::UnknownScenario(other.to_string())),
        }
    }
}

impl ScenarioKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Straight100 => "straight100",
            Self::Zigzag250 => "zigzag250",
            Self::Long1k => "long1k",
        }
    }
}

/// Bend angle at every zigzag corner.
pub const ZIGZAG_BEND: f64 = std::f64::consts::PI / 6.0;

/// Polyline of `segments` equal legs whose headings alternate around +x,
/// giving `segments - 1` bends of alternating sign and magnitude `ZIGZAG_BEND`.
fn zigzag(total_length: f64, segments: usize) -> Vec<Point2> {
    let leg = total_length / segments as f64;
    let mut pts = vec![Point2::zeros()];
    let mut heading = -ZIGZAG_BEND / 2.0;
    for _ in 0..segments {
        let last = *pts.last().unwrap();
        pts.push(last + leg * Point2::new(heading.cos(), heading.sin()));
        heading = -heading;
    }
    pts
}

pub fn make_scenario(kind: ScenarioKind) -> Trail {
    let (pts, width) = match kind {
        ScenarioKind::Straight100 => (vec![Point2::zeros(), Point2::new(100.0, 0.0)], 2.0),
        ScenarioKind::Zigzag250 => (zigzag(250.0, 7), 1.5),
        ScenarioKind::Long1k => (zigzag(1000.0, 20), 1.5),
    };
    Trail::new(pts, width).expect("built-in scenarios are valid")
}

pub fn make_scenario_by_name(name: &str) -> Result<Trail> {
    Ok(make_scenario(name.parse()?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn straight() -> Trail {
        Trail::new(vec![Point2::new(0.0, 0.0), Point2::new(10.0, 0.0)], 2.0).unwrap()
    }

    #[test]
    fn projection_examples() {
        let t = straight();
        let (s, d, h) = project_to_centerline(&t, &Point2::new(5.0, 0.4));
        assert_abs_diff_eq!(s, 5.0);
        assert_abs_diff_eq!(d, 0.4);
        assert_eq!(h, 0.0);
        let (_, d, _) = project_to_centerline(&t, &Point2::new(5.0, -1.0));
        assert_abs_diff_eq!(d, -1.0);
        let (s, _, _) = project_to_centerline(&t, &Point2::new(14.0, 0.3));
        assert_eq!(s, t.length());
    }

    #[test]
    fn corner_tie_prefers_smaller_arc_length() {
        // right-angle corner at (10, 0); the outer diagonal point is equidistant from both legs
        let t = Trail::new(
            vec![Point2::new(0.0, 0.0), Point2::new(10.0, 0.0), Point2::new(10.0, 10.0)],
            2.0,
        )
        .unwrap();
        let p = t.project(&Point2::new(11.0, -1.0));
        assert_abs_diff_eq!(p.s, 10.0);
        assert_eq!(p.heading, 0.0);
    }

    #[test]
    fn relative_state_examples() {
        let t = straight();
        let rs = relative_state(&t, &Pose3::enu(3.0, 0.0, 2.0, 0.0)).unwrap();
        assert_eq!((rs.d, rs.psi), (0.0, 0.0));
        let rs = relative_state(&t, &Pose3::enu(3.0, 0.0, 2.0, 30f64.to_radians())).unwrap();
        assert_abs_diff_eq!(rs.psi, 30f64.to_radians());
        let rs = relative_state(&t, &Pose3::enu(5.0, 0.4, 2.0, (-15f64).to_radians())).unwrap();
        assert_abs_diff_eq!(rs.d, 0.4);
        assert_abs_diff_eq!(rs.psi, (-15f64).to_radians(), epsilon = 1e-15);

        let ned = Pose3::new(crate::geo::Vec3::zeros(), 0.0, Frame::Ned);
        assert!(relative_state(&t, &ned).is_err());
    }

    #[test]
    fn off_trail_boundary_inclusive() {
        let t = straight();
        assert!(!is_off_trail(&t, &Pose3::enu(5.0, 0.9, 2.0, 0.0)).unwrap());
        assert!(is_off_trail(&t, &Pose3::enu(5.0, 1.1, 2.0, 0.0)).unwrap());
        assert!(!is_off_trail(&t, &Pose3::enu(5.0, 1.0, 2.0, 0.0)).unwrap());
        assert!(!is_off_trail(&t, &Pose3::enu(5.0, -1.0, 2.0, 0.0)).unwrap());
    }

    #[test]
    fn scenarios() {
        let s = make_scenario(ScenarioKind::Straight100);
        assert_eq!(s.centerline().len(), 2);
        assert_abs_diff_eq!(s.length(), 100.0, epsilon = 1e-9);
        assert_eq!(s.width(), 2.0);

        let z = make_scenario(ScenarioKind::Zigzag250);
        assert_eq!(z.corner_count(), 6);
        assert!((z.length() - 250.0).abs() <= 0.5);
        assert_eq!(z.width(), 1.5);
        for i in 0..z.centerline().len() - 2 {
            let bend = wrap_angle(z.segment_heading(i + 1) - z.segment_heading(i));
            assert_abs_diff_eq!(bend.abs(), ZIGZAG_BEND, epsilon = 1e-12);
        }

        let l = make_scenario_by_name("long1k").unwrap();
        assert_abs_diff_eq!(l.length(), 1000.0, epsilon = 1e-9);
        assert_eq!(l.width(), 1.5);
        assert!(l.corner_count() > 6);

        assert!(matches!(make_scenario_by_name("loop"), Err(Error::UnknownScenario(_))));
    }

    #[test]
    fn invalid_trails() {
        assert!(Trail::new(vec![Point2::zeros()], 1.0).is_err());
        assert!(Trail::new(vec![Point2::zeros(), Point2::zeros()], 1.0).is_err());
        assert!(Trail::new(vec![Point2::zeros(), Point2::new(1.0, 0.0)], 0.0).is_err());
    }

    #[test]
    fn text_format() {
        let z = make_scenario(ScenarioKind::Zigzag250);
        let back = Trail::from_text(&z.to_text()).unwrap();
        assert_eq!(back, z);

        let t = Trail::from_text("# demo\nwidth 2\n0 0\n10 0  # end\n").unwrap();
        assert_eq!(t.length(), 10.0);
        assert!(Trail::from_text("0 0\n1 0\n").is_err());
        assert!(Trail::from_text("width 2\n0 0 0\n1 0\n").is_err());
        assert!(Trail::from_text("width 2\n0 x\n1 0\n").is_err());
    }

    fn brute_force_distance(trail: &Trail, p: &Point2) -> f64 {
        let step = 1e-3;
        let n = (trail.length() / step).ceil() as usize;
        (0..=n)
            .map(|k| (trail.point_at(k as f64 * step).0 - p).norm())
            .fold(f64::INFINITY, f64::min)
    }

    fn arb_trail() -> impl Strategy<Value = Trail> {
        prop::collection::vec((-3.0..3.0f64, -3.0..3.0f64), 2..5).prop_filter_map(
            "short segments",
            |pts| {
                let pts: Vec<Point2> = pts.into_iter().map(|(x, y)| Point2::new(x, y)).collect();
                if pts.windows(2).any(|w| (w[1] - w[0]).norm() < 0.1) {
                    return None;
                }
                Trail::new(pts, 1.0).ok()
            },
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn offset_matches_brute_force_distance(trail in arb_trail(), x in -4.0..4.0f64, y in -4.0..4.0f64) {
            let p = Point2::new(x, y);
            let d = trail.project(&p).d.abs();
            let brute = brute_force_distance(&trail, &p);
            // dense sampling overestimates by at most half the sample spacing
            prop_assert!(d <= brute + 1e-12);
            prop_assert!(brute - d <= 1e-3);
        }
    }

    proptest! {
        #[test]
        fn relative_state_is_rotation_equivariant(
            trail in arb_trail(), x in -4.0..4.0f64, y in -4.0..4.0f64, yaw in -3.0..3.0f64,
            rot in -3.1..3.1f64, tx in -20.0..20.0f64, ty in -20.0..20.0f64,
        ) {
            let moved = trail.transformed(rot, Point2::new(tx, ty)).unwrap();
            let (s, c) = rot.sin_cos();
            let pose = Pose3::enu(x, y, 0.0, yaw);
            let moved_pose = Pose3::enu(c * x - s * y + tx, s * x + c * y + ty, 0.0, yaw + rot);
            let a = relative_state(&trail, &pose).unwrap();
            let b = relative_state(&moved, &moved_pose).unwrap();
            // a near-tie between segments can flip under rounding; skip those
            let proj = trail.project(&Point2::new(x, y));
            let tied = trail.centerline().windows(2).filter(|w| {
                let ab = w[1] - w[0];
                let t = ((Point2::new(x, y) - w[0]).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
                ((w[0] + ab * t - Point2::new(x, y)).norm() - proj.d.abs()).abs() < 1e-7
            }).count() > 1;
            prop_assume!(!tied);
            prop_assert!((a.s - b.s).abs() < 1e-9);
            prop_assert!((a.d - b.d).abs() < 1e-9);
            prop_assert!(wrap_angle(a.psi - b.psi).abs() < 1e-9);
        }

        #[test]
        fn moving_left_increases_offset(trail in arb_trail(), s_frac in 0.05..0.95f64, off in -0.3..0.3f64) {
            let (p, heading) = trail.point_at(s_frac * trail.length());
            let left = Point2::new(-heading.sin(), heading.cos());
            let base = p + left * off;
            let proj = trail.project(&base);
            prop_assume!((proj.heading - heading).abs() < 1e-12);
            let moved = trail.project(&(base + left * 0.1));
            prop_assume!((moved.heading - heading).abs() < 1e-12);
            prop_assert!(moved.d > proj.d);
        }
    }
}
