//! Steering from soft trail predictions, waypoint generation and command arbitration.
//!
//! The turn angle is counterclockwise-positive:
//!
//! ```text
//! α = β1 (y_right^vo − y_left^vo) + β2 (y_right^lo − y_left^lo)
//! ```
//!
//! Waypoints are planned in ENU and emitted in NED.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{enu_to_ned, wrap_angle, yaw_enu_to_ned, Frame, Pose3, Vec3};
use crate::perception::TrailEstimate;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlConfig {
    /// View-orientation gain, radians.
    pub beta1: f64,
    /// Lateral-offset gain, radians.
    pub beta2: f64,
    /// Planar distance to the generated waypoint, meters.
    pub lookahead: f64,
    /// Fixed flight height, meters.
    pub altitude: f64,
    /// m/s.
    pub speed: f64,
    /// Estimates older than this many seconds are ignored.
    pub staleness_limit: f64,
    /// Bounding-box area fraction above which the vehicle hovers.
    pub detection_area_threshold: f64,
    /// Restricts the hover override to these classes; `None` means any class.
    pub detection_classes: Option<Vec<String>>,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            beta1: 10f64.to_radians(),
            beta2: 10f64.to_radians(),
            lookahead: 2.0,
            altitude: 2.0,
            speed: 2.0,
            staleness_limit: 0.5,
            detection_area_threshold: 0.15,
            detection_classes: None,
        }
    }
}

impl ControlConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = |v: f64| v.is_finite() && v >= 0.0;
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !nonneg(self.beta1) {
            return Err(Error::param("beta1", "must be >= 0"));
        }
        if !nonneg(self.beta2) {
            return Err(Error::param("beta2", "must be >= 0"));
        }
        if !pos(self.lookahead) {
            return Err(Error::param("lookahead", "must be > 0"));
        }
        if !self.altitude.is_finite() {
            return Err(Error::param("altitude", "must be finite"));
        }
        if !nonneg(self.speed) {
            return Err(Error::param("speed", "must be >= 0"));
        }
        if !pos(self.staleness_limit) {
            return Err(Error::param("staleness_limit", "must be > 0"));
        }
        if !(self.detection_area_threshold > 0.0 && self.detection_area_threshold < 1.0) {
            return Err(Error::param("detection_area_threshold", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// An object detection with a normalized `(x_min, y_min, x_max, y_max)` box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_name: String,
    pub bbox: [f64; 4],
    pub confidence: f64,
}

impl Detection {
    pub fn new(class_name: impl Into<String>, bbox: [f64; 4], confidence: f64) -> Result<Self> {
        if bbox.iter().any(|v| !(0.0..=1.0).contains(v)) || bbox[0] >= bbox[2] || bbox[1] >= bbox[3] {
            return Err(Error::param("bbox", format!("{bbox:?} is not a normalized box")));
        }
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::param("confidence", "must lie in [0, 1]"));
        }
        Ok(Self {
            class_name: class_name.into(),
            bbox,
            confidence,
        })
    }

    /// Fraction of the image covered by the box.
    pub fn area(&self) -> f64 {
        (self.bbox[2] - self.bbox[0]) * (self.bbox[3] - self.bbox[1])
    }
}

/// Operator setpoint forwarded unchanged, NED.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeleopCommand {
    pub position: Vec3,
    pub yaw: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CommandKind {
    /// NED position and NED yaw.
    Waypoint { position: Vec3, yaw: f64 },
    Hover,
    Teleop(TeleopCommand),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CommandSource {
    Dnn,
    DetectionOverride,
    Teleop,
}

impl CommandSource {
    pub fn name(self) -> &'static str {
        match self {
            CommandSource::Dnn => "dnn",
            CommandSource::DetectionOverride => "detection_override",
            CommandSource::Teleop => "teleop",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Command {
    pub kind: CommandKind,
    pub source: CommandSource,
}

impl Command {
    pub fn hover(source: CommandSource) -> Self {
        Self {
            kind: CommandKind::Hover,
            source,
        }
    }

    pub fn is_hover(&self) -> bool {
        matches!(self.kind, CommandKind::Hover)
    }

    /// Target setpoint in NED, if the command moves the vehicle.
    pub fn setpoint_ned(&self) -> Option<(Vec3, f64)> {
        match self.kind {
            CommandKind::Waypoint { position, yaw } => Some((position, yaw)),
            CommandKind::Teleop(t) => Some((t.position, t.yaw)),
            CommandKind::Hover => None,
        }
    }
}

pub const COMMAND_CSV_HEADER: &str = "t,source,kind,x_ned,y_ned,z_ned,yaw_ned";

/// One command log row; hover rows leave the setpoint columns empty.
pub fn command_csv_row(t: f64, cmd: &Command) -> String {
    let kind = match cmd.kind {
        CommandKind::Waypoint { .. } => "waypoint",
        CommandKind::Hover => "hover",
        CommandKind::Teleop(_) => "teleop",
    };
    let mut row = format!("{t},{},{kind}", cmd.source.name());
    match cmd.setpoint_ned() {
        Some((p, yaw)) => write!(row, ",{},{},{},{}", p.x, p.y, p.z, yaw).unwrap(),
        None => row.push_str(",,,,"),
    }
    row
}

pub fn turn_angle(est: &TrailEstimate, cfg: &ControlConfig) -> f64 {
    cfg.beta1 * (est.vo.p_right() - est.vo.p_left()) + cfg.beta2 * (est.lo.p_right() - est.lo.p_left())
}

/// Planar ENU target `lookahead` meters away at `yaw + alpha`, at the fixed altitude.
pub fn waypoint_enu(pose: &Pose3, alpha: f64, cfg: &ControlConfig) -> (Vec3, f64) {
    let heading = pose.yaw + alpha;
    let (s, c) = heading.sin_cos();
    let position = Vec3::new(
        pose.position.x + cfg.lookahead * c,
        pose.position.y + cfg.lookahead * s,
        cfg.altitude,
    );
    (position, wrap_angle(heading))
}

pub fn make_waypoint(pose: &Pose3, alpha: f64, cfg: &ControlConfig) -> Result<Command> {
    if pose.frame != Frame::Enu {
        return Err(Error::FrameMismatch {
            expected: Frame::Enu,
            found: pose.frame,
        });
    }
    let (position, yaw) = waypoint_enu(pose, alpha, cfg);
    Ok(Command {
        kind: CommandKind::Waypoint {
            position: enu_to_ned(&position),
            yaw: yaw_enu_to_ned(yaw),
        },
        source: CommandSource::Dnn,
    })
}

pub fn detection_override(dets: &[Detection], cfg: &ControlConfig) -> bool {
    dets.iter().any(|d| {
        let class_ok = cfg
            .detection_classes
            .as_ref()
            .is_none_or(|allowed| allowed.contains(&d.class_name));
        class_ok && d.area() > cfg.detection_area_threshold
    })
}

/// Priority: teleop, then detection hover, then the trail network. A missing
/// or stale estimate with nothing of higher priority yields a hover.
pub fn arbitrate(
    teleop: Option<&TeleopCommand>,
    dets: &[Detection],
    est: Option<&TrailEstimate>,
    now: f64,
    pose: &Pose3,
    cfg: &ControlConfig,
) -> Result<Command> {
    if let Some(t) = teleop {
        return Ok(Command {
            kind: CommandKind::Teleop(*t),
            source: CommandSource::Teleop,
        });
    }
    if detection_override(dets, cfg) {
        return Ok(Command::hover(CommandSource::DetectionOverride));
    }
    match est {
        Some(e) if now - e.timestamp <= cfg.staleness_limit => make_waypoint(pose, turn_angle(e, cfg), cfg),
        _ => Ok(Command::hover(CommandSource::Dnn)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::ned_to_enu;
    use crate::perception::SoftLabel3;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn est(vo: [f64; 3], lo: [f64; 3], t: f64) -> TrailEstimate {
        TrailEstimate {
            vo: SoftLabel3::new(vo).unwrap(),
            lo: SoftLabel3::new(lo).unwrap(),
            timestamp: t,
        }
    }

    #[test]
    fn turn_angle_examples() {
        let cfg = ControlConfig::default();
        assert_eq!(turn_angle(&est([0.2, 0.6, 0.2], [0.3, 0.4, 0.3], 0.0), &cfg), 0.0);
        assert_eq!(
            turn_angle(&est([0.0, 0.0, 1.0], [0.0, 1.0, 0.0], 0.0), &cfg),
            10f64.to_radians()
        );
        assert_eq!(
            turn_angle(&est([1.0, 0.0, 0.0], [1.0, 0.0, 0.0], 0.0), &cfg),
            -20f64.to_radians()
        );
    }

    #[test]
    fn waypoint_examples() {
        let cfg = ControlConfig::default();
        let pose = Pose3::enu(0.0, 0.0, 0.0, 0.0);
        let (enu, _) = waypoint_enu(&pose, 0.0, &cfg);
        assert_eq!(enu, Vec3::new(2.0, 0.0, 2.0));
        let cmd = make_waypoint(&pose, 0.0, &cfg).unwrap();
        match cmd.kind {
            CommandKind::Waypoint { position, yaw } => {
                assert_eq!(position, Vec3::new(0.0, 2.0, -2.0));
                assert_abs_diff_eq!(yaw, std::f64::consts::FRAC_PI_2);
            }
            _ => panic!("expected waypoint"),
        }
        let (enu, yaw) = waypoint_enu(&pose, std::f64::consts::FRAC_PI_2, &cfg);
        assert_abs_diff_eq!(enu, Vec3::new(0.0, 2.0, 2.0), epsilon = 1e-15);
        assert_abs_diff_eq!(yaw, std::f64::consts::FRAC_PI_2);

        let ned_pose = Pose3::new(Vec3::zeros(), 0.0, Frame::Ned);
        assert!(make_waypoint(&ned_pose, 0.0, &cfg).is_err());
    }

    #[test]
    fn detection_examples() {
        let cfg = ControlConfig::default();
        assert!(!detection_override(&[], &cfg));
        let big = Detection::new("person", [0.0, 0.0, 0.5, 0.5], 0.9).unwrap();
        assert_eq!(big.area(), 0.25);
        assert!(detection_override(std::slice::from_ref(&big), &cfg));
        let small = Detection::new("dog", [0.0, 0.0, 0.3, 0.3], 0.9).unwrap();
        assert!(!detection_override(&[small], &cfg));

        let only_dogs = ControlConfig {
            detection_classes: Some(vec!["dog".into()]),
            ..Default::default()
        };
        assert!(!detection_override(&[big], &only_dogs));
        assert!(Detection::new("x", [0.5, 0.0, 0.4, 1.0], 0.5).is_err());
        assert!(Detection::new("x", [0.0, 0.0, 1.2, 1.0], 0.5).is_err());
    }

    #[test]
    fn arbitration_priority() {
        let cfg = ControlConfig::default();
        let pose = Pose3::enu(1.0, 2.0, 2.0, 0.3);
        let big = Detection::new("person", [0.1, 0.1, 0.9, 0.9], 0.8).unwrap();
        let fresh = est([0.2, 0.6, 0.2], [0.2, 0.6, 0.2], 10.0);
        let tele = TeleopCommand {
            position: Vec3::new(1.0, 1.0, -2.0),
            yaw: 0.0,
        };

        let c = arbitrate(Some(&tele), std::slice::from_ref(&big), Some(&fresh), 10.0, &pose, &cfg).unwrap();
        assert_eq!(c.source, CommandSource::Teleop);
        assert_eq!(c.kind, CommandKind::Teleop(tele));

        let c = arbitrate(None, &[big], Some(&fresh), 10.0, &pose, &cfg).unwrap();
        assert_eq!(c, Command::hover(CommandSource::DetectionOverride));

        let stale = est([0.2, 0.6, 0.2], [0.2, 0.6, 0.2], 9.4);
        let c = arbitrate(None, &[], Some(&stale), 10.0, &pose, &cfg).unwrap();
        assert!(c.is_hover());
        assert_eq!(c.source, CommandSource::Dnn);
        assert!(arbitrate(None, &[], None, 10.0, &pose, &cfg).unwrap().is_hover());

        let c = arbitrate(None, &[], Some(&fresh), 10.0, &pose, &cfg).unwrap();
        assert_eq!(c.source, CommandSource::Dnn);
        assert!(!c.is_hover());
    }

    #[test]
    fn csv_rows() {
        assert_eq!(command_csv_row(0.5, &Command::hover(CommandSource::Dnn)), "0.5,dnn,hover,,,,");
        let cmd = make_waypoint(&Pose3::enu(0.0, 0.0, 0.0, 0.0), 0.0, &ControlConfig::default()).unwrap();
        let row = command_csv_row(1.0, &cmd);
        assert!(row.starts_with("1,dnn,waypoint,0,2,-2,"));
        assert_eq!(row.split(',').count(), COMMAND_CSV_HEADER.split(',').count());
    }

    #[test]
    fn config_validation() {
        assert!(ControlConfig::default().validate().is_ok());
        assert!(ControlConfig { beta1: -0.1, ..Default::default() }.validate().is_err());
        assert!(ControlConfig { lookahead: 0.0, ..Default::default() }.validate().is_err());
        assert!(ControlConfig { detection_area_threshold: 1.0, ..Default::default() }.validate().is_err());
    }

    fn arb_label() -> impl Strategy<Value = SoftLabel3> {
        prop::array::uniform3(-10.0..10.0f64).prop_map(|z| SoftLabel3::from_logits(&z))
    }

    proptest! {
        #[test]
        fn turn_angle_bounded_and_antisymmetric(vo in arb_label(), lo in arb_label()) {
            let cfg = ControlConfig::default();
            let e = TrailEstimate { vo, lo, timestamp: 0.0 };
            let a = turn_angle(&e, &cfg);
            prop_assert!(a.abs() <= cfg.beta1 + cfg.beta2 + 1e-15);
            prop_assert_eq!(turn_angle(&e.mirrored(), &cfg), -a);
        }

        #[test]
        fn waypoint_geometry(x in -50.0..50.0f64, y in -50.0..50.0f64, z in 0.0..5.0f64,
                             yaw in -3.1..3.1f64, alpha in -0.4..0.4f64, look in 0.5..5.0f64) {
            let cfg = ControlConfig { lookahead: look, ..Default::default() };
            let pose = Pose3::enu(x, y, z, yaw);
            let cmd = make_waypoint(&pose, alpha, &cfg).unwrap();
            let (ned, _) = cmd.setpoint_ned().unwrap();
            let enu = ned_to_enu(&ned);
            prop_assert_eq!(enu.z, cfg.altitude);
            let planar = ((enu.x - x).powi(2) + (enu.y - y).powi(2)).sqrt();
            prop_assert!((planar - look).abs() < 1e-12);
        }

        #[test]
        fn arbitrate_is_pure(vo in arb_label(), lo in arb_label(), age in 0.0..1.0f64) {
            let cfg = ControlConfig::default();
            let pose = Pose3::enu(3.0, -1.0, 2.0, 0.7);
            let e = TrailEstimate { vo, lo, timestamp: 5.0 - age };
            let a = arbitrate(None, &[], Some(&e), 5.0, &pose, &cfg).unwrap();
            let b = arbitrate(None, &[], Some(&e), 5.0, &pose, &cfg).unwrap();
            prop_assert_eq!(format!("{a:?}"), format!("{b:?}"));
        }
    }
}
