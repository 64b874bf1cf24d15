//! Landing platform motion and the landing phase machine.
//!
//! The platform is a level disc whose top surface sits at `top_height`;
//! only its horizontal position moves.

use std::f64::consts::TAU;
use std::fmt;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::dynamics::State12;

pub const MAX_PLATFORM_SPEED: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlatformMotion {
    Static,
    ConstantVelocity {
        velocity: [f64; 2],
    },
    /// `p0 + amplitude * sin(2 pi t / period)` per horizontal axis.
    Sinusoidal {
        amplitude: [f64; 2],
        period: f64,
    },
}

fn default_footprint() -> f64 {
    0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlatformModel {
    pub motion: PlatformMotion,
    /// Initial horizontal position of the platform centre (m).
    pub p0: [f64; 2],
    pub top_height: f64,
    /// Radius of the landing surface, used for ground-effect and contact.
    #[serde(default = "default_footprint")]
    pub footprint_radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlatformState {
    /// Centre of the top surface.
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
}

impl PlatformModel {
    pub fn fixed(p0: [f64; 2], top_height: f64) -> Self {
        Self {
            motion: PlatformMotion::Static,
            p0,
            top_height,
            footprint_radius: default_footprint(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.top_height >= 0.0) {
            return Err("platform top_height must be non-negative".into());
        }
        if !(self.footprint_radius > 0.0) {
            return Err("platform footprint_radius must be positive".into());
        }
        match self.motion {
            PlatformMotion::Static => {}
            PlatformMotion::ConstantVelocity { velocity } => {
                if !(Vector2::from(velocity).norm() <= MAX_PLATFORM_SPEED) {
                    return Err(format!("platform speed exceeds {MAX_PLATFORM_SPEED} m/s"));
                }
            }
            PlatformMotion::Sinusoidal { amplitude, period } => {
                if !(period > 0.0) {
                    return Err("sinusoid period must be positive".into());
                }
                let peak = Vector2::from(amplitude).norm() * TAU / period;
                if !(peak <= MAX_PLATFORM_SPEED) {
                    return Err(format!("peak platform speed exceeds {MAX_PLATFORM_SPEED} m/s"));
                }
            }
        }
        Ok(())
    }

    /// Height of whatever surface lies directly beneath `xy` at time `t`.
    pub fn surface_below(&self, xy: Vector2<f64>, t: f64, ground: f64) -> f64 {
        let s = platform_state_at(self, t);
        if (xy - s.position.xy()).norm() <= self.footprint_radius {
            self.top_height.max(ground)
        } else {
            ground
        }
    }
}

/// Closed-form platform position and velocity at time `t`.
pub fn platform_state_at(model: &PlatformModel, t: f64) -> PlatformState {
    let p0 = Vector2::from(model.p0);
    let (xy, vxy) = match model.motion {
        PlatformMotion::Static => (p0, Vector2::zeros()),
        PlatformMotion::ConstantVelocity { velocity } => {
            let v = Vector2::from(velocity);
            (p0 + v * t, v)
        }
        PlatformMotion::Sinusoidal { amplitude, period } => {
            // Phase snapped to 1e-12 cycles so that t and t + period evaluate
            // identically.
            let cycles = t / period;
            let frac = ((cycles - cycles.floor()) * 1e12).round() / 1e12;
            let frac = if frac >= 1.0 { 0.0 } else { frac };
            let (s, c) = (TAU * frac).sin_cos();
            let a = Vector2::from(amplitude);
            (p0 + a * s, a * (c * TAU / period))
        }
    };
    PlatformState {
        position: Vector3::new(xy.x, xy.y, model.top_height),
        velocity: Vector3::new(vxy.x, vxy.y, 0.0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LandingPhase {
    Approach,
    Track,
    Descend,
    Touchdown,
    Landed,
}

impl LandingPhase {
    pub fn as_str(&self) -> &'static str {
        match self {
            LandingPhase::Approach => "APPROACH",
            LandingPhase::Track => "TRACK",
            LandingPhase::Descend => "DESCEND",
            LandingPhase::Touchdown => "TOUCHDOWN",
            LandingPhase::Landed => "LANDED",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "APPROACH" => LandingPhase::Approach,
            "TRACK" => LandingPhase::Track,
            "DESCEND" => LandingPhase::Descend,
            "TOUCHDOWN" => LandingPhase::Touchdown,
            "LANDED" => LandingPhase::Landed,
            _ => return None,
        })
    }

    /// Whether the platform positional cost is active.
    pub fn tracks_platform(&self) -> bool {
        matches!(self, LandingPhase::Track | LandingPhase::Descend)
    }
}

impl fmt::Display for LandingPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhaseThresholds {
    /// APPROACH -> TRACK below this horizontal error (m).
    pub track_radius: f64,
    /// TRACK -> DESCEND below this horizontal error (m) ...
    pub descend_radius: f64,
    /// ... held for this long (s).
    pub descend_dwell: f64,
    /// DESCEND -> TRACK above this horizontal error (m).
    pub abort_radius: f64,
    pub touchdown_height: f64,
    pub touchdown_radius: f64,
    /// Allowed relative vertical speed at touchdown (m/s).
    pub touchdown_vz_min: f64,
    pub touchdown_vz_max: f64,
}

impl Default for PhaseThresholds {
    fn default() -> Self {
        Self {
            track_radius: 0.25,
            descend_radius: 0.15,
            descend_dwell: 0.5,
            abort_radius: 0.30,
            touchdown_height: 0.05,
            touchdown_radius: 0.15,
            touchdown_vz_min: -0.5,
            touchdown_vz_max: 0.0,
        }
    }
}

/// Drone state relative to the platform surface centre.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativeState {
    pub lateral_error: f64,
    pub height: f64,
    pub vertical_speed: f64,
}

impl RelativeState {
    pub fn between(drone: &State12, platform: &PlatformState) -> Self {
        let rel = drone.p - platform.position;
        Self {
            lateral_error: rel.xy().norm(),
            height: rel.z,
            vertical_speed: drone.v.z - platform.velocity.z,
        }
    }
}

/// One transition of the phase machine. `dwell` is how long the drone has
/// continuously been inside `descend_radius`, including this step.
pub fn update_phase(
    phase: LandingPhase,
    dwell: f64,
    rel: &RelativeState,
    thresholds: &PhaseThresholds,
) -> LandingPhase {
    use LandingPhase::*;
    let th = thresholds;
    match phase {
        Approach if rel.lateral_error < th.track_radius => Track,
        Track if rel.lateral_error < th.descend_radius && dwell >= th.descend_dwell - 1e-9 => Descend,
        Descend if rel.lateral_error > th.abort_radius => Track,
        Descend
            if rel.height < th.touchdown_height
                && rel.lateral_error < th.touchdown_radius
                && (th.touchdown_vz_min..=th.touchdown_vz_max).contains(&rel.vertical_speed) =>
        {
            Touchdown
        }
        Touchdown | Landed => Landed,
        other => other,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LandingConfig {
    /// Height above the platform top held during APPROACH/TRACK (m).
    pub approach_altitude: f64,
    /// Descent ramp rate (m/s).
    pub descent_rate: f64,
    /// Ramp floor above the platform top (m).
    pub touchdown_offset: f64,
    pub thresholds: PhaseThresholds,
}

impl Default for LandingConfig {
    fn default() -> Self {
        Self {
            approach_altitude: 1.0,
            descent_rate: 0.4,
            touchdown_offset: 0.02,
            thresholds: PhaseThresholds::default(),
        }
    }
}

/// Landing target for the positional cost. `time_in_descent` is the time
/// since the current DESCEND interval began (ignored in other phases).
pub fn descent_reference(
    phase: LandingPhase,
    platform_pos: &Vector3<f64>,
    cfg: &LandingConfig,
    time_in_descent: f64,
) -> Vector3<f64> {
    let top = platform_pos.z;
    let z = match phase {
        LandingPhase::Approach | LandingPhase::Track => top + cfg.approach_altitude,
        LandingPhase::Descend => {
            let ramp = top + cfg.approach_altitude - cfg.descent_rate * time_in_descent.max(0.0);
            ramp.max(top + cfg.touchdown_offset)
        }
        LandingPhase::Touchdown | LandingPhase::Landed => top,
    };
    Vector3::new(platform_pos.x, platform_pos.y, z)
}

/// Single-owner phase variable plus the timers the transitions need.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseMachine {
    pub phase: LandingPhase,
    dwell: f64,
    descent_start: f64,
}

impl Default for PhaseMachine {
    fn default() -> Self {
        Self {
            phase: LandingPhase::Approach,
            dwell: 0.0,
            descent_start: 0.0,
        }
    }
}

impl PhaseMachine {
    /// Advances the machine with the observation at time `t`; `dt` is the
    /// control period.
    pub fn step(
        &mut self,
        t: f64,
        dt: f64,
        drone: &State12,
        platform: &PlatformState,
        thresholds: &PhaseThresholds,
    ) -> LandingPhase {
        let rel = RelativeState::between(drone, platform);
        if self.phase == LandingPhase::Track && rel.lateral_error < thresholds.descend_radius {
            self.dwell += dt;
        } else {
            self.dwell = 0.0;
        }
        let next = update_phase(self.phase, self.dwell, &rel, thresholds);
        if next == LandingPhase::Descend && self.phase != LandingPhase::Descend {
            self.descent_start = t;
        }
        if next != self.phase {
            self.dwell = 0.0;
        }
        self.phase = next;
        next
    }

    pub fn time_in_descent(&self, t: f64) -> f64 {
        if self.phase == LandingPhase::Descend {
            t - self.descent_start
        } else {
            0.0
        }
    }
}

/// Whether a sequence of phases (one per log record) follows
/// `APPROACH TRACK (DESCEND TRACK)* DESCEND TOUCHDOWN LANDED`, ignoring
/// repeats.
pub fn is_complete_phase_sequence(phases: &[LandingPhase]) -> bool {
    use LandingPhase::*;
    let mut collapsed: Vec<LandingPhase> = Vec::new();
    for p in phases {
        if collapsed.last() != Some(p) {
            collapsed.push(*p);
        }
    }
    let n = collapsed.len();
    if n < 5 || collapsed[0] != Approach || collapsed[1] != Track {
        return false;
    }
    if collapsed[n - 3..] != [Descend, Touchdown, Landed] {
        return false;
    }
    collapsed[2..n - 3].chunks(2).all(|pair| pair == [Descend, Track])
}
