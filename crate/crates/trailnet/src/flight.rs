//! Reactive trail-following: softmax probabilities → velocity and yaw-rate
//! commands, a planar kinematic vehicle, and closed-loop episodes that
//! measure how far a model flies before leaving the trail.

use std::path::PathBuf;

use crate::nn::{self, ModelParams};
use crate::scene::{CameraPose, SceneError, TrailWorld, DEFAULT_PITCH};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlightError {
    #[error("{0}")]
    Argument(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("frame dump failed: {0}")]
    Io(#[from] std::io::Error),
}

/// Gains and clamps for the reactive controller. Speed follows the
/// go-straight probability; yaw rate follows the turn-probability
/// difference, positive = turn right.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerConfig {
    /// m/s per unit of P(GS).
    pub k_v: f64,
    /// rad/s per unit of P(TR) − P(TL).
    pub k_yaw: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub yaw_max: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig { k_v: 2.0, k_yaw: 1.5, v_min: 0.2, v_max: 2.0, yaw_max: 1.0 }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<(), FlightError> {
        if !(self.k_v > 0.0) || !(self.k_yaw > 0.0) {
            return Err(FlightError::Argument(format!(
                "gains must be positive, got k_v={} k_yaw={}",
                self.k_v, self.k_yaw
            )));
        }
        if !(0.0 <= self.v_min && self.v_min <= self.v_max) {
            return Err(FlightError::Argument(format!(
                "need 0 <= v_min <= v_max, got {} / {}",
                self.v_min, self.v_max
            )));
        }
        if !(self.yaw_max > 0.0) {
            return Err(FlightError::Argument(format!("yaw_max must be positive, got {}", self.yaw_max)));
        }
        Ok(())
    }
}

/// Probabilities ordered (P_TL, P_GS, P_TR) — turn left, go straight,
/// turn right — matching the class indices of the classifier.
pub type Probs = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Command {
    pub v: f64,
    /// rad/s, positive turns right.
    pub yaw_rate: f64,
}

/// v = clamp(k_v·P_GS), yaw rate = clamp(k_yaw·(P_TR − P_TL)).
pub fn control(probs: Probs, cfg: &ControllerConfig) -> Command {
    let [p_tl, p_gs, p_tr] = probs;
    Command {
        v: (cfg.k_v * p_gs).clamp(cfg.v_min, cfg.v_max),
        yaw_rate: (cfg.k_yaw * (p_tr - p_tl)).clamp(-cfg.yaw_max, cfg.yaw_max),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    /// Heading, counterclockwise from +x (the scene convention); right
    /// turns decrease it.
    pub yaw: f64,
    pub v: f64,
    /// Arc length of the nearest centerline point; non-decreasing over an
    /// episode.
    pub s_progress: f64,
}

/// Semi-implicit Euler: integrate heading first, then translate along the
/// new heading. Arc progress re-anchors with a windowed nearest-point
/// search around the previous position and never moves backwards.
pub fn step_vehicle(state: &VehicleState, cmd: Command, dt: f64, world: &TrailWorld) -> VehicleState {
    debug_assert!(dt > 0.0);
    let yaw = state.yaw - cmd.yaw_rate * dt;
    let x = state.x + cmd.v * yaw.cos() * dt;
    let y = state.y + cmd.v * yaw.sin() * dt;
    let window = 5.0 + cmd.v.abs() * dt;
    let near = world.nearest_centerline_between(x, y, state.s_progress - 2.0, state.s_progress + window);
    VehicleState { x, y, yaw, v: cmd.v, s_progress: near.s.max(state.s_progress) }
}

/// What chooses the per-step probabilities.
pub enum Pilot<'a> {
    /// Render the forward camera and run the classifier.
    Model(&'a ModelParams),
    /// Perfect-knowledge autopilot steering toward a point a few meters
    /// ahead on the centerline; upper reference for any learned model.
    GeometryOracle,
    /// Constant probabilities (diagnostics).
    Fixed(Probs),
}

/// Lookahead distance for the geometry oracle, meters.
pub const ORACLE_LOOKAHEAD: f64 = 3.0;
/// Heading error (radians) at which the oracle saturates to a pure turn.
pub const ORACLE_ERR_SCALE: f64 = 0.5;

fn wrap_angle(a: f64) -> f64 {
    (a + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI) - std::f64::consts::PI
}

/// Oracle probabilities from ground-truth geometry: heading error to a
/// lookahead point, mapped to (TL, GS, TR) with left error raising P_TL.
pub fn oracle_probs(world: &TrailWorld, state: &VehicleState) -> Probs {
    let length = world.total_length();
    let target_s = (state.s_progress + ORACLE_LOOKAHEAD).min(length);
    let frame = world.trail_frame(target_s).expect("clamped to the valid range");
    let err = wrap_angle((frame.y - state.y).atan2(frame.x - state.x) - state.yaw);
    let u = (err / ORACLE_ERR_SCALE).clamp(-1.0, 1.0);
    [u.max(0.0), 1.0 - u.abs(), (-u).max(0.0)]
}

#[derive(Debug, Clone)]
pub struct TraceStep {
    pub step: usize,
    pub state: VehicleState,
    pub probs: Probs,
    pub command: Command,
    /// Signed offset from the centerline at this step, left positive.
    pub lateral: f64,
}

#[derive(Debug, Clone)]
pub struct EpisodeResult {
    /// Arc length gained between the start and the last step.
    pub distance_along_trail: f64,
    pub steps: usize,
    pub failed: bool,
    pub failure_s: Option<f64>,
    pub mean_abs_lateral: f64,
    pub trace: Vec<TraceStep>,
}

#[derive(Debug, Clone)]
pub struct EpisodeOptions {
    pub dt: f64,
    pub max_steps: usize,
    pub start_s: f64,
    /// Model-pilot camera resolution (square). Must equal the model's
    /// trained input size.
    pub image_size: usize,
    /// Failure when |lateral| > half_width · (1 + margin_fraction).
    pub margin_fraction: f64,
    /// Dump each rendered frame as frame_{step:05}.ppm into this directory.
    pub frame_dump: Option<PathBuf>,
}

impl Default for EpisodeOptions {
    fn default() -> Self {
        EpisodeOptions {
            dt: 0.1,
            max_steps: 2000,
            start_s: 5.0,
            image_size: 32,
            margin_fraction: 0.5,
            frame_dump: None,
        }
    }
}

/// Closed loop: sense (render + classify, or oracle), decide (reactive
/// controller), act (kinematic step), until the trail ends, the vehicle
/// strays beyond the failure margin, or `max_steps` elapse.
pub fn run_episode(
    world: &TrailWorld,
    pilot: &Pilot,
    ctrl: &ControllerConfig,
    opts: &EpisodeOptions,
) -> Result<EpisodeResult, FlightError> {
    ctrl.validate()?;
    if !(opts.dt > 0.0) {
        return Err(FlightError::Argument(format!("dt must be positive, got {}", opts.dt)));
    }
    let length = world.total_length();
    if !(0.0..=length).contains(&opts.start_s) {
        return Err(FlightError::Argument(format!(
            "start_s {} outside trail [0, {length}]",
            opts.start_s
        )));
    }
    if let Pilot::Model(params) = pilot {
        if params.image_size != opts.image_size {
            return Err(FlightError::Argument(format!(
                "model expects {0}x{0} input, episode renders {1}x{1}",
                params.image_size, opts.image_size
            )));
        }
    }
    if let Some(dir) = &opts.frame_dump {
        std::fs::create_dir_all(dir)?;
    }

    let start = world.trail_frame(opts.start_s)?;
    let mut state = VehicleState {
        x: start.x,
        y: start.y,
        yaw: start.heading,
        v: 0.0,
        s_progress: opts.start_s,
    };
    // Stop just short of the final sample so the oracle always has a
    // forward-of-vehicle lookahead target.
    let end_s = length - 1.0;

    let mut trace = Vec::new();
    let mut failed = false;
    let mut failure_s = None;
    let mut abs_lateral_sum = 0.0;

    for step in 0..opts.max_steps {
        let probs = match pilot {
            Pilot::Model(params) => {
                let pose = CameraPose {
                    x: state.x,
                    y: state.y,
                    height: world.spec.camera_height(),
                    yaw: state.yaw,
                    pitch: DEFAULT_PITCH,
                };
                let image = crate::scene::render(world, &pose, opts.image_size, opts.image_size);
                if let Some(dir) = &opts.frame_dump {
                    image.write_ppm(&dir.join(format!("frame_{step:05}.ppm")))?;
                }
                nn::predict(params, &image.pixels)
            }
            Pilot::GeometryOracle => oracle_probs(world, &state),
            Pilot::Fixed(p) => *p,
        };
        let command = control(probs, ctrl);
        state = step_vehicle(&state, command, opts.dt, world);

        let near = world.nearest_centerline_between(
            state.x,
            state.y,
            state.s_progress - 2.0,
            state.s_progress + 2.0,
        );
        let lateral = near.lateral;
        abs_lateral_sum += lateral.abs();
        trace.push(TraceStep { step, state, probs, command, lateral });

        if lateral.abs() > near.half_width * (1.0 + opts.margin_fraction) {
            failed = true;
            failure_s = Some(state.s_progress);
            break;
        }
        if state.s_progress >= end_s {
            break;
        }
    }

    let steps = trace.len();
    Ok(EpisodeResult {
        distance_along_trail: state.s_progress - opts.start_s,
        steps,
        failed,
        failure_s,
        mean_abs_lateral: if steps == 0 { 0.0 } else { abs_lateral_sum / steps as f64 },
        trace,
    })
}

/// CSV rendering of an episode trace, header included.
pub fn trace_to_csv(result: &EpisodeResult) -> String {
    let mut out = String::from("step,x,y,yaw,p_tl,p_gs,p_tr,v_cmd,yaw_cmd,lateral\n");
    for t in &result.trace {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            t.step,
            t.state.x,
            t.state.y,
            t.state.yaw,
            t.probs[0],
            t.probs[1],
            t.probs[2],
            t.command.v,
            t.command.yaw_rate,
            t.lateral,
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{build_world, DomainSpec, Light, Season, Terrain};

    fn gentle_world(seed: u64) -> TrailWorld {
        let spec = DomainSpec::new(1, Season::Summer, Light::Morning, Terrain::Trail1);
        build_world(&spec, seed, 200.0)
    }

    #[test]
    fn controller_signs_and_clamps() {
        let cfg = ControllerConfig::default();
        // Symmetric probabilities: no yaw command.
        let c = control([0.1, 0.8, 0.1], &cfg);
        assert_eq!(c.yaw_rate, 0.0);
        assert!((c.v - 1.6).abs() < 1e-15);
        // Turn-right dominant → positive yaw command.
        assert!(control([0.1, 0.2, 0.7], &cfg).yaw_rate > 0.0);
        // Turn-left dominant → negative.
        assert!(control([0.7, 0.2, 0.1], &cfg).yaw_rate < 0.0);
        // Clamps.
        assert_eq!(control([0.0, 0.0, 1.0], &cfg).yaw_rate, 1.0);
        assert_eq!(control([0.0, 0.0, 1.0], &cfg).v, cfg.v_min);
        assert_eq!(control([0.0, 1.0, 0.0], &cfg).v, cfg.v_max);
    }

    #[test]
    fn controller_odd_under_swap() {
        let cfg = ControllerConfig::default();
        let cases = [[0.5, 0.3, 0.2], [0.05, 0.9, 0.05], [0.33, 0.34, 0.33]];
        for p in cases {
            let a = control(p, &cfg);
            let b = control([p[2], p[1], p[0]], &cfg);
            assert_eq!(a.yaw_rate, -b.yaw_rate);
            assert_eq!(a.v, b.v);
        }
        // v monotone in P_GS below the clamp.
        let mut prev = -1.0;
        for i in 0..=10 {
            let v = control([0.0, i as f64 * 0.1, 0.0], &cfg).v;
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn step_vehicle_kinematics() {
        let world = gentle_world(1);
        let s0 = VehicleState { x: 0.0, y: 0.0, yaw: 0.0, v: 1.0, s_progress: 0.0 };
        let s1 = step_vehicle(&s0, Command { v: 1.0, yaw_rate: 0.0 }, 0.1, &world);
        assert!((s1.x - 0.1).abs() < 1e-12);
        assert_eq!(s1.y, 0.0);

        // Zero velocity: position frozen, heading still integrates.
        let s2 = step_vehicle(&s0, Command { v: 0.0, yaw_rate: 0.5 }, 0.1, &world);
        assert_eq!((s2.x, s2.y), (0.0, 0.0));
        assert!((s2.yaw - (-0.05)).abs() < 1e-12);

        // Positive yaw command turns right (heading decreases).
        let s3 = step_vehicle(&s0, Command { v: 1.0, yaw_rate: 0.5 }, 0.1, &world);
        assert!(s3.yaw < s0.yaw);
        assert!(s3.y < 0.0);

        // Euler half-step consistency: O(dt²) agreement.
        let cmd = Command { v: 1.5, yaw_rate: 0.4 };
        let full = step_vehicle(&s0, cmd, 0.1, &world);
        let halves = step_vehicle(&step_vehicle(&s0, cmd, 0.05, &world), cmd, 0.05, &world);
        assert!((full.x - halves.x).hypot(full.y - halves.y) < 0.01);
    }

    #[test]
    fn oracle_completes_gentle_trails() {
        for seed in [11, 12, 13] {
            let world = gentle_world(seed);
            let result = run_episode(
                &world,
                &Pilot::GeometryOracle,
                &ControllerConfig::default(),
                &EpisodeOptions::default(),
            )
            .unwrap();
            assert!(!result.failed, "oracle failed on seed {seed} at {:?}", result.failure_s);
            assert!(
                result.distance_along_trail >= world.total_length() - 1.0 - 5.0,
                "seed {seed}: only {:.1} m",
                result.distance_along_trail
            );
            assert!(result.mean_abs_lateral < 0.5, "tracking error {}", result.mean_abs_lateral);
        }
    }

    #[test]
    fn constant_probs_fail_at_a_bend() {
        let world = gentle_world(2);
        let result = run_episode(
            &world,
            &Pilot::Fixed([1.0 / 3.0; 3]),
            &ControllerConfig::default(),
            &EpisodeOptions::default(),
        )
        .unwrap();
        // Zero yaw command drives straight; the trail bends away eventually.
        assert!(result.failed);
        assert!(result.distance_along_trail < world.total_length() - 1.0 - 5.0);
        let f = result.failure_s.unwrap();
        assert!((f - (result.distance_along_trail + 5.0)).abs() < 1e-9);
        // Failure threshold respected at every earlier step.
        for t in &result.trace[..result.trace.len() - 1] {
            let near = world.nearest_centerline(t.state.x, t.state.y);
            assert!(t.lateral.abs() <= near.half_width * 1.5 + 1e-9);
        }
    }

    #[test]
    fn episodes_deterministic_and_progress_monotone() {
        let world = gentle_world(3);
        let opts = EpisodeOptions { max_steps: 400, ..EpisodeOptions::default() };
        let a = run_episode(&world, &Pilot::GeometryOracle, &ControllerConfig::default(), &opts).unwrap();
        let b = run_episode(&world, &Pilot::GeometryOracle, &ControllerConfig::default(), &opts).unwrap();
        assert_eq!(a.steps, b.steps);
        assert_eq!(a.distance_along_trail, b.distance_along_trail);
        for (x, y) in a.trace.iter().zip(&b.trace) {
            assert_eq!(x.state, y.state);
            assert_eq!(x.probs, y.probs);
        }
        let mut prev = 0.0;
        for t in &a.trace {
            assert!(t.state.s_progress >= prev);
            prev = t.state.s_progress;
        }
        assert!(a.distance_along_trail <= world.total_length());
    }

    #[test]
    fn episode_argument_errors() {
        let world = gentle_world(4);
        let bad_start = EpisodeOptions { start_s: 1e9, ..EpisodeOptions::default() };
        assert!(run_episode(&world, &Pilot::GeometryOracle, &ControllerConfig::default(), &bad_start).is_err());
        let bad_dt = EpisodeOptions { dt: 0.0, ..EpisodeOptions::default() };
        assert!(run_episode(&world, &Pilot::GeometryOracle, &ControllerConfig::default(), &bad_dt).is_err());
        let params = crate::nn::init_params(1, 16).unwrap();
        let mismatch = EpisodeOptions { image_size: 32, ..EpisodeOptions::default() };
        assert!(run_episode(&world, &Pilot::Model(&params), &ControllerConfig::default(), &mismatch).is_err());
        let bad_gain = ControllerConfig { k_v: 0.0, ..ControllerConfig::default() };
        assert!(run_episode(&world, &Pilot::GeometryOracle, &bad_gain, &EpisodeOptions::default()).is_err());
    }

    #[test]
    fn trace_csv_shape() {
        let world = gentle_world(5);
        let opts = EpisodeOptions { max_steps: 25, ..EpisodeOptions::default() };
        let r = run_episode(&world, &Pilot::GeometryOracle, &ControllerConfig::default(), &opts).unwrap();
        let csv = trace_to_csv(&r);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "step,x,y,yaw,p_tl,p_gs,p_tr,v_cmd,yaw_cmd,lateral");
        assert_eq!(lines.len(), r.steps + 1);
        assert_eq!(lines[1].split(',').count(), 10);
    }

    #[test]
    fn model_pilot_runs_and_dumps_frames() {
        let world = gentle_world(6);
        let params = crate::nn::init_params(2, 16).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let opts = EpisodeOptions {
            max_steps: 3,
            image_size: 16,
            frame_dump: Some(dir.path().to_path_buf()),
            ..EpisodeOptions::default()
        };
        let r = run_episode(&world, &Pilot::Model(&params), &ControllerConfig::default(), &opts).unwrap();
        assert!(r.steps >= 1);
        assert!(dir.path().join("frame_00000.ppm").exists());
    }
}
