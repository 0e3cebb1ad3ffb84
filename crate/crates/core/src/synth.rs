//! Parametric 3D walkers rendered through a camera rig into frame-aligned
//! multi-view 2D pose datasets with known ground truth.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataio::{save_dataset, Condition, DatasetManifest, GaitSample, ParamRange};
use crate::error::{Error, Result};
use crate::geometry::{render_view, CameraRig, Trajectory3d};
use crate::rng;
use crate::skeleton::{PoseSequence, COCO_JOINTS};

pub use crate::geometry::CameraRig as Rig;

pub const FPS: f64 = 30.0;
pub const DEFAULT_FRAMES: usize = 60;

/// Segment lengths in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BodyDims {
    pub shin: f64,
    pub thigh: f64,
    pub hip_width: f64,
    pub torso: f64,
    pub shoulder_width: f64,
    pub upper_arm: f64,
    pub forearm: f64,
    pub neck: f64,
    pub head: f64,
}

impl Default for BodyDims {
    /// A 1.8 m adult.
    fn default() -> Self {
        BodyDims {
            shin: 0.45,
            thigh: 0.45,
            hip_width: 0.25,
            torso: 0.52,
            shoulder_width: 0.38,
            upper_arm: 0.30,
            forearm: 0.27,
            neck: 0.20,
            head: 0.10,
        }
    }
}

impl BodyDims {
    const ANKLE_HEIGHT: f64 = 0.08;

    pub fn height(&self) -> f64 {
        Self::ANKLE_HEIGHT + self.shin + self.thigh + self.torso + self.neck + self.head
    }

    fn lengths(&self) -> [f64; 9] {
        [
            self.shin,
            self.thigh,
            self.hip_width,
            self.torso,
            self.shoulder_width,
            self.upper_arm,
            self.forearm,
            self.neck,
            self.head,
        ]
    }

    pub fn scaled(&self, s: f64) -> Self {
        let l = self.lengths().map(|v| v * s);
        BodyDims {
            shin: l[0],
            thigh: l[1],
            hip_width: l[2],
            torso: l[3],
            shoulder_width: l[4],
            upper_arm: l[5],
            forearm: l[6],
            neck: l[7],
            head: l[8],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WalkerParams {
    pub dims: BodyDims,
    pub stride_m: f64,
    pub cadence_hz: f64,
    pub phase: f64,
    /// Left, right.
    pub arm_swing_rad: [f64; 2],
    pub leg_swing_rad: f64,
    pub torso_lean_rad: f64,
    pub noise_std_m: f64,
}

impl WalkerParams {
    pub fn standing() -> Self {
        WalkerParams {
            dims: BodyDims::default(),
            stride_m: 0.0,
            cadence_hz: 1.0,
            phase: 0.0,
            arm_swing_rad: [0.0, 0.0],
            leg_swing_rad: 0.0,
            torso_lean_rad: 0.0,
            noise_std_m: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let amp_ok = |a: f64| (0.0..=PI / 2.0).contains(&a);
        if self.dims.lengths().iter().any(|&l| !(l > 0.0)) {
            return Err(Error::Config("walker segment lengths must be positive".into()));
        }
        if !(amp_ok(self.arm_swing_rad[0]) && amp_ok(self.arm_swing_rad[1]) && amp_ok(self.leg_swing_rad)) {
            return Err(Error::Config("swing amplitudes must lie in [0, pi/2]".into()));
        }
        if !(self.noise_std_m >= 0.0 && self.stride_m >= 0.0 && self.cadence_hz >= 0.0) {
            return Err(Error::Config("noise, stride and cadence must be non-negative".into()));
        }
        Ok(())
    }

    /// Carrying a bag damps one arm; a coat damps all limbs and adds jitter.
    pub fn with_condition(&self, cond: Condition) -> Self {
        let mut p = *self;
        match cond {
            Condition::NM => {}
            Condition::BG => p.arm_swing_rad[1] *= BG_ARM_SCALE,
            Condition::CL => {
                p.arm_swing_rad[0] *= CL_LIMB_SCALE;
                p.arm_swing_rad[1] *= CL_LIMB_SCALE;
                p.leg_swing_rad *= CL_LIMB_SCALE;
                p.noise_std_m += CL_EXTRA_NOISE_M;
            }
        }
        p
    }
}

pub const BG_ARM_SCALE: f64 = 0.3;
pub const CL_LIMB_SCALE: f64 = 0.7;
pub const CL_EXTRA_NOISE_M: f64 = 0.01;

/// Uniform sampling ranges for per-identity parameters.
pub fn walker_ranges() -> Vec<ParamRange> {
    let r = |name: &str, low: f64, high: f64| ParamRange { name: name.into(), low, high };
    vec![
        r("body_scale", 0.92, 1.08),
        r("segment_scale", 0.9, 1.1),
        r("stride_m", 1.1, 1.6),
        r("cadence_hz", 0.8, 1.05),
        r("arm_swing_rad", 0.15, 0.55),
        r("leg_swing_rad", 0.25, 0.5),
        r("torso_lean_rad", 0.0, 0.15),
        r("noise_std_m", 0.002, 0.006),
    ]
}

pub fn sample_walker(rng: &mut impl Rng) -> WalkerParams {
    let ranges = walker_ranges();
    let mut draw = |name: &str| {
        let r = ranges.iter().find(|r| r.name == name).expect("known range");
        rng.random_range(r.low..=r.high)
    };
    let body = draw("body_scale");
    let base = BodyDims::default().scaled(body);
    let l = base.lengths().map(|v| v * draw("segment_scale"));
    let dims = BodyDims {
        shin: l[0],
        thigh: l[1],
        hip_width: l[2],
        torso: l[3],
        shoulder_width: l[4],
        upper_arm: l[5],
        forearm: l[6],
        neck: l[7],
        head: l[8],
    };
    let arm = draw("arm_swing_rad");
    WalkerParams {
        dims,
        stride_m: draw("stride_m"),
        cadence_hz: draw("cadence_hz"),
        phase: 0.0,
        arm_swing_rad: [arm, arm],
        leg_swing_rad: draw("leg_swing_rad"),
        torso_lean_rad: draw("torso_lean_rad"),
        noise_std_m: draw("noise_std_m"),
    }
}

fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

/// Unit segment direction swung by `a` from straight down toward +x.
fn swing(a: f64) -> Vector3<f64> {
    Vector3::new(a.sin(), 0.0, -a.cos())
}

/// Noise-free body pose at gait phase `phi` in the walker frame (facing +x,
/// left = +y, z up), pelvis over the origin.
fn body_pose(p: &WalkerParams, phi: f64) -> [Vector3<f64>; COCO_JOINTS] {
    let d = &p.dims;
    let bob = 0.05 * p.leg_swing_rad * (2.0 * phi).cos();
    let hip_center = Vector3::new(0.0, 0.0, BodyDims::ANKLE_HEIGHT + d.shin + d.thigh + bob);
    let lean = rot_y(p.torso_lean_rad);
    let up = |v: Vector3<f64>| hip_center + lean * v;

    let shoulder_c = Vector3::new(0.0, 0.0, d.torso);
    let head_c = shoulder_c + Vector3::new(0.0, 0.0, d.neck);
    let h = d.head;
    let mut j = [Vector3::zeros(); COCO_JOINTS];
    j[0] = up(head_c + Vector3::new(h, 0.0, 0.0));
    j[1] = up(head_c + Vector3::new(0.8 * h, 0.35 * h, 0.4 * h));
    j[2] = up(head_c + Vector3::new(0.8 * h, -0.35 * h, 0.4 * h));
    j[3] = up(head_c + Vector3::new(0.0, 0.75 * h, 0.2 * h));
    j[4] = up(head_c + Vector3::new(0.0, -0.75 * h, 0.2 * h));
    let sh = [shoulder_c + Vector3::new(0.0, d.shoulder_width / 2.0, 0.0), shoulder_c - Vector3::new(0.0, d.shoulder_width / 2.0, 0.0)];
    j[5] = up(sh[0]);
    j[6] = up(sh[1]);

    // Left leg leads at phi; each arm swings against the leg on its side.
    for side in 0..2 {
        let leg_phase = phi + side as f64 * PI;
        let arm_phase = leg_phase + PI;
        let arm_amp = p.arm_swing_rad[side];
        let arm = arm_amp * arm_phase.sin();
        let elbow_bend = 0.5 * arm_amp * (1.0 + arm_phase.sin());
        let elbow = sh[side] + d.upper_arm * swing(arm);
        let wrist = elbow + d.forearm * swing(arm + elbow_bend);
        j[7 + side] = up(elbow);
        j[9 + side] = up(wrist);

        let sign = if side == 0 { 1.0 } else { -1.0 };
        let hip = hip_center + Vector3::new(0.0, sign * d.hip_width / 2.0, 0.0);
        let thigh = p.leg_swing_rad * leg_phase.sin();
        let knee_flex = 1.2 * p.leg_swing_rad * 0.5 * (1.0 - (leg_phase + 0.5).cos());
        let knee = hip + d.thigh * swing(thigh);
        let ankle = knee + d.shin * swing(thigh - knee_flex);
        j[11 + side] = hip;
        j[13 + side] = knee;
        j[15 + side] = ankle;
    }
    j
}

/// `frames x 17` world trajectories of a walker heading along +x through the
/// origin, sampled at 30 fps. Deterministic in `seed`.
pub fn synth_walk_3d(params: &WalkerParams, frames: usize, seed: u64) -> Result<Trajectory3d> {
    params.validate()?;
    if frames == 0 {
        return Err(Error::Config("frames must be >= 1".into()));
    }
    let speed = params.stride_m * params.cadence_hz;
    let x0 = -speed * (frames as f64 - 1.0) / FPS / 2.0;
    let mut rng = rng::stream(seed, "walk_noise", &[]);
    let noise = Normal::new(0.0, params.noise_std_m).map_err(|e| Error::Config(e.to_string()))?;
    let mut points = Vec::with_capacity(frames * COCO_JOINTS);
    for t in 0..frames {
        let time = t as f64 / FPS;
        let phi = 2.0 * PI * params.cadence_hz * time + params.phase;
        let offset = Vector3::new(x0 + speed * time, 0.0, 0.0);
        for j in body_pose(params, phi) {
            let mut w = j + offset;
            if params.noise_std_m > 0.0 {
                for c in 0..3 {
                    w[c] += noise.sample(&mut rng);
                }
            }
            points.push([w.x, w.y, w.z]);
        }
    }
    Ok(Trajectory3d { joints: COCO_JOINTS, points })
}

/// One normalized, frame-aligned sequence per rig view.
pub fn render_views(walk: &Trajectory3d, rig: &CameraRig) -> Result<Vec<PoseSequence>> {
    rig.views.iter().map(|v| render_view(walk, &v.projection()?)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub identities: usize,
    pub conditions: Vec<Condition>,
    pub runs: u32,
    pub frames: usize,
    pub seed: u64,
    pub rig: CameraRig,
    pub rig_preset: Option<String>,
}

impl SynthSpec {
    /// 20 identities x 3 conditions x 8 views x 2 runs.
    pub fn acceptance(seed: u64) -> Self {
        SynthSpec {
            identities: 20,
            conditions: Condition::ALL.to_vec(),
            runs: 2,
            frames: DEFAULT_FRAMES,
            seed,
            rig: CameraRig::preset("acceptance", crate::geometry::DEFAULT_RIG_RADIUS_M).expect("preset"),
            rig_preset: Some("acceptance".into()),
        }
    }
}

pub fn identity_label(i: usize) -> String {
    format!("id{i:03}")
}

/// Records sorted by identity, condition, run, then rig view order.
pub fn synth_records(spec: &SynthSpec) -> Result<Vec<GaitSample>> {
    if spec.identities < 2 {
        return Err(Error::Config("at least two identities are required".into()));
    }
    if spec.conditions.is_empty() || spec.runs == 0 {
        return Err(Error::Config("need at least one condition and one run".into()));
    }
    let mut conditions = spec.conditions.clone();
    conditions.sort();
    conditions.dedup();
    let mut records = Vec::new();
    let mut group = 0u64;
    for id in 0..spec.identities {
        let base = sample_walker(&mut rng::stream(spec.seed, "walker", &[id as u64]));
        for &cond in &conditions {
            for run in 0..spec.runs {
                let path = [id as u64, cond as u64, run as u64];
                let mut run_rng = rng::stream(spec.seed, "run", &path);
                let mut params = base.with_condition(cond);
                params.phase = run_rng.random_range(0.0..2.0 * PI);
                let walk = synth_walk_3d(&params, spec.frames, rng::derive_seed(spec.seed, "noise", &path))?;
                for (view, seq) in spec.rig.views.iter().zip(render_views(&walk, &spec.rig)?) {
                    records.push(GaitSample {
                        identity: identity_label(id),
                        view_degrees: view.yaw_degrees,
                        condition: cond,
                        run,
                        aligned_group: Some(group),
                        sequence: seq,
                        provenance: None,
                    });
                }
                group += 1;
            }
        }
    }
    Ok(records)
}

/// Generates and writes a dataset plus manifest.
pub fn make_dataset(spec: &SynthSpec, out_path: &Path) -> Result<DatasetManifest> {
    let records = synth_records(spec)?;
    let manifest = DatasetManifest {
        seed: Some(spec.seed),
        frames: Some(spec.frames),
        fps: Some(FPS),
        rig_preset: spec.rig_preset.clone(),
        walker_ranges: walker_ranges(),
        rig: Some(spec.rig.clone()),
        ..DatasetManifest::describe(&records)
    };
    save_dataset(&records, out_path, Some(manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::COCO_BONES;

    fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
    }

    fn walker() -> WalkerParams {
        let mut p = sample_walker(&mut rng::stream(5, "t", &[]));
        p.noise_std_m = 0.0;
        p
    }

    #[test]
    fn standing_pose_is_static() {
        let w = synth_walk_3d(&WalkerParams::standing(), 10, 1).unwrap();
        for t in 1..10 {
            assert_eq!(w.frame(t), w.frame(0));
        }
        let top = w.points.iter().map(|p| p[2]).fold(f64::MIN, f64::max);
        assert!(top > 1.6 && top < 1.8);
        assert!((BodyDims::default().height() - 1.8).abs() < 1e-12);
    }

    #[test]
    fn walk_is_deterministic() {
        let mut p = walker();
        p.noise_std_m = 0.01;
        assert_eq!(synth_walk_3d(&p, 20, 4).unwrap(), synth_walk_3d(&p, 20, 4).unwrap());
        assert_ne!(synth_walk_3d(&p, 20, 4).unwrap(), synth_walk_3d(&p, 20, 5).unwrap());
    }

    #[test]
    fn bone_lengths_are_conserved() {
        let w = synth_walk_3d(&walker(), 60, 0).unwrap();
        for &(a, b) in &COCO_BONES {
            let l0 = dist(w.frame(0)[a], w.frame(0)[b]);
            for t in 1..60 {
                let l = dist(w.frame(t)[a], w.frame(t)[b]);
                assert!((l - l0).abs() < 1e-9 * l0, "bone ({a},{b}) frame {t}: {l} vs {l0}");
            }
        }
    }

    #[test]
    fn one_hertz_gait_repeats_every_30_frames() {
        let mut p = walker();
        p.cadence_hz = 1.0;
        let w = synth_walk_3d(&p, 60, 0).unwrap();
        let root = |t: usize| {
            let f = w.frame(t);
            [(f[11][0] + f[12][0]) / 2.0, (f[11][1] + f[12][1]) / 2.0, 0.0]
        };
        for t in 0..30 {
            let (r0, r1) = (root(t), root(t + 30));
            for j in 0..COCO_JOINTS {
                let a = w.frame(t)[j];
                let b = w.frame(t + 30)[j];
                for c in 0..3 {
                    assert!(((a[c] - r0[c]) - (b[c] - r1[c])).abs() < 1e-9);
                }
            }
        }
        p.stride_m = 0.0;
        let still = synth_walk_3d(&p, 60, 0).unwrap();
        for t in 0..30 {
            for (a, b) in still.frame(t).iter().zip(still.frame(t + 30)) {
                assert!(dist(*a, *b) < 1e-9);
            }
        }
    }

    #[test]
    fn render_counts() {
        let walk = synth_walk_3d(&walker(), 5, 0).unwrap();
        assert_eq!(render_views(&walk, &CameraRig::preset("cocentered-1", 8.0).unwrap()).unwrap().len(), 1);
        let seqs = render_views(&walk, &CameraRig::preset("casia-like", 8.0).unwrap()).unwrap();
        assert_eq!(seqs.len(), 11);
        assert!(seqs.iter().all(|s| s.frames() == 5 && s.is_normalized()));
    }

    #[test]
    fn cocentered_renders_match_oracle() {
        let rig = CameraRig::preset("cocentered-2", 8.0).unwrap();
        let walk = synth_walk_3d(&walker(), 30, 0).unwrap();
        let seqs = render_views(&walk, &rig).unwrap();
        let q = rig.oracle(rig.views[0].yaw_degrees, rig.views[1].yaw_degrees).unwrap();
        let moved = crate::geometry::apply_view_transform(&q, &seqs[0]).unwrap();
        for (a, b) in moved.coords().iter().zip(seqs[1].coords()) {
            assert!((a[0] - b[0]).abs() < 1e-8 && (a[1] - b[1]).abs() < 1e-8);
        }
    }

    #[test]
    fn record_counts_and_determinism() {
        let spec = SynthSpec {
            identities: 2,
            conditions: vec![Condition::NM],
            runs: 1,
            frames: 4,
            seed: 7,
            rig: CameraRig::circle(&[0.0, 90.0], 8.0).unwrap(),
            rig_preset: None,
        };
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
        assert_eq!(make_dataset(&spec, &a).unwrap().record_count, 4);
        make_dataset(&spec, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(
            std::fs::read(crate::dataio::manifest_path(&a)).unwrap(),
            std::fs::read(crate::dataio::manifest_path(&b)).unwrap()
        );
    }

    #[test]
    fn acceptance_preset_size() {
        let mut spec = SynthSpec::acceptance(1);
        spec.frames = 2;
        assert_eq!(synth_records(&spec).unwrap().len(), 960);
    }
}
