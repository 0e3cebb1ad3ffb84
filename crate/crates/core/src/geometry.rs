//! Pinhole projection, cross-view 3x3 transforms between image planes, and a
//! least-squares oracle for those transforms computed from known cameras.
//!
//! Two cameras that share a center are related by an exact homography; for
//! displaced centers the oracle returns the Frobenius-optimal 3x3 and reports
//! the residual.

use nalgebra::{Matrix3, Matrix3x4, Matrix4x3, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::{normalize_homogeneous, PoseSequence};

/// Relative threshold (against the largest singular value) for the rank-3 check.
pub const RANK_TOL: f64 = 1e-8;

const ORTHO_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub matrix: Matrix3<f64>,
}

impl CameraIntrinsics {
    pub fn new(focal_px: f64, principal_point: [f64; 2]) -> Self {
        CameraIntrinsics {
            matrix: Matrix3::new(
                focal_px,
                0.0,
                principal_point[0],
                0.0,
                focal_px,
                principal_point[1],
                0.0,
                0.0,
                1.0,
            ),
        }
    }

    pub fn identity() -> Self {
        CameraIntrinsics { matrix: Matrix3::identity() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateCamera("non-finite intrinsics".into()));
        }
        if self.matrix.determinant().abs() < f64::EPSILON {
            return Err(Error::DegenerateCamera("singular intrinsics".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraExtrinsics {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl CameraExtrinsics {
    pub fn identity() -> Self {
        CameraExtrinsics { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    /// Camera at `center` looking horizontally along `(-cos yaw, -sin yaw, 0)`
    /// with world +z up. Image x points right and image y points down.
    pub fn from_yaw(center: [f64; 3], yaw_degrees: f64) -> Self {
        let yaw = yaw_degrees.to_radians();
        let forward = Vector3::new(-yaw.cos(), -yaw.sin(), 0.0);
        let up = Vector3::z();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let c = Vector3::from(center);
        CameraExtrinsics { rotation, translation: -(rotation * c) }
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        if r.iter().chain(self.translation.iter()).any(|v| !v.is_finite()) {
            return Err(Error::DegenerateCamera("non-finite extrinsics".into()));
        }
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > ORTHO_TOL {
            return Err(Error::DegenerateCamera(format!("rotation not orthonormal (max |RᵀR - I| = {err:e})")));
        }
        let det = r.determinant();
        if (det - 1.0).abs() > ORTHO_TOL {
            return Err(Error::DegenerateCamera(format!("rotation determinant {det} != +1")));
        }
        Ok(())
    }

    /// The 3x4 `[R | t]`.
    pub fn matrix(&self) -> Matrix3x4<f64> {
        let mut m = Matrix3x4::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.set_column(3, &self.translation);
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionMatrix {
    pub matrix: Matrix3x4<f64>,
}

impl ProjectionMatrix {
    pub fn new(matrix: Matrix3x4<f64>) -> Result<Self> {
        let sv = matrix.singular_values();
        let max = sv.max();
        let min = sv.min();
        if !(max.is_finite() && min > RANK_TOL * max) {
            return Err(Error::DegenerateCamera(format!("projection rank < 3 (singular values {sv:?})")));
        }
        Ok(ProjectionMatrix { matrix })
    }
}

pub fn compose_projection(intr: &CameraIntrinsics, extr: &CameraExtrinsics) -> Result<ProjectionMatrix> {
    intr.validate()?;
    extr.validate()?;
    ProjectionMatrix::new(intr.matrix * extr.matrix())
}

/// Homogeneous image coordinates `M [x y z 1]ᵀ`, not divided through.
pub fn project(world_points: &[[f64; 3]], proj: &ProjectionMatrix) -> Vec<[f64; 3]> {
    world_points
        .iter()
        .map(|p| {
            let v = proj.matrix * Vector4::new(p[0], p[1], p[2], 1.0);
            [v.x, v.y, v.z]
        })
        .collect()
}

/// A full-rank 3x3 acting on homogeneous image points of one view to produce
/// those of another.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewTransform {
    pub q: Matrix3<f64>,
    /// Lower/upper triangular factors with `q = lower * upper`, when known.
    pub factors: Option<(Matrix3<f64>, Matrix3<f64>)>,
    /// Frobenius residual of the least-squares fit; zero when exact.
    pub residual: f64,
}

impl ViewTransform {
    pub fn identity() -> Self {
        ViewTransform { q: Matrix3::identity(), factors: None, residual: 0.0 }
    }

    pub fn from_matrix(q: Matrix3<f64>) -> Self {
        ViewTransform { q, factors: None, residual: 0.0 }
    }

    pub fn from_factors(lower: Matrix3<f64>, upper: Matrix3<f64>) -> Self {
        ViewTransform { q: lower * upper, factors: Some((lower, upper)), residual: 0.0 }
    }

    pub fn scaled(&self, c: f64) -> Self {
        ViewTransform { q: self.q * c, factors: None, residual: self.residual }
    }
}

/// Least-squares `Q` minimizing `‖Q m_a − m_b‖_F`, i.e. `m_b` times the right
/// pseudo-inverse of `m_a`.
pub fn oracle_view_transform(m_a: &ProjectionMatrix, m_b: &ProjectionMatrix) -> Result<ViewTransform> {
    // Q m_a = m_b  <=>  m_aᵀ Qᵀ = m_bᵀ, a 4x3 least-squares system per column.
    let a_t: Matrix4x3<f64> = m_a.matrix.transpose();
    let svd = a_t.svd(true, true);
    let sv = svd.singular_values;
    if sv.min() <= RANK_TOL * sv.max() {
        return Err(Error::DegeneratePair(format!("source projection is rank deficient ({sv:?})")));
    }
    let q_t = svd
        .solve(&m_b.matrix.transpose(), 0.0)
        .map_err(|e| Error::DegeneratePair(e.to_string()))?;
    let q: Matrix3<f64> = q_t.transpose();
    if q.iter().any(|v| !v.is_finite()) || q.determinant() == 0.0 {
        return Err(Error::DegeneratePair("singular normal equations".into()));
    }
    let residual = (q * m_a.matrix - m_b.matrix).norm();
    Ok(ViewTransform { q, factors: None, residual })
}

/// Left-multiplies every joint by `q` and divides through by the new w.
pub fn apply_view_transform(q: &ViewTransform, seq: &PoseSequence) -> Result<PoseSequence> {
    if !seq.is_normalized() {
        return Err(Error::Contract("apply_view_transform expects a normalized pose sequence".into()));
    }
    let m = q.q;
    let moved = seq.map_coords(|p| {
        let v = m * Vector3::from(p);
        [v.x, v.y, v.z]
    });
    normalize_homogeneous(&moved)
}

/// One camera of a rig.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigView {
    pub name: String,
    pub yaw_degrees: f64,
    pub center_xyz: [f64; 3],
    pub focal_px: f64,
    pub principal_point: [f64; 2],
}

impl RigView {
    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics::new(self.focal_px, self.principal_point)
    }

    pub fn extrinsics(&self) -> CameraExtrinsics {
        CameraExtrinsics::from_yaw(self.center_xyz, self.yaw_degrees)
    }

    pub fn projection(&self) -> Result<ProjectionMatrix> {
        compose_projection(&self.intrinsics(), &self.extrinsics())
    }
}

pub const DEFAULT_FOCAL_PX: f64 = 1000.0;
pub const DEFAULT_PRINCIPAL_POINT: [f64; 2] = [512.0, 384.0];
pub const CAMERA_HEIGHT_M: f64 = 1.0;
pub const DEFAULT_RIG_RADIUS_M: f64 = 10.0;

pub const CASIA_VIEWS: [f64; 11] = [0.0, 18.0, 36.0, 54.0, 72.0, 90.0, 108.0, 126.0, 144.0, 162.0, 180.0];
pub const OU_VIEWS: [f64; 14] =
    [0.0, 15.0, 30.0, 45.0, 60.0, 75.0, 90.0, 180.0, 195.0, 210.0, 225.0, 240.0, 255.0, 270.0];
pub const ACCEPTANCE_VIEWS: [f64; 8] = [0.0, 24.0, 48.0, 72.0, 96.0, 120.0, 144.0, 168.0];

/// A set of cameras with unique yaw angles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub views: Vec<RigView>,
}

fn view_name(yaw: f64) -> String {
    if yaw.fract() == 0.0 {
        format!("v{}", yaw as i64)
    } else {
        format!("v{yaw}")
    }
}

impl CameraRig {
    pub fn new(views: Vec<RigView>) -> Result<Self> {
        let rig = CameraRig { views };
        rig.validate()?;
        Ok(rig)
    }

    pub fn validate(&self) -> Result<()> {
        if self.views.is_empty() {
            return Err(Error::Config("camera rig has no views".into()));
        }
        for (i, a) in self.views.iter().enumerate() {
            if self.views[..i].iter().any(|b| b.yaw_degrees == a.yaw_degrees) {
                return Err(Error::Config(format!("duplicate rig yaw {}", a.yaw_degrees)));
            }
            a.projection()?;
        }
        Ok(())
    }

    /// Cameras on a horizontal circle of `radius` around the origin, each
    /// looking at the circle center at camera height.
    pub fn circle(yaws: &[f64], radius: f64) -> Result<Self> {
        Self::new(
            yaws.iter()
                .map(|&yaw| {
                    let r = yaw.to_radians();
                    RigView {
                        name: view_name(yaw),
                        yaw_degrees: yaw,
                        center_xyz: [radius * r.cos(), radius * r.sin(), CAMERA_HEIGHT_M],
                        focal_px: DEFAULT_FOCAL_PX,
                        principal_point: DEFAULT_PRINCIPAL_POINT,
                    }
                })
                .collect(),
        )
    }

    /// `k` cameras sharing one center on the side of the walkway, rotated
    /// 10 degrees apart around the side-on direction.
    pub fn cocentered(k: usize, radius: f64) -> Result<Self> {
        let center = [0.0, radius, CAMERA_HEIGHT_M];
        Self::new(
            (0..k)
                .map(|i| {
                    let yaw = 90.0 + 10.0 * (i as f64 - (k as f64 - 1.0) / 2.0);
                    RigView {
                        name: view_name(yaw),
                        yaw_degrees: yaw,
                        center_xyz: center,
                        focal_px: DEFAULT_FOCAL_PX,
                        principal_point: DEFAULT_PRINCIPAL_POINT,
                    }
                })
                .collect(),
        )
    }

    /// Named presets: `casia-like`, `ou-like`, `acceptance`, `cocentered-<k>`.
    pub fn preset(name: &str, radius: f64) -> Result<Self> {
        match name {
            "casia-like" => Self::circle(&CASIA_VIEWS, radius),
            "ou-like" => Self::circle(&OU_VIEWS, radius),
            "acceptance" => Self::circle(&ACCEPTANCE_VIEWS, radius),
            other => match other.strip_prefix("cocentered-").map(str::parse::<usize>) {
                Some(Ok(k)) if k >= 1 => Self::cocentered(k, radius),
                _ => Err(Error::Config(format!("unknown rig preset {other:?}"))),
            },
        }
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn yaws(&self) -> Vec<f64> {
        self.views.iter().map(|v| v.yaw_degrees).collect()
    }

    pub fn view_index(&self, yaw: f64) -> Option<usize> {
        self.views.iter().position(|v| v.yaw_degrees == yaw)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("rig serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let rig: CameraRig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        rig.validate()?;
        Ok(rig)
    }

    /// Oracle transform from the camera at yaw `from` to the camera at yaw `to`.
    pub fn oracle(&self, from: f64, to: f64) -> Result<ViewTransform> {
        let a = self.view_index(from).ok_or_else(|| Error::Config(format!("view {from} not in rig")))?;
        let b = self.view_index(to).ok_or_else(|| Error::Config(format!("view {to} not in rig")))?;
        if a == b {
            return Ok(ViewTransform::identity());
        }
        oracle_view_transform(&self.views[a].projection()?, &self.views[b].projection()?)
    }
}

/// 3D joint trajectories: `frames x joints` world points, frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory3d {
    pub joints: usize,
    pub points: Vec<[f64; 3]>,
}

impl Trajectory3d {
    pub fn frames(&self) -> usize {
        self.points.len() / self.joints
    }

    pub fn frame(&self, t: usize) -> &[[f64; 3]] {
        &self.points[t * self.joints..(t + 1) * self.joints]
    }
}

/// Projects and normalizes a trajectory through one camera.
pub fn render_view(walk: &Trajectory3d, proj: &ProjectionMatrix) -> Result<PoseSequence> {
    let seq = PoseSequence::from_coords(walk.joints, project(&walk.points, proj))?;
    normalize_homogeneous(&seq)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairResidual {
    pub from_yaw: f64,
    pub to_yaw: f64,
    /// `‖Q m_a − m_b‖_F / ‖m_b‖_F`.
    pub relative_residual: f64,
    pub mean_joint_error: f64,
    pub max_joint_error: f64,
}

/// For each ordered view pair: how well the oracle transform of view `a`
/// reproduces the true projection in view `b`.
pub fn lemma1_residual(rig: &CameraRig, walk: &Trajectory3d) -> Result<Vec<PairResidual>> {
    let projections = rig.views.iter().map(RigView::projection).collect::<Result<Vec<_>>>()?;
    let renders = projections.iter().map(|p| render_view(walk, p)).collect::<Result<Vec<_>>>()?;
    let mut report = Vec::new();
    for a in 0..rig.len() {
        for b in 0..rig.len() {
            if a == b {
                continue;
            }
            let q = oracle_view_transform(&projections[a], &projections[b])?;
            let moved = apply_view_transform(&q, &renders[a])?;
            let errors: Vec<f64> = moved
                .coords()
                .iter()
                .zip(renders[b].coords())
                .map(|(p, r)| ((p[0] - r[0]).powi(2) + (p[1] - r[1]).powi(2)).sqrt())
                .collect();
            report.push(PairResidual {
                from_yaw: rig.views[a].yaw_degrees,
                to_yaw: rig.views[b].yaw_degrees,
                relative_residual: q.residual / projections[b].matrix.norm(),
                mean_joint_error: errors.iter().sum::<f64>() / errors.len() as f64,
                max_joint_error: errors.iter().cloned().fold(0.0, f64::max),
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rot_z(deg: f64) -> Matrix3<f64> {
        let (s, c) = deg.to_radians().sin_cos();
        Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
    }

    #[test]
    fn identity_projection() {
        let p = compose_projection(&CameraIntrinsics::identity(), &CameraExtrinsics::identity()).unwrap();
        let mut expected = Matrix3x4::zeros();
        expected.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
        assert_eq!(p.matrix, expected);
    }

    #[test]
    fn composed_projection_matches_hand_product() {
        let intr = CameraIntrinsics::new(1000.0, [512.0, 384.0]);
        let extr = CameraExtrinsics::from_yaw([4.0 * 0.3f64.cos(), 4.0 * 0.3f64.sin(), 1.0], 0.3f64.to_degrees());
        let p = compose_projection(&intr, &extr).unwrap();
        let k = intr.matrix;
        let rt = extr.matrix();
        for i in 0..3 {
            for j in 0..4 {
                let mut acc = 0.0;
                for l in 0..3 {
                    acc += k[(i, l)] * rt[(l, j)];
                }
                assert_relative_eq!(p.matrix[(i, j)], acc, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn reflection_is_rejected() {
        let extr = CameraExtrinsics { rotation: Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0)), translation: Vector3::zeros() };
        assert!(matches!(
            compose_projection(&CameraIntrinsics::identity(), &extr),
            Err(Error::DegenerateCamera(_))
        ));
    }

    #[test]
    fn projection_examples() {
        let p = compose_projection(&CameraIntrinsics::identity(), &CameraExtrinsics::identity()).unwrap();
        assert_eq!(project(&[[0.0, 0.0, 1.0]], &p), vec![[0.0, 0.0, 1.0]]);
        let img = project(&[[1.0, 2.0, 2.0]], &p);
        assert_eq!(img, vec![[1.0, 2.0, 2.0]]);
        let seq = normalize_homogeneous(&PoseSequence::from_coords(1, img).unwrap()).unwrap();
        assert_eq!(seq.point(0, 0), [0.5, 1.0, 1.0]);
    }

    #[test]
    fn camera_center_round_trips() {
        let extr = CameraExtrinsics::from_yaw([3.0, -2.0, 1.5], 37.0);
        extr.validate().unwrap();
        assert_relative_eq!(extr.center(), Vector3::new(3.0, -2.0, 1.5), epsilon = 1e-12);
    }

    #[test]
    fn oracle_identity_for_equal_cameras() {
        let rig = CameraRig::circle(&[0.0, 90.0], 5.0).unwrap();
        let p = rig.views[1].projection().unwrap();
        let q = oracle_view_transform(&p, &p).unwrap();
        assert_relative_eq!(q.q, Matrix3::identity(), epsilon = 1e-10);
        assert!(q.residual < 1e-9);
    }

    #[test]
    fn cocentered_pair_is_exact() {
        let intr = CameraIntrinsics::new(1000.0, [512.0, 384.0]);
        let base = CameraExtrinsics::from_yaw([0.0, 6.0, 1.0], 90.0);
        let turned = CameraExtrinsics {
            rotation: base.rotation * rot_z(30.0),
            translation: base.rotation * rot_z(30.0) * -Vector3::new(0.0, 6.0, 1.0),
        };
        let ma = compose_projection(&intr, &base).unwrap();
        let mb = compose_projection(&intr, &turned).unwrap();
        let q = oracle_view_transform(&ma, &mb).unwrap();
        assert!(q.residual < 1e-9 * mb.matrix.norm(), "residual {}", q.residual);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<[f64; 3]> =
            (0..100).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.0..2.0)]).collect();
        let a = normalize_homogeneous(&PoseSequence::from_coords(1, project(&pts, &ma)).unwrap()).unwrap();
        let b = normalize_homogeneous(&PoseSequence::from_coords(1, project(&pts, &mb)).unwrap()).unwrap();
        let moved = apply_view_transform(&q, &a).unwrap();
        for (p, r) in moved.coords().iter().zip(b.coords()) {
            assert!((p[0] - r[0]).abs() < 1e-8 && (p[1] - r[1]).abs() < 1e-8, "{p:?} vs {r:?}");
        }
    }

    #[test]
    fn oracle_satisfies_normal_equations() {
        let rig = CameraRig::circle(&[0.0, 54.0, 126.0], 3.0).unwrap();
        for a in &rig.views {
            for b in &rig.views {
                let (ma, mb) = (a.projection().unwrap(), b.projection().unwrap());
                let q = oracle_view_transform(&ma, &mb).unwrap();
                let normal = (q.q * ma.matrix - mb.matrix) * ma.matrix.transpose();
                let scale = ma.matrix.norm() * mb.matrix.norm();
                assert!(normal.abs().max() < 1e-9 * scale, "{normal}");
            }
        }
    }

    #[test]
    fn displaced_cameras_report_residual() {
        let rig = CameraRig::new(vec![
            RigView { name: "a".into(), yaw_degrees: 90.0, center_xyz: [0.0, 5.0, 1.0], focal_px: 1000.0, principal_point: [512.0, 384.0] },
            RigView { name: "b".into(), yaw_degrees: 80.0, center_xyz: [2.0, 5.0, 1.0], focal_px: 1000.0, principal_point: [512.0, 384.0] },
        ])
        .unwrap();
        let q = rig.oracle(90.0, 80.0).unwrap();
        assert!(q.residual > 1.0);
    }

    #[test]
    fn transform_identity_and_scale() {
        let seq = PoseSequence::from_xy(2, &[[1.0, 2.0], [3.0, -4.0], [0.5, 0.25], [7.0, 8.0]], None).unwrap();
        assert_eq!(apply_view_transform(&ViewTransform::identity(), &seq).unwrap(), seq);
        let doubled = ViewTransform::from_matrix(Matrix3::identity() * 2.0);
        assert_eq!(apply_view_transform(&doubled, &seq).unwrap(), seq);
        let unnormalized = PoseSequence::from_coords(1, vec![[1.0, 1.0, 2.0]]).unwrap();
        assert!(apply_view_transform(&doubled, &unnormalized).is_err());
    }

    #[test]
    fn transform_reports_degenerate_joint() {
        let seq = PoseSequence::from_xy(2, &[[1.0, 2.0], [3.0, 0.0]], None).unwrap();
        // third row picks y, so joint 1 lands at w = 0
        let q = ViewTransform::from_matrix(Matrix3::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0));
        assert!(matches!(apply_view_transform(&q, &seq), Err(Error::DegenerateDepth { frame: 0, joint: 1, .. })));
    }

    #[test]
    fn single_view_rig_has_no_pairs() {
        let rig = CameraRig::circle(&[90.0], 5.0).unwrap();
        let walk = Trajectory3d { joints: 1, points: vec![[0.0, 0.0, 1.0]] };
        assert!(lemma1_residual(&rig, &walk).unwrap().is_empty());
    }

    #[test]
    fn rig_file_round_trip() {
        let rig = CameraRig::preset("casia-like", 10.0).unwrap();
        assert_eq!(rig.len(), 11);
        let back = CameraRig::from_toml(&rig.to_toml()).unwrap();
        assert_eq!(back, rig);
        assert_eq!(CameraRig::preset("ou-like", 10.0).unwrap().len(), 14);
        assert_eq!(CameraRig::preset("cocentered-4", 10.0).unwrap().len(), 4);
        assert!(CameraRig::preset("nope", 10.0).is_err());
    }
}
