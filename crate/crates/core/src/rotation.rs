//! 6D rotation math: Gram-Schmidt orthonormalization, the randomized inverse
//! Gram-Schmidt augmentation, conversions to rotation matrices / rotation
//! vectors, and the transposed pose layout.

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// Tolerance for the unit-norm and orthogonality invariants of [`Rotation6D`].
pub const ORTHONORMAL_TOL: f64 = 1e-6;
/// Norms below this make Gram-Schmidt undefined.
pub const DEGENERATE_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RotationError {
    #[error("degenerate 6D vector")]
    Degenerate,
    #[error("not an orthonormal 6D rotation (norm error {norm_err:.3e}, dot {dot:.3e})")]
    NotOrthonormal { norm_err: f64, dot: f64 },
    #[error("pose length {0} is not a positive multiple of 6")]
    PoseLength(usize),
    #[error("invalid augmentation parameters: k = {k}, sigma = {sigma}")]
    AugmentParams { k: f64, sigma: f64 },
}

pub(crate) fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn norm(a: &Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn scale(a: &Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

/// One joint's rotation as the first two columns of its rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation6D {
    b1: Vec3,
    b2: Vec3,
}

impl Rotation6D {
    pub const IDENTITY: Rotation6D = Rotation6D {
        b1: [1.0, 0.0, 0.0],
        b2: [0.0, 1.0, 0.0],
    };

    /// Validates orthonormality within [`ORTHONORMAL_TOL`].
    pub fn new(b1: Vec3, b2: Vec3) -> Result<Self, RotationError> {
        Self::with_tolerance(b1, b2, ORTHONORMAL_TOL)
    }

    pub fn with_tolerance(b1: Vec3, b2: Vec3, tol: f64) -> Result<Self, RotationError> {
        let norm_err = (norm(&b1) - 1.0).abs().max((norm(&b2) - 1.0).abs());
        let d = dot(&b1, &b2);
        if !(norm_err <= tol && d.abs() <= tol) {
            return Err(RotationError::NotOrthonormal { norm_err, dot: d });
        }
        Ok(Rotation6D { b1, b2 })
    }

    /// First two columns of a rotation matrix.
    pub fn from_matrix(m: &Mat3) -> Result<Self, RotationError> {
        Self::new(
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
        )
    }

    pub fn b1(&self) -> Vec3 {
        self.b1
    }

    pub fn b2(&self) -> Vec3 {
        self.b2
    }

    pub fn to_raw(self) -> RawRotation6D {
        RawRotation6D {
            a1: self.b1,
            a2: self.b2,
        }
    }
}

/// An arbitrary (generally non-orthonormal) 6D vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawRotation6D {
    pub a1: Vec3,
    pub a2: Vec3,
}

impl RawRotation6D {
    pub fn new(a1: Vec3, a2: Vec3) -> Self {
        RawRotation6D { a1, a2 }
    }
}

impl From<Rotation6D> for RawRotation6D {
    fn from(r: Rotation6D) -> Self {
        r.to_raw()
    }
}

/// Parameters of the inverse Gram-Schmidt noise: `rho ~ Gamma(k, 1/k)`,
/// `alpha ~ N(0, sigma^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentParams {
    pub k: f64,
    pub sigma: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams { k: 100.0, sigma: 0.1 }
    }
}

impl AugmentParams {
    pub fn new(k: f64, sigma: f64) -> Result<Self, RotationError> {
        let p = AugmentParams { k, sigma };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), RotationError> {
        if self.k > 0.0 && self.k.is_finite() && self.sigma >= 0.0 && self.sigma.is_finite() {
            Ok(())
        } else {
            Err(RotationError::AugmentParams {
                k: self.k,
                sigma: self.sigma,
            })
        }
    }

    /// Gamma scale; the mean of rho is always 1.
    pub fn theta(&self) -> f64 {
        1.0 / self.k
    }
}

/// The three scalars one inverse Gram-Schmidt draw consumes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeNoise {
    pub rho1: f64,
    pub rho2: f64,
    pub alpha: f64,
}

/// Source of inverse Gram-Schmidt noise.
///
/// Implemented for every [`Rng`] (Marsaglia-Tsang Gamma, Ziggurat normal) and
/// for [`IdentityNoise`], the zero-noise limit.
pub trait AugmentNoise {
    fn draw(&mut self, params: &AugmentParams) -> ShapeNoise;
}

impl<R: Rng + ?Sized> AugmentNoise for R {
    fn draw(&mut self, params: &AugmentParams) -> ShapeNoise {
        let gamma = Gamma::new(params.k, params.theta()).expect("validated augmentation params");
        let mut rho = || loop {
            let r: f64 = gamma.sample(self);
            if r > DEGENERATE_TOL {
                break r;
            }
        };
        let rho1 = rho();
        let rho2 = rho();
        let z: f64 = StandardNormal.sample(self);
        ShapeNoise {
            rho1,
            rho2,
            alpha: params.sigma * z,
        }
    }
}

/// `rho1 = rho2 = 1`, `alpha = 0`.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityNoise;

impl AugmentNoise for IdentityNoise {
    fn draw(&mut self, _params: &AugmentParams) -> ShapeNoise {
        ShapeNoise {
            rho1: 1.0,
            rho2: 1.0,
            alpha: 0.0,
        }
    }
}

/// Orthonormalizes `raw`: `b1 = a1/|a1|`, `b2 = normalize(a2 - (a2.b1) b1)`.
pub fn gram_schmidt(raw: &RawRotation6D) -> Result<Rotation6D, RotationError> {
    let n1 = norm(&raw.a1);
    if !(n1 >= DEGENERATE_TOL) {
        return Err(RotationError::Degenerate);
    }
    let b1 = scale(&raw.a1, 1.0 / n1);
    let p = dot(&raw.a2, &b1);
    let resid = [
        raw.a2[0] - p * b1[0],
        raw.a2[1] - p * b1[1],
        raw.a2[2] - p * b1[2],
    ];
    let n2 = norm(&resid);
    if !(n2 >= DEGENERATE_TOL) {
        return Err(RotationError::Degenerate);
    }
    Ok(Rotation6D {
        b1,
        b2: scale(&resid, 1.0 / n2),
    })
}

/// Draws a non-orthonormal 6D vector whose Gram-Schmidt image is `r`:
/// `a1 = rho1 b1`, `a2 = rho2 b2 + alpha a1`.
pub fn inverse_gram_schmidt<N: AugmentNoise + ?Sized>(
    r: &Rotation6D,
    params: &AugmentParams,
    noise: &mut N,
) -> RawRotation6D {
    let ShapeNoise { rho1, rho2, alpha } = noise.draw(params);
    let a1 = scale(&r.b1, rho1);
    let a2 = [
        rho2 * r.b2[0] + alpha * a1[0],
        rho2 * r.b2[1] + alpha * a1[1],
        rho2 * r.b2[2] + alpha * a1[2],
    ];
    RawRotation6D { a1, a2 }
}

/// Rotation matrix with columns `b1`, `b2`, `b1 x b2`.
pub fn rotmat_from_6d(r: &Rotation6D) -> Mat3 {
    let b3 = cross(&r.b1, &r.b2);
    [
        [r.b1[0], r.b2[0], b3[0]],
        [r.b1[1], r.b2[1], b3[1]],
        [r.b1[2], r.b2[2], b3[2]],
    ]
}

/// Rotation vector (axis times angle, angle in `[0, pi]`).
///
/// At an angle of exactly pi both `n` and `-n` describe the rotation; the
/// axis whose first nonzero component is positive is returned.
pub fn rotvec_from_matrix(m: &Mat3) -> Vec3 {
    let trace = m[0][0] + m[1][1] + m[2][2];
    let cos = ((trace - 1.0) * 0.5).clamp(-1.0, 1.0);
    // 2 sin(angle) * axis
    let w = [m[2][1] - m[1][2], m[0][2] - m[2][0], m[1][0] - m[0][1]];
    // atan2 stays accurate near 0 and pi where acos does not.
    let angle = (0.5 * norm(&w)).atan2(cos);

    if angle < 1e-6 {
        // first-order: log(R) ~ (R - R^T)/2
        return scale(&w, 0.5);
    }
    if angle < std::f64::consts::PI - 1e-4 {
        return scale(&w, angle / (2.0 * angle.sin()));
    }

    // Near pi the antisymmetric part vanishes; recover the axis from the
    // symmetric part (R + R^T)/2 = cos I + (1 - cos) n n^T.
    let one_minus_cos = 1.0 - cos;
    let sym = |i: usize, j: usize| 0.5 * (m[i][j] + m[j][i]);
    let diag = [
        (sym(0, 0) - cos) / one_minus_cos,
        (sym(1, 1) - cos) / one_minus_cos,
        (sym(2, 2) - cos) / one_minus_cos,
    ];
    let i = (0..3)
        .max_by(|&a, &b| diag[a].total_cmp(&diag[b]))
        .unwrap_or(0);
    let mut axis = [0.0; 3];
    for (j, a) in axis.iter_mut().enumerate() {
        *a = if j == i {
            diag[i].max(0.0)
        } else {
            sym(i, j) / one_minus_cos
        };
    }
    let n = norm(&axis);
    let mut axis = scale(&axis, 1.0 / n);

    if dot(&w, &w).sqrt() > 1e-12 {
        if dot(&axis, &w) < 0.0 {
            axis = scale(&axis, -1.0);
        }
    } else if let Some(first) = axis.iter().copied().find(|c| c.abs() > 1e-12) {
        if first < 0.0 {
            axis = scale(&axis, -1.0);
        }
    }
    scale(&axis, angle)
}

pub fn rotvec_from_6d(r: &Rotation6D) -> Vec3 {
    rotvec_from_matrix(&rotmat_from_6d(r))
}

/// Rodrigues' formula.
pub fn rotmat_from_rotvec(v: &Vec3) -> Mat3 {
    let angle = norm(v);
    let (a, b) = if angle < 1e-8 {
        (1.0 - angle * angle / 6.0, 0.5 - angle * angle / 24.0)
    } else {
        (angle.sin() / angle, (1.0 - angle.cos()) / (angle * angle))
    };
    let [x, y, z] = *v;
    let k = [[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]];
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let kk: f64 = (0..3).map(|l| k[i][l] * k[l][j]).sum();
            m[i][j] = if i == j { 1.0 } else { 0.0 } + a * k[i][j] + b * kk;
        }
    }
    m
}

pub fn rotation_from_rotvec(v: &Vec3) -> Rotation6D {
    let m = rotmat_from_rotvec(v);
    Rotation6D {
        b1: [m[0][0], m[1][0], m[2][0]],
        b2: [m[0][1], m[1][1], m[2][1]],
    }
}

/// Number of non-root joints in a body pose.
pub const POSE_JOINTS: usize = 21;
/// Length of a flattened pose: 21 joints x 6 components.
pub const POSE_DIM: usize = POSE_JOINTS * 6;

/// A flattened pose in the transposed layout.
///
/// With `J` joints, joint `j`'s first 3-vector sits at `[3j, 3j+3)` and its
/// second 3-vector at `[3J + 3j, 3J + 3j + 3)`. The first half therefore
/// conditions the second half in a coupling layer and vice versa.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseVector {
    values: Vec<f64>,
}

impl PoseVector {
    pub fn from_values(values: Vec<f64>) -> Result<Self, RotationError> {
        if values.is_empty() || values.len() % 6 != 0 {
            return Err(RotationError::PoseLength(values.len()));
        }
        Ok(PoseVector { values })
    }

    pub fn identity(joints: usize) -> Self {
        transpose_to_flat(&vec![Rotation6D::IDENTITY.to_raw(); joints])
    }

    pub fn joint_count(&self) -> usize {
        self.values.len() / 6
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn joint(&self, j: usize) -> RawRotation6D {
        joint_from_flat(&self.values, j)
    }

    /// Orthonormalizes every joint.
    pub fn orthonormalize(&self) -> Result<PoseVector, RotationError> {
        let joints = transpose_to_joints(self)
            .iter()
            .map(|raw| gram_schmidt(raw).map(Rotation6D::to_raw))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(transpose_to_flat(&joints))
    }
}

impl TryFrom<Vec<f64>> for PoseVector {
    type Error = RotationError;

    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        PoseVector::from_values(values)
    }
}

impl AsRef<[f64]> for PoseVector {
    fn as_ref(&self) -> &[f64] {
        &self.values
    }
}

/// Reads joint `j` out of a transposed flat pose slice.
pub fn joint_from_flat(flat: &[f64], j: usize) -> RawRotation6D {
    let half = flat.len() / 2;
    let a1 = [flat[3 * j], flat[3 * j + 1], flat[3 * j + 2]];
    let a2 = [
        flat[half + 3 * j],
        flat[half + 3 * j + 1],
        flat[half + 3 * j + 2],
    ];
    RawRotation6D { a1, a2 }
}

/// Writes joint `j` into a transposed flat pose slice.
pub fn write_joint_to_flat(flat: &mut [f64], j: usize, raw: &RawRotation6D) {
    let half = flat.len() / 2;
    flat[3 * j..3 * j + 3].copy_from_slice(&raw.a1);
    flat[half + 3 * j..half + 3 * j + 3].copy_from_slice(&raw.a2);
}

pub fn transpose_to_flat(joints: &[RawRotation6D]) -> PoseVector {
    let mut values = vec![0.0; joints.len() * 6];
    for (j, raw) in joints.iter().enumerate() {
        write_joint_to_flat(&mut values, j, raw);
    }
    PoseVector { values }
}

pub fn transpose_to_joints(p: &PoseVector) -> Vec<RawRotation6D> {
    (0..p.joint_count()).map(|j| p.joint(j)).collect()
}

/// Like [`transpose_to_joints`] but requires exactly `joints` entries.
pub fn transpose_to_joints_checked(
    values: &[f64],
    joints: usize,
) -> Result<Vec<RawRotation6D>, RotationError> {
    if values.len() != joints * 6 || joints == 0 {
        return Err(RotationError::PoseLength(values.len()));
    }
    Ok((0..joints).map(|j| joint_from_flat(values, j)).collect())
}

/// Re-randomizes every joint of a transposed flat pose in place.
///
/// `flat` must hold orthonormal joints.
pub fn augment_flat_pose<N: AugmentNoise + ?Sized>(
    flat: &mut [f64],
    params: &AugmentParams,
    noise: &mut N,
) {
    let joints = flat.len() / 6;
    for j in 0..joints {
        let raw = joint_from_flat(flat, j);
        let r = Rotation6D {
            b1: raw.a1,
            b2: raw.a2,
        };
        let aug = inverse_gram_schmidt(&r, params, noise);
        write_joint_to_flat(flat, j, &aug);
    }
}

/// Orthonormalizes every joint of a transposed flat pose in place.
pub fn orthonormalize_flat_pose(flat: &mut [f64]) -> Result<(), RotationError> {
    let joints = flat.len() / 6;
    for j in 0..joints {
        let r = gram_schmidt(&joint_from_flat(flat, j))?;
        write_joint_to_flat(flat, j, &r.to_raw());
    }
    Ok(())
}
