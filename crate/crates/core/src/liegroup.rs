//! Rotation-group primitives: hat/vee maps, attitude error maps on SO(3),
//! the error-transport matrix and the exponential map used by the integrators.

use std::ops::Mul;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Tolerance on orthonormality and determinant for a valid [`Rotation`].
pub const ORTHONORMALITY_TOL: f64 = 1e-9;

/// Tolerance on the symmetric part accepted by [`vee`].
pub const ANTISYMMETRY_TOL: f64 = 1e-9;

/// Angle below which [`exp_so3`] switches to its Taylor expansion.
const SMALL_ANGLE: f64 = 1e-8;

/// Element of SO(3) stored as a 3x3 matrix.
///
/// Values built through [`Rotation::from_matrix`] are checked; the integrators
/// use [`Rotation::from_matrix_unchecked`] for intermediate stage values and
/// re-project with [`Rotation::renormalized`] after every step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        let residual = Self::residual(&m);
        if residual > ORTHONORMALITY_TOL {
            return Err(Error::InvalidInput(format!(
                "matrix is not a rotation (residual {residual:.3e})"
            )));
        }
        Ok(Rotation(m))
    }

    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rotation(m)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix3<f64> {
        self.0
    }

    pub fn transpose(&self) -> Rotation {
        Rotation(self.0.transpose())
    }

    /// Largest of `‖RᵀR − I‖_F` and `|det R − 1|`.
    pub fn residual(m: &Matrix3<f64>) -> f64 {
        let ortho = (m.transpose() * m - Matrix3::identity()).norm();
        ortho.max((m.determinant() - 1.0).abs())
    }

    pub fn orthonormality_residual(&self) -> f64 {
        Self::residual(&self.0)
    }

    /// Closest rotation in the Frobenius sense (polar decomposition).
    pub fn project(m: &Matrix3<f64>) -> Rotation {
        let svd = m.svd(true, true);
        let u = svd.u.expect("svd requested u");
        let v_t = svd.v_t.expect("svd requested v_t");
        let mut d = Matrix3::identity();
        if (u * v_t).determinant() < 0.0 {
            d[(2, 2)] = -1.0;
        }
        Rotation(u * d * v_t)
    }

    /// Projects back onto SO(3) when the residual exceeds [`ORTHONORMALITY_TOL`].
    pub fn renormalized(self) -> Rotation {
        if self.orthonormality_residual() > ORTHONORMALITY_TOL {
            Self::project(&self.0)
        } else {
            self
        }
    }

    pub fn rot_x(angle: f64) -> Rotation {
        exp_so3(&(Vector3::x() * angle))
    }

    pub fn rot_y(angle: f64) -> Rotation {
        exp_so3(&(Vector3::y() * angle))
    }

    pub fn rot_z(angle: f64) -> Rotation {
        exp_so3(&(Vector3::z() * angle))
    }

    /// `R · exp(hat(δ))`, a body-frame increment.
    pub fn perturbed(&self, delta: &Vector3<f64>) -> Rotation {
        Rotation(self.0 * exp_so3(delta).0)
    }

    pub fn transform(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }
}

impl Mul for Rotation {
    type Output = Rotation;

    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl Mul<Vector3<f64>> for Rotation {
    type Output = Vector3<f64>;

    fn mul(self, rhs: Vector3<f64>) -> Vector3<f64> {
        self.0 * rhs
    }
}

/// Cross-product matrix: `hat(v) · w = v × w`.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`hat`]; rejects matrices whose symmetric part exceeds the tolerance.
pub fn vee(m: &Matrix3<f64>) -> Result<Vector3<f64>> {
    let sym = 0.5 * (m + m.transpose());
    let sym_norm = sym.norm();
    if sym_norm > ANTISYMMETRY_TOL {
        return Err(Error::NotAntisymmetric(sym_norm));
    }
    Ok(vee_unchecked(m))
}

/// `vee` of the antisymmetric part of `m`.
pub fn vee_unchecked(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// `e_R = ½ (R_dᵀ R − Rᵀ R_d)^∨`.
pub fn attitude_error(r: &Rotation, r_d: &Rotation) -> Vector3<f64> {
    let a = r_d.0.transpose() * r.0;
    vee_unchecked(&(a - a.transpose())) * 0.5
}

/// `e_ω = ω − Rᵀ R_d ω_d`.
pub fn angular_velocity_error(
    r: &Rotation,
    omega: &Vector3<f64>,
    r_d: &Rotation,
    omega_d: &Vector3<f64>,
) -> Vector3<f64> {
    omega - r.0.transpose() * r_d.0 * omega_d
}

/// `Ψ = ½ tr(I − R_dᵀ R)`, in `[0, 2]`.
pub fn attitude_error_function(r: &Rotation, r_d: &Rotation) -> f64 {
    let tr = (r_d.0.transpose() * r.0).trace();
    (0.5 * (3.0 - tr)).clamp(0.0, 2.0)
}

/// Matrix `E` with `ė_R = E e_ω` along rigid-body kinematics:
/// `E = ½ (tr(RᵀR_d) I − RᵀR_d)`.
pub fn error_transport_matrix(r: &Rotation, r_d: &Rotation) -> Matrix3<f64> {
    let a = r.0.transpose() * r_d.0;
    (Matrix3::identity() * a.trace() - a) * 0.5
}

/// Attitude tracking errors of one rigid body.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttitudeError {
    pub e_r: Vector3<f64>,
    pub e_omega: Vector3<f64>,
    pub psi: f64,
}

impl AttitudeError {
    pub fn new(
        r: &Rotation,
        omega: &Vector3<f64>,
        r_d: &Rotation,
        omega_d: &Vector3<f64>,
    ) -> Self {
        AttitudeError {
            e_r: attitude_error(r, r_d),
            e_omega: angular_velocity_error(r, omega, r_d, omega_d),
            psi: attitude_error_function(r, r_d),
        }
    }
}

/// Rodrigues formula.
pub fn exp_so3(v: &Vector3<f64>) -> Rotation {
    let theta = v.norm();
    let k = hat(v);
    if theta < SMALL_ANGLE {
        return Rotation(Matrix3::identity() + k + k * k * 0.5);
    }
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / (theta * theta);
    Rotation(Matrix3::identity() + k * a + k * k * b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn vec3() -> impl Strategy<Value = Vector3<f64>> {
        (-4.0..4.0f64, -4.0..4.0f64, -4.0..4.0f64).prop_map(|(a, b, c)| Vector3::new(a, b, c))
    }

    #[test]
    fn hat_of_zero_and_e3() {
        assert_eq!(hat(&Vector3::zeros()), Matrix3::zeros());
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        assert_eq!(hat(&Vector3::z()), expected);
    }

    #[test]
    fn vee_rejects_symmetric_perturbation() {
        let mut m = hat(&Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(vee(&m).unwrap(), Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(vee(&Matrix3::zeros()).unwrap(), Vector3::zeros());
        m[(0, 1)] += 1e-3;
        m[(1, 0)] += 1e-3;
        assert!(matches!(vee(&m), Err(Error::NotAntisymmetric(_))));
    }

    #[test]
    fn attitude_error_about_e3_and_e1() {
        let e = attitude_error(&Rotation::identity(), &Rotation::rot_z(FRAC_PI_2));
        assert_relative_eq!(e, Vector3::new(0.0, 0.0, -1.0), epsilon = 1e-15);
        let e = attitude_error(&Rotation::rot_x(0.1), &Rotation::identity());
        assert_relative_eq!(e, Vector3::new(0.1f64.sin(), 0.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn angular_velocity_error_matches_matrix_product() {
        let r_d = Rotation::rot_z(FRAC_PI_2);
        let e = angular_velocity_error(
            &Rotation::identity(),
            &Vector3::zeros(),
            &r_d,
            &Vector3::new(1.0, 0.0, 0.0),
        );
        assert_relative_eq!(e, Vector3::new(0.0, -1.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn error_function_values() {
        assert_relative_eq!(
            attitude_error_function(&Rotation::rot_z(PI), &Rotation::identity()),
            2.0,
            epsilon = 1e-15
        );
        assert_relative_eq!(
            attitude_error_function(&Rotation::rot_z(FRAC_PI_2), &Rotation::identity()),
            1.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn transport_matrix_examples() {
        let r = Rotation::rot_z(0.7);
        assert_relative_eq!(error_transport_matrix(&r, &r), Matrix3::identity(), epsilon = 1e-15);
        let e = error_transport_matrix(&Rotation::rot_z(FRAC_PI_2), &Rotation::identity());
        let expected = (Matrix3::identity() - Rotation::rot_z(-FRAC_PI_2).into_matrix()) * 0.5;
        assert_relative_eq!(e, expected, epsilon = 1e-15);
    }

    #[test]
    fn exp_examples() {
        assert_eq!(exp_so3(&Vector3::zeros()), Rotation::identity());
        let r = exp_so3(&Vector3::new(0.0, 0.0, FRAC_PI_2));
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert_relative_eq!(*r.matrix(), expected, epsilon = 1e-15);
        for v in [Vector3::new(1e-10, 0.0, 0.0), Vector3::new(0.0, PI, 0.0)] {
            assert!(exp_so3(&v).orthonormality_residual() < 1e-12);
        }
    }

    #[test]
    fn projection_restores_rotation() {
        let mut m = Rotation::rot_y(0.3).into_matrix();
        m[(0, 0)] += 1e-4;
        let r = Rotation::from_matrix_unchecked(m).renormalized();
        assert!(r.orthonormality_residual() < 1e-12);
        assert!(Rotation::from_matrix(m).is_err());
    }

    fn transport_residual(r0: Rotation, r_d: Rotation, omega: Vector3<f64>, h: f64) -> f64 {
        let e0 = attitude_error(&r0, &r_d);
        let r1 = r0.perturbed(&(omega * h));
        let e1 = attitude_error(&r1, &r_d);
        // R_d is constant, so e_ω = ω.
        ((e1 - e0) / h - error_transport_matrix(&r0, &r_d) * omega).norm()
    }

    proptest! {
        #[test]
        fn hat_is_cross_product(v in vec3(), w in vec3()) {
            prop_assert!((hat(&v) * w - v.cross(&w)).amax() < 1e-14);
            prop_assert_eq!(vee(&hat(&v)).unwrap(), v);
            let m = hat(&v);
            prop_assert_eq!(m.transpose(), -m);
        }

        #[test]
        fn exp_is_a_rotation(v in vec3()) {
            prop_assert!(exp_so3(&v).orthonormality_residual() < 1e-12);
        }

        #[test]
        fn errors_vanish_at_coincidence(v in vec3(), w in vec3()) {
            let r = exp_so3(&v);
            prop_assert!(attitude_error(&r, &r).norm() < 1e-14);
            prop_assert!(attitude_error_function(&r, &r) < 1e-14);
            let r_d = exp_so3(&w);
            let psi = attitude_error_function(&r, &r_d);
            prop_assert!((0.0..=2.0).contains(&psi));
            prop_assert!((attitude_error(&r, &r_d) + attitude_error(&r_d, &r)).norm() < 1e-14);
        }

        #[test]
        fn transport_is_first_order_consistent(v in vec3(), w in vec3(), om in vec3()) {
            let (r0, r_d) = (exp_so3(&v), exp_so3(&w));
            let coarse = transport_residual(r0, r_d, om, 1e-4);
            let fine = transport_residual(r0, r_d, om, 5e-5);
            // Observed order >= 1 under step halving, or already at round-off.
            prop_assert!(fine <= 0.55 * coarse || fine < 1e-8, "{} {}", coarse, fine);
        }
    }
}
