//! Leader/follower contact-force allocation through the grasp matrix.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3, Vector6};

use crate::error::{Error, Result};
use crate::liegroup::Rotation;
use crate::payload::grasp_matrix;

/// Directions in which the internal-force input `η` acts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InternalForceMode {
    /// `λ_f = N(G_f) η` on the follower contacts only.
    Follower,
    /// `λ += N(G) η` over all contacts (internal forces of the whole grasp).
    Grasp,
}

/// Result of one allocation.
#[derive(Clone, Debug, PartialEq)]
pub struct Allocation {
    pub leader: Vec<usize>,
    pub lambda_cmd: DVector<f64>,
    pub eta: DVector<f64>,
    pub nullspace_dim: usize,
}

/// Singular values below this fraction of the largest count as rank loss.
const RANK_TOL: f64 = 1e-10;

/// Precomputed allocator. All bases are built once in the payload frame and
/// rotated with `R_L`, using `G(R) = diag(R, R) G₀ blockdiag(Rᵀ)`.
#[derive(Clone, Debug)]
pub struct Allocator {
    n_contacts: usize,
    leader: Vec<usize>,
    follower: Vec<usize>,
    mode: InternalForceMode,
    leader_pinv: DMatrix<f64>,
    nullspace: DMatrix<f64>,
}

impl Allocator {
    pub fn new(attachments: &[Vector3<f64>], leader: &[usize], mode: InternalForceMode) -> Result<Self> {
        let n_contacts = attachments.len();
        check_leader_set(leader, n_contacts)?;
        let follower: Vec<usize> = (0..n_contacts).filter(|i| !leader.contains(i)).collect();
        let g0 = grasp_matrix(&Rotation::identity(), attachments);
        let g_leader = select_columns(&g0, leader);
        let leader_pinv = right_pseudoinverse(&g_leader)?;
        let nullspace = match mode {
            InternalForceMode::Follower => nullspace_basis(&select_columns(&g0, &follower)),
            InternalForceMode::Grasp => nullspace_basis(&g0),
        };
        Ok(Allocator {
            n_contacts,
            leader: leader.to_vec(),
            follower,
            mode,
            leader_pinv,
            nullspace,
        })
    }

    pub fn leader(&self) -> &[usize] {
        &self.leader
    }

    pub fn mode(&self) -> InternalForceMode {
        self.mode
    }

    /// Dimension of the admissible `η`.
    pub fn nullspace_dim(&self) -> usize {
        self.nullspace.ncols()
    }

    /// Internal-force basis in the inertial frame at attitude `rot`, laid out
    /// over all contacts.
    pub fn internal_basis(&self, rot: &Rotation) -> DMatrix<f64> {
        let k = self.nullspace_dim();
        let mut out = DMatrix::zeros(3 * self.n_contacts, k);
        let contacts: &[usize] = match self.mode {
            InternalForceMode::Follower => &self.follower,
            InternalForceMode::Grasp => &[],
        };
        let r = rot.matrix();
        for col in 0..k {
            match self.mode {
                InternalForceMode::Follower => {
                    for (slot, &i) in contacts.iter().enumerate() {
                        let v = r * block(&self.nullspace, 3 * slot, col);
                        out.view_mut((3 * i, col), (3, 1)).copy_from(&v);
                    }
                }
                InternalForceMode::Grasp => {
                    for i in 0..self.n_contacts {
                        let v = r * block(&self.nullspace, 3 * i, col);
                        out.view_mut((3 * i, col), (3, 1)).copy_from(&v);
                    }
                }
            }
        }
        out
    }

    /// `λ_ℓ = G_ℓ^† W`, follower forces in `ker G_f` (or internal forces over
    /// the whole grasp), with `W = [F; τ]` in the inertial frame.
    pub fn allocate(&self, wrench: &Vector6<f64>, rot: &Rotation, eta: &DVector<f64>) -> Result<Allocation> {
        if eta.len() != self.nullspace_dim() {
            return Err(Error::InvalidInput(format!(
                "internal-force input has dimension {} but the nullspace has dimension {}",
                eta.len(),
                self.nullspace_dim()
            )));
        }
        let r = rot.matrix();
        let rt = r.transpose();
        let f = rt * Vector3::new(wrench[0], wrench[1], wrench[2]);
        let t = rt * Vector3::new(wrench[3], wrench[4], wrench[5]);
        let local = DVector::from_column_slice(&[f.x, f.y, f.z, t.x, t.y, t.z]);
        let leader_local = &self.leader_pinv * local;
        let mut lambda = DVector::zeros(3 * self.n_contacts);
        for (slot, &i) in self.leader.iter().enumerate() {
            let v = r * leader_local.fixed_rows::<3>(3 * slot);
            lambda.rows_mut(3 * i, 3).copy_from(&v);
        }
        if self.nullspace_dim() > 0 {
            lambda += self.internal_basis(rot) * eta;
        }
        Ok(Allocation {
            leader: self.leader.clone(),
            lambda_cmd: lambda,
            eta: eta.clone(),
            nullspace_dim: self.nullspace_dim(),
        })
    }
}

fn block(m: &DMatrix<f64>, row: usize, col: usize) -> Vector3<f64> {
    Vector3::new(m[(row, col)], m[(row + 1, col)], m[(row + 2, col)])
}

fn check_leader_set(leader: &[usize], n_contacts: usize) -> Result<()> {
    if leader.is_empty() || leader.iter().any(|&i| i >= n_contacts) {
        return Err(Error::Configuration(format!(
            "leader contacts {leader:?} must be a non-empty subset of 0..{n_contacts}"
        )));
    }
    let mut sorted = leader.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != leader.len() {
        return Err(Error::Configuration(format!("leader contacts {leader:?} contain duplicates")));
    }
    Ok(())
}

/// Columns of the given contacts (3 columns each).
pub fn select_columns(g: &DMatrix<f64>, contacts: &[usize]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(g.nrows(), 3 * contacts.len());
    for (slot, &i) in contacts.iter().enumerate() {
        out.columns_mut(3 * slot, 3).copy_from(&g.columns(3 * i, 3));
    }
    out
}

/// Moore–Penrose right inverse of a full-row-rank matrix: `Gᵀ(GGᵀ)⁻¹`.
pub fn right_pseudoinverse(g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sv = g.clone().svd(false, false).singular_values;
    let smax = sv.max();
    let rank = sv.iter().filter(|&&s| s > RANK_TOL * smax).count();
    if rank < g.nrows() {
        let smin = sv.iter().copied().fold(f64::INFINITY, f64::min);
        return Err(Error::Allocation {
            rank,
            condition: if smin > 0.0 { smax / smin } else { f64::INFINITY },
        });
    }
    let gram = g * g.transpose();
    let inv = gram
        .cholesky()
        .ok_or(Error::Allocation { rank, condition: f64::INFINITY })?
        .inverse();
    Ok(g.transpose() * inv)
}

/// Orthonormal basis of `ker g` from the singular value decomposition.
pub fn nullspace_basis(g: &DMatrix<f64>) -> DMatrix<f64> {
    let n = g.ncols();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    // Pad to a square matrix so the SVD returns a full right basis.
    let rows = g.nrows().max(n);
    let mut padded = DMatrix::zeros(rows, n);
    padded.view_mut((0, 0), (g.nrows(), n)).copy_from(g);
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("requested v_t");
    let smax = svd.singular_values.max().max(1e-300);
    let null: Vec<usize> = (0..n)
        .filter(|&k| svd.singular_values[k] <= RANK_TOL * smax)
        .collect();
    let mut basis = DMatrix::zeros(n, null.len());
    for (col, &k) in null.iter().enumerate() {
        basis.set_column(col, &v_t.row(k).transpose());
    }
    basis
}

/// One-shot allocation from the grasp geometry (no precomputation).
pub fn allocate(
    wrench: &Vector6<f64>,
    rot: &Rotation,
    attachments: &[Vector3<f64>],
    leader: &[usize],
    eta: &DVector<f64>,
) -> Result<Allocation> {
    check_leader_set(leader, attachments.len())?;
    let g = grasp_matrix(rot, attachments);
    let follower: Vec<usize> = (0..attachments.len()).filter(|i| !leader.contains(i)).collect();
    let pinv = right_pseudoinverse(&select_columns(&g, leader))?;
    let null = nullspace_basis(&select_columns(&g, &follower));
    if eta.len() != null.ncols() {
        return Err(Error::InvalidInput(format!(
            "internal-force input has dimension {} but the follower nullspace has dimension {}",
            eta.len(),
            null.ncols()
        )));
    }
    let lam_l = pinv * DVector::from_column_slice(wrench.as_slice());
    let mut lambda = DVector::zeros(3 * attachments.len());
    for (slot, &i) in leader.iter().enumerate() {
        lambda.rows_mut(3 * i, 3).copy_from(&lam_l.rows(3 * slot, 3));
    }
    if !follower.is_empty() && null.ncols() > 0 {
        let lam_f = &null * eta;
        for (slot, &i) in follower.iter().enumerate() {
            lambda.rows_mut(3 * i, 3).copy_from(&lam_f.rows(3 * slot, 3));
        }
    }
    Ok(Allocation {
        leader: leader.to_vec(),
        lambda_cmd: lambda,
        eta: eta.clone(),
        nullspace_dim: null.ncols(),
    })
}

/// Rotates a payload-frame 3-vector block list (helper for tests and tools).
pub fn rotate_blocks(rot: &Matrix3<f64>, v: &DVector<f64>) -> DVector<f64> {
    let mut out = v.clone();
    for i in 0..v.len() / 3 {
        let b = rot * Vector3::new(v[3 * i], v[3 * i + 1], v[3 * i + 2]);
        out.rows_mut(3 * i, 3).copy_from(&b);
    }
    out
}
