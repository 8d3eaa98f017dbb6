//! Closed-form rotation fits from 3×3 SVDs.

use nalgebra::SVD;

use crate::{Mat3, Vec3};

/// SVD `A = U Σ Vᵀ` with singular values sorted in decreasing order.
fn sorted_svd(a: &Mat3) -> (Mat3, nalgebra::Vector3<f64>, Mat3) {
    let svd = SVD::new(*a, true, true);
    let u = svd.u.expect("u requested");
    let vt = svd.v_t.expect("v_t requested");
    let s = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| s[j].total_cmp(&s[i]).then(i.cmp(&j)));
    let mut us = Mat3::zeros();
    let mut vs = Mat3::zeros();
    let mut ss = nalgebra::Vector3::zeros();
    for (k, &i) in order.iter().enumerate() {
        us.set_column(k, &u.column(i));
        vs.set_column(k, &vt.row(i).transpose());
        ss[k] = s[i];
    }
    (us, ss, vs)
}

/// Nearest rotation to `a` in Frobenius norm: `U·diag(1, 1, det(UVᵀ))·Vᵀ`.
pub fn project_rotation(a: &Mat3) -> Mat3 {
    let (u, _, v) = sorted_svd(a);
    let d = (u * v.transpose()).determinant().signum();
    let d = if d == 0.0 { 1.0 } else { d };
    u * Mat3::from_diagonal(&nalgebra::Vector3::new(1.0, 1.0, d)) * v.transpose()
}

/// Rotation `R` maximizing `tr(R·S)`, i.e. minimizing `Σ‖R aₖ − bₖ‖²` when
/// `S = Σ aₖ bₖᵀ`: `V·diag(1, 1, det(VUᵀ))·Uᵀ` from `S = U Σ Vᵀ`.
///
/// Returns `None` for `S = 0`, where every rotation is optimal.
pub fn fit_rotation(s: &Mat3) -> Option<Mat3> {
    if s.iter().all(|x| *x == 0.0) {
        return None;
    }
    Some(project_rotation(&s.transpose()))
}

/// Least-squares rigid motion `(R, t)` taking `src` onto `dst`.
pub fn kabsch_rigid(src: &[Vec3], dst: &[Vec3]) -> (Mat3, Vec3) {
    let n = src.len().min(dst.len()).max(1) as f64;
    let cs = src.iter().sum::<Vec3>() / n;
    let cd = dst.iter().sum::<Vec3>() / n;
    let mut s = Mat3::zeros();
    for (a, b) in src.iter().zip(dst) {
        s += (a - cs) * (b - cd).transpose();
    }
    let r = fit_rotation(&s).unwrap_or_else(Mat3::identity);
    (r, cd - r * cs)
}

/// `‖RᵀR − I‖_F`.
pub fn orthogonality_error(r: &Mat3) -> f64 {
    (r.transpose() * r - Mat3::identity()).norm()
}

pub fn is_rotation(r: &Mat3, tol: f64) -> bool {
    orthogonality_error(r) < tol && (r.determinant() - 1.0).abs() <= tol
}
