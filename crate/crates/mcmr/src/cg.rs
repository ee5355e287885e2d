//! Conjugate-gradient solver for the per-frame motion-compensated normal
//! equations, plus the motion-free SENSE solve used by the first block.
//!
//! The per-frame system for source frame t1 is
//!
//! ```text
//! ( sum_t2  U^H_(t1->t2) A^H_(t2) A_(t2) U_(t1->t2)  +  1/(2 lambda) I ) x
//!     =  sum_t2 U^H_(t1->t2) A^H_(t2) y_(t2)  +  1/(2 lambda) x_prev
//! ```
//!
//! which decouples over t1, so frames are solved independently.

use crate::operators::{decode_frame, encode_frame, warp_adjoint, warp_apply};
use crate::types::{
    CoilMaps, ComplexImage, KSpaceSet, MotionFieldSet, ReconConfig, SamplingMaskSet,
};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

/// Diagnostics of one CG run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CgReport {
    pub iterations_run: usize,
    /// ||r_k|| / ||rhs|| after the initial guess and after every step.
    pub relative_residual_history: Vec<f64>,
    pub converged: bool,
}

fn dot(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn norm(a: &[Complex64]) -> f64 {
    a.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
}

/// CG on the complex inner-product space for a Hermitian positive
/// semidefinite `apply`. Returns when the relative residual reaches `tol`
/// or after `max_iters` steps; a non-positive curvature direction is
/// reported as breakdown with the best iterate seen so far.
pub fn cg_raw(
    apply: &dyn Fn(&[Complex64]) -> Vec<Complex64>,
    rhs: &[Complex64],
    x0: &[Complex64],
    tol: f64,
    max_iters: usize,
) -> (Vec<Complex64>, CgReport) {
    assert_eq!(rhs.len(), x0.len());
    let rhs_norm = norm(rhs);
    if rhs_norm == 0.0 {
        // Zero data and zero prior: the unique solution of a PD system is 0.
        let n = rhs.len();
        return (
            vec![Complex64::new(0.0, 0.0); n],
            CgReport { iterations_run: 0, relative_residual_history: vec![0.0], converged: true },
        );
    }

    let mut x = x0.to_vec();
    let hx = apply(&x);
    let mut r: Vec<Complex64> = rhs.iter().zip(&hx).map(|(b, h)| b - h).collect();
    let mut rs = dot(&r, &r).re;
    let mut history = vec![rs.sqrt() / rhs_norm];
    let mut best = x.clone();
    let mut best_res = history[0];
    if history[0] <= tol {
        return (x, CgReport { iterations_run: 0, relative_residual_history: history, converged: true });
    }

    let mut p = r.clone();
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..max_iters {
        let hp = apply(&p);
        let php = dot(&p, &hp).re;
        if !(php > 0.0) {
            // Curvature lost to round-off (or a semidefinite direction):
            // keep the best iterate and flag the breakdown.
            return (
                best,
                CgReport {
                    iterations_run: iterations,
                    relative_residual_history: history,
                    converged: false,
                },
            );
        }
        let alpha = rs / php;
        for (xv, pv) in x.iter_mut().zip(&p) {
            *xv += alpha * pv;
        }
        for (rv, hv) in r.iter_mut().zip(&hp) {
            *rv -= alpha * hv;
        }
        let rs_new = dot(&r, &r).re;
        iterations += 1;
        let rel = rs_new.sqrt() / rhs_norm;
        history.push(rel);
        if rel < best_res {
            best_res = rel;
            best.copy_from_slice(&x);
        }
        if rel <= tol {
            converged = true;
            break;
        }
        let beta = rs_new / rs;
        for (pv, rv) in p.iter_mut().zip(&r) {
            *pv = rv + beta * *pv;
        }
        rs = rs_new;
    }
    (
        best,
        CgReport { iterations_run: iterations, relative_residual_history: history, converged },
    )
}

/// Image-typed front end of [`cg_raw`].
pub fn cg(
    normal_op: &dyn Fn(&ComplexImage) -> ComplexImage,
    rhs: &ComplexImage,
    x0: &ComplexImage,
    tol: f64,
    max_iters: usize,
) -> (ComplexImage, CgReport) {
    let (h, w) = rhs.shape();
    let apply = |v: &[Complex64]| -> Vec<Complex64> {
        normal_op(&ComplexImage::new(h, w, v.to_vec())).into_data()
    };
    let (sol, report) = cg_raw(&apply, rhs.data(), x0.data(), tol, max_iters);
    (ComplexImage::new(h, w, sol), report)
}

/// A^H A for one frame: decode(encode(x)) with that frame's mask.
fn gram_frame(x: &ComplexImage, coils: &CoilMaps, lines: &[usize]) -> ComplexImage {
    decode_frame(&encode_frame(x, coils, lines), coils, lines)
}

/// Applies the motion-compensated normal operator for source frame t1.
fn mc_normal_apply(
    x: &ComplexImage,
    t1: usize,
    coils: &CoilMaps,
    masks: &SamplingMaskSet,
    motion: &MotionFieldSet,
    inv_two_lambda: f64,
) -> ComplexImage {
    let (h, w) = x.shape();
    let mut acc = vec![Complex64::new(0.0, 0.0); h * w];
    for t2 in 0..masks.n_frames() {
        let field = motion.field(t1, t2);
        let contribution = if field.is_zero() {
            gram_frame(x, coils, masks.lines(t2))
        } else {
            let warped = warp_apply(x, field);
            let grammed = gram_frame(&warped, coils, masks.lines(t2));
            warp_adjoint(&grammed, field)
        };
        for (a, v) in acc.iter_mut().zip(contribution.data()) {
            *a += v;
        }
    }
    for (a, xv) in acc.iter_mut().zip(x.data()) {
        *a += inv_two_lambda * xv;
    }
    ComplexImage::new(h, w, acc)
}

/// Right-hand side of the frame-t1 normal equations.
fn mc_rhs(
    t1: usize,
    y: &KSpaceSet,
    coils: &CoilMaps,
    masks: &SamplingMaskSet,
    motion: &MotionFieldSet,
    x_prev: &ComplexImage,
    inv_two_lambda: f64,
) -> ComplexImage {
    let (h, w) = x_prev.shape();
    let mut acc = vec![Complex64::new(0.0, 0.0); h * w];
    for t2 in 0..y.n_frames() {
        let decoded = decode_frame(y.frame(t2), coils, masks.lines(t2));
        let field = motion.field(t1, t2);
        let pulled = if field.is_zero() { decoded } else { warp_adjoint(&decoded, field) };
        for (a, v) in acc.iter_mut().zip(pulled.data()) {
            *a += v;
        }
    }
    for (a, xv) in acc.iter_mut().zip(x_prev.data()) {
        *a += inv_two_lambda * xv;
    }
    ComplexImage::new(h, w, acc)
}

/// Solves the motion-compensated normal equations for frame `t1`, warm
/// started from `x_prev_t1`.
pub fn solve_mc_frame(
    t1: usize,
    y: &KSpaceSet,
    coils: &CoilMaps,
    masks: &SamplingMaskSet,
    motion: &MotionFieldSet,
    x_prev_t1: &ComplexImage,
    cfg: &ReconConfig,
) -> (ComplexImage, CgReport) {
    assert!(cfg.lambda > 0.0, "lambda must be positive");
    assert_eq!(y.n_frames(), motion.n_frames(), "motion set frame count mismatch");
    assert_eq!(y.n_frames(), masks.n_frames(), "mask frame count mismatch");
    let inv_two_lambda = 1.0 / (2.0 * cfg.lambda);
    let rhs = mc_rhs(t1, y, coils, masks, motion, x_prev_t1, inv_two_lambda);
    assert!(
        rhs.data().iter().all(|v| v.re.is_finite() && v.im.is_finite()),
        "non-finite right-hand side for frame {t1}"
    );
    let op = |img: &ComplexImage| mc_normal_apply(img, t1, coils, masks, motion, inv_two_lambda);
    cg(&op, &rhs, x_prev_t1, cfg.cg_tol, cfg.cg_max_iters)
}

/// Motion-free per-frame SENSE solve: CG on A^H A x = A^H y from zero,
/// budget-limited to `n_iters` steps as implicit regularization.
pub fn solve_plain_frame(
    t: usize,
    y: &KSpaceSet,
    coils: &CoilMaps,
    masks: &SamplingMaskSet,
    n_iters: usize,
) -> (ComplexImage, CgReport) {
    let (h, w) = (y.height(), y.width());
    let lines = masks.lines(t);
    let rhs = decode_frame(y.frame(t), coils, lines);
    let op = |img: &ComplexImage| gram_frame(img, coils, lines);
    let x0 = ComplexImage::zeros(h, w);
    // The tolerance floor only matters for systems solvable to machine
    // precision before the budget runs out (e.g. full sampling).
    cg(&op, &rhs, &x0, 1e-12, n_iters)
}
