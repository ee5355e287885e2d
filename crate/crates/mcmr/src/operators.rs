//! The linear encoding chain A = D F C and the motion warp operators U,
//! with exact adjoints.
//!
//! Every operator here is linear in its image argument and ships with an
//! adjoint that satisfies <A x, y> = <x, A^H y> to near machine precision;
//! [`adjoint_dot_test`] measures the worst relative discrepancy over seeded
//! random probes and is used throughout the test suite.

use crate::fft::{fft2c_inplace, ifft2c_inplace};
use crate::types::{CoilMaps, ComplexImage, MotionField};
use num_complex::Complex64;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

/// A linear map between flat complex vectors, with its adjoint.
pub trait LinearOperator {
    fn in_len(&self) -> usize;
    fn out_len(&self) -> usize;
    fn apply(&self, x: &[Complex64]) -> Vec<Complex64>;
    fn apply_adjoint(&self, y: &[Complex64]) -> Vec<Complex64>;
}

/// Zeroes every row of a row-major H x W k-space buffer that is not in
/// `lines`. Applying it twice equals applying it once.
pub fn apply_mask_rows(k: &mut [Complex64], h: usize, w: usize, lines: &[usize]) {
    assert_eq!(k.len(), h * w);
    let mut keep = vec![false; h];
    for &r in lines {
        keep[r] = true;
    }
    for (row, keep_row) in keep.iter().enumerate() {
        if !keep_row {
            for v in &mut k[row * w..(row + 1) * w] {
                *v = Complex64::new(0.0, 0.0);
            }
        }
    }
}

/// Forward encoding of one frame: per coil q, mask o fft2c(c_q o x).
/// Returns the Q x H x W coil k-space as one contiguous buffer.
pub fn encode_frame(x: &ComplexImage, coils: &CoilMaps, mask_lines: &[usize]) -> Vec<Complex64> {
    let (h, w) = x.shape();
    assert_eq!((coils.height(), coils.width()), (h, w), "coil grid mismatch");
    let q = coils.n_coils();
    let mut out = vec![Complex64::new(0.0, 0.0); q * h * w];
    for qi in 0..q {
        let coil = coils.coil(qi);
        let dst = &mut out[qi * h * w..(qi + 1) * h * w];
        for (d, (xv, cv)) in dst.iter_mut().zip(x.data().iter().zip(coil)) {
            *d = xv * cv;
        }
        fft2c_inplace(dst, h, w);
        apply_mask_rows(dst, h, w, mask_lines);
    }
    out
}

/// Adjoint of [`encode_frame`]: sum_q conj(c_q) o ifft2c(mask o k_q).
pub fn decode_frame(k: &[Complex64], coils: &CoilMaps, mask_lines: &[usize]) -> ComplexImage {
    let (h, w) = (coils.height(), coils.width());
    let q = coils.n_coils();
    assert_eq!(k.len(), q * h * w, "coil k-space length mismatch");
    let mut acc = vec![Complex64::new(0.0, 0.0); h * w];
    let mut buf = vec![Complex64::new(0.0, 0.0); h * w];
    for qi in 0..q {
        buf.copy_from_slice(&k[qi * h * w..(qi + 1) * h * w]);
        apply_mask_rows(&mut buf, h, w, mask_lines);
        ifft2c_inplace(&mut buf, h, w);
        let coil = coils.coil(qi);
        for ((a, b), c) in acc.iter_mut().zip(&buf).zip(coil) {
            *a += c.conj() * b;
        }
    }
    ComplexImage::new(h, w, acc)
}

#[inline]
fn bilinear_corners(sy: f64, sx: f64) -> (isize, isize, [f64; 4]) {
    let y0 = sy.floor();
    let x0 = sx.floor();
    let wy = sy - y0;
    let wx = sx - x0;
    (
        y0 as isize,
        x0 as isize,
        [(1.0 - wy) * (1.0 - wx), (1.0 - wy) * wx, wy * (1.0 - wx), wy * wx],
    )
}

/// Backward warping with bilinear interpolation and zero padding:
/// out(p) = x(p + u(p)). Linear in `x` for fixed `u`.
pub fn warp_apply(x: &ComplexImage, u: &MotionField) -> ComplexImage {
    let (h, w) = x.shape();
    assert_eq!((u.height(), u.width()), (h, w), "field grid mismatch");
    let mut out = vec![Complex64::new(0.0, 0.0); h * w];
    let (hi, wi) = (h as isize, w as isize);
    let src = x.data();
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            let sy = i as f64 + u.dy()[p];
            let sx = j as f64 + u.dx()[p];
            assert!(sy.is_finite() && sx.is_finite(), "non-finite displacement at ({i},{j})");
            let (y0, x0, wts) = bilinear_corners(sy, sx);
            let mut acc = Complex64::new(0.0, 0.0);
            for (k, wt) in wts.iter().enumerate() {
                let yy = y0 + (k as isize >> 1);
                let xx = x0 + (k as isize & 1);
                if yy >= 0 && yy < hi && xx >= 0 && xx < wi {
                    acc += src[yy as usize * w + xx as usize] * wt;
                }
            }
            out[p] = acc;
        }
    }
    ComplexImage::new(h, w, out)
}

/// Exact adjoint of [`warp_apply`] for the same field: splats r(p) onto the
/// bilinear neighbors of p + u(p) with identical weights.
pub fn warp_adjoint(r: &ComplexImage, u: &MotionField) -> ComplexImage {
    let (h, w) = r.shape();
    assert_eq!((u.height(), u.width()), (h, w), "field grid mismatch");
    let mut out = vec![Complex64::new(0.0, 0.0); h * w];
    let (hi, wi) = (h as isize, w as isize);
    let src = r.data();
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            let sy = i as f64 + u.dy()[p];
            let sx = j as f64 + u.dx()[p];
            assert!(sy.is_finite() && sx.is_finite(), "non-finite displacement at ({i},{j})");
            let (y0, x0, wts) = bilinear_corners(sy, sx);
            let v = src[p];
            for (k, wt) in wts.iter().enumerate() {
                let yy = y0 + (k as isize >> 1);
                let xx = x0 + (k as isize & 1);
                if yy >= 0 && yy < hi && xx >= 0 && xx < wi {
                    out[yy as usize * w + xx as usize] += v * wt;
                }
            }
        }
    }
    ComplexImage::new(h, w, out)
}

/// Backward bilinear warp of a real row-major buffer (used on magnitude
/// images by the motion estimator). `valid[p]` is set to false where the
/// sample stencil leaves the grid entirely or partially.
pub fn warp_real(
    src: &[f64],
    h: usize,
    w: usize,
    dy: &[f64],
    dx: &[f64],
    out: &mut [f64],
    valid: &mut [bool],
) {
    assert_eq!(src.len(), h * w);
    let (hi, wi) = (h as isize, w as isize);
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            let sy = i as f64 + dy[p];
            let sx = j as f64 + dx[p];
            let (y0, x0, wts) = bilinear_corners(sy, sx);
            let inside = y0 >= 0 && y0 + 1 < hi && x0 >= 0 && x0 + 1 < wi;
            valid[p] = inside;
            if inside {
                let base = y0 as usize * w + x0 as usize;
                out[p] = src[base] * wts[0]
                    + src[base + 1] * wts[1]
                    + src[base + w] * wts[2]
                    + src[base + w + 1] * wts[3];
            } else {
                let mut acc = 0.0;
                for (k, wt) in wts.iter().enumerate() {
                    let yy = y0 + (k as isize >> 1);
                    let xx = x0 + (k as isize & 1);
                    if yy >= 0 && yy < hi && xx >= 0 && xx < wi {
                        acc += src[yy as usize * w + xx as usize] * wt;
                    }
                }
                out[p] = acc;
            }
        }
    }
}

/// Worst relative adjoint discrepancy over seeded random probe pairs:
/// max over trials of |<A x, y> - <x, A^H y>| / (|A x| * |y|).
pub fn adjoint_dot_test(op: &dyn LinearOperator, trials: usize, seed: u64) -> f64 {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut random_vec = |len: usize| -> Vec<Complex64> {
        (0..len)
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect()
    };
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let x = random_vec(op.in_len());
        let y = random_vec(op.out_len());
        let ax = op.apply(&x);
        let aty = op.apply_adjoint(&y);
        let lhs: Complex64 = ax.iter().zip(&y).map(|(a, b)| a.conj() * b).sum();
        let rhs: Complex64 = x.iter().zip(&aty).map(|(a, b)| a.conj() * b).sum();
        let nax = ax.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        let ny = y.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        let denom = (nax * ny).max(f64::MIN_POSITIVE);
        worst = worst.max((lhs - rhs).norm() / denom);
    }
    worst
}

/// fft2c as an operator value.
pub struct Fft2cOp {
    pub height: usize,
    pub width: usize,
}

impl LinearOperator for Fft2cOp {
    fn in_len(&self) -> usize {
        self.height * self.width
    }
    fn out_len(&self) -> usize {
        self.height * self.width
    }
    fn apply(&self, x: &[Complex64]) -> Vec<Complex64> {
        let mut v = x.to_vec();
        fft2c_inplace(&mut v, self.height, self.width);
        v
    }
    fn apply_adjoint(&self, y: &[Complex64]) -> Vec<Complex64> {
        let mut v = y.to_vec();
        ifft2c_inplace(&mut v, self.height, self.width);
        v
    }
}

/// The per-frame encoding A = D F C as an operator value.
pub struct EncodeOp<'a> {
    pub coils: &'a CoilMaps,
    pub mask_lines: &'a [usize],
}

impl LinearOperator for EncodeOp<'_> {
    fn in_len(&self) -> usize {
        self.coils.height() * self.coils.width()
    }
    fn out_len(&self) -> usize {
        self.coils.n_coils() * self.coils.height() * self.coils.width()
    }
    fn apply(&self, x: &[Complex64]) -> Vec<Complex64> {
        let img = ComplexImage::new(self.coils.height(), self.coils.width(), x.to_vec());
        encode_frame(&img, self.coils, self.mask_lines)
    }
    fn apply_adjoint(&self, y: &[Complex64]) -> Vec<Complex64> {
        decode_frame(y, self.coils, self.mask_lines).into_data()
    }
}

/// The warp U as an operator value.
pub struct WarpOp<'a> {
    pub field: &'a MotionField,
}

impl LinearOperator for WarpOp<'_> {
    fn in_len(&self) -> usize {
        self.field.height() * self.field.width()
    }
    fn out_len(&self) -> usize {
        self.field.height() * self.field.width()
    }
    fn apply(&self, x: &[Complex64]) -> Vec<Complex64> {
        let img = ComplexImage::new(self.field.height(), self.field.width(), x.to_vec());
        warp_apply(&img, self.field).into_data()
    }
    fn apply_adjoint(&self, y: &[Complex64]) -> Vec<Complex64> {
        let img = ComplexImage::new(self.field.height(), self.field.width(), y.to_vec());
        warp_adjoint(&img, self.field).into_data()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::SamplingMaskSet;

    fn random_image(h: usize, w: usize, seed: u64) -> ComplexImage {
        let mut rng = StdRng::seed_from_u64(seed);
        ComplexImage::new(
            h,
            w,
            (0..h * w)
                .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect(),
        )
    }

    /// Smooth random field with displacements bounded by `amp` pixels.
    fn smooth_field(h: usize, w: usize, amp: f64, seed: u64) -> MotionField {
        let mut rng = StdRng::seed_from_u64(seed);
        let (ay, by, ax, bx): (f64, f64, f64, f64) = (
            rng.gen_range(0.5..2.0),
            rng.gen_range(0.5..2.0),
            rng.gen_range(0.5..2.0),
            rng.gen_range(0.5..2.0),
        );
        let mut dy = vec![0.0; h * w];
        let mut dx = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w {
                let (fy, fx) = (i as f64 / h as f64, j as f64 / w as f64);
                dy[i * w + j] = amp * (std::f64::consts::TAU * (ay * fy + by * fx)).sin();
                dx[i * w + j] = amp * (std::f64::consts::TAU * (ax * fx + bx * fy)).cos();
            }
        }
        MotionField::new(h, w, dy, dx)
    }

    fn normalized_coils(q: usize, h: usize, w: usize, seed: u64) -> CoilMaps {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut data: Vec<Complex64> = (0..q * h * w)
            .map(|_| Complex64::new(rng.gen_range(0.2..1.0), rng.gen_range(-0.5..0.5)))
            .collect();
        for p in 0..h * w {
            let ssq: f64 = (0..q).map(|qi| data[qi * h * w + p].norm_sqr()).sum();
            let s = ssq.sqrt();
            for qi in 0..q {
                data[qi * h * w + p] /= s;
            }
        }
        CoilMaps::new(q, h, w, data, vec![1; h * w])
    }

    #[test]
    fn encode_with_identity_coil_and_full_mask_is_fft() {
        let x = random_image(16, 16, 1);
        let coils = CoilMaps::new(1, 16, 16, vec![Complex64::new(1.0, 0.0); 256], vec![1; 256]);
        let lines: Vec<usize> = (0..16).collect();
        let k = encode_frame(&x, &coils, &lines);
        let f = crate::fft::fft2c(&x);
        let err = k
            .iter()
            .zip(f.data())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(err < 1e-13);
    }

    #[test]
    fn masked_rows_are_exactly_zero() {
        let x = random_image(16, 16, 2);
        let coils = normalized_coils(3, 16, 16, 3);
        let lines = vec![0, 4, 8, 9];
        let k = encode_frame(&x, &coils, &lines);
        for qi in 0..3 {
            for row in 0..16 {
                let is_zero = k[qi * 256 + row * 16..qi * 256 + row * 16 + 16]
                    .iter()
                    .all(|v| *v == Complex64::new(0.0, 0.0));
                assert_eq!(is_zero, !lines.contains(&row), "coil {qi} row {row}");
            }
        }
    }

    #[test]
    fn mask_application_is_idempotent() {
        let mut a = random_image(16, 16, 9).into_data();
        let lines = vec![1, 5, 7, 8, 12];
        apply_mask_rows(&mut a, 16, 16, &lines);
        let once = a.clone();
        apply_mask_rows(&mut a, 16, 16, &lines);
        assert_eq!(a, once);
    }

    #[test]
    fn decode_encode_is_identity_on_support_with_full_mask() {
        let x = random_image(16, 16, 4);
        let coils = normalized_coils(4, 16, 16, 5);
        let lines: Vec<usize> = (0..16).collect();
        let back = decode_frame(&encode_frame(&x, &coils, &lines), &coils, &lines);
        let err = back
            .data()
            .iter()
            .zip(x.data())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(err < 1e-10, "AHA != I on support: {err}");
    }

    #[test]
    fn zero_kspace_decodes_to_zero() {
        let coils = normalized_coils(2, 16, 16, 6);
        let img = decode_frame(&vec![Complex64::new(0.0, 0.0); 2 * 256], &coils, &[0, 1, 2]);
        assert!(img.data().iter().all(|v| *v == Complex64::new(0.0, 0.0)));
    }

    #[test]
    fn encode_decode_adjoint_dot_test() {
        let coils = normalized_coils(3, 16, 16, 7);
        let lines = vec![0, 2, 3, 8, 12, 15];
        let op = EncodeOp { coils: &coils, mask_lines: &lines };
        assert!(adjoint_dot_test(&op, 10, 42) < 1e-9);
    }

    #[test]
    fn fft_operator_adjoint_dot_test() {
        let op = Fft2cOp { height: 16, width: 16 };
        assert!(adjoint_dot_test(&op, 10, 43) < 1e-10);
    }

    #[test]
    fn zero_field_warp_is_identity() {
        let x = random_image(12, 10, 8);
        let u = MotionField::zeros(12, 10);
        assert_eq!(warp_apply(&x, &u), x);
        assert_eq!(warp_adjoint(&x, &u), x);
    }

    #[test]
    fn integer_shift_moves_rows_with_zero_fill() {
        let x = random_image(8, 8, 10);
        let u = MotionField::new(8, 8, vec![1.0; 64], vec![0.0; 64]);
        let shifted = warp_apply(&x, &u);
        for i in 0..8 {
            for j in 0..8 {
                let expected = if i + 1 < 8 { x.at(i + 1, j) } else { Complex64::new(0.0, 0.0) };
                assert_eq!(shifted.at(i, j), expected, "at ({i},{j})");
            }
        }
    }

    #[test]
    fn warp_matches_materialized_matrix_on_4x4() {
        let (h, w) = (4, 4);
        let u = smooth_field(h, w, 1.3, 11);
        // Materialize the 16x16 warp matrix column by column.
        let mut cols: Vec<Vec<Complex64>> = Vec::new();
        for p in 0..h * w {
            let mut e = ComplexImage::zeros(h, w);
            e.data_mut()[p] = Complex64::new(1.0, 0.0);
            cols.push(warp_apply(&e, &u).into_data());
        }
        let x = random_image(h, w, 12);
        let direct = warp_apply(&x, &u);
        for row in 0..h * w {
            let mut acc = Complex64::new(0.0, 0.0);
            for (p, col) in cols.iter().enumerate() {
                acc += col[row] * x.data()[p];
            }
            assert!((acc - direct.data()[row]).norm() < 1e-12);
        }
        // Adjoint equals the conjugate transpose of the same matrix.
        let r = random_image(h, w, 13);
        let adj = warp_adjoint(&r, &u);
        for p in 0..h * w {
            let mut acc = Complex64::new(0.0, 0.0);
            for row in 0..h * w {
                acc += cols[p][row].conj() * r.data()[row];
            }
            assert!((acc - adj.data()[p]).norm() < 1e-12);
        }
        // Locality: each basis response touches at most 4 pixels.
        for col in &cols {
            let nnz = col.iter().filter(|v| v.norm() > 0.0).count();
            assert!(nnz <= 4, "warp stencil wider than bilinear: {nnz}");
        }
    }

    #[test]
    fn warp_adjoint_dot_test_on_smooth_fields() {
        for seed in 0..5 {
            let u = smooth_field(16, 16, 2.0, 100 + seed);
            let op = WarpOp { field: &u };
            assert!(adjoint_dot_test(&op, 8, seed) < 1e-9);
        }
    }

    #[test]
    fn broken_adjoint_is_caught_by_dot_test() {
        // Splatting onto the wrong neighbor (weights transposed within the
        // stencil) must blow past the 1e-3 detection threshold.
        struct BrokenWarp<'a> {
            field: &'a MotionField,
        }
        impl LinearOperator for BrokenWarp<'_> {
            fn in_len(&self) -> usize {
                self.field.height() * self.field.width()
            }
            fn out_len(&self) -> usize {
                self.field.height() * self.field.width()
            }
            fn apply(&self, x: &[Complex64]) -> Vec<Complex64> {
                let img = ComplexImage::new(self.field.height(), self.field.width(), x.to_vec());
                warp_apply(&img, self.field).into_data()
            }
            fn apply_adjoint(&self, y: &[Complex64]) -> Vec<Complex64> {
                let (h, w) = (self.field.height(), self.field.width());
                let mut out = vec![Complex64::new(0.0, 0.0); h * w];
                let (hi, wi) = (h as isize, w as isize);
                for i in 0..h {
                    for j in 0..w {
                        let p = i * w + j;
                        let sy = i as f64 + self.field.dy()[p];
                        let sx = j as f64 + self.field.dx()[p];
                        let (y0, x0, wts) = bilinear_corners(sy, sx);
                        // wts[1] and wts[2] swapped: wrong neighbor pairing.
                        let wrong = [wts[0], wts[2], wts[1], wts[3]];
                        for (k, wt) in wrong.iter().enumerate() {
                            let yy = y0 + (k as isize >> 1);
                            let xx = x0 + (k as isize & 1);
                            if yy >= 0 && yy < hi && xx >= 0 && xx < wi {
                                out[yy as usize * w + xx as usize] += y[p] * wt;
                            }
                        }
                    }
                }
                out
            }
        }
        let u = smooth_field(16, 16, 2.0, 77);
        let op = BrokenWarp { field: &u };
        assert!(adjoint_dot_test(&op, 10, 7) > 1e-3);
    }

    #[test]
    fn operator_linearity() {
        let coils = normalized_coils(2, 16, 16, 20);
        let lines = vec![0, 3, 7, 8, 9, 15];
        let u = smooth_field(16, 16, 1.5, 21);
        let ops: Vec<Box<dyn LinearOperator>> = vec![
            Box::new(Fft2cOp { height: 16, width: 16 }),
            Box::new(EncodeOp { coils: &coils, mask_lines: &lines }),
            Box::new(WarpOp { field: &u }),
        ];
        let mut rng = StdRng::seed_from_u64(22);
        for op in &ops {
            let x: Vec<Complex64> = (0..op.in_len())
                .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect();
            let y: Vec<Complex64> = (0..op.in_len())
                .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect();
            let a = Complex64::new(0.6, -0.2);
            let b = Complex64::new(-1.1, 0.8);
            let mixed: Vec<Complex64> =
                x.iter().zip(&y).map(|(xv, yv)| a * xv + b * yv).collect();
            let lhs = op.apply(&mixed);
            let fx = op.apply(&x);
            let fy = op.apply(&y);
            let scale: f64 = lhs.iter().map(|v| v.norm()).fold(0.0, f64::max).max(1.0);
            let err = lhs
                .iter()
                .zip(fx.iter().zip(&fy))
                .map(|(l, (u1, v1))| (l - (a * u1 + b * v1)).norm())
                .fold(0.0, f64::max);
            assert!(err / scale < 1e-10, "linearity violated: {err}");
        }
    }

    #[test]
    fn sampling_mask_center_band_helper_matches_masking() {
        // Masking with the helper band keeps exactly those rows.
        let band = SamplingMaskSet::center_band(16, 4);
        let mut a = vec![Complex64::new(1.0, 0.0); 256];
        let lines: Vec<usize> = band.clone().collect();
        apply_mask_rows(&mut a, 16, 16, &lines);
        for row in 0..16 {
            let nonzero = a[row * 16..(row + 1) * 16].iter().any(|v| v.norm() > 0.0);
            assert_eq!(nonzero, band.contains(&row));
        }
    }
}
