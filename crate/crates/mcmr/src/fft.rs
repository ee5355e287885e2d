//! Centered, orthonormal 2D Fourier transforms.
//!
//! `fft2c` places DC at (H/2, W/2) and preserves the l2 norm in both
//! directions (1/sqrt(HW) scaling each way), so the encoding operator stays
//! well-scaled across grid sizes. Plans are cached per length and shared.

use crate::types::ComplexImage;
use num_complex::Complex64;
use once_cell::sync::Lazy;
use rustfft::{Fft, FftDirection, FftPlanner};
use std::collections::HashMap;
use std::sync::{Arc, Mutex};

static PLANS: Lazy<Mutex<HashMap<(usize, bool), Arc<dyn Fft<f64>>>>> =
    Lazy::new(|| Mutex::new(HashMap::new()));

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    let mut cache = PLANS.lock().unwrap();
    cache
        .entry((len, inverse))
        .or_insert_with(|| {
            let mut planner = FftPlanner::new();
            planner.plan_fft(
                len,
                if inverse { FftDirection::Inverse } else { FftDirection::Forward },
            )
        })
        .clone()
}

fn transpose(src: &[Complex64], dst: &mut [Complex64], rows: usize, cols: usize) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

/// Unshifted, unnormalized 2D transform of a row-major H x W buffer.
fn fft2_raw(data: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    let row_fft = plan(w, inverse);
    let mut scratch = vec![Complex64::new(0.0, 0.0); row_fft.get_inplace_scratch_len()];
    row_fft.process_with_scratch(data, &mut scratch);

    let col_fft = plan(h, inverse);
    let mut tmp = vec![Complex64::new(0.0, 0.0); h * w];
    transpose(data, &mut tmp, h, w);
    scratch.resize(col_fft.get_inplace_scratch_len(), Complex64::new(0.0, 0.0));
    col_fft.process_with_scratch(&mut tmp, &mut scratch);
    transpose(&tmp, data, w, h);
}

/// out[i] = in[(i + shift) mod n] applied along both axes.
fn circular_shift2(data: &mut [Complex64], h: usize, w: usize, shift_h: usize, shift_w: usize) {
    let mut tmp = vec![Complex64::new(0.0, 0.0); h * w];
    for r in 0..h {
        let src_r = (r + shift_h) % h;
        for c in 0..w {
            let src_c = (c + shift_w) % w;
            tmp[r * w + c] = data[src_r * w + src_c];
        }
    }
    data.copy_from_slice(&tmp);
}

fn fftshift2(data: &mut [Complex64], h: usize, w: usize) {
    circular_shift2(data, h, w, h.div_ceil(2), w.div_ceil(2));
}

fn ifftshift2(data: &mut [Complex64], h: usize, w: usize) {
    circular_shift2(data, h, w, h / 2, w / 2);
}

/// In-place centered orthonormal forward transform of a row-major buffer.
pub fn fft2c_inplace(data: &mut [Complex64], h: usize, w: usize) {
    assert!(h >= 8 && w >= 8, "fft2c requires at least an 8x8 grid");
    assert_eq!(data.len(), h * w);
    ifftshift2(data, h, w);
    fft2_raw(data, h, w, false);
    fftshift2(data, h, w);
    let scale = 1.0 / ((h * w) as f64).sqrt();
    for v in data.iter_mut() {
        *v *= scale;
    }
}

/// In-place centered orthonormal inverse transform; exact inverse and exact
/// adjoint of [`fft2c_inplace`].
pub fn ifft2c_inplace(data: &mut [Complex64], h: usize, w: usize) {
    assert!(h >= 8 && w >= 8, "ifft2c requires at least an 8x8 grid");
    assert_eq!(data.len(), h * w);
    ifftshift2(data, h, w);
    fft2_raw(data, h, w, true);
    fftshift2(data, h, w);
    let scale = 1.0 / ((h * w) as f64).sqrt();
    for v in data.iter_mut() {
        *v *= scale;
    }
}

pub fn fft2c(img: &ComplexImage) -> ComplexImage {
    let (h, w) = img.shape();
    let mut data = img.data().to_vec();
    fft2c_inplace(&mut data, h, w);
    ComplexImage::new(h, w, data)
}

pub fn ifft2c(ksp: &ComplexImage) -> ComplexImage {
    let (h, w) = ksp.shape();
    let mut data = ksp.data().to_vec();
    ifft2c_inplace(&mut data, h, w);
    ComplexImage::new(h, w, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

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

    fn inner(a: &ComplexImage, b: &ComplexImage) -> Complex64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x.conj() * y).sum()
    }

    #[test]
    fn constant_image_maps_to_center_impulse() {
        let img = ComplexImage::new(16, 16, vec![Complex64::new(1.0, 0.0); 256]);
        let k = fft2c(&img);
        for r in 0..16 {
            for c in 0..16 {
                let v = k.at(r, c);
                if (r, c) == (8, 8) {
                    assert!((v - Complex64::new(16.0, 0.0)).norm() < 1e-12, "center bin {v}");
                } else {
                    assert!(v.norm() < 1e-12, "leak at ({r},{c}): {v}");
                }
            }
        }
    }

    #[test]
    fn center_impulse_maps_to_constant_image() {
        let mut k = ComplexImage::zeros(16, 16);
        *k.at_mut(8, 8) = Complex64::new(16.0, 0.0);
        let img = ifft2c(&k);
        for v in img.data() {
            assert!((v - Complex64::new(1.0, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn inverse_identity() {
        for (h, w) in [(16, 16), (8, 12), (32, 24)] {
            let x = random_image(h, w, 11);
            let back = ifft2c(&fft2c(&x));
            let err: f64 = x
                .data()
                .iter()
                .zip(back.data())
                .map(|(a, b)| (a - b).norm())
                .fold(0.0, f64::max);
            assert!(err < 1e-12, "{h}x{w}: max err {err}");
            let fwd = fft2c(&ifft2c(&x));
            let err2: f64 = x
                .data()
                .iter()
                .zip(fwd.data())
                .map(|(a, b)| (a - b).norm())
                .fold(0.0, f64::max);
            assert!(err2 < 1e-12, "{h}x{w}: max err {err2}");
        }
    }

    #[test]
    fn parseval() {
        let x = random_image(32, 32, 5);
        let k = fft2c(&x);
        let nx = x.norm_l2();
        let nk = k.norm_l2();
        assert!((nx - nk).abs() / nx < 1e-10, "{nx} vs {nk}");
    }

    #[test]
    fn fft_adjoint_is_ifft() {
        let x = random_image(16, 16, 1);
        let y = random_image(16, 16, 2);
        let lhs = inner(&fft2c(&x), &y);
        let rhs = inner(&x, &ifft2c(&y));
        let denom = fft2c(&x).norm_l2() * y.norm_l2();
        assert!((lhs - rhs).norm() / denom < 1e-10);
    }

    #[test]
    fn linearity() {
        let x = random_image(16, 16, 3);
        let y = random_image(16, 16, 4);
        let a = Complex64::new(0.3, -1.2);
        let b = Complex64::new(-0.7, 0.4);
        let combined = ComplexImage::new(
            16,
            16,
            x.data().iter().zip(y.data()).map(|(u, v)| a * u + b * v).collect(),
        );
        let lhs = fft2c(&combined);
        let fx = fft2c(&x);
        let fy = fft2c(&y);
        let err = lhs
            .data()
            .iter()
            .zip(fx.data().iter().zip(fy.data()))
            .map(|(l, (u, v))| (l - (a * u + b * v)).norm())
            .fold(0.0, f64::max);
        assert!(err < 1e-10, "linearity err {err}");
    }

    #[test]
    fn odd_sizes_roundtrip() {
        let x = random_image(9, 13, 8);
        let back = ifft2c(&fft2c(&x));
        let err: f64 = x
            .data()
            .iter()
            .zip(back.data())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(err < 1e-12);
    }
}
