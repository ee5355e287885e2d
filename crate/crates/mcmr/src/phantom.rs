//! Synthetic experiment factory: a dynamic 2D phantom with analytic
//! ground-truth motion, smooth coil maps, variable-density k-t undersampling
//! masks, and k-space simulation.
//!
//! The phantom deforms a piecewise-smooth reference scene through a radial
//! contraction around the inner-ellipse center, cycled sinusoidally over the
//! N frames. Because the deformation is analytic and invertible along rays,
//! the displacement between any two phases is available exactly (the radial
//! inverse is found by safeguarded Newton to machine precision), giving an
//! exact end-point-error oracle for the motion estimator.

use crate::fft::fft2c_inplace;
use crate::operators::apply_mask_rows;
use crate::types::{
    CoilMaps, ComplexImage, ImageSequence, KSpaceSet, MotionField, MotionFieldSet, SamplingMaskSet,
};
use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub n_frames: usize,
    pub height: usize,
    pub width: usize,
    /// Peak displacement (pixels) of the contracting ring over the cycle.
    pub motion_amplitude: f64,
    /// Number of random texture ellipses inside the body.
    pub n_ellipses: usize,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            n_frames: 25,
            height: 128,
            width: 128,
            motion_amplitude: 3.0,
            n_ellipses: 5,
            seed: 1,
        }
    }
}

struct TextureEllipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    amp: f64,
}

/// Analytic deformable scene; all geometry lives in material (reference)
/// coordinates and is carried along by the deformation.
pub(crate) struct PhantomModel {
    n_frames: usize,
    height: usize,
    width: usize,
    /// Deformation center (the "heart" center).
    cy: f64,
    cx: f64,
    /// Radial falloff scale of the deformation.
    r0: f64,
    /// Peak relative contraction; displacement peaks at r0 * exp(-1/2) * a.
    a_peak: f64,
    ellipses: Vec<TextureEllipse>,
}

fn smooth_ind(v: f64, sharpness: f64) -> f64 {
    1.0 / (1.0 + (-v * sharpness).exp())
}

impl PhantomModel {
    pub(crate) fn new(spec: &PhantomSpec) -> Result<Self, String> {
        if spec.n_frames < 2 {
            return Err(format!("phantom needs at least 2 frames, got {}", spec.n_frames));
        }
        if spec.height < 8 || spec.width < 8 {
            return Err(format!("grid {}x{} too small", spec.height, spec.width));
        }
        if spec.motion_amplitude < 0.0 {
            return Err("motion amplitude must be >= 0".into());
        }
        let min_dim = spec.height.min(spec.width) as f64;
        let r0 = 0.22 * min_dim;
        // Peak material displacement is a * r0 * exp(-1/2); keep the radial
        // map strictly monotone (|a| * 0.447 < 1) with margin.
        let a_peak = spec.motion_amplitude * (0.5f64).exp() / r0;
        if a_peak > 0.9 {
            return Err(format!(
                "motion amplitude {} px too large for a {}x{} grid (limit {:.2} px)",
                spec.motion_amplitude,
                spec.height,
                spec.width,
                0.9 * r0 * (-0.5f64).exp()
            ));
        }
        let cy = 0.5 * spec.height as f64 + 0.04 * min_dim;
        let cx = 0.5 * spec.width as f64 - 0.03 * min_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let ellipses = (0..spec.n_ellipses)
            .map(|_| {
                let ang: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let rad: f64 = rng.gen_range(0.05..0.38) * min_dim;
                TextureEllipse {
                    cy: cy + rad * ang.sin(),
                    cx: cx + rad * ang.cos(),
                    ry: rng.gen_range(2.5..9.0),
                    rx: rng.gen_range(2.5..9.0),
                    amp: rng.gen_range(0.1..0.22) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
                }
            })
            .collect();
        Ok(Self {
            n_frames: spec.n_frames,
            height: spec.height,
            width: spec.width,
            cy,
            cx,
            r0,
            a_peak,
            ellipses,
        })
    }

    /// Sinusoidal cardiac-like cycle, periodic over n_frames.
    pub(crate) fn amplitude_at(&self, t: f64) -> f64 {
        self.a_peak * (std::f64::consts::TAU * t / self.n_frames as f64).sin()
    }

    fn falloff(&self, r: f64) -> f64 {
        (-r * r / (2.0 * self.r0 * self.r0)).exp()
    }

    /// Forward deformation: material point q to its position at phase
    /// amplitude `a`.
    fn deform(&self, a: f64, qy: f64, qx: f64) -> (f64, f64) {
        let (dy, dx) = (qy - self.cy, qx - self.cx);
        let r = (dy * dy + dx * dx).sqrt();
        let s = 1.0 + a * self.falloff(r);
        (self.cy + dy * s, self.cx + dx * s)
    }

    /// Inverse deformation: grid position p back to its material point.
    /// The radial map rho(r) = r (1 + a g(r)) is strictly monotone, so the
    /// scalar inverse is found by safeguarded Newton to ~1e-13.
    fn invert(&self, a: f64, py: f64, px: f64) -> (f64, f64) {
        let (dy, dx) = (py - self.cy, px - self.cx);
        let s = (dy * dy + dx * dx).sqrt();
        if s == 0.0 || a == 0.0 {
            let scale = 1.0 + a * self.falloff(s);
            return (self.cy + dy / scale, self.cx + dx / scale);
        }
        let f = |r: f64| r * (1.0 + a * self.falloff(r)) - s;
        let fp = |r: f64| {
            let g = self.falloff(r);
            1.0 + a * g * (1.0 - r * r / (self.r0 * self.r0))
        };
        let (mut lo, mut hi) = (0.0f64, s * 2.0 + 1.0);
        while f(hi) < 0.0 {
            hi *= 2.0;
        }
        let mut r = s / (1.0 + a * self.falloff(s)); // good initial guess
        for _ in 0..60 {
            let fr = f(r);
            if fr.abs() < 1e-13 * s.max(1.0) {
                break;
            }
            if fr > 0.0 {
                hi = r;
            } else {
                lo = r;
            }
            let step = fr / fp(r);
            let mut next = r - step;
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            r = next;
        }
        let ratio = r / s;
        (self.cy + dy * ratio, self.cx + dx * ratio)
    }

    /// Complex scene value at a material point.
    fn reference_value(&self, qy: f64, qx: f64) -> Complex64 {
        let h = self.height as f64;
        let w = self.width as f64;
        let (gy, gx) = (0.5 * h, 0.5 * w);

        // Body ellipse.
        let body_ell = ((qy - gy) / (0.42 * h)).powi(2) + ((qx - gx) / (0.45 * w)).powi(2);
        let body = smooth_ind(1.0 - body_ell, 9.0);

        // Contracting ring (annulus) and pool around the deformation center.
        let rr = ((qy - self.cy).powi(2) + (qx - self.cx).powi(2)).sqrt();
        let outer = smooth_ind(1.0 - rr / (0.30 * h.min(w)), 22.0);
        let inner = smooth_ind(1.0 - rr / (0.16 * h.min(w)), 22.0);
        let ring = outer * (1.0 - inner);

        // Gentle sinusoidal texture inside the body plus random ellipses.
        let tex = 0.06
            * (std::f64::consts::TAU * 2.3 * qy / h).sin()
            * (std::f64::consts::TAU * 1.7 * qx / w).cos();
        let mut blobs = 0.0;
        for e in &self.ellipses {
            let ell = ((qy - e.cy) / e.ry).powi(2) + ((qx - e.cx) / e.rx).powi(2);
            blobs += e.amp * smooth_ind(1.0 - ell, 6.0);
        }

        let mag = (body * (0.45 + tex + blobs) + 0.32 * ring + 0.12 * inner * body).clamp(0.0, 1.0);
        let phase = 0.6 * (std::f64::consts::TAU * qy / (2.1 * h)).sin()
            + 0.4 * (std::f64::consts::TAU * qx / (1.7 * w)).cos();
        Complex64::from_polar(mag, phase)
    }

    /// Material coordinates of every grid pixel at phase index `t`.
    fn material_grid(&self, t: f64) -> (Vec<f64>, Vec<f64>) {
        let a = self.amplitude_at(t);
        let mut qy = vec![0.0; self.height * self.width];
        let mut qx = vec![0.0; self.height * self.width];
        for i in 0..self.height {
            for j in 0..self.width {
                let (y, x) = self.invert(a, i as f64, j as f64);
                qy[i * self.width + j] = y;
                qx[i * self.width + j] = x;
            }
        }
        (qy, qx)
    }

    pub(crate) fn frame_image(&self, t: f64) -> ComplexImage {
        let (qy, qx) = self.material_grid(t);
        let data = qy
            .iter()
            .zip(&qx)
            .map(|(&y, &x)| self.reference_value(y, x))
            .collect();
        ComplexImage::new(self.height, self.width, data)
    }
}

/// Builds the dynamic phantom: N frames plus the exact N x N ground-truth
/// displacement set (diagonal entries exactly zero).
pub fn make_phantom(spec: &PhantomSpec) -> Result<(ImageSequence, MotionFieldSet), String> {
    let model = PhantomModel::new(spec)?;
    let n = spec.n_frames;
    let (h, w) = (spec.height, spec.width);

    // Material maps per frame, reused by both images and motion fields.
    let grids: Vec<(Vec<f64>, Vec<f64>)> = (0..n).map(|t| model.material_grid(t as f64)).collect();

    let frames: Vec<ComplexImage> = grids
        .iter()
        .map(|(qy, qx)| {
            let data = qy.iter().zip(qx).map(|(&y, &x)| model.reference_value(y, x)).collect();
            ComplexImage::new(h, w, data)
        })
        .collect();

    let mut motion = MotionFieldSet::zeros(n, h, w);
    for t1 in 0..n {
        let a1 = model.amplitude_at(t1 as f64);
        for t2 in 0..n {
            if t1 == t2 {
                continue; // stays exactly zero
            }
            let (qy, qx) = &grids[t2];
            let field = motion.field_mut(t1, t2);
            for i in 0..h {
                for j in 0..w {
                    let p = i * w + j;
                    let (py, px) = model.deform(a1, qy[p], qx[p]);
                    field.dy_mut()[p] = py - i as f64;
                    field.dx_mut()[p] = px - j as f64;
                }
            }
        }
    }
    Ok((ImageSequence::new(frames), motion))
}

/// Q smooth Gaussian-profile coil sensitivities around the field of view,
/// normalized so sum_q |c_q|^2 = 1 at every pixel (support covers the grid).
pub fn make_coil_maps(q: usize, h: usize, w: usize) -> CoilMaps {
    assert!(q >= 1, "need at least one coil");
    let (gy, gx) = (0.5 * (h as f64 - 1.0), 0.5 * (w as f64 - 1.0));
    let ring_radius = 0.55 * h.max(w) as f64;
    let sigma = 0.55 * h.max(w) as f64;
    let mut data = vec![Complex64::new(0.0, 0.0); q * h * w];
    for qi in 0..q {
        let angle = std::f64::consts::TAU * qi as f64 / q as f64;
        let (cy, cx) = (gy + ring_radius * angle.sin(), gx + ring_radius * angle.cos());
        // Coil 0 stays real so a single-coil set normalizes to exactly 1.
        let ramp = 0.3 * std::f64::consts::PI * qi as f64 / (q as f64 * h.max(w) as f64);
        for i in 0..h {
            for j in 0..w {
                let d2 = (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2);
                let mag = (-d2 / (2.0 * sigma * sigma)).exp();
                let phase = ramp * ((i as f64 - gy) * angle.sin() + (j as f64 - gx) * angle.cos());
                data[qi * h * w + i * w + j] = Complex64::from_polar(mag, phase);
            }
        }
    }
    for p in 0..h * w {
        let ssq: f64 = (0..q).map(|qi| data[qi * h * w + p].norm_sqr()).sum();
        let s = ssq.sqrt();
        for qi in 0..q {
            data[qi * h * w + p] /= s;
        }
    }
    CoilMaps::new(q, h, w, data, vec![1; h * w])
}

/// Variable-density k-t mask generator.
///
/// Every frame samples exactly round(H/R) rows: the central band of
/// `center_lines` rows plus rows drawn without replacement from a
/// center-weighted density. Rows sampled in the previous frame are strongly
/// down-weighted and rows grow more likely the longer they go unsampled,
/// which spreads the samples over the cycle (k-t incoherence).
pub fn make_masks(
    n: usize,
    h: usize,
    w: usize,
    r: f64,
    center_lines: usize,
    seed: u64,
) -> Result<SamplingMaskSet, String> {
    if r < 1.0 {
        return Err(format!("acceleration must be >= 1, got {r}"));
    }
    if n == 0 {
        return Err("need at least one frame".into());
    }
    let budget = ((h as f64 / r).round() as usize).clamp(1, h);
    if center_lines as f64 >= h as f64 / r && r > 1.0 {
        return Err(format!(
            "center_lines = {center_lines} uses the whole budget at R = {r} (H = {h})"
        ));
    }
    if center_lines > budget {
        return Err(format!("center band {center_lines} exceeds per-frame budget {budget}"));
    }

    if r <= 1.0 {
        let lines: Vec<Vec<usize>> = (0..n).map(|_| (0..h).collect()).collect();
        return Ok(SamplingMaskSet::new(n, h, w, lines, center_lines));
    }

    let band = SamplingMaskSet::center_band(h, center_lines);
    let density: Vec<f64> = (0..h)
        .map(|row| {
            let d = (row as f64 - 0.5 * (h as f64 - 1.0)) / (h as f64 / 4.0);
            0.25 + (-0.5 * d * d).exp()
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last_sampled = vec![-1i64; h];
    let mut lines = Vec::with_capacity(n);
    for t in 0..n {
        let mut frame: Vec<usize> = band.clone().collect();
        let mut available: Vec<usize> = (0..h).filter(|row| !band.contains(row)).collect();
        for _ in 0..budget.saturating_sub(center_lines) {
            let weights: Vec<f64> = available
                .iter()
                .map(|&row| {
                    let stale = ((t as i64 - last_sampled[row]) as f64).clamp(1.0, 8.0);
                    let recent = if last_sampled[row] == t as i64 - 1 { 0.15 } else { 1.0 };
                    density[row] * stale * recent
                })
                .collect();
            let total: f64 = weights.iter().sum();
            let mut draw = rng.gen_range(0.0..total);
            let mut pick = available.len() - 1;
            for (idx, wgt) in weights.iter().enumerate() {
                if draw < *wgt {
                    pick = idx;
                    break;
                }
                draw -= wgt;
            }
            frame.push(available.remove(pick));
        }
        for &row in &frame {
            last_sampled[row] = t as i64;
        }
        frame.sort_unstable();
        lines.push(frame);
    }
    Ok(SamplingMaskSet::new(n, h, w, lines, center_lines))
}

/// Simulates undersampled multi-coil k-space: y = D F C x plus masked
/// complex Gaussian noise of std `noise_sigma` per component. Unsampled
/// entries are exactly zero.
pub fn simulate_kspace(
    reference: &ImageSequence,
    coils: &CoilMaps,
    masks: &SamplingMaskSet,
    noise_sigma: f64,
    seed: u64,
) -> KSpaceSet {
    let (n, h, w) = (reference.n_frames(), reference.height(), reference.width());
    let q = coils.n_coils();
    assert_eq!(masks.n_frames(), n, "mask frame count mismatch");
    assert_eq!((coils.height(), coils.width()), (h, w), "coil grid mismatch");
    assert!(noise_sigma >= 0.0);

    let mut out = KSpaceSet::zeros(n, q, h, w);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;
    for t in 0..n {
        let lines = masks.lines(t);
        for qi in 0..q {
            let mut buf: Vec<Complex64> = reference
                .frame(t)
                .data()
                .iter()
                .zip(coils.coil(qi))
                .map(|(x, c)| x * c)
                .collect();
            fft2c_inplace(&mut buf, h, w);
            apply_mask_rows(&mut buf, h, w, lines);
            if noise_sigma > 0.0 {
                for &row in lines {
                    for col in 0..w {
                        let re: f64 = normal.sample(&mut rng);
                        let im: f64 = normal.sample(&mut rng);
                        buf[row * w + col] += Complex64::new(noise_sigma * re, noise_sigma * im);
                    }
                }
            }
            out.frame_mut(t)[qi * h * w..(qi + 1) * h * w].copy_from_slice(&buf);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{adjoint_dot_test, decode_frame, warp_apply, EncodeOp};

    #[test]
    fn zero_amplitude_freezes_the_phantom() {
        let spec = PhantomSpec {
            n_frames: 4,
            height: 32,
            width: 32,
            motion_amplitude: 0.0,
            ..PhantomSpec::default()
        };
        let (seq, motion) = make_phantom(&spec).unwrap();
        for t in 1..4 {
            assert_eq!(seq.frame(t), seq.frame(0));
        }
        for t1 in 0..4 {
            for t2 in 0..4 {
                assert!(motion.field(t1, t2).is_zero());
            }
        }
    }

    #[test]
    fn cycle_is_periodic() {
        let spec =
            PhantomSpec { n_frames: 6, height: 32, width: 32, ..PhantomSpec::default() };
        let model = PhantomModel::new(&spec).unwrap();
        assert!((model.amplitude_at(0.0) - model.amplitude_at(6.0)).abs() < 1e-12);
        let f0 = model.frame_image(0.0);
        let f6 = model.frame_image(6.0);
        let err = f0
            .data()
            .iter()
            .zip(f6.data())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(err < 1e-12, "cycle closure error {err}");
    }

    #[test]
    fn oversized_amplitude_is_rejected() {
        let spec = PhantomSpec {
            n_frames: 4,
            height: 32,
            width: 32,
            motion_amplitude: 50.0,
            ..PhantomSpec::default()
        };
        assert!(make_phantom(&spec).is_err());
    }

    #[test]
    fn phantom_is_deterministic() {
        let spec = PhantomSpec {
            n_frames: 3,
            height: 24,
            width: 24,
            motion_amplitude: 1.5,
            ..PhantomSpec::default()
        };
        let (a, ma) = make_phantom(&spec).unwrap();
        let (b, mb) = make_phantom(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
    }

    #[test]
    fn ground_truth_motion_warps_frames_onto_each_other() {
        let spec = PhantomSpec {
            n_frames: 8,
            height: 64,
            width: 64,
            motion_amplitude: 3.0,
            ..PhantomSpec::default()
        };
        let (seq, motion) = make_phantom(&spec).unwrap();
        // Adjacent phases: warp(frame t, u^(t->t+1)) should match frame t+1
        // up to bilinear interpolation error.
        let peak = seq.max_magnitude();
        for t in 0..3 {
            let warped = warp_apply(seq.frame(t), motion.field(t, t + 1));
            let mse: f64 = warped
                .data()
                .iter()
                .zip(seq.frame(t + 1).data())
                .map(|(a, b)| (a - b).norm_sqr())
                .sum::<f64>()
                / (64.0 * 64.0);
            let psnr = 10.0 * (peak * peak / mse).log10();
            assert!(psnr > 35.0, "self-consistency PSNR {psnr} at t={t}");
        }
    }

    #[test]
    fn gt_displacement_peak_matches_requested_amplitude() {
        let spec = PhantomSpec {
            n_frames: 8,
            height: 64,
            width: 64,
            motion_amplitude: 2.0,
            ..PhantomSpec::default()
        };
        let model = PhantomModel::new(&spec).unwrap();
        // Max material displacement at the cycle peak (t = N/4) is the
        // requested amplitude.
        let a = model.amplitude_at(2.0);
        let mut worst = 0.0f64;
        for r in 0..200 {
            let rad = r as f64 * 0.25;
            let (py, _) = model.deform(a, model.cy + rad, model.cx);
            worst = worst.max((py - (model.cy + rad)).abs());
        }
        assert!((worst - 2.0).abs() < 0.05, "peak displacement {worst}");
    }

    #[test]
    fn single_coil_map_is_identically_one() {
        let coils = make_coil_maps(1, 16, 16);
        for v in coils.data() {
            assert!((v - Complex64::new(1.0, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn coil_maps_are_normalized_and_pass_the_dot_test() {
        let coils = make_coil_maps(8, 32, 24);
        for p in 0..32 * 24 {
            let ssq: f64 = (0..8).map(|qi| coils.coil(qi)[p].norm_sqr()).sum();
            assert!((ssq - 1.0).abs() < 1e-12);
        }
        let lines: Vec<usize> = vec![0, 3, 7, 12, 16, 20, 28];
        let op = EncodeOp { coils: &coils, mask_lines: &lines };
        assert!(adjoint_dot_test(&op, 5, 9) < 1e-9);
    }

    #[test]
    fn full_acceleration_samples_every_row() {
        let masks = make_masks(3, 16, 16, 1.0, 2, 7).unwrap();
        for t in 0..3 {
            assert_eq!(masks.lines(t), (0..16).collect::<Vec<_>>());
        }
    }

    #[test]
    fn mask_budget_is_exact() {
        let masks = make_masks(25, 128, 128, 8.0, 4, 11).unwrap();
        let band: Vec<usize> = SamplingMaskSet::center_band(128, 4).collect();
        for t in 0..25 {
            assert_eq!(masks.lines(t).len(), 16, "round(128/8) rows per frame");
            for r in &band {
                assert!(masks.lines(t).contains(r));
            }
        }
    }

    #[test]
    fn masks_are_seed_deterministic() {
        let a = make_masks(10, 64, 64, 8.0, 4, 3).unwrap();
        let b = make_masks(10, 64, 64, 8.0, 4, 3).unwrap();
        let c = make_masks(10, 64, 64, 8.0, 4, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn mask_union_covers_most_rows() {
        let masks = make_masks(25, 128, 128, 8.0, 4, 1).unwrap();
        let mut seen = vec![false; 128];
        for t in 0..25 {
            for &r in masks.lines(t) {
                seen[r] = true;
            }
        }
        let coverage = seen.iter().filter(|&&s| s).count() as f64 / 128.0;
        assert!(coverage >= 0.9, "k-t union coverage {coverage}");
    }

    #[test]
    fn infeasible_center_band_is_rejected() {
        assert!(make_masks(4, 64, 64, 16.0, 4, 1).is_err()); // 4 lines budget, all center
        assert!(make_masks(4, 64, 64, 0.5, 0, 1).is_err());
    }

    #[test]
    fn noiseless_full_mask_roundtrips_through_decode() {
        let spec = PhantomSpec { n_frames: 3, height: 32, width: 32, ..PhantomSpec::default() };
        let (seq, _) = make_phantom(&spec).unwrap();
        let coils = make_coil_maps(4, 32, 32);
        let masks = make_masks(3, 32, 32, 1.0, 0, 5).unwrap();
        let y = simulate_kspace(&seq, &coils, &masks, 0.0, 9);
        for t in 0..3 {
            let img = decode_frame(y.frame(t), &coils, masks.lines(t));
            let err = img
                .data()
                .iter()
                .zip(seq.frame(t).data())
                .map(|(a, b)| (a - b).norm())
                .fold(0.0, f64::max)
                / seq.max_magnitude();
            assert!(err < 1e-8, "frame {t} mismatch {err}");
        }
    }

    #[test]
    fn unsampled_entries_stay_exactly_zero_with_noise() {
        let spec = PhantomSpec { n_frames: 4, height: 32, width: 32, ..PhantomSpec::default() };
        let (seq, _) = make_phantom(&spec).unwrap();
        let coils = make_coil_maps(2, 32, 32);
        let masks = make_masks(4, 32, 32, 4.0, 2, 5).unwrap();
        let y = simulate_kspace(&seq, &coils, &masks, 0.01, 13);
        for t in 0..4 {
            let lines = masks.lines(t);
            for qi in 0..2 {
                for row in 0..32 {
                    if !lines.contains(&row) {
                        for col in 0..32 {
                            assert_eq!(
                                y.frame(t)[qi * 32 * 32 + row * 32 + col],
                                Complex64::new(0.0, 0.0)
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn noise_energy_matches_expectation() {
        let spec = PhantomSpec { n_frames: 4, height: 32, width: 32, ..PhantomSpec::default() };
        let (seq, _) = make_phantom(&spec).unwrap();
        let coils = make_coil_maps(3, 32, 32);
        let masks = make_masks(4, 32, 32, 4.0, 2, 5).unwrap();
        let sigma = 0.01;
        let clean = simulate_kspace(&seq, &coils, &masks, 0.0, 0);
        let mut total = 0.0;
        let n_seeds = 10;
        for seed in 0..n_seeds {
            let noisy = simulate_kspace(&seq, &coils, &masks, sigma, 100 + seed);
            total += noisy
                .data()
                .iter()
                .zip(clean.data())
                .map(|(a, b)| (a - b).norm_sqr())
                .sum::<f64>();
        }
        let measured = total / n_seeds as f64;
        let expected = 2.0 * sigma * sigma * (masks.sampled_count() * 3) as f64;
        let rel = (measured - expected).abs() / expected;
        assert!(rel < 0.05, "noise energy off by {rel}: {measured} vs {expected}");
    }

    #[test]
    fn simulated_kspace_is_seed_deterministic() {
        let spec = PhantomSpec { n_frames: 3, height: 32, width: 32, ..PhantomSpec::default() };
        let (seq, _) = make_phantom(&spec).unwrap();
        let coils = make_coil_maps(2, 32, 32);
        let masks = make_masks(3, 32, 32, 4.0, 2, 5).unwrap();
        let a = simulate_kspace(&seq, &coils, &masks, 0.005, 21);
        let b = simulate_kspace(&seq, &coils, &masks, 0.005, 21);
        assert_eq!(a, b);
    }
}
