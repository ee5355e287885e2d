//! Shared domain types for dynamic multi-coil MR data and motion fields.
//!
//! All complex data is stored at 64-bit-per-component precision. Types check
//! buffer-size consistency at construction; the semantic invariants (coil
//! normalization, mask feasibility, k-space zeros, ...) are checked by
//! [`validate`] so that deliberately broken datasets can still be built in
//! tests and reported as violations instead of panics.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

/// One complex-valued frame on an H x W Cartesian grid, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexImage {
    height: usize,
    width: usize,
    data: Vec<Complex64>,
}

impl ComplexImage {
    pub fn new(height: usize, width: usize, data: Vec<Complex64>) -> Self {
        assert_eq!(data.len(), height * width, "image buffer length mismatch");
        Self { height, width, data }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![Complex64::new(0.0, 0.0); height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Complex64> {
        self.data
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> Complex64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn at_mut(&mut self, row: usize, col: usize) -> &mut Complex64 {
        &mut self.data[row * self.width + col]
    }

    /// Magnitude image as a flat row-major buffer.
    pub fn magnitude(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.norm()).collect()
    }

    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }
}

/// N complex frames sharing one grid; the reconstruction variable.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSequence {
    frames: Vec<ComplexImage>,
}

impl ImageSequence {
    pub fn new(frames: Vec<ComplexImage>) -> Self {
        assert!(!frames.is_empty(), "image sequence needs at least one frame");
        let (h, w) = frames[0].shape();
        for (t, f) in frames.iter().enumerate() {
            assert_eq!(f.shape(), (h, w), "frame {t} has mismatched shape");
        }
        Self { frames }
    }

    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width()
    }

    pub fn frame(&self, t: usize) -> &ComplexImage {
        &self.frames[t]
    }

    pub fn frames(&self) -> &[ComplexImage] {
        &self.frames
    }

    pub fn frames_mut(&mut self) -> &mut [ComplexImage] {
        &mut self.frames
    }

    /// Peak magnitude over all frames.
    pub fn max_magnitude(&self) -> f64 {
        self.frames
            .iter()
            .flat_map(|f| f.data().iter())
            .map(|v| v.norm())
            .fold(0.0, f64::max)
    }
}

/// N x Q x H x W complex Cartesian k-space samples, zeros at unsampled rows.
#[derive(Clone, Debug, PartialEq)]
pub struct KSpaceSet {
    n_frames: usize,
    n_coils: usize,
    height: usize,
    width: usize,
    data: Vec<Complex64>,
}

impl KSpaceSet {
    pub fn new(
        n_frames: usize,
        n_coils: usize,
        height: usize,
        width: usize,
        data: Vec<Complex64>,
    ) -> Self {
        assert_eq!(
            data.len(),
            n_frames * n_coils * height * width,
            "k-space buffer length mismatch"
        );
        Self { n_frames, n_coils, height, width, data }
    }

    pub fn zeros(n_frames: usize, n_coils: usize, height: usize, width: usize) -> Self {
        let len = n_frames * n_coils * height * width;
        Self::new(n_frames, n_coils, height, width, vec![Complex64::new(0.0, 0.0); len])
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_coils(&self) -> usize {
        self.n_coils
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    /// All coils of frame `t` as one contiguous Q*H*W slice.
    pub fn frame(&self, t: usize) -> &[Complex64] {
        let stride = self.n_coils * self.height * self.width;
        &self.data[t * stride..(t + 1) * stride]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [Complex64] {
        let stride = self.n_coils * self.height * self.width;
        &mut self.data[t * stride..(t + 1) * stride]
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum()
    }
}

/// Q complex coil sensitivity maps plus the binary object support.
#[derive(Clone, Debug, PartialEq)]
pub struct CoilMaps {
    n_coils: usize,
    height: usize,
    width: usize,
    data: Vec<Complex64>,
    support: Vec<u8>,
}

impl CoilMaps {
    pub fn new(
        n_coils: usize,
        height: usize,
        width: usize,
        data: Vec<Complex64>,
        support: Vec<u8>,
    ) -> Self {
        assert_eq!(data.len(), n_coils * height * width, "coil buffer length mismatch");
        assert_eq!(support.len(), height * width, "support buffer length mismatch");
        Self { n_coils, height, width, data, support }
    }

    pub fn n_coils(&self) -> usize {
        self.n_coils
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn support(&self) -> &[u8] {
        &self.support
    }

    /// Map of coil `q` as an H*W slice.
    pub fn coil(&self, q: usize) -> &[Complex64] {
        let stride = self.height * self.width;
        &self.data[q * stride..(q + 1) * stride]
    }
}

/// Per-frame sampled ky row indices (full kx readout per row).
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingMaskSet {
    n_frames: usize,
    height: usize,
    width: usize,
    lines: Vec<Vec<usize>>,
    center_lines: usize,
}

impl SamplingMaskSet {
    pub fn new(
        n_frames: usize,
        height: usize,
        width: usize,
        mut lines: Vec<Vec<usize>>,
        center_lines: usize,
    ) -> Self {
        assert_eq!(lines.len(), n_frames, "one line set per frame required");
        for frame_lines in &mut lines {
            frame_lines.sort_unstable();
            frame_lines.dedup();
        }
        Self { n_frames, height, width, lines, center_lines }
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn center_lines(&self) -> usize {
        self.center_lines
    }

    pub fn lines(&self, t: usize) -> &[usize] {
        &self.lines[t]
    }

    pub fn all_lines(&self) -> &[Vec<usize>] {
        &self.lines
    }

    /// Row range of the always-sampled central band for grid height `h`.
    pub fn center_band(height: usize, center_lines: usize) -> std::ops::Range<usize> {
        let start = (height - center_lines) / 2;
        start..start + center_lines
    }

    /// Number of sampled complex entries per coil over all frames.
    pub fn sampled_count(&self) -> usize {
        self.lines.iter().map(|l| l.len() * self.width).sum()
    }
}

/// Dense 2D displacement field in pixels; `dy` along rows, `dx` along columns.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionField {
    height: usize,
    width: usize,
    dy: Vec<f64>,
    dx: Vec<f64>,
}

impl MotionField {
    pub fn new(height: usize, width: usize, dy: Vec<f64>, dx: Vec<f64>) -> Self {
        assert_eq!(dy.len(), height * width, "dy buffer length mismatch");
        assert_eq!(dx.len(), height * width, "dx buffer length mismatch");
        Self { height, width, dy, dx }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![0.0; height * width], vec![0.0; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dy(&self) -> &[f64] {
        &self.dy
    }

    pub fn dx(&self) -> &[f64] {
        &self.dx
    }

    pub fn dy_mut(&mut self) -> &mut [f64] {
        &mut self.dy
    }

    pub fn dx_mut(&mut self) -> &mut [f64] {
        &mut self.dx
    }

    pub fn is_zero(&self) -> bool {
        self.dy.iter().all(|&v| v == 0.0) && self.dx.iter().all(|&v| v == 0.0)
    }

    /// Mean displacement magnitude in pixels.
    pub fn mean_magnitude(&self) -> f64 {
        let n = (self.height * self.width) as f64;
        self.dy
            .iter()
            .zip(&self.dx)
            .map(|(&y, &x)| (y * y + x * x).sqrt())
            .sum::<f64>()
            / n
    }
}

/// Full N x N set of displacement fields; entry `[t1][t2]` warps frame t1
/// into the geometry of frame t2. Diagonal entries are stored as exact zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionFieldSet {
    n_frames: usize,
    fields: Vec<MotionField>,
}

impl MotionFieldSet {
    pub fn new(n_frames: usize, fields: Vec<MotionField>) -> Self {
        assert_eq!(fields.len(), n_frames * n_frames, "need N*N fields");
        Self { n_frames, fields }
    }

    pub fn zeros(n_frames: usize, height: usize, width: usize) -> Self {
        let fields = (0..n_frames * n_frames)
            .map(|_| MotionField::zeros(height, width))
            .collect();
        Self::new(n_frames, fields)
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn height(&self) -> usize {
        self.fields[0].height()
    }

    pub fn width(&self) -> usize {
        self.fields[0].width()
    }

    pub fn field(&self, t1: usize, t2: usize) -> &MotionField {
        &self.fields[t1 * self.n_frames + t2]
    }

    pub fn field_mut(&mut self, t1: usize, t2: usize) -> &mut MotionField {
        &mut self.fields[t1 * self.n_frames + t2]
    }

    /// All fields with source frame `t1`, ordered by target frame.
    pub fn group(&self, t1: usize) -> &[MotionField] {
        &self.fields[t1 * self.n_frames..(t1 + 1) * self.n_frames]
    }
}

/// Reconstruction hyperparameters for the unrolled pipeline and its CG blocks.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReconConfig {
    /// Weight of the previous-image l2 prior; the prior enters the normal
    /// equations as 1/(2*lambda) * I.
    pub lambda: f64,
    /// Number of alternating motion + CG-SENSE iterations after the first
    /// motion-free block.
    pub unroll_iters: usize,
    pub cg_max_iters: usize,
    /// Relative residual target for CG.
    pub cg_tol: f64,
    /// Stop early once the PSNR gain between consecutive iterations falls
    /// below this many dB (requires a reference).
    pub psnr_stop_delta: f64,
    /// Fixed CG budget of the motion-free first block.
    pub first_block_cg_iters: usize,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            lambda: 2.0,
            unroll_iters: 3,
            cg_max_iters: 20,
            cg_tol: 1e-6,
            psnr_stop_delta: 0.1,
            first_block_cg_iters: 10,
        }
    }
}

impl ReconConfig {
    pub fn check(&self) -> Result<(), String> {
        if !(self.lambda > 0.0) {
            return Err(format!("lambda must be > 0, got {}", self.lambda));
        }
        if self.unroll_iters < 1 {
            return Err("unroll_iters must be >= 1".into());
        }
        if !(self.cg_tol > 0.0) {
            return Err(format!("cg_tol must be > 0, got {}", self.cg_tol));
        }
        if self.psnr_stop_delta < 0.0 {
            return Err(format!("psnr_stop_delta must be >= 0, got {}", self.psnr_stop_delta));
        }
        Ok(())
    }
}

/// Hyperparameters of the variational group-wise motion estimator.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MotionConfig {
    /// Spatial smoothness weight.
    pub alpha: f64,
    /// Temporal smoothness weight (enters the reported energy; realized
    /// greedily through warm-started neighbor ordering in the estimator).
    pub beta: f64,
    /// Exponential per-iteration loss decay.
    pub gamma: f64,
    pub charbonnier_eps: f64,
    pub charbonnier_exp: f64,
    pub pyramid_levels: usize,
    pub warps_per_level: usize,
    pub inner_iters: usize,
    pub step_size: f64,
    /// Scale converting the loss weight `alpha` into the estimator's
    /// internal spatial weight. The reported energy keeps the plain
    /// `alpha`; descent uses `alpha * estimator_spatial_scale`, which for
    /// unit-magnitude images balances the smoothness pull against the
    /// Charbonnier data gradient.
    #[serde(default = "default_estimator_spatial_scale")]
    pub estimator_spatial_scale: f64,
}

fn default_estimator_spatial_scale() -> f64 {
    0.02
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            beta: 10.0,
            gamma: 0.6,
            charbonnier_eps: 1e-12,
            charbonnier_exp: 0.45,
            pyramid_levels: 4,
            warps_per_level: 3,
            inner_iters: 30,
            step_size: 0.1,
            estimator_spatial_scale: default_estimator_spatial_scale(),
        }
    }
}

impl MotionConfig {
    pub fn check(&self) -> Result<(), String> {
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err("alpha and beta must be >= 0".into());
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        if self.pyramid_levels < 1 {
            return Err("pyramid_levels must be >= 1".into());
        }
        Ok(())
    }
}

/// A complete dataset as stored in one container file.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub kspace: KSpaceSet,
    pub coils: CoilMaps,
    pub masks: SamplingMaskSet,
    pub reference: Option<ImageSequence>,
    pub gt_motion: Option<MotionFieldSet>,
}

/// One failed type invariant, reported as data rather than an error.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Violation {
    pub type_name: String,
    pub field: String,
    pub measured: f64,
    pub detail: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}.{}: {} (measured {})",
            self.type_name, self.field, self.detail, self.measured
        )
    }
}

fn violation(type_name: &str, field: &str, measured: f64, detail: String) -> Violation {
    Violation { type_name: type_name.into(), field: field.into(), measured, detail }
}

/// Checks every type invariant of the dataset and returns all violations.
///
/// An empty list means the dataset is fully consistent. Dimension agreement
/// between the members is checked first; value-level invariants follow.
pub fn validate(ds: &Dataset) -> Vec<Violation> {
    let mut out = Vec::new();
    let (n, q, h, w) = (
        ds.kspace.n_frames(),
        ds.kspace.n_coils(),
        ds.kspace.height(),
        ds.kspace.width(),
    );

    if h < 8 {
        out.push(violation("ComplexImage", "height", h as f64, "height must be >= 8".into()));
    }
    if w < 8 {
        out.push(violation("ComplexImage", "width", w as f64, "width must be >= 8".into()));
    }
    if n < 2 {
        out.push(violation("ImageSequence", "n_frames", n as f64, "need at least 2 frames".into()));
    }
    if q < 1 {
        out.push(violation("CoilMaps", "n_coils", q as f64, "need at least one coil".into()));
    }
    if ds.coils.height() != h || ds.coils.width() != w {
        out.push(violation(
            "CoilMaps",
            "shape",
            ds.coils.height() as f64,
            format!("coil grid {}x{} != k-space grid {}x{}", ds.coils.height(), ds.coils.width(), h, w),
        ));
    }
    if ds.coils.n_coils() != q {
        out.push(violation(
            "CoilMaps",
            "n_coils",
            ds.coils.n_coils() as f64,
            format!("coil count != k-space coil count {q}"),
        ));
    }
    if ds.masks.n_frames() != n || ds.masks.height() != h || ds.masks.width() != w {
        out.push(violation(
            "SamplingMaskSet",
            "shape",
            ds.masks.n_frames() as f64,
            "mask dims disagree with k-space dims".into(),
        ));
    }

    // k-space: finite everywhere, exactly zero on unsampled rows.
    for t in 0..n {
        let mut sampled = vec![false; h];
        for &r in ds.masks.lines(t.min(ds.masks.n_frames().saturating_sub(1))) {
            if r < h {
                sampled[r] = true;
            }
        }
        for qi in 0..q {
            let base = (t * q + qi) * h * w;
            for row in 0..h {
                for col in 0..w {
                    let v = ds.kspace.data()[base + row * w + col];
                    if !v.re.is_finite() || !v.im.is_finite() {
                        out.push(violation(
                            "KSpaceSet",
                            "data",
                            v.norm(),
                            format!("non-finite sample at frame {t}, coil {qi}, row {row}, col {col}"),
                        ));
                    } else if !sampled[row] && v != Complex64::new(0.0, 0.0) {
                        out.push(violation(
                            "KSpaceSet",
                            "data",
                            v.norm(),
                            format!("nonzero value at unsampled frame {t}, coil {qi}, row {row}, col {col}"),
                        ));
                    }
                }
            }
        }
    }

    // Coil maps: unit sum-of-squares on support, zero off support.
    let hw = ds.coils.height() * ds.coils.width();
    for p in 0..hw {
        let ssq: f64 = (0..ds.coils.n_coils()).map(|qi| ds.coils.coil(qi)[p].norm_sqr()).sum();
        let on_support = ds.coils.support().get(p).copied().unwrap_or(0) != 0;
        if on_support {
            if (ssq - 1.0).abs() > 1e-6 {
                out.push(violation(
                    "CoilMaps",
                    "data",
                    ssq,
                    format!("coil normalization violated at pixel {p}"),
                ));
            }
        } else if ssq != 0.0 {
            out.push(violation(
                "CoilMaps",
                "data",
                ssq,
                format!("nonzero coil value off support at pixel {p}"),
            ));
        }
    }

    // Masks: at least one line per frame, center band present, indices in range.
    let band = SamplingMaskSet::center_band(h, ds.masks.center_lines());
    for t in 0..ds.masks.n_frames() {
        let lines = ds.masks.lines(t);
        if lines.is_empty() {
            out.push(violation(
                "SamplingMaskSet",
                "lines",
                0.0,
                format!("frame {t} samples no lines"),
            ));
            continue;
        }
        for &r in lines {
            if r >= h {
                out.push(violation(
                    "SamplingMaskSet",
                    "lines",
                    r as f64,
                    format!("frame {t} samples out-of-range row {r}"),
                ));
            }
        }
        if ds.masks.center_lines() > 0 {
            for r in band.clone() {
                if !lines.contains(&r) {
                    out.push(violation(
                        "SamplingMaskSet",
                        "center_lines",
                        r as f64,
                        format!("frame {t} is missing central row {r}"),
                    ));
                }
            }
        }
    }

    // Reference sequence: shape and finiteness.
    if let Some(r) = &ds.reference {
        if r.n_frames() != n || r.height() != h || r.width() != w {
            out.push(violation(
                "ImageSequence",
                "frames",
                r.n_frames() as f64,
                "reference dims disagree with k-space dims".into(),
            ));
        }
        for (t, f) in r.frames().iter().enumerate() {
            if f.data().iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
                out.push(violation(
                    "ComplexImage",
                    "data",
                    f64::NAN,
                    format!("non-finite value in reference frame {t}"),
                ));
            }
        }
    }

    // Motion: zero diagonal, finite, displacement sanity bound.
    if let Some(m) = &ds.gt_motion {
        if m.n_frames() != n || m.height() != h || m.width() != w {
            out.push(violation(
                "MotionFieldSet",
                "fields",
                m.n_frames() as f64,
                "motion dims disagree with k-space dims".into(),
            ));
        }
        let bound = h.max(w) as f64;
        for t1 in 0..m.n_frames() {
            for t2 in 0..m.n_frames() {
                let f = m.field(t1, t2);
                if t1 == t2 && !f.is_zero() {
                    out.push(violation(
                        "MotionFieldSet",
                        "fields",
                        f.mean_magnitude(),
                        format!("diagonal field [{t1}][{t1}] is not identically zero"),
                    ));
                }
                let worst = f
                    .dy()
                    .iter()
                    .chain(f.dx().iter())
                    .fold(0.0f64, |acc, &v| if v.is_finite() { acc.max(v.abs()) } else { f64::INFINITY });
                if !worst.is_finite() {
                    out.push(violation(
                        "MotionField",
                        "dy/dx",
                        f64::NAN,
                        format!("non-finite displacement in field [{t1}][{t2}]"),
                    ));
                } else if worst > bound {
                    out.push(violation(
                        "MotionField",
                        "dy/dx",
                        worst,
                        format!("displacement in field [{t1}][{t2}] exceeds sanity bound {bound}"),
                    ));
                }
            }
        }
    }

    out
}
