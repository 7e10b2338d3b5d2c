//! Rank-pooled dynamic images.
//!
//! A clip window of K frames is summarized by the parameters `d` of a
//! linear ranking function fit to the time-ordered prefix means
//! `V_1..V_K` of the vectorized frames:
//!
//! `d* = argmin_d 1/2 |d|^2 + delta * sum_{i>j} max(0, 1 - d.(V_i - V_j))`
//!
//! with `delta = 2 / (K (K - 1))`. The minimizer is reshaped back to
//! image layout and min-max normalized per channel to become the dynamic
//! image fed to the dynamic network branch.
//!
//! The solver runs entirely in the span of the pairwise difference
//! vectors using their Gram matrix: an annealed smoothed-hinge phase with
//! Nesterov momentum takes the iterate near the optimum, then cyclic dual
//! coordinate ascent polishes it and certifies optimality via the duality
//! gap. `converged` is false only if the gap target was not met within
//! the iteration cap.

use crate::math;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RankPoolError {
    EmptyClip,
    EmptyWindow,
    /// Pooling needs at least two frames in the window.
    WindowTooShort { k: usize },
    StartOutOfRange { start: usize, len: usize },
    /// Frames in one clip must share channels/height/width.
    MismatchedFrames,
    NonFinite,
    ZeroStride,
    BadImageShape { channels: usize, height: usize, width: usize, len: usize },
    DimMismatch { expected: usize, got: usize },
}

impl fmt::Display for RankPoolError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RankPoolError::EmptyClip => write!(f, "clip has no frames"),
            RankPoolError::EmptyWindow => write!(f, "window has no frames"),
            RankPoolError::WindowTooShort { k } => {
                write!(f, "window of {k} frame(s) cannot be rank pooled; need k >= 2")
            }
            RankPoolError::StartOutOfRange { start, len } => {
                write!(f, "window start {start} out of range for clip of {len} frames")
            }
            RankPoolError::MismatchedFrames => write!(f, "frames have mismatched dimensions"),
            RankPoolError::NonFinite => write!(f, "non-finite pixel values"),
            RankPoolError::ZeroStride => write!(f, "stride must be positive"),
            RankPoolError::BadImageShape { channels, height, width, len } => write!(
                f,
                "data length {len} does not match {channels}x{height}x{width}"
            ),
            RankPoolError::DimMismatch { expected, got } => {
                write!(f, "vector length {got} does not match image size {expected}")
            }
        }
    }
}

impl core::error::Error for RankPoolError {}

/// Planar CHW image with f64 samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
    ) -> Result<Image, RankPoolError> {
        if data.len() != channels * height * width || channels * height * width == 0 {
            return Err(RankPoolError::BadImageShape {
                channels,
                height,
                width,
                len: data.len(),
            });
        }
        Ok(Image { channels, height, width, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Image {
        Image { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Ordered frames of one recording; the unit of pooling and scoring.
#[derive(Debug, Clone)]
pub struct Clip {
    frames: Vec<Image>,
}

impl Clip {
    pub fn new(frames: Vec<Image>) -> Result<Clip, RankPoolError> {
        if frames.is_empty() {
            return Err(RankPoolError::EmptyClip);
        }
        if frames.iter().any(|f| !f.same_dims(&frames[0])) {
            return Err(RankPoolError::MismatchedFrames);
        }
        Ok(Clip { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn frames(&self) -> &[Image] {
        &self.frames
    }

    pub fn frame(&self, i: usize) -> &Image {
        &self.frames[i]
    }
}

/// K consecutive frames; short tails are padded by repeating the last
/// available frame.
#[derive(Debug, Clone)]
pub struct FrameWindow {
    frames: Vec<Image>,
}

impl FrameWindow {
    pub fn new(frames: Vec<Image>) -> Result<FrameWindow, RankPoolError> {
        if frames.is_empty() {
            return Err(RankPoolError::EmptyWindow);
        }
        if frames.iter().any(|f| !f.same_dims(&frames[0])) {
            return Err(RankPoolError::MismatchedFrames);
        }
        Ok(FrameWindow { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn frames(&self) -> &[Image] {
        &self.frames
    }

    /// First frame; used as the paired static input of the window.
    pub fn anchor(&self) -> &Image {
        &self.frames[0]
    }
}

/// Window of `k` frames starting at `start`, padded with the last frame.
pub fn window_at(clip: &Clip, k: usize, start: usize) -> Result<FrameWindow, RankPoolError> {
    if k == 0 {
        return Err(RankPoolError::EmptyWindow);
    }
    if start >= clip.len() {
        return Err(RankPoolError::StartOutOfRange { start, len: clip.len() });
    }
    let mut frames = Vec::with_capacity(k);
    for i in 0..k {
        let idx = (start + i).min(clip.len() - 1);
        frames.push(clip.frame(idx).clone());
    }
    FrameWindow::new(frames)
}

/// Window start offsets `0, stride, 2 stride, ...` while inside the clip.
pub fn window_starts(len: usize, stride: usize) -> Result<Vec<usize>, RankPoolError> {
    if stride == 0 {
        return Err(RankPoolError::ZeroStride);
    }
    Ok((0..len).step_by(stride).collect())
}

/// All windows of a clip at the given stride.
pub fn window_slice(clip: &Clip, k: usize, stride: usize) -> Result<Vec<FrameWindow>, RankPoolError> {
    let starts = window_starts(clip.len(), stride)?;
    starts.into_iter().map(|s| window_at(clip, k, s)).collect()
}

/// Time-ordered prefix means of the vectorized frames.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixMeans {
    dim: usize,
    means: Vec<Vec<f64>>,
}

impl PrefixMeans {
    pub fn from_vectors(vectors: Vec<Vec<f64>>) -> Result<PrefixMeans, RankPoolError> {
        if vectors.is_empty() {
            return Err(RankPoolError::EmptyWindow);
        }
        let dim = vectors[0].len();
        if vectors.iter().any(|v| v.len() != dim) {
            return Err(RankPoolError::MismatchedFrames);
        }
        if vectors.iter().flatten().any(|v| !v.is_finite()) {
            return Err(RankPoolError::NonFinite);
        }
        Ok(PrefixMeans { dim, means: vectors })
    }

    pub fn k(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mean(&self, i: usize) -> &[f64] {
        &self.means[i]
    }
}

/// `V_i = mean(frame_1 .. frame_i)` over vectorized frames, i = 1..K.
///
/// Uses the running update `V_i = V_{i-1} + (v_i - V_{i-1}) / i` so a
/// window of identical frames yields exactly identical means; the
/// sum-then-divide form drifts by an ulp and that drift would be blown
/// up to full range by the min-max normalization downstream.
pub fn prefix_means(window: &FrameWindow) -> Result<PrefixMeans, RankPoolError> {
    let dim = window.anchor().data().len();
    let mut running = vec![0.0; dim];
    let mut means = Vec::with_capacity(window.len());
    for (i, frame) in window.frames().iter().enumerate() {
        if !frame.all_finite() {
            return Err(RankPoolError::NonFinite);
        }
        let inv = 1.0 / (i + 1) as f64;
        for (r, &v) in running.iter_mut().zip(frame.data()) {
            *r += (v - *r) * inv;
        }
        means.push(running.clone());
    }
    PrefixMeans::from_vectors(means)
}

/// Pairing weight `delta = 2 / (K (K - 1))`, the reciprocal pair count.
pub fn pair_weight(k: usize) -> f64 {
    2.0 / (k as f64 * (k - 1) as f64)
}

/// Ranking objective `1/2 |d|^2 + delta sum_{i>j} max(0, 1 - d.(V_i - V_j))`.
pub fn ranksvm_objective(d: &[f64], means: &PrefixMeans) -> Result<f64, RankPoolError> {
    if d.len() != means.dim() {
        return Err(RankPoolError::DimMismatch { expected: means.dim(), got: d.len() });
    }
    let k = means.k();
    if k < 2 {
        return Err(RankPoolError::WindowTooShort { k });
    }
    let delta = pair_weight(k);
    let mut obj = 0.5 * d.iter().map(|&v| v * v).sum::<f64>();
    for i in 1..k {
        for j in 0..i {
            let mut dot = 0.0;
            for (p, (&a, &b)) in means.mean(i).iter().zip(means.mean(j)).enumerate() {
                dot += d[p] * (a - b);
            }
            let margin = 1.0 - dot;
            if margin > 0.0 {
                obj += delta * margin;
            }
        }
    }
    Ok(obj)
}

#[derive(Debug, Clone)]
pub struct RankPoolConfig {
    /// Certified bound on `f(d) - f*` at exit.
    pub tolerance: f64,
    /// Total budget across both solver phases.
    pub max_iterations: usize,
}

impl Default for RankPoolConfig {
    fn default() -> Self {
        RankPoolConfig { tolerance: 1e-9, max_iterations: 5000 }
    }
}

#[derive(Debug, Clone)]
pub struct RankPoolSolution {
    pub d: Vec<f64>,
    pub objective: f64,
    /// Final primal-dual gap; an upper bound on the objective error.
    pub duality_gap: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Exact rank pooling of prefix means.
///
/// The optimum lies in the span of the difference vectors
/// `u_p = V_i - V_j`, so both phases run on the P-dimensional Gram
/// system (`P = K (K - 1) / 2`) and the full-dimensional `d` is
/// materialized once at the end.
pub fn rank_pool_exact(
    means: &PrefixMeans,
    cfg: &RankPoolConfig,
) -> Result<RankPoolSolution, RankPoolError> {
    let k = means.k();
    if k < 2 {
        return Err(RankPoolError::WindowTooShort { k });
    }
    let dim = means.dim();
    let delta = pair_weight(k);

    // Pairwise differences, row p = V_i - V_j for i > j.
    let mut u: Vec<Vec<f64>> = Vec::with_capacity(k * (k - 1) / 2);
    for i in 1..k {
        for j in 0..i {
            let row = means
                .mean(i)
                .iter()
                .zip(means.mean(j))
                .map(|(&a, &b)| a - b)
                .collect();
            u.push(row);
        }
    }
    let p = u.len();
    let mut gram = vec![0.0; p * p];
    for a in 0..p {
        for b in a..p {
            let dot: f64 = u[a].iter().zip(&u[b]).map(|(x, y)| x * y).sum();
            gram[a * p + b] = dot;
            gram[b * p + a] = dot;
        }
    }

    let mut iterations = 0usize;

    // Phase 1: smoothed hinge (quadratic near the kink), annealed, with
    // Nesterov momentum. Coefficients beta parameterize d = sum beta_p u_p.
    let mut beta = vec![0.0; p];
    let trace: f64 = (0..p).map(|i| gram[i * p + i]).sum();
    if trace > 0.0 {
        for &mu in &[1e-1, 1e-2, 1e-3] {
            // Conservative Lipschitz bound for the beta parameterization.
            let lip = trace * (1.0 + delta * trace / mu);
            let step = 1.0 / lip;
            let mut prev = beta.clone();
            let mut theta_prev = 1.0f64;
            let mut last_obj = f64::INFINITY;
            for _ in 0..60 {
                iterations += 1;
                let theta = 0.5 * (1.0 + math::sqrt(1.0 + 4.0 * theta_prev * theta_prev));
                let mom = (theta_prev - 1.0) / theta;
                theta_prev = theta;
                let y: Vec<f64> = beta
                    .iter()
                    .zip(&prev)
                    .map(|(&b, &q)| b + mom * (b - q))
                    .collect();
                // margins v = 1 - G y; smoothed hinge derivative clamp(v/mu, 0, 1).
                let mut hprime = vec![0.0; p];
                let mut obj = 0.0;
                for a in 0..p {
                    let mut gy = 0.0;
                    for b in 0..p {
                        gy += gram[a * p + b] * y[b];
                    }
                    let v = 1.0 - gy;
                    hprime[a] = (v / mu).clamp(0.0, 1.0);
                    let h = if v <= 0.0 {
                        0.0
                    } else if v <= mu {
                        v * v / (2.0 * mu)
                    } else {
                        v - 0.5 * mu
                    };
                    obj += delta * h + 0.5 * y[a] * gy;
                }
                // grad_beta = G (y - delta h')
                let mut grad = vec![0.0; p];
                for a in 0..p {
                    let mut acc = 0.0;
                    for b in 0..p {
                        acc += gram[a * p + b] * (y[b] - delta * hprime[b]);
                    }
                    grad[a] = acc;
                }
                prev = beta.clone();
                for a in 0..p {
                    beta[a] = y[a] - step * grad[a];
                }
                if obj > last_obj {
                    // Momentum restart on non-monotone progress.
                    theta_prev = 1.0;
                    prev = beta.clone();
                }
                last_obj = obj;
                if iterations >= cfg.max_iterations / 2 {
                    break;
                }
            }
        }
    }

    // Phase 2: cyclic dual coordinate ascent on 0 <= alpha <= delta,
    // maximizing sum(alpha) - 1/2 alpha' G alpha. Warm start from the
    // smoothed iterate, projected into the feasible box.
    let mut alpha: Vec<f64> = beta.iter().map(|&b| b.clamp(0.0, delta)).collect();
    for a in 0..p {
        if gram[a * p + a] == 0.0 {
            // Constant pair: the dual term is linear, optimum at the cap.
            alpha[a] = delta;
        }
    }
    let galpha = |alpha: &[f64]| -> Vec<f64> {
        let mut g = vec![0.0; p];
        for a in 0..p {
            let mut acc = 0.0;
            for b in 0..p {
                acc += gram[a * p + b] * alpha[b];
            }
            g[a] = acc;
        }
        g
    };
    let mut ga = galpha(&alpha);
    let mut gap = f64::INFINITY;
    let mut sweeps = 0usize;
    while iterations < cfg.max_iterations {
        iterations += 1;
        sweeps += 1;
        for a in 0..p {
            let diag = gram[a * p + a];
            if diag == 0.0 {
                continue;
            }
            let next = (alpha[a] + (1.0 - ga[a]) / diag).clamp(0.0, delta);
            let change = next - alpha[a];
            if change != 0.0 {
                alpha[a] = next;
                for b in 0..p {
                    ga[b] += change * gram[b * p + a];
                }
            }
        }
        if sweeps.is_multiple_of(64) {
            ga = galpha(&alpha);
        }
        // Primal-dual gap in the Gram parameterization.
        let quad: f64 = alpha.iter().zip(&ga).map(|(&x, &g)| x * g).sum();
        let mut primal = 0.5 * quad;
        for &g in &ga {
            let v = 1.0 - g;
            if v > 0.0 {
                primal += delta * v;
            }
        }
        let dual: f64 = alpha.iter().sum::<f64>() - 0.5 * quad;
        gap = primal - dual;
        if gap <= cfg.tolerance {
            break;
        }
    }

    let mut d = vec![0.0; dim];
    for a in 0..p {
        if alpha[a] != 0.0 {
            for i in 0..dim {
                d[i] += alpha[a] * u[a][i];
            }
        }
    }
    let objective = ranksvm_objective(&d, means)?;
    Ok(RankPoolSolution {
        d,
        objective,
        duality_gap: gap,
        iterations,
        converged: gap <= cfg.tolerance,
    })
}

/// Pooled window reshaped to image layout and min-max normalized per
/// channel into [0, 1]; flat channels map to 0.5.
#[derive(Debug, Clone)]
pub struct DynamicImage {
    pub image: Image,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub fn dynamic_image(
    clip: &Clip,
    k: usize,
    start: usize,
    cfg: &RankPoolConfig,
) -> Result<DynamicImage, RankPoolError> {
    if k < 2 {
        return Err(RankPoolError::WindowTooShort { k });
    }
    let window = window_at(clip, k, start)?;
    let means = prefix_means(&window)?;
    let sol = rank_pool_exact(&means, cfg)?;
    let proto = window.anchor();
    let (c, h, w) = (proto.channels(), proto.height(), proto.width());
    let mut image = Image::new(c, h, w, sol.d)?;
    normalize_per_channel(&mut image);
    Ok(DynamicImage {
        image,
        objective: sol.objective,
        iterations: sol.iterations,
        converged: sol.converged,
    })
}

/// In-place per-channel min-max normalization to [0, 1]; channels with
/// zero range become 0.5.
pub fn normalize_per_channel(image: &mut Image) {
    let hw = image.height() * image.width();
    let channels = image.channels();
    for c in 0..channels {
        let slice = &mut image.data_mut()[c * hw..(c + 1) * hw];
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in slice.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        // Channels whose spread is at rounding-noise level are flat;
        // stretching them would amplify ulps into structure.
        let flat = hi - lo <= 1e-12 * lo.abs().max(hi.abs()).max(1.0);
        if flat {
            for v in slice.iter_mut() {
                *v = 0.5;
            }
        } else {
            let range = hi - lo;
            for v in slice.iter_mut() {
                *v = (*v - lo) / range;
            }
        }
    }
}
