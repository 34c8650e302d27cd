//! Transmit waveforms, analytic-signal conversion, and pulse deconvolution.
//!
//! Measurements are modeled as a real LFM chirp convolved with the scene
//! impulse response. `pulse_deconvolve` inverts that convolution per trace,
//! producing the complex "pulse-deconvolved" signal the reconstruction
//! stages consume: a sparse train of complex amplitudes whose modulus peaks
//! at scatterer round-trip times and whose phase carries sub-bin timing.

use crate::fft::{convolve, dft, idft};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("invalid argument: {0}")]
    InvalidArg(String),
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("optimizer diverged (non-finite iterate) at iteration {iteration}")]
    Diverged { iteration: usize },
}

/// Real transmit pulse plus the chirp parameters it was generated from.
#[derive(Debug, Clone)]
pub struct Pulse {
    /// Pressure samples, arbitrary units.
    pub samples: Vec<f64>,
    pub f_s: f64,
    /// Start frequency of the sweep (Hz).
    pub f0: f64,
    /// Swept bandwidth (Hz); instantaneous frequency ends at `f0 + bandwidth`.
    pub bandwidth: f64,
    pub duration: f64,
}

/// Complex-valued trace sampled at `f_s`, first sample at time `t0`.
#[derive(Debug, Clone)]
pub struct AnalyticSignal {
    pub samples: Vec<Complex64>,
    pub f_s: f64,
    pub t0: f64,
}

impl AnalyticSignal {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.samples
            .iter()
            .all(|c| c.re.is_finite() && c.im.is_finite())
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|c| c.norm_sqr()).sum()
    }
}

/// Which kernel the deconvolution fidelity term convolves the estimate with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DeconvKernel {
    /// Forward model `estimate * p`: matches how measurements are generated
    /// (impulse response convolved with the pulse) and keeps the output on
    /// the same time base as the input trace. Default.
    #[default]
    Pulse,
    /// `estimate * p(-t)`: time-reversed kernel. The minimizer is delayed by
    /// `len(p) - 1` bins relative to the impulse response and smeared by the
    /// pulse autocorrelation; provided for completeness.
    TimeReversedPulse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeconvConfig {
    /// Weight on the sparsity term `sum |z_i|` (applied to the trace after
    /// internal peak normalization).
    pub lambda1: f64,
    /// Weight on the phase-smoothness term `sum |wrapped forward difference
    /// of the phase|`.
    pub lambda2: f64,
    pub iterations: usize,
    pub lr: f64,
    pub kernel: DeconvKernel,
}

impl Default for DeconvConfig {
    fn default() -> Self {
        DeconvConfig {
            lambda1: 1e-4,
            lambda2: 1e-4,
            iterations: 2000,
            lr: 1e-3,
            kernel: DeconvKernel::Pulse,
        }
    }
}

/// Deconvolved trace plus the optimization trail needed to audit it.
#[derive(Debug, Clone)]
pub struct DeconvResult {
    pub signal: AnalyticSignal,
    /// Composite objective at iteration 0 / final, in peak-normalized units.
    pub objective_initial: f64,
    pub objective_final: f64,
    /// Data-fidelity term (squared residual) at termination, normalized units.
    pub fidelity_final: f64,
    /// `(iteration, objective)` at logged checkpoints, including first/last.
    pub checkpoints: Vec<(usize, f64)>,
}

/// Cosine-tapered window of length `n`: fraction `ratio` of the total length
/// is tapered (half at each end), the middle is flat. `ratio = 0` is
/// rectangular, `ratio = 1` is a Hann window.
pub fn tukey_window(n: usize, ratio: f64) -> Vec<f64> {
    if n <= 1 {
        return vec![1.0; n];
    }
    let r = ratio.clamp(0.0, 1.0);
    if r == 0.0 {
        return vec![1.0; n];
    }
    (0..n)
        .map(|k| {
            let x = k as f64 / (n - 1) as f64;
            if x < r / 2.0 {
                0.5 * (1.0 + (PI * (2.0 * x / r - 1.0)).cos())
            } else if x > 1.0 - r / 2.0 {
                0.5 * (1.0 + (PI * (2.0 * x / r - 2.0 / r + 1.0)).cos())
            } else {
                1.0
            }
        })
        .collect()
}

/// Linear-frequency-modulated chirp sweeping `f0 .. f0 + bandwidth` over
/// `t_dur` seconds, shaped by a Tukey window.
pub fn lfm_chirp(
    f0: f64,
    bandwidth: f64,
    t_dur: f64,
    f_s: f64,
    tukey_ratio: f64,
) -> Result<Pulse, SignalError> {
    if !(f0 > 0.0) || !(bandwidth > 0.0) {
        return Err(SignalError::InvalidArg(format!(
            "chirp frequencies must be positive (f0={f0}, bandwidth={bandwidth})"
        )));
    }
    if !(t_dur > 0.0) {
        return Err(SignalError::InvalidArg(format!(
            "chirp duration must be positive (got {t_dur})"
        )));
    }
    if f_s < 2.0 * (f0 + bandwidth) {
        return Err(SignalError::InvalidArg(format!(
            "sample rate {f_s} below Nyquist for sweep ending at {} Hz",
            f0 + bandwidth
        )));
    }
    if !(0.0..=1.0).contains(&tukey_ratio) {
        return Err(SignalError::InvalidArg(format!(
            "tukey_ratio must be in [0, 1] (got {tukey_ratio})"
        )));
    }
    let n = (t_dur * f_s).round() as usize;
    if n == 0 {
        return Err(SignalError::InvalidArg(
            "duration shorter than one sample".into(),
        ));
    }
    let alpha = bandwidth / t_dur;
    let window = tukey_window(n, tukey_ratio);
    let samples = (0..n)
        .map(|k| {
            let t = k as f64 / f_s;
            window[k] * (2.0 * PI * (f0 * t + 0.5 * alpha * t * t)).cos()
        })
        .collect();
    Ok(Pulse {
        samples,
        f_s,
        f0,
        bandwidth,
        duration: t_dur,
    })
}

/// Analytic signal `x + j H(x)` via the one-sided-spectrum DFT method. The
/// real part of the output is the input, bit for bit.
pub fn to_analytic(x: &[f64], f_s: f64) -> Result<AnalyticSignal, SignalError> {
    if x.len() < 2 {
        return Err(SignalError::InvalidArg(
            "analytic conversion needs at least 2 samples".into(),
        ));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(SignalError::NonFinite("real input trace"));
    }
    let n = x.len();
    let mut spec = dft(&x.iter().map(|&v| Complex64::new(v, 0.0)).collect::<Vec<_>>());
    // One-sided spectrum: keep DC (and Nyquist when even), double positive
    // frequencies, zero negative frequencies.
    for (k, s) in spec.iter_mut().enumerate() {
        if k == 0 || (n % 2 == 0 && k == n / 2) {
            // unchanged
        } else if k < n.div_ceil(2) {
            *s *= 2.0;
        } else {
            *s = Complex64::new(0.0, 0.0);
        }
    }
    let analytic = idft(&spec);
    // Imaginary parts are the Hilbert transform; reals are rebuilt from the
    // input so the identity `re(to_analytic(x)) == x` holds exactly.
    let samples = x
        .iter()
        .zip(&analytic)
        .map(|(&re, a)| Complex64::new(re, a.im))
        .collect();
    Ok(AnalyticSignal {
        samples,
        f_s,
        t0: 0.0,
    })
}

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Adam {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + Self::EPS);
        }
    }
}

/// Objective + gradient for the deconvolution problem. `z` is interleaved
/// (re, im); the kernel is the real pulse (optionally time-reversed).
struct DeconvProblem<'a> {
    target: &'a [Complex64],
    kernel: Vec<f64>,
    lambda1: f64,
    lambda2: f64,
}

impl DeconvProblem<'_> {
    fn objective_and_grad(&self, z: &[Complex64], grad: &mut [f64]) -> f64 {
        let n = self.target.len();
        let k = self.kernel.len();
        grad.fill(0.0);

        // Fidelity: || (z * kernel)[0..n] - target ||^2. The convolution tail
        // beyond the recorded trace is not penalized.
        let kc: Vec<Complex64> = self.kernel.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        let conv = convolve(z, &kc);
        let mut fidelity = 0.0;
        let mut residual = vec![Complex64::new(0.0, 0.0); n];
        for i in 0..n {
            let r = conv[i] - self.target[i];
            fidelity += r.norm_sqr();
            residual[i] = r;
        }
        // grad_i = 2 * sum_k residual[k] * kernel[k - i]: correlation of the
        // residual with the kernel, realized as convolution with its reverse.
        let rev: Vec<Complex64> = self
            .kernel
            .iter()
            .rev()
            .map(|&v| Complex64::new(v, 0.0))
            .collect();
        let corr = convolve(&residual, &rev);
        for i in 0..n {
            let g = corr[i + k - 1] * 2.0;
            grad[2 * i] += g.re;
            grad[2 * i + 1] += g.im;
        }

        // Sparsity: lambda1 * sum |z_i|, subgradient 0 at the origin.
        let mut l1 = 0.0;
        if self.lambda1 > 0.0 {
            for (i, &zi) in z.iter().enumerate() {
                let m = zi.norm();
                l1 += m;
                if m > 1e-300 {
                    grad[2 * i] += self.lambda1 * zi.re / m;
                    grad[2 * i + 1] += self.lambda1 * zi.im / m;
                }
            }
        }

        // Phase smoothness: lambda2 * sum |wrap(phase_{i+1} - phase_i)|.
        // d phase / d(re, im) = (-im, re) / |z|^2; bins near zero modulus
        // carry no meaningful phase and are skipped.
        let mut tv = 0.0;
        if self.lambda2 > 0.0 {
            const PHASE_EPS_SQ: f64 = 1e-24;
            for i in 0..n.saturating_sub(1) {
                let (a, b) = (z[i], z[i + 1]);
                let (na, nb) = (a.norm_sqr(), b.norm_sqr());
                if na < PHASE_EPS_SQ || nb < PHASE_EPS_SQ {
                    continue;
                }
                let d = wrap_angle(b.arg() - a.arg());
                tv += d.abs();
                let s = d.signum();
                grad[2 * i] += self.lambda2 * s * a.im / na;
                grad[2 * i + 1] += self.lambda2 * s * (-a.re) / na;
                grad[2 * (i + 1)] += self.lambda2 * s * (-b.im) / nb;
                grad[2 * (i + 1) + 1] += self.lambda2 * s * b.re / nb;
            }
        }

        fidelity + self.lambda1 * l1 + self.lambda2 * tv
    }

    fn fidelity_only(&self, z: &[Complex64]) -> f64 {
        let n = self.target.len();
        let kc: Vec<Complex64> = self.kernel.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        let conv = convolve(z, &kc);
        (0..n).map(|i| (conv[i] - self.target[i]).norm_sqr()).sum()
    }
}

/// Inverts the pulse from a measured trace by minimizing
/// `||z * kernel - s||^2 + lambda1 ||z||_1 + lambda2 ||grad(phase z)||_1`
/// with Adam. The trace is peak-normalized internally (and rescaled on
/// output) so the default step size behaves identically across input scales;
/// reported objectives are in normalized units.
pub fn pulse_deconvolve(
    s: &AnalyticSignal,
    p: &Pulse,
    cfg: &DeconvConfig,
) -> Result<DeconvResult, SignalError> {
    if !s.is_finite() {
        return Err(SignalError::NonFinite("measured trace"));
    }
    if p.samples.iter().any(|v| !v.is_finite()) {
        return Err(SignalError::NonFinite("pulse"));
    }
    if s.len() < p.samples.len() {
        return Err(SignalError::InvalidArg(format!(
            "trace shorter than pulse ({} < {})",
            s.len(),
            p.samples.len()
        )));
    }
    if cfg.iterations == 0 {
        return Err(SignalError::InvalidArg("iterations must be >= 1".into()));
    }
    if cfg.lambda1 < 0.0 || cfg.lambda2 < 0.0 || !(cfg.lr > 0.0) {
        return Err(SignalError::InvalidArg(
            "deconvolution weights must be >= 0 and lr > 0".into(),
        ));
    }

    let n = s.len();
    let peak = s.samples.iter().map(|c| c.norm()).fold(0.0, f64::max);
    if peak == 0.0 {
        return Ok(DeconvResult {
            signal: AnalyticSignal {
                samples: vec![Complex64::new(0.0, 0.0); n],
                f_s: s.f_s,
                t0: s.t0,
            },
            objective_initial: 0.0,
            objective_final: 0.0,
            fidelity_final: 0.0,
            checkpoints: vec![(0, 0.0)],
        });
    }

    let target: Vec<Complex64> = s.samples.iter().map(|c| c / peak).collect();
    let kernel = match cfg.kernel {
        DeconvKernel::Pulse => p.samples.clone(),
        DeconvKernel::TimeReversedPulse => p.samples.iter().rev().copied().collect(),
    };
    let problem = DeconvProblem {
        target: &target,
        kernel,
        lambda1: cfg.lambda1,
        lambda2: cfg.lambda2,
    };

    let mut z = vec![Complex64::new(0.0, 0.0); n];
    let mut grad = vec![0.0; 2 * n];
    let mut adam = Adam::new(2 * n, cfg.lr);
    let checkpoint_every = (cfg.iterations / 10).max(1);
    let mut checkpoints = Vec::new();
    let mut objective_initial = 0.0;

    for it in 0..cfg.iterations {
        let objective = problem.objective_and_grad(&z, &mut grad);
        if !objective.is_finite() {
            return Err(SignalError::Diverged { iteration: it });
        }
        if it == 0 {
            objective_initial = objective;
        }
        if it % checkpoint_every == 0 {
            checkpoints.push((it, objective));
        }
        // Apply the step on an interleaved view of z.
        let mut flat: Vec<f64> = Vec::with_capacity(2 * n);
        for c in &z {
            flat.push(c.re);
            flat.push(c.im);
        }
        adam.step(&mut flat, &grad);
        for (i, c) in z.iter_mut().enumerate() {
            *c = Complex64::new(flat[2 * i], flat[2 * i + 1]);
        }
        if z.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(SignalError::Diverged { iteration: it });
        }
    }
    let final_objective = {
        let mut scratch = vec![0.0; 2 * n];
        problem.objective_and_grad(&z, &mut scratch)
    };
    checkpoints.push((cfg.iterations, final_objective));
    let fidelity_final = problem.fidelity_only(&z);

    Ok(DeconvResult {
        signal: AnalyticSignal {
            samples: z.into_iter().map(|c| c * peak).collect(),
            f_s: s.f_s,
            t0: s.t0,
        },
        objective_initial,
        objective_final: final_objective,
        fidelity_final,
        checkpoints,
    })
}
