//! Noise schedule and forward noising `z_t = λ_t·z₀ + σ_t·ε`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::latent::LatentVideo;

/// Signal coefficient at the least noisy step.
pub const SIGNAL_START: f64 = 0.9999;
/// Signal coefficient at the noisiest step.
pub const SIGNAL_END: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Signal coefficient linearly interpolated between the fixed endpoints.
    LinearSignal,
}

/// Per-timestep signal and noise coefficients, indexed `t = 1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    signal_coef: Vec<f64>,
    noise_coef: Vec<f64>,
}

pub fn build_noise_schedule(steps: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(invalid!("noise schedule needs at least one timestep"));
    }
    let signal_coef: Vec<f64> = match kind {
        ScheduleKind::LinearSignal => (0..steps)
            .map(|i| {
                if steps == 1 {
                    SIGNAL_START
                } else {
                    let frac = i as f64 / (steps - 1) as f64;
                    SIGNAL_START + (SIGNAL_END - SIGNAL_START) * frac
                }
            })
            .collect(),
    };
    let noise_coef = signal_coef.iter().map(|l| noise_from_signal(*l)).collect();
    Ok(NoiseSchedule {
        kind,
        signal_coef,
        noise_coef,
    })
}

fn noise_from_signal(signal: f64) -> f64 {
    // (1-l)(1+l) keeps precision when l is close to one
    ((1.0 - signal) * (1.0 + signal)).sqrt()
}

impl NoiseSchedule {
    /// Builds a schedule from explicit signal coefficients (`signal[0]` is `t = 1`).
    ///
    /// Only the `σ_t² + λ_t² = 1` identity is enforced, so degenerate schedules
    /// used in tests (constant or zero coefficients) can be expressed.
    pub fn from_signal_coefs(signal: Vec<f64>) -> Result<Self> {
        if signal.is_empty() {
            return Err(invalid!("noise schedule needs at least one timestep"));
        }
        if let Some(bad) = signal.iter().find(|l| !(0.0..=1.0).contains(*l)) {
            return Err(invalid!("signal coefficient {bad} outside [0, 1]"));
        }
        let noise_coef = signal.iter().map(|l| noise_from_signal(*l)).collect();
        Ok(Self {
            kind: ScheduleKind::LinearSignal,
            signal_coef: signal,
            noise_coef,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn steps(&self) -> usize {
        self.signal_coef.len()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(invalid!(
                "timestep {t} outside schedule range 1..={}",
                self.steps()
            ));
        }
        Ok(())
    }

    /// `λ_t`. Panics when `t` is outside `1..=T`; use [`Self::coefs`] for a checked lookup.
    pub fn signal(&self, t: usize) -> f64 {
        self.signal_coef[t - 1]
    }

    /// `σ_t`. Panics when `t` is outside `1..=T`.
    pub fn noise(&self, t: usize) -> f64 {
        self.noise_coef[t - 1]
    }

    pub fn coefs(&self, t: usize) -> Result<(f64, f64)> {
        self.check_t(t)?;
        Ok((self.signal(t), self.noise(t)))
    }

    pub fn signal_coefs(&self) -> &[f64] {
        &self.signal_coef
    }

    pub fn noise_coefs(&self) -> &[f64] {
        &self.noise_coef
    }
}

pub fn forward_noise(
    z0: &LatentVideo,
    t: usize,
    eps: &LatentVideo,
    sched: &NoiseSchedule,
) -> Result<LatentVideo> {
    z0.ensure_same_shape(eps, "forward_noise")?;
    let (signal, noise) = sched.coefs(t)?;
    z0.affine_combine(signal, eps, noise)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::LatentShape;

    fn scalar(v: f64) -> LatentVideo {
        LatentVideo::from_elem(LatentShape::new(1, 1, 1, 1).unwrap(), v)
    }

    #[test]
    fn single_step_schedule_is_start_point() {
        let s = build_noise_schedule(1, ScheduleKind::LinearSignal).unwrap();
        assert_eq!(s.signal(1), 0.9999);
        let expected = (1.0f64 - 0.9999 * 0.9999).sqrt();
        assert!((s.noise(1) - expected).abs() / expected < 1e-12);
    }

    #[test]
    fn fifty_step_endpoint() {
        let s = build_noise_schedule(50, ScheduleKind::LinearSignal).unwrap();
        assert!((s.signal(50) - 0.05).abs() < 1e-15);
        assert!((s.noise(50) - 0.9975f64.sqrt()).abs() < 1e-12);
        assert!((s.noise(50) - 0.99875).abs() < 1e-5);
        assert_eq!(s.signal(1), SIGNAL_START);
    }

    #[test]
    fn identity_and_monotonicity() {
        for steps in [1, 2, 7, 50, 1000] {
            let s = build_noise_schedule(steps, ScheduleKind::LinearSignal).unwrap();
            for t in 1..=steps {
                let (l, n) = s.coefs(t).unwrap();
                assert!(l > 0.0 && l <= 1.0);
                assert!((l * l + n * n - 1.0).abs() < 1e-12);
                assert!((n - (1.0 - l * l).sqrt()).abs() <= 1e-12 * n.max(1e-300));
                if t > 1 {
                    assert!(l < s.signal(t - 1));
                }
            }
        }
    }

    #[test]
    fn zero_steps_rejected() {
        assert!(build_noise_schedule(0, ScheduleKind::LinearSignal).is_err());
    }

    #[test]
    fn noising_endpoints_and_scalar_trace() {
        let z0 = scalar(1.0);
        let eps = scalar(0.5);
        let clean = NoiseSchedule::from_signal_coefs(vec![1.0]).unwrap();
        assert_eq!(forward_noise(&z0, 1, &eps, &clean).unwrap(), z0);
        let pure = NoiseSchedule::from_signal_coefs(vec![0.0]).unwrap();
        assert_eq!(forward_noise(&z0, 1, &eps, &pure).unwrap(), eps);
        let s = NoiseSchedule::from_signal_coefs(vec![0.6]).unwrap();
        assert!((s.noise(1) - 0.8).abs() < 1e-15);
        let out = forward_noise(&z0, 1, &eps, &s).unwrap();
        assert!((out.as_slice()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn noising_errors() {
        let s = build_noise_schedule(10, ScheduleKind::LinearSignal).unwrap();
        let a = scalar(1.0);
        let b = LatentVideo::zeros(LatentShape::new(2, 1, 1, 1).unwrap());
        assert!(forward_noise(&a, 1, &b, &s).is_err());
        assert!(forward_noise(&a, 0, &a, &s).is_err());
        assert!(forward_noise(&a, 11, &a, &s).is_err());
    }
}
