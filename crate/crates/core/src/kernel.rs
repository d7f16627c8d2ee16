//! Smoothing kernels pooling controls across nearby failure times.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KernelShape {
    /// `I(|u| <= 1)`.
    #[default]
    Indicator,
    /// `0.75 (1 - u^2)` on `|u| < 1`.
    Epanechnikov,
    /// `exp(-1 / (1 - u^2))` on `|u| < 1`; infinitely differentiable.
    SmoothBump,
}

impl KernelShape {
    pub fn eval(self, u: f64) -> f64 {
        let a = u.abs();
        match self {
            KernelShape::Indicator => {
                if a <= 1.0 {
                    1.0
                } else {
                    0.0
                }
            }
            KernelShape::Epanechnikov => {
                if a < 1.0 {
                    0.75 * (1.0 - u * u)
                } else {
                    0.0
                }
            }
            KernelShape::SmoothBump => {
                if a < 1.0 {
                    (-1.0 / (1.0 - u * u)).exp()
                } else {
                    0.0
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            KernelShape::Indicator => "indicator",
            KernelShape::Epanechnikov => "epanechnikov",
            KernelShape::SmoothBump => "smooth_bump",
        }
    }
}

impl std::str::FromStr for KernelShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "indicator" => Ok(KernelShape::Indicator),
            "epanechnikov" => Ok(KernelShape::Epanechnikov),
            "smooth_bump" => Ok(KernelShape::SmoothBump),
            other => Err(Error::invalid(format!("unknown kernel '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    Fixed(f64),
    /// `h = h0 * (n / n0)^(-rate)`, with `rate` in `(1/4, 1/2)`.
    Scaled { h0: f64, n0: f64, rate: f64 },
}

impl Default for Bandwidth {
    fn default() -> Self {
        Bandwidth::Scaled {
            h0: 0.05,
            n0: 200.0,
            rate: 1.0 / 3.0,
        }
    }
}

/// Kernel `psi` and bandwidth `h`; the smoothing weight of a time lag
/// `dt` is `height * psi(dt / h)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelConfig {
    pub shape: KernelShape,
    pub bandwidth: Bandwidth,
    /// Positive multiplier on the kernel; every estimator output is invariant to it.
    pub height: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            shape: KernelShape::Indicator,
            bandwidth: Bandwidth::default(),
            height: 1.0,
        }
    }
}

impl KernelConfig {
    pub fn with_bandwidth(shape: KernelShape, h: f64) -> Self {
        KernelConfig {
            shape,
            bandwidth: Bandwidth::Fixed(h),
            height: 1.0,
        }
    }

    /// Fixes the bandwidth for a cohort of size `n`.
    pub fn resolve(&self, n: usize) -> Result<Kernel> {
        if !(self.height > 0.0 && self.height.is_finite()) {
            return Err(Error::invalid("kernel height must be positive"));
        }
        let h = match self.bandwidth {
            Bandwidth::Fixed(h) => h,
            Bandwidth::Scaled { h0, n0, rate } => {
                if !(rate > 0.25 && rate < 0.5) {
                    return Err(Error::invalid(format!(
                        "bandwidth rate {rate} outside (1/4, 1/2)"
                    )));
                }
                if !(h0 > 0.0 && n0 > 0.0) {
                    return Err(Error::invalid("bandwidth anchor must be positive"));
                }
                h0 * (n as f64 / n0).powf(-rate)
            }
        };
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::invalid(format!("bandwidth must be positive, got {h}")));
        }
        Ok(Kernel {
            shape: self.shape,
            h,
            height: self.height,
        })
    }
}

/// A kernel with its bandwidth fixed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kernel {
    pub shape: KernelShape,
    pub h: f64,
    pub height: f64,
}

impl Kernel {
    pub fn weight(&self, dt: f64) -> f64 {
        self.height * self.shape.eval(dt / self.h)
    }

    /// Half-width of the support in time units.
    pub fn reach(&self) -> f64 {
        self.h
    }
}
