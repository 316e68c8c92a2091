//! The alpha-FLOPs correction.
//!
//! A convolution's classical FLOPs are scaled by
//!
//! ```text
//! alpha_K(S) = ((1 - beta_K) * S_K / S + beta_K) ^ gamma_K
//! ```
//!
//! where `S` is the effective surface (`w_out * h_out * batch`) and the
//! parameters `(beta_K, gamma_K, S_K)` are looked up by kernel size. Predicted
//! execution time is the alpha-FLOPs count times a per-device constant `c`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::layer::{conv_flops, output_shape, Conv2DDescriptor, LayerDescriptor, LayerError};

#[derive(Debug, Error)]
pub enum ParamsError {
    #[error("regime k={threshold}: {reason}")]
    InvalidRegime { threshold: u32, reason: String },
    #[error("parameter table needs a k=1 regime and at least one regime for k>1")]
    MissingRegime,
    #[error("time_per_flop_c must be finite and > 0 (got {0})")]
    InvalidTimePerFlop(f64),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("reading parameter file: {0}")]
    Io(#[from] std::io::Error),
}

/// Correction parameters for one kernel-size regime.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegimeParams {
    pub beta: f64,
    pub gamma: f64,
    /// Minimum effective surface `S_K`.
    pub s_k: f64,
}

impl RegimeParams {
    pub fn new(beta: f64, gamma: f64, s_k: f64) -> Self {
        Self { beta, gamma, s_k }
    }

    fn validate(&self, threshold: u32) -> Result<(), ParamsError> {
        let fail = |reason: String| Err(ParamsError::InvalidRegime { threshold, reason });
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return fail(format!("beta must lie in (0, 1], got {}", self.beta));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return fail(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        if !(self.s_k >= 1.0 && self.s_k.is_finite()) {
            return fail(format!("s_k must be >= 1, got {}", self.s_k));
        }
        if threshold == 1 && self.s_k != 1.0 {
            return fail(format!("the k=1 regime has s_k = 1, got {}", self.s_k));
        }
        Ok(())
    }
}

/// A regime table keyed by kernel-size threshold plus the seconds-per-alpha-FLOP
/// constant of one device.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaParams {
    regimes: BTreeMap<u32, RegimeParams>,
    time_per_flop_c: f64,
}

impl AlphaParams {
    pub fn new(
        regimes: BTreeMap<u32, RegimeParams>,
        time_per_flop_c: f64,
    ) -> Result<Self, ParamsError> {
        if !regimes.contains_key(&1) || regimes.len() < 2 {
            return Err(ParamsError::MissingRegime);
        }
        if regimes.contains_key(&0) {
            return Err(ParamsError::InvalidRegime {
                threshold: 0,
                reason: "thresholds start at k=1".into(),
            });
        }
        for (&threshold, regime) in &regimes {
            regime.validate(threshold)?;
        }
        if !(time_per_flop_c > 0.0 && time_per_flop_c.is_finite()) {
            return Err(ParamsError::InvalidTimePerFlop(time_per_flop_c));
        }
        Ok(Self {
            regimes,
            time_per_flop_c,
        })
    }

    /// Two regimes (K=1 and K>1) fitted on a Quadro T2000, with `c` set so
    /// that a 327.68 MFLOPs unary convolution on a 1x1 input takes 6.154 ms.
    pub fn reference_defaults() -> Self {
        Self::two_regime(
            RegimeParams::new(0.02, 0.99, 1.0),
            RegimeParams::new(0.001, 0.56, 1.0),
            1.878e-11,
        )
        .expect("built-in parameters are valid")
    }

    pub fn two_regime(
        unary: RegimeParams,
        larger: RegimeParams,
        time_per_flop_c: f64,
    ) -> Result<Self, ParamsError> {
        Self::new(BTreeMap::from([(1, unary), (2, larger)]), time_per_flop_c)
    }

    pub fn regimes(&self) -> &BTreeMap<u32, RegimeParams> {
        &self.regimes
    }

    pub fn time_per_flop_c(&self) -> f64 {
        self.time_per_flop_c
    }

    /// Threshold of the regime governing kernel size `k`: the largest threshold `<= k`.
    pub fn regime_threshold(&self, k: u32) -> u32 {
        *self
            .regimes
            .range(..=k.max(1))
            .next_back()
            .expect("k=1 regime always present")
            .0
    }

    pub fn regime_for(&self, k: u32) -> &RegimeParams {
        &self.regimes[&self.regime_threshold(k)]
    }

    pub fn with_time_per_flop(&self, time_per_flop_c: f64) -> Result<Self, ParamsError> {
        Self::new(self.regimes.clone(), time_per_flop_c)
    }

    pub fn with_regime(&self, threshold: u32, regime: RegimeParams) -> Result<Self, ParamsError> {
        let mut regimes = self.regimes.clone();
        regimes.insert(threshold, regime);
        Self::new(regimes, self.time_per_flop_c)
    }

    /// Returns a copy whose `c` makes `predicted_time(layer)` equal `seconds`.
    pub fn calibrated_to(
        &self,
        layer: &LayerDescriptor,
        seconds: f64,
    ) -> Result<Self, CalibrateError> {
        let work = alpha_flops(layer, self)?;
        Ok(self.with_time_per_flop(seconds / work)?)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ParamsError> {
        std::fs::read_to_string(path)?.parse()
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        std::fs::write(path, self.to_file_string())
    }

    /// Serializes to the `key = value` parameter-file format. Values are
    /// printed with their shortest round-trip representation, so reloading
    /// yields bit-identical parameters.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        writeln!(out, "time_per_flop_c = {:e}", self.time_per_flop_c).unwrap();
        for (threshold, r) in &self.regimes {
            writeln!(out).unwrap();
            writeln!(out, "[regime k={threshold}]").unwrap();
            writeln!(out, "beta = {}", r.beta).unwrap();
            writeln!(out, "gamma = {}", r.gamma).unwrap();
            writeln!(out, "s_k = {}", r.s_k).unwrap();
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum CalibrateError {
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Params(#[from] ParamsError),
}

#[derive(Default)]
struct PartialRegime {
    beta: Option<f64>,
    gamma: Option<f64>,
    s_k: Option<f64>,
}

impl std::str::FromStr for AlphaParams {
    type Err = ParamsError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let parse_err = |line: usize, message: String| ParamsError::Parse { line, message };
        let mut c: Option<f64> = None;
        let mut sections: Vec<(usize, u32, PartialRegime)> = Vec::new();

        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(header) = line.strip_prefix('[') {
                let inner = header.strip_suffix(']').ok_or_else(|| {
                    parse_err(lineno, format!("unterminated section header `{line}`"))
                })?;
                let threshold = inner
                    .trim()
                    .strip_prefix("regime")
                    .map(str::trim)
                    .and_then(|rest| rest.strip_prefix("k="))
                    .and_then(|k| k.trim().parse::<u32>().ok())
                    .ok_or_else(|| {
                        parse_err(lineno, format!("expected `[regime k=<int>]`, got `{line}`"))
                    })?;
                if sections.iter().any(|(_, t, _)| *t == threshold) {
                    return Err(parse_err(lineno, format!("duplicate regime k={threshold}")));
                }
                sections.push((lineno, threshold, PartialRegime::default()));
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                parse_err(lineno, format!("expected `key = value`, got `{line}`"))
            })?;
            let key = key.trim();
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|_| parse_err(lineno, format!("`{}` is not a number", value.trim())))?;
            let slot = match sections.last_mut() {
                None => match key {
                    "time_per_flop_c" => &mut c,
                    other => {
                        return Err(parse_err(
                            lineno,
                            format!("unknown top-level key `{other}`"),
                        ))
                    }
                },
                Some((_, _, regime)) => match key {
                    "beta" => &mut regime.beta,
                    "gamma" => &mut regime.gamma,
                    "s_k" => &mut regime.s_k,
                    other => {
                        return Err(parse_err(lineno, format!("unknown regime key `{other}`")))
                    }
                },
            };
            if slot.replace(value).is_some() {
                return Err(parse_err(lineno, format!("duplicate key `{key}`")));
            }
        }

        let c = c.ok_or_else(|| parse_err(0, "missing `time_per_flop_c`".into()))?;
        let mut regimes = BTreeMap::new();
        for (lineno, threshold, partial) in sections {
            let missing =
                |name: &str| parse_err(lineno, format!("regime k={threshold} is missing `{name}`"));
            let regime = RegimeParams {
                beta: partial.beta.ok_or_else(|| missing("beta"))?,
                gamma: partial.gamma.ok_or_else(|| missing("gamma"))?,
                s_k: partial.s_k.ok_or_else(|| missing("s_k"))?,
            };
            regimes.insert(threshold, regime);
        }
        AlphaParams::new(regimes, c)
    }
}

/// The effective surface and kernel size of one layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaInput {
    pub surface: f64,
    pub kernel_k: u32,
}

impl AlphaInput {
    pub fn new(surface: f64, kernel_k: u32) -> Self {
        Self { surface, kernel_k }
    }

    /// Batch counts as a spatial dimension: `S = w_out * h_out * batch`.
    pub fn for_conv(c: &Conv2DDescriptor) -> Result<Self, LayerError> {
        let (w_out, h_out) = output_shape(c)?;
        let surface = f64::from(w_out) * f64::from(h_out) * f64::from(c.batch);
        Ok(Self::new(surface, c.kernel_k()))
    }
}

/// The correction factor, in `(0, 1]`. Surfaces below `S_K` are clamped to
/// `S_K`, giving exactly 1.
pub fn alpha_factor(input: &AlphaInput, params: &AlphaParams) -> f64 {
    regime_alpha(params.regime_for(input.kernel_k), input.surface)
}

/// The correction factor for one regime at effective surface `surface`.
pub fn regime_alpha(r: &RegimeParams, surface: f64) -> f64 {
    let s = surface.max(r.s_k);
    ((1.0 - r.beta) * r.s_k / s + r.beta).powf(r.gamma)
}

/// `conv_flops * alpha`. Dense layers go through their unary-convolution form.
pub fn alpha_flops(layer: &LayerDescriptor, params: &AlphaParams) -> Result<f64, LayerError> {
    let conv = layer.as_conv();
    let flops = conv_flops(&conv)?;
    Ok(flops as f64 * alpha_factor(&AlphaInput::for_conv(&conv)?, params))
}

/// Predicted execution time in seconds.
pub fn predicted_time(layer: &LayerDescriptor, params: &AlphaParams) -> Result<f64, LayerError> {
    Ok(params.time_per_flop_c * alpha_flops(layer, params)?)
}

/// Ratio of work actually done by a parallel program to the serial
/// expectation when a task with parallel fraction `beta` is scaled by
/// `n_scale`: `(1 - beta) / n_scale + beta`.
pub fn gustafson_ratio(beta: f64, n_scale: f64) -> f64 {
    (1.0 - beta) / n_scale + beta
}
