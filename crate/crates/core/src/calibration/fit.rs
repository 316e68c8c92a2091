//! Least-squares calibration of the alpha-FLOPs parameters.
//!
//! The loss is the sum of squared relative errors
//! `sum(((c * alpha_flops_i) - t_i) / t_i)^2`. For fixed shape parameters the
//! optimal `c` has a closed form, so the search runs over `(beta, gamma, S_K)`
//! only: a coarse grid per regime (each with its own `c`), then a joint
//! Nelder-Mead refinement of all regimes with one shared `c`.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use thiserror::Error;

use super::dataset::TimingRecord;
use super::nelder_mead::{self, NelderMeadOptions};
use crate::alpha::{
    predicted_time, regime_alpha, AlphaInput, AlphaParams, ParamsError, RegimeParams,
};
use crate::layer::{conv_flops, LayerError};

#[derive(Debug, Error)]
pub enum FitError {
    #[error("regime k={threshold} has {found} records, at least {needed} are needed")]
    TooFewRecords {
        threshold: u32,
        found: usize,
        needed: usize,
    },
    #[error("records come from several devices ({}); fit one device at a time", .0.join(", "))]
    MixedDevices(Vec<String>),
    #[error("parameters are not identifiable: {0}")]
    NonIdentifiable(String),
    #[error("no records to evaluate")]
    EmptyDataset,
    #[error("invalid fixed parameter: {0}")]
    InvalidFixed(String),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Params(#[from] ParamsError),
}

#[derive(Debug, Clone)]
pub struct FitConfig {
    pub beta_range: (f64, f64),
    pub beta_points: usize,
    pub gamma_range: (f64, f64),
    pub gamma_points: usize,
    pub s_k_range: (f64, f64),
    pub s_k_points: usize,
    /// Objective evaluations allowed in the joint refinement.
    pub refine_evals: usize,
    pub min_records_per_regime: usize,
    /// Drop the worst 1% of records by APE (at least one) and refit.
    pub trim: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            beta_range: (1e-4, 1.0),
            beta_points: 25,
            gamma_range: (0.05, 1.0),
            gamma_points: 20,
            s_k_range: (1.0, 64.0),
            s_k_points: 13,
            refine_evals: 500,
            min_records_per_regime: 4,
            trim: false,
        }
    }
}

/// Parameters held constant during a fit. `beta`, `gamma` and `s_k` apply to
/// every regime (`s_k` only to regimes above k=1, whose `S_K` is always 1).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FixedParams {
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub s_k: Option<f64>,
    pub time_per_flop_c: Option<f64>,
}

impl FixedParams {
    /// Applies a `key=value` assignment. Keys: `beta`, `gamma`, `s_k`,
    /// `time_per_flop_c` (alias `c`).
    pub fn set(&mut self, assignment: &str) -> Result<(), FitError> {
        let (key, value) = assignment.split_once('=').ok_or_else(|| {
            FitError::InvalidFixed(format!("expected key=value, got `{assignment}`"))
        })?;
        let value: f64 = value
            .trim()
            .parse()
            .map_err(|_| FitError::InvalidFixed(format!("`{}` is not a number", value.trim())))?;
        let (slot, ok) = match key.trim() {
            "beta" => (&mut self.beta, value > 0.0 && value <= 1.0),
            "gamma" => (&mut self.gamma, value > 0.0 && value <= 1.0),
            "s_k" => (&mut self.s_k, value >= 1.0 && value.is_finite()),
            "c" | "time_per_flop_c" => {
                (&mut self.time_per_flop_c, value > 0.0 && value.is_finite())
            }
            other => return Err(FitError::InvalidFixed(format!("unknown key `{other}`"))),
        };
        if !ok {
            return Err(FitError::InvalidFixed(format!(
                "{} out of range: {value}",
                key.trim()
            )));
        }
        *slot = Some(value);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub params: AlphaParams,
    /// Mean absolute percentage error, in percent.
    pub mape: f64,
    /// Largest absolute percentage error, in percent.
    pub max_ape: f64,
    pub n_records: usize,
    pub converged: bool,
    /// Sum of squared relative errors.
    pub loss: f64,
}

/// Scores `params` against `records` without refitting.
pub fn evaluate(records: &[TimingRecord], params: &AlphaParams) -> Result<FitResult, FitError> {
    if records.is_empty() {
        return Err(FitError::EmptyDataset);
    }
    let mut sum_ape = 0.0;
    let mut max_ape: f64 = 0.0;
    let mut loss = 0.0;
    for r in records {
        let rel = relative_error(r, params)?;
        loss += rel * rel;
        let ape = 100.0 * rel.abs();
        sum_ape += ape;
        max_ape = max_ape.max(ape);
    }
    Ok(FitResult {
        params: params.clone(),
        mape: sum_ape / records.len() as f64,
        max_ape,
        n_records: records.len(),
        converged: true,
        loss,
    })
}

/// `(predicted - measured) / measured`.
pub fn relative_error(record: &TimingRecord, params: &AlphaParams) -> Result<f64, LayerError> {
    let predicted_ms = predicted_time(&record.layer, params)? * 1e3;
    Ok((predicted_ms - record.time_ms) / record.time_ms)
}

/// Fits with the default two-regime table (K=1, K>1) as the template.
pub fn fit(
    records: &[TimingRecord],
    fixed: &FixedParams,
    config: &FitConfig,
) -> Result<FitResult, FitError> {
    fit_with_template(records, &AlphaParams::reference_defaults(), fixed, config)
}

/// Fits every regime of `template` that has records; regimes without records
/// keep the template's values.
pub fn fit_with_template(
    records: &[TimingRecord],
    template: &AlphaParams,
    fixed: &FixedParams,
    config: &FitConfig,
) -> Result<FitResult, FitError> {
    let first = fit_once(records, template, fixed, config)?;
    if !config.trim {
        return Ok(first);
    }
    let mut scored: Vec<(f64, usize)> = records
        .iter()
        .enumerate()
        .map(|(i, r)| Ok((relative_error(r, &first.params)?.abs(), i)))
        .collect::<Result<_, LayerError>>()?;
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let drop = records.len().div_ceil(100);
    let dropped: BTreeSet<usize> = scored.iter().take(drop).map(|&(_, i)| i).collect();
    let kept: Vec<TimingRecord> = records
        .iter()
        .enumerate()
        .filter(|(i, _)| !dropped.contains(i))
        .map(|(_, r)| r.clone())
        .collect();
    fit_once(&kept, template, fixed, config)
}

/// One record reduced to what the objective needs.
#[derive(Debug, Clone, Copy)]
struct Obs {
    threshold: u32,
    /// Formula FLOPs times 1e3, so that `c * work * alpha` is in milliseconds.
    work: f64,
    surface: f64,
    time_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Coord {
    Beta,
    Gamma,
    SK,
}

/// Squared relative error at the best (or fixed) `c`, and that `c`.
///
/// With `r_i = work_i * alpha_i / t_i` the loss is `sum (c r_i - 1)^2`,
/// minimised by `c = sum r / sum r^2`.
fn objective(
    obs: &[&Obs],
    fixed_c: Option<f64>,
    regime: impl Fn(u32) -> RegimeParams,
) -> (f64, f64) {
    let ratios: Vec<f64> = obs
        .iter()
        .map(|o| o.work * regime_alpha(&regime(o.threshold), o.surface) / o.time_ms)
        .collect();
    let c = fixed_c
        .unwrap_or_else(|| ratios.iter().sum::<f64>() / ratios.iter().map(|r| r * r).sum::<f64>());
    let loss = ratios.iter().map(|r| (c * r - 1.0).powi(2)).sum();
    (loss, c)
}

fn log_grid(range: (f64, f64), points: usize) -> Vec<f64> {
    if points <= 1 {
        return vec![range.1];
    }
    let (lo, hi) = (range.0.ln(), range.1.ln());
    (0..points)
        .map(|i| {
            if i == points - 1 {
                range.1
            } else {
                (lo + (hi - lo) * i as f64 / (points - 1) as f64).exp()
            }
        })
        .collect()
}

fn linear_grid(range: (f64, f64), points: usize) -> Vec<f64> {
    if points <= 1 {
        return vec![range.1];
    }
    (0..points)
        .map(|i| {
            if i == points - 1 {
                range.1
            } else {
                range.0 + (range.1 - range.0) * i as f64 / (points - 1) as f64
            }
        })
        .collect()
}

/// Search-space transform: `ln` for beta and `S_K`, identity for gamma.
fn encode(coord: Coord, value: f64) -> f64 {
    match coord {
        Coord::Beta | Coord::SK => value.ln(),
        Coord::Gamma => value,
    }
}

fn decode(coord: Coord, x: f64, config: &FitConfig) -> f64 {
    let (value, (lo, hi)) = match coord {
        Coord::Beta => (x.exp(), config.beta_range),
        Coord::SK => (x.exp(), config.s_k_range),
        Coord::Gamma => (x, config.gamma_range),
    };
    value.clamp(lo, hi)
}

fn grid_step(coord: Coord, config: &FitConfig) -> f64 {
    let (range, points) = match coord {
        Coord::Beta => (config.beta_range, config.beta_points),
        Coord::Gamma => (config.gamma_range, config.gamma_points),
        Coord::SK => (config.s_k_range, config.s_k_points),
    };
    let span = match coord {
        Coord::Gamma => range.1 - range.0,
        _ => (range.1 / range.0).ln(),
    };
    span / (points.max(2) - 1) as f64
}

fn fit_once(
    records: &[TimingRecord],
    template: &AlphaParams,
    fixed: &FixedParams,
    config: &FitConfig,
) -> Result<FitResult, FitError> {
    if records.is_empty() {
        return Err(FitError::NonIdentifiable("dataset is empty".into()));
    }
    let devices: BTreeSet<&str> = records.iter().map(|r| r.device.as_str()).collect();
    if devices.len() > 1 {
        return Err(FitError::MixedDevices(
            devices.into_iter().map(str::to_owned).collect(),
        ));
    }

    let mut obs = Vec::with_capacity(records.len());
    for r in records {
        let conv = r.layer.as_conv();
        let input = AlphaInput::for_conv(&conv)?;
        obs.push(Obs {
            threshold: template.regime_threshold(input.kernel_k),
            work: conv_flops(&conv)? as f64 * 1e3,
            surface: input.surface,
            time_ms: r.time_ms,
        });
    }

    // Starting point: template values overridden by fixed ones.
    let mut current: BTreeMap<u32, RegimeParams> = template.regimes().clone();
    for (&threshold, regime) in current.iter_mut() {
        if let Some(b) = fixed.beta {
            regime.beta = b;
        }
        if let Some(g) = fixed.gamma {
            regime.gamma = g;
        }
        if let (Some(s), true) = (fixed.s_k, threshold > 1) {
            regime.s_k = s;
        }
    }

    let mut by_regime: BTreeMap<u32, Vec<&Obs>> = BTreeMap::new();
    for o in &obs {
        by_regime.entry(o.threshold).or_default().push(o);
    }

    let free_coords = |threshold: u32| -> Vec<Coord> {
        let mut coords = Vec::new();
        if fixed.beta.is_none() {
            coords.push(Coord::Beta);
        }
        if fixed.gamma.is_none() {
            coords.push(Coord::Gamma);
        }
        if fixed.s_k.is_none() && threshold > 1 {
            coords.push(Coord::SK);
        }
        coords
    };

    for (&threshold, members) in &by_regime {
        if members.len() < config.min_records_per_regime {
            return Err(FitError::TooFewRecords {
                threshold,
                found: members.len(),
                needed: config.min_records_per_regime,
            });
        }
        let surfaces: BTreeSet<u64> = members.iter().map(|o| o.surface.to_bits()).collect();
        if !free_coords(threshold).is_empty() && surfaces.len() < 2 {
            return Err(FitError::NonIdentifiable(format!(
                "all records in regime k={threshold} share one effective surface, so beta/gamma/s_k cannot be separated"
            )));
        }
    }

    // Coarse grid per regime, each regime with its own closed-form c.
    for (&threshold, members) in &by_regime {
        let coords = free_coords(threshold);
        if coords.is_empty() {
            continue;
        }
        let base = current[&threshold];
        let axis = |coord: Coord, value: f64| -> Vec<f64> {
            if !coords.contains(&coord) {
                return vec![value];
            }
            match coord {
                Coord::Beta => log_grid(config.beta_range, config.beta_points),
                Coord::Gamma => linear_grid(config.gamma_range, config.gamma_points),
                Coord::SK => log_grid(config.s_k_range, config.s_k_points),
            }
        };
        let betas = axis(Coord::Beta, base.beta);
        let gammas = axis(Coord::Gamma, base.gamma);
        let s_ks = axis(Coord::SK, base.s_k);
        let mut candidates = Vec::with_capacity(betas.len() * gammas.len() * s_ks.len());
        for &beta in &betas {
            for &gamma in &gammas {
                for &s_k in &s_ks {
                    candidates.push(RegimeParams::new(beta, gamma, s_k));
                }
            }
        }
        let fixed_c = fixed.time_per_flop_c;
        let best = candidates
            .into_par_iter()
            .map(|cand| (objective(members, fixed_c, |_| cand).0, cand))
            .min_by(|a, b| {
                a.0.total_cmp(&b.0)
                    .then(a.1.beta.total_cmp(&b.1.beta))
                    .then(a.1.gamma.total_cmp(&b.1.gamma))
                    .then(a.1.s_k.total_cmp(&b.1.s_k))
            })
            .expect("grid is non-empty");
        current.insert(threshold, best.1);
    }

    // Joint refinement with a shared c.
    let layout: Vec<(u32, Coord)> = by_regime
        .keys()
        .flat_map(|&t| free_coords(t).into_iter().map(move |c| (t, c)))
        .collect();
    let x0: Vec<f64> = layout
        .iter()
        .map(|&(t, c)| {
            let r = current[&t];
            encode(
                c,
                match c {
                    Coord::Beta => r.beta,
                    Coord::Gamma => r.gamma,
                    Coord::SK => r.s_k,
                },
            )
        })
        .collect();
    let steps: Vec<f64> = layout.iter().map(|&(_, c)| grid_step(c, config)).collect();
    let all: Vec<&Obs> = obs.iter().collect();
    let apply = |x: &[f64]| -> BTreeMap<u32, RegimeParams> {
        let mut regimes = current.clone();
        for (&(t, c), &xi) in layout.iter().zip(x) {
            let r = regimes.get_mut(&t).expect("layout built from regimes");
            let v = decode(c, xi, config);
            match c {
                Coord::Beta => r.beta = v,
                Coord::Gamma => r.gamma = v,
                Coord::SK => r.s_k = v,
            }
        }
        regimes
    };
    let outcome = nelder_mead::minimize(
        |x| {
            let regimes = apply(x);
            objective(&all, fixed.time_per_flop_c, |t| regimes[&t]).0
        },
        &x0,
        &steps,
        NelderMeadOptions {
            max_evaluations: config.refine_evals,
            ..NelderMeadOptions::default()
        },
    );
    let regimes = apply(&outcome.x);
    let (_, c) = objective(&all, fixed.time_per_flop_c, |t| regimes[&t]);
    let params = AlphaParams::new(regimes, c)?;
    let mut result = evaluate(records, &params)?;
    result.converged = outcome.converged;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::{Conv2DDescriptor, DenseDescriptor, LayerDescriptor};

    fn record(layer: impl Into<LayerDescriptor>, time_ms: f64) -> TimingRecord {
        TimingRecord {
            layer: layer.into(),
            device: "dev".into(),
            time_ms,
            runs: 1,
            time_std_ms: None,
        }
    }

    #[test]
    fn grids_hit_their_endpoints() {
        let b = log_grid((1e-4, 1.0), 25);
        assert_eq!(b.len(), 25);
        assert_eq!(b[24], 1.0);
        assert!((b[0] - 1e-4).abs() < 1e-18);
        let s = log_grid((1.0, 64.0), 13);
        assert!((s[2] - 2.0).abs() < 1e-12);
        let g = linear_grid((0.05, 1.0), 20);
        assert!((g[1] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn fixed_assignment_parsing() {
        let mut f = FixedParams::default();
        f.set("gamma=1").unwrap();
        f.set("c = 2e-11").unwrap();
        assert_eq!(f.gamma, Some(1.0));
        assert_eq!(f.time_per_flop_c, Some(2e-11));
        assert!(f.set("gamma=1.5").is_err());
        assert!(f.set("delta=1").is_err());
        assert!(f.set("beta").is_err());
    }

    #[test]
    fn dense_only_is_not_identifiable() {
        let recs: Vec<_> = (1..=6)
            .map(|d| record(DenseDescriptor::new(100 * d, 100), d as f64))
            .collect();
        assert!(matches!(
            fit(&recs, &FixedParams::default(), &FitConfig::default()),
            Err(FitError::NonIdentifiable(_))
        ));
    }

    #[test]
    fn guards() {
        assert!(matches!(
            fit(&[], &FixedParams::default(), &FitConfig::default()),
            Err(FitError::NonIdentifiable(_))
        ));
        let few: Vec<_> = (1..=3)
            .map(|w| record(Conv2DDescriptor::new(w, w, 8, 8, 1), 1.0))
            .collect();
        assert!(matches!(
            fit(&few, &FixedParams::default(), &FitConfig::default()),
            Err(FitError::TooFewRecords {
                threshold: 1,
                found: 3,
                ..
            })
        ));
        let mut mixed: Vec<_> = (1..=4)
            .map(|w| record(Conv2DDescriptor::new(w, w, 8, 8, 1), 1.0))
            .collect();
        mixed[2].device = "other".into();
        assert!(matches!(
            fit(&mixed, &FixedParams::default(), &FitConfig::default()),
            Err(FitError::MixedDevices(_))
        ));
        assert!(matches!(
            evaluate(&[], &AlphaParams::reference_defaults()),
            Err(FitError::EmptyDataset)
        ));
    }

    #[test]
    fn fixed_gamma_is_honoured() {
        let recs: Vec<_> = [1u32, 2, 4, 8, 16]
            .iter()
            .map(|&w| {
                record(
                    Conv2DDescriptor::new(w, w, 16, 16, 1),
                    1.0 / f64::from(w).sqrt(),
                )
            })
            .collect();
        let mut fixed = FixedParams::default();
        fixed.set("gamma=1").unwrap();
        let res = fit(&recs, &fixed, &FitConfig::default()).unwrap();
        for r in res.params.regimes().values() {
            assert_eq!(r.gamma, 1.0);
        }
    }
}
