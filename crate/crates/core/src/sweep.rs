//! Equal-FLOPs sweep construction.
//!
//! One axis of a convolution is varied while a compensating pair of
//! dimensions is chosen, as integers, so that the FLOPs count stays as close
//! as possible to a target.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::layer::{conv_flops, Conv2DDescriptor, LayerError, Padding};

/// Relative distance from the target beyond which a point is dropped.
pub const FLOPS_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    K,
    WH,
    CIn,
    COut,
    Batch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Compensation {
    /// Channel pair, split as evenly as possible.
    CInCOut,
    /// Spatial pair, as square as possible.
    WH,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SweepPoint {
    /// A value of the varied axis; the compensating dimensions are solved for.
    Axis(u32),
    /// A hand-written layer taken as is.
    Explicit(Conv2DDescriptor),
}

impl fmt::Display for SweepPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SweepPoint::Axis(v) => write!(f, "{v}"),
            SweepPoint::Explicit(c) => write!(f, "{c}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub target_flops: u64,
    pub varied: Axis,
    pub compensating: Compensation,
    pub points: Vec<SweepPoint>,
    /// Dimensions that are neither varied nor compensating.
    pub base: Conv2DDescriptor,
}

#[derive(Debug, Error, PartialEq)]
pub enum SweepError {
    #[error("target FLOPs must be positive")]
    ZeroTarget,
    #[error("FLOPs cannot stay constant without a compensating axis")]
    NoCompensation,
    #[error("varied axis {0:?} overlaps the compensating axis {1:?}")]
    AxisConflict(Axis, Compensation),
    #[error("sweep has no points")]
    Empty,
    #[error("no point of the sweep gets within 5% of {target} FLOPs")]
    Unachievable { target: u64 },
    #[error("unknown {what} `{value}`")]
    UnknownName { what: &'static str, value: String },
    #[error(transparent)]
    Layer(#[from] LayerError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DroppedPoint {
    pub point: SweepPoint,
    /// Best FLOPs reachable at this point, when any valid layer exists.
    pub achieved: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub layers: Vec<Conv2DDescriptor>,
    pub dropped: Vec<DroppedPoint>,
}

impl SweepSpec {
    /// Sweep over every integer in `lo..=hi`.
    pub fn over_range(
        target_flops: u64,
        varied: Axis,
        compensating: Compensation,
        lo: u32,
        hi: u32,
        base: Conv2DDescriptor,
    ) -> Self {
        Self {
            target_flops,
            varied,
            compensating,
            points: (lo..=hi).map(SweepPoint::Axis).collect(),
            base,
        }
    }

    pub fn validate(&self) -> Result<(), SweepError> {
        if self.target_flops == 0 {
            return Err(SweepError::ZeroTarget);
        }
        let conflict = matches!(
            (self.varied, self.compensating),
            (Axis::CIn | Axis::COut, Compensation::CInCOut) | (Axis::WH, Compensation::WH)
        );
        if conflict {
            return Err(SweepError::AxisConflict(self.varied, self.compensating));
        }
        if self.compensating == Compensation::None {
            return Err(SweepError::NoCompensation);
        }
        if self.points.is_empty() {
            return Err(SweepError::Empty);
        }
        Ok(())
    }
}

/// Builds the sweep. Points whose best integer layer misses the target by
/// more than 5% are dropped and listed in the outcome.
pub fn generate_sweep(spec: &SweepSpec) -> Result<SweepOutcome, SweepError> {
    spec.validate()?;
    let mut layers = Vec::new();
    let mut dropped = Vec::new();
    for point in &spec.points {
        let best = match point {
            SweepPoint::Explicit(c) => conv_flops(c).ok().map(|f| (*c, f)),
            SweepPoint::Axis(v) => solve_point(spec, *v),
        };
        match best {
            Some((layer, flops)) if within_tolerance(flops, spec.target_flops) => {
                layers.push(layer)
            }
            other => dropped.push(DroppedPoint {
                point: point.clone(),
                achieved: other.map(|(_, f)| f),
            }),
        }
    }
    if layers.is_empty() {
        return Err(SweepError::Unachievable {
            target: spec.target_flops,
        });
    }
    Ok(SweepOutcome { layers, dropped })
}

fn within_tolerance(flops: u64, target: u64) -> bool {
    (flops as f64 - target as f64).abs() <= FLOPS_TOLERANCE * target as f64
}

fn apply_axis(base: &Conv2DDescriptor, axis: Axis, v: u32) -> Conv2DDescriptor {
    let mut c = *base;
    match axis {
        Axis::K => {
            c.k1 = v;
            c.k2 = v;
        }
        Axis::WH => {
            c.w_in = v;
            c.h_in = v;
        }
        Axis::CIn => c.c_in = v,
        Axis::COut => c.c_out = v,
        Axis::Batch => c.batch = v,
    }
    c
}

/// Integer pairs `(a, b)` with `a * b` near `product` and `a` near its square root.
fn pair_candidates(product: f64) -> Vec<(u32, u32)> {
    let root = product.max(1.0).sqrt();
    let lo = (root.floor() as i64 - 2).max(1);
    let hi = root.ceil() as i64 + 2;
    let mut out = Vec::new();
    for a in lo..=hi {
        let b = product / a as f64;
        for b in [b.floor(), b.ceil()] {
            if b >= 1.0 && b <= f64::from(u32::MAX) && a <= i64::from(u32::MAX) {
                out.push((a as u32, b as u32));
            }
        }
    }
    out
}

/// Input extent whose output extent is `out` under the layer's padding.
fn input_extent(out: u32, k: u32, stride: u32, padding: Padding) -> Option<u32> {
    let v = match padding {
        Padding::Same => u64::from(out) * u64::from(stride),
        Padding::Valid => (u64::from(out) - 1) * u64::from(stride) + u64::from(k),
    };
    u32::try_from(v).ok()
}

fn solve_point(spec: &SweepSpec, v: u32) -> Option<(Conv2DDescriptor, u64)> {
    let layer = apply_axis(&spec.base, spec.varied, v);
    let unit = match spec.compensating {
        Compensation::CInCOut => {
            let mut probe = layer;
            probe.c_in = 1;
            probe.c_out = 1;
            conv_flops(&probe).ok()?
        }
        Compensation::WH => {
            // FLOPs per output position.
            2 * u64::from(layer.k1)
                * u64::from(layer.k2)
                * u64::from(layer.c_in)
                * u64::from(layer.c_out)
                * u64::from(layer.batch)
        }
        Compensation::None => return None,
    };
    let product = spec.target_flops as f64 / unit as f64;
    let target = spec.target_flops as i128;
    let mut best: Option<(Conv2DDescriptor, u64)> = None;
    let mut best_key = (i128::MAX, u32::MAX, u32::MAX);
    for (a, b) in pair_candidates(product) {
        let mut cand = layer;
        match spec.compensating {
            Compensation::CInCOut => {
                cand.c_in = a;
                cand.c_out = b;
            }
            Compensation::WH => {
                cand.w_in = input_extent(a, layer.k1, layer.stride, layer.padding)?;
                cand.h_in = input_extent(b, layer.k2, layer.stride, layer.padding)?;
            }
            Compensation::None => unreachable!(),
        }
        let Ok(flops) = conv_flops(&cand) else {
            continue;
        };
        let key = ((i128::from(flops) - target).abs(), a.abs_diff(b), a.min(b));
        if key < best_key {
            best_key = key;
            best = Some((cand, flops));
        }
    }
    best
}

impl FromStr for Axis {
    type Err = SweepError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "k" => Axis::K,
            "wh" | "w_h" | "spatial" => Axis::WH,
            "cin" | "c_in" => Axis::CIn,
            "cout" | "c_out" => Axis::COut,
            "batch" => Axis::Batch,
            _ => {
                return Err(SweepError::UnknownName {
                    what: "axis",
                    value: s.to_owned(),
                })
            }
        })
    }
}

impl FromStr for Compensation {
    type Err = SweepError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "channels" | "cin_cout" | "cin-cout" | "c_in_c_out" => Compensation::CInCOut,
            "wh" | "w_h" | "spatial" => Compensation::WH,
            "none" => Compensation::None,
            _ => {
                return Err(SweepError::UnknownName {
                    what: "compensation",
                    value: s.to_owned(),
                })
            }
        })
    }
}

/// Named sweeps used in the experiments and in the CPU baseline.
pub const PRESETS: [&str; 5] = [
    "unary",
    "unary-small",
    "kernel-channels",
    "kernel-spatial",
    "cpu-flat",
];

pub fn preset(name: &str) -> Result<SweepSpec, SweepError> {
    let unary = |w, h, cin, cout| Conv2DDescriptor::new(w, h, cin, cout, 1);
    let spatial_sweep = |target: u64, scale: u32| SweepSpec {
        target_flops: target,
        varied: Axis::WH,
        compensating: Compensation::CInCOut,
        points: vec![
            SweepPoint::Axis(1),
            SweepPoint::Explicit(unary(1, 2, 6400 / scale, 12800 / scale)),
            SweepPoint::Axis(2),
            SweepPoint::Axis(4),
        ],
        base: unary(1, 1, 1, 1),
    };
    Ok(match name {
        "unary" => spatial_sweep(327_680_000, 1),
        "unary-small" => spatial_sweep(327_680_000 / 256, 16),
        "kernel-channels" => SweepSpec::over_range(
            2_025_000_000,
            Axis::K,
            Compensation::CInCOut,
            1,
            30,
            Conv2DDescriptor::new(10, 10, 1, 1, 1),
        ),
        "kernel-spatial" => SweepSpec::over_range(
            2_025_000_000,
            Axis::K,
            Compensation::WH,
            1,
            30,
            Conv2DDescriptor::new(1, 1, 106, 106, 1),
        ),
        "cpu-flat" => SweepSpec {
            target_flops: 200_000_000,
            varied: Axis::K,
            compensating: Compensation::WH,
            points: [1, 3, 5, 7].into_iter().map(SweepPoint::Axis).collect(),
            base: Conv2DDescriptor::new(1, 1, 16, 16, 1),
        },
        _ => {
            return Err(SweepError::UnknownName {
                what: "preset",
                value: name.to_owned(),
            })
        }
    })
}
