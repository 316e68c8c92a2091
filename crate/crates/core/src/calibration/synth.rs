//! Synthetic timing data generated from known parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dataset::TimingRecord;
use crate::alpha::{predicted_time, AlphaParams};
use crate::layer::{Conv2DDescriptor, LayerDescriptor, LayerError};

pub const SYNTHETIC_DEVICE: &str = "synthetic";

/// One record per layout with `time_ms = predicted * (1 + eps)`, `eps`
/// uniform in `[-noise_rel, noise_rel]`.
///
/// # Panics
///
/// If `noise_rel` is negative or not below 0.5.
pub fn synthesize_dataset(
    params: &AlphaParams,
    layouts: &[LayerDescriptor],
    noise_rel: f64,
    seed: u64,
) -> Result<Vec<TimingRecord>, LayerError> {
    assert!(
        (0.0..0.5).contains(&noise_rel),
        "noise_rel must lie in [0, 0.5)"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    layouts
        .iter()
        .map(|layer| {
            let exact_ms = predicted_time(layer, params)? * 1e3;
            let time_ms = if noise_rel > 0.0 {
                exact_ms * (1.0 + rng.gen_range(-noise_rel..=noise_rel))
            } else {
                exact_ms
            };
            Ok(TimingRecord {
                layer: *layer,
                device: SYNTHETIC_DEVICE.to_owned(),
                time_ms,
                runs: 1,
                time_std_ms: None,
            })
        })
        .collect()
}

/// Deterministic convolution layouts whose effective surfaces are spread
/// log-uniformly over `[1, 1e5]`, cycling kernel sizes 1, 3, 5, 7.
pub fn synthetic_layouts(count: usize) -> Vec<LayerDescriptor> {
    const KERNELS: [u32; 4] = [1, 3, 5, 7];
    (0..count)
        .map(|i| {
            let t = if count > 1 {
                i as f64 / (count - 1) as f64
            } else {
                0.0
            };
            let surface = 10f64.powf(5.0 * t);
            let w = surface.sqrt().ceil().max(1.0);
            let h = (surface / w).round().max(1.0);
            let c_in = 4 + (i as u32 * 5) % 29;
            let c_out = 4 + (i as u32 * 11) % 31;
            Conv2DDescriptor::new(w as u32, h as u32, c_in, c_out, KERNELS[i % KERNELS.len()])
                .into()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_matches_prediction() {
        let p = AlphaParams::reference_defaults();
        let layouts = synthetic_layouts(20);
        for r in synthesize_dataset(&p, &layouts, 0.0, 1).unwrap() {
            assert_eq!(r.time_ms, predicted_time(&r.layer, &p).unwrap() * 1e3);
        }
    }

    #[test]
    fn seeded_and_bounded() {
        let p = AlphaParams::reference_defaults();
        let layouts = synthetic_layouts(30);
        let a = synthesize_dataset(&p, &layouts, 0.05, 9).unwrap();
        let b = synthesize_dataset(&p, &layouts, 0.05, 9).unwrap();
        assert_eq!(a, b);
        let c = synthesize_dataset(&p, &layouts, 0.05, 10).unwrap();
        assert_ne!(a, c);
        for r in &a {
            let exact = predicted_time(&r.layer, &p).unwrap() * 1e3;
            assert!((r.time_ms / exact - 1.0).abs() <= 0.05 + 1e-12);
        }
    }

    #[test]
    fn layouts_span_surfaces() {
        let layouts = synthetic_layouts(50);
        let surfaces: Vec<f64> = layouts
            .iter()
            .map(|l| {
                let c = l.as_conv();
                f64::from(c.w_in) * f64::from(c.h_in)
            })
            .collect();
        assert_eq!(surfaces[0], 1.0);
        let max = surfaces.iter().cloned().fold(0.0, f64::max);
        assert!((0.9e5..=1.1e5).contains(&max), "{max}");
    }
}
