use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{distort_patch, FilterError, FilterParams, FilterRegistry, FilterSpec, PatchFilter};
use crate::image::{ImageTensor, PatchGrid};
use crate::seed;

/// Relative tolerance a calibrated filter must meet against the anchor.
pub const CALIBRATION_TOLERANCE: f64 = 0.05;

/// Monte-Carlo mean of the per-patch L2 change caused by one application of
/// `filter`, over `samples` random (reference image, patch, mask seed) draws.
///
/// The draws depend only on `seed`, so two filters measured with the same
/// seed see the same patches and mask seeds.
pub fn measure_mean_delta_l2(
    filter: &dyn PatchFilter,
    references: &[ImageTensor],
    patch_size: usize,
    samples: usize,
    seed: u64,
) -> Result<f64, FilterError> {
    if references.is_empty() {
        return Err(FilterError::EmptyReference);
    }
    let grids = references
        .iter()
        .map(|r| PatchGrid::for_image(r, patch_size))
        .collect::<Result<Vec<_>, _>>()?;
    let mut rng = seed::rng(seed);
    let mut total = 0.0;
    for _ in 0..samples {
        let which = rng.gen_range(0..references.len());
        let grid = &grids[which];
        let patch = rng.gen_range(0..grid.patch_count());
        let mask_seed = rng.gen::<u64>();
        let mut img = references[which].clone();
        let before = distort_patch(&mut img, grid, patch, filter, mask_seed, None)?;
        let after = grid.extract(&img, patch)?;
        total += before
            .iter()
            .zip(&after)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum::<f64>()
            .sqrt();
    }
    Ok(total / samples.max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationEntry {
    pub filter: String,
    pub calibration_scale: f64,
    pub measured: f64,
    pub target: f64,
    pub reachable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub specs: Vec<FilterSpec>,
    pub entries: Vec<CalibrationEntry>,
}

impl CalibrationReport {
    /// The adjusted specs, or the first unreachable filter as an error.
    pub fn into_result(self) -> Result<Vec<FilterSpec>, FilterError> {
        if let Some(e) = self.entries.iter().find(|e| !e.reachable) {
            return Err(FilterError::Unreachable {
                name: e.filter.clone(),
                best: e.measured,
                target: e.target,
            });
        }
        Ok(self.specs)
    }
}

/// Largest calibration scale that keeps the kind's knob inside its range.
fn max_scale(spec: &FilterSpec) -> f64 {
    match spec.params {
        FilterParams::Brightness { intensity } if intensity != 0.0 => 0.999_999 / intensity.abs(),
        FilterParams::Brightness { .. } => 1.0,
        FilterParams::DeadPixel { drop_fraction } if drop_fraction > 0.0 => 1.0 / drop_fraction,
        FilterParams::DeadPixel { .. } => 1.0,
        _ => 1.0e3,
    }
}

/// Adjusts every filter's `calibration_scale` so its mean per-patch L2 impact
/// matches the first `gaussian_noise` spec (the anchor). The anchor itself is
/// left unchanged. Filters that cannot reach the anchor keep their spec and
/// are flagged `reachable: false`.
pub fn calibrate_filters(
    specs: &[FilterSpec],
    registry: &FilterRegistry,
    references: &[ImageTensor],
    patch_size: usize,
    samples: usize,
    seed: u64,
) -> Result<CalibrationReport, FilterError> {
    if references.is_empty() {
        return Err(FilterError::EmptyReference);
    }
    let anchor_idx = specs
        .iter()
        .position(FilterSpec::is_anchor)
        .ok_or(FilterError::MissingAnchor)?;
    let measure = |spec: &FilterSpec| -> Result<f64, FilterError> {
        let f = spec.build(registry)?;
        measure_mean_delta_l2(f.as_ref(), references, patch_size, samples, seed)
    };
    let target = measure(&specs[anchor_idx])?;

    let mut out = Vec::with_capacity(specs.len());
    let mut entries = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        if i == anchor_idx {
            out.push(spec.clone());
            entries.push(CalibrationEntry {
                filter: spec.kind_name().to_string(),
                calibration_scale: spec.calibration_scale,
                measured: target,
                target,
                reachable: true,
            });
            continue;
        }
        let at = |scale: f64| measure(&spec.clone().with_scale(scale));
        let ceiling = max_scale(spec);

        // bracket the target by doubling, then bisect
        let mut lo = 0.0;
        let mut hi = 1.0f64.min(ceiling);
        let mut f_hi = at(hi)?;
        while f_hi < target && hi < ceiling {
            lo = hi;
            hi = (hi * 2.0).min(ceiling);
            f_hi = at(hi)?;
        }
        let entry = if f_hi < target * (1.0 - CALIBRATION_TOLERANCE) {
            out.push(spec.clone());
            CalibrationEntry {
                filter: spec.kind_name().to_string(),
                calibration_scale: spec.calibration_scale,
                measured: f_hi,
                target,
                reachable: false,
            }
        } else {
            let (mut best, mut best_val) = (hi, f_hi);
            for _ in 0..60 {
                if ((best_val - target) / target).abs() < 1e-4 {
                    break;
                }
                let mid = 0.5 * (lo + hi);
                let v = at(mid)?;
                if (v - target).abs() < (best_val - target).abs() {
                    best = mid;
                    best_val = v;
                }
                if v < target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let reachable = ((best_val - target) / target).abs() <= CALIBRATION_TOLERANCE;
            out.push(spec.clone().with_scale(best));
            CalibrationEntry {
                filter: spec.kind_name().to_string(),
                calibration_scale: best,
                measured: best_val,
                target,
                reachable,
            }
        };
        entries.push(entry);
    }
    Ok(CalibrationReport {
        specs: out,
        entries,
    })
}
