//! Patch-level distortion filters.
//!
//! A filter only ever sees the pixels of one patch. Randomness comes from a
//! per-pixel mask generated from a caller-supplied seed, which lets the
//! sensitivity probe and the attack action share identical masks (and lets
//! [`MaskCache`] serve both). The engine owns clamping and bookkeeping; a
//! filter just rewrites the patch buffer.

mod builtin;
mod calibrate;
mod ledger;

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::ImageError;

pub use builtin::{Brightness, DeadPixel, GaussianBlur, GaussianNoise};
pub use calibrate::{
    calibrate_filters, measure_mean_delta_l2, CalibrationEntry, CalibrationReport,
};
pub use ledger::{apply_filter_patch, distort_patch, DistortionLedger, LedgerEntry, MaskCache};

#[derive(Debug, Error, PartialEq)]
pub enum FilterError {
    #[error(transparent)]
    Geometry(#[from] ImageError),
    #[error("patch {0} has no distortion to remove")]
    NoDistortion(usize),
    #[error("invalid filter parameter: {0}")]
    InvalidParam(String),
    #[error("unknown custom filter {0:?}")]
    UnknownCustom(String),
    #[error("filter index {index} out of range ({count} active filters)")]
    UnknownFilter { index: usize, count: usize },
    #[error("calibration needs at least one reference image")]
    EmptyReference,
    #[error("calibration needs a gaussian_noise anchor filter")]
    MissingAnchor,
    #[error("filter {name} cannot reach the anchor's mean patch L2 ({best:.4} < {target:.4})")]
    Unreachable {
        name: String,
        best: f64,
        target: f64,
    },
}

/// Shape of the buffer a filter receives: `channels` planes of `size x size`
/// pixels, channel-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchShape {
    pub channels: usize,
    pub size: usize,
}

impl PatchShape {
    pub fn len(&self) -> usize {
        self.channels * self.size * self.size
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pixels(&self) -> usize {
        self.size * self.size
    }
}

/// A user-pluggable distortion.
pub trait PatchFilter: Send + Sync + fmt::Debug {
    /// Stable identifier, also used as the mask-cache key.
    fn name(&self) -> &str;

    /// Random mask for one application. Deterministic filters return an
    /// empty mask. The mask must depend only on `shape` and `seed`.
    fn mask(&self, _shape: PatchShape, _seed: u64) -> Vec<f32> {
        Vec::new()
    }

    /// Distorts `patch` in place. Out-of-range values are clamped afterwards.
    fn apply(&self, patch: &mut [f32], shape: PatchShape, mask: &[f32]);
}

/// Kind-specific filter parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FilterParams {
    GaussianNoise {
        #[serde(default = "default_variance")]
        variance: f64,
    },
    GaussianBlur {
        #[serde(default = "default_blur_std")]
        std: f64,
    },
    Brightness {
        #[serde(default = "default_intensity")]
        intensity: f64,
    },
    DeadPixel {
        #[serde(default = "default_drop_fraction")]
        drop_fraction: f64,
    },
    Custom {
        name: String,
        #[serde(default)]
        params: serde_json::Value,
    },
}

fn default_variance() -> f64 {
    0.005
}
fn default_blur_std() -> f64 {
    1.0
}
fn default_intensity() -> f64 {
    -0.1
}
fn default_drop_fraction() -> f64 {
    0.5
}
fn default_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    #[serde(flatten)]
    pub params: FilterParams,
    #[serde(default = "default_scale")]
    pub calibration_scale: f64,
}

impl FilterSpec {
    pub fn new(params: FilterParams) -> Self {
        Self {
            params,
            calibration_scale: 1.0,
        }
    }

    pub fn gaussian_noise() -> Self {
        Self::new(FilterParams::GaussianNoise {
            variance: default_variance(),
        })
    }

    pub fn gaussian_blur() -> Self {
        Self::new(FilterParams::GaussianBlur {
            std: default_blur_std(),
        })
    }

    pub fn brightness() -> Self {
        Self::new(FilterParams::Brightness {
            intensity: default_intensity(),
        })
    }

    pub fn dead_pixel() -> Self {
        Self::new(FilterParams::DeadPixel {
            drop_fraction: default_drop_fraction(),
        })
    }

    /// Built-in filter by its CLI name.
    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "gaussian_noise" | "noise" => Some(Self::gaussian_noise()),
            "gaussian_blur" | "blur" => Some(Self::gaussian_blur()),
            "brightness" => Some(Self::brightness()),
            "dead_pixel" => Some(Self::dead_pixel()),
            _ => None,
        }
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.calibration_scale = scale;
        self
    }

    pub fn kind_name(&self) -> &str {
        match &self.params {
            FilterParams::GaussianNoise { .. } => "gaussian_noise",
            FilterParams::GaussianBlur { .. } => "gaussian_blur",
            FilterParams::Brightness { .. } => "brightness",
            FilterParams::DeadPixel { .. } => "dead_pixel",
            FilterParams::Custom { name, .. } => name,
        }
    }

    pub fn is_anchor(&self) -> bool {
        matches!(self.params, FilterParams::GaussianNoise { .. })
    }

    pub fn validate(&self) -> Result<(), FilterError> {
        let bad = |m: String| Err(FilterError::InvalidParam(m));
        if !(self.calibration_scale > 0.0 && self.calibration_scale.is_finite()) {
            return bad(format!(
                "calibration_scale {} must be positive",
                self.calibration_scale
            ));
        }
        match self.params {
            FilterParams::GaussianNoise { variance }
                if !(variance >= 0.0 && variance.is_finite()) =>
            {
                bad(format!("noise variance {variance} must be >= 0"))
            }
            FilterParams::GaussianBlur { std } if !(std > 0.0 && std.is_finite()) => {
                bad(format!("blur std {std} must be > 0"))
            }
            FilterParams::Brightness { intensity } if !(intensity > -1.0 && intensity < 1.0) => {
                bad(format!(
                    "brightness intensity {intensity} must lie in (-1, 1)"
                ))
            }
            FilterParams::DeadPixel { drop_fraction } if !(0.0..=1.0).contains(&drop_fraction) => {
                bad(format!("drop fraction {drop_fraction} must lie in [0, 1]"))
            }
            _ => Ok(()),
        }
    }

    /// Instantiates the filter. Custom kinds are resolved through `registry`.
    pub fn build(&self, registry: &FilterRegistry) -> Result<Arc<dyn PatchFilter>, FilterError> {
        self.validate()?;
        let s = self.calibration_scale;
        Ok(match &self.params {
            FilterParams::GaussianNoise { variance } => {
                Arc::new(GaussianNoise::new(variance.sqrt() * s))
            }
            FilterParams::GaussianBlur { std } => Arc::new(GaussianBlur::new(*std, s)),
            // the knob saturates just inside the valid range
            FilterParams::Brightness { intensity } => Arc::new(Brightness::new(
                (intensity * s).clamp(-0.999_999, 0.999_999),
            )),
            FilterParams::DeadPixel { drop_fraction } => {
                Arc::new(DeadPixel::new((drop_fraction * s).min(1.0)))
            }
            FilterParams::Custom { name, params } => registry.build(name, params, s)?,
        })
    }
}

type CustomCtor =
    Box<dyn Fn(&serde_json::Value, f64) -> Result<Arc<dyn PatchFilter>, FilterError> + Send + Sync>;

/// Constructors for user-supplied filter kinds, keyed by name. The
/// constructor receives the `FilterSpec` params and its calibration scale.
#[derive(Default)]
pub struct FilterRegistry {
    custom: HashMap<String, CustomCtor>,
}

impl FilterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register<F>(&mut self, name: &str, ctor: F)
    where
        F: Fn(&serde_json::Value, f64) -> Result<Arc<dyn PatchFilter>, FilterError>
            + Send
            + Sync
            + 'static,
    {
        self.custom.insert(name.to_string(), Box::new(ctor));
    }

    fn build(
        &self,
        name: &str,
        params: &serde_json::Value,
        scale: f64,
    ) -> Result<Arc<dyn PatchFilter>, FilterError> {
        let ctor = self
            .custom
            .get(name)
            .ok_or_else(|| FilterError::UnknownCustom(name.to_string()))?;
        ctor(params, scale)
    }
}

impl fmt::Debug for FilterRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FilterRegistry")
            .field("custom", &self.custom.keys().collect::<Vec<_>>())
            .finish()
    }
}

/// The active filter set of an attack, indexed by the agent's filter choice.
#[derive(Debug, Clone)]
pub struct FilterBank {
    specs: Vec<FilterSpec>,
    filters: Vec<Arc<dyn PatchFilter>>,
}

impl FilterBank {
    pub fn new(specs: Vec<FilterSpec>, registry: &FilterRegistry) -> Result<Self, FilterError> {
        if specs.is_empty() {
            return Err(FilterError::InvalidParam("no active filters".into()));
        }
        let filters = specs
            .iter()
            .map(|s| s.build(registry))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { specs, filters })
    }

    pub fn from_builtin(specs: Vec<FilterSpec>) -> Result<Self, FilterError> {
        Self::new(specs, &FilterRegistry::new())
    }

    /// Bank holding filters constructed directly, e.g. custom plugins.
    pub fn from_filters(specs: Vec<FilterSpec>, filters: Vec<Arc<dyn PatchFilter>>) -> Self {
        assert_eq!(specs.len(), filters.len());
        Self { specs, filters }
    }

    pub fn len(&self) -> usize {
        self.filters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filters.is_empty()
    }

    pub fn specs(&self) -> &[FilterSpec] {
        &self.specs
    }

    pub fn get(&self, index: usize) -> Result<&dyn PatchFilter, FilterError> {
        self.filters
            .get(index)
            .map(|f| f.as_ref())
            .ok_or(FilterError::UnknownFilter {
                index,
                count: self.filters.len(),
            })
    }
}
