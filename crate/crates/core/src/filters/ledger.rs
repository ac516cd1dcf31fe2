use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use super::{FilterBank, FilterError, PatchFilter, PatchShape};
use crate::image::{ImageTensor, PatchGrid};

const DEFAULT_CACHE_CAPACITY: usize = 1 << 16;

type MaskKey = (String, usize, u64);

/// Precomputed distortion masks keyed by `(filter name, patch, seed)`.
///
/// Read-shared across probes; when full, the cache is simply flushed.
#[derive(Debug)]
pub struct MaskCache {
    capacity: usize,
    masks: RwLock<HashMap<MaskKey, Arc<Vec<f32>>>>,
}

impl Default for MaskCache {
    fn default() -> Self {
        Self::with_capacity(DEFAULT_CACHE_CAPACITY)
    }
}

impl MaskCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            masks: RwLock::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.masks.read().expect("mask cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get_or_make(
        &self,
        filter: &dyn PatchFilter,
        shape: PatchShape,
        patch: usize,
        seed: u64,
    ) -> Arc<Vec<f32>> {
        let key = (filter.name().to_string(), patch, seed);
        if let Some(m) = self.masks.read().expect("mask cache poisoned").get(&key) {
            return Arc::clone(m);
        }
        let mask = Arc::new(filter.mask(shape, seed));
        let mut map = self.masks.write().expect("mask cache poisoned");
        if map.len() >= self.capacity {
            map.clear();
        }
        Arc::clone(map.entry(key).or_insert(mask))
    }
}

fn patch_shape(grid: &PatchGrid) -> PatchShape {
    PatchShape {
        channels: grid.channels(),
        size: grid.patch_size(),
    }
}

/// Applies `filter` to one patch in place and returns the prior patch
/// contents. Only pixels inside the patch change; results are clamped.
pub fn distort_patch(
    image: &mut ImageTensor,
    grid: &PatchGrid,
    patch: usize,
    filter: &dyn PatchFilter,
    seed: u64,
    cache: Option<&MaskCache>,
) -> Result<Vec<f32>, FilterError> {
    let saved = grid.extract(image, patch)?;
    let shape = patch_shape(grid);
    let mut buf = saved.clone();
    match cache {
        Some(c) => {
            let mask = c.get_or_make(filter, shape, patch, seed);
            filter.apply(&mut buf, shape, &mask);
        }
        None => filter.apply(&mut buf, shape, &filter.mask(shape, seed)),
    }
    grid.write(image, patch, &buf)?;
    Ok(saved)
}

/// One applied distortion: which filter, which mask seed, and the patch
/// contents it overwrote.
#[derive(Debug, Clone, PartialEq)]
pub struct LedgerEntry {
    pub filter: usize,
    pub seed: u64,
    saved: Vec<f32>,
}

impl LedgerEntry {
    pub fn saved(&self) -> &[f32] {
        &self.saved
    }
}

/// Functional form: returns the distorted copy and the ledger entry that
/// undoes it.
pub fn apply_filter_patch(
    image: &ImageTensor,
    grid: &PatchGrid,
    patch: usize,
    bank: &FilterBank,
    filter: usize,
    seed: u64,
    cache: Option<&MaskCache>,
) -> Result<(ImageTensor, LedgerEntry), FilterError> {
    let mut out = image.clone();
    let saved = distort_patch(&mut out, grid, patch, bank.get(filter)?, seed, cache)?;
    Ok((
        out,
        LedgerEntry {
            filter,
            seed,
            saved,
        },
    ))
}

/// Per-patch LIFO stacks of applied distortions.
#[derive(Debug, Clone, PartialEq)]
pub struct DistortionLedger {
    stacks: Vec<Vec<LedgerEntry>>,
}

impl DistortionLedger {
    pub fn new(grid: &PatchGrid) -> Self {
        Self {
            stacks: vec![Vec::new(); grid.patch_count()],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.stacks.iter().all(Vec::is_empty)
    }

    /// Total number of applied (not yet reverted) distortions.
    pub fn total(&self) -> usize {
        self.stacks.iter().map(Vec::len).sum()
    }

    pub fn depth(&self, patch: usize) -> usize {
        self.stacks.get(patch).map_or(0, Vec::len)
    }

    pub fn top(&self, patch: usize) -> Option<&LedgerEntry> {
        self.stacks.get(patch).and_then(|s| s.last())
    }

    /// Patches with at least one distortion, ascending.
    pub fn distorted(&self) -> impl Iterator<Item = usize> + '_ {
        self.stacks
            .iter()
            .enumerate()
            .filter(|(_, s)| !s.is_empty())
            .map(|(i, _)| i)
    }

    pub fn push(&mut self, patch: usize, entry: LedgerEntry) {
        self.stacks[patch].push(entry);
    }

    /// Applies a filter to `image` in place and records it.
    pub fn apply(
        &mut self,
        image: &mut ImageTensor,
        grid: &PatchGrid,
        patch: usize,
        bank: &FilterBank,
        filter: usize,
        seed: u64,
        cache: Option<&MaskCache>,
    ) -> Result<(), FilterError> {
        let saved = distort_patch(image, grid, patch, bank.get(filter)?, seed, cache)?;
        self.stacks[patch].push(LedgerEntry {
            filter,
            seed,
            saved,
        });
        Ok(())
    }

    /// Pops the most recent distortion of `patch` and restores the patch
    /// contents it saved.
    pub fn revert(
        &mut self,
        image: &mut ImageTensor,
        grid: &PatchGrid,
        patch: usize,
    ) -> Result<LedgerEntry, FilterError> {
        grid.check_index(patch)?;
        let entry = self.stacks[patch]
            .pop()
            .ok_or(FilterError::NoDistortion(patch))?;
        grid.write(image, patch, &entry.saved)?;
        Ok(entry)
    }

    /// Copy of `image` with the top distortion of `patch` undone; the ledger
    /// is left untouched.
    pub fn reverted_copy(
        &self,
        image: &ImageTensor,
        grid: &PatchGrid,
        patch: usize,
    ) -> Result<ImageTensor, FilterError> {
        grid.check_index(patch)?;
        let entry = self.top(patch).ok_or(FilterError::NoDistortion(patch))?;
        let mut out = image.clone();
        grid.write(&mut out, patch, &entry.saved)?;
        Ok(out)
    }

    /// Rebuilds the working image from `original` by re-applying each stack
    /// in order with its recorded filter and seed.
    pub fn replay(
        &self,
        original: &ImageTensor,
        grid: &PatchGrid,
        bank: &FilterBank,
    ) -> Result<ImageTensor, FilterError> {
        let mut out = original.clone();
        for (patch, stack) in self.stacks.iter().enumerate() {
            for e in stack {
                distort_patch(&mut out, grid, patch, bank.get(e.filter)?, e.seed, None)?;
            }
        }
        Ok(out)
    }
}
