//! Per-day explanation candidates (class-tagged saliency maps and text
//! sentences), their fixed-length feature vectors, and enumeration of the
//! presentation combinations.
//!
//! Candidates come from a JSON manifest. Entries may carry a precomputed
//! `feature`; otherwise the built-in featurizers run at load time.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::hash::Hasher;
use std::path::{Path, PathBuf};

use fnv::FnvHasher;
use image::imageops::FilterType;
use image::DynamicImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::PriceClass;

pub const DEFAULT_FEATURE_DIM: usize = 256;
pub const DEFAULT_ENUMERATION_CAP: usize = 16;

/// Side length of the luminance grid saliency maps are reduced to.
pub const SALIENCY_GRID: u32 = 16;

// Hard limit of the bitmask representation.
const MAX_ITEMS: usize = 31;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Saliency,
    Text,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Payload {
    /// PNG path, relative to the manifest directory unless absolute.
    Image(PathBuf),
    Text(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationItem {
    pub id: String,
    pub day: usize,
    pub class: PriceClass,
    pub modality: Modality,
    pub payload: Payload,
    pub feature: Vec<f64>,
}

impl ExplanationItem {
    pub fn text(&self) -> Option<&str> {
        match &self.payload {
            Payload::Text(t) => Some(t),
            Payload::Image(_) => None,
        }
    }
}

/// One day's candidates in canonical order: saliency BULL, NEUTRAL, BEAR,
/// then text BULL, NEUTRAL, BEAR. Items sharing modality and class keep
/// manifest order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayCandidates {
    pub day: usize,
    items: Vec<ExplanationItem>,
}

impl DayCandidates {
    pub fn new(day: usize, mut items: Vec<ExplanationItem>) -> Result<Self> {
        if let Some(bad) = items.iter().find(|it| it.day != day) {
            return Err(Error::Validation(format!(
                "item {} belongs to day {}, not {day}",
                bad.id, bad.day
            )));
        }
        items.sort_by_key(|it| (it.modality, it.class.index()));
        Ok(DayCandidates { day, items })
    }

    pub fn items(&self) -> &[ExplanationItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.items.first().map(|it| it.feature.len())
    }
}

/// Flags over one day's candidates: bit `k` shows item `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "RawCombination")]
pub struct ExplanationCombination {
    mask: u32,
    len: u8,
}

#[derive(Deserialize)]
struct RawCombination {
    mask: u32,
    len: usize,
}

impl TryFrom<RawCombination> for ExplanationCombination {
    type Error = Error;

    fn try_from(raw: RawCombination) -> Result<Self> {
        ExplanationCombination::new(raw.mask, raw.len)
    }
}

impl ExplanationCombination {
    pub fn new(mask: u32, len: usize) -> Result<Self> {
        if len > MAX_ITEMS {
            return Err(Error::CapExceeded {
                count: len,
                cap: MAX_ITEMS,
            });
        }
        if (mask as u64) >> len != 0 {
            return Err(Error::Shape(format!(
                "mask {mask:#b} has bits beyond {len} items"
            )));
        }
        Ok(ExplanationCombination {
            mask,
            len: len as u8,
        })
    }

    pub fn empty(len: usize) -> Self {
        ExplanationCombination {
            mask: 0,
            len: len as u8,
        }
    }

    pub fn full(len: usize) -> Self {
        ExplanationCombination {
            mask: ((1u64 << len) - 1) as u32,
            len: len as u8,
        }
    }

    pub fn from_flags(flags: &[bool]) -> Result<Self> {
        let mask = flags
            .iter()
            .enumerate()
            .fold(0u64, |m, (k, &f)| if f { m | 1 << k } else { m });
        Self::new(mask as u32, flags.len())
    }

    pub fn mask(&self) -> u32 {
        self.mask
    }

    pub fn len(&self) -> usize {
        self.len as usize
    }

    pub fn is_empty(&self) -> bool {
        self.mask == 0
    }

    pub fn count(&self) -> usize {
        self.mask.count_ones() as usize
    }

    pub fn is_flagged(&self, k: usize) -> bool {
        k < self.len() && self.mask >> k & 1 == 1
    }

    pub fn flagged(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&k| self.is_flagged(k))
    }

    pub fn check_len(&self, candidates: &DayCandidates) -> Result<()> {
        if self.len() != candidates.len() {
            return Err(Error::Shape(format!(
                "combination over {} items, day {} has {}",
                self.len(),
                candidates.day,
                candidates.len()
            )));
        }
        Ok(())
    }
}

impl fmt::Display for ExplanationCombination {
    /// Item 0 first, e.g. `111000000`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for k in 0..self.len() {
            f.write_str(if self.is_flagged(k) { "1" } else { "0" })?;
        }
        Ok(())
    }
}

/// All `2^n` combinations of `candidates`, in ascending mask order.
pub fn enumerate_combinations(
    candidates: &DayCandidates,
    cap: usize,
) -> Result<impl Iterator<Item = ExplanationCombination>> {
    let n = candidates.len();
    if n > cap.min(MAX_ITEMS) {
        return Err(Error::CapExceeded {
            count: n,
            cap: cap.min(MAX_ITEMS),
        });
    }
    Ok((0..1u64 << n).map(move |m| ExplanationCombination {
        mask: m as u32,
        len: n as u8,
    }))
}

fn normalize_or_fallback(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 && norm.is_finite() {
        v.iter_mut().for_each(|x| *x /= norm);
    } else {
        v.iter_mut().for_each(|x| *x = 0.0);
        if let Some(first) = v.first_mut() {
            *first = 1.0;
        }
    }
    v
}

fn tokens(sentence: &str) -> impl Iterator<Item = String> + '_ {
    sentence
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
}

/// Signed feature hashing of lower-cased word tokens (FNV-1a), unit L2 norm.
pub fn featurize_text(sentence: &str, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 {
        return Err(Error::Config("feature dimension must be positive".into()));
    }
    let mut v = vec![0.0; dim];
    let mut any = false;
    for tok in tokens(sentence) {
        let mut h = FnvHasher::default();
        h.write(tok.as_bytes());
        let h = h.finish();
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        v[(h % dim as u64) as usize] += sign;
        any = true;
    }
    if !any {
        return Err(Error::Validation("cannot featurize an empty sentence".into()));
    }
    Ok(normalize_or_fallback(v))
}

/// Luminance reduced to a 16x16 grid, flattened, padded or truncated to
/// `dim` and L2-normalised. An all-black map yields `e_0`.
pub fn featurize_saliency(image: &DynamicImage, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 {
        return Err(Error::Config("feature dimension must be positive".into()));
    }
    if image.width() == 0 || image.height() == 0 {
        return Err(Error::Validation("empty saliency image".into()));
    }
    let luma = image.to_luma32f();
    let grid = image::imageops::resize(&luma, SALIENCY_GRID, SALIENCY_GRID, FilterType::Triangle);
    let mut v: Vec<f64> = grid.pixels().map(|p| p.0[0] as f64).collect();
    v.resize(dim, 0.0);
    Ok(normalize_or_fallback(v))
}

pub fn featurize_saliency_bytes(bytes: &[u8], dim: usize) -> Result<Vec<f64>> {
    let image = image::load_from_memory(bytes)?;
    featurize_saliency(&image, dim)
}

pub fn featurize_saliency_file(path: &Path, dim: usize) -> Result<Vec<f64>> {
    let image = image::open(path)?;
    featurize_saliency(&image, dim)
}

/// One manifest entry as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub day: usize,
    pub class: PriceClass,
    pub modality: Modality,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature: Option<Vec<f64>>,
}

/// Immutable map from day to its candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplanationStore {
    dim: usize,
    base_dir: PathBuf,
    days: BTreeMap<usize, DayCandidates>,
}

impl ExplanationStore {
    pub fn load_manifest(path: impl AsRef<Path>, dim: usize) -> Result<Self> {
        let path = path.as_ref();
        let bytes =
            std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let entries: Vec<ManifestEntry> = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Self::from_entries(entries, base, dim)
    }

    pub fn from_entries(entries: Vec<ManifestEntry>, base_dir: PathBuf, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("feature dimension must be positive".into()));
        }
        let mut ids = HashSet::new();
        let mut by_day: BTreeMap<usize, Vec<ExplanationItem>> = BTreeMap::new();
        for e in entries {
            if !ids.insert(e.id.clone()) {
                return Err(Error::Validation(format!("duplicate explanation id `{}`", e.id)));
            }
            let payload = match (e.modality, e.payload_path, e.text) {
                (Modality::Saliency, Some(p), None) => Payload::Image(p),
                (Modality::Text, None, Some(t)) => Payload::Text(t),
                (m, _, _) => {
                    return Err(Error::Validation(format!(
                        "item `{}`: {m:?} needs exactly {}",
                        e.id,
                        if m == Modality::Saliency { "payload_path" } else { "text" }
                    )))
                }
            };
            if let Payload::Image(p) = &payload {
                let resolved = base_dir.join(p);
                if !resolved.is_file() {
                    return Err(Error::Validation(format!(
                        "item `{}`: payload {} not found",
                        e.id,
                        resolved.display()
                    )));
                }
            }
            let feature = match e.feature {
                Some(f) => {
                    if f.len() != dim || f.iter().any(|x| !x.is_finite()) {
                        return Err(Error::Validation(format!(
                            "item `{}`: feature must be {dim} finite values, got {}",
                            e.id,
                            f.len()
                        )));
                    }
                    f
                }
                None => match &payload {
                    Payload::Text(t) => featurize_text(t, dim)?,
                    Payload::Image(p) => featurize_saliency_file(&base_dir.join(p), dim)?,
                },
            };
            by_day.entry(e.day).or_default().push(ExplanationItem {
                id: e.id,
                day: e.day,
                class: e.class,
                modality: e.modality,
                payload,
                feature,
            });
        }
        let days = by_day
            .into_iter()
            .map(|(day, items)| Ok((day, DayCandidates::new(day, items)?)))
            .collect::<Result<_>>()?;
        Ok(ExplanationStore {
            dim,
            base_dir,
            days,
        })
    }

    /// Builds a store from already featurized candidates. Payload paths are
    /// not checked.
    pub fn from_candidates(days: Vec<DayCandidates>, base_dir: PathBuf, dim: usize) -> Result<Self> {
        let mut map = BTreeMap::new();
        let mut ids = HashSet::new();
        for c in days {
            for item in c.items() {
                if item.feature.len() != dim {
                    return Err(Error::Validation(format!(
                        "item `{}`: feature must be {dim} values, got {}",
                        item.id,
                        item.feature.len()
                    )));
                }
                if !ids.insert(item.id.clone()) {
                    return Err(Error::Validation(format!("duplicate explanation id `{}`", item.id)));
                }
            }
            if map.insert(c.day, c).is_some() {
                return Err(Error::Validation("day listed twice".into()));
            }
        }
        Ok(ExplanationStore {
            dim,
            base_dir,
            days: map,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.dim
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn days(&self) -> &BTreeMap<usize, DayCandidates> {
        &self.days
    }

    pub fn get(&self, day: usize) -> Result<&DayCandidates> {
        self.days
            .get(&day)
            .ok_or_else(|| Error::Range(format!("no explanation candidates for day {day}")))
    }

    pub fn find(&self, id: &str) -> Option<&ExplanationItem> {
        self.days
            .values()
            .flat_map(|d| d.items().iter())
            .find(|it| it.id == id)
    }

    pub fn resolve_payload(&self, item: &ExplanationItem) -> Option<PathBuf> {
        match &item.payload {
            Payload::Image(p) => Some(self.base_dir.join(p)),
            Payload::Text(_) => None,
        }
    }

    /// Entries in canonical day/item order, features included.
    pub fn to_entries(&self) -> Vec<ManifestEntry> {
        self.days
            .values()
            .flat_map(|d| d.items().iter())
            .map(|it| {
                let (payload_path, text) = match &it.payload {
                    Payload::Image(p) => (Some(p.clone()), None),
                    Payload::Text(t) => (None, Some(t.clone())),
                };
                ManifestEntry {
                    id: it.id.clone(),
                    day: it.day,
                    class: it.class,
                    modality: it.modality,
                    payload_path,
                    text,
                    feature: Some(it.feature.clone()),
                }
            })
            .collect()
    }

    pub fn save_manifest(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_vec_pretty(&self.to_entries())?;
        std::fs::write(path, json).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}
