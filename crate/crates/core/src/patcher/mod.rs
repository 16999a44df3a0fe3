//! Per-reference neighbourhoods: candidate ranking, reading order,
//! coordinate normalisation, rasters and training labels.

mod labels;
mod raster;

use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::doc_model::{BBox, Element, ElementKind, FormPage};
use crate::error::{Error, Result};
use crate::netcore::Tensor;

pub use labels::{make_labels, FieldClass, PatchLabels};
pub use raster::{rasterize, render_base, BaseRaster, CHANNELS};

/// Row quantum for reading order, in page pixels.
pub const DEFAULT_ROW_EPS: f64 = 10.0;

/// Pipeline stage: textruns → textblocks, or textblocks + widgets → fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Step {
    Step1,
    Step2,
}

impl Step {
    pub fn from_number(n: u8) -> Result<Step> {
        match n {
            1 => Ok(Step::Step1),
            2 => Ok(Step::Step2),
            _ => Err(Error::Config(format!("step must be 1 or 2, got {n}"))),
        }
    }

    pub fn number(self) -> u8 {
        match self {
            Step::Step1 => 1,
            Step::Step2 => 2,
        }
    }

    /// Kind of the elements that serve as references.
    pub fn reference_kind(self) -> ElementKind {
        match self {
            Step::Step1 => ElementKind::TextRun,
            Step::Step2 => ElementKind::TextBlock,
        }
    }
}

/// Weighted distance of `b` from `a`: vertical offsets count ten times as
/// much as horizontal ones, and each axis takes the closest of `b`'s near
/// edge, centre and far edge. Not symmetric.
pub fn distance(a: &Element, b: &Element) -> f64 {
    let (xa, ya) = a.bbox.midpoint();
    let (xb, yb) = b.bbox.midpoint();
    let (wb, hb) = (b.bbox.width, b.bbox.height);
    let dy = (ya - (yb - hb / 2.0))
        .abs()
        .min((ya - yb).abs())
        .min((ya - (yb + hb / 2.0)).abs());
    let dx = (xa - (xb - wb / 2.0))
        .abs()
        .min((xa - xb).abs())
        .min((xa - (xb + wb / 2.0)).abs());
    10.0 * dy + dx
}

/// The `k1` nearest elements of the reference's own kind (reference first)
/// and the `k2` nearest widgets, each ascending by distance with ties
/// broken by id.
pub fn select_candidates(
    page: &FormPage,
    reference_id: u32,
    k1: usize,
    k2: usize,
) -> Result<(Vec<u32>, Vec<u32>)> {
    let reference = page
        .element(reference_id)
        .ok_or(Error::UnknownReference(reference_id))?;
    if reference.kind == ElementKind::Widget {
        return Err(Error::WrongReferenceKind {
            id: reference_id,
            kind: reference.kind.as_str().to_string(),
        });
    }
    if k1 == 0 {
        return Err(Error::Config("k1 must be at least 1".into()));
    }
    let ranked = |kind: ElementKind, k: usize| -> Vec<u32> {
        let mut scored: Vec<(f64, u32)> = page
            .elements
            .iter()
            .filter(|e| e.kind == kind && e.id != reference_id)
            .map(|e| (distance(reference, e), e.id))
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        scored.into_iter().take(k).map(|(_, id)| id).collect()
    };
    let mut t1 = vec![reference_id];
    t1.extend(ranked(reference.kind, k1 - 1));
    let t2 = ranked(ElementKind::Widget, k2);
    Ok((t1, t2))
}

/// Ids sorted top-to-bottom by quantised row, then left-to-right, then id.
pub fn reading_order<'a>(elements: impl IntoIterator<Item = &'a Element>, row_eps: f64) -> Vec<u32> {
    let mut keyed: Vec<(i64, f64, u32)> = elements
        .into_iter()
        .map(|e| ((e.bbox.top / row_eps).floor() as i64, e.bbox.left, e.id))
        .collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)));
    keyed.into_iter().map(|(_, _, id)| id).collect()
}

/// `(x, y, w, h)` of each box relative to `patch`, each in `[0, 1]`.
pub fn normalize_bboxes(candidates: &[BBox], patch: &BBox) -> Result<Vec<[f64; 4]>> {
    if !(patch.width > 0.0 && patch.height > 0.0) {
        return Err(Error::ZeroAreaPatch);
    }
    let unit = |v: f64| v.clamp(0.0, 1.0);
    Ok(candidates
        .iter()
        .map(|b| {
            [
                unit((b.left - patch.left) / patch.width),
                unit((b.top - patch.top) / patch.height),
                unit(b.width / patch.width),
                unit(b.height / patch.height),
            ]
        })
        .collect())
}

/// Neighbourhood size and raster resolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub k1: usize,
    pub k2: usize,
    pub height: usize,
    pub width: usize,
    pub row_eps: f64,
}

impl PatchConfig {
    pub fn slots(&self) -> usize {
        self.k1 + self.k2
    }
}

/// A reference with its reading-ordered candidates. Valid slots come first;
/// the remaining `k1 + k2 − n` slots are padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub reference_id: u32,
    pub candidate_ids: Vec<u32>,
    pub patch_bbox: BBox,
    pub norm_bboxes: Vec<[f32; 4]>,
    pub ref_flags: Vec<bool>,
    pub valid_mask: Vec<bool>,
    /// One `H×W×5` raster per slot; empty when built without rendering.
    pub rasters: Vec<Tensor<f32>>,
}

impl Patch {
    pub fn slots(&self) -> usize {
        self.valid_mask.len()
    }

    pub fn num_valid(&self) -> usize {
        self.candidate_ids.len()
    }

    pub fn reference_slot(&self) -> usize {
        self.ref_flags.iter().position(|&r| r).unwrap_or(0)
    }
}

/// Candidates, order, normalised boxes and masks, without rasters.
pub fn build_patch_geometry(page: &FormPage, reference_id: u32, cfg: &PatchConfig) -> Result<Patch> {
    let (t1, t2) = select_candidates(page, reference_id, cfg.k1, cfg.k2)?;
    let index = page.element_index();
    let chosen: Vec<&Element> = t1.iter().chain(&t2).map(|id| index[id]).collect();
    let candidate_ids = reading_order(chosen.iter().copied(), cfg.row_eps);
    let boxes: Vec<BBox> = candidate_ids.iter().map(|id| index[id].bbox).collect();
    let patch_bbox = BBox::union_all(&boxes).ok_or(Error::ZeroAreaPatch)?;
    let norm = normalize_bboxes(&boxes, &patch_bbox)?;

    let slots = cfg.slots();
    let n = candidate_ids.len();
    let mut norm_bboxes = vec![[0.0f32; 4]; slots];
    for (dst, src) in norm_bboxes.iter_mut().zip(&norm) {
        *dst = src.map(|v| v as f32);
    }
    let mut ref_flags = vec![false; slots];
    let mut valid_mask = vec![false; slots];
    for (i, id) in candidate_ids.iter().enumerate() {
        ref_flags[i] = *id == reference_id;
        valid_mask[i] = true;
    }
    debug_assert!(n <= slots);
    Ok(Patch {
        reference_id,
        candidate_ids,
        patch_bbox,
        norm_bboxes,
        ref_flags,
        valid_mask,
        rasters: Vec::new(),
    })
}

/// Full patch: geometry plus one raster per slot (zeros for padding).
pub fn build_patch(page: &FormPage, reference_id: u32, cfg: &PatchConfig) -> Result<Patch> {
    let mut patch = build_patch_geometry(page, reference_id, cfg)?;
    let base = render_base(page, &patch, cfg.height, cfg.width);
    let mut rasters: Vec<Tensor<f32>> = patch
        .candidate_ids
        .iter()
        .map(|&id| base.with_highlight(&patch, id))
        .collect::<Result<_>>()?;
    rasters.resize(cfg.slots(), Tensor::zeros(&[cfg.height, cfg.width, CHANNELS]));
    patch.rasters = rasters;
    Ok(patch)
}

/// Ids of the elements that serve as references on `page` for `step`, in
/// ascending id order.
pub fn reference_ids(page: &FormPage, step: Step) -> Vec<u32> {
    let mut ids: Vec<u32> = page.elements_of(step.reference_kind()).map(|e| e.id).collect();
    ids.sort_unstable();
    ids
}

/// One patch-cache line. Rasters are regenerated from the page on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub page_id: String,
    pub reference_id: u32,
    pub candidate_ids: Vec<u32>,
    pub norm_bboxes: Vec<[f32; 4]>,
    pub ref_flags: Vec<bool>,
    pub valid_mask: Vec<bool>,
    pub labels: Option<PatchLabels>,
}

impl PatchRecord {
    pub fn new(page_id: &str, patch: &Patch, labels: Option<PatchLabels>) -> Self {
        PatchRecord {
            page_id: page_id.to_string(),
            reference_id: patch.reference_id,
            candidate_ids: patch.candidate_ids.clone(),
            norm_bboxes: patch.norm_bboxes.clone(),
            ref_flags: patch.ref_flags.clone(),
            valid_mask: patch.valid_mask.clone(),
            labels,
        }
    }

    /// Rebuilds the full patch, checking it agrees with the cached record.
    pub fn restore(&self, page: &FormPage, cfg: &PatchConfig) -> Result<Patch> {
        if page.page_id != self.page_id {
            return Err(Error::Config(format!(
                "patch record for page {} applied to page {}",
                self.page_id, page.page_id
            )));
        }
        let patch = build_patch(page, self.reference_id, cfg)?;
        if patch.candidate_ids != self.candidate_ids || patch.norm_bboxes != self.norm_bboxes {
            return Err(Error::Config(format!(
                "cached patch for reference {} on page {} does not match the page",
                self.reference_id, self.page_id
            )));
        }
        Ok(patch)
    }
}

pub fn save_patch_cache(records: &[PatchRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Parse {
            line: 0,
            message: e.to_string(),
        })?;
        out.push(b'\n');
    }
    crate::doc_model::write_atomic(path, &out)
}

pub fn load_patch_cache(path: impl AsRef<Path>) -> Result<Vec<PatchRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(records)
}
