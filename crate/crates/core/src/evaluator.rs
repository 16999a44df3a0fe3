//! Scoring of predicted groups against tagged groups, by exact constituent
//! sets or by bounding-box overlap.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::doc_model::{BBox, FormPage, GroupAnnotation, GroupKind};
use crate::error::{Error, Result};
use crate::grouper::StructureGroup;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.40;

/// A group reduced to what the metrics compare.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalGroup {
    pub kind: GroupKind,
    pub constituents: BTreeSet<u32>,
    /// Union of the constituent boxes; `None` when no constituent is on the
    /// page.
    pub bbox: Option<BBox>,
}

impl EvalGroup {
    pub fn new(page: &FormPage, kind: GroupKind, constituents: BTreeSet<u32>) -> EvalGroup {
        let index = page.element_index();
        let bbox = BBox::union_all(constituents.iter().filter_map(|id| index.get(id).map(|e| &e.bbox)));
        EvalGroup {
            kind,
            constituents,
            bbox,
        }
    }

    pub fn from_annotation(page: &FormPage, ann: &GroupAnnotation) -> EvalGroup {
        EvalGroup::new(page, ann.kind, ann.member_ids.clone())
    }

    pub fn from_structure(page: &FormPage, group: &StructureGroup) -> EvalGroup {
        EvalGroup::new(page, group.kind, group.constituents())
    }
}

/// Annotations of a page whose elements are textruns and widgets.
pub fn page_groups(page: &FormPage) -> Result<Vec<EvalGroup>> {
    if page.has_text_blocks() {
        return Err(Error::InvalidPage {
            page_id: page.page_id.clone(),
            field: "elements".into(),
            message: "evaluation needs pages of textruns and widgets".into(),
        });
    }
    Ok(page
        .annotations
        .iter()
        .map(|a| EvalGroup::from_annotation(page, a))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KindScore {
    pub matched: usize,
    pub predicted: usize,
    pub tagged: usize,
    pub recall: f64,
    pub precision: f64,
}

impl KindScore {
    /// Recall is 1 with nothing tagged; precision is 0 with nothing predicted.
    pub fn new(matched: usize, predicted: usize, tagged: usize) -> KindScore {
        KindScore {
            matched,
            predicted,
            tagged,
            recall: if tagged == 0 { 1.0 } else { matched as f64 / tagged as f64 },
            precision: if predicted == 0 {
                0.0
            } else {
                matched as f64 / predicted as f64
            },
        }
    }

    fn merge(&self, other: &KindScore) -> KindScore {
        KindScore::new(
            self.matched + other.matched,
            self.predicted + other.predicted,
            self.tagged + other.tagged,
        )
    }
}

impl Default for KindScore {
    fn default() -> Self {
        KindScore::new(0, 0, 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub textblock: KindScore,
    pub textfield: KindScore,
    pub choicefield: KindScore,
    pub choicegroup: KindScore,
}

impl EvalReport {
    pub fn get(&self, kind: GroupKind) -> &KindScore {
        match kind {
            GroupKind::TextBlock => &self.textblock,
            GroupKind::TextField => &self.textfield,
            GroupKind::ChoiceField => &self.choicefield,
            GroupKind::ChoiceGroup => &self.choicegroup,
        }
    }

    fn get_mut(&mut self, kind: GroupKind) -> &mut KindScore {
        match kind {
            GroupKind::TextBlock => &mut self.textblock,
            GroupKind::TextField => &mut self.textfield,
            GroupKind::ChoiceField => &mut self.choicefield,
            GroupKind::ChoiceGroup => &mut self.choicegroup,
        }
    }

    /// Counts summed kind by kind, rates recomputed.
    pub fn merge(&self, other: &EvalReport) -> EvalReport {
        let mut out = EvalReport::default();
        for kind in GroupKind::ALL {
            *out.get_mut(kind) = self.get(kind).merge(other.get(kind));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<12} {:>8} {:>10} {:>8} {:>9} {:>10}",
            "kind", "matched", "predicted", "tagged", "recall", "precision"
        )?;
        for kind in GroupKind::ALL {
            let s = self.get(kind);
            writeln!(
                f,
                "{:<12} {:>8} {:>10} {:>8} {:>8.2}% {:>9.2}%",
                kind.as_str(),
                s.matched,
                s.predicted,
                s.tagged,
                100.0 * s.recall,
                100.0 * s.precision
            )?;
        }
        Ok(())
    }
}

fn report_from(matched: &HashMap<GroupKind, usize>, predicted: &[EvalGroup], tagged: &[EvalGroup]) -> EvalReport {
    let mut report = EvalReport::default();
    for kind in GroupKind::ALL {
        let p = predicted.iter().filter(|g| g.kind == kind).count();
        let t = tagged.iter().filter(|g| g.kind == kind).count();
        *report.get_mut(kind) = KindScore::new(matched.get(&kind).copied().unwrap_or(0), p, t);
    }
    report
}

/// One-to-one matching on equal kind and equal constituent sets.
pub fn strict_match(predicted: &[EvalGroup], tagged: &[EvalGroup]) -> EvalReport {
    let mut pool: HashMap<(GroupKind, &BTreeSet<u32>), usize> = HashMap::new();
    for p in predicted {
        *pool.entry((p.kind, &p.constituents)).or_default() += 1;
    }
    let mut matched: HashMap<GroupKind, usize> = HashMap::new();
    for t in tagged {
        if let Some(n) = pool.get_mut(&(t.kind, &t.constituents)).filter(|n| **n > 0) {
            *n -= 1;
            *matched.entry(t.kind).or_default() += 1;
        }
    }
    report_from(&matched, predicted, tagged)
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Greedy one-to-one matching in descending IoU order among pairs of equal
/// kind with IoU at least `threshold`.
pub fn iou_match(predicted: &[EvalGroup], tagged: &[EvalGroup], threshold: f64) -> EvalReport {
    let mut pairs = Vec::new();
    for (i, p) in predicted.iter().enumerate() {
        for (j, t) in tagged.iter().enumerate() {
            if p.kind != t.kind {
                continue;
            }
            if let (Some(a), Some(b)) = (&p.bbox, &t.bbox) {
                let v = iou(a, b);
                if v >= threshold {
                    pairs.push((v, i, j));
                }
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let (mut used_p, mut used_t) = (vec![false; predicted.len()], vec![false; tagged.len()]);
    let mut matched: HashMap<GroupKind, usize> = HashMap::new();
    for (_, i, j) in pairs {
        if !used_p[i] && !used_t[j] {
            used_p[i] = true;
            used_t[j] = true;
            *matched.entry(predicted[i].kind).or_default() += 1;
        }
    }
    report_from(&matched, predicted, tagged)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Metric {
    Strict,
    Iou { threshold: f64 },
}

impl Metric {
    pub fn score(&self, predicted: &[EvalGroup], tagged: &[EvalGroup]) -> EvalReport {
        match *self {
            Metric::Strict => strict_match(predicted, tagged),
            Metric::Iou { threshold } => iou_match(predicted, tagged, threshold),
        }
    }
}

/// Scores pages paired by id. Predicted pages contribute their annotations
/// marked `predicted` (all of them when none is marked).
pub fn evaluate_pages(predicted: &[FormPage], gold: &[FormPage], metric: Metric) -> Result<EvalReport> {
    let by_id: HashMap<&str, &FormPage> = predicted.iter().map(|p| (p.page_id.as_str(), p)).collect();
    if by_id.len() != predicted.len() || predicted.len() != gold.len() {
        return Err(Error::Config(format!(
            "{} predicted pages against {} gold pages (page ids must pair one to one)",
            predicted.len(),
            gold.len()
        )));
    }
    let mut total = EvalReport::default();
    for g in gold {
        let p = by_id
            .get(g.page_id.as_str())
            .ok_or_else(|| Error::Config(format!("no prediction for page {}", g.page_id)))?;
        let any_marked = p.annotations.iter().any(|a| a.predicted);
        let preds: Vec<EvalGroup> = page_groups(p)?
            .into_iter()
            .zip(&p.annotations)
            .filter(|(_, a)| a.predicted || !any_marked)
            .map(|(e, _)| e)
            .collect();
        total = total.merge(&metric.score(&preds, &page_groups(g)?));
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert!((iou(&a, &BBox::new(5.0, 0.0, 10.0, 10.0)) - 50.0 / 150.0).abs() < 1e-12);
        assert_eq!(iou(&a, &BBox::new(20.0, 0.0, 5.0, 5.0)), 0.0);
        let z = BBox::new(0.0, 0.0, 0.0, 0.0);
        assert_eq!(iou(&z, &z), 0.0);
    }

    #[test]
    fn degenerate_rates() {
        let s = KindScore::new(0, 0, 3);
        assert_eq!((s.recall, s.precision), (0.0, 0.0));
        let s = KindScore::new(0, 2, 0);
        assert_eq!((s.recall, s.precision), (1.0, 0.0));
    }
}
