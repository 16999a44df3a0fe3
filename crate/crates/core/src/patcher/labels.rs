//! Training targets for each candidate of a patch.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::doc_model::{ElementKind, FormPage, GroupAnnotation, GroupKind};
use crate::error::{Error, Result};

use super::{Patch, Step};

/// Three-way relation predicted between a reference and a candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldClass {
    Field,
    ChoiceField,
    None,
}

impl FieldClass {
    pub const ALL: [FieldClass; 3] = [FieldClass::Field, FieldClass::ChoiceField, FieldClass::None];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> FieldClass {
        Self::ALL[i.min(2)]
    }
}

/// Per-slot labels; entries of padded slots are `false` / `None` and never
/// used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchLabels {
    pub step: Step,
    #[serde(default)]
    pub tb_assoc: Vec<bool>,
    #[serde(default)]
    pub field_class: Vec<FieldClass>,
    #[serde(default)]
    pub chgp_assoc: Vec<bool>,
}

fn membership(page: &FormPage, kind: GroupKind) -> Result<HashMap<u32, &GroupAnnotation>> {
    let mut map = HashMap::new();
    for ann in page.annotations_of(kind) {
        for &m in &ann.member_ids {
            if map.insert(m, ann).is_some() {
                return Err(Error::InconsistentAnnotations {
                    page_id: page.page_id.clone(),
                    message: format!("element {m} belongs to two {} groups", kind.as_str()),
                });
            }
        }
    }
    Ok(map)
}

fn is_widget(page: &FormPage, id: u32) -> bool {
    page.element(id).is_some_and(|e| e.kind == ElementKind::Widget)
}

/// Caption of a field-like group: the named caption or its only text member.
pub(crate) fn caption_of(page: &FormPage, ann: &GroupAnnotation) -> Option<u32> {
    ann.caption_id.or_else(|| {
        let text: Vec<u32> = ann
            .member_ids
            .iter()
            .copied()
            .filter(|&m| !is_widget(page, m))
            .collect();
        (text.len() == 1).then(|| text[0])
    })
}

/// Child choice fields of a choice group.
pub(crate) fn children_of<'a>(page: &'a FormPage, group: &GroupAnnotation) -> Vec<&'a GroupAnnotation> {
    page.annotations_of(GroupKind::ChoiceField)
        .filter(|cf| match &group.child_group_ids {
            Some(ids) => ids.contains(&cf.group_id),
            None => cf.member_ids.is_subset(&group.member_ids),
        })
        .collect()
}

/// Title of a choice group: the named title or its only text member outside
/// every child.
pub(crate) fn title_of(page: &FormPage, group: &GroupAnnotation) -> Option<u32> {
    group.title_id.or_else(|| {
        let children = children_of(page, group);
        let rest: Vec<u32> = group
            .member_ids
            .iter()
            .copied()
            .filter(|m| !is_widget(page, *m) && !children.iter().any(|c| c.member_ids.contains(m)))
            .collect();
        (rest.len() == 1).then(|| rest[0])
    })
}

/// Elements the reference should be associated with under the choice-group
/// relation.
fn choice_group_targets(page: &FormPage, reference: u32) -> BTreeSet<u32> {
    let mut out = BTreeSet::new();
    for group in page.annotations_of(GroupKind::ChoiceGroup) {
        let children = children_of(page, group);
        let captions: Vec<u32> = children.iter().filter_map(|c| caption_of(page, c)).collect();
        if title_of(page, group) == Some(reference) {
            out.extend(&captions);
        }
        for child in &children {
            if caption_of(page, child) != Some(reference) {
                continue;
            }
            out.extend(title_of(page, group));
            out.extend(child.member_ids.iter().filter(|&&m| is_widget(page, m)));
            out.extend(&captions);
        }
    }
    out
}

pub fn make_labels(page: &FormPage, patch: &Patch, step: Step) -> Result<PatchLabels> {
    let slots = patch.slots();
    let reference = patch.reference_id;
    let cands = &patch.candidate_ids;
    match step {
        Step::Step1 => {
            let blocks = membership(page, GroupKind::TextBlock)?;
            let group = blocks.get(&reference);
            let mut tb_assoc = vec![false; slots];
            for (slot, &c) in cands.iter().enumerate() {
                let same = c == reference || group.is_some_and(|g| g.member_ids.contains(&c));
                tb_assoc[slot] = same && page.element(c).is_some_and(|e| e.kind == ElementKind::TextRun);
            }
            Ok(PatchLabels {
                step,
                tb_assoc,
                field_class: Vec::new(),
                chgp_assoc: Vec::new(),
            })
        }
        Step::Step2 => {
            let fields = membership(page, GroupKind::TextField)?;
            let choices = membership(page, GroupKind::ChoiceField)?;
            membership(page, GroupKind::ChoiceGroup)?;
            let (rf, rc) = (fields.get(&reference), choices.get(&reference));
            let targets = choice_group_targets(page, reference);
            let mut field_class = vec![FieldClass::None; slots];
            let mut chgp_assoc = vec![false; slots];
            for (slot, c) in cands.iter().enumerate() {
                field_class[slot] = if rf.is_some_and(|g| g.member_ids.contains(c)) {
                    FieldClass::Field
                } else if rc.is_some_and(|g| g.member_ids.contains(c)) {
                    FieldClass::ChoiceField
                } else {
                    FieldClass::None
                };
                chgp_assoc[slot] = targets.contains(c);
            }
            Ok(PatchLabels {
                step,
                tb_assoc: Vec::new(),
                field_class,
                chgp_assoc,
            })
        }
    }
}
