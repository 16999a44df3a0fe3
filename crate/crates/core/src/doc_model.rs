//! Page, element and group records plus the JSON-lines dataset format.
//!
//! Boxes are stored as `(left, top, width, height)` in page pixels. The
//! midpoint form used by the candidate distance is derived with
//! [`BBox::midpoint`].

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Words kept per element; longer texts are truncated.
pub const MAX_WORDS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub left: f64,
    pub top: f64,
    pub width: f64,
    pub height: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.left, b.top, b.width, b.height]
    }
}

impl BBox {
    pub const fn new(left: f64, top: f64, width: f64, height: f64) -> Self {
        BBox {
            left,
            top,
            width,
            height,
        }
    }

    pub fn right(&self) -> f64 {
        self.left + self.width
    }

    pub fn bottom(&self) -> f64 {
        self.top + self.height
    }

    /// Center of the box, `(left + width/2, top + height/2)`.
    pub fn midpoint(&self) -> (f64, f64) {
        (self.left + self.width / 2.0, self.top + self.height / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.width * self.height
    }

    /// Smallest box covering both.
    pub fn union(&self, other: &BBox) -> BBox {
        let left = self.left.min(other.left);
        let top = self.top.min(other.top);
        let right = self.right().max(other.right());
        let bottom = self.bottom().max(other.bottom());
        BBox::new(left, top, right - left, bottom - top)
    }

    /// Union over a non-empty iterator of boxes.
    pub fn union_all<'a>(boxes: impl IntoIterator<Item = &'a BBox>) -> Option<BBox> {
        boxes.into_iter().fold(None, |acc, b| match acc {
            None => Some(*b),
            Some(a) => Some(a.union(b)),
        })
    }

    /// Area of the overlap with `other` (zero when they only touch).
    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.right().min(other.right()) - self.left.max(other.left);
        let h = self.bottom().min(other.bottom()) - self.top.max(other.top);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn contains(&self, other: &BBox) -> bool {
        other.left >= self.left
            && other.top >= self.top
            && other.right() <= self.right()
            && other.bottom() <= self.bottom()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementKind {
    TextRun,
    Widget,
    TextBlock,
}

impl ElementKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ElementKind::TextRun => "textrun",
            ElementKind::Widget => "widget",
            ElementKind::TextBlock => "textblock",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Element {
    pub id: u32,
    pub kind: ElementKind,
    pub bbox: BBox,
    #[serde(default)]
    pub words: Vec<String>,
}

impl Element {
    pub fn text_run(id: u32, bbox: BBox, words: Vec<String>) -> Self {
        let mut words = words;
        words.truncate(MAX_WORDS);
        Element {
            id,
            kind: ElementKind::TextRun,
            bbox,
            words,
        }
    }

    pub fn widget(id: u32, bbox: BBox) -> Self {
        Element {
            id,
            kind: ElementKind::Widget,
            bbox,
            words: Vec::new(),
        }
    }

    pub fn text_block(id: u32, bbox: BBox, words: Vec<String>) -> Self {
        let mut words = words;
        words.truncate(MAX_WORDS);
        Element {
            id,
            kind: ElementKind::TextBlock,
            bbox,
            words,
        }
    }

    pub fn is_widget(&self) -> bool {
        self.kind == ElementKind::Widget
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupKind {
    TextBlock,
    TextField,
    ChoiceField,
    ChoiceGroup,
}

impl GroupKind {
    pub const ALL: [GroupKind; 4] = [
        GroupKind::TextBlock,
        GroupKind::TextField,
        GroupKind::ChoiceField,
        GroupKind::ChoiceGroup,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            GroupKind::TextBlock => "textblock",
            GroupKind::TextField => "textfield",
            GroupKind::ChoiceField => "choicefield",
            GroupKind::ChoiceGroup => "choicegroup",
        }
    }
}

/// A tagged (or predicted) higher-order construct.
///
/// Pages whose elements are textruns and widgets express every annotation
/// over those constituents; `caption_id`/`title_id` are then unset. Pages whose
/// elements are textblocks express fields and choice groups over textblock and
/// widget ids and name the caption or title element explicitly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAnnotation {
    pub kind: GroupKind,
    pub member_ids: BTreeSet<u32>,
    #[serde(default)]
    pub title_id: Option<u32>,
    #[serde(default)]
    pub caption_id: Option<u32>,
    #[serde(default)]
    pub child_group_ids: Option<BTreeSet<u32>>,
    pub group_id: u32,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub predicted: bool,
}

impl GroupAnnotation {
    pub fn new(kind: GroupKind, group_id: u32, member_ids: impl IntoIterator<Item = u32>) -> Self {
        GroupAnnotation {
            kind,
            member_ids: member_ids.into_iter().collect(),
            title_id: None,
            caption_id: None,
            child_group_ids: None,
            group_id,
            predicted: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormPage {
    pub page_id: String,
    pub width: f64,
    pub height: f64,
    pub elements: Vec<Element>,
    #[serde(default)]
    pub annotations: Vec<GroupAnnotation>,
}

impl FormPage {
    pub fn element(&self, id: u32) -> Option<&Element> {
        self.elements.iter().find(|e| e.id == id)
    }

    pub fn element_index(&self) -> HashMap<u32, &Element> {
        self.elements.iter().map(|e| (e.id, e)).collect()
    }

    pub fn elements_of(&self, kind: ElementKind) -> impl Iterator<Item = &Element> {
        self.elements.iter().filter(move |e| e.kind == kind)
    }

    pub fn annotations_of(&self, kind: GroupKind) -> impl Iterator<Item = &GroupAnnotation> {
        self.annotations.iter().filter(move |a| a.kind == kind)
    }

    /// True when the page carries textblock elements (second-step input).
    pub fn has_text_blocks(&self) -> bool {
        self.elements.iter().any(|e| e.kind == ElementKind::TextBlock)
    }

    pub fn max_element_id(&self) -> Option<u32> {
        self.elements.iter().map(|e| e.id).max()
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |field: &str, message: String| Error::InvalidPage {
            page_id: self.page_id.clone(),
            field: field.to_string(),
            message,
        };
        if !(self.width.is_finite() && self.height.is_finite())
            || self.width < 0.0
            || self.height < 0.0
        {
            return Err(invalid(
                "width/height",
                format!("{} x {}", self.width, self.height),
            ));
        }
        let page_box = BBox::new(0.0, 0.0, self.width, self.height);
        let mut ids = HashSet::new();
        for e in &self.elements {
            if !ids.insert(e.id) {
                return Err(invalid("elements.id", format!("duplicate id {}", e.id)));
            }
            let b = &e.bbox;
            let finite = [b.left, b.top, b.width, b.height]
                .iter()
                .all(|v| v.is_finite());
            if !finite || b.width < 0.0 || b.height < 0.0 {
                return Err(invalid(
                    "elements.bbox",
                    format!("element {} has malformed box {:?}", e.id, b),
                ));
            }
            if !page_box.contains(b) {
                return Err(invalid(
                    "elements.bbox",
                    format!("element {} lies outside the page", e.id),
                ));
            }
            if e.is_widget() && !e.words.is_empty() {
                return Err(invalid(
                    "elements.words",
                    format!("widget {} carries words", e.id),
                ));
            }
        }

        let mut group_ids = HashMap::new();
        for a in &self.annotations {
            if group_ids.insert(a.group_id, a).is_some() {
                return Err(invalid(
                    "annotations.group_id",
                    format!("duplicate group id {}", a.group_id),
                ));
            }
        }
        for a in &self.annotations {
            if a.member_ids.is_empty() {
                return Err(invalid(
                    "annotations.member_ids",
                    format!("group {} has no members", a.group_id),
                ));
            }
            if let Some(missing) = a.member_ids.iter().find(|id| !ids.contains(id)) {
                return Err(invalid(
                    "annotations.member_ids",
                    format!("group {} references unknown element id {}", a.group_id, missing),
                ));
            }
            for (field, role) in [("title_id", a.title_id), ("caption_id", a.caption_id)] {
                if let Some(id) = role {
                    if !a.member_ids.contains(&id) {
                        return Err(invalid(
                            &format!("annotations.{field}"),
                            format!("group {}: {} {} is not a member", a.group_id, field, id),
                        ));
                    }
                }
            }
            if a.title_id.is_some() && a.kind != GroupKind::ChoiceGroup {
                return Err(invalid(
                    "annotations.title_id",
                    format!("group {} is not a choice group", a.group_id),
                ));
            }
            if a.caption_id.is_some()
                && !matches!(a.kind, GroupKind::TextField | GroupKind::ChoiceField)
            {
                return Err(invalid(
                    "annotations.caption_id",
                    format!("group {} is not a field", a.group_id),
                ));
            }
            if let Some(children) = &a.child_group_ids {
                if a.kind != GroupKind::ChoiceGroup {
                    return Err(invalid(
                        "annotations.child_group_ids",
                        format!("group {} is not a choice group", a.group_id),
                    ));
                }
                let mut union: BTreeSet<u32> = a.title_id.into_iter().collect();
                for child in children {
                    match group_ids.get(child) {
                        Some(c) if c.kind == GroupKind::ChoiceField => {
                            union.extend(c.member_ids.iter().copied())
                        }
                        _ => {
                            return Err(invalid(
                                "annotations.child_group_ids",
                                format!(
                                    "group {}: child {} is not a choice field group",
                                    a.group_id, child
                                ),
                            ))
                        }
                    }
                }
                let consistent = if a.title_id.is_some() {
                    union == a.member_ids
                } else {
                    union.is_subset(&a.member_ids)
                };
                if !consistent {
                    return Err(invalid(
                        "annotations.member_ids",
                        format!(
                            "choice group {} members disagree with its title and children",
                            a.group_id
                        ),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Reads a JSON-lines dataset. Blank lines are skipped.
pub fn load_pages(path: impl AsRef<Path>) -> Result<Vec<FormPage>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut pages = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        pages.push(parse_page(&line, i + 1)?);
    }
    Ok(pages)
}

pub(crate) fn parse_page(line: &str, line_no: usize) -> Result<FormPage> {
    let mut page: FormPage = serde_json::from_str(line).map_err(|e| Error::Parse {
        line: line_no,
        message: e.to_string(),
    })?;
    for e in &mut page.elements {
        if e.words.len() > MAX_WORDS {
            log::warn!(
                "page {}: element {} truncated to {} words",
                page.page_id,
                e.id,
                MAX_WORDS
            );
            e.words.truncate(MAX_WORDS);
        }
    }
    page.validate()?;
    Ok(page)
}

/// Serializes one page per line. Output bytes depend only on the pages.
pub fn write_pages<W: Write>(pages: &[FormPage], mut out: W) -> Result<()> {
    for page in pages {
        let line = serde_json::to_string(page).expect("page serialization cannot fail");
        writeln!(out, "{line}").map_err(|e| Error::io("<writer>", e))?;
    }
    Ok(())
}

pub fn save_pages(pages: &[FormPage], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_pages(pages, &mut buf)?;
    write_atomic(path, &buf)
}

/// Writes through a temporary file in the target directory, then renames it
/// into place so no partial file is ever visible.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = path
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_page() -> FormPage {
        FormPage {
            page_id: "p0".into(),
            width: 200.0,
            height: 100.0,
            elements: vec![
                Element::text_run(1, BBox::new(10.0, 10.0, 50.0, 10.0), vec!["name".into()]),
                Element::text_run(2, BBox::new(10.0, 24.0, 40.0, 10.0), vec!["first".into()]),
                Element::widget(3, BBox::new(70.0, 10.0, 60.0, 12.0)),
            ],
            annotations: vec![
                GroupAnnotation::new(GroupKind::TextBlock, 0, [1, 2]),
                GroupAnnotation::new(GroupKind::TextField, 1, [1, 2, 3]),
            ],
        }
    }

    #[test]
    fn midpoint_examples() {
        assert_eq!(BBox::new(0.0, 0.0, 0.0, 0.0).midpoint(), (0.0, 0.0));
        assert_eq!(BBox::new(10.0, 20.0, 4.0, 6.0).midpoint(), (12.0, 23.0));
        assert_eq!(BBox::new(50.0, 100.0, 200.0, 50.0).midpoint(), (150.0, 125.0));
    }

    #[test]
    fn empty_file_loads_no_pages() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(load_pages(&path).unwrap().is_empty());
    }

    #[test]
    fn save_load_round_trip_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.jsonl");
        let b = dir.path().join("b.jsonl");
        let mut bare = sample_page();
        bare.page_id = "p1".into();
        bare.annotations.clear();
        let pages = vec![sample_page(), bare];
        save_pages(&pages, &a).unwrap();
        save_pages(&pages, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let loaded = load_pages(&a).unwrap();
        assert_eq!(loaded, pages);
        assert!(loaded[1].annotations.is_empty());
    }

    #[test]
    fn schema_keys_are_exact() {
        let line = serde_json::to_string(&sample_page()).unwrap();
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        let el = &v["elements"][0];
        assert_eq!(el["kind"], "textrun");
        assert_eq!(el["bbox"], serde_json::json!([10.0, 10.0, 50.0, 10.0]));
        let ann = &v["annotations"][1];
        assert_eq!(ann["kind"], "textfield");
        assert!(ann["title_id"].is_null());
        assert!(ann["child_group_ids"].is_null());
        assert_eq!(ann["group_id"], 1);
        assert!(ann.get("predicted").is_none());
    }

    #[test]
    fn unknown_member_id_is_named() {
        let mut page = sample_page();
        page.annotations[0].member_ids.insert(42);
        let line = serde_json::to_string(&page).unwrap();
        let err = parse_page(&line, 7).unwrap_err().to_string();
        assert!(err.contains("42"), "{err}");
        assert!(err.contains("p0"), "{err}");
    }

    #[test]
    fn parse_error_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let good = serde_json::to_string(&sample_page()).unwrap();
        std::fs::write(&path, format!("{good}\n{{not json\n")).unwrap();
        match load_pages(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn widget_with_words_is_rejected() {
        let mut page = sample_page();
        page.elements[2].words.push("oops".into());
        assert!(page.validate().is_err());
    }

    #[test]
    fn widgets_round_trip_without_words() {
        let line = serde_json::to_string(&sample_page()).unwrap();
        let back = parse_page(&line, 1).unwrap();
        assert!(back.elements_of(ElementKind::Widget).all(|w| w.words.is_empty()));
    }

    #[test]
    fn element_outside_page_rejected() {
        let mut page = sample_page();
        page.elements[0].bbox = BBox::new(190.0, 10.0, 50.0, 10.0);
        assert!(page.validate().is_err());
    }

    #[test]
    fn long_texts_are_truncated_on_load() {
        let mut page = sample_page();
        page.elements[0].words = (0..250).map(|i| format!("w{i}")).collect();
        let back = parse_page(&serde_json::to_string(&page).unwrap(), 1).unwrap();
        assert_eq!(back.elements[0].words.len(), MAX_WORDS);
    }
}
