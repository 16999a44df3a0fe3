//! Seeded synthetic form pages with ground-truth annotations.
//!
//! Pages are laid out column by column, top to bottom. Lines of one
//! textblock sit `line_gap` apart, parts of one construct (caption and
//! widgets, title and choices) sit halfway between `line_gap` and
//! `group_gap`, and separate constructs sit `group_gap` apart. A page is
//! kept only if every annotated relation lies inside the candidate
//! neighbourhoods used by both pipeline steps; otherwise it is redrawn.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::doc_model::{BBox, Element, ElementKind, FormPage, GroupAnnotation, GroupKind};
use crate::error::{Error, Result};
use crate::patcher::{self, select_candidates, DEFAULT_ROW_EPS};

/// Inclusive count range, serialised as `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span(pub usize, pub usize);

impl Span {
    fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        rng.gen_range(self.0..=self.1)
    }

    pub fn contains(&self, n: usize) -> bool {
        self.0 <= n && n <= self.1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub seed: u64,
    pub pages: usize,
    pub page_width: f64,
    pub page_height: f64,
    pub margin: f64,
    pub columns: Span,
    /// Free-standing paragraphs, not counting captions and titles.
    pub textblocks_per_page: Span,
    pub fields_per_page: Span,
    pub choicegroups_per_page: Span,
    pub lines_per_textblock: Span,
    pub words_per_line: Span,
    pub glyph_height: f64,
    pub line_gap: f64,
    pub group_gap: f64,
    /// `(k1, k2)` neighbourhoods every annotated relation must fit in.
    pub step1_k: [usize; 2],
    pub step2_k: [usize; 2],
    pub max_attempts: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 0,
            pages: 8,
            page_width: 600.0,
            page_height: 800.0,
            margin: 24.0,
            columns: Span(1, 2),
            textblocks_per_page: Span(2, 4),
            fields_per_page: Span(2, 4),
            choicegroups_per_page: Span(1, 2),
            lines_per_textblock: Span(1, 3),
            words_per_line: Span(2, 6),
            glyph_height: 10.0,
            line_gap: 4.0,
            group_gap: 24.0,
            step1_k: [6, 4],
            step2_k: [10, 4],
            max_attempts: 200,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, s) in [
            ("columns", self.columns),
            ("textblocks_per_page", self.textblocks_per_page),
            ("fields_per_page", self.fields_per_page),
            ("choicegroups_per_page", self.choicegroups_per_page),
            ("lines_per_textblock", self.lines_per_textblock),
            ("words_per_line", self.words_per_line),
        ] {
            if s.0 > s.1 {
                return bad(format!("{name} range [{}, {}] is empty", s.0, s.1));
            }
        }
        if self.columns.0 == 0 || self.lines_per_textblock.0 == 0 || self.words_per_line.0 == 0 {
            return bad("columns, lines_per_textblock and words_per_line need a minimum of 1".into());
        }
        if !(self.glyph_height > 0.0 && self.line_gap >= 0.0) {
            return bad("glyph_height must be positive and line_gap non-negative".into());
        }
        if self.group_gap <= self.line_gap {
            return bad(format!(
                "group_gap ({}) must exceed line_gap ({})",
                self.group_gap, self.line_gap
            ));
        }
        let usable_w = self.page_width - 2.0 * self.margin;
        let usable_h = self.page_height - 2.0 * self.margin;
        if !(usable_w > 0.0 && usable_h > 0.0) {
            return bad("page smaller than its margins".into());
        }
        if self.step1_k[0] == 0 || self.step2_k[0] == 0 {
            return bad("k1 must be at least 1".into());
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be at least 1".into());
        }
        Ok(())
    }

    fn char_width(&self) -> f64 {
        self.glyph_height * 0.6
    }

    fn inner_gap(&self) -> f64 {
        (self.line_gap + self.group_gap) / 2.0
    }
}

/// Marker words that open choice-field captions.
pub const CHOICE_MARKERS: [&str; 3] = ["yes", "no", "option"];

/// The fixed 256-word vocabulary pages draw from.
pub fn lexicon() -> &'static [String] {
    static WORDS: OnceLock<Vec<String>> = OnceLock::new();
    WORDS.get_or_init(|| {
        const CONSONANTS: &[u8] = b"bcdfghklmnprstvz";
        const VOWELS: &[u8] = b"aeiou";
        let mut rng = ChaCha8Rng::seed_from_u64(0x1e_c51c_0de);
        let mut seen = BTreeSet::new();
        let mut words = Vec::with_capacity(256);
        while words.len() < 256 {
            let syllables = rng.gen_range(1..=3);
            let mut w = String::new();
            for _ in 0..syllables {
                w.push(CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char);
                w.push(VOWELS[rng.gen_range(0..VOWELS.len())] as char);
                if rng.gen_bool(0.3) {
                    w.push(CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char);
                }
            }
            if !CHOICE_MARKERS.contains(&w.as_str()) && seen.insert(w.clone()) {
                words.push(w);
            }
        }
        words
    })
}

/// Pages for `cfg`, deterministic in `cfg.seed`.
pub fn generate_pages(cfg: &GenConfig) -> Result<Vec<FormPage>> {
    cfg.validate()?;
    (0..cfg.pages)
        .into_par_iter()
        .map(|i| generate_page(cfg, i))
        .collect()
}

fn generate_page(cfg: &GenConfig, index: usize) -> Result<FormPage> {
    for attempt in 0..cfg.max_attempts {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(((index as u64) << 20) | attempt as u64);
        let Some(page) = layout_page(cfg, index, &mut rng) else {
            continue;
        };
        page.validate()?;
        if neighbourhoods_hold(&page, cfg)? {
            return Ok(page);
        }
    }
    Err(Error::Infeasible {
        page: index,
        attempts: cfg.max_attempts,
    })
}

enum Shape {
    Paragraph,
    TextField { widgets: Vec<usize> },
    ChoiceGroup { title: Option<usize>, choices: Vec<(usize, usize)> },
}

/// A construct in local coordinates. `blocks` index into `runs`; shape
/// fields index into `blocks` and `widgets`.
struct Construct {
    runs: Vec<(BBox, Vec<String>)>,
    widgets: Vec<BBox>,
    blocks: Vec<Vec<usize>>,
    shape: Shape,
}

impl Construct {
    fn new(shape: Shape) -> Self {
        Construct {
            runs: Vec::new(),
            widgets: Vec::new(),
            blocks: Vec::new(),
            shape,
        }
    }

    fn extent(&self) -> (f64, f64) {
        let boxes = self.runs.iter().map(|(b, _)| b).chain(&self.widgets);
        let all = BBox::union_all(boxes).unwrap_or_default();
        (all.right(), all.bottom())
    }

    fn push_block(&mut self, lines: Vec<(BBox, Vec<String>)>) -> usize {
        let start = self.runs.len();
        self.runs.extend(lines);
        self.blocks.push((start..self.runs.len()).collect());
        self.blocks.len() - 1
    }
}

struct Writer<'a> {
    cfg: &'a GenConfig,
    max_width: f64,
}

impl Writer<'_> {
    fn text_width(&self, words: &[String]) -> f64 {
        let chars: usize = words.iter().map(|w| w.chars().count()).sum::<usize>() + words.len().saturating_sub(1);
        chars as f64 * self.cfg.char_width()
    }

    /// Up to `n` words that fit in `limit`; `None` if not even one fits.
    fn line(&self, rng: &mut ChaCha8Rng, n: usize, limit: f64) -> Option<Vec<String>> {
        let lex = lexicon();
        let mut words = Vec::new();
        for _ in 0..n {
            let w = lex[rng.gen_range(0..lex.len())].clone();
            words.push(w);
            if self.text_width(&words) > limit {
                words.pop();
                break;
            }
        }
        (!words.is_empty()).then_some(words)
    }

    fn lines(&self, rng: &mut ChaCha8Rng, count: usize, max_words: usize, left: f64, top: f64, limit: f64)
        -> Option<Vec<(BBox, Vec<String>)>> {
        let g = self.cfg;
        (0..count)
            .map(|i| {
                let n = g.words_per_line.sample(rng).min(max_words);
                let words = self.line(rng, n, limit)?;
                let y = top + i as f64 * (g.glyph_height + g.line_gap);
                Some((BBox::new(left, y, self.text_width(&words), g.glyph_height), words))
            })
            .collect()
    }

    fn paragraph(&self, rng: &mut ChaCha8Rng) -> Option<Construct> {
        let mut c = Construct::new(Shape::Paragraph);
        let count = self.cfg.lines_per_textblock.sample(rng);
        let lines = self.lines(rng, count, usize::MAX, 0.0, 0.0, self.max_width)?;
        c.push_block(lines);
        Some(c)
    }

    fn text_field(&self, rng: &mut ChaCha8Rng) -> Option<Construct> {
        let g = self.cfg;
        let (gh, gap) = (g.glyph_height, g.inner_gap());
        let widget_h = gh + 6.0;
        let count = rng.gen_range(1..=g.lines_per_textblock.1.min(2));
        let n_widgets = rng.gen_range(1..=2);
        let beside = rng.gen_bool(0.5);
        let caption_limit = if beside { self.max_width * 0.45 } else { self.max_width };
        let mut lines = self.lines(rng, count, 4, 0.0, 0.0, caption_limit)?;
        if let Some((b, words)) = lines.last_mut() {
            words.last_mut()?.push(':');
            b.width = self.text_width(words);
        }
        let caption_w = lines.iter().map(|(b, _)| b.width).fold(0.0, f64::max);
        let caption_h = lines.last()?.0.bottom();

        let mut c = Construct::new(Shape::TextField { widgets: Vec::new() });
        c.push_block(lines);
        let (x0, y0) = if beside { (caption_w + gap, 0.0) } else { (0.0, caption_h + gap) };
        let room = self.max_width - x0;
        if room < 40.0 {
            return None;
        }
        let w1 = rng.gen_range(40.0..=140.0f64).min(room).floor();
        c.widgets.push(BBox::new(x0, y0, w1, widget_h));
        if n_widgets == 2 {
            let right = x0 + w1 + 8.0;
            let w2 = rng.gen_range(40.0..=100.0f64).floor();
            if right + w2 <= self.max_width {
                c.widgets.push(BBox::new(right, y0, w2, widget_h));
            } else {
                c.widgets.push(BBox::new(x0, y0 + widget_h + g.line_gap, w1, widget_h));
            }
        }
        c.shape = Shape::TextField {
            widgets: (0..c.widgets.len()).collect(),
        };
        Some(c)
    }

    fn choice_group(&self, rng: &mut ChaCha8Rng) -> Option<Construct> {
        let g = self.cfg;
        let (gh, gap) = (g.glyph_height, g.inner_gap());
        let mut c = Construct::new(Shape::Paragraph);
        let title = if rng.gen_bool(0.5) {
            let lines = self.lines(rng, 1, usize::MAX, 0.0, 0.0, self.max_width)?;
            Some(c.push_block(lines))
        } else {
            None
        };
        let n = rng.gen_range(2..=3);
        let mut y = if title.is_some() { gh + gap } else { 0.0 };
        let mut x = 0.0;
        let mut choices = Vec::new();
        for i in 0..n {
            let marker = match n {
                2 => CHOICE_MARKERS[i],
                _ => CHOICE_MARKERS[2],
            };
            let extra = rng.gen_range(0..=2);
            let mut words = vec![marker.to_string()];
            if extra > 0 {
                words.extend(self.line(rng, extra, self.max_width)?);
            }
            let mut caption_w = self.text_width(&words);
            let limit = self.max_width - gh - 6.0;
            while caption_w > limit && words.len() > 1 {
                words.pop();
                caption_w = self.text_width(&words);
            }
            let total = gh + 6.0 + caption_w;
            if total > self.max_width {
                return None;
            }
            if x > 0.0 && x + total > self.max_width {
                x = 0.0;
                y += gh + gap;
            }
            c.widgets.push(BBox::new(x, y, gh, gh));
            let block = c.push_block(vec![(BBox::new(x + gh + 6.0, y, caption_w, gh), words)]);
            choices.push((block, c.widgets.len() - 1));
            x += total + 20.0;
        }
        c.shape = Shape::ChoiceGroup { title, choices };
        Some(c)
    }
}

#[derive(Clone, Copy)]
enum Want {
    Paragraph,
    TextField,
    ChoiceGroup,
}

fn layout_page(cfg: &GenConfig, index: usize, rng: &mut ChaCha8Rng) -> Option<FormPage> {
    let columns = cfg.columns.sample(rng);
    let col_gap = 2.0 * cfg.group_gap;
    let usable = cfg.page_width - 2.0 * cfg.margin;
    let col_w = (usable - (columns - 1) as f64 * col_gap) / columns as f64;
    if col_w <= 0.0 {
        return None;
    }
    let writer = Writer { cfg, max_width: col_w };

    let mut wants = Vec::new();
    wants.extend(std::iter::repeat_n(Want::Paragraph, cfg.textblocks_per_page.sample(rng)));
    wants.extend(std::iter::repeat_n(Want::TextField, cfg.fields_per_page.sample(rng)));
    wants.extend(std::iter::repeat_n(Want::ChoiceGroup, cfg.choicegroups_per_page.sample(rng)));
    wants.shuffle(rng);

    let mut page = FormPage {
        page_id: format!("synth-{}-{:04}", cfg.seed, index),
        width: cfg.page_width,
        height: cfg.page_height,
        elements: Vec::new(),
        annotations: Vec::new(),
    };
    let mut next_group = 1u32;
    let mut column = 0usize;
    let mut y = cfg.margin;
    let bottom = cfg.page_height - cfg.margin;
    for want in wants {
        let construct = match want {
            Want::Paragraph => writer.paragraph(rng),
            Want::TextField => writer.text_field(rng),
            Want::ChoiceGroup => writer.choice_group(rng),
        }?;
        let (_, h) = construct.extent();
        if y + h > bottom {
            column += 1;
            y = cfg.margin;
            if column == columns || y + h > bottom {
                return None;
            }
        }
        let x = cfg.margin + column as f64 * (col_w + col_gap);
        place(&mut page, &construct, x, y, &mut next_group);
        y += h + cfg.group_gap;
    }
    Some(page)
}

fn place(page: &mut FormPage, c: &Construct, dx: f64, dy: f64, next_group: &mut u32) {
    let mut next_id = page.max_element_id().map_or(1, |m| m + 1);
    let shift = |b: &BBox| BBox::new(b.left + dx, b.top + dy, b.width, b.height);
    let mut run_ids = Vec::new();
    for (b, words) in &c.runs {
        page.elements.push(Element::text_run(next_id, shift(b), words.clone()));
        run_ids.push(next_id);
        next_id += 1;
    }
    let mut widget_ids = Vec::new();
    for b in &c.widgets {
        page.elements.push(Element::widget(next_id, shift(b)));
        widget_ids.push(next_id);
        next_id += 1;
    }
    let mut group = |kind, members: Vec<u32>| {
        let id = *next_group;
        *next_group += 1;
        page.annotations.push(GroupAnnotation::new(kind, id, members));
        id
    };
    let block_runs = |b: usize| c.blocks[b].iter().map(|&r| run_ids[r]).collect::<Vec<_>>();
    for b in 0..c.blocks.len() {
        group(GroupKind::TextBlock, block_runs(b));
    }
    match &c.shape {
        Shape::Paragraph => {}
        Shape::TextField { widgets } => {
            let mut members = block_runs(0);
            members.extend(widgets.iter().map(|&w| widget_ids[w]));
            group(GroupKind::TextField, members);
        }
        Shape::ChoiceGroup { title, choices } => {
            let mut all = title.map(block_runs).unwrap_or_default();
            let mut children = BTreeSet::new();
            for &(block, widget) in choices {
                let mut members = block_runs(block);
                members.push(widget_ids[widget]);
                all.extend(&members);
                children.insert(group(GroupKind::ChoiceField, members));
            }
            let id = group(GroupKind::ChoiceGroup, all);
            page.annotations.last_mut().expect("just pushed").child_group_ids = Some(children);
            debug_assert_eq!(page.annotations.last().map(|a| a.group_id), Some(id));
        }
    }
}

/// Every relation the labels make positive lies inside the reference's
/// candidate neighbourhood, for both steps.
pub fn neighbourhoods_hold(page: &FormPage, cfg: &GenConfig) -> Result<bool> {
    let [k1, k2] = cfg.step1_k;
    let mut cache: HashMap<u32, BTreeSet<u32>> = HashMap::new();
    let selection = |p: &FormPage, id: u32, k1: usize, k2: usize| -> Result<BTreeSet<u32>> {
        let (a, b) = select_candidates(p, id, k1, k2)?;
        Ok(a.into_iter().chain(b).collect())
    };
    for tb in page.annotations_of(GroupKind::TextBlock) {
        for &m in &tb.member_ids {
            if let std::collections::hash_map::Entry::Vacant(e) = cache.entry(m) {
                let s = selection(page, m, k1, k2)?;
                e.insert(s);
            }
            if !tb.member_ids.is_subset(&cache[&m]) {
                return Ok(false);
            }
        }
    }

    let (step2, _) = derive_step2(page)?;
    let [k1, k2] = cfg.step2_k;
    for tb in step2.elements_of(ElementKind::TextBlock) {
        let probe = crate::patcher::PatchConfig {
            k1,
            k2,
            height: 1,
            width: 1,
            row_eps: DEFAULT_ROW_EPS,
        };
        let patch = patcher::build_patch_geometry(&step2, tb.id, &probe)?;
        let labels = patcher::make_labels(&step2, &patch, patcher::Step::Step2)?;
        let seen: BTreeSet<u32> = selection(&step2, tb.id, k1, k2)?;
        let mut wanted = BTreeSet::new();
        for kind in [GroupKind::TextField, GroupKind::ChoiceField] {
            for g in step2.annotations_of(kind).filter(|g| g.member_ids.contains(&tb.id)) {
                wanted.extend(&g.member_ids);
            }
        }
        if !wanted.is_subset(&seen) {
            return Ok(false);
        }
        // choice-group targets are computed over the whole page; every one
        // must have been labelled positive inside the patch
        let positives: BTreeSet<u32> = patch
            .candidate_ids
            .iter()
            .zip(&labels.chgp_assoc)
            .filter(|(_, &p)| p)
            .map(|(&id, _)| id)
            .collect();
        let expected = choice_group_expected(&step2, tb.id);
        if positives != expected {
            return Ok(false);
        }
    }
    Ok(true)
}

fn choice_group_expected(page: &FormPage, reference: u32) -> BTreeSet<u32> {
    let mut out = BTreeSet::new();
    for group in page.annotations_of(GroupKind::ChoiceGroup) {
        let children: Vec<&GroupAnnotation> = page
            .annotations_of(GroupKind::ChoiceField)
            .filter(|cf| group.child_group_ids.as_ref().is_some_and(|c| c.contains(&cf.group_id)))
            .collect();
        let captions: Vec<u32> = children.iter().filter_map(|c| c.caption_id).collect();
        if group.title_id == Some(reference) {
            out.extend(&captions);
        }
        for child in children.iter().filter(|c| c.caption_id == Some(reference)) {
            out.extend(group.title_id);
            out.extend(&captions);
            out.extend(
                child
                    .member_ids
                    .iter()
                    .filter(|&&m| page.element(m).is_some_and(|e| e.is_widget())),
            );
        }
    }
    out
}

/// Textblock id → its constituent textrun ids.
pub type Decomposition = BTreeMap<u32, BTreeSet<u32>>;

/// A page whose elements are one textblock per entry of `textblocks` plus
/// the widgets of `page`. Textblocks are numbered after the largest existing
/// id in order of their smallest textrun id; boxes are unions and words are
/// concatenated in reading order. Annotations are left empty.
pub fn assemble_step2_page(page: &FormPage, textblocks: &[BTreeSet<u32>]) -> Result<(FormPage, Decomposition)> {
    let index = page.element_index();
    let mut blocks: Vec<&BTreeSet<u32>> = textblocks.iter().filter(|b| !b.is_empty()).collect();
    blocks.sort_by_key(|b| b.first().copied());
    let base = page.max_element_id().map_or(0, |m| m + 1);
    let mut elements = Vec::with_capacity(blocks.len());
    let mut decomposition = Decomposition::new();
    for (rank, members) in blocks.into_iter().enumerate() {
        let runs: Vec<&Element> = members
            .iter()
            .map(|id| {
                index
                    .get(id)
                    .copied()
                    .filter(|e| e.kind == ElementKind::TextRun)
                    .ok_or_else(|| Error::InconsistentAnnotations {
                        page_id: page.page_id.clone(),
                        message: format!("textblock member {id} is not a textrun on the page"),
                    })
            })
            .collect::<Result<_>>()?;
        let bbox = BBox::union_all(runs.iter().map(|e| &e.bbox)).expect("non-empty block");
        let mut words = Vec::new();
        for id in patcher::reading_order(runs.iter().copied(), DEFAULT_ROW_EPS) {
            words.extend(index[&id].words.iter().cloned());
        }
        let id = base + rank as u32;
        elements.push(Element::text_block(id, bbox, words));
        decomposition.insert(id, members.clone());
    }
    elements.extend(page.elements_of(ElementKind::Widget).cloned());
    Ok((
        FormPage {
            page_id: page.page_id.clone(),
            width: page.width,
            height: page.height,
            elements,
            annotations: Vec::new(),
        },
        decomposition,
    ))
}

/// Second-step view of an annotated first-step page, with its decomposition.
pub fn derive_step2(page: &FormPage) -> Result<(FormPage, Decomposition)> {
    let inconsistent = |message: String| Error::InconsistentAnnotations {
        page_id: page.page_id.clone(),
        message,
    };
    if page.annotations_of(GroupKind::TextBlock).next().is_none() {
        return Err(inconsistent("no textblock annotations to derive from".into()));
    }
    let blocks: Vec<BTreeSet<u32>> = page
        .annotations_of(GroupKind::TextBlock)
        .map(|a| a.member_ids.clone())
        .collect();
    let mut owner_of_run: HashMap<u32, usize> = HashMap::new();
    for (i, b) in blocks.iter().enumerate() {
        for &r in b {
            if owner_of_run.insert(r, i).is_some() {
                return Err(inconsistent(format!("textrun {r} belongs to two textblocks")));
            }
        }
    }
    if let Some(orphan) = page
        .elements_of(ElementKind::TextRun)
        .find(|e| !owner_of_run.contains_key(&e.id))
    {
        return Err(inconsistent(format!("textrun {} belongs to no textblock", orphan.id)));
    }

    let (mut derived, decomposition) = assemble_step2_page(page, &blocks)?;
    let run_to_block: HashMap<u32, u32> = decomposition
        .iter()
        .flat_map(|(&tb, runs)| runs.iter().map(move |&r| (r, tb)))
        .collect();
    let lift = |members: &BTreeSet<u32>| -> BTreeSet<u32> {
        members
            .iter()
            .map(|m| run_to_block.get(m).copied().unwrap_or(*m))
            .collect()
    };
    let is_block = |id: &u32| decomposition.contains_key(id);
    let sole_block = |members: &BTreeSet<u32>| {
        let text: Vec<u32> = members.iter().copied().filter(is_block).collect();
        (text.len() == 1).then(|| text[0])
    };

    let mut lifted: Vec<GroupAnnotation> = Vec::new();
    for ann in &page.annotations {
        if ann.kind == GroupKind::TextBlock {
            continue;
        }
        let mut out = ann.clone();
        out.member_ids = lift(&ann.member_ids);
        out.title_id = None;
        out.caption_id = None;
        if matches!(ann.kind, GroupKind::TextField | GroupKind::ChoiceField) {
            out.caption_id = ann
                .caption_id
                .and_then(|c| run_to_block.get(&c).copied())
                .or_else(|| sole_block(&out.member_ids));
        }
        lifted.push(out);
    }
    let child_members: HashMap<u32, BTreeSet<u32>> = lifted
        .iter()
        .filter(|a| a.kind == GroupKind::ChoiceField)
        .map(|a| (a.group_id, a.member_ids.clone()))
        .collect();
    for ann in lifted.iter_mut().filter(|a| a.kind == GroupKind::ChoiceGroup) {
        let mut covered = BTreeSet::new();
        for child in ann.child_group_ids.iter().flatten() {
            covered.extend(child_members.get(child).into_iter().flatten());
        }
        let rest: BTreeSet<u32> = ann.member_ids.difference(&covered).copied().collect();
        ann.title_id = sole_block(&rest).filter(|_| rest.len() == 1);
    }
    derived.annotations = lifted;
    derived.validate()?;
    Ok((derived, decomposition))
}

/// Second-step view of an annotated first-step page.
pub fn derive_step2_page(page: &FormPage) -> Result<FormPage> {
    derive_step2(page).map(|(p, _)| p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lexicon_is_fixed() {
        let lex = lexicon();
        assert_eq!(lex.len(), 256);
        assert_eq!(lex.iter().collect::<BTreeSet<_>>().len(), 256);
        assert!(!lex.iter().any(|w| CHOICE_MARKERS.contains(&w.as_str())));
    }

    #[test]
    fn rejects_bad_configs() {
        let cfg = GenConfig {
            group_gap: 4.0,
            ..GenConfig::default()
        };
        assert!(matches!(generate_pages(&cfg), Err(Error::Config(_))));
        let cfg = GenConfig {
            fields_per_page: Span(3, 1),
            ..GenConfig::default()
        };
        assert!(generate_pages(&cfg).is_err());
    }

    #[test]
    fn tiny_page_is_infeasible() {
        let cfg = GenConfig {
            pages: 1,
            page_width: 120.0,
            page_height: 120.0,
            max_attempts: 5,
            ..GenConfig::default()
        };
        assert!(matches!(
            generate_pages(&cfg),
            Err(Error::Infeasible { page: 0, attempts: 5 })
        ));
    }
}
