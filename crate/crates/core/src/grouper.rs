//! Association graphs built from per-reference votes, their connected
//! components, and the structures those components describe.
//!
//! An undirected edge joins two elements when every direction that was
//! evaluated votes for the relation. Widgets are never references, so a single
//! vote from a textblock is enough to attach a widget. Self votes carry no
//! edge.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::doc_model::{ElementKind, FormPage, GroupAnnotation, GroupKind};
use crate::error::{Error, Result};
use crate::mmpan::AssociationResult;
use crate::patcher::{FieldClass, Patch, PatchLabels, Step};
use crate::synthgen::Decomposition;

/// Decisions of one reference over its valid candidates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceVotes {
    pub reference_id: u32,
    pub step: Step,
    pub candidate_ids: Vec<u32>,
    /// Textblock association for the first step, choice-group association
    /// for the second.
    pub assoc: Vec<bool>,
    /// Empty for the first step.
    pub field: Vec<FieldClass>,
}

impl ReferenceVotes {
    pub fn from_result(result: &AssociationResult) -> ReferenceVotes {
        let (assoc, field) = result.decisions();
        ReferenceVotes {
            reference_id: result.reference_id,
            step: result.step,
            candidate_ids: result.candidate_ids.clone(),
            assoc,
            field,
        }
    }

    /// Ground-truth labels read as votes.
    pub fn from_labels(patch: &Patch, labels: &PatchLabels) -> ReferenceVotes {
        let n = patch.num_valid();
        let (assoc, field) = match labels.step {
            Step::Step1 => (labels.tb_assoc[..n].to_vec(), Vec::new()),
            Step::Step2 => (labels.chgp_assoc[..n].to_vec(), labels.field_class[..n].to_vec()),
        };
        ReferenceVotes {
            reference_id: patch.reference_id,
            step: labels.step,
            candidate_ids: patch.candidate_ids.clone(),
            assoc,
            field,
        }
    }
}

/// One relation's graph over the elements of a page.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssocGraph {
    pub relation: GroupKind,
    pub nodes: BTreeSet<u32>,
    pub directed_votes: BTreeMap<(u32, u32), bool>,
    /// Pairs stored as `(smaller, larger)`.
    pub edges: BTreeSet<(u32, u32)>,
}

impl AssocGraph {
    pub fn new(relation: GroupKind, nodes: impl IntoIterator<Item = u32>) -> AssocGraph {
        AssocGraph {
            relation,
            nodes: nodes.into_iter().collect(),
            directed_votes: BTreeMap::new(),
            edges: BTreeSet::new(),
        }
    }

    /// Records `from → to`; a later vote for the same direction replaces it.
    pub fn vote(&mut self, from: u32, to: u32, value: bool) {
        self.directed_votes.insert((from, to), value);
    }

    /// Recomputes `edges` from the directed votes.
    pub fn derive_edges(&mut self) {
        self.edges = self
            .directed_votes
            .iter()
            .filter(|&(&(a, b), &v)| {
                v && a != b
                    && self.nodes.contains(&a)
                    && self.nodes.contains(&b)
                    && self.directed_votes.get(&(b, a)).copied().unwrap_or(true)
            })
            .map(|(&(a, b), _)| (a.min(b), a.max(b)))
            .collect();
    }
}

/// Builds the graphs of one step: a textblock graph for the first, and
/// field, choice-field and choice-group graphs for the second.
pub fn build_graphs(page: &FormPage, votes: &[ReferenceVotes], step: Step) -> Result<Vec<AssocGraph>> {
    let reference_kind = step.reference_kind();
    let references: BTreeSet<u32> = page.elements_of(reference_kind).map(|e| e.id).collect();
    let mut seen = BTreeSet::new();
    for v in votes {
        if v.step != step {
            return Err(Error::Config(format!("votes for {:?} given to {step:?} grouping", v.step)));
        }
        if !references.contains(&v.reference_id) {
            return Err(Error::WrongReferenceKind {
                id: v.reference_id,
                kind: page
                    .element(v.reference_id)
                    .map_or("missing", |e| e.kind.as_str())
                    .to_string(),
            });
        }
        if !seen.insert(v.reference_id) {
            return Err(Error::ReferenceCoverage {
                page_id: page.page_id.clone(),
                element_id: v.reference_id,
                problem: "appears as a reference more than once",
            });
        }
        let expected = match step {
            Step::Step1 => v.candidate_ids.len(),
            Step::Step2 => v.candidate_ids.len().min(v.field.len()),
        };
        if v.assoc.len() != v.candidate_ids.len() || expected != v.candidate_ids.len() {
            return Err(Error::shape("build_graphs", "votes do not cover every candidate"));
        }
    }
    if let Some(&missing) = references.difference(&seen).next() {
        return Err(Error::ReferenceCoverage {
            page_id: page.page_id.clone(),
            element_id: missing,
            problem: "was never a reference",
        });
    }

    let mut graphs = match step {
        Step::Step1 => vec![AssocGraph::new(GroupKind::TextBlock, references.iter().copied())],
        Step::Step2 => {
            let nodes: Vec<u32> = page
                .elements
                .iter()
                .filter(|e| e.kind == ElementKind::TextBlock || e.kind == ElementKind::Widget)
                .map(|e| e.id)
                .collect();
            [GroupKind::TextField, GroupKind::ChoiceField, GroupKind::ChoiceGroup]
                .into_iter()
                .map(|kind| AssocGraph::new(kind, nodes.iter().copied()))
                .collect()
        }
    };
    for v in votes {
        for (slot, &cand) in v.candidate_ids.iter().enumerate() {
            match step {
                Step::Step1 => graphs[0].vote(v.reference_id, cand, v.assoc[slot]),
                Step::Step2 => {
                    graphs[0].vote(v.reference_id, cand, v.field[slot] == FieldClass::Field);
                    graphs[1].vote(v.reference_id, cand, v.field[slot] == FieldClass::ChoiceField);
                    graphs[2].vote(v.reference_id, cand, v.assoc[slot]);
                }
            }
        }
    }
    for g in &mut graphs {
        g.derive_edges();
    }
    Ok(graphs)
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // the smaller index stays root so output order is stable
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.parent[hi] = lo;
        }
    }
}

/// Maximal connected node sets, singletons included, ordered by smallest
/// member. Edge endpoints outside `nodes` join the node set.
pub fn connected_components(nodes: &BTreeSet<u32>, edges: &BTreeSet<(u32, u32)>) -> Vec<BTreeSet<u32>> {
    let all: Vec<u32> = nodes
        .iter()
        .copied()
        .chain(edges.iter().flat_map(|&(a, b)| [a, b]))
        .collect::<BTreeSet<u32>>()
        .into_iter()
        .collect();
    let index = |id: u32| all.binary_search(&id).expect("node collected above");
    let mut uf = UnionFind::new(all.len());
    for &(a, b) in edges {
        uf.union(index(a), index(b));
    }
    let mut groups: BTreeMap<usize, BTreeSet<u32>> = BTreeMap::new();
    for (i, &id) in all.iter().enumerate() {
        groups.entry(uf.find(i)).or_default().insert(id);
    }
    groups.into_values().collect()
}

/// A predicted construct and its decomposition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructureGroup {
    pub kind: GroupKind,
    pub member_ids: BTreeSet<u32>,
    pub constituent_textrun_ids: BTreeSet<u32>,
    pub constituent_widget_ids: BTreeSet<u32>,
}

impl StructureGroup {
    pub fn constituents(&self) -> BTreeSet<u32> {
        self.constituent_textrun_ids
            .union(&self.constituent_widget_ids)
            .copied()
            .collect()
    }

    pub fn to_annotation(&self, group_id: u32) -> GroupAnnotation {
        let mut ann = GroupAnnotation::new(self.kind, group_id, self.constituents());
        ann.predicted = true;
        ann
    }
}

/// Turns the components of each graph into structures. `decomposition`
/// maps textblock ids to their textruns; ids absent from it stand for
/// themselves.
pub fn assemble(graphs: &[AssocGraph], page: &FormPage, decomposition: &Decomposition) -> Vec<StructureGroup> {
    let index = page.element_index();
    let kind_of = |id: u32| index.get(&id).map(|e| e.kind);
    let is_widget = |id: u32| kind_of(id) == Some(ElementKind::Widget);
    let components: Vec<(GroupKind, Vec<BTreeSet<u32>>)> = graphs
        .iter()
        .map(|g| (g.relation, connected_components(&g.nodes, &g.edges)))
        .collect();
    let choice_fields: Option<&Vec<BTreeSet<u32>>> = components
        .iter()
        .find(|(k, _)| *k == GroupKind::ChoiceField)
        .map(|(_, c)| c);

    let mut out = Vec::new();
    for (kind, comps) in &components {
        for comp in comps {
            let texts = comp.iter().filter(|&&id| !is_widget(id)).count();
            let widgets = comp.len() - texts;
            let keep = match kind {
                GroupKind::TextBlock => texts > 0,
                GroupKind::TextField | GroupKind::ChoiceField => texts >= 1 && widgets >= 1,
                GroupKind::ChoiceGroup => texts >= 2,
            };
            if !keep {
                continue;
            }
            let mut widget_ids: BTreeSet<u32> = comp.iter().copied().filter(|&id| is_widget(id)).collect();
            if *kind == GroupKind::ChoiceGroup {
                for cf in choice_fields.into_iter().flatten() {
                    if cf.iter().any(|id| !is_widget(*id) && comp.contains(id)) {
                        widget_ids.extend(cf.iter().copied().filter(|&id| is_widget(id)));
                    }
                }
            }
            let textrun_ids = comp
                .iter()
                .filter(|&&id| !is_widget(id))
                .flat_map(|id| match decomposition.get(id) {
                    Some(runs) => runs.clone(),
                    None => BTreeSet::from([*id]),
                })
                .collect();
            out.push(StructureGroup {
                kind: *kind,
                member_ids: comp.clone(),
                constituent_textrun_ids: textrun_ids,
                constituent_widget_ids: widget_ids,
            });
        }
    }
    out
}

/// Graph construction, components and assembly in one call.
pub fn group_page(
    page: &FormPage,
    votes: &[ReferenceVotes],
    step: Step,
    decomposition: &Decomposition,
) -> Result<Vec<StructureGroup>> {
    let graphs = build_graphs(page, votes, step)?;
    Ok(assemble(&graphs, page, decomposition))
}
