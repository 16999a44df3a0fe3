mod common;

use std::collections::{BTreeMap, BTreeSet};

use formgraph::doc_model::{BBox, Element, FormPage, GroupKind};
use formgraph::grouper::{assemble, build_graphs, connected_components, group_page, AssocGraph, ReferenceVotes};
use formgraph::mmpan::ModelConfig;
use formgraph::patcher::{build_patch_geometry, make_labels, reference_ids, FieldClass, PatchConfig, Step};
use formgraph::synthgen::{derive_step2, generate_pages, Decomposition, GenConfig};
use formgraph::Error;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::closure_components;

#[test]
fn components_match_transitive_closure_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let n = rng.gen_range(1..=20);
        let m = rng.gen_range(0..=n * 2);
        let edges: Vec<(usize, usize)> = (0..m)
            .map(|_| (rng.gen_range(0..n), rng.gen_range(0..n)))
            .filter(|(a, b)| a != b)
            .collect();
        let nodes: BTreeSet<u32> = (0..n as u32).collect();
        let edge_set: BTreeSet<(u32, u32)> = edges
            .iter()
            .map(|&(a, b)| (a.min(b) as u32, a.max(b) as u32))
            .collect();
        assert_eq!(connected_components(&nodes, &edge_set), closure_components(n, &edges));
    }
}

#[test]
fn component_examples() {
    let nodes = BTreeSet::from([1, 2, 3, 4]);
    assert_eq!(
        connected_components(&nodes, &BTreeSet::from([(1, 2), (2, 3)])),
        vec![BTreeSet::from([1, 2, 3]), BTreeSet::from([4])]
    );
    let singles: Vec<BTreeSet<u32>> = nodes.iter().map(|&n| BTreeSet::from([n])).collect();
    assert_eq!(connected_components(&nodes, &BTreeSet::new()), singles);
}

proptest! {
    #[test]
    fn components_partition_nodes(n in 1u32..30, raw in proptest::collection::vec((0u32..30, 0u32..30), 0..40)) {
        let nodes: BTreeSet<u32> = (0..n).collect();
        let edges: BTreeSet<(u32, u32)> = raw
            .into_iter()
            .map(|(a, b)| (a % n, b % n))
            .filter(|(a, b)| a != b)
            .map(|(a, b)| (a.min(b), a.max(b)))
            .collect();
        let comps = connected_components(&nodes, &edges);
        let total: usize = comps.iter().map(|c| c.len()).sum();
        let union: BTreeSet<u32> = comps.iter().flatten().copied().collect();
        prop_assert_eq!(total, nodes.len());
        prop_assert_eq!(union, nodes);
        let firsts: Vec<u32> = comps.iter().map(|c| *c.first().unwrap()).collect();
        prop_assert!(firsts.windows(2).all(|w| w[0] < w[1]));
        for &(a, b) in &edges {
            prop_assert!(comps.iter().any(|c| c.contains(&a) && c.contains(&b)));
        }
    }
}

fn run(id: u32, x: f64) -> Element {
    Element::text_run(id, BBox::new(x, 0.0, 10.0, 10.0), vec![format!("w{id}")])
}

fn step1_page(ids: &[u32]) -> FormPage {
    FormPage {
        page_id: "p".into(),
        width: 500.0,
        height: 100.0,
        elements: ids.iter().map(|&i| run(i, i as f64 * 20.0)).collect(),
        annotations: Vec::new(),
    }
}

fn votes1(reference: u32, pairs: &[(u32, bool)]) -> ReferenceVotes {
    ReferenceVotes {
        reference_id: reference,
        step: Step::Step1,
        candidate_ids: pairs.iter().map(|p| p.0).collect(),
        assoc: pairs.iter().map(|p| p.1).collect(),
        field: Vec::new(),
    }
}

#[test]
fn mutual_votes_make_an_edge() {
    let page = step1_page(&[1, 2]);
    let votes = [votes1(1, &[(1, true), (2, true)]), votes1(2, &[(2, true), (1, true)])];
    let g = &build_graphs(&page, &votes, Step::Step1).unwrap()[0];
    assert_eq!(g.edges, BTreeSet::from([(1, 2)]));
}

#[test]
fn one_sided_vote_makes_no_edge() {
    let page = step1_page(&[1, 2]);
    let votes = [votes1(1, &[(1, true), (2, true)]), votes1(2, &[(2, true), (1, false)])];
    let graphs = build_graphs(&page, &votes, Step::Step1).unwrap();
    assert!(graphs[0].edges.is_empty());
    let groups = assemble(&graphs, &page, &Decomposition::new());
    assert_eq!(groups.len(), 2, "singleton textblocks");
    assert!(groups.iter().all(|g| g.kind == GroupKind::TextBlock && g.member_ids.len() == 1));
}

#[test]
fn graph_is_independent_of_result_order() {
    let page = step1_page(&[1, 2, 3]);
    let mut votes = vec![
        votes1(1, &[(1, true), (2, true), (3, false)]),
        votes1(2, &[(2, true), (1, true), (3, true)]),
        votes1(3, &[(3, true), (2, true), (1, true)]),
    ];
    let a = build_graphs(&page, &votes, Step::Step1).unwrap();
    votes.reverse();
    let b = build_graphs(&page, &votes, Step::Step1).unwrap();
    assert_eq!(a, b);
    assert_eq!(a[0].edges, BTreeSet::from([(2, 3), (1, 2)]));
}

#[test]
fn missing_or_repeated_references_are_errors() {
    let page = step1_page(&[1, 2]);
    let err = build_graphs(&page, &[votes1(1, &[(1, true)])], Step::Step1).unwrap_err();
    assert!(matches!(err, Error::ReferenceCoverage { element_id: 2, .. }), "{err}");
    let twice = [votes1(1, &[(1, true)]), votes1(1, &[(1, true)]), votes1(2, &[(2, true)])];
    assert!(matches!(
        build_graphs(&page, &twice, Step::Step1),
        Err(Error::ReferenceCoverage { element_id: 1, .. })
    ));
}

/// Second-step page: textblocks 10, 11, 12, 13 and widgets 20, 21, 22.
fn step2_page() -> (FormPage, Decomposition) {
    let tb = |id: u32, x: f64| Element::text_block(id, BBox::new(x, 0.0, 30.0, 10.0), vec![format!("t{id}")]);
    let w = |id: u32, x: f64| Element::widget(id, BBox::new(x, 20.0, 10.0, 10.0));
    let page = FormPage {
        page_id: "q".into(),
        width: 500.0,
        height: 100.0,
        elements: vec![
            tb(10, 0.0),
            tb(11, 50.0),
            tb(12, 100.0),
            tb(13, 150.0),
            w(20, 50.0),
            w(21, 100.0),
            w(22, 120.0),
        ],
        annotations: Vec::new(),
    };
    let decomposition = (10..14).map(|t| (t, BTreeSet::from([t - 9]))).collect();
    (page, decomposition)
}

fn votes2(reference: u32, rows: &[(u32, FieldClass, bool)]) -> ReferenceVotes {
    ReferenceVotes {
        reference_id: reference,
        step: Step::Step2,
        candidate_ids: rows.iter().map(|r| r.0).collect(),
        field: rows.iter().map(|r| r.1).collect(),
        assoc: rows.iter().map(|r| r.2).collect(),
    }
}

fn quiet(reference: u32) -> ReferenceVotes {
    votes2(reference, &[(reference, FieldClass::None, false)])
}

#[test]
fn widget_edge_needs_only_the_textblock_vote() {
    let (page, decomposition) = step2_page();
    let votes = [
        votes2(10, &[(10, FieldClass::Field, false), (20, FieldClass::Field, false)]),
        quiet(11),
        quiet(12),
        quiet(13),
    ];
    let graphs = build_graphs(&page, &votes, Step::Step2).unwrap();
    assert_eq!(graphs[0].relation, GroupKind::TextField);
    assert_eq!(graphs[0].edges, BTreeSet::from([(10, 20)]));
    let groups = assemble(&graphs, &page, &decomposition);
    assert_eq!(groups.len(), 1);
    assert_eq!(groups[0].kind, GroupKind::TextField);
    assert_eq!(groups[0].constituent_textrun_ids, BTreeSet::from([1]));
    assert_eq!(groups[0].constituent_widget_ids, BTreeSet::from([20]));
}

#[test]
fn field_component_without_widget_emits_nothing() {
    let (page, decomposition) = step2_page();
    let votes = [
        votes2(10, &[(10, FieldClass::Field, false), (11, FieldClass::Field, false)]),
        votes2(11, &[(11, FieldClass::Field, false), (10, FieldClass::Field, false)]),
        quiet(12),
        quiet(13),
    ];
    let graphs = build_graphs(&page, &votes, Step::Step2).unwrap();
    assert_eq!(graphs[0].edges, BTreeSet::from([(10, 11)]));
    assert!(assemble(&graphs, &page, &decomposition).is_empty());
}

#[test]
fn choice_field_with_two_widgets() {
    let (page, decomposition) = step2_page();
    let votes = [
        quiet(10),
        votes2(
            11,
            &[
                (11, FieldClass::ChoiceField, false),
                (20, FieldClass::ChoiceField, false),
                (21, FieldClass::ChoiceField, false),
            ],
        ),
        quiet(12),
        quiet(13),
    ];
    let groups = assemble(&build_graphs(&page, &votes, Step::Step2).unwrap(), &page, &decomposition);
    assert_eq!(groups.len(), 1);
    assert_eq!(groups[0].kind, GroupKind::ChoiceField);
    assert_eq!(groups[0].member_ids, BTreeSet::from([11, 20, 21]));
    assert_eq!(groups[0].constituent_textrun_ids, BTreeSet::from([2]));
}

#[test]
fn choice_group_absorbs_choice_field_widgets() {
    let (page, decomposition) = step2_page();
    use FieldClass::{ChoiceField as C, None as N};
    // title 10; choices 11 (widget 20) and 12 (widget 21); 13 unrelated
    let votes = [
        votes2(10, &[(10, N, true), (11, N, true), (12, N, true)]),
        votes2(11, &[(11, C, true), (20, C, false), (10, N, true), (12, N, true)]),
        votes2(12, &[(12, C, true), (21, C, false), (10, N, true), (11, N, true)]),
        quiet(13),
    ];
    let graphs = build_graphs(&page, &votes, Step::Step2).unwrap();
    let groups = assemble(&graphs, &page, &decomposition);
    let cg: Vec<_> = groups.iter().filter(|g| g.kind == GroupKind::ChoiceGroup).collect();
    assert_eq!(cg.len(), 1);
    assert_eq!(cg[0].member_ids, BTreeSet::from([10, 11, 12]));
    assert_eq!(cg[0].constituent_widget_ids, BTreeSet::from([20, 21]));
    assert_eq!(cg[0].constituent_textrun_ids, BTreeSet::from([1, 2, 3]));
    assert_eq!(groups.iter().filter(|g| g.kind == GroupKind::ChoiceField).count(), 2);
}

#[test]
fn disagreeing_relation_types_make_no_edge() {
    let (page, _) = step2_page();
    let votes = [
        votes2(10, &[(10, FieldClass::None, false), (11, FieldClass::Field, false)]),
        votes2(11, &[(11, FieldClass::None, false), (10, FieldClass::ChoiceField, false)]),
        quiet(12),
        quiet(13),
    ];
    let graphs = build_graphs(&page, &votes, Step::Step2).unwrap();
    assert!(graphs.iter().all(|g| g.edges.is_empty()));
}

#[test]
fn self_votes_never_become_edges() {
    let mut g = AssocGraph::new(GroupKind::TextBlock, [1]);
    g.vote(1, 1, true);
    g.derive_edges();
    assert!(g.edges.is_empty());
}

fn desk(step: Step) -> PatchConfig {
    ModelConfig::preset("desk", step).unwrap().patch_config()
}

fn gold_sets(page: &FormPage, kinds: &[GroupKind]) -> BTreeMap<GroupKind, BTreeSet<BTreeSet<u32>>> {
    let mut out: BTreeMap<GroupKind, BTreeSet<BTreeSet<u32>>> = BTreeMap::new();
    for a in page.annotations.iter().filter(|a| kinds.contains(&a.kind)) {
        out.entry(a.kind).or_default().insert(a.member_ids.clone());
    }
    out
}

#[test]
fn label_votes_reproduce_annotations_on_each_step() {
    let pages = generate_pages(&GenConfig {
        pages: 12,
        seed: 3,
        ..GenConfig::default()
    })
    .unwrap();
    for page in &pages {
        let cfg1 = desk(Step::Step1);
        let votes: Vec<_> = reference_ids(page, Step::Step1)
            .into_iter()
            .map(|r| {
                let p = build_patch_geometry(page, r, &cfg1).unwrap();
                ReferenceVotes::from_labels(&p, &make_labels(page, &p, Step::Step1).unwrap())
            })
            .collect();
        let groups = group_page(page, &votes, Step::Step1, &Decomposition::new()).unwrap();
        let mut got: BTreeMap<GroupKind, BTreeSet<BTreeSet<u32>>> = BTreeMap::new();
        for g in &groups {
            got.entry(g.kind).or_default().insert(g.constituents());
        }
        assert_eq!(got, gold_sets(page, &[GroupKind::TextBlock]));

        let (view, decomposition) = derive_step2(page).unwrap();
        let cfg2 = desk(Step::Step2);
        let votes: Vec<_> = reference_ids(&view, Step::Step2)
            .into_iter()
            .map(|r| {
                let p = build_patch_geometry(&view, r, &cfg2).unwrap();
                ReferenceVotes::from_labels(&p, &make_labels(&view, &p, Step::Step2).unwrap())
            })
            .collect();
        let groups = group_page(&view, &votes, Step::Step2, &decomposition).unwrap();
        let mut got: BTreeMap<GroupKind, BTreeSet<BTreeSet<u32>>> = BTreeMap::new();
        for g in &groups {
            got.entry(g.kind).or_default().insert(g.constituents());
        }
        let kinds = [GroupKind::TextField, GroupKind::ChoiceField, GroupKind::ChoiceGroup];
        assert_eq!(got, gold_sets(page, &kinds), "page {}", page.page_id);
        assert_eq!(groups.len(), page.annotations.iter().filter(|a| kinds.contains(&a.kind)).count());
    }
}

#[test]
fn shuffled_votes_group_identically() {
    let pages = generate_pages(&GenConfig {
        pages: 2,
        seed: 9,
        ..GenConfig::default()
    })
    .unwrap();
    let page = &pages[0];
    let cfg = desk(Step::Step1);
    let mut votes: Vec<_> = reference_ids(page, Step::Step1)
        .into_iter()
        .map(|r| {
            let p = build_patch_geometry(page, r, &cfg).unwrap();
            ReferenceVotes::from_labels(&p, &make_labels(page, &p, Step::Step1).unwrap())
        })
        .collect();
    let a = group_page(page, &votes, Step::Step1, &Decomposition::new()).unwrap();
    votes.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
    let b = group_page(page, &votes, Step::Step1, &Decomposition::new()).unwrap();
    assert_eq!(a, b);
}
