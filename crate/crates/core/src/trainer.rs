//! Losses, the training loop, evaluation during training and two-step
//! inference.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::doc_model::{write_atomic, FormPage, GroupKind};
use crate::error::{Error, Result};
use crate::evaluator::{strict_match, EvalGroup, EvalReport};
use crate::grouper::{group_page, ReferenceVotes, StructureGroup};
use crate::mmpan::{AssociationResult, ForwardVars, Model, ModelConfig, PrevSource};
use crate::netcore::{bce, ce_term, AdamConfig, Gradients, Graph, Scalar, Var};
use crate::patcher::{
    build_patch, build_patch_geometry, make_labels, reference_ids, Patch, PatchConfig, PatchLabels, Step,
};
use crate::synthgen::{assemble_step2_page, derive_step2, Decomposition};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
    /// Stop at the first evaluation where every listed kind reaches the given
    /// strict recall and precision. Empty means run to `max_steps`.
    pub stop_at: BTreeMap<GroupKind, f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 8,
            max_steps: 2000,
            eval_every: 100,
            seed: 0,
            checkpoint_dir: None,
            stop_at: BTreeMap::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive and finite");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1");
        }
        if self.stop_at.values().any(|v| !(0.0..=1.0).contains(v)) {
            return bad("stop_at thresholds lie in [0, 1]");
        }
        Ok(())
    }
}

/// Mean-reduced loss terms over the valid positions of a batch. Only the
/// terms of the step in question are nonzero.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub aux_bin: f64,
    pub seq_bin: f64,
    pub aux_field: f64,
    pub seq_field: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.aux_bin + self.seq_bin + self.aux_field + self.seq_field
    }
}

fn target(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Loss terms of a batch of results against their labels.
pub fn loss_terms(results: &[AssociationResult], labels: &[PatchLabels]) -> Result<LossTerms> {
    if results.len() != labels.len() {
        return Err(Error::shape("loss", "one label set per result"));
    }
    let mut sums = LossTerms::default();
    let mut count = 0usize;
    for (r, l) in results.iter().zip(labels) {
        if r.step != l.step {
            return Err(Error::shape("loss", "result and labels of different steps"));
        }
        let n = r.candidate_ids.len();
        match r.step {
            Step::Step1 => {
                if r.aux_tb_prob.len() != n || r.seq_tb_prob.len() != n || l.tb_assoc.len() < n {
                    return Err(Error::shape("loss", "valid masks not aligned"));
                }
                for i in 0..n {
                    let y = target(l.tb_assoc[i]);
                    sums.aux_bin += bce(r.aux_tb_prob[i] as f64, y);
                    sums.seq_bin += bce(r.seq_tb_prob[i] as f64, y);
                }
            }
            Step::Step2 => {
                let aligned = [r.aux_chgp_prob.len(), r.seq_chgp_prob.len()]
                    .iter()
                    .chain(&[r.aux_field_probs.len(), r.seq_field_probs.len()])
                    .all(|&len| len == n);
                if !aligned || l.chgp_assoc.len() < n || l.field_class.len() < n {
                    return Err(Error::shape("loss", "valid masks not aligned"));
                }
                for i in 0..n {
                    let y = target(l.chgp_assoc[i]);
                    let k = l.field_class[i].index();
                    sums.aux_bin += bce(r.aux_chgp_prob[i] as f64, y);
                    sums.seq_bin += bce(r.seq_chgp_prob[i] as f64, y);
                    sums.aux_field += ce_term(r.aux_field_probs[i][k] as f64);
                    sums.seq_field += ce_term(r.seq_field_probs[i][k] as f64);
                }
            }
        }
        count += n;
    }
    if count == 0 {
        return Err(Error::Train("loss over an empty valid set".into()));
    }
    let c = count as f64;
    Ok(LossTerms {
        aux_bin: sums.aux_bin / c,
        seq_bin: sums.seq_bin / c,
        aux_field: sums.aux_field / c,
        seq_field: sums.seq_field / c,
    })
}

fn loss_for(step: Step, results: &[AssociationResult], labels: &[PatchLabels]) -> Result<f64> {
    if results.iter().any(|r| r.step != step) {
        return Err(Error::shape("loss", "results of the other step"));
    }
    loss_terms(results, labels).map(|t| t.total())
}

/// Mean textblock BCE of the auxiliary branch plus that of the sequential
/// branch.
pub fn loss_step1(results: &[AssociationResult], labels: &[PatchLabels]) -> Result<f64> {
    loss_for(Step::Step1, results, labels)
}

/// Field cross entropy and choice-group BCE, each for both branches.
pub fn loss_step2(results: &[AssociationResult], labels: &[PatchLabels]) -> Result<f64> {
    loss_for(Step::Step2, results, labels)
}

/// Loss node of one sample, each position weighted by `scale`.
pub fn sample_loss<T: Scalar>(g: &mut Graph<'_, T>, vars: &ForwardVars, labels: &PatchLabels, scale: T) -> Result<Var> {
    let n = vars.seq_bin.len();
    let bin_targets: Vec<Option<T>> = match labels.step {
        Step::Step1 => &labels.tb_assoc,
        Step::Step2 => &labels.chgp_assoc,
    }[..n]
        .iter()
        .map(|&b| T::from_f64(target(b)))
        .collect();
    let mut parts = Vec::with_capacity(4);
    for bins in [&vars.aux_bin, &vars.seq_bin] {
        let p = g.stack(bins)?;
        parts.push(g.bce_sum(p, &bin_targets, scale)?);
    }
    if labels.step == Step::Step2 {
        let classes: Vec<Option<usize>> = labels.field_class[..n].iter().map(|c| Some(c.index())).collect();
        for fields in [&vars.aux_field, &vars.seq_field] {
            let p = g.stack(fields)?;
            parts.push(g.ce_sum(p, &classes, scale)?);
        }
    }
    g.sum(&parts)
}

/// Pages prepared for one step: the view the model reads, the gold page the
/// evaluation compares against, and the samples (one per reference).
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub step: Step,
    pub views: Vec<FormPage>,
    pub gold: Vec<FormPage>,
    pub decompositions: Vec<Decomposition>,
    /// `(page index, reference id)` ordered by page id, then reference id.
    pub samples: Vec<(usize, u32)>,
}

impl TrainingData {
    pub fn new(pages: &[FormPage], step: Step) -> Result<TrainingData> {
        let mut gold: Vec<FormPage> = pages.to_vec();
        gold.sort_by(|a, b| a.page_id.cmp(&b.page_id));
        let mut views = Vec::with_capacity(gold.len());
        let mut decompositions = Vec::with_capacity(gold.len());
        for page in &gold {
            if page.has_text_blocks() || page.annotations_of(GroupKind::TextBlock).next().is_none() {
                return Err(Error::Train(format!(
                    "step {} needs pages of textruns and widgets with textblock annotations; page {} has none",
                    step.number(),
                    page.page_id
                )));
            }
            match step {
                Step::Step1 => {
                    views.push(page.clone());
                    decompositions.push(Decomposition::new());
                }
                Step::Step2 => {
                    let (view, d) = derive_step2(page).map_err(|e| {
                        Error::Train(format!("step 2 cannot derive textblocks of page {}: {e}", page.page_id))
                    })?;
                    views.push(view);
                    decompositions.push(d);
                }
            }
        }
        let samples: Vec<(usize, u32)> = views
            .iter()
            .enumerate()
            .flat_map(|(i, v)| reference_ids(v, step).into_iter().map(move |r| (i, r)))
            .collect();
        if samples.is_empty() {
            return Err(Error::Train(format!("step {} has no patches to train on", step.number())));
        }
        Ok(TrainingData {
            step,
            views,
            gold,
            decompositions,
            samples,
        })
    }

    pub fn patch_and_labels(&self, sample: usize, cfg: &PatchConfig) -> Result<(Patch, PatchLabels)> {
        let (page, reference) = self.samples[sample];
        let view = &self.views[page];
        let patch = build_patch(view, reference, cfg)?;
        let labels = make_labels(view, &patch, self.step)?;
        Ok((patch, labels))
    }
}

/// Summed loss and gradients of the pooled-mean loss over `batch` (sample
/// indices), with teacher forcing. Samples run in parallel; gradients are
/// reduced in batch order.
pub fn batch_gradients(model: &Model, data: &TrainingData, batch: &[usize]) -> Result<(f32, Gradients<f32>)> {
    let cfg = model.config().patch_config();
    let prepared: Vec<(Patch, PatchLabels)> = batch
        .par_iter()
        .map(|&s| data.patch_and_labels(s, &cfg))
        .collect::<Result<_>>()?;
    let valid: usize = prepared.iter().map(|(p, _)| p.num_valid()).sum();
    if valid == 0 {
        return Err(Error::Train("loss over an empty valid set".into()));
    }
    let scale = 1.0 / valid as f32;
    let per_sample: Vec<(f32, Gradients<f32>)> = prepared
        .par_iter()
        .zip(batch.par_iter())
        .map(|((patch, labels), &s)| {
            let page = &data.views[data.samples[s].0];
            let mut g = Graph::new(model.params());
            let vars = model.forward_graph(&mut g, page, patch, PrevSource::Labels(labels))?;
            let loss = sample_loss(&mut g, &vars, labels, scale)?;
            g.check_finite()?;
            let grads = g.backward(loss)?;
            Ok((g.scalar(loss), grads))
        })
        .collect::<Result<_>>()?;
    let mut total = 0f32;
    let mut grads = Gradients::empty(model.params().len());
    for (l, g) in &per_sample {
        total += l;
        grads.merge(g);
    }
    Ok((total, grads))
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    /// Mean training loss since the previous record.
    pub loss: f64,
    pub recall: BTreeMap<GroupKind, f64>,
    pub precision: BTreeMap<GroupKind, f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub losses: Vec<f32>,
    pub metrics: Vec<MetricsRecord>,
    pub checkpoints: Vec<PathBuf>,
    /// Step at which the `stop_at` thresholds were met.
    pub stopped_at: Option<usize>,
}

/// Kinds the model of `step` produces.
pub fn step_kinds(step: Step) -> &'static [GroupKind] {
    match step {
        Step::Step1 => &[GroupKind::TextBlock],
        Step::Step2 => &[GroupKind::TextField, GroupKind::ChoiceField, GroupKind::ChoiceGroup],
    }
}

fn jsonl<T: Serialize>(rows: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r).expect("record serializes");
        out.push(b'\n');
    }
    out
}

#[derive(Serialize)]
struct LossLine {
    step: usize,
    loss: f32,
}

/// Trains a fresh model of `model_cfg` (initialised from `train_cfg.seed`)
/// on every reference of `pages`.
pub fn train(pages: &[FormPage], model_cfg: &ModelConfig, train_cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_cfg.validate()?;
    let data = TrainingData::new(pages, model_cfg.step)?;
    let model = Model::new(model_cfg.clone(), train_cfg.seed)?;
    train_model(model, &data, train_cfg)
}

/// Continues training `model` on prepared data.
pub fn train_model(mut model: Model, data: &TrainingData, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if model.config().step != data.step {
        return Err(Error::Config("model and data are for different steps".into()));
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut losses = Vec::with_capacity(cfg.max_steps);
    let mut metrics = Vec::new();
    let mut checkpoints = Vec::new();
    let mut stopped_at = None;
    let mut window = Vec::new();

    for step in 1..=cfg.max_steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order = (0..data.samples.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let (loss, grads) = batch_gradients(&model, data, &batch)
            .map_err(|e| Error::Train(format!("step {step}: {e}")))?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {step}")));
        }
        if let Some(name) = grads.first_non_finite(model.params()) {
            return Err(Error::NonFinite(format!("gradient of {name} at step {step}")));
        }
        let store = model.params_mut();
        store.zero_grads();
        store.accumulate(&grads);
        store.adam_step(&adam, step as u64)?;
        if let Some((_, p)) = store.iter().find(|(_, p)| !p.value.is_finite()) {
            return Err(Error::NonFinite(format!("parameter {} after step {step}", p.name)));
        }
        losses.push(loss);
        window.push(loss as f64);

        let last = step == cfg.max_steps;
        if step % cfg.eval_every == 0 {
            let report = evaluate_model(&model, data)?;
            let kinds = step_kinds(data.step);
            let record = MetricsRecord {
                step,
                loss: window.iter().sum::<f64>() / window.len() as f64,
                recall: kinds.iter().map(|&k| (k, report.get(k).recall)).collect(),
                precision: kinds.iter().map(|&k| (k, report.get(k).precision)).collect(),
            };
            window.clear();
            log::info!(
                "step {step}: loss {:.4} recall {:?} precision {:?}",
                record.loss,
                record.recall,
                record.precision
            );
            metrics.push(record);
            if !cfg.stop_at.is_empty()
                && cfg
                    .stop_at
                    .iter()
                    .all(|(&k, &v)| report.get(k).recall >= v && report.get(k).precision >= v)
            {
                stopped_at = Some(step);
            }
        }
        if let Some(dir) = &cfg.checkpoint_dir {
            if step % cfg.eval_every == 0 || last || stopped_at.is_some() {
                let path = dir.join(format!("step{step}.ckpt"));
                model.save_checkpoint(&path)?;
                checkpoints.push(path);
                write_atomic(dir.join("metrics.jsonl"), &jsonl(&metrics))?;
                let lines: Vec<LossLine> = losses
                    .iter()
                    .enumerate()
                    .map(|(i, &loss)| LossLine { step: i + 1, loss })
                    .collect();
                write_atomic(dir.join("loss.jsonl"), &jsonl(&lines))?;
            }
        }
        if stopped_at.is_some() {
            break;
        }
    }
    Ok(TrainOutcome {
        model,
        losses,
        metrics,
        checkpoints,
        stopped_at,
    })
}

/// Strict scores of the model's own (self-fed) predictions on the training
/// pages, for the kinds of its step. Second-step models read the tagged
/// textblocks.
pub fn evaluate_model(model: &Model, data: &TrainingData) -> Result<EvalReport> {
    let reports: Vec<EvalReport> = (0..data.views.len())
        .into_par_iter()
        .map(|i| {
            let view = &data.views[i];
            let votes = model.associate_page(view)?;
            let groups = group_page(view, &votes, data.step, &data.decompositions[i])?;
            Ok(score_groups(&data.gold[i], &groups, step_kinds(data.step)))
        })
        .collect::<Result<_>>()?;
    Ok(reports.iter().fold(EvalReport::default(), |acc, r| acc.merge(r)))
}

/// Strict report of `groups` against the gold annotations of `kinds`.
pub fn score_groups(gold: &FormPage, groups: &[StructureGroup], kinds: &[GroupKind]) -> EvalReport {
    let predicted: Vec<EvalGroup> = groups
        .iter()
        .filter(|g| kinds.contains(&g.kind))
        .map(|g| EvalGroup::from_structure(gold, g))
        .collect();
    let tagged: Vec<EvalGroup> = gold
        .annotations
        .iter()
        .filter(|a| kinds.contains(&a.kind))
        .map(|a| EvalGroup::from_annotation(gold, a))
        .collect();
    strict_match(&predicted, &tagged)
}

/// Something that votes on every reference of a page.
pub trait Associator: Sync {
    fn step(&self) -> Step;

    fn associate_page(&self, page: &FormPage) -> Result<Vec<ReferenceVotes>>;
}

impl Associator for Model {
    fn step(&self) -> Step {
        self.config().step
    }

    /// Self-fed forward passes over every reference.
    fn associate_page(&self, page: &FormPage) -> Result<Vec<ReferenceVotes>> {
        let cfg = self.config().patch_config();
        reference_ids(page, self.config().step)
            .into_par_iter()
            .map(|r| {
                let patch = build_patch(page, r, &cfg)?;
                let result = self.forward(page, &patch, PrevSource::SelfFeed)?;
                Ok(ReferenceVotes::from_result(&result))
            })
            .collect()
    }
}

/// Emits the labels of the gold annotations as its votes.
#[derive(Debug, Clone)]
pub struct OracleAssociator {
    step: Step,
    cfg: PatchConfig,
    views: HashMap<String, FormPage>,
}

impl OracleAssociator {
    /// `gold` holds annotated pages of textruns and widgets.
    pub fn new(step: Step, cfg: PatchConfig, gold: &[FormPage]) -> Result<OracleAssociator> {
        let views = gold
            .iter()
            .map(|p| {
                let view = match step {
                    Step::Step1 => p.clone(),
                    Step::Step2 => derive_step2(p)?.0,
                };
                Ok((p.page_id.clone(), view))
            })
            .collect::<Result<_>>()?;
        Ok(OracleAssociator { step, cfg, views })
    }
}

impl Associator for OracleAssociator {
    fn step(&self) -> Step {
        self.step
    }

    fn associate_page(&self, page: &FormPage) -> Result<Vec<ReferenceVotes>> {
        let gold = self
            .views
            .get(&page.page_id)
            .ok_or_else(|| Error::Config(format!("oracle has no gold page {}", page.page_id)))?;
        if gold.elements != page.elements {
            return Err(Error::Config(format!(
                "oracle needs the tagged elements of page {}",
                page.page_id
            )));
        }
        reference_ids(gold, self.step)
            .into_iter()
            .map(|r| {
                let patch = build_patch_geometry(gold, r, &self.cfg)?;
                let labels = make_labels(gold, &patch, self.step)?;
                Ok(ReferenceVotes::from_labels(&patch, &labels))
            })
            .collect()
    }
}

/// Predicted structures of a page and the page carrying them as
/// annotations.
#[derive(Debug, Clone)]
pub struct InferredPage {
    pub groups: Vec<StructureGroup>,
    pub page: FormPage,
}

/// Textblocks from the first-step associator, then fields, choice fields
/// and choice groups from the second over those predicted textblocks and
/// the page's widgets.
pub fn infer_page(
    page: &FormPage,
    step1: &dyn Associator,
    step2: Option<&dyn Associator>,
) -> Result<InferredPage> {
    if step1.step() != Step::Step1 || step2.is_some_and(|a| a.step() != Step::Step2) {
        return Err(Error::Config("associators given for the wrong steps".into()));
    }
    if page.has_text_blocks() {
        return Err(Error::InvalidPage {
            page_id: page.page_id.clone(),
            field: "elements".into(),
            message: "inference reads pages of textruns and widgets".into(),
        });
    }
    let votes = step1.associate_page(page)?;
    let mut groups = group_page(page, &votes, Step::Step1, &Decomposition::new())?;
    if let Some(step2) = step2 {
        let blocks: Vec<BTreeSet<u32>> = groups.iter().map(|g| g.constituent_textrun_ids.clone()).collect();
        let (view, decomposition) = assemble_step2_page(page, &blocks)?;
        let votes = step2.associate_page(&view)?;
        groups.extend(group_page(&view, &votes, Step::Step2, &decomposition)?);
    }
    let mut out = page.clone();
    out.annotations = groups
        .iter()
        .enumerate()
        .map(|(i, g)| g.to_annotation(i as u32 + 1))
        .collect();
    Ok(InferredPage { groups, page: out })
}
