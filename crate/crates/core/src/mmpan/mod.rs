//! The multi-modal patch association network.
//!
//! For every candidate of a patch the network combines
//!
//! * an image encoder (convolution blocks over the candidate's raster) with an
//!   auxiliary fully connected head,
//! * a text encoder (LSTM over hashed word embeddings),
//! * a bidirectional context encoder over the candidate sequence whose
//!   outputs double as per-candidate fusion filters and as attention memory,
//! * a sequential decoder that predicts each candidate's association
//!   conditioned on the previous prediction.

mod checkpoint;
mod text;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::doc_model::{Element, FormPage, MAX_WORDS};
use crate::error::{Error, Result};
use crate::netcore::kernels::pool_extent;
use crate::netcore::{
    Attention, BiLstm, Dense, Graph, Init, Lstm, ParamId, ParamStore, Scalar, Tensor,
    Var,
};
use crate::patcher::{FieldClass, Patch, PatchConfig, PatchLabels, Step, CHANNELS, DEFAULT_ROW_EPS};

pub use checkpoint::CHECKPOINT_MAGIC;
pub use text::embed_word;

/// `layers` same-padded convolutions of `filters` channels and odd `kernel`
/// size, followed by one max pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvBlock {
    pub layers: usize,
    pub filters: usize,
    pub kernel: usize,
}

const fn block(layers: usize, filters: usize, kernel: usize) -> ConvBlock {
    ConvBlock {
        layers,
        filters,
        kernel,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub preset_name: String,
    pub step: Step,
    pub k1: usize,
    pub k2: usize,
    pub height: usize,
    pub width: usize,
    pub conv_blocks: Vec<ConvBlock>,
    pub fc_c: usize,
    pub text_embed_dim: usize,
    pub te_hidden: usize,
    pub te_out: usize,
    pub ce_hidden: usize,
    pub sam_hidden: usize,
    pub attn_size: usize,
    #[serde(default = "default_row_eps")]
    pub row_eps: f64,
}

fn default_row_eps() -> f64 {
    DEFAULT_ROW_EPS
}

pub const PRESETS: [&str; 2] = ["paper", "desk"];

impl ModelConfig {
    /// `"paper"`: the full-size network. `"desk"`: a small network that
    /// trains on a CPU in minutes. Both use `(k1, k2) = (6, 4)` for the
    /// first step and `(10, 4)` for the second.
    pub fn preset(name: &str, step: Step) -> Result<ModelConfig> {
        let (k1, k2) = match step {
            Step::Step1 => (6, 4),
            Step::Step2 => (10, 4),
        };
        let cfg = match name {
            "paper" => ModelConfig {
                preset_name: name.into(),
                step,
                k1,
                k2,
                height: 160,
                width: 640,
                conv_blocks: vec![
                    block(2, 32, 5),
                    block(2, 64, 3),
                    block(3, 96, 3),
                    block(3, 128, 3),
                    block(3, 256, 3),
                ],
                fc_c: 1024,
                text_embed_dim: 100,
                te_hidden: 100,
                te_out: 100,
                ce_hidden: 128,
                sam_hidden: 1000,
                attn_size: 500,
                row_eps: DEFAULT_ROW_EPS,
            },
            "desk" => ModelConfig {
                preset_name: name.into(),
                step,
                k1,
                k2,
                height: 40,
                width: 160,
                conv_blocks: vec![block(1, 8, 5), block(1, 16, 3), block(1, 16, 3), block(1, 32, 3)],
                fc_c: 64,
                text_embed_dim: 16,
                te_hidden: 16,
                te_out: 16,
                ce_hidden: 16,
                sam_hidden: 64,
                attn_size: 32,
                row_eps: DEFAULT_ROW_EPS,
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?}; expected one of {PRESETS:?}"
                )))
            }
        };
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let Some(last) = self.conv_blocks.last() else {
            return bad("at least one convolution block is required".into());
        };
        if self.conv_blocks.iter().any(|b| b.layers == 0 || b.filters == 0 || b.kernel % 2 == 0) {
            return bad("convolution blocks need layers ≥ 1, filters ≥ 1 and an odd kernel".into());
        }
        if 2 * self.ce_hidden != last.filters {
            return bad(format!(
                "2·ce_hidden ({}) must equal the final filter count ({})",
                2 * self.ce_hidden,
                last.filters
            ));
        }
        let halvings = self.conv_blocks.len() as u32;
        if self.height >> halvings == 0 || self.width >> halvings == 0 {
            return bad(format!(
                "raster {}×{} cannot be halved {} times",
                self.height, self.width, halvings
            ));
        }
        if self.k1 == 0 {
            return bad("k1 must be at least 1".into());
        }
        for (name, v) in [
            ("fc_c", self.fc_c),
            ("text_embed_dim", self.text_embed_dim),
            ("te_hidden", self.te_hidden),
            ("te_out", self.te_out),
            ("sam_hidden", self.sam_hidden),
            ("attn_size", self.attn_size),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(self.row_eps > 0.0) {
            return bad("row_eps must be positive".into());
        }
        Ok(())
    }

    /// `[H′, W′, C′]` of the image-encoder output.
    pub fn feature_shape(&self) -> [usize; 3] {
        let (mut h, mut w) = (self.height, self.width);
        for _ in &self.conv_blocks {
            h = pool_extent(h).0;
            w = pool_extent(w).0;
        }
        [h, w, self.conv_blocks.last().map_or(0, |b| b.filters)]
    }

    /// Length of a fused vector, `H′·W′`.
    pub fn fused_dim(&self) -> usize {
        let [h, w, _] = self.feature_shape();
        h * w
    }

    /// Width of the previous-prediction input of the decoder.
    pub fn prev_dim(&self) -> usize {
        match self.step {
            Step::Step1 => 1,
            Step::Step2 => 4,
        }
    }

    pub fn slots(&self) -> usize {
        self.k1 + self.k2
    }

    pub fn patch_config(&self) -> PatchConfig {
        PatchConfig {
            k1: self.k1,
            k2: self.k2,
            height: self.height,
            width: self.width,
            row_eps: self.row_eps,
        }
    }
}

/// Where the decoder's previous-prediction input comes from.
#[derive(Debug, Clone, Copy)]
pub enum PrevSource<'a> {
    /// Teacher forcing from ground-truth labels.
    Labels(&'a PatchLabels),
    /// The model's own thresholded or probabilistic outputs.
    SelfFeed,
}

#[derive(Debug, Clone)]
struct ConvLayer {
    w: ParamId,
    b: ParamId,
}

/// Parameter handles of every layer.
#[derive(Debug, Clone)]
struct Layers {
    convs: Vec<Vec<ConvLayer>>,
    aux_fc1: Dense,
    aux_fc2: Dense,
    aux_bin: Dense,
    aux_field: Option<Dense>,
    te_lstm: Lstm,
    te_fc: Dense,
    ce: BiLstm,
    sam: Lstm,
    attn: Attention,
    seq_bin: Dense,
    seq_field: Option<Dense>,
}

/// Graph nodes of one forward pass, one entry per valid candidate. `*_bin`
/// holds the sigmoid outputs (textblock association for the first step,
/// choice-group association for the second); `*_field` holds the 3-way
/// softmax outputs and is empty for the first step.
#[derive(Debug, Clone, Default)]
pub struct ForwardVars {
    pub aux_bin: Vec<Var>,
    pub aux_field: Vec<Var>,
    pub seq_bin: Vec<Var>,
    pub seq_field: Vec<Var>,
}

/// Per-candidate outputs for one patch. Vectors cover the valid candidates
/// in patch order; fields of the other step are empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssociationResult {
    pub reference_id: u32,
    pub step: Step,
    pub candidate_ids: Vec<u32>,
    pub valid_mask: Vec<bool>,
    pub aux_tb_prob: Vec<f32>,
    pub aux_field_probs: Vec<[f32; 3]>,
    pub aux_chgp_prob: Vec<f32>,
    pub seq_tb_prob: Vec<f32>,
    pub seq_field_probs: Vec<[f32; 3]>,
    pub seq_chgp_prob: Vec<f32>,
}

/// Threshold for sigmoid heads.
pub const DECISION_THRESHOLD: f32 = 0.5;

/// Index of the first maximum.
pub fn argmax3<T: PartialOrd + Copy>(p: &[T]) -> usize {
    let mut best = 0;
    for i in 1..p.len() {
        if p[i] > p[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore<f32>,
    layers: Layers,
}

impl Model {
    /// A freshly initialised network, deterministic in `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let s = &mut store;
        let r = &mut rng;

        let mut convs = Vec::new();
        let mut cin = CHANNELS;
        for (bi, blk) in config.conv_blocks.iter().enumerate() {
            let mut layers = Vec::new();
            for li in 0..blk.layers {
                let k = blk.kernel;
                let w = s.add_init(
                    format!("ie.block{bi}.conv{li}.w"),
                    &[k, k, cin, blk.filters],
                    Init::Glorot {
                        fan_in: k * k * cin,
                        fan_out: k * k * blk.filters,
                    },
                    r,
                );
                let b = s.add_init(format!("ie.block{bi}.conv{li}.b"), &[blk.filters], Init::Zeros, r);
                layers.push(ConvLayer { w, b });
                cin = blk.filters;
            }
            convs.push(layers);
        }
        let [fh, fw, fc] = config.feature_shape();
        let flat = fh * fw * fc;
        let aux_fc1 = Dense::new(s, r, "aux.fc1", flat, config.fc_c);
        let aux_fc2 = Dense::new(s, r, "aux.fc2", config.fc_c, config.fc_c);
        let (aux_bin, aux_field) = match config.step {
            Step::Step1 => (Dense::new(s, r, "aux.tb", config.fc_c, 1), None),
            Step::Step2 => {
                let field = Dense::new(s, r, "aux.field", config.fc_c, 3);
                (Dense::new(s, r, "aux.chgp", config.fc_c, 1), Some(field))
            }
        };
        let te_lstm = Lstm::new(s, r, "te.lstm", config.text_embed_dim, config.te_hidden);
        let te_fc = Dense::new(s, r, "te.fc", config.te_hidden, config.te_out);
        let ce = BiLstm::new(s, r, "ce", 4 + config.te_out + 1, config.ce_hidden);
        let sam = Lstm::new(
            s,
            r,
            "sam.lstm",
            4 + config.fused_dim() + config.prev_dim(),
            config.sam_hidden,
        );
        let memory_dim = 2 * config.ce_hidden;
        let attn = Attention::new(s, r, "sam.attn", config.sam_hidden, memory_dim, config.attn_size);
        let head_in = config.sam_hidden + memory_dim;
        let (seq_bin, seq_field) = match config.step {
            Step::Step1 => (Dense::new(s, r, "seq.tb", head_in, 1), None),
            Step::Step2 => {
                let field = Dense::new(s, r, "seq.field", head_in, 3);
                (Dense::new(s, r, "seq.chgp", head_in, 1), Some(field))
            }
        };
        let layers = Layers {
            convs,
            aux_fc1,
            aux_fc2,
            aux_bin,
            aux_field,
            te_lstm,
            te_fc,
            ce,
            sam,
            attn,
            seq_bin,
            seq_field,
        };
        Ok(Model {
            config,
            store,
            layers,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.store
    }

    /// Parameter names grouped by sub-network: `ie`, `aux`, `te`, `ce`,
    /// `sam`, `seq`.
    pub fn module_of(name: &str) -> &str {
        name.split('.').next().unwrap_or(name)
    }

    /// Convolution stack output `H′×W′×C′` for one raster.
    pub fn image_features<T: Scalar>(&self, g: &mut Graph<'_, T>, raster: &Tensor<f32>) -> Result<Var> {
        let expect = [self.config.height, self.config.width, CHANNELS];
        if raster.shape() != expect {
            return Err(Error::shape(
                "image encoder",
                format!("raster {:?}, expected {:?}", raster.shape(), expect),
            ));
        }
        let mut x = g.input(raster.cast::<T>());
        for blk in &self.layers.convs {
            for layer in blk {
                let (w, b) = (g.param(layer.w), g.param(layer.b));
                let y = g.conv2d(x, w, b)?;
                x = g.relu(y);
            }
            x = g.maxpool(x)?;
        }
        Ok(x)
    }

    /// Fusion of an image feature volume with a context filter: a 1×1
    /// convolution of `H′×W′×C′` with `b` (length `C′`), flattened.
    pub fn fuse<T: Scalar>(&self, g: &mut Graph<'_, T>, features: Var, filter: Var) -> Result<Var> {
        let [h, w, c] = self.config.feature_shape();
        let rows = g.reshape(features, &[h * w, c])?;
        g.matvec(rows, filter)
    }

    /// Text representation of an element: final LSTM cell state over its
    /// word embeddings (zero for widgets and empty texts), then dense + relu.
    pub fn encode_text<T: Scalar>(&self, g: &mut Graph<'_, T>, element: &Element) -> Result<Var> {
        let words = &element.words[..element.words.len().min(MAX_WORDS)];
        let rep = if element.is_widget() || words.is_empty() {
            g.input(Tensor::zeros(&[self.config.te_hidden]))
        } else {
            let dim = self.config.text_embed_dim;
            let xs: Vec<Var> = words
                .iter()
                .map(|w| {
                    let v = embed_word(w, dim).into_iter().map(|x| T::from_f32(x).unwrap()).collect();
                    g.input(Tensor::vector(v))
                })
                .collect();
            self.layers.te_lstm.run(g, &xs)?.1
        };
        let y = self.layers.te_fc.forward(g, rep)?;
        Ok(g.relu(y))
    }

    fn check_patch(&self, patch: &Patch) -> Result<()> {
        let slots = self.config.slots();
        if patch.slots() != slots
            || patch.norm_bboxes.len() != slots
            || patch.ref_flags.len() != slots
            || patch.rasters.len() < patch.num_valid()
            || patch.num_valid() == 0
        {
            return Err(Error::shape(
                "forward",
                format!(
                    "patch with {} slots, {} valid and {} rasters does not fit a model with {} slots",
                    patch.slots(),
                    patch.num_valid(),
                    patch.rasters.len(),
                    slots
                ),
            ));
        }
        Ok(())
    }

    fn vector<T: Scalar>(g: &mut Graph<'_, T>, values: &[f32]) -> Var {
        g.input(Tensor::vector(values.iter().map(|&v| T::from_f32(v).unwrap()).collect()))
    }

    /// Builds the forward pass of one patch on `g`, whose parameter store must
    /// share this model's layout.
    pub fn forward_graph<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        page: &FormPage,
        patch: &Patch,
        source: PrevSource<'_>,
    ) -> Result<ForwardVars> {
        self.check_patch(patch)?;
        let cfg = &self.config;
        let l = &self.layers;
        let n = patch.num_valid();
        if let PrevSource::Labels(labels) = source {
            let len = match cfg.step {
                Step::Step1 => labels.tb_assoc.len(),
                Step::Step2 => labels.field_class.len().min(labels.chgp_assoc.len()),
            };
            if labels.step != cfg.step || len < n {
                return Err(Error::shape("forward", "labels do not match the patch or step"));
            }
        }
        let index = page.element_index();
        let mut out = ForwardVars::default();

        let mut features = Vec::with_capacity(n);
        let mut boxes = Vec::with_capacity(n);
        let mut contexts_in = Vec::with_capacity(n);
        for i in 0..n {
            let fv = self.image_features(g, &patch.rasters[i])?;
            let flat_len = g.value(fv).len();
            let flat = g.reshape(fv, &[flat_len])?;
            let h1 = l.aux_fc1.forward(g, flat)?;
            let h1 = g.relu(h1);
            let h2 = l.aux_fc2.forward(g, h1)?;
            let h2 = g.relu(h2);
            let z = l.aux_bin.forward(g, h2)?;
            out.aux_bin.push(g.sigmoid(z));
            if let Some(head) = &l.aux_field {
                let z = head.forward(g, h2)?;
                out.aux_field.push(g.softmax(z, None)?);
            }
            features.push(fv);

            let id = patch.candidate_ids[i];
            let element = index.get(&id).ok_or(Error::UnknownReference(id))?;
            let ft = self.encode_text(g, element)?;
            let bb = Self::vector(g, &patch.norm_bboxes[i]);
            let r = Self::vector(g, &[if patch.ref_flags[i] { 1.0 } else { 0.0 }]);
            contexts_in.push(g.concat(&[bb, ft, r])?);
            boxes.push(bb);
        }

        let contexts = l.ce.forward(g, &contexts_in)?;
        let memory = g.stack(&contexts)?;
        let mem = l.attn.prepare(g, memory)?;
        let (mut h, mut c) = l.sam.zero_state(g);
        let mut prev = vec![0f32; cfg.prev_dim()];
        for i in 0..n {
            let fused = self.fuse(g, features[i], contexts[i])?;
            let p = Self::vector(g, &prev);
            let x = g.concat(&[boxes[i], fused, p])?;
            (h, c) = l.sam.step(g, x, h, c)?;
            let (ctx, _) = l.attn.attend(g, &mem, h, None)?;
            let z = g.concat(&[h, ctx])?;
            let zb = l.seq_bin.forward(g, z)?;
            let bin = g.sigmoid(zb);
            out.seq_bin.push(bin);
            let field = match &l.seq_field {
                Some(head) => {
                    let zf = head.forward(g, z)?;
                    let f = g.softmax(zf, None)?;
                    out.seq_field.push(f);
                    Some(f)
                }
                None => None,
            };

            prev = match (source, cfg.step) {
                (PrevSource::Labels(lab), Step::Step1) => vec![if lab.tb_assoc[i] { 1.0 } else { 0.0 }],
                (PrevSource::Labels(lab), Step::Step2) => {
                    let mut v = vec![0f32; 4];
                    v[lab.field_class[i].index()] = 1.0;
                    v[3] = if lab.chgp_assoc[i] { 1.0 } else { 0.0 };
                    v
                }
                (PrevSource::SelfFeed, Step::Step1) => vec![g.scalar(bin).to_f32().unwrap()],
                (PrevSource::SelfFeed, Step::Step2) => {
                    let probs: Vec<T> = g.value(field.expect("second-step head")).data().to_vec();
                    let mut v = vec![0f32; 4];
                    v[argmax3(&probs)] = 1.0;
                    let chgp = g.scalar(bin).to_f32().unwrap();
                    v[3] = if chgp >= DECISION_THRESHOLD { 1.0 } else { 0.0 };
                    v
                }
            };
        }
        Ok(out)
    }

    /// Forward pass with this model's own parameters.
    pub fn forward(&self, page: &FormPage, patch: &Patch, source: PrevSource<'_>) -> Result<AssociationResult> {
        let mut g = Graph::new(&self.store);
        let vars = self.forward_graph(&mut g, page, patch, source)?;
        g.check_finite()?;
        let scalar = |v: &Var| g.scalar(*v);
        let triple = |v: &Var| {
            let d = g.value(*v).data();
            [d[0], d[1], d[2]]
        };
        let bin_aux: Vec<f32> = vars.aux_bin.iter().map(scalar).collect();
        let bin_seq: Vec<f32> = vars.seq_bin.iter().map(scalar).collect();
        let mut res = AssociationResult {
            reference_id: patch.reference_id,
            step: self.config.step,
            candidate_ids: patch.candidate_ids.clone(),
            valid_mask: patch.valid_mask.clone(),
            aux_tb_prob: Vec::new(),
            aux_field_probs: vars.aux_field.iter().map(triple).collect(),
            aux_chgp_prob: Vec::new(),
            seq_tb_prob: Vec::new(),
            seq_field_probs: vars.seq_field.iter().map(triple).collect(),
            seq_chgp_prob: Vec::new(),
        };
        match self.config.step {
            Step::Step1 => {
                res.aux_tb_prob = bin_aux;
                res.seq_tb_prob = bin_seq;
            }
            Step::Step2 => {
                res.aux_chgp_prob = bin_aux;
                res.seq_chgp_prob = bin_seq;
            }
        }
        Ok(res)
    }
}

impl AssociationResult {
    /// Decoder decisions: sigmoid heads at 0.5 and field class by argmax.
    pub fn decisions(&self) -> (Vec<bool>, Vec<FieldClass>) {
        match self.step {
            Step::Step1 => (
                self.seq_tb_prob.iter().map(|&p| p >= DECISION_THRESHOLD).collect(),
                Vec::new(),
            ),
            Step::Step2 => (
                self.seq_chgp_prob.iter().map(|&p| p >= DECISION_THRESHOLD).collect(),
                self.seq_field_probs
                    .iter()
                    .map(|p| FieldClass::from_index(argmax3(p)))
                    .collect(),
            ),
        }
    }
}
