//! Oracles and fixtures shared by the integration tests and the acceptance
//! run.
#![allow(dead_code)]

use std::collections::BTreeSet;

use formgraph::doc_model::FormPage;
use formgraph::mmpan::{AssociationResult, Model, ModelConfig, PrevSource};
use formgraph::netcore::{
    grad_check, Attention, BiLstm, Dense, GradCheckConfig, GradCheckReport, Graph, Init, Lstm, ParamStore, Tensor,
    Var,
};
use formgraph::patcher::{build_patch, make_labels, reference_ids, Patch, Step};
use formgraph::synthgen::{derive_step2, generate_pages, GenConfig};
use formgraph::trainer::sample_loss;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn desk(step: Step) -> ModelConfig {
    ModelConfig::preset("desk", step).unwrap()
}

/// Pages the model reads for `step`, with their patches in page order.
pub fn samples(step: Step, pages: usize, seed: u64) -> Vec<(FormPage, Patch)> {
    let gen = generate_pages(&GenConfig {
        pages,
        seed,
        ..GenConfig::default()
    })
    .unwrap();
    let pc = desk(step).patch_config();
    let mut out = Vec::new();
    for page in gen {
        let view = match step {
            Step::Step1 => page,
            Step::Step2 => derive_step2(&page).unwrap().0,
        };
        for id in reference_ids(&view, step) {
            out.push((view.clone(), build_patch(&view, id, &pc).unwrap()));
        }
    }
    out
}

pub fn bits(r: &AssociationResult) -> Vec<u32> {
    let flat3 = |v: &[[f32; 3]]| v.iter().flatten().copied().collect::<Vec<_>>();
    [
        r.aux_tb_prob.clone(),
        r.seq_tb_prob.clone(),
        r.aux_chgp_prob.clone(),
        r.seq_chgp_prob.clone(),
        flat3(&r.aux_field_probs),
        flat3(&r.seq_field_probs),
    ]
    .concat()
    .iter()
    .map(|v| v.to_bits())
    .collect()
}

/// Reachability by repeated squaring of the boolean adjacency matrix.
pub fn closure_components(n: usize, edges: &[(usize, usize)]) -> Vec<BTreeSet<u32>> {
    let mut reach = vec![vec![false; n]; n];
    for (i, row) in reach.iter_mut().enumerate() {
        row[i] = true;
    }
    for &(a, b) in edges {
        reach[a][b] = true;
        reach[b][a] = true;
    }
    let mut len = 1;
    while len < n {
        let prev = reach.clone();
        for i in 0..n {
            for j in 0..n {
                reach[i][j] = (0..n).any(|k| prev[i][k] && prev[k][j]);
            }
        }
        len *= 2;
    }
    let mut seen: BTreeSet<BTreeSet<u32>> = BTreeSet::new();
    for row in &reach {
        seen.insert((0..n).filter(|&j| row[j]).map(|j| j as u32).collect());
    }
    let mut out: Vec<BTreeSet<u32>> = seen.into_iter().collect();
    out.sort_by_key(|c| *c.first().unwrap());
    out
}

/// Direct distance over midpoint form `(x, y, w, h)`.
pub fn distance_oracle(a: (f64, f64), b: (f64, f64, f64, f64)) -> f64 {
    let (xa, ya) = a;
    let (xb, yb, wb, hb) = b;
    let vertical = [yb - hb / 2.0, yb, yb + hb / 2.0].map(|v| (ya - v).abs());
    let horizontal = [xb - wb / 2.0, xb, xb + wb / 2.0].map(|v| (xa - v).abs());
    let min = |v: [f64; 3]| v.into_iter().fold(f64::INFINITY, f64::min);
    10.0 * min(vertical) + min(horizontal)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Scalar loss `Σ r_i · y_i` with fixed random weights `r`.
pub fn project(g: &mut Graph<'_, f64>, y: Var, seed: u64) -> Var {
    let n = g.value(y).len();
    let flat = g.reshape(y, &[n]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = g.input(random_tensor(&mut rng, &[n, 1]));
    g.matmul(flat, r).unwrap()
}

fn run(store: &ParamStore<f64>, f: impl Fn(&mut Graph<'_, f64>) -> formgraph::Result<Var>, tol: f64) -> (GradCheckReport, f64) {
    (grad_check(store, f, &GradCheckConfig::default()).unwrap(), tol)
}

/// Every differentiable operation, each with its tolerance.
pub fn op_grad_cases() -> Vec<(&'static str, GradCheckReport, f64)> {
    let named = |name, (r, t)| (name, r, t);
    vec![
        named("dense", case_dense()),
        named("conv_relu_pool", case_conv_relu_pool()),
        named("conv_common_widths", case_conv_common_widths()),
        named("lstm_bilstm", case_lstm_step_and_bilstm()),
        named("attention_softmax_losses", case_attention_softmax_and_losses()),
    ]
}

pub fn case_dense() -> (GradCheckReport, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut store = ParamStore::<f64>::new();
    let dense = Dense::new(&mut store, &mut rng, "d", 5, 3);
    let x = store.add_init("x", &[5], Init::Glorot { fan_in: 5, fan_out: 1 }, &mut rng);
    run(
        &store,
        |g| {
            let xv = g.param(x);
            let y = dense.forward(g, xv)?;
            Ok(project(g, y, 1))
        },
        1e-6,
    )
}

pub fn case_conv_relu_pool() -> (GradCheckReport, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::<f64>::new();
    let input = store.add("input", random_tensor(&mut rng, &[6, 5, 2]));
    let filters = store.add("filters", random_tensor(&mut rng, &[3, 3, 2, 3]));
    let bias = store.add("bias", random_tensor(&mut rng, &[3]));
    let filters2 = store.add("filters2", random_tensor(&mut rng, &[5, 5, 3, 2]));
    let bias2 = store.add("bias2", random_tensor(&mut rng, &[2]));
    run(
        &store,
        |g| {
            let (x, f, b) = (g.param(input), g.param(filters), g.param(bias));
            let y = g.conv2d(x, f, b)?;
            let y = g.relu(y);
            let y = g.maxpool(y)?;
            let (f2, b2) = (g.param(filters2), g.param(bias2));
            let y = g.conv2d(y, f2, b2)?;
            Ok(project(g, y, 2))
        },
        1e-4,
    )
}

pub fn case_conv_common_widths() -> (GradCheckReport, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParamStore::<f64>::new();
    let input = store.add("input", random_tensor(&mut rng, &[5, 7, 3]));
    let filters = store.add("filters", random_tensor(&mut rng, &[3, 3, 3, 8]));
    let bias = store.add("bias", random_tensor(&mut rng, &[8]));
    let filters2 = store.add("filters2", random_tensor(&mut rng, &[3, 3, 8, 16]));
    let bias2 = store.add("bias2", random_tensor(&mut rng, &[16]));
    run(
        &store,
        |g| {
            let (x, f, b) = (g.param(input), g.param(filters), g.param(bias));
            let y = g.conv2d(x, f, b)?;
            let (f2, b2) = (g.param(filters2), g.param(bias2));
            let y = g.conv2d(y, f2, b2)?;
            Ok(project(g, y, 3))
        },
        1e-4,
    )
}

pub fn case_lstm_step_and_bilstm() -> (GradCheckReport, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::<f64>::new();
    let lstm = Lstm::new(&mut store, &mut rng, "l", 3, 4);
    let bi = BiLstm::new(&mut store, &mut rng, "bi", 3, 2);
    let xs: Vec<_> = (0..3)
        .map(|i| store.add(format!("x{i}"), random_tensor(&mut rng, &[3])))
        .collect();
    let h0 = store.add("h0", random_tensor(&mut rng, &[4]));
    let c0 = store.add("c0", random_tensor(&mut rng, &[4]));
    run(
        &store,
        |g| {
            let x = g.param(xs[0]);
            let (h, c) = (g.param(h0), g.param(c0));
            let (h, c) = lstm.step(g, x, h, c)?;
            let hc = g.concat(&[h, c])?;
            let seq: Vec<Var> = xs.iter().map(|&x| g.param(x)).collect();
            let outs = bi.forward(g, &seq)?;
            let mut parts = vec![hc];
            parts.extend(outs);
            let all = g.concat(&parts)?;
            Ok(project(g, all, 3))
        },
        1e-4,
    )
}

pub fn case_attention_softmax_and_losses() -> (GradCheckReport, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParamStore::<f64>::new();
    let attn = Attention::new(&mut store, &mut rng, "att", 3, 4, 5);
    let state = store.add("state", random_tensor(&mut rng, &[3]));
    let memory = store.add("memory", random_tensor(&mut rng, &[4, 4]));
    let head = Dense::new(&mut store, &mut rng, "head", 4, 3);
    let bin = Dense::new(&mut store, &mut rng, "bin", 4, 1);
    let fused = store.add("fused", random_tensor(&mut rng, &[3, 2, 4]));
    run(
        &store,
        |g| {
            let (s, m) = (g.param(state), g.param(memory));
            let (ctx, w) = attn.forward(g, s, m, Some(&[true, true, false, true]))?;
            let logits = head.forward(g, ctx)?;
            let probs = g.softmax(logits, None)?;
            let probs = g.reshape(probs, &[1, 3])?;
            let ce = g.ce_sum(probs, &[Some(1)], 0.7)?;
            let z = bin.forward(g, ctx)?;
            let p = g.sigmoid(z);
            let bce = g.bce_sum(p, &[Some(1.0)], 1.3)?;
            let fv = g.param(fused);
            let flat = g.reshape(fv, &[6, 4])?;
            let mixed = g.matvec(flat, ctx)?;
            let rows = g.stack(&[w, ctx])?;
            let extra = project(g, rows, 4);
            let extra2 = project(g, mixed, 5);
            g.sum(&[ce, bce, extra, extra2])
        },
        1e-4,
    )
}

/// Full desk model, loss of the largest patch on a one-page dataset, three
/// sampled entries per parameter tensor. Returns the report and the number of
/// modules with checked entries.
pub fn full_model_grad_check(step: Step, seed: u64) -> (GradCheckReport, usize) {
    let model = Model::new(desk(step), seed).unwrap();
    let store = model.params().cast::<f64>();
    let all = samples(step, 1, 40 + seed);
    let (page, patch) = all
        .iter()
        .max_by_key(|(_, p)| p.num_valid())
        .expect("a patch");
    let labels = make_labels(page, patch, step).unwrap();
    let scale = 1.0 / patch.num_valid() as f64;
    let cfg = GradCheckConfig {
        step: 1e-3,
        max_points_per_param: Some(3),
        seed,
    };
    let report = grad_check(
        &store,
        |g| {
            let vars = model.forward_graph(g, page, patch, PrevSource::Labels(&labels))?;
            sample_loss(g, &vars, &labels, scale)
        },
        &cfg,
    )
    .unwrap();
    let modules: BTreeSet<&str> =
        report.params.iter().filter(|p| p.checked > 0).map(|p| Model::module_of(&p.name)).collect();
    let n = modules.len();
    (report, n)
}
