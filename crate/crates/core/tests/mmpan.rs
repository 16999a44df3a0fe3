mod common;

use formgraph::doc_model::{BBox, Element, MAX_WORDS};
use formgraph::mmpan::{embed_word, Model, ModelConfig, PrevSource, CHECKPOINT_MAGIC};
use formgraph::netcore::{Graph, Tensor};
use formgraph::patcher::{make_labels, FieldClass, PatchLabels, Step};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{bits, desk, full_model_grad_check, samples};

fn full_model_checks_pass(step: Step, seed: u64) {
    let (report, modules) = full_model_grad_check(step, seed);
    assert_eq!(modules, 6);
    let skipped: usize = report.params.iter().map(|p| p.skipped).sum();
    eprintln!("{step:?}: {} points, {skipped} skipped, worst {:?}", report.checked(), report.worst());
    assert!(report.passes(1e-4), "{:?}", report.worst());
}

#[test]
fn presets_match_their_tables() {
    let p1 = ModelConfig::preset("paper", Step::Step1).unwrap();
    let p2 = ModelConfig::preset("paper", Step::Step2).unwrap();
    assert_eq!((p1.k1, p1.k2, p2.k1, p2.k2), (6, 4, 10, 4));
    assert_eq!((p1.height, p1.width, p1.fc_c, p1.sam_hidden, p1.attn_size), (160, 640, 1024, 1000, 500));
    let layers: Vec<usize> = p1.conv_blocks.iter().map(|b| b.layers).collect();
    assert_eq!(layers, [2, 2, 3, 3, 3]);
    assert_eq!(p1.feature_shape(), [5, 20, 256]);
    assert_eq!(p1.fused_dim(), 100);
    let d = desk(Step::Step1);
    assert_eq!(2 * d.ce_hidden, d.conv_blocks.last().unwrap().filters);
    assert_eq!(d.feature_shape(), [3, 10, 32]);
    assert!(ModelConfig::preset("laptop", Step::Step1).is_err());
}

#[test]
fn paper_image_encoder_volume() {
    let model = Model::new(ModelConfig::preset("paper", Step::Step1).unwrap(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let data: Vec<f32> = (0..160 * 640 * 5).map(|_| rng.gen_range(0.0..1.0)).collect();
    let raster = Tensor::from_vec(&[160, 640, 5], data).unwrap();
    let mut g = Graph::new(model.params());
    let fv = model.image_features(&mut g, &raster).unwrap();
    assert_eq!(g.shape(fv), &[5, 20, 256]);
    let filter = g.input(Tensor::filled(&[256], 0.01));
    let fused = model.fuse(&mut g, fv, filter).unwrap();
    assert_eq!(g.shape(fused), &[100]);
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    for step in [Step::Step1, Step::Step2] {
        let model = Model::new(desk(step), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        model.save_checkpoint(&path).unwrap();
        let loaded = Model::load_checkpoint(&path).unwrap();
        let again = dir.path().join("again.ckpt");
        loaded.save_checkpoint(&again).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());

        let all = samples(step, 3, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let (page, patch) = &all[rng.gen_range(0..all.len())];
            let a = model.forward(page, patch, PrevSource::SelfFeed).unwrap();
            let b = loaded.forward(page, patch, PrevSource::SelfFeed).unwrap();
            assert_eq!(bits(&a), bits(&b));
        }
    }
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let bytes = Model::new(desk(Step::Step1), 0).unwrap().to_checkpoint_bytes().unwrap();
    assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
    let err = Model::from_checkpoint_bytes(&bytes[..bytes.len() - 4]).unwrap_err();
    assert!(err.to_string().contains("length"), "{err}");
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Model::from_checkpoint_bytes(&bad).is_err());
    assert!(Model::from_checkpoint_bytes(&bytes[..6]).is_err());
}

#[test]
fn zero_parameters_give_neutral_outputs() {
    for step in [Step::Step1, Step::Step2] {
        let mut model = Model::new(desk(step), 0).unwrap();
        for p in model.params_mut().iter_mut() {
            p.value.fill(0.0);
        }
        let (page, patch) = &samples(step, 1, 4)[0];
        let r = model.forward(page, patch, PrevSource::SelfFeed).unwrap();
        let bins = [&r.aux_tb_prob, &r.seq_tb_prob, &r.aux_chgp_prob, &r.seq_chgp_prob];
        assert!(bins.iter().any(|b| !b.is_empty()));
        for p in bins.into_iter().flatten() {
            assert_eq!(*p, 0.5);
        }
        for probs in r.aux_field_probs.iter().chain(&r.seq_field_probs) {
            assert!(probs.iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-7), "{probs:?}");
        }
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn fusion_is_bilinear() {
    let model = Model::new(desk(Step::Step1), 0).unwrap();
    let store = model.params().cast::<f64>();
    let shape = model.config().feature_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut g = Graph::new(&store);
    let zero = g.input(Tensor::zeros(&shape));
    let b = g.input(random_tensor(&mut rng, &[shape[2]]));
    let fz = model.fuse(&mut g, zero, b).unwrap();
    assert!(g.value(fz).data().iter().all(|&v| v == 0.0));

    for _ in 0..20 {
        let (va, vb) = (random_tensor(&mut rng, &shape), random_tensor(&mut rng, &shape));
        let (ba, bb) = (random_tensor(&mut rng, &[shape[2]]), random_tensor(&mut rng, &[shape[2]]));
        let (s, t): (f64, f64) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let combo = |x: &Tensor<f64>, y: &Tensor<f64>| {
            let data = x.data().iter().zip(y.data()).map(|(p, q)| s * p + t * q).collect();
            Tensor::from_vec(x.shape(), data).unwrap()
        };
        let mut run = |v: &Tensor<f64>, f: &Tensor<f64>| {
            let (v, f) = (g.input(v.clone()), g.input(f.clone()));
            let out = model.fuse(&mut g, v, f).unwrap();
            g.value(out).data().to_vec()
        };
        let lin_v = run(&combo(&va, &vb), &ba);
        let (fa, fb) = (run(&va, &ba), run(&vb, &ba));
        let lin_b = run(&va, &combo(&ba, &bb));
        let fab = run(&va, &bb);
        for i in 0..lin_v.len() {
            assert!((lin_v[i] - (s * fa[i] + t * fb[i])).abs() < 1e-5);
            assert!((lin_b[i] - (s * fa[i] + t * fab[i])).abs() < 1e-5);
        }
    }
}

#[test]
fn teacher_forcing_matches_self_feed_when_outputs_equal_labels() {
    // Step1: saturate the decoder head so every step feeds back exactly 1.0
    let mut model = Model::new(desk(Step::Step1), 3).unwrap();
    let id = model.params().id("seq.tb.b").unwrap();
    model.params_mut().get_mut(id).value.fill(100.0);
    for (page, patch) in samples(Step::Step1, 2, 8).iter().take(6) {
        let own = model.forward(page, patch, PrevSource::SelfFeed).unwrap();
        assert!(own.seq_tb_prob.iter().all(|&p| p == 1.0));
        let mut labels = make_labels(page, patch, Step::Step1).unwrap();
        labels.tb_assoc = vec![true; labels.tb_assoc.len()];
        let forced = model.forward(page, patch, PrevSource::Labels(&labels)).unwrap();
        assert_eq!(bits(&own), bits(&forced));
    }

    // Step2: feedback is discretised, so the model's own decisions as labels
    let model = Model::new(desk(Step::Step2), 3).unwrap();
    for (page, patch) in samples(Step::Step2, 2, 8).iter().take(6) {
        let own = model.forward(page, patch, PrevSource::SelfFeed).unwrap();
        let (chgp, field) = own.decisions();
        let slots = patch.slots();
        let pad = |mut v: Vec<bool>| {
            v.resize(slots, false);
            v
        };
        let mut field_class = field.clone();
        field_class.resize(slots, FieldClass::None);
        let labels = PatchLabels {
            step: Step::Step2,
            tb_assoc: Vec::new(),
            field_class,
            chgp_assoc: pad(chgp),
        };
        let forced = model.forward(page, patch, PrevSource::Labels(&labels)).unwrap();
        assert_eq!(bits(&own), bits(&forced));
    }
}

#[test]
fn forward_is_deterministic() {
    for step in [Step::Step1, Step::Step2] {
        let (a, b) = (Model::new(desk(step), 12).unwrap(), Model::new(desk(step), 12).unwrap());
        for (page, patch) in samples(step, 1, 30).iter().take(4) {
            let ra = a.forward(page, patch, PrevSource::SelfFeed).unwrap();
            let rb = b.forward(page, patch, PrevSource::SelfFeed).unwrap();
            assert_eq!(bits(&ra), bits(&rb));
            assert_eq!(ra.candidate_ids.len(), patch.num_valid());
            for p in ra.seq_field_probs.iter().chain(&ra.aux_field_probs) {
                assert!((p.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn word_embeddings_have_unit_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(embed_word("", 16).iter().all(|&v| v == 0.0));
    for _ in 0..500 {
        let len = rng.gen_range(1..12);
        let word: String = (0..len).map(|_| rng.gen_range(b'a'..=b'z') as char).collect();
        let v = embed_word(&word, 16);
        assert_eq!(v, embed_word(&word, 16));
        let norm = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        assert!(norm == 0.0 || (norm - 1.0).abs() < 1e-6, "{word}: {norm}");
    }
}

#[test]
fn text_encoder_edge_cases() {
    let mut model = Model::new(desk(Step::Step1), 0).unwrap();
    let id = model.params().id("te.fc.b").unwrap();
    let n = model.params().value(id).len();
    let bias: Vec<f32> = (0..n).map(|i| i as f32 * 0.1 - 0.5).collect();
    model.params_mut().get_mut(id).value.data_mut().copy_from_slice(&bias);

    let bbox = BBox::new(0.0, 0.0, 10.0, 10.0);
    let mut g = Graph::new(model.params());
    let w = model.encode_text(&mut g, &Element::widget(1, bbox)).unwrap();
    let relu_bias: Vec<f32> = bias.iter().map(|b| b.max(0.0)).collect();
    assert_eq!(g.value(w).data(), &relu_bias[..]);
    let empty = model.encode_text(&mut g, &Element::text_run(2, bbox, Vec::new())).unwrap();
    assert_eq!(g.value(empty).data(), &relu_bias[..]);

    let words: Vec<String> = (0..MAX_WORDS + 1).map(|i| format!("w{i}")).collect();
    assert_eq!(MAX_WORDS, 200);
    let mut long_run = Element::text_run(3, bbox, Vec::new());
    long_run.words = words.clone();
    let long = model.encode_text(&mut g, &long_run).unwrap();
    let cut = model
        .encode_text(&mut g, &Element::text_run(4, bbox, words[..MAX_WORDS].to_vec()))
        .unwrap();
    assert_eq!(g.value(long).data(), g.value(cut).data());
}

#[test]
fn desk_step1_gradients_match_finite_differences() {
    full_model_checks_pass(Step::Step1, 1);
}

#[test]
fn desk_step2_gradients_match_finite_differences() {
    full_model_checks_pass(Step::Step2, 2);
}
