//! Network shapes, complexity and structural invariants.

use eendcd_core::frontend::CnnEncoder;
use eendcd_core::losses::{total_loss, LabelMatrix, LossConfig, LossInputs};
use eendcd_core::model::layers::LatentAttention;
use eendcd_core::model::{AttractorDecoder, ConformerBlock, DepthPool, EendCd, LogitHead, ModelConfig};
use eendcd_core::numerics::gradcheck::random_tensor;
use eendcd_core::numerics::{Graph, ParamStore, Tensor};
use eendcd_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn windows(t: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_tensor(&[t, 15, 23], 1.0, &mut rng).cast()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn full_size_shapes_at_t500() {
    let cfg = ModelConfig::default();
    assert_eq!((cfg.depth, cfg.embed_dim, cfg.latte_dim, cfg.n_attractors), (5, 256, 128, 8));
    let (model, store) = EendCd::init::<f32>(cfg, 0).unwrap();
    assert_eq!(model.blocks().len(), 5);
    assert_eq!(model.decoders().len(), 5);
    assert_eq!(model.pools().len(), 4);
    assert_eq!(store.get(model.attractor_init()).shape(), &[8, 256]);
    for b in model.blocks() {
        assert_eq!(store.get(b.latte().latents()).shape(), &[16, 128]);
        assert_eq!(store.get(b.latte().value_projection()).shape(), &[256, 128]);
    }

    let t = 500;
    let mut g = Graph::new();
    let p = store.bind(&mut g).unwrap();
    let w = g.constant(windows(t, 1)).unwrap();
    let out = model.forward(&mut g, &p, w).unwrap();
    assert_eq!(g.shape(out.logits), &[500, 8]);
    assert_eq!(g.shape(out.embeddings), &[500, 256]);
    assert_eq!(g.shape(out.attractors), &[8, 256]);
    assert_eq!(g.shape(out.directions), &[8, 256]);
    assert_eq!(g.shape(out.slot_bias), &[8, 1]);
    // no T x T intermediate anywhere in the tape
    for s in g.node_shapes() {
        assert!(s.iter().filter(|&&d| d == t).count() < 2, "node of shape {s:?}");
    }
}

#[test]
fn latent_attention_cost_is_linear_in_t() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::<f32>::new();
    let latte = LatentAttention::new(&mut store, "latte", 256, 128, 16, 4, &mut rng);
    let cost = |t: usize| {
        let mut g = Graph::new();
        let p = store.bind(&mut g).unwrap();
        let x = g.constant(random_tensor(&[t, 256], 1.0, &mut ChaCha8Rng::seed_from_u64(t as u64)).cast()).unwrap();
        let before = g.op_count();
        let y = latte.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.shape(y), &[t, 256]);
        for s in g.node_shapes() {
            assert!(s.iter().filter(|&&d| d == t).count() < 2);
        }
        (g.op_count() - before) as f64
    };
    let ratio = cost(1000) / cost(500);
    assert!((ratio - 2.0).abs() / 2.0 < 0.01, "ratio {ratio}");
}

#[test]
fn single_latent_broadcasts_one_row() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::<f64>::new();
    let latte = LatentAttention::new(&mut store, "l", 8, 4, 1, 2, &mut rng);
    let mut g = Graph::new();
    let p = store.bind(&mut g).unwrap();
    let x = g.constant(random_tensor(&[7, 8], 1.0, &mut rng)).unwrap();
    let y = latte.forward(&mut g, &p, x).unwrap();
    let v = g.value(y);
    for t in 1..7 {
        assert_eq!(v.row(t), v.row(0));
    }
}

#[test]
fn single_frame_is_a_value_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::<f64>::new();
    let latte = LatentAttention::new(&mut store, "l", 8, 4, 3, 2, &mut rng);
    let x0 = random_tensor(&[1, 8], 1.0, &mut rng);
    let mut g = Graph::new();
    let p = store.bind(&mut g).unwrap();
    let x = g.constant(x0.clone()).unwrap();
    let y = latte.forward(&mut g, &p, x).unwrap();

    let wv = store.get(latte.value_projection());
    let wo = store.get(store.find("l.out.weight").unwrap());
    let v: Vec<f64> = (0..4).map(|j| (0..8).map(|i| x0.data()[i] * wv.at(i, j)).sum()).collect();
    let expect: Vec<f64> = (0..8).map(|j| (0..4).map(|i| v[i] * wo.at(i, j)).sum()).collect();
    assert!(max_abs_diff(g.value(y).data(), &expect) < 1e-12);
}

fn small_config(e: usize, s: usize) -> ModelConfig {
    ModelConfig {
        depth: 2,
        embed_dim: e,
        latte_dim: e / 2,
        n_latents: 4,
        n_attractors: s,
        ff_expansion: 2,
        conv_kernel: 5,
        heads: 2,
        cnn_channels: [4, 8, 8, 8],
        sap_hidden: 8,
    }
}

#[test]
fn zero_cross_attention_values_pass_residual_through() {
    let cfg = small_config(16, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::<f64>::new();
    let block = ConformerBlock::new(&mut store, "b", &cfg, &mut rng);
    let vid = block.cross_attention().value.weight;
    store.set(vid, Tensor::zeros(&[16, 16])).unwrap();

    let x = random_tensor(&[10, 16], 1.0, &mut rng);
    let mut g = Graph::new();
    let p = store.bind(&mut g).unwrap();
    let xv = g.constant(x).unwrap();
    let a0 = g.constant(Tensor::zeros(&[4, 16])).unwrap();
    let a1 = g.constant(random_tensor(&[4, 16], 3.0, &mut rng)).unwrap();
    let sub = block.cross_attention().forward(&mut g, &p, xv, a1).unwrap();
    assert!(g.value(sub).data().iter().all(|&v| v == 0.0));
    let y0 = block.forward(&mut g, &p, xv, a0).unwrap();
    let y1 = block.forward(&mut g, &p, xv, a1).unwrap();
    assert_eq!(g.shape(y0), &[10, 16]);
    assert_eq!(g.value(y0), g.value(y1));
}

#[test]
fn decoder_ignores_frames_without_cross_values() {
    let cfg = small_config(16, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::<f64>::new();
    let dec = AttractorDecoder::new(&mut store, "d", &cfg, &mut rng);
    store.set(dec.cross_attention().value.weight, Tensor::zeros(&[16, 16])).unwrap();
    let mut g = Graph::new();
    let p = store.bind(&mut g).unwrap();
    let a = g.constant(random_tensor(&[5, 16], 1.0, &mut rng)).unwrap();
    let x0 = g.constant(Tensor::zeros(&[9, 16])).unwrap();
    let x1 = g.constant(random_tensor(&[9, 16], 1.0, &mut rng)).unwrap();
    let y0 = dec.forward(&mut g, &p, a, x0).unwrap();
    let y1 = dec.forward(&mut g, &p, a, x1).unwrap();
    assert_eq!(g.shape(y0), &[5, 16]);
    assert_eq!(g.value(y0), g.value(y1));
}

#[test]
fn full_width_block_and_decoder_shapes() {
    let cfg = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::<f32>::new();
    let block = ConformerBlock::new(&mut store, "b", &cfg, &mut rng);
    let dec = AttractorDecoder::new(&mut store, "d", &cfg, &mut rng);
    let mut g = Graph::new();
    let p = store.bind(&mut g).unwrap();
    let x = g.constant(random_tensor(&[50, 256], 1.0, &mut rng).cast()).unwrap();
    let a = g.constant(random_tensor(&[8, 256], 1.0, &mut rng).cast()).unwrap();
    let a2 = dec.forward(&mut g, &p, a, x).unwrap();
    assert_eq!(g.shape(a2), &[8, 256]);
    let y = block.forward(&mut g, &p, x, a2).unwrap();
    assert_eq!(g.shape(y), &[50, 256]);
}

#[test]
fn depth_pool_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::<f64>::new();
    let pool = DepthPool::new(&mut store, "pool", 4, 3, &mut rng);
    let e0 = random_tensor(&[6, 4], 1.0, &mut rng);
    let e1 = random_tensor(&[6, 4], 1.0, &mut rng);

    let mut g = Graph::new();
    let p = store.bind(&mut g).unwrap();
    let v0 = g.constant(e0.clone()).unwrap();
    let single = pool.forward(&mut g, &p, &[v0]).unwrap();
    assert!(max_abs_diff(g.value(single).data(), e0.data()) < 1e-15);
    let same = pool.forward(&mut g, &p, &[v0, v0, v0]).unwrap();
    assert!(max_abs_diff(g.value(same).data(), e0.data()) < 1e-12);

    // make entry 0 win by a 1000-logit margin: one hidden unit reads
    // sign(x[0]) and the score weight scales it to ±500
    let mut a = e0.clone();
    let mut b = e1.clone();
    for t in 0..6 {
        a.data_mut()[t * 4] = 1.0;
        b.data_mut()[t * 4] = -1.0;
    }
    let mut w1 = Tensor::zeros(&[4, 3]);
    w1.data_mut()[0] = 1e6;
    store.set(pool.hidden().weight, w1).unwrap();
    store.set(pool.hidden().bias.unwrap(), Tensor::zeros(&[3])).unwrap();
    store.set(pool.score().weight, Tensor::new(&[3, 1], vec![500.0, 0.0, 0.0]).unwrap()).unwrap();
    let mut g = Graph::new();
    let p = store.bind(&mut g).unwrap();
    let va = g.constant(a.clone()).unwrap();
    let vb = g.constant(b).unwrap();
    let pooled = pool.forward(&mut g, &p, &[va, vb]).unwrap();
    assert!(max_abs_diff(g.value(pooled).data(), a.data()) < 1e-6);
}

#[test]
fn logit_head_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut store = ParamStore::<f64>::new();
    let head = LogitHead::new(&mut store, "head", 4, &mut rng);
    let w = store.find("head.split.weight").unwrap();
    let b = store.find("head.split.bias").unwrap();
    store.set(w, Tensor::zeros(&[4, 5])).unwrap();
    store.set(b, Tensor::new(&[5], vec![0.0, 0.0, 0.0, 0.0, 0.3]).unwrap()).unwrap();
    store.set(head.global_bias(), Tensor::new(&[1], vec![-0.1]).unwrap()).unwrap();
    let mut g = Graph::new();
    let p = store.bind(&mut g).unwrap();
    let x = g.constant(Tensor::zeros(&[3, 4])).unwrap();
    let a = g.constant(random_tensor(&[2, 4], 1.0, &mut rng)).unwrap();
    let (logits, dirs, _) = head.forward(&mut g, &p, x, a).unwrap();
    assert!(g.value(dirs).data().iter().all(|&v| v == 0.0));
    for &z in g.value(logits).data() {
        assert!((z - 0.2).abs() < 1e-15);
    }
    let prob = g.sigmoid(logits).unwrap();
    assert!((g.value(prob).data()[0] - 0.549834).abs() < 1e-6);
}

#[test]
fn permuting_initial_attractors_permutes_logit_columns() {
    let cfg = small_config(16, 4);
    let (model, store) = EendCd::init::<f64>(cfg, 11).unwrap();
    let w = windows(12, 12).cast::<f64>();
    let perm = [2usize, 0, 3, 1];
    let mut permuted = store.clone();
    let init = store.get(model.attractor_init());
    let rows: Vec<f64> = perm.iter().flat_map(|&r| init.row(r).to_vec()).collect();
    permuted.set(model.attractor_init(), Tensor::new(&[4, 16], rows).unwrap()).unwrap();

    let a = model.predict(&store, &w).unwrap();
    let b = model.predict(&permuted, &w).unwrap();
    for t in 0..12 {
        for (j, &src) in perm.iter().enumerate() {
            assert!((b.at(t, j) - a.at(t, src)).abs() < 1e-12);
        }
    }
}

#[test]
fn cnn_frontend_is_per_window() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParamStore::<f64>::new();
    let enc = CnnEncoder::new(&mut store, &[4, 8, 8, 8, 16], &mut rng);
    let a = random_tensor(&[5, 15, 23], 1.0, &mut rng);
    let b = random_tensor(&[3, 15, 23], 1.0, &mut rng);
    let both = Tensor::new(&[8, 15, 23], a.data().iter().chain(b.data()).copied().collect()).unwrap();
    let run = |x: &Tensor<f64>| {
        let mut g = Graph::new();
        let p = store.bind(&mut g).unwrap();
        let v = g.constant(x.clone()).unwrap();
        let y = enc.encode(&mut g, &p, v).unwrap();
        g.value(y).clone()
    };
    let (ya, yb, yab) = (run(&a), run(&b), run(&both));
    assert_eq!(&yab.data()[..5 * 16], ya.data());
    assert_eq!(&yab.data()[5 * 16..], yb.data());
}

#[test]
fn every_parameter_receives_gradient() {
    let (model, store) = EendCd::init::<f32>(ModelConfig::desk(), 14).unwrap();
    let mut labels = LabelMatrix::silent(20, 2);
    for t in 0..12 {
        labels.set(t, 0, true);
    }
    for t in 8..20 {
        labels.set(t, 1, true);
    }
    let mut g = Graph::new();
    let p = store.bind(&mut g).unwrap();
    let w = g.constant(windows(20, 15)).unwrap();
    let out = model.forward(&mut g, &p, w).unwrap();
    let obj = total_loss(&mut g, LossInputs::from(&out), &labels, &LossConfig::default()).unwrap();
    let mut grads = g.backward(obj.total).unwrap();
    for ((_, name, _), gr) in store.iter().zip(p.gradients(&mut grads)) {
        assert!(gr.data().iter().any(|&v| v != 0.0), "{name} has no gradient");
    }
}

#[test]
fn forward_is_deterministic_for_a_seed() {
    let w = windows(15, 16);
    let (m1, s1) = EendCd::init::<f32>(ModelConfig::desk(), 3).unwrap();
    let (m2, s2) = EendCd::init::<f32>(ModelConfig::desk(), 3).unwrap();
    assert_eq!(m1.predict(&s1, &w).unwrap(), m2.predict(&s2, &w).unwrap());
    let (m3, s3) = EendCd::init::<f32>(ModelConfig::desk(), 4).unwrap();
    assert_ne!(m1.predict(&s1, &w).unwrap(), m3.predict(&s3, &w).unwrap());
}

#[test]
fn config_and_parameter_mismatches_are_reported() {
    let mut bad = ModelConfig::desk();
    bad.heads = 3;
    assert!(matches!(EendCd::init::<f32>(bad, 0), Err(Error::Config(_))));
    let mut even = ModelConfig::desk();
    even.conv_kernel = 4;
    assert!(matches!(EendCd::init::<f32>(even, 0), Err(Error::Config(_))));

    let (model, mut store) = EendCd::init::<f32>(ModelConfig::desk(), 0).unwrap();
    model.check_params(&store).unwrap();
    let id = model.attractor_init();
    store.tensors_mut()[id.0] = Tensor::zeros(&[3, 3]);
    assert!(matches!(model.check_params(&store), Err(Error::Config(_))));

    let (_, wrong) = EendCd::init::<f32>(small_config(16, 4), 0).unwrap();
    assert!(matches!(model.check_params(&wrong), Err(Error::Config(_))));
}
