//! Acceptance suite. Each criterion prints one PASS/FAIL line to stderr
//! (bypassing the harness capture) and the test fails if any criterion
//! fails.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use eendcd::config::{parse_run_config, parse_synth_plan};
use eendcd::dataset::{load_split, synthesize};
use eendcd::driver::{corpus_der, score_recordings, train_examples, LAST_CKPT, METRICS_FILE};
use eendcd::rttm::{format_rttm, parse_rttm, quantize, read_single};
use eendcd_core::eval::{der_score, DerReport, DiarizationHypothesis, Segment, DEFAULT_COLLAR_S, DEFAULT_MEDIAN, DEFAULT_THRESHOLD};
use eendcd_core::losses::{
    a_dpcl_labels, dpcl_loss, mo_dpcl_labels, ortho_loss, pit_align, pit_align_exhaustive, suppressive_bce, total_loss,
    Alignment, DpclMode, LabelMatrix, LossConfig, LossInputs,
};
use eendcd_core::model::layers::LatentAttention;
use eendcd_core::model::{EendCd, ModelConfig};
use eendcd_core::numerics::gradcheck::{random_projection, random_tensor};
use eendcd_core::numerics::{grad_check, Conv2dSpec, GradCheckConfig, Graph, ParamStore, Tensor, Var};
use eendcd_core::Result as CoreResult;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn run_criterion(n: usize, name: &str, f: impl FnOnce() -> Check) -> bool {
    let t0 = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    });
    let secs = t0.elapsed().as_secs_f64();
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d.as_str()),
        Err(d) => ("FAIL", d.as_str()),
    };
    let line = format!("[{tag}] criterion {n}: {name} ({secs:.1} s) {detail}\n");
    let _ = std::io::stderr().write_all(line.as_bytes());
    outcome.is_ok()
}

fn random_labels(t: usize, w: usize, p: f64, rng: &mut impl Rng) -> LabelMatrix {
    LabelMatrix::new(t, w, (0..t * w).map(|_| rng.random_bool(p)).collect()).unwrap()
}

// ---- 1. gradient integrity --------------------------------------------------

type Build = fn(&mut Graph<f64>, &[Var]) -> CoreResult<Var>;

fn conv(g: &mut Graph<f64>, v: &[Var], kernel: (usize, usize), stride: usize, pad: usize) -> CoreResult<Var> {
    g.conv2d(
        v[0],
        v[1],
        v[2],
        Conv2dSpec {
            kernel,
            stride: (stride, stride),
            padding: (pad, pad),
        },
    )
}

fn primitives() -> Vec<(&'static str, Vec<Vec<usize>>, Build)> {
    let s = |v: &[&[usize]]| v.iter().map(|x| x.to_vec()).collect::<Vec<_>>();
    vec![
        ("matmul", s(&[&[4, 5], &[5, 3]]), |g, v| g.matmul(v[0], v[1])),
        ("matmul_nt", s(&[&[4, 5], &[3, 5]]), |g, v| g.matmul_nt(v[0], v[1])),
        ("matmul_tn", s(&[&[5, 4], &[5, 3]]), |g, v| g.matmul_tn(v[0], v[1])),
        ("matmul_tt", s(&[&[5, 4], &[3, 5]]), |g, v| g.matmul_t(v[0], v[1], true, true)),
        ("add", s(&[&[3, 4], &[3, 4]]), |g, v| g.add(v[0], v[1])),
        ("sub", s(&[&[3, 4], &[3, 4]]), |g, v| g.sub(v[0], v[1])),
        ("mul", s(&[&[3, 4], &[3, 4]]), |g, v| g.mul(v[0], v[1])),
        ("add_row", s(&[&[3, 4], &[4]]), |g, v| g.add_row(v[0], v[1])),
        ("add_scalar", s(&[&[3, 4], &[1]]), |g, v| g.add_scalar(v[0], v[1])),
        ("mul_col", s(&[&[3, 4], &[3, 1]]), |g, v| g.mul_col(v[0], v[1])),
        ("scale", s(&[&[3, 4]]), |g, v| g.scale(v[0], -2.5)),
        ("sigmoid", s(&[&[3, 4]]), |g, v| g.sigmoid(v[0])),
        ("relu", s(&[&[3, 4]]), |g, v| g.relu(v[0])),
        ("silu", s(&[&[3, 4]]), |g, v| g.silu(v[0])),
        ("tanh", s(&[&[3, 4]]), |g, v| g.tanh(v[0])),
        ("square", s(&[&[3, 4]]), |g, v| g.square(v[0])),
        ("softmax_rows", s(&[&[3, 5]]), |g, v| g.softmax_rows(v[0])),
        ("rms_norm", s(&[&[4, 6], &[6]]), |g, v| g.rms_norm(v[0], v[1])),
        ("layer_norm", s(&[&[4, 6], &[6], &[6]]), |g, v| g.layer_norm(v[0], v[1], v[2])),
        ("l2_normalize_rows", s(&[&[4, 3]]), |g, v| g.l2_normalize_rows(v[0])),
        ("conv2d", s(&[&[2, 5, 6, 2], &[3, 3, 2, 3], &[3]]), |g, v| conv(g, v, (3, 3), 2, 1)),
        ("conv2d_1x2", s(&[&[2, 1, 2, 3], &[1, 2, 3, 4], &[4]]), |g, v| conv(g, v, (1, 2), 1, 0)),
        ("depthwise_conv1d", s(&[&[7, 3], &[5, 3], &[3]]), |g, v| g.depthwise_conv1d(v[0], v[1], v[2])),
        ("slice_cols", s(&[&[3, 5]]), |g, v| g.slice_cols(v[0], 1, 3)),
        ("concat_cols", s(&[&[3, 2], &[3, 4]]), |g, v| g.concat_cols(&[v[0], v[1]])),
        ("select_rows", s(&[&[4, 3]]), |g, v| g.select_rows(v[0], &[2, 0, 2])),
        ("select_cols", s(&[&[3, 4]]), |g, v| g.select_cols(v[0], &[3, 1, 3])),
        ("reshape", s(&[&[2, 6]]), |g, v| g.reshape(v[0], &[3, 4])),
        ("sum", s(&[&[3, 4]]), |g, v| g.sum(v[0])),
        ("mean", s(&[&[3, 4]]), |g, v| g.mean(v[0])),
        ("mse", s(&[&[3, 4], &[3, 4]]), |g, v| g.mse(v[0], v[1])),
        ("bce_with_logits", s(&[&[3, 4]]), |g, v| {
            let t = Tensor::new(&[3, 4], (0..12).map(|i| (i % 3 == 0) as u8 as f64).collect())?;
            g.bce_with_logits(v[0], &t)
        }),
    ]
}

type LossBuild = fn(&mut Graph<f64>, LossInputs, &LabelMatrix) -> CoreResult<Var>;

fn loss_components() -> Vec<(&'static str, LossBuild)> {
    vec![
        ("pit_bce", |g, inp, l| {
            let al = pit_align(g.value(inp.logits), l)?;
            Ok(suppressive_bce(g, inp.logits, inp.directions, inp.slot_bias, l, &al)?.0)
        }),
        ("suppression", |g, inp, l| {
            let al = pit_align(g.value(inp.logits), l)?;
            Ok(suppressive_bce(g, inp.logits, inp.directions, inp.slot_bias, l, &al)?.1)
        }),
        ("mo_dpcl", |g, inp, l| {
            let lv = g.constant(mo_dpcl_labels(l))?;
            dpcl_loss(g, lv, inp.embeddings, 2048, 0)
        }),
        ("a_dpcl", |g, inp, l| {
            let al = pit_align(g.value(inp.logits), l)?;
            let lv = a_dpcl_labels(g, l, inp.directions, &al)?;
            dpcl_loss(g, lv, inp.embeddings, 2048, 0)
        }),
        ("ortho", |g, inp, l| {
            let al = pit_align(g.value(inp.logits), l)?;
            ortho_loss(g, inp.directions, &al)
        }),
        ("total", |g, inp, l| Ok(total_loss(g, inp, l, &LossConfig::default())?.total)),
        ("total_mo", |g, inp, l| {
            let cfg = LossConfig {
                mode: DpclMode::MultiOpposite,
                ..LossConfig::default()
            };
            Ok(total_loss(g, inp, l, &cfg)?.total)
        }),
    ]
}

fn gradient_integrity() -> Check {
    const TOL: f64 = 1e-4;
    let t0 = Instant::now();
    let mut worst: f64 = 0.0;
    let mut n = 0;
    for (name, shapes, build) in primitives() {
        for seed in [11u64, 22, 33] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs: Vec<Tensor<f64>> = shapes
                .iter()
                .map(|s| {
                    let t = random_tensor(s, 1.0, &mut rng);
                    // keep ReLU inputs off the kink
                    t.map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
                })
                .collect();
            let r = grad_check(
                name,
                |g, v| {
                    let y = build(g, v)?;
                    random_projection(g, y, seed)
                },
                &inputs,
                GradCheckConfig::with_tol(TOL),
            )
            .map_err(|e| format!("{name}: {e}"))?;
            ensure(r.passed, || format!("{name} seed {seed}: {r:?}"))?;
            worst = worst.max(if r.max_abs_error <= 1e-10 { 0.0 } else { r.max_rel_error });
            n += 1;
        }
    }
    for (name, build) in loss_components() {
        for seed in 0..3u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
            let (t, s, e) = (8, 4, 16);
            let mut labels = random_labels(t, 3, 0.5, &mut rng);
            for k in 0..3 {
                labels.set(k, k, true);
            }
            let inputs = [
                random_tensor(&[t, e], 1.0, &mut rng),
                random_tensor(&[s, e], 1.0, &mut rng),
                random_tensor(&[s, 1], 1.0, &mut rng),
            ];
            let r = grad_check(
                name,
                |g, v| {
                    let xa = g.matmul_nt(v[0], v[1])?;
                    let logits = g.add_row(xa, v[2])?;
                    let inp = LossInputs {
                        logits,
                        embeddings: v[0],
                        directions: v[1],
                        slot_bias: v[2],
                    };
                    build(g, inp, &labels)
                },
                &inputs,
                GradCheckConfig::with_tol(TOL),
            )
            .map_err(|e| format!("{name}: {e}"))?;
            ensure(r.passed, || format!("{name} seed {seed}: {r:?}"))?;
            worst = worst.max(r.max_rel_error);
            n += 1;
        }
    }
    let elapsed = t0.elapsed();
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!("{n} checks, worst rel err {worst:.2e} < {TOL:e}"))
}

// ---- 2. PIT invariance ------------------------------------------------------

fn pit_invariance() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let k = rng.random_range(1..=4);
        let labels = random_labels(10, k, 0.5, &mut rng);
        let mut perm: Vec<usize> = (0..k).collect();
        for i in (1..k).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let permuted = labels.permute_columns(&perm);
        let seed: u64 = rng.random();
        let value = |l: &LabelMatrix| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::new();
            let x = g.param(random_tensor(&[10, 6], 1.0, &mut r)).unwrap();
            let d = g.param(random_tensor(&[8, 6], 1.0, &mut r)).unwrap();
            let b = g.param(random_tensor(&[8, 1], 1.0, &mut r)).unwrap();
            let xa = g.matmul_nt(x, d).unwrap();
            let logits = g.add_row(xa, b).unwrap();
            let inp = LossInputs {
                logits,
                embeddings: x,
                directions: d,
                slot_bias: b,
            };
            let fast = pit_align(g.value(logits), l).unwrap();
            let slow = pit_align_exhaustive(g.value(logits), l).unwrap();
            let total = total_loss(&mut g, inp, l, &LossConfig::default()).unwrap().bundle.total;
            (total, fast.cost, slow.cost)
        };
        let (a, fa, sa) = value(&labels);
        let (b, fb, sb) = value(&permuted);
        ensure(fa == sa && fb == sb, || format!("case {case}: Hungarian {fa} vs exhaustive {sa}"))?;
        let rel = (a - b).abs() / a.abs().max(1e-12);
        ensure(rel < 1e-6, || format!("case {case}: {a} vs {b}"))?;
        worst = worst.max(rel);
    }
    Ok(format!("100 instances, S = 8, worst relative change {worst:.1e}, Hungarian == exhaustive"))
}

// ---- 3. DPCL geometry -------------------------------------------------------

fn naive_dpcl(l: &Tensor<f64>, x: &Tensor<f64>) -> f64 {
    let (t, _) = l.dims2().unwrap();
    let unit: Vec<Vec<f64>> = (0..t)
        .map(|i| {
            let r = x.row(i);
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-8);
            r.iter().map(|v| v / n).collect()
        })
        .collect();
    let mut s = 0.0;
    for i in 0..t {
        for j in 0..t {
            let ll: f64 = l.row(i).iter().zip(l.row(j)).map(|(a, b)| a * b).sum();
            let xx: f64 = unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum();
            s += (ll - xx).powi(2);
        }
    }
    s / (t * t) as f64
}

fn dpcl_value(l: &Tensor<f64>, x: &Tensor<f64>) -> f64 {
    let mut g = Graph::new();
    let lv = g.constant(l.clone()).unwrap();
    let xv = g.param(x.clone()).unwrap();
    let loss = dpcl_loss(&mut g, lv, xv, 2048, 0).unwrap();
    g.value(loss).data()[0]
}

fn dpcl_geometry() -> Check {
    // every S = 2 activity pattern against every other
    let patterns = [[false, false], [true, false], [false, true], [true, true]];
    let rows: Vec<bool> = patterns.iter().flatten().copied().collect();
    let l = mo_dpcl_labels::<f64>(&LabelMatrix::new(4, 2, rows).unwrap());
    let dot = |i: usize, j: usize| l.row(i).iter().zip(l.row(j)).map(|(a, b)| a * b).sum::<f64>();
    let mut dev: f64 = 0.0;
    for i in 0..4 {
        for j in 0..4 {
            let complementary = patterns[i].iter().zip(&patterns[j]).all(|(a, b)| a != b);
            if i == j || complementary {
                let target = if i == j { 1.0 } else { -1.0 };
                dev = dev.max((dot(i, j) - target).abs());
            }
        }
    }
    ensure(dev <= 4.0 * f64::EPSILON, || format!("Gram target off by {dev:e}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for t in 1..=16 {
        let l = random_tensor(&[t, 3], 1.0, &mut rng);
        let x = random_tensor(&[t, 5], 1.0, &mut rng);
        let d = (dpcl_value(&l, &x) - naive_dpcl(&l, &x)).abs();
        ensure(d < 1e-10, || format!("T = {t}: differs from pairwise oracle by {d:e}"))?;
        worst = worst.max(d);
    }

    // loss is zero when Grams match (scaled, rotated copies) and positive
    // when they do not
    let labels = random_labels(12, 2, 0.5, &mut rng);
    let l = mo_dpcl_labels::<f64>(&labels);
    let (c, s) = (0.7f64.cos(), 0.7f64.sin());
    let rotated: Vec<f64> = (0..12)
        .flat_map(|t| {
            let r = l.row(t);
            [2.0 * (c * r[0] - s * r[1]), 2.0 * (s * r[0] + c * r[1]), 0.0]
        })
        .collect();
    let matched = dpcl_value(&l, &Tensor::new(&[12, 3], rotated).unwrap());
    ensure(matched.abs() < 1e-14, || format!("matched Grams give {matched:e}"))?;
    let mut flipped = l.clone();
    let first_nonzero = (0..12).find(|&t| l.row(t).iter().any(|&v| v != 0.0)).unwrap();
    for v in flipped.data_mut()[first_nonzero * 2..first_nonzero * 2 + 2].iter_mut() {
        *v = -*v;
    }
    let mismatched = dpcl_value(&l, &flipped);
    ensure(mismatched > 1e-3, || format!("mismatched Grams give {mismatched:e}"))?;
    Ok(format!(
        "targets ±1 within {dev:.1e}, oracle diff {worst:.1e} (T ≤ 16), matched {matched:.1e}, mismatched {mismatched:.3}"
    ))
}

// ---- 4. suppression contract ------------------------------------------------

fn suppression_contract() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut checked = 0;
    for _ in 0..20 {
        let mut g = Graph::new();
        let x = g.param(random_tensor(&[8, 6], 1.0, &mut rng)).unwrap();
        let d = g.param(random_tensor(&[4, 6], 1.0, &mut rng)).unwrap();
        let b = g.param(random_tensor(&[4, 1], 1.0, &mut rng)).unwrap();
        let xa = g.matmul_nt(x, d).unwrap();
        let logits = g.add_row(xa, b).unwrap();
        let k = rng.random_range(0..=3);
        let labels = random_labels(8, k, 0.5, &mut rng);
        let al = pit_align(g.value(logits), &labels).unwrap();
        let (bce, _) = suppressive_bce(&mut g, logits, d, b, &labels, &al).unwrap();
        let grads = g.backward(bce).unwrap();
        let gd = grads.wrt(d);
        for s in al.inactive_slots() {
            ensure(gd.row(s).iter().all(|&v| v == 0.0), || format!("slot {s} direction gradient {:?}", gd.row(s)))?;
            checked += 1;
        }
    }
    let mut values = Vec::new();
    for norm in [1.0, 0.1, 0.0] {
        let mut g = Graph::<f64>::new();
        let logits = g.param(Tensor::zeros(&[3, 2])).unwrap();
        let dirs = g.param(Tensor::from_rows(&[vec![0.6, 0.8, 0.0], vec![0.0, norm * 0.6, norm * 0.8]])).unwrap();
        let bias = g.param(Tensor::zeros(&[2, 1])).unwrap();
        let labels = LabelMatrix::new(3, 1, vec![true, true, false]).unwrap();
        let al = Alignment {
            pairs: vec![(0, 0)],
            cost: 0.0,
            n_slots: 2,
        };
        let (_, sup) = suppressive_bce(&mut g, logits, dirs, bias, &labels, &al).unwrap();
        let v = g.value(sup).data()[0];
        ensure((v - norm * norm).abs() < 1e-12, || format!("norm {norm}: suppress {v}"))?;
        values.push(v);
    }
    Ok(format!(
        "{checked} inactive slots with exactly zero BCE direction gradient; suppress at norms 1/0.1/0 = {:.3}/{:.3}/{:.3}",
        values[0], values[1], values[2]
    ))
}

// ---- 5. architecture shape and complexity -----------------------------------

fn architecture() -> Check {
    let cfg = ModelConfig::default();
    let (model, store) = EendCd::init::<f32>(cfg.clone(), 0).map_err(|e| e.to_string())?;
    ensure(model.blocks().len() == 5, || "depth != 5".into())?;
    ensure(store.get(model.attractor_init()).shape() == [8, 256], || "attractors not 8 x 256".into())?;
    for b in model.blocks() {
        ensure(store.get(b.latte().value_projection()).shape() == [256, 128], || "latte width != 128".into())?;
    }
    let t = 500;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let windows: Tensor<f32> = random_tensor(&[t, 15, 23], 1.0, &mut rng).cast();
    let mut g = Graph::new();
    let p = store.bind(&mut g).unwrap();
    let w = g.constant(windows).unwrap();
    let out = model.forward(&mut g, &p, w).unwrap();
    ensure(g.shape(out.logits) == [t, 8], || format!("logits {:?}", g.shape(out.logits)))?;
    ensure(g.shape(out.embeddings) == [t, 256], || format!("embeddings {:?}", g.shape(out.embeddings)))?;
    ensure(g.shape(out.attractors) == [8, 256], || format!("attractors {:?}", g.shape(out.attractors)))?;
    let quadratic = g.node_shapes().filter(|s| s.iter().filter(|&&d| d == t).count() >= 2).count();
    ensure(quadratic == 0, || format!("{quadratic} T x T nodes"))?;

    let mut store = ParamStore::<f32>::new();
    let latte = LatentAttention::new(&mut store, "latte", 256, 128, cfg.n_latents, cfg.heads, &mut rng);
    let cost = |t: usize| {
        let mut g = Graph::new();
        let p = store.bind(&mut g).unwrap();
        let x = g.constant(random_tensor(&[t, 256], 1.0, &mut ChaCha8Rng::seed_from_u64(t as u64)).cast()).unwrap();
        let before = g.op_count();
        latte.forward(&mut g, &p, x).unwrap();
        (g.op_count() - before) as f64
    };
    let ratio = cost(1000) / cost(500);
    ensure((ratio - 2.0).abs() / 2.0 < 0.01, || format!("op-count ratio {ratio}"))?;
    Ok(format!(
        "logits {t}x8, embeddings {t}x256, attractors 8x256, 5 blocks, latte 128; op ratio 1000/500 = {ratio:.4}; no T x T node"
    ))
}

// ---- 6. end-to-end desk-scale training --------------------------------------

fn moving_average(values: &[f64], end: usize, window: usize) -> f64 {
    let lo = end + 1 - window;
    values[lo..=end].iter().sum::<f64>() / window as f64
}

fn end_to_end() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let plan = parse_synth_plan(include_str!("../../../configs/synth_desk.toml"), Path::new("synth_desk.toml")).unwrap();
    let cfg = parse_run_config(include_str!("../../../configs/desk.toml"), Path::new("desk.toml")).unwrap();
    synthesize(&plan, dir.path().join("data")).map_err(|e| e.to_string())?;
    let train = load_split(dir.path().join("data"), "train").unwrap();
    let val = load_split(dir.path().join("data"), "val").unwrap();
    ensure(train.len() == 20, || format!("{} training recordings", train.len()))?;

    let t0 = Instant::now();
    let ex: Vec<_> = train.iter().map(|r| r.example.clone()).collect();
    let vx: Vec<_> = val.iter().map(|r| r.example.clone()).collect();
    let out = train_examples(&cfg, &ex, &vx, &dir.path().join("run")).map_err(|e| e.to_string())?;
    let elapsed = t0.elapsed();
    ensure(elapsed < Duration::from_secs(30 * 60), || format!("training took {elapsed:?}"))?;

    let score = |recs| {
        score_recordings(&out.model, &out.params, recs, DEFAULT_THRESHOLD, DEFAULT_MEDIAN, DEFAULT_COLLAR_S)
            .map(|r| corpus_der(&r))
            .unwrap()
    };
    let train_der = score(&train);
    let val_der = score(&val);
    let baseline = |hyp: &dyn Fn(&eendcd::dataset::Recording) -> DiarizationHypothesis| {
        let reports: Vec<DerReport> = val
            .iter()
            .map(|r| der_score(&r.reference, &hyp(r), DEFAULT_COLLAR_S).unwrap())
            .collect();
        corpus_der(&reports)
    };
    let silence = baseline(&|_| DiarizationHypothesis::default());
    let single = baseline(&|r| {
        let end = r.example.frames() as f64 / 10.0;
        DiarizationHypothesis::new(vec![Segment::new(0.0, end, "all").unwrap()])
    });

    let metrics = std::fs::read_to_string(dir.path().join("run").join(METRICS_FILE)).unwrap();
    let losses: Vec<f64> = metrics
        .lines()
        .skip(1)
        .map(|l| l.split(',').collect::<Vec<_>>())
        .filter(|f| f[2] == "train")
        .map(|f| f[7].parse().unwrap())
        .collect();
    ensure(losses.len() > 500, || format!("only {} steps", losses.len()))?;
    let (ma50, ma500) = (moving_average(&losses, 50, 20), moving_average(&losses, 500, 20));

    let detail = format!(
        "train DER {:.2}% (MS {:.2} FA {:.2} CF {:.2}), val DER {:.2}% vs silence {:.2}% / single speaker {:.2}%, \
         loss MA20 step 50 {ma50:.4} -> step 500 {ma500:.4}, {} steps in {:.0} s",
        train_der.der,
        train_der.ms,
        train_der.fa,
        train_der.cf,
        val_der.der,
        silence.der,
        single.der,
        losses.len(),
        elapsed.as_secs_f64()
    );
    ensure(train_der.der <= 10.0, || detail.clone())?;
    ensure(val_der.der < silence.der && val_der.der < single.der, || detail.clone())?;
    ensure(ma500 < ma50, || detail.clone())?;

    let wav = &val[0].wav;
    let rttm = dir.path().join("val0.rttm");
    let ckpt = dir.path().join("run").join(LAST_CKPT);
    let p = |path: &Path| path.to_string_lossy().into_owned();
    cli(&["infer", "--ckpt", &p(&ckpt), "--wav", &p(wav), "--rttm", &p(&rttm)])?;
    let hyp = read_single(&rttm).map_err(|e| e.to_string())?;
    let speakers = hyp.speakers().len();
    ensure(speakers >= 2, || format!("{detail}; CLI inference found {speakers} speaker(s)"))?;
    Ok(format!("{detail}, CLI inference {speakers} speakers"))
}

// ---- 7. scorer fidelity -----------------------------------------------------

fn timeline(rng: &mut ChaCha8Rng, speakers: &[&str], ticks: u32) -> DiarizationHypothesis {
    let mut segs = Vec::new();
    for &spk in speakers {
        let mut t = rng.random_range(0..10);
        while t < ticks {
            let end = (t + rng.random_range(3..25)).min(ticks);
            if end > t {
                segs.push(Segment::new(t as f64 / 10.0, end as f64 / 10.0, spk).unwrap());
            }
            t = end + rng.random_range(2..20);
        }
    }
    DiarizationHypothesis::new(segs)
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..n {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

/// 10 ms frame scorer with exhaustive speaker mapping; returns DER %.
fn brute_der(reference: &DiarizationHypothesis, hyp: &DiarizationHypothesis, collar: f64) -> f64 {
    let r = reference.merged();
    let h = hyp.merged();
    let rl: Vec<&Vec<(f64, f64)>> = r.values().collect();
    let hl: Vec<&Vec<(f64, f64)>> = h.values().collect();
    let bounds: Vec<f64> = rl.iter().flat_map(|v| v.iter().flat_map(|&(a, b)| [a, b])).collect();
    let end = rl.iter().chain(&hl).flat_map(|v| v.iter().map(|s| s.1)).fold(0.0, f64::max);
    let on = |segs: &Vec<(f64, f64)>, t: f64| segs.iter().any(|&(a, b)| a <= t && t < b);
    let frames: Vec<(Vec<bool>, Vec<bool>)> = (0..(end * 100.0).round() as usize + 1)
        .map(|k| (k as f64 + 0.5) / 100.0)
        .filter(|&t| bounds.iter().all(|&b| (t - b).abs() >= collar))
        .map(|t| (rl.iter().map(|s| on(s, t)).collect(), hl.iter().map(|s| on(s, t)).collect()))
        .collect();
    permutations(rl.len().max(hl.len()))
        .iter()
        .map(|perm| {
            let (mut err, mut total) = (0.0, 0.0);
            for (rf, hf) in &frames {
                let nr = rf.iter().filter(|&&x| x).count() as f64;
                let nh = hf.iter().filter(|&&x| x).count() as f64;
                let correct = (0..hf.len()).filter(|&j| hf[j] && perm[j] < rf.len() && rf[perm[j]]).count() as f64;
                total += nr;
                err += nr.max(nh) - correct;
            }
            100.0 * err / total
        })
        .fold(f64::INFINITY, f64::min)
}

fn scorer_fidelity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut worst, mut worst_sum, mut worst_self): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for case in 0..50 {
        let nr = rng.random_range(2..=3);
        let nh = rng.random_range(2..=3);
        let reference = timeline(&mut rng, &["A", "B", "C"][..nr], 300);
        let hyp = timeline(&mut rng, &["x", "y", "z"][..nh], 300);
        for collar in [0.0, DEFAULT_COLLAR_S] {
            let rep = der_score(&reference, &hyp, collar).unwrap();
            let d = (rep.der - brute_der(&reference, &hyp, collar)).abs();
            ensure(d <= 0.05, || format!("case {case} collar {collar}: off by {d}"))?;
            worst = worst.max(d);
            let s = (rep.ms + rep.fa + rep.cf - rep.der).abs();
            ensure(s <= 0.01, || format!("case {case}: components off by {s}"))?;
            worst_sum = worst_sum.max(s);
        }
        let own = der_score(&reference, &reference, DEFAULT_COLLAR_S).unwrap();
        ensure(own.der == 0.0, || format!("case {case}: DER(ref, ref) = {}", own.der))?;
        worst_self = worst_self.max(own.der);
    }
    Ok(format!(
        "50 timelines: max |DER - frame oracle| {worst:.4} pts, max |MS+FA+CF-DER| {worst_sum:.1e}, DER(ref,ref) = {worst_self}"
    ))
}

// ---- 8. determinism ---------------------------------------------------------

const SMALL_PLAN: &str = "[[set]]\nsplit = \"train\"\ncount = 3\nn_speakers = 2\nduration_s = 12.0\noverlap_ratio = 0.2\nnoise_snr_db = 15.0\nseed = 10\n\n[[set]]\nsplit = \"val\"\ncount = 1\nn_speakers = 2\nduration_s = 12.0\noverlap_ratio = 0.2\nnoise_snr_db = 15.0\nseed = 20\n";
const SMALL_CONFIG: &str = "[model]\npreset = \"desk\"\n\n[train]\nbatch_size = 2\nepochs = 3\ncrop_s = 5.0\nvalidate_every = 1\nseed = 3\n";

fn cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_eendcd"))
        .args(args)
        .env_remove("EENDCD_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr))
    })
}

fn determinism() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    std::fs::write(p("plan.toml"), SMALL_PLAN).unwrap();
    std::fs::write(p("config.toml"), SMALL_CONFIG).unwrap();
    cli(&["synth-data", "--spec", &p("plan.toml"), "--out", &p("data")])?;
    cli(&["train", "--config", &p("config.toml"), "--data", &p("data"), "--out", &p("run1")])?;
    cli(&["train", "--config", &p("config.toml"), "--data", &p("data"), "--out", &p("run2")])?;
    let read = |f: &str| std::fs::read(p(f)).unwrap();
    let m1 = read("run1/metrics.csv");
    ensure(m1.iter().filter(|&&b| b == b'\n').count() > 6, || "metrics log too short".into())?;
    ensure(m1 == read("run2/metrics.csv"), || "metrics logs differ".into())?;
    ensure(read("run1/last.ckpt") == read("run2/last.ckpt"), || "final checkpoints differ".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for case in 0..50 {
        let hyp = DiarizationHypothesis::new(
            (0..rng.random_range(1..20))
                .map(|_| {
                    let a: f64 = rng.random_range(0.0..100.0);
                    let d: f64 = rng.random_range(0.001..10.0);
                    Segment::new(a, a + d, format!("spk{}", rng.random_range(0..4))).unwrap()
                })
                .collect(),
        );
        let q = quantize(&hyp);
        let text = format_rttm("rec", &q);
        let back = parse_rttm(&text, Path::new("mem")).map_err(|e| e.to_string())?;
        ensure(back.len() == 1 && back["rec"] == q, || format!("case {case}: round trip changed segments"))?;
        ensure(format_rttm("rec", &back["rec"]) == text, || format!("case {case}: text changed"))?;
    }
    Ok(format!("{} metrics bytes identical across runs, checkpoints identical, 50 RTTM round trips exact", m1.len()))
}

#[test]
fn acceptance_criteria() {
    let results = [
        run_criterion(1, "gradient integrity", gradient_integrity),
        run_criterion(2, "PIT invariance", pit_invariance),
        run_criterion(3, "DPCL geometry", dpcl_geometry),
        run_criterion(4, "suppression contract", suppression_contract),
        run_criterion(5, "architecture shape and complexity", architecture),
        run_criterion(6, "end-to-end desk-scale training", end_to_end),
        run_criterion(7, "scorer fidelity", scorer_fidelity),
        run_criterion(8, "determinism", determinism),
    ];
    let failed: Vec<usize> = (1..=8).filter(|&i| !results[i - 1]).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
