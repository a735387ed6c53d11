//! Acceptance suite: one test per criterion, each printing a PASS line
//! with the measured values (visible with --nocapture). Expensive trained
//! fixtures are shared through OnceLock and built on first use.

use brainage_core::attention::{scaled_dot_attention, StemParams};
use brainage_core::attribution::{average_maps, fuse_to_volume, rank_regions, view_gradients};
use brainage_core::corpus::{CorpusConfig, GroupMix, MemCorpus, Split};
use brainage_core::fdcheck::{finite_diff_grad, max_rel_error};
use brainage_core::flops::{
    bench_full_self_attention, bench_stem, full_self_attention_flops, loglog_slope, stem_flops,
};
use brainage_core::model::{BrainAgeModel, Group, ModelConfig, PseudoSample, VolumeStats};
use brainage_core::rng::DeterministicRng;
use brainage_core::stats::{mae, mean_ci95, pearson, welch_t, AgePrediction};
use brainage_core::tape::{Tape, Var};
use brainage_core::tensor::Tensor;
use brainage_core::train::{fit, SampleSource, TrainConfig};
use std::sync::OnceLock;
use std::time::Instant;

// ── shared fixtures ─────────────────────────────────────────────────

struct DeskRun {
    corpus: MemCorpus,
    model: BrainAgeModel,
    train_seconds: f64,
}

static DESK_RUN: OnceLock<DeskRun> = OnceLock::new();

/// The reference desk-scale run: 240 CN subjects, G=64, R=24, desk model
/// and train config. Built once; the raw train volumes are released after
/// training to keep the suite's footprint small.
fn desk_run() -> &'static DeskRun {
    DESK_RUN.get_or_init(|| {
        let t0 = Instant::now();
        let mut corpus = MemCorpus::build(&CorpusConfig::desk()).expect("desk corpus");
        let model_cfg = ModelConfig::desk();
        let model =
            BrainAgeModel::init(model_cfg, corpus.volume_stats.clone()).expect("desk model");
        let result = fit(model, &corpus, &TrainConfig::desk()).expect("desk training");
        corpus.release_train_volumes();
        DeskRun {
            corpus,
            model: result.best,
            train_seconds: t0.elapsed().as_secs_f64(),
        }
    })
}

#[derive(Debug)]
struct SeedOutcome {
    seed: u64,
    mci_bag: (f64, f64),
    mci_abs: (f64, f64),
    ad_bag: (f64, f64),
    ad_abs: (f64, f64),
    cn_abs: (f64, f64),
    grad_top3: Vec<u16>,
    top1_agrees: bool,
}

static SEED_RUNS: OnceLock<Vec<SeedOutcome>> = OnceLock::new();

fn mixed_corpus_config(cn: usize, mci: usize, ad: usize, seed: u64) -> CorpusConfig {
    let total = cn + mci + ad;
    CorpusConfig {
        subjects: total,
        scans_per_subject: (1, 2),
        group_mix: GroupMix {
            cn: cn as f64 / total as f64,
            mci: mci as f64 / total as f64,
            ad: ad as f64 / total as f64,
        },
        seed,
        ..CorpusConfig::desk()
    }
}

fn eval_indices(corpus: &MemCorpus) -> Vec<usize> {
    // CN held-out test scans plus the disease cohorts (never trained on).
    corpus
        .split_indices(Split::Test)
        .iter()
        .copied()
        .collect()
}

fn predict_rows(model: &BrainAgeModel, corpus: &MemCorpus, indices: &[usize]) -> Vec<AgePrediction> {
    indices
        .iter()
        .map(|&i| {
            let s = &corpus.scans[i].sample;
            AgePrediction {
                scan_id: s.scan_id.clone(),
                subject_id: s.subject_id.clone(),
                age: s.age,
                predicted: model.predict(s).expect("forward"),
                group: s.group,
                cog_score: s.cog_score,
            }
        })
        .collect()
}

fn cn_test_indices(corpus: &MemCorpus) -> Vec<usize> {
    corpus
        .split_indices(Split::Test)
        .iter()
        .copied()
        .filter(|&i| corpus.scans[i].sample.group == Group::Cn)
        .collect()
}

/// Gradient-per-volume region ids, best first, over the CN test scans.
fn gradient_ranking(model: &BrainAgeModel, corpus: &MemCorpus, indices: &[usize]) -> Vec<u16> {
    let geom = corpus.geometry();
    let maps: Vec<Tensor> = indices
        .iter()
        .map(|&i| {
            let grads = view_gradients(model, &corpus.scans[i].sample).expect("gradients");
            fuse_to_volume(&grads, &geom).expect("fusion")
        })
        .collect();
    let gbar = average_maps(&maps).expect("average");
    let (rows, _) = rank_regions(
        &gbar,
        &corpus.reference.label_map,
        &corpus.reference.region_volumes,
    )
    .expect("ranking");
    rows.iter().map(|r| r.region_id).collect()
}

/// Occlusion oracle: mean |delta yhat| per region when that region's
/// voxels are zeroed in every view chunk.
fn occlusion_ranking(model: &BrainAgeModel, corpus: &MemCorpus, indices: &[usize]) -> Vec<u16> {
    let regions = corpus.config.regions;
    let mut scores = vec![0.0f64; regions];
    for &idx in indices {
        let scan = &corpus.scans[idx];
        let base = model.predict(&scan.sample).expect("forward");
        for r in 1..=regions as u16 {
            let mut probe = scan.sample.clone();
            for (chunk, labels) in [
                (&mut probe.view_s, &scan.label_chunks[0]),
                (&mut probe.view_c, &scan.label_chunks[1]),
                (&mut probe.view_a, &scan.label_chunks[2]),
            ] {
                for (v, &l) in chunk.data_mut().iter_mut().zip(labels) {
                    if l == r {
                        *v = 0.0;
                    }
                }
            }
            scores[r as usize - 1] += (model.predict(&probe).expect("forward") - base).abs();
        }
    }
    let mut ids: Vec<u16> = (1..=regions as u16).collect();
    ids.sort_by(|&a, &b| {
        scores[b as usize - 1]
            .partial_cmp(&scores[a as usize - 1])
            .expect("finite")
            .then(a.cmp(&b))
    });
    ids
}

/// Ten trained mixed-corpus runs backing criteria 7 and 8. Each seed
/// builds its own corpus and model, records the correlation pattern and
/// the gradient-vs-occlusion agreement, then drops the heavy state.
fn seed_runs() -> &'static Vec<SeedOutcome> {
    SEED_RUNS.get_or_init(|| {
        (0..10u64)
            .map(|k| {
                let seed = 3000 + k;
                let corpus_cfg = mixed_corpus_config(100, 100, 100, seed);
                let corpus = MemCorpus::build(&corpus_cfg).expect("seed corpus");
                let model_cfg = ModelConfig {
                    seed,
                    ..ModelConfig::desk()
                };
                let model = BrainAgeModel::init(model_cfg, corpus.volume_stats.clone())
                    .expect("seed model");
                let train_cfg = TrainConfig {
                    seed,
                    ..TrainConfig::desk()
                };
                let trained = fit(model, &corpus, &train_cfg).expect("seed training").best;

                let rows = predict_rows(&trained, &corpus, &eval_indices(&corpus));
                let per_group = |group: Group| -> (Vec<f64>, Vec<f64>, Vec<f64>) {
                    let g: Vec<&AgePrediction> =
                        rows.iter().filter(|p| p.group == group).collect();
                    (
                        g.iter().map(|p| p.predicted - p.age).collect(),
                        g.iter().map(|p| p.abs_err()).collect(),
                        g.iter().map(|p| p.cog_score).collect(),
                    )
                };
                let (mci_bag_v, mci_abs_v, mci_cog) = per_group(Group::Mci);
                let (ad_bag_v, ad_abs_v, ad_cog) = per_group(Group::Ad);
                let (_, cn_abs_v, cn_cog) = per_group(Group::Cn);

                let cn_test = cn_test_indices(&corpus);
                let grad_rank = gradient_ranking(&trained, &corpus, &cn_test);
                let occl_rank = occlusion_ranking(&trained, &corpus, &cn_test);

                let outcome = SeedOutcome {
                    seed,
                    mci_bag: pearson(&mci_bag_v, &mci_cog).expect("mci bag"),
                    mci_abs: pearson(&mci_abs_v, &mci_cog).expect("mci abs"),
                    ad_bag: pearson(&ad_bag_v, &ad_cog).expect("ad bag"),
                    ad_abs: pearson(&ad_abs_v, &ad_cog).expect("ad abs"),
                    cn_abs: pearson(&cn_abs_v, &cn_cog).expect("cn abs"),
                    grad_top3: grad_rank[..3].to_vec(),
                    top1_agrees: grad_rank[0] == occl_rank[0],
                };
                eprintln!("seed {seed}: {outcome:?}");
                outcome
            })
            .collect()
    })
}

// ── criterion 1 ─────────────────────────────────────────────────────

fn weighted_loss(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let shape = tape.shape(out).to_vec();
    let numel: usize = shape.iter().product();
    let mut rng = DeterministicRng::new(seed, 4242);
    let w = tape.leaf_owned(
        shape,
        (0..numel).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        false,
    );
    let prod = tape.mul(out, w).expect("same shape");
    tape.sum_all(prod)
}

fn fd_case(shape: &[usize], seed: u64, build: &dyn Fn(&mut Tape, Var) -> Var) -> f64 {
    let mut rng = DeterministicRng::new(seed, 1);
    let numel: usize = shape.iter().product();
    let x: Vec<f64> = (0..numel).map(|_| rng.normal()).collect();

    let mut tape = Tape::new();
    let leaf = tape.leaf_owned(shape.to_vec(), x.clone(), true);
    let out = build(&mut tape, leaf);
    let loss = weighted_loss(&mut tape, out, seed);
    tape.backward(loss).expect("backward");
    let analytic = tape.grad(leaf).expect("leaf grad").to_vec();

    let numeric = finite_diff_grad(
        |probe| {
            let mut t = Tape::new();
            let leaf = t.leaf_owned(shape.to_vec(), probe.to_vec(), false);
            let out = build(&mut t, leaf);
            let loss = weighted_loss(&mut t, out, seed);
            t.scalar_value(loss)
        },
        &x,
        1e-4,
    );
    max_rel_error(&analytic, &numeric)
}

#[test]
fn criterion_01_autodiff_correctness() {
    let t0 = Instant::now();
    let mut cases = 0usize;
    let mut worst: f64 = 0.0;

    type OpBuilder = Box<dyn Fn(u64) -> (Vec<usize>, Box<dyn Fn(&mut Tape, Var) -> Var>)>;
    let dims = |seed: u64| {
        let mut rng = DeterministicRng::new(seed, 2);
        (2 + rng.below(3), 2 + rng.below(4))
    };
    let ops: Vec<(&str, OpBuilder)> = vec![
        ("matmul", Box::new(move |seed| {
            let (r, c) = dims(seed);
            let mut rng = DeterministicRng::new(seed, 3);
            let k = 2 + rng.below(3);
            let b = Tensor::randn(vec![c, k], 1.0, &mut rng);
            (vec![r, c], Box::new(move |t: &mut Tape, x| {
                let bv = t.leaf(&b, false);
                t.matmul(x, bv).expect("matmul")
            }))
        })),
        ("add", Box::new(move |seed| {
            let (r, c) = dims(seed);
            let mut rng = DeterministicRng::new(seed, 4);
            let b = Tensor::randn(vec![r, c], 1.0, &mut rng);
            (vec![r, c], Box::new(move |t: &mut Tape, x| {
                let bv = t.leaf(&b, false);
                t.add(x, bv).expect("add")
            }))
        })),
        ("mul", Box::new(move |seed| {
            let (r, c) = dims(seed);
            let mut rng = DeterministicRng::new(seed, 5);
            let b = Tensor::randn(vec![r, c], 1.0, &mut rng);
            (vec![r, c], Box::new(move |t: &mut Tape, x| {
                let bv = t.leaf(&b, false);
                t.mul(x, bv).expect("mul")
            }))
        })),
        ("scale", Box::new(move |seed| {
            let (r, c) = dims(seed);
            (vec![r, c], Box::new(|t: &mut Tape, x| t.scale(x, 0.37)))
        })),
        ("add_row", Box::new(move |seed| {
            let (r, c) = dims(seed);
            let mut rng = DeterministicRng::new(seed, 6);
            let row = Tensor::randn(vec![1, c], 1.0, &mut rng);
            (vec![r, c], Box::new(move |t: &mut Tape, x| {
                let rv = t.leaf(&row, false);
                t.add_row(x, rv).expect("add_row")
            }))
        })),
        ("transpose", Box::new(move |seed| {
            let (r, c) = dims(seed);
            (vec![r, c], Box::new(|t: &mut Tape, x| t.transpose(x).expect("transpose")))
        })),
        ("softmax_rows", Box::new(move |seed| {
            let (r, c) = dims(seed);
            (vec![r, c], Box::new(|t: &mut Tape, x| t.softmax_rows(x).expect("softmax")))
        })),
        ("layer_norm", Box::new(move |seed| {
            let (r, c) = dims(seed);
            let mut rng = DeterministicRng::new(seed, 7);
            let gain = Tensor::randn(vec![c], 1.0, &mut rng);
            let bias = Tensor::randn(vec![c], 1.0, &mut rng);
            (vec![r, c], Box::new(move |t: &mut Tape, x| {
                let g = t.leaf(&gain, false);
                let b = t.leaf(&bias, false);
                t.layer_norm(x, g, b, 1e-5).expect("layer_norm")
            }))
        })),
        ("gelu", Box::new(move |seed| {
            let (r, c) = dims(seed);
            (vec![r, c], Box::new(|t: &mut Tape, x| t.gelu(x)))
        })),
        ("relu_shifted", Box::new(move |seed| {
            let (r, c) = dims(seed);
            // Shift away from the kink before applying relu.
            (vec![r, c], Box::new(|t: &mut Tape, x| {
                let shifted = t.scale(x, 3.0);
                t.relu(shifted)
            }))
        })),
        ("reductions", Box::new(move |seed| {
            let (r, c) = dims(seed);
            (vec![r, c], Box::new(|t: &mut Tape, x| {
                let m = t.mean_rows(x).expect("mean_rows");
                t.mean_all(m)
            }))
        })),
        ("reshape_slice_concat", Box::new(move |seed| {
            let (r, c) = dims(seed);
            (vec![r, c], Box::new(move |t: &mut Tape, x| {
                let re = t.reshape(x, vec![c, r]).expect("reshape");
                let tr = t.transpose(re).expect("transpose");
                let cat = t.concat_rows(&[tr, x]).expect("concat");
                let cc = t.concat_cols(&[cat, cat]).expect("concat_cols");
                let sr = t.slice_rows(cc, 0, r).expect("slice_rows");
                t.slice_cols(sr, 1, c + 1).expect("slice_cols")
            }))
        })),
        ("conv3d", Box::new(move |seed| {
            let mut rng = DeterministicRng::new(seed, 8);
            let cin = 1 + rng.below(2);
            let cout = 1 + rng.below(2);
            let ext = 3 + rng.below(2);
            let stride = 1 + rng.below(2);
            let w = Tensor::randn(vec![cout, cin, 3, 3, 3], 0.5, &mut rng);
            let b = Tensor::randn(vec![cout], 0.5, &mut rng);
            (vec![cin, ext, ext, ext], Box::new(move |t: &mut Tape, x| {
                let wv = t.leaf(&w, false);
                let bv = t.leaf(&b, false);
                t.conv3d(x, wv, bv, stride, 1).expect("conv3d")
            }))
        })),
    ];

    for (name, builder) in &ops {
        for case in 0..8u64 {
            let seed = 7_000 + case * 131 + cases as u64;
            let (shape, build) = builder(seed);
            let err = fd_case(&shape, seed, build.as_ref());
            assert!(err < 1e-5, "{name} case {case}: rel err {err}");
            worst = worst.max(err);
            cases += 1;
        }
    }
    assert!(cases >= 100, "only {cases} randomized op cases");

    // Full model: input gradient against central differences, rel 1e-4,
    // on 10 random voxels of a desk-size model.
    let cfg = ModelConfig::desk();
    let model = BrainAgeModel::init(cfg.clone(), VolumeStats::identity(cfg.regions))
        .expect("desk model");
    let mut rng = DeterministicRng::new(99, 0);
    let (c1, c2, t_ext) = cfg.chunk;
    let chunk = |rng: &mut DeterministicRng| {
        Tensor::new(
            vec![c1, c2, t_ext],
            (0..c1 * c2 * t_ext).map(|_| rng.next_f64()).collect(),
        )
        .expect("chunk")
    };
    let sample = PseudoSample {
        subject_id: "fd".into(),
        scan_id: "fd-0".into(),
        view_s: chunk(&mut rng),
        view_c: chunk(&mut rng),
        view_a: chunk(&mut rng),
        region_volumes: (0..cfg.regions).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        age: 70.0,
        group: Group::Cn,
        cog_score: 30.0,
    };
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, false);
    let (yhat, chunks) = model
        .forward_sample(&mut tape, &vars, &sample, true)
        .expect("forward");
    tape.backward(yhat).expect("backward");

    let mut model_worst: f64 = 0.0;
    for probe_i in 0..10 {
        let view = probe_i % 3;
        let idx = rng.below(c1 * c2 * t_ext);
        let analytic = tape.grad(chunks[view]).expect("chunk grad")[idx];
        let h = 1e-4;
        let eval = |delta: f64| -> f64 {
            let mut s = sample.clone();
            let target = match view {
                0 => &mut s.view_s,
                1 => &mut s.view_c,
                _ => &mut s.view_a,
            };
            target.data_mut()[idx] += delta;
            model.predict(&s).expect("predict")
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        let scale = analytic.abs().max(numeric.abs()).max(1e-4);
        let err = (analytic - numeric).abs() / scale;
        assert!(err < 1e-4, "model voxel {probe_i}: rel err {err}");
        model_worst = model_worst.max(err);
    }

    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 120.0, "criterion 1 took {secs:.1}s (cap 120s)");
    println!(
        "criterion 1 PASS: {cases} op cases (worst rel err {worst:.2e}), \
         10 model voxels (worst {model_worst:.2e}), {secs:.1}s"
    );
}

// ── criterion 2 ─────────────────────────────────────────────────────

#[test]
fn criterion_02_attention_invariants() {
    // Softmax rows sum to 1 within 1e-9 on random logits.
    let mut rng = DeterministicRng::new(2, 0);
    let mut worst_sum: f64 = 0.0;
    for _ in 0..50 {
        let r = 1 + rng.below(6);
        let c = 1 + rng.below(12);
        let logits = Tensor::randn(vec![r, c], 5.0, &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(&logits, false);
        let s = tape.softmax_rows(x).expect("softmax");
        for i in 0..r {
            let sum: f64 = tape.value(s)[i * c..(i + 1) * c].iter().sum();
            worst_sum = worst_sum.max((sum - 1.0).abs());
        }
    }
    assert!(worst_sum < 1e-9, "row sum deviation {worst_sum}");

    // Stem output invariant under input-token permutation within 1e-12.
    let stem_cfg = brainage_core::attention::StemConfig {
        m: 16,
        d_model: 64,
        n_heads: 4,
        ff_width: 128,
    };
    let params = StemParams::init(stem_cfg, 21, "acc.stem");
    let tokens = Tensor::randn(vec![40, 64], 1.0, &mut rng);
    let mut perm: Vec<usize> = (0..40).collect();
    rng.shuffle(&mut perm);
    let mut permuted = Tensor::zeros(vec![40, 64]);
    for (dst, &src) in perm.iter().enumerate() {
        for j in 0..64 {
            permuted.set(&[dst, j], tokens.at(&[src, j]));
        }
    }
    let run = |t: &Tensor| {
        let mut tape = Tape::new();
        let stem = params.bind(&mut tape, false);
        let tv = tape.leaf(t, false);
        let out = stem.forward(&mut tape, tv).expect("stem");
        tape.value(out).to_vec()
    };
    let (a, b) = (run(&tokens), run(&permuted));
    let worst_perm = a
        .iter()
        .zip(&b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    assert!(worst_perm < 1e-12, "permutation deviation {worst_perm}");

    // Single key-value pair: attention returns v exactly.
    let mut tape = Tape::new();
    let q = tape.leaf(&Tensor::randn(vec![5, 8], 1.0, &mut rng), false);
    let k = tape.leaf(&Tensor::randn(vec![1, 8], 1.0, &mut rng), false);
    let v_t = Tensor::randn(vec![1, 8], 1.0, &mut rng);
    let v = tape.leaf(&v_t, false);
    let out = scaled_dot_attention(&mut tape, q, k, v).expect("sdpa");
    for row in 0..5 {
        assert_eq!(&tape.value(out)[row * 8..(row + 1) * 8], v_t.data());
    }

    println!(
        "criterion 2 PASS: softmax row sums within {worst_sum:.2e}, stem permutation \
         within {worst_perm:.2e}, N_k=1 returns v bit-exactly"
    );
}

// ── criterion 3 ─────────────────────────────────────────────────────

#[test]
fn criterion_03_complexity_scaling() {
    let t0 = Instant::now();
    let sizes = [256usize, 512, 1024, 2048, 4096];
    let stem_cfg = ModelConfig::desk().stem();

    let stem_pts: Vec<(f64, f64)> = sizes
        .iter()
        .map(|&n| {
            let p = bench_stem(&stem_cfg, n, 3, 11);
            (n as f64, p.wall_ns as f64)
        })
        .collect();
    let full_pts: Vec<(f64, f64)> = sizes
        .iter()
        .map(|&n| {
            let p = bench_full_self_attention(64, 4, n, 3, 11);
            (n as f64, p.wall_ns as f64)
        })
        .collect();
    let stem_slope = loglog_slope(&stem_pts);
    let full_slope = loglog_slope(&full_pts);
    assert!(
        (0.8..=1.2).contains(&stem_slope),
        "stem wall slope {stem_slope}"
    );
    assert!(
        (1.8..=2.2).contains(&full_slope),
        "full attention wall slope {full_slope}"
    );

    // Analytic flop ratios at the sweep's top doubling, within +/-5%
    // (lower-order terms vanish as n grows).
    let stem_ratio = stem_flops(&stem_cfg, 4096) as f64 / stem_flops(&stem_cfg, 2048) as f64;
    let full_ratio =
        full_self_attention_flops(64, 4096) as f64 / full_self_attention_flops(64, 2048) as f64;
    assert!(
        (stem_ratio - 2.0).abs() <= 0.1,
        "stem flop ratio {stem_ratio}"
    );
    assert!(
        (full_ratio - 4.0).abs() <= 0.2,
        "full flop ratio {full_ratio}"
    );

    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 180.0, "criterion 3 took {secs:.1}s (cap 180s)");
    println!(
        "criterion 3 PASS: wall slopes stem {stem_slope:.3} / full {full_slope:.3}; \
         flop ratios {stem_ratio:.3} / {full_ratio:.3}; {secs:.1}s"
    );
}

// ── criterion 4 ─────────────────────────────────────────────────────

struct FixedSamples(Vec<PseudoSample>);

impl SampleSource for FixedSamples {
    fn train_len(&self) -> usize {
        self.0.len()
    }
    fn valid_len(&self) -> usize {
        1
    }
    fn train_sample(
        &self,
        idx: usize,
        _rng: &mut DeterministicRng,
        _augment: bool,
    ) -> brainage_core::Result<PseudoSample> {
        Ok(self.0[idx].clone())
    }
    fn valid_sample(&self, _idx: usize) -> brainage_core::Result<PseudoSample> {
        Ok(self.0[0].clone())
    }
}

#[test]
fn criterion_04_optimization_sanity() {
    let t0 = Instant::now();
    // Eight phantom scans from a small CN corpus, fixed (no augmentation).
    let corpus_cfg = CorpusConfig {
        subjects: 12,
        scans_per_subject: (1, 1),
        seed: 404,
        ..CorpusConfig::desk()
    };
    let corpus = MemCorpus::build(&corpus_cfg).expect("overfit corpus");
    let eight: Vec<PseudoSample> = corpus
        .scans
        .iter()
        .take(8)
        .map(|s| s.sample.clone())
        .collect();
    assert_eq!(eight.len(), 8);
    let source = FixedSamples(eight);

    let model_cfg = ModelConfig {
        seed: 404,
        ..ModelConfig::desk()
    };
    let model = BrainAgeModel::init(model_cfg, corpus.volume_stats.clone()).expect("model");
    // Full-batch steps: one step per epoch, 300 steps, constant lr.
    let train_cfg = TrainConfig {
        epochs: 300,
        batch_size: 8,
        lr0: 1e-2,
        decay_every: 1000,
        augment: false,
        seed: 404,
        ..TrainConfig::desk()
    };
    let res = fit(model, &source, &train_cfg).expect("overfit run");
    let final_mse = res.log.last().expect("log").train_mse;
    assert!(
        final_mse < 0.1,
        "8-sample overfit reached only MSE {final_mse}"
    );

    // One small-lr step decreases the fixed batch loss in >= 95% of
    // random inits (tiny model for speed; the property is scale-free).
    let tiny_cfg = ModelConfig {
        chunk: (8, 8, 4),
        regions: 4,
        encoder_channels: vec![2],
        d_model: 8,
        n_heads: 2,
        stem_queries: 2,
        trunk_layers: 1,
        ff_width: 12,
        head_hidden: 8,
        head_bias_init: 68.5,
        seed: 0,
    };
    let mut rng = DeterministicRng::new(4040, 0);
    let batch: Vec<PseudoSample> = (0..4)
        .map(|i| {
            let mut chunk = || {
                Tensor::new(
                    vec![8, 8, 4],
                    (0..8 * 8 * 4).map(|_| rng.next_f64()).collect(),
                )
                .expect("chunk")
            };
            PseudoSample {
                subject_id: format!("b{i}"),
                scan_id: format!("b{i}-0"),
                view_s: chunk(),
                view_c: chunk(),
                view_a: chunk(),
                region_volumes: (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect(),
                age: rng.uniform(45.0, 92.0),
                group: Group::Cn,
                cog_score: 30.0,
            }
        })
        .collect();
    let source = FixedSamples(batch.clone());
    let batch_loss = |m: &BrainAgeModel| -> f64 {
        batch
            .iter()
            .map(|s| {
                let e = m.predict(s).expect("predict") - s.age;
                e * e
            })
            .sum::<f64>()
            / batch.len() as f64
    };
    let trials = 40;
    let mut wins = 0;
    for trial in 0..trials {
        let cfg = ModelConfig {
            seed: 5000 + trial,
            ..tiny_cfg.clone()
        };
        let m = BrainAgeModel::init(cfg, VolumeStats::identity(4)).expect("tiny model");
        let before = batch_loss(&m);
        let step_cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            lr0: 1e-6,
            augment: false,
            seed: trial,
            ..TrainConfig::desk()
        };
        let res = fit(m, &source, &step_cfg).expect("single step");
        if batch_loss(&res.final_model) < before {
            wins += 1;
        }
    }
    assert!(
        wins * 100 >= trials * 95,
        "loss decreased in only {wins}/{trials} trials"
    );

    println!(
        "criterion 4 PASS: 8-sample overfit MSE {final_mse:.4} within 300 steps; \
         small-lr step decreased loss in {wins}/{trials} trials; {:.1}s",
        t0.elapsed().as_secs_f64()
    );
}

// ── criterion 5 ─────────────────────────────────────────────────────

#[test]
fn criterion_05_signal_recovery() {
    let run = desk_run();
    let test_rows = predict_rows(&run.model, &run.corpus, run.corpus.split_indices(Split::Test));
    let test_mae = mae(&test_rows).expect("mae");
    let yhat: Vec<f64> = test_rows.iter().map(|p| p.predicted).collect();
    let ages: Vec<f64> = test_rows.iter().map(|p| p.age).collect();
    let (r, _) = pearson(&yhat, &ages).expect("pearson");

    assert!(test_mae <= 3.0, "held-out test MAE {test_mae}");
    assert!(r >= 0.85, "pearson r {r}");
    assert!(
        run.train_seconds < 600.0,
        "desk run took {:.1}s (cap 600s)",
        run.train_seconds
    );
    println!(
        "criterion 5 PASS: test MAE {test_mae:.3} yr (cap 3.0), r {r:.3} (floor 0.85), \
         corpus+train {:.0}s (cap 600s)",
        run.train_seconds
    );
}

// ── criterion 6 ─────────────────────────────────────────────────────

#[test]
fn criterion_06_group_bag_recovery() {
    let t0 = Instant::now();
    let seed = 600u64;
    let corpus_cfg = mixed_corpus_config(140, 60, 60, seed);
    let corpus = MemCorpus::build(&corpus_cfg).expect("mixed corpus");
    let model_cfg = ModelConfig {
        seed,
        ..ModelConfig::desk()
    };
    let model = BrainAgeModel::init(model_cfg, corpus.volume_stats.clone()).expect("model");
    let train_cfg = TrainConfig {
        seed,
        ..TrainConfig::desk()
    };
    let trained = fit(model, &corpus, &train_cfg).expect("training").best;

    let rows = predict_rows(&trained, &corpus, &eval_indices(&corpus));
    let report = brainage_core::stats::evaluate(&rows).expect("report");
    let mean_of = |g: Group| {
        report
            .groups
            .iter()
            .find(|s| s.group == g)
            .expect("group present")
    };
    let (cn, mci, ad) = (mean_of(Group::Cn), mean_of(Group::Mci), mean_of(Group::Ad));
    assert!(
        cn.bag_mean < mci.bag_mean && mci.bag_mean < ad.bag_mean,
        "ordering violated: {} / {} / {}",
        cn.bag_mean,
        mci.bag_mean,
        ad.bag_mean
    );
    for (stats, planted) in [(cn, 0.0), (mci, 2.55), (ad, 6.12)] {
        assert!(
            (stats.bag_mean - planted).abs() <= 1.0,
            "{} recovered {:.3} vs planted {planted}",
            stats.group.label(),
            stats.bag_mean
        );
        assert!(
            stats.bag_ci95_low.is_some() && stats.bag_ci95_high.is_some(),
            "{} missing CI",
            stats.group.label()
        );
    }
    println!(
        "criterion 6 PASS: mean BAG CN {:+.2} ({:+.2},{:+.2}) | MCI {:+.2} ({:+.2},{:+.2}) | \
         AD {:+.2} ({:+.2},{:+.2}) vs planted 0 / 2.55 / 6.12; {:.0}s",
        cn.bag_mean,
        cn.bag_ci95_low.unwrap(),
        cn.bag_ci95_high.unwrap(),
        mci.bag_mean,
        mci.bag_ci95_low.unwrap(),
        mci.bag_ci95_high.unwrap(),
        ad.bag_mean,
        ad.bag_ci95_low.unwrap(),
        ad.bag_ci95_high.unwrap(),
        t0.elapsed().as_secs_f64()
    );
}

// ── criterion 7 ─────────────────────────────────────────────────────

#[test]
fn criterion_07_correlation_pattern() {
    let runs = seed_runs();
    let mut passing = 0;
    for run in runs.iter() {
        let neg_sig = |rp: (f64, f64)| rp.0 < 0.0 && rp.1 < 0.01;
        let ok = neg_sig(run.mci_bag)
            && neg_sig(run.mci_abs)
            && neg_sig(run.ad_bag)
            && neg_sig(run.ad_abs)
            && run.cn_abs.1 > 0.05;
        if ok {
            passing += 1;
        }
    }
    assert!(
        passing >= 8,
        "correlation pattern held in only {passing}/10 seeds: {runs:?}"
    );
    println!(
        "criterion 7 PASS: BAG/abs-err vs cognitive score negative with p<0.01 in MCI+AD \
         and CN non-significant in {passing}/10 seeds (floor 8)"
    );
}

// ── criterion 8 ─────────────────────────────────────────────────────

#[test]
fn criterion_08_attribution_fidelity() {
    // Top-3 on the trained desk model (CN corpus).
    let run = desk_run();
    let cn_test = cn_test_indices(&run.corpus);
    let ranking = gradient_ranking(&run.model, &run.corpus, &cn_test);
    let top3: Vec<u16> = ranking[..3].to_vec();
    let mut sorted = top3.clone();
    sorted.sort_unstable();
    assert_eq!(
        sorted,
        vec![1, 2, 3],
        "planted regions not the top 3: {ranking:?}"
    );

    // Gradient vs occlusion top-1 agreement across the ten seed runs.
    let agreeing = seed_runs().iter().filter(|r| r.top1_agrees).count();
    assert!(agreeing >= 9, "top-1 agreement in only {agreeing}/10 seeds");
    println!(
        "criterion 8 PASS: desk top-3 = {top3:?} (planted 1,2,3); occlusion agreement \
         {agreeing}/10 seeds (floor 9)"
    );
}

// ── criterion 9 ─────────────────────────────────────────────────────

mod oracle {
    //! Naive two-pass f64 statistics, independent of brainage_core.

    pub fn mean(x: &[f64]) -> f64 {
        x.iter().sum::<f64>() / x.len() as f64
    }

    pub fn mae(pred: &[f64], actual: &[f64]) -> f64 {
        pred.iter()
            .zip(actual)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / pred.len() as f64
    }

    pub fn pearson_r(x: &[f64], y: &[f64]) -> f64 {
        let (mx, my) = (mean(x), mean(y));
        let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
        let vy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
        cov / (vx.sqrt() * vy.sqrt())
    }

    pub fn sample_std(x: &[f64]) -> f64 {
        let m = mean(x);
        (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() - 1) as f64).sqrt()
    }

    pub fn welch_t_stat(a: &[f64], b: &[f64]) -> f64 {
        let (na, nb) = (a.len() as f64, b.len() as f64);
        let (va, vb) = (sample_std(a).powi(2), sample_std(b).powi(2));
        (mean(a) - mean(b)) / (va / na + vb / nb).sqrt()
    }

    /// Student-t CDF by adaptive Simpson on the regularized incomplete
    /// beta with a u^2 substitution; no code shared with the library.
    pub fn t_two_sided_p(t: f64, df: f64) -> f64 {
        let x = df / (df + t * t);
        inc_beta(df / 2.0, 0.5, x)
    }

    pub fn t_quantile_975(df: f64) -> f64 {
        let (mut lo, mut hi) = (0.0, 1.0);
        while cdf(hi, df) < 0.975 {
            hi *= 2.0;
        }
        for _ in 0..120 {
            let mid = 0.5 * (lo + hi);
            if cdf(mid, df) < 0.975 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    fn cdf(t: f64, df: f64) -> f64 {
        1.0 - 0.5 * t_two_sided_p(t, df)
    }

    fn inc_beta(a: f64, b: f64, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        if x >= 1.0 {
            return 1.0;
        }
        if x > 0.95 {
            return 1.0 - inc_beta(b, a, 1.0 - x);
        }
        let f = |u: f64| 2.0 * u.powf(2.0 * a - 1.0) * (1.0 - u * u).powf(b - 1.0);
        let num = simpson(&f, 0.0, x.sqrt());
        let half = simpson(&f, 0.0, (0.5f64).sqrt());
        let g = |u: f64| 2.0 * u.powf(2.0 * b - 1.0) * (1.0 - u * u).powf(a - 1.0);
        let upper = simpson(&g, 0.0, (0.5f64).sqrt());
        num / (half + upper)
    }

    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
        fn s(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
            (b - a) / 6.0 * (f(a) + 4.0 * f(0.5 * (a + b)) + f(b))
        }
        fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, whole: f64, eps: f64, depth: usize) -> f64 {
            let m = 0.5 * (a + b);
            let (l, r) = (s(f, a, m), s(f, m, b));
            if depth == 0 || (l + r - whole).abs() < 15.0 * eps {
                l + r + (l + r - whole) / 15.0
            } else {
                rec(f, a, m, l, eps / 2.0, depth - 1) + rec(f, m, b, r, eps / 2.0, depth - 1)
            }
        }
        rec(f, a, b, s(f, a, b), 1e-13, 48)
    }
}

#[test]
fn criterion_09_statistics_oracle_equivalence() {
    let t0 = Instant::now();
    let mut rng = DeterministicRng::new(909, 0);
    let mut worst: f64 = 0.0;
    let mut quantile_cache: std::collections::BTreeMap<usize, f64> = Default::default();
    for trial in 0..1000 {
        let n = 5 + rng.below(45);
        let x: Vec<f64> = (0..n).map(|_| rng.normal_scaled(70.0, 12.0)).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|v| v + rng.normal_scaled(0.0, 4.0))
            .collect();

        // MAE.
        let preds: Vec<AgePrediction> = x
            .iter()
            .zip(&y)
            .enumerate()
            .map(|(i, (a, p))| AgePrediction {
                scan_id: format!("t{i}"),
                subject_id: format!("t{i}"),
                age: *a,
                predicted: *p,
                group: Group::Cn,
                cog_score: 30.0,
            })
            .collect();
        worst = worst.max((mae(&preds).expect("mae") - oracle::mae(&y, &x)).abs());

        // Pearson r and p.
        let (r, p) = pearson(&x, &y).expect("pearson");
        worst = worst.max((r - oracle::pearson_r(&x, &y)).abs());
        let t_stat = r * (((n - 2) as f64) / (1.0 - r * r)).sqrt();
        worst = worst.max((p - oracle::t_two_sided_p(t_stat, (n - 2) as f64)).abs());

        // 95% CI.
        let (m, lo, hi) = mean_ci95(&x).expect("ci");
        let tq = *quantile_cache
            .entry(n - 1)
            .or_insert_with(|| oracle::t_quantile_975((n - 1) as f64));
        let se = oracle::sample_std(&x) / (n as f64).sqrt();
        worst = worst.max((m - oracle::mean(&x)).abs());
        worst = worst.max((lo - (oracle::mean(&x) - tq * se)).abs());
        worst = worst.max((hi - (oracle::mean(&x) + tq * se)).abs());

        // Welch t and p.
        let (wt, wp) = welch_t(&x, &y).expect("welch");
        worst = worst.max((wt - oracle::welch_t_stat(&x, &y)).abs());
        if trial % 10 == 0 {
            // Full quadrature p-value spot checks (fractional df).
            let (na, nb) = (n as f64, n as f64);
            let (va, vb) = (
                oracle::sample_std(&x).powi(2),
                oracle::sample_std(&y).powi(2),
            );
            let se2 = va / na + vb / nb;
            let df = se2 * se2
                / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
            worst = worst.max((wp - oracle::t_two_sided_p(wt, df)).abs());
        }
    }
    assert!(worst < 1e-9, "worst oracle deviation {worst}");
    println!(
        "criterion 9 PASS: 1000 random vectors, worst |deviation| {worst:.2e} (< 1e-9); {:.1}s",
        t0.elapsed().as_secs_f64()
    );
}

// ── criterion 10 ────────────────────────────────────────────────────

#[test]
fn criterion_10_pipeline_determinism() {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().expect("tempdir");
    let config_for = |run_dir: &std::path::Path| {
        serde_json::json!({
            "run_dir": run_dir,
            "corpus": {
                "grid": 32, "regions": 8, "subjects": 14,
                "scans_per_subject": [1, 2],
                "group_mix": {"cn": 1.0, "mci": 0.0, "ad": 0.0},
                "age_range": [42.0, 95.0], "noise_sigma": 2.0, "voxel_mm": 2.0,
                "chunk": [16, 16, 4], "seed": 10
            },
            "model": {
                "chunk": [16, 16, 4], "regions": 8, "encoder_channels": [4, 8],
                "d_model": 16, "n_heads": 2, "stem_queries": 4, "trunk_layers": 1,
                "ff_width": 32, "head_hidden": 16, "head_bias_init": 68.5, "seed": 10
            },
            "train": {
                "lr0": 1e-3, "decay_factor": 0.1, "decay_every": 10, "batch_size": 4,
                "epochs": 3, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8, "seed": 10,
                "augment": true, "clip": null
            },
            "bench": {"sizes": [32, 64], "reps": 1, "seed": 1}
        })
    };

    let run_pipeline = |name: &str| -> std::path::PathBuf {
        let run_dir = dir.path().join(name);
        let cfg_path = dir.path().join(format!("{name}.json"));
        std::fs::write(
            &cfg_path,
            serde_json::to_string_pretty(&config_for(&run_dir)).expect("config json"),
        )
        .expect("write config");
        for cmd in ["gen-data", "train", "eval", "attribute"] {
            let out = std::process::Command::new(env!("CARGO_BIN_EXE_brainage"))
                .args([
                    cmd,
                    "--config",
                    cfg_path.to_str().expect("utf8"),
                    "--threads",
                    "1",
                ])
                .output()
                .expect("spawn brainage");
            assert!(
                out.status.success(),
                "{cmd} failed: {}",
                String::from_utf8_lossy(&out.stderr)
            );
        }
        run_dir
    };

    let a = run_pipeline("a");
    let b = run_pipeline("b");

    // metrics.json byte-identical.
    let ma = std::fs::read(a.join("metrics.json")).expect("metrics a");
    let mb = std::fs::read(b.join("metrics.json")).expect("metrics b");
    assert_eq!(ma, mb, "metrics.json differs between runs");

    // Checkpoints byte-identical, file by file.
    let list = |root: &std::path::Path| -> Vec<std::path::PathBuf> {
        let mut files = Vec::new();
        let mut stack = vec![root.join("checkpoints")];
        while let Some(d) = stack.pop() {
            for entry in std::fs::read_dir(&d).expect("readdir") {
                let p = entry.expect("entry").path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    files.push(p.strip_prefix(root).expect("rel").to_path_buf());
                }
            }
        }
        files.sort();
        files
    };
    let files_a = list(&a);
    assert_eq!(files_a, list(&b), "checkpoint file sets differ");
    assert!(!files_a.is_empty());
    let mut compared = 0;
    for rel in &files_a {
        let ba = std::fs::read(a.join(rel)).expect("read a");
        let bb = std::fs::read(b.join(rel)).expect("read b");
        assert_eq!(ba, bb, "checkpoint file {} differs", rel.display());
        compared += 1;
    }
    println!(
        "criterion 10 PASS: two --threads 1 pipeline runs byte-identical \
         (metrics.json + {compared} checkpoint files); {:.1}s",
        t0.elapsed().as_secs_f64()
    );
}
