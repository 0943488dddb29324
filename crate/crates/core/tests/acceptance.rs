//! Acceptance suite: every headline claim checked at its stated tolerance,
//! one printed verdict line per test. The benchmark-scale claims share one
//! set of seeded runs, built once on first use.

use madapt_core::checkpoint::{restore, save_checkpoint};
use madapt_core::data::{split_fraction, Fraction, ANSWERS_PER_QUESTION};
use madapt_core::eval::{evaluate, joint_embeddings, probe_domain_gap, vqa_accuracy};
use madapt_core::experiments::{prepare, pretrain, run_benchmark_seed, Protocol};
use madapt_core::graph::grad_check_multi;
use madapt_core::losses::{
    loss_adversarial_graph, loss_classification_graph, loss_multimodal_graph, mmd_sq,
    mmd_sq_graph, KernelSpec, LossWeights,
};
use madapt_core::model::{BoundModel, DualDomainModel, Head, ModelConfig};
use madapt_core::train::{
    adapt, finetune, run_csv, train_target_only, AblationFlags, Schedule, TrainSettings,
};
use madapt_core::{Graph, Result, Tensor, TensorId};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;
use std::time::Instant;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

// ── shared benchmark runs ──

/// Everything the benchmark-scale tests assert on, reduced to scalars so
/// the dataset and model buffers are freed between seeds.
struct SeedStats {
    target_only: f64,
    finetune: f64,
    adapt: f64,
    elapsed: f64,
    param_count: usize,
    probe_pre: f64,
    probe_post: f64,
    lj_first: f64,
    lj_last: f64,
    lmm_first: f64,
    lmm_last: f64,
    adapt_quarter: f64,
    target_only_half: f64,
}

fn seed_stats(protocol: &Protocol, seed: u64) -> SeedStats {
    let mut data = protocol.data.clone();
    data.seed = seed;
    let started = Instant::now();
    let prep = prepare(&data).expect("benchmark data generates");
    let run = run_benchmark_seed(protocol, &prep, seed, Fraction::FULL).expect("benchmark runs");
    let elapsed = started.elapsed().as_secs_f64();

    let probe = |model: &DualDomainModel| {
        let es = joint_embeddings(model, &prep.pair.source_eval).unwrap();
        let et = joint_embeddings(model, &prep.pair.target_eval).unwrap();
        probe_domain_gap(&es, &et, &protocol.kernel, seed).unwrap().accuracy
    };
    let probe_pre = probe(&run.pretrained);
    let probe_post = probe(&run.adapted.model);
    let first = &run.adapted.rows[0];
    let last = run.adapted.rows.last().unwrap();

    let settings = protocol.settings(protocol.adapt_iterations, AblationFlags::default(), seed);
    let quarter = split_fraction(&prep.pair.target_train, Fraction::QUARTER, seed);
    let mut quarter_model = run.pretrained.clone();
    adapt(
        &mut quarter_model,
        &prep.pair.source_train,
        &prep.source_vocab,
        &quarter,
        &prep.target_vocab,
        &settings,
    )
    .expect("quarter-budget adaptation runs");
    let adapt_quarter = evaluate(
        &quarter_model,
        &prep.pair.target_eval,
        &prep.target_vocab,
        Head::Target,
    )
    .unwrap()
    .overall;

    let half = split_fraction(&prep.pair.target_train, Fraction::HALF, seed);
    let mut half_model =
        DualDomainModel::seeded(prep.model_config(&protocol.dims), seed).unwrap();
    train_target_only(&mut half_model, &half, &prep.target_vocab, &settings)
        .expect("half-budget scratch training runs");
    let target_only_half = evaluate(
        &half_model,
        &prep.pair.target_eval,
        &prep.target_vocab,
        Head::Target,
    )
    .unwrap()
    .overall;

    let stats = SeedStats {
        target_only: run.target_only.report.overall,
        finetune: run.finetuned.report.overall,
        adapt: run.adapted.report.overall,
        elapsed,
        param_count: run.adapted.model.param_count(),
        probe_pre,
        probe_post,
        lj_first: first.loss_joint.unwrap(),
        lj_last: last.loss_joint.unwrap(),
        lmm_first: first.loss_multimodal.unwrap(),
        lmm_last: last.loss_multimodal.unwrap(),
        adapt_quarter,
        target_only_half,
    };
    println!(
        "  seed {seed}: target-only {:.4} finetune {:.4} adapt {:.4} ({:.0}s)",
        stats.target_only, stats.finetune, stats.adapt, elapsed
    );
    stats
}

fn forward_stats() -> &'static [SeedStats] {
    static CELL: OnceLock<Vec<SeedStats>> = OnceLock::new();
    CELL.get_or_init(|| {
        let protocol = Protocol::benchmark(false);
        SEEDS.iter().map(|&s| seed_stats(&protocol, s)).collect()
    })
}

fn reverse_stats() -> &'static [(f64, f64, f64)] {
    static CELL: OnceLock<Vec<(f64, f64, f64)>> = OnceLock::new();
    CELL.get_or_init(|| {
        let protocol = Protocol::benchmark(true);
        SEEDS
            .iter()
            .map(|&seed| {
                let mut data = protocol.data.clone();
                data.seed = seed;
                let prep = prepare(&data).expect("reversed data generates");
                let run = run_benchmark_seed(&protocol, &prep, seed, Fraction::FULL)
                    .expect("reversed benchmark runs");
                let t = (
                    run.target_only.report.overall,
                    run.finetuned.report.overall,
                    run.adapted.report.overall,
                );
                println!(
                    "  reversed seed {seed}: target-only {:.4} finetune {:.4} adapt {:.4}",
                    t.0, t.1, t.2
                );
                t
            })
            .collect()
    })
}

// ── toy fixtures for the exact-gradient claims ──

fn toy_config() -> ModelConfig {
    ModelConfig {
        d_q: 4,
        d_v: 3,
        k: 2,
        g: 2,
        d_e: 5,
        embed_dim: 3,
        attn_dim: 3,
        classifier_hidden: 5,
        discriminator_hidden: 4,
        max_question_len: 6,
        token_vocab: 7,
        source_classes: 4,
        target_classes: 4,
    }
}

struct ToyBatch {
    tokens: Vec<Vec<usize>>,
    regions: Tensor,
    grids: Tensor,
    labels: Vec<Option<usize>>,
}

fn toy_batch(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> ToyBatch {
    let b = 3;
    let tokens = (0..b)
        .map(|_| {
            let len = rng.random_range(2..=4);
            (0..len).map(|_| rng.random_range(1..cfg.token_vocab)).collect()
        })
        .collect();
    let mut mat = |rows: usize| {
        let data = (0..rows * cfg.d_v).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(vec![rows, cfg.d_v], data).unwrap()
    };
    let regions = mat(b * cfg.k);
    let grids = mat(b * cfg.g);
    let labels = (0..b)
        .map(|_| Some(rng.random_range(0..cfg.source_classes)))
        .collect();
    ToyBatch {
        tokens,
        regions,
        grids,
        labels,
    }
}

fn plain_discriminate(g: &mut Graph, bound: &BoundModel<'_>, e: TensorId) -> Result<TensorId> {
    let logit = bound.discriminator.forward(g, e)?;
    g.sigmoid(logit)
}

// ── the claims ──

#[test]
fn objective_gradients_match_finite_differences() {
    let cfg = toy_config();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let src = toy_batch(&cfg, &mut rng);
    let tgt = toy_batch(&cfg, &mut rng);
    let model = DualDomainModel::seeded(cfg.clone(), 42).unwrap();
    let params: Vec<Tensor> = model.params().into_iter().map(|(_, t)| t.clone()).collect();
    let n_params: usize = params.iter().map(Tensor::numel).sum();
    let w = LossWeights {
        lambda_j: 0.4,
        lambda_mm: 0.2,
        lambda_adv: 0.3,
        gamma_a: 0.8,
        gamma_b: 1.0,
        gamma_c: 0.5,
    };
    let kernel = KernelSpec::fixed(1.5).unwrap();

    let started = Instant::now();
    let worst = grad_check_multi(
        |g, ids| {
            let bound = BoundModel::from_param_ids(&cfg, ids)?;
            let enc_s = bound.encode(g, &src.tokens, &src.regions, &src.grids)?;
            let enc_t = bound.encode(g, &tgt.tokens, &tgt.regions, &tgt.grids)?;
            let logits_s = bound.classify(g, enc_s.e, Head::Source)?;
            let logits_t = bound.classify(g, enc_t.e, Head::Target)?;
            let l_c = loss_classification_graph(
                g, logits_s, &src.labels, logits_t, &tgt.labels, w.gamma_c,
            )?;
            let l_j = mmd_sq_graph(g, enc_s.e, enc_t.e, &kernel)?;
            let l_mm = loss_multimodal_graph(
                g, enc_s.q, enc_t.q, enc_s.v, enc_t.v, w.gamma_a, w.gamma_b, &kernel,
            )?;
            let p_s = plain_discriminate(g, &bound, enc_s.e)?;
            let p_t = plain_discriminate(g, &bound, enc_t.e)?;
            let l_adv = loss_adversarial_graph(g, p_s, p_t)?;
            let wj = g.scale(l_j, w.lambda_j)?;
            let wmm = g.scale(l_mm, w.lambda_mm)?;
            let wadv = g.scale(l_adv, -w.lambda_adv)?;
            let t1 = g.add(l_c, wj)?;
            let t2 = g.add(t1, wmm)?;
            g.add(t2, wadv)
        },
        &params,
        1e-5,
    )
    .unwrap();
    let secs = started.elapsed().as_secs_f64();
    assert!(
        worst <= 1e-5,
        "FAIL full-objective gradients: worst relative error {worst:.3e} > 1e-5"
    );
    assert!(secs < 30.0, "FAIL gradient check runtime {secs:.1}s >= 30s");
    println!(
        "PASS full-objective gradients: worst relative error {worst:.2e} over {n_params} \
         parameters in {secs:.1}s (tolerance 1e-5, budget 30s)"
    );
}

fn oracle_sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for k in 0..a.len() {
        let diff = a[k] - b[k];
        acc += diff * diff;
    }
    acc
}

fn oracle_mmd(x: &Tensor, y: &Tensor, sigma: f64) -> f64 {
    let neg_inv = -1.0 / (2.0 * sigma * sigma);
    let (n, m) = (x.rows(), y.rows());
    let mut sxx = 0.0;
    for i in 0..n {
        for j in 0..n {
            sxx += (oracle_sq_dist(x.row(i), x.row(j)) * neg_inv).exp();
        }
    }
    let mut sxy = 0.0;
    for i in 0..n {
        for j in 0..m {
            sxy += (oracle_sq_dist(x.row(i), y.row(j)) * neg_inv).exp();
        }
    }
    let mut syy = 0.0;
    for i in 0..m {
        for j in 0..m {
            syy += (oracle_sq_dist(y.row(i), y.row(j)) * neg_inv).exp();
        }
    }
    1.0 / ((n * n) as f64) * sxx - 2.0 / ((n * m) as f64) * sxy + 1.0 / ((m * m) as f64) * syy
}

fn oracle_median_sigma(x: &Tensor, y: &Tensor) -> f64 {
    let rows: Vec<&[f64]> = (0..x.rows())
        .map(|i| x.row(i))
        .chain((0..y.rows()).map(|j| y.row(j)))
        .collect();
    let mut dists = Vec::new();
    for i in 0..rows.len() {
        for j in (i + 1)..rows.len() {
            dists.push(oracle_sq_dist(rows[i], rows[j]).sqrt());
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 1 {
        dists[mid]
    } else {
        (dists[mid - 1] + dists[mid]) / 2.0
    };
    if median > 0.0 {
        median
    } else {
        1.0
    }
}

#[test]
fn mmd_matches_double_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for case in 0..200 {
        let n = rng.random_range(1..=50);
        let m = rng.random_range(1..=50);
        let d = rng.random_range(1..=8);
        let draw = |rng: &mut ChaCha8Rng, rows: usize| {
            let data = (0..rows * d).map(|_| rng.random_range(-3.0..3.0)).collect();
            Tensor::new(vec![rows, d], data).unwrap()
        };
        let x = draw(&mut rng, n);
        let y = draw(&mut rng, m);
        let (spec, sigma) = if case % 2 == 0 {
            let s = rng.random_range(0.3..3.0);
            (KernelSpec::fixed(s).unwrap(), s)
        } else {
            (KernelSpec::median(), oracle_median_sigma(&x, &y))
        };
        let got = mmd_sq(&x, &y, &spec).unwrap();
        let want = oracle_mmd(&x, &y, sigma);
        assert_eq!(
            got.to_bits(),
            want.to_bits(),
            "FAIL kernel discrepancy oracle: case {case} (n={n}, m={m}, d={d}) got {got} want {want}"
        );
    }

    let mut worst = 0.0_f64;
    for _ in 0..20 {
        let d = rng.random_range(1..=6);
        let a: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let sigma = rng.random_range(0.5..2.5);
        let x = Tensor::new(vec![1, d], a.clone()).unwrap();
        let y = Tensor::new(vec![1, d], b.clone()).unwrap();
        let got = mmd_sq(&x, &y, &KernelSpec::fixed(sigma).unwrap()).unwrap();
        let dist2 = oracle_sq_dist(&a, &b);
        let closed = 2.0 - 2.0 * (-dist2 / (2.0 * sigma * sigma)).exp();
        worst = worst.max((got - closed).abs());
    }
    assert!(
        worst <= 1e-12,
        "FAIL singleton closed form: off by {worst:.3e} > 1e-12"
    );
    println!(
        "PASS kernel discrepancy oracle: 200 instances bitwise equal; singleton closed form \
         off by {worst:.1e} (tolerance 1e-12)"
    );
}

fn adversarial_grads(
    model: &DualDomainModel,
    src: &ToyBatch,
    tgt: &ToyBatch,
    grl_lambda: Option<f64>,
) -> (Vec<String>, Vec<Tensor>) {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let enc_s = bound
        .encode(&mut g, &src.tokens, &src.regions, &src.grids)
        .unwrap();
    let enc_t = bound
        .encode(&mut g, &tgt.tokens, &tgt.regions, &tgt.grids)
        .unwrap();
    let (p_s, p_t) = match grl_lambda {
        Some(l) => (
            bound.discriminate(&mut g, enc_s.e, l).unwrap(),
            bound.discriminate(&mut g, enc_t.e, l).unwrap(),
        ),
        None => (
            plain_discriminate(&mut g, &bound, enc_s.e).unwrap(),
            plain_discriminate(&mut g, &bound, enc_t.e).unwrap(),
        ),
    };
    let l_adv = loss_adversarial_graph(&mut g, p_s, p_t).unwrap();
    g.backward(l_adv).unwrap();
    let names = model.params().into_iter().map(|(n, _)| n).collect();
    let grads = bound
        .param_ids()
        .iter()
        .map(|&id| {
            g.grad(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(g.value(id).shape().to_vec()))
        })
        .collect();
    (names, grads)
}

#[test]
fn gradient_reversal_routes_scaled_gradients() {
    let cfg = toy_config();
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let src = toy_batch(&cfg, &mut rng);
    let tgt = toy_batch(&cfg, &mut rng);
    let model = DualDomainModel::seeded(cfg, 30).unwrap();
    let (names, plain) = adversarial_grads(&model, &src, &tgt, None);

    let mut worst = 0.0_f64;
    for lambda in [0.003, 0.8] {
        let (_, reversed) = adversarial_grads(&model, &src, &tgt, Some(lambda));
        for ((name, with_grl), without) in names.iter().zip(&reversed).zip(&plain) {
            if name.starts_with("discriminator") {
                for (a, b) in with_grl.data().iter().zip(without.data()) {
                    assert_eq!(
                        a.to_bits(),
                        b.to_bits(),
                        "FAIL reversal routing: discriminator gradient changed in {name}"
                    );
                }
            } else {
                for (a, b) in with_grl.data().iter().zip(without.data()) {
                    let want = -lambda * b;
                    let err = (a - want).abs() / want.abs().max(1.0);
                    assert!(
                        err <= 1e-12,
                        "FAIL reversal routing: {name} gradient {a} vs -lambda x {b} (err {err:.3e})"
                    );
                    worst = worst.max(err);
                }
            }
        }
    }
    println!(
        "PASS reversal routing: feature gradients equal -lambda x plain within {worst:.1e} \
         (tolerance 1e-12); discriminator gradients bitwise unchanged"
    );
}

fn oracle_consensus(prediction: &str, answers: &[String]) -> f64 {
    let norm = |s: &str| s.trim().to_lowercase();
    let pred = norm(prediction);
    let mut total = 0.0;
    for j in 0..answers.len() {
        let mut matches = 0;
        for (i, a) in answers.iter().enumerate() {
            if i != j && norm(a) == pred {
                matches += 1;
            }
        }
        total += (matches as f64 / 3.0).min(1.0);
    }
    total / answers.len() as f64
}

#[test]
fn consensus_accuracy_matches_enumeration() {
    let pool = [
        "yes", "no", "2", "cat", " CaT ", "blue", "LEFT", "left", "unanswerable", "3", "dog",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    for case in 0..1000 {
        let answers: Vec<String> = (0..ANSWERS_PER_QUESTION)
            .map(|_| pool[rng.random_range(0..pool.len())].to_string())
            .collect();
        let prediction = pool[rng.random_range(0..pool.len())];
        let got = vqa_accuracy(prediction, &answers).unwrap();
        let want = oracle_consensus(prediction, &answers);
        assert_eq!(
            got.to_bits(),
            want.to_bits(),
            "FAIL consensus metric: case {case} got {got} want {want} ({prediction:?} vs {answers:?})"
        );
    }

    let mut two: Vec<String> = vec!["cat".into(), " CAT ".into()];
    two.extend((0..8).map(|i| format!("distinct{i}")));
    let got = vqa_accuracy("cat", &two).unwrap();
    assert!(
        (got - 0.6).abs() < 1e-12,
        "FAIL consensus metric: two-match case returned {got}, want 0.6"
    );
    println!(
        "PASS consensus metric: 1000 random cases equal the subset enumeration exactly; \
         two-match case = 0.6"
    );
}

#[test]
fn lr_schedule_hits_pinned_values() {
    let s = Schedule::default();
    let pins = [
        (0usize, 0.001),
        (1000, 0.0055),
        (2000, 0.01),
        (6000, 0.0015),
        (10_000, 0.000225),
    ];
    for (iter, want) in pins {
        let got = s.lr_at(iter);
        assert!(
            got == want,
            "FAIL schedule: lr_at({iter}) = {got:?}, want exactly {want:?}"
        );
    }
    println!(
        "PASS schedule: 0.001 @ 0, 0.0055 @ 1000, 0.01 @ 2000, 0.0015 @ 6000, 0.000225 @ 10000"
    );
}

#[test]
fn adaptation_beats_finetune_beats_target_only() {
    let stats = forward_stats();
    let to = mean(stats.iter().map(|s| s.target_only));
    let ft = mean(stats.iter().map(|s| s.finetune));
    let ad = mean(stats.iter().map(|s| s.adapt));
    let runtime: f64 = stats.iter().map(|s| s.elapsed).sum();
    let params = stats[0].param_count;
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let budget = 900.0 * (4.0 / cores as f64).max(1.0);

    assert!(
        (150_000..=250_000).contains(&params),
        "FAIL adaptation ordering: {params} trainable parameters outside the intended scale"
    );
    assert!(
        to < ft,
        "FAIL adaptation ordering: target-only {to:.4} !< finetune {ft:.4} (mean of {} seeds)",
        SEEDS.len()
    );
    assert!(
        ft < ad,
        "FAIL adaptation ordering: finetune {ft:.4} !< adapt {ad:.4} (mean of {} seeds)",
        SEEDS.len()
    );
    let margin_pt = (ad - ft) * 100.0;
    assert!(
        margin_pt >= 1.0,
        "FAIL adaptation ordering: adapt - finetune = {margin_pt:.2} pt < 1.0 pt"
    );
    assert!(
        runtime < budget,
        "FAIL adaptation ordering: runtime {runtime:.0}s over the {budget:.0}s budget ({cores} cores)"
    );
    println!(
        "PASS adaptation ordering: target-only {to:.4} < finetune {ft:.4} < adapt {ad:.4}, \
         margin {margin_pt:.2} pt (>= 1.0), runtime {runtime:.0}s (budget {budget:.0}s on \
         {cores} cores), {params} trainable parameters"
    );
}

#[test]
fn quarter_data_adaptation_beats_half_data_scratch() {
    let stats = forward_stats();
    let ad_q = mean(stats.iter().map(|s| s.adapt_quarter));
    let to_h = mean(stats.iter().map(|s| s.target_only_half));
    assert!(
        ad_q >= to_h,
        "FAIL label budget: adapt on 1/4 of labels {ad_q:.4} < target-only on 1/2 {to_h:.4}"
    );
    println!(
        "PASS label budget: adapt on 1/4 of labels {ad_q:.4} >= target-only on 1/2 {to_h:.4} \
         (mean of {} seeds)",
        SEEDS.len()
    );
}

#[test]
fn alignment_shrinks_domain_gap() {
    let stats = forward_stats();
    let pre = mean(stats.iter().map(|s| s.probe_pre));
    let post = mean(stats.iter().map(|s| s.probe_post));
    let lj_drop = 1.0 - mean(stats.iter().map(|s| s.lj_last)) / mean(stats.iter().map(|s| s.lj_first));
    let lmm_drop =
        1.0 - mean(stats.iter().map(|s| s.lmm_last)) / mean(stats.iter().map(|s| s.lmm_first));

    assert!(
        post < pre,
        "FAIL alignment effect: probe accuracy did not decrease ({pre:.4} -> {post:.4})"
    );
    assert!(
        lj_drop >= 0.5,
        "FAIL alignment effect: joint discrepancy dropped {:.0}% < 50%",
        lj_drop * 100.0
    );
    assert!(
        lmm_drop >= 0.5,
        "FAIL alignment effect: modality discrepancy dropped {:.0}% < 50%",
        lmm_drop * 100.0
    );
    println!(
        "PASS alignment effect: probe accuracy {pre:.4} -> {post:.4}; joint discrepancy \
         -{:.0}%, modality discrepancy -{:.0}% (both >= 50%)",
        lj_drop * 100.0,
        lmm_drop * 100.0
    );
}

#[test]
fn reversed_direction_preserves_ordering() {
    let stats = reverse_stats();
    let to = mean(stats.iter().map(|s| s.0));
    let ft = mean(stats.iter().map(|s| s.1));
    let ad = mean(stats.iter().map(|s| s.2));
    assert!(
        to < ft && ft < ad,
        "FAIL reversed direction: ordering broke (target-only {to:.4}, finetune {ft:.4}, adapt {ad:.4})"
    );
    println!(
        "PASS reversed direction: target-only {to:.4} < finetune {ft:.4} < adapt {ad:.4} \
         (mean of {} seeds)",
        SEEDS.len()
    );
}

fn small_protocol() -> Protocol {
    let mut p = Protocol::benchmark(false);
    p.data.n_source = 400;
    p.data.n_target = 300;
    p.data.n_source_eval = 120;
    p.data.n_target_eval = 120;
    p.data.seed = 9;
    p.pretrain_iterations = 30;
    p.adapt_iterations = 40;
    p.batch_size = 32;
    p.schedule.warmup_iters = 10;
    p.schedule.decay_period = 50;
    p.log_every = 5;
    p
}

#[test]
fn runs_are_reproducible_and_checkpoints_roundtrip() {
    let p = small_protocol();
    let prep = prepare(&p.data).unwrap();
    let once = || {
        let run = run_benchmark_seed(&p, &prep, 3, Fraction::FULL).unwrap();
        (run_csv(&run.adapted.rows), run.adapted.model)
    };
    let (csv_a, model_a) = once();
    let (csv_b, _) = once();
    assert!(
        csv_a == csv_b,
        "FAIL determinism: identical runs produced different logs"
    );

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &model_a, "acceptance roundtrip").unwrap();
    let mut restored = DualDomainModel::seeded(prep.model_config(&p.dims), 999).unwrap();
    let echo = restore(&path, &mut restored).unwrap();
    assert_eq!(echo, "acceptance roundtrip");
    for ((name, a), (_, b)) in model_a.params().iter().zip(restored.params().iter()) {
        assert_eq!(a.data(), b.data(), "FAIL persistence: {name} changed on disk");
    }
    let before = evaluate(&model_a, &prep.pair.target_eval, &prep.target_vocab, Head::Target).unwrap();
    let after = evaluate(&restored, &prep.pair.target_eval, &prep.target_vocab, Head::Target).unwrap();
    assert_eq!(
        before, after,
        "FAIL persistence: scores differ after checkpoint roundtrip"
    );
    println!(
        "PASS determinism and persistence: same-seed logs bitwise identical; checkpoint \
         roundtrip reproduces the evaluation exactly (overall {:.4})",
        after.overall
    );
}

#[test]
fn adapt_without_alignment_is_finetune() {
    let p = small_protocol();
    let prep = prepare(&p.data).unwrap();
    let (pretrained, _) = pretrain(&p, &prep, 4).unwrap();
    let base_settings = p.settings(p.adapt_iterations, AblationFlags::default(), 4);

    let mut ft = pretrained.clone();
    let ft_rows = finetune(&mut ft, &prep.pair.target_train, &prep.target_vocab, &base_settings)
        .unwrap();

    let mut weights = p.weights;
    weights.gamma_c = 0.0;
    let stripped = TrainSettings {
        flags: AblationFlags {
            per_modality_mmd: false,
            joint_mmd: false,
            adversarial: false,
            source_ce: true,
        },
        weights,
        ..base_settings
    };
    let mut ad = pretrained.clone();
    let ad_rows = adapt(
        &mut ad,
        &prep.pair.source_train,
        &prep.source_vocab,
        &prep.pair.target_train,
        &prep.target_vocab,
        &stripped,
    )
    .unwrap();

    assert_eq!(ft_rows.len(), ad_rows.len());
    for (f, a) in ft_rows.iter().zip(&ad_rows) {
        assert_eq!(
            f.loss_cls.to_bits(),
            a.loss_cls.to_bits(),
            "FAIL reduction: loss trajectories diverge at iteration {}",
            f.iter
        );
    }
    for ((name, pf), (_, pa)) in ft.params().iter().zip(ad.params().iter()) {
        assert_eq!(
            pf.data(),
            pa.data(),
            "FAIL reduction: parameter {name} differs between the two modes"
        );
    }
    println!(
        "PASS reduction: adaptation with alignment off and no source loss matches fine-tuning \
         bitwise over {} logged steps",
        ft_rows.len()
    );
}
