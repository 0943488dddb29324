//! Scratch calibration runs; not part of the regular suite.

use madapt_core::data::Fraction;
use madapt_core::eval::{joint_embeddings, probe_domain_gap};
use madapt_core::experiments::{prepare, run_benchmark_seed, Protocol};
use std::time::Instant;

struct Point {
    name: &'static str,
    modes: usize,
    noise_scale: f64,
    class_token_prob: f64,
    visual_shift: f64,
    label_skew: f64,
    unanswerable: f64,
    cov_scale: f64,
    pretrain: usize,
    adapt: usize,
    batch: usize,
    lambda_j: f64,
    lambda_mm: f64,
    lambda_adv: f64,
    gamma_c: f64,
}

fn protocol_for(p: &Point) -> Protocol {
    let mut proto = Protocol::benchmark(false);
    proto.data.modes_per_class = p.modes;
    proto.data.noise_scale = p.noise_scale;
    proto.data.class_token_prob = p.class_token_prob;
    proto.data.shift.visual_shift = p.visual_shift;
    proto.data.shift.label_skew = p.label_skew;
    proto.data.shift.unanswerable_frac = p.unanswerable;
    proto.data.shift.cov_scale = p.cov_scale;
    proto.pretrain_iterations = p.pretrain;
    proto.adapt_iterations = p.adapt;
    proto.batch_size = p.batch;
    proto.weights.lambda_j = p.lambda_j;
    proto.weights.lambda_mm = p.lambda_mm;
    proto.weights.lambda_adv = p.lambda_adv;
    proto.weights.gamma_c = p.gamma_c;
    proto
}

#[test]
#[ignore]
fn pilot_sweep() {
    let points = [
        Point {
            name: "P25",
            modes: 6,
            noise_scale: 4.2,
            class_token_prob: 0.15,
            visual_shift: 4.5,
            label_skew: 0.05,
            unanswerable: 0.08,
            cov_scale: 1.0,
            pretrain: 600,
            adapt: 400,
            batch: 128,
            lambda_j: 0.4,
            lambda_mm: 0.12,
            lambda_adv: 0.03,
            gamma_c: 0.25,
        },
        Point {
            name: "P26",
            modes: 6,
            noise_scale: 4.2,
            class_token_prob: 0.15,
            visual_shift: 4.0,
            label_skew: 0.05,
            unanswerable: 0.08,
            cov_scale: 1.0,
            pretrain: 600,
            adapt: 400,
            batch: 128,
            lambda_j: 0.45,
            lambda_mm: 0.15,
            lambda_adv: 0.03,
            gamma_c: 0.25,
        },
        Point {
            name: "P27",
            modes: 6,
            noise_scale: 4.2,
            class_token_prob: 0.15,
            visual_shift: 4.5,
            label_skew: 0.0,
            unanswerable: 0.05,
            cov_scale: 1.1,
            pretrain: 900,
            adapt: 400,
            batch: 96,
            lambda_j: 0.45,
            lambda_mm: 0.12,
            lambda_adv: 0.035,
            gamma_c: 0.2,
        },
    ];

    for point in &points {
        let protocol = protocol_for(point);
        for seed in [1u64, 2] {
            let mut data = protocol.data.clone();
            data.seed = seed;
            let t0 = Instant::now();
            let prep = prepare(&data).unwrap();
            let run = run_benchmark_seed(&protocol, &prep, seed, Fraction::FULL).unwrap();
            let t_run = t0.elapsed().as_secs_f64();
            println!(
                "{} seed {seed}: {t_run:.0}s | target-only {:.4} finetune {:.4} adapt {:.4}",
                point.name,
                run.target_only.report.overall,
                run.finetuned.report.overall,
                run.adapted.report.overall
            );
            let first = &run.adapted.rows[0];
            let mid = &run.adapted.rows[run.adapted.rows.len() / 2];
            let last = run.adapted.rows.last().unwrap();
            println!(
                "  adapt lj {:.4} -> {:.4} -> {:.4} lmm {:.4} -> {:.4} -> {:.4} lc {:.3} -> {:.3}",
                first.loss_joint.unwrap(),
                mid.loss_joint.unwrap(),
                last.loss_joint.unwrap(),
                first.loss_multimodal.unwrap(),
                mid.loss_multimodal.unwrap(),
                last.loss_multimodal.unwrap(),
                first.loss_cls,
                last.loss_cls
            );
            let es_pre = joint_embeddings(&run.pretrained, &prep.pair.source_eval).unwrap();
            let et_pre = joint_embeddings(&run.pretrained, &prep.pair.target_eval).unwrap();
            let es_post = joint_embeddings(&run.adapted.model, &prep.pair.source_eval).unwrap();
            let et_post = joint_embeddings(&run.adapted.model, &prep.pair.target_eval).unwrap();
            let pre = probe_domain_gap(&es_pre, &et_pre, &protocol.kernel, seed).unwrap();
            let post = probe_domain_gap(&es_post, &et_post, &protocol.kernel, seed).unwrap();
            println!(
                "  probe acc {:.4} -> {:.4} mmd {:.5} -> {:.5}",
                pre.accuracy, post.accuracy, pre.mmd_sq, post.mmd_sq
            );
        }
    }
}
