//! Scratch calibration driver for the shift benchmark (not shipped).

use std::time::Instant;

use protoshot::baselines::{train_probe, ProbeModel};
use protoshot::episodes::shift::{generate_shifted, ShiftSpec};
use protoshot::episodes::EmbeddingDataset;
use protoshot::metrics::{eer, evaluate_fewshot, Trial, Truth};
use protoshot::protonet::{Aggregation, DistanceKind, FewShotModel, Objective, BONAFIDE};
use protoshot::trainer::{train, TrainConfig};

fn bench_spec(seed: u64, radius: f64, noise: f64, rot: f64) -> ShiftSpec {
    let mut spec = ShiftSpec::default();
    spec.dim = 32;
    spec.spoof_families = 4;
    spec.n_per_class = 450;
    spec.seed = seed;
    spec.class_separation = radius;
    spec.family_spread = 2.0;
    spec.cluster_sigma = 1.0;
    spec.lowrank_rank = 2;
    spec.lowrank_scale = 0.5;
    spec.translation = 1.0;
    spec.rotation_degrees = rot;
    spec.rotation_planes = 5;
    spec.nuisance_rank = 12;
    spec.nuisance_sigma = 4.0;
    spec.covariance_scale = 1.2;
    spec.label_noise = noise;
    spec.heldout_family = true;
    spec
}

fn probe_eer(probe: &ProbeModel, trials_ds: &EmbeddingDataset) -> f64 {
    let trials: Vec<Trial> = trials_ds
        .records()
        .iter()
        .map(|r| {
            let x: Vec<f64> = r.embedding.iter().map(|&v| f64::from(v)).collect();
            Trial::new(
                r.id.clone(),
                probe.score(&x).unwrap(),
                if r.class_label == BONAFIDE {
                    Truth::Bonafide
                } else {
                    Truth::Fake
                },
            )
        })
        .collect();
    eer(&trials).unwrap()
}


fn mean_norm(ds: &EmbeddingDataset) -> f64 {
    let mut acc = 0.0;
    for r in ds.records() {
        acc += r.embedding.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
    }
    acc / ds.len() as f64
}

fn main() {
    let t0 = Instant::now();
    let n_seeds = 6u64;
    for (radius, noise, rot, epochs, per) in [(6.0, 0.05, 60.0, 30, 100)] {
        println!("=== radius {radius} noise {noise} rot {rot} schedule {epochs}x{per} ===");
        let mut probe_v = Vec::new();
        let mut ident_v = Vec::new();
        let mut mean_v = Vec::new();
        let mut attn5 = Vec::new();
        let mut attn10 = Vec::new();
        let mut attn100 = Vec::new();
        let mut wins_attn = 0;
        let mut cor_mean = Vec::new();
        let mut cor_attn = Vec::new();
        let mut ft10_v = Vec::new();
        let mut ft100_v = Vec::new();
        for seed in 0..n_seeds {
            let spec = bench_spec(seed, radius, noise, rot);
            let out = generate_shifted(&spec).unwrap();
            let (src_train, src_valid) = out.source.stratified_split(0.8, seed ^ 0x51).unwrap();
            let (adapt, trials) = out.target.stratified_split(0.5, seed ^ 0x52).unwrap();

            let probe = train_probe(&src_train, seed).unwrap();
            probe_v.push(probe_eer(&probe, &trials));

            let ident = FewShotModel::identity_fixture(
                32, 2, Aggregation::Mean, Objective::Binary, DistanceKind::Euclidean, seed,
            )
            .unwrap();
            ident_v.push(evaluate_fewshot(&ident, &adapt, &trials, "b", 10, 50, seed).unwrap().aeer);

            let config = TrainConfig {
                epochs,
                episodes_per_epoch: per,
                validation_episodes: 30,
                master_seed: seed,
                ..TrainConfig::default()
            };
            let scale = 1.0 / mean_norm(&src_train);
            let mmean = FewShotModel::new(
                32, 2, Aggregation::Mean, Objective::Binary, DistanceKind::Euclidean, seed,
            )
            .unwrap()
            .with_output_scale(scale)
            .unwrap();
            let omean = train(mmean, &src_train, &src_valid, &config).unwrap();
            mean_v.push(evaluate_fewshot(&omean.model, &adapt, &trials, "b", 10, 50, seed).unwrap().aeer);

            let mattn = FewShotModel::new(
                32, 2, Aggregation::SelfAttentive, Objective::Binary, DistanceKind::Euclidean, seed,
            )
            .unwrap()
            .with_output_scale(scale)
            .unwrap();
            let oattn = train(mattn, &src_train, &src_valid, &config).unwrap();
            let a5 = evaluate_fewshot(&oattn.model, &adapt, &trials, "b", 5, 50, seed).unwrap().aeer;
            let a10 = evaluate_fewshot(&oattn.model, &adapt, &trials, "b", 10, 50, seed).unwrap().aeer;
            let a100 = evaluate_fewshot(&oattn.model, &adapt, &trials, "b", 100, 50, seed).unwrap().aeer;
            attn5.push(a5);
            attn10.push(a10);
            attn100.push(a100);
            if a10 < *probe_v.last().unwrap() {
                wins_attn += 1;
            }
            use protoshot::metrics::evaluate_fewshot_corrupted;
            cor_mean.push(
                evaluate_fewshot_corrupted(&omean.model, &adapt, &trials, "b", 10, 50, seed, 0.2)
                    .unwrap()
                    .aeer,
            );
            cor_attn.push(
                evaluate_fewshot_corrupted(&oattn.model, &adapt, &trials, "b", 10, 50, seed, 0.2)
                    .unwrap()
                    .aeer,
            );
            println!(
                "    (c) seed {seed}: mean {:.2} attn {:.2}",
                cor_mean.last().unwrap(),
                cor_attn.last().unwrap()
            );
            {
                use protoshot::baselines::{
                    finetune_adapt, sample_adaptation_set, AdaptableDetector, FinetuneConfig,
                    FinetuneDetector,
                };
                let det_eer = |d: &FinetuneDetector| -> f64 {
                    let ts: Vec<Trial> = trials
                        .records()
                        .iter()
                        .map(|r| {
                            let x: Vec<f64> = r.embedding.iter().map(|&v| f64::from(v)).collect();
                            Trial::new(
                                r.id.clone(),
                                d.score(&x).unwrap(),
                                if r.class_label == BONAFIDE { Truth::Bonafide } else { Truth::Fake },
                            )
                        })
                        .collect();
                    eer(&ts).unwrap()
                };
                for lr in [0.01] {
                    let base = FinetuneDetector::from_probe(&probe, seed).unwrap();
                    let mut c10 = FinetuneConfig::few_shot_10();
                    c10.lr = lr;
                    let mut eers = Vec::new();
                    for rep in 0..c10.repeats {
                        let sample = sample_adaptation_set(&adapt, 10, seed * 1000 + rep as u64).unwrap();
                        let (adapted, _) = finetune_adapt(&base, &sample, &c10, seed + rep as u64).unwrap();
                        eers.push(det_eer(&adapted));
                    }
                    let mut c100 = FinetuneConfig::medium_shot_100();
                    c100.lr = lr;
                    c100.epochs = 30;
                    let sample = sample_adaptation_set(&adapt, 100, seed * 77).unwrap();
                    let (adapted, _) = finetune_adapt(&base, &sample, &c100, seed).unwrap();
                    println!(
                        "    FT(lr={lr}) seed {seed}: ft10 {:.2} ft100 {:.2}",
                        eers.iter().sum::<f64>() / eers.len() as f64,
                        det_eer(&adapted)
                    );
                    if lr == 0.01 {
                        ft10_v.push(eers.iter().sum::<f64>() / eers.len() as f64);
                        ft100_v.push(det_eer(&adapted));
                    }
                }
            }
            println!(
                "  seed {seed}: probe {:5.2} ident {:5.2} mean10 {:5.2} attn(5/10/100) {:5.2}/{:5.2}/{:5.2}  best_ep {}/{}",
                probe_v.last().unwrap(),
                ident_v.last().unwrap(),
                mean_v.last().unwrap(),
                a5, a10, a100,
                omean.best_epoch,
                oattn.best_epoch,
            );
        }
        let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
        println!(
            "  MEANS: probe {:.2} ident {:.2} mean10 {:.2} attn 5/10/100 {:.2}/{:.2}/{:.2} wins {}/{}",
            mean(&probe_v),
            mean(&ident_v),
            mean(&mean_v),
            mean(&attn5),
            mean(&attn10),
            mean(&attn100),
            wins_attn,
            n_seeds
        );
        println!(
            "  FT: ft10 {:.2} (vs fs10 {:.2})   ft100 {:.2} (vs fs100 {:.2})",
            mean(&ft10_v),
            mean(&attn10),
            mean(&ft100_v),
            mean(&attn100)
        );
        let cw = cor_mean.iter().zip(&cor_attn).filter(|(m, a)| a <= m).count();
        println!(
            "  (c) corrupted k=10: mean-pool {:.2} attn-pool {:.2} (attn <= mean in {}/{} seeds)",
            mean(&cor_mean),
            mean(&cor_attn),
            cw,
            n_seeds
        );
    }
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
}
