// Scratch experiment driver used while tuning the benchmark constants.
use dem_core::evolution::{prepare_benchmark, pretrain_source_led, run_dem, LoopConfig};
use dem_core::losses::LossWeights;
use dem_core::nn::train::{train_supervised, TrainConfig};
use dem_core::nn::{accuracy_of, Architecture, ModelColumn};
use dem_core::rng::stream_rng;
use dem_core::synth::{generate_domain_pair, ShiftSpec};
use std::time::Instant;

fn source_only(
    spec: &ShiftSpec,
    config: &LoopConfig,
) -> (f64, f64) {
    let (source, target) = generate_domain_pair(spec).unwrap();
    let prepared = prepare_benchmark(&source, &target, config).unwrap();
    let arch = Architecture::new(spec.d, config.extractor_hidden.clone());
    let column = ModelColumn::new(arch, &mut stream_rng(config.seed, 2));
    let tc = TrainConfig {
        learning_rate: config.learning_rate,
        max_epochs: config.pretrain_max_epochs,
        patience: config.pretrain_patience,
        batch_size: config.batch_size,
    };
    let (trained, _hist) = train_supervised(
        column,
        &prepared.source_train,
        &prepared.source_val,
        &tc,
        &mut stream_rng(config.seed, 3),
    )
    .unwrap();
    let src_acc = accuracy_of(
        &trained,
        &prepared.source_test.features,
        prepared.source_test.labels.as_deref().unwrap(),
    )
    .unwrap();
    let tt = prepared.target_test.as_ref().unwrap();
    let tgt_acc = accuracy_of(&trained, &tt.features, tt.labels.as_deref().unwrap()).unwrap();
    (src_acc, tgt_acc)
}

fn main() {
    let mode = std::env::args().nth(1).unwrap_or_else(|| "baseline".into());
    let config = LoopConfig {
        screening_iterations: 10,
        evolving_iterations: 10,
        patience: 4,
        actions_per_iteration: 6,
        action_epochs: 3,
        bootstrap_resamples: 200,
        ..LoopConfig::default()
    };
    let weights = LossWeights::default();

    match mode.as_str() {
        "baseline" => {
            for seed in [11u64, 12, 13, 14, 15] {
                let t0 = Instant::now();
                let spec = ShiftSpec { seed, ..ShiftSpec::default() };
                let cfg = LoopConfig { seed, ..config.clone() };
                let (src, tgt) = source_only(&spec, &cfg);
                println!(
                    "seed {seed}: source-only src {:.3} tgt {:.3}  ({:.1?})",
                    src,
                    tgt,
                    t0.elapsed()
                );
            }
        }
        "zero" => {
            for seed in [11u64, 12, 13] {
                let spec = ShiftSpec {
                    rotation_angle: 0.0,
                    label_flip_rate: 0.0,
                    seed,
                    ..ShiftSpec::default()
                };
                let cfg = LoopConfig { seed, ..config.clone() };
                let (src, tgt) = source_only(&spec, &cfg);
                let (source, target) = generate_domain_pair(&spec).unwrap();
                let prepared = prepare_benchmark(&source, &target, &cfg).unwrap();
                let pre = pretrain_source_led(&prepared, &cfg, &weights).unwrap();
                let hidden = prepared.target_train_hidden.as_ref().unwrap();
                let agree = pre
                    .pseudo_labels
                    .iter()
                    .zip(hidden)
                    .filter(|(a, b)| a == b)
                    .count() as f64
                    / hidden.len() as f64;
                println!(
                    "seed {seed}: zero-shift src {src:.3} tgt {tgt:.3} | pretrain pseudo acc {agree:.3}"
                );
            }
        }
        "pretrain" => {
            for seed in [11u64, 12, 13, 14, 15] {
                let t0 = Instant::now();
                let spec = ShiftSpec { seed, ..ShiftSpec::default() };
                let cfg = LoopConfig { seed, ..config.clone() };
                let (source, target) = generate_domain_pair(&spec).unwrap();
                let prepared = prepare_benchmark(&source, &target, &cfg).unwrap();
                let pre = pretrain_source_led(&prepared, &cfg, &weights).unwrap();
                let hidden = prepared.target_train_hidden.as_ref().unwrap();
                let agree = pre
                    .pseudo_labels
                    .iter()
                    .zip(hidden)
                    .filter(|(a, b)| a == b)
                    .count() as f64
                    / hidden.len() as f64;
                println!(
                    "seed {seed}: pretrain pseudo acc {agree:.3} epochs {} ({:.1?})",
                    pre.val_loss.len(),
                    t0.elapsed()
                );
            }
        }
        "dem" => {
            let mut gains = Vec::new();
            for seed in [11u64, 12, 13, 14, 15] {
                let t0 = Instant::now();
                let spec = ShiftSpec { seed, ..ShiftSpec::default() };
                let cfg = LoopConfig { seed, ..config.clone() };
                let (baseline_src, baseline_tgt) = source_only(&spec, &cfg);
                let (source, target) = generate_domain_pair(&spec).unwrap();
                let result = run_dem(&source, &target, &cfg, &weights).unwrap();
                let report = &result.report;
                let screening = report.screening.target_test.as_ref().unwrap().accuracy.point;
                let evolving = report.evolving.target_test.as_ref().unwrap().accuracy.point;
                let final_t = report.final_target.as_ref().unwrap().accuracy.point;
                let frozen_src = report.source_frozen.accuracy.point;
                let final_src = report.final_source.accuracy.point;
                println!(
                    "seed {seed}: base(src {:.1} tgt {:.1}) pseudo0 {:.3} screen {screening:.1} evolve {evolving:.1} final {final_t:.1} | src frozen {frozen_src:.1} final {final_src:.1} ({:.1?})",
                    100.0 * baseline_src,
                    100.0 * baseline_tgt,
                    report.initial_pseudo_label_accuracy.unwrap(),
                    t0.elapsed()
                );
                gains.push(final_t - 100.0 * baseline_tgt);
            }
            let mean: f64 = gains.iter().sum::<f64>() / gains.len() as f64;
            println!("mean gain: {mean:.2} points");
        }
        "fitness" => {
            // does the reward separate better labels from worse ones?
            use dem_core::evolution::{
                AdaptTrainer, CandidateContext, CandidateTrainer, SharedData,
            };
            use dem_core::nn::OptimizerState;
            use dem_core::rng::stream_rng as srng;
            use rand::Rng;
            for seed in [11u64, 12, 13] {
                let spec = ShiftSpec { seed, ..ShiftSpec::default() };
                let epochs: usize = std::env::args()
                    .nth(2)
                    .and_then(|s| s.parse().ok())
                    .unwrap_or(5);
                let cfg = LoopConfig { seed, action_epochs: epochs, ..config.clone() };
                let (source, target) = generate_domain_pair(&spec).unwrap();
                let prepared = prepare_benchmark(&source, &target, &cfg).unwrap();
                let pre = pretrain_source_led(&prepared, &cfg, &weights).unwrap();
                let hidden = prepared.target_train_hidden.clone().unwrap();
                let shared = SharedData {
                    source_train_x: prepared.source_train.features.clone(),
                    source_train_y: prepared.source_train.labels.clone().unwrap(),
                    source_val: prepared.source_val.clone(),
                    target_x: prepared.target_train.features.clone(),
                    target_ids: prepared.target_train.sample_ids.clone(),
                    frozen: pre.frozen.clone(),
                    config: cfg.clone(),
                    weights: cfg.effective_weights(&weights),
                    alpha: cfg.effective_alpha(),
                };
                let base = pre.frozen.thawed_clone();
                let opt = OptimizerState::new(base.params.param_count(), cfg.learning_rate);
                let k = hidden.len();
                let all: Vec<usize> = (0..k).collect();
                let trainer = AdaptTrainer;
                let mut rng = srng(seed, 999);

                let mut eval = |labels: &[u8], tag: &str, stream: u64| {
                    let ctx = CandidateContext {
                        shared: &shared,
                        base: &base,
                        base_optimizer: Some(&opt),
                        base_utility: None,
                        labels,
                        subset: &all,
                        train_stream: stream,
                    };
                    let out = trainer.evaluate(&ctx).unwrap();
                    let tt = prepared.target_test.as_ref().unwrap();
                    let tacc = accuracy_of(&out.column, &tt.features, tt.labels.as_deref().unwrap())
                        .unwrap();
                    let label_acc = labels
                        .iter()
                        .zip(&hidden)
                        .filter(|(a, b)| a == b)
                        .count() as f64
                        / k as f64;
                    println!(
                        "  seed {seed} {tag}: label_acc {label_acc:.3} reward {:.4} target_test {tacc:.3}",
                        out.reward
                    );
                    out.reward
                };

                let base_labels = pre.pseudo_labels.clone();
                eval(&base_labels, "self      ", 7_000);
                // 150 random flips
                let mut worse = base_labels.clone();
                for _ in 0..150 {
                    let i = rng.gen_range(0..k);
                    worse[i] ^= 1;
                }
                eval(&worse, "random-150", 7_001);
                // 150 flips toward hidden truth (oracle, experiment only)
                let mut better = base_labels.clone();
                let mut fixed = 0;
                for i in 0..k {
                    if better[i] != hidden[i] {
                        better[i] = hidden[i];
                        fixed += 1;
                        if fixed >= 150 {
                            break;
                        }
                    }
                }
                eval(&better, "truth-150 ", 7_002);
                // fully true labels
                eval(&hidden, "truth-all ", 7_003);
            }
        }
        "screen1" => {
            // does training on the top-confidence half drift the model truthward?
            use dem_core::evolution::{
                AdaptTrainer, CandidateContext, CandidateTrainer, SharedData,
            };
            use dem_core::nn::{predict_probs, OptimizerState};
            for seed in [11u64, 12, 13, 14, 15] {
                let spec = ShiftSpec { seed, ..ShiftSpec::default() };
                let epochs: usize = std::env::args()
                    .nth(2)
                    .and_then(|s| s.parse().ok())
                    .unwrap_or(5);
                let cfg = LoopConfig { seed, action_epochs: epochs, ..config.clone() };
                let (source, target) = generate_domain_pair(&spec).unwrap();
                let prepared = prepare_benchmark(&source, &target, &cfg).unwrap();
                let pre = pretrain_source_led(&prepared, &cfg, &weights).unwrap();
                let hidden = prepared.target_train_hidden.clone().unwrap();
                let shared = SharedData {
                    source_train_x: prepared.source_train.features.clone(),
                    source_train_y: prepared.source_train.labels.clone().unwrap(),
                    source_val: prepared.source_val.clone(),
                    target_x: prepared.target_train.features.clone(),
                    target_ids: prepared.target_train.sample_ids.clone(),
                    frozen: pre.frozen.clone(),
                    config: cfg.clone(),
                    weights: cfg.effective_weights(&weights),
                    alpha: cfg.effective_alpha(),
                };
                let base = pre.frozen.thawed_clone();
                let opt = OptimizerState::new(base.params.param_count(), cfg.learning_rate);
                let probs = predict_probs(&base, &shared.target_x).unwrap();
                let conf: Vec<f64> = probs.iter().map(|&p| p.max(1.0 - p)).collect();
                let mut order: Vec<usize> = (0..conf.len()).collect();
                order.sort_by(|&a, &b| conf[b].partial_cmp(&conf[a]).unwrap());
                let top_half: Vec<usize> = order[..order.len() / 2].to_vec();
                let clean = top_half
                    .iter()
                    .filter(|&&i| pre.pseudo_labels[i] == hidden[i])
                    .count() as f64
                    / top_half.len() as f64;
                let ctx = CandidateContext {
                    shared: &shared,
                    base: &base,
                    base_optimizer: Some(&opt),
                    base_utility: None,
                    labels: &pre.pseudo_labels,
                    subset: &top_half,
                    train_stream: 8_000,
                };
                let out = AdaptTrainer.evaluate(&ctx).unwrap();
                let tt = prepared.target_test.as_ref().unwrap();
                let before = {
                    let initial_pseudo_acc = pre
                        .pseudo_labels
                        .iter()
                        .zip(&hidden)
                        .filter(|(a, b)| a == b)
                        .count() as f64
                        / hidden.len() as f64;
                    initial_pseudo_acc
                };
                let tacc =
                    accuracy_of(&out.column, &tt.features, tt.labels.as_deref().unwrap()).unwrap();
                println!(
                    "seed {seed}: pseudo0 {before:.3} subset_label_acc {clean:.3} after_screen_test {tacc:.3} reward {:.4}",
                    out.reward
                );
            }
        }
        "basins" => {
            // per-restart pseudo accuracy: do different inits land in different basins?
            use dem_core::evolution::PreparedData;
            use dem_core::nn::predict_probs;
            let pseudo_acc = |col: &dem_core::nn::ModelColumn, prep: &PreparedData| {
                let probs = predict_probs(col, &prep.target_train.features).unwrap();
                let hidden = prep.target_train_hidden.as_ref().unwrap();
                probs
                    .iter()
                    .zip(hidden.iter())
                    .filter(|&(&p, &y)| u8::from(p >= 0.5) == y)
                    .count() as f64
                    / hidden.len() as f64
            };
            for seed in 11u64..21 {
                let spec = ShiftSpec { seed, ..ShiftSpec::default() };
                let (source, target) = generate_domain_pair(&spec).unwrap();
                let mut accs = Vec::new();
                let cfg = LoopConfig { seed, restarts: 4, ..config.clone() };
                let prepared = prepare_benchmark(&source, &target, &cfg).unwrap();
                let pre = pretrain_source_led(&prepared, &cfg, &weights).unwrap();
                // recompute each restart column accuracy via fresh single runs
                for restart in 0..4usize {
                    let single = dem_core::evolution::pretrain_restart_column(
                        &prepared, &cfg, &weights, restart,
                    )
                    .unwrap();
                    accs.push(pseudo_acc(&single, &prepared));
                }
                // class-mean-difference probe on source, applied to target
                let src = &prepared.source_train;
                let y = src.labels.as_ref().unwrap();
                let d = src.dim();
                let mut mean1 = vec![0.0; d];
                let mut mean0 = vec![0.0; d];
                let (mut n1, mut n0) = (0.0, 0.0);
                for i in 0..src.n_samples() {
                    for j in 0..d {
                        if y[i] == 1 {
                            mean1[j] += src.features[[i, j]];
                        } else {
                            mean0[j] += src.features[[i, j]];
                        }
                    }
                    if y[i] == 1 { n1 += 1.0 } else { n0 += 1.0 }
                }
                let w: Vec<f64> = (0..d).map(|j| mean1[j] / n1 - mean0[j] / n0).collect();
                let probe_labels: Vec<u8> = (0..prepared.target_train.n_samples())
                    .map(|i| {
                        let score: f64 = (0..d)
                            .map(|j| w[j] * prepared.target_train.features[[i, j]])
                            .sum();
                        u8::from(score > 0.0)
                    })
                    .collect();
                let hidden2 = prepared.target_train_hidden.as_ref().unwrap();
                let probe_acc = probe_labels
                    .iter()
                    .zip(hidden2.iter())
                    .filter(|&(a, b)| a == b)
                    .count() as f64
                    / hidden2.len() as f64;
                let mut agreements = Vec::new();
                for restart in 0..4usize {
                    let col = dem_core::evolution::pretrain_restart_column(
                        &prepared, &cfg, &weights, restart,
                    )
                    .unwrap();
                    let probs = predict_probs(&col, &prepared.target_train.features).unwrap();
                    let agree = probs
                        .iter()
                        .zip(probe_labels.iter())
                        .filter(|&(&p, &l)| u8::from(p >= 0.5) == l)
                        .count() as f64
                        / probe_labels.len() as f64;
                    agreements.push(agree);
                }
                let line: Vec<String> = accs.iter().map(|a| format!("{a:.2}")).collect();
                let aline: Vec<String> = agreements.iter().map(|a| format!("{a:.3}")).collect();
                println!(
                    "seed {seed}: acc [{}] probe_acc {probe_acc:.3} agree [{}] chose r{}",
                    line.join(" "),
                    aline.join(" "),
                    pre.chosen_restart
                );
            }
        }
        "restart" => {
            for seed in 11u64..21 {
                let spec = ShiftSpec { seed, ..ShiftSpec::default() };
                let cfg = LoopConfig { seed, restarts: 3, ..config.clone() };
                let (source, target) = generate_domain_pair(&spec).unwrap();
                let prepared = prepare_benchmark(&source, &target, &cfg).unwrap();
                let pre = pretrain_source_led(&prepared, &cfg, &weights).unwrap();
                let hidden = prepared.target_train_hidden.as_ref().unwrap();
                let agree = pre
                    .pseudo_labels
                    .iter()
                    .zip(hidden)
                    .filter(|(a, b)| a == b)
                    .count() as f64
                    / hidden.len() as f64;
                print!("seed {seed} chose r{} acc {agree:.2} |", pre.chosen_restart);
                for d in &pre.restarts {
                    print!(
                        " r{}: conf {:.3} probe {:.3};",
                        d.restart, d.mean_target_confidence, d.probe_agreement
                    );
                }
                println!();
            }
        }
        "sweep" => {
            for (w_disc, w_coral, w_mcd) in
                [(1.0, 1.0, 1.0), (0.3, 2.0, 1.0), (0.1, 3.0, 0.5), (0.0, 2.0, 1.0), (0.2, 1.0, 0.2)]
            {
                let weights = LossWeights { w_disc, w_coral, w_mcd, ..LossWeights::default() };
                let mut accs = Vec::new();
                for seed in 11u64..19 {
                    let spec = ShiftSpec { seed, ..ShiftSpec::default() };
                    let cfg = LoopConfig { seed, ..config.clone() };
                    let (source, target) = generate_domain_pair(&spec).unwrap();
                    let prepared = prepare_benchmark(&source, &target, &cfg).unwrap();
                    let pre = pretrain_source_led(&prepared, &cfg, &weights).unwrap();
                    let hidden = prepared.target_train_hidden.as_ref().unwrap();
                    let agree = pre
                        .pseudo_labels
                        .iter()
                        .zip(hidden)
                        .filter(|(a, b)| a == b)
                        .count() as f64
                        / hidden.len() as f64;
                    accs.push(agree);
                }
                let line: Vec<String> = accs.iter().map(|a| format!("{a:.2}")).collect();
                println!("disc {w_disc} coral {w_coral} mcd {w_mcd}: {}", line.join(" "));
            }
        }
        other => eprintln!("unknown probe '{other}'"),
    }
}
