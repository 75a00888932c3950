//! Scratch calibration harness (deleted before finalizing).

use pluvio_core::eval::evaluate;
use pluvio_core::splits::{build_splits, SplitConfig, SPLIT_OOD_ARCH_LIBS, SPLIT_TRAIN};
use pluvio_core::synth::{synthesize_store, SyntheticSpec};
use pluvio_core::train::{train, TrainConfig};

#[test]
#[ignore]
fn calibrate() {
    let t0 = std::time::Instant::now();
    let lr: f64 = std::env::var("LR").ok().and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let epochs: usize = std::env::var("EPOCHS").ok().and_then(|s| s.parse().ok()).unwrap_or(10);
    let pairs: usize = std::env::var("PAIRS").ok().and_then(|s| s.parse().ok()).unwrap_or(400);
    let seeds: Vec<u64> = std::env::var("SEEDS")
        .map(|v| v.split(',').map(|x| x.parse().unwrap()).collect())
        .unwrap_or_else(|_| vec![11, 22, 33]);
    let data_seed: u64 = std::env::var("DATA_SEED").ok().and_then(|s| s.parse().ok()).unwrap_or(0);
    for seed in seeds {
        let gen_seed = if data_seed > 0 { data_seed } else { seed };
        let spec = SyntheticSpec::generate(40, 4, 3, 4, gen_seed).unwrap();
        let store = synthesize_store(&spec).unwrap();
        let split_cfg = SplitConfig {
            train_archs: vec!["synthA".into(), "synthB".into()],
            train_libs: vec!["synthlib0".into(), "synthlib1".into()],
            ood_archs: vec!["synthC".into(), "synthD".into()],
            ood_libs: vec!["synthlib2".into(), "synthlib3".into()],
            train_pairs: pairs,
            eval_pairs: 400,
            seed: gen_seed,
            mixed_arch_train_pairs: true,
        };
        let splits = build_splits(&store, &split_cfg).unwrap();
        let train_split = splits.iter().find(|s| s.name == SPLIT_TRAIN).unwrap();
        let ood = splits.iter().find(|s| s.name == SPLIT_OOD_ARCH_LIBS).unwrap();

        let abl = std::env::var("ABL").unwrap_or_else(|_| "all".into());
        let configs: Vec<(&str, bool, bool)> = if abl == "full" {
            vec![("full      ", true, true)]
        } else {
            vec![
                ("full      ", true, true),
                ("-cvib     ", true, false),
                ("-rm -cvib ", false, false),
            ]
        };
        for (tag, removal, cvib) in configs {
            let mut cfg = TrainConfig::compact_defaults(seed);
            cfg.enable_removal = removal;
            cfg.enable_cvib = cvib;
            cfg.learning_rate = lr;
            cfg.epochs = epochs;
            if let Ok(b2) = std::env::var("BETA2").map(|s| s.parse::<f64>().unwrap()) {
                cfg.beta2 = b2;
            }
            if let Ok(b1) = std::env::var("BETA1").map(|s| s.parse::<f64>().unwrap()) {
                cfg.beta1 = b1;
            }
            if let Ok(dz) = std::env::var("DZ").map(|s| s.parse::<usize>().unwrap()) {
                cfg.d_z = dz;
            }
            let out = train(&cfg, train_split, &store).unwrap();
            let report = evaluate(&out.checkpoint, ood, &store).unwrap();
            let train_report = evaluate(&out.checkpoint, train_split, &store).unwrap();
            let strata = if std::env::var("STRATA").is_ok() {
                use pluvio_core::splits::PairSample;
                let part = |f: &dyn Fn(&PairSample) -> bool| -> f64 {
                    let (mut sc, mut lb) = (Vec::new(), Vec::new());
                    for p in ood.pairs.iter().filter(|p| f(p)) {
                        let l = store.get(&p.left_id).unwrap();
                        let r = store.get(&p.right_id).unwrap();
                        let zl = out.checkpoint.infer_encoding(&l.instruction_sequence).unwrap();
                        let zr = out.checkpoint.infer_encoding(&r.instruction_sequence).unwrap();
                        sc.push(pluvio_core::search::sscore(zl.as_slice().unwrap(), zr.as_slice().unwrap()).unwrap());
                        lb.push(p.label);
                    }
                    pluvio_core::eval::roc_auc(&sc, &lb).unwrap_or(f64::NAN)
                };
                format!(
                    " sameA={:.3} diffA={:.3} sameO={:.3} diffO={:.3}",
                    part(&|p: &PairSample| p.left_meta.architecture == p.right_meta.architecture),
                    part(&|p: &PairSample| p.left_meta.architecture != p.right_meta.architecture),
                    part(&|p: &PairSample| p.left_meta.optimization == p.right_meta.optimization),
                    part(&|p: &PairSample| p.left_meta.optimization != p.right_meta.optimization),
                )
            } else {
                String::new()
            };
            let first = &out.telemetry[0];
            let last = out.telemetry.last().unwrap();
            println!(
                "seed {seed} {tag} auc={:.3} acc={:.3} train_auc={:.3} | l_cos {:.3}->{:.3} l_rl {:.3}->{:.3} kl {:.3}->{:.3} recon {:.3}->{:.3}",
                report.auc,
                report.accuracy,
                train_report.auc,
                first.loss.l_cos,
                last.loss.l_cos,
                first.loss.l_rl,
                last.loss.l_rl,
                first.loss.l_cvib_kl,
                last.loss.l_cvib_kl,
                first.loss.l_cvib_recon,
                last.loss.l_cvib_recon,
            );
            if !strata.is_empty() {
                println!("    strata:{strata}");
            }
        }
    }
    println!("elapsed: {:?} (lr={lr}, epochs={epochs})", t0.elapsed());
}

#[test]
#[ignore]
fn task_ceiling() {
    use std::collections::HashMap;
    let seeds: Vec<u64> = std::env::var("SEEDS")
        .map(|v| v.split(',').map(|x| x.parse().unwrap()).collect())
        .unwrap_or_else(|_| vec![11, 22, 33]);
    let data_seed: u64 = std::env::var("DATA_SEED").ok().and_then(|s| s.parse().ok()).unwrap_or(0);
    for seed in seeds {
        let gen_seed = if data_seed > 0 { data_seed } else { seed };
        let spec = SyntheticSpec::generate(40, 4, 3, 4, gen_seed).unwrap();
        let store = synthesize_store(&spec).unwrap();
        let split_cfg = SplitConfig {
            train_archs: vec!["synthA".into(), "synthB".into()],
            train_libs: vec!["synthlib0".into(), "synthlib1".into()],
            ood_archs: vec!["synthC".into(), "synthD".into()],
            ood_libs: vec!["synthlib2".into(), "synthlib3".into()],
            train_pairs: 400,
            eval_pairs: 400,
            seed,
            mixed_arch_train_pairs: true,
        };
        let splits = build_splits(&store, &split_cfg).unwrap();
        let ood = splits.iter().find(|s| s.name == SPLIT_OOD_ARCH_LIBS).unwrap();

        let bag = |text: &str, imm_only: bool| -> HashMap<String, f64> {
            let mut m = HashMap::new();
            for t in text.split_whitespace() {
                if !imm_only || t.starts_with('#') {
                    *m.entry(t.to_string()).or_insert(0.0) += 1.0;
                }
            }
            m
        };
        let cos = |a: &HashMap<String, f64>, b: &HashMap<String, f64>| -> f64 {
            let dot: f64 = a.iter().filter_map(|(k, v)| b.get(k).map(|w| v * w)).sum();
            let na: f64 = a.values().map(|v| v * v).sum::<f64>().sqrt();
            let nb: f64 = b.values().map(|v| v * v).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 { 0.0 } else { dot / (na * nb) }
        };
        for imm_only in [true, false] {
            let mut scores = Vec::new();
            let mut labels = Vec::new();
            for p in &ood.pairs {
                let l = store.get(&p.left_id).unwrap();
                let r = store.get(&p.right_id).unwrap();
                scores.push(cos(&bag(&l.instruction_sequence, imm_only), &bag(&r.instruction_sequence, imm_only)));
                labels.push(p.label);
            }
            let auc = pluvio_core::eval::roc_auc(&scores, &labels).unwrap();
            println!("seed {seed} imm_only={imm_only} oracle_auc={auc:.3}");
        }
        // Same bags but truncated to the first 64 tokens (what identity truncation sees).
        let bag64 = |text: &str| -> HashMap<String, f64> {
            let mut m = HashMap::new();
            for t in text.split_whitespace().take(64) {
                *m.entry(t.to_string()).or_insert(0.0) += 1.0;
            }
            m
        };
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for p in &ood.pairs {
            let l = store.get(&p.left_id).unwrap();
            let r = store.get(&p.right_id).unwrap();
            scores.push(cos(&bag64(&l.instruction_sequence), &bag64(&r.instruction_sequence)));
            labels.push(p.label);
        }
        println!("seed {seed} first64 oracle_auc={:.3}", pluvio_core::eval::roc_auc(&scores, &labels).unwrap());
    }
}

#[test]
#[ignore]
fn selection_quality() {
    use pluvio_core::removal::{identity_selection, score_tokens_cached, select_topk};
    use pluvio_core::train::Model;
    use std::collections::HashMap;
    for seed in [1u64, 2, 3] {
        let spec = SyntheticSpec::generate(40, 4, 3, 4, seed).unwrap();
        let store = synthesize_store(&spec).unwrap();
        let split_cfg = SplitConfig {
            train_archs: vec!["synthA".into(), "synthB".into()],
            train_libs: vec!["synthlib0".into(), "synthlib1".into()],
            ood_archs: vec!["synthC".into(), "synthD".into()],
            ood_libs: vec!["synthlib2".into(), "synthlib3".into()],
            train_pairs: 400,
            eval_pairs: 400,
            seed,
            mixed_arch_train_pairs: true,
        };
        let splits = build_splits(&store, &split_cfg).unwrap();
        let ood = splits.iter().find(|s| s.name == SPLIT_OOD_ARCH_LIBS).unwrap();
        let cfg = TrainConfig::compact_defaults(seed);
        let (model, cfg) = Model::init(&cfg, &store.arch_vocab, &store.opt_vocab).unwrap();

        // Kept-token text per record under each selection mode.
        let kept_text = |text: &str, removal: bool| -> Vec<String> {
            let tokens = model.encoder.tokenize(text).unwrap();
            let sel = if removal {
                let sc = score_tokens_cached(&tokens, &model.encoder, &model.agent).unwrap();
                select_topk(sc.probs.as_slice().unwrap(), &tokens, cfg.k)
            } else {
                identity_selection(&tokens, cfg.k)
            };
            let words: Vec<&str> = text.split_whitespace().collect();
            sel.kept_indices.iter().map(|&i| words[i].to_string()).collect()
        };
        let cos_bag = |a: &[String], b: &[String], imm_only: bool| -> f64 {
            fn bag(xs: &[String], imm_only: bool) -> HashMap<&String, f64> {
                let mut m = HashMap::new();
                for t in xs {
                    if !imm_only || t.starts_with('#') {
                        *m.entry(t).or_insert(0.0) += 1.0;
                    }
                }
                m
            }
            let (ba, bb) = (bag(a, imm_only), bag(b, imm_only));
            let dot: f64 = ba.iter().filter_map(|(k, v)| bb.get(*k).map(|w| v * w)).sum();
            let na: f64 = ba.values().map(|v| v * v).sum::<f64>().sqrt();
            let nb: f64 = bb.values().map(|v| v * v).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 { 0.0 } else { dot / (na * nb) }
        };
        for removal in [true, false] {
            for imm_only in [true, false] {
                let mut scores = Vec::new();
                let mut labels = Vec::new();
                for p in &ood.pairs {
                    let l = kept_text(&store.get(&p.left_id).unwrap().instruction_sequence, removal);
                    let r = kept_text(&store.get(&p.right_id).unwrap().instruction_sequence, removal);
                    scores.push(cos_bag(&l, &r, imm_only));
                    labels.push(p.label);
                }
                let auc = pluvio_core::eval::roc_auc(&scores, &labels).unwrap();
                println!("seed {seed} removal={removal} imm_only={imm_only} kept-oracle auc={auc:.3}");
            }
        }
    }
}
