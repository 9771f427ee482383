// scratch experiment driver; not part of the deliverable surface
use optideq_core::cell::CellSpec;
use optideq_core::deq::{EnsembleModel, ModelConfig};
use optideq_core::encode::{fit_encoder, Centring, EncodingMode};
use optideq_core::split::stratified_split;
use optideq_core::synth::{generate, SyntheticSpec, TaskKind};
use optideq_core::train::{train, Classifier, TrainConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let which = args.get(1).map(|s| s.as_str()).unwrap_or("xor");
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3e-3);
    let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(20);
    match which {
        "xor" => xor_experiment(lr, epochs),
        "ablation" => ablation_experiment(lr, epochs),
        "debug" => debug_experiment(lr, epochs),
        _ => eprintln!("unknown experiment"),
    }
}

fn debug_experiment(lr: f64, epochs: usize) {
    use optideq_core::eval::balanced_accuracy;
    use optideq_core::train::{adam_update, AdamState};
    use rand::seq::SliceRandom;

    let data = generate(&SyntheticSpec {
        rows: 10_000,
        seed: 42,
        task: TaskKind::XorLike,
        noise_rate: 0.02,
    });
    let parts = stratified_split(&data.dataset.labels, [0.7, 0.2, 0.1], 42).unwrap();
    let train_set = data.dataset.select(&parts[0]);
    let val_set = data.dataset.select(&parts[1]);

    let seed: u64 = std::env::var("SEED").ok().and_then(|s| s.parse().ok()).unwrap_or(1);
    let mut cfg = ModelConfig::new(2, 16, 4, CellSpec::aoc(seed));
    cfg.max_iters = std::env::var("MAXIT").ok().and_then(|s| s.parse().ok()).unwrap_or(400);
    let mut model = Classifier::Deq(EnsembleModel::init(cfg, seed).unwrap());
    let mut adam = AdamState::new(&model.tensor_sizes());
    let mut rng = optideq_core::seeds::stage_rng(seed, "train.shuffle");
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        let mut skipped = 0;
        for chunk in order.chunks(256) {
            let out = model.batch_gradients(&train_set, chunk, 0.0).unwrap();
            match out.grads {
                Some(g) => {
                    let mut t = model.tensors_mut();
                    adam_update(&mut t, &g, &mut adam, lr);
                }
                None => skipped += 1,
            }
        }
        let (preds, _) = model.predictions(&val_set).unwrap();
        let bacc = balanced_accuracy(&preds, &val_set.labels).unwrap();
        if let Classifier::Deq(m) = &model {
            let norms: Vec<String> = m
                .blocks
                .iter()
                .map(|b| format!("{:.2}", m.config.beta * b.w.spectral_norm()))
                .collect();
            println!(
                "epoch {epoch:>2}: skipped {skipped:>2}  bacc {bacc:.4}  b|W| [{}]  calib {:?}",
                norms.join(" "),
                m.calib.map(|c| c.map(|v| (v * 100.0).round() / 100.0))
            );
        }
    }
}

fn xor_experiment(lr: f64, epochs: usize) {
    let data = generate(&SyntheticSpec {
        rows: 10_000,
        seed: 42,
        task: TaskKind::XorLike,
        noise_rate: 0.02,
    });
    let parts = stratified_split(&data.dataset.labels, [0.7, 0.2, 0.1], 42).unwrap();
    let train_set = data.dataset.select(&parts[0]);
    let val_set = data.dataset.select(&parts[1]);

    for seed in [0u64, 1, 2] {
        for cellname in ["simple", "aoc"] {
            let cell = match cellname {
                "simple" => CellSpec::simple(),
                _ => {
                    let mut c = CellSpec::aoc(seed);
                    if std::env::var("QUANT").as_deref() == Ok("0") {
                        c.quant_bits = None;
                    }
                    if let Ok(only) = std::env::var("ONLY") {
                        let mut st = optideq_core::cell::StageMagnitudes::zeros();
                        match only.as_str() {
                            "tanh" => st.tanh_approx = 0.02,
                            "microled" => st.microled = 0.02,
                            "slm" => st.slm_distortion = 0.02,
                            "tia" => st.tia_gain = 0.02,
                            "xtalk" => st.crosstalk = 0.02,
                            "dark" => st.darkness = 0.02,
                            _ => {}
                        }
                        c.stages = st;
                    }
                    c
                }
            };
            let mut cfg = ModelConfig::new(2, 16, 4, cell);
            cfg.max_iters = std::env::var("MAXIT")
                .ok()
                .and_then(|s| s.parse().ok())
                .unwrap_or(cfg.max_iters);
            cfg.beta = std::env::var("BETA")
                .ok()
                .and_then(|s| s.parse().ok())
                .unwrap_or(cfg.beta);
            let model = EnsembleModel::init(cfg, seed).unwrap();
            let mut tc = TrainConfig::deq(seed);
            tc.learning_rate = lr;
            tc.max_epochs = epochs;
            tc.patience = epochs;
            let t0 = Instant::now();
            let (_, hist) = train(Classifier::Deq(model), &train_set, &val_set, &tc).unwrap();
            println!(
                "seed {seed} {cellname:<6} lr {lr}: best {:.4} at epoch {} ({} epochs run, {:.1}s)",
                hist.best_metric,
                hist.best_epoch,
                hist.records.len(),
                t0.elapsed().as_secs_f64()
            );
        }
    }
}

fn ablation_experiment(lr: f64, epochs: usize) {
    let data = generate(&SyntheticSpec {
        rows: 10_000,
        seed: 7,
        task: TaskKind::XorLike,
        noise_rate: 0.02,
    });
    let parts = stratified_split(&data.table.labels, [0.7, 0.2, 0.1], 7).unwrap();
    let train_table = data.table.select(&parts[0]);
    let val_table = data.table.select(&parts[1]);

    let fit = fit_encoder(&train_table, &data.schema, EncodingMode::Binarized).unwrap();
    for centring in ["spin", "zeroone"] {
        let f = match centring {
            "spin" => fit.clone(),
            _ => fit.clone().with_centring(Centring::ZeroOne),
        };
        let tr = f.encode_table(&train_table, None).unwrap();
        let va = f.encode_table(&val_table, None).unwrap();
        println!("width {}", tr.width);

        // DEQ
        let cfg = ModelConfig::new(tr.width, 16, 4, CellSpec::simple());
        let model = EnsembleModel::init(cfg, 0).unwrap();
        let mut tc = TrainConfig::deq(0);
        tc.learning_rate = lr;
        tc.max_epochs = epochs;
        tc.patience = epochs;
        let t0 = Instant::now();
        let (_, hist) = train(Classifier::Deq(model), &tr, &va, &tc).unwrap();
        println!(
            "deq {centring:<8}: best {:.4} at {} ({:.1}s)",
            hist.best_metric,
            hist.best_epoch,
            t0.elapsed().as_secs_f64()
        );

        // logreg
        let model = Classifier::LogReg(optideq_core::baselines::LogRegParams::zeros(tr.width));
        let mut tc = TrainConfig::logreg(0);
        tc.max_epochs = epochs;
        tc.patience = epochs;
        let (_, hist) = train(model, &tr, &va, &tc).unwrap();
        println!("logreg {centring:<8}: best {:.4}", hist.best_metric);
    }
}
