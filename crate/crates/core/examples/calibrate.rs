// Temporary calibration driver; removed before release.
use mmclip_core::datagen::*;
use mmclip_core::harness::*;
use mmclip_core::mitigation::*;
use mmclip_core::network::*;
use mmclip_core::trainer::*;

fn main() {
    let phase = std::env::args().nth(1).unwrap_or_else(|| "a".to_string());
    match phase.as_str() {
        "a" => phase_a(),
        "b" => phase_b(),
        "c" => phase_c(),
        "d" => phase_d(),
        "e" => phase_e(),
        "t" => phase_t(),
        other => eprintln!("unknown phase {other}"),
    }
}

fn make(sep: f64, seed: u64) -> (Dataset, CleanSet, Dataset) {
    let classes = 10;
    let (tpc, cpc, epc) = (500, 50, 100);
    let pool = synth_classes(classes, DataGeometry::Vector { dim: 64 }, tpc + cpc + epc, sep, seed).unwrap();
    let per = tpc + cpc + epc;
    let mut train_idx = Vec::new();
    let mut rest_idx = Vec::new();
    for c in 0..classes {
        let base = c * per;
        train_idx.extend(base..base + tpc);
        rest_idx.extend(base + tpc..base + per);
    }
    let train = pool.subset(&train_idx);
    let rest = pool.subset(&rest_idx);
    let (clean, test) = split_clean_set(&rest, cpc, seed).unwrap();
    (train, clean, test)
}

fn phase_a() {
    let sep: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(4.0);
    for (epochs, lr, batch) in [(40usize, 0.05f64, 64usize), (60, 0.05, 64)] {
        let t0 = std::time::Instant::now();
        let (train_ds, _, test) = make(sep, 0);
        let net = presets::mlp3(64, 10, 0);
        let cfg = TrainConfig { epochs, learning_rate: lr, batch_size: batch, seed: 0, ..Default::default() };
        let out = train(&net, &train_ds, None, &cfg).unwrap();
        let m = evaluate(&out.network, &test).unwrap();
        println!(
            "sep={sep} epochs={epochs} lr={lr} batch={batch}: test acc {:.2}% train acc {:.3} loss {:.4}  ({:.1}s)",
            100.0 * m.accuracy,
            out.curve.last().unwrap().train_acc,
            out.curve.last().unwrap().loss,
            t0.elapsed().as_secs_f64()
        );
    }
}

fn phase_b() {
    let sep: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(4.0);
    let epochs: usize = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(40);
    let wd: f64 = std::env::args().nth(4).and_then(|s| s.parse().ok()).unwrap_or(1e-4);
    let aug: f64 = std::env::args().nth(5).and_then(|s| s.parse().ok()).unwrap_or(0.0);
    for seed in [0u64, 1] {
        let (train_ds, _, test) = make(sep, seed);
        let spec = ImbalanceSpec { kind: ImbalanceKind::Lt, gamma: 100.0, n0: 500 };
        let imb = apply_imbalance(&train_ds, &spec, seed).unwrap();
        println!("counts: {:?}", imb.class_counts());
        let net = presets::mlp3(64, 10, seed);
        let cfg = TrainConfig { epochs, weight_decay: wd, augment_noise: aug, seed, ..Default::default() };
        let out = train(&net, &imb, None, &cfg).unwrap();
        let m = evaluate(&out.network, &test).unwrap();
        let pc: Vec<String> = m.per_class.iter().map(|a| format!("{:.0}", 100.0 * a)).collect();
        println!("sep={sep} seed={seed} epochs={epochs} wd={wd}: overall {:.2}% train {:.3} per-class [{}]",
            100.0 * m.accuracy, out.curve.last().unwrap().train_acc, pc.join(","));

        // over-training comparison, schedule rescaled to the longer run
        let mut cfg5 = cfg.over_trained();
        cfg5.decay_epochs = None;
        let out5 = train(&net, &imb, None, &cfg5).unwrap();
        let m5 = evaluate(&out5.network, &test).unwrap();
        let pc5: Vec<String> = m5.per_class.iter().map(|a| format!("{:.0}", 100.0 * a)).collect();
        println!("   5x: overall {:.2}%  per-class [{}]", 100.0 * m5.accuracy, pc5.join(","));
    }
}

fn phase_c() {
    let sep: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(4.0);
    for amplitude in [0.03f64, 0.05] {
        for seed in [0u64, 1] {
            let (train_ds, _, test) = make(sep, seed);
            let trigger = TriggerSpec::chessboard(&[64], amplitude, 0);
            let poisoned = poison(&train_ds, &trigger, 0.02, seed).unwrap();
            let net = presets::mlp3(64, 10, seed);
            let cfg = TrainConfig { epochs: 40, seed, ..Default::default() };
            let base = train(&net, &train_ds, None, &cfg).unwrap();
            let pois = train(&net, &poisoned, None, &cfg).unwrap();
            let base_acc = 100.0 * evaluate(&base.network, &test).unwrap().accuracy;
            let atk = compute_attack_metrics(&Decider::Plain(&pois.network), &test, &trigger).unwrap();
            println!(
                "amp={amplitude} seed={seed}: base acc {base_acc:.2} | poisoned acc {:.2} asr {:.2} pacc {:.2}",
                atk.acc, atk.asr, atk.pacc
            );
        }
    }
}

fn phase_d() {
    let sep: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(4.0);
    let amplitude: f64 = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(0.03);
    let seed = 0u64;
    let (train_ds, clean, test) = make(sep, seed);
    let trigger = TriggerSpec::chessboard(&[64], amplitude, 0);
    let poisoned = poison(&train_ds, &trigger, 0.02, seed).unwrap();
    let net_init = presets::mlp3(64, 10, seed);
    let cfg = TrainConfig { epochs: 40, seed, ..Default::default() };
    let pois = train(&net_init, &poisoned, None, &cfg).unwrap();
    let net = &pois.network;
    let atk = compute_attack_metrics(&Decider::Plain(net), &test, &trigger).unwrap();
    println!("pre: acc {:.2} asr {:.2} pacc {:.2}", atk.acc, atk.asr, atk.pacc);

    for lambda in [1e-4f64, 1e-3, 1e-2] {
        let t0 = std::time::Instant::now();
        let mcfg = MitigationConfig {
            lambda,
            max_iterations: 300,
            stop_threshold: 1e-9,
            outer_step: 0.01,
            ascent_steps: 8,
            ascent_step_size: 0.1,
            restarts_per_class: Some(10),
            beta: 2.0,
            seed,
        };
        let out = run_mitigation(net, &clean, &mcfg, Objective::Mmac).unwrap();
        let post = compute_attack_metrics(&Decider::Clipped(net, &out.bounds), &test, &trigger).unwrap();
        let first = &out.history[0];
        let last = out.history.last().unwrap();
        println!(
            "lambda={lambda:.0e}: acc {:.2} asr {:.2} pacc {:.2} | iters {} early {} | m0[t]={:.2} mT[t]={:.2} term1 {:.4} ({:.0}s)",
            post.acc,
            post.asr,
            post.pacc,
            out.history.len(),
            out.stopped_early,
            first.mean_class_margins[0],
            last.mean_class_margins[0],
            last.term1,
            t0.elapsed().as_secs_f64()
        );
        // MMDF on top
        match mmclip_core::mmdf::fit_null(net, &out.bounds, &clean) {
            Ok(null) => {
                let d = Decider::Defended { net, bounds: &out.bounds, null: &null, theta: 0.005 };
                let dm = compute_attack_metrics(&d, &test, &trigger).unwrap();
                println!("   mmdf: acc {:.2} asr {:.2} pacc {:.2}", dm.acc, dm.asr, dm.pacc);
            }
            Err(e) => println!("   mmdf: null fit failed: {e}"),
        }
    }
}

fn phase_e() {
    let sep: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(4.0);
    let epochs: usize = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(100);
    let aug: f64 = std::env::args().nth(4).and_then(|s| s.parse().ok()).unwrap_or(0.08);
    let seed = 0u64;
    let (train_ds, clean, test) = make(sep, seed);
    let spec = ImbalanceSpec { kind: ImbalanceKind::Lt, gamma: 100.0, n0: 500 };
    let imb = apply_imbalance(&train_ds, &spec, seed).unwrap();
    let net_init = presets::mlp3(64, 10, seed);
    let cfg = TrainConfig { epochs, weight_decay: 0.0, augment_noise: aug, seed, ..Default::default() };
    let base = train(&net_init, &imb, None, &cfg).unwrap();
    let net = &base.network;
    let m = evaluate(net, &test).unwrap();
    let pc: Vec<String> = m.per_class.iter().map(|a| format!("{:.0}", 100.0 * a)).collect();
    println!("baseline: overall {:.2}%  [{}]", 100.0 * m.accuracy, pc.join(","));

    let outer: f64 = std::env::args().nth(5).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    for lambda in [0.025f64, 0.03, 0.04, 0.05] {
        let t0 = std::time::Instant::now();
        let mcfg = MitigationConfig {
            lambda,
            max_iterations: 300,
            stop_threshold: 1e-9,
            outer_step: outer,
            ascent_steps: 8,
            ascent_step_size: 0.1,
            restarts_per_class: Some(10),
            beta: 2.0,
            seed,
        };
        let out = run_mitigation(net, &clean, &mcfg, Objective::Mmom).unwrap();
        for r in out.history.iter().take(3).chain(out.history.iter().rev().take(2).rev()) {
            println!("   it {}: total {:.5} term1 {:.5} term2 {:.6} margins {:?}",
                r.iteration, r.total_loss, r.term1, r.term2,
                r.mean_class_margins.iter().map(|m| (m * 10.0).round() / 10.0).collect::<Vec<_>>());
        }
        let smax: Vec<String> = out.bounds.entries().iter().zip(out.initial_bounds.entries())
            .map(|((_, z), (_, z0))| {
                let ratio: f64 = z.iter().zip(z0).map(|(a, b)| a / b).sum::<f64>() / z.len() as f64;
                format!("{ratio:.3}")
            }).collect();
        println!("   mean bound ratio per layer: {smax:?}");
        let mm = evaluate_clipped(net, Some(&out.bounds), &test).unwrap();
        let pc: Vec<String> = mm.per_class.iter().map(|a| format!("{:.0}", 100.0 * a)).collect();
        println!(
            "mmom lambda={lambda:.0e}: overall {:.2}% [{}] iters {} early {} term1 {:.4} ({:.0}s)",
            100.0 * mm.accuracy,
            pc.join(","),
            out.history.len(),
            out.stopped_early,
            out.history.last().unwrap().term1,
            t0.elapsed().as_secs_f64()
        );
    }
}

fn phase_t() {
    // per-class test trajectory under constant lr (prefix property)
    let sep: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(5.0);
    let wd: f64 = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(0.0);
    let aug: f64 = std::env::args().nth(4).and_then(|s| s.parse().ok()).unwrap_or(0.06);
    let lr: f64 = std::env::args().nth(5).and_then(|s| s.parse().ok()).unwrap_or(0.05);
    let seed = 0u64;
    let (train_ds, _, test) = make(sep, seed);
    let spec = ImbalanceSpec { kind: ImbalanceKind::Lt, gamma: 100.0, n0: 500 };
    let imb = apply_imbalance(&train_ds, &spec, seed).unwrap();
    let net = presets::mlp3(64, 10, seed);
    for epochs in [25usize, 50, 100, 200, 400, 700] {
        let cfg = TrainConfig {
            epochs,
            learning_rate: lr,
            schedule: LrSchedule::Constant,
            weight_decay: wd,
            augment_noise: aug,
            seed,
            ..Default::default()
        };
        let out = train(&net, &imb, None, &cfg).unwrap();
        let m = evaluate(&out.network, &test).unwrap();
        let pc: Vec<String> = m.per_class.iter().map(|a| format!("{:.0}", 100.0 * a)).collect();
        println!(
            "epochs={epochs:>4}: overall {:.2}% train {:.3} [{}]",
            100.0 * m.accuracy,
            out.curve.last().unwrap().train_acc,
            pc.join(",")
        );
    }
}
