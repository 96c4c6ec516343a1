//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any fails.

use std::time::{Duration, Instant};

use beef_core::autodiff::Tape;
use beef_core::explain::{DecodeConfig, LanguageConfig, LanguageHead};
use beef_core::fusion::{fuse_bilinear, fuse_block, Fusion, FusionConfig, FusionKind};
use beef_core::gradsuite;
use beef_core::metrics::{average_precision, bleu4, bleu4_corpus, spearman};
use beef_core::model::ExplainerKind;
use beef_core::synthworld::{generate, Dataset, WorldConfig};
use beef_core::trainer::{
    build_language, episode_features, evaluate, fit_language, FeatureNorm, train, Cell, ExperimentKind, ExperimentRunner,
    LanguageTrainConfig, SentencePair, TrainConfig, TrainLog, Trainer,
};
use beef_core::{ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: String) -> Verdict {
    Verdict { passed, detail }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// `out[k] = sum_ij m[i] v[j] core[i, j, k]` by explicit loops.
fn bilinear_oracle(core: &Tensor<f64>, m: &[f64], v: &[f64]) -> Vec<f64> {
    let s = core.shape();
    let mut out = vec![0.0; s[2]];
    for i in 0..s[0] {
        for j in 0..s[1] {
            for (k, o) in out.iter_mut().enumerate() {
                *o += m[i] * v[j] * core.data()[(i * s[1] + j) * s[2] + k];
            }
        }
    }
    out
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn identity(n: usize) -> Tensor<f64> {
    let mut t = Tensor::zeros(&[n, n]);
    for i in 0..n {
        t.data_mut()[i * n + i] = 1.0;
    }
    t
}

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let rows = gradsuite::run_suite(64).expect("suite runs");
    let took = start.elapsed();
    let worst = rows
        .iter()
        .max_by(|a, b| a.report.max_rel_error.total_cmp(&b.report.max_rel_error))
        .unwrap();
    let failed: Vec<_> = rows.iter().filter(|r| !r.passed()).map(|r| r.op.clone()).collect();
    verdict(
        failed.is_empty() && took < Duration::from_secs(120),
        format!(
            "{} checks, worst {} at {:.2e}, {:.1}s, failing: {:?}",
            rows.len(),
            worst.op,
            worst.report.max_rel_error,
            took.as_secs_f64(),
            failed
        ),
    )
}

fn fusion_equivalence() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = [0.0f64; 4];
    for _ in 0..100 {
        let (dm, dv, dout) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..5));
        let m = rand_tensor(&mut rng, &[dm]);
        let v = rand_tensor(&mut rng, &[dv]);
        let core = rand_tensor(&mut rng, &[dm, dv, dout]);
        let oracle = bilinear_oracle(&core, m.data(), v.data());

        let mut t = Tape::<f64>::new();
        let (mv, vv, cv) = (t.input(m.clone()).unwrap(), t.input(v.clone()).unwrap(), t.input(core.clone()).unwrap());
        let (wm, wv, wc) = (
            t.input(identity(dm)).unwrap(),
            t.input(identity(dv)).unwrap(),
            t.input(identity(dout)).unwrap(),
        );
        let bil = fuse_bilinear(&mut t, mv, vv, cv).unwrap();
        let blk = fuse_block(&mut t, mv, vv, wm, wv, &[cv], wc).unwrap();
        worst[0] = worst[0].max(max_abs_diff(t.value(bil).data(), t.value(blk).data()));
        worst[0] = worst[0].max(max_abs_diff(t.value(bil).data(), &oracle));

        for (slot, kind) in [(1, FusionKind::Mutan), (2, FusionKind::Mlb), (3, FusionKind::Mfb)] {
            let rank = if kind == FusionKind::Mlb { 1 } else { rng.random_range(1..4) };
            let proj = rank * rng.random_range(1..4);
            let cfg = FusionConfig {
                kind,
                dim_m: dm,
                dim_v: dv,
                dim_out: dout,
                proj_dim: proj,
                block_count: 1,
                rank,
                hidden: 1,
            };
            let mut store = ParamStore::<f64>::new();
            let f = Fusion::new(cfg, &mut store, "fusion", &mut rng).unwrap();
            let expanded = f.expanded_core(&store).unwrap();
            let direct = f.evaluate(&store, &m, &v).unwrap();
            let mut t = Tape::<f64>::new();
            let (mv, vv, cv) = (t.input(m.clone()).unwrap(), t.input(v.clone()).unwrap(), t.input(expanded.clone()).unwrap());
            let via_core = fuse_bilinear(&mut t, mv, vv, cv).unwrap();
            worst[slot] = worst[slot].max(max_abs_diff(direct.data(), t.value(via_core).data()));
            worst[slot] = worst[slot].max(max_abs_diff(direct.data(), &bilinear_oracle(&expanded, m.data(), v.data())));
        }
    }
    verdict(
        worst.iter().all(|&w| w < 1e-6),
        format!(
            "max |diff| over 100 instances: block {:.1e}, mutan {:.1e}, mlb {:.1e}, mfb {:.1e}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

fn base_config(iterations: usize) -> TrainConfig {
    let mut c = TrainConfig::preset("tiny").unwrap();
    c.iterations = iterations;
    c.eval_every = 0;
    c.language = None;
    c
}

fn test_accuracy(data: &Dataset, kind: ExplainerKind, layer: usize) -> f64 {
    let mut c = base_config(2000);
    c.model = c.model.with_explainer(kind, layer);
    let (t, _) = train(&c, data, None).unwrap();
    evaluate(t.model(), t.store(), data, "test").unwrap().accuracy.unwrap()
}

fn cause_collapse() -> Verdict {
    let start = Instant::now();
    let data = generate(&WorldConfig {
        episodes: 2000,
        ..WorldConfig::tiny().stops_only()
    })
    .unwrap();
    let decision_only = test_accuracy(&data, ExplainerKind::DecisionMlp, 3);
    let block = test_accuracy(&data, ExplainerKind::Block, 3);
    let took = start.elapsed();
    verdict(
        decision_only <= 0.40 && block >= 0.90 && took < Duration::from_secs(900),
        format!(
            "decision-only acc {decision_only:.3} (<= 0.40), BLOCK layer 3 acc {block:.3} (>= 0.90), {:.0}s",
            took.as_secs_f64()
        ),
    )
}

fn benchmark_orderings() -> (Verdict, Verdict) {
    let data = generate(&WorldConfig {
        episodes: 1000,
        ..WorldConfig::tiny()
    })
    .unwrap();
    let mut runner = ExperimentRunner::new(&data, base_config(2000), vec![0, 1, 2], "test").unwrap();
    let fusion_cells = ExperimentKind::FusionComparison.cells();
    let pick = |cells: &[Cell], label: &str| cells.iter().find(|c| c.label == label).unwrap().clone();
    let block = runner.run_row(&pick(&fusion_cells, "block")).unwrap();
    let cat = runner.run_row(&pick(&fusion_cells, "cat_mlp")).unwrap();
    let layer3 = runner.run_row(&pick(&fusion_cells, "layer3_mlp")).unwrap();
    let driver = runner
        .run_row(&pick(&ExperimentKind::BaselineGrid.cells(), "driver_only"))
        .unwrap();
    let mse_ratio = block.driver_mse_mean / driver.driver_mse_mean;
    let table = verdict(
        block.map_mean >= cat.map_mean && block.map_mean >= layer3.map_mean && mse_ratio <= 1.05,
        format!(
            "mAP block {:.4} cat_mlp {:.4} layer3_mlp {:.4}; driver MSE block {:.3} vs driver-only {:.3} (ratio {:.3}, <= 1.05)",
            block.map_mean, cat.map_mean, layer3.map_mean, block.driver_mse_mean, driver.driver_mse_mean, mse_ratio
        ),
    );

    let layer_cells = ExperimentKind::LayerSweep.cells();
    let maps: Vec<f64> = [1, 3, 5]
        .iter()
        .map(|l| runner.run_row(&pick(&layer_cells, &format!("layer{l}"))).unwrap().map_mean)
        .collect();
    let sweep = verdict(
        maps[1] >= maps[0] && maps[1] >= maps[2],
        format!("mAP layer1 {:.4} layer3 {:.4} layer5 {:.4}", maps[0], maps[1], maps[2]),
    );
    (table, sweep)
}

/// Precision at the rank of every positive, averaged; ties broken by input
/// order.
fn ap_oracle(pairs: &[(f64, bool)]) -> Option<f64> {
    let mut idx: Vec<usize> = (0..pairs.len()).collect();
    idx.sort_by(|&a, &b| pairs[b].0.partial_cmp(&pairs[a].0).unwrap().then(a.cmp(&b)));
    let positives: Vec<usize> = (0..idx.len()).filter(|&r| pairs[idx[r]].1).collect();
    if positives.is_empty() {
        return None;
    }
    let precisions: Vec<f64> = positives
        .iter()
        .map(|&r| (0..=r).filter(|&q| pairs[idx[q]].1).count() as f64 / (r + 1) as f64)
        .collect();
    Some(precisions.iter().sum::<f64>() / precisions.len() as f64)
}

fn metric_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    let mut mismatched_skips = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..40);
        let pairs: Vec<(f64, bool)> = (0..n)
            .map(|_| ((rng.random_range(0..8) as f64) / 7.0, rng.random_bool(0.3)))
            .collect();
        match (average_precision(&pairs).unwrap(), ap_oracle(&pairs)) {
            (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
            (None, None) => {}
            _ => mismatched_skips += 1,
        }
    }
    fn words(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }
    let hand = (4.0f64 / 5.0 * 3.0 / 4.0 * 2.0 / 3.0 * 1.0 / 2.0).powf(0.25);
    let bleu = bleu4(&words("because the light is red"), &[words("since the light is red")]).unwrap();
    let ident = bleu4(&words("the car stops because the light is red"), &[words("the car stops because the light is red")]).unwrap();
    let rho = [
        spearman(&[1.0, 2.0, 3.0], &[2.0, 4.0, 9.0]).unwrap(),
        spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(),
        spearman(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap(),
    ];
    let rho_ok = (rho[0] - 1.0).abs() < 1e-12 && (rho[1] + 1.0).abs() < 1e-12 && (rho[2] - 0.5).abs() < 1e-12;
    verdict(
        worst < 1e-9 && mismatched_skips == 0 && (bleu - hand).abs() < 1e-12 && (hand - 0.6687).abs() < 5e-5 && (ident - 1.0).abs() < 1e-12 && rho_ok,
        format!(
            "AP max |diff| {worst:.1e} over 1000 instances; BLEU-4 {bleu:.4} (hand 0.6687), identity {ident:.4}; spearman {rho:?}"
        ),
    )
}

fn language_sanity() -> Verdict {
    let world = WorldConfig {
        episodes: 80,
        ..WorldConfig::tiny()
    };
    let data = generate(&world).unwrap();
    let lc = LanguageTrainConfig {
        iterations: 2000,
        ..LanguageTrainConfig::default()
    };
    let driver = Trainer::new(base_config(0)).unwrap();
    let chosen: Vec<usize> = (0..data.episodes.len())
        .filter(|&i| data.episodes[i].sentence.is_some())
        .take(50)
        .collect();
    let mut pairs: Vec<SentencePair> = chosen
        .iter()
        .map(|&i| SentencePair {
            frames: episode_features(driver.model(), driver.store(), &data, i, lc.layer).unwrap(),
            target: data.vocabulary.encode(data.episodes[i].sentence.as_ref().unwrap()).unwrap(),
        })
        .collect();
    let norm = FeatureNorm::fit(&pairs).unwrap();
    for p in &mut pairs {
        norm.apply(&mut p.frames);
    }
    let (head, mut store) = build_language(driver.model(), &lc, data.vocabulary.len(), 7).unwrap();
    fit_language(&head, &mut store, &pairs, &lc, 7, &mut TrainLog::default()).unwrap();
    let mut hyps = Vec::new();
    let mut refs = Vec::new();
    for (p, &i) in pairs.iter().zip(&chosen) {
        let g = head.generate(&store, &p.frames, &DecodeConfig::greedy()).unwrap();
        hyps.push(data.vocabulary.decode(&g.tokens));
        refs.push(vec![words_of(data.episodes[i].sentence.as_ref().unwrap())]);
    }
    let bleu = bleu4_corpus(&hyps, &refs).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut agree = 0;
    for case in 0..100u64 {
        let cfg = LanguageConfig {
            fusion: FusionConfig {
                kind: FusionKind::Block,
                dim_m: rng.random_range(2..6),
                dim_v: rng.random_range(2..6),
                dim_out: 6,
                proj_dim: 6,
                block_count: rng.random_range(1..4),
                rank: 1,
                hidden: 1,
            },
            hidden: rng.random_range(3..9),
            embed: 4,
            attention: 4,
            vocab_size: rng.random_range(6..15),
        };
        let mut s = ParamStore::<f64>::new();
        let h = LanguageHead::new(cfg.clone(), &mut s, &mut ChaCha8Rng::seed_from_u64(case)).unwrap();
        let frames: Vec<_> = (0..rng.random_range(1..5))
            .map(|_| (rand_tensor(&mut rng, &[cfg.fusion.dim_m]), rand_tensor(&mut rng, &[cfg.fusion.dim_v])))
            .collect();
        let greedy = h.generate(&s, &frames, &DecodeConfig::greedy()).unwrap();
        let zero = h.generate(&s, &frames, &DecodeConfig::with_temperature(0.0, case).unwrap()).unwrap();
        agree += usize::from(greedy.tokens == zero.tokens);
    }
    verdict(
        bleu >= 0.95 && agree == 100,
        format!("overfit corpus BLEU-4 {bleu:.4} on 50 pairs after 2000 iterations (>= 0.95); T=0 equals greedy on {agree}/100"),
    )
}

fn words_of(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_owned).collect()
}

fn params(t: &Trainer) -> beef_core::tensor::Container {
    let mut c = beef_core::tensor::Container::new();
    t.store().export(&mut c);
    c
}

fn reproducibility() -> Verdict {
    let data = generate(&WorldConfig {
        episodes: 60,
        ..WorldConfig::tiny()
    })
    .unwrap();
    let mut c = base_config(40);
    c.eval_every = 10;
    let (a, log_a) = train(&c, &data, None).unwrap();
    let (_, log_b) = train(&c, &data, None).unwrap();
    let logs_equal = log_a.text() == log_b.text() && !log_a.lines.is_empty();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.beef");
    a.save(&path).unwrap();
    let loaded = Trainer::load(&path).unwrap();
    let before = evaluate(a.model(), a.store(), &data, "test").unwrap();
    let after = evaluate(loaded.model(), loaded.store(), &data, "test").unwrap();
    let reports_equal = before == after;

    let mut first = Trainer::new(c.clone()).unwrap();
    let samples = data.samples("train").unwrap();
    let mut scratch = TrainLog::default();
    for _ in 0..c.iterations / 2 {
        first.step(&data, &samples, &mut scratch).unwrap();
    }
    first.save(&path).unwrap();
    let mut resumed = Trainer::load(&path).unwrap();
    resumed.fit(&data, None).unwrap();
    let resumed_equal = params(&resumed) == params(&a);

    verdict(
        logs_equal && reports_equal && resumed_equal,
        format!("identical logs: {logs_equal}; checkpoint eval identical: {reports_equal}; resumed run identical: {resumed_equal}"),
    )
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let wanted = |n: usize| filter.is_empty() || filter.iter().any(|f| f == &n.to_string());
    let mut results: Vec<(usize, &str, Verdict)> = Vec::new();
    let mut run = |n: usize, name: &'static str, f: &dyn Fn() -> Verdict| {
        if wanted(n) {
            let v = f();
            println!("criterion {n} [{}] {name}: {}", if v.passed { "PASS" } else { "FAIL" }, v.detail);
            results.push((n, name, v));
        }
    };
    run(1, "gradient suite", &gradient_suite);
    run(2, "fusion equivalence", &fusion_equivalence);
    run(3, "cause collapse", &cause_collapse);
    run(6, "metric oracles", &metric_oracles);
    run(7, "language head sanity", &language_sanity);
    run(8, "reproducibility and round trip", &reproducibility);
    if wanted(4) || wanted(5) {
        let (table, sweep) = benchmark_orderings();
        for (n, name, v) in [(4, "fusion ordering and driving non-degradation", table), (5, "layer sweep peak", sweep)] {
            if wanted(n) {
                println!("criterion {n} [{}] {name}: {}", if v.passed { "PASS" } else { "FAIL" }, v.detail);
                results.push((n, name, v));
            }
        }
    }
    results.sort_by_key(|r| r.0);
    let failed: Vec<usize> = results.iter().filter(|r| !r.2.passed).map(|r| r.0).collect();
    println!(
        "acceptance: {} passed, {} failed{}",
        results.len() - failed.len(),
        failed.len(),
        if failed.is_empty() { String::new() } else { format!(" ({failed:?})") }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
