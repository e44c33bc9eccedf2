//! Release gate for the whole pipeline: one test per criterion, each
//! ending in a single PASS line with its measured numbers.
//!
//! The transfer-trend criteria (4–8) train real models and dominate the
//! runtime (tens of minutes on one core). Season-task artifacts are built
//! once and shared: the λ-sweep and the flight comparison resume from the
//! same on-disk baseline checkpoints the season criterion produced, so
//! every criterion sees one consistent protocol.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use trailnet::adapt::{
    evaluate, median_bandwidth, mmd2, mmd2_grad, permutation_test, Estimator, KernelBank,
};
use trailnet::config::ExperimentConfig;
use trailnet::data::{
    capture_dataset, mirror_sample, read_ftds, write_ftds, CaptureOptions, Dataset, Label,
    CAMERA_OFFSETS,
};
use trailnet::flight::{control, ControllerConfig, Pilot};
use trailnet::harness::{
    adapted_checkpoint_path, baseline_checkpoint_path, cmd_adapt, cmd_eval, cmd_fly, cmd_gen,
    cmd_sweep_lambda, cmd_train, fly_episodes, generate_domain_data, run_adapt_phase, DomainData,
    MetricsRow,
};
use trailnet::nn::checkpoint::{read_ftnn, write_ftnn};
use trailnet::nn::{
    backward, forward, forward_frozen, init_params, ops, ExtraGrads, ModelParams, SampleTrace,
};
use trailnet::rng::{Stream, StreamKey};
use trailnet::scene::DomainSpec;

// --- shared scaffolding -----------------------------------------------------

/// Fresh working directory under the cargo-managed tmp root.
fn work_dir(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).expect("create work dir");
    dir
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Shared experiment shape for every transfer task: full-size datasets,
/// 16×16 inputs, batch 32, 600 iterations per phase.
const TASK_SCALE: &str = "
samples_per_source = 2000
samples_target_unlabeled = 2000
samples_target_test = 600
image_size = 16
batch = 32
baseline_iterations = 600
adapt_iterations = 600
validation_interval = 150
seeds = 1,2,3
";

/// `TASK_SCALE` with `overrides` layered on top; an override replaces the
/// scale line with the same key (the config parser itself rejects
/// duplicates).
fn task_config(overrides: &str) -> ExperimentConfig {
    let key_of = |line: &str| -> Option<String> {
        let stripped = line.split('#').next().unwrap_or("");
        let (k, _) = stripped.split_once('=')?;
        Some(k.trim().to_string())
    };
    let overridden: Vec<String> = overrides.lines().filter_map(key_of).collect();
    let mut text = String::new();
    for line in TASK_SCALE.lines() {
        if key_of(line).map_or(true, |k| !overridden.contains(&k)) {
            text.push_str(line);
            text.push('\n');
        }
    }
    text.push_str(overrides);
    let cfg = ExperimentConfig::parse(&text).expect("task config");
    cfg.validate().expect("task config valid");
    cfg
}

fn season_config() -> ExperimentConfig {
    // Defaults already describe the season task: {spring, summer, autumn} -> winter.
    task_config("")
}

fn terrain_config() -> ExperimentConfig {
    task_config("task = terrain\nsources = summer-t1-morning\ntarget = summer-t2-morning")
}

fn light_config() -> ExperimentConfig {
    task_config("task = light\nsources = summer-t1-morning\ntarget = summer-t1-dusk")
}

/// Two sources each contributing one factor; the target combines both
/// (season from the first source, terrain from the second). Both factors
/// are material shifts, so alignment quality — not classifier capacity —
/// is the bottleneck, and the larger test set keeps accuracy ties from
/// quantization rare.
fn mixed_config() -> ExperimentConfig {
    task_config(
        "task = mixed
         sources = winter-t1-morning, summer-t2-morning
         target = winter-t2-morning
         samples_target_test = 900",
    )
}

/// One baseline-then-adapt run of a task through the same command layer the
/// CLI uses, so accuracies, logs, and checkpoints match a CLI run exactly.
struct TaskRuns {
    dir: PathBuf,
    rows: Vec<MetricsRow>,
    build_secs: f64,
}

fn run_task(name: &str, cfg: &ExperimentConfig) -> TaskRuns {
    let dir = work_dir(name);
    let t0 = Instant::now();
    cmd_train(cfg, &dir, None).expect("train");
    let rows = cmd_adapt(cfg, &dir, None, None).expect("adapt");
    TaskRuns { dir, rows, build_secs: t0.elapsed().as_secs_f64() }
}

static SEASON: OnceLock<TaskRuns> = OnceLock::new();

fn season_runs() -> &'static TaskRuns {
    SEASON.get_or_init(|| run_task("season", &season_config()))
}

// --- 1. estimators vs. a per-kernel double-loop oracle ----------------------

/// Independent re-derivation of squared MMD: one kernel at a time, explicit
/// index loops, direct Gaussian evaluation.
fn oracle_mmd2(
    sigmas: &[f64],
    weights: &[f64],
    xs: &[Vec<f64>],
    ys: &[Vec<f64>],
    estimator: Estimator,
) -> f64 {
    let gauss = |a: &[f64], b: &[f64], sigma: f64| -> f64 {
        let mut d2 = 0.0;
        for k in 0..a.len() {
            d2 += (a[k] - b[k]) * (a[k] - b[k]);
        }
        (-d2 / (2.0 * sigma * sigma)).exp()
    };
    let (m, n) = (xs.len(), ys.len());
    let mut total = 0.0;
    for (&sigma, &w) in sigmas.iter().zip(weights) {
        let mut sxx = 0.0;
        let mut syy = 0.0;
        let mut sxy = 0.0;
        match estimator {
            Estimator::Biased => {
                for i in 0..m {
                    for j in 0..m {
                        sxx += gauss(&xs[i], &xs[j], sigma);
                    }
                }
                for i in 0..n {
                    for j in 0..n {
                        syy += gauss(&ys[i], &ys[j], sigma);
                    }
                }
                for i in 0..m {
                    for j in 0..n {
                        sxy += gauss(&xs[i], &ys[j], sigma);
                    }
                }
                total += w
                    * (sxx / (m * m) as f64 + syy / (n * n) as f64
                        - 2.0 * sxy / (m * n) as f64);
            }
            Estimator::Unbiased => {
                for i in 0..m {
                    for j in 0..m {
                        if i != j {
                            sxx += gauss(&xs[i], &xs[j], sigma);
                        }
                    }
                }
                for i in 0..n {
                    for j in 0..n {
                        if i != j {
                            syy += gauss(&ys[i], &ys[j], sigma);
                        }
                    }
                }
                for i in 0..m {
                    for j in 0..n {
                        sxy += gauss(&xs[i], &ys[j], sigma);
                    }
                }
                total += w
                    * (sxx / (m * (m - 1)) as f64 + syy / (n * (n - 1)) as f64
                        - 2.0 * sxy / (m * n) as f64);
            }
        }
    }
    total
}

#[test]
fn c01_mmd_estimators_match_oracle() {
    let t0 = Instant::now();
    let mut rng = Stream::new(7, "acceptance-mmd-oracle");
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let d = 1 + rng.index(8);
        let m = 2 + rng.index(31); // 2..=32 keeps the unbiased form defined
        let n = 2 + rng.index(31);
        let k = 1 + rng.index(5);
        let sigmas: Vec<f64> = (0..k).map(|_| rng.range_f64(0.3, 3.0)).collect();
        let raw: Vec<f64> = (0..k).map(|_| rng.range_f64(0.1, 1.0)).collect();
        let sum: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|v| v / sum).collect();
        let bank = KernelBank::new(sigmas.clone(), weights.clone()).unwrap();
        let shift = rng.range_f64(-1.0, 1.0);
        let xs: Vec<Vec<f64>> =
            (0..m).map(|_| (0..d).map(|_| rng.next_normal()).collect()).collect();
        let ys: Vec<Vec<f64>> =
            (0..n).map(|_| (0..d).map(|_| rng.next_normal() + shift).collect()).collect();
        for est in [Estimator::Biased, Estimator::Unbiased] {
            let got = mmd2(&bank, &xs, &ys, est).unwrap();
            let want = oracle_mmd2(&sigmas, &weights, &xs, &ys, est);
            worst = worst.max((got - want).abs());
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    assert!(worst <= 1e-10, "estimator deviates from oracle by {worst:e}");
    assert!(secs < 10.0, "oracle comparison took {secs:.1}s, budget 10s");
    println!("PASS criterion 1: 200 instances, max |estimator - oracle| = {worst:.2e} (<= 1e-10), {secs:.1}s");
}

// --- 2. analytic gradients vs. central finite differences -------------------

/// Loss whose analytic gradient `backward` computes: mean cross-entropy
/// under the activation routing recorded at the reference parameters.
fn frozen_ce(params: &ModelParams, reference: &[SampleTrace], labels: &[usize]) -> f64 {
    let outs = forward_frozen(params, reference);
    let probs: Vec<Vec<f64>> = outs.into_iter().map(|o| o.probs).collect();
    ops::cross_entropy(&probs, labels)
}

/// Relative L2 error between two gradient vectors.
fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-300)
}

#[test]
fn c02_gradients_match_finite_differences() {
    let t0 = Instant::now();

    // (a) network backward on a 16x16 net, batch of 4.
    let mut rng = Stream::new(11, "acceptance-grad-net");
    let params = init_params(3, 16).unwrap();
    let images: Vec<Vec<f64>> =
        (0..4).map(|_| (0..3 * 16 * 16).map(|_| rng.next_f64()).collect()).collect();
    let labels_u: Vec<usize> = vec![0, 1, 2, 1];
    let labels: Vec<Option<Label>> =
        labels_u.iter().map(|&i| Some(Label::from_u8(i as u8).unwrap())).collect();
    let traces = forward(&params, &images).unwrap();
    let grads = backward(&params, &traces, &labels, 1.0, ExtraGrads::default()).unwrap();

    let delta = 1e-3;
    // Every element of the small tensors; larger conv/dense kernels are
    // probed on an index stride to stay inside the runtime budget.
    let strides = [1usize, 1, 4, 1, 16, 1, 16, 1, 1, 1];
    let mut worst_net: f64 = 0.0;
    let mut probes = 0usize;
    let mut p = params.clone();
    for ti in 0..10 {
        let len = p.tensors()[ti].len();
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for ei in (0..len).step_by(strides[ti]) {
            let orig = p.tensors()[ti].data[ei];
            p.tensors_mut()[ti].data[ei] = orig + delta;
            let up = frozen_ce(&p, &traces, &labels_u);
            p.tensors_mut()[ti].data[ei] = orig - delta;
            let down = frozen_ce(&p, &traces, &labels_u);
            p.tensors_mut()[ti].data[ei] = orig;
            analytic.push(grads.tensors()[ti].data[ei]);
            numeric.push((up - down) / (2.0 * delta));
            probes += 1;
        }
        worst_net = worst_net.max(rel_l2(&analytic, &numeric));
    }
    assert!(worst_net < 1e-3, "network gradient relative error {worst_net:e}");

    // (b) mmd2_grad, both estimators, every coordinate of both sides.
    let mut worst_mmd: f64 = 0.0;
    let delta = 1e-4;
    for est in [Estimator::Biased, Estimator::Unbiased] {
        let mut xs: Vec<Vec<f64>> =
            (0..8).map(|_| (0..3).map(|_| rng.next_normal()).collect()).collect();
        let mut ys: Vec<Vec<f64>> =
            (0..7).map(|_| (0..3).map(|_| rng.next_normal() + 0.5).collect()).collect();
        let bank = KernelBank::around(median_bandwidth(&xs, &ys).unwrap(), 5, 2.0).unwrap();
        let (dx, dy) = mmd2_grad(&bank, &xs, &ys, est).unwrap();

        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for i in 0..xs.len() {
            for k in 0..3 {
                let orig = xs[i][k];
                xs[i][k] = orig + delta;
                let up = mmd2(&bank, &xs, &ys, est).unwrap();
                xs[i][k] = orig - delta;
                let down = mmd2(&bank, &xs, &ys, est).unwrap();
                xs[i][k] = orig;
                analytic.push(dx[i][k]);
                numeric.push((up - down) / (2.0 * delta));
            }
        }
        for i in 0..ys.len() {
            for k in 0..3 {
                let orig = ys[i][k];
                ys[i][k] = orig + delta;
                let up = mmd2(&bank, &xs, &ys, est).unwrap();
                ys[i][k] = orig - delta;
                let down = mmd2(&bank, &xs, &ys, est).unwrap();
                ys[i][k] = orig;
                analytic.push(dy[i][k]);
                numeric.push((up - down) / (2.0 * delta));
            }
        }
        worst_mmd = worst_mmd.max(rel_l2(&analytic, &numeric));
    }
    assert!(worst_mmd < 1e-4, "mmd gradient relative error {worst_mmd:e}");

    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 60.0, "gradient checks took {secs:.1}s, budget 60s");
    println!(
        "PASS criterion 2: network FD rel err {worst_net:.2e} (< 1e-3, {probes} probes), \
         mmd FD rel err {worst_mmd:.2e} (< 1e-4), {secs:.1}s"
    );
}

// --- 3. permutation-test calibration ----------------------------------------

#[test]
fn c03_two_sample_test_calibration() {
    let t0 = Instant::now();
    let n = 100;
    let n_perms = 500;
    let trials = 100;
    let key = StreamKey::new(5, "acceptance-two-sample");

    let run_trial = |trial: u64, separation: f64| -> (f64, Vec<f64>) {
        let mut rng = key.derive(trial).derive(if separation > 0.0 { 1 } else { 0 }).stream();
        let xs: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.next_normal()]).collect();
        let ys: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.next_normal() + separation]).collect();
        let sigma0 = median_bandwidth(&xs, &ys).unwrap_or(1.0);
        let bank = KernelBank::around(sigma0, 5, 2.0).unwrap();
        let test = permutation_test(&bank, &xs, &ys, n_perms, rng.next_u64()).unwrap();
        let mut null = test.null;
        null.sort_by(|a, b| a.partial_cmp(b).unwrap());
        (test.statistic, null)
    };
    let order_stat = |null: &[f64], q: f64| null[((null.len() - 1) as f64 * q).round() as usize];

    let mut accepted = 0;
    for trial in 0..trials {
        let (stat, null) = run_trial(trial, 0.0);
        if stat >= order_stat(&null, 0.005) && stat <= order_stat(&null, 0.995) {
            accepted += 1;
        }
    }
    let mut rejected = 0;
    for trial in 0..trials {
        let (stat, null) = run_trial(trial, 3.0);
        if stat > order_stat(&null, 0.99) {
            rejected += 1;
        }
    }

    let secs = t0.elapsed().as_secs_f64();
    assert!(accepted >= 95, "same-distribution acceptance {accepted}/100 < 95");
    assert!(rejected >= 95, "separated rejection {rejected}/100 < 95");
    assert!(secs < 300.0, "calibration took {secs:.1}s, budget 5min");
    println!(
        "PASS criterion 3: same-dist inside central 99% in {accepted}/100, \
         separated above 99th percentile in {rejected}/100, {secs:.1}s"
    );
}

// --- 4. season transfer trend -----------------------------------------------

#[test]
fn c04_season_transfer_trend() {
    let runs = season_runs();
    let base: Vec<f64> = runs.rows.iter().map(|r| r.baseline_accuracy).collect();
    let adapted: Vec<f64> = runs.rows.iter().map(|r| r.adapted_accuracy).collect();
    for r in &runs.rows {
        assert!(
            r.adapted_accuracy >= r.baseline_accuracy,
            "seed {}: adapted {:.4} < baseline {:.4}",
            r.seed,
            r.adapted_accuracy,
            r.baseline_accuracy
        );
    }
    let gain = mean(&adapted) - mean(&base);
    assert!(gain >= 0.05, "mean adaptation gain {:.4} < 0.05", gain);
    assert!(runs.build_secs < 1800.0, "season runs took {:.0}s, budget 30min", runs.build_secs);
    println!(
        "PASS criterion 4: season mean baseline {:.4} -> adapted {:.4} (gain {:.1}pp >= 5pp; \
         adapted >= baseline on all {} seeds), {:.0}s",
        mean(&base),
        mean(&adapted),
        100.0 * gain,
        runs.rows.len(),
        runs.build_secs
    );
}

// --- 5. shift-magnitude ordering ---------------------------------------------

#[test]
fn c05_shift_magnitude_ordering() {
    // Run the cheap single-source tasks first so a parallel test thread can
    // build the shared season artifacts meanwhile.
    let terrain = run_task("terrain", &terrain_config());
    let light = run_task("light", &light_config());
    let season = season_runs();

    let stats = |runs: &TaskRuns| -> (f64, f64) {
        let base = mean(&runs.rows.iter().map(|r| r.baseline_accuracy).collect::<Vec<_>>());
        let adapted = mean(&runs.rows.iter().map(|r| r.adapted_accuracy).collect::<Vec<_>>());
        (base, adapted - base)
    };
    let (b_season, g_season) = stats(season);
    let (b_terrain, g_terrain) = stats(&terrain);
    let (b_light, g_light) = stats(&light);

    assert!(
        b_light >= b_terrain && b_terrain >= b_season,
        "baseline ordering violated: light {b_light:.4}, terrain {b_terrain:.4}, season {b_season:.4}"
    );
    assert!(
        g_season >= g_terrain && g_terrain >= g_light,
        "gain ordering violated: season {g_season:.4}, terrain {g_terrain:.4}, light {g_light:.4}"
    );
    println!(
        "PASS criterion 5: baselines light {:.4} >= terrain {:.4} >= season {:.4}; \
         gains season {:.1}pp >= terrain {:.1}pp >= light {:.1}pp",
        b_light,
        b_terrain,
        b_season,
        100.0 * g_season,
        100.0 * g_terrain,
        100.0 * g_light
    );
}

// --- 6. λ sensitivity ---------------------------------------------------------

#[test]
fn c06_lambda_sensitivity() {
    let season = season_runs();
    let cfg = season_config();
    let grid = [0.0, 0.1, 1.0, 10.0, 100.0];

    // Every sweep point resumes from the same on-disk baseline checkpoint
    // the season runs wrote; the λ=1 column is the season adapted run itself.
    let mut by_lambda: Vec<Vec<f64>> = vec![Vec::new(); grid.len()];
    let mut interior_best = 0;
    for (si, &seed) in cfg.seeds.iter().enumerate() {
        let init = read_ftnn(&baseline_checkpoint_path(&season.dir, seed)).expect("baseline ckpt");
        let data = generate_domain_data(&cfg, seed).expect("season data");
        let mut accs = Vec::with_capacity(grid.len());
        for &lambda in &grid {
            let acc = if lambda == 1.0 {
                season.rows[si].adapted_accuracy
            } else {
                let outcome =
                    run_adapt_phase(&cfg, &init, &data, seed, lambda)
                        .expect("sweep adapt");
                evaluate(&outcome.params, &data.target_test).0
            };
            accs.push(acc);
        }
        let best = accs.iter().cloned().fold(f64::MIN, f64::max);
        // Interior means strictly better than both grid endpoints.
        if best > accs[0] && best > accs[grid.len() - 1] {
            let arg = accs.iter().position(|&a| a == best).unwrap();
            if arg != 0 && arg != grid.len() - 1 {
                interior_best += 1;
            }
        }
        for (li, &a) in accs.iter().enumerate() {
            by_lambda[li].push(a);
        }
    }
    let means: Vec<f64> = by_lambda.iter().map(|v| mean(v)).collect();
    assert!(
        interior_best >= 2,
        "interior λ best on only {interior_best}/3 seeds; per-λ means {means:?}"
    );
    println!(
        "PASS criterion 6: interior λ best on {interior_best}/3 seeds; mean accuracy over λ \
         {{0: {:.4}, 0.1: {:.4}, 1: {:.4}, 10: {:.4}, 100: {:.4}}}",
        means[0], means[1], means[2], means[3], means[4]
    );
}

// --- 7. multi-source vs. pooled ----------------------------------------------

#[test]
fn c07_multi_source_vs_pooled() {
    let cfg = mixed_config();
    let dir = work_dir("mixed");
    cmd_train(&cfg, &dir, None).expect("mixed train");
    let multi_rows = cmd_adapt(&cfg, &dir, None, None).expect("mixed adapt");

    // Pooled comparison: same baseline initialization, same target batches,
    // but the two sources are concatenated into one domain so a single MMD
    // term aligns their mixture.
    let mut multi = Vec::new();
    let mut pooled = Vec::new();
    let mut strictly_better = 0;
    for (si, &seed) in cfg.seeds.iter().enumerate() {
        let init = read_ftnn(&baseline_checkpoint_path(&dir, seed)).expect("mixed ckpt");
        let data = generate_domain_data(&cfg, seed).expect("mixed data");
        let pooled_data = DomainData {
            source_train: vec![Dataset::merged(&data.source_train.iter().collect::<Vec<_>>())],
            source_val: data.source_val.clone(),
            source_full: Vec::new(),
            target_unlabeled: data.target_unlabeled.clone(),
            target_test: data.target_test.clone(),
        };
        let outcome = run_adapt_phase(&cfg, &init, &pooled_data, seed, cfg.lambda)
            .expect("pooled adapt");
        let pooled_acc = evaluate(&outcome.params, &pooled_data.target_test).0;
        let multi_acc = multi_rows[si].adapted_accuracy;
        if multi_acc > pooled_acc {
            strictly_better += 1;
        }
        multi.push(multi_acc);
        pooled.push(pooled_acc);
    }
    let (m_multi, m_pooled) = (mean(&multi), mean(&pooled));
    assert!(
        m_multi >= m_pooled - 0.01,
        "multi-source mean {m_multi:.4} below pooled {m_pooled:.4} by more than 1 point"
    );
    assert!(
        strictly_better >= 2,
        "multi-source strictly better on only {strictly_better}/3 seeds \
         (multi {multi:?}, pooled {pooled:?})"
    );
    println!(
        "PASS criterion 7: multi-source mean {:.4} vs pooled {:.4} \
         (within tolerance; strictly better on {}/3 seeds)",
        m_multi, m_pooled, strictly_better
    );
}

// --- 8. closed-loop transfer --------------------------------------------------

#[test]
fn c08_closed_loop_transfer() {
    let season = season_runs();
    let cfg = season_config();
    let seed = cfg.seeds[0];
    let baseline = read_ftnn(&baseline_checkpoint_path(&season.dir, seed)).expect("baseline ckpt");
    let adapted = read_ftnn(&adapted_checkpoint_path(&season.dir, seed)).expect("adapted ckpt");

    let (_, base_sum) = fly_episodes(&cfg, &Pilot::Model(&baseline), seed).expect("baseline fly");
    let (_, adapt_sum) = fly_episodes(&cfg, &Pilot::Model(&adapted), seed).expect("adapted fly");
    let (_, oracle_sum) = fly_episodes(&cfg, &Pilot::GeometryOracle, seed).expect("oracle fly");

    assert!(
        adapt_sum.median_distance > base_sum.median_distance,
        "adapted median {:.1}m not above baseline {:.1}m",
        adapt_sum.median_distance,
        base_sum.median_distance
    );
    assert!(
        adapt_sum.median_distance <= oracle_sum.median_distance
            && base_sum.median_distance <= oracle_sum.median_distance,
        "a model pilot outflew the geometry oracle ({:.1} / {:.1} vs {:.1})",
        base_sum.median_distance,
        adapt_sum.median_distance,
        oracle_sum.median_distance
    );
    println!(
        "PASS criterion 8: median distance over {} winter worlds: baseline {:.1}m < \
         adapted {:.1}m <= oracle {:.1}m",
        cfg.fly_worlds, base_sum.median_distance, adapt_sum.median_distance,
        oracle_sum.median_distance
    );
}

// --- 9. rerun determinism -----------------------------------------------------

/// Runs every command once into `dir` and returns nothing; criterion 9
/// compares the byte content of two such directories.
fn run_everything(cfg: &ExperimentConfig, dir: &Path) {
    cmd_gen(cfg, dir).expect("gen");
    cmd_train(cfg, dir, None).expect("train");
    cmd_adapt(cfg, dir, None, None).expect("adapt");
    let seed = cfg.seeds[0];
    cmd_eval(cfg, dir, &adapted_checkpoint_path(dir, seed), None, Some(seed)).expect("eval");
    cmd_fly(cfg, dir, None, true, Some("oracle"), Some(seed)).expect("fly oracle");
    cmd_fly(cfg, dir, Some(&baseline_checkpoint_path(dir, seed)), false, Some("baseline"), Some(seed))
        .expect("fly baseline");
    cmd_sweep_lambda(cfg, dir, Some(seed)).expect("sweep");
}

fn dir_snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .expect("read dir")
        .map(|e| {
            let e = e.expect("dir entry");
            let name = e.file_name().to_string_lossy().into_owned();
            (name, std::fs::read(e.path()).expect("read file"))
        })
        .collect();
    files.sort_by(|a, b| a.0.cmp(&b.0));
    files
}

#[test]
fn c09_reruns_are_byte_identical() {
    let cfg = task_config(
        "samples_per_source = 72
         samples_target_unlabeled = 48
         samples_target_test = 36
         worlds_per_domain = 2
         trail_length = 60
         baseline_iterations = 12
         adapt_iterations = 6
         batch = 8
         validation_interval = 6
         seeds = 1
         lambda_grid = 0, 1
         fly_worlds = 2
         fly_trail_length = 40
         max_steps = 200",
    );
    let dir_a = work_dir("rerun_a");
    let dir_b = work_dir("rerun_b");
    run_everything(&cfg, &dir_a);
    run_everything(&cfg, &dir_b);

    let snap_a = dir_snapshot(&dir_a);
    let snap_b = dir_snapshot(&dir_b);
    let names: Vec<&String> = snap_a.iter().map(|(n, _)| n).collect();
    assert_eq!(
        names,
        snap_b.iter().map(|(n, _)| n).collect::<Vec<_>>(),
        "rerun produced a different file set"
    );
    let mut bytes = 0usize;
    for ((name, a), (_, b)) in snap_a.iter().zip(&snap_b) {
        assert_eq!(a, b, "file {name} differs between reruns");
        bytes += a.len();
    }
    println!(
        "PASS criterion 9: {} files, {} bytes byte-identical across independent reruns \
         of gen/train/adapt/eval/fly/sweep",
        snap_a.len(),
        bytes
    );
}

// --- 10. exact mechanics ------------------------------------------------------

#[test]
fn c10_mechanics_exact() {
    // Mirror augmentation doubles the count and pairs every sample with its
    // flipped, label-swapped twin.
    let spec = DomainSpec::from_token("summer-t1-morning", 1).unwrap();
    let opts = CaptureOptions {
        worlds: 2,
        frames_per_world: 5,
        width: 16,
        height: 16,
        trail_length: 60.0,
        augment_mirror: false,
        ..CaptureOptions::default()
    };
    let plain = capture_dataset(&spec, 42, &opts);
    let mirrored = capture_dataset(&spec, 42, &CaptureOptions { augment_mirror: true, ..opts });
    assert_eq!(mirrored.len(), 2 * plain.len(), "mirroring must exactly double the count");
    for (i, s) in plain.samples.iter().enumerate() {
        assert_eq!(&mirrored.samples[2 * i], s, "original sample {i} changed under mirroring");
        let twin = &mirrored.samples[2 * i + 1];
        assert_eq!(twin, &mirror_sample(s, 16, 16, 3));
        assert_eq!(twin.label, s.label.mirrored());
        // Independent flip: same row, mirrored column, channels intact.
        for r in 0..16 {
            for c in 0..16 {
                for ch in 0..3 {
                    assert_eq!(
                        twin.pixels[(r * 16 + c) * 3 + ch],
                        s.pixels[(r * 16 + (15 - c)) * 3 + ch]
                    );
                }
            }
        }
    }
    let swaps = |counts: [usize; 3]| [counts[2], counts[1], counts[0]];
    assert_eq!(
        mirrored.label_counts(),
        {
            let c = plain.label_counts();
            [c[0] + swaps(c)[0], c[1] + swaps(c)[1], c[2] + swaps(c)[2]]
        },
        "mirroring must swap TL/TR counts"
    );

    // Triplet labeling: the left-looking camera is labeled turn-right, the
    // centered camera go-straight, the right-looking camera turn-left. The
    // side cameras sit exactly symmetric at 30 degrees.
    assert_eq!(CAMERA_OFFSETS[1], 0.0);
    assert_eq!(CAMERA_OFFSETS[0], -CAMERA_OFFSETS[2]);
    assert!((CAMERA_OFFSETS[2] - std::f64::consts::FRAC_PI_6).abs() < 1e-12);
    let labels: Vec<Label> = plain.samples[..3].iter().map(|s| s.label).collect();
    assert_eq!(labels, [Label::TurnRight, Label::GoStraight, Label::TurnLeft]);

    // Controller sign contract: speed follows P(GS) inside [v_min, v_max],
    // yaw rate follows P(TR) − P(TL), positive = right, symmetric clamps.
    let ctrl = ControllerConfig::default();
    let cmd = control([0.2, 0.5, 0.3], &ctrl);
    assert_eq!(cmd.v, (ctrl.k_v * 0.5).clamp(ctrl.v_min, ctrl.v_max));
    assert_eq!(cmd.yaw_rate, ctrl.k_yaw * (0.3 - 0.2));
    assert!(cmd.yaw_rate > 0.0, "P(TR) > P(TL) must steer right");
    let swapped = control([0.3, 0.5, 0.2], &ctrl);
    assert_eq!(swapped.yaw_rate, -cmd.yaw_rate);
    assert_eq!(control([1.0, 0.0, 0.0], &ctrl).yaw_rate, -ctrl.yaw_max);
    assert_eq!(control([0.0, 0.0, 1.0], &ctrl).yaw_rate, ctrl.yaw_max);
    assert_eq!(control([0.0, 0.0, 1.0], &ctrl).v, ctrl.v_min);
    assert_eq!(control([0.0, 1.0, 0.0], &ctrl).v, ctrl.v_max);

    // Container roundtrips: datasets come back bit-equal; checkpoints are
    // stable from the first write on.
    let dir = work_dir("mechanics");
    let ftds = dir.join("roundtrip.ftds");
    write_ftds(&plain, &ftds).unwrap();
    let back = read_ftds(&ftds).unwrap();
    assert_eq!(back, plain, "dataset roundtrip must be an identity");
    let ftds2 = dir.join("roundtrip2.ftds");
    write_ftds(&back, &ftds2).unwrap();
    assert_eq!(std::fs::read(&ftds).unwrap(), std::fs::read(&ftds2).unwrap());

    let params = init_params(9, 16).unwrap();
    let ftnn = dir.join("roundtrip.ftnn");
    write_ftnn(&params, &ftnn).unwrap();
    let p1 = read_ftnn(&ftnn).unwrap();
    let ftnn2 = dir.join("roundtrip2.ftnn");
    write_ftnn(&p1, &ftnn2).unwrap();
    assert_eq!(std::fs::read(&ftnn).unwrap(), std::fs::read(&ftnn2).unwrap());
    assert_eq!(read_ftnn(&ftnn2).unwrap(), p1, "checkpoint roundtrip must be an identity");

    println!(
        "PASS criterion 10: mirror doubling/label swap, triplet camera labels, controller \
         signs and clamps, and container roundtrips all exact"
    );
}
