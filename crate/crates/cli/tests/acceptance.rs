//! Acceptance criteria, one test per criterion.
//!
//! Each test prints a single `PASS`/`FAIL` line; run with `--nocapture` to
//! see them all. Oracles here are written independently of the library.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;

use adaptinfer::analytics::{detect_change_point, miou_matrix};
use adaptinfer::cost::{run_cost, CostParams};
use adaptinfer::prune::{
    make_hook, score_vision, solve_schedule, text_prior, top_k_retain, KeepPolicy,
};
use adaptinfer::{
    generate_sample, AttentionMaps, KeepAll, LayerAttention, Matrix, Model, ModelConfig,
    PruneSchedule, SampleSpec, SeededRng, Stage,
};
use serde_json::Value;

fn verdict(name: &str, pass: bool, detail: String) {
    println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{name}: {detail}");
}

// Closed-form FLOPs, written out independently of the cost module.
fn layer_flops(n: f64, d: f64, m: f64) -> f64 {
    4.0 * n * d * d + 2.0 * n * n * d + 3.0 * n * d * m
}

fn reference_params(schedule: PruneSchedule) -> CostParams {
    CostParams {
        hidden_dim: 4096,
        ffn_dim: 11008,
        num_layers: 32,
        text_len: 64,
        initial_vision: 576,
        schedule,
        decode_steps: 0,
    }
}

fn budget64() -> PruneSchedule {
    solve_schedule(64.0, 576, 32, &[1, 10, 20], &KeepPolicy::default()).unwrap()
}

#[test]
fn flops_dense() {
    let report = run_cost(&reference_params(PruneSchedule::empty(32))).unwrap();
    let tflops = report.prefill_total as f64 / 1e12;
    let oracle = 32.0 * layer_flops(640.0, 4096.0, 11008.0) / 1e12;
    let rel = (tflops - 4.268).abs() / 4.268;
    verdict(
        "flops-dense",
        rel <= 0.05 && (tflops - oracle).abs() < 1e-9,
        format!(
            "{tflops:.4} TFLOPs vs 4.268 (rel err {:.2}%), closed form {oracle:.4}",
            rel * 100.0
        ),
    );
}

#[test]
fn flops_pruned_reduction() {
    let schedule = budget64();
    let report = run_cost(&reference_params(schedule.clone())).unwrap();
    let mut oracle = 0.0;
    for n in schedule.vision_timeline(576).unwrap() {
        oracle += layer_flops((64 + n) as f64, 4096.0, 11008.0);
    }
    let dense = 32.0 * layer_flops(640.0, 4096.0, 11008.0);
    let reduction = 100.0 * (1.0 - report.prefill_ratio_vs_dense);
    let oracle_reduction = 100.0 * (1.0 - oracle / dense);
    verdict(
        "flops-pruned-reduction",
        (reduction - 74.3).abs() <= 2.0,
        format!(
            "keep {:?} gives {reduction:.2}% reduction (closed form {oracle_reduction:.2}%), target 74.3 +/- 2",
            schedule.keep_counts()
        ),
    );
}

#[test]
fn prune_overhead_negligible() {
    let report = run_cost(&reference_params(budget64())).unwrap();
    // T^2 + 2TV per stage, alive counts 576, 58, 29 before each stage
    let oracle: f64 = [576.0, 58.0, 29.0]
        .iter()
        .map(|v| 64.0 * 64.0 + 2.0 * 64.0 * v)
        .sum();
    let share = report.prune_total as f64 / report.prefill_total as f64;
    verdict(
        "prune-overhead",
        share < 1e-4 && report.prune_total as f64 == oracle,
        format!(
            "{} FLOPs = {:.2e} of prefill (limit 1e-4)",
            report.prune_total, share
        ),
    );
}

fn layer_weighted_average(stages: &[(usize, usize)], v0: usize, layers: usize) -> f64 {
    let mut total = 0usize;
    for l in 0..layers {
        let alive = stages
            .iter()
            .filter(|(p, _)| *p < l)
            .map(|(_, k)| *k)
            .next_back()
            .unwrap_or(v0);
        total += alive;
    }
    total as f64 / layers as f64
}

fn check_budget(budget: f64) {
    let name = format!("budget-accounting-{budget}");
    match solve_schedule(budget, 576, 32, &[1, 10, 20], &KeepPolicy::default()) {
        Ok(s) => {
            let stages: Vec<(usize, usize)> = s
                .stages()
                .iter()
                .map(|st| (st.prune_after_layer, st.keep))
                .collect();
            let avg = layer_weighted_average(&stages, 576, 32);
            verdict(
                &name,
                (avg - budget).abs() <= 1.0,
                format!("keep {:?} averages {avg:.3}", s.keep_counts()),
            );
        }
        Err(e) => verdict(&name, false, format!("solver: {e}")),
    }
}

#[test]
fn budget_accounting_32() {
    check_budget(32.0);
}

#[test]
fn budget_accounting_48() {
    check_budget(48.0);
}

#[test]
fn budget_accounting_64() {
    check_budget(64.0);
}

#[test]
fn budget_accounting_128() {
    check_budget(128.0);
}

fn two_pass_sse(s: &[f64]) -> f64 {
    let mu = s.iter().sum::<f64>() / s.len() as f64;
    s.iter().map(|v| (v - mu) * (v - mu)).sum()
}

#[test]
fn change_point_oracle() {
    let mut rng = SeededRng::new(0xC0FFEE);
    let mut mismatches = 0;
    for case in 0..10_000 {
        let len = 2 + rng.below(19) as usize;
        let series: Vec<f64> = match case % 4 {
            0 => (0..len).map(|_| rng.next_normal()).collect(),
            1 => {
                let b = 1 + rng.below(len as u64 - 1) as usize;
                let jump = 5.0 * rng.next_normal();
                (0..len)
                    .map(|i| rng.next_normal() * 0.3 + if i >= b { jump } else { 0.0 })
                    .collect()
            }
            2 => {
                let mut acc = 0.0;
                (0..len)
                    .map(|_| {
                        acc += rng.next_f64();
                        acc
                    })
                    .collect()
            }
            _ => (0..len).map(|_| 100.0 * rng.next_f64() - 50.0).collect(),
        };
        let mut best = (0, f64::INFINITY);
        for b in 1..len {
            let c = two_pass_sse(&series[..b]) + two_pass_sse(&series[b..]);
            if c < best.1 {
                best = (b, c);
            }
        }
        if detect_change_point(&series).unwrap().breakpoint != best.0 {
            mismatches += 1;
        }
    }
    verdict(
        "change-point-oracle",
        mismatches == 0,
        format!("{mismatches} mismatches in 10000 series"),
    );
}

/// Random causal row-stochastic attention over `t` text and `v` vision keys.
fn random_blocks(rng: &mut SeededRng, t: usize, v: usize) -> (Matrix, Matrix) {
    let mut t2t = Matrix::zeros(t, t);
    let mut t2v = Matrix::zeros(t, v);
    for i in 0..t {
        let w: Vec<f64> = (0..v + i + 1).map(|_| rng.next_f64() + 1e-6).collect();
        let total: f64 = w.iter().sum();
        for j in 0..v {
            t2v[(i, j)] = w[j] / total;
        }
        for j in 0..=i {
            t2t[(i, j)] = w[v + j] / total;
        }
    }
    (t2t, t2v)
}

fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
    }
}

#[test]
#[allow(clippy::needless_range_loop)]
fn scoring_oracle() {
    let mut rng = SeededRng::new(0x5C0BE);
    let (mut worst, mut set_mismatch) = (0.0f64, 0);
    for _ in 0..1000 {
        let t = 1 + rng.below(8) as usize;
        let v = 1 + rng.below(12) as usize;
        let (t2t, t2v) = random_blocks(&mut rng, t, v);
        let ids: Vec<usize> = (0..v).map(|j| 3 * j + 1).collect();

        let prior = text_prior(0, &t2t).unwrap();
        let mut w = vec![0.0; t];
        for j in 0..t {
            for i in 0..t {
                w[j] += t2t[(i, j)];
            }
        }
        for j in 0..t {
            worst = worst.max(rel_err(prior.weights[j], w[j]));
        }

        let scores = score_vision(&prior, &t2v, &ids).unwrap();
        let mut s = vec![0.0; v];
        for j in 0..v {
            for i in 0..t {
                s[j] += w[i] * t2v[(i, j)];
            }
        }
        for j in 0..v {
            worst = worst.max(rel_err(scores.scores[j], s[j]));
        }

        // exhaustive k-subset search on the library's scores, ties to the
        // lexicographically smallest subset
        let k = rng.below(v as u64 + 1) as usize;
        let mut best: Option<(f64, Vec<usize>)> = None;
        for mask in 0u32..(1 << v) {
            if mask.count_ones() as usize != k {
                continue;
            }
            let set: Vec<usize> = (0..v).filter(|i| mask & (1 << i) != 0).collect();
            let sum: f64 = set.iter().map(|&i| scores.scores[i]).sum();
            if best
                .as_ref()
                .is_none_or(|(b, bs)| sum > *b || (sum == *b && set < *bs))
            {
                best = Some((sum, set));
            }
        }
        let want: Vec<usize> = best.unwrap().1.iter().map(|&i| ids[i]).collect();
        if top_k_retain(&scores, k).unwrap().kept != want {
            set_mismatch += 1;
        }
    }
    verdict(
        "scoring-oracle",
        worst <= 1e-12 && set_mismatch == 0,
        format!("max rel err {worst:.2e}, {set_mismatch} index-set mismatches in 1000 instances"),
    );
}

fn conservation_error(maps: &AttentionMaps) -> f64 {
    let mut worst = 0.0f64;
    for l in &maps.per_layer {
        for i in 0..l.text_count() {
            let s: f64 = l.t2t.row(i).iter().chain(l.t2v.row(i)).sum();
            worst = worst.max((s - 1.0).abs());
        }
    }
    worst
}

#[test]
fn conservation() {
    let model = Model::init(ModelConfig::default()).unwrap();
    let pruned = solve_schedule(64.0, 144, 32, &[1, 10, 20], &KeepPolicy::default()).unwrap();
    let mut worst = 0.0f64;
    for s in 0..100 {
        let spec = SampleSpec {
            seed: s,
            ..SampleSpec::default()
        };
        let sample = generate_sample(&spec, 64).unwrap();
        let (_, maps) = model
            .prefill("c", sample.sequence.clone(), &mut KeepAll)
            .unwrap();
        worst = worst.max(conservation_error(&maps));
        let (_, maps) = model
            .prefill("c", sample.sequence, &mut make_hook(pruned.clone()))
            .unwrap();
        worst = worst.max(conservation_error(&maps));
    }
    verdict(
        "conservation",
        worst <= 1e-9,
        format!("max |row sum - 1| = {worst:.2e} over 100 samples, dense and pruned"),
    );
}

/// P(X >= wins) for X ~ Binomial(n, 1/2), exact.
fn sign_test_p(wins: u32, n: u32) -> f64 {
    let mut c: u128 = 1;
    let mut tail: u128 = 0;
    for i in 0..=n {
        if i >= wins {
            tail += c;
        }
        c = c * (n - i) as u128 / (i + 1) as u128;
    }
    tail as f64 / 2f64.powi(n as i32)
}

#[test]
fn planted_signal_retrieval() {
    let model = Model::init(ModelConfig::default()).unwrap();
    let (mut wins, mut losses) = (0u32, 0u32);
    let (mut ours_total, mut random_total) = (0usize, 0usize);
    for seed in 0..100u64 {
        let spec = SampleSpec {
            seed,
            ..SampleSpec::default()
        };
        let sample = generate_sample(&spec, 64).unwrap();
        let k = sample.planted.len();
        let schedule = PruneSchedule::new(
            vec![Stage {
                prune_after_layer: 1,
                keep: k,
            }],
            32,
        )
        .unwrap();
        let mut hook = make_hook(schedule);
        model.prefill("p", sample.sequence, &mut hook).unwrap();
        let kept = &hook.retained()[0].kept;
        let ours = kept.iter().filter(|i| sample.planted.contains(i)).count();
        let baseline = SeededRng::new(0xBA5E_0000 + seed).sample_indices(spec.vision_count, k);
        let random = baseline
            .iter()
            .filter(|i| sample.planted.contains(i))
            .count();
        ours_total += ours;
        random_total += random;
        match ours.cmp(&random) {
            std::cmp::Ordering::Greater => wins += 1,
            std::cmp::Ordering::Less => losses += 1,
            std::cmp::Ordering::Equal => {}
        }
    }
    let p = sign_test_p(wins, wins + losses);
    verdict(
        "planted-signal-retrieval",
        ours_total > random_total && p < 0.01,
        format!(
            "mean hits {:.2} vs random {:.2}; {wins} wins, {losses} losses, sign test p = {p:.2e}",
            ours_total as f64 / 100.0,
            random_total as f64 / 100.0
        ),
    );
}

fn miou_violations(corpus: &[AttentionMaps], fraction: f64) -> usize {
    let m = miou_matrix(corpus, fraction).unwrap();
    let mut bad = 0;
    for i in 0..m.num_layers {
        if m.get(i, i) != 1.0 {
            bad += 1;
        }
        for j in 0..m.num_layers {
            let x = m.get(i, j);
            if x != m.get(j, i) || !(0.0..=1.0).contains(&x) {
                bad += 1;
            }
        }
    }
    bad
}

#[test]
fn miou_structure() {
    let mut rng = SeededRng::new(77);
    let mut corpora: Vec<(String, Vec<AttentionMaps>, f64)> = Vec::new();
    for (t, v, layers) in [(1, 3, 4), (7, 5, 9), (16, 12, 12)] {
        let corpus = (0..5)
            .map(|s| AttentionMaps {
                sample_id: format!("r{s}"),
                per_layer: (0..layers)
                    .map(|l| {
                        let (t2t, t2v) = random_blocks(&mut rng, t, v);
                        LayerAttention {
                            layer_index: l,
                            t2t,
                            t2v,
                            vision_ids: (0..v).collect(),
                        }
                    })
                    .collect(),
            })
            .collect();
        corpora.push((format!("random T={t}"), corpus, 0.2));
    }
    let cfg = ModelConfig {
        num_layers: 8,
        ..ModelConfig::default()
    };
    let model = Model::init(cfg).unwrap();
    let schedule = solve_schedule(60.0, 144, 8, &[1, 4], &KeepPolicy::default()).unwrap();
    let mut toy = Vec::new();
    for s in 0..4 {
        let sample = generate_sample(
            &SampleSpec {
                seed: s,
                ..SampleSpec::default()
            },
            64,
        )
        .unwrap();
        toy.push(
            model
                .prefill("d", sample.sequence.clone(), &mut KeepAll)
                .unwrap()
                .1,
        );
        toy.push(
            model
                .prefill("p", sample.sequence, &mut make_hook(schedule.clone()))
                .unwrap()
                .1,
        );
    }
    corpora.push(("toy dense+pruned".into(), toy.clone(), 0.2));
    corpora.push(("toy full fraction".into(), toy, 1.0));
    corpora.push(("empty".into(), Vec::new(), 0.2));

    let mut bad = Vec::new();
    for (name, corpus, fraction) in &corpora {
        let n = miou_violations(corpus, *fraction);
        if n > 0 {
            bad.push(format!("{name}: {n}"));
        }
    }
    verdict(
        "miou-structure",
        bad.is_empty(),
        format!("{} corpora checked, violations {bad:?}", corpora.len()),
    );
}

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_adaptinfer"));
    cmd.env_remove("ADAPTINFER_OUT");
    cmd
}

fn run(args: &[&str], out: &Path) -> Result<String, String> {
    let o = bin().arg("--out").arg(out).args(args).output().unwrap();
    if o.status.success() {
        Ok(String::from_utf8_lossy(&o.stdout).into_owned())
    } else {
        Err(String::from_utf8_lossy(&o.stderr).into_owned())
    }
}

fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path
                    .strip_prefix(root)
                    .unwrap()
                    .to_string_lossy()
                    .into_owned();
                files.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    files
}

#[test]
fn determinism() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let model = ["--samples", "4", "--seed", "11"];
    for d in &dirs {
        run(&[&["simulate"][..], &model].concat(), d.path()).unwrap();
        run(
            &[&["prune", "--budget", "64"][..], &model].concat(),
            d.path(),
        )
        .unwrap();
        run(
            &[
                &[
                    "prune",
                    "--budget",
                    "64",
                    "--placement",
                    "random",
                    "--name",
                    "rand",
                ][..],
                &model,
            ]
            .concat(),
            d.path(),
        )
        .unwrap();
    }
    let (a, b) = (snapshot(dirs[0].path()), snapshot(dirs[1].path()));
    let differing: Vec<&String> = a
        .keys()
        .filter(|k| b.get(*k) != a.get(*k))
        .chain(b.keys().filter(|k| !a.contains_key(*k)))
        .collect();
    verdict(
        "determinism",
        a.len() > 10 && differing.is_empty(),
        format!("{} files compared, differing {differing:?}", a.len()),
    );
}

#[test]
fn schedule_ablation_harness() {
    let root = tempfile::tempdir().unwrap();
    let model = ["--samples", "1", "--vision", "576", "--budget", "128"];
    let cases: Vec<(&str, Vec<&str>, Vec<u64>)> = vec![
        (
            "uniform-0-9",
            vec!["--placement", "uniform", "--start", "0", "--stride", "9"],
            vec![0, 9, 18, 27],
        ),
        (
            "uniform-2-10",
            vec!["--placement", "uniform", "--start", "2", "--stride", "10"],
            vec![2, 12, 22],
        ),
        (
            "single-1",
            vec!["--placement", "single", "--layer", "1"],
            vec![1],
        ),
        (
            "random-3",
            vec!["--placement", "random", "--stage-layers", "3"],
            vec![3],
        ),
        (
            "random-2-15",
            vec!["--placement", "random", "--stage-layers", "2,15"],
            vec![2, 15],
        ),
        (
            "random-2-8-16",
            vec!["--placement", "random", "--stage-layers", "2,8,16"],
            vec![2, 8, 16],
        ),
        (
            "random-2-4-8-16",
            vec!["--placement", "random", "--stage-layers", "2,4,8,16"],
            vec![2, 4, 8, 16],
        ),
        (
            "random-3-6-23",
            vec!["--placement", "random", "--stage-layers", "3,6,23"],
            vec![3, 6, 23],
        ),
        (
            "random-drawn",
            vec!["--placement", "random", "--draws", "3"],
            vec![],
        ),
    ];
    let mut problems = Vec::new();
    for (name, flags, layers) in &cases {
        let args: Vec<&str> = ["prune", "--name", name]
            .iter()
            .copied()
            .chain(flags.iter().copied())
            .chain(model)
            .collect();
        if let Err(e) = run(&args, root.path()) {
            problems.push(format!("{name}: {}", e.trim()));
            continue;
        }
        let dir = root.path().join(name);
        let summary: Value =
            serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
        let got: Vec<u64> = summary["stage_layers"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_u64().unwrap())
            .collect();
        if !layers.is_empty() && &got != layers {
            problems.push(format!("{name}: layers {got:?}"));
        }
        if name.starts_with("random")
            && summary["random_draws"].as_array().map(Vec::len) != Some(got.len())
        {
            problems.push(format!("{name}: draws not logged"));
        }
        let retained = fs::read_to_string(dir.join("retained.csv")).unwrap();
        if retained.lines().count() != 1 + got.len() {
            problems.push(format!(
                "{name}: {} retained rows",
                retained.lines().count() - 1
            ));
        }
        let cost = fs::read_to_string(dir.join("cost.csv")).unwrap();
        if !cost.starts_with("method,tokens,flops_T,ratio\nvanilla,") || cost.lines().count() != 3 {
            problems.push(format!("{name}: cost table {cost:?}"));
        }
        let avg = summary["average_tokens"].as_f64().unwrap();
        if (avg - 128.0).abs() > 1.0 {
            problems.push(format!("{name}: average {avg}"));
        }
    }
    verdict(
        "schedule-ablation-harness",
        problems.is_empty(),
        format!("{} baseline schedules, problems {problems:?}", cases.len()),
    );
}
