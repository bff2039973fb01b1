//! Exit criteria of the project, one test per criterion. Every test prints a
//! single `criterion N ... PASS|FAIL` line before asserting.
//!
//! The heavy criteria share their runs through `OnceLock`s so the method
//! comparison and the theory scenario are computed once per test binary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use shiftkd::augment::{
    build_augmented_dataset, config_objective, config_objective_tape, generate_batch, AugmentMethod, AugmentParams,
    Generator, Participants,
};
use shiftkd::diffcore::{check_gradient, check_gradient_wrt, Tape, Tensor};
use shiftkd::experiment::{
    aux_stage, cmd_pipeline, compare_methods, constructed_scenario, evaluate, prepare, run_seeds, ComparisonRow,
    ExperimentConfig, TheoryOutcome,
};
use shiftkd::metrics::{auc, group_metrics};
use shiftkd::models::{init_mlp, Activation, Teacher};
use shiftkd::synthworld::{make_world, Example, GroupKey, GroupedDataset, Split, World, WorldSpec};

fn verdict(n: u32, what: &str, pass: bool, detail: &str, elapsed: Duration) -> bool {
    println!(
        "criterion {n:>2} {what}: {} ({detail}; {:.1}s)",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    pass
}

fn within(elapsed: Duration, minutes: f64) -> bool {
    elapsed.as_secs_f64() <= minutes * 60.0
}

struct Comparison {
    rows: Vec<ComparisonRow>,
    elapsed: Duration,
}

impl Comparison {
    /// Seed-averaged worst-group accuracy per method name over `seeds`.
    fn mean_worst_group(&self, seeds: &[u64]) -> BTreeMap<String, f64> {
        self.mean_of(seeds, |r| Some(r.worst_group))
    }

    fn mean_of(&self, seeds: &[u64], f: impl Fn(&ComparisonRow) -> Option<f64>) -> BTreeMap<String, f64> {
        let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for r in self.rows.iter().filter(|r| seeds.contains(&r.seed)) {
            if let Some(v) = f(r) {
                let e = acc.entry(r.name.clone()).or_default();
                e.0 += v;
                e.1 += 1;
            }
        }
        acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
    }
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const BASELINES: [AugmentMethod; 4] = [
    AugmentMethod::StudentAdversarial,
    AugmentMethod::NoiseResample,
    AugmentMethod::LatentPerturb,
    AugmentMethod::Unconditional,
];

fn comparison() -> &'static Comparison {
    static CELL: OnceLock<Comparison> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = ExperimentConfig::default();
        let start = Instant::now();
        let rows = run_seeds(&SEEDS, |s| compare_methods(&cfg, s)).expect("method comparison");
        Comparison {
            rows: rows.into_iter().flatten().collect(),
            elapsed: start.elapsed(),
        }
    })
}

fn theory() -> &'static (TheoryOutcome, Duration) {
    static CELL: OnceLock<(TheoryOutcome, Duration)> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let out = constructed_scenario(&ExperimentConfig::default(), 0).expect("theory scenario");
        (out, start.elapsed())
    })
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect())
}

/// Soft-target cross-entropy of a random MLP on a random batch; one-hot
/// targets for every other case.
fn random_mlp_loss(case: u64) -> Tape<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + case);
    let d = rng.random_range(1..=4);
    let classes = rng.random_range(2..=4);
    let depth = rng.random_range(0..=2);
    let mut widths = vec![d];
    widths.extend((0..depth).map(|_| rng.random_range(2..=6)));
    widths.push(classes);
    let activation = if case % 2 == 0 { Activation::Tanh } else { Activation::Relu };
    let model = init_mlp::<f64>(&widths, activation, case).unwrap();
    let n = rng.random_range(1..=5);
    let x = random_matrix(&mut rng, d, n);
    let mut targets = Tensor::zeros(classes, n);
    for j in 0..n {
        if case % 4 < 2 {
            targets.set(rng.random_range(0..classes), j, 1.0);
        } else {
            let w: Vec<f64> = (0..classes).map(|_| rng.random_range(0.05..1.0)).collect();
            let s: f64 = w.iter().sum();
            for (c, v) in w.iter().enumerate() {
                targets.set(c, j, v / s);
            }
        }
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let (_, logits) = model.record(&mut tape, xv);
    let lp = tape.log_softmax(logits);
    let tv = tape.leaf(targets);
    let prod = tape.mul(tv, lp);
    let s = tape.sum(prod);
    tape.combine(&[(s, -1.0 / n as f64)], 0.0);
    tape
}

#[test]
fn criterion_01_gradient_suite() {
    let start = Instant::now();
    let mlp_worst = (0..100)
        .map(|case| check_gradient(&mut random_mlp_loss(case), &[], 1e-5).unwrap())
        .fold(0.0f64, f64::max);

    let mut spec = WorldSpec::celeba_toy(1);
    spec.latent_dim = 32;
    let world = Arc::new(make_world(spec, 0).unwrap());
    let teacher = Teacher::exact(world.clone(), Split::Test);
    let student = init_mlp::<f64>(&[2, 16, 16, 2], Activation::Tanh, 7).unwrap();
    let gen = Generator::exact(&world, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut z_worst = 0.0f64;
    for i in 0..20 {
        let z: Vec<f64> = (0..32).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let gamma = if i % 2 == 0 { 2.0 } else { 1.0 };
        let (mut tape, zv) = config_objective_tape(&z, i % 2, &teacher, &student, &gen, gamma).unwrap();
        z_worst = z_worst.max(check_gradient_wrt(&mut tape, zv, 1e-5).unwrap());
    }
    let elapsed = start.elapsed();
    let pass = mlp_worst < 1e-4 && z_worst < 1e-3 && within(elapsed, 1.0);
    assert!(verdict(
        1,
        "gradient suite",
        pass,
        &format!("mlp max rel err {mlp_worst:.2e}, latent objective max rel err {z_worst:.2e}"),
        elapsed
    ));
}

fn pairwise_auc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut s = 0.0;
    for p in pos {
        for n in neg {
            s += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    s / (pos.len() * neg.len()) as f64
}

/// The first `per_group` draws of every group from an i.i.d. test sample.
fn equal_groups(world: &World, per_group: usize, seed: u64) -> GroupedDataset {
    let raw = world.sample_split(Split::Test, 200 * per_group * world.num_groups(), seed);
    let mut taken: BTreeMap<GroupKey, usize> = BTreeMap::new();
    let examples: Vec<Example> = raw
        .examples()
        .iter()
        .filter(|e| {
            let c = taken.entry(e.group).or_default();
            *c += 1;
            *c <= per_group
        })
        .cloned()
        .collect();
    assert!(taken.len() == world.num_groups() && taken.values().all(|c| *c >= per_group));
    GroupedDataset::new(examples, Split::Test, world.num_classes(), world.num_spurious_bits())
}

#[test]
fn criterion_02_metric_identities() {
    let start = Instant::now();
    let mut ok = true;
    let mut worst_gap = 0.0f64;
    for k in 1..=3 {
        let world = make_world(WorldSpec::celeba_toy(k), k as u64).unwrap();
        let data = equal_groups(&world, 30, 5);
        for m in 0..5u64 {
            let model = init_mlp::<f64>(&[1 + k, 8, 2], Activation::Relu, 10 * k as u64 + m).unwrap();
            let r = group_metrics(&model, &data).unwrap();
            worst_gap = worst_gap.max((r.group_mean - r.sample_mean).abs());
            ok &= r.group_mean == r.sample_mean;
            ok &= r.worst_group <= r.group_mean && r.group_mean <= r.best_group();
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut auc_err = 0.0f64;
    for _ in 0..50 {
        let np = rng.random_range(1..40);
        let nn = rng.random_range(1..40);
        // coarse grid so ties occur
        let mut draw = |n| -> Vec<f64> { (0..n).map(|_| rng.random_range(0..12) as f64 / 4.0).collect() };
        let (pos, neg) = (draw(np), draw(nn));
        auc_err = auc_err.max((auc(&pos, &neg).unwrap() - pairwise_auc(&pos, &neg)).abs());
    }
    ok &= auc_err < 1e-12;
    let elapsed = start.elapsed();
    let pass = ok && elapsed.as_secs_f64() < 10.0;
    assert!(verdict(
        2,
        "metric identities",
        pass,
        &format!("max |group_mean - sample_mean| {worst_gap:e}, max auc deviation {auc_err:.1e}"),
        elapsed
    ));
}

#[test]
fn criterion_03_lemma_sweep() {
    let (out, elapsed) = theory();
    let deltas: Vec<f64> = out.lemmas.iter().map(|l| l.delta_t).collect();
    let every = out.lemmas.len() == 3 && out.lemmas.iter().all(|l| l.num_classes == 2 && l.holds() == Some(true));
    let detail = out
        .lemmas
        .iter()
        .map(|l| format!("delta_t {:.3}: lhs {:.4} rhs {:.4}", l.delta_t, l.lhs.value, l.rhs()))
        .collect::<Vec<_>>()
        .join(", ");
    let pass = every && within(*elapsed, 2.0);
    assert!(verdict(3, "lemma sweep", pass, &detail, *elapsed));
    assert_eq!(deltas.len(), 3);
}

#[test]
fn criterion_04_flagship_bound() {
    let (out, elapsed) = theory();
    let r = &out.report;
    let q = &r.quantities;
    let theta = *r.theta.as_ref().expect("theta defined");
    let ts = r.tau_sigma.expect("nonempty support");
    let alpha_expected = 1f64.min(q.omega.value / (2.0 * theta)) / 2.0;
    let identity = q.omega.value - q.alpha * (q.r_q.value - q.r_train.value);
    let identity_se = 3.0 * (q.omega.std_err.powi(2) + (q.alpha * q.r_q.std_err).powi(2) + (q.alpha * q.r_train.std_err).powi(2)).sqrt();
    let checks = [
        r.deltas.delta_t == 0.0,
        r.deltas.delta_s <= 0.05,
        ts.sigma < ts.tau,
        theta > 0.0,
        (q.alpha - alpha_expected).abs() <= 1e-15,
        r.assumptions_hold(),
        r.bound_holds() == Some(true),
        (q.omega_aug.value - identity).abs() <= identity_se,
    ];
    let pass = checks.iter().all(|c| *c) && within(*elapsed, 5.0);
    assert!(verdict(
        4,
        "flagship bound",
        pass,
        &format!(
            "delta_s {:.2e}, tau {:.3}, sigma {:.3}, theta {:.3}, omega {:.3}, alpha {:.3}, |omega_aug| {:.3} <= {:.3}",
            r.deltas.delta_s,
            ts.tau,
            ts.sigma,
            theta,
            q.omega.value,
            q.alpha,
            q.omega_aug.value.abs(),
            r.bound().unwrap_or(f64::NAN)
        ),
        *elapsed
    ));
}

#[test]
fn criterion_05_absent_group_agreement() {
    let start = Instant::now();
    let cfg = ExperimentConfig::default();
    let gaps = run_seeds(&SEEDS, |s| {
        let p = prepare(&cfg, s)?;
        let (aux, _) = aux_stage(&p, &cfg)?;
        let ag = evaluate(&p, &cfg, &aux)?.agreement;
        let k = p.world.num_spurious_bits();
        let train = p.world.priors(Split::Train);
        let absent = |g: &GroupKey| train[g.index(k)] == 0.0;
        let mean = |want: bool| {
            let rates: Vec<f64> = ag.per_group.iter().filter(|(g, _)| absent(g) == want).map(|(_, t)| t.rate()).collect();
            rates.iter().sum::<f64>() / rates.len() as f64
        };
        Ok((mean(true), mean(false)))
    })
    .unwrap();
    let lower = gaps.iter().filter(|(a, p)| a < p).count();
    let elapsed = start.elapsed();
    let detail = gaps.iter().map(|(a, p)| format!("{a:.3}<{p:.3}")).collect::<Vec<_>>().join(" ");
    let pass = lower >= 4 && within(elapsed, 5.0);
    assert!(verdict(5, "absent-group agreement", pass, &format!("{lower}/5 seeds: {detail}"), elapsed));
}

#[test]
fn criterion_06_worst_group_ordering() {
    let cmp = comparison();
    let wg = cmp.mean_worst_group(&SEEDS);
    let config = wg["config"];
    let baselines: Vec<f64> = BASELINES.iter().map(|m| wg[m.as_str()]).collect();
    let best = baselines.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ordered = baselines.iter().all(|b| config > *b && *b > wg["edrm"]) && wg["edrm"] > wg["erm"];
    let pass = ordered && config - best > 0.0 && within(cmp.elapsed, 20.0);
    let detail = wg.iter().map(|(k, v)| format!("{k} {v:.4}")).collect::<Vec<_>>().join(", ");
    assert!(verdict(
        6,
        "worst-group ordering",
        pass,
        &format!("{detail}; margin {:.4}", config - best),
        cmp.elapsed
    ));
}

#[test]
fn criterion_07_difficulty_ordering() {
    let cmp = comparison();
    let seeds = &SEEDS[..3];
    let acc = cmp.mean_of(seeds, |r| r.difficulty.as_ref().map(|d| d.acc_s));
    let mr = cmp.mean_of(seeds, |r| r.difficulty.as_ref().map(|d| d.mean_r));
    let mrd = cmp.mean_of(seeds, |r| r.difficulty.as_ref().map(|d| d.mean_r_d));
    let others = || BASELINES.iter().map(|m| m.as_str());
    let acc_lowest = others().all(|m| acc["config"] < acc[m]);
    let r_highest = others().all(|m| mr["config"] > mr[m]);
    let rd_highest = others().all(|m| mrd["config"] > mrd[m]);
    let detail = acc
        .keys()
        .map(|k| format!("{k} acc_s {:.3} R {:.3} R^D {:.3}", acc[k], mr[k], mrd[k]))
        .collect::<Vec<_>>()
        .join("; ");
    let pass = acc_lowest && r_highest && rd_highest && within(cmp.elapsed, 10.0);
    assert!(verdict(
        7,
        "difficulty ordering",
        pass,
        &format!("acc_s lowest {acc_lowest}, R highest {r_highest}, R^D highest {rd_highest}; {detail}"),
        cmp.elapsed
    ));
}

#[test]
fn criterion_08_objective_values() {
    let start = Instant::now();
    let a = config_objective(1.0, 0.0, 2.0);
    let b = config_objective(0.9, 0.9, 2.0);
    // 0.81 + 0.01 rounds one ulp above 0.82 in binary64
    let b_ok = b == 0.82 || b == f64::from_bits(0.82f64.to_bits() + 1);
    let mut linear = true;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..1000 {
        let (t, f): (f64, f64) = (rng.random(), rng.random());
        linear &= config_objective(t, f, 1.0) == t + (1.0 - f);
    }
    let elapsed = start.elapsed();
    let pass = a == 2.0 && b_ok && linear && elapsed.as_secs_f64() < 1.0;
    assert!(verdict(8, "objective values", pass, &format!("(1,0,2) -> {a}, (0.9,0.9,2) -> {b}"), elapsed));
}

#[test]
fn criterion_09_multiplicity_accounting() {
    let start = Instant::now();
    let mut spec = WorldSpec::celeba_toy(1);
    spec.latent_dim = 32;
    let world = Arc::new(make_world(spec, 0).unwrap());
    let train = world.sample_split(Split::Train, 50, 1);
    let teacher = Teacher::exact(world.clone(), Split::Test);
    let student = init_mlp::<f64>(&[2, 8, 2], Activation::Tanh, 2).unwrap();
    let gen = Generator::exact(&world, 3).unwrap();
    let who = Participants {
        teacher: &teacher,
        student: &student,
        generator: &gen,
    };
    let mut ok = true;
    let mut detail = Vec::new();
    for m in [2usize, 10] {
        let batch = generate_batch(AugmentMethod::Config, &train, &who, &AugmentParams::default(), m, 4).unwrap();
        let (joint, alpha) = build_augmented_dataset(&train, &batch, m).unwrap();
        ok &= joint.len() == (m + 1) * train.len() && alpha == m as f64 / (m + 1) as f64;
        detail.push(format!("m={m}: {} = {}N, alpha {alpha}", joint.len(), joint.len() / train.len()));
    }
    let elapsed = start.elapsed();
    let pass = ok && elapsed.as_secs_f64() < 1.0;
    assert!(verdict(9, "multiplicity accounting", pass, &detail.join(", "), elapsed));
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn criterion_10_pipeline_determinism() {
    let start = Instant::now();
    let cfg = ExperimentConfig::default();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    cmd_pipeline(&cfg, 3, a.path()).unwrap();
    cmd_pipeline(&cfg, 3, b.path()).unwrap();
    let (fa, fb) = (files_under(a.path()), files_under(b.path()));
    let metric_files = fa.iter().filter(|p| p.extension().is_some_and(|e| e == "csv")).count();
    let differing: Vec<_> = fa
        .iter()
        .filter(|p| fs::read(a.path().join(p)).unwrap() != fs::read(b.path().join(p)).unwrap_or_default())
        .collect();
    let elapsed = start.elapsed();
    let pass = fa == fb && metric_files > 0 && differing.is_empty() && within(elapsed, 10.0);
    assert!(verdict(
        10,
        "pipeline determinism",
        pass,
        &format!("{} files ({metric_files} csv), {} differing", fa.len(), differing.len()),
        elapsed
    ));
}

#[test]
fn criterion_11_combined_loss_ablation() {
    let cmp = comparison();
    let per_seed: Vec<(f64, f64)> = SEEDS
        .iter()
        .map(|&s| {
            let get = |n: &str| cmp.rows.iter().find(|r| r.seed == s && r.name == n).map(|r| r.worst_group);
            (get("erm+edrm").expect("erm+edrm row"), get("edrm").expect("edrm row"))
        })
        .collect();
    let wg = cmp.mean_worst_group(&SEEDS);
    let (both, edrm) = (wg["erm+edrm"], wg["edrm"]);
    let flag = if both > edrm { "REVERSED" } else { "as expected" };
    let detail = per_seed.iter().map(|(a, b)| format!("{a:.3}/{b:.3}")).collect::<Vec<_>>().join(" ");
    let pass = per_seed.len() == 5 && both.is_finite() && edrm.is_finite();
    assert!(verdict(
        11,
        "combined-loss ablation",
        pass,
        &format!("erm+edrm {both:.4} vs edrm {edrm:.4} ({flag}); per seed {detail}"),
        cmp.elapsed
    ));
}
