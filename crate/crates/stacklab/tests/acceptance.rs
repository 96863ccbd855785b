//! End-to-end acceptance gate.
//!
//! Nine criteria, each printing exactly one PASS/FAIL line with its key
//! numbers and elapsed time. The data-hungry criteria share one corpus
//! built at desk scale (16 groups x 200 scenes), so the whole gate runs in
//! tens of minutes; run it with `--nocapture` to watch progress.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use stacklab::dataset::{self, BuildOptions, Manifest, Split};
use stacklab::geometry::{Cuboid, Pose, Quat, Vec3};
use stacklab::learning::{
    self, cam, gradients, Design, Model, ModelPlan, TrainConfig, CLASS_STABLE, CLASS_UNSTABLE,
};
use stacklab::physics::{simulate, SimConfig, SimTrace};
use stacklab::planning::{self, CandidateOutcome, Executor, Orientation, PlacementReport};
use stacklab::scenegen::{generate_scene_with_retries, GenParams, GroupSpec, Scene, SceneConfig};
use stacklab::stability::{label_stability, quasi_static_check, Verdict, TAU};

/// Step budget for the cross-group experiment. The pooled training halves
/// hold 800 samples, so this is 240 passes; the complex pool needs the
/// extra schedule (relative to the per-group default) to saturate before
/// the transfer comparison is meaningful.
const CROSS_STEPS: usize = 6000;

#[derive(Default)]
struct Gate {
    failures: Vec<String>,
}

impl Gate {
    fn report(&mut self, id: u32, name: &str, pass: bool, detail: &str, elapsed: Duration) {
        let verdict = if pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {id} ({name}): {verdict} [{:.1}s] {detail}",
            elapsed.as_secs_f64()
        );
        if !pass {
            self.failures
                .push(format!("criterion {id} ({name}): {detail}"));
        }
    }
}

fn group(name: &str) -> GroupSpec {
    name.parse().unwrap()
}

fn single_block_scene(shape: Cuboid, position: Vec3) -> Scene {
    Scene {
        config: SceneConfig {
            group: group("4B-2D-Uni"),
            seed: 0,
        },
        scene_index: 0,
        blocks: vec![stacklab::scenegen::Block {
            shape,
            pose: Pose::new(position, Quat::identity()),
        }],
    }
}

/// Every pose component of a trace, bit-exact.
fn trace_bits(trace: &SimTrace) -> Vec<u64> {
    let mut out = Vec::new();
    for pose in trace.initial_poses.iter().chain(&trace.final_poses) {
        for v in [pose.position.x, pose.position.y, pose.position.z] {
            out.push(v.to_bits());
        }
        let q = pose.orientation.quaternion().coords;
        for i in 0..4 {
            out.push(q[i].to_bits());
        }
    }
    out.push(trace.diverged as u64);
    out
}

// ---------------------------------------------------------------------------
// 1. Physics analytic checks
// ---------------------------------------------------------------------------

fn criterion_1(gate: &mut Gate) {
    let t = Instant::now();

    // Free fall: a block released well above the ground for 1 s.
    let fall_cfg = SimConfig {
        duration: 1.0,
        ..SimConfig::default()
    };
    let scene = single_block_scene(Cuboid::canonical_block(), Vec3::new(0.0, 0.0, 8.0));
    let trace = simulate(&scene, &fall_cfg);
    let dropped = (trace.initial_poses[0].position - trace.final_poses[0].position).norm();
    let want = 0.5 * 9.81 * 1.0 * 1.0;
    let fall_err = (dropped - want).abs() / want;
    let fall_ok = fall_err < 0.01;

    // Rest: a block standing on the ground for the full 2 s / 2000 steps.
    let rest_cfg = SimConfig::default();
    let steps_ok = rest_cfg.duration == 2.0 && rest_cfg.dt == 1e-3;
    let scene = single_block_scene(Cuboid::canonical_block(), Vec3::new(0.0, 0.0, 1.5));
    let rest_trace = simulate(&scene, &rest_cfg);
    let rest_disp: f64 = label_stability(&rest_trace, TAU)
        .per_block_displacement
        .iter()
        .sum();
    let rest_ok = rest_disp < 1e-3;

    // Determinism: bit-exact across repeated runs and worker counts.
    let scenes: Vec<Scene> = (0..6)
        .map(|i| {
            generate_scene_with_retries(&group("6B-3D-NonUni"), i, 42, &GenParams::default())
                .unwrap()
                .0
        })
        .collect();
    let run_all = |threads: usize| -> Vec<Vec<u64>> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        pool.install(|| {
            use rayon::prelude::*;
            scenes
                .par_iter()
                .map(|s| trace_bits(&simulate(s, &SimConfig::default())))
                .collect()
        })
    };
    let a = run_all(1);
    let b = run_all(1);
    let c = run_all(4);
    let det_ok = a == b && a == c;

    let elapsed = t.elapsed();
    let pass = fall_ok && rest_ok && det_ok && steps_ok && elapsed < Duration::from_secs(10);
    gate.report(
        1,
        "physics analytic checks",
        pass,
        &format!(
            "free-fall err {:.4}% (<1%), rest displacement {rest_disp:.2e} (<1e-3), \
             bit-exact across runs/workers: {det_ok}",
            fall_err * 100.0
        ),
        elapsed,
    );
}

// ---------------------------------------------------------------------------
// 2. Dynamic label vs quasi-static oracle
// ---------------------------------------------------------------------------

fn criterion_2(gate: &mut Gate) {
    let t = Instant::now();
    let spec = group("4B-2D-Uni");
    let mut non_marginal = 0u32;
    let mut agree = 0u32;
    let mut big = 0u32;
    let mut big_agree = 0u32;
    for i in 0..200 {
        let (scene, _) = generate_scene_with_retries(&spec, i, 42, &GenParams::default()).unwrap();
        let unstable = label_stability(&simulate(&scene, &SimConfig::default()), TAU).unstable;
        let eq = quasi_static_check(&scene).unwrap();
        if eq.verdict != Verdict::Marginal {
            non_marginal += 1;
            if (eq.verdict == Verdict::Unstable) == unstable {
                agree += 1;
            }
        }
        if eq.margin.abs() > 0.2 {
            big += 1;
            if (eq.margin < 0.0) == unstable {
                big_agree += 1;
            }
        }
    }
    let frac = agree as f64 / non_marginal as f64;
    let elapsed = t.elapsed();
    let pass = frac >= 0.90 && big > 0 && big_agree == big && elapsed < Duration::from_secs(300);
    gate.report(
        2,
        "oracle agreement",
        pass,
        &format!(
            "non-marginal agreement {agree}/{non_marginal} = {:.1}% (>=90%), \
             |margin|>0.2 agreement {big_agree}/{big} (=100%)",
            frac * 100.0
        ),
        elapsed,
    );
}

// ---------------------------------------------------------------------------
// 3. Stability-formula semantics on randomized traces
// ---------------------------------------------------------------------------

fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
    Pose::new(
        Vec3::new(
            rng.gen_range(-3.0..3.0),
            rng.gen_range(-3.0..3.0),
            rng.gen_range(0.0..6.0),
        ),
        Quat::identity(),
    )
}

fn criterion_3(gate: &mut Gate) {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut cases = 0u32;
    let mut ok = true;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=15);
        let initial: Vec<Pose> = (0..n).map(|_| random_pose(&mut rng)).collect();
        let mut displacements = Vec::with_capacity(n);
        let final_poses: Vec<Pose> = initial
            .iter()
            .map(|p| {
                let d = rng.gen_range(0.0..0.6);
                let dir = Vec3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                );
                let dir = if dir.norm() < 1e-9 {
                    Vec3::new(1.0, 0.0, 0.0)
                } else {
                    dir / dir.norm()
                };
                displacements.push((dir * d).norm());
                Pose::new(p.position + dir * d, p.orientation)
            })
            .collect();
        let trace = SimTrace {
            initial_poses: initial.clone(),
            final_poses: final_poses.clone(),
            per_step_positions: None,
            diverged: false,
        };
        let tau = rng.gen_range(0.01..0.5);
        let label = label_stability(&trace, tau);

        // Or-semantics: unstable exactly when any displacement exceeds tau.
        ok &= label.unstable == displacements.iter().any(|&d| d > tau);
        // tau-monotonicity: a stricter threshold can only add instability.
        let smaller = rng.gen_range(0.0..1.0) * tau;
        if label.unstable {
            ok &= label_stability(&trace, smaller).unstable;
        }
        let larger = tau + rng.gen_range(0.0..0.5);
        if !label.unstable {
            ok &= !label_stability(&trace, larger).unstable;
        }
        // Permutation invariance: block order cannot change the verdict.
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let permuted = SimTrace {
            initial_poses: order.iter().map(|&i| initial[i]).collect(),
            final_poses: order.iter().map(|&i| final_poses[i]).collect(),
            per_step_positions: None,
            diverged: false,
        };
        ok &= label_stability(&permuted, tau).unstable == label.unstable;
        cases += 1;
    }

    // Strict inequality: displacement exactly tau stays stable.
    let start = Pose::new(Vec3::new(0.0, 0.0, 1.0), Quat::identity());
    let moved = Pose::new(
        start.position + Vec3::new(0.25, 0.0, 0.0),
        start.orientation,
    );
    let boundary = SimTrace {
        initial_poses: vec![start],
        final_poses: vec![moved],
        per_step_positions: None,
        diverged: false,
    };
    ok &= !label_stability(&boundary, 0.25).unstable;
    ok &= label_stability(&boundary, 0.25 - 1e-12).unstable;

    let elapsed = t.elapsed();
    let pass = ok && cases == 1000 && elapsed < Duration::from_secs(10);
    gate.report(
        3,
        "stability-formula semantics",
        pass,
        &format!("{cases} randomized traces; or-semantics, strict boundary, monotonicity, permutation invariance: {ok}"),
        elapsed,
    );
}

// ---------------------------------------------------------------------------
// 4. Dataset build at desk scale
// ---------------------------------------------------------------------------

fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_path_buf();
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn build_in_pool(threads: usize, opts: &BuildOptions, dir: &Path) -> Manifest {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap();
    pool.install(|| dataset::build_dataset(opts, dir).unwrap())
}

fn criterion_4(gate: &mut Gate, corpus: &Path) -> Manifest {
    let t = Instant::now();
    let opts = BuildOptions::default();
    let manifest = build_in_pool(4, &opts, corpus);
    let build_time = t.elapsed();

    // Re-run with a different worker count into a second directory.
    let again = tempfile::tempdir().unwrap();
    let _ = build_in_pool(2, &opts, again.path());
    let ours = files_under(corpus);
    let theirs = files_under(again.path());
    let identical = ours == theirs;

    let consistent = dataset::validate(&manifest).is_ok();
    let records = manifest.records.len();

    let elapsed = t.elapsed();
    let pass =
        build_time < Duration::from_secs(1800) && identical && consistent && records == 16 * 200;
    gate.report(
        4,
        "dataset build at desk scale",
        pass,
        &format!(
            "16x200 build in {:.0}s (<1800s) on 4 workers, rerun on 2 workers byte-identical: \
             {identical}, manifest consistent: {consistent}, {records} records",
            build_time.as_secs_f64()
        ),
        elapsed,
    );
    manifest
}

// ---------------------------------------------------------------------------
// 5. Learner correctness
// ---------------------------------------------------------------------------

fn criterion_5(gate: &mut Gate, corpus: &Path, manifest: &Manifest) {
    let t = Instant::now();

    // Finite differences on every parameter group of the reduced model.
    let plan = ModelPlan {
        input: 8,
        channels: [2, 3, 4],
    };
    let model = Model::new(plan, 11, 1.0);
    let inputs: Vec<Vec<f64>> = (0..4)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(500 + i);
            (0..64).map(|_| rng.gen_range(0.0..1.0)).collect()
        })
        .collect();
    let batch: Vec<(&[f64], usize)> = inputs
        .iter()
        .enumerate()
        .map(|(i, input)| (input.as_slice(), i % 2))
        .collect();
    let weights = [1.0, 1.0];
    let (grads, _) = gradients(&model, &batch, &weights).unwrap();
    let loss_of = |m: &Model| gradients(m, &batch, &weights).unwrap().1;
    let h = 1e-3;
    let mut worst_group = 0.0f64;
    let mut checked = 0usize;
    for (slot_idx, (_, slot)) in model.slots().iter().enumerate() {
        let mut group_worst = 0.0f64;
        for i in 0..slot.len() {
            let mut plus = model.clone();
            plus.slots_mut()[slot_idx][i] += h;
            let mut minus = model.clone();
            minus.slots_mut()[slot_idx][i] -= h;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let an = grads.buffers[slot_idx][i];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
            group_worst = group_worst.max(rel);
            checked += 1;
        }
        worst_group = worst_group.max(group_worst);
    }
    let fd_ok = worst_group < 1e-3 && checked == plan.param_count();

    // CAM spatial mean equals logit minus bias, for both classes.
    let full = Model::new(ModelPlan::default(), 9, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(90);
    let input: Vec<f64> = (0..64 * 64).map(|_| rng.gen_range(0..2) as f64).collect();
    let mut cam_err = 0.0f64;
    for class in [CLASS_UNSTABLE, CLASS_STABLE] {
        let map = cam(&full, &input, class).unwrap();
        let mean = map.grid.iter().sum::<f64>() / map.grid.len() as f64;
        cam_err = cam_err.max((mean - (map.logit - map.bias)).abs());
    }
    let cam_ok = cam_err < 1e-6;

    // Capacity sanity: overfit 20 scenes.
    let mut tiny =
        learning::dataset_view(corpus, manifest, &[group("4B-2D-Uni")], Split::Train).unwrap();
    tiny.samples.truncate(20);
    let overfit_cfg = TrainConfig {
        steps: 800,
        learning_rate: 0.1,
        ..TrainConfig::default()
    };
    let (_, summary) = learning::train(&tiny, &overfit_cfg).unwrap();
    let overfit_acc = summary.final_train_accuracy_pct;
    let overfit_ok = overfit_acc >= 95.0;

    // No-leakage control: shuffled labels over the whole (balanced) corpus.
    let all: Vec<GroupSpec> = manifest
        .header
        .groups
        .iter()
        .map(|g| g.parse().unwrap())
        .collect();
    let perm =
        learning::permutation_control(corpus, manifest, &all, &TrainConfig::default()).unwrap();
    let perm_ok = (43.0..=57.0).contains(&perm);

    let elapsed = t.elapsed();
    let pass = fd_ok && cam_ok && overfit_ok && perm_ok && elapsed < Duration::from_secs(300);
    gate.report(
        5,
        "learner correctness",
        pass,
        &format!(
            "fd worst rel {worst_group:.2e} over {checked} params (<1e-3), cam identity err \
             {cam_err:.2e} (<1e-6), overfit {overfit_acc}% (>=95%), permutation control {perm}% \
             (50+-7)"
        ),
        elapsed,
    );
}

// ---------------------------------------------------------------------------
// 6. Intra-group trend
// ---------------------------------------------------------------------------

fn intra_accuracy(corpus: &Path, manifest: &Manifest, name: &str) -> f64 {
    let g = group(name);
    let train_view = learning::dataset_view(corpus, manifest, &[g], Split::Train).unwrap();
    let test_view = learning::dataset_view(corpus, manifest, &[g], Split::Test).unwrap();
    let (model, _) = learning::train(&train_view, &TrainConfig::default()).unwrap();
    learning::evaluate(&model, &test_view)
        .unwrap()
        .overall
        .accuracy_pct
}

fn criterion_6(gate: &mut Gate, corpus: &Path, manifest: &Manifest) {
    let t = Instant::now();
    let acc4 = intra_accuracy(corpus, manifest, "4B-2D-Uni");
    let acc14 = intra_accuracy(corpus, manifest, "14B-2D-Uni");
    let elapsed = t.elapsed();
    let pass = acc4 >= 75.0 && acc4 - acc14 >= 5.0 && elapsed < Duration::from_secs(1800);
    gate.report(
        6,
        "intra-group trend",
        pass,
        &format!(
            "4B-2D-Uni {acc4}% (>=75%), 14B-2D-Uni {acc14}%, difficulty gap {:.1} (>=5)",
            acc4 - acc14
        ),
        elapsed,
    );
}

// ---------------------------------------------------------------------------
// 7. Cross-group direction
// ---------------------------------------------------------------------------

fn criterion_7(gate: &mut Gate, corpus: &Path, manifest: &Manifest) {
    let t = Instant::now();
    let cfg = TrainConfig {
        steps: CROSS_STEPS,
        ..TrainConfig::default()
    };
    let outcome = learning::run_experiment(corpus, manifest, Design::Cross, &cfg).unwrap();
    let acc_of = |label: &str| -> f64 {
        outcome
            .reports
            .iter()
            .find(|(l, _)| l == label)
            .map(|(_, r)| r.overall.accuracy_pct)
            .unwrap()
    };
    let s2c = acc_of("simple_to_complex");
    let c2s = acc_of("complex_to_simple");
    let elapsed = t.elapsed();
    let pass = c2s >= s2c && s2c > 55.0 && c2s > 55.0;
    gate.report(
        7,
        "cross-group direction",
        pass,
        &format!("complex->simple {c2s}% >= simple->complex {s2c}%, both >55%"),
        elapsed,
    );
}

// ---------------------------------------------------------------------------
// 8. Generalization structure
// ---------------------------------------------------------------------------

fn criterion_8(gate: &mut Gate, corpus: &Path, manifest: &Manifest) {
    let t = Instant::now();
    let outcome = learning::run_experiment(
        corpus,
        manifest,
        Design::Generalization,
        &TrainConfig::default(),
    )
    .unwrap();
    let report = &outcome.reports[0].1;
    let entries = report.entries.len();
    let mean = |prefix: &str| -> f64 {
        let accs: Vec<f64> = report
            .entries
            .iter()
            .filter(|e| e.group.starts_with(prefix))
            .map(|e| e.accuracy_pct)
            .collect();
        accs.iter().sum::<f64>() / accs.len() as f64
    };
    let mean4 = mean("4B-");
    let mean14 = mean("14B-");
    let elapsed = t.elapsed();
    let pass = entries == 16 && mean4 > mean14;
    gate.report(
        8,
        "generalization structure",
        pass,
        &format!("{entries} per-group entries (=16), mean over 4B groups {mean4:.1}% > mean over 14B groups {mean14:.1}%"),
        elapsed,
    );
}

// ---------------------------------------------------------------------------
// 9. Planner pipeline
// ---------------------------------------------------------------------------

fn outcome(
    orientation: Orientation,
    predicted: bool,
    ground_truth: bool,
    executed: bool,
    success: bool,
    attempts_used: u32,
) -> CandidateOutcome {
    CandidateOutcome {
        orientation,
        slot_index: 0,
        predicted,
        ground_truth,
        executed,
        success,
        attempts_used,
    }
}

fn criterion_9(gate: &mut Gate) {
    let t = Instant::now();

    // Exactly 84 candidates over the six scripted scenes.
    let scenes = planning::scripted_scenes();
    let sets: Vec<_> = scenes
        .iter()
        .map(|s| planning::generate_candidates(s).unwrap())
        .collect();
    let total: usize = sets.iter().map(|s| s.candidates.len()).sum();
    let count_ok = scenes.len() == 6 && total == 84;

    // Metric identities: 4 successes over 5 ground-truth-stable candidates
    // must report exactly 80.0%, and 13/14 agreements exactly 92.9%.
    let mut outcomes = Vec::new();
    for i in 0..5 {
        // five gt-stable candidates, four executed successfully
        outcomes.push(outcome(
            Orientation::Horizontal,
            true,
            true,
            true,
            i != 0,
            1,
        ));
    }
    for _ in 0..8 {
        outcomes.push(outcome(
            Orientation::Vertical,
            false,
            false,
            false,
            false,
            0,
        ));
    }
    // one prediction error so agreement is 13/14
    outcomes.push(outcome(
        Orientation::Horizontal,
        true,
        false,
        true,
        false,
        3,
    ));
    let report = PlacementReport::from_outcomes(outcomes);
    let identity_ok = report.success_rate_pct == 80.0 && report.prediction_accuracy_pct == 92.9;

    // An all-rejecting model never attempts a placement (scene-6 behavior).
    let mut rejector = Model::new(ModelPlan::default(), 2, 1.0);
    rejector.fc.w.iter_mut().for_each(|w| *w = 0.0);
    rejector.fc.b = vec![5.0, -5.0]; // always "unstable"
    let plank = &scenes[5];
    let set = &sets[5];
    let predicted = planning::predict_candidates(&rejector, set).unwrap();
    let none_predicted = predicted.iter().all(|&p| !p);
    let sim = SimConfig::default();
    let truth = planning::ground_truth_candidates(plank, &set.candidates, &sim);
    let executor = Executor::new(99);
    let zero_report = planning::manipulation_report(plank, set, &predicted, &truth, &executor);
    let zero_attempts = zero_report
        .outcomes
        .iter()
        .all(|o| !o.executed && o.attempts_used == 0);
    let reject_ok = none_predicted && zero_attempts && zero_report.all_rejected;

    let elapsed = t.elapsed();
    let pass = count_ok && identity_ok && reject_ok && elapsed < Duration::from_secs(300);
    gate.report(
        9,
        "planner pipeline",
        pass,
        &format!(
            "{total} candidates over {} scenes (=84), 4/5 -> {:?}%, 13/14 -> {}%, \
             all-rejecting model: zero attempts {zero_attempts}, flagged {}",
            scenes.len(),
            report.success_rate_pct,
            report.prediction_accuracy_pct,
            zero_report.all_rejected
        ),
        elapsed,
    );
}

// ---------------------------------------------------------------------------

#[test]
fn acceptance() {
    let mut gate = Gate::default();

    criterion_1(&mut gate);
    criterion_2(&mut gate);
    criterion_3(&mut gate);

    let corpus_dir = tempfile::tempdir().unwrap();
    let manifest = criterion_4(&mut gate, corpus_dir.path());

    criterion_5(&mut gate, corpus_dir.path(), &manifest);
    criterion_6(&mut gate, corpus_dir.path(), &manifest);
    criterion_7(&mut gate, corpus_dir.path(), &manifest);
    criterion_8(&mut gate, corpus_dir.path(), &manifest);
    criterion_9(&mut gate);

    assert!(
        gate.failures.is_empty(),
        "acceptance failures:\n{}",
        gate.failures.join("\n")
    );
}
