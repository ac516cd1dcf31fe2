//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! The process exits 0 after reporting, whatever the outcome, so that the
//! workspace test run stays usable; set `RLAB_ACCEPTANCE_STRICT=1` to turn any
//! FAIL into a nonzero exit.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;

use rlab_cli::commands::{cmd_attack, NamedInput};
use rlab_cli::config::{RunConfig, TargetConfig};
use rlab_core::agent::{dueling_combine, ActionCodec, Agent, AgentConfig, DuelingQNet};
use rlab_core::engine::{
    pd_untargeted, run_episode, split_dataset, train_agent, ActionPolicy, AttackContext,
    AttackResult, EngineConfig, EpisodeStatus, GreedyPolicy, PdParams, RandomPolicy, TrainOptions,
};
use rlab_core::filters::{DistortionLedger, FilterBank, FilterSpec, MaskCache};
use rlab_core::fixture::desk_fixture;
use rlab_core::image::{ImageTensor, PatchGrid};
use rlab_core::metrics::{mce_and_degradation, uce, CorruptionErrorMatrix, CorruptionRow, MceMode};
use rlab_core::seed;
use rlab_core::sensitivity::{add_ranking, probe_add_sensitivity, AttackGoal};
use rlab_core::target::{top_label, Architecture, ClassifierHandle, LabeledImage, ReferenceModel};

type Verdict = Result<String, String>;

fn all_filters() -> Vec<FilterSpec> {
    vec![
        FilterSpec::gaussian_noise(),
        FilterSpec::gaussian_blur(),
        FilterSpec::brightness(),
        FilterSpec::dead_pixel(),
    ]
}

fn random_image(rng: &mut impl Rng, c: usize, h: usize, w: usize) -> ImageTensor {
    let v = (0..c * h * w)
        .map(|_| rng.gen_range(0.0f32..=1.0))
        .collect();
    ImageTensor::new(c, h, w, v).unwrap()
}

fn bits(img: &ImageTensor) -> Vec<u32> {
    img.values().iter().map(|v| v.to_bits()).collect()
}

fn exact_reversion() -> Verdict {
    let start = Instant::now();
    let bank = FilterBank::from_builtin(all_filters()).unwrap();
    let mut rng = seed::rng(1001);
    let (mut single_bad, mut multi_bad) = (0, 0);
    for case in 0..1000 {
        let c = if rng.gen_bool(0.5) { 1 } else { 3 };
        let p = [1, 2, 4][rng.gen_range(0..3)];
        let (h, w) = (p * rng.gen_range(2..8), p * rng.gen_range(2..8));
        let original = random_image(&mut rng, c, h, w);
        let grid = PatchGrid::for_image(&original, p).unwrap();
        let filter = case % 4;

        let mut img = original.clone();
        let mut ledger = DistortionLedger::new(&grid);
        let patch = rng.gen_range(0..grid.patch_count());
        ledger
            .apply(&mut img, &grid, patch, &bank, filter, rng.gen(), None)
            .unwrap();
        ledger.revert(&mut img, &grid, patch).unwrap();
        if bits(&img) != bits(&original) {
            single_bad += 1;
        }

        // stacked distortions on possibly repeated patches, undone in a
        // random cross-patch order
        let mut applied = Vec::new();
        for _ in 0..rng.gen_range(2..12) {
            let patch = rng.gen_range(0..grid.patch_count());
            let f = rng.gen_range(0..4);
            ledger
                .apply(&mut img, &grid, patch, &bank, f, rng.gen(), None)
                .unwrap();
            applied.push(patch);
        }
        applied.shuffle(&mut rng);
        for patch in applied {
            ledger.revert(&mut img, &grid, patch).unwrap();
        }
        if !ledger.is_empty() || bits(&img) != bits(&original) {
            multi_bad += 1;
        }
    }
    let elapsed = start.elapsed();
    let detail = format!(
        "1000 cases, {single_bad} single and {multi_bad} multi-patch mismatches, {:.2}s",
        elapsed.as_secs_f64()
    );
    if single_bad == 0 && multi_bad == 0 && elapsed < Duration::from_secs(30) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn pd_correctness() -> Verdict {
    let one = PdParams {
        top_n: 1,
        ..PdParams::default()
    };
    let e_inv = (-1.0f64).exp();
    let zero = pd_untargeted(&[e_inv, e_inv, 1.0 - 2.0 * e_inv], 0, &one).unwrap();
    let half = pd_untargeted(&[0.5, 0.25, 0.25], 0, &one).unwrap();
    // scalar oracle: -1/ln(1/0.5) + 1/ln(1/0.25)
    let oracle = -1.0 / std::f64::consts::LN_2 + 1.0 / (2.0 * std::f64::consts::LN_2);
    let mut rng = seed::rng(2002);
    let params = PdParams::default();
    let mut violations = 0;
    for _ in 0..10_000 {
        let k = rng.gen_range(2..12);
        let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..1.0)).collect();
        let sum: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|v| v / sum).collect();
        let g = rng.gen_range(0..k);
        let mut q = p.clone();
        q[g] *= rng.gen_range(0.1..0.99);
        if pd_untargeted(&q, g, &params).unwrap() <= pd_untargeted(&p, g, &params).unwrap() {
            violations += 1;
        }
    }
    let detail = format!(
        "pd(e^-1,e^-1)={zero:.3e}, pd(0.5,0.25)={half:.6} (oracle {oracle:.6}), {violations}/10000 monotonicity violations"
    );
    if zero.abs() < 1e-12
        && (half + 0.72135).abs() < 1e-4
        && (half - oracle).abs() < 1e-12
        && violations == 0
    {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn dueling_and_backprop() -> Verdict {
    let mut rng = seed::rng(3003);
    let (mut identity_bad, mut shift_bad, mut constant_bad, mut grad_bad) = (0, 0, 0, 0);
    let mut worst_rel: f64 = 0.0;
    let mut worst_shift: f64 = 0.0;
    for n in 0..50 {
        let inputs = rng.gen_range(2..8);
        let hidden: Vec<usize> = (0..rng.gen_range(1..3))
            .map(|_| rng.gen_range(2..8))
            .collect();
        let actions = rng.gen_range(2..7);
        // every parameter random, biases included, so no ReLU sits exactly
        // on its kink
        let mut net = DuelingQNet::new(inputs, &hidden, actions, 100 + n);
        for p in net.params_mut() {
            *p = rng.gen_range(-1.0..1.0);
        }
        let x: Vec<f64> = (0..inputs).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let cache = net.forward(&x).unwrap();
        let q = net.q_values(&x).unwrap();
        if q != dueling_combine(cache.value(), cache.advantage()) {
            identity_bad += 1;
        }

        // shifting every advantage bias by the same amount leaves Q alone
        let shift = rng.gen_range(-10.0..10.0);
        let mut shifted = net.clone();
        for p in &mut shifted.params_mut()[net.advantage_bias_range()] {
            *p += shift;
        }
        let q2 = shifted.q_values(&x).unwrap();
        let d = q
            .iter()
            .zip(&q2)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst_shift = worst_shift.max(d);
        if d > 1e-9 {
            shift_bad += 1;
        }

        // zero advantage weights and a dyadic constant bias: Q = V exactly
        let mut flat = DuelingQNet::zeros(inputs, &hidden, actions);
        flat.params_mut().copy_from_slice(net.params());
        let r = flat.advantage_bias_range();
        let w_end = r.start;
        let w_start = w_end - actions * hidden[hidden.len() - 1];
        for p in &mut flat.params_mut()[w_start..w_end] {
            *p = 0.0;
        }
        for p in &mut flat.params_mut()[r] {
            *p = 0.75;
        }
        let fc = flat.forward(&x).unwrap();
        if fc.q_values().iter().any(|&v| v != fc.value()) {
            constant_bad += 1;
        }

        let wts: Vec<f64> = (0..actions).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |m: &DuelingQNet| -> f64 {
            m.q_values(&x)
                .unwrap()
                .iter()
                .zip(&wts)
                .map(|(q, w)| q * w)
                .sum()
        };
        let mut grad = vec![0.0; net.params().len()];
        net.backward(&cache, &wts, &mut grad);
        let h = 1e-5;
        for i in 0..grad.len() {
            let mut plus = net.clone();
            plus.params_mut()[i] += h;
            let mut minus = net.clone();
            minus.params_mut()[i] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let scale = fd.abs().max(grad[i].abs());
            let err = (fd - grad[i]).abs();
            if scale > 1e-8 {
                worst_rel = worst_rel.max(err / scale);
            }
            if err > 1e-4 * scale + 1e-8 {
                grad_bad += 1;
            }
        }
    }
    let detail = format!(
        "50 nets: identity {identity_bad} bad, constant-advantage {constant_bad} bad, bias shift {shift_bad} bad (max |dQ| {worst_shift:.1e}), gradient {grad_bad} bad (max rel err {worst_rel:.1e})"
    );
    if identity_bad + shift_bad + constant_bad + grad_bad == 0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn sensitivity_oracle() -> Verdict {
    let mut rng = seed::rng(4004);
    let bank = FilterBank::from_builtin(vec![FilterSpec::gaussian_noise()]).unwrap();
    let mut agree = 0;
    for case in 0..100u64 {
        let model = ReferenceModel::new(Architecture::Linear, (1, 8, 8), 3, 500 + case);
        let clf = ClassifierHandle::in_process(model);
        let image = random_image(&mut rng, 1, 8, 8);
        let grid = PatchGrid::for_image(&image, 2).unwrap();
        let base = clf.classify(&image).unwrap();
        let gt = top_label(&base).unwrap();
        let goal = AttackGoal::Untargeted { true_class: gt };
        let step_seed: u64 = rng.gen();
        let probe =
            probe_add_sensitivity(&image, &grid, &bank, 0, &clf, &goal, &base, step_seed, None)
                .unwrap();
        let probe_top = add_ranking(&probe.deltas)[0];

        // oracle: distort each patch on its own copy, query it alone
        let mut best = (0, f64::NEG_INFINITY);
        for patch in 0..grid.patch_count() {
            let mut img = image.clone();
            let mut ledger = DistortionLedger::new(&grid);
            let mask = seed::mask_seed(step_seed, 0, patch);
            ledger
                .apply(&mut img, &grid, patch, &bank, 0, mask, None)
                .unwrap();
            let drop = base[gt] - clf.classify(&img).unwrap()[gt];
            if drop > best.1 {
                best = (patch, drop);
            }
        }
        if best.0 == probe_top {
            agree += 1;
        }
    }
    let detail = format!("{agree}/100 top-1 agreements");
    if agree == 100 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Outcome of attacking the held-out desk images with one policy.
struct Eval {
    results: Vec<AttackResult>,
}

impl Eval {
    fn asr(&self) -> f64 {
        self.results.iter().filter(|r| r.success).count() as f64 / self.results.len() as f64
    }

    fn mean_steps(&self) -> f64 {
        self.results.iter().map(|r| r.steps as f64).sum::<f64>() / self.results.len() as f64
    }

    fn mean_l2(&self) -> f64 {
        let ok: Vec<f64> = self
            .results
            .iter()
            .filter(|r| r.success)
            .map(|r| r.final_l2)
            .collect();
        if ok.is_empty() {
            f64::NAN
        } else {
            ok.iter().sum::<f64>() / ok.len() as f64
        }
    }
}

struct DeskRun {
    label: &'static str,
    clean_accuracy: f64,
    heldout: usize,
    baseline: Eval,
    agent: Eval,
    elapsed: Duration,
}

const DESK_SEED: u64 = 0;
const DESK_BUDGET: usize = 500;

fn desk_run(label: &'static str, filters: Vec<FilterSpec>) -> DeskRun {
    let start = Instant::now();
    let fx = desk_fixture(DESK_SEED).unwrap();
    let clean_accuracy = fx.model.accuracy(&fx.images);
    let clf = ClassifierHandle::in_process(fx.model.clone());
    let bank = FilterBank::from_builtin(filters).unwrap();
    let config = EngineConfig {
        budget: DESK_BUDGET,
        ..EngineConfig::default()
    };
    let cache = MaskCache::default();
    let ctx = AttackContext {
        classifier: &clf,
        bank: &bank,
        config: &config,
        cache: Some(&cache),
    };
    let (train, test) = split_dataset(&fx.images, 0.8, DESK_SEED);
    let heldout: Vec<LabeledImage> = test
        .into_iter()
        .filter(|i| top_label(&fx.model.probabilities(&i.image)).unwrap() == i.label)
        .take(20)
        .collect();

    let agent_config = AgentConfig {
        epsilon_decay_steps: 4000,
        seed: seed::named(DESK_SEED, "agent"),
        ..AgentConfig::default()
    };
    let mut agent = Agent::new(agent_config, ctx.state_len(), bank.len()).unwrap();
    let options = TrainOptions {
        passes: 10,
        seed: seed::named(DESK_SEED, "train"),
    };
    train_agent(&ctx, &train, &mut agent, &options).unwrap();

    let codec = ctx.codec(agent.config().n_max).unwrap();
    let mut random_policy = |s| -> Box<dyn ActionPolicy> { Box::new(RandomPolicy::new(s)) };
    let baseline = evaluate(&ctx, &heldout, &codec, &mut random_policy);
    let mut greedy = |_| -> Box<dyn ActionPolicy + '_> { Box::new(GreedyPolicy { agent: &agent }) };
    let agent_eval = evaluate(&ctx, &heldout, &codec, &mut greedy);
    DeskRun {
        label,
        clean_accuracy,
        heldout: heldout.len(),
        baseline,
        agent: agent_eval,
        elapsed: start.elapsed(),
    }
}

/// Attacks every held-out image; episode seeds depend only on the index so
/// both policies see the same masks.
fn evaluate<'a>(
    ctx: &AttackContext,
    heldout: &[LabeledImage],
    codec: &ActionCodec,
    make: &mut dyn FnMut(u64) -> Box<dyn ActionPolicy + 'a>,
) -> Eval {
    let root = seed::named(DESK_SEED, "eval");
    let results = heldout
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let s = seed::derive(root, &[i as u64]);
            let goal = AttackGoal::Untargeted {
                true_class: item.label,
            };
            run_episode(ctx, &item.image, goal, make(s).as_mut(), codec, s).unwrap()
        })
        .collect();
    Eval { results }
}

fn describe(run: &DeskRun) -> String {
    format!(
        "[{}] clean acc {:.2}, {} held out; agent asr {:.2} steps {:.2} L2 {:.4}; random asr {:.2} steps {:.2} L2 {:.4}; {:.1}s",
        run.label,
        run.clean_accuracy,
        run.heldout,
        run.agent.asr(),
        run.agent.mean_steps(),
        run.agent.mean_l2(),
        run.baseline.asr(),
        run.baseline.mean_steps(),
        run.baseline.mean_l2(),
        run.elapsed.as_secs_f64()
    )
}

fn desk_efficacy(run: &DeskRun) -> Verdict {
    let mut failed = Vec::new();
    if run.clean_accuracy < 0.95 {
        failed.push("clean accuracy below 0.95");
    }
    if run.heldout != 20 {
        failed.push("fewer than 20 correctly classified held-out images");
    }
    if run.agent.asr() < 1.0 {
        failed.push("agent asr below 1.0");
    }
    if run.agent.mean_steps() >= run.baseline.mean_steps() {
        failed.push("agent mean steps not below random baseline");
    }
    if !(run.agent.mean_l2() <= run.baseline.mean_l2()) {
        failed.push("agent mean L2 above random baseline");
    }
    if run.elapsed >= Duration::from_secs(600) {
        failed.push("runtime over 10 minutes");
    }
    if failed.is_empty() {
        Ok(describe(run))
    } else {
        Err(format!("{}; {}", describe(run), failed.join(", ")))
    }
}

fn cleanup_properties(runs: &[&DeskRun]) -> Verdict {
    let model = desk_fixture(DESK_SEED).unwrap().model;
    let (mut checked, mut grew, mut flipped) = (0, 0, 0);
    for run in runs {
        for r in run.baseline.results.iter().chain(&run.agent.results) {
            if r.status != EpisodeStatus::Success {
                continue;
            }
            checked += 1;
            if r.final_l2 > r.pre_cleanup_l2 {
                grew += 1;
            }
            let adv = r
                .adversarial
                .as_ref()
                .expect("successful episodes keep their image");
            if top_label(&model.probabilities(adv)).unwrap() == r.true_class {
                flipped += 1;
            }
        }
    }
    let detail = format!(
        "{checked} successful episodes: {grew} with L2 growth, {flipped} no longer misclassified"
    );
    if checked > 0 && grew == 0 && flipped == 0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn metrics_arithmetic() -> Verdict {
    let u = uce(&[0.0, 0.1, 0.2, 0.3, 0.4]).unwrap();
    let rows = |e: &dyn Fn(usize, usize) -> f64| -> Vec<CorruptionRow> {
        (0..15)
            .map(|c| CorruptionRow {
                corruption: format!("c{c}"),
                errors: std::array::from_fn(|s| e(c, s)),
            })
            .collect()
    };
    let uniform = CorruptionErrorMatrix::new(rows(&|_, _| 0.2), 0.1).unwrap();
    let degradation = mce_and_degradation(&uniform, MceMode::Mean)
        .unwrap()
        .degradation;

    let mut rng = seed::rng(7007);
    let table: Vec<[f64; 5]> = (0..15)
        .map(|_| std::array::from_fn(|_| rng.gen_range(0.0..1.0)))
        .collect();
    let clean = 0.0625;
    let random = CorruptionErrorMatrix::new(rows(&|c, s| table[c][s]), clean).unwrap();
    let report = mce_and_degradation(&random, MceMode::Mean).unwrap();
    // spreadsheet-style: AVERAGE per row, AVERAGE of those, minus clean
    let row_means: Vec<f64> = table.iter().map(|r| r.iter().sum::<f64>() / 5.0).collect();
    let mce = row_means.iter().sum::<f64>() / 15.0;
    let worst = row_means
        .iter()
        .zip(&report.uce)
        .map(|(a, (_, b))| (a - b).abs())
        .fold((mce - report.mce).abs(), f64::max)
        .max((mce - clean - report.degradation).abs());
    let detail =
        format!("uce={u}, uniform degradation={degradation}, 15x5 max deviation {worst:.1e}");
    if u == 0.2 && degradation == 0.1 && worst <= 1e-12 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn attack_determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let fx = desk_fixture(DESK_SEED).unwrap();
    let weights = dir.path().join("victim.bin");
    fx.model.save(&weights).unwrap();
    let clf = ClassifierHandle::in_process(fx.model);
    let inputs: Vec<NamedInput> = fx
        .images
        .into_iter()
        .take(20)
        .enumerate()
        .map(|(i, item)| NamedInput {
            name: format!("img_{i:05}"),
            item,
        })
        .collect();
    let run = |name: &str, workers: usize| {
        let config = RunConfig {
            target: Some(TargetConfig::Weights(weights.clone())),
            budget: DESK_BUDGET,
            seed: 7,
            workers,
            output: dir.path().join(name),
            ..RunConfig::default()
        };
        cmd_attack(&config, &inputs, &clf).unwrap();
        std::fs::read(config.output.join("summary.json")).unwrap()
    };
    let a = run("first", 1);
    let b = run("second", 1);
    let c = run("parallel", 4);
    let detail = format!(
        "summary.json {} bytes; repeat identical: {}, 4 workers identical: {}",
        a.len(),
        a == b,
        a == c
    );
    if a == b && a == c {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn guarded(f: impl FnOnce() -> Verdict) -> Verdict {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(v) => v,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        }
    }
}

fn main() {
    // libtest-style flags (e.g. --nocapture, --test-threads) are ignored
    let mut failures = 0;
    let mut report = |name: &str, v: Verdict| match v {
        Ok(d) => println!("PASS  {name}: {d}"),
        Err(d) => {
            failures += 1;
            println!("FAIL  {name}: {d}");
        }
    };
    report("exact-reversion", guarded(exact_reversion));
    report("pd-correctness", guarded(pd_correctness));
    report("dueling-backprop", guarded(dueling_and_backprop));
    report("sensitivity-oracle", guarded(sensitivity_oracle));

    let main_run = catch_unwind(|| desk_run("default filters", all_filters()));
    let noise_run = catch_unwind(|| desk_run("noise only", vec![FilterSpec::gaussian_noise()]));
    match &main_run {
        Ok(run) => report("desk-efficacy", desk_efficacy(run)),
        Err(_) => report("desk-efficacy", Err("desk run panicked".into())),
    }
    if let Ok(run) = &noise_run {
        println!("INFO  desk-efficacy {}", describe(run));
    }
    let runs: Vec<&DeskRun> = main_run.iter().chain(noise_run.iter()).collect();
    report("cleanup-properties", guarded(|| cleanup_properties(&runs)));
    report("metrics-arithmetic", guarded(metrics_arithmetic));
    report("attack-determinism", guarded(attack_determinism));

    println!("acceptance: {} of 8 criteria failed", failures);
    let strict = std::env::var("RLAB_ACCEPTANCE_STRICT").is_ok_and(|v| !v.is_empty() && v != "0");
    if strict && failures > 0 {
        std::process::exit(1);
    }
}
