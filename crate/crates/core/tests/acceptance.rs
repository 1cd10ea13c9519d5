//! Acceptance gate. Each test checks one criterion at its pinned tolerance and
//! writes a single `[PASS]`/`[FAIL]` line to stderr (uncaptured), then
//! asserts.
//!
//! Preset runs are shared between tests through one process-wide model
//! cache; the determinism check retrains from scratch.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dt_core::autograd::{Activation, Tape};
use dt_core::data::{filter_top_percentile, Manifest, Trajectory, TrajectoryDataset};
use dt_core::envs::{EnvConfig, GraphConfig};
use dt_core::experiment::{load_config, run_experiment, ModelCache, RunReport};
use dt_core::gpt::{ForwardOptions, Gpt, GptConfig};
use dt_core::gradcheck::finite_diff_check;
use dt_core::model::{
    dt_action_loss, dt_return_loss, ActionSpace, Conditioning, DecisionTransformer, DtConfig,
    EmbedNorm, ReturnBins, ReturnInputs, TrajectoryWindow, WindowActions,
};
use dt_core::params::ParamStore;
use dt_core::tensor::Tensor;

fn verdict(id: &str, ok: bool, detail: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(
        err,
        "[{}] criterion {id}: {detail}",
        if ok { "PASS" } else { "FAIL" }
    );
}

fn presets_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets")
}

fn scratch_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir()
        .join(format!("dt-acceptance-{}", std::process::id()))
        .join(name);
    fs::create_dir_all(&dir).unwrap();
    dir
}

struct PresetRun {
    dir: PathBuf,
    report: RunReport,
}

type Runs = (ModelCache, HashMap<String, Arc<PresetRun>>);

/// Runs each preset at most once per process; models are shared between
/// presets whose arms train identically.
fn preset(name: &str) -> Arc<PresetRun> {
    static CACHE: OnceLock<Mutex<Runs>> = OnceLock::new();
    let lock = CACHE.get_or_init(|| Mutex::new((ModelCache::new(), HashMap::new())));
    let mut guard = lock.lock().unwrap_or_else(|e| e.into_inner());
    let (cache, runs) = &mut *guard;
    if let Some(run) = runs.get(name) {
        return Arc::clone(run);
    }
    let cfg = load_config(&presets_dir().join(format!("{name}.json"))).unwrap();
    let dir = scratch_dir(name);
    let report = run_experiment(&cfg, &dir, Some(cache)).unwrap();
    let run = Arc::new(PresetRun { dir, report });
    runs.insert(name.to_string(), Arc::clone(&run));
    run
}

fn metric(run: &PresetRun, arm: &str, name: &str) -> f64 {
    run.report
        .metric(arm, name)
        .unwrap_or_else(|| panic!("{} has no metric {arm}.{name}", run.report.name))
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn toy_config(k: usize) -> DtConfig {
    DtConfig {
        context_k: k,
        max_episode_len: 8,
        state_dim: 3,
        action_space: ActionSpace::Discrete { n: 4 },
        gpt: GptConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            max_tokens: 3 * k + 1,
            dropout: 0.0,
            activation: Activation::Gelu,
        },
        embed_norm: EmbedNorm::LayerNorm,
        conditioning: Conditioning::ReturnToGo,
        predict_returns: Some(ReturnBins { min: -3, max: 1 }),
        return_scale: 1.0,
        return_inputs: ReturnInputs::Given,
    }
}

fn toy_window(k: usize, pad: usize, seed: u64) -> TrajectoryWindow {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TrajectoryWindow {
        returns_to_go: (0..k).map(|_| rng.gen_range(-3..=1) as f64).collect(),
        states: (0..k)
            .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect(),
        actions: WindowActions::Discrete((0..k).map(|_| rng.gen_range(0..4)).collect()),
        timesteps: (0..k).map(|i| i.saturating_sub(pad)).collect(),
        valid: (0..k).map(|i| i >= pad).collect(),
    }
}

type Check =
    Box<dyn Fn(&mut Tape, dt_core::autograd::Var) -> dt_core::Result<dt_core::autograd::Var>>;

/// Every differentiable tape op, each reduced to a scalar through a fixed
/// random weighting so no coordinate cancels by symmetry.
fn op_checks() -> Vec<(&'static str, Tensor, Check)> {
    let w = |shape: &[usize], seed| random_tensor(shape, seed);
    let weigh = |tape: &mut Tape, y, wt: &Tensor| {
        let c = tape.constant(wt.clone());
        let z = tape.mul(y, c)?;
        tape.sum(z)
    };
    let x46 = w(&[4, 6], 1);
    let mut v: Vec<(&'static str, Tensor, Check)> = Vec::new();
    {
        let (b, o) = (w(&[6, 3], 2), w(&[4, 3], 3));
        v.push((
            "matmul",
            x46.clone(),
            Box::new(move |t, x| {
                let b = t.constant(b.clone());
                let y = t.matmul(x, b)?;
                weigh(t, y, &o)
            }),
        ));
    }
    {
        let (b, o) = (w(&[5, 6], 4), w(&[4, 5], 5));
        v.push((
            "matmul_nt",
            x46.clone(),
            Box::new(move |t, x| {
                let b = t.constant(b.clone());
                let y = t.matmul_nt(x, b)?;
                weigh(t, y, &o)
            }),
        ));
    }
    {
        let (c, o) = (w(&[4, 6], 6), w(&[4, 6], 7));
        v.push((
            "add",
            x46.clone(),
            Box::new(move |t, x| {
                let c = t.constant(c.clone());
                let y = t.add(x, c)?;
                let y = t.mul(y, x)?;
                weigh(t, y, &o)
            }),
        ));
    }
    {
        let (c, o) = (w(&[4, 6], 8), w(&[4, 6], 9));
        v.push((
            "mul",
            x46.clone(),
            Box::new(move |t, x| {
                let c = t.constant(c.clone());
                let y = t.mul(x, c)?;
                weigh(t, y, &o)
            }),
        ));
    }
    {
        let (row, o) = (w(&[6], 10), w(&[4, 6], 11));
        v.push((
            "add_row (matrix)",
            x46.clone(),
            Box::new(move |t, x| {
                let r = t.constant(row.clone());
                let y = t.add_row(x, r)?;
                let y = t.tanh(y)?;
                weigh(t, y, &o)
            }),
        ));
    }
    {
        let (a, o) = (w(&[4, 6], 12), w(&[4, 6], 13));
        v.push((
            "add_row (row)",
            w(&[6], 14),
            Box::new(move |t, r| {
                let a = t.constant(a.clone());
                let y = t.add_row(a, r)?;
                let y = t.tanh(y)?;
                weigh(t, y, &o)
            }),
        ));
    }
    {
        let o = w(&[4, 6], 15);
        v.push((
            "scale",
            x46.clone(),
            Box::new(move |t, x| {
                let y = t.scale(x, -1.7)?;
                weigh(t, y, &o)
            }),
        ));
    }
    for (name, kind) in [("relu", 0), ("gelu", 1), ("tanh", 2)] {
        let o = w(&[4, 6], 16);
        v.push((
            name,
            x46.clone(),
            Box::new(move |t, x| {
                let y = match kind {
                    0 => t.relu(x)?,
                    1 => t.gelu(x)?,
                    _ => t.tanh(x)?,
                };
                weigh(t, y, &o)
            }),
        ));
    }
    {
        let (g, b, o) = (w(&[6], 17), w(&[6], 18), w(&[4, 6], 19));
        let (g2, b2, o2) = (g.clone(), b.clone(), o.clone());
        let (g3, b3, o3) = (g.clone(), b.clone(), o.clone());
        let x2 = x46.clone();
        let x3 = x46.clone();
        v.push((
            "layer_norm (x)",
            x46.clone(),
            Box::new(move |t, x| {
                let (g, b) = (t.constant(g.clone()), t.constant(b.clone()));
                let y = t.layer_norm(x, g, b)?;
                weigh(t, y, &o)
            }),
        ));
        v.push((
            "layer_norm (gain)",
            g2.clone(),
            Box::new(move |t, g| {
                let (x, b) = (t.constant(x2.clone()), t.constant(b2.clone()));
                let y = t.layer_norm(x, g, b)?;
                weigh(t, y, &o2)
            }),
        ));
        v.push((
            "layer_norm (bias)",
            b3.clone(),
            Box::new(move |t, b| {
                let (x, g) = (t.constant(x3.clone()), t.constant(g3.clone()));
                let y = t.layer_norm(x, g, b)?;
                weigh(t, y, &o3)
            }),
        ));
    }
    {
        let o = w(&[4, 6], 20);
        let mask: Arc<Vec<bool>> = Arc::new((0..24).map(|i| i % 6 <= i / 6 + 1).collect());
        v.push((
            "softmax_masked",
            x46.clone(),
            Box::new(move |t, x| {
                let y = t.softmax_masked(x, Arc::clone(&mask))?;
                weigh(t, y, &o)
            }),
        ));
    }
    {
        let o = w(&[7, 4], 21);
        v.push((
            "segment_attention",
            w(&[7, 12], 22),
            Box::new(move |t, x| {
                let q = t.slice_cols(x, 0, 4)?;
                let k = t.slice_cols(x, 4, 4)?;
                let vv = t.slice_cols(x, 8, 4)?;
                let y = t.segment_attention(q, k, vv, &[(0, 3), (3, 4)], 2, 0.7)?;
                weigh(t, y, &o)
            }),
        ));
    }
    {
        let o = w(&[4, 6], 23);
        v.push((
            "dropout",
            x46.clone(),
            Box::new(move |t, x| {
                let mut rng = ChaCha8Rng::seed_from_u64(24);
                let y = t.dropout(x, 0.3, &mut rng)?;
                weigh(t, y, &o)
            }),
        ));
    }
    {
        let o = w(&[4, 6], 25);
        v.push((
            "gather",
            w(&[5, 6], 26),
            Box::new(move |t, table| {
                let y = t.gather(table, &[4, 0, 4, 2])?;
                weigh(t, y, &o)
            }),
        ));
    }
    {
        let o = w(&[5, 6], 27);
        v.push((
            "select_rows",
            x46.clone(),
            Box::new(move |t, x| {
                let y = t.select_rows(x, &[3, 3, 0, 1, 2])?;
                weigh(t, y, &o)
            }),
        ));
    }
    {
        let (c, o) = (w(&[2, 6], 28), w(&[6, 6], 29));
        v.push((
            "concat_rows",
            x46.clone(),
            Box::new(move |t, x| {
                let c = t.constant(c.clone());
                let y = t.concat_rows(&[c, x])?;
                weigh(t, y, &o)
            }),
        ));
    }
    {
        let (c, o) = (w(&[4, 6], 30), w(&[8, 6], 31));
        v.push((
            "interleave_rows",
            x46.clone(),
            Box::new(move |t, x| {
                let c = t.constant(c.clone());
                let y = t.interleave_rows(&[x, c])?;
                weigh(t, y, &o)
            }),
        ));
    }
    {
        let o = w(&[4, 3], 32);
        v.push((
            "slice_cols",
            x46.clone(),
            Box::new(move |t, x| {
                let y = t.slice_cols(x, 2, 3)?;
                weigh(t, y, &o)
            }),
        ));
    }
    {
        let (c, o) = (w(&[4, 2], 33), w(&[4, 8], 34));
        v.push((
            "concat_cols",
            x46.clone(),
            Box::new(move |t, x| {
                let c = t.constant(c.clone());
                let y = t.concat_cols(&[x, c])?;
                weigh(t, y, &o)
            }),
        ));
    }
    v.push((
        "sum",
        x46.clone(),
        Box::new(|t, x| {
            let y = t.mul(x, x)?;
            t.sum(y)
        }),
    ));
    v.push((
        "cross_entropy",
        x46.clone(),
        Box::new(|t, x| t.cross_entropy(x, &[Some(2), None, Some(5), Some(0)])),
    ));
    {
        let target = w(&[4, 6], 35);
        let keep: Vec<bool> = (0..24).map(|i| i % 5 != 0).collect();
        v.push(("mse", x46, Box::new(move |t, x| t.mse(x, &target, &keep))));
    }
    v
}

#[test]
fn criterion_01_gradient_correctness() {
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    let mut worst_at = String::new();
    let mut record = |name: String, err: f64| {
        if err > worst {
            worst = err;
            worst_at = name;
        }
    };
    for (name, x, f) in op_checks() {
        let err = finite_diff_check(|t, v| f(t, v), &x, 1e-5).unwrap();
        record(name.to_string(), err);
    }

    // full model: every coordinate of every parameter of a K=3 toy, through
    // action and return losses, with one padded window in the batch
    let mut m = DecisionTransformer::new(toy_config(3), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let ids: Vec<_> = m.params.ids().collect();
    for &id in &ids {
        for x in m.params.get_mut(id).data_mut() {
            *x += rng.gen_range(-0.3..0.3);
        }
    }
    let ws = [toy_window(3, 0, 9), toy_window(3, 1, 10)];
    let refs: Vec<&TrajectoryWindow> = ws.iter().collect();
    for &id in &ids {
        let value = m.params.get(id).clone();
        let err = finite_diff_check(
            |tape, probe| {
                let mut p = m.params.bind(tape);
                p.replace(id, probe);
                let out = m.forward_batch(tape, &p, &refs, &mut ForwardOptions::eval())?;
                let la = dt_action_loss(tape, &out, &refs)?;
                let lr = dt_return_loss(tape, m.config.predict_returns.unwrap(), &out, &refs)?;
                tape.add(la, lr)
            },
            &value,
            1e-5,
        )
        .unwrap();
        record(format!("model.{}", m.params.name(id)), err);
    }
    let secs = started.elapsed().as_secs_f64();
    let ok = worst < 1e-4 && secs < 60.0;
    verdict(
        "1 (gradient correctness)",
        ok,
        &format!("max rel err {worst:.2e} at {worst_at} (< 1e-4), {secs:.1}s (< 60s)"),
    );
    assert!(ok);
}

#[test]
fn criterion_02_causality() {
    let started = Instant::now();
    let mut violations = Vec::new();

    // raw transformer: perturbing rows after p never touches outputs ≤ p
    let cfg = GptConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        max_tokens: 12,
        dropout: 0.1,
        activation: Activation::Gelu,
    };
    let mut store = ParamStore::new();
    let gpt = Gpt::new(cfg, &mut store, "gpt", &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let run = |x: &Tensor| {
        let mut tape = Tape::no_grad();
        let p = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let (h, _) = gpt
            .forward(&mut tape, &p, xv, &mut ForwardOptions::eval())
            .unwrap();
        tape.value(h).clone()
    };
    for trial in 0..5u64 {
        let x = random_tensor(&[12, 8], 100 + trial);
        let base = run(&x);
        for p in 0..12 {
            let mut y = x.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(200 + trial * 16 + p as u64);
            for v in &mut y.data_mut()[(p + 1) * 8..] {
                *v += rng.gen_range(-5.0..5.0);
            }
            let out = run(&y);
            if base.data()[..(p + 1) * 8] != out.data()[..(p + 1) * 8] {
                violations.push(format!("gpt trial {trial} prefix {p}"));
            }
        }
    }

    // trajectory model: step i sees neither a_i nor anything later
    let k = 6;
    let m = DecisionTransformer::new(toy_config(k), 3).unwrap();
    for trial in 0..5u64 {
        let w = toy_window(k, (trial % 3) as usize, 300 + trial);
        let base = m.predict(&w, false).unwrap();
        for i in w.first_valid()..k {
            let mut v = w.clone();
            let WindowActions::Discrete(a) = &mut v.actions else {
                unreachable!()
            };
            a[i] = (a[i] + 1) % 4;
            for j in i + 1..k {
                v.returns_to_go[j] += 1.0;
                v.states[j][0] += 3.0;
            }
            let out = m.predict(&v, false).unwrap();
            if base.actions.data()[..(i + 1) * 4] != out.actions.data()[..(i + 1) * 4] {
                violations.push(format!("actions trial {trial} step {i}"));
            }
            let (rb, ro) = (
                base.returns.as_ref().unwrap(),
                out.returns.as_ref().unwrap(),
            );
            let width = rb.shape()[1];
            if rb.data()[..(i + 1) * width] != ro.data()[..(i + 1) * width] {
                violations.push(format!("returns trial {trial} step {i}"));
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    let ok = violations.is_empty() && secs < 60.0;
    verdict(
        "2 (causality)",
        ok,
        &format!(
            "{} bitwise violations {:?}, {secs:.1}s (< 60s)",
            violations.len(),
            violations
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_03_graph_shortest_path() {
    let run = preset("graph-appendix");
    let reach = metric(&run, "dt", "goal_reach_rate");
    let model = metric(&run, "dt", "model_mean_steps");
    let oracle = metric(&run, "dt", "oracle_mean_steps");
    let stitched = metric(&run, "dt", "stitched_fraction");
    let secs = run.report.wall_clock_secs;
    let ok = reach >= 0.8
        && (model - oracle).abs() <= 1.0
        && (0.05..=0.30).contains(&stitched)
        && secs < 900.0;
    verdict(
        "3 (graph shortest path)",
        ok,
        &format!(
            "reach {:.1}% (≥ 80%), mean steps {model:.2} vs oracle {oracle:.2} (|Δ| ≤ 1), stitched {:.1}% (5..30%), {secs:.0}s (< 900s)",
            100.0 * reach,
            100.0 * stitched
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_04_key_to_door_success() {
    let big = preset("key-to-door-10k");
    let small = preset("key-to-door-1k");
    let dt10 = metric(&big, "dt", "success_rate");
    let pct = metric(&big, "pct_bc", "success_rate");
    let bc = metric(&big, "bc", "success_rate");
    let random = big.report.baselines["behavior_success_rate"];
    let dt1 = metric(&small, "dt", "success_rate");
    let secs = big.report.wall_clock_secs + small.report.wall_clock_secs;
    let ok = dt10 >= 0.85
        && dt1 >= 0.55
        && (pct - dt10).abs() <= 0.10
        && bc <= 0.10
        && (0.01..=0.08).contains(&random)
        && secs < 1800.0;
    verdict(
        "4 (key-to-door success)",
        ok,
        &format!(
            "DT 10K {:.1}% (≥ 85%), DT 1K {:.1}% (≥ 55%), %BC {:.1}% (within 10 of DT 10K), BC {:.1}% (≤ 10%), random {:.1}% (1..8%), {secs:.0}s (< 1800s)",
            100.0 * dt10,
            100.0 * dt1,
            100.0 * pct,
            100.0 * bc,
            100.0 * random
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_05_return_conditioning() {
    let run = preset("graph-appendix");
    let r = metric(&run, "dt", "sweep_pearson");
    let inv = metric(&run, "dt", "sweep_inversions");
    let ok = r >= 0.8 && inv <= 1.0;
    verdict(
        "5 (return conditioning)",
        ok,
        &format!("pearson {r:.3} (≥ 0.8), {inv} inversions (≤ 1)"),
    );
    assert!(ok);
}

#[test]
fn criterion_06_context_ablation() {
    let run = preset("k2d-context-ablation");
    let full = metric(&run, "dt_full", "success_rate");
    let k1 = metric(&run, "dt_k1", "success_rate");
    let ok = full - k1 >= 0.20;
    verdict(
        "6 (context ablation)",
        ok,
        &format!(
            "full context {:.1}% vs K=1 {:.1}%, gap {:.1} points (≥ 20)",
            100.0 * full,
            100.0 * k1,
            100.0 * (full - k1)
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_07_delayed_returns() {
    let run = preset("graph-delayed");
    let dense = metric(&run, "dt_dense", "goal_reach_rate");
    let delayed = metric(&run, "dt_delayed", "goal_reach_rate");
    let a = fs::read(run.dir.join("probe_bc_dense.csv")).unwrap();
    let b = fs::read(run.dir.join("probe_bc_delayed.csv")).unwrap();
    let identical = a == b;
    let ok = dense - delayed <= 0.10 && identical;
    verdict(
        "7 (delayed returns)",
        ok,
        &format!(
            "DT reach dense {:.1}% vs delayed {:.1}% (drop ≤ 10 points), BC outputs bit-identical: {identical}",
            100.0 * dense,
            100.0 * delayed
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_08_critic_mode() {
    let run = preset("k2d-critic");
    let success = metric(&run, "critic", "final_p_success");
    let no_key = metric(&run, "critic", "final_p_door_without_key");
    let attention = metric(&run, "critic", "attention_above_baseline_fraction");
    let ok = success > 0.8 && no_key < 0.2 && attention >= 0.7;
    verdict(
        "8 (critic mode)",
        ok,
        &format!(
            "final P(return=1): success {success:.3} (> 0.8), no key {no_key:.3} (< 0.2); pickup attention above 1/T on {:.1}% of successes (≥ 70%)",
            100.0 * attention
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_09_percentile_bc_mechanics() {
    let manifest = Manifest {
        format_version: 1,
        env: EnvConfig::Graph(GraphConfig::default()),
        n_trajectories: 0,
        total_timesteps: 0,
        generation_seed: 0,
        policy: "synthetic".into(),
        delayed_rewards: false,
    };
    // ten equal-length episodes with returns 1..10 in shuffled order
    let order = [4, 9, 1, 7, 10, 3, 6, 2, 8, 5];
    let trajs: Vec<Trajectory> = order
        .iter()
        .map(|&r| {
            let states = vec![vec![1.0, 0.0]; 4];
            Trajectory::new(
                states,
                vec![0, 1, 0, 1],
                vec![0.0, 0.0, 0.0, r as f64],
                r,
                "synthetic",
            )
            .unwrap()
        })
        .collect();
    let ds = TrajectoryDataset::new(manifest, trajs).unwrap();
    let all = filter_top_percentile(&ds, 100.0).unwrap();
    let top = filter_top_percentile(&ds, 10.0).unwrap();
    let full_matches = all.trajectories == ds.trajectories;
    let best_only = top.len() == 1 && top.trajectories[0].episode_return == 10.0;
    let ok = full_matches && best_only;
    verdict(
        "9 (%BC mechanics)",
        ok,
        &format!(
            "X=100 keeps the full BC set: {full_matches}; X=10 keeps returns {:?} (want [10])",
            top.trajectories
                .iter()
                .map(|t| t.episode_return)
                .collect::<Vec<_>>()
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_10_determinism() {
    let first = preset("graph-appendix");
    let cfg = load_config(&presets_dir().join("graph-appendix.json")).unwrap();
    let dir = scratch_dir("graph-appendix-rerun");
    run_experiment(&cfg, &dir, None).unwrap();
    let mut files: Vec<String> = first
        .report
        .files
        .iter()
        .filter(|f| f.ends_with(".csv"))
        .cloned()
        .collect();
    files.sort();
    let differing: Vec<&String> = files
        .iter()
        .filter(|f| fs::read(first.dir.join(f)).ok() != fs::read(dir.join(f)).ok())
        .collect();
    let ok = !files.is_empty() && differing.is_empty();
    verdict(
        "10 (determinism)",
        ok,
        &format!(
            "{} CSV files compared after an uncached rerun, differing: {differing:?}",
            files.len()
        ),
    );
    assert!(ok);
}
