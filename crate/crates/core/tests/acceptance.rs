//! Acceptance checks. Each test prints one `PASS`/`FAIL`/`NOT RUN` line with
//! the measured values, then asserts.
//!
//! Run with `cargo test -p hgens-core --test acceptance -- --nocapture
//! --test-threads 1`. The ACM check reads a dataset directory from
//! `HGENS_ACM_DIR`.

mod common;

use std::collections::BTreeSet;
use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use hgens::encoder::Activation;
use hgens::fusion::{minmax_normalize, FusionMode};
use hgens::gradients::{finite_diff_check, intermediate_gradient, tiny_problem, vanishing_scenario, FiniteDiffConfig, FlowInputs};
use hgens::hetgraph::{gen_relation_adjacency, load_dataset, HeterogeneousGraph, NodeTypeId, RelationGroup, Split};
use hgens::model::{forward, ForwardSettings, ModelParams, ModelShape};
use hgens::numerics::DenseMatrix;
use hgens::sampling::{build_epoch_views, FanoutConfig, GroupAdjacency};
use hgens::scaling::scaling;
use hgens::synth::{generate, SynthConfig};
use hgens::training::{mean, metrics_csv, small_grid, train, variance, AblationMode, RunArtifacts, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn report(name: &str, pass: bool, detail: String) {
    let status = if pass { "PASS" } else { "FAIL" };
    // Straight to the stream so the line survives output capture.
    let _ = writeln!(std::io::stderr(), "[acceptance] {status} {name}: {detail}");
}

/// The configuration the synthetic experiments train with.
fn synthetic_config() -> TrainConfig {
    TrainConfig {
        hidden: 32,
        ..TrainConfig::default()
    }
}

fn synthetic_graph() -> &'static HeterogeneousGraph {
    static G: OnceLock<HeterogeneousGraph> = OnceLock::new();
    G.get_or_init(|| generate(&SynthConfig::default()).unwrap())
}

/// Test accuracy per seed of `config`, with the wall time spent.
fn accuracies(config: &TrainConfig) -> (Vec<f64>, f64) {
    let start = Instant::now();
    let accs = SEEDS
        .iter()
        .map(|&seed| train(&TrainConfig { seed, ..config.clone() }, synthetic_graph()).unwrap().test_acc)
        .collect();
    (accs, start.elapsed().as_secs_f64())
}

/// The full model's runs, shared by the ensemble and ablation checks.
fn full_model() -> &'static (Vec<f64>, f64) {
    static FULL: OnceLock<(Vec<f64>, f64)> = OnceLock::new();
    FULL.get_or_init(|| accuracies(&synthetic_config()))
}

fn fmt(xs: &[f64]) -> String {
    let parts: Vec<String> = xs.iter().map(|x| format!("{x:.4}")).collect();
    format!("[{}]", parts.join(", "))
}

#[test]
fn gradient_correctness() {
    let problem = tiny_problem(7).unwrap();
    let r = finite_diff_check(&problem, FiniteDiffConfig::default()).unwrap();
    let targets = problem.graph.num_targets();
    let pass = r.max_rel_err < 1e-4 && r.seconds < 30.0 && targets <= 40 && r.eps == 1e-5;
    report(
        "gradient correctness",
        pass,
        format!(
            "max relative error {:.3e} over {} scalars (< 1e-4), eps {:e}, {targets} targets, {:.2}s (< 30s)",
            r.max_rel_err, r.num_scalars, r.eps, r.seconds
        ),
    );
    assert!(pass);
}

#[test]
fn residual_keeps_gradients_alive() {
    let k = 4;
    let r = vanishing_scenario(k, 1e6, 4).unwrap();
    let (without, with) = (r.min_without_residual(), r.min_with_residual());
    let floor = 1.0 / k as f64 - 1e-9;

    // With minus without must be (1/k) I for every source, checked here
    // directly from the two Jacobians.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let k = rng.random_range(2..=6usize);
        let d = rng.random_range(2..=6usize);
        let dp = rng.random_range(1..=4usize);
        let inputs = FlowInputs {
            h: (0..k).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
            w: (0..k).map(|_| DenseMatrix::uniform(d, dp, 1.0, &mut rng)).collect(),
            w_prime: (0..k)
                .map(|_| (0..k).map(|_| (0..dp).map(|_| rng.random_range(-1.0..1.0)).collect()).collect())
                .collect(),
        };
        let a = intermediate_gradient(&inputs, true, false).unwrap();
        let b = intermediate_gradient(&inputs, false, false).unwrap();
        let eye = DenseMatrix::identity(d).scale(1.0 / k as f64);
        for (x, y) in a.iter().zip(&b) {
            worst = worst.max(x.sub(y).unwrap().max_abs_diff(&eye));
        }
    }
    let pass = without < 1e-5 && with >= floor && worst <= 1e-12;
    report(
        "residual gradient flow",
        pass,
        format!(
            "k=4 spread=1e6: without residual {without:.3e} (< 1e-5), with residual {with:.6} (>= {floor:.6}); \
             max |(with - without) - I/k| over 20 configs {worst:.2e} (<= 1e-12)"
        ),
    );
    assert!(pass);
}

#[test]
fn attention_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut range_ok, mut attain_ok, mut weight_ok, mut affine_ok) = (true, true, true, true);
    let mut degenerate = 0;
    for trial in 0..1000 {
        let n = rng.random_range(1..=12usize);
        let k = rng.random_range(1..=5usize);
        // Dyadic grid values, with a constant column now and then, so that
        // the affine maps below are exact in floating point.
        let mut theta = DenseMatrix::from_fn(n, k, |_, _| rng.random_range(-64i32..=64) as f64 / 8.0);
        if trial % 10 == 0 {
            let c = rng.random_range(0..k);
            let v = theta[(0, c)];
            for r in 0..n {
                theta[(r, c)] = v;
            }
        }
        let t = minmax_normalize(&theta);
        for c in 0..k {
            let col = t.normalized.column(c);
            range_ok &= col.iter().all(|&v| (0.0..=1.0).contains(&v));
            if t.degenerate[c] {
                degenerate += 1;
                attain_ok &= col.iter().all(|&v| v == 0.0);
            } else {
                attain_ok &= col.contains(&0.0) && col.contains(&1.0);
            }
            let r = 1.0 / k as f64;
            weight_ok &= col.iter().all(|&v| v + r >= r && v + r <= 1.0 + r);
        }

        let mut moved = theta.clone();
        for c in 0..k {
            let a = 2f64.powi(rng.random_range(-3..=3));
            let b = rng.random_range(-32i32..=32) as f64 / 8.0;
            for r in 0..n {
                moved[(r, c)] = a * theta[(r, c)] + b;
            }
        }
        let u = minmax_normalize(&moved);
        let bits = |m: &DenseMatrix| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        affine_ok &= bits(&u.normalized) == bits(&t.normalized);
    }
    let pass = range_ok && attain_ok && weight_ok && affine_ok;
    report(
        "attention invariants",
        pass,
        format!(
            "1000 matrices ({degenerate} constant columns): in [0,1] {range_ok}, attains 0 and 1 {attain_ok}, \
             weights in [1/k, 1+1/k] {weight_ok}, affine maps bitwise invariant {affine_ok}"
        ),
    );
    assert!(pass);
}

#[test]
fn relation_adjacency_oracle() {
    let start = Instant::now();
    let (mut relations, mut mismatches) = (0, 0);
    for seed in 0..100 {
        let g = common::random_typed_graph(seed);
        assert!(g.num_nodes() <= 12 && g.node_types.len() <= 3);
        for r in common::all_relations(&g, 2) {
            let a = gen_relation_adjacency(&g, &r).unwrap();
            let mut got = BTreeSet::new();
            for j in 0..a.rows() {
                got.extend(a.row(j).iter().map(|&k| (j, k as usize)));
            }
            relations += 1;
            mismatches += (got != common::enumerate_paths(&g, &r)) as usize;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = mismatches == 0 && secs < 5.0;
    report(
        "relation adjacency oracle",
        pass,
        format!("100 graphs, {relations} relations of length 1-2, {mismatches} mismatches, {secs:.2}s (< 5s)"),
    );
    assert!(pass);
}

/// Dense full-graph encoder: `H⁰_τ = σ(X_τ W_τ)`, then per layer
/// `H^{l+1} = σ(Σ_j D_j⁻¹ A_j S_j W_j^l)` where `S_j` is the previous target
/// embedding for target-typed senders and `H⁰` otherwise.
fn dense_encoder(g: &HeterogeneousGraph, group: &RelationGroup, params: &ModelParams, layers: usize) -> Vec<Vec<f64>> {
    type M = Vec<Vec<f64>>;
    fn mul(a: &M, b: &M) -> M {
        let (n, m, p) = (a.len(), b.len(), b.first().map_or(0, Vec::len));
        let mut out = vec![vec![0.0; p]; n];
        for i in 0..n {
            for t in 0..m {
                for j in 0..p {
                    out[i][j] += a[i][t] * b[t][j];
                }
            }
        }
        out
    }
    let relu = |m: M| -> M { m.into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect() };
    let dense = |m: &DenseMatrix| -> M { (0..m.rows()).map(|r| m.row(r).to_vec()).collect() };
    let enc = &params.encoders[0];
    let h0 = |t: NodeTypeId| relu(mul(&dense(&g.node_type(t).features), &dense(&enc.input[&t])));

    // Adjacency of each relation from the raw edge lists, then row-normalized.
    let adj: Vec<M> = group
        .relations
        .iter()
        .map(|r| {
            let mut acc: Option<M> = None;
            for st in &r.steps {
                let et = &g.edge_types[st.edge_type.0 as usize];
                let (recv, send) = if st.reverse { (et.src, et.dst) } else { (et.dst, et.src) };
                let mut m = vec![vec![0.0; g.node_type(send).count]; g.node_type(recv).count];
                for &(s, d) in &et.edges {
                    let (to, from) = if st.reverse { (s, d) } else { (d, s) };
                    m[to as usize][from as usize] = 1.0;
                }
                acc = Some(match acc {
                    None => m,
                    Some(prev) => mul(&m, &prev),
                });
            }
            acc.unwrap()
                .into_iter()
                .map(|row| {
                    let deg = row.iter().filter(|&&v| v > 0.0).count();
                    row.iter().map(|&v| if v > 0.0 { 1.0 / deg as f64 } else { 0.0 }).collect()
                })
                .collect()
        })
        .collect();

    let target = g.target_type;
    let mut h = h0(target);
    for l in 0..layers {
        let mut pre = vec![vec![0.0; params.encoders[0].relation[0][l].cols()]; g.num_targets()];
        for (j, r) in group.relations.iter().enumerate() {
            let senders = if r.src_type == target { h.clone() } else { h0(r.src_type) };
            let term = mul(&mul(&adj[j], &senders), &dense(&enc.relation[j][l]));
            for (p, t) in pre.iter_mut().zip(term) {
                for (a, b) in p.iter_mut().zip(t) {
                    *a += b;
                }
            }
        }
        h = relu(pre);
    }
    h
}

#[test]
fn reduction_equivalence() {
    let mut worst: f64 = 0.0;
    let mut cases = Vec::new();
    for (targets, aux, layers) in [(40, 10, 2), (150, 40, 3), (300, 100, 2)] {
        let g = generate(&SynthConfig {
            num_targets: targets,
            num_b: aux,
            num_c: aux,
            feature_dim: 5,
            seed: targets as u64,
            ..SynthConfig::default()
        })
        .unwrap();
        for spec in g.relation_groups.clone() {
            let group = RelationGroup::from_spec(&g, &spec).unwrap();
            let shape = ModelShape::new(&g, std::slice::from_ref(&group), 6, 3, layers, 1).unwrap();
            let params = ModelParams::init(&shape, 3);
            let adjacency = GroupAdjacency::build(&g, group.clone()).unwrap();
            let max_degree = adjacency.adjacency.iter().map(|a| a.max_degree()).max().unwrap();
            let fanout = FanoutConfig::new(max_degree.max(1), layers).unwrap();
            let views = build_epoch_views(&g, &[adjacency], &[targets], fanout, 17).unwrap();
            let settings = ForwardSettings {
                dropout: 0.0,
                dropout_seed: 0,
                fusion: FusionMode::MinMax,
                activation: Activation::Relu,
            };
            let tape = forward(&g, &views, &params, settings).unwrap();
            let oracle = dense_encoder(&g, &group, &params, layers);
            // The single view's encoder output, before any attention fusion.
            let encoded = &tape.aligned[0][0];
            for (r, row) in oracle.iter().enumerate() {
                for (c, &v) in row.iter().enumerate() {
                    worst = worst.max((encoded[(r, c)] - v).abs());
                }
            }
            cases.push(format!("{}n/L{layers}/{}", g.num_nodes(), spec.name));
        }
    }
    let pass = worst <= 1e-12;
    report(
        "reduction equivalence",
        pass,
        format!("max |sampled encoder - dense encoder| {worst:.2e} (<= 1e-12) over {}", cases.join(", ")),
    );
    assert!(pass);
}

#[test]
fn ensemble_benefit() {
    let base = synthetic_config();
    let (full, t_full) = full_model().clone();
    let (naive, t_naive) = accuracies(&AblationMode::NaiveWeighting.apply(&base));
    let (ab, t_ab) = accuracies(&AblationMode::SingleGroup("ab".into()).apply(&base));
    let (ac, t_ac) = accuracies(&AblationMode::SingleGroup("ac".into()).apply(&base));
    let secs = t_full + t_naive + t_ab + t_ac;

    let beats_single = (0..SEEDS.len()).filter(|&i| full[i] >= ab[i].max(ac[i])).count();
    let single_var = [variance(&ab), variance(&ac)];
    // Median of two values.
    let median_single_var = (single_var[0] + single_var[1]) / 2.0;
    let checks = [
        mean(&full) >= mean(&naive),
        beats_single >= 4,
        variance(&full) <= median_single_var,
        secs < 600.0,
    ];
    let pass = checks.iter().all(|&c| c);
    report(
        "ensemble benefit",
        pass,
        format!(
            "full {} mean {:.4} vs naive {} mean {:.4} [{}]; single groups ab {} ac {}: full >= best single in {beats_single}/5 [{}]; \
             variance full {:.2e} vs median single {:.2e} [{}]; {secs:.0}s (< 600s) [{}]",
            fmt(&full),
            mean(&full),
            fmt(&naive),
            mean(&naive),
            checks[0],
            fmt(&ab),
            fmt(&ac),
            checks[1],
            variance(&full),
            median_single_var,
            checks[2],
            checks[3]
        ),
    );
    assert!(pass);
}

#[test]
fn ablation_direction() {
    let base = synthetic_config();
    let (full, _) = full_model().clone();
    let (soft, _) = accuracies(&AblationMode::Softmax.apply(&base));
    let (noreg, _) = accuracies(&AblationMode::MinmaxNoreg.apply(&base));
    let (m, ms, mn) = (mean(&full), mean(&soft), mean(&noreg));
    let pass = m >= ms - 0.005 && m >= mn - 0.005;
    report(
        "ablation direction",
        pass,
        format!(
            "min-max + regularizer {m:.4} vs softmax {ms:.4} and min-max without regularizer {mn:.4} \
             (tolerance 0.005); per seed full {} softmax {} noreg {}",
            fmt(&full),
            fmt(&soft),
            fmt(&noreg)
        ),
    );
    assert!(pass);
}

#[test]
fn scaling_slope() {
    let config = TrainConfig {
        hidden: 32,
        batch_sizes: vec![16, 32],
        ..TrainConfig::default()
    };
    let r = scaling(&[10_000, 30_000, 100_000], 5, &config, 0).unwrap();
    let pass = (0.8..=1.3).contains(&r.slope);
    let points: Vec<String> = r
        .points
        .iter()
        .map(|p| format!("{} -> {:.3}s", p.size, p.mean_epoch_seconds))
        .collect();
    report(
        "scaling",
        pass,
        format!("log-log slope {:.3} (in [0.8, 1.3]); |V|+|E| -> epoch time: {}", r.slope, points.join(", ")),
    );
    assert!(pass);
}

#[test]
fn determinism_on_one_thread() {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let config = TrainConfig {
        max_epochs: 15,
        seed: 21,
        ..synthetic_config()
    };
    let dir = tempfile::tempdir().unwrap();
    let runs: Vec<RunArtifacts> = (0..2)
        .map(|i| {
            let run = pool.install(|| train(&config, synthetic_graph())).unwrap();
            run.write_dir(dir.path().join(format!("run{i}"))).unwrap();
            run
        })
        .collect();
    let read = |i: usize| std::fs::read(dir.path().join(format!("run{i}/metrics.csv"))).unwrap();
    let identical = read(0) == read(1) && metrics_csv(&runs[0].metrics) == metrics_csv(&runs[1].metrics);
    report(
        "determinism",
        identical,
        format!("two single-thread runs, {} epochs each: metrics.csv bitwise identical {identical}", runs[0].metrics.len()),
    );
    assert!(identical);
}

#[test]
fn acm_reproduction() {
    let Ok(dir) = std::env::var("HGENS_ACM_DIR") else {
        let _ = writeln!(
            std::io::stderr(),
            "[acceptance] NOT RUN acm reproduction: set HGENS_ACM_DIR to a dataset directory to run it"
        );
        return;
    };
    let g = load_dataset(&dir).unwrap();
    let base = TrainConfig::default();
    let mut best: Option<(f64, TrainConfig)> = None;
    for c in small_grid(&base) {
        let run = train(&c, &g).unwrap();
        if best.as_ref().is_none_or(|(v, _)| run.val_acc > *v) {
            best = Some((run.val_acc, c));
        }
    }
    let (_, chosen) = best.unwrap();
    let accs: Vec<f64> = SEEDS
        .iter()
        .map(|&seed| train(&TrainConfig { seed, ..chosen.clone() }, &g).unwrap().test_acc)
        .collect();
    let pass = mean(&accs) >= 0.85;
    report(
        "acm reproduction",
        pass,
        format!(
            "{} targets; grid choice hidden {} layers {} dropout {}; test accuracy {} mean {:.4} (>= 0.85), sd {:.4}",
            g.num_targets(),
            chosen.hidden,
            chosen.layers,
            chosen.dropout,
            fmt(&accs),
            mean(&accs),
            variance(&accs).sqrt()
        ),
    );
    assert!(pass);
    assert!(g.split_indices(Split::Test).len() > 0);
}
