//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! FAIL lines do not change the exit status unless `ACCEPTANCE_STRICT` is
//! set, so the workspace test run reports every criterion in one pass.

use std::time::Instant;

use adagtcn::agl::{undirected_stats, GumbelNoise, LearnedGraph};
use adagtcn::data::{
    read_agt1, read_json, save_dataset, load_dataset, split_by_participant, threshold_oracle, write_agt1, write_json,
    PlantedWorld, SessionSample, SplitRatios, SyntheticConfig,
};
use adagtcn::diff::{conv1d_dilated, topk_rows, Tape, Tensor};
use adagtcn::gconv::{normalize_adjacency, vanilla_gcn, Activation, DnGcn, DnGcnConfig};
use adagtcn::gradsuite::{self, GradModule};
use adagtcn::metrics::MetricsReport;
use adagtcn::model::{Model, ModelConfig};
use adagtcn::params::{normal, ParamSet};
use adagtcn::preprocess::BandSequence;
use adagtcn::tconv::{DiTcn, DiTcnConfig};
use adagtcn::train::{evaluate, inspect_graph, mask_consensus, predict_all, train_with, edge_precision, ExecMode, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DATA_SEED: u64 = 2024;
const SPLIT_SEED: u64 = 7;
const EPOCH_BUDGET: usize = 50;
const RUN_BUDGET_SECS: f64 = 300.0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let entries = match gradsuite::run(&GradModule::ALL) {
        Ok(e) => e,
        Err(e) => return outcome(false, format!("suite error: {e}")),
    };
    let secs = start.elapsed().as_secs_f64();
    let worst: Vec<String> = entries
        .iter()
        .map(|e| format!("{}/{} {:.1e}", e.module, e.check, e.report.max_rel_error))
        .collect();
    let all = entries.iter().all(|e| e.report.passed);
    outcome(all && secs < 60.0, format!("{}; {secs:.1} s (limit 60 s)", worst.join(", ")))
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_mm: f64 = 0.0;
    for _ in 0..50 {
        let (p, q, r) = (rng.random_range(1..=8), rng.random_range(1..=8), rng.random_range(1..=8));
        let (a, b) = (uniform(&mut rng, &[p, q]), uniform(&mut rng, &[q, r]));
        let mut naive = vec![0.0; p * r];
        for i in 0..p {
            for j in 0..r {
                for k in 0..q {
                    naive[i * r + j] += a.at(i, k) * b.at(k, j);
                }
            }
        }
        let naive = Tensor::new(vec![p, r], naive).unwrap();
        let tape = Tape::new();
        let via_tape = tape.constant(a.clone()).matmul(&tape.constant(b.clone())).unwrap().value();
        worst_mm = worst_mm.max(max_abs_diff(&a.matmul(&b).unwrap(), &naive)).max(max_abs_diff(&via_tape, &naive));
    }

    let mut worst_conv: f64 = 0.0;
    for _ in 0..50 {
        let (c_in, c_out, d, r) = (
            rng.random_range(1..=4),
            rng.random_range(1..=4),
            rng.random_range(1..=4),
            rng.random_range(1..=3),
        );
        let t = (d - 1) * r + rng.random_range(1..=6);
        let (x, f) = (uniform(&mut rng, &[c_in, t]), uniform(&mut rng, &[c_out, c_in, d]));
        let t_out = t - (d - 1) * r;
        let mut naive = vec![0.0; c_out * t_out];
        for o in 0..c_out {
            for step in 0..t_out {
                for c in 0..c_in {
                    for s in 0..d {
                        naive[o * t_out + step] += f.data()[(o * c_in + c) * d + s] * x.at(c, step + r * s);
                    }
                }
            }
        }
        let tape = Tape::new();
        let y = conv1d_dilated(&tape.constant(x), &tape.constant(f), r).unwrap().value();
        worst_conv = worst_conv.max(max_abs_diff(&y, &Tensor::new(vec![c_out, t_out], naive).unwrap()));
    }

    let norm = |rows: &[&[f64]]| {
        let tape = Tape::new();
        let a = Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
        normalize_adjacency(&tape.constant(a)).unwrap().value()
    };
    let two = norm(&[&[0.0, 1.0], &[1.0, 0.0]]);
    let s6 = 1.0 / 6f64.sqrt();
    let path_expected = Tensor::from_rows(&[vec![0.5, s6, 0.0], vec![s6, 1.0 / 3.0, s6], vec![0.0, s6, 0.5]]).unwrap();
    let path = norm(&[&[0.0, 1.0, 0.0], &[1.0, 0.0, 1.0], &[0.0, 1.0, 0.0]]);
    let norm_err = max_abs_diff(&two, &Tensor::full(&[2, 2], 0.5)).max(max_abs_diff(&path, &path_expected));

    let mut worst_gcn: f64 = 0.0;
    for i in 0..20 {
        let (p, c_in, c_out) = (rng.random_range(2..=8), rng.random_range(1..=5), rng.random_range(1..=5));
        let mut ps = ParamSet::new();
        let cfg = DnGcnConfig {
            in_channels: c_in,
            out_channels: c_out,
            betas: vec![1.0],
            selectors: Vec::new(),
            activation: Activation::Relu,
        };
        let layer = DnGcn::new(cfg, p, &format!("g{i}"), &mut ps, &mut rng).unwrap();
        let a = uniform(&mut rng, &[p, p]).map(f64::abs);
        let h = uniform(&mut rng, &[p, c_in]);
        let tape = Tape::new();
        let b = ps.bind_frozen(&tape);
        let a_hat = normalize_adjacency(&tape.constant(a)).unwrap();
        let hv = tape.constant(h);
        let dn = layer.forward(&b, &hv, &a_hat).unwrap().value();
        let vanilla = vanilla_gcn(&hv, &a_hat, &b[layer.weight(0)]).unwrap().value();
        worst_gcn = worst_gcn.max(max_abs_diff(&dn, &vanilla));
    }

    let pass = worst_mm < 1e-12 && worst_conv < 1e-12 && norm_err < 1e-15 && worst_gcn <= 1e-12;
    outcome(
        pass,
        format!(
            "matmul {worst_mm:.1e}, conv {worst_conv:.1e}, normalize {norm_err:.1e}, DN-GCN(K=1) vs GCN {worst_gcn:.1e} over 20 instances"
        ),
    )
}

fn structural_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut bad_rows = 0;
    for _ in 0..1000 {
        let p = rng.random_range(1..=20);
        let k = rng.random_range(1..=p);
        let scores: Vec<f64> = (0..p * p).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mask = topk_rows(&scores, p, k);
        bad_rows += mask.chunks(p).filter(|row| row.iter().sum::<f64>() != k as f64).count();
    }

    // Each branch, computed on its own and cut to the widest branch's length,
    // must match its channel block in the layer output.
    let mut branch_err: f64 = 0.0;
    let mut lengths_ok = true;
    for max_width in 2..=8 {
        for r in 1..=4 {
            let out_channels = 16.max(max_width - 1);
            let cfg = DiTcnConfig {
                in_channels: 2,
                out_channels,
                max_width,
                dilation: r,
            };
            let t = cfg.min_len() + rng.random_range(0..6);
            let mut ps = ParamSet::new();
            let layer = DiTcn::new(cfg, "t", &mut ps, &mut rng).unwrap();
            let x = uniform(&mut rng, &[3, t, 2]);
            let tape = Tape::new();
            let b = ps.bind_frozen(&tape);
            let y = layer.forward(&b, &tape.constant(x.clone())).unwrap().value();
            let t_out = t - (max_width - 1) * r;
            lengths_ok &= y.shape() == [3, t_out, out_channels];
            let mut offset = 0;
            for width in 2..=max_width {
                let f = ps.get(layer.filters(width)).clone();
                let c_b = f.shape()[0];
                for node in 0..3 {
                    let xs: Vec<f64> = (0..2).flat_map(|c| (0..t).map(move |s| (c, s))).map(|(c, s)| x.data()[(node * t + s) * 2 + c]).collect();
                    let branch = conv1d_dilated(&tape.constant(Tensor::new(vec![2, t], xs).unwrap()), &tape.constant(f.clone()), r)
                        .unwrap()
                        .value();
                    let len = branch.shape()[1];
                    lengths_ok &= len >= t_out;
                    for ch in 0..c_b {
                        for s in 0..t_out {
                            let expected = branch.at(ch, len - t_out + s);
                            let got = y.data()[(node * t_out + s) * out_channels + offset + ch];
                            branch_err = branch_err.max((expected - got).abs());
                        }
                    }
                }
                offset += c_b;
            }
        }
    }

    let model = Model::new(ModelConfig::default()).unwrap();
    let mut pad_err: f64 = 0.0;
    for _ in 0..5 {
        let n = rng.random_range(24..=40);
        let seq = BandSequence::new(normal(&mut rng, &[16, n], 1.0)).unwrap();
        let (short, _) = model.predict(&seq).unwrap();
        for len in [n + 1, 100, 168] {
            let (long, _) = model.predict(&seq.padded(len).unwrap()).unwrap();
            pad_err = pad_err.max((short.prob_tsr - long.prob_tsr).abs());
        }
    }

    let mut perm_err: f64 = 0.0;
    for i in 0..20 {
        let p = rng.random_range(2..=8);
        let mut ps = ParamSet::new();
        let cfg = DnGcnConfig {
            in_channels: 3,
            out_channels: 4,
            betas: vec![0.5, 0.6],
            selectors: Vec::new(),
            activation: Activation::Relu,
        };
        let layer = DnGcn::new(cfg, p, &format!("g{i}"), &mut ps, &mut rng).unwrap();
        let a = uniform(&mut rng, &[p, p]).map(f64::abs);
        let h = uniform(&mut rng, &[p, 3]);
        let mut perm: Vec<usize> = (0..p).collect();
        for j in (1..p).rev() {
            perm.swap(j, rng.random_range(0..=j));
        }
        let mut pm = Tensor::zeros(&[p, p]);
        for (row, &col) in perm.iter().enumerate() {
            pm.data_mut()[row * p + col] = 1.0;
        }
        let run = |a: &Tensor, h: &Tensor| {
            let tape = Tape::new();
            let b = ps.bind_frozen(&tape);
            let a_hat = normalize_adjacency(&tape.constant(a.clone())).unwrap();
            layer.forward(&b, &tape.constant(h.clone()), &a_hat).unwrap().value()
        };
        let direct = pm.matmul(&run(&a, &h)).unwrap();
        let permuted = run(
            &pm.matmul(&a).unwrap().matmul(&pm.transposed()).unwrap(),
            &pm.matmul(&h).unwrap(),
        );
        perm_err = perm_err.max(max_abs_diff(&direct, &permuted));
    }

    let pass = bad_rows == 0 && lengths_ok && branch_err == 0.0 && pad_err <= 1e-10 && perm_err <= 1e-10;
    outcome(
        pass,
        format!(
            "top-k rows off by k: {bad_rows} over 1000 matrices; branch lengths equal: {lengths_ok} (max branch mismatch {branch_err:.1e}); padding {pad_err:.1e}; permutation {perm_err:.1e}"
        ),
    )
}

/// Mixing weights of one random off-diagonal pair per draw, on the
/// candidates a default model builds for a synthetic TSR session.
fn gumbel_draws(tau: f64, draws: usize, seed: u64) -> Vec<Vec<f64>> {
    let (_, samples) = SyntheticConfig::default().generate(DATA_SEED).unwrap();
    let session = samples.iter().find(|s| s.label == 1).unwrap();
    let model = Model::new(ModelConfig {
        tau,
        ..ModelConfig::default()
    })
    .unwrap();
    let (p, parts) = (16, model.config().partitions);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..draws)
        .map(|_| {
            let noise = GumbelNoise::sample(&mut rng, p, parts);
            let tape = Tape::new();
            let b = model.params().bind_frozen(&tape);
            let n = tape.constant(session.sequence.features.clone());
            let w = model.agl().forward(&b, &n, &noise).unwrap().weights.value();
            let i = rng.random_range(0..p);
            let j = (i + rng.random_range(1..p)) % p;
            w.data()[(i * p + j) * parts..(i * p + j + 1) * parts].to_vec()
        })
        .collect()
}

fn gumbel_behavior() -> Outcome {
    let cold = gumbel_draws(0.01, 1000, 3);
    let one_hot = cold
        .iter()
        .filter(|w| w.iter().cloned().fold(0.0, f64::max) >= 0.99)
        .count() as f64
        / cold.len() as f64;
    let hot = gumbel_draws(1e3, 1000, 4);
    let spread = hot
        .iter()
        .map(|w| w.iter().cloned().fold(f64::MIN, f64::max) - w.iter().cloned().fold(f64::MAX, f64::min))
        .sum::<f64>()
        / hot.len() as f64;
    outcome(
        one_hot > 0.99 && spread < 0.05,
        format!("tau=0.01: {:.1}% of 1000 draws >= 0.99-one-hot (need > 99%); tau=1e3: mean max-min {spread:.2e} (need < 0.05)", 100.0 * one_hot),
    )
}

struct SyntheticRuns {
    world: PlantedWorld,
    report: MetricsReport,
    seconds: Vec<f64>,
    epochs: Vec<usize>,
    precisions: Vec<f64>,
    ceiling: f64,
    oracle_accuracy: f64,
    first_model: Model,
    first_test: SessionSample,
}

/// Per-row top-k over cross-partition pairs of the summed zero-lag
/// products of the TSR sessions: the graph a correlation detector would
/// pick among the pairs the graph learner can score.
fn correlation_ceiling(world: &PlantedWorld, tsr: &[&SessionSample], partition: &[usize], k: usize) -> f64 {
    let p = world.nodes();
    let mut score = vec![0.0; p * p];
    for s in tsr {
        let f = &s.sequence.features;
        for i in 0..p {
            for j in 0..p {
                score[i * p + j] += (0..f.shape()[1]).map(|t| f.at(i, t) * f.at(j, t)).sum::<f64>();
            }
        }
    }
    for i in 0..p {
        for j in 0..p {
            if partition[i] == partition[j] {
                score[i * p + j] = f64::NEG_INFINITY;
            }
        }
    }
    let mask = Tensor::new(vec![p, p], topk_rows(&score, p, k)).unwrap();
    edge_precision(&mask, &world.adjacency).unwrap()
}

fn synthetic_runs() -> SyntheticRuns {
    let (world, samples) = SyntheticConfig::default().generate(DATA_SEED).unwrap();
    let oracle_accuracy = threshold_oracle(&samples).accuracy;
    let split = split_by_participant(&samples, SplitRatios::default(), SPLIT_SEED).unwrap();
    let train_cfg = TrainConfig {
        max_epochs: EPOCH_BUDGET,
        ..TrainConfig::default()
    };
    let model_cfg = ModelConfig::default();
    let tsr: Vec<SessionSample> = split.test.iter().filter(|s| s.label == 1).cloned().collect();
    let (mut runs, mut seconds, mut epochs, mut precisions) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut first = None;
    for r in 0..train_cfg.repetitions as u64 {
        let mut model = Model::new(ModelConfig {
            seed: model_cfg.seed + r,
            ..model_cfg.clone()
        })
        .unwrap();
        let cfg = TrainConfig {
            seed: train_cfg.seed + r,
            ..train_cfg.clone()
        };
        let out = train_with(&mut model, &split.train, &split.val, &cfg, ExecMode::default()).unwrap();
        let metrics = evaluate(&out.model, &split.test, ExecMode::default()).unwrap();
        let graphs: Vec<LearnedGraph> = predict_all(&out.model, &tsr, ExecMode::default())
            .unwrap()
            .into_iter()
            .map(|(_, g)| g)
            .collect();
        let precision = edge_precision(&mask_consensus(&graphs, model_cfg.k_edges).unwrap(), &world.adjacency).unwrap();
        println!(
            "  run {r}: test accuracy {:.3}, best epoch {} of {}, {:.1} s, mask precision {precision:.3}",
            metrics.accuracy,
            out.best_epoch,
            out.history.len(),
            out.elapsed_secs
        );
        runs.push(metrics);
        seconds.push(out.elapsed_secs);
        epochs.push(out.history.len());
        precisions.push(precision);
        first.get_or_insert(out.model);
    }
    let partition = first.as_ref().unwrap().agl().partition_of().to_vec();
    let tsr_refs: Vec<&SessionSample> = tsr.iter().collect();
    let ceiling = correlation_ceiling(&world, &tsr_refs, &partition, model_cfg.k_edges);
    SyntheticRuns {
        world,
        report: MetricsReport::from_runs(runs),
        seconds,
        epochs,
        precisions,
        ceiling,
        oracle_accuracy,
        first_model: first.unwrap(),
        first_test: split.test[0].clone(),
    }
}

fn synthetic_end_to_end(runs: &SyntheticRuns) -> Outcome {
    let mean = runs.report.mean.accuracy;
    let sd = runs.report.std.accuracy;
    let slowest = runs.seconds.iter().cloned().fold(0.0, f64::max);
    let most_epochs = runs.epochs.iter().copied().max().unwrap_or(0);
    outcome(
        mean >= 0.90 && slowest < RUN_BUDGET_SECS && most_epochs <= EPOCH_BUDGET && runs.oracle_accuracy > 0.99,
        format!(
            "test accuracy {mean:.3} ± {sd:.3} over {} runs (need >= 0.90); micro-F1 {:.3} ± {:.3}; slowest run {slowest:.1} s (limit {RUN_BUDGET_SECS} s); threshold oracle {:.3}",
            runs.report.runs.len(),
            runs.report.mean.micro_f1,
            runs.report.std.micro_f1,
            runs.oracle_accuracy
        ),
    )
}

fn graph_recovery(runs: &SyntheticRuns) -> Outcome {
    let n = runs.precisions.len() as f64;
    let mean = runs.precisions.iter().sum::<f64>() / n;
    let sd = (runs.precisions.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / n).sqrt();
    let baseline = runs.world.density();
    outcome(
        mean >= 2.0 * baseline,
        format!(
            "mask precision {mean:.3} ± {sd:.3} vs random baseline {baseline:.3} (need >= {:.3}); correlation detector on reachable pairs: {:.3}",
            2.0 * baseline,
            runs.ceiling
        ),
    )
}

fn mask_from_edges(p: usize, edges: &[(usize, usize)]) -> Tensor {
    let mut m = Tensor::zeros(&[p, p]);
    for &(i, j) in edges {
        m.data_mut()[i * p + j] = 1.0;
    }
    m
}

fn sparsity_reporting(runs: &SyntheticRuns) -> Outcome {
    // (mask, hand-counted average degree, hand-counted undirected edges)
    let cases = [
        (mask_from_edges(4, &[(0, 1), (1, 0), (2, 3), (3, 2)]), 1.0, 2),
        (Tensor::full(&[5, 5], 1.0), 4.0, 10),
        (mask_from_edges(4, &[(0, 1), (1, 2), (2, 1), (3, 0)]), 1.5, 3),
        (mask_from_edges(3, &[(0, 0), (1, 1)]), 0.0, 0),
    ];
    let hand_ok = cases.iter().all(|(m, deg, edges)| {
        let s = undirected_stats(m);
        s.avg_node_degree == *deg && s.total_edges == *edges
    });
    let doc = inspect_graph(&runs.first_model, &runs.first_test).unwrap();
    let mut pairs: Vec<(usize, usize)> = doc
        .edges
        .iter()
        .filter(|(i, j, _)| i != j)
        .map(|&(i, j, _)| (i.min(j), i.max(j)))
        .collect();
    pairs.sort_unstable();
    pairs.dedup();
    let doc_ok = doc.total_edges == pairs.len() && doc.avg_node_degree == 2.0 * pairs.len() as f64 / doc.p as f64;
    outcome(
        hand_ok && doc_ok,
        format!(
            "hand-counted masks agree: {hand_ok}; inspect-graph on a trained model: {} edges, avg degree {:.3}, recount agrees: {doc_ok}; published reference (not a target): avg degree 2.58, 1688 edges",
            doc.total_edges, doc.avg_node_degree
        ),
    )
}

fn determinism() -> Outcome {
    let cfg = SyntheticConfig {
        sessions: 60,
        participants: 3,
        ..SyntheticConfig::default()
    };
    let (_, a) = cfg.generate(5).unwrap();
    let (_, b) = cfg.generate(5).unwrap();
    let data_same = write_agt1(&a).unwrap() == write_agt1(&b).unwrap();
    let split = split_by_participant(&a, SplitRatios::default(), 1).unwrap();
    let model_cfg = ModelConfig {
        embed_dim: 8,
        ..ModelConfig::default()
    };
    let train_cfg = TrainConfig {
        max_epochs: 3,
        seed: 11,
        dropout: 0.2,
        ..TrainConfig::default()
    };
    let run = |mode| {
        let mut m = Model::new(model_cfg.clone()).unwrap();
        let out = train_with(&mut m, &split.train, &split.val, &train_cfg, mode).unwrap();
        let metrics = evaluate(&out.model, &split.test, mode).unwrap();
        let curve: Vec<(u64, u64)> = out
            .history
            .iter()
            .map(|h| (h.train_loss.to_bits(), h.val_loss.to_bits()))
            .collect();
        (curve, out.model.to_json().unwrap(), serde_json::to_string(&metrics).unwrap())
    };
    let first = run(ExecMode::default());
    let second = run(ExecMode::default());
    let sequential = run(ExecMode::Sequential);
    let pass = data_same && first == second && first == sequential;
    outcome(
        pass,
        format!(
            "dataset regeneration identical: {data_same}; two runs identical: {}; parallel vs sequential identical: {}",
            first == second,
            first == sequential
        ),
    )
}

fn random_dataset(rng: &mut ChaCha8Rng) -> Vec<SessionSample> {
    let p = rng.random_range(1..=6);
    let names = ["p", "participant-ü", "ß", "被试", ""];
    (0..rng.random_range(0..=6))
        .map(|i| {
            let n = rng.random_range(1..=12);
            let scale = 10f64.powi(rng.random_range(-5..=5));
            let data = (0..p * n).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
            let stem = names[rng.random_range(0..names.len() - 1)];
            SessionSample {
                sequence: BandSequence::new(Tensor::new(vec![p, n], data).unwrap()).unwrap(),
                label: rng.random_range(0..=1),
                participant_id: format!("{stem}{}", rng.random_range(0..4)),
                session_id: format!("{}{i}", names[rng.random_range(0..names.len())]),
            }
        })
        .collect()
}

fn format_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let dir = tempfile::tempdir().unwrap();
    let mut failures = Vec::new();
    for case in 0..50 {
        let ds = random_dataset(&mut rng);
        let bytes = write_agt1(&ds).unwrap();
        let back = read_agt1(&bytes).unwrap();
        if back != ds || write_agt1(&back).unwrap() != bytes {
            failures.push(format!("binary {case}"));
        }
        let text = write_json(&ds).unwrap();
        let back = read_json(&text).unwrap();
        if back != ds || write_json(&back).unwrap() != text {
            failures.push(format!("json {case}"));
        }
        for name in ["d.agt1", "d.json"] {
            let path = dir.path().join(name);
            save_dataset(&path, &ds).unwrap();
            let first = std::fs::read(&path).unwrap();
            let loaded = load_dataset(&path).unwrap();
            save_dataset(&path, &loaded).unwrap();
            if loaded != ds || std::fs::read(&path).unwrap() != first {
                failures.push(format!("file {name} {case}"));
            }
        }
    }
    outcome(
        failures.is_empty(),
        format!("50 randomized datasets, binary and JSON, in memory and on disk; failures: {failures:?}"),
    )
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut report = |name: &'static str, o: Outcome| {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((name, o));
    };
    report("gradient suite", gradient_suite());
    report("oracle equivalence", oracle_equivalence());
    report("structural invariants", structural_invariants());
    report("gumbel-softmax behavior", gumbel_behavior());
    println!("  synthetic end-to-end: {} runs of up to {EPOCH_BUDGET} epochs", TrainConfig::default().repetitions);
    let runs = synthetic_runs();
    report("synthetic end-to-end", synthetic_end_to_end(&runs));
    report("graph recovery", graph_recovery(&runs));
    report("sparsity reporting", sparsity_reporting(&runs));
    report("determinism", determinism());
    report("format round-trip", format_round_trip());

    let failed: Vec<&str> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    println!("{} of {} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() && std::env::var_os("ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
