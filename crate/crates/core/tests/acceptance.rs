//! Acceptance criteria, run in order by a single test so wall-clock budgets are
//! measured without other tests competing for the CPU. Prints one line per
//! criterion and fails at the end if any criterion failed.

use std::io::Write;
use std::path::PathBuf;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use proto_cil::backbone::{
    cnn_init, grad_check, FeatureMatrix, FeatureSource, LinearProbe, ProbeBatch,
};
use proto_cil::datahub::{Image, Split};
use proto_cil::fusion::{late_fuse, single_predict};
use proto_cil::harness::{avg_acc, build_scenario, perf_drop, run_scenario, RunConfig};
use proto_cil::projector::{init_projection, PrototypeState, ScoreMatrix};
use proto_cil::rpca::{pcp_oracle, rpca_train, PcpParams, RpcaModel, RpcaTrainConfig};
use proto_cil::seed;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn gauss(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

fn example(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("examples")
        .join(name)
}

fn metric_formulas() -> Check {
    let icarl = [70.90, 72.85, 73.49, 76.48, 58.95, 55.94, 52.66];
    let ranpac = [98.18, 98.51, 96.45, 95.15, 95.13];
    let a = avg_acc(&icarl).map_err(|e| e.to_string())?;
    let b = avg_acc(&ranpac).map_err(|e| e.to_string())?;
    ensure!((a - 65.89).abs() <= 0.01, "iCaRL average {a}");
    ensure!((b - 96.68).abs() <= 0.01, "RanPAC average {b}");
    let drops = [
        ("FOSTER", perf_drop(63.54, 59.42), 4.12),
        ("HPecIL", perf_drop(99.45, 96.16), 3.29),
        ("iCaRL", perf_drop(icarl[0], icarl[6]), 18.24),
        ("RanPAC", perf_drop(ranpac[0], ranpac[4]), 3.05),
    ];
    for (name, pd, table) in drops {
        ensure!(
            format!("{pd:.2}") == format!("{table:.2}") && (pd - table).abs() < 1e-9,
            "{name} drop {pd}"
        );
    }
    Ok(format!(
        "avg {a:.4} / {b:.4}, drops {:.2} / {:.2}",
        drops[0].1, drops[1].1
    ))
}

/// Direct statistics over all rows at once, registry in first-appearance order.
fn batch_stats(h: &DMatrix<f64>, labels: &[usize]) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut order: Vec<usize> = Vec::new();
    for l in labels {
        if !order.contains(l) {
            order.push(*l);
        }
    }
    let y = DMatrix::from_fn(h.nrows(), order.len(), |i, j| {
        f64::from(labels[i] == order[j])
    });
    (h.transpose() * h, h.transpose() * y)
}

fn ridge_oracle(g: &DMatrix<f64>, c: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
    let m = g.nrows();
    (g + DMatrix::identity(m, m) * lambda)
        .try_inverse()
        .expect("regularized gram is invertible")
        * c
}

fn incremental_equals_batch() -> Check {
    let (mut worst_stats, mut worst_p) = (0.0f64, 0.0f64);
    for inst in 0..50u64 {
        let mut rng = seed::rng(seed::derive_indexed(1, "incremental", inst));
        let n = rng.random_range(1..=500);
        let d = rng.random_range(1..=64);
        let m = rng.random_range(1..=200);
        let k = rng.random_range(1..=10);
        let f = DMatrix::from_fn(n, d, |_, _| rng.random::<f64>());
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let names = labels.iter().map(|l| format!("k{l}")).collect();
        let feats =
            FeatureMatrix::new(f, names, FeatureSource::Ingested).map_err(|e| e.to_string())?;
        let layer = init_projection(d, m, inst).map_err(|e| e.to_string())?;
        let h = layer.project(&feats).map_err(|e| e.to_string())?;

        let mut cuts: Vec<usize> = (0..rng.random_range(0..6))
            .map(|_| rng.random_range(0..=n))
            .collect();
        cuts.extend([0, n]);
        cuts.sort_unstable();
        let mut state = PrototypeState::new(m, 0);
        for w in cuts.windows(2) {
            let idx: Vec<usize> = (w[0]..w[1]).collect();
            state
                .accumulate(&h.select(&idx))
                .map_err(|e| e.to_string())?;
        }
        let (g, c) = batch_stats(&h.rows, &labels);
        worst_stats = worst_stats
            .max(rel(state.gram(), &g))
            .max(rel(state.class_sums(), &c));

        let lambda = 10f64.powf(rng.random_range(0.0..3.0));
        let p = state
            .solve_prototypes(lambda)
            .map_err(|e| e.to_string())?
            .clone();
        let batch = (&g + DMatrix::identity(m, m) * lambda)
            .lu()
            .solve(&c)
            .ok_or("batch system is singular")?;
        worst_p = worst_p.max(rel(&p, &batch));
    }
    ensure!(worst_stats <= 1e-12, "statistics differ by {worst_stats:e}");
    ensure!(worst_p <= 1e-10, "prototypes differ by {worst_p:e}");
    Ok(format!(
        "max (G,C) err {worst_stats:.1e}, max P err {worst_p:.1e}"
    ))
}

fn ridge_matches_inverse() -> Check {
    let mut worst = 0.0f64;
    for inst in 0..100u64 {
        let mut rng = seed::rng(seed::derive_indexed(2, "ridge", inst));
        let m = rng.random_range(1..=50);
        let n = rng.random_range(1..=200);
        let k = rng.random_range(1..=6);
        let rows = DMatrix::from_fn(n, m, |_, _| gauss(&mut rng));
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let names = labels.iter().map(|l| format!("k{l}")).collect();
        let h =
            FeatureMatrix::new(rows, names, FeatureSource::Projected).map_err(|e| e.to_string())?;
        let mut state = PrototypeState::new(m, 0);
        state.accumulate(&h).map_err(|e| e.to_string())?;
        let lambda = 10f64.powf(rng.random_range(-2.0..2.0));
        let p = state
            .solve_prototypes(lambda)
            .map_err(|e| e.to_string())?
            .clone();
        let (g, c) = batch_stats(&h.rows, &labels);
        worst = worst.max(rel(&p, &ridge_oracle(&g, &c, lambda)));
    }
    ensure!(
        worst <= 1e-8,
        "prototypes differ from the inverse by {worst:e}"
    );
    Ok(format!("max err {worst:.1e}"))
}

fn gradients() -> Check {
    let classes: Vec<String> = (0..3).map(|i| format!("k{i}")).collect();
    let (mut cnn, mut probe_err, mut rpca) = (0.0f64, 0.0f64, 0.0f64);
    for s in 0..5u64 {
        let mut rng = seed::rng(seed::derive_indexed(4, "grad", s));
        let model = cnn_init(32, 0.5, s)
            .map_err(|e| e.to_string())?
            .with_head(classes.clone(), s + 100);
        let image = Image::from_fn(70, 70, |_, _| rng.random::<f64>());
        cnn = cnn.max(
            grad_check(&model, &(image, (s % 3) as usize), 1e-5, s).map_err(|e| e.to_string())?,
        );

        let rows = DMatrix::from_fn(12, 6, |_, _| gauss(&mut rng));
        let batch = ProbeBatch {
            rows,
            targets: (0..12).map(|i| i % 4).collect(),
        };
        let mut probe = LinearProbe::new(6, 4, s);
        probe.weight.iter_mut().for_each(|w| *w = gauss(&mut rng));
        probe_err = probe_err.max(grad_check(&probe, &batch, 1e-5, s).map_err(|e| e.to_string())?);

        let model = RpcaModel::new(36, 3, s).map_err(|e| e.to_string())?;
        let x = DMatrix::from_fn(36, 4, |_, _| rng.random::<f64>());
        rpca = rpca.max(grad_check(&model, &x, 1e-5, s).map_err(|e| e.to_string())?);
    }
    ensure!(cnn <= 1e-3, "cnn relative error {cnn:e}");
    ensure!(probe_err <= 1e-6, "probe relative error {probe_err:e}");
    ensure!(rpca <= 1e-6, "rpca relative error {rpca:e}");
    Ok(format!(
        "cnn {cnn:.1e}, probe {probe_err:.1e}, rpca {rpca:.1e}"
    ))
}

fn rpca_recovery() -> Check {
    let (mut worst_pcp, mut worst_ratio, mut max_iter) = (0.0f64, 0.0f64, 0);
    for s in 0..3u64 {
        let mut rng = seed::rng(seed::derive_indexed(5, "rpca", s));
        let u = DMatrix::from_fn(64, 2, |_, _| gauss(&mut rng));
        let v = DMatrix::from_fn(64, 2, |_, _| gauss(&mut rng));
        let l0 = u * v.transpose();
        let spikes = DMatrix::from_fn(64, 64, |_, _| {
            if rng.random::<f64>() < 0.05 {
                if rng.random::<bool>() {
                    10.0
                } else {
                    -10.0
                }
            } else {
                0.0
            }
        });
        let x = &l0 + spikes;
        let out =
            pcp_oracle(&x, &PcpParams::for_matrix(&x, 1e-7, 500)).map_err(|e| e.to_string())?;
        worst_pcp = worst_pcp.max(rel(&out.low_rank, &l0));
        max_iter = max_iter.max(out.iterations);

        let cols: Vec<Vec<f64>> = (0..64)
            .map(|j| x.column(j).iter().copied().collect())
            .collect();
        let model = rpca_train(&cols, &RpcaTrainConfig::default(), s).map_err(|e| e.to_string())?;
        let h = &model.loss_history;
        worst_ratio = worst_ratio.max(h[h.len() - 1] / h[0]);
        let low: Vec<DVector<f64>> = cols
            .iter()
            .map(|c| model.apply(c).map(|d| d.low_rank))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        let sv = DMatrix::from_columns(&low).singular_values();
        let rank = sv.iter().filter(|&&x| x > 1e-8 * sv.max()).count();
        ensure!(rank <= 2, "seed {s}: low-rank batch has rank {rank}");
    }
    ensure!(max_iter <= 500, "pcp took {max_iter} iterations");
    ensure!(worst_pcp <= 1e-2, "pcp recovery error {worst_pcp:e}");
    ensure!(
        worst_ratio <= 0.5,
        "training kept {worst_ratio:.3} of its objective"
    );
    Ok(format!(
        "pcp err {worst_pcp:.1e} in {max_iter} it, loss ratio {worst_ratio:.3}"
    ))
}

/// Accuracy of a ridge classifier fitted on every training image at once.
fn whole_dataset_ridge(config: &RunConfig) -> Result<f64, String> {
    let seq = build_scenario(config).map_err(|e| e.to_string())?;
    let ds = &seq.datasets[0];
    let stack = |split| {
        let rows: Vec<_> = ds.split(split).collect();
        let x = DMatrix::from_fn(rows.len(), rows[0].image.pixels().len(), |i, j| {
            rows[i].image.pixels()[j]
        });
        let y: Vec<usize> = rows
            .iter()
            .map(|r| ds.class_index(&r.label).unwrap())
            .collect();
        (x, y)
    };
    let (xt, yt) = stack(Split::Train);
    let (xe, ye) = stack(Split::Test);
    let targets = DMatrix::from_fn(xt.nrows(), ds.classes.len(), |i, j| f64::from(yt[i] == j));
    let w = ridge_oracle(&(xt.transpose() * &xt), &(xt.transpose() * targets), 1.0);
    let scores = xe * w;
    let hits = (0..scores.nrows())
        .filter(|&i| scores.row(i).transpose().argmax().0 == ye[i])
        .count();
    Ok(100.0 * hits as f64 / ye.len() as f64)
}

fn end_to_end() -> Check {
    let b2 = RunConfig::load(&example("b2inc2_blobs.json")).map_err(|e| e.to_string())?;
    ensure!(
        b2.projector.m == 1000 && b2.scenario.schedule == [2, 2, 2, 2, 2],
        "unexpected bundled config"
    );
    let oracle = whole_dataset_ridge(&b2)?;
    ensure!(
        oracle >= 99.0,
        "whole-dataset ridge reaches only {oracle:.2}%"
    );
    let r = run_scenario(&b2).map_err(|f| f.error.to_string())?.report;
    let (avg, pd) = (
        r.avg_acc.unwrap_or(f64::NAN),
        r.perf_drop.unwrap_or(f64::NAN),
    );
    ensure!(
        r.completed && avg >= 95.0 && pd <= 2.0,
        "B2Inc2 avg {avg:.2}, PD {pd:.2}"
    );

    let b4 = RunConfig::load(&example("b4inc1_blobs.json")).map_err(|e| e.to_string())?;
    ensure!(
        b4.scenario.schedule == [4, 1, 1, 1, 1, 1, 1],
        "unexpected bundled config"
    );
    let r4 = run_scenario(&b4).map_err(|f| f.error.to_string())?.report;
    ensure!(
        r4.completed && r4.accuracies.len() == 7,
        "B4Inc1 produced {} tasks",
        r4.accuracies.len()
    );
    Ok(format!(
        "ridge oracle {oracle:.2}%, B2Inc2 avg {avg:.2} PD {pd:.2}, B4Inc1 7 tasks"
    ))
}

fn determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for i in 0..2 {
        let out = dir.path().join(format!("run{i}"));
        let status = Command::new(env!("CARGO_BIN_EXE_proto-cil"))
            .arg("run")
            .arg(example("speckle_fusion.json"))
            .arg("--out")
            .arg(&out)
            .output()
            .map_err(|e| e.to_string())?;
        ensure!(
            status.status.success(),
            "run {i} failed: {}",
            String::from_utf8_lossy(&status.stderr)
        );
        outputs.push(std::fs::read(out.join("metrics.json")).map_err(|e| e.to_string())?);
    }
    ensure!(
        outputs[0] == outputs[1],
        "metrics.json differs between runs"
    );
    Ok(format!(
        "speckle_fusion metrics.json identical ({} bytes)",
        outputs[0].len()
    ))
}

fn scores(classes: &[String], row: &[f64]) -> ScoreMatrix {
    ScoreMatrix {
        classes: classes.to_vec(),
        scores: DMatrix::from_row_slice(1, row.len(), row),
    }
}

fn fusion_properties() -> Check {
    let mut rng = seed::rng(seed::derive(8, "fusion"));
    for pair in 0..10_000 {
        let k = rng.random_range(1..=12);
        let classes: Vec<String> = (0..k).map(|i| format!("k{i}")).collect();
        let scale = 10f64.powf(rng.random_range(-1.0..1.5));
        let a: Vec<f64> = (0..k).map(|_| scale * gauss(&mut rng)).collect();
        let b: Vec<f64> = (0..k).map(|_| scale * gauss(&mut rng)).collect();
        let (la, lb) = (scores(&classes, &a), scores(&classes, &b));
        let ab = late_fuse(&la, &lb).map_err(|e| e.to_string())?;
        let ba = late_fuse(&lb, &la).map_err(|e| e.to_string())?;
        ensure!(ab == ba, "pair {pair}: fusion is not symmetric");

        let shift = rng.random_range(-100.0..100.0);
        let shifted: Vec<f64> = a.iter().map(|v| v + shift).collect();
        let moved = late_fuse(&scores(&classes, &shifted), &lb).map_err(|e| e.to_string())?;
        ensure!(
            moved[0].index == ab[0].index,
            "pair {pair}: shift by {shift} changed the prediction"
        );

        let flat = scores(&classes, &vec![rng.random_range(-50.0..50.0); k]);
        let reduced = late_fuse(&la, &flat).map_err(|e| e.to_string())?;
        let single = single_predict(&la).map_err(|e| e.to_string())?;
        ensure!(
            reduced[0].index == single[0].index,
            "pair {pair}: constant branch changed the prediction"
        );
    }
    Ok("10000 pairs".into())
}

#[test]
fn acceptance() {
    let criteria: [(&str, Duration, fn() -> Check); 8] = [
        ("1 metric formulas", Duration::from_secs(1), metric_formulas),
        (
            "2 incremental equals batch",
            Duration::from_secs(30),
            incremental_equals_batch,
        ),
        (
            "3 ridge oracle",
            Duration::from_secs(10),
            ridge_matches_inverse,
        ),
        ("4 gradient checks", Duration::from_secs(120), gradients),
        ("5 rpca recovery", Duration::from_secs(60), rpca_recovery),
        (
            "6 end-to-end incremental",
            Duration::from_secs(60),
            end_to_end,
        ),
        ("7 determinism", Duration::from_secs(120), determinism),
        (
            "8 fusion properties",
            Duration::from_secs(5),
            fusion_properties,
        ),
    ];
    let mut failed = Vec::new();
    for (name, budget, check) in criteria {
        let start = Instant::now();
        let result = check();
        let elapsed = start.elapsed();
        let line = match result {
            Ok(detail) if elapsed <= budget => {
                format!("PASS  {name}: {detail} [{:.2}s]", elapsed.as_secs_f64())
            }
            Ok(detail) => format!(
                "FAIL  {name}: {detail}, but took {:.2}s of {}s",
                elapsed.as_secs_f64(),
                budget.as_secs()
            ),
            Err(why) => format!("FAIL  {name}: {why} [{:.2}s]", elapsed.as_secs_f64()),
        };
        // written to stderr directly so the line shows even when output is captured
        let _ = writeln!(std::io::stderr(), "{line}");
        if line.starts_with("FAIL") {
            failed.push(name);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
