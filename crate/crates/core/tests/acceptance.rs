//! Acceptance gate: one PASS/FAIL line per criterion on stderr.
mod common;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use common::*;
use nalgebra::DMatrix;
use pcadv::attack::{attack_batch, eidos, eidos_base, gram_schmidt, AttackConfig, AttackResult, StepSchedule, Variant};
use pcadv::blackbox::{blackbox_attack, BlackboxConfig, FnOracle};
use pcadv::classifier::{train, ClassifierParams, TrainConfig, DEFAULT_HIDDEN};
use pcadv::defense::{sor, srs, DefendedClassifier, Purifier};
use pcadv::eval::{
    default_grid, operating_characteristic, read_records, success_rate, write_records, EvalRecord,
    DEFAULT_GRID_POINTS,
};
use pcadv::geometry::{estimate_normals, ShapeKind};
use pcadv::metrics::{
    chamfer, curvature_consistency, hausdorff, knn_smoothness, l2_distance, metric_gradient, MetricId,
    DEFAULT_SMOOTH_GAMMA,
};
use pcadv::PointCloud;
use rand::Rng;

type Outcome = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

struct Model {
    params: ClassifierParams,
    train_time: Duration,
    accuracy: f64,
    held_out: Vec<(PointCloud, usize)>,
}

fn report(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

fn run(id: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    report(&format!("[{tag}] criterion {id} ({name}, {secs:.1}s): {detail}"));
    outcome.is_ok()
}

fn to_records(results: &[Result<AttackResult, String>], samples: &[(PointCloud, usize)], method: &str) -> Vec<EvalRecord> {
    results
        .iter()
        .zip(samples)
        .enumerate()
        .map(|(i, (r, (_, label)))| {
            let ok = r.as_ref().ok().filter(|a| a.success);
            EvalRecord {
                sample_id: format!("{}_{i:03}", ShapeKind::ALL[*label].name()),
                method: method.into(),
                success: ok.is_some(),
                distances: ok.and_then(|a| a.distances),
                time_s: None,
                queries: None,
            }
        })
        .collect()
}

fn gradient_fidelity() -> Outcome {
    let mut r = rng(101);
    let k = 8;
    let mut curv_redraws = 0;
    let mut checked = 0;
    while checked < 50 {
        let n = r.random_range(32..=64);
        let x = estimate_normals(&random_cloud(&mut r, n), k).unwrap().cloud;
        let y = jitter(&mut r, &x, 0.05);
        let frozen = freeze(&x, &y, k);
        // |<u, n>| has a kink at zero; the frozen surrogate is only
        // differentiable away from it
        if min_curv_cosine(y.as_flat(), &frozen) < 1e-4 {
            curv_redraws += 1;
            continue;
        }
        for id in MetricId::REGULARIZERS {
            let g = metric_gradient(id, &x, &y, k).unwrap();
            let fd = central_fd(|v| frozen_value(id, &x, &frozen, v), y.as_flat(), 1e-5);
            check_gradient(g.as_flat(), &fd).map_err(|e| format!("cloud {checked}, {id}: {e}"))?;
        }

        let p = ClassifierParams::init(DEFAULT_HIDDEN, 4, r.random()).unwrap();
        let t = r.random_range(0..4);
        let base = scalar_forward(&p, y.points(), None);
        let (_, rival) = scalar_margin(&base.logits, t, None);
        let margin = |v: &[f64]| {
            let pts: Vec<V3> = v.chunks_exact(3).map(|q| [q[0], q[1], q[2]]).collect();
            scalar_margin(&scalar_forward(&p, &pts, Some(&base.argmax)).logits, t, Some(rival)).0
        };
        let fd = central_fd(margin, y.as_flat(), 1e-5);
        let g = p.input_gradient(&y, t).unwrap();
        check_gradient(g.as_flat(), &fd).map_err(|e| format!("cloud {checked}, margin: {e}"))?;
        checked += 1;
    }
    Ok(format!(
        "50 clouds x (L2, CD, HD, Curv, margin) within 1e-4 relative; {curv_redraws} draws replaced for a curvature kink"
    ))
}

fn rank(vs: &[Vec<f64>]) -> usize {
    let m = DMatrix::from_fn(vs[0].len(), vs.len(), |i, j| vs[j][i]);
    let sv = m.singular_values();
    let top = sv.max();
    sv.iter().filter(|s| **s > 1e-9 * top).count()
}

fn gs_contract() -> Outcome {
    let mut r = rng(202);
    let mut planted = 0;
    for set in 0..200 {
        let dim = 3 * r.random_range(1..=128);
        let extra = r.random_range(1..=4);
        let mut vs: Vec<Vec<f64>> = (0..=extra)
            .map(|_| (0..dim).map(|_| r.random_range(-1.0..1.0)).collect())
            .collect();
        if set % 3 == 0 {
            let a = r.random_range(0..vs.len());
            let b = r.random_range(0..vs.len());
            let (ca, cb) = (r.random_range(-2.0..2.0), r.random_range(-2.0..2.0));
            let combo: Vec<f64> = vs[a].iter().zip(&vs[b]).map(|(x, y)| ca * x + cb * y).collect();
            let pos = r.random_range(1..=vs.len()).min(4);
            vs.insert(pos, combo);
            vs.truncate(5);
            planted += 1;
        }
        let out = gram_schmidt(&vs).unwrap();
        let expected = rank(&vs) - 1;
        ensure!(out.len() == expected, "set {set}: {} vectors returned, rank says {expected}", out.len());
        let gn = vs[0].iter().map(|v| v * v).sum::<f64>().sqrt();
        for (i, a) in out.iter().enumerate() {
            let an = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            ensure!((an - 1.0).abs() < 1e-6, "set {set}: norm {an}");
            let dg = a.iter().zip(&vs[0]).map(|(x, y)| x * y).sum::<f64>() / gn;
            ensure!(dg.abs() < 1e-6, "set {set}: dot with gradient {dg}");
            for b in &out[i + 1..] {
                let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                ensure!(d.abs() < 1e-6, "set {set}: pairwise dot {d}");
            }
        }
    }
    Ok(format!("200 sets, {planted} with a planted dependent vector, all dropped as expected"))
}

fn lattice(dims: [usize; 3], h: f64) -> PointCloud {
    let mut pts = Vec::new();
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for l in 0..dims[2] {
                pts.push([i as f64 * h, j as f64 * h, l as f64 * h]);
            }
        }
    }
    PointCloud::new(pts).unwrap()
}

fn metric_identities() -> Outcome {
    let mut r = rng(303);
    let mut worst_curv: f64 = 0.0;
    for pair in 0..500 {
        let n = r.random_range(16..=64);
        let x = random_cloud(&mut r, n);
        let xn = estimate_normals(&x, 8).unwrap().cloud;
        ensure!(l2_distance(&x, &x).unwrap() == 0.0, "pair {pair}: L2(X,X) != 0");
        ensure!(chamfer(&x, &x).unwrap() == 0.0, "pair {pair}: CD(X,X) != 0");
        ensure!(hausdorff(&x, &x).unwrap() == 0.0, "pair {pair}: HD(X,X) != 0");
        let c = curvature_consistency(&xn, &x, 8).unwrap().abs();
        worst_curv = worst_curv.max(c);
        ensure!(c < 1e-9, "pair {pair}: Curv(X,X) = {c}");
        let y = if pair % 2 == 0 {
            let sigma = r.random_range(0.0..0.5);
            jitter(&mut r, &x, sigma)
        } else {
            let m = r.random_range(8..=64);
            random_cloud(&mut r, m)
        };
        let (cd, hd) = (chamfer(&x, &y).unwrap(), hausdorff(&x, &y).unwrap());
        ensure!(hd >= cd, "pair {pair}: HD {hd} < CD {cd}");
    }
    for (dims, h, k) in [([4, 4, 4], 0.25, 2), ([8, 4, 2], 0.125, 3), ([5, 5, 5], 0.5, 2), ([6, 3, 7], 0.0625, 1)] {
        let s = knn_smoothness(&lattice(dims, h), k, DEFAULT_SMOOTH_GAMMA).unwrap();
        ensure!(s == 0.0, "grid {dims:?} spacing {h}: smoothness {s}");
    }
    Ok(format!("500 pairs; max |Curv(X,X)| = {worst_curv:.1e}; smoothness 0 on 4 grids"))
}

fn attack_suite(m: &Model, regs: Vec<MetricId>, max_iters: usize, schedule: StepSchedule) -> Vec<Result<AttackResult, String>> {
    let cfg = AttackConfig {
        regularizers: regs,
        max_iters,
        schedule,
        ..AttackConfig::default()
    };
    attack_batch(&m.params, &m.held_out, &cfg, Variant::Full, 1)
        .unwrap()
        .into_iter()
        .map(|r| r.map_err(|e| e.to_string()))
        .collect()
}

fn end_to_end(m: &Model, full_records: &mut Vec<EvalRecord>) -> Outcome {
    let start = Instant::now();
    ensure!(m.accuracy >= 0.95, "training accuracy {:.3}", m.accuracy);
    ensure!(m.train_time < Duration::from_secs(300), "training took {:?}", m.train_time);
    let mut parts = vec![format!(
        "training accuracy {:.3} in {:.1}s",
        m.accuracy,
        m.train_time.as_secs_f64()
    )];
    for (regs, iters, schedule) in [
        (vec![MetricId::L2], 200, StepSchedule::Fixed),
        (MetricId::REGULARIZERS.to_vec(), 100, StepSchedule::Fixed),
    ] {
        let results = attack_suite(m, regs.clone(), iters, schedule);
        let mut wins = 0;
        for (r, (_, label)) in results.iter().zip(&m.held_out) {
            if let Ok(a) = r {
                if a.success {
                    let adv = a.adversarial.as_ref().ok_or("success without a cloud")?;
                    ensure!(m.params.predict(adv) != *label, "success does not re-verify");
                    wins += 1;
                }
            }
        }
        let names: Vec<_> = regs.iter().map(|r| r.name()).collect();
        parts.push(format!("{{{}}} K={iters}: {wins}/{}", names.join(","), results.len()));
        if regs.len() > 1 {
            *full_records = to_records(&results, &m.held_out, "eidos[l2+cd+hd+curv]");
        }
        ensure!(wins * 100 >= 95 * results.len(), "{}", parts.join("; "));
    }
    let total = m.train_time + start.elapsed();
    ensure!(total < Duration::from_secs(600), "total {total:?}");
    parts.push(format!("total {:.1}s", total.as_secs_f64()));
    Ok(parts.join("; "))
}

fn metric_optimality(m: &Model) -> Outcome {
    let cfg = AttackConfig::default();
    let runs: Vec<(MetricId, Vec<AttackResult>)> = MetricId::REGULARIZERS
        .iter()
        .map(|&id| {
            let rs = m
                .held_out
                .iter()
                .map(|(c, l)| eidos_base(&m.params, c, *l, id, &cfg))
                .filter_map(|r| r.ok())
                .collect();
            (id, rs)
        })
        .collect();
    let n = runs[0].1.len();
    ensure!(runs.iter().all(|(_, rs)| rs.len() == n), "runs attacked different sample sets");
    let common: Vec<usize> = (0..n).filter(|&i| runs.iter().all(|(_, rs)| rs[i].success)).collect();
    ensure!(!common.is_empty(), "no sample succeeded in every run");
    let mean = |rs: &[AttackResult], metric: MetricId| {
        common.iter().map(|&i| rs[i].distances.unwrap().get(metric)).sum::<f64>() / common.len() as f64
    };
    let table: BTreeMap<(usize, usize), f64> = runs
        .iter()
        .enumerate()
        .flat_map(|(ri, (_, rs))| MetricId::ALL.iter().enumerate().map(move |(mi, &metric)| ((ri, mi), mean(rs, metric))))
        .collect();
    let argmin = |mi: usize| (0..4).min_by(|&a, &b| table[&(a, mi)].total_cmp(&table[&(b, mi)])).unwrap();
    for (ri, id) in [MetricId::L2, MetricId::Cd, MetricId::Hd].iter().enumerate() {
        let winner = argmin(ri);
        ensure!(winner == ri, "min mean {id} attained by the {} run", MetricId::REGULARIZERS[winner]);
    }
    let smooth_branch = argmin(4) == 3;
    let curv_branch = argmin(3) == 3;
    ensure!(smooth_branch || curv_branch, "Curv run is best in neither Smooth nor Curv");
    let branch = match (smooth_branch, curv_branch) {
        (true, true) => "both Smooth and Curv",
        (true, false) => "Smooth",
        _ => "Curv",
    };
    let row = |ri: usize| {
        (0..5)
            .map(|mi| format!("{:.3e}", table[&(ri, mi)]))
            .collect::<Vec<_>>()
            .join(" ")
    };
    Ok(format!(
        "{} common successes; Curv run minimal in {branch}; means l2/cd/hd/curv/smooth: L2[{}] CD[{}] HD[{}] Curv[{}]",
        common.len(),
        row(0),
        row(1),
        row(2),
        row(3)
    ))
}

fn count_csv(text: &str, metric_col: usize, d: f64) -> (usize, usize) {
    let mut total = 0;
    let mut hits = 0;
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        total += 1;
        if cols[2] == "true" && cols[metric_col].parse::<f64>().unwrap() <= d {
            hits += 1;
        }
    }
    (hits, total)
}

fn operating_curve(records: &[EvalRecord]) -> Outcome {
    ensure!(!records.is_empty(), "no records from criterion 4");
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("full.csv");
    write_records(&path, records).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    let back = read_records(&path).unwrap();
    let p_suc = success_rate(&back).unwrap();
    for (col, metric) in MetricId::ALL.iter().enumerate() {
        let grid = default_grid(&back, *metric, DEFAULT_GRID_POINTS);
        let curve = operating_characteristic(&back, *metric, &grid).unwrap();
        let pts = &curve.points;
        ensure!(pts[0] == (0.0, 0.0), "{metric}: P(0) = {:?}", pts[0]);
        ensure!(pts.windows(2).all(|w| w[0].1 <= w[1].1), "{metric}: not monotone");
        let d_max = back.iter().filter_map(|r| r.metric(*metric)).fold(0.0, f64::max);
        let at_max = operating_characteristic(&back, *metric, &[d_max]).unwrap().points[0].1;
        ensure!(at_max == p_suc, "{metric}: P(D_max) = {at_max}, P_suc = {p_suc}");
        ensure!(pts.last().unwrap().1 == p_suc, "{metric}: curve does not end at P_suc");
        for &(d, p) in pts {
            let (hits, total) = count_csv(&text, 3 + col, d);
            ensure!(p == hits as f64 / total as f64, "{metric} at D={d}: {p} vs oracle {hits}/{total}");
        }
    }
    Ok(format!("5 metrics x {DEFAULT_GRID_POINTS} grid points match the CSV count; P_suc = {p_suc}"))
}

fn defense_pipeline(m: &Model) -> Outcome {
    let mut r = rng(707);
    let mut pts: Vec<V3> = (0..256)
        .map(|_| loop {
            let p = [r.random_range(-0.5..0.5), r.random_range(-0.5..0.5), r.random_range(-0.5..0.5)];
            if p.iter().map(|v| v * v).sum::<f64>() <= 0.25 {
                break p;
            }
        })
        .collect();
    for _ in 0..20 {
        let dir = [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0f64)];
        let len = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        let radius = r.random_range(3.0..6.0);
        pts.push(dir.map(|v| v / len * radius));
    }
    let cloud = PointCloud::new(pts.clone()).unwrap();
    let purified = sor(&cloud, 2, 1.1).unwrap();

    let nbrs = brute_knn(&pts, 2);
    let stat: Vec<f64> = (0..pts.len())
        .map(|i| nbrs[i].iter().map(|&j| d2(&pts[i], &pts[j]).sqrt()).sum::<f64>() / 2.0)
        .collect();
    let n = stat.len() as f64;
    let mu = stat.iter().sum::<f64>() / n;
    let sigma = (stat.iter().map(|s| (s - mu).powi(2)).sum::<f64>() / n).sqrt();
    let oracle_kept: Vec<usize> = (0..pts.len()).filter(|&i| stat[i] <= mu + 1.1 * sigma).collect();
    ensure!(purified.kept == oracle_kept, "SOR kept set differs from the brute-force statistic");
    let removed_outliers = (256..276).filter(|i| !purified.kept.contains(i)).count();
    let kept_inliers = purified.kept.iter().filter(|&&i| i < 256).count();
    ensure!(removed_outliers >= 18, "removed {removed_outliers}/20 outliers");
    ensure!(kept_inliers as f64 >= 0.95 * 256.0, "kept {kept_inliers}/256 inliers");

    for drop in [0, 1, 100, 255] {
        let s = srs(&cloud, drop, 9).unwrap();
        ensure!(s.cloud.len() == cloud.len() - drop && s.kept.len() == cloud.len() - drop, "SRS drop {drop}: wrong size");
        ensure!(s.kept.windows(2).all(|w| w[0] < w[1]), "SRS drop {drop}: indices not strictly ascending");
        ensure!(
            s.kept.iter().zip(s.cloud.points()).all(|(&i, p)| cloud.point(i) == p),
            "SRS drop {drop}: points do not match their indices"
        );
    }
    ensure!(srs(&cloud, cloud.len(), 9).is_err(), "SRS accepted dropping every point");

    let samples: Vec<&(PointCloud, usize)> = (0..4).flat_map(|c| m.held_out[c * 25..c * 25 + 5].iter()).collect();
    let cfg = AttackConfig {
        max_iters: 30,
        seed: 11,
        ..AttackConfig::default()
    };
    let mut wins = [0usize; 2];
    let mut attacked = 0;
    for (slot, eot) in [1, 100].into_iter().enumerate() {
        let model = DefendedClassifier {
            params: m.params.clone(),
            purifier: Purifier::Srs { drop: 128 },
            eot_samples: eot,
            seed: cfg.seed,
        };
        attacked = 0;
        for (c, l) in &samples {
            if let Ok(a) = eidos(&model, c, *l, &cfg) {
                attacked += 1;
                if a.success {
                    ensure!(model.try_predict(a.adversarial.as_ref().unwrap()).unwrap() != *l, "EOT success does not re-verify");
                    wins[slot] += 1;
                }
            }
        }
    }
    ensure!(wins[1] >= wins[0], "EOT n=100 {} < n=1 {}", wins[1], wins[0]);
    Ok(format!(
        "SOR removed {removed_outliers}/20 outliers, kept {kept_inliers}/256 inliers; SRS accounting exact; \
         vs SRS(drop 128) on {attacked} samples: n=1 {} wins, n=100 {} wins",
        wins[0], wins[1]
    ))
}

fn black_box(m: &Model) -> Outcome {
    let cfg = BlackboxConfig::default();
    let mut wins = 0;
    let mut per_class = [0usize; 4];
    let mut max_dot: f64 = 0.0;
    let mut attacked = 0;
    for (i, (c, l)) in m.held_out.iter().enumerate() {
        let calls = AtomicUsize::new(0);
        let target = FnOracle(|y: &PointCloud| {
            calls.fetch_add(1, Ordering::Relaxed);
            m.params.predict(y)
        });
        let res = match blackbox_attack(&m.params, &target, c, *l, &cfg) {
            Ok(r) => r,
            Err(_) => continue,
        };
        attacked += 1;
        let q = res.queries;
        let made = calls.load(Ordering::Relaxed);
        ensure!(q.total() == made, "cloud {i}: reported {} queries, oracle saw {made}", q.total());
        ensure!(
            q.initial == 1 && q.probes == res.probes.len() && q.total() == 1 + res.probes.len() + q.refinement,
            "cloud {i}: bookkeeping {q:?} with {} probes",
            res.probes.len()
        );
        ensure!(res.probes.len() <= 2 * res.points_probed, "cloud {i}: more than two probes per point");
        for p in &res.probes {
            let n = res.normals[p.point];
            let dot = (p.displacement[0] * n[0] + p.displacement[1] * n[1] + p.displacement[2] * n[2]).abs();
            max_dot = max_dot.max(dot);
            ensure!(dot < 1e-9, "cloud {i} point {}: |<dy, n>| = {dot:e}", p.point);
        }
        if res.attack.success {
            ensure!(m.params.predict(res.attack.adversarial.as_ref().unwrap()) != *l, "cloud {i}: success does not re-verify");
            wins += 1;
            per_class[*l] += 1;
        }
    }
    let classes: Vec<String> = ShapeKind::ALL
        .iter()
        .zip(per_class)
        .map(|(k, w)| format!("{} {w}/25", k.name()))
        .collect();
    let detail = format!(
        "{wins}/{} succeeded ({attacked} attacked; {}); max |<dy, n>| = {max_dot:.1e}; query counts exact",
        m.held_out.len(),
        classes.join(", ")
    );
    ensure!(wins * 100 >= 80 * m.held_out.len(), "{detail}");
    Ok(detail)
}

fn pcadv(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_pcadv")).args(args).output().unwrap();
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                files.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    files
}

fn pipeline(root: &Path) -> Result<(), String> {
    let p = |n: &str| root.join(n).to_str().unwrap().to_string();
    let (train, test, model) = (p("train"), p("test"), p("m.ckpt"));
    pcadv(&["gen-data", "--out", &train, "--per-class", "6", "--points", "64", "--seed", "3"])?;
    pcadv(&["gen-data", "--out", &test, "--per-class", "2", "--points", "64", "--seed", "4"])?;
    pcadv(&["train", "--data", &train, "--out", &model, "--epochs", "8", "--seed", "5"])?;
    let common = ["--model", &model, "--data", &test, "--k", "8", "--no-time", "--max-iters", "15"];
    let (a, tr, d) = (p("a.csv"), p("trace"), p("d.csv"));
    let mut args = vec!["attack", "--out", &a, "--trace", &tr, "--reg", "l2,cd,hd,curv", "--schedule", "adaptive", "--seed", "6"];
    args.extend(common);
    pcadv(&args)?;
    let mut args = vec!["defend-attack", "--out", &d, "--defense", "srs", "--drop", "16", "--eot", "4", "--seed", "6"];
    args.extend(common);
    pcadv(&args)?;
    let b = p("b.csv");
    pcadv(&["blackbox", "--surrogate", &model, "--target", &model, "--data", &test, "--out", &b, "--k", "8", "--no-time"])?;
    let oc = p("oc.tsv");
    pcadv(&["eval", "--results", &a, "--oc-metric", "hd", "--oc-out", &oc])?;
    Ok(())
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let (first, second) = (tmp.path().join("one"), tmp.path().join("two"));
    pipeline(&first)?;
    pipeline(&second)?;
    let (a, b) = (snapshot(&first), snapshot(&second));
    ensure!(a.keys().eq(b.keys()), "file sets differ");
    for (name, bytes) in &a {
        ensure!(*bytes == b[name], "{name} differs between runs");
    }
    let tables = a.keys().filter(|k| k.ends_with(".csv") || k.ends_with(".tsv")).count();
    Ok(format!("{} files identical across two runs, {tables} of them CSV/TSV", a.len()))
}

#[test]
fn acceptance() {
    let mut passed = Vec::new();
    passed.push(run(1, "gradient fidelity", gradient_fidelity));
    passed.push(run(2, "Gram-Schmidt contract", gs_contract));
    passed.push(run(3, "metric identities", metric_identities));

    let start = Instant::now();
    let data = toy_set(100, 256, 41);
    let report = train(&data, &TrainConfig::default()).unwrap();
    let model = Model {
        train_time: start.elapsed(),
        accuracy: report.final_accuracy,
        params: report.params,
        held_out: toy_set(25, 256, 42),
    };

    let mut full_records = Vec::new();
    passed.push(run(4, "end-to-end attack", || end_to_end(&model, &mut full_records)));
    passed.push(run(5, "per-metric optimality", || metric_optimality(&model)));
    passed.push(run(6, "operating characteristic", || operating_curve(&full_records)));
    passed.push(run(7, "defense pipeline", || defense_pipeline(&model)));
    passed.push(run(8, "black-box", || black_box(&model)));
    passed.push(run(9, "determinism", determinism));

    let failed: Vec<usize> = passed.iter().enumerate().filter(|(_, ok)| !**ok).map(|(i, _)| i + 1).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
