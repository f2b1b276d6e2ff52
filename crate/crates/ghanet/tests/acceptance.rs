//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Runs without the libtest harness so the report prints
//! in order.

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use ghanet::config::RunConfig;
use ghanet::pipeline::{self, Context};
use ghanet_core::data::{Survival, CATEGORY_COUNT, CATEGORY_NAMES};
use ghanet_core::evaluation::{c_index, km_curve, log_rank};
use ghanet_core::folds::make_folds;
use ghanet_core::model::Variant;
use ghanet_core::train::{reconstruction_report, run_fold};
use ghanet_core::{cab, hsb, invariants, synth, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn ghanet(args: &[&str]) -> Result<(i32, String, String), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_ghanet"))
        .args(args)
        .arg("--quiet")
        .output()
        .map_err(err)?;
    Ok((
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    ))
}

fn ghanet_ok(args: &[&str]) -> Result<String, String> {
    let (code, stdout, stderr) = ghanet(args)?;
    if code != 0 {
        return Err(format!("`ghanet {}` exited {code}: {stderr}", args.join(" ")));
    }
    Ok(stdout)
}

fn read(path: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

/// Small enough for a full cross-validation in seconds.
const SMALL_CONFIG: &str = r#"{
  "train": {"epochs": 3, "width": 8, "heads": 2, "gate_width": 8, "compressed": 8, "accumulation": 8},
  "synth": {"patients": 60, "min_patches": 8, "max_patches": 16, "dim": 8, "prototypes": 3,
            "genes_per_category": [3, 4, 4, 4, 6, 4]}
}"#;

fn small_config(dir: &Path) -> Result<PathBuf, String> {
    let path = dir.join("small.json");
    std::fs::write(&path, SMALL_CONFIG).map_err(err)?;
    Ok(path)
}

fn gradient_fidelity() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let start = Instant::now();
    let (code, stdout, stderr) = ghanet(&["grad-check", "--out-dir", s(dir.path())])?;
    let secs = start.elapsed().as_secs_f64();
    let worst: f64 = stdout
        .lines()
        .find_map(|l| l.strip_prefix("max relative error "))
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| format!("no summary line (exit {code}): {stderr}"))?;
    let blocks = [
        "layer_norm",
        "mhca",
        "mhsa",
        "ffn",
        "gated_attention",
        "snn_head",
        "mse_loss",
        "sce_loss",
        "nll_loss",
        "end_to_end",
    ];
    let missing: Vec<_> = blocks
        .iter()
        .filter(|b| !stdout.lines().any(|l| l.split_whitespace().next() == Some(b)))
        .collect();
    check(
        code == 0 && worst < 1e-4 && secs < 60.0 && missing.is_empty(),
        format!("max rel err {worst:.2e} (< 1e-4), {secs:.1} s (< 60 s), missing blocks {missing:?}"),
    )
}

fn random_survivals(rng: &mut ChaCha8Rng, n: usize) -> Vec<Survival> {
    (0..n)
        .map(|_| Survival {
            // coarse grid so that tied times occur
            time_months: f64::from(rng.random_range(1..=12u32)) * 2.5,
            censored: rng.random_bool(0.35),
        })
        .collect()
}

fn brute_c_index(risks: &[f64], surv: &[Survival]) -> Option<f64> {
    let (mut comparable, mut doubled) = (0u64, 0u64);
    for i in 0..surv.len() {
        for j in i + 1..surv.len() {
            let (early, late) = match surv[i].time_months.partial_cmp(&surv[j].time_months)? {
                std::cmp::Ordering::Less => (i, j),
                std::cmp::Ordering::Greater => (j, i),
                std::cmp::Ordering::Equal => continue,
            };
            if surv[early].censored {
                continue;
            }
            comparable += 1;
            doubled += if risks[early] > risks[late] {
                2
            } else if risks[early] == risks[late] {
                1
            } else {
                0
            };
        }
    }
    (comparable > 0).then(|| doubled as f64 / (2 * comparable) as f64)
}

fn brute_nll(h: &[f64], bin: usize, censored: bool) -> f64 {
    let floor = |p: f64| p.max(1e-7);
    let surv = |upto: usize| (0..upto).map(|t| 1.0 - h[t]).product::<f64>();
    if censored {
        -floor(surv(bin + 1)).ln()
    } else if bin == 0 {
        -floor(h[0]).ln()
    } else {
        -floor(surv(bin)).ln() - floor(h[bin]).ln()
    }
}

fn brute_mse(p: &[Vec<f64>], x: &[Vec<f64>]) -> f64 {
    let per: Vec<f64> = p
        .iter()
        .zip(x)
        .map(|(a, b)| a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>() / a.len() as f64)
        .collect();
    per.iter().sum::<f64>() / per.len() as f64
}

fn brute_sce(p: &[Vec<f64>], x: &[Vec<f64>], gamma: f64) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().max(1e-24).sqrt();
    p.iter()
        .zip(x)
        .map(|(a, b)| {
            let dot: f64 = a.iter().zip(b).map(|(u, v)| u * v).sum();
            (1.0 - dot / (norm(a) * norm(b))).max(0.0).powf(gamma)
        })
        .sum::<f64>()
        / p.len() as f64
}

struct BruteKm {
    time: f64,
    survival: f64,
    at_risk: usize,
    deaths: usize,
}

fn brute_km(surv: &[Survival]) -> Vec<BruteKm> {
    let mut times: Vec<f64> = surv.iter().filter(|s| !s.censored).map(|s| s.time_months).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let table = |t: f64| {
        let n = surv.iter().filter(|s| s.time_months >= t).count();
        let d = surv.iter().filter(|s| s.time_months == t && !s.censored).count();
        (n, d)
    };
    times
        .iter()
        .map(|&t| {
            let survival = times
                .iter()
                .filter(|&&u| u <= t)
                .map(|&u| {
                    let (n, d) = table(u);
                    1.0 - d as f64 / n as f64
                })
                .product();
            let (at_risk, deaths) = table(t);
            BruteKm {
                time: t,
                survival,
                at_risk,
                deaths,
            }
        })
        .collect()
}

/// Statistic from the second group's observed-minus-expected, which equals
/// the first group's up to sign.
fn brute_log_rank(a: &[Survival], b: &[Survival]) -> f64 {
    let all: Vec<(Survival, bool)> = a.iter().map(|&s| (s, false)).chain(b.iter().map(|&s| (s, true))).collect();
    let mut times: Vec<f64> = all.iter().filter(|(s, _)| !s.censored).map(|(s, _)| s.time_months).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let (mut diff, mut var) = (0.0, 0.0);
    for t in times {
        let (mut n, mut nb, mut d, mut db) = (0.0, 0.0, 0.0, 0.0);
        for (s, in_b) in &all {
            if s.time_months >= t {
                n += 1.0;
                nb += f64::from(u8::from(*in_b));
                if s.time_months == t && !s.censored {
                    d += 1.0;
                    db += f64::from(u8::from(*in_b));
                }
            }
        }
        let na = n - nb;
        diff += db - d * nb / n;
        if n > 1.0 {
            var += na * nb * d * (n - d) / (n * n * (n - 1.0));
        }
    }
    if var > 0.0 {
        diff * diff / var
    } else {
        0.0
    }
}

fn row(v: &[f64]) -> Tensor {
    Tensor::matrix(1, v.len(), v.to_vec()).expect("row shape")
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut c_mismatch = 0;
    for _ in 0..100 {
        let surv = random_survivals(&mut rng, 30);
        let risks: Vec<f64> = (0..30).map(|_| f64::from(rng.random_range(0..8u32)) / 4.0).collect();
        let ours = c_index(&risks, &surv).ok();
        if ours != brute_c_index(&risks, &surv) {
            c_mismatch += 1;
        }
    }

    let (mut nll, mut mse, mut sce, mut km, mut lr) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut km_shape_mismatch = 0;
    for _ in 0..50 {
        let bins = rng.random_range(1..=6usize);
        let h: Vec<f64> = (0..bins).map(|_| rng.random_range(0.001..0.999)).collect();
        for bin in 0..bins {
            for censored in [false, true] {
                let mut g = Graph::new();
                let node = g.constant(row(&h));
                let l = hsb::nll_loss(&mut g, node, bin, censored).map_err(err)?;
                nll = nll.max((g.value(l).data()[0] - brute_nll(&h, bin, censored)).abs());
            }
        }

        let cats = rng.random_range(1..=CATEGORY_COUNT);
        let mut draw = || -> Vec<Vec<f64>> {
            (0..cats)
                .map(|c| (0..c + 2).map(|_| rng.random_range(-2.0..2.0)).collect())
                .collect()
        };
        let (p, x) = (draw(), draw());
        let mut g = Graph::new();
        let pn: Vec<_> = p.iter().map(|v| g.constant(row(v))).collect();
        let xn: Vec<_> = x.iter().map(|v| g.constant(row(v))).collect();
        let m = cab::mse_loss(&mut g, &pn, &xn).map_err(err)?;
        mse = mse.max((g.value(m).data()[0] - brute_mse(&p, &x)).abs());
        let (sc, _) = cab::sce_loss(&mut g, &pn, &xn, 2.0).map_err(err)?;
        sce = sce.max((g.value(sc).data()[0] - brute_sce(&p, &x, 2.0)).abs());

        let n = rng.random_range(2..=20usize);
        let surv = random_survivals(&mut rng, n);
        let ours = km_curve(&surv);
        let brute = brute_km(&surv);
        if ours.len() != brute.len()
            || ours
                .iter()
                .zip(&brute)
                .any(|(o, b)| o.time != b.time || o.at_risk != b.at_risk || o.deaths != b.deaths)
        {
            km_shape_mismatch += 1;
        }
        for (o, b) in ours.iter().zip(&brute) {
            km = km.max((o.survival - b.survival).abs());
        }

        let cut = rng.random_range(1..n);
        let (a, b) = surv.split_at(cut);
        let ours = log_rank(a, b).map_err(err)?;
        lr = lr.max((ours.statistic - brute_log_rank(a, b)).abs());
    }
    let tol = 1e-10;
    check(
        c_mismatch == 0 && km_shape_mismatch == 0 && [nll, mse, sce, km, lr].iter().all(|&e| e <= tol),
        format!(
            "c-index mismatches {c_mismatch}/100; max |diff| nll {nll:.1e}, sce {sce:.1e}, mse {mse:.1e}, \
             km {km:.1e} (step mismatches {km_shape_mismatch}), log-rank {lr:.1e} (tol 1e-10)"
        ),
    )
}

fn structural_invariants() -> Outcome {
    let r = invariants::check_structure(100, 7).map_err(err)?;
    check(
        r.passes(),
        format!(
            "{} trials: softmax {:.1e}, mask rows {:.1e}, support violations {}, hyper rows {:.1e}, \
             survival violations {}, permutation {:.1e}, detached CAB grad {:e}",
            r.trials,
            r.softmax_row_error,
            r.mask_row_error,
            r.mask_support_violations,
            r.hyper_row_error,
            r.survival_violations,
            r.permutation_error,
            r.detached_cab_gradient
        ),
    )
}

fn slide_only_inference() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let root = dir.path();
    let config = small_config(root)?;
    let (cohort, run, first, second) = (root.join("cohort"), root.join("run"), root.join("e1"), root.join("e2"));
    let manifest = cohort.join("manifest.json");
    let cfg = s(&config);
    ghanet_ok(&["synth", "--config", cfg, "--out-dir", s(&cohort)])?;
    ghanet_ok(&["train", "--config", cfg, "--manifest", s(&manifest), "--fold", "0", "--out-dir", s(&run)])?;
    let ckpt = run.join("model.ghck");
    let eval = |out: &Path| {
        ghanet_ok(&[
            "eval",
            "--config",
            cfg,
            "--manifest",
            s(&manifest),
            "--checkpoint",
            s(&ckpt),
            "--out-dir",
            s(out),
        ])
    };
    eval(&first)?;
    for f in ["genomics.tsv", "gene_categories.tsv"] {
        std::fs::remove_file(cohort.join(f)).map_err(err)?;
    }
    eval(&second)?;
    let mut differing = Vec::new();
    for f in ["predictions.tsv", "km.tsv", "eval.json"] {
        if read(&first.join(f))? != read(&second.join(f))? {
            differing.push(f);
        }
    }
    let json = |p: PathBuf| -> Result<serde_json::Value, String> {
        serde_json::from_slice(&read(&p)?).map_err(err)
    };
    let trained = json(run.join("train.json"))?["c_index"].as_f64();
    let evaluated = json(second.join("eval.json"))?["c_index"].as_f64();
    check(
        differing.is_empty() && trained.is_some() && trained == evaluated,
        format!(
            "outputs differing after removing genomics: {differing:?}; c-index train {trained:?} vs \
             slide-only eval {evaluated:?}"
        ),
    )
}

struct Trained {
    full: pipeline::CvOutput,
    baseline: pipeline::CvOutput,
    seconds_per_fold: f64,
}

fn train_default(root: &Path) -> Result<Trained, String> {
    let run = |variant: Variant, name: &str| {
        let mut config = RunConfig::default();
        config.train.variant = variant;
        pipeline::cross_validate(&Context::new(config, root.join(name)), None).map_err(err)
    };
    let start = Instant::now();
    let full = run(Variant::Full, "full")?;
    let seconds_per_fold = start.elapsed().as_secs_f64() / full.cv.folds.len() as f64;
    let baseline = run(Variant::GatedBaseline, "baseline")?;
    Ok(Trained {
        full,
        baseline,
        seconds_per_fold,
    })
}

fn planted_recovery(t: &Trained) -> Outcome {
    let (full, base) = (t.full.metrics.c_index, t.baseline.metrics.c_index);
    check(
        full >= 0.70 && full - base >= 0.03 && t.seconds_per_fold < 900.0,
        format!(
            "full {full:.4} ± {:.4} (>= 0.70), gated baseline {base:.4} ± {:.4}, margin {:.4} (>= 0.03), \
             {:.1} s per fold",
            t.full.metrics.c_index_std,
            t.baseline.metrics.c_index_std,
            full - base,
            t.seconds_per_fold
        ),
    )
}

fn km_separation(t: &Trained) -> Outcome {
    let p = t.full.split.log_rank.p;
    let outcomes = t.full.cohort.survivals();
    let control = log_rank(&outcomes, &outcomes).map_err(err)?.p;
    check(
        p < 0.05 && control > 0.5,
        format!("median split p {p:.2e} (< 0.05), identical groups p {control} (> 0.5)"),
    )
}

fn spearman_reconstruction(t: &Trained) -> Outcome {
    let report = t.full.spearman.as_ref().ok_or("no reconstruction report")?;
    let means: Vec<f64> = report.iter().map(|r| r.mean).collect();

    // Same cohort with genomic profiles rotated by one patient, so the bag
    // carries no information about the genes it is asked to reconstruct.
    // Selection would keep a single gene per category here, so every gene
    // is reconstructed instead.
    let mut config = RunConfig::default();
    config.train.selection.enabled = false;
    let (mut cohort, _) = synth::generate(&config.synth, config.train.seed).map_err(err)?;
    let mut profiles: Vec<_> = cohort.patients.iter_mut().map(|p| p.genomics.take()).collect();
    profiles.rotate_left(1);
    for (p, g) in cohort.patients.iter_mut().zip(profiles) {
        p.genomics = g;
    }
    let fold = make_folds(&cohort.survivals(), config.train.folds, config.train.seed)
        .map_err(err)?
        .swap_remove(0);
    let noise = run_fold(&config.train, &cohort, fold, 0).map_err(err)?;
    let control: Vec<f64> = reconstruction_report(&noise.trained, &cohort, &noise.fold.validation)
        .map_err(err)?
        .iter()
        .map(|r| r.mean)
        .collect();

    let show = |v: &[f64]| {
        CATEGORY_NAMES
            .iter()
            .zip(v)
            .map(|(n, m)| format!("{n} {m:.3}"))
            .collect::<Vec<_>>()
            .join(", ")
    };
    check(
        means.iter().all(|&m| m >= 0.2) && control.iter().all(|&m| m.abs() <= 0.1),
        format!("held-out means [{}] (>= 0.2); permuted-genes control [{}] (|.| <= 0.1)", show(&means), show(&control)),
    )
}

fn k_sweep() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let config = small_config(dir.path())?;
    let out = dir.path().join("sweep");
    ghanet_ok(&["sweep-k", "--config", s(&config), "--out-dir", s(&out)])?;
    let text = String::from_utf8(read(&out.join("sweep_k.tsv"))?).map_err(err)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let expected_header = "k_percent\tc_index_mean\tc_index_std\tfold_1\tfold_2\tfold_3\tfold_4\tfold_5";
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split('\t').map(|v| v.parse().unwrap_or(f64::NAN)).collect())
        .collect();
    let ks: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    let well_formed = rows
        .iter()
        .all(|r| r.len() == 8 && r[1..].iter().all(|v| v.is_finite()) && (0.0..=1.0).contains(&r[1]));
    check(
        header == expected_header && ks == [10.0, 15.0, 20.0, 25.0, 30.0, 35.0] && well_formed,
        format!("{} rows for k {ks:?}, schema ok {}", rows.len(), header == expected_header && well_formed),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let config = small_config(dir.path())?;
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ghanet_ok(&["cross-validate", "--config", s(&config), "--seed", "3", "--out-dir", s(out)])?;
    }
    let mut files = vec!["metrics.json".to_string(), "predictions.tsv".to_string()];
    files.extend((0..5).map(|i| format!("fold{i}.ghck")));
    let mut differing = Vec::new();
    for f in &files {
        if read(&a.join(f))? != read(&b.join(f))? {
            differing.push(f.clone());
        }
    }
    check(
        differing.is_empty(),
        format!("{} files compared, differing {differing:?}", files.len()),
    )
}

fn main() -> ExitCode {
    let mut failures = 0;
    let mut report = |n: usize, name: &str, outcome: Outcome| {
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failures += 1;
                ("FAIL", d)
            }
        };
        println!("[{tag}] {n}. {name}: {detail}");
    };
    report(1, "gradient fidelity", gradient_fidelity());
    report(2, "oracle equivalence", oracle_equivalence());
    report(3, "structural invariants", structural_invariants());
    report(4, "slide-only inference", slide_only_inference());
    let dir = tempfile::tempdir().expect("temp dir");
    match train_default(dir.path()) {
        Ok(t) => {
            report(5, "planted recovery", planted_recovery(&t));
            report(6, "KM/log-rank separation", km_separation(&t));
            report(7, "Spearman reconstruction", spearman_reconstruction(&t));
        }
        Err(e) => {
            for (n, name) in [(5, "planted recovery"), (6, "KM/log-rank separation"), (7, "Spearman reconstruction")] {
                report(n, name, Err(format!("training failed: {e}")));
            }
        }
    }
    report(8, "k-sweep harness", k_sweep());
    report(9, "determinism", determinism());
    if failures == 0 {
        println!("all 9 criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("{failures} of 9 criteria failed");
        ExitCode::FAILURE
    }
}
