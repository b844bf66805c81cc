//! Acceptance suite. Every criterion runs against an independent oracle and
//! prints one PASS/FAIL line; the binary exits non-zero if any fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use itertools::Itertools;
use mint_core::harness::{run_pipeline, with_jobs, BootstrapConfig, InputSpec, RunConfig};
use mint_core::metrics::{
    diversity_entropy, score_detectgpt, score_loss, score_min_k, score_neighborhood,
};
use mint_core::{
    analytic_auroc_gaussian, auroc, brute_force_auroc, gen_traceset, js_distance, score, spearman,
    write_traces, DocumentTrace, Method, MethodSpec, SynthConfig, Task,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn split_scores(traces: &[DocumentTrace], spec: &MethodSpec) -> (Vec<f64>, Vec<f64>) {
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for t in traces {
        let s = score(t, spec)
            .unwrap_or_else(|e| panic!("{spec} on {}: {e}", t.doc_id))
            .score;
        if t.label.is_positive().unwrap() {
            pos.push(s);
        } else {
            neg.push(s);
        }
    }
    (pos, neg)
}

fn auroc_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (np, nn) = (rng.random_range(1..=200), rng.random_range(1..=200));
        // Scores on a coarse grid so that ties are frequent.
        let mut draw = |shift: f64| (rng.random_range(0..40) as f64 + shift) / 8.0;
        let pos: Vec<f64> = (0..np).map(|_| draw(3.0)).collect();
        let neg: Vec<f64> = (0..nn).map(|_| draw(0.0)).collect();
        let got = auroc(&pos, &neg).unwrap();
        worst = worst.max((got - brute_force_auroc(&pos, &neg)).abs());
    }
    let elapsed = start.elapsed();
    check(
        worst <= 1e-12 && elapsed < Duration::from_secs(5),
        format!("max |auroc - brute force| = {worst:e} over 100 tied instances in {elapsed:.2?}"),
    )
}

fn gaussian_oracle() -> Outcome {
    let start = Instant::now();
    let n_tokens = 64;
    let (mu0, sd) = (-4.0, 1.0);
    let mu1 = mu0 + (2.0f64 / n_tokens as f64).sqrt();
    let cfg = SynthConfig::new(2000, n_tokens, (mu0, sd), (mu1, sd), 17);
    let ts = gen_traceset(&cfg).unwrap();
    let (pos, neg) = split_scores(&ts.traces, &MethodSpec::new(Method::Loss));
    let empirical = auroc(&pos, &neg).unwrap();
    let analytic = analytic_auroc_gaussian(mu0, sd, mu1, sd, n_tokens);
    let elapsed = start.elapsed();
    check(
        (empirical - analytic).abs() <= 0.02
            && (analytic - 0.84134).abs() < 1e-5
            && elapsed < Duration::from_secs(30),
        format!(
            "loss AUROC {empirical:.5} vs analytic {analytic:.5} (tolerance 0.02) in {elapsed:.2?}"
        ),
    )
}

fn identity_sets() -> Vec<DocumentTrace> {
    let mut cfg = SynthConfig::new(250, 24, (-3.0, 1.2), (-2.6, 0.9), 99);
    cfg.n_samples = 2;
    let mut traces = gen_traceset(&cfg).unwrap().traces;
    cfg.seed = 100;
    cfg.task = Task::Mgtd;
    cfg.n_perturbations = 7;
    traces.extend(gen_traceset(&cfg).unwrap().traces);
    traces
}

fn detectgpt_identity(traces: &[DocumentTrace]) -> Outcome {
    let mismatches = traces
        .iter()
        .filter(|t| {
            score_detectgpt(t).unwrap().to_bits() != score_neighborhood(t).unwrap().to_bits()
        })
        .count();
    check(
        mismatches == 0,
        format!("{mismatches} bit mismatches over {} traces", traces.len()),
    )
}

fn min_k_boundary(traces: &[DocumentTrace]) -> Outcome {
    let mismatches = traces
        .iter()
        .filter(|t| score_min_k(t, 100.0).to_bits() != score_loss(t).to_bits())
        .count();
    check(
        mismatches == 0,
        format!("{mismatches} mismatches over {} traces", traces.len()),
    )
}

fn orientation_suite() -> Outcome {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut lowest = (String::new(), 1.0f64);
    for (task, seed) in [(Task::Mia, 5u64), (Task::Mgtd, 6)] {
        let mut cfg = SynthConfig::new(200, 128, (-3.0, 1.0), (-2.5, 1.0), seed);
        cfg.task = task;
        let ts = gen_traceset(&cfg).unwrap();
        for spec in MethodSpec::all_defaults() {
            let (pos, neg) = split_scores(&ts.traces, &spec);
            let a = auroc(&pos, &neg).unwrap();
            if a <= 0.5 {
                failures.push(format!("{task}/{spec}={a:.3}"));
            }
            if a < lowest.1 {
                lowest = (format!("{task}/{spec}"), a);
            }
        }
    }
    let elapsed = start.elapsed();
    check(
        failures.is_empty() && elapsed < Duration::from_secs(60),
        if failures.is_empty() {
            format!(
                "18 methods x 2 tasks above 0.5, lowest {} = {:.3}, in {elapsed:.2?}",
                lowest.0, lowest.1
            )
        } else {
            format!("oriented wrongly: {}", failures.join(", "))
        },
    )
}

fn fast_detectgpt_monte_carlo() -> Outcome {
    let mut cfg = SynthConfig::new(50, 32, (-5.0, 1.0), (-4.9, 1.0), 4096);
    cfg.n_samples = 4096;
    cfg.n_perturbations = 1;
    let ts = gen_traceset(&cfg).unwrap();
    let tolerance = 3.0 / (4096f64).sqrt();
    let spec = MethodSpec::new(Method::FastDetectgpt);
    let mut within = 0;
    let mut worst = 0.0f64;
    for t in &ts.traces {
        let analytic = score(t, &spec).unwrap().score;
        let observed: f64 = t.tokens.iter().map(|tok| tok.logp).sum();
        let sums: Vec<f64> = t.samples.iter().map(|s| s.iter().sum()).collect();
        let m = sums.iter().sum::<f64>() / sums.len() as f64;
        let sd = (sums.iter().map(|s| (s - m).powi(2)).sum::<f64>() / sums.len() as f64).sqrt();
        let mc = (observed - m) / sd;
        let gap = (mc - analytic).abs();
        worst = worst.max(gap);
        if gap <= tolerance {
            within += 1;
        }
    }
    let frac = within as f64 / ts.traces.len() as f64;
    check(
        frac >= 0.95,
        format!(
            "{:.1}% of documents within {tolerance:.4} (worst gap {worst:.4})",
            100.0 * frac
        ),
    )
}

/// Average ranks by direct counting, independent of the library's sort.
fn naive_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|x| {
            let below = v.iter().filter(|y| *y < x).count() as f64;
            let equal = v.iter().filter(|y| *y == x).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

fn naive_rho(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (naive_ranks(x), naive_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn spearman_fixtures() -> Outcome {
    let (rho, _) = spearman(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap();
    let mut detail = vec![format!("rho([1,2,3],[1,3,2]) = {rho}")];
    let mut pass = rho == 0.5;
    let cases: [([f64; 5], [f64; 5]); 4] = [
        ([1.0, 2.0, 3.0, 4.0, 5.0], [2.0, 1.0, 4.0, 3.0, 5.0]),
        ([1.0, 2.0, 3.0, 4.0, 5.0], [5.0, 3.0, 4.0, 1.0, 2.0]),
        ([0.3, 0.1, 0.9, 0.5, 0.7], [1.0, 4.0, 2.0, 5.0, 3.0]),
        ([1.0, 2.0, 2.0, 4.0, 5.0], [3.0, 1.0, 2.0, 2.0, 5.0]),
    ];
    let mut worst = 0.0f64;
    for (x, y) in cases {
        let (rho, p) = spearman(&x, &y).unwrap();
        let observed = naive_rho(&x, &y);
        let perms: Vec<Vec<f64>> = y.iter().copied().permutations(5).collect();
        let hits = perms
            .iter()
            .filter(|p| naive_rho(&x, p).abs() >= observed.abs() - 1e-12)
            .count();
        let expect = hits as f64 / perms.len() as f64;
        worst = worst.max((p - expect).abs()).max((rho - observed).abs());
    }
    pass &= worst <= 1e-12;
    detail.push(format!(
        "n=5 permutation p-values vs enumeration, max gap {worst:e}"
    ));
    check(pass, detail.join("; "))
}

fn js_bounds() -> Outcome {
    let same = [0.1, 0.4, 0.4, 0.9, 0.35];
    let zero = js_distance(&same, &same, 50).unwrap();
    let disjoint = js_distance(&[0.0, 0.1, 0.2], &[5.0, 5.5, 6.0], 50).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut asym = 0.0f64;
    let mut over = 0.0f64;
    for _ in 0..200 {
        let a: Vec<f64> = (0..rng.random_range(1..60))
            .map(|_| rng.random_range(-3.0..3.0))
            .collect();
        let b: Vec<f64> = (0..rng.random_range(1..60))
            .map(|_| rng.random_range(-1.0..5.0))
            .collect();
        let bins = rng.random_range(2..80);
        let (ab, ba) = (
            js_distance(&a, &b, bins).unwrap(),
            js_distance(&b, &a, bins).unwrap(),
        );
        asym = asym.max((ab - ba).abs());
        over = over.max(ab - 2f64.ln().sqrt());
    }
    check(
        zero == 0.0 && (disjoint - 2f64.ln().sqrt()).abs() <= 1e-9 && asym <= 1e-12 && over <= 1e-12,
        format!(
            "identical {zero}, disjoint {disjoint:.12} (sqrt ln 2 = {:.12}), max asymmetry {asym:e} over 200 pairs",
            2f64.ln().sqrt()
        ),
    )
}

/// Diversity entropy for s = 2, eps = 2, tau = 1: a window pair falls in the
/// upper bin when its dot product is non-negative or either window is zero.
fn de_oracle(x: &[f64]) -> f64 {
    let pairs = x.len() - 2;
    let upper = (0..pairs)
        .filter(|&i| {
            let (a, b) = ((x[i], x[i + 1]), (x[i + 1], x[i + 2]));
            let zero = (a.0 == 0.0 && a.1 == 0.0) || (b.0 == 0.0 && b.1 == 0.0);
            zero || a.0 * b.0 + a.1 * b.1 >= 0.0
        })
        .count();
    let mut h = 0.0;
    for c in [pairs - upper, upper] {
        if c > 0 {
            let p = c as f64 / pairs as f64;
            h += -p * p.ln();
        }
    }
    let h = h / 2f64.ln();
    if h > 0.0 {
        h.min(1.0)
    } else {
        0.0
    }
}

fn de_fixtures() -> Outcome {
    let constant = diversity_entropy(&[-1.7; 12], 2, 2, 1).unwrap()
        + diversity_entropy(&[-0.4; 40], 4, 8, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut mismatches = 0;
    for _ in 0..20 {
        let n = rng.random_range(3..12);
        let series: Vec<f64> = (0..n).map(|_| rng.random_range(-3..=3) as f64).collect();
        if diversity_entropy(&series, 2, 2, 1).unwrap() != de_oracle(&series) {
            mismatches += 1;
        }
    }
    check(
        constant == 0.0 && mismatches == 0,
        format!("constant series -> {constant}; {mismatches}/20 brute-force mismatches"),
    )
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(files_under(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

fn pipeline_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut inputs = Vec::new();
    for (task, seed, name) in [
        (Task::Mia, 11u64, "mia.jsonl"),
        (Task::Mgtd, 12, "mgtd.jsonl"),
    ] {
        let mut cfg = SynthConfig::new(60, 96, (-3.0, 1.0), (-2.6, 1.1), seed);
        cfg.task = task;
        let path = dir.path().join(name);
        write_traces(
            &gen_traceset(&cfg).unwrap(),
            fs::File::create(&path).unwrap(),
        )
        .unwrap();
        inputs.push(InputSpec::new(path));
    }
    let run = |jobs: usize, tag: &str| {
        let mut cfg = RunConfig::new(
            inputs.clone(),
            MethodSpec::all_defaults(),
            dir.path().join(tag),
        );
        cfg.seed = 42;
        cfg.bootstrap = Some(BootstrapConfig {
            iters: 200,
            level: 0.95,
        });
        with_jobs(Some(jobs), || run_pipeline(&cfg)).unwrap();
        let root = dir.path().join(tag);
        let files: Vec<PathBuf> = files_under(&root)
            .iter()
            .map(|p| p.strip_prefix(&root).unwrap().to_path_buf())
            .collect();
        (root, files)
    };
    let runs = [run(1, "a"), run(8, "b"), run(8, "c")];
    let same_layout = runs.iter().all(|r| r.1 == runs[0].1);
    let mut differing = Vec::new();
    for (root, _) in &runs[1..] {
        for rel in &runs[0].1 {
            if fs::read(runs[0].0.join(rel)).ok() != fs::read(root.join(rel)).ok() {
                differing.push(rel.display().to_string());
            }
        }
    }
    let runs: Vec<Vec<PathBuf>> = runs.into_iter().map(|r| r.1).collect();
    let has_transfer = runs[0].iter().any(|p| p.ends_with("transfer.csv"));
    check(
        same_layout && differing.is_empty() && has_transfer && runs[0].len() == 2 * 18 + 4,
        format!(
            "{} files identical across jobs 1, 8, 8 (differing: {:?})",
            runs[0].len(),
            differing
        ),
    )
}

type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn main() {
    let traces = identity_sets();
    let criteria: Vec<Criterion> = vec![
        (
            "auroc matches brute-force pair counting",
            Box::new(auroc_oracle),
        ),
        (
            "gaussian oracle for the loss AUROC",
            Box::new(gaussian_oracle),
        ),
        (
            "detectgpt equals neighborhood bit for bit",
            Box::new(|| detectgpt_identity(&traces)),
        ),
        (
            "min_k at 100 percent equals loss",
            Box::new(|| min_k_boundary(&traces)),
        ),
        (
            "orientation: every method above chance",
            Box::new(orientation_suite),
        ),
        (
            "fast_detectgpt Monte-Carlo vs analytic",
            Box::new(fast_detectgpt_monte_carlo),
        ),
        (
            "spearman fixtures and exact p-values",
            Box::new(spearman_fixtures),
        ),
        ("jensen-shannon bounds and symmetry", Box::new(js_bounds)),
        (
            "diversity entropy fixtures and oracle",
            Box::new(de_fixtures),
        ),
        (
            "pipeline determinism across job counts",
            Box::new(pipeline_determinism),
        ),
    ];
    let mut failed = 0;
    for (name, run) in &criteria {
        let outcome = run();
        let tag = if outcome.pass { "PASS" } else { "FAIL" };
        println!("{tag} {name}: {}", outcome.detail);
        failed += usize::from(!outcome.pass);
    }
    println!(
        "{} of {} acceptance criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
