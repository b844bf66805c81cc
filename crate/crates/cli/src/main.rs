use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use mint_core::harness::{
    self, distribution_report, evaluate_run, read_results_file, report_run, run_eval, run_pipeline,
    run_scoring, score_input, transfer_from_results, validate_file, with_jobs,
    write_histograms_csv, write_js_csv, write_results_csv, write_table, write_transfer_csv,
    zlib_entropy_report, BootstrapConfig, InputSpec, RunConfig,
};
use mint_core::{
    gen_traceset, transfer_report, write_traces, Error, ErrorKind, Field, Method, MethodSpec,
    Params, RankingMode, Result, SynthConfig, Task, TransferReport,
};

#[derive(Parser)]
#[command(
    name = "mint",
    version,
    about = "Score, evaluate and compare MIA and MGTD methods over token traces"
)]
struct Cli {
    /// Worker threads (default: all cores)
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score a trace file with one method, or every input and method of a run config
    Score(ScoreArgs),
    /// Compute AUROC tables from score files
    Eval(EvalArgs),
    /// Spearman rank agreement of methods between MIA and MGTD results
    Transfer(TransferArgs),
    /// Per-class score histograms and Jensen-Shannon distances
    Report(ReportArgs),
    /// Check a trace file against the format invariants
    Validate(ValidateArgs),
    /// Generate a synthetic trace file
    Synth(SynthArgs),
    /// Score, evaluate, transfer and report in one go
    Run(RunArgs),
}

#[derive(Args)]
struct ScoreArgs {
    /// Run configuration (TOML); scores every input with every method
    #[arg(long, conflicts_with_all = ["traces", "method", "out"])]
    config: Option<PathBuf>,
    #[arg(long, required_unless_present = "config")]
    traces: Option<PathBuf>,
    #[arg(long, required_unless_present = "config")]
    method: Option<String>,
    /// Percentage of tokens kept by min_k and min_k_pp
    #[arg(long)]
    k: Option<f64>,
    /// Lastde window length
    #[arg(long)]
    s: Option<usize>,
    /// Lastde histogram bins
    #[arg(long)]
    eps: Option<usize>,
    /// Lastde maximum scale
    #[arg(long)]
    tau: Option<usize>,
    /// Number of sampled sequences used by lastde_pp
    #[arg(long)]
    samples: Option<usize>,
    /// Unigram count file used to fill freq_logp
    #[arg(long)]
    freq: Option<PathBuf>,
    #[arg(long, required_unless_present = "config")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Evaluate the score files of a run configuration
    #[arg(long, conflicts_with_all = ["scores", "out"])]
    config: Option<PathBuf>,
    #[arg(long, num_args = 1.., required_unless_present = "config")]
    scores: Vec<PathBuf>,
    /// Results CSV
    #[arg(long, required_unless_present = "config")]
    out: Option<PathBuf>,
    /// Bootstrap iterations for confidence intervals (>= 100)
    #[arg(long)]
    bootstrap_iters: Option<usize>,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Ranking {
    MeanAuroc,
    MeanRank,
}

impl From<Ranking> for RankingMode {
    fn from(r: Ranking) -> Self {
        match r {
            Ranking::MeanAuroc => RankingMode::MeanAuroc,
            Ranking::MeanRank => RankingMode::MeanRank,
        }
    }
}

#[derive(Args)]
struct TransferArgs {
    /// Use the results table of a run configuration
    #[arg(long, conflicts_with_all = ["a", "b", "results"])]
    config: Option<PathBuf>,
    /// Results table for task A
    #[arg(long, requires = "b", conflicts_with = "results")]
    a: Option<PathBuf>,
    /// Results table for task B
    #[arg(long, requires = "a")]
    b: Option<PathBuf>,
    /// One results table holding both tasks (A = mia, B = mgtd)
    #[arg(long)]
    results: Option<PathBuf>,
    #[arg(long, value_enum)]
    ranking: Option<Ranking>,
    /// Transfer CSV
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Report on the score files of a run configuration
    #[arg(long, conflicts_with_all = ["scores", "zlib_traces", "out_dir"])]
    config: Option<PathBuf>,
    #[arg(long, num_args = 1..)]
    scores: Vec<PathBuf>,
    /// Trace files whose raw zlib entropy is histogrammed instead
    #[arg(long, num_args = 1.., conflicts_with = "scores")]
    zlib_traces: Vec<PathBuf>,
    #[arg(long, default_value_t = harness::DEFAULT_HIST_BINS)]
    bins: usize,
    /// Method pair to compare, `a:b`; repeatable (default: all pairs)
    #[arg(long = "pair")]
    pairs: Vec<String>,
    #[arg(long, required_unless_present = "config")]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    traces: PathBuf,
    /// Also require the fields used by this method; repeatable
    #[arg(long = "method")]
    methods: Vec<String>,
    /// Also require this field; repeatable
    #[arg(long = "require")]
    fields: Vec<String>,
}

#[derive(Args)]
struct SynthArgs {
    /// Generator configuration (TOML); flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    domain: Option<String>,
    #[arg(long)]
    model_id: Option<String>,
    #[arg(long)]
    n_docs: Option<usize>,
    #[arg(long)]
    n_tokens: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    mu0: Option<f64>,
    #[arg(long)]
    sd0: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    mu1: Option<f64>,
    #[arg(long)]
    sd1: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_perturbations: Option<usize>,
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    vocab_size: Option<u32>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed of the run configuration
    #[arg(long)]
    seed: Option<u64>,
}

fn methods_help() -> String {
    let mut out = String::from("Methods (required trace fields):\n");
    for m in Method::ALL {
        let mut fields = vec!["logp"];
        if matches!(m, Method::Rank | Method::Logrank | Method::DetectllmNpr) {
            fields.push("rank");
        }
        fields.extend(m.required_fields().iter().map(|f| f.name()));
        let fields = fields.join(", ");
        out.push_str(&format!(
            "  {:<16}{:<11}{fields}\n",
            m.name(),
            m.family().as_str()
        ));
    }
    out.push_str("\nExit codes: 0 ok, 2 configuration/usage, 3 data/validation, 4 internal.\n");
    out.push_str("Logging: MINT_LOG=error|info|debug");
    out
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_path(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn cmd_score(a: ScoreArgs) -> Result<()> {
    if let Some(path) = a.config {
        if a.k.is_some()
            || a.s.is_some()
            || a.eps.is_some()
            || a.tau.is_some()
            || a.samples.is_some()
        {
            return Err(Error::config(
                "method parameters belong in the run config when --config is used",
            ));
        }
        for s in run_scoring(&load_config(&path, None)?)? {
            println!("{s}");
        }
        return Ok(());
    }
    let (traces, name, out) = (a.traces.unwrap(), a.method.unwrap(), a.out.unwrap());
    let method: Method = name.parse()?;
    let params = Params {
        k_percent: a.k,
        window_s: a.s,
        bins_eps: a.eps,
        scales_tau: a.tau,
        n_samples: a.samples,
    };
    let spec = MethodSpec::with_defaults(method, params)?;
    let mut input = InputSpec::new(traces);
    input.freq_table = a.freq;
    for s in score_input(&input, &[(spec, out)])? {
        println!("{s}");
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let bootstrap = a.bootstrap_iters.map(|iters| BootstrapConfig {
        iters,
        level: a.level,
    });
    let (results, out) = match a.config {
        Some(path) => {
            let mut cfg = load_config(&path, a.seed)?;
            if bootstrap.is_some() {
                cfg.bootstrap = bootstrap;
            }
            (evaluate_run(&cfg)?, cfg.results_path())
        }
        None => {
            let results = run_eval(&a.scores, bootstrap.as_ref(), a.seed.unwrap_or(0))?;
            let out = a.out.unwrap();
            write_table(&out, |w| write_results_csv(&results, w))?;
            (results, out)
        }
    };
    for r in &results {
        let ci = match (r.ci_low, r.ci_high) {
            (Some(lo), Some(hi)) => format!(" [{lo:.4}, {hi:.4}]"),
            _ => String::new(),
        };
        println!(
            "{}/{}/{} {} auroc={:.4}{ci}",
            r.task, r.domain, r.model_id, r.method, r.auroc
        );
    }
    println!("wrote {} rows to {}", results.len(), out.display());
    Ok(())
}

fn cmd_transfer(a: TransferArgs) -> Result<()> {
    let (report, out): (TransferReport, Option<PathBuf>) = match (a.config, a.a, a.b, a.results) {
        (Some(path), ..) => {
            let cfg = load_config(&path, None)?;
            let mode = a.ranking.map(Into::into).unwrap_or(cfg.ranking);
            let results = read_results_file(&cfg.results_path())?;
            (
                transfer_from_results(&results, mode)?,
                Some(a.out.unwrap_or_else(|| cfg.transfer_path())),
            )
        }
        (None, Some(pa), Some(pb), None) => {
            let mode = a.ranking.map(Into::into).unwrap_or_default();
            (
                transfer_report(&read_results_file(&pa)?, &read_results_file(&pb)?, mode)?,
                a.out,
            )
        }
        (None, None, None, Some(p)) => {
            let mode = a.ranking.map(Into::into).unwrap_or_default();
            (transfer_from_results(&read_results_file(&p)?, mode)?, a.out)
        }
        _ => {
            return Err(Error::config(
                "transfer needs --config, --a and --b, or --results",
            ))
        }
    };
    for r in &report.rows {
        println!(
            "{} {} rank_a={} rank_b={}",
            r.method,
            r.family.as_str(),
            r.rank_a,
            r.rank_b
        );
    }
    println!("rho={:?} p_value={:?}", report.rho, report.p_value);
    if let Some(out) = out {
        write_table(&out, |w| write_transfer_csv(&report, w))?;
    }
    Ok(())
}

fn parse_pairs(pairs: &[String]) -> Result<Vec<(String, String)>> {
    pairs
        .iter()
        .map(|p| {
            p.split_once(':')
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .ok_or_else(|| Error::config(format!("--pair expects `a:b`, got `{p}`")))
        })
        .collect()
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    if let Some(path) = a.config {
        let report = report_run(&load_config(&path, None)?)?;
        println!(
            "{} histogram rows, {} distances",
            report.histograms.len(),
            report.js.len()
        );
        return Ok(());
    }
    let dir = a.out_dir.unwrap();
    if !a.zlib_traces.is_empty() {
        let inputs: Vec<InputSpec> = a.zlib_traces.into_iter().map(InputSpec::new).collect();
        let rows = zlib_entropy_report(&inputs, a.bins)?;
        let out = dir.join("zlib_entropy.csv");
        write_table(&out, |w| write_histograms_csv(&rows, w))?;
        println!("wrote {} histogram rows to {}", rows.len(), out.display());
        return Ok(());
    }
    if a.scores.is_empty() {
        return Err(Error::config(
            "report needs --scores, --zlib-traces or --config",
        ));
    }
    let report = distribution_report(&a.scores, a.bins, &parse_pairs(&a.pairs)?)?;
    write_table(&dir.join("histograms.csv"), |w| {
        write_histograms_csv(&report.histograms, w)
    })?;
    write_table(&dir.join("js.csv"), |w| write_js_csv(&report.js, w))?;
    for r in &report.js {
        println!(
            "{} {} {} js={:.4}",
            r.method_a, r.method_b, r.class, r.js_distance
        );
    }
    Ok(())
}

fn cmd_validate(a: ValidateArgs) -> Result<()> {
    let mut required: Vec<Field> = Vec::new();
    for m in &a.methods {
        required.extend(m.parse::<Method>()?.required_fields());
    }
    for f in &a.fields {
        required.push(f.parse()?);
    }
    required.sort_by_key(|f| f.name());
    required.dedup();
    let report = validate_file(&a.traces, &required)?;
    for (line, doc_id, v) in &report.violations {
        println!("line {line} {doc_id}: {v}");
    }
    println!(
        "{} documents, {} violations",
        report.n_docs,
        report.violations.len()
    );
    if report.violations.is_empty() {
        Ok(())
    } else {
        Err(Error::data(format!(
            "{} violations in {}",
            report.violations.len(),
            a.traces.display()
        )))
    }
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
            toml::from_str(&text).map_err(|e| Error::config(format!("synth config: {e}")))?
        }
        None => SynthConfig::new(100, 128, (-3.0, 1.0), (-2.5, 1.0), 0),
    };
    if let Some(t) = &a.task {
        cfg.task = t.parse::<Task>()?;
    }
    if let Some(d) = a.domain {
        cfg.domain = d;
    }
    if let Some(m) = a.model_id {
        cfg.model_id = m;
    }
    macro_rules! set {
        ($($field:ident <- $flag:expr),*) => { $(if let Some(v) = $flag { cfg.$field = v; })* };
    }
    set!(n_docs_per_class <- a.n_docs, n_tokens <- a.n_tokens, mu0 <- a.mu0, sd0 <- a.sd0,
         mu1 <- a.mu1, sd1 <- a.sd1, seed <- a.seed, n_perturbations <- a.n_perturbations,
         n_samples <- a.n_samples, vocab_size <- a.vocab_size);
    let ts = gen_traceset(&cfg)?;
    write_table(&a.out, |w| write_traces(&ts, w))?;
    println!("wrote {} documents to {}", ts.traces.len(), a.out.display());
    Ok(())
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let cfg = load_config(&a.config, a.seed)?;
    let out = run_pipeline(&cfg)?;
    for s in &out.summaries {
        println!("{s}");
    }
    println!(
        "wrote {} result rows to {}",
        out.results.len(),
        cfg.results_path().display()
    );
    if let Some(t) = &out.transfer {
        println!("rho={:?} p_value={:?}", t.rho, t.p_value);
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    let jobs = cli.jobs;
    with_jobs(jobs, move || match cli.command {
        Command::Score(a) => cmd_score(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Transfer(a) => cmd_transfer(a),
        Command::Report(a) => cmd_report(a),
        Command::Validate(a) => cmd_validate(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Run(a) => cmd_run(a),
    })
}

fn fail(kind: ErrorKind, message: &str) -> ExitCode {
    let line = message
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join(" ");
    eprintln!("ERROR {}: {line}", kind.exit_code());
    ExitCode::from(kind.exit_code() as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("MINT_LOG", "warn"))
        .format_timestamp(None)
        .init();
    std::panic::set_hook(Box::new(|info| {
        eprintln!("ERROR 4: internal error: {info}");
    }));

    let help = methods_help();
    let command = Cli::command()
        .after_help(help.clone())
        .mut_subcommand("score", |c| c.after_help(help.clone()))
        .mut_subcommand("validate", |c| c.after_help(help));
    let cli = match command
        .try_get_matches()
        .and_then(|m| Cli::from_arg_matches(&m))
    {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("usage error");
            return fail(ErrorKind::Config, first.trim_start_matches("error: "));
        }
    };
    match std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| dispatch(cli))) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => fail(e.kind(), &e.to_string()),
        Err(_) => ExitCode::from(4),
    }
}
