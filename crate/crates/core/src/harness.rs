//! Batch orchestration: scoring runs, result tables, the cross-task transfer
//! report and score-distribution reports.
//!
//! Every output is written to a temporary sibling first and renamed into
//! place once complete, so a failed run never leaves a truncated file.
//! Outputs are byte-identical for identical inputs, configuration and seed,
//! whatever the number of worker threads.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use log::{debug, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{
    auroc, bootstrap_ci, js_distance, transfer_report, EvalResult, RankingMode, TransferReport,
};
use crate::method::{Method, MethodSpec, Params};
use crate::metrics::{score, zlib_entropy, FrequencyTable};
use crate::traces::{
    validate_trace, write_json_line, DocumentTrace, Field, Label, Task, TraceReader, Violation,
};

pub const SCORE_FORMAT: &str = "mint-scores";
pub const SCORE_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_HIST_BINS: usize = 50;
/// Documents read and scored together before their lines are written.
const CHUNK_DOCS: usize = 256;

/// One trace file to score. Unset task, domain and model id are taken from
/// the file header and its first document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSpec {
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<Task>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
    /// Unigram count file used to fill `freq_logp`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub freq_table: Option<PathBuf>,
}

impl InputSpec {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        InputSpec {
            path: path.into(),
            task: None,
            domain: None,
            model_id: None,
            freq_table: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapConfig {
    pub iters: usize,
    #[serde(default = "default_level")]
    pub level: f64,
}

fn default_level() -> f64 {
    0.95
}

fn default_hist_bins() -> usize {
    DEFAULT_HIST_BINS
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRunConfig {
    inputs: Vec<InputSpec>,
    methods: Vec<String>,
    output_dir: PathBuf,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    bootstrap: Option<BootstrapConfig>,
    #[serde(default = "default_hist_bins")]
    hist_bins: usize,
    #[serde(default)]
    ranking: RankingMode,
    #[serde(default)]
    js_pairs: Vec<(String, String)>,
}

/// A batch run: which traces to score with which methods, and where the
/// score files and tables go.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub inputs: Vec<InputSpec>,
    pub methods: Vec<MethodSpec>,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub bootstrap: Option<BootstrapConfig>,
    pub hist_bins: usize,
    pub ranking: RankingMode,
    /// Method pairs compared in the distribution report; all pairs if empty.
    pub js_pairs: Vec<(String, String)>,
}

/// Parses `loss`, `min_k`, `min_k(k_percent=10)` or `lastde(window_s=3;bins_eps=6)`.
/// Unset parameters take their defaults.
pub fn parse_method_key(key: &str) -> Result<MethodSpec> {
    let key = key.trim();
    let (name, params) = match key.split_once('(') {
        Some((name, rest)) => {
            let inner = rest
                .strip_suffix(')')
                .ok_or_else(|| Error::config(format!("malformed method `{key}`: missing `)`")))?;
            (name, inner)
        }
        None => (key, ""),
    };
    let method: Method = name.trim().parse()?;
    let mut overrides = Params::default();
    for part in params.split(';').map(str::trim).filter(|s| !s.is_empty()) {
        let (pname, value) = part
            .split_once('=')
            .ok_or_else(|| Error::config(format!("malformed parameter `{part}` in `{key}`")))?;
        let bad = || Error::config(format!("bad value for {pname} in `{key}`: `{value}`"));
        let value = value.trim();
        match pname.trim() {
            "k_percent" | "k" => overrides.k_percent = Some(value.parse().map_err(|_| bad())?),
            "window_s" | "s" => overrides.window_s = Some(value.parse().map_err(|_| bad())?),
            "bins_eps" | "eps" => overrides.bins_eps = Some(value.parse().map_err(|_| bad())?),
            "scales_tau" | "tau" => overrides.scales_tau = Some(value.parse().map_err(|_| bad())?),
            "n_samples" | "samples" => {
                overrides.n_samples = Some(value.parse().map_err(|_| bad())?)
            }
            other => {
                return Err(Error::config(format!(
                    "unknown parameter `{other}` in `{key}`"
                )))
            }
        }
    }
    MethodSpec::with_defaults(method, overrides)
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl RunConfig {
    pub fn new(
        inputs: Vec<InputSpec>,
        methods: Vec<MethodSpec>,
        output_dir: impl Into<PathBuf>,
    ) -> Self {
        RunConfig {
            inputs,
            methods,
            output_dir: output_dir.into(),
            seed: 0,
            bootstrap: None,
            hist_bins: DEFAULT_HIST_BINS,
            ranking: RankingMode::default(),
            js_pairs: Vec::new(),
        }
    }

    /// Parses a TOML run configuration. Relative paths are resolved against
    /// `base_dir`. The method name `all` expands to every method with
    /// default parameters.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let raw: RawRunConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("run config: {e}")))?;
        let mut methods = Vec::new();
        for key in &raw.methods {
            if key.trim() == "all" {
                methods.extend(MethodSpec::all_defaults());
            } else {
                methods.push(parse_method_key(key)?);
            }
        }
        let inputs = raw
            .inputs
            .into_iter()
            .map(|mut i| {
                i.path = resolve(base_dir, &i.path);
                i.freq_table = i.freq_table.map(|f| resolve(base_dir, &f));
                i
            })
            .collect();
        let cfg = RunConfig {
            inputs,
            methods,
            output_dir: resolve(base_dir, &raw.output_dir),
            seed: raw.seed,
            bootstrap: raw.bootstrap,
            hist_bins: raw.hist_bins,
            ranking: raw.ranking,
            js_pairs: raw.js_pairs,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::config(format!("cannot read run config {}: {e}", path.display()))
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs.is_empty() {
            return Err(Error::config("run config has no inputs"));
        }
        if self.methods.is_empty() {
            return Err(Error::config("run config has no methods"));
        }
        let mut keys: Vec<String> = self.methods.iter().map(MethodSpec::key).collect();
        keys.sort();
        if let Some(w) = keys.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::config(format!("method {} listed twice", w[0])));
        }
        for m in &self.methods {
            m.validate()?;
        }
        if self.hist_bins < 2 {
            return Err(Error::config(format!(
                "hist_bins must be >= 2, got {}",
                self.hist_bins
            )));
        }
        if let Some(b) = &self.bootstrap {
            if b.iters < 100 {
                return Err(Error::config(format!(
                    "bootstrap.iters must be >= 100, got {}",
                    b.iters
                )));
            }
            if !(b.level > 0.0 && b.level < 1.0) {
                return Err(Error::config(format!(
                    "bootstrap.level {} outside (0, 1)",
                    b.level
                )));
            }
        }
        Ok(())
    }

    pub fn scores_dir(&self) -> PathBuf {
        self.output_dir.join("scores")
    }

    /// `scores/<input index>-<file stem>__<method>.jsonl`.
    pub fn score_path(&self, input_idx: usize, spec: &MethodSpec) -> PathBuf {
        let stem = self.inputs[input_idx]
            .path
            .file_stem()
            .map(|s| sanitize(&s.to_string_lossy()))
            .unwrap_or_default();
        self.scores_dir().join(format!(
            "{input_idx:02}-{stem}__{}.jsonl",
            method_file_stem(spec)
        ))
    }

    /// Every score file of the run, inputs outer, methods inner.
    pub fn score_paths(&self) -> Vec<PathBuf> {
        (0..self.inputs.len())
            .flat_map(|i| self.methods.iter().map(move |m| self.score_path(i, m)))
            .collect()
    }

    pub fn results_path(&self) -> PathBuf {
        self.output_dir.join("results.csv")
    }

    pub fn transfer_path(&self) -> PathBuf {
        self.output_dir.join("transfer.csv")
    }

    pub fn histograms_path(&self) -> PathBuf {
        self.output_dir.join("histograms.csv")
    }

    pub fn js_path(&self) -> PathBuf {
        self.output_dir.join("js.csv")
    }
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '_' || c == '-' {
                c
            } else {
                '-'
            }
        })
        .collect()
}

/// File-name form of a method key: `min_k__k_percent-20`.
pub fn method_file_stem(spec: &MethodSpec) -> String {
    let params = spec.params_string();
    if params.is_empty() {
        spec.method.name().to_string()
    } else {
        format!(
            "{}__{}",
            spec.method.name(),
            sanitize(&params.replace(';', "__"))
        )
    }
}

/// Runs `f` on a dedicated pool of `jobs` threads, or on the global pool.
pub fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match jobs {
        None => f(),
        Some(0) => Err(Error::config("--jobs must be >= 1")),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::config(format!("cannot start {n} worker threads: {e}")))?
            .install(f),
    }
}

/// Output file that only appears under its final name once committed.
struct AtomicFile {
    tmp: PathBuf,
    dest: PathBuf,
    writer: Option<BufWriter<File>>,
}

impl AtomicFile {
    fn create(dest: &Path) -> Result<Self> {
        if let Some(dir) = dest.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)
                .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        }
        let mut name = dest.file_name().unwrap_or_default().to_os_string();
        name.push(".part");
        let tmp = dest.with_file_name(name);
        let file =
            File::create(&tmp).map_err(|e| Error::io(format!("creating {}", tmp.display()), e))?;
        Ok(AtomicFile {
            tmp,
            dest: dest.to_path_buf(),
            writer: Some(BufWriter::new(file)),
        })
    }

    fn writer(&mut self) -> &mut BufWriter<File> {
        self.writer.as_mut().expect("writer taken only on commit")
    }

    fn commit(mut self) -> Result<()> {
        let writer = self.writer.take().expect("commit called once");
        let file = writer
            .into_inner()
            .map_err(|e| Error::io(format!("writing {}", self.dest.display()), e.into_error()))?;
        file.sync_all()
            .map_err(|e| Error::io(format!("writing {}", self.dest.display()), e))?;
        fs::rename(&self.tmp, &self.dest)
            .map_err(|e| Error::io(format!("renaming into {}", self.dest.display()), e))
    }
}

impl Drop for AtomicFile {
    fn drop(&mut self) {
        if self.writer.is_some() {
            let _ = fs::remove_file(&self.tmp);
        }
    }
}

fn write_atomically(
    dest: &Path,
    body: impl FnOnce(&mut BufWriter<File>) -> Result<()>,
) -> Result<()> {
    let mut file = AtomicFile::create(dest)?;
    body(file.writer())?;
    file.commit()
}

fn open_input(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))
}

/// First line of a score file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreHeader {
    pub domain: String,
    pub format: String,
    pub method: Method,
    pub model_id: String,
    pub params: String,
    pub task: Task,
    pub version: u32,
}

impl ScoreHeader {
    pub fn spec(&self) -> Result<MethodSpec> {
        MethodSpec::parse(self.method.name(), &self.params)
    }
}

fn is_false(b: &bool) -> bool {
    !*b
}

/// One document line of a score file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScoreLine {
    Scored {
        doc_id: String,
        label: Label,
        method: String,
        score: f64,
        #[serde(default, skip_serializing_if = "is_false")]
        std_floored: bool,
    },
    Skipped {
        doc_id: String,
        label: Label,
        skipped: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreFile {
    pub header: ScoreHeader,
    pub lines: Vec<ScoreLine>,
}

impl ScoreFile {
    pub fn parse<R: BufRead>(source: R) -> Result<Self> {
        let mut lines = source.lines().enumerate();
        let header: ScoreHeader = match lines.next() {
            Some((_, line)) => {
                let line = line.map_err(|e| Error::Parse {
                    line: 1,
                    message: e.to_string(),
                })?;
                serde_json::from_str(&line).map_err(|e| Error::Parse {
                    line: 1,
                    message: format!("bad score header: {e}"),
                })?
            }
            None => {
                return Err(Error::Parse {
                    line: 1,
                    message: "empty score file".into(),
                })
            }
        };
        if header.format != SCORE_FORMAT || header.version != SCORE_FORMAT_VERSION {
            return Err(Error::Parse {
                line: 1,
                message: format!("not a {SCORE_FORMAT} v{SCORE_FORMAT_VERSION} file"),
            });
        }
        let mut out = Vec::new();
        for (idx, line) in lines {
            let line_no = idx + 1;
            let line = line.map_err(|e| Error::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ScoreLine = serde_json::from_str(&line).map_err(|_| Error::Parse {
                line: line_no,
                message: format!("bad score record `{line}`"),
            })?;
            out.push(rec);
        }
        Ok(ScoreFile { header, lines: out })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(open_input(path)?).map_err(|e| match e {
            Error::Parse { line, message } => {
                Error::data(format!("{} line {line}: {message}", path.display()))
            }
            other => other,
        })
    }
}

/// Counts for one (input, method) pair of a scoring run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScoringSummary {
    pub input: PathBuf,
    pub method: String,
    pub output: PathBuf,
    pub n_docs: usize,
    pub scored: usize,
    pub skipped: usize,
    pub std_floored: usize,
}

impl fmt::Display for ScoringSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: {} scored, {} skipped, {} std-floored -> {}",
            self.input.display(),
            self.method,
            self.scored,
            self.skipped,
            self.std_floored,
            self.output.display()
        )
    }
}

struct Target {
    key: String,
    file: Option<AtomicFile>,
    scored: usize,
    skipped: usize,
    floored: usize,
    first_skip: Option<Error>,
}

fn load_freq_table(path: &Path) -> Result<FrequencyTable> {
    FrequencyTable::read_tsv(open_input(path)?).map_err(|e| match e {
        Error::Parse { line, message } => {
            Error::data(format!("{} line {line}: {message}", path.display()))
        }
        other => other,
    })
}

fn read_chunk<R: BufRead>(reader: &mut TraceReader<R>, path: &Path) -> Result<Vec<DocumentTrace>> {
    let mut chunk = Vec::with_capacity(CHUNK_DOCS);
    for doc in reader.by_ref().take(CHUNK_DOCS) {
        chunk.push(doc.map_err(|e| match e {
            Error::Parse { line, message } => {
                Error::data(format!("{} line {line}: {message}", path.display()))
            }
            other => other,
        })?);
    }
    Ok(chunk)
}

/// Scores one trace file with several methods, writing one score file per
/// method. Documents a method cannot score are written as skipped records;
/// a method that scores no document at all is an error.
pub fn score_input(
    input: &InputSpec,
    targets: &[(MethodSpec, PathBuf)],
) -> Result<Vec<ScoringSummary>> {
    if targets.is_empty() {
        return Err(Error::config("no methods to score"));
    }
    let freq = input
        .freq_table
        .as_deref()
        .map(load_freq_table)
        .transpose()?;
    let mut reader = TraceReader::new(open_input(&input.path)?).map_err(|e| match e {
        Error::Parse { line, message } => {
            Error::data(format!("{} line {line}: {message}", input.path.display()))
        }
        other => other,
    })?;
    let task = reader.task();
    if let Some(want) = input.task {
        if want != task {
            return Err(Error::config(format!(
                "{} holds {task} traces but the run config says {want}",
                input.path.display()
            )));
        }
    }
    let mut chunk = read_chunk(&mut reader, &input.path)?;
    let first = chunk
        .first()
        .ok_or_else(|| Error::data(format!("{} contains no documents", input.path.display())))?;
    let domain = input.domain.clone().unwrap_or_else(|| first.domain.clone());
    let model_id = input
        .model_id
        .clone()
        .unwrap_or_else(|| first.model_id.clone());

    let mut state = Vec::with_capacity(targets.len());
    for (spec, path) in targets {
        spec.validate()?;
        let mut file = AtomicFile::create(path)?;
        let header = ScoreHeader {
            domain: domain.clone(),
            format: SCORE_FORMAT.to_string(),
            method: spec.method,
            model_id: model_id.clone(),
            params: spec.params_string(),
            task,
            version: SCORE_FORMAT_VERSION,
        };
        write_json_line(file.writer(), &header)?;
        state.push(Target {
            key: spec.key(),
            file: Some(file),
            scored: 0,
            skipped: 0,
            floored: 0,
            first_skip: None,
        });
    }

    let specs: Vec<MethodSpec> = targets.iter().map(|t| t.0).collect();
    let mut n_docs = 0;
    while !chunk.is_empty() {
        if let Some(table) = &freq {
            chunk.par_iter_mut().for_each(|d| table.annotate(d));
        }
        let rows: Vec<Vec<Result<_>>> = chunk
            .par_iter()
            .map(|doc| specs.iter().map(|spec| score(doc, spec)).collect())
            .collect();
        for (doc, row) in chunk.iter().zip(rows) {
            for (t, result) in state.iter_mut().zip(row) {
                let line = match result {
                    Ok(s) => {
                        t.scored += 1;
                        t.floored += usize::from(s.std_floored);
                        ScoreLine::Scored {
                            doc_id: doc.doc_id.clone(),
                            label: doc.label,
                            method: t.key.clone(),
                            score: s.score,
                            std_floored: s.std_floored,
                        }
                    }
                    Err(e) => {
                        t.skipped += 1;
                        let reason = e.to_string();
                        debug!("{} skipped {}: {reason}", t.key, doc.doc_id);
                        t.first_skip.get_or_insert(e);
                        ScoreLine::Skipped {
                            doc_id: doc.doc_id.clone(),
                            label: doc.label,
                            skipped: reason,
                        }
                    }
                };
                write_json_line(t.file.as_mut().unwrap().writer(), &line)?;
            }
        }
        n_docs += chunk.len();
        chunk = read_chunk(&mut reader, &input.path)?;
    }

    if let Some(t) = state.iter_mut().find(|t| t.scored == 0) {
        return Err(match t.first_skip.take() {
            Some(e @ Error::Unsupported { .. }) => e,
            Some(e) => Error::data(format!(
                "{}: no document of {} could be scored (first: {e})",
                t.key,
                input.path.display()
            )),
            None => Error::data(format!("{}: nothing scored", t.key)),
        });
    }
    let mut summaries = Vec::with_capacity(state.len());
    for (t, (_, path)) in state.iter_mut().zip(targets) {
        t.file.take().unwrap().commit()?;
        let s = ScoringSummary {
            input: input.path.clone(),
            method: t.key.clone(),
            output: path.clone(),
            n_docs,
            scored: t.scored,
            skipped: t.skipped,
            std_floored: t.floored,
        };
        info!("{s}");
        summaries.push(s);
    }
    Ok(summaries)
}

/// Scores every input of the run with every method.
pub fn run_scoring(cfg: &RunConfig) -> Result<Vec<ScoringSummary>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for (i, input) in cfg.inputs.iter().enumerate() {
        let targets: Vec<(MethodSpec, PathBuf)> = cfg
            .methods
            .iter()
            .map(|m| (*m, cfg.score_path(i, m)))
            .collect();
        out.extend(score_input(input, &targets)?);
    }
    Ok(out)
}

type CellKey = (Task, String, String, String);
/// Spec, source file, scores and labels of one evaluation group.
type Cell<'a> = (MethodSpec, &'a Path, Vec<f64>, Vec<bool>);

/// AUROC per (task, domain, model_id, method), rows sorted by that key.
/// Skipped records are ignored; every scored document needs a label of
/// the file's task, and every group needs both classes.
pub fn run_eval(
    files: &[PathBuf],
    bootstrap: Option<&BootstrapConfig>,
    seed: u64,
) -> Result<Vec<EvalResult>> {
    if files.is_empty() {
        return Err(Error::config("no score files to evaluate"));
    }
    let mut cells: BTreeMap<CellKey, Cell> = BTreeMap::new();
    for path in files {
        let file = ScoreFile::read(path)?;
        let h = &file.header;
        let spec = h.spec()?;
        let key = (h.task, h.domain.clone(), h.model_id.clone(), spec.key());
        if let Some(prev) = cells.get(&key) {
            return Err(Error::data(format!(
                "{} and {} both hold {} for {}/{}/{}",
                prev.1.display(),
                path.display(),
                key.3,
                key.0,
                key.1,
                key.2
            )));
        }
        let (mut scores, mut labels) = (Vec::new(), Vec::new());
        for line in &file.lines {
            if let ScoreLine::Scored {
                doc_id,
                label,
                score,
                ..
            } = line
            {
                let positive = match (label.task(), label.is_positive()) {
                    (Some(t), Some(p)) if t == h.task => p,
                    _ => {
                        return Err(Error::data(format!(
                            "{}: document {doc_id} has label {label}, not a {} label",
                            path.display(),
                            h.task
                        )))
                    }
                };
                scores.push(*score);
                labels.push(positive);
            }
        }
        cells.insert(key, (spec, path.as_path(), scores, labels));
    }
    let mut results = Vec::with_capacity(cells.len());
    for (idx, ((task, domain, model_id, key), (spec, _, scores, labels))) in
        cells.into_iter().enumerate()
    {
        let n_pos = labels.iter().filter(|&&p| p).count();
        let n_neg = labels.len() - n_pos;
        if n_pos == 0 || n_neg == 0 {
            return Err(Error::data(format!(
                "group {task}/{domain}/{model_id}/{key} has {n_pos} positive and {n_neg} negative documents"
            )));
        }
        let pick = |want: bool| -> Vec<f64> {
            scores
                .iter()
                .zip(&labels)
                .filter(|(_, &l)| l == want)
                .map(|(&s, _)| s)
                .collect()
        };
        let (pos, neg) = (pick(true), pick(false));
        let a = auroc(&pos, &neg)?;
        let ci = match bootstrap {
            Some(b) => {
                let group_seed = seed.wrapping_add((idx as u64) << 32);
                Some(bootstrap_ci(
                    &scores, &labels, b.iters, b.level, group_seed,
                )?)
            }
            None => None,
        };
        results.push(EvalResult {
            method: spec,
            task,
            domain,
            model_id,
            auroc: a,
            n_pos,
            n_neg,
            ci_low: ci.map(|c| c.0),
            ci_high: ci.map(|c| c.1),
        });
    }
    Ok(results)
}

const RESULTS_COLUMNS: [&str; 10] = [
    "task", "domain", "model_id", "method", "params", "auroc", "n_pos", "n_neg", "ci_low",
    "ci_high",
];

fn csv_write_error(e: csv::Error) -> Error {
    Error::io("writing table", e.into())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_results_csv<W: Write>(results: &[EvalResult], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(RESULTS_COLUMNS).map_err(csv_write_error)?;
    for r in results {
        w.write_record([
            r.task.as_str().to_string(),
            r.domain.clone(),
            r.model_id.clone(),
            r.method.method.name().to_string(),
            r.method.params_string(),
            r.auroc.to_string(),
            r.n_pos.to_string(),
            r.n_neg.to_string(),
            fmt_opt(r.ci_low),
            fmt_opt(r.ci_high),
        ])
        .map_err(csv_write_error)?;
    }
    w.flush().map_err(|e| Error::io("writing table", e))
}

pub fn read_results_csv<R: Read>(source: R) -> Result<Vec<EvalResult>> {
    let mut rd = csv::Reader::from_reader(source);
    let headers = rd
        .headers()
        .map_err(|e| Error::data(format!("results table: {e}")))?
        .clone();
    if headers.iter().ne(RESULTS_COLUMNS) {
        return Err(Error::data(format!(
            "results table header must be {}",
            RESULTS_COLUMNS.join(",")
        )));
    }
    let mut out = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::data(format!("results table row {row}: {e}")))?;
        let bad = |col: &str| {
            Error::data(format!(
                "results table row {row}: bad {col} `{}`",
                &rec[col_index(col)]
            ))
        };
        let opt = |col: &str| -> Result<Option<f64>> {
            let v = &rec[col_index(col)];
            if v.is_empty() {
                Ok(None)
            } else {
                v.parse().map(Some).map_err(|_| bad(col))
            }
        };
        let task: Task = rec[0].parse().map_err(|_| bad("task"))?;
        let method = MethodSpec::parse(&rec[3], &rec[4])?;
        let auroc: f64 = rec[5].parse().map_err(|_| bad("auroc"))?;
        if !(0.0..=1.0).contains(&auroc) {
            return Err(bad("auroc"));
        }
        out.push(EvalResult {
            method,
            task,
            domain: rec[1].to_string(),
            model_id: rec[2].to_string(),
            auroc,
            n_pos: rec[6].parse().map_err(|_| bad("n_pos"))?,
            n_neg: rec[7].parse().map_err(|_| bad("n_neg"))?,
            ci_low: opt("ci_low")?,
            ci_high: opt("ci_high")?,
        });
    }
    Ok(out)
}

fn col_index(col: &str) -> usize {
    RESULTS_COLUMNS
        .iter()
        .position(|c| *c == col)
        .expect("known column")
}

pub fn read_results_file(path: &Path) -> Result<Vec<EvalResult>> {
    read_results_csv(open_input(path)?).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

/// Transfer report with MIA rows as task A and MGTD rows as task B.
pub fn transfer_from_results(results: &[EvalResult], mode: RankingMode) -> Result<TransferReport> {
    let (a, b): (Vec<EvalResult>, Vec<EvalResult>) =
        results.iter().cloned().partition(|r| r.task == Task::Mia);
    if a.is_empty() || b.is_empty() {
        return Err(Error::data("transfer needs results for both mia and mgtd"));
    }
    transfer_report(&a, &b, mode)
}

pub fn write_transfer_csv<W: Write>(report: &TransferReport, sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record([
        "method",
        "family",
        "mean_auroc_a",
        "mean_auroc_b",
        "rank_a",
        "rank_b",
    ])
    .map_err(csv_write_error)?;
    for r in &report.rows {
        w.write_record([
            r.method.clone(),
            r.family.as_str().to_string(),
            r.mean_auroc_a.to_string(),
            r.mean_auroc_b.to_string(),
            r.rank_a.to_string(),
            r.rank_b.to_string(),
        ])
        .map_err(csv_write_error)?;
    }
    for (name, v) in [("rho", report.rho), ("p_value", report.p_value)] {
        w.write_record([name, &v.to_string(), "", "", "", ""])
            .map_err(csv_write_error)?;
    }
    w.flush().map_err(|e| Error::io("writing table", e))
}

/// One bin of a per-class normalized histogram.
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramRow {
    pub task: Task,
    pub domain: String,
    pub model_id: String,
    pub method: String,
    pub class: Label,
    pub bin_left: f64,
    pub bin_right: f64,
    pub density: f64,
}

/// Jensen-Shannon distance between two methods' score distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct JsRow {
    pub task: Task,
    pub domain: String,
    pub model_id: String,
    pub method_a: String,
    pub method_b: String,
    /// A label, or `all` for both classes pooled.
    pub class: String,
    pub js_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DistributionReport {
    pub histograms: Vec<HistogramRow>,
    pub js: Vec<JsRow>,
}

/// Densities of `values` over `bins` equal-width bins spanning `[lo, hi]`;
/// a zero-width range is widened to one unit around its value.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<(f64, f64, f64)> {
    let (lo, hi) = if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    };
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in values {
        let idx = (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1);
        counts[idx] += 1;
    }
    let n = values.len() as f64;
    counts
        .iter()
        .enumerate()
        .map(|(k, &c)| {
            let left = lo + k as f64 * width;
            let right = if k + 1 == bins {
                hi
            } else {
                lo + (k + 1) as f64 * width
            };
            (left, right, c as f64 / (n * width))
        })
        .collect()
}

fn min_max(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

fn normalize(values: &[f64]) -> Vec<f64> {
    let (lo, hi) = min_max(values);
    if hi > lo {
        values.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; values.len()]
    }
}

/// Scores of one method in one group, split by class.
struct ClassScores {
    pos: Vec<f64>,
    neg: Vec<f64>,
}

impl ClassScores {
    fn all(&self) -> Vec<f64> {
        self.pos.iter().chain(&self.neg).copied().collect()
    }
}

fn class_histograms(
    group: &(Task, String, String),
    method: &str,
    scores: &ClassScores,
    bins: usize,
    out: &mut Vec<HistogramRow>,
) -> Result<()> {
    let (task, domain, model_id) = group;
    let (pos_label, neg_label) = task.labels();
    for (label, values) in [(pos_label, &scores.pos), (neg_label, &scores.neg)] {
        if values.is_empty() {
            return Err(Error::data(format!(
                "{method} on {task}/{domain}/{model_id}: class {label} is empty"
            )));
        }
    }
    let (lo, hi) = min_max(&scores.all());
    for (label, values) in [(pos_label, &scores.pos), (neg_label, &scores.neg)] {
        for (bin_left, bin_right, density) in histogram(values, lo, hi, bins) {
            out.push(HistogramRow {
                task: *task,
                domain: domain.clone(),
                model_id: model_id.clone(),
                method: method.to_string(),
                class: label,
                bin_left,
                bin_right,
                density,
            });
        }
    }
    Ok(())
}

/// Per-class histograms of every score file and JS distances between
/// method pairs of the same (task, domain, model_id) group. Each method's
/// scores are min-max normalized on their own before comparison, since
/// methods live on unrelated scales. `pairs` limits the comparison; by
/// default every pair in a group is compared.
pub fn distribution_report(
    files: &[PathBuf],
    hist_bins: usize,
    pairs: &[(String, String)],
) -> Result<DistributionReport> {
    if files.is_empty() {
        return Err(Error::config(
            "distribution report needs at least one score file",
        ));
    }
    if hist_bins < 2 {
        return Err(Error::config(format!(
            "histogram needs >= 2 bins, got {hist_bins}"
        )));
    }
    let mut groups: BTreeMap<(Task, String, String), BTreeMap<String, ClassScores>> =
        BTreeMap::new();
    for path in files {
        let file = ScoreFile::read(path)?;
        let h = &file.header;
        let mut cs = ClassScores {
            pos: Vec::new(),
            neg: Vec::new(),
        };
        for line in &file.lines {
            if let ScoreLine::Scored { label, score, .. } = line {
                match label.is_positive() {
                    Some(true) => cs.pos.push(*score),
                    Some(false) => cs.neg.push(*score),
                    None => {}
                }
            }
        }
        let group = groups
            .entry((h.task, h.domain.clone(), h.model_id.clone()))
            .or_default();
        if group.insert(h.spec()?.key(), cs).is_some() {
            return Err(Error::data(format!(
                "{} repeats a method already loaded",
                path.display()
            )));
        }
    }
    let mut report = DistributionReport::default();
    for (group, methods) in &groups {
        for (method, cs) in methods {
            class_histograms(group, method, cs, hist_bins, &mut report.histograms)?;
        }
        let chosen: Vec<(&String, &String)> = if pairs.is_empty() {
            let keys: Vec<&String> = methods.keys().collect();
            keys.iter()
                .enumerate()
                .flat_map(|(i, a)| keys[i + 1..].iter().map(move |b| (*a, *b)))
                .collect()
        } else {
            pairs.iter().map(|(a, b)| (a, b)).collect()
        };
        let (pos_label, neg_label) = group.0.labels();
        for (a, b) in chosen {
            let (sa, sb) = match (methods.get(a), methods.get(b)) {
                (Some(x), Some(y)) => (x, y),
                _ => {
                    return Err(Error::config(format!(
                        "pair {a}/{b} not available in group {}/{}/{}",
                        group.0, group.1, group.2
                    )))
                }
            };
            let (na, nb) = (normalize(&sa.all()), normalize(&sb.all()));
            let (pa, pb) = (sa.pos.len(), sb.pos.len());
            let classes: [(String, &[f64], &[f64]); 3] = [
                ("all".to_string(), &na[..], &nb[..]),
                (pos_label.to_string(), &na[..pa], &nb[..pb]),
                (neg_label.to_string(), &na[pa..], &nb[pb..]),
            ];
            for (class, xa, xb) in classes {
                report.js.push(JsRow {
                    task: group.0,
                    domain: group.1.clone(),
                    model_id: group.2.clone(),
                    method_a: a.clone(),
                    method_b: b.clone(),
                    class,
                    js_distance: js_distance(xa, xb, hist_bins)?,
                });
            }
        }
    }
    Ok(report)
}

/// Per-class histograms of the raw zlib entropy (compressed bits) of each
/// document's text, one group per input.
pub fn zlib_entropy_report(inputs: &[InputSpec], hist_bins: usize) -> Result<Vec<HistogramRow>> {
    if hist_bins < 2 {
        return Err(Error::config(format!(
            "histogram needs >= 2 bins, got {hist_bins}"
        )));
    }
    let mut out = Vec::new();
    for input in inputs {
        let mut reader = TraceReader::new(open_input(&input.path)?)?;
        let task = reader.task();
        let mut cs = ClassScores {
            pos: Vec::new(),
            neg: Vec::new(),
        };
        let mut first: Option<(String, String)> = None;
        for doc in reader.by_ref() {
            let doc = doc?;
            first.get_or_insert_with(|| (doc.domain.clone(), doc.model_id.clone()));
            let text = doc.text_bytes.as_deref().ok_or_else(|| {
                Error::data(format!("document {} has no {}", doc.doc_id, Field::TextB64))
            })?;
            let bits = zlib_entropy(text)?;
            match doc.label.is_positive() {
                Some(true) => cs.pos.push(bits),
                Some(false) => cs.neg.push(bits),
                None => {}
            }
        }
        let (domain, model_id) = first.ok_or_else(|| {
            Error::data(format!("{} contains no documents", input.path.display()))
        })?;
        let group = (
            task,
            input.domain.clone().unwrap_or(domain),
            input.model_id.clone().unwrap_or(model_id),
        );
        class_histograms(&group, "zlib_entropy", &cs, hist_bins, &mut out)?;
    }
    Ok(out)
}

pub fn write_histograms_csv<W: Write>(rows: &[HistogramRow], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record([
        "task",
        "domain",
        "model_id",
        "method",
        "class",
        "bin_left",
        "bin_right",
        "density",
    ])
    .map_err(csv_write_error)?;
    for r in rows {
        w.write_record([
            r.task.as_str(),
            &r.domain,
            &r.model_id,
            &r.method,
            r.class.as_str(),
            &r.bin_left.to_string(),
            &r.bin_right.to_string(),
            &r.density.to_string(),
        ])
        .map_err(csv_write_error)?;
    }
    w.flush().map_err(|e| Error::io("writing table", e))
}

pub fn write_js_csv<W: Write>(rows: &[JsRow], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record([
        "task",
        "domain",
        "model_id",
        "method_a",
        "method_b",
        "class",
        "js_distance",
    ])
    .map_err(csv_write_error)?;
    for r in rows {
        w.write_record([
            r.task.as_str(),
            &r.domain,
            &r.model_id,
            &r.method_a,
            &r.method_b,
            &r.class,
            &r.js_distance.to_string(),
        ])
        .map_err(csv_write_error)?;
    }
    w.flush().map_err(|e| Error::io("writing table", e))
}

/// Writes a table produced by one of the `write_*_csv` functions to `path`.
pub fn write_table(
    path: &Path,
    body: impl FnOnce(&mut BufWriter<File>) -> Result<()>,
) -> Result<()> {
    write_atomically(path, body)
}

/// Evaluates the score files of a run and writes `results.csv`.
pub fn evaluate_run(cfg: &RunConfig) -> Result<Vec<EvalResult>> {
    let results = run_eval(&cfg.score_paths(), cfg.bootstrap.as_ref(), cfg.seed)?;
    write_table(&cfg.results_path(), |w| write_results_csv(&results, w))?;
    Ok(results)
}

/// Writes `histograms.csv` and `js.csv` for the score files of a run.
pub fn report_run(cfg: &RunConfig) -> Result<DistributionReport> {
    let report = distribution_report(&cfg.score_paths(), cfg.hist_bins, &cfg.js_pairs)?;
    write_table(&cfg.histograms_path(), |w| {
        write_histograms_csv(&report.histograms, w)
    })?;
    write_table(&cfg.js_path(), |w| write_js_csv(&report.js, w))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutputs {
    pub summaries: Vec<ScoringSummary>,
    pub results: Vec<EvalResult>,
    /// Present when the run covers both tasks.
    pub transfer: Option<TransferReport>,
    pub report: DistributionReport,
}

/// Score, evaluate, compare across tasks and report distributions.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineOutputs> {
    let summaries = run_scoring(cfg)?;
    let results = evaluate_run(cfg)?;
    let has_both =
        results.iter().any(|r| r.task == Task::Mia) && results.iter().any(|r| r.task == Task::Mgtd);
    let transfer = if has_both {
        let report = transfer_from_results(&results, cfg.ranking)?;
        write_table(&cfg.transfer_path(), |w| write_transfer_csv(&report, w))?;
        Some(report)
    } else {
        None
    };
    let report = report_run(cfg)?;
    Ok(PipelineOutputs {
        summaries,
        results,
        transfer,
        report,
    })
}

/// Every violation found in a trace file.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub task: Task,
    pub n_docs: usize,
    /// (line number, doc_id, violation)
    pub violations: Vec<(usize, String, Violation)>,
}

/// Checks every document of a trace file against the invariants and the
/// fields in `required`. Malformed lines are still hard errors.
pub fn validate_file(path: &Path, required: &[Field]) -> Result<ValidationReport> {
    let mut reader = TraceReader::new(open_input(path)?)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?
        .skip_invariant_checks();
    let mut report = ValidationReport {
        task: reader.task(),
        n_docs: 0,
        violations: Vec::new(),
    };
    while let Some(doc) = reader.next() {
        let doc = doc.map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        report.n_docs += 1;
        let line = reader.line_no();
        for v in validate_trace(&doc, required) {
            report.violations.push((line, doc.doc_id.clone(), v));
        }
    }
    Ok(report)
}
