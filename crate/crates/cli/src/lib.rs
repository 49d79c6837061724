//! `lgdiff` subcommands. The binary is a thin wrapper over [`run`].

pub mod artifacts;

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use lgdiff_core::config::RunConfig;
use lgdiff_core::diffusion::estimate_marginals;
use lgdiff_core::fastattn::{bench_attention, write_bench_csv, AttentionKernel};
use lgdiff_core::metrics::{attention_asymmetry, combine, evaluate, mean_and_se, summarize, AsymmetryRecord, ClassSummary};
use lgdiff_core::molgraph::{synthetic_corpus, AtomVocab, Formula, MolecularGraph, MoleculeRecord};
use lgdiff_core::sampler::{generate_candidates, DenoiserPredictor, Spacing};
use lgdiff_core::tensor::checkpoint::Checkpoint;
use lgdiff_core::train::{fingerprint_cond, load_model, prepare_examples, Trainer};
use lgdiff_core::Error as CoreError;

use artifacts::{check_hash, ensure_parent, read_jsonl_with_header, read_molecules, record, write_header, Header};

#[derive(Debug, Parser)]
#[command(name = "lgdiff", version, about = "Line-graph discrete diffusion for molecular bonds")]
pub struct Cli {
    /// TOML run configuration; missing fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Print the effective configuration as TOML and exit.
    #[arg(long)]
    pub dump_config: bool,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus of valence-valid molecules.
    GenData(GenData),
    /// Train the denoiser on a corpus.
    Train(Train),
    /// Sample ranked candidates from a checkpoint.
    Sample(Sample),
    /// Score candidates against ground truth.
    Eval(Eval),
    /// Time the exact and linear attention kernels.
    BenchAttn(BenchAttn),
    /// Endpoint attention asymmetry of bonds under a trained model.
    AnalyzeAttn(AnalyzeAttn),
}

#[derive(Debug, Args)]
pub struct GenData {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub max_atoms: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Train {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out_checkpoint: PathBuf,
    /// Total epochs (overrides train.epochs).
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Sample {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Molecules whose formula and fingerprint define the queries.
    #[arg(long, conflicts_with = "formula")]
    pub target: Option<PathBuf>,
    /// A single formula such as C4NO, sampled with an all-zero condition.
    #[arg(long)]
    pub formula: Option<String>,
    /// Use only the first queries of the target file.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub n_candidates: Option<usize>,
    /// Denoiser evaluations per candidate (J); defaults to all T steps.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, value_parser = parse_spacing)]
    pub spacing: Option<Spacing>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub filter_valence: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Eval {
    #[arg(long)]
    pub candidates: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,10")]
    pub k: Vec<usize>,
    /// JSON report; a text table is written next to it with a `.txt` extension.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchAttn {
    #[arg(long, value_delimiter = ',', default_value = "10,20,40,60,80,100")]
    pub sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "exact,linear")]
    pub kernels: Vec<AttentionKernel>,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, default_value_t = 16)]
    pub d_head: usize,
    /// Random features for the linear kernel (defaults to model.n_features).
    #[arg(long)]
    pub features: Option<usize>,
    /// Sizes whose estimated footprint exceeds this are reported as failures.
    #[arg(long, default_value_t = 2048)]
    pub budget_mb: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnalyzeAttn {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub limit: Option<usize>,
    /// Timestep the clean molecules are presented at.
    #[arg(long, default_value_t = 1)]
    pub t: usize,
    /// Seed for the orientation of homonuclear bonds.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Per-bond JSONL; the summary goes to `<out>.summary.json`.
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_spacing(s: &str) -> Result<Spacing, String> {
    match s {
        "uniform" => Ok(Spacing::Uniform),
        "cosine" => Ok(Spacing::Cosine),
        _ => Err(format!("unknown spacing `{s}` (uniform, cosine)")),
    }
}

/// 2 for bad input or configuration, 3 for numerical aborts, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e {
                e if e.is_numerical() => 3,
                CoreError::Io(_) => 1,
                _ => 2,
            };
        }
        if cause.downcast_ref::<UsageError>().is_some() {
            return 2;
        }
    }
    1
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(UsageError(msg.into()))
}

pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?),
        None => Ok(RunConfig::default()),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let config = load_config(cli.config.as_deref())?;
    if cli.dump_config {
        print!("{}", config.to_toml());
        return Ok(());
    }
    let explicit = cli.config.is_some();
    match cli.command {
        None => Err(usage("no subcommand given (see --help)")),
        Some(Command::GenData(a)) => gen_data(config, a),
        Some(Command::Train(a)) => train(config, explicit, a),
        Some(Command::Sample(a)) => sample(config, explicit, a),
        Some(Command::Eval(a)) => eval(config, explicit, a),
        Some(Command::BenchAttn(a)) => bench_attn(config, a),
        Some(Command::AnalyzeAttn(a)) => analyze_attn(config, explicit, a),
    }
}

fn gen_data(mut config: RunConfig, a: GenData) -> Result<()> {
    if let Some(n) = a.n {
        config.data.n = n;
    }
    if let Some(m) = a.max_atoms {
        config.data.max_atoms = m;
    }
    if let Some(s) = a.seed {
        config.data.seed = s;
    }
    config.validate()?;
    let vocab = AtomVocab::default();
    let corpus = synthetic_corpus(config.data.n, config.data.max_atoms, config.data.seed, &vocab)?;
    for f in &corpus.failures {
        eprintln!("gen-data: seed {} formula {}: {}", f.seed, f.formula, f.error);
    }
    ensure_parent(&a.out)?;
    let mut w = BufWriter::new(File::create(&a.out)?);
    write_header(&mut w, &Header::new("corpus", &config))?;
    for g in &corpus.molecules {
        serde_json::to_writer(&mut w, &MoleculeRecord::from_graph(g, &vocab)?)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    record(&a.out, "corpus", &config.hash())?;
    eprintln!("gen-data: {} molecules, {} failed formulas -> {}", corpus.molecules.len(), corpus.failures.len(), a.out.display());
    Ok(())
}

fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    ck.save(&tmp)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn train(mut config: RunConfig, explicit: bool, a: Train) -> Result<()> {
    let vocab = AtomVocab::default();
    let (_, graphs) = read_molecules(&a.data, &vocab)?;
    let mut trainer = match &a.resume {
        Some(p) => {
            let ck = Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
            Trainer::resume(&ck, explicit.then_some(&config))?
        }
        None => {
            let m = estimate_marginals(&graphs, config.diffusion.marginal_pseudocount)?;
            Trainer::new(config.clone(), m)?
        }
    };
    if let Some(e) = a.epochs {
        trainer.config.train.epochs = e;
    }
    config = trainer.config.clone();
    let examples = prepare_examples(&graphs, &vocab, config.fingerprint.radius, config.fingerprint.bits)?;
    ensure_parent(&a.out_checkpoint)?;
    let curve = a.out_checkpoint.with_extension("loss.csv");
    let mut csv = if a.resume.is_some() && curve.exists() {
        OpenOptions::new().append(true).open(&curve)?
    } else {
        let mut f = File::create(&curve)?;
        writeln!(f, "# config_hash={}", config.hash())?;
        writeln!(f, "epoch,batch,loss")?;
        f
    };
    while trainer.epoch() < config.train.epochs {
        let stats = match trainer.train_epoch(&examples) {
            Ok(s) => s,
            Err(e) => {
                let note = if a.out_checkpoint.exists() {
                    format!("last good checkpoint: {}", a.out_checkpoint.display())
                } else {
                    "no checkpoint written".to_string()
                };
                return Err(anyhow::Error::new(e).context(format!("training aborted in epoch {}; {note}", trainer.epoch() + 1)));
            }
        };
        for (b, l) in stats.batch_losses.iter().enumerate() {
            writeln!(csv, "{},{},{l}", stats.epoch, b)?;
        }
        csv.flush()?;
        save_checkpoint(&trainer.checkpoint()?, &a.out_checkpoint)?;
        eprintln!("epoch {:>3}: mean loss {:.5} ({:.1}s)", stats.epoch, stats.mean_loss, stats.seconds);
    }
    if !a.out_checkpoint.exists() {
        save_checkpoint(&trainer.checkpoint()?, &a.out_checkpoint)?;
    }
    record(&a.out_checkpoint, "checkpoint", &config.hash())?;
    record(&curve, "loss-curve", &config.hash())?;
    Ok(())
}

/// One line of a candidates file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub query: usize,
    pub rank: usize,
    pub molecule: MoleculeRecord,
    pub score: f64,
    pub raw_score: f64,
    pub seed: u64,
    pub jumps: usize,
    pub evaluations: usize,
    pub elapsed_ms: f64,
}

fn sample(config: RunConfig, explicit: bool, a: Sample) -> Result<()> {
    let vocab = AtomVocab::default();
    let ck = Checkpoint::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let (net, tm, ck_config) = load_model(&ck)?;
    let mut sc = if explicit {
        check_hash("checkpoint", &ck.config_hash, &config.hash())?;
        config.sample.clone()
    } else {
        ck_config.sample.clone()
    };
    if let Some(n) = a.n_candidates {
        sc.n_candidates = n;
    }
    if a.steps.is_some() {
        sc.jumps = a.steps;
    }
    if let Some(s) = a.spacing {
        sc.spacing = s;
    }
    if let Some(s) = a.seed {
        sc.seed = s;
    }
    sc.filter_valence |= a.filter_valence;

    let fp = &ck_config.fingerprint;
    let queries: Vec<(Vec<usize>, Vec<f64>)> = match (&a.target, &a.formula) {
        (Some(path), None) => {
            let (_, graphs) = read_molecules(path, &vocab)?;
            graphs
                .iter()
                .take(a.limit.unwrap_or(usize::MAX))
                .map(|g| Ok((g.atom_types().to_vec(), fingerprint_cond(g, &vocab, fp.radius, fp.bits)?)))
                .collect::<Result<_>>()?
        }
        (None, Some(f)) => vec![(Formula::parse(f, &vocab)?.atom_types(), vec![0.0; fp.bits])],
        _ => return Err(usage("sample needs exactly one of --target or --formula")),
    };
    let jumps = sc.jumps.unwrap_or(tm.steps());
    ensure_parent(&a.out)?;
    let mut w = BufWriter::new(File::create(&a.out)?);
    let mut header_config = ck_config.clone();
    header_config.sample = sc.clone();
    write_header(&mut w, &Header::new("candidates", &header_config))?;
    let start = Instant::now();
    for (q, (types, cond)) in queries.iter().enumerate() {
        let predictor = DenoiserPredictor::new(&net, cond, tm.steps());
        let qc = lgdiff_core::sampler::SampleConfig { seed: combine(sc.seed, q as u64), ..sc.clone() };
        let cands = generate_candidates(&tm, &predictor, types, &qc, &vocab)?;
        for (rank, c) in cands.iter().enumerate() {
            let rec = CandidateRecord {
                query: q,
                rank: rank + 1,
                molecule: MoleculeRecord::from_graph(&c.graph, &vocab)?,
                score: c.score,
                raw_score: c.raw_score,
                seed: c.seed,
                jumps,
                evaluations: c.evaluations,
                elapsed_ms: c.elapsed_ms,
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    record(&a.out, "candidates", &ck.config_hash)?;
    eprintln!(
        "sample: {} queries x {} candidates, J = {jumps}, {:.1}s",
        queries.len(),
        sc.n_candidates,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

pub fn read_candidates(path: &Path, vocab: &AtomVocab) -> Result<(Option<Header>, Vec<CandidateRecord>)> {
    let (header, lines) = read_jsonl_with_header(path)?;
    let recs = lines
        .iter()
        .enumerate()
        .map(|(i, l)| serde_json::from_str::<CandidateRecord>(l).with_context(|| format!("{} record {}", path.display(), i + 1)))
        .collect::<Result<Vec<_>>>()?;
    for r in &recs {
        r.molecule.to_graph(vocab)?;
    }
    Ok((header, recs))
}

fn eval(config: RunConfig, explicit: bool, a: Eval) -> Result<()> {
    let vocab = AtomVocab::default();
    let (header, recs) = read_candidates(&a.candidates, &vocab)?;
    let (_, truths) = read_molecules(&a.truth, &vocab)?;
    let run_config = match header {
        Some(h) => {
            if explicit {
                check_hash("candidates", &h.config_hash, &config.hash())?;
            }
            h.config
        }
        None => config,
    };
    let mut lists: Vec<Vec<(usize, MolecularGraph)>> = vec![Vec::new(); truths.len()];
    for r in recs {
        let slot = lists
            .get_mut(r.query)
            .ok_or_else(|| usage(format!("candidate for query {} but only {} truths", r.query, truths.len())))?;
        slot.push((r.rank, r.molecule.to_graph(&vocab)?));
    }
    let candidates: Vec<Vec<MolecularGraph>> = lists
        .into_iter()
        .map(|mut l| {
            l.sort_by_key(|(rank, _)| *rank);
            l.into_iter().map(|(_, g)| g).collect()
        })
        .collect();
    let report = evaluate(&truths, &candidates, &a.k, &vocab)?;
    ensure_parent(&a.out)?;
    let json = serde_json::json!({ "header": Header::new("eval-report", &run_config), "report": report });
    fs::write(&a.out, serde_json::to_string_pretty(&json)? + "\n")?;
    let table = report.table();
    let txt = a.out.with_extension("txt");
    fs::write(&txt, format!("# config_hash={}\n{table}", run_config.hash()))?;
    record(&a.out, "eval-report", &run_config.hash())?;
    record(&txt, "eval-table", &run_config.hash())?;
    if !report.empty_queries.is_empty() {
        eprintln!("eval: queries without candidates: {:?}", report.empty_queries);
    }
    if report.mces_skipped > 0 {
        eprintln!("eval: {} MCES comparisons over the size cap were skipped", report.mces_skipped);
    }
    print!("{table}");
    Ok(())
}

fn bench_attn(config: RunConfig, a: BenchAttn) -> Result<()> {
    let features = a.features.unwrap_or(config.model.n_features);
    let rows = bench_attention(&a.sizes, &a.kernels, a.repeats, a.d_head, features, a.budget_mb << 20)?;
    ensure_parent(&a.out)?;
    write_bench_csv(BufWriter::new(File::create(&a.out)?), &rows)?;
    record(&a.out, "attention-bench", &config.hash())?;
    for r in &rows {
        match (&r.median_ms, &r.error) {
            (Some(ms), _) => eprintln!("{:>6} N={:<4} M={:<6} {ms:>10.3} ms {:>12} B", r.kernel, r.n_atoms, r.m_nodes, r.peak_bytes.unwrap_or(0)),
            (None, Some(e)) => eprintln!("{:>6} N={:<4} M={:<6} failed: {e}", r.kernel, r.n_atoms, r.m_nodes),
            (None, None) => {}
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct BondRecord<'a> {
    molecule: usize,
    #[serde(flatten)]
    record: &'a AsymmetryRecord,
}

#[derive(Debug, Serialize)]
pub struct AsymmetrySummary {
    pub by_class: Vec<ClassSummary>,
    pub homonuclear: (usize, f64, f64),
    pub heteronuclear: (usize, f64, f64),
}

fn analyze_attn(config: RunConfig, explicit: bool, a: AnalyzeAttn) -> Result<()> {
    let vocab = AtomVocab::default();
    let ck = Checkpoint::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    if explicit {
        check_hash("checkpoint", &ck.config_hash, &config.hash())?;
    }
    let (net, tm, ck_config) = load_model(&ck)?;
    if a.t == 0 || a.t > tm.steps() {
        bail!(usage(format!("--t must be in 1..={}", tm.steps())));
    }
    let (_, graphs) = read_molecules(&a.data, &vocab)?;
    let mut all = Vec::new();
    ensure_parent(&a.out)?;
    let mut w = BufWriter::new(File::create(&a.out)?);
    write_header(&mut w, &Header::new("asymmetry", &ck_config))?;
    for (i, g) in graphs.iter().take(a.limit.unwrap_or(usize::MAX)).enumerate() {
        if g.n_atoms() < 2 {
            continue;
        }
        for r in attention_asymmetry(&net, g, &vocab, a.t, tm.steps(), combine(a.seed, i as u64))? {
            serde_json::to_writer(&mut w, &BondRecord { molecule: i, record: &r })?;
            w.write_all(b"\n")?;
            all.push(r);
        }
    }
    w.flush()?;
    let group = |homo: bool| {
        let xs: Vec<f64> = all.iter().filter(|r| r.homonuclear == homo).map(|r| r.log2_ratio).collect();
        let (m, se) = mean_and_se(&xs);
        (xs.len(), m, se)
    };
    let summary = AsymmetrySummary { by_class: summarize(&all), homonuclear: group(true), heteronuclear: group(false) };
    let summary_path = a.out.with_extension("summary.json");
    let json = serde_json::json!({ "header": Header::new("asymmetry-summary", &ck_config), "summary": summary });
    fs::write(&summary_path, serde_json::to_string_pretty(&json)? + "\n")?;
    record(&a.out, "asymmetry", &ck.config_hash)?;
    record(&summary_path, "asymmetry-summary", &ck.config_hash)?;
    for c in &summary.by_class {
        eprintln!("class {}: n = {:<5} mean log2 r = {:+.4} (se {:.4})", c.bond_class, c.count, c.mean, c.std_err);
    }
    Ok(())
}
