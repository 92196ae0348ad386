use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use vismem::analysis::{self, CalibrateOptions};
use vismem::classify::{self, EvalOptions, Scheme, VoteConfig, DEFAULT_ALPHA, DEFAULT_TAU, DEFAULT_XI};
use vismem::fixture::{self, FixtureSpec};
use vismem::index::{AnnIndex, INDEX_FILE};
use vismem::pack::{self, Pack};
use vismem::prune::{self, BlameRule, CompareOptions, PruneConfig, ReliabilityReport};
use vismem::taxonomy::{self, EmptyPolicy, GranularityConfig, TaxonomyIndex, TaxonomyTree};
use vismem::{normalize, MemoryEntry, QuerySet, Retriever, VisualMemory};

mod config;
mod output;

use output::{f4, Format, Report};

const RELIABILITY_FILE: &str = "reliability.jsonl";

#[derive(Parser, Serialize)]
#[command(name = "vismem", version, about = "Retrieval-based visual memory classification", args_override_self = true)]
pub struct Cli {
    /// Output mode for results on standard output.
    #[arg(long, global = true, value_enum, default_value = "table")]
    format: Format,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "VISMEM_THREADS")]
    threads: Option<usize>,
    /// TOML file with flag defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Serialize)]
#[serde(tag = "subcommand", rename_all = "kebab-case")]
enum Command {
    /// Build a memory from an embedding pack.
    Build {
        #[arg(long)]
        pack: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Add the rows of an embedding pack to a memory.
    Insert {
        #[command(flatten)]
        memory: MemoryArg,
        #[arg(long)]
        pack: PathBuf,
        /// Destination (defaults to updating the memory in place).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Delete entries by id (one id per line).
    Remove {
        #[command(flatten)]
        memory: MemoryArg,
        #[arg(long)]
        ids: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Keep a seeded random subset of each class.
    Subsample {
        #[command(flatten)]
        memory: MemoryArg,
        #[arg(long)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the partitioned approximate index.
    Index {
        #[command(flatten)]
        memory: MemoryArg,
        /// Partition count (defaults to ceil(sqrt(N))).
        #[arg(long)]
        partitions: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Index file (defaults to index.bin inside the memory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Classify queries and list their neighbors.
    Query {
        #[command(flatten)]
        memory: MemoryArg,
        #[arg(long)]
        queries: PathBuf,
        #[command(flatten)]
        vote: VoteArgs,
        #[command(flatten)]
        retrieval: RetrievalArgs,
        #[command(flatten)]
        eval: EvalFlags,
        /// Neighbors listed per query.
        #[arg(long, default_value_t = 5)]
        show: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Accuracy of one voting configuration for every k up to --k.
    Eval {
        #[command(flatten)]
        memory: MemoryArg,
        #[arg(long)]
        queries: PathBuf,
        #[command(flatten)]
        vote: VoteArgs,
        #[command(flatten)]
        retrieval: RetrievalArgs,
        #[command(flatten)]
        eval: EvalFlags,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Best accuracy over k for a grid of scheme hyperparameters.
    Sweep {
        #[command(flatten)]
        memory: MemoryArg,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long, value_delimiter = ',', action = ArgAction::Set, value_parser = parse_scheme, default_value = "plurality,distance,softmax,rank")]
        schemes: Vec<Scheme>,
        /// Hyperparameter values (defaults depend on the scheme).
        #[arg(long, value_delimiter = ',', action = ArgAction::Set)]
        values: Option<Vec<f64>>,
        #[arg(long, default_value_t = 100)]
        k_max: usize,
        #[command(flatten)]
        retrieval: RetrievalArgs,
        #[command(flatten)]
        eval: EvalFlags,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Count wrong votes per entry by self-querying the memory.
    PruneEstimate {
        #[command(flatten)]
        memory: MemoryArg,
        #[arg(long, default_value_t = prune::DEFAULT_K_RETRIEVE)]
        k_retrieve: usize,
        #[arg(long, value_parser = parse_scheme, default_value = "rank")]
        scheme: Scheme,
        #[arg(long, default_value_t = DEFAULT_ALPHA)]
        alpha: f64,
        #[arg(long, default_value_t = DEFAULT_TAU)]
        tau: f64,
        #[arg(long, default_value_t = DEFAULT_XI)]
        xi: f64,
        #[arg(long, value_enum, default_value = "wrong-label")]
        blame: BlameArg,
        /// Report file (defaults to reliability.jsonl inside the memory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Apply a reliability report: hard removal, soft down-weighting, or a
    /// comparison of both against no pruning.
    Prune {
        #[command(flatten)]
        memory: MemoryArg,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: PruneMode,
        #[arg(long, default_value_t = prune::DEFAULT_HARD_THRESHOLD)]
        threshold: u32,
        #[arg(long, default_value_t = prune::DEFAULT_C)]
        c: f64,
        #[arg(long, default_value_t = prune::DEFAULT_D)]
        d: f64,
        /// Query pack (compare mode).
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', action = ArgAction::Set, value_parser = parse_scheme, default_value = "plurality,distance,softmax,rank")]
        schemes: Vec<Scheme>,
        #[arg(long, default_value_t = 100)]
        k_max: usize,
        #[arg(long)]
        exclude_self: bool,
        /// Pruned memory (hard/soft) or results file (compare).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Hierarchical prediction by greedy taxonomy descent.
    Hierarchy {
        #[command(flatten)]
        memory: MemoryArg,
        #[arg(long)]
        taxonomy: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Skip children without examples instead of failing.
        #[arg(long)]
        skip_empty: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-level accuracy as exemplars of held-out leaves are added back.
    Granularity {
        #[command(flatten)]
        memory: MemoryArg,
        #[arg(long)]
        taxonomy: PathBuf,
        /// Target leaf (name or full path); repeatable.
        #[arg(long)]
        target: Vec<String>,
        /// Number of seeded random target leaves, when no --target is given.
        #[arg(long, default_value_t = 1)]
        targets: usize,
        #[arg(long, value_delimiter = ',', action = ArgAction::Set, default_value = "0,1,5,10,25,50")]
        ladder: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        holdouts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Accuracy of the i-th neighbor alone, with a logarithmic fit.
    Reliability {
        #[command(flatten)]
        memory: MemoryArg,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long, default_value_t = 100)]
        k_max: usize,
        #[arg(long)]
        exclude_self: bool,
        #[command(flatten)]
        retrieval: RetrievalArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Probability that the true label is among the first k neighbors.
    Hitrate {
        #[command(flatten)]
        memory: MemoryArg,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long, default_value_t = 100)]
        k_max: usize,
        #[arg(long)]
        exclude_self: bool,
        #[command(flatten)]
        retrieval: RetrievalArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Accuracy binned by plurality count among the first 100 neighbors.
    Calibrate {
        #[command(flatten)]
        memory: MemoryArg,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long, default_value_t = 10)]
        bin_width: u32,
        #[arg(long, value_parser = parse_scheme, default_value = "plurality")]
        scheme: Scheme,
        #[arg(long, default_value_t = 100)]
        k: usize,
        #[arg(long)]
        exclude_self: bool,
        #[command(flatten)]
        retrieval: RetrievalArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Log-log least-squares fit of error rate against memory size.
    FitScaling {
        /// Text file of "size error" pairs, one per line.
        #[arg(long, conflicts_with_all = ["memory", "queries"])]
        points: Option<PathBuf>,
        /// Memory to subsample (when no --points file is given).
        #[arg(long)]
        memory: Option<PathBuf>,
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', action = ArgAction::Set, default_value = "100,1000,10000,100000")]
        sizes: Vec<usize>,
        #[command(flatten)]
        vote: VoteArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Neighbor distance statistics per query pack.
    OodStats {
        #[command(flatten)]
        memory: MemoryArg,
        /// NAME=DIR; repeatable.
        #[arg(long = "pack", required = true)]
        packs: Vec<String>,
        #[arg(long, default_value_t = 100)]
        k: usize,
        #[command(flatten)]
        retrieval: RetrievalArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Search again with the nearest neighbor subtracted from each query.
    Residual {
        #[command(flatten)]
        memory: MemoryArg,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a seeded synthetic fixture (memory pack, queries, noise mask,
    /// taxonomy).
    GenFixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 100)]
        per_class: usize,
        #[arg(long, default_value_t = 64)]
        dims: usize,
        #[arg(long, default_value_t = 0.05)]
        spread: f64,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, requires = "fanout")]
        depth: Option<usize>,
        #[arg(long, requires = "depth")]
        fanout: Option<usize>,
        #[arg(long, default_value_t = 0)]
        queries_per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check an embedding pack's structure.
    Validate {
        #[arg(long)]
        pack: PathBuf,
    },
}

#[derive(Args, Serialize)]
struct MemoryArg {
    /// Memory directory.
    #[arg(long = "memory")]
    memory: PathBuf,
}

#[derive(Args, Serialize, Clone, Copy)]
struct VoteArgs {
    #[arg(long, value_parser = parse_scheme, default_value = "rank")]
    scheme: Scheme,
    #[arg(long, default_value_t = 100)]
    k: usize,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
    #[arg(long, default_value_t = DEFAULT_XI)]
    xi: f64,
}

impl VoteArgs {
    fn config(&self) -> VoteConfig {
        VoteConfig {
            scheme: self.scheme,
            k: self.k,
            alpha: self.alpha,
            tau: self.tau,
            xi: self.xi,
        }
    }
}

#[derive(Args, Serialize)]
struct RetrievalArgs {
    /// Use the partitioned approximate index.
    #[arg(long)]
    ann: bool,
    /// Index file (defaults to index.bin inside the memory; built on the fly
    /// when absent).
    #[arg(long)]
    index: Option<PathBuf>,
    /// Partitions probed per query (defaults to ceil(0.1 P)).
    #[arg(long)]
    probes: Option<usize>,
    /// Seed for an index built on the fly.
    #[arg(long = "index-seed", default_value_t = 0)]
    index_seed: u64,
}

#[derive(Args, Serialize)]
struct EvalFlags {
    /// Drop neighbors whose id equals the query id.
    #[arg(long)]
    exclude_self: bool,
    /// Ignore per-entry reliability factors.
    #[arg(long)]
    no_reliability: bool,
}

impl EvalFlags {
    fn options(&self) -> EvalOptions {
        EvalOptions {
            exclude_self: self.exclude_self,
            use_reliability: !self.no_reliability,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum BlameArg {
    WrongLabel,
    PredictedLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum PruneMode {
    Hard,
    Soft,
    Compare,
}

fn parse_scheme(s: &str) -> std::result::Result<Scheme, String> {
    s.parse().map_err(|e: vismem::Error| e.to_string())
}

fn main() -> ExitCode {
    let args: Vec<_> = std::env::args_os().collect();
    let args = match config::expand(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker threads")?;
    }
    eprintln!("config: {}", serde_json::to_string(cli)?);
    let fmt = cli.format;
    match &cli.command {
        Command::Build { pack, out } => {
            let mem = VisualMemory::build_from_dir(pack).with_context(|| format!("building from {}", pack.display()))?;
            mem.save(out)?;
            summary(&mem, fmt)
        }
        Command::Insert { memory, pack, out } => {
            let mut mem = load(&memory.memory)?;
            let pack = Pack::read(pack)?;
            let mut entries = Vec::with_capacity(pack.count());
            for (row, rec) in pack.meta.iter().enumerate() {
                let v = normalize(pack.row(row)).with_context(|| format!("pack row {row}"))?;
                let mut e = MemoryEntry::new(rec.id, v, rec.label_name.clone());
                e.taxonomy_path = rec.taxonomy_path.clone();
                e.wrong_votes = rec.v.unwrap_or(0);
                e.gamma = rec.gamma.unwrap_or(1.0);
                entries.push(e);
            }
            mem.insert(entries)?;
            mem.save(out.as_ref().unwrap_or(&memory.memory))?;
            summary(&mem, fmt)
        }
        Command::Remove { memory, ids, out } => {
            let mut mem = load(&memory.memory)?;
            let ids = read_ids(ids)?;
            mem.remove(&ids)?;
            mem.save(out.as_ref().unwrap_or(&memory.memory))?;
            summary(&mem, fmt)
        }
        Command::Subsample { memory, per_class, seed, out } => {
            let mem = load(&memory.memory)?.subsample(*per_class, *seed)?;
            mem.save(out)?;
            summary(&mem, fmt)
        }
        Command::Index { memory, partitions, seed, out } => {
            let mem = load(&memory.memory)?;
            let index = AnnIndex::build(&mem, *partitions, *seed)?;
            let path = out.clone().unwrap_or_else(|| memory.memory.join(INDEX_FILE));
            index.save(&path)?;
            let mut r = Report::new(["partitions", "default_probes", "entries", "generation"]);
            r.push(
                vec![
                    index.partitions().to_string(),
                    index.default_probes().to_string(),
                    mem.len().to_string(),
                    index.generation().to_string(),
                ],
                json!({"partitions": index.partitions(), "default_probes": index.default_probes(), "entries": mem.len(), "generation": index.generation(), "path": path}),
            );
            r.emit(fmt)
        }
        Command::Query { memory, queries, vote, retrieval, eval, show, out } => {
            let mem = load(&memory.memory)?;
            let qs = QuerySet::read(queries)?;
            let index = ann_index(&mem, &memory.memory, retrieval)?;
            let retriever = retriever(&mem, index.as_ref(), retrieval);
            let config = vote.config();
            config.validate()?;
            let sets = retriever.search_excluding(&qs, config.k, eval.exclude_self)?;
            let rel: Option<&dyn classify::Reliability> = (!eval.no_reliability).then_some(&mem as &dyn classify::Reliability);
            let names = mem.labels();
            let mut r = Report::new(["query", "label", "predicted", "confidence", "neighbors"]);
            for (q, set) in sets.iter().enumerate() {
                let p = classify::classify(set, &config, rel)?;
                let shown: Vec<_> = set.items.iter().take(*show).collect();
                r.push(
                    vec![
                        qs.id(q).to_string(),
                        qs.label(q).to_owned(),
                        names.name(p.label).to_owned(),
                        p.confidence.to_string(),
                        shown.iter().map(|n| n.id.to_string()).collect::<Vec<_>>().join(","),
                    ],
                    json!({
                        "query": qs.id(q),
                        "label": qs.label(q),
                        "predicted": names.name(p.label),
                        "confidence": p.confidence,
                        "neighbors": shown.iter().map(|n| json!({"id": n.id, "label": names.name(n.label), "distance": n.distance.value(), "rank": n.rank})).collect::<Vec<_>>(),
                    }),
                );
            }
            r.finish(fmt, out.as_deref())
        }
        Command::Eval { memory, queries, vote, retrieval, eval, out } => {
            let mem = load(&memory.memory)?;
            let qs = QuerySet::read(queries)?;
            let index = ann_index(&mem, &memory.memory, retrieval)?;
            let config = vote.config();
            let curve = classify::evaluate(retriever(&mem, index.as_ref(), retrieval), &qs, &config, eval.options())?;
            let (best_k, best) = curve.best();
            let mut r = Report::new(["k", "accuracy"]).titled(format!(
                "scheme={} k={} queries={} accuracy={} best_k={} best_accuracy={}",
                config.scheme,
                config.k,
                qs.len(),
                f4(curve.at(config.k)),
                best_k,
                f4(best)
            ));
            let mut shown: Vec<usize> = [1, 2, 5, 10, 20, 50, 100, 200, 500, 1000].into_iter().filter(|&k| k < config.k).collect();
            shown.push(config.k);
            for k in 1..=config.k {
                let record = json!({"scheme": config.scheme, "k": k, "accuracy": curve.at(k), "queries": qs.len()});
                if shown.contains(&k) {
                    r.push(vec![k.to_string(), f4(curve.at(k))], record);
                } else {
                    r.records.push(record);
                }
            }
            r.finish(fmt, out.as_deref())
        }
        Command::Sweep { memory, queries, schemes, values, k_max, retrieval, eval, out } => {
            let mem = load(&memory.memory)?;
            let qs = QuerySet::read(queries)?;
            let index = ann_index(&mem, &memory.memory, retrieval)?;
            let ret = retriever(&mem, index.as_ref(), retrieval);
            let mut r = Report::new(["scheme", "parameter", "value", "best_k", "best_accuracy"]);
            for &scheme in schemes {
                let grid = match (scheme.hyperparameter(), values) {
                    (None, _) => vec![0.0],
                    (Some(_), Some(v)) => v.clone(),
                    (Some(_), None) => default_grid(scheme),
                };
                let base = VoteConfig::new(scheme, *k_max);
                for row in classify::sweep(ret, &qs, &base, &grid, eval.options())? {
                    let param = scheme.hyperparameter();
                    let value = param.map(|_| row.value);
                    r.push(
                        vec![
                            scheme.to_string(),
                            param.unwrap_or("-").to_owned(),
                            value.map_or("-".into(), |v| v.to_string()),
                            row.best_k.to_string(),
                            f4(row.best_accuracy),
                        ],
                        json!({"scheme": scheme, "parameter": param, "value": value, "best_k": row.best_k, "best_accuracy": row.best_accuracy}),
                    );
                }
            }
            r.finish(fmt, out.as_deref())
        }
        Command::PruneEstimate { memory, k_retrieve, scheme, alpha, tau, xi, blame, out } => {
            let mem = load(&memory.memory)?;
            let config = PruneConfig {
                k_retrieve: *k_retrieve,
                vote: VoteConfig {
                    scheme: *scheme,
                    k: *k_retrieve,
                    alpha: *alpha,
                    tau: *tau,
                    xi: *xi,
                },
                blame: match blame {
                    BlameArg::WrongLabel => BlameRule::WrongLabel,
                    BlameArg::PredictedLabel => BlameRule::PredictedLabel,
                },
            };
            let report = prune::estimate_reliability(&mem, &config)?;
            let path = out.clone().unwrap_or_else(|| memory.memory.join(RELIABILITY_FILE));
            report.save(&path)?;
            let flagged = report.flagged().count();
            let at_threshold = report.votes.iter().filter(|(_, v)| *v >= prune::DEFAULT_HARD_THRESHOLD).count();
            let mut r = Report::new(["entries", "misclassified", "flagged", "total_votes", "max_v", "v>=128"]);
            let max_v = report.votes.iter().map(|(_, v)| *v).max().unwrap_or(0);
            r.push(
                vec![
                    report.votes.len().to_string(),
                    report.header.misclassified.to_string(),
                    flagged.to_string(),
                    report.total_votes().to_string(),
                    max_v.to_string(),
                    at_threshold.to_string(),
                ],
                json!({"entries": report.votes.len(), "misclassified": report.header.misclassified, "flagged": flagged, "total_votes": report.total_votes(), "max_v": max_v, "at_default_threshold": at_threshold, "report": path}),
            );
            r.emit(fmt)
        }
        Command::Prune { memory, report, mode, threshold, c, d, queries, schemes, k_max, exclude_self, out } => {
            let mut mem = load(&memory.memory)?;
            let report_path = report.clone().unwrap_or_else(|| memory.memory.join(RELIABILITY_FILE));
            let rep = ReliabilityReport::load(&report_path)?;
            match mode {
                PruneMode::Hard | PruneMode::Soft => {
                    let Some(out) = out else { bail!("--out is required for hard and soft pruning") };
                    if *mode == PruneMode::Hard {
                        let removed = prune::hard_prune(&mut mem, &rep, *threshold)?;
                        eprintln!("removed {} entries", removed.len());
                    } else {
                        prune::soft_prune(&mut mem, &rep, *c, *d)?;
                    }
                    mem.save(out)?;
                    summary(&mem, fmt)
                }
                PruneMode::Compare => {
                    let Some(queries) = queries else { bail!("--queries is required for compare mode") };
                    let qs = QuerySet::read(queries)?;
                    let rows = prune::compare_pruning(
                        &mem,
                        &qs,
                        schemes,
                        &VoteConfig::new(Scheme::Rank, *k_max),
                        &rep,
                        CompareOptions {
                            k_max: *k_max,
                            threshold: *threshold,
                            c: *c,
                            d: *d,
                            exclude_self: *exclude_self,
                        },
                    )?;
                    let mut r = Report::new(["pruning", "scheme", "entries", "best_k", "best_accuracy"]);
                    for row in rows {
                        r.push(
                            vec![
                                serde_json::to_value(row.variant)?.as_str().unwrap_or_default().to_owned(),
                                row.scheme.to_string(),
                                row.memory_size.to_string(),
                                row.best_k.to_string(),
                                f4(row.best_accuracy),
                            ],
                            &row,
                        );
                    }
                    r.finish(fmt, out.as_deref())
                }
            }
        }
        Command::Hierarchy { memory, taxonomy, queries, seed, skip_empty, out } => {
            let mem = load(&memory.memory)?;
            let tree = TaxonomyTree::read(taxonomy)?;
            let qs = QuerySet::read(queries)?;
            let index = TaxonomyIndex::new(&tree, &mem, *seed)?;
            let policy = if *skip_empty { EmptyPolicy::Skip } else { EmptyPolicy::Strict };
            let paths = index.predict_all(&qs, policy)?;
            let depth = tree.depth();
            let mut correct = vec![0usize; depth];
            let mut labeled = 0usize;
            let mut r = Report::new(["query", "truth", "predicted"]);
            for (q, path) in paths.iter().enumerate() {
                let truth = match qs.taxonomy_path(q) {
                    Some(p) => tree.resolve(p),
                    None => tree.leaf_by_name(qs.label(q)),
                };
                let truth_path = truth.map(|t| tree.path_to(t));
                if let Some(tp) = &truth_path {
                    labeled += 1;
                    for l in 1..=depth {
                        correct[l - 1] += usize::from(tp.get(l) == path.get(l));
                    }
                }
                let predicted = tree.path_names(path).join("/");
                let truth_name = truth_path.as_ref().map(|tp| tree.path_names(tp).join("/"));
                r.push(
                    vec![qs.id(q).to_string(), truth_name.clone().unwrap_or_else(|| "-".into()), predicted.clone()],
                    json!({"query": qs.id(q), "truth": truth_name, "predicted": predicted}),
                );
            }
            if labeled > 0 {
                let acc: Vec<String> = correct.iter().map(|&c| f4(c as f64 / labeled as f64)).collect();
                r.title = Some(format!("queries={} per-level accuracy (coarse to fine): {}", qs.len(), acc.join(" ")));
            }
            r.finish(fmt, out.as_deref())
        }
        Command::Granularity { memory, taxonomy, target, targets, ladder, holdouts, seed, out } => {
            let mem = load(&memory.memory)?;
            let tree = TaxonomyTree::read(taxonomy)?;
            let leaves = if target.is_empty() {
                taxonomy::sample_leaves(&tree, *targets, *seed)
            } else {
                target
                    .iter()
                    .map(|t| tree.find_leaf(t).with_context(|| format!("no unique leaf '{t}' in the taxonomy")))
                    .collect::<Result<_>>()?
            };
            let config = GranularityConfig {
                ladder: ladder.clone(),
                holdouts: *holdouts,
                seed: *seed,
            };
            let report = taxonomy::granularity_over_targets(&mem, &tree, &leaves, &config)?;
            let depth = tree.depth();
            let mut headers = vec!["exemplars".to_owned()];
            headers.extend((1..=depth).map(|l| format!("level{l}")));
            headers.extend((1..=depth).map(|l| format!("baseline{l}")));
            let mut r = Report::new(headers).titled(format!(
                "targets={} (seeded subset of {} leaves) holdout queries={}",
                report.targets.len(),
                tree.leaves().count(),
                report.queries
            ));
            for step in &report.steps {
                let mut row = vec![step.exemplars.to_string()];
                row.extend(step.accuracy.iter().map(|&a| f4(a)));
                row.extend(step.baseline.iter().map(|&a| f4(a)));
                r.push(row, step);
            }
            r.finish(fmt, out.as_deref())
        }
        Command::Reliability { memory, queries, k_max, exclude_self, retrieval, out } => {
            let mem = load(&memory.memory)?;
            let qs = QuerySet::read(queries)?;
            let index = ann_index(&mem, &memory.memory, retrieval)?;
            let curve = analysis::reliability_at_k(retriever(&mem, index.as_ref(), retrieval), &qs, *k_max, *exclude_self)?;
            let mut r = Report::new(["index", "accuracy", "fit"]).titled(format!(
                "fit: accuracy = {:.6} + {:.6} ln(i + 1), rss = {:.3e}",
                curve.fit.intercept, curve.fit.slope, curve.fit.rss
            ));
            for (i, &a) in curve.accuracy.iter().enumerate() {
                let fit = curve.fit.predict(i as f64);
                r.push(vec![i.to_string(), f4(a), f4(fit)], json!({"index": i, "accuracy": a, "fit": fit}));
            }
            r.finish(fmt, out.as_deref())
        }
        Command::Hitrate { memory, queries, k_max, exclude_self, retrieval, out } => {
            let mem = load(&memory.memory)?;
            let qs = QuerySet::read(queries)?;
            let index = ann_index(&mem, &memory.memory, retrieval)?;
            let rates = analysis::hit_rate(retriever(&mem, index.as_ref(), retrieval), &qs, *k_max, *exclude_self)?;
            let mut r = Report::new(["k", "hit_rate"]);
            for (i, &h) in rates.iter().enumerate() {
                r.push(vec![(i + 1).to_string(), f4(h)], json!({"k": i + 1, "hit_rate": h}));
            }
            r.finish(fmt, out.as_deref())
        }
        Command::Calibrate { memory, queries, bin_width, scheme, k, exclude_self, retrieval, out } => {
            let mem = load(&memory.memory)?;
            let qs = QuerySet::read(queries)?;
            let index = ann_index(&mem, &memory.memory, retrieval)?;
            let table = analysis::calibrate(
                retriever(&mem, index.as_ref(), retrieval),
                &qs,
                CalibrateOptions {
                    bin_width: *bin_width,
                    prediction: VoteConfig::new(*scheme, *k),
                    exclude_self: *exclude_self,
                },
            )?;
            let mut r = Report::new(["confidence", "queries", "correct", "accuracy"])
                .titled(format!("prediction: {} at k = {}", table.prediction.scheme, table.prediction.k));
            for b in &table.bins {
                r.push(
                    vec![
                        format!("{}-{}", b.lo, b.hi),
                        b.count.to_string(),
                        b.correct.to_string(),
                        b.accuracy.map_or("-".into(), f4),
                    ],
                    b,
                );
            }
            r.finish(fmt, out.as_deref())
        }
        Command::FitScaling { points, memory, queries, sizes, vote, seed, out } => {
            let pts: Vec<(f64, f64)> = match (points, memory, queries) {
                (Some(p), _, _) => read_points(p)?,
                (None, Some(m), Some(q)) => {
                    let mem = load(m)?;
                    let qs = QuerySet::read(q)?;
                    let sweep = analysis::scaling_sweep(&mem, &qs, sizes, &vote.config(), *seed)?;
                    for p in &sweep {
                        eprintln!("size {} ({} per class): error {:.4}", p.size, p.per_class, p.error);
                    }
                    sweep.iter().map(|p| (p.size as f64, p.error)).collect()
                }
                _ => bail!("give either --points or both --memory and --queries"),
            };
            let fit = analysis::fit_scaling(&pts)?;
            let mut r = Report::new(["size", "error", "fit"]).titled(format!(
                "fit: log10(error) = {:.6} log10(size) + {:.6}, rss = {:.3e}",
                fit.slope, fit.intercept, fit.rss
            ));
            for &(x, y) in &pts {
                let f = fit.predict(x);
                r.push(vec![x.to_string(), f4(y), f4(f)], json!({"size": x, "error": y, "fit": f}));
            }
            r.records.push(serde_json::to_value(fit)?);
            r.finish(fmt, out.as_deref())
        }
        Command::OodStats { memory, packs, k, retrieval, out } => {
            let mem = load(&memory.memory)?;
            let mut named = Vec::new();
            for spec in packs {
                let (name, dir) = spec.split_once('=').with_context(|| format!("--pack expects NAME=DIR, got '{spec}'"))?;
                named.push((name.to_owned(), QuerySet::read(dir)?));
            }
            let index = ann_index(&mem, &memory.memory, retrieval)?;
            let stats = analysis::ood_distance_stats(retriever(&mem, index.as_ref(), retrieval), &named, *k)?;
            let mut r = Report::new(["pack", "queries", "mean_of_means", "median_of_means", "mean_of_medians", "median_of_medians"]);
            for s in &stats {
                r.push(
                    vec![
                        s.name.clone(),
                        s.queries.to_string(),
                        f4(s.mean_of_means),
                        f4(s.median_of_means),
                        f4(s.mean_of_medians),
                        f4(s.median_of_medians),
                    ],
                    s,
                );
            }
            r.finish(fmt, out.as_deref())
        }
        Command::Residual { memory, queries, k, out } => {
            let mem = load(&memory.memory)?;
            let qs = QuerySet::read(queries)?;
            let names = mem.labels();
            let mut r = Report::new(["query", "nearest", "nearest_label", "residual_top", "residual_label"]);
            for q in 0..qs.len() {
                let v = vismem::EmbeddingVector::from_normalized(qs.vector(q).to_vec())?;
                let res = analysis::residual_query(&mem, &v, *k).with_context(|| format!("query {}", qs.id(q)))?;
                let top = &res.residual.items[0];
                let nearest = &res.primary.items[0];
                r.push(
                    vec![
                        qs.id(q).to_string(),
                        nearest.id.to_string(),
                        names.name(nearest.label).to_owned(),
                        top.id.to_string(),
                        names.name(top.label).to_owned(),
                    ],
                    json!({
                        "query": qs.id(q),
                        "subtracted": res.subtracted,
                        "residual_norm": res.residual_norm,
                        "primary": res.primary.items.iter().map(|n| json!({"id": n.id, "label": names.name(n.label), "distance": n.distance.value()})).collect::<Vec<_>>(),
                        "residual": res.residual.items.iter().map(|n| json!({"id": n.id, "label": names.name(n.label), "distance": n.distance.value()})).collect::<Vec<_>>(),
                    }),
                );
            }
            r.finish(fmt, out.as_deref())
        }
        Command::GenFixture { out, classes, per_class, dims, spread, noise, depth, fanout, queries_per_class, seed } => {
            let spec = FixtureSpec {
                classes: *classes,
                per_class: *per_class,
                dims: *dims,
                spread: *spread,
                noise: *noise,
                taxonomy: depth.zip(*fanout),
                queries_per_class: *queries_per_class,
                seed: *seed,
            };
            let fx = fixture::generate(&spec)?;
            fx.write(out)?;
            let mut r = Report::new(["entries", "queries", "noised", "labels", "dims"]);
            let nq = fx.queries.as_ref().map_or(0, Pack::count);
            r.push(
                vec![
                    fx.memory.count().to_string(),
                    nq.to_string(),
                    fx.noised.len().to_string(),
                    classes.to_string(),
                    dims.to_string(),
                ],
                json!({"entries": fx.memory.count(), "queries": nq, "noised": fx.noised.len(), "labels": classes, "dims": dims, "out": out}),
            );
            r.emit(fmt)
        }
        Command::Validate { pack } => {
            let s = pack::validate_pack(pack)?;
            let mut r = Report::new(["count", "dims", "labels"]);
            r.push(
                vec![s.count.to_string(), s.dims.to_string(), s.label_count.to_string()],
                json!({"count": s.count, "dims": s.dims, "labels": s.label_count, "valid": true}),
            );
            r.emit(fmt)
        }
    }
}

fn load(dir: &Path) -> Result<VisualMemory> {
    VisualMemory::load(dir).with_context(|| format!("loading memory {}", dir.display()))
}

fn summary(mem: &VisualMemory, fmt: Format) -> Result<()> {
    let mut r = Report::new(["entries", "dims", "labels", "generation"]);
    r.push(
        vec![
            mem.len().to_string(),
            mem.dims().to_string(),
            mem.labels().len().to_string(),
            mem.generation().to_string(),
        ],
        json!({"entries": mem.len(), "dims": mem.dims(), "labels": mem.labels().len(), "generation": mem.generation()}),
    );
    r.emit(fmt)
}

fn default_grid(scheme: Scheme) -> Vec<f64> {
    match scheme {
        Scheme::Plurality => vec![0.0],
        Scheme::Distance => vec![0.0, 0.5, 1.0, 2.0, 4.0, 8.0],
        Scheme::Softmax => vec![0.01, 0.03, 0.07, 0.1, 0.3, 1.0],
        Scheme::Rank => vec![0.5, 1.0, 2.0, 4.0, 8.0],
    }
}

fn ann_index(mem: &VisualMemory, dir: &Path, args: &RetrievalArgs) -> Result<Option<AnnIndex>> {
    if !args.ann {
        return Ok(None);
    }
    let path = args.index.clone().unwrap_or_else(|| dir.join(INDEX_FILE));
    if path.exists() {
        return Ok(Some(AnnIndex::load(&path)?));
    }
    if args.index.is_some() {
        bail!("index file {} does not exist", path.display());
    }
    eprintln!("no index at {}; building one with seed {}", path.display(), args.index_seed);
    Ok(Some(AnnIndex::build(mem, None, args.index_seed)?))
}

fn retriever<'a>(mem: &'a VisualMemory, index: Option<&'a AnnIndex>, args: &RetrievalArgs) -> Retriever<'a> {
    match index {
        None => Retriever::Exact(mem),
        Some(index) => Retriever::Ann {
            index,
            memory: mem,
            probes: args.probes.unwrap_or_else(|| index.default_probes()),
        },
    }
}

fn read_ids(path: &Path) -> Result<Vec<u64>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| (i, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .map(|(i, l)| l.parse::<u64>().with_context(|| format!("{}:{}: bad id '{l}'", path.display(), i + 1)))
        .collect()
}

fn read_points(path: &Path) -> Result<Vec<(f64, f64)>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| (i, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .map(|(i, l)| {
            let mut it = l.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty());
            let parse = |s: Option<&str>| -> Result<f64> {
                s.with_context(|| format!("{}:{}: expected two numbers", path.display(), i + 1))?
                    .parse::<f64>()
                    .with_context(|| format!("{}:{}: bad number", path.display(), i + 1))
            };
            Ok((parse(it.next())?, parse(it.next())?))
        })
        .collect()
}
