//! Command-line front end: synthetic data generation, training, evaluation,
//! knowledge-graph denoising, and ablation comparison.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 training divergence.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use kgrec::checkpoint;
use kgrec::config::apply_config_file;
use kgrec::diffusion::guidance_table;
use kgrec::error::{Error, Result};
use kgrec::eval::{baseline_popularity, evaluate, RandomScorer};
use kgrec::graph::{load_interactions, load_kg, split_train_test, InteractionGraph, KnowledgeGraph};
use kgrec::synth::{generate_synthetic, write_synthetic, SyntheticSpec};
use kgrec::train::{train, TrainConfig, TrainedModel};

#[derive(Parser)]
#[command(name = "kgrec", version, about = "Knowledge-graph diffusion-enhanced recommender")]
struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Force single-threaded execution for exact reproducibility of timing-
    /// independent output ordering.
    #[arg(long, global = true)]
    deterministic: bool,

    /// Output directory (default: $KGREC_OUT or `runs`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic clustered dataset with planted relevance labels.
    GenSynth(GenSynthArgs),
    /// Train a model and write a checkpoint plus per-epoch metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint with Recall@N and NDCG@N against baselines.
    Eval(EvalArgs),
    /// Denoise a knowledge graph with a trained model and write the result.
    Diffuse(DiffuseArgs),
    /// Train the full model and its three ablations, then compare them.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenSynthArgs {
    #[arg(long, default_value_t = 500)]
    users: usize,
    #[arg(long, default_value_t = 300)]
    items: usize,
    #[arg(long, default_value_t = 60)]
    entities: usize,
    #[arg(long, default_value_t = 5)]
    clusters: usize,
    #[arg(long, default_value_t = 0.2)]
    intra_prob: f64,
    #[arg(long, default_value_t = 0.005)]
    noise_prob: f64,
    #[arg(long, default_value_t = 3)]
    relevant_relations: usize,
    #[arg(long, default_value_t = 1)]
    noise_relations: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// User-item interaction TSV.
    #[arg(long)]
    interactions: PathBuf,
    /// Knowledge-graph triple TSV.
    #[arg(long)]
    kg: PathBuf,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// `key = value` configuration file; command-line flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    xi: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    theta1: Option<f64>,
    #[arg(long)]
    theta2: Option<f64>,
    #[arg(long)]
    t_max: Option<usize>,
    #[arg(long)]
    top_q: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    top_n: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    negatives: Option<usize>,
    #[arg(long)]
    disable_attention: bool,
    #[arg(long)]
    disable_guidance: bool,
    #[arg(long)]
    disable_contrastive: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        if let Some(path) = &self.config {
            apply_config_file(&mut cfg, path)?;
        }
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { cfg.$field = v; })*
            };
        }
        set!(epochs, batch_size, lr, dim, layers, xi, tau, theta1, theta2, t_max, top_q, seed, top_n, eval_every, negatives);
        cfg.disable_attention |= self.disable_attention;
        cfg.disable_guidance |= self.disable_guidance;
        cfg.disable_contrastive |= self.disable_contrastive;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Interactions held out per user for the test split.
    #[arg(long, default_value_t = 1)]
    holdout: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Checkpoint produced by `kgrec train`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 1)]
    holdout: usize,
    /// Split seed; must match the training run to score the same test pairs.
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long)]
    top_n: Option<usize>,
}

#[derive(Args)]
struct DiffuseArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Entities kept per item.
    #[arg(long)]
    top_q: Option<usize>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value_t = 1)]
    holdout: usize,
}

fn out_dir(cli_out: &Option<PathBuf>) -> PathBuf {
    cli_out
        .clone()
        .or_else(|| std::env::var_os("KGREC_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.to_path_buf(), source })
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Config(format!("cannot serialize {}: {e}", path.display())))?;
    std::fs::write(path, text).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

fn load_data(data: &DataArgs) -> Result<(InteractionGraph, KnowledgeGraph)> {
    let graph = load_interactions(&data.interactions)?;
    let kg = load_kg(&data.kg, &graph)?;
    Ok((graph, kg))
}

fn run_gen_synth(args: &GenSynthArgs, out: &Path) -> Result<()> {
    let spec = SyntheticSpec {
        num_users: args.users,
        num_items: args.items,
        num_entities: args.entities,
        num_clusters: args.clusters,
        intra_cluster_prob: args.intra_prob,
        noise_edge_prob: args.noise_prob,
        relevant_relations_per_item: args.relevant_relations,
        noise_relations_per_item: args.noise_relations,
        seed: args.seed,
    };
    let (graph, kg, labels) = generate_synthetic(&spec)?;
    ensure_dir(out)?;
    write_synthetic(out, &graph, &kg, &labels)?;
    println!(
        "wrote {} interactions and {} triples to {}",
        graph.num_edges(),
        kg.num_triples(),
        out.display()
    );
    Ok(())
}

fn train_once(
    data: &DataArgs,
    cfg: &TrainConfig,
    holdout: usize,
) -> Result<(TrainedModel, InteractionGraph, KnowledgeGraph, Vec<(usize, usize)>)> {
    let (graph, kg) = load_data(data)?;
    let split = split_train_test(&graph, holdout, cfg.seed)?;
    let model = train(&split.train, &kg, cfg, Some(&split.test))?;
    Ok((model, split.train, kg, split.test))
}

fn run_train(args: &TrainArgs, out: &Path) -> Result<()> {
    let cfg = args.config.resolve()?;
    ensure_dir(out)?;
    write_json(&out.join("config.json"), &cfg)?;

    let (model, train_graph, kg, test) = train_once(&args.data, &cfg, args.holdout)?;
    checkpoint::save(&model, &out.join("model.ckpt"))?;
    write_json(&out.join("metrics.json"), &model.history)?;

    let result = model.evaluate(&train_graph, &kg, &test)?;
    for m in &model.history {
        println!(
            "epoch {:>3}  bpr {:.4}  infonce {:.4}/{:.4}  total {:.4}",
            m.epoch, m.bpr, m.infonce_user, m.infonce_item, m.total
        );
    }
    println!(
        "final Recall@{} {:.4}  NDCG@{} {:.4}  ({} test users)",
        cfg.top_n,
        result.mean_recall,
        cfg.top_n,
        result.mean_ndcg,
        result.per_user.len()
    );
    println!("checkpoint: {}", out.join("model.ckpt").display());
    Ok(())
}

fn run_eval(args: &EvalArgs, out: &Path) -> Result<()> {
    let (graph, kg) = load_data(&args.data)?;
    let model = checkpoint::load(&args.checkpoint)?;
    let split_seed = args.split_seed.unwrap_or(model.config.seed);
    let top_n = args.top_n.unwrap_or(model.config.top_n);
    let split = split_train_test(&graph, args.holdout, split_seed)?;

    let scorer = model.scorer(&split.train, &kg)?;
    let result = evaluate(&scorer, &split.train, &split.test, top_n)?;
    let pop = evaluate(&baseline_popularity(&split.train)?, &split.train, &split.test, top_n)?;
    let rnd = evaluate(&RandomScorer { seed: split_seed }, &split.train, &split.test, top_n)?;

    println!("{:<12} {:>12} {:>12}", "scorer", format!("Recall@{top_n}"), format!("NDCG@{top_n}"));
    for (name, r) in [("model", &result), ("popularity", &pop), ("random", &rnd)] {
        println!("{:<12} {:>12.4} {:>12.4}", name, r.mean_recall, r.mean_ndcg);
    }
    ensure_dir(out)?;
    write_json(&out.join("eval.json"), &result)?;
    Ok(())
}

fn run_diffuse(args: &DiffuseArgs, out: &Path) -> Result<()> {
    let (graph, kg) = load_data(&args.data)?;
    let model = checkpoint::load(&args.checkpoint)?;
    let q = args.top_q.unwrap_or(model.config.top_q);

    use kgrec::diffusion::generate_denoised_kg;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(model.config.seed);
    let guidance = if model.config.disable_guidance {
        ndarray::Array2::zeros((graph.num_items, model.tables.dim))
    } else {
        guidance_table(&graph, &model.tables.user)
    };
    let denoised =
        generate_denoised_kg(&kg, &model.tables.denoiser, &model.schedule, &guidance, q, &mut rng)?;
    ensure_dir(out)?;
    let path = out.join("kg_denoised.tsv");
    denoised.save(&path, &graph)?;
    println!(
        "kept top-{q} entities per item: {} -> {} triples, written to {}",
        kg.num_triples(),
        denoised.num_triples(),
        path.display()
    );
    Ok(())
}

fn run_ablate(args: &AblateArgs, out: &Path) -> Result<()> {
    let base = args.config.resolve()?;
    ensure_dir(out)?;
    write_json(&out.join("config.json"), &base)?;

    let variants: [(&str, fn(&TrainConfig) -> TrainConfig); 4] = [
        ("full", |c| c.clone()),
        ("no-attention", |c| TrainConfig { disable_attention: true, ..c.clone() }),
        ("no-guidance", |c| TrainConfig { disable_guidance: true, ..c.clone() }),
        ("no-contrastive", |c| TrainConfig { disable_contrastive: true, ..c.clone() }),
    ];

    println!(
        "{:<16} {:>12} {:>12}",
        "variant",
        format!("Recall@{}", base.top_n),
        format!("NDCG@{}", base.top_n)
    );
    let mut table = Vec::new();
    for (name, make) in variants {
        let cfg = make(&base);
        let (model, train_graph, kg, test) = train_once(&args.data, &cfg, args.holdout)?;
        let result = model.evaluate(&train_graph, &kg, &test)?;
        println!("{:<16} {:>12.4} {:>12.4}", name, result.mean_recall, result.mean_ndcg);
        table.push(serde_json::json!({
            "variant": name,
            "recall": result.mean_recall,
            "ndcg": result.mean_ndcg,
        }));
    }
    write_json(&out.join("ablation.json"), &table)?;
    Ok(())
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Divergence(_) => 3,
        Error::Param(_) | Error::Config(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // keep clap's rendered help/error text but use our usage exit code
            let is_help = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if is_help { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };

    let threads = if cli.deterministic { Some(1) } else { cli.threads };
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure thread pool: {e}");
            return ExitCode::from(1);
        }
    }

    let out = out_dir(&cli.out);
    let result = match &cli.command {
        Command::GenSynth(args) => run_gen_synth(args, &out),
        Command::Train(args) => run_train(args, &out),
        Command::Eval(args) => run_eval(args, &out),
        Command::Diffuse(args) => run_diffuse(args, &out),
        Command::Ablate(args) => run_ablate(args, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
