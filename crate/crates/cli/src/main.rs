//! Batch front end for the outcome-forecasting pipeline.
//!
//! Subcommands mirror the pipeline stages; every one that writes files
//! also writes a `manifest.json` with config hash and input digests so
//! the run can be reproduced bit-identically. Network access (KEGG
//! fetches) is off unless `TXCAST_ALLOW_NETWORK=1` is set and `--offline`
//! is absent.

mod manifest;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use txcast::cohort;
use txcast::dataset::{self, Dataset};
use txcast::embeddings::{self, Method, TreatmentEmbedding, Vocabulary};
use txcast::evaluation::{self, EvalConfig, EvalOutput};
use txcast::features;
use txcast::ingest;
use txcast::kegg::{self, KeggClient};
use txcast::meta;
use txcast::synthgen::{self, EffectLink, SynthConfig};

use manifest::ManifestBuilder;

const NETWORK_ENV: &str = "TXCAST_ALLOW_NETWORK";

#[derive(Parser)]
#[command(
    name = "txcast",
    version,
    about = "Forecast treatment outcomes for unseen treatments",
    long_about = "Pipeline stages as subcommands: generate or validate a dataset \
directory, build treatment blocks and covariates, embed treatments, run the \
bootstrapped leave-one-treatment-out evaluation, and regress wins on embedding \
novelty. Outputs are deterministic for a fixed seed; every output directory \
gets a manifest.json with config and input digests."
)]
struct Cli {
    /// Cap worker threads (default: all cores). Output does not depend on it.
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with known ground truth
    Synth(SynthArgs),
    /// Parse a dataset directory and print validation counts
    IngestValidate(IngestValidateArgs),
    /// Build treatment blocks and their steroid-coverage targets
    Blocks(DataOutArgs),
    /// Assemble the master covariate table
    Featurize(DataOutArgs),
    /// Build one treatment embedding and write it as CSV
    Embed(EmbedArgs),
    /// Run the bootstrapped leave-one-treatment-out evaluation grid
    Evaluate(EvaluateArgs),
    /// Regress evaluation wins on embedding novelty distances
    Meta(MetaArgs),
    /// Re-run the evaluation across several PCA dimensions
    PcaSweep(PcaSweepArgs),
    /// Summarize evaluation and meta outputs as text
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset directory
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// JSON file with generator settings; flags below override it
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_name = "N")]
    patients: Option<usize>,
    #[arg(long, value_name = "N")]
    treatments: Option<usize>,
    #[arg(long, value_name = "SD")]
    noise_sd: Option<f64>,
    /// Treatment effect scale
    #[arg(long, value_name = "X")]
    effect_strength: Option<f64>,
    /// Latent-to-effect link: linear, radial, or wave
    #[arg(long, value_name = "LINK")]
    link: Option<String>,
}

#[derive(Args)]
struct IngestValidateArgs {
    /// Dataset directory
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
}

#[derive(Args)]
struct DataOutArgs {
    /// Dataset directory
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct EmbedArgs {
    /// Dataset directory
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// one_hot, smiles or kegg
    #[arg(long, value_name = "METHOD")]
    method: Method,
    /// PCA dimension for smiles and kegg embeddings
    #[arg(long, value_name = "N", default_value_t = 3)]
    pca_k: usize,
    /// Never touch the network, even if TXCAST_ALLOW_NETWORK=1
    #[arg(long)]
    offline: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Dataset directory
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// JSON file with evaluation settings; flags below override it
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Bootstrap iterations
    #[arg(long, value_name = "N")]
    bootstraps: Option<usize>,
    /// Features kept by the selection forest
    #[arg(long, value_name = "N")]
    k_features: Option<usize>,
    /// Comma-separated methods to compare against the baseline
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    /// Hold out only these treatments (default: all)
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    treatments: Option<Vec<String>>,
    /// PCA dimension override for every embedding method in this run
    #[arg(long, value_name = "N")]
    pca_k: Option<usize>,
    /// Never touch the network, even if TXCAST_ALLOW_NETWORK=1
    #[arg(long)]
    offline: bool,
}

#[derive(Args)]
struct MetaArgs {
    /// Directory holding eval_records.csv and the embedding CSV
    #[arg(long, value_name = "DIR")]
    eval: PathBuf,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Embedding method whose wins and novelty are analysed
    #[arg(long, value_name = "METHOD", default_value = "kegg")]
    method: Method,
}

#[derive(Args)]
struct PcaSweepArgs {
    /// Dataset directory
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// smiles or kegg (one_hot has no PCA step)
    #[arg(long, value_name = "METHOD")]
    method: Method,
    /// Comma-separated PCA dimensions to sweep
    #[arg(long, value_name = "LIST", value_delimiter = ',', default_value = "2,3,4,6,8")]
    ks: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Bootstrap iterations per sweep point
    #[arg(long, value_name = "N", default_value_t = 10)]
    bootstraps: usize,
    /// Never touch the network, even if TXCAST_ALLOW_NETWORK=1
    #[arg(long)]
    offline: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory holding eval_records.csv (and meta outputs, if present)
    #[arg(long, value_name = "DIR")]
    eval: PathBuf,
    /// Write the report to DIR/report.txt as well as stdout
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
        {
            eprintln!("error: setting --jobs {jobs}: {e}");
            std::process::exit(1);
        }
    }
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(args) => cmd_synth(args),
        Command::IngestValidate(args) => cmd_ingest_validate(args),
        Command::Blocks(args) => cmd_blocks(args),
        Command::Featurize(args) => cmd_featurize(args),
        Command::Embed(args) => cmd_embed(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Meta(args) => cmd_meta(args),
        Command::PcaSweep(args) => cmd_pca_sweep(args),
        Command::Report(args) => cmd_report(args),
    }
}

fn allow_network(offline_flag: bool) -> bool {
    !offline_flag && std::env::var(NETWORK_ENV).is_ok_and(|v| v == "1")
}

fn load_json_config<T: serde::de::DeserializeOwned + Default>(
    path: Option<&Path>,
) -> Result<T> {
    match path {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing config {}", path.display()))
        }
        None => Ok(T::default()),
    }
}

fn create_out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn dataset_inputs(builder: ManifestBuilder, dir: &Path) -> Result<ManifestBuilder> {
    let mut builder = builder;
    for name in [
        dataset::EVENTS_FILE,
        dataset::DEMOGRAPHICS_FILE,
        dataset::CATALOG_FILE,
        dataset::FEATURES_FILE,
        dataset::PIPELINE_FILE,
    ] {
        builder = builder.input(&dir.join(name))?;
    }
    Ok(builder)
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let mut config: SynthConfig = load_json_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(n) = args.patients {
        config.n_patients = n;
    }
    if let Some(n) = args.treatments {
        config.n_treatments = n;
    }
    if let Some(sd) = args.noise_sd {
        config.noise_sd = sd;
    }
    if let Some(g) = args.effect_strength {
        config.effect_strength = g;
    }
    if let Some(link) = args.link.as_deref() {
        config.link = match link {
            "linear" => EffectLink::Linear,
            "radial" => EffectLink::Radial,
            "wave" => EffectLink::Wave,
            other => bail!("unknown link {other:?}; expected linear, radial, or wave"),
        };
    }
    let data = synthgen::generate_synthetic(&config)?;
    create_out_dir(&args.out)?;
    data.write_to_dir(&args.out)?;
    ManifestBuilder::new("synth")
        .seed(config.seed)
        .config(&config)?
        .write(&args.out)?;
    println!(
        "wrote {} events for {} patients on {} treatments to {}",
        data.events.len(),
        config.n_patients,
        config.n_treatments,
        args.out.display()
    );
    Ok(())
}

fn cmd_ingest_validate(args: IngestValidateArgs) -> Result<()> {
    let data = dataset::load_dataset(&args.data)?;
    let report = ingest::validate_events(&data.events);
    let missing_demographics = data
        .events
        .iter()
        .map(|e| e.patient_id.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .filter(|pid| !data.demographics.contains_key(*pid))
        .count();
    println!("{report}");
    println!("catalog treatments: {}", data.catalog.len());
    println!("feature specs: {}", data.feature_specs.len());
    println!("patients missing demographics: {missing_demographics}");
    if missing_demographics > 0 {
        bail!("{missing_demographics} patients have events but no demographics row");
    }
    Ok(())
}

fn cmd_blocks(args: DataOutArgs) -> Result<()> {
    let data = dataset::load_dataset(&args.data)?;
    let blocks = data.build_blocks()?;
    create_out_dir(&args.out)?;
    cohort::blocks_to_csv(&args.out.join("blocks.csv"), &blocks)?;

    // Steroid events per patient, so targets can be computed per block.
    let mut steroid_events: BTreeMap<&str, Vec<ingest::EventRecord>> = BTreeMap::new();
    for event in &data.events {
        if data.pipeline.steroid_codes.contains(&event.code) {
            steroid_events
                .entry(event.patient_id.as_str())
                .or_default()
                .push(event.clone());
        }
    }
    let target_path = args.out.join("targets.csv");
    let mut writer = csv::Writer::from_path(&target_path)
        .with_context(|| format!("writing {}", target_path.display()))?;
    writer.write_record(["patient_id", "treatment", "start", "end", "target"])?;
    let mut degenerate = 0usize;
    for block in &blocks {
        let empty = Vec::new();
        let events = steroid_events
            .get(block.patient_id.as_str())
            .unwrap_or(&empty);
        let target = cohort::compute_target(block, events)?;
        let cell = match target {
            Some(t) => ingest::format_float(t.value()),
            None => {
                degenerate += 1;
                String::new()
            }
        };
        writer.write_record([
            block.patient_id.as_str(),
            block.treatment.as_str(),
            &block.start.to_string(),
            &block.end.to_string(),
            &cell,
        ])?;
    }
    writer.flush()?;

    let builder = dataset_inputs(ManifestBuilder::new("blocks"), &args.data)?;
    builder.config(&data.pipeline)?.write(&args.out)?;
    println!(
        "wrote {} blocks ({degenerate} without a target window) to {}",
        blocks.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_featurize(args: DataOutArgs) -> Result<()> {
    let data = dataset::load_dataset(&args.data)?;
    let table = data.build_master_table()?;
    create_out_dir(&args.out)?;
    features::master_table_to_csv(&args.out.join("master.csv"), &table)?;
    let builder = dataset_inputs(ManifestBuilder::new("featurize"), &args.data)?;
    builder.config(&data.feature_specs)?.write(&args.out)?;
    println!(
        "wrote master table: {} rows, {} covariates, {} degenerate blocks skipped",
        table.rows.len(),
        table.feature_names.len(),
        table.degenerate_blocks
    );
    Ok(())
}

fn embedding_file(method: Method) -> String {
    format!("embedding_{}.csv", method.as_str())
}

fn build_embedding(
    data: &Dataset,
    method: Method,
    pca_k: usize,
    offline: bool,
) -> Result<TreatmentEmbedding> {
    match method {
        Method::OneHot => {
            let mut names: Vec<&str> = data
                .catalog
                .iter()
                .map(|e| e.generic_name.as_str())
                .collect();
            names.sort_unstable();
            names.dedup();
            let vocab = Vocabulary::new(names.iter().copied());
            let vectors: BTreeMap<String, Vec<f64>> = names
                .iter()
                .map(|n| (n.to_string(), embeddings::one_hot_embed(n, &vocab)))
                .collect();
            Ok(TreatmentEmbedding::new(Method::OneHot, vocab.len(), vectors)?)
        }
        Method::Smiles => {
            let (embedding, _) = embeddings::build_smiles_embedding(&data.catalog, pca_k)?;
            Ok(embedding)
        }
        Method::Kegg => {
            let client = KeggClient::new(data.kegg_cache_dir(), allow_network(offline));
            let (embedding, _, _) = kegg::catalog_kegg_embedding(&client, &data.catalog, pca_k)?;
            Ok(embedding)
        }
    }
}

fn cmd_embed(args: EmbedArgs) -> Result<()> {
    let data = dataset::load_dataset(&args.data)?;
    let embedding = build_embedding(&data, args.method, args.pca_k, args.offline)?;
    create_out_dir(&args.out)?;
    let path = args.out.join(embedding_file(args.method));
    embedding.write_csv(&path)?;
    let mut builder = ManifestBuilder::new("embed").input(&args.data.join(dataset::CATALOG_FILE))?;
    if args.method == Method::Kegg {
        builder = builder.input_dir(&data.kegg_cache_dir())?;
    }
    builder
        .config(&serde_json::json!({
            "method": args.method,
            "pca_k": args.pca_k,
            "offline": args.offline,
        }))?
        .write(&args.out)?;
    println!(
        "wrote {} vectors of dimension {} to {}",
        embedding.len(),
        embedding.dim(),
        path.display()
    );
    Ok(())
}

/// Builds every embedding the config's methods need, honouring per-method
/// PCA dimensions.
fn build_method_embeddings(
    data: &Dataset,
    config: &EvalConfig,
    offline: bool,
) -> Result<BTreeMap<Method, TreatmentEmbedding>> {
    let mut out = BTreeMap::new();
    for &method in &config.methods {
        if method == Method::OneHot {
            continue;
        }
        let k = config.pca_k.get(&method).copied().unwrap_or(3);
        out.insert(method, build_embedding(data, method, k, offline)?);
    }
    Ok(out)
}

fn run_grid(
    data: &Dataset,
    config: &EvalConfig,
    offline: bool,
) -> Result<(EvalOutput, BTreeMap<Method, TreatmentEmbedding>)> {
    let table = data.build_master_table()?;
    let embeddings = build_method_embeddings(data, config, offline)?;
    let output = evaluation::run_evaluation(&table, &embeddings, config)?;
    Ok((output, embeddings))
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let mut config: EvalConfig = load_json_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(n) = args.bootstraps {
        config.n_bootstrap = n;
    }
    if let Some(k) = args.k_features {
        config.k_features = k;
    }
    if let Some(methods) = args.methods {
        config.methods = methods;
    }
    if let Some(treatments) = args.treatments {
        config.treatments = treatments;
    }
    if let Some(k) = args.pca_k {
        for method in [Method::Smiles, Method::Kegg] {
            config.pca_k.insert(method, k);
        }
    }

    let data = dataset::load_dataset(&args.data)?;
    let (output, embeddings) = run_grid(&data, &config, args.offline)?;
    create_out_dir(&args.out)?;
    evaluation::records_to_csv(&args.out.join("eval_records.csv"), &output.records)?;
    let win_rates = evaluation::summarize_win_rates(&output.records);
    win_rates.to_csv(&args.out.join("win_rates.csv"))?;
    for (method, embedding) in &embeddings {
        embedding.write_csv(&args.out.join(embedding_file(*method)))?;
    }

    let mut builder = dataset_inputs(ManifestBuilder::new("evaluate"), &args.data)?;
    if embeddings.contains_key(&Method::Kegg) {
        builder = builder.input_dir(&data.kegg_cache_dir())?;
    }
    builder.seed(config.seed).config(&config)?.write(&args.out)?;

    println!(
        "evaluated {} records over {} skipped cells; win rates (percent):",
        output.records.len(),
        output.skips.len()
    );
    print!("{win_rates}");
    Ok(())
}

fn cmd_meta(args: MetaArgs) -> Result<()> {
    let records_path = args.eval.join("eval_records.csv");
    let records = evaluation::records_from_csv(&records_path)?;
    let embedding_path = args.eval.join(embedding_file(args.method));
    if !embedding_path.is_file() {
        bail!(
            "{} not found; run `evaluate` with the {} method first",
            embedding_path.display(),
            args.method.as_str()
        );
    }
    let embedding = TreatmentEmbedding::read_csv(&embedding_path)?;
    let table = meta::build_meta_table(&records, &embedding, args.method)?;
    let report = meta::run_meta_regressions(&table, args.method)?;

    create_out_dir(&args.out)?;
    meta::meta_table_to_csv(&args.out.join("meta_table.csv"), &table, args.method)?;
    let json_path = args.out.join("meta_regressions.json");
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    std::fs::write(&json_path, text).with_context(|| format!("writing {}", json_path.display()))?;

    ManifestBuilder::new("meta")
        .input(&records_path)?
        .input(&embedding_path)?
        .config(&serde_json::json!({ "method": args.method }))?
        .write(&args.out)?;
    print!("{report}");
    Ok(())
}

fn cmd_pca_sweep(args: PcaSweepArgs) -> Result<()> {
    if args.method == Method::OneHot {
        bail!("one_hot has no PCA dimension to sweep; use smiles or kegg");
    }
    if args.ks.is_empty() {
        bail!("--ks must list at least one dimension");
    }
    let data = dataset::load_dataset(&args.data)?;
    create_out_dir(&args.out)?;

    let sweep_path = args.out.join("sweep.csv");
    let mut writer = csv::Writer::from_path(&sweep_path)
        .with_context(|| format!("writing {}", sweep_path.display()))?;
    writer.write_record(["method", "pca_k", "cells", "wins", "win_rate_percent"])?;
    let mut summary = Vec::new();
    for &k in &args.ks {
        let config = EvalConfig {
            seed: args.seed,
            n_bootstrap: args.bootstraps,
            methods: vec![args.method],
            pca_k: BTreeMap::from([(args.method, k)]),
            ..EvalConfig::default()
        };
        let (output, _) = run_grid(&data, &config, args.offline)?;
        let wanted = evaluation::RecordMethod::from(args.method);
        let cells = output
            .records
            .iter()
            .filter(|r| r.method == wanted)
            .count();
        let wins: usize = output
            .records
            .iter()
            .filter(|r| r.method == wanted)
            .filter_map(|r| r.win)
            .map(usize::from)
            .sum();
        let rate = 100.0 * wins as f64 / cells as f64;
        writer.write_record([
            args.method.as_str().to_string(),
            k.to_string(),
            cells.to_string(),
            wins.to_string(),
            format!("{rate:.2}"),
        ])?;
        summary.push((k, rate));
    }
    writer.flush()?;

    let mut builder = dataset_inputs(ManifestBuilder::new("pca-sweep"), &args.data)?;
    if args.method == Method::Kegg {
        builder = builder.input_dir(&data.kegg_cache_dir())?;
    }
    builder
        .seed(args.seed)
        .config(&serde_json::json!({
            "method": args.method,
            "ks": args.ks,
            "bootstraps": args.bootstraps,
        }))?
        .write(&args.out)?;

    println!("win rate by PCA dimension ({}):", args.method.as_str());
    for (k, rate) in summary {
        println!("  k = {k:>3}: {rate:.2}%");
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let records = evaluation::records_from_csv(&args.eval.join("eval_records.csv"))?;
    let win_rates = evaluation::summarize_win_rates(&records);
    let iterations = records.iter().map(|r| r.iteration).max().map_or(0, |m| m + 1);
    let treatments = win_rates.treatments.len();

    let mut text = String::new();
    text.push_str(&format!(
        "evaluation: {} records, {iterations} bootstrap iterations, {treatments} treatments\n\n",
        records.len()
    ));
    text.push_str("win rates against the treatment-blind baseline (percent):\n");
    text.push_str(&format!("{win_rates}\n"));

    let regressions = args.eval.join("meta_regressions.json");
    if regressions.is_file() {
        let raw = std::fs::read_to_string(&regressions)?;
        let report: meta::MetaReport = serde_json::from_str(&raw)
            .with_context(|| format!("parsing {}", regressions.display()))?;
        text.push_str(&format!("\n{report}"));
    }

    print!("{text}");
    if let Some(out) = args.out {
        create_out_dir(&out)?;
        std::fs::write(out.join("report.txt"), &text)?;
        ManifestBuilder::new("report")
            .input(&args.eval.join("eval_records.csv"))?
            .config(&serde_json::json!({}))?
            .write(&out)?;
    }
    Ok(())
}
