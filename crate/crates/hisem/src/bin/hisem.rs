//! Command-line surface: generate data, train, evaluate under predicted
//! or ground-truth routing, describe a single pair, and dump per-layer
//! difference heatmaps.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use hisem::bdam::{diff_magnitude_maps, BiTemporalFeatures};
use hisem::config::{RunConfig, SEED_ENV};
use hisem::data::{load_dataset, save_dataset, synth_generate, DatasetRecord, GenConfig};
use hisem::decoder::{Vocabulary, UNK};
use hisem::error::HisemError;
use hisem::metrics::{stratified_evaluate, MetricReport};
use hisem::model::{record_tensor, HiSemModel};
use hisem::training::{load_training_state, train_loop, OptimizerState};
use hisem::viz::write_pgm;
use hisem::Result;

#[derive(Parser)]
#[command(name = "hisem", about = "Change captioning on bi-temporal feature grids")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Routing {
    /// Use the router's own predicted path.
    Pre,
    /// Dispatch on the ground-truth label.
    Gt,
}

impl Routing {
    fn name(self) -> &'static str {
        match self {
            Routing::Pre => "pre",
            Routing::Gt => "gt",
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic bi-temporal dataset (JSONL).
    Gen {
        /// Number of pairs (≥2, labels alternate).
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = GenConfig::default().h)]
        grid_h: usize,
        #[arg(long, default_value_t = GenConfig::default().w)]
        grid_w: usize,
        #[arg(long, default_value_t = GenConfig::default().d)]
        d: usize,
        #[arg(long, default_value_t = GenConfig::default().noise_amp)]
        noise_amp: f64,
        #[arg(long, default_value_t = GenConfig::default().signal_amp)]
        signal_amp: f64,
    },
    /// Train from a JSON config; writes checkpoint and reports to out_dir.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from out_dir/model.ckpt when present.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint; caches per-mode reports and emits the ρ
    /// table once both routing modes are cached for the same inputs.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        routing: Routing,
    },
    /// Caption one pair and report the routing decision.
    Describe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        pair_id: usize,
        #[arg(long, value_enum, default_value = "pre")]
        routing: Routing,
    },
    /// Dump |F̃_T1−F̃_T2| graymaps: pre-stack baseline plus one per layer.
    Heatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        pair_id: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Gen {
            n,
            seed,
            out,
            grid_h,
            grid_w,
            d,
            noise_amp,
            signal_amp,
        } => {
            let seed = env_seed().unwrap_or(seed);
            let cfg = GenConfig {
                h: grid_h,
                w: grid_w,
                d,
                noise_amp,
                signal_amp,
            };
            let records = synth_generate(n, &cfg, seed)?;
            save_dataset(&records, &out)?;
            let changed = records.iter().filter(|r| r.label == 1).count();
            println!(
                "wrote {} pairs to {} ({} changed, {} unchanged)",
                records.len(),
                out.display(),
                changed,
                records.len() - changed
            );
            Ok(())
        }
        Cmd::Train { config, resume } => cmd_train(&config, resume),
        Cmd::Eval {
            checkpoint,
            data,
            routing,
        } => cmd_eval(&checkpoint, &data, routing),
        Cmd::Describe {
            checkpoint,
            data,
            pair_id,
            routing,
        } => {
            let (_, vocab, model) = load_bundle(&checkpoint)?;
            let records = load_dataset(&data)?;
            let r = find_pair(&records, pair_id)?;
            let f1 = record_tensor(&r.f_t1, r.h, r.w, r.d);
            let f2 = record_tensor(&r.f_t2, r.h, r.w, r.d);
            let over = routing_override(routing, r);
            let (caption, decision) = model.describe(&f1, &f2, &vocab, over)?;
            let probs = decision.path_probs.to_vec();
            println!("pair {pair_id}: {caption}");
            println!(
                "routing: path={:?} source={:?} p(unchanged)={:.4} p(changed)={:.4}",
                decision.path, decision.source, probs[0], probs[1]
            );
            Ok(())
        }
        Cmd::Heatmap {
            checkpoint,
            data,
            pair_id,
            out,
        } => {
            let (_, _, model) = load_bundle(&checkpoint)?;
            let records = load_dataset(&data)?;
            let r = find_pair(&records, pair_id)?;
            let f1 = record_tensor(&r.f_t1, r.h, r.w, r.d);
            let f2 = record_tensor(&r.f_t2, r.h, r.w, r.d);
            let x = BiTemporalFeatures::new(f1, f2, (r.h, r.w))?;
            let maps = diff_magnitude_maps(&x, &model.bdam)?;
            fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
            for (i, map) in maps.iter().enumerate() {
                let name = if i == 0 {
                    "baseline.pgm".to_string()
                } else {
                    format!("layer{i}.pgm")
                };
                let path = out.join(&name);
                write_pgm(&path, r.w, r.h, map)?;
                println!("wrote {}", path.display());
            }
            Ok(())
        }
    }
}

fn env_seed() -> Option<u64> {
    std::env::var(SEED_ENV).ok()?.parse().ok()
}

fn io_err(path: &Path, e: std::io::Error) -> HisemError {
    HisemError::Io {
        path: path.display().to_string(),
        source: e,
    }
}

fn find_pair(records: &[DatasetRecord], id: usize) -> Result<&DatasetRecord> {
    records
        .iter()
        .find(|r| r.id == id)
        .ok_or_else(|| HisemError::InvalidArgument(format!("no pair with id {id}")))
}

fn routing_override(routing: Routing, r: &DatasetRecord) -> Option<usize> {
    match routing {
        Routing::Pre => None,
        Routing::Gt => Some(r.label as usize),
    }
}

fn save_vocab(path: &Path, vocab: &Vocabulary) -> Result<()> {
    let mut text = String::new();
    for t in &vocab.tokens()[UNK + 1..] {
        text.push_str(t);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn load_vocab(path: &Path) -> Result<Vocabulary> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Vocabulary::new(text.lines().map(String::from))
}

fn cmd_train(config: &Path, resume: bool) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    cfg.curriculum.validate()?;
    let records = load_dataset(cfg.data_path()?)?;
    let captions: Vec<String> = records.iter().flat_map(|r| r.captions.clone()).collect();
    let vocab = hisem::data::build_vocab(&captions, cfg.min_freq)?;

    fs::create_dir_all(&cfg.out_dir).map_err(|e| io_err(&cfg.out_dir, e))?;
    let ckpt = cfg.out_dir.join("model.ckpt");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = HiSemModel::new(&mut rng, cfg.model_config(vocab.len()))?;
    let mut opt = OptimizerState::new(cfg.curriculum.lr);
    let start_epoch = if resume && ckpt.exists() {
        let e = load_training_state(&ckpt, &model, &mut opt)?;
        println!("resuming from {} at epoch {e}", ckpt.display());
        e
    } else {
        0
    };

    let outcome = train_loop(
        &model,
        &records,
        &vocab,
        &cfg.curriculum,
        &mut opt,
        start_epoch,
        Some(&ckpt),
        None,
    )?;

    save_vocab(&cfg.out_dir.join("vocab.txt"), &vocab)?;
    cfg.save(&cfg.out_dir.join("config.json"))?;
    outcome.report.save_json(&cfg.out_dir.join("report.json"))?;
    outcome.report.save_csv(&cfg.out_dir.join("report.csv"))?;
    println!(
        "trained {} epochs on {} pairs: caption loss {:.4}, router accuracy {:.1}%",
        outcome.report.rows.len(),
        records.len(),
        outcome.final_caption_loss,
        outcome.final_router_accuracy
    );
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

/// Rebuilds a trained model from a checkpoint and its sibling
/// config.json / vocab.txt.
fn load_bundle(checkpoint: &Path) -> Result<(RunConfig, Vocabulary, HiSemModel)> {
    let dir = checkpoint.parent().unwrap_or_else(|| Path::new("."));
    let cfg = RunConfig::load(&dir.join("config.json"))?;
    let vocab = load_vocab(&dir.join("vocab.txt"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = HiSemModel::new(&mut rng, cfg.model_config(vocab.len()))?;
    let mut opt = OptimizerState::new(cfg.curriculum.lr);
    load_training_state(checkpoint, &model, &mut opt)?;
    Ok((cfg, vocab, model))
}

/// FNV-1a over the checkpoint and dataset bytes; ties cached eval
/// reports to their exact inputs.
fn fingerprint(checkpoint: &Path, data: &Path) -> Result<u64> {
    let mut h: u64 = 0xcbf29ce484222325;
    for path in [checkpoint, data] {
        for b in fs::read(path).map_err(|e| io_err(path, e))? {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    Ok(h)
}

#[derive(Serialize, Deserialize)]
struct EvalReport {
    routing: String,
    fingerprint: String,
    reports: Vec<MetricReport>,
}

fn cmd_eval(checkpoint: &Path, data: &Path, routing: Routing) -> Result<()> {
    let (_, vocab, model) = load_bundle(checkpoint)?;
    let records = load_dataset(data)?;
    let fp = format!("{:016x}", fingerprint(checkpoint, data)?);

    let mut predictions = Vec::with_capacity(records.len());
    let mut predicted = Vec::with_capacity(records.len());
    for r in &records {
        let f1 = record_tensor(&r.f_t1, r.h, r.w, r.d);
        let f2 = record_tensor(&r.f_t2, r.h, r.w, r.d);
        let (caption, decision) = model.describe(&f1, &f2, &vocab, routing_override(routing, r))?;
        predictions.push(caption);
        predicted.push(decision.path as u8);
    }
    let reports = stratified_evaluate(&predictions, &records, &predicted)?;
    print_reports(routing, &reports);

    let dir = checkpoint.parent().unwrap_or_else(|| Path::new("."));
    let out = dir.join(format!("eval_{}.json", routing.name()));
    let doc = EvalReport {
        routing: routing.name().into(),
        fingerprint: fp.clone(),
        reports,
    };
    fs::write(&out, serde_json::to_string_pretty(&doc)?).map_err(|e| io_err(&out, e))?;
    println!("report: {}", out.display());

    let other = dir.join(format!(
        "eval_{}.json",
        match routing {
            Routing::Pre => "gt",
            Routing::Gt => "pre",
        }
    ));
    if other.exists() {
        let text = fs::read_to_string(&other).map_err(|e| io_err(&other, e))?;
        let cached: EvalReport = serde_json::from_str(&text)
            .map_err(|e| HisemError::Config(format!("{}: {e}", other.display())))?;
        if cached.fingerprint == fp {
            let (pre, gt) = match routing {
                Routing::Pre => (&doc, &cached),
                Routing::Gt => (&cached, &doc),
            };
            rho_table(dir, pre, gt)?;
        } else {
            println!("rho table skipped: cached {} run used different inputs", cached.routing);
        }
    }
    Ok(())
}

fn print_reports(routing: Routing, reports: &[MetricReport]) {
    println!("routing mode: {}", routing.name());
    for r in reports {
        let opt = |v: Option<f64>| v.map_or("-".into(), |x| format!("{x:.2}"));
        println!(
            "{:?} (n={}): BLEU-4 {:.2} ROUGE-L {:.2} METEOR {:.2} CIDEr-D {} S*_m {} router acc {:.1}%",
            r.stratum,
            r.n_samples,
            r.bleu4,
            r.rouge_l,
            r.meteor,
            opt(r.cider_d),
            opt(r.s_star_m),
            r.router_accuracy
        );
    }
}

/// ΔScore/ΔAcc per metric and stratum, from the two cached reports.
fn rho_table(dir: &Path, pre: &EvalReport, gt: &EvalReport) -> Result<()> {
    let mut rows: Vec<(String, String, f64)> = Vec::new();
    for (p, g) in pre.reports.iter().zip(&gt.reports) {
        let da = g.router_accuracy - p.router_accuracy;
        if da <= 0.0 {
            println!(
                "rho table skipped for {:?}: accuracy delta {da:.2} not positive",
                p.stratum
            );
            continue;
        }
        let stratum = format!("{:?}", p.stratum).to_lowercase();
        let mut cells: Vec<(&str, f64, f64)> = vec![
            ("bleu4", p.bleu4, g.bleu4),
            ("rouge_l", p.rouge_l, g.rouge_l),
            ("meteor", p.meteor, g.meteor),
        ];
        if let (Some(a), Some(b)) = (p.cider_d, g.cider_d) {
            cells.push(("cider_d", a, b));
        }
        if let (Some(a), Some(b)) = (p.s_star_m, g.s_star_m) {
            cells.push(("s_star_m", a, b));
        }
        for (name, a, b) in cells {
            let rho = hisem::metrics::rho_conversion(a, b, p.router_accuracy, g.router_accuracy)?;
            println!("rho[{stratum}][{name}] = {rho:.4}");
            rows.push((stratum.clone(), name.to_string(), rho));
        }
    }
    if rows.is_empty() {
        return Ok(());
    }
    let json: Vec<serde_json::Value> = rows
        .iter()
        .map(|(s, m, v)| serde_json::json!({ "stratum": s, "metric": m, "rho": v }))
        .collect();
    let path = dir.join("rho.json");
    fs::write(&path, serde_json::to_string_pretty(&json)?).map_err(|e| io_err(&path, e))?;
    println!("rho table: {}", path.display());
    Ok(())
}
