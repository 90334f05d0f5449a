use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use qsnet::config::Budget;
use qsnet::cost::{bitops, max_bitops, BitOpsReport};
use qsnet::data::Dataset;
use qsnet::evolve::evolve_search;
use qsnet::supernet::{sample_uniform, ElasticViT, Operator, SearchSpace, SubnetConfig};
use qsnet::trainkit::{
    calibrate_for, evaluate, export_subnet, Checkpoint, ExportedSubnet, Metrics, MetricsWriter, Trainer,
};
use qsnet::ExperimentConfig;

#[derive(Parser)]
#[command(name = "qsnet", version, about = "Quantized ViT supernet training, search and export")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the supernet; writes checkpoint.bin and metrics.csv.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint produced with the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many total steps instead of the full schedule.
        #[arg(long)]
        until: Option<usize>,
        /// Overrides the config's output directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Evolutionary search under a BitOPs budget; writes search_history.csv
    /// and best_subnet.txt.
    Search {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Absolute BitOPs or a percentage of the largest subnet, e.g. 25%.
        #[arg(long)]
        budget: Option<String>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Validation metrics and BitOPs breakdown of one subnet.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Subnet string, a file holding one, or `max` / `min`.
        #[arg(long)]
        subnet: String,
        /// Also write the per-layer BitOPs table here.
        #[arg(long)]
        bitops_csv: Option<PathBuf>,
    },
    /// Merge adapters and quantize one subnet into a standalone artifact.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        subnet: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reload an exported artifact and evaluate it on the config's
    /// validation data.
    EvalExport {
        #[arg(long)]
        artifact: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Train with a single elastic operator, then evaluate a random subnet
    /// sweep; writes ablate_<operator>.csv.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        operator: Operator,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            resume,
            until,
            output_dir,
        } => train(&config, resume.as_deref(), until, output_dir),
        Command::Search {
            config,
            checkpoint,
            budget,
            output_dir,
        } => search(&config, &checkpoint, budget, output_dir),
        Command::Eval {
            checkpoint,
            subnet,
            bitops_csv,
        } => eval(&checkpoint, &subnet, bitops_csv.as_deref()),
        Command::Export { checkpoint, subnet, out } => export(&checkpoint, &subnet, &out),
        Command::EvalExport { artifact, config } => eval_export(&artifact, &config),
        Command::Ablate {
            config,
            operator,
            output_dir,
        } => ablate(&config, operator, output_dir),
    }
}

fn load_config(path: &Path) -> Result<(ExperimentConfig, String)> {
    ExperimentConfig::load(path).with_context(|| format!("loading config {}", path.display()))
}

fn out_dir(cfg: &ExperimentConfig, over: Option<PathBuf>) -> Result<PathBuf> {
    let dir = over.unwrap_or_else(|| cfg.output_dir.clone());
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

/// Restores the trained model stored in a checkpoint along with its config.
fn load_trained(path: &Path) -> Result<(ElasticViT, ExperimentConfig, Checkpoint)> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let cfg = ExperimentConfig::parse(&ckpt.config_text).context("checkpoint config")?;
    let model = ckpt.restore_model(cfg.build_model()?, &cfg.lora, cfg.seed)?;
    Ok((model, cfg, ckpt))
}

fn parse_subnet(arg: &str, space: &SearchSpace) -> Result<SubnetConfig> {
    let text = match arg {
        "max" => return Ok(space.max_config()),
        "min" => return Ok(space.min_config()),
        a if Path::new(a).is_file() => fs::read_to_string(a).with_context(|| format!("reading {a}"))?,
        a => a.to_string(),
    };
    let cfg: SubnetConfig = text.trim().parse().context("parsing subnet")?;
    qsnet::supernet::validate_config(space, &cfg)?;
    Ok(cfg)
}

fn val_set(val: &BTreeMap<usize, Dataset>, res: usize) -> Result<&Dataset> {
    val.get(&res)
        .with_context(|| format!("no validation data at resolution {res}"))
}

fn print_metrics(m: &Metrics) {
    println!("loss            {:.6}", m.loss);
    println!("pixel_accuracy  {:.6}", m.pixel_accuracy);
    println!("mean_iou        {:.6}", m.mean_iou);
    println!("pixels          {}", m.pixels);
}

fn print_bitops(r: &BitOpsReport) {
    println!("{:<12} {:>12} {:>3} {:>3} {:>16}", "layer", "macs", "w", "a", "bitops");
    for l in &r.records {
        println!(
            "{:<12} {:>12} {:>3} {:>3} {:>16}",
            l.layer, l.macs, l.weight_bits, l.act_bits, l.bitops
        );
    }
    println!("backbone bitops {}", r.backbone);
    println!("head bitops     {}", r.head);
    println!("total bitops    {}", r.total);
}

fn train(config: &Path, resume: Option<&Path>, until: Option<usize>, over: Option<PathBuf>) -> Result<()> {
    let (cfg, text) = load_config(config)?;
    let dir = out_dir(&cfg, over)?;
    let model = cfg.build_model()?;
    let data = cfg.train_data()?;
    let mut trainer = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
            ckpt.verify_config(&text)
                .context("checkpoint was written by a different config")?;
            info!("resuming at step {}", ckpt.step);
            ckpt.resume(model, cfg.schedule(), cfg.lora.clone(), data)?
        }
        None => Trainer::new(model, cfg.schedule(), cfg.lora.clone(), data)?,
    };
    let mut metrics = MetricsWriter::open(&dir.join("metrics.csv"))?;
    let until = until.unwrap_or(cfg.schedule.total_steps);
    let start = Instant::now();
    trainer.run_until(until, |r| {
        if r.step % 25 == 0 {
            info!("step {} phase {} loss {:.4}", r.step, r.phase, r.loss);
        }
        metrics.record(r)
    })?;
    let ckpt_path = dir.join("checkpoint.bin");
    Checkpoint::capture(&trainer, &text).save(&ckpt_path)?;
    println!(
        "trained to step {} in {:.1}s; checkpoint {}",
        trainer.step,
        start.elapsed().as_secs_f64(),
        ckpt_path.display()
    );
    Ok(())
}

fn search(config: &Path, checkpoint: &Path, budget: Option<String>, over: Option<PathBuf>) -> Result<()> {
    let (cfg, text) = load_config(config)?;
    let (model, _, ckpt) = load_trained(checkpoint)?;
    ckpt.verify_config(&text)
        .context("checkpoint was written by a different config")?;
    let dir = out_dir(&cfg, over)?;
    let space = cfg.space();
    let budget: Budget = match budget {
        Some(b) => b.parse()?,
        None => cfg.budget()?,
    };
    let max = max_bitops(&space)?;
    let tau = budget.resolve(max);
    info!("budget {budget} = {tau} bitops (max {max})");
    let val: BTreeMap<usize, Dataset> = cfg
        .val_data()?
        .into_iter()
        .map(|(r, d)| (r, d.head(cfg.search.val_subset)))
        .collect();
    let mut rng = cfg.search_rng();
    let outcome = evolve_search(
        &space,
        |c| Ok(evaluate(&model, c, &val[&c.resolution], cfg.search.batch_size)?.loss),
        tau,
        &cfg.search.evolution,
        &mut rng,
    )?;
    let history = dir.join("search_history.csv");
    outcome.write_csv(fs::File::create(&history).with_context(|| format!("creating {}", history.display()))?)?;
    let best_path = dir.join("best_subnet.txt");
    fs::write(&best_path, format!("{}\n", outcome.best.config))
        .with_context(|| format!("writing {}", best_path.display()))?;
    println!("best subnet {}", outcome.best.config);
    println!("loss {:.6} bitops {} ({:.2}% of max)", outcome.best.loss, outcome.best.bitops, 100.0 * outcome.best.bitops as f64 / max as f64);
    println!("wrote {} and {}", history.display(), best_path.display());
    Ok(())
}

fn eval(checkpoint: &Path, subnet: &str, bitops_csv: Option<&Path>) -> Result<()> {
    let (model, cfg, _) = load_trained(checkpoint)?;
    let space = cfg.space();
    let sub = parse_subnet(subnet, &space)?;
    let val = cfg.val_data()?;
    let metrics = evaluate(&model, &sub, val_set(&val, sub.resolution)?, cfg.search.batch_size)?;
    let report = bitops(&sub, &space)?;
    println!("subnet {sub}");
    print_metrics(&metrics);
    print_bitops(&report);
    if let Some(path) = bitops_csv {
        report.write_csv(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?)?;
    }
    Ok(())
}

fn export(checkpoint: &Path, subnet: &str, out: &Path) -> Result<()> {
    let (model, cfg, _) = load_trained(checkpoint)?;
    let sub = parse_subnet(subnet, &cfg.space())?;
    let val = cfg.val_data()?;
    let calibrated = calibrate_for(&model, &sub, val_set(&val, sub.resolution)?, cfg.search.batch_size)?;
    export_subnet(&calibrated, &sub, out)?;
    println!("exported {sub} to {}", out.display());
    Ok(())
}

fn eval_export(artifact: &Path, config: &Path) -> Result<()> {
    let (cfg, _) = load_config(config)?;
    let net = ExportedSubnet::load(artifact).with_context(|| format!("loading {}", artifact.display()))?;
    let val = cfg.val_data()?;
    let metrics = net.evaluate(val_set(&val, net.config.resolution)?, cfg.search.batch_size)?;
    println!("subnet {}", net.config);
    print_metrics(&metrics);
    Ok(())
}

fn ablate(config: &Path, op: Operator, over: Option<PathBuf>) -> Result<()> {
    let (cfg, _) = load_config(config)?;
    let dir = out_dir(&cfg, over)?;
    let space = cfg.space().single_operator(op);
    let mut schedule = cfg.schedule();
    // Pinned resolutions may sit above the phase caps.
    let smallest = space.resolutions.iter().copied().min().expect("validated space");
    schedule.phase1_max_resolution = schedule.phase1_max_resolution.max(smallest);
    schedule.phase2_max_resolution = schedule.phase2_max_resolution.max(schedule.phase1_max_resolution);
    let model = ElasticViT::new(space.clone(), cfg.seed)?;
    let mut trainer = Trainer::new(model, schedule, cfg.lora.clone(), cfg.train_data()?)?;
    let total = trainer.schedule.total_steps;
    trainer.run_until(total, |r| {
        if r.step % 25 == 0 {
            info!("step {} phase {} loss {:.4}", r.step, r.phase, r.loss);
        }
        Ok(())
    })?;

    let val = cfg.val_data()?;
    let mut rng = cfg.sweep_rng();
    let mut seen = std::collections::BTreeSet::new();
    let mut configs = Vec::new();
    let cap = space.cardinality().min(cfg.ablate.sweep as u128) as usize;
    let mut draws = 0;
    while configs.len() < cap && draws < 100 * cfg.ablate.sweep.max(1) {
        let c = sample_uniform(&space, &mut rng);
        if seen.insert(c.to_string()) {
            configs.push(c);
        }
        draws += 1;
    }
    if configs.is_empty() {
        bail!("ablation sweep produced no subnets");
    }
    let path = dir.join(format!("ablate_{}.csv", op_name(op)));
    let mut out = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    writeln!(out, "operator,config,bitops,loss,pixel_accuracy,mean_iou")?;
    for c in &configs {
        let m = evaluate(&trainer.model, c, val_set(&val, c.resolution)?, cfg.search.batch_size)?;
        let b = bitops(c, &space)?.total;
        writeln!(out, "{},\"{c}\",{b},{},{},{}", op_name(op), m.loss, m.pixel_accuracy, m.mean_iou)?;
    }
    println!("evaluated {} subnets; wrote {}", configs.len(), path.display());
    Ok(())
}

fn op_name(op: Operator) -> &'static str {
    match op {
        Operator::Resolution => "resolution",
        Operator::Depth => "depth",
        Operator::Mlp => "mlp",
        Operator::Bits => "bits",
    }
}
