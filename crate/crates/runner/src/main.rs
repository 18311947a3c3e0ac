use std::path::PathBuf;

use anyhow::{Context, Result};
use casal_core::flops::{self, ArchSpec, ForwardTerms};
use casal_runner::config::{load_config, RunConfig};
use casal_runner::pipeline;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "casal", version, about = "Knowledge-boundary probing, steering and single-layer training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// TOML run configuration; every field has a default.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Skip stages whose inputs and outputs are unchanged.
    #[arg(long)]
    resume: bool,
    /// Comma-separated stage list, overriding the config.
    #[arg(long, value_delimiter = ',')]
    stages: Option<Vec<String>>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured stages end to end.
    Run(RunArgs),
    /// Rebuild the report tables of an existing run.
    Report(RunArgs),
    /// Probe the base model and write the known / unknown split.
    Probe(RunArgs),
    /// Compute steering packs on the training halves.
    Steer(RunArgs),
    /// Choose the intervention layer by a CAA sweep.
    SelectLayer(RunArgs),
    /// Train the selected submodule and write the edited checkpoint.
    Train(RunArgs),
    /// Held-out behavior of the base and trained models.
    Eval(RunArgs),
    /// Held-out behavior under activation addition.
    Caa(RunArgs),
    /// Parameter and FLOP counts.
    Flops(FlopsArgs),
}

#[derive(Args)]
struct FlopsArgs {
    /// JSON or TOML architecture spec; defaults to Llama-3.1-8B.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    lora_rank: Option<u64>,
    /// Include the attention-context term in the forward count.
    #[arg(long)]
    context: bool,
    #[arg(long, conflicts_with = "csv")]
    json: bool,
    #[arg(long)]
    csv: bool,
}

fn resolve(args: &RunArgs) -> Result<(RunConfig, Vec<(String, String)>)> {
    let (mut cfg, env) = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out = out.clone();
    }
    if let Some(stages) = &args.stages {
        cfg.stages = stages.clone();
    }
    cfg.validate()?;
    Ok((cfg, env))
}

fn single(args: &RunArgs, stage: &str) -> Result<()> {
    let (cfg, env) = resolve(args)?;
    let outcome = pipeline::run_single(&cfg, stage, &env)?;
    report_outcome(&outcome);
    Ok(())
}

fn report_outcome(outcome: &pipeline::RunOutcome) {
    for s in &outcome.ran {
        println!("ran      {s}");
    }
    for s in &outcome.skipped {
        println!("skipped  {s}");
    }
    println!("run directory: {}", outcome.dir.display());
}

fn load_spec(path: &PathBuf) -> Result<ArchSpec> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if path.extension().is_some_and(|e| e == "toml") {
        Ok(toml::from_str(&text)?)
    } else {
        Ok(serde_json::from_str(&text)?)
    }
}

fn flops_cmd(args: &FlopsArgs) -> Result<()> {
    let mut spec = match &args.spec {
        Some(p) => load_spec(p)?,
        None => ArchSpec::llama_8b(),
    };
    if args.lora_rank.is_some() {
        spec.lora_rank = args.lora_rank;
    }
    let report = flops::report(
        &spec,
        ForwardTerms {
            context: args.context,
            embeddings: false,
        },
    )?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else if args.csv {
        print!("{}", report.to_csv());
    } else {
        for line in report.to_csv().lines().skip(1) {
            let (k, v) = line.split_once(',').unwrap_or((line, ""));
            println!("{k:<32}{v}");
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Run(a) => {
            let (cfg, env) = resolve(a)?;
            let outcome = pipeline::run(&cfg, &env, a.resume)?;
            report_outcome(&outcome);
            if outcome.ran.iter().any(|s| s == "report") {
                let s = pipeline::load_summary(&outcome.dir)?;
                println!(
                    "layer {}: held-out hallucination {:.3} -> {:.3} ({:+.1}%), accuracy {:.3} -> {:.3}",
                    s.layer,
                    s.baseline.halluc_unknown,
                    s.casal.halluc_unknown,
                    -100.0 * s.relative_reduction,
                    s.baseline.acc_known,
                    s.casal.acc_known
                );
            }
        }
        Command::Report(a) => single(a, "report")?,
        Command::Probe(a) => single(a, "probe")?,
        Command::Steer(a) => single(a, "steer")?,
        Command::SelectLayer(a) => single(a, "select")?,
        Command::Train(a) => single(a, "train")?,
        Command::Eval(a) => single(a, "eval")?,
        Command::Caa(a) => single(a, "caa")?,
        Command::Flops(a) => flops_cmd(a)?,
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn stage_flag_splits_on_commas() {
        let cli = Cli::try_parse_from(["casal", "run", "--stages", "corpus,pretrain", "--seed", "3"]).unwrap();
        match cli.command {
            Command::Run(a) => {
                assert_eq!(a.stages.unwrap(), ["corpus", "pretrain"]);
                assert_eq!(a.seed, Some(3));
            }
            _ => panic!("wrong subcommand"),
        }
    }

    #[test]
    fn flops_flags_conflict() {
        assert!(Cli::try_parse_from(["casal", "flops", "--json", "--csv"]).is_err());
    }
}
