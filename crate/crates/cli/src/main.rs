use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use clwe_core::evaluation::BliReport;
use clwe_core::pipeline::{load_inputs, run_pipeline, Manifest, PipelineConfig, Run, Stage};
use clwe_core::refinement::RefineMode;
use clwe_core::synthetic::{generate_instance, SyntheticParams};
use clwe_core::{ClweError, Result};

#[derive(Parser)]
#[command(name = "clwe", version, about = "Unsupervised cross-lingual word embedding mapping")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Pipeline configuration (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Run directory holding every stage's artifacts
    #[arg(long)]
    out: PathBuf,
    /// Master seed (overrides run.seed)
    #[arg(long)]
    seed: Option<u64>,
    /// Single-GAN restarts (overrides run.restarts)
    #[arg(long)]
    restarts: Option<usize>,
    /// Hierarchy level: last, second_to_last or an index
    #[arg(long)]
    level: Option<String>,
    /// Refinement: none, global or local
    #[arg(long)]
    refine: Option<RefineMode>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the single linear map with random restarts
    TrainSingle(Common),
    /// Cluster the source space and select a hierarchy level
    Cluster(Common),
    /// Assign target words to the source subspaces
    AlignSubspaces(Common),
    /// Train one multi-discriminator GAN per subspace
    TrainMulti(Common),
    /// Refine the mapping with Procrustes and stochastic induction
    Refine {
        #[command(flatten)]
        common: Common,
        /// global, local or single
        #[arg(long)]
        mode: RefineMode,
    },
    /// Export the mutual-translation seed dictionary of the final map
    InduceDict(Common),
    /// Evaluate the final map on the gold dictionary
    EvalBli {
        #[command(flatten)]
        common: Common,
        /// Print per-subspace accuracies
        #[arg(long)]
        per_subspace: bool,
    },
    /// Write a synthetic piecewise-rotation instance
    SynthGen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        clusters: usize,
        #[arg(long, default_value_t = 400)]
        per_cluster: usize,
        #[arg(long, default_value_t = 10)]
        dim: usize,
        #[arg(long, default_value_t = 5.0)]
        separation: f64,
        #[arg(long, default_value_t = 0.01)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run every enabled stage in order
    Pipeline {
        #[command(flatten)]
        common: Common,
        /// Recompute from this stage on, resuming earlier ones
        #[arg(long)]
        stage: Option<Stage>,
    },
}

fn config(c: &Common) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::load(&c.config).map_err(|e| match e {
        ClweError::Io { .. } => ClweError::Config(e.to_string()),
        other => other,
    })?;
    if let Some(s) = c.seed {
        cfg.run.seed = s;
    }
    if let Some(r) = c.restarts {
        cfg.run.restarts = r;
    }
    if let Some(l) = &c.level {
        cfg.cluster.level = l.clone();
    }
    if let Some(r) = c.refine {
        cfg.run.refine = r;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_stage(manifest: &Manifest, stage: Stage) {
    if let Some(rec) = manifest.record(stage) {
        for (k, v) in &rec.criteria {
            println!("{}\t{k}\t{v}", stage.name());
        }
    }
}

fn stage(c: &Common, stage: Stage, mode: Option<RefineMode>) -> Result<Manifest> {
    let mut cfg = config(c)?;
    if let Some(m) = mode {
        cfg.run.refine = m;
    }
    let inputs = load_inputs(&cfg.data)?;
    let mut run = Run::open(&cfg, &inputs, &c.out)?;
    run.run_stage(stage)?;
    print_stage(&run.manifest, stage);
    Ok(run.manifest)
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::TrainSingle(c) => stage(&c, Stage::SingleGan, None).map(drop),
        Command::Cluster(c) => stage(&c, Stage::Cluster, None).map(drop),
        Command::AlignSubspaces(c) => stage(&c, Stage::Align, None).map(drop),
        Command::TrainMulti(c) => stage(&c, Stage::MultiGan, None).map(drop),
        Command::Refine { common, mode } => {
            if mode == RefineMode::None {
                return Err(ClweError::Config("refine --mode must be global, local or single".into()));
            }
            stage(&common, Stage::Refine, Some(mode)).map(drop)
        }
        Command::InduceDict(c) => stage(&c, Stage::Induce, None).map(drop),
        Command::EvalBli { common, per_subspace } => {
            stage(&common, Stage::Evaluate, None)?;
            if per_subspace {
                let report = BliReport::load_json(&common.out.join("evaluate").join("report.json"))?;
                print!("{}", report.subspace_table());
            }
            Ok(())
        }
        Command::SynthGen {
            out,
            clusters,
            per_cluster,
            dim,
            separation,
            noise,
            seed,
        } => {
            let inst = generate_instance(&SyntheticParams {
                clusters,
                per_cluster,
                dim,
                separation,
                noise_sigma: noise,
                seed,
            })?;
            inst.save(&out)?;
            println!("wrote {} words per side to {}", inst.source.len(), out.display());
            Ok(())
        }
        Command::Pipeline { common, stage } => {
            let cfg = config(&common)?;
            let manifest = run_pipeline(&cfg, &common.out, stage)?;
            for rec in &manifest.stages {
                print_stage(&manifest, rec.stage);
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
