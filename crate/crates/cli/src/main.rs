//! `cell`: synthetic data, staged training, evaluation and diagnosis.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cell_core::checkpoint::Checkpoint;
use cell_core::dataset::{generate_synthetic, load_csv, write_csv};
use cell_core::genemap::{self, GeneMapFrame};
use cell_core::genome_search::events_to_jsonl;
use cell_core::pairs::all_pairs;
use cell_core::pipeline::{self, PipelineConfig};
use cell_core::{CellError, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "cell", version, about = "Evolutionary feature interaction selection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the planted synthetic dataset and its ground truth.
    Synth(SynthArgs),
    /// Run the pipeline stages and write one checkpoint per stage.
    Train(TrainArgs),
    /// Score a dataset with a stage-III checkpoint.
    Eval(EvalArgs),
    /// Export gene maps and the mutation log of a checkpoint.
    Diagnose(DiagnoseArgs),
}

#[derive(Args)]
struct Common {
    /// JSON pipeline configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<PipelineConfig> {
        match &self.config {
            Some(p) => PipelineConfig::load(p),
            None => Ok(PipelineConfig::default()),
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    #[value(name = "3")]
    Three,
    All,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Last stage to run.
    #[arg(long, value_enum, default_value = "all")]
    stage: StageArg,
    #[arg(long)]
    skip_dna: bool,
    #[arg(long)]
    skip_genome: bool,
    /// Training CSV (overrides the configured data source).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Resume after the stage stored in this checkpoint.
    #[arg(long)]
    from: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Number of pairs to list by |beta|.
    #[arg(long, default_value_t = 4)]
    top_k: usize,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CellError::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CellError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn synth(args: &SynthArgs) -> Result<()> {
    let mut cfg = args.common.load()?.synthetic;
    if let Some(seed) = args.common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let (ds, truth) = generate_synthetic(&cfg)?;
    create_dir(&args.out)?;
    write_csv(&ds, args.out.join("data.csv"))?;
    truth.write_json(args.out.join("ground_truth.json"))?;
    println!(
        "wrote {} instances ({:.4} positive) to {}",
        ds.len(),
        ds.positive_ratio(),
        args.out.display()
    );
    Ok(())
}

fn write_frames(dir: &Path, name: &str, frames: &[GeneMapFrame]) -> Result<()> {
    genemap::export_csv(frames, dir.join(format!("{name}.csv")))?;
    if let Some(last) = frames.last() {
        genemap::export_image(last, dir.join(format!("{name}.pgm")))?;
    }
    Ok(())
}

fn train(args: &TrainArgs) -> Result<()> {
    let mut cfg = args.common.load()?;
    if let Some(seed) = args.common.seed {
        cfg.seed = seed;
    }
    cfg.skip_dna |= args.skip_dna;
    cfg.skip_genome |= args.skip_genome;
    if let Some(data) = &args.data {
        cfg.train_path = Some(data.clone());
    }
    cfg.validate()?;
    let until = match args.stage {
        StageArg::One => 1,
        StageArg::Two => 2,
        StageArg::Three | StageArg::All => 3,
    };
    let from = args.from.as_ref().map(Checkpoint::load).transpose()?;
    let data = pipeline::prepare_data(&cfg)?;
    let run = pipeline::run_pipeline(&cfg, &data, from, until)?;
    create_dir(&args.out)?;
    write_text(&args.out.join("config.json"), &(cfg.to_json() + "\n"))?;
    for ck in &run.checkpoints {
        let path = args.out.join(format!("stage{}.ckpt", ck.stage));
        ck.save(&path)?;
        println!("stage {} checkpoint: {}", ck.stage, path.display());
        match ck.stage {
            1 => {
                if let Some(h) = &ck.dna_history {
                    write_frames(&args.out, "genemap_dna", &h.frames)?;
                }
            }
            2 => {
                if let Some(h) = &ck.genome_history {
                    write_frames(&args.out, "genemap_genome", &h.frames)?;
                }
                write_text(&args.out.join("mutations.jsonl"), &events_to_jsonl(&ck.events))?;
            }
            _ => {}
        }
    }
    if let (Some(model), Some(test)) = (run.final_model(), &data.test) {
        let report = pipeline::evaluate(model, test)?;
        let json = report.to_json();
        write_text(&args.out.join("eval.json"), &(json.clone() + "\n"))?;
        println!("{json}");
    }
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let Some(model) = ck.final_model.as_ref().filter(|_| ck.stage == 3) else {
        return Err(CellError::Checkpoint(format!(
            "eval needs a stage 3 checkpoint, got stage {}",
            ck.stage
        )));
    };
    let ds = load_csv(&args.data, model.table.num_fields())?.with_cardinalities(&model.table.cardinalities)?;
    let report = pipeline::evaluate(model, &ds)?;
    println!("{}", report.to_json());
    Ok(())
}

fn diagnose(args: &DiagnoseArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let dna = ck.dna_history.as_ref().filter(|h| !h.frames.is_empty());
    let genome = ck.genome_history.as_ref().filter(|h| !h.frames.is_empty());
    if dna.is_none() && genome.is_none() {
        return Err(CellError::Checkpoint("checkpoint carries no search history".into()));
    }
    create_dir(&args.out)?;
    if let Some(h) = dna {
        write_frames(&args.out, "genemap_dna", &h.frames)?;
    }
    if let Some(h) = genome {
        write_frames(&args.out, "genemap_genome", &h.frames)?;
    }
    write_text(&args.out.join("mutations.jsonl"), &events_to_jsonl(&ck.events))?;
    println!("{} mutation events", ck.events.len());
    if let Some(beta) = &ck.beta {
        let mut ranked: Vec<(usize, f64)> = beta.iter().copied().enumerate().collect();
        ranked.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()).then(a.0.cmp(&b.0)));
        let pairs = all_pairs(ck.assignment.m);
        println!("rank\ti\tj\top\tbeta");
        for (r, &(p, b)) in ranked.iter().take(args.top_k).enumerate() {
            let pair = pairs[p];
            println!("{}\t{}\t{}\t{}\t{b}", r + 1, pair.i, pair.j, ck.assignment.kinds[p].code());
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let threads = pipeline::threads_from_env()?;
    pipeline::with_threads(threads, || match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Diagnose(a) => diagnose(a),
    })?
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
    }
}
