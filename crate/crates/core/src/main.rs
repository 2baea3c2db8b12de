use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use semtopo::config::{AnchorKind, ExperimentConfig};
use semtopo::experiment::{
    cmd_eval, cmd_export_topology, cmd_gen_data, cmd_run, format_report, metrics_file, ExperimentError,
};
use semtopo::metrics::{ApInterpolation, MetricOptions};
use semtopo::protocol::TaskSchedule;

#[derive(Parser)]
#[command(name = "semtopo", version, about = "Open-world detection with a fixed semantic topology")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the seeded synthetic benchmark as dataset files.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate every task of the schedule.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score detection files against ground truth at one time point.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        det: PathBuf,
        #[arg(long)]
        schedule: PathBuf,
        /// Time point (1-based).
        #[arg(long)]
        task: usize,
        #[arg(long)]
        iou_thresh: Option<f64>,
        #[arg(long)]
        aose_score_thresh: Option<f64>,
        #[arg(long)]
        wi_recall: Option<f64>,
        /// Use 11-point interpolated AP.
        #[arg(long)]
        eleven_point: bool,
        /// Print the metrics as JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Write the anchors a run would register, as an anchor file.
    ExportTopology {
        #[command(flatten)]
        config: ConfigArgs,
        /// Only classes known at this time point.
        #[arg(long)]
        task: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Config file plus flag overrides for individual fields.
#[derive(Args)]
struct ConfigArgs {
    /// TOML config; defaults apply to every missing field.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Anchor file; switches the anchor source to `file`.
    #[arg(long)]
    anchors: Option<PathBuf>,
    /// Random anchors of this dimension.
    #[arg(long, conflicts_with = "anchors")]
    random_anchors: Option<usize>,
    #[arg(long)]
    schedule: Option<PathBuf>,
    /// Directory with `train_task{t}.jsonl` and `eval.jsonl`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    finetune_epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    finetune_lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    exemplars: Option<usize>,
    #[arg(long)]
    unknown_k: Option<usize>,
    #[arg(long)]
    w_sa: Option<f64>,
    #[arg(long)]
    w_se: Option<f64>,
    #[arg(long)]
    w_roi: Option<f64>,
    #[arg(long)]
    w_reg: Option<f64>,
    #[arg(long)]
    freeze_extractor_in_finetune: bool,
    #[arg(long)]
    disable_unknown_anchor: bool,
    #[arg(long)]
    disable_sa: bool,
    #[arg(long)]
    disable_cls_se: bool,
    #[arg(long)]
    disable_cls_roi: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig, ExperimentError> {
        let mut c = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        fn set<T: Clone>(slot: &mut T, v: &Option<T>) {
            if let Some(v) = v {
                *slot = v.clone();
            }
        }
        set(&mut c.seed, &self.seed);
        if let Some(path) = &self.anchors {
            c.anchors.source = AnchorKind::File;
            c.anchors.path = Some(path.clone());
        }
        if let Some(dim) = self.random_anchors {
            c.anchors.source = AnchorKind::Random;
            c.anchors.dim = dim;
        }
        if self.schedule.is_some() {
            c.schedule.file = self.schedule.clone();
        }
        if self.data.is_some() {
            c.data.dir = self.data.clone();
        }
        set(&mut c.optim.epochs, &self.epochs);
        set(&mut c.optim.finetune_epochs, &self.finetune_epochs);
        set(&mut c.optim.lr, &self.lr);
        set(&mut c.optim.finetune_lr, &self.finetune_lr);
        set(&mut c.optim.momentum, &self.momentum);
        set(&mut c.optim.batch_size, &self.batch_size);
        set(&mut c.exemplars.capacity, &self.exemplars);
        set(&mut c.unknown.k, &self.unknown_k);
        set(&mut c.loss.sa, &self.w_sa);
        set(&mut c.loss.se, &self.w_se);
        set(&mut c.loss.roi, &self.w_roi);
        set(&mut c.loss.reg, &self.w_reg);
        c.optim.freeze_extractor_in_finetune |= self.freeze_extractor_in_finetune;
        c.ablation.disable_unknown_anchor |= self.disable_unknown_anchor;
        c.ablation.disable_sa |= self.disable_sa;
        c.ablation.disable_cls_se |= self.disable_cls_se;
        c.ablation.disable_cls_roi |= self.disable_cls_roi;
        Ok(c)
    }
}

fn run(cli: Cli) -> Result<(), ExperimentError> {
    match cli.command {
        Command::GenData { config, out } => {
            let toy = cmd_gen_data(&config.resolve()?, &out)?;
            let train: usize = toy.train.iter().map(Vec::len).sum();
            println!(
                "wrote {} training and {} evaluation records to {}",
                train,
                toy.eval.len(),
                out.display()
            );
        }
        Command::Run { config, out } => {
            let outcome = cmd_run(&config.resolve()?, &out)?;
            for (report, evaluation) in outcome.reports.iter().zip(&outcome.evaluations) {
                for w in &report.warnings {
                    eprintln!("warning: task {}: {w}", report.task);
                }
                print!("{}", format_report(report.task, &evaluation.metrics));
            }
            println!("metrics written to {}", metrics_file(&out).display());
        }
        Command::Eval {
            gt,
            det,
            schedule,
            task,
            iou_thresh,
            aose_score_thresh,
            wi_recall,
            eleven_point,
            json,
        } => {
            let schedule = TaskSchedule::load(&schedule)?;
            let mut options = MetricOptions::default();
            options.iou_thresh = iou_thresh.unwrap_or(options.iou_thresh);
            options.aose_score_thresh = aose_score_thresh.unwrap_or(options.aose_score_thresh);
            options.wi_recall = wi_recall.unwrap_or(options.wi_recall);
            if eleven_point {
                options.interpolation = ApInterpolation::ElevenPoint;
            }
            let metrics = cmd_eval(&gt, &det, &schedule, task, &options)?;
            if json {
                println!("{}", serde_json::to_string(&metrics).expect("metrics serialize"));
            } else {
                print!("{}", format_report(task, &metrics));
            }
        }
        Command::ExportTopology { config, task, out } => {
            let topology = cmd_export_topology(&config.resolve()?, task, &out)?;
            println!(
                "wrote {} class anchors plus unknown (dim {}) to {}",
                topology.num_classes(),
                topology.dim(),
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
