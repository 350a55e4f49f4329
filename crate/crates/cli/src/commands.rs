use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::json;

use sadh_core::annotations::AnnotationSet;
use sadh_core::dataset::{load_samples, Sample};
use sadh_core::experiment::{
    analyze_model, evaluate_model, run_ablation, AblationGroup, AblationRow, ExperimentConfig,
};
use sadh_core::heads::{ConfidenceLoss, ConfidenceMetric, HeadVariant, ProposalNet};
use sadh_core::nn::Checkpoint;
use sadh_core::synth::generate;
use sadh_core::tiler::{tile_directory, TileOptions};
use sadh_core::training::train;

use crate::config::{self, ConfigError};
use crate::svg::{line_chart, Series};
use crate::{Cli, Command, DataArg};

/// Process exit status for an error chain: 2 configuration, 3 numerical
/// divergence, 4 I/O, 1 anything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<sadh_core::Error>() {
            use sadh_core::Error as E;
            return match e {
                E::NonFinite(_) => 3,
                E::Io { .. } | E::Format { .. } => 4,
                E::InvalidArgument(_) | E::InvalidBox(_) | E::ShapeMismatch { .. } | E::LengthMismatch { .. } => 2,
                _ => 1,
            };
        }
        if cause.is::<std::io::Error>() {
            return 4;
        }
    }
    1
}

struct Run {
    cfg: ExperimentConfig,
    explicit_config: bool,
    out: PathBuf,
}

impl Run {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&self, name: &str, contents: &str) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, contents).map_err(|e| sadh_core::Error::Io { path: p, source: e })?;
        Ok(())
    }

    fn echo_config(&self) -> Result<()> {
        self.write("config.toml", &config::to_toml(&self.cfg))
    }

    /// Samples from `--data`, or the configured synthetic split.
    fn samples(&self, data: &DataArg, held_out: bool) -> Result<Vec<Sample>> {
        let samples = match &data.data {
            Some(dir) => {
                let set = AnnotationSet::load(&dir.join("annotations.json"))?;
                load_samples(&set, &dir.join("images"))?
            }
            None => {
                let (train, test) = self.cfg.split()?;
                if held_out {
                    test
                } else {
                    train
                }
            }
        };
        if samples.is_empty() {
            anyhow::bail!("dataset is empty");
        }
        Ok(samples)
    }

    /// Model from a checkpoint written by `train`. The checkpoint's model and
    /// anchor settings are used; an explicit config must agree with them.
    fn load_model(&self, path: &Path) -> Result<(ProposalNet, ExperimentConfig)> {
        let ck = Checkpoint::load(path)?;
        let stored: ExperimentConfig = serde_json::from_value(ck.meta["config"].clone())
            .map_err(|e| ConfigError(format!("{}: checkpoint has no usable config: {e}", path.display())))?;
        if self.explicit_config && (stored.model != self.cfg.model || stored.anchors != self.cfg.anchors) {
            return Err(ConfigError(format!(
                "checkpoint {} was trained with a different model or anchor configuration",
                path.display()
            ))
            .into());
        }
        let cfg = ExperimentConfig {
            model: stored.model,
            anchors: stored.anchors,
            ..self.cfg.clone()
        };
        let mut net = ProposalNet::new(&cfg.model, 0)?;
        net.restore(&ck)?;
        Ok((net, cfg))
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let mut cfg = config::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(|e| ConfigError(e.to_string()))?;
    fs::create_dir_all(&cli.out).map_err(|e| sadh_core::Error::Io {
        path: cli.out.clone(),
        source: e,
    })?;
    let run = Run {
        cfg,
        explicit_config: cli.config.is_some(),
        out: cli.out,
    };
    match cli.command {
        Command::Synth { images } => synth(&run, images),
        Command::Tile {
            input,
            tile_size,
            mask_mode,
        } => tile(&run, &input, tile_size, mask_mode),
        Command::Train(data) => train_cmd(&run, &data),
        Command::Eval { checkpoint, data } => eval(&run, &checkpoint, &data),
        Command::Analyze { checkpoint, data } => analyze(&run, &checkpoint, &data),
        Command::Ablate { group, seeds } => ablate(&run, &group, &seeds),
    }
}

fn synth(run: &Run, images: Option<usize>) -> Result<()> {
    let n = images.unwrap_or(run.cfg.data.train_images + run.cfg.data.test_images);
    let data = generate(&run.cfg.synth_config(), n)?;
    data.write(&run.out)?;
    run.echo_config()?;
    let hard = data.images.iter().flat_map(|im| &im.lesions).filter(|l| l.hard).count();
    println!(
        "images {}  lesions {}  hard {}",
        data.images.len(),
        data.lesion_count(),
        hard
    );
    Ok(())
}

fn tile(
    run: &Run,
    input: &Path,
    tile_size: Option<usize>,
    mask_mode: Option<sadh_core::tiler::MaskMode>,
) -> Result<()> {
    let opts = TileOptions {
        tile_size: tile_size.unwrap_or(run.cfg.tile.tile_size),
        mode: mask_mode.unwrap_or(run.cfg.tile.mode),
        ..run.cfg.tile.clone()
    };
    let set = AnnotationSet::load(&input.join("annotations.json"))?;
    let summary = tile_directory(&set, &input.join("images"), &run.out, &opts)?;
    run.write("tile_summary.json", &(serde_json::to_string_pretty(&summary)? + "\n"))?;
    println!(
        "source images {}  tiles {}  instances {} -> {}  masked regions {}",
        summary.source_images,
        summary.tiles,
        summary.source_instances,
        summary.emitted_instances,
        summary.masked_regions
    );
    Ok(())
}

fn train_cmd(run: &Run, data: &DataArg) -> Result<()> {
    let samples = run.samples(data, false)?;
    let cfg = &run.cfg;
    run.echo_config()?;
    let log_path = run.path("train_log.csv");
    let file = fs::File::create(&log_path).map_err(|e| sadh_core::Error::Io {
        path: log_path.clone(),
        source: e,
    })?;
    let mut log = BufWriter::new(file);
    writeln!(log, "step,epoch,image_id,l_cls,l_loc,l_nwd,total")?;
    let mut net = ProposalNet::new(&cfg.model, cfg.seed)?;
    let mut write_err = None;
    let result = train(&mut net, &samples, &cfg.anchors, &cfg.train, cfg.seed, |r| {
        if write_err.is_none() {
            if let Err(e) = writeln!(
                log,
                "{},{},{},{},{},{},{}",
                r.step, r.epoch, r.image_id, r.cls, r.loc, r.nwd, r.total
            ) {
                write_err = Some(e);
            }
        }
    });
    log.flush()?;
    if let Some(e) = write_err {
        return Err(e).context("writing the training log");
    }
    let history = result.context("training diverged or failed")?;
    let last = history.last().map(|r| r.total);
    let ck = net.checkpoint(json!({
        "config": cfg,
        "steps": history.len(),
        "final_loss": last,
    }));
    ck.save(&run.path("checkpoint.json"))?;
    println!(
        "trained {} steps on {} images, final loss {}",
        history.len(),
        samples.len(),
        last.map_or("n/a".into(), |v| format!("{v:.6}"))
    );
    Ok(())
}

fn eval(run: &Run, checkpoint: &Path, data: &DataArg) -> Result<()> {
    let (net, cfg) = run.load_model(checkpoint)?;
    let samples = run.samples(data, true)?;
    let report = evaluate_model(&net, &samples, &cfg)?;
    let doc = json!({ "config": cfg, "report": report });
    run.write("eval.json", &(serde_json::to_string_pretty(&doc)? + "\n"))?;
    let fmt = |v: Option<f64>| v.map_or("n/a".into(), |v| format!("{v:.4}"));
    println!(
        "AP@{} {}  AR {}  (small {}, medium {}, large {})",
        cfg.eval.iou_threshold,
        fmt(report.overall.all.ap),
        fmt(report.overall.all.ar),
        fmt(report.overall.small.ap),
        fmt(report.overall.medium.ap),
        fmt(report.overall.large.ap)
    );
    Ok(())
}

fn variant_label(cfg: &ExperimentConfig) -> String {
    let h = &cfg.model.head;
    let mut s = match h.variant {
        HeadVariant::Sadh => format!("sadh-{}x{}", h.cls_kernel, h.cls_kernel),
        HeadVariant::VanillaRpn => "vanilla".to_string(),
    };
    if h.nwd_branch {
        let loss = match h.confidence_loss {
            ConfidenceLoss::L1 => "l1",
            ConfidenceLoss::Sbce => "sbce",
        };
        let metric = match h.confidence_metric {
            ConfidenceMetric::Iou => "iou",
            ConfidenceMetric::Giou => "giou",
            ConfidenceMetric::Diou => "diou",
            ConfidenceMetric::Nwd => "nwd",
        };
        let _ = write!(s, "+{loss}-{metric}");
    }
    s
}

fn analyze(run: &Run, checkpoints: &[PathBuf], data: &DataArg) -> Result<()> {
    let samples = run.samples(data, true)?;
    let mut curve_csv = String::from("model,distance,delta_score,support\n");
    let mut corr_csv = String::from("model,s_cls,p_nwd,s_final,proposals\n");
    let mut series = Vec::new();
    let mut models = Vec::new();
    for (i, path) in checkpoints.iter().enumerate() {
        let (net, cfg) = run.load_model(path)?;
        let label = format!("{}:{}", i, variant_label(&cfg));
        let a = analyze_model(&net, &samples, &cfg)?;
        for ((d, v), n) in a
            .curve
            .distances
            .iter()
            .zip(&a.curve.delta_scores)
            .zip(&a.curve.support)
        {
            let _ = writeln!(curve_csv, "{label},{d},{v},{n}");
        }
        if let Some(c) = &a.correlation {
            let _ = writeln!(
                corr_csv,
                "{label},{},{},{},{}",
                c.s_cls, c.p_nwd, c.s_final, c.proposals
            );
        }
        println!(
            "{label}: mean falloff at distance >= {} {}  correlation {}",
            cfg.analysis.steepness_from,
            a.steepness.map_or("n/a".into(), |v| format!("{v:.4}")),
            a.correlation.as_ref().map_or_else(
                || a.correlation_note.clone().unwrap_or_default(),
                |c| format!("s_cls {:.4} p_nwd {:.4} s_final {:.4}", c.s_cls, c.p_nwd, c.s_final)
            )
        );
        series.push(Series {
            label: label.clone(),
            points: a
                .curve
                .distances
                .iter()
                .zip(&a.curve.delta_scores)
                .map(|(d, v)| (*d as f64, *v))
                .collect(),
        });
        models.push(json!({ "label": label, "model": cfg.model, "analysis": a }));
    }
    run.write("gradient_curve.csv", &curve_csv)?;
    run.write("correlation.csv", &corr_csv)?;
    run.write(
        "gradient_curve.svg",
        &line_chart(
            "Classification confidence falloff",
            "Manhattan distance from ground-truth cell",
            "delta s_cls",
            &series,
        ),
    )?;
    let doc = json!({ "config": run.cfg, "models": models });
    run.write("analysis.json", &(serde_json::to_string_pretty(&doc)? + "\n"))?;
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| v.to_string())
}

fn ablate(run: &Run, groups: &[usize], seeds: &[u64]) -> Result<()> {
    let groups: Vec<AblationGroup> = if groups.is_empty() {
        AblationGroup::ALL.to_vec()
    } else {
        groups
            .iter()
            .map(|&g| AblationGroup::from_number(g).ok_or_else(|| ConfigError(format!("unknown ablation group {g}"))))
            .collect::<Result<_, _>>()?
    };
    let seeds = if seeds.is_empty() {
        vec![run.cfg.seed]
    } else {
        seeds.to_vec()
    };
    run.echo_config()?;
    let mut rows: Vec<AblationRow> = Vec::new();
    for &seed in &seeds {
        let cfg = ExperimentConfig {
            seed,
            ..run.cfg.clone()
        };
        for &g in &groups {
            rows.extend(run_ablation(&cfg, g)?);
        }
    }
    let mut csv = String::from("group,variant,seed,ap,ar,ap_small,control_hash\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            r.group,
            r.variant,
            r.seed,
            opt(r.ap),
            opt(r.ar),
            opt(r.ap_small),
            r.control_hash
        );
        println!(
            "group {} {:<6} seed {:<4} AP {}",
            r.group,
            r.variant,
            r.seed,
            r.ap.map_or("n/a".into(), |v| format!("{v:.4}"))
        );
    }
    run.write("ablation.csv", &csv)?;
    run.write("ablation.json", &(serde_json::to_string_pretty(&rows)? + "\n"))?;
    Ok(())
}
