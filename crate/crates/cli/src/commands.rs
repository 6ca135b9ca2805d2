use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::{json, Value};
use vividtoy::data::{generate, read_dataset, write_dataset, Pair, SourceTag};
use vividtoy::degrade::degrade;
use vividtoy::distill::build_distilled_set;
use vividtoy::eval::{evaluate, psnr, AblationTable};
use vividtoy::io::ppm::{read_frames, write_frames};
use vividtoy::io::RunConfig;
use vividtoy::net::{CaptionTokens, ConnectorMode};
use vividtoy::pipeline::{Checkpoint, StepRecord, Trainer};
use vividtoy::restore::{restore, restore_tiled};
use vividtoy::selfcheck;
use vividtoy::{Error, Result, SeedStream, Video};

use crate::log::RunLog;
use crate::{Cli, Command, Common};

const TRAIN_SET: &str = "train.vvt";
const HELD_OUT_SET: &str = "held_out.vvt";
const MIXED_SET: &str = "mixed.vvt";
const BACKBONE: &str = "backbone.vvt";
const RESTORER: &str = "restorer.vvt";

fn config_err(field: &str, msg: impl Into<String>) -> Error {
    Error::Config { field: field.into(), msg: msg.into() }
}

fn on_off(key: &str, v: &str) -> Result<bool> {
    match v {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        _ => Err(config_err(&format!("ablation.{key}"), format!("expected on/off, got `{v}`"))),
    }
}

/// Applies `projector=..,connector=..,distill=..` to the fine-tune section.
pub fn apply_ablation(cfg: &mut RunConfig, spec: &str) -> Result<()> {
    let ft = &mut cfg.train.finetune;
    for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (k, v) =
            item.split_once('=').ok_or_else(|| config_err("ablation", format!("expected key=value, got `{item}`")))?;
        match k {
            "projector" => ft.ablation.projector_on = on_off(k, v)?,
            "connector" => {
                ft.ablation.connector_mode = v
                    .parse::<ConnectorMode>()
                    .map_err(|_| config_err("ablation.connector", format!("unknown mode `{v}`")))?
            }
            "distill" => ft.distill_on = on_off(k, v)?,
            other => return Err(config_err("ablation", format!("unknown key `{other}`"))),
        }
    }
    Ok(())
}

fn effective_config(common: &Common, command: &Command) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(a) = &common.ablation {
        apply_ablation(&mut cfg, a)?;
    }
    if let Some(n) = common.steps {
        match command {
            Command::Pretrain { .. } => cfg.train.pretrain.steps = n,
            Command::Finetune { .. } => cfg.train.finetune.steps = n,
            Command::Distill { .. } => cfg.distill.denoise_steps = n,
            Command::Restore { .. } | Command::Eval { .. } => cfg.restore.steps = n,
            Command::GenData | Command::Selfcheck => {}
        }
    }
    if let Some(t) = common.tile {
        match command {
            Command::Distill { .. } => cfg.distill.tile = Some(t),
            _ => cfg.restore.tile = Some(t),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn name(command: &Command) -> &'static str {
    match command {
        Command::GenData => "gen-data",
        Command::Pretrain { .. } => "pretrain",
        Command::Distill { .. } => "distill",
        Command::Finetune { .. } => "finetune",
        Command::Restore { .. } => "restore",
        Command::Eval { .. } => "eval",
        Command::Selfcheck => "selfcheck",
    }
}

/// Runs one command; `Ok(false)` means it completed but reported failures.
pub fn run(cli: &Cli) -> Result<bool> {
    let common = &cli.common;
    let cfg = effective_config(common, &cli.command)?;
    let out = &common.out;
    std::fs::create_dir_all(out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
    let cmd = name(&cli.command);
    let log_path = out.join(format!("{cmd}.log.jsonl"));
    let seed = common.seed;
    let or = |p: &Option<PathBuf>, default: &str| p.clone().unwrap_or_else(|| out.join(default));
    match &cli.command {
        Command::GenData => gen_data(&cfg, seed, out, RunLog::create(&log_path, cmd, &cfg, seed, json!({}))?),
        Command::Pretrain { data } => {
            let data = or(data, TRAIN_SET);
            let log = RunLog::create(&log_path, cmd, &cfg, seed, json!({ "data": data }))?;
            pretrain(&cfg, seed, &data, &out.join(BACKBONE), log)
        }
        Command::Distill { backbone, data } => {
            let (backbone, data) = (or(backbone, BACKBONE), or(data, TRAIN_SET));
            let log = RunLog::create(&log_path, cmd, &cfg, seed, json!({ "backbone": backbone, "data": data }))?;
            distill(&cfg, seed, &backbone, &data, &out.join(MIXED_SET), log)
        }
        Command::Finetune { backbone, data } => {
            let backbone = or(backbone, BACKBONE);
            let data = data.clone().unwrap_or_else(|| {
                let mixed = out.join(MIXED_SET);
                if mixed.exists() {
                    mixed
                } else {
                    out.join(TRAIN_SET)
                }
            });
            let log = RunLog::create(&log_path, cmd, &cfg, seed, json!({ "backbone": backbone, "data": data }))?;
            finetune(&cfg, seed, &backbone, &data, &out.join(RESTORER), log)
        }
        Command::Restore { checkpoint, input, caption } => {
            let ck_path = or(checkpoint, RESTORER);
            let log = RunLog::create(&log_path, cmd, &cfg, seed, json!({ "checkpoint": ck_path, "input": input }))?;
            restore_frames(&cfg, seed, &ck_path, input, caption, &out.join("restored"), log)
        }
        Command::Eval { input: Some(input), reference: Some(reference), .. } => {
            let log = RunLog::create(&log_path, cmd, &cfg, seed, json!({ "input": input, "reference": reference }))?;
            eval_frames(input, reference, out, log)
        }
        Command::Eval { checkpoint, data, limit, .. } => {
            let (ck_path, data) = (or(checkpoint, RESTORER), or(data, HELD_OUT_SET));
            let log = RunLog::create(&log_path, cmd, &cfg, seed, json!({ "checkpoint": ck_path, "data": data }))?;
            eval_dataset(&cfg, seed, &ck_path, &data, *limit, out, log)
        }
        Command::Selfcheck => {
            let mut log = RunLog::create(&log_path, cmd, &cfg, seed, json!({}))?;
            let mut all = true;
            for c in selfcheck::run() {
                println!("{} {:<22} {:>6.2}s  {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.seconds, c.detail);
                log.line(&serde_json::to_value(&c).expect("outcome serializes"))?;
                all &= c.passed;
            }
            Ok(all)
        }
    }
}

fn gen_data(cfg: &RunConfig, seed: u64, out: &Path, mut log: RunLog) -> Result<bool> {
    let root = SeedStream::new(seed);
    let len = cfg.net.caption_len;
    let train = generate(&cfg.data, cfg.data.clips, root.derive("train"), len, "real-")?;
    let held = generate(&cfg.data, cfg.data.held_out, root.derive("held-out"), len, "held-")?;
    write_dataset(&train, &out.join(TRAIN_SET))?;
    write_dataset(&held, &out.join(HELD_OUT_SET))?;
    let misaligned = train.iter().filter(|p| p.misaligned).count();
    log.line(&json!({ "train": train.len(), "held_out": held.len(), "misaligned": misaligned }))?;
    println!("wrote {} training and {} held-out clips to {}", train.len(), held.len(), out.display());
    Ok(true)
}

fn step_logger<'a>(log: &'a mut RunLog, stage: &'a str) -> impl FnMut(&StepRecord) -> Result<()> + 'a {
    let mut window = 0.0;
    move |r| {
        log.line(&serde_json::to_value(r).expect("step record serializes"))?;
        window += r.loss;
        if (r.step + 1) % 100 == 0 {
            println!("{stage} step {:>6}  loss {:.5}  lr {:.3e}", r.step + 1, window / 100.0, r.lr);
            window = 0.0;
        }
        Ok(())
    }
}

fn pretrain(cfg: &RunConfig, seed: u64, data: &Path, dest: &Path, mut log: RunLog) -> Result<bool> {
    let pairs = read_dataset(data)?;
    let mut t = Trainer::pretrain(cfg.net.clone(), cfg.schedule.clone(), cfg.train.pretrain.clone(), seed)?;
    let n = t.ck.train.steps;
    t.run(&pairs, n, step_logger(&mut log, "pretrain"))?;
    t.ck.write(dest)?;
    println!("backbone written to {}", dest.display());
    Ok(true)
}

fn load_checkpoint(path: &Path, cfg: &RunConfig) -> Result<Checkpoint> {
    let ck = Checkpoint::read(path)?;
    if ck.net != cfg.net {
        return Err(config_err("net", format!("differs from the network stored in {}", path.display())));
    }
    if ck.schedule != cfg.schedule {
        return Err(config_err("schedule", format!("differs from the schedule stored in {}", path.display())));
    }
    Ok(ck)
}

fn distill(cfg: &RunConfig, seed: u64, backbone: &Path, data: &Path, dest: &Path, mut log: RunLog) -> Result<bool> {
    let ck = load_checkpoint(backbone, cfg)?;
    let pairs = read_dataset(data)?;
    let start = Instant::now();
    let mixed = build_distilled_set(&ck, &pairs, &cfg.distill, seed)?;
    write_dataset(&mixed, dest)?;
    let distilled = mixed.iter().filter(|p| p.source == SourceTag::Distilled).count();
    log.line(
        &json!({ "real": mixed.len() - distilled, "distilled": distilled, "seconds": start.elapsed().as_secs_f64() }),
    )?;
    println!("{} pairs ({distilled} distilled) written to {}", mixed.len(), dest.display());
    Ok(true)
}

fn finetune(cfg: &RunConfig, seed: u64, backbone: &Path, data: &Path, dest: &Path, mut log: RunLog) -> Result<bool> {
    let ck = load_checkpoint(backbone, cfg)?;
    let pairs = read_dataset(data)?;
    let mut t = Trainer::finetune(&ck, cfg.train.finetune.clone(), cfg.degrade.clone(), seed)?;
    let n = t.ck.train.steps;
    t.run(&pairs, n, step_logger(&mut log, "finetune"))?;
    t.ck.write(dest)?;
    println!("restorer written to {}", dest.display());
    Ok(true)
}

/// Restores `lq`, tiling only when the configured tile is smaller than the
/// latent frame.
fn restore_clip(
    ck: &Checkpoint,
    cfg: &RunConfig,
    lq: &Video,
    caption: &CaptionTokens,
    seed: u64,
) -> Result<(Video, Value)> {
    let start = Instant::now();
    let (lh, lw) = (lq.height() / 2, lq.width() / 2);
    match cfg.restore.tile {
        Some(t) if t < lh || t < lw => {
            let r = restore_tiled(ck, lq, caption, t, cfg.restore.steps, seed)?;
            Ok((r.video, serde_json::to_value(&r.log).expect("restore log serializes")))
        }
        _ => {
            let v = restore(ck, lq, caption, cfg.restore.steps, seed)?;
            let meta = json!({ "steps": cfg.restore.steps, "tiles": 1, "seam_metric": 0.0, "runtime": start.elapsed().as_secs_f64() });
            Ok((v, meta))
        }
    }
}

fn restore_frames(
    cfg: &RunConfig,
    seed: u64,
    ck_path: &Path,
    input: &Path,
    caption: &[u32],
    dest: &Path,
    mut log: RunLog,
) -> Result<bool> {
    let ck = Checkpoint::read(ck_path)?;
    let lq = read_frames(input)?;
    let caption = CaptionTokens::padded(caption, ck.net.caption_len)?;
    let (video, meta) = restore_clip(&ck, cfg, &lq, &caption, seed)?;
    write_frames(&video, dest)?;
    log.line(&meta)?;
    println!("{} frames restored to {}", video.frames(), dest.display());
    Ok(true)
}

fn eval_frames(input: &Path, reference: &Path, out: &Path, mut log: RunLog) -> Result<bool> {
    let report = evaluate(&read_frames(input)?, &read_frames(reference)?)?;
    let path = out.join("eval.json");
    std::fs::write(&path, report.to_json()).map_err(|e| Error::Io { path: path.clone(), source: e })?;
    log.line(&serde_json::to_value(&report).expect("report serializes"))?;
    println!("psnr {:.3} dB  ssim {:.4}", report.psnr, report.ssim);
    Ok(true)
}

fn ablation_flags(ck: &Checkpoint) -> Vec<String> {
    let a = &ck.train.ablation;
    vec![
        format!("projector={}", if a.projector_on { "on" } else { "off" }),
        format!("connector={}", a.connector_mode.as_str()),
        format!("distill={}", if ck.train.distill_on { "on" } else { "off" }),
    ]
}

fn eval_dataset(
    cfg: &RunConfig,
    seed: u64,
    ck_path: &Path,
    data: &Path,
    limit: Option<usize>,
    out: &Path,
    mut log: RunLog,
) -> Result<bool> {
    let ck = Checkpoint::read(ck_path)?;
    let pairs: Vec<Pair> = read_dataset(data)?;
    let take = limit.unwrap_or(pairs.len()).min(pairs.len());
    let noise = SeedStream::new(seed).derive("eval-degrade");
    let (mut sum, mut sum_lq) = (0.0, 0.0);
    let mut clips = Vec::with_capacity(take);
    for (i, p) in pairs.iter().take(take).enumerate() {
        let lq = degrade(&p.video, &cfg.degrade, noise.index(i as u64))?;
        let (restored, meta) = restore_clip(&ck, cfg, &lq, &p.caption, seed.wrapping_add(i as u64))?;
        let report = evaluate(&restored, &p.video)?;
        let lq_psnr = psnr(&lq, &p.video)?;
        sum += report.psnr;
        sum_lq += lq_psnr;
        let row = json!({
            "id": p.id,
            "psnr": report.psnr,
            "lq_psnr": lq_psnr,
            "ssim": report.ssim,
            "temporal_consistency": report.temporal_consistency,
            "restore": meta,
        });
        log.line(&row)?;
        println!("{:<12} psnr {:>7.3}  lq {:>7.3}", p.id, report.psnr, lq_psnr);
        clips.push(row);
    }
    if take == 0 {
        return Err(Error::Invalid { what: "eval", msg: format!("{} holds no clips", data.display()) });
    }
    let (mean, mean_lq) = (sum / take as f64, sum_lq / take as f64);
    let summary = json!({ "clips": clips, "mean_psnr": mean, "mean_lq_psnr": mean_lq, "gain": mean - mean_lq });
    let path = out.join("eval.json");
    std::fs::write(&path, serde_json::to_string_pretty(&summary).expect("summary serializes"))
        .map_err(|e| Error::Io { path: path.clone(), source: e })?;

    // Accumulate one row per configuration across seeds.
    let table_path = out.join("ablation.json");
    let mut table: AblationTable = match std::fs::read_to_string(&table_path) {
        Ok(text) => serde_json::from_str(&text).map_err(|e| Error::Corrupt {
            path: table_path.clone(),
            offset: 0,
            msg: e.to_string(),
        })?,
        Err(_) => AblationTable::default(),
    };
    let flags = ablation_flags(&ck);
    table.record(&flags.join(","), flags.clone(), mean, mean_lq);
    std::fs::write(&table_path, table.to_json()).map_err(|e| Error::Io { path: table_path.clone(), source: e })?;
    log.line(&json!({ "mean_psnr": mean, "mean_lq_psnr": mean_lq, "gain": mean - mean_lq }))?;
    println!("mean psnr {mean:.3} dB vs lq {mean_lq:.3} dB (gain {:+.3})", mean - mean_lq);
    print!("{}", table.render());
    Ok(true)
}
