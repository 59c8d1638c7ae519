use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::config::{RunConfig, SplitSource, Variant};
use crate::contrastive::{
    adapt_step, estimate_fisher, AdaptConfig, AdaptOptim, AdaptRecord, AdaptRngs, FisherAnchor, ProjectionConfig,
    SiameseState,
};
use crate::detector::{
    decoder_update, evaluate, gen_scenes, no_ewc_variant, read_split, Annotation, BatchSampler, BurnInConfig,
    BurnInState, DetLoss, DetLossConfig, DetTrainer, DetectorModel, Domain, EvalReport, Scene, Stage3Mode, CLASS_NAMES,
};
use crate::fourier::{fda_translate, ImagePlane};
use crate::rng::{indexed, stream, Stream};
use crate::tensor::{save_checkpoint, ParamSet};
use crate::{Error, Result};

/// The four splits a run uses.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub day_train: Vec<Scene>,
    pub day_val: Vec<Scene>,
    pub night_val: Vec<Scene>,
    pub night_pool: Vec<Scene>,
}

fn load_split(src: &SplitSource, seed: u64, family: u64, domain: Domain) -> Result<Vec<Scene>> {
    let scenes = match src {
        SplitSource::Synthetic(n) => gen_scenes(seed, family, *n, domain),
        SplitSource::Dir(dir) => read_split(dir, domain)?,
    };
    if scenes.is_empty() {
        return Err(Error::invalid("dataset", format!("split {src:?} is empty")));
    }
    Ok(scenes)
}

impl Datasets {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let d = &cfg.data;
        Ok(Self {
            day_train: load_split(&d.day_train, cfg.seed, 0, Domain::Day)?,
            day_val: load_split(&d.day_val, cfg.seed, 1, Domain::Day)?,
            night_val: load_split(&d.night_val, cfg.seed, 2, Domain::Night)?,
            night_pool: load_split(&d.night_pool, cfg.seed, 3, Domain::Night)?,
        })
    }
}

pub fn burn_in_config(cfg: &RunConfig) -> BurnInConfig {
    BurnInConfig {
        iters: cfg.burn_in_iters,
        batch_size: cfg.burn_in_batch,
        sgd: cfg.det_sgd,
        loss: DetLossConfig {
            pos_weight: cfg.pos_weight,
        },
        backbone: cfg.backbone,
    }
}

/// Stage 1. The returned state can be cloned and shared by several variants.
pub fn run_burn_in(cfg: &RunConfig, data: &Datasets) -> Result<BurnInState> {
    let bcfg = burn_in_config(cfg);
    let mut state = BurnInState::new(&bcfg, cfg.seed, data.day_train.len())?;
    state.run(&data.day_train, cfg.burn_in_iters)?;
    Ok(state)
}

/// Everything a finished variant produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub variant: Variant,
    pub burn_in_model: DetectorModel,
    pub model: DetectorModel,
    pub burn_in_log: Vec<DetLoss>,
    pub adapt_log: Vec<AdaptRecord>,
    /// Stage-3, direct fine-tuning or extended burn-in steps.
    pub finetune_log: Vec<DetLoss>,
    pub query_f: Option<ParamSet>,
    pub anchor: Option<FisherAnchor>,
    pub day: EvalReport,
    pub night: EvalReport,
}

fn images<'a>(scenes: &[&'a Scene]) -> Vec<&'a ImagePlane> {
    scenes.iter().map(|s| &s.image).collect()
}

/// Stages 2-3 for `cfg.variant` starting from a finished burn-in, then
/// evaluation on both validation splits.
pub fn run_variant(cfg: &RunConfig, data: &Datasets, burn: &BurnInState) -> Result<RunOutcome> {
    cfg.validate()?;
    let loss_cfg = DetLossConfig {
        pos_weight: cfg.pos_weight,
    };
    let variant = cfg.variant;
    let mut model = burn.model.clone();
    let mut adapt_log = Vec::new();
    let mut finetune_log = Vec::new();
    let mut query_f = None;
    let mut anchor_out = None;
    let night_pool: Vec<&ImagePlane> = data.night_pool.iter().map(|s| &s.image).collect();
    let train = &data.day_train;

    match variant {
        Variant::Day2NightBaseline => {}
        Variant::DayLonger => {
            let mut state = burn.clone();
            state.run(train, cfg.adapt_iters)?;
            finetune_log = state.history[burn.history.len()..].to_vec();
            model = state.model;
        }
        Variant::FourierFt => {
            let mut rngs = AdaptRngs::new(cfg.seed);
            let mut sampler =
                BatchSampler::new(stream(cfg.seed, Stream::DecoderBatch), train.len(), cfg.decoder_batch)?;
            let mut trainer = DetTrainer::new(cfg.det_sgd, loss_cfg);
            for it in 0..cfg.adapt_iters {
                let batch = sampler.next_batch(train);
                let translated = rngs
                    .translate_batch(&images(&batch), &night_pool, &cfg.beta)
                    .map_err(|e| e.in_stage("fourier-ft", it))?;
                let imgs: Vec<&ImagePlane> = translated.iter().collect();
                let anns: Vec<&[Annotation]> = batch.iter().map(|s| s.annotations.as_slice()).collect();
                let l = trainer
                    .step_images(&mut model, &imgs, &anns, true)
                    .map_err(|e| e.in_stage("fourier-ft", it))?;
                finetune_log.push(l);
            }
        }
        Variant::FdclEwc | Variant::FdclEwc2w | Variant::NoEwcCropped | Variant::NoEwcFull => {
            let day_refs: Vec<&Scene> = train.iter().collect();
            let anchor = estimate_fisher(&model, &day_refs, cfg.fisher_samples, &loss_cfg)
                .map_err(|e| e.in_stage("fisher", 0))?;
            let proj = ProjectionConfig {
                feature_dim: cfg.backbone.feature_dim,
                ..ProjectionConfig::default()
            };
            let mut state = SiameseState::new(
                &model.features,
                &proj,
                cfg.mu_key,
                &mut indexed(cfg.seed, Stream::Init, 1, 0),
            )?;
            let no_ewc = matches!(variant, Variant::NoEwcCropped | Variant::NoEwcFull);
            let adapt_cfg = AdaptConfig {
                lambda_ewc: if no_ewc { 0.0 } else { cfg.lambda_ewc },
                sgd: cfg.adapt_sgd,
                beta: cfg.beta.clone(),
                crop_probability: if variant == Variant::NoEwcFull {
                    0.0
                } else {
                    cfg.crop_probability
                },
            };
            let mode = if variant == Variant::FdclEwc2w {
                Stage3Mode::TwoWay
            } else {
                Stage3Mode::OneWay
            };
            let mut rngs = AdaptRngs::new(cfg.seed);
            let mut optim = AdaptOptim::new(cfg.adapt_sgd);
            let mut adapt_sampler =
                BatchSampler::new(stream(cfg.seed, Stream::AdaptBatch), train.len(), cfg.adapt_batch)?;
            let mut dec_sampler =
                BatchSampler::new(stream(cfg.seed, Stream::DecoderBatch), train.len(), cfg.decoder_batch)?;
            let mut trainer = DetTrainer::new(cfg.det_sgd, loss_cfg);
            for it in 0..cfg.adapt_iters {
                let batch = adapt_sampler.next_batch(train);
                let rec = adapt_step(
                    &mut state,
                    &anchor,
                    &images(&batch),
                    &night_pool,
                    &mut rngs,
                    &adapt_cfg,
                    &mut optim,
                )
                .map_err(|e| e.in_stage("stage-2", it))?;
                log::trace!("stage-2 step {it}: fcl {:.5} ewc {:.3e}", rec.l_fcl, rec.l_ewc);
                adapt_log.push(rec);
                if no_ewc {
                    continue;
                }
                let batches: Vec<Vec<&Scene>> = (0..cfg.decoder_steps_per_iter)
                    .map(|_| dec_sampler.next_batch(train))
                    .collect();
                let ls = decoder_update(
                    &mut model,
                    &mut state.query_f,
                    &batches,
                    mode,
                    cfg.mu_backsignal,
                    &mut trainer,
                )
                .map_err(|e| e.in_stage("stage-3", it))?;
                finetune_log.extend(ls);
            }
            if no_ewc {
                no_ewc_variant(&mut model, &state.query_f, cfg.mu_no_ewc)?;
            }
            query_f = Some(state.query_f);
            anchor_out = Some(anchor);
        }
    }

    let day_refs: Vec<&Scene> = data.day_val.iter().collect();
    let night_refs: Vec<&Scene> = data.night_val.iter().collect();
    let day = evaluate(&model, &day_refs).map_err(|e| e.in_stage("evaluate", 0))?;
    let night = evaluate(&model, &night_refs).map_err(|e| e.in_stage("evaluate", 0))?;
    log::info!(
        "{variant}: day AP50 {:.4} AP {:.4} | night AP50 {:.4} AP {:.4}",
        day.ap50.mean,
        day.ap.mean,
        night.ap50.mean,
        night.ap.mean
    );
    Ok(RunOutcome {
        variant,
        burn_in_model: burn.model.clone(),
        model,
        burn_in_log: burn.history.clone(),
        adapt_log,
        finetune_log,
        query_f,
        anchor: anchor_out,
        day,
        night,
    })
}

fn fmt_ap(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"))
}

pub fn metrics_csv(r: &EvalReport) -> String {
    let mut s = String::from("class,ap50,ap\n");
    for (k, name) in CLASS_NAMES.iter().enumerate() {
        writeln!(
            s,
            "{name},{},{}",
            fmt_ap(r.ap50.per_class[k]),
            fmt_ap(r.ap.per_class[k])
        )
        .expect("string write");
    }
    writeln!(s, "mean,{:.6},{:.6}", r.ap50.mean, r.ap.mean).expect("string write");
    s
}

fn det_loss_csv(log: &[DetLoss]) -> String {
    let mut s = String::from("step,l_cls,l_boxreg,combined\n");
    for (i, l) in log.iter().enumerate() {
        writeln!(s, "{},{:.8},{:.8},{:.8}", i + 1, l.l_cls, l.l_boxreg, l.combined()).expect("string write");
    }
    s
}

pub fn adapt_loss_csv(log: &[AdaptRecord]) -> String {
    let mut s = String::from("step,l_fcl,l_ewc,combined\n");
    for (i, r) in log.iter().enumerate() {
        writeln!(s, "{},{:.8},{:.8e},{:.8}", i + 1, r.l_fcl, r.l_ewc, r.combined).expect("string write");
    }
    s
}

/// Day image, night target and translations at a few betas, one row per pair.
pub fn translation_grid(day: &[&ImagePlane], night: &[&ImagePlane], betas: &[f64]) -> Result<ImagePlane> {
    let rows = day
        .iter()
        .zip(night)
        .map(|(d, n)| {
            let mut row = vec![(*d).clone(), n.resize_nearest(d.height(), d.width())];
            for &b in betas {
                row.push(fda_translate(d, n, b)?);
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    ImagePlane::grid(&rows, 2)
}

pub const SUMMARY_FILE: &str = "summary.txt";

/// Writes every artifact of a finished run into `dir`; `summary.txt` last.
pub fn write_artifacts(dir: &Path, cfg: &RunConfig, data: &Datasets, out: &RunOutcome) -> Result<()> {
    fs::create_dir_all(dir.join("checkpoints"))?;
    fs::create_dir_all(dir.join("samples"))?;
    fs::write(dir.join("config.txt"), cfg.to_config_string())?;
    fs::write(dir.join("loss_burn_in.csv"), det_loss_csv(&out.burn_in_log))?;
    if out.variant.is_contrastive() {
        fs::write(dir.join("loss_adapt.csv"), adapt_loss_csv(&out.adapt_log))?;
    }
    if !out.finetune_log.is_empty() {
        fs::write(dir.join("loss_finetune.csv"), det_loss_csv(&out.finetune_log))?;
    }
    fs::write(dir.join("metrics_day.csv"), metrics_csv(&out.day))?;
    fs::write(dir.join("metrics_night.csv"), metrics_csv(&out.night))?;
    save_checkpoint(&dir.join("checkpoints/burn_in.fdcl"), &out.burn_in_model.to_params())?;
    save_checkpoint(&dir.join("checkpoints/final.fdcl"), &out.model.to_params())?;
    if let Some(q) = &out.query_f {
        save_checkpoint(&dir.join("checkpoints/query_features.fdcl"), q)?;
    }
    let n = 4.min(data.day_train.len()).min(data.night_pool.len());
    let day: Vec<&ImagePlane> = data.day_train[..n].iter().map(|s| &s.image).collect();
    let night: Vec<&ImagePlane> = data.night_pool[..n].iter().map(|s| &s.image).collect();
    translation_grid(&day, &night, &[0.01, 0.05, 0.1])?.save(&dir.join("samples/translations.png"))?;

    let last = out.adapt_log.last();
    let mut s = String::new();
    let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
    kv("variant", out.variant.to_string());
    kv("seed", cfg.seed.to_string());
    kv("day_ap", format!("{:.6}", out.day.ap.mean));
    kv("day_ap50", format!("{:.6}", out.day.ap50.mean));
    kv("night_ap", format!("{:.6}", out.night.ap.mean));
    kv("night_ap50", format!("{:.6}", out.night.ap50.mean));
    kv(
        "final_l_fcl",
        last.map_or_else(|| "nan".into(), |r| format!("{:.8}", r.l_fcl)),
    );
    kv(
        "final_l_ewc",
        last.map_or_else(|| "nan".into(), |r| format!("{:.8e}", r.l_ewc)),
    );
    kv("status", "complete".into());
    fs::write(dir.join(SUMMARY_FILE), s)?;
    Ok(())
}

/// Full run: data, burn-in, variant, artifacts under `cfg.out_dir`.
pub fn cmd_run(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir)?;
    // Frozen config first, so even a failed run records what it tried.
    fs::write(cfg.out_dir.join("config.txt"), cfg.to_config_string())?;
    let data = Datasets::load(cfg)?;
    log::info!(
        "{} train / {} day val / {} night val / {} night pool scenes",
        data.day_train.len(),
        data.day_val.len(),
        data.night_val.len(),
        data.night_pool.len()
    );
    let burn = run_burn_in(cfg, &data)?;
    let out = run_variant(cfg, &data, &burn)?;
    write_artifacts(&cfg.out_dir, cfg, &data, &out)?;
    Ok(out)
}
