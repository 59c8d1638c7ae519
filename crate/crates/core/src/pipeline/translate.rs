use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use super::run::translation_grid;
use crate::fourier::{fda_translate, BetaSchedule, ImagePlane};
use crate::rng::{indexed, Stream};
use crate::{Error, Result};

/// Betas shown side by side in the sweep grid.
pub const SWEEP_BETAS: [f64; 4] = [0.001, 0.01, 0.05, 0.1];

#[derive(Debug, Clone)]
pub struct TranslateOptions {
    pub src_dir: PathBuf,
    pub night_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Fixed beta; `None` samples from `schedule` per image.
    pub beta: Option<f64>,
    pub schedule: BetaSchedule,
    pub seed: u64,
    pub sweep: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TranslateSummary {
    pub written: Vec<PathBuf>,
    pub skipped: Vec<PathBuf>,
    pub betas: Vec<f64>,
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Dataset {
            path: dir.to_path_buf(),
            msg: e.to_string(),
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "ppm" | "pgm" | "pnm"))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn load_all(dir: &Path, skipped: &mut Vec<PathBuf>) -> Result<Vec<(PathBuf, ImagePlane)>> {
    let mut out = Vec::new();
    for p in image_files(dir)? {
        match ImagePlane::load(&p) {
            Ok(img) => out.push((p, img)),
            Err(e) => {
                log::warn!("skipping {}: {e}", p.display());
                skipped.push(p);
            }
        }
    }
    Ok(out)
}

/// Translates every source image towards a night image drawn per source.
pub fn cmd_translate(opts: &TranslateOptions) -> Result<TranslateSummary> {
    if let Some(b) = opts.beta {
        BetaSchedule::constant(b).map_err(|e| Error::config("--beta", e.to_string()))?;
    }
    let mut skipped = Vec::new();
    let night = load_all(&opts.night_dir, &mut skipped)?;
    if night.is_empty() {
        return Err(Error::Dataset {
            path: opts.night_dir.clone(),
            msg: "no readable night images".into(),
        });
    }
    let src = load_all(&opts.src_dir, &mut skipped)?;
    if src.is_empty() {
        return Err(Error::Dataset {
            path: opts.src_dir.clone(),
            msg: "no readable source images".into(),
        });
    }
    fs::create_dir_all(&opts.out_dir)?;
    let mut written = Vec::new();
    let mut betas = Vec::new();
    let mut pairs = Vec::new();
    for (i, (path, img)) in src.iter().enumerate() {
        let mut rng = indexed(opts.seed, Stream::Translate, 0, i as u64);
        let target = &night[rng.random_range(0..night.len())].1;
        let beta = opts.beta.unwrap_or_else(|| opts.schedule.sample(&mut rng));
        let out = fda_translate(img, target, beta)?;
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let dst = opts.out_dir.join(format!("{name}.png"));
        out.save(&dst)?;
        log::debug!("{} -> {} (beta {beta})", path.display(), dst.display());
        written.push(dst);
        betas.push(beta);
        pairs.push((img, target));
    }
    if opts.sweep {
        let n = pairs.len().min(4);
        let day: Vec<&ImagePlane> = pairs[..n].iter().map(|p| p.0).collect();
        let tgt: Vec<&ImagePlane> = pairs[..n].iter().map(|p| p.1).collect();
        let dst = opts.out_dir.join("beta_sweep.png");
        translation_grid(&day, &tgt, &SWEEP_BETAS)?.save(&dst)?;
        written.push(dst);
    }
    Ok(TranslateSummary {
        written,
        skipped,
        betas,
    })
}
