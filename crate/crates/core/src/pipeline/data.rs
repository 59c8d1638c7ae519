use std::path::{Path, PathBuf};

use super::config::{RunConfig, SplitSource};
use super::run::Datasets;
use crate::detector::write_split;
use crate::Result;

/// Writes the four splits of `cfg` under `out` and returns a config whose
/// data keys point at them.
pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<RunConfig> {
    let data = Datasets::load(cfg)?;
    let mut next = cfg.clone();
    let splits: [(&str, &Vec<_>, &mut SplitSource); 4] = [
        ("day_train", &data.day_train, &mut next.data.day_train),
        ("day_val", &data.day_val, &mut next.data.day_val),
        ("night_val", &data.night_val, &mut next.data.night_val),
        ("night_pool", &data.night_pool, &mut next.data.night_pool),
    ];
    for (name, scenes, slot) in splits {
        let dir: PathBuf = out.join(name);
        write_split(&dir, scenes)?;
        *slot = SplitSource::Dir(dir);
    }
    std::fs::write(out.join("data.txt"), next.to_config_string())?;
    Ok(next)
}
