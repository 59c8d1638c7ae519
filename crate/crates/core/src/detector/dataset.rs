//! Split directories: PNG images plus `annotations.txt` with one
//! `filename class_id x1 y1 x2 y2` line per object. Images without objects
//! are listed on a line holding only the filename.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::scene::{Annotation, BBox, Domain, Scene};
use super::NUM_CLASSES;
use crate::fourier::ImagePlane;
use crate::{Error, Result};

pub const ANNOTATION_FILE: &str = "annotations.txt";

pub fn write_split(dir: &Path, scenes: &[Scene]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (i, s) in scenes.iter().enumerate() {
        let name = format!("{i:05}.png");
        s.image.save(&dir.join(&name))?;
        if s.annotations.is_empty() {
            writeln!(manifest, "{name}").expect("string write");
        }
        for a in &s.annotations {
            let b = &a.bbox;
            writeln!(manifest, "{name} {} {} {} {} {}", a.class_id, b.x1, b.y1, b.x2, b.y2).expect("string write");
        }
    }
    fs::write(dir.join(ANNOTATION_FILE), manifest)?;
    Ok(())
}

pub fn read_split(dir: &Path, domain: Domain) -> Result<Vec<Scene>> {
    let path = dir.join(ANNOTATION_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::Dataset {
        path: path.clone(),
        msg: e.to_string(),
    })?;
    let bad = |line: usize, msg: String| Error::Dataset {
        path: path.clone(),
        msg: format!("line {line}: {msg}"),
    };
    let mut by_file: BTreeMap<String, Vec<Annotation>> = BTreeMap::new();
    for (ln, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            [] => {}
            [name] => {
                by_file.entry(name.to_string()).or_default();
            }
            [name, cls, x1, y1, x2, y2] => {
                let class_id: usize = cls.parse().map_err(|_| bad(ln + 1, format!("bad class `{cls}`")))?;
                if class_id >= NUM_CLASSES {
                    return Err(bad(ln + 1, format!("class {class_id} out of range")));
                }
                let mut c = [0f32; 4];
                for (v, s) in c.iter_mut().zip([x1, y1, x2, y2]) {
                    *v = s.parse().map_err(|_| bad(ln + 1, format!("bad coordinate `{s}`")))?;
                }
                let bbox = BBox::new(c[0], c[1], c[2], c[3]).map_err(|e| bad(ln + 1, e.to_string()))?;
                by_file
                    .entry(name.to_string())
                    .or_default()
                    .push(Annotation { class_id, bbox });
            }
            _ => return Err(bad(ln + 1, format!("expected 1 or 6 fields, got {}", fields.len()))),
        }
    }
    by_file
        .into_iter()
        .map(|(name, annotations)| {
            Ok(Scene {
                image: ImagePlane::load(&dir.join(&name))?,
                annotations,
                domain,
            })
        })
        .collect()
}
