//! Writing synthetic cities to disk.

use std::path::{Path, PathBuf};

use attgate_core::synth::{synth_city, synth_movie, SynthParams};
use chrono::NaiveDate;

use crate::dataset::{write_manifest, ManifestEntry};
use crate::error::{Error, IoContext, Result};
use crate::tmov::{write_tmov, Tmov};

pub const MANIFEST: &str = "manifest.txt";
pub const VAL_MANIFEST: &str = "val_manifest.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct GenOptions {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub days: usize,
    /// Days after the first `days`, listed in a separate validation manifest.
    pub val_days: usize,
    pub start: NaiveDate,
    pub road_density: f64,
    pub city: String,
    pub params: SynthParams,
}

impl Default for GenOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 64,
            width: 56,
            days: 7,
            val_days: 0,
            start: NaiveDate::from_ymd_opt(2019, 1, 1).unwrap(),
            road_density: 0.3,
            city: "synth".into(),
            params: SynthParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Generated {
    pub static_map: PathBuf,
    pub movies: Vec<PathBuf>,
    pub manifest: PathBuf,
    pub val_manifest: Option<PathBuf>,
}

/// One static map, `days + val_days` consecutive movies and their manifests.
pub fn generate(out_dir: &Path, opts: &GenOptions) -> Result<Generated> {
    if opts.days == 0 {
        return Err(Error::Config("days must be at least 1".into()));
    }
    if opts.city.is_empty() || opts.city.contains(char::is_whitespace) || opts.city.contains('/') {
        return Err(Error::Config(format!("city name {:?} must be non-empty without spaces or slashes", opts.city)));
    }
    std::fs::create_dir_all(out_dir).at(out_dir)?;
    let (mut map, _) = synth_city(opts.seed, opts.height, opts.width, opts.road_density).map_err(|e| Error::Config(e.to_string()))?;
    map.city = opts.city.clone();
    let static_map = out_dir.join(format!("{}_static.tmov", opts.city));
    write_tmov(&static_map, &Tmov::from_static(&map))?;
    let mut movies = Vec::new();
    for d in 0..opts.days + opts.val_days {
        let date = opts.start + chrono::Duration::days(d as i64);
        let movie = synth_movie(&map, opts.seed, date, &opts.params)?;
        let path = out_dir.join(format!("{}_{}.tmov", opts.city, date.format("%Y-%m-%d")));
        write_tmov(&path, &Tmov::from_movie(&movie))?;
        movies.push(path);
    }
    let entry = |p: &PathBuf| ManifestEntry { path: p.clone(), city: None };
    let listing = |days: &[PathBuf]| std::iter::once(entry(&static_map)).chain(days.iter().map(entry)).collect::<Vec<_>>();
    let manifest = out_dir.join(MANIFEST);
    write_manifest(&manifest, &listing(&movies[..opts.days]))?;
    let val_manifest = if opts.val_days > 0 {
        let p = out_dir.join(VAL_MANIFEST);
        write_manifest(&p, &listing(&movies[opts.days..]))?;
        Some(p)
    } else {
        None
    };
    Ok(Generated { static_map, movies, manifest, val_manifest })
}
