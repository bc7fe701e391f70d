//! Plain-text dataset manifests, on-disk datasets and the prefetching loader.
//!
//! A manifest lists one TMOV path per line, optionally prefixed with
//! `city=NAME ` to override the city stored in the file. Blank lines and
//! lines starting with `#` are skipped; relative paths resolve against the
//! manifest's directory. Static maps and movies may be mixed; the role byte
//! tells them apart.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use attgate_core::data::{IndexEntry, SourceInfo, Split, FIRST_ANCHOR, WINDOW_FRAMES};
use attgate_core::{assemble_input, assemble_target, DatasetIndex, FeatureFlags, Sample, StaticMap, Tensor};
use chrono::NaiveDate;

use crate::error::{Error, IoContext, Result};
use crate::tmov::{read_header, read_tmov, MovieReader, Role};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub city: Option<String>,
}

pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let (city, rest) = match line.strip_prefix("city=") {
            Some(r) => {
                let (c, p) = r.split_once(char::is_whitespace).ok_or_else(|| Error::Config(format!("manifest line {line:?} has a city but no path")))?;
                (Some(c.to_string()), p.trim())
            }
            None => (None, line),
        };
        let p = Path::new(rest);
        out.push(ManifestEntry { path: if p.is_absolute() { p.to_path_buf() } else { base.join(p) }, city });
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).at(path)?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")))
}

/// Writes entries with paths relative to the manifest's directory where possible.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut text = String::new();
    for e in entries {
        let p = e.path.strip_prefix(base).unwrap_or(&e.path);
        if let Some(c) = &e.city {
            text += &format!("city={c} ");
        }
        text += &format!("{}\n", p.display());
    }
    std::fs::write(path, text).at(path)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MovieSource {
    pub path: PathBuf,
    pub city: String,
    pub date: NaiveDate,
    pub height: usize,
    pub width: usize,
}

/// Movies and static maps named by one or more manifests, plus the index
/// over their anchors.
#[derive(Debug)]
pub struct Dataset {
    pub movies: Vec<MovieSource>,
    pub statics: HashMap<String, StaticMap>,
    pub index: DatasetIndex,
}

impl Dataset {
    pub fn open(manifests: &[PathBuf], split: Split, seed: u64, multi_city: bool) -> Result<Self> {
        let mut entries = Vec::new();
        for m in manifests {
            entries.extend(read_manifest(m)?);
        }
        Self::from_entries(&entries, split, seed, multi_city)
    }

    pub fn from_entries(entries: &[ManifestEntry], split: Split, seed: u64, multi_city: bool) -> Result<Self> {
        let mut movies = Vec::new();
        let mut statics = HashMap::new();
        for e in entries {
            let header = read_header(&e.path)?;
            let city = e.city.clone().unwrap_or_else(|| header.city.clone());
            match header.role {
                Role::Movie => {
                    let date = header.date.ok_or_else(|| Error::format(&e.path, "movie has no date"))?;
                    movies.push(MovieSource { path: e.path.clone(), city, date, height: header.dims[1], width: header.dims[2] });
                }
                Role::Static => {
                    let mut map = read_tmov(&e.path)?.into_static(&e.path)?;
                    map.city = city.clone();
                    statics.insert(city, map);
                }
                other => return Err(Error::format(&e.path, format!("{other:?} files cannot be used as data"))),
            }
        }
        if movies.is_empty() {
            return Err(Error::Config("manifest lists no movies".into()));
        }
        for m in &movies {
            if let Some(s) = statics.get(&m.city) {
                if (s.height(), s.width()) != (m.height, m.width) {
                    return Err(Error::format(&m.path, format!("extent {}x{} differs from the static map of {}", m.height, m.width, m.city)));
                }
            }
        }
        let sources = movies.iter().map(|m| SourceInfo { id: m.path.display().to_string(), city: m.city.clone() }).collect();
        let index = DatasetIndex::build(sources, split, seed, multi_city)?;
        Ok(Self { movies, statics, index })
    }

    /// Fails early when the flags need a static map some city lacks.
    pub fn check_flags(&self, flags: &FeatureFlags) -> Result<()> {
        if flags.static_map {
            if let Some(m) = self.movies.iter().find(|m| !self.statics.contains_key(&m.city)) {
                return Err(Error::Config(format!("static map features are on but city {:?} has no static map", m.city)));
            }
        }
        Ok(())
    }

    pub fn load_sample(&self, entry: IndexEntry) -> Result<Sample> {
        let src = &self.movies[entry.source];
        let mut reader = MovieReader::open(&src.path)?;
        let window = reader.read_frames(entry.anchor - FIRST_ANCHOR, WINDOW_FRAMES)?;
        Sample::from_window(src.city.clone(), src.date, entry.anchor, src.height, src.width, &window)
            .map_err(|e| Error::Data { path: src.path.clone(), source: e })
    }

    pub fn prepare(&self, entry: IndexEntry, flags: &FeatureFlags) -> Result<Prepared> {
        let sample = self.load_sample(entry)?;
        let path = &self.movies[entry.source].path;
        let data_err = |e| Error::Data { path: path.clone(), source: e };
        let input = assemble_input(&sample, self.statics.get(&sample.city), flags).map_err(data_err)?;
        let target = assemble_target(&sample, flags).map_err(data_err)?;
        Ok(Prepared { entry, sample, input, target })
    }
}

/// One sample with its network input and target.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub entry: IndexEntry,
    pub sample: Sample,
    pub input: Tensor<f32>,
    pub target: Tensor<f32>,
}

type Job = (u64, IndexEntry);
type Done = (u64, Result<Prepared>);

/// Worker threads preparing samples ahead of the consumer. Results come back
/// in submission order regardless of which worker finished first.
pub struct Loader {
    jobs: Option<Sender<Job>>,
    done: Receiver<Done>,
    ready: BTreeMap<u64, Result<Prepared>>,
    submitted: u64,
    received: u64,
    workers: Vec<JoinHandle<()>>,
}

impl Loader {
    pub fn new(dataset: Arc<Dataset>, flags: FeatureFlags, workers: usize) -> Self {
        let (job_tx, job_rx) = channel::<Job>();
        let (done_tx, done_rx) = channel::<Done>();
        let job_rx = Arc::new(Mutex::new(job_rx));
        let workers = (0..workers.max(1))
            .map(|_| {
                let (jobs, done, data) = (Arc::clone(&job_rx), done_tx.clone(), Arc::clone(&dataset));
                std::thread::spawn(move || loop {
                    let job = jobs.lock().unwrap().recv();
                    let Ok((seq, entry)) = job else { break };
                    if done.send((seq, data.prepare(entry, &flags))).is_err() {
                        break;
                    }
                })
            })
            .collect();
        Self { jobs: Some(job_tx), done: done_rx, ready: BTreeMap::new(), submitted: 0, received: 0, workers }
    }

    pub fn submit(&mut self, entry: IndexEntry) {
        let seq = self.submitted;
        self.submitted += 1;
        self.jobs.as_ref().unwrap().send((seq, entry)).expect("loader workers stopped");
    }

    pub fn in_flight(&self) -> u64 {
        self.submitted - self.received
    }

    /// The oldest outstanding sample; panics if nothing was submitted.
    pub fn recv(&mut self) -> Result<Prepared> {
        assert!(self.in_flight() > 0, "recv without a pending submission");
        let want = self.received;
        while !self.ready.contains_key(&want) {
            let (seq, item) = self.done.recv().expect("loader workers stopped");
            self.ready.insert(seq, item);
        }
        self.received += 1;
        self.ready.remove(&want).unwrap()
    }
}

impl Drop for Loader {
    fn drop(&mut self) {
        self.jobs.take();
        for h in self.workers.drain(..) {
            let _ = h.join();
        }
    }
}
