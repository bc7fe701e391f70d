//! Traffic movies, static maps, samples and dataset indices.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const FRAMES_PER_DAY: usize = 288;
pub const CHANNELS: usize = 9;
pub const STATIC_CHANNELS: usize = 7;
pub const INPUT_FRAMES: usize = 12;
/// Lead times, in frames, of the predicted frames relative to the anchor.
pub const TARGET_OFFSETS: [usize; 6] = [1, 2, 3, 6, 9, 12];
pub const HORIZONS: usize = TARGET_OFFSETS.len();
pub const FIRST_ANCHOR: usize = INPUT_FRAMES - 1;
pub const LAST_ANCHOR: usize = FRAMES_PER_DAY - 1 - 12;
pub const ANCHORS_PER_DAY: usize = LAST_ANCHOR - FIRST_ANCHOR + 1;
pub const VALIDATION_STRIDE: usize = 24;

/// Channel names in storage order: (volume, speed) per direction, incident last.
pub const CHANNEL_NAMES: [&str; CHANNELS] = [
    "volume_nw",
    "speed_nw",
    "volume_ne",
    "speed_ne",
    "volume_sw",
    "speed_sw",
    "volume_se",
    "speed_se",
    "incident",
];

pub const STATIC_NAMES: [&str; STATIC_CHANNELS] = [
    "junctions",
    "road_proximity",
    "venue_food",
    "venue_shops",
    "venue_parking",
    "venue_transit",
    "venue_other",
];

fn check_extent(frames: usize, height: usize, width: usize, channels: usize, len: usize, what: &str) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidShape(alloc::vec![height, width, channels]));
    }
    if frames * height * width * channels != len {
        return Err(Error::InvalidArgument(format!(
            "{what} payload of {len} bytes does not match {height}x{width}x{channels}"
        )));
    }
    Ok(())
}

/// One day of one city: `(288, H, W, 9)` bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrafficMovie {
    pub city: String,
    pub date: NaiveDate,
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl TrafficMovie {
    pub fn new(city: impl Into<String>, date: NaiveDate, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        check_extent(FRAMES_PER_DAY, height, width, CHANNELS, data.len(), "movie")?;
        Ok(Self { city: city.into(), date, height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> [usize; 4] {
        [FRAMES_PER_DAY, self.height, self.width, CHANNELS]
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * CHANNELS
    }

    pub fn frame(&self, t: usize) -> &[u8] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }
}

/// Per-city static features: `(H, W, 7)` bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StaticMap {
    pub city: String,
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl StaticMap {
    pub fn new(city: impl Into<String>, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        check_extent(1, height, width, STATIC_CHANNELS, data.len(), "static map")?;
        Ok(Self { city: city.into(), height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, STATIC_CHANNELS]
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }
}

/// One training example anchored at frame `t`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub city: String,
    pub date: NaiveDate,
    pub t: usize,
    pub height: usize,
    pub width: usize,
    /// Frames `t-11..=t`, each `(H, W, 9)`, concatenated.
    pub input_frames: Vec<u8>,
    /// Frames `t + TARGET_OFFSETS[k]`, concatenated.
    pub target_frames: Vec<u8>,
}

impl Sample {
    /// Monday-based day index.
    pub fn weekday(&self) -> usize {
        chrono::Datelike::weekday(&self.date).num_days_from_monday() as usize
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * CHANNELS
    }

    pub fn input_frame(&self, k: usize) -> &[u8] {
        let n = self.frame_len();
        &self.input_frames[k * n..(k + 1) * n]
    }

    pub fn target_frame(&self, k: usize) -> &[u8] {
        let n = self.frame_len();
        &self.target_frames[k * n..(k + 1) * n]
    }

    /// Builds a sample from the 24 consecutive frames `t-11..=t+12`.
    pub fn from_window(city: impl Into<String>, date: NaiveDate, t: usize, height: usize, width: usize, window: &[u8]) -> Result<Self> {
        check_anchor(t)?;
        let n = height * width * CHANNELS;
        if window.len() != WINDOW_FRAMES * n {
            return Err(Error::InvalidArgument(format!(
                "window of {} bytes, expected {} frames of {n}",
                window.len(),
                WINDOW_FRAMES
            )));
        }
        let input_frames = window[..INPUT_FRAMES * n].to_vec();
        let mut target_frames = Vec::with_capacity(HORIZONS * n);
        for off in TARGET_OFFSETS {
            let k = FIRST_ANCHOR + off;
            target_frames.extend_from_slice(&window[k * n..(k + 1) * n]);
        }
        Ok(Self { city: city.into(), date, t, height, width, input_frames, target_frames })
    }
}

/// Frames spanned by one sample, from the first input to the last target.
pub const WINDOW_FRAMES: usize = INPUT_FRAMES + 12;

pub fn check_anchor(t: usize) -> Result<()> {
    if !(FIRST_ANCHOR..=LAST_ANCHOR).contains(&t) {
        return Err(Error::IndexOutOfRange {
            index: t as i64,
            lo: FIRST_ANCHOR as i64,
            hi: LAST_ANCHOR as i64,
        });
    }
    Ok(())
}

pub fn extract_sample(movie: &TrafficMovie, t: usize) -> Result<Sample> {
    check_anchor(t)?;
    let n = movie.frame_len();
    let start = (t - FIRST_ANCHOR) * n;
    Sample::from_window(
        movie.city.clone(),
        movie.date,
        t,
        movie.height,
        movie.width,
        &movie.data[start..start + WINDOW_FRAMES * n],
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "val",
        }
    }
}

/// Identity of one movie known to an index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SourceInfo {
    pub id: String,
    pub city: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IndexEntry {
    /// Position in [`DatasetIndex::sources`].
    pub source: usize,
    pub anchor: usize,
}

/// Ordered `(movie, anchor)` pairs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetIndex {
    pub sources: Vec<SourceInfo>,
    pub split: Split,
    pub seed: u64,
    pub multi_city: bool,
    entries: Vec<IndexEntry>,
}

impl DatasetIndex {
    /// Training indices hold every valid anchor in a seeded shuffle; validation
    /// indices hold anchors `11, 35, 59, ...` in file order. With `multi_city`
    /// the cities are interleaved round-robin.
    pub fn build(sources: Vec<SourceInfo>, split: Split, seed: u64, multi_city: bool) -> Result<Self> {
        if sources.is_empty() {
            return Err(Error::InvalidArgument("dataset index needs at least one movie".into()));
        }
        let mut index = Self { sources, split, seed, multi_city, entries: Vec::new() };
        index.entries = index.epoch(0);
        Ok(index)
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn cities(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for s in &self.sources {
            if !out.contains(&s.city.as_str()) {
                out.push(&s.city);
            }
        }
        out
    }

    fn anchors(&self) -> impl Iterator<Item = usize> + Clone {
        let stride = match self.split {
            Split::Train => 1,
            Split::Validation => VALIDATION_STRIDE,
        };
        (FIRST_ANCHOR..=LAST_ANCHOR).step_by(stride)
    }

    /// Entry order for pass `epoch` over the data. Training splits reshuffle
    /// with a stream derived from `(seed, epoch)`; validation order is fixed.
    pub fn epoch(&self, epoch: u64) -> Vec<IndexEntry> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        let shuffle = self.split == Split::Train;
        let groups: Vec<Vec<usize>> = if self.multi_city {
            self.cities()
                .iter()
                .map(|c| (0..self.sources.len()).filter(|&i| self.sources[i].city == *c).collect())
                .collect()
        } else {
            alloc::vec![(0..self.sources.len()).collect()]
        };
        let mut lists: Vec<Vec<IndexEntry>> = groups
            .iter()
            .map(|g| {
                let mut list: Vec<IndexEntry> = g
                    .iter()
                    .flat_map(|&source| self.anchors().map(move |anchor| IndexEntry { source, anchor }))
                    .collect();
                if shuffle {
                    list.shuffle(&mut rng);
                }
                list
            })
            .collect();
        if lists.len() == 1 {
            return lists.pop().unwrap();
        }
        let longest = lists.iter().map(Vec::len).max().unwrap_or(0);
        let mut out = Vec::with_capacity(lists.iter().map(Vec::len).sum());
        for k in 0..longest {
            for list in &lists {
                if let Some(e) = list.get(k) {
                    out.push(*e);
                }
            }
        }
        out
    }

    /// Endless iterator over consecutive epochs.
    pub fn cursor(&self) -> EpochCursor<'_> {
        EpochCursor { index: self, epoch: 0, order: self.entries.clone(), pos: 0 }
    }
}

/// Walks consecutive epochs of a [`DatasetIndex`].
pub struct EpochCursor<'a> {
    index: &'a DatasetIndex,
    epoch: u64,
    order: Vec<IndexEntry>,
    pos: usize,
}

impl EpochCursor<'_> {
    /// Skips `n` entries, e.g. to resume a run.
    pub fn fast_forward(&mut self, n: u64) {
        let len = self.order.len() as u64;
        let total = self.pos as u64 + n;
        let target_epoch = self.epoch + total / len;
        if target_epoch != self.epoch {
            self.epoch = target_epoch;
            self.order = self.index.epoch(self.epoch);
        }
        self.pos = (total % len) as usize;
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }
}

impl Iterator for EpochCursor<'_> {
    type Item = IndexEntry;

    fn next(&mut self) -> Option<IndexEntry> {
        if self.pos == self.order.len() {
            self.epoch += 1;
            self.order = self.index.epoch(self.epoch);
            self.pos = 0;
        }
        let e = self.order[self.pos];
        self.pos += 1;
        Some(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    fn ramp_movie(h: usize, w: usize) -> TrafficMovie {
        let n = h * w * CHANNELS;
        let data = (0..FRAMES_PER_DAY * n).map(|i| (i / n) as u8).collect();
        TrafficMovie::new("X", NaiveDate::from_ymd_opt(2019, 1, 1).unwrap(), h, w, data).unwrap()
    }

    fn sources(cities: &[(&str, usize)]) -> Vec<SourceInfo> {
        cities
            .iter()
            .flat_map(|&(c, n)| (0..n).map(move |i| SourceInfo { id: format!("{c}-{i}"), city: c.to_string() }))
            .collect()
    }

    #[test]
    fn anchor_constants() {
        assert_eq!((FIRST_ANCHOR, LAST_ANCHOR, ANCHORS_PER_DAY), (11, 275, 265));
    }

    #[test]
    fn first_anchor_frames() {
        let s = extract_sample(&ramp_movie(2, 3), 11).unwrap();
        let inputs: Vec<u8> = (0..12).map(|k| s.input_frame(k)[0]).collect();
        assert_eq!(inputs, (0..12).collect::<Vec<u8>>());
        let targets: Vec<u8> = (0..6).map(|k| s.target_frame(k)[0]).collect();
        assert_eq!(targets, [12, 13, 14, 17, 20, 23]);
        assert!(s.input_frame(3).iter().all(|&v| v == 3));
    }

    #[test]
    fn last_anchor_reaches_final_frame() {
        let s = extract_sample(&ramp_movie(2, 2), 275).unwrap();
        assert_eq!(s.target_frame(5)[0], (287 % 256) as u8);
        assert_eq!(s.input_frame(0)[0], (264 % 256) as u8);
    }

    #[test]
    fn out_of_range_anchor() {
        let m = ramp_movie(2, 2);
        for t in [0, 10, 276, 400] {
            assert!(matches!(extract_sample(&m, t), Err(Error::IndexOutOfRange { .. })));
        }
    }

    #[test]
    fn rejects_bad_payload() {
        let d = NaiveDate::from_ymd_opt(2019, 1, 1).unwrap();
        assert!(TrafficMovie::new("X", d, 2, 2, vec![0; 10]).is_err());
        assert!(StaticMap::new("X", 2, 2, vec![0; 27]).is_err());
        assert!(StaticMap::new("X", 2, 2, vec![0; 28]).is_ok());
    }

    #[test]
    fn twenty_days_of_anchors() {
        let idx = DatasetIndex::build(sources(&[("A", 20)]), Split::Train, 5, false).unwrap();
        assert_eq!(idx.len(), 20 * 265);
        let mut seen: Vec<_> = idx.entries().iter().map(|e| (e.source, e.anchor)).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 5300);
        assert_eq!(idx, DatasetIndex::build(sources(&[("A", 20)]), Split::Train, 5, false).unwrap());
        assert_ne!(idx.entries(), DatasetIndex::build(sources(&[("A", 20)]), Split::Train, 6, false).unwrap().entries());
    }

    #[test]
    fn validation_stride() {
        let idx = DatasetIndex::build(sources(&[("A", 2)]), Split::Validation, 5, false).unwrap();
        let anchors: Vec<usize> = idx.entries().iter().take(12).map(|e| e.anchor).collect();
        assert_eq!(anchors, [11, 35, 59, 83, 107, 131, 155, 179, 203, 227, 251, 275]);
        assert_eq!(idx.len(), 24);
        assert_eq!(idx.epoch(3), idx.entries());
    }

    #[test]
    fn multi_city_round_robin() {
        let idx = DatasetIndex::build(sources(&[("A", 2), ("B", 1), ("C", 3)]), Split::Train, 1, true).unwrap();
        let cities: Vec<&str> = idx.entries().iter().take(9).map(|e| idx.sources[e.source].city.as_str()).collect();
        assert_eq!(cities, ["A", "B", "C", "A", "B", "C", "A", "B", "C"]);
        assert_eq!(idx.len(), 6 * 265);
    }

    #[test]
    fn cursor_reshuffles_and_skips() {
        let idx = DatasetIndex::build(sources(&[("A", 1)]), Split::Train, 9, false).unwrap();
        let walked: Vec<_> = idx.cursor().take(600).collect();
        assert_eq!(&walked[..265], idx.entries());
        assert_eq!(&walked[265..530], idx.epoch(1).as_slice());
        assert_ne!(idx.epoch(1), idx.epoch(0));
        let mut c = idx.cursor();
        c.fast_forward(400);
        assert_eq!(c.epoch(), 1);
        let rest: Vec<_> = c.take(200).collect();
        assert_eq!(rest, walked[400..600]);
    }
}
