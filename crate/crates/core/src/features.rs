//! Input and target assembly, including the weekday and time-of-day planes.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use chrono::{Datelike, NaiveDate};

use crate::data::{Sample, StaticMap, CHANNELS, CHANNEL_NAMES, FRAMES_PER_DAY, HORIZONS, INPUT_FRAMES, STATIC_CHANNELS, STATIC_NAMES, TARGET_OFFSETS};
use crate::error::{mismatch, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeEncoding {
    pub cos: f64,
    pub sin: f64,
}

/// Position of five-minute slot `t` on the unit circle.
pub fn time_encode(t: usize) -> Result<TimeEncoding> {
    if t >= FRAMES_PER_DAY {
        return Err(Error::IndexOutOfRange { index: t as i64, lo: 0, hi: FRAMES_PER_DAY as i64 - 1 });
    }
    let angle = t as f64 * 2.0 * core::f64::consts::PI / FRAMES_PER_DAY as f64;
    Ok(TimeEncoding { cos: libm::cos(angle), sin: libm::sin(angle) })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeekdayEncoding {
    pub onehot: [f32; 7],
}

impl WeekdayEncoding {
    pub fn index(&self) -> usize {
        self.onehot.iter().position(|&v| v == 1.0).unwrap()
    }
}

/// One-hot day of week, Monday at index 0.
pub fn weekday_encode(date: NaiveDate) -> WeekdayEncoding {
    let mut onehot = [0.0; 7];
    onehot[date.weekday().num_days_from_monday() as usize] = 1.0;
    WeekdayEncoding { onehot }
}

pub fn weekday_encode_ymd(year: i32, month: u32, day: u32) -> Result<WeekdayEncoding> {
    NaiveDate::from_ymd_opt(year, month, day)
        .map(weekday_encode)
        .ok_or_else(|| Error::InvalidDate(format!("{year:04}-{month:02}-{day:02}")))
}

/// Which optional input groups are present, and how many channels of each
/// target frame are predicted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureFlags {
    pub static_map: bool,
    pub weekday: bool,
    pub time: bool,
    pub target_channels: usize,
}

impl Default for FeatureFlags {
    fn default() -> Self {
        Self { static_map: true, weekday: true, time: true, target_channels: CHANNELS }
    }
}

impl FeatureFlags {
    pub fn dynamic_only() -> Self {
        Self { static_map: false, weekday: false, time: false, ..Self::default() }
    }

    pub fn input_channels(&self) -> usize {
        INPUT_FRAMES * CHANNELS
            + if self.static_map { STATIC_CHANNELS } else { 0 }
            + if self.weekday { 7 } else { 0 }
            + if self.time { 2 } else { 0 }
    }

    pub fn output_channels(&self) -> usize {
        HORIZONS * self.target_channels
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=CHANNELS).contains(&self.target_channels) {
            return Err(Error::InvalidConfig(format!(
                "target_channels must be in 1..={CHANNELS}, got {}",
                self.target_channels
            )));
        }
        Ok(())
    }
}

/// Names of every input and output channel, in order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelLayout {
    pub flags: FeatureFlags,
    pub input: Vec<String>,
    pub output: Vec<String>,
}

const WEEKDAYS: [&str; 7] = ["mon", "tue", "wed", "thu", "fri", "sat", "sun"];

impl ChannelLayout {
    pub fn new(flags: FeatureFlags) -> Result<Self> {
        flags.validate()?;
        let mut input = Vec::with_capacity(flags.input_channels());
        for k in 0..INPUT_FRAMES {
            let lag = INPUT_FRAMES - 1 - k;
            input.extend(CHANNEL_NAMES.iter().map(|c| format!("frame_t-{lag}.{c}")));
        }
        if flags.static_map {
            input.extend(STATIC_NAMES.iter().map(|s| format!("static.{s}")));
        }
        if flags.weekday {
            input.extend(WEEKDAYS.iter().map(|d| format!("weekday.{d}")));
        }
        if flags.time {
            input.push("time.cos".to_string());
            input.push("time.sin".to_string());
        }
        let mut output = Vec::with_capacity(flags.output_channels());
        for off in TARGET_OFFSETS {
            output.extend(CHANNEL_NAMES[..flags.target_channels].iter().map(|c| format!("frame_t+{off}.{c}")));
        }
        Ok(Self { flags, input, output })
    }

    /// Plain-text descriptor: the flags followed by one `in.<i>=<name>` /
    /// `out.<i>=<name>` line per channel.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "static_map={}\nweekday={}\ntime={}\ntarget_channels={}\n",
            self.flags.static_map, self.flags.weekday, self.flags.time, self.flags.target_channels
        );
        for (i, n) in self.input.iter().enumerate() {
            s += &format!("in.{i}={n}\n");
        }
        for (i, n) in self.output.iter().enumerate() {
            s += &format!("out.{i}={n}\n");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut flags = FeatureFlags::default();
        let (mut input, mut output) = (Vec::new(), Vec::new());
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("expected key=value, got {line:?}")))?;
            let bad = || Error::InvalidConfig(format!("bad layout entry {line:?}"));
            let flag = || v.parse::<bool>().map_err(|_| bad());
            match k {
                "static_map" => flags.static_map = flag()?,
                "weekday" => flags.weekday = flag()?,
                "time" => flags.time = flag()?,
                "target_channels" => flags.target_channels = v.parse().map_err(|_| bad())?,
                _ if k.starts_with("in.") => input.push(v.to_string()),
                _ if k.starts_with("out.") => output.push(v.to_string()),
                _ => return Err(bad()),
            }
        }
        let layout = Self::new(flags)?;
        if layout.input != input || layout.output != output {
            return Err(Error::InvalidConfig("channel names do not match the declared flags".into()));
        }
        Ok(layout)
    }
}

/// `(H, W, C_in)` network input: 12 frames, then static, weekday and time
/// planes as enabled, all bytes divided by 255.
pub fn assemble_input(sample: &Sample, static_map: Option<&StaticMap>, flags: &FeatureFlags) -> Result<Tensor<f32>> {
    flags.validate()?;
    let (h, w) = (sample.height, sample.width);
    let st = match (flags.static_map, static_map) {
        (true, Some(s)) if s.height() == h && s.width() == w => Some(s.data()),
        (true, Some(s)) => return Err(mismatch("assemble_input static map", &s.shape(), &[h, w, STATIC_CHANNELS])),
        (true, None) => return Err(Error::InvalidArgument("static features enabled but no static map given".into())),
        (false, _) => None,
    };
    let weekday = weekday_encode(sample.date);
    let time = time_encode(sample.t + 1 - INPUT_FRAMES)?;
    let c_in = flags.input_channels();
    let mut out = Vec::with_capacity(h * w * c_in);
    for px in 0..h * w {
        for k in 0..INPUT_FRAMES {
            let f = &sample.input_frame(k)[px * CHANNELS..(px + 1) * CHANNELS];
            out.extend(f.iter().map(|&b| b as f32 / 255.0));
        }
        if let Some(st) = st {
            out.extend(st[px * STATIC_CHANNELS..(px + 1) * STATIC_CHANNELS].iter().map(|&b| b as f32 / 255.0));
        }
        if flags.weekday {
            out.extend_from_slice(&weekday.onehot);
        }
        if flags.time {
            out.push(time.cos as f32);
            out.push(time.sin as f32);
        }
    }
    Tensor::from_vec(&[h, w, c_in], out)
}

/// `(H, W, 6 * target_channels)` target: the leading `target_channels`
/// channels of each target frame, divided by 255.
pub fn assemble_target(sample: &Sample, flags: &FeatureFlags) -> Result<Tensor<f32>> {
    flags.validate()?;
    frames_to_target(|k| sample.target_frame(k), sample.height, sample.width, flags.target_channels)
}

pub(crate) fn frames_to_target<'a>(frame: impl Fn(usize) -> &'a [u8], h: usize, w: usize, tc: usize) -> Result<Tensor<f32>> {
    let mut out = Vec::with_capacity(h * w * HORIZONS * tc);
    for px in 0..h * w {
        for k in 0..HORIZONS {
            let f = &frame(k)[px * CHANNELS..px * CHANNELS + tc];
            out.extend(f.iter().map(|&b| b as f32 / 255.0));
        }
    }
    Tensor::from_vec(&[h, w, HORIZONS * tc], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{extract_sample, TrafficMovie};
    use alloc::vec;

    /// Day of week by Zeller's congruence, Monday = 0.
    fn zeller(mut y: i32, mut m: i32, d: i32) -> usize {
        if m < 3 {
            m += 12;
            y -= 1;
        }
        let (k, j) = (y % 100, y / 100);
        let h = (d + 13 * (m + 1) / 5 + k + k / 4 + j / 4 + 5 * j) % 7; // 0 = Saturday
        ((h + 5) % 7) as usize
    }

    fn movie(h: usize, w: usize, seed: u8) -> TrafficMovie {
        let n = FRAMES_PER_DAY * h * w * CHANNELS;
        let data = (0..n).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
        TrafficMovie::new("X", NaiveDate::from_ymd_opt(2019, 1, 7).unwrap(), h, w, data).unwrap()
    }

    #[test]
    fn time_cardinal_points() {
        let e = time_encode(0).unwrap();
        assert_eq!((e.cos, e.sin), (1.0, 0.0));
        let e = time_encode(72).unwrap();
        assert!(e.cos.abs() < 1e-15 && (e.sin - 1.0).abs() < 1e-15);
        let e = time_encode(144).unwrap();
        assert!((e.cos + 1.0).abs() < 1e-15 && e.sin.abs() < 1e-15);
        assert!(time_encode(288).is_err());
    }

    #[test]
    fn time_last_slot() {
        // cos(287 * pi / 144), sin(287 * pi / 144), evaluated independently.
        let e = time_encode(287).unwrap();
        assert!((e.cos - 0.999762).abs() < 1e-6, "{e:?}");
        assert!((e.sin + 0.021815).abs() < 1e-6, "{e:?}");
    }

    #[test]
    fn weekday_examples() {
        assert_eq!(weekday_encode_ymd(2019, 1, 7).unwrap().onehot, [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(weekday_encode_ymd(2019, 1, 6).unwrap().index(), 6);
        assert_eq!(weekday_encode_ymd(2019, 1, 1).unwrap().index(), 1);
        assert!(matches!(weekday_encode_ymd(2019, 2, 30), Err(Error::InvalidDate(_))));
    }

    #[test]
    fn weekday_matches_zeller() {
        let mut d = NaiveDate::from_ymd_opt(1999, 12, 1).unwrap();
        for _ in 0..1200 {
            assert_eq!(weekday_encode(d).index(), zeller(d.year(), d.month() as i32, d.day() as i32), "{d}");
            d = d.succ_opt().unwrap();
        }
    }

    #[test]
    fn channel_counts() {
        assert_eq!(FeatureFlags::default().input_channels(), 124);
        assert_eq!(FeatureFlags { weekday: false, time: false, ..FeatureFlags::default() }.input_channels(), 115);
        assert_eq!(FeatureFlags::dynamic_only().input_channels(), 108);
        assert_eq!(FeatureFlags::default().output_channels(), 54);
    }

    #[test]
    fn input_layout() {
        let m = movie(3, 2, 0);
        let st = StaticMap::new("X", 3, 2, (0..42).collect()).unwrap();
        let s = extract_sample(&m, 40).unwrap();
        let x = assemble_input(&s, Some(&st), &FeatureFlags::default()).unwrap();
        assert_eq!(x.shape(), &[3, 2, 124]);
        let at = |px: usize, c: usize| x.data()[px * 124 + c];
        for px in 0..6 {
            assert_eq!(at(px, 9 * 5 + 2), m.frame(29 + 5)[px * 9 + 2] as f32 / 255.0);
            assert_eq!(at(px, 108 + 3), st.data()[px * 7 + 3] as f32 / 255.0);
            // 2019-01-07 is a Monday.
            assert_eq!(&x.data()[px * 124 + 115..px * 124 + 122], &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
            let e = time_encode(29).unwrap();
            assert_eq!((at(px, 122), at(px, 123)), (e.cos as f32, e.sin as f32));
        }
        let y = assemble_input(&s, None, &FeatureFlags::dynamic_only()).unwrap();
        assert_eq!(y.shape(), &[3, 2, 108]);
        assert!(assemble_input(&s, None, &FeatureFlags::default()).is_err());
        let wrong = StaticMap::new("X", 2, 3, vec![0; 42]).unwrap();
        assert!(matches!(assemble_input(&s, Some(&wrong), &FeatureFlags::default()), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn target_layout() {
        let m = movie(2, 2, 3);
        let s = extract_sample(&m, 100).unwrap();
        let y = assemble_target(&s, &FeatureFlags::default()).unwrap();
        assert_eq!(y.shape(), &[2, 2, 54]);
        for k in 0..6 {
            let slice = y.slice_channels(9 * k, 9).unwrap();
            let expect: Vec<f32> = s.target_frame(k).iter().map(|&b| b as f32 / 255.0).collect();
            assert_eq!(slice.data(), expect.as_slice());
        }
        let flags = FeatureFlags { target_channels: 8, ..FeatureFlags::default() };
        assert_eq!(assemble_target(&s, &flags).unwrap().shape(), &[2, 2, 48]);

        let zero = TrafficMovie::new("Z", m.date, 2, 2, vec![0; FRAMES_PER_DAY * 36]).unwrap();
        let y = assemble_target(&extract_sample(&zero, 11).unwrap(), &FeatureFlags::default()).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layout_round_trip() {
        for flags in [FeatureFlags::default(), FeatureFlags::dynamic_only(), FeatureFlags { time: false, target_channels: 8, ..FeatureFlags::default() }] {
            let l = ChannelLayout::new(flags).unwrap();
            assert_eq!(l.input.len(), flags.input_channels());
            assert_eq!(l.output.len(), flags.output_channels());
            assert_eq!(ChannelLayout::from_text(&l.to_text()).unwrap(), l);
        }
        let l = ChannelLayout::new(FeatureFlags::default()).unwrap();
        assert_eq!(l.input[0], "frame_t-11.volume_nw");
        assert_eq!(l.input[107], "frame_t-0.incident");
        assert_eq!(l.input[123], "time.sin");
        assert_eq!(l.output[53], "frame_t+12.incident");
        let tampered = l.to_text().replace("in.0=frame_t-11.volume_nw", "in.0=other");
        assert!(ChannelLayout::from_text(&tampered).is_err());
    }
}
