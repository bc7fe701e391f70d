//! Synthetic cities and traffic movies.
//!
//! Roads are full rows and columns of the grid. Traffic lives only on road
//! pixels and follows a two-peak daily profile scaled down on weekends.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use chrono::{Datelike, NaiveDate};
use rand::distributions::{Distribution, Uniform};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use crate::data::{StaticMap, TrafficMovie, CHANNELS, FRAMES_PER_DAY, STATIC_CHANNELS};
use crate::error::{Error, Result};

/// Generator settings for [`synth_movie`].
#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    /// Peak mean volume of the busiest pixel on a weekday.
    pub amplitude: f64,
    /// Standard deviation of the per-frame volume noise.
    pub noise_std: f64,
    pub speed_noise_std: f64,
    /// Probability that an incident starts at a road pixel in a given frame.
    pub incident_rate: f64,
    pub weekend_factor: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self { amplitude: 200.0, noise_std: 30.0, speed_noise_std: 6.0, incident_rate: 2e-4, weekend_factor: 0.6 }
    }
}

/// Daily profile: `0.1` plus unit bumps at slots 96 and 216 (width 24 slots).
pub fn diurnal(t: usize) -> f64 {
    let bump = |c: f64| libm::exp(-0.5 * ((t as f64 - c) / 24.0).powi(2));
    0.1 + bump(96.0) + bump(216.0)
}

pub fn weekday_factor(date: NaiveDate, weekend_factor: f64) -> f64 {
    if date.weekday().number_from_monday() >= 6 {
        weekend_factor
    } else {
        1.0
    }
}

/// Static map and road mask of a synthetic city.
///
/// Channel 0 marks crossings (255), channel 1 is 255 minus 16 per pixel of
/// distance to the nearest crossing along the road (at least 1), channels
/// 2..7 are venue counts. Off-road pixels are zero in every channel.
pub fn synth_city(seed: u64, height: usize, width: usize, road_density: f64) -> Result<(StaticMap, Vec<bool>)> {
    if height < 8 || width < 8 {
        return Err(Error::InvalidArgument(alloc::format!("synthetic city must be at least 8x8, got {height}x{width}")));
    }
    if !(road_density > 0.0 && road_density < 1.0) {
        return Err(Error::InvalidArgument(alloc::format!("road density must be in (0, 1), got {road_density}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Covering a fraction r of rows and of columns covers 1 - (1 - r)^2 of the grid.
    let r = 1.0 - libm::sqrt(1.0 - road_density);
    let pick = |n: usize, rng: &mut ChaCha8Rng| {
        let k = (libm::round(r * n as f64) as usize).clamp(1, n);
        let mut v = vec![false; n];
        for i in sample(rng, n, k) {
            v[i] = true;
        }
        v
    };
    let rows = pick(height, &mut rng);
    let cols = pick(width, &mut rng);
    let row_list: Vec<usize> = (0..height).filter(|&y| rows[y]).collect();
    let col_list: Vec<usize> = (0..width).filter(|&x| cols[x]).collect();
    let nearest = |list: &[usize], v: usize| list.iter().map(|&u| u.abs_diff(v)).min().unwrap();

    let mut mask = vec![false; height * width];
    let mut data = vec![0u8; height * width * STATIC_CHANNELS];
    let venues = Uniform::new_inclusive(0u8, 40);
    for y in 0..height {
        for x in 0..width {
            if !(rows[y] || cols[x]) {
                continue;
            }
            let i = y * width + x;
            mask[i] = true;
            let px = &mut data[i * STATIC_CHANNELS..(i + 1) * STATIC_CHANNELS];
            // Along a row road the nearest crossing is the nearest road column, and vice versa.
            let dist = match (rows[y], cols[x]) {
                (true, true) => 0,
                (true, false) => nearest(&col_list, x),
                _ => nearest(&row_list, y),
            };
            px[0] = if dist == 0 { 255 } else { 0 };
            px[1] = 255usize.saturating_sub(16 * dist).max(1) as u8;
            for v in &mut px[2..] {
                *v = venues.sample(&mut rng);
            }
        }
    }
    Ok((StaticMap::new(String::from("synth"), height, width, data)?, mask))
}

/// Road mask implied by a static map from [`synth_city`].
pub fn road_mask(map: &StaticMap) -> Vec<bool> {
    map.data().chunks_exact(STATIC_CHANNELS).map(|px| px[1] > 0).collect()
}

/// One day of traffic on the roads of `map`.
///
/// Each road pixel has a fixed busyness in `[0.4, 1]` rising with its total
/// venue count, and a share in `[0.5, 1]` per direction read from one venue
/// channel, so the static map explains where traffic is heavy. Volume is the rounded, clipped
/// `amplitude * busyness * share * diurnal(t) * weekday_factor + noise`;
/// speed falls as volume rises; incidents are rare episodes lasting 12 to 36
/// frames.
pub fn synth_movie(map: &StaticMap, seed: u64, date: NaiveDate, params: &SynthParams) -> Result<TrafficMovie> {
    let (h, w) = (map.height(), map.width());
    let mask = road_mask(map);
    let day = date.num_days_from_ce() as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(day);
    let noise = Normal::new(0.0, params.noise_std.max(0.0)).map_err(|e| Error::InvalidArgument(alloc::format!("{e}")))?;
    let speed_noise =
        Normal::new(0.0, params.speed_noise_std.max(0.0)).map_err(|e| Error::InvalidArgument(alloc::format!("{e}")))?;
    let factor = weekday_factor(date, params.weekend_factor);

    // Per-pixel structure depends on the map only, so it is identical across days.
    let road: Vec<usize> = (0..h * w).filter(|&i| mask[i]).collect();
    let busy: Vec<f64> = road
        .iter()
        .map(|&i| {
            let venues: u32 = map.data()[i * STATIC_CHANNELS + 2..(i + 1) * STATIC_CHANNELS].iter().map(|&v| v as u32).sum();
            0.4 + 0.6 * venues as f64 / 200.0
        })
        .collect();
    // Direction d draws on venue channel 3 + d.
    let share: Vec<[f64; 4]> = road
        .iter()
        .map(|&i| core::array::from_fn(|d| 0.5 + 0.5 * map.data()[i * STATIC_CHANNELS + 3 + d] as f64 / 40.0))
        .collect();

    let frame = h * w * CHANNELS;
    let mut data = vec![0u8; FRAMES_PER_DAY * frame];
    let mut incident_left = vec![0u16; road.len()];
    let mut incident_level = vec![0u8; road.len()];
    let clip = |v: f64| libm::round(v).clamp(0.0, 255.0) as u8;
    for t in 0..FRAMES_PER_DAY {
        let level = params.amplitude * diurnal(t) * factor;
        for (r, &i) in road.iter().enumerate() {
            let px = &mut data[t * frame + i * CHANNELS..t * frame + (i + 1) * CHANNELS];
            for d in 0..4 {
                let vol = level * busy[r] * share[r][d] + noise.sample(&mut rng);
                let vol = clip(vol);
                px[2 * d] = vol;
                px[2 * d + 1] = clip(200.0 - 0.5 * vol as f64 + speed_noise.sample(&mut rng)).max(1);
            }
            if incident_left[r] == 0 && rng.gen_bool(params.incident_rate.clamp(0.0, 1.0)) {
                incident_left[r] = rng.gen_range(12..=36);
                incident_level[r] = rng.gen_range(64..=255);
            }
            if incident_left[r] > 0 {
                px[8] = incident_level[r];
                incident_left[r] -= 1;
            }
        }
    }
    TrafficMovie::new(map.city.clone(), date, h, w, data)
}
