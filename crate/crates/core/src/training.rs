//! Loss, metrics and the pure parts of training and inference.

use alloc::format;
use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::data::{Sample, Split, HORIZONS, INPUT_FRAMES};
use crate::error::{mismatch, Error, Result};
use crate::features::{frames_to_target, FeatureFlags};
use crate::real::Real;
use crate::tensor::Tensor;

/// Mean squared difference, recorded on the tape.
pub fn mse_loss<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(mismatch("mse_loss", tape.shape(pred), tape.shape(target)));
    }
    let d = tape.sub(pred, target)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean_all(sq))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_steps: u64,
    pub eval_at: Vec<u64>,
    pub seed: u64,
    pub flags: FeatureFlags,
    /// Write 0 instead of elapsed time so metrics files are reproducible.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 2,
            learning_rate: 3e-4,
            max_steps: 2650,
            eval_at: alloc::vec![1000, 2000, 2650],
            seed: 0,
            flags: FeatureFlags::default(),
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::InvalidConfig(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.max_steps == 0 {
            return bad("max_steps must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if let Some(s) = self.eval_at.iter().find(|&&s| s == 0 || s > self.max_steps) {
            return bad(format!("eval step {s} outside 1..={}", self.max_steps));
        }
        if self.eval_at.windows(2).any(|w| w[0] >= w[1]) {
            return bad("eval_at must be strictly increasing".into());
        }
        self.flags.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub step: u64,
    pub split: Split,
    pub mse: f64,
    pub mse_horizons: [f64; HORIZONS],
    pub seconds: f64,
}

impl MetricsRecord {
    pub const CSV_HEADER: &'static str = "step,split,mse,mse_h1,mse_h2,mse_h3,mse_h4,mse_h5,mse_h6,seconds";

    pub fn csv_row(&self) -> alloc::string::String {
        let mut s = format!("{},{},{:.9e}", self.step, self.split.as_str(), self.mse);
        for h in self.mse_horizons {
            s += &format!(",{h:.9e}");
        }
        s + &format!(",{:.3}", self.seconds)
    }
}

/// Running squared-error sums per horizon over many predictions.
#[derive(Clone, Debug, Default)]
pub struct MseAccumulator {
    sse: [f64; HORIZONS],
    count: [u64; HORIZONS],
}

impl MseAccumulator {
    /// Adds one `(H, W, 6 * c)` prediction/target pair, horizon-major per pixel.
    pub fn add(&mut self, pred: &Tensor<f32>, target: &Tensor<f32>) -> Result<()> {
        if pred.shape() != target.shape() {
            return Err(mismatch("mse", pred.shape(), target.shape()));
        }
        let (_, _, c) = pred.hwc()?;
        if c % HORIZONS != 0 {
            return Err(Error::InvalidArgument(format!("{c} channels do not split into {HORIZONS} horizons")));
        }
        let per = c / HORIZONS;
        for (p, t) in pred.data().chunks_exact(c).zip(target.data().chunks_exact(c)) {
            for k in 0..HORIZONS {
                for j in k * per..(k + 1) * per {
                    let d = p[j] as f64 - t[j] as f64;
                    self.sse[k] += d * d;
                }
                self.count[k] += per as u64;
            }
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.count[0] == 0
    }

    pub fn horizons(&self) -> [f64; HORIZONS] {
        core::array::from_fn(|k| self.sse[k] / self.count[k].max(1) as f64)
    }

    pub fn mse(&self) -> f64 {
        let total: u64 = self.count.iter().sum();
        self.sse.iter().sum::<f64>() / total.max(1) as f64
    }

    pub fn record(&self, step: u64, split: Split, seconds: f64) -> MetricsRecord {
        MetricsRecord { step, split, mse: self.mse(), mse_horizons: self.horizons(), seconds }
    }
}

/// Every target frame predicted as the last observed frame.
pub fn persistence_baseline(sample: &Sample, flags: &FeatureFlags) -> Result<Tensor<f32>> {
    flags.validate()?;
    let last = sample.input_frame(INPUT_FRAMES - 1);
    frames_to_target(|_| last, sample.height, sample.width, flags.target_channels)
}

/// Raw network output to bytes: clamp to `[0, 1]`, scale by 255, round half up.
pub fn to_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().map(|&v| unit_to_byte(v)).collect()
}

pub fn unit_to_byte(v: f32) -> u8 {
    let v = if v.is_nan() { 0.0 } else { (v as f64).clamp(0.0, 1.0) };
    libm::floor(v * 255.0 + 0.5) as u8
}

/// Reorders an `(H, W, 6 * c)` output into six `(H, W, 9)` byte frames;
/// channels beyond `c` stay zero.
pub fn output_to_frames(out: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w, c) = out.hwc()?;
    if c % HORIZONS != 0 || c / HORIZONS > crate::data::CHANNELS {
        return Err(Error::InvalidArgument(format!("{c} output channels do not form {HORIZONS} frames")));
    }
    let per = c / HORIZONS;
    let ch = crate::data::CHANNELS;
    let mut frames = alloc::vec![0u8; HORIZONS * h * w * ch];
    for (px, vals) in out.data().chunks_exact(c).enumerate() {
        for k in 0..HORIZONS {
            let dst = (k * h * w + px) * ch;
            for j in 0..per {
                frames[dst + j] = unit_to_byte(vals[k * per + j]);
            }
        }
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{extract_sample, TrafficMovie, CHANNELS, FRAMES_PER_DAY};
    use alloc::vec;
    use chrono::NaiveDate;

    fn mse_of(p: &[f32], t: &[f32]) -> f32 {
        let mut tape = Tape::<f32>::new();
        let pv = tape.constant(Tensor::from_vec(&[p.len()], p.to_vec()).unwrap());
        let tv = tape.constant(Tensor::from_vec(&[t.len()], t.to_vec()).unwrap());
        let l = mse_loss(&mut tape, pv, tv).unwrap();
        tape.value(l).item().unwrap()
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse_of(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
        assert_eq!(mse_of(&[0.0; 4], &[1.0; 4]), 1.0);
        assert_eq!(mse_of(&[0.0, 2.0], &[1.0, 0.0]), 2.5);
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2]).unwrap());
        let b = tape.constant(Tensor::zeros(&[3]).unwrap());
        assert!(matches!(mse_loss(&mut tape, a, b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn rounding_rule() {
        assert_eq!(unit_to_byte(-0.2), 0);
        assert_eq!(unit_to_byte(1.5), 255);
        assert_eq!(unit_to_byte(0.5), 128);
        assert_eq!(unit_to_byte(0.0), 0);
        assert_eq!(unit_to_byte(1.0), 255);
    }

    #[test]
    fn byte_round_trip_within_one() {
        for b in 0..=255u8 {
            let v = b as f32 / 255.0;
            assert!(unit_to_byte(v).abs_diff(b) <= 1);
            assert!(((v * 255.0).floor() as u8).abs_diff(b) <= 1);
        }
    }

    fn constant_movie(v: u8) -> TrafficMovie {
        TrafficMovie::new("C", NaiveDate::from_ymd_opt(2019, 3, 1).unwrap(), 4, 3, vec![v; FRAMES_PER_DAY * 4 * 3 * CHANNELS]).unwrap()
    }

    #[test]
    fn persistence_exact_on_constant_movie() {
        let s = extract_sample(&constant_movie(77), 50).unwrap();
        let flags = FeatureFlags::default();
        let p = persistence_baseline(&s, &flags).unwrap();
        assert_eq!(p.shape(), &[4, 3, 54]);
        let t = crate::features::assemble_target(&s, &flags).unwrap();
        let mut acc = MseAccumulator::default();
        acc.add(&p, &t).unwrap();
        assert_eq!(acc.mse(), 0.0);
    }

    #[test]
    fn zero_predictor_gives_mean_square() {
        let s = extract_sample(&constant_movie(51), 50).unwrap();
        let t = crate::features::assemble_target(&s, &FeatureFlags::default()).unwrap();
        let mut acc = MseAccumulator::default();
        acc.add(&Tensor::zeros(t.shape()).unwrap(), &t).unwrap();
        let v = (51.0f32 / 255.0) as f64;
        assert!((acc.mse() - v * v).abs() < 1e-12, "{}", acc.mse());
    }

    #[test]
    fn overall_is_mean_of_horizons() {
        let p = Tensor::rand_uniform(&[5, 4, 54], 1, 0.0, 1.0).unwrap();
        let t = Tensor::rand_uniform(&[5, 4, 54], 2, 0.0, 1.0).unwrap();
        let mut acc = MseAccumulator::default();
        acc.add(&p, &t).unwrap();
        acc.add(&t, &p).unwrap();
        let mean = acc.horizons().iter().sum::<f64>() / 6.0;
        assert!((acc.mse() - mean).abs() <= 1e-7);
        let r = acc.record(10, Split::Validation, 0.0);
        assert_eq!(r.csv_row().split(',').count(), MetricsRecord::CSV_HEADER.split(',').count());
    }

    #[test]
    fn frames_from_output() {
        let mut v = vec![0.0f32; 2 * 54];
        v[9 * 2 + 3] = 0.5; // pixel 0, horizon 2, channel 3
        v[54 + 9 * 5 + 8] = 2.0; // pixel 1, horizon 5, channel 8
        let out = Tensor::from_vec(&[1, 2, 54], v).unwrap();
        let f = output_to_frames(&out).unwrap();
        assert_eq!(f.len(), 6 * 2 * 9);
        assert_eq!(f[(2 * 2) * 9 + 3], 128);
        assert_eq!(f[(5 * 2 + 1) * 9 + 8], 255);
        assert_eq!(f.iter().filter(|&&b| b > 0).count(), 2);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { max_steps: 500, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { eval_at: vec![20, 10], max_steps: 30, ..TrainConfig::default() }.validate().is_err());
    }
}
