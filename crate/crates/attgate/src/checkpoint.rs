//! Checkpoint files: model config, channel layout, weights and optimizer state.
//!
//! ```text
//! "ATGC"            4 bytes
//! version           u32 LE
//! digest            32 bytes, SHA-256 of everything after it
//! model config      u32 LE length + key=value text
//! channel layout    u32 LE length + text
//! run config        u32 LE length + TOML text
//! step              u64 LE
//! best val mse      f64 LE, NaN when none
//! parameters        u32 LE count, then per tensor: u16 LE name length, name,
//!                   u32 LE ndim, ndim x u32 LE dims, f32 LE values
//! optimizer flag    u8; when 1: u64 step, f64 lr, beta1, beta2, epsilon,
//!                   then per tensor the first and second moments as f32 LE
//! ```

use std::path::Path;

use attgate_core::{AdamState, ChannelLayout, ModelConfig, Tensor, UNetModel};
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};

pub const MAGIC: [u8; 4] = *b"ATGC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub layout: ChannelLayout,
    pub run_config: String,
    pub step: u64,
    pub best_val: Option<f64>,
    pub params: Vec<(String, Tensor<f32>)>,
    pub adam: Option<AdamState>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn text(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn floats(&mut self, v: &[f32]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Truncated {
            path: self.path.into(),
            expected: (self.pos + n) as u64,
            found: self.bytes.len() as u64,
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn arr<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().unwrap())
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.arr()?))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.arr()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.arr()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.arr()?))
    }
    fn utf8(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format(self.path, "text field is not UTF-8"))
    }
    fn text(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        self.utf8(n)
    }
    fn floats(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::format(self.path, "tensor too large"))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

impl Checkpoint {
    pub fn capture(model: &UNetModel, layout: &ChannelLayout, run_config: &str, step: u64, best_val: Option<f64>, adam: Option<&AdamState>) -> Self {
        Self {
            model: model.config().clone(),
            layout: layout.clone(),
            run_config: run_config.to_string(),
            step,
            best_val,
            params: model.named_parameters().into_iter().map(|(n, t)| (n, Tensor::from_vec(t.shape(), t.data().to_vec()).unwrap())).collect(),
            adam: adam.cloned(),
        }
    }

    pub fn to_model(&self) -> Result<UNetModel> {
        if self.model.in_channels != self.layout.input.len() || self.model.out_channels != self.layout.output.len() {
            return Err(Error::Config("checkpoint model and channel layout disagree".into()));
        }
        Ok(UNetModel::from_named(self.model.clone(), self.params.clone())?)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.text(&self.model.to_text());
        w.text(&self.layout.to_text());
        w.text(&self.run_config);
        w.u64(self.step);
        w.f64(self.best_val.unwrap_or(f64::NAN));
        w.u32(self.params.len() as u32);
        for (name, t) in &self.params {
            w.u16(name.len() as u16);
            w.0.extend_from_slice(name.as_bytes());
            w.u32(t.shape().len() as u32);
            for &d in t.shape() {
                w.u32(d as u32);
            }
            w.floats(t.data());
        }
        match &self.adam {
            None => w.u8(0),
            Some(a) => {
                w.u8(1);
                w.u64(a.step);
                for v in [a.lr, a.beta1, a.beta2, a.epsilon] {
                    w.f64(v);
                }
                for (m, v) in a.m.iter().zip(&a.v) {
                    w.floats(m);
                    w.floats(v);
                }
            }
        }
        let body = w.0;
        let mut out = Vec::with_capacity(body.len() + 40);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&Sha256::digest(&body));
        out.extend_from_slice(&body);
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let digest: [u8; 32] = r.arr()?;
        let body_start = r.pos;
        let model = ModelConfig::from_text(&r.text()?).map_err(|e| Error::format(path, e.to_string()))?;
        let layout = ChannelLayout::from_text(&r.text()?).map_err(|e| Error::format(path, e.to_string()))?;
        let run_config = r.text()?;
        let step = r.u64()?;
        let best_val = Some(r.f64()?).filter(|v| !v.is_nan());
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let n = r.u16()? as usize;
            let name = r.utf8(n)?;
            let ndim = r.u32()? as usize;
            if ndim > 8 {
                return Err(Error::format(path, format!("tensor {name} has {ndim} dims")));
            }
            let dims: Vec<usize> = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let data = r.floats(dims.iter().product())?;
            let t = Tensor::from_vec(&dims, data).map_err(|e| Error::format(path, e.to_string()))?;
            params.push((name, t));
        }
        let adam = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let (lr, beta1, beta2, epsilon) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
                let (mut m, mut v) = (Vec::new(), Vec::new());
                for (_, t) in &params {
                    m.push(r.floats(t.numel())?);
                    v.push(r.floats(t.numel())?);
                }
                Some(AdamState { lr, beta1, beta2, epsilon, step, m, v })
            }
            f => return Err(Error::format(path, format!("bad optimizer flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        if Sha256::digest(&bytes[body_start..]).as_slice() != digest {
            return Err(Error::format(path, "digest mismatch, the file is corrupt"));
        }
        Ok(Self { model, layout, run_config, step, best_val, params, adam })
    }

    /// Writes through a temporary file so a crash never leaves a partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.encode()).at(&tmp)?;
        std::fs::rename(&tmp, path).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).at(path)?;
        Self::decode(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use attgate_core::FeatureFlags;

    fn sample() -> Checkpoint {
        let flags = FeatureFlags { target_channels: 2, ..FeatureFlags::dynamic_only() };
        let cfg = ModelConfig { depth: 1, base_channels: 2, growth: 2, in_channels: flags.input_channels(), out_channels: flags.output_channels(), ..ModelConfig::default() };
        let model = UNetModel::new(cfg, 3).unwrap();
        let mut adam = AdamState::new(1e-3, model.named_parameters().into_iter().map(|(_, t)| t));
        adam.step = 7;
        adam.m[0][0] = 0.25;
        Checkpoint::capture(&model, &ChannelLayout::new(flags).unwrap(), "[train]\n", 7, Some(0.5), Some(&adam))
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let bytes = c.encode();
        let back = Checkpoint::decode(&bytes, Path::new("c")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.encode(), bytes);
        let m = back.to_model().unwrap();
        assert_eq!(m.parameter_count(), c.params.iter().map(|(_, t)| t.numel()).sum::<usize>());
    }

    #[test]
    fn detects_damage() {
        let bytes = sample().encode();
        let p = Path::new("c");
        assert!(matches!(Checkpoint::decode(&bytes[..bytes.len() - 3], p), Err(Error::Truncated { .. })));
        let mut flipped = bytes.clone();
        let last = flipped.len() - 10;
        flipped[last] ^= 1;
        assert!(matches!(Checkpoint::decode(&flipped, p), Err(Error::Format { .. })));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(Checkpoint::decode(&magic, p), Err(Error::Format { .. })));
    }
}
