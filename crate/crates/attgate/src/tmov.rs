//! The TMOV container: a small header followed by a raw byte payload.
//!
//! ```text
//! "TMOV"            4 bytes
//! version           u32 LE (currently 1)
//! role              u8: 0 movie, 1 static, 2 prediction, 3 attention
//! ndim              u32 LE
//! dims              ndim x u32 LE
//! city length       u16 LE, then that many UTF-8 bytes
//! date              u32 LE as YYYYMMDD, 0 when absent
//! anchor            u32 LE, u32::MAX when absent
//! payload           product(dims) bytes, row-major, last axis fastest
//! ```

use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use attgate_core::data::{CHANNELS, FRAMES_PER_DAY, HORIZONS, STATIC_CHANNELS};
use attgate_core::{StaticMap, TrafficMovie};
use chrono::{Datelike, NaiveDate};

use crate::error::{Error, IoContext, Result};

pub const MAGIC: [u8; 4] = *b"TMOV";
pub const VERSION: u32 = 1;
const MAX_NDIM: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Movie = 0,
    Static = 1,
    Prediction = 2,
    Attention = 3,
}

impl Role {
    fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            0 => Role::Movie,
            1 => Role::Static,
            2 => Role::Prediction,
            3 => Role::Attention,
            _ => return None,
        })
    }

    /// Checks the dims a file of this role must have.
    fn check_dims(self, dims: &[usize]) -> std::result::Result<(), String> {
        let ok = match self {
            Role::Movie => dims.len() == 4 && dims[0] == FRAMES_PER_DAY && dims[3] == CHANNELS,
            Role::Static => dims.len() == 3 && dims[2] == STATIC_CHANNELS,
            Role::Prediction => dims.len() == 4 && dims[0] == HORIZONS && dims[3] == CHANNELS,
            Role::Attention => dims.len() == 3 && dims[2] == 1,
        };
        if ok && dims.iter().all(|&d| d > 0) {
            Ok(())
        } else {
            Err(format!("dims {dims:?} are not valid for a {self:?} file"))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Header {
    pub role: Role,
    pub dims: Vec<usize>,
    pub city: String,
    pub date: Option<NaiveDate>,
    pub anchor: Option<usize>,
}

impl Header {
    pub fn new(role: Role, dims: Vec<usize>) -> Self {
        Self { role, dims, city: String::new(), date: None, anchor: None }
    }

    pub fn payload_len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 4 * self.dims.len() + self.city.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.role as u8);
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.city.len() as u16).to_le_bytes());
        out.extend_from_slice(self.city.as_bytes());
        let date = self.date.map_or(0, |d| d.year() as u32 * 10000 + d.month() * 100 + d.day());
        out.extend_from_slice(&date.to_le_bytes());
        out.extend_from_slice(&self.anchor.map_or(u32::MAX, |a| a as u32).to_le_bytes());
        out
    }

    /// Parses a header from the start of `r`, returning it with its encoded length.
    pub fn read_from(r: &mut impl Read, path: &Path) -> Result<(Self, u64)> {
        let mut pos = 0u64;
        let mut take = |n: usize| -> Result<Vec<u8>> {
            let mut buf = vec![0u8; n];
            let mut got = 0;
            while got < n {
                match r.read(&mut buf[got..]).at(path)? {
                    0 => return Err(Error::Truncated { path: path.to_path_buf(), expected: pos + n as u64, found: pos + got as u64 }),
                    k => got += k,
                }
            }
            pos += n as u64;
            Ok(buf)
        };
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
        let magic = take(4)?;
        if magic != MAGIC {
            return Err(Error::format(path, format!("bad magic {:?}", String::from_utf8_lossy(&magic))));
        }
        let version = u32_at(&take(4)?);
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let role_byte = take(1)?[0];
        let role = Role::from_byte(role_byte).ok_or_else(|| Error::format(path, format!("unknown role {role_byte}")))?;
        let ndim = u32_at(&take(4)?) as usize;
        if ndim == 0 || ndim > MAX_NDIM {
            return Err(Error::format(path, format!("bad ndim {ndim}")));
        }
        let dims: Vec<usize> = take(4 * ndim)?.chunks_exact(4).map(|c| u32_at(c) as usize).collect();
        role.check_dims(&dims).map_err(|m| Error::format(path, m))?;
        let city_len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let city = String::from_utf8(take(city_len)?).map_err(|_| Error::format(path, "city is not UTF-8"))?;
        let date = match u32_at(&take(4)?) {
            0 => None,
            ymd => Some(
                NaiveDate::from_ymd_opt((ymd / 10000) as i32, ymd / 100 % 100, ymd % 100)
                    .ok_or_else(|| Error::format(path, format!("bad date {ymd}")))?,
            ),
        };
        let anchor = match u32_at(&take(4)?) {
            u32::MAX => None,
            a => Some(a as usize),
        };
        Ok((Self { role, dims, city, date, anchor }, pos))
    }
}

/// A whole TMOV file in memory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tmov {
    pub header: Header,
    pub payload: Vec<u8>,
}

impl Tmov {
    pub fn new(header: Header, payload: Vec<u8>) -> Result<Self> {
        header.role.check_dims(&header.dims).map_err(Error::Config)?;
        if payload.len() != header.payload_len() {
            return Err(Error::Config(format!("payload has {} bytes, dims {:?} need {}", payload.len(), header.dims, header.payload_len())));
        }
        if header.city.len() > u16::MAX as usize {
            return Err(Error::Config("city name too long".into()));
        }
        Ok(Self { header, payload })
    }

    pub fn from_movie(m: &TrafficMovie) -> Self {
        let header = Header { city: m.city.clone(), date: Some(m.date), ..Header::new(Role::Movie, m.shape().to_vec()) };
        Self { header, payload: m.data().to_vec() }
    }

    pub fn from_static(s: &StaticMap) -> Self {
        let header = Header { city: s.city.clone(), ..Header::new(Role::Static, s.shape().to_vec()) };
        Self { header, payload: s.data().to_vec() }
    }

    pub fn into_movie(self, path: &Path) -> Result<TrafficMovie> {
        let h = &self.header;
        if h.role != Role::Movie {
            return Err(Error::format(path, format!("expected a movie, found a {:?} file", h.role)));
        }
        let date = h.date.ok_or_else(|| Error::format(path, "movie has no date"))?;
        TrafficMovie::new(h.city.clone(), date, h.dims[1], h.dims[2], self.payload).map_err(|e| Error::Data { path: path.into(), source: e })
    }

    pub fn into_static(self, path: &Path) -> Result<StaticMap> {
        let h = &self.header;
        if h.role != Role::Static {
            return Err(Error::format(path, format!("expected a static map, found a {:?} file", h.role)));
        }
        StaticMap::new(h.city.clone(), h.dims[0], h.dims[1], self.payload).map_err(|e| Error::Data { path: path.into(), source: e })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.header.encode();
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut cursor = bytes;
        let (header, offset) = Header::read_from(&mut cursor, path)?;
        let need = offset + header.payload_len() as u64;
        if (bytes.len() as u64) < need {
            return Err(Error::Truncated { path: path.into(), expected: need, found: bytes.len() as u64 });
        }
        if bytes.len() as u64 > need {
            return Err(Error::format(path, format!("{} trailing bytes", bytes.len() as u64 - need)));
        }
        Ok(Self { header, payload: bytes[offset as usize..].to_vec() })
    }
}

pub fn write_tmov(path: &Path, file: &Tmov) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).at(path)?);
    w.write_all(&file.header.encode()).at(path)?;
    w.write_all(&file.payload).at(path)?;
    w.flush().at(path)
}

pub fn read_tmov(path: &Path) -> Result<Tmov> {
    let bytes = std::fs::read(path).at(path)?;
    Tmov::decode(&bytes, path)
}

pub fn read_header(path: &Path) -> Result<Header> {
    let mut f = File::open(path).at(path)?;
    Ok(Header::read_from(&mut f, path)?.0)
}

/// Random access to the frames of a movie file without loading it whole.
#[derive(Debug)]
pub struct MovieReader {
    path: std::path::PathBuf,
    file: File,
    header: Header,
    offset: u64,
}

impl MovieReader {
    pub fn open(path: &Path) -> Result<Self> {
        let mut file = File::open(path).at(path)?;
        let (header, offset) = Header::read_from(&mut file, path)?;
        if header.role != Role::Movie {
            return Err(Error::format(path, format!("expected a movie, found a {:?} file", header.role)));
        }
        if header.date.is_none() {
            return Err(Error::format(path, "movie has no date"));
        }
        let len = file.metadata().at(path)?.len();
        let need = offset + header.payload_len() as u64;
        if len < need {
            return Err(Error::Truncated { path: path.into(), expected: need, found: len });
        }
        Ok(Self { path: path.into(), file, header, offset })
    }

    pub fn header(&self) -> &Header {
        &self.header
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn frame_len(&self) -> usize {
        self.header.dims[1] * self.header.dims[2] * CHANNELS
    }

    /// Frames `start..start + count` as one contiguous buffer.
    pub fn read_frames(&mut self, start: usize, count: usize) -> Result<Vec<u8>> {
        if start + count > FRAMES_PER_DAY {
            return Err(Error::format(&self.path, format!("frames {start}..{} outside the day", start + count)));
        }
        let fl = self.frame_len();
        let mut buf = vec![0u8; count * fl];
        self.file.seek(SeekFrom::Start(self.offset + (start * fl) as u64)).at(&self.path)?;
        self.file.read_exact(&mut buf).at(&self.path)?;
        Ok(buf)
    }
}
