//! Binary cache format for [`ValueSeries`].
//!
//! All fields little-endian:
//!
//! ```text
//! magic        b"HJVF"
//! version      u32
//! dimension    u32
//! per dim      min f64, max f64, count u32
//! frozen       u8
//! subsystem    kind u8, u_max_self f64, u_max_other f64, v_max f64 (NaN = none)
//! time count   u32
//! times        f64 × time count
//! slabs        f64 × time count × nodes, time-major then row-major
//! crc32        u32 over every preceding byte
//! ```
//!
//! Subsystem kind codes: 0 none, 1 double integrator (reach), 2 relative
//! double integrator (reach), 3 relative double integrator (game),
//! 4 augmented relative (game).

use std::fs;
use std::io;
use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

use super::ValueSeries;
use crate::dynamics::{ControlLimits, Role, Subsystem, SubsystemKind};
use crate::grid::{Grid, LevelSet};

pub const MAGIC: [u8; 4] = *b"HJVF";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("unsupported cache format: {0}")]
    Version(String),
    #[error("truncated cache file: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed cache file: {0}")]
    Malformed(String),
}

fn kind_code(sub: Option<&Subsystem>) -> u8 {
    match sub.map(|s| (s.kind, s.role)) {
        None => 0,
        Some((SubsystemKind::DoubleIntegrator2, _)) => 1,
        Some((SubsystemKind::RelativeDoubleIntegrator2, Role::Reach)) => 2,
        Some((SubsystemKind::RelativeDoubleIntegrator2, Role::Game)) => 3,
        Some((SubsystemKind::AugmentedRelative3, _)) => 4,
    }
}

fn decode_kind(code: u8) -> Result<Option<(SubsystemKind, Role)>, CacheError> {
    Ok(Some(match code {
        0 => return Ok(None),
        1 => (SubsystemKind::DoubleIntegrator2, Role::Reach),
        2 => (SubsystemKind::RelativeDoubleIntegrator2, Role::Reach),
        3 => (SubsystemKind::RelativeDoubleIntegrator2, Role::Game),
        4 => (SubsystemKind::AugmentedRelative3, Role::Game),
        other => return Err(CacheError::Malformed(format!("unknown subsystem kind {other}"))),
    }))
}

/// Serializes a series to bytes.
pub fn encode(series: &ValueSeries) -> Vec<u8> {
    let g = series.grid();
    let n = g.len();
    let m = series.times().len();
    let mut buf = Vec::with_capacity(64 + g.dim() * 20 + m * 8 * (n + 1));
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(g.dim() as u32).to_le_bytes());
    for k in 0..g.dim() {
        buf.extend_from_slice(&g.mins()[k].to_le_bytes());
        buf.extend_from_slice(&g.maxs()[k].to_le_bytes());
        buf.extend_from_slice(&(g.counts()[k] as u32).to_le_bytes());
    }
    buf.push(series.frozen() as u8);
    let sub = series.subsystem();
    buf.push(kind_code(sub));
    let (us, uo, vm) = match sub {
        Some(s) => (s.limits.u_max_self, s.limits.u_max_other, s.limits.v_max.unwrap_or(f64::NAN)),
        None => (f64::NAN, f64::NAN, f64::NAN),
    };
    for v in [us, uo, vm] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&(m as u32).to_le_bytes());
    for t in series.times() {
        buf.extend_from_slice(&t.to_le_bytes());
    }
    for slab in series.slabs() {
        for v in slab.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, needed_hint: usize) -> Result<&[u8], CacheError> {
        if self.pos + n > self.buf.len() {
            return Err(CacheError::Truncated {
                expected: needed_hint.max(self.pos + n),
                actual: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CacheError> {
        Ok(self.take(1, 0)?[0])
    }

    fn u32(&mut self) -> Result<u32, CacheError> {
        Ok(u32::from_le_bytes(self.take(4, 0)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CacheError> {
        Ok(f64::from_le_bytes(self.take(8, 0)?.try_into().unwrap()))
    }
}

/// Parses bytes written by [`encode`].
pub fn decode(buf: &[u8]) -> Result<ValueSeries, CacheError> {
    if buf.len() < 8 {
        if buf.len() >= 4 && buf[..4] != MAGIC {
            return Err(CacheError::Version("bad magic bytes".into()));
        }
        return Err(CacheError::Truncated {
            expected: 8,
            actual: buf.len(),
        });
    }
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, 0)? != MAGIC {
        return Err(CacheError::Version("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CacheError::Version(format!(
            "file version {version}, reader supports {FORMAT_VERSION}"
        )));
    }
    let dim = r.u32()? as usize;
    if dim == 0 || dim > crate::grid::MAX_DIM {
        return Err(CacheError::Malformed(format!("dimension {dim}")));
    }
    let (mut mins, mut maxs, mut counts) = (vec![], vec![], vec![]);
    for _ in 0..dim {
        mins.push(r.f64()?);
        maxs.push(r.f64()?);
        counts.push(r.u32()? as usize);
    }
    let grid = Grid::new(&mins, &maxs, &counts).map_err(|e| CacheError::Malformed(e.to_string()))?;
    let frozen = match r.u8()? {
        0 => false,
        1 => true,
        b => return Err(CacheError::Malformed(format!("frozen flag {b}"))),
    };
    let kind = decode_kind(r.u8()?)?;
    let (us, uo, vm) = (r.f64()?, r.f64()?, r.f64()?);
    let m = r.u32()? as usize;
    let n = grid.len();
    let expected = r.pos + 8 * m + 8 * m * n + 4;
    if buf.len() < expected {
        return Err(CacheError::Truncated {
            expected,
            actual: buf.len(),
        });
    }
    if buf.len() > expected {
        return Err(CacheError::Malformed(format!(
            "{} trailing bytes",
            buf.len() - expected
        )));
    }
    let stored = u32::from_le_bytes(buf[expected - 4..].try_into().unwrap());
    let computed = crc32fast::hash(&buf[..expected - 4]);
    if stored != computed {
        return Err(CacheError::Checksum { stored, computed });
    }
    let subsystem = match kind {
        None => None,
        Some((kind, role)) => {
            let limits = ControlLimits {
                u_max_self: us,
                u_max_other: uo,
                v_max: if vm.is_nan() { None } else { Some(vm) },
            };
            Some(Subsystem::new(kind, limits, role).map_err(|e| CacheError::Malformed(e.to_string()))?)
        }
    };
    let mut times = Vec::with_capacity(m);
    for _ in 0..m {
        times.push(r.f64()?);
    }
    if m == 0 || times.windows(2).any(|w| !(w[1] > w[0])) || times[0] != 0.0 {
        return Err(CacheError::Malformed("time lattice must start at 0 and increase".into()));
    }
    let grid = Arc::new(grid);
    let mut slabs = Vec::with_capacity(m);
    for _ in 0..m {
        let raw = r.take(8 * n, expected)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        slabs.push(LevelSet::from_parts(Arc::clone(&grid), values));
    }
    Ok(ValueSeries::from_parts(grid, times, slabs, frozen, subsystem))
}

pub fn save_series(series: &ValueSeries, path: &Path) -> Result<(), CacheError> {
    fs::write(path, encode(series)).map_err(|source| CacheError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_series(path: &Path) -> Result<ValueSeries, CacheError> {
    let buf = fs::read(path).map_err(|source| CacheError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::signed_box;
    use crate::hjsolver::{solve, SolveOptions};

    fn sample() -> ValueSeries {
        let g = Arc::new(Grid::new(&[-2.0, -1.0, -1.0], &[2.0, 1.0, 1.0], &[9, 5, 5]).unwrap());
        let l = signed_box(&g, &[0.0, 0.0, 0.0], &[0.5, 10.0, 10.0]).unwrap();
        let sub = Subsystem::augmented_game(3.0, 2.0, 0.8).unwrap();
        solve(&sub, &g, &l, &SolveOptions::new(0.2).stride(2)).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = sample();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.hjvf");
        save_series(&s, &p).unwrap();
        let back = load_series(&p).unwrap();
        assert_eq!(back.times().len(), s.times().len());
        for (a, b) in s.slabs().iter().zip(back.slabs()) {
            let ab: Vec<u64> = a.values().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.values().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        assert_eq!(back, s);
    }

    #[test]
    fn wrong_magic_is_a_version_error() {
        let mut b = encode(&sample());
        b[0] = b'X';
        assert!(matches!(decode(&b), Err(CacheError::Version(_))));
        let mut v = encode(&sample());
        v[4] = 9;
        assert!(matches!(decode(&v), Err(CacheError::Version(_))));
    }

    #[test]
    fn truncation_names_lengths() {
        let b = encode(&sample());
        let cut = &b[..b.len() - 100];
        match decode(cut) {
            Err(CacheError::Truncated { expected, actual }) => {
                assert_eq!(expected, b.len());
                assert_eq!(actual, b.len() - 100);
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(decode(&b[..20]), Err(CacheError::Truncated { .. })));
    }

    #[test]
    fn flipped_payload_byte_fails_checksum() {
        let mut b = encode(&sample());
        let mid = b.len() / 2;
        b[mid] ^= 0x40;
        assert!(matches!(decode(&b), Err(CacheError::Checksum { .. })));
    }
}
