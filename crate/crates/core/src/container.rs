//! Binary containers for model banks, filter sets and datasets.
//!
//! Every file starts with a 4-byte magic and a version byte, followed by a
//! little-endian `u32` entry count. All multi-byte values are little-endian.
//!
//! | file        | magic  | entry layout |
//! |-------------|--------|--------------|
//! | model bank  | `FFMB` | arch `u8` (1 = scratchcnn), dx `u8`, dy `u8`, qp `u8`, k1 64x81 `f64`, k2 32x64 `f64`, k3 32x25 `f64` |
//! | filter set  | `FFFS` | dx `u8`, dy `u8`, qp `u8`, 169 `f64`, has_fixed `u8`, then if 1: shift `u8`, 169 `i32` |
//! | dataset     | `FFDS` | dx `u8`, dy `u8`, qp `u8`, bitdepth `u8`, H `u16`, W `u16`, (H+12)x(W+12) `f64` input, HxW `f64` target |
//!
//! Weight and sample arrays are row-major.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::interpret::{CollapsedFilter, FilterSet, FixedFilter, TAPS};
use crate::model::{FractionalPosition, ModelBank, ScratchModel, MARGIN, WEIGHT_COUNT};
use crate::numerics::Plane;
use crate::trainer::TrainingRecord;

pub const VERSION: u8 = 1;
const MODEL_MAGIC: &[u8; 4] = b"FFMB";
const FILTER_MAGIC: &[u8; 4] = b"FFFS";
const DATASET_MAGIC: &[u8; 4] = b"FFDS";
const ARCH_SCRATCHCNN: u8 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn new(magic: &[u8; 4], count: usize) -> Self {
        let mut w = Self(Vec::new());
        w.0.extend_from_slice(magic);
        w.0.push(VERSION);
        w.0.extend_from_slice(&(count as u32).to_le_bytes());
        w
    }

    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn i32s(&mut self, vs: &[i32]) {
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], magic: &[u8; 4]) -> Result<(Self, usize)> {
        if buf.len() < 9 || &buf[..4] != magic {
            return Err(Error::Format(format!("missing `{}` magic", String::from_utf8_lossy(magic))));
        }
        if buf[4] != VERSION {
            return Err(Error::Format(format!("unsupported version {}", buf[4])));
        }
        let mut r = Self { buf, pos: 5 };
        let count = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
        Ok((r, count))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("truncated container".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self.take(n * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn i32s(&mut self, n: usize) -> Result<Vec<i32>> {
        Ok(self.take(n * 4)?.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn frac(&mut self) -> Result<FractionalPosition> {
        let dx = self.u8()?;
        let dy = self.u8()?;
        FractionalPosition::new(dx, dy).map_err(|e| Error::Format(e.to_string()))
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn encode_bank(bank: &ModelBank) -> Vec<u8> {
    let mut w = Writer::new(MODEL_MAGIC, bank.len());
    for m in bank.iter() {
        w.u8(ARCH_SCRATCHCNN);
        w.u8(m.frac.dx);
        w.u8(m.frac.dy);
        w.u8(m.qp);
        w.f64s(m.params());
    }
    w.0
}

pub fn decode_bank(buf: &[u8]) -> Result<ModelBank> {
    let (mut r, count) = Reader::new(buf, MODEL_MAGIC)?;
    let mut bank = ModelBank::new();
    for _ in 0..count {
        let arch = r.u8()?;
        if arch != ARCH_SCRATCHCNN {
            return Err(Error::Format(format!("unknown architecture tag {arch}")));
        }
        let frac = r.frac()?;
        let qp = r.u8()?;
        bank.insert(ScratchModel::from_params(r.f64s(WEIGHT_COUNT)?, frac, qp)?);
    }
    r.finish()?;
    Ok(bank)
}

pub fn encode_filters(set: &FilterSet) -> Vec<u8> {
    let mut w = Writer::new(FILTER_MAGIC, set.len());
    for f in set.iter() {
        w.u8(f.frac.dx);
        w.u8(f.frac.dy);
        w.u8(f.qp);
        w.f64s(f.coeffs());
        match &f.fixed {
            Some(fx) => {
                w.u8(1);
                w.u8(fx.shift);
                w.i32s(&fx.coeffs);
            }
            None => w.u8(0),
        }
    }
    w.0
}

pub fn decode_filters(buf: &[u8]) -> Result<FilterSet> {
    let (mut r, count) = Reader::new(buf, FILTER_MAGIC)?;
    let mut set = FilterSet::new();
    for _ in 0..count {
        let frac = r.frac()?;
        let qp = r.u8()?;
        let mut f = CollapsedFilter::new(r.f64s(TAPS)?, frac, qp)?;
        match r.u8()? {
            0 => {}
            1 => {
                let shift = r.u8()?;
                f.fixed = Some(FixedFilter { coeffs: r.i32s(TAPS)?, shift });
            }
            other => return Err(Error::Format(format!("bad fixed-point flag {other}"))),
        }
        set.insert(f);
    }
    r.finish()?;
    Ok(set)
}

pub fn encode_dataset(records: &[TrainingRecord]) -> Vec<u8> {
    let mut w = Writer::new(DATASET_MAGIC, records.len());
    for rec in records {
        let (h, wd) = rec.block_size();
        w.u8(rec.frac.dx);
        w.u8(rec.frac.dy);
        w.u8(rec.qp);
        w.u8(rec.input.bitdepth());
        w.u16(h as u16);
        w.u16(wd as u16);
        w.f64s(rec.input.data());
        w.f64s(rec.target.data());
    }
    w.0
}

pub fn decode_dataset(buf: &[u8]) -> Result<Vec<TrainingRecord>> {
    let (mut r, count) = Reader::new(buf, DATASET_MAGIC)?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let frac = r.frac()?;
        let qp = r.u8()?;
        let bitdepth = r.u8()?;
        let h = r.u16()? as usize;
        let w = r.u16()? as usize;
        let (ih, iw) = (h + 2 * MARGIN, w + 2 * MARGIN);
        let input = Plane::from_vec(iw, ih, r.f64s(ih * iw)?)?.with_bitdepth(bitdepth);
        let target = Plane::from_vec(w, h, r.f64s(h * w)?)?.with_bitdepth(bitdepth);
        out.push(TrainingRecord::new(frac, qp, input, target)?);
    }
    r.finish()?;
    Ok(out)
}

pub fn write_bank(path: impl AsRef<Path>, bank: &ModelBank) -> Result<()> {
    Ok(fs::write(path, encode_bank(bank))?)
}

pub fn read_bank(path: impl AsRef<Path>) -> Result<ModelBank> {
    decode_bank(&fs::read(path)?)
}

pub fn write_filters(path: impl AsRef<Path>, set: &FilterSet) -> Result<()> {
    Ok(fs::write(path, encode_filters(set))?)
}

pub fn read_filters(path: impl AsRef<Path>) -> Result<FilterSet> {
    decode_filters(&fs::read(path)?)
}

pub fn write_dataset(path: impl AsRef<Path>, records: &[TrainingRecord]) -> Result<()> {
    Ok(fs::write(path, encode_dataset(records))?)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<TrainingRecord>> {
    decode_dataset(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interpret::collapse;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bank_round_trip() {
        let bank: ModelBank = FractionalPosition::all_fractional()
            .take(3)
            .enumerate()
            .map(|(k, f)| ScratchModel::random(f, 22 + k as u8, k as u64))
            .collect();
        assert_eq!(decode_bank(&encode_bank(&bank)).unwrap(), bank);
    }

    #[test]
    fn filters_round_trip_with_and_without_fixed() {
        let f1 = FractionalPosition { dx: 1, dy: 0 };
        let f2 = FractionalPosition { dx: 3, dy: 2 };
        let set: FilterSet = [
            collapse(&ScratchModel::random(f1, 22, 1)),
            collapse(&ScratchModel::random(f2, 37, 2)).quantize(6).unwrap(),
        ]
        .into_iter()
        .collect();
        assert_eq!(decode_filters(&encode_filters(&set)).unwrap(), set);
    }

    #[test]
    fn rejects_corruption() {
        let bank: ModelBank = std::iter::once(ScratchModel::zeros(FractionalPosition { dx: 2, dy: 2 }, 27)).collect();
        let bytes = encode_bank(&bank);
        assert!(decode_bank(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(decode_bank(&bad).is_err());
        assert!(decode_filters(&bytes).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode_bank(&extra).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn dataset_round_trip(seed in any::<u64>(), n in 0usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let records: Vec<_> = (0..n)
                .map(|_| {
                    let (h, w) = (rng.gen_range(1..=32), rng.gen_range(1..=32));
                    let f = FractionalPosition::new(rng.gen_range(0..4), rng.gen_range(1..4)).unwrap();
                    let input = Plane::from_fn(w + 12, h + 12, |_, _| rng.gen_range(0.0..255.0)).unwrap();
                    let target = Plane::from_fn(w, h, |_, _| rng.gen_range(0.0..255.0)).unwrap();
                    TrainingRecord::new(f, rng.gen_range(0..64), input, target).unwrap()
                })
                .collect();
            prop_assert_eq!(decode_dataset(&encode_dataset(&records)).unwrap(), records);
        }
    }
}
