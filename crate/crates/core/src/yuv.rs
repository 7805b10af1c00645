//! Raw 8-bit 4:2:0 YUV input. Only the luma plane is ever read.

use std::fs::File;
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numerics::Plane;

#[derive(Clone, Debug)]
pub struct YuvSequence {
    pub path: PathBuf,
    pub width: usize,
    pub height: usize,
    pub bitdepth: u8,
    frames: usize,
}

impl YuvSequence {
    /// Opens a planar 8-bit 4:2:0 file and derives the frame count from its size.
    pub fn open(path: impl AsRef<Path>, width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 || !width.is_multiple_of(2) || !height.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "4:2:0 frames need even, non-zero dimensions, got {width}x{height}"
            )));
        }
        let path = path.as_ref().to_path_buf();
        let actual = std::fs::metadata(&path)?.len();
        let frame_size = Self::frame_bytes(width, height) as u64;
        if actual % frame_size != 0 {
            return Err(Error::YuvSize { frame_size, actual });
        }
        Ok(Self { path, width, height, bitdepth: 8, frames: (actual / frame_size) as usize })
    }

    pub fn frame_bytes(width: usize, height: usize) -> usize {
        width * height * 3 / 2
    }

    pub fn frame_count(&self) -> usize {
        self.frames
    }

    pub fn read_luma(&self, index: usize) -> Result<Plane<u16>> {
        if index >= self.frames {
            return Err(Error::FrameIndex { index, count: self.frames });
        }
        let mut f = File::open(&self.path)?;
        f.seek(SeekFrom::Start((index * Self::frame_bytes(self.width, self.height)) as u64))?;
        let mut buf = vec![0u8; self.width * self.height];
        f.read_exact(&mut buf)?;
        Ok(Plane::from_vec(self.width, self.height, buf.into_iter().map(u16::from).collect())?
            .with_bitdepth(self.bitdepth))
    }

    pub fn read_all_luma(&self) -> Result<Vec<Plane<u16>>> {
        (0..self.frames).map(|i| self.read_luma(i)).collect()
    }
}

/// Writes luma planes as an 8-bit 4:2:0 file with mid-gray chroma.
pub fn write_yuv420(path: impl AsRef<Path>, frames: &[Plane<u16>]) -> Result<()> {
    let mut f = std::io::BufWriter::new(File::create(path)?);
    for p in frames {
        if p.width() % 2 != 0 || p.height() % 2 != 0 {
            return Err(Error::InvalidArgument("4:2:0 frames need even dimensions".into()));
        }
        let luma: Vec<u8> = p.data().iter().map(|&v| v.min(255) as u8).collect();
        f.write_all(&luma)?;
        f.write_all(&vec![128u8; p.width() * p.height() / 2])?;
    }
    f.flush()?;
    Ok(())
}
