//! Raw frame container.
//!
//! ```text
//! magic    b"LSVF"
//! version  u32 (1)
//! T H W C  u32 each
//! pixels   T·H·W·C bytes, frame-major, channels interleaved
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{DataError, Result};

const MAGIC: &[u8; 4] = b"LSVF";
pub const CONTAINER_VERSION: u32 = 1;

/// Cropped face frames as 8-bit intensities.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// `frames × height × width × channels`.
    pub pixels: Vec<u8>,
    pub fps: f64,
}

impl VideoClip {
    pub fn new(
        frames: usize,
        height: usize,
        width: usize,
        channels: usize,
        pixels: Vec<u8>,
        fps: f64,
    ) -> Result<Self> {
        if pixels.len() != frames * height * width * channels {
            return Err(DataError::Container(format!(
                "{} bytes for {frames}×{height}×{width}×{channels} frames",
                pixels.len()
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(DataError::Container(format!(
                "{channels} channels; expected 1 or 3"
            )));
        }
        Ok(Self {
            frames,
            height,
            width,
            channels,
            pixels,
            fps,
        })
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn frame(&self, t: usize) -> &[u8] {
        let n = self.frame_len();
        &self.pixels[t * n..(t + 1) * n]
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        for v in [
            CONTAINER_VERSION,
            self.frames as u32,
            self.height as u32,
            self.width as u32,
            self.channels as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.pixels)
    }

    /// Parses a container; the frame rate is not stored and comes from the
    /// manifest.
    pub fn read_from<R: Read>(r: &mut R, fps: f64) -> Result<Self> {
        let bad = |e: std::io::Error| DataError::Container(format!("truncated header: {e}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(bad)?;
        if &magic != MAGIC {
            return Err(DataError::Container(format!("bad magic {magic:?}")));
        }
        let mut word = || -> Result<usize> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(bad)?;
            Ok(u32::from_le_bytes(b) as usize)
        };
        let version = word()?;
        if version != CONTAINER_VERSION as usize {
            return Err(DataError::Container(format!(
                "unsupported version {version}"
            )));
        }
        let (t, h, w, c) = (word()?, word()?, word()?, word()?);
        let n = t
            .checked_mul(h)
            .and_then(|v| v.checked_mul(w))
            .and_then(|v| v.checked_mul(c))
            .ok_or_else(|| DataError::Container("frame dimensions overflow".into()))?;
        let mut pixels = Vec::new();
        r.take(n as u64).read_to_end(&mut pixels)?;
        if pixels.len() != n {
            return Err(DataError::Container(format!(
                "expected {n} pixel bytes, found {}",
                pixels.len()
            )));
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(DataError::Container(
                "trailing bytes after pixel data".into(),
            ));
        }
        Self::new(t, h, w, c, pixels, fps)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(
            std::fs::File::create(path).map_err(|e| DataError::io(path, e))?,
        );
        self.write_to(&mut f).map_err(|e| DataError::io(path, e))?;
        f.flush().map_err(|e| DataError::io(path, e))
    }

    pub fn load(path: &Path, fps: f64) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| DataError::io(path, e))?;
        Self::read_from(&mut std::io::BufReader::new(f), fps)
    }
}
