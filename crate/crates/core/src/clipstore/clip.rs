use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::DataError;

pub const CLIP_MAGIC: &[u8; 4] = b"CLP1";

/// A `T x H x W x C` unsigned 8-bit video tensor, row-major and channel-last.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Clip {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub key_index: usize,
    pub data: Vec<u8>,
}

impl Clip {
    pub fn new(
        frames: usize,
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<u8>,
    ) -> Result<Self, DataError> {
        if frames == 0 || height == 0 || width == 0 || !matches!(channels, 1 | 3) {
            return Err(DataError::BadDims { frames, height, width, channels });
        }
        let expected = frames * height * width * channels;
        if data.len() != expected {
            return Err(DataError::Truncated { expected, found: data.len() });
        }
        Ok(Clip { frames, height, width, channels, key_index: frames / 2, data })
    }

    pub fn filled(frames: usize, height: usize, width: usize, channels: usize, value: u8) -> Self {
        Clip::new(frames, height, width, channels, vec![value; frames * height * width * channels])
            .expect("valid clip dims")
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    #[inline]
    pub fn index(&self, t: usize, row: usize, col: usize, ch: usize) -> usize {
        ((t * self.height + row) * self.width + col) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, t: usize, row: usize, col: usize, ch: usize) -> u8 {
        self.data[self.index(t, row, col, ch)]
    }

    pub fn frame(&self, t: usize) -> &[u8] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn same_dims(&self, other: &Clip) -> bool {
        self.frames == other.frames
            && self.height == other.height
            && self.width == other.width
            && self.channels == other.channels
    }

    pub fn to_writer<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(CLIP_MAGIC)?;
        for v in [self.frames, self.height, self.width, self.channels, self.key_index] {
            w.write_u32::<LittleEndian>(v as u32)?;
        }
        w.write_all(&self.data)
    }

    pub fn from_reader<R: Read>(mut r: R) -> Result<Self, DataError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| DataError::BadMagic(magic))?;
        if &magic != CLIP_MAGIC {
            return Err(DataError::BadMagic(magic));
        }
        let mut header = [0u32; 5];
        r.read_u32_into::<LittleEndian>(&mut header)
            .map_err(|_| DataError::Truncated { expected: 24, found: 4 })?;
        let [frames, height, width, channels, key_index] = header.map(|v| v as usize);
        let expected = frames
            .checked_mul(height)
            .and_then(|n| n.checked_mul(width))
            .and_then(|n| n.checked_mul(channels))
            .filter(|&n| n <= isize::MAX as usize)
            .ok_or(DataError::DimsOverflow { frames, height, width, channels })?;
        if frames == 0 || height == 0 || width == 0 || !matches!(channels, 1 | 3) {
            return Err(DataError::BadDims { frames, height, width, channels });
        }
        if key_index != frames / 2 {
            return Err(DataError::BadKeyIndex { key_index, frames });
        }
        let mut data = Vec::new();
        r.take(expected as u64).read_to_end(&mut data)?;
        if data.len() != expected {
            return Err(DataError::Truncated { expected, found: data.len() });
        }
        Ok(Clip { frames, height, width, channels, key_index, data })
    }
}

pub fn write_clip(clip: &Clip, path: &Path) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path)?);
    clip.to_writer(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_clip(path: &Path) -> Result<Clip, DataError> {
    Clip::from_reader(BufReader::new(File::open(path)?))
}
