//! Latent codes and the `NBLV` latent file.
//!
//! Layout (little-endian): magic `NBLV`, u32 version, u64 decoder
//! fingerprint, u32 entry count, u32 channels, u32 latent dim, then
//! `count × channels × dim` f32 values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::Error;

pub const LATENT_DIM: usize = 32;
pub const MAGIC: &[u8; 4] = b"NBLV";
pub const VERSION: u32 = 1;

pub type LatentVector = [f32; LATENT_DIM];

pub const ONES: LatentVector = [1.0; LATENT_DIM];

/// One latent vector per color channel.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBrdf {
    channels: Vec<LatentVector>,
}

impl LatentBrdf {
    pub fn new(channels: Vec<LatentVector>) -> Result<Self, Error> {
        if !(channels.len() == 1 || channels.len() == 3) {
            return Err(Error::ChannelMismatch(format!("{} channels, expected 1 or 3", channels.len())));
        }
        Ok(Self { channels })
    }

    pub fn mono(v: LatentVector) -> Self {
        Self { channels: vec![v] }
    }

    pub fn ones(n_channels: usize) -> Result<Self, Error> {
        Self::new(vec![ONES; n_channels])
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn channel(&self, c: usize) -> &LatentVector {
        &self.channels[c]
    }

    pub fn channels(&self) -> &[LatentVector] {
        &self.channels
    }

    pub fn channels_mut(&mut self) -> &mut [LatentVector] {
        &mut self.channels
    }

    pub fn is_finite(&self) -> bool {
        self.channels.iter().flatten().all(|v| v.is_finite())
    }

    /// Stable hash of the bit pattern, used as a cache key.
    pub fn key(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for v in self.channels.iter().flatten() {
            for b in v.to_bits().to_le_bytes() {
                h = (h ^ b as u64).wrapping_mul(0x100_0000_01b3);
            }
        }
        h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentFile {
    /// Fingerprint of the decoder the latents belong to; 0 when unknown.
    pub decoder: u64,
    pub entries: Vec<LatentBrdf>,
}

impl LatentFile {
    pub fn write<W: Write>(&self, w: &mut W) -> Result<(), Error> {
        let channels = self.entries.first().map_or(1, |e| e.n_channels());
        if self.entries.iter().any(|e| e.n_channels() != channels) {
            return Err(Error::ChannelMismatch("entries disagree on channel count".into()));
        }
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_u64::<LittleEndian>(self.decoder)?;
        w.write_u32::<LittleEndian>(self.entries.len() as u32)?;
        w.write_u32::<LittleEndian>(channels as u32)?;
        w.write_u32::<LittleEndian>(LATENT_DIM as u32)?;
        for v in self.entries.iter().flat_map(|e| e.channels()).flatten() {
            w.write_f32::<LittleEndian>(*v)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self, Error> {
        let eof = crate::eof;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(eof)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic, not a latent file".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(eof)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported latent file version {version}")));
        }
        let decoder = r.read_u64::<LittleEndian>().map_err(eof)?;
        let count = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
        let channels = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
        let dim = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
        if dim != LATENT_DIM {
            return Err(Error::Format(format!("latent dim {dim}, expected {LATENT_DIM}")));
        }
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let mut ch = Vec::with_capacity(channels);
            for _ in 0..channels {
                let mut v = [0f32; LATENT_DIM];
                r.read_f32_into::<LittleEndian>(&mut v).map_err(eof)?;
                ch.push(v);
            }
            entries.push(LatentBrdf::new(ch)?);
        }
        Ok(Self { decoder, entries })
    }

    pub fn save(&self, path: &Path) -> Result<(), Error> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        Self::read(&mut BufReader::new(File::open(path)?))
    }
}
