//! `NBWT` weight files: magic, version, architecture fingerprint, then every
//! parameter tensor as rank, extents and little-endian `f32` data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::graph::{MlpGraph, MlpWeights};
use crate::Error;

pub const MAGIC: &[u8; 4] = b"NBWT";
pub const VERSION: u32 = 1;

pub fn write_weights<W: Write>(w: &mut W, graph: &MlpGraph, weights: &MlpWeights<f32>) -> Result<(), Error> {
    let slots: Vec<_> = graph.param_layout().into_iter().flatten().collect();
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u64::<LittleEndian>(graph.fingerprint())?;
    w.write_u32::<LittleEndian>(slots.len() as u32)?;
    for s in slots {
        w.write_u32::<LittleEndian>(s.shape.len() as u32)?;
        for &d in &s.shape {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        for v in &weights.data[s.range()] {
            w.write_f32::<LittleEndian>(*v)?;
        }
    }
    Ok(())
}

fn eof(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("file is truncated".into())
    } else {
        Error::Io(e)
    }
}

pub fn read_weights<R: Read>(r: &mut R, graph: &MlpGraph) -> Result<MlpWeights<f32>, Error> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(eof)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic, not a weights file".into()));
    }
    let version = r.read_u32::<LittleEndian>().map_err(eof)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported weights version {version}")));
    }
    if r.read_u64::<LittleEndian>().map_err(eof)? != graph.fingerprint() {
        return Err(Error::ArchitectureMismatch);
    }
    let slots: Vec<_> = graph.param_layout().into_iter().flatten().collect();
    if r.read_u32::<LittleEndian>().map_err(eof)? as usize != slots.len() {
        return Err(Error::ArchitectureMismatch);
    }
    let mut data = vec![0f32; graph.param_count()];
    for s in slots {
        let rank = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.read_u32::<LittleEndian>().map_err(eof)? as usize);
        }
        if shape != s.shape {
            return Err(Error::ArchitectureMismatch);
        }
        r.read_f32_into::<LittleEndian>(&mut data[s.range()]).map_err(eof)?;
    }
    Ok(MlpWeights { data })
}

pub fn save_weights(path: &Path, graph: &MlpGraph, weights: &MlpWeights<f32>) -> Result<(), Error> {
    let mut w = BufWriter::new(File::create(path)?);
    write_weights(&mut w, graph, weights)?;
    w.flush()?;
    Ok(())
}

pub fn load_weights(path: &Path, graph: &MlpGraph) -> Result<MlpWeights<f32>, Error> {
    read_weights(&mut BufReader::new(File::open(path)?), graph)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Layer;

    #[test]
    fn round_trip_and_fingerprint_check() {
        let g = MlpGraph::new(3, vec![Layer::Linear { in_dim: 3, out_dim: 4 }, Layer::LayerNorm { dim: 4 }], vec![]).unwrap();
        let mut k = 0.0;
        let w: MlpWeights<f32> = g.init_weights(|| {
            k += 0.1;
            k % 1.0
        });
        let mut buf = Vec::new();
        write_weights(&mut buf, &g, &w).unwrap();
        assert_eq!(read_weights(&mut buf.as_slice(), &g).unwrap(), w);
        let other = MlpGraph::new(3, vec![Layer::Linear { in_dim: 3, out_dim: 4 }], vec![]).unwrap();
        assert!(matches!(read_weights(&mut buf.as_slice(), &other), Err(Error::ArchitectureMismatch)));
        buf[0] = b'X';
        assert!(matches!(read_weights(&mut buf.as_slice(), &g), Err(Error::Format(_))));
    }
}
