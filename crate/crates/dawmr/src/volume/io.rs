//! Volume file format.
//!
//! Little-endian throughout: magic `DWMR`, version u32 = 1, X/Y/Z as u64,
//! C as u32, dtype u32 (1 = f32 scalar data, 2 = u32 segment ids), then the
//! raw payload in `((z*Y + y)*X + x)*C + c` order. Segmentations use dtype 2
//! with C = 1. The header is exactly 40 bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::{Error, Result};

use super::{Dims, SegmentationVolume, Volume};

pub const MAGIC: &[u8; 4] = b"DWMR";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 1;
pub const DTYPE_U32: u32 = 2;
pub const HEADER_BYTES: usize = 4 + 4 + 8 * 3 + 4 + 4;

struct Header {
    dims: Dims,
    channels: usize,
    dtype: u32,
}

fn write_header<W: Write>(w: &mut W, dims: Dims, channels: u32, dtype: u32) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u64::<LittleEndian>(dims.x as u64)?;
    w.write_u64::<LittleEndian>(dims.y as u64)?;
    w.write_u64::<LittleEndian>(dims.z as u64)?;
    w.write_u32::<LittleEndian>(channels)?;
    w.write_u32::<LittleEndian>(dtype)?;
    Ok(())
}

fn read_header<R: Read>(r: &mut R, path: &Path) -> Result<Header> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::malformed(path, "file shorter than header"))?;
    if &magic != MAGIC {
        return Err(Error::BadMagic { path: path.into(), expected: "DWMR" });
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::BadVersion { path: path.into(), found: version });
    }
    let x = r.read_u64::<LittleEndian>()?;
    let y = r.read_u64::<LittleEndian>()?;
    let z = r.read_u64::<LittleEndian>()?;
    let channels = r.read_u32::<LittleEndian>()?;
    let dtype = r.read_u32::<LittleEndian>()?;
    let voxels = x
        .checked_mul(y)
        .and_then(|v| v.checked_mul(z))
        .and_then(|v| v.checked_mul(channels as u64))
        .filter(|&v| v > 0 && v <= usize::MAX as u64 / 8)
        .ok_or_else(|| Error::malformed(path, format!("dim overflow: {x}x{y}x{z} c={channels}")))?;
    let _ = voxels;
    Ok(Header {
        dims: Dims::new(x as usize, y as usize, z as usize),
        channels: channels as usize,
        dtype,
    })
}

pub fn write_volume(vol: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, vol.dims(), vol.channels() as u32, DTYPE_F32)?;
    for &v in vol.data() {
        w.write_f32::<LittleEndian>(v)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path)?);
    let header = read_header(&mut r, path)?;
    if header.dtype != DTYPE_F32 {
        return Err(Error::malformed(
            path,
            format!("expected dtype {DTYPE_F32} (f32), found {}", header.dtype),
        ));
    }
    let n = header.dims.voxels() * header.channels;
    let mut data = vec![0f32; n];
    r.read_f32_into::<LittleEndian>(&mut data)
        .map_err(|_| Error::malformed(path, "truncated payload"))?;
    Volume::new(header.dims, header.channels, data)
}

pub fn write_segmentation(seg: &SegmentationVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, seg.dims(), 1, DTYPE_U32)?;
    for &id in seg.ids() {
        w.write_u32::<LittleEndian>(id)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_segmentation(path: impl AsRef<Path>) -> Result<SegmentationVolume> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path)?);
    let header = read_header(&mut r, path)?;
    if header.dtype != DTYPE_U32 || header.channels != 1 {
        return Err(Error::malformed(
            path,
            format!(
                "expected dtype {DTYPE_U32} (u32 ids) with 1 channel, found dtype {} c={}",
                header.dtype, header.channels
            ),
        ));
    }
    let mut ids = vec![0u32; header.dims.voxels()];
    r.read_u32_into::<LittleEndian>(&mut ids)
        .map_err(|_| Error::malformed(path, "truncated payload"))?;
    SegmentationVolume::new(header.dims, ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn volume_round_trip_is_bit_exact() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let dims = Dims::new(3, 4, 5);
        let data: Vec<f32> = (0..dims.voxels() * 2).map(|_| rng.gen::<f32>()).collect();
        let vol = Volume::new(dims, 2, data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.dwmr");
        write_volume(&vol, &path).unwrap();
        let back = read_volume(&path).unwrap();
        assert_eq!(vol, back);
    }

    #[test]
    fn segmentation_round_trip_is_bit_exact() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let dims = Dims::new(4, 4, 4);
        let ids: Vec<u32> = (0..dims.voxels()).map(|_| rng.gen_range(0..9)).collect();
        let seg = SegmentationVolume::new(dims, ids).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.dwmr");
        write_segmentation(&seg, &path).unwrap();
        assert_eq!(seg, read_segmentation(&path).unwrap());
    }

    #[test]
    fn header_is_forty_bytes() {
        let vol = Volume::filled(Dims::new(2, 3, 4), 1, 0.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.dwmr");
        write_volume(&vol, &path).unwrap();
        let len = std::fs::metadata(&path).unwrap().len() as usize;
        assert_eq!(len, HEADER_BYTES + 2 * 3 * 4 * 4);
        assert_eq!(HEADER_BYTES, 40);
    }

    #[test]
    fn corrupt_magic_is_a_format_error() {
        let vol = Volume::filled(Dims::new(2, 2, 2), 1, 1.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.dwmr");
        write_volume(&vol, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        match read_volume(&path) {
            Err(Error::BadMagic { .. }) => {}
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_a_format_error() {
        let vol = Volume::filled(Dims::new(4, 4, 4), 1, 1.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.dwmr");
        write_volume(&vol, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        match read_volume(&path) {
            Err(Error::MalformedFile { reason, .. }) => assert!(reason.contains("truncated")),
            other => panic!("expected MalformedFile, got {other:?}"),
        }
    }

    #[test]
    fn wrong_dtype_is_rejected() {
        let seg = SegmentationVolume::zeros(Dims::new(2, 2, 2));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seg.dwmr");
        write_segmentation(&seg, &path).unwrap();
        assert!(read_volume(&path).is_err());
    }

    proptest::proptest! {
        #[test]
        fn any_volume_round_trips(
            x in 1usize..6, y in 1usize..6, z in 1usize..6, c in 1usize..4,
            seed in 0u64..1000,
        ) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let dims = Dims::new(x, y, z);
            let data: Vec<f32> = (0..dims.voxels() * c)
                .map(|_| f32::from_bits(rng.gen::<u32>() & 0x7f7f_ffff))
                .collect();
            let vol = Volume::new(dims, c, data).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("p.dwmr");
            write_volume(&vol, &path).unwrap();
            proptest::prop_assert_eq!(read_volume(&path).unwrap(), vol);
        }
    }
}
