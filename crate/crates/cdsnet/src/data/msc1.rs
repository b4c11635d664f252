//! MSC1 chip container: `"MSCHIP01"` magic, u32 record count, u16 channels,
//! u16 side, then per record a u16 label and channels*side*side little-endian
//! f32 values. All integers little-endian.

use std::path::Path;

use super::{ChipSet, CHIP_CHANNELS, CHIP_SIDE};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MSCHIP01";

pub fn write_msc1(path: &Path, set: &ChipSet) -> Result<()> {
    let mut out = Vec::with_capacity(16 + set.len() * (2 + ChipSet::CHIP_LEN * 4));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(set.len() as u32).to_le_bytes());
    out.extend_from_slice(&(CHIP_CHANNELS as u16).to_le_bytes());
    out.extend_from_slice(&(CHIP_SIDE as u16).to_le_bytes());
    for i in 0..set.len() {
        out.extend_from_slice(&set.labels[i].to_le_bytes());
        for &v in set.chip(i) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_msc1(path: &Path) -> Result<ChipSet> {
    let bytes = std::fs::read(path)?;
    let fail = |offset: usize, message: String| Error::Format { offset: offset as u64, message };
    if bytes.len() < 16 {
        return Err(fail(bytes.len(), "file shorter than the MSC1 header".into()));
    }
    if &bytes[0..8] != MAGIC {
        return Err(fail(0, format!("bad magic {:?}, expected {:?}", &bytes[0..8], MAGIC)));
    }
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let channels = u16::from_le_bytes(bytes[12..14].try_into().unwrap()) as usize;
    let side = u16::from_le_bytes(bytes[14..16].try_into().unwrap()) as usize;
    if channels != CHIP_CHANNELS || side != CHIP_SIDE {
        return Err(fail(12, format!("unsupported geometry {}x{}x{}", channels, side, side)));
    }
    let record = 2 + channels * side * side * 4;
    let expect = 16 + count * record;
    if bytes.len() != expect {
        let offset = bytes.len().min(expect);
        return Err(fail(offset, format!("payload is {} bytes, header implies {}", bytes.len(), expect)));
    }
    let mut set = ChipSet::default();
    set.pixels.reserve(count * ChipSet::CHIP_LEN);
    set.labels.reserve(count);
    let mut pos = 16;
    for _ in 0..count {
        set.labels.push(u16::from_le_bytes(bytes[pos..pos + 2].try_into().unwrap()));
        pos += 2;
        for chunk in bytes[pos..pos + channels * side * side * 4].chunks_exact(4) {
            set.pixels.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
        pos += channels * side * side * 4;
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut set = ChipSet::default();
        for i in 0..5 {
            let chip: Vec<f32> = (0..ChipSet::CHIP_LEN).map(|j| ((i * 31 + j) % 100) as f32 / 99.0).collect();
            set.push(&chip, i as u16);
        }
        let path = dir.path().join("t.msc");
        write_msc1(&path, &set).unwrap();
        let back = read_msc1(&path).unwrap();
        assert_eq!(back.labels, set.labels);
        assert_eq!(back.pixels, set.pixels);
    }

    #[test]
    fn truncation_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let mut set = ChipSet::default();
        set.push(&vec![0.5; ChipSet::CHIP_LEN], 0);
        let path = dir.path().join("t.msc");
        write_msc1(&path, &set).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, bytes).unwrap();
        match read_msc1(&path) {
            Err(Error::Format { offset, .. }) => assert!(offset > 0),
            other => panic!("expected format error, got {:?}", other.map(|s| s.len())),
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.msc");
        std::fs::write(&path, b"NOTMAGIC0000000000000000").unwrap();
        assert!(matches!(read_msc1(&path), Err(Error::Format { offset: 0, .. })));
    }
}
