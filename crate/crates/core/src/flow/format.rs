//! Flow file format: magic "FLO1", little-endian u32 width and height, then
//! width*height (u, v) 32-bit real pairs, row-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{FlowError, FlowField, Result};

pub const FLO1_MAGIC: &[u8; 4] = b"FLO1";

pub fn write_flo1(path: &Path, field: &FlowField) -> Result<()> {
    let io_err = |source| FlowError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    let mut out = Vec::with_capacity(12 + field.u.len() * 8);
    out.extend_from_slice(FLO1_MAGIC);
    out.extend_from_slice(&(field.width as u32).to_le_bytes());
    out.extend_from_slice(&(field.height as u32).to_le_bytes());
    for i in 0..field.u.len() {
        out.extend_from_slice(&field.u[i].to_le_bytes());
        out.extend_from_slice(&field.v[i].to_le_bytes());
    }
    w.write_all(&out).map_err(io_err)?;
    w.flush().map_err(io_err)
}

pub fn read_flo1(path: &Path) -> Result<FlowField> {
    let io_err = |source| FlowError::Io {
        path: path.display().to_string(),
        source,
    };
    let format_err = |reason: &str| FlowError::Format {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    let mut bytes = Vec::new();
    BufReader::new(File::open(path).map_err(io_err)?)
        .read_to_end(&mut bytes)
        .map_err(io_err)?;
    if bytes.len() < 12 || &bytes[0..4] != FLO1_MAGIC {
        return Err(format_err("missing FLO1 magic"));
    }
    let width = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = 12 + width * height * 8;
    if bytes.len() != expected {
        return Err(format_err(&format!(
            "expected {} bytes for {}x{}, got {}",
            expected,
            width,
            height,
            bytes.len()
        )));
    }
    let mut field = FlowField::zeros(width, height);
    for i in 0..width * height {
        let at = 12 + i * 8;
        field.u[i] = f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        field.v[i] = f32::from_le_bytes(bytes[at + 4..at + 8].try_into().unwrap());
    }
    if !field.u.iter().chain(field.v.iter()).all(|x| x.is_finite()) {
        return Err(format_err("non-finite flow values"));
    }
    Ok(field)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_bitwise() {
        let dir = std::env::temp_dir().join("videorep-flo1-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("f.flo1");
        let mut field = FlowField::zeros(5, 3);
        for i in 0..15 {
            field.u[i] = i as f32 * 0.25 - 1.0;
            field.v[i] = -(i as f32) * 0.5;
        }
        write_flo1(&path, &field).unwrap();
        let back = read_flo1(&path).unwrap();
        assert_eq!(back, field);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = std::env::temp_dir().join("videorep-flo1-trunc");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.flo1");
        std::fs::write(&path, b"FLO1\x02\x00\x00\x00\x02\x00\x00\x00short").unwrap();
        assert!(matches!(
            read_flo1(&path),
            Err(FlowError::Format { .. })
        ));
        std::fs::remove_dir_all(&dir).ok();
    }
}
