//! Binary PGM (P5) frames and P6 PPM output for visualizations.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::{CorpusError, GrayImage, Result};

pub fn write_pgm(path: &Path, image: &GrayImage) -> Result<()> {
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    write!(w, "P5\n{} {}\n255\n", image.width, image.height).map_err(io_err)?;
    w.write_all(&image.pixels).map_err(io_err)?;
    w.flush().map_err(io_err)
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let parse_err = |reason: &str| CorpusError::Parse {
        path: path.display().to_string(),
        line: 0,
        reason: reason.to_string(),
    };
    let mut bytes = Vec::new();
    File::open(path)
        .map_err(io_err)?
        .read_to_end(&mut bytes)
        .map_err(io_err)?;
    if !bytes.starts_with(b"P5") {
        return Err(parse_err("not a binary PGM (P5)"));
    }
    // header: three whitespace-separated fields after the magic, with
    // optional '#' comment lines
    let mut pos = 2usize;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(parse_err("malformed PGM header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .map_err(|_| parse_err("malformed PGM header"))?
            .parse()
            .map_err(|_| parse_err("malformed PGM header"))?;
    }
    let (width, height, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(parse_err("only maxval 255 is supported"));
    }
    pos += 1; // single whitespace after maxval
    if bytes.len() < pos + width * height {
        return Err(parse_err("truncated pixel data"));
    }
    Ok(GrayImage {
        width,
        height,
        pixels: bytes[pos..pos + width * height].to_vec(),
    })
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    assert_eq!(rgb.len(), width * height * 3);
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    write!(w, "P6\n{} {}\n255\n", width, height).map_err(io_err)?;
    w.write_all(rgb).map_err(io_err)?;
    w.flush().map_err(io_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_roundtrip() {
        let dir = std::env::temp_dir().join("videorep-pgm-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("img.pgm");
        let img = GrayImage {
            width: 3,
            height: 2,
            pixels: vec![0, 255, 7, 130, 64, 200],
        };
        write_pgm(&path, &img).unwrap();
        assert_eq!(read_pgm(&path).unwrap(), img);
        std::fs::remove_dir_all(&dir).ok();
    }
}
