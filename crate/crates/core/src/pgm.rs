//! Binary PGM (P5) images, 8- and 16-bit. Samples wider than a byte are
//! stored most significant byte first, as the format prescribes.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage16 {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub data: Vec<u16>,
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<GrayImage16> {
    let file = File::open(path.as_ref())?;
    read_pgm_from(BufReader::new(file))
}

pub fn read_pgm_from<R: BufRead>(mut r: R) -> Result<GrayImage16> {
    let mut magic = [0u8; 2];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Parse("truncated PGM header".into()))?;
    if &magic != b"P5" {
        return Err(Error::Parse("not a binary PGM (expected P5)".into()));
    }
    let width = header_number(&mut r)?;
    let height = header_number(&mut r)?;
    let maxval = header_number(&mut r)?;
    if width == 0 || height == 0 {
        return Err(Error::Parse("PGM has zero size".into()));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Parse(format!("unsupported PGM maxval {maxval}")));
    }
    let n = width
        .checked_mul(height)
        .ok_or_else(|| Error::Parse("PGM too large".into()))?;
    let wide = maxval > 255;
    let mut raw = vec![0u8; if wide { 2 * n } else { n }];
    r.read_exact(&mut raw)
        .map_err(|_| Error::Parse("truncated PGM pixel data".into()))?;
    let data = if wide {
        raw.chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]))
            .collect()
    } else {
        raw.into_iter().map(u16::from).collect()
    };
    Ok(GrayImage16 {
        width,
        height,
        maxval: maxval as u16,
        data,
    })
}

// Reads one whitespace-delimited decimal, skipping `#` comments; consumes
// exactly one trailing whitespace byte.
fn header_number<R: BufRead>(r: &mut R) -> Result<usize> {
    let mut byte = [0u8; 1];
    let mut digits = String::new();
    loop {
        if r.read(&mut byte)? == 0 {
            return Err(Error::Parse("truncated PGM header".into()));
        }
        let c = byte[0];
        if c == b'#' && digits.is_empty() {
            let mut skip = Vec::new();
            r.read_until(b'\n', &mut skip)?;
        } else if c.is_ascii_whitespace() {
            if !digits.is_empty() {
                break;
            }
        } else if c.is_ascii_digit() {
            digits.push(c as char);
        } else {
            return Err(Error::Parse(format!("unexpected byte {c:#x} in PGM header")));
        }
    }
    digits
        .parse()
        .map_err(|_| Error::Parse("bad number in PGM header".into()))
}

pub fn write_pgm16(path: impl AsRef<Path>, width: usize, height: usize, data: &[u16]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    write_pgm16_to(&mut w, width, height, data)?;
    w.flush()?;
    Ok(())
}

pub fn write_pgm16_to<W: Write>(w: &mut W, width: usize, height: usize, data: &[u16]) -> Result<()> {
    check_len(width, height, data.len())?;
    write!(w, "P5\n{width} {height}\n65535\n")?;
    for v in data {
        w.write_all(&v.to_be_bytes())?;
    }
    Ok(())
}

pub fn write_pgm8(path: impl AsRef<Path>, width: usize, height: usize, data: &[u8]) -> Result<()> {
    check_len(width, height, data.len())?;
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    write!(w, "P5\n{width} {height}\n255\n")?;
    w.write_all(data)?;
    w.flush()?;
    Ok(())
}

fn check_len(width: usize, height: usize, len: usize) -> Result<()> {
    if width * height != len {
        return Err(Error::InvalidInput(format!(
            "{len} samples for a {width}x{height} image"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn sixteen_bit_round_trip() {
        let data = vec![0, 1, 256, 65535, 4000, 7];
        let mut buf = Vec::new();
        write_pgm16_to(&mut buf, 3, 2, &data).unwrap();
        assert_eq!(&buf[..15], b"P5\n3 2\n65535\n\x00\x00");
        let img = read_pgm_from(Cursor::new(buf)).unwrap();
        assert_eq!((img.width, img.height, img.maxval), (3, 2, 65535));
        assert_eq!(img.data, data);
    }

    #[test]
    fn eight_bit_with_comment() {
        let mut buf = b"P5 # made by hand\n2 1\n255\n".to_vec();
        buf.extend_from_slice(&[9, 200]);
        let img = read_pgm_from(Cursor::new(buf)).unwrap();
        assert_eq!(img.data, vec![9, 200]);
    }

    #[test]
    fn rejects_ascii_and_truncation() {
        assert!(read_pgm_from(Cursor::new(b"P2\n1 1\n255\n0\n".to_vec())).is_err());
        assert!(read_pgm_from(Cursor::new(b"P5\n2 2\n65535\n\x00".to_vec())).is_err());
        let mut sink = Vec::new();
        assert!(write_pgm16_to(&mut sink, 2, 2, &[1, 2, 3]).is_err());
    }
}
