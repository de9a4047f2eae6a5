//! Binary netpbm codecs: P6 (8-bit RGB) for images and P5 (16-bit gray)
//! for instance-id maps.

use std::fs;
use std::path::Path;

use super::grid::{Grid, RgbImage};
use crate::error::{Error, Result};

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    max_value: u32,
    data_offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 {
        return Err(Error::format(0, "file too short for a netpbm magic number"));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // whitespace and comments before each field
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => return Err(Error::format(pos, "header ends before all fields were read")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(pos, format!("expected a decimal number for header field {i}")));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text.parse().map_err(|_| Error::format(start, format!("header value {text} is out of range")))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::format(pos, "expected a single whitespace byte after the max value")),
    }
    let [width, height, max_value] = fields;
    if width == 0 || height == 0 {
        return Err(Error::format(2, format!("image dimensions {width}×{height} must be positive")));
    }
    Ok(Header { magic, width: width as usize, height: height as usize, max_value, data_offset: pos })
}

/// Decodes a binary P6 image with max value 255.
pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let h = parse_header(bytes)?;
    if &h.magic != b"P6" {
        return Err(Error::format(0, "not a binary PPM (magic P6)"));
    }
    if h.max_value != 255 {
        return Err(Error::format(h.data_offset - 1, format!("unsupported max value {}; only 255 is supported", h.max_value)));
    }
    let needed = 3 * h.width * h.height;
    let available = bytes.len() - h.data_offset;
    if available < needed {
        return Err(Error::format(bytes.len(), format!("truncated pixel data: expected {needed} bytes, found {available}")));
    }
    RgbImage::new(h.width, h.height, bytes[h.data_offset..h.data_offset + needed].to_vec())
}

pub fn encode_ppm(image: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.data);
    out
}

/// Decodes a binary P5 map. Samples are one byte when the max value is
/// below 256, otherwise two bytes big-endian.
pub fn decode_pgm16(bytes: &[u8]) -> Result<Grid<u32>> {
    let h = parse_header(bytes)?;
    if &h.magic != b"P5" {
        return Err(Error::format(0, "not a binary PGM (magic P5)"));
    }
    if h.max_value == 0 || h.max_value > 65535 {
        return Err(Error::format(h.data_offset - 1, format!("unsupported max value {}", h.max_value)));
    }
    let wide = h.max_value > 255;
    let per = if wide { 2 } else { 1 };
    let needed = per * h.width * h.height;
    let available = bytes.len() - h.data_offset;
    if available < needed {
        return Err(Error::format(bytes.len(), format!("truncated sample data: expected {needed} bytes, found {available}")));
    }
    let payload = &bytes[h.data_offset..h.data_offset + needed];
    let data = if wide {
        payload.chunks_exact(2).map(|b| u32::from(u16::from_be_bytes([b[0], b[1]]))).collect()
    } else {
        payload.iter().map(|&b| u32::from(b)).collect()
    };
    Grid::new(h.width, h.height, data)
}

/// Encodes a map as 16-bit P5; ids above 65535 are rejected.
pub fn encode_pgm16(map: &Grid<u32>) -> Result<Vec<u8>> {
    let mut out = format!("P5\n{} {}\n65535\n", map.width, map.height).into_bytes();
    for &v in &map.data {
        let v = u16::try_from(v).map_err(|_| Error::usage(format!("instance id {v} does not fit in 16 bits")))?;
        out.extend_from_slice(&v.to_be_bytes());
    }
    Ok(out)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<RgbImage> {
    decode_ppm(&fs::read(path)?)
}

pub fn write_image(path: impl AsRef<Path>, image: &RgbImage) -> Result<()> {
    fs::write(path, encode_ppm(image))?;
    Ok(())
}

pub fn read_instance_map(path: impl AsRef<Path>) -> Result<Grid<u32>> {
    decode_pgm16(&fs::read(path)?)
}

pub fn write_instance_map(path: impl AsRef<Path>, map: &Grid<u32>) -> Result<()> {
    fs::write(path, encode_pgm16(map)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_minimal_header() {
        let mut bytes = b"P6\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        let img = decode_ppm(&bytes).unwrap();
        assert_eq!((img.width, img.height), (2, 1));
        assert_eq!(img.pixel(1, 0), [4, 5, 6]);
        assert_eq!(encode_ppm(&img), bytes);
    }

    #[test]
    fn skips_comments() {
        let mut bytes = b"P6 # made by hand\n1 1 # one pixel\n255\n".to_vec();
        bytes.extend_from_slice(&[9, 8, 7]);
        assert_eq!(decode_ppm(&bytes).unwrap().data, vec![9, 8, 7]);
    }

    #[test]
    fn truncated_payload_is_an_error_with_offset() {
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0; 11]);
        match decode_ppm(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, bytes.len()),
            other => panic!("expected a format error, got {other:?}"),
        }
    }

    #[test]
    fn unsupported_max_value_and_bad_magic() {
        let bytes = b"P6\n1 1\n65535\n\0\0\0\0\0\0".to_vec();
        assert!(matches!(decode_ppm(&bytes), Err(Error::Format { .. })));
        assert!(matches!(decode_ppm(b"P3\n1 1\n255\n1 2 3"), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(decode_ppm(b"P6\n1"), Err(Error::Format { .. })));
    }

    #[test]
    fn instance_map_round_trip_is_bitwise() {
        let map = Grid::new(3, 2, vec![0, 1, 300, 65535, 2, 2]).unwrap();
        let bytes = encode_pgm16(&map).unwrap();
        assert_eq!(decode_pgm16(&bytes).unwrap(), map);
        assert!(encode_pgm16(&Grid::new(1, 1, vec![70000]).unwrap()).is_err());
    }
}
