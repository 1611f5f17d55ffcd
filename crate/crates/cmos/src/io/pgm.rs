//! Binary PGM (P5) frames, 8- or 16-bit, normalized to `[0,1]` on load.

use std::path::Path;

use crate::error::{Error, Result};
use crate::preprocess::GrayFrame;

/// Reads a P5 PGM file. 16-bit samples are big-endian per the format.
pub fn read(path: &Path) -> Result<GrayFrame> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn parse(bytes: &[u8]) -> std::result::Result<GrayFrame, String> {
    let mut pos = 0usize;

    let token = |pos: &mut usize| -> std::result::Result<String, String> {
        // Skip whitespace and `#` comment lines.
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            } else {
                break;
            }
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };

    if token(&mut pos)? != "P5" {
        return Err("not a P5 PGM".into());
    }
    let w: usize = token(&mut pos)?.parse().map_err(|_| "bad width")?;
    let h: usize = token(&mut pos)?.parse().map_err(|_| "bad height")?;
    let maxval: u32 = token(&mut pos)?.parse().map_err(|_| "bad maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(format!("maxval {maxval} out of range"));
    }
    // Exactly one whitespace byte separates the header from the payload.
    pos += 1;
    let wide = maxval > 255;
    let needed = w * h * if wide { 2 } else { 1 };
    if bytes.len() < pos + needed {
        return Err("truncated payload".into());
    }
    let payload = &bytes[pos..pos + needed];
    let scale = 1.0 / maxval as f32;
    let data: Vec<f32> = if wide {
        payload
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f32 * scale)
            .collect()
    } else {
        payload.iter().map(|&b| b as f32 * scale).collect()
    };
    Ok(GrayFrame::new(h, w, data))
}

/// Writes an 8-bit P5 PGM; values are clamped to `[0,1]` and scaled to 255.
pub fn write(path: &Path, frame: &GrayFrame) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", frame.width, frame.height).into_bytes();
    out.extend(
        frame
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    super::write_atomic(path, &out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eight_bit_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.pgm");
        let frame = GrayFrame::new(2, 3, vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.1]);
        write(&path, &frame).unwrap();
        let back = read(&path).unwrap();
        assert_eq!(back.height, 2);
        assert_eq!(back.width, 3);
        for (a, b) in back.data.iter().zip(&frame.data) {
            assert!((a - b).abs() < 1.0 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn sixteen_bit_and_comments() {
        let mut bytes = b"P5\n# a comment\n2 1\n65535\n".to_vec();
        bytes.extend_from_slice(&0u16.to_be_bytes());
        bytes.extend_from_slice(&65535u16.to_be_bytes());
        let frame = parse(&bytes).unwrap();
        assert_eq!(frame.data, vec![0.0, 1.0]);
    }

    #[test]
    fn rejects_non_pgm() {
        assert!(parse(b"P6\n1 1\n255\nxxx").is_err());
        assert!(parse(b"P5\n4 4\n255\nshort").is_err());
    }
}
