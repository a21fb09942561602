//! Binary PGM (P5, maxval 255) export/import for human inspection of
//! images and heatmaps. Pixel p in [0, 1] maps to round(p * 255), half
//! away from zero, so a round trip moves a pixel by at most 1/510.

use std::fs;
use std::path::Path;

use gazedec_core::Tensor;

use crate::error::{CliError, CliResult};

pub fn export_pgm(image: &Tensor) -> CliResult<Vec<u8>> {
    let (h, w) = match image.shape() {
        [h, w] => (*h, *w),
        s => return Err(CliError::data(format!("PGM export: image shape {s:?}"))),
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for &p in image.data() {
        if !(0.0..=1.0).contains(&p) {
            return Err(CliError::data(format!("PGM export: pixel {p} outside [0, 1]")));
        }
        out.push((p * 255.0 + 0.5).floor() as u8);
    }
    Ok(out)
}

/// Parse a binary PGM. Whitespace and `#` comments are accepted in the
/// header; the maxval must be 255.
pub fn import_pgm(bytes: &[u8]) -> CliResult<Tensor> {
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> CliResult<String> {
        // Skip whitespace and comments.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(CliError::data("PGM: truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    if token(bytes)? != "P5" {
        return Err(CliError::data("PGM: not a binary P5 file"));
    }
    let parse = |t: String| -> CliResult<usize> {
        t.parse::<usize>()
            .map_err(|_| CliError::data(format!("PGM: bad header token {t:?}")))
    };
    let w = parse(token(bytes)?)?;
    let h = parse(token(bytes)?)?;
    let maxval = parse(token(bytes)?)?;
    if maxval != 255 {
        return Err(CliError::data(format!("PGM: unsupported maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(CliError::data("PGM: missing header terminator"));
    }
    pos += 1;
    let need = h * w;
    if bytes.len() - pos != need {
        return Err(CliError::data(format!(
            "PGM: payload is {} bytes, expected {need}",
            bytes.len() - pos
        )));
    }
    let data: Vec<f32> = bytes[pos..].iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::from_vec(&[h, w], data).map_err(CliError::from)
}

pub fn write_pgm(path: &Path, image: &Tensor) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, export_pgm(image)?)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> CliResult<Tensor> {
    let bytes =
        fs::read(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    import_pgm(&bytes).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_image_is_all_zero_bytes() {
        let bytes = export_pgm(&Tensor::zeros(&[2, 3])).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert!(bytes[b"P5\n3 2\n255\n".len()..].iter().all(|&b| b == 0));
    }

    #[test]
    fn rounding_rule_is_half_up() {
        let t = Tensor::from_vec(&[1, 3], vec![1.0, 0.5, 0.0]).unwrap();
        let bytes = export_pgm(&t).unwrap();
        let payload = &bytes[bytes.len() - 3..];
        assert_eq!(payload, &[255, 128, 0]);
    }

    #[test]
    fn round_trip_error_is_bounded() {
        let vals: Vec<f32> = (0..256).map(|i| i as f32 / 255.0 * 0.997 + 0.001).collect();
        let t = Tensor::from_vec(&[16, 16], vals).unwrap();
        let back = import_pgm(&export_pgm(&t).unwrap()).unwrap();
        for (a, b) in t.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1.0 / 510.0 + 1e-7, "{a} vs {b}");
        }
    }

    #[test]
    fn header_with_comments_parses() {
        let mut bytes = b"P5\n# a comment\n 2 1 # trailing\n255\n".to_vec();
        bytes.extend_from_slice(&[10, 200]);
        let t = import_pgm(&bytes).unwrap();
        assert_eq!(t.shape(), &[1, 2]);
    }

    #[test]
    fn malformed_headers_are_rejected() {
        assert!(import_pgm(b"P6\n1 1\n255\nx").is_err());
        assert!(import_pgm(b"P5\n1 1\n254\nx").is_err());
        assert!(import_pgm(b"P5\n2 2\n255\nxy").is_err());
        assert!(import_pgm(b"P5\n1").is_err());
    }
}
