//! Binary PGM (P5) image I/O. Images live in [-1,1] in memory and are
//! quantized to 8-bit [0,1] on disk.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::io::{BufRead, Read, Write};
use std::path::Path;

/// Writes a `[1,1,h,w]` or `[h,w]` tensor in [-1,1] as an 8-bit P5 file.
pub fn write_pgm(path: &Path, img: &Tensor) -> Result<()> {
    let (h, w) = image_dims(img)?;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    let run = |out: &mut std::io::BufWriter<std::fs::File>| -> std::io::Result<()> {
        write!(out, "P5\n{w} {h}\n255\n")?;
        let bytes: Vec<u8> = img
            .data
            .iter()
            .map(|&v| {
                let v01 = (v + 1.0) / 2.0;
                (v01 * 255.0).round().clamp(0.0, 255.0) as u8
            })
            .collect();
        out.write_all(&bytes)
    };
    run(&mut out).map_err(|e| Error::io(path, e))
}

/// Reads a P5 file into a `[1,1,h,w]` tensor in [-1,1].
pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = std::io::BufReader::new(file);
    let parse = |r: &mut std::io::BufReader<std::fs::File>| -> std::io::Result<Tensor> {
        let magic = read_token(r)?;
        if magic != "P5" {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("not a binary PGM (magic {magic:?})"),
            ));
        }
        let w: usize = parse_token(r, "width")?;
        let h: usize = parse_token(r, "height")?;
        let maxval: usize = parse_token(r, "maxval")?;
        if maxval != 255 {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("unsupported maxval {maxval}"),
            ));
        }
        let mut bytes = vec![0u8; w * h];
        r.read_exact(&mut bytes)?;
        let data: Vec<f64> = bytes
            .iter()
            .map(|&b| (b as f64 / 255.0) * 2.0 - 1.0)
            .collect();
        Ok(Tensor::new(vec![1, 1, h, w], data).expect("consistent dims"))
    };
    parse(&mut r).map_err(|e| Error::io(path, e))
}

fn image_dims(img: &Tensor) -> Result<(usize, usize)> {
    match img.shape.as_slice() {
        [1, 1, h, w] => Ok((*h, *w)),
        [h, w] => Ok((*h, *w)),
        other => Err(Error::BadGeometry {
            expected: "[1,1,h,w] or [h,w] image".into(),
            got: format!("{other:?}"),
        }),
    }
}

/// Reads one whitespace-delimited token, skipping `#` comment lines.
fn read_token(r: &mut impl BufRead) -> std::io::Result<String> {
    let mut token = String::new();
    let mut byte = [0u8; 1];
    loop {
        r.read_exact(&mut byte)?;
        let c = byte[0] as char;
        if c == '#' {
            let mut line = String::new();
            r.read_line(&mut line)?;
            continue;
        }
        if c.is_ascii_whitespace() {
            if token.is_empty() {
                continue;
            }
            return Ok(token);
        }
        token.push(c);
    }
}

fn parse_token<T: std::str::FromStr>(r: &mut impl BufRead, what: &str) -> std::io::Result<T> {
    read_token(r)?.parse().map_err(|_| {
        std::io::Error::new(std::io::ErrorKind::InvalidData, format!("bad {what} field"))
    })
}
