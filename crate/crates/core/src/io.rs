//! File formats: flat binary cubes, CSV grids and tables, PGM images.
//!
//! Cube files carry an ASCII header followed by the payload:
//!
//! ```text
//! GRCA-CUBE 1
//! bands 64
//! rows 30
//! cols 30
//! interleave bip
//! byteorder little
//! datatype f32
//! end
//! <4 * bands * rows * cols bytes>
//! ```
//!
//! Floating point values in text files use Rust's shortest round-trip
//! formatting, so reading a written file gives back the same `f64`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{EndmemberSet, Grid, HyperCube};
use crate::synth::ClassMap;

const CUBE_MAGIC: &str = "GRCA-CUBE 1";

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_cube(cube: &HyperCube) -> Vec<u8> {
    let header = format!(
        "{CUBE_MAGIC}\nbands {}\nrows {}\ncols {}\ninterleave bip\nbyteorder little\ndatatype f32\nend\n",
        cube.bands(),
        cube.rows(),
        cube.cols()
    );
    let mut out = header.into_bytes();
    out.reserve(4 * cube.as_slice().len());
    for v in cube.as_slice() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_cube(bytes: &[u8], path: &Path) -> Result<HyperCube> {
    let bad = |d: String| Error::format(path, d);
    let mut dims = [None::<usize>; 3];
    let mut offset = 0;
    let mut first = true;
    loop {
        let rest = &bytes[offset..];
        let nl = rest.iter().position(|b| *b == b'\n').ok_or_else(|| bad("header is not terminated by `end`".into()))?;
        let line = std::str::from_utf8(&rest[..nl]).map_err(|_| bad("header is not ASCII".into()))?.trim();
        offset += nl + 1;
        if first {
            if line != CUBE_MAGIC {
                return Err(bad(format!("expected `{CUBE_MAGIC}`, found `{line}`")));
            }
            first = false;
            continue;
        }
        if line == "end" {
            break;
        }
        let (key, value) = line.split_once(' ').ok_or_else(|| bad(format!("bad header line `{line}`")))?;
        let value = value.trim();
        let expect = |want: &str| {
            if value == want {
                Ok(())
            } else {
                Err(bad(format!("unsupported {key} `{value}`, only `{want}` is supported")))
            }
        };
        match key {
            "bands" | "rows" | "cols" => {
                let n: usize = value.parse().map_err(|_| bad(format!("{key} is not an integer: `{value}`")))?;
                dims[["bands", "rows", "cols"].iter().position(|k| *k == key).unwrap()] = Some(n);
            }
            "interleave" => expect("bip")?,
            "byteorder" => expect("little")?,
            "datatype" => expect("f32")?,
            _ => return Err(bad(format!("unknown header key `{key}`"))),
        }
    }
    let [Some(bands), Some(rows), Some(cols)] = dims else {
        return Err(bad("header must give bands, rows and cols".into()));
    };
    let payload = &bytes[offset..];
    let n = bands * rows * cols;
    if payload.len() != 4 * n {
        return Err(bad(format!("payload has {} bytes, header implies {}", payload.len(), 4 * n)));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    HyperCube::new(bands, rows, cols, data)
}

pub fn write_cube(path: &Path, cube: &HyperCube) -> Result<()> {
    write_file(path, &encode_cube(cube))
}

pub fn read_cube(path: &Path) -> Result<HyperCube> {
    decode_cube(&read_bytes(path)?, path)
}

/// Numeric table: one line per row, comma separated.
fn format_rows<'a>(rows: impl Iterator<Item = &'a [f64]>) -> String {
    let mut out = String::new();
    for row in rows {
        for (k, v) in row.iter().enumerate() {
            if k > 0 {
                out.push(',');
            }
            write!(out, "{v:e}").unwrap();
        }
        out.push('\n');
    }
    out
}

/// Parse a comma separated numeric table, skipping blank lines and lines
/// that start with a letter (headers).
fn parse_rows(text: &str, path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with(|c: char| c.is_ascii_alphabetic()) {
            continue;
        }
        let row = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
        if let Some(first) = rows.first().map(Vec::len) {
            if row.len() != first {
                return Err(Error::format(path, format!("line {} has {} fields, expected {first}", n + 1, row.len())));
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Endmembers as `L` lines of `R` values.
pub fn write_endmembers(path: &Path, m: &EndmemberSet) -> Result<()> {
    let rows: Vec<Vec<f64>> = (0..m.bands()).map(|b| (0..m.count()).map(|r| m.column(r)[b]).collect()).collect();
    write_file(path, format_rows(rows.iter().map(Vec::as_slice)).as_bytes())
}

pub fn read_endmembers(path: &Path) -> Result<EndmemberSet> {
    let rows = parse_rows(&read_text(path)?, path)?;
    let (l, r) = (rows.len(), rows.first().map_or(0, Vec::len));
    if l == 0 || r == 0 {
        return Err(Error::format(path, "no endmember values"));
    }
    let columns = (0..r).flat_map(|c| rows.iter().map(move |row| row[c])).collect();
    EndmemberSet::from_columns(l, r, columns)
}

pub fn write_grid(path: &Path, grid: &Grid) -> Result<()> {
    write_file(path, format_rows(grid.as_slice().chunks(grid.cols().max(1))).as_bytes())
}

pub fn read_grid(path: &Path) -> Result<Grid> {
    let rows = parse_rows(&read_text(path)?, path)?;
    let cols = rows.first().map_or(0, Vec::len);
    Ok(Grid::from_vec(rows.len(), cols, rows.concat()))
}

/// Per-pixel table with a header line; pixels in row-major order.
pub fn write_pixel_table(path: &Path, header: &[String], values: &[f64]) -> Result<()> {
    let width = header.len().max(1);
    let mut out = header.join(",");
    out.push('\n');
    out.push_str(&format_rows(values.chunks(width)));
    write_file(path, out.as_bytes())
}

/// Returns `(columns, values)`.
pub fn read_pixel_table(path: &Path) -> Result<(usize, Vec<f64>)> {
    let rows = parse_rows(&read_text(path)?, path)?;
    Ok((rows.first().map_or(0, Vec::len), rows.concat()))
}

pub fn write_class_map(path: &Path, map: &ClassMap) -> Result<()> {
    let mut out = String::new();
    for row in map.labels.chunks(map.cols.max(1)) {
        let line: Vec<String> = row.iter().map(usize::to_string).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    write_file(path, out.as_bytes())
}

pub fn read_class_map(path: &Path) -> Result<ClassMap> {
    let text = read_text(path)?;
    let mut labels = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row = line
            .split_whitespace()
            .map(str::parse::<usize>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
        if *cols.get_or_insert(row.len()) != row.len() {
            return Err(Error::format(path, format!("line {} has a different width", n + 1)));
        }
        labels.extend(row);
        rows += 1;
    }
    Ok(ClassMap {
        rows,
        cols: cols.unwrap_or(0),
        labels,
    })
}

/// Plain PGM (`P2`, maxval 255) of values in `[0, 1]`, scaled and rounded.
pub fn encode_pgm(rows: usize, cols: usize, values: &[f64]) -> Vec<u8> {
    let mut out = format!("P2\n{cols} {rows}\n255\n");
    for row in values.chunks(cols.max(1)) {
        let line: Vec<String> = row.iter().map(|v| ((v.clamp(0.0, 1.0) * 255.0).round() as u8).to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out.into_bytes()
}

pub fn write_pgm(path: &Path, rows: usize, cols: usize, values: &[f64]) -> Result<()> {
    write_file(path, &encode_pgm(rows, cols, values))
}

/// Returns `(rows, cols, values scaled back to [0, 1])`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let text = read_text(path)?;
    let mut tokens = text.lines().filter(|l| !l.starts_with('#')).flat_map(str::split_whitespace);
    let bad = |d: &str| Error::format(path, d.to_string());
    if tokens.next() != Some("P2") {
        return Err(bad("not a plain PGM (P2)"));
    }
    let mut num = || -> Result<usize> {
        tokens.next().and_then(|t| t.parse().ok()).ok_or_else(|| bad("truncated or non-numeric PGM"))
    };
    let (cols, rows, maxval) = (num()?, num()?, num()?);
    if maxval == 0 {
        return Err(bad("maxval must be positive"));
    }
    let values = (0..rows * cols).map(|_| num().map(|v| v as f64 / maxval as f64)).collect::<Result<Vec<_>>>()?;
    Ok((rows, cols, values))
}

pub fn write_lines(path: &Path, values: &[f64]) -> Result<()> {
    let mut out = String::new();
    for v in values {
        writeln!(out, "{v:e}").unwrap();
    }
    write_file(path, out.as_bytes())
}

pub fn read_lines(path: &Path) -> Result<Vec<f64>> {
    Ok(parse_rows(&read_text(path)?, path)?.concat())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn cube_round_trip_is_bit_identical() {
        let dir = tmp();
        let p = dir.path().join("c.bin");
        let data: Vec<f64> = (0..24).map(|k| (k as f32 * 0.37).sin() as f64).collect();
        let cube = HyperCube::new(4, 2, 3, data).unwrap();
        write_cube(&p, &cube).unwrap();
        let back = read_cube(&p).unwrap();
        assert_eq!(back, cube);
        let first = fs::read(&p).unwrap();
        write_cube(&p, &back).unwrap();
        assert_eq!(fs::read(&p).unwrap(), first);
    }

    #[test]
    fn cube_header_matches_payload() {
        let cube = HyperCube::zeros(5, 3, 2);
        let bytes = encode_cube(&cube);
        let text = String::from_utf8_lossy(&bytes);
        assert!(text.starts_with("GRCA-CUBE 1\nbands 5\nrows 3\ncols 2\n"));
        let end = text.find("end\n").unwrap() + 4;
        assert_eq!(bytes.len() - end, 4 * 5 * 3 * 2);
        let mut short = bytes.clone();
        short.pop();
        assert!(matches!(decode_cube(&short, Path::new("x")), Err(Error::Format { .. })));
        let swapped = String::from_utf8_lossy(&bytes).replace("little", "big");
        assert!(decode_cube(swapped.as_bytes(), Path::new("x")).is_err());
    }

    #[test]
    fn endmember_csv_layout() {
        let dir = tmp();
        let p = dir.path().join("m.csv");
        let m = EndmemberSet::from_columns(3, 2, vec![0.1, 0.2, 0.3, 0.5, 0.25, 0.125]).unwrap();
        write_endmembers(&p, &m).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "1e-1,5e-1\n2e-1,2.5e-1\n3e-1,1.25e-1\n");
        assert_eq!(read_endmembers(&p).unwrap(), m);
    }

    #[test]
    fn class_map_and_pgm() {
        let dir = tmp();
        let p = dir.path().join("map.txt");
        let map = ClassMap {
            rows: 2,
            cols: 3,
            labels: vec![0, 1, 2, 5, 4, 3],
        };
        write_class_map(&p, &map).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "0 1 2\n5 4 3\n");
        assert_eq!(read_class_map(&p).unwrap(), map);

        let bytes = encode_pgm(1, 3, &[0.0, 0.5, 1.0]);
        assert_eq!(String::from_utf8(bytes).unwrap(), "P2\n3 1\n255\n0 128 255\n");
        let q = dir.path().join("d.pgm");
        write_pgm(&q, 1, 3, &[0.0, 1.0, 1.0]).unwrap();
        assert_eq!(read_pgm(&q).unwrap(), (1, 3, vec![0.0, 1.0, 1.0]));
    }

    #[test]
    fn malformed_tables_are_rejected() {
        let dir = tmp();
        let p = dir.path().join("bad.csv");
        fs::write(&p, "1,2\n3\n").unwrap();
        assert!(read_grid(&p).is_err());
        fs::write(&p, "1,x\n").unwrap();
        assert!(read_grid(&p).is_err());
        assert!(matches!(read_grid(&dir.path().join("missing.csv")), Err(Error::Io { .. })));
    }

    proptest! {
        #[test]
        fn text_round_trip_is_exact(values in proptest::collection::vec(-1e6f64..1e6, 1..40), cols in 1usize..5) {
            let dir = tmp();
            let n = values.len() / cols * cols;
            prop_assume!(n > 0);
            let grid = Grid::from_vec(n / cols, cols, values[..n].to_vec());
            let p = dir.path().join("g.csv");
            write_grid(&p, &grid).unwrap();
            prop_assert_eq!(read_grid(&p).unwrap(), grid);
            let q = dir.path().join("t.csv");
            let header: Vec<String> = (0..cols).map(|c| format!("c{c}")).collect();
            write_pixel_table(&q, &header, &values[..n]).unwrap();
            prop_assert_eq!(read_pixel_table(&q).unwrap(), (cols, values[..n].to_vec()));
        }
    }
}
