//! Point files: CSV with a `row,col` header and one point per line.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{GridShape, PointAnnotation};

#[derive(Debug, Serialize, Deserialize)]
struct PointRecord {
    row: f64,
    col: f64,
}

pub fn read_points<R: std::io::Read>(reader: R) -> std::result::Result<Vec<[f64; 2]>, String> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| e.to_string())?.clone();
    if headers.len() != 2 || &headers[0] != "row" || &headers[1] != "col" {
        return Err(format!("expected header `row,col`, found `{}`", headers.iter().collect::<Vec<_>>().join(",")));
    }
    rdr.deserialize::<PointRecord>()
        .map(|r| r.map(|p| [p.row, p.col]).map_err(|e| e.to_string()))
        .collect()
}

pub fn write_points<W: std::io::Write>(writer: W, points: &PointAnnotation) -> csv::Result<()> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    wtr.write_record(["row", "col"])?;
    for p in points.coords() {
        wtr.serialize(PointRecord { row: p[0], col: p[1] })?;
    }
    wtr.flush()?;
    Ok(())
}

/// Loads a point file, rejecting non-finite, negative, and (when `shape`
/// is given) out-of-grid coordinates.
pub fn load_points(path: impl AsRef<Path>, shape: Option<GridShape>) -> Result<PointAnnotation> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let coords = read_points(file).map_err(|message| Error::Parse {
        path: path.to_path_buf(),
        message,
    })?;
    let as_data = |e: Error| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let points = PointAnnotation::new(coords).map_err(as_data)?;
    if let Some(shape) = shape {
        points.check_within(shape).map_err(as_data)?;
    }
    Ok(points)
}

pub fn save_points(path: impl AsRef<Path>, points: &PointAnnotation) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_points(file, points).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_header_check() {
        let pts = PointAnnotation::new(vec![[1.0, 2.5], [0.0, 7.0]]).unwrap();
        let mut buf = Vec::new();
        write_points(&mut buf, &pts).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("row,col\n"));
        assert_eq!(read_points(&buf[..]).unwrap(), pts.coords());
        assert!(read_points(&b"x,y\n1,2\n"[..]).is_err());
        assert_eq!(read_points(&b"row,col\n"[..]).unwrap().len(), 0);
    }

    #[test]
    fn load_rejects_out_of_grid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        std::fs::write(&path, "row,col\n5,1\n").unwrap();
        let shape = GridShape::new(4, 4).unwrap();
        assert!(load_points(&path, Some(shape)).is_err());
        std::fs::write(&path, "row,col\n-1,1\n").unwrap();
        assert!(load_points(&path, None).is_err());
    }
}
