//! Point-cloud file formats: ASCII XYZ, ASCII PLY 1.0, and the internal
//! little-endian "PCD1" binary (magic, u64 point count, f32 triples).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{CloudError, Point3, PointCloud, Result};

const PCD1_MAGIC: &[u8; 4] = b"PCD1";

fn parse_err(path: &Path, msg: impl Into<String>) -> CloudError {
    CloudError::Parse { path: path.display().to_string(), msg: msg.into() }
}

/// One "x y z" triple per line; blank lines and `#` comments are skipped.
pub fn read_xyz(path: &Path) -> Result<PointCloud> {
    let f = File::open(path)?;
    let mut points = Vec::new();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let mut p = [0.0f64; 3];
        for v in p.iter_mut() {
            let tok = it
                .next()
                .ok_or_else(|| parse_err(path, format!("line {}: expected 3 coordinates", lineno + 1)))?;
            *v = tok
                .parse()
                .map_err(|e| parse_err(path, format!("line {}: {e}", lineno + 1)))?;
        }
        points.push(p);
    }
    PointCloud::new(points)
}

pub fn write_xyz(cloud: &PointCloud, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in cloud.points() {
        writeln!(w, "{} {} {}", p[0], p[1], p[2])?;
    }
    Ok(())
}

/// ASCII PLY 1.0 with float x, y, z vertex properties. Extra properties are
/// read past and ignored.
pub fn read_ply(path: &Path) -> Result<PointCloud> {
    let f = File::open(path)?;
    let mut lines = BufReader::new(f).lines();
    let magic = lines
        .next()
        .ok_or_else(|| parse_err(path, "empty file"))??;
    if magic.trim() != "ply" {
        return Err(parse_err(path, "not a PLY file"));
    }
    let mut vertex_count: Option<usize> = None;
    let mut in_vertex_element = false;
    let mut property_names: Vec<String> = Vec::new();
    let mut format_ok = false;
    for line in lines.by_ref() {
        let line = line?;
        let line = line.trim().to_string();
        let mut it = line.split_whitespace();
        match it.next() {
            Some("format") => {
                let kind = it.next().unwrap_or("");
                if kind != "ascii" {
                    return Err(parse_err(path, format!("unsupported PLY format '{kind}'")));
                }
                format_ok = true;
            }
            Some("element") => {
                let name = it.next().unwrap_or("");
                in_vertex_element = name == "vertex";
                if in_vertex_element {
                    let count = it
                        .next()
                        .ok_or_else(|| parse_err(path, "element vertex missing count"))?;
                    vertex_count = Some(
                        count
                            .parse()
                            .map_err(|e| parse_err(path, format!("vertex count: {e}")))?,
                    );
                }
            }
            Some("property") if in_vertex_element => {
                let mut toks: Vec<&str> = it.collect();
                let name = toks.pop().unwrap_or("");
                property_names.push(name.to_string());
            }
            Some("end_header") => break,
            _ => {}
        }
    }
    if !format_ok {
        return Err(parse_err(path, "missing format line"));
    }
    let count = vertex_count.ok_or_else(|| parse_err(path, "no vertex element"))?;
    let locate = |axis: &str| -> Result<usize> {
        property_names
            .iter()
            .position(|n| n == axis)
            .ok_or_else(|| parse_err(path, format!("no '{axis}' vertex property")))
    };
    let (ix, iy, iz) = (locate("x")?, locate("y")?, locate("z")?);
    let mut points = Vec::with_capacity(count);
    for line in lines {
        if points.len() == count {
            break;
        }
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() < property_names.len() {
            return Err(parse_err(
                path,
                format!("vertex row has {} values, header declares {}", toks.len(), property_names.len()),
            ));
        }
        let get = |i: usize| -> Result<f64> {
            toks[i]
                .parse()
                .map_err(|e| parse_err(path, format!("vertex value: {e}")))
        };
        points.push([get(ix)?, get(iy)?, get(iz)?]);
    }
    if points.len() != count {
        return Err(parse_err(
            path,
            format!("expected {count} vertices, found {}", points.len()),
        ));
    }
    PointCloud::new(points)
}

pub fn write_pcd1(cloud: &PointCloud, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(PCD1_MAGIC)?;
    w.write_u64::<LittleEndian>(cloud.len() as u64)?;
    for p in cloud.points() {
        for &v in p {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
    }
    // reference block: 1 flag byte, then triples when present
    match cloud.reference_points() {
        Some(refs) => {
            w.write_all(&[1])?;
            for p in refs {
                for &v in p {
                    w.write_f32::<LittleEndian>(v as f32)?;
                }
            }
        }
        None => w.write_all(&[0])?,
    }
    Ok(())
}

pub fn read_pcd1(path: &Path) -> Result<PointCloud> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != PCD1_MAGIC {
        return Err(parse_err(path, format!("bad magic {magic:?}")));
    }
    let count = r.read_u64::<LittleEndian>()? as usize;
    let read_triples = |r: &mut BufReader<File>| -> Result<Vec<Point3>> {
        let mut pts = Vec::with_capacity(count);
        for _ in 0..count {
            let x = r.read_f32::<LittleEndian>()? as f64;
            let y = r.read_f32::<LittleEndian>()? as f64;
            let z = r.read_f32::<LittleEndian>()? as f64;
            pts.push([x, y, z]);
        }
        Ok(pts)
    };
    let points = read_triples(&mut r)?;
    let mut flag = [0u8; 1];
    let reference = match r.read_exact(&mut flag) {
        Ok(()) if flag[0] == 1 => Some(read_triples(&mut r)?),
        _ => None,
    };
    PointCloud::with_reference(points, reference)
}

/// Reads a cloud by extension: `.xyz`/`.txt` → XYZ, `.ply` → PLY,
/// anything else → PCD1.
pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("xyz") | Some("txt") => read_xyz(path),
        Some("ply") => read_ply(path),
        _ => read_pcd1(path),
    }
}
