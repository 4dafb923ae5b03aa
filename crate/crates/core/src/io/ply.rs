//! Binary little-endian PLY with one vertex per primitive and raw (pre-decode) attributes.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::scene::GaussianCloud;

/// Vertex properties in file order.
pub const PROPERTIES: [&str; 23] = [
    "x", "y", "z", "rot_0", "rot_1", "rot_2", "rot_3", "scale_0", "scale_1", "scale_2", "opacity", "color_r",
    "color_g", "color_b", "beta_d_r", "beta_d_g", "beta_d_b", "beta_b_r", "beta_b_g", "beta_b_b", "veil_r",
    "veil_g", "veil_b",
];

fn row(cloud: &GaussianCloud, i: usize) -> [f64; 23] {
    let mut r = [0.0; 23];
    r[0..3].copy_from_slice(&cloud.positions[i]);
    r[3..7].copy_from_slice(&cloud.rotations[i]);
    r[7..10].copy_from_slice(&cloud.log_scales[i]);
    r[10] = cloud.opacity_logits[i];
    r[11..14].copy_from_slice(&cloud.base_colors[i]);
    r[14..17].copy_from_slice(&cloud.atten_raw[i]);
    r[17..20].copy_from_slice(&cloud.backsc_raw[i]);
    r[20..23].copy_from_slice(&cloud.veil_raw[i]);
    r
}

fn push_row(cloud: &mut GaussianCloud, r: &[f64; 23]) {
    let v3 = |o: usize| [r[o], r[o + 1], r[o + 2]];
    cloud.positions.push(v3(0));
    cloud.rotations.push([r[3], r[4], r[5], r[6]]);
    cloud.log_scales.push(v3(7));
    cloud.opacity_logits.push(r[10]);
    cloud.base_colors.push(v3(11));
    cloud.atten_raw.push(v3(14));
    cloud.backsc_raw.push(v3(17));
    cloud.veil_raw.push(v3(20));
}

/// Encodes the cloud as float32 PLY.
pub fn write_ply_to(cloud: &GaussianCloud, mut w: impl Write) -> std::io::Result<()> {
    let mut header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n",
        cloud.count()
    );
    for p in PROPERTIES {
        header.push_str(&format!("property float {p}\n"));
    }
    header.push_str("end_header\n");
    w.write_all(header.as_bytes())?;
    for i in 0..cloud.count() {
        for v in row(cloud, i) {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
    }
    w.flush()
}

pub fn write_ply(cloud: &GaussianCloud, path: &Path) -> Result<()> {
    cloud.validate()?;
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_ply_to(cloud, BufWriter::new(f)).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy)]
enum Scalar {
    F32,
    F64,
}

/// Decodes a PLY produced by [`write_ply_to`]; properties may appear in any
/// order and as `float` or `double`, but all 23 must be present.
pub fn read_ply_from(r: impl Read, origin: &Path) -> Result<GaussianCloud> {
    let mut r = BufReader::new(r);
    let mut line = String::new();
    let mut ln = 0usize;
    let mut next_line = |r: &mut BufReader<_>, line: &mut String| -> Result<()> {
        line.clear();
        ln += 1;
        let n = r.read_line(line).map_err(|e| Error::io(origin, e))?;
        if n == 0 {
            return Err(Error::parse(origin, ln, "unexpected end of header"));
        }
        Ok(())
    };
    next_line(&mut r, &mut line)?;
    if line.trim_end() != "ply" {
        return Err(Error::parse(origin, 1, "missing `ply` magic"));
    }
    let mut count: Option<usize> = None;
    let mut props: Vec<(String, Scalar)> = Vec::new();
    let mut header_line = 1;
    loop {
        next_line(&mut r, &mut line)?;
        header_line += 1;
        let t: Vec<&str> = line.split_whitespace().collect();
        match t.as_slice() {
            ["end_header"] => break,
            ["format", "binary_little_endian", _] => {}
            ["format", other, _] => {
                return Err(Error::parse(origin, header_line, format!("unsupported format `{other}`")))
            }
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", "vertex", n] => {
                count = Some(n.parse().map_err(|e| Error::parse(origin, header_line, format!("bad count: {e}")))?)
            }
            ["element", other, _] => {
                return Err(Error::parse(origin, header_line, format!("unexpected element `{other}`")))
            }
            ["property", ty, name] => {
                let s = match *ty {
                    "float" | "float32" => Scalar::F32,
                    "double" | "float64" => Scalar::F64,
                    _ => return Err(Error::parse(origin, header_line, format!("unsupported property type `{ty}`"))),
                };
                props.push((name.to_string(), s));
            }
            _ => return Err(Error::parse(origin, header_line, format!("unrecognized header line `{}`", line.trim_end()))),
        }
    }
    let count = count.ok_or_else(|| Error::parse(origin, header_line, "no vertex element"))?;
    let mut slots = Vec::with_capacity(props.len());
    for (name, _) in &props {
        slots.push(PROPERTIES.iter().position(|p| p == name));
    }
    for p in PROPERTIES {
        if !props.iter().any(|(n, _)| n == p) {
            return Err(Error::parse(origin, header_line, format!("missing property `{p}`")));
        }
    }
    let mut cloud = GaussianCloud::new();
    let body = |e: std::io::Error| Error::io(origin, e);
    for _ in 0..count {
        let mut vals = [0.0; 23];
        for ((_, ty), slot) in props.iter().zip(&slots) {
            let v = match ty {
                Scalar::F32 => r.read_f32::<LittleEndian>().map_err(body)? as f64,
                Scalar::F64 => r.read_f64::<LittleEndian>().map_err(body)?,
            };
            if let Some(s) = slot {
                vals[*s] = v;
            }
        }
        push_row(&mut cloud, &vals);
    }
    Ok(cloud)
}

pub fn read_ply(path: &Path) -> Result<GaussianCloud> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_ply_from(f, path)
}

/// The cloud with every attribute rounded to float32, i.e. what a PLY round trip yields.
pub fn to_f32_precision(cloud: &GaussianCloud) -> GaussianCloud {
    let mut out = GaussianCloud::new();
    for i in 0..cloud.count() {
        push_row(&mut out, &row(cloud, i).map(|v| v as f32 as f64));
    }
    out
}
