//! XYZ text and binary little-endian PLY reading and writing.
//!
//! XYZ: one `x y z` line per point, an optional fourth `0`/`1` column carrying
//! a per-point anomaly flag, `#` comments and blank lines ignored.
//!
//! PLY: `binary_little_endian 1.0` with a leading `vertex` element whose
//! `x`, `y`, `z` properties are `float`. Other scalar vertex properties are
//! skipped, except a `uchar anomaly` property which becomes per-point labels.
//! An object label is carried in a `comment label <normal|anomalous>` line.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

use super::{Label, Point, PointCloud};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    Xyz,
    Ply,
}

impl CloudFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "xyz" | "txt" => Some(CloudFormat::Xyz),
            "ply" => Some(CloudFormat::Ply),
            _ => None,
        }
    }
}

pub fn read_cloud(path: &Path, format: CloudFormat) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match format {
        CloudFormat::Xyz => parse_xyz(path, &bytes),
        CloudFormat::Ply => parse_ply(path, &bytes),
    }
}

pub fn write_cloud(cloud: &PointCloud, path: &Path, format: CloudFormat) -> Result<()> {
    let bytes = match format {
        CloudFormat::Xyz => encode_xyz(cloud),
        CloudFormat::Ply => encode_ply(cloud),
    };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

fn label_name(l: Label) -> &'static str {
    match l {
        Label::Normal => "normal",
        Label::Anomalous => "anomalous",
    }
}

fn encode_xyz(cloud: &PointCloud) -> Vec<u8> {
    let mut out = format!("# label {}\n", label_name(cloud.label));
    let labels = cloud.point_labels();
    for (i, p) in cloud.points().iter().enumerate() {
        // float32 precision, printed with enough digits to round-trip
        let [x, y, z] = p.map(|v| v as f32);
        match labels {
            Some(l) => out.push_str(&format!("{x:?} {y:?} {z:?} {}\n", l[i] as u8)),
            None => out.push_str(&format!("{x:?} {y:?} {z:?}\n")),
        }
    }
    out.into_bytes()
}

fn parse_xyz(path: &Path, bytes: &[u8]) -> Result<PointCloud> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line: Some(line),
        offset: None,
        msg,
    };
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: None,
        offset: Some(e.valid_up_to() as u64),
        msg: "invalid UTF-8".into(),
    })?;
    let mut points = Vec::new();
    let mut flags = Vec::new();
    let mut label = Label::Normal;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(l) = comment.trim().strip_prefix("label ") {
                label = parse_label(l.trim()).ok_or_else(|| err(lineno + 1, format!("unknown label {l:?}")))?;
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 && fields.len() != 4 {
            return Err(err(lineno + 1, format!("expected 3 or 4 columns, found {}", fields.len())));
        }
        let mut p = [0.0; 3];
        for k in 0..3 {
            p[k] = fields[k]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(lineno + 1, format!("bad coordinate {:?}", fields[k])))?;
        }
        points.push(p);
        flags.push(match fields.get(3) {
            None => None,
            Some(&"0") => Some(false),
            Some(&"1") => Some(true),
            Some(other) => return Err(err(lineno + 1, format!("bad point label {other:?}"))),
        });
    }
    if points.is_empty() {
        return Err(err(1, "no points".into()));
    }
    let point_labels = if flags.iter().all(Option::is_some) {
        Some(flags.into_iter().map(Option::unwrap).collect())
    } else if flags.iter().all(Option::is_none) {
        None
    } else {
        return Err(err(1, "point labels present on some lines only".into()));
    };
    PointCloud::with_point_labels(points, label, point_labels)
}

fn parse_label(s: &str) -> Option<Label> {
    match s {
        "normal" => Some(Label::Normal),
        "anomalous" => Some(Label::Anomalous),
        _ => None,
    }
}

fn encode_ply(cloud: &PointCloud) -> Vec<u8> {
    let labels = cloud.point_labels();
    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    header.push_str(&format!("comment label {}\n", label_name(cloud.label)));
    header.push_str(&format!("element vertex {}\n", cloud.len()));
    header.push_str("property float x\nproperty float y\nproperty float z\n");
    if labels.is_some() {
        header.push_str("property uchar anomaly\n");
    }
    header.push_str("end_header\n");
    let stride = if labels.is_some() { 13 } else { 12 };
    let mut out = Vec::with_capacity(header.len() + stride * cloud.len());
    out.extend_from_slice(header.as_bytes());
    for (i, p) in cloud.points().iter().enumerate() {
        for v in p {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        if let Some(l) = labels {
            out.push(l[i] as u8);
        }
    }
    out
}

fn scalar_size(ty: &str) -> Option<usize> {
    Some(match ty {
        "char" | "uchar" | "int8" | "uint8" => 1,
        "short" | "ushort" | "int16" | "uint16" => 2,
        "int" | "uint" | "float" | "int32" | "uint32" | "float32" => 4,
        "double" | "float64" => 8,
        _ => return None,
    })
}

fn parse_ply(path: &Path, bytes: &[u8]) -> Result<PointCloud> {
    let at = |offset: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line: None,
        offset: Some(offset as u64),
        msg,
    };
    if bytes.is_empty() {
        return Err(at(0, "empty file".into()));
    }

    // header: ASCII lines up to and including "end_header\n"
    let mut pos = 0usize;
    let mut lines = Vec::new();
    loop {
        let rest = &bytes[pos..];
        let Some(nl) = rest.iter().position(|&b| b == b'\n') else {
            return Err(at(pos, "unterminated header".into()));
        };
        let line = std::str::from_utf8(&rest[..nl])
            .map_err(|_| at(pos, "non-ASCII header".into()))?
            .trim_end_matches('\r')
            .to_string();
        let start = pos;
        pos += nl + 1;
        if line == "end_header" {
            break;
        }
        lines.push((start, line));
    }

    let mut iter = lines.into_iter();
    match iter.next() {
        Some((_, l)) if l == "ply" => {}
        _ => return Err(at(0, "missing 'ply' magic".into())),
    }

    let mut label = Label::Normal;
    let mut vertex_count: Option<usize> = None;
    // (name, byte size, scalar type)
    let mut props: Vec<(String, usize, String)> = Vec::new();
    let mut format_ok = false;
    let mut in_vertex = false;
    for (off, line) in iter {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["format", "binary_little_endian", "1.0"] => format_ok = true,
            ["format", other, ..] => return Err(at(off, format!("unsupported format {other}"))),
            ["comment", "label", l] => {
                label = parse_label(l).ok_or_else(|| at(off, format!("unknown label {l}")))?
            }
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", "vertex", n] => {
                if vertex_count.is_some() {
                    return Err(at(off, "duplicate vertex element".into()));
                }
                let n: usize = n.parse().map_err(|_| at(off, format!("bad vertex count {n}")))?;
                vertex_count = Some(n);
                in_vertex = true;
            }
            ["element", name, _] => {
                if vertex_count.is_none() {
                    return Err(at(off, format!("element {name} before vertex")));
                }
                in_vertex = false;
            }
            ["property", "list", ..] if in_vertex => {
                return Err(at(off, "list property in vertex element".into()))
            }
            ["property", ty, name] if in_vertex => {
                let size = scalar_size(ty).ok_or_else(|| at(off, format!("unknown type {ty}")))?;
                props.push((name.to_string(), size, ty.to_string()));
            }
            ["property", ..] => {}
            _ => return Err(at(off, format!("unrecognized header line {line:?}"))),
        }
    }
    if !format_ok {
        return Err(at(0, "missing binary_little_endian format line".into()));
    }
    let n = vertex_count.ok_or_else(|| at(0, "no vertex element".into()))?;
    if n == 0 {
        return Err(at(pos, "vertex element has 0 vertices".into()));
    }

    let find = |name: &str| -> Result<usize> {
        let i = props
            .iter()
            .position(|(p, _, _)| p == name)
            .ok_or_else(|| at(0, format!("missing vertex property {name}")))?;
        if props[i].2 != "float" && props[i].2 != "float32" {
            return Err(at(0, format!("property {name} must be float, found {}", props[i].2)));
        }
        Ok(i)
    };
    let xyz = [find("x")?, find("y")?, find("z")?];
    let anomaly = props.iter().position(|(p, s, _)| p == "anomaly" && *s == 1);
    let offsets: Vec<usize> = props
        .iter()
        .scan(0, |acc, (_, s, _)| {
            let o = *acc;
            *acc += s;
            Some(o)
        })
        .collect();
    let stride: usize = props.iter().map(|(_, s, _)| s).sum();

    let body = &bytes[pos..];
    if body.len() < n * stride {
        return Err(at(
            pos + body.len(),
            format!("truncated vertex data: need {} bytes, found {}", n * stride, body.len()),
        ));
    }
    let mut points = Vec::with_capacity(n);
    let mut flags = anomaly.map(|_| Vec::with_capacity(n));
    for v in 0..n {
        let rec = &body[v * stride..(v + 1) * stride];
        let mut p: Point = [0.0; 3];
        for k in 0..3 {
            let o = offsets[xyz[k]];
            let val = f32::from_le_bytes(rec[o..o + 4].try_into().unwrap());
            if !val.is_finite() {
                return Err(at(pos + v * stride + o, "non-finite coordinate".into()));
            }
            p[k] = val as f64;
        }
        points.push(p);
        if let (Some(a), Some(fl)) = (anomaly, flags.as_mut()) {
            fl.push(rec[offsets[a]] != 0);
        }
    }
    PointCloud::with_point_labels(points, label, flags)
}
