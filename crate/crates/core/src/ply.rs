//! Minimal PLY point I/O: writes binary little-endian `float x y z`, reads
//! binary little-endian or ASCII vertex elements with float/double coordinates.

use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::Point3;

pub fn write_ply(path: &Path, points: &[Point3<f64>]) -> io::Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write_ply_to(&mut w, points)?;
    w.flush()
}

pub fn write_ply_to<W: Write>(w: &mut W, points: &[Point3<f64>]) -> io::Result<()> {
    write!(
        w,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        points.len()
    )?;
    let mut buf = Vec::with_capacity(points.len() * 12);
    for p in points {
        for c in [p.x, p.y, p.z] {
            buf.extend_from_slice(&(c as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)
}

pub fn read_ply(path: &Path) -> io::Result<Vec<Point3<f64>>> {
    let file = std::fs::File::open(path)?;
    read_ply_from(&mut BufReader::new(file))
}

#[derive(Clone, Copy)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
        }
    }
}

fn bad(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

pub fn read_ply_from<R: BufRead>(r: &mut R) -> io::Result<Vec<Point3<f64>>> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != "ply" {
        return Err(bad("missing ply magic"));
    }
    let mut ascii = false;
    let mut count: Option<usize> = None;
    let mut in_vertex = false;
    let mut props: Vec<(String, Scalar)> = Vec::new();
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(bad("unterminated ply header"));
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", _] => ascii = true,
            ["format", "binary_little_endian", _] => ascii = false,
            ["format", other, _] => return Err(bad(format!("unsupported ply format {other}"))),
            ["element", "vertex", n] => {
                count = Some(n.parse().map_err(|_| bad("bad vertex count"))?);
                in_vertex = true;
            }
            ["element", ..] => {
                if count.is_none() {
                    return Err(bad("non-vertex element before vertex element"));
                }
                in_vertex = false;
            }
            ["property", "list", ..] if in_vertex => {
                return Err(bad("list properties on vertices are not supported"))
            }
            ["property", ty, name] if in_vertex => {
                let s = Scalar::parse(ty).ok_or_else(|| bad(format!("unknown type {ty}")))?;
                props.push((name.to_string(), s));
            }
            _ => {}
        }
    }
    let count = count.ok_or_else(|| bad("no vertex element"))?;
    let idx = |n: &str| {
        props
            .iter()
            .position(|(p, _)| p == n)
            .ok_or_else(|| bad(format!("missing property {n}")))
    };
    let (ix, iy, iz) = (idx("x")?, idx("y")?, idx("z")?);
    let mut out = Vec::with_capacity(count);
    if ascii {
        for _ in 0..count {
            line.clear();
            r.read_line(&mut line)?;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| bad("bad ascii value")))
                .collect::<Result<_, _>>()?;
            if vals.len() < props.len() {
                return Err(bad("short ascii vertex line"));
            }
            out.push(Point3::new(vals[ix], vals[iy], vals[iz]));
        }
    } else {
        let stride: usize = props.iter().map(|(_, s)| s.size()).sum();
        let offsets: Vec<usize> = props
            .iter()
            .scan(0, |acc, (_, s)| {
                let o = *acc;
                *acc += s.size();
                Some(o)
            })
            .collect();
        let mut buf = vec![0u8; stride * count];
        r.read_exact(&mut buf)?;
        for rec in buf.chunks_exact(stride) {
            let get = |i: usize| props[i].1.decode(&rec[offsets[i]..]);
            out.push(Point3::new(get(ix), get(iy), get(iz)));
        }
    }
    Ok(out)
}
