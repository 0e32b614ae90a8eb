//! ASCII PLY reading and writing for `vertex` elements with `x y z` properties
//! and optional feature columns `f_0, f_1, ...`.

use std::io::{BufRead, Write};

use super::PointCloud;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Matrix;

/// Storage type declared for the coordinate properties.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PlyPrecision {
    /// `property float`: values rounded to 32-bit floats.
    #[default]
    Float32,
    /// `property double`: lossless for `f64` clouds.
    Float64,
}

pub fn write_ply<T: Real, W: Write>(cloud: &PointCloud<T>, precision: PlyPrecision, mut w: W) -> std::io::Result<()> {
    let ty = match precision {
        PlyPrecision::Float32 => "float",
        PlyPrecision::Float64 => "double",
    };
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    writeln!(w, "element vertex {}", cloud.len())?;
    for axis in ["x", "y", "z"] {
        writeln!(w, "property {ty} {axis}")?;
    }
    let width = cloud.features().map_or(0, |f| f.cols());
    for k in 0..width {
        writeln!(w, "property {ty} f_{k}")?;
    }
    writeln!(w, "end_header")?;
    let mut line = String::new();
    for (i, p) in cloud.points().iter().enumerate() {
        line.clear();
        let feats = cloud.features().map_or(&[][..], |f| f.row(i));
        for (k, v) in p.iter().chain(feats).enumerate() {
            if k > 0 {
                line.push(' ');
            }
            match precision {
                PlyPrecision::Float32 => line.push_str(&(v.as_f64() as f32).to_string()),
                PlyPrecision::Float64 => line.push_str(&v.as_f64().to_string()),
            }
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

struct Element {
    name: String,
    count: usize,
    /// Property names, each flagged when declared as 32-bit float.
    properties: Vec<(String, bool)>,
}

/// Reads the `vertex` element of an ASCII PLY file. Columns `f_0 .. f_{k-1}`
/// become the feature matrix when all of them are present; other properties
/// and elements are skipped.
pub fn read_ply<T: Real, R: BufRead>(r: R) -> Result<PointCloud<T>> {
    let err = |m: String| Error::parse("ply", m);
    let mut lines = r.lines();
    let mut next_line = || -> Result<Option<String>> {
        lines
            .next()
            .transpose()
            .map_err(|e| Error::parse("ply", e.to_string()))
    };

    if next_line()?.as_deref().map(str::trim) != Some("ply") {
        return Err(err("missing 'ply' magic".into()));
    }
    let mut elements: Vec<Element> = Vec::new();
    let mut format_seen = false;
    loop {
        let line = next_line()?.ok_or_else(|| err("unexpected end of header".into()))?;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", _] => format_seen = true,
            ["format", other, ..] => return Err(err(format!("unsupported format '{other}' (only ascii)"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| err(format!("bad element count '{count}'")))?,
                properties: Vec::new(),
            }),
            ["property", "list", _, _, name] | ["property", _, name] => {
                let single = matches!(tokens[1], "float" | "float32");
                let el = elements
                    .last_mut()
                    .ok_or_else(|| err("property before any element".into()))?;
                el.properties.push((name.to_string(), single));
            }
            _ => return Err(err(format!("unrecognized header line '{line}'"))),
        }
    }
    if !format_seen {
        return Err(err("missing format line".into()));
    }

    let mut points = None;
    for el in &elements {
        if el.name != "vertex" {
            for _ in 0..el.count {
                next_line()?.ok_or_else(|| err(format!("truncated '{}' element", el.name)))?;
            }
            continue;
        }
        let col = |axis: &str| {
            el.properties
                .iter()
                .position(|(p, _)| p == axis)
                .ok_or_else(|| err(format!("vertex element lacks '{axis}'")))
        };
        let (ix, iy, iz) = (col("x")?, col("y")?, col("z")?);
        let mut feature_cols = Vec::new();
        while let Some(i) = el.properties.iter().position(|(p, _)| *p == format!("f_{}", feature_cols.len())) {
            feature_cols.push(i);
        }
        let mut feats = Vec::with_capacity(el.count * feature_cols.len());
        let mut pts = Vec::with_capacity(el.count);
        for k in 0..el.count {
            let line = next_line()?.ok_or_else(|| err(format!("expected {} vertices, found {k}", el.count)))?;
            let vals: Vec<&str> = line.split_whitespace().collect();
            let get = |i: usize| -> Result<T> {
                let single = el.properties[i].1;
                vals.get(i)
                    .and_then(|s| {
                        if single {
                            s.parse::<f32>().ok().map(f64::from)
                        } else {
                            s.parse::<f64>().ok()
                        }
                    })
                    .map(T::lit)
                    .ok_or_else(|| err(format!("vertex {k}: bad value in column {i}")))
            };
            pts.push([get(ix)?, get(iy)?, get(iz)?]);
            for &i in &feature_cols {
                feats.push(get(i)?);
            }
        }
        let width = feature_cols.len();
        points = Some((pts, (width > 0).then(|| Matrix::from_vec(el.count, width, feats))));
        break;
    }
    let (points, feats) = points.ok_or_else(|| err("no vertex element".into()))?;
    match feats {
        Some(f) => PointCloud::with_features(points, f?),
        None => PointCloud::new(points),
    }
}
