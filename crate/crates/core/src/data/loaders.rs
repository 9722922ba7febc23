//! XYZ text, OFF meshes, ASCII PLY and dataset manifests.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use super::{Label, LabeledCloud};
use crate::error::{bail, Error, Result};
use crate::geometry::{normalize_coords, sub, Point3, PointSet};
use crate::tensor::{Float, Tensor};

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Role {
    X,
    Y,
    Z,
    Label,
    Feature,
    Skip,
}

fn parse_schema(cols: &str) -> Result<Vec<Role>> {
    let roles: Vec<Role> = cols
        .split_whitespace()
        .map(|c| match c {
            "x" => Role::X,
            "y" => Role::Y,
            "z" => Role::Z,
            "label" => Role::Label,
            "_" | "skip" => Role::Skip,
            _ => Role::Feature,
        })
        .collect();
    for r in [Role::X, Role::Y, Role::Z] {
        if roles.iter().filter(|&&q| q == r).count() != 1 {
            bail!(
                Input,
                "schema `{cols}` must name each of x, y, z exactly once"
            );
        }
    }
    if roles.iter().filter(|&&q| q == Role::Label).count() > 1 {
        bail!(Input, "schema `{cols}` names more than one label column");
    }
    Ok(roles)
}

/// Whitespace-separated rows. Column roles come from `schema` if given,
/// else from a `#cols: x y z r g b label` line, else the file must have
/// exactly three columns. Columns other than `x`, `y`, `z`, `label`, `_`
/// become feature channels in order. With a label column the cloud carries
/// per-point labels; otherwise its label is class 0.
pub fn load_xyz(path: &Path, schema: Option<&str>) -> Result<LabeledCloud> {
    let text = read(path)?;
    let mut roles = schema.map(parse_schema).transpose()?;
    let mut coords = Vec::new();
    let mut feats: Vec<Float> = Vec::new();
    let mut labels = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let ln = ln + 1;
        let t = line.trim();
        if let Some(rest) = t.strip_prefix("#cols:") {
            if roles.is_none() {
                roles = Some(parse_schema(rest)?);
            }
            continue;
        }
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = t
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>()
                    .map_err(|_| parse_err(path, ln, format!("non-numeric token `{tok}`")))
            })
            .collect::<Result<_>>()?;
        let roles = roles.get_or_insert_with(|| vec![Role::X, Role::Y, Role::Z]);
        if vals.len() != roles.len() {
            return Err(parse_err(
                path,
                ln,
                format!("{} columns, expected {}", vals.len(), roles.len()),
            ));
        }
        let mut p = [0.0; 3];
        for (&r, &v) in roles.iter().zip(&vals) {
            match r {
                Role::X => p[0] = v,
                Role::Y => p[1] = v,
                Role::Z => p[2] = v,
                Role::Feature => feats.push(v as Float),
                Role::Label => {
                    if v < 0.0 || v.fract() != 0.0 {
                        return Err(parse_err(
                            path,
                            ln,
                            format!("label {v} is not a nonnegative integer"),
                        ));
                    }
                    labels.push(v as usize)
                }
                Role::Skip => {}
            }
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(path, ln, "non-finite coordinate"));
        }
        coords.push(p);
    }
    let n = coords.len();
    let c = feats.len().checked_div(n).unwrap_or(0);
    let cloud = PointSet::new(coords, Tensor::new(vec![n, c], feats)?)?;
    let has_label = roles.is_some_and(|r| r.contains(&Role::Label));
    let label = if has_label {
        Label::Parts(labels)
    } else {
        Label::Class(0)
    };
    LabeledCloud::new(cloud, label, 0)
}

struct Tokens<'a> {
    lines: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
    pending: Vec<&'a str>,
    line: usize,
}

impl<'a> Tokens<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            lines: text.lines().enumerate().peekable(),
            pending: Vec::new(),
            line: 0,
        }
    }

    /// Next non-comment line's tokens.
    fn next_line(&mut self) -> Option<Vec<&'a str>> {
        if !self.pending.is_empty() {
            return Some(std::mem::take(&mut self.pending));
        }
        for (i, l) in self.lines.by_ref() {
            let l = l.split('#').next().unwrap_or("").trim();
            if !l.is_empty() {
                self.line = i + 1;
                return Some(l.split_whitespace().collect());
            }
        }
        None
    }
}

/// Triangle soup of an OFF mesh; polygons are fan-triangulated.
fn parse_off(path: &Path, text: &str) -> Result<(Vec<Point3>, Vec<[usize; 3]>)> {
    let mut tk = Tokens::new(text);
    let Some(first) = tk.next_line() else {
        return Err(parse_err(path, 1, "empty file"));
    };
    let Some(rest) = first[0].strip_prefix("OFF") else {
        return Err(parse_err(path, tk.line, "missing OFF header"));
    };
    // Some exporters glue the counts onto the header (`OFF12 20 0`).
    let mut counts: Vec<&str> = Vec::new();
    if !rest.is_empty() {
        counts.push(rest);
    }
    counts.extend(&first[1..]);
    if counts.is_empty() {
        counts = tk
            .next_line()
            .ok_or_else(|| parse_err(path, tk.line, "missing counts"))?;
    }
    let num = |s: &str, line: usize| -> Result<usize> {
        s.parse()
            .map_err(|_| parse_err(path, line, format!("bad count `{s}`")))
    };
    if counts.len() < 2 {
        return Err(parse_err(path, tk.line, "expected vertex and face counts"));
    }
    let (nv, nf) = (num(counts[0], tk.line)?, num(counts[1], tk.line)?);
    let mut verts = Vec::with_capacity(nv);
    for _ in 0..nv {
        let t = tk
            .next_line()
            .ok_or_else(|| parse_err(path, tk.line, "missing vertices"))?;
        if t.len() < 3 {
            return Err(parse_err(path, tk.line, "vertex needs three coordinates"));
        }
        let mut p = [0.0; 3];
        for (k, v) in p.iter_mut().enumerate() {
            *v = t[k]
                .parse()
                .map_err(|_| parse_err(path, tk.line, format!("non-numeric token `{}`", t[k])))?;
        }
        verts.push(p);
    }
    let mut tris = Vec::with_capacity(nf);
    for _ in 0..nf {
        let t = tk
            .next_line()
            .ok_or_else(|| parse_err(path, tk.line, "missing faces"))?;
        let k = num(t[0], tk.line)?;
        if k < 3 || t.len() < k + 1 {
            return Err(parse_err(
                path,
                tk.line,
                "face needs at least three indices",
            ));
        }
        let idx = t[1..=k]
            .iter()
            .map(|s| {
                let i = num(s, tk.line)?;
                if i >= nv {
                    return Err(parse_err(
                        path,
                        tk.line,
                        format!("vertex index {i} out of range for {nv} vertices"),
                    ));
                }
                Ok(i)
            })
            .collect::<Result<Vec<_>>>()?;
        for j in 1..k - 1 {
            tris.push([idx[0], idx[j], idx[j + 1]]);
        }
    }
    Ok((verts, tris))
}

fn triangle_area(a: Point3, b: Point3, c: Point3) -> f64 {
    let (u, v) = (sub(b, a), sub(c, a));
    let x = [
        u[1] * v[2] - u[2] * v[1],
        u[2] * v[0] - u[0] * v[2],
        u[0] * v[1] - u[1] * v[0],
    ];
    0.5 * (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt()
}

/// Area-weighted uniform surface samples of the mesh, without
/// normalization. Zero-area faces are skipped.
pub fn sample_mesh(
    verts: &[Point3],
    tris: &[[usize; 3]],
    samples: usize,
    seed: u64,
) -> Result<Vec<Point3>> {
    let mut cum = Vec::with_capacity(tris.len());
    let mut kept = Vec::with_capacity(tris.len());
    let mut total = 0.0;
    for (f, t) in tris.iter().enumerate() {
        let a = triangle_area(verts[t[0]], verts[t[1]], verts[t[2]]);
        if !(a > 0.0) {
            log::warn!("skipping zero-area face {f}");
            continue;
        }
        total += a;
        cum.push(total);
        kept.push(*t);
    }
    if kept.is_empty() {
        bail!(Input, "mesh has no face with positive area");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..samples)
        .map(|_| {
            let r = rng.random::<f64>() * total;
            let f = cum.partition_point(|&c| c <= r).min(kept.len() - 1);
            let [a, b, c] = kept[f].map(|i| verts[i]);
            let (r1, r2) = (rng.random::<f64>().sqrt(), rng.random::<f64>());
            let (wa, wb, wc) = (1.0 - r1, r1 * (1.0 - r2), r1 * r2);
            [0, 1, 2].map(|k| wa * a[k] + wb * b[k] + wc * c[k])
        })
        .collect())
}

/// Samples `samples` surface points of an OFF mesh and normalizes them
/// into the unit ball.
pub fn load_off(path: &Path, samples: usize, seed: u64) -> Result<PointSet> {
    let text = read(path)?;
    let (verts, tris) = parse_off(path, &text)?;
    let pts = sample_mesh(&verts, &tris, samples, seed)?;
    PointSet::from_coords(normalize_coords(&pts))
}

/// ASCII PLY vertices with `x`, `y`, `z` and optional `red`, `green`,
/// `blue` (8-bit colors are scaled to `[0, 1]`).
pub fn load_ply(path: &Path) -> Result<PointSet> {
    let text = read(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(parse_err(path, 1, "missing ply header")),
    }
    let mut vertex_count = None;
    let mut props: Vec<(String, String)> = Vec::new();
    let mut in_vertex = false;
    let mut header_end = None;
    for (i, l) in lines.by_ref() {
        let t: Vec<&str> = l.split_whitespace().collect();
        match t.as_slice() {
            ["format", fmt, ..] if *fmt != "ascii" => {
                return Err(parse_err(
                    path,
                    i + 1,
                    format!("unsupported format `{fmt}`"),
                ))
            }
            ["element", name, n] => {
                in_vertex = *name == "vertex";
                if in_vertex {
                    vertex_count = Some(
                        n.parse::<usize>()
                            .map_err(|_| parse_err(path, i + 1, "bad vertex count"))?,
                    );
                }
            }
            ["property", ty, name] if in_vertex => props.push((ty.to_string(), name.to_string())),
            ["end_header"] => {
                header_end = Some(i + 1);
                break;
            }
            _ => {}
        }
    }
    let (Some(n), Some(_)) = (vertex_count, header_end) else {
        return Err(parse_err(path, 1, "incomplete header"));
    };
    let col = |name: &str| props.iter().position(|(_, p)| p == name);
    let (Some(xi), Some(yi), Some(zi)) = (col("x"), col("y"), col("z")) else {
        return Err(parse_err(path, 1, "vertex element lacks x/y/z"));
    };
    let rgb: Vec<usize> = ["red", "green", "blue"]
        .iter()
        .filter_map(|c| col(c))
        .collect();
    let rgb = if rgb.len() == 3 { rgb } else { Vec::new() };
    let mut coords = Vec::with_capacity(n);
    let mut feats = Vec::with_capacity(n * rgb.len());
    for _ in 0..n {
        let Some((i, l)) = lines.next() else {
            return Err(parse_err(
                path,
                text.lines().count(),
                "fewer vertices than declared",
            ));
        };
        let vals: Vec<f64> = l
            .split_whitespace()
            .map(|t| {
                t.parse()
                    .map_err(|_| parse_err(path, i + 1, format!("non-numeric token `{t}`")))
            })
            .collect::<Result<_>>()?;
        if vals.len() != props.len() {
            return Err(parse_err(
                path,
                i + 1,
                format!("{} values for {} properties", vals.len(), props.len()),
            ));
        }
        coords.push([vals[xi], vals[yi], vals[zi]]);
        for &c in &rgb {
            let scale = if props[c].0 == "uchar" || props[c].0 == "uint8" {
                255.0
            } else {
                1.0
            };
            feats.push((vals[c] / scale) as Float);
        }
    }
    let c = rgb.len();
    PointSet::new(coords, Tensor::new(vec![n, c], feats)?)
}

#[derive(Clone, Debug, PartialEq, Eq, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    /// Resolved against the manifest's directory.
    pub path: PathBuf,
    pub split: String,
    pub label: String,
}

/// Reads a `name,path,split,label` CSV.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = read(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = rdr
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["name", "path", "split", "label"] {
        return Err(parse_err(path, 1, "header must be `name,path,split,label`"));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.deserialize::<ManifestEntry>().enumerate() {
        let mut e = rec.map_err(|e| parse_err(path, i + 2, e.to_string()))?;
        if e.path.is_relative() {
            e.path = base.join(&e.path);
        }
        out.push(e);
    }
    Ok(out)
}
