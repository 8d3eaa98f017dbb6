//! PLY/OBJ surface files, landmark lists and ground-truth files.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::energy::Landmark;
use crate::evaluation::GroundTruth;
use crate::geometry::{edges_from_faces, estimate_normals, face_normals_average, build_knn_edges, DEFAULT_KNN};
use crate::{Error, Result, Surface, Vec3};

/// Raw contents of a mesh or point-cloud file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MeshData {
    pub points: Vec<Vec3>,
    pub normals: Option<Vec<Vec3>>,
    pub faces: Option<Vec<[usize; 3]>>,
    pub colors: Option<Vec<[u8; 3]>>,
}

impl MeshData {
    pub fn from_surface(surface: &Surface) -> Self {
        MeshData {
            points: surface.points().to_vec(),
            normals: Some(surface.normals().to_vec()),
            faces: surface.faces().map(<[_]>::to_vec),
            colors: None,
        }
    }

    /// Builds a surface: mesh edges and averaged face normals when faces are
    /// present, otherwise k-NN edges and PCA normals. Stored normals win over
    /// estimated ones.
    pub fn into_surface(self, k: usize) -> Result<Surface> {
        match self.faces {
            Some(faces) if !faces.is_empty() => {
                let normals = match self.normals {
                    Some(n) => n,
                    None => face_normals_average(&self.points, &faces)?,
                };
                let edges = edges_from_faces(&faces);
                Surface::new(self.points, normals, edges, Some(faces))
            }
            _ => {
                let edges = build_knn_edges(&self.points, k)?;
                let normals = match self.normals {
                    Some(n) => n,
                    None => estimate_normals(&self.points, k.max(3))?,
                };
                Surface::new(self.points, normals, edges, None)
            }
        }
    }
}

fn extension(path: &Path) -> String {
    path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase()
}

/// Reads a `.ply` or `.obj` file.
pub fn read_mesh(path: &Path) -> Result<MeshData> {
    match extension(path).as_str() {
        "ply" => read_ply(path),
        "obj" => read_obj(path),
        other => Err(Error::parse(path, 0, format!("unsupported extension `{other}` (expected ply or obj)"))),
    }
}

/// Reads a surface with the default neighbor count for point clouds.
pub fn load_surface(path: &Path) -> Result<Surface> {
    read_mesh(path)?.into_surface(DEFAULT_KNN)
}

#[derive(Debug, Clone, Copy, PartialEq)]
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
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar(String, Scalar),
    List(String, Scalar, Scalar),
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Format {
    Ascii,
    BinaryLe,
}

struct Header {
    format: Format,
    elements: Vec<Element>,
    lines: usize,
}

fn read_header(path: &Path, reader: &mut impl BufRead) -> Result<Header> {
    let mut line = String::new();
    let mut next = |line: &mut String, n: &mut usize| -> Result<bool> {
        line.clear();
        *n += 1;
        let read = reader.read_line(line).map_err(|e| Error::io(path, e))?;
        Ok(read > 0)
    };
    let mut n = 0;
    if !next(&mut line, &mut n)? || line.trim() != "ply" {
        return Err(Error::parse(path, 1, "missing `ply` magic"));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        if !next(&mut line, &mut n)? {
            return Err(Error::parse(path, n, "header has no `end_header`"));
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            ["end_header"] => break,
            [] | ["comment", ..] | ["obj_info", ..] => {}
            ["format", "ascii", _] => format = Some(Format::Ascii),
            ["format", "binary_little_endian", _] => format = Some(Format::BinaryLe),
            ["format", other, ..] => return Err(Error::parse(path, n, format!("unsupported format `{other}`"))),
            ["element", name, count] => {
                let count = count.parse().map_err(|_| Error::parse(path, n, format!("bad element count `{count}`")))?;
                elements.push(Element { name: name.to_string(), count, properties: Vec::new() });
            }
            ["property", "list", count_ty, item_ty, name] => {
                let el = elements.last_mut().ok_or_else(|| Error::parse(path, n, "property before element"))?;
                let (c, i) = (Scalar::parse(count_ty), Scalar::parse(item_ty));
                match (c, i) {
                    (Some(c), Some(i)) => el.properties.push(Property::List(name.to_string(), c, i)),
                    _ => return Err(Error::parse(path, n, "unknown list property type")),
                }
            }
            ["property", ty, name] => {
                let el = elements.last_mut().ok_or_else(|| Error::parse(path, n, "property before element"))?;
                let ty = Scalar::parse(ty).ok_or_else(|| Error::parse(path, n, format!("unknown property type `{ty}`")))?;
                el.properties.push(Property::Scalar(name.to_string(), ty));
            }
            _ => return Err(Error::parse(path, n, format!("unexpected header line `{}`", line.trim()))),
        }
    }
    let format = format.ok_or_else(|| Error::parse(path, n, "header has no `format` line"))?;
    Ok(Header { format, elements, lines: n })
}

/// Source of element values, either whitespace-separated text or packed
/// little-endian bytes.
enum Values {
    Ascii { tokens: std::vec::IntoIter<(usize, String)>, line: usize },
    Binary { bytes: Vec<u8>, pos: usize },
}

impl Values {
    fn next(&mut self, path: &Path, ty: Scalar) -> Result<f64> {
        match self {
            Values::Ascii { tokens, line } => {
                let (l, tok) = tokens.next().ok_or_else(|| Error::parse(path, *line, "unexpected end of data"))?;
                *line = l;
                tok.parse::<f64>().map_err(|_| Error::parse(path, l, format!("bad number `{tok}`")))
            }
            Values::Binary { bytes, pos } => {
                let size = ty.size();
                if *pos + size > bytes.len() {
                    return Err(Error::parse(path, 0, "unexpected end of binary data"));
                }
                let v = ty.decode(&bytes[*pos..*pos + size]);
                *pos += size;
                Ok(v)
            }
        }
    }
}

fn to_index(path: &Path, v: f64, len: usize) -> Result<usize> {
    if v < 0.0 || v.fract() != 0.0 || v as usize >= len {
        return Err(Error::parse(path, 0, format!("face index {v} out of range (len {len})")));
    }
    Ok(v as usize)
}

/// Fan triangulation of a polygon.
fn triangulate(poly: &[usize], out: &mut Vec<[usize; 3]>) {
    for k in 1..poly.len().saturating_sub(1) {
        out.push([poly[0], poly[k], poly[k + 1]]);
    }
}

pub fn read_ply(path: &Path) -> Result<MeshData> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let header = read_header(path, &mut reader)?;
    let mut values = match header.format {
        Format::Ascii => {
            let mut text = String::new();
            reader.read_to_string(&mut text).map_err(|e| Error::io(path, e))?;
            let tokens: Vec<(usize, String)> = text
                .lines()
                .enumerate()
                .flat_map(|(i, l)| l.split_whitespace().map(move |t| (header.lines + 1 + i, t.to_string())))
                .collect();
            Values::Ascii { tokens: tokens.into_iter(), line: header.lines }
        }
        Format::BinaryLe => {
            let mut bytes = Vec::new();
            reader.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
            Values::Binary { bytes, pos: 0 }
        }
    };

    let mut data = MeshData::default();
    let mut polygons: Vec<Vec<f64>> = Vec::new();
    for el in &header.elements {
        let names: Vec<&str> = el
            .properties
            .iter()
            .map(|p| match p {
                Property::Scalar(n, _) | Property::List(n, _, _) => n.as_str(),
            })
            .collect();
        let has = |n: &str| names.contains(&n);
        let is_vertex = el.name == "vertex";
        if is_vertex && !(has("x") && has("y") && has("z")) {
            return Err(Error::parse(path, 0, "vertex element lacks x/y/z"));
        }
        let with_normals = is_vertex && has("nx") && has("ny") && has("nz");
        let with_colors = is_vertex && has("red") && has("green") && has("blue");
        let mut normals = Vec::new();
        let mut colors = Vec::new();
        for _ in 0..el.count {
            let mut p = Vec3::zeros();
            let mut nrm = Vec3::zeros();
            let mut rgb = [0u8; 3];
            for prop in &el.properties {
                match prop {
                    Property::Scalar(name, ty) => {
                        let v = values.next(path, *ty)?;
                        match name.as_str() {
                            "x" => p.x = v,
                            "y" => p.y = v,
                            "z" => p.z = v,
                            "nx" => nrm.x = v,
                            "ny" => nrm.y = v,
                            "nz" => nrm.z = v,
                            "red" => rgb[0] = v as u8,
                            "green" => rgb[1] = v as u8,
                            "blue" => rgb[2] = v as u8,
                            _ => {}
                        }
                    }
                    Property::List(name, count_ty, item_ty) => {
                        let count = values.next(path, *count_ty)?;
                        if count < 0.0 || count.fract() != 0.0 {
                            return Err(Error::parse(path, 0, format!("bad list length {count}")));
                        }
                        let items = (0..count as usize)
                            .map(|_| values.next(path, *item_ty))
                            .collect::<Result<Vec<_>>>()?;
                        if el.name == "face" && (name == "vertex_indices" || name == "vertex_index") {
                            polygons.push(items);
                        }
                    }
                }
            }
            if is_vertex {
                data.points.push(p);
                if with_normals {
                    normals.push(nrm);
                }
                if with_colors {
                    colors.push(rgb);
                }
            }
        }
        if with_normals {
            data.normals = Some(normals);
        }
        if with_colors {
            data.colors = Some(colors);
        }
    }
    if header.elements.iter().any(|e| e.name == "face") {
        let mut faces = Vec::new();
        for poly in polygons {
            let idx = poly
                .into_iter()
                .map(|v| to_index(path, v, data.points.len()))
                .collect::<Result<Vec<_>>>()?;
            triangulate(&idx, &mut faces);
        }
        data.faces = Some(faces);
    }
    Ok(data)
}

/// Writes a binary little-endian PLY with double-precision positions and
/// normals, optional per-vertex RGB and faces.
pub fn write_ply(path: &Path, data: &MeshData) -> Result<()> {
    let bytes = ply_bytes(data)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn ply_bytes(data: &MeshData) -> Result<Vec<u8>> {
    let n = data.points.len();
    for (name, len) in [
        ("normals", data.normals.as_ref().map(Vec::len)),
        ("colors", data.colors.as_ref().map(Vec::len)),
    ] {
        if let Some(len) = len {
            if len != n {
                return Err(Error::config(name, format!("length {len} differs from {n} points")));
            }
        }
    }
    let mut out = Vec::new();
    let mut header = format!("ply\nformat binary_little_endian 1.0\nelement vertex {n}\n");
    header.push_str("property double x\nproperty double y\nproperty double z\n");
    if data.normals.is_some() {
        header.push_str("property double nx\nproperty double ny\nproperty double nz\n");
    }
    if data.colors.is_some() {
        header.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    if let Some(f) = &data.faces {
        header.push_str(&format!("element face {}\nproperty list uchar uint vertex_indices\n", f.len()));
    }
    header.push_str("end_header\n");
    out.extend_from_slice(header.as_bytes());
    for i in 0..n {
        for c in data.points[i].iter() {
            out.extend_from_slice(&c.to_le_bytes());
        }
        if let Some(nr) = &data.normals {
            for c in nr[i].iter() {
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
        if let Some(col) = &data.colors {
            out.extend_from_slice(&col[i]);
        }
    }
    if let Some(faces) = &data.faces {
        for f in faces {
            out.push(3);
            for &v in f {
                let v = u32::try_from(v).map_err(|_| Error::IndexOutOfRange { index: v, len: u32::MAX as usize })?;
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Reads `v`, `vn` and `f` records. Per-vertex normals are taken from the
/// face corners when every vertex references a normal.
pub fn read_obj(path: &Path) -> Result<MeshData> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut points = Vec::new();
    let mut file_normals = Vec::new();
    let mut faces = Vec::new();
    let mut vertex_normal: Vec<Option<usize>> = Vec::new();
    let mut saw_faces = false;
    for (lineno, line) in text.lines().enumerate() {
        let n = lineno + 1;
        let line = line.split('#').next().unwrap_or("");
        let mut tokens = line.split_whitespace();
        let Some(tag) = tokens.next() else { continue };
        let rest: Vec<&str> = tokens.collect();
        let floats = |rest: &[&str]| -> Result<Vec3> {
            if rest.len() < 3 {
                return Err(Error::parse(path, n, "expected three coordinates"));
            }
            let mut v = Vec3::zeros();
            for k in 0..3 {
                v[k] = rest[k].parse().map_err(|_| Error::parse(path, n, format!("bad number `{}`", rest[k])))?;
            }
            Ok(v)
        };
        match tag {
            "v" => {
                points.push(floats(&rest)?);
                vertex_normal.push(None);
            }
            "vn" => file_normals.push(floats(&rest)?),
            "f" => {
                saw_faces = true;
                if rest.len() < 3 {
                    return Err(Error::parse(path, n, "face needs at least three vertices"));
                }
                let mut poly = Vec::with_capacity(rest.len());
                for corner in &rest {
                    let mut parts = corner.split('/');
                    let vi = resolve_obj_index(path, n, parts.next().unwrap_or(""), points.len())?;
                    let ni = parts.nth(1).filter(|s| !s.is_empty());
                    if let Some(ni) = ni {
                        let ni = resolve_obj_index(path, n, ni, file_normals.len())?;
                        vertex_normal[vi] = Some(ni);
                    }
                    poly.push(vi);
                }
                triangulate(&poly, &mut faces);
            }
            _ => {}
        }
    }
    let normals = if !file_normals.is_empty() && vertex_normal.iter().all(Option::is_some) {
        Some(vertex_normal.into_iter().map(|i| file_normals[i.unwrap()]).collect())
    } else if !saw_faces && file_normals.len() == points.len() && !points.is_empty() {
        Some(file_normals)
    } else {
        None
    };
    Ok(MeshData { points, normals, faces: saw_faces.then_some(faces), colors: None })
}

fn resolve_obj_index(path: &Path, line: usize, token: &str, len: usize) -> Result<usize> {
    let raw: i64 = token.parse().map_err(|_| Error::parse(path, line, format!("bad index `{token}`")))?;
    let idx = if raw > 0 { raw - 1 } else { len as i64 + raw };
    if raw == 0 || idx < 0 || idx as usize >= len {
        return Err(Error::parse(path, line, format!("index {raw} out of range (len {len})")));
    }
    Ok(idx as usize)
}

/// Parses landmark lines `i j` (target index) or `i x y z` (target
/// coordinates). `#` starts a comment.
pub fn parse_landmarks(path: &Path, text: &str, source_len: usize, target: &Surface) -> Result<Vec<Landmark>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let n = lineno + 1;
        let line = line.split('#').next().unwrap_or("");
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        let index = |t: &str, len: usize| -> Result<usize> {
            let i: usize = t.parse().map_err(|_| Error::parse(path, n, format!("bad index `{t}`")))?;
            if i >= len {
                return Err(Error::parse(path, n, format!("index {i} out of range (len {len})")));
            }
            Ok(i)
        };
        let source = index(tokens[0], source_len)?;
        let target = match tokens.len() {
            2 => target.point(index(tokens[1], target.len())?),
            4 => {
                let mut p = Vec3::zeros();
                for k in 0..3 {
                    p[k] = tokens[k + 1]
                        .parse()
                        .map_err(|_| Error::parse(path, n, format!("bad coordinate `{}`", tokens[k + 1])))?;
                }
                p
            }
            _ => return Err(Error::parse(path, n, "expected `source target` or `source x y z`")),
        };
        out.push(Landmark { source, target });
    }
    Ok(out)
}

pub fn load_landmarks(path: &Path, source_len: usize, target: &Surface) -> Result<Vec<Landmark>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_landmarks(path, &text, source_len, target)
}

/// Parses `i j` correspondence pairs.
pub fn parse_correspondences(path: &Path, text: &str) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let n = lineno + 1;
        let line = line.split('#').next().unwrap_or("");
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            [] => {}
            [a, b] => {
                let parse = |t: &str| t.parse::<usize>().map_err(|_| Error::parse(path, n, format!("bad index `{t}`")));
                out.push((parse(a)?, parse(b)?));
            }
            _ => return Err(Error::parse(path, n, "expected `source target`")),
        }
    }
    Ok(out)
}

/// Adds one ground-truth file to `truth`: a mesh file supplies deformed
/// source positions, any other file `i j` correspondence pairs.
pub fn load_ground_truth_into(path: &Path, truth: &mut GroundTruth) -> Result<()> {
    match extension(path).as_str() {
        "ply" | "obj" => truth.positions = Some(read_mesh(path)?.points),
        _ => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            truth.correspondences = Some(parse_correspondences(path, &text)?);
        }
    }
    Ok(())
}

/// Writes `header` and `rows` as a newline-terminated CSV file.
pub fn write_csv(path: &Path, header: &str, rows: impl IntoIterator<Item = String>) -> Result<()> {
    let mut file = std::io::BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    writeln!(file, "{header}").map_err(|e| Error::io(path, e))?;
    for row in rows {
        writeln!(file, "{row}").map_err(|e| Error::io(path, e))?;
    }
    file.flush().map_err(|e| Error::io(path, e))
}
