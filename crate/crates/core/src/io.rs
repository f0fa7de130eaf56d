//! PLY and OBJ readers and writers for point clouds and triangle meshes.
//!
//! The PLY reader understands ASCII and both binary byte orders, any scalar
//! property type, and skips properties and elements it does not use. Vertex
//! properties `x y z` are required, `nx ny nz` are optional, and a `face`
//! element with a `vertex_indices` (or `vertex_index`) list is read as
//! polygons and fan-triangulated. Clouds are written with `double`
//! properties so nothing is lost on a round trip.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::geometry::{OrientedPointCloud, TriangleMesh, UNIT_TOLERANCE};
use crate::{Error, Result, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PlyEncoding {
    Ascii,
    #[default]
    BinaryLittleEndian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Ascii,
    Little,
    Big,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
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
    fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            other => return Err(Error::Format(format!("PLY: unknown property type '{other}'"))),
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
}

#[derive(Debug, Clone)]
enum Property {
    Scalar { name: String, kind: Scalar },
    List { name: String, count: Scalar, item: Scalar },
}

impl Property {
    fn name(&self) -> &str {
        match self {
            Property::Scalar { name, .. } | Property::List { name, .. } => name,
        }
    }
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

/// Sequential reader over the PLY body.
struct Body<'a> {
    format: Format,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Body<'a> {
    fn token(&mut self) -> Result<&'a str> {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Truncated("PLY body".into()));
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).map_err(|_| Error::Format("PLY: non-UTF-8 token".into()))
    }

    fn read(&mut self, kind: Scalar) -> Result<f64> {
        if self.format == Format::Ascii {
            let tok = self.token()?;
            return tok
                .parse::<f64>()
                .map_err(|_| Error::Format(format!("PLY: cannot parse '{tok}' as a number")));
        }
        let n = kind.size();
        let Some(raw) = self.bytes.get(self.pos..self.pos + n) else {
            return Err(Error::Truncated("PLY body".into()));
        };
        self.pos += n;
        let mut buf = [0u8; 8];
        buf[..n].copy_from_slice(raw);
        if self.format == Format::Big {
            buf[..n].reverse();
        }
        Ok(match kind {
            Scalar::I8 => buf[0] as i8 as f64,
            Scalar::U8 => buf[0] as f64,
            Scalar::I16 => i16::from_le_bytes([buf[0], buf[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([buf[0], buf[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(buf[..4].try_into().expect("4 bytes")) as f64,
            Scalar::U32 => u32::from_le_bytes(buf[..4].try_into().expect("4 bytes")) as f64,
            Scalar::F32 => f32::from_le_bytes(buf[..4].try_into().expect("4 bytes")) as f64,
            Scalar::F64 => f64::from_le_bytes(buf),
        })
    }

    fn read_count(&mut self, kind: Scalar) -> Result<usize> {
        let v = self.read(kind)?;
        if !(v >= 0.0 && v.fract() == 0.0) {
            return Err(Error::Format(format!("PLY: invalid list length {v}")));
        }
        Ok(v as usize)
    }
}

/// Raw contents of a PLY file.
#[derive(Debug, Clone, Default)]
pub struct PlyData {
    pub vertices: Vec<Vec3>,
    pub normals: Option<Vec<Vec3>>,
    /// Polygons as read, before triangulation.
    pub faces: Vec<Vec<u32>>,
}

fn parse_header(bytes: &[u8]) -> Result<(Format, Vec<Element>, usize)> {
    const END: &[u8] = b"end_header";
    let end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| Error::Format("PLY: missing end_header".into()))?;
    let mut body_start = end + END.len();
    // the header ends at the first newline after end_header
    while body_start < bytes.len() && bytes[body_start] != b'\n' {
        body_start += 1;
    }
    body_start = (body_start + 1).min(bytes.len());
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| Error::Format("PLY: non-UTF-8 header".into()))?;
    let mut lines = header.lines().map(str::trim);
    if lines.next() != Some("ply") {
        return Err(Error::Format("PLY: missing 'ply' magic line".into()));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    for line in lines {
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            [] | ["comment", ..] | ["obj_info", ..] => {}
            ["format", kind, _version] => {
                format = Some(match *kind {
                    "ascii" => Format::Ascii,
                    "binary_little_endian" => Format::Little,
                    "binary_big_endian" => Format::Big,
                    other => return Err(Error::Format(format!("PLY: unknown format '{other}'"))),
                });
            }
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|_| Error::Format(format!("PLY: bad element count '{count}'")))?,
                properties: Vec::new(),
            }),
            ["property", "list", count, item, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::Format("PLY: property before element".into()))?;
                el.properties.push(Property::List {
                    name: name.to_string(),
                    count: Scalar::parse(count)?,
                    item: Scalar::parse(item)?,
                });
            }
            ["property", kind, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::Format("PLY: property before element".into()))?;
                el.properties.push(Property::Scalar { name: name.to_string(), kind: Scalar::parse(kind)? });
            }
            _ => return Err(Error::Format(format!("PLY: unrecognized header line '{line}'"))),
        }
    }
    let format = format.ok_or_else(|| Error::Format("PLY: missing format line".into()))?;
    Ok((format, elements, body_start))
}

pub fn parse_ply(bytes: &[u8]) -> Result<PlyData> {
    let (format, elements, body_start) = parse_header(bytes)?;
    let mut body = Body { format, bytes: &bytes[body_start..], pos: 0 };
    let mut data = PlyData::default();
    let mut saw_vertex = false;
    for el in &elements {
        match el.name.as_str() {
            "vertex" => {
                saw_vertex = true;
                read_vertices(&mut body, el, &mut data)?;
            }
            "face" => read_faces(&mut body, el, &mut data)?,
            _ => skip_element(&mut body, el)?,
        }
    }
    if !saw_vertex {
        return Err(Error::Format("PLY: no vertex element".into()));
    }
    let nv = data.vertices.len();
    if let Some(bad) = data.faces.iter().flatten().find(|&&i| i as usize >= nv) {
        return Err(Error::Format(format!("PLY: face index {bad} out of range for {nv} vertices")));
    }
    Ok(data)
}

fn read_vertices(body: &mut Body, el: &Element, data: &mut PlyData) -> Result<()> {
    let find = |n: &str| el.properties.iter().position(|p| p.name() == n);
    let pos_idx = ["x", "y", "z"].map(find);
    let [Some(ix), Some(iy), Some(iz)] = pos_idx else {
        return Err(Error::Format("PLY: vertex element lacks x, y, z".into()));
    };
    let normal_idx = match ["nx", "ny", "nz"].map(find) {
        [Some(a), Some(b), Some(c)] => Some([a, b, c]),
        [None, None, None] => None,
        _ => return Err(Error::Format("PLY: incomplete normal properties".into())),
    };
    let mut values = vec![0.0; el.properties.len()];
    let mut normals = Vec::new();
    data.vertices.reserve(el.count);
    for _ in 0..el.count {
        for (slot, prop) in values.iter_mut().zip(&el.properties) {
            *slot = match prop {
                Property::Scalar { kind, .. } => body.read(*kind)?,
                Property::List { count, item, .. } => {
                    let n = body.read_count(*count)?;
                    for _ in 0..n {
                        body.read(*item)?;
                    }
                    0.0
                }
            };
        }
        data.vertices.push(Vec3::new(values[ix], values[iy], values[iz]));
        if let Some([a, b, c]) = normal_idx {
            normals.push(Vec3::new(values[a], values[b], values[c]));
        }
    }
    if normal_idx.is_some() {
        data.normals = Some(normals);
    }
    Ok(())
}

fn read_faces(body: &mut Body, el: &Element, data: &mut PlyData) -> Result<()> {
    let list = el
        .properties
        .iter()
        .position(|p| matches!(p, Property::List { name, .. } if name == "vertex_indices" || name == "vertex_index"))
        .ok_or_else(|| Error::Format("PLY: face element lacks vertex_indices".into()))?;
    data.faces.reserve(el.count);
    for _ in 0..el.count {
        for (k, prop) in el.properties.iter().enumerate() {
            match prop {
                Property::Scalar { kind, .. } => {
                    body.read(*kind)?;
                }
                Property::List { count, item, .. } => {
                    let n = body.read_count(*count)?;
                    let mut poly = Vec::with_capacity(n);
                    for _ in 0..n {
                        let v = body.read(*item)?;
                        if !(v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64) {
                            return Err(Error::Format(format!("PLY: invalid face index {v}")));
                        }
                        poly.push(v as u32);
                    }
                    if k == list {
                        data.faces.push(poly);
                    }
                }
            }
        }
    }
    Ok(())
}

fn skip_element(body: &mut Body, el: &Element) -> Result<()> {
    for _ in 0..el.count {
        for prop in &el.properties {
            match prop {
                Property::Scalar { kind, .. } => {
                    body.read(*kind)?;
                }
                Property::List { count, item, .. } => {
                    let n = body.read_count(*count)?;
                    for _ in 0..n {
                        body.read(*item)?;
                    }
                }
            }
        }
    }
    Ok(())
}

fn triangulate(polygons: &[Vec<u32>]) -> Vec<[u32; 3]> {
    polygons
        .iter()
        .filter(|p| p.len() >= 3)
        .flat_map(|p| (1..p.len() - 1).map(move |i| [p[0], p[i], p[i + 1]]))
        .collect()
}

fn cloud_from_parts(points: Vec<Vec3>, normals: Option<Vec<Vec3>>) -> Result<OrientedPointCloud> {
    match normals {
        // keep unit normals bit-exact; files written in single precision are
        // only unit length to ~1e-7 and get renormalized
        Some(n) if n.iter().all(|v| (v.norm() - 1.0).abs() <= UNIT_TOLERANCE) => {
            OrientedPointCloud::new(points, Some(n))
        }
        Some(n) => OrientedPointCloud::with_normalized_normals(points, n),
        None => Ok(OrientedPointCloud::unoriented(points)),
    }
}

pub fn cloud_from_ply_bytes(bytes: &[u8]) -> Result<OrientedPointCloud> {
    let data = parse_ply(bytes)?;
    cloud_from_parts(data.vertices, data.normals)
}

pub fn mesh_from_ply_bytes(bytes: &[u8]) -> Result<TriangleMesh> {
    let data = parse_ply(bytes)?;
    TriangleMesh::new(data.vertices, triangulate(&data.faces))
}

pub fn read_cloud_ply(path: impl AsRef<Path>) -> Result<OrientedPointCloud> {
    cloud_from_ply_bytes(&fs::read(path)?)
}

pub fn read_mesh_ply(path: impl AsRef<Path>) -> Result<TriangleMesh> {
    mesh_from_ply_bytes(&fs::read(path)?)
}

fn ply_header(encoding: PlyEncoding, vertex_count: usize, normals: bool, faces: Option<usize>) -> String {
    let format = match encoding {
        PlyEncoding::Ascii => "ascii",
        PlyEncoding::BinaryLittleEndian => "binary_little_endian",
    };
    let mut h = format!("ply\nformat {format} 1.0\nelement vertex {vertex_count}\n");
    h.push_str("property double x\nproperty double y\nproperty double z\n");
    if normals {
        h.push_str("property double nx\nproperty double ny\nproperty double nz\n");
    }
    if let Some(n) = faces {
        h.push_str(&format!("element face {n}\nproperty list uchar uint vertex_indices\n"));
    }
    h.push_str("end_header\n");
    h
}

fn push_vertex_rows(out: &mut Vec<u8>, encoding: PlyEncoding, points: &[Vec3], normals: Option<&[Vec3]>) {
    for (i, p) in points.iter().enumerate() {
        let n = normals.map(|n| n[i]);
        match encoding {
            PlyEncoding::Ascii => {
                // `{:?}` prints the shortest representation that round-trips
                let mut line = format!("{:?} {:?} {:?}", p.x, p.y, p.z);
                if let Some(n) = n {
                    line.push_str(&format!(" {:?} {:?} {:?}", n.x, n.y, n.z));
                }
                line.push('\n');
                out.extend_from_slice(line.as_bytes());
            }
            PlyEncoding::BinaryLittleEndian => {
                for v in p.iter().chain(n.iter().flat_map(|n| n.iter())) {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
}

pub fn cloud_to_ply_bytes(cloud: &OrientedPointCloud, encoding: PlyEncoding) -> Vec<u8> {
    let mut out = ply_header(encoding, cloud.len(), cloud.has_normals(), None).into_bytes();
    push_vertex_rows(&mut out, encoding, cloud.points(), cloud.normals());
    out
}

pub fn mesh_to_ply_bytes(mesh: &TriangleMesh, encoding: PlyEncoding) -> Vec<u8> {
    let mut out = ply_header(encoding, mesh.vertices().len(), false, Some(mesh.faces().len())).into_bytes();
    push_vertex_rows(&mut out, encoding, mesh.vertices(), None);
    for f in mesh.faces() {
        match encoding {
            PlyEncoding::Ascii => out.extend_from_slice(format!("3 {} {} {}\n", f[0], f[1], f[2]).as_bytes()),
            PlyEncoding::BinaryLittleEndian => {
                out.push(3);
                for i in f {
                    out.extend_from_slice(&i.to_le_bytes());
                }
            }
        }
    }
    out
}

pub fn write_cloud_ply(path: impl AsRef<Path>, cloud: &OrientedPointCloud, encoding: PlyEncoding) -> Result<()> {
    fs::write(path, cloud_to_ply_bytes(cloud, encoding))?;
    Ok(())
}

pub fn write_mesh_ply(path: impl AsRef<Path>, mesh: &TriangleMesh, encoding: PlyEncoding) -> Result<()> {
    fs::write(path, mesh_to_ply_bytes(mesh, encoding))?;
    Ok(())
}

/// Wavefront OBJ with `v` and `f` records (1-based indices).
pub fn mesh_to_obj_string(mesh: &TriangleMesh) -> String {
    let mut s = String::with_capacity(mesh.vertices().len() * 48 + mesh.faces().len() * 24);
    for v in mesh.vertices() {
        s.push_str(&format!("v {:?} {:?} {:?}\n", v.x, v.y, v.z));
    }
    for f in mesh.faces() {
        s.push_str(&format!("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1));
    }
    s
}

pub fn write_mesh_obj(path: impl AsRef<Path>, mesh: &TriangleMesh) -> Result<()> {
    let mut file = fs::File::create(path)?;
    file.write_all(mesh_to_obj_string(mesh).as_bytes())?;
    Ok(())
}

/// Reads `v` and `f` records; texture/normal indices (`f 1/2/3`) and
/// negative (relative) indices are accepted, everything else is ignored.
pub fn mesh_from_obj_str(text: &str) -> Result<TriangleMesh> {
    let mut vertices = Vec::new();
    let mut polygons = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let bad = |what: &str| Error::Format(format!("OBJ line {}: {what}", lineno + 1));
        match parts.next() {
            Some("v") => {
                let mut c = [0.0; 3];
                for slot in &mut c {
                    *slot = parts
                        .next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| bad("bad vertex"))?;
                }
                vertices.push(Vec3::from(c));
            }
            Some("f") => {
                let mut poly = Vec::new();
                for tok in parts {
                    let idx: i64 = tok
                        .split('/')
                        .next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| bad("bad face index"))?;
                    let resolved = if idx < 0 { vertices.len() as i64 + idx } else { idx - 1 };
                    if resolved < 0 || resolved as usize >= vertices.len() {
                        return Err(bad("face index out of range"));
                    }
                    poly.push(resolved as u32);
                }
                polygons.push(poly);
            }
            _ => {}
        }
    }
    TriangleMesh::new(vertices, triangulate(&polygons))
}

pub fn read_mesh_obj(path: impl AsRef<Path>) -> Result<TriangleMesh> {
    mesh_from_obj_str(&fs::read_to_string(path)?)
}

/// Reads a mesh, choosing the format from the file extension.
pub fn read_mesh(path: impl AsRef<Path>) -> Result<TriangleMesh> {
    let path = path.as_ref();
    match extension(path).as_deref() {
        Some("obj") => read_mesh_obj(path),
        Some("ply") => read_mesh_ply(path),
        _ => Err(Error::InvalidInput(format!("{}: expected a .ply or .obj mesh", path.display()))),
    }
}

/// Writes a mesh, choosing the format from the file extension.
pub fn write_mesh(path: impl AsRef<Path>, mesh: &TriangleMesh) -> Result<()> {
    let path = path.as_ref();
    match extension(path).as_deref() {
        Some("obj") => write_mesh_obj(path, mesh),
        Some("ply") => write_mesh_ply(path, mesh, PlyEncoding::BinaryLittleEndian),
        _ => Err(Error::InvalidInput(format!("{}: expected a .ply or .obj mesh", path.display()))),
    }
}

fn extension(path: &Path) -> Option<String> {
    path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase)
}
