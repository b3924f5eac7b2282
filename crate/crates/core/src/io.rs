//! Mesh files, dataset manifests, run configuration, color maps and image
//! and table writers.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::P3;
use crate::mesh::{InletRule, TriMeshFrame};
use crate::parameterize::SurfaceLabel;
use crate::synth::TubeSpec;
use crate::temporal::ClipEnd;

// ---------------------------------------------------------------------------
// Mesh files

/// Reads an indexed triangle mesh; the format follows the extension (`obj`
/// or `ply`, ASCII or binary).
pub fn read_mesh(path: &Path) -> Result<TriMeshFrame> {
    match extension(path).as_str() {
        "obj" => read_obj(path),
        "ply" => read_ply(path),
        other => Err(Error::parse(path, format!("unsupported mesh format `{other}`"))),
    }
}

/// Writes OBJ or binary PLY depending on the extension.
pub fn write_mesh(path: &Path, mesh: &TriMeshFrame) -> Result<()> {
    match extension(path).as_str() {
        "obj" => write_obj(path, mesh),
        "ply" => write_ply(path, mesh, PlyFormat::BinaryLittleEndian),
        other => Err(Error::parse(path, format!("unsupported mesh format `{other}`"))),
    }
}

fn extension(path: &Path) -> String {
    path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase()
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

pub fn read_obj(path: &Path) -> Result<TriMeshFrame> {
    let reader = BufReader::new(open(path)?);
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for (number, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let at = |msg: String| Error::parse(path, format!("line {}: {msg}", number + 1));
        let mut words = line.split_whitespace();
        match words.next() {
            Some("v") => {
                let c: Vec<f64> =
                    words.take(3).map(|w| w.parse::<f64>().map_err(|_| at(format!("bad coordinate `{w}`")))).collect::<Result<_>>()?;
                if c.len() != 3 {
                    return Err(at("vertex needs three coordinates".into()));
                }
                vertices.push(P3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let idx: Vec<usize> = words
                    .map(|w| {
                        let head = w.split('/').next().unwrap_or("");
                        let k: i64 = head.parse().map_err(|_| at(format!("bad face index `{w}`")))?;
                        let resolved = if k < 0 { vertices.len() as i64 + k } else { k - 1 };
                        if resolved < 0 {
                            return Err(at(format!("face index {k} out of range")));
                        }
                        Ok(resolved as usize)
                    })
                    .collect::<Result<_>>()?;
                if idx.len() < 3 {
                    return Err(at("face needs at least three vertices".into()));
                }
                for k in 1..idx.len() - 1 {
                    triangles.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    check_indices(path, &vertices, &triangles)?;
    Ok(TriMeshFrame::new(vertices, triangles))
}

fn check_indices(path: &Path, vertices: &[P3], triangles: &[[usize; 3]]) -> Result<()> {
    if let Some((f, t)) = triangles.iter().enumerate().find(|(_, t)| t.iter().any(|&k| k >= vertices.len())) {
        return Err(Error::parse(path, format!("face {f} refers to vertex {:?} of {}", t, vertices.len())));
    }
    Ok(())
}

pub fn write_obj(path: &Path, mesh: &TriMeshFrame) -> Result<()> {
    let mut w = create(path)?;
    let mut body = || -> std::io::Result<()> {
        for p in &mesh.vertices {
            // `{}` prints the shortest text that reads back to the same f64.
            writeln!(w, "v {} {} {}", p.x, p.y, p.z)?;
        }
        for t in &mesh.triangles {
            writeln!(w, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
        }
        w.flush()
    };
    body().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
    BinaryBigEndian,
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
    fn parse(name: &str) -> Option<Scalar> {
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

    fn decode(self, b: &[u8], big: bool) -> f64 {
        macro_rules! num {
            ($t:ty, $n:expr) => {{
                let mut a = [0u8; $n];
                a.copy_from_slice(&b[..$n]);
                (if big { <$t>::from_be_bytes(a) } else { <$t>::from_le_bytes(a) }) as f64
            }};
        }
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => num!(i16, 2),
            Scalar::U16 => num!(u16, 2),
            Scalar::I32 => num!(i32, 4),
            Scalar::U32 => num!(u32, 4),
            Scalar::F32 => num!(f32, 4),
            Scalar::F64 => num!(f64, 8),
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

pub fn read_ply(path: &Path) -> Result<TriMeshFrame> {
    let mut reader = BufReader::new(open(path)?);
    let mut line = String::new();
    let mut number = 0;
    let mut next_line = |reader: &mut BufReader<File>, line: &mut String| -> Result<usize> {
        line.clear();
        number += 1;
        let n = reader.read_line(line).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            return Err(Error::parse(path, format!("line {number}: unexpected end of header")));
        }
        Ok(number)
    };
    next_line(&mut reader, &mut line)?;
    if line.trim() != "ply" {
        return Err(Error::parse(path, "line 1: missing `ply` magic"));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let at = next_line(&mut reader, &mut line)?;
        let err = |msg: &str| Error::parse(path, format!("line {at}: {msg}"));
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["format", f, _] => {
                format = Some(match *f {
                    "ascii" => PlyFormat::Ascii,
                    "binary_little_endian" => PlyFormat::BinaryLittleEndian,
                    "binary_big_endian" => PlyFormat::BinaryBigEndian,
                    _ => return Err(err("unknown format")),
                })
            }
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| err("bad element count"))?,
                properties: Vec::new(),
            }),
            ["property", "list", c, t, name] => {
                let (c, t) =
                    (Scalar::parse(c).ok_or_else(|| err("bad list count type"))?, Scalar::parse(t).ok_or_else(|| err("bad list type"))?);
                elements.last_mut().ok_or_else(|| err("property before element"))?.properties.push(Property::List(name.to_string(), c, t));
            }
            ["property", t, name] => {
                let t = Scalar::parse(t).ok_or_else(|| err("bad property type"))?;
                elements.last_mut().ok_or_else(|| err("property before element"))?.properties.push(Property::Scalar(name.to_string(), t));
            }
            ["end_header"] => break,
            ["comment", ..] | ["obj_info", ..] | [] => {}
            _ => return Err(err("unrecognized header line")),
        }
    }
    let format = format.ok_or_else(|| Error::parse(path, "header has no format line"))?;
    let mut body = Vec::new();
    reader.read_to_end(&mut body).map_err(|e| Error::io(path, e))?;
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    let mut source = PlySource { format, body: &body, pos: 0, line: number, path };
    for el in &elements {
        for _ in 0..el.count {
            source.start_record()?;
            let mut xyz = [0.0; 3];
            let mut face: Vec<usize> = Vec::new();
            for prop in &el.properties {
                match prop {
                    Property::Scalar(name, t) => {
                        let v = source.value(*t)?;
                        if el.name == "vertex" {
                            match name.as_str() {
                                "x" => xyz[0] = v,
                                "y" => xyz[1] = v,
                                "z" => xyz[2] = v,
                                _ => {}
                            }
                        }
                    }
                    Property::List(name, c, t) => {
                        let count = source.value(*c)? as usize;
                        let values: Vec<f64> = (0..count).map(|_| source.value(*t)).collect::<Result<_>>()?;
                        if el.name == "face" && (name == "vertex_indices" || name == "vertex_index") {
                            face = values.iter().map(|&v| v as usize).collect();
                        }
                    }
                }
            }
            match el.name.as_str() {
                "vertex" => vertices.push(P3::new(xyz[0], xyz[1], xyz[2])),
                "face" => {
                    if face.len() < 3 {
                        return Err(source.error("face needs at least three vertices"));
                    }
                    for k in 1..face.len() - 1 {
                        triangles.push([face[0], face[k], face[k + 1]]);
                    }
                }
                _ => {}
            }
            source.end_record()?;
        }
    }
    check_indices(path, &vertices, &triangles)?;
    Ok(TriMeshFrame::new(vertices, triangles))
}

struct PlySource<'a> {
    format: PlyFormat,
    body: &'a [u8],
    pos: usize,
    line: usize,
    path: &'a Path,
}

impl PlySource<'_> {
    fn error(&self, msg: &str) -> Error {
        match self.format {
            PlyFormat::Ascii => Error::parse(self.path, format!("line {}: {msg}", self.line)),
            _ => Error::parse(self.path, format!("byte {}: {msg}", self.pos)),
        }
    }

    fn start_record(&mut self) -> Result<()> {
        if self.format == PlyFormat::Ascii {
            // Skip blank lines between records.
            while self.pos < self.body.len() && self.body[self.pos].is_ascii_whitespace() {
                if self.body[self.pos] == b'\n' {
                    self.line += 1;
                }
                self.pos += 1;
            }
            self.line += 1;
        }
        Ok(())
    }

    fn end_record(&mut self) -> Result<()> {
        if self.format == PlyFormat::Ascii {
            while self.pos < self.body.len() && self.body[self.pos] != b'\n' {
                if !self.body[self.pos].is_ascii_whitespace() {
                    return Err(self.error("extra values in record"));
                }
                self.pos += 1;
            }
        }
        Ok(())
    }

    fn value(&mut self, t: Scalar) -> Result<f64> {
        match self.format {
            PlyFormat::Ascii => {
                while self.pos < self.body.len()
                    && (self.body[self.pos] == b' ' || self.body[self.pos] == b'\t' || self.body[self.pos] == b'\r')
                {
                    self.pos += 1;
                }
                let start = self.pos;
                while self.pos < self.body.len() && !self.body[self.pos].is_ascii_whitespace() {
                    self.pos += 1;
                }
                let word = std::str::from_utf8(&self.body[start..self.pos]).unwrap_or("");
                if word.is_empty() {
                    return Err(self.error("missing value"));
                }
                word.parse::<f64>().map_err(|_| self.error(&format!("bad value `{word}`")))
            }
            fmt => {
                let n = t.size();
                if self.pos + n > self.body.len() {
                    return Err(self.error("unexpected end of data"));
                }
                let v = t.decode(&self.body[self.pos..self.pos + n], fmt == PlyFormat::BinaryBigEndian);
                self.pos += n;
                Ok(v)
            }
        }
    }
}

pub fn write_ply(path: &Path, mesh: &TriMeshFrame, format: PlyFormat) -> Result<()> {
    let mut w = create(path)?;
    let name = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
        PlyFormat::BinaryBigEndian => "binary_big_endian",
    };
    let mut body = || -> std::io::Result<()> {
        write!(
            w,
            "ply\nformat {name} 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\n\
             element face {}\nproperty list uchar int vertex_indices\nend_header\n",
            mesh.vertices.len(),
            mesh.triangles.len()
        )?;
        match format {
            PlyFormat::Ascii => {
                for p in &mesh.vertices {
                    writeln!(w, "{} {} {}", p.x, p.y, p.z)?;
                }
                for t in &mesh.triangles {
                    writeln!(w, "3 {} {} {}", t[0], t[1], t[2])?;
                }
            }
            PlyFormat::BinaryLittleEndian | PlyFormat::BinaryBigEndian => {
                let big = format == PlyFormat::BinaryBigEndian;
                for p in &mesh.vertices {
                    for c in [p.x, p.y, p.z] {
                        w.write_all(&if big { c.to_be_bytes() } else { c.to_le_bytes() })?;
                    }
                }
                for t in &mesh.triangles {
                    w.write_all(&[3u8])?;
                    for &k in t {
                        let k = k as i32;
                        w.write_all(&if big { k.to_be_bytes() } else { k.to_le_bytes() })?;
                    }
                }
            }
        }
        w.flush()
    };
    body().map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Manifest and configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cohort {
    #[default]
    Normal,
    Banded,
}

/// Length unit of the input meshes; everything downstream is in mm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Units {
    #[serde(rename = "um")]
    Micrometre,
    #[default]
    #[serde(rename = "mm")]
    Millimetre,
    #[serde(rename = "cm")]
    Centimetre,
    #[serde(rename = "m")]
    Metre,
}

impl Units {
    pub fn to_mm(self) -> f64 {
        match self {
            Units::Micrometre => 1e-3,
            Units::Millimetre => 1.0,
            Units::Centimetre => 10.0,
            Units::Metre => 1e3,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SurfaceFiles {
    pub outer: Vec<PathBuf>,
    #[serde(default)]
    pub inner: Vec<PathBuf>,
    #[serde(default)]
    pub lumen: Vec<PathBuf>,
}

impl SurfaceFiles {
    pub fn get(&self, label: SurfaceLabel) -> &[PathBuf] {
        match label {
            SurfaceLabel::Outer => &self.outer,
            SurfaceLabel::Inner => &self.inner,
            SurfaceLabel::Lumen => &self.lumen,
        }
    }
}

/// One subject: an ordered mesh file list per surface and the cycle period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub subject: String,
    #[serde(default)]
    pub cohort: Cohort,
    /// Seconds.
    pub period: f64,
    #[serde(default)]
    pub units: Units,
    pub surfaces: SurfaceFiles,
}

impl DatasetManifest {
    /// Reads a TOML manifest; relative mesh paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: DatasetManifest = toml::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for list in [&mut manifest.surfaces.outer, &mut manifest.surfaces.inner, &mut manifest.surfaces.lumen] {
            for p in list.iter_mut() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Invalid(e.to_string()))?;
        write_text(path, &text)
    }

    /// Surfaces present, in pipeline order.
    pub fn available(&self) -> Vec<SurfaceLabel> {
        SurfaceLabel::ALL.into_iter().filter(|&s| !self.surfaces.get(s).is_empty()).collect()
    }

    /// Checks frame counts, the period and that every file exists.
    pub fn check(&self) -> Result<()> {
        let outer = self.surfaces.outer.len();
        if outer == 0 {
            return Err(Error::Invalid("manifest lists no outer surface frames".into()));
        }
        for s in [SurfaceLabel::Inner, SurfaceLabel::Lumen] {
            let k = self.surfaces.get(s).len();
            if k != 0 && k != outer {
                return Err(Error::Invalid(format!("frame count mismatch: {outer} outer frames but {k} {} frames", s.name())));
            }
        }
        if !(self.period > 0.0) {
            return Err(Error::Invalid(format!("period {} must be positive", self.period)));
        }
        for s in SurfaceLabel::ALL {
            if let Some(p) = self.surfaces.get(s).iter().find(|p| !p.is_file()) {
                return Err(Error::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, "mesh file not found")));
            }
        }
        Ok(())
    }
}

/// Loaded meshes per surface, in mm, frame order preserved.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub outer: Vec<TriMeshFrame>,
    pub inner: Vec<TriMeshFrame>,
    pub lumen: Vec<TriMeshFrame>,
}

impl Dataset {
    pub fn get(&self, label: SurfaceLabel) -> &[TriMeshFrame] {
        match label {
            SurfaceLabel::Outer => &self.outer,
            SurfaceLabel::Inner => &self.inner,
            SurfaceLabel::Lumen => &self.lumen,
        }
    }
}

/// Loads every listed mesh of the requested surfaces.
pub fn ingest(manifest: &DatasetManifest, surfaces: &[SurfaceLabel]) -> Result<Dataset> {
    use rayon::prelude::*;
    manifest.check()?;
    let period = manifest.period;
    let frames = manifest.surfaces.outer.len();
    let scale = manifest.units.to_mm();
    let load = |label: SurfaceLabel| -> Result<Vec<TriMeshFrame>> {
        if !surfaces.contains(&label) && label != SurfaceLabel::Outer {
            return Ok(Vec::new());
        }
        manifest
            .surfaces
            .get(label)
            .par_iter()
            .enumerate()
            .map(|(k, p)| {
                let mesh = read_mesh(p)?;
                let mesh = if scale == 1.0 { mesh } else { mesh.transformed(|q| P3::from(q.coords * scale)) };
                Ok(mesh.with_frame(k, period * k as f64 / frames as f64))
            })
            .collect()
    };
    Ok(Dataset { outer: load(SurfaceLabel::Outer)?, inner: load(SurfaceLabel::Inner)?, lumen: load(SurfaceLabel::Lumen)? })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdMode {
    Gauss,
    P75,
    #[default]
    Both,
}

impl ThresholdMode {
    pub fn gauss(self) -> bool {
        matches!(self, ThresholdMode::Gauss | ThresholdMode::Both)
    }

    pub fn p75(self) -> bool {
        matches!(self, ThresholdMode::P75 | ThresholdMode::Both)
    }
}

/// Run settings, read from a TOML file; every key is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    /// Grid nodes around the tube.
    pub grid_n: usize,
    /// Grid stations along the tube.
    pub grid_m: usize,
    pub surfaces: Vec<SurfaceLabel>,
    /// Produce the volume-preserving clipped domain for contour analysis.
    pub clip: bool,
    pub clip_end: ClipEnd,
    /// Place the maximum volume at mid-cycle when splitting phases.
    pub two_segment: bool,
    pub threshold: ThresholdMode,
    pub inlet: InletRule,
    /// Largest outer-to-inner projection distance before a node is flagged, mm.
    pub projection_max_distance: f64,
    pub contour_samples: usize,
    /// Half-width of the contour curvature stencil; 0 picks one from the grid.
    pub curvature_stencil: usize,
    pub pca_modes: usize,
    /// Stations for contour PCA as shares of the tube length.
    pub pca_stations: Vec<f64>,
    /// Pixels per image cell.
    pub magnify: usize,
    /// Write per-frame curvature and strain images.
    pub frame_images: bool,
    pub synth: TubeSpec,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            grid_n: 80,
            grid_m: 50,
            surfaces: SurfaceLabel::ALL.to_vec(),
            clip: true,
            clip_end: ClipEnd::Inlet,
            two_segment: false,
            threshold: ThresholdMode::Both,
            inlet: InletRule::Wider,
            projection_max_distance: 0.2,
            contour_samples: 100,
            curvature_stencil: 0,
            pca_modes: 3,
            pca_stations: vec![0.25, 0.5, 0.75],
            magnify: 4,
            frame_images: true,
            synth: TubeSpec::default(),
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
    }
}

/// Parses `NxM`, e.g. `80x50`.
pub fn parse_grid(text: &str) -> Result<(usize, usize)> {
    let bad = || Error::Invalid(format!("grid `{text}` is not of the form NxM"));
    let (a, b) = text.split_once(['x', 'X']).ok_or_else(bad)?;
    let (n, m) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
    if n < 4 || m < 3 {
        return Err(Error::Invalid(format!("grid {n}x{m} needs at least 4 nodes around and 3 stations")));
    }
    Ok((n, m))
}

// ---------------------------------------------------------------------------
// Color maps and images

pub type Rgb = [u8; 3];

pub const NEUTRAL_GRAY: Rgb = [128, 128, 128];

/// Blue (smallest) through cyan, green and yellow to red (largest).
pub fn area_color(x: f64) -> Rgb {
    const STOPS: [[f64; 3]; 5] = [[0.0, 0.0, 255.0], [0.0, 255.0, 255.0], [0.0, 255.0, 0.0], [255.0, 255.0, 0.0], [255.0, 0.0, 0.0]];
    let x = x.clamp(0.0, 1.0) * 4.0;
    let k = (x.floor() as usize).min(3);
    let f = x - k as f64;
    std::array::from_fn(|c| (STOPS[k][c] * (1.0 - f) + STOPS[k + 1][c] * f).round() as u8)
}

/// Hue from the angle, brightness from the magnitude in [0, 1].
pub fn gradient_color(angle: f64, magnitude: f64) -> Rgb {
    let h = angle.rem_euclid(std::f64::consts::TAU) / std::f64::consts::TAU * 6.0;
    let v = magnitude.clamp(0.0, 1.0);
    let k = (h.floor() as usize) % 6;
    let f = h - h.floor();
    let (p, q, t) = (0.0, v * (1.0 - f), v * f);
    let (r, g, b) = match k {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r, g, b].map(|c| (c * 255.0).round() as u8)
}

/// Writes an RGB PNG with each cell enlarged to `magnify`² pixels.
pub fn write_png(path: &Path, rows: usize, cols: usize, magnify: usize, cell: impl Fn(usize, usize) -> Rgb) -> Result<()> {
    let s = magnify.max(1);
    let (w, h) = (cols * s, rows * s);
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            data.extend_from_slice(&cell(y / s, x / s));
        }
    }
    let file = create(path)?;
    let mut encoder = png::Encoder::new(file, w as u32, h as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    encoder.set_compression(png::Compression::Fast);
    let to_err = |e: png::EncodingError| Error::io(path, std::io::Error::other(e.to_string()));
    let mut writer = encoder.write_header().map_err(to_err)?;
    writer.write_image_data(&data).map_err(to_err)?;
    writer.finish().map_err(to_err)
}

/// Renders a row-major matrix through a scalar color map after scaling
/// `[lo, hi]` to `[0, 1]`. NaN cells are gray; their count is returned.
pub fn render_matrix(
    path: &Path,
    values: &[f64],
    rows: usize,
    cols: usize,
    range: (f64, f64),
    magnify: usize,
    map: fn(f64) -> Rgb,
) -> Result<usize> {
    let (lo, hi) = range;
    let span = if hi > lo { hi - lo } else { 1.0 };
    write_png(path, rows, cols, magnify, |r, c| {
        let v = values[r * cols + c];
        if v.is_nan() {
            NEUTRAL_GRAY
        } else {
            map((v - lo) / span)
        }
    })?;
    Ok(values.iter().filter(|v| v.is_nan()).count())
}

/// Finite minimum and maximum of a slice.
pub fn finite_range(values: &[f64]) -> (f64, f64) {
    values.iter().filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

// ---------------------------------------------------------------------------
// Tables and text

/// Writes serializable rows as CSV with a header from the field names.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = create(path)?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r).map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Like [`write_csv`] for tables that may be empty: with no rows the file
/// still carries `header`, which must match the field names of `T`.
pub fn write_csv_or_header<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    if !rows.is_empty() {
        return write_csv(path, rows);
    }
    write_text(path, &(header.join(",") + "\n"))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Invalid(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::test_shapes;

    #[test]
    fn obj_and_ply_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let mut mesh = test_shapes::cylinder(0.3, 1.1, 17, 5);
        mesh.vertices[3].x = 0.1 + 0.2;
        for name in ["m.obj", "m.ply"] {
            let p = dir.path().join(name);
            write_mesh(&p, &mesh).unwrap();
            let back = read_mesh(&p).unwrap();
            assert_eq!(back.vertices, mesh.vertices);
            assert_eq!(back.triangles, mesh.triangles);
        }
        for fmt in [PlyFormat::Ascii, PlyFormat::BinaryBigEndian] {
            let p = dir.path().join("x.ply");
            write_ply(&p, &mesh, fmt).unwrap();
            let back = read_ply(&p).unwrap();
            assert_eq!(back.vertices, mesh.vertices);
            assert_eq!(back.triangles, mesh.triangles);
        }
    }

    #[test]
    fn parse_errors_name_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.obj");
        std::fs::write(&p, "v 0 0 0\nv 1 0 0\nv 0 1 zero\nf 1 2 3\n").unwrap();
        let msg = read_obj(&p).unwrap_err().to_string();
        assert!(msg.contains("bad.obj") && msg.contains("line 3"), "{msg}");
        std::fs::write(&p, "v 0 0 0\nf 1 2 3\n").unwrap();
        assert!(read_obj(&p).is_err());
        let q = dir.path().join("bad.ply");
        std::fs::write(&q, "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nend_header\n").unwrap();
        assert!(read_ply(&q).unwrap_err().to_string().contains("bad.ply"));
    }

    #[test]
    fn quads_are_fanned() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.obj");
        std::fs::write(&p, "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1/1 2/2 3/3 4/4\nf -4 -3 -2\n").unwrap();
        let m = read_obj(&p).unwrap();
        assert_eq!(m.triangles, vec![[0, 1, 2], [0, 2, 3], [0, 1, 2]]);
    }

    fn manifest_with(dir: &Path, outer: usize, inner: usize) -> PathBuf {
        let mesh = test_shapes::cylinder(0.3, 1.0, 8, 3);
        let mut text = String::from("subject = \"s\"\nperiod = 0.4\nunits = \"um\"\n[surfaces]\nouter = [");
        for k in 0..outer {
            write_mesh(&dir.join(format!("o{k}.obj")), &mesh).unwrap();
            text += &format!("\"o{k}.obj\",");
        }
        text += "]\ninner = [";
        for k in 0..inner {
            write_mesh(&dir.join(format!("i{k}.ply")), &mesh).unwrap();
            text += &format!("\"i{k}.ply\",");
        }
        text += "]\n";
        let p = dir.join("manifest.toml");
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn manifest_loads_and_converts_units() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest::load(&manifest_with(dir.path(), 3, 3)).unwrap();
        assert_eq!(m.available(), vec![SurfaceLabel::Outer, SurfaceLabel::Inner]);
        let data = ingest(&m, &SurfaceLabel::ALL).unwrap();
        assert_eq!(data.inner.len(), 3);
        assert_eq!(data.outer[2].frame_index, 2);
        assert!((data.outer[0].vertices[0].x - 0.3e-3).abs() < 1e-15);
    }

    #[test]
    fn frame_count_mismatch_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest::load(&manifest_with(dir.path(), 4, 3)).unwrap();
        assert!(m.check().unwrap_err().to_string().contains("mismatch"));
        let mut m = DatasetManifest::load(&manifest_with(dir.path(), 3, 3)).unwrap();
        m.surfaces.outer[1] = dir.path().join("nowhere.obj");
        assert!(m.check().unwrap_err().to_string().contains("nowhere.obj"));
    }

    #[test]
    fn config_defaults_and_overrides() {
        let c: Config = toml::from_str("grid_n = 40\nthreshold = \"p75\"\nsurfaces = [\"outer\"]\n[synth]\nframes = 20\n").unwrap();
        assert_eq!((c.grid_n, c.grid_m), (40, 50));
        assert_eq!(c.threshold, ThresholdMode::P75);
        assert_eq!(c.synth.frames, 20);
        assert_eq!(c.synth.wave_speed, 8.0);
        assert_eq!(parse_grid("80x50").unwrap(), (80, 50));
        assert!(parse_grid("80-50").is_err());
    }

    #[test]
    fn color_map_endpoints() {
        assert_eq!(area_color(0.0), [0, 0, 255]);
        assert_eq!(area_color(1.0), [255, 0, 0]);
        assert_eq!(gradient_color(1.3, 0.0), [0, 0, 0]);
        assert_eq!(gradient_color(0.0, 1.0), [255, 0, 0]);
    }

    #[test]
    fn png_output_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
        let values = [0.0, 1.0, 1.0, f64::NAN];
        assert_eq!(render_matrix(&a, &values, 2, 2, (0.0, 1.0), 3, area_color).unwrap(), 1);
        render_matrix(&b, &values, 2, 2, (0.0, 1.0), 3, area_color).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let decoder = png::Decoder::new(std::io::BufReader::new(File::open(&a).unwrap()));
        let mut reader = decoder.read_info().unwrap();
        let mut buf = vec![0; reader.output_buffer_size().unwrap()];
        reader.next_frame(&mut buf).unwrap();
        assert_eq!(&buf[0..3], &[0, 0, 255]);
        let last = buf.len() - 3;
        assert_eq!(&buf[last..], &NEUTRAL_GRAY);
        assert_eq!(&buf[3 * 3..3 * 3 + 3], &[255, 0, 0]);
    }
}
