//! Querying a trained field: surface meshes, occupied-cell feature maps,
//! zero-shot segmentation and similarity, plus PLY and label-image export.
//!
//! Meshing marches a uniform lattice split into six tetrahedra per cube.
//! All cubes use the same split, so shared faces carry the same diagonal
//! and the result is watertight wherever the iso-surface closes. Crossing
//! vertices are deduplicated per lattice edge, triangles are wound with
//! outward normals (occupied side behind the face).

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Matrix4, Vector3};

use crate::dataset_io::Intrinsics;
use crate::error::{Error, Result};
use crate::grid_field::{FieldSet, MlpCache, SceneBounds};
use crate::scp_fusion::{classify_measurement, ClassPrompts};
use crate::volume_renderer::{
    render_bundle, sample_bundle, RayBundle, RenderOptions, MIN_FEATURE_NORM, MIN_WEIGHT_SUM,
};
use crate::VOID_CLASS;

/// An indexed triangle mesh, optionally with one class id per vertex.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[u32; 3]>,
    pub classes: Option<Vec<u16>>,
}

impl TriMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    /// Signed volume enclosed by the mesh; positive for closed surfaces
    /// with outward winding.
    pub fn signed_volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let a = &self.vertices[t[0] as usize];
                let b = &self.vertices[t[1] as usize];
                let c = &self.vertices[t[2] as usize];
                a.dot(&b.cross(c)) / 6.0
            })
            .sum()
    }
}

/// The six tetrahedra of the translation-invariant cube split. Corner ids
/// encode `(x << 2) | (y << 1) | z`; every tetrahedron walks the main
/// diagonal 0 to 7, one axis at a time.
const CUBE_TETS: [[usize; 4]; 6] = [
    [0, 4, 6, 7],
    [0, 4, 5, 7],
    [0, 2, 6, 7],
    [0, 2, 3, 7],
    [0, 1, 5, 7],
    [0, 1, 3, 7],
];

const CUBE_CORNERS: [(usize, usize, usize); 8] = [
    (0, 0, 0),
    (0, 0, 1),
    (0, 1, 0),
    (0, 1, 1),
    (1, 0, 0),
    (1, 0, 1),
    (1, 1, 0),
    (1, 1, 1),
];

/// Marches the iso-surface `sample(p) = threshold` of a scalar field over
/// a uniform lattice with spacing at most `voxel`. Crossing vertices are
/// shared across all tetrahedra touching a lattice edge.
pub fn extract_scalar_mesh(
    mut sample: impl FnMut(&Vector3<f64>) -> Result<f64>,
    bounds: &SceneBounds,
    voxel: f64,
    threshold: f64,
) -> Result<TriMesh> {
    if !(voxel > 0.0) {
        return Err(Error::arg(format!("mesh voxel must be positive, got {voxel}")));
    }
    let ext = bounds.extent();
    let mut res = [0usize; 3];
    let mut step = [0f64; 3];
    for a in 0..3 {
        res[a] = (ext[a] / voxel).ceil() as usize + 1;
        step[a] = ext[a] / (res[a] - 1) as f64;
    }

    let idx = |i: usize, j: usize, k: usize| (i * res[1] + j) * res[2] + k;
    let mut values = vec![0.0f64; res[0] * res[1] * res[2]];
    for i in 0..res[0] {
        for j in 0..res[1] {
            for k in 0..res[2] {
                let p = Vector3::new(
                    bounds.min.x + i as f64 * step[0],
                    bounds.min.y + j as f64 * step[1],
                    bounds.min.z + k as f64 * step[2],
                );
                values[idx(i, j, k)] = sample(&p)?;
            }
        }
    }
    let point = |flat: usize| {
        let k = flat % res[2];
        let j = (flat / res[2]) % res[1];
        let i = flat / (res[1] * res[2]);
        Vector3::new(
            bounds.min.x + i as f64 * step[0],
            bounds.min.y + j as f64 * step[1],
            bounds.min.z + k as f64 * step[2],
        )
    };

    let mut mesh = TriMesh::default();
    let mut edge_vertices: HashMap<(usize, usize), u32> = HashMap::new();
    let mut cross = |a: usize, b: usize, mesh: &mut TriMesh| -> u32 {
        let key = if a < b { (a, b) } else { (b, a) };
        *edge_vertices.entry(key).or_insert_with(|| {
            let (va, vb) = (values[key.0], values[key.1]);
            let t = (threshold - va) / (vb - va);
            let p = point(key.0) + t * (point(key.1) - point(key.0));
            mesh.vertices.push(p);
            (mesh.vertices.len() - 1) as u32
        })
    };

    let mut corner = [0usize; 8];
    for i in 0..res[0] - 1 {
        for j in 0..res[1] - 1 {
            for k in 0..res[2] - 1 {
                for (c, (dx, dy, dz)) in CUBE_CORNERS.iter().enumerate() {
                    corner[c] = idx(i + dx, j + dy, k + dz);
                }
                for tet in &CUBE_TETS {
                    let v = [corner[tet[0]], corner[tet[1]], corner[tet[2]], corner[tet[3]]];
                    let inside: Vec<usize> = (0..4).filter(|&c| values[v[c]] > threshold).collect();
                    let outside: Vec<usize> = (0..4).filter(|&c| values[v[c]] <= threshold).collect();
                    let tris: Vec<[u32; 3]> = match inside.len() {
                        1 => {
                            let a = v[inside[0]];
                            vec![[
                                cross(a, v[outside[0]], &mut mesh),
                                cross(a, v[outside[1]], &mut mesh),
                                cross(a, v[outside[2]], &mut mesh),
                            ]]
                        }
                        3 => {
                            let a = v[outside[0]];
                            vec![[
                                cross(a, v[inside[0]], &mut mesh),
                                cross(a, v[inside[1]], &mut mesh),
                                cross(a, v[inside[2]], &mut mesh),
                            ]]
                        }
                        2 => {
                            // Four crossing points form a quad; split it
                            // along one diagonal.
                            let (a0, a1) = (v[inside[0]], v[inside[1]]);
                            let (b0, b1) = (v[outside[0]], v[outside[1]]);
                            let q00 = cross(a0, b0, &mut mesh);
                            let q01 = cross(a0, b1, &mut mesh);
                            let q10 = cross(a1, b0, &mut mesh);
                            let q11 = cross(a1, b1, &mut mesh);
                            vec![[q00, q01, q11], [q00, q11, q10]]
                        }
                        _ => Vec::new(),
                    };
                    if tris.is_empty() {
                        continue;
                    }
                    // Wind outward: from occupied corners toward free ones.
                    let mut inward = Vector3::zeros();
                    for &c in &outside {
                        inward += point(v[c]);
                    }
                    let mut outward = inward / outside.len() as f64;
                    let mut inner = Vector3::zeros();
                    for &c in &inside {
                        inner += point(v[c]);
                    }
                    outward -= inner / inside.len() as f64;
                    for t in tris {
                        let p0 = mesh.vertices[t[0] as usize];
                        let p1 = mesh.vertices[t[1] as usize];
                        let p2 = mesh.vertices[t[2] as usize];
                        let n = (p1 - p0).cross(&(p2 - p0));
                        if n.dot(&outward) >= 0.0 {
                            mesh.triangles.push(t);
                        } else {
                            mesh.triangles.push([t[0], t[2], t[1]]);
                        }
                    }
                }
            }
        }
    }
    Ok(mesh)
}

/// Marches the occupancy iso-surface of a trained field.
pub fn extract_mesh(fields: &FieldSet, voxel: f64, threshold: f64) -> Result<TriMesh> {
    let mut feat = vec![0.0; fields.geometry.total_feat_dim()];
    let mut cache = MlpCache::default();
    let bounds = fields.geometry.bounds;
    extract_scalar_mesh(
        |p| {
            fields.geometry.sample_into(p, &mut feat)?;
            fields.occ_decoder.forward_cached(&feat, &mut cache);
            Ok(crate::grid_field::sigmoid(cache.out[0]))
        },
        &bounds,
        voxel,
        threshold,
    )
}

/// Cell centers the field considers occupied, each with its unit semantic
/// feature (zero rows where the decoded feature vanished).
#[derive(Clone, Debug, PartialEq)]
pub struct OccFeatureMap {
    pub positions: Vec<Vector3<f64>>,
    /// `positions.len() × dim`, row-major.
    pub features: Vec<f64>,
    pub dim: usize,
    pub voxel: f64,
    pub threshold: f64,
}

impl OccFeatureMap {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

/// Evaluates occupancy at the centers of a uniform cell grid over the
/// field's bounds and keeps cells above `threshold` together with their
/// normalized semantic features.
pub fn build_occ_feature_map(fields: &FieldSet, voxel: f64, threshold: f64) -> Result<OccFeatureMap> {
    if !(voxel > 0.0) {
        return Err(Error::arg(format!("map voxel must be positive, got {voxel}")));
    }
    let bounds = fields.geometry.bounds;
    let ext = bounds.extent();
    let mut cells = [0usize; 3];
    let mut step = [0f64; 3];
    for a in 0..3 {
        cells[a] = ((ext[a] / voxel).ceil() as usize).max(1);
        step[a] = ext[a] / cells[a] as f64;
    }
    let dim = fields.sem_dim;
    let mut geo_feat = vec![0.0; fields.geometry.total_feat_dim()];
    let mut sem_feat = vec![0.0; fields.semantic.total_feat_dim()];
    let mut occ_cache = MlpCache::default();
    let mut sem_cache = MlpCache::default();
    let mut map = OccFeatureMap {
        positions: Vec::new(),
        features: Vec::new(),
        dim,
        voxel,
        threshold,
    };
    for i in 0..cells[0] {
        for j in 0..cells[1] {
            for k in 0..cells[2] {
                let p = Vector3::new(
                    bounds.min.x + (i as f64 + 0.5) * step[0],
                    bounds.min.y + (j as f64 + 0.5) * step[1],
                    bounds.min.z + (k as f64 + 0.5) * step[2],
                );
                fields.geometry.sample_into(&p, &mut geo_feat)?;
                fields.occ_decoder.forward_cached(&geo_feat, &mut occ_cache);
                if crate::grid_field::sigmoid(occ_cache.out[0]) <= threshold {
                    continue;
                }
                fields.semantic.sample_into(&p, &mut sem_feat)?;
                fields.sem_decoder.forward_cached(&sem_feat, &mut sem_cache);
                let norm = sem_cache.out.iter().map(|x| x * x).sum::<f64>().sqrt();
                map.positions.push(p);
                if norm > MIN_FEATURE_NORM {
                    map.features.extend(sem_cache.out.iter().map(|x| x / norm));
                } else {
                    map.features.extend(std::iter::repeat_n(0.0, dim));
                }
            }
        }
    }
    Ok(map)
}

/// Assigns every occupied cell the prompt class with the highest cosine;
/// cells with a vanished feature get [`VOID_CLASS`].
pub fn segment_3d(map: &OccFeatureMap, prompts: &ClassPrompts) -> Result<Vec<u16>> {
    if prompts.dim != map.dim {
        return Err(Error::DimensionMismatch { expected: map.dim, got: prompts.dim });
    }
    Ok((0..map.len())
        .map(|i| {
            classify_measurement(map.feature(i), prompts)
                .map_or(VOID_CLASS, |c| c as u16)
        })
        .collect())
}

/// Cosine similarity of every occupied cell against one query embedding.
pub fn query_similarity(map: &OccFeatureMap, embedding: &[f64]) -> Result<Vec<f64>> {
    if embedding.len() != map.dim {
        return Err(Error::DimensionMismatch { expected: map.dim, got: embedding.len() });
    }
    let norm = embedding.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Err(Error::arg("query embedding is zero"));
    }
    Ok((0..map.len())
        .map(|i| map.feature(i).iter().zip(embedding).map(|(a, b)| a * b).sum::<f64>() / norm)
        .collect())
}

/// Renders a class-id image from a camera pose by compositing semantic
/// features along deterministic midpoint samples and matching against the
/// prompts. Pixels whose rays accumulate almost no density return
/// [`VOID_CLASS`].
pub fn render_segmentation(
    fields: &FieldSet,
    prompts: &ClassPrompts,
    intr: &Intrinsics,
    pose: &Matrix4<f64>,
    n_samples: usize,
) -> Result<Vec<u16>> {
    if prompts.dim != fields.sem_dim {
        return Err(Error::DimensionMismatch { expected: fields.sem_dim, got: prompts.dim });
    }
    let bounds = fields.geometry.bounds;
    let m = intr.width * intr.height;
    let mut bundle = RayBundle {
        gt_color: vec![[0.0; 3]; m],
        gt_depth: vec![-1.0; m],
        ..RayBundle::default()
    };
    for v in 0..intr.height {
        for u in 0..intr.width {
            let (o, d, _) = crate::dataset_io::camera_ray(intr, pose, u, v);
            bundle.origins.push(o);
            bundle.directions.push(d);
        }
    }
    let samples = sample_bundle::<rand_chacha::ChaCha8Rng>(&bounds, &bundle, n_samples, 0.0, None);
    let out = render_bundle(
        fields,
        &bundle.origins,
        &bundle.directions,
        &samples,
        RenderOptions { with_color: false, with_semantic: true },
    )?;
    let sem = out.semantic.expect("semantic rendering requested");
    let defined = out.sem_defined.expect("semantic rendering requested");
    let d = fields.sem_dim;
    Ok((0..m)
        .map(|r| {
            if out.weight_sum[r] <= MIN_WEIGHT_SUM || !defined[r] {
                return VOID_CLASS;
            }
            classify_measurement(&sem[r * d..(r + 1) * d], prompts)
                .map_or(VOID_CLASS, |c| c as u16)
        })
        .collect())
}

/// Point or mesh payload of a PLY file: positions, optional per-vertex
/// class ids, optional one named scalar channel, optional faces.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlyContent {
    pub positions: Vec<Vector3<f64>>,
    pub classes: Option<Vec<u16>>,
    pub scalar: Option<(String, Vec<f64>)>,
    pub triangles: Vec<[u32; 3]>,
}

impl From<&TriMesh> for PlyContent {
    fn from(mesh: &TriMesh) -> Self {
        PlyContent {
            positions: mesh.vertices.clone(),
            classes: mesh.classes.clone(),
            scalar: None,
            triangles: mesh.triangles.clone(),
        }
    }
}

/// Writes PLY, ASCII or binary little-endian. Positions and scalars are
/// stored as f32, classes as u16.
pub fn write_ply(path: &Path, content: &PlyContent, binary: bool) -> Result<()> {
    let n = content.positions.len();
    if let Some(c) = &content.classes {
        if c.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: c.len() });
        }
    }
    if let Some((_, s)) = &content.scalar {
        if s.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: s.len() });
        }
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    let format = if binary { "binary_little_endian" } else { "ascii" };
    writeln!(w, "ply\nformat {format} 1.0\nelement vertex {n}")?;
    writeln!(w, "property float x\nproperty float y\nproperty float z")?;
    if content.classes.is_some() {
        writeln!(w, "property ushort class")?;
    }
    if let Some((name, _)) = &content.scalar {
        writeln!(w, "property float {name}")?;
    }
    if !content.triangles.is_empty() {
        writeln!(w, "element face {}", content.triangles.len())?;
        writeln!(w, "property list uchar uint vertex_indices")?;
    }
    writeln!(w, "end_header")?;
    for i in 0..n {
        let p = &content.positions[i];
        if binary {
            for v in [p.x as f32, p.y as f32, p.z as f32] {
                w.write_all(&v.to_le_bytes())?;
            }
            if let Some(c) = &content.classes {
                w.write_all(&c[i].to_le_bytes())?;
            }
            if let Some((_, s)) = &content.scalar {
                w.write_all(&(s[i] as f32).to_le_bytes())?;
            }
        } else {
            write!(w, "{} {} {}", p.x as f32, p.y as f32, p.z as f32)?;
            if let Some(c) = &content.classes {
                write!(w, " {}", c[i])?;
            }
            if let Some((_, s)) = &content.scalar {
                write!(w, " {}", s[i] as f32)?;
            }
            writeln!(w)?;
        }
    }
    for t in &content.triangles {
        if binary {
            w.write_all(&[3u8])?;
            for &i in t {
                w.write_all(&i.to_le_bytes())?;
            }
        } else {
            writeln!(w, "3 {} {} {}", t[0], t[1], t[2])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, PartialEq)]
enum PlyProp {
    X,
    Y,
    Z,
    Class,
    Scalar,
}

/// Reads the PLY subset produced by [`write_ply`]: float x/y/z, optional
/// ushort class, optional one float scalar, optional uchar-uint face
/// lists, ASCII or binary little-endian.
pub fn read_ply(path: &Path) -> Result<PlyContent> {
    let bytes = fs::read(path)?;
    let header_end = bytes
        .windows(11)
        .position(|w| w == b"end_header\n")
        .ok_or_else(|| Error::format("ply", "missing end_header"))?
        + 11;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| Error::format("ply", "non-utf8 header"))?;

    let mut binary = None;
    let mut n_vertices = 0usize;
    let mut n_faces = 0usize;
    let mut props: Vec<PlyProp> = Vec::new();
    let mut scalar_name = String::new();
    let mut in_vertex = false;
    for line in header.lines() {
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("format") => {
                binary = match tok.next() {
                    Some("ascii") => Some(false),
                    Some("binary_little_endian") => Some(true),
                    other => {
                        return Err(Error::format("ply", format!("unsupported format {other:?}")))
                    }
                };
            }
            Some("element") => match (tok.next(), tok.next()) {
                (Some("vertex"), Some(n)) => {
                    n_vertices = n.parse().map_err(|_| Error::format("ply", "bad vertex count"))?;
                    in_vertex = true;
                }
                (Some("face"), Some(n)) => {
                    n_faces = n.parse().map_err(|_| Error::format("ply", "bad face count"))?;
                    in_vertex = false;
                }
                _ => return Err(Error::format("ply", format!("bad element line {line:?}"))),
            },
            Some("property") if in_vertex => {
                let ty = tok.next().unwrap_or("");
                let name = tok.next().unwrap_or("");
                let prop = match (ty, name) {
                    ("float", "x") => PlyProp::X,
                    ("float", "y") => PlyProp::Y,
                    ("float", "z") => PlyProp::Z,
                    ("ushort", "class") => PlyProp::Class,
                    ("float", other) => {
                        scalar_name = other.to_string();
                        PlyProp::Scalar
                    }
                    _ => return Err(Error::format("ply", format!("unsupported property {line:?}"))),
                };
                props.push(prop);
            }
            _ => {}
        }
    }
    let binary = binary.ok_or_else(|| Error::format("ply", "missing format line"))?;
    if !props.contains(&PlyProp::X) || !props.contains(&PlyProp::Y) || !props.contains(&PlyProp::Z) {
        return Err(Error::format("ply", "missing position properties"));
    }

    let mut content = PlyContent {
        positions: Vec::with_capacity(n_vertices),
        classes: props.contains(&PlyProp::Class).then(|| Vec::with_capacity(n_vertices)),
        scalar: props
            .contains(&PlyProp::Scalar)
            .then(|| (scalar_name, Vec::with_capacity(n_vertices))),
        triangles: Vec::with_capacity(n_faces),
    };

    if binary {
        let mut r = &bytes[header_end..];
        let mut f32buf = [0u8; 4];
        let mut u16buf = [0u8; 2];
        for _ in 0..n_vertices {
            let (mut x, mut y, mut z) = (0.0, 0.0, 0.0);
            for prop in &props {
                match prop {
                    PlyProp::Class => {
                        r.read_exact(&mut u16buf)?;
                        content.classes.as_mut().unwrap().push(u16::from_le_bytes(u16buf));
                    }
                    other => {
                        r.read_exact(&mut f32buf)?;
                        let v = f32::from_le_bytes(f32buf) as f64;
                        match other {
                            PlyProp::X => x = v,
                            PlyProp::Y => y = v,
                            PlyProp::Z => z = v,
                            PlyProp::Scalar => content.scalar.as_mut().unwrap().1.push(v),
                            PlyProp::Class => unreachable!(),
                        }
                    }
                }
            }
            content.positions.push(Vector3::new(x, y, z));
        }
        for _ in 0..n_faces {
            let mut count = [0u8; 1];
            r.read_exact(&mut count)?;
            if count[0] != 3 {
                return Err(Error::format("ply", format!("face with {} vertices", count[0])));
            }
            let mut tri = [0u32; 3];
            for t in tri.iter_mut() {
                r.read_exact(&mut f32buf)?;
                *t = u32::from_le_bytes(f32buf);
            }
            content.triangles.push(tri);
        }
        if !r.is_empty() {
            return Err(Error::format("ply", "trailing bytes"));
        }
    } else {
        let text = std::str::from_utf8(&bytes[header_end..])
            .map_err(|_| Error::format("ply", "non-utf8 body"))?;
        let mut lines = text.lines();
        for _ in 0..n_vertices {
            let line = lines.next().ok_or_else(|| Error::format("ply", "missing vertex row"))?;
            let mut tok = line.split_whitespace();
            let (mut x, mut y, mut z) = (0.0, 0.0, 0.0);
            for prop in &props {
                let t = tok.next().ok_or_else(|| Error::format("ply", "short vertex row"))?;
                match prop {
                    PlyProp::Class => content
                        .classes
                        .as_mut()
                        .unwrap()
                        .push(t.parse().map_err(|_| Error::format("ply", "bad class"))?),
                    other => {
                        let v = t
                            .parse::<f32>()
                            .map_err(|_| Error::format("ply", "bad number"))?
                            as f64;
                        match other {
                            PlyProp::X => x = v,
                            PlyProp::Y => y = v,
                            PlyProp::Z => z = v,
                            PlyProp::Scalar => content.scalar.as_mut().unwrap().1.push(v),
                            PlyProp::Class => unreachable!(),
                        }
                    }
                }
            }
            content.positions.push(Vector3::new(x, y, z));
        }
        for _ in 0..n_faces {
            let line = lines.next().ok_or_else(|| Error::format("ply", "missing face row"))?;
            let nums: Vec<u32> = line
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| Error::format("ply", "bad face index")))
                .collect::<Result<_>>()?;
            if nums.len() != 4 || nums[0] != 3 {
                return Err(Error::format("ply", format!("bad face row {line:?}")));
            }
            content.triangles.push([nums[1], nums[2], nums[3]]);
        }
    }
    Ok(content)
}

/// Writes a class-id image as 16-bit grayscale PNG.
pub fn write_label_png(path: &Path, labels: &[u16], width: usize, height: usize) -> Result<()> {
    if labels.len() != width * height {
        return Err(Error::DimensionMismatch { expected: width * height, got: labels.len() });
    }
    let img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(
        width as u32,
        height as u32,
        labels.to_vec(),
    )
    .expect("sized above");
    img.save(path)?;
    Ok(())
}

/// Reads a 16-bit grayscale PNG back into class ids.
pub fn read_label_png(path: &Path) -> Result<(Vec<u16>, usize, usize)> {
    match image::open(path)? {
        image::DynamicImage::ImageLuma16(img) => {
            let (w, h) = (img.width() as usize, img.height() as usize);
            Ok((img.into_raw(), w, h))
        }
        _ => Err(Error::format("label image", "not 16-bit grayscale")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid_field::{sigmoid, FieldConfig};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    fn sphere_field(r: f64) -> impl FnMut(&Vector3<f64>) -> Result<f64> {
        move |p: &Vector3<f64>| Ok(sigmoid(12.0 * (r - p.norm())))
    }

    fn unit_bounds() -> SceneBounds {
        SceneBounds::new(Vector3::new(-1.0, -1.0, -1.0), Vector3::new(1.0, 1.0, 1.0)).unwrap()
    }

    #[test]
    fn sphere_mesh_vertices_lie_on_the_sphere() {
        let mesh = extract_scalar_mesh(sphere_field(0.6), &unit_bounds(), 0.08, 0.5).unwrap();
        assert!(mesh.vertices.len() > 200);
        for v in &mesh.vertices {
            assert!((v.norm() - 0.6).abs() < 0.03, "vertex at radius {}", v.norm());
        }
    }

    #[test]
    fn sphere_mesh_is_watertight() {
        let mesh = extract_scalar_mesh(sphere_field(0.55), &unit_bounds(), 0.1, 0.5).unwrap();
        // Closed 2-manifold: every undirected edge borders exactly two
        // triangles.
        let mut edges: HashMap<(u32, u32), usize> = HashMap::new();
        for t in &mesh.triangles {
            for e in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                let key = if e.0 < e.1 { e } else { (e.1, e.0) };
                *edges.entry(key).or_insert(0) += 1;
            }
        }
        assert!(!edges.is_empty());
        for (e, n) in edges {
            assert_eq!(n, 2, "edge {e:?} borders {n} triangles");
        }
    }

    #[test]
    fn sphere_mesh_encloses_the_right_volume_with_outward_winding() {
        let r = 0.6;
        let mesh = extract_scalar_mesh(sphere_field(r), &unit_bounds(), 0.05, 0.5).unwrap();
        let want = 4.0 / 3.0 * std::f64::consts::PI * r * r * r;
        let got = mesh.signed_volume();
        assert!(got > 0.0, "winding is inward");
        assert_relative_eq!(got, want, max_relative = 0.02);
    }

    #[test]
    fn hard_box_field_meshes_onto_its_faces() {
        let lo = Vector3::new(-0.4, -0.3, -0.2);
        let hi = Vector3::new(0.4, 0.3, 0.2);
        let mesh = extract_scalar_mesh(
            |p: &Vector3<f64>| {
                let inside = (0..3).all(|a| p[a] > lo[a] && p[a] < hi[a]);
                Ok(if inside { 1.0 } else { 0.0 })
            },
            &unit_bounds(),
            0.1,
            0.5,
        )
        .unwrap();
        assert!(!mesh.is_empty());
        // A binary field crosses the threshold halfway along straddling
        // lattice edges, so vertices sit within half a lattice step of the
        // true face.
        for v in &mesh.vertices {
            let d = (0..3)
                .map(|a| (v[a] - lo[a]).abs().min((v[a] - hi[a]).abs()))
                .fold(f64::INFINITY, f64::min);
            let inside = (0..3).all(|a| v[a] >= lo[a] - 0.06 && v[a] <= hi[a] + 0.06);
            assert!(inside && d < 0.06, "vertex {v:?} far from the box surface");
        }
    }

    #[test]
    fn constant_fields_produce_no_mesh() {
        for c in [0.0, 1.0] {
            let mesh =
                extract_scalar_mesh(|_: &Vector3<f64>| Ok(c), &unit_bounds(), 0.25, 0.5).unwrap();
            assert!(mesh.is_empty());
        }
    }

    #[test]
    fn meshing_is_deterministic() {
        let a = extract_scalar_mesh(sphere_field(0.5), &unit_bounds(), 0.11, 0.5).unwrap();
        let b = extract_scalar_mesh(sphere_field(0.5), &unit_bounds(), 0.11, 0.5).unwrap();
        assert_eq!(a, b);
    }

    fn amplified_fields(seed: u64) -> FieldSet {
        let bounds = unit_bounds();
        let cfg = FieldConfig {
            levels: 2,
            sem_levels: 2,
            coarsest_voxel: Some(0.9),
            geo_feat_dim: 2,
            color_feat_dim: 2,
            sem_feat_dim: 3,
            sem_dim: 5,
            hidden_dim: 8,
            hidden_layers: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fields = FieldSet::new(bounds, &cfg, &mut rng).unwrap();
        for level in fields
            .geometry
            .levels
            .iter_mut()
            .chain(fields.semantic.levels.iter_mut())
        {
            for p in level.features.iter_mut() {
                *p *= 60.0;
            }
        }
        // Fresh fields start near-empty; recenter the occupancy logits so
        // both occupied and free cells appear.
        let last = fields.occ_decoder.layers.len() - 1;
        fields.occ_decoder.layers[last].bias[0] = 0.0;
        fields
    }

    #[test]
    fn occ_feature_map_collects_occupied_cell_centers() {
        let fields = amplified_fields(31);
        // Voxel 0.21 over extent 2 gives a 10^3 cell grid with step 0.2.
        let mut occs = Vec::new();
        for i in 0..10 {
            for j in 0..10 {
                for k in 0..10 {
                    let p = Vector3::new(
                        -1.0 + (i as f64 + 0.5) * 0.2,
                        -1.0 + (j as f64 + 0.5) * 0.2,
                        -1.0 + (k as f64 + 0.5) * 0.2,
                    );
                    occs.push(fields.occupancy(&p).unwrap());
                }
            }
        }
        // Threshold at the median so both sides are populated.
        let mut sorted = occs.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let thr = sorted[500];
        let map = build_occ_feature_map(&fields, 0.21, thr).unwrap();
        assert_eq!(map.len(), occs.iter().filter(|&&o| o > thr).count());
        assert!(map.len() > 0 && map.len() < occs.len());
        for (i, p) in map.positions.iter().enumerate() {
            assert!(fields.occupancy(p).unwrap() > thr);
            for c in 0..3 {
                let cell = (p[c] + 1.0) / 0.2 - 0.5;
                assert!((cell - cell.round()).abs() < 1e-9, "position off the cell lattice");
            }
            let norm = map.feature(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(norm < 1e-8 || (norm - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn segmentation_and_similarity_agree_with_manual_cosines() {
        let fields = amplified_fields(37);
        let map = build_occ_feature_map(&fields, 0.27, 0.5).unwrap();
        let prompts = ClassPrompts::new(
            vec!["a".into(), "b".into()],
            vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0],
            5,
        )
        .unwrap();
        let seg = segment_3d(&map, &prompts).unwrap();
        let sim_a = query_similarity(&map, prompts.embedding(0)).unwrap();
        let sim_b = query_similarity(&map, prompts.embedding(1)).unwrap();
        for i in 0..map.len() {
            assert!(sim_a[i].abs() <= 1.0 + 1e-12);
            let want = if map.feature(i).iter().all(|&x| x == 0.0) {
                VOID_CLASS
            } else if sim_a[i] >= sim_b[i] {
                0
            } else {
                1
            };
            assert_eq!(seg[i], want, "cell {i}");
        }
    }

    #[test]
    fn empty_field_renders_void_segmentation() {
        let mut fields = amplified_fields(41);
        let last = fields.occ_decoder.layers.len() - 1;
        fields.occ_decoder.layers[last].bias[0] = -30.0;
        for w in fields.occ_decoder.layers[last].weight.iter_mut() {
            *w = 0.0;
        }
        let prompts = ClassPrompts::new(
            vec!["a".into()],
            vec![1.0, 0.0, 0.0, 0.0, 0.0],
            5,
        )
        .unwrap();
        let intr = Intrinsics {
            fx: 8.0,
            fy: 8.0,
            cx: 4.0,
            cy: 4.0,
            width: 8,
            height: 8,
            depth_scale: 1000.0,
        };
        let pose = crate::dataset_io::synthetic::look_pose(
            &Vector3::new(0.0, 0.0, 0.0),
            &Vector3::new(1.0, 0.0, 0.0),
        );
        let seg = render_segmentation(&fields, &prompts, &intr, &pose, 16).unwrap();
        assert!(seg.iter().all(|&c| c == VOID_CLASS));
    }

    #[test]
    fn dense_field_renders_defined_segmentation() {
        let fields = amplified_fields(43);
        let prompts = ClassPrompts::new(
            vec!["a".into(), "b".into()],
            vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0],
            5,
        )
        .unwrap();
        let intr = Intrinsics {
            fx: 8.0,
            fy: 8.0,
            cx: 4.0,
            cy: 4.0,
            width: 8,
            height: 8,
            depth_scale: 1000.0,
        };
        let pose = crate::dataset_io::synthetic::look_pose(
            &Vector3::new(-0.9, 0.0, 0.0),
            &Vector3::new(1.0, 0.0, 0.0),
        );
        let seg = render_segmentation(&fields, &prompts, &intr, &pose, 32).unwrap();
        assert!(seg.iter().any(|&c| c != VOID_CLASS));
        let again = render_segmentation(&fields, &prompts, &intr, &pose, 32).unwrap();
        assert_eq!(seg, again);
    }

    #[test]
    fn ply_roundtrip_ascii_and_binary() {
        let dir = tempfile::tempdir().unwrap();
        let mesh = extract_scalar_mesh(sphere_field(0.5), &unit_bounds(), 0.2, 0.5).unwrap();
        let mut content = PlyContent::from(&mesh);
        content.classes = Some((0..content.positions.len() as u16).collect());
        content.scalar = Some((
            "similarity".into(),
            (0..content.positions.len()).map(|i| i as f64 / 100.0).collect(),
        ));

        for (name, binary) in [("a.ply", false), ("b.ply", true)] {
            let path = dir.path().join(name);
            write_ply(&path, &content, binary).unwrap();
            let back = read_ply(&path).unwrap();
            assert_eq!(back.triangles, content.triangles);
            assert_eq!(back.classes, content.classes);
            assert_eq!(back.positions.len(), content.positions.len());
            for (a, b) in back.positions.iter().zip(&content.positions) {
                for c in 0..3 {
                    assert_eq!(a[c], b[c] as f32 as f64);
                }
            }
            let (sn, sv) = back.scalar.as_ref().unwrap();
            assert_eq!(sn, "similarity");
            for (a, b) in sv.iter().zip(&content.scalar.as_ref().unwrap().1) {
                assert_eq!(*a, *b as f32 as f64);
            }
            // Second write of the reloaded content is byte-stable.
            let path2 = dir.path().join(format!("again_{name}"));
            write_ply(&path2, &back, binary).unwrap();
            let one = std::fs::read(&path).unwrap();
            let two = std::fs::read(&path2).unwrap();
            assert_eq!(one, two);
        }
    }

    #[test]
    fn ply_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ply");
        std::fs::write(&path, b"ply\nformat ascii 1.0\nelement vertex 1\nproperty double q\nend_header\n1\n").unwrap();
        assert!(read_ply(&path).is_err());
        std::fs::write(&path, b"not a ply").unwrap();
        assert!(read_ply(&path).is_err());
    }

    #[test]
    fn label_png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let labels: Vec<u16> = vec![0, 1, 2, VOID_CLASS, 40000, 5];
        let path = dir.path().join("seg.png");
        write_label_png(&path, &labels, 3, 2).unwrap();
        let (back, w, h) = read_label_png(&path).unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(back, labels);
    }
}
