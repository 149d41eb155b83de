//! Posed RGB-D frame sets on disk.
//!
//! A scene directory holds `intrinsics.txt` (`fx fy cx cy [depth_scale]`),
//! per-frame files `rgb/NNNN.png` (8-bit color), `depth/NNNN.png` (16-bit,
//! `value = meters * depth_scale`, 0 marks invalid), `pose/NNNN.txt`
//! (16 row-major floats, camera-to-world) and optionally `feat/NNNN.ofm`
//! (per-pixel feature maps), `prompts.json` (class labels with unit text
//! embeddings) and `bounds.txt` (axis-aligned scene box). Loading a written
//! set reproduces every sample bit for bit.
//!
//! The camera convention: right-handed, x right, y down, z forward. The
//! ray of pixel `(u, v)` leaves the origin along
//! `((u + 0.5 - cx) / fx, (v + 0.5 - cy) / fy, 1)` in camera coordinates,
//! and the stored depth is the z coordinate of the surface point, not the
//! Euclidean distance.

pub mod synthetic;

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Matrix4, Vector3};

use crate::error::{Error, Result};
use crate::grid_field::SceneBounds;
use crate::scp_fusion::ClassPrompts;

/// Magic prefix of feature-map files.
pub const FEATURE_MAGIC: &[u8; 4] = b"OFM1";

/// Pinhole intrinsics plus the depth quantization scale.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Stored depth value per meter; 10000 gives 0.1 mm steps.
    pub depth_scale: f64,
}

impl Intrinsics {
    /// The camera-frame direction of pixel `(u, v)`, z component 1.
    pub fn pixel_dir(&self, u: usize, v: usize) -> Vector3<f64> {
        Vector3::new(
            (u as f64 + 0.5 - self.cx) / self.fx,
            (v as f64 + 0.5 - self.cy) / self.fy,
            1.0,
        )
    }
}

/// World-space ray of one pixel: origin, unit direction, and the factor
/// that turns a z-depth into a distance along that unit direction.
pub fn camera_ray(
    intr: &Intrinsics,
    pose: &Matrix4<f64>,
    u: usize,
    v: usize,
) -> (Vector3<f64>, Vector3<f64>, f64) {
    let d_cam = intr.pixel_dir(u, v);
    let scale = d_cam.norm();
    let r = pose.fixed_view::<3, 3>(0, 0);
    let origin = Vector3::new(pose[(0, 3)], pose[(1, 3)], pose[(2, 3)]);
    let d_world = r * d_cam;
    (origin, d_world / scale, scale)
}

/// Projects a world point through an inverted pose (world-to-camera) into
/// pixel coordinates. Returns `(u, v, z)` when the point lies in front of
/// the camera and inside the image.
pub fn project_into(
    intr: &Intrinsics,
    world_to_cam: &Matrix4<f64>,
    p: &Vector3<f64>,
) -> Option<(usize, usize, f64)> {
    let q = world_to_cam.fixed_view::<3, 3>(0, 0) * p
        + Vector3::new(world_to_cam[(0, 3)], world_to_cam[(1, 3)], world_to_cam[(2, 3)]);
    if q.z <= 1e-9 {
        return None;
    }
    let uf = intr.fx * q.x / q.z + intr.cx - 0.5;
    let vf = intr.fy * q.y / q.z + intr.cy - 0.5;
    let u = uf.round();
    let v = vf.round();
    if u < 0.0 || v < 0.0 || u >= intr.width as f64 || v >= intr.height as f64 {
        return None;
    }
    Some((u as usize, v as usize, q.z))
}

/// A dense per-pixel feature image, possibly at a lower resolution than the
/// color image it belongs to.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    /// Row-major, pixel-major, `height * width * dim` values.
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, dim: usize) -> Self {
        FeatureMap { height, width, dim, data: vec![0.0; height * width * dim] }
    }

    pub fn row(&self, u: usize, v: usize) -> &[f32] {
        let i = (v * self.width + u) * self.dim;
        &self.data[i..i + self.dim]
    }

    pub fn row_mut(&mut self, u: usize, v: usize) -> &mut [f32] {
        let i = (v * self.width + u) * self.dim;
        &mut self.data[i..i + self.dim]
    }

    /// Feature of image pixel `(u, v)` in an `img_w` × `img_h` image:
    /// bilinear across the map followed by renormalization. Rows that
    /// interpolate to (near) zero are returned as zeros.
    pub fn sample_pixel(&self, u: usize, v: usize, img_w: usize, img_h: usize, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim);
        let x = (u as f64 + 0.5) / img_w as f64 * self.width as f64 - 0.5;
        let y = (v as f64 + 0.5) / img_h as f64 * self.height as f64 - 0.5;
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = (x.floor() as usize).min(self.width.saturating_sub(2));
        let y0 = (y.floor() as usize).min(self.height.saturating_sub(2));
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        out.fill(0.0);
        for (w, (uu, vv)) in [
            ((1.0 - fx) * (1.0 - fy), (x0, y0)),
            (fx * (1.0 - fy), (x1, y0)),
            ((1.0 - fx) * fy, (x0, y1)),
            (fx * fy, (x1, y1)),
        ] {
            if w == 0.0 {
                continue;
            }
            for (o, s) in out.iter_mut().zip(self.row(uu, vv)) {
                *o += w * *s as f64;
            }
        }
        let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            for o in out.iter_mut() {
                *o /= norm;
            }
        } else {
            out.fill(0.0);
        }
    }
}

/// One posed RGB-D frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    /// `width * height * 3` bytes, row-major.
    pub rgb: Vec<u8>,
    /// `width * height` quantized depths, 0 marks invalid.
    pub depth: Vec<u16>,
    /// Camera-to-world transform.
    pub pose: Matrix4<f64>,
    pub feature: Option<FeatureMap>,
}

impl Frame {
    /// Color of pixel `(u, v)` scaled to `[0, 1]`.
    pub fn rgb_at(&self, u: usize, v: usize, width: usize) -> [f64; 3] {
        let i = (v * width + u) * 3;
        [
            self.rgb[i] as f64 / 255.0,
            self.rgb[i + 1] as f64 / 255.0,
            self.rgb[i + 2] as f64 / 255.0,
        ]
    }

    /// Metric depth of pixel `(u, v)`, `None` where the sensor had no
    /// return.
    pub fn depth_at(&self, u: usize, v: usize, width: usize, depth_scale: f64) -> Option<f64> {
        let raw = self.depth[v * width + u];
        if raw == 0 {
            None
        } else {
            Some(raw as f64 / depth_scale)
        }
    }
}

/// A full posed frame set with optional class prompts and scene bounds.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSet {
    pub intrinsics: Intrinsics,
    pub frames: Vec<Frame>,
    pub prompts: Option<ClassPrompts>,
    pub bounds: Option<SceneBounds>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct PromptEntry {
    label: String,
    embedding: Vec<f64>,
}

/// Writes class prompts as a JSON array of `{label, embedding}` objects.
pub fn write_prompts(path: &Path, prompts: &ClassPrompts) -> Result<()> {
    let entries: Vec<PromptEntry> = (0..prompts.k())
        .map(|k| PromptEntry {
            label: prompts.labels[k].clone(),
            embedding: prompts.embedding(k).to_vec(),
        })
        .collect();
    let mut f = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut f, &entries)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

/// Reads class prompts written by [`write_prompts`].
pub fn read_prompts(path: &Path) -> Result<ClassPrompts> {
    let entries: Vec<PromptEntry> =
        serde_json::from_reader(BufReader::new(fs::File::open(path)?))?;
    if entries.is_empty() {
        return Err(Error::format("prompts", "no classes"));
    }
    let dim = entries[0].embedding.len();
    let mut labels = Vec::with_capacity(entries.len());
    let mut flat = Vec::with_capacity(entries.len() * dim);
    for e in entries {
        if e.embedding.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: e.embedding.len() });
        }
        labels.push(e.label);
        flat.extend_from_slice(&e.embedding);
    }
    ClassPrompts::new(labels, flat, dim)
}

fn parse_floats(path: &Path, what: &'static str) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path)?;
    text.split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|e| Error::format(what, format!("bad number {t:?}: {e}"))))
        .collect()
}

fn frame_name(i: usize) -> String {
    format!("{i:04}")
}

/// Writes a feature map in the `OFM1` layout: magic, three u32 (height,
/// width, dim), then little-endian f32 samples.
pub fn write_feature_map(path: &Path, map: &FeatureMap) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(FEATURE_MAGIC)?;
    for v in [map.height as u32, map.width as u32, map.dim as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    for v in &map.data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_feature_map(path: &Path) -> Result<FeatureMap> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != FEATURE_MAGIC {
        return Err(Error::format("feature map", "bad magic"));
    }
    let mut buf4 = [0u8; 4];
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        r.read_exact(&mut buf4)?;
        *d = u32::from_le_bytes(buf4) as usize;
    }
    let [height, width, dim] = dims;
    let count = height
        .checked_mul(width)
        .and_then(|n| n.checked_mul(dim))
        .ok_or_else(|| Error::format("feature map", "dimension overflow"))?;
    let mut data = vec![0f32; count];
    for v in data.iter_mut() {
        r.read_exact(&mut buf4)?;
        *v = f32::from_le_bytes(buf4);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::format("feature map", "trailing bytes"));
    }
    Ok(FeatureMap { height, width, dim, data })
}

/// Writes a frame set into `dir`, creating the directory layout.
pub fn write_frameset(dir: &Path, set: &FrameSet) -> Result<()> {
    let intr = &set.intrinsics;
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join("intrinsics.txt"),
        format!("{} {} {} {} {}\n", intr.fx, intr.fy, intr.cx, intr.cy, intr.depth_scale),
    )?;
    if let Some(b) = &set.bounds {
        fs::write(
            dir.join("bounds.txt"),
            format!("{} {} {} {} {} {}\n", b.min.x, b.min.y, b.min.z, b.max.x, b.max.y, b.max.z),
        )?;
    }
    if let Some(p) = &set.prompts {
        write_prompts(&dir.join("prompts.json"), p)?;
    }
    for sub in ["rgb", "depth", "pose"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    if set.frames.iter().any(|f| f.feature.is_some()) {
        fs::create_dir_all(dir.join("feat"))?;
    }
    for (i, frame) in set.frames.iter().enumerate() {
        let name = frame_name(i);
        let expected = intr.width * intr.height;
        if frame.rgb.len() != expected * 3 {
            return Err(Error::DimensionMismatch { expected: expected * 3, got: frame.rgb.len() });
        }
        if frame.depth.len() != expected {
            return Err(Error::DimensionMismatch { expected, got: frame.depth.len() });
        }
        let rgb = image::RgbImage::from_raw(intr.width as u32, intr.height as u32, frame.rgb.clone())
            .expect("sized above");
        rgb.save(dir.join("rgb").join(format!("{name}.png")))?;
        let depth = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(
            intr.width as u32,
            intr.height as u32,
            frame.depth.clone(),
        )
        .expect("sized above");
        depth.save(dir.join("depth").join(format!("{name}.png")))?;
        let mut text = String::new();
        for r in 0..4 {
            for c in 0..4 {
                if c > 0 {
                    text.push(' ');
                }
                text.push_str(&frame.pose[(r, c)].to_string());
            }
            text.push('\n');
        }
        fs::write(dir.join("pose").join(format!("{name}.txt")), text)?;
        if let Some(map) = &frame.feature {
            write_feature_map(&dir.join("feat").join(format!("{name}.ofm")), map)?;
        }
    }
    Ok(())
}

/// Loads a frame set written in the directory layout of
/// [`write_frameset`]. Frames are read in index order until the first
/// missing pose file.
pub fn load_frameset(dir: &Path) -> Result<FrameSet> {
    let nums = parse_floats(&dir.join("intrinsics.txt"), "intrinsics")?;
    if nums.len() != 4 && nums.len() != 5 {
        return Err(Error::format("intrinsics", format!("expected 4 or 5 numbers, got {}", nums.len())));
    }
    let depth_scale = if nums.len() == 5 { nums[4] } else { 1000.0 };
    if !(depth_scale > 0.0) {
        return Err(Error::format("intrinsics", format!("bad depth scale {depth_scale}")));
    }

    let bounds = if dir.join("bounds.txt").exists() {
        let v = parse_floats(&dir.join("bounds.txt"), "bounds")?;
        if v.len() != 6 {
            return Err(Error::format("bounds", format!("expected 6 numbers, got {}", v.len())));
        }
        Some(SceneBounds::new(Vector3::new(v[0], v[1], v[2]), Vector3::new(v[3], v[4], v[5]))?)
    } else {
        None
    };

    let prompts = if dir.join("prompts.json").exists() {
        Some(read_prompts(&dir.join("prompts.json"))?)
    } else {
        None
    };

    let mut frames = Vec::new();
    let mut size: Option<(usize, usize)> = None;
    loop {
        let name = frame_name(frames.len());
        let pose_path = dir.join("pose").join(format!("{name}.txt"));
        if !pose_path.exists() {
            break;
        }
        let nums = parse_floats(&pose_path, "pose")?;
        if nums.len() != 16 {
            return Err(Error::format("pose", format!("{name}: expected 16 numbers, got {}", nums.len())));
        }
        let pose = Matrix4::from_row_slice(&nums);
        let det = pose.fixed_view::<3, 3>(0, 0).determinant();
        if (det - 1.0).abs() > 1e-4 {
            return Err(Error::format("pose", format!("{name}: rotation determinant {det}")));
        }

        let rgb_img = image::open(dir.join("rgb").join(format!("{name}.png")))?.into_rgb8();
        let (w, h) = (rgb_img.width() as usize, rgb_img.height() as usize);
        match size {
            None => size = Some((w, h)),
            Some(s) if s != (w, h) => {
                return Err(Error::format("rgb", format!("{name}: size {w}x{h} differs from {s:?}")))
            }
            _ => {}
        }

        let depth_img = image::open(dir.join("depth").join(format!("{name}.png")))?;
        let depth_img = match depth_img {
            image::DynamicImage::ImageLuma16(i) => i,
            other => {
                let _ = other;
                return Err(Error::format("depth", format!("{name}: not 16-bit grayscale")));
            }
        };
        if (depth_img.width() as usize, depth_img.height() as usize) != (w, h) {
            return Err(Error::format("depth", format!("{name}: size differs from rgb")));
        }

        let feat_path = dir.join("feat").join(format!("{name}.ofm"));
        let feature = if feat_path.exists() { Some(read_feature_map(&feat_path)?) } else { None };

        frames.push(Frame {
            rgb: rgb_img.into_raw(),
            depth: depth_img.into_raw(),
            pose,
            feature,
        });
    }
    if frames.is_empty() {
        return Err(Error::format("frames", format!("no pose/0000.txt under {}", dir.display())));
    }
    let (width, height) = size.expect("at least one frame");
    Ok(FrameSet {
        intrinsics: Intrinsics {
            fx: nums[0],
            fy: nums[1],
            cx: nums[2],
            cy: nums[3],
            width,
            height,
            depth_scale,
        },
        frames,
        prompts,
        bounds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ring_pose(yaw: f64) -> Matrix4<f64> {
        synthetic::look_pose(
            &Vector3::new(2.0, 2.0, 1.5),
            &Vector3::new(yaw.cos(), yaw.sin(), -0.2).normalize(),
        )
    }

    fn tiny_set(with_feat: bool, seed: u64) -> FrameSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (8usize, 6usize);
        let intr = Intrinsics {
            fx: 7.0,
            fy: 7.5,
            cx: 4.0,
            cy: 3.0,
            width: w,
            height: h,
            depth_scale: 10000.0,
        };
        let frames = (0..3)
            .map(|i| {
                let feature = with_feat.then(|| {
                    let mut map = FeatureMap::new(h, w, 4);
                    for v in map.data.iter_mut() {
                        *v = rng.random_range(-1.0f32..1.0);
                    }
                    map
                });
                Frame {
                    rgb: (0..w * h * 3).map(|_| rng.random_range(0..=255u8)).collect(),
                    depth: (0..w * h).map(|_| rng.random_range(0..30000u16)).collect(),
                    pose: ring_pose(i as f64),
                    feature,
                }
            })
            .collect();
        FrameSet {
            intrinsics: intr,
            frames,
            prompts: Some(
                ClassPrompts::new(
                    vec!["wall".into(), "floor".into()],
                    vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0],
                    4,
                )
                .unwrap(),
            ),
            bounds: Some(
                SceneBounds::new(Vector3::new(-0.25, -0.25, -0.25), Vector3::new(4.25, 4.25, 3.25))
                    .unwrap(),
            ),
        }
    }

    #[test]
    fn frameset_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let set = tiny_set(true, 7);
        write_frameset(dir.path(), &set).unwrap();
        let loaded = load_frameset(dir.path()).unwrap();
        assert_eq!(set, loaded);

        // Writing the loaded set again produces identical files.
        let dir2 = tempfile::tempdir().unwrap();
        write_frameset(dir2.path(), &loaded).unwrap();
        for sub in ["rgb/0001.png", "depth/0002.png", "pose/0000.txt", "feat/0001.ofm", "intrinsics.txt", "prompts.json", "bounds.txt"] {
            let a = std::fs::read(dir.path().join(sub)).unwrap();
            let b = std::fs::read(dir2.path().join(sub)).unwrap();
            assert_eq!(a, b, "{sub} differs");
        }
    }

    #[test]
    fn optional_files_can_be_absent() {
        let dir = tempfile::tempdir().unwrap();
        let mut set = tiny_set(false, 9);
        set.prompts = None;
        set.bounds = None;
        write_frameset(dir.path(), &set).unwrap();
        let loaded = load_frameset(dir.path()).unwrap();
        assert!(loaded.prompts.is_none());
        assert!(loaded.bounds.is_none());
        assert!(loaded.frames[0].feature.is_none());
        assert_eq!(loaded.frames.len(), 3);
    }

    #[test]
    fn depth_scale_defaults_to_a_millimeter() {
        let dir = tempfile::tempdir().unwrap();
        let set = tiny_set(false, 11);
        write_frameset(dir.path(), &set).unwrap();
        std::fs::write(dir.path().join("intrinsics.txt"), "7 7.5 4 3\n").unwrap();
        let loaded = load_frameset(dir.path()).unwrap();
        assert_eq!(loaded.intrinsics.depth_scale, 1000.0);
    }

    #[test]
    fn back_projection_matches_depth_within_a_tenth_millimeter() {
        // A stored depth, read back and pushed through the pixel ray, must
        // land on a point whose camera z equals the depth to 1e-4 m.
        let set = tiny_set(false, 13);
        let intr = &set.intrinsics;
        for (fi, frame) in set.frames.iter().enumerate() {
            let w2c = frame.pose.try_inverse().unwrap();
            for v in 0..intr.height {
                for u in 0..intr.width {
                    let Some(z) = frame.depth_at(u, v, intr.width, intr.depth_scale) else {
                        continue;
                    };
                    let (o, d, scale) = camera_ray(intr, &frame.pose, u, v);
                    let p = o + d * (z * scale);
                    let q = w2c.fixed_view::<3, 3>(0, 0) * p
                        + Vector3::new(w2c[(0, 3)], w2c[(1, 3)], w2c[(2, 3)]);
                    assert!((q.z - z).abs() < 1e-4, "frame {fi} pixel ({u},{v}): {} vs {z}", q.z);
                    // And the projection helper inverts the ray.
                    let (pu, pv, pz) = project_into(intr, &w2c, &p).unwrap();
                    assert_eq!((pu, pv), (u, v));
                    assert_relative_eq!(pz, z, epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn feature_map_sampling_interpolates_and_renormalizes() {
        let mut map = FeatureMap::new(2, 2, 2);
        map.row_mut(0, 0).copy_from_slice(&[1.0, 0.0]);
        map.row_mut(1, 0).copy_from_slice(&[0.0, 1.0]);
        map.row_mut(0, 1).copy_from_slice(&[1.0, 0.0]);
        map.row_mut(1, 1).copy_from_slice(&[0.0, 1.0]);
        let mut out = vec![0.0; 2];
        // Image twice the map size: pixel (0,0) maps to map coordinate 0
        // exactly, no blending.
        map.sample_pixel(0, 0, 4, 4, &mut out);
        assert_relative_eq!(out[0], 1.0);
        // Image pixel (1,1) lands at map coordinate 0.25: a 3:1 blend of
        // the two columns, renormalized from [0.75, 0.25].
        map.sample_pixel(1, 1, 4, 4, &mut out);
        assert_relative_eq!(out[0], 3.0 / 10.0f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(out[1], 1.0 / 10.0f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(out.iter().map(|x| x * x).sum::<f64>().sqrt(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn feature_map_zero_region_stays_zero() {
        let map = FeatureMap::new(2, 2, 3);
        let mut out = vec![1.0; 3];
        map.sample_pixel(0, 0, 2, 2, &mut out);
        assert_eq!(out, vec![0.0; 3]);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let set = tiny_set(false, 17);
        write_frameset(dir.path(), &set).unwrap();

        std::fs::write(dir.path().join("intrinsics.txt"), "1 2 3\n").unwrap();
        assert!(load_frameset(dir.path()).is_err());
        std::fs::write(dir.path().join("intrinsics.txt"), "7 7.5 4 3 10000\n").unwrap();

        std::fs::write(dir.path().join("pose").join("0001.txt"), "1 2 3 4\n").unwrap();
        assert!(load_frameset(dir.path()).is_err());
    }

    #[test]
    fn feature_map_roundtrip_and_magic_check() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut map = FeatureMap::new(3, 5, 7);
        for v in map.data.iter_mut() {
            *v = rng.random_range(-2.0f32..2.0);
        }
        let path = dir.path().join("m.ofm");
        write_feature_map(&path, &map).unwrap();
        let back = read_feature_map(&path).unwrap();
        assert_eq!(map, back);

        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(read_feature_map(&path).is_err());
    }
}
