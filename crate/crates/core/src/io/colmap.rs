//! COLMAP sparse model in text form (`cameras.txt`, `images.txt`, `points3D.txt`).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::scene::{quat_to_matrix, Camera};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CameraModel {
    SimplePinhole { f: f64, cx: f64, cy: f64 },
    Pinhole { fx: f64, fy: f64, cx: f64, cy: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColmapCamera {
    pub id: u32,
    pub width: usize,
    pub height: usize,
    pub model: CameraModel,
}

impl ColmapCamera {
    /// `(fx, fy, cx, cy)`.
    pub fn intrinsics(&self) -> (f64, f64, f64, f64) {
        match self.model {
            CameraModel::SimplePinhole { f, cx, cy } => (f, f, cx, cy),
            CameraModel::Pinhole { fx, fy, cx, cy } => (fx, fy, cx, cy),
        }
    }
}

/// One registered image: world-to-camera pose and its 2D observations.
#[derive(Debug, Clone, PartialEq)]
pub struct ColmapImage {
    pub id: u32,
    /// `(qw, qx, qy, qz)`, unit norm.
    pub qvec: [f64; 4],
    pub tvec: [f64; 3],
    pub camera_id: u32,
    pub name: String,
    /// `(x, y, point3d_id)`; `-1` marks an untriangulated observation.
    pub points2d: Vec<(f64, f64, i64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColmapPoint {
    pub id: u64,
    pub xyz: [f64; 3],
    pub rgb: [u8; 3],
    pub error: f64,
    /// `(image_id, point2d_index)`.
    pub track: Vec<(u32, u32)>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ColmapModel {
    pub cameras: BTreeMap<u32, ColmapCamera>,
    pub images: Vec<ColmapImage>,
    pub points: Vec<ColmapPoint>,
}

impl ColmapModel {
    /// Pinhole camera of an image record.
    pub fn camera_for(&self, image: &ColmapImage) -> Result<Camera> {
        let cam = self.cameras.get(&image.camera_id).ok_or_else(|| {
            Error::ContractViolation(format!("image {} references missing camera {}", image.name, image.camera_id))
        })?;
        let (fx, fy, cx, cy) = cam.intrinsics();
        let rotation = quat_to_matrix(image.qvec)
            .ok_or_else(|| Error::Argument(format!("image {} has a zero quaternion", image.name)))?;
        Camera::new(cam.width, cam.height, fx, fy, cx, cy, rotation, Vector3::from(image.tvec))
    }
}

/// Unit quaternion `(w, x, y, z)` with `w >= 0` of a rotation matrix.
pub fn matrix_to_quat(r: &Matrix3<f64>) -> [f64; 4] {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r));
    let v = [q.w, q.i, q.j, q.k];
    if v[0] < 0.0 {
        v.map(|c| -c)
    } else {
        v
    }
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.starts_with('#'))
}

fn field<T: std::str::FromStr>(tok: Option<&str>, what: &str, path: &Path, line: usize) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    let s = tok.ok_or_else(|| Error::parse(path, line, format!("missing {what}")))?;
    s.parse::<T>().map_err(|e| Error::parse(path, line, format!("bad {what} `{s}`: {e}")))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_cameras(text: &str, path: &Path) -> Result<BTreeMap<u32, ColmapCamera>> {
    let mut out = BTreeMap::new();
    for (ln, line) in data_lines(text) {
        if line.is_empty() {
            continue;
        }
        let mut t = line.split_whitespace();
        let id: u32 = field(t.next(), "camera id", path, ln)?;
        let model_name: String = field(t.next(), "camera model", path, ln)?;
        let width: usize = field(t.next(), "width", path, ln)?;
        let height: usize = field(t.next(), "height", path, ln)?;
        let params: Vec<f64> = t
            .map(|s| s.parse::<f64>().map_err(|e| Error::parse(path, ln, format!("bad parameter `{s}`: {e}"))))
            .collect::<Result<_>>()?;
        let model = match (model_name.as_str(), params.as_slice()) {
            ("SIMPLE_PINHOLE", &[f, cx, cy]) => CameraModel::SimplePinhole { f, cx, cy },
            ("PINHOLE", &[fx, fy, cx, cy]) => CameraModel::Pinhole { fx, fy, cx, cy },
            ("SIMPLE_PINHOLE" | "PINHOLE", p) => {
                return Err(Error::parse(path, ln, format!("{model_name} with {} parameters", p.len())))
            }
            _ => return Err(Error::UnsupportedCameraModel(model_name)),
        };
        out.insert(
            id,
            ColmapCamera {
                id,
                width,
                height,
                model,
            },
        );
    }
    Ok(out)
}

fn parse_images(text: &str, path: &Path) -> Result<Vec<ColmapImage>> {
    let mut out = Vec::new();
    // Pose lines and observation lines alternate; an observation line may be empty.
    let lines: Vec<(usize, &str)> = data_lines(text).collect();
    let mut i = 0;
    while i < lines.len() {
        let (ln, line) = lines[i];
        if line.is_empty() {
            i += 1;
            continue;
        }
        let mut t = line.split_whitespace();
        let id: u32 = field(t.next(), "image id", path, ln)?;
        let mut q = [0.0; 4];
        for (k, name) in ["QW", "QX", "QY", "QZ"].iter().enumerate() {
            q[k] = field(t.next(), name, path, ln)?;
        }
        let mut tv = [0.0; 3];
        for (k, name) in ["TX", "TY", "TZ"].iter().enumerate() {
            tv[k] = field(t.next(), name, path, ln)?;
        }
        let camera_id: u32 = field(t.next(), "camera id", path, ln)?;
        let name: String = field(t.next(), "image name", path, ln)?;
        let n = (q.iter().map(|v| v * v).sum::<f64>()).sqrt();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::parse(path, ln, "quaternion has zero norm"));
        }
        let qvec = q.map(|v| v / n);

        let mut points2d = Vec::new();
        if let Some(&(pln, pline)) = lines.get(i + 1) {
            let toks: Vec<&str> = pline.split_whitespace().collect();
            if toks.len() % 3 != 0 {
                return Err(Error::parse(path, pln, "observation list is not a multiple of 3 fields"));
            }
            for c in toks.chunks(3) {
                points2d.push((
                    field(Some(c[0]), "x", path, pln)?,
                    field(Some(c[1]), "y", path, pln)?,
                    field(Some(c[2]), "point id", path, pln)?,
                ));
            }
        }
        out.push(ColmapImage {
            id,
            qvec,
            tvec: tv,
            camera_id,
            name,
            points2d,
        });
        i += 2;
    }
    Ok(out)
}

fn parse_points(text: &str, path: &Path) -> Result<Vec<ColmapPoint>> {
    let mut out = Vec::new();
    for (ln, line) in data_lines(text) {
        if line.is_empty() {
            continue;
        }
        let mut t = line.split_whitespace();
        let id: u64 = field(t.next(), "point id", path, ln)?;
        let xyz = [
            field(t.next(), "X", path, ln)?,
            field(t.next(), "Y", path, ln)?,
            field(t.next(), "Z", path, ln)?,
        ];
        let rgb = [
            field(t.next(), "R", path, ln)?,
            field(t.next(), "G", path, ln)?,
            field(t.next(), "B", path, ln)?,
        ];
        let error: f64 = field(t.next(), "error", path, ln)?;
        let rest: Vec<&str> = t.collect();
        if rest.len() % 2 != 0 {
            return Err(Error::parse(path, ln, "track has an odd number of fields"));
        }
        let track = rest
            .chunks(2)
            .map(|c| Ok((field(Some(c[0]), "image id", path, ln)?, field(Some(c[1]), "point2d index", path, ln)?)))
            .collect::<Result<_>>()?;
        out.push(ColmapPoint {
            id,
            xyz,
            rgb,
            error,
            track,
        });
    }
    Ok(out)
}

/// Reads `cameras.txt`, `images.txt` and `points3D.txt` from `dir`.
pub fn read_colmap_text(dir: &Path) -> Result<ColmapModel> {
    let cp = dir.join("cameras.txt");
    let ip = dir.join("images.txt");
    let pp = dir.join("points3D.txt");
    let cameras = parse_cameras(&read_text(&cp)?, &cp)?;
    let images = parse_images(&read_text(&ip)?, &ip)?;
    let points = parse_points(&read_text(&pp)?, &pp)?;
    for img in &images {
        if !cameras.contains_key(&img.camera_id) {
            return Err(Error::ContractViolation(format!(
                "image {} references missing camera {}",
                img.name, img.camera_id
            )));
        }
    }
    Ok(ColmapModel {
        cameras,
        images,
        points,
    })
}

/// Writes the model as COLMAP text; floats use the shortest exact representation.
pub fn write_colmap_text(model: &ColmapModel, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut cams = String::from("# Camera list with one line of data per camera:\n#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n");
    for c in model.cameras.values() {
        match c.model {
            CameraModel::SimplePinhole { f, cx, cy } => {
                writeln!(cams, "{} SIMPLE_PINHOLE {} {} {f:?} {cx:?} {cy:?}", c.id, c.width, c.height)
            }
            CameraModel::Pinhole { fx, fy, cx, cy } => {
                writeln!(cams, "{} PINHOLE {} {} {fx:?} {fy:?} {cx:?} {cy:?}", c.id, c.width, c.height)
            }
        }
        .expect("writing to a String cannot fail");
    }
    let mut imgs = String::from(
        "# Image list with two lines of data per image:\n#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n#   POINTS2D[] as (X, Y, POINT3D_ID)\n",
    );
    for im in &model.images {
        let [qw, qx, qy, qz] = im.qvec;
        let [tx, ty, tz] = im.tvec;
        let _ = writeln!(imgs, "{} {qw:?} {qx:?} {qy:?} {qz:?} {tx:?} {ty:?} {tz:?} {} {}", im.id, im.camera_id, im.name);
        let obs: Vec<String> = im.points2d.iter().map(|(x, y, p)| format!("{x:?} {y:?} {p}")).collect();
        let _ = writeln!(imgs, "{}", obs.join(" "));
    }
    let mut pts = String::from("# 3D point list with one line of data per point:\n#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n");
    for p in &model.points {
        let [x, y, z] = p.xyz;
        let [r, g, b] = p.rgb;
        let mut line = format!("{} {x:?} {y:?} {z:?} {r} {g} {b} {:?}", p.id, p.error);
        for (i, k) in &p.track {
            let _ = write!(line, " {i} {k}");
        }
        let _ = writeln!(pts, "{line}");
    }
    for (name, body) in [("cameras.txt", cams), ("images.txt", imgs), ("points3D.txt", pts)] {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
