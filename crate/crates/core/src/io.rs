//! File formats: BAL problems, a plain-text tracks format, COLMAP text
//! export and binary PLY point clouds.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Vector2, Vector3};
use thiserror::Error;

use crate::scene::{project, Camera, CameraModel, Observation, Point3D, Scene, SceneError};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("{what}: header declares {expected}, file has {got}")]
    CountMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("COLMAP export supports pinhole cameras only")]
    UnsupportedModel,
    #[error(transparent)]
    Scene(#[from] SceneError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(line: usize, reason: impl Into<String>) -> IoError {
    IoError::Parse {
        line,
        reason: reason.into(),
    }
}

/// Whitespace tokens tagged with their 1-based line numbers; text after `#`
/// is ignored.
struct Tokens<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
    current: std::str::SplitWhitespace<'a>,
    line: usize,
}

impl<'a> Tokens<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            lines: text.lines().enumerate(),
            current: "".split_whitespace(),
            line: 0,
        }
    }

    fn next_token(&mut self, what: &str) -> Result<(&'a str, usize), IoError> {
        loop {
            if let Some(tok) = self.current.next() {
                return Ok((tok, self.line));
            }
            match self.lines.next() {
                Some((i, l)) => {
                    self.line = i + 1;
                    let l = l.split('#').next().unwrap_or("");
                    self.current = l.split_whitespace();
                }
                None => {
                    return Err(parse_err(
                        self.line + 1,
                        format!("unexpected end of file, expected {what}"),
                    ))
                }
            }
        }
    }

    fn f64(&mut self, what: &str) -> Result<f64, IoError> {
        let (tok, line) = self.next_token(what)?;
        let v: f64 = tok
            .parse()
            .map_err(|_| parse_err(line, format!("invalid {what} '{tok}'")))?;
        if !v.is_finite() {
            return Err(parse_err(line, format!("non-finite {what}")));
        }
        Ok(v)
    }

    fn usize(&mut self, what: &str) -> Result<(usize, usize), IoError> {
        let (tok, line) = self.next_token(what)?;
        tok.parse()
            .map(|v| (v, line))
            .map_err(|_| parse_err(line, format!("invalid {what} '{tok}'")))
    }

    /// Remaining tokens on the current line.
    fn rest_of_line(&mut self) -> Vec<&'a str> {
        self.current.by_ref().collect()
    }

    fn expect_eof(&mut self) -> Result<(), IoError> {
        match self.next_token("") {
            Ok((tok, line)) => Err(parse_err(
                line,
                format!("unexpected trailing token '{tok}'"),
            )),
            Err(_) => Ok(()),
        }
    }
}

fn read_text(path: &Path) -> Result<String, IoError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut text = String::new();
    if path.extension().is_some_and(|e| e == "bz2") {
        bzip2::read::BzDecoder::new(BufReader::new(file))
            .read_to_string(&mut text)
            .map_err(io_err(path))?;
    } else {
        BufReader::new(file)
            .read_to_string(&mut text)
            .map_err(io_err(path))?;
    }
    Ok(text)
}

/// Reads a BAL problem (plain or `.bz2`). Poses are converted from
/// angle-axis/translation to quaternion/center form.
pub fn read_bal(path: &Path) -> Result<Scene, IoError> {
    parse_bal(&read_text(path)?)
}

pub fn parse_bal(text: &str) -> Result<Scene, IoError> {
    let mut t = Tokens::new(text);
    let (nc, _) = t.usize("camera count")?;
    let (np, _) = t.usize("point count")?;
    let (no, _) = t.usize("observation count")?;
    let mut observations = Vec::with_capacity(no);
    for _ in 0..no {
        let (camera, line) = t.usize("camera index")?;
        let (point, _) = t.usize("point index")?;
        let u = t.f64("u")?;
        let v = t.f64("v")?;
        if camera >= nc || point >= np {
            return Err(parse_err(line, "observation index out of range"));
        }
        observations.push(Observation {
            camera,
            point,
            pixel: Vector2::new(u, v),
            depth: None,
        });
    }
    let mut cameras = Vec::with_capacity(nc);
    for _ in 0..nc {
        let mut c = [0.0; 9];
        for v in &mut c {
            *v = t.f64("camera parameter")?;
        }
        let rotation = nalgebra::UnitQuaternion::from_scaled_axis(Vector3::new(c[0], c[1], c[2]));
        let translation = Vector3::new(c[3], c[4], c[5]);
        cameras.push(Camera {
            rotation,
            center: -(rotation.inverse() * translation),
            focal: c[6],
            principal_point: Vector2::zeros(),
            model: CameraModel::BalRadial,
            distortion: [c[7], c[8]],
        });
    }
    let mut points = Vec::with_capacity(np);
    for _ in 0..np {
        let x = t.f64("point coordinate")?;
        let y = t.f64("point coordinate")?;
        let z = t.f64("point coordinate")?;
        points.push(Point3D::new(x, y, z));
    }
    t.expect_eof()?;
    let scene = Scene {
        cameras,
        points,
        observations,
    };
    scene.validate()?;
    Ok(scene)
}

/// Reads a tracks file.
pub fn read_tracks(path: &Path) -> Result<Scene, IoError> {
    parse_tracks(&read_text(path)?)
}

pub fn parse_tracks(text: &str) -> Result<Scene, IoError> {
    let mut t = Tokens::new(text);
    let (nc, _) = t.usize("camera count")?;
    let (np, _) = t.usize("point count")?;
    let (no, _) = t.usize("observation count")?;

    let mut camera_ids = HashMap::with_capacity(nc);
    let mut cameras = Vec::with_capacity(nc);
    for index in 0..nc {
        let (id, line) = t.next_token("camera id")?;
        if camera_ids.insert(id, index).is_some() {
            return Err(parse_err(line, format!("duplicate camera id '{id}'")));
        }
        let mut v = [0.0; 10];
        for x in &mut v {
            *x = t.f64("camera field")?;
        }
        let extra = t.rest_of_line();
        let (model, distortion) = match extra.as_slice() {
            [] => (CameraModel::Pinhole, [0.0; 2]),
            [k1, k2] => {
                let p = |s: &str| {
                    s.parse::<f64>()
                        .map_err(|_| parse_err(line, format!("invalid distortion '{s}'")))
                };
                (CameraModel::BalRadial, [p(k1)?, p(k2)?])
            }
            _ => return Err(parse_err(line, "camera record needs 11 or 13 fields")),
        };
        let q = nalgebra::Quaternion::new(v[0], v[1], v[2], v[3]);
        let norm = q.norm();
        if norm < 1e-12 {
            return Err(parse_err(line, "zero quaternion"));
        }
        // Keep already-unit values bit-exact so files round-trip.
        let rotation = if (norm - 1.0).abs() < 1e-9 {
            nalgebra::UnitQuaternion::new_unchecked(q)
        } else {
            nalgebra::UnitQuaternion::from_quaternion(q)
        };
        cameras.push(Camera {
            rotation,
            center: Vector3::new(v[4], v[5], v[6]),
            focal: v[7],
            principal_point: Vector2::new(v[8], v[9]),
            model,
            distortion,
        });
    }

    let mut point_ids = HashMap::with_capacity(np);
    let mut points = Vec::with_capacity(np);
    for index in 0..np {
        let (id, line) = t.next_token("point id")?;
        if point_ids.insert(id, index).is_some() {
            return Err(parse_err(line, format!("duplicate point id '{id}'")));
        }
        let x = t.f64("point coordinate")?;
        let y = t.f64("point coordinate")?;
        let z = t.f64("point coordinate")?;
        if !t.rest_of_line().is_empty() {
            return Err(parse_err(line, "point record needs 4 fields"));
        }
        points.push(Point3D::new(x, y, z));
    }

    let mut observations = Vec::with_capacity(no);
    let mut with_depth = None;
    for _ in 0..no {
        let (cid, line) = t.next_token("observation camera id")?;
        let (pid, _) = t.next_token("observation point id")?;
        let camera = *camera_ids
            .get(cid)
            .ok_or_else(|| parse_err(line, format!("unknown camera id '{cid}'")))?;
        let point = *point_ids
            .get(pid)
            .ok_or_else(|| parse_err(line, format!("unknown point id '{pid}'")))?;
        let u = t.f64("u")?;
        let v = t.f64("v")?;
        let extra = t.rest_of_line();
        let depth = match extra.as_slice() {
            [] => None,
            [d] => Some(
                d.parse::<f64>()
                    .map_err(|_| parse_err(line, format!("invalid depth '{d}'")))?,
            ),
            _ => return Err(parse_err(line, "observation record needs 4 or 5 fields")),
        };
        match with_depth {
            None => with_depth = Some(depth.is_some()),
            Some(w) if w != depth.is_some() => {
                return Err(parse_err(
                    line,
                    "depth column must be all present or all absent",
                ))
            }
            _ => {}
        }
        observations.push(Observation {
            camera,
            point,
            pixel: Vector2::new(u, v),
            depth,
        });
    }
    t.expect_eof()?;
    let scene = Scene {
        cameras,
        points,
        observations,
    };
    scene.validate()?;
    Ok(scene)
}

/// Serializes a scene in the tracks format; scalars use shortest round-trip
/// formatting so reading back reproduces every value exactly.
pub fn format_tracks(scene: &Scene) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# cameras points observations");
    let _ = writeln!(
        s,
        "{} {} {}",
        scene.cameras.len(),
        scene.points.len(),
        scene.observations.len()
    );
    let _ = writeln!(s, "# id qw qx qy qz cx cy cz focal ppx ppy [k1 k2]");
    for (i, c) in scene.cameras.iter().enumerate() {
        let q = c.quaternion_wxyz();
        let _ = write!(
            s,
            "{i} {:?} {:?} {:?} {:?} {:?} {:?} {:?} {:?} {:?} {:?}",
            q[0],
            q[1],
            q[2],
            q[3],
            c.center.x,
            c.center.y,
            c.center.z,
            c.focal,
            c.principal_point.x,
            c.principal_point.y
        );
        if c.model == CameraModel::BalRadial {
            let _ = write!(s, " {:?} {:?}", c.distortion[0], c.distortion[1]);
        }
        s.push('\n');
    }
    let _ = writeln!(s, "# id x y z");
    for (j, p) in scene.points.iter().enumerate() {
        let _ = writeln!(
            s,
            "{j} {:?} {:?} {:?}",
            p.position.x, p.position.y, p.position.z
        );
    }
    let _ = writeln!(s, "# camera point u v [depth]");
    for o in &scene.observations {
        let _ = write!(
            s,
            "{} {} {:?} {:?}",
            o.camera, o.point, o.pixel.x, o.pixel.y
        );
        if let Some(d) = o.depth {
            let _ = write!(s, " {d:?}");
        }
        s.push('\n');
    }
    s
}

pub fn write_tracks(scene: &Scene, path: &Path) -> Result<(), IoError> {
    std::fs::write(path, format_tracks(scene)).map_err(io_err(path))
}

/// Reads a scene, choosing the format from the file name: `.tracks` files
/// use the tracks format, anything else (`.bal`, `.txt`, `.bz2`) is BAL.
pub fn read_scene(path: &Path) -> Result<Scene, IoError> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    if name.ends_with(".tracks") || name.ends_with(".tracks.bz2") {
        read_tracks(path)
    } else {
        read_bal(path)
    }
}

/// Writes `cameras.txt`, `images.txt` and `points3D.txt` into `dir`.
pub fn write_colmap_text(scene: &Scene, dir: &Path) -> Result<(), IoError> {
    if scene
        .cameras
        .iter()
        .any(|c| c.model != CameraModel::Pinhole)
    {
        return Err(IoError::UnsupportedModel);
    }
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;

    // Per-image 2D point lists in observation order.
    let mut per_image: Vec<Vec<usize>> = vec![Vec::new(); scene.cameras.len()];
    let mut point2d_index = vec![0usize; scene.observations.len()];
    for (k, o) in scene.observations.iter().enumerate() {
        point2d_index[k] = per_image[o.camera].len();
        per_image[o.camera].push(k);
    }

    let mut cams = String::new();
    cams.push_str("# Camera list with one line of data per camera:\n");
    cams.push_str("#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n");
    let _ = writeln!(cams, "# Number of cameras: {}", scene.cameras.len());
    for (i, c) in scene.cameras.iter().enumerate() {
        let mut half = [c.principal_point.x.abs(), c.principal_point.y.abs()];
        for &k in &per_image[i] {
            let d = scene.observations[k].pixel - c.principal_point;
            half[0] = half[0].max(d.x.abs());
            half[1] = half[1].max(d.y.abs());
        }
        let w = ((2.0 * half[0]).ceil() as u64).max(1);
        let h = ((2.0 * half[1]).ceil() as u64).max(1);
        let _ = writeln!(
            cams,
            "{} SIMPLE_PINHOLE {w} {h} {:?} {:?} {:?}",
            i + 1,
            c.focal,
            c.principal_point.x,
            c.principal_point.y
        );
    }

    let mut images = String::new();
    images.push_str("# Image list with two lines of data per image:\n");
    images.push_str("#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n");
    images.push_str("#   POINTS2D[] as (X, Y, POINT3D_ID)\n");
    let mean_obs = if scene.cameras.is_empty() {
        0.0
    } else {
        scene.observations.len() as f64 / scene.cameras.len() as f64
    };
    let _ = writeln!(
        images,
        "# Number of images: {}, mean observations per image: {mean_obs}",
        scene.cameras.len()
    );
    for (i, c) in scene.cameras.iter().enumerate() {
        let q = c.quaternion_wxyz();
        let t = c.translation();
        let _ = writeln!(
            images,
            "{} {:?} {:?} {:?} {:?} {:?} {:?} {:?} {} image_{:05}.png",
            i + 1,
            q[0],
            q[1],
            q[2],
            q[3],
            t.x,
            t.y,
            t.z,
            i + 1,
            i + 1
        );
        let row: Vec<String> = per_image[i]
            .iter()
            .map(|&k| {
                let o = &scene.observations[k];
                format!("{:?} {:?} {}", o.pixel.x, o.pixel.y, o.point + 1)
            })
            .collect();
        images.push_str(&row.join(" "));
        images.push('\n');
    }

    let mut tracks: Vec<Vec<usize>> = vec![Vec::new(); scene.points.len()];
    for (k, o) in scene.observations.iter().enumerate() {
        tracks[o.point].push(k);
    }
    let mut pts = String::new();
    pts.push_str("# 3D point list with one line of data per point:\n");
    pts.push_str("#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n");
    let mean_track = if scene.points.is_empty() {
        0.0
    } else {
        scene.observations.len() as f64 / scene.points.len() as f64
    };
    let _ = writeln!(
        pts,
        "# Number of points: {}, mean track length: {mean_track}",
        scene.points.len()
    );
    for (j, p) in scene.points.iter().enumerate() {
        let mut err = 0.0;
        for &k in &tracks[j] {
            let o = &scene.observations[k];
            if let Ok(uv) = project(&scene.cameras[o.camera], p) {
                err += (uv - o.pixel).norm();
            }
        }
        if !tracks[j].is_empty() {
            err /= tracks[j].len() as f64;
        }
        let _ = write!(
            pts,
            "{} {:?} {:?} {:?} 128 128 128 {err:?}",
            j + 1,
            p.position.x,
            p.position.y,
            p.position.z
        );
        for &k in &tracks[j] {
            let _ = write!(
                pts,
                " {} {}",
                scene.observations[k].camera + 1,
                point2d_index[k]
            );
        }
        pts.push('\n');
    }

    for (name, body) in [
        ("cameras.txt", cams),
        ("images.txt", images),
        ("points3D.txt", pts),
    ] {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(io_err(&path))?;
    }
    Ok(())
}

/// Writes a binary little-endian PLY with float32 coordinates and optional
/// 8-bit colors.
pub fn write_ply(
    points: &[Vector3<f64>],
    colors: Option<&[[u8; 3]]>,
    path: &Path,
) -> Result<(), IoError> {
    if let Some(c) = colors {
        if c.len() != points.len() {
            return Err(IoError::CountMismatch {
                what: "colors",
                expected: points.len(),
                got: c.len(),
            });
        }
    }
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let mut header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n",
        points.len()
    );
    if colors.is_some() {
        header.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    header.push_str("end_header\n");
    let write = |w: &mut BufWriter<File>, bytes: &[u8]| w.write_all(bytes).map_err(io_err(path));
    write(&mut w, header.as_bytes())?;
    for (k, p) in points.iter().enumerate() {
        for v in p.iter() {
            write(&mut w, &(*v as f32).to_le_bytes())?;
        }
        if let Some(c) = colors {
            write(&mut w, &c[k])?;
        }
    }
    w.flush().map_err(io_err(path))
}

/// Point positions of a scene, for [`write_ply`].
pub fn scene_points(scene: &Scene) -> Vec<Vector3<f64>> {
    scene.points.iter().map(|p| p.position).collect()
}
