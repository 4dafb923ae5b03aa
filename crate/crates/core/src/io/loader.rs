//! Scene directory ingestion.
//!
//! Layout: `cameras.txt`, `images.txt`, `points3D.txt` at the root, views in
//! `images/`, optional pseudo-depth in `depths/<image-stem>_depth.png`.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::colmap::read_colmap_text;
use crate::io::images::{read_depth_png, read_image};
use crate::scene::{Image, SceneBundle, Split};

pub const IMAGES_DIR: &str = "images";
pub const DEPTHS_DIR: &str = "depths";

/// Path of the pseudo-depth map that belongs to image `name`.
pub fn depth_path(dir: &Path, name: &str) -> PathBuf {
    let stem = Path::new(name).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    dir.join(DEPTHS_DIR).join(format!("{stem}_depth.png"))
}

/// Box-filter reduction by an integer factor; trailing rows/columns that do not fill a block are dropped.
pub fn downscale_image(img: &Image, factor: usize) -> Image {
    if factor == 1 {
        return img.clone();
    }
    let (w, h) = (img.width / factor, img.height / factor);
    let mut out = Image::new(w, h);
    let norm = (factor * factor) as f64;
    for y in 0..h {
        for x in 0..w {
            let mut s = [0.0; 3];
            for dy in 0..factor {
                for dx in 0..factor {
                    let p = img.pixel(x * factor + dx, y * factor + dy);
                    for k in 0..3 {
                        s[k] += p[k];
                    }
                }
            }
            out.set_pixel(x, y, s.map(|v| v / norm));
        }
    }
    out
}

/// Loads a scene directory. Views are ordered by file name; every
/// `holdout_every`-th of them (starting with the first) is held out for
/// testing, `0` keeps all for training.
pub fn load_scene(dir: &Path, downscale: usize, holdout_every: usize) -> Result<SceneBundle> {
    if downscale == 0 {
        return Err(Error::Argument("downscale must be at least 1".into()));
    }
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "scene directory not found"),
        ));
    }
    let model = read_colmap_text(dir)?;
    let mut records = model.images.clone();
    records.sort_by(|a, b| a.name.cmp(&b.name));

    let views: Vec<_> = records
        .par_iter()
        .map(|rec| -> Result<_> {
            let camera = model.camera_for(rec)?;
            let img = read_image(&dir.join(IMAGES_DIR).join(&rec.name))?;
            if img.width != camera.width || img.height != camera.height {
                return Err(Error::ContractViolation(format!(
                    "{}: image is {}x{} but its camera is {}x{}",
                    rec.name, img.width, img.height, camera.width, camera.height
                )));
            }
            let camera = camera.downscaled(downscale);
            camera.validate()?;
            let img = downscale_image(&img, downscale);
            let dp = depth_path(dir, &rec.name);
            let depth = if dp.exists() {
                let d = read_depth_png(&dp)?.resized_nearest(img.width, img.height);
                if d.width != img.width || d.height != img.height {
                    return Err(Error::ContractViolation(format!("{}: depth size mismatch", rec.name)));
                }
                Some(d)
            } else {
                None
            };
            Ok((rec.name.clone(), camera, img, depth))
        })
        .collect::<Result<_>>()?;

    let with_depth = views.iter().filter(|v| v.3.is_some()).count();
    if with_depth != 0 && with_depth != views.len() {
        return Err(Error::ContractViolation(format!(
            "pseudo-depth present for {with_depth} of {} views; supply all or none",
            views.len()
        )));
    }

    let mut bundle = SceneBundle {
        split: Split::every_kth(views.len(), holdout_every),
        init_points: model
            .points
            .iter()
            .map(|p| (p.xyz, p.rgb.map(|c| c as f64 / 255.0)))
            .collect(),
        ..SceneBundle::default()
    };
    for (name, camera, img, depth) in views {
        bundle.names.push(name);
        bundle.cameras.push(camera);
        bundle.images.push(img);
        if let Some(d) = depth {
            bundle.pseudo_depths.push(d);
        }
    }
    bundle.validate()?;
    Ok(bundle)
}
