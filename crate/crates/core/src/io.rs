//! File formats: transform JSON, correspondence CSV and scene directories.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::correspondence::{CorrespondenceSet, Level};
use crate::error::{Error, Result};
use crate::geometry::ply::{read_ply, write_ply, PlyPrecision};
use crate::geometry::{PointCloud, RigidTransform, TransformRecord};
use crate::scalar::Real;
use crate::pipeline::{CloudFeatures, FeatureProvider};
use crate::synth::features::{self, PointDescriptors, SynthFeatureProvider};
use crate::synth::{SceneConfig, SyntheticScene};

pub const SRC_PLY: &str = "src.ply";
pub const TGT_PLY: &str = "tgt.ply";
pub const GT_JSON: &str = "gt.json";
pub const META_JSON: &str = "meta.json";

fn read_error(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Read {
        path: path.to_path_buf(),
        source,
    }
}

fn write_error(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Write {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(read_error(path))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))
}

/// Pretty JSON with a trailing newline. Floats use the shortest representation that round-trips exactly.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(write_error(path))
}

pub fn read_transform<T: Real>(path: &Path) -> Result<RigidTransform<T>> {
    read_json::<TransformRecord>(path)?.to_transform()
}

pub fn write_transform<T: Real>(path: &Path, t: &RigidTransform<T>) -> Result<()> {
    write_json(path, &TransformRecord::from(t))
}

pub fn read_cloud<T: Real>(path: &Path) -> Result<PointCloud<T>> {
    let f = File::open(path).map_err(read_error(path))?;
    read_ply(BufReader::new(f)).map_err(|e| match e {
        Error::Parse { message, .. } => Error::parse(path.display().to_string(), message),
        other => other,
    })
}

pub fn write_cloud<T: Real>(path: &Path, cloud: &PointCloud<T>, precision: PlyPrecision) -> Result<()> {
    let f = File::create(path).map_err(write_error(path))?;
    let mut w = BufWriter::new(f);
    write_ply(cloud, precision, &mut w)
        .and_then(|_| w.flush())
        .map_err(write_error(path))
}

pub fn write_correspondences<T: Real>(path: &Path, c: &CorrespondenceSet<T>) -> Result<()> {
    let f = File::create(path).map_err(write_error(path))?;
    let mut w = BufWriter::new(f);
    c.write_csv(&mut w).and_then(|_| w.flush()).map_err(write_error(path))
}

pub fn read_correspondences<T: Real>(path: &Path, level: Level) -> Result<CorrespondenceSet<T>> {
    let f = File::open(path).map_err(read_error(path))?;
    CorrespondenceSet::read_csv(BufReader::new(f), level)
}

/// Files of an exported scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFiles {
    pub src: PointCloud<f64>,
    pub tgt: PointCloud<f64>,
    pub gt: RigidTransform<f64>,
    pub meta: SceneConfig,
}

/// Writes `src.ply`, `tgt.ply` (double precision, per-point descriptors as
/// `[dense | coarse]` feature columns), `gt.json` and `meta.json` into `dir`.
pub fn export_scene(dir: &Path, scene: &SyntheticScene) -> Result<()> {
    fs::create_dir_all(dir).map_err(write_error(dir))?;
    let (sd, td) = scene.descriptors();
    let src = PointCloud::with_features(scene.src.points().to_vec(), sd.concat())?;
    let tgt = PointCloud::with_features(scene.tgt.points().to_vec(), td.concat())?;
    write_cloud(&dir.join(SRC_PLY), &src, PlyPrecision::Float64)?;
    write_cloud(&dir.join(TGT_PLY), &tgt, PlyPrecision::Float64)?;
    write_transform(&dir.join(GT_JSON), &scene.gt)?;
    write_json(&dir.join(META_JSON), &scene.config)
}

pub fn import_scene(dir: &Path) -> Result<SceneFiles> {
    Ok(SceneFiles {
        src: read_cloud(&dir.join(SRC_PLY))?,
        tgt: read_cloud(&dir.join(TGT_PLY))?,
        gt: read_transform(&dir.join(GT_JSON))?,
        meta: read_json(&dir.join(META_JSON))?,
    })
}

impl SceneFiles {
    /// Pipeline inputs rebuilt from the stored descriptors, or extracted from
    /// the coordinates when the clouds carry no `[dense | coarse]` columns.
    pub fn cloud_features(&self) -> Result<(CloudFeatures<f64>, CloudFeatures<f64>)> {
        let cfg = self.meta.features();
        let one = |cloud: &PointCloud<f64>, stream: u64| match cloud.features() {
            Some(f) if f.cols() == 2 * cfg.d => {
                features::cloud_features(cloud.points(), &PointDescriptors::split(f, cfg.d)?, &cfg)
            }
            _ => SynthFeatureProvider { cfg }.extract(cloud.points(), stream),
        };
        Ok((one(&self.src, 0)?, one(&self.tgt, 1)?))
    }
}

/// Subdirectories of `dir` in lexicographic order.
pub fn list_subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(read_error(dir))? {
        let entry = entry.map_err(read_error(dir))?;
        if entry.path().is_dir() {
            out.push(entry.path());
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transform_json_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let t = RigidTransform::from_axis_angle([0.1, 0.2, 0.3], 0.77, [1.0 / 3.0, -2.5e-7, 12.0]);
        let p = dir.path().join("t.json");
        write_transform(&p, &t).unwrap();
        let back: RigidTransform<f64> = read_transform(&p).unwrap();
        assert_eq!(back, t);
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.contains("\"rotation\"") && text.contains("\"translation\""));
    }

    #[test]
    fn missing_file_says_cannot_read() {
        let err = read_transform::<f64>(Path::new("/nonexistent/t.json")).unwrap_err();
        assert!(err.to_string().starts_with("cannot read"));
    }
}
