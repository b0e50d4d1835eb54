//! Scenes, KITTI-format I/O, synthetic scene generation and mesh placement.

mod calib;
mod label;
mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use calib::Calibration;
pub use label::{parse_labels, read_labels, write_labels, KittiLabel, LABEL_FIELDS};
pub use synth::{gen_scene, gen_synthetic, SynthConfig};

use crate::geometry::{apply_deformation, roof_pose, Displacement, RigidTransform, TriMesh};
use crate::lidar::{read_velodyne, write_velodyne, PointCloud};
use crate::raster::{CameraModel, RgbImage};
use crate::victim::{Box2D, Box3D};
use crate::{Error, Result};

/// KITTI difficulty buckets. Each bucket admits objects that meet its
/// minimum box height and maximum occlusion and truncation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard];

    /// (min 2D height px, max occlusion level, max truncation).
    pub fn limits(self) -> (f64, u8, f64) {
        match self {
            Difficulty::Easy => (40.0, 0, 0.15),
            Difficulty::Moderate => (25.0, 1, 0.30),
            Difficulty::Hard => (25.0, 2, 0.50),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Easy => "Easy",
            Difficulty::Moderate => "Moderate",
            Difficulty::Hard => "Hard",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub box3d: Box3D,
    pub box2d: Box2D,
    pub truncation: f64,
    pub occlusion: u8,
}

impl GroundTruth {
    pub fn height_px(&self) -> f64 {
        self.box2d.height()
    }

    pub fn in_bucket(&self, d: Difficulty) -> bool {
        let (min_h, max_occ, max_trunc) = d.limits();
        self.height_px() >= min_h && self.occlusion <= max_occ && self.truncation <= max_trunc
    }
}

/// One sample: sensor-frame cloud, camera image, calibration and car labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: String,
    pub cloud: PointCloud,
    pub image: RgbImage,
    pub calib: Calibration,
    pub objects: Vec<GroundTruth>,
}

impl Scene {
    pub fn camera(&self) -> CameraModel {
        self.calib.camera()
    }

    pub fn validate(&self) -> Result<()> {
        if self.image.width != self.calib.width || self.image.height != self.calib.height {
            return Err(Error::invalid(format!("scene {}: image size does not match calibration", self.id)));
        }
        let (w, h) = (self.image.width as f64, self.image.height as f64);
        for o in &self.objects {
            let b = &o.box2d;
            if b.left < 0.0 || b.top < 0.0 || b.right > w || b.bottom > h {
                return Err(Error::invalid(format!("scene {}: 2D box {b:?} leaves the image", self.id)));
            }
        }
        Ok(())
    }

    /// Deterministic half split by a hash of the scene id.
    pub fn is_train(&self) -> bool {
        is_train_id(&self.id)
    }
}

/// FNV-1a of a scene id.
pub fn scene_hash(id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Even hashes train, odd hashes validate.
pub fn is_train_id(id: &str) -> bool {
    scene_hash(id) % 2 == 0
}

pub fn split(scenes: &[Scene]) -> (Vec<&Scene>, Vec<&Scene>) {
    scenes.iter().partition(|s| s.is_train())
}

/// File locations of one scene in the KITTI object layout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScenePaths {
    pub velodyne: PathBuf,
    pub image: PathBuf,
    pub calib: PathBuf,
    pub label: PathBuf,
}

impl ScenePaths {
    pub fn in_root(root: &Path, id: &str) -> Self {
        ScenePaths {
            velodyne: root.join("velodyne").join(format!("{id}.bin")),
            image: root.join("image_2").join(format!("{id}.png")),
            calib: root.join("calib").join(format!("{id}.txt")),
            label: root.join("label_2").join(format!("{id}.txt")),
        }
    }
}

/// Reads one KITTI sample. Only `Car` labels become ground truth.
pub fn read_kitti_scene(paths: &ScenePaths) -> Result<Scene> {
    let cloud = read_velodyne(&paths.velodyne)?;
    let image = RgbImage::load_png(&paths.image)?;
    let calib = Calibration::read(&paths.calib, image.width, image.height)?;
    let labels = read_labels(&paths.label)?;
    let mut objects = Vec::new();
    for l in labels.iter().filter(|l| l.class == "Car") {
        let (w, h) = (image.width as f64, image.height as f64);
        let box2d = l
            .box2d()?
            .clipped(w, h)
            .ok_or_else(|| Error::parse(&paths.label, 0, format!("car box {:?} lies outside the image", l.bbox)))?;
        objects.push(GroundTruth {
            box3d: l.box3d(&calib)?,
            box2d,
            truncation: l.truncated,
            occlusion: l.occluded,
        });
    }
    let id = paths
        .velodyne
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Scene {
        id,
        cloud,
        image,
        calib,
        objects,
    })
}

pub fn write_scene(root: &Path, scene: &Scene) -> Result<()> {
    let paths = ScenePaths::in_root(root, &scene.id);
    for p in [&paths.velodyne, &paths.image, &paths.calib, &paths.label] {
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    write_velodyne(&paths.velodyne, &scene.cloud)?;
    scene.image.save_png(&paths.image)?;
    fs::write(&paths.calib, scene.calib.to_kitti_string()).map_err(|e| Error::io(&paths.calib, e))?;
    let labels: Vec<KittiLabel> = scene
        .objects
        .iter()
        .map(|o| KittiLabel::from_box(&o.box3d, &o.box2d, o.truncation, o.occlusion, &scene.calib, None))
        .collect();
    write_labels(&paths.label, &labels)
}

/// Every scene under `root`, in id order.
pub fn read_dataset(root: &Path) -> Result<Vec<Scene>> {
    let dir = root.join("velodyne");
    let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut ids = Vec::new();
    for e in entries {
        let e = e.map_err(|e| Error::io(&dir, e))?;
        let name = e.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_suffix(".bin") {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    ids.iter()
        .map(|id| read_kitti_scene(&ScenePaths::in_root(root, id)))
        .collect()
}

/// One placement of the shared mesh on a ground-truth car.
#[derive(Clone, Debug, PartialEq)]
pub struct Placement {
    pub object: usize,
    pub transform: RigidTransform,
    pub mesh: TriMesh,
}

/// Places the deformed mesh on the roof of every ground-truth car.
pub fn place_meshes(scene: &Scene, base: &TriMesh, d: &Displacement, clearance: f64) -> Result<Vec<Placement>> {
    scene
        .objects
        .iter()
        .enumerate()
        .map(|(i, o)| {
            let transform = roof_pose(&o.box3d, clearance);
            let mesh = apply_deformation(base, d, &transform)?;
            Ok(Placement {
                object: i,
                transform,
                mesh,
            })
        })
        .collect()
}

/// All placements merged into one mesh plus each placement's face range.
pub fn merge_placements(placements: &[Placement]) -> (TriMesh, Vec<std::ops::Range<usize>>) {
    let meshes: Vec<&TriMesh> = placements.iter().map(|p| &p.mesh).collect();
    let (merged, offsets) = TriMesh::concat(&meshes);
    let ranges = offsets
        .iter()
        .zip(&meshes)
        .map(|(&(_, f0), m)| f0..f0 + m.face_count())
        .collect();
    (merged, ranges)
}
