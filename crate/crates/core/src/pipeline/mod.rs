//! Run configuration and the end-to-end commands behind the CLI.
//!
//! Output layout under `out_dir`:
//! `data/` (generated scenes in KITTI layout), `victim.ckpt`,
//! `victim_report.json`, `mesh_shape.ckpt`, `mesh_texture.ckpt`,
//! `loss_shape.csv`, `loss_texture.csv`, `mesh.ply`, `eval_table.txt`,
//! `eval_table.csv`, `eval_summary.json`, `render/` and `config.json`.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{attacked_inputs, loss_csv, run_attack, AttackConfig, AttackParams, Exposure, LossReport, Phase};
use crate::dataio::{gen_synthetic, read_dataset, split, write_scene, Scene, SynthConfig};
use crate::eval::{average_precision, proposal_recall, ApTable, EvalConfig, Scored, ROW_BOTH, ROW_CLEAN, ROW_IMG, ROW_PC};
use crate::lidar::{write_velodyne, LidarConfig};
use crate::victim::{train_victim, FrustumSource, GateReport, Victim, VictimConfig};
use crate::{Error, Result};

/// Where scenes come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Generated by `gen-scenes` into `out_dir/data`.
    Synthetic(SynthConfig),
    /// An existing KITTI-layout directory.
    Kitti { root: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SynthConfig::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// When set, overrides the seeds of every sub-config.
    pub seed: Option<u64>,
    /// Worker threads; `None` uses every core.
    pub threads: Option<usize>,
    pub out_dir: PathBuf,
    pub data: DataSource,
    pub lidar: LidarConfig,
    pub victim: VictimConfig,
    pub attack: AttackConfig,
    pub eval: EvalConfig,
    /// Frustum source for every evaluated row.
    pub eval_source: FrustumSource,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            threads: None,
            out_dir: PathBuf::from("out"),
            data: DataSource::default(),
            lidar: LidarConfig::default(),
            victim: VictimConfig::default(),
            attack: AttackConfig::default(),
            eval: EvalConfig::default(),
            eval_source: FrustumSource::Detector,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        if cfg.out_dir.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.out_dir = dir.join(&cfg.out_dir);
            }
        }
        if let DataSource::Kitti { root } = &mut cfg.data {
            if root.is_relative() {
                if let Some(dir) = path.parent() {
                    *root = dir.join(&*root);
                }
            }
        }
        Ok(cfg)
    }

    /// Applies the top-level seed to every sub-config and validates.
    pub fn resolved(mut self) -> Result<Self> {
        if let Some(seed) = self.seed {
            if let DataSource::Synthetic(s) = &mut self.data {
                s.seed = seed;
            }
            self.victim.seed = seed.wrapping_add(1);
            self.attack.seed = seed.wrapping_add(2);
            self.lidar.seed = seed.wrapping_add(3);
        }
        if let DataSource::Synthetic(s) = &self.data {
            s.validate()?;
        }
        if self.threads == Some(0) {
            return Err(Error::invalid("threads must be at least 1"));
        }
        self.lidar.validate()?;
        self.attack.validate()?;
        self.eval.validate()?;
        Ok(self)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    pub fn data_root(&self) -> PathBuf {
        match &self.data {
            DataSource::Synthetic(_) => self.path("data"),
            DataSource::Kitti { root } => root.clone(),
        }
    }

    /// Writes the effective config next to the outputs.
    pub fn echo(&self) -> Result<()> {
        create_dir(&self.out_dir)?;
        write_file(&self.path("config.json"), serde_json::to_string_pretty(self)?.as_bytes())
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn require(path: PathBuf, command: &str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingPrerequisite {
            path,
            hint: format!("run `{command}` first"),
        })
    }
}

/// Generates the synthetic dataset into `out_dir/data`; returns the scene
/// count. A KITTI source is left untouched.
pub fn gen_scenes(cfg: &RunConfig) -> Result<usize> {
    cfg.echo()?;
    match &cfg.data {
        DataSource::Synthetic(s) => {
            let scenes = gen_synthetic(s)?;
            let root = cfg.data_root();
            if root.exists() {
                fs::remove_dir_all(&root).map_err(|e| Error::io(&root, e))?;
            }
            for scene in &scenes {
                write_scene(&root, scene)?;
            }
            Ok(scenes.len())
        }
        DataSource::Kitti { root } => Ok(read_dataset(root)?.len()),
    }
}

pub fn load_scenes(cfg: &RunConfig) -> Result<Vec<Scene>> {
    let root = match &cfg.data {
        DataSource::Synthetic(_) => require(cfg.data_root().join("velodyne"), "gen-scenes")?
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default(),
        DataSource::Kitti { root } => root.clone(),
    };
    let scenes = read_dataset(&root)?;
    if scenes.is_empty() {
        return Err(Error::MissingPrerequisite {
            path: root,
            hint: "the dataset is empty; run `gen-scenes` or point `data.root` at a KITTI directory".into(),
        });
    }
    Ok(scenes)
}

/// Trains the victim, saves its checkpoint and gate report.
pub fn train_victim_cmd(cfg: &RunConfig) -> Result<GateReport> {
    let scenes = load_scenes(cfg)?;
    cfg.echo()?;
    let victim = train_victim(&scenes, &cfg.victim)?;
    victim.save(&cfg.path("victim.ckpt"))?;
    let report = victim.report.clone().expect("training evaluates the gates");
    write_file(&cfg.path("victim_report.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
    Ok(report)
}

pub fn load_victim(cfg: &RunConfig) -> Result<Victim> {
    Victim::load(&require(cfg.path("victim.ckpt"), "train-victim")?)
}

pub fn mesh_path(cfg: &RunConfig, phase: Phase) -> PathBuf {
    cfg.path(&format!("mesh_{}.ckpt", phase.name()))
}

pub fn load_mesh(cfg: &RunConfig, phase: Phase) -> Result<AttackParams> {
    AttackParams::load(&require(mesh_path(cfg, phase), &format!("attack --phase {}", phase.name()))?)
}

/// Runs one attack phase on the training split; writes the mesh checkpoint,
/// the loss CSV and the PLY export.
pub fn attack_cmd(cfg: &RunConfig, phase: Phase) -> Result<Vec<LossReport>> {
    let victim = load_victim(cfg)?;
    let mut params = match phase {
        Phase::Shape => AttackParams::new(&cfg.attack)?,
        Phase::Texture => load_mesh(cfg, Phase::Shape)?,
    };
    let scenes = load_scenes(cfg)?;
    let (train, _) = split(&scenes);
    cfg.echo()?;
    let trail = run_attack(&cfg.attack, phase, &train, &victim, &cfg.lidar, &mut params)?;
    params.save(&cfg.attack, &mesh_path(cfg, phase))?;
    write_file(&cfg.path(&format!("loss_{}.csv", phase.name())), loss_csv(&trail).as_bytes())?;
    params.export_ply(&cfg.path("mesh.ply"))?;
    Ok(trail)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalAttack {
    None,
    Pc,
    Img,
    PcImg,
    All,
    /// Undeformed mid-gray sphere in both sensors.
    Benign,
}

impl std::str::FromStr for EvalAttack {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => EvalAttack::None,
            "pc" => EvalAttack::Pc,
            "img" => EvalAttack::Img,
            "pc+img" => EvalAttack::PcImg,
            "all" => EvalAttack::All,
            "benign" => EvalAttack::Benign,
            _ => return Err(Error::invalid(format!("unknown attack {s:?}; expected none, pc, img, pc+img, all or benign"))),
        })
    }
}

pub const ROW_BENIGN: &str = "Benign Mesh";

/// Recall of 2D proposals on cars wearing the mesh.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallRow {
    pub row: String,
    pub hit: usize,
    pub total: usize,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub table: ApTable,
    pub recall: Vec<RecallRow>,
    pub scenes: usize,
}

impl EvalSummary {
    pub fn recall(&self, row: &str) -> Option<f64> {
        self.recall.iter().find(|r| r.row == row).map(|r| r.recall)
    }
}

fn rows_for(which: EvalAttack) -> Vec<(&'static str, Option<(Exposure, Phase)>)> {
    let pc = Exposure { lidar: true, camera: false };
    let img = Exposure { lidar: false, camera: true };
    let both = Exposure { lidar: true, camera: true };
    let clean = (ROW_CLEAN, None);
    let pc_row = (ROW_PC, Some((pc, Phase::Shape)));
    let img_row = (ROW_IMG, Some((img, Phase::Texture)));
    let both_row = (ROW_BOTH, Some((both, Phase::Texture)));
    match which {
        EvalAttack::None => vec![clean],
        EvalAttack::Pc => vec![clean, pc_row],
        EvalAttack::Img => vec![clean, img_row],
        EvalAttack::PcImg => vec![clean, both_row],
        EvalAttack::All => vec![clean, pc_row, img_row, both_row],
        EvalAttack::Benign => vec![clean, (ROW_BENIGN, Some((both, Phase::Shape)))],
    }
}

/// Detections and proposals on `scenes` with the mesh composited as asked.
pub fn evaluate_row(
    cfg: &RunConfig,
    victim: &Victim,
    scenes: &[&Scene],
    mesh: Option<(&AttackParams, Exposure)>,
) -> Result<(Vec<Vec<Scored>>, Vec<Vec<crate::victim::Box2D>>)> {
    let per_scene: Vec<Result<(Vec<Scored>, Vec<crate::victim::Box2D>)>> = scenes
        .par_iter()
        .map(|s| {
            let (cloud, image) = match mesh {
                Some((params, exposure)) => attacked_inputs(s, params, &cfg.attack, &cfg.lidar, exposure)?,
                None => (s.cloud.clone(), s.image.clone()),
            };
            let cam = s.camera();
            let proposals = victim.proposals(&image, &s.objects, cfg.eval_source)?;
            let dets = victim.detect_from_proposals(&cloud, &cam, &proposals);
            let recall_props = match cfg.eval_source {
                FrustumSource::Detector => proposals,
                FrustumSource::GroundTruth => victim.scorer.propose_2d(&image)?,
            };
            Ok((dets.iter().map(|d| d.scored()).collect(), recall_props))
        })
        .collect();
    let mut dets = Vec::with_capacity(scenes.len());
    let mut props = Vec::with_capacity(scenes.len());
    for r in per_scene {
        let (d, p) = r?;
        dets.push(d);
        props.push(p);
    }
    Ok((dets, props))
}

/// Evaluates the requested rows on the held-out split and writes the table.
pub fn eval_cmd(cfg: &RunConfig, which: EvalAttack) -> Result<EvalSummary> {
    let victim = load_victim(cfg)?;
    let rows = rows_for(which);
    let mut meshes: Vec<(Phase, AttackParams)> = Vec::new();
    for (_, r) in &rows {
        if let Some((_, phase)) = r {
            if which != EvalAttack::Benign && !meshes.iter().any(|(p, _)| p == phase) {
                meshes.push((*phase, load_mesh(cfg, *phase)?));
            }
        }
    }
    if which == EvalAttack::Benign {
        meshes.push((Phase::Shape, AttackParams::new(&cfg.attack)?));
    }
    let scenes = load_scenes(cfg)?;
    let (_, val) = split(&scenes);
    cfg.echo()?;
    let gts: Vec<_> = val.iter().map(|s| s.objects.clone()).collect();
    let mut table = ApTable { rows: Vec::new() };
    let mut recall = Vec::new();
    for (name, r) in rows {
        let mesh = r.map(|(exposure, phase)| {
            let params = &meshes.iter().find(|(p, _)| *p == phase).expect("loaded above").1;
            (params, exposure)
        });
        let (dets, props) = evaluate_row(cfg, &victim, &val, mesh)?;
        table.rows.push((name.to_string(), average_precision(&dets, &gts, &cfg.eval)?));
        let (hit, total) = proposal_recall(&props, &gts, 0.5);
        recall.push(RecallRow {
            row: name.to_string(),
            hit,
            total,
            recall: if total == 0 { 0.0 } else { hit as f64 / total as f64 },
        });
    }
    let summary = EvalSummary {
        table,
        recall,
        scenes: val.len(),
    };
    let mut text = summary.table.to_text();
    text.push('\n');
    for r in &summary.recall {
        text.push_str(&format!("{:<24} 2D recall {}/{} = {:.4}\n", r.row, r.hit, r.total, r.recall));
    }
    write_file(&cfg.path("eval_table.txt"), text.as_bytes())?;
    write_file(&cfg.path("eval_table.csv"), summary.table.to_csv().as_bytes())?;
    write_file(&cfg.path("eval_summary.json"), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    Ok(summary)
}

/// Clean and attacked renders of one scene: PNGs plus the attacked cloud.
pub fn render_cmd(cfg: &RunConfig, scene_id: &str) -> Result<Vec<PathBuf>> {
    let scenes = load_scenes(cfg)?;
    let scene = scenes
        .iter()
        .find(|s| s.id == scene_id)
        .ok_or_else(|| Error::invalid(format!("no scene with id {scene_id:?}")))?;
    let params = match load_mesh(cfg, Phase::Texture) {
        Ok(p) => p,
        Err(Error::MissingPrerequisite { .. }) => load_mesh(cfg, Phase::Shape)?,
        Err(e) => return Err(e),
    };
    let (cloud, image) = attacked_inputs(
        scene,
        &params,
        &cfg.attack,
        &cfg.lidar,
        Exposure { lidar: true, camera: true },
    )?;
    let dir = cfg.path("render");
    create_dir(&dir)?;
    let clean_png = dir.join(format!("{scene_id}_clean.png"));
    let adv_png = dir.join(format!("{scene_id}_attacked.png"));
    let adv_bin = dir.join(format!("{scene_id}_attacked.bin"));
    scene.image.save_png(&clean_png)?;
    image.save_png(&adv_png)?;
    write_velodyne(&adv_bin, &cloud)?;
    Ok(vec![clean_png, adv_png, adv_bin])
}

/// Writes the mesh held by a checkpoint as a binary PLY.
pub fn export_mesh(checkpoint: &Path, out: &Path) -> Result<()> {
    AttackParams::load(&require(checkpoint.to_path_buf(), "attack")?)?.export_ply(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"bogus": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"attack": {"lamda": 0.2}}"#).is_err());
        let cfg = RunConfig::from_json(r#"{"attack": {"lambda": 0.2}, "data": {"kind": "synthetic", "scenes": 4}}"#).unwrap();
        assert_eq!(cfg.attack.lambda, 0.2);
        assert!(matches!(cfg.data, DataSource::Synthetic(ref s) if s.scenes == 4));
    }

    #[test]
    fn seed_propagates() {
        let cfg = RunConfig {
            seed: Some(40),
            ..RunConfig::default()
        }
        .resolved()
        .unwrap();
        assert_eq!(cfg.victim.seed, 41);
        assert_eq!(cfg.attack.seed, 42);
        assert!(matches!(cfg.data, DataSource::Synthetic(ref s) if s.seed == 40));
    }

    #[test]
    fn attack_names_parse() {
        assert_eq!("pc+img".parse::<EvalAttack>().unwrap(), EvalAttack::PcImg);
        assert!("everything".parse::<EvalAttack>().is_err());
    }

    #[test]
    fn missing_victim_names_the_producer() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            out_dir: dir.path().to_path_buf(),
            ..RunConfig::default()
        };
        match load_victim(&cfg) {
            Err(Error::MissingPrerequisite { hint, .. }) => assert!(hint.contains("train-victim")),
            other => panic!("unexpected {other:?}"),
        }
        match load_scenes(&cfg) {
            Err(Error::MissingPrerequisite { hint, .. }) => assert!(hint.contains("gen-scenes")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
