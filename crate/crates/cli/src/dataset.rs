//! On-disk datasets: rendering with resume and quarantine, the manifest, and
//! validation and loading of sequences.
//!
//! Layout under the dataset root:
//!
//! ```text
//! dataset.json
//! sequences/<id>/sequence.json   entry for one sequence, written last
//! sequences/<id>/scene.json      scene and trajectory, enough to re-render
//! sequences/<id>/rgb_000.png depth_000.pfm normal_000.pfm mask_000.png ...
//! quarantine/                    partial sequences from interrupted runs
//! ```
//!
//! Depth is stored in metres, normals in camera space (+z toward the camera).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use clearflow_core::imageio::{self, Image};
use clearflow_core::trainer::{SequencePair, TrainData};
use clearflow_core::Video;
use clearflow_render::scene::{generate_scene, MaterialClass, SceneConfig, SceneSpec, SettleConfig};
use clearflow_render::tracer::{render_sequence, Intrinsics, RenderConfig, ScenePair};
use clearflow_render::trajectory::{orbit_for_scene, CameraTrajectory, TrajectoryConfig};
use clearflow_render::AssetBank;

use crate::error::{CliError, Result};
use crate::files::{read_json, write_json, RunManifest};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "dataset.json";
const SEQUENCE_FILE: &str = "sequence.json";
const SCENE_FILE: &str = "scene.json";
const PARTIAL_SUFFIX: &str = ".partial";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Whether a sequence belongs to the video set or the single-frame image set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetKind {
    Video,
    Image,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceEntry {
    pub id: String,
    pub split: Split,
    pub set: SetKind,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<String>,
    pub depth: Vec<String>,
    pub normal: Vec<String>,
    pub mask: Vec<String>,
    pub scene: String,
    pub intrinsics: Intrinsics,
    /// Camera-to-world `[R | t]` per frame.
    pub extrinsics: Vec<[[f64; 4]; 3]>,
    pub seed: u64,
    pub tags: Vec<String>,
    /// Scene-type index used for optional tag conditioning.
    pub tag: usize,
    pub depth_units: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub sequences: Vec<SequenceEntry>,
}

impl DatasetManifest {
    pub fn load(root: &Path) -> Result<Self> {
        let m: Self = read_json(&root.join(MANIFEST_FILE))?;
        if m.version != MANIFEST_VERSION {
            return Err(CliError::Data(format!(
                "dataset manifest version {} is not supported (expected {MANIFEST_VERSION})",
                m.version
            )));
        }
        Ok(m)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SequenceEntry> {
        self.sequences.iter().filter(move |s| s.split == split)
    }

    pub fn get(&self, id: &str) -> Option<&SequenceEntry> {
        self.sequences.iter().find(|s| s.id == id)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderJobConfig {
    pub train_scenes: usize,
    pub test_scenes: usize,
    /// Additional single-frame training scenes forming the image set.
    pub image_scenes: usize,
    /// Redraws allowed when settling rejects a scene.
    pub attempts: usize,
    pub scene: SceneConfig,
    pub settle: SettleConfig,
    pub trajectory: TrajectoryConfig,
    pub render: RenderConfig,
}

impl Default for RenderJobConfig {
    fn default() -> Self {
        Self {
            train_scenes: 24,
            test_scenes: 6,
            image_scenes: 24,
            attempts: 8,
            scene: SceneConfig::default(),
            settle: SettleConfig::default(),
            trajectory: TrajectoryConfig::default(),
            render: RenderConfig::default(),
        }
    }
}

/// What to render for one sequence id.
#[derive(Clone, Debug)]
pub struct SequencePlan {
    pub id: String,
    pub split: Split,
    pub set: SetKind,
    pub seed: u64,
}

/// SplitMix64 finalizer, used to derive independent per-sequence seeds.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn plan_sequences(config: &RenderJobConfig, seed: u64) -> Vec<SequencePlan> {
    let groups = [
        ("train", Split::Train, SetKind::Video, config.train_scenes),
        ("test", Split::Test, SetKind::Video, config.test_scenes),
        ("image", Split::Train, SetKind::Image, config.image_scenes),
    ];
    let mut out = Vec::new();
    let mut index = 0u64;
    for (prefix, split, set, n) in groups {
        for i in 0..n {
            out.push(SequencePlan {
                id: format!("{prefix}_{i:04}"),
                split,
                set,
                seed: derive_seed(seed, index),
            });
            index += 1;
        }
    }
    out
}

/// Eight scene types: environment (tabletop or container) times the most
/// frequent material class.
pub fn scene_tags(scene: &SceneSpec) -> (usize, Vec<String>) {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    let mut names = BTreeSet::new();
    for p in &scene.placements {
        let c = MaterialClass::ALL
            .iter()
            .position(|&c| c == p.asset.material.class)
            .unwrap_or(0);
        *counts.entry(c).or_default() += 1;
        names.insert(format!("{:?}", p.asset.material.class).to_lowercase());
    }
    let dominant = counts
        .iter()
        .max_by_key(|(c, n)| (**n, std::cmp::Reverse(**c)))
        .map_or(0, |(c, _)| *c);
    let container = matches!(
        scene.environment,
        clearflow_render::scene::Environment::Container { .. }
    );
    names.insert(if container { "container" } else { "tabletop" }.into());
    (usize::from(container) * 4 + dominant, names.into_iter().collect())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SceneRecord {
    scene: SceneSpec,
    trajectory: CameraTrajectory,
    render: RenderConfig,
    render_seed: u64,
}

fn frame_name(kind: &str, k: usize, ext: &str) -> String {
    format!("{kind}_{k:03}.{ext}")
}

fn write_frames(dir: &Path, pair: &ScenePair) -> Result<()> {
    let (f, h, w) = (pair.depth.frames(), pair.depth.height(), pair.depth.width());
    let n = h * w;
    for k in 0..f {
        let rgb = Image::new(w, h, 3, pair.rgb.frame(k).to_vec())?;
        imageio::write_png(&dir.join(frame_name("rgb", k, "png")), &rgb)?;
        let depth = Image::new(w, h, 1, pair.depth.frame(k).to_vec())?;
        imageio::write_pfm(&dir.join(frame_name("depth", k, "pfm")), &depth)?;
        let normal = Image::new(w, h, 3, pair.normal.frame(k).to_vec())?;
        imageio::write_pfm(&dir.join(frame_name("normal", k, "pfm")), &normal)?;
        let mask: Vec<f32> = pair.mask[k * n..(k + 1) * n]
            .iter()
            .map(|&m| f32::from(u8::from(m)))
            .collect();
        imageio::write_png(&dir.join(frame_name("mask", k, "png")), &Image::new(w, h, 1, mask)?)?;
    }
    Ok(())
}

/// Renders one planned sequence into `dir` (which must not exist yet).
pub fn render_one(config: &RenderJobConfig, plan: &SequencePlan, root: &Path, dir: &Path) -> Result<SequenceEntry> {
    let scene = generate_scene(
        &AssetBank::standard(),
        &config.scene,
        &config.settle,
        plan.seed,
        config.attempts,
    )?;
    let mut tcfg = config.trajectory.clone();
    if plan.set == SetKind::Image {
        tcfg.frames = 1;
    }
    let trajectory = orbit_for_scene(&scene, &tcfg, plan.seed)?;
    let pair = render_sequence(&scene, &trajectory, &config.render, plan.seed)?;
    pair.check()?;
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    write_frames(dir, &pair)?;
    let record = SceneRecord {
        scene: scene.clone(),
        trajectory,
        render: config.render.clone(),
        render_seed: plan.seed,
    };
    write_json(&dir.join(SCENE_FILE), &record)?;
    let rel = |name: String| -> String {
        let final_dir = root.join("sequences").join(&plan.id);
        let p = final_dir.join(name);
        p.strip_prefix(root).unwrap_or(&p).to_string_lossy().into_owned()
    };
    let frames = pair.depth.frames();
    let names = |kind: &str, ext: &str| (0..frames).map(|k| rel(frame_name(kind, k, ext))).collect::<Vec<_>>();
    let (tag, tags) = scene_tags(&scene);
    let entry = SequenceEntry {
        id: plan.id.clone(),
        split: plan.split,
        set: plan.set,
        frames,
        width: config.render.width,
        height: config.render.height,
        rgb: names("rgb", "png"),
        depth: names("depth", "pfm"),
        normal: names("normal", "pfm"),
        mask: names("mask", "png"),
        scene: rel(SCENE_FILE.into()),
        intrinsics: pair.intrinsics,
        extrinsics: pair.extrinsics,
        seed: plan.seed,
        tags,
        tag,
        depth_units: "metres".into(),
    };
    write_json(&dir.join(SEQUENCE_FILE), &entry)?;
    Ok(entry)
}

/// Outcome of a render run.
#[derive(Clone, Debug, Default)]
pub struct RenderSummary {
    pub rendered: Vec<String>,
    pub skipped: Vec<String>,
    pub quarantined: Vec<String>,
    pub failed: Vec<(String, String)>,
}

/// Moves leftovers of interrupted renders into `quarantine/`.
fn quarantine_partials(root: &Path) -> Result<Vec<String>> {
    let seq_dir = root.join("sequences");
    let mut moved = Vec::new();
    let Ok(entries) = fs::read_dir(&seq_dir) else {
        return Ok(moved);
    };
    let q = root.join("quarantine");
    for e in entries {
        let e = e.map_err(|err| CliError::io(&seq_dir, err))?;
        let name = e.file_name().to_string_lossy().into_owned();
        if !name.ends_with(PARTIAL_SUFFIX) {
            continue;
        }
        fs::create_dir_all(&q).map_err(|err| CliError::io(&q, err))?;
        let mut target = q.join(&name);
        let mut n = 1;
        while target.exists() {
            target = q.join(format!("{name}.{n}"));
            n += 1;
        }
        fs::rename(e.path(), &target).map_err(|err| CliError::io(e.path(), err))?;
        log::warn!("quarantined partial sequence {name}");
        moved.push(name.trim_end_matches(PARTIAL_SUFFIX).to_owned());
    }
    Ok(moved)
}

/// Renders every planned sequence that is not already complete, then writes
/// the manifest. Failures are reported per sequence and do not stop the run.
pub fn render_dataset(config: &RenderJobConfig, seed: u64, root: &Path) -> Result<(DatasetManifest, RenderSummary)> {
    config.render.validate()?;
    config.scene.validate()?;
    let mut summary = RenderSummary {
        quarantined: quarantine_partials(root)?,
        ..RenderSummary::default()
    };
    let seq_root = root.join("sequences");
    fs::create_dir_all(&seq_root).map_err(|e| CliError::io(&seq_root, e))?;
    let mut entries = Vec::new();
    for plan in plan_sequences(config, seed) {
        let done = seq_root.join(&plan.id);
        if done.join(SEQUENCE_FILE).exists() {
            entries.push(read_json::<SequenceEntry>(&done.join(SEQUENCE_FILE))?);
            summary.skipped.push(plan.id.clone());
            continue;
        }
        let staging = seq_root.join(format!("{}{PARTIAL_SUFFIX}", plan.id));
        let result = render_one(config, &plan, root, &staging).and_then(|entry| {
            if done.exists() {
                fs::remove_dir_all(&done).map_err(|e| CliError::io(&done, e))?;
            }
            fs::rename(&staging, &done).map_err(|e| CliError::io(&staging, e))?;
            Ok(entry)
        });
        match result {
            Ok(entry) => {
                log::info!("rendered {} ({} frames)", entry.id, entry.frames);
                summary.rendered.push(entry.id.clone());
                entries.push(entry);
            }
            Err(e) => {
                log::error!("sequence {} failed: {e}", plan.id);
                if staging.exists() {
                    quarantine_partials(root)?;
                }
                summary.failed.push((plan.id.clone(), e.to_string()));
            }
        }
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        sequences: entries,
    };
    write_json(&root.join(MANIFEST_FILE), &manifest)?;
    RunManifest::new("render", seed, config)?.write(root)?;
    Ok((manifest, summary))
}

/// Problems found by [`validate_dataset`], keyed by sequence id.
pub type ValidationReport = BTreeMap<String, Vec<String>>;

fn check_image(path: &Path, w: usize, h: usize, channels: &[usize]) -> std::result::Result<Image, String> {
    let img = match path.extension().and_then(|e| e.to_str()) {
        Some("png") => imageio::read_png(path),
        Some("pfm") => imageio::read_pfm(path),
        _ => return Err(format!("{}: unknown file type", path.display())),
    }
    .map_err(|e| format!("{}: {e}", path.display()))?;
    if img.width != w || img.height != h || !channels.contains(&img.channels) {
        return Err(format!(
            "{}: expected {w}x{h}x{channels:?}, found {}x{}x{}",
            path.display(),
            img.width,
            img.height,
            img.channels
        ));
    }
    if img.data.iter().any(|v| !v.is_finite()) {
        return Err(format!("{}: non-finite values", path.display()));
    }
    Ok(img)
}

fn validate_entry(root: &Path, s: &SequenceEntry) -> Vec<String> {
    let mut problems = Vec::new();
    if s.frames == 0 || s.frames % 4 != 1 {
        problems.push(format!("frame count {} violates F = 1 (mod 4)", s.frames));
    }
    if s.set == SetKind::Image && s.frames != 1 {
        problems.push("image-set entries must have exactly one frame".into());
    }
    for (kind, list) in [
        ("rgb", &s.rgb),
        ("depth", &s.depth),
        ("normal", &s.normal),
        ("mask", &s.mask),
    ] {
        if list.len() != s.frames {
            problems.push(format!("{} {kind} files listed for {} frames", list.len(), s.frames));
        }
    }
    if !problems.is_empty() {
        return problems;
    }
    for k in 0..s.frames {
        let (w, h) = (s.width, s.height);
        let rgb = check_image(&root.join(&s.rgb[k]), w, h, &[3]);
        let depth = check_image(&root.join(&s.depth[k]), w, h, &[1]);
        let normal = check_image(&root.join(&s.normal[k]), w, h, &[3]);
        let mask = check_image(&root.join(&s.mask[k]), w, h, &[1]);
        for r in [&rgb, &normal] {
            if let Err(e) = r {
                problems.push(e.clone());
            }
        }
        match (depth, mask) {
            (Ok(d), Ok(m)) => {
                let bad = d
                    .data
                    .iter()
                    .zip(&m.data)
                    .filter(|(&dv, &mv)| (dv > 0.0) != (mv > 0.5) || dv < 0.0);
                let n = bad.count();
                if n > 0 {
                    problems.push(format!("frame {k}: {n} pixels where mask and depth > 0 disagree"));
                }
            }
            (d, m) => problems.extend(d.err().into_iter().chain(m.err())),
        }
    }
    problems
}

/// Checks ids, frame counts and every referenced file.
pub fn validate_dataset(root: &Path, manifest: &DatasetManifest) -> ValidationReport {
    let mut report = ValidationReport::new();
    let mut seen = BTreeSet::new();
    for s in &manifest.sequences {
        let mut problems = validate_entry(root, s);
        if !seen.insert(s.id.clone()) {
            problems.push("duplicate id".into());
        }
        if !problems.is_empty() {
            report.entry(s.id.clone()).or_default().extend(problems);
        }
    }
    report
}

fn stack_frames(root: &Path, files: &[String], read: fn(&Path) -> clearflow_core::Result<Image>) -> Result<Video> {
    let mut frames = Vec::with_capacity(files.len());
    for f in files {
        let img = read(&root.join(f))?;
        frames.push(Video::new(1, img.height, img.width, img.channels, img.data)?);
    }
    Ok(Video::concat_frames(&frames)?)
}

/// Loads one sequence into memory. RGB is scaled to `[0, 1]`.
pub fn load_sequence(root: &Path, s: &SequenceEntry) -> Result<SequencePair> {
    let rgb = stack_frames(root, &s.rgb, imageio::read_png)?;
    let depth = stack_frames(root, &s.depth, imageio::read_pfm)?;
    let normal = stack_frames(root, &s.normal, imageio::read_pfm)?;
    let mask_video = stack_frames(root, &s.mask, imageio::read_png)?;
    let pair = SequencePair {
        id: s.id.clone(),
        rgb,
        depth,
        normal,
        mask: mask_video.data().iter().map(|&m| m > 0.5).collect(),
        tag: Some(s.tag),
    };
    pair.check()?;
    Ok(pair)
}

/// The training split as video and image pools.
pub fn load_training_data(root: &Path, manifest: &DatasetManifest) -> Result<TrainData> {
    let mut data = TrainData::default();
    for s in manifest.split(Split::Train) {
        let pair = load_sequence(root, s)?;
        match s.set {
            SetKind::Video => data.video.push(pair),
            SetKind::Image => data.image.push(pair),
        }
    }
    if data.video.is_empty() && data.image.is_empty() {
        return Err(CliError::Data(format!("{} has no training sequences", root.display())));
    }
    Ok(data)
}

pub fn sequence_dir(root: &Path, id: &str) -> PathBuf {
    root.join("sequences").join(id)
}
