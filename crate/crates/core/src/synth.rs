//! Deterministic synthetic multi-view traffic scenes.
//!
//! Each scene is rendered as 32x32 grayscale frames made of five horizontal
//! bands, one per attribute. A band's base intensity identifies the attribute
//! value (see [`band_intensity`]), every view adds `0.01 * view`, and a
//! horizontal ramp of amplitude 0.03 rises inside the event window and falls
//! outside it. Outside the window the distance band always shows `far`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::datamodel::{Manifest, Sample, Segment, TargetObject};
use crate::error::{Error, Result};
use crate::featurestore::{atomic_write, Frame};
use crate::rng::Rng64;

pub const FRAME_SIZE: usize = 32;
const RAMP: f32 = 0.03;
const VIEW_OFFSET: f32 = 0.01;
const FRAME_MAGIC: &[u8; 4] = b"PNFR";
const FRAME_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Speed {
    Still,
    Slow,
    Fast,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Gaze {
    TowardVehicle,
    Away,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VehicleAction {
    Stopped,
    Accelerating,
    Braking,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Distance {
    Touching,
    Near,
    Far,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Weather {
    Clear,
    Rain,
}

/// Attributes that determine a caption.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SceneContent {
    pub object: TargetObject,
    pub segment: Segment,
    pub speed: Speed,
    pub gaze: Gaze,
    pub action: VehicleAction,
    pub distance: Distance,
    pub weather: Weather,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scene {
    pub content: SceneContent,
    /// Inclusive event window in seconds.
    pub window: (usize, usize),
    /// Frames per view; the first view always spans the full duration.
    pub view_lengths: Vec<usize>,
}

impl Scene {
    pub fn num_views(&self) -> usize {
        self.view_lengths.len()
    }

    pub fn duration(&self) -> usize {
        self.view_lengths[0]
    }
}

/// Base intensity of each attribute band, indexed by attribute value.
pub fn band_intensity(content: &SceneContent, in_window: bool) -> [f32; 5] {
    let speed = [0.05, 0.11, 0.17][content.speed as usize];
    let gaze = [0.25, 0.31][content.gaze as usize];
    let action = [0.40, 0.46, 0.52][content.action as usize];
    let distance = if in_window { content.distance } else { Distance::Far };
    let distance = [0.60, 0.66, 0.72][distance as usize];
    let weather = [0.82, 0.88][content.weather as usize];
    [speed, gaze, action, distance, weather]
}

pub fn render_frame(content: &SceneContent, view: usize, in_window: bool) -> Frame {
    let bands = band_intensity(content, in_window);
    let direction = if in_window { 1.0 } else { -1.0 };
    let offset = VIEW_OFFSET * view as f32;
    let mut pixels = Vec::with_capacity(FRAME_SIZE * FRAME_SIZE);
    for row in 0..FRAME_SIZE {
        let base = bands[row * bands.len() / FRAME_SIZE] + offset;
        for col in 0..FRAME_SIZE {
            let ramp = direction * RAMP * col as f32 / (FRAME_SIZE - 1) as f32;
            pixels.push((base + ramp).clamp(0.0, 1.0));
        }
    }
    Frame::new(FRAME_SIZE, FRAME_SIZE, pixels).expect("rendered pixels are in range")
}

/// Frames for every view, outer index = view.
pub fn render_scene(scene: &Scene) -> Vec<Vec<Frame>> {
    let (m, n) = scene.window;
    scene
        .view_lengths
        .iter()
        .enumerate()
        .map(|(v, &len)| {
            (0..len)
                .map(|t| render_frame(&scene.content, v, (m..=n).contains(&t)))
                .collect()
        })
        .collect()
}

fn speed_phrase(s: Speed) -> &'static str {
    match s {
        Speed::Still => "stands still",
        Speed::Slow => "walks slowly",
        Speed::Fast => "runs quickly",
    }
}

fn gaze_phrase(g: Gaze) -> &'static str {
    match g {
        Gaze::TowardVehicle => "looking toward the vehicle",
        Gaze::Away => "looking away from the vehicle",
    }
}

fn action_phrase(a: VehicleAction) -> &'static str {
    match a {
        VehicleAction::Stopped => "is stopped",
        VehicleAction::Accelerating => "is accelerating",
        VehicleAction::Braking => "is braking",
    }
}

fn distance_phrase(d: Distance) -> &'static str {
    match d {
        Distance::Touching => "right beside",
        Distance::Near => "near",
        Distance::Far => "far from",
    }
}

fn weather_phrase(w: Weather) -> &'static str {
    match w {
        Weather::Clear => "in clear weather",
        Weather::Rain => "in the rain",
    }
}

fn segment_lead(s: Segment) -> &'static str {
    match s {
        Segment::PreRecognition => "first",
        Segment::Recognition => "then",
        Segment::Judgment => "next",
        Segment::Action => "now",
        Segment::Avoidance => "finally",
    }
}

/// One-sentence caption of 11 to 13 tokens.
pub fn short_caption(c: &SceneContent) -> String {
    let core = match c.object {
        TargetObject::Pedestrian => format!("the pedestrian {} {}", speed_phrase(c.speed), gaze_phrase(c.gaze)),
        TargetObject::Vehicle => format!(
            "the vehicle {} {} the pedestrian",
            action_phrase(c.action),
            distance_phrase(c.distance)
        ),
    };
    format!("{} {} {}", segment_lead(c.segment), core, weather_phrase(c.weather))
}

/// Short caption followed by a clause about the other road user.
pub fn caption(c: &SceneContent) -> String {
    let clause = match c.object {
        TargetObject::Pedestrian => format!(
            "while the vehicle {} {} them",
            action_phrase(c.action),
            distance_phrase(c.distance)
        ),
        TargetObject::Vehicle => format!(
            "while the pedestrian {} {}",
            speed_phrase(c.speed),
            gaze_phrase(c.gaze)
        ),
    };
    format!("{} {}", short_caption(c), clause)
}

fn pick<T: Copy>(rng: &mut Rng64, items: &[T]) -> T {
    items[rng.below(items.len() as u64) as usize]
}

fn draw_content(rng: &mut Rng64) -> SceneContent {
    SceneContent {
        object: pick(rng, &TargetObject::ALL),
        segment: pick(rng, &Segment::ALL),
        speed: pick(rng, &[Speed::Still, Speed::Slow, Speed::Fast]),
        gaze: pick(rng, &[Gaze::TowardVehicle, Gaze::Away]),
        action: pick(rng, &[VehicleAction::Stopped, VehicleAction::Accelerating, VehicleAction::Braking]),
        distance: pick(rng, &[Distance::Touching, Distance::Near, Distance::Far]),
        weather: pick(rng, &[Weather::Clear, Weather::Rain]),
    }
}

fn draw_layout(rng: &mut Rng64, content: SceneContent, frames: (u64, u64)) -> Scene {
    let views = rng.range_inclusive(1, 4) as usize;
    let duration = rng.range_inclusive(frames.0, frames.1) as usize;
    let a = rng.below(duration as u64) as usize;
    let b = rng.below(duration as u64) as usize;
    let mut view_lengths = vec![duration];
    for _ in 1..views {
        view_lengths.push(rng.range_inclusive((duration as u64 / 2).max(1), duration as u64) as usize);
    }
    Scene {
        content,
        window: (a.min(b), a.max(b)),
        view_lengths,
    }
}

/// Scene for index `index` of the dataset with this seed.
pub fn draw_scene(seed: u64, index: u64) -> Scene {
    let mut rng = Rng64::new(seed ^ index);
    let content = draw_content(&mut rng);
    draw_layout(&mut rng, content, (6, 40))
}

/// A generated sample with its rendered views.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub sample: Sample,
    pub scene: Scene,
    pub views: Vec<Vec<Frame>>,
}

fn build(id: String, scene: Scene, text: String) -> SynthSample {
    let views = render_scene(&scene);
    let sample = Sample {
        video_refs: (0..scene.num_views()).map(|v| view_ref(&id, v)).collect(),
        id,
        caption: text,
        object: scene.content.object,
        segment: scene.content.segment,
        start_s: scene.window.0 as u64,
        end_s: scene.window.1 as u64,
    };
    SynthSample { sample, scene, views }
}

/// Relative path of a view's frame file.
pub fn view_ref(id: &str, view: usize) -> String {
    format!("{id}/view{view}.pnfr")
}

pub struct SynthDataset {
    pub manifest: Manifest,
    pub samples: Vec<SynthSample>,
}

pub fn gen_dataset(seed: u64, n_samples: usize) -> Result<SynthDataset> {
    if n_samples == 0 {
        return Err(Error::invalid("n_samples must be at least 1"));
    }
    let samples: Vec<SynthSample> = (0..n_samples)
        .map(|i| {
            let scene = draw_scene(seed, i as u64);
            let text = caption(&scene.content);
            build(format!("synth-{seed}-{i:05}"), scene, text)
        })
        .collect();
    let manifest = Manifest::new("synthetic", samples.iter().map(|s| s.sample.clone()).collect())?;
    Ok(SynthDataset { manifest, samples })
}

fn fixture_contents() -> [SceneContent; 8] {
    use Distance::*;
    use Gaze::*;
    use Segment::*;
    use Speed::*;
    use TargetObject::*;
    use VehicleAction::*;
    use Weather::*;
    let c = |object, segment, speed, gaze, action, distance, weather| SceneContent {
        object,
        segment,
        speed,
        gaze,
        action,
        distance,
        weather,
    };
    [
        c(Pedestrian, PreRecognition, Slow, Away, Stopped, Far, Clear),
        c(Pedestrian, Recognition, Fast, TowardVehicle, Braking, Near, Rain),
        c(Pedestrian, Judgment, Still, TowardVehicle, Accelerating, Touching, Clear),
        c(Pedestrian, Action, Slow, TowardVehicle, Braking, Near, Rain),
        c(Vehicle, Avoidance, Fast, Away, Braking, Touching, Clear),
        c(Vehicle, PreRecognition, Still, Away, Accelerating, Far, Rain),
        c(Vehicle, Action, Slow, TowardVehicle, Stopped, Near, Clear),
        c(Vehicle, Judgment, Fast, Away, Braking, Far, Rain),
    ]
}

/// Eight fixed scenes with short captions; the seed only varies view
/// count, duration (6 to 10 frames) and event window.
pub fn gen_overfit_fixture(seed: u64) -> SynthDataset {
    let samples: Vec<SynthSample> = fixture_contents()
        .into_iter()
        .enumerate()
        .map(|(i, content)| {
            let mut rng = Rng64::new(seed ^ i as u64);
            let scene = draw_layout(&mut rng, content, (6, 10));
            build(format!("fixture-{i:02}"), scene, short_caption(&content))
        })
        .collect();
    let manifest = Manifest::new("overfit-fixture", samples.iter().map(|s| s.sample.clone()).collect())
        .expect("fixture ids are unique");
    SynthDataset { manifest, samples }
}

/// PNFR: magic, u32 version, u32 N_v, N_f, H, W, then f32 pixels view-major,
/// time-major, row-major. All views must have the same length and size.
pub fn write_frames<W: Write>(views: &[Vec<Frame>], sink: &mut W) -> Result<()> {
    let nv = views.len();
    let nf = views.first().map_or(0, Vec::len);
    let first = views
        .first()
        .and_then(|v| v.first())
        .ok_or_else(|| Error::invalid("no frames to write"))?;
    let (h, w) = (first.height(), first.width());
    if views.iter().any(|v| v.len() != nf) || views.iter().flatten().any(|f| (f.height(), f.width()) != (h, w)) {
        return Err(Error::shape("PNFR views must share frame count and size"));
    }
    let mut buf = Vec::with_capacity(24 + nv * nf * h * w * 4);
    buf.extend_from_slice(FRAME_MAGIC);
    for field in [FRAME_VERSION, nv as u32, nf as u32, h as u32, w as u32] {
        buf.extend_from_slice(&field.to_le_bytes());
    }
    for frame in views.iter().flatten() {
        for &p in frame.pixels() {
            buf.extend_from_slice(&p.to_le_bytes());
        }
    }
    sink.write_all(&buf)?;
    Ok(())
}

pub fn read_frames<R: Read>(source: &mut R) -> Result<Vec<Vec<Frame>>> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    if bytes.len() < 4 || &bytes[..4] != FRAME_MAGIC {
        return Err(Error::Format("not a PNFR frame file (bad magic)".into()));
    }
    if bytes.len() < 24 {
        return Err(Error::Corrupt("truncated PNFR header".into()));
    }
    let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
    if field(0) != FRAME_VERSION {
        return Err(Error::UnsupportedVersion(field(0)));
    }
    let (nv, nf, h, w) = (field(1) as usize, field(2) as usize, field(3) as usize, field(4) as usize);
    let expected = 24 + nv * nf * h * w * 4;
    if bytes.len() != expected {
        return Err(Error::Corrupt(format!(
            "PNFR shape ({nv}, {nf}, {h}, {w}) needs {expected} bytes, found {}",
            bytes.len()
        )));
    }
    let mut pixels = bytes[24..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    let mut views = Vec::with_capacity(nv);
    for _ in 0..nv {
        let mut frames = Vec::with_capacity(nf);
        for _ in 0..nf {
            let px: Vec<f32> = pixels.by_ref().take(h * w).collect();
            frames.push(Frame::new(h, w, px).map_err(|e| Error::Corrupt(e.to_string()))?);
        }
        views.push(frames);
    }
    Ok(views)
}

pub fn write_frames_file(views: &[Vec<Frame>], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_frames(views, &mut buf)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    atomic_write(path, &buf)
}

pub fn read_frames_file(path: &Path) -> Result<Vec<Vec<Frame>>> {
    read_frames(&mut fs::File::open(path)?)
}

/// Writes the manifest as `manifest.json` and one single-view PNFR file per
/// video ref under `dir`.
pub fn write_dataset(dataset: &SynthDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for s in &dataset.samples {
        for (view, reference) in s.views.iter().zip(&s.sample.video_refs) {
            write_frames_file(std::slice::from_ref(view), &dir.join(reference))?;
        }
    }
    atomic_write(
        &dir.join("manifest.json"),
        crate::datamodel::serialize_manifest(&dataset.manifest).as_bytes(),
    )
}

/// Loads every view of a sample from single-view PNFR files under `dir`.
pub fn load_views(sample: &Sample, dir: &Path) -> Result<Vec<Vec<Frame>>> {
    let mut views = Vec::with_capacity(sample.video_refs.len());
    for reference in &sample.video_refs {
        let mut file_views = read_frames_file(&dir.join(reference)).map_err(|e| e.in_sample(&sample.id))?;
        views.append(&mut file_views);
    }
    Ok(views)
}
