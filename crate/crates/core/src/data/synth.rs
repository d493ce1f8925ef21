use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CaptionRecord, FeaturePalette, ObjectProposal, Scene, MAX_OBJECTS};
use crate::geometry::{center_distance, iou3d, vertical_distances};
use crate::{Box3, Error, Result, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    /// Nominal `[h, w, l]`.
    pub size: [f64; 3],
}

fn class(name: &str, size: [f64; 3]) -> ClassSpec {
    ClassSpec {
        name: name.to_owned(),
        size,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub scenes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub classes: Vec<ClassSpec>,
    /// Grid pitch along x and y.
    pub spacing: [f64; 2],
    /// Half-width of the uniform center jitter.
    pub jitter: f64,
    /// Relative extent jitter.
    pub size_jitter: f64,
    /// Chance that a scene contains one object resting on another.
    pub stack_probability: f64,
    pub feature_seed: u64,
    pub max_retries: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            scenes: 200,
            min_objects: 4,
            max_objects: 8,
            classes: vec![
                class("chair", [0.9, 0.5, 0.5]),
                class("table", [0.75, 0.9, 1.5]),
                class("cabinet", [1.1, 0.6, 0.9]),
                class("lamp", [1.3, 0.35, 0.35]),
                class("box", [0.4, 0.45, 0.45]),
                class("shelf", [1.7, 0.4, 1.1]),
            ],
            spacing: [2.8, 3.6],
            jitter: 0.25,
            size_jitter: 0.15,
            stack_probability: 0.5,
            feature_seed: 7,
            max_retries: 50,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_owned()));
        if self.min_objects == 0 || self.min_objects > self.max_objects || self.max_objects > MAX_OBJECTS {
            return bad("objects per scene must satisfy 1 <= min_objects <= max_objects <= 256");
        }
        if self.classes.is_empty() {
            return bad("at least one class is required");
        }
        for c in &self.classes {
            if c.name.is_empty() || c.name.contains(char::is_whitespace) {
                return bad("class names must be single non-empty words");
            }
            if c.size.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
                return Err(Error::Config(format!("class '{}' has a non-positive size", c.name)));
            }
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return bad("spacing must be positive");
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return bad("jitter must be non-negative");
        }
        if !(0.0..1.0).contains(&self.size_jitter) {
            return bad("size_jitter must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.stack_probability) {
            return bad("stack_probability must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn palette(&self) -> FeaturePalette {
        FeaturePalette::new(
            self.classes.iter().map(|c| c.name.clone()).collect(),
            self.feature_seed,
        )
    }
}

fn sample_size(rng: &mut ChaCha8Rng, spec: &ClassSpec, jitter: f64) -> [f64; 3] {
    spec.size.map(|s| s * (1.0 + jitter * rng.random_range(-1.0..=1.0)))
}

fn overlaps_any<T: Scalar>(b: &Box3<T>, others: &[Box3<T>]) -> bool {
    others.iter().any(|o| iou3d(b, o) > T::zero())
}

fn generate_scene<T: Scalar>(
    cfg: &GeneratorConfig,
    palette: &FeaturePalette,
    rng: &mut ChaCha8Rng,
    scene_id: String,
) -> Result<Scene<T>> {
    let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let stacked = n >= 2 && rng.random_bool(cfg.stack_probability);
    let floor = n - usize::from(stacked);
    let side = (floor as f64).sqrt().ceil() as usize;
    let mut cells: Vec<(usize, usize)> = (0..side * side).map(|c| (c % side, c / side)).collect();
    cells.shuffle(rng);

    let mut boxes: Vec<Box3<T>> = Vec::with_capacity(n);
    let mut classes = Vec::with_capacity(n);
    let offset = (side as f64 - 1.0) / 2.0;
    for &(col, row) in cells.iter().take(floor) {
        let spec = &cfg.classes[rng.random_range(0..cfg.classes.len())];
        let mut placed = None;
        for _ in 0..cfg.max_retries.max(1) {
            let [h, w, l] = sample_size(rng, spec, cfg.size_jitter);
            let x = (col as f64 - offset) * cfg.spacing[0] + rng.random_range(-1.0..=1.0) * cfg.jitter;
            let y = (row as f64 - offset) * cfg.spacing[1] + rng.random_range(-1.0..=1.0) * cfg.jitter;
            let b = Box3::new(T::of(x), T::of(y), T::of(h / 2.0), T::of(h), T::of(w), T::of(l))?;
            if !overlaps_any(&b, &boxes) {
                placed = Some(b);
                break;
            }
        }
        let b = placed.ok_or_else(|| {
            Error::Generation(format!(
                "{scene_id}: no free placement for a {} after {} attempts",
                spec.name, cfg.max_retries
            ))
        })?;
        boxes.push(b);
        classes.push(spec.name.clone());
    }
    if stacked {
        let base = boxes[rng.random_range(0..floor)];
        let spec = &cfg.classes[rng.random_range(0..cfg.classes.len())];
        let mut placed = None;
        for _ in 0..cfg.max_retries.max(1) {
            let [h, w, l] = sample_size(rng, spec, cfg.size_jitter);
            let gap = rng.random_range(0.02..0.08);
            let x = base.cx().as_f64() + rng.random_range(-0.1..=0.1);
            let y = base.cy().as_f64() + rng.random_range(-0.1..=0.1);
            let z = base.z_max().as_f64() + gap + h / 2.0;
            let b = Box3::new(T::of(x), T::of(y), T::of(z), T::of(h), T::of(w), T::of(l))?;
            if !overlaps_any(&b, &boxes) {
                placed = Some(b);
                break;
            }
        }
        let b = placed.ok_or_else(|| Error::Generation(format!("{scene_id}: stacking failed")))?;
        boxes.push(b);
        classes.push(spec.name.clone());
    }

    let objects = boxes
        .into_iter()
        .zip(classes)
        .enumerate()
        .map(|(id, (b, c))| {
            let f = palette.featurize(&c, &b)?;
            ObjectProposal::new(id, c, b, f)
        })
        .collect::<Result<Vec<_>>>()?;
    Scene::new(scene_id, objects)
}

/// Deterministic synthetic scenes on a jittered grid with one caption per
/// object.
pub fn generate_synthetic<T: Scalar>(cfg: &GeneratorConfig, seed: u64) -> Result<(Vec<Scene<T>>, Vec<CaptionRecord>)> {
    cfg.validate()?;
    let palette = cfg.palette();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scenes = Vec::with_capacity(cfg.scenes);
    let mut captions = Vec::new();
    for s in 0..cfg.scenes {
        let scene: Scene<T> = generate_scene(cfg, &palette, &mut rng, format!("scene{s:04}"))?;
        for o in &scene.objects {
            captions.push(CaptionRecord {
                scene_id: scene.scene_id.clone(),
                object_id: o.id,
                tokens: template_caption(&scene, o.id)?,
            });
        }
        scenes.push(scene);
    }
    Ok((scenes, captions))
}

/// Vertical relation of box `j` with respect to box `i` by the corner rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VerticalWord {
    Top,
    Bottom,
    None,
}

impl VerticalWord {
    pub fn of<T: Scalar>(box_j: &Box3<T>, box_i: &Box3<T>) -> Self {
        let d = vertical_distances(box_j, box_i);
        if d.min() > T::zero() {
            VerticalWord::Top
        } else if d.max() < T::zero() {
            VerticalWord::Bottom
        } else {
            VerticalWord::None
        }
    }
}

/// Planar relation of box `j` with respect to box `i` in the scene frame
/// (`+x` right, `+y` front), by the dominant offset axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HorizontalWord {
    Left,
    Right,
    Front,
    Behind,
}

impl HorizontalWord {
    pub fn of<T: Scalar>(box_j: &Box3<T>, box_i: &Box3<T>) -> Self {
        let dx = box_j.cx() - box_i.cx();
        let dy = box_j.cy() - box_i.cy();
        if dx.abs() >= dy.abs() {
            if dx < T::zero() {
                HorizontalWord::Left
            } else {
                HorizontalWord::Right
            }
        } else if dy > T::zero() {
            HorizontalWord::Front
        } else {
            HorizontalWord::Behind
        }
    }
}

/// Index of the object closest to `idx` by center distance, lower index on
/// ties.
pub fn nearest_object<T: Scalar>(scene: &Scene<T>, idx: usize) -> Option<usize> {
    let b = &scene.objects[idx].bbox;
    let mut best: Option<(T, usize)> = None;
    for (j, o) in scene.objects.iter().enumerate() {
        if j == idx {
            continue;
        }
        let d = center_distance(b, &o.bbox);
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, j));
        }
    }
    best.map(|(_, j)| j)
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_owned).collect()
}

/// Template description of one object: a first-order clause against its
/// nearest object and, when its class repeats, an ordinal clause along x.
pub fn template_caption<T: Scalar>(scene: &Scene<T>, target_id: usize) -> Result<Vec<String>> {
    let t = scene.index_of(target_id).ok_or_else(|| {
        Error::contract(format!("scene {} has no object {target_id}", scene.scene_id))
    })?;
    let target = &scene.objects[t];
    let name = &target.class_label;
    let Some(r) = nearest_object(scene, t) else {
        return Ok(words(&format!("this is a {name} .")));
    };
    let reference = &scene.objects[r];
    let other = &reference.class_label;
    let relation = match VerticalWord::of(&target.bbox, &reference.bbox) {
        VerticalWord::Top => "is on top of",
        VerticalWord::Bottom => "is at the bottom of",
        VerticalWord::None => match HorizontalWord::of(&target.bbox, &reference.bbox) {
            HorizontalWord::Left => "is to the left of",
            HorizontalWord::Right => "is to the right of",
            HorizontalWord::Front => "is in front of",
            HorizontalWord::Behind => "is behind",
        },
    };
    let mut out = words(&format!("the {name} {relation} the {other} ."));

    let mut same: Vec<usize> = (0..scene.len())
        .filter(|&j| scene.objects[j].class_label == *name)
        .collect();
    if same.len() >= 2 {
        same.sort_by(|&a, &b| {
            let (xa, xb) = (scene.objects[a].bbox.cx(), scene.objects[b].bbox.cx());
            xa.partial_cmp(&xb).expect("finite").then(a.cmp(&b))
        });
        let n = same.len();
        let rank = same.iter().position(|&j| j == t).expect("target is in its class");
        let clause = match (rank, n - 1 - rank) {
            (0, _) => Some(format!("it is the leftmost {name} .")),
            (_, 0) => Some(format!("it is the rightmost {name} .")),
            (1, 1) => Some(format!("it is the middle {name} .")),
            (1, _) => Some(format!("it is the second {name} from the left .")),
            (_, 1) => Some(format!("it is the second {name} from the right .")),
            (2, _) => Some(format!("it is the third {name} from the left .")),
            (_, 2) => Some(format!("it is the third {name} from the right .")),
            _ => None,
        };
        if let Some(c) = clause {
            out.extend(words(&c));
        }
    }
    Ok(out)
}
