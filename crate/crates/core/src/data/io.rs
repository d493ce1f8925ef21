use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FeaturePalette, ObjectProposal, Scene, FEATURE_DIM};
use crate::{Box3, Error, Result, Scalar};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawObject {
    id: usize,
    class: String,
    #[serde(rename = "box")]
    bbox: [f64; 6],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feature: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScene {
    scene_id: String,
    objects: Vec<RawObject>,
}

/// One line of the caption JSONL file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub scene_id: String,
    pub object_id: usize,
    pub tokens: Vec<String>,
}

fn scene_from_raw<T: Scalar>(raw: RawScene, palette: Option<&FeaturePalette>, loc: &str) -> Result<Scene<T>> {
    let mut objects = Vec::with_capacity(raw.objects.len());
    for o in raw.objects {
        let bbox = Box3::from_array(o.bbox.map(T::of))
            .map_err(|e| Error::parse(loc, format!("object {}: box: {e}", o.id)))?;
        let feature = match o.feature {
            Some(f) => {
                if f.len() != FEATURE_DIM {
                    return Err(Error::parse(
                        loc,
                        format!(
                            "object {}: field 'feature' has length {}, expected {FEATURE_DIM}",
                            o.id,
                            f.len()
                        ),
                    ));
                }
                f.into_iter().map(T::of).collect()
            }
            None => {
                let palette = palette.ok_or_else(|| {
                    Error::parse(loc, format!("object {}: missing field 'feature'", o.id))
                })?;
                palette
                    .featurize(&o.class, &bbox)
                    .map_err(|e| Error::parse(loc, format!("object {}: {e}", o.id)))?
            }
        };
        objects.push(ObjectProposal::new(o.id, o.class, bbox, feature).map_err(|e| Error::parse(loc, e.to_string()))?);
    }
    Scene::new(raw.scene_id, objects).map_err(|e| Error::parse(loc, e.to_string()))
}

/// Parses scene JSONL. Objects without a feature are featurized with
/// `palette`; without a palette that is an error.
pub fn parse_scenes<T: Scalar>(text: &str, palette: Option<&FeaturePalette>) -> Result<Vec<Scene<T>>> {
    let mut scenes = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let loc = format!("line {}", n + 1);
        let raw: RawScene = serde_json::from_str(line).map_err(|e| Error::parse(&loc, e.to_string()))?;
        scenes.push(scene_from_raw(raw, palette, &loc)?);
    }
    Ok(scenes)
}

pub fn load_scenes<T: Scalar>(path: &Path, palette: Option<&FeaturePalette>) -> Result<Vec<Scene<T>>> {
    let text = std::fs::read_to_string(path)?;
    parse_scenes(&text, palette).map_err(|e| match e {
        Error::Parse { location, message } => Error::Parse {
            location: format!("{}:{location}", path.display()),
            message,
        },
        other => other,
    })
}

pub fn write_scenes<T: Scalar>(out: &mut impl Write, scenes: &[Scene<T>]) -> Result<()> {
    for s in scenes {
        let raw = RawScene {
            scene_id: s.scene_id.clone(),
            objects: s
                .objects
                .iter()
                .map(|o| RawObject {
                    id: o.id,
                    class: o.class_label.clone(),
                    bbox: o.bbox.to_array().map(|v| v.as_f64()),
                    feature: Some(o.feature.iter().map(|v| v.as_f64()).collect()),
                })
                .collect(),
        };
        serde_json::to_writer(&mut *out, &raw)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn parse_captions(text: &str) -> Result<Vec<CaptionRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| Error::parse(format!("line {}", n + 1), e.to_string())))
        .collect()
}

pub fn load_captions(path: &Path) -> Result<Vec<CaptionRecord>> {
    parse_captions(&std::fs::read_to_string(path)?)
}

pub fn write_captions(out: &mut impl Write, captions: &[CaptionRecord]) -> Result<()> {
    for c in captions {
        serde_json::to_writer(&mut *out, c)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
