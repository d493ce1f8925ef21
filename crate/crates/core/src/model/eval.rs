use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Model;
use crate::data::{nearest_object, CaptionRecord, Scene, VerticalWord};
use crate::metrics::{score_reports, EvalRecord, RelationalDictionary, ScoreReport};
use crate::{Box3, Error, Result, Scalar};

/// One line of the prediction JSONL output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prediction {
    pub scene_id: String,
    pub object_id: usize,
    #[serde(rename = "box")]
    pub bbox: [f64; 6],
    pub caption: Vec<String>,
}

/// Greedy captions for the given object ids of one scene.
pub fn predict<T: Scalar>(model: &Model<T>, scene: &Scene<T>, object_ids: &[usize]) -> Result<Vec<Prediction>> {
    let mut idx = Vec::with_capacity(object_ids.len());
    for &id in object_ids {
        idx.push(scene.index_of(id).ok_or_else(|| {
            let valid: Vec<String> = scene.object_ids().iter().map(usize::to_string).collect();
            Error::contract(format!(
                "scene {} has no object {id}; valid ids: {}",
                scene.scene_id,
                valid.join(", ")
            ))
        })?);
    }
    if idx.is_empty() {
        return Ok(Vec::new());
    }
    let graph = model.graph(scene)?;
    let captions = model.caption(&graph, &idx)?;
    Ok(idx
        .iter()
        .zip(captions)
        .map(|(&i, caption)| {
            let o = &scene.objects[i];
            Prediction {
                scene_id: scene.scene_id.clone(),
                object_id: o.id,
                bbox: o.bbox.to_array().map(Scalar::as_f64),
                caption,
            }
        })
        .collect())
}

/// Agreement of the emitted vertical word with the corner rule, over
/// targets whose nearest object is strictly above or below them.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VerticalAccuracy {
    pub correct: usize,
    pub total: usize,
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub reports: Vec<ScoreReport>,
    pub vertical: VerticalAccuracy,
    #[serde(skip)]
    pub predictions: Vec<Prediction>,
}

fn emitted_vertical(caption: &[String]) -> VerticalWord {
    if caption.iter().any(|w| w == "top") {
        VerticalWord::Top
    } else if caption.iter().any(|w| w == "bottom") {
        VerticalWord::Bottom
    } else {
        VerticalWord::None
    }
}

/// Captions every referenced object of `scenes` with predicted box equal to
/// the ground-truth box, and scores the result at each IoU threshold.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    scenes: &[Scene<T>],
    captions: &[CaptionRecord],
    ks: &[f64],
    dict: &RelationalDictionary,
) -> Result<EvalReport> {
    let mut refs: BTreeMap<(&str, usize), Vec<Vec<String>>> = BTreeMap::new();
    for c in captions {
        if let Some(w) = c.tokens.iter().find(|w| model.vocab().get(w).is_none()) {
            return Err(Error::contract(format!(
                "caption word '{w}' in scene {} is not in the checkpoint vocabulary",
                c.scene_id
            )));
        }
        refs.entry((c.scene_id.as_str(), c.object_id)).or_default().push(c.tokens.clone());
    }
    let mut records = Vec::new();
    let mut predictions = Vec::new();
    let mut vertical = VerticalAccuracy::default();
    for scene in scenes {
        let ids: Vec<usize> = scene
            .object_ids()
            .into_iter()
            .filter(|&id| refs.contains_key(&(scene.scene_id.as_str(), id)))
            .collect();
        for p in predict(model, scene, &ids)? {
            let i = scene.index_of(p.object_id).expect("predicted object exists");
            let gt = scene.objects[i].bbox.to_array().map(Scalar::as_f64);
            let gt = Box3::from_array(gt)?;
            if let Some(r) = nearest_object(scene, i) {
                let oracle = VerticalWord::of(&scene.objects[i].bbox, &scene.objects[r].bbox);
                if oracle != VerticalWord::None {
                    vertical.total += 1;
                    vertical.correct += usize::from(emitted_vertical(&p.caption) == oracle);
                }
            }
            records.push(EvalRecord::new(
                gt,
                gt,
                p.caption.clone(),
                refs[&(scene.scene_id.as_str(), p.object_id)].clone(),
            )?);
            predictions.push(p);
        }
    }
    if records.is_empty() {
        return Err(Error::contract("no captioned objects to evaluate"));
    }
    vertical.accuracy = (vertical.total > 0).then(|| vertical.correct as f64 / vertical.total as f64);
    Ok(EvalReport {
        reports: score_reports(&records, ks, dict)?,
        vertical,
        predictions,
    })
}
