use std::collections::HashSet;

use super::*;
use crate::geometry::{center_distance, corners, iou3d};

fn cube(x: f64, y: f64, z: f64, s: f64) -> Box3<f64> {
    Box3::new(x, y, z, s, s, s).unwrap()
}

fn scene_of(items: &[(&str, Box3<f64>)]) -> Scene<f64> {
    let objects = items
        .iter()
        .enumerate()
        .map(|(i, (c, b))| ObjectProposal::new(i, *c, *b, vec![0.0; FEATURE_DIM]).unwrap())
        .collect();
    Scene::new("s", objects).unwrap()
}

fn line_with_feature_len(n: usize) -> String {
    let f: Vec<String> = (0..n).map(|i| format!("{}", i as f64 * 0.01)).collect();
    format!(
        r#"{{"scene_id":"a","objects":[{{"id":0,"class":"chair","box":[0,0,0.5,1,1,1],"feature":[{}]}}]}}"#,
        f.join(",")
    )
}

#[test]
fn empty_input_gives_no_scenes() {
    assert!(parse_scenes::<f64>("", None).unwrap().is_empty());
}

#[test]
fn one_line_one_scene() {
    let s = parse_scenes::<f64>(&line_with_feature_len(128), None).unwrap();
    assert_eq!(s.len(), 1);
    assert_eq!(s[0].objects[0].class_label, "chair");
    assert_eq!(s[0].objects[0].bbox.h(), 1.0);
}

#[test]
fn short_feature_names_field_and_line() {
    let text = format!("{}\n{}", line_with_feature_len(128), line_with_feature_len(127));
    let err = parse_scenes::<f64>(&text, None).unwrap_err().to_string();
    assert!(err.contains("line 2"), "{err}");
    assert!(err.contains("feature"), "{err}");
}

#[test]
fn malformed_json_and_bad_boxes_are_located() {
    let err = parse_scenes::<f64>("{not json", None).unwrap_err().to_string();
    assert!(err.starts_with("line 1"), "{err}");
    let bad = line_with_feature_len(128).replace("[0,0,0.5,1,1,1]", "[0,0,0.5,-1,1,1]");
    assert!(parse_scenes::<f64>(&bad, None).is_err());
    let dup = r#"{"scene_id":"a","objects":[{"id":0,"class":"box","box":[0,0,0,1,1,1]},{"id":0,"class":"box","box":[3,0,0,1,1,1]}]}"#;
    let palette = GeneratorConfig::default().palette();
    assert!(parse_scenes::<f64>(dup, Some(&palette)).is_err());
}

#[test]
fn missing_feature_is_computed() {
    let line = r#"{"scene_id":"a","objects":[{"id":4,"class":"lamp","box":[1,2,0.6,1.2,0.3,0.3]}]}"#;
    assert!(parse_scenes::<f64>(line, None).is_err());
    let palette = GeneratorConfig::default().palette();
    let s = parse_scenes::<f64>(line, Some(&palette)).unwrap();
    let expect = featurize_object("lamp", &s[0].objects[0].bbox, &palette).unwrap();
    assert_eq!(s[0].objects[0].feature, expect);
}

#[test]
fn scene_jsonl_round_trip() {
    let cfg = GeneratorConfig {
        scenes: 5,
        ..Default::default()
    };
    let (scenes, captions) = generate_synthetic::<f64>(&cfg, 3).unwrap();
    let mut buf = Vec::new();
    write_scenes(&mut buf, &scenes).unwrap();
    let back = parse_scenes::<f64>(std::str::from_utf8(&buf).unwrap(), None).unwrap();
    assert_eq!(back, scenes);

    let mut buf = Vec::new();
    write_captions(&mut buf, &captions).unwrap();
    assert_eq!(parse_captions(std::str::from_utf8(&buf).unwrap()).unwrap(), captions);
}

#[test]
fn generation_is_deterministic() {
    let cfg = GeneratorConfig {
        scenes: 20,
        ..Default::default()
    };
    let a = generate_synthetic::<f64>(&cfg, 11).unwrap();
    let b = generate_synthetic::<f64>(&cfg, 11).unwrap();
    assert_eq!(a, b);
    let c = generate_synthetic::<f64>(&cfg, 12).unwrap();
    assert_ne!(a.0, c.0);
}

#[test]
fn forced_stacking_puts_one_box_above_the_other() {
    let cfg = GeneratorConfig {
        scenes: 30,
        min_objects: 2,
        max_objects: 2,
        stack_probability: 1.0,
        ..Default::default()
    };
    let (scenes, _) = generate_synthetic::<f64>(&cfg, 5).unwrap();
    for s in &scenes {
        let (a, b) = (&s.objects[0].bbox, &s.objects[1].bbox);
        assert_eq!(iou3d(a, b), 0.0);
        // brute force over all corner pairs
        let lo = corners(b)
            .iter()
            .flat_map(|p| corners(a).map(|q| p[2] - q[2]))
            .fold(f64::INFINITY, f64::min);
        assert!(lo > 0.0, "{}", s.scene_id);
        assert!(crate::geometry::vertical_distances(b, a).min() > 0.0);
    }
}

#[test]
fn counts_scale_with_config() {
    let cfg = GeneratorConfig {
        scenes: 200,
        min_objects: 6,
        max_objects: 6,
        ..Default::default()
    };
    let (scenes, captions) = generate_synthetic::<f64>(&cfg, 1).unwrap();
    assert_eq!(scenes.iter().map(Scene::len).sum::<usize>(), 1200);
    assert!(captions.len() >= 1200);
    for s in &scenes {
        for o in &s.objects {
            assert!(captions.iter().any(|c| c.scene_id == s.scene_id && c.object_id == o.id));
        }
        let boxes = s.boxes();
        for i in 0..boxes.len() {
            for j in i + 1..boxes.len() {
                assert_eq!(iou3d(&boxes[i], &boxes[j]), 0.0);
            }
        }
    }
}

#[test]
fn invalid_config_is_rejected() {
    let cfg = GeneratorConfig {
        min_objects: 5,
        max_objects: 3,
        ..Default::default()
    };
    assert!(matches!(generate_synthetic::<f64>(&cfg, 0), Err(Error::Config(_))));
    let cfg = GeneratorConfig {
        stack_probability: 1.5,
        ..Default::default()
    };
    assert!(cfg.validate().is_err());
}

#[test]
fn infeasible_placement_is_a_generation_error() {
    let cfg = GeneratorConfig {
        scenes: 3,
        min_objects: 9,
        max_objects: 9,
        spacing: [0.1, 0.1],
        jitter: 0.0,
        max_retries: 5,
        ..Default::default()
    };
    assert!(matches!(generate_synthetic::<f64>(&cfg, 0), Err(Error::Generation(_))));
}

#[test]
fn stacked_target_mentions_top() {
    let s = scene_of(&[("box", cube(0.0, 0.0, 0.5, 1.0)), ("lamp", cube(0.0, 0.0, 2.0, 1.0))]);
    let upper = template_caption(&s, 1).unwrap();
    assert!(upper.contains(&"top".to_owned()), "{upper:?}");
    assert_eq!(upper.join(" "), "the lamp is on top of the box .");
    let lower = template_caption(&s, 0).unwrap();
    assert!(lower.contains(&"bottom".to_owned()), "{lower:?}");
}

#[test]
fn rightmost_of_three() {
    let s = scene_of(&[
        ("chair", cube(0.0, 0.0, 0.5, 1.0)),
        ("chair", cube(3.0, 0.0, 0.5, 1.0)),
        ("chair", cube(6.0, 0.0, 0.5, 1.0)),
    ]);
    let c = template_caption(&s, 2).unwrap().join(" ");
    assert_eq!(c, "the chair is to the right of the chair . it is the rightmost chair .");
    assert!(template_caption(&s, 1).unwrap().contains(&"middle".to_owned()));
    assert!(template_caption(&s, 0).unwrap().contains(&"leftmost".to_owned()));
}

#[test]
fn single_object_caption_has_no_relation() {
    let s = scene_of(&[("shelf", cube(0.0, 0.0, 0.5, 1.0))]);
    let c = template_caption(&s, 0).unwrap();
    let dict = ["left", "right", "front", "behind", "top", "bottom", "leftmost", "rightmost"];
    assert!(c.iter().all(|w| !dict.contains(&w.as_str())));
    assert!(template_caption(&s, 9).is_err());
}

/// Recomputes the first-order relation word from raw corner coordinates.
fn oracle_relation(target: &Box3<f64>, reference: &Box3<f64>) -> &'static str {
    let (ct, cr) = (corners(target), corners(reference));
    let diffs: Vec<f64> = ct.iter().flat_map(|p| cr.map(|q| p[2] - q[2])).collect();
    if diffs.iter().all(|&d| d > 0.0) {
        return "top";
    }
    if diffs.iter().all(|&d| d < 0.0) {
        return "bottom";
    }
    let dx = target.cx() - reference.cx();
    let dy = target.cy() - reference.cy();
    match (dx.abs() >= dy.abs(), dx < 0.0, dy > 0.0) {
        (true, true, _) => "left",
        (true, false, _) => "right",
        (false, _, true) => "front",
        (false, _, false) => "behind",
    }
}

#[test]
fn generated_relations_agree_with_oracle() {
    let cfg = GeneratorConfig {
        scenes: 100,
        ..Default::default()
    };
    let (scenes, captions) = generate_synthetic::<f64>(&cfg, 21).unwrap();
    let mut stacked = 0;
    for c in &captions {
        let s = scenes.iter().find(|s| s.scene_id == c.scene_id).unwrap();
        let t = s.index_of(c.object_id).unwrap();
        let r = (0..s.len())
            .filter(|&j| j != t)
            .min_by(|&a, &b| {
                let da = center_distance(&s.objects[t].bbox, &s.objects[a].bbox);
                let db = center_distance(&s.objects[t].bbox, &s.objects[b].bbox);
                da.partial_cmp(&db).unwrap()
            })
            .unwrap();
        let word = oracle_relation(&s.objects[t].bbox, &s.objects[r].bbox);
        stacked += usize::from(word == "top" || word == "bottom");
        // the relation word sits in the first clause
        let first: Vec<&str> = c.tokens.iter().take_while(|w| *w != ".").map(String::as_str).collect();
        assert!(first.contains(&word), "{:?} expected {word}", c.tokens);
        for other in ["top", "bottom", "left", "right", "front", "behind"] {
            if other != word {
                assert!(!first.contains(&other), "{:?}", c.tokens);
            }
        }
    }
    assert!(stacked > 20);
}

#[test]
fn vocabulary_covers_generated_corpus() {
    let (_, captions) = generate_synthetic::<f64>(&GeneratorConfig::default(), 2).unwrap();
    let vocab = Vocabulary::build(captions.iter().map(|c| c.tokens.as_slice()));
    for c in &captions {
        let enc = vocab.encode(&c.tokens);
        assert!(!enc.contains(&UNK));
        assert_eq!(vocab.decode(&enc), c.tokens);
        let sample = CaptionSample::new(&c.scene_id, c.object_id, enc).unwrap();
        assert!(sample.tokens.len() <= MAX_CAPTION_TOKENS + 2);
    }
}

#[test]
fn vocabulary_bijection_and_serde() {
    let corpus = [vec!["b".to_owned(), "a".to_owned(), "b".to_owned()]];
    let v = Vocabulary::build(corpus.iter().map(Vec::as_slice));
    assert_eq!(v.tokens(), ["<pad>", "<start>", "<end>", "<unk>", "a", "b"]);
    for (i, t) in v.tokens().iter().enumerate() {
        assert_eq!(v.index(t), i);
        assert_eq!(v.token(i), t);
    }
    assert_eq!(v.index("zzz"), UNK);
    let json = serde_json::to_string(&v).unwrap();
    assert_eq!(serde_json::from_str::<Vocabulary>(&json).unwrap(), v);
    assert!(serde_json::from_str::<Vocabulary>(r#"["a","b"]"#).is_err());
    assert!(Vocabulary::from_tokens(
        ["<pad>", "<start>", "<end>", "<unk>", "a", "a"].map(String::from).to_vec()
    )
    .is_err());
}

#[test]
fn encoding_truncates_to_thirty_words() {
    let long: Vec<String> = (0..40).map(|i| format!("w{i}")).collect();
    let v = Vocabulary::build([long.as_slice()]);
    let enc = v.encode(&long);
    assert_eq!(enc.len(), MAX_CAPTION_TOKENS + 2);
    assert_eq!(enc[0], START);
    assert_eq!(*enc.last().unwrap(), END);
    assert!(CaptionSample::new("s", 0, vec![START, 5]).is_err());
}

#[test]
fn pseudo_embeddings_are_stable_unit_vectors() {
    let a = pseudo_embedding::<f64>("left");
    assert_eq!(a, pseudo_embedding::<f64>("left"));
    assert_eq!(a.len(), EMBED_DIM);
    let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!((norm - 1.0).abs() < 1e-12);
    // frozen leading values guard against drift across platforms
    assert_eq!(
        [a[0], a[1], a[2]],
        [0.061921919982932956, 0.035045035040624374, -0.03464488915847617]
    );
    assert!(a.iter().all(|x| x.is_finite()));
}

#[test]
fn embedding_file_values_pass_through() {
    let vals: Vec<String> = (0..EMBED_DIM).map(|i| format!("{}", i as f64 / 7.0)).collect();
    let text = format!("left {}\nunused {}\n", vals.join(" "), vals.join(" "));
    let table = parse_embeddings::<f64>(&text, &["left", "right"]).unwrap();
    let left = table.get("left").unwrap();
    for (i, v) in left.iter().enumerate() {
        assert_eq!(*v, i as f64 / 7.0);
    }
    assert_eq!(table.get("right").unwrap(), pseudo_embedding::<f64>("right").as_slice());
    assert!(table.get("unused").is_none());

    let short = format!("ok {}\nleft 1 2 3\n", vals.join(" "));
    let err = parse_embeddings::<f64>(&short, &["left"]).unwrap_err().to_string();
    assert!(err.contains("line 2"), "{err}");
}

#[test]
fn embedding_file_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("emb.txt");
    let vals: Vec<String> = (0..EMBED_DIM).map(|_| "0.5".to_owned()).collect();
    std::fs::write(&p, format!("top {}\n", vals.join(" "))).unwrap();
    let t = load_embeddings::<f64>(Some(&p), &["top"]).unwrap();
    assert!(t.get("top").unwrap().iter().all(|&v| v == 0.5));
    let m = t.matrix(&["top", "bottom"]);
    assert_eq!(m.shape(), [2, EMBED_DIM]);
}

#[test]
fn shipped_vocabulary_has_distinct_embeddings() {
    let (_, captions) = generate_synthetic::<f64>(&GeneratorConfig::default(), 2).unwrap();
    let vocab = Vocabulary::build(captions.iter().map(|c| c.tokens.as_slice()));
    let table = load_embeddings::<f64>(None, vocab.tokens()).unwrap();
    let vs: Vec<&[f64]> = vocab.tokens().iter().map(|w| table.get(w).unwrap()).collect();
    for i in 0..vs.len() {
        for j in i + 1..vs.len() {
            let dot: f64 = vs[i].iter().zip(vs[j]).map(|(a, b)| a * b).sum();
            assert!(dot < 0.5, "{} vs {}", vocab.token(i), vocab.token(j));
        }
    }
}

#[test]
fn featurizer_properties() {
    let palette = GeneratorConfig::default().palette();
    let b = cube(1.0, 2.0, 0.5, 1.0);
    let f = featurize_object("chair", &b, &palette).unwrap();
    assert_eq!(f.len(), FEATURE_DIM);
    assert_eq!(f, featurize_object("chair", &b, &palette).unwrap());
    let g = featurize_object("table", &b, &palette).unwrap();
    let diff: f64 = f.iter().zip(&g).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    assert!(diff > 0.0);
    assert!(featurize_object("piano", &b, &palette).is_err());
}

#[test]
fn split_is_stable_and_roughly_proportional() {
    let ids: Vec<String> = (0..1000).map(|i| format!("scene{i:04}")).collect();
    let val = ids.iter().filter(|s| split_of(s, 20) == Split::Val).count();
    assert!((150..250).contains(&val), "{val}");
    assert!(ids.iter().all(|s| split_of(s, 20) == split_of(s, 20)));
    let set: HashSet<_> = ids.iter().filter(|s| split_of(s, 0) == Split::Val).collect();
    assert!(set.is_empty());
}
