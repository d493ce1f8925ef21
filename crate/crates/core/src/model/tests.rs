use super::*;
use crate::autodiff::grad_check_params;
use crate::data::{generate_synthetic, load_embeddings, CaptionRecord, GeneratorConfig};
use crate::metrics::RelationalDictionary;

fn tiny_data(scenes: usize, seed: u64) -> (Vec<Scene<f64>>, Vec<CaptionRecord>, Vocabulary) {
    let cfg = GeneratorConfig {
        scenes,
        min_objects: 3,
        max_objects: 5,
        ..Default::default()
    };
    let (s, c) = generate_synthetic::<f64>(&cfg, seed).unwrap();
    let vocab = Vocabulary::build(c.iter().map(|r| r.tokens.as_slice()));
    (s, c, vocab)
}

fn tiny_model(config: ModelConfig, vocab: &Vocabulary, seed: u64) -> Model<f64> {
    let table = load_embeddings(None, &required_words(vocab)).unwrap();
    Model::new(config, vocab.clone(), &table, seed).unwrap()
}

fn small() -> ModelConfig {
    ModelConfig {
        k: 3,
        hidden: 8,
        ..Default::default()
    }
}

#[test]
fn ablation_switches_compose() {
    let base = ModelConfig::default();
    assert!(base.use_edges() && base.use_otag());
    let c = ModelConfig { edges_off: true, ..base.clone() };
    assert!(!c.use_edges() && !c.use_otag());
    let c = ModelConfig { slgc_off: true, ..base.clone() };
    assert!(!c.use_edges() && c.use_otag());
    let c = ModelConfig { otag_off: true, ..base.clone() };
    assert!(c.use_edges() && !c.use_otag());
    let c = ModelConfig { slgc_off: true, otag_off: true, ..base.clone() };
    assert!(!c.use_edges() && !c.use_otag());
    assert!(ModelConfig { k: 0, ..base }.validate().is_err());
}

#[test]
fn parameter_layout() {
    let (_, _, vocab) = tiny_data(3, 0);
    let m = tiny_model(ModelConfig { layers: 2, ..small() }, &vocab, 0);
    let p = m.params();
    for name in ["slgc0.w_v", "slgc1.w6", "otag.w_q", "decoder.w_out", "decoder.gru2.b_hn"] {
        assert!(p.id(name).is_ok(), "{name}");
    }
    for frozen in ["bank.horizontal", "bank.vertical", "decoder.embedding"] {
        assert!(!p.get(p.id(frozen).unwrap()).is_trainable(), "{frozen}");
    }
    assert_eq!(p.get(p.id("decoder.embedding").unwrap()).shape(), [vocab.len(), 300]);
}

#[test]
fn context_rows_follow_the_ablation() {
    let (scenes, _, vocab) = tiny_data(2, 1);
    for otag_off in [false, true] {
        let m = tiny_model(ModelConfig { otag_off, ..small() }, &vocab, 1);
        let g = m.graph(&scenes[0]).unwrap();
        let objs: Vec<usize> = (0..g.num_objects()).collect();
        let mut t = Tape::new();
        let ctx = m.context(&mut t, m.params(), &[(&g, &objs), (&g, &objs[..1])]).unwrap();
        assert_eq!(ctx.batch, objs.len() + 1);
        let want: usize = objs
            .iter()
            .chain(&objs[..1])
            .map(|&i| {
                let n = g.neighbors(i);
                if otag_off {
                    1 + n.len()
                } else {
                    n.len() + n.iter().map(|&j| g.neighbors(j).len()).sum::<usize>()
                }
            })
            .sum();
        assert_eq!(ctx.segments.len(), want);
    }
}

#[test]
fn composite_gradients_match_finite_differences() {
    let (scenes, caps, vocab) = tiny_data(2, 2);
    for config in [small(), ModelConfig { otag_off: true, ..small() }] {
        let m = tiny_model(config, &vocab, 2);
        let data = Dataset::new(scenes.clone(), &caps, &vocab, m.config().k).unwrap();
        let g = &data.graphs[0];
        let objs: Vec<usize> = data.samples.iter().filter(|s| s.scene == 0).map(|s| s.object).take(2).collect();
        let toks: Vec<&[usize]> = data
            .samples
            .iter()
            .filter(|s| s.scene == 0)
            .take(2)
            .map(|s| s.tokens.as_slice())
            .collect();
        let mut set = m.params().clone();
        let names = [
            "slgc0.w_alpha",
            "slgc0.w_e",
            "slgc0.w1",
            "slgc0.w5",
            "otag.w_q",
            "otag.w9",
            "decoder.w11",
            "decoder.gru1.w_ir",
        ];
        let ids: Vec<_> = names.iter().map(|n| set.id(n).unwrap()).collect();
        let checks = grad_check_params(
            |t, p| m.loss(t, p, &[(g, &objs)], &toks),
            &mut set,
            &ids,
            6,
            1e-4,
            3,
        )
        .unwrap();
        for c in &checks {
            assert!(c.max_rel_error < 1e-4, "{c:?}");
            if !(m.config().otag_off && c.name.starts_with("otag")) {
                assert!(c.max_abs_grad > 0.0, "{c:?}");
            }
        }
    }
}

#[test]
fn training_lowers_the_loss() {
    let (scenes, caps, vocab) = tiny_data(8, 3);
    let m = tiny_model(small(), &vocab, 3);
    let data = Dataset::new(scenes, &caps, &vocab, 3).unwrap();
    let cfg = TrainConfig {
        lr: 3e-3,
        seed: 3,
        ..Default::default()
    };
    let mut tr = Trainer::new(m, cfg).unwrap();
    let first = tr.run_epoch(&data).unwrap();
    let mut last = first.clone();
    for _ in 0..5 {
        last = tr.run_epoch(&data).unwrap();
    }
    assert_eq!(last.epoch, 6);
    assert_eq!(first.samples, data.len());
    assert!(last.loss < first.loss, "{} -> {}", first.loss, last.loss);
}

#[test]
fn batches_group_scenes_and_depend_on_the_epoch() {
    let (scenes, caps, vocab) = tiny_data(10, 4);
    let data = Dataset::new(scenes, &caps, &vocab, 3).unwrap();
    let mut tr = Trainer::new(tiny_model(small(), &vocab, 4), TrainConfig::default()).unwrap();
    let b0 = tr.batches(&data);
    assert!(b0.iter().all(|b| b.len() <= 12));
    let flat: Vec<usize> = b0.concat();
    let mut sorted = flat.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, (0..data.len()).collect::<Vec<_>>());
    // each scene's samples are contiguous
    let scenes: Vec<usize> = flat.iter().map(|&i| data.samples[i].scene).collect();
    let mut seen = std::collections::HashSet::new();
    for w in scenes.chunk_by(|a, b| a == b) {
        assert!(seen.insert(w[0]));
    }
    assert_eq!(b0, tr.batches(&data));
    tr.run_epoch(&data).unwrap();
    assert_ne!(b0, tr.batches(&data));
}

#[test]
fn resumed_training_replays_exactly() {
    let (scenes, caps, vocab) = tiny_data(6, 5);
    let data = Dataset::new(scenes, &caps, &vocab, 3).unwrap();
    let cfg = TrainConfig {
        lr: 1e-3,
        seed: 5,
        ..Default::default()
    };
    let mut straight = Trainer::new(tiny_model(small(), &vocab, 5), cfg.clone()).unwrap();
    straight.run_epoch(&data).unwrap();
    let ck = straight.checkpoint();
    let want = straight.run_epoch(&data).unwrap();

    let ck = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
    let mut resumed = Trainer::<f64>::resume(&ck).unwrap();
    assert_eq!(resumed.epochs_done(), 1);
    let got = resumed.run_epoch(&data).unwrap();
    assert_eq!(got, want);
    assert_eq!(resumed.model.weights(), straight.model.weights());

    let no_state = Checkpoint { train: None, ..ck };
    assert!(Trainer::<f64>::resume(&no_state).is_err());
    assert!(no_state.model::<f64>().is_ok());
}

#[test]
fn restored_model_captions_identically() {
    let (scenes, _, vocab) = tiny_data(3, 6);
    let m = tiny_model(small(), &vocab, 6);
    let tr = Trainer::new(m, TrainConfig::default()).unwrap();
    let ck = Checkpoint::from_json(&tr.checkpoint().to_json().unwrap()).unwrap();
    let back: Model<f64> = ck.model().unwrap();
    let ids = scenes[0].object_ids();
    let a = predict(&tr.model, &scenes[0], &ids).unwrap();
    let b = predict(&back, &scenes[0], &ids).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), scenes[0].len());
    assert!(a.iter().all(|p| p.caption.len() <= 30));

    let err = predict(&back, &scenes[0], &[999]).unwrap_err().to_string();
    assert!(err.contains("999") && err.contains("valid ids: 0"), "{err}");

    let json = serde_json::to_string(&a[0]).unwrap();
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["box"].as_array().unwrap().len(), 6);
    assert_eq!(serde_json::from_str::<Prediction>(&json).unwrap(), a[0]);

    let bad = Checkpoint {
        format_version: 99,
        ..ck
    };
    assert!(Checkpoint::from_json(&bad.to_json().unwrap()).is_err());
}

#[test]
fn evaluation_reports_and_rejects_unknown_words() {
    let (scenes, caps, vocab) = tiny_data(3, 7);
    let m = tiny_model(small(), &vocab, 7);
    let dict = RelationalDictionary::default();
    let r = evaluate(&m, &scenes, &caps, &[0.25, 0.5], &dict).unwrap();
    assert_eq!(r.reports.len(), 2);
    assert_eq!(r.reports[0].n, caps.len());
    assert_eq!(r.predictions.len(), caps.len());
    // ground-truth boxes open every gate
    assert_eq!(r.reports[0].cider, r.reports[1].cider);
    assert_eq!(r, evaluate(&m, &scenes, &caps, &[0.25, 0.5], &dict).unwrap());

    let mut odd = caps.clone();
    odd[0].tokens.push("zebra".into());
    let err = evaluate(&m, &scenes, &odd, &[0.5], &dict).unwrap_err().to_string();
    assert!(err.contains("zebra"), "{err}");
}

#[test]
fn sweep_has_one_row_per_depth_plus_otag() {
    let cfg = GeneratorConfig {
        scenes: 2,
        min_objects: 8,
        max_objects: 8,
        ..Default::default()
    };
    let (scenes, _) = generate_synthetic::<f64>(&cfg, 8).unwrap();
    let words: Vec<&str> = crate::slgc::HORIZONTAL_WORDS.iter().chain(&crate::slgc::VERTICAL_WORDS).copied().collect();
    let bank = SpatialWordBank::from_table(&load_embeddings(None, &words).unwrap());
    let rows = madgap_sweep(&scenes, &bank, &SweepConfig::default(), 8).unwrap();
    assert_eq!(rows.len(), 5);
    assert_eq!(rows.iter().map(|r| r.layers).collect::<Vec<_>>(), [1, 2, 3, 4, 1]);
    assert!(rows[4].otag && rows.iter().all(|r| r.madgap.is_finite()));
    assert_eq!(rows, madgap_sweep(&scenes, &bank, &SweepConfig::default(), 8).unwrap());
}
