use std::collections::BTreeMap;

use zerocd_core::adapt::{
    diagnose, finetune_cold_start, finetune_early_birds, init_target_states, pick_reference_domain, FinetuneConfig,
    SimulatedLogSet, TargetStates, TargetView,
};
use zerocd_core::cdm::{CdmKind, DiagnosticModel, ModelShape};
use zerocd_core::checkpoint::Checkpoint;
use zerocd_core::config::{RunConfig, StageEpochs};
use zerocd_core::data::{make_target_split, DomainDataset, DomainRole, PracticeLog, Question};
use zerocd_core::embed::{DomainEmbedding, HashingEncoder};
use zerocd_core::linalg::Matrix;
use zerocd_core::par::Exec;
use zerocd_core::pipeline::{run_adapt, run_pretrain, Corpus};
use zerocd_core::pretrain::{DecoupleHeads, DecoupledState, PretrainConfig, PretrainedBundle};
use zerocd_core::synth::{generate, SynthConfig};

fn bundle_with(states: &[(&str, &str, Vec<f64>, Vec<f64>)], kind: CdmKind, dim: usize) -> PretrainedBundle {
    let mut map: BTreeMap<String, BTreeMap<String, DecoupledState>> = BTreeMap::new();
    for (s, d, sha, spe) in states {
        map.entry(s.to_string()).or_default().insert(
            d.to_string(),
            DecoupledState {
                sha: sha.clone(),
                spe: spe.clone(),
            },
        );
    }
    PretrainedBundle {
        config: PretrainConfig::default(),
        model: DiagnosticModel::new(
            ModelShape {
                kind,
                dim,
                k_max: 3,
                hidden: [4, 3],
            },
            1,
        )
        .unwrap(),
        heads: DecoupleHeads::new(dim, 1),
        source_domains: vec!["a".into(), "b".into()],
        embeddings: BTreeMap::new(),
        states: map,
        history: vec![],
    }
}

fn target_dataset() -> DomainDataset {
    let questions = (0..6)
        .map(|q| Question {
            question_id: format!("q{q}"),
            domain_id: "t".into(),
            concept_ids: vec![format!("c{}", q % 3)],
            text: format!("topic c{} level{}", q % 3, q),
        })
        .collect();
    let mut logs = Vec::new();
    for (s, qs) in [("x", vec![0, 1, 2, 3]), ("y", vec![1, 4]), ("z", vec![0, 5])] {
        for q in qs {
            logs.push(PracticeLog {
                student_id: s.into(),
                question_id: format!("q{q}"),
                score: u8::from(q % 2 == 0),
                domain_id: "t".into(),
            });
        }
    }
    DomainDataset::new("t", DomainRole::Target, questions, logs).unwrap()
}

#[test]
fn averaged_initialization() {
    let b = bundle_with(
        &[
            ("x", "a", vec![1.0, 3.0], vec![0.0, 0.0]),
            ("x", "b", vec![3.0, 1.0], vec![0.0, 0.0]),
            ("y", "b", vec![0.5, -0.5], vec![0.0, 0.0]),
        ],
        CdmKind::Irt,
        2,
    );
    let st = init_target_states(&b, "t", &["y".into(), "x".into()]).unwrap();
    assert_eq!(st.state("x").unwrap(), &[2.0, 2.0]);
    assert_eq!(st.state("y").unwrap(), &[0.5, -0.5]);
    let err = init_target_states(&b, "t", &["x".into(), "ghost".into()]).unwrap_err();
    assert!(err.to_string().contains("ghost"));
}

#[test]
fn reference_domain_fixtures_and_scale_invariance() {
    let b = bundle_with(
        &[
            ("e", "a", vec![0.0; 2], vec![1.0, 0.0]),
            ("e", "b", vec![0.0; 2], vec![1.0, 1.0]),
        ],
        CdmKind::Irt,
        2,
    );
    assert_eq!(pick_reference_domain(&b, &[1.0, 0.0], "e").unwrap(), "a");
    assert_eq!(pick_reference_domain(&b, &[0.0, 1.0], "e").unwrap(), "b");
    for scale in [1e-6, 0.3, 7.0, 1e6] {
        assert_eq!(pick_reference_domain(&b, &[scale, 0.2 * scale], "e").unwrap(), "a");
    }
    // zero query: every cosine is 0, so the smallest id wins
    assert_eq!(pick_reference_domain(&b, &[0.0, 0.0], "e").unwrap(), "a");
    assert!(pick_reference_domain(&b, &[1.0, 0.0], "nobody").is_err());
}

fn setup(kind: CdmKind) -> (PretrainedBundle, DomainDataset, DomainEmbedding) {
    let states: Vec<(&str, &str, Vec<f64>, Vec<f64>)> = vec![
        ("x", "a", vec![0.1, -0.2, 0.3, 0.0], vec![0.2; 4]),
        ("y", "a", vec![-0.3, 0.1, 0.2, 0.4], vec![0.1; 4]),
        ("z", "b", vec![0.2, 0.2, -0.1, 0.1], vec![0.3; 4]),
    ];
    let b = bundle_with(&states, kind, 4);
    let t = target_dataset();
    let emb = DomainEmbedding::build(&t, &HashingEncoder::new(4).unwrap()).unwrap();
    (b, t, emb)
}

#[test]
fn early_bird_refinement_only_touches_early_birds() {
    for kind in [CdmKind::Irt, CdmKind::Mirt, CdmKind::NeuralCd] {
        let (b, t, emb) = setup(kind);
        let view = TargetView::new(&b.model, &emb, &t);
        let split = make_target_split(&t, 0.34, 4).unwrap();
        let before = init_target_states(&b, "t", &t.students).unwrap();
        let mut after = before.clone();
        let cfg = FinetuneConfig {
            lr: 0.05,
            epochs: 10,
            ..FinetuneConfig::default()
        };
        finetune_early_birds(&view, &mut after, &split, &cfg, Exec::Sequential).unwrap();
        for s in &split.unseen_ids {
            assert_eq!(before.state(s), after.state(s), "{kind}: unseen row moved");
        }
        let mut zero = before.clone();
        finetune_early_birds(
            &view,
            &mut zero,
            &split,
            &FinetuneConfig {
                epochs: 0,
                ..cfg
            },
            Exec::Sequential,
        )
        .unwrap();
        assert_eq!(zero, before);
    }
}

#[test]
fn single_correct_log_raises_prediction() {
    for kind in [CdmKind::Irt, CdmKind::Mirt, CdmKind::NeuralCd] {
        let (b, t, emb) = setup(kind);
        let view = TargetView::new(&b.model, &emb, &t);
        let mut states = init_target_states(&b, "t", &t.students).unwrap();
        let one = SimulatedLogSet {
            logs: vec![zerocd_core::adapt::SimulatedLog {
                student_id: "y".into(),
                question_id: "q0".into(),
                score: 1,
                donor_id: "x".into(),
                similarity: 1.0,
            }],
            reference_domains: BTreeMap::new(),
        };
        let q = view.question("q0").unwrap();
        let p0 = view.predict(states.state("y").unwrap(), q);
        let frozen = states.clone();
        let cfg = FinetuneConfig {
            lr: 0.01,
            epochs: 5,
            ..FinetuneConfig::default()
        };
        let out = finetune_cold_start(&view, &mut states, &one, &cfg, Exec::Sequential).unwrap();
        assert_eq!(out.n_holdout, 0);
        let p1 = view.predict(states.state("y").unwrap(), q);
        assert!(p1 > p0, "{kind}: {p0} -> {p1}");
        assert_eq!(states.state("x"), frozen.state("x"));
        assert_eq!(states.state("z"), frozen.state("z"));
    }
}

#[test]
fn empty_simulation_is_a_reported_noop() {
    let (b, t, emb) = setup(CdmKind::NeuralCd);
    let view = TargetView::new(&b.model, &emb, &t);
    let mut states = init_target_states(&b, "t", &t.students).unwrap();
    let before = states.clone();
    let out = finetune_cold_start(&view, &mut states, &SimulatedLogSet::default(), &FinetuneConfig::default(), Exec::Sequential).unwrap();
    assert!(out.skipped);
    assert_eq!(states, before);
}

#[test]
fn diagnosis_is_bounded_and_rejects_strangers() {
    for kind in [CdmKind::Irt, CdmKind::Mirt, CdmKind::NeuralCd] {
        let (b, t, emb) = setup(kind);
        let view = TargetView::new(&b.model, &emb, &t);
        let states = init_target_states(&b, "t", &t.students).unwrap();
        let m = diagnose(&view, &states, "x").unwrap();
        assert_eq!(m.len(), 3);
        assert!(m.iter().all(|&p| p > 0.0 && p < 1.0));
        assert!(diagnose(&view, &states, "nobody").is_err());
    }
}

#[test]
fn neuralcd_mastery_follows_fusion_direction() {
    let (mut b, t, emb) = setup(CdmKind::NeuralCd);
    // nonnegative student fusion: raising any state component cannot lower mastery
    b.model.set_student_fusion(&[0.3, 0.1, 0.0, 0.2, 0.05, 0.0, 0.1, 0.4], 0.0);
    let view = TargetView::new(&b.model, &emb, &t);
    let states = init_target_states(&b, "t", &t.students).unwrap();
    let base = diagnose(&view, &states, "x").unwrap();
    for j in 0..4 {
        let mut bumped = states.clone();
        let r = bumped.row_of("x").unwrap();
        bumped.states.row_mut(r)[j] += 0.5;
        let m = diagnose(&view, &bumped, "x").unwrap();
        assert!(m.iter().zip(&base).all(|(a, b)| a >= b));
    }
}

#[test]
fn target_states_survive_record_conversion() {
    let states = TargetStates {
        domain_id: "t".into(),
        students: vec!["a".into(), "b".into()],
        states: Matrix::from_rows(&[vec![0.1, 0.2], vec![-0.3, 1.0 / 3.0]]),
        refined: vec![true, false],
    };
    let rec = zerocd_core::checkpoint::TargetRecord::record_states(&states);
    assert_eq!(rec["b"].state, vec![-0.3, 1.0 / 3.0]);
    assert!(!rec["b"].refined);
}

fn tiny_config() -> RunConfig {
    RunConfig {
        dim: 8,
        hidden: [8, 4],
        early_bird_fraction: 0.1,
        peer_count: 5,
        epochs: StageEpochs::all(2),
        deterministic: true,
        synth: SynthConfig {
            n_students: 40,
            questions_per_domain: 20,
            concepts_per_domain: 4,
            logs_per_student: 8,
            ..SynthConfig::default()
        },
        ..RunConfig::desk_scale()
    }
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let config = tiny_config();
    let (ds, _) = generate(&config.synth, 1).unwrap();
    let corpus = Corpus::new(ds);
    let ck = run_pretrain(&config, &corpus).unwrap();
    let run = run_adapt(&config, &corpus, &ck).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for (name, c) in [("pre.json", &ck), ("adapted.json", &run.checkpoint)] {
        let path = dir.path().join(name);
        c.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(&loaded, c);
        let again = dir.path().join(format!("again_{name}"));
        loaded.save(&again).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }
    let bundle = ck.bundle().unwrap();
    assert_eq!(bundle.model, ck.model().unwrap());
    assert!(run.checkpoint.target_states.is_some());
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let config = tiny_config();
    let (ds, _) = generate(&config.synth, 2).unwrap();
    let corpus = Corpus::new(ds);
    let mut ck = run_pretrain(&config, &corpus).unwrap();
    ck.params.get_mut("heads.sha.bias").unwrap().pop();
    assert!(ck.bundle().is_err());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, "{\"meta\": 1}").unwrap();
    assert!(Checkpoint::load(&path).is_err());
}

#[test]
fn adapting_against_another_corpus_is_refused() {
    let config = tiny_config();
    let corpus = Corpus::new(generate(&config.synth, 3).unwrap().0);
    let other = Corpus::new(generate(&config.synth, 4).unwrap().0);
    let ck = run_pretrain(&config, &corpus).unwrap();
    assert!(run_adapt(&config, &other, &ck).is_err());
}
