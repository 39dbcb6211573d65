use zerocd_core::cdm::CdmKind;
use zerocd_core::data::DomainRole;
use zerocd_core::embed::HashingEncoder;
use zerocd_core::optim::Adam;
use zerocd_core::par::Exec;
use zerocd_core::pretrain::{decoupling_terms, init_state, pretrain, PretrainConfig, SourceIndex};
use zerocd_core::synth::{generate, SynthConfig};

fn sources(seed: u64) -> Vec<zerocd_core::data::DomainDataset> {
    let cfg = SynthConfig {
        n_students: 50,
        questions_per_domain: 25,
        concepts_per_domain: 5,
        logs_per_student: 8,
        ..SynthConfig::default()
    };
    generate(&cfg, seed)
        .unwrap()
        .0
        .into_iter()
        .filter(|d| d.role == DomainRole::Source)
        .collect()
}

#[test]
fn small_step_without_adversary_does_not_raise_batch_loss() {
    let src = sources(1);
    let index = SourceIndex::build(&src, &HashingEncoder::new(8).unwrap()).unwrap();
    let batch: Vec<_> = index.logs.iter().flatten().take(64).copied().collect();
    for kind in [CdmKind::Irt, CdmKind::Mirt, CdmKind::NeuralCd] {
        let config = PretrainConfig {
            kind,
            dim: 8,
            hidden: [8, 4],
            ..PretrainConfig::default()
        };
        let mut state = init_state(&index, &config, 5).unwrap();
        let terms = decoupling_terms(&batch, &index.presence, 0.0).unwrap();
        let g = state.gradient(&index, &terms, Exec::Sequential);
        let mut opt_m = Adam::new(state.model.n_params(), 1e-3);
        let mut opt_h = Adam::new(state.heads.params().len(), 1e-3);
        opt_m.step(state.model.params_mut(), &g.model);
        opt_h.step(state.heads.params_mut(), &g.heads);
        for (t, gt) in state.tables.iter_mut().zip(&g.tables) {
            Adam::new(t.as_slice().len(), 1e-3).step(t.as_mut_slice(), gt.as_slice());
        }
        state.model.project_monotone();
        let after = state.decoupling_loss(&index, &batch, 0.0, Exec::Sequential).unwrap();
        assert!(after <= g.loss, "{kind}: {} -> {after}", g.loss);
    }
}

#[test]
fn pretraining_is_reproducible_and_monotone() {
    let src = sources(2);
    let index = SourceIndex::build(&src, &HashingEncoder::new(8).unwrap()).unwrap();
    let config = PretrainConfig {
        kind: CdmKind::NeuralCd,
        dim: 8,
        hidden: [8, 4],
        lr: 0.02,
        batch_size: 64,
        epochs: 3,
        seed: 9,
        ..PretrainConfig::default()
    };
    let a = pretrain(&index, &config, 5, Exec::Sequential).unwrap();
    let b = pretrain(&index, &config, 5, Exec::Sequential).unwrap();
    let c = pretrain(&index, &config, 5, Exec::Parallel).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, c);
    assert!(a.model.is_monotone());
    assert!(!a.history.is_empty());
    // every student with logs in a domain has exactly one state pair there
    for (k, d) in src.iter().enumerate() {
        for s in &d.students {
            let st = a.state(s, &index.domain_ids[k]).unwrap();
            assert_eq!((st.sha.len(), st.spe.len()), (8, 8));
        }
    }
}

#[test]
fn rejects_bad_configuration() {
    let src = sources(3);
    let index = SourceIndex::build(&src, &HashingEncoder::new(8).unwrap()).unwrap();
    let base = PretrainConfig {
        dim: 8,
        hidden: [8, 4],
        epochs: 1,
        ..PretrainConfig::default()
    };
    for bad in [
        PretrainConfig { lr: 0.0, ..base.clone() },
        PretrainConfig { batch_size: 0, ..base.clone() },
        PretrainConfig { lambda_adv: -1.0, ..base.clone() },
    ] {
        assert!(pretrain(&index, &bad, 5, Exec::Sequential).is_err());
    }
    // k_max below the source concept count
    assert!(pretrain(&index, &base, 2, Exec::Sequential).is_err());
}

#[test]
fn divergence_is_reported() {
    let src = sources(4);
    let index = SourceIndex::build(&src, &HashingEncoder::new(8).unwrap()).unwrap();
    let config = PretrainConfig {
        dim: 8,
        hidden: [8, 4],
        epochs: 1,
        ..PretrainConfig::default()
    };
    let mut state = init_state(&index, &config, 5).unwrap();
    state.tables[0].as_mut_slice()[0] = f64::NAN;
    let batch: Vec<_> = index.logs[0].iter().take(8).copied().collect();
    let terms = decoupling_terms(&batch, &index.presence, 0.1).unwrap();
    let g = state.gradient(&index, &terms, Exec::Sequential);
    assert!(!g.loss.is_finite() || g.model.iter().any(|x| !x.is_finite()));
}
