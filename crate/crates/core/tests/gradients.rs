use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zerocd_core::cdm::{CdmKind, DiagnosticModel, ModelShape};
use zerocd_core::data::{DomainDataset, DomainRole, PracticeLog, Question};
use zerocd_core::embed::HashingEncoder;
use zerocd_core::linalg::Matrix;
use zerocd_core::par::Exec;
use zerocd_core::pretrain::{decoupling_terms, init_state, PretrainConfig, SourceIndex};

const EPS: f64 = 1e-4;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-4)
}

fn random_case(kind: CdmKind, seed: u64) -> (DiagnosticModel, Vec<f64>, Vec<f64>, Matrix, Vec<f64>, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = rng.gen_range(2..7);
    let k = rng.gen_range(1..6);
    let shape = ModelShape {
        kind,
        dim,
        k_max: k + rng.gen_range(0..3),
        hidden: [rng.gen_range(1..7), rng.gen_range(1..5)],
    };
    let model = DiagnosticModel::new(shape, seed).unwrap();
    let mut vec = |n: usize| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
    let u = vec(dim);
    let v = vec(dim);
    let concepts = Matrix::from_vec(k, dim, vec(k * dim));
    let mut mask: Vec<f64> = (0..k).map(|_| f64::from(u8::from(rng.gen_bool(0.5)))).collect();
    mask[rng.gen_range(0..k)] = 1.0;
    let y = f64::from(u8::from(rng.gen_bool(0.5)));
    (model, u, v, concepts, mask, y)
}

#[test]
fn model_gradients_match_finite_differences() {
    for kind in [CdmKind::Irt, CdmKind::Mirt, CdmKind::NeuralCd] {
        let mut worst: f64 = 0.0;
        for seed in 0..25 {
            let (mut model, mut u, v, concepts, mask, y) = random_case(kind, 1000 + seed);
            let g = model.grad(&u, &v, &concepts, &mask, y).unwrap();
            for i in 0..model.n_params() {
                let x = model.params()[i];
                model.params_mut()[i] = x + EPS;
                let up = model.loss(&u, &v, &concepts, &mask, y).unwrap();
                model.params_mut()[i] = x - EPS;
                let down = model.loss(&u, &v, &concepts, &mask, y).unwrap();
                model.params_mut()[i] = x;
                worst = worst.max(rel_err(g.params[i], (up - down) / (2.0 * EPS)));
            }
            for i in 0..u.len() {
                let x = u[i];
                u[i] = x + EPS;
                let up = model.loss(&u, &v, &concepts, &mask, y).unwrap();
                u[i] = x - EPS;
                let down = model.loss(&u, &v, &concepts, &mask, y).unwrap();
                u[i] = x;
                worst = worst.max(rel_err(g.state[i], (up - down) / (2.0 * EPS)));
            }
        }
        assert!(worst < 1e-4, "{kind}: worst relative error {worst:e}");
    }
}

fn tiny_sources() -> Vec<DomainDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    ["a", "b"]
        .iter()
        .map(|d| {
            let questions: Vec<Question> = (0..4)
                .map(|q| Question {
                    question_id: format!("q{q}"),
                    domain_id: d.to_string(),
                    concept_ids: vec![format!("{d}c{}", q % 2)],
                    text: format!("item {d} {q} tier{}", q % 3),
                })
                .collect();
            let mut logs = Vec::new();
            for s in 0..3 {
                // student 2 is absent from domain b
                if *d == "b" && s == 2 {
                    continue;
                }
                for q in 0..3 {
                    logs.push(PracticeLog {
                        student_id: format!("s{s}"),
                        question_id: format!("q{}", (q + s) % 4),
                        score: u8::from(rng.gen_bool(0.5)),
                        domain_id: d.to_string(),
                    });
                }
            }
            DomainDataset::new(*d, DomainRole::Source, questions, logs).unwrap()
        })
        .collect()
}

#[test]
fn decoupling_gradient_matches_finite_differences() {
    let sources = tiny_sources();
    let index = SourceIndex::build(&sources, &HashingEncoder::new(4).unwrap()).unwrap();
    let batch: Vec<_> = index.logs.iter().flatten().copied().collect();
    for kind in [CdmKind::Irt, CdmKind::Mirt, CdmKind::NeuralCd] {
        let config = PretrainConfig {
            kind,
            dim: 4,
            hidden: [5, 3],
            seed: 3,
            ..PretrainConfig::default()
        };
        let mut state = init_state(&index, &config, 2).unwrap();
        let terms = decoupling_terms(&batch, &index.presence, 0.3).unwrap();
        let g = state.gradient(&index, &terms, Exec::Sequential);
        let loss = |s: &zerocd_core::pretrain::TrainState| s.decoupling_loss(&index, &batch, 0.3, Exec::Sequential).unwrap();
        assert!((g.loss - loss(&state)).abs() < 1e-12);

        let mut worst: f64 = 0.0;
        for i in 0..state.heads.params().len() {
            let x = state.heads.params()[i];
            state.heads.params_mut()[i] = x + EPS;
            let up = loss(&state);
            state.heads.params_mut()[i] = x - EPS;
            let down = loss(&state);
            state.heads.params_mut()[i] = x;
            worst = worst.max(rel_err(g.heads[i], (up - down) / (2.0 * EPS)));
        }
        for d in 0..state.tables.len() {
            for i in 0..state.tables[d].as_slice().len() {
                let x = state.tables[d].as_slice()[i];
                state.tables[d].as_mut_slice()[i] = x + EPS;
                let up = loss(&state);
                state.tables[d].as_mut_slice()[i] = x - EPS;
                let down = loss(&state);
                state.tables[d].as_mut_slice()[i] = x;
                worst = worst.max(rel_err(g.tables[d].as_slice()[i], (up - down) / (2.0 * EPS)));
            }
        }
        for i in 0..state.model.n_params() {
            let x = state.model.params()[i];
            state.model.params_mut()[i] = x + EPS;
            let up = loss(&state);
            state.model.params_mut()[i] = x - EPS;
            let down = loss(&state);
            state.model.params_mut()[i] = x;
            worst = worst.max(rel_err(g.model[i], (up - down) / (2.0 * EPS)));
        }
        assert!(worst < 1e-4, "{kind}: worst relative error {worst:e}");
    }
}

#[test]
fn parallel_and_sequential_gradients_agree() {
    let sources = tiny_sources();
    let index = SourceIndex::build(&sources, &HashingEncoder::new(4).unwrap()).unwrap();
    let batch: Vec<_> = index.logs.iter().flatten().copied().collect();
    let config = PretrainConfig {
        dim: 4,
        hidden: [5, 3],
        ..PretrainConfig::default()
    };
    let state = init_state(&index, &config, 2).unwrap();
    let terms = decoupling_terms(&batch, &index.presence, 0.1).unwrap();
    let a = state.gradient(&index, &terms, Exec::Sequential);
    let b = state.gradient(&index, &terms, Exec::Parallel);
    assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    assert_eq!(a.model, b.model);
    assert_eq!(a.heads, b.heads);
}
