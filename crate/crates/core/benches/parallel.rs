use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use zerocd_core::adapt::{match_peers, pick_reference_domain};
use zerocd_core::cdm::CdmKind;
use zerocd_core::data::DomainRole;
use zerocd_core::embed::HashingEncoder;
use zerocd_core::par::Exec;
use zerocd_core::pretrain::{decoupling_terms, init_state, pretrain, PretrainConfig, SourceIndex};
use zerocd_core::synth::{generate, SynthConfig};

fn corpus() -> Vec<zerocd_core::data::DomainDataset> {
    let cfg = SynthConfig {
        n_students: 300,
        questions_per_domain: 60,
        logs_per_student: 16,
        ..SynthConfig::default()
    };
    generate(&cfg, 3).unwrap().0
}

fn modes() -> [(&'static str, Exec); 2] {
    [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)]
}

fn batch_gradient(c: &mut Criterion) {
    let sources: Vec<_> = corpus().into_iter().filter(|d| d.role == DomainRole::Source).collect();
    let index = SourceIndex::build(&sources, &HashingEncoder::new(32).unwrap()).unwrap();
    let batch: Vec<_> = index.logs.iter().flatten().take(256).copied().collect();
    let terms = decoupling_terms(&batch, &index.presence, 0.1).unwrap();
    let mut group = c.benchmark_group("batch_gradient");
    for kind in [CdmKind::Irt, CdmKind::NeuralCd] {
        let config = PretrainConfig {
            kind,
            dim: 32,
            hidden: [64, 32],
            ..PretrainConfig::default()
        };
        let state = init_state(&index, &config, 10).unwrap();
        for (name, exec) in modes() {
            group.bench_with_input(BenchmarkId::new(name, kind), &exec, |b, &exec| {
                b.iter(|| state.gradient(&index, &terms, exec))
            });
        }
    }
    group.finish();
}

fn peer_matching(c: &mut Criterion) {
    let all = corpus();
    let sources: Vec<_> = all.iter().filter(|d| d.role == DomainRole::Source).cloned().collect();
    let index = SourceIndex::build(&sources, &HashingEncoder::new(16).unwrap()).unwrap();
    let config = PretrainConfig {
        dim: 16,
        hidden: [16, 8],
        epochs: 1,
        ..PretrainConfig::default()
    };
    let bundle = pretrain(&index, &config, 10, Exec::Sequential).unwrap();
    let target = all.iter().find(|d| d.role == DomainRole::Target).unwrap();
    let split = zerocd_core::data::make_target_split(target, 0.1, 1).unwrap();
    let init = zerocd_core::adapt::init_target_states(&bundle, &target.domain_id, &target.students).unwrap();
    // sanity: a reference domain exists for every early bird
    for e in &split.early_bird_ids {
        pick_reference_domain(&bundle, init.state(e).unwrap(), e).unwrap();
    }
    let mut group = c.benchmark_group("peer_matching");
    for (name, exec) in modes() {
        group.bench_function(name, |b| {
            b.iter(|| match_peers(&bundle, &init, &split, 20, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, batch_gradient, peer_matching);
criterion_main!(benches);
