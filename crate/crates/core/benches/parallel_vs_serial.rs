//! Rayon fan-out versus the sequential fallback on the three hot paths:
//! a guided-loss batch gradient, a RISE map, and batch inference.
//!
//! Build with `--no-default-features` to measure the crate with rayon
//! compiled out entirely.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use teachsal::data::{generate_planted_dataset, PlantedTaskSpec};
use teachsal::loss::LossConfig;
use teachsal::model::{build_model, softmax, ArchId, ArchitectureSpec};
use teachsal::par;
use teachsal::saliency::{rise, RiseConfig};
use teachsal::tensor::Tensor;
use teachsal::training::{ComparisonResolution, Objective, TrainItem};

fn modes() -> [(&'static str, bool); 2] {
    [("parallel", false), ("serial", true)]
}

fn batch_gradient(c: &mut Criterion) {
    let bundle = generate_planted_dataset(&PlantedTaskSpec {
        num_per_split: [32, 2, 2, 2],
        ..Default::default()
    })
    .unwrap();
    let mut group = c.benchmark_group("batch_gradient");
    for arch in ArchId::REGISTERED {
        let spec = ArchitectureSpec::new(arch, (24, 24, 1), 2).unwrap();
        let model = build_model(&spec, 0).unwrap();
        let objective = Objective::new(&spec, LossConfig::cyborg(0.5), ComparisonResolution::FeatureGrid);
        let items: Vec<TrainItem> = bundle
            .tait_train
            .iter()
            .map(|s| TrainItem {
                image: &s.image,
                label: s.label,
                target: Some(objective.prepare_target(s.salience.as_ref().unwrap())),
            })
            .collect();
        for (name, serial) in modes() {
            group.bench_with_input(BenchmarkId::new(name, arch), &items, |b, items| {
                par::set_serial(serial);
                b.iter(|| black_box(objective.batch_loss_and_grad(&model, items).unwrap()));
            });
        }
    }
    par::set_serial(false);
    group.finish();
}

fn rise_map(c: &mut Criterion) {
    let spec = ArchitectureSpec::new(ArchId::Plain, (24, 24, 1), 2).unwrap();
    let model = build_model(&spec, 0).unwrap();
    let image = Tensor::from_vec(1, 24, 24, (0..576).map(|i| (i % 7) as f64 / 7.0).collect());
    let cfg = RiseConfig {
        num_masks: 500,
        ..Default::default()
    };
    let mut group = c.benchmark_group("rise");
    group.sample_size(10);
    for (name, serial) in modes() {
        group.bench_function(name, |b| {
            par::set_serial(serial);
            b.iter(|| black_box(rise(|t: &Tensor| softmax(&model.logits(t).unwrap())[1], &image, &cfg).unwrap()));
        });
    }
    par::set_serial(false);
    group.finish();
}

fn batch_inference(c: &mut Criterion) {
    let spec = ArchitectureSpec::new(ArchId::Residual, (24, 24, 1), 2).unwrap();
    let model = build_model(&spec, 0).unwrap();
    let batch: Vec<Tensor> = (0..128)
        .map(|k| Tensor::from_vec(1, 24, 24, (0..576).map(|i| ((i + k) % 11) as f64 / 11.0).collect()))
        .collect();
    let mut group = c.benchmark_group("inference_128");
    for (name, serial) in modes() {
        group.bench_function(name, |b| {
            par::set_serial(serial);
            b.iter(|| black_box(model.forward(&batch).unwrap()));
        });
    }
    par::set_serial(false);
    group.finish();
}

criterion_group!(benches, batch_gradient, rise_map, batch_inference);
criterion_main!(benches);
