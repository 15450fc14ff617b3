use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use dermfoundry_bench::{rng, scored_labels, uniform};
use dermfoundry_core::autograd::Graph;
use dermfoundry_core::evalstat::{binary_auroc, bootstrap_ci};
use dermfoundry_core::mil::{Abmil, AbmilConfig};
use dermfoundry_core::pretrain::{
    alignment_loss, generate_block_mask, PatchGridSpec, PretrainConfig, PretrainModel,
};
use dermfoundry_core::seqprep::{register_pair, warp, AkazeConfig, EuclideanTransform2D, RansacConfig};
use dermfoundry_core::survival::{km_raw, logrank_raw};
use dermfoundry_core::synth;
use dermfoundry_core::tbp::ud_outliers;
use rand::Rng;

fn pretrain(c: &mut Criterion) {
    let spec = PatchGridSpec::standard();
    let mut r = rng(0);
    c.bench_function("block_mask_118_of_196", |b| b.iter(|| generate_block_mask(&spec, 118, &mut r).unwrap()));
    let (p, t) = (uniform(118, 768, 1), uniform(118, 768, 2));
    c.bench_function("alignment_loss_118x768", |b| b.iter(|| alignment_loss(&p, &t).unwrap()));
    let model = PretrainModel::new(PretrainConfig::fixture(), 0).unwrap();
    let images = synth::lesion_images(4, model.spec.image_side, 3);
    let samples: Vec<_> = images.iter().map(|im| model.prepare(im, &mut r, false).unwrap()).collect();
    c.bench_function("fixture_batch_loss_and_backward", |b| {
        b.iter(|| {
            let mut g = Graph::new(&model.store);
            let (total, _, _) = model.batch_loss(&mut g, &samples);
            g.backward(total)
        })
    });
}

fn registration(c: &mut Criterion) {
    let mut r = rng(5);
    let fixed = synth::registration_scene(128, &mut r);
    let truth = EuclideanTransform2D::new(0.0, 7.0, -4.0).compose(&EuclideanTransform2D::about(0.1, 63.5, 63.5));
    let moving = warp(&fixed, &truth.inverse());
    let (a, rc) = (AkazeConfig::default(), RansacConfig::default());
    c.bench_function("register_pair_128px", |b| b.iter(|| register_pair(&fixed, &moving, &a, &rc)));
}

fn screening_and_mil(c: &mut Criterion) {
    let feats = uniform(2000, 64, 7);
    let owners: Vec<String> = (0..2000).map(|i| format!("p{}", i / 20)).collect();
    c.bench_function("ud_outliers_2000x64", |b| b.iter(|| ud_outliers(&feats, &owners).unwrap()));
    let cfg = AbmilConfig {
        embed_dim: 128,
        attention_dim: 64,
        ..AbmilConfig::default()
    };
    let model = Abmil::new(256, cfg, 0);
    let bag = uniform(500, 256, 8);
    c.bench_function("abmil_predict_500x256", |b| b.iter(|| model.predict(&bag).unwrap()));
}

fn statistics(c: &mut Criterion) {
    let (y, s) = scored_labels(1000, 9);
    c.bench_function("auroc_1000", |b| b.iter(|| binary_auroc(&y, &s)));
    let pairs: Vec<(bool, f64)> = y.iter().copied().zip(s.iter().copied()).collect();
    let auroc = |d: &[(bool, f64)]| {
        let (y, s): (Vec<bool>, Vec<f64>) = d.iter().copied().unzip();
        binary_auroc(&y, &s).unwrap_or(f64::NAN)
    };
    c.bench_function("bootstrap_auroc_1000x200", |b| b.iter(|| bootstrap_ci(&pairs, auroc, 200, 0.95, 0).unwrap()));
    let mut r = rng(10);
    c.bench_function("km_and_logrank_5000", |b| {
        b.iter_batched(
            || {
                let t: Vec<f64> = (0..5000).map(|_| r.random_range(0.1..100.0)).collect();
                let e: Vec<bool> = (0..5000).map(|_| r.random_bool(0.7)).collect();
                let g: Vec<bool> = (0..5000).map(|i| i % 2 == 0).collect();
                (t, e, g)
            },
            |(t, e, g)| (km_raw(&t, &e).unwrap(), logrank_raw(&t, &e, &g).unwrap()),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, pretrain, registration, screening_and_mil, statistics);
criterion_main!(benches);
