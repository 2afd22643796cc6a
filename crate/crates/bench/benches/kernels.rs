use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use memefuse_bench::{random_image, random_tensor};
use memefuse_core::image::{patchify, ImagePipelineConfig};
use memefuse_core::nn::Forward;
use memefuse_core::{rng_stream, ParamStore, Tape, VitConfig, VitEncoder};

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul_fwd_bwd");
    for n in [64, 197] {
        let a = random_tensor(1, &[n, 128]);
        let b = random_tensor(2, &[128, 128]);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let tape = Tape::new();
                let (x, w) = (tape.leaf(a.clone(), true), tape.leaf(b.clone(), true));
                let y = tape.matmul(x, w).unwrap();
                let s = tape.sum(y);
                tape.backward(s).unwrap();
            })
        });
    }
    group.finish();
}

fn vit_forward(c: &mut Criterion) {
    let cfg = VitConfig { image_size: 224, ..VitConfig::test() };
    let mut store = ParamStore::<f32>::new();
    let vit = VitEncoder::new(cfg, &mut store, &mut rng_stream(0, 0)).unwrap();
    let patches = random_tensor(3, &[cfg.num_patches(), cfg.patch_dim()]);
    c.bench_function("vit_forward_197_tokens", |bench| {
        bench.iter(|| {
            let tape = Tape::new();
            let mut rng = rng_stream(0, 2);
            let mut fw = Forward { tape: &tape, params: &store, training: false, rng: &mut rng };
            let x = tape.constant(patches.clone());
            vit.forward(&mut fw, x).unwrap()
        })
    });
}

fn preprocess(c: &mut Criterion) {
    let pipeline = ImagePipelineConfig::default();
    let img = random_image(4, 480, 640);
    c.bench_function("preprocess_480x640", |bench| {
        bench.iter(|| patchify(&pipeline.process(&img).unwrap(), 16).unwrap())
    });
}

criterion_group!(benches, matmul, vit_forward, preprocess);
criterion_main!(benches);
