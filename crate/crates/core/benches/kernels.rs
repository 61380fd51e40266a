use apaseg_core::kernels::{ConvSpec, TransposeSpec};
use apaseg_core::metrics::hd95;
use apaseg_core::network::{APAUNet, APAUNetConfig};
use apaseg_core::par;
use apaseg_core::{Tape, Tensor};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn both<F: Fn()>(c: &mut Criterion, group: &str, f: F) {
    let mut g = c.benchmark_group(group);
    g.sample_size(10);
    g.bench_function(BenchmarkId::from_parameter("parallel"), |b| b.iter(&f));
    g.bench_function(BenchmarkId::from_parameter("sequential"), |b| b.iter(|| par::sequential(&f)));
    g.finish();
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::<f32>::uniform(&[2, 16, 32, 32, 32], -1.0, 1.0, &mut rng);
    let w = Tensor::<f32>::uniform(&[16, 4, 3, 3, 3], -0.1, 0.1, &mut rng);
    both(c, "conv3d 16ch 32^3 grouped, forward+backward", || {
        let mut t = Tape::new();
        let (xv, wv) = (t.variable(x.clone()), t.variable(w.clone()));
        let y = t.conv3d(xv, wv, None, ConvSpec::new(1, 1, 4)).unwrap();
        let s = t.sum(y);
        t.backward(s).unwrap();
    });

    let lo = Tensor::<f32>::uniform(&[2, 32, 16, 16, 16], -1.0, 1.0, &mut rng);
    let wt = Tensor::<f32>::uniform(&[32, 16, 2, 2, 2], -0.1, 0.1, &mut rng);
    both(c, "conv_transpose3d 32->16ch 16^3 stride 2", || {
        let mut t = Tape::new();
        let v = t.constant(lo.clone());
        let wv = t.constant(wt.clone());
        t.conv_transpose3d(v, wv, None, TransposeSpec::new(2, 0, 0, 1)).unwrap();
    });
}

fn network(c: &mut Criterion) {
    let cfg = APAUNetConfig { patch: Some([32; 3]), ..APAUNetConfig::desk() };
    let (net, store) = APAUNet::build::<f32>(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::<f32>::uniform(&[2, 1, 32, 32, 32], -1.0, 1.0, &mut rng);
    both(c, "network forward, desk config, batch 2 at 32^3", || {
        net.predict(&store, &x).unwrap();
    });
}

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 48;
    let ball = |r: f64, o: f64| -> Vec<u8> {
        (0..n * n * n)
            .map(|i| {
                let p = [i / (n * n), i / n % n, i % n].map(|c| c as f64 - n as f64 / 2.0 - o);
                u8::from(p.iter().map(|v| v * v).sum::<f64>() < r * r)
            })
            .collect()
    };
    let (a, b) = (ball(12.0, 0.0), ball(11.0, rng.gen_range(0.5..2.0)));
    both(c, "hd95 48^3 spheres", || {
        hd95(&a, &b, [n; 3], 1, [1.0; 3]).unwrap();
    });
}

criterion_group!(benches, conv, network, metrics);
criterion_main!(benches);
