use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use hourglass_bench::batch_for;
use hourglass_core::costmodel::cost_table;
use hourglass_core::losses::ctc_nll;
use hourglass_core::numerics::RngStream;
use hourglass_core::{CostInput, Graph, HourglassModel, Mode, ModelConfig, Tensor};

fn training_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("loss_and_backward");
    group.sample_size(10);
    for mode in [Mode::Asr, Mode::AvsrNoUpsample, Mode::AvsrFull] {
        let cfg = mode.apply(&ModelConfig::tiny());
        let model = HourglassModel::new(cfg.clone(), 1).unwrap();
        let batch = batch_for(&cfg, 4, 7).unwrap();
        group.bench_function(mode.name(), |b| {
            b.iter(|| {
                let mut g = Graph::with_params(model.store());
                let (loss, _) = model.loss(&mut g, black_box(&batch)).unwrap();
                g.backward(loss).unwrap()
            })
        });
    }
    group.finish();
}

fn ctc(c: &mut Criterion) {
    let mut rng = RngStream::new(3);
    let (t, v) = (100, 32);
    let logits = rng.normal_tensor(&[t, v], 1.0);
    let mut lp = vec![0.0; t * v];
    for (row, out) in logits.data().chunks(v).zip(lp.chunks_mut(v)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        for (o, x) in out.iter_mut().zip(row) {
            *o = x - z;
        }
    }
    let log_probs = Tensor::new(vec![t, v], lp).unwrap();
    let target: Vec<usize> = (0..20).map(|_| rng.int_range(1, v - 1)).collect();
    c.bench_function("ctc_nll_t100_u20", |b| b.iter(|| ctc_nll(black_box(&log_probs), &target).unwrap()));
}

fn flops(c: &mut Criterion) {
    let cfg = ModelConfig::full_scale();
    c.bench_function("cost_table_full_scale", |b| {
        b.iter(|| cost_table(black_box(&cfg), &[1, 2, 3, 4], CostInput::reference()).unwrap())
    });
}

criterion_group!(benches, training_step, ctc, flops);
criterion_main!(benches);
