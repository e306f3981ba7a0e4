use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;
use tom_core::approximator::{backward, forward_batch};
use tom_core::model::{fit_linear_gaussian_closed_form, GaussianMlpModel};
use tom_core::occupancy::{exact_occupancy, primal_tom_solve, transition_occupancy};
use tom_core::tom::{dual_loss_and_gradient, DualBatch};
use tom_core::{Activation, DualQ, FDivergence, MlpSpec, StochasticPolicy, TabularMdp, TabularPolicy, Transition};

const STATE_DIM: usize = 4;
const ACTION_DIM: usize = 2;

fn random_transitions(n: usize, rng: &mut ChaCha8Rng) -> Vec<Transition> {
    let mut v = |k: usize| (0..k).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    (0..n)
        .map(|i| Transition::new(v(STATE_DIM), v(ACTION_DIM), v(STATE_DIM), 0.0, i == 0))
        .collect()
}

fn mlp(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let spec = MlpSpec::new(10, vec![64, 64], 1, Activation::Relu, Activation::Identity).unwrap();
    let params = spec.init_params(&mut rng);
    let x: Vec<f64> = (0..256 * 10).map(|_| rng.random_range(-1.0..1.0)).collect();
    c.bench_function("mlp_forward_256x64x64", |b| {
        b.iter(|| forward_batch(&spec, &params, black_box(&x)).unwrap())
    });
    let tape = forward_batch(&spec, &params, &x).unwrap();
    let upstream = vec![1.0; 256];
    c.bench_function("mlp_backward_256x64x64", |b| {
        b.iter(|| backward(&spec, &params, &tape, black_box(&upstream)).unwrap())
    });
}

fn occupancy(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mdp = TabularMdp::random(8, 4, 0.95, &mut rng);
    let pi = TabularPolicy::random(8, 4, &mut rng);
    c.bench_function("exact_occupancy_8x4", |b| b.iter(|| exact_occupancy(black_box(&mdp), &pi).unwrap()));

    let small = TabularMdp::random(3, 2, 0.9, &mut rng);
    let pi = TabularPolicy::random(3, 2, &mut rng);
    let replay = transition_occupancy(&exact_occupancy(&small, &TabularPolicy::uniform(3, 2)).unwrap(), &small);
    let mut g = c.benchmark_group("primal");
    g.sample_size(10);
    g.bench_function("primal_solve_3x2", |b| {
        b.iter(|| primal_tom_solve(black_box(&small), &pi, &replay, FDivergence::ChiSquared).unwrap())
    });
    g.finish();
}

fn learners(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let transitions = random_transitions(256, &mut rng);
    let refs: Vec<&Transition> = transitions.iter().collect();
    let weights = vec![1.0; refs.len()];

    let policy = StochasticPolicy::new(STATE_DIM, vec![-1.0; ACTION_DIM], vec![1.0; ACTION_DIM], &[64, 64], &mut rng)
        .unwrap();
    let q = DualQ::new(STATE_DIM, ACTION_DIM, &[64, 64], 0.99, &mut rng).unwrap();
    let rewards = vec![0.5; refs.len()];
    let starts: Vec<Vec<f64>> = transitions.iter().take(64).map(|t| t.state.clone()).collect();
    c.bench_function("dual_batch_build_256x4", |b| {
        b.iter_batched(
            || ChaCha8Rng::seed_from_u64(3),
            |mut r| DualBatch::new(&policy, &refs, &rewards, &starts, 4, &mut r).unwrap(),
            BatchSize::SmallInput,
        )
    });
    let batch = DualBatch::new(&policy, &refs, &rewards, &starts, 4, &mut rng).unwrap();
    c.bench_function("dual_loss_gradient_256x4", |b| {
        b.iter(|| dual_loss_and_gradient(&q.spec, &q.params, q.gamma, FDivergence::ChiSquared, black_box(&batch)).unwrap())
    });

    let model = GaussianMlpModel::new(STATE_DIM, ACTION_DIM, &[64; 4], &mut rng).unwrap();
    c.bench_function("model_nll_gradient_256", |b| {
        b.iter(|| model.nll_and_gradient(&model.params, black_box(&refs), &weights).unwrap())
    });
    c.bench_function("linear_fit_closed_form_256", |b| {
        b.iter(|| fit_linear_gaussian_closed_form(black_box(&refs), &weights).unwrap())
    });
}

criterion_group!(benches, mlp, occupancy, learners);
criterion_main!(benches);
