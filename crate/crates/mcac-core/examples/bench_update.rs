use mcac_core::nn::{AdamState, BatchTrace, Mlp, MlpGrads, OutputHead};
use mcac_core::rngs::{stream_rng, Stream};
use ndarray::Array2;
use std::time::Instant;

fn main() {
    let mut rng = stream_rng(0, Stream::AgentInit);
    let critic = Mlp::new(&[4, 256, 256, 1], OutputHead::Linear, &mut rng).unwrap();
    let mut critic_mut = critic.clone();
    let mut opt = AdamState::new(&critic, 3e-4);
    let x = Array2::from_shape_fn((256, 4), |(i, j)| ((i * 7 + j) as f64 * 0.01).sin());
    let adj = Array2::from_shape_fn((256, 1), |(i, _)| (i as f64 * 0.02).cos() / 256.0);

    // forward only
    let t = Instant::now();
    let iters = 300;
    let mut acc = 0.0;
    for _ in 0..iters {
        let out = critic.forward_batch(x.view());
        acc += out[(0, 0)];
    }
    let fwd_ms = t.elapsed().as_secs_f64() * 1000.0 / iters as f64;

    // traced forward + full backward + adam
    let mut trace = BatchTrace::default();
    let mut grads = MlpGrads::zeros_like(&critic);
    let t = Instant::now();
    for _ in 0..iters {
        let out = critic_mut.forward_batch_traced(x.view(), &mut trace);
        acc += out[(0, 0)];
        critic_mut.backward_batch(&trace, adj.view(), Some(&mut grads), None);
        opt.apply(&mut critic_mut, &grads).unwrap();
    }
    let train_ms = t.elapsed().as_secs_f64() * 1000.0 / iters as f64;

    // backward input-only
    let mut input_adj = Array2::zeros((256, 4));
    let t = Instant::now();
    for _ in 0..iters {
        let out = critic.forward_batch_traced(x.view(), &mut trace);
        acc += out[(0, 0)];
        critic.backward_batch(&trace, adj.view(), None, Some(&mut input_adj));
    }
    let inp_ms = t.elapsed().as_secs_f64() * 1000.0 / iters as f64;

    let fwd_flops = 2.0 * 256.0 * (4.0 * 256.0 + 256.0 * 256.0 + 256.0) as f64;
    println!("batch-256 critic fwd:        {:.2} ms  ({:.1} GFLOP/s)", fwd_ms, fwd_flops / fwd_ms / 1e6);
    println!("fwd+bwd+adam:                {:.2} ms", train_ms);
    println!("fwd+input-bwd:               {:.2} ms", inp_ms);
    println!("est SAC update (2 critics + targets + policy): {:.1} ms", 2.0*train_ms + 3.0*fwd_ms + 2.0*inp_ms + 2.0*train_ms*0.5);
    println!("({acc})");
}
