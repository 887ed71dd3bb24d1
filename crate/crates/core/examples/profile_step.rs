//! Scratch profiling harness (temporary, removed before release).

use std::time::Instant;

use cloudseg::lidar::{generate_corpus, SyntheticSceneSpec};
use cloudseg::models::build_segmenter;
use cloudseg::nn::{seeded_rng, AdamState, Grads};
use cloudseg::preprocess::{assemble_datasets, ScaleConfig, SplitSpec};
use cloudseg::tensor::Tensor;
use cloudseg::Graph;

fn main() {
    let scale = ScaleConfig::desk();
    let template = SyntheticSceneSpec::for_scale(&scale, 0);
    let corpus = generate_corpus(&template, 80, 7).unwrap();
    let bundle = assemble_datasets(&corpus, &scale, &SplitSpec::desk_default()).unwrap();
    let mut seg = build_segmenter(&scale, 1).unwrap();
    let mut rng = seeded_rng(5);

    // Batch of 10 noisy samples.
    let samples: Vec<_> = bundle.noisy.iter().take(10).collect();
    let mut img = Vec::new();
    let mut tgt = Vec::new();
    for s in &samples {
        img.extend_from_slice(s.image.data());
        tgt.extend_from_slice(s.mask.as_ref().unwrap().data());
    }
    let x = Tensor::new(vec![10, 67, 96, 2], img).unwrap();
    let t = Tensor::new(vec![10, 67, 96, 2], tgt).unwrap();

    let mut adam = AdamState::new(5.9e-4, 0.0);
    // Warm up.
    for _ in 0..2 {
        let mut g = Graph::new();
        let xid = g.leaf(x.clone(), false).unwrap();
        let pass = seg.forward_train(&mut g, xid, 0.2, &mut rng).unwrap();
        let loss = g.cross_entropy(pass.output, &t).unwrap();
        g.backward(loss).unwrap();
        let mut grads = Grads::default();
        for (name, id) in &pass.binding {
            grads.0.insert(name.clone(), g.grad(*id).unwrap().to_vec());
        }
        adam.step(&mut seg.params, &grads, 0).unwrap();
    }

    let reps = 10;
    let (mut t_fwd, mut t_loss, mut t_bwd, mut t_grads, mut t_adam) =
        (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..reps {
        let mut g = Graph::new();
        let xid = g.leaf(x.clone(), false).unwrap();
        let t0 = Instant::now();
        let pass = seg.forward_train(&mut g, xid, 0.2, &mut rng).unwrap();
        t_fwd += t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let loss = g.cross_entropy(pass.output, &t).unwrap();
        t_loss += t1.elapsed().as_secs_f64();
        let t2 = Instant::now();
        g.backward(loss).unwrap();
        t_bwd += t2.elapsed().as_secs_f64();
        let t3 = Instant::now();
        let mut grads = Grads::default();
        for (name, id) in &pass.binding {
            grads.0.insert(name.clone(), g.grad(*id).unwrap().to_vec());
        }
        t_grads += t3.elapsed().as_secs_f64();
        let t4 = Instant::now();
        adam.step(&mut seg.params, &grads, 0).unwrap();
        t_adam += t4.elapsed().as_secs_f64();
    }
    let scale_ms = 1000.0 / reps as f64;
    println!("forward:  {:.1} ms/batch", t_fwd * scale_ms);
    println!("loss:     {:.1} ms/batch", t_loss * scale_ms);
    println!("backward: {:.1} ms/batch", t_bwd * scale_ms);
    println!("grads:    {:.1} ms/batch", t_grads * scale_ms);
    println!("adam:     {:.1} ms/batch", t_adam * scale_ms);
    println!(
        "total:    {:.1} ms/batch",
        (t_fwd + t_loss + t_bwd + t_grads + t_adam) * scale_ms
    );
}
