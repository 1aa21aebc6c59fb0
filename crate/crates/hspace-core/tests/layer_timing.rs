use hspace_core::diffusion::{DenoiserHyper, DenoiserModel, HOffset};
use hspace_core::nn::{self, zeroed_like, Params};
use hspace_core::world::{AttributeSchema, Vocabulary};
use ndarray::{Array2, Array4};
use std::time::Instant;

#[test]
#[ignore]
fn time_model_pieces() {
    let vocab = Vocabulary::from_schema(&AttributeSchema::default_world());
    let hyper = DenoiserHyper::default_for_vocab(&vocab);
    let model = DenoiserModel::<f32>::new(hyper, 1).unwrap();
    let b = 12;
    let x = Array4::<f32>::from_elem((b, 3, 32, 32), 0.3);
    let ts: Vec<usize> = vec![5; b];
    let cond = Array2::<f32>::zeros((b, 64));
    let zero = model.zero_offset();

    // full forward
    let reps = 20;
    let t0 = Instant::now();
    for _ in 0..reps {
        let _ = model
            .forward(&x.view(), &ts, &cond, &HOffset::Shared(zero.view()), None)
            .unwrap();
    }
    println!("forward b={b}: {:.1} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    // forward + full backward
    let t0 = Instant::now();
    let mut grads = zeroed_like(&model);
    for _ in 0..reps {
        let (out, cache) = model
            .forward(&x.view(), &ts, &cond, &HOffset::Shared(zero.view()), None)
            .unwrap();
        let _ = model.backward_params(&cache, &out.view(), &mut grads);
    }
    println!("fwd+bwd b={b}: {:.1} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    // im2col/col2im alone at the three resolutions
    for &(c, hh) in &[(16usize, 32usize), (32, 16), (48, 8), (96, 8), (64, 16), (32, 32)] {
        let xx = Array4::<f32>::from_elem((b, c, hh, hh), 0.1);
        let t0 = Instant::now();
        let r2 = 200;
        for _ in 0..r2 {
            let col = nn::conv::im2col(&xx.view(), 3, 3, 1, 1);
            std::hint::black_box(&col);
        }
        println!("im2col c={c} r={hh}: {:.2} ms", t0.elapsed().as_secs_f64() * 1000.0 / r2 as f64);
        let col = nn::conv::im2col(&xx.view(), 3, 3, 1, 1);
        let t0 = Instant::now();
        for _ in 0..r2 {
            let dx = nn::conv::col2im(&col, b, c, hh, hh, 3, 3, 1, 1);
            std::hint::black_box(&dx);
        }
        println!("col2im c={c} r={hh}: {:.2} ms", t0.elapsed().as_secs_f64() * 1000.0 / r2 as f64);
    }

    // groupnorm at stem res
    let gn = nn::GroupNorm::<f32>::new(32, 8);
    let xx = Array4::<f32>::from_elem((b, 32, 32, 32), 0.1);
    let t0 = Instant::now();
    for _ in 0..200 {
        let (y, _c) = gn.forward(&xx.view());
        std::hint::black_box(&y);
    }
    println!("groupnorm c=32 r=32: {:.2} ms", t0.elapsed().as_secs_f64() * 1000.0 / 200.0);

    // single conv fwd at stem
    let conv = nn::Conv2d::<f32>::new(
        Array4::from_elem((16, 16, 3, 3), 0.01),
        ndarray::Array1::zeros(16),
        1,
        1,
    );
    let xx = Array4::<f32>::from_elem((b, 16, 32, 32), 0.1);
    let t0 = Instant::now();
    for _ in 0..200 {
        let (y, _c) = conv.forward(&xx.view());
        std::hint::black_box(&y);
    }
    println!("conv 16->16 r=32 fwd: {:.2} ms", t0.elapsed().as_secs_f64() * 1000.0 / 200.0);
}

#[test]
#[ignore]
fn time_model_with_mallopt() {
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 512 * 1024 * 1024);
    }
    let vocab = Vocabulary::from_schema(&AttributeSchema::default_world());
    let hyper = DenoiserHyper::default_for_vocab(&vocab);
    let model = DenoiserModel::<f32>::new(hyper, 1).unwrap();
    let b = 12;
    let x = Array4::<f32>::from_elem((b, 3, 32, 32), 0.3);
    let ts: Vec<usize> = vec![5; b];
    let cond = Array2::<f32>::zeros((b, 64));
    let zero = model.zero_offset();
    let reps = 20;
    let t0 = Instant::now();
    for _ in 0..reps {
        let _ = model
            .forward(&x.view(), &ts, &cond, &HOffset::Shared(zero.view()), None)
            .unwrap();
    }
    println!("mallopt forward b={b}: {:.1} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);
    let t0 = Instant::now();
    let mut grads = zeroed_like(&model);
    for _ in 0..reps {
        let (out, cache) = model
            .forward(&x.view(), &ts, &cond, &HOffset::Shared(zero.view()), None)
            .unwrap();
        let _ = model.backward_params(&cache, &out.view(), &mut grads);
    }
    println!("mallopt fwd+bwd b={b}: {:.1} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);
}
