use std::time::Instant;
use weakloc::net::*;
use weakloc::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn t(shape: &[usize], rng: &mut ChaCha20Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn main() {
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    // layer shapes of the desk proposal net at scale 64
    let cases = vec![
        ("conv1 k5s2p2 3->8 @64", LayerSpec::conv(5, 2, 2, 3, 8), [3usize, 64, 64]),
        ("conv2 k3s1p1 8->16 @32", LayerSpec::conv(3, 1, 1, 8, 16), [8, 32, 32]),
        ("conv3 k3s1p1 16->32 @16", LayerSpec::conv(3, 1, 1, 16, 32), [16, 16, 16]),
        ("head k1 32->6 @8", LayerSpec::conv(1, 1, 0, 32, 6), [32, 8, 8]),
    ];
    for (name, layer, shape) in cases {
        let input = t(&shape, &mut rng);
        let params = ConvParams {
            weight: t(&[layer.out_planes, layer.in_planes, layer.kernel, layer.kernel], &mut rng),
            bias: t(&[layer.out_planes], &mut rng),
        };
        let out = conv2d(&input, &layer, &params).unwrap();
        let macs = (out.len() * layer.in_planes * layer.kernel * layer.kernel) as f64;
        let reps = (2e8 / macs).max(1.0) as usize;
        let t0 = Instant::now();
        for _ in 0..reps {
            let _ = conv2d(&input, &layer, &params).unwrap();
        }
        let fwd = t0.elapsed().as_secs_f64();
        let mut gp = ConvParams {
            weight: Tensor::zeros(params.weight.shape()),
            bias: Tensor::zeros(params.bias.shape()),
        };
        let gout = t(out.shape(), &mut rng);
        let t0 = Instant::now();
        for _ in 0..reps {
            let _ = conv2d_backward(&input, &layer, &params, &gout, &mut gp).unwrap();
        }
        let bwd = t0.elapsed().as_secs_f64();
        println!(
            "{name}: fwd {:.2} GMAC/s, bwd {:.2} GMAC/s (x{reps})",
            macs * reps as f64 / fwd / 1e9,
            2.0 * macs * reps as f64 / bwd / 1e9
        );
    }

    // a full train_step on the desk net
    use weakloc::pooling::PoolingMethod;
    use weakloc::proposal::*;
    let net = Network::init(desk_proposal_spec(6, 3)).unwrap();
    let mut pnet = ProposalNet::new(net, vec![32, 48, 64], PoolingMethod::lse(10.0).unwrap());
    let batch: Vec<ImageSample> = (0..16)
        .map(|i| ImageSample {
            id: format!("{i}"),
            pixels: t(&[3, 64, 64], &mut rng),
            labels: vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0],
        })
        .collect();
    let t0 = Instant::now();
    for _ in 0..5 {
        pnet.train_step(&batch, 0.01).unwrap();
    }
    println!("train_step(16): {:.2}s each", t0.elapsed().as_secs_f64() / 5.0);
}
