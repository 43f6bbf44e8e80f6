//! Property tests: oracle equivalences and structural invariants.

use cvt::analysis::count_params;
use cvt::model::{build_model, cvt13, cvt21, cvtw24, toy_config, CvtModel};
use cvt::tensor::Tensor;
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

proptest! {
    /// Pointwise conv (g=1, s=1, stride 1, no padding) is a per-pixel matmul
    /// against the C_out×C_in matrix.
    #[test]
    fn pointwise_conv_equals_per_pixel_matmul(
        b in 1usize..3,
        c_in in 1usize..5,
        c_out in 1usize..5,
        h in 1usize..6,
        w in 1usize..6,
        seed in 0u64..1000,
    ) {
        let mut rng = StdRng::seed_from_u64(seed);
        let x_data: Vec<f64> = (0..b * c_in * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w_data: Vec<f64> = (0..c_out * c_in).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor::from_vec(x_data, &[b, c_in, h, w]).unwrap();
        let weight = Tensor::from_vec(w_data.clone(), &[c_out, c_in, 1, 1]).unwrap();
        let conv = x.conv2d(&weight, None, 1, 0, 1).unwrap();

        let w_mat = Tensor::from_vec(w_data, &[c_out, c_in]).unwrap();
        for bi in 0..b {
            let xb = x.narrow(0, bi, 1).unwrap().reshape(&[c_in, h * w]).unwrap();
            let want = w_mat.matmul(&xb).unwrap();
            let got = conv.narrow(0, bi, 1).unwrap().reshape(&[c_out, h * w]).unwrap();
            for (a, e) in got.data().iter().zip(want.data()) {
                let rel = (a - e).abs() / a.abs().max(e.abs()).max(1e-9);
                prop_assert!(rel < 1e-6, "conv {a} vs matmul {e}");
            }
        }
    }

    /// Softmax slices sum to one and lie in (0, 1].
    #[test]
    fn softmax_slices_sum_to_one(
        rows in 1usize..6,
        cols in 1usize..9,
        seed in 0u64..1000,
    ) {
        let mut rng = StdRng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-30.0..30.0)).collect();
        let x = Tensor::from_vec(data, &[rows, cols]).unwrap();
        let y = x.softmax(1).unwrap();
        for row in y.data().chunks(cols) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&v| v > 0.0 && v <= 1.0));
        }
    }
}

/// Output geometry follows the floor arithmetic for every (H, s, stride, p)
/// combination with positive output, over an exhaustive grid.
#[test]
fn conv_geometry_matches_floor_arithmetic_over_grid() {
    for h in 1usize..=30 {
        for s in 1usize..=7 {
            for stride in 1usize..=4 {
                for padding in 0usize..=3 {
                    if h + 2 * padding < s {
                        continue;
                    }
                    let expect = (h + 2 * padding - s) / stride + 1;
                    let x = Tensor::<f32>::zeros(&[1, 1, h, h]);
                    let w = Tensor::<f32>::zeros(&[1, 1, s, s]);
                    let y = x.conv2d(&w, None, stride, padding, 1).unwrap();
                    assert_eq!(
                        y.shape(),
                        &[1, 1, expect, expect],
                        "h={h} s={s} stride={stride} p={padding}"
                    );
                }
            }
        }
    }
}

/// Static parameter counts equal live enumeration exactly — all presets.
#[test]
fn static_params_equal_live_enumeration_for_presets() {
    for cfg in [cvt13(), cvt21(), cvtw24()] {
        let static_count = count_params(&cfg).unwrap().total_params;
        let live: CvtModel<f32> = build_model(cfg.clone(), 0).unwrap();
        assert_eq!(static_count, live.num_params(), "preset {}", cfg.name);
    }
}

/// ... and for 50 random tiny configs.
#[test]
fn static_params_equal_live_enumeration_for_random_configs() {
    let mut rng = StdRng::seed_from_u64(77);
    for _ in 0..50 {
        let dims: [usize; 3] = std::array::from_fn(|_| {
            rng.random_range(1usize..4) * rng.random_range(1usize..5)
        });
        let heads: [usize; 3] = std::array::from_fn(|i| {
            let divisors: Vec<usize> = (1..=dims[i]).filter(|&d| dims[i].is_multiple_of(d)).collect();
            divisors[rng.random_range(0..divisors.len())]
        });
        let blocks: [usize; 3] = std::array::from_fn(|_| rng.random_range(1usize..4));
        let classes = rng.random_range(2usize..12);
        let cfg = toy_config(dims, heads, blocks, classes);
        let static_count = count_params(&cfg).unwrap().total_params;
        let live: CvtModel<f32> = build_model(cfg, 0).unwrap();
        assert_eq!(static_count, live.num_params());
    }
}

/// A 64→64 linear layer with bias holds exactly 4160 learnable scalars.
#[test]
fn single_linear_brute_force_count() {
    use cvt::layers::Linear;
    let mut rng = StdRng::seed_from_u64(0);
    let linear = Linear::<f32>::new(64, 64, true, &mut rng);
    let mut total = 0usize;
    linear.visit_params("linear", &mut |_, t| total += t.data().len());
    assert_eq!(total, 4160);
}
