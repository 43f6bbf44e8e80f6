//! Full-model forward behavior and checkpoint round trips.

use cvt::layers::Mode;
use cvt::model::{
    build_model, cvt13, cvt21, load_checkpoint, load_checkpoint_expect, save_checkpoint, tiny,
    toy_config, CvtModel,
};
use cvt::tensor::Tensor;
use cvt::CvtError;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn random_images(rng: &mut StdRng, shape: &[usize]) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(data, shape).unwrap()
}

#[test]
fn cvt13_forward_at_224_produces_1000_way_logits() {
    let model: CvtModel<f32> = build_model(cvt13(), 0).unwrap();
    let mut rng = StdRng::seed_from_u64(0);
    let images = random_images(&mut rng, &[2, 3, 224, 224]);
    let logits = model.forward(&images).unwrap();
    assert_eq!(logits.shape(), &[2, 1000]);
    assert!(logits.data().iter().all(|v| v.is_finite()));
}

#[test]
fn cvt13_forward_at_384_needs_no_surgery() {
    // No positional embedding exists, so higher resolution just works with
    // unchanged weights: stage grids become 96², 48², 24².
    let model: CvtModel<f32> = build_model(cvt13(), 0).unwrap();
    let mut rng = StdRng::seed_from_u64(1);
    let images = random_images(&mut rng, &[1, 3, 384, 384]);
    let logits = model.forward(&images).unwrap();
    assert_eq!(logits.shape(), &[1, 1000]);
    let trace = cvt::analysis::shape_trace(&cvt13(), 384).unwrap();
    let grid = |p: &str| trace.iter().find(|(q, _)| q == p).unwrap().1.clone();
    assert_eq!(grid("stage1.embed.conv"), vec![96, 96, 64]);
    assert_eq!(grid("stage2.embed.conv"), vec![48, 48, 192]);
    assert_eq!(grid("stage3.embed.conv"), vec![24, 24, 384]);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.cvtk");
    let mut model: CvtModel<f32> = build_model(tiny(), 42).unwrap();
    // Push some training-mode statistics through so buffers are nontrivial.
    let mut rng = StdRng::seed_from_u64(2);
    let images = random_images(&mut rng, &[2, 3, 32, 32]);
    model.set_mode(Mode::Train);
    model.forward(&images).unwrap();
    model.set_mode(Mode::Eval);

    save_checkpoint(&model, &path).unwrap();
    let restored = load_checkpoint(&path).unwrap();
    assert_eq!(restored.config, model.config);

    let probe = random_images(&mut rng, &[1, 3, 32, 32]);
    let a = model.forward(&probe).unwrap();
    let b = restored.forward(&probe).unwrap();
    assert!(a
        .data()
        .iter()
        .zip(b.data())
        .all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn corrupting_one_byte_fails_the_checksum() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.cvtk");
    let model: CvtModel<f32> = build_model(tiny(), 0).unwrap();
    save_checkpoint(&model, &path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&path, bytes).unwrap();
    assert!(matches!(
        load_checkpoint(&path),
        Err(CvtError::CheckpointChecksum)
    ));
}

#[test]
fn truncated_file_and_bad_magic_are_distinct_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.cvtk");
    let model: CvtModel<f32> = build_model(tiny(), 0).unwrap();
    save_checkpoint(&model, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    std::fs::write(&path, &bytes[..7]).unwrap();
    assert!(matches!(
        load_checkpoint(&path),
        Err(CvtError::CheckpointTruncated { .. })
    ));

    let mut magicless = bytes.clone();
    magicless[0] = b'X';
    // keep the checksum consistent so the magic check is what trips
    let body_len = magicless.len() - 8;
    let mut hash = 0xcbf29ce484222325u64;
    for &b in &magicless[..body_len] {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    magicless[body_len..].copy_from_slice(&hash.to_le_bytes());
    std::fs::write(&path, magicless).unwrap();
    assert!(matches!(
        load_checkpoint(&path),
        Err(CvtError::CheckpointMagic)
    ));
}

#[test]
fn loading_into_a_different_config_is_a_mismatch_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.cvtk");
    let model: CvtModel<f32> = build_model(tiny(), 0).unwrap();
    save_checkpoint(&model, &path).unwrap();
    let err = match load_checkpoint_expect(&path, &cvt21()) {
        Err(e) => e,
        Ok(_) => panic!("mismatched config should not load"),
    };
    assert!(matches!(err, CvtError::ConfigMismatch(_)), "{err}");
    assert!(load_checkpoint_expect(&path, &tiny()).is_ok());
}

#[test]
fn frozen_model_forward_is_thread_safe() {
    // Eval-mode forward over disjoint inputs from several threads agrees
    // bit-for-bit with the single-threaded result.
    let model: CvtModel<f32> = build_model(tiny(), 4).unwrap();
    let mut rng = StdRng::seed_from_u64(9);
    let inputs: Vec<Tensor<f32>> = (0..4)
        .map(|_| random_images(&mut rng, &[1, 3, 32, 32]))
        .collect();
    let serial: Vec<Vec<u32>> = inputs
        .iter()
        .map(|x| model.forward(x).unwrap().data().iter().map(|v| v.to_bits()).collect())
        .collect();
    let parallel: Vec<Vec<u32>> = std::thread::scope(|s| {
        let handles: Vec<_> = inputs
            .iter()
            .map(|x| {
                let model = &model;
                s.spawn(move || {
                    model
                        .forward(x)
                        .unwrap()
                        .data()
                        .iter()
                        .map(|v| v.to_bits())
                        .collect::<Vec<u32>>()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    assert_eq!(serial, parallel);
}

#[test]
fn toy_grid_boundary_cases() {
    // Input exactly at the stage-1 kernel size embeds, then dies at stage 2.
    let cfg = toy_config([4, 4, 4], [1, 1, 1], [1, 1, 1], 2);
    let model: CvtModel<f32> = build_model(cfg, 0).unwrap();
    let images = Tensor::zeros(&[1, 3, 7, 7]);
    assert!(matches!(
        model.forward(&images),
        Err(CvtError::Geometry { .. })
    ));
}
