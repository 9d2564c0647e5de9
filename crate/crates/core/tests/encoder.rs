//! Properties of the reference encoder at its default 64x64 resolution.

use std::path::PathBuf;
use std::sync::OnceLock;

use geocloak::encoder::{ReferenceEncoder, Reconstructor};
use geocloak::geometry::{chamfer, PointCloud3D};
use geocloak::image::Image;
use geocloak::ndiff::Tensor;
use geocloak::scene::{bundled_scene, SCENE_ENCODER_SEED};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

fn encoder() -> &'static ReferenceEncoder<f64> {
    static ENC: OnceLock<ReferenceEncoder<f64>> = OnceLock::new();
    ENC.get_or_init(|| ReferenceEncoder::new(SCENE_ENCODER_SEED))
}

fn golden(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn perturbed(image: &Image<f64>, scale: f64, seed: u64) -> Image<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = image.clone();
    for v in out.data_mut() {
        *v += if rng.random_bool(0.5) { scale } else { -scale };
    }
    out
}

#[test]
fn encode_is_pure() {
    let zeros = Image::filled(64, 64, 0.0);
    let first = encoder().encode(&zeros).unwrap();
    for _ in 0..10 {
        assert_eq!(encoder().encode(&zeros).unwrap(), first);
    }
    assert_eq!(first.len(), 2048);
    assert!(first.points().iter().flatten().all(|c| c.abs() <= 0.5));
}

#[test]
fn budget_sized_perturbation_moves_the_cloud() {
    let (scene, _) = bundled_scene::<f64>();
    let clean = encoder().encode(&scene).unwrap();
    let moved = encoder().encode(&perturbed(&scene, 8.0 / 255.0, 1)).unwrap();
    assert!(chamfer(&clean, &moved).unwrap() > 0.0);
}

#[test]
fn cloud_shrinks_toward_clean_as_perturbation_shrinks() {
    let (scene, _) = bundled_scene::<f64>();
    let clean = encoder().encode(&scene).unwrap();
    for seed in 0..5 {
        let cds: Vec<f64> = [1.0 / 255.0, 1.0 / 2550.0, 1.0 / 25500.0]
            .iter()
            .map(|&s| chamfer(&clean, &encoder().encode(&perturbed(&scene, s, seed)).unwrap()).unwrap())
            .collect();
        assert!(cds[0] > cds[1] && cds[1] > cds[2], "seed {seed}: {cds:?}");
    }
}

#[test]
fn directional_derivative_matches_autodiff() {
    let (scene, _) = bundled_scene::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let target = PointCloud3D::new(
        (0..256)
            .map(|_| [0, 1, 2].map(|_| rng.random_range(-0.5..0.5)))
            .collect(),
    );
    let target_t = Tensor::new(vec![target.len(), 3], target.to_flat()).unwrap();
    let loss = |img: &Image<f64>| chamfer(&encoder().encode(img).unwrap(), &target).unwrap();
    let (value, grad) = encoder()
        .loss_and_gradient(&scene, |tape, vars| {
            let t = tape.constant(target_t.clone());
            tape.chamfer(vars.points, t)
        })
        .unwrap();
    assert!((value - loss(&scene)).abs() < 1e-15);

    for trial in 0..5 {
        let dir: Vec<f64> = (0..grad.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let shift = |h: f64| {
            let mut img = scene.clone();
            for (v, d) in img.data_mut().iter_mut().zip(&dir) {
                *v += h * d;
            }
            img
        };
        let h = 1e-6;
        let numeric = (loss(&shift(h)) - loss(&shift(-h))) / (2.0 * h);
        let analytic: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
        let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs());
        assert!(rel <= 1e-4, "trial {trial}: {numeric} vs {analytic} ({rel:e})");
    }
}

#[test]
fn decoded_attributes_are_frozen() {
    let (scene, _) = bundled_scene::<f64>();
    let recon = Reconstructor::new(encoder().clone()).reconstruct(&scene).unwrap();
    let mut hasher = Sha256::new();
    for a in &recon.attributes {
        for v in a.offset.iter().chain([&a.opacity]).chain(&a.scale).chain(&a.rotation).chain(&a.sh) {
            hasher.update(v.to_le_bytes());
        }
        assert!((0.0..=1.0).contains(&a.opacity));
        assert!(a.scale.iter().all(|&s| s > 0.0));
        let norm: f64 = a.rotation.iter().map(|q| q * q).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }
    let digest: String = hasher.finalize().iter().map(|b| format!("{b:02x}")).collect();
    let path = golden("scene_attributes.sha256");
    if std::env::var_os("GEOCLOAK_BLESS").is_some() {
        std::fs::write(&path, format!("{digest}\n")).unwrap();
    }
    let expected = std::fs::read_to_string(&path).expect("golden digest missing; rerun with GEOCLOAK_BLESS=1");
    assert_eq!(digest, expected.trim());
}

#[test]
fn weight_bundle_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("enc.bin");
    encoder().save(&path).unwrap();
    let loaded = ReferenceEncoder::<f64>::load(&path).unwrap();
    let (scene, _) = bundled_scene::<f64>();
    assert_eq!(loaded.encode(&scene).unwrap(), encoder().encode(&scene).unwrap());
}
