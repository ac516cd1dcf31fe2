//! Small synthetic two-class problem used for desk-scale attack runs.
//!
//! Each 16x16 grayscale image holds one bright square on a noisy background.
//! The label says which half (left = 0, right = 1) the square sits in.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::image::ImageTensor;
use crate::seed;
use crate::target::{Architecture, LabeledImage, ReferenceModel, TargetError, TrainConfig};

pub const DESK_SIDE: usize = 16;
pub const DESK_SHAPE: (usize, usize, usize) = (1, DESK_SIDE, DESK_SIDE);
const SQUARE: usize = 4;

/// `n` images with alternating labels.
pub fn desk_images(n: usize, seed: u64) -> Vec<LabeledImage> {
    let mut rng = seed::rng(seed::named(seed, "fixture.images"));
    (0..n)
        .map(|i| {
            let label = i % 2;
            let background: f32 = rng.gen_range(0.2..0.4);
            let fg: f32 = rng.gen_range(0.55..0.8);
            let half = DESK_SIDE / 2;
            let row = rng.gen_range(0..=DESK_SIDE - SQUARE);
            let col = label * half + rng.gen_range(0..=half - SQUARE);
            let mut v = vec![0.0f32; DESK_SIDE * DESK_SIDE];
            for r in 0..DESK_SIDE {
                for c in 0..DESK_SIDE {
                    let inside =
                        (row..row + SQUARE).contains(&r) && (col..col + SQUARE).contains(&c);
                    let base = if inside { fg } else { background };
                    let z: f32 = rng.sample(StandardNormal);
                    v[r * DESK_SIDE + c] = (base + 0.05 * z).clamp(0.0, 1.0);
                }
            }
            LabeledImage {
                image: ImageTensor::new(1, DESK_SIDE, DESK_SIDE, v).expect("fixture shape"),
                label,
            }
        })
        .collect()
}

/// Training settings for the desk victim.
pub fn desk_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 8,
        learning_rate: 0.05,
        batch_size: 16,
        seed: seed::named(seed, "fixture.train"),
    }
}

/// A small MLP trained on its own draw of desk images.
pub fn desk_victim(seed: u64) -> Result<ReferenceModel, TargetError> {
    let train = desk_images(400, seed::named(seed, "fixture.victim_data"));
    ReferenceModel::new(
        Architecture::Mlp { hidden: 16 },
        DESK_SHAPE,
        2,
        seed::named(seed, "fixture.init"),
    )
    .train(&train, &desk_train_config(seed))
}

/// Victim plus 100 attack images drawn independently of its training set.
#[derive(Debug, Clone)]
pub struct DeskFixture {
    pub model: ReferenceModel,
    pub images: Vec<LabeledImage>,
}

pub fn desk_fixture(seed: u64) -> Result<DeskFixture, TargetError> {
    Ok(DeskFixture {
        model: desk_victim(seed)?,
        images: desk_images(100, seed::named(seed, "fixture.attack_data")),
    })
}
