//! Dual-encoder scientific reward ("SciScore") at toy scale.
//!
//! Prompts go through a token bag and a two-layer perceptron, images through
//! two conv/pool stages and a perceptron; both outputs are unit vectors, and
//! the reward is `T · cos`.

mod eval;
mod train;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Tape, Var};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::nn::{Conv3x3, Linear, ParamId, ParamSet};
use crate::preference::{self, PreferenceError};
use crate::synthworld::{RasterImage, WORLD_SIZE};
use crate::tensor::Matrix;
use crate::text::{TokenBag, TokenError, Vocabulary};

pub use eval::{evaluate_accuracy, two_choice_select, Choice, EvalReport, GroupAccuracy};
pub use train::{batch_loss_and_grads, train_sciscore, RewardHyper, RewardStepMetrics, TrainOutcome};

pub const CHECKPOINT_KIND: &str = "sciscore";

#[derive(Debug, Error)]
pub enum RewardError {
    #[error(transparent)]
    Token(#[from] TokenError),
    #[error(transparent)]
    Preference(#[from] PreferenceError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("image is {0}×{1}, expected {WORLD_SIZE}×{WORLD_SIZE}")]
    ImageSize(usize, usize),
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(usize),
    #[error("invalid hyper-parameters: {0}")]
    Hyper(String),
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("metrics io: {0}")]
    Io(#[from] std::io::Error),
}

/// Anything that scores an image against a prompt. Higher is better.
pub trait RewardModel {
    fn score_batch(&self, prompt: &str, images: &[&RasterImage]) -> Result<Vec<f64>, RewardError>;

    fn score(&self, prompt: &str, image: &RasterImage) -> Result<f64, RewardError> {
        Ok(self.score_batch(prompt, &[image])?[0])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualEncoderConfig {
    pub vocabulary: Vocabulary,
    pub embed_dim: usize,
    pub token_dim: usize,
    pub text_hidden: usize,
    pub conv1: usize,
    pub conv2: usize,
    pub image_hidden: usize,
    pub log_temperature_init: f64,
    pub seed: u64,
}

impl DualEncoderConfig {
    pub fn new(vocabulary: Vec<String>, seed: u64) -> Self {
        Self {
            vocabulary: Vocabulary::from(vocabulary),
            embed_dim: 32,
            token_dim: 32,
            text_hidden: 64,
            conv1: 8,
            conv2: 16,
            image_hidden: 64,
            // Unit-norm embeddings keep rewards inside [-5, 5].
            log_temperature_init: 5f64.ln(),
            seed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DualEncoder {
    pub config: DualEncoderConfig,
    pub params: ParamSet,
    pub step: u64,
    bag: TokenBag,
    text1: Linear,
    text2: Linear,
    conv1: Conv3x3,
    conv2: Conv3x3,
    img1: Linear,
    img2: Linear,
    log_t: ParamId,
}

/// Maps 8-bit pixels to `[-1, 1]` in the `(pixels) × 3` spatial layout.
pub(crate) fn image_rows(images: &[&RasterImage]) -> Matrix {
    let mut data = Vec::with_capacity(images.len() * WORLD_SIZE * WORLD_SIZE * 3);
    for img in images {
        data.extend(img.data.iter().map(|&v| v as f64 / 127.5 - 1.0));
    }
    Matrix::from_vec(images.len() * WORLD_SIZE * WORLD_SIZE, 3, data)
}

impl DualEncoder {
    pub fn new(config: DualEncoderConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut p = ParamSet::new();
        let c = &config;
        let bag = TokenBag::new(&mut p, "text.bag", c.vocabulary.len(), c.token_dim, &mut rng);
        let text1 = Linear::new(&mut p, "text.fc1", c.token_dim, c.text_hidden, 1.0, &mut rng);
        let text2 = Linear::new(&mut p, "text.fc2", c.text_hidden, c.embed_dim, 1.0, &mut rng);
        let conv1 = Conv3x3::new(&mut p, "image.conv1", 3, c.conv1, 1.0, &mut rng);
        let conv2 = Conv3x3::new(&mut p, "image.conv2", c.conv1, c.conv2, 1.0, &mut rng);
        let flat = (WORLD_SIZE / 4) * (WORLD_SIZE / 4) * c.conv2;
        let img1 = Linear::new(&mut p, "image.fc1", flat, c.image_hidden, 1.0, &mut rng);
        let img2 = Linear::new(&mut p, "image.fc2", c.image_hidden, c.embed_dim, 1.0, &mut rng);
        let log_t = p.add("log_temperature", Matrix::filled(1, 1, c.log_temperature_init), false);
        Self {
            config,
            params: p,
            step: 0,
            bag,
            text1,
            text2,
            conv1,
            conv2,
            img1,
            img2,
            log_t,
        }
    }

    pub fn log_temperature_id(&self) -> ParamId {
        self.log_t
    }

    pub fn temperature(&self) -> f64 {
        self.params.value(self.log_t).data[0].exp()
    }

    /// Parameter ids of the text pathway (token bag and perceptron).
    pub fn text_param_ids(&self) -> Vec<ParamId> {
        self.params.ids().filter(|&id| self.params.name(id).starts_with("text.")).collect()
    }

    pub fn image_param_ids(&self) -> Vec<ParamId> {
        self.params.ids().filter(|&id| self.params.name(id).starts_with("image.")).collect()
    }

    pub fn tokenize(&self, prompt: &str) -> Result<Vec<u32>, RewardError> {
        Ok(self.config.vocabulary.tokenize(prompt)?)
    }

    pub(crate) fn text_forward(&self, tape: &mut Tape, batch: &[Vec<u32>]) -> Var {
        let h = self.bag.forward(tape, &self.params, batch);
        let h = self.text1.forward(tape, &self.params, h);
        let h = tape.silu(h);
        let h = self.text2.forward(tape, &self.params, h);
        tape.l2_normalize_rows(h)
    }

    pub(crate) fn image_forward(&self, tape: &mut Tape, images: &[&RasterImage]) -> Var {
        let n = images.len();
        let s = WORLD_SIZE;
        let x = tape.constant(image_rows(images));
        let h = self.conv1.forward(tape, &self.params, x, n, s, s);
        let h = tape.silu(h);
        let h = tape.avg_pool2(h, n, s, s);
        let h = self.conv2.forward(tape, &self.params, h, n, s / 2, s / 2);
        let h = tape.silu(h);
        let h = tape.avg_pool2(h, n, s / 2, s / 2);
        let h = tape.reshape(h, n, (s / 4) * (s / 4) * self.config.conv2);
        let h = self.img1.forward(tape, &self.params, h);
        let h = tape.silu(h);
        let h = self.img2.forward(tape, &self.params, h);
        tape.l2_normalize_rows(h)
    }

    fn check_image(img: &RasterImage) -> Result<(), RewardError> {
        if img.height != WORLD_SIZE || img.width != WORLD_SIZE {
            return Err(RewardError::ImageSize(img.height, img.width));
        }
        Ok(())
    }

    pub fn encode_text(&self, prompt: &str) -> Result<Vec<f64>, RewardError> {
        let toks = self.tokenize(prompt)?;
        let mut tape = Tape::new();
        let v = self.text_forward(&mut tape, &[toks]);
        Ok(tape.value(v).data.clone())
    }

    pub fn encode_image(&self, image: &RasterImage) -> Result<Vec<f64>, RewardError> {
        Ok(self.encode_images(&[image])?.data)
    }

    pub fn encode_images(&self, images: &[&RasterImage]) -> Result<Matrix, RewardError> {
        for img in images {
            Self::check_image(img)?;
        }
        let mut tape = Tape::new();
        let v = self.image_forward(&mut tape, images);
        Ok(tape.value(v).clone())
    }

    pub fn save(&self, path: &Path) -> Result<(), RewardError> {
        Checkpoint::new(CHECKPOINT_KIND, &self.config, self.step, &self.params).save(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RewardError> {
        let ck = Checkpoint::load(path, CHECKPOINT_KIND)?;
        let mut model = Self::new(ck.config_as()?);
        ck.restore_into(&mut model.params)?;
        model.step = ck.step;
        Ok(model)
    }
}

impl RewardModel for DualEncoder {
    fn score_batch(&self, prompt: &str, images: &[&RasterImage]) -> Result<Vec<f64>, RewardError> {
        let text = self.encode_text(prompt)?;
        let imgs = self.encode_images(images)?;
        let t = self.temperature();
        (0..images.len())
            .map(|i| Ok(preference::reward(&text, imgs.row(i), t)?))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{standard_world, Complexity};

    fn model() -> DualEncoder {
        DualEncoder::new(DualEncoderConfig::new(standard_world().vocabulary(), 3))
    }

    #[test]
    fn embeddings_are_unit_and_deterministic() {
        let m = model();
        let e = m.encode_text("a unripe apple").unwrap();
        assert!((e.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
        assert_eq!(e, m.encode_text("a unripe apple").unwrap());
        let w = standard_world();
        let t = w.realize_tuple(w.task("ripeness").unwrap(), "apple", "unripe", Complexity::Simple, 1).unwrap();
        let i = m.encode_image(&t.explicit_image).unwrap();
        assert!((i.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
        assert_eq!(i, m.encode_image(&t.explicit_image).unwrap());
    }

    #[test]
    fn token_order_matters() {
        let m = model();
        let prompts = [
            "a unripe apple",
            "a rotten banana in a kitchen",
            "litmus paper dipped in vinegar",
            "a cork in a pond",
            "copper in a flame",
            "a glass of tea left in a freezer",
            "a fern grown in darkness",
            "a ball in orbit",
            "a green apple",
            "a purple gem at the park",
        ];
        let mut differing = 0;
        for p in prompts {
            let rev: Vec<&str> = p.split_whitespace().rev().collect();
            let a = m.encode_text(p).unwrap();
            let b = m.encode_text(&rev.join(" ")).unwrap();
            if a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-6) {
                differing += 1;
            }
        }
        assert_eq!(differing, prompts.len());
    }

    #[test]
    fn out_of_vocabulary_token_is_named() {
        let err = model().encode_text("a chartreuse apple").unwrap_err();
        assert!(err.to_string().contains("chartreuse"));
    }

    #[test]
    fn initial_rewards_are_bounded() {
        let m = model();
        let img = RasterImage::filled(WORLD_SIZE, WORLD_SIZE, [10, 200, 30]);
        let r = m.score("a green apple", &img).unwrap();
        assert!(r.abs() <= 5.0 + 1e-12);
    }

    #[test]
    fn checkpoint_round_trip_reproduces_rewards() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        m.save(&path).unwrap();
        let back = DualEncoder::load(&path).unwrap();
        let img = RasterImage::filled(WORLD_SIZE, WORLD_SIZE, [100, 20, 200]);
        assert_eq!(
            m.score("a purple gem", &img).unwrap().to_bits(),
            back.score("a purple gem", &img).unwrap().to_bits()
        );
    }
}
