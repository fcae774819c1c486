use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::synth::Sequence;

/// Consecutive frames with their target boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct Snippet {
    pub frames: Vec<Frame>,
    pub boxes: Vec<BBox>,
}

impl Snippet {
    pub fn new(frames: Vec<Frame>, boxes: Vec<BBox>) -> Result<Self> {
        if frames.is_empty() || frames.len() != boxes.len() {
            return Err(Error::invalid(format!(
                "snippet has {} frames but {} boxes",
                frames.len(),
                boxes.len()
            )));
        }
        Ok(Self { frames, boxes })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Mirrors every frame and box left to right.
    pub fn flipped(mut self) -> Self {
        for (f, b) in self.frames.iter_mut().zip(&mut self.boxes) {
            f.flip_horizontal();
            *b = b.flip_horizontal(f.width as f64);
        }
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// Half-width of the zero-mean uniform pixel noise.
    pub noise: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            noise: 0.02,
        }
    }
}

impl AugmentConfig {
    pub const OFF: Self = Self {
        flip_prob: 0.0,
        noise: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) || !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Config(
                "flip probability and noise must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Random horizontal flip of the whole snippet plus per-pixel uniform noise
/// in `[-noise, noise]`, clamped to `[0, 1]`.
pub fn augment<R: Rng + ?Sized>(snippet: Snippet, config: &AugmentConfig, rng: &mut R) -> Snippet {
    let mut s = if rng.random::<f64>() < config.flip_prob {
        snippet.flipped()
    } else {
        snippet
    };
    if config.noise > 0.0 {
        let a = config.noise as f32;
        for f in &mut s.frames {
            for v in &mut f.data {
                *v = (*v + rng.random_range(-a..=a)).clamp(0.0, 1.0);
            }
        }
    }
    s
}

/// Uniform sequence among those long enough, then a uniform start index
/// leaving room for `frames` frames. Boxes are the target's full extent.
pub fn sample_snippet<R: Rng + ?Sized>(
    dataset: &[Sequence],
    frames: usize,
    rng: &mut R,
) -> Result<Snippet> {
    let eligible: Vec<&Sequence> = dataset.iter().filter(|s| s.len() >= frames).collect();
    if eligible.is_empty() {
        return Err(Error::Config(format!(
            "no training sequence has {frames} frames"
        )));
    }
    let seq = eligible[rng.random_range(0..eligible.len())];
    let start = rng.random_range(0..=seq.len() - frames);
    Snippet::new(
        seq.frames[start..start + frames].to_vec(),
        seq.true_boxes[start..start + frames].to_vec(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn snippet() -> Snippet {
        let frames = (0..3)
            .map(|k| Frame::new(4, 2, 1, (0..8).map(|i| (i + k) as f32 / 16.0).collect()).unwrap())
            .collect();
        let boxes = (0..3)
            .map(|k| BBox::new(1.0 + k as f64, 1.0, 1.0, 1.0).unwrap())
            .collect();
        Snippet::new(frames, boxes).unwrap()
    }

    #[test]
    fn flip_is_an_involution() {
        let s = snippet();
        let f = s.clone().flipped();
        assert_eq!(f.boxes[1].cx, 4.0 - 2.0);
        assert_eq!(f.boxes[1].w, s.boxes[1].w);
        assert_eq!(f.clone().flipped(), s);
    }

    #[test]
    fn disabled_augmentation_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(augment(snippet(), &AugmentConfig::OFF, &mut rng), snippet());
    }

    #[test]
    fn noise_is_bounded_and_clamped() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = AugmentConfig {
            flip_prob: 0.0,
            noise: 0.02,
        };
        let s = snippet();
        let n = augment(s.clone(), &cfg, &mut rng);
        for (a, b) in s.frames.iter().zip(&n.frames) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() <= 0.02 + 1e-6);
                assert!((0.0..=1.0).contains(y));
            }
        }
        assert_eq!(n.boxes, s.boxes);
    }
}
