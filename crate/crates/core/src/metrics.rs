//! Consecutive-frame consistency: the mean cosine similarity between
//! embeddings of neighbouring frames.

use crate::error::{Error, Result};
use crate::media::{FrameSequence, PatchCodec};
use crate::tensor::Tensor;

pub trait Embedder {
    /// Maps a `[3, H, W]` frame to a feature vector.
    fn embed(&self, frame: &Tensor) -> Result<Vec<f64>>;
}

/// Patch-codec features mean-pooled over space, then L2-normalised.
#[derive(Debug, Clone)]
pub struct PatchEmbedder {
    codec: PatchCodec,
}

impl PatchEmbedder {
    pub fn new(codec: PatchCodec) -> Self {
        Self { codec }
    }
}

impl Default for PatchEmbedder {
    fn default() -> Self {
        Self::new(PatchCodec::new(4, 0).expect("patch 4 codec"))
    }
}

impl Embedder for PatchEmbedder {
    fn embed(&self, frame: &Tensor) -> Result<Vec<f64>> {
        let z = self.codec.encode_frame(frame)?;
        let c = z.dims()[0];
        let plane = z.len() / c;
        let mut v: Vec<f64> = (0..c)
            .map(|k| z.outer_slice(k).iter().sum::<f64>() / plane as f64)
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(v)
    }
}

/// Cosine similarity clamped to `[-1, 1]`; a zero vector scores 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        log::warn!("zero-norm embedding, similarity taken as 0");
        return 0.0;
    }
    if a == b {
        return 1.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Similarity of each consecutive pair `(i, i+1)`.
pub fn pair_similarities(fs: &FrameSequence, emb: &dyn Embedder) -> Result<Vec<f64>> {
    if fs.len() < 2 {
        return Err(Error::Metric(format!("need at least 2 frames, got {}", fs.len())));
    }
    let embeddings = fs.frames().iter().map(|f| emb.embed(f)).collect::<Result<Vec<_>>>()?;
    if let Some(i) = embeddings.iter().position(|e| e.iter().any(|x| !x.is_finite())) {
        return Err(Error::Metric(format!("embedding of frame {i} is not finite")));
    }
    Ok(embeddings.windows(2).map(|w| cosine(&w[0], &w[1])).collect())
}

pub fn frame_consistency(fs: &FrameSequence, emb: &dyn Embedder) -> Result<f64> {
    let sims = pair_similarities(fs, emb)?;
    Ok(sims.iter().sum::<f64>() / sims.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Embeds a frame as the vector stored at the index of its first pixel.
    struct Lookup(Vec<Vec<f64>>);

    impl Embedder for Lookup {
        fn embed(&self, frame: &Tensor) -> Result<Vec<f64>> {
            Ok(self.0[frame.data()[0] as usize].clone())
        }
    }

    fn indexed(n: usize) -> FrameSequence {
        FrameSequence::new((0..n).map(|i| Tensor::full(&[3, 4, 4], i as f64)).collect()).unwrap()
    }

    #[test]
    fn constant_video_scores_one() {
        let frame = Tensor::from_fn(&[3, 8, 8], |i| ((i * 31) % 17) as f64 / 16.0);
        let fs = FrameSequence::new(vec![frame; 5]).unwrap();
        assert_eq!(frame_consistency(&fs, &PatchEmbedder::default()).unwrap(), 1.0);
    }

    #[test]
    fn orthogonal_pair_scores_zero() {
        let emb = Lookup(vec![vec![1.0, 0.0], vec![0.0, 2.0]]);
        assert_eq!(frame_consistency(&indexed(2), &emb).unwrap(), 0.0);
    }

    #[test]
    fn three_frame_mean() {
        // cos(e0, e1) = 1, cos(e1, e2) = 1/2
        let emb = Lookup(vec![vec![1.0, 0.0], vec![3.0, 0.0], vec![0.5, 0.75f64.sqrt()]]);
        let score = frame_consistency(&indexed(3), &emb).unwrap();
        assert!((score - 0.75).abs() < 1e-12);
    }

    #[test]
    fn zero_embedding_is_zero_similarity() {
        let emb = Lookup(vec![vec![0.0, 0.0], vec![1.0, 0.0]]);
        assert_eq!(frame_consistency(&indexed(2), &emb).unwrap(), 0.0);
    }

    #[test]
    fn single_frame_is_an_error() {
        let fs = indexed(1);
        assert!(matches!(
            frame_consistency(&fs, &PatchEmbedder::default()),
            Err(Error::Metric(_))
        ));
    }

    fn random_video(seed: u64, n: usize) -> FrameSequence {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        FrameSequence::new(
            (0..n)
                .map(|_| Tensor::from_fn(&[3, 8, 8], |_| rng.random::<f64>()))
                .collect(),
        )
        .unwrap()
    }

    proptest! {
        #[test]
        fn reversal_invariance_and_range(seed in any::<u64>(), n in 2usize..6) {
            let fs = random_video(seed, n);
            let emb = PatchEmbedder::default();
            let fwd = frame_consistency(&fs, &emb).unwrap();
            let mut rev = fs.frames().to_vec();
            rev.reverse();
            let bwd = frame_consistency(&FrameSequence::new(rev).unwrap(), &emb).unwrap();
            prop_assert!((-1.0..=1.0).contains(&fwd));
            prop_assert!((fwd - bwd).abs() < 1e-12);
        }

        #[test]
        fn duplicating_frames_never_lowers_the_score(seed in any::<u64>(), n in 2usize..6) {
            let fs = random_video(seed, n);
            let emb = PatchEmbedder::default();
            let doubled: Vec<Tensor> = fs.frames().iter().flat_map(|f| [f.clone(), f.clone()]).collect();
            let base = frame_consistency(&fs, &emb).unwrap();
            let dup = frame_consistency(&FrameSequence::new(doubled).unwrap(), &emb).unwrap();
            prop_assert!(dup >= base - 1e-12);
        }
    }
}
