use rand::seq::SliceRandom;
use rand::Rng;

use super::Sample;
use crate::error::{Error, Result};
use crate::geometry::{apply_to_frame, apply_to_joints, sample_augmentation, AffineAugmentation, AugmentationRanges, DepthFrame, JointSet};

/// Shuffles `0..n` and chunks it; the final short batch is kept.
pub fn epoch_batches<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Exactly `steps` batches, reshuffling whenever the set is exhausted.
pub fn cycled_batches<R: Rng + ?Sized>(n: usize, batch_size: usize, steps: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(steps);
    if n == 0 {
        return out;
    }
    while out.len() < steps {
        out.extend(epoch_batches(n, batch_size, rng));
    }
    out.truncate(steps);
    out
}

/// One batch of (possibly augmented) samples.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    pub frames: Vec<DepthFrame>,
    pub joints: Vec<Option<JointSet>>,
    pub augs: Vec<AffineAugmentation>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// A single shuffled pass over a set.
pub struct BatchStream<'a, R: Rng + ?Sized> {
    set: &'a [Sample],
    batches: std::vec::IntoIter<Vec<usize>>,
    rng: &'a mut R,
    augment: Option<AugmentationRanges>,
}

/// Starts one epoch over `set`. Shuffling advances `rng`; with `augment`
/// set, each sample gets an independent draw applied to frame and joints.
pub fn batches<'a, R: Rng + ?Sized>(
    set: &'a [Sample],
    batch_size: usize,
    rng: &'a mut R,
    augment: Option<AugmentationRanges>,
) -> Result<BatchStream<'a, R>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if let Some(r) = &augment {
        r.validate()?;
    }
    let batches = epoch_batches(set.len(), batch_size, rng).into_iter();
    Ok(BatchStream { set, batches, rng, augment })
}

impl<R: Rng + ?Sized> Iterator for BatchStream<'_, R> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        let idx = self.batches.next()?;
        let mut batch = Batch { ids: vec![], frames: vec![], joints: vec![], augs: vec![] };
        for i in idx {
            let s = &self.set[i];
            let aug = match &self.augment {
                Some(r) => sample_augmentation(&mut *self.rng, r),
                None => AffineAugmentation::identity(),
            };
            let joints = match &s.joints {
                Some(j) => match apply_to_joints(&aug, j, s.frame.crop.center_xyz) {
                    Ok(j) => Some(j),
                    Err(e) => return Some(Err(e)),
                },
                None => None,
            };
            batch.ids.push(s.id.clone());
            batch.frames.push(apply_to_frame(&aug, &s.frame));
            batch.joints.push(joints);
            batch.augs.push(aug);
        }
        Some(Ok(batch))
    }
}
