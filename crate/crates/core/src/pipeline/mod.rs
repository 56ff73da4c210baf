//! Block-wise generation with long-term memory, and the toy training loop.
//!
//! Both paths reach the repository only through [`recall`] and
//! [`consolidate`], so the retrieval and fusion sequence is the same in
//! training and inference. A [`CallTrace`] records that sequence.

mod generate;
mod memory_path;
mod trace;
mod train;
mod video;

pub use generate::{generate_video, ClipResult, GenerationConfig, DEFAULT_NEGATIVE_PROMPT};
pub use memory_path::{check_compat, consolidate, recall, CallTrace, Consolidated, MemoryEvent, Recall};
pub use trace::{read_trace, TraceRecord, TraceWriter};
pub use train::{synthetic_dataset, train_toy, AdamW, Example, TrainConfig, TrainOutcome};
pub use video::{load_video, read_video, save_video, write_video};

use crate::error::{dim_err, Result};
use crate::numerics::{clip_dims, Tensor};

/// Classifier-free guidance: `v_u + scale·(v_c − v_u)`.
pub fn cfg_combine(v_cond: &Tensor, v_uncond: &Tensor, scale: f64) -> Result<Tensor> {
    if v_cond.shape() != v_uncond.shape() {
        return dim_err(format!("guidance inputs {:?} vs {:?}", v_cond.shape(), v_uncond.shape()));
    }
    if scale == 1.0 {
        return Ok(v_cond.clone());
    }
    if scale == 0.0 {
        return Ok(v_uncond.clone());
    }
    v_uncond.zip_map(v_cond, |u, c| u + scale * (c - u))
}

/// Latent-to-video decoding. Without a learned decoder this is the identity.
pub fn decode_clip(z: &Tensor) -> Tensor {
    z.clone()
}

/// Copy `count` frames of `src` starting at `from` over frames of `dst`
/// starting at `to`.
pub(crate) fn copy_frames(dst: &mut Tensor, to: usize, src: &Tensor, from: usize, count: usize) -> Result<()> {
    let [c, t, h, w] = clip_dims(dst)?;
    let [sc, st, sh, sw] = clip_dims(src)?;
    if (c, h, w) != (sc, sh, sw) || to + count > t || from + count > st {
        return dim_err(format!("cannot copy {count} frames from {:?} into {:?}", src.shape(), dst.shape()));
    }
    let hw = h * w;
    for ci in 0..c {
        let s = &src.data()[(ci * st + from) * hw..][..count * hw];
        dst.data_mut()[(ci * t + to) * hw..][..count * hw].copy_from_slice(s);
    }
    Ok(())
}

/// Zero the first `count` frames.
pub(crate) fn zero_leading_frames(x: &mut Tensor, count: usize) -> Result<()> {
    let [c, t, h, w] = clip_dims(x)?;
    let hw = h * w;
    let n = count.min(t);
    for ci in 0..c {
        x.data_mut()[ci * t * hw..][..n * hw].iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gaussian, Rng};

    #[test]
    fn guidance_cases() {
        let mut rng = Rng::new(1);
        let (c, u) = (gaussian(&mut rng, &[2, 3]), gaussian(&mut rng, &[2, 3]));
        assert_eq!(cfg_combine(&c, &u, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), u);
        let five = cfg_combine(&Tensor::filled(&[4], 1.0), &Tensor::zeros(&[4]), 5.0).unwrap();
        assert_eq!(five, Tensor::filled(&[4], 5.0));
        assert!(cfg_combine(&c, &Tensor::zeros(&[3, 2]), 2.0).is_err());
    }

    #[test]
    fn decode_is_identity() {
        let z = gaussian(&mut Rng::new(2), &[2, 3, 2, 2]);
        assert_eq!(decode_clip(&z), z);
        assert_eq!(decode_clip(&decode_clip(&z)), decode_clip(&z));
    }

    #[test]
    fn frame_helpers() {
        let src = gaussian(&mut Rng::new(3), &[2, 5, 2, 2]);
        let mut dst = Tensor::zeros(&[2, 5, 2, 2]);
        copy_frames(&mut dst, 0, &src, 3, 2).unwrap();
        for ci in 0..2 {
            for f in 0..2 {
                for k in 0..4 {
                    assert_eq!(dst.data()[(ci * 5 + f) * 4 + k], src.data()[(ci * 5 + 3 + f) * 4 + k]);
                }
            }
        }
        assert!(copy_frames(&mut dst, 4, &src, 0, 2).is_err());
        let mut x = src.clone();
        zero_leading_frames(&mut x, 2).unwrap();
        assert_eq!(x.data()[0], 0.0);
        assert_eq!(x.data()[8], src.data()[8]);
    }
}
