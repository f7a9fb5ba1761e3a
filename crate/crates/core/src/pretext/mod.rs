//! Label-free pretext tasks: target generation and per-task losses.

mod batches;
pub mod color;
mod loss;
mod permutations;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::tensor::{DType, Tensor};

pub use batches::PretextSource;
pub use loss::{
    loss_and_grad, reconstruction_terms, task_loss, total_loss, KldOrder, LossConfig,
    ReconstructionTerms, TaskTarget,
};
pub use permutations::{build_permutation_set, PermutationSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaskId {
    #[serde(rename = "r")]
    Reconstruction,
    #[serde(rename = "s")]
    Segmentation,
    #[serde(rename = "c")]
    Colorization,
    #[serde(rename = "j")]
    Jigsaw,
}

impl TaskId {
    pub const ALL: [TaskId; 4] = [
        TaskId::Reconstruction,
        TaskId::Segmentation,
        TaskId::Colorization,
        TaskId::Jigsaw,
    ];

    pub fn code(self) -> &'static str {
        match self {
            TaskId::Reconstruction => "r",
            TaskId::Segmentation => "s",
            TaskId::Colorization => "c",
            TaskId::Jigsaw => "j",
        }
    }

    pub fn index(self) -> u64 {
        match self {
            TaskId::Reconstruction => 0,
            TaskId::Segmentation => 1,
            TaskId::Colorization => 2,
            TaskId::Jigsaw => 3,
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for TaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskId::ALL
            .into_iter()
            .find(|t| t.code() == s)
            .ok_or_else(|| Error::Config(format!("unknown task `{s}` (expected r, s, c or j)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PretextTarget {
    /// Reconstruction targets, `[H, W, 3]` in `[0, 1]`.
    Image(Tensor),
    /// Lab `ab` channels scaled to `[-1, 1]`, `[H, W, 2]`.
    Chroma(Tensor),
    /// Index into the permutation set.
    Permutation(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretextSample {
    pub task: TaskId,
    /// `[H, W, 3]` for r, s and c; a `[P, ph, pw, 3]` patch stack for j.
    pub input: Tensor,
    pub target: PretextTarget,
}

fn image_dims(image: &Tensor) -> Result<(usize, usize)> {
    match image.shape() {
        [h, w, 3] => Ok((*h, *w)),
        other => Err(Error::Shape(format!("expected an [H, W, 3] image, got {other:?}"))),
    }
}

fn check_pixels(image: &Tensor) -> Result<()> {
    if image
        .data()
        .iter()
        .any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0)
    {
        return Err(Error::InvalidArgument("pixel values must lie in [0, 1]".into()));
    }
    Ok(())
}

/// Split an image into grid patches in row-major order.
pub fn extract_patches(image: &Tensor, grid: (usize, usize)) -> Result<Vec<Vec<f64>>> {
    let (h, w) = image_dims(image)?;
    let (rows, cols) = grid;
    if rows == 0 || cols == 0 || h % rows != 0 || w % cols != 0 {
        return Err(Error::InvalidArgument(format!(
            "{h}x{w} image is not divisible by a {rows}x{cols} grid"
        )));
    }
    let (ph, pw) = (h / rows, w / cols);
    let data = image.data();
    let mut patches = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let mut p = Vec::with_capacity(ph * pw * 3);
            for y in 0..ph {
                let start = ((r * ph + y) * w + c * pw) * 3;
                p.extend_from_slice(&data[start..start + pw * 3]);
            }
            patches.push(p);
        }
    }
    Ok(patches)
}

/// Undo a jigsaw shuffle: `stack[slot]` holds original patch `perm[slot]`.
pub fn assemble_patches(
    stack: &Tensor,
    perm: &[usize],
    grid: (usize, usize),
) -> Result<Tensor> {
    let (p, ph, pw) = match stack.shape() {
        [p, ph, pw, 3] => (*p, *ph, *pw),
        other => return Err(Error::Shape(format!("patch stack shape {other:?}"))),
    };
    let (rows, cols) = grid;
    if p != rows * cols || perm.len() != p {
        return Err(Error::Shape(format!("{p} patches for a {rows}x{cols} grid")));
    }
    let (h, w) = (rows * ph, cols * pw);
    let mut out = vec![0.0; h * w * 3];
    let patch_len = ph * pw * 3;
    for (slot, &orig) in perm.iter().enumerate() {
        let src = &stack.data()[slot * patch_len..(slot + 1) * patch_len];
        let (r, c) = (orig / cols, orig % cols);
        for y in 0..ph {
            let dst = ((r * ph + y) * w + c * pw) * 3;
            out[dst..dst + pw * 3].copy_from_slice(&src[y * pw * 3..(y + 1) * pw * 3]);
        }
    }
    Tensor::new(vec![h, w, 3], out, stack.dtype())
}

pub fn make_pretext(
    image: &Tensor,
    task: TaskId,
    perms: &PermutationSet,
    seed: u64,
) -> Result<PretextSample> {
    let (h, w) = image_dims(image)?;
    check_pixels(image)?;
    match task {
        TaskId::Reconstruction | TaskId::Segmentation => Ok(PretextSample {
            task,
            input: image.clone(),
            target: PretextTarget::Image(image.clone()),
        }),
        TaskId::Colorization => {
            let mut gray = Vec::with_capacity(h * w * 3);
            let mut ab = Vec::with_capacity(h * w * 2);
            for px in image.data().chunks_exact(3) {
                let lab = color::rgb_to_lab([px[0], px[1], px[2]]);
                let l = lab[0] / 100.0;
                gray.extend_from_slice(&[l, l, l]);
                ab.push((lab[1] / color::CHROMA_SCALE).clamp(-1.0, 1.0));
                ab.push((lab[2] / color::CHROMA_SCALE).clamp(-1.0, 1.0));
            }
            Ok(PretextSample {
                task,
                input: Tensor::new(vec![h, w, 3], gray, DType::F64)?,
                target: PretextTarget::Chroma(Tensor::new(vec![h, w, 2], ab, DType::F64)?),
            })
        }
        TaskId::Jigsaw => {
            let patches = extract_patches(image, perms.grid())?;
            let index = rng_for(seed, &[]).random_range(0..perms.count());
            let perm = perms.get(index);
            let (ph, pw) = (h / perms.grid().0, w / perms.grid().1);
            let mut stack = Vec::with_capacity(h * w * 3);
            for &orig in perm {
                stack.extend_from_slice(&patches[orig]);
            }
            Ok(PretextSample {
                task,
                input: Tensor::new(vec![perm.len(), ph, pw, 3], stack, image.dtype())?,
                target: PretextTarget::Permutation(index),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = rng_for(seed, &[]);
        let data = (0..h * w * 3).map(|_| rng.random::<f64>()).collect();
        Tensor::new(vec![h, w, 3], data, DType::F32).unwrap()
    }

    #[test]
    fn reconstruction_target_is_the_image() {
        let perms = build_permutation_set((2, 2), 4, 0).unwrap();
        let img = image(8, 8, 1);
        for task in [TaskId::Reconstruction, TaskId::Segmentation] {
            let s = make_pretext(&img, task, &perms, 3).unwrap();
            assert_eq!(s.target, PretextTarget::Image(img.clone()));
            assert_eq!(s.input, img);
        }
    }

    #[test]
    fn gray_has_no_chroma() {
        let perms = build_permutation_set((2, 2), 1, 0).unwrap();
        let mut data = Vec::new();
        for i in 0..16 {
            let v = i as f64 / 15.0;
            data.extend_from_slice(&[v, v, v]);
        }
        let img = Tensor::new(vec![4, 4, 3], data, DType::F64).unwrap();
        let s = make_pretext(&img, TaskId::Colorization, &perms, 0).unwrap();
        let PretextTarget::Chroma(ab) = s.target else { panic!() };
        assert!(ab.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn colorization_round_trip_recovers_rgb() {
        let perms = build_permutation_set((2, 2), 1, 0).unwrap();
        let img = image(8, 8, 5);
        let s = make_pretext(&img, TaskId::Colorization, &perms, 0).unwrap();
        let PretextTarget::Chroma(ab) = &s.target else { panic!() };
        for (i, px) in img.data().chunks_exact(3).enumerate() {
            let l = s.input.data()[i * 3] * 100.0;
            let a = ab.data()[i * 2] * color::CHROMA_SCALE;
            let b = ab.data()[i * 2 + 1] * color::CHROMA_SCALE;
            let rgb = color::lab_to_rgb([l, a, b]);
            for k in 0..3 {
                assert!((rgb[k] - px[k]).abs() <= 2.0 / 255.0);
            }
        }
    }

    #[test]
    fn identity_draw_keeps_patch_order() {
        let perms = build_permutation_set((2, 2), 1, 0).unwrap();
        let img = image(8, 8, 2);
        let s = make_pretext(&img, TaskId::Jigsaw, &perms, 99).unwrap();
        assert_eq!(s.target, PretextTarget::Permutation(0));
        let flat: Vec<f64> = extract_patches(&img, (2, 2)).unwrap().concat();
        assert_eq!(s.input.data(), flat.as_slice());
    }

    #[test]
    fn jigsaw_inverse_restores_image() {
        let perms = build_permutation_set((2, 2), 24, 4).unwrap();
        let img = image(8, 12, 6);
        for seed in 0..10 {
            let s = make_pretext(&img, TaskId::Jigsaw, &perms, seed).unwrap();
            let PretextTarget::Permutation(idx) = s.target else { panic!() };
            let back = assemble_patches(&s.input, perms.get(idx), (2, 2)).unwrap();
            assert_eq!(back, img);
        }
    }

    #[test]
    fn make_pretext_is_deterministic() {
        let perms = build_permutation_set((2, 2), 24, 4).unwrap();
        let img = image(8, 8, 7);
        for task in TaskId::ALL {
            assert_eq!(
                make_pretext(&img, task, &perms, 42).unwrap(),
                make_pretext(&img, task, &perms, 42).unwrap()
            );
        }
    }

    #[test]
    fn rejects_bad_grid_and_pixels() {
        let perms = build_permutation_set((3, 3), 2, 0).unwrap();
        assert!(make_pretext(&image(8, 8, 1), TaskId::Jigsaw, &perms, 0).is_err());
        let hot = Tensor::full(vec![4, 4, 3], 1.5, DType::F32);
        assert!(make_pretext(&hot, TaskId::Reconstruction, &perms, 0).is_err());
    }

    #[test]
    fn task_codes_parse() {
        for t in TaskId::ALL {
            assert_eq!(t.code().parse::<TaskId>().unwrap(), t);
        }
        assert!("x".parse::<TaskId>().is_err());
    }
}
