use super::{color, make_pretext, PermutationSet, PretextTarget, TaskId, TaskTarget};
use crate::data::Dataset;
use crate::error::Result;
use crate::nn::Batch;
use crate::seed::{derive_seed, stream};

/// Builds `(input, target)` training batches for one task over a dataset.
///
/// Colorization inputs are converted once up front. Jigsaw shuffles are
/// redrawn every epoch from `(seed, epoch, sample index)`.
pub struct PretextSource<'a> {
    pub task: TaskId,
    dataset: &'a Dataset,
    perms: &'a PermutationSet,
    seed: u64,
    chroma: Option<(Vec<f64>, Vec<f64>)>,
}

impl<'a> PretextSource<'a> {
    pub fn new(task: TaskId, dataset: &'a Dataset, perms: &'a PermutationSet, seed: u64) -> Self {
        let chroma = (task == TaskId::Colorization).then(|| {
            let px = dataset.h * dataset.w * dataset.n;
            let mut gray = Vec::with_capacity(px * 3);
            let mut ab = Vec::with_capacity(px * 2);
            for p in dataset.pixels.chunks_exact(3) {
                let lab = color::rgb_to_lab([p[0], p[1], p[2]]);
                let l = lab[0] / 100.0;
                gray.extend_from_slice(&[l, l, l]);
                ab.push((lab[1] / color::CHROMA_SCALE).clamp(-1.0, 1.0));
                ab.push((lab[2] / color::CHROMA_SCALE).clamp(-1.0, 1.0));
            }
            (gray, ab)
        });
        PretextSource {
            task,
            dataset,
            perms,
            seed,
            chroma,
        }
    }

    pub fn len(&self) -> usize {
        self.dataset.n
    }

    pub fn is_empty(&self) -> bool {
        self.dataset.n == 0
    }

    pub fn batch(&self, indices: &[usize], epoch: u64) -> Result<(Batch, TaskTarget)> {
        let ds = self.dataset;
        let n = indices.len();
        match self.task {
            TaskId::Reconstruction | TaskId::Segmentation => {
                let x = ds.batch(indices);
                Ok((x.clone(), TaskTarget::Dense(x)))
            }
            TaskId::Colorization => {
                let (gray, ab) = self.chroma.as_ref().expect("built for colorization");
                let (l3, l2) = (ds.h * ds.w * 3, ds.h * ds.w * 2);
                let mut x = Vec::with_capacity(n * l3);
                let mut y = Vec::with_capacity(n * l2);
                for &i in indices {
                    x.extend_from_slice(&gray[i * l3..(i + 1) * l3]);
                    y.extend_from_slice(&ab[i * l2..(i + 1) * l2]);
                }
                Ok((
                    Batch::new(n, ds.h, ds.w, 3, x)?,
                    TaskTarget::Dense(Batch::new(n, ds.h, ds.w, 2, y)?),
                ))
            }
            TaskId::Jigsaw => {
                let (rows, cols) = self.perms.grid();
                let (ph, pw) = (ds.h / rows, ds.w / cols);
                let mut x = Vec::with_capacity(n * ds.image_len());
                let mut labels = Vec::with_capacity(n);
                for &i in indices {
                    let seed = derive_seed(self.seed, &[stream::PRETEXT, epoch, i as u64]);
                    let s = make_pretext(&ds.image_tensor(i), TaskId::Jigsaw, self.perms, seed)?;
                    x.extend_from_slice(s.input.data());
                    if let PretextTarget::Permutation(k) = s.target {
                        labels.push(k);
                    }
                }
                Ok((
                    Batch::new(n * rows * cols, ph, pw, 3, x)?,
                    TaskTarget::Labels(labels),
                ))
            }
        }
    }
}
