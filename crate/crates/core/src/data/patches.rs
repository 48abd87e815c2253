use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DatasetBundle, Split};
use crate::error::{config_err, data_err, Result};
use crate::tensor::Tensor;

/// A batch of co-located patches.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchBatch {
    /// `[B, 1, bands, k, k]`
    pub x_h: Tensor,
    /// `[B, aux_channels, k, k]`
    pub x_aux: Tensor,
    /// Zero-based class of each patch's center pixel.
    pub labels: Vec<usize>,
    /// `(row, col)` of each center.
    pub centers: Vec<(usize, usize)>,
}

impl PatchBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Reflects an index in `-(n-1)..2n-1` into `0..n` without repeating the edge.
pub fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

/// Copies the `k×k` window of every channel of `x` (`[C,H,W]`) whose
/// center is `(r, c)` into `out`. For even `k` the center sits at offset
/// `k/2`.
pub fn crop_into(x: &Tensor, r: usize, c: usize, k: usize, out: &mut Vec<f64>) {
    let (ch, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let half = (k / 2) as isize;
    let d = x.data();
    for plane in 0..ch {
        for dr in 0..k as isize {
            let rr = reflect(r as isize + dr - half, h);
            let row = &d[(plane * h + rr) * w..(plane * h + rr + 1) * w];
            for dc in 0..k as isize {
                out.push(row[reflect(c as isize + dc - half, w)]);
            }
        }
    }
}

/// Iterator over the patches of one split, `batch` centers at a time.
#[derive(Debug)]
pub struct PatchStream<'a> {
    bundle: &'a DatasetBundle,
    centers: Vec<(usize, usize)>,
    k: usize,
    batch: usize,
    pos: usize,
}

impl PatchStream<'_> {
    pub fn total(&self) -> usize {
        self.centers.len()
    }

    pub fn centers(&self) -> &[(usize, usize)] {
        &self.centers
    }
}

impl Iterator for PatchStream<'_> {
    type Item = PatchBatch;

    fn next(&mut self) -> Option<PatchBatch> {
        if self.pos >= self.centers.len() {
            return None;
        }
        let end = (self.pos + self.batch).min(self.centers.len());
        let centers = self.centers[self.pos..end].to_vec();
        self.pos = end;
        Some(make_batch(self.bundle, &centers, self.k, None))
    }
}

/// Builds patches for arbitrary centers. `labels` defaults to the union of
/// both label rasters (0-based; unlabeled centers get class 0).
fn make_batch(
    bundle: &DatasetBundle,
    centers: &[(usize, usize)],
    k: usize,
    labels: Option<Vec<usize>>,
) -> PatchBatch {
    let b = centers.len();
    let (bands, caux) = (bundle.hsi.shape()[0], bundle.aux.shape()[0]);
    let mut xh = Vec::with_capacity(b * bands * k * k);
    let mut xa = Vec::with_capacity(b * caux * k * k);
    for &(r, c) in centers {
        crop_into(&bundle.hsi, r, c, k, &mut xh);
        crop_into(&bundle.aux, r, c, k, &mut xa);
    }
    let labels = labels.unwrap_or_else(|| {
        centers
            .iter()
            .map(|&(r, c)| {
                let v = bundle.labels_train.get(r, c).max(bundle.labels_test.get(r, c));
                (v as usize).saturating_sub(1)
            })
            .collect()
    });
    PatchBatch {
        x_h: Tensor::from_parts(vec![b, 1, bands, k, k], xh),
        x_aux: Tensor::from_parts(vec![b, caux, k, k], xa),
        labels,
        centers: centers.to_vec(),
    }
}

/// Patches centered at arbitrary pixels, labeled or not.
pub fn patches_at(bundle: &DatasetBundle, centers: &[(usize, usize)], k: usize) -> Result<PatchBatch> {
    check_k(bundle, k)?;
    if let Some(&(r, c)) = centers.iter().find(|&&(r, c)| r >= bundle.height() || c >= bundle.width()) {
        return Err(data_err!("center ({r}, {c}) outside {}x{} raster", bundle.height(), bundle.width()));
    }
    Ok(make_batch(bundle, centers, k, None))
}

fn check_k(bundle: &DatasetBundle, k: usize) -> Result<()> {
    let (h, w) = (bundle.height(), bundle.width());
    if k == 0 || k > h.min(w) {
        return Err(config_err!("patch size {k} must be in 1..={}", h.min(w)));
    }
    Ok(())
}

/// One patch per labeled pixel of `split`. Without a seed the order is
/// row-major; with one it is a seeded permutation of that order.
pub fn extract_patches(
    bundle: &DatasetBundle,
    split: Split,
    k: usize,
    batch: usize,
    shuffle_seed: Option<u64>,
) -> Result<PatchStream<'_>> {
    check_k(bundle, k)?;
    if batch == 0 {
        return Err(config_err!("batch size must be at least 1"));
    }
    let mut centers = bundle.labels(split).labeled_pixels();
    if centers.is_empty() {
        return Err(data_err!("no labeled pixels in the {split:?} split"));
    }
    if let Some(seed) = shuffle_seed {
        centers.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(PatchStream {
        bundle,
        centers,
        k,
        batch,
        pos: 0,
    })
}
