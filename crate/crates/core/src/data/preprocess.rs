use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::{DatasetBundle, Meta};
use crate::error::{config_err, shape_err, Result};
use crate::tensor::Tensor;

fn dims3(x: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(shape_err!("{what} must be [C,H,W], got {:?}", x.shape())),
    }
}

/// Nearest-neighbour resampling. Output pixel `i` reads source pixel
/// `floor((i + 0.5) * h / out_h)`, clamped to the source extent.
pub fn resample_nn(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = dims3(x, "resample_nn input")?;
    if out_h == 0 || out_w == 0 {
        return Err(shape_err!("resample_nn target must be positive, got {out_h}x{out_w}"));
    }
    let src = |i: usize, n: usize, out: usize| ((2 * i + 1) * n / (2 * out)).min(n - 1);
    let rows: Vec<usize> = (0..out_h).map(|i| src(i, h, out_h)).collect();
    let cols: Vec<usize> = (0..out_w).map(|j| src(j, w, out_w)).collect();
    let d = x.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        for &r in &rows {
            for &cc in &cols {
                out.push(d[(ch * h + r) * w + cc]);
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}

/// Per-channel min-max scaling to `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Normalizer {
    pub fn fit(x: &Tensor) -> Result<Self> {
        let (c, h, w) = dims3(x, "normalize input")?;
        let plane = h * w;
        let (mut min, mut max) = (Vec::with_capacity(c), Vec::with_capacity(c));
        for ch in x.data().chunks_exact(plane) {
            min.push(ch.iter().copied().fold(f64::INFINITY, f64::min));
            max.push(ch.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        }
        Ok(Normalizer { min, max })
    }

    /// Constant channels map to 0. Values outside the fitted range are not
    /// clipped.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (c, h, w) = dims3(x, "normalize input")?;
        if c != self.min.len() {
            return Err(shape_err!("normalizer fitted on {} channels, got {c}", self.min.len()));
        }
        let mut out = x.data().to_vec();
        for (ch, plane) in out.chunks_exact_mut(h * w).enumerate() {
            let (lo, range) = (self.min[ch], self.max[ch] - self.min[ch]);
            for v in plane {
                *v = if range > 0.0 { (*v - lo) / range } else { 0.0 };
            }
        }
        Tensor::new(x.shape(), out)
    }
}

pub fn normalize(x: &Tensor) -> Result<Tensor> {
    Normalizer::fit(x)?.apply(x)
}

/// Principal axes of the per-pixel spectra.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// Row-major `[n_components, bands]`; rows are orthonormal.
    pub components: Vec<f64>,
    /// Covariance eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
}

impl PcaModel {
    pub fn bands(&self) -> usize {
        self.mean.len()
    }

    pub fn n_components(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn component(&self, i: usize) -> &[f64] {
        let b = self.bands();
        &self.components[i * b..(i + 1) * b]
    }
}

/// Fits PCA treating every pixel's spectrum as one observation.
pub fn pca_fit(hsi: &Tensor, n_components: usize) -> Result<PcaModel> {
    let (bands, h, w) = dims3(hsi, "pca input")?;
    if n_components == 0 || n_components > bands {
        return Err(config_err!("n_components must be in 1..={bands}, got {n_components}"));
    }
    let n = h * w;
    let d = hsi.data();
    let mean: Vec<f64> = d.chunks_exact(n).map(|p| p.iter().sum::<f64>() / n as f64).collect();
    let mut cov = DMatrix::<f64>::zeros(bands, bands);
    for i in 0..bands {
        for j in i..bands {
            let (pi, pj) = (&d[i * n..(i + 1) * n], &d[j * n..(j + 1) * n]);
            let s: f64 = pi.iter().zip(pj).map(|(a, b)| (a - mean[i]) * (b - mean[j])).sum();
            cov[(i, j)] = s / n as f64;
            cov[(j, i)] = s / n as f64;
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..bands).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut components = Vec::with_capacity(n_components * bands);
    let mut eigenvalues = Vec::with_capacity(n_components);
    for &idx in order.iter().take(n_components) {
        let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        let lead = v
            .iter()
            .enumerate()
            .fold(0, |best, (i, x)| if x.abs() > v[best].abs() { i } else { best });
        if v[lead] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.extend(v);
        eigenvalues.push(eig.eigenvalues[idx]);
    }
    Ok(PcaModel {
        mean,
        components,
        eigenvalues,
    })
}

/// Projects `[bands,H,W]` onto the components, giving `[n_components,H,W]`.
pub fn pca_apply(hsi: &Tensor, pca: &PcaModel) -> Result<Tensor> {
    let (bands, h, w) = dims3(hsi, "pca input")?;
    if bands != pca.bands() {
        return Err(shape_err!("pca fitted on {} bands, got {bands}", pca.bands()));
    }
    let n = h * w;
    let d = hsi.data();
    let mut out = vec![0.0; pca.n_components() * n];
    for (k, plane) in out.chunks_exact_mut(n).enumerate() {
        for (b, &coef) in pca.component(k).iter().enumerate() {
            let src = &d[b * n..(b + 1) * n];
            let m = pca.mean[b];
            for (o, &s) in plane.iter_mut().zip(src) {
                *o += coef * (s - m);
            }
        }
    }
    Tensor::new(&[pca.n_components(), h, w], out)
}

/// Maps projected scores back to the spectral space.
pub fn pca_inverse(scores: &Tensor, pca: &PcaModel) -> Result<Tensor> {
    let (k, h, w) = dims3(scores, "pca scores")?;
    if k != pca.n_components() {
        return Err(shape_err!("pca has {} components, got {k}", pca.n_components()));
    }
    let n = h * w;
    let bands = pca.bands();
    let d = scores.data();
    let mut out = Vec::with_capacity(bands * n);
    for b in 0..bands {
        let m = pca.mean[b];
        out.extend((0..n).map(|p| m + (0..k).map(|c| pca.component(c)[b] * d[c * n + p]).sum::<f64>()));
    }
    Tensor::new(&[bands, h, w], out)
}

/// Everything fitted on a scene before patches are cut: PCA on the
/// hyperspectral cube, then min-max scaling of both modalities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub pca: PcaModel,
    pub hsi_norm: Normalizer,
    pub aux_norm: Normalizer,
}

impl Preprocessor {
    /// Fits on all pixels; labels are never consulted.
    pub fn fit(bundle: &DatasetBundle, n_pca: usize) -> Result<Self> {
        let pca = pca_fit(&bundle.hsi, n_pca)?;
        let reduced = pca_apply(&bundle.hsi, &pca)?;
        Ok(Preprocessor {
            hsi_norm: Normalizer::fit(&reduced)?,
            aux_norm: Normalizer::fit(&bundle.aux)?,
            pca,
        })
    }

    /// Returns a bundle whose hyperspectral raster holds the normalized
    /// principal-component scores.
    pub fn apply(&self, bundle: &DatasetBundle) -> Result<DatasetBundle> {
        let hsi = self.hsi_norm.apply(&pca_apply(&bundle.hsi, &self.pca)?)?;
        let aux = self.aux_norm.apply(&bundle.aux)?;
        Ok(DatasetBundle {
            meta: Meta {
                bands: hsi.shape()[0],
                ..bundle.meta.clone()
            },
            hsi,
            aux,
            labels_train: bundle.labels_train.clone(),
            labels_test: bundle.labels_test.clone(),
        })
    }
}
