use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::resample_nn;
use crate::error::{data_err, Error, Result};
use crate::tensor::Tensor;

/// Contents of `meta.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    pub aux_channels: usize,
    pub classes: Vec<String>,
    pub palette: Vec<[u8; 3]>,
    pub dtype: String,
    /// Grid of `aux.bin` when it differs from the hyperspectral grid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aux_height: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aux_width: Option<usize>,
}

impl Meta {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }
}

/// Integer label raster; 0 is unlabeled, `1..=K` are classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u32>,
}

impl LabelMap {
    pub fn zeros(height: usize, width: usize) -> Self {
        LabelMap {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> u32 {
        self.data[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: u32) {
        self.data[r * self.width + c] = v;
    }

    pub fn labeled_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Pixel counts per class, index 0 = class 1.
    pub fn histogram(&self, n_classes: usize) -> Vec<usize> {
        let mut h = vec![0; n_classes];
        for &v in &self.data {
            if v != 0 && (v as usize) <= n_classes {
                h[v as usize - 1] += 1;
            }
        }
        h
    }

    /// Labeled pixel positions in row-major order.
    pub fn labeled_pixels(&self) -> Vec<(usize, usize)> {
        (0..self.height)
            .flat_map(|r| (0..self.width).map(move |c| (r, c)))
            .filter(|&(r, c)| self.get(r, c) != 0)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Usage(format!("unknown split {other:?}, expected train or test"))),
        }
    }
}

/// Co-registered hyperspectral and SAR/LiDAR rasters with their label maps.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    /// `[bands, H, W]`
    pub hsi: Tensor,
    /// `[aux_channels, H, W]`
    pub aux: Tensor,
    pub labels_train: LabelMap,
    pub labels_test: LabelMap,
    pub meta: Meta,
}

impl DatasetBundle {
    pub fn height(&self) -> usize {
        self.meta.height
    }

    pub fn width(&self) -> usize {
        self.meta.width
    }

    pub fn n_classes(&self) -> usize {
        self.meta.n_classes()
    }

    pub fn labels(&self, split: Split) -> &LabelMap {
        match split {
            Split::Train => &self.labels_train,
            Split::Test => &self.labels_test,
        }
    }

    /// Checks the invariants every loaded or generated bundle must satisfy.
    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.meta.height, self.meta.width);
        if self.hsi.shape() != [self.meta.bands, h, w] {
            return Err(data_err!("hsi has shape {:?}, meta says [{}, {h}, {w}]", self.hsi.shape(), self.meta.bands));
        }
        if self.aux.shape() != [self.meta.aux_channels, h, w] {
            return Err(data_err!(
                "aux has shape {:?}, expected [{}, {h}, {w}]",
                self.aux.shape(),
                self.meta.aux_channels
            ));
        }
        let k = self.n_classes();
        if k < 2 {
            return Err(data_err!("meta.json: classes must list at least 2 names"));
        }
        for (file, labels) in [("labels_train.bin", &self.labels_train), ("labels_test.bin", &self.labels_test)] {
            if (labels.height, labels.width) != (h, w) {
                return Err(data_err!("{file}: extent {}x{} does not match {h}x{w}", labels.height, labels.width));
            }
            if let Some(bad) = labels.data.iter().find(|&&v| v as usize > k) {
                return Err(data_err!("{file}: label value {bad} exceeds class count {k}"));
            }
        }
        let overlap = self
            .labels_train
            .data
            .iter()
            .zip(&self.labels_test.data)
            .filter(|(a, b)| **a != 0 && **b != 0)
            .count();
        if overlap > 0 {
            return Err(data_err!("{overlap} pixels are labeled in both train and test rasters"));
        }
        Ok(())
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_f32(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let bytes = read(path)?;
    if bytes.len() != expected * 4 {
        return Err(data_err!(
            "{}: expected {} bytes ({expected} f32 values), found {}",
            path.display(),
            expected * 4,
            bytes.len()
        ));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(data_err!("{}: non-finite value at index {i}", path.display()));
    }
    Ok(values)
}

fn read_labels(path: &Path, height: usize, width: usize, n_classes: usize) -> Result<LabelMap> {
    let bytes = read(path)?;
    if bytes.len() != height * width * 4 {
        return Err(data_err!(
            "{}: expected {} bytes for a {height}x{width} i32 raster, found {}",
            path.display(),
            height * width * 4,
            bytes.len()
        ));
    }
    let mut data = Vec::with_capacity(height * width);
    for (i, b) in bytes.chunks_exact(4).enumerate() {
        let v = i32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        if v < 0 || v as usize > n_classes {
            return Err(data_err!(
                "{}: label {v} at pixel {i} outside 0..={n_classes}",
                path.display()
            ));
        }
        data.push(v as u32);
    }
    Ok(LabelMap { height, width, data })
}

/// Loads a bundle directory. An aux raster on a different grid (declared via
/// `aux_height`/`aux_width`) is resampled onto the hyperspectral grid.
pub fn load_bundle(dir: impl AsRef<Path>) -> Result<DatasetBundle> {
    let dir = dir.as_ref();
    let meta_path = dir.join("meta.json");
    let mut meta: Meta = serde_json::from_slice(&read(&meta_path)?)
        .map_err(|e| data_err!("{}: {e}", meta_path.display()))?;
    if meta.dtype != "f32" {
        return Err(data_err!("{}: dtype must be \"f32\", got {:?}", meta_path.display(), meta.dtype));
    }
    let (h, w) = (meta.height, meta.width);
    if h == 0 || w == 0 || meta.bands == 0 || meta.aux_channels == 0 {
        return Err(data_err!("{}: zero extent in bands/height/width/aux_channels", meta_path.display()));
    }
    let hsi = Tensor::new(&[meta.bands, h, w], read_f32(&dir.join("hsi.bin"), meta.bands * h * w)?)?;
    let (ah, aw) = (meta.aux_height.unwrap_or(h), meta.aux_width.unwrap_or(w));
    let aux_raw = Tensor::new(
        &[meta.aux_channels, ah, aw],
        read_f32(&dir.join("aux.bin"), meta.aux_channels * ah * aw)?,
    )?;
    let aux = if (ah, aw) == (h, w) { aux_raw } else { resample_nn(&aux_raw, h, w)? };
    meta.aux_height = None;
    meta.aux_width = None;
    let k = meta.n_classes();
    let bundle = DatasetBundle {
        hsi,
        aux,
        labels_train: read_labels(&dir.join("labels_train.bin"), h, w, k)?,
        labels_test: read_labels(&dir.join("labels_test.bin"), h, w, k)?,
        meta,
    };
    bundle.validate()?;
    Ok(bundle)
}

fn f32_bytes(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

fn label_bytes(l: &LabelMap) -> Vec<u8> {
    l.data.iter().flat_map(|&v| (v as i32).to_le_bytes()).collect()
}

/// Writes a bundle directory, creating it if needed. Values are stored as
/// f32, so bundles whose values are already f32-representable round-trip
/// exactly.
pub fn save_bundle(bundle: &DatasetBundle, dir: impl AsRef<Path>) -> Result<()> {
    bundle.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut meta = serde_json::to_string_pretty(&bundle.meta)
        .map_err(|e| data_err!("serializing meta.json: {e}"))?;
    meta.push('\n');
    let files: [(&str, Vec<u8>); 5] = [
        ("meta.json", meta.into_bytes()),
        ("hsi.bin", f32_bytes(&bundle.hsi)),
        ("aux.bin", f32_bytes(&bundle.aux)),
        ("labels_train.bin", label_bytes(&bundle.labels_train)),
        ("labels_test.bin", label_bytes(&bundle.labels_test)),
    ];
    for (name, bytes) in files {
        write(&dir.join(name), &bytes)?;
    }
    Ok(())
}

/// The files making up a bundle directory.
pub fn bundle_files(dir: &Path) -> Vec<PathBuf> {
    ["meta.json", "hsi.bin", "aux.bin", "labels_train.bin", "labels_test.bin"]
        .iter()
        .map(|f| dir.join(f))
        .collect()
}
