use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DatasetBundle, LabelMap, Meta};
use crate::error::{config_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    /// Every class is distinct in both modalities.
    #[default]
    Easy,
    /// Class pairs `(2p, 2p+1)` share their hyperspectral signature for even
    /// `p` and their SAR/LiDAR appearance for odd `p`.
    Complementary,
}

impl std::str::FromStr for Difficulty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(Difficulty::Easy),
            "complementary" => Ok(Difficulty::Complementary),
            other => Err(config_err!("unknown difficulty {other:?}, expected easy or complementary")),
        }
    }
}

impl std::fmt::Display for Difficulty {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Difficulty::Easy => "easy",
            Difficulty::Complementary => "complementary",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub aux_channels: usize,
    pub difficulty: Difficulty,
    pub train_per_class: usize,
    pub test_per_class: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 0,
            classes: 4,
            height: 64,
            width: 64,
            bands: 32,
            aux_channels: 2,
            difficulty: Difficulty::Easy,
            train_per_class: 100,
            test_per_class: 100,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(config_err!("need at least 2 classes, got {}", self.classes));
        }
        if self.height < 4 || self.width < 4 {
            return Err(config_err!("raster must be at least 4x4, got {}x{}", self.height, self.width));
        }
        if self.bands == 0 || self.aux_channels == 0 {
            return Err(config_err!("bands and aux_channels must be positive"));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(config_err!("train_per_class and test_per_class must be positive"));
        }
        Ok(())
    }

    /// Classes that share their hyperspectral signature with a partner.
    pub fn hidden_in_hsi(&self) -> Vec<usize> {
        self.hidden(0)
    }

    /// Classes that share their SAR/LiDAR appearance with a partner.
    pub fn hidden_in_aux(&self) -> Vec<usize> {
        self.hidden(1)
    }

    fn hidden(&self, parity: usize) -> Vec<usize> {
        if self.difficulty == Difficulty::Easy {
            return Vec::new();
        }
        (0..self.classes / 2)
            .filter(|p| p % 2 == parity)
            .flat_map(|p| [2 * p, 2 * p + 1])
            .collect()
    }
}

/// Per-class appearance in the SAR/LiDAR raster.
#[derive(Clone, Debug)]
struct Texture {
    means: Vec<f64>,
    freq: f64,
    angle: f64,
    phases: Vec<f64>,
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

fn palette(k: usize) -> Vec<[u8; 3]> {
    (0..k)
        .map(|i| {
            let h = i as f64 / k as f64 * 6.0;
            let x = 1.0 - (h % 2.0 - 1.0).abs();
            let (r, g, b) = match h as usize {
                0 => (1.0, x, 0.0),
                1 => (x, 1.0, 0.0),
                2 => (0.0, 1.0, x),
                3 => (0.0, x, 1.0),
                4 => (x, 0.0, 1.0),
                _ => (1.0, 0.0, x),
            };
            let q = |v: f64| (40.0 + 215.0 * v).round() as u8;
            [q(r), q(g), q(b)]
        })
        .collect()
}

/// Voronoi blobs over a jittered grid of about `3K` sites with a balanced,
/// shuffled class assignment. Returns the cell index of every pixel and the
/// class of every cell.
fn blob_map(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let (h, w) = (spec.height, spec.width);
    let n = 3 * spec.classes;
    let rows = ((n as f64 * h as f64 / w as f64).sqrt().round() as usize).clamp(1, n);
    let cols = n.div_ceil(rows);
    let mut classes: Vec<usize> = (0..rows * cols).map(|i| i % spec.classes).collect();
    classes.shuffle(rng);
    let (ch, cw) = (h as f64 / rows as f64, w as f64 / cols as f64);
    let mut sites = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            let y = (i as f64 + 0.5 + rng.random_range(-0.3..0.3)) * ch;
            let x = (j as f64 + 0.5 + rng.random_range(-0.3..0.3)) * cw;
            sites.push((y, x));
        }
    }
    let mut map = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
            let dist = |s: &(f64, f64)| (s.0 - y).powi(2) + (s.1 - x).powi(2);
            let nearest = (0..sites.len())
                .min_by(|&a, &b| dist(&sites[a]).total_cmp(&dist(&sites[b])))
                .expect("at least one site");
            map.push(nearest);
        }
    }
    (map, classes)
}

const MAX_PURITY: usize = 6;

/// Largest `r ≤ MAX_PURITY` such that the `(2r+1)²` window around the pixel
/// lies inside the image and within one cell.
fn purity(map: &[usize], h: usize, w: usize, r: usize, c: usize) -> usize {
    let v = map[r * w + c];
    let mut best = 0;
    for rad in 1..=MAX_PURITY {
        if r < rad || c < rad || r + rad >= h || c + rad >= w {
            break;
        }
        let ring_pure = (r - rad..=r + rad)
            .all(|rr| (c - rad..=c + rad).all(|cc| map[rr * w + cc] == v));
        if !ring_pure {
            break;
        }
        best = rad;
    }
    best
}

/// Generates a deterministic bundle with blob-structured classes,
/// class-specific spectra in the hyperspectral raster and class-specific
/// textures in the SAR/LiDAR raster. Each class keeps one blob for testing
/// and trains on the rest; labeled pixels are drawn from the purest blob
/// interiors first.
pub fn synth_generate(spec: &SynthSpec) -> Result<DatasetBundle> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (k, h, w, bands, caux) = (spec.classes, spec.height, spec.width, spec.bands, spec.aux_channels);
    let (cells, cell_class) = blob_map(spec, &mut rng);
    let truth: Vec<usize> = cells.iter().map(|&c| cell_class[c]).collect();

    let mut signatures: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            let bumps: Vec<(f64, f64, f64)> = (0..3)
                .map(|_| {
                    (
                        rng.random_range(0.2..1.0),
                        rng.random_range(0.0..1.0),
                        rng.random_range(0.05..0.2),
                    )
                })
                .collect();
            (0..bands)
                .map(|b| {
                    let t = (b as f64 + 0.5) / bands as f64;
                    0.1 + bumps
                        .iter()
                        .map(|(a, mu, s)| a * (-(t - mu).powi(2) / (2.0 * s * s)).exp())
                        .sum::<f64>()
                })
                .collect()
        })
        .collect();
    let levels: Vec<Vec<usize>> = (0..caux)
        .map(|_| {
            let mut p: Vec<usize> = (0..k).collect();
            p.shuffle(&mut rng);
            p
        })
        .collect();
    let mut textures: Vec<Texture> = (0..k)
        .map(|c| Texture {
            means: (0..caux).map(|j| (levels[j][c] as f64 + 0.5) / k as f64).collect(),
            freq: rng.random_range(0.08..0.35),
            angle: rng.random_range(0.0..std::f64::consts::PI),
            phases: (0..caux).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect(),
        })
        .collect();
    for c in spec.hidden_in_hsi().into_iter().filter(|c| c % 2 == 1) {
        signatures[c] = signatures[c - 1].clone();
    }
    for c in spec.hidden_in_aux().into_iter().filter(|c| c % 2 == 1) {
        textures[c] = textures[c - 1].clone();
    }

    let (noise_h, noise_x, amp) = match spec.difficulty {
        Difficulty::Easy => (0.02, 0.02, 0.08),
        Difficulty::Complementary => (0.04, 0.04, 0.08),
    };
    let nh = Normal::new(0.0, noise_h).expect("positive sigma");
    let nx = Normal::new(0.0, noise_x).expect("positive sigma");
    let plane = h * w;
    let mut hsi = vec![0.0; bands * plane];
    let mut aux = vec![0.0; caux * plane];
    for r in 0..h {
        for c in 0..w {
            let p = r * w + c;
            let class = truth[p];
            let light = 1.0 + rng.random_range(-0.05..0.05);
            for b in 0..bands {
                hsi[b * plane + p] = round_f32(signatures[class][b] * light + nh.sample(&mut rng));
            }
            let t = &textures[class];
            let phase = std::f64::consts::TAU * t.freq * (c as f64 * t.angle.cos() + r as f64 * t.angle.sin());
            for j in 0..caux {
                let v = t.means[j] + amp * (phase + t.phases[j]).sin() + nx.sample(&mut rng);
                aux[j * plane + p] = round_f32(v);
            }
        }
    }

    let mut labels_train = LabelMap::zeros(h, w);
    let mut labels_test = LabelMap::zeros(h, w);
    for class in 0..k {
        // The first cell of each class feeds the test split and the others
        // the train split, so no patch straddles both.
        let test_cell = cell_class.iter().position(|&c| c == class).expect("every class has a cell");
        let pool = |test: bool, rng: &mut ChaCha8Rng| {
            let mut px: Vec<usize> = (0..plane)
                .filter(|&p| truth[p] == class && (cells[p] == test_cell) == test)
                .collect();
            px.shuffle(rng);
            px.sort_by_key(|&p| std::cmp::Reverse(purity(&cells, h, w, p / w, p % w)));
            px
        };
        let train_px = pool(false, &mut rng);
        let test_px = pool(true, &mut rng);
        for &p in train_px.iter().take(spec.train_per_class) {
            labels_train.data[p] = class as u32 + 1;
        }
        for &p in test_px.iter().take(spec.test_per_class) {
            labels_test.data[p] = class as u32 + 1;
        }
    }

    let bundle = DatasetBundle {
        hsi: Tensor::new(&[bands, h, w], hsi)?,
        aux: Tensor::new(&[caux, h, w], aux)?,
        labels_train,
        labels_test,
        meta: Meta {
            bands,
            height: h,
            width: w,
            aux_channels: caux,
            classes: (1..=k).map(|i| format!("class_{i}")).collect(),
            palette: palette(k),
            dtype: "f32".to_string(),
            aux_height: None,
            aux_width: None,
        },
    };
    bundle.validate()?;
    Ok(bundle)
}
