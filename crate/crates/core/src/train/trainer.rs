use std::io::Write;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Checkpoint, ConfusionMatrix, Evaluation, RngState, TrainConfig};
use crate::data::{extract_patches, patches_at, DatasetBundle, LabelMap, PatchBatch, Preprocessor, Split};
use crate::error::{config_err, Error, Result};
use crate::model::{ModelConfig, PicnetModel};
use crate::tensor::{adam_step, AdamState, Tape, Tensor};

/// Per-epoch means over all training samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_ce: f64,
    pub l_cyc_x: f64,
    pub l_cyc_h: f64,
    pub total: f64,
    /// Accuracy of the predictions made during the epoch, before each update.
    pub train_oa: f64,
}

/// Writes records as newline-delimited JSON.
pub fn write_history(path: impl AsRef<Path>, records: &[EpochRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Usage(e.to_string()))?;
        out.push(b'\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

pub fn read_history(path: impl AsRef<Path>) -> Result<Vec<EpochRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Data(format!("{}: {e}", path.display()))))
        .collect()
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits.data().chunks_exact(k).map(argmax).collect()
}

/// Checks that a preprocessed scene fits the model's input layout.
pub fn check_scene(config: &ModelConfig, scene: &DatasetBundle) -> Result<()> {
    if scene.hsi.shape()[0] != config.n_pca {
        return Err(config_err!(
            "scene has {} hyperspectral channels, model expects n_pca = {}",
            scene.hsi.shape()[0],
            config.n_pca
        ));
    }
    if scene.aux.shape()[0] != config.aux_channels {
        return Err(config_err!(
            "scene has {} SAR/LiDAR channels, model expects {}",
            scene.aux.shape()[0],
            config.aux_channels
        ));
    }
    if scene.n_classes() != config.n_classes {
        return Err(config_err!(
            "scene has {} classes, model expects {}",
            scene.n_classes(),
            config.n_classes
        ));
    }
    Ok(())
}

/// Mini-batch Adam training. A single logical thread; given the same seed
/// and scene every run produces bit-identical parameters and history.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: PicnetModel,
    pub adam: AdamState,
    config: TrainConfig,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl Trainer {
    /// Fresh model; the train config's consistency weights, when set,
    /// replace the model's.
    pub fn new(mut model_config: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        model_config.lambda1 = config.lambda1.unwrap_or(model_config.lambda1);
        model_config.lambda2 = config.lambda2.unwrap_or(model_config.lambda2);
        let model = PicnetModel::new(model_config, config.seed)?;
        Ok(Trainer {
            model,
            adam: AdamState::new(config.lr),
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_5bu64),
            config,
            epoch: 0,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        ck.train_config.validate()?;
        Ok(Trainer {
            model: ck.model,
            adam: ck.adam,
            rng: ck.rng.restore()?,
            config: ck.train_config,
            epoch: ck.epoch,
        })
    }

    pub fn checkpoint(&self, preprocessor: Option<Preprocessor>) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            adam: self.adam.clone(),
            train_config: self.config.clone(),
            rng: RngState::capture(&self.rng),
            epoch: self.epoch,
            preprocessor,
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// One update; returns the loss terms `[ce, cyc_x, cyc_h, total]` and
    /// the number of correct predictions made before the update.
    fn step(&mut self, batch: &PatchBatch) -> Result<([f64; 4], usize)> {
        let tape = Tape::new();
        let bound = self.model.bind(&tape);
        let pass = self.model.forward(&tape, &bound, &batch.x_h, &batch.x_aux)?;
        let terms = self.model.loss(&pass, &batch.labels)?;
        let cfg = self.model.config();
        // A disabled term is recorded as zero rather than as its unused value.
        let weighted = |on: f64, v: f64| if on == 0.0 { 0.0 } else { v };
        let values = [
            terms.ce.item()?,
            weighted(cfg.lambda1, terms.cyc_x.item()?),
            weighted(cfg.lambda2, terms.cyc_h.item()?),
            terms.total.item()?,
        ];
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite loss terms {values:?}")));
        }
        let correct = argmax_rows(&pass.logits.value())
            .iter()
            .zip(&batch.labels)
            .filter(|(p, t)| p == t)
            .count();
        let grads = terms.total.backward()?;
        self.model.store_grads(&bound, &grads)?;
        adam_step(self.model.params_mut(), &mut self.adam)?;
        Ok((values, correct))
    }

    /// One pass over every train-labeled pixel of a preprocessed scene, in
    /// an order drawn from the trainer's generator. The last partial batch is
    /// kept.
    pub fn run_epoch(&mut self, scene: &DatasetBundle) -> Result<EpochRecord> {
        check_scene(self.model.config(), scene)?;
        let epoch = self.epoch + 1;
        let shuffle = self.rng.next_u64();
        let stream = extract_patches(scene, Split::Train, self.model.config().patch, self.config.batch, Some(shuffle))?;
        let mut sums = [0.0; 4];
        let (mut seen, mut correct) = (0usize, 0usize);
        for (step, batch) in stream.enumerate() {
            let (values, right) = self.step(&batch).map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!("epoch {epoch}, step {}: {msg}", step + 1)),
                other => other,
            })?;
            let n = batch.len() as f64;
            for (s, v) in sums.iter_mut().zip(values) {
                *s += v * n;
            }
            seen += batch.len();
            correct += right;
        }
        self.epoch = epoch;
        let n = seen as f64;
        Ok(EpochRecord {
            epoch,
            l_ce: sums[0] / n,
            l_cyc_x: sums[1] / n,
            l_cyc_h: sums[2] / n,
            total: sums[3] / n,
            train_oa: correct as f64 / n,
        })
    }

    /// Trains until `config.epochs` epochs are complete, calling `on_epoch`
    /// after each one.
    pub fn fit<F>(&mut self, scene: &DatasetBundle, mut on_epoch: F) -> Result<Vec<EpochRecord>>
    where
        F: FnMut(&Trainer, &EpochRecord) -> Result<()>,
    {
        let mut history = Vec::new();
        while self.epoch < self.config.epochs {
            let record = self.run_epoch(scene)?;
            on_epoch(self, &record)?;
            history.push(record);
        }
        Ok(history)
    }

    /// Changes the epoch budget, e.g. to continue a resumed run.
    pub fn set_epochs(&mut self, epochs: usize) -> Result<()> {
        if epochs == 0 {
            return Err(config_err!("epochs must be at least 1"));
        }
        self.config.epochs = epochs;
        Ok(())
    }
}

/// Trains a fresh model on a preprocessed scene.
pub fn train(
    scene: &DatasetBundle,
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<(PicnetModel, Vec<EpochRecord>)> {
    let mut trainer = Trainer::new(model_config.clone(), config.clone())?;
    let history = trainer.fit(scene, |_, _| Ok(()))?;
    Ok((trainer.model, history))
}

/// Predicted classes (0-based) for the given centers.
pub fn predict_classes(
    model: &PicnetModel,
    scene: &DatasetBundle,
    centers: &[(usize, usize)],
    batch: usize,
) -> Result<Vec<usize>> {
    check_scene(model.config(), scene)?;
    let mut out = Vec::with_capacity(centers.len());
    for chunk in centers.chunks(batch.max(1)) {
        let b = patches_at(scene, chunk, model.config().patch)?;
        out.extend(argmax_rows(&model.predict_logits(&b.x_h, &b.x_aux)?));
    }
    Ok(out)
}

/// Confusion matrix and derived metrics over the labeled pixels of a split.
pub fn evaluate(model: &PicnetModel, scene: &DatasetBundle, split: Split, batch: usize) -> Result<Evaluation> {
    let labels = scene.labels(split);
    let centers = labels.labeled_pixels();
    if centers.is_empty() {
        return Err(Error::Data(format!("no labeled pixels in the {split:?} split")));
    }
    let predicted = predict_classes(model, scene, &centers, batch)?;
    let mut cm = ConfusionMatrix::new(model.config().n_classes);
    for (&(r, c), p) in centers.iter().zip(predicted) {
        cm.add(labels.get(r, c) as usize - 1, p);
    }
    Ok(cm.into())
}

/// Which pixels `predict_map` classifies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapCoverage {
    /// Pixels labeled in either split; the rest stay 0.
    Labeled,
    All,
}

/// Raster of predicted classes (1-based, 0 where not classified).
pub fn predict_map(model: &PicnetModel, scene: &DatasetBundle, coverage: MapCoverage, batch: usize) -> Result<LabelMap> {
    let (h, w) = (scene.height(), scene.width());
    let centers: Vec<(usize, usize)> = (0..h)
        .flat_map(|r| (0..w).map(move |c| (r, c)))
        .filter(|&(r, c)| {
            coverage == MapCoverage::All || scene.labels_train.get(r, c) != 0 || scene.labels_test.get(r, c) != 0
        })
        .collect();
    let predicted = predict_classes(model, scene, &centers, batch)?;
    let mut map = LabelMap::zeros(h, w);
    for (&(r, c), p) in centers.iter().zip(predicted) {
        map.set(r, c, p as u32 + 1);
    }
    Ok(map)
}
