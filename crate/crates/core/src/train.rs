//! Mini-batch training with Adam, evaluation metrics and the ablation runner.

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::model::{argmax, MamcaConfig, MamcaModel};
use crate::ndiff::{AdamConfig, AdamState, Graph, Tensor};
use crate::scalar::Scalar;

/// Batch size used when scoring a test set.
pub const EVAL_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
    /// Written after the last epoch when set.
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
            checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} is not positive", self.lr)));
        }
        Ok(())
    }
}

/// Per-epoch mean loss and wall time.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainHistory {
    pub epoch_loss: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,mean_loss,seconds\n");
        for (i, (l, t)) in self.epoch_loss.iter().zip(&self.epoch_seconds).enumerate() {
            s.push_str(&format!("{},{l},{t}\n", i + 1));
        }
        s
    }
}

fn check_compatible<T: Scalar>(model: &MamcaModel<T>, data: &Dataset) -> Result<()> {
    let cfg = model.config();
    if data.num_classes() != cfg.num_classes {
        return Err(Error::Incompatible(format!(
            "dataset has {} classes, model has {}",
            data.num_classes(),
            cfg.num_classes
        )));
    }
    if !data.is_empty() && data.length < cfg.min_length() {
        return Err(Error::Incompatible(format!(
            "dataset length {} below the model minimum {}",
            data.length,
            cfg.min_length()
        )));
    }
    Ok(())
}

/// Trains `model` in place on `data` and returns the loss history.
///
/// Deterministic for a fixed model seed, training seed and dataset. A
/// non-finite loss stops training with [`Error::Diverged`].
pub fn train<T: Scalar>(
    model: &mut MamcaModel<T>,
    data: &Dataset,
    config: &TrainConfig,
) -> Result<TrainHistory> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    check_compatible(model, data)?;
    data.validate()?;
    let mut adam = AdamState::new(
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
        model.store(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = TrainHistory::default();
    for epoch in 0..config.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let (x, labels) = data.batch::<T>(chunk)?;
            let lv = train_step(model, &mut adam, x, &labels).map_err(|e| match e {
                Error::Diverged(msg) => {
                    Error::Diverged(format!("{msg} at epoch {}, batch {}", epoch + 1, b + 1))
                }
                other => other,
            })?;
            total += lv * chunk.len() as f64;
        }
        history.epoch_loss.push(total / data.len() as f64);
        history.epoch_seconds.push(start.elapsed().as_secs_f64());
    }
    if let Some(path) = &config.checkpoint {
        model.save(path)?;
    }
    Ok(history)
}

/// One optimizer step on a batch `x: [B, C, L]`; returns the mean loss.
/// A non-finite loss aborts before any parameter changes.
pub fn train_step<T: Scalar>(
    model: &mut MamcaModel<T>,
    adam: &mut AdamState<T>,
    x: Tensor<T>,
    labels: &[usize],
) -> Result<f64> {
    let mut g = Graph::new();
    let xv = g.input(x);
    let logits = model.forward(&mut g, xv)?;
    let loss = g.softmax_cross_entropy(logits, labels)?;
    let lv = g.value(loss).item().as_f64();
    if !lv.is_finite() {
        return Err(Error::Diverged(format!("loss is {lv}")));
    }
    g.backward(loss)?;
    let store = model.store_mut();
    store.zero_grad();
    g.accumulate_into(store);
    adam.step(store)?;
    Ok(lv)
}

/// Anything that maps a batch of dataset rows to class labels.
pub trait Classifier: Sync {
    fn num_classes(&self) -> usize;
    fn predict(&self, data: &Dataset, indices: &[usize]) -> Result<Vec<usize>>;
}

impl<T: Scalar> Classifier for MamcaModel<T> {
    fn num_classes(&self) -> usize {
        self.config().num_classes
    }

    fn predict(&self, data: &Dataset, indices: &[usize]) -> Result<Vec<usize>> {
        let (x, _) = data.batch::<T>(indices)?;
        let logits = self.logits(&x)?;
        Ok(logits
            .data()
            .chunks_exact(self.config().num_classes)
            .map(argmax)
            .collect())
    }
}

/// Accuracy at one SNR.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SnrAccuracy {
    pub snr_db: f32,
    pub accuracy: f64,
    pub count: usize,
}

/// Test-set metrics.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub num_samples: usize,
    /// Unweighted mean of the per-SNR accuracies.
    pub overall_accuracy: f64,
    pub per_snr_accuracy: Vec<SnrAccuracy>,
    pub class_names: Vec<String>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub wall_time_s: f64,
}

impl EvalReport {
    /// `snr_db,accuracy` rows in ascending SNR.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("snr_db,accuracy\n");
        for r in &self.per_snr_accuracy {
            s.push_str(&format!("{},{}\n", r.snr_db, r.accuracy));
        }
        s
    }

    /// Pretty JSON with a fixed key order.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is serializable")
    }

    pub fn accuracy_at(&self, snr_db: f32) -> Option<f64> {
        self.per_snr_accuracy
            .iter()
            .find(|r| r.snr_db == snr_db)
            .map(|r| r.accuracy)
    }
}

/// Scores `clf` on every sample of `data`. Batches are spread over the
/// current rayon pool; parameters are only read.
pub fn evaluate<C: Classifier>(clf: &C, data: &Dataset) -> Result<EvalReport> {
    if clf.num_classes() != data.num_classes() {
        return Err(Error::Incompatible(format!(
            "classifier has {} classes, dataset has {}",
            clf.num_classes(),
            data.num_classes()
        )));
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let start = Instant::now();
    let indices: Vec<usize> = (0..data.len()).collect();
    let preds: Vec<Vec<usize>> = indices
        .par_chunks(EVAL_BATCH)
        .map(|chunk| clf.predict(data, chunk))
        .collect::<Result<_>>()?;
    let k = data.num_classes();
    let mut confusion = vec![vec![0; k]; k];
    let grid = data.snr_grid();
    let mut hits = vec![(0usize, 0usize); grid.len()];
    for (s, &p) in data.samples.iter().zip(preds.iter().flatten()) {
        if p >= k {
            return Err(Error::LabelOutOfRange { label: p, classes: k });
        }
        confusion[s.label][p] += 1;
        let cell = grid
            .binary_search_by(|v| v.total_cmp(&s.snr_db))
            .expect("grid built from the same samples");
        hits[cell].1 += 1;
        if p == s.label {
            hits[cell].0 += 1;
        }
    }
    let per_snr_accuracy: Vec<SnrAccuracy> = grid
        .iter()
        .zip(&hits)
        .map(|(&snr_db, &(ok, n))| SnrAccuracy {
            snr_db,
            accuracy: ok as f64 / n as f64,
            count: n,
        })
        .collect();
    let overall_accuracy = per_snr_accuracy.iter().map(|r| r.accuracy).sum::<f64>()
        / per_snr_accuracy.len() as f64;
    Ok(EvalReport {
        num_samples: data.len(),
        overall_accuracy,
        per_snr_accuracy,
        class_names: data.class_names.clone(),
        confusion,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Model variants compared by [`ablate`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    NoDenoise,
    NoSsm,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoDenoise, Variant::NoSsm];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoDenoise => "no-denoise",
            Variant::NoSsm => "no-ssm",
        }
    }

    pub fn apply(self, base: &MamcaConfig) -> MamcaConfig {
        let mut c = base.clone();
        match self {
            Variant::Full => {}
            Variant::NoDenoise => c.use_denoise = false,
            Variant::NoSsm => c.use_ssm = false,
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRun {
    pub variant: Variant,
    pub seed: u64,
    pub params: usize,
    pub accuracy: f64,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationTable {
    pub runs: Vec<AblationRun>,
}

impl AblationTable {
    pub fn mean_accuracy(&self, variant: Variant) -> f64 {
        let accs: Vec<f64> = self
            .runs
            .iter()
            .filter(|r| r.variant == variant)
            .map(|r| r.accuracy)
            .collect();
        accs.iter().sum::<f64>() / accs.len().max(1) as f64
    }

    /// `variant,params,mean_accuracy,delta_vs_full` rows.
    pub fn to_csv(&self) -> String {
        let full = self.mean_accuracy(Variant::Full);
        let mut s = String::from("variant,params,mean_accuracy,delta_vs_full\n");
        for v in Variant::ALL {
            let params = self
                .runs
                .iter()
                .find(|r| r.variant == v)
                .map_or(0, |r| r.params);
            let m = self.mean_accuracy(v);
            s.push_str(&format!("{},{params},{m},{}\n", v.name(), m - full));
        }
        s
    }
}

/// Trains and scores every variant for every seed. The seed replaces both
/// the model seed and the training seed, so variants are matched.
pub fn ablate<T: Scalar>(
    base: &MamcaConfig,
    train_config: &TrainConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    seeds: &[u64],
) -> Result<AblationTable> {
    let mut runs = Vec::new();
    for &seed in seeds {
        for variant in Variant::ALL {
            let cfg = MamcaConfig {
                seed,
                ..variant.apply(base)
            };
            let mut model = MamcaModel::<T>::build(cfg)?;
            let tc = TrainConfig {
                seed,
                checkpoint: None,
                ..train_config.clone()
            };
            train(&mut model, train_set, &tc)?;
            let report = evaluate(&model, test_set)?;
            runs.push(AblationRun {
                variant,
                seed,
                params: model.param_count(),
                accuracy: report.overall_accuracy,
                report,
            });
        }
    }
    Ok(AblationTable { runs })
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::SignalSample;

    struct Oracle;

    impl Classifier for Oracle {
        fn num_classes(&self) -> usize {
            3
        }
        fn predict(&self, data: &Dataset, indices: &[usize]) -> Result<Vec<usize>> {
            Ok(indices.iter().map(|&i| data.samples[i].label).collect())
        }
    }

    fn toy(n_per: usize, l: usize) -> Dataset {
        let mut d = Dataset::new(vec!["a".into(), "b".into(), "c".into()], l);
        for label in 0..3 {
            for k in 0..n_per {
                d.samples.push(SignalSample {
                    iq: vec![label as f32 - 1.0; 2 * l],
                    label,
                    snr_db: (k % 2) as f32 * 10.0,
                });
            }
        }
        d
    }

    #[test]
    fn oracle_scores_one() {
        let r = evaluate(&Oracle, &toy(4, 8)).unwrap();
        assert_eq!(r.overall_accuracy, 1.0);
        assert_eq!(r.confusion, vec![vec![4, 0, 0], vec![0, 4, 0], vec![0, 0, 4]]);
        assert_eq!(r.per_snr_accuracy.len(), 2);
        assert!(r.to_csv().starts_with("snr_db,accuracy\n0,1\n10,1\n"));
        assert!(r.to_json().find("num_samples").unwrap() < r.to_json().find("confusion").unwrap());
    }

    #[test]
    fn spearman_values() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        let s = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 1.0, 2.0, 3.0]);
        assert!(s > 0.9 && s < 1.0);
    }

    #[test]
    fn learning_rate_must_be_positive() {
        let cfg = MamcaConfig {
            d_model: 4,
            n_state: 2,
            num_classes: 3,
            num_blocks: 1,
            ..Default::default()
        };
        let mut m = MamcaModel::<f64>::build(cfg).unwrap();
        for lr in [0.0, -1e-3, f64::NAN] {
            let tc = TrainConfig {
                epochs: 1,
                batch_size: 4,
                lr,
                ..Default::default()
            };
            assert!(matches!(train(&mut m, &toy(4, 8), &tc), Err(Error::Config(_))));
        }
    }

    #[test]
    fn class_mismatch_and_empty_rejected() {
        let cfg = MamcaConfig {
            d_model: 4,
            n_state: 2,
            num_classes: 2,
            num_blocks: 1,
            ..Default::default()
        };
        let mut m = MamcaModel::<f64>::build(cfg).unwrap();
        assert!(matches!(
            train(&mut m, &toy(2, 8), &TrainConfig::default()),
            Err(Error::Incompatible(_))
        ));
        assert!(evaluate(&m, &toy(2, 8)).is_err());
        let empty = Dataset::new(vec!["a".into(), "b".into()], 8);
        assert!(matches!(
            train(&mut m, &empty, &TrainConfig::default()),
            Err(Error::EmptyDataset)
        ));
    }
}
