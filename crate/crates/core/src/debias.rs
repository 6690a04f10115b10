//! Deep feature reweighting: refit the last layer of a trained model on
//! group-balanced held-out data while every earlier layer stays frozen.

use serde::{Deserialize, Serialize};

use crate::data::{group_balanced_batches, GroupedDataset};
use crate::engine::Sgd;
use crate::error::{Error, Result};
use crate::losses::cross_entropy;
use crate::model::{Layer, Mlp};
use crate::tensor::{Rng, Tape, Tensor};

const STREAM_HEAD_INIT: u64 = 20;
const STREAM_BATCHES: u64 = 21;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DfrConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Coefficient of `‖W‖²` on the last-layer weights.
    pub l2_penalty: f64,
    /// Must be a multiple of the number of groups.
    pub batch_size: usize,
    pub seed: u64,
    pub reinit_last_layer: bool,
    /// Fit the head on z-scored features, then fold the scaling back in.
    pub standardize: bool,
}

impl Default for DfrConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: 1e-2,
            momentum: 0.9,
            l2_penalty: 1e-3,
            batch_size: 32,
            seed: 0,
            reinit_last_layer: true,
            standardize: true,
        }
    }
}

impl DfrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("dfr epochs and batch_size must be ≥ 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.l2_penalty >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "dfr needs learning_rate > 0, l2_penalty ≥ 0 and momentum in [0, 1); got {}, {}, {}",
                self.learning_rate, self.l2_penalty, self.momentum
            )));
        }
        Ok(())
    }
}

/// Frozen penultimate features of `model` on `x`.
pub fn features(model: &Mlp, x: &Tensor) -> Result<Tensor> {
    model.features(x)
}

fn column_stats(f: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (f.rows() as f64, f.cols());
    let mut mean = vec![0.0; d];
    for r in 0..f.rows() {
        for (m, v) in mean.iter_mut().zip(f.row(r)) {
            *m += v / n;
        }
    }
    let mut std = vec![0.0; d];
    for r in 0..f.rows() {
        for ((s, v), m) in std.iter_mut().zip(f.row(r)).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    // dead units have zero spread; leave them unscaled
    let std = std.into_iter().map(|v| if v > 1e-12 { v.sqrt() } else { 1.0 }).collect();
    (mean, std)
}

/// Returns a copy of `model` whose last layer is retrained on `heldout` with
/// group-balanced minibatches. All earlier layers are copied bit for bit.
pub fn dfr_retrain(model: &Mlp, heldout: &GroupedDataset, cfg: &DfrConfig) -> Result<Mlp> {
    cfg.validate()?;
    if heldout.num_classes() != model.num_classes() {
        return Err(Error::Config("held-out classes differ from the model's".into()));
    }
    let raw = features(model, heldout.x())?;
    let (mean, std) = if cfg.standardize {
        column_stats(&raw)
    } else {
        (vec![0.0; raw.cols()], vec![1.0; raw.cols()])
    };
    let feats = {
        let mut f = raw.clone();
        let d = f.cols();
        for (k, v) in f.data_mut().iter_mut().enumerate() {
            *v = (*v - mean[k % d]) / std[k % d];
        }
        f
    };

    let last = model.layers().last().expect("mlp has layers");
    let (k, c) = (last.weight.rows(), last.weight.cols());
    let mut head = if cfg.reinit_last_layer {
        Mlp::new(&[k, c], &mut Rng::stream(cfg.seed, STREAM_HEAD_INIT))?
    } else {
        // express the current head in standardized coordinates
        let mut w = last.weight.clone();
        for (idx, v) in w.data_mut().iter_mut().enumerate() {
            *v *= std[idx / c];
        }
        let shift = Tensor::matrix(1, k, mean.clone())?.matmul(&last.weight)?;
        let b = last.bias.zip_with(&Tensor::vector(shift.into_data()), "dfr bias", |b, s| b + s)?;
        Mlp::from_layers(vec![Layer { weight: w, bias: b }])?
    };

    let mut opt = Sgd::new(cfg.learning_rate, cfg.momentum, 0.0, head.num_params());
    let per_group = cfg.batch_size / heldout.num_groups().max(1);
    let mut batches = group_balanced_batches(heldout, cfg.batch_size, Rng::stream(cfg.seed, STREAM_BATCHES).next_u64())?;
    let steps = heldout.len().div_ceil(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        for step in 0..steps {
            let batch = batches.next().expect("batches are endless");
            let mut counts = vec![0usize; heldout.num_groups()];
            for &i in &batch {
                counts[heldout.g()[i]] += 1;
            }
            if counts.iter().any(|&n| n != per_group) {
                return Err(Error::State(format!("unbalanced dfr batch {counts:?}")));
            }
            let y: Vec<usize> = batch.iter().map(|&i| heldout.y()[i]).collect();
            let mut tape = Tape::new();
            let bound = head.bind(&mut tape);
            let xv = tape.constant(feats.select_rows(&batch)?);
            let z = bound.forward(&mut tape, xv)?;
            let ce = cross_entropy(&mut tape, z, &y)?;
            let ce = tape.mean(ce);
            let w = bound.params()[0].0;
            let w2 = tape.mul(w, w)?;
            let w2 = tape.sum(w2);
            let pen = tape.scale(w2, cfg.l2_penalty);
            let loss = tape.add(ce, pen)?;
            let value = tape.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::Divergence { epoch, step, loss: value });
            }
            tape.backward(loss)?;
            opt.step(&mut head, &bound.flatten_grads(&tape)?)?;
        }
    }

    // fold standardization back: ((f − μ)/σ)·W + b = f·(W/σ) + (b − (μ/σ)·W)
    let fitted = &head.layers()[0];
    let mut w = fitted.weight.clone();
    for (idx, v) in w.data_mut().iter_mut().enumerate() {
        *v /= std[idx / c];
    }
    let shift = Tensor::matrix(1, k, mean)?.matmul(&w)?;
    let b = fitted.bias.zip_with(&Tensor::vector(shift.into_data()), "dfr bias", |b, s| b - s)?;

    let mut out = model.clone();
    *out.layers_mut().last_mut().expect("mlp has layers") = Layer { weight: w, bias: b };
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;

    fn toy() -> (Mlp, GroupedDataset) {
        let model = Mlp::new(&[2, 6, 2], &mut Rng::new(3)).unwrap();
        let mut rng = Rng::new(9);
        let (mut xs, mut y, mut a) = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..80 {
            let (yi, ai) = (i % 2, (i / 2) % 2);
            xs.push(yi as f64 * 2.0 - 1.0 + 0.3 * rng.normal());
            xs.push(ai as f64 + 0.3 * rng.normal());
            y.push(yi);
            a.push(ai);
        }
        let ds = GroupedDataset::new(Tensor::matrix(80, 2, xs).unwrap(), y, a, vec![Split::HeldoutValid; 80], 2).unwrap();
        (model, ds)
    }

    #[test]
    fn backbone_is_untouched() {
        let (model, ds) = toy();
        let cfg = DfrConfig { epochs: 5, batch_size: 8, ..DfrConfig::default() };
        let out = dfr_retrain(&model, &ds, &cfg).unwrap();
        assert_eq!(out.layers()[0], model.layers()[0]);
        assert_ne!(out.layers()[1], model.layers()[1]);
        assert_eq!(out.dims(), model.dims());
    }

    #[test]
    fn standardization_folds_back_exactly() {
        let (model, ds) = toy();
        let f = features(&model, ds.x()).unwrap();
        let (mean, std) = column_stats(&f);
        assert!(std.iter().all(|s| *s > 0.0));
        assert_eq!(mean.len(), 6);
    }

    #[test]
    fn rejects_batch_not_multiple_of_groups() {
        let (model, ds) = toy();
        let cfg = DfrConfig { epochs: 1, batch_size: 6, ..DfrConfig::default() };
        assert!(matches!(dfr_retrain(&model, &ds, &cfg), Err(Error::Parameter(_))));
    }

    #[test]
    fn no_hidden_layer_is_an_error() {
        let (_, ds) = toy();
        let linear = Mlp::zeros(&[2, 2]).unwrap();
        assert!(dfr_retrain(&linear, &ds, &DfrConfig::default()).is_err());
    }
}
