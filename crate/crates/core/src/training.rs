//! Adam, the training loop, and accuracy evaluation.

use std::time::Instant;

use crate::data::{BatchIterator, LabeledSequence};
use crate::encoder::{model_forward, EncoderConfig, EncoderParams, GraphModel};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())))
            .unzip();
        AdamState {
            config,
            step: 0,
            m,
            v,
        }
    }
}

/// One bias-corrected Adam update. `names` labels parameters in error messages.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    names: &[String],
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "adam got {} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::dim("adam_step", p.shape(), g.shape()));
        }
        if !g.all_finite() {
            let name = names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
            return Err(Error::Numeric(format!("non-finite gradient for parameter {name}")));
        }
    }
    state.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mv = beta1 * *mv + (1.0 - beta1) * gv;
            *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *pv -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Scale all gradients so their joint L2 norm is at most `max_norm`. Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub clip_norm: f64,
    /// Stop after the first epoch whose test accuracy reaches this value.
    pub target_test_acc: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 16,
            seed: 0,
            adam: AdamConfig::default(),
            clip_norm: 1.0,
            target_test_acc: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn parameter_names(params: &EncoderParams<Tensor>) -> Vec<String> {
    let mut names = vec!["embedding".to_string()];
    for (i, layer) in params.layers.iter().enumerate() {
        let n_attn = layer.attention.tensors().len();
        names.extend(["ln1_gamma", "ln1_beta"].map(|s| format!("layer{}.{s}", i + 1)));
        names.extend((0..n_attn).map(|k| format!("layer{}.attention.{k}", i + 1)));
        names.extend(
            ["ln2_gamma", "ln2_beta", "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2"]
                .map(|s| format!("layer{}.{s}", i + 1)),
        );
    }
    names.extend(["final_gamma", "final_beta", "classifier_w", "classifier_b"].map(String::from));
    names
}

/// Mean cross-entropy and its parameter gradients over one batch.
pub fn batch_loss_and_grads(
    config: &EncoderConfig,
    params: &EncoderParams<Tensor>,
    batch: &[&LabeledSequence],
) -> Result<(f64, Vec<Tensor>, Vec<usize>)> {
    let mut g = Graph::new();
    let model = GraphModel::register(&mut g, config, params)?;
    let mut rows = Vec::with_capacity(batch.len());
    for sample in batch {
        rows.push(model.forward(&mut g, &sample.tokens)?.logits);
    }
    let logits = g.concat_rows(&rows)?;
    let targets: Vec<usize> = batch.iter().map(|s| s.label).collect();
    let loss = g.cross_entropy(logits, &targets)?;
    g.backward(loss)?;
    let lv = g.value(logits);
    let preds = (0..batch.len()).map(|i| argmax(lv.row(i))).collect();
    Ok((g.value(loss).data()[0], model.grads(&g), preds))
}

/// Minimize cross-entropy with Adam and global-norm clipping.
pub fn train_loop(
    config: &EncoderConfig,
    params: &mut EncoderParams<Tensor>,
    train: &TrainConfig,
    train_data: &[LabeledSequence],
    test_data: Option<&[LabeledSequence]>,
) -> Result<TrainLog> {
    let mut log = TrainLog::default();
    if train.epochs == 0 {
        return Ok(log);
    }
    let batches = BatchIterator::new(train_data, train.batch_size, train.seed)?;
    let names = parameter_names(params);
    let mut state = AdamState::new(train.adam, params.tensors());
    for epoch in 0..train.epochs {
        let start = Instant::now();
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in batches.epoch(epoch) {
            let (loss, mut grads, preds) = batch_loss_and_grads(config, params, &batch)?;
            loss_sum += loss * batch.len() as f64;
            correct += preds
                .iter()
                .zip(&batch)
                .filter(|(p, s)| **p == s.label)
                .count();
            clip_global_norm(&mut grads, train.clip_norm);
            adam_step(&mut params.tensors_mut(), &grads, &mut state, &names)?;
        }
        let test_acc = test_data.map(|d| evaluate(params, config, d)).transpose()?;
        log.epochs.push(EpochRecord {
            epoch: epoch + 1,
            loss: loss_sum / train_data.len() as f64,
            train_acc: correct as f64 / train_data.len() as f64,
            test_acc,
            seconds: start.elapsed().as_secs_f64(),
        });
        if let (Some(target), Some(acc)) = (train.target_test_acc, test_acc) {
            if acc >= target {
                break;
            }
        }
    }
    Ok(log)
}

/// Fraction of samples whose argmax logit equals the label.
pub fn evaluate(
    params: &EncoderParams<Tensor>,
    config: &EncoderConfig,
    data: &[LabeledSequence],
) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for sample in data {
        let logits = model_forward(&sample.tokens, params, config)?;
        if argmax(logits.data()) == sample.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let g = Tensor::vector(vec![0.3, -4.0, 1e-3]);
        let cfg = AdamConfig::default();
        let mut state = AdamState::new(cfg, [&p]);
        let before = p.clone();
        adam_step(&mut [&mut p], &[g.clone()], &mut state, &[]).unwrap();
        for i in 0..3 {
            let delta = p.data()[i] - before.data()[i];
            let expect = -cfg.lr * g.data()[i].signum();
            // |g| / (|g| + eps) deviates from 1 by at most eps / |g|; the subtraction
            // p - before adds rounding on the scale of |p|.
            let rounding = 4.0 * f64::EPSILON * before.data()[i].abs();
            assert!((delta - expect).abs() <= cfg.lr * cfg.eps / g.data()[i].abs() + rounding);
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::vector(vec![1.0, 2.0]);
        let mut state = AdamState::new(AdamConfig::default(), [&p]);
        for _ in 0..5 {
            adam_step(&mut [&mut p], &[Tensor::zeros(&[2])], &mut state, &[]).unwrap();
        }
        assert_eq!(p.data(), &[1.0, 2.0]);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = Tensor::vector(vec![1.0]);
        let mut state = AdamState::new(AdamConfig::default(), [&p]);
        let err = adam_step(
            &mut [&mut p],
            &[Tensor::vector(vec![f64::NAN])],
            &mut state,
            &["layer1.ffn_w1".to_string()],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Numeric(ref m) if m.contains("layer1.ffn_w1")));
    }

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::vector(vec![3.0]), Tensor::vector(vec![4.0])];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
        assert!((g[1].data()[0] - 0.8).abs() < 1e-15);
        let mut small = vec![Tensor::vector(vec![0.1])];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].data(), &[0.1]);
    }
}
