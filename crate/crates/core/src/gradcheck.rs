//! Finite-difference check of the whole model under the joint loss.

use rand::seq::index::sample;
use rand::Rng;

use crate::autodiff::{grad_check_at, GradCheckReport};
use crate::error::Result;
use crate::model::{ForwardOptions, Model, ParamGroup, TrainMode, ViTConfig};
use crate::rng::{child_rng, hash64};
use crate::tensor::Tensor;
use crate::train::{joint_loss, LossConfig};

#[derive(Clone, Debug)]
pub struct ModelCheck {
    pub cfg: ViTConfig,
    pub batch: usize,
    pub seed: u64,
    /// Coordinates drawn per parameter tensor; `None` checks all of them.
    pub per_tensor: Option<usize>,
    pub h: f64,
    pub loss: LossConfig,
}

#[derive(Clone, Debug)]
pub struct ModelCheckReport {
    pub report: GradCheckReport,
    pub tensors: usize,
    /// Name and flat coordinate of the worst entry.
    pub worst: Option<(String, usize)>,
}

/// A model whose zero-initialised parts (adapter B, corrector output layer,
/// biases) are filled with small random values so every path carries
/// gradient.
pub fn perturbed_model(cfg: ViTConfig, seed: u64) -> Result<Model> {
    let mut m = Model::new(cfg, seed)?;
    let mut rng = child_rng(seed, 0xC0FFEE);
    for i in 0..m.tensors().len() {
        let name = m.names()[i].clone();
        let zero_init = name.ends_with(".lora_b") || name.ends_with(".bias") || name.starts_with("corrector.fc2");
        if zero_init || m.group(i) == ParamGroup::Lora {
            m.param_mut(i)
                .data_mut()
                .iter_mut()
                .for_each(|v| *v += rng.random_range(-0.2..0.2));
        }
    }
    Ok(m)
}

pub fn check_model(c: &ModelCheck) -> Result<ModelCheckReport> {
    let model = perturbed_model(c.cfg.clone(), c.seed)?;
    let s = c.cfg.input_size;
    let shape = vec![c.batch, c.cfg.channels, s, s];
    let n: usize = shape.iter().product();
    let mut rng = child_rng(c.seed, 1);
    let x = Tensor::new(shape.clone(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let x_hat = Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let y: Vec<usize> = (0..c.batch).map(|i| i % 2).collect();

    let trainable = model.trainable_parameters();
    let params: Vec<Tensor> = trainable.iter().map(|&i| model.tensors()[i].clone()).collect();
    let coords: Vec<Vec<usize>> = params
        .iter()
        .enumerate()
        .map(|(k, p)| match c.per_tensor {
            Some(m) if m < p.numel() => {
                let mut r = child_rng(hash64(c.seed, 2), k as u64);
                let mut v = sample(&mut r, p.numel(), m).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..p.numel()).collect(),
        })
        .collect();
    let opts = ForwardOptions {
        lora: c.cfg.mode == TrainMode::Lora,
        corrector: true,
    };
    let report = grad_check_at(
        |g, vars| {
            let bound = model.bind(g, Some(vars))?;
            let out = model.forward_pair(g, &bound, &x, &x_hat, opts)?;
            Ok(joint_loss(g, &out, &y, &c.loss)?.0)
        },
        &params,
        c.h,
        &coords,
    )?;
    let worst = report.worst.map(|(pi, ci)| (model.names()[trainable[pi]].clone(), ci));
    Ok(ModelCheckReport {
        report,
        tensors: params.len(),
        worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn micro_model_passes_exhaustive_check_in_both_modes() {
        for mode in [TrainMode::Lora, TrainMode::Full] {
            let cfg = ViTConfig {
                input_size: 8,
                patch: 4,
                dim: 8,
                heads: 2,
                depth: 1,
                mlp_ratio: 2,
                lora_rank: 2,
                lora_scale: 2.0,
                mode,
                ..ViTConfig::default()
            };
            let r = check_model(&ModelCheck {
                cfg,
                batch: 2,
                seed: 4,
                per_tensor: None,
                h: 1e-5,
                loss: LossConfig::exact_gradient(),
            })
            .unwrap();
            assert!(r.report.max_rel_error <= 1e-4, "{mode:?}: {r:?}");
            assert!(r.report.coordinates > 100);
        }
    }

    #[test]
    fn a_wrong_gradient_would_be_caught() {
        // central differences of a kinked loss disagree with the tape at the kink
        let p = vec![Tensor::new(vec![1], vec![0.0]).unwrap()];
        let r = grad_check_at(
            |g, v| {
                let c = g.clamp_min(v[0], 0.0);
                Ok(g.sum(c))
            },
            &p,
            1e-5,
            &[vec![0]],
        )
        .unwrap();
        assert!(r.max_rel_error > 0.4);
    }
}
