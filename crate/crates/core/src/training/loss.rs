//! Noise-prediction objectives, without and with the structure branch.

use serde::{Deserialize, Serialize};

use crate::conditioning::{make_condition, ConditionSet, MaskSequence, VideoTensor};
use crate::denoiser::guidance::ClipGuidance;
use crate::denoiser::layers::Params;
use crate::denoiser::unet::{control_var, eps_var};
use crate::denoiser::weights::{Model, ParamGroup};
use crate::denoiser::DenoiserConfig;
use crate::diffusion::{q_sample, NoiseSchedule};
use crate::error::{ensure, Result};
use crate::numerics::autodiff::Gradients;
use crate::numerics::{Graph, Tensor, Var};
use crate::structure::extract_structure;

/// A clean clip, the mask used to build its condition and the caption.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub video: VideoTensor,
    pub masks: MaskSequence,
    pub caption: String,
    /// Replace the caption by the null embedding.
    pub null: bool,
}

impl TrainingExample {
    pub fn condition(&self) -> Result<ConditionSet> {
        make_condition(&self.video, &self.masks, &self.caption, self.null)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// ‖ε − ε_θ(v_t, t, c)‖².
    Inpaint,
    /// ‖ε − ε_θ(v_t, t, c, c_s)‖² with the structure maps at unit scale.
    Structure,
}

fn noisy_input(ex: &TrainingExample, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    ensure!(
        eps.shape() == ex.video.tensor().shape(),
        Argument,
        "noise {:?} does not match video {:?}",
        eps.shape(),
        ex.video.tensor().shape()
    );
    q_sample(ex.video.tensor(), t, eps, sched)
}

/// Mean squared error between `eps` and whatever `predict` returns for
/// `v_t = q_sample(v_0, t, eps)`.
pub fn denoising_loss(
    ex: &TrainingExample,
    t: usize,
    eps: &Tensor,
    sched: &NoiseSchedule,
    predict: impl FnOnce(&Tensor, &ConditionSet) -> Result<Tensor>,
) -> Result<f64> {
    let vt = noisy_input(ex, t, eps, sched)?;
    let pred = predict(&vt, &ex.condition()?)?;
    ensure!(pred.shape() == eps.shape(), Argument, "prediction shape {:?} != {:?}", pred.shape(), eps.shape());
    let s: f64 = pred.data().iter().zip(eps.data()).map(|(&p, &e)| ((p - e) as f64).powi(2)).sum();
    Ok(s / eps.len() as f64)
}

pub(crate) fn loss_var(
    p: &Params,
    cfg: &DenoiserConfig,
    ex: &TrainingExample,
    t: usize,
    eps: &Tensor,
    sched: &NoiseSchedule,
    objective: Objective,
) -> Result<Var> {
    let vt = Var::constant(noisy_input(ex, t, eps, sched)?);
    let cond = ex.condition()?;
    let maps = match objective {
        Objective::Inpaint => None,
        Objective::Structure => {
            let s = extract_structure(&ex.video, &ex.masks)?;
            Some(control_var(p, cfg, &vt, t, &cond, &s, &mut ClipGuidance::off())?)
        }
    };
    let pred = eps_var(p, cfg, &vt, t, &cond, maps.as_deref(), &mut ClipGuidance::off())?;
    pred.mse(&Var::constant(eps.clone()))
}

/// Loss value for one example.
pub fn loss_value(model: &Model, ex: &TrainingExample, t: usize, eps: &Tensor, sched: &NoiseSchedule, objective: Objective) -> Result<f64> {
    let p = Params::constants(&model.weights);
    Ok(loss_var(&p, &model.config, ex, t, eps, sched, objective)?.value().item()? as f64)
}

pub fn inpaint_loss(model: &Model, ex: &TrainingExample, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<f64> {
    loss_value(model, ex, t, eps, sched, Objective::Inpaint)
}

pub fn structure_loss(model: &Model, ex: &TrainingExample, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<f64> {
    loss_value(model, ex, t, eps, sched, Objective::Structure)
}

/// Loss and its gradient with respect to every parameter in `trainable`.
pub fn loss_gradients(
    model: &Model,
    ex: &TrainingExample,
    t: usize,
    eps: &Tensor,
    sched: &NoiseSchedule,
    objective: Objective,
    trainable: &[ParamGroup],
) -> Result<(f64, Gradients)> {
    let mut g = Graph::new();
    let p = Params::on_graph(&mut g, &model.weights, trainable);
    let loss = loss_var(&p, &model.config, ex, t, eps, sched, objective)?;
    let grads = g.backward(&loss)?;
    Ok((loss.value().item()? as f64, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::data::{gen_random_mask, gen_synthetic_sample};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn example(frames: usize) -> TrainingExample {
        let s = gen_synthetic_sample(5, frames).unwrap();
        TrainingExample {
            masks: gen_random_mask(32, 32, frames, 6).unwrap(),
            video: s.video,
            caption: s.caption,
            null: false,
        }
    }

    #[test]
    fn stub_losses() {
        let ex = example(2);
        let sched = NoiseSchedule::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let eps = Tensor::randn(&[2, 3, 32, 32], &mut rng);
        let exact = denoising_loss(&ex, 500, &eps, &sched, |_, _| Ok(eps.clone())).unwrap();
        assert_eq!(exact, 0.0);
        let ones = Tensor::ones(&[2, 3, 32, 32]);
        let zero = denoising_loss(&ex, 500, &ones, &sched, |v, _| Ok(Tensor::zeros(v.shape()))).unwrap();
        assert_eq!(zero, 1.0);
        let mut acc = 0.0;
        for _ in 0..100 {
            let e = Tensor::randn(&[2, 3, 32, 32], &mut rng);
            acc += denoising_loss(&ex, 10, &e, &sched, |v, _| Ok(Tensor::zeros(v.shape()))).unwrap();
        }
        assert!((acc / 100.0 - 1.0).abs() < 0.05);
    }

    #[test]
    fn untrained_model_losses() {
        // Fresh weights predict zero, so the loss is the mean of ε².
        let model = Model::init(DenoiserConfig::micro(), 2).unwrap();
        let ex = example(2);
        let sched = NoiseSchedule::standard();
        let ones = Tensor::ones(&[2, 3, 32, 32]);
        assert_eq!(inpaint_loss(&model, &ex, 100, &ones, &sched).unwrap(), 1.0);
        let mut model = model;
        model.weights.jitter(3, 0.05);
        // Re-zero the structure outputs: the injection must then be exact.
        let zero_names: Vec<String> = model.weights.names().filter(|n| n.starts_with("control.zero.")).map(String::from).collect();
        for n in zero_names {
            let s = model.weights.get(&n).unwrap().shape().to_vec();
            model.weights.set(&n, Tensor::zeros(&s)).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let eps = Tensor::randn(&[2, 3, 32, 32], &mut rng);
        let a = inpaint_loss(&model, &ex, 300, &eps, &sched).unwrap();
        let b = structure_loss(&model, &ex, 300, &eps, &sched).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert!(a > 0.0);
        assert!(inpaint_loss(&model, &ex, 300, &Tensor::zeros(&[1, 3, 32, 32]), &sched).is_err());
    }
}
