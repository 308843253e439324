//! The attack suite: iterative L-infinity PGD (white box and transfer),
//! universal adversarial patches trained under random placement, and the
//! natural-patch control.

mod patch;

pub use patch::{
    apply_patch, apply_patch_set, natural_patch, patch_side, save_patch, load_patch, train_patch,
    Patch, PatchFileMeta, PatchTrainConfig, PlacementTransform, Rotation, PATCH_MOMENTUM,
};

use crate::classifier::{ClassifierModel, Labels};
use crate::data::{images_to_batch, LabeledImage};
use crate::error::{Error, Result};
use crate::metrics::ConditionMetrics;
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Perturbation norm; only the max norm is supported.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Norm {
    LInf,
}

/// L-infinity ball of radius `epsilon` (in [0,1] pixel units) around an
/// anchor image, intersected with the valid pixel range.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerturbationBall {
    pub epsilon: f64,
    pub norm: Norm,
}

impl PerturbationBall {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(epsilon >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "epsilon must be >= 0, got {epsilon}"
            )));
        }
        Ok(PerturbationBall {
            epsilon,
            norm: Norm::LInf,
        })
    }

    /// True when `candidate` lies within the ball around `anchor` (with a
    /// tiny tolerance for representation error) and within [0,1].
    pub fn contains<S: Scalar>(&self, candidate: &Tensor<S>, anchor: &Tensor<S>) -> Result<bool> {
        let diff = candidate.max_abs_diff(anchor)?.as_f64();
        let in_range = candidate
            .data()
            .iter()
            .all(|&p| p >= S::zero() && p <= S::one());
        Ok(diff <= self.epsilon + 1e-12 && in_range)
    }
}

/// Iterated signed-gradient attack configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct PgdConfig {
    pub ball: PerturbationBall,
    pub iterations: usize,
    pub step_size: f64,
    /// Descend the loss toward the flipped label instead of ascending the
    /// loss at the true label.
    pub targeted: bool,
    /// Start from a uniform point inside the ball instead of the anchor.
    pub random_start: bool,
    pub seed: u64,
}

impl PgdConfig {
    /// Defaults: 20 iterations, step 2.5 * epsilon / iterations, targeted,
    /// deterministic start.
    pub fn new(epsilon: f64) -> Result<Self> {
        let ball = PerturbationBall::new(epsilon)?;
        Ok(PgdConfig {
            ball,
            iterations: 20,
            step_size: 2.5 * epsilon / 20.0,
            targeted: true,
            random_start: false,
            seed: 0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("iterations must be >= 1".into()));
        }
        if self.ball.epsilon < 0.0 {
            return Err(Error::InvalidConfig("epsilon must be >= 0".into()));
        }
        if self.ball.epsilon > 0.0 && !(self.step_size > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "step_size must be > 0, got {}",
                self.step_size
            )));
        }
        Ok(())
    }
}

/// Clamps `candidate` into the epsilon-ball around `anchor`, then into [0,1].
pub fn project_linf<S: Scalar>(
    candidate: &Tensor<S>,
    anchor: &Tensor<S>,
    ball: &PerturbationBall,
) -> Result<Tensor<S>> {
    if candidate.shape() != anchor.shape() {
        return Err(Error::shape(
            "project_linf",
            format!("{:?} vs {:?}", candidate.shape(), anchor.shape()),
        ));
    }
    let eps = S::from_f64(ball.epsilon);
    let data = candidate
        .data()
        .iter()
        .zip(anchor.data())
        .map(|(&c, &a)| {
            let lo = (a - eps).max(S::zero());
            let hi = (a + eps).min(S::one());
            c.max(lo).min(hi)
        })
        .collect();
    Tensor::from_vec(candidate.shape().to_vec(), data)
}

/// One signed-gradient step: `x + step * sgn(grad)` when ascending the loss,
/// `x - step * sgn(grad)` when descending toward a target. `sgn(0) = 0`.
pub fn fgsm_step<S: Scalar>(
    x: &Tensor<S>,
    grad: &Tensor<S>,
    step: f64,
    toward_target: bool,
) -> Result<Tensor<S>> {
    if x.shape() != grad.shape() {
        return Err(Error::shape(
            "fgsm_step",
            format!("{:?} vs {:?}", x.shape(), grad.shape()),
        ));
    }
    if !(step > 0.0) {
        return Err(Error::InvalidConfig(format!("step must be > 0, got {step}")));
    }
    let s = S::from_f64(if toward_target { -step } else { step });
    let data = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&xv, &g)| {
            let sgn = if g > S::zero() {
                S::one()
            } else if g < S::zero() {
                -S::one()
            } else {
                S::zero()
            };
            xv + s * sgn
        })
        .collect();
    Tensor::from_vec(x.shape().to_vec(), data)
}

/// Runs the iterated attack against `model` on one image.
///
/// When targeted (the default), the loss is descended toward the flipped
/// label `1 - y`; untargeted runs ascend the loss at `y`. Every iterate is
/// projected back into the ball and the valid pixel range, so the output
/// always satisfies the containment invariant. Deterministic given
/// `cfg.seed` (the random-start stream is keyed by the image id).
pub fn pgd_attack<S: Scalar>(
    model: &ClassifierModel<S>,
    image: &LabeledImage<S>,
    cfg: &PgdConfig,
) -> Result<LabeledImage<S>> {
    cfg.validate()?;
    image.validate()?;
    if cfg.ball.epsilon == 0.0 {
        return Ok(image.clone());
    }

    let anchor = image.to_tensor();
    let attack_label = if cfg.targeted { 1 - image.label } else { image.label };
    let labels = Labels::Hard(vec![attack_label]);

    let mut x = anchor.clone();
    if cfg.random_start {
        let mut rng = SplitMix64::keyed(cfg.seed, &format!("pgd-init:{}", image.image_id));
        let eps = cfg.ball.epsilon;
        let mut data = x.into_data();
        for v in &mut data {
            *v = *v + S::from_f64(rng.next_range(-eps, eps));
        }
        x = Tensor::from_vec(anchor.shape().to_vec(), data)?;
        x = project_linf(&x, &anchor, &cfg.ball)?;
    }

    for _ in 0..cfg.iterations {
        let (_, grads) = model.loss_and_gradients(&x, &labels, true)?;
        let g = grads.input.expect("input gradient was requested");
        x = fgsm_step(&x, &g, cfg.step_size, cfg.targeted)?;
        x = project_linf(&x, &anchor, &cfg.ball)?;
    }

    let mut out = image.clone();
    out.pixels = x.into_data();
    Ok(out)
}

/// Attacks every image independently; workers run on disjoint images with
/// per-image streams, so parallel and serial runs are identical.
pub fn pgd_attack_set<S: Scalar>(
    model: &ClassifierModel<S>,
    images: &[LabeledImage<S>],
    cfg: &PgdConfig,
) -> Result<Vec<LabeledImage<S>>> {
    par_map(images, |img| pgd_attack(model, img, cfg))
        .into_iter()
        .collect()
}

/// Crafts PGD adversarials against `surrogate` and evaluates `victim` on
/// them. The victim is never optimized against; white-box runs are the
/// degenerate case `surrogate == victim`.
pub fn transfer_pgd<S: Scalar>(
    victim: &ClassifierModel<S>,
    surrogate: &ClassifierModel<S>,
    images: &[LabeledImage<S>],
    cfg: &PgdConfig,
) -> Result<(Vec<LabeledImage<S>>, ConditionMetrics)> {
    if victim.input_spec != surrogate.input_spec {
        return Err(Error::shape(
            "transfer_pgd",
            format!(
                "victim expects {:?}, surrogate {:?}",
                victim.input_spec, surrogate.input_spec
            ),
        ));
    }
    let adv = pgd_attack_set(surrogate, images, cfg)?;
    let metrics = evaluate(victim, &adv)?;
    Ok((adv, metrics))
}

/// Accuracy alone, defined for single-class sets (unlike [`evaluate`]).
pub fn evaluate_accuracy_only<S: Scalar>(
    model: &ClassifierModel<S>,
    images: &[LabeledImage<S>],
) -> Result<f64> {
    let batch = images_to_batch(images)?;
    let probs = model.predict(&batch)?;
    let labels: Vec<u8> = images.iter().map(|i| i.label).collect();
    crate::metrics::accuracy(&probs, &labels)
}

/// Accuracy, AUROC, and mean confidence of `model` on a labeled image set.
pub fn evaluate<S: Scalar>(
    model: &ClassifierModel<S>,
    images: &[LabeledImage<S>],
) -> Result<ConditionMetrics> {
    let batch = images_to_batch(images)?;
    let probs = model.predict(&batch)?;
    let labels: Vec<u8> = images.iter().map(|i| i.label).collect();
    ConditionMetrics::from_predictions(&probs, &labels)
}

/// Indexed map over items using scoped threads; output order matches input.
pub(crate) fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(items.len())
        .min(8);
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    let mut out: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|scope| {
        for (slot_chunk, item_chunk) in out.chunks_mut(chunk).zip(items.chunks(chunk)) {
            let f = &f;
            scope.spawn(move || {
                for (slot, item) in slot_chunk.iter_mut().zip(item_chunk) {
                    *slot = Some(f(item));
                }
            });
        }
    });
    out.into_iter().map(|r| r.expect("worker filled every slot")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::Architecture;

    #[test]
    fn project_linf_examples() {
        let ball = PerturbationBall::new(0.02).unwrap();
        let anchor = Tensor::from_vec(vec![3], vec![0.50f64, 0.30, 0.99]).unwrap();
        let candidate = Tensor::from_vec(vec![3], vec![0.90f64, 0.30, 1.20]).unwrap();
        let p = project_linf(&candidate, &anchor, &ball).unwrap();
        assert!((p.data()[0] - 0.52).abs() < 1e-15);
        assert_eq!(p.data()[1], 0.30);
        assert_eq!(p.data()[2], 1.00);

        // Idempotence, exactly.
        let pp = project_linf(&p, &anchor, &ball).unwrap();
        assert_eq!(p.data(), pp.data());
    }

    #[test]
    fn fgsm_step_examples() {
        let x = Tensor::from_vec(vec![3], vec![0.5f64, 0.5, 0.5]).unwrap();
        let grad = Tensor::from_vec(vec![3], vec![0.3f64, -0.2, 0.0]).unwrap();

        let up = fgsm_step(&x, &grad, 0.02, false).unwrap();
        assert_eq!(up.data(), &[0.52, 0.48, 0.5]);

        let toward = fgsm_step(&x, &grad, 0.02, true).unwrap();
        assert_eq!(toward.data(), &[0.48, 0.52, 0.5]);

        let zero = Tensor::from_vec(vec![3], vec![0.0f64; 3]).unwrap();
        let still = fgsm_step(&x, &zero, 0.02, false).unwrap();
        assert_eq!(still.data(), x.data());
    }

    fn test_image(seed: u64) -> LabeledImage<f64> {
        let mut rng = SplitMix64::keyed(seed, "attack-test-image");
        LabeledImage {
            pixels: (0..1024).map(|_| (rng.next_f64() * 255.0).round() / 255.0).collect(),
            channels: 1,
            height: 32,
            width: 32,
            label: (seed % 2) as u8,
            patient_id: "p".into(),
            image_id: format!("img{seed}"),
        }
    }

    fn test_model(seed: u64) -> ClassifierModel<f64> {
        ClassifierModel::init(Architecture::small_cnn((1, 32, 32)), seed).unwrap()
    }

    #[test]
    fn zero_epsilon_returns_the_input_exactly() {
        let model = test_model(1);
        let img = test_image(2);
        let cfg = PgdConfig::new(0.0).unwrap();
        let adv = pgd_attack(&model, &img, &cfg).unwrap();
        assert_eq!(adv.pixels, img.pixels);
    }

    #[test]
    fn pgd_output_stays_in_ball_and_range() {
        let model = test_model(3);
        let img = test_image(4);
        for &random_start in &[false, true] {
            let mut cfg = PgdConfig::new(0.02).unwrap();
            cfg.random_start = random_start;
            let adv = pgd_attack(&model, &img, &cfg).unwrap();
            let anchor = img.to_tensor();
            let out = adv.to_tensor();
            assert!(cfg.ball.contains(&out, &anchor).unwrap());
        }
    }

    #[test]
    fn pgd_is_deterministic() {
        let model = test_model(5);
        let img = test_image(6);
        let cfg = PgdConfig::new(0.02).unwrap();
        let a = pgd_attack(&model, &img, &cfg).unwrap();
        let b = pgd_attack(&model, &img, &cfg).unwrap();
        assert_eq!(a.pixels, b.pixels);
    }

    #[test]
    fn parallel_set_matches_serial_attacks() {
        let model = test_model(7);
        let images: Vec<_> = (0..10).map(test_image).collect();
        let cfg = PgdConfig::new(0.02).unwrap();
        let set = pgd_attack_set(&model, &images, &cfg).unwrap();
        for (img, adv) in images.iter().zip(&set) {
            let single = pgd_attack(&model, img, &cfg).unwrap();
            assert_eq!(single.pixels, adv.pixels);
        }
    }

    #[test]
    fn degenerate_transfer_equals_white_box_bit_exactly() {
        let model = test_model(8);
        let images: Vec<_> = (10..16).map(test_image).collect();
        let cfg = PgdConfig::new(0.02).unwrap();
        let (white_adv, white_metrics) = transfer_pgd(&model, &model, &images, &cfg).unwrap();
        let direct = pgd_attack_set(&model, &images, &cfg).unwrap();
        for (a, b) in white_adv.iter().zip(&direct) {
            assert_eq!(a.pixels, b.pixels);
        }
        let again = evaluate(&model, &direct).unwrap();
        assert_eq!(white_metrics, again);
    }

    /// On a purely linear model the max-norm-optimal attack shifts the logit
    /// margin by exactly epsilon times the L1 norm of the weights.
    #[test]
    fn pgd_reaches_the_linear_model_optimum()  {
        let arch = Architecture {
            input: (1, 4, 4),
            layers: vec![
                crate::classifier::LayerSpec::Flatten,
                crate::classifier::LayerSpec::Dense { out: 2 },
            ],
        };
        let mut model: ClassifierModel<f64> = ClassifierModel::init(arch, 0).unwrap();
        let mut rng = SplitMix64::keyed(31, "linear-oracle");
        // weight [16, 2], bias [2]
        let mut w1_norm = 0.0;
        {
            let weight = model.params[0].data_mut();
            for row in 0..16 {
                let w0 = rng.next_range(-1.0, 1.0);
                let w1 = rng.next_range(-1.0, 1.0);
                weight[row * 2] = w0;
                weight[row * 2 + 1] = w1;
                w1_norm += (w1 - w0).abs();
            }
        }
        let margin = |img: &LabeledImage<f64>| {
            let logits = model.forward_logits(&img.to_tensor()).unwrap();
            logits.data()[1] - logits.data()[0]
        };

        let img = LabeledImage {
            pixels: vec![0.5; 16],
            channels: 1,
            height: 4,
            width: 4,
            label: 0,
            patient_id: "p".into(),
            image_id: "linear".into(),
        };
        let cfg = PgdConfig::new(0.02).unwrap();
        let adv = pgd_attack(&model, &img, &cfg).unwrap();
        let shift = (margin(&adv) - margin(&img)).abs();
        assert!(
            (shift - 0.02 * w1_norm).abs() < 1e-9,
            "shift {shift} vs {}",
            0.02 * w1_norm
        );
    }

    /// Larger budgets reach at-least-as-good targeted loss.
    #[test]
    fn reachable_loss_is_monotone_in_epsilon() {
        let model = test_model(12);
        let img = test_image(13);
        let target = Labels::Hard(vec![1 - img.label]);
        let mut last = f64::INFINITY;
        for &eps in &[0.0, 0.01, 0.02, 0.05] {
            let cfg = PgdConfig::new(eps).unwrap();
            let adv = pgd_attack(&model, &img, &cfg).unwrap();
            let (loss, _) = model
                .loss_and_gradients(&adv.to_tensor(), &target, false)
                .unwrap();
            assert!(
                loss <= last + 1e-9,
                "loss {loss} at eps {eps} above previous {last}"
            );
            last = loss;
        }
    }
}
