//! The adversarial plus weighted-L1 objective and the alternating trainer.
//!
//! All GAN terms are binary cross-entropy on raw discriminator logits,
//! averaged over every patch and every sample in the batch.

mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Var};

pub use train::{
    train_loop, write_history_csv, CheckpointSink, DirCheckpoints, GanTrainer, LossRecord, NoCheckpoints, TrainConfig, TrainOutcome,
    HISTORY_HEADER,
};

/// Generator adversarial term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanLoss {
    /// Minimize `BCE(D(x, ŷ), 1)`: strong gradients early in training.
    #[default]
    NonSaturating,
    /// Minimize `−BCE(D(x, ŷ), 0) = log(1 − D(x, ŷ))`, the literal minimax form.
    Minimax,
}

/// `mean |y − ŷ|` over every element.
pub fn l1_loss<T: Element>(tape: &mut Tape<T>, y: Var, y_hat: Var) -> Result<Var> {
    let diff = tape.sub(y, y_hat)?;
    let abs = tape.abs(diff)?;
    tape.mean(abs)
}

/// `½ · [BCE(real, 1) + BCE(fake, 0)]`. Equals ln 2 when every logit is 0.
pub fn d_loss<T: Element>(tape: &mut Tape<T>, real_logits: Var, fake_logits: Var) -> Result<Var> {
    let (rd, fd) = (tape.value(real_logits).dims(), tape.value(fake_logits).dims());
    if rd != fd {
        return Err(Error::shape("d_loss", rd, fd));
    }
    let real = tape.bce_with_logits(real_logits, T::one())?;
    let fake = tape.bce_with_logits(fake_logits, T::zero())?;
    let sum = tape.add(real, fake)?;
    tape.scale(sum, T::from_f64_lossy(0.5))
}

/// The generator loss and its two components, all scalars on the tape.
#[derive(Clone, Copy, Debug)]
pub struct GLoss {
    pub total: Var,
    pub gan: Var,
    pub l1: Var,
}

/// `gan + λ · l1`, with the adversarial term chosen by `kind`.
pub fn g_loss<T: Element>(tape: &mut Tape<T>, fake_logits: Var, y: Var, y_hat: Var, lambda: T, kind: GanLoss) -> Result<GLoss> {
    let gan = match kind {
        GanLoss::NonSaturating => tape.bce_with_logits(fake_logits, T::one())?,
        GanLoss::Minimax => {
            let bce = tape.bce_with_logits(fake_logits, T::zero())?;
            tape.scale(bce, -T::one())?
        }
    };
    let l1 = l1_loss(tape, y, y_hat)?;
    let weighted = tape.scale(l1, lambda)?;
    let total = tape.add(gan, weighted)?;
    Ok(GLoss { total, gan, l1 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn softplus(z: f64) -> f64 {
        z.max(0.0) + (-z.abs()).exp().ln_1p()
    }

    #[test]
    fn d_loss_matches_direct_formula() {
        let real = [0.3, -1.2, 2.5, 0.0];
        let fake = [-0.7, 1.1, -3.0, 0.4];
        let mut t: Tape<f64> = Tape::new();
        let r = t.constant(Tensor::new(&[1, 1, 2, 2], real.to_vec()).unwrap());
        let f = t.constant(Tensor::new(&[1, 1, 2, 2], fake.to_vec()).unwrap());
        let l = d_loss(&mut t, r, f).unwrap();
        // BCE(z, 1) = softplus(−z), BCE(z, 0) = softplus(z)
        let want = 0.5 * (real.iter().map(|&z| softplus(-z)).sum::<f64>() / 4.0 + fake.iter().map(|&z| softplus(z)).sum::<f64>() / 4.0);
        assert!((t.value(l).item().unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn d_loss_is_ln2_at_zero_logits() {
        let mut t: Tape = Tape::new();
        let z = t.constant(Tensor::zeros(&[4, 1, 6, 6]));
        let l = d_loss(&mut t, z, z).unwrap();
        assert!((t.value(l).item().unwrap() as f64 - std::f64::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn l1_of_constant_offset() {
        let mut t: Tape = Tape::new();
        let y = t.constant(Tensor::full(&[2, 3, 4, 4], 0.25));
        let yh = t.constant(Tensor::full(&[2, 3, 4, 4], -0.5));
        let l = l1_loss(&mut t, y, yh).unwrap();
        assert_eq!(t.value(l).item().unwrap(), 0.75);
        let zero = l1_loss(&mut t, y, y).unwrap();
        assert_eq!(t.value(zero).item().unwrap(), 0.0);
    }

    #[test]
    fn g_loss_components_add_up() {
        let mut t: Tape = Tape::new();
        let logits = t.constant(Tensor::from_fn(&[2, 1, 3, 3], |i| (i as f32 * 0.7).sin()));
        let y = t.constant(Tensor::from_fn(&[2, 3, 4, 4], |i| (i as f32 * 0.3).cos()));
        let yh = t.constant(Tensor::from_fn(&[2, 3, 4, 4], |i| (i as f32 * 0.1).sin()));
        for kind in [GanLoss::NonSaturating, GanLoss::Minimax] {
            let g = g_loss(&mut t, logits, y, yh, 100.0, kind).unwrap();
            let v = |x| t.value(x).item().unwrap();
            assert_eq!(v(g.total), v(g.gan) + 100.0 * v(g.l1));
        }
        let ns = g_loss(&mut t, logits, y, yh, 0.0, GanLoss::NonSaturating).unwrap();
        let mm = g_loss(&mut t, logits, y, yh, 0.0, GanLoss::Minimax).unwrap();
        assert!(t.value(ns.gan).item().unwrap() > 0.0);
        assert!(t.value(mm.gan).item().unwrap() < 0.0);
    }

    #[test]
    fn mismatched_shapes_are_errors() {
        let mut t: Tape = Tape::new();
        let a = t.constant(Tensor::zeros(&[1, 1, 6, 6]));
        let b = t.constant(Tensor::zeros(&[1, 1, 5, 5]));
        assert!(d_loss(&mut t, a, a).is_ok());
        assert!(matches!(d_loss(&mut t, a, b), Err(Error::Shape { .. })));
        let y = t.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let yh = t.constant(Tensor::zeros(&[1, 3, 4, 5]));
        assert!(l1_loss(&mut t, y, yh).is_err());
    }
}
