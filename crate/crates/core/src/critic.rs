//! Ensemble of independently trained Q-functions.
//!
//! Each member regresses onto a Bellman target formed from its own target
//! network only. Policy guidance reads the ensemble through the lower
//! confidence bound `mean − β·std` (population standard deviation).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{polyak, Mlp, Tensor2};
use crate::policy::{ActionValue, DiffusionPolicy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriticConfig {
    pub members: usize,
    pub hidden: Vec<usize>,
    pub gamma: f64,
    pub beta_lcb: f64,
    pub polyak_rate: f64,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            members: 16,
            hidden: vec![64, 64],
            gamma: 0.99,
            beta_lcb: 4.0,
            polyak_rate: 0.005,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QEnsemble {
    pub members: Vec<Mlp>,
    pub targets: Vec<Mlp>,
    pub gamma: f64,
    pub beta_lcb: f64,
    pub polyak_rate: f64,
    state_dim: usize,
    action_dim: usize,
}

/// Offline transitions laid out column-wise for a minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionBatch {
    pub states: Tensor2,
    pub actions: Tensor2,
    pub rewards: Vec<f64>,
    pub next_states: Tensor2,
    pub dones: Vec<bool>,
}

impl TransitionBatch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// `mean − β·std` with the population variance.
pub fn lcb_from_values(values: &[f64], beta: f64) -> f64 {
    let (mean, std) = mean_std(values);
    mean - beta * std
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `∂LCB/∂q_m`. At zero spread the standard deviation is not differentiable
/// and only the mean contributes.
fn lcb_weights(values: &[f64], beta: f64) -> Vec<f64> {
    let n = values.len() as f64;
    let (mean, std) = mean_std(values);
    values
        .iter()
        .map(|v| {
            if std > 0.0 {
                1.0 / n - beta * (v - mean) / (n * std)
            } else {
                1.0 / n
            }
        })
        .collect()
}

impl QEnsemble {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        cfg: &CriticConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.members == 0 {
            return Err(Error::InvalidArgument("ensemble needs M >= 1".into()));
        }
        if !(0.0..=1.0).contains(&cfg.gamma) {
            return Err(Error::InvalidArgument(format!(
                "discount must lie in [0, 1], got {}",
                cfg.gamma
            )));
        }
        if !(cfg.beta_lcb >= 0.0) {
            return Err(Error::InvalidArgument(
                "beta_lcb must be non-negative".into(),
            ));
        }
        let mut widths = vec![state_dim + action_dim];
        widths.extend_from_slice(&cfg.hidden);
        widths.push(1);
        let members = (0..cfg.members)
            .map(|_| Mlp::new(&widths, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            targets: members.clone(),
            members,
            gamma: cfg.gamma,
            beta_lcb: cfg.beta_lcb,
            polyak_rate: cfg.polyak_rate,
            state_dim,
            action_dim,
        })
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn input(&self, states: &Tensor2, actions: &Tensor2) -> Result<Tensor2> {
        if states.cols() != self.state_dim {
            return Err(Error::DimensionMismatch {
                expected: self.state_dim,
                got: states.cols(),
            });
        }
        if actions.cols() != self.action_dim {
            return Err(Error::DimensionMismatch {
                expected: self.action_dim,
                got: actions.cols(),
            });
        }
        Tensor2::hcat(&[states, actions])
    }

    /// `values[m][row]` from the online members.
    pub fn member_values(&self, states: &Tensor2, actions: &Tensor2) -> Result<Vec<Vec<f64>>> {
        let x = self.input(states, actions)?;
        self.members
            .iter()
            .map(|net| net.predict(&x).map(Tensor2::into_vec))
            .collect()
    }

    /// `values[m][row]` from the target networks.
    pub fn target_values(&self, states: &Tensor2, actions: &Tensor2) -> Result<Vec<Vec<f64>>> {
        let x = self.input(states, actions)?;
        self.targets
            .iter()
            .map(|net| net.predict(&x).map(Tensor2::into_vec))
            .collect()
    }

    /// The `M` member values for a single pair.
    pub fn q_values(&self, state: &[f64], action: &[f64]) -> Result<Vec<f64>> {
        let s = Tensor2::from_rows(&[state])?;
        let a = Tensor2::from_rows(&[action])?;
        Ok(self
            .member_values(&s, &a)?
            .into_iter()
            .map(|v| v[0])
            .collect())
    }

    pub fn lcb(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        Ok(lcb_from_values(
            &self.q_values(state, action)?,
            self.beta_lcb,
        ))
    }

    /// Per-row LCB for a batch.
    pub fn lcb_batch(&self, states: &Tensor2, actions: &Tensor2) -> Result<Vec<f64>> {
        let values = self.member_values(states, actions)?;
        Ok((0..states.rows())
            .map(|r| {
                let col: Vec<f64> = values.iter().map(|v| v[r]).collect();
                lcb_from_values(&col, self.beta_lcb)
            })
            .collect())
    }

    /// Per-row ensemble standard deviation.
    pub fn spread(&self, states: &Tensor2, actions: &Tensor2) -> Result<Vec<f64>> {
        let values = self.member_values(states, actions)?;
        Ok((0..states.rows())
            .map(|r| {
                let col: Vec<f64> = values.iter().map(|v| v[r]).collect();
                mean_std(&col).1
            })
            .collect())
    }

    /// Bellman targets `y^m = r + γ(1 − done) Q̄_m(s′, a′)` with `a′` drawn
    /// from `pol`. With `max_q_backup`, `n_backup` actions are drawn per next
    /// state and each member takes its own maximum over them.
    ///
    /// Returns `targets[m][row]`.
    pub fn ensemble_targets<R: Rng + ?Sized>(
        &self,
        rewards: &[f64],
        next_states: &Tensor2,
        dones: &[bool],
        pol: &DiffusionPolicy,
        rng: &mut R,
        max_q_backup: bool,
        n_backup: usize,
    ) -> Result<Vec<Vec<f64>>> {
        let rows = rewards.len();
        if next_states.rows() != rows || dones.len() != rows {
            return Err(Error::DimensionMismatch {
                expected: rows,
                got: next_states.rows().min(dones.len()),
            });
        }
        let draws = if max_q_backup {
            if n_backup == 0 {
                return Err(Error::InvalidArgument("n_backup must be >= 1".into()));
            }
            n_backup
        } else {
            1
        };
        let expanded = next_states.repeat_rows(draws);
        let next_actions = pol.sample_actions(&expanded, rng)?;
        let next_q = self.target_values(&expanded, &next_actions)?;
        Ok(next_q
            .iter()
            .map(|member| {
                (0..rows)
                    .map(|r| {
                        let best = member[r * draws..(r + 1) * draws]
                            .iter()
                            .copied()
                            .fold(f64::NEG_INFINITY, f64::max);
                        let cont = if dones[r] { 0.0 } else { self.gamma };
                        rewards[r] + cont * best
                    })
                    .collect()
            })
            .collect())
    }

    /// Squared regression of every member onto its own target:
    /// returns per-member losses and gradients. Targets are constants.
    pub fn regression_loss(
        &self,
        states: &Tensor2,
        actions: &Tensor2,
        targets: &[Vec<f64>],
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let rows = states.rows();
        if rows == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if targets.len() != self.size() {
            return Err(Error::DimensionMismatch {
                expected: self.size(),
                got: targets.len(),
            });
        }
        let x = self.input(states, actions)?;
        let n = rows as f64;
        let mut losses = Vec::with_capacity(self.size());
        let mut grads = Vec::with_capacity(self.size());
        for (net, y) in self.members.iter().zip(targets) {
            if y.len() != rows {
                return Err(Error::DimensionMismatch {
                    expected: rows,
                    got: y.len(),
                });
            }
            let (q, tape) = net.forward(&x)?;
            let mut g = Tensor2::zeros(rows, 1);
            let mut loss = 0.0;
            for r in 0..rows {
                let d = q.data()[r] - y[r];
                loss += d * d;
                g.data_mut()[r] = 2.0 * d / n;
            }
            losses.push(loss / n);
            grads.push(net.backward(&tape, &g)?.0);
        }
        Ok((losses, grads))
    }

    /// Bellman regression on a batch of transitions, targets drawn with `pol`.
    pub fn critic_loss<R: Rng + ?Sized>(
        &self,
        batch: &TransitionBatch,
        pol: &DiffusionPolicy,
        rng: &mut R,
        max_q_backup: bool,
        n_backup: usize,
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let targets = self.ensemble_targets(
            &batch.rewards,
            &batch.next_states,
            &batch.dones,
            pol,
            rng,
            max_q_backup,
            n_backup,
        )?;
        self.regression_loss(&batch.states, &batch.actions, &targets)
    }

    /// Moves every target toward its member.
    pub fn polyak_update(&mut self, rate: f64) -> Result<()> {
        for (t, m) in self.targets.iter_mut().zip(&self.members) {
            polyak(t, m, rate)?;
        }
        Ok(())
    }
}

impl ActionValue for QEnsemble {
    fn values_and_action_grads(
        &self,
        states: &Tensor2,
        actions: &Tensor2,
    ) -> Result<(Vec<f64>, Tensor2)> {
        let x = self.input(states, actions)?;
        let rows = states.rows();
        let mut values = Vec::with_capacity(self.size());
        let mut tapes = Vec::with_capacity(self.size());
        for net in &self.members {
            let (q, tape) = net.forward(&x)?;
            values.push(q.into_vec());
            tapes.push(tape);
        }
        let mut lcb = Vec::with_capacity(rows);
        let mut weights = vec![Tensor2::zeros(rows, 1); self.size()];
        for r in 0..rows {
            let col: Vec<f64> = values.iter().map(|v| v[r]).collect();
            lcb.push(lcb_from_values(&col, self.beta_lcb));
            for (m, w) in lcb_weights(&col, self.beta_lcb).into_iter().enumerate() {
                weights[m].data_mut()[r] = w;
            }
        }
        let mut action_grads = Tensor2::zeros(rows, self.action_dim);
        for ((net, tape), w) in self.members.iter().zip(&tapes).zip(&weights) {
            let mut scratch = vec![0.0; net.param_count()];
            let dx = net.backward_into(tape, w, &mut scratch)?;
            for r in 0..rows {
                let src = &dx.row(r)[self.state_dim..];
                for (g, v) in action_grads.row_mut(r).iter_mut().zip(src) {
                    *g += v;
                }
            }
        }
        Ok((lcb, action_grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lcb_hand_values() {
        assert_eq!(lcb_from_values(&[1.0, 3.0], 1.0), 1.0);
        for beta in [0.0, 1.0, 4.0, 100.0] {
            assert_eq!(lcb_from_values(&[1.0, 1.0, 1.0], beta), 1.0);
        }
        assert_eq!(lcb_from_values(&[0.5, 2.0, -1.0, 4.5], 0.0), 1.5);
        assert_eq!(lcb_from_values(&[7.0], 3.0), 7.0);
    }

    fn ensemble(m: usize, seed: u64) -> QEnsemble {
        let cfg = CriticConfig {
            members: m,
            hidden: vec![8],
            ..CriticConfig::default()
        };
        QEnsemble::new(1, 1, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn single_member_values() {
        let ens = ensemble(1, 0);
        let q = ens.q_values(&[0.3], &[0.1]).unwrap();
        let direct = ens.members[0]
            .predict(&Tensor2::from_rows(&[[0.3, 0.1]]).unwrap())
            .unwrap();
        assert_eq!(q, direct.into_vec());
        assert_eq!(ens.lcb(&[0.3], &[0.1]).unwrap(), q[0]);
    }

    #[test]
    fn identical_members_agree_and_permute() {
        let mut ens = ensemble(3, 1);
        let first = ens.members[0].clone();
        ens.members[2] = first.clone();
        let q = ens.q_values(&[0.2], &[-0.5]).unwrap();
        assert_eq!(q[0], q[2]);
        ens.members.swap(0, 1);
        let p = ens.q_values(&[0.2], &[-0.5]).unwrap();
        assert_eq!(p, vec![q[1], q[0], q[2]]);
    }

    #[test]
    fn targets_start_as_copies() {
        let ens = ensemble(4, 2);
        assert_eq!(ens.members, ens.targets);
    }

    #[test]
    fn lcb_weights_match_finite_differences() {
        let vals = [0.4, 1.9, -0.3, 1.1];
        let w = lcb_weights(&vals, 2.5);
        for m in 0..vals.len() {
            let h = 1e-6;
            let mut up = vals;
            up[m] += h;
            let mut down = vals;
            down[m] -= h;
            let fd = (lcb_from_values(&up, 2.5) - lcb_from_values(&down, 2.5)) / (2.0 * h);
            assert!((fd - w[m]).abs() < 1e-7);
        }
    }

    #[test]
    fn regression_rejects_empty_batch() {
        let ens = ensemble(2, 3);
        let e = Tensor2::zeros(0, 1);
        assert!(ens.regression_loss(&e, &e, &[vec![], vec![]]).is_err());
    }
}
