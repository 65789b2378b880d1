//! Denoising score matching against the closed-form conditional score.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::mlp::ScoreModel;
use crate::error::{Result, VsdmError};
use crate::kernel::KernelTable;
use crate::rng::{fill_normal, stream_rng, Purpose};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Optimizer steps per training stage.
    pub rounds: usize,
    pub adam: AdamConfig,
    /// Parameter EMA rate; 0 disables the shadow copy.
    pub ema_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            rounds: 500,
            adam: AdamConfig::default(),
            ema_rate: 0.999,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !self.adam.is_valid() || !(0.0..1.0).contains(&self.ema_rate) {
            return Err(VsdmError::Config(format!("invalid training config {self:?}")));
        }
        Ok(())
    }
}

/// Anything that can draw i.i.d. data batches (rows are samples).
pub trait DataSource: Sync {
    fn dim(&self) -> usize;
    fn draw(&self, count: usize, rng: &mut dyn rand::RngCore) -> Array2<f64>;
}

/// One DSM minibatch: data, noise, and the grid node of each row.
#[derive(Clone, Debug)]
pub struct DsmBatch {
    pub x0: Array2<f64>,
    pub eps: Array2<f64>,
    pub nodes: Vec<usize>,
}

/// `mean_b ‖-L⁻ᵀ ε_b - s_θ(M x0_b + L ε_b, t_b)‖²` and its exact gradient
/// with respect to θ.
pub fn dsm_loss_and_grad(model: &ScoreModel, table: &KernelTable, batch: &DsmBatch) -> Result<(f64, Vec<f64>)> {
    let (xt, target) = noisy_inputs(table, batch)?;
    let times: Vec<f64> = batch
        .nodes
        .iter()
        .map(|&n| table.schedule().node_time(n))
        .collect();
    let (out, tape) = model.forward_with(model.params(), xt.view(), &times, true);
    let b = batch.nodes.len() as f64;
    let resid = &out - &target;
    let loss = resid.iter().map(|r| r * r).sum::<f64>() / b;
    let d_out = resid * (2.0 / b);
    let grad = model.backward(model.params(), tape.as_ref().expect("tape kept"), &d_out);
    Ok((loss, grad))
}

fn noisy_inputs(table: &KernelTable, batch: &DsmBatch) -> Result<(Array2<f64>, Array2<f64>)> {
    let (bsz, d) = batch.x0.dim();
    if bsz == 0 || batch.eps.dim() != (bsz, d) || batch.nodes.len() != bsz {
        return Err(VsdmError::domain("DSM batch is empty or has mismatched shapes"));
    }
    let mut xt = Array2::zeros((bsz, d));
    let mut target = Array2::zeros((bsz, d));
    for r in 0..bsz {
        let n = batch.nodes[r];
        if n == 0 || n > table.steps() {
            return Err(VsdmError::domain(format!(
                "DSM node {n} outside 1..={} (the kernel is singular at t = 0)",
                table.steps()
            )));
        }
        let k = table.kernel(n);
        let lt = k.inv_transpose.as_ref().expect("nondegenerate for n > 0");
        for i in 0..d {
            let mut acc = 0.0;
            for j in 0..d {
                acc += k.mean_map[(i, j)] * batch.x0[(r, j)];
            }
            for j in 0..=i {
                acc += k.cholesky[(i, j)] * batch.eps[(r, j)];
            }
            xt[(r, i)] = acc;
            let mut s = 0.0;
            for j in 0..d {
                s += lt[(i, j)] * batch.eps[(r, j)];
            }
            target[(r, i)] = -s;
        }
    }
    Ok((xt, target))
}

/// Optimizer state carried across training stages.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub adam: Adam,
    /// Global round counter; selects the random stream of each round.
    pub rounds_done: u64,
}

impl TrainState {
    pub fn new(model: &ScoreModel, cfg: &TrainConfig) -> Self {
        TrainState {
            adam: Adam::new(cfg.adam, model.param_count()),
            rounds_done: 0,
        }
    }
}

/// Run `rounds` optimizer steps. Each round draws a data batch, a grid node
/// per row uniformly from `1..=N`, and Gaussian noise, then takes one Adam
/// step on the DSM loss and refreshes the parameter EMA. Returns the loss
/// of every round.
pub fn train_round(
    model: &mut ScoreModel,
    state: &mut TrainState,
    table: &KernelTable,
    data: &dyn DataSource,
    cfg: &TrainConfig,
    rounds: usize,
) -> Result<Vec<f64>> {
    if data.dim() != model.layout().dim || table.dim() != model.layout().dim {
        return Err(VsdmError::domain("data, kernel, and model dimensions differ"));
    }
    let d = model.layout().dim;
    let steps = table.steps();
    let mut trace = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        let mut rng = stream_rng(cfg.seed, Purpose::Training, state.rounds_done);
        let x0 = data.draw(cfg.batch_size, &mut rng);
        let nodes: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.random_range(1..=steps))
            .collect();
        let mut eps = Array2::zeros((cfg.batch_size, d));
        fill_normal(&mut rng, eps.as_slice_mut().expect("contiguous"));
        let batch = DsmBatch { x0, eps, nodes };
        let (loss, grad) = dsm_loss_and_grad(model, table, &batch)?;
        if !loss.is_finite() {
            return Err(VsdmError::Training(format!(
                "non-finite DSM loss at round {}",
                state.rounds_done
            )));
        }
        state.adam.update(model.params_mut(), &grad);
        model.update_ema();
        state.rounds_done += 1;
        trace.push(loss);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drift::{DriftMatrixGrid, DriftMode};
    use crate::schedule::BetaSchedule;
    use crate::score::MlpLayout;

    fn table(steps: usize) -> KernelTable {
        let s = BetaSchedule::linear(0.1, 10.0, steps).unwrap();
        KernelTable::build(&s, &DriftMatrixGrid::diagonal(&[0.8, 1.7], steps).unwrap()).unwrap()
    }

    fn batch(seed: u64, n: usize, steps: usize) -> DsmBatch {
        let mut rng = stream_rng(seed, Purpose::Eval, 0);
        let mut x0 = Array2::zeros((n, 2));
        let mut eps = Array2::zeros((n, 2));
        fill_normal(&mut rng, x0.as_slice_mut().unwrap());
        fill_normal(&mut rng, eps.as_slice_mut().unwrap());
        let nodes = (0..n).map(|_| rng.random_range(1..=steps)).collect();
        DsmBatch { x0, eps, nodes }
    }

    #[test]
    fn zero_model_loss_is_whitened_noise_norm() {
        let t = table(20);
        let m = ScoreModel::new(MlpLayout::standard(2), 1.0, 0).unwrap();
        let b = batch(1, 32, 20);
        let (loss, _) = dsm_loss_and_grad(&m, &t, &b).unwrap();
        let mut expect = 0.0;
        for r in 0..32 {
            let k = t.kernel(b.nodes[r]);
            let eps = crate::linalg::Vector::from_vec(vec![b.eps[(r, 0)], b.eps[(r, 1)]]);
            expect += k.whitened_score(&eps).unwrap().norm_squared();
        }
        expect /= 32.0;
        assert!((loss - expect).abs() < 1e-12 * expect);
    }

    #[test]
    fn isotropic_scalar_target() {
        let s = BetaSchedule::linear(0.1, 10.0, 10).unwrap();
        let t = KernelTable::build(&s, &DriftMatrixGrid::identity(1, DriftMode::DiagonalVarying, 10)).unwrap();
        let m = ScoreModel::new(MlpLayout { dim: 1, time_embed: 4, hidden: vec![4] }, 1.0, 0).unwrap();
        let b = DsmBatch {
            x0: Array2::from_elem((1, 1), 0.3),
            eps: Array2::from_elem((1, 1), 0.7),
            nodes: vec![4],
        };
        let (loss, _) = dsm_loss_and_grad(&m, &t, &b).unwrap();
        let target = -0.7 / (1.0 - (-s.sigma2_node(4)).exp()).sqrt();
        assert!((loss - target * target).abs() < 1e-12);
    }

    #[test]
    fn rejects_node_zero_and_empty() {
        let t = table(10);
        let m = ScoreModel::new(MlpLayout::standard(2), 1.0, 0).unwrap();
        let mut b = batch(2, 4, 10);
        b.nodes[1] = 0;
        assert!(matches!(dsm_loss_and_grad(&m, &t, &b), Err(VsdmError::Domain(_))));
        let empty = DsmBatch {
            x0: Array2::zeros((0, 2)),
            eps: Array2::zeros((0, 2)),
            nodes: vec![],
        };
        assert!(dsm_loss_and_grad(&m, &t, &empty).is_err());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let t = table(20);
        let mut m = ScoreModel::new(
            MlpLayout { dim: 2, time_embed: 8, hidden: vec![12, 12] },
            1.0,
            4,
        )
        .unwrap();
        // move away from the zero output layer
        let n = m.param_count();
        for (i, p) in m.params_mut()[n - 26..].iter_mut().enumerate() {
            *p = 0.1 * ((i as f64) * 0.7).sin();
        }
        let b = batch(3, 16, 20);
        let (_, grad) = dsm_loss_and_grad(&m, &t, &b).unwrap();
        let mut rng = stream_rng(8, Purpose::Eval, 1);
        for _ in 0..10 {
            let i = rng.random_range(0..n);
            let h = 1e-5;
            let mut up = m.clone();
            up.params_mut()[i] += h;
            let mut down = m.clone();
            down.params_mut()[i] -= h;
            let fd = (dsm_loss_and_grad(&up, &t, &b).unwrap().0 - dsm_loss_and_grad(&down, &t, &b).unwrap().0) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-8);
            assert!(rel < 1e-4, "param {i}: fd {fd}, analytic {}", grad[i]);
        }
    }

    struct Standard(usize);
    impl DataSource for Standard {
        fn dim(&self) -> usize {
            self.0
        }
        fn draw(&self, count: usize, rng: &mut dyn rand::RngCore) -> Array2<f64> {
            let mut x = Array2::zeros((count, self.0));
            fill_normal(rng, x.as_slice_mut().unwrap());
            x
        }
    }

    #[test]
    fn zero_rounds_leave_model_unchanged_and_training_is_deterministic() {
        let t = table(20);
        let cfg = TrainConfig { batch_size: 32, ..Default::default() };
        let mut m = ScoreModel::new(MlpLayout { dim: 2, time_embed: 8, hidden: vec![16] }, 1.0, 0).unwrap();
        let before = m.checksum();
        let mut st = TrainState::new(&m, &cfg);
        assert!(train_round(&mut m, &mut st, &t, &Standard(2), &cfg, 0).unwrap().is_empty());
        assert_eq!(m.checksum(), before);

        let run = || {
            let mut m = ScoreModel::new(MlpLayout { dim: 2, time_embed: 8, hidden: vec![16] }, 1.0, 0).unwrap();
            let mut st = TrainState::new(&m, &cfg);
            train_round(&mut m, &mut st, &t, &Standard(2), &cfg, 25).unwrap();
            m.checksum()
        };
        assert_eq!(run(), run());
        assert_ne!(run(), before);
    }
}
