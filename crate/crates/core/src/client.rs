//! Local training: `R` SGD steps over shuffled minibatches of the client's
//! own data, starting from whatever delta the server last pushed.

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::AdaptedModel;
use crate::seed;
use crate::tasks::ClientDataset;

/// Losses above this abort the round.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone)]
pub struct ClientState {
    id: usize,
    model: AdaptedModel,
    data: ClientDataset,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    pub local_lr: f64,
    pub batch_size: usize,
}

impl ClientState {
    pub fn new(
        id: usize,
        model: AdaptedModel,
        data: ClientDataset,
        local_lr: f64,
        batch_size: usize,
        stream_seed: u64,
    ) -> Self {
        Self {
            id,
            model,
            data,
            rng: seed::rng(stream_seed),
            order: Vec::new(),
            cursor: 0,
            local_lr,
            batch_size,
        }
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn model(&self) -> &AdaptedModel {
        &self.model
    }

    pub fn data(&self) -> &ClientDataset {
        &self.data
    }

    pub fn delta(&self) -> Vec<f64> {
        self.model.trainable_vector()
    }

    /// Replace the client's delta with one pushed by the server.
    pub fn sync(&mut self, delta: &[f64]) -> Result<()> {
        self.model.load_trainable(delta)
    }

    /// Indices of the next minibatch. A fresh permutation is drawn whenever
    /// the previous epoch is exhausted; the final short batch is kept.
    fn next_batch(&mut self) -> Vec<usize> {
        let n = self.data.n_train();
        if self.cursor >= self.order.len() {
            self.order = (0..n).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let end = (self.cursor + self.batch_size.max(1)).min(n);
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        batch
    }

    /// Run exactly `steps` forward/backward/SGD iterations and return the
    /// resulting delta.
    pub fn instruction_tuning(&mut self, steps: usize) -> Result<Vec<f64>> {
        if steps == 0 {
            return Err(Error::InvalidConfig("local steps must be >= 1".into()));
        }
        if self.data.n_train() == 0 {
            return Err(Error::EmptyDataset { client: self.id });
        }
        for _ in 0..steps {
            let idx = self.next_batch();
            let x = self.data.x_train.select(Axis(0), &idx);
            let y = self.data.y_train.select(Axis(0), &idx);
            let (loss, cache) = self.model.forward_loss(x.view(), y.view())?;
            if loss > DIVERGENCE_LIMIT {
                return Err(Error::Divergence {
                    client: self.id,
                    loss,
                });
            }
            let grad = self.model.backward(&cache)?;
            self.model.sgd_step(&grad, self.local_lr)?;
        }
        Ok(self.model.trainable_vector())
    }

    /// Full-split mean `(train_loss, test_loss)` of the current model.
    pub fn evaluate(&self) -> Result<(f64, f64)> {
        evaluate_model(&self.model, &self.data, self.id)
    }

    /// Evaluate this client's data under a different delta without touching
    /// the client's own model.
    pub fn evaluate_delta(&self, delta: &[f64]) -> Result<(f64, f64)> {
        let mut scratch = self.model.clone();
        scratch.load_trainable(delta)?;
        evaluate_model(&scratch, &self.data, self.id)
    }
}

fn evaluate_model(model: &AdaptedModel, data: &ClientDataset, id: usize) -> Result<(f64, f64)> {
    if data.n_train() == 0 || data.n_test() == 0 {
        return Err(Error::EmptyDataset { client: id });
    }
    let train = model.loss(data.x_train.view(), data.y_train.view())?;
    let test = model.loss(data.x_test.view(), data.y_test.view())?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;
    use crate::tasks::{generate_universe, UniverseConfig};
    use ndarray::Array2;

    fn linear_client(lr: f64, seed_value: u64) -> ClientState {
        let cfg = UniverseConfig {
            clients: 1,
            clusters: 1,
            dim: 4,
            out_dim: 2,
            noise_std: 0.0,
            n_train: 32,
            n_test: 16,
            seed: seed_value,
            ..Default::default()
        };
        let (_, mut data) = generate_universe(&cfg).unwrap();
        let spec = ModelSpec::new(vec![4, 2], 2).with_init_scale(0.5);
        let model = AdaptedModel::build(spec, 1, 2).unwrap();
        ClientState::new(0, model, data.remove(0), lr, 8, 77)
    }

    #[test]
    fn zero_lr_keeps_delta() {
        let mut c = linear_client(0.0, 1);
        let before = c.delta();
        let after = c.instruction_tuning(1).unwrap();
        assert!(before
            .iter()
            .zip(&after)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn converges_on_noise_free_task() {
        let mut c = linear_client(0.05, 2);
        let (initial, _) = c.evaluate().unwrap();
        c.instruction_tuning(200).unwrap();
        let (train, _) = c.evaluate().unwrap();
        assert!(train < 1e-3 * initial, "train {train} initial {initial}");
    }

    #[test]
    fn deterministic_stream() {
        let mut a = linear_client(0.05, 3);
        let mut b = linear_client(0.05, 3);
        assert_eq!(
            a.instruction_tuning(13).unwrap(),
            b.instruction_tuning(13).unwrap()
        );
    }

    #[test]
    fn base_frozen_through_training() {
        let mut c = linear_client(0.05, 4);
        let bases = c.model().bases();
        c.instruction_tuning(50).unwrap();
        let after = c.model().bases();
        for (x, y) in bases.iter().zip(&after) {
            assert!(x
                .iter()
                .zip(y.iter())
                .all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn split_rounds_match_one_long_run() {
        let mut long = linear_client(0.05, 5);
        let mut split = linear_client(0.05, 5);
        let l = long.instruction_tuning(3 * 7).unwrap();
        let mut s = Vec::new();
        for _ in 0..3 {
            s = split.instruction_tuning(7).unwrap();
            split.sync(&s.clone()).unwrap();
        }
        assert!(l.iter().zip(&s).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn batches_cycle_epochs() {
        let mut c = linear_client(0.0, 6);
        c.batch_size = 10;
        let sizes: Vec<usize> = (0..5).map(|_| c.next_batch().len()).collect();
        assert_eq!(sizes, vec![10, 10, 10, 2, 10]);
    }

    #[test]
    fn evaluate_is_pure_and_transferable() {
        let mut a = linear_client(0.05, 7);
        let mut b = linear_client(0.05, 7);
        b.local_lr = 0.02;
        b.instruction_tuning(10).unwrap();
        assert_eq!(a.evaluate().unwrap(), a.evaluate().unwrap());
        let via_delta = a.evaluate_delta(&b.delta()).unwrap();
        assert_eq!(via_delta, b.evaluate().unwrap());
        a.sync(&b.delta()).unwrap();
        assert_eq!(a.evaluate().unwrap(), b.evaluate().unwrap());
    }

    #[test]
    fn zero_data_zero_loss() {
        let data = ClientDataset {
            x_train: Array2::zeros((4, 3)),
            y_train: Array2::zeros((4, 2)),
            x_test: Array2::zeros((4, 3)),
            y_test: Array2::zeros((4, 2)),
        };
        let model = AdaptedModel::build(ModelSpec::new(vec![3, 2], 1), 0, 0).unwrap();
        let c = ClientState::new(0, model, data, 0.1, 2, 0);
        assert_eq!(c.evaluate().unwrap(), (0.0, 0.0));
    }

    #[test]
    fn empty_dataset_errors() {
        let data = ClientDataset {
            x_train: Array2::zeros((0, 3)),
            y_train: Array2::zeros((0, 2)),
            x_test: Array2::zeros((0, 3)),
            y_test: Array2::zeros((0, 2)),
        };
        let model = AdaptedModel::build(ModelSpec::new(vec![3, 2], 1), 0, 0).unwrap();
        let mut c = ClientState::new(4, model, data, 0.1, 2, 0);
        assert_eq!(
            c.instruction_tuning(1).unwrap_err(),
            Error::EmptyDataset { client: 4 }
        );
        assert_eq!(c.evaluate().unwrap_err(), Error::EmptyDataset { client: 4 });
    }

    #[test]
    fn divergence_is_reported() {
        let mut c = linear_client(1e6, 8);
        let err = c.instruction_tuning(50).unwrap_err();
        assert!(err.is_divergence(), "{err:?}");
    }
}
