//! Centralized FedAvg simulation: local minibatch SGD on each client,
//! transmission of the updated parameters, and unweighted server averaging.

mod data;
pub mod mnist;
mod model;

use std::borrow::Cow;
use std::collections::BTreeSet;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

pub use data::{make_iid_partition, ClientDataset, Dataset, GaussianMixture, MixtureSpec};
pub use model::{Logistic, LossModel, Mlp, ModelSpec, Quadratic};

use crate::error::{Error, Result};
use crate::linalg::{check_dim, ParamVector};
use crate::rng::{names, SeedTree, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub epochs_per_round: usize,
    pub minibatch_size: usize,
    /// Upper bound on communication rounds.
    pub rounds: usize,
    pub client_count: usize,
    #[serde(with = "crate::rng::seed_format")]
    pub rng_seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            epochs_per_round: 3,
            minibatch_size: 128,
            rounds: 500,
            client_count: 5,
            rng_seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self.epochs_per_round == 0 || self.minibatch_size == 0 || self.rounds == 0 {
            return Err(Error::config("epochs_per_round, minibatch_size and rounds must be positive"));
        }
        if self.client_count < 2 {
            return Err(Error::config("client_count must be at least 2"));
        }
        Ok(())
    }
}

/// Runs `epochs_per_round` passes of minibatch SGD from `start`, reshuffling
/// the client's samples at the beginning of every epoch.
pub fn local_update(
    model: &dyn LossModel,
    start: &ParamVector,
    data: &ClientDataset,
    cfg: &TrainingConfig,
    rng: &mut Stream,
) -> Result<ParamVector> {
    check_dim(model.parameter_count(), start.len())?;
    check_dim(model.input_dim(), data.data.dim())?;
    if data.data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut w = start.to_vec();
    let mut grad = vec![0.0; w.len()];
    let mut order: Vec<usize> = (0..data.data.len()).collect();
    for _ in 0..cfg.epochs_per_round {
        order.shuffle(rng);
        for batch in order.chunks(cfg.minibatch_size) {
            model.gradient(&w, &data.data, batch, &mut grad);
            for (wi, gi) in w.iter_mut().zip(&grad) {
                *wi -= cfg.learning_rate * gi;
            }
        }
    }
    ParamVector::new(w)
        .map_err(|_| Error::Numerical(format!("client {} diverged during local training", data.client_id)))
}

/// Coordinatewise arithmetic mean.
pub fn aggregate(updates: &[ParamVector]) -> Result<ParamVector> {
    let Some(first) = updates.first() else {
        return Err(Error::InvalidUpdate("nothing to aggregate".into()));
    };
    let mut sum = vec![0.0; first.len()];
    for u in updates {
        check_dim(first.len(), u.len())?;
        for (s, v) in sum.iter_mut().zip(u.iter()) {
            *s += v;
        }
    }
    let inv = 1.0 / updates.len() as f64;
    ParamVector::new(sum.into_iter().map(|s| s * inv).collect())
}

/// Interception points for a misbehaving client. Client ids are 1-based.
pub trait AttackHook {
    /// May replace the data a client trains on in round `t`.
    fn poison_data(&mut self, _t: usize, _client: usize, _data: &ClientDataset) -> Result<Option<ClientDataset>> {
        Ok(None)
    }

    /// May alter the parameters a client sends to the server.
    fn poison_transmission(&mut self, _t: usize, _client: usize, params: ParamVector) -> Result<ParamVector> {
        Ok(params)
    }
}

/// Honest clients only.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoAttack;

impl AttackHook for NoAttack {}

/// Source of fresh samples for per-round resampling.
#[derive(Debug, Clone)]
pub enum Population {
    Mixture(GaussianMixture),
    /// Uniform draws without replacement from a finite pool.
    Pool(Dataset),
}

impl Population {
    pub fn draw(&self, n: usize, rng: &mut Stream) -> Result<Dataset> {
        match self {
            Population::Mixture(g) => Ok(g.sample(n, rng)),
            Population::Pool(d) => {
                if n > d.len() {
                    return Err(Error::config(format!("cannot draw {n} samples from a pool of {}", d.len())));
                }
                Ok(d.subset(&index::sample(rng, d.len(), n).into_vec()))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum ClientData {
    /// Each client reuses its fixed local partition every round.
    Fixed(Vec<ClientDataset>),
    /// Each client draws `per_client` fresh samples every round.
    Fresh { population: Population, per_client: usize },
}

#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub round: usize,
    pub global_before: ParamVector,
    /// Parameters as received by the server, indexed by client − 1.
    pub transmitted: Vec<ParamVector>,
    /// `transmitted[k] − global_before`.
    pub deltas: Vec<ParamVector>,
    pub aggregated: ParamVector,
}

/// Server and client state of one FedAvg run.
#[derive(Debug)]
pub struct Federation {
    model: Box<dyn LossModel>,
    cfg: TrainingConfig,
    clients: ClientData,
    global: ParamVector,
    seeds: SeedTree,
    round: usize,
    excluded: BTreeSet<usize>,
}

impl Federation {
    /// Initial parameters come from the `init` stream of `seeds`.
    pub fn new(model: Box<dyn LossModel>, cfg: TrainingConfig, clients: ClientData, seeds: SeedTree) -> Result<Self> {
        cfg.validate()?;
        if let ClientData::Fixed(c) = &clients {
            if c.len() != cfg.client_count {
                return Err(Error::config(format!(
                    "{} client datasets for client_count {}",
                    c.len(),
                    cfg.client_count
                )));
            }
        }
        let global = model.init_params(&mut seeds.stream(names::INIT, &[]));
        Ok(Self { model, cfg, clients, global, seeds, round: 0, excluded: BTreeSet::new() })
    }

    pub fn with_initial(mut self, params: ParamVector) -> Result<Self> {
        check_dim(self.model.parameter_count(), params.len())?;
        self.global = params;
        Ok(self)
    }

    pub fn model(&self) -> &dyn LossModel {
        self.model.as_ref()
    }

    pub fn global(&self) -> &ParamVector {
        &self.global
    }

    pub fn rounds_done(&self) -> usize {
        self.round
    }

    pub fn client_count(&self) -> usize {
        self.cfg.client_count
    }

    /// Drops a client's transmissions from future aggregations.
    pub fn exclude(&mut self, client: usize) {
        self.excluded.insert(client);
    }

    fn round_data(&self, t: usize, client: usize) -> Result<Cow<'_, ClientDataset>> {
        match &self.clients {
            ClientData::Fixed(c) => Ok(Cow::Borrowed(&c[client - 1])),
            ClientData::Fresh { population, per_client } => {
                let mut rng = self.seeds.stream(names::DATA, &[client as u64, t as u64]);
                Ok(Cow::Owned(ClientDataset::new(client, population.draw(*per_client, &mut rng)?)?))
            }
        }
    }

    /// One communication round: transmit, train locally, let the hook
    /// interfere, aggregate.
    pub fn run_round(&mut self, hook: &mut dyn AttackHook) -> Result<RoundRecord> {
        let t = self.round + 1;
        let mut transmitted = Vec::with_capacity(self.cfg.client_count);
        for k in 1..=self.cfg.client_count {
            let honest = self.round_data(t, k)?;
            let poisoned = hook.poison_data(t, k, &honest)?;
            let data = poisoned.as_ref().unwrap_or(&honest);
            let mut rng = self.seeds.stream(names::SHUFFLE, &[k as u64, t as u64]);
            let local = local_update(self.model.as_ref(), &self.global, data, &self.cfg, &mut rng)?;
            let sent = hook.poison_transmission(t, k, local)?;
            check_dim(self.global.len(), sent.len())?;
            transmitted.push(sent);
        }
        let deltas = transmitted.iter().map(|w| w.sub(&self.global)).collect::<Result<Vec<_>>>()?;
        let included: Vec<ParamVector> = transmitted
            .iter()
            .enumerate()
            .filter(|(i, _)| !self.excluded.contains(&(i + 1)))
            .map(|(_, w)| w.clone())
            .collect();
        let aggregated = if included.is_empty() { self.global.clone() } else { aggregate(&included)? };
        let record = RoundRecord {
            round: t,
            global_before: std::mem::replace(&mut self.global, aggregated.clone()),
            transmitted,
            deltas,
            aggregated,
        };
        self.round = t;
        Ok(record)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cfg(epochs: usize, batch: usize, lr: f64, k: usize) -> TrainingConfig {
        TrainingConfig {
            learning_rate: lr,
            epochs_per_round: epochs,
            minibatch_size: batch,
            rounds: 10,
            client_count: k,
            rng_seed: 0,
        }
    }

    fn client(id: usize, rows: &[(Vec<f64>, usize)]) -> ClientDataset {
        ClientDataset::new(id, Dataset::from_rows(rows).unwrap()).unwrap()
    }

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec()).unwrap()
    }

    /// Loss that does not depend on the parameters.
    #[derive(Debug)]
    struct Constant;

    impl LossModel for Constant {
        fn parameter_count(&self) -> usize {
            2
        }
        fn input_dim(&self) -> usize {
            1
        }
        fn init_params(&self, _: &mut Stream) -> ParamVector {
            pv(&[0.5, -1.0])
        }
        fn loss(&self, _: &[f64], _: &[f64], _: usize) -> f64 {
            1.0
        }
        fn gradient(&self, _: &[f64], _: &Dataset, _: &[usize], grad: &mut [f64]) {
            grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    #[test]
    fn constant_loss_is_a_fixed_point() {
        let data = client(1, &[(vec![1.0], 0), (vec![2.0], 1)]);
        let start = pv(&[0.3, 0.7]);
        let mut rng = SeedTree::new(0).stream("s", &[]);
        let out = local_update(&Constant, &start, &data, &cfg(3, 1, 0.5, 2), &mut rng).unwrap();
        assert_eq!(out, start);
    }

    #[test]
    fn single_quadratic_step() {
        let data = client(1, &[(vec![0.0, 0.0], 0)]);
        let mut rng = SeedTree::new(0).stream("s", &[]);
        let out = local_update(&Quadratic { dim: 2 }, &pv(&[1.0, 0.0]), &data, &cfg(1, 1, 0.1, 2), &mut rng).unwrap();
        assert_abs_diff_eq!(out[0], 0.9, epsilon = 1e-15);
        assert_abs_diff_eq!(out[1], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn logistic_matches_scalar_replay() {
        // Two samples, batch 1, one epoch: replay the same shuffle with scalar arithmetic.
        let rows = vec![(vec![1.0, -0.5], 0), (vec![-0.3, 0.8], 1)];
        let data = client(1, &rows);
        let model = Logistic { inputs: 2, classes: 2 };
        let start = pv(&[0.1, -0.2, 0.3, 0.05, 0.0, 0.1]);
        let c = cfg(1, 1, 0.5, 2);
        let seeds = SeedTree::new(11);
        let out = local_update(&model, &start, &data, &c, &mut seeds.stream("s", &[])).unwrap();

        let mut order = vec![0usize, 1];
        order.shuffle(&mut seeds.stream("s", &[]));
        let mut w = start.to_vec();
        for &i in &order {
            let (x, y) = (&rows[i].0, rows[i].1);
            let z0 = w[0] * x[0] + w[1] * x[1] + w[4];
            let z1 = w[2] * x[0] + w[3] * x[1] + w[5];
            let p1 = 1.0 / (1.0 + (z0 - z1).exp());
            let p = [1.0 - p1, p1];
            let e = [p[0] - f64::from(y == 0), p[1] - f64::from(y == 1)];
            let g = [e[0] * x[0], e[0] * x[1], e[1] * x[0], e[1] * x[1], e[0], e[1]];
            for j in 0..6 {
                w[j] -= 0.5 * g[j];
            }
        }
        for j in 0..6 {
            assert_abs_diff_eq!(out[j], w[j], epsilon = 1e-12);
        }
    }

    #[test]
    fn local_update_rejects_bad_inputs() {
        let data = client(1, &[(vec![0.0, 0.0], 0)]);
        let mut rng = SeedTree::new(0).stream("s", &[]);
        assert!(local_update(&Quadratic { dim: 3 }, &pv(&[0.0; 2]), &data, &cfg(1, 1, 0.1, 2), &mut rng).is_err());
        assert!(ClientDataset::new(1, Dataset::new(2, vec![], vec![]).unwrap()).is_err());
    }

    #[test]
    fn aggregate_examples() {
        let v = pv(&[1.0, -2.0]);
        assert_eq!(aggregate(std::slice::from_ref(&v)).unwrap(), v);
        assert_eq!(aggregate(&[v.clone(), v.scale(-1.0)]).unwrap(), ParamVector::zeros(2));
        assert_eq!(aggregate(&[pv(&[1.0, 2.0]), pv(&[3.0, 4.0]), pv(&[5.0, 6.0])]).unwrap(), pv(&[3.0, 4.0]));
        assert!(aggregate(&[pv(&[1.0]), pv(&[1.0, 2.0])]).is_err());
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn constant_loss_round_has_zero_deltas() {
        let clients = vec![client(1, &[(vec![1.0], 0)]), client(2, &[(vec![2.0], 0)])];
        let mut fed =
            Federation::new(Box::new(Constant), cfg(1, 1, 0.1, 2), ClientData::Fixed(clients), SeedTree::new(1))
                .unwrap();
        let rec = fed.run_round(&mut NoAttack).unwrap();
        assert_eq!(rec.round, 1);
        assert!(rec.deltas.iter().all(|d| d.iter().all(|v| *v == 0.0)));
        assert_eq!(rec.aggregated, rec.global_before);
    }

    #[test]
    fn quadratic_round_matches_closed_form() {
        // Client k holds the single point x_k; one step gives w − η(w − x_k),
        // and the average is w − η(w − mean x).
        let clients = vec![client(1, &[(vec![1.0, 2.0], 0)]), client(2, &[(vec![-1.0, -2.0], 0)])];
        let eta = 0.25;
        let mut fed = Federation::new(
            Box::new(Quadratic { dim: 2 }),
            cfg(1, 1, eta, 2),
            ClientData::Fixed(clients),
            SeedTree::new(1),
        )
        .unwrap()
        .with_initial(pv(&[4.0, -4.0]))
        .unwrap();
        let mut w = [4.0, -4.0];
        for _ in 0..5 {
            let rec = fed.run_round(&mut NoAttack).unwrap();
            w = [w[0] - eta * w[0], w[1] - eta * w[1]];
            assert_abs_diff_eq!(rec.aggregated[0], w[0], epsilon = 1e-12);
            assert_abs_diff_eq!(rec.aggregated[1], w[1], epsilon = 1e-12);
        }
    }

    #[test]
    fn identical_clients_identical_streams_give_equal_deltas() {
        let rows: Vec<_> = (0..8).map(|i| (vec![i as f64 / 8.0, 1.0 - i as f64 / 8.0], i % 2)).collect();
        let model = Logistic { inputs: 2, classes: 2 };
        let start = model.init_params(&mut SeedTree::new(0).stream("init", &[]));
        let c = cfg(2, 3, 0.1, 3);
        let outs: Vec<_> = (1..=3)
            .map(|k| {
                let mut rng = SeedTree::new(5).stream("shared", &[]);
                local_update(&model, &start, &client(k, &rows), &c, &mut rng).unwrap()
            })
            .collect();
        assert_eq!(outs[0], outs[1]);
        assert_eq!(outs[1], outs[2]);
    }

    #[test]
    fn pool_population_draws_without_replacement() {
        let pool = Dataset::from_rows(&(0..20).map(|i| (vec![i as f64], 0)).collect::<Vec<_>>()).unwrap();
        let pop = Population::Pool(pool);
        let d = pop.draw(20, &mut SeedTree::new(0).stream("d", &[])).unwrap();
        let mut xs = d.all_features().to_vec();
        xs.sort_by(f64::total_cmp);
        assert_eq!(xs, (0..20).map(|i| i as f64).collect::<Vec<_>>());
        assert!(pop.draw(21, &mut SeedTree::new(0).stream("d", &[])).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(cfg(1, 1, 0.1, 1).validate().is_err());
        assert!(cfg(0, 1, 0.1, 2).validate().is_err());
        assert!(cfg(1, 1, -0.1, 2).validate().is_err());
        assert!(TrainingConfig::default().validate().is_ok());
    }
}
