use std::cell::RefCell;

use dualpath_tensor::{Gradients, NormMode, RunningStats, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StatsId(pub(crate) usize);

/// Named learnable tensors plus batch-norm buffers, in creation order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    stat_names: Vec<String>,
    stats: Vec<RunningStats>,
}

impl ParamStore {
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.values[i])
    }

    pub fn stats(&self) -> &[RunningStats] {
        &self.stats
    }

    pub fn stat_names(&self) -> &[String] {
        &self.stat_names
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn apply_stats(&mut self, updates: Vec<Option<RunningStats>>) {
        for (slot, update) in self.stats.iter_mut().zip(updates) {
            if let Some(s) = update {
                *slot = s;
            }
        }
    }

    /// Parameters then running statistics, as checkpoint entries.
    pub fn to_named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> =
            self.names.iter().cloned().zip(self.values.iter().cloned()).collect();
        for (name, s) in self.stat_names.iter().zip(&self.stats) {
            out.push((format!("{name}.running_mean"), s.mean.clone()));
            out.push((format!("{name}.running_var"), s.var.clone()));
        }
        out
    }

    /// Overwrites every tensor from a checkpoint with exactly matching names and shapes.
    pub fn load_from(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let expected = self.to_named_tensors();
        if expected.len() != ckpt.tensors.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} tensors, model expects {}",
                ckpt.tensors.len(),
                expected.len()
            )));
        }
        for ((en, et), (cn, ct)) in expected.iter().zip(&ckpt.tensors) {
            if en != cn || et.shape() != ct.shape() {
                return Err(Error::Data(format!(
                    "checkpoint tensor {cn} {:?} does not match model tensor {en} {:?}",
                    ct.shape(),
                    et.shape()
                )));
            }
        }
        let n = self.values.len();
        for (slot, (_, t)) in self.values.iter_mut().zip(&ckpt.tensors[..n]) {
            *slot = t.clone();
        }
        for (i, s) in self.stats.iter_mut().enumerate() {
            s.mean = ckpt.tensors[n + 2 * i].1.clone();
            s.var = ckpt.tensors[n + 2 * i + 1].1.clone();
        }
        Ok(())
    }
}

/// Seeded parameter initializer.
pub struct Init {
    store: ParamStore,
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            store: ParamStore {
                names: Vec::new(),
                values: Vec::new(),
                stat_names: Vec::new(),
                stats: Vec::new(),
            },
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn push(&mut self, name: String, value: Tensor) -> ParamId {
        assert!(!self.store.names.contains(&name), "duplicate parameter {name}");
        self.store.names.push(name);
        self.store.values.push(value);
        ParamId(self.store.values.len() - 1)
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn uniform(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let rng = &mut self.rng;
        let value = Tensor::from_fn(shape, |_| rng.random_range(-bound..bound));
        self.push(name.into(), value)
    }

    pub fn constant(&mut self, name: impl Into<String>, shape: &[usize], v: f64) -> ParamId {
        self.push(name.into(), Tensor::full(shape, v))
    }

    pub fn stats(&mut self, name: impl Into<String>, channels: usize) -> StatsId {
        self.store.stat_names.push(name.into());
        self.store.stats.push(RunningStats::new(channels));
        StatsId(self.store.stats.len() - 1)
    }

    pub fn finish(self) -> ParamStore {
        self.store
    }
}

/// Per-forward binding of parameters onto a tape.
pub struct Ctx<'t> {
    tape: &'t Tape,
    params: Vec<Var<'t>>,
    stats: Vec<RunningStats>,
    mode: NormMode,
    momentum: f64,
    eps: f64,
    updates: RefCell<Vec<Option<RunningStats>>>,
}

impl<'t> Ctx<'t> {
    /// Binds `values` as leaves (`trainable`) or constants.
    pub fn new(
        tape: &'t Tape,
        values: &[Tensor],
        stats: &[RunningStats],
        mode: NormMode,
        trainable: bool,
        momentum: f64,
        eps: f64,
    ) -> Self {
        let params = values
            .iter()
            .map(|v| {
                if trainable {
                    tape.leaf(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect();
        Self {
            tape,
            params,
            stats: stats.to_vec(),
            mode,
            momentum,
            eps,
            updates: RefCell::new(vec![None; stats.len()]),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn mode(&self) -> NormMode {
        self.mode
    }

    pub fn p(&self, id: ParamId) -> Var<'t> {
        self.params[id.0]
    }

    pub fn params(&self) -> &[Var<'t>] {
        &self.params
    }

    pub fn constant(&self, t: Tensor) -> Var<'t> {
        self.tape.constant(t)
    }

    pub(crate) fn batch_norm(&self, x: Var<'t>, gamma: ParamId, beta: ParamId, stats: StatsId) -> Result<Var<'t>> {
        let (y, update) = x.batch_norm(
            self.p(gamma),
            self.p(beta),
            &self.stats[stats.0],
            self.mode,
            self.momentum,
            self.eps,
        )?;
        if update.is_some() {
            self.updates.borrow_mut()[stats.0] = update;
        }
        Ok(y)
    }

    /// Running-stat updates recorded by train-mode batch norms.
    pub fn take_stat_updates(&self) -> Vec<Option<RunningStats>> {
        let n = self.stats.len();
        std::mem::replace(&mut *self.updates.borrow_mut(), vec![None; n])
    }

    /// Gradient per parameter, zeros for parameters off the loss path.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.params.iter().map(|&v| grads.wrt(v)).collect()
    }
}
