//! Layer descriptors.
//!
//! Layers own no arrays; parameters live in a [`TensorMap`] keyed by dotted
//! names so that checkpoints, optimizers, and binders all see one canonical,
//! sorted view of the model state.

use std::collections::BTreeMap;

use ndarray::Array1;
use rand_chacha::ChaCha20Rng;

use super::init;
use crate::tensor::{Gradients, Tape, TensorData, Var};

/// Named tensor storage (parameters, buffers, optimizer moments).
pub type TensorMap = BTreeMap<String, TensorData>;

/// Leases parameters onto a tape, once per name, and collects their
/// gradients afterwards.
pub struct Binder<'t> {
    tape: &'t Tape,
    trainable: bool,
    bound: BTreeMap<String, Var>,
}

impl<'t> Binder<'t> {
    /// `trainable` controls whether bound tensors receive gradients; a frozen
    /// binder leases parameters as constants.
    pub fn new(tape: &'t Tape, trainable: bool) -> Self {
        Binder {
            tape,
            trainable,
            bound: BTreeMap::new(),
        }
    }

    pub fn bind(&mut self, store: &TensorMap, name: &str) -> Var {
        if let Some(v) = self.bound.get(name) {
            return *v;
        }
        let data = store
            .get(name)
            .unwrap_or_else(|| panic!("parameter not found: {name}"))
            .clone();
        let var = if self.trainable {
            self.tape.param(data)
        } else {
            self.tape.leaf(data)
        };
        self.bound.insert(name.to_string(), var);
        var
    }

    /// Gradient per bound parameter name (zeros when no path reached it).
    pub fn grads(&self, g: &Gradients) -> TensorMap {
        let mut out = TensorMap::new();
        for (name, var) in &self.bound {
            let shape = self.tape.shape(*var);
            out.insert(name.clone(), g.get_or_zeros(*var, &shape));
        }
        out
    }
}

/// Whether batch statistics are computed (training) or read from running
/// buffers (inference).
pub enum BnMode<'a> {
    Train(&'a mut TensorMap),
    Infer(&'a TensorMap),
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut TensorMap,
        rng: &mut ChaCha20Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        std: f64,
    ) -> Self {
        store.insert(
            format!("{name}.w"),
            init::gaussian(rng, &[out_ch, in_ch, kernel, kernel], std),
        );
        store.insert(format!("{name}.b"), init::zeros(&[out_ch]));
        Conv2d {
            name: name.to_string(),
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        }
    }

    pub fn apply(&self, tape: &Tape, binder: &mut Binder, store: &TensorMap, x: Var) -> Var {
        let w = binder.bind(store, &format!("{}.w", self.name));
        let b = binder.bind(store, &format!("{}.b", self.name));
        tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn init(
        store: &mut TensorMap,
        rng: &mut ChaCha20Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        std: f64,
    ) -> Self {
        store.insert(
            format!("{name}.w"),
            init::gaussian(rng, &[out_dim, in_dim], std),
        );
        store.insert(format!("{name}.b"), init::zeros(&[out_dim]));
        Linear {
            name: name.to_string(),
            in_dim,
            out_dim,
        }
    }

    pub fn apply(&self, tape: &Tape, binder: &mut Binder, store: &TensorMap, x: Var) -> Var {
        let w = binder.bind(store, &format!("{}.w", self.name));
        let b = binder.bind(store, &format!("{}.b", self.name));
        tape.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn init(
        store: &mut TensorMap,
        buffers: &mut TensorMap,
        name: &str,
        channels: usize,
        momentum: f64,
        eps: f64,
    ) -> Self {
        store.insert(format!("{name}.gamma"), init::ones(&[channels]));
        store.insert(format!("{name}.beta"), init::zeros(&[channels]));
        buffers.insert(format!("{name}.running_mean"), init::zeros(&[channels]));
        buffers.insert(format!("{name}.running_var"), init::ones(&[channels]));
        BatchNorm {
            name: name.to_string(),
            channels,
            momentum,
            eps,
        }
    }

    pub fn apply(
        &self,
        tape: &Tape,
        binder: &mut Binder,
        store: &TensorMap,
        mode: &mut BnMode,
        x: Var,
    ) -> Var {
        let gamma = binder.bind(store, &format!("{}.gamma", self.name));
        let beta = binder.bind(store, &format!("{}.beta", self.name));
        match mode {
            BnMode::Train(buffers) => {
                let (y, mean, var) = tape.batch_norm_train(x, gamma, beta, self.eps);
                self.update_running(buffers, &mean, &var);
                y
            }
            BnMode::Infer(buffers) => {
                let rm = buffer_vec(buffers, &format!("{}.running_mean", self.name));
                let rv = buffer_vec(buffers, &format!("{}.running_var", self.name));
                tape.batch_norm_infer(x, gamma, beta, &rm, &rv, self.eps)
            }
        }
    }

    fn update_running(&self, buffers: &mut TensorMap, mean: &Array1<f64>, var: &Array1<f64>) {
        let m = self.momentum;
        let rm = buffers
            .get_mut(&format!("{}.running_mean", self.name))
            .expect("running mean buffer");
        ndarray::Zip::from(rm).and(mean).for_each(|r, &b| {
            *r = (1.0 - m) * *r + m * b;
        });
        let rv = buffers
            .get_mut(&format!("{}.running_var", self.name))
            .expect("running var buffer");
        ndarray::Zip::from(rv).and(var).for_each(|r, &b| {
            *r = (1.0 - m) * *r + m * b;
        });
    }
}

fn buffer_vec(buffers: &TensorMap, name: &str) -> Array1<f64> {
    buffers
        .get(name)
        .unwrap_or_else(|| panic!("buffer not found: {name}"))
        .view()
        .into_dimensionality::<ndarray::Ix1>()
        .expect("buffer rank")
        .to_owned()
}
