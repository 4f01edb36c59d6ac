//! Parameter storage and the layers built on it.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{AutodiffError, ConvGeom, Gradients, Tape, Tensor, Var};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Weight initialisation schemes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`, for layers feeding a ReLU.
    KaimingUniform,
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    XavierUniform,
}

impl Init {
    fn bound(self, fan_in: usize, fan_out: usize) -> f64 {
        match self {
            Init::KaimingUniform => (6.0 / fan_in as f64).sqrt(),
            Init::XavierUniform => (6.0 / (fan_in + fan_out) as f64).sqrt(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(
        self,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Tensor {
        let b = self.bound(fan_in, fan_out);
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-b..=b)).collect();
        Tensor::new(shape.to_vec(), data).expect("sampled length matches shape")
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every parameter on `tape` as a borrowed leaf.
    pub fn bind<'p>(&'p self, tape: &mut Tape<'p>) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.param(t)).collect())
    }

    /// Gradients for every parameter in store order, zeros where unused.
    pub fn collect_grads(&self, bound: &Bound, grads: &Gradients) -> Vec<Tensor> {
        self.tensors
            .iter()
            .zip(&bound.0)
            .map(|(t, &v)| grads.get_or_zeros(v, t))
            .collect()
    }

    pub fn copy_from(&mut self, other: &ParamStore) {
        self.tensors.clone_from(&other.tensors);
    }

    pub fn to_json(&self) -> Result<String, AutodiffError> {
        let entries: Vec<ManifestEntry> = self
            .names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| ManifestEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect();
        Ok(serde_json::to_string(&entries)?)
    }

    /// Replaces values from a manifest; names and shapes must match exactly.
    pub fn load_json(&mut self, s: &str) -> Result<(), AutodiffError> {
        let entries: Vec<ManifestEntry> = serde_json::from_str(s)?;
        if entries.len() != self.tensors.len() {
            return Err(AutodiffError::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.tensors.len(),
                entries.len()
            )));
        }
        let mut fresh = Vec::with_capacity(entries.len());
        for (e, (name, t)) in entries
            .into_iter()
            .zip(self.names.iter().zip(&self.tensors))
        {
            if &e.name != name || e.shape != t.shape() {
                return Err(AutodiffError::Checkpoint(format!(
                    "entry {}{:?} does not match {}{:?}",
                    e.name,
                    e.shape,
                    name,
                    t.shape()
                )));
            }
            fresh.push(Tensor::new(e.shape, e.data)?);
        }
        self.tensors = fresh;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), AutodiffError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<(), AutodiffError> {
        self.load_json(&std::fs::read_to_string(path)?)
    }
}

/// Tape handles for every parameter of a store, in store order.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

/// Fully connected layer; the weight is stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init.sample(&[fan_in, fan_out], fan_in, fan_out, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, b: &Bound, x: Var) -> Result<Var, AutodiffError> {
        tape.linear(x, b.var(self.weight), b.var(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub geom: ConvGeom,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        geom: ConvGeom,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let (fi, fo) = (cin * k * k, cout * k * k);
        let kernel = store.add(
            format!("{name}.kernel"),
            init.sample(&[cout, cin, k, k], fi, fo, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { kernel, bias, geom }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, b: &Bound, x: Var) -> Result<Var, AutodiffError> {
        let y = tape.conv2d(x, b.var(self.kernel), self.geom)?;
        tape.add_channel_bias(y, b.var(self.bias))
    }
}

/// Transposed convolution; the kernel is stored `[cin, cout, k, k]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub geom: ConvGeom,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        geom: ConvGeom,
        init: Init,
        rng: &mut R,
    ) -> Self {
        // Each output pixel gathers from cin * k * k / stride^2 taps on average;
        // the plain cin * k * k fan-in keeps the bound conservative.
        let (fi, fo) = (cin * k * k, cout * k * k);
        let kernel = store.add(
            format!("{name}.kernel"),
            init.sample(&[cin, cout, k, k], fi, fo, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { kernel, bias, geom }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, b: &Bound, x: Var) -> Result<Var, AutodiffError> {
        let y = tape.conv_transpose2d(x, b.var(self.kernel), self.geom)?;
        tape.add_channel_bias(y, b.var(self.bias))
    }
}

/// Stack of linear layers with ReLU between them and a linear head.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `sizes` lists every width, input first and output last.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        sizes: &[usize],
        rng: &mut R,
    ) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output widths");
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let init = if i == last {
                    Init::XavierUniform
                } else {
                    Init::KaimingUniform
                };
                Linear::new(store, &format!("{name}.{i}"), w[0], w[1], init, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").fan_out
    }

    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        b: &Bound,
        mut x: Var,
    ) -> Result<Var, AutodiffError> {
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(tape, b, x)?;
            if i < last {
                x = tape.relu(x);
            }
        }
        Ok(x)
    }

    /// Plain forward pass outside any tape, for acting and evaluation.
    pub fn eval(&self, store: &ParamStore, input: &Tensor) -> Result<Tensor, AutodiffError> {
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let x = tape.constant(input.clone());
        let y = self.forward(&mut tape, &b, x)?;
        Ok(tape.value(y).clone())
    }
}
