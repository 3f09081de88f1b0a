//! Layers built on the tape: linear maps, ReLU MLPs, inverted dropout and the
//! tissue-conditioned FiLM adaptor.

use rand::Rng;

use crate::math::{Matrix, LN_EPS};
use crate::params::{kaiming_uniform, standard_normal, ParamStore};
use crate::tape::{Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: usize,
    pub bias: Option<usize>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        group: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            group,
            kaiming_uniform(rng, fan_in, fan_out),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), group, Matrix::zeros(1, fan_out)));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    /// Same shape, zero weights.
    pub fn zeroed(store: &mut ParamStore, name: &str, group: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), group, Matrix::zeros(fan_in, fan_out));
        let bias = Some(store.add(format!("{name}.bias"), group, Matrix::zeros(1, fan_out)));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = store.var(tape, self.weight);
        let y = tape.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = store.var(tape, b);
                tape.add_bias(y, b)
            }
            None => y,
        }
    }

    pub fn reinit(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        *store.value_mut(self.weight) = kaiming_uniform(rng, self.fan_in, self.fan_out);
        if let Some(b) = self.bias {
            *store.value_mut(b) = Matrix::zeros(1, self.fan_out);
        }
    }
}

/// Inverted-dropout masks for one forward pass, one per hidden layer.
pub struct DropoutMasks(pub Vec<Matrix>);

/// Keep-mask scaled by `1/(1−rate)`; all ones when `rate` is 0.
pub fn dropout_mask(rng: &mut impl Rng, rows: usize, cols: usize, rate: f64) -> Matrix {
    if rate <= 0.0 {
        return Matrix::filled(rows, cols, 1.0);
    }
    let keep = 1.0 / (1.0 - rate);
    let data = (0..rows * cols)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}

/// Linear layers with ReLU between them and no activation on the output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        group: &str,
        widths: &[usize],
    ) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, rng, &format!("{name}.{i}"), group, w[0], w[1], true))
            .collect();
        Self { layers }
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(|l| l.fan_out)
            .collect()
    }

    /// Forward pass; `masks`, when given, multiply each hidden activation.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, masks: Option<&DropoutMasks>) -> Var {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h);
            if i < last {
                h = tape.relu(h);
                if let Some(m) = masks.and_then(|m| m.0.get(i)) {
                    let m = tape.constant(m.clone());
                    h = tape.mul(h, m);
                }
            }
        }
        h
    }

    pub fn masks(&self, rng: &mut impl Rng, rows: usize, rate: f64) -> DropoutMasks {
        DropoutMasks(
            self.hidden_widths()
                .into_iter()
                .map(|w| dropout_mask(rng, rows, w, rate))
                .collect(),
        )
    }

    pub fn reinit(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for l in &self.layers {
            l.reinit(store, rng);
        }
    }
}

/// Tissue embedding followed by a two-layer MLP producing `(γ, β)`; the output
/// layer starts at zero so the modulation starts as plain LayerNorm.
#[derive(Clone, Debug, PartialEq)]
pub struct FilmAdaptor {
    pub embedding: usize,
    pub hidden: Linear,
    pub out: Linear,
    pub dim: usize,
    pub tissues: usize,
}

impl FilmAdaptor {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        tissues: usize,
        embed_dim: usize,
        hidden: usize,
        dim: usize,
    ) -> Self {
        let embedding = store.add(
            format!("{name}.embedding"),
            "film",
            standard_normal(rng, tissues, embed_dim),
        );
        let hidden_layer = Linear::new(
            store,
            rng,
            &format!("{name}.phi.0"),
            "film",
            embed_dim,
            hidden,
            true,
        );
        let out = Linear::zeroed(store, &format!("{name}.phi.1"), "film", hidden, 2 * dim);
        Self {
            embedding,
            hidden: hidden_layer,
            out,
            dim,
            tissues,
        }
    }

    /// `(γ, β)` for each row's tissue, each `B×dim`.
    pub fn gamma_beta(&self, tape: &mut Tape, store: &ParamStore, tissues: &[usize]) -> (Var, Var) {
        let table = store.var(tape, self.embedding);
        let e = tape.gather_rows(table, tissues);
        let h = self.hidden.forward(tape, store, e);
        let h = tape.relu(h);
        let gb = self.out.forward(tape, store, h);
        let gamma = tape.slice_cols(gb, 0, self.dim);
        let beta = tape.slice_cols(gb, self.dim, 2 * self.dim);
        (gamma, beta)
    }

    /// `LN(h) ⊙ (1 + γ_t) + β_t`.
    pub fn modulate(&self, tape: &mut Tape, store: &ParamStore, h: Var, tissues: &[usize]) -> Var {
        let (gamma, beta) = self.gamma_beta(tape, store, tissues);
        let normed = tape.layer_norm(h, LN_EPS);
        let scale = tape.add_scalar(gamma, 1.0);
        let scaled = tape.mul(normed, scale);
        tape.add(scaled, beta)
    }
}
