//! Parameterized building blocks.

use rand::Rng;

use super::params::{Init, ParamGroup, ParamId, ParamStore};
use super::tape::{Tape, Var};

/// `y = x W + b` with `W` stored as `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        group: ParamGroup,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            &[in_dim, out_dim],
            Init::XavierUniform {
                fan_in: in_dim,
                fan_out: out_dim,
            },
            group,
            rng,
        );
        let bias = Some(store.add(format!("{name}.bias"), &[out_dim], Init::Zeros, group, rng));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// A linear layer with explicit initial weight and bias values.
    #[allow(clippy::too_many_arguments)]
    pub fn with_init(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        weight_init: Init,
        bias_init: Init,
        group: ParamGroup,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), &[in_dim, out_dim], weight_init, group, rng);
        let bias = Some(store.add(format!("{name}.bias"), &[out_dim], bias_init, group, rng));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Var<'t> {
        let y = x.matmul(tape.param(store, self.weight));
        match self.bias {
            Some(b) => y + tape.param(store, b),
            None => y,
        }
    }
}

/// Feed-forward stack with ReLU between layers (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        num_layers: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(num_layers >= 1);
        let layers = (0..num_layers)
            .map(|i| {
                let a = if i == 0 { in_dim } else { hidden };
                let b = if i + 1 == num_layers { out_dim } else { hidden };
                Linear::new(store, &format!("{name}.layers.{i}"), a, b, ParamGroup::Default, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, mut x: Var<'t>) -> Var<'t> {
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(tape, store, x);
            if i < last {
                x = x.relu();
            }
        }
        x
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().unwrap()
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            gamma: store.add(
                format!("{name}.weight"),
                &[dim],
                Init::Constant(1.0),
                ParamGroup::Default,
                rng,
            ),
            beta: store.add(format!("{name}.bias"), &[dim], Init::Zeros, ParamGroup::Default, rng),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Var<'t> {
        x.layer_norm(tape.param(store, self.gamma), tape.param(store, self.beta))
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        group: ParamGroup,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let fan_out = cout * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            &[cout, cin, kernel, kernel],
            Init::XavierUniform { fan_in, fan_out },
            group,
            rng,
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), &[cout], Init::Zeros, group, rng));
        Self {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Var<'t> {
        x.conv2d(
            tape.param(store, self.weight),
            self.bias.map(|b| tape.param(store, b)),
            self.stride,
            self.padding,
        )
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub groups: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl GroupNorm {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        groups: usize,
        channels: usize,
        group: ParamGroup,
        rng: &mut impl Rng,
    ) -> Self {
        assert_eq!(channels % groups, 0);
        Self {
            groups,
            gamma: store.add(format!("{name}.weight"), &[channels], Init::Constant(1.0), group, rng),
            beta: store.add(format!("{name}.bias"), &[channels], Init::Zeros, group, rng),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Var<'t> {
        x.group_norm(self.groups, tape.param(store, self.gamma), tape.param(store, self.beta))
    }
}

/// Largest group count ≤ `preferred` that divides `channels`.
pub fn group_count(channels: usize, preferred: usize) -> usize {
    (1..=preferred.min(channels))
        .rev()
        .find(|g| channels.is_multiple_of(*g))
        .unwrap_or(1)
}
