use rand::Rng;
use serde::{Deserialize, Serialize};

use super::routing::{ModularLayer, RoutingState};
use crate::diffnet::{DenseLayer, ParamStore, Tape, Tensor2, Var};
use crate::error::{contract, Result};

/// Shape of one soft-modular network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    pub input_dim: usize,
    pub n_skills: usize,
    pub width: usize,
    pub modules: usize,
    pub layers: usize,
    pub output_dim: usize,
    pub soft_modularization: bool,
}

/// Skill-conditioned network whose hidden layers are banks of modules mixed
/// by a routing network fed with `u = f1(x)` and `v = f2(onehot(z))`.
///
/// The input is `[x, onehot(z)]` through a base layer, copied to every
/// module, passed through `layers` routed module banks, averaged over
/// modules and mapped by a linear head. With soft modularization off there
/// is a single module and no routing, which is a plain conditional MLP.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SoftModularNet {
    pub shape: NetShape,
    base: DenseLayer,
    f1: DenseLayer,
    f2: DenseLayer,
    route0: DenseLayer,
    route_g: Vec<DenseLayer>,
    route_w: Vec<DenseLayer>,
    banks: Vec<ModularLayer>,
    head: DenseLayer,
}

/// Routing probabilities recorded during a forward pass, `B x m²` per layer.
pub struct NetOutput {
    pub out: Var,
    pub routing_logits: Vec<Var>,
    pub routing: Vec<Var>,
}

impl SoftModularNet {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, shape: NetShape, rng: &mut R) -> Result<Self> {
        if shape.modules == 0 || shape.layers == 0 || shape.width == 0 || shape.n_skills == 0 {
            return Err(contract("network dimensions must be positive"));
        }
        let m = shape.effective_modules();
        let d = shape.width;
        let base = DenseLayer::new(store, &format!("{name}.base"), shape.input_dim + shape.n_skills, d, rng);
        let f1 = DenseLayer::new(store, &format!("{name}.f1"), shape.input_dim, d, rng);
        let f2 = DenseLayer::new(store, &format!("{name}.f2"), shape.n_skills, d, rng);
        let route0 = DenseLayer::new(store, &format!("{name}.route0"), d, m * m, rng);
        let mut route_g = Vec::new();
        let mut route_w = Vec::new();
        for l in 1..shape.layers {
            route_g.push(DenseLayer::new(store, &format!("{name}.route{l}.g"), m * m, d, rng));
            route_w.push(DenseLayer::new(store, &format!("{name}.route{l}.w"), d, m * m, rng));
        }
        let banks = (0..shape.layers)
            .map(|l| ModularLayer::new(store, &format!("{name}.bank{l}"), m, d, d, rng))
            .collect();
        let head = DenseLayer::new(store, &format!("{name}.head"), d, shape.output_dim, rng);
        Ok(Self {
            shape,
            base,
            f1,
            f2,
            route0,
            route_g,
            route_w,
            banks,
            head,
        })
    }

    pub fn head(&self) -> &DenseLayer {
        &self.head
    }

    /// Forward a batch: `x: B x input_dim`, `onehot: B x n_skills`.
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, onehot: Var) -> Result<NetOutput> {
        let s = self.shape;
        let m = s.effective_modules();
        let (xr, xc) = tape.value(x).shape();
        let (or, oc) = tape.value(onehot).shape();
        if xc != s.input_dim || oc != s.n_skills || xr != or {
            return Err(contract(format!(
                "network input {xr}x{xc} / skills {or}x{oc}, expected width {} and {} skills",
                s.input_dim, s.n_skills
            )));
        }
        let joined = tape.concat_cols(x, onehot)?;
        let e = self.base.forward(tape, joined)?;
        let e = tape.relu(e);

        let mut routing_logits = Vec::new();
        let mut routing = Vec::new();
        if s.soft_modularization {
            let u = self.f1.forward(tape, x)?;
            let v = self.f2.forward(tape, onehot)?;
            let uv = tape.mul(u, v)?;
            let act = tape.relu(uv);
            let mut p = self.route0.forward(tape, act)?;
            routing_logits.push(p);
            routing.push(tape.softmax_groups(p, m)?);
            for (g, w) in self.route_g.iter().zip(&self.route_w) {
                let gp = g.forward(tape, p)?;
                let gated = tape.mul(gp, uv)?;
                let act = tape.relu(gated);
                p = w.forward(tape, act)?;
                routing_logits.push(p);
                routing.push(tape.softmax_groups(p, m)?);
            }
        }

        let mut h = if m > 1 { tape.tile_cols(e, m) } else { e };
        for (l, bank) in self.banks.iter().enumerate() {
            let w = tape.param(bank.weight);
            let b = tape.param(bank.bias);
            let y = tape.block_linear(h, w, b, m)?;
            let y = tape.relu(y);
            h = if s.soft_modularization {
                tape.mix(routing[l], y, m)?
            } else {
                y
            };
        }
        let pooled = if m > 1 { tape.mean_blocks(h, m)? } else { h };
        let out = self.head.forward(tape, pooled)?;
        Ok(NetOutput {
            out,
            routing_logits,
            routing,
        })
    }

    /// Routing state for a single `(x, z)`; `None` without soft modularization.
    pub fn routing_state(&self, store: &ParamStore, x: &[f64], z: usize) -> Result<Option<RoutingState>> {
        if !self.shape.soft_modularization {
            return Ok(None);
        }
        let m = self.shape.effective_modules();
        let mut tape = Tape::new(store);
        let xv = tape.leaf(Tensor2::row_vector(x));
        let zv = tape.leaf(Tensor2::one_hot(&[z], self.shape.n_skills)?);
        let out = self.forward(&mut tape, xv, zv)?;
        let logits = out
            .routing_logits
            .iter()
            .map(|p| Tensor2::from_vec(m, m, tape.value(*p).data().to_vec()))
            .collect::<Result<Vec<_>>>()?;
        RoutingState::from_logits(logits).map(Some)
    }

    /// Layers used by the routing recurrence, in order: `f1`, `f2`, `W^0`, then `(g^l, W^l)` pairs.
    pub fn routing_layers(&self) -> (DenseLayer, DenseLayer, DenseLayer, Vec<(DenseLayer, DenseLayer)>) {
        let pairs = self.route_g.iter().copied().zip(self.route_w.iter().copied()).collect();
        (self.f1, self.f2, self.route0, pairs)
    }

    pub fn banks(&self) -> &[ModularLayer] {
        &self.banks
    }

    pub fn base(&self) -> &DenseLayer {
        &self.base
    }
}

impl NetShape {
    /// Module count actually built: one when soft modularization is off.
    pub fn effective_modules(&self) -> usize {
        if self.soft_modularization {
            self.modules
        } else {
            1
        }
    }
}
