use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffnet::{softmax_in_place, DenseLayer, ParamId, ParamStore, Tensor2};
use crate::error::{contract, Result};

/// Tolerance on routing row sums.
pub const ROUTING_ROW_TOL: f64 = 1e-9;

/// Per-layer routing logits `p^l` and their row-softmax `p̂^l`, each `m x m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingState {
    pub logits: Vec<Tensor2>,
    pub weights: Vec<Tensor2>,
}

impl RoutingState {
    pub fn from_logits(logits: Vec<Tensor2>) -> Result<Self> {
        let mut weights = Vec::with_capacity(logits.len());
        for p in &logits {
            if p.rows() != p.cols() || p.rows() == 0 {
                return Err(contract(format!("routing logits must be square, got {:?}", p.shape())));
            }
            weights.push(row_softmax(p));
        }
        Ok(Self { logits, weights })
    }

    pub fn modules(&self) -> usize {
        self.logits.first().map_or(0, Tensor2::rows)
    }

    /// Every row of every `p̂^l` is a probability vector.
    pub fn check_normalized(&self) -> Result<()> {
        self.weights.iter().try_for_each(check_routing_weights)
    }
}

pub fn row_softmax(p: &Tensor2) -> Tensor2 {
    let mut out = p.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub fn check_routing_weights(w: &Tensor2) -> Result<()> {
    for r in 0..w.rows() {
        let row = w.row(r);
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > ROUTING_ROW_TOL || row.iter().any(|v| !(*v >= 0.0 && *v <= 1.0)) {
            return Err(contract(format!("routing row {r} is not normalised: {row:?}")));
        }
    }
    Ok(())
}

/// One layer of `m` parallel modules packed into a block weight
/// `(m*out) x in`; module `j` owns rows `j*out..(j+1)*out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModularLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub modules: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl ModularLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        modules: usize,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), modules * out_dim, in_dim, in_dim, rng);
        let bias = store.add_uniform(format!("{name}.bias"), 1, modules * out_dim, in_dim, rng);
        Self {
            weight,
            bias,
            modules,
            in_dim,
            out_dim,
        }
    }
}

fn linear_vec(store: &ParamStore, layer: &DenseLayer, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != layer.in_dim {
        return Err(contract(format!(
            "layer expects {} inputs, got {}",
            layer.in_dim,
            x.len()
        )));
    }
    let w = store.get(layer.weight);
    let b = store.get(layer.bias);
    Ok((0..layer.out_dim)
        .map(|o| b.data()[o] + w.row(o).iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
        .collect())
}

fn relu_product(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| (x * y).max(0.0)).collect()
}

fn as_square(flat: Vec<f64>, m: usize) -> Tensor2 {
    Tensor2::from_vec(m, m, flat).expect("m*m routing vector")
}

fn check_features(u: &[f64], v: &[f64], d: usize) -> Result<()> {
    if u.len() != d || v.len() != d {
        return Err(contract(format!(
            "routing features have widths {} and {}, expected {d}",
            u.len(),
            v.len()
        )));
    }
    Ok(())
}

/// Base routing logits `p^1 = W^0(ReLU(u ⊙ v))`, reshaped `m x m`.
pub fn route_initial(store: &ParamStore, u: &[f64], v: &[f64], w0: &DenseLayer, m: usize) -> Result<Tensor2> {
    check_features(u, v, w0.in_dim)?;
    if w0.out_dim != m * m {
        return Err(contract(format!(
            "routing head emits {} values, need {}",
            w0.out_dim,
            m * m
        )));
    }
    let flat = linear_vec(store, w0, &relu_product(u, v))?;
    Ok(as_square(flat, m))
}

/// Next-layer routing logits `p^{l+1} = W^l(ReLU(g(p^l) ⊙ (u ⊙ v)))`.
pub fn route_next(
    store: &ParamStore,
    p_l: &Tensor2,
    u: &[f64],
    v: &[f64],
    g: &DenseLayer,
    w: &DenseLayer,
) -> Result<Tensor2> {
    let m = p_l.rows();
    if p_l.cols() != m || g.in_dim != m * m || w.out_dim != m * m || g.out_dim != w.in_dim {
        return Err(contract(format!(
            "route_next: logits {:?}, g {}->{}, W {}->{} are inconsistent",
            p_l.shape(),
            g.in_dim,
            g.out_dim,
            w.in_dim,
            w.out_dim
        )));
    }
    check_features(u, v, g.out_dim)?;
    let gp = linear_vec(store, g, p_l.data())?;
    let uv: Vec<f64> = u.iter().zip(v).map(|(a, b)| a * b).collect();
    let flat = linear_vec(store, w, &relu_product(&gp, &uv))?;
    Ok(as_square(flat, m))
}

/// `g_i^{l+1} = Σ_j p̂_ij ReLU(W_j g_j^l)` on concrete values.
///
/// `inputs` is `m x in` (one row per module), `routing` is `p̂^l`; returns `m x out`.
pub fn modular_forward(
    store: &ParamStore,
    inputs: &Tensor2,
    routing: &Tensor2,
    layer: &ModularLayer,
) -> Result<Tensor2> {
    let m = layer.modules;
    if inputs.shape() != (m, layer.in_dim) || routing.shape() != (m, m) {
        return Err(contract(format!(
            "modular_forward: inputs {:?} / routing {:?} do not fit {m} modules of width {}",
            inputs.shape(),
            routing.shape(),
            layer.in_dim
        )));
    }
    check_routing_weights(routing)?;
    let w = store.get(layer.weight);
    let b = store.get(layer.bias);
    let o = layer.out_dim;
    let mut outputs = Tensor2::zeros(m, o);
    for j in 0..m {
        for q in 0..o {
            let row = j * o + q;
            let pre = b.data()[row] + w.row(row).iter().zip(inputs.row(j)).map(|(a, c)| a * c).sum::<f64>();
            outputs.set(j, q, pre.max(0.0));
        }
    }
    let mut mixed = Tensor2::zeros(m, o);
    for i in 0..m {
        for j in 0..m {
            let pij = routing.get(i, j);
            for q in 0..o {
                let v = mixed.get(i, q) + pij * outputs.get(j, q);
                mixed.set(i, q, v);
            }
        }
    }
    Ok(mixed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(m: usize, d: usize) -> (ParamStore, DenseLayer, DenseLayer, DenseLayer) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let w0 = DenseLayer::new(&mut store, "w0", d, m * m, &mut rng);
        let g = DenseLayer::new(&mut store, "g", m * m, d, &mut rng);
        let w = DenseLayer::new(&mut store, "w", d, m * m, &mut rng);
        (store, w0, g, w)
    }

    #[test]
    fn zero_state_feature_gives_uniform_routing() {
        let (mut store, w0, g, w) = setup(3, 4);
        // With zero biases, zero ReLU input yields zero logits.
        for id in [w0.bias, w.bias] {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let u = [0.0; 4];
        let v = [0.3, -0.2, 0.5, 1.0];
        let p1 = route_initial(&store, &u, &v, &w0, 3).unwrap();
        assert!(p1.data().iter().all(|x| *x == 0.0));
        let p2 = route_next(&store, &p1, &u, &v, &g, &w).unwrap();
        let st = RoutingState::from_logits(vec![p1, p2]).unwrap();
        for wts in &st.weights {
            assert!(wts.data().iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));
        }
    }

    #[test]
    fn single_module_routing_is_one() {
        let (store, w0, _, _) = setup(1, 3);
        let p = route_initial(&store, &[1.0, 2.0, 3.0], &[0.5, -1.0, 2.0], &w0, 1).unwrap();
        let st = RoutingState::from_logits(vec![p]).unwrap();
        assert_eq!(st.weights[0].data(), &[1.0]);
    }

    #[test]
    fn shape_errors() {
        let (store, w0, g, w) = setup(2, 3);
        assert!(route_initial(&store, &[1.0; 2], &[1.0; 3], &w0, 2).is_err());
        assert!(route_initial(&store, &[1.0; 3], &[1.0; 3], &w0, 3).is_err());
        let bad = Tensor2::zeros(3, 3);
        assert!(route_next(&store, &bad, &[1.0; 3], &[1.0; 3], &g, &w).is_err());
    }

    #[test]
    fn modular_forward_mixtures() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let layer = ModularLayer::new(&mut store, "mod", 2, 3, 2, &mut rng);
        let x = Tensor2::from_rows(&[[0.5, -0.1, 0.9], [1.0, 0.2, -0.4]]).unwrap();

        let ident = Tensor2::identity(2);
        let hard = modular_forward(&store, &x, &ident, &layer).unwrap();
        let half = Tensor2::filled(2, 2, 0.5);
        let avg = modular_forward(&store, &x, &half, &layer).unwrap();
        for q in 0..2 {
            let expect = 0.5 * (hard.get(0, q) + hard.get(1, q));
            assert!((avg.get(0, q) - expect).abs() < 1e-15);
            assert!((avg.get(1, q) - expect).abs() < 1e-15);
        }

        let unnormalised = Tensor2::filled(2, 2, 0.7);
        assert!(modular_forward(&store, &x, &unnormalised, &layer).is_err());
    }
}
