//! Linear layers: plain, decay-wrapped with low-rank adapters, and
//! adapter-only.
//!
//! A wrapped layer computes `F = lambda * (W x + b) + (B (A x) + C)` with
//! `W`/`b` frozen and `A`/`B`/`C` trainable. `A` starts Gaussian, `B` and
//! `C` start at zero, so at `lambda = 1` the layer reproduces the base
//! layer exactly. The frozen bias decays with the same `lambda` as the
//! weight, so `lambda = 0` removes the base layer entirely; from there the
//! layer computes the same arithmetic as its exported adapter-only form.
//!
//! The adapter path is two chained products (`x A^T` then `B^T`), never a
//! materialized `B A` matrix, matching the compressed cost model.

use crate::graph::{Tape, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Default standard deviation for the Gaussian init of `A`.
pub const DEFAULT_ADAPTER_INIT_STD: f64 = 0.02;

/// Adapter parameter count for one wrapped layer: `r*d_in + d_out*r + d_out`.
pub fn adapter_param_count(d_in: usize, d_out: usize, rank: usize) -> u64 {
    (rank * d_in + d_out * rank + d_out) as u64
}

/// An ordinary dense layer `x W^T + b` backed by store entries.
#[derive(Debug, Clone)]
pub struct PlainLinear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
    pub index: usize,
}

impl PlainLinear {
    pub fn create(
        store: &mut ParamStore,
        index: usize,
        w: Tensor,
        b: Tensor,
        trainable: bool,
    ) -> Self {
        let (d_out, d_in) = (w.rows(), w.cols());
        assert_eq!(b.len(), d_out, "bias length must match output width");
        let w = store.add(format!("layer.{index}.W"), w, trainable);
        let b = store.add(format!("layer.{index}.b"), b, trainable);
        Self {
            w,
            b,
            d_in,
            d_out,
            index,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let xw = tape.matmul_nt(x, w);
        tape.add_bias(xw, b)
    }
}

/// Frozen base weight/bias plus trainable rank-`r` adapters.
#[derive(Debug, Clone)]
pub struct PcLoraLinear {
    pub base_w: ParamId,
    pub base_b: ParamId,
    /// Down projection, `[r, d_in]`, Gaussian at init.
    pub a: ParamId,
    /// Up projection, `[d_out, r]`, zero at init.
    pub b: ParamId,
    /// Adapter bias, `[d_out]`, zero at init.
    pub c: ParamId,
    pub rank: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub index: usize,
}

impl PcLoraLinear {
    /// Wrap a base layer: freeze copies of `w`/`b`, seed `A`, zero `B`/`C`.
    ///
    /// The wrapped layer is functionally identical to the base layer at
    /// `lambda = 1`. A rank above `min(d_in, d_out)` is accepted with a
    /// warning; the arithmetic still holds, the rank just stops being a
    /// compression.
    pub fn wrap(
        store: &mut ParamStore,
        index: usize,
        w: &Tensor,
        b: &Tensor,
        rank: usize,
        init_std: f64,
        seed: u64,
    ) -> Self {
        assert!(rank >= 1, "adapter rank must be at least 1");
        let (d_out, d_in) = (w.rows(), w.cols());
        assert_eq!(b.len(), d_out, "bias length must match output width");
        if rank > d_in.min(d_out) {
            log::warn!(
                "layer {index}: rank {rank} exceeds min(d_in, d_out) = {}; adapters are larger than the base layer",
                d_in.min(d_out)
            );
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, init_std).expect("valid init std");
        let a_data: Vec<f64> = (0..rank * d_in).map(|_| normal.sample(&mut rng)).collect();

        let base_w = store.add(format!("layer.{index}.W"), w.clone(), false);
        let base_b = store.add(format!("layer.{index}.b"), b.clone(), false);
        let a = store.add(
            format!("layer.{index}.A"),
            Tensor::from_vec(vec![rank, d_in], a_data),
            true,
        );
        let b_up = store.add(
            format!("layer.{index}.B"),
            Tensor::zeros(vec![d_out, rank]),
            true,
        );
        let c = store.add(format!("layer.{index}.C"), Tensor::zeros(vec![d_out]), true);
        Self {
            base_w,
            base_b,
            a,
            b: b_up,
            c,
            rank,
            d_in,
            d_out,
            index,
        }
    }

    /// Decayed forward pass; returns the layer output `F` and the adapter
    /// output `L` (the feature-collection tap).
    ///
    /// At `lambda = 0` the frozen path is skipped outright, so the output
    /// is structurally independent of `W`/`b`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, lambda: f64) -> (Var, Var) {
        assert!(
            (0.0..=1.0).contains(&lambda),
            "lambda {lambda} outside [0, 1]"
        );
        let a = tape.param(store, self.a);
        let b_up = tape.param(store, self.b);
        let c = tape.param(store, self.c);
        let xa = tape.matmul_nt(x, a);
        let xab = tape.matmul_nt(xa, b_up);
        let adapter_out = tape.add_bias(xab, c);
        if lambda == 0.0 {
            return (adapter_out, adapter_out);
        }
        let w = tape.param(store, self.base_w);
        let b = tape.param(store, self.base_b);
        let xw = tape.matmul_nt(x, w);
        let base = tape.add_bias(xw, b);
        let decayed = tape.scale(base, lambda);
        let f = tape.add(decayed, adapter_out);
        (f, adapter_out)
    }

    /// Exactly `{A, B, C}`; never the frozen `W`/`b`.
    pub fn trainable_parameters(&self) -> [ParamId; 3] {
        [self.a, self.b, self.c]
    }

    pub fn adapter_count(&self) -> u64 {
        adapter_param_count(self.d_in, self.d_out, self.rank)
    }

    /// Copy the adapter triple into `dst`, dropping the frozen base.
    pub fn export(&self, src: &ParamStore, dst: &mut ParamStore) -> AdapterLinear {
        let index = self.index;
        let a = dst.add(
            format!("layer.{index}.A"),
            src.value(self.a).clone(),
            true,
        );
        let b = dst.add(
            format!("layer.{index}.B"),
            src.value(self.b).clone(),
            true,
        );
        let c = dst.add(
            format!("layer.{index}.C"),
            src.value(self.c).clone(),
            true,
        );
        AdapterLinear {
            a,
            b,
            c,
            rank: self.rank,
            d_in: self.d_in,
            d_out: self.d_out,
            index,
        }
    }
}

/// The compressed end state: `B (A x) + C`, nothing else.
#[derive(Debug, Clone)]
pub struct AdapterLinear {
    pub a: ParamId,
    pub b: ParamId,
    pub c: ParamId,
    pub rank: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub index: usize,
}

impl AdapterLinear {
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let a = tape.param(store, self.a);
        let b = tape.param(store, self.b);
        let c = tape.param(store, self.c);
        let xa = tape.matmul_nt(x, a);
        let xab = tape.matmul_nt(xa, b);
        tape.add_bias(xab, c)
    }

    pub fn param_count(&self) -> u64 {
        adapter_param_count(self.d_in, self.d_out, self.rank)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_layer(
        d_in: usize,
        d_out: usize,
        seed: u64,
    ) -> (ParamStore, PcLoraLinear, Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Tensor::from_vec(
            vec![d_out, d_in],
            (0..d_out * d_in).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let b = Tensor::from_vec(
            vec![d_out],
            (0..d_out).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        );
        let mut store = ParamStore::new();
        let layer = PcLoraLinear::wrap(&mut store, 0, &w, &b, 2, DEFAULT_ADAPTER_INIT_STD, seed);
        (store, layer, w, b)
    }

    fn base_forward(w: &Tensor, b: &Tensor, x: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(w.clone());
        let bv = tape.constant(b.clone());
        let xw = tape.matmul_nt(xv, wv);
        let out = tape.add_bias(xw, bv);
        tape.value(out).clone()
    }

    #[test]
    fn fresh_wrap_matches_base_layer_at_lambda_one() {
        let (store, layer, w, b) = random_layer(4, 3, 42);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let x = Tensor::from_vec(vec![2, 4], (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect());
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let (f, _) = layer.forward(&mut tape, &store, xv, 1.0);
            let expect = base_forward(&w, &b, &x);
            assert_eq!(tape.value(f).max_abs_diff(&expect), 0.0);
        }
    }

    #[test]
    fn same_seed_gives_same_adapter_init() {
        let (store1, l1, ..) = random_layer(5, 3, 9);
        let (store2, l2, ..) = random_layer(5, 3, 9);
        assert_eq!(store1.value(l1.a).data(), store2.value(l2.a).data());
    }

    #[test]
    fn adapter_parameter_count_formula() {
        assert_eq!(adapter_param_count(4, 3, 2), 17);
        assert_eq!(adapter_param_count(768, 768, 32), 49_920);
        let (_, layer, ..) = random_layer(4, 3, 0);
        assert_eq!(layer.trainable_parameters().len(), 3);
    }

    #[test]
    fn lambda_zero_ignores_base_weights() {
        let (mut store, layer, ..) = random_layer(3, 3, 7);
        // give the adapters some nonzero content first
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for id in layer.trainable_parameters() {
            let n = store.value(id).len();
            let shape = store.value(id).shape().to_vec();
            store
                .set_value(
                    id,
                    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()),
                )
                .unwrap();
        }
        let x = Tensor::from_vec(vec![1, 3], vec![0.3, -0.7, 1.1]);
        let out = |store: &ParamStore| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let (f, _) = layer.forward(&mut tape, store, xv, 0.0);
            tape.value(f).clone()
        };
        let before = out(&store);
        // junk the frozen base
        store
            .set_value(layer.base_w, Tensor::from_vec(vec![3, 3], vec![999.0; 9]))
            .unwrap();
        store
            .set_value(layer.base_b, Tensor::from_vec(vec![3], vec![-123.0; 3]))
            .unwrap();
        let after = out(&store);
        assert_eq!(before.data(), after.data());
    }

    #[test]
    fn hand_arithmetic_oracle() {
        // W = I2, b = 0, A = [[1, 1]], B = [[1], [1]], C = [1, 1],
        // x = [2, 3], lambda = 0.5 -> D = [1, 1.5], L = [6, 6], F = [7, 7.5]
        let mut store = ParamStore::new();
        let w = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b = Tensor::zeros(vec![2]);
        let layer = PcLoraLinear::wrap(&mut store, 0, &w, &b, 1, 0.02, 0);
        store
            .set_value(layer.a, Tensor::from_vec(vec![1, 2], vec![1.0, 1.0]))
            .unwrap();
        store
            .set_value(layer.b, Tensor::from_vec(vec![2, 1], vec![1.0, 1.0]))
            .unwrap();
        store
            .set_value(layer.c, Tensor::from_vec(vec![2], vec![1.0, 1.0]))
            .unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![1, 2], vec![2.0, 3.0]));
        let (f, l) = layer.forward(&mut tape, &store, x, 0.5);
        assert_eq!(tape.value(l).data(), &[6.0, 6.0]);
        assert_eq!(tape.value(f).data(), &[7.0, 7.5]);
    }

    #[test]
    fn no_gradient_leaks_into_frozen_base() {
        let (store, layer, ..) = random_layer(4, 3, 3);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![2, 4], vec![0.5; 8]));
        let (f, _) = layer.forward(&mut tape, &store, x, 0.7);
        let sq = tape.mul(f, f);
        let root = tape.sum_all(sq);
        tape.backward(root);
        let mut check = store.clone();
        tape.write_grads(&mut check);
        assert!(check.entry(layer.base_w).grad.is_none());
        assert!(check.entry(layer.base_b).grad.is_none());
        for id in layer.trainable_parameters() {
            assert!(check.entry(id).grad.is_some(), "adapter wants gradient");
        }
    }

    #[test]
    fn export_matches_lambda_zero_exactly() {
        let (mut store, layer, ..) = random_layer(4, 3, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for id in layer.trainable_parameters() {
            let n = store.value(id).len();
            let shape = store.value(id).shape().to_vec();
            store
                .set_value(
                    id,
                    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()),
                )
                .unwrap();
        }
        let mut exported_store = ParamStore::new();
        let exported = layer.export(&store, &mut exported_store);
        assert_eq!(exported.param_count(), adapter_param_count(4, 3, 2));
        for _ in 0..100 {
            let x = Tensor::from_vec(vec![1, 4], (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect());
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let (f, _) = layer.forward(&mut tape, &store, xv, 0.0);
            let mut tape2 = Tape::new();
            let xv2 = tape2.constant(x);
            let g = exported.forward(&mut tape2, &exported_store, xv2);
            assert_eq!(tape.value(f).max_abs_diff(tape2.value(g)), 0.0);
        }
    }

    #[test]
    #[should_panic(expected = "outside [0, 1]")]
    fn lambda_out_of_range_panics() {
        let (store, layer, ..) = random_layer(2, 2, 0);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vec![1, 2], vec![1.0, 1.0]));
        layer.forward(&mut tape, &store, x, 1.5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn forward_is_linear_in_lambda(lambda in 0.0f64..=1.0, seed in 0u64..500) {
            let (mut store, layer, w, b) = random_layer(3, 4, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
            for id in layer.trainable_parameters() {
                let n = store.value(id).len();
                let shape = store.value(id).shape().to_vec();
                store.set_value(
                    id,
                    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()),
                ).unwrap();
            }
            let x = Tensor::from_vec(vec![1, 3], (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect());
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let (f_lambda, _) = layer.forward(&mut tape, &store, xv, lambda);
            let (f_zero, _) = {
                let xv = tape.constant(x.clone());
                layer.forward(&mut tape, &store, xv, 0.0)
            };
            let base = base_forward(&w, &b, &x);
            for j in 0..4 {
                let expect = lambda * base.data()[j] + tape.value(f_zero).data()[j];
                prop_assert!((tape.value(f_lambda).data()[j] - expect).abs() < 1e-12);
            }
        }
    }
}
