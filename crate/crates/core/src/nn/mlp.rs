//! Dense multilayer perceptron with hand-written reverse-mode gradients.
//!
//! Parameters live in one flat vector: for each layer the row-major
//! `out x in` weight block followed by the `out` biases. Hidden layers apply
//! the chosen activation; the output layer is linear.
//!
//! Layers flagged for spectral normalization use the effective weight
//! `W / σ` with `σ = uᵀ W v`, where `(u, v)` are persistent power-iteration
//! vectors held fixed between [`Mlp::refresh_spectral`] calls. Gradients are
//! exact for that map, including the dependence of `σ` on `W`.
//!
//! Besides the usual backward pass, [`Mlp::backward_tangent`] differentiates
//! the directional input derivative `wᵀ J(x) c` with respect to the
//! parameters. That is what a gradient penalty on `‖∇ₓ f‖` needs.

use serde::{Deserialize, Serialize};

use super::checkpoint::{Blob, Section};
use super::spectral::{bilinear, power_iterate, PowerIterState};
use crate::error::{Error, Result};
use crate::rng::{standard_normal, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// First and second derivatives, expressed through the activation value.
    fn derivs(self, a: f64) -> (f64, f64) {
        match self {
            Activation::Tanh => {
                let d = 1.0 - a * a;
                (d, -2.0 * a * d)
            }
            Activation::Relu => (if a > 0.0 { 1.0 } else { 0.0 }, 0.0),
        }
    }

    fn code(self) -> f64 {
        match self {
            Activation::Tanh => 0.0,
            Activation::Relu => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
    offsets: Vec<usize>,
    spectral: Vec<Option<PowerIterState>>,
    /// `1/σ` for normalized layers, 1 otherwise.
    scale: Vec<f64>,
}

/// Activations recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct Cache {
    acts: Vec<Vec<f64>>,
}

impl Cache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("cache holds at least the input")
    }
}

/// Primal and tangent activations for the directional derivative `J(x) c`.
#[derive(Debug, Clone)]
pub struct TangentCache {
    acts: Vec<Vec<f64>>,
    tangents: Vec<Vec<f64>>,
    /// Pre-activation tangents `W̄ t_{l-1}`.
    pre_tangents: Vec<Vec<f64>>,
}

impl TangentCache {
    /// `J(x) c`.
    pub fn output_tangent(&self) -> &[f64] {
        self.tangents.last().expect("tangent cache is never empty")
    }

    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("tangent cache is never empty")
    }
}

/// Gradient accumulator. Weight slots hold gradients with respect to the
/// effective weights until [`Mlp::finish`] maps them back to raw parameters.
#[derive(Debug, Clone)]
pub struct GradBuffer {
    flat: Vec<f64>,
}

impl GradBuffer {
    pub fn scale(&mut self, k: f64) {
        self.flat.iter_mut().for_each(|g| *g *= k);
    }
}

impl Mlp {
    /// Random initialization: weights `N(0, 1/fan_in)`, zero biases.
    pub fn new(sizes: &[usize], activation: Activation, rng: &mut Rng) -> Result<Self> {
        let mut mlp = Self::zeros(sizes, activation)?;
        for l in 0..mlp.n_layers() {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let std = (1.0 / fan_in as f64).sqrt();
            let off = mlp.offsets[l];
            for w in &mut mlp.params[off..off + fan_in * fan_out] {
                *w = std * standard_normal(rng);
            }
        }
        Ok(mlp)
    }

    pub fn zeros(sizes: &[usize], activation: Activation) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::param("an MLP needs at least an input and an output width, all positive"));
        }
        let mut offsets = Vec::with_capacity(sizes.len() - 1);
        let mut total = 0;
        for w in sizes.windows(2) {
            offsets.push(total);
            total += w[0] * w[1] + w[1];
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            activation,
            params: vec![0.0; total],
            offsets,
            spectral: vec![None; sizes.len() - 1],
            scale: vec![1.0; sizes.len() - 1],
        })
    }

    /// Single linear layer with the given weight matrix and bias.
    pub fn linear(weight: &[f64], bias: &[f64]) -> Result<Self> {
        let out = bias.len();
        if out == 0 || weight.len() % out != 0 {
            return Err(Error::input("weight length must be a multiple of the bias length"));
        }
        let mut mlp = Self::zeros(&[weight.len() / out, out], Activation::Tanh)?;
        mlp.params[..weight.len()].copy_from_slice(weight);
        mlp.params[weight.len()..].copy_from_slice(bias);
        Ok(mlp)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("sizes has at least two entries")
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::input("parameter vector has the wrong length"));
        }
        self.params.copy_from_slice(params);
        self.recompute_sigma();
        Ok(())
    }

    /// Mutates parameters in place, then re-derives spectral scales.
    pub fn update_params(&mut self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.params);
        self.recompute_sigma();
    }

    /// Multiplies the output layer's weights and bias by `k`.
    pub fn scale_output_layer(&mut self, k: f64) {
        let l = self.n_layers() - 1;
        let off = self.offsets[l];
        let len = self.sizes[l] * self.sizes[l + 1] + self.sizes[l + 1];
        self.update_params(|p| p[off..off + len].iter_mut().for_each(|x| *x *= k));
    }

    pub fn weight(&self, layer: usize) -> &[f64] {
        let off = self.offsets[layer];
        &self.params[off..off + self.sizes[layer] * self.sizes[layer + 1]]
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        let off = self.offsets[layer] + self.sizes[layer] * self.sizes[layer + 1];
        &self.params[off..off + self.sizes[layer + 1]]
    }

    /// Row-major effective weight of a layer (after spectral scaling).
    pub fn effective_weight(&self, layer: usize) -> Vec<f64> {
        self.weight(layer).iter().map(|w| w * self.scale[layer]).collect()
    }

    pub fn is_spectral(&self, layer: usize) -> bool {
        self.spectral[layer].is_some()
    }

    /// Turns on spectral normalization for the given layers, warming the
    /// power iteration up with `warmup` steps.
    pub fn enable_spectral_norm(&mut self, layers: &[usize], warmup: usize, rng: &mut Rng) {
        for &l in layers {
            let (rows, cols) = (self.sizes[l + 1], self.sizes[l]);
            self.spectral[l] = Some(PowerIterState::random(rows, cols, rng));
        }
        self.refresh_spectral(warmup.max(1));
    }

    pub fn enable_spectral_norm_all(&mut self, warmup: usize, rng: &mut Rng) {
        let all: Vec<usize> = (0..self.n_layers()).collect();
        self.enable_spectral_norm(&all, warmup, rng);
    }

    /// Advances the persistent power iteration of each normalized layer.
    pub fn refresh_spectral(&mut self, iters: usize) {
        for l in 0..self.n_layers() {
            let (rows, cols, off) = (self.sizes[l + 1], self.sizes[l], self.offsets[l]);
            if let Some(state) = self.spectral[l].as_mut() {
                let w = &self.params[off..off + rows * cols];
                let sigma = power_iterate(w, rows, cols, iters, state);
                self.scale[l] = if sigma > f64::MIN_POSITIVE { 1.0 / sigma } else { 1.0 };
            }
        }
    }

    fn recompute_sigma(&mut self) {
        for l in 0..self.n_layers() {
            let (rows, cols, off) = (self.sizes[l + 1], self.sizes[l], self.offsets[l]);
            if let Some(state) = &self.spectral[l] {
                if state.v.iter().all(|v| *v == 0.0) {
                    continue;
                }
                let sigma = bilinear(&self.params[off..off + rows * cols], rows, cols, &state.u, &state.v);
                self.scale[l] = if sigma > f64::MIN_POSITIVE { 1.0 / sigma } else { 1.0 };
            }
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::input(format!("MLP expects input length {}, got {}", self.input_dim(), x.len())));
        }
        Ok(())
    }

    fn layer_out(&self, l: usize, x: &[f64], with_bias: bool) -> Vec<f64> {
        let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
        let off = self.offsets[l];
        let w = &self.params[off..off + fan_in * fan_out];
        let b = &self.params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
        let s = self.scale[l];
        (0..fan_out)
            .map(|j| {
                let dot: f64 = w[j * fan_in..(j + 1) * fan_in].iter().zip(x).map(|(a, b)| a * b).sum();
                if with_bias {
                    s * dot + b[j]
                } else {
                    s * dot
                }
            })
            .collect()
    }

    /// `W̄ᵀ y` for layer `l`.
    fn layer_transpose(&self, l: usize, y: &[f64]) -> Vec<f64> {
        let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
        let off = self.offsets[l];
        let w = &self.params[off..off + fan_in * fan_out];
        let s = self.scale[l];
        let mut out = vec![0.0; fan_in];
        for j in 0..fan_out {
            let yj = y[j] * s;
            if yj == 0.0 {
                continue;
            }
            for (o, &wji) in out.iter_mut().zip(&w[j * fan_in..(j + 1) * fan_in]) {
                *o += wji * yj;
            }
        }
        out
    }

    fn accumulate_outer(&self, l: usize, grads: &mut [f64], dz: &[f64], a: &[f64]) {
        let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
        let off = self.offsets[l];
        for j in 0..fan_out {
            let d = dz[j];
            if d == 0.0 {
                continue;
            }
            for (g, &ai) in grads[off + j * fan_in..off + (j + 1) * fan_in].iter_mut().zip(a) {
                *g += d * ai;
            }
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut a = x.to_vec();
        for l in 0..self.n_layers() {
            let mut z = self.layer_out(l, &a, true);
            if l + 1 < self.n_layers() {
                z.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
            a = z;
        }
        Ok(a)
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<Cache> {
        self.check_input(x)?;
        let mut acts = Vec::with_capacity(self.sizes.len());
        acts.push(x.to_vec());
        for l in 0..self.n_layers() {
            let mut z = self.layer_out(l, &acts[l], true);
            if l + 1 < self.n_layers() {
                z.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
            acts.push(z);
        }
        Ok(Cache { acts })
    }

    pub fn grad_buffer(&self) -> GradBuffer {
        GradBuffer { flat: vec![0.0; self.params.len()] }
    }

    /// Accumulates the parameter gradient of `⟨output, cotangent⟩` into
    /// `grads` and returns its input gradient.
    pub fn backward_into(&self, cache: &Cache, cotangent: &[f64], grads: &mut GradBuffer) -> Vec<f64> {
        self.backprop(cache, cotangent, Some(grads))
    }

    /// Input gradient of `⟨output, cotangent⟩` without touching parameters.
    pub fn input_gradient(&self, cache: &Cache, cotangent: &[f64]) -> Vec<f64> {
        self.backprop(cache, cotangent, None)
    }

    fn backprop(&self, cache: &Cache, cotangent: &[f64], mut grads: Option<&mut GradBuffer>) -> Vec<f64> {
        assert_eq!(cotangent.len(), self.output_dim(), "cotangent length must match the output");
        let mut delta = cotangent.to_vec();
        for l in (0..self.n_layers()).rev() {
            if l + 1 < self.n_layers() {
                for (d, &a) in delta.iter_mut().zip(&cache.acts[l + 1]) {
                    *d *= self.activation.derivs(a).0;
                }
            }
            if let Some(g) = grads.as_deref_mut() {
                self.accumulate_outer(l, &mut g.flat, &delta, &cache.acts[l]);
                let boff = self.offsets[l] + self.sizes[l] * self.sizes[l + 1];
                for (gb, d) in g.flat[boff..boff + delta.len()].iter_mut().zip(&delta) {
                    *gb += d;
                }
            }
            delta = self.layer_transpose(l, &delta);
        }
        delta
    }

    /// Forward pass that also propagates the input direction `c`.
    pub fn forward_tangent(&self, x: &[f64], c: &[f64]) -> Result<TangentCache> {
        self.check_input(x)?;
        if c.len() != x.len() {
            return Err(Error::input("tangent direction length must match the input"));
        }
        let n = self.n_layers();
        let mut acts = vec![x.to_vec()];
        let mut tangents = vec![c.to_vec()];
        let mut pre_tangents = Vec::with_capacity(n);
        for l in 0..n {
            let mut z = self.layer_out(l, &acts[l], true);
            let tau = self.layer_out(l, &tangents[l], false);
            let mut t = tau.clone();
            if l + 1 < n {
                for (zi, ti) in z.iter_mut().zip(t.iter_mut()) {
                    *zi = self.activation.apply(*zi);
                    *ti *= self.activation.derivs(*zi).0;
                }
            }
            acts.push(z);
            tangents.push(t);
            pre_tangents.push(tau);
        }
        Ok(TangentCache { acts, tangents, pre_tangents })
    }

    /// Accumulates the parameter gradient of `⟨J(x) c, w⟩`, where the cache
    /// was built by [`Mlp::forward_tangent`] with direction `c`.
    pub fn backward_tangent(&self, cache: &TangentCache, w: &[f64], grads: &mut GradBuffer) {
        assert_eq!(w.len(), self.output_dim());
        let n = self.n_layers();
        let mut abar = vec![0.0; self.output_dim()];
        let mut tbar = w.to_vec();
        for l in (0..n).rev() {
            let (zbar, taubar) = if l + 1 < n {
                let mut zbar = vec![0.0; abar.len()];
                let mut taubar = vec![0.0; abar.len()];
                for j in 0..abar.len() {
                    let (d1, d2) = self.activation.derivs(cache.acts[l + 1][j]);
                    zbar[j] = abar[j] * d1 + tbar[j] * d2 * cache.pre_tangents[l][j];
                    taubar[j] = tbar[j] * d1;
                }
                (zbar, taubar)
            } else {
                (abar.clone(), tbar.clone())
            };
            self.accumulate_outer(l, &mut grads.flat, &zbar, &cache.acts[l]);
            self.accumulate_outer(l, &mut grads.flat, &taubar, &cache.tangents[l]);
            let boff = self.offsets[l] + self.sizes[l] * self.sizes[l + 1];
            for (gb, d) in grads.flat[boff..boff + zbar.len()].iter_mut().zip(&zbar) {
                *gb += d;
            }
            abar = self.layer_transpose(l, &zbar);
            tbar = self.layer_transpose(l, &taubar);
        }
    }

    /// Maps accumulated effective-weight gradients to raw parameters. For a
    /// normalized layer `W̄ = W/σ`, `σ = uᵀWv`:
    /// `∂L/∂W = G/σ - (⟨G, W⟩/σ²) u vᵀ`.
    pub fn finish(&self, grads: GradBuffer) -> Vec<f64> {
        let mut flat = grads.flat;
        for l in 0..self.n_layers() {
            let (fan_in, fan_out, off) = (self.sizes[l], self.sizes[l + 1], self.offsets[l]);
            let s = self.scale[l];
            let block = off..off + fan_in * fan_out;
            match &self.spectral[l] {
                Some(state) if s != 1.0 || state.v.iter().any(|v| *v != 0.0) => {
                    let gw: f64 = flat[block.clone()].iter().zip(&self.params[block.clone()]).map(|(g, w)| g * w).sum();
                    let k = gw * s * s;
                    for j in 0..fan_out {
                        for i in 0..fan_in {
                            let idx = off + j * fan_in + i;
                            flat[idx] = flat[idx] * s - k * state.u[j] * state.v[i];
                        }
                    }
                }
                _ => {}
            }
        }
        flat
    }

    /// Parameter and input gradients of `⟨forward(input), cotangent⟩`.
    pub fn backward(&self, input: &[f64], cotangent: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let cache = self.forward_cached(input)?;
        if cotangent.len() != self.output_dim() {
            return Err(Error::input("cotangent length must match the output"));
        }
        let mut g = self.grad_buffer();
        let dx = self.backward_into(&cache, cotangent, &mut g);
        Ok((self.finish(g), dx))
    }

    pub fn to_sections(&self, prefix: &str) -> Vec<Section> {
        let mut out = vec![
            Section::new(format!("{prefix}.sizes"), vec![self.sizes.len()], self.sizes.iter().map(|&s| s as f64).collect()),
            Section::new(format!("{prefix}.activation"), vec![1], vec![self.activation.code()]),
        ];
        for l in 0..self.n_layers() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            out.push(Section::new(format!("{prefix}.layer{l}.weight"), vec![fan_out, fan_in], self.weight(l).to_vec()));
            out.push(Section::new(format!("{prefix}.layer{l}.bias"), vec![fan_out], self.bias(l).to_vec()));
            if let Some(state) = &self.spectral[l] {
                out.push(Section::new(format!("{prefix}.layer{l}.sn_u"), vec![fan_out], state.u.clone()));
                out.push(Section::new(format!("{prefix}.layer{l}.sn_v"), vec![fan_in], state.v.clone()));
            }
        }
        out
    }

    pub fn from_blob(blob: &Blob, prefix: &str) -> Result<Self> {
        let sizes: Vec<usize> = blob.get(&format!("{prefix}.sizes"))?.values.iter().map(|&s| s as usize).collect();
        let activation = match blob.get(&format!("{prefix}.activation"))?.values.first() {
            Some(&c) if c == 0.0 => Activation::Tanh,
            Some(&c) if c == 1.0 => Activation::Relu,
            _ => return Err(Error::format("unknown activation code")),
        };
        let mut mlp = Self::zeros(&sizes, activation)?;
        for l in 0..mlp.n_layers() {
            let (fan_in, fan_out, off) = (sizes[l], sizes[l + 1], mlp.offsets[l]);
            let w = blob.get(&format!("{prefix}.layer{l}.weight"))?;
            let b = blob.get(&format!("{prefix}.layer{l}.bias"))?;
            if w.shape != [fan_out, fan_in] || b.shape != [fan_out] {
                return Err(Error::format(format!("layer {l} shape mismatch")));
            }
            mlp.params[off..off + fan_in * fan_out].copy_from_slice(&w.values);
            mlp.params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out].copy_from_slice(&b.values);
            if let (Ok(u), Ok(v)) = (blob.get(&format!("{prefix}.layer{l}.sn_u")), blob.get(&format!("{prefix}.layer{l}.sn_v"))) {
                mlp.spectral[l] = Some(PowerIterState { u: u.values.clone(), v: v.values.clone() });
            }
        }
        mlp.recompute_sigma();
        Ok(mlp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng as _;

    fn random_vec(n: usize, rng: &mut Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Straight-line re-implementation: nested loops, no shared helpers.
    fn reference_forward(mlp: &Mlp, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        let n = mlp.n_layers();
        for l in 0..n {
            let w = mlp.effective_weight(l);
            let b = mlp.bias(l);
            let fan_in = mlp.sizes()[l];
            let mut z = Vec::new();
            for j in 0..b.len() {
                let mut acc = b[j];
                for i in 0..fan_in {
                    acc += w[j * fan_in + i] * a[i];
                }
                z.push(if l + 1 < n {
                    match mlp.activation() {
                        Activation::Tanh => acc.tanh(),
                        Activation::Relu => {
                            if acc > 0.0 {
                                acc
                            } else {
                                0.0
                            }
                        }
                    }
                } else {
                    acc
                });
            }
            a = z;
        }
        a
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mlp = Mlp::zeros(&[3, 5, 2], Activation::Tanh).unwrap();
        assert_eq!(mlp.forward(&[0.3, -2.0, 7.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_linear_layer() {
        let mlp = Mlp::linear(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], &[0.0; 3]).unwrap();
        let x = [0.25, -3.0, 9.5];
        assert_eq!(mlp.forward(&x).unwrap(), x.to_vec());
    }

    #[test]
    fn matches_reference_forward() {
        let mut rng = seeded(41);
        for act in [Activation::Tanh, Activation::Relu] {
            let mut mlp = Mlp::new(&[4, 7, 3], act, &mut rng).unwrap();
            mlp.update_params(|p| p.iter_mut().for_each(|v| *v += 0.1));
            let x = random_vec(4, &mut rng);
            let got = mlp.forward(&x).unwrap();
            for (a, b) in got.iter().zip(reference_forward(&mlp, &x)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mlp = Mlp::zeros(&[3, 2], Activation::Tanh).unwrap();
        assert!(matches!(mlp.forward(&[1.0]), Err(Error::InvalidInput(_))));
        assert!(mlp.backward(&[1.0, 2.0, 3.0], &[1.0]).is_err());
    }

    #[test]
    fn linear_weight_gradient_is_outer_product() {
        let mut rng = seeded(42);
        let w = random_vec(6, &mut rng);
        let mlp = Mlp::linear(&w, &[0.0, 0.0]).unwrap();
        let x = [0.5, -1.0, 2.0];
        let cot = [3.0, -0.5];
        let (g, dx) = mlp.backward(&x, &cot).unwrap();
        for j in 0..2 {
            for i in 0..3 {
                assert!((g[j * 3 + i] - cot[j] * x[i]).abs() < 1e-15);
            }
            assert_eq!(g[6 + j], cot[j]);
        }
        for i in 0..3 {
            assert!((dx[i] - (w[i] * cot[0] + w[3 + i] * cot[1])).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        let mut rng = seeded(43);
        let mlp = Mlp::new(&[3, 8, 8, 2], Activation::Tanh, &mut rng).unwrap();
        let (g, dx) = mlp.backward(&[0.1, 0.2, 0.3], &[0.0, 0.0]).unwrap();
        assert!(g.iter().chain(&dx).all(|v| *v == 0.0));
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a.abs().max(b.abs()).max(1e-6))
    }

    fn check_fd(mut mlp: Mlp, rng: &mut Rng) {
        let x = random_vec(mlp.input_dim(), rng);
        let cot = random_vec(mlp.output_dim(), rng);
        let (g, dx) = mlp.backward(&x, &cot).unwrap();
        let h = 1e-5;
        let obj = |m: &Mlp, x: &[f64]| -> f64 { m.forward(x).unwrap().iter().zip(&cot).map(|(a, b)| a * b).sum() };
        let base = mlp.params().to_vec();
        for k in 0..base.len() {
            let mut p = base.clone();
            p[k] += h;
            mlp.set_params(&p).unwrap();
            let up = obj(&mlp, &x);
            p[k] -= 2.0 * h;
            mlp.set_params(&p).unwrap();
            let down = obj(&mlp, &x);
            let fd = (up - down) / (2.0 * h);
            assert!(rel_err(fd, g[k]) < 1e-4 || (fd - g[k]).abs() < 1e-9, "param {k}: fd {fd} vs {}", g[k]);
        }
        mlp.set_params(&base).unwrap();
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let up = obj(&mlp, &xp);
            xp[i] -= 2.0 * h;
            let down = obj(&mlp, &xp);
            let fd = (up - down) / (2.0 * h);
            assert!(rel_err(fd, dx[i]) < 1e-4 || (fd - dx[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = seeded(44);
        check_fd(Mlp::new(&[3, 6, 5, 2], Activation::Tanh, &mut rng).unwrap(), &mut rng);
        check_fd(Mlp::new(&[4, 5, 1], Activation::Relu, &mut rng).unwrap(), &mut rng);
        let mut sn = Mlp::new(&[3, 6, 6, 1], Activation::Tanh, &mut rng).unwrap();
        sn.enable_spectral_norm_all(5, &mut rng);
        check_fd(sn, &mut rng);
    }

    #[test]
    fn tangent_gradient_matches_finite_differences() {
        let mut rng = seeded(45);
        let mut mlp = Mlp::new(&[4, 6, 5, 1], Activation::Tanh, &mut rng).unwrap();
        mlp.enable_spectral_norm(&[0, 2], 3, &mut rng);
        let x = random_vec(4, &mut rng);
        let c = random_vec(4, &mut rng);
        let dir = |m: &Mlp| -> f64 {
            let cache = m.forward_cached(&x).unwrap();
            let g = m.input_gradient(&cache, &[1.0]);
            g.iter().zip(&c).map(|(a, b)| a * b).sum()
        };
        let tc = mlp.forward_tangent(&x, &c).unwrap();
        assert!((tc.output_tangent()[0] - dir(&mlp)).abs() < 1e-12);
        let mut gb = mlp.grad_buffer();
        mlp.backward_tangent(&tc, &[1.0], &mut gb);
        let g = mlp.finish(gb);
        let base = mlp.params().to_vec();
        let h = 1e-5;
        for k in 0..base.len() {
            let mut p = base.clone();
            p[k] += h;
            mlp.set_params(&p).unwrap();
            let up = dir(&mlp);
            p[k] -= 2.0 * h;
            mlp.set_params(&p).unwrap();
            let down = dir(&mlp);
            let fd = (up - down) / (2.0 * h);
            assert!(rel_err(fd, g[k]) < 1e-4 || (fd - g[k]).abs() < 1e-9, "param {k}: fd {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn blob_round_trip() {
        let mut rng = seeded(46);
        let mut mlp = Mlp::new(&[3, 4, 2], Activation::Relu, &mut rng).unwrap();
        mlp.enable_spectral_norm(&[1], 4, &mut rng);
        let blob = Blob { sections: mlp.to_sections("net") };
        let bytes = blob.encode();
        let back = Mlp::from_blob(&Blob::decode(&bytes).unwrap(), "net").unwrap();
        assert_eq!(back, mlp);
    }
}
