//! Dense rectifier network used to decode hash features. Deliberately tiny:
//! a couple of hidden layers, scalar loops, flat parameter storage so the
//! optimizer and checkpoints can treat it as one array.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MlpConfig {
    pub input: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub output: usize,
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.hidden == 0 || self.hidden_layers == 0 || self.output == 0 {
            return Err(Error::Config(
                "mlp dimensions must all be positive".into(),
            ));
        }
        Ok(())
    }

    /// (weight offset, bias offset, fan_in, fan_out) per layer, head last.
    fn layers(&self) -> Vec<(usize, usize, usize, usize)> {
        let mut out = Vec::with_capacity(self.hidden_layers + 1);
        let mut off = 0;
        let mut fan_in = self.input;
        for _ in 0..self.hidden_layers {
            out.push((off, off + fan_in * self.hidden, fan_in, self.hidden));
            off += fan_in * self.hidden + self.hidden;
            fan_in = self.hidden;
        }
        out.push((off, off + fan_in * self.output, fan_in, self.output));
        out
    }

    pub fn n_params(&self) -> usize {
        self.layers()
            .iter()
            .map(|&(_, _, fi, fo)| fi * fo + fo)
            .sum()
    }

    pub fn activations_len(&self) -> usize {
        self.hidden_layers * self.hidden
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub config: MlpConfig,
    /// Per layer: row-major weights (out x in), then biases.
    pub params: Vec<f64>,
}

impl Mlp {
    /// Hidden layers get uniform Glorot weights, the head starts at exactly
    /// zero so a fresh field is the identity of its output activation.
    pub fn init(config: MlpConfig, rng: &mut impl rand::Rng) -> Result<Self> {
        config.validate()?;
        let mut params = vec![0.0; config.n_params()];
        let layers = config.layers();
        for (li, &(w_off, _, fan_in, fan_out)) in layers.iter().enumerate() {
            if li == layers.len() - 1 {
                break; // head stays zero
            }
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in &mut params[w_off..w_off + fan_in * fan_out] {
                *w = rng.gen_range(-limit..=limit);
            }
        }
        Ok(Mlp { config, params })
    }

    pub fn from_params(config: MlpConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        if params.len() != config.n_params() {
            return Err(Error::Config(format!(
                "mlp parameter blob has {} values, config wants {}",
                params.len(),
                config.n_params()
            )));
        }
        Ok(Mlp { config, params })
    }

    /// Forward pass. `acts` receives the post-rectifier hidden activations
    /// (needed by [`Mlp::backward`]); `out` the raw head values.
    pub fn forward(&self, x: &[f64], acts: &mut [f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.config.input);
        debug_assert_eq!(acts.len(), self.config.activations_len());
        debug_assert_eq!(out.len(), self.config.output);
        let layers = self.config.layers();
        let h = self.config.hidden;
        for (li, &(w_off, b_off, fan_in, fan_out)) in layers.iter().enumerate() {
            let is_head = li == layers.len() - 1;
            // Split borrows: earlier activations are input to later layers.
            let (done, rest) = acts.split_at_mut(li.min(self.config.hidden_layers) * h);
            let input: &[f64] = if li == 0 { x } else { &done[(li - 1) * h..li * h] };
            let dst: &mut [f64] = if is_head { out } else { &mut rest[..h] };
            for o in 0..fan_out {
                let row = &self.params[w_off + o * fan_in..w_off + (o + 1) * fan_in];
                let mut acc = self.params[b_off + o];
                for (w, v) in row.iter().zip(input) {
                    acc += w * v;
                }
                dst[o] = if is_head { acc } else { acc.max(0.0) };
            }
        }
    }

    /// Backward pass given the forward activations. Accumulates into
    /// `d_params` and `d_x`.
    pub fn backward(
        &self,
        x: &[f64],
        acts: &[f64],
        d_out: &[f64],
        d_params: &mut [f64],
        d_x: &mut [f64],
    ) {
        debug_assert_eq!(d_params.len(), self.params.len());
        debug_assert_eq!(d_x.len(), self.config.input);
        let layers = self.config.layers();
        let h = self.config.hidden;
        let mut delta = d_out.to_vec();
        for (li, &(w_off, b_off, fan_in, fan_out)) in layers.iter().enumerate().rev() {
            let input: &[f64] = if li == 0 { x } else { &acts[(li - 1) * h..li * h] };
            let mut d_input = vec![0.0; fan_in];
            for o in 0..fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                d_params[b_off + o] += d;
                let row = &self.params[w_off + o * fan_in..w_off + (o + 1) * fan_in];
                let drow = &mut d_params[w_off + o * fan_in..w_off + (o + 1) * fan_in];
                for i in 0..fan_in {
                    drow[i] += d * input[i];
                    d_input[i] += d * row[i];
                }
            }
            if li == 0 {
                for (a, b) in d_x.iter_mut().zip(&d_input) {
                    *a += b;
                }
            } else {
                // Gate through the rectifier of the producing layer.
                let gate = &acts[(li - 1) * h..li * h];
                for (di, &g) in d_input.iter_mut().zip(gate) {
                    if g <= 0.0 {
                        *di = 0.0;
                    }
                }
                delta = d_input;
            }
        }
    }
}
