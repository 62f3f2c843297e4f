use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Activation {
    Tanh,
    Linear,
}

/// Parameter groups, used to mask which parameters an optimizer step touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Encoder,
    Mixing,
    Projection,
    PairDecoder,
    GlobalDecoder,
}

/// Fully connected layer stored in a shared flat parameter buffer. Weights
/// are row-major `n_out × n_in` starting at `w`, biases follow at `b`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Dense {
    pub w: usize,
    pub b: usize,
    pub n_in: usize,
    pub n_out: usize,
    pub act: Activation,
    pub group: ParamGroup,
}

impl Dense {
    pub fn n_params(&self) -> usize {
        self.n_in * self.n_out + self.n_out
    }

    pub fn forward(&self, p: &[f64], x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n_in);
        debug_assert_eq!(y.len(), self.n_out);
        let weights = &p[self.w..self.w + self.n_in * self.n_out];
        for (o, out) in y.iter_mut().enumerate() {
            let row = &weights[o * self.n_in..(o + 1) * self.n_in];
            let s = p[self.b + o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            *out = match self.act {
                Activation::Tanh => s.tanh(),
                Activation::Linear => s,
            };
        }
    }

    /// Backpropagates through the layer. `dy` holds the gradient with respect
    /// to the layer output and is overwritten with the pre-activation
    /// gradient. Parameter gradients and `dx` are accumulated.
    pub fn backward(
        &self,
        p: &[f64],
        x: &[f64],
        y: &[f64],
        dy: &mut [f64],
        grad: &mut [f64],
        dx: Option<&mut [f64]>,
    ) {
        if self.act == Activation::Tanh {
            for (d, &out) in dy.iter_mut().zip(y) {
                *d *= 1.0 - out * out;
            }
        }
        for (o, &d) in dy.iter().enumerate() {
            grad[self.b + o] += d;
            let g = &mut grad[self.w + o * self.n_in..self.w + (o + 1) * self.n_in];
            for (gi, xi) in g.iter_mut().zip(x) {
                *gi += d * xi;
            }
        }
        if let Some(dx) = dx {
            for (o, &d) in dy.iter().enumerate() {
                let row = &p[self.w + o * self.n_in..self.w + (o + 1) * self.n_in];
                for (dxi, wi) in dx.iter_mut().zip(row) {
                    *dxi += wi * d;
                }
            }
        }
    }
}

/// Sequentially allocates layers in a flat parameter buffer.
#[derive(Debug, Default)]
pub(crate) struct LayoutBuilder {
    next: usize,
    pub layers: Vec<Dense>,
}

impl LayoutBuilder {
    pub fn dense(&mut self, n_in: usize, n_out: usize, act: Activation, group: ParamGroup) -> Dense {
        let d = Dense {
            w: self.next,
            b: self.next + n_in * n_out,
            n_in,
            n_out,
            act,
            group,
        };
        self.next += d.n_params();
        self.layers.push(d);
        d
    }

    pub fn len(&self) -> usize {
        self.next
    }
}
