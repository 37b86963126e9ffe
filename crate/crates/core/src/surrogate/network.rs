//! Batched forward and reverse passes over a flat weight vector.
//!
//! Rows of every activation matrix are samples. A dense layer computes
//! `Y = X Wᵀ + b` with `W` stored row-major as `out × in`. Blocks are
//!
//! ```text
//! u    = relu(W1 h + b1)
//! v    = W2 u + b2
//! v    = v ⊙ σ(Wu relu(Wd v + bd) + bu)      (SE family only)
//! h'   = relu(h + v)                          (relu(v) for the plain family)
//! ```
//!
//! The SE squeeze is the identity here: an MLP hidden vector has no spatial
//! axis to average over, so the excitation acts on the block output directly.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};

use super::spec::{LayerInfo, ModelSpec};

pub(crate) struct Network<'a> {
    spec: &'a ModelSpec,
    layers: Vec<LayerInfo>,
    weights: &'a [f64],
}

struct BlockTape {
    input: Array2<f64>,
    u: Array2<f64>,
    v: Array2<f64>,
    se: Option<SeTape>,
    out: Array2<f64>,
}

struct SeTape {
    q: Array2<f64>,
    gate: Array2<f64>,
}

/// Activations retained by a forward pass for the reverse pass.
pub(crate) struct Tape {
    x: Array2<f64>,
    h0: Array2<f64>,
    blocks: Vec<BlockTape>,
    pub output: Array2<f64>,
}

fn relu_in_place(a: &mut Array2<f64>) {
    a.mapv_inplace(|v| v.max(0.0));
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Zeroes `grad` wherever the post-activation `act` is not positive.
fn mask_relu(grad: &mut Array2<f64>, act: &Array2<f64>) {
    ndarray::Zip::from(grad).and(act).for_each(|g, &a| {
        if a <= 0.0 {
            *g = 0.0;
        }
    });
}

impl<'a> Network<'a> {
    pub fn new(spec: &'a ModelSpec, weights: &'a [f64]) -> Self {
        let layers = spec.layers();
        debug_assert_eq!(
            weights.len(),
            layers.iter().map(|l| l.weight_count).sum::<usize>()
        );
        Self {
            spec,
            layers,
            weights,
        }
    }

    fn matrix(&self, layer: usize) -> ArrayView2<'a, f64> {
        let l = &self.layers[layer];
        ArrayView2::from_shape(
            (l.out_dim, l.in_dim),
            &self.weights[l.offset..l.bias_offset()],
        )
        .expect("layer shape")
    }

    fn bias(&self, layer: usize) -> ArrayView1<'a, f64> {
        let l = &self.layers[layer];
        ArrayView1::from(&self.weights[l.bias_offset()..l.offset + l.weight_count])
    }

    fn dense(&self, layer: usize, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.matrix(layer).t());
        y += &self.bias(layer);
        y
    }

    fn layers_per_block(&self) -> usize {
        if self.spec.has_se() {
            4
        } else {
            2
        }
    }

    fn block_layer(&self, block: usize, k: usize) -> usize {
        1 + block * self.layers_per_block() + k
    }

    fn output_layer(&self) -> usize {
        self.layers.len() - 1
    }

    /// Forward pass on already-scaled inputs, keeping activations.
    pub fn forward(&self, x: ArrayView2<f64>) -> Tape {
        let mut h0 = self.dense(0, x);
        relu_in_place(&mut h0);
        let mut blocks = Vec::with_capacity(self.spec.n_blocks);
        let mut h = h0.clone();
        for b in 0..self.spec.n_blocks {
            let mut u = self.dense(self.block_layer(b, 0), h.view());
            relu_in_place(&mut u);
            let v = self.dense(self.block_layer(b, 1), u.view());
            let (scaled, se) = if self.spec.has_se() {
                let mut q = self.dense(self.block_layer(b, 2), v.view());
                relu_in_place(&mut q);
                let mut gate = self.dense(self.block_layer(b, 3), q.view());
                gate.mapv_inplace(sigmoid);
                (&v * &gate, Some(SeTape { q, gate }))
            } else {
                (v.clone(), None)
            };
            let mut out = if self.spec.has_skip() {
                &h + &scaled
            } else {
                scaled
            };
            relu_in_place(&mut out);
            let next = out.clone();
            blocks.push(BlockTape {
                input: h,
                u,
                v,
                se,
                out,
            });
            h = next;
        }
        let output = self.dense(self.output_layer(), h.view());
        Tape {
            x: x.to_owned(),
            h0,
            blocks,
            output,
        }
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Array2<f64> {
        self.forward(x).output
    }

    /// Accumulates `dW = dYᵀ X` and `db = Σ dY` into `grads` for `layer`.
    fn accumulate(&self, grads: &mut [f64], layer: usize, dy: &Array2<f64>, x: &Array2<f64>) {
        let l = &self.layers[layer];
        let (w, b) = grads[l.offset..l.offset + l.weight_count].split_at_mut(l.in_dim * l.out_dim);
        let mut dw = ArrayViewMut2::from_shape((l.out_dim, l.in_dim), w).expect("layer shape");
        general_mat_mul(1.0, &dy.t(), x, 1.0, &mut dw);
        let mut db = ArrayViewMut1::from(b);
        db += &dy.sum_axis(Axis(0));
    }

    /// Reverse pass from `d_output` (gradient with respect to the network
    /// output). Adds weight gradients into `grads` when given and returns
    /// the gradient with respect to the network input when `want_input`.
    pub fn backward(
        &self,
        tape: &Tape,
        d_output: &Array2<f64>,
        mut grads: Option<&mut [f64]>,
        want_input: bool,
    ) -> Option<Array2<f64>> {
        let last_hidden = tape.blocks.last().map(|b| &b.out).unwrap_or(&tape.h0);
        let out_layer = self.output_layer();
        if let Some(g) = grads.as_deref_mut() {
            self.accumulate(g, out_layer, d_output, last_hidden);
        }
        let mut dh = d_output.dot(&self.matrix(out_layer));

        for (b, block) in tape.blocks.iter().enumerate().rev() {
            mask_relu(&mut dh, &block.out);
            let d_skip = self.spec.has_skip().then(|| dh.clone());
            let mut dv = match &block.se {
                Some(se) => {
                    let (down, up) = (self.block_layer(b, 2), self.block_layer(b, 3));
                    // d/dgate of (v ⊙ gate), then through the logistic
                    let mut dt = &dh * &block.v;
                    ndarray::Zip::from(&mut dt)
                        .and(&se.gate)
                        .for_each(|d, &s| *d *= s * (1.0 - s));
                    if let Some(g) = grads.as_deref_mut() {
                        self.accumulate(g, up, &dt, &se.q);
                    }
                    let mut dq = dt.dot(&self.matrix(up));
                    mask_relu(&mut dq, &se.q);
                    if let Some(g) = grads.as_deref_mut() {
                        self.accumulate(g, down, &dq, &block.v);
                    }
                    let mut dv = &dh * &se.gate;
                    dv += &dq.dot(&self.matrix(down));
                    dv
                }
                None => dh,
            };
            let (fc1, fc2) = (self.block_layer(b, 0), self.block_layer(b, 1));
            if let Some(g) = grads.as_deref_mut() {
                self.accumulate(g, fc2, &dv, &block.u);
            }
            let mut du = dv.dot(&self.matrix(fc2));
            mask_relu(&mut du, &block.u);
            if let Some(g) = grads.as_deref_mut() {
                self.accumulate(g, fc1, &du, &block.input);
            }
            dv = du.dot(&self.matrix(fc1));
            if let Some(skip) = d_skip {
                dv += &skip;
            }
            dh = dv;
        }

        mask_relu(&mut dh, &tape.h0);
        if let Some(g) = grads.as_deref_mut() {
            self.accumulate(g, 0, &dh, &tape.x);
        }
        want_input.then(|| dh.dot(&self.matrix(0)))
    }
}
