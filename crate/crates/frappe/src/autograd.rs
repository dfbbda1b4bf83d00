//! Reverse-mode differentiation over a recorded operation tape.
//!
//! The tape is an append-only arena: every operation's inputs precede it, so
//! the graph is acyclic by construction and the backward pass is a single
//! reverse sweep. A tape is single-owner; forward math lives in
//! [`crate::tensor`] and is shared with the inference paths, so training and
//! deployment evaluate bit-identical arithmetic.

use crate::error::{Error, Result};
use crate::tensor::{self, SignalTensor};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f32),
    Exp(Var),
    Gelu(Var),
    Hardtanh(Var),
    Compand { input: Var, sigma: Var },
    MulChannels { input: Var, factor: Var },
    AddChannels { input: Var, bias: Var },
    ConvStrided { input: Var, kernel: Var, bias: Var, stride: usize },
    ConvTransposed { input: Var, kernel: Var, bias: Var, stride: usize },
    Conv2d { input: Var, kernel: Var, bias: Var, groups: usize },
    LayerNorm { input: Var, gamma: Var, beta: Var, epsilon: f32 },
    SpaceToDepth { input: Var, factor: usize },
    NnUpsample { input: Var, factor: usize },
    Concat(Vec<Var>),
    SumSquares(Var),
    StdDev { input: Var, floor: f64 },
    Log10 { input: Var, floor: f64 },
    Log2 { input: Var, floor: f64 },
}

struct Node {
    value: SignalTensor,
    grad: Option<SignalTensor>,
    needs_grad: bool,
    op: Op,
}

/// Single-owner differentiation tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: SignalTensor, needs_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, value: SignalTensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Trainable input; `grad` is populated by [`Tape::backward`].
    pub fn param(&mut self, value: SignalTensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &SignalTensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&SignalTensor> {
        self.nodes[v.0].grad.as_ref()
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::add(self.value(a), self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(value, ng, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::sub(self.value(a), self.value(b))?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(value, ng, Op::Sub(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let value = tensor::scale(self.value(a), c);
        let ng = self.needs(&[a]);
        self.push(value, ng, Op::Scale(a, c))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = tensor::exp(self.value(a));
        let ng = self.needs(&[a]);
        self.push(value, ng, Op::Exp(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = tensor::gelu(self.value(a));
        let ng = self.needs(&[a]);
        self.push(value, ng, Op::Gelu(a))
    }

    pub fn hardtanh(&mut self, a: Var) -> Var {
        let value = tensor::hardtanh(self.value(a));
        let ng = self.needs(&[a]);
        self.push(value, ng, Op::Hardtanh(a))
    }

    pub fn compand(&mut self, input: Var, sigma: Var) -> Result<Var> {
        let value = tensor::compand(self.value(input), self.value(sigma))?;
        let ng = self.needs(&[input, sigma]);
        Ok(self.push(value, ng, Op::Compand { input, sigma }))
    }

    pub fn mul_channels(&mut self, input: Var, factor: Var) -> Result<Var> {
        let value = tensor::mul_channels(self.value(input), self.value(factor))?;
        let ng = self.needs(&[input, factor]);
        Ok(self.push(value, ng, Op::MulChannels { input, factor }))
    }

    pub fn add_channels(&mut self, input: Var, bias: Var) -> Result<Var> {
        let value = tensor::add_channels(self.value(input), self.value(bias))?;
        let ng = self.needs(&[input, bias]);
        Ok(self.push(value, ng, Op::AddChannels { input, bias }))
    }

    pub fn conv_strided(&mut self, input: Var, kernel: Var, bias: Var, stride: usize) -> Result<Var> {
        let value = tensor::conv_strided(
            self.value(input),
            self.value(kernel),
            self.value(bias).data(),
            stride,
        )?;
        let ng = self.needs(&[input, kernel, bias]);
        Ok(self.push(value, ng, Op::ConvStrided { input, kernel, bias, stride }))
    }

    pub fn conv_transposed(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
    ) -> Result<Var> {
        let value = tensor::conv_transposed(
            self.value(input),
            self.value(kernel),
            self.value(bias).data(),
            stride,
        )?;
        let ng = self.needs(&[input, kernel, bias]);
        Ok(self.push(value, ng, Op::ConvTransposed { input, kernel, bias, stride }))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, groups: usize) -> Result<Var> {
        let value = tensor::conv2d(
            self.value(input),
            self.value(kernel),
            self.value(bias).data(),
            groups,
        )?;
        let ng = self.needs(&[input, kernel, bias]);
        Ok(self.push(value, ng, Op::Conv2d { input, kernel, bias, groups }))
    }

    pub fn layer_norm(&mut self, input: Var, gamma: Var, beta: Var, epsilon: f32) -> Result<Var> {
        let value = tensor::layer_norm(
            self.value(input),
            self.value(gamma),
            self.value(beta),
            epsilon,
        )?;
        let ng = self.needs(&[input, gamma, beta]);
        Ok(self.push(value, ng, Op::LayerNorm { input, gamma, beta, epsilon }))
    }

    pub fn space_to_depth(&mut self, input: Var, factor: usize) -> Result<Var> {
        let value = tensor::space_to_depth(self.value(input), factor)?;
        let ng = self.needs(&[input]);
        Ok(self.push(value, ng, Op::SpaceToDepth { input, factor }))
    }

    pub fn nn_upsample(&mut self, input: Var, factor: usize) -> Result<Var> {
        let value = tensor::nn_upsample(self.value(input), factor)?;
        let ng = self.needs(&[input]);
        Ok(self.push(value, ng, Op::NnUpsample { input, factor }))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&SignalTensor> = parts.iter().map(|&v| self.value(v)).collect();
        let value = tensor::concat_channels(&tensors)?;
        let ng = self.needs(parts);
        Ok(self.push(value, ng, Op::Concat(parts.to_vec())))
    }

    /// Squared L2 norm reduced to a scalar node.
    pub fn sum_squares(&mut self, input: Var) -> Var {
        let value = SignalTensor::scalar(tensor::sum_squares(self.value(input)) as f32);
        let ng = self.needs(&[input]);
        self.push(value, ng, Op::SumSquares(input))
    }

    /// Population standard deviation over all elements, floored.
    pub fn std_dev(&mut self, input: Var, floor: f64) -> Var {
        let value = SignalTensor::scalar(tensor::std_dev(self.value(input)).max(floor) as f32);
        let ng = self.needs(&[input]);
        self.push(value, ng, Op::StdDev { input, floor })
    }

    /// log10 of a scalar node, with the argument floored.
    pub fn log10(&mut self, input: Var, floor: f64) -> Var {
        let s = self.value(input).item() as f64;
        let value = SignalTensor::scalar(s.max(floor).log10() as f32);
        let ng = self.needs(&[input]);
        self.push(value, ng, Op::Log10 { input, floor })
    }

    /// log2 of a scalar node, with the argument floored.
    pub fn log2(&mut self, input: Var, floor: f64) -> Var {
        let s = self.value(input).item() as f64;
        let value = SignalTensor::scalar(s.max(floor).log2() as f32);
        let ng = self.needs(&[input]);
        self.push(value, ng, Op::Log2 { input, floor })
    }

    fn accumulate(&mut self, v: Var, delta: SignalTensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.nodes[v.0].grad {
            Some(g) => {
                debug_assert!(g.same_shape(&delta));
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            None => self.nodes[v.0].grad = Some(delta),
        }
    }

    /// Runs the reverse sweep from a scalar loss, filling `grad` on every
    /// reachable node that needs one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(SignalTensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad || self.nodes[id].grad.is_none() {
                continue;
            }
            let gy = self.nodes[id].grad.clone().unwrap();
            match &self.nodes[id].op {
                Op::Leaf => {}
                &Op::Add(a, b) => {
                    self.accumulate(a, gy.clone());
                    self.accumulate(b, gy);
                }
                &Op::Sub(a, b) => {
                    self.accumulate(a, gy.clone());
                    self.accumulate(b, tensor::scale(&gy, -1.0));
                }
                &Op::Scale(a, c) => self.accumulate(a, tensor::scale(&gy, c)),
                &Op::Exp(a) => {
                    // d exp = exp(x) elementwise
                    let y = self.nodes[id].value.clone();
                    let mut d = gy;
                    for (g, e) in d.data_mut().iter_mut().zip(y.data()) {
                        *g *= e;
                    }
                    self.accumulate(a, d);
                }
                &Op::Gelu(a) => {
                    let d = tensor::gelu_vjp(self.value(a), &gy);
                    self.accumulate(a, d);
                }
                &Op::Hardtanh(a) => {
                    let d = tensor::hardtanh_vjp(self.value(a), &gy);
                    self.accumulate(a, d);
                }
                &Op::Compand { input, sigma } => {
                    let (di, ds) = tensor::compand_vjp(self.value(input), self.value(sigma), &gy);
                    self.accumulate(input, di);
                    self.accumulate(sigma, ds);
                }
                &Op::MulChannels { input, factor } => {
                    let (di, df) =
                        tensor::mul_channels_vjp(self.value(input), self.value(factor), &gy);
                    self.accumulate(input, di);
                    self.accumulate(factor, df);
                }
                &Op::AddChannels { input, bias } => {
                    let db = tensor::add_channels_vjp_bias(self.value(input), &gy);
                    self.accumulate(input, gy);
                    self.accumulate(bias, db);
                }
                &Op::ConvStrided { input, kernel, bias, stride: _ } => {
                    let (di, dk, db) =
                        tensor::conv_strided_vjp(self.value(input), self.value(kernel), &gy);
                    self.accumulate(input, di);
                    self.accumulate(kernel, dk);
                    self.accumulate(bias, db);
                }
                &Op::ConvTransposed { input, kernel, bias, stride: _ } => {
                    let (di, dk, db) =
                        tensor::conv_transposed_vjp(self.value(input), self.value(kernel), &gy);
                    self.accumulate(input, di);
                    self.accumulate(kernel, dk);
                    self.accumulate(bias, db);
                }
                &Op::Conv2d { input, kernel, bias, groups } => {
                    let (di, dk, db) =
                        tensor::conv2d_vjp(self.value(input), self.value(kernel), groups, &gy);
                    self.accumulate(input, di);
                    self.accumulate(kernel, dk);
                    self.accumulate(bias, db);
                }
                &Op::LayerNorm { input, gamma, beta, epsilon } => {
                    let (di, dg, db) =
                        tensor::layer_norm_vjp(self.value(input), self.value(gamma), epsilon, &gy);
                    self.accumulate(input, di);
                    self.accumulate(gamma, dg);
                    self.accumulate(beta, db);
                }
                &Op::SpaceToDepth { input, factor } => {
                    let di = tensor::depth_to_space(&gy, factor)?;
                    self.accumulate(input, di);
                }
                &Op::NnUpsample { input, factor } => {
                    let di = tensor::nn_upsample_vjp(self.value(input), factor, &gy);
                    self.accumulate(input, di);
                }
                Op::Concat(parts) => {
                    let parts = parts.clone();
                    let mut offset = 0usize;
                    for part in parts {
                        let pt = self.value(part);
                        let count = pt.len();
                        let shape = pt.shape().to_vec();
                        let slice = gy.data()[offset..offset + count].to_vec();
                        offset += count;
                        self.accumulate(part, SignalTensor::new(shape, slice)?);
                    }
                }
                &Op::SumSquares(input) => {
                    let g = gy.item();
                    let di = tensor::scale(self.value(input), 2.0 * g);
                    self.accumulate(input, di);
                }
                &Op::StdDev { input, floor } => {
                    let x = self.value(input);
                    let n = x.len() as f64;
                    let mu = tensor::mean(x);
                    let sd = tensor::std_dev(x);
                    if sd > floor {
                        let g = gy.item() as f64;
                        let data: Vec<f32> = x
                            .data()
                            .iter()
                            .map(|&v| (g * (v as f64 - mu) / (n * sd)) as f32)
                            .collect();
                        let di = SignalTensor::new(x.shape().to_vec(), data)?;
                        self.accumulate(input, di);
                    }
                }
                &Op::Log10 { input, floor } => {
                    let s = self.value(input).item() as f64;
                    if s > floor {
                        let g = gy.item() as f64 / (s * std::f64::consts::LN_10);
                        self.accumulate(input, SignalTensor::scalar(g as f32));
                    }
                }
                &Op::Log2 { input, floor } => {
                    let s = self.value(input).item() as f64;
                    if s > floor {
                        let g = gy.item() as f64 / (s * std::f64::consts::LN_2);
                        self.accumulate(input, SignalTensor::scalar(g as f32));
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_tensor(rng: &mut StdRng, shape: Vec<usize>) -> SignalTensor {
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.gen_range(-1.0..1.0f32)).collect();
        SignalTensor::new(shape, data).unwrap()
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(SignalTensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let ones = tape.constant(SignalTensor::new(vec![1, 2, 2], vec![1.0; 4]).unwrap());
        // sum(x) via 0.5 * sum((x+1)^2 - x^2 - 1); simpler: d sum_squares(x)/dx = 2x,
        // so check the documented trivial cases directly instead.
        let _ = ones;
        let ss = tape.sum_squares(x);
        tape.backward(ss).unwrap();
        let g = tape.grad(x).unwrap();
        assert_eq!(g.data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    /// Central finite differences of an f32 computation, evaluated in f64.
    fn finite_diff(
        mut eval: impl FnMut(&SignalTensor) -> f64,
        at: &SignalTensor,
        idx: usize,
        h: f32,
    ) -> f64 {
        let mut plus = at.clone();
        plus.data_mut()[idx] += h;
        let mut minus = at.clone();
        minus.data_mut()[idx] -= h;
        (eval(&plus) - eval(&minus)) / (2.0 * h as f64)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1.0)
    }

    /// Weighted-sum loss over an op output makes every element's gradient
    /// observable without cancellation.
    fn weighted_loss(out: &SignalTensor, weights: &[f64]) -> f64 {
        out.data()
            .iter()
            .zip(weights)
            .map(|(&v, &w)| v as f64 * w)
            .sum()
    }

    struct GradCheck {
        tol: f64,
        h: f32,
    }

    impl GradCheck {
        fn run(
            &self,
            input: &SignalTensor,
            forward: impl Fn(&SignalTensor) -> SignalTensor,
            tape_grad: &SignalTensor,
            weights: &[f64],
        ) {
            for idx in 0..input.len() {
                let fd = finite_diff(
                    |t| weighted_loss(&forward(t), weights),
                    input,
                    idx,
                    self.h,
                );
                let an = tape_grad.data()[idx] as f64;
                assert!(
                    rel_err(an, fd) < self.tol,
                    "element {idx}: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    fn weighted_loss_on_tape(tape: &mut Tape, out: Var, weights: &[f64]) -> Var {
        // Express sum(w .* out) with tape ops: ||out + w||^2 - ||out||^2 - ||w||^2 = 2 w.out
        let wt = SignalTensor::new(
            tape.value(out).shape().to_vec(),
            weights.iter().map(|&w| w as f32).collect(),
        )
        .unwrap();
        let w = tape.constant(wt);
        let s = tape.add(out, w).unwrap();
        let a = tape.sum_squares(s);
        let b = tape.sum_squares(out);
        let nb = tape.scale(b, -1.0);
        let t = tape.add(a, nb).unwrap();
        tape.scale(t, 0.5)
        // (constant ||w||^2/2 offset does not affect gradients)
    }

    #[test]
    fn gradients_match_finite_differences_across_ops() {
        // One hundred randomized small-shape trials spread over every
        // differentiable op the trainer uses.
        for seed in 0..100u64 {
            let mut rng = StdRng::seed_from_u64(seed);
            let check = GradCheck { tol: 1e-3, h: 2e-3 };
            match seed % 7 {
                0 => {
                    // conv_strided w.r.t. input, kernel, bias
                    let x = random_tensor(&mut rng, vec![2, 4, 4]);
                    let k = random_tensor(&mut rng, vec![3, 2, 2, 2]);
                    let b = random_tensor(&mut rng, vec![3]);
                    let weights: Vec<f64> =
                        (0..3 * 2 * 2).map(|_| rng.gen_range(0.5..1.0)).collect();
                    let mut tape = Tape::new();
                    let xv = tape.param(x.clone());
                    let kv = tape.param(k.clone());
                    let bv = tape.param(b.clone());
                    let out = tape.conv_strided(xv, kv, bv, 2).unwrap();
                    let loss = weighted_loss_on_tape(&mut tape, out, &weights);
                    tape.backward(loss).unwrap();
                    check.run(
                        &x,
                        |t| tensor::conv_strided(t, &k, b.data(), 2).unwrap(),
                        tape.grad(xv).unwrap(),
                        &weights,
                    );
                    check.run(
                        &k,
                        |t| tensor::conv_strided(&x, t, b.data(), 2).unwrap(),
                        tape.grad(kv).unwrap(),
                        &weights,
                    );
                    check.run(
                        &b,
                        |t| tensor::conv_strided(&x, &k, t.data(), 2).unwrap(),
                        tape.grad(bv).unwrap(),
                        &weights,
                    );
                }
                1 => {
                    // conv_transposed; spec example asks for <1e-4 here
                    let tight = GradCheck { tol: 1e-4, h: 3e-3 };
                    let x = random_tensor(&mut rng, vec![3, 2, 2]);
                    let k = random_tensor(&mut rng, vec![3, 2, 2, 2]);
                    let b = random_tensor(&mut rng, vec![2]);
                    let weights: Vec<f64> =
                        (0..2 * 4 * 4).map(|_| rng.gen_range(0.5..1.0)).collect();
                    let mut tape = Tape::new();
                    let xv = tape.param(x.clone());
                    let kv = tape.param(k.clone());
                    let bv = tape.param(b.clone());
                    let out = tape.conv_transposed(xv, kv, bv, 2).unwrap();
                    let loss = weighted_loss_on_tape(&mut tape, out, &weights);
                    tape.backward(loss).unwrap();
                    tight.run(
                        &x,
                        |t| tensor::conv_transposed(t, &k, b.data(), 2).unwrap(),
                        tape.grad(xv).unwrap(),
                        &weights,
                    );
                    tight.run(
                        &k,
                        |t| tensor::conv_transposed(&x, t, b.data(), 2).unwrap(),
                        tape.grad(kv).unwrap(),
                        &weights,
                    );
                }
                2 => {
                    // conv2d dense and depthwise
                    let x = random_tensor(&mut rng, vec![2, 3, 3]);
                    let k = random_tensor(&mut rng, vec![2, 2, 3, 3]);
                    let b = random_tensor(&mut rng, vec![2]);
                    let weights: Vec<f64> =
                        (0..2 * 3 * 3).map(|_| rng.gen_range(0.5..1.0)).collect();
                    let mut tape = Tape::new();
                    let xv = tape.param(x.clone());
                    let kv = tape.param(k.clone());
                    let bv = tape.param(b.clone());
                    let out = tape.conv2d(xv, kv, bv, 1).unwrap();
                    let loss = weighted_loss_on_tape(&mut tape, out, &weights);
                    tape.backward(loss).unwrap();
                    check.run(
                        &x,
                        |t| tensor::conv2d(t, &k, b.data(), 1).unwrap(),
                        tape.grad(xv).unwrap(),
                        &weights,
                    );
                    check.run(
                        &k,
                        |t| tensor::conv2d(&x, t, b.data(), 1).unwrap(),
                        tape.grad(kv).unwrap(),
                        &weights,
                    );

                    let kd = random_tensor(&mut rng, vec![2, 1, 3, 3]);
                    let mut tape = Tape::new();
                    let xv = tape.param(x.clone());
                    let kv = tape.param(kd.clone());
                    let bv = tape.constant(b.clone());
                    let out = tape.conv2d(xv, kv, bv, 2).unwrap();
                    let loss = weighted_loss_on_tape(&mut tape, out, &weights);
                    tape.backward(loss).unwrap();
                    check.run(
                        &kd,
                        |t| tensor::conv2d(&x, t, b.data(), 2).unwrap(),
                        tape.grad(kv).unwrap(),
                        &weights,
                    );
                }
                3 => {
                    // layer_norm w.r.t. input, gamma, beta
                    let x = random_tensor(&mut rng, vec![4, 2, 2]);
                    let g = random_tensor(&mut rng, vec![4]);
                    let bt = random_tensor(&mut rng, vec![4]);
                    let weights: Vec<f64> =
                        (0..4 * 2 * 2).map(|_| rng.gen_range(0.5..1.0)).collect();
                    let mut tape = Tape::new();
                    let xv = tape.param(x.clone());
                    let gv = tape.param(g.clone());
                    let bv = tape.param(bt.clone());
                    let out = tape.layer_norm(xv, gv, bv, 1e-6).unwrap();
                    let loss = weighted_loss_on_tape(&mut tape, out, &weights);
                    tape.backward(loss).unwrap();
                    check.run(
                        &x,
                        |t| tensor::layer_norm(t, &g, &bt, 1e-6).unwrap(),
                        tape.grad(xv).unwrap(),
                        &weights,
                    );
                    check.run(
                        &g,
                        |t| tensor::layer_norm(&x, t, &bt, 1e-6).unwrap(),
                        tape.grad(gv).unwrap(),
                        &weights,
                    );
                }
                4 => {
                    // gelu; spec example asks for <1e-4
                    let tight = GradCheck { tol: 1e-4, h: 3e-3 };
                    let x = random_tensor(&mut rng, vec![1, 4, 4]);
                    let weights: Vec<f64> = (0..16).map(|_| rng.gen_range(0.5..1.0)).collect();
                    let mut tape = Tape::new();
                    let xv = tape.param(x.clone());
                    let out = tape.gelu(xv);
                    let loss = weighted_loss_on_tape(&mut tape, out, &weights);
                    tape.backward(loss).unwrap();
                    tight.run(&x, tensor::gelu, tape.grad(xv).unwrap(), &weights);
                }
                5 => {
                    // compand w.r.t. input and sigma
                    let x = random_tensor(&mut rng, vec![2, 3, 3]);
                    let s = SignalTensor::new(
                        vec![2],
                        vec![rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0)],
                    )
                    .unwrap();
                    let weights: Vec<f64> =
                        (0..2 * 3 * 3).map(|_| rng.gen_range(0.5..1.0)).collect();
                    let mut tape = Tape::new();
                    let xv = tape.param(x.clone());
                    let sv = tape.param(s.clone());
                    let out = tape.compand(xv, sv).unwrap();
                    let loss = weighted_loss_on_tape(&mut tape, out, &weights);
                    tape.backward(loss).unwrap();
                    // Gradients of the compander are O(r/sigma); scale the
                    // step down to stay in the linear regime.
                    let soft = GradCheck { tol: 1e-3, h: 5e-4 };
                    soft.run(
                        &x,
                        |t| tensor::compand(t, &s).unwrap(),
                        tape.grad(xv).unwrap(),
                        &weights,
                    );
                    soft.run(
                        &s,
                        |t| tensor::compand(&x, t).unwrap(),
                        tape.grad(sv).unwrap(),
                        &weights,
                    );
                }
                _ => {
                    // reductions: std_dev and log10(sum_squares)
                    let x = random_tensor(&mut rng, vec![1, 4, 4]);
                    let mut tape = Tape::new();
                    let xv = tape.param(x.clone());
                    let sd = tape.std_dev(xv, 1e-6);
                    let loss = tape.log2(sd, 1e-12);
                    tape.backward(loss).unwrap();
                    let g = tape.grad(xv).unwrap().clone();
                    for idx in 0..x.len() {
                        let fd = finite_diff(
                            |t| tensor::std_dev(t).max(1e-6).log2(),
                            &x,
                            idx,
                            2e-3,
                        );
                        assert!(
                            rel_err(g.data()[idx] as f64, fd) < 1e-3,
                            "std path element {idx}: {} vs {fd}",
                            g.data()[idx]
                        );
                    }

                    let mut tape = Tape::new();
                    let xv = tape.param(x.clone());
                    let ss = tape.sum_squares(xv);
                    let loss = tape.log10(ss, 1e-12);
                    tape.backward(loss).unwrap();
                    let g = tape.grad(xv).unwrap().clone();
                    for idx in 0..x.len() {
                        let fd = finite_diff(
                            |t| tensor::sum_squares(t).max(1e-12).log10(),
                            &x,
                            idx,
                            2e-3,
                        );
                        assert!(rel_err(g.data()[idx] as f64, fd) < 1e-3);
                    }
                }
            }
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(SignalTensor::scalar(2.0));
        let c = tape.constant(SignalTensor::scalar(3.0));
        let s = tape.add(x, c).unwrap();
        let loss = tape.sum_squares(s);
        tape.backward(loss).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(x).unwrap().item(), 10.0);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.param(SignalTensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        assert!(tape.backward(x).is_err());
    }
}
