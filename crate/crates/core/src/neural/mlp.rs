use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{self, tag};

/// Dense tanh network with a linear output layer.
///
/// All parameters live in one flat vector. Layer `k` stores its `out x in`
/// weight matrix row-major, followed by its `out` biases.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Parameter gradients, laid out exactly like [`Mlp`] parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    sizes: Vec<usize>,
    pub values: Vec<f64>,
}

/// Per-layer activations of a batched forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct Trace {
    batch: usize,
    activations: Vec<Vec<f64>>,
}

impl Trace {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Network outputs, `batch x output_dim` row-major.
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("trace has an output")
    }
}

fn param_count_for(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

fn validate_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 {
        return Err(Error::invalid(
            "layer_sizes",
            format!("need an input and an output layer, got {} sizes", sizes.len()),
        ));
    }
    if sizes.contains(&0) {
        return Err(Error::invalid("layer_sizes", "all layer sizes must be positive"));
    }
    Ok(())
}

impl Mlp {
    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn new(sizes: &[usize], seed: u64) -> Result<Self> {
        validate_sizes(sizes)?;
        let mut rng = rng::stream(seed, &[tag::INIT]);
        let mut params = Vec::with_capacity(param_count_for(sizes));
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            params.extend((0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)));
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            params,
        })
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        validate_sizes(sizes)?;
        Ok(Self {
            sizes: sizes.to_vec(),
            params: vec![0.0; param_count_for(sizes)],
        })
    }

    pub fn from_params(sizes: &[usize], params: Vec<f64>) -> Result<Self> {
        validate_sizes(sizes)?;
        let expected = param_count_for(sizes);
        if params.len() != expected {
            return Err(Error::dims("Mlp::from_params", expected, params.len()));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            params,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn layer_offset(&self, k: usize) -> usize {
        param_count_for(&self.sizes[..=k])
    }

    /// `(weights, biases)` of layer `k`.
    pub fn layer(&self, k: usize) -> (&[f64], &[f64]) {
        let (i, o) = (self.sizes[k], self.sizes[k + 1]);
        let off = self.layer_offset(k);
        let (w, rest) = self.params[off..].split_at(i * o);
        (w, &rest[..o])
    }

    pub fn layer_mut(&mut self, k: usize) -> (&mut [f64], &mut [f64]) {
        let (i, o) = (self.sizes[k], self.sizes[k + 1]);
        let off = self.layer_offset(k);
        let (w, rest) = self.params[off..].split_at_mut(i * o);
        (w, &mut rest[..o])
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            sizes: self.sizes.clone(),
            values: vec![0.0; self.params.len()],
        }
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.forward_batch(input, 1)
    }

    /// Evaluates `batch` inputs stored row-major; returns `batch x output_dim`.
    pub fn forward_batch(&self, inputs: &[f64], batch: usize) -> Result<Vec<f64>> {
        Ok(self
            .forward_trace(inputs, batch)?
            .activations
            .pop()
            .unwrap())
    }

    pub fn forward_trace(&self, inputs: &[f64], batch: usize) -> Result<Trace> {
        if inputs.len() != batch * self.input_dim() {
            return Err(Error::dims(
                "Mlp::forward input",
                batch * self.input_dim(),
                inputs.len(),
            ));
        }
        let mut activations = Vec::with_capacity(self.sizes.len());
        activations.push(inputs.to_vec());
        for k in 0..self.n_layers() {
            let (fan_in, fan_out) = (self.sizes[k], self.sizes[k + 1]);
            let (w, b) = self.layer(k);
            let mut z: Vec<f64> = b.iter().copied().cycle().take(batch * fan_out).collect();
            // z (batch x out) += a (batch x in) * w^T
            gemm(
                batch,
                fan_in,
                fan_out,
                MatRef::row_major(&activations[k], fan_in),
                MatRef::transposed(w, fan_in),
                1.0,
                &mut z,
            );
            if k + 1 < self.n_layers() {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            activations.push(z);
        }
        Ok(Trace { batch, activations })
    }

    /// Gradient of `<output_grad, forward(input)>` with respect to every parameter.
    pub fn backward(&self, input: &[f64], output_grad: &[f64]) -> Result<Gradients> {
        let trace = self.forward_trace(input, 1)?;
        let mut grads = self.zero_gradients();
        self.backward_trace(&trace, output_grad, &mut grads)?;
        Ok(grads)
    }

    /// Accumulates into `grads` the gradient of `sum_b <output_grads[b], out[b]>`.
    pub fn backward_trace(
        &self,
        trace: &Trace,
        output_grads: &[f64],
        grads: &mut Gradients,
    ) -> Result<()> {
        let batch = trace.batch;
        if output_grads.len() != batch * self.output_dim() {
            return Err(Error::dims(
                "Mlp::backward output_grad",
                batch * self.output_dim(),
                output_grads.len(),
            ));
        }
        if grads.values.len() != self.params.len() {
            return Err(Error::dims(
                "Mlp::backward gradients",
                self.params.len(),
                grads.values.len(),
            ));
        }
        let mut delta = output_grads.to_vec();
        for k in (0..self.n_layers()).rev() {
            let (fan_in, fan_out) = (self.sizes[k], self.sizes[k + 1]);
            if k + 1 < self.n_layers() {
                let act = &trace.activations[k + 1];
                delta
                    .iter_mut()
                    .zip(act)
                    .for_each(|(d, a)| *d *= 1.0 - a * a);
            }
            let off = self.layer_offset(k);
            let (gw, rest) = grads.values[off..].split_at_mut(fan_in * fan_out);
            let gb = &mut rest[..fan_out];
            // gw (out x in) += delta^T (out x batch) * a (batch x in)
            gemm(
                fan_out,
                batch,
                fan_in,
                MatRef::transposed(&delta, fan_out),
                MatRef::row_major(&trace.activations[k], fan_in),
                1.0,
                gw,
            );
            for row in delta.chunks_exact(fan_out) {
                gb.iter_mut().zip(row).for_each(|(g, d)| *g += d);
            }
            if k > 0 {
                let (w, _) = self.layer(k);
                let mut prev = vec![0.0; batch * fan_in];
                // prev (batch x in) = delta (batch x out) * w (out x in)
                gemm(
                    batch,
                    fan_out,
                    fan_in,
                    MatRef::row_major(&delta, fan_out),
                    MatRef::row_major(w, fan_in),
                    0.0,
                    &mut prev,
                );
                delta = prev;
            }
        }
        Ok(())
    }
}

impl Gradients {
    pub fn layer_sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().for_each(|g| *g *= s);
    }

    pub fn add_assign(&mut self, other: &Gradients) -> Result<()> {
        if self.sizes != other.sizes {
            return Err(Error::dims(
                "Gradients::add_assign",
                self.values.len(),
                other.values.len(),
            ));
        }
        self.values
            .iter_mut()
            .zip(&other.values)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }
}

/// A strided read-only matrix view for [`gemm`].
#[derive(Clone, Copy)]
struct MatRef<'a> {
    data: &'a [f64],
    row_stride: usize,
    col_stride: usize,
}

impl<'a> MatRef<'a> {
    /// Row-major storage with `cols` columns.
    fn row_major(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// The transpose of a row-major matrix with `stored_cols` columns.
    fn transposed(data: &'a [f64], stored_cols: usize) -> Self {
        Self {
            data,
            row_stride: 1,
            col_stride: stored_cols,
        }
    }

    fn max_index(&self, rows: usize, cols: usize) -> usize {
        (rows - 1) * self.row_stride + (cols - 1) * self.col_stride
    }
}

/// `c (m x n, row-major) = a (m x k) * b (k x n) + beta * c`.
fn gemm(m: usize, k: usize, n: usize, a: MatRef, b: MatRef, beta: f64, c: &mut [f64]) {
    if m == 0 || n == 0 {
        return;
    }
    assert_eq!(c.len(), m * n);
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(a.max_index(m, k) < a.data.len());
    assert!(b.max_index(k, n) < b.data.len());
    // SAFETY: the asserts above bound every index that dgemm touches in a, b and c.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    /// Straightforward forward pass used as an independent oracle.
    fn naive_forward(net: &Mlp, input: &[f64]) -> Vec<f64> {
        let mut a = input.to_vec();
        for k in 0..net.n_layers() {
            let (w, b) = net.layer(k);
            let (i, o) = (net.sizes[k], net.sizes[k + 1]);
            let mut z = vec![0.0; o];
            for r in 0..o {
                let mut s = b[r];
                for c in 0..i {
                    s += w[r * i + c] * a[c];
                }
                z[r] = if k + 1 < net.n_layers() { s.tanh() } else { s };
            }
            a = z;
        }
        a
    }

    fn random_vec(seed: u64, n: usize) -> Vec<f64> {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn init_counts_and_determinism() {
        let a = Mlp::new(&[3, 128, 128, 3], 11).unwrap();
        assert_eq!(a.param_count(), 17_411);
        let b = Mlp::new(&[3, 128, 128, 3], 11).unwrap();
        assert!(a
            .params()
            .iter()
            .zip(b.params())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        let c = Mlp::new(&[3, 128, 128, 3], 12).unwrap();
        assert_ne!(a, c);
        assert!(Mlp::new(&[2], 0).is_err());
        assert!(Mlp::new(&[], 0).is_err());
        assert!(Mlp::new(&[2, 0, 1], 0).is_err());
    }

    #[test]
    fn init_bounds_and_zero_bias() {
        let net = Mlp::new(&[16, 4, 2], 3).unwrap();
        let (w, b) = net.layer(0);
        assert!(w.iter().all(|v| v.abs() <= 0.25));
        assert!(b.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_net_outputs_zero() {
        let net = Mlp::zeros(&[4, 8, 3]).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 3.0, 0.5]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn single_linear_layer_identity() {
        let mut net = Mlp::zeros(&[3, 3]).unwrap();
        let (w, _) = net.layer_mut(0);
        w[0] = 1.0;
        w[4] = 1.0;
        w[8] = 1.0;
        let v = [0.3, -7.0, 12.5];
        assert_eq!(net.forward(&v).unwrap(), v.to_vec());
    }

    #[test]
    fn forward_matches_naive_oracle() {
        let net = Mlp::new(&[7, 13, 5, 3], 99).unwrap();
        for s in 0..5 {
            let x = random_vec(s, 7);
            let fast = net.forward(&x).unwrap();
            let slow = naive_forward(&net, &x);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() <= 1e-14, "{a} vs {b}");
            }
        }
        // batched evaluation agrees with row-by-row
        let xs = random_vec(77, 7 * 6);
        let batched = net.forward_batch(&xs, 6).unwrap();
        for (row, out) in xs.chunks(7).zip(batched.chunks(3)) {
            let slow = naive_forward(&net, row);
            for (a, b) in out.iter().zip(&slow) {
                assert!((a - b).abs() <= 1e-14);
            }
        }
    }

    #[test]
    fn forward_rejects_wrong_input() {
        let net = Mlp::new(&[3, 4, 2], 0).unwrap();
        assert!(matches!(
            net.forward(&[1.0, 2.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(net.backward(&[1.0, 2.0, 3.0], &[1.0]).is_err());
    }

    #[test]
    fn backward_zero_seed_gives_zero() {
        let net = Mlp::new(&[3, 6, 2], 5).unwrap();
        let g = net.backward(&[0.1, 0.2, 0.3], &[0.0, 0.0]).unwrap();
        assert!(g.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_is_linear_in_seed() {
        let net = Mlp::new(&[3, 6, 2], 5).unwrap();
        let x = [0.1, -0.2, 0.3];
        let g1 = net.backward(&x, &[0.7, -1.1]).unwrap();
        let g2 = net.backward(&x, &[1.4, -2.2]).unwrap();
        for (a, b) in g1.values.iter().zip(&g2.values) {
            assert!((2.0 * a - b).abs() <= 1e-14 * (1.0 + b.abs()));
        }
    }

    fn scalar_output(net: &Mlp, x: &[f64], seed: &[f64]) -> f64 {
        naive_forward(net, x).iter().zip(seed).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn backward_matches_finite_differences_small() {
        let net = Mlp::new(&[2, 3, 1], 21).unwrap();
        let x = [0.4, -0.9];
        let seed = [1.3];
        let g = net.backward(&x, &seed).unwrap();
        let h = 1e-5;
        for i in 0..net.param_count() {
            let mut plus = net.clone();
            plus.params_mut()[i] += h;
            let mut minus = net.clone();
            minus.params_mut()[i] -= h;
            let fd = (scalar_output(&plus, &x, &seed) - scalar_output(&minus, &x, &seed)) / (2.0 * h);
            let rel = (fd - g.values[i]).abs() / fd.abs().max(g.values[i].abs()).max(1e-8);
            assert!(rel <= 1e-6, "param {i}: fd {fd} vs {}", g.values[i]);
        }
    }

    #[test]
    fn batch_gradient_is_sum_of_singles() {
        let net = Mlp::new(&[4, 5, 2], 8).unwrap();
        let xs = random_vec(1, 12);
        let seeds = random_vec(2, 6);
        let trace = net.forward_trace(&xs, 3).unwrap();
        let mut batched = net.zero_gradients();
        net.backward_trace(&trace, &seeds, &mut batched).unwrap();
        let mut summed = net.zero_gradients();
        for (x, s) in xs.chunks(4).zip(seeds.chunks(2)) {
            summed.add_assign(&net.backward(x, s).unwrap()).unwrap();
        }
        for (a, b) in batched.values.iter().zip(&summed.values) {
            assert!((a - b).abs() <= 1e-13);
        }
    }
}
