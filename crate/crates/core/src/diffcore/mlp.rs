use rand::Rng;
use rayon::prelude::*;

use super::graph::{Activation, ParamGraph, ParamId, Var};
use super::tensor::{gemm, Tensor};
use crate::error::{shape_err, Error, Result};

/// Fully connected network. Hidden layers use `activation`; the output layer
/// is linear.
#[derive(Clone, Debug)]
pub struct Mlp {
    name: String,
    widths: Vec<usize>,
    activation: Activation,
    layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    /// Registers weights `<name>.<i>.w` (`in x out`) and biases `<name>.<i>.b`
    /// (`1 x out`), initialised uniformly in `±1/sqrt(fan_in)`.
    pub fn new<R: Rng + ?Sized>(
        graph: &mut ParamGraph,
        name: &str,
        widths: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "mlp '{name}' needs at least two positive widths, got {widths:?}"
            )));
        }
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for (i, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
            let b: Vec<f64> = (0..fan_out).map(|_| rng.random_range(-bound..bound)).collect();
            let w = graph.add_param(format!("{name}.{i}.w"), Tensor::matrix(fan_in, fan_out, w)?)?;
            let b = graph.add_param(format!("{name}.{i}.b"), Tensor::matrix(1, fan_out, b)?)?;
            layers.push((w, b));
        }
        Ok(Self {
            name: name.to_string(),
            widths: widths.to_vec(),
            activation,
            layers,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("at least two widths")
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    /// Records the forward pass on the tape with trainable parameters.
    pub fn forward(&self, graph: &mut ParamGraph, x: Var) -> Result<Var> {
        self.forward_impl(graph, x, false)
    }

    /// Forward pass whose parameters receive no gradient.
    pub fn forward_frozen(&self, graph: &mut ParamGraph, x: Var) -> Result<Var> {
        self.forward_impl(graph, x, true)
    }

    fn forward_impl(&self, graph: &mut ParamGraph, x: Var, frozen: bool) -> Result<Var> {
        self.check_input(graph.value(x))?;
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let (wv, bv) = if frozen {
                (graph.frozen_param(w), graph.frozen_param(b))
            } else {
                (graph.param(w), graph.param(b))
            };
            let z = graph.matmul(h, wv)?;
            h = graph.add_bias(z, bv)?;
            if i < last {
                h = graph.activation(h, self.activation);
            }
        }
        Ok(h)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        x.ensure_matrix("mlp forward")?;
        if x.cols() != self.input_dim() {
            return shape_err(
                "mlp forward",
                format!("'{}' expects {} inputs, got {}", self.name, self.input_dim(), x.cols()),
            );
        }
        Ok(())
    }

    /// Tape-free evaluation on a read-only parameter snapshot.
    pub fn eval(&self, graph: &ParamGraph, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        x.ensure_finite("mlp input")?;
        let rows = x.rows();
        let last = self.layers.len() - 1;
        let mut h = x.data().to_vec();
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let (wt, bt) = (graph.param_value(w), graph.param_value(b));
            let (k, n) = (wt.rows(), wt.cols());
            let mut out: Vec<f64> = bt.data().iter().copied().cycle().take(rows * n).collect();
            gemm(rows, k, n, &h, false, wt.data(), false, &mut out, 1.0);
            if i < last {
                let act = self.activation;
                out.iter_mut().for_each(|v| *v = act.apply(*v));
            }
            h = out;
        }
        Tensor::matrix(rows, self.output_dim(), h)
    }

    /// [`Mlp::eval`] over independent row blocks in parallel. The result is
    /// identical to a single call because rows never interact.
    pub fn eval_blocks(&self, graph: &ParamGraph, x: &Tensor, block_rows: usize) -> Result<Tensor> {
        self.check_input(x)?;
        let block_rows = block_rows.max(1);
        let starts: Vec<usize> = (0..x.rows()).step_by(block_rows).collect();
        let parts = starts
            .par_iter()
            .map(|&s| self.eval(graph, &x.slice_rows(s, (s + block_rows).min(x.rows()))))
            .collect::<Result<Vec<_>>>()?;
        if parts.is_empty() {
            return Tensor::matrix(0, self.output_dim(), Vec::new());
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        Tensor::concat_rows(&refs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_network_passes_input_through() {
        let mut g = ParamGraph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new(&mut g, "id", &[3, 3], Activation::Identity, &mut rng).unwrap();
        let [w, b] = mlp.param_ids()[..] else { panic!() };
        g.set_param_value(w, Tensor::identity(3)).unwrap();
        g.set_param_value(b, Tensor::zeros(&[1, 3])).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, -2.0, 3.5], vec![0.0, 4.0, -1.0]]).unwrap();
        assert_eq!(mlp.eval(&g, &x).unwrap(), x);
        let xv = g.input(x.clone()).unwrap();
        let y = mlp.forward(&mut g, xv).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn rejects_wrong_input_width() {
        let mut g = ParamGraph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new(&mut g, "n", &[2, 4, 1], Activation::Tanh, &mut rng).unwrap();
        assert!(mlp.eval(&g, &Tensor::zeros(&[5, 3])).is_err());
    }

    #[test]
    fn block_eval_matches_single_pass() {
        let mut g = ParamGraph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mlp = Mlp::new(&mut g, "n", &[4, 8, 8, 2], Activation::LeakyRelu, &mut rng).unwrap();
        let data: Vec<f64> = (0..4 * 37).map(|i| ((i * 31 % 17) as f64 - 8.0) / 3.0).collect();
        let x = Tensor::matrix(37, 4, data).unwrap();
        let whole = mlp.eval(&g, &x).unwrap();
        let blocks = mlp.eval_blocks(&g, &x, 5).unwrap();
        for (a, b) in whole.data().iter().zip(blocks.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}
