use ndarray::{s, Array2, ArrayView2, Axis, Ix1, Ix2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use crate::condition::Condition;
use crate::error::{Error, Result};

/// Shape of a [`ScoreNet`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    /// Width of the sinusoidal embedding of `t / T`. Zero disables it.
    pub time_embed_dim: usize,
    /// Width of the learned condition embedding. Zero disables it.
    pub cond_embed_dim: usize,
    /// Number of real classes; the table holds one extra null row.
    pub num_classes: usize,
    /// Largest timestep the network is queried at.
    pub t_max: usize,
}

impl Arch {
    /// Three hidden layers of 128 units on 2-D data with eight classes.
    pub fn toy_default(t_max: usize) -> Self {
        Self {
            input_dim: 2,
            hidden: vec![128, 128, 128],
            time_embed_dim: 32,
            cond_embed_dim: 32,
            num_classes: 8,
            t_max,
        }
    }

    pub fn num_conditions(&self) -> usize {
        self.num_classes + 1
    }

    fn feature_dim(&self) -> usize {
        self.input_dim + self.time_embed_dim + self.cond_embed_dim
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut fan_in = self.feature_dim();
        for &h in &self.hidden {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims.push((fan_in, self.input_dim));
        dims
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut shapes = Vec::new();
        if self.cond_embed_dim > 0 {
            shapes.push((
                COND_EMBED.to_string(),
                vec![self.num_conditions(), self.cond_embed_dim],
            ));
        }
        for (i, (fan_in, fan_out)) in self.layer_dims().into_iter().enumerate() {
            shapes.push((weight_name(i), vec![fan_in, fan_out]));
            shapes.push((bias_name(i), vec![fan_out]));
        }
        shapes
    }
}

const COND_EMBED: &str = "cond_embed";

fn weight_name(i: usize) -> String {
    format!("layers.{i}.weight")
}

fn bias_name(i: usize) -> String {
    format!("layers.{i}.bias")
}

/// A batch of network inputs: one row of `x`, one timestep and one condition
/// per example.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Array2<f64>,
    pub t: Vec<usize>,
    pub cond: Vec<Condition>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }
}

/// Activations saved by a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each linear layer (features for layer 0).
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each hidden layer.
    pre_act: Vec<Array2<f64>>,
    slots: Vec<usize>,
}

/// Epsilon-prediction MLP `eps(x_t, t, c)`.
///
/// Features are `[x | sinusoid(t / T) | embed(c)]`, followed by SiLU hidden
/// layers and a linear read-out of the same width as `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreNet {
    arch: Arch,
    params: ParamSet,
}

impl ScoreNet {
    pub fn zeros(arch: Arch) -> Result<Self> {
        let params = ParamSet::zeros(&arch.param_shapes())?;
        Ok(Self { arch, params })
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases; the
    /// condition table is Uniform(-1, 1).
    pub fn init<R: Rng + ?Sized>(arch: Arch, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(arch)?;
        let layer_dims = net.arch.layer_dims();
        if let Some(table) = net.params.slice_mut(COND_EMBED) {
            table
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-1.0..1.0));
        }
        for (i, (fan_in, _)) in layer_dims.into_iter().enumerate() {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            for name in [weight_name(i), bias_name(i)] {
                let slice = net.params.slice_mut(&name).expect("layer exists");
                slice
                    .iter_mut()
                    .for_each(|v| *v = rng.random_range(-bound..bound));
            }
        }
        Ok(net)
    }

    pub fn from_params(arch: Arch, params: ParamSet) -> Result<Self> {
        let expected = ParamSet::zeros(&arch.param_shapes())?;
        expected.check_compatible(&params)?;
        Ok(Self { arch, params })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn with_params(&self, params: ParamSet) -> Result<Self> {
        Self::from_params(self.arch.clone(), params)
    }

    pub fn into_params(self) -> ParamSet {
        self.params
    }

    fn weight(&self, i: usize) -> ArrayView2<'_, f64> {
        self.params
            .get(&weight_name(i))
            .expect("weight exists")
            .view()
            .into_dimensionality::<Ix2>()
            .expect("2-D weight")
    }

    fn bias(&self, i: usize) -> ndarray::ArrayView1<'_, f64> {
        self.params
            .get(&bias_name(i))
            .expect("bias exists")
            .view()
            .into_dimensionality::<Ix1>()
            .expect("1-D bias")
    }

    fn num_layers(&self) -> usize {
        self.arch.hidden.len() + 1
    }

    fn validate(&self, x: &ArrayView2<f64>, t: &[usize], cond: &[Condition]) -> Result<()> {
        if x.ncols() != self.arch.input_dim {
            return Err(Error::invalid(format!(
                "input has {} columns, network expects {}",
                x.ncols(),
                self.arch.input_dim
            )));
        }
        if t.len() != x.nrows() || cond.len() != x.nrows() {
            return Err(Error::invalid(format!(
                "batch of {} rows with {} timesteps and {} conditions",
                x.nrows(),
                t.len(),
                cond.len()
            )));
        }
        if let Some(&bad) = t.iter().find(|&&t| t > self.arch.t_max) {
            return Err(Error::invalid(format!(
                "timestep {bad} exceeds T = {}",
                self.arch.t_max
            )));
        }
        for c in cond {
            c.check(self.arch.num_classes)?;
        }
        Ok(())
    }

    fn features(&self, x: &ArrayView2<f64>, t: &[usize], slots: &[usize]) -> Array2<f64> {
        let arch = &self.arch;
        let mut h = Array2::zeros((x.nrows(), arch.feature_dim()));
        h.slice_mut(s![.., ..arch.input_dim]).assign(x);
        for (row, &ti) in t.iter().enumerate() {
            let off = arch.input_dim;
            time_embedding(
                ti,
                arch.t_max,
                h.slice_mut(s![row, off..off + arch.time_embed_dim])
                    .as_slice_mut()
                    .expect("row-major"),
            );
        }
        if arch.cond_embed_dim > 0 {
            let table = self.params.get(COND_EMBED).expect("table exists");
            let table = table.view().into_dimensionality::<Ix2>().expect("2-D");
            let off = arch.input_dim + arch.time_embed_dim;
            for (row, &slot) in slots.iter().enumerate() {
                h.slice_mut(s![row, off..]).assign(&table.row(slot));
            }
        }
        h
    }

    fn run(
        &self,
        x: ArrayView2<f64>,
        t: &[usize],
        cond: &[Condition],
        keep: bool,
    ) -> Result<(Array2<f64>, Option<ForwardCache>)> {
        self.validate(&x, t, cond)?;
        let slots: Vec<usize> = cond.iter().map(|c| c.slot(self.arch.num_classes)).collect();
        let mut h = self.features(&x, t, &slots);
        let mut inputs = Vec::new();
        let mut pre_act = Vec::new();
        let last = self.num_layers() - 1;
        for i in 0..=last {
            let mut z = h.dot(&self.weight(i));
            z += &self.bias(i);
            if i == last {
                if keep {
                    inputs.push(h);
                }
                let cache = keep.then(|| ForwardCache {
                    inputs,
                    pre_act,
                    slots,
                });
                return Ok((z, cache));
            }
            let next = z.mapv(silu);
            if keep {
                inputs.push(h);
                pre_act.push(z);
            }
            h = next;
        }
        unreachable!("loop returns at the last layer")
    }

    pub fn forward_batch(
        &self,
        x: ArrayView2<f64>,
        t: &[usize],
        cond: &[Condition],
    ) -> Result<Array2<f64>> {
        Ok(self.run(x, t, cond, false)?.0)
    }

    pub fn forward(&self, x: &[f64], t: usize, cond: Condition) -> Result<Vec<f64>> {
        let x =
            ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::invalid(e.to_string()))?;
        Ok(self
            .forward_batch(x, &[t], &[cond])?
            .into_raw_vec_and_offset()
            .0)
    }

    pub fn forward_cached(&self, batch: &Batch) -> Result<(Array2<f64>, ForwardCache)> {
        let (out, cache) = self.run(batch.x.view(), &batch.t, &batch.cond, true)?;
        Ok((out, cache.expect("cache requested")))
    }

    /// Reverse pass: gradient of a scalar loss w.r.t. every parameter, given
    /// the loss gradient w.r.t. the network output.
    pub fn backward(&self, cache: &ForwardCache, grad_out: ArrayView2<f64>) -> Result<ParamSet> {
        let rows = cache.inputs[0].nrows();
        if grad_out.dim() != (rows, self.arch.input_dim) {
            return Err(Error::ShapeMismatch(format!(
                "output gradient {:?}, expected ({rows}, {})",
                grad_out.dim(),
                self.arch.input_dim
            )));
        }
        let mut grads = self.params.zeros_like();
        let mut g = grad_out.to_owned();
        for i in (0..self.num_layers()).rev() {
            let dw = cache.inputs[i].t().dot(&g);
            let db = g.sum_axis(Axis(0));
            grads
                .slice_mut(&weight_name(i))
                .expect("weight")
                .copy_from_slice(dw.as_standard_layout().as_slice().expect("contiguous"));
            grads
                .slice_mut(&bias_name(i))
                .expect("bias")
                .copy_from_slice(db.as_slice().expect("contiguous"));
            let mut dh = g.dot(&self.weight(i).t());
            if i > 0 {
                dh.zip_mut_with(&cache.pre_act[i - 1], |d, &z| *d *= silu_grad(z));
                g = dh;
            } else if self.arch.cond_embed_dim > 0 {
                let off = self.arch.input_dim + self.arch.time_embed_dim;
                let width = self.arch.cond_embed_dim;
                let table = grads.slice_mut(COND_EMBED).expect("table");
                for (row, &slot) in cache.slots.iter().enumerate() {
                    let dst = &mut table[slot * width..(slot + 1) * width];
                    for (d, v) in dst.iter_mut().zip(dh.slice(s![row, off..]).iter()) {
                        *d += v;
                    }
                }
            }
        }
        Ok(grads)
    }

    /// Mean-squared-error loss `mean_b ||out_b - target_b||^2` and its gradient.
    pub fn mse_backward(&self, batch: &Batch, targets: ArrayView2<f64>) -> Result<(f64, ParamSet)> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let (out, cache) = self.forward_cached(batch)?;
        if out.dim() != targets.dim() {
            return Err(Error::ShapeMismatch(format!(
                "targets {:?} vs outputs {:?}",
                targets.dim(),
                out.dim()
            )));
        }
        let n = batch.len() as f64;
        let resid = &out - &targets;
        let loss = resid.iter().map(|r| r * r).sum::<f64>() / n;
        if !loss.is_finite() {
            return Err(Error::TrainingDivergence(format!("non-finite loss {loss}")));
        }
        let grad_out = resid * (2.0 / n);
        Ok((loss, self.backward(&cache, grad_out.view())?))
    }
}

/// Sinusoidal features of `t / T` written into `out`: sines then cosines over
/// geometrically spaced frequencies. An odd trailing slot stays zero.
pub fn time_embedding(t: usize, t_max: usize, out: &mut [f64]) {
    let half = out.len() / 2;
    if half == 0 {
        return;
    }
    let pos = 1000.0 * t as f64 / t_max as f64;
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        let arg = pos * freq;
        out[k] = arg.sin();
        out[half + k] = arg.cos();
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[inline]
pub(crate) fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

#[inline]
fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_arch() -> Arch {
        Arch {
            input_dim: 2,
            hidden: vec![5, 4],
            time_embed_dim: 4,
            cond_embed_dim: 3,
            num_classes: 3,
            t_max: 50,
        }
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = ScoreNet::zeros(Arch::toy_default(1000)).unwrap();
        let out = net.forward(&[0.3, -2.0], 517, Condition::Class(4)).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
        let out = net.forward(&[1.0, 1.0], 0, Condition::Null).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn forward_is_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = ScoreNet::init(small_arch(), &mut rng).unwrap();
        let a = net.forward(&[0.1, 0.2], 17, Condition::Class(1)).unwrap();
        let b = net.forward(&[0.1, 0.2], 17, Condition::Class(1)).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let net = ScoreNet::zeros(small_arch()).unwrap();
        assert!(matches!(
            net.forward(&[0.1], 1, Condition::Null),
            Err(Error::InvalidInput(_))
        ));
        assert!(net.forward(&[0.1, 0.2], 51, Condition::Null).is_err());
        assert!(net.forward(&[0.1, 0.2], 1, Condition::Class(3)).is_err());
    }

    #[test]
    fn zero_residual_gives_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = ScoreNet::init(small_arch(), &mut rng).unwrap();
        let batch = Batch {
            x: array![[0.1, 0.2], [-0.3, 0.9]],
            t: vec![3, 40],
            cond: vec![Condition::Class(0), Condition::Null],
        };
        let targets = net
            .forward_batch(batch.x.view(), &batch.t, &batch.cond)
            .unwrap();
        let (loss, grads) = net.mse_backward(&batch, targets.view()).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(grads.max_abs_diff(&grads.zeros_like()).unwrap(), 0.0);
    }

    #[test]
    fn single_parameter_closed_form() {
        // one linear unit, no embeddings: out = w * x + b
        let arch = Arch {
            input_dim: 1,
            hidden: vec![],
            time_embed_dim: 0,
            cond_embed_dim: 0,
            num_classes: 1,
            t_max: 10,
        };
        let mut net = ScoreNet::zeros(arch).unwrap();
        net.params_mut().slice_mut("layers.0.weight").unwrap()[0] = 0.7;
        let batch = Batch {
            x: array![[2.0], [-1.0], [0.5]],
            t: vec![1, 2, 3],
            cond: vec![Condition::Null; 3],
        };
        let targets = array![[1.0], [0.0], [3.0]];
        let (_, grads) = net.mse_backward(&batch, targets.view()).unwrap();
        let expected: f64 = batch
            .x
            .column(0)
            .iter()
            .zip(targets.column(0))
            .map(|(x, y)| 2.0 * (0.7 * x - y) * x / 3.0)
            .sum();
        let got = grads.get("layers.0.weight").unwrap()[[0, 0]];
        assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
    }

    #[test]
    fn mse_rejects_empty_and_mismatch() {
        let net = ScoreNet::zeros(small_arch()).unwrap();
        let empty = Batch {
            x: Array2::zeros((0, 2)),
            t: vec![],
            cond: vec![],
        };
        assert!(net
            .mse_backward(&empty, Array2::zeros((0, 2)).view())
            .is_err());
        let batch = Batch {
            x: array![[0.0, 0.0]],
            t: vec![1],
            cond: vec![Condition::Null],
        };
        assert!(matches!(
            net.mse_backward(&batch, Array2::zeros((1, 3)).view()),
            Err(Error::ShapeMismatch(_))
        ));
        let nan = array![[f64::NAN, 0.0]];
        assert!(matches!(
            net.mse_backward(&batch, nan.view()),
            Err(Error::TrainingDivergence(_))
        ));
    }

    #[test]
    fn toy_default_param_count() {
        let net = ScoreNet::zeros(Arch::toy_default(1000)).unwrap();
        let expected = 9 * 32 + (66 * 128 + 128) + 2 * (128 * 128 + 128) + (128 * 2 + 2);
        assert_eq!(net.params().num_scalars(), expected);
    }
}
