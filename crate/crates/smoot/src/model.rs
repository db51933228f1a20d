//! The small CNN classifier used throughout: two 3x3 stride-1 conv
//! layers (32 and 64 filters), 2x2 max pooling, two fully connected
//! layers, dropout at 0.25 and 0.5.

use rand::Rng;

use crate::tensor::{Element, Graph, Tensor, Var};
use crate::{Error, Result};

pub const PARAM_NAMES: [&str; 8] = [
    "conv1.w", "conv1.b", "conv2.w", "conv2.b", "fc1.w", "fc1.b", "fc2.w", "fc2.b",
];

/// conv(3x3, C→32) → relu → conv(3x3, 32→64) → relu → maxpool(2x2) →
/// dropout(0.25) → flatten → fc(hidden) → relu → dropout(0.5) →
/// fc(classes).
///
/// Valid convolutions, so each conv crops one pixel of border.
#[derive(Clone)]
pub struct MnistCnn<T: Element> {
    pub in_channels: usize,
    pub in_height: usize,
    pub in_width: usize,
    pub num_classes: usize,
    pub hidden: usize,
    params: Vec<Tensor<T>>,
}

/// Parameter leaves bound into one graph; both branches of a training
/// step reuse the same leaves so their gradients accumulate.
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl<T: Element> MnistCnn<T> {
    /// Fresh model with uniform `±1/sqrt(fan_in)` initialization.
    pub fn new<R: Rng>(
        in_channels: usize,
        in_height: usize,
        in_width: usize,
        num_classes: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if in_height < 6 || in_width < 6 {
            return Err(Error::Shape(format!(
                "model: input {in_height}x{in_width} too small for two 3x3 valid convs and 2x2 pooling"
            )));
        }
        let flat = 64 * ((in_height - 4) / 2) * ((in_width - 4) / 2);
        let mut init = |shape: Vec<usize>, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let len = shape.iter().product();
            let data = (0..len)
                .map(|_| T::from_f64(rng.random_range(-bound..bound)))
                .collect();
            Tensor::new(shape, data)
        };
        let params = vec![
            init(vec![32, in_channels, 3, 3], in_channels * 9)?,
            init(vec![32], in_channels * 9)?,
            init(vec![64, 32, 3, 3], 32 * 9)?,
            init(vec![64], 32 * 9)?,
            init(vec![flat, hidden], flat)?,
            init(vec![hidden], flat)?,
            init(vec![hidden, num_classes], hidden)?,
            init(vec![num_classes], hidden)?,
        ];
        Ok(MnistCnn {
            in_channels,
            in_height,
            in_width,
            num_classes,
            hidden,
            params,
        })
    }

    /// Standard 28x28 single-channel, 10-class instance.
    pub fn mnist<R: Rng>(rng: &mut R) -> Result<Self> {
        Self::new(1, 28, 28, 10, 128, rng)
    }

    /// Rebuilds a model from named checkpoint tensors.
    pub fn from_params(named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut by_name: std::collections::HashMap<String, Tensor<T>> =
            named.into_iter().collect();
        let mut params = Vec::with_capacity(8);
        for name in PARAM_NAMES {
            let t = by_name
                .remove(name)
                .ok_or_else(|| Error::Format(format!("checkpoint: missing tensor {name}")))?;
            params.push(t);
        }
        if !by_name.is_empty() {
            let extra: Vec<_> = by_name.keys().cloned().collect();
            return Err(Error::Format(format!("checkpoint: unexpected tensors {extra:?}")));
        }
        let s1 = params[0].shape().to_vec();
        let sfc1 = params[4].shape().to_vec();
        let sfc2 = params[6].shape().to_vec();
        if s1.len() != 4 || s1[0] != 32 || sfc1.len() != 2 || sfc2.len() != 2 {
            return Err(Error::Format("checkpoint: unexpected parameter shapes".into()));
        }
        let in_channels = s1[1];
        let flat = sfc1[0];
        let plane = flat / 64;
        // Recover square spatial dims from the flattened fc1 input:
        // side = (h-4)/2, so h = 2*side + 4 (floor pooling makes odd
        // input sizes unrecoverable; the even reconstruction is used).
        let side = (plane as f64).sqrt().round() as usize;
        if side * side != plane {
            return Err(Error::Format("checkpoint: non-square feature map".into()));
        }
        Ok(MnistCnn {
            in_channels,
            in_height: 2 * side + 4,
            in_width: 2 * side + 4,
            num_classes: sfc2[1],
            hidden: sfc1[1],
            params,
        })
    }

    pub fn params(&self) -> impl Iterator<Item = (&'static str, &Tensor<T>)> {
        PARAM_NAMES.iter().copied().zip(self.params.iter())
    }

    pub fn param_tensors(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn param_tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    /// Inserts the parameters as leaves of `g`.
    pub fn bind(&self, g: &mut Graph<T>, requires_grad: bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|p| g.leaf(p.clone(), requires_grad))
            .collect();
        BoundParams { vars }
    }

    /// Forward pass from an input var to logits. `dropout_rng: None` is
    /// eval mode (dropout off).
    pub fn forward<R: Rng>(
        &self,
        g: &mut Graph<T>,
        bound: &BoundParams,
        x: Var,
        mut dropout_rng: Option<&mut R>,
    ) -> Result<Var> {
        let sx = g.value(x).shape();
        if sx.len() != 4
            || sx[1] != self.in_channels
            || sx[2] != self.in_height
            || sx[3] != self.in_width
        {
            return Err(Error::Shape(format!(
                "model: expected [N, {}, {}, {}] input, got {sx:?}",
                self.in_channels, self.in_height, self.in_width
            )));
        }
        let p = bound.vars();
        let mut drop = |g: &mut Graph<T>, v: Var, rate: f64| -> crate::Result<Var> {
            match dropout_rng.as_deref_mut() {
                Some(rng) => g.dropout(v, rate, true, rng),
                None => {
                    let mut unused = NoRng;
                    g.dropout(v, rate, false, &mut unused)
                }
            }
        };
        let c1 = g.conv2d(x, p[0])?;
        let c1 = g.add_bias(c1, p[1])?;
        let c1 = g.relu(c1);
        let c2 = g.conv2d(c1, p[2])?;
        let c2 = g.add_bias(c2, p[3])?;
        let c2 = g.relu(c2);
        let c2 = g.max_pool2d(c2)?;
        let c2 = drop(g, c2, 0.25)?;
        let flat = g.flatten(c2)?;
        let h = g.matmul(flat, p[4])?;
        let h = g.add_bias(h, p[5])?;
        let h = g.relu(h);
        let h = drop(g, h, 0.5)?;
        let logits = g.matmul(h, p[6])?;
        g.add_bias(logits, p[7])
    }

    /// Convenience: bind non-grad parameters and run an eval forward.
    pub fn forward_eval(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let bound = self.bind(g, false);
        self.forward::<NoRng>(g, &bound, x, None)
    }
}

/// Placeholder RNG for eval-mode forward calls; never actually sampled.
pub struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("eval mode consumes no randomness")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("eval mode consumes no randomness")
    }
    fn fill_bytes(&mut self, _dst: &mut [u8]) {
        unreachable!("eval mode consumes no randomness")
    }
}
