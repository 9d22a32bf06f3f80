//! Small U-Net ε-predictor with sinusoidal timestep embedding and scale/shift
//! conditioning in every residual block.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, NodeId};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    /// Channel width at each resolution level, finest first. Each extra level halves the resolution.
    pub widths: Vec<usize>,
    /// Sinusoidal timestep-embedding dimension (even).
    pub time_dim: usize,
    /// Hidden width of the timestep MLP.
    pub time_hidden: usize,
}

impl UNetConfig {
    /// Desk-scale preset for 32×32 inputs.
    pub fn small() -> Self {
        UNetConfig {
            widths: vec![16, 32, 32],
            time_dim: 32,
            time_hidden: 64,
        }
    }

    /// Cheaper preset, adequate for 8×8 and 16×16 toy data.
    pub fn tiny() -> Self {
        UNetConfig {
            widths: vec![8, 16],
            time_dim: 16,
            time_hidden: 32,
        }
    }

    /// Preset for 128×128 inputs.
    pub fn base() -> Self {
        UNetConfig {
            widths: vec![32, 64, 64, 128],
            time_dim: 64,
            time_hidden: 128,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err("widths must be a non-empty list of positive channel counts".into());
        }
        if self.time_dim < 2 || !self.time_dim.is_multiple_of(2) {
            return Err(format!("time_dim must be even and >= 2, got {}", self.time_dim));
        }
        if self.time_hidden == 0 {
            return Err("time_hidden must be positive".into());
        }
        Ok(())
    }

    /// Input sizes must be divisible by this factor.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.widths.len() - 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ResBlock {
    conv1: (ParamId, ParamId),
    conv2: (ParamId, ParamId),
    scale: (ParamId, ParamId),
    shift: (ParamId, ParamId),
}

#[derive(Clone, Debug, PartialEq)]
pub struct UNet {
    config: UNetConfig,
    params: ParamStore,
    time1: (ParamId, ParamId),
    time2: (ParamId, ParamId),
    conv_in: (ParamId, ParamId),
    down: Vec<ResBlock>,
    downsample: Vec<(ParamId, ParamId)>,
    mid: ResBlock,
    upsample: Vec<(ParamId, ParamId)>,
    up: Vec<ResBlock>,
    conv_out: (ParamId, ParamId),
}

fn conv_params<R: Rng>(
    p: &mut ParamStore,
    name: &str,
    cin: usize,
    cout: usize,
    zero: bool,
    rng: &mut R,
) -> (ParamId, ParamId) {
    let w = if zero {
        p.zeros(format!("{name}.weight"), [cout, cin, 3, 3])
    } else {
        p.normal(
            format!("{name}.weight"),
            [cout, cin, 3, 3],
            (1.0 / (cin * 9) as f64).sqrt(),
            rng,
        )
    };
    let b = p.zeros(format!("{name}.bias"), [1, cout, 1, 1]);
    (w, b)
}

fn linear_params<R: Rng>(
    p: &mut ParamStore,
    name: &str,
    cin: usize,
    cout: usize,
    std_scale: f64,
    rng: &mut R,
) -> (ParamId, ParamId) {
    let w = p.normal(
        format!("{name}.weight"),
        [cout, cin, 1, 1],
        std_scale * (1.0 / cin as f64).sqrt(),
        rng,
    );
    let b = p.zeros(format!("{name}.bias"), [1, cout, 1, 1]);
    (w, b)
}

fn res_block<R: Rng>(p: &mut ParamStore, name: &str, ch: usize, time_hidden: usize, rng: &mut R) -> ResBlock {
    ResBlock {
        conv1: conv_params(p, &format!("{name}.conv1"), ch, ch, false, rng),
        conv2: conv_params(p, &format!("{name}.conv2"), ch, ch, true, rng),
        scale: linear_params(p, &format!("{name}.scale"), time_hidden, ch, 0.1, rng),
        shift: linear_params(p, &format!("{name}.shift"), time_hidden, ch, 0.1, rng),
    }
}

/// `[sin(t·ω_i), cos(t·ω_i)]` with geometrically spaced frequencies `ω_i = 10000^(−i/half)`.
pub fn timestep_embedding(timesteps: &[f64], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = Tensor::zeros([timesteps.len(), dim, 1, 1]);
    for (row, &t) in out.data.chunks_exact_mut(dim).zip(timesteps) {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            row[i] = (t * freq).sin();
            row[half + i] = (t * freq).cos();
        }
    }
    out
}

impl UNet {
    pub fn new<R: Rng>(config: UNetConfig, rng: &mut R) -> Self {
        config.validate().expect("invalid U-Net configuration");
        let mut p = ParamStore::new();
        let th = config.time_hidden;
        let time1 = linear_params(&mut p, "time.0", config.time_dim, th, 1.0, rng);
        let time2 = linear_params(&mut p, "time.1", th, th, 1.0, rng);
        let w = &config.widths;
        let conv_in = conv_params(&mut p, "conv_in", 1, w[0], false, rng);
        let mut down = Vec::new();
        let mut downsample = Vec::new();
        for (i, &ch) in w.iter().enumerate() {
            down.push(res_block(&mut p, &format!("down.{i}"), ch, th, rng));
            if i + 1 < w.len() {
                downsample.push(conv_params(
                    &mut p,
                    &format!("downsample.{i}"),
                    ch,
                    w[i + 1],
                    false,
                    rng,
                ));
            }
        }
        let mid = res_block(&mut p, "mid", *w.last().unwrap(), th, rng);
        let mut upsample = Vec::new();
        let mut up = Vec::new();
        for i in (0..w.len()).rev() {
            if i + 1 < w.len() {
                upsample.push(conv_params(
                    &mut p,
                    &format!("upsample.{i}"),
                    w[i + 1],
                    w[i],
                    false,
                    rng,
                ));
            }
            up.push(res_block(&mut p, &format!("up.{i}"), w[i], th, rng));
        }
        let conv_out = conv_params(&mut p, "conv_out", w[0], 1, true, rng);
        UNet {
            config,
            params: p,
            time1,
            time2,
            conv_in,
            down,
            downsample,
            mid,
            upsample,
            up,
            conv_out,
        }
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    fn res_forward(g: &mut Graph<'_>, blk: &ResBlock, x: NodeId, emb: NodeId) -> NodeId {
        let h = g.silu(x);
        let h = g.conv3x3(h, blk.conv1.0, blk.conv1.1);
        let sc = g.linear(emb, blk.scale.0, blk.scale.1);
        let sh = g.linear(emb, blk.shift.0, blk.shift.1);
        let h = g.film(h, sc, sh);
        let h = g.silu(h);
        let h = g.conv3x3(h, blk.conv2.0, blk.conv2.1);
        g.add(x, h)
    }

    /// Records the forward pass of a batch `x: (n, 1, h, w)` at per-sample
    /// timesteps. Returns the input and output node ids.
    pub fn forward<'g>(&'g self, x: Tensor, timesteps: &[f64], input_grad: bool) -> (Graph<'g>, NodeId, NodeId) {
        assert_eq!(x.shape[1], 1, "single-channel input");
        assert_eq!(x.shape[0], timesteps.len(), "one timestep per sample");
        let m = self.config.spatial_multiple();
        assert!(
            x.shape[2].is_multiple_of(m) && x.shape[3].is_multiple_of(m),
            "spatial size must be a multiple of {m}"
        );
        let mut g = Graph::new(&self.params);
        let xin = g.input(x, input_grad);
        let temb = g.input(timestep_embedding(timesteps, self.config.time_dim), false);
        let e = g.linear(temb, self.time1.0, self.time1.1);
        let e = g.silu(e);
        let e = g.linear(e, self.time2.0, self.time2.1);
        let emb = g.silu(e);

        let mut h = g.conv3x3(xin, self.conv_in.0, self.conv_in.1);
        let levels = self.config.widths.len();
        let mut skips = Vec::with_capacity(levels);
        for i in 0..levels {
            h = Self::res_forward(&mut g, &self.down[i], h, emb);
            skips.push(h);
            if i + 1 < levels {
                let p = g.avg_pool2(h);
                let (w, b) = self.downsample[i];
                h = g.conv3x3(p, w, b);
            }
        }
        h = Self::res_forward(&mut g, &self.mid, h, emb);
        for (j, i) in (0..levels).rev().enumerate() {
            if i + 1 < levels {
                let u = g.upsample2(h);
                let (w, b) = self.upsample[j - 1];
                h = g.conv3x3(u, w, b);
            }
            h = g.add(h, skips[i]);
            h = Self::res_forward(&mut g, &self.up[j], h, emb);
        }
        let h = g.silu(h);
        let out = g.conv3x3(h, self.conv_out.0, self.conv_out.1);
        (g, xin, out)
    }

    pub fn predict(&self, x: Tensor, timesteps: &[f64]) -> Tensor {
        let (g, _, out) = self.forward(x, timesteps, false);
        g.into_value(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn parameter_count_depends_only_on_config() {
        let a = UNet::new(UNetConfig::small(), &mut ChaCha8Rng::seed_from_u64(1));
        let b = UNet::new(UNetConfig::small(), &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(a.parameter_count(), b.parameter_count());
        assert_ne!(a.params().flatten(), b.params().flatten());
        assert!(
            UNet::new(UNetConfig::tiny(), &mut ChaCha8Rng::seed_from_u64(1)).parameter_count() < a.parameter_count()
        );
    }

    #[test]
    fn output_shape_matches_input_and_starts_at_zero() {
        let net = UNet::new(UNetConfig::tiny(), &mut ChaCha8Rng::seed_from_u64(3));
        let x = Tensor::from_vec([2, 1, 8, 8], (0..128).map(|i| (i as f64 * 0.1).sin()).collect());
        let y = net.predict(x, &[3.0, 40.0]);
        assert_eq!(y.shape, [2, 1, 8, 8]);
        // zero-initialized output convolution
        assert!(y.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embedding_has_unit_rows() {
        let e = timestep_embedding(&[0.0, 17.0], 8);
        for row in e.data.chunks(8) {
            let n: f64 = row.iter().map(|v| v * v).sum();
            assert!((n - 4.0).abs() < 1e-12);
        }
    }
}
