use super::{Denoiser, Linearization};
use crate::error::{Error, Result};
use crate::image::{ImageGrid, IntensityRange};
use crate::nn::{Tensor, UNet};
use crate::schedule::DiffusionSchedule;

/// U-Net ε-predictor bound to its schedule, input shape and intensity normalization.
#[derive(Clone, Debug)]
pub struct NetworkDenoiser {
    net: UNet,
    schedule: DiffusionSchedule,
    normalization: IntensityRange,
    image_shape: (usize, usize),
    seed: u64,
    step: usize,
}

impl NetworkDenoiser {
    pub fn new(
        net: UNet,
        schedule: DiffusionSchedule,
        normalization: IntensityRange,
        image_shape: (usize, usize),
        seed: u64,
        step: usize,
    ) -> Result<Self> {
        let m = net.config().spatial_multiple();
        if !image_shape.0.is_multiple_of(m) || !image_shape.1.is_multiple_of(m) {
            return Err(Error::Data(format!(
                "image shape {image_shape:?} is not a multiple of {m} required by the network depth"
            )));
        }
        Ok(NetworkDenoiser {
            net,
            schedule,
            normalization,
            image_shape,
            seed,
            step,
        })
    }

    pub fn net(&self) -> &UNet {
        &self.net
    }

    pub fn into_net(self) -> UNet {
        self.net
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Optimization steps the parameters have seen.
    pub fn step(&self) -> usize {
        self.step
    }

    fn to_tensor(x: &ImageGrid) -> Tensor {
        Tensor::from_vec([1, 1, x.height(), x.width()], x.data().to_vec())
    }

    fn to_image(&self, t: Tensor, like: &ImageGrid) -> ImageGrid {
        ImageGrid::new(like.height(), like.width(), t.data, like.range()).expect("network keeps the input shape")
    }

    /// Batched prediction for same-shape images sharing one timestep.
    pub fn predict_batch(&self, xs: &[ImageGrid], t: usize) -> Result<Vec<ImageGrid>> {
        self.schedule.check_step(t as i64, 0)?;
        let Some(first) = xs.first() else {
            return Ok(Vec::new());
        };
        let (h, w) = first.shape();
        let mut data = Vec::with_capacity(xs.len() * h * w);
        for x in xs {
            self.check_input(x)?;
            data.extend_from_slice(x.data());
        }
        let out = self
            .net
            .predict(Tensor::from_vec([xs.len(), 1, h, w], data), &vec![t as f64; xs.len()]);
        Ok(out
            .data
            .chunks_exact(h * w)
            .zip(xs)
            .map(|(c, x)| ImageGrid::new(h, w, c.to_vec(), x.range()).expect("shape preserved"))
            .collect())
    }
}

impl Denoiser for NetworkDenoiser {
    fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    fn predict_eps(&self, x_t: &ImageGrid, t: usize) -> Result<ImageGrid> {
        self.schedule.check_step(t as i64, 0)?;
        self.check_input(x_t)?;
        let out = self.net.predict(Self::to_tensor(x_t), &[t as f64]);
        Ok(self.to_image(out, x_t))
    }

    fn is_differentiable(&self) -> bool {
        true
    }

    fn linearize(&self, x_t: &ImageGrid, t: usize) -> Result<Linearization<'_>> {
        self.schedule.check_step(t as i64, 0)?;
        self.check_input(x_t)?;
        let (graph, input, output) = self.net.forward(Self::to_tensor(x_t), &[t as f64], true);
        let eps = self.to_image(graph.value(output).clone(), x_t);
        let like = x_t.clone();
        Ok(Linearization::new(eps, move |v| {
            let seed = Self::to_tensor(v);
            let mut grads = graph.backward(output, seed);
            let g = grads
                .take_node(input)
                .unwrap_or_else(|| Tensor::zeros([1, 1, like.height(), like.width()]));
            ImageGrid::new(like.height(), like.width(), g.data, like.range())
        }))
    }

    fn normalization(&self) -> IntensityRange {
        self.normalization
    }

    fn image_shape(&self) -> Option<(usize, usize)> {
        Some(self.image_shape)
    }
}
