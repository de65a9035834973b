use ndarray::{s, Array2, ArrayView2};
use rand::Rng;

use super::{check_batch, Decoder, ModelConfig, ModelError, PointSet};
use crate::netcore::{self, init_params, weight_bound, Activation, DenseLayer, Init, MlpLayout, Tape};
use crate::par::{map_indexed, map_vec};

/// One ReLU MLP producing one SIREN tensor (a weight matrix or a bias vector).
#[derive(Debug, Clone, PartialEq)]
struct Generator {
    layout: MlpLayout,
    /// Offset of this generator's block in the hypernetwork buffer.
    offset: usize,
    /// Offset of its output in the flat SIREN parameter vector.
    out_offset: usize,
}

/// Hypernetwork `H`: two generators (weights, biases) per SIREN layer.
///
/// Generator outputs concatenated in order form the flat SIREN buffer, so a
/// row of [`HyperNet::generate`] is directly consumable by the SIREN layout.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperNet {
    config: ModelConfig,
    siren: MlpLayout,
    generators: Vec<Generator>,
    params: Vec<f64>,
}

#[derive(Debug)]
pub struct HyperTape {
    zs: Array2<f64>,
    gen_tapes: Vec<Tape>,
    siren_params: Array2<f64>,
    siren_tapes: Vec<Tape>,
}

impl HyperNet {
    fn layout_for(config: &ModelConfig) -> (MlpLayout, Vec<Generator>, usize) {
        let siren = config.siren_layout();
        let mut generators = Vec::new();
        let mut offset = 0;
        let mut out_offset = 0;
        for spec in &siren.layers {
            for out in [spec.weight_count(), spec.outputs] {
                let layout = MlpLayout::chain(
                    &[config.latent_dim, config.hyper_hidden, config.hyper_hidden, out],
                    Activation::Relu,
                    Activation::Linear,
                );
                let n = layout.param_count();
                generators.push(Generator { layout, offset, out_offset });
                offset += n;
                out_offset += out;
            }
        }
        (siren, generators, offset)
    }

    /// Parameter count without allocating the network.
    pub fn count_params(config: &ModelConfig) -> usize {
        Self::layout_for(config).2
    }

    /// Hidden layers: Kaiming uniform. Output layers: Kaiming scaled by
    /// `hyper_out_scale`, with biases drawn from the SIREN init of the tensor
    /// they generate, so small latents start from a SIREN-initialized net.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Self {
        let (siren, generators, total) = Self::layout_for(&config);
        let mut params = Vec::with_capacity(total);
        for (gi, g) in generators.iter().enumerate() {
            let mut block = init_params(&g.layout, Init::KaimingUniform, rng);
            let last = g.layout.layers.len() - 1;
            let last_off = g.layout.offsets()[last];
            let last_spec = g.layout.layers[last];
            for w in &mut block[last_off..last_off + last_spec.weight_count()] {
                *w *= config.hyper_out_scale;
            }
            let layer_idx = gi / 2;
            let target = siren.layers[layer_idx];
            let bound = if gi % 2 == 0 {
                weight_bound(Init::Siren { omega: config.omega0 }, layer_idx, target.inputs)
            } else {
                1.0 / (target.inputs as f64).sqrt()
            };
            for b in &mut block[last_off + last_spec.weight_count()..] {
                *b = rng.random_range(-bound..=bound);
            }
            params.extend(block);
        }
        Self { config, siren, generators, params }
    }

    pub fn from_params(config: ModelConfig, params: Vec<f64>) -> Result<Self, ModelError> {
        let (siren, generators, total) = Self::layout_for(&config);
        if params.len() != total {
            return Err(ModelError::Shape(format!("hypernet expects {total} params, got {}", params.len())));
        }
        Ok(Self { config, siren, generators, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn siren_layout(&self) -> &MlpLayout {
        &self.siren
    }

    pub fn siren_param_count(&self) -> usize {
        self.siren.param_count()
    }

    pub fn generator_count(&self) -> usize {
        self.generators.len()
    }

    /// Layouts and buffer ranges of each generator, in buffer order.
    pub fn generator_blocks(&self) -> Vec<(MlpLayout, std::ops::Range<usize>)> {
        self.generators
            .iter()
            .map(|g| (g.layout.clone(), g.offset..g.offset + g.layout.param_count()))
            .collect()
    }

    fn gen_layers(&self, g: &Generator) -> Vec<DenseLayer<'_>> {
        g.layout.views(&self.params[g.offset..g.offset + g.layout.param_count()])
    }

    /// SIREN parameters for each latent row (B x P).
    pub fn generate(&self, zs: ArrayView2<'_, f64>) -> Result<Array2<f64>, ModelError> {
        Ok(self.generate_taped(zs, false)?.0)
    }

    fn generate_taped(
        &self,
        zs: ArrayView2<'_, f64>,
        keep: bool,
    ) -> Result<(Array2<f64>, Vec<Tape>), ModelError> {
        if zs.ncols() != self.config.latent_dim {
            return Err(ModelError::Shape(format!("latent dim {} != {}", zs.ncols(), self.config.latent_dim)));
        }
        let mut out = Array2::zeros((zs.nrows(), self.siren.param_count()));
        let mut tapes = Vec::new();
        for g in &self.generators {
            let mut tape = Tape::new();
            let y = netcore::forward(&self.gen_layers(g), zs, keep.then_some(&mut tape))?;
            out.slice_mut(s![.., g.out_offset..g.out_offset + y.ncols()]).assign(&y);
            if keep {
                tapes.push(tape);
            }
        }
        Ok((out, tapes))
    }

    /// Displacement `S(p̂, params)` for one example (n x 3).
    pub fn displacement(&self, siren_params: &[f64], positions: ArrayView2<'_, f64>) -> Result<Array2<f64>, ModelError> {
        Ok(netcore::forward(&self.siren.views(siren_params), positions, None)?)
    }
}

impl Decoder for HyperNet {
    type Tape = HyperTape;

    fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn forward(
        &self,
        zs: ArrayView2<'_, f64>,
        inputs: &[&PointSet],
    ) -> Result<(Vec<Array2<f64>>, HyperTape), ModelError> {
        check_batch(zs, inputs.len(), self.config.latent_dim)?;
        let (siren_params, gen_tapes) = self.generate_taped(zs, true)?;
        let results = map_indexed(inputs.len(), |b| -> Result<_, ModelError> {
            let row = siren_params.row(b);
            let layers = self.siren.views(row.as_slice().expect("row-major"));
            let mut tape = Tape::new();
            let disp = netcore::forward(&layers, inputs[b].positions.view(), Some(&mut tape))?;
            Ok((disp + &inputs[b].positions, tape))
        });
        let mut outs = Vec::with_capacity(inputs.len());
        let mut siren_tapes = Vec::with_capacity(inputs.len());
        for r in results {
            let (o, t) = r?;
            outs.push(o);
            siren_tapes.push(t);
        }
        Ok((outs, HyperTape { zs: zs.to_owned(), gen_tapes, siren_params, siren_tapes }))
    }

    fn eval(&self, zs: ArrayView2<'_, f64>, inputs: &[&PointSet]) -> Result<Vec<Array2<f64>>, ModelError> {
        check_batch(zs, inputs.len(), self.config.latent_dim)?;
        let siren_params = self.generate(zs)?;
        map_indexed(inputs.len(), |b| {
            let row = siren_params.row(b);
            let disp = self.displacement(row.as_slice().expect("row-major"), inputs[b].positions.view())?;
            Ok(disp + &inputs[b].positions)
        })
        .into_iter()
        .collect()
    }

    fn backward(
        &self,
        tape: HyperTape,
        out_grads: &[Array2<f64>],
        mut param_grads: Option<&mut [f64]>,
    ) -> Result<Array2<f64>, ModelError> {
        let HyperTape { zs, mut gen_tapes, siren_params, siren_tapes } = tape;
        if out_grads.len() != siren_tapes.len() {
            return Err(ModelError::Shape(format!(
                "{} output grads for {} examples",
                out_grads.len(),
                siren_tapes.len()
            )));
        }
        if let Some(g) = param_grads.as_deref() {
            if g.len() != self.params.len() {
                return Err(ModelError::Shape("hypernet gradient buffer".into()));
            }
        }
        // dL/d(generated SIREN params), accumulated over every point of an example.
        let p = self.siren.param_count();
        let rows = map_vec(siren_tapes, |b, mut tape| -> Result<Vec<f64>, ModelError> {
            let row = siren_params.row(b);
            let layers = self.siren.views(row.as_slice().expect("row-major"));
            let mut g = vec![0.0; p];
            netcore::backward(&layers, &mut tape, out_grads[b].view(), Some(&mut g))?;
            Ok(g)
        });
        let mut d_siren = Array2::zeros((out_grads.len(), p));
        for (b, r) in rows.into_iter().enumerate() {
            d_siren.row_mut(b).assign(&ndarray::Array1::from(r?));
        }
        let mut gz = Array2::zeros(zs.raw_dim());
        for (g, gtape) in self.generators.iter().zip(gen_tapes.iter_mut()) {
            let n = g.layout.param_count();
            let width = g.layout.outputs();
            let dy = d_siren.slice(s![.., g.out_offset..g.out_offset + width]);
            let sub = param_grads.as_deref_mut().map(|buf| &mut buf[g.offset..g.offset + n]);
            gz += &netcore::backward(&self.gen_layers(g), gtape, dy, sub)?;
        }
        Ok(gz)
    }
}
