//! Ablation decoders sharing the [`Decoder`] interface with [`HyperNet`].

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_batch, Decoder, HyperNet, HyperTape, ModelConfig, ModelError, PointSet};
use crate::mesh::TriMesh;
use crate::netcore::{self, init_params, Activation, Init, MlpLayout, Tape};
use crate::par::{map_indexed, map_vec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderVariant {
    SirenHyper,
    SirenConcat,
    VertexPositionMlp,
    VertexDisplacementMlp,
}

impl DecoderVariant {
    pub const ALL: [DecoderVariant; 4] = [
        DecoderVariant::VertexPositionMlp,
        DecoderVariant::VertexDisplacementMlp,
        DecoderVariant::SirenConcat,
        DecoderVariant::SirenHyper,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DecoderVariant::SirenHyper => "siren_hyper",
            DecoderVariant::SirenConcat => "siren_concat",
            DecoderVariant::VertexPositionMlp => "vertex_position_mlp",
            DecoderVariant::VertexDisplacementMlp => "vertex_displacement_mlp",
        }
    }

    /// Build a freshly initialized decoder of this kind. `array_hidden` is the
    /// hidden width of the vertex-array MLPs.
    pub fn build<R: Rng + ?Sized>(
        self,
        config: &ModelConfig,
        array_hidden: usize,
        template: &TriMesh,
        rng: &mut R,
    ) -> AnyDecoder {
        match self {
            DecoderVariant::SirenHyper => AnyDecoder::Hyper(HyperNet::new(config.clone(), rng)),
            DecoderVariant::SirenConcat => AnyDecoder::Concat(ConcatSiren::new(config.clone(), rng)),
            DecoderVariant::VertexPositionMlp => AnyDecoder::Array(VertexArrayMlp::new(
                ArrayMode::Position,
                config.latent_dim,
                array_hidden,
                template,
                rng,
            )),
            DecoderVariant::VertexDisplacementMlp => AnyDecoder::Array(VertexArrayMlp::new(
                ArrayMode::Displacement,
                config.latent_dim,
                array_hidden,
                template,
                rng,
            )),
        }
    }
}

impl std::str::FromStr for DecoderVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DecoderVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown decoder variant {s:?}"))
    }
}

/// SIREN conditioned by concatenating `z` to the input position and to the
/// features entering layer 4 (after the third layer).
#[derive(Debug, Clone, PartialEq)]
pub struct ConcatSiren {
    config: ModelConfig,
    front: MlpLayout,
    back: MlpLayout,
    params: Vec<f64>,
}

#[derive(Debug)]
pub struct ConcatTape {
    tapes: Vec<(Tape, Tape)>,
}

impl ConcatSiren {
    fn layouts(config: &ModelConfig) -> (MlpLayout, MlpLayout) {
        let sine = Activation::Sine { omega: config.omega0 };
        let h = config.siren_hidden;
        let m = config.latent_dim;
        // Same depth as the hyper SIREN: three layers before the junction,
        // the remaining hidden layers plus the linear head after it.
        let front_hidden = 2.min(config.siren_hidden_layers);
        let mut fdims = vec![3 + m, h];
        fdims.extend(std::iter::repeat_n(h, front_hidden));
        let front = MlpLayout::chain(&fdims, sine, sine);
        let mut bdims = vec![h + m];
        bdims.extend(std::iter::repeat_n(h, config.siren_hidden_layers - front_hidden));
        bdims.push(3);
        let back = MlpLayout::chain(&bdims, sine, Activation::Linear);
        (front, back)
    }

    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Self {
        let (front, back) = Self::layouts(&config);
        let omega = config.omega0;
        let mut params = init_params(&front, Init::Siren { omega }, rng);
        // The back half continues the network, so no layer of it is "first".
        let mut bp = Vec::with_capacity(back.param_count());
        for (i, spec) in back.layers.iter().enumerate() {
            let one = MlpLayout::new(vec![*spec]);
            let mut block = init_params(&one, Init::Siren { omega }, rng);
            let bound = netcore::weight_bound(Init::Siren { omega }, i + 1, spec.inputs);
            for w in &mut block[..spec.weight_count()] {
                *w = rng.random_range(-bound..=bound);
            }
            bp.extend(block);
        }
        params.extend(bp);
        Self { config, front, back, params }
    }

    pub fn from_params(config: ModelConfig, params: Vec<f64>) -> Result<Self, ModelError> {
        let (front, back) = Self::layouts(&config);
        if params.len() != front.param_count() + back.param_count() {
            return Err(ModelError::Shape("concat siren parameter count".into()));
        }
        Ok(Self { config, front, back, params })
    }

    pub fn front_layout(&self) -> &MlpLayout {
        &self.front
    }

    pub fn back_layout(&self) -> &MlpLayout {
        &self.back
    }

    fn split(&self) -> (&[f64], &[f64]) {
        self.params.split_at(self.front.param_count())
    }

    fn run(
        &self,
        z: ndarray::ArrayView1<'_, f64>,
        set: &PointSet,
        keep: bool,
    ) -> Result<(Array2<f64>, Option<(Tape, Tape)>), ModelError> {
        let n = set.len();
        let m = self.config.latent_dim;
        let zb = z.broadcast((n, m)).expect("broadcast");
        let input = concatenate![Axis(1), set.positions.view(), zb];
        let (fp, bp) = self.split();
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let hidden = netcore::forward(&self.front.views(fp), input.view(), keep.then_some(&mut t1))?;
        let mid = concatenate![Axis(1), hidden.view(), zb];
        let disp = netcore::forward(&self.back.views(bp), mid.view(), keep.then_some(&mut t2))?;
        Ok((disp + &set.positions, keep.then_some((t1, t2))))
    }
}

impl Decoder for ConcatSiren {
    type Tape = ConcatTape;

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
    ) -> Result<(Vec<Array2<f64>>, ConcatTape), ModelError> {
        check_batch(zs, inputs.len(), self.config.latent_dim)?;
        let results = map_indexed(inputs.len(), |b| self.run(zs.row(b), inputs[b], true));
        let mut outs = Vec::new();
        let mut tapes = Vec::new();
        for r in results {
            let (o, t) = r?;
            outs.push(o);
            tapes.push(t.expect("kept"));
        }
        Ok((outs, ConcatTape { tapes }))
    }

    fn eval(&self, zs: ArrayView2<'_, f64>, inputs: &[&PointSet]) -> Result<Vec<Array2<f64>>, ModelError> {
        check_batch(zs, inputs.len(), self.config.latent_dim)?;
        map_indexed(inputs.len(), |b| Ok(self.run(zs.row(b), inputs[b], false)?.0))
            .into_iter()
            .collect()
    }

    fn backward(
        &self,
        tape: ConcatTape,
        out_grads: &[Array2<f64>],
        param_grads: Option<&mut [f64]>,
    ) -> Result<Array2<f64>, ModelError> {
        if out_grads.len() != tape.tapes.len() {
            return Err(ModelError::Shape("output grads vs batch".into()));
        }
        let m = self.config.latent_dim;
        let h = self.config.siren_hidden;
        let (fp, bp) = self.split();
        let want_params = param_grads.is_some();
        let n_params = self.params.len();
        let nf = self.front.param_count();
        let per_example = map_vec(tape.tapes, |b, (mut t1, mut t2)| -> Result<_, ModelError> {
            let mut g = if want_params { vec![0.0; n_params] } else { Vec::new() };
            let (gf, gb) = if want_params {
                let (a, c) = g.split_at_mut(nf);
                (Some(a), Some(c))
            } else {
                (None, None)
            };
            let d_mid = netcore::backward(&self.back.views(bp), &mut t2, out_grads[b].view(), gb)?;
            let d_hidden = d_mid.slice(s![.., ..h]).to_owned();
            let mut gz = d_mid.slice(s![.., h..]).sum_axis(Axis(0));
            let d_in = netcore::backward(&self.front.views(fp), &mut t1, d_hidden.view(), gf)?;
            gz += &d_in.slice(s![.., 3..]).sum_axis(Axis(0));
            Ok((g, gz))
        });
        let mut gz_all = Array2::zeros((out_grads.len(), m));
        let mut total = param_grads;
        for (b, r) in per_example.into_iter().enumerate() {
            let (g, gz) = r?;
            gz_all.row_mut(b).assign(&gz);
            if let Some(buf) = total.as_deref_mut() {
                for (d, s) in buf.iter_mut().zip(&g) {
                    *d += s;
                }
            }
        }
        Ok(gz_all)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrayMode {
    /// The MLP emits absolute vertex positions.
    Position,
    /// The MLP emits offsets added to the template vertices.
    Displacement,
}

/// Auto-decoder baseline `z -> 3V` vertex array: one leaky-ReLU hidden layer
/// (slope 0.1) and a linear output. Off-vertex points interpolate the decoded
/// vertices barycentrically.
#[derive(Debug, Clone, PartialEq)]
pub struct VertexArrayMlp {
    mode: ArrayMode,
    layout: MlpLayout,
    faces: Vec<[usize; 3]>,
    /// 3V flattened template positions.
    template: Vec<f64>,
    params: Vec<f64>,
}

#[derive(Debug)]
pub struct VertexArrayTape {
    tape: Tape,
    inputs: Vec<Vec<crate::mesh::SurfacePoint>>,
}

impl VertexArrayMlp {
    pub fn layout_for(latent_dim: usize, hidden: usize, vertex_count: usize) -> MlpLayout {
        MlpLayout::new(vec![
            netcore::LayerSpec::new(latent_dim, hidden, Activation::LeakyRelu { slope: 0.1 }),
            netcore::LayerSpec::new(hidden, 3 * vertex_count, Activation::Linear),
        ])
    }

    pub fn count_params(latent_dim: usize, hidden: usize, vertex_count: usize) -> usize {
        Self::layout_for(latent_dim, hidden, vertex_count).param_count()
    }

    pub fn new<R: Rng + ?Sized>(
        mode: ArrayMode,
        latent_dim: usize,
        hidden: usize,
        template: &TriMesh,
        rng: &mut R,
    ) -> Self {
        let layout = Self::layout_for(latent_dim, hidden, template.vertex_count());
        let params = init_params(&layout, Init::Fan, rng);
        Self {
            mode,
            layout,
            faces: template.faces().to_vec(),
            template: template.vertices().iter().flatten().copied().collect(),
            params,
        }
    }

    pub fn mode(&self) -> ArrayMode {
        self.mode
    }

    pub fn vertex_count(&self) -> usize {
        self.template.len() / 3
    }

    /// Decoded vertex arrays (B x 3V).
    pub fn vertex_arrays(&self, zs: ArrayView2<'_, f64>) -> Result<Array2<f64>, ModelError> {
        Ok(self.arrays(zs, None)?)
    }

    fn arrays(&self, zs: ArrayView2<'_, f64>, tape: Option<&mut Tape>) -> Result<Array2<f64>, ModelError> {
        if zs.ncols() != self.layout.inputs() {
            return Err(ModelError::Shape("latent dim".into()));
        }
        let mut y = netcore::forward(&self.layout.views(&self.params), zs, tape)?;
        if self.mode == ArrayMode::Displacement {
            y += &ndarray::ArrayView1::from(&self.template[..]);
        }
        Ok(y)
    }

    fn check_points(&self, inputs: &[&PointSet]) -> Result<(), ModelError> {
        for set in inputs {
            if set.points.iter().any(|sp| sp.face >= self.faces.len()) {
                return Err(ModelError::Shape("surface point outside the decoder's template".into()));
            }
        }
        Ok(())
    }

    fn interpolate(&self, row: ndarray::ArrayView1<'_, f64>, set: &PointSet) -> Array2<f64> {
        let mut out = Array2::zeros((set.len(), 3));
        for (i, sp) in set.points.iter().enumerate() {
            let f = self.faces[sp.face];
            for k in 0..3 {
                for c in 0..3 {
                    out[[i, c]] += sp.bary[k] * row[3 * f[k] + c];
                }
            }
        }
        out
    }
}

impl Decoder for VertexArrayMlp {
    type Tape = VertexArrayTape;

    fn latent_dim(&self) -> usize {
        self.layout.inputs()
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
    ) -> Result<(Vec<Array2<f64>>, VertexArrayTape), ModelError> {
        check_batch(zs, inputs.len(), self.latent_dim())?;
        self.check_points(inputs)?;
        let mut tape = Tape::new();
        let y = self.arrays(zs, Some(&mut tape))?;
        let outs = inputs.iter().enumerate().map(|(b, set)| self.interpolate(y.row(b), set)).collect();
        let inputs = inputs.iter().map(|s| s.points.clone()).collect();
        Ok((outs, VertexArrayTape { tape, inputs }))
    }

    fn eval(&self, zs: ArrayView2<'_, f64>, inputs: &[&PointSet]) -> Result<Vec<Array2<f64>>, ModelError> {
        check_batch(zs, inputs.len(), self.latent_dim())?;
        self.check_points(inputs)?;
        let y = self.arrays(zs, None)?;
        Ok(inputs.iter().enumerate().map(|(b, set)| self.interpolate(y.row(b), set)).collect())
    }

    fn backward(
        &self,
        mut tape: VertexArrayTape,
        out_grads: &[Array2<f64>],
        param_grads: Option<&mut [f64]>,
    ) -> Result<Array2<f64>, ModelError> {
        if out_grads.len() != tape.inputs.len() {
            return Err(ModelError::Shape("output grads vs batch".into()));
        }
        let mut dy = Array2::zeros((out_grads.len(), self.template.len()));
        for (b, (g, pts)) in out_grads.iter().zip(&tape.inputs).enumerate() {
            for (i, sp) in pts.iter().enumerate() {
                let f = self.faces[sp.face];
                for k in 0..3 {
                    for c in 0..3 {
                        dy[[b, 3 * f[k] + c]] += sp.bary[k] * g[[i, c]];
                    }
                }
            }
        }
        Ok(netcore::backward(&self.layout.views(&self.params), &mut tape.tape, dy.view(), param_grads)?)
    }
}

/// Any of the four decoders behind one type, for shared training/benchmark code.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyDecoder {
    Hyper(HyperNet),
    Concat(ConcatSiren),
    Array(VertexArrayMlp),
}

#[derive(Debug)]
pub enum AnyTape {
    Hyper(HyperTape),
    Concat(ConcatTape),
    Array(VertexArrayTape),
}

impl AnyDecoder {
    pub fn variant(&self) -> DecoderVariant {
        match self {
            AnyDecoder::Hyper(_) => DecoderVariant::SirenHyper,
            AnyDecoder::Concat(_) => DecoderVariant::SirenConcat,
            AnyDecoder::Array(a) => match a.mode() {
                ArrayMode::Position => DecoderVariant::VertexPositionMlp,
                ArrayMode::Displacement => DecoderVariant::VertexDisplacementMlp,
            },
        }
    }
}

macro_rules! dispatch {
    ($self:expr, $d:ident => $body:expr) => {
        match $self {
            AnyDecoder::Hyper($d) => $body,
            AnyDecoder::Concat($d) => $body,
            AnyDecoder::Array($d) => $body,
        }
    };
}

impl Decoder for AnyDecoder {
    type Tape = AnyTape;

    fn latent_dim(&self) -> usize {
        dispatch!(self, d => d.latent_dim())
    }

    fn params(&self) -> &[f64] {
        dispatch!(self, d => d.params())
    }

    fn params_mut(&mut self) -> &mut [f64] {
        dispatch!(self, d => d.params_mut())
    }

    fn forward(
        &self,
        zs: ArrayView2<'_, f64>,
        inputs: &[&PointSet],
    ) -> Result<(Vec<Array2<f64>>, AnyTape), ModelError> {
        Ok(match self {
            AnyDecoder::Hyper(d) => {
                let (o, t) = d.forward(zs, inputs)?;
                (o, AnyTape::Hyper(t))
            }
            AnyDecoder::Concat(d) => {
                let (o, t) = d.forward(zs, inputs)?;
                (o, AnyTape::Concat(t))
            }
            AnyDecoder::Array(d) => {
                let (o, t) = d.forward(zs, inputs)?;
                (o, AnyTape::Array(t))
            }
        })
    }

    fn eval(&self, zs: ArrayView2<'_, f64>, inputs: &[&PointSet]) -> Result<Vec<Array2<f64>>, ModelError> {
        dispatch!(self, d => d.eval(zs, inputs))
    }

    fn backward(
        &self,
        tape: AnyTape,
        out_grads: &[Array2<f64>],
        param_grads: Option<&mut [f64]>,
    ) -> Result<Array2<f64>, ModelError> {
        match (self, tape) {
            (AnyDecoder::Hyper(d), AnyTape::Hyper(t)) => d.backward(t, out_grads, param_grads),
            (AnyDecoder::Concat(d), AnyTape::Concat(t)) => d.backward(t, out_grads, param_grads),
            (AnyDecoder::Array(d), AnyTape::Array(t)) => d.backward(t, out_grads, param_grads),
            _ => Err(ModelError::Shape("tape from a different decoder".into())),
        }
    }
}
