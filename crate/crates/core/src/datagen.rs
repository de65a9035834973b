//! Synthetic datasets: a procedural template and examples deformed by a
//! known linear combination of smooth vector fields.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mesh::{norm, MeshError, TriMesh, Vec3};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TemplateKind {
    /// Unit icosphere after `subdiv` midpoint subdivisions.
    Icosphere { subdiv: usize },
    /// `res x res` grid over `[-1, 1]^2` lifted onto a paraboloid cap.
    GridDome { res: usize },
    /// A grid dome plus one large triangle spanning its `x = 1` side out to
    /// `x = 3`, for sampling-density experiments.
    LargeFaceDome { res: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub template: TemplateKind,
    /// Number of deformation basis fields.
    pub k: usize,
    pub coeff_std: f64,
    /// Euclidean norm of each field's amplitude vector.
    pub amplitude: f64,
    pub examples: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            template: TemplateKind::Icosphere { subdiv: 3 },
            k: 4,
            coeff_std: 1.0,
            amplitude: 0.1,
            examples: 8,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.k == 0 {
            return Err(DataError::Spec("k must be >= 1".into()));
        }
        if self.examples == 0 {
            return Err(DataError::Spec("examples must be >= 1".into()));
        }
        if !(self.coeff_std >= 0.0 && self.amplitude >= 0.0) {
            return Err(DataError::Spec("coeff_std and amplitude must be non-negative".into()));
        }
        match self.template {
            TemplateKind::GridDome { res } | TemplateKind::LargeFaceDome { res } if res == 0 => {
                Err(DataError::Spec("grid resolution must be >= 1".into()))
            }
            _ => Ok(()),
        }
    }
}

/// `f(x) = A ⊙ sin(B x + φ)`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeformationField {
    pub amplitude: Vec3,
    pub frequency: [Vec3; 3],
    pub phase: Vec3,
}

impl DeformationField {
    fn random<R: Rng + ?Sized>(amplitude: f64, rng: &mut R) -> Self {
        let mut a = [0.0; 3];
        for v in &mut a {
            *v = StandardNormal.sample(rng);
        }
        let n = norm(a).max(1e-12);
        let a = a.map(|v| v * amplitude / n);
        let mut frequency = [[0.0; 3]; 3];
        for row in &mut frequency {
            for v in row.iter_mut() {
                *v = rng.random_range(-2.0..2.0);
            }
            let rn = norm(*row);
            if rn > 3.0 {
                *row = row.map(|v| v * 3.0 / rn);
            }
        }
        let phase = [(); 3].map(|_| rng.random_range(0.0..std::f64::consts::TAU));
        Self { amplitude: a, frequency, phase }
    }

    pub fn eval(&self, x: Vec3) -> Vec3 {
        let mut out = [0.0; 3];
        for c in 0..3 {
            let b = self.frequency[c];
            out[c] = self.amplitude[c] * (b[0] * x[0] + b[1] * x[1] + b[2] * x[2] + self.phase[c]).sin();
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub spec: SynthSpec,
    pub template: TriMesh,
    pub examples: Vec<TriMesh>,
    /// Ground-truth coefficients, one row per example.
    pub coeffs: Vec<Vec<f64>>,
    pub fields: Vec<DeformationField>,
}

fn icosahedron() -> TriMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let v = vec![
        [-1.0, t, 0.0], [1.0, t, 0.0], [-1.0, -t, 0.0], [1.0, -t, 0.0],
        [0.0, -1.0, t], [0.0, 1.0, t], [0.0, -1.0, -t], [0.0, 1.0, -t],
        [t, 0.0, -1.0], [t, 0.0, 1.0], [-t, 0.0, -1.0], [-t, 0.0, 1.0],
    ];
    let f = vec![
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ];
    project_to_sphere(TriMesh::new(v, f).expect("valid icosahedron"))
}

fn project_to_sphere(mesh: TriMesh) -> TriMesh {
    let v = mesh.vertices().iter().map(|p| {
        let n = norm(*p);
        [p[0] / n, p[1] / n, p[2] / n]
    });
    mesh.with_vertices(v.collect()).expect("same count")
}

fn grid_dome(res: usize) -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let n = res + 1;
    let mut v = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            let x = -1.0 + 2.0 * i as f64 / res as f64;
            let y = -1.0 + 2.0 * j as f64 / res as f64;
            v.push([x, y, 0.5 * (1.0 - 0.5 * (x * x + y * y))]);
        }
    }
    let mut f = Vec::with_capacity(2 * res * res);
    for j in 0..res {
        for i in 0..res {
            let a = j * n + i;
            let (b, c, d) = (a + 1, a + n, a + n + 1);
            f.push([a, b, d]);
            f.push([a, d, c]);
        }
    }
    (v, f)
}

pub fn make_template(spec: &SynthSpec) -> Result<TriMesh, DataError> {
    spec.validate()?;
    Ok(match spec.template {
        TemplateKind::Icosphere { subdiv } => {
            let mut m = icosahedron();
            for _ in 0..subdiv {
                m = project_to_sphere(m.subdivide());
            }
            m
        }
        TemplateKind::GridDome { res } => {
            let (v, f) = grid_dome(res);
            TriMesh::new(v, f)?
        }
        TemplateKind::LargeFaceDome { res } => {
            let (mut v, mut f) = grid_dome(res);
            let n = res + 1;
            let lower = res; // (x=1, y=-1)
            let upper = n * n - 1; // (x=1, y=1)
            v.push([3.0, 0.0, 0.0]);
            f.push([lower, v.len() - 1, upper]);
            TriMesh::new(v, f)?
        }
    })
}

/// Build the template, `k` random fields, and `examples` deformed meshes.
///
/// Coefficients are `N(0, coeff_std^2)` clipped to `±3 coeff_std`; if
/// `k * 3 coeff_std * amplitude` would reach half the template's bounding-box
/// diagonal, the amplitude is reduced so displacements stay below it.
pub fn make_dataset(spec: &SynthSpec) -> Result<SynthDataset, DataError> {
    let template = make_template(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let bound = 0.5 * template.bbox_diagonal();
    let worst = spec.k as f64 * 3.0 * spec.coeff_std * spec.amplitude;
    let amplitude = if worst >= bound { spec.amplitude * 0.9 * bound / worst } else { spec.amplitude };
    let fields: Vec<DeformationField> = (0..spec.k).map(|_| DeformationField::random(amplitude, &mut rng)).collect();
    let clip = 3.0 * spec.coeff_std;
    let coeffs: Vec<Vec<f64>> = (0..spec.examples)
        .map(|_| {
            (0..spec.k)
                .map(|_| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    (spec.coeff_std * e).clamp(-clip, clip)
                })
                .collect()
        })
        .collect();
    let examples = coeffs
        .iter()
        .map(|c| deform(&template, &fields, c))
        .collect::<Result<_, _>>()?;
    Ok(SynthDataset { spec: spec.clone(), template, examples, coeffs, fields })
}

/// Template displaced by `sum_j c_j f_j(x)` at every vertex.
pub fn deform(template: &TriMesh, fields: &[DeformationField], coeffs: &[f64]) -> Result<TriMesh, MeshError> {
    let v = template
        .vertices()
        .iter()
        .map(|&x| {
            let mut p = x;
            for (f, &c) in fields.iter().zip(coeffs) {
                let d = f.eval(x);
                for k in 0..3 {
                    p[k] += c * d[k];
                }
            }
            p
        })
        .collect();
    template.with_vertices(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: SynthSpec,
    pub seed: u64,
    pub template: String,
    pub examples: Vec<String>,
    pub true_coeffs: Vec<Vec<f64>>,
    pub fields: Vec<DeformationField>,
}

impl SynthDataset {
    /// Write `template.obj`, `example_XXXX.obj` and `manifest.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), DataError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        self.template.save_obj(dir.join("template.obj"))?;
        let mut names = Vec::with_capacity(self.examples.len());
        for (i, e) in self.examples.iter().enumerate() {
            let name = format!("example_{i:04}.obj");
            e.save_obj(dir.join(&name))?;
            names.push(name);
        }
        let manifest = Manifest {
            spec: self.spec.clone(),
            seed: self.spec.seed,
            template: "template.obj".into(),
            examples: names,
            true_coeffs: self.coeffs.clone(),
            fields: self.fields.clone(),
        };
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| DataError::Manifest(e.to_string()))?;
        fs::write(dir.join("manifest.json"), json)?;
        Ok(())
    }
}

/// A dataset read back from disk: meshes plus the manifest (coefficients are
/// informational and not needed for training).
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub manifest: Manifest,
    pub template: TriMesh,
    pub examples: Vec<TriMesh>,
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<LoadedDataset, DataError> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| DataError::Manifest(e.to_string()))?;
    let template = TriMesh::load_obj(dir.join(&manifest.template))?;
    let mut examples = Vec::with_capacity(manifest.examples.len());
    for name in &manifest.examples {
        let m = TriMesh::load_obj(dir.join(name))?;
        if !m.same_connectivity(&template) {
            return Err(MeshError::ConnectivityMismatch.into());
        }
        examples.push(m);
    }
    Ok(LoadedDataset { manifest, template, examples })
}
