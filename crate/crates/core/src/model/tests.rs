use super::*;
use crate::mesh::{SurfacePoint, TriMesh};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        latent_dim: 4,
        siren_hidden: 8,
        siren_hidden_layers: 3,
        hyper_hidden: 8,
        omega0: 30.0,
        hyper_out_scale: 1e-2,
    }
}

fn octahedron() -> TriMesh {
    TriMesh::new(
        vec![
            [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0],
            [0.0, -1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, -1.0],
        ],
        vec![
            [0, 2, 4], [2, 1, 4], [1, 3, 4], [3, 0, 4],
            [2, 0, 5], [1, 2, 5], [3, 1, 5], [0, 3, 5],
        ],
    )
    .unwrap()
}

fn random_points(mesh: &TriMesh, n: usize, seed: u64) -> PointSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PointSet::on(mesh, mesh.sample_uniform(n, &mut rng).unwrap()).unwrap()
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, s: f64) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.random_range(-s..s))
}

/// Max over components of |a - n| / max(|a|, |n|, floor), with the floor at
/// 1e-3 of the largest numerical component so round-off on near-zero entries
/// does not dominate.
fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let floor = (1e-3 * scale).max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

fn fd_check<D: Decoder>(decoder: &D, zs: &Array2<f64>, sets: &[&PointSet], grads: &[Array2<f64>]) -> f64 {
    let objective = |d: &D, z: &Array2<f64>| -> f64 {
        d.eval(z.view(), sets)
            .unwrap()
            .iter()
            .zip(grads)
            .map(|(o, g)| (o * g).sum())
            .sum()
    };
    let (gp, gz) = grads_through(decoder, zs.view(), sets, grads).unwrap();
    // fourth-order central stencil; sin(30 x) makes the plain 2-point rule
    // truncation-limited at ~1e-5
    let h = 1e-5;
    let stencil = |f: &mut dyn FnMut(f64) -> f64| {
        (f(-2.0 * h) - 8.0 * f(-h) + 8.0 * f(h) - f(2.0 * h)) / (12.0 * h)
    };
    let mut d = decoder.clone();
    let mut num_p = vec![0.0; gp.len()];
    for i in 0..gp.len() {
        let orig = d.params()[i];
        num_p[i] = stencil(&mut |dx| {
            d.params_mut()[i] = orig + dx;
            let v = objective(&d, zs);
            d.params_mut()[i] = orig;
            v
        });
    }
    let mut z = zs.clone();
    let mut num_z = Vec::new();
    for i in 0..z.len() {
        let orig = z.as_slice().unwrap()[i];
        num_z.push(stencil(&mut |dx| {
            z.as_slice_mut().unwrap()[i] = orig + dx;
            let v = objective(decoder, &z);
            z.as_slice_mut().unwrap()[i] = orig;
            v
        }));
    }
    rel_err(&gp, &num_p).max(rel_err(gz.as_slice().unwrap(), &num_z))
}

#[test]
fn full_scale_parameter_counts() {
    let cfg = ModelConfig::default();
    assert_eq!(cfg.siren_layout().param_count(), 50_435);
    assert_eq!(HyperNet::count_params(&cfg), 13_949_955);
    assert_eq!(10 * (33_024 + 65_792) + 257 * 50_435, 13_949_955);
    assert_eq!(VertexArrayMlp::count_params(128, 400, 11_551), 13_947_453);
}

#[test]
fn zero_output_layers_generate_zero_siren() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut h = HyperNet::new(tiny_config(), &mut rng);
    zero_output_layers(&mut h);
    let p = h.generate(Array2::zeros((1, 4)).view()).unwrap();
    assert!(p.iter().all(|v| *v == 0.0));
}

fn zero_output_layers(h: &mut HyperNet) {
    for (layout, range) in h.generator_blocks() {
        let last = layout.layers.len() - 1;
        let off = range.start + layout.offsets()[last];
        let n = layout.layers[last].param_count();
        h.params_mut()[off..off + n].iter_mut().for_each(|v| *v = 0.0);
    }
}

#[test]
fn zero_siren_decodes_to_template() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut h = HyperNet::new(tiny_config(), &mut rng);
    zero_output_layers(&mut h);
    let mesh = octahedron();
    let model = AutoDecoder::new(h, mesh.clone(), Array2::zeros((1, 4))).unwrap();
    let z = LatentCode(vec![0.3, -0.2, 0.1, 0.5]);
    let set = random_points(&mesh, 20, 2);
    let out = model.decode_points(&z, &set).unwrap();
    assert_eq!(out, set.positions);
}

#[test]
fn decode_depends_on_position_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mesh = octahedron();
    let model = AutoDecoder::new(HyperNet::new(tiny_config(), &mut rng), mesh.clone(), Array2::zeros((1, 4))).unwrap();
    let z = LatentCode(vec![0.01, 0.02, -0.01, 0.0]);
    // vertex 4 is corner 2 of face 0 and corner 2 of face 1
    let a = model.decode(&z, &[SurfacePoint::corner(0, 2)]).unwrap();
    let b = model.decode(&z, &[SurfacePoint::corner(1, 2)]).unwrap();
    for k in 0..3 {
        assert!((a[0][k] - b[0][k]).abs() < 1e-9);
    }
}

#[test]
fn decode_is_permutation_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mesh = octahedron();
    let model = AutoDecoder::new(HyperNet::new(tiny_config(), &mut rng), mesh.clone(), Array2::zeros((1, 4))).unwrap();
    let z = LatentCode(vec![0.05, -0.02, 0.03, 0.01]);
    let set = random_points(&mesh, 12, 5);
    let out = model.decode_points(&z, &set).unwrap();
    let perm: Vec<usize> = (0..12).rev().collect();
    let out_p = model.decode_points(&z, &set.subset(&perm)).unwrap();
    for (i, &j) in perm.iter().enumerate() {
        for k in 0..3 {
            assert!((out_p[[i, k]] - out[[j, k]]).abs() < 1e-12);
        }
    }
}

#[test]
fn grads_through_hypernet_match_finite_differences() {
    let mesh = octahedron();
    for trial in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + trial);
        let h = HyperNet::new(tiny_config(), &mut rng);
        let zs = random_matrix(&mut rng, 2, 4, 0.5);
        let s1 = random_points(&mesh, 5, trial);
        let s2 = random_points(&mesh, 5, trial + 50);
        let grads = vec![random_matrix(&mut rng, 5, 3, 1.0), random_matrix(&mut rng, 5, 3, 1.0)];
        let err = fd_check(&h, &zs, &[&s1, &s2], &grads);
        assert!(err < 1e-5, "trial {trial}: {err}");
    }
}

#[test]
fn grads_through_variants_match_finite_differences() {
    let mesh = octahedron();
    let cfg = ModelConfig { omega0: 3.0, ..tiny_config() };
    for variant in [
        DecoderVariant::SirenConcat,
        DecoderVariant::VertexPositionMlp,
        DecoderVariant::VertexDisplacementMlp,
    ] {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = variant.build(&cfg, 6, &mesh, &mut rng);
        let zs = random_matrix(&mut rng, 2, 4, 0.5);
        let s1 = random_points(&mesh, 5, 1);
        let s2 = random_points(&mesh, 4, 2);
        let grads = vec![random_matrix(&mut rng, 5, 3, 1.0), random_matrix(&mut rng, 4, 3, 1.0)];
        let err = fd_check(&d, &zs, &[&s1, &s2], &grads);
        assert!(err < 1e-5, "{variant:?}: {err}");
    }
}

#[test]
fn zero_output_grads_give_zero_grads() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mesh = octahedron();
    let h = HyperNet::new(tiny_config(), &mut rng);
    let set = random_points(&mesh, 5, 3);
    let zs = random_matrix(&mut rng, 1, 4, 0.5);
    let (gp, gz) = grads_through(&h, zs.view(), &[&set], &[Array2::zeros((5, 3))]).unwrap();
    assert!(gp.iter().all(|v| *v == 0.0));
    assert!(gz.iter().all(|v| *v == 0.0));
}

#[test]
fn z_grad_is_linear_over_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mesh = octahedron();
    let h = HyperNet::new(tiny_config(), &mut rng);
    let set = random_points(&mesh, 6, 4);
    let zs = random_matrix(&mut rng, 1, 4, 0.5);
    let ones = Array2::ones((6, 3));
    let (_, total) = grads_through(&h, zs.view(), &[&set], &[ones]).unwrap();
    let mut summed = Array1::<f64>::zeros(4);
    for i in 0..6 {
        let single = set.subset(&[i]);
        let (_, g) = grads_through(&h, zs.view(), &[&single], &[Array2::ones((1, 3))]).unwrap();
        summed += &g.row(0);
    }
    for k in 0..4 {
        assert!((summed[k] - total[[0, k]]).abs() < 1e-10);
    }
}

#[test]
fn sample_latent_single_row_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mesh = octahedron();
    let table = Array2::from_shape_vec((1, 4), vec![0.1, -0.2, 0.3, 0.0]).unwrap();
    let model = AutoDecoder::new(HyperNet::new(tiny_config(), &mut rng), mesh, table).unwrap();
    let z = model.sample_latent(&mut rng).unwrap();
    assert_eq!(z.0, vec![0.1, -0.2, 0.3, 0.0]);
}

#[test]
fn sample_latent_mean_within_clt_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mesh = octahedron();
    let table = random_matrix(&mut rng, 30, 4, 1.0);
    let model = AutoDecoder::new(HyperNet::new(tiny_config(), &mut rng), mesh, table.clone()).unwrap();
    let (mean, std) = latent_stats(&table).unwrap();
    let n = 10_000;
    let mut acc = Array1::<f64>::zeros(4);
    for _ in 0..n {
        acc += &Array1::from(model.sample_latent(&mut rng).unwrap().0);
    }
    acc /= n as f64;
    for k in 0..4 {
        assert!((acc[k] - mean[k]).abs() < 3.0 * std[k] / (n as f64).sqrt());
    }
    let z = model.sample_latent(&mut rng).unwrap();
    let m = model.decode_mesh(&z, 1).unwrap();
    assert!(m.vertices().iter().flatten().all(|v| v.is_finite()));
}

#[test]
fn empty_latent_table_cannot_be_sampled() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = AutoDecoder::new(HyperNet::new(tiny_config(), &mut rng), octahedron(), Array2::zeros((0, 4))).unwrap();
    assert!(matches!(model.sample_latent(&mut rng), Err(ModelError::EmptyLatentTable)));
}

#[test]
fn decode_mesh_levels_share_coarse_vertices() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mesh = octahedron();
    let model = AutoDecoder::new(HyperNet::new(tiny_config(), &mut rng), mesh.clone(), Array2::zeros((1, 4))).unwrap();
    let z = LatentCode(vec![0.02, 0.01, -0.03, 0.04]);
    let l0 = model.decode_mesh(&z, 0).unwrap();
    let l1 = model.decode_mesh(&z, 1).unwrap();
    assert_eq!(l0.vertex_count(), 6);
    assert_eq!(l1.vertex_count(), 6 + 12);
    assert_eq!(l1.face_count(), 32);
    for v in 0..6 {
        for k in 0..3 {
            assert!((l0.vertices()[v][k] - l1.vertices()[v][k]).abs() < 1e-12);
        }
    }
}

#[test]
fn displacement_array_with_zero_output_is_template() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mesh = octahedron();
    let mut d = VertexArrayMlp::new(ArrayMode::Displacement, 4, 5, &mesh, &mut rng);
    d.params_mut().iter_mut().for_each(|v| *v = 0.0);
    let y = d.vertex_arrays(Array2::from_elem((1, 4), 0.7).view()).unwrap();
    let flat: Vec<f64> = mesh.vertices().iter().flatten().copied().collect();
    assert_eq!(y.row(0).to_vec(), flat);
}

#[test]
fn array_variant_rejects_foreign_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mesh = octahedron();
    let d = VertexArrayMlp::new(ArrayMode::Position, 4, 5, &mesh, &mut rng);
    let big = mesh.subdivide();
    let set = PointSet::on(&big, vec![SurfacePoint::corner(20, 0)]).unwrap();
    assert!(d.eval(Array2::zeros((1, 4)).view(), &[&set]).is_err());
}

/// With the latent inputs of the concat net zeroed and the hypernet output
/// pinned to the same SIREN weights, both variants compute the same field.
#[test]
fn concat_and_hyper_agree_on_degenerate_configs() {
    let cfg = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mesh = octahedron();
    let siren = cfg.siren_layout();
    let target = crate::netcore::init_params(&siren, crate::netcore::Init::Siren { omega: 30.0 }, &mut rng);

    let mut h = HyperNet::new(cfg.clone(), &mut rng);
    zero_output_layers(&mut h);
    // pin generator output biases to `target`
    let mut out_off = 0;
    for (layout, range) in h.generator_blocks() {
        let last = layout.layers.len() - 1;
        let spec = layout.layers[last];
        let b0 = range.start + layout.offsets()[last] + spec.weight_count();
        let n = spec.outputs;
        h.params_mut()[b0..b0 + n].copy_from_slice(&target[out_off..out_off + n]);
        out_off += n;
    }

    let mut cp = Vec::new();
    let views = siren.views(&target);
    let m = cfg.latent_dim;
    let widen = |w: ndarray::ArrayView2<f64>, extra: usize| {
        let mut out = Array2::zeros((w.nrows(), w.ncols() + extra));
        out.slice_mut(ndarray::s![.., ..w.ncols()]).assign(&w);
        out
    };
    for (i, l) in views.iter().enumerate() {
        let w = if i == 0 || i == 3 { widen(l.weights, m) } else { l.weights.to_owned() };
        cp.extend(w.iter().copied());
        cp.extend(l.biases.iter().copied());
    }
    let c = ConcatSiren::from_params(cfg, cp).unwrap();
    let z = Array2::from_shape_vec((1, 4), vec![0.4, -0.3, 0.2, 0.9]).unwrap();
    let set = random_points(&mesh, 10, 17);
    let a = h.eval(z.view(), &[&set]).unwrap().remove(0);
    let b = c.eval(z.view(), &[&set]).unwrap().remove(0);
    for (x, y) in a.iter().zip(b.iter()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn checkpoint_round_trip_and_validation() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let mesh = octahedron();
    let table = random_matrix(&mut rng, 3, 4, 0.1);
    let model = AutoDecoder::new(HyperNet::new(tiny_config(), &mut rng), mesh, table).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&model, Some(serde_json::json!({"note": 1})), &mut buf).unwrap();
    assert_eq!(&buf[..5], b"DFRM1");
    let len = u32::from_le_bytes(buf[5..9].try_into().unwrap()) as usize;
    let meta: serde_json::Value = serde_json::from_slice(&buf[9..9 + len]).unwrap();
    assert_eq!(meta["kind"], "siren_hyper");
    assert_eq!(buf.len() - 9 - len, 8 * (model.decoder.param_count() + 12 + 18));

    let (back, extra) = read_checkpoint(&buf[..]).unwrap();
    assert_eq!(back.decoder, model.decoder);
    assert_eq!(back.latents, model.latents);
    assert_eq!(back.template, model.template);
    assert_eq!(extra.unwrap()["note"], 1);

    let truncated = &buf[..buf.len() - 8];
    assert!(matches!(read_checkpoint(truncated), Err(ModelError::Checkpoint(_))));
    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(matches!(read_checkpoint(&bad[..]), Err(ModelError::Checkpoint(_))));
}

#[test]
fn field_is_continuous_along_a_segment() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let mesh = octahedron();
    let model = AutoDecoder::new(HyperNet::new(tiny_config(), &mut rng), mesh.clone(), Array2::zeros((1, 4))).unwrap();
    let z = LatentCode(vec![0.01; 4]);
    let a = [0.8, 0.1, 0.1];
    let b = [0.1, 0.1, 0.8];
    let n = 500;
    let pts: Vec<SurfacePoint> = (0..=n)
        .map(|i| {
            let t = i as f64 / n as f64;
            SurfacePoint::new(0, [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), a[2] + t * (b[2] - a[2])])
        })
        .collect();
    let set = PointSet::on(&mesh, pts).unwrap();
    let out = model.decode_points(&z, &set).unwrap();
    let spacing = (&set.positions.row(1) - &set.positions.row(0)).mapv(|v| v * v).sum().sqrt();
    let jumps: Vec<f64> = (0..n)
        .map(|i| (&out.row(i + 1) - &out.row(i)).mapv(|v| v * v).sum().sqrt())
        .collect();
    // local Lipschitz estimate from a coarser pass over the same segment
    let lip = (0..n / 10)
        .map(|i| {
            let d = (&out.row(10 * i + 10) - &out.row(10 * i)).mapv(|v| v * v).sum().sqrt();
            d / (10.0 * spacing)
        })
        .fold(0.0, f64::max);
    for j in jumps {
        assert!(j < 10.0 * spacing * lip.max(1.0));
    }
}
