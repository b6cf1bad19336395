use partgroup::network::{Model, ModelConfig};
use partgroup_autograd::{Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> ModelConfig {
    ModelConfig {
        dim: 16,
        num_individual_queries: 4,
        num_group_queries: 5,
        num_parts: 3,
        num_classes: 2,
        encoder_layers: 1,
        individual_decoder_layers: 1,
        enhancer_layers: 1,
        group_decoder_layers: 1,
        heads: 2,
        ffn_dim: 24,
        stem_channels: vec![4, 8],
        image_width: 16,
        image_height: 16,
    }
}

fn image(c: &ModelConfig, batch: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = batch * 3 * c.image_height * c.image_width;
    Tensor::new(&[batch, 3, c.image_height, c.image_width], (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn param(store: &ParamStore<f64>, name: &str) -> Tensor<f64> {
    store.get(store.id(name).unwrap_or_else(|| panic!("no parameter {name}"))).clone()
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol * (1.0 + y.abs()), "entry {i}: {x} vs {y}");
    }
}

/// Row-vector times `[in, out]` weight plus optional bias.
fn affine(x: &[f64], w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Vec<f64> {
    let (fin, fout) = (w.shape()[0], w.shape()[1]);
    assert_eq!(x.len(), fin);
    (0..fout)
        .map(|o| (0..fin).map(|i| x[i] * w.data()[i * fout + o]).sum::<f64>() + b.map_or(0.0, |b| b.data()[o]))
        .collect()
}

fn mlp(store: &ParamStore<f64>, prefix: &str, layers: usize, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for l in 0..layers {
        let w = param(store, &format!("{prefix}.{l}.weight"));
        let b = param(store, &format!("{prefix}.{l}.bias"));
        h = affine(&h, &w, Some(&b));
        if l + 1 < layers {
            h.iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }
    h
}

#[test]
fn table_s1_forward_shapes() {
    let c = ModelConfig::table_s1();
    let (model, store) = Model::init::<f32>(&c, 0).unwrap();
    let g = Graph::new(&store);
    let x = g.constant(Tensor::<f32>::zeros(&[1, 3, c.image_height, c.image_width]));
    let out = model.forward(&g, x, None);
    let grid = c.grid();
    let (d, ni, ng, p, nc) = (c.dim, c.num_individual_queries, c.num_group_queries, c.num_parts, c.num_classes);
    assert_eq!((ni, ng, d), (24, 32, 256));
    assert_eq!(g.shape(out.encoded.feature), vec![1, grid.cells(), d]);
    assert_eq!(g.shape(out.individuals.embeddings), vec![1, ni, d]);
    assert_eq!(g.shape(out.individuals.boxes), vec![1, ni, 4]);
    assert_eq!(g.shape(out.individuals.objectness), vec![1, ni, 1]);
    assert_eq!(g.shape(out.part_queries), vec![ni, p, d]);
    assert_eq!(g.shape(out.enhanced.parts), vec![ni, p, d]);
    assert_eq!(g.shape(out.enhanced.part_attention), vec![1, ni * p, grid.cells()]);
    assert_eq!(g.shape(out.part_aware), vec![1, ni, d]);
    assert_eq!(g.shape(out.groups.embeddings), vec![1, ng, d]);
    assert_eq!(g.shape(out.groups.boxes), vec![1, ng, 4]);
    assert_eq!(g.shape(out.groups.class_logits), vec![1, ng, nc]);
    assert_eq!(g.shape(out.similarity), vec![1, ng, ni]);

    let e = out.embedding_set(&g, 0, &c);
    assert_eq!(e.feature.shape(), &[grid.height, grid.width, d]);
    assert_eq!(e.parts.shape(), &[ni, p, d]);
    assert_eq!(e.part_attention.shape(), &[ni, p, grid.height, grid.width]);
    let pset = out.prediction_set(&g, 0);
    assert_eq!((pset.individual_boxes.len(), pset.objectness.len()), (ni, ni));
    assert_eq!((pset.class_logits.len(), pset.class_logits[0].len()), (ng, nc));
    assert_eq!((pset.similarity.len(), pset.similarity[0].len()), (ng, ni));
}

#[test]
fn forward_is_deterministic_and_boxes_are_normalized() {
    let c = tiny();
    let run = || {
        let (model, store) = Model::init::<f64>(&c, 5).unwrap();
        let g = Graph::new(&store);
        let out = model.forward(&g, g.constant(image(&c, 2, 1)), None);
        let values = (g.value(out.encoded.feature).to_f64_vec(), g.value(out.individuals.boxes).to_f64_vec(), g.value(out.similarity).to_f64_vec());
        values
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert!(a.1.iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn doubling_resolution_doubles_the_grid() {
    let c = tiny();
    let big = ModelConfig { image_width: 32, image_height: 32, ..c.clone() };
    let (model, store) = Model::init::<f64>(&big, 0).unwrap();
    let g = Graph::new(&store);
    let enc = model.encode(&g, g.constant(image(&big, 1, 0)));
    let (small, big_grid) = (c.grid(), big.grid());
    assert_eq!((big_grid.width, big_grid.height), (2 * small.width, 2 * small.height));
    assert_eq!(g.shape(enc.feature), vec![1, big_grid.cells(), c.dim]);
}

#[test]
fn zero_input_projection_gives_constant_features() {
    let c = tiny();
    let (model, mut store) = Model::init::<f64>(&c, 0).unwrap();
    for name in ["input_proj.weight", "input_proj.bias"] {
        let id = store.id(name).unwrap();
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::zeros(&shape));
    }
    let g = Graph::new(&store);
    let out = model.forward(&g, g.constant(image(&c, 1, 3)), None);
    let f = g.value(out.encoded.feature).to_f64_vec();
    for row in f.chunks(c.dim) {
        close(row, &f[..c.dim], 1e-12);
    }
    assert!(g.value(out.similarity).to_f64_vec().iter().all(|v| v.is_finite()));
}

#[test]
fn part_queries_match_direct_products() {
    let c = tiny();
    let (model, store) = Model::init::<f64>(&c, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let e = random(&[2, c.num_individual_queries, c.dim], &mut rng);
    let g = Graph::new(&store);
    let q = g.value(model.make_part_queries(&g, g.constant(e.clone()))).to_f64_vec();
    let w = param(&store, "enhancer.part_proj.weight");
    let (d, p) = (c.dim, c.num_parts);
    let mut want = Vec::new();
    for row in e.data().chunks(d) {
        for part in 0..p {
            for o in 0..d {
                want.push((0..d).map(|i| row[i] * w.data()[i * p * d + part * d + o]).sum::<f64>());
            }
        }
    }
    close(&q, &want, 1e-9);
}

#[test]
fn identity_and_zero_part_projections() {
    let c = tiny();
    let (model, mut store) = Model::init::<f64>(&c, 2).unwrap();
    let (d, p) = (c.dim, c.num_parts);
    let id = model.part_projection();
    let mut eye = vec![0.0; d * p * d];
    for part in 0..p {
        for i in 0..d {
            eye[i * p * d + part * d + i] = 1.0;
        }
    }
    store.set(id, Tensor::new(&[d, p * d], eye));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let e = random(&[1, c.num_individual_queries, d], &mut rng);
    {
        let g = Graph::new(&store);
        let q = g.value(model.make_part_queries(&g, g.constant(e.clone()))).to_f64_vec();
        for (k, chunk) in q.chunks(d).enumerate() {
            let person = k / p;
            assert_eq!(chunk, &e.data()[person * d..(person + 1) * d]);
        }
    }
    store.set(id, Tensor::zeros(&[d, p * d]));
    let g = Graph::new(&store);
    assert!(g.value(model.make_part_queries(&g, g.constant(e))).to_f64_vec().iter().all(|&v| v == 0.0));
}

#[test]
fn fuse_matches_concat_matmul_and_is_linear() {
    let c = tiny();
    let (model, mut store) = Model::init::<f64>(&c, 4).unwrap();
    let (d, p, ni) = (c.dim, c.num_parts, c.num_individual_queries);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (ei, ep) = (random(&[1, ni, d], &mut rng), random(&[ni, p, d], &mut rng));
    let (ei2, ep2) = (random(&[1, ni, d], &mut rng), random(&[ni, p, d], &mut rng));
    let w = param(&store, "fuse.weight");
    let fuse = |store: &ParamStore<f64>, a: &Tensor<f64>, b: &Tensor<f64>| {
        let g = Graph::new(store);
        let fused = g.value(model.fuse(&g, g.constant(a.clone()), g.constant(b.clone()))).to_f64_vec();
        fused
    };
    let got = fuse(&store, &ei, &ep);
    let mut want = Vec::new();
    for j in 0..ni {
        let mut cat = ei.data()[j * d..(j + 1) * d].to_vec();
        cat.extend_from_slice(&ep.data()[j * p * d..(j + 1) * p * d]);
        want.extend(affine(&cat, &w, None));
    }
    close(&got, &want, 1e-9);

    let sum = |x: &Tensor<f64>, y: &Tensor<f64>| {
        Tensor::new(x.shape(), x.data().iter().zip(y.data()).map(|(a, b)| a + b).collect())
    };
    let both = fuse(&store, &sum(&ei, &ei2), &sum(&ep, &ep2));
    let separate: Vec<f64> = got.iter().zip(fuse(&store, &ei2, &ep2)).map(|(a, b)| a + b).collect();
    close(&both, &separate, 1e-9);

    let id = model.fuse_weight();
    let shape = store.get(id).shape().to_vec();
    store.set(id, Tensor::zeros(&shape));
    assert!(fuse(&store, &ei, &ep).iter().all(|&v| v == 0.0));
}

#[test]
fn similarity_matches_projected_dot_products() {
    let c = tiny();
    let (model, store) = Model::init::<f64>(&c, 6).unwrap();
    let (d, ni, ng) = (c.dim, c.num_individual_queries, c.num_group_queries);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (eg, mut ei) = (random(&[1, ng, d], &mut rng), random(&[1, ni, d], &mut rng));
    // Individual 3 duplicates individual 1.
    let dup = ei.data()[d..2 * d].to_vec();
    ei.data_mut()[3 * d..4 * d].copy_from_slice(&dup);
    let g = Graph::new(&store);
    let s = g.value(model.similarity(&g, g.constant(eg.clone()), g.constant(ei.clone()))).to_f64_vec();
    let pg: Vec<Vec<f64>> = eg.data().chunks(d).map(|r| mlp(&store, "sim_group", 2, r)).collect();
    let pi: Vec<Vec<f64>> = ei.data().chunks(d).map(|r| mlp(&store, "sim_individual", 2, r)).collect();
    let want: Vec<f64> = pg.iter().flat_map(|a| pi.iter().map(move |b| a.iter().zip(b).map(|(x, y)| x * y).sum())).collect();
    close(&s, &want, 1e-9);
    for row in s.chunks(ni) {
        assert_eq!(row[1], row[3]);
    }
}

#[test]
fn zero_similarity_projection_gives_zero_matrix() {
    let c = tiny();
    let (model, mut store) = Model::init::<f64>(&c, 6).unwrap();
    for name in ["sim_group.1.weight", "sim_group.1.bias"] {
        let id = store.id(name).unwrap();
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::zeros(&shape));
    }
    let g = Graph::new(&store);
    let out = model.forward(&g, g.constant(image(&c, 1, 0)), None);
    assert!(g.value(out.similarity).to_f64_vec().iter().all(|&v| v == 0.0));
}

#[test]
fn attention_rows_are_stochastic() {
    let c = tiny();
    let (model, store) = Model::init::<f64>(&c, 1).unwrap();
    let g = Graph::new(&store);
    let out = model.forward(&g, g.constant(image(&c, 2, 4)), None);
    let maps = out.attention_maps();
    assert!(!maps.is_empty());
    for (label, a) in maps {
        let shape = g.shape(a);
        let nk = *shape.last().unwrap();
        for row in g.value(a).to_f64_vec().chunks(nk) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9, "{label}: row sums to {s}");
        }
    }
    let cells = c.grid().cells();
    for row in g.value(out.enhanced.part_attention).to_f64_vec().chunks(cells) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
    }
}

#[test]
fn masked_individual_has_no_influence_on_groups() {
    let c = tiny();
    let (model, store) = Model::init::<f64>(&c, 8).unwrap();
    let ni = c.num_individual_queries;
    let mut mask = vec![false; ni];
    mask[2] = true;
    let run = |bump: f64| {
        let g = Graph::new(&store);
        let enc = model.encode(&g, g.constant(image(&c, 1, 5)));
        let ind = model.decode_individuals(&g, &enc);
        let parts = model.enhance(&g, model.make_part_queries(&g, ind.embeddings), &enc);
        let ea = model.fuse(&g, ind.embeddings, parts.parts);
        let mut delta = vec![0.0; ni * c.dim];
        delta[2 * c.dim..3 * c.dim].iter_mut().for_each(|v| *v = bump);
        let ea = g.add(ea, g.constant(Tensor::new(&[1, ni, c.dim], delta)));
        let out = model.decode_groups(&g, ea, &enc, Some(&mask));
        let values = (g.value(out.boxes).to_f64_vec(), g.value(out.class_logits).to_f64_vec());
        values
    };
    assert_eq!(run(0.0), run(3.0));

    // Without the mask the same perturbation does change the outputs.
    let g = Graph::new(&store);
    let enc = model.encode(&g, g.constant(image(&c, 1, 5)));
    let ind = model.decode_individuals(&g, &enc);
    let parts = model.enhance(&g, model.make_part_queries(&g, ind.embeddings), &enc);
    let ea = model.fuse(&g, ind.embeddings, parts.parts);
    let base = g.value(model.decode_groups(&g, ea, &enc, None).class_logits).to_f64_vec();
    let mut delta = vec![0.0; ni * c.dim];
    delta[2 * c.dim..3 * c.dim].iter_mut().for_each(|v| *v = 3.0);
    let ea2 = g.add(ea, g.constant(Tensor::new(&[1, ni, c.dim], delta)));
    assert_ne!(base, g.value(model.decode_groups(&g, ea2, &enc, None).class_logits).to_f64_vec());
}

#[test]
fn identical_individuals_get_identical_parts() {
    let c = tiny();
    let (model, store) = Model::init::<f64>(&c, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut e = random(&[1, c.num_individual_queries, c.dim], &mut rng);
    let first = e.data()[..c.dim].to_vec();
    e.data_mut()[c.dim..2 * c.dim].copy_from_slice(&first);
    let g = Graph::new(&store);
    let enc = model.encode(&g, g.constant(image(&c, 1, 6)));
    let out = model.enhance(&g, model.make_part_queries(&g, g.constant(e)), &enc);
    let parts = g.value(out.parts).to_f64_vec();
    let per = c.num_parts * c.dim;
    assert_eq!(parts[..per], parts[per..2 * per]);
}

#[test]
fn every_parameter_receives_gradient() {
    let c = tiny();
    let (model, store) = Model::init::<f64>(&c, 0).unwrap();
    let g = Graph::new(&store);
    let out = model.forward(&g, g.constant(image(&c, 2, 7)), None);
    let terms: Vec<_> = [
        out.individuals.boxes,
        out.individuals.objectness,
        out.groups.boxes,
        out.groups.class_logits,
        out.similarity,
        out.enhanced.part_attention,
    ]
    .iter()
    .map(|&v| (g.sum_all(g.sigmoid(v)), 1.0))
    .collect();
    let grads = g.backward(g.weighted_sum(&terms)).into_param_grads();
    for (id, name, _) in store.iter() {
        let gr = grads.get(id).unwrap_or_else(|| panic!("{name} has no gradient"));
        assert!(gr.data().iter().any(|&v| v != 0.0), "{name} gradient is zero");
    }
}
