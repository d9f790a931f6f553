//! Spatial graph convolution and the residual per-stream encoder.
//!
//! Node features are laid out frame-major as a `(T·N)×C` matrix, so one
//! matmul applies a weight to every node of every frame at once.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{shortest_paths, JointGraph, PartitionedGraph};
use crate::numeric::{xavier_uniform, Params, Tape, Tensor, Var};

/// Per-frame embedding width produced by each stream.
pub const FEATURE_DIM: usize = 256;
/// GCN blocks per stream.
pub const NUM_BLOCKS: usize = 9;
/// Blocks per residual group.
pub const GROUP_SIZE: usize = 3;
/// Pose channels consumed by the encoder (x, y).
pub const POSE_CHANNELS: usize = 2;

pub fn weight_name(prefix: &str, k: usize) -> String {
    format!("{prefix}.w{k}")
}

pub fn bias_name(prefix: &str) -> String {
    format!("{prefix}.b")
}

/// `Σ_k Â_k X W_k + b` without activation. `x` is `(T·N)×C_in`.
pub fn graph_conv(
    tape: &mut Tape,
    x: Var,
    pg: &PartitionedGraph,
    params: &Params,
    prefix: &str,
) -> Result<Var> {
    let n = pg.node_count();
    let rows = tape.value(x).dims2().0;
    if !rows.is_multiple_of(n) {
        return Err(Error::dim("graph_conv", tape.value(x).shape(), &[n, n]));
    }
    let mut acc: Option<Var> = None;
    for (k, mask) in pg.masks.iter().enumerate() {
        let w = tape.param(&weight_name(prefix, k), params.get(&weight_name(prefix, k))?);
        let xw = tape.matmul(x, w)?;
        let mixed = tape.graph_mix(mask, xw)?;
        acc = Some(match acc {
            None => mixed,
            Some(a) => tape.add(a, mixed)?,
        });
    }
    if params.contains(&weight_name(prefix, pg.k())) {
        return Err(Error::Config(format!(
            "`{prefix}` has more weight matrices than the graph's {} partitions",
            pg.k()
        )));
    }
    let b = tape.param(&bias_name(prefix), params.get(&bias_name(prefix))?);
    tape.add_row(acc.expect("at least one partition"), b)
}

/// `ReLU(Σ_k Â_k X W_k + b)`.
pub fn gcn_layer(
    tape: &mut Tape,
    x: Var,
    pg: &PartitionedGraph,
    params: &Params,
    prefix: &str,
) -> Result<Var> {
    let y = graph_conv(tape, x, pg, params, prefix)?;
    Ok(tape.relu(y))
}

/// One GCN block: a graph-conv layer with its activation.
pub fn gcn_block(
    tape: &mut Tape,
    x: Var,
    pg: &PartitionedGraph,
    params: &Params,
    prefix: &str,
) -> Result<Var> {
    gcn_layer(tape, x, pg, params, prefix)
}

/// A residual group: `x + block_3(block_2(block_1(x)))`.
pub fn residual_group(
    tape: &mut Tape,
    x: Var,
    pg: &PartitionedGraph,
    params: &Params,
    block_prefixes: &[String],
) -> Result<Var> {
    let mut h = x;
    for p in block_prefixes {
        h = gcn_block(tape, h, pg, params, p)?;
    }
    let (si, so) = (tape.value(x).shape().to_vec(), tape.value(h).shape().to_vec());
    if si != so {
        return Err(Error::Config(format!(
            "residual group changes channel count: {si:?} -> {so:?}"
        )));
    }
    tape.add(x, h)
}

pub fn block_prefix(stream: &str, i: usize) -> String {
    format!("{stream}.block{i}")
}

/// Encodes normalised coordinates `[T, N, 2]` into a `T×256` feature sequence:
/// input projection, nine GCN blocks in residual groups of three, a global
/// residual from the projected input, a per-frame node mean, and the output
/// projection.
pub fn stream_encode(
    tape: &mut Tape,
    coords: &Tensor,
    pg: &PartitionedGraph,
    params: &Params,
    stream: &str,
) -> Result<Var> {
    let shape = coords.shape();
    if shape.len() != 3 || shape[2] != POSE_CHANNELS {
        return Err(Error::dim("stream_encode", shape, &[0, pg.node_count(), POSE_CHANNELS]));
    }
    let (t, n) = (shape[0], shape[1]);
    if n != pg.node_count() {
        return Err(Error::dim("stream_encode", shape, &[t, pg.node_count(), POSE_CHANNELS]));
    }
    let x = tape.constant(coords.reshape(&[t * n, POSE_CHANNELS])?);
    let w_in = tape.param(&format!("{stream}.input.w"), params.get(&format!("{stream}.input.w"))?);
    let b_in = tape.param(&format!("{stream}.input.b"), params.get(&format!("{stream}.input.b"))?);
    let xw = tape.matmul(x, w_in)?;
    let projected = tape.add_row(xw, b_in)?;

    let mut h = projected;
    for g in 0..NUM_BLOCKS / GROUP_SIZE {
        let prefixes: Vec<String> = (0..GROUP_SIZE)
            .map(|j| block_prefix(stream, g * GROUP_SIZE + j))
            .collect();
        h = residual_group(tape, h, pg, params, &prefixes)?;
    }
    let h = tape.add(h, projected)?;
    let pooled = tape.group_mean(h, n)?;
    let w_out = tape.param(&format!("{stream}.output.w"), params.get(&format!("{stream}.output.w"))?);
    let b_out = tape.param(&format!("{stream}.output.b"), params.get(&format!("{stream}.output.b"))?);
    let out = tape.matmul(pooled, w_out)?;
    tape.add_row(out, b_out)
}

/// Adds encoder parameters for one stream: Glorot weights, zero biases.
pub fn init_stream_params<R: Rng>(
    rng: &mut R,
    params: &mut Params,
    stream: &str,
    partitions: usize,
    channels: usize,
) {
    params.insert(
        format!("{stream}.input.w"),
        xavier_uniform(rng, &[POSE_CHANNELS, channels], POSE_CHANNELS, channels),
    );
    params.insert(format!("{stream}.input.b"), Tensor::zeros(&[channels]));
    for i in 0..NUM_BLOCKS {
        let p = block_prefix(stream, i);
        for k in 0..partitions {
            params.insert(
                weight_name(&p, k),
                xavier_uniform(rng, &[channels, channels], channels, channels),
            );
        }
        params.insert(bias_name(&p), Tensor::zeros(&[channels]));
    }
    params.insert(
        format!("{stream}.output.w"),
        xavier_uniform(rng, &[channels, FEATURE_DIM], channels, FEATURE_DIM),
    );
    params.insert(format!("{stream}.output.b"), Tensor::zeros(&[FEATURE_DIM]));
}

/// How the node-wise oracle normalises a neighbour's contribution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Normalizer {
    /// `Z = |subset of N(i) sharing j's label|`.
    SubsetSize,
    /// `Z = sqrt(|S_k(i)| · |S_k(j)|)`, the node-wise form of `Λ^{-1/2} A_k Λ^{-1/2}`.
    Symmetric,
}

/// Literal per-node aggregation `Y(i) = Σ_{j∈N(i)} X(j) W_{l_i(j)} / Z_i(j)` with
/// distance labels `l_i(j) = d(i, j)` (0 = self, 1 = neighbour).
///
/// `x` is `N×C_in` for a single frame; `weights[k]` is `C_in×C_out`.
pub fn node_aggregation_oracle(
    x: &Tensor,
    g: &JointGraph,
    weights: &[Tensor],
    z: Normalizer,
) -> Result<Tensor> {
    let n = g.node_count();
    let (rows, c_in) = x.dims2();
    if rows != n || weights.len() != 2 {
        return Err(Error::dim("node_aggregation_oracle", x.shape(), &[n, weights.len()]));
    }
    let c_out = weights[0].dims2().1;
    let d = shortest_paths(g);
    let label = |i: usize, j: usize| d.get(i, j);
    let subset_size = |i: usize, k: usize| (0..n).filter(|&j| label(i, j) == k).count() as f64;

    let mut y = Tensor::zeros(&[n, c_out]);
    for i in 0..n {
        for j in 0..n {
            let k = label(i, j);
            if k > 1 {
                continue;
            }
            let zval = match z {
                Normalizer::SubsetSize => subset_size(i, k),
                Normalizer::Symmetric => (subset_size(i, k) * subset_size(j, k)).sqrt(),
            };
            for o in 0..c_out {
                let mut s = 0.0;
                for c in 0..c_in {
                    s += x.at(j, c) * weights[k].at(c, o);
                }
                y.data_mut()[i * c_out + o] += s / zval;
            }
        }
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_part_graph, distance_partition, multiscale_partition, Strategy};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer_params(prefix: &str, ws: &[Tensor], b: Tensor) -> Params {
        let mut p = Params::new();
        for (k, w) in ws.iter().enumerate() {
            p.insert(weight_name(prefix, k), w.clone());
        }
        p.insert(bias_name(prefix), b);
        p
    }

    #[test]
    fn single_node_layer_is_relu_xw() {
        let g = JointGraph::new(1, &[]).unwrap();
        let pg = multiscale_partition(&g, 1).unwrap();
        assert_eq!(pg.masks[0].data(), &[1.0]);
        let w = Tensor::from_rows(&[vec![1.0, -1.0], vec![0.5, 2.0]]).unwrap();
        let p = layer_params("l", &[w], Tensor::zeros(&[2]));
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![2.0, 1.0], vec![-1.0, 0.0]]).unwrap());
        let y = gcn_layer(&mut tape, x, &pg, &p, "l").unwrap();
        // rows: [2.5, 0.0] and relu([-1, 1]) = [0, 1]
        assert_eq!(tape.value(y).data(), &[2.5, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let g = build_part_graph(&[0, 1, 2, 3, 4]).unwrap();
        let pg = distance_partition(&g);
        let p = layer_params("l", &[Tensor::zeros(&[3, 4]), Tensor::zeros(&[3, 4])], Tensor::zeros(&[4]));
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::filled(&[10, 3], 0.7));
        let y = gcn_layer(&mut tape, x, &pg, &p, "l").unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn star_graph_oracle_by_hand() {
        let g = JointGraph::new(4, &[(0, 1), (0, 2), (0, 3)]).unwrap();
        let x = Tensor::from_rows(&[vec![1.0], vec![2.0], vec![4.0], vec![6.0]]).unwrap();
        let w1 = Tensor::from_rows(&[vec![10.0]]).unwrap();
        let w2 = Tensor::from_rows(&[vec![3.0]]).unwrap();
        let y = node_aggregation_oracle(&x, &g, &[w1, w2], Normalizer::SubsetSize).unwrap();
        // centre: self·W1 + mean(2,4,6)·W2
        assert_eq!(y.at(0, 0), 1.0 * 10.0 + 4.0 * 3.0);
        // leaf 1: self·W1 + centre·W2 (one neighbour)
        assert_eq!(y.at(1, 0), 2.0 * 10.0 + 1.0 * 3.0);
    }

    #[test]
    fn oracle_single_node() {
        let g = JointGraph::new(1, &[]).unwrap();
        let x = Tensor::from_rows(&[vec![1.5, -2.0]]).unwrap();
        let w1 = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![0.0, 1.0, -1.0]]).unwrap();
        let w2 = Tensor::filled(&[2, 3], 9.0);
        let y = node_aggregation_oracle(&x, &g, &[w1.clone(), w2], Normalizer::Symmetric).unwrap();
        assert_eq!(y, x.matmul(&w1).unwrap());
    }

    #[test]
    fn zeroed_group_is_identity() {
        let g = build_part_graph(&[5, 6, 7, 8, 9, 10, 11, 12]).unwrap();
        let pg = multiscale_partition(&g, 3).unwrap();
        let mut p = Params::new();
        let prefixes: Vec<String> = (0..3).map(|i| block_prefix("s", i)).collect();
        for pre in &prefixes {
            for k in 0..3 {
                p.insert(weight_name(pre, k), Tensor::zeros(&[4, 4]));
            }
            p.insert(bias_name(pre), Tensor::zeros(&[4]));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xin = xavier_uniform(&mut rng, &[16, 4], 1, 1);
        let mut tape = Tape::new();
        let x = tape.constant(xin.clone());
        let y = residual_group(&mut tape, x, &pg, &p, &prefixes).unwrap();
        assert_eq!(tape.value(y), &xin);

        // bias-only chain: output = input + relu(b3)
        let b3 = Tensor::vector(vec![0.5, -1.0, 2.0, 0.0]);
        p.insert(bias_name(&prefixes[0]), Tensor::vector(vec![1.0; 4]));
        p.insert(bias_name(&prefixes[2]), b3.clone());
        let mut tape = Tape::new();
        let x = tape.constant(xin.clone());
        let y = residual_group(&mut tape, x, &pg, &p, &prefixes).unwrap();
        let relu_b3 = [0.5, 0.0, 2.0, 0.0];
        for r in 0..16 {
            for c in 0..4 {
                assert_eq!(tape.value(y).at(r, c), xin.at(r, c) + relu_b3[c]);
            }
        }
    }

    #[test]
    fn encoder_shape_and_param_count() {
        let g = build_part_graph(&[0, 1, 2, 3, 4]).unwrap();
        let pg = PartitionedGraph::build(&g, Strategy::Distance).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = Params::new();
        let c = 6;
        init_stream_params(&mut rng, &mut p, "head", pg.k(), c);
        let k = pg.k();
        let expected = NUM_BLOCKS * k * c * c + NUM_BLOCKS * c + (2 * c + c) + (c * FEATURE_DIM + FEATURE_DIM);
        assert_eq!(p.count(), expected);

        let coords = xavier_uniform(&mut rng, &[7, 5, 2], 1, 1);
        let mut tape = Tape::new();
        let out = stream_encode(&mut tape, &coords, &pg, &p, "head").unwrap();
        assert_eq!(tape.value(out).shape(), &[7, FEATURE_DIM]);

        let wrong = Tensor::zeros(&[7, 4, 2]);
        let mut tape = Tape::new();
        assert!(stream_encode(&mut tape, &wrong, &pg, &p, "head").is_err());
    }
}
