//! Forward graph construction: local feature encoding, the downsampling
//! encoder, MSFF skip fusion, and the upsampling decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::pointcloud::MultispectralPointCloud;
use crate::tensor::{Mat, Tape, TensorId};

use super::{NetworkConfig, ParamBinding, LEVELS};

/// One receptive field's worth of raw inputs.
#[derive(Debug, Clone)]
pub struct SampleInput {
    pub positions: Vec<[f64; 3]>,
    /// n x d reflectance rows.
    pub spectra: Mat,
    /// Per-point labels, UNLABELED included; consumed by the losses.
    pub labels: Vec<i32>,
}

impl SampleInput {
    pub fn from_cloud(cloud: &MultispectralPointCloud, indices: &[usize]) -> Self {
        let positions = indices
            .iter()
            .map(|&i| {
                let p = cloud.position(i);
                [p[0] as f64, p[1] as f64, p[2] as f64]
            })
            .collect();
        let spectra = Mat::from_shape_fn((indices.len(), cloud.bands()), |(j, b)| {
            cloud.spectra_row(indices[j])[b] as f64
        });
        let labels = indices.iter().map(|&i| cloud.label(i)).collect();
        Self {
            positions,
            spectra,
            labels,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// The encoder's random keep-indices, one sorted list per downsampling
/// stage. Generated from a seed in training; handcrafted in tests that pin
/// the sampling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplingPlan {
    /// `kept[s]` indexes rows of level s, strictly increasing, length
    /// ceil(n_s / ratio).
    pub kept: Vec<Vec<usize>>,
}

impl SamplingPlan {
    pub fn generate(config: &NetworkConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut n = config.receptive_field;
        let mut kept = Vec::with_capacity(LEVELS - 1);
        for _ in 0..LEVELS - 1 {
            let next = n.div_ceil(config.downsample_ratio);
            let mut indices: Vec<usize> = rand::seq::index::sample(&mut rng, n, next).into_vec();
            indices.sort_unstable();
            kept.push(indices);
            n = next;
        }
        Self { kept }
    }
}

/// Per-level tensors and index maps recorded by [`encode`].
#[derive(Debug, Clone)]
pub struct EncoderState {
    /// Level features E0..E4.
    pub features: Vec<TensorId>,
    /// Point positions per level.
    pub positions: Vec<Vec<[f64; 3]>>,
    /// `kept[s]`: rows of level s that became level s+1.
    pub kept: Vec<Vec<usize>>,
    /// `parents[s]`: for each level-s row, the level-(s+1) row of its
    /// nearest kept point (kept rows map to themselves).
    pub parents: Vec<Vec<usize>>,
    /// Per level: row -> original sample row, composed through the keeps.
    pub orig_rows: Vec<Vec<usize>>,
}

impl EncoderState {
    /// Original sample row per feature row of decoder output F^scale
    /// (scale 1 = coarsest, scale 5 = full resolution).
    pub fn rows_for_scale(&self, scale: usize) -> &[usize] {
        &self.orig_rows[LEVELS - scale]
    }
}

/// Intermediate tensors of one MSFF instance, exposed for inspection.
#[derive(Debug, Clone)]
pub struct MsffTrace {
    pub level: usize,
    pub f_s_prime: TensorId,
    pub f_d_prime: TensorId,
    pub e_s: TensorId,
    pub e_d: TensorId,
    pub f_tilde_s: TensorId,
    pub f_tilde_d: TensorId,
    pub f_o: TensorId,
}

/// Decoder outputs F^1..F^5 (coarse to fine) plus everything the losses
/// need to line features up with labels.
#[derive(Debug, Clone)]
pub struct ForwardOutputs {
    pub decoder: Vec<TensorId>,
    pub state: EncoderState,
    pub msff: Vec<MsffTrace>,
}

pub(crate) fn affine(
    tape: &mut Tape,
    binding: &ParamBinding,
    x: TensorId,
    w: &str,
    b: &str,
) -> TensorId {
    let h = tape.matmul(x, binding.id(w));
    tape.add_broadcast(h, binding.id(b))
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Indices of the k nearest points to point `i` within the sample, self
/// included, ties by index.
fn sample_knn(positions: &[[f64; 3]], i: usize, k: usize) -> Vec<usize> {
    let mut dists: Vec<(f64, usize)> = positions
        .iter()
        .enumerate()
        .map(|(j, &p)| (dist2(positions[i], p), j))
        .collect();
    let k = k.min(dists.len());
    let cmp = |a: &(f64, usize), b: &(f64, usize)| {
        a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1))
    };
    if k < dists.len() {
        dists.select_nth_unstable_by(k - 1, cmp);
        dists.truncate(k);
    }
    dists.sort_unstable_by(cmp);
    dists.into_iter().map(|(_, j)| j).collect()
}

/// Aggregate spatial and spectral context per point, then a shared
/// two-layer MLP: rows are [own spectra | position - neighborhood mean |
/// neighborhood mean spectra]. Only relative coordinates enter, so the
/// encoding is translation invariant.
pub fn local_feature_encode(
    tape: &mut Tape,
    binding: &ParamBinding,
    config: &NetworkConfig,
    input: &SampleInput,
) -> TensorId {
    let n = input.len();
    assert_eq!(
        n, config.receptive_field,
        "sample size does not match the receptive field"
    );
    let d = config.bands;
    assert_eq!(input.spectra.dim(), (n, d), "spectra shape");

    let mut rows = Mat::zeros((n, config.local_input_width()));
    for i in 0..n {
        let neighbors = sample_knn(&input.positions, i, config.knn_neighbors);
        let m = neighbors.len() as f64;
        let mut mean_pos = [0.0f64; 3];
        let mut mean_spec = vec![0.0f64; d];
        for &j in &neighbors {
            for a in 0..3 {
                mean_pos[a] += input.positions[j][a];
            }
            for b in 0..d {
                mean_spec[b] += input.spectra[(j, b)];
            }
        }
        for a in 0..3 {
            mean_pos[a] /= m;
        }
        for b in 0..d {
            mean_spec[b] /= m;
        }
        for b in 0..d {
            rows[(i, b)] = input.spectra[(i, b)];
        }
        for a in 0..3 {
            rows[(i, d + a)] = input.positions[i][a] - mean_pos[a];
        }
        for b in 0..d {
            rows[(i, d + 3 + b)] = mean_spec[b];
        }
    }

    let x = tape.constant(rows);
    let h = affine(tape, binding, x, "local.w0", "local.b0");
    let h = tape.relu(h);
    let h = affine(tape, binding, h, "local.w1", "local.b1");
    tape.relu(h)
}

/// Four stages of shared MLP (c -> 4c) followed by keeping the plan's
/// random quarter of the rows. Records kept indices, per-level positions,
/// nearest-kept parent maps, and the original-row bookkeeping.
pub fn encode(
    tape: &mut Tape,
    binding: &ParamBinding,
    config: &NetworkConfig,
    f0: TensorId,
    positions: &[[f64; 3]],
    plan: &SamplingPlan,
) -> EncoderState {
    assert_eq!(plan.kept.len(), LEVELS - 1, "plan stage count");
    let mut features = vec![f0];
    let mut level_positions = vec![positions.to_vec()];
    let mut orig_rows = vec![(0..positions.len()).collect::<Vec<_>>()];
    let mut parents = Vec::with_capacity(LEVELS - 1);

    for stage in 0..LEVELS - 1 {
        let kept = &plan.kept[stage];
        let fine = &level_positions[stage];
        let expect = fine.len().div_ceil(config.downsample_ratio);
        assert_eq!(kept.len(), expect, "stage {stage} keep count");

        let tag = format!("enc{stage}");
        let expanded = affine(tape, binding, features[stage], &format!("{tag}.w"), &format!("{tag}.b"));
        let expanded = tape.relu(expanded);
        let next = tape.gather_rows(expanded, kept);
        features.push(next);

        let coarse: Vec<[f64; 3]> = kept.iter().map(|&i| fine[i]).collect();
        parents.push(nearest_parent(fine, &coarse, kept));
        orig_rows.push(kept.iter().map(|&i| orig_rows[stage][i]).collect());
        level_positions.push(coarse);
    }

    EncoderState {
        features,
        positions: level_positions,
        kept: plan.kept.clone(),
        parents,
        orig_rows,
    }
}

/// Nearest kept point per fine row, ties to the lower coarse row; kept rows
/// map to their own slot.
fn nearest_parent(fine: &[[f64; 3]], coarse: &[[f64; 3]], kept: &[usize]) -> Vec<usize> {
    let mut parent = vec![usize::MAX; fine.len()];
    for (slot, &row) in kept.iter().enumerate() {
        parent[row] = slot;
    }
    for (j, &p) in fine.iter().enumerate() {
        if parent[j] != usize::MAX {
            continue;
        }
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (m, &c) in coarse.iter().enumerate() {
            let d = dist2(p, c);
            if d < best_d {
                best_d = d;
                best = m;
            }
        }
        parent[j] = best;
    }
    parent
}

/// One MSFF skip at encoder `level`: align the shallower and deeper
/// neighbors to this level's row count, gate them by pooled fusion weights,
/// and mix the concatenation back to the level's width.
pub fn msff(
    tape: &mut Tape,
    binding: &ParamBinding,
    level: usize,
    state: &EncoderState,
) -> MsffTrace {
    assert!(
        (1..LEVELS - 1).contains(&level),
        "MSFF needs both a shallower and a deeper level"
    );
    let f_s = state.features[level - 1];
    let f_l = state.features[level];
    let f_d = state.features[level + 1];
    let tag = format!("msff{level}");

    let f_s_prime = tape.gather_rows(f_s, &state.kept[level - 1]);
    let f_d_prime = tape.nearest_upsample(f_d, &state.parents[level]);

    let g_s = tape.global_avg_pool(f_s_prime);
    let g_l = tape.global_avg_pool(f_l);
    let g_d = tape.global_avg_pool(f_d_prime);

    let l_to_s = tape.matmul(g_l, binding.id(&format!("{tag}.proj_s_w")));
    let sum_s = tape.add(g_s, l_to_s);
    let e_s = tape.sigmoid(sum_s);
    let f_tilde_s = tape.mul_broadcast(f_s_prime, e_s);

    let l_to_d = tape.matmul(g_l, binding.id(&format!("{tag}.proj_d_w")));
    let prod_d = tape.mul_broadcast(g_d, l_to_d);
    let e_d = tape.sigmoid(prod_d);
    let f_tilde_d = tape.mul_broadcast(f_d_prime, e_d);

    let cat = tape.concat_cols(&[f_tilde_s, f_l, f_tilde_d]);
    let mixed = affine(tape, binding, cat, &format!("{tag}.mix_w"), &format!("{tag}.mix_b"));
    let f_o = tape.relu(mixed);

    MsffTrace {
        level,
        f_s_prime,
        f_d_prime,
        e_s,
        e_d,
        f_tilde_s,
        f_tilde_d,
        f_o,
    }
}

/// Decoder: coarse-to-fine, upsampling the previous output and fusing the
/// skip (MSFF on interior levels when enabled, plain features otherwise).
/// Returns F^1..F^5 and the MSFF traces.
pub fn decode(
    tape: &mut Tape,
    binding: &ParamBinding,
    state: &EncoderState,
    use_msff: bool,
) -> (Vec<TensorId>, Vec<MsffTrace>) {
    let mut outputs = Vec::with_capacity(LEVELS);
    let mut traces = Vec::new();

    let bottom = state.features[LEVELS - 1];
    let d1 = affine(tape, binding, bottom, "dec1.w", "dec1.b");
    outputs.push(tape.relu(d1));

    for scale in 2..=LEVELS {
        let level = LEVELS - scale;
        let up = tape.nearest_upsample(outputs[scale - 2], &state.parents[level]);
        let skip = if level >= 1 && use_msff {
            let trace = msff(tape, binding, level, state);
            let f_o = trace.f_o;
            traces.push(trace);
            f_o
        } else {
            state.features[level]
        };
        let cat = tape.concat_cols(&[up, skip]);
        let tag = format!("dec{scale}");
        let mixed = affine(tape, binding, cat, &format!("{tag}.w"), &format!("{tag}.b"));
        outputs.push(tape.relu(mixed));
    }
    (outputs, traces)
}

/// Full forward pass for one sample.
pub fn forward(
    tape: &mut Tape,
    binding: &ParamBinding,
    config: &NetworkConfig,
    input: &SampleInput,
    plan: &SamplingPlan,
    use_msff: bool,
) -> ForwardOutputs {
    let f0 = local_feature_encode(tape, binding, config, input);
    let state = encode(tape, binding, config, f0, &input.positions, plan);
    let (decoder, msff) = decode(tape, binding, &state, use_msff);
    ForwardOutputs {
        decoder,
        state,
        msff,
    }
}
