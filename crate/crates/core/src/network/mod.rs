//! The 5-level encoder-decoder feature aggregation network: random
//! downsampling in the encoder, nearest-neighbor upsampling in the decoder,
//! and multi-scale feature fusion (MSFF) skip connections on the three
//! interior levels.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Mat, Tape, TensorId};

mod forward;

pub use forward::{
    decode, encode, forward, local_feature_encode, msff, EncoderState, ForwardOutputs, MsffTrace,
    SampleInput, SamplingPlan,
};
pub(crate) use forward::affine;

/// Encoder/decoder level count; level 0 is the full-resolution feature map.
pub const LEVELS: usize = 5;

/// Resolved network shape configuration. The channel multiplier and
/// downsample ratio are both 4 so that level i holds 4^i fewer points with
/// 4^i more channels than level 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkConfig {
    pub base_channels: usize,
    pub channel_multiplier: usize,
    pub downsample_ratio: usize,
    /// Points per sample (the receptive field).
    pub receptive_field: usize,
    /// Spectral band count d.
    pub bands: usize,
    /// Class count L.
    pub classes: usize,
    /// Neighborhood size for the local feature encoding.
    pub knn_neighbors: usize,
}

impl NetworkConfig {
    pub fn new(receptive_field: usize, bands: usize, classes: usize) -> Self {
        Self {
            base_channels: 4,
            channel_multiplier: 4,
            downsample_ratio: 4,
            receptive_field,
            bands,
            classes,
            knn_neighbors: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.base_channels >= 1, "base_channels", "must be >= 1"),
            (self.channel_multiplier >= 2, "channel_multiplier", "must be >= 2"),
            (self.downsample_ratio >= 2, "downsample_ratio", "must be >= 2"),
            (self.receptive_field >= 1, "receptive_field", "must be >= 1"),
            (self.bands >= 1, "bands", "must be >= 1"),
            (self.classes >= 2, "classes", "must be >= 2"),
            (self.knn_neighbors >= 1, "knn_neighbors", "must be >= 1"),
        ];
        for (ok, field, reason) in checks {
            if !ok {
                return Err(Error::validation(field, reason));
            }
        }
        Ok(())
    }

    /// Channel width at encoder level `level`.
    pub fn width(&self, level: usize) -> usize {
        self.base_channels * self.channel_multiplier.pow(level as u32)
    }

    /// Row count at encoder level `level` (ceiling chain from the receptive
    /// field).
    pub fn rows_at(&self, level: usize) -> usize {
        let mut rows = self.receptive_field;
        for _ in 0..level {
            rows = rows.div_ceil(self.downsample_ratio);
        }
        rows
    }

    /// Width of the local encoding input row: own spectra, relative
    /// position, neighborhood mean spectra.
    pub fn local_input_width(&self) -> usize {
         2 * self.bands + 3
    }

    /// Hidden widths of the three-layer classifier head fed by
    /// `input_width`.
    pub fn head_hidden_widths(&self, input_width: usize) -> (usize, usize) {
        (
            (input_width / 4).max(self.classes),
            (input_width / 16).max(self.classes),
        )
    }
}

/// All trainable parameters, keyed by a stable dotted name. Values are
/// reference-counted so binding them into per-sample tapes shares storage.
#[derive(Debug, Clone)]
pub struct NetworkParams {
    entries: BTreeMap<String, Arc<Mat>>,
}

/// Weight matrices (not biases or gate vectors) take weight decay. The
/// convention: the last name segment starts with `w` or ends in `_w`.
pub fn is_weight(name: &str) -> bool {
    let last = name.rsplit('.').next().unwrap_or(name);
    last.starts_with('w') || last.ends_with("_w")
}

const SAVE_MAGIC: &[u8; 4] = b"MPNP";
const SAVE_VERSION: u32 = 1;

/// Which optional modules a run trains with: the fusion skips, the
/// multi-scale supervision heads, and the long-tailed head pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModuleToggles {
    pub msff: bool,
    pub msl: bool,
    pub ltl: bool,
}

impl Default for ModuleToggles {
    fn default() -> Self {
        Self::all()
    }
}

impl ModuleToggles {
    pub fn all() -> Self {
        Self { msff: true, msl: true, ltl: true }
    }

    /// The plain encoder-decoder baseline.
    pub fn none() -> Self {
        Self { msff: false, msl: false, ltl: false }
    }
}

impl NetworkParams {
    /// Initialize with every optional module enabled.
    pub fn init(config: &NetworkConfig, seed: u64) -> Self {
        Self::init_for(config, &ModuleToggles::all(), seed)
    }

    /// Initialize the parameters the forward pass and the loss heads of the
    /// given module set use. Weights draw from the uniform Glorot range,
    /// biases start at zero, and scale gates (omega) start at one. With the
    /// long-tailed heads off, the full-resolution classifier `head5` is the
    /// single prediction head; with them on it is not registered at all.
    pub fn init_for(config: &NetworkConfig, toggles: &ModuleToggles, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries = BTreeMap::new();
        let weight = |entries: &mut BTreeMap<String, Arc<Mat>>,
                      rng: &mut ChaCha8Rng,
                      name: &str,
                      rows: usize,
                      cols: usize| {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("weight range");
            let m = Mat::from_shape_fn((rows, cols), |_| dist.sample(rng));
            entries.insert(name.to_string(), Arc::new(m));
        };
        let bias = |entries: &mut BTreeMap<String, Arc<Mat>>, name: &str, cols: usize| {
            entries.insert(name.to_string(), Arc::new(Mat::zeros((1, cols))));
        };
        let gate = |entries: &mut BTreeMap<String, Arc<Mat>>, name: &str, cols: usize| {
            entries.insert(name.to_string(), Arc::new(Mat::from_elem((1, cols), 1.0)));
        };

        let c0 = config.base_channels;
        weight(&mut entries, &mut rng, "local.w0", config.local_input_width(), c0);
        bias(&mut entries, "local.b0", c0);
        weight(&mut entries, &mut rng, "local.w1", c0, c0);
        bias(&mut entries, "local.b1", c0);

        for stage in 0..LEVELS - 1 {
            let cin = config.width(stage);
            let cout = config.width(stage + 1);
            weight(&mut entries, &mut rng, &format!("enc{stage}.w"), cin, cout);
            bias(&mut entries, &format!("enc{stage}.b"), cout);
        }

        if toggles.msff {
            for level in 1..LEVELS - 1 {
                let c = config.width(level);
                let shallow = config.width(level - 1);
                let deep = config.width(level + 1);
                let tag = format!("msff{level}");
                weight(&mut entries, &mut rng, &format!("{tag}.proj_s_w"), c, shallow);
                weight(&mut entries, &mut rng, &format!("{tag}.proj_d_w"), c, deep);
                weight(&mut entries, &mut rng, &format!("{tag}.mix_w"), shallow + c + deep, c);
                bias(&mut entries, &format!("{tag}.mix_b"), c);
            }
        }

        for scale in 1..=LEVELS {
            let level = LEVELS - scale;
            let cout = config.width(level);
            let cin = if scale == 1 {
                config.width(LEVELS - 1)
            } else {
                // Upsampled previous decoder output plus the skip feature.
                config.width(level + 1) + cout
            };
            weight(&mut entries, &mut rng, &format!("dec{scale}.w"), cin, cout);
            bias(&mut entries, &format!("dec{scale}.b"), cout);
        }

        for scale in 1..=LEVELS {
            let aux = scale < LEVELS;
            if aux && !toggles.msl {
                continue;
            }
            if !aux && toggles.ltl {
                continue;
            }
            let input = config.width(LEVELS - scale);
            let (h0, h1) = config.head_hidden_widths(input);
            let tag = format!("head{scale}");
            weight(&mut entries, &mut rng, &format!("{tag}.w0"), input, h0);
            bias(&mut entries, &format!("{tag}.b0"), h0);
            weight(&mut entries, &mut rng, &format!("{tag}.w1"), h0, h1);
            bias(&mut entries, &format!("{tag}.b1"), h1);
            weight(&mut entries, &mut rng, &format!("{tag}.w2"), h1, config.classes);
            bias(&mut entries, &format!("{tag}.b2"), config.classes);
            if aux {
                gate(&mut entries, &format!("{tag}.omega"), config.classes);
            }
        }

        if toggles.ltl {
            for tag in ["tail1", "tail2"] {
                weight(&mut entries, &mut rng, &format!("{tag}.cls_w"), c0, config.classes);
                bias(&mut entries, &format!("{tag}.cls_b"), config.classes);
                gate(&mut entries, &format!("{tag}.omega"), config.classes);
            }
        }

        Self { entries }
    }

    pub fn get(&self, name: &str) -> &Mat {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn entry_count(&self) -> usize {
        self.entries.len()
    }

    /// Total scalar parameter count.
    pub fn parameter_count(&self) -> usize {
        self.entries.values().map(|m| m.len()).sum()
    }

    /// Mutate one parameter in place. Outside forward/backward the params
    /// are the sole owner, so this does not copy.
    pub fn update(&mut self, name: &str, f: impl FnOnce(&mut Mat)) {
        let arc = self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"));
        f(Arc::make_mut(arc));
    }

    /// Bind every parameter into `tape` as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape) -> ParamBinding {
        let ids = self
            .entries
            .iter()
            .map(|(name, values)| (name.clone(), tape.leaf_shared(values.clone(), true)))
            .collect();
        ParamBinding { ids }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(SAVE_MAGIC)?;
        out.write_all(&SAVE_VERSION.to_le_bytes())?;
        out.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, values) in &self.entries {
            let bytes = name.as_bytes();
            out.write_all(&(bytes.len() as u16).to_le_bytes())?;
            out.write_all(bytes)?;
            out.write_all(&(values.nrows() as u32).to_le_bytes())?;
            out.write_all(&(values.ncols() as u32).to_le_bytes())?;
            for v in values.iter() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let display = path.display().to_string();
        let mut reader = BufReader::new(File::open(path)?);
        let bad = |reason: &str| Error::format("params", &display, reason);

        let mut magic = [0u8; 4];
        reader.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
        if &magic != SAVE_MAGIC {
            return Err(bad("wrong magic"));
        }
        let mut u32buf = [0u8; 4];
        reader.read_exact(&mut u32buf).map_err(|_| bad("truncated version"))?;
        let version = u32::from_le_bytes(u32buf);
        if version != SAVE_VERSION {
            return Err(Error::format(
                "params",
                &display,
                format!("unsupported version {version}"),
            ));
        }
        reader.read_exact(&mut u32buf).map_err(|_| bad("truncated count"))?;
        let count = u32::from_le_bytes(u32buf) as usize;

        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let mut u16buf = [0u8; 2];
            reader.read_exact(&mut u16buf).map_err(|_| bad("truncated name"))?;
            let name_len = u16::from_le_bytes(u16buf) as usize;
            let mut name_bytes = vec![0u8; name_len];
            reader.read_exact(&mut name_bytes).map_err(|_| bad("truncated name"))?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| bad("parameter name is not utf-8"))?;
            reader.read_exact(&mut u32buf).map_err(|_| bad("truncated shape"))?;
            let rows = u32::from_le_bytes(u32buf) as usize;
            reader.read_exact(&mut u32buf).map_err(|_| bad("truncated shape"))?;
            let cols = u32::from_le_bytes(u32buf) as usize;
            let mut data = vec![0u8; rows * cols * 8];
            reader.read_exact(&mut data).map_err(|_| bad("truncated values"))?;
            let values: Vec<f64> = data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(bad("non-finite parameter value"));
            }
            let m = Mat::from_shape_vec((rows, cols), values)
                .map_err(|e| Error::format("params", &display, e.to_string()))?;
            entries.insert(name, Arc::new(m));
        }
        let mut trailing = [0u8; 1];
        if reader.read(&mut trailing)? != 0 {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { entries })
    }
}

/// Tape handles for every bound parameter of one forward pass.
#[derive(Debug, Clone)]
pub struct ParamBinding {
    ids: BTreeMap<String, TensorId>,
}

impl ParamBinding {
    pub fn id(&self, name: &str) -> TensorId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name:?}"))
    }

    /// Collect accumulated gradients by parameter name. Parameters the loss
    /// never touched contribute zero matrices.
    pub fn grads(&self, tape: &Tape) -> BTreeMap<String, Mat> {
        self.ids
            .iter()
            .map(|(name, &id)| {
                let g = tape
                    .grad(id)
                    .cloned()
                    .unwrap_or_else(|| Mat::zeros(tape.value(id).dim()));
                (name.clone(), g)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests;
