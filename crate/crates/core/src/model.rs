//! Small-scale DDAMFN: MobileFaceNet-style backbone, dual-direction
//! attention with several heads, global depthwise convolution and three
//! task heads (valence/arousal, expression, action units).

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{
    Buffer, Checkpoint, CheckpointEntry, Conv2d, ConvBnAct, DepthwiseBlock, EntryKind, GdConv, Linear, Mode, Module,
    Param, ParamKind,
};
use crate::tensor::{Conv2dOpts, Tape, Tensor, Var};

pub const N_VA: usize = 2;
pub const N_EXPR: usize = 8;
pub const N_AU: usize = 12;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub stem_channels: usize,
    /// Output channels of each depthwise-separable block (each halves the
    /// spatial extent).
    pub block_channels: Vec<usize>,
    pub attention_heads: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 112,
            in_channels: 3,
            stem_channels: 16,
            block_channels: vec![32, 64],
            attention_heads: 2,
        }
    }
}

impl ModelConfig {
    /// 32×32 configuration used by the synthetic experiments.
    pub fn small() -> Self {
        ModelConfig {
            image_size: 32,
            ..Self::default()
        }
    }

    /// 8×8 input with channels [4, 8], for end-to-end gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            image_size: 8,
            in_channels: 3,
            stem_channels: 4,
            block_channels: vec![8],
            attention_heads: 2,
        }
    }

    /// Spatial extent of the backbone feature map.
    pub fn feature_size(&self) -> usize {
        let halve = |s: usize| (s + 2 - 3) / 2 + 1;
        (0..=self.block_channels.len()).fold(self.image_size, |s, _| halve(s))
    }

    pub fn feature_channels(&self) -> usize {
        *self.block_channels.last().unwrap_or(&self.stem_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 2 || self.in_channels == 0 || self.stem_channels == 0 {
            return Err(Error::Config(format!("invalid model config {self:?}")));
        }
        if self.attention_heads == 0 || self.block_channels.contains(&0) {
            return Err(Error::Config(
                "attention_heads and block channels must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Backbone,
    Dda,
    Gdconv,
    Heads,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::Backbone,
        ParamGroup::Dda,
        ParamGroup::Gdconv,
        ParamGroup::Heads,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::Dda => "dda",
            ParamGroup::Gdconv => "gdconv",
            ParamGroup::Heads => "heads",
        }
    }

    /// Group of a fully qualified parameter or buffer name.
    pub fn of(name: &str) -> Option<ParamGroup> {
        let prefix = name.split('.').next()?;
        ParamGroup::ALL.into_iter().find(|g| g.as_str() == prefix)
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Va,
    Expr,
    Au,
}

impl Task {
    pub fn head_prefix(self) -> &'static str {
        match self {
            Task::Va => "heads.va.",
            Task::Expr => "heads.expr.",
            Task::Au => "heads.au.",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "va" => Ok(Task::Va),
            "expr" => Ok(Task::Expr),
            "au" => Ok(Task::Au),
            other => Err(Error::Config(format!(
                "unknown task {other:?} (expected va, expr or au)"
            ))),
        }
    }
}

/// One attention head: a 1-D convolution along height over the
/// width-pooled features and one along width over the height-pooled ones.
#[derive(Clone, Debug)]
pub struct DdaHead {
    pub col_conv: Conv2d,
    pub col_bias: Param,
    pub row_conv: Conv2d,
    pub row_bias: Param,
}

impl DdaHead {
    fn new(name: &str, channels: usize) -> Self {
        let col = Conv2d::new(
            &format!("{name}.col"),
            channels,
            channels,
            [3, 1],
            Conv2dOpts {
                stride: [1, 1],
                padding: [1, 0],
            },
        );
        let row = Conv2d::new(
            &format!("{name}.row"),
            channels,
            channels,
            [1, 3],
            Conv2dOpts {
                stride: [1, 1],
                padding: [0, 1],
            },
        );
        DdaHead {
            col_conv: col,
            col_bias: Param::new(format!("{name}.col.bias"), &[channels, 1, 1], ParamKind::Bias),
            row_conv: row,
            row_bias: Param::new(format!("{name}.row.bias"), &[channels, 1, 1], ParamKind::Bias),
        }
    }

    /// Attention map in (0, 1), shaped like `x`.
    fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let pooled_w = tape.mean(x, &[3], true)?;
        let col = self.col_conv.forward(tape, pooled_w)?;
        let cb = self.col_bias.bind(tape);
        let col = tape.add(col, cb)?;

        let pooled_h = tape.mean(x, &[2], true)?;
        let row = self.row_conv.forward(tape, pooled_h)?;
        let rb = self.row_bias.bind(tape);
        let row = tape.add(row, rb)?;

        let logits = tape.add(col, row)?;
        tape.sigmoid(logits)
    }
}

impl Module for DdaHead {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.col_conv.visit_params(f);
        f(&self.col_bias);
        self.row_conv.visit_params(f);
        f(&self.row_bias);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.col_conv.visit_params_mut(f);
        f(&mut self.col_bias);
        self.row_conv.visit_params_mut(f);
        f(&mut self.row_bias);
    }
}

#[derive(Clone, Debug)]
pub struct DdaModule {
    pub heads: Vec<DdaHead>,
}

impl DdaModule {
    pub fn new(name: &str, channels: usize, n_heads: usize) -> Self {
        DdaModule {
            heads: (0..n_heads)
                .map(|i| DdaHead::new(&format!("{name}.head{i}"), channels))
                .collect(),
        }
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    /// Returns the attended features and every head's map. The maps are
    /// combined by elementwise maximum before gating the features.
    pub fn forward(&self, tape: &mut Tape, features: Var) -> Result<(Var, Vec<Var>)> {
        if tape.shape(features).len() != 4 {
            return Err(Error::shape(format!(
                "attention expects [B, C, h, w], got {:?}",
                tape.shape(features)
            )));
        }
        let maps = self
            .heads
            .iter()
            .map(|h| h.forward(tape, features))
            .collect::<Result<Vec<_>>>()?;
        let mut combined = *maps.first().ok_or_else(|| Error::Config("no attention heads".into()))?;
        for &m in &maps[1..] {
            combined = tape.maximum(combined, m)?;
        }
        let attended = tape.mul(features, combined)?;
        Ok((attended, maps))
    }
}

impl Module for DdaModule {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.heads.iter().for_each(|h| h.visit_params(f));
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.heads.iter_mut().for_each(|h| h.visit_params_mut(f));
    }
}

/// Model outputs as nodes on the tape that produced them.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// `[B, 2]`, tanh-bounded.
    pub va: Var,
    pub expr_logits: Var,
    pub au_logits: Var,
    pub attention_maps: Vec<Var>,
    /// Shared `[B, C]` feature vector after GDConv.
    pub features: Var,
}

/// Detached per-frame predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionBatch {
    pub va: Tensor,
    pub expr_logits: Tensor,
    pub au_logits: Tensor,
    pub attention_maps: Vec<Tensor>,
}

impl ModelOutput {
    pub fn detach(&self, tape: &Tape) -> PredictionBatch {
        PredictionBatch {
            va: tape.value(self.va).clone(),
            expr_logits: tape.value(self.expr_logits).clone(),
            au_logits: tape.value(self.au_logits).clone(),
            attention_maps: self.attention_maps.iter().map(|&m| tape.value(m).clone()).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DdamfnModel {
    pub config: ModelConfig,
    pub stem: ConvBnAct,
    pub blocks: Vec<DepthwiseBlock>,
    pub dda: DdaModule,
    pub gdconv: GdConv,
    pub head_va: Linear,
    pub head_expr: Linear,
    pub head_au: Linear,
    mode: Mode,
}

impl DdamfnModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let stem_conv = Conv2d::new(
            "backbone.stem.conv",
            config.in_channels,
            config.stem_channels,
            [3, 3],
            Conv2dOpts::new(2, 1),
        );
        let stem = ConvBnAct::new("backbone.stem", stem_conv, config.stem_channels);
        let mut c_in = config.stem_channels;
        let blocks = config
            .block_channels
            .iter()
            .enumerate()
            .map(|(i, &c_out)| {
                let b = DepthwiseBlock::new(&format!("backbone.block{i}"), c_in, c_out);
                c_in = c_out;
                b
            })
            .collect();
        let c = config.feature_channels();
        let s = config.feature_size();
        let mut model = DdamfnModel {
            stem,
            blocks,
            dda: DdaModule::new("dda", c, config.attention_heads),
            gdconv: GdConv::new("gdconv", c, s, s),
            head_va: Linear::new("heads.va", c, N_VA),
            head_expr: Linear::new("heads.expr", c, N_EXPR),
            head_au: Linear::new("heads.au", c, N_AU),
            config,
            mode: Mode::Train,
        };
        model.init_params(seed);
        Ok(model)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn heads(&self) -> [&Linear; 3] {
        [&self.head_va, &self.head_expr, &self.head_au]
    }

    /// Re-initializes only the three task heads.
    pub fn reset_heads(&mut self, seed: u64) {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        for h in [&mut self.head_va, &mut self.head_expr, &mut self.head_au] {
            h.visit_params_mut(&mut |p| p.init(&mut rng));
        }
    }

    pub fn forward(&mut self, tape: &mut Tape, images: Var) -> Result<ModelOutput> {
        let s = tape.shape(images);
        let size = self.config.image_size;
        if s.len() != 4 || s[1] != self.config.in_channels || s[2] != size || s[3] != size {
            return Err(Error::shape(format!(
                "expected images [B, {}, {size}, {size}], got {s:?}",
                self.config.in_channels
            )));
        }
        let batch = s[0];
        let mut x = self.stem.forward(tape, images)?;
        for b in &mut self.blocks {
            x = b.forward(tape, x)?;
        }
        let (attended, maps) = self.dda.forward(tape, x)?;
        let g = self.gdconv.forward(tape, attended)?;
        let features = tape.reshape(g, &[batch, self.config.feature_channels()])?;

        let va_raw = self.head_va.forward(tape, features)?;
        let va = tape.tanh(va_raw)?;
        let expr_logits = self.head_expr.forward(tape, features)?;
        let au_logits = self.head_au.forward(tape, features)?;
        Ok(ModelOutput {
            va,
            expr_logits,
            au_logits,
            attention_maps: maps,
            features,
        })
    }

    /// Forward pass on a fresh tape, returning detached predictions.
    pub fn predict(&mut self, images: &Tensor) -> Result<PredictionBatch> {
        let mut tape = Tape::new();
        let x = tape.constant(images);
        let out = self.forward(&mut tape, x)?;
        Ok(out.detach(&tape))
    }

    /// Parameter names per group; every parameter appears in exactly one.
    pub fn param_groups(&self) -> Vec<(ParamGroup, Vec<String>)> {
        let mut groups: Vec<(ParamGroup, Vec<String>)> = ParamGroup::ALL.iter().map(|&g| (g, Vec::new())).collect();
        self.visit_params(&mut |p| {
            let g = ParamGroup::of(&p.name).expect("parameter names carry a group prefix");
            groups.iter_mut().find(|(k, _)| *k == g).unwrap().1.push(p.name.clone());
        });
        groups
    }

    pub fn set_group_frozen(&mut self, group: ParamGroup, frozen: bool) {
        self.visit_params_mut(&mut |p| {
            if ParamGroup::of(&p.name) == Some(group) {
                p.frozen = frozen;
            }
        });
    }

    /// Little-endian serialization of the named parameters in `groups`,
    /// in visiting order.
    pub fn serialize_groups(&self, groups: &[ParamGroup]) -> Vec<u8> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| {
            if ParamGroup::of(&p.name).is_some_and(|g| groups.contains(&g)) {
                out.extend_from_slice(p.name.as_bytes());
                for v in p.value.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        });
        out
    }

    /// SHA-256 (hex) of [`serialize_groups`](Self::serialize_groups).
    pub fn groups_digest(&self, groups: &[ParamGroup]) -> String {
        Sha256::digest(self.serialize_groups(groups))
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut entries = Vec::new();
        let tag = |name: &str| ParamGroup::of(name).map(|g| g.to_string()).unwrap_or_default();
        self.visit_params(&mut |p| {
            entries.push(CheckpointEntry {
                name: p.name.clone(),
                tag: tag(&p.name),
                kind: EntryKind::Param,
                tensor: Tensor::from_vec(p.value.shape(), p.value.data().to_vec()).unwrap(),
            })
        });
        self.visit_buffers(&mut |b| {
            entries.push(CheckpointEntry {
                name: b.name.clone(),
                tag: tag(&b.name),
                kind: EntryKind::Buffer,
                tensor: b.value.clone(),
            })
        });
        Checkpoint {
            meta: serde_json::to_string(&self.config).expect("config serializes"),
            entries,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: ModelConfig =
            serde_json::from_str(&ck.meta).map_err(|e| Error::Data(format!("checkpoint config: {e}")))?;
        let mut model = DdamfnModel::new(config, 0)?;
        model.load_checkpoint(ck)?;
        Ok(model)
    }

    /// Copies every parameter and buffer from `ck`; names and shapes must match.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        let mut err = None;
        let mut load = |name: &str, target: &mut Tensor| {
            match ck.get(name) {
                Some(e) if e.tensor.shape() == target.shape() => {
                    target.data_mut().copy_from_slice(e.tensor.data());
                }
                Some(e) => {
                    err.get_or_insert(Error::Data(format!(
                        "{name}: checkpoint shape {:?} vs model {:?}",
                        e.tensor.shape(),
                        target.shape()
                    )));
                }
                None => {
                    err.get_or_insert(Error::Data(format!("{name} missing from checkpoint")));
                }
            };
        };
        self.visit_params_mut(&mut |p: &mut Param| load(&p.name, &mut p.value));
        self.visit_buffers_mut(&mut |b: &mut Buffer| load(&b.name, &mut b.value));
        err.map_or(Ok(()), Err)
    }
}

impl Module for DdamfnModel {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.stem.visit_params(f);
        self.blocks.iter().for_each(|b| b.visit_params(f));
        self.dda.visit_params(f);
        self.gdconv.visit_params(f);
        self.head_va.visit_params(f);
        self.head_expr.visit_params(f);
        self.head_au.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.stem.visit_params_mut(f);
        self.blocks.iter_mut().for_each(|b| b.visit_params_mut(f));
        self.dda.visit_params_mut(f);
        self.gdconv.visit_params_mut(f);
        self.head_va.visit_params_mut(f);
        self.head_expr.visit_params_mut(f);
        self.head_au.visit_params_mut(f);
    }
    fn visit_buffers(&self, f: &mut dyn FnMut(&Buffer)) {
        self.stem.visit_buffers(f);
        self.blocks.iter().for_each(|b| b.visit_buffers(f));
    }
    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&mut Buffer)) {
        self.stem.visit_buffers_mut(f);
        self.blocks.iter_mut().for_each(|b| b.visit_buffers_mut(f));
    }
    fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
        self.stem.set_mode(mode);
        self.blocks.iter_mut().for_each(|b| b.set_mode(mode));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_images(b: usize, size: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..b * 3 * size * size).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::from_vec(&[b, 3, size, size], data).unwrap()
    }

    #[test]
    fn feature_geometry() {
        assert_eq!(ModelConfig::default().feature_size(), 14);
        assert_eq!(ModelConfig::small().feature_size(), 4);
        assert_eq!(ModelConfig::tiny().feature_size(), 2);
        assert_eq!(ModelConfig::default().feature_channels(), 64);
    }

    #[test]
    fn output_shapes() {
        let mut m = DdamfnModel::new(ModelConfig::small(), 1).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(&random_images(4, 32, 0));
        let out = m.forward(&mut tape, x).unwrap();
        assert_eq!(tape.shape(out.va), &[4, 2]);
        assert_eq!(tape.shape(out.expr_logits), &[4, 8]);
        assert_eq!(tape.shape(out.au_logits), &[4, 12]);
        assert_eq!(out.attention_maps.len(), 2);
        for &m in &out.attention_maps {
            assert_eq!(tape.shape(m), &[4, 64, 4, 4]);
        }
    }

    #[test]
    fn rejects_wrong_input() {
        let mut m = DdamfnModel::new(ModelConfig::small(), 1).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(&random_images(2, 16, 0));
        assert!(matches!(m.forward(&mut tape, x), Err(Error::Shape(_))));
        let x = tape.constant(&Tensor::zeros(&[2, 1, 32, 32]));
        assert!(matches!(m.forward(&mut tape, x), Err(Error::Shape(_))));
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let mut m = DdamfnModel::new(ModelConfig::small(), 5).unwrap();
        m.set_mode(Mode::Eval);
        let x = random_images(3, 32, 2);
        assert_eq!(m.predict(&x).unwrap(), m.predict(&x).unwrap());
    }

    #[test]
    fn zero_attention_weights_give_half_maps() {
        let mut dda = DdaModule::new("dda", 3, 2);
        let x = Tensor::from_vec(&[2, 3, 4, 5], (0..120).map(|i| i as f64 * 0.1 - 4.0).collect()).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(&x);
        let (att, maps) = dda.forward(&mut tape, xv).unwrap();
        for &m in &maps {
            assert!(tape.data(m).iter().all(|&v| v == 0.5));
        }
        for (a, x) in tape.data(att).iter().zip(x.data()) {
            assert_eq!(*a, 0.5 * x);
        }

        dda.heads.truncate(1);
        dda.heads[0].col_bias.value.data_mut().fill(50.0);
        dda.heads[0].row_bias.value.data_mut().fill(50.0);
        let mut tape = Tape::new();
        let xv = tape.constant(&x);
        let (att, _) = dda.forward(&mut tape, xv).unwrap();
        for (a, x) in tape.data(att).iter().zip(x.data()) {
            assert!((a - x).abs() <= 1e-9);
        }
    }

    #[test]
    fn param_groups_partition() {
        let m = DdamfnModel::new(ModelConfig::small(), 0).unwrap();
        let groups = m.param_groups();
        let all = m.param_names();
        let mut union: Vec<String> = groups.iter().flat_map(|(_, n)| n.clone()).collect();
        assert_eq!(union.len(), all.len());
        union.sort();
        let mut sorted = all.clone();
        sorted.sort();
        assert_eq!(union, sorted);
        let heads = &groups.iter().find(|(g, _)| *g == ParamGroup::Heads).unwrap().1;
        assert_eq!(heads.len(), 6);
        assert_eq!(heads.iter().filter(|n| n.ends_with(".weight")).count(), 3);
        assert_eq!(heads.iter().filter(|n| n.ends_with(".bias")).count(), 3);
        let backbone = &groups.iter().find(|(g, _)| *g == ParamGroup::Backbone).unwrap().1;
        assert!(backbone.iter().all(|n| !heads.contains(n)));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = DdamfnModel::new(ModelConfig::small(), 9).unwrap();
        // populate running stats
        m.predict(&random_images(4, 32, 1)).unwrap();
        let ck = m.to_checkpoint();
        let bytes = ck.to_bytes();
        let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
        let mut m2 = DdamfnModel::from_checkpoint(&back).unwrap();
        assert_eq!(m2.to_checkpoint().to_bytes(), bytes);
        assert!(back.entries.iter().any(|e| e.tag == "heads"));
        m.set_mode(Mode::Eval);
        m2.set_mode(Mode::Eval);
        let x = random_images(2, 32, 3);
        assert_eq!(m.predict(&x).unwrap(), m2.predict(&x).unwrap());
    }

    #[test]
    fn task_parsing() {
        assert_eq!("au".parse::<Task>().unwrap(), Task::Au);
        assert!(matches!("x".parse::<Task>(), Err(Error::Config(_))));
    }
}
