use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Forward, OctChannels, OctConvLayer, OctNorm, OctVar, SplitLayer, DEFAULT_ALPHA};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Scalar, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "desk-10")]
    Desk10,
    #[serde(rename = "resnet-34")]
    Resnet34,
}

impl Preset {
    pub fn blocks(self) -> [usize; 4] {
        match self {
            Preset::Desk10 => [1, 1, 1, 1],
            Preset::Resnet34 => [3, 4, 6, 3],
        }
    }

    pub fn widths(self) -> [usize; 4] {
        match self {
            Preset::Desk10 => [16, 32, 64, 128],
            Preset::Resnet34 => [64, 128, 256, 512],
        }
    }

    pub fn default_stem(self) -> usize {
        match self {
            Preset::Desk10 => 16,
            Preset::Resnet34 => 64,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Desk10 => "desk-10",
            Preset::Resnet34 => "resnet-34",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "desk-10" | "desk10" => Ok(Preset::Desk10),
            "resnet-34" | "resnet34" => Ok(Preset::Resnet34),
            _ => Err(Error::InvalidArgument(format!("unknown backbone preset {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub preset: Preset,
    pub alpha: f64,
    pub stem: usize,
    pub in_channels: usize,
}

impl BackboneConfig {
    pub fn new(preset: Preset, in_channels: usize) -> Self {
        BackboneConfig { preset, alpha: DEFAULT_ALPHA, stem: preset.default_stem(), in_channels }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn feature_dim(&self) -> usize {
        self.preset.widths()[3]
    }
}

/// Two 3×3 octave convolutions with a residual shortcut.
#[derive(Clone, Debug)]
pub struct Block {
    pub name: String,
    pub conv1: OctConvLayer,
    pub norm1: OctNorm,
    pub conv2: OctConvLayer,
    pub norm2: OctNorm,
    pub shortcut: Option<(OctConvLayer, OctNorm)>,
}

impl Block {
    fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: String,
        input: OctChannels,
        mid: OctChannels,
        output: OctChannels,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let conv1 = OctConvLayer::new(store, &format!("{name}.conv1"), input, mid, 3, stride, rng)?;
        let norm1 = OctNorm::new(store, &format!("{name}.bn1"), mid)?;
        let conv2 = OctConvLayer::new(store, &format!("{name}.conv2"), mid, output, 3, 1, rng)?;
        let norm2 = OctNorm::new(store, &format!("{name}.bn2"), output)?;
        let shortcut = if stride != 1 || input != output {
            let conv = OctConvLayer::new(store, &format!("{name}.down"), input, output, 1, stride, rng)?;
            Some((conv, OctNorm::new(store, &format!("{name}.down.bn"), output)?))
        } else {
            None
        };
        Ok(Block { name, conv1, norm1, conv2, norm2, shortcut })
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: OctVar) -> Result<OctVar> {
        let y = self.conv1.forward(f, x)?;
        let y = self.norm1.forward(f, y, true)?;
        let y = self.conv2.forward(f, y)?;
        let y = self.norm2.forward(f, y, false)?;
        let skip = match &self.shortcut {
            Some((conv, norm)) => {
                let s = conv.forward(f, x)?;
                norm.forward(f, s, false)?
            }
            None => x,
        };
        let high = f.graph.add(y.high, skip.high)?;
        let high = f.graph.relu(high)?;
        let low = match (y.low, skip.low) {
            (Some(a), Some(b)) => {
                let s = f.graph.add(a, b)?;
                Some(f.graph.relu(s)?)
            }
            (None, None) => None,
            _ => return Err(Error::shape("residual", format!("{}: branch layouts differ", self.name))),
        };
        Ok(OctVar { high, low })
    }
}

/// Entry split, strided stem, four residual stages and global pooling.
/// The last block merges everything into the high branch.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub name: String,
    pub split: SplitLayer,
    pub stem: OctConvLayer,
    pub stem_norm: OctNorm,
    pub blocks: Vec<Block>,
}

impl Backbone {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, config: BackboneConfig, rng: &mut R) -> Result<Self> {
        if config.in_channels == 0 || config.stem == 0 {
            return Err(Error::InvalidArgument("backbone needs input and stem channels".into()));
        }
        let alpha = config.alpha;
        let split = SplitLayer::new(store, &format!("{name}.split"), config.in_channels, config.stem, alpha, rng)?;
        let stem_out = OctChannels::split(config.stem, alpha)?;
        let stem = OctConvLayer::new(store, &format!("{name}.stem"), split.output, stem_out, 3, 2, rng)?;
        let stem_norm = OctNorm::new(store, &format!("{name}.stem.bn"), stem_out)?;

        let counts = config.preset.blocks();
        let widths = config.preset.widths();
        let mut blocks = Vec::new();
        let mut current = stem_out;
        for stage in 0..4 {
            for b in 0..counts[stage] {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                let last = stage == 3 && b + 1 == counts[stage];
                let mid = OctChannels::split(widths[stage], alpha)?;
                let output = if last { OctChannels { high: widths[stage], low: 0 } } else { mid };
                let block_name = format!("{name}.s{}.b{}", stage + 1, b + 1);
                blocks.push(Block::new(store, block_name, current, mid, output, stride, rng)?);
                current = output;
            }
        }
        Ok(Backbone { config, name: name.to_string(), split, stem, stem_norm, blocks })
    }

    /// Name prefix shared by every parameter of the final residual block.
    pub fn last_block_name(&self) -> &str {
        &self.blocks.last().expect("presets have blocks").name
    }

    /// Everything before the final block. `x` is `[N, C, H, W]`.
    pub fn forward_prefix<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<OctVar> {
        let d = f.graph.dims(x).to_vec();
        if d.len() != 4 || d[1] != self.config.in_channels {
            return Err(Error::shape(
                "backbone",
                format!("{} expects [N, {}, H, W], got {d:?}", self.name, self.config.in_channels),
            ));
        }
        let y = self.split.forward(f, x)?;
        let y = self.stem.forward(f, y)?;
        let mut y = self.stem_norm.forward(f, y, true)?;
        for block in &self.blocks[..self.blocks.len() - 1] {
            y = block.forward(f, y)?;
        }
        Ok(y)
    }

    /// Final block and global average pooling, `[N, D]`.
    pub fn forward_tail<T: Scalar>(&self, f: &mut Forward<'_, T>, x: OctVar) -> Result<Var> {
        let y = self.blocks.last().expect("presets have blocks").forward(f, x)?;
        f.graph.global_avg_pool(y.high)
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let y = self.forward_prefix(f, x)?;
        self.forward_tail(f, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn preset_names_round_trip() {
        for p in [Preset::Desk10, Preset::Resnet34] {
            assert_eq!(p.as_str().parse::<Preset>().unwrap(), p);
        }
        assert!("vgg".parse::<Preset>().is_err());
    }

    #[test]
    fn desk10_output_is_feature_vector_and_deterministic() {
        let mut store = ParamStore::<f32>::new();
        let cfg = BackboneConfig::new(Preset::Desk10, 1);
        let net = Backbone::new(&mut store, "si", cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let input = Tensor::full(&[1, 1, 128, 128], 0.25f32);
        let run = || {
            let mut g = Graph::new();
            let bound = store.bind(&mut g).unwrap();
            let x = g.input(input.clone()).unwrap();
            let mut f = Forward::new(&mut g, &store, &bound, false);
            let y = net.forward(&mut f, x).unwrap();
            g.value(y).clone()
        };
        let a = run();
        assert_eq!(a.dims(), &[1, 128]);
        assert_eq!(a, run());
        assert_eq!(net.last_block_name(), "si.s4.b1");
    }

    #[test]
    fn rejects_wrong_input_channels() {
        let mut store = ParamStore::<f32>::new();
        let net = Backbone::new(&mut store, "cdi", BackboneConfig::new(Preset::Desk10, 3), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut g = Graph::new();
        let bound = store.bind(&mut g).unwrap();
        let x = g.input(Tensor::zeros(&[1, 1, 32, 32])).unwrap();
        let mut f = Forward::new(&mut g, &store, &bound, false);
        assert!(net.forward(&mut f, x).is_err());
    }

    #[test]
    fn resnet34_layout() {
        let mut store = ParamStore::<f32>::new();
        let cfg = BackboneConfig::new(Preset::Resnet34, 3).with_alpha(0.0);
        let net = Backbone::new(&mut store, "r", cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(net.blocks.len(), 16);
        assert_eq!(net.blocks.iter().filter(|b| b.shortcut.is_some()).count(), 3);
        let convs = store.iter().filter(|(_, p)| p.name.ends_with(".hh")).count();
        assert_eq!(convs, 1 + 2 * 16 + 3);
        assert_eq!(cfg.feature_dim(), 512);
        assert_eq!(net.last_block_name(), "r.s4.b3");
    }
}
