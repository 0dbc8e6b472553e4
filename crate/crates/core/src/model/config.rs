use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::blocks::{declare_pos, EmbedDims, Init, NormPlacement, ParamSpec, Registry, SsmDims, TransformerDims};
use crate::pointops::OrderStrategy;
use crate::{Error, Result};

/// How the Transformer stack's contribution joins the token stream.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Add to the tokens; width stays `C`.
    #[default]
    Residual,
    /// Concatenate with the tokens; width becomes `2C`.
    Concat,
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "residual" => Ok(FusionMode::Residual),
            "concat" => Ok(FusionMode::Concat),
            _ => Err(Error::config(format!("unknown fusion mode {s:?}"))),
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::Residual => "residual",
            FusionMode::Concat => "concat",
        })
    }
}

/// Architecture hyperparameters. Every field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Points per input cloud when generating data.
    pub points_per_cloud: usize,
    pub n_patches: usize,
    pub patch_size: usize,
    /// Token width `C`.
    pub width: usize,
    pub transformer_layers: usize,
    pub heads: usize,
    pub bissm_layers: usize,
    pub fusion: FusionMode,
    pub ffn_ratio: usize,
    pub norm_placement: NormPlacement,
    pub d_state: usize,
    /// `d_inner = expand · width` inside each bi-SSM block.
    pub expand: usize,
    pub d_conv: usize,
    /// Rank of the step-size projection; 0 picks `ceil(width / 16)`.
    pub dt_rank: usize,
    pub embed_point_hidden: usize,
    pub embed_point_out: usize,
    pub embed_token_hidden: usize,
    pub pos_hidden: usize,
    pub head_hidden: usize,
    pub dropout: f64,
    pub num_classes: usize,
    pub order: OrderStrategy,
    pub mask_ratio: f64,
    pub decoder_layers: usize,
    /// Init scale of residual-branch output projections and the head output.
    pub out_init_gain: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            points_per_cloud: 1024,
            n_patches: 64,
            patch_size: 32,
            width: 384,
            transformer_layers: 1,
            heads: 8,
            bissm_layers: 12,
            fusion: FusionMode::Residual,
            ffn_ratio: 4,
            norm_placement: NormPlacement::Pre,
            d_state: 16,
            expand: 2,
            d_conv: 4,
            dt_rank: 0,
            embed_point_hidden: 128,
            embed_point_out: 256,
            embed_token_hidden: 512,
            pos_hidden: 128,
            head_hidden: 256,
            dropout: 0.5,
            num_classes: 15,
            order: OrderStrategy::Lexicographic,
            mask_ratio: 0.6,
            decoder_layers: 4,
            out_init_gain: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_patches", self.n_patches),
            ("patch_size", self.patch_size),
            ("width", self.width),
            ("heads", self.heads),
            ("ffn_ratio", self.ffn_ratio),
            ("d_state", self.d_state),
            ("expand", self.expand),
            ("d_conv", self.d_conv),
            ("embed_point_hidden", self.embed_point_hidden),
            ("embed_point_out", self.embed_point_out),
            ("embed_token_hidden", self.embed_token_hidden),
            ("pos_hidden", self.pos_hidden),
            ("head_hidden", self.head_hidden),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.points_per_cloud < self.n_patches.max(self.patch_size) {
            return Err(Error::config(format!(
                "points_per_cloud {} is smaller than n_patches or patch_size",
                self.points_per_cloud
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.out_init_gain >= 0.0 && self.out_init_gain.is_finite()) {
            return Err(Error::config("out_init_gain must be a finite non-negative number"));
        }
        Ok(())
    }

    /// Width after fusion, seen by the bi-SSM stack and the head.
    pub fn downstream_width(&self) -> usize {
        match (self.transformer_layers, self.fusion) {
            (0, _) | (_, FusionMode::Residual) => self.width,
            (_, FusionMode::Concat) => 2 * self.width,
        }
    }

    fn gain_milli(&self) -> u32 {
        (self.out_init_gain * 1000.0).round() as u32
    }

    pub fn embed_dims(&self) -> EmbedDims {
        EmbedDims {
            point_hidden: self.embed_point_hidden,
            point_out: self.embed_point_out,
            token_hidden: self.embed_token_hidden,
            width: self.width,
        }
    }

    pub fn transformer_dims(&self) -> TransformerDims {
        TransformerDims {
            width: self.width,
            heads: self.heads,
            ffn_hidden: self.ffn_ratio * self.width,
            norm: self.norm_placement,
            out_gain_milli: self.gain_milli(),
        }
    }

    pub fn ssm_dims(&self) -> SsmDims {
        let w = self.downstream_width();
        SsmDims {
            width: w,
            d_inner: self.expand * w,
            d_state: self.d_state,
            d_conv: self.d_conv,
            dt_rank: if self.dt_rank == 0 {
                w.div_ceil(16)
            } else {
                self.dt_rank
            },
            out_gain_milli: self.gain_milli(),
        }
    }

    fn declare_encoder(&self, reg: &mut Registry) {
        self.embed_dims().declare(reg, "encoder.embed");
        declare_pos(reg, "encoder.pos", self.pos_hidden, self.width);
        let td = self.transformer_dims();
        for i in 0..self.transformer_layers {
            td.declare(reg, &format!("encoder.transformer.{i}"));
        }
        let sd = self.ssm_dims();
        for j in 0..self.bissm_layers {
            sd.declare(reg, &format!("encoder.bissm.{j}"));
        }
        reg.norm("encoder.norm", sd.width);
    }

    /// Encoder parameters, shared by classification and pretraining.
    pub fn encoder_specs(&self) -> Vec<ParamSpec> {
        let mut reg = Registry::new();
        self.declare_encoder(&mut reg);
        reg.into_specs()
    }

    /// Encoder plus classification head.
    pub fn classifier_specs(&self) -> Vec<ParamSpec> {
        let mut reg = Registry::new();
        self.declare_encoder(&mut reg);
        let w = self.downstream_width();
        reg.linear("head.fc1", 2 * w, self.head_hidden, true, 1.0);
        reg.linear("head.fc2", self.head_hidden, self.num_classes, true, self.out_init_gain);
        reg.into_specs()
    }

    /// Encoder plus masked-patch reconstruction decoder.
    pub fn pretrain_specs(&self) -> Vec<ParamSpec> {
        let mut reg = Registry::new();
        self.declare_encoder(&mut reg);
        let sd = self.ssm_dims();
        let w = sd.width;
        reg.add("decoder.mask_token".into(), &[1, w], Init::Uniform(0.02), false);
        declare_pos(&mut reg, "decoder.pos", self.pos_hidden, w);
        for j in 0..self.decoder_layers {
            sd.declare(&mut reg, &format!("decoder.bissm.{j}"));
        }
        reg.norm("decoder.norm", w);
        reg.linear("decoder.predict", w, 3 * self.patch_size, true, 1.0);
        reg.into_specs()
    }
}

/// Module grouping of a parameter name: `encoder.<part>` or the top level.
pub fn module_of(name: &str) -> &str {
    let mut dots = name.match_indices('.').map(|(i, _)| i);
    let first = dots.next().unwrap_or(name.len());
    if name.starts_with("encoder.") || name.starts_with("decoder.") {
        &name[..dots.next().unwrap_or(name.len())]
    } else {
        &name[..first]
    }
}

/// Scalar parameter count of the classifier.
pub fn param_count(cfg: &ModelConfig) -> usize {
    cfg.classifier_specs().iter().map(ParamSpec::numel).sum()
}

/// Parameter counts grouped by [`module_of`], in declaration order.
pub fn param_breakdown(specs: &[ParamSpec]) -> Vec<(String, usize)> {
    let mut order: Vec<String> = Vec::new();
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for s in specs {
        let m = module_of(&s.name).to_string();
        if !counts.contains_key(&m) {
            order.push(m.clone());
        }
        *counts.entry(m).or_default() += s.numel();
    }
    order.into_iter().map(|m| (m.clone(), counts[&m])).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_count_is_locked() {
        let n = param_count(&ModelConfig::default());
        assert_eq!(n, DEFAULT_PARAM_COUNT);
        assert!((n as f64 - 15.1e6).abs() <= 0.25 * 15.1e6);
    }

    const DEFAULT_PARAM_COUNT: usize = 14_911_503;

    #[test]
    fn fusion_widths() {
        let mut cfg = ModelConfig::default();
        assert_eq!(cfg.downstream_width(), 384);
        cfg.fusion = FusionMode::Concat;
        assert_eq!(cfg.downstream_width(), 768);
        cfg.transformer_layers = 0;
        assert_eq!(cfg.downstream_width(), 384);
    }

    #[test]
    fn concat_is_larger_and_depth_is_linear() {
        let base = ModelConfig::default();
        let concat = ModelConfig {
            fusion: FusionMode::Concat,
            ..base.clone()
        };
        assert!(param_count(&concat) > param_count(&base));

        let share = |cfg: &ModelConfig| -> usize {
            param_breakdown(&cfg.classifier_specs())
                .iter()
                .filter(|(m, _)| m.starts_with("encoder.bissm"))
                .map(|(_, n)| n)
                .sum()
        };
        let deep = ModelConfig {
            bissm_layers: 24,
            ..base.clone()
        };
        assert_eq!(share(&deep), 2 * share(&base));
    }

    #[test]
    fn breakdown_sums_to_total() {
        let cfg = ModelConfig::default();
        let parts = param_breakdown(&cfg.classifier_specs());
        assert_eq!(parts.iter().map(|p| p.1).sum::<usize>(), param_count(&cfg));
        assert_eq!(parts[0].0, "encoder.embed");
        assert_eq!(parts.last().unwrap().0, "head");
    }

    #[test]
    fn validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            heads: 5,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!("sum".parse::<FusionMode>().is_err());
        let json = serde_json::to_string(&ModelConfig::default()).unwrap();
        let back: ModelConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, ModelConfig::default());
        assert!(serde_json::from_str::<ModelConfig>(r#"{"widht": 3}"#).is_err());
    }

    #[test]
    fn encoder_names_are_shared() {
        let cfg = ModelConfig::default();
        let enc: Vec<String> = cfg.encoder_specs().into_iter().map(|s| s.name).collect();
        let cls: Vec<String> = cfg.classifier_specs().into_iter().map(|s| s.name).collect();
        let pre: Vec<String> = cfg.pretrain_specs().into_iter().map(|s| s.name).collect();
        assert_eq!(&cls[..enc.len()], &enc[..]);
        assert_eq!(&pre[..enc.len()], &enc[..]);
    }
}
