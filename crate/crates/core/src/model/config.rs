use serde::{Deserialize, Serialize};

use crate::attention::{AttentionSiteSpec, Masking, Site, Variant};
use crate::error::{Error, Result};

/// Number of lowest layers that receive window attention in named presets.
pub const WINDOW_LAYERS: usize = 3;

/// Segment size used by `Seg` presets unless overridden.
pub const DEFAULT_SEGMENT_SIZE: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Encoder-decoder with cross-attention.
    Seq2Seq,
    /// Encoder followed by mean pooling and a class projection.
    Classifier,
    /// Causal decoder only.
    LanguageModel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub vocab_size: usize,
    pub d: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Output classes; only used by [`ModelKind::Classifier`].
    pub num_classes: usize,
    pub max_positions: usize,
    pub dropout: f64,
    pub sites: Vec<AttentionSiteSpec>,
}

impl ModelConfig {
    /// 2 layers, 4 heads, width 128, feed-forward 512; global attention
    /// everywhere until a window spec is applied.
    pub fn tiny(kind: ModelKind, vocab_size: usize, num_classes: usize) -> Self {
        let (encoder_layers, decoder_layers) = match kind {
            ModelKind::Seq2Seq => (2, 2),
            ModelKind::Classifier => (2, 0),
            ModelKind::LanguageModel => (0, 2),
        };
        Self {
            kind,
            vocab_size,
            d: 128,
            heads: 4,
            ffn_dim: 512,
            encoder_layers,
            decoder_layers,
            num_classes,
            max_positions: 256,
            dropout: 0.0,
            sites: Vec::new(),
        }
    }

    /// Number of layers that carry `site`.
    pub fn depth(&self, site: Site) -> usize {
        match (site, self.kind) {
            (Site::EncoderSelf, _) => self.encoder_layers,
            (Site::DecoderSelf, _) => self.decoder_layers,
            (Site::Cross, ModelKind::Seq2Seq) => self.decoder_layers,
            (Site::Cross, _) => 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.vocab_size < 3 {
            return bad(format!("vocabulary of {} leaves no room for data tokens", self.vocab_size));
        }
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return bad(format!("width {} is not divisible by {} heads", self.d, self.heads));
        }
        if self.ffn_dim == 0 || self.max_positions == 0 {
            return bad("ffn_dim and max_positions must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        match self.kind {
            ModelKind::Seq2Seq if self.encoder_layers == 0 || self.decoder_layers == 0 => {
                return bad("seq2seq needs encoder and decoder layers".into())
            }
            ModelKind::Classifier if self.encoder_layers == 0 || self.decoder_layers != 0 => {
                return bad("classifier uses encoder layers only".into())
            }
            ModelKind::Classifier if self.num_classes < 2 => {
                return bad("classifier needs at least two classes".into())
            }
            ModelKind::LanguageModel if self.decoder_layers == 0 || self.encoder_layers != 0 => {
                return bad("language model uses decoder layers only".into())
            }
            _ => {}
        }
        for spec in &self.sites {
            spec.validate(self.depth(spec.site))?;
        }
        for site in Site::ALL {
            for layer in 0..self.depth(site) {
                let owners = self
                    .sites
                    .iter()
                    .filter(|s| s.site == site && s.layers.contains(&layer))
                    .count();
                if owners > 1 {
                    return bad(format!("{site} layer {} has {owners} attention specs", layer + 1));
                }
            }
        }
        Ok(())
    }

    /// Variant and masking for one (site, layer); global when unspecified.
    pub fn resolve(&self, site: Site, layer: usize) -> (Variant, Masking) {
        self.sites
            .iter()
            .find(|s| s.site == site && s.layers.contains(&layer))
            .map_or((Variant::Global, Masking::Token), |s| (s.variant, s.masking))
    }

    /// Applies a named window spec such as `"Enc(AW)-Cr(AW,Seg)-Dec(MW)"`,
    /// placing window attention on the lowest [`WINDOW_LAYERS`] layers of each
    /// named site.
    pub fn with_window_spec(mut self, spec: &str, segment_size: usize) -> Result<Self> {
        let plans = parse_window_spec(spec)?;
        self.sites = plans
            .into_iter()
            .map(|plan| {
                let depth = self.depth(plan.site);
                if depth == 0 {
                    return Err(Error::Config(format!(
                        "{} attention does not exist in a {:?} model",
                        plan.site, self.kind
                    )));
                }
                Ok(AttentionSiteSpec {
                    site: plan.site,
                    variant: plan.variant,
                    masking: if plan.segmented {
                        Masking::Segment(segment_size)
                    } else {
                        Masking::Token
                    },
                    layers: (0..depth.min(WINDOW_LAYERS)).collect(),
                })
            })
            .collect::<Result<_>>()?;
        self.validate()?;
        Ok(self)
    }
}

/// One `Site(Variant[,Seg])` element of a window spec string.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowPlan {
    pub site: Site,
    pub variant: Variant,
    pub segmented: bool,
}

/// Parses `global` or `-`-joined `Enc(..)`, `Dec(..)`, `Cr(..)` elements,
/// each holding `AW` or `MW` and optionally `Seg`.
pub fn parse_window_spec(spec: &str) -> Result<Vec<WindowPlan>> {
    let spec = spec.trim();
    if spec.eq_ignore_ascii_case("global") {
        return Ok(Vec::new());
    }
    let err = |why: &str| Error::Config(format!("bad model spec {spec:?}: {why}"));
    let mut plans: Vec<WindowPlan> = Vec::new();
    for part in spec.split('-') {
        let part = part.trim();
        let open = part.find('(').ok_or_else(|| err("expected Site(Variant)"))?;
        let inner = part[open + 1..]
            .strip_suffix(')')
            .ok_or_else(|| err("missing closing parenthesis"))?;
        let site = match part[..open].trim() {
            "Enc" => Site::EncoderSelf,
            "Dec" => Site::DecoderSelf,
            "Cr" => Site::Cross,
            other => return Err(err(&format!("unknown site {other:?} (Enc, Dec or Cr)"))),
        };
        let mut fields = inner.split(',').map(str::trim);
        let variant = match fields.next() {
            Some("AW") => Variant::AdditiveWindow,
            Some("MW") => Variant::MultiplicativeWindow,
            Some(other) => return Err(err(&format!("unknown variant {other:?} (AW or MW)"))),
            None => return Err(err("missing variant")),
        };
        let segmented = match fields.next() {
            None => false,
            Some("Seg") => true,
            Some(other) => return Err(err(&format!("unknown option {other:?}"))),
        };
        if fields.next().is_some() {
            return Err(err("too many options"));
        }
        if site == Site::DecoderSelf && segmented {
            return Err(err("decoder self-attention cannot use segment masking"));
        }
        if plans.iter().any(|p| p.site == site) {
            return Err(err(&format!("{site} given twice")));
        }
        plans.push(WindowPlan {
            site,
            variant,
            segmented,
        });
    }
    Ok(plans)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_named_presets() {
        assert!(parse_window_spec("global").unwrap().is_empty());
        let plans = parse_window_spec("Enc(AW)-Cr(AW,Seg)-Dec(MW)").unwrap();
        assert_eq!(
            plans,
            vec![
                WindowPlan {
                    site: Site::EncoderSelf,
                    variant: Variant::AdditiveWindow,
                    segmented: false
                },
                WindowPlan {
                    site: Site::Cross,
                    variant: Variant::AdditiveWindow,
                    segmented: true
                },
                WindowPlan {
                    site: Site::DecoderSelf,
                    variant: Variant::MultiplicativeWindow,
                    segmented: false
                },
            ]
        );
        assert_eq!(parse_window_spec("Cr(AW, Seg)").unwrap()[0].segmented, true);
    }

    #[test]
    fn rejects_malformed_specs() {
        for bad in ["", "Enc", "Enc(XW)", "Foo(AW)", "Dec(MW,Seg)", "Enc(AW)-Enc(MW)", "Cr(AW,Seg,x)", "Enc(AW"] {
            assert!(parse_window_spec(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn window_layers_are_capped_by_depth() {
        let cfg = ModelConfig::tiny(ModelKind::Seq2Seq, 12, 2)
            .with_window_spec("Enc(AW)-Cr(AW,Seg)-Dec(MW)", 5)
            .unwrap();
        assert_eq!(cfg.sites.len(), 3);
        assert!(cfg.sites.iter().all(|s| s.layers == [0, 1].into()));
        assert_eq!(cfg.resolve(Site::Cross, 1), (Variant::AdditiveWindow, Masking::Segment(5)));

        let mut deep = ModelConfig::tiny(ModelKind::Seq2Seq, 12, 2);
        deep.encoder_layers = 6;
        deep.decoder_layers = 6;
        let deep = deep.with_window_spec("Enc(AW)", 5).unwrap();
        assert_eq!(deep.sites[0].layers, [0, 1, 2].into());
        assert_eq!(deep.resolve(Site::EncoderSelf, 3), (Variant::Global, Masking::Token));
    }

    #[test]
    fn site_must_exist_in_model_kind() {
        let lm = ModelConfig::tiny(ModelKind::LanguageModel, 30, 2);
        assert!(lm.clone().with_window_spec("Dec(MW)", 5).is_ok());
        assert!(lm.clone().with_window_spec("Enc(AW)", 5).is_err());
        assert!(lm.with_window_spec("Cr(AW)", 5).is_err());
    }
}
