use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{Activation, DenseLayer, FeatureMap, LayerNorm, Normalization};
use crate::error::FmgpError;

pub const FEATURE_MAP_FORMAT: &str = "fmgp-feature-map";
pub const FEATURE_MAP_VERSION: u32 = 1;

/// Self-describing JSON form of a [`FeatureMap`].
///
/// `weight` is stored row-major with shape `[fan_in][fan_out]`; a sample
/// row `h` maps to `h·W + b`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureMapDoc {
    pub format: String,
    pub version: u32,
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub normalization: Normalization,
    pub rescale_to_unit: bool,
    pub layers: Vec<LayerDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerDoc {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_norm_gain: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_norm_offset: Option<Vec<f64>>,
}

impl From<FeatureMap> for FeatureMapDoc {
    fn from(map: FeatureMap) -> Self {
        let layer_widths = map.layer_widths();
        let layers = map
            .layers
            .iter()
            .map(|l| LayerDoc {
                fan_in: l.fan_in(),
                fan_out: l.fan_out(),
                weight: l.weight.row_iter().map(|r| r.iter().copied().collect()).collect(),
                bias: l.bias.iter().copied().collect(),
                layer_norm_gain: l.norm.as_ref().map(|n| n.gain.iter().copied().collect()),
                layer_norm_offset: l.norm.as_ref().map(|n| n.offset.iter().copied().collect()),
            })
            .collect();
        FeatureMapDoc {
            format: FEATURE_MAP_FORMAT.to_string(),
            version: FEATURE_MAP_VERSION,
            layer_widths,
            activation: map.activation,
            normalization: map.normalization,
            rescale_to_unit: map.rescale_to_unit,
            layers,
        }
    }
}

impl TryFrom<FeatureMapDoc> for FeatureMap {
    type Error = FmgpError;

    fn try_from(doc: FeatureMapDoc) -> Result<Self, Self::Error> {
        if doc.format != FEATURE_MAP_FORMAT || doc.version != FEATURE_MAP_VERSION {
            return Err(FmgpError::config(format!("unsupported feature-map document {} v{}", doc.format, doc.version)));
        }
        let mut layers = Vec::with_capacity(doc.layers.len());
        for (l, ld) in doc.layers.into_iter().enumerate() {
            if ld.weight.len() != ld.fan_in || ld.weight.iter().any(|r| r.len() != ld.fan_out) {
                return Err(FmgpError::shape(format!("layer {l}: weight array is not {}×{}", ld.fan_in, ld.fan_out)));
            }
            let flat: Vec<f64> = ld.weight.into_iter().flatten().collect();
            let norm = match (ld.layer_norm_gain, ld.layer_norm_offset) {
                (Some(g), Some(o)) => Some(LayerNorm { gain: DVector::from_vec(g), offset: DVector::from_vec(o) }),
                (None, None) => None,
                _ => {
                    return Err(FmgpError::config(format!(
                        "layer {l}: layer-norm gain and offset must appear together"
                    )))
                }
            };
            layers.push(DenseLayer {
                weight: DMatrix::from_row_slice(ld.fan_in, ld.fan_out, &flat),
                bias: DVector::from_vec(ld.bias),
                norm,
            });
        }
        let map = FeatureMap::from_layers(layers, doc.normalization, doc.rescale_to_unit)?;
        if map.layer_widths() != doc.layer_widths {
            return Err(FmgpError::shape(format!(
                "declared layer_widths {:?} disagree with layers {:?}",
                doc.layer_widths,
                map.layer_widths()
            )));
        }
        Ok(map)
    }
}

#[cfg(test)]
mod tests {
    use super::super::FeatureMapConfig;
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn json_round_trip_is_exact(seed in any::<u64>(), hidden in 1usize..6, rescale in any::<bool>()) {
            let cfg = FeatureMapConfig::new(vec![3, hidden, hidden + 1, 2]).with_rescale(rescale);
            let mut map = FeatureMap::init(&cfg, seed).unwrap();
            // include awkward values: subnormal-ish and large magnitudes
            let mut p = map.params_flat();
            p[0] = 1.0e-310;
            p[1] = -1.2345678901234567e300;
            map.set_params_flat(&p).unwrap();
            let text = serde_json::to_string(&map).unwrap();
            let back: FeatureMap = serde_json::from_str(&text).unwrap();
            prop_assert_eq!(back.params_flat(), map.params_flat());
            prop_assert_eq!(back, map);
        }
    }

    #[test]
    fn document_is_self_describing() {
        let map = FeatureMap::init(&FeatureMapConfig::new(vec![2, 3, 1]), 0).unwrap();
        let v = serde_json::to_value(&map).unwrap();
        assert_eq!(v["format"], FEATURE_MAP_FORMAT);
        assert_eq!(v["layer_widths"], serde_json::json!([2, 3, 1]));
        assert_eq!(v["normalization"], "layer_norm");
        assert_eq!(v["layers"][0]["weight"].as_array().unwrap().len(), 2);
    }

    #[test]
    fn inconsistent_document_is_rejected() {
        let map = FeatureMap::init(&FeatureMapConfig::new(vec![2, 3, 1]), 0).unwrap();
        let mut v = serde_json::to_value(&map).unwrap();
        v["layer_widths"] = serde_json::json!([2, 4, 1]);
        assert!(serde_json::from_value::<FeatureMap>(v).is_err());
    }
}
