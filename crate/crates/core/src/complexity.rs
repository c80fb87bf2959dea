//! Analytic parameter and FLOP accounting.
//!
//! Conv layer: `params = k (C_in/g) C_out + C_out`, `flops = params * L_out`
//! with `L_out` the post-stride output length. Fully connected layer:
//! `params = flops = N_in N_out + N_out`. BN contributes `2 C` parameters and
//! no FLOPs. One multiply-accumulate counts as one FLOP unless the
//! mul-add convention is selected.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::nn::{ConvSpec, ModelConfig};
use crate::Result;

/// Published totals for the reference network (parameters, FLOPs).
pub const REFERENCE_TOTALS: (f64, f64) = (43.08e3, 45.76e6);

/// Published (blocks, parameters, FLOPs) for the block-count sweep.
pub const REFERENCE_SWEEP: [(usize, f64, f64); 4] = [
    (1, 17.93e3, 26.88e6),
    (2, 43.08e3, 45.76e6),
    (3, 76.10e3, 70.80e6),
    (4, 126.41e3, 89.69e6),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlopConvention {
    /// One multiply-accumulate = one FLOP.
    #[default]
    Mac,
    /// Multiply and add counted separately.
    MulAdd,
}

impl FlopConvention {
    fn factor(self) -> u64 {
        match self {
            FlopConvention::Mac => 1,
            FlopConvention::MulAdd => 2,
        }
    }
}

impl std::str::FromStr for FlopConvention {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mac" => Ok(FlopConvention::Mac),
            "mul-add" => Ok(FlopConvention::MulAdd),
            other => Err(crate::Error::Config(format!("unknown FLOP convention `{other}`"))),
        }
    }
}

pub fn conv_params(spec: &ConvSpec) -> u64 {
    (spec.k * spec.in_per_group() * spec.c_out + spec.c_out) as u64
}

pub fn conv_flops(spec: &ConvSpec, l_out: usize) -> u64 {
    conv_params(spec) * l_out as u64
}

/// `(params, flops)` of a fully connected layer.
pub fn fc_cost(n_in: usize, n_out: usize) -> (u64, u64) {
    let c = (n_in * n_out + n_out) as u64;
    (c, c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub params: u64,
    pub flops: u64,
    pub output_length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCost {
    pub layers: Vec<LayerCost>,
    pub total_params: u64,
    pub total_flops: u64,
    pub convention: FlopConvention,
}

impl ModelCost {
    /// Parameters of every layer inside the residual blocks (conv + BN).
    pub fn block_params(&self) -> u64 {
        self.layers
            .iter()
            .filter(|l| l.name.starts_with("blocks."))
            .map(|l| l.params)
            .sum()
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<22} {:>10} {:>14} {:>8}", "layer", "params", "flops", "L_out");
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{:<22} {:>10} {:>14} {:>8}",
                l.name, l.params, l.flops, l.output_length
            );
        }
        let _ = writeln!(
            s,
            "{:<22} {:>10} {:>14}",
            "total", self.total_params, self.total_flops
        );
        let _ = writeln!(
            s,
            "reference (published, convention unstated): {:.2}K params, {:.2}M FLOPs; this model {:.2}K params, {:.2}M FLOPs ({:?})",
            REFERENCE_TOTALS.0 / 1e3,
            REFERENCE_TOTALS.1 / 1e6,
            self.total_params as f64 / 1e3,
            self.total_flops as f64 / 1e6,
            self.convention,
        );
        s
    }
}

pub fn analyze_model(cfg: &ModelConfig, convention: FlopConvention) -> Result<ModelCost> {
    let lens = cfg.validate()?;
    let f = convention.factor();
    let mut layers = Vec::new();
    let names: Vec<String> = std::iter::once("stem".to_string())
        .chain((0..cfg.blocks.len()).flat_map(|b| {
            [format!("blocks.{b}.conv0"), format!("blocks.{b}.conv1")]
        }))
        .collect();
    for ((name, layer), &len) in names.iter().zip(cfg.layer_configs()).zip(&lens) {
        layers.push(LayerCost {
            name: format!("{name}.conv"),
            params: conv_params(&layer.conv),
            flops: conv_flops(&layer.conv, len) * f,
            output_length: len,
        });
        layers.push(LayerCost {
            name: format!("{name}.bn"),
            params: 2 * layer.conv.c_out as u64,
            flops: 0,
            output_length: len,
        });
    }
    layers.push(LayerCost {
        name: "gap".into(),
        params: 0,
        flops: 0,
        output_length: 1,
    });
    let (p, fl) = fc_cost(cfg.head_inputs(), cfg.n_classes);
    layers.push(LayerCost {
        name: "head.fc".into(),
        params: p,
        flops: fl * f,
        output_length: 1,
    });
    let total_params = layers.iter().map(|l| l.params).sum();
    let total_flops = layers.iter().map(|l| l.flops).sum();
    Ok(ModelCost {
        layers,
        total_params,
        total_flops,
        convention,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub blocks: usize,
    pub params: u64,
    pub flops: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

/// One cost row per block count `1..=max_blocks`. `accuracy` is called with
/// each config when given (e.g. to train and score it).
pub fn sweep_blocks(
    base: &ModelConfig,
    max_blocks: usize,
    convention: FlopConvention,
    mut accuracy: Option<&mut dyn FnMut(&ModelConfig) -> Result<f64>>,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(max_blocks);
    for blocks in 1..=max_blocks {
        let cfg = base.with_block_count(blocks);
        let cost = analyze_model(&cfg, convention)?;
        let acc = match accuracy.as_mut() {
            Some(f) => Some(f(&cfg)?),
            None => None,
        };
        rows.push(SweepRow {
            blocks,
            params: cost.total_params,
            flops: cost.total_flops,
            accuracy: acc,
        });
    }
    Ok(rows)
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:>6} {:>10} {:>14} {:>9} {:>12} {:>12}",
        "blocks", "params", "flops", "accuracy", "ref_params", "ref_flops"
    );
    for r in rows {
        let reference = REFERENCE_SWEEP.iter().find(|(b, _, _)| *b == r.blocks);
        let acc = r.accuracy.map_or("-".to_string(), |a| format!("{:.4}", a));
        let (rp, rf) = reference.map_or(("-".to_string(), "-".to_string()), |(_, p, f)| {
            (format!("{:.2}K", p / 1e3), format!("{:.2}M", f / 1e6))
        });
        let _ = writeln!(
            s,
            "{:>6} {:>10} {:>14} {:>9} {:>12} {:>12}",
            r.blocks, r.params, r.flops, acc, rp, rf
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_param_examples() {
        assert_eq!(conv_params(&ConvSpec::new(8, 16, 3, 4, 1, 0)), 112);
        assert_eq!(conv_params(&ConvSpec::new(8, 16, 3, 1, 1, 0)), 400);
        assert_eq!(conv_params(&ConvSpec::new(1, 1, 1, 1, 1, 0)), 2);
    }

    #[test]
    fn conv_flop_examples() {
        assert_eq!(conv_flops(&ConvSpec::new(1, 1, 1, 1, 1, 0), 10), 20);
    }

    #[test]
    fn fc_examples() {
        assert_eq!(fc_cost(128, 5), (645, 645));
        assert_eq!(fc_cost(96256, 5), (481_285, 481_285));
        assert_eq!(fc_cost(1, 1), (2, 2));
    }

    #[test]
    fn mul_add_doubles_flops() {
        let cfg = ModelConfig::default();
        let a = analyze_model(&cfg, FlopConvention::Mac).unwrap();
        let b = analyze_model(&cfg, FlopConvention::MulAdd).unwrap();
        assert_eq!(b.total_flops, 2 * a.total_flops);
        assert_eq!(a.total_params, b.total_params);
    }

    #[test]
    fn stem_only_is_additive() {
        let cfg = ModelConfig::default().with_block_count(0);
        let cost = analyze_model(&cfg, FlopConvention::Mac).unwrap();
        let stem = &cfg.stem.conv;
        let expected = conv_params(stem) + 2 * 128 + fc_cost(128, 5).0;
        assert_eq!(cost.total_params, expected);
    }

    #[test]
    fn sweep_is_linear_in_blocks() {
        let rows = sweep_blocks(&ModelConfig::default(), 4, FlopConvention::Mac, None).unwrap();
        let deltas: Vec<u64> = rows.windows(2).map(|w| w[1].params - w[0].params).collect();
        assert!(deltas.iter().all(|&d| d == deltas[0] && d > 0));
        assert!(sweep_table(&rows).contains("17.93K"));
    }
}
