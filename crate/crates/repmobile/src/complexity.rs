//! Exact parameter and multiply-accumulate accounting for any model form.
//!
//! Conventions: one MAC is one multiply plus one accumulate; conv MACs are
//! `Cout * F' * T' * (Cin/groups) * K0 * K1`; an unfolded eval-mode BN costs
//! `C * F * T`; bias adds, elementwise adds and pooling are excluded. Params
//! count weights and biases plus 2C learnable values per BN (running
//! statistics excluded).

use crate::error::Result;
use crate::model::{ConvParams, ConvUnit, ModelGraph};
use crate::tensor::kernels::conv_output_hw;
use crate::tensor::Element;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerReport {
    pub name: String,
    pub params: u64,
    pub macs: u64,
    pub output_shape: (usize, usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexityReport {
    pub total_params: u64,
    pub total_macs: u64,
    pub layers: Vec<LayerReport>,
}

impl ComplexityReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,params,macs,out_channels,out_f,out_t\n");
        for l in &self.layers {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                l.name, l.params, l.macs, l.output_shape.0, l.output_shape.1, l.output_shape.2
            ));
        }
        out.push_str(&format!("total,{},{},,,\n", self.total_params, self.total_macs));
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<28} {:>12} {:>14} {:>14}\n", "layer", "params", "MACs", "output");
        for l in &self.layers {
            out.push_str(&format!(
                "{:<28} {:>12} {:>14} {:>14}\n",
                l.name,
                l.params,
                l.macs,
                format!("{}x{}x{}", l.output_shape.0, l.output_shape.1, l.output_shape.2)
            ));
        }
        out.push_str(&format!("{:<28} {:>12} {:>14}\n", "total", self.total_params, self.total_macs));
        out
    }
}

/// Parameter count of one convolution (weights plus bias if present).
pub fn conv_params_count<T: Element>(conv: &ConvParams<T>) -> u64 {
    conv.weight.numel() as u64 + conv.bias.as_ref().map_or(0, |b| b.numel() as u64)
}

/// MAC count of one convolution over an `f x t` input map.
pub fn conv_macs<T: Element>(conv: &ConvParams<T>, f: usize, t: usize) -> Result<u64> {
    let s = conv.weight.shape();
    let (co, cig, k0, k1) = (s[0], s[1], s[2], s[3]);
    let (fo, to) = conv_output_hw(f, t, (k0, k1), conv.stride, conv.padding)?;
    Ok((co * fo * to * cig * k0 * k1) as u64)
}

fn unit_counts<T: Element>(
    unit: &ConvUnit<T>,
    f: usize,
    t: usize,
) -> Result<(u64, u64, (usize, usize, usize))> {
    let s = unit.conv.weight.shape();
    let (fo, to) = conv_output_hw(f, t, (s[2], s[3]), unit.conv.stride, unit.conv.padding)?;
    let mut params = conv_params_count(&unit.conv);
    let mut macs = conv_macs(&unit.conv, f, t)?;
    if unit.bn.is_some() {
        params += 2 * s[0] as u64; // gamma and beta
        macs += (s[0] * fo * to) as u64;
    }
    Ok((params, macs, (s[0], fo, to)))
}

/// Total learnable parameter count.
pub fn count_params<T: Element>(model: &ModelGraph<T>) -> u64 {
    let mut total = 0u64;
    model.for_each_tensor(&mut |name, tensor| {
        if ModelGraph::<T>::is_trainable(name) {
            total += tensor.numel() as u64;
        }
    });
    total
}

/// MACs for one forward pass of a `1 x 1 x F x T` input, with a per-layer
/// breakdown. Pure in the weights; only the architecture matters.
pub fn count_macs_report<T: Element>(
    model: &ModelGraph<T>,
    input_f: usize,
    input_t: usize,
) -> Result<ComplexityReport> {
    let mut layers = Vec::new();
    let (mut f, mut t) = (input_f, input_t);

    for (i, s) in model.stem.iter().enumerate() {
        let (params, macs, shape) = unit_counts(s, f, t)?;
        layers.push(LayerReport {
            name: format!("stem.{}", i),
            params,
            macs,
            output_shape: shape,
        });
        (f, t) = (shape.1, shape.2);
    }

    for (i, blk) in model.blocks.iter().enumerate() {
        let (p_e, m_e, shape_e) = unit_counts(&blk.expand, f, t)?;
        layers.push(LayerReport {
            name: format!("blocks.{}.expand", i),
            params: p_e,
            macs: m_e,
            output_shape: shape_e,
        });
        let (hf, ht) = (shape_e.1, shape_e.2);

        let mut dw_params = 0u64;
        let mut dw_macs = 0u64;
        let mut dw_shape = (blk.hidden_channels, hf, ht);
        if let Some(m) = &blk.dw_merged {
            dw_params += conv_params_count(m);
            dw_macs += conv_macs(m, hf, ht)?;
            let s = m.weight.shape();
            let (fo, to) = conv_output_hw(hf, ht, (s[2], s[3]), m.stride, m.padding)?;
            dw_shape = (blk.hidden_channels, fo, to);
        } else {
            for br in &blk.dw_branches {
                dw_params += conv_params_count(&br.conv) + 2 * blk.hidden_channels as u64;
                let s = br.conv.weight.shape();
                let (fo, to) =
                    conv_output_hw(hf, ht, (s[2], s[3]), br.conv.stride, br.conv.padding)?;
                dw_macs += conv_macs(&br.conv, hf, ht)? + (blk.hidden_channels * fo * to) as u64;
                dw_shape = (blk.hidden_channels, fo, to);
            }
        }
        layers.push(LayerReport {
            name: format!("blocks.{}.dw", i),
            params: dw_params,
            macs: dw_macs,
            output_shape: dw_shape,
        });

        let (p_p, m_p, shape_p) = unit_counts(&blk.project, dw_shape.1, dw_shape.2)?;
        layers.push(LayerReport {
            name: format!("blocks.{}.project", i),
            params: p_p,
            macs: m_p,
            output_shape: shape_p,
        });
        (f, t) = (shape_p.1, shape_p.2);
    }

    let (p_h, m_h, shape_h) = unit_counts(&model.head, f, t)?;
    layers.push(LayerReport {
        name: "head".to_string(),
        params: p_h,
        macs: m_h,
        output_shape: shape_h,
    });

    Ok(ComplexityReport {
        total_params: layers.iter().map(|l| l.params).sum(),
        total_macs: layers.iter().map(|l| l.macs).sum(),
        layers,
    })
}

/// Total MACs for one forward pass of a `1 x 1 x F x T` input.
pub fn count_macs<T: Element>(model: &ModelGraph<T>, input_f: usize, input_t: usize) -> Result<u64> {
    Ok(count_macs_report(model, input_f, input_t)?.total_macs)
}
