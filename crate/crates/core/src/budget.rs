//! Parameter-memory (bits) and prediction-cost (ops) accounting for both
//! model families, plus solvers that size an architecture to hit a bit or
//! op budget.
//!
//! Conventions, applied symmetrically so numbers are comparable across
//! families: one op per multiply-accumulate, one op per bias add, one fused
//! op per normalized activation; activations, pooling, the final softmax,
//! and the argmax over classes cost nothing, and neither does table
//! addressing. Batch normalization stores four values per unit at 16 bits
//! each (64 bits per unit); biases are 32-bit.

use serde::{Deserialize, Serialize};

use crate::dnn::{output_shape, ActKind, LayerSpec, TensorShape};
use crate::error::{Error, Result};
use crate::model::BncModel;
use crate::quant::{BnQuantConfig, DnnQuantConfig};

/// Bits per parameter without quantization.
pub const FLOAT_BITS: u64 = 32;
/// Bits per batch-normalization unit (four 16-bit values).
pub const BATCHNORM_UNIT_BITS: u64 = 64;
/// Bits per bias entry.
pub const BIAS_BITS: u64 = 32;

/// Bits per table parameter: quantized width when set, else float.
pub fn bnc_bits_per_param(cfg: Option<BnQuantConfig>) -> u64 {
    cfg.map_or(FLOAT_BITS, |c| u64::from(c.total_bits()))
}

/// Total parameter memory of a classifier in bits.
pub fn bnc_bits(model: &BncModel, cfg: Option<BnQuantConfig>) -> u64 {
    model.param_count() as u64 * bnc_bits_per_param(cfg)
}

/// Accumulate operations per prediction: `(D + 1) * C` log-probability adds
/// (one table read per feature per class, plus the prior). Identical for
/// parentless and tree-augmented structures — only the addressing differs.
pub fn bnc_ops(model: &BncModel) -> u64 {
    (model.num_features() as u64 + 1) * model.num_classes() as u64
}

/// Bits per network weight: quantized width when set, else float.
pub fn dnn_bits_per_weight(quant: Option<DnnQuantConfig>) -> u64 {
    quant.map_or(FLOAT_BITS, |q| u64::from(q.b))
}

/// One line of a cost breakdown.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetComponent {
    pub label: String,
    pub bits: u64,
    pub ops: u64,
}

/// Memory and prediction cost of one model, with per-component detail.
/// The totals always equal the breakdown sums.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub bits: u64,
    pub ops: u64,
    pub breakdown: Vec<BudgetComponent>,
}

impl BudgetReport {
    fn from_components(breakdown: Vec<BudgetComponent>) -> Self {
        BudgetReport {
            bits: breakdown.iter().map(|c| c.bits).sum(),
            ops: breakdown.iter().map(|c| c.ops).sum(),
            breakdown,
        }
    }

    /// Costs of a table-based classifier: every table contributes its entry
    /// count at the per-parameter width, and `C` accumulate ops.
    pub fn for_bnc(model: &BncModel, cfg: Option<BnQuantConfig>) -> Self {
        let bpp = bnc_bits_per_param(cfg);
        let c_n = model.num_classes() as u64;
        let mut breakdown = vec![BudgetComponent {
            label: "class-prior".to_string(),
            bits: model.class_prior.len() as u64 * bpp,
            ops: c_n,
        }];
        for (i, cpt) in model.cpts.iter().enumerate() {
            breakdown.push(BudgetComponent {
                label: format!("feature-{i}"),
                bits: cpt.len() as u64 * bpp,
                ops: c_n,
            });
        }
        BudgetReport::from_components(breakdown)
    }

    /// Costs of a layered network on the given input shape.
    pub fn for_dnn(
        input_shape: TensorShape,
        layers: &[LayerSpec],
        quant: Option<DnnQuantConfig>,
    ) -> Result<Self> {
        let bpw = dnn_bits_per_weight(quant);
        let mut shape = input_shape;
        let mut breakdown = Vec::with_capacity(layers.len());
        for (i, spec) in layers.iter().enumerate() {
            let out = output_shape(spec, shape)?;
            let (kind, bits, ops) = match *spec {
                LayerSpec::Fc { units, has_bias } => {
                    let fan_in = shape.element_count() as u64;
                    let macs = fan_in * units as u64;
                    let bias = if has_bias { units as u64 } else { 0 };
                    ("fc", bpw * macs + BIAS_BITS * bias, macs + bias)
                }
                LayerSpec::Conv { channels, kernel, has_bias } => {
                    let (in_c, h, w) = match shape {
                        TensorShape::Image { channels, height, width } => {
                            (channels as u64, height as u64, width as u64)
                        }
                        TensorShape::Flat { .. } => unreachable!("output_shape rejects this"),
                    };
                    let weights = channels as u64 * in_c * (kernel * kernel) as u64;
                    let macs = weights * h * w;
                    let bias_params = if has_bias { channels as u64 } else { 0 };
                    let bias_ops = bias_params * h * w;
                    ("conv", bpw * weights + BIAS_BITS * bias_params, macs + bias_ops)
                }
                LayerSpec::Batchnorm => (
                    "batchnorm",
                    BATCHNORM_UNIT_BITS * shape.unit_count() as u64,
                    shape.element_count() as u64,
                ),
                LayerSpec::Maxpool => ("maxpool", 0, 0),
                LayerSpec::Activation { .. } => ("activation", 0, 0),
                LayerSpec::Softmax => ("softmax", 0, 0),
            };
            breakdown.push(BudgetComponent { label: format!("layer-{i}-{kind}"), bits, ops });
            shape = out;
        }
        Ok(BudgetReport::from_components(breakdown))
    }
}

/// Total weight memory of a network in bits.
pub fn dnn_bits(
    input_shape: TensorShape,
    layers: &[LayerSpec],
    quant: Option<DnnQuantConfig>,
) -> Result<u64> {
    Ok(BudgetReport::for_dnn(input_shape, layers, quant)?.bits)
}

/// Operations per single prediction of a network.
pub fn dnn_ops(input_shape: TensorShape, layers: &[LayerSpec]) -> Result<u64> {
    Ok(BudgetReport::for_dnn(input_shape, layers, None)?.ops)
}

/// Equal-width fully connected architecture with `num_weight_layers` weight
/// matrices: `num_weight_layers - 1` hidden blocks of `hidden` units
/// (bias-free, optionally normalized, then activated) and a biased output
/// layer feeding a softmax.
pub fn fc_architecture(
    hidden: usize,
    num_weight_layers: usize,
    batchnorm: bool,
    act: ActKind,
    num_classes: usize,
) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    for _ in 1..num_weight_layers {
        layers.push(LayerSpec::Fc { units: hidden, has_bias: false });
        if batchnorm {
            layers.push(LayerSpec::Batchnorm);
        }
        layers.push(LayerSpec::Activation { act });
    }
    layers.push(LayerSpec::Fc { units: num_classes, has_bias: true });
    layers.push(LayerSpec::Softmax);
    layers
}

/// Convolutional architecture: per entry in `channels` one 3x3 same-padded
/// conv block (bias-free, optionally normalized, activated, then 2x2
/// max-pooled), flattened into a biased output layer and softmax.
pub fn cnn_architecture(
    channels: &[usize],
    batchnorm: bool,
    act: ActKind,
    num_classes: usize,
) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    for &ch in channels {
        layers.push(LayerSpec::Conv { channels: ch, kernel: 3, has_bias: false });
        if batchnorm {
            layers.push(LayerSpec::Batchnorm);
        }
        layers.push(LayerSpec::Activation { act });
        layers.push(LayerSpec::Maxpool);
    }
    layers.push(LayerSpec::Fc { units: num_classes, has_bias: true });
    layers.push(LayerSpec::Softmax);
    layers
}

/// Solves `a t^2 + b t + c = target` for the positive root, assuming
/// `target >= c` and `b > 0`.
fn solve_cost_polynomial(a: f64, b: f64, c: f64, target: f64) -> f64 {
    if a == 0.0 {
        (target - c) / b
    } else {
        (-b + (b * b + 4.0 * a * (target - c)).sqrt()) / (2.0 * a)
    }
}

/// Width of the equal-size hidden layers that brings the bit cost of an
/// `num_weight_layers`-deep fully connected net closest to `target_bits`
/// (real-valued solve, rounded to the nearest positive integer). The bit
/// cost is quadratic in the width for three or more weight layers and
/// linear for two.
pub fn size_fc_for_bit_budget(
    target_bits: u64,
    num_weight_layers: usize,
    quant: Option<DnnQuantConfig>,
    batchnorm: bool,
    input_features: usize,
    num_classes: usize,
) -> Result<usize> {
    if num_weight_layers < 2 {
        return Err(Error::config("need at least two weight layers to size a hidden width"));
    }
    let b_w = dnn_bits_per_weight(quant) as f64;
    let bn = if batchnorm { 1.0 } else { 0.0 };
    let l = num_weight_layers as f64;
    let a = b_w * (l - 2.0);
    let b = b_w * (input_features + num_classes) as f64
        + bn * BATCHNORM_UNIT_BITS as f64 * (l - 1.0);
    let c = (BIAS_BITS * num_classes as u64) as f64;
    if (target_bits as f64) < c {
        return Err(Error::config(format!(
            "bit budget {target_bits} cannot cover the {c}-bit output layer"
        )));
    }
    let t = solve_cost_polynomial(a, b, c, target_bits as f64);
    Ok((t.round() as usize).max(1))
}

/// Which cost a budget constrains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BudgetTarget {
    Bits(u64),
    Ops(u64),
}

/// Channel counts for a one- or two-conv-block network (second block fixed
/// at twice the first's channels) that bring its cost closest to the target.
/// The real-valued solution is rounded separately per layer, each clamped to
/// at least one channel.
pub fn size_cnn_for_budget(
    target: BudgetTarget,
    conv_layers: usize,
    quant: Option<DnnQuantConfig>,
    batchnorm: bool,
    input: TensorShape,
    num_classes: usize,
) -> Result<Vec<usize>> {
    let (in_c, h, w) = match input {
        TensorShape::Image { channels, height, width } => {
            (channels as f64, height as f64, width as f64)
        }
        TensorShape::Flat { .. } => {
            return Err(Error::config("convolutional sizing needs an image input shape"))
        }
    };
    let (h1, w1) = ((h / 2.0).floor(), (w / 2.0).floor());
    let (h2, w2) = ((h1 / 2.0).floor(), (w1 / 2.0).floor());
    let pooled_ok = match conv_layers {
        1 => h1 >= 1.0 && w1 >= 1.0,
        2 => h2 >= 1.0 && w2 >= 1.0,
        _ => return Err(Error::config("sizing supports one or two conv blocks")),
    };
    if !pooled_ok {
        return Err(Error::config("input too small: pooling leaves no spatial extent"));
    }
    let b_w = dnn_bits_per_weight(quant) as f64;
    let bn = if batchnorm { 1.0 } else { 0.0 };
    let c_n = num_classes as f64;

    // Cost polynomial a t^2 + b t + c in the first block's channel count t,
    // with the second block (if any) tied to 2t.
    let (a, b, c, goal) = match (target, conv_layers) {
        (BudgetTarget::Bits(t), 1) => (
            0.0,
            b_w * (9.0 * in_c + h1 * w1 * c_n) + bn * BATCHNORM_UNIT_BITS as f64,
            BIAS_BITS as f64 * c_n,
            t as f64,
        ),
        (BudgetTarget::Bits(t), 2) => (
            18.0 * b_w,
            b_w * (9.0 * in_c + 2.0 * h2 * w2 * c_n) + bn * 3.0 * BATCHNORM_UNIT_BITS as f64,
            BIAS_BITS as f64 * c_n,
            t as f64,
        ),
        (BudgetTarget::Ops(t), 1) => {
            (0.0, 9.0 * in_c * h * w + bn * h * w + h1 * w1 * c_n, c_n, t as f64)
        }
        (BudgetTarget::Ops(t), 2) => (
            18.0 * h1 * w1,
            9.0 * in_c * h * w + bn * (h * w + 2.0 * h1 * w1) + 2.0 * h2 * w2 * c_n,
            c_n,
            t as f64,
        ),
        _ => unreachable!("conv_layers validated above"),
    };
    if goal < c {
        return Err(Error::config(format!(
            "budget {goal} cannot cover the fixed output-layer cost {c}"
        )));
    }
    let t = solve_cost_polynomial(a, b, c, goal);
    let mut channels = vec![(t.round() as usize).max(1)];
    if conv_layers == 2 {
        channels.push(((2.0 * t).round() as usize).max(1));
    }
    Ok(channels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TanStructure;
    use proptest::prelude::*;

    fn nb_model(cards: &[usize], c: usize) -> BncModel {
        BncModel::uniform(cards, c, TanStructure::naive_bayes(cards.len())).unwrap()
    }

    #[test]
    fn table_bits_hand_examples() {
        let model = nb_model(&[2, 4], 3);
        assert_eq!(model.param_count(), 21);
        let cfg = BnQuantConfig::new(1, 3).unwrap(); // 4 bits total
        assert_eq!(bnc_bits(&model, Some(cfg)), 84);
        assert_eq!(bnc_bits(&model, None), 672);
    }

    #[test]
    fn zero_parameters_cost_zero_bits() {
        assert_eq!(0 * bnc_bits_per_param(None), 0);
        assert_eq!(0 * bnc_bits_per_param(Some(BnQuantConfig::new(2, 6).unwrap())), 0);
    }

    #[test]
    fn table_bits_scale_linearly_with_parameter_width() {
        let model = nb_model(&[3, 2, 5], 4);
        let p = model.param_count() as u64;
        for (bi, bf) in [(1, 0), (1, 3), (2, 6), (4, 4), (8, 24)] {
            let cfg = BnQuantConfig::new(bi, bf).unwrap();
            assert_eq!(bnc_bits(&model, Some(cfg)), p * u64::from(cfg.total_bits()));
        }
    }

    #[test]
    fn accumulate_ops_hand_examples() {
        let model = nb_model(&vec![2; 16], 26);
        assert_eq!(bnc_ops(&model), 442);
        let empty = nb_model(&[], 7);
        assert_eq!(bnc_ops(&empty), 7);
    }

    #[test]
    fn accumulate_ops_ignore_parent_structure() {
        let cards = [2usize, 3, 4];
        let nb = nb_model(&cards, 5);
        let tan = BncModel::uniform(
            &cards,
            5,
            TanStructure { ordering: vec![0, 1, 2], parents: vec![None, Some(0), Some(1)] },
        )
        .unwrap();
        assert_eq!(bnc_ops(&nb), bnc_ops(&tan));
        assert!(bnc_bits(&tan, None) > bnc_bits(&nb, None));
    }

    #[test]
    fn network_bits_hand_examples() {
        let input = TensorShape::Flat { features: 16 };
        let hidden = fc_architecture(10, 2, false, ActKind::Relu, 26);
        let b2 = Some(DnnQuantConfig::new(2).unwrap());
        assert_eq!(dnn_bits(input, &hidden, b2).unwrap(), 1672);

        let with_bn = fc_architecture(10, 2, true, ActKind::Relu, 26);
        assert_eq!(dnn_bits(input, &with_bn, b2).unwrap(), 2312);

        let direct = fc_architecture(0, 1, false, ActKind::Relu, 26);
        assert_eq!(dnn_bits(input, &direct, None).unwrap(), 14144);
    }

    #[test]
    fn network_ops_hand_examples() {
        let direct = vec![LayerSpec::Fc { units: 26, has_bias: true }];
        assert_eq!(dnn_ops(TensorShape::Flat { features: 16 }, &direct).unwrap(), 442);

        let conv = vec![LayerSpec::Conv { channels: 4, kernel: 3, has_bias: false }];
        let image = TensorShape::Image { channels: 1, height: 8, width: 8 };
        assert_eq!(dnn_ops(image, &conv).unwrap(), 2304);

        assert_eq!(dnn_ops(TensorShape::Flat { features: 9 }, &[]).unwrap(), 0);
    }

    #[test]
    fn network_ops_do_not_depend_on_weight_width() {
        let image = TensorShape::Image { channels: 1, height: 8, width: 8 };
        let arch = cnn_architecture(&[3, 6], true, ActKind::Sign, 5);
        let float = BudgetReport::for_dnn(image, &arch, None).unwrap();
        let binary =
            BudgetReport::for_dnn(image, &arch, Some(DnnQuantConfig::new(1).unwrap())).unwrap();
        assert_eq!(float.ops, binary.ops);
        assert!(binary.bits < float.bits);
    }

    #[test]
    fn report_totals_equal_breakdown_sums() {
        let tan = BncModel::uniform(
            &[2, 3, 4],
            5,
            TanStructure { ordering: vec![0, 1, 2], parents: vec![None, Some(0), Some(1)] },
        )
        .unwrap();
        let reports = [
            BudgetReport::for_bnc(&tan, Some(BnQuantConfig::new(2, 4).unwrap())),
            BudgetReport::for_dnn(
                TensorShape::Image { channels: 1, height: 8, width: 8 },
                &cnn_architecture(&[4, 8], true, ActKind::Sign, 10),
                Some(DnnQuantConfig::new(1).unwrap()),
            )
            .unwrap(),
            BudgetReport::for_dnn(
                TensorShape::Flat { features: 16 },
                &fc_architecture(32, 3, true, ActKind::Relu, 26),
                None,
            )
            .unwrap(),
        ];
        for r in reports {
            assert_eq!(r.bits, r.breakdown.iter().map(|c| c.bits).sum::<u64>());
            assert_eq!(r.ops, r.breakdown.iter().map(|c| c.ops).sum::<u64>());
            assert!(!r.breakdown.is_empty());
        }
    }

    #[test]
    fn fc_sizing_hand_example() {
        let quant = Some(DnnQuantConfig::new(1).unwrap());
        let h = size_fc_for_bit_budget(8000, 2, quant, false, 16, 26).unwrap();
        assert_eq!(h, 171);
    }

    #[test]
    fn fc_sizing_rejects_budget_below_the_output_layer() {
        let err = size_fc_for_bit_budget(831, 2, None, false, 16, 26).unwrap_err();
        assert!(err.to_string().contains("832"));
    }

    #[test]
    fn fc_sizing_lands_within_one_unit_of_the_target() {
        for (l, b, bn, d, c, target) in [
            (2usize, 1u32, false, 16usize, 26usize, 8000u64),
            (2, 8, true, 64, 10, 100_000),
            (3, 2, false, 16, 26, 50_000),
            (4, 32, true, 256, 10, 2_000_000),
        ] {
            let quant = Some(DnnQuantConfig::new(b).unwrap());
            let h = size_fc_for_bit_budget(target, l, quant, bn, d, c).unwrap();
            let input = TensorShape::Flat { features: d };
            let measure = |units: usize| {
                dnn_bits(input, &fc_architecture(units, l, bn, ActKind::Relu, c), quant).unwrap()
            };
            let got = measure(h);
            let quantum = measure(h + 1) - got;
            let gap = got.abs_diff(target);
            assert!(gap <= quantum, "L={l} B={b}: |{got} - {target}| > {quantum}");
        }
    }

    #[test]
    fn cnn_ops_sizing_meets_a_table_multiple_target() {
        // 16x16 single-channel input, 10 classes; target is 64x the table
        // classifier's op count at D=256.
        let model = nb_model(&vec![2; 256], 10);
        let target = 64 * bnc_ops(&model);
        let input = TensorShape::Image { channels: 1, height: 16, width: 16 };
        for conv_layers in [1usize, 2] {
            let ch = size_cnn_for_budget(
                BudgetTarget::Ops(target),
                conv_layers,
                None,
                false,
                input,
                10,
            )
            .unwrap();
            assert_eq!(ch.len(), conv_layers);
            let measure = |ch: &[usize]| {
                dnn_ops(input, &cnn_architecture(ch, false, ActKind::Sign, 10)).unwrap()
            };
            let got = measure(&ch);
            let bumped: Vec<usize> =
                ch.iter().enumerate().map(|(i, &c)| c + i + 1).collect();
            let quantum = measure(&bumped) - got;
            let gap = got.abs_diff(target);
            assert!(
                gap <= quantum,
                "{conv_layers} blocks: |{got} - {target}| > {quantum} (channels {ch:?})"
            );
        }
    }

    #[test]
    fn cnn_sizing_floors_at_one_channel() {
        let input = TensorShape::Image { channels: 1, height: 8, width: 8 };
        let ch = size_cnn_for_budget(BudgetTarget::Ops(11), 1, None, false, input, 10).unwrap();
        assert_eq!(ch, vec![1]);
        let err =
            size_cnn_for_budget(BudgetTarget::Ops(9), 1, None, false, input, 10).unwrap_err();
        assert!(err.to_string().contains("cannot cover"));
    }

    #[test]
    fn cnn_ops_sizing_is_linear_in_the_single_block_regime() {
        let input = TensorShape::Image { channels: 1, height: 16, width: 16 };
        for target in [20_000u64, 50_000, 120_000] {
            let once =
                size_cnn_for_budget(BudgetTarget::Ops(target), 1, None, false, input, 10).unwrap();
            let twice = size_cnn_for_budget(BudgetTarget::Ops(2 * target), 1, None, false, input, 10)
                .unwrap();
            assert!(
                twice[0].abs_diff(2 * once[0]) <= 1,
                "{target}: {} vs doubled {}",
                twice[0],
                once[0]
            );
        }
    }

    #[test]
    fn cnn_second_block_rounds_independently() {
        // A solution near t = x.3 rounds the first block down while 2t =
        // 2x.6 rounds up, so the pair is not exactly (c, 2c).
        let input = TensorShape::Image { channels: 1, height: 16, width: 16 };
        let mut seen_odd = false;
        for target in (30_000u64..200_000).step_by(7_919) {
            let ch =
                size_cnn_for_budget(BudgetTarget::Ops(target), 2, None, false, input, 10).unwrap();
            if ch[1] % 2 == 1 {
                seen_odd = true;
            }
            assert!(ch[1].abs_diff(2 * ch[0]) <= 1);
        }
        assert!(seen_odd, "second block never rounded to an odd count");
    }

    proptest! {
        #[test]
        fn sized_fc_cost_is_within_one_unit_quantum(
            t in 1.0f64..300.0,
            l in 2usize..5,
            bits in prop::sample::select(vec![1u32, 2, 4, 8, 32]),
            bn in any::<bool>(),
            d in 1usize..200,
            c in 2usize..50,
        ) {
            let quant = Some(DnnQuantConfig::new(bits).unwrap());
            let input = TensorShape::Flat { features: d };
            let measure = |units: usize| {
                dnn_bits(input, &fc_architecture(units, l, bn, ActKind::Relu, c), quant).unwrap()
            };
            // Build a target from a real-valued width so it is feasible.
            let b_w = f64::from(bits);
            let bnf = if bn { 1.0 } else { 0.0 };
            let exact = b_w * (l as f64 - 2.0) * t * t
                + (b_w * (d + c) as f64 + bnf * 64.0 * (l as f64 - 1.0)) * t
                + 32.0 * c as f64;
            let target = exact.round() as u64;
            let h = size_fc_for_bit_budget(target, l, quant, bn, d, c).unwrap();
            let got = measure(h);
            let quantum = measure(h + 1) - got;
            prop_assert!(got.abs_diff(target) <= quantum);
        }

        #[test]
        fn sized_cnn_cost_is_within_one_channel_quantum(
            t in 1.0f64..60.0,
            layers in 1usize..3,
            kind in any::<bool>(),
            bn in any::<bool>(),
            c in 2usize..30,
            hw in prop::sample::select(vec![8usize, 12, 16, 28]),
            in_c in 1usize..4,
        ) {
            let input = TensorShape::Image { channels: in_c, height: hw, width: hw };
            let quant = Some(DnnQuantConfig::new(2).unwrap());
            let channels_for = |t: f64| -> Vec<usize> {
                let mut v = vec![(t.round() as usize).max(1)];
                if layers == 2 {
                    v.push(((2.0 * t).round() as usize).max(1));
                }
                v
            };
            let measure = |ch: &[usize]| -> u64 {
                let arch = cnn_architecture(ch, bn, ActKind::Sign, c);
                if kind {
                    dnn_bits(input, &arch, quant).unwrap()
                } else {
                    dnn_ops(input, &arch).unwrap()
                }
            };
            // Tie the target to the real-valued solution's cost so the
            // budget is attainable up to rounding.
            let low = channels_for(t.floor());
            let high = channels_for(t.floor() + 1.0);
            let frac = t.fract();
            let target = ((1.0 - frac) * measure(&low) as f64
                + frac * measure(&high) as f64)
                .round() as u64;
            let budget = if kind { BudgetTarget::Bits(target) } else { BudgetTarget::Ops(target) };
            let ch = size_cnn_for_budget(budget, layers, quant, bn, input, c).unwrap();
            let got = measure(&ch);
            let bumped: Vec<usize> = ch.iter().enumerate().map(|(i, &v)| v + i + 1).collect();
            let quantum = measure(&bumped) - got;
            prop_assert!(
                got.abs_diff(target) <= quantum,
                "layers={} channels={:?} got={} target={} quantum={}", layers, ch, got, target, quantum
            );
        }
    }
}
