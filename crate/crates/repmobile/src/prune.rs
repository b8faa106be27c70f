//! Structured channel pruning with a width-uniform schedule and the
//! progressive prune-finetune loop.
//!
//! Channels live in groups that must be sliced together:
//! - the stem-1 output group (`C/4` channels),
//! - the first residual stream (stem-2 output through the stage-1 block
//!   outputs, `C` channels),
//! - one hidden group per block (expand output / depthwise / project input,
//!   `3 * Cin` channels),
//! - the second residual stream (stage-2/3 block outputs and the head input,
//!   `2C` channels).
//!
//! Importance of a channel is the L1 norm of every weight that produces it;
//! pruning keeps the top-k per group (ties broken toward lower indices) and
//! slices all producers and consumers with the same index set.

use crate::complexity::{count_macs, count_params};
use crate::error::{Error, Result};
use crate::model::{ModelGraph, ModelMode};
use crate::tensor::{Element, Tensor};

/// Compression schedule: ordered strictly-decreasing target widths, the
/// first of which must equal the model's trained width.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneSchedule {
    pub rounds: Vec<usize>,
    pub finetune_epochs: usize,
    pub importance: String,
}

impl PruneSchedule {
    pub fn new(rounds: Vec<usize>, finetune_epochs: usize) -> Self {
        PruneSchedule {
            rounds,
            finetune_epochs,
            importance: "l1".to_string(),
        }
    }

    pub fn parse(spec: &str, finetune_epochs: usize) -> Result<Self> {
        let rounds: Vec<usize> = spec
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad width '{}' in schedule", s)))
            })
            .collect::<Result<_>>()?;
        Ok(PruneSchedule::new(rounds, finetune_epochs))
    }

    pub fn validate(&self, model_width: usize) -> Result<()> {
        if self.importance != "l1" {
            return Err(Error::Config(format!(
                "unknown importance metric '{}' (only 'l1' is implemented)",
                self.importance
            )));
        }
        if self.rounds.len() < 2 {
            return Err(Error::Config("schedule needs at least a start and one target".into()));
        }
        if self.rounds[0] != model_width {
            return Err(Error::Config(format!(
                "schedule starts at {}, model width is {}",
                self.rounds[0], model_width
            )));
        }
        for w in &self.rounds {
            if w % 4 != 0 || *w < 8 {
                return Err(Error::Config(format!(
                    "width {} must be >= 8 and divisible by 4",
                    w
                )));
            }
        }
        for pair in self.rounds.windows(2) {
            if pair[1] >= pair[0] {
                return Err(Error::Config("schedule widths must be strictly decreasing".into()));
            }
        }
        Ok(())
    }
}

/// Keep-indices for one prunable channel group.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMask {
    pub group: String,
    pub keep: Vec<usize>,
}

/// L1 norm of the producing weights for each hidden channel of one block:
/// the expand-conv row plus the depthwise branch weights at that channel.
pub fn channel_importance<T: Element>(model: &ModelGraph<T>, block: usize) -> Result<Vec<f64>> {
    let blk = model
        .blocks
        .get(block)
        .ok_or_else(|| Error::Config(format!("no block {}", block)))?;
    if model.mode != ModelMode::Train {
        return Err(Error::Config("channel importance applies to train-form models".into()));
    }
    let h = blk.hidden_channels;
    let mut scores = vec![0f64; h];
    add_row_l1(&blk.expand.conv.weight, &mut scores);
    for br in &blk.dw_branches {
        add_row_l1(&br.conv.weight, &mut scores);
    }
    Ok(scores)
}

fn add_row_l1<T: Element>(w: &Tensor<T>, scores: &mut [f64]) {
    let rows = w.shape()[0];
    debug_assert_eq!(rows, scores.len());
    let per = w.numel() / rows;
    for (c, score) in scores.iter_mut().enumerate() {
        let mut s = 0f64;
        for v in &w.data()[c * per..(c + 1) * per] {
            s += v.to_f64_().abs();
        }
        *score += s;
    }
}

/// Top-k by score, ties broken toward the lower channel index; the result is
/// sorted ascending.
fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut keep: Vec<usize> = idx.into_iter().take(k).collect();
    keep.sort_unstable();
    keep
}

fn take_rows<T: Element>(t: &Tensor<T>, keep: &[usize]) -> Tensor<T> {
    let mut shape = t.shape().to_vec();
    let per = t.numel() / shape[0];
    shape[0] = keep.len();
    let mut data = Vec::with_capacity(keep.len() * per);
    for &c in keep {
        data.extend_from_slice(&t.data()[c * per..(c + 1) * per]);
    }
    Tensor::from_vec(&shape, data).expect("row slice")
}

/// Slice the input-channel axis of a `[Co, Ci, K0, K1]` weight.
fn take_cols<T: Element>(t: &Tensor<T>, keep: &[usize]) -> Tensor<T> {
    let s = t.shape();
    let (co, ci, k) = (s[0], s[1], s[2] * s[3]);
    let mut data = Vec::with_capacity(co * keep.len() * k);
    for o in 0..co {
        for &c in keep {
            data.extend_from_slice(&t.data()[(o * ci + c) * k..(o * ci + c + 1) * k]);
        }
    }
    Tensor::from_vec(&[co, keep.len(), s[2], s[3]], data).expect("col slice")
}

fn slice_bn<T: Element>(bn: &mut crate::model::BnParams<T>, keep: &[usize]) {
    bn.gamma = take_rows(&bn.gamma, keep);
    bn.beta = take_rows(&bn.beta, keep);
    bn.running_mean = take_rows(&bn.running_mean, keep);
    bn.running_var = take_rows(&bn.running_var, keep);
}

/// The masks a prune to `target_width` would apply, without applying them.
pub fn compute_masks<T: Element>(
    model: &ModelGraph<T>,
    target_width: usize,
) -> Result<Vec<ChannelMask>> {
    let w0 = model.base_channels();
    if model.mode != ModelMode::Train {
        return Err(Error::Config("pruning applies to train-form models".into()));
    }
    if target_width >= w0 {
        return Err(Error::Config(format!(
            "target width {} must be below the current width {}",
            target_width, w0
        )));
    }
    if target_width % 4 != 0 || target_width < 8 {
        return Err(Error::Config(format!(
            "target width {} must be >= 8 and divisible by 4",
            target_width
        )));
    }

    let mut masks = Vec::new();

    // stem-1 output group
    let mut s0 = vec![0f64; w0 / 4];
    add_row_l1(&model.stem[0].conv.weight, &mut s0);
    masks.push(ChannelMask {
        group: "stem".to_string(),
        keep: top_k(&s0, target_width / 4),
    });

    // first residual stream: stem-2 plus stage-1 projections
    let mut s1 = vec![0f64; w0];
    add_row_l1(&model.stem[1].conv.weight, &mut s1);
    for blk in &model.blocks {
        if blk.out_channels == w0 {
            add_row_l1(&blk.project.conv.weight, &mut s1);
        }
    }
    masks.push(ChannelMask {
        group: "stream1".to_string(),
        keep: top_k(&s1, target_width),
    });

    // hidden group per block
    for (i, blk) in model.blocks.iter().enumerate() {
        let scores = channel_importance(model, i)?;
        let keep_hidden = crate::model::EXPANSION * (blk.in_channels / w0) * target_width;
        masks.push(ChannelMask {
            group: format!("blocks.{}.hidden", i),
            keep: top_k(&scores, keep_hidden),
        });
    }

    // second residual stream: stage-2/3 projections feed the head
    let mut s2 = vec![0f64; 2 * w0];
    for blk in &model.blocks {
        if blk.out_channels == 2 * w0 {
            add_row_l1(&blk.project.conv.weight, &mut s2);
        }
    }
    masks.push(ChannelMask {
        group: "stream2".to_string(),
        keep: top_k(&s2, 2 * target_width),
    });

    Ok(masks)
}

/// Keep the top channels of every group and slice all dependent tensors.
/// The result is a valid smaller train-form model with the same structure as
/// a fresh build at `target_width`.
pub fn prune_to_width<T: Element>(
    model: &ModelGraph<T>,
    target_width: usize,
) -> Result<ModelGraph<T>> {
    let masks = compute_masks(model, target_width)?;
    let w0 = model.base_channels();
    let stem_keep = &masks[0].keep;
    let stream1 = &masks[1].keep;
    let stream2 = &masks.last().unwrap().keep;

    let mut out = model.clone();
    out.config.base_channels = target_width;

    // stem
    out.stem[0].conv.weight = take_rows(&model.stem[0].conv.weight, stem_keep);
    slice_bn(out.stem[0].bn.as_mut().unwrap(), stem_keep);
    out.stem[1].conv.weight = take_cols(
        &take_rows(&model.stem[1].conv.weight, stream1),
        stem_keep,
    );
    slice_bn(out.stem[1].bn.as_mut().unwrap(), stream1);

    for (i, blk) in out.blocks.iter_mut().enumerate() {
        let hidden_keep = &masks[2 + i].keep;
        let in_keep: &[usize] = if blk.in_channels == w0 { stream1 } else { stream2 };
        let out_keep: &[usize] = if blk.out_channels == w0 { stream1 } else { stream2 };

        blk.expand.conv.weight =
            take_cols(&take_rows(&blk.expand.conv.weight, hidden_keep), in_keep);
        slice_bn(blk.expand.bn.as_mut().unwrap(), hidden_keep);

        for br in &mut blk.dw_branches {
            br.conv.weight = take_rows(&br.conv.weight, hidden_keep);
            br.conv.groups = hidden_keep.len();
            slice_bn(&mut br.bn, hidden_keep);
        }

        blk.project.conv.weight =
            take_cols(&take_rows(&blk.project.conv.weight, out_keep), hidden_keep);
        slice_bn(blk.project.bn.as_mut().unwrap(), out_keep);

        blk.in_channels = in_keep.len();
        blk.hidden_channels = hidden_keep.len();
        blk.out_channels = out_keep.len();
    }

    out.head.conv.weight = take_cols(&model.head.conv.weight, stream2);

    Ok(out)
}

/// Metrics captured after each prune-finetune round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub width: usize,
    pub params: u64,
    pub macs: u64,
    pub accuracy: f64,
}

pub fn round_metrics_csv(rows: &[RoundMetrics]) -> String {
    let mut out = String::from("round,width,params,macs,acc\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.4}\n",
            r.round, r.width, r.params, r.macs, r.accuracy
        ));
    }
    out
}

/// Run the prune-finetune loop over consecutive schedule widths. The
/// `finetune` closure trains the pruned model for the schedule's epoch
/// budget and reports its eval accuracy.
pub fn progressive_prune<T, F>(
    model: ModelGraph<T>,
    schedule: &PruneSchedule,
    mut finetune: F,
) -> Result<(ModelGraph<T>, Vec<RoundMetrics>)>
where
    T: Element,
    F: FnMut(ModelGraph<T>, usize) -> Result<(ModelGraph<T>, f64)>,
{
    schedule.validate(model.base_channels())?;
    let mut current = model;
    let mut metrics = Vec::new();
    for (round, pair) in schedule.rounds.windows(2).enumerate() {
        let target = pair[1];
        let stage = format!("prune-round-{}", round);
        let pruned = prune_to_width(&current, target).map_err(|e| e.in_stage(&stage))?;

        // forward validation: a random input must produce finite logits
        let probe = probe_input::<T>(round as u64);
        let logits = pruned.forward_eval(&probe).map_err(|e| e.in_stage(&stage))?;
        logits
            .check_finite("pruned-model logits")
            .map_err(|e| e.in_stage(&stage))?;

        let params = count_params(&pruned);
        let macs = count_macs(&pruned, 256, 57).map_err(|e| e.in_stage(&stage))?;
        let (tuned, accuracy) =
            finetune(pruned, schedule.finetune_epochs).map_err(|e| e.in_stage(&stage))?;
        metrics.push(RoundMetrics {
            round,
            width: target,
            params,
            macs,
            accuracy,
        });
        current = tuned;
    }
    Ok((current, metrics))
}

fn probe_input<T: Element>(seed: u64) -> Tensor<T> {
    use rand::Rng;
    let mut rng = crate::rng::stream_rng(seed, &[0x9406e]);
    let mut x = Tensor::<T>::zeros(&[1, 1, 64, 25]);
    for v in x.data_mut() {
        *v = T::from_f64_(rng.random_range(-1.0..1.0));
    }
    x
}
