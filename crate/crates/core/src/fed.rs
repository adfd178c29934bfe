//! Round-based federated training: local Dice training, per-client loss and
//! IoU bookkeeping, and weighted parameter aggregation.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fedia::{CompletenessEstimate, TrendFit};
use crate::metrics::{binarize, overlap_raw};
use crate::model::{adam_step, dice_loss, params_interp, ModelParams, OptimizerState, SegNet};
use crate::rng::{self, Domain};
use crate::synth::LabeledVolume;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub dice_smooth: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            learning_rate: 1e-3,
            batch_size: 4,
            local_epochs: 1,
            dice_smooth: crate::model::DICE_SMOOTH,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientState {
    pub id: usize,
    pub volumes: Vec<LabeledVolume>,
    /// Configured completeness; only used for reporting.
    pub true_rate: f64,
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    pub loss_history: Vec<f64>,
    pub iou_history: Vec<f64>,
    pub a_hat: Option<CompletenessEstimate>,
    pub trend: Option<TrendFit>,
    pub correction_rounds: Vec<u32>,
    /// Set when the trigger fired; the correction runs at the start of the
    /// next round.
    pub correction_pending: bool,
}

impl ClientState {
    pub fn new(id: usize, volumes: Vec<LabeledVolume>, true_rate: f64, global: &ModelParams, learning_rate: f64) -> Self {
        ClientState {
            id,
            volumes,
            true_rate,
            params: global.clone(),
            optimizer: OptimizerState::new(global.len(), learning_rate),
            loss_history: Vec::new(),
            iou_history: Vec::new(),
            a_hat: None,
            trend: None,
            correction_rounds: Vec::new(),
            correction_pending: false,
        }
    }

    /// Number of 2D training samples, `n_k`.
    pub fn sample_count(&self) -> usize {
        self.volumes.iter().map(|v| v.dims().depth).sum()
    }

    /// `(volume, slice)` pairs in dataset order.
    pub fn slice_ids(&self) -> Vec<(usize, usize)> {
        self.volumes
            .iter()
            .enumerate()
            .flat_map(|(v, vol)| (0..vol.dims().depth).map(move |z| (v, z)))
            .collect()
    }
}

/// Mean per-image Dice loss of `params` over the client's working masks.
pub fn mean_client_loss(net: &SegNet, params: &ModelParams, client: &ClientState, smooth: f64) -> f64 {
    let ids = client.slice_ids();
    let total: f64 = ids
        .iter()
        .map(|&(v, z)| {
            let vol = &client.volumes[v];
            dice_loss(&net.forward_raw(params, vol.image.slice(z)), vol.working_mask.slice(z), smooth)
        })
        .sum();
    total / ids.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    pub params: ModelParams,
    pub loss: f64,
}

/// Loads `global`, runs the configured local epochs over shuffled minibatches
/// with Adam, then records the post-update mean Dice loss against the
/// working masks.
pub fn local_train(
    net: &SegNet,
    client: &mut ClientState,
    global: &ModelParams,
    settings: &TrainSettings,
    round: u32,
    seed: u64,
) -> Result<LocalUpdate> {
    let mut ids = client.slice_ids();
    if ids.is_empty() {
        return Err(Error::Run(format!("client {} has no training slices", client.id)));
    }
    let mut params = global.clone();
    let mut rng = rng::stream2(seed, Domain::Shuffle, client.id as u64, u64::from(round));
    let batch = settings.batch_size.max(1);
    let mut grad = vec![0.0; params.len()];
    for _ in 0..settings.local_epochs {
        ids.shuffle(&mut rng);
        for chunk in ids.chunks(batch) {
            grad.fill(0.0);
            let scale = 1.0 / chunk.len() as f64;
            for &(v, z) in chunk {
                let vol = &client.volumes[v];
                net.accumulate_grad(
                    &params,
                    vol.image.slice(z),
                    vol.working_mask.slice(z),
                    settings.dice_smooth,
                    scale,
                    &mut grad,
                );
            }
            adam_step(&mut params.values, &grad, &mut client.optimizer)?;
        }
    }
    let loss = mean_client_loss(net, &params, client, settings.dice_smooth);
    if !loss.is_finite() || !params.is_finite() {
        return Err(Error::Update(format!("client {} produced a non-finite loss", client.id)));
    }
    client.loss_history.push(loss);
    client.params = params.clone();
    Ok(LocalUpdate { params, loss })
}

/// Quantity-weighted average.
pub fn fedavg_aggregate(params: &[&ModelParams], counts: &[usize]) -> Result<ModelParams> {
    if params.is_empty() {
        return Err(Error::Aggregation("no client models to aggregate".into()));
    }
    if counts.len() != params.len() || counts.contains(&0) {
        return Err(Error::Aggregation("every client needs a positive sample count".into()));
    }
    params_interp(params, &quantity_weights(counts))
}

pub fn quantity_weights(counts: &[usize]) -> Vec<f64> {
    let total: usize = counts.iter().sum();
    counts.iter().map(|&c| c as f64 / total as f64).collect()
}

/// Mean per-slice IoU of the thresholded global prediction against the
/// client's working masks, with empty-empty slices scoring 1.
pub fn slice_iou(net: &SegNet, global: &ModelParams, client: &ClientState) -> f64 {
    let ids = client.slice_ids();
    let total: f64 = ids
        .iter()
        .map(|&(v, z)| {
            let vol = &client.volumes[v];
            let pred = binarize(&net.forward_raw(global, vol.image.slice(z)));
            let (inter, p, y) = overlap_raw(&pred, vol.working_mask.slice(z));
            let union = p + y - inter;
            if union == 0 {
                1.0
            } else {
                inter as f64 / union as f64
            }
        })
        .sum();
    total / ids.len() as f64
}

/// [`slice_iou`], appended to the client's IoU history.
pub fn client_iou(net: &SegNet, client: &mut ClientState, global: &ModelParams) -> f64 {
    let v = slice_iou(net, global, client);
    client.iou_history.push(v);
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Warmup,
    Modification,
    Final,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Warmup => "warmup",
            Stage::Modification => "modification",
            Stage::Final => "final",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "warmup" => Ok(Stage::Warmup),
            "modification" => Ok(Stage::Modification),
            "final" => Ok(Stage::Final),
            other => Err(Error::Format(format!("unknown stage `{other}`"))),
        }
    }
}

/// How the server turns trained client models into a global model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Aggregation<'a> {
    /// `n_k / n` weights.
    Quantity,
    /// Caller-supplied simplex weights, one per client.
    Fixed(&'a [f64]),
    /// Softmax of `â_k / ℓ_k^t` over this round's losses.
    CompletenessAware(&'a [f64]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub stage: Stage,
    /// Zero for clients whose update was discarded.
    pub weights: Vec<f64>,
    pub losses: Vec<Option<f64>>,
    pub ious: Vec<f64>,
    /// Clients whose annotations were corrected at the start of this round.
    pub corrected: Vec<usize>,
    /// Test-set Dice in `[0, 1]`, when evaluated this round.
    pub test_dice: Option<f64>,
}

/// One communication round: every client trains from `global`, the server
/// aggregates the surviving updates, and every client's IoU against the new
/// global model is appended to its history.
pub fn run_round(
    net: &SegNet,
    clients: &mut [ClientState],
    global: &ModelParams,
    aggregation: Aggregation<'_>,
    settings: &TrainSettings,
    round: u32,
    seed: u64,
) -> Result<(ModelParams, RoundRecord)> {
    let updates: Vec<Result<LocalUpdate>> = clients
        .par_iter_mut()
        .map(|c| local_train(net, c, global, settings, round, seed))
        .collect();

    let mut alive = Vec::new();
    let mut losses = Vec::with_capacity(clients.len());
    for (k, u) in updates.iter().enumerate() {
        match u {
            Ok(u) => {
                alive.push(k);
                losses.push(Some(u.loss));
            }
            Err(e) => {
                log::warn!("round {round}: client {k} dropped: {e}");
                losses.push(None);
            }
        }
    }
    if alive.is_empty() {
        return Err(Error::Run(format!("round {round}: every client update was aborted")));
    }

    let sub_weights = match aggregation {
        Aggregation::Quantity => {
            quantity_weights(&alive.iter().map(|&k| clients[k].sample_count()).collect::<Vec<_>>())
        }
        Aggregation::Fixed(w) => {
            if w.len() != clients.len() {
                return Err(Error::Aggregation(format!("{} weights for {} clients", w.len(), clients.len())));
            }
            renormalize(alive.iter().map(|&k| w[k]).collect())?
        }
        Aggregation::CompletenessAware(a_hat) => {
            if a_hat.len() != clients.len() {
                return Err(Error::Aggregation(format!("{} estimates for {} clients", a_hat.len(), clients.len())));
            }
            let a: Vec<f64> = alive.iter().map(|&k| a_hat[k]).collect();
            let l: Vec<f64> = alive.iter().map(|&k| losses[k].expect("alive clients have a loss")).collect();
            crate::fedia::acag_weights(&a, &l)
        }
    };

    let models: Vec<&ModelParams> = alive
        .iter()
        .map(|&k| &updates[k].as_ref().expect("alive").params)
        .collect();
    let new_global = params_interp(&models, &sub_weights)?;

    let mut weights = vec![0.0; clients.len()];
    for (&k, &w) in alive.iter().zip(&sub_weights) {
        weights[k] = w;
    }
    let ious: Vec<f64> = clients
        .par_iter_mut()
        .map(|c| client_iou(net, c, &new_global))
        .collect();

    Ok((
        new_global,
        RoundRecord {
            round,
            stage: Stage::Warmup,
            weights,
            losses,
            ious,
            corrected: Vec::new(),
            test_dice: None,
        },
    ))
}

fn renormalize(w: Vec<f64>) -> Result<Vec<f64>> {
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Aggregation("no weight left on surviving clients".into()));
    }
    Ok(w.into_iter().map(|x| x / total).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Layout, ModelConfig};

    fn scalar(v: f64) -> ModelParams {
        ModelParams {
            values: vec![v],
            layout: Layout {
                layers: vec![],
                len: 1,
            },
        }
    }

    #[test]
    fn fedavg_weighted_mean() {
        let (a, b) = (scalar(0.0), scalar(4.0));
        assert_eq!(fedavg_aggregate(&[&a, &b], &[1, 3]).unwrap().values, vec![3.0]);
        assert_eq!(fedavg_aggregate(&[&a, &b], &[2, 2]).unwrap().values, vec![2.0]);
        assert_eq!(fedavg_aggregate(&[&b], &[5]).unwrap(), b);
        assert!(fedavg_aggregate(&[], &[]).is_err());
    }

    #[test]
    fn equal_counts_equal_unweighted_mean_bitwise() {
        let net_layout = ModelConfig::default().layout();
        let mk = |s: f64| ModelParams {
            values: (0..net_layout.len).map(|i| (i as f64 * s).cos()).collect(),
            layout: net_layout.clone(),
        };
        let ps = [mk(0.1), mk(0.2), mk(0.3), mk(0.4)];
        let refs: Vec<&ModelParams> = ps.iter().collect();
        let avg = fedavg_aggregate(&refs, &[8, 8, 8, 8]).unwrap();
        for i in 0..net_layout.len {
            let manual = 0.25 * ps[0].values[i] + 0.25 * ps[1].values[i] + 0.25 * ps[2].values[i] + 0.25 * ps[3].values[i];
            assert_eq!(avg.values[i].to_bits(), manual.to_bits());
        }
    }

    #[test]
    fn stage_names_round_trip() {
        for s in [Stage::Warmup, Stage::Modification, Stage::Final] {
            assert_eq!(s.as_str().parse::<Stage>().unwrap(), s);
        }
    }
}
