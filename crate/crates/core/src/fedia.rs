//! Completeness estimation, completeness-aware aggregation, IoU-trend
//! monitoring and confidence-gated annotation correction, plus the staged
//! driver that runs them alongside plain FedAvg.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ccl::{count_components, Connectivity};
use crate::error::{Error, Result};
use crate::fed::{run_round, Aggregation, ClientState, RoundRecord, Stage, TrainSettings};
use crate::grid::Mask;
use crate::metrics::{evaluate, EvalReport};
use crate::model::{ModelParams, SegNet};
use crate::rng::{self, Domain};
use crate::synth::{FederatedDataset, LabeledVolume};

/// Losses are floored here before dividing in the aggregation score.
pub const LOSS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcagMode {
    /// Leave the modification stage once every client corrected at least once.
    UntilAllCorrected,
    /// Never leave the modification stage.
    Always,
    /// Leave after this many modification rounds.
    Rounds(u32),
}

impl std::fmt::Display for AcagMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AcagMode::UntilAllCorrected => f.write_str("until_all_corrected"),
            AcagMode::Always => f.write_str("always"),
            AcagMode::Rounds(r) => write!(f, "rounds:{r}"),
        }
    }
}

impl std::str::FromStr for AcagMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "until_all_corrected" => Ok(AcagMode::UntilAllCorrected),
            "always" => Ok(AcagMode::Always),
            _ => {
                let r = s
                    .strip_prefix("rounds:")
                    .or_else(|| s.strip_prefix("rounds(").and_then(|r| r.strip_suffix(')')))
                    .and_then(|r| r.parse().ok())
                    .ok_or_else(|| {
                        Error::config(format!(
                            "fedia.acag_mode: expected until_all_corrected, always or rounds:R, got `{s}`"
                        ))
                    })?;
                Ok(AcagMode::Rounds(r))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedIAConfig {
    pub warmup_rounds: u32,
    pub lambda: f64,
    pub confidence: f64,
    pub min_component_size: usize,
    pub acag_mode: AcagMode,
    pub total_rounds: u32,
    /// Keep completeness-aware weights after the modification stage.
    pub acag_in_final: bool,
    /// Count lesions on reassembled 3D volumes instead of per slice.
    pub count_3d: bool,
}

impl Default for FedIAConfig {
    fn default() -> Self {
        FedIAConfig {
            warmup_rounds: 10,
            lambda: 0.03,
            confidence: 0.8,
            min_component_size: 3,
            acag_mode: AcagMode::UntilAllCorrected,
            total_rounds: 300,
            acag_in_final: false,
            count_3d: false,
        }
    }
}

impl FedIAConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_rounds < 1 || self.warmup_rounds >= self.total_rounds {
            return Err(Error::config(format!(
                "fedia.warmup_rounds must satisfy 1 <= T < run.rounds (T = {}, rounds = {})",
                self.warmup_rounds, self.total_rounds
            )));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::config("fedia.lambda must be > 0"));
        }
        if !(self.confidence > 0.5 && self.confidence < 1.0) {
            return Err(Error::config("fedia.confidence must lie in (0.5, 1)"));
        }
        if self.min_component_size < 1 {
            return Err(Error::config("fedia.min_component_size must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    FedAvg,
    FedIA,
    /// Correction without completeness-aware aggregation.
    FedIANoAcag,
    /// Completeness-aware aggregation without correction.
    FedIANoCac,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::FedAvg => "fedavg",
            Method::FedIA => "fedia",
            Method::FedIANoAcag => "fedia_no_acag",
            Method::FedIANoCac => "fedia_no_cac",
        }
    }

    pub fn uses_acag(self) -> bool {
        matches!(self, Method::FedIA | Method::FedIANoCac)
    }

    pub fn uses_correction(self) -> bool {
        matches!(self, Method::FedIA | Method::FedIANoAcag)
    }

    pub fn is_staged(self) -> bool {
        self != Method::FedAvg
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "fedavg" => Ok(Method::FedAvg),
            "fedia" => Ok(Method::FedIA),
            "fedia_no_acag" => Ok(Method::FedIANoAcag),
            "fedia_no_cac" => Ok(Method::FedIANoCac),
            other => Err(Error::config(format!(
                "run.method: unknown method `{other}` (fedavg, fedia, fedia_no_acag, fedia_no_cac)"
            ))),
        }
    }
}

/// Client-level completeness estimate from the warm-up model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletenessEstimate {
    pub raw: f64,
    /// `raw` clamped into `(0, 1]` for use as an aggregation score.
    pub clamped: f64,
    pub label_components: usize,
    pub predicted_components: usize,
}

fn count_lesions(mask: &Mask, min_size: usize, count_3d: bool) -> usize {
    if count_3d {
        count_components(mask, Connectivity::Face, min_size)
    } else {
        (0..mask.dims().depth)
            .map(|z| count_components(&mask.plane(z), Connectivity::Face, min_size))
            .sum()
    }
}

/// Ratio of lesions in the client's annotations to lesions found by a
/// prediction function, summed over samples. Label lesions are counted
/// unfiltered; predicted lesions smaller than `min_size` are ignored.
pub fn estimate_with<F>(volumes: &[LabeledVolume], cfg: &FedIAConfig, mut predict: F) -> CompletenessEstimate
where
    F: FnMut(&LabeledVolume) -> Mask,
{
    let mut label_components = 0;
    let mut predicted_components = 0;
    for vol in volumes {
        label_components += count_lesions(&vol.noisy_mask, 1, cfg.count_3d);
        predicted_components += count_lesions(&predict(vol), cfg.min_component_size, cfg.count_3d);
    }
    let raw = if predicted_components == 0 {
        log::warn!("no lesions predicted; completeness estimate defaults to 1");
        1.0
    } else {
        label_components as f64 / predicted_components as f64
    };
    CompletenessEstimate {
        raw,
        clamped: raw.clamp(f64::MIN_POSITIVE, 1.0),
        label_components,
        predicted_components,
    }
}

pub fn estimate_completeness(net: &SegNet, global: &ModelParams, client: &ClientState, cfg: &FedIAConfig) -> CompletenessEstimate {
    estimate_with(&client.volumes, cfg, |v| crate::metrics::predict_volume(net, global, &v.image))
}

/// Softmax of `â_k / max(ℓ_k, LOSS_FLOOR)`.
pub fn acag_weights(a_hat: &[f64], losses: &[f64]) -> Vec<f64> {
    assert_eq!(a_hat.len(), losses.len(), "acag_weights: length mismatch");
    let scores: Vec<f64> = a_hat
        .iter()
        .zip(losses)
        .map(|(&a, &l)| a / l.max(LOSS_FLOOR))
        .collect();
    let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&s| (s - top).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Least-squares line through the IoU history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendFit {
    pub slope: f64,
    pub intercept: f64,
    /// Inclusive round range the line was fitted on.
    pub fit_rounds: (u32, u32),
}

impl TrendFit {
    pub fn value(&self, round: u32) -> f64 {
        self.slope * f64::from(round) + self.intercept
    }
}

/// Fits `iou = slope * t + intercept` to `history[i]` at `t = i + 1`.
pub fn fit_iou_trend(history: &[f64]) -> Result<TrendFit> {
    if history.len() < 2 {
        return Err(Error::Fit(format!(
            "need at least 2 rounds of IoU history, got {}",
            history.len()
        )));
    }
    let n = history.len() as f64;
    let mean_t = (n + 1.0) / 2.0;
    let mean_y = history.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, &y) in history.iter().enumerate() {
        let dt = (i + 1) as f64 - mean_t;
        sxy += dt * (y - mean_y);
        sxx += dt * dt;
    }
    let slope = sxy / sxx;
    Ok(TrendFit {
        slope,
        intercept: mean_y - slope * mean_t,
        fit_rounds: (1, history.len() as u32),
    })
}

/// Strictly more than `lambda` below the extrapolated trend.
pub fn correction_due(fit: &TrendFit, round: u32, actual_iou: f64, lambda: f64) -> bool {
    fit.value(round) - actual_iou > lambda
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CorrectionOutcome {
    pub flipped: usize,
    /// Flipped voxels that are foreground in the ground truth.
    pub inside_gt: usize,
}

/// Sets background voxels of the working mask to foreground wherever the
/// probability exceeds `confidence`. Foreground voxels are never cleared.
pub fn correct_with<F>(volumes: &mut [LabeledVolume], confidence: f64, mut prob: F) -> CorrectionOutcome
where
    F: FnMut(&LabeledVolume, usize) -> Vec<f64>,
{
    let mut out = CorrectionOutcome::default();
    for vol in volumes.iter_mut() {
        for z in 0..vol.dims().depth {
            let p = prob(vol, z);
            let gt = vol.gt_mask.slice(z).to_vec();
            for ((w, &pv), &g) in vol.working_mask.slice_mut(z).iter_mut().zip(&p).zip(&gt) {
                if *w == 0 && pv > confidence {
                    *w = 1;
                    out.flipped += 1;
                    out.inside_gt += usize::from(g != 0);
                }
            }
        }
    }
    out
}

pub fn correct_annotations(net: &SegNet, client: &mut ClientState, global: &ModelParams, confidence: f64) -> CorrectionOutcome {
    correct_with(&mut client.volumes, confidence, |v, z| net.forward_raw(global, v.image.slice(z)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationRow {
    pub client: usize,
    pub true_rate: f64,
    pub estimate: CompletenessEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionEvent {
    pub round: u32,
    pub client: usize,
    pub flipped: usize,
    pub inside_gt: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub method: Method,
    pub fedia: FedIAConfig,
    pub train: TrainSettings,
    pub model: crate::model::ModelConfig,
    pub eval_every: u32,
    pub pooled_metrics: bool,
    pub seed: u64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.fedia.validate()?;
        self.model.validate()?;
        if self.method.uses_correction() && self.fedia.warmup_rounds < 2 {
            return Err(Error::config(
                "fedia.warmup_rounds must be >= 2 when annotation correction is enabled (the IoU trend needs two points)",
            ));
        }
        if self.eval_every == 0 {
            return Err(Error::config("run.eval_every must be >= 1"));
        }
        Ok(())
    }
}

/// A resumable federated run. Serializing the whole struct checkpoints it;
/// all randomness is derived from `(seed, client, round)` so a restored run
/// continues exactly where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Simulation {
    pub config: SimConfig,
    pub clients: Vec<ClientState>,
    pub test_set: Vec<LabeledVolume>,
    pub global: ModelParams,
    pub round: u32,
    pub stage: Stage,
    modification_rounds: u32,
    pub records: Vec<RoundRecord>,
    pub estimates: Vec<EstimationRow>,
    pub corrections: Vec<CorrectionEvent>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub records: Vec<RoundRecord>,
    pub estimates: Vec<EstimationRow>,
    pub corrections: Vec<CorrectionEvent>,
    pub final_model: ModelParams,
    pub final_eval: EvalReport,
}

impl Simulation {
    pub fn new(config: SimConfig, data: FederatedDataset) -> Result<Self> {
        config.validate()?;
        let net = SegNet::new(config.model.clone())?;
        let global = ModelParams::init(net.layout().clone(), &mut rng::stream(config.seed, Domain::Init, 0));
        let clients = data
            .clients
            .into_iter()
            .zip(data.completeness)
            .enumerate()
            .map(|(k, (vols, rate))| ClientState::new(k, vols, rate, &global, config.train.learning_rate))
            .collect::<Vec<_>>();
        if clients.is_empty() || clients.iter().any(|c| c.sample_count() == 0) {
            return Err(Error::config("every client needs at least one training volume"));
        }
        Ok(Simulation {
            config,
            clients,
            test_set: data.test_set,
            global,
            round: 0,
            stage: Stage::Warmup,
            modification_rounds: 0,
            records: Vec::new(),
            estimates: Vec::new(),
            corrections: Vec::new(),
        })
    }

    pub fn net(&self) -> SegNet {
        SegNet::new(self.config.model.clone()).expect("model config validated at construction")
    }

    pub fn is_finished(&self) -> bool {
        self.round >= self.config.fedia.total_rounds
    }

    fn a_hat(&self) -> Vec<f64> {
        self.clients
            .iter()
            .map(|c| c.a_hat.as_ref().map_or(1.0, |e| e.clamped))
            .collect()
    }

    /// Runs one round and returns its record.
    pub fn step(&mut self) -> Result<&RoundRecord> {
        if self.is_finished() {
            return Err(Error::Run("simulation already finished".into()));
        }
        let net = self.net();
        let method = self.config.method;
        let cfg = self.config.fedia.clone();
        let t = self.round + 1;

        // Corrections triggered last round use the incoming global model.
        let mut corrected = Vec::new();
        if method.uses_correction() {
            let global = &self.global;
            let outcomes: Vec<Option<CorrectionOutcome>> = self
                .clients
                .par_iter_mut()
                .map(|c| {
                    if !c.correction_pending {
                        return None;
                    }
                    c.correction_pending = false;
                    c.correction_rounds.push(t);
                    Some(correct_annotations(&net, c, global, cfg.confidence))
                })
                .collect();
            for (k, o) in outcomes.into_iter().enumerate() {
                if let Some(o) = o {
                    corrected.push(k);
                    self.corrections.push(CorrectionEvent {
                        round: t,
                        client: k,
                        flipped: o.flipped,
                        inside_gt: o.inside_gt,
                    });
                }
            }
        }

        let stage = if !method.is_staged() || t <= cfg.warmup_rounds {
            Stage::Warmup
        } else {
            self.stage
        };
        let acag = method.uses_acag()
            && match stage {
                Stage::Warmup => false,
                Stage::Modification => true,
                Stage::Final => cfg.acag_in_final,
            };
        let a_hat = self.a_hat();
        let aggregation = if acag {
            Aggregation::CompletenessAware(&a_hat)
        } else {
            Aggregation::Quantity
        };

        let (global, mut record) = run_round(
            &net,
            &mut self.clients,
            &self.global,
            aggregation,
            &self.config.train,
            t,
            self.config.seed,
        )?;
        self.global = global;
        record.stage = stage;
        record.corrected = corrected;

        if method.is_staged() && t == cfg.warmup_rounds {
            self.finish_warmup(&net)?;
        }
        if method.uses_correction() && t > cfg.warmup_rounds {
            for c in &mut self.clients {
                let fit = c.trend.as_ref().expect("trend fitted at the end of warm-up");
                let iou = *c.iou_history.last().expect("IoU recorded this round");
                if correction_due(fit, t, iou, cfg.lambda) {
                    c.correction_pending = true;
                }
            }
        }

        // Stage bookkeeping for the next round.
        if method.is_staged() && t >= cfg.warmup_rounds {
            if stage == Stage::Modification {
                self.modification_rounds += 1;
            }
            self.stage = match (self.stage, t == cfg.warmup_rounds) {
                (_, true) => Stage::Modification,
                (Stage::Modification, false) if self.leave_modification() => Stage::Final,
                (s, false) => s,
            };
        }

        if t.is_multiple_of(self.config.eval_every) || t == cfg.total_rounds {
            let report = evaluate(&net, &self.global, &self.test_set, self.config.pooled_metrics);
            record.test_dice = Some(report.dice);
        }
        self.round = t;
        self.records.push(record);
        Ok(self.records.last().expect("just pushed"))
    }

    fn leave_modification(&self) -> bool {
        match self.config.fedia.acag_mode {
            AcagMode::Always => false,
            AcagMode::Rounds(r) => self.modification_rounds >= r,
            AcagMode::UntilAllCorrected => {
                self.config.method.uses_correction() && self.clients.iter().all(|c| !c.correction_rounds.is_empty())
            }
        }
    }

    fn finish_warmup(&mut self, net: &SegNet) -> Result<()> {
        let cfg = self.config.fedia.clone();
        let fit_trends = self.config.method.uses_correction();
        let global = &self.global;
        let fits: Vec<Result<(CompletenessEstimate, Option<TrendFit>)>> = self
            .clients
            .par_iter()
            .map(|c| {
                let trend = if fit_trends { Some(fit_iou_trend(&c.iou_history)?) } else { None };
                Ok((estimate_completeness(net, global, c, &cfg), trend))
            })
            .collect();
        for (c, fit) in self.clients.iter_mut().zip(fits) {
            let (estimate, trend) = fit?;
            log::info!(
                "client {}: a_hat = {:.4} (raw {:.4}, {} labelled / {} predicted)",
                c.id,
                estimate.clamped,
                estimate.raw,
                estimate.label_components,
                estimate.predicted_components,
            );
            if let Some(t) = &trend {
                log::info!("client {}: IoU trend {:.4} t + {:.4}", c.id, t.slope, t.intercept);
            }
            self.estimates.push(EstimationRow {
                client: c.id,
                true_rate: c.true_rate,
                estimate: estimate.clone(),
            });
            c.a_hat = Some(estimate);
            c.trend = trend;
        }
        Ok(())
    }

    pub fn run_to_end(&mut self) -> Result<()> {
        while !self.is_finished() {
            self.step()?;
        }
        Ok(())
    }

    pub fn outcome(&self) -> RunOutcome {
        let net = self.net();
        RunOutcome {
            records: self.records.clone(),
            estimates: self.estimates.clone(),
            corrections: self.corrections.clone(),
            final_model: self.global.clone(),
            final_eval: evaluate(&net, &self.global, &self.test_set, self.config.pooled_metrics),
        }
    }

    /// Working masks of every client, in client/volume order.
    pub fn working_masks(&self) -> Vec<Vec<Mask>> {
        self.clients
            .iter()
            .map(|c| c.volumes.iter().map(|v| v.working_mask.clone()).collect())
            .collect()
    }
}

/// Builds a simulation for `data` and runs it to completion.
pub fn run_fedia(config: SimConfig, data: FederatedDataset) -> Result<RunOutcome> {
    let mut sim = Simulation::new(config, data)?;
    sim.run_to_end()?;
    Ok(sim.outcome())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_weights_for_identical_clients() {
        let w = acag_weights(&[0.6; 4], &[0.3; 4]);
        for x in w {
            assert!((x - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn two_client_softmax() {
        let w = acag_weights(&[1.0, 1.0], &[0.5, 1.0]);
        let e2 = 2f64.exp();
        let e1 = 1f64.exp();
        assert!((w[0] - e2 / (e2 + e1)).abs() < 1e-12);
        assert!((w[1] - e1 / (e2 + e1)).abs() < 1e-12);
        assert!((w[0] - 0.731).abs() < 1e-3);
    }

    #[test]
    fn weights_not_scale_invariant() {
        let a = acag_weights(&[2.0, 1.0], &[1.0, 1.0]);
        let b = acag_weights(&[4.0, 2.0], &[1.0, 1.0]);
        assert!((a[0] - b[0]).abs() > 0.1);
    }

    #[test]
    fn zero_loss_is_floored() {
        let w = acag_weights(&[1.0, 0.5], &[0.0, 0.0]);
        assert!(w.iter().all(|x| x.is_finite()));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w[0] > w[1]);
    }

    #[test]
    fn exact_line() {
        let fit = fit_iou_trend(&[0.1, 0.2, 0.3]).unwrap();
        assert!((fit.slope - 0.1).abs() < 1e-12);
        assert!(fit.intercept.abs() < 1e-12);
        assert_eq!(fit.fit_rounds, (1, 3));
    }

    #[test]
    fn constant_history() {
        let fit = fit_iou_trend(&[0.42; 6]).unwrap();
        assert_eq!(fit.slope, 0.0);
        assert!((fit.intercept - 0.42).abs() < 1e-15);
    }

    #[test]
    fn single_point_cannot_be_fitted() {
        assert!(matches!(fit_iou_trend(&[0.3]), Err(Error::Fit(_))));
    }

    #[test]
    fn trigger_margin() {
        let fit = TrendFit {
            slope: 0.0,
            intercept: 0.5,
            fit_rounds: (1, 10),
        };
        assert!(correction_due(&fit, 11, 0.46, 0.03));
        assert!(!correction_due(&fit, 11, 0.48, 0.03));
        assert!(!correction_due(&fit, 11, 0.5, 0.03));
        assert!(!correction_due(&fit, 11, 0.0, f64::INFINITY));
    }

    #[test]
    fn acag_mode_parsing() {
        assert_eq!("always".parse::<AcagMode>().unwrap(), AcagMode::Always);
        assert_eq!("rounds:7".parse::<AcagMode>().unwrap(), AcagMode::Rounds(7));
        assert_eq!("rounds(7)".parse::<AcagMode>().unwrap(), AcagMode::Rounds(7));
        assert_eq!(AcagMode::Rounds(3).to_string().parse::<AcagMode>().unwrap(), AcagMode::Rounds(3));
        assert!("sometimes".parse::<AcagMode>().is_err());
    }

    #[test]
    fn config_validation() {
        let ok = FedIAConfig::default();
        assert!(ok.validate().is_ok());
        assert!(FedIAConfig { warmup_rounds: 0, ..ok.clone() }.validate().is_err());
        assert!(FedIAConfig { warmup_rounds: 300, ..ok.clone() }.validate().is_err());
        assert!(FedIAConfig { lambda: 0.0, ..ok.clone() }.validate().is_err());
        assert!(FedIAConfig { confidence: 0.5, ..ok.clone() }.validate().is_err());
        assert!(FedIAConfig { lambda: f64::INFINITY, ..ok }.validate().is_ok());
    }
}
