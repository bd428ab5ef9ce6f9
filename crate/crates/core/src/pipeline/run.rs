//! End-to-end orchestration with checkpoint files between stages.
//!
//! Stages: 1 reconstruction pretraining, 2 loss-band control and triplet
//! encoder, 3 prototype refinement, 4 scoring and evaluation. Each stage
//! draws from its own random stream derived from the run seed, so resuming
//! from a stage reproduces a full run exactly.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boundary_rl::{
    calibrate_step, new_agent, run_stage2_rl, write_trajectory_csv, BandConfig, Pools, RlSummary,
};
use crate::checkpoint::write_atomic;
use crate::data::{load_csv, make_benchmark, make_windows, NormStats, TimeSeries, WindowSet};
use crate::encoder::{train_stage2, EncoderConfig, EncoderEpoch, TripletEncoder};
use crate::error::{Error, Result};
use crate::pipeline::config::RunConfig;
use crate::prototypes::{init_prototypes, train_stage3, PrototypeBank, Stage3Losses};
use crate::recon::{pretrain, ReconConfig, ReconModel};
use crate::scoring::{pick_threshold, EvalReport, ScoreSeries};

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG_COPY: &str = "config.toml";
pub const RECON_FILE: &str = "recon.json";
pub const POOLS_FILE: &str = "pools.json";
pub const ENCODER_FILE: &str = "encoder.json";
pub const BANK_FILE: &str = "bank.json";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const SCORES_FILE: &str = "scores.csv";
pub const REPORT_FILE: &str = "report.json";
pub const LAST_STAGE: u8 = 4;

/// Normalized splits and their windows.
pub struct PreparedData {
    pub train: TimeSeries<f64>,
    pub test: TimeSeries<f64>,
    /// Test split before normalization.
    pub raw_test: TimeSeries<f64>,
    pub norm: NormStats,
    pub train_windows: WindowSet<f64>,
    pub test_windows: WindowSet<f64>,
}

pub fn prepare_data(cfg: &RunConfig) -> Result<PreparedData> {
    let (train, test) = match (&cfg.data.synthetic, &cfg.data.csv) {
        (Some(s), _) => {
            let b = make_benchmark(&s.spec(cfg.window.width), cfg.seed)?;
            (b.train, b.test)
        }
        (None, Some(c)) => (
            load_csv(&c.train, &c.schema)?,
            load_csv(&c.test, &c.schema)?,
        ),
        (None, None) => return Err(Error::Config("no data source configured".into())),
    };
    if train.labels().is_some_and(|l| l.contains(&1)) {
        return Err(Error::invalid("training split contains labeled anomalies"));
    }
    let norm = NormStats::fit(&train)?;
    let train_n = norm.apply(&train)?;
    let test_n = norm.apply(&test)?;
    let train_windows = make_windows(&train_n, cfg.window.width, cfg.window.stride)?;
    let test_windows = make_windows(&test_n, cfg.window.width, cfg.window.stride)?;
    Ok(PreparedData {
        train: train_n,
        test: test_n,
        raw_test: test,
        norm,
        train_windows,
        test_windows,
    })
}

/// Independent random stream for one stage of a run.
pub fn stage_rng(seed: u64, stage: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage);
    rng
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageFiles {
    pub recon: Option<String>,
    pub pools: Option<String>,
    pub encoder: Option<String>,
    pub bank: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Histories {
    pub stage1: Vec<f64>,
    pub rl: Option<RlSummary>,
    pub stage2: Vec<EncoderEpoch>,
    pub stage3: Vec<Stage3Losses>,
}

/// Record of a run, rewritten after every completed stage. Paths are
/// relative to the run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub config_hash: String,
    pub config: String,
    pub seed: u64,
    pub completed_stage: u8,
    pub norm: Option<NormStats>,
    pub stage1_loss: Option<f64>,
    pub band: Option<BandConfig>,
    pub checkpoints: StageFiles,
    pub trajectory: Option<String>,
    pub scores: Option<String>,
    pub histories: Histories,
    pub report: Option<EvalReport>,
}

impl RunManifest {
    fn new(cfg: &RunConfig) -> Result<Self> {
        Ok(Self {
            version: 1,
            config_hash: cfg.hash()?,
            config: CONFIG_COPY.into(),
            seed: cfg.seed,
            completed_stage: 0,
            norm: None,
            stage1_loss: None,
            band: None,
            checkpoints: StageFiles::default(),
            trajectory: None,
            scores: None,
            histories: Histories::default(),
            report: None,
        })
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(MANIFEST);
        if !path.exists() {
            return Err(Error::MissingFile(path));
        }
        Ok(serde_json::from_slice(&std::fs::read(&path)?)?)
    }

    fn save(&self, dir: &Path) -> Result<()> {
        write_atomic(
            &dir.join(MANIFEST),
            serde_json::to_string_pretty(self)?.as_bytes(),
        )
    }

    /// Absolute path of a recorded artifact, checked to exist.
    pub fn artifact(&self, dir: &Path, name: &Option<String>, what: &str) -> Result<PathBuf> {
        let rel = name
            .as_ref()
            .ok_or_else(|| Error::Checkpoint(format!("manifest records no {what}")))?;
        let path = dir.join(rel);
        if !path.exists() {
            return Err(Error::MissingFile(path));
        }
        Ok(path)
    }
}

pub fn run_pipeline(cfg: &RunConfig) -> Result<RunManifest> {
    run_from(cfg, 1)
}

/// Runs stages `from_stage..=4`, loading earlier results from the run
/// directory. Stage 1 starts a fresh run.
pub fn run_from(cfg: &RunConfig, from_stage: u8) -> Result<RunManifest> {
    cfg.validate()?;
    if !(1..=LAST_STAGE).contains(&from_stage) {
        return Err(Error::invalid(format!(
            "stage must be between 1 and {LAST_STAGE}"
        )));
    }
    let dir = cfg.output.clone();
    std::fs::create_dir_all(&dir)?;
    let mut manifest = if from_stage == 1 {
        RunManifest::new(cfg)?
    } else {
        let m = RunManifest::load(&dir)?;
        if m.completed_stage + 1 < from_stage {
            return Err(Error::Checkpoint(format!(
                "run in {} completed stage {} only; cannot start at stage {from_stage}",
                dir.display(),
                m.completed_stage
            )));
        }
        if m.config_hash != cfg.hash()? {
            log::warn!(
                "configuration differs from the one recorded in {}",
                dir.display()
            );
        }
        m
    };
    manifest.config_hash = cfg.hash()?;
    write_atomic(&dir.join(CONFIG_COPY), cfg.to_toml()?.as_bytes())?;

    let data = prepare_data(cfg).map_err(|e| e.in_stage("data"))?;
    manifest.norm = Some(data.norm.clone());

    if from_stage <= 1 {
        stage1(cfg, &dir, &data, &mut manifest).map_err(|e| e.in_stage("stage1"))?;
        finish(&mut manifest, &dir, 1)?;
    }
    if from_stage <= 2 {
        stage2(cfg, &dir, &data, &mut manifest).map_err(|e| e.in_stage("stage2"))?;
        finish(&mut manifest, &dir, 2)?;
    }
    if from_stage <= 3 {
        stage3(cfg, &dir, &mut manifest).map_err(|e| e.in_stage("stage3"))?;
        finish(&mut manifest, &dir, 3)?;
    }
    evaluate(cfg, &dir, &data, &mut manifest).map_err(|e| e.in_stage("eval"))?;
    finish(&mut manifest, &dir, 4)?;
    Ok(manifest)
}

fn finish(m: &mut RunManifest, dir: &Path, stage: u8) -> Result<()> {
    m.completed_stage = stage;
    if stage < LAST_STAGE {
        m.report = None;
    }
    m.save(dir)
}

fn stage1(cfg: &RunConfig, dir: &Path, data: &PreparedData, m: &mut RunManifest) -> Result<()> {
    let mut rng = stage_rng(cfg.seed, 1);
    let s = &cfg.stage1;
    let rc = ReconConfig {
        window: cfg.window.width,
        dims: data.train.dims(),
        hidden: s.hidden,
        layers: s.layers,
        heads: s.heads,
        ff_hidden: s.ff_hidden,
    };
    let mut model = ReconModel::<f64>::new(rc, &mut rng)?;
    let history = pretrain(&mut model, &data.train_windows, &s.train, &mut rng)?;
    let loss = full_loss(&model, &data.train_windows)?;
    log::info!(
        "stage1: reconstruction loss {loss:.6} after {} epochs",
        history.len()
    );
    model.save(dir.join(RECON_FILE))?;
    m.checkpoints.recon = Some(RECON_FILE.into());
    m.stage1_loss = Some(loss);
    m.histories.stage1 = history;
    Ok(())
}

/// Mean per-window reconstruction loss over a whole window set.
pub fn full_loss(model: &ReconModel<f64>, windows: &WindowSet<f64>) -> Result<f64> {
    let idx: Vec<usize> = (0..windows.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(256) {
        total += model.loss(&windows.batch(chunk)?)? * chunk.len() as f64;
    }
    Ok(total / windows.len() as f64)
}

fn stage2(cfg: &RunConfig, dir: &Path, data: &PreparedData, m: &mut RunManifest) -> Result<()> {
    let mut rng = stage_rng(cfg.seed, 2);
    let rl = &cfg.stage2.rl;
    let mut model = ReconModel::<f64>::load(m.artifact(
        dir,
        &m.checkpoints.recon,
        "reconstruction checkpoint",
    )?)?;
    let reference = m
        .stage1_loss
        .ok_or_else(|| Error::Checkpoint("manifest lacks the stage 1 loss".into()))?;
    let probe: Vec<usize> = (0..rl.batch_size.min(data.train_windows.len())).collect();
    let width = (rl.band_up - rl.band_low) * reference;
    let calibrated = match (rl.eta_pos, rl.eta_neg) {
        (Some(p), Some(n)) => (p, n),
        (p, n) => {
            let eta = calibrate_step(
                &mut model,
                &data.train_windows.batch(&probe)?,
                width,
                rl.eta_fraction,
            )?;
            (p.unwrap_or(eta), n.unwrap_or(eta))
        }
    };
    let band = BandConfig::around(
        reference,
        rl.band_low,
        rl.band_up,
        calibrated.0,
        calibrated.1,
    )?;
    log::info!(
        "stage2: band [{:.5}, {:.5}], eta_pos {:.3e}, eta_neg {:.3e}",
        band.l_low,
        band.l_up,
        band.eta_pos,
        band.eta_neg
    );
    let mut agent = new_agent(rl, &band, &mut rng)?;
    let out = run_stage2_rl(
        &mut model,
        &mut agent,
        &data.train_windows,
        rl,
        &band,
        &mut rng,
    )?;
    log::info!(
        "stage2: {} steps, {:.3} in band, {} negatives",
        out.summary.steps,
        out.summary.in_band_fraction,
        out.summary.negatives
    );
    write_trajectory_csv(dir.join(TRAJECTORY_FILE), &out.trajectory, &band)?;
    out.pools.save(dir.join(POOLS_FILE))?;
    m.trajectory = Some(TRAJECTORY_FILE.into());
    m.checkpoints.pools = Some(POOLS_FILE.into());
    m.band = Some(band);
    m.histories.rl = Some(out.summary);

    let pools = Pools::<f64>::load(dir.join(POOLS_FILE))?;
    let ec = EncoderConfig {
        window: cfg.window.width,
        dims: data.train.dims(),
        hidden: cfg.stage2.encoder_hidden,
        embed: cfg.stage2.embed_dim,
    };
    let mut encoder = TripletEncoder::<f64>::new(ec, &mut rng)?;
    let history = train_stage2(&mut encoder, &pools, &cfg.stage2.encoder, &mut rng)?;
    if let (Some(first), Some(last)) = (history.first(), history.last()) {
        log::info!(
            "stage2: triplet loss {:.5} -> {:.5}",
            first.triplet,
            last.triplet
        );
    }
    encoder.save(dir.join(ENCODER_FILE))?;
    m.checkpoints.encoder = Some(ENCODER_FILE.into());
    m.histories.stage2 = history;
    Ok(())
}

fn stage3(cfg: &RunConfig, dir: &Path, m: &mut RunManifest) -> Result<()> {
    let mut rng = stage_rng(cfg.seed, 3);
    let encoder = TripletEncoder::<f64>::load(m.artifact(
        dir,
        &m.checkpoints.encoder,
        "encoder checkpoint",
    )?)?;
    let pools = Pools::<f64>::load(m.artifact(dir, &m.checkpoints.pools, "pool checkpoint")?)?;
    let normal = pools.unique_positives()?;
    let pseudo = pools.negatives_tensor()?;
    let mut bank = init_prototypes(encoder, &normal, cfg.stage3.bank.clone(), &mut rng)?;
    let history = train_stage3(&mut bank, &normal, &pseudo, &cfg.stage3.train, &mut rng)?;
    if let (Some(first), Some(last)) = (history.first(), history.last()) {
        log::info!("stage3: total loss {:.5} -> {:.5}", first.total, last.total);
    }
    bank.save(dir.join(BANK_FILE))?;
    m.checkpoints.bank = Some(BANK_FILE.into());
    m.histories.stage3 = history;
    Ok(())
}

#[derive(Serialize)]
struct ScoreRow {
    start: usize,
    score: f64,
    label: Option<u8>,
    prediction: u8,
}

/// Scores of a bank over a window set.
pub fn score_set(bank: &PrototypeBank<f64>, windows: &WindowSet<f64>) -> Result<ScoreSeries> {
    let idx: Vec<usize> = (0..windows.len()).collect();
    let mut scores = Vec::with_capacity(windows.len());
    for chunk in idx.chunks(512) {
        scores.extend(bank.score_windows(&windows.batch(chunk)?)?);
    }
    ScoreSeries::new(windows.starts().to_vec(), scores)
}

pub fn write_scores_csv(
    path: &Path,
    series: &ScoreSeries,
    labels: Option<&[u8]>,
    threshold: f64,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (i, (&start, &score)) in series.starts.iter().zip(&series.scores).enumerate() {
        w.serialize(ScoreRow {
            start,
            score,
            label: labels.map(|l| l[i]),
            prediction: u8::from(score >= threshold),
        })?;
    }
    w.flush()?;
    Ok(())
}

fn evaluate(cfg: &RunConfig, dir: &Path, data: &PreparedData, m: &mut RunManifest) -> Result<()> {
    let bank =
        PrototypeBank::<f64>::load(m.artifact(dir, &m.checkpoints.bank, "prototype bank")?)?;
    let train_scores = score_set(&bank, &data.train_windows)?;
    let threshold = pick_threshold(&train_scores.scores, cfg.eval.quantile)?;
    let test_scores = score_set(&bank, &data.test_windows)?;
    let labels = data
        .test_windows
        .labels()
        .ok_or_else(|| Error::invalid("test split has no labels to evaluate against"))?;
    let report = EvalReport::evaluate(&test_scores.scores, labels, threshold)?;
    log::info!(
        "eval: AUC {:.4}, TP {} TN {} FP {} FN {}",
        report.auc,
        report.tp,
        report.tn,
        report.fp,
        report.fn_
    );
    write_scores_csv(
        &dir.join(SCORES_FILE),
        &test_scores,
        Some(labels),
        threshold,
    )?;
    write_atomic(
        &dir.join(REPORT_FILE),
        serde_json::to_string_pretty(&report)?.as_bytes(),
    )?;
    m.scores = Some(SCORES_FILE.into());
    m.report = Some(report);
    Ok(())
}
