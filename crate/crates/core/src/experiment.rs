//! Seeded end-to-end experiments: simulate a sequence, train on the even
//! frames, evaluate on the odd frames and write the report files.
//!
//! Seeds below the master seed: truth simulation `[1]`, training `[2]`,
//! test-scan rendering `[3, frame]`, point-cloud sampling `[4, frame]`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::decoder::{
    emit_deterministic, emit_probabilistic, fit, learning_rate, render_scan, Decoder, DecoderConfig,
    DecoderVariant, DecoderWeights, FitResult, TrainConfig,
};
use crate::error::{Error, Result};
use crate::geometry::{RadarConfig, SensorPose};
use crate::matching::{GospaParams, SetMetrics};
use crate::rendering::RenderParams;
use crate::rfs::DensityFamily;
use crate::rng::derive_seed;
use crate::scene::Scene;
use crate::synth::{simulate_sequence, split_even_odd, Trajectory, TruthModel};

fn default_gates() -> Vec<Option<f64>> {
    vec![Some(30.0), Some(80.0), None]
}

/// `null` in a gate list means no range cap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scene: PathBuf,
    #[serde(default)]
    pub radar: RadarConfig,
    #[serde(default)]
    pub render: RenderParams,
    #[serde(default)]
    pub decoder: DecoderConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub trajectory: Trajectory,
    #[serde(default)]
    pub truth: TruthModel,
    #[serde(default = "default_gates")]
    pub gates: Vec<Option<f64>>,
    #[serde(default)]
    pub gospa: GospaParams,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn new(scene: PathBuf, output_dir: PathBuf, seed: u64) -> Self {
        Self {
            scene,
            radar: RadarConfig::default(),
            render: RenderParams::default(),
            decoder: DecoderConfig::default(),
            train: TrainConfig::default(),
            trajectory: Trajectory::default(),
            truth: TruthModel::default(),
            gates: default_gates(),
            gospa: GospaParams::default(),
            output_dir,
            seed,
        }
    }

    /// Parses a config file. Relative scene and output paths are taken
    /// relative to the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(dir) = path.parent() {
            if cfg.scene.is_relative() {
                cfg.scene = dir.join(&cfg.scene);
            }
            if cfg.output_dir.is_relative() {
                cfg.output_dir = dir.join(&cfg.output_dir);
            }
        }
        cfg.validate()?;
        if !cfg.scene.is_file() {
            return Err(Error::Config(format!("scene file {} not found", cfg.scene.display())));
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.radar.validate()?;
        self.decoder.validate()?;
        self.train.validate()?;
        self.truth.validate()?;
        self.gospa.validate()?;
        validate_gates(&self.gates)?;
        if self.trajectory.frames < 2 {
            return Err(Error::Config("need at least two frames for a train/test split".into()));
        }
        Ok(())
    }
}

fn validate_gates(gates: &[Option<f64>]) -> Result<()> {
    if gates.is_empty() {
        return Err(Error::Config("at least one metric gate is required".into()));
    }
    let as_f = |g: &Option<f64>| g.unwrap_or(f64::INFINITY);
    if gates.iter().any(|g| !(as_f(g) > 0.0)) {
        return Err(Error::Config("metric gates must be positive".into()));
    }
    if gates.windows(2).any(|w| !(as_f(&w[0]) < as_f(&w[1]))) {
        return Err(Error::Config("metric gates must be strictly ascending".into()));
    }
    Ok(())
}

/// A simulated sequence with every truth cloud in its sensor frame.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub scene: Scene,
    pub radar: RadarConfig,
    pub render: RenderParams,
    pub trajectory: Trajectory,
    pub truth_model: TruthModel,
    pub poses: Vec<SensorPose>,
    pub truths: Vec<PointCloud>,
    /// Master seed.
    pub seed: u64,
}

impl Benchmark {
    pub fn simulate(
        scene: Scene,
        radar: RadarConfig,
        render: RenderParams,
        trajectory: Trajectory,
        truth_model: TruthModel,
        seed: u64,
    ) -> Result<Self> {
        radar.validate()?;
        let poses = trajectory.poses()?;
        let truths = simulate_sequence(&scene, &poses, &radar, &truth_model, derive_seed(seed, &[1]))?;
        Ok(Self {
            scene,
            radar,
            render,
            trajectory,
            truth_model,
            poses,
            truths,
            seed,
        })
    }

    /// The same sequence with the ego path moved sideways by `offset`
    /// meters; truths are simulated at the new poses.
    pub fn shifted(&self, offset: f64) -> Result<Self> {
        let trajectory = Trajectory {
            lateral: self.trajectory.lateral + offset,
            ..self.trajectory.clone()
        };
        Self::simulate(
            self.scene.clone(),
            self.radar.clone(),
            self.render,
            trajectory,
            self.truth_model.clone(),
            self.seed,
        )
    }

    pub fn train_frames(&self) -> Vec<usize> {
        split_even_odd(&(0..self.poses.len()).collect::<Vec<_>>()).0
    }

    pub fn test_frames(&self) -> Vec<usize> {
        split_even_odd(&(0..self.poses.len()).collect::<Vec<_>>()).1
    }

    /// Training seed used for a given master seed.
    pub fn train_config(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, &[2]),
            ..base.clone()
        }
    }

    pub fn fit(&self, decoder: &DecoderConfig, train: &TrainConfig) -> Result<FitResult> {
        let frames = self.train_frames();
        let poses: Vec<_> = frames.iter().map(|&k| self.poses[k].clone()).collect();
        let truths: Vec<_> = frames.iter().map(|&k| self.truths[k].clone()).collect();
        fit(&self.scene, &poses, &truths, &self.radar, &self.render, decoder, &self.train_config(train))
    }

    /// Weights a fit starts from, for iteration-0 evaluation.
    pub fn initial_weights(&self, decoder: &DecoderConfig, train: &TrainConfig) -> Result<DecoderWeights> {
        let seed = derive_seed(self.train_config(train).seed, &[0]);
        DecoderWeights::init(decoder, self.radar.num_rays(), self.radar.max_range, seed)
    }

    /// Metrics of the held-out frames under every gate.
    pub fn evaluate(&self, weights: &DecoderWeights, gates: &[Option<f64>], gospa: &GospaParams) -> Result<Evaluation> {
        let decoder = Decoder::new(weights.clone());
        let mut scans = Vec::new();
        for k in self.test_frames() {
            let renders = render_scan(
                &self.scene,
                &self.poses[k],
                &self.radar,
                &self.render,
                derive_seed(self.seed, &[3, k as u64]),
            )?;
            let params = decoder.decode_renders(&renders)?;
            let pred = if weights.config.probabilistic {
                emit_probabilistic(&params, self.radar.density_family, derive_seed(self.seed, &[4, k as u64]))?
            } else {
                emit_deterministic(&params, self.radar.confidence_threshold)?
            };
            for &gate in gates {
                let cap = gate.unwrap_or(f64::INFINITY);
                let (p, t) = (pred.gated(cap), self.truths[k].gated(cap));
                scans.push(ScanMetrics {
                    frame: k,
                    gate,
                    predicted: p.len(),
                    truth: t.len(),
                    metrics: SetMetrics::compute(&p, &t, gospa)?,
                });
            }
        }
        let summaries = gates.iter().map(|&g| GateSummary::from_scans(g, &scans)).collect();
        Ok(Evaluation { scans, summaries })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanMetrics {
    pub frame: usize,
    pub gate: Option<f64>,
    pub predicted: usize,
    pub truth: usize,
    pub metrics: SetMetrics,
}

/// Per-gate medians over held-out scans. Chamfer and EMD skip scans where
/// either set is empty; `undefined_scans` counts them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateSummary {
    pub gate: Option<f64>,
    pub chamfer: Option<f64>,
    pub emd: Option<f64>,
    pub gospa: f64,
    pub gospa_localization: f64,
    pub gospa_missed: f64,
    pub gospa_false: f64,
    pub undefined_scans: usize,
}

/// Median with the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

impl GateSummary {
    fn from_scans(gate: Option<f64>, scans: &[ScanMetrics]) -> Self {
        let rows: Vec<&ScanMetrics> = scans.iter().filter(|s| s.gate == gate).collect();
        let pick = |f: &dyn Fn(&ScanMetrics) -> Option<f64>| median(&rows.iter().filter_map(|s| f(s)).collect::<Vec<_>>());
        Self {
            gate,
            chamfer: pick(&|s| s.metrics.chamfer),
            emd: pick(&|s| s.metrics.emd),
            gospa: pick(&|s| Some(s.metrics.gospa.total)).unwrap_or(0.0),
            gospa_localization: pick(&|s| Some(s.metrics.gospa.localization)).unwrap_or(0.0),
            gospa_missed: pick(&|s| Some(s.metrics.gospa.missed)).unwrap_or(0.0),
            gospa_false: pick(&|s| Some(s.metrics.gospa.false_detections)).unwrap_or(0.0),
            undefined_scans: rows.iter().filter(|s| s.metrics.chamfer.is_none()).count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub scans: Vec<ScanMetrics>,
    pub summaries: Vec<GateSummary>,
}

impl Evaluation {
    /// Summary of the ungated (or widest) gate.
    pub fn full(&self) -> &GateSummary {
        self.summaries.last().expect("at least one gate")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateReport {
    pub gate: Option<f64>,
    pub initial: GateSummary,
    pub trained: GateSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seed: u64,
    pub variant: DecoderVariant,
    pub probabilistic: bool,
    pub density_family: DensityFamily,
    pub num_rays: usize,
    pub train_frames: Vec<usize>,
    pub test_frames: Vec<usize>,
    pub iterations: usize,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub gates: Vec<GateReport>,
}

/// Everything an experiment produces, before it is written out.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub report: ExperimentReport,
    pub fit: FitResult,
    pub initial: Evaluation,
    pub trained: Evaluation,
}

/// Runs the experiment in memory.
pub fn execute(cfg: &ExperimentConfig, scene: Scene) -> Result<ExperimentOutcome> {
    cfg.validate().map_err(|e| e.at_stage("config"))?;
    if scene.feature_dim != cfg.decoder.feature_dim {
        return Err(Error::Config(format!(
            "scene features have {} channels, decoder expects {}",
            scene.feature_dim, cfg.decoder.feature_dim
        ))
        .at_stage("config"));
    }
    let bench = Benchmark::simulate(
        scene,
        cfg.radar.clone(),
        cfg.render,
        cfg.trajectory.clone(),
        cfg.truth.clone(),
        cfg.seed,
    )
    .map_err(|e| e.at_stage("simulate"))?;
    let initial_weights = bench
        .initial_weights(&cfg.decoder, &cfg.train)
        .map_err(|e| e.at_stage("fit"))?;
    let fit = bench.fit(&cfg.decoder, &cfg.train).map_err(|e| e.at_stage("fit"))?;
    let initial = bench
        .evaluate(&initial_weights, &cfg.gates, &cfg.gospa)
        .map_err(|e| e.at_stage("evaluate"))?;
    let trained = bench
        .evaluate(&fit.weights, &cfg.gates, &cfg.gospa)
        .map_err(|e| e.at_stage("evaluate"))?;
    let report = ExperimentReport {
        seed: cfg.seed,
        variant: cfg.decoder.variant,
        probabilistic: cfg.decoder.probabilistic,
        density_family: cfg.radar.density_family,
        num_rays: cfg.radar.num_rays(),
        train_frames: bench.train_frames(),
        test_frames: bench.test_frames(),
        iterations: cfg.train.iterations,
        initial_loss: fit.loss_curve.first().copied(),
        final_loss: fit.loss_curve.last().copied(),
        gates: initial
            .summaries
            .iter()
            .zip(&trained.summaries)
            .map(|(a, b)| GateReport {
                gate: a.gate,
                initial: a.clone(),
                trained: b.clone(),
            })
            .collect(),
    };
    Ok(ExperimentOutcome {
        report,
        fit,
        initial,
        trained,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `iteration,learning_rate,loss`
pub fn loss_curve_csv(curve: &[f64], train: &TrainConfig) -> String {
    let mut out = String::from("iteration,learning_rate,loss\n");
    for (k, loss) in curve.iter().enumerate() {
        let _ = writeln!(out, "{k},{},{loss}", learning_rate(train, k));
    }
    out
}

/// One row per held-out scan, gate and stage (`initial` or `trained`).
pub fn metrics_csv(initial: &Evaluation, trained: &Evaluation) -> String {
    let mut out = String::from(
        "stage,frame,gate,predicted,truth,chamfer,emd,gospa,gospa_localization,gospa_missed,gospa_false\n",
    );
    for (stage, eval) in [("initial", initial), ("trained", trained)] {
        for s in &eval.scans {
            let g = &s.metrics.gospa;
            let _ = writeln!(
                out,
                "{stage},{},{},{},{},{},{},{},{},{},{}",
                s.frame,
                opt(s.gate),
                s.predicted,
                s.truth,
                opt(s.metrics.chamfer),
                opt(s.metrics.emd),
                g.total,
                g.localization,
                g.missed,
                g.false_detections
            );
        }
    }
    out
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(|e| Error::io(path, e))
}

/// Runs the experiment and writes `report.json`, `loss_curve.csv`,
/// `metrics.csv`, `config.json` and the trained weights (`decoder.nrdr`
/// with its `decoder.json` sidecar) into the output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let scene = Scene::load(&cfg.scene).map_err(|e| e.at_stage("scene"))?;
    let out = execute(cfg, scene)?;
    let dir = &cfg.output_dir;
    let written = (|| {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write(dir, "report.json", &(serde_json::to_string_pretty(&out.report)? + "\n"))?;
        write(dir, "loss_curve.csv", &loss_curve_csv(&out.fit.loss_curve, &cfg.train))?;
        write(dir, "metrics.csv", &metrics_csv(&out.initial, &out.trained))?;
        write(dir, "config.json", &(cfg.to_json()? + "\n"))?;
        out.fit.weights.save(&dir.join("decoder"))
    })();
    written.map_err(|e| e.at_stage("write"))?;
    Ok(out.report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::trivial_scene;

    fn quick(dir: &Path, scene: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::new(scene.to_path_buf(), dir.to_path_buf(), 5);
        cfg.decoder = DecoderConfig {
            variant: DecoderVariant::Tabular,
            feature_dim: 8,
            ..DecoderConfig::default()
        };
        cfg.train = TrainConfig {
            iterations: 20,
            warmup_steps: 5,
            ..TrainConfig::default()
        };
        cfg.trajectory.frames = 4;
        cfg
    }

    fn scene_file(dir: &Path) -> PathBuf {
        let p = dir.join("scene.json");
        std::fs::write(&p, trivial_scene(8, 1).unwrap().to_json().unwrap()).unwrap();
        p
    }

    #[test]
    fn gates_must_ascend() {
        assert!(validate_gates(&default_gates()).is_ok());
        assert!(validate_gates(&[Some(80.0), Some(30.0)]).is_err());
        assert!(validate_gates(&[None, Some(30.0)]).is_err());
        assert!(validate_gates(&[Some(-1.0)]).is_err());
        assert!(validate_gates(&[]).is_err());
    }

    #[test]
    fn median_examples() {
        assert_eq!(median(&[]), None);
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
    }

    #[test]
    fn trivial_tabular_run_reports_finite_chamfer() {
        let dir = tempfile::tempdir().unwrap();
        let scene = scene_file(dir.path());
        for probabilistic in [true, false] {
            let mut cfg = quick(&dir.path().join(format!("out{probabilistic}")), &scene);
            cfg.decoder.probabilistic = probabilistic;
            if !probabilistic {
                // Deterministic emission needs existence above the threshold.
                cfg.train.lr_max = 0.2;
                cfg.train.iterations = 60;
            }
            let report = run_experiment(&cfg).unwrap();
            let full = &report.gates.last().unwrap().trained;
            assert!(full.chamfer.unwrap().is_finite(), "{report:?}");
            for f in ["report.json", "loss_curve.csv", "metrics.csv", "config.json", "decoder.nrdr", "decoder.json"] {
                assert!(cfg.output_dir.join(f).is_file(), "{f}");
            }
        }
    }

    #[test]
    fn same_seed_gives_identical_files() {
        let dir = tempfile::tempdir().unwrap();
        let scene = scene_file(dir.path());
        let read = |d: &Path| {
            ["report.json", "loss_curve.csv", "metrics.csv", "decoder.nrdr"]
                .map(|f| std::fs::read(d.join(f)).unwrap())
        };
        let a = quick(&dir.path().join("a"), &scene);
        let b = quick(&dir.path().join("b"), &scene);
        run_experiment(&a).unwrap();
        run_experiment(&b).unwrap();
        assert_eq!(read(&a.output_dir), read(&b.output_dir));
    }

    #[test]
    fn config_round_trips_and_rejects_unknown_keys() {
        let cfg = ExperimentConfig::new("s.json".into(), "out".into(), 3);
        let back: ExperimentConfig = serde_json::from_str(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
        let mut v: serde_json::Value = serde_json::from_str(&cfg.to_json().unwrap()).unwrap();
        v["bogus"] = 1.into();
        assert!(serde_json::from_str::<ExperimentConfig>(&v.to_string()).is_err());
        let minimal: ExperimentConfig =
            serde_json::from_str(r#"{"scene": "s.json", "output_dir": "o", "seed": 1}"#).unwrap();
        assert_eq!(minimal.gates, default_gates());
    }

    #[test]
    fn load_resolves_scene_next_to_config() {
        let dir = tempfile::tempdir().unwrap();
        scene_file(dir.path());
        let path = dir.path().join("exp.json");
        std::fs::write(&path, r#"{"scene": "scene.json", "output_dir": "o", "seed": 1}"#).unwrap();
        let cfg = ExperimentConfig::load(&path).unwrap();
        assert_eq!(cfg.scene, dir.path().join("scene.json"));
        std::fs::write(&path, r#"{"scene": "missing.json", "output_dir": "o", "seed": 1}"#).unwrap();
        assert!(matches!(ExperimentConfig::load(&path), Err(Error::Config(_))));
    }

    #[test]
    fn feature_width_mismatch_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = quick(dir.path(), &scene_file(dir.path()));
        cfg.decoder.feature_dim = 16;
        let err = execute(&cfg, trivial_scene(8, 1).unwrap()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
