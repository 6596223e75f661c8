use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use serde::Serialize;

use mergelab::ais::{obs, AisModel, HorizonPrediction, Variant};
use mergelab::dynamics::crossing_time;
use mergelab::evaluation::{
    episode_csv_string, estimate_ap_bounds, is_safe_times, monte_carlo, run_episode,
    simulate_initial, ApBounds, Controller, EpisodeLog, SafetyTable,
};
use mergelab::training::{
    generate_dataset, load_trajectory_csv, target_at, train, Dataset, EpisodePredictor,
    GenerationMode, OracleStub, RmseReport, Schema, TrainingReport,
};
use mergelab::Error;

use crate::{Context, Outputs};

fn json_doc<T: Serialize>(ctx: &Context, key: &str, value: &T) -> Result<Vec<u8>> {
    let meta: serde_json::Map<String, serde_json::Value> = ctx
        .meta()
        .into_iter()
        .map(|(k, v)| (k, serde_json::Value::String(v)))
        .collect();
    let mut doc = serde_json::Map::new();
    doc.insert("meta".into(), meta.into());
    doc.insert(key.into(), serde_json::to_value(value)?);
    let mut text = serde_json::to_string_pretty(&serde_json::Value::Object(doc))?;
    text.push('\n');
    Ok(text.into_bytes())
}

fn meta_comments(ctx: &Context) -> String {
    ctx.meta().iter().map(|(k, v)| format!("# {k}: {v}\n")).collect()
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    load_trajectory_csv(path).with_context(|| format!("cannot load dataset {}", path.display()))
}

fn load_model(path: &Path) -> Result<AisModel> {
    AisModel::load(path).with_context(|| format!("cannot load model {}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerateSummary {
    pub path: PathBuf,
    pub episodes: usize,
    /// Episodes whose crossing-time gap is below `tau_safe`.
    pub unsafe_fraction: f64,
}

/// Simulates `n` merge episodes and writes them as a trajectory CSV.
pub fn cmd_generate(ctx: &Context, mode: GenerationMode, n: usize) -> Result<GenerateSummary> {
    if n == 0 {
        bail!(Error::Usage("--n must be at least 1".into()));
    }
    let c = &ctx.config;
    let data = generate_dataset(mode, n, c.seed, &c.scenario, &c.style_range)?;
    let z_c = c.scenario.z_c;
    let unsafe_count = data
        .episodes
        .iter()
        .filter(|e| {
            let t1 = crossing_time(&e.column(obs::Z1), e.dt, z_c);
            let t2 = crossing_time(&e.column(obs::Z2), e.dt, z_c);
            !is_safe_times(t1, t2, c.evaluation.tau_safe)
        })
        .count();
    let mut meta = ctx.meta();
    meta.push(("mode".into(), format!("{mode:?}").to_lowercase()));
    meta.push(("episodes".into(), n.to_string()));
    let path = c.paths.dataset();
    let mut out = Outputs::new();
    out.write(&path, data.to_csv_string(&meta).as_bytes())?;
    out.commit();
    Ok(GenerateSummary {
        path,
        episodes: data.len(),
        unsafe_fraction: unsafe_count as f64 / n as f64,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub model_path: PathBuf,
    pub loss_path: PathBuf,
    pub report_path: PathBuf,
    pub report: TrainingReport,
}

fn default_variant(schema: Schema) -> Variant {
    match schema {
        Schema::Merge => Variant::Merge,
        Schema::Ngsim => Variant::Ngsim,
    }
}

/// Trains a model on the configured dataset. Writes the best model, a
/// per-epoch loss CSV and the training report.
pub fn cmd_train(ctx: &Context, variant: Option<Variant>) -> Result<TrainSummary> {
    let c = &ctx.config;
    let data_path = c.paths.dataset();
    let data = load_dataset(&data_path)?;
    let variant = variant.unwrap_or_else(|| default_variant(data.schema));
    let mut tc = c.train.clone();
    tc.seed = c.seed;
    let (model, report) = train(&data, variant, &tc)
        .with_context(|| format!("training on {}", data_path.display()))?;

    let mut csv = meta_comments(ctx);
    csv.push_str("epoch,train_loss,val_loss\n");
    let _ = writeln!(csv, "0,{},{}", report.initial_train_loss, report.initial_val_loss);
    for e in &report.epochs {
        let _ = writeln!(csv, "{},{},{}", e.epoch, e.train_loss, e.val_loss);
    }

    let model_path = c.paths.model();
    let loss_path = ctx.out_path("training_loss.csv");
    let report_path = ctx.out_path("training_report.json");
    let mut out = Outputs::new();
    out.write(&model_path, model.to_json()?.as_bytes())?;
    out.write(&loss_path, csv.as_bytes())?;
    out.write(&report_path, &json_doc(ctx, "report", &report)?)?;
    out.commit();
    Ok(TrainSummary {
        model_path,
        loss_path,
        report_path,
        report,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictSummary {
    pub predictions_path: PathBuf,
    pub rmse_path: PathBuf,
    pub rmse: RmseReport,
    /// Merge variants only.
    pub ap_bounds: Option<ApBounds>,
}

#[derive(Serialize)]
struct PredictDoc<'a> {
    source: &'a str,
    rmse: &'a RmseReport,
    ap_bounds: Option<&'a ApBounds>,
}

fn predictions_csv<P: EpisodePredictor + ?Sized>(
    ctx: &Context,
    model: &P,
    data: &Dataset,
) -> Result<String> {
    let mut s = meta_comments(ctx);
    let v = model.variant();
    let h = model.horizon();
    if v.is_merge() {
        s.push_str("episode_id,t,k,z_pred,z_ref,v_pred,v_ref\n");
    } else {
        s.push_str("episode_id,t,lateral_pred,lateral_ref,longitudinal_pred,longitudinal_ref\n");
    }
    for ep in &data.episodes {
        let preds = model.predict_episode(ep)?;
        for (t, p) in preds.iter().enumerate() {
            let time = t as f64 * ep.dt;
            let target = target_at(v, h, ep, t).unwrap_or_default();
            match p {
                HorizonPrediction::Merge { z_hat, v_hat } => {
                    for k in 0..h {
                        let _ = writeln!(
                            s,
                            "{},{time},{},{},{},{},{}",
                            ep.id,
                            k + 1,
                            z_hat[k],
                            target[k],
                            v_hat[k],
                            target[h + k]
                        );
                    }
                }
                HorizonPrediction::Ngsim {
                    lateral,
                    longitudinal,
                } => {
                    let _ = writeln!(
                        s,
                        "{},{time},{lateral},{},{longitudinal},{}",
                        ep.id, target[0], target[1]
                    );
                }
            }
        }
    }
    Ok(s)
}

/// Replays the dataset through a model (or the oracle stub) and writes the
/// per-step predictions next to the recorded future, plus aggregate RMSE.
pub fn cmd_predict(ctx: &Context, stub_oracle: bool) -> Result<PredictSummary> {
    let c = &ctx.config;
    let data = load_dataset(&c.paths.dataset())?;
    let model_holder;
    let stub;
    let (predictor, source): (&dyn EpisodePredictor, String) = if stub_oracle {
        let variant = default_variant(data.schema);
        let horizon = if variant == Variant::Ngsim { 1 } else { c.scenario.horizon };
        stub = OracleStub { variant, horizon };
        (&stub, "oracle-stub".into())
    } else {
        let path = c.paths.model();
        model_holder = load_model(&path)?;
        (&model_holder, path.display().to_string())
    };
    if !data.schema.matches(predictor.variant()) {
        bail!(Error::Variant(format!(
            "{} model cannot predict {}-schema data in {}",
            predictor.variant().name(),
            format!("{:?}", data.schema).to_lowercase(),
            c.paths.dataset().display()
        )));
    }
    let rmse = mergelab::training::evaluate_rmse(predictor, &data)?;
    let ap_bounds = if predictor.variant().is_merge() {
        Some(estimate_ap_bounds(predictor, &data, &c.scenario)?)
    } else {
        None
    };
    let csv = predictions_csv(ctx, predictor, &data)?;
    let doc = PredictDoc {
        source: &source,
        rmse: &rmse,
        ap_bounds: ap_bounds.as_ref(),
    };
    let predictions_path = ctx.out_path("predictions.csv");
    let rmse_path = ctx.out_path("rmse.json");
    let mut out = Outputs::new();
    out.write(&predictions_path, csv.as_bytes())?;
    out.write(&rmse_path, &json_doc(ctx, "prediction", &doc)?)?;
    out.commit();
    Ok(PredictSummary {
        predictions_path,
        rmse_path,
        rmse,
        ap_bounds,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulateSummary {
    pub csv_path: PathBuf,
    pub json_path: PathBuf,
    pub log: EpisodeLog,
}

/// One closed-loop episode of the iterative controller against a named
/// human-driver preset, started from the seeded demonstration scenario.
pub fn cmd_simulate(ctx: &Context, preset: &str) -> Result<SimulateSummary> {
    let c = &ctx.config;
    if preset.is_empty() || !preset.chars().all(|ch| ch.is_ascii_alphanumeric() || "-_".contains(ch)) {
        bail!(Error::Usage(format!("invalid preset name `{preset}`")));
    }
    let w = c.preset(preset)?;
    let model = load_model(&c.paths.model())?;
    let controller = Controller::IterativeMpc {
        model: &model,
        j_max: c.evaluation.j_max,
    };
    let init = simulate_initial(c.seed);
    let log = run_episode(controller, &w, init, &c.scenario, c.seed, c.evaluation.tau_safe)?;
    let mut meta = ctx.meta();
    meta.push(("preset".into(), preset.into()));
    let stem = format!("simulate_{preset}_seed{}", c.seed);
    let csv_path = ctx.out_path(&format!("{stem}.csv"));
    let json_path = ctx.out_path(&format!("{stem}.json"));
    let mut out = Outputs::new();
    out.write(&csv_path, episode_csv_string(&log, &meta).as_bytes())?;
    out.write(&json_path, &json_doc(ctx, "episode", &log)?)?;
    out.commit();
    Ok(SimulateSummary {
        csv_path,
        json_path,
        log,
    })
}

/// Monte-Carlo safety table of each model over the configured ρ values.
/// Models are labelled by file stem.
pub fn cmd_evaluate(ctx: &Context, models: &[PathBuf]) -> Result<(SafetyTable, Vec<PathBuf>)> {
    let c = &ctx.config;
    if models.is_empty() {
        bail!(Error::Usage("at least one --model is required".into()));
    }
    let mut loaded = Vec::with_capacity(models.len());
    for p in models {
        let label = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| p.display().to_string());
        if loaded.iter().any(|(l, _)| *l == label) {
            bail!(Error::Usage(format!("two models share the label `{label}`")));
        }
        loaded.push((label, load_model(p)?));
    }
    let mc = c.mc_config();
    let mut table = SafetyTable::default();
    for (label, m) in &loaded {
        table.extend(
            monte_carlo(m, label, &mc, &c.scenario, &c.style_range)
                .with_context(|| format!("evaluating {label}"))?,
        );
    }
    let json_path = ctx.out_path("safety_table.json");
    let text_path = ctx.out_path("safety_table.txt");
    let mut text = meta_comments(ctx);
    text.push_str(&table.to_text());
    let mut out = Outputs::new();
    out.write(&json_path, table.to_json(&ctx.meta()).as_bytes())?;
    out.write(&text_path, text.as_bytes())?;
    Ok((table, out.commit()))
}
