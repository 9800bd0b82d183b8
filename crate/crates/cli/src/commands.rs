use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, ensure, Context, Result};
use nneb_core::data::{synth_prices, PriceSeries, SERIES_SCHEMA, STEPS_PER_HOUR};
use nneb_core::env::MarketData;
use nneb_core::evaluate::{evaluate_with, test_market, Evaluation, IdleBidder, PolicyBidder};
use nneb_core::market::{validate_bid, BidSchedule};
use nneb_core::oracle::{hindsight_dp, profit_ratio, OracleResult};
use nneb_core::policy::{monotonicity_metric, BidMode, PolicyNetwork};
use nneb_core::ppo::{Trainer, TrainingCurve};
use nneb_core::quantizer::{collect_actions, kmeans_1d, reference_levels};
use serde_json::json;

use crate::config::{AppConfig, Window};

const CURVE_SCHEMA: &str = "nneb.training_curve.v1";
const LEVELS_SCHEMA: &str = "nneb.reference_levels.v1";
const ORACLE_SCHEMA: &str = "nneb.oracle.v1";
const EVALUATION_SCHEMA: &str = "nneb.evaluation.v1";
const TRACE_SCHEMA: &str = "nneb.trace.v1";

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// `# schema:` and `# config:` lines ahead of a CSV body.
fn write_csv_preamble(w: &mut impl Write, schema: &str, config: &serde_json::Value) -> Result<()> {
    writeln!(w, "# schema: {schema}")?;
    writeln!(w, "# config: {config}")?;
    Ok(())
}

fn save_curve(path: &Path, curve: &TrainingCurve, config: &serde_json::Value) -> Result<()> {
    let mut w = create(path)?;
    write_csv_preamble(&mut w, CURVE_SCHEMA, config)?;
    curve.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn window_market(config: &AppConfig, window: Window) -> Result<(PriceSeries, MarketData)> {
    window_market_hours(config, window, None)
}

/// The window, cut to its first `hours` operating hours when given. Cutting
/// the end leaves every earlier observation unchanged.
fn window_market_hours(config: &AppConfig, window: Window, hours: Option<usize>) -> Result<(PriceSeries, MarketData)> {
    let (mut train, mut test) = config.split()?;
    if let Some(h) = hours {
        ensure!(h > 0, "--hours must be positive");
        let target = match window {
            Window::Train => &mut train,
            Window::Test => &mut test,
        };
        let n = (h * STEPS_PER_HOUR).min(target.len());
        *target = target.slice(0, n);
    }
    Ok(match window {
        Window::Train => {
            let m = MarketData::new(&train)?;
            (train, m)
        }
        Window::Test => {
            let m = test_market(&train, &test)?;
            (test, m)
        }
    })
}

fn window_json(series: &PriceSeries, window: Window) -> serde_json::Value {
    json!({
        "window": format!("{window:?}").to_lowercase(),
        "start": series.timestamp_string(0),
        "intervals": series.len(),
        "days": series.days(),
    })
}

fn load_policy(path: &Path) -> Result<PolicyNetwork> {
    PolicyNetwork::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Runs `trainer` to completion, logging each update.
fn drive(mut trainer: Trainer, stage: &str) -> Result<(PolicyNetwork, TrainingCurve)> {
    let mut curve = TrainingCurve::default();
    while !trainer.is_finished() {
        let row = trainer.update()?;
        log::info!(
            "{stage} update {} env_steps {} mean_reward {:.3} actor_loss {:.4} critic_loss {:.4} mono_metric {:.4}",
            row.update_index,
            row.env_steps,
            row.mean_reward,
            row.actor_loss,
            row.critic_loss,
            row.mono_metric
        );
        curve.rows.push(row);
    }
    Ok((trainer.policy().clone(), curve))
}

pub fn train(mut config: AppConfig, mode: BidMode, seed: u64, out: &Path, curve_out: Option<&Path>) -> Result<()> {
    config.train.seed = seed;
    let (train, _) = config.split()?;
    let snapshot = json!({
        "command": "train",
        "mode": mode,
        "seed": seed,
        "config": config.snapshot(),
    });
    log::info!("training {mode} on {} days with seed {seed}", train.days());
    let trainer = Trainer::new(config.train.clone(), &train, config.ess, mode)?;
    let (policy, curve) = drive(trainer, "train")?;
    policy
        .save(out, snapshot.clone())
        .with_context(|| format!("writing checkpoint {}", out.display()))?;
    if let Some(path) = curve_out {
        save_curve(path, &curve, &snapshot)?;
    }
    println!("wrote {} ({} updates)", out.display(), curve.rows.len());
    Ok(())
}

pub fn retrain(
    mut config: AppConfig,
    checkpoint: &Path,
    seed: u64,
    out: &Path,
    curve_out: Option<&Path>,
    levels_out: Option<&Path>,
) -> Result<()> {
    config.train.seed = seed;
    if let Some(steps) = config.retrain.total_steps {
        config.train.total_steps = steps;
    }
    let policy = load_policy(checkpoint)?;
    ensure!(
        policy.mode == BidMode::Nneb,
        "retraining needs an nneb checkpoint, {} holds {}",
        checkpoint.display(),
        policy.mode
    );
    let (train, _) = config.split()?;
    let market = Arc::new(MarketData::new(&train)?);
    let samples = collect_actions(
        &policy,
        market,
        config.retrain.action_samples,
        config.train.n_envs,
        seed,
    )?;
    let clustering = kmeans_1d(&samples, config.retrain.levels)?;
    let levels = reference_levels(&samples, config.retrain.levels, &policy.ess)?;
    log::info!("reference levels {:?} (sse {:.4})", levels.levels(), clustering.sse);
    let snapshot = json!({
        "command": "retrain",
        "checkpoint": checkpoint,
        "seed": seed,
        "config": config.snapshot(),
    });
    if let Some(path) = levels_out {
        write_json(
            path,
            &json!({
                "schema": LEVELS_SCHEMA,
                "config": snapshot,
                "samples": samples.len(),
                "sse": clustering.sse,
                "levels": levels.levels(),
            }),
        )?;
    }
    let trainer = Trainer::resume(config.train.clone(), policy, levels, &train)?;
    let (policy, curve) = drive(trainer, "retrain")?;
    policy
        .save(out, snapshot.clone())
        .with_context(|| format!("writing checkpoint {}", out.display()))?;
    if let Some(path) = curve_out {
        save_curve(path, &curve, &snapshot)?;
    }
    println!("wrote {} ({} updates)", out.display(), curve.rows.len());
    Ok(())
}

pub fn extract(config: AppConfig, checkpoint: &Path, out: &Path, window: Window, hours: Option<usize>) -> Result<()> {
    let policy = load_policy(checkpoint)?;
    ensure!(
        policy.mode == BidMode::Nneb,
        "bid extraction needs an nneb checkpoint, {} holds {}",
        checkpoint.display(),
        policy.mode
    );
    ensure!(
        policy.levels.is_some(),
        "{} has no reference levels; run `nneb retrain` first",
        checkpoint.display()
    );
    let ess = policy.ess;
    let (series, market) = window_market_hours(&config, window, hours)?;
    let bidder = PolicyBidder::with_grid_points(policy, config.extract.grid_points)?;
    let mut schedule = BidSchedule::new(json!({
        "command": "extract",
        "checkpoint": checkpoint,
        "data": window_json(&series, window),
        "config": config.snapshot(),
    }));
    let mut pairs = 0usize;
    let eval = evaluate_with(&bidder, &market, &ess, |t, bid| {
        validate_bid(&bid.curve, &ess).into_result()?;
        let deviation = bid.max_deviation.unwrap_or(0.0);
        if deviation != 0.0 {
            return Err(nneb_core::Error::InvalidParams(format!(
                "extracted bid at {} deviates from the policy by {deviation} MW",
                market.timestamp_string(t)
            )));
        }
        pairs += bid.curve.pairs.len();
        schedule.insert(market.timestamp_string(t), &bid.curve, bid.max_deviation);
        Ok(())
    })?;
    write_json(out, &serde_json::to_value(&schedule)?)?;
    println!(
        "wrote {} bids ({:.2} pairs per hour on average) to {}",
        eval.hours,
        pairs as f64 / eval.hours.max(1) as f64,
        out.display()
    );
    Ok(())
}

fn oracle_json(result: &OracleResult) -> serde_json::Value {
    json!({
        "profit": result.profit,
        "dp_value": result.dp_value,
        "soc_nodes": result.soc_nodes,
        "power_levels": result.power_levels,
    })
}

fn run_oracle(config: &AppConfig, prices: &[f64]) -> Result<OracleResult> {
    hindsight_dp(prices, &config.ess, config.oracle.soc_nodes, config.oracle.power_levels)
        .context("hindsight dynamic program (`oracle.soc_nodes`, `oracle.power_levels`)")
}

pub fn oracle(config: AppConfig, out: &Path, window: Window) -> Result<()> {
    let (series, _) = window_market(&config, window)?;
    let fine = run_oracle(&config, &series.values)?;
    // Halving the SoC resolution shows how far the grid is from converged.
    let coarse_nodes = (config.oracle.soc_nodes - 1) / 2 + 1;
    let coarse = hindsight_dp(&series.values, &config.ess, coarse_nodes.max(2), config.oracle.power_levels)?;
    let relative_change = if fine.profit != 0.0 {
        ((fine.profit - coarse.profit) / fine.profit).abs()
    } else {
        (fine.profit - coarse.profit).abs()
    };
    let schedule: Vec<serde_json::Value> = (0..series.len())
        .map(|t| {
            json!({
                "timestamp": series.timestamp_string(t),
                "price": series.values[t],
                "soc": fine.soc[t],
                "power": fine.schedule[t],
            })
        })
        .collect();
    write_json(
        out,
        &json!({
            "schema": ORACLE_SCHEMA,
            "config": config.snapshot(),
            "data": window_json(&series, window),
            "result": oracle_json(&fine),
            "refinement": {
                "coarse": oracle_json(&coarse),
                "relative_change": relative_change,
            },
            "schedule": schedule,
        }),
    )?;
    println!(
        "optimal profit {:.2} over {} days (coarse grid {:.2}, relative change {:.4})",
        fine.profit,
        series.days(),
        coarse.profit,
        relative_change
    );
    Ok(())
}

fn save_trace(path: &Path, eval: &Evaluation, market: &MarketData, config: &serde_json::Value) -> Result<()> {
    let mut w = create(path)?;
    write_csv_preamble(&mut w, TRACE_SCHEMA, config)?;
    eval.write_trace_csv(market, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn evaluate(
    config: AppConfig,
    checkpoints: &[std::path::PathBuf],
    out: &Path,
    trace_dir: Option<&Path>,
    window: Window,
) -> Result<()> {
    let (series, market) = window_market(&config, window)?;
    let optimum = run_oracle(&config, &series.values)?;
    let snapshot = json!({
        "command": "evaluate",
        "data": window_json(&series, window),
        "config": config.snapshot(),
    });
    let idle = evaluate_with(&IdleBidder, &market, &config.ess, |_, _| Ok(()))?;
    let mut rows = Vec::new();
    let mut table = vec![("optimal".to_string(), optimum.profit, Some(1.0), None)];
    for path in checkpoints {
        let policy = load_policy(path)?;
        if policy.ess != config.ess {
            bail!(
                "{} was trained for different storage parameters than the `ess` config section",
                path.display()
            );
        }
        let mode = policy.mode;
        let bidder = PolicyBidder::with_grid_points(policy, config.extract.grid_points)
            .with_context(|| format!("preparing {}", path.display()))?;
        let eval = evaluate_with(&bidder, &market, &config.ess, |_, _| Ok(()))?;
        let metric = if mode == BidMode::Nneb {
            let observations: Vec<_> = eval
                .trace
                .iter()
                .filter(|r| market.is_hour_start(r.index))
                .map(|r| market.observation(r.index, r.soc, &config.ess))
                .collect();
            Some(monotonicity_metric(&bidder.policy, &observations)?)
        } else {
            None
        };
        let ratio = profit_ratio(eval.profit, optimum.profit).ok();
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| mode.to_string());
        if let Some(dir) = trace_dir {
            save_trace(&dir.join(format!("{name}.trace.csv")), &eval, &market, &snapshot)?;
        }
        table.push((format!("{mode} ({name})"), eval.profit, ratio, metric));
        rows.push(json!({
            "checkpoint": path,
            "mode": mode,
            "profit": eval.profit,
            "profit_ratio": ratio,
            "hours": eval.hours,
            "max_deviation": eval.max_deviation,
            "monotonicity_metric": metric,
        }));
    }
    write_json(
        out,
        &json!({
            "schema": EVALUATION_SCHEMA,
            "config": snapshot,
            "oracle": oracle_json(&optimum),
            "idle_profit": idle.profit,
            "policies": rows,
        }),
    )?;
    println!("{:<32} {:>12} {:>10} {:>10}", "policy", "profit", "% optimal", "monotone");
    for (name, profit, ratio, metric) in table {
        let ratio = ratio.map_or("n/a".to_string(), |r| format!("{:.1}", 100.0 * r));
        let metric = metric.map_or("-".to_string(), |m| format!("{m:.3}"));
        println!("{name:<32} {profit:>12.2} {ratio:>10} {metric:>10}");
    }
    Ok(())
}

pub fn synth_data(config: AppConfig, out: &Path, days: Option<usize>, seed: Option<u64>) -> Result<()> {
    let days = days.unwrap_or(config.data.synthetic_days);
    let seed = seed.unwrap_or(config.data.synthetic_seed);
    ensure!(days > 0, "--days must be positive");
    let series = synth_prices(seed, days, &config.data.synthetic);
    let mut w = create(out)?;
    write_csv_preamble(
        &mut w,
        SERIES_SCHEMA,
        &json!({
            "command": "synth-data",
            "days": days,
            "seed": seed,
            "synthetic": config.data.synthetic,
        }),
    )?;
    series.write_csv(&mut w)?;
    w.flush()?;
    println!("wrote {days} days of prices to {}", out.display());
    Ok(())
}
