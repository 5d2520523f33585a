use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use retain_core::engagement::Cadence;
use retain_core::metrics::Lens;
use retain_core::survival::ModelKind;

fn parsed<T: FromStr>(s: &str) -> Result<T, String>
where
    T::Err: Display,
{
    s.parse().map_err(|e: T::Err| e.to_string())
}

fn group_hazard(s: &str) -> Result<(String, f64), String> {
    let (name, hazard) = s.split_once('=').ok_or("expected NAME=HAZARD")?;
    let hazard: f64 = hazard.parse().map_err(|_| format!("bad hazard `{hazard}`"))?;
    Ok((name.to_string(), hazard))
}

/// Contributor retention analytics over a local data directory.
#[derive(Debug, Parser)]
#[command(name = "retain", version)]
pub struct Cli {
    /// Directory holding `retain.json` and the project store.
    #[arg(long, global = true, env = "RETAIN_DATA_DIR", default_value = ".")]
    pub data_dir: PathBuf,
    #[arg(long, global = true, default_value = "default")]
    pub project: String,
    /// Print the result as JSON instead of a table.
    #[arg(long, global = true)]
    pub json: bool,
    /// Seed for synthetic generation and model fitting; defaults to the
    /// configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create the first administrator account. The password is read from
    /// RETAIN_ADMIN_PASSWORD, or from the first line of stdin.
    InitAdmin {
        #[arg(long, default_value = "admin")]
        login: String,
    },
    /// Add events to a project.
    Ingest {
        #[command(subcommand)]
        source: IngestCommand,
    },
    /// Retention overview for a window, by default the report period
    /// ending at the project's as-of instant.
    Metrics {
        #[arg(long)]
        start: Option<i64>,
        #[arg(long)]
        end: Option<i64>,
    },
    /// Kaplan-Meier curves, optionally per group.
    Survival {
        #[arg(long, value_parser = parsed::<Lens>)]
        group_by: Option<Lens>,
    },
    /// Fit and store a departure-risk model.
    Fit {
        #[arg(long, value_parser = parsed::<ModelKind>, default_value = "cox")]
        kind: ModelKind,
        /// Comma-separated feature subset.
        #[arg(long, value_delimiter = ',')]
        features: Option<Vec<String>>,
        #[arg(long)]
        window_days: Option<u32>,
    },
    /// Rank contributors by departure risk.
    Predict {
        /// Model to use; the project's latest when omitted.
        #[arg(long)]
        model: Option<String>,
    },
    /// Contribution impact scores.
    Impact,
    /// Tag distribution, or one tag's profile.
    Tags { tag: Option<String> },
    Newcomers,
    Inactive,
    /// Health report, using the latest model when one exists.
    Report,
    Schedules {
        #[command(subcommand)]
        action: ScheduleCommand,
    },
    /// Run the HTTP API.
    Serve {
        /// Overrides the configured bind address.
        #[arg(long)]
        bind: Option<String>,
    },
}

#[derive(Debug, Subcommand)]
pub enum IngestCommand {
    /// Newline-delimited JSON events.
    Jsonl { path: PathBuf },
    /// A hosted repository, fetched incrementally.
    Remote { url: String },
    /// A seeded synthetic community.
    Synthetic(SyntheticArgs),
}

#[derive(Debug, Args)]
pub struct SyntheticArgs {
    /// Full generator spec as JSON; the other flags are ignored when given.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    pub contributors: usize,
    #[arg(long, default_value_t = 365)]
    pub horizon_days: u32,
    /// Group and its daily departure hazard; groups split evenly.
    #[arg(long = "group", value_parser = group_hazard, default_values = ["steady=0.001", "volatile=0.01"])]
    pub groups: Vec<(String, f64)>,
    #[arg(long, default_value_t = 2.0)]
    pub events_per_week: f64,
}

#[derive(Debug, Subcommand)]
pub enum ScheduleCommand {
    Add {
        #[arg(long)]
        id: String,
        #[arg(long, value_parser = parsed::<Cadence>)]
        cadence: Cadence,
        /// Send time, HH:MM UTC.
        #[arg(long)]
        at: String,
        #[arg(long = "recipient", required = true)]
        recipients: Vec<String>,
        #[arg(long)]
        disabled: bool,
    },
    List,
    /// Send lifecycle messages and due reports into the outbox.
    Run {
        /// Unix seconds; the current time when omitted.
        #[arg(long)]
        now: Option<i64>,
    },
}
