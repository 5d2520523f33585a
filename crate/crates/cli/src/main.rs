//! `retain` command-line tool. Every analytic command prints exactly what
//! the corresponding library call returns; `--json` prints it as pretty
//! JSON, otherwise as a table.

mod args;
mod table;

use std::collections::BTreeMap;
use std::io::{BufRead, IsTerminal, Write};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, Context, Result};
use clap::Parser;
use retain_core::engagement::{HealthReport, ReportKind, Schedule};
use retain_core::impact::{tag_distribution, ImpactScore, TagProfile};
use retain_core::ingest::SyntheticSpec;
use retain_core::metrics::{list_inactive, list_newcomers, overview_metrics, OverviewMetrics, RosterEntry};
use retain_core::model::SECONDS_PER_DAY;
use retain_core::store::StoredModel;
use retain_core::survival::RiskScore;
use retain_core::workflow::{EngagementRun, FitRequest, IngestSummary, SurvivalSummary, Workspace};
use retain_service::accounts::{AccountView, Accounts};
use serde::Serialize;

use args::{Cli, Command, IngestCommand, ScheduleCommand, SyntheticArgs};
use table::{date, pairs, render};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // clap exits 2 on usage errors and 0 for --help / --version
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let level = if matches!(cli.command, Command::Serve { .. }) {
        tracing::Level::INFO
    } else {
        tracing::Level::WARN
    };
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_ansi(std::io::stderr().is_terminal())
        .with_writer(std::io::stderr)
        .init();

    match run(&cli) {
        Ok(out) => {
            let mut stdout = std::io::stdout().lock();
            if stdout.write_all(out.as_bytes()).and_then(|_| stdout.flush()).is_err() {
                return ExitCode::from(1);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn now() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs() as i64)
}

struct Out {
    json: bool,
}

impl Out {
    fn emit<T: Serialize>(&self, value: &T, human: impl FnOnce(&T) -> String) -> Result<String> {
        if self.json {
            let mut s = serde_json::to_string_pretty(value)?;
            s.push('\n');
            Ok(s)
        } else {
            Ok(human(value))
        }
    }
}

fn run(cli: &Cli) -> Result<String> {
    let ws = Workspace::open(&cli.data_dir)?;
    let out = Out { json: cli.json };
    let p = cli.project.as_str();
    match &cli.command {
        Command::InitAdmin { login } => {
            let password = admin_password()?;
            let mut accounts = Accounts::open(ws.store.root(), &ws.settings.service)?;
            let view = accounts.init_admin(login, &password, now())?;
            out.emit(&view, show_account)
        }
        Command::Ingest { source } => {
            let summary = match source {
                IngestCommand::Jsonl { path } => ws.ingest_jsonl(p, path)?,
                IngestCommand::Remote { url } => ws.ingest_remote(p, url)?,
                IngestCommand::Synthetic(a) => ws.ingest_synthetic(p, &synthetic_spec(a, cli.seed.unwrap_or(ws.settings.default_seed))?)?,
            };
            out.emit(&summary, show_ingest)
        }
        Command::Metrics { start, end } => {
            let project = ws.load_project_or_empty(p)?;
            let policy = ws.policy(&project);
            let end = end.unwrap_or(policy.as_of);
            let start = start.unwrap_or(end - i64::from(ws.settings.report_period_days) * SECONDS_PER_DAY);
            out.emit(&overview_metrics(&project, &policy, start, end)?, show_overview)
        }
        Command::Survival { group_by } => {
            let project = ws.load_project(p)?;
            out.emit(&ws.survival_curves(&project, *group_by)?, show_survival)
        }
        Command::Fit { kind, features, window_days } => {
            let request = FitRequest {
                kind: *kind,
                features: features.clone(),
                feature_window_days: *window_days,
                seed: cli.seed,
            };
            out.emit(&ws.fit(p, &request)?, show_model)
        }
        Command::Predict { model } => {
            let stored = match model {
                Some(id) => ws.store.read_model(id)?,
                None => ws
                    .store
                    .latest_model(p)?
                    .ok_or_else(|| anyhow!("no model has been fitted for project `{p}`"))?,
            };
            out.emit(&ws.risk(&stored)?, |r| show_risk(r))
        }
        Command::Impact => {
            let project = ws.load_project(p)?;
            out.emit(&ws.impact(&project)?, |s| show_impact(s))
        }
        Command::Tags { tag } => {
            let project = ws.load_project(p)?;
            match tag {
                Some(t) => out.emit(&ws.tag(&project, t)?, show_tag),
                None => out.emit(&tag_distribution(&project), |t| show_tags(t)),
            }
        }
        Command::Newcomers => {
            let project = ws.load_project(p)?;
            out.emit(&list_newcomers(project.contributors(), &ws.policy(&project))?, |r| show_roster(r))
        }
        Command::Inactive => {
            let project = ws.load_project(p)?;
            out.emit(&list_inactive(project.contributors(), &ws.policy(&project))?, |r| show_roster(r))
        }
        Command::Report => out.emit(&ws.report(p)?, HealthReport::to_text),
        Command::Schedules { action } => match action {
            ScheduleCommand::Add { id, cadence, at, recipients, disabled } => {
                let schedule = Schedule {
                    schedule_id: id.clone(),
                    report: ReportKind::Health,
                    cadence: *cadence,
                    at_utc: at.clone(),
                    recipients: recipients.clone(),
                    enabled: !disabled,
                    last_run: None,
                };
                out.emit(&ws.add_schedule(p, schedule)?, |s| show_schedules(s))
            }
            ScheduleCommand::List => out.emit(&ws.store.read_schedules(p)?, |s| show_schedules(s)),
            ScheduleCommand::Run { now: at } => out.emit(&ws.run_engagement(p, at.unwrap_or_else(now))?, show_run),
        },
        Command::Serve { bind } => {
            let bind = bind.clone().unwrap_or_else(|| ws.settings.service.bind.clone());
            let state = retain_service::AppState::new(ws, retain_service::system_clock())?;
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(retain_service::serve(state, &bind)).context("serving")?;
            Ok(String::new())
        }
    }
}

fn admin_password() -> Result<String> {
    if let Ok(pw) = std::env::var("RETAIN_ADMIN_PASSWORD") {
        return Ok(pw);
    }
    let mut line = String::new();
    std::io::stdin().lock().read_line(&mut line)?;
    let pw = line.trim_end_matches(['\r', '\n']).to_string();
    if pw.is_empty() {
        return Err(anyhow!("no password given: set RETAIN_ADMIN_PASSWORD or pipe it on stdin"));
    }
    Ok(pw)
}

fn synthetic_spec(a: &SyntheticArgs, seed: u64) -> Result<SyntheticSpec> {
    if let Some(path) = &a.spec {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        return serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()));
    }
    let share = 1.0 / a.groups.len() as f64;
    let mut spec = SyntheticSpec::two_groups(seed, a.contributors, a.horizon_days, ("a", 0.0), ("b", 0.0));
    spec.group_shares = a.groups.iter().map(|(g, _)| (g.clone(), share)).collect::<BTreeMap<_, _>>();
    spec.group_hazard_per_day = a.groups.iter().cloned().collect();
    spec.events_per_active_week = a.events_per_week;
    Ok(spec)
}

fn show_account(a: &AccountView) -> String {
    format!("{} {} ({:?})\n", a.account_id, a.login, a.role)
}

fn show_ingest(s: &IngestSummary) -> String {
    pairs(&[
        ("project", s.project.clone()),
        ("received", s.received.to_string()),
        ("bots dropped", s.bots_dropped.to_string()),
        ("added", s.added.to_string()),
        ("total events", s.total.to_string()),
        ("as of", date(s.as_of)),
    ])
}

fn show_overview(m: &OverviewMetrics) -> String {
    pairs(&[
        ("window", format!("{} .. {}", date(m.window_start), date(m.window_end))),
        ("active", m.active_count.to_string()),
        ("newcomers", m.newcomer_count.to_string()),
        ("departed", m.departed_count.to_string()),
        ("total", m.total_count.to_string()),
        ("turnover", format!("{:.4}", m.turnover_rate)),
        ("avg tenure days", m.avg_tenure_days.map_or("-".into(), |t| format!("{t:.1}"))),
    ])
}

fn show_survival(s: &SurvivalSummary) -> String {
    let mut out = String::new();
    for c in &s.estimate.curves {
        out.push_str(&format!("{} (n={})\n", c.group_label, c.n));
        let rows: Vec<Vec<String>> = (0..c.times.len())
            .map(|i| {
                vec![
                    c.times[i].to_string(),
                    c.at_risk[i].to_string(),
                    c.events[i].to_string(),
                    format!("{:.4}", c.survival[i]),
                ]
            })
            .collect();
        out.push_str(&render(&["day", "at risk", "events", "survival"], &rows));
        out.push('\n');
    }
    for w in &s.estimate.warnings {
        out.push_str(&format!("note: {w}\n"));
    }
    if let Some(lr) = &s.logrank {
        out.push_str(&format!(
            "log-rank {} vs {}: chi2 {:.4}, p {:.4e}\n",
            lr.groups[0], lr.groups[1], lr.chi_square, lr.p_value
        ));
    }
    out
}

fn show_model(s: &StoredModel) -> String {
    let m = &s.model;
    pairs(&[
        ("model", m.model_id.clone()),
        ("kind", m.kind.as_str().into()),
        ("features", m.feature_names.join(", ")),
        ("c-index", m.c_index.map_or("-".into(), |c| format!("{c:.4}"))),
        ("converged", m.converged.to_string()),
        ("iterations", m.iterations.to_string()),
        ("train / holdout", format!("{} / {}", m.n_train, m.n_holdout)),
        ("seed", m.seed.to_string()),
    ])
}

fn show_risk(scores: &[RiskScore]) -> String {
    let mut sorted: Vec<&RiskScore> = scores.iter().collect();
    sorted.sort_by_key(|s| s.rank);
    let rows: Vec<Vec<String>> = sorted
        .iter()
        .map(|s| vec![s.rank.to_string(), s.contributor_id.clone(), format!("{:.4}", s.score)])
        .collect();
    render(&["rank", "contributor", "risk"], &rows)
}

fn show_impact(scores: &[ImpactScore]) -> String {
    let rows: Vec<Vec<String>> = scores
        .iter()
        .map(|s| vec![s.contributor_id.clone(), format!("{}", s.raw_count), format!("{:.4}", s.score)])
        .collect();
    render(&["contributor", "weighted count", "score"], &rows)
}

fn show_tags(tags: &[TagProfile]) -> String {
    let rows: Vec<Vec<String>> = tags
        .iter()
        .map(|t| {
            vec![
                t.tag.clone(),
                t.total_tagged_contributions.to_string(),
                t.per_contributor.len().to_string(),
                t.top_contributor.clone(),
            ]
        })
        .collect();
    render(&["tag", "contributions", "contributors", "top"], &rows)
}

fn show_tag(t: &TagProfile) -> String {
    let mut counts: Vec<(&String, &u64)> = t.per_contributor.iter().collect();
    counts.sort_by(|a, b| b.1.cmp(a.1).then(a.0.cmp(b.0)));
    let rows: Vec<Vec<String>> = counts.iter().map(|(c, n)| vec![(*c).clone(), n.to_string()]).collect();
    format!(
        "{}: {} contributions\n{}",
        t.tag,
        t.total_tagged_contributions,
        render(&["contributor", "count"], &rows)
    )
}

fn show_roster(entries: &[RosterEntry]) -> String {
    let rows: Vec<Vec<String>> = entries
        .iter()
        .map(|e| {
            vec![
                e.contributor_id.clone(),
                e.display_name.clone(),
                date(e.first_event),
                date(e.last_event),
                e.gap_days.to_string(),
                e.tenure_days.to_string(),
            ]
        })
        .collect();
    render(&["contributor", "name", "first", "last", "gap days", "tenure days"], &rows)
}

fn show_schedules(schedules: &[Schedule]) -> String {
    let rows: Vec<Vec<String>> = schedules
        .iter()
        .map(|s| {
            vec![
                s.schedule_id.clone(),
                format!("{:?}", s.cadence).to_lowercase(),
                s.at_utc.clone(),
                s.recipients.join(","),
                s.enabled.to_string(),
                s.last_run.map_or("-".into(), date),
            ]
        })
        .collect();
    render(&["id", "cadence", "at (UTC)", "recipients", "enabled", "last run"], &rows)
}

fn show_run(r: &EngagementRun) -> String {
    let mut out = pairs(&[
        ("written", r.written.len().to_string()),
        ("undeliverable", r.undeliverable.len().to_string()),
        ("dropped by cap", r.dropped_by_cap.to_string()),
    ]);
    if !r.written.is_empty() {
        let rows: Vec<Vec<String>> = r
            .written
            .iter()
            .map(|m| vec![m.message_id.clone(), m.trigger.as_str().into(), m.recipient.clone(), m.subject.clone()])
            .collect();
        out.push('\n');
        out.push_str(&render(&["message", "trigger", "recipient", "subject"], &rows));
    }
    out
}
