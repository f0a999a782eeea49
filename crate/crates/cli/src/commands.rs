//! Subcommand implementations.

use mfdi_core::estimation::{
    occurrence_exposure_mle, partial_loglik, simulate_observations, BucketSpec, CellFlag,
    HealthBuckets, ObservationSet, YBuckets,
};
use mfdi_core::grid::{build_grid, select_cutoff, Conditioning, GridSpec};
use mfdi_core::simulator::{
    chaos_diagnostics, collective_series, histogram, mc_reserve, repeated_mc, simulate_sample,
    write_histogram_csv, write_repeated_csv, write_series_csv, RepeatedStats,
};
use mfdi_core::solver::{GridRecorder, NoObserver, SolverOptions, StageObserver};
use mfdi_core::valuation::{effective_waiting_periods, run_model, ModelTag, ReserveKind};

use crate::config::{ScenarioFile, Setup};
use crate::output::{Header, OutDir};
use crate::{
    CliError, EstimateArgs, GridArgs, ModelArg, ScenarioArgs, SimulateArgs, SolveArgs, Table2Args,
    Table3Args,
};

type Lines = Vec<(String, String)>;

fn kv(k: impl Into<String>, v: impl ToString) -> (String, String) {
    (k.into(), v.to_string())
}

fn load(args: &ScenarioArgs) -> Result<Setup, CliError> {
    let mut file = match &args.config {
        Some(path) => ScenarioFile::load(path)?,
        None => ScenarioFile::default(),
    };
    if args.beta.is_some() {
        file.beta = args.beta;
    }
    if args.zeta0.is_some() {
        file.zeta0 = args.zeta0;
    }
    file.resolve()
}

fn grid(args: &GridArgs, setup: &Setup) -> Result<GridSpec, CliError> {
    let horizon = setup.scenario.horizon;
    let k_h = match args.err {
        Some(err) => select_cutoff(setup.scenario.rates.health_bound(), horizon, err)?,
        None => args.k_h,
    };
    Ok(build_grid(horizon, args.eta, k_h)?)
}

fn model_tag(m: ModelArg) -> ModelTag {
    match m {
        ModelArg::Classic => ModelTag::Classic,
        ModelArg::Health => ModelTag::Health,
        ModelArg::Meanfield => ModelTag::MeanField,
        ModelArg::TrueN1 => ModelTag::TrueSingle,
    }
}

fn check_finite(what: &str, x: f64) -> Result<f64, CliError> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(mfdi_core::Error::Numerical(format!("{what} is {x}")).into())
    }
}

pub fn solve(a: &SolveArgs) -> Result<(), CliError> {
    let setup = load(&a.scenario)?;
    let s = &setup.scenario;
    let spec = grid(&a.grid, &setup)?;
    let kind = match &a.from_state {
        None => ReserveKind::Portfolio,
        Some(name) => ReserveKind::StateConditioned(
            s.states
                .index_of(name)
                .ok_or_else(|| CliError::Usage(format!("unknown state '{name}'")))?,
        ),
    };
    let cond = match kind {
        ReserveKind::Portfolio => Conditioning::Initial,
        ReserveKind::StateConditioned(i) => Conditioning::State(i),
    };
    let model = model_tag(a.model);
    let k_h = if model == ModelTag::Classic {
        0
    } else {
        spec.cutoff()
    };
    let options = SolverOptions {
        drift_tolerance: a.max_drift,
        ..Default::default()
    };
    let mut recorder = a
        .write_grid
        .then(|| GridRecorder::new(spec.with_cutoff(k_h), s.n_states(), cond));
    let extra: &mut dyn StageObserver = match recorder.as_mut() {
        Some(r) => r,
        None => &mut NoObserver,
    };
    let run = run_model(
        s,
        spec,
        &setup.payments,
        &setup.discount,
        model,
        kind,
        options,
        extra,
    )?;
    let reserve = check_finite("reserve", run.reserve.value)?;

    let out = OutDir::create(&a.out.out)?;
    let header = Header::new(&setup).grid(spec.eta(), k_h);
    let footer = [
        ("model", model.to_string()),
        ("reserve", format!("{reserve:.10}")),
    ];
    out.write("cashflow.csv", &header, |w| {
        run.cashflow.write_csv(&setup.discount, &footer, w)
    })?;
    if let Some(v) = &run.mean_path {
        out.write("meanpath.csv", &header, |w| v.write_csv(w))?;
    }
    if let Some(r) = recorder {
        let g = r.into_grid();
        out.write("grid.csv", &header, |w| g.write_csv(&s.states, w))?;
    }
    let waiting: Vec<String> = effective_waiting_periods(&setup.payments, spec.eta())
        .iter()
        .map(|w| format!("{w}"))
        .collect();
    let mut lines: Lines = vec![
        kv("model", model),
        kv(
            "reserve_kind",
            match kind {
                ReserveKind::Portfolio => "initial distribution".to_string(),
                ReserveKind::StateConditioned(i) => format!("from {}", s.states.name(i)),
            },
        ),
        kv("reserve", format!("{reserve:.10}")),
        kv(
            "expected_total_payments",
            format!("{:.10}", run.cashflow.total()),
        ),
        kv("steps", spec.steps()),
        kv("effective_waiting_period", waiting.join(" ")),
        kv(
            "max_normalization_drift",
            format!("{:.3e}", run.report.max_normalization_drift),
        ),
        kv("negative_mass_clips", run.report.negative_mass_clips),
    ];
    if run.mean_path.is_some() {
        lines.push(kv(
            "self_consistency_residual",
            format!("{:.3e}", run.report.self_consistency_residual),
        ));
    }
    out.summary(&header, &lines)
}

pub fn simulate(a: &SimulateArgs) -> Result<(), CliError> {
    let setup = load(&a.scenario)?;
    let s = &setup.scenario;
    if a.n.is_empty() || a.n.contains(&0) {
        return Err(CliError::Usage("group sizes must be at least 1".into()));
    }
    let out = OutDir::create(&a.out.out)?;
    let header = Header::new(&setup).seed(a.seed);
    let mut lines: Lines = vec![kv("samples", a.samples)];

    // mean path for path diagnostics
    let mean_path = if a.paths > 0 && s.is_collective() {
        let spec = grid(&a.grid, &setup)?;
        let run = run_model(
            s,
            spec,
            &setup.payments,
            &setup.discount,
            ModelTag::MeanField,
            ReserveKind::Portfolio,
            SolverOptions::default(),
            &mut NoObserver,
        )?;
        lines.push(kv(
            "meanfield_reserve",
            format!("{:.10}", run.reserve.value),
        ));
        run.mean_path
    } else {
        None
    };
    let path_header = match &mean_path {
        Some(v) => header.clone().grid(v.spec().eta(), v.spec().cutoff()),
        None => header.clone(),
    };

    for &n in &a.n {
        let est = mc_reserve(
            s,
            &setup.payments,
            &setup.discount,
            n,
            a.samples,
            a.seed,
            a.histogram_bins > 0,
        )?;
        check_finite("Monte Carlo estimate", est.mean)?;
        lines.push(kv(format!("n={n} estimate"), format!("{:.10}", est.mean)));
        lines.push(kv(
            format!("n={n} std_error"),
            format!("{:.10}", est.std_error),
        ));
        if let Some(pvs) = &est.per_sample_pv {
            let bins = histogram(pvs, a.histogram_bins);
            out.write(&format!("histogram_n{n}.csv"), &header, |w| {
                write_histogram_csv(&bins, w)
            })?;
        }
        let mut runs = Vec::new();
        for k in 0..a.paths {
            let path = simulate_sample(s, n, s.horizon, a.seed, k as u64)?;
            out.write(&format!("events_n{n}_p{k}.csv"), &header, |w| {
                path.write_events_csv(&s.states, w)
            })?;
            out.write(&format!("nu_n{n}_p{k}.csv"), &header, |w| {
                path.write_nu_csv(w)
            })?;
            if let (Some(v), Some(p)) = (&mean_path, &setup.params) {
                let rows = collective_series(p, &path, v);
                out.write(&format!("series_n{n}_p{k}.csv"), &path_header, |w| {
                    write_series_csv(&rows, w)
                })?;
            }
            runs.push(path);
        }
        if let Some(v) = &mean_path {
            let d = chaos_diagnostics(s, v, &runs, None, 0, &[])?;
            let sup: Vec<String> = d.sup_distance.iter().map(|x| format!("{x:.6}")).collect();
            lines.push(kv(format!("n={n} sup_distance_nu_v"), sup.join(" ")));
        }
    }

    if let Some(companies) = a.companies {
        let censoring = a.censoring.unwrap_or(s.horizon);
        for &n in &a.n {
            let data = simulate_observations(s, n, censoring, companies, a.seed)?;
            out.write(&format!("observations_n{n}.csv"), &header, |w| {
                data.write_csv(w)
            })?;
        }
        lines.push(kv("observation_companies", companies));
        lines.push(kv("observation_censoring", censoring));
    }
    out.summary(&header, &lines)
}

pub fn estimate(a: &EstimateArgs) -> Result<(), CliError> {
    let setup = load(&a.scenario)?;
    let s = &setup.scenario;
    let file = std::fs::File::open(&a.events).map_err(|e| CliError::io(&a.events, e))?;
    let data = ObservationSet::read_csv(&s.states, std::io::BufReader::new(file))?;
    let max_r = data
        .companies
        .iter()
        .map(|c| c.censoring)
        .fold(0.0, f64::max);
    let span = if max_r > 0.0 { max_r } else { 1.0 };
    let buckets = BucketSpec {
        t_edges: a.t_edges.clone().unwrap_or_else(|| vec![0.0, span]),
        u_edges: a.u_edges.clone().unwrap_or_else(|| vec![0.0, span]),
        h: a.h_cap.map_or(HealthBuckets::Pooled, HealthBuckets::Capped),
        y: match &a.y_edges {
            Some(e) => YBuckets::Edges(e.clone()),
            None => YBuckets::Quantiles(a.y_quantiles),
        },
    };
    let ll = partial_loglik(&data, s)?;
    let oe = occurrence_exposure_mle(&data, &s.g, &buckets)?;

    let out = OutDir::create(&a.out.out)?;
    let header = Header::new(&setup);
    out.write("occurrence_exposure.csv", &header, |w| {
        oe.write_csv(&s.states, w)
    })?;
    let mut lines: Lines = vec![
        kv("companies", data.companies.len()),
        kv(
            "individuals",
            data.companies.iter().map(|c| c.n()).sum::<usize>(),
        ),
        kv(
            "events",
            data.companies.iter().map(|c| c.events.len()).sum::<usize>(),
        ),
        kv("loglik_health", format!("{:.10}", ll.health)),
    ];
    for ((j, k), v) in &ll.transitions {
        lines.push(kv(
            format!("loglik_{}->{}", s.states.name(*j), s.states.name(*k)),
            format!("{v:.10}"),
        ));
    }
    lines.push(kv("loglik_total", format!("{:.10}", ll.total())));
    lines.push(kv("incompatible_events", ll.incompatible.len()));
    for msg in ll.incompatible.iter().take(10) {
        lines.push(kv("incompatible", msg));
    }
    let count = |f: CellFlag| oe.cells.iter().filter(|c| c.flag() == Some(f)).count();
    lines.push(kv("cells", oe.cells.len()));
    lines.push(kv("cells_zero_exposure", count(CellFlag::ZeroExposure)));
    lines.push(kv("cells_no_occurrences", count(CellFlag::NoOccurrences)));
    lines.push(kv("empty", oe.empty));
    out.summary(&header, &lines)
}

pub fn table2(a: &Table2Args) -> Result<(), CliError> {
    let setup = load(&a.scenario)?;
    let s = &setup.scenario;
    let spec = grid(&a.grid, &setup)?;
    let value = |model| -> Result<f64, CliError> {
        let run = run_model(
            s,
            spec,
            &setup.payments,
            &setup.discount,
            model,
            ReserveKind::Portfolio,
            SolverOptions::default(),
            &mut NoObserver,
        )?;
        check_finite("reserve", run.reserve.value)
    };
    let mf = value(ModelTag::MeanField)?;
    let single = value(ModelTag::TrueSingle)?;
    let mut rows = Vec::new();
    for &n in &a.n {
        let est = mc_reserve(
            s,
            &setup.payments,
            &setup.discount,
            n,
            a.samples,
            a.seed,
            false,
        )?;
        rows.push((
            n,
            check_finite("Monte Carlo estimate", est.mean)?,
            est.std_error,
        ));
    }

    let out = OutDir::create(&a.out.out)?;
    let header = Header::new(&setup)
        .grid(spec.eta(), spec.cutoff())
        .seed(a.seed);
    out.write("table2.csv", &header, |w| {
        writeln!(w, "n,meanfield,monte_carlo,mc_std_error,true")?;
        for &(n, mc, se) in &rows {
            let t = if n == 1 {
                format!("{single:.10}")
            } else {
                String::new()
            };
            writeln!(w, "{n},{mf:.10},{mc:.10},{se:.10},{t}")?;
        }
        Ok(())
    })?;
    let mut lines: Lines = vec![
        kv("samples", a.samples),
        kv("meanfield", format!("{mf:.10}")),
        kv("true_n1", format!("{single:.10}")),
        kv(
            "true_n1_over_meanfield",
            format!("{:.4}%", 100.0 * (single / mf - 1.0)),
        ),
    ];
    for &(n, mc, se) in &rows {
        lines.push(kv(
            format!("n={n} monte_carlo"),
            format!("{mc:.10} (std error {se:.10})"),
        ));
        if n == 1 {
            lines.push(kv(
                "n=1 (true - monte_carlo) / std_error",
                format!("{:.3}", (single - mc) / se),
            ));
        }
    }
    out.summary(&header, &lines)
}

pub fn table3(a: &Table3Args) -> Result<(), CliError> {
    let setup = load(&a.scenario)?;
    let s = &setup.scenario;
    if a.reps < 2 {
        return Err(CliError::Usage(
            "at least two repetitions are needed".into(),
        ));
    }
    let mut runs = Vec::new();
    for &n in &a.n {
        let est = repeated_mc(
            s,
            &setup.payments,
            &setup.discount,
            n,
            a.samples,
            a.reps,
            a.seed,
        )?;
        runs.push((n, est));
    }
    let stats: Vec<RepeatedStats> = runs
        .iter()
        .map(|(n, est)| RepeatedStats::from_estimates(*n, est))
        .collect();

    let out = OutDir::create(&a.out.out)?;
    let header = Header::new(&setup).seed(a.seed);
    out.write("table3_runs.csv", &header, |w| write_repeated_csv(&runs, w))?;
    out.write("table3.csv", &header, |w| {
        writeln!(w, "n,second_lowest,average,second_highest,std,min,max")?;
        for st in &stats {
            writeln!(
                w,
                "{},{:.10},{:.10},{:.10},{:.10},{:.10},{:.10}",
                st.n,
                st.second_lowest().unwrap_or(f64::NAN),
                st.mean,
                st.second_highest().unwrap_or(f64::NAN),
                st.std,
                st.sorted[0],
                st.sorted[st.sorted.len() - 1]
            )?;
        }
        Ok(())
    })?;
    let mut lines: Lines = vec![kv("samples", a.samples), kv("repetitions", a.reps)];
    for st in &stats {
        lines.push(kv(
            format!("n={}", st.n),
            format!("average {:.6}, std {:.6}", st.mean, st.std),
        ));
    }
    out.summary(&header, &lines)
}
