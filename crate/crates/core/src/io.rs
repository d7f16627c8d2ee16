//! Text formats: the flat scenario config and the CSV schemas for cohorts,
//! nested case-control samples, external Cox data, and study outputs.
//!
//! Floating-point values are written with 17 significant digits so every
//! `f64` survives a write/read cycle unchanged.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::path::Path;

use crate::error::{Error, Result};
use crate::estimators::{CoxRiskSets, RiskSetEvent};
use crate::harness::{Estimator, ScenarioSummary, Table1Report};
use crate::model::{Cohort, Control, NccDataset, NccRecord, ShortfallPolicy, Subject, SubjectId};
use crate::sim::{BoundForm, Censoring, CovariateLaw, ScenarioConfig};
use crate::theory::{PropositionReport, TheoryReport};

/// Lossless decimal rendering of an `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn parse_err(line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        kind => parse_err(line, format!("{kind:?}")),
    }
}

fn parse_field<T: std::str::FromStr>(s: &str, line: u64, what: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| parse_err(line, format!("cannot parse {what} from '{s}'")))
}

fn parse_delta(s: &str, line: u64) -> Result<bool> {
    match s.trim() {
        "1" | "true" => Ok(true),
        "0" | "false" => Ok(false),
        other => Err(parse_err(line, format!("delta must be 0 or 1, got '{other}'"))),
    }
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_err)
}

fn writer(path: &Path) -> Result<csv::Writer<File>> {
    csv::Writer::from_path(path).map_err(csv_err)
}

/// Reads the header and checks its leading columns; returns the full header.
fn expect_header(rdr: &mut csv::Reader<File>, leading: &[&str]) -> Result<Vec<String>> {
    let header: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if header.len() < leading.len() || header.iter().zip(leading).any(|(h, l)| h != l) {
        return Err(parse_err(1, format!("expected header starting with {}", leading.join(","))));
    }
    Ok(header)
}

/// `z1..zd` column names, checked.
fn covariate_columns(header: &[String], skip: usize) -> Result<usize> {
    let d = header.len() - skip;
    if d == 0 {
        return Err(parse_err(1, "no covariate columns"));
    }
    for (k, h) in header[skip..].iter().enumerate() {
        if *h != format!("z{}", k + 1) {
            return Err(parse_err(1, format!("expected column z{}, found '{h}'", k + 1)));
        }
    }
    Ok(d)
}

fn records(rdr: &mut csv::Reader<File>) -> impl Iterator<Item = Result<(u64, csv::StringRecord)>> + '_ {
    rdr.records().map(|r| {
        let r = r.map_err(csv_err)?;
        let line = r.position().map_or(0, |p| p.line());
        Ok((line, r))
    })
}

// ---- scenario config ----

const CONFIG_KEYS: &[&str] = &[
    "beta",
    "n",
    "m",
    "baseline_hazard",
    "slope_scale",
    "half_width",
    "censoring",
    "censor_time",
    "censor_t_ref",
    "censor_cap",
    "tau",
    "shortfall",
];

/// Parses `key = value` lines; `#` starts a comment. Omitted keys take the
/// values of the scalar design with `beta = 0`, `m = 1`, fixed censoring at 1.
pub fn parse_config(text: &str) -> Result<ScenarioConfig> {
    let mut kv: BTreeMap<&str, (u64, &str)> = BTreeMap::new();
    for (k, raw) in text.lines().enumerate() {
        let line = k as u64 + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let (key, value) = body
            .split_once('=')
            .ok_or_else(|| parse_err(line, format!("expected key = value, got '{body}'")))?;
        let key = key.trim();
        if !CONFIG_KEYS.contains(&key) {
            return Err(parse_err(line, format!("unknown key '{key}'")));
        }
        if kv.insert(key, (line, value.trim())).is_some() {
            return Err(parse_err(line, format!("duplicate key '{key}'")));
        }
    }
    let get = |key: &str| kv.get(key).copied();
    let num = |key: &str, default: f64| -> Result<f64> {
        get(key).map_or(Ok(default), |(line, v)| parse_field(v, line, key))
    };
    let count = |key: &str, default: usize| -> Result<usize> {
        get(key).map_or(Ok(default), |(line, v)| parse_field(v, line, key))
    };

    let mut sc = ScenarioConfig::table1(0.0, 1, Censoring::fixed(1.0));
    if let Some((line, v)) = get("beta") {
        sc.beta = v
            .split(',')
            .map(|b| parse_field(b, line, "beta"))
            .collect::<Result<_>>()?;
    }
    sc.n = count("n", sc.n)?;
    sc.m = count("m", sc.m)?;
    sc.baseline_hazard = num("baseline_hazard", sc.baseline_hazard)?;
    sc.tau = num("tau", sc.tau)?;
    let CovariateLaw::UniformLinear {
        slope_scale,
        half_width,
    } = sc.covariate_law;
    sc.covariate_law = CovariateLaw::UniformLinear {
        slope_scale: num("slope_scale", slope_scale)?,
        half_width: num("half_width", half_width)?,
    };
    let kind = get("censoring").unwrap_or((0, "fixed"));
    sc.censoring = match kind.1 {
        "fixed" => Censoring::Fixed {
            time: num("censor_time", sc.tau)?,
        },
        "random" | "random_signed" => Censoring::Random {
            t_ref: num("censor_t_ref", 0.25)?,
            cap: num("censor_cap", 1.0)?,
            form: if kind.1 == "random" {
                BoundForm::Absolute
            } else {
                BoundForm::Signed
            },
        },
        other => return Err(parse_err(kind.0, format!("unknown censoring '{other}'"))),
    };
    if let Some((line, v)) = get("shortfall") {
        sc.shortfall = v.parse().map_err(|e: Error| parse_err(line, e.to_string()))?;
    }
    sc.validate()?;
    Ok(sc)
}

/// Renders a config that [`parse_config`] reads back unchanged.
pub fn format_config(sc: &ScenarioConfig) -> String {
    let beta: Vec<String> = sc.beta.iter().map(|b| fmt_f64(*b)).collect();
    let CovariateLaw::UniformLinear {
        slope_scale,
        half_width,
    } = sc.covariate_law;
    let mut out = format!(
        "beta = {}\nn = {}\nm = {}\nbaseline_hazard = {}\nslope_scale = {}\nhalf_width = {}\ntau = {}\ncensoring = {}\n",
        beta.join(","),
        sc.n,
        sc.m,
        fmt_f64(sc.baseline_hazard),
        fmt_f64(slope_scale),
        fmt_f64(half_width),
        fmt_f64(sc.tau),
        sc.censoring.label(),
    );
    match sc.censoring {
        Censoring::Fixed { time } => out += &format!("censor_time = {}\n", fmt_f64(time)),
        Censoring::Random { t_ref, cap, .. } => {
            out += &format!("censor_t_ref = {}\ncensor_cap = {}\n", fmt_f64(t_ref), fmt_f64(cap))
        }
    }
    let policy = match sc.shortfall {
        ShortfallPolicy::Drop => "drop",
        ShortfallPolicy::Adapt => "adapt",
    };
    out + &format!("shortfall = {policy}\n")
}

pub fn read_config(path: &Path) -> Result<ScenarioConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}

// ---- cohort.csv ----

fn latent_columns(d: usize) -> Vec<String> {
    if d == 1 {
        return vec!["u1".into(), "u2".into()];
    }
    let u1 = (1..=d).map(|k| format!("u1_{k}"));
    let u2 = (1..=d).map(|k| format!("u2_{k}"));
    u1.chain(u2).collect()
}

/// Writes `id,y,delta,u1,u2`: the covariate path is stored through the
/// latent draws of `law`.
pub fn write_cohort(path: &Path, cohort: &Cohort, law: &CovariateLaw) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["id".to_string(), "y".into(), "delta".into()];
    header.extend(latent_columns(cohort.dim()));
    w.write_record(&header).map_err(csv_err)?;
    for s in cohort.subjects() {
        let latent = law
            .latent_of(&s.path)
            .ok_or_else(|| Error::invalid(format!("subject {} has a path outside the covariate law", s.id)))?;
        let mut row = vec![s.id.to_string(), fmt_f64(s.y), u8::from(s.delta).to_string()];
        row.extend(latent.u1.iter().chain(&latent.u2).map(|u| fmt_f64(*u)));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a cohort written by [`write_cohort`]; paths are rebuilt with `law`.
pub fn read_cohort(path: &Path, law: &CovariateLaw, tau: f64) -> Result<Cohort> {
    let mut rdr = reader(path)?;
    let header = expect_header(&mut rdr, &["id", "y", "delta"])?;
    let latent_cols = header.len() - 3;
    if latent_cols == 0 || latent_cols % 2 != 0 || header[3..] != latent_columns(latent_cols / 2)[..] {
        return Err(parse_err(1, "expected latent columns u1,u2 (or u1_k..,u2_k..)"));
    }
    let d = latent_cols / 2;
    let mut subjects = Vec::new();
    for rec in records(&mut rdr) {
        let (line, r) = rec?;
        let u: Vec<f64> = (3..3 + 2 * d)
            .map(|k| parse_field(&r[k], line, &header[k]))
            .collect::<Result<_>>()?;
        let latent = crate::sim::Latent {
            u1: u[..d].to_vec(),
            u2: u[d..].to_vec(),
        };
        subjects.push(Subject {
            id: parse_field(&r[0], line, "id")?,
            y: parse_field(&r[1], line, "y")?,
            delta: parse_delta(&r[2], line)?,
            path: law.path(&latent),
        });
    }
    Cohort::new(subjects, tau)
}

// ---- ncc.csv ----

fn z_header(d: usize) -> impl Iterator<Item = String> {
    (1..=d).map(|k| format!("z{k}"))
}

/// Writes `record_id,t,role,subject_id,z1..zd`, one case row then its controls.
pub fn write_ncc(path: &Path, ncc: &NccDataset) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["record_id".to_string(), "t".into(), "role".into(), "subject_id".into()];
    header.extend(z_header(ncc.dim()));
    w.write_record(&header).map_err(csv_err)?;
    for (k, r) in ncc.records().iter().enumerate() {
        let rows = std::iter::once(("case", r.case_id, &r.z_case)).chain(r.controls.iter().map(|c| ("control", c.id, &c.z)));
        for (role, id, z) in rows {
            let mut row = vec![k.to_string(), fmt_f64(r.t), role.to_string(), id.to_string()];
            row.extend(z.iter().map(|x| fmt_f64(*x)));
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Raw records of an ncc file, in order of first appearance of each `record_id`.
pub fn read_ncc_records(path: &Path) -> Result<Vec<NccRecord>> {
    let mut rdr = reader(path)?;
    let header = expect_header(&mut rdr, &["record_id", "t", "role", "subject_id"])?;
    let d = covariate_columns(&header, 4)?;
    struct Partial {
        first_line: u64,
        t: f64,
        case: Option<(SubjectId, Vec<f64>)>,
        controls: Vec<Control>,
    }
    let mut order: Vec<String> = Vec::new();
    let mut by_id: HashMap<String, Partial> = HashMap::new();
    for rec in records(&mut rdr) {
        let (line, r) = rec?;
        let rid = r[0].to_string();
        let t: f64 = parse_field(&r[1], line, "t")?;
        let id: SubjectId = parse_field(&r[3], line, "subject_id")?;
        let z: Vec<f64> = (4..4 + d)
            .map(|k| parse_field(&r[k], line, &header[k]))
            .collect::<Result<_>>()?;
        let p = by_id.entry(rid.clone()).or_insert_with(|| {
            order.push(rid.clone());
            Partial {
                first_line: line,
                t,
                case: None,
                controls: Vec::new(),
            }
        });
        if p.t != t {
            return Err(parse_err(line, format!("record {rid}: t differs within the record")));
        }
        match &r[2] {
            "case" if p.case.is_some() => {
                return Err(parse_err(line, format!("record {rid}: more than one case row")))
            }
            "case" => p.case = Some((id, z)),
            "control" => p.controls.push(Control { id, z }),
            other => return Err(parse_err(line, format!("role must be case or control, got '{other}'"))),
        }
    }
    order
        .into_iter()
        .map(|rid| {
            let p = by_id.remove(&rid).expect("every ordered id has an entry");
            let (case_id, z_case) = p
                .case
                .ok_or_else(|| parse_err(p.first_line, format!("record {rid}: no case row")))?;
            Ok(NccRecord {
                t: p.t,
                case_id,
                z_case,
                controls: p.controls,
            })
        })
        .collect()
}

/// Reads and validates an ncc file. The file does not carry the cohort
/// size, so `n` is supplied; `m` defaults to the largest control count,
/// and a record with fewer controls implies the adapt shortfall policy.
pub fn read_ncc(path: &Path, n: usize, m: Option<usize>, tau: f64) -> Result<NccDataset> {
    let recs = read_ncc_records(path)?;
    let largest = recs.iter().map(NccRecord::m).max().unwrap_or(0);
    let m = m.unwrap_or(largest);
    let policy = if recs.iter().any(|r| r.m() < m) {
        ShortfallPolicy::Adapt
    } else {
        ShortfallPolicy::Drop
    };
    NccDataset::new(recs, n, m, tau, policy)
}

// ---- external full-cohort data ----

/// Writes `subjects.csv` (`id,y,delta`) and `covariates_long.csv`
/// (`id,t,z1..zd` at every failure time for every subject at risk).
pub fn write_cox_external(subjects_path: &Path, covariates_path: &Path, cohort: &Cohort) -> Result<()> {
    let mut ws = writer(subjects_path)?;
    ws.write_record(["id", "y", "delta"]).map_err(csv_err)?;
    for s in cohort.subjects() {
        ws.write_record([s.id.to_string(), fmt_f64(s.y), u8::from(s.delta).to_string()])
            .map_err(csv_err)?;
    }
    ws.flush()?;
    let mut wc = writer(covariates_path)?;
    let mut header = vec!["id".to_string(), "t".into()];
    header.extend(z_header(cohort.dim()));
    wc.write_record(&header).map_err(csv_err)?;
    let mut times: Vec<f64> = cohort.subjects().iter().filter(|s| s.delta).map(|s| s.y).collect();
    times.sort_by(f64::total_cmp);
    for t in times {
        for s in cohort.subjects().iter().filter(|s| s.y >= t) {
            let mut row = vec![s.id.to_string(), fmt_f64(t)];
            row.extend(s.path.eval(t).iter().map(|x| fmt_f64(*x)));
            wc.write_record(&row).map_err(csv_err)?;
        }
    }
    wc.flush()?;
    Ok(())
}

/// Builds Cox risk sets from external subject and long-format covariate files.
pub fn read_cox_external(subjects_path: &Path, covariates_path: &Path) -> Result<CoxRiskSets> {
    let mut rdr = reader(subjects_path)?;
    expect_header(&mut rdr, &["id", "y", "delta"])?;
    let mut subjects: Vec<(SubjectId, f64, bool)> = Vec::new();
    for rec in records(&mut rdr) {
        let (line, r) = rec?;
        subjects.push((
            parse_field(&r[0], line, "id")?,
            parse_field(&r[1], line, "y")?,
            parse_delta(&r[2], line)?,
        ));
    }
    let mut rdr = reader(covariates_path)?;
    let header = expect_header(&mut rdr, &["id", "t"])?;
    let d = covariate_columns(&header, 2)?;
    let mut z_at: HashMap<(SubjectId, u64), Vec<f64>> = HashMap::new();
    for rec in records(&mut rdr) {
        let (line, r) = rec?;
        let id: SubjectId = parse_field(&r[0], line, "id")?;
        let t: f64 = parse_field(&r[1], line, "t")?;
        let z = (2..2 + d)
            .map(|k| parse_field(&r[k], line, &header[k]))
            .collect::<Result<Vec<f64>>>()?;
        if z_at.insert((id, t.to_bits()), z).is_some() {
            return Err(parse_err(line, format!("duplicate covariate row for subject {id} at t = {t}")));
        }
    }
    let mut events = Vec::new();
    for &(case_id, t, _) in subjects.iter().filter(|s| s.2) {
        let mut members = Vec::new();
        let mut case = 0;
        for (row, &(id, _, _)) in subjects.iter().filter(|s| s.1 >= t).enumerate() {
            if id == case_id {
                case = row;
            }
            let z = z_at
                .get(&(id, t.to_bits()))
                .ok_or_else(|| Error::invalid(format!("no covariate row for subject {id} at failure time {t}")))?;
            members.extend_from_slice(z);
        }
        events.push(RiskSetEvent { t, case, members });
    }
    CoxRiskSets::new(d, subjects.len(), events)
}

// ---- outputs ----

fn component_label(e: Estimator, c: usize, d: usize) -> String {
    if d == 1 {
        e.name().to_string()
    } else {
        format!("{}:z{}", e.name(), c + 1)
    }
}

fn beta_label(beta: &[f64]) -> String {
    beta.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(":")
}

/// `scenario,beta,m,censoring,estimator,reps,failures,ave_est,emp_var,est_var,cen_prop,seed`;
/// one row per estimator and covariate component.
pub fn write_summaries(path: &Path, summaries: &[ScenarioSummary]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([
        "scenario", "beta", "m", "censoring", "estimator", "reps", "failures", "ave_est", "emp_var", "est_var",
        "cen_prop", "seed",
    ])
    .map_err(csv_err)?;
    for s in summaries {
        let d = s.beta.len();
        for e in &s.estimators {
            for c in 0..d {
                w.write_record([
                    s.scenario.clone(),
                    beta_label(&s.beta),
                    s.m.to_string(),
                    s.censoring.clone(),
                    component_label(e.estimator, c, d),
                    s.reps.to_string(),
                    e.failures.to_string(),
                    fmt_f64(e.ave_est[c]),
                    fmt_f64(e.emp_var[c]),
                    fmt_f64(e.est_var[c]),
                    fmt_f64(s.cen_prop),
                    s.seed.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Side-by-side cells: simulated value, published value, and their difference.
pub fn write_table1_report(path: &Path, report: &Table1Report) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([
        "censoring", "beta", "m", "estimator", "reps", "failures", "ave_est", "paper_ave_est", "dev_ave_est",
        "emp_var", "paper_emp_var", "dev_emp_var", "est_var", "paper_est_var", "dev_est_var", "cen_prop",
        "paper_cen_prop", "dev_cen_prop", "seed",
    ])
    .map_err(csv_err)?;
    for b in &report.blocks {
        for e in Estimator::ALL {
            let s = b.summary.get(e);
            let p = b.paper_cell(e);
            let mut row = vec![
                b.censoring.clone(),
                b.beta.to_string(),
                b.m.to_string(),
                e.name().to_string(),
                report.reps.to_string(),
                s.failures.to_string(),
            ];
            for (ours, paper) in [(s.ave_est[0], p.ave_est), (s.emp_var[0], p.emp_var), (s.est_var[0], p.est_var), (b.summary.cen_prop, b.paper_cen_prop)] {
                row.extend([fmt_f64(ours), paper.to_string(), fmt_f64(ours - paper)]);
            }
            row.push(report.seed.to_string());
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Variance ratios per block, simulated beside published.
pub fn write_table1_ratios(path: &Path, report: &Table1Report) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["censoring", "beta", "m", "ratio", "value", "paper_value"])
        .map_err(csv_err)?;
    let pairs = [
        ("proposed/thomas", Estimator::Proposed, Estimator::Thomas),
        ("thomas/cox", Estimator::Thomas, Estimator::Cox),
        ("proposed/cox", Estimator::Proposed, Estimator::Cox),
    ];
    for b in &report.blocks {
        for (name, a, c) in pairs {
            w.write_record([
                b.censoring.clone(),
                b.beta.to_string(),
                b.m.to_string(),
                name.to_string(),
                fmt_f64(b.var_ratio(a, c)),
                fmt_f64(b.paper_var_ratio(a, c)),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `quantity,i,j,value,se` for each information matrix, followed by the
/// smallest eigenvalue of `Sigma_P^{-1} - Sigma^{-1}` when supplied.
pub fn write_theory(path: &Path, report: &TheoryReport, proposition: Option<&PropositionReport>) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["quantity", "i", "j", "value", "se"]).map_err(csv_err)?;
    let d = report.dim();
    let mats = [
        ("sigma_c", &report.sigma_c, &report.se_c),
        ("sigma_a", &report.sigma_a, &report.se_a),
        ("sigma_p", &report.sigma_p, &report.se_p),
        ("sigma_p_alt", &report.sigma_p_alt, &report.se_p_alt),
        ("sigma", &report.sigma, &report.se),
    ];
    for (name, m, se) in mats {
        for i in 0..d {
            for j in 0..d {
                w.write_record([name.to_string(), i.to_string(), j.to_string(), fmt_f64(m[(i, j)]), fmt_f64(se[(i, j)])])
                    .map_err(csv_err)?;
            }
        }
    }
    if let Some(p) = proposition {
        w.write_record([
            "min_eigenvalue_gap".to_string(),
            "0".into(),
            "0".into(),
            fmt_f64(p.min_eigenvalue),
            fmt_f64(p.min_eigenvalue_se),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
