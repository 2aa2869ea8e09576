//! CSV ingestion with structured validation reports.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use csv::StringRecord;
use epigam::hosp::{HospPanel, FINE_AGE_GROUPS, GENDERS};
use epigam::icu::{round_counts, IcuPanel, ICU_AGE_GROUPS};
use epigam::infection::{PopulationTable, WeeklyPanel};
use epigam::nowcast::LineRecord;
use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{CliError, Issue};

pub const INFECTION_PANEL: &str = "panel.csv";
pub const INFECTION_POPULATION: &str = "population.csv";
pub const LINE_LIST: &str = "hosp_linelist.csv";
pub const HOSP_PANEL: &str = "hosp_panel.csv";
pub const HOSP_POPULATION: &str = "population_g.csv";
pub const COORDS: &str = "district_coords.csv";
pub const ICU_PANEL: &str = "icu_panel.csv";
pub const ICU_INCIDENCE: &str = "incidence.csv";

/// A CSV file held as raw records with their line numbers.
pub struct Table {
    pub file: String,
    headers: Vec<String>,
    rows: Vec<(usize, StringRecord)>,
}

impl Table {
    pub fn read(path: &Path, required: &[&str]) -> Result<Table, CliError> {
        let file = path.display().to_string();
        let f = File::open(path).map_err(|e| CliError::io(path, e))?;
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(f);
        let headers: Vec<String> = rdr
            .headers()
            .map_err(|e| CliError::Invalid(vec![Issue::file(&file, format!("unreadable header: {e}"))]))?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
        let missing: Vec<Issue> = required
            .iter()
            .filter(|c| !headers.iter().any(|h| h == *c))
            .map(|c| Issue::new(&file, Some(1), Some(c), "missing column"))
            .collect();
        if !missing.is_empty() {
            return Err(CliError::Invalid(missing));
        }
        let mut rows = Vec::new();
        let mut issues = Vec::new();
        for rec in rdr.records() {
            match rec {
                Ok(r) => {
                    let line = r.position().map_or(0, |p| p.line() as usize);
                    rows.push((line, r));
                }
                Err(e) => {
                    let line = e.position().map(|p| p.line() as usize);
                    issues.push(Issue::new(&file, line, None, &format!("malformed record: {e}")));
                }
            }
        }
        if !issues.is_empty() {
            return Err(CliError::Invalid(issues));
        }
        Ok(Table { file, headers, rows })
    }

    fn col(&self, name: &str) -> usize {
        self.headers.iter().position(|h| h == name).expect("required column")
    }
}

/// Typed field access that accumulates issues instead of failing early.
struct Fields<'a> {
    table: &'a Table,
    cols: HashMap<&'a str, usize>,
    issues: Vec<Issue>,
}

impl<'a> Fields<'a> {
    fn new(table: &'a Table, names: &[&'a str]) -> Self {
        Self {
            table,
            cols: names.iter().map(|n| (*n, table.col(n))).collect(),
            issues: Vec::new(),
        }
    }

    fn raw(&self, rec: &'a StringRecord, name: &str) -> &'a str {
        rec.get(self.cols[name]).unwrap_or("").trim()
    }

    fn push(&mut self, line: usize, column: &str, reason: String) {
        self.issues.push(Issue::new(&self.table.file, Some(line), Some(column), &reason));
    }

    fn text(&mut self, line: usize, rec: &'a StringRecord, name: &str) -> Option<String> {
        let v = self.raw(rec, name);
        if v.is_empty() {
            self.push(line, name, "empty value".into());
            None
        } else {
            Some(v.to_string())
        }
    }

    fn date(&mut self, line: usize, rec: &'a StringRecord, name: &str) -> Option<NaiveDate> {
        let v = self.raw(rec, name);
        match NaiveDate::parse_from_str(v, "%Y-%m-%d") {
            Ok(d) => Some(d),
            Err(_) => {
                self.push(line, name, format!("'{v}' is not an ISO 8601 date"));
                None
            }
        }
    }

    fn optional_date(&mut self, line: usize, rec: &'a StringRecord, name: &str) -> Option<Option<NaiveDate>> {
        if self.raw(rec, name).is_empty() {
            Some(None)
        } else {
            self.date(line, rec, name).map(Some)
        }
    }

    fn number(&mut self, line: usize, rec: &'a StringRecord, name: &str) -> Option<f64> {
        let v = self.raw(rec, name);
        match v.parse::<f64>() {
            Ok(x) if x.is_finite() => Some(x),
            _ => {
                self.push(line, name, format!("'{v}' is not a finite number"));
                None
            }
        }
    }

    fn non_negative(&mut self, line: usize, rec: &'a StringRecord, name: &str) -> Option<f64> {
        let x = self.number(line, rec, name)?;
        if x < 0.0 {
            self.push(line, name, format!("negative value {x}"));
            return None;
        }
        Some(x)
    }

    fn count(&mut self, line: usize, rec: &'a StringRecord, name: &str) -> Option<f64> {
        let x = self.non_negative(line, rec, name)?;
        if x.fract() != 0.0 {
            self.push(line, name, format!("count {x} is not an integer"));
            return None;
        }
        Some(x)
    }

    fn positive(&mut self, line: usize, rec: &'a StringRecord, name: &str) -> Option<f64> {
        let x = self.number(line, rec, name)?;
        if x <= 0.0 {
            self.push(line, name, format!("value {x} must be positive"));
            return None;
        }
        Some(x)
    }

    fn finish<T>(self, value: T) -> Result<T, CliError> {
        if self.issues.is_empty() {
            Ok(value)
        } else {
            Err(CliError::Invalid(self.issues))
        }
    }
}

fn duplicate(file: &str, line: usize, first: usize, key: String) -> Issue {
    Issue::new(file, Some(line), None, &format!("duplicate key {key} (first on line {first})"))
}

fn fk(file: &str, line: Option<usize>, column: &str, what: &str, value: &str, target: &str) -> Issue {
    Issue::new(file, line, Some(column), &format!("{what} '{value}' not found in {target}"))
}

fn invalid_if(issues: Vec<Issue>) -> Result<(), CliError> {
    if issues.is_empty() {
        Ok(())
    } else {
        Err(CliError::Invalid(issues))
    }
}

/// Orders labels by a canonical list, unknown labels last in sorted order.
fn canonical_order(labels: BTreeSet<String>, canon: &[&str]) -> Vec<String> {
    let mut out: Vec<String> = canon.iter().filter(|c| labels.contains(**c)).map(|c| c.to_string()).collect();
    out.extend(labels.into_iter().filter(|l| !canon.contains(&l.as_str())));
    out
}

fn index(labels: &[String]) -> HashMap<&str, usize> {
    labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect()
}

pub struct InfectionBundle {
    pub panel: WeeklyPanel,
    pub population: PopulationTable,
    /// Grid cells absent from the panel file, filled with zero.
    pub zero_filled: usize,
}

/// Week labels sort lexicographically; ISO `YYYY-Www` labels are also
/// checked for gaps.
pub fn load_infection(panel_path: &Path, pop_path: &Path) -> Result<InfectionBundle, CliError> {
    let pt = Table::read(panel_path, &["week", "district", "age_group", "count"])?;
    let pop = Table::read(pop_path, &["district", "age_group", "population"])?;

    let mut f = Fields::new(&pop, &["district", "age_group", "population"]);
    let mut pop_rows: BTreeMap<(String, String), (usize, f64)> = BTreeMap::new();
    let mut dup = Vec::new();
    for (line, rec) in &pop.rows {
        let (Some(d), Some(a), Some(v)) = (
            f.text(*line, rec, "district"),
            f.text(*line, rec, "age_group"),
            f.positive(*line, rec, "population"),
        ) else {
            continue;
        };
        if let Some((first, _)) = pop_rows.get(&(d.clone(), a.clone())) {
            dup.push(duplicate(&pop.file, *line, *first, format!("({d}, {a})")));
            continue;
        }
        pop_rows.insert((d, a), (*line, v));
    }
    f.issues.extend(dup);
    f.finish(())?;

    let mut f = Fields::new(&pt, &["week", "district", "age_group", "count"]);
    let mut cells: BTreeMap<(String, String, String), (usize, f64)> = BTreeMap::new();
    let mut dup = Vec::new();
    for (line, rec) in &pt.rows {
        let (Some(w), Some(d), Some(a), Some(c)) = (
            f.text(*line, rec, "week"),
            f.text(*line, rec, "district"),
            f.text(*line, rec, "age_group"),
            f.count(*line, rec, "count"),
        ) else {
            continue;
        };
        let key = (w, d, a);
        if let Some((first, _)) = cells.get(&key) {
            dup.push(duplicate(&pt.file, *line, *first, format!("({}, {}, {})", key.0, key.1, key.2)));
            continue;
        }
        cells.insert(key, (*line, c));
    }
    f.issues.extend(dup);
    f.finish(())?;

    let weeks: BTreeSet<String> = cells.keys().map(|k| k.0.clone()).collect();
    let districts: BTreeSet<String> = cells.keys().map(|k| k.1.clone()).collect();
    let ages: BTreeSet<String> = cells.keys().map(|k| k.2.clone()).collect();
    let pop_d: BTreeSet<&str> = pop_rows.keys().map(|k| k.0.as_str()).collect();
    let pop_a: BTreeSet<&str> = pop_rows.keys().map(|k| k.1.as_str()).collect();
    let mut issues = Vec::new();
    for ((_, d, a), (line, _)) in &cells {
        if !pop_d.contains(d.as_str()) {
            issues.push(fk(&pt.file, Some(*line), "district", "district", d, &pop.file));
        } else if !pop_a.contains(a.as_str()) {
            issues.push(fk(&pt.file, Some(*line), "age_group", "age group", a, &pop.file));
        }
    }
    for d in &districts {
        for a in &ages {
            if !pop_rows.contains_key(&(d.clone(), a.clone())) && pop_d.contains(d.as_str()) && pop_a.contains(a.as_str()) {
                issues.push(Issue::new(&pop.file, None, None, &format!("missing population for ({d}, {a})")));
            }
        }
    }
    let dates: Option<Vec<NaiveDate>> = weeks.iter().map(|w| crate::synth::parse_iso_week(w)).collect();
    if let Some(dates) = dates {
        let missing: Vec<String> = dates
            .windows(2)
            .flat_map(|p| (1..(p[1] - p[0]).num_weeks()).map(move |k| crate::synth::iso_week_label(p[0] + chrono::Days::new(7 * k as u64))))
            .collect();
        if !missing.is_empty() {
            issues.push(Issue::file(&pt.file, format!("missing weeks: {}", missing.join(", "))));
        }
    }
    invalid_if(issues)?;

    let weeks: Vec<String> = weeks.into_iter().collect();
    let districts: Vec<String> = districts.into_iter().collect();
    let ages: Vec<String> = ages.into_iter().collect();
    let (wi, ri, ai) = (index(&weeks), index(&districts), index(&ages));
    let mut panel = WeeklyPanel::zeros(weeks.clone(), districts.clone(), ages.clone());
    for ((w, d, a), (_, c)) in &cells {
        panel.set(wi[w.as_str()], ri[d.as_str()], ai[a.as_str()], *c);
    }
    let population = PopulationTable {
        pop: DMatrix::from_fn(districts.len(), ages.len(), |r, a| {
            pop_rows[&(districts[r].clone(), ages[a].clone())].1
        }),
    };
    let zero_filled = weeks.len() * districts.len() * ages.len() - cells.len();
    Ok(InfectionBundle {
        panel,
        population,
        zero_filled,
    })
}

pub fn load_line_list(path: &Path) -> Result<Vec<LineRecord>, CliError> {
    let cols = [
        "case_id",
        "admission_date",
        "infection_report_date",
        "registry_report_date",
        "age_group",
        "gender",
        "district",
    ];
    let t = Table::read(path, &cols)?;
    let mut f = Fields::new(&t, &cols);
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut out = Vec::with_capacity(t.rows.len());
    let mut dup = Vec::new();
    for (line, rec) in &t.rows {
        let id = f.text(*line, rec, "case_id");
        let adm = f.optional_date(*line, rec, "admission_date");
        let inf = f.optional_date(*line, rec, "infection_report_date");
        let rep = f.date(*line, rec, "registry_report_date");
        let age = f.text(*line, rec, "age_group");
        let gender = f.text(*line, rec, "gender");
        let district = f.text(*line, rec, "district");
        let (Some(id), Some(adm), Some(inf), Some(rep), Some(age), Some(gender), Some(district)) =
            (id, adm, inf, rep, age, gender, district)
        else {
            continue;
        };
        if let Some(first) = seen.get(&id) {
            dup.push(duplicate(&t.file, *line, *first, format!("case_id {id}")));
            continue;
        }
        seen.insert(id.clone(), *line);
        out.push(LineRecord {
            case_id: id,
            admission_date: adm,
            infection_report_date: inf,
            report_date: rep,
            age_group: age,
            gender,
            district,
        });
    }
    f.issues.extend(dup);
    f.finish(out)
}

pub fn load_coords(path: &Path) -> Result<BTreeMap<String, (f64, f64)>, CliError> {
    let t = Table::read(path, &["district", "lon", "lat"])?;
    let mut f = Fields::new(&t, &["district", "lon", "lat"]);
    let mut out: BTreeMap<String, (f64, f64)> = BTreeMap::new();
    let mut lines: HashMap<String, usize> = HashMap::new();
    let mut dup = Vec::new();
    for (line, rec) in &t.rows {
        let (Some(d), Some(lon), Some(lat)) = (
            f.text(*line, rec, "district"),
            f.number(*line, rec, "lon"),
            f.number(*line, rec, "lat"),
        ) else {
            continue;
        };
        if let Some(first) = lines.get(&d) {
            dup.push(duplicate(&t.file, *line, *first, format!("district {d}")));
            continue;
        }
        lines.insert(d.clone(), *line);
        out.insert(d, (lon, lat));
    }
    f.issues.extend(dup);
    f.finish(out)
}

pub struct HospBundle {
    pub panel: HospPanel,
    pub zero_filled: usize,
    /// Rows dated outside `[start, as_of)`, left out.
    pub outside_window: usize,
}

/// Panel over event days `start..as_of`; districts and cells come from the
/// population table, which must be complete.
pub fn load_hosp(
    panel_path: &Path,
    pop_path: &Path,
    coords_path: &Path,
    start: Option<NaiveDate>,
    as_of: NaiveDate,
) -> Result<HospBundle, CliError> {
    let coords = load_coords(coords_path)?;
    let pcols = ["district", "age_group", "gender", "population"];
    let pt = Table::read(pop_path, &pcols)?;
    let mut f = Fields::new(&pt, &pcols);
    let mut pop: BTreeMap<(String, String, String), (usize, f64)> = BTreeMap::new();
    let mut dup = Vec::new();
    for (line, rec) in &pt.rows {
        let (Some(d), Some(a), Some(g), Some(v)) = (
            f.text(*line, rec, "district"),
            f.text(*line, rec, "age_group"),
            f.text(*line, rec, "gender"),
            f.non_negative(*line, rec, "population"),
        ) else {
            continue;
        };
        let key = (d, a, g);
        if let Some((first, _)) = pop.get(&key) {
            dup.push(duplicate(&pt.file, *line, *first, format!("({}, {}, {})", key.0, key.1, key.2)));
            continue;
        }
        pop.insert(key, (*line, v));
    }
    f.issues.extend(dup);
    f.finish(())?;

    let districts: Vec<String> = pop.keys().map(|k| k.0.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let ages = canonical_order(pop.keys().map(|k| k.1.clone()).collect(), &FINE_AGE_GROUPS);
    let genders = canonical_order(pop.keys().map(|k| k.2.clone()).collect(), &GENDERS);
    let mut issues = Vec::new();
    for d in &districts {
        if !coords.contains_key(d) {
            issues.push(fk(&pt.file, None, "district", "district", d, &coords_path.display().to_string()));
        }
        for a in &ages {
            for g in &genders {
                if !pop.contains_key(&(d.clone(), a.clone(), g.clone())) {
                    issues.push(Issue::new(&pt.file, None, None, &format!("missing population for ({d}, {a}, {g})")));
                }
            }
        }
    }
    invalid_if(issues)?;

    let cols = ["date", "district", "age_group", "gender", "reported_count"];
    let t = Table::read(panel_path, &cols)?;
    let mut f = Fields::new(&t, &cols);
    let mut cells: BTreeMap<(NaiveDate, String, String, String), (usize, f64)> = BTreeMap::new();
    let mut dup = Vec::new();
    let (di, ai, gi) = (index(&districts), index(&ages), index(&genders));
    for (line, rec) in &t.rows {
        let (Some(date), Some(d), Some(a), Some(g), Some(c)) = (
            f.date(*line, rec, "date"),
            f.text(*line, rec, "district"),
            f.text(*line, rec, "age_group"),
            f.text(*line, rec, "gender"),
            f.count(*line, rec, "reported_count"),
        ) else {
            continue;
        };
        if !di.contains_key(d.as_str()) {
            dup.push(fk(&t.file, Some(*line), "district", "district", &d, &pt.file));
            continue;
        }
        if !ai.contains_key(a.as_str()) {
            dup.push(fk(&t.file, Some(*line), "age_group", "age group", &a, &pt.file));
            continue;
        }
        if !gi.contains_key(g.as_str()) {
            dup.push(fk(&t.file, Some(*line), "gender", "gender", &g, &pt.file));
            continue;
        }
        let key = (date, d, a, g);
        if let Some((first, _)) = cells.get(&key) {
            dup.push(duplicate(&t.file, *line, *first, format!("({}, {}, {}, {})", key.0, key.1, key.2, key.3)));
            continue;
        }
        cells.insert(key, (*line, c));
    }
    f.issues.extend(dup);
    f.finish(())?;

    let start = match start.or_else(|| cells.keys().map(|k| k.0).min()) {
        Some(s) => s,
        None => return Err(CliError::Invalid(vec![Issue::file(&t.file, "no data rows".into())])),
    };
    let population = DMatrix::from_fn(districts.len(), ages.len() * genders.len(), |r, c| {
        let (a, g) = (c / genders.len(), c % genders.len());
        pop[&(districts[r].clone(), ages[a].clone(), genders[g].clone())].1
    });
    let coord_list = districts.iter().map(|d| coords[d]).collect();
    let mut panel = HospPanel::zeros(start, as_of, districts.clone(), coord_list, ages, genders, population)
        .map_err(|e| CliError::Pipeline(e.to_string()))?;
    let mut used = 0;
    let mut outside = 0;
    for ((date, d, a, g), (_, c)) in &cells {
        if *date < start || *date >= as_of {
            outside += 1;
            continue;
        }
        let t = (*date - start).num_days() as usize + 1;
        let cell = panel.cell_index(a, g).expect("known cell");
        panel.set(t, di[d.as_str()], cell, *c);
        used += 1;
    }
    let zero_filled = panel.days() * panel.districts.len() * panel.cells() - used;
    Ok(HospBundle {
        panel,
        zero_filled,
        outside_window: outside,
    })
}

pub struct IcuBundle {
    pub panel: IcuPanel,
    /// Bed counts changed by rounding to integers.
    pub rounded: usize,
    pub zero_filled_incidence: usize,
}

/// Bed rows must cover every week × district; missing incidence cells are
/// zero. Weeks are ISO dates of the week start.
pub fn load_icu(panel_path: &Path, inc_path: &Path, coords_path: &Path) -> Result<IcuBundle, CliError> {
    let coords = load_coords(coords_path)?;
    let cols = ["week", "district", "beds_free", "beds_covid", "beds_noncovid"];
    let t = Table::read(panel_path, &cols)?;
    let mut f = Fields::new(&t, &cols);
    let mut beds: BTreeMap<(NaiveDate, String), (usize, [f64; 3])> = BTreeMap::new();
    let mut dup = Vec::new();
    let mut rounded = 0;
    for (line, rec) in &t.rows {
        let w = f.date(*line, rec, "week");
        let d = f.text(*line, rec, "district");
        let z: Vec<Option<f64>> = cols[2..].iter().map(|c| f.non_negative(*line, rec, c)).collect();
        let (Some(w), Some(d), Some(z0), Some(z1), Some(z2)) = (w, d, z[0], z[1], z[2]) else {
            continue;
        };
        let raw = [z0, z1, z2];
        let z = raw.map(round_counts);
        rounded += raw.iter().zip(&z).filter(|(a, b)| a != b).count();
        if !coords.contains_key(&d) {
            dup.push(fk(&t.file, Some(*line), "district", "district", &d, &coords_path.display().to_string()));
            continue;
        }
        if let Some((first, _)) = beds.get(&(w, d.clone())) {
            dup.push(duplicate(&t.file, *line, *first, format!("({w}, {d})")));
            continue;
        }
        beds.insert((w, d), (*line, z));
    }
    f.issues.extend(dup);
    f.finish(())?;

    let weeks: Vec<NaiveDate> = beds.keys().map(|k| k.0).collect::<BTreeSet<_>>().into_iter().collect();
    let districts: Vec<String> = beds.keys().map(|k| k.1.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let mut issues = Vec::new();
    for w in &weeks {
        for d in &districts {
            if !beds.contains_key(&(*w, d.clone())) {
                issues.push(Issue::new(&t.file, None, None, &format!("missing bed counts for ({w}, {d})")));
            }
        }
    }
    invalid_if(issues)?;
    let coord_list = districts.iter().map(|d| coords[d]).collect();
    let mut panel =
        IcuPanel::zeros(weeks.clone(), districts.clone(), coord_list).map_err(|e| {
            CliError::Invalid(vec![Issue::new(&t.file, None, Some("week"), &e.to_string())])
        })?;
    let (wi, di) = (
        weeks.iter().enumerate().map(|(i, w)| (*w, i)).collect::<HashMap<_, _>>(),
        index(&districts),
    );
    for ((w, d), (_, z)) in &beds {
        panel
            .set_beds(wi[w], di[d.as_str()], *z)
            .map_err(|e| CliError::Pipeline(e.to_string()))?;
    }

    let icols = ["week", "district", "age_group", "incidence_per_100k"];
    let it = Table::read(inc_path, &icols)?;
    let mut f = Fields::new(&it, &icols);
    let mut inc: BTreeMap<(NaiveDate, String, String), (usize, f64)> = BTreeMap::new();
    let mut dup = Vec::new();
    for (line, rec) in &it.rows {
        let (Some(w), Some(d), Some(a), Some(v)) = (
            f.date(*line, rec, "week"),
            f.text(*line, rec, "district"),
            f.text(*line, rec, "age_group"),
            f.non_negative(*line, rec, "incidence_per_100k"),
        ) else {
            continue;
        };
        if !wi.contains_key(&w) {
            dup.push(fk(&it.file, Some(*line), "week", "week", &w.to_string(), &t.file));
            continue;
        }
        if !di.contains_key(d.as_str()) {
            dup.push(fk(&it.file, Some(*line), "district", "district", &d, &t.file));
            continue;
        }
        if !ICU_AGE_GROUPS.contains(&a.as_str()) {
            dup.push(Issue::new(
                &it.file,
                Some(*line),
                Some("age_group"),
                &format!("age group '{a}' is not one of {}", ICU_AGE_GROUPS.join(", ")),
            ));
            continue;
        }
        let key = (w, d, a);
        if let Some((first, _)) = inc.get(&key) {
            dup.push(duplicate(&it.file, *line, *first, format!("({}, {}, {})", key.0, key.1, key.2)));
            continue;
        }
        inc.insert(key, (*line, v));
    }
    f.issues.extend(dup);
    f.finish(())?;
    let mut filled = 0;
    for (w, week) in weeks.iter().enumerate() {
        for (r, d) in districts.iter().enumerate() {
            let mut y = [0.0; 4];
            for (a, age) in ICU_AGE_GROUPS.iter().enumerate() {
                match inc.get(&(*week, d.clone(), age.to_string())) {
                    Some((_, v)) => y[a] = *v,
                    None => filled += 1,
                }
            }
            panel
                .set_incidence(w, r, y)
                .map_err(|e| CliError::Pipeline(e.to_string()))?;
        }
    }
    Ok(IcuBundle {
        panel,
        rounded,
        zero_filled_incidence: filled,
    })
}

/// Foreign-key check of a line list against a coordinate table.
pub fn check_line_list_districts(
    records: &[LineRecord],
    list_file: &str,
    coords: &BTreeMap<String, (f64, f64)>,
    coords_file: &str,
) -> Result<(), CliError> {
    let missing: BTreeSet<&str> = records
        .iter()
        .map(|r| r.district.as_str())
        .filter(|d| !coords.contains_key(*d))
        .collect();
    invalid_if(
        missing
            .into_iter()
            .map(|d| fk(list_file, None, "district", "district", d, coords_file))
            .collect(),
    )
}

/// Summary of one validated file group.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct BundleReport {
    pub kind: String,
    pub files: Vec<String>,
    pub ok: bool,
    pub summary: BTreeMap<String, serde_json::Value>,
    pub issues: Vec<Issue>,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ValidationReport {
    pub ok: bool,
    pub bundles: Vec<BundleReport>,
}

fn report(kind: &str, files: Vec<PathBuf>, result: Result<BTreeMap<String, serde_json::Value>, CliError>) -> BundleReport {
    let files = files.iter().map(|p| p.display().to_string()).collect();
    match result {
        Ok(summary) => BundleReport {
            kind: kind.into(),
            files,
            ok: true,
            summary,
            issues: Vec::new(),
        },
        Err(e) => BundleReport {
            kind: kind.into(),
            files,
            ok: false,
            summary: BTreeMap::new(),
            issues: e.issues(),
        },
    }
}

fn summary(pairs: &[(&str, serde_json::Value)]) -> BTreeMap<String, serde_json::Value> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

/// Validates every recognised file group present in `dir`.
pub fn validate_dir(dir: &Path) -> Result<ValidationReport, CliError> {
    let p = |n: &str| dir.join(n);
    let has = |n: &str| p(n).is_file();
    let mut bundles = Vec::new();
    if has(INFECTION_PANEL) || has(INFECTION_POPULATION) {
        let files = vec![p(INFECTION_PANEL), p(INFECTION_POPULATION)];
        let r = load_infection(&files[0], &files[1]).map(|b| {
            let (w, r, a) = b.panel.dims();
            summary(&[
                ("weeks", w.into()),
                ("districts", r.into()),
                ("age_groups", a.into()),
                ("zero_filled", b.zero_filled.into()),
            ])
        });
        bundles.push(report("infection", files, r));
    }
    if has(LINE_LIST) {
        let mut files = vec![p(LINE_LIST)];
        let r = load_line_list(&files[0]).and_then(|recs| {
            if has(COORDS) {
                files.push(p(COORDS));
                let c = load_coords(&p(COORDS))?;
                check_line_list_districts(&recs, &p(LINE_LIST).display().to_string(), &c, &p(COORDS).display().to_string())?;
            }
            let missing = recs.iter().filter(|r| r.admission_date.is_none()).count();
            Ok(summary(&[("records", recs.len().into()), ("missing_admission", missing.into())]))
        });
        bundles.push(report("line_list", files, r));
    }
    if has(HOSP_PANEL) || has(HOSP_POPULATION) {
        let files = vec![p(HOSP_PANEL), p(HOSP_POPULATION), p(COORDS)];
        let r = (|| {
            let dates = Table::read(&files[0], &["date"])?;
            let mut f = Fields::new(&dates, &["date"]);
            let ds: Vec<NaiveDate> = dates.rows.iter().filter_map(|(l, rec)| f.date(*l, rec, "date")).collect();
            f.finish(())?;
            let Some(last) = ds.iter().max() else {
                return Err(CliError::Invalid(vec![Issue::file(&dates.file, "no data rows".into())]));
            };
            let b = load_hosp(&files[0], &files[1], &files[2], None, *last + chrono::Days::new(1))?;
            Ok(summary(&[
                ("days", b.panel.days().into()),
                ("districts", b.panel.districts.len().into()),
                ("cells", b.panel.cells().into()),
                ("zero_filled", b.zero_filled.into()),
            ]))
        })();
        bundles.push(report("hosp", files, r));
    }
    if has(ICU_PANEL) || has(ICU_INCIDENCE) {
        let files = vec![p(ICU_PANEL), p(ICU_INCIDENCE), p(COORDS)];
        let r = load_icu(&files[0], &files[1], &files[2]).map(|b| {
            summary(&[
                ("weeks", b.panel.n_weeks().into()),
                ("districts", b.panel.n_districts().into()),
                ("rounded", b.rounded.into()),
                ("zero_filled_incidence", b.zero_filled_incidence.into()),
            ])
        });
        bundles.push(report("icu", files, r));
    }
    if bundles.is_empty() {
        return Err(CliError::Invalid(vec![Issue::file(
            &dir.display().to_string(),
            "no recognised input files".into(),
        )]));
    }
    Ok(ValidationReport {
        ok: bundles.iter().all(|b| b.ok),
        bundles,
    })
}
