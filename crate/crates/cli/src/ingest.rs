//! Monthly station CSV ingestion: schema check, row validation with line
//! numbers, quarterly aggregation, and the normalized re-emittable form.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use stdecomp::error::{Error, Result};
use stdecomp::mesh::Point2D;
use stdecomp::model::{Dataset, Period, Station};

/// Required header, in this exact column order.
pub const SCHEMA: [&str; 8] = [
    "station_id",
    "lon",
    "lat",
    "altitude",
    "dist_sea_km",
    "year",
    "month",
    "value",
];

/// Monthly to quarterly reduction rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    /// Average of the months present; requires a minimum count.
    Mean,
    /// Total over the quarter; requires all three months.
    Sum,
}

impl Aggregation {
    pub fn parse(s: &str) -> Result<Aggregation> {
        match s {
            "mean" => Ok(Aggregation::Mean),
            "sum" => Ok(Aggregation::Sum),
            _ => Err(Error::config(format!(
                "aggregation must be mean or sum, got {s}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct StationMeta {
    lon: f64,
    lat: f64,
    altitude: f64,
    dist_sea_km: f64,
}

/// Quarterly dataset assembled from one or more monthly CSV files.
#[derive(Debug)]
pub struct IngestReport {
    pub dataset: Dataset,
    pub n_rows: usize,
    pub n_files: usize,
}

struct RawTable {
    stations: BTreeMap<String, StationMeta>,
    // (station, year, month) -> observed value; explicit missing months
    // are recorded in `seen` only
    values: BTreeMap<(String, i32, u8), f64>,
    seen: BTreeMap<(String, i32, u8), u64>,
    n_rows: usize,
}

/// Reads monthly rows from every path and aggregates them onto a
/// contiguous quarterly axis spanning the observed range.
pub fn ingest(
    paths: &[impl AsRef<Path>],
    variable: &str,
    agg: Aggregation,
    min_months_mean: usize,
) -> Result<IngestReport> {
    if paths.is_empty() {
        return Err(Error::config("no input files given".to_string()));
    }
    if !(1..=3).contains(&min_months_mean) {
        return Err(Error::config(format!(
            "min_months_mean must be 1..=3, got {min_months_mean}"
        )));
    }
    let mut table = RawTable {
        stations: BTreeMap::new(),
        values: BTreeMap::new(),
        seen: BTreeMap::new(),
        n_rows: 0,
    };
    for path in paths {
        read_file(path.as_ref(), &mut table)?;
    }
    let dataset = aggregate(&table, variable, agg, min_months_mean)?;
    Ok(IngestReport {
        dataset,
        n_rows: table.n_rows,
        n_files: paths.len(),
    })
}

fn read_file(path: &Path, table: &mut RawTable) -> Result<()> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(file);
    let where_ = |line: u64| format!("{}:{line}", path.display());

    let headers = rdr
        .headers()
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let got: Vec<&str> = headers.iter().collect();
    if got != SCHEMA {
        return Err(Error::data(format!(
            "{}: header must be `{}`, got `{}`",
            path.display(),
            SCHEMA.join(","),
            got.join(",")
        )));
    }

    for record in rdr.records() {
        let record = record.map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != SCHEMA.len() {
            return Err(Error::data(format!(
                "{}: expected {} fields, got {}",
                where_(line),
                SCHEMA.len(),
                record.len()
            )));
        }
        let field = |i: usize| record.get(i).unwrap_or("").trim();
        let num = |i: usize| -> Result<f64> {
            let raw = field(i);
            let v: f64 = raw.parse().map_err(|_| {
                Error::data(format!(
                    "{}: column {} is not a number: {raw}",
                    where_(line),
                    SCHEMA[i]
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::data(format!(
                    "{}: column {} is not finite: {raw}",
                    where_(line),
                    SCHEMA[i]
                )));
            }
            Ok(v)
        };

        let id = field(0);
        if id.is_empty() {
            return Err(Error::data(format!("{}: empty station_id", where_(line))));
        }
        let meta = StationMeta {
            lon: num(1)?,
            lat: num(2)?,
            altitude: num(3)?,
            dist_sea_km: num(4)?,
        };
        let year: i32 = field(5).parse().map_err(|_| {
            Error::data(format!("{}: column year is not an integer: {}", where_(line), field(5)))
        })?;
        let month: u8 = field(6).parse().map_err(|_| {
            Error::data(format!("{}: column month is not an integer: {}", where_(line), field(6)))
        })?;
        if !(1..=12).contains(&month) {
            return Err(Error::data(format!(
                "{}: month must be 1..=12, got {month}",
                where_(line)
            )));
        }
        let value = if field(7).is_empty() { None } else { Some(num(7)?) };

        match table.stations.get(id) {
            Some(prev) if *prev != meta => {
                return Err(Error::data(format!(
                    "{}: station {id} has inconsistent coordinates or covariates",
                    where_(line)
                )));
            }
            Some(_) => {}
            None => {
                table.stations.insert(id.to_string(), meta);
            }
        }

        let key = (id.to_string(), year, month);
        if let Some(first) = table.seen.get(&key) {
            return Err(Error::data(format!(
                "{}: duplicate row for station {id} {year}-{month:02} (first at line {first})",
                where_(line)
            )));
        }
        table.seen.insert(key.clone(), line);
        if let Some(v) = value {
            table.values.insert(key, v);
        }
        table.n_rows += 1;
    }
    Ok(())
}

fn quarter_of(month: u8) -> u8 {
    (month - 1) / 3 + 1
}

/// The three calendar months of a quarter.
pub fn months_of(quarter: u8) -> [u8; 3] {
    let m = 3 * quarter - 2;
    [m, m + 1, m + 2]
}

fn aggregate(
    table: &RawTable,
    variable: &str,
    agg: Aggregation,
    min_months_mean: usize,
) -> Result<Dataset> {
    if table.seen.is_empty() {
        return Err(Error::data("input holds no data rows".to_string()));
    }
    let mut first: Option<Period> = None;
    let mut last: Option<Period> = None;
    for (_, year, month) in table.seen.keys() {
        let p = Period::new(*year, quarter_of(*month))?;
        first = Some(first.map_or(p, |f| f.min(p)));
        last = Some(last.map_or(p, |l| l.max(p)));
    }
    let (first, last) = (first.unwrap(), last.unwrap());
    let mut times = vec![first];
    while *times.last().unwrap() != last {
        let next = times.last().unwrap().succ();
        times.push(next);
    }

    let stations: Vec<Station> = table
        .stations
        .iter()
        .map(|(id, meta)| Station {
            id: id.clone(),
            location: Point2D::new(meta.lon, meta.lat),
            covariates: BTreeMap::from([
                ("altitude".to_string(), meta.altitude),
                ("dist_sea_km".to_string(), meta.dist_sea_km),
            ]),
        })
        .collect();

    let mut values = Vec::with_capacity(stations.len() * times.len());
    for st in &stations {
        for period in &times {
            let mut months: Vec<f64> = Vec::with_capacity(3);
            for m in months_of(period.quarter) {
                if let Some(v) = table.values.get(&(st.id.clone(), period.year, m)) {
                    months.push(*v);
                }
            }
            let v = match agg {
                Aggregation::Mean if months.len() >= min_months_mean => {
                    // incremental mean: exact for constant sequences, so
                    // re-ingesting the emitted form reproduces the value
                    let mut mean = 0.0;
                    for (k, v) in months.iter().enumerate() {
                        mean += (v - mean) / (k + 1) as f64;
                    }
                    Some(mean)
                }
                Aggregation::Sum if months.len() == 3 => {
                    Some(months[0] + months[1] + months[2])
                }
                _ => None,
            };
            values.push(v);
        }
    }
    Dataset::new(stations, times, values, variable)
}

/// Writes a dataset back out in the ingestion schema, three monthly rows
/// per quarter. Mean variables repeat the quarterly value; sum variables
/// put the total in the first month with explicit zeros after it, so
/// either form re-aggregates to the identical dataset.
pub fn write_dataset_csv(dataset: &Dataset, agg: Aggregation, w: &mut impl Write) -> Result<()> {
    writeln!(w, "{}", SCHEMA.join(","))?;
    for s in 0..dataset.n_stations() {
        let st = dataset.station(s);
        let altitude = st.covariates.get("altitude").copied().unwrap_or(0.0);
        let dist = st.covariates.get("dist_sea_km").copied().unwrap_or(0.0);
        for (t, period) in dataset.times().iter().enumerate() {
            let value = dataset.value(s, t);
            for (k, month) in months_of(period.quarter).into_iter().enumerate() {
                let cell = match (value, agg, k) {
                    (None, _, _) => String::new(),
                    (Some(v), Aggregation::Mean, _) => format!("{v}"),
                    (Some(v), Aggregation::Sum, 0) => format!("{v}"),
                    (Some(_), Aggregation::Sum, _) => "0".to_string(),
                };
                writeln!(
                    w,
                    "{},{},{},{},{},{},{},{}",
                    st.id, st.location.x, st.location.y, altitude, dist, period.year, month, cell
                )?;
            }
        }
    }
    Ok(())
}

/// Share of stations reporting per period, as `(label, share)` rows.
pub fn observation_shares(dataset: &Dataset) -> Vec<(String, f64)> {
    dataset
        .times()
        .iter()
        .enumerate()
        .map(|(t, p)| (p.to_string(), dataset.observed_share_at(t)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn header() -> String {
        format!("{}\n", SCHEMA.join(","))
    }

    fn row(id: &str, year: i32, month: u8, value: &str) -> String {
        format!("{id},7.5,46.2,450,120,{year},{month},{value}\n")
    }

    #[test]
    fn mean_and_sum_aggregation_match_hand_values() {
        let csv = header()
            + &row("A", 2001, 1, "10")
            + &row("A", 2001, 2, "20")
            + &row("A", 2001, 3, "30");
        let f = write_tmp(&csv);

        let mean = ingest(&[f.path()], "t", Aggregation::Mean, 2).unwrap();
        assert_eq!(mean.dataset.n_times(), 1);
        assert_eq!(mean.dataset.value(0, 0), Some(20.0));

        let sum = ingest(&[f.path()], "p", Aggregation::Sum, 2).unwrap();
        assert_eq!(sum.dataset.value(0, 0), Some(60.0));
    }

    #[test]
    fn completeness_rules_gate_the_quarter() {
        // two of three months present
        let csv = header() + &row("A", 2001, 1, "10") + &row("A", 2001, 2, "20");
        let f = write_tmp(&csv);
        let mean = ingest(&[f.path()], "t", Aggregation::Mean, 2).unwrap();
        assert_eq!(mean.dataset.value(0, 0), Some(15.0));
        let strict = ingest(&[f.path()], "t", Aggregation::Mean, 3).unwrap();
        assert_eq!(strict.dataset.value(0, 0), None);
        let sum = ingest(&[f.path()], "p", Aggregation::Sum, 2).unwrap();
        assert_eq!(sum.dataset.value(0, 0), None);

        // an explicitly empty month does not count as present
        let csv = header()
            + &row("A", 2001, 1, "10")
            + &row("A", 2001, 2, "")
            + &row("A", 2001, 3, "30");
        let f = write_tmp(&csv);
        let sum = ingest(&[f.path()], "p", Aggregation::Sum, 2).unwrap();
        assert_eq!(sum.dataset.value(0, 0), None);
        let mean = ingest(&[f.path()], "t", Aggregation::Mean, 2).unwrap();
        assert_eq!(mean.dataset.value(0, 0), Some(20.0));
    }

    #[test]
    fn axis_spans_range_and_fills_gaps() {
        let csv = header()
            + &row("A", 2001, 1, "1")
            + &row("A", 2001, 2, "1")
            + &row("A", 2001, 3, "1")
            + &row("A", 2002, 5, "5"); // 2002Q1 skipped entirely
        let f = write_tmp(&csv);
        let out = ingest(&[f.path()], "t", Aggregation::Mean, 1).unwrap();
        let labels: Vec<String> = out.dataset.times().iter().map(|p| p.to_string()).collect();
        assert_eq!(labels, vec!["2001Q1", "2001Q2", "2001Q3", "2001Q4", "2002Q1", "2002Q2"]);
        assert_eq!(out.dataset.value(0, 0), Some(1.0));
        assert_eq!(out.dataset.value(0, 4), None);
        assert_eq!(out.dataset.value(0, 5), Some(5.0));
    }

    #[test]
    fn malformed_rows_name_the_line() {
        let bad_number = header() + &row("A", 2001, 1, "10") + &row("A", 2001, 2, "zep");
        let f = write_tmp(&bad_number);
        let err = ingest(&[f.path()], "t", Aggregation::Mean, 2).unwrap_err();
        assert!(err.to_string().contains(":3"), "{err}");
        assert!(err.to_string().contains("value"), "{err}");

        let bad_month = header() + &row("A", 2001, 13, "10");
        let f = write_tmp(&bad_month);
        let err = ingest(&[f.path()], "t", Aggregation::Mean, 2).unwrap_err();
        assert!(err.to_string().contains("month"), "{err}");

        let short = header() + "A,7.5,46.2,450,120,2001\n";
        let f = write_tmp(&short);
        let err = ingest(&[f.path()], "t", Aggregation::Mean, 2).unwrap_err();
        assert!(err.to_string().contains("expected 8 fields"), "{err}");

        let bad_header = "station,lon,lat,altitude,dist_sea_km,year,month,value\n".to_string()
            + &row("A", 2001, 1, "10");
        let f = write_tmp(&bad_header);
        let err = ingest(&[f.path()], "t", Aggregation::Mean, 2).unwrap_err();
        assert!(err.to_string().contains("header"), "{err}");
    }

    #[test]
    fn inconsistent_station_metadata_is_rejected() {
        let csv = header() + &row("A", 2001, 1, "10") + "A,7.5,46.3,450,120,2001,2,20\n";
        let f = write_tmp(&csv);
        let err = ingest(&[f.path()], "t", Aggregation::Mean, 2).unwrap_err();
        assert!(err.to_string().contains("inconsistent"), "{err}");
        assert!(err.to_string().contains(":3"), "{err}");
    }

    #[test]
    fn duplicate_station_month_is_rejected() {
        let csv = header() + &row("A", 2001, 1, "10") + &row("A", 2001, 1, "11");
        let f = write_tmp(&csv);
        let err = ingest(&[f.path()], "t", Aggregation::Mean, 2).unwrap_err();
        assert!(err.to_string().contains("duplicate row"), "{err}");
    }

    #[test]
    fn stations_merge_across_files_and_sort_by_id() {
        let f1 = write_tmp(&(header() + &row("B", 2001, 1, "1") + &row("B", 2001, 2, "1")));
        let f2 = write_tmp(&(header() + "A,1.0,2.0,10,5,2001,1,3\nA,1.0,2.0,10,5,2001,2,3\n"));
        let out = ingest(&[f1.path(), f2.path()], "t", Aggregation::Mean, 2).unwrap();
        assert_eq!(out.dataset.n_stations(), 2);
        assert_eq!(out.dataset.station(0).id, "A");
        assert_eq!(out.dataset.station(1).id, "B");
        assert_eq!(out.dataset.station(0).covariates["altitude"], 10.0);
        assert_eq!(out.n_files, 2);
        assert_eq!(out.n_rows, 4);
    }

    fn datasets_equal(a: &Dataset, b: &Dataset) -> bool {
        a.n_stations() == b.n_stations()
            && a.n_times() == b.n_times()
            && a.times() == b.times()
            && a.variable == b.variable
            && (0..a.n_stations()).all(|s| {
                let (sa, sb) = (a.station(s), b.station(s));
                sa.id == sb.id
                    && sa.location.x == sb.location.x
                    && sa.location.y == sb.location.y
                    && sa.covariates == sb.covariates
                    && (0..a.n_times()).all(|t| a.value(s, t) == b.value(s, t))
            })
    }

    #[test]
    fn reingesting_emitted_csv_is_identity() {
        // awkward decimals that do not survive naive splitting
        let csv = header()
            + &row("A", 2001, 1, "0.1")
            + &row("A", 2001, 2, "0.2")
            + &row("A", 2001, 3, "0.30000000000000004")
            + &row("A", 2001, 4, "")
            + &row("A", 2001, 5, "-3.7")
            + &row("A", 2001, 6, "1e-3")
            + &row("B", 2001, 1, "12.125")
            + &row("B", 2001, 4, "7")
            + &row("B", 2001, 5, "8")
            + &row("B", 2001, 6, "9");
        for agg in [Aggregation::Mean, Aggregation::Sum] {
            let f = write_tmp(&csv);
            let first = ingest(&[f.path()], "t", agg, 2).unwrap();
            let mut emitted = Vec::new();
            write_dataset_csv(&first.dataset, agg, &mut emitted).unwrap();
            let f2 = write_tmp(std::str::from_utf8(&emitted).unwrap());
            let second = ingest(&[f2.path()], "t", agg, 2).unwrap();
            assert!(datasets_equal(&first.dataset, &second.dataset));

            // and the emission itself is a fixed point
            let mut emitted2 = Vec::new();
            write_dataset_csv(&second.dataset, agg, &mut emitted2).unwrap();
            assert_eq!(emitted, emitted2);
        }
    }

    #[test]
    fn observation_shares_count_reporting_stations() {
        let csv = header()
            + &row("A", 2001, 1, "1")
            + &row("A", 2001, 2, "1")
            + &row("A", 2001, 4, "2")
            + &row("A", 2001, 5, "2")
            + &row("B", 2001, 1, "3")
            + &row("B", 2001, 2, "3");
        let f = write_tmp(&csv);
        let out = ingest(&[f.path()], "t", Aggregation::Mean, 2).unwrap();
        let shares = observation_shares(&out.dataset);
        assert_eq!(shares[0], ("2001Q1".to_string(), 1.0));
        assert_eq!(shares[1], ("2001Q2".to_string(), 0.5));
    }
}
