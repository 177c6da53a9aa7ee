//! TSPLIB95 / CVRPLIB reading and writing (EUC_2D only).
//!
//! Coordinates are kept in raw file units; instances parsed here carry
//! [`Rounding::Euc2d`] so costs use the nearest-integer convention that
//! published optima assume. [`VrpInstance::normalized_for_model`] produces
//! the unit-square view the policy consumes.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::instances::{DistributionSpec, Point, Problem, Rounding, TaskSpec, VrpInstance};

/// TSPLIB EUC_2D edge weight: nearest integer, .5 rounds up.
pub fn euc2d(a: &Point, b: &Point) -> f64 {
    (a.dist(b) + 0.5).floor()
}

struct RawFile {
    header: HashMap<String, String>,
    coords: Vec<(usize, f64, f64)>,
    demands: Vec<(usize, u32)>,
    depots: Vec<usize>,
}

fn parse_raw(path: &Path) -> Result<RawFile> {
    let text = fs::read_to_string(path)?;
    let mut header = HashMap::new();
    let mut coords = Vec::new();
    let mut demands = Vec::new();
    let mut depots = Vec::new();

    #[derive(PartialEq)]
    enum Section {
        Header,
        Coords,
        Demands,
        Depots,
        Done,
    }
    let mut section = Section::Header;

    for (lineno, raw_line) in text.lines().enumerate() {
        let line = raw_line.trim();
        let lineno = lineno + 1;
        if line.is_empty() {
            continue;
        }
        let upper = line.to_ascii_uppercase();
        if upper == "EOF" {
            section = Section::Done;
            continue;
        }
        match upper.as_str() {
            "NODE_COORD_SECTION" => {
                section = Section::Coords;
                continue;
            }
            "DEMAND_SECTION" => {
                section = Section::Demands;
                continue;
            }
            "DEPOT_SECTION" => {
                section = Section::Depots;
                continue;
            }
            "EDGE_WEIGHT_SECTION" | "DISPLAY_DATA_SECTION" | "TOUR_SECTION" => {
                return Err(Error::UnsupportedFormat(format!("section {} is not supported", upper)));
            }
            _ => {}
        }
        match section {
            Section::Header => {
                let (key, value) = match line.split_once(':') {
                    Some((k, v)) => (k.trim().to_ascii_uppercase(), v.trim().to_string()),
                    None => {
                        return Err(Error::Parse {
                            line: lineno,
                            msg: format!("expected 'KEY : value', got '{}'", line),
                        })
                    }
                };
                header.insert(key, value);
            }
            Section::Coords => {
                let mut it = line.split_whitespace();
                let parse = |tok: Option<&str>, what: &str| -> Result<f64> {
                    tok.and_then(|t| t.parse::<f64>().ok()).ok_or_else(|| Error::Parse {
                        line: lineno,
                        msg: format!("bad {} in coord line '{}'", what, line),
                    })
                };
                let id = parse(it.next(), "node id")? as usize;
                let x = parse(it.next(), "x")?;
                let y = parse(it.next(), "y")?;
                coords.push((id, x, y));
            }
            Section::Demands => {
                let mut it = line.split_whitespace();
                let id: usize = it
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| Error::Parse { line: lineno, msg: "bad demand id".into() })?;
                let d: u32 = it
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| Error::Parse { line: lineno, msg: "bad demand value".into() })?;
                demands.push((id, d));
            }
            Section::Depots => {
                let v: i64 = line.parse().map_err(|_| Error::Parse {
                    line: lineno,
                    msg: format!("bad depot id '{}'", line),
                })?;
                if v >= 0 {
                    depots.push(v as usize);
                }
            }
            Section::Done => {}
        }
    }
    Ok(RawFile { header, coords, demands, depots })
}

fn check_common(raw: &RawFile, path: &Path) -> Result<(usize, String)> {
    let ewt = raw
        .header
        .get("EDGE_WEIGHT_TYPE")
        .map(|s| s.to_ascii_uppercase())
        .unwrap_or_else(|| "EUC_2D".into());
    if ewt != "EUC_2D" {
        return Err(Error::UnsupportedFormat(format!(
            "edge weight type {} (only EUC_2D is supported)",
            ewt
        )));
    }
    let dim: usize = raw
        .header
        .get("DIMENSION")
        .ok_or_else(|| Error::Parse { line: 1, msg: "missing DIMENSION".into() })?
        .parse()
        .map_err(|_| Error::Parse { line: 1, msg: "DIMENSION is not an integer".into() })?;
    if raw.coords.len() != dim {
        return Err(Error::Parse {
            line: 1,
            msg: format!("DIMENSION {} but {} coordinate lines", dim, raw.coords.len()),
        });
    }
    let name = raw
        .header
        .get("NAME")
        .cloned()
        .unwrap_or_else(|| path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
    Ok((dim, name))
}

/// Sorts by node id and returns coordinates 0-indexed.
fn ordered_coords(raw: &RawFile) -> Vec<Point> {
    let mut sorted = raw.coords.clone();
    sorted.sort_by_key(|&(id, _, _)| id);
    sorted.into_iter().map(|(_, x, y)| Point::new(x, y)).collect()
}

pub fn parse_tsplib(path: impl AsRef<Path>) -> Result<VrpInstance> {
    let path = path.as_ref();
    let raw = parse_raw(path)?;
    let (dim, name) = check_common(&raw, path)?;
    let ty = raw.header.get("TYPE").map(|s| s.to_ascii_uppercase()).unwrap_or_else(|| "TSP".into());
    if ty.starts_with("CVRP") {
        return Err(Error::UnsupportedFormat("CVRP file passed to the TSP parser".into()));
    }
    let coords = ordered_coords(&raw);
    let inst = VrpInstance {
        task: TaskSpec::new(Problem::Tsp, dim, DistributionSpec::Uniform),
        seed: 0,
        coords,
        depot: None,
        demands_raw: None,
        capacity_raw: None,
        rounding: Rounding::Euc2d,
        name: Some(name),
    };
    Ok(inst)
}

pub fn parse_cvrplib(path: impl AsRef<Path>) -> Result<VrpInstance> {
    let path = path.as_ref();
    let raw = parse_raw(path)?;
    let (dim, name) = check_common(&raw, path)?;
    let capacity: u32 = raw
        .header
        .get("CAPACITY")
        .ok_or_else(|| Error::Parse { line: 1, msg: "missing CAPACITY".into() })?
        .parse()
        .map_err(|_| Error::Parse { line: 1, msg: "CAPACITY is not an integer".into() })?;
    let all = ordered_coords(&raw);
    let depot_id = raw.depots.first().copied().unwrap_or(1);
    if depot_id == 0 || depot_id > dim {
        return Err(Error::Parse { line: 1, msg: format!("depot id {} out of range", depot_id) });
    }
    let mut demand_by_id = vec![0u32; dim + 1];
    for &(id, d) in &raw.demands {
        if id == 0 || id > dim {
            return Err(Error::Parse { line: 1, msg: format!("demand id {} out of range", id) });
        }
        demand_by_id[id] = d;
    }
    let mut coords = Vec::with_capacity(dim - 1);
    let mut demands = Vec::with_capacity(dim - 1);
    for id in 1..=dim {
        if id == depot_id {
            continue;
        }
        coords.push(all[id - 1]);
        demands.push(demand_by_id[id]);
    }
    let inst = VrpInstance {
        task: TaskSpec::new(Problem::Cvrp, dim - 1, DistributionSpec::Uniform),
        seed: 0,
        coords,
        depot: Some(all[depot_id - 1]),
        demands_raw: Some(demands),
        capacity_raw: Some(capacity),
        rounding: Rounding::Euc2d,
        name: Some(name),
    };
    inst.validate()?;
    Ok(inst)
}

/// Writes `inst` in TSPLIB/CVRPLIB form (for external solvers). Synthetic
/// float coordinates are written at full precision; CVRP uses node 1 as the
/// depot followed by the customers.
pub fn write_tsplib(inst: &VrpInstance, path: impl AsRef<Path>) -> Result<()> {
    let mut s = String::new();
    let name = inst.name.clone().unwrap_or_else(|| format!("{}-{}", inst.task.label(), inst.seed));
    writeln!(s, "NAME : {}", name).unwrap();
    match inst.task.problem {
        Problem::Tsp => {
            writeln!(s, "TYPE : TSP").unwrap();
            writeln!(s, "DIMENSION : {}", inst.n()).unwrap();
            writeln!(s, "EDGE_WEIGHT_TYPE : EUC_2D").unwrap();
            writeln!(s, "NODE_COORD_SECTION").unwrap();
            for (i, p) in inst.coords.iter().enumerate() {
                writeln!(s, "{} {} {}", i + 1, p.x, p.y).unwrap();
            }
        }
        Problem::Cvrp => {
            writeln!(s, "TYPE : CVRP").unwrap();
            writeln!(s, "DIMENSION : {}", inst.n() + 1).unwrap();
            writeln!(s, "EDGE_WEIGHT_TYPE : EUC_2D").unwrap();
            writeln!(s, "CAPACITY : {}", inst.capacity_raw.unwrap()).unwrap();
            writeln!(s, "NODE_COORD_SECTION").unwrap();
            let depot = inst.depot.unwrap();
            writeln!(s, "1 {} {}", depot.x, depot.y).unwrap();
            for (i, p) in inst.coords.iter().enumerate() {
                writeln!(s, "{} {} {}", i + 2, p.x, p.y).unwrap();
            }
            writeln!(s, "DEMAND_SECTION").unwrap();
            writeln!(s, "1 0").unwrap();
            for (i, d) in inst.demands_raw.as_ref().unwrap().iter().enumerate() {
                writeln!(s, "{} {}", i + 2, d).unwrap();
            }
            writeln!(s, "DEPOT_SECTION").unwrap();
            writeln!(s, "1").unwrap();
            writeln!(s, "-1").unwrap();
        }
    }
    writeln!(s, "EOF").unwrap();
    fs::write(path, s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(name: &str, content: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(name);
        fs::write(&path, content).unwrap();
        (dir, path)
    }

    #[test]
    fn parses_hand_written_euc2d_fixture() {
        let (_d, path) = write_tmp(
            "tiny.tsp",
            "NAME : tiny\nTYPE : TSP\nDIMENSION : 3\nEDGE_WEIGHT_TYPE : EUC_2D\nNODE_COORD_SECTION\n1 0 0\n2 3 0\n3 0 4\nEOF\n",
        );
        let inst = parse_tsplib(&path).unwrap();
        assert_eq!(inst.n(), 3);
        assert_eq!(inst.coords[1], Point::new(3.0, 0.0));
        assert_eq!(inst.rounding, Rounding::Euc2d);
        assert_eq!(inst.name.as_deref(), Some("tiny"));
    }

    #[test]
    fn rejects_unsupported_edge_weight() {
        let (_d, path) = write_tmp(
            "geo.tsp",
            "NAME : geo\nTYPE : TSP\nDIMENSION : 2\nEDGE_WEIGHT_TYPE : GEO\nNODE_COORD_SECTION\n1 0 0\n2 1 1\nEOF\n",
        );
        assert!(matches!(parse_tsplib(&path), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn missing_dimension_is_parse_error() {
        let (_d, path) = write_tmp(
            "nodim.tsp",
            "NAME : nodim\nTYPE : TSP\nEDGE_WEIGHT_TYPE : EUC_2D\nNODE_COORD_SECTION\n1 0 0\n2 1 1\nEOF\n",
        );
        assert!(matches!(parse_tsplib(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn parses_cvrp_fixture_with_depot_and_demands() {
        let (_d, path) = write_tmp(
            "tiny.vrp",
            "NAME : tinyvrp\nTYPE : CVRP\nDIMENSION : 4\nEDGE_WEIGHT_TYPE : EUC_2D\nCAPACITY : 30\nNODE_COORD_SECTION\n1 0 0\n2 10 0\n3 0 10\n4 10 10\nDEMAND_SECTION\n1 0\n2 12\n3 7\n4 25\nDEPOT_SECTION\n1\n-1\nEOF\n",
        );
        let inst = parse_cvrplib(&path).unwrap();
        assert_eq!(inst.n(), 3);
        assert_eq!(inst.depot, Some(Point::new(0.0, 0.0)));
        assert_eq!(inst.demands_raw.as_deref(), Some(&[12, 7, 25][..]));
        assert_eq!(inst.capacity_raw, Some(30));
        // Raw demands exceed 9: legal for benchmark files.
        assert!((inst.demand(0) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn euc2d_rounds_half_up() {
        let a = Point::new(0.0, 0.0);
        assert_eq!(euc2d(&a, &Point::new(2.5, 0.0)), 3.0);
        assert_eq!(euc2d(&a, &Point::new(2.4, 0.0)), 2.0);
        assert_eq!(euc2d(&a, &Point::new(3.0, 4.0)), 5.0);
    }

    #[test]
    fn writer_round_trips_through_parser() {
        let inst = crate::instances::instance_from_seed(
            &TaskSpec::new(Problem::Cvrp, 7, DistributionSpec::Uniform),
            3,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.vrp");
        write_tsplib(&inst, &path).unwrap();
        let back = parse_cvrplib(&path).unwrap();
        assert_eq!(back.n(), 7);
        assert_eq!(back.capacity_raw, inst.capacity_raw);
        assert_eq!(back.demands_raw, inst.demands_raw);
        for (a, b) in back.coords.iter().zip(&inst.coords) {
            assert_eq!(a, b, "full-precision coordinate round trip");
        }
    }

    #[test]
    fn normalized_view_is_unit_square() {
        let (_d, path) = write_tmp(
            "scaled.tsp",
            "NAME : s\nTYPE : TSP\nDIMENSION : 3\nEDGE_WEIGHT_TYPE : EUC_2D\nNODE_COORD_SECTION\n1 100 200\n2 300 200\n3 100 600\nEOF\n",
        );
        let inst = parse_tsplib(&path).unwrap();
        let normed = inst.normalized_for_model();
        for p in &normed.coords {
            assert!((0.0..=1.0).contains(&p.x) && (0.0..=1.0).contains(&p.y));
        }
        assert_eq!(normed.coords[0], Point::new(0.0, 0.0));
    }
}
