//! Seeded 2D toy distributions and a CSV loader.
//!
//! The generators follow the conventions of the widely used open-source toy
//! data code (FFJORD / torchcfm), which serve as the normative definition:
//!
//! | name | construction |
//! |---|---|
//! | `swissroll` | `u = 1.5π(1 + 2U)`, point `(u cos u, u sin u)` plus `N(0, 1)` noise, divided by 5 |
//! | `circles` | circles of radius 1 and 0.5 (equal split, evenly spaced angles), `N(0, 0.08²)` noise, scaled by 3 |
//! | `rings` | four circles of radius 1, 0.75, 0.5, 0.25, scaled by 3, then `N(0, 0.08²)` noise |
//! | `moons` | two interleaved half circles with `N(0, 0.1²)` noise, scaled by 2 and shifted by `(−1, −0.2)` |
//! | `8gaussians` | `N(c, 0.5²)` around 8 compass points of radius 4, divided by 1.414 |
//! | `pinwheel` | 5 arms, radial std 0.3, tangential std 0.1, twist rate 0.25, scaled by 2 |
//! | `2spirals` | `r = √U·540°`, arms `±(−r cos r + U/2, r sin r + U/2)/3` plus `N(0, 0.1²)` noise |
//! | `checkerboard` | `a = 4U − 2`, `b = U − 2·Bernoulli(½) + (⌊a⌋ mod 2)`, point `2(a, b)` |
//!
//! Here `U` is uniform on `[0, 1)`. Rows are shuffled.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::densities::EmpiricalSet;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub const TOY_NAMES: [&str; 8] =
    ["swissroll", "moons", "8gaussians", "circles", "2spirals", "checkerboard", "pinwheel", "rings"];

pub fn make_toy(name: &str, n: usize, seed: u64) -> Result<EmpiricalSet> {
    if n == 0 {
        return Err(Error::InvalidParameter("sample count must be >= 1".into()));
    }
    let mut r = rng::seeded(seed);
    let pts = match name {
        "swissroll" => swissroll(&mut r, n),
        "moons" => moons(&mut r, n),
        "8gaussians" => eight_gaussians(&mut r, n),
        "circles" => circles(&mut r, n),
        "2spirals" => two_spirals(&mut r, n),
        "checkerboard" => checkerboard(&mut r, n),
        "pinwheel" => pinwheel(&mut r, n),
        "rings" => rings(&mut r, n),
        other => return Err(Error::UnknownName(format!("toy dataset `{other}`"))),
    };
    let mut rows: Vec<[f64; 2]> = pts;
    rows.shuffle(&mut r);
    EmpiricalSet::new(rows.into_iter().flatten().collect(), 2, name)
}

fn normal(r: &mut Rng) -> f64 {
    rng::standard_normal(r)
}

fn swissroll(r: &mut Rng, n: usize) -> Vec<[f64; 2]> {
    (0..n)
        .map(|_| {
            let u = 1.5 * PI * (1.0 + 2.0 * rng::uniform(r));
            // The roll's height coordinate is drawn and discarded.
            let _height = rng::uniform(r);
            [(u * u.cos() + normal(r)) / 5.0, (u * u.sin() + normal(r)) / 5.0]
        })
        .collect()
}

/// `k` evenly spaced angles on `[0, 2π)`.
fn ring(k: usize, radius: f64) -> impl Iterator<Item = [f64; 2]> {
    (0..k).map(move |i| {
        let a = 2.0 * PI * i as f64 / k as f64;
        [radius * a.cos(), radius * a.sin()]
    })
}

fn circles(r: &mut Rng, n: usize) -> Vec<[f64; 2]> {
    let outer = n / 2;
    ring(outer, 1.0)
        .chain(ring(n - outer, 0.5))
        .collect::<Vec<_>>()
        .into_iter()
        .map(|[x, y]| [3.0 * (x + 0.08 * normal(r)), 3.0 * (y + 0.08 * normal(r))])
        .collect()
}

fn rings(r: &mut Rng, n: usize) -> Vec<[f64; 2]> {
    let q = n / 4;
    ring(n - 3 * q, 0.25)
        .chain(ring(q, 0.5))
        .chain(ring(q, 0.75))
        .chain(ring(q, 1.0))
        .collect::<Vec<_>>()
        .into_iter()
        .map(|[x, y]| [3.0 * x + 0.08 * normal(r), 3.0 * y + 0.08 * normal(r)])
        .collect()
}

fn linspace_pi(i: usize, k: usize) -> f64 {
    if k <= 1 {
        0.0
    } else {
        PI * i as f64 / (k - 1) as f64
    }
}

fn moons(r: &mut Rng, n: usize) -> Vec<[f64; 2]> {
    let outer = n / 2;
    let inner = n - outer;
    let mut pts = Vec::with_capacity(n);
    for i in 0..outer {
        let a = linspace_pi(i, outer);
        pts.push([a.cos(), a.sin()]);
    }
    for i in 0..inner {
        let a = linspace_pi(i, inner);
        pts.push([1.0 - a.cos(), 1.0 - a.sin() - 0.5]);
    }
    pts.into_iter()
        .map(|[x, y]| [2.0 * (x + 0.1 * normal(r)) - 1.0, 2.0 * (y + 0.1 * normal(r)) - 0.2])
        .collect()
}

fn eight_gaussians(r: &mut Rng, n: usize) -> Vec<[f64; 2]> {
    let s = 1.0 / 2f64.sqrt();
    let centers = [(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0), (s, s), (s, -s), (-s, s), (-s, -s)];
    (0..n)
        .map(|_| {
            let (cx, cy) = centers[rng::index(r, 8)];
            [(0.5 * normal(r) + 4.0 * cx) / 1.414, (0.5 * normal(r) + 4.0 * cy) / 1.414]
        })
        .collect()
}

fn pinwheel(r: &mut Rng, n: usize) -> Vec<[f64; 2]> {
    let classes = 5;
    (0..n)
        .map(|i| {
            let f0 = 0.3 * normal(r) + 1.0;
            let f1 = 0.1 * normal(r);
            let a = 2.0 * PI * (i % classes) as f64 / classes as f64 + 0.25 * f0.exp();
            let (c, s) = (a.cos(), a.sin());
            [2.0 * (f0 * c + f1 * s), 2.0 * (-f0 * s + f1 * c)]
        })
        .collect()
}

fn two_spirals(r: &mut Rng, n: usize) -> Vec<[f64; 2]> {
    let half = n / 2;
    let mut pts = Vec::with_capacity(n);
    for i in 0..n {
        let u = rng::uniform(r).sqrt() * 540.0 * 2.0 * PI / 360.0;
        let x = -u.cos() * u + 0.5 * rng::uniform(r);
        let y = u.sin() * u + 0.5 * rng::uniform(r);
        let sign = if i < half { 1.0 } else { -1.0 };
        pts.push([sign * x / 3.0 + 0.1 * normal(r), sign * y / 3.0 + 0.1 * normal(r)]);
    }
    pts
}

fn checkerboard(r: &mut Rng, n: usize) -> Vec<[f64; 2]> {
    (0..n)
        .map(|_| {
            let a = 4.0 * rng::uniform(r) - 2.0;
            let b = rng::uniform(r) - 2.0 * rng::index(r, 2) as f64 + a.floor().rem_euclid(2.0);
            [2.0 * a, 2.0 * b]
        })
        .collect()
}

/// Reads a numeric CSV with a header row; optionally standardizes each column
/// to mean 0 and (unbiased) standard deviation 1.
pub fn load_csv(path: impl AsRef<Path>, standardize: bool) -> Result<EmpiricalSet> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_csv(&text, &path.display().to_string(), standardize)
}

pub fn parse_csv(text: &str, origin: &str, standardize: bool) -> Result<EmpiricalSet> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(text.as_bytes());
    let dim = match reader.headers() {
        Ok(h) if !h.is_empty() && !(h.len() == 1 && h[0].is_empty()) => h.len(),
        Ok(_) => return Err(Error::Parse { line: 1, msg: "missing header row".into() }),
        Err(e) => return Err(Error::Parse { line: 1, msg: e.to_string() }),
    };
    let mut points = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != dim {
            return Err(Error::Parse { line, msg: format!("expected {dim} fields, found {}", rec.len()) });
        }
        for field in rec.iter() {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::Parse { line, msg: format!("`{field}` is not a number") })?;
            if !v.is_finite() {
                return Err(Error::Parse { line, msg: format!("non-finite entry `{field}`") });
            }
            points.push(v);
        }
    }
    if points.is_empty() {
        return Err(Error::Parse { line: 2, msg: "no data rows".into() });
    }
    let mut set = EmpiricalSet::new(points, dim, origin)?;
    if standardize {
        set = standardized(&set)?;
    }
    Ok(set)
}

fn standardized(set: &EmpiricalSet) -> Result<EmpiricalSet> {
    let mean = set.mean();
    let sd: Vec<f64> = set.variance().iter().map(|v| v.sqrt()).collect();
    if let Some(j) = sd.iter().position(|s| !(*s > 0.0)) {
        return Err(Error::InvalidParameter(format!("column {j} has zero variance")));
    }
    let d = set.dim();
    let pts = set.as_flat().iter().enumerate().map(|(k, v)| (v - mean[k % d]) / sd[k % d]).collect();
    EmpiricalSet::new(pts, d, format!("{}[standardized]", set.origin()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_generator_is_deterministic_and_2d() {
        for name in TOY_NAMES {
            let a = make_toy(name, 1000, 3).unwrap();
            assert_eq!(a.dim(), 2);
            assert_eq!(a.len(), 1000);
            assert_eq!(a, make_toy(name, 1000, 3).unwrap());
            assert_ne!(a, make_toy(name, 1000, 4).unwrap());
            for v in a.as_flat() {
                assert!(v.abs() < 8.0, "{name}: {v}");
            }
        }
        assert!(matches!(make_toy("spiral", 10, 0), Err(Error::UnknownName(_))));
    }

    #[test]
    fn eight_gaussians_centered() {
        let s = make_toy("8gaussians", 100_000, 1).unwrap();
        let m = s.mean();
        assert!(m[0].abs() < 0.05 && m[1].abs() < 0.05, "{m:?}");
    }

    #[test]
    fn circles_radii() {
        let s = make_toy("circles", 100_000, 2).unwrap();
        let (mut inner, mut outer) = (Vec::new(), Vec::new());
        for p in s.rows() {
            let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
            if r < 2.25 {
                inner.push(r)
            } else {
                outer.push(r)
            }
        }
        let med = |v: &mut Vec<f64>| {
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        };
        assert!((med(&mut inner) - 1.5).abs() < 0.02 * 1.5);
        assert!((med(&mut outer) - 3.0).abs() < 0.02 * 3.0);
        assert!((inner.len() as f64 - 50_000.0).abs() < 500.0);
    }

    #[test]
    fn checkerboard_occupies_alternate_cells() {
        let s = make_toy("checkerboard", 20_000, 5).unwrap();
        for p in s.rows() {
            let (i, j) = ((p[0] / 2.0).floor() as i64, (p[1] / 2.0).floor() as i64);
            assert_eq!((i + j).rem_euclid(2), 0, "{p:?}");
        }
    }

    #[test]
    fn csv_round_trip_bit_exact() {
        let s = EmpiricalSet::new(vec![0.1, -1.0 / 3.0, 1e-300, 2.5, 7.0, f64::MAX], 2, "t").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        s.write_csv(&path).unwrap();
        let back = load_csv(&path, false).unwrap();
        assert_eq!(back.as_flat(), s.as_flat());
    }

    #[test]
    fn csv_standardization() {
        let text = "a,b\n1,10\n2,20\n4,25\n8,-3\n";
        let s = parse_csv(text, "t", true).unwrap();
        let m = s.mean();
        let v = s.variance();
        for j in 0..2 {
            assert!(m[j].abs() <= 1e-12);
            assert!((v[j].sqrt() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        assert!(matches!(parse_csv("", "t", false), Err(Error::Parse { .. })));
        assert!(matches!(parse_csv("x0\n", "t", false), Err(Error::Parse { .. })));
        match parse_csv("x0,x1\n1,2\n3,abc\n", "t", false) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        match parse_csv("x0\n1\nNaN\n", "t", false) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_csv("x0,x1\n1,2\n3\n", "t", false), Err(Error::Parse { .. })));
    }
}
