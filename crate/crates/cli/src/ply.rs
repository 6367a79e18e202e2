//! ASCII polygon-format (PLY) point export with optional scalar columns.

use std::fmt::Write as _;
use std::path::Path;

use deepicp_core::{Point, PointCloud};

use crate::{CliError, Result};

/// A named per-point scalar written after `intensity`.
#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    pub name: String,
    pub values: Vec<f64>,
}

/// Renders `cloud` with `x y z intensity` followed by `columns`.
pub fn render_ply(cloud: &PointCloud, columns: &[Column]) -> Result<String> {
    for c in columns {
        let valid = !c.name.is_empty() && c.name.chars().all(|ch| ch.is_ascii_alphanumeric() || ch == '_');
        if !valid || c.values.len() != cloud.len() {
            return Err(CliError::Usage(format!(
                "column `{}` has {} values for {} points",
                c.name,
                c.values.len(),
                cloud.len()
            )));
        }
    }
    let mut out = String::from("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "element vertex {}", cloud.len());
    for name in ["x", "y", "z", "intensity"].into_iter().chain(columns.iter().map(|c| c.name.as_str())) {
        let _ = writeln!(out, "property double {name}");
    }
    out.push_str("end_header\n");
    for (i, p) in cloud.iter().enumerate() {
        let mut row = format!("{} {} {} {}", p.position.x, p.position.y, p.position.z, p.intensity);
        for c in columns {
            let _ = write!(row, " {}", c.values[i]);
        }
        out.push_str(&row);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_ply(cloud: &PointCloud, columns: &[Column], path: &Path) -> Result<()> {
    std::fs::write(path, render_ply(cloud, columns)?).map_err(|e| CliError::io(path, e))
}

/// Parses text written by [`render_ply`]: ASCII, one vertex element whose
/// first four properties are `x y z intensity`.
pub fn parse_ply(text: &str, path: &Path) -> Result<(PointCloud, Vec<Column>)> {
    let bad = |line: usize, what: &str| CliError::malformed(path, format!("line {line}: {what}"));
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(bad(1, "missing `ply` magic")),
    }
    let mut count = None;
    let mut names = Vec::new();
    loop {
        let (n, line) = lines.next().ok_or_else(|| bad(0, "header has no end_header"))?;
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["format", "ascii", _] | ["comment", ..] | [] => {}
            ["format", ..] => return Err(bad(n, "only ascii format is supported")),
            ["element", "vertex", c] => count = Some(c.parse::<usize>().map_err(|_| bad(n, "bad vertex count"))?),
            ["property", _, name] => names.push(name.to_string()),
            ["end_header"] => break,
            _ => return Err(bad(n, &format!("unexpected header line `{line}`"))),
        }
    }
    let count = count.ok_or_else(|| bad(0, "no vertex element"))?;
    if names.len() < 4 || names[..4] != ["x", "y", "z", "intensity"] {
        return Err(bad(0, "first properties must be x y z intensity"));
    }
    let mut points = Vec::with_capacity(count);
    let mut columns: Vec<Column> = names[4..]
        .iter()
        .map(|name| Column {
            name: name.clone(),
            values: Vec::with_capacity(count),
        })
        .collect();
    for _ in 0..count {
        let (n, line) = lines.next().ok_or_else(|| bad(0, &format!("expected {count} vertices")))?;
        let values: Vec<f64> = line
            .split_whitespace()
            .map(|w| w.parse::<f64>().map_err(|_| bad(n, &format!("`{w}` is not a number"))))
            .collect::<Result<_>>()?;
        if values.len() != names.len() {
            return Err(bad(n, &format!("{} values for {} properties", values.len(), names.len())));
        }
        points.push(Point::new(values[0], values[1], values[2], values[3]));
        for (c, v) in columns.iter_mut().zip(&values[4..]) {
            c.values.push(*v);
        }
    }
    if let Some((n, l)) = lines.find(|(_, l)| !l.is_empty()) {
        return Err(bad(n, &format!("trailing data `{l}`")));
    }
    let cloud = PointCloud::new(points).map_err(|e| CliError::malformed(path, e.to_string()))?;
    Ok((cloud, columns))
}

pub fn read_ply(path: &Path) -> Result<(PointCloud, Vec<Column>)> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_ply(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_point_layout() {
        let cloud = PointCloud::new(vec![Point::new(1.0, 2.0, 3.0, 0.5)]).unwrap();
        let text = render_ply(&cloud, &[]).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[2], "element vertex 1");
        assert_eq!(lines.iter().filter(|l| l.starts_with("property")).count(), 4);
        assert_eq!(lines.last().unwrap(), &"1 2 3 0.5");
        assert_eq!(lines.len(), 9);
    }

    #[test]
    fn weight_column_is_declared_and_filled() {
        let cloud = PointCloud::new(vec![Point::new(0.0, 0.0, 0.0, 0.0), Point::new(1.0, 1.0, 1.0, 1.0)]).unwrap();
        let w = Column {
            name: "weight".into(),
            values: vec![0.25, 0.75],
        };
        let text = render_ply(&cloud, std::slice::from_ref(&w)).unwrap();
        assert!(text.contains("property double weight\nend_header"));
        let (back, cols) = parse_ply(&text, Path::new("k.ply")).unwrap();
        assert_eq!(back, cloud);
        assert_eq!(cols, vec![w]);
    }

    #[test]
    fn mismatched_columns_and_bad_files_are_rejected() {
        let cloud = PointCloud::new(vec![Point::new(0.0, 0.0, 0.0, 0.0)]).unwrap();
        let c = Column {
            name: "w".into(),
            values: vec![],
        };
        assert!(render_ply(&cloud, &[c]).is_err());
        assert!(parse_ply("ply\nformat binary_little_endian 1.0\n", Path::new("p")).is_err());
        let short = "ply\nformat ascii 1.0\nelement vertex 2\nproperty double x\nproperty double y\nproperty double z\nproperty double intensity\nend_header\n0 0 0 0\n";
        let err = parse_ply(short, Path::new("p")).unwrap_err();
        assert!(err.to_string().contains("expected 2 vertices"), "{err}");
    }
}
