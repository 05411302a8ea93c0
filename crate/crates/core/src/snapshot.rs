//! Text snapshots of velocity fields.
//!
//! ```text
//! nsrenorm-snapshot 1
//! grid_n 8
//! box_l 6.283185307179586e0
//! modes 364
//! k1 k2 k3 re1 im1 re2 im2 re3 im3
//! ...
//! ```
//! Only the stored half-lattice is written. Floats use shortest round-trip
//! formatting, so a write/read cycle is bit-exact.

use std::fmt::Write as _;
use std::path::Path;

use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::field::{ModeVector, SpectralGrid, VelocityField};

pub const SNAPSHOT_MAGIC: &str = "nsrenorm-snapshot";
pub const SNAPSHOT_VERSION: u32 = 1;

pub fn to_snapshot_string(u: &VelocityField) -> String {
    let g = u.grid();
    let mut s = String::with_capacity(64 * g.len());
    let _ = writeln!(s, "{SNAPSHOT_MAGIC} {SNAPSHOT_VERSION}");
    let _ = writeln!(s, "grid_n {}", g.n());
    let _ = writeln!(s, "box_l {:e}", g.box_l());
    let _ = writeln!(s, "modes {}", g.len());
    for (m, c) in g.modes().iter().zip(u.coeffs()) {
        let _ = writeln!(
            s,
            "{} {} {} {:e} {:e} {:e} {:e} {:e} {:e}",
            m.k[0], m.k[1], m.k[2], c[0].re, c[0].im, c[1].re, c[1].im, c[2].re, c[2].im
        );
    }
    s
}

fn header<'a>(lines: &mut impl Iterator<Item = &'a str>, key: &str) -> Result<&'a str> {
    let line = lines
        .next()
        .ok_or_else(|| Error::parse("snapshot", format!("missing `{key}` line")))?;
    line.strip_prefix(key)
        .map(str::trim)
        .ok_or_else(|| Error::parse("snapshot", format!("expected `{key}`, got `{line}`")))
}

pub fn from_snapshot_str(text: &str) -> Result<VelocityField> {
    let bad = |reason: String| Error::parse("snapshot", reason);
    let mut lines = text.lines();
    let version = header(&mut lines, SNAPSHOT_MAGIC)?;
    if version != SNAPSHOT_VERSION.to_string() {
        return Err(bad(format!("unsupported version {version}")));
    }
    let n: usize = header(&mut lines, "grid_n")?
        .parse()
        .map_err(|e| bad(format!("grid_n: {e}")))?;
    let box_l: f64 = header(&mut lines, "box_l")?
        .parse()
        .map_err(|e| bad(format!("box_l: {e}")))?;
    let count: usize = header(&mut lines, "modes")?
        .parse()
        .map_err(|e| bad(format!("modes: {e}")))?;
    let grid = SpectralGrid::new(n, box_l)?;
    if count != grid.len() {
        return Err(bad(format!(
            "{count} modes listed, lattice has {}",
            grid.len()
        )));
    }
    let mut coeffs: Vec<ModeVector> = vec![[Complex64::new(0.0, 0.0); 3]; grid.len()];
    let mut seen = vec![false; grid.len()];
    for (no, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 9 {
            return Err(bad(format!(
                "row {}: expected 9 fields, got {}",
                no + 1,
                f.len()
            )));
        }
        let mut k = [0i32; 3];
        for i in 0..3 {
            k[i] = f[i]
                .parse()
                .map_err(|e| bad(format!("row {}: {e}", no + 1)))?;
        }
        let mut x = [0f64; 6];
        for i in 0..6 {
            x[i] = f[3 + i]
                .parse()
                .map_err(|e| bad(format!("row {}: {e}", no + 1)))?;
        }
        let j = grid
            .index_of(k)
            .ok_or_else(|| bad(format!("row {}: {k:?} is not a stored mode", no + 1)))?;
        if seen[j] {
            return Err(bad(format!("row {}: duplicate mode {k:?}", no + 1)));
        }
        seen[j] = true;
        coeffs[j] = [
            Complex64::new(x[0], x[1]),
            Complex64::new(x[2], x[3]),
            Complex64::new(x[4], x[5]),
        ];
    }
    if seen.iter().any(|s| !s) {
        return Err(bad("missing mode rows".into()));
    }
    VelocityField::from_coeffs(&grid, coeffs)
}

pub fn write_snapshot(u: &VelocityField, path: &Path) -> Result<()> {
    std::fs::write(path, to_snapshot_string(u)).map_err(|e| Error::io(path, e))
}

pub fn read_snapshot(path: &Path) -> Result<VelocityField> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_snapshot_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{random_field, NormKind};

    #[test]
    fn round_trip_is_bit_exact() {
        let g = SpectralGrid::new(6, 3.7).unwrap();
        let u = random_field(&g, 0.123, NormKind::V, 5, 1.3).unwrap();
        let back = from_snapshot_str(&to_snapshot_string(&u)).unwrap();
        assert_eq!(back.coeffs(), u.coeffs());
        assert_eq!(back.grid().box_l().to_bits(), 3.7f64.to_bits());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("u.snap");
        let g = SpectralGrid::unit(4).unwrap();
        let u = random_field(&g, 1.0, NormKind::H, 1, 0.0).unwrap();
        write_snapshot(&u, &p).unwrap();
        assert_eq!(read_snapshot(&p).unwrap().coeffs(), u.coeffs());
    }

    #[test]
    fn malformed_inputs_rejected() {
        assert!(from_snapshot_str("nsrenorm-snapshot 2\n").is_err());
        let g = SpectralGrid::unit(2).unwrap();
        let good = to_snapshot_string(&VelocityField::zero(&g));
        let truncated: String = good.lines().take(6).map(|l| format!("{l}\n")).collect();
        assert!(from_snapshot_str(&truncated).is_err());
        assert!(from_snapshot_str(&good.replace("grid_n 2", "grid_n 3")).is_err());
    }
}
