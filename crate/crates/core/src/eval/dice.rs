use std::io::Write;

use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Overlap {
    pub a: usize,
    pub b: usize,
    pub both: usize,
}

impl Overlap {
    pub fn count(a: &[u8], b: &[u8]) -> Result<Self> {
        if a.len() != b.len() {
            return shape_err(format!("mask sizes differ: {} vs {}", a.len(), b.len()));
        }
        let mut o = Overlap::default();
        for (&x, &y) in a.iter().zip(b) {
            let (x, y) = (x != 0, y != 0);
            o.a += x as usize;
            o.b += y as usize;
            o.both += (x && y) as usize;
        }
        Ok(o)
    }

    /// `2|A∩B| / (|A| + |B|)`, with two empty masks scoring 1.
    pub fn dice(&self) -> f64 {
        if self.a + self.b == 0 {
            1.0
        } else {
            2.0 * self.both as f64 / (self.a + self.b) as f64
        }
    }
}

pub fn dice(a: &[u8], b: &[u8]) -> Result<f64> {
    Ok(Overlap::count(a, b)?.dice())
}

fn overlaps(pairs: &[(&[u8], &[u8])]) -> Result<Vec<Overlap>> {
    if pairs.is_empty() {
        return Err(Error::InvalidSpec("no volumes to score".into()));
    }
    pairs.iter().map(|(a, b)| Overlap::count(a, b)).collect()
}

/// Dice over all voxels of all volumes pooled together.
pub fn dice_global(pairs: &[(&[u8], &[u8])]) -> Result<f64> {
    let total = overlaps(pairs)?
        .into_iter()
        .fold(Overlap::default(), |acc, o| Overlap {
            a: acc.a + o.a,
            b: acc.b + o.b,
            both: acc.both + o.both,
        });
    Ok(total.dice())
}

/// Mean of the per-volume Dice scores.
pub fn dice_per_case(pairs: &[(&[u8], &[u8])]) -> Result<f64> {
    let per = overlaps(pairs)?;
    Ok(per.iter().map(Overlap::dice).sum::<f64>() / per.len() as f64)
}

/// `volume_id,dice` rows followed by `global` and `per_case` summary rows.
pub fn write_dice_csv<W: Write>(mut w: W, ids: &[String], pairs: &[(&[u8], &[u8])]) -> Result<()> {
    if ids.len() != pairs.len() {
        return Err(Error::InvalidSpec("one id per volume required".into()));
    }
    writeln!(w, "volume_id,dice")?;
    for (id, (a, b)) in ids.iter().zip(pairs) {
        writeln!(w, "{id},{}", dice(a, b)?)?;
    }
    writeln!(w, "global,{}", dice_global(pairs)?)?;
    writeln!(w, "per_case,{}", dice_per_case(pairs)?)?;
    Ok(())
}
