//! Tables and plots rendered from the CSVs of a run directory. Nothing is
//! recomputed here, and reruns write the same bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::froc::read_froc_csv;
use crate::eval::FrocPoint;
use crate::experiment::{froc_csv, Model, LOSS_STAGE1, LOSS_STAGE2};

pub const FROC_TABLE: &str = "froc.csv";
pub const FROC_PLOT: &str = "froc.svg";
pub const LOSS_PLOT: &str = "loss.svg";
pub const DICE_TABLE: &str = "dice_table.csv";
pub const REPORT_MD: &str = "report.md";

const MODELS: [Model; 2] = [Model::Ahnet, Model::Mcgcn];

/// Files written by [`report`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReportFiles {
    pub written: Vec<PathBuf>,
}

struct Series {
    name: String,
    points: Vec<(f64, f64)>,
}

fn read(path: &Path) -> Result<String> {
    Ok(fs::read_to_string(path)?)
}

/// Loss rows as (global row index, base loss) per stage name.
fn loss_series(text: &str) -> Result<Vec<Series>> {
    let mut lines = text.lines();
    if lines.next() != Some("stage,epoch,step,objective,loss,base_loss") {
        return Err(Error::Format("unexpected loss CSV header".into()));
    }
    let mut out: Vec<Series> = Vec::new();
    for l in lines.filter(|l| !l.is_empty()) {
        let f: Vec<&str> = l.split(',').collect();
        if f.len() != 6 {
            return Err(Error::Format(format!("bad loss row `{l}`")));
        }
        let v: f64 = f[5].parse().map_err(|e| Error::Format(format!("bad loss `{}`: {e}", f[5])))?;
        match out.last_mut() {
            Some(s) if s.name == f[0] => {
                let x = s.points.len() as f64;
                s.points.push((x, v));
            }
            _ => out.push(Series {
                name: f[0].to_string(),
                points: vec![(0.0, v)],
            }),
        }
    }
    Ok(out)
}

/// `(id, dice)` rows of a Dice CSV.
fn dice_rows(text: &str) -> Result<Vec<(String, String)>> {
    let mut lines = text.lines();
    if lines.next() != Some("volume_id,dice") {
        return Err(Error::Format("unexpected Dice CSV header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.rsplit_once(',')
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .ok_or_else(|| Error::Format(format!("bad Dice row `{l}`")))
        })
        .collect()
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const M: f64 = 50.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// A line chart with labelled axes; `log_y` plots log10 of positive values.
fn svg_chart(title: &str, xlabel: &str, ylabel: &str, series: &[Series], log_y: bool) -> String {
    let tf = |y: f64| if log_y { y.max(1e-12).log10() } else { y };
    let pts = series.iter().flat_map(|s| s.points.iter().map(|&(x, y)| (x, tf(y))));
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for (x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let sy = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{title}</text>"#, W / 2.0);
    let _ = writeln!(
        s,
        r#"<path d="M{M} {} V{} H{}" fill="none" stroke="black"/>"#,
        M,
        H - M,
        W - M
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{xlabel}</text>"#, W / 2.0, H - 12.0);
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{ylabel}</text>"#,
        H / 2.0,
        H / 2.0
    );
    for (v, anchor, x, y) in [
        (x0, "start", sx(x0), H - M + 16.0),
        (x1, "end", sx(x1), H - M + 16.0),
    ] {
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{y:.1}" text-anchor="{anchor}">{v:.3}</text>"#);
    }
    for v in [y0, y1] {
        let label = if log_y { 10f64.powf(v) } else { v };
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{label:.3}</text>"#,
            M - 4.0,
            sy(v) + 4.0
        );
    }
    for (i, ser) in series.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        let path: Vec<String> = ser
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(tf(y))))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="1.5"/>"#,
            path.join(" ")
        );
        let ly = M + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{ly:.1}" fill="{c}" text-anchor="end">{}</text>"#,
            W - M,
            ser.name
        );
    }
    s.push_str("</svg>\n");
    s
}

fn froc_table(curves: &[(Model, Vec<FrocPoint>)]) -> Result<String> {
    let grid: Vec<f64> = curves[0].1.iter().map(|p| p.fp_per_volume).collect();
    let mut s = String::from("model");
    for g in &grid {
        let _ = write!(s, ",FP={g}");
    }
    s.push('\n');
    for (m, pts) in curves {
        if pts.iter().map(|p| p.fp_per_volume).ne(grid.iter().copied()) {
            return Err(Error::Format(format!("{} FROC uses a different FP grid", m.tag())));
        }
        s.push_str(m.tag());
        for p in pts {
            let _ = write!(s, ",{:.4}", p.tpr);
        }
        s.push('\n');
    }
    Ok(s)
}

/// Renders `froc.csv`, `froc.svg`, `loss.svg`, `dice_table.csv` (segmentation
/// runs) and `report.md` into `dir`.
pub fn report(dir: impl AsRef<Path>) -> Result<ReportFiles> {
    let dir = dir.as_ref();
    let froc_files: Vec<(Model, PathBuf)> = MODELS.iter().map(|&m| (m, dir.join(froc_csv(m)))).collect();
    let dice_files: Vec<(Model, PathBuf)> = MODELS
        .iter()
        .map(|&m| (m, dir.join(format!("dice_{}.csv", m.tag()))))
        .collect();
    let have_froc = froc_files.iter().any(|(_, p)| p.exists());
    let have_dice = dice_files.iter().any(|(_, p)| p.exists());
    let mut missing: Vec<String> = [LOSS_STAGE1, LOSS_STAGE2]
        .iter()
        .map(|n| dir.join(n))
        .filter(|p| !p.exists())
        .map(|p| p.display().to_string())
        .collect();
    if !have_dice {
        missing.extend(
            froc_files
                .iter()
                .filter(|(_, p)| !p.exists())
                .map(|(_, p)| p.display().to_string()),
        );
    }
    if !missing.is_empty() {
        return Err(Error::MissingArtifacts(missing));
    }
    let mut written = Vec::new();
    let mut put = |name: &str, body: &str| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, body)?;
        written.push(p);
        Ok(())
    };
    let mut md = String::from("# Run report\n");

    if have_froc {
        let curves = froc_files
            .iter()
            .filter(|(_, p)| p.exists())
            .map(|(m, p)| Ok((*m, read_froc_csv(&read(p)?)?)))
            .collect::<Result<Vec<_>>>()?;
        let table = froc_table(&curves)?;
        put(FROC_TABLE, &table)?;
        let series: Vec<Series> = curves
            .iter()
            .map(|(m, pts)| Series {
                name: m.tag().to_string(),
                points: pts.iter().map(|p| (p.fp_per_volume, p.tpr)).collect(),
            })
            .collect();
        put(FROC_PLOT, &svg_chart("FROC", "false positives per volume", "TPR", &series, false))?;
        md.push_str("\n## FROC (TPR at FP per volume)\n\n");
        md.push_str(&markdown_table(&table));
    }

    let mut losses = loss_series(&read(&dir.join(LOSS_STAGE1))?)?;
    losses.extend(loss_series(&read(&dir.join(LOSS_STAGE2))?)?);
    put(LOSS_PLOT, &svg_chart("Training loss", "step", "base loss", &losses, true))?;
    md.push_str("\n## Loss\n\n| stage | steps | first | last |\n|---|---|---|---|\n");
    for s in &losses {
        let first = s.points.first().map_or(f64::NAN, |p| p.1);
        let last = s.points.last().map_or(f64::NAN, |p| p.1);
        let _ = writeln!(md, "| {} | {} | {first:.5} | {last:.5} |", s.name, s.points.len());
    }

    if have_dice {
        let mut table = String::from("model,global,per_case\n");
        for (m, p) in dice_files.iter().filter(|(_, p)| p.exists()) {
            let rows = dice_rows(&read(p)?)?;
            let get = |k: &str| {
                rows.iter()
                    .find(|r| r.0 == k)
                    .map(|r| r.1.clone())
                    .ok_or_else(|| Error::Format(format!("{} Dice CSV lacks `{k}`", m.tag())))
            };
            let _ = writeln!(table, "{},{},{}", m.tag(), get("global")?, get("per_case")?);
        }
        put(DICE_TABLE, &table)?;
        md.push_str("\n## Dice\n\n");
        md.push_str(&markdown_table(&table));
    }
    put(REPORT_MD, &md)?;
    Ok(ReportFiles { written })
}

fn markdown_table(csv: &str) -> String {
    let mut s = String::new();
    for (i, l) in csv.lines().enumerate() {
        let _ = writeln!(s, "| {} |", l.split(',').collect::<Vec<_>>().join(" | "));
        if i == 0 {
            let _ = writeln!(s, "|{}", "---|".repeat(l.split(',').count()));
        }
    }
    s
}
