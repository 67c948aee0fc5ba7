//! PNG figures of PSNR and accuracy along a sweep axis, one pair per fading kind.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Once;

use plotters::prelude::*;
use plotters::style::{register_font, FontStyle};

use crate::config::FadingKind;
use crate::error::{Error, Result};
use crate::pipeline::Scheme;
use crate::sweep::{ResultRow, ResultsTable, SweepAxis};

static FONT: &[u8] = include_bytes!("../assets/DejaVuSans.ttf");
static REGISTER: Once = Once::new();

fn ensure_font() {
    REGISTER.call_once(|| {
        if register_font("sans-serif", FontStyle::Normal, FONT).is_err() {
            log::warn!("bundled font rejected; plot text may be missing");
        }
    });
}

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Plot(e.to_string())
}

#[derive(Debug, Clone, Copy)]
enum Metric {
    Psnr,
    Accuracy,
}

impl Metric {
    fn value(self, r: &ResultRow) -> f64 {
        match self {
            Metric::Psnr => r.psnr_db,
            Metric::Accuracy => r.accuracy * 100.0,
        }
    }

    fn label(self) -> &'static str {
        match self {
            Metric::Psnr => "PSNR (dB)",
            Metric::Accuracy => "accuracy (%)",
        }
    }

    fn slug(self) -> &'static str {
        match self {
            Metric::Psnr => "psnr",
            Metric::Accuracy => "accuracy",
        }
    }
}

/// Mean over trials of `(axis value, metric)` per scheme, sorted by axis.
fn series(rows: &[&ResultRow], axis: SweepAxis, metric: Metric) -> BTreeMap<Scheme, Vec<(f64, f64)>> {
    let mut acc: BTreeMap<Scheme, BTreeMap<u64, (f64, f64, usize)>> = BTreeMap::new();
    for r in rows {
        let x = axis.value(r);
        let e = acc
            .entry(r.scheme)
            .or_default()
            .entry(x.to_bits())
            .or_insert((x, 0.0, 0));
        e.1 += metric.value(r);
        e.2 += 1;
    }
    acc.into_iter()
        .map(|(s, pts)| {
            let mut v: Vec<(f64, f64)> = pts.values().map(|&(x, sum, n)| (x, sum / n as f64)).collect();
            v.sort_by(|a, b| a.0.total_cmp(&b.0));
            (s, v)
        })
        .collect()
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    let span = (hi - lo).abs().max(1e-3);
    (lo - 0.08 * span, hi + 0.08 * span)
}

fn draw(
    path: &Path,
    fading: FadingKind,
    axis: SweepAxis,
    metric: Metric,
    data: &BTreeMap<Scheme, Vec<(f64, f64)>>,
) -> Result<()> {
    let pts: Vec<(f64, f64)> = data.values().flatten().copied().collect();
    let (x0, x1) = padded(
        pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min),
        pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max),
    );
    let (y0, y1) = padded(
        pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min),
        pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max),
    );

    let root = BitMapBackend::new(path, (800, 560)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let title = format!("{} vs {} ({fading})", metric.slug(), axis.slug());
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 24))
        .margin(16)
        .x_label_area_size(48)
        .y_label_area_size(64)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc(axis.label())
        .y_desc(metric.label())
        .label_style(("sans-serif", 15))
        .draw()
        .map_err(plot_err)?;

    for (scheme, line) in data {
        let color = match scheme {
            Scheme::MtmlRsc => RED,
            Scheme::Baseline => BLUE,
        };
        chart
            .draw_series(LineSeries::new(line.iter().copied(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(scheme.name())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
        chart
            .draw_series(line.iter().map(|&p| Circle::new(p, 4, color.filled())))
            .map_err(plot_err)?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .label_font(("sans-serif", 15))
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Writes `results.csv` plus a PSNR and an accuracy figure per fading kind
/// into `out_dir`. Returns every written path, data file first.
pub fn emit_plots(table: &ResultsTable, out_dir: &Path, metadata: &[(String, String)]) -> Result<Vec<PathBuf>> {
    if table.is_empty() {
        return Err(Error::Plot("results table is empty".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    ensure_font();
    let axis = SweepAxis::of_table(table);
    let data_path = out_dir.join("results.csv");
    table.write(&data_path, metadata)?;
    let mut written = vec![data_path];

    for fading in [FadingKind::Awgn, FadingKind::Rayleigh] {
        let rows: Vec<&ResultRow> = table.rows.iter().filter(|r| r.fading == fading).collect();
        if rows.is_empty() {
            continue;
        }
        for metric in [Metric::Psnr, Metric::Accuracy] {
            let path = out_dir.join(format!("{}_vs_{}_{fading}.png", metric.slug(), axis.slug()));
            draw(&path, fading, axis, metric, &series(&rows, axis, metric))?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> ResultsTable {
        let mut t = ResultsTable::default();
        for snr in [-5.0, 0.0, 5.0, 10.0, 15.0] {
            for (scheme, off) in [(Scheme::MtmlRsc, 1.0), (Scheme::Baseline, 0.0)] {
                t.push(ResultRow {
                    scheme,
                    fading: FadingKind::Awgn,
                    snr_db: snr,
                    d_sr: 0.5,
                    psnr_db: 20.0 + snr * 0.3 + off,
                    saturated: false,
                    accuracy: 0.6 + off * 0.05,
                    seed: 0,
                    eval_size: 100,
                })
                .unwrap();
            }
        }
        t
    }

    #[test]
    fn ten_rows_give_two_figures_and_one_data_file() {
        let dir = tempfile::tempdir().unwrap();
        let t = table();
        let files = emit_plots(&t, dir.path(), &[]).unwrap();
        assert_eq!(files.len(), 3);
        assert!(files[0].ends_with("results.csv"));
        for f in &files[1..] {
            let bytes = fs::read(f).unwrap();
            assert_eq!(&bytes[..8], b"\x89PNG\r\n\x1a\n");
        }
        assert_eq!(ResultsTable::read(&files[0]).unwrap(), t);
    }

    #[test]
    fn empty_table_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(emit_plots(&ResultsTable::default(), dir.path(), &[]).is_err());
    }
}
