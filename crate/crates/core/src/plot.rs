//! Minimal PNG line plots of suite metrics against clutter bins.

use crate::harness::{CellMetrics, HarnessError, MetricsReport};
use image::{Rgb, RgbImage};
use std::path::Path;

const WIDTH: u32 = 480;
const HEIGHT: u32 = 320;
const MARGIN: i64 = 40;
const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
];

/// One line per method; x is the clutter bin index in suite order.
pub struct LinePlot {
    pub bins: Vec<String>,
    pub series: Vec<(String, Vec<f64>)>,
    pub y_max: f64,
}

impl LinePlot {
    pub fn from_report(report: &MetricsReport, noise: f64, metric: fn(&CellMetrics) -> f64) -> Self {
        let cells: Vec<_> = report.cells.iter().filter(|c| c.noise == noise).collect();
        let mut bins: Vec<String> = Vec::new();
        let mut methods: Vec<String> = Vec::new();
        for c in &cells {
            if !bins.contains(&c.clutter_bin) {
                bins.push(c.clutter_bin.clone());
            }
            if !methods.contains(&c.method) {
                methods.push(c.method.clone());
            }
        }
        let series: Vec<_> = methods
            .into_iter()
            .map(|m| {
                let ys: Vec<f64> = bins
                    .iter()
                    .map(|b| {
                        cells
                            .iter()
                            .find(|c| c.method == m && &c.clutter_bin == b)
                            .map_or(f64::NAN, |c| metric(c))
                    })
                    .collect();
                (m, ys)
            })
            .collect();
        let y_max = series
            .iter()
            .flat_map(|(_, ys)| ys.iter().copied())
            .filter(|y| y.is_finite())
            .fold(1.0, f64::max);
        Self { bins, series, y_max }
    }

    pub fn render(&self) -> RgbImage {
        let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
        let (w, h) = (WIDTH as i64, HEIGHT as i64);
        let axis = Rgb([0, 0, 0]);
        line(&mut img, (MARGIN, h - MARGIN), (w - MARGIN, h - MARGIN), axis);
        line(&mut img, (MARGIN, MARGIN), (MARGIN, h - MARGIN), axis);
        let n = self.bins.len().max(2) - 1;
        let x_of = |i: usize| MARGIN + (i as i64) * (w - 2 * MARGIN) / n as i64;
        let y_of = |y: f64| h - MARGIN - ((y / self.y_max) * (h - 2 * MARGIN) as f64).round() as i64;
        for i in 0..self.bins.len() {
            line(&mut img, (x_of(i), h - MARGIN), (x_of(i), h - MARGIN + 5), axis);
        }
        for k in 0..=4 {
            let y = y_of(self.y_max * k as f64 / 4.0);
            line(&mut img, (MARGIN - 5, y), (MARGIN, y), axis);
        }
        for (s, (_, ys)) in self.series.iter().enumerate() {
            let color = Rgb(PALETTE[s % PALETTE.len()]);
            let points: Vec<_> = ys
                .iter()
                .enumerate()
                .filter(|(_, y)| y.is_finite())
                .map(|(i, &y)| (x_of(i), y_of(y)))
                .collect();
            for p in points.windows(2) {
                line(&mut img, p[0], p[1], color);
            }
            for &(x, y) in &points {
                for dx in -2..=2 {
                    for dy in -2..=2 {
                        put(&mut img, x + dx, y + dy, color);
                    }
                }
            }
        }
        img
    }

    /// Color, method and values per series, one per line.
    pub fn legend(&self) -> String {
        let mut out = format!("x: clutter bins {}\ny: 0 to {}\n", self.bins.join(", "), self.y_max);
        for (s, (name, ys)) in self.series.iter().enumerate() {
            let [r, g, b] = PALETTE[s % PALETTE.len()];
            let values: Vec<_> = ys.iter().map(|y| format!("{y:.3}")).collect();
            out.push_str(&format!("#{r:02x}{g:02x}{b:02x} {name}: {}\n", values.join(", ")));
        }
        out
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn line(img: &mut RgbImage, a: (i64, i64), b: (i64, i64), c: Rgb<u8>) {
    let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).max(1);
    for i in 0..=steps {
        let x = a.0 + (b.0 - a.0) * i / steps;
        let y = a.1 + (b.1 - a.1) * i / steps;
        put(img, x, y, c);
    }
}

/// Success rate and average actions against clutter, one pair per noise level.
pub fn write_plots(report: &MetricsReport, dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    let mut noises: Vec<f64> = Vec::new();
    for c in &report.cells {
        if !noises.contains(&c.noise) {
            noises.push(c.noise);
        }
    }
    let metrics: [(&str, fn(&CellMetrics) -> f64); 2] = [
        ("success_rate", |c| c.success_rate),
        ("avg_actions", |c| c.avg_actions_per_task),
    ];
    for noise in noises {
        for (name, metric) in metrics {
            let plot = LinePlot::from_report(report, noise, metric);
            let stem = format!("{name}_noise{noise}");
            plot.render().save(dir.join(format!("{stem}.png")))?;
            std::fs::write(dir.join(format!("{stem}.txt")), plot.legend())?;
        }
    }
    Ok(())
}
