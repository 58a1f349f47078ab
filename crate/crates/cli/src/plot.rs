//! Static SVG rendering of observed tracks and predicted modes.

use std::fmt::Write;

use ndarray::{ArrayView2, Axis};
use social_stage::dataset::History;
use social_stage::metrics::AgentPrediction;

const SIZE: f64 = 800.0;
const MARGIN: f64 = 40.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2",
];

struct Frame {
    min: [f64; 2],
    scale: f64,
}

impl Frame {
    fn fit<'a>(tracks: impl Iterator<Item = ArrayView2<'a, f64>>) -> Self {
        let mut min = [f64::INFINITY; 2];
        let mut max = [f64::NEG_INFINITY; 2];
        for tr in tracks {
            for p in tr.outer_iter() {
                for d in 0..2 {
                    min[d] = min[d].min(p[d]);
                    max[d] = max[d].max(p[d]);
                }
            }
        }
        let span = (max[0] - min[0]).max(max[1] - min[1]).max(1e-9);
        Self {
            min,
            scale: (SIZE - 2.0 * MARGIN) / span,
        }
    }

    /// World to canvas, y pointing up.
    fn points(&self, track: ArrayView2<'_, f64>) -> String {
        let mut s = String::new();
        for p in track.outer_iter() {
            let x = MARGIN + (p[0] - self.min[0]) * self.scale;
            let y = SIZE - MARGIN - (p[1] - self.min[1]) * self.scale;
            let _ = write!(s, "{x:.2},{y:.2} ");
        }
        s.trim_end().to_string()
    }
}

/// One solid polyline per observed track and one dashed polyline per
/// predicted mode, with opacity equal to the mode probability. Predicted
/// modes start at the last observed position.
pub fn render(history: &History, predictions: &[AgentPrediction]) -> String {
    let observed: Vec<_> = history.positions.outer_iter().collect();
    let futures: Vec<ndarray::Array2<f64>> = predictions
        .iter()
        .enumerate()
        .flat_map(|(k, a)| {
            let last = history.positions.index_axis(Axis(0), k);
            let start = last.row(last.nrows() - 1).to_owned();
            a.trajectories.outer_iter().map(move |mode| {
                let mut t = ndarray::Array2::zeros((mode.nrows() + 1, 2));
                t.row_mut(0).assign(&start);
                t.slice_mut(ndarray::s![1.., ..]).assign(&mode);
                t
            })
        })
        .collect();
    let frame = Frame::fit(observed.iter().cloned().chain(futures.iter().map(|f| f.view())));

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" viewBox=\"0 0 {SIZE} {SIZE}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    let mut next = futures.iter();
    for (k, a) in predictions.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let _ = writeln!(
            svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2.5\"/>",
            frame.points(observed[k])
        );
        for (m, p) in a.probs.iter().enumerate() {
            let track = next.next().expect("one track per mode");
            let _ = writeln!(
                svg,
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" \
                 stroke-dasharray=\"6 4\" stroke-opacity=\"{p:.4}\" data-agent=\"{}\" data-mode=\"{m}\"/>",
                frame.points(track.view()),
                a.agent_id
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}
