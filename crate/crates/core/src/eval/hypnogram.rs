//! Hypnogram series: true and predicted stages per epoch with mismatch marks.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::signal::Stage;

/// Conventional top-to-bottom display order.
pub const DISPLAY_ORDER: [Stage; 5] = [Stage::Wake, Stage::Rem, Stage::N1, Stage::N2, Stage::N3];

/// Row of `stage` counted from the top of the plot.
pub fn display_row(stage: Stage) -> usize {
    DISPLAY_ORDER.iter().position(|&s| s == stage).expect("every stage is listed")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypnogram {
    pub subject_id: String,
    pub epoch_index: Vec<usize>,
    pub truth: Vec<Stage>,
    pub pred: Vec<Stage>,
    /// Positions (into the series) where prediction and truth differ.
    pub errors: Vec<usize>,
}

impl Hypnogram {
    pub fn new(subject_id: &str, epoch_index: Vec<usize>, truth: Vec<Stage>, pred: Vec<Stage>) -> Result<Self> {
        ensure!(
            truth.len() == pred.len() && truth.len() == epoch_index.len(),
            "hypnogram series lengths differ"
        );
        let errors = (0..truth.len()).filter(|&i| truth[i] != pred[i]).collect();
        Ok(Hypnogram {
            subject_id: subject_id.to_string(),
            epoch_index,
            truth,
            pred,
            errors,
        })
    }

    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch_index,true_stage,pred_stage,true_row,pred_row,error\n");
        for i in 0..self.len() {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                self.epoch_index[i],
                self.truth[i].as_str(),
                self.pred[i].as_str(),
                display_row(self.truth[i]),
                display_row(self.pred[i]),
                u8::from(self.truth[i] != self.pred[i])
            );
        }
        s
    }

    /// Two stacked step plots (truth, prediction) with red dots on errors.
    pub fn to_svg(&self) -> String {
        let (w, panel, top, left) = (900.0, 150.0, 30.0, 60.0);
        let h = top * 2.0 + panel * 2.0 + 40.0;
        let n = self.len().max(1) as f64;
        let x = |i: usize| left + (w - left - 20.0) * i as f64 / n;
        let y = |p: usize, s: Stage| top + p as f64 * (panel + 40.0) + panel * display_row(s) as f64 / 4.0;
        let mut svg = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n\
             <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
             <text x=\"{left}\" y=\"16\">{} hypnogram ({} errors / {} epochs)</text>\n",
            xml_escape(&self.subject_id),
            self.errors.len(),
            self.len()
        );
        for (p, (label, series)) in [("true", &self.truth), ("predicted", &self.pred)].iter().enumerate() {
            for s in DISPLAY_ORDER {
                let _ = writeln!(
                    svg,
                    "<text x=\"4\" y=\"{:.1}\">{}</text>",
                    y(p, s) + 4.0,
                    s.as_str()
                );
            }
            let _ = writeln!(
                svg,
                "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{label}</text>",
                w - 20.0,
                y(p, Stage::Wake) - 8.0
            );
            let mut d = String::new();
            for (i, &s) in series.iter().enumerate() {
                if i == 0 {
                    let _ = write!(d, "M{:.1},{:.1}", x(0), y(p, s));
                } else {
                    let _ = write!(d, " H{:.1} V{:.1}", x(i), y(p, s));
                }
            }
            if !series.is_empty() {
                let _ = write!(d, " H{:.1}", x(series.len()));
            }
            let _ = writeln!(svg, "<path d=\"{d}\" fill=\"none\" stroke=\"black\" stroke-width=\"1\"/>");
        }
        for &i in &self.errors {
            let _ = writeln!(
                svg,
                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"2.5\" fill=\"red\"/>",
                x(i) + 0.5 * (x(1) - x(0)),
                y(1, self.pred[i])
            );
        }
        svg.push_str("</svg>\n");
        svg
    }

    /// Writes `<stem>.svg` and `<stem>.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let svg = dir.join(format!("{stem}.svg"));
        std::fs::write(&svg, self.to_svg()).map_err(|e| Error::io(&svg, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))
    }
}

pub(crate) fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}
