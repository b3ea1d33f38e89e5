//! Minimal SVG rendering of a correlation scatter: identity correlation on
//! the x axis, phonetic correlation on the y axis.

use avsep::report::{PairType, ScatterRow};

const SIZE: f64 = 480.0;
const PAD: f64 = 48.0;

fn to_px(v: f64) -> f64 {
    PAD + (v.clamp(-1.0, 1.0) + 1.0) / 2.0 * (SIZE - 2.0 * PAD)
}

pub fn scatter_svg(rows: &[ScatterRow]) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" viewBox=\"0 0 {SIZE} {SIZE}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <rect x=\"{PAD}\" y=\"{PAD}\" width=\"{w}\" height=\"{w}\" fill=\"none\" stroke=\"#444\"/>\n\
         <text x=\"{cx}\" y=\"{by}\" text-anchor=\"middle\" font-size=\"13\">identity correlation</text>\n\
         <text x=\"14\" y=\"{cx}\" text-anchor=\"middle\" font-size=\"13\" transform=\"rotate(-90 14 {cx})\">phonetic correlation</text>\n",
        w = SIZE - 2.0 * PAD,
        cx = SIZE / 2.0,
        by = SIZE - 12.0,
    );
    for r in rows {
        let color = match r.pair_type {
            PairType::Pos => "#1f77b4",
            PairType::Neg => "#d62728",
        };
        s.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.5\" fill=\"{color}\" fill-opacity=\"0.6\"/>\n",
            to_px(r.identity_corr),
            SIZE - to_px(r.phonetic_corr)
        ));
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_circle_per_row() {
        let row = ScatterRow {
            pair_id: 0,
            pair_type: PairType::Pos,
            identity_corr: 1.0,
            phonetic_corr: -1.0,
            si_snr: 3.0,
        };
        let svg = scatter_svg(&[row, ScatterRow { pair_type: PairType::Neg, ..row }]);
        assert_eq!(svg.matches("<circle").count(), 2);
        assert!(svg.contains(&format!("cx=\"{:.2}\" cy=\"{:.2}\"", SIZE - PAD, SIZE - PAD)));
    }
}
