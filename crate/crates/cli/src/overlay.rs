//! Match-dump overlays: circles of radius 5 px, one colour per outcome.

use heatpoint::eval::MatchDump;
use heatpoint::io::netpbm::Rgb8;

pub const TP_GREEN: [u8; 3] = [0, 200, 0];
pub const FP_RED: [u8; 3] = [220, 0, 0];
pub const FN_ORANGE: [u8; 3] = [255, 140, 0];
pub const RADIUS: f64 = 5.0;

/// One-pixel ring of pixels whose centre lies within half a pixel of the circle.
pub fn circle(img: &mut Rgb8, cx: f64, cy: f64, rgb: [u8; 3]) {
    let (x0, y0) = (cx.round() as isize, cy.round() as isize);
    let reach = RADIUS as isize + 1;
    for y in y0 - reach..=y0 + reach {
        for x in x0 - reach..=x0 + reach {
            let d = ((x - x0) as f64).hypot((y - y0) as f64);
            if (d - RADIUS).abs() < 0.5 {
                img.put(x, y, rgb);
            }
        }
    }
}

/// Draw false negatives, then false positives, then true positives (at the prediction).
pub fn draw(img: &mut Rgb8, dump: &MatchDump) {
    for &[x, y] in &dump.false_negatives {
        circle(img, x, y, FN_ORANGE);
    }
    for &[x, y] in &dump.false_positives {
        circle(img, x, y, FP_RED);
    }
    for tp in &dump.true_positives {
        circle(img, tp.pred[0], tp.pred[1], TP_GREEN);
    }
}
