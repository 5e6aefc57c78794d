//! Link-prediction overlays.

use image::{Rgb, RgbImage};

use crate::pipeline::DocPrediction;

const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [214, 39, 40],
    [140, 86, 75],
    [227, 119, 194],
    [23, 190, 207],
];
const LINK: [u8; 3] = [220, 20, 60];
const GAP: u32 = 12;

pub fn class_color(class: usize) -> Rgb<u8> {
    Rgb(PALETTE[class % PALETTE.len()])
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

/// Bresenham segment, two pixels thick.
pub fn draw_line(img: &mut RgbImage, from: [f64; 2], to: [f64; 2], c: Rgb<u8>) {
    let (mut x0, mut y0) = (from[0].round() as i64, from[1].round() as i64);
    let (x1, y1) = (to[0].round() as i64, to[1].round() as i64);
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        put(img, x0, y0, c);
        put(img, x0 + 1, y0, c);
        put(img, x0, y0 + 1, c);
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

pub fn draw_rect(img: &mut RgbImage, b: &geocontrast_core::BBox, c: Rgb<u8>) {
    let (x0, y0, x1, y1) = (b.xmin as i64, b.ymin as i64, b.xmax as i64, b.ymax as i64);
    for t in 0..2 {
        for x in x0..=x1 {
            put(img, x, y0 + t, c);
            put(img, x, y1 - t, c);
        }
        for y in y0..=y1 {
            put(img, x0 + t, y, c);
            put(img, x1 - t, y, c);
        }
    }
}

/// Draws boxes colored by `classes` and a segment between box centers for
/// every pair in `links`. Returns the number of segments drawn.
pub fn draw_panel(img: &mut RgbImage, pred: &DocPrediction, classes: &[usize], links: &[(usize, usize)]) -> usize {
    for (b, &c) in pred.boxes.iter().zip(classes) {
        draw_rect(img, b, class_color(c));
    }
    for &(s, d) in links {
        draw_line(img, pred.boxes[s].center(), pred.boxes[d].center(), Rgb(LINK));
    }
    links.len()
}

/// Prediction panel, with the ground-truth panel on the left when the
/// document is labeled. Returns the image and the gold link count.
pub fn compose(page: &RgbImage, pred: &DocPrediction) -> (RgbImage, Option<usize>) {
    let predicted: Vec<(usize, usize)> = pred
        .edges
        .iter()
        .filter(|e| e.positive)
        .map(|e| (e.src, e.dst))
        .collect();
    let mut right = page.clone();
    draw_panel(&mut right, pred, &pred.node_pred, &predicted);
    let Some(gold) = &pred.node_gold else {
        return (right, None);
    };
    let gold_links: Vec<(usize, usize)> = pred
        .edges
        .iter()
        .filter(|e| e.gold == Some(true))
        .map(|e| (e.src, e.dst))
        .collect();
    let mut left = page.clone();
    let n = draw_panel(&mut left, pred, gold, &gold_links);
    let (w, h) = page.dimensions();
    let mut out = RgbImage::from_pixel(2 * w + GAP, h, Rgb([255, 255, 255]));
    image::imageops::replace(&mut out, &left, 0, 0);
    image::imageops::replace(&mut out, &right, i64::from(w + GAP), 0);
    (out, Some(n))
}
