//! Synthetic forms and invoices written in the on-disk dataset layouts.
//!
//! Pages are drawn with glyph-like strokes whose style depends on the
//! entity class (bold headers, printed questions, handwritten answers,
//! small footers), so both the geometric and the visual pathway carry
//! signal. Used by the tests and for smoke runs without the real data.

use std::fs;
use std::path::Path;

use image::{GrayImage, Luma};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::error::{PipelineError, Result};

pub const PAGE_WIDTH: u32 = 762;
pub const PAGE_HEIGHT: u32 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Style {
    Header,
    Printed,
    Handwritten,
    Small,
}

struct Entity {
    id: usize,
    bbox: [u32; 4],
    label: &'static str,
    style: Style,
    links: Vec<[usize; 2]>,
}

fn page(rng: &mut ChaCha8Rng) -> GrayImage {
    let mut img = GrayImage::from_pixel(PAGE_WIDTH, PAGE_HEIGHT, Luma([250]));
    for _ in 0..(PAGE_WIDTH * PAGE_HEIGHT / 200) {
        let (x, y) = (rng.gen_range(0..PAGE_WIDTH), rng.gen_range(0..PAGE_HEIGHT));
        img.put_pixel(x, y, Luma([rng.gen_range(200..250)]));
    }
    img
}

fn fill(img: &mut GrayImage, x0: u32, y0: u32, x1: u32, y1: u32, v: u8) {
    for y in y0..y1.min(img.height()) {
        for x in x0..x1.min(img.width()) {
            img.put_pixel(x, y, Luma([v]));
        }
    }
}

/// Draws glyph strokes inside `b`.
fn draw_text(img: &mut GrayImage, b: [u32; 4], style: Style, rng: &mut ChaCha8Rng) {
    let [x0, y0, x1, y1] = b;
    let h = y1 - y0;
    let (cell, stroke, ink) = match style {
        Style::Header => (12, 3, 15u8),
        Style::Printed => (8, 2, 60),
        Style::Handwritten => (7, 1, 35),
        Style::Small => (5, 1, 120),
    };
    let mut x = x0 + 1;
    while x + stroke < x1 {
        if rng.gen_bool(0.12) {
            x += cell;
            continue;
        }
        let frac = match style {
            Style::Header => 1.0,
            _ => rng.gen_range(0.5..1.0),
        };
        let gh = ((h as f64 * frac) as u32).max(2);
        let top = y1 - gh;
        match style {
            Style::Handwritten => {
                // Slanted strokes with a wandering baseline.
                let lean = rng.gen_range(0..4);
                for dy in 0..gh {
                    let px = x + lean * (gh - dy) / gh.max(1);
                    if px < x1 {
                        img.put_pixel(px, top + dy, Luma([ink]));
                    }
                }
            }
            _ => fill(img, x, top, x + stroke, y1, ink),
        }
        x += cell;
    }
    if style == Style::Header {
        fill(img, x0, y1.saturating_sub(2), x1, y1, ink);
    }
}

fn entity_json(e: &Entity) -> serde_json::Value {
    let [x0, y0, x1, y1] = e.bbox;
    json!({
        "box": [x0, y0, x1, y1],
        "text": "",
        "label": e.label,
        "words": [{"box": [x0, y0, x1, y1], "text": ""}],
        "linking": e.links,
        "id": e.id,
    })
}

fn add(entities: &mut Vec<Entity>, bbox: [u32; 4], label: &'static str, style: Style) -> usize {
    let id = entities.len();
    entities.push(Entity {
        id,
        bbox,
        label,
        style,
        links: Vec::new(),
    });
    id
}

fn link(entities: &mut [Entity], a: usize, b: usize) {
    entities[a].links.push([a, b]);
    entities[b].links.push([a, b]);
}

/// One form page: a title, sections of question/answer rows, footers.
fn form(rng: &mut ChaCha8Rng) -> (Vec<Entity>, GrayImage) {
    let mut es = Vec::new();
    let tw = rng.gen_range(220..380);
    let tx = (PAGE_WIDTH - tw) / 2 + rng.gen_range(0..40) - 20;
    add(&mut es, [tx, 30, tx + tw, 58], "header", Style::Header);
    let mut y = 90 + rng.gen_range(0..20);
    let sections = rng.gen_range(2..4);
    for _ in 0..sections {
        let sub = rng.gen_bool(0.7).then(|| {
            let w = rng.gen_range(120..220);
            add(&mut es, [40, y, 40 + w, y + 22], "header", Style::Header)
        });
        if sub.is_some() {
            y += 36;
        }
        let two_col = rng.gen_bool(0.4);
        let rows = rng.gen_range(3..6);
        for _ in 0..rows {
            if y > PAGE_HEIGHT - 130 {
                break;
            }
            let cols: &[u32] = if two_col { &[40, 400] } else { &[40] };
            for &cx in cols {
                let qw = rng.gen_range(90..170);
                let q = add(&mut es, [cx, y, cx + qw, y + 18], "question", Style::Printed);
                if let Some(s) = sub {
                    if rng.gen_bool(0.5) {
                        link(&mut es, s, q);
                    }
                }
                if rng.gen_bool(0.85) {
                    let below = rng.gen_bool(0.2);
                    let limit = if two_col { cx + 330 } else { PAGE_WIDTH - 40 };
                    let (ax, ay) = if below {
                        (cx + 10, y + 22)
                    } else {
                        (cx + qw + rng.gen_range(12..30), y)
                    };
                    let aw = rng.gen_range(60..200).min(limit.saturating_sub(ax + 1)).max(30);
                    let a = add(&mut es, [ax, ay, ax + aw, ay + 18], "answer", Style::Handwritten);
                    link(&mut es, q, a);
                }
            }
            y += rng.gen_range(44..56);
        }
        y += 20;
        if y > PAGE_HEIGHT - 120 {
            break;
        }
    }
    for _ in 0..rng.gen_range(1..4) {
        let w = rng.gen_range(40..100);
        let x = rng.gen_range(30..PAGE_WIDTH - w - 30);
        let yy = PAGE_HEIGHT - rng.gen_range(30..70);
        add(&mut es, [x, yy, x + w, yy + 10], "other", Style::Small);
    }
    let mut img = page(rng);
    for e in &es {
        draw_text(&mut img, e.bbox, e.style, rng);
        if e.style == Style::Handwritten {
            let [x0, _, x1, y1] = e.bbox;
            fill(&mut img, x0, y1 + 2, x1, y1 + 3, 140);
        }
    }
    (es, img)
}

fn write_page(dir: &Path, name: &str, ann: &serde_json::Value, img: &GrayImage) -> Result<()> {
    let ann_dir = dir.join("annotations");
    let img_dir = dir.join("images");
    for d in [&ann_dir, &img_dir] {
        fs::create_dir_all(d).map_err(PipelineError::io(d))?;
    }
    let path = ann_dir.join(format!("{name}.json"));
    fs::write(
        &path,
        serde_json::to_vec_pretty(ann).map_err(PipelineError::json(&path))?,
    )
    .map_err(PipelineError::io(&path))?;
    let ip = img_dir.join(format!("{name}.png"));
    img.save(&ip)
        .map_err(|source| PipelineError::Image { path: ip, source })
}

/// Writes `train` + `test` synthetic forms in the FUNSD layout under `root`.
pub fn write_funsd(root: &Path, train: usize, test: usize, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (sub, n, prefix) in [
        ("training_data", train, "synth_train"),
        ("testing_data", test, "synth_test"),
    ] {
        for i in 0..n {
            let (es, img) = form(&mut rng);
            let ann = json!({ "form": es.iter().map(entity_json).collect::<Vec<_>>() });
            write_page(&root.join(sub), &format!("{prefix}_{i:04}"), &ann, &img)?;
        }
    }
    Ok(())
}

/// One invoice page: supplier/receiver blocks, header info, a positions
/// table and a total.
fn invoice(rng: &mut ChaCha8Rng) -> (Vec<Entity>, Vec<[u32; 4]>, GrayImage) {
    let mut es = Vec::new();
    let mut tables = Vec::new();
    for i in 0..rng.gen_range(2..4) {
        let y = 40 + i * 22;
        add(
            &mut es,
            [40, y, 40 + rng.gen_range(120..220), y + 16],
            "supplier",
            Style::Header,
        );
    }
    for i in 0..rng.gen_range(2..4) {
        let y = 160 + i * 22;
        add(
            &mut es,
            [40, y, 40 + rng.gen_range(120..200), y + 16],
            "receiver",
            Style::Printed,
        );
    }
    for i in 0..rng.gen_range(2..4) {
        let y = 60 + i * 24;
        add(
            &mut es,
            [460, y, 460 + rng.gen_range(120..240), y + 16],
            "invoice info",
            Style::Printed,
        );
    }
    let rows = rng.gen_range(3..8);
    let top = 300;
    let xs = [40u32, 330, 450, 580];
    let widths = [260u32, 90, 100, 130];
    for r in 0..rows {
        let y = top + r * 30;
        for (x, w) in xs.iter().zip(widths) {
            add(
                &mut es,
                [*x, y, x + rng.gen_range(w / 2..w), y + 16],
                "positions",
                Style::Small,
            );
        }
    }
    tables.push([32, top - 8, 718, top + rows * 30]);
    let ty = top + rows * 30 + 40;
    add(&mut es, [560, ty, 700, ty + 20], "total", Style::Header);
    for _ in 0..rng.gen_range(1..4) {
        let y = rng.gen_range(ty + 60..PAGE_HEIGHT - 40);
        let x = rng.gen_range(40..500);
        add(
            &mut es,
            [x, y, x + rng.gen_range(80..200), y + 12],
            "other",
            Style::Small,
        );
    }
    let mut img = page(rng);
    for e in &es {
        draw_text(&mut img, e.bbox, e.style, rng);
    }
    for t in &tables {
        fill(&mut img, t[0], t[1], t[2], t[1] + 1, 90);
        fill(&mut img, t[0], t[3], t[2], t[3] + 1, 90);
    }
    (es, tables, img)
}

/// Writes `n` synthetic invoices in the invoice layout under `root`.
pub fn write_invoices(root: &Path, n: usize, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n {
        let (es, tables, img) = invoice(&mut rng);
        let name = format!("invoice_{i:04}");
        let regions: Vec<_> = es
            .iter()
            .map(|e| json!({"id": e.id, "box": e.bbox, "label": e.label, "text": ""}))
            .collect();
        let ann = json!({"image": format!("{name}.png"), "regions": regions, "tables": tables});
        write_page(root, &name, &ann, &img)?;
    }
    Ok(())
}
