//! Page overlay: elements in gray, group outlines colored by kind.

use std::io::Cursor;

use anyhow::{Context, Result};
use formgraph::doc_model::{BBox, ElementKind, FormPage, GroupAnnotation, GroupKind};
use formgraph::evaluator::EvalGroup;
use image::{ImageFormat, Rgb, RgbImage};

pub const RED: Rgb<u8> = Rgb([220, 0, 0]);
pub const GREEN: Rgb<u8> = Rgb([0, 170, 0]);
pub const BLUE: Rgb<u8> = Rgb([0, 0, 230]);
const TEXT: Rgb<u8> = Rgb([170, 170, 170]);
const WIDGET: Rgb<u8> = Rgb([110, 110, 110]);
const STROKE: u32 = 2;

pub fn kind_color(kind: GroupKind) -> Rgb<u8> {
    match kind {
        GroupKind::TextBlock | GroupKind::TextField => RED,
        GroupKind::ChoiceField => GREEN,
        GroupKind::ChoiceGroup => BLUE,
    }
}

/// Pixel span `[lo, hi)` of a box edge pair, clipped to `limit`.
fn span(lo: f64, hi: f64, limit: u32) -> (u32, u32) {
    let a = lo.floor().clamp(0.0, limit as f64) as u32;
    let b = hi.ceil().clamp(0.0, limit as f64) as u32;
    (a, b.max(a))
}

fn fill(img: &mut RgbImage, b: &BBox, color: Rgb<u8>) {
    let (x0, x1) = span(b.left, b.right(), img.width());
    let (y0, y1) = span(b.top, b.bottom(), img.height());
    for y in y0..y1 {
        for x in x0..x1 {
            img.put_pixel(x, y, color);
        }
    }
}

fn outline(img: &mut RgbImage, b: &BBox, color: Rgb<u8>, stroke: u32) {
    let (x0, x1) = span(b.left, b.right(), img.width());
    let (y0, y1) = span(b.top, b.bottom(), img.height());
    for y in y0..y1 {
        for x in x0..x1 {
            let edge = x < x0 + stroke || x + stroke >= x1 || y < y0 + stroke || y + stroke >= y1;
            if edge {
                img.put_pixel(x, y, color);
            }
        }
    }
}

/// Draws `page` and the outlines of `groups`. Group boxes are computed on
/// `page`, so the annotations must reference its elements.
pub fn render_page(page: &FormPage, groups: &[GroupAnnotation]) -> RgbImage {
    let (w, h) = (page.width.ceil().max(1.0) as u32, page.height.ceil().max(1.0) as u32);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    for e in &page.elements {
        match e.kind {
            ElementKind::Widget => outline(&mut img, &e.bbox, WIDGET, 1),
            _ => fill(&mut img, &e.bbox, TEXT),
        }
    }
    // larger constructs last so their outlines stay visible
    for kind in GroupKind::ALL {
        for ann in groups.iter().filter(|a| a.kind == kind) {
            if let Some(b) = EvalGroup::from_annotation(page, ann).bbox {
                let pad = STROKE as f64;
                let padded = BBox::new(b.left - pad, b.top - pad, b.width + 2.0 * pad, b.height + 2.0 * pad);
                outline(&mut img, &padded, kind_color(kind), STROKE);
            }
        }
    }
    img
}

pub fn png_bytes(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).context("encoding PNG")?;
    Ok(out.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;
    use formgraph::doc_model::Element;

    #[test]
    fn outlines_use_kind_colors() {
        let page = FormPage {
            page_id: "p".into(),
            width: 100.0,
            height: 50.0,
            elements: vec![
                Element::text_run(1, BBox::new(10.0, 10.0, 20.0, 10.0), vec!["a".into()]),
                Element::widget(2, BBox::new(50.0, 10.0, 20.0, 10.0)),
            ],
            annotations: Vec::new(),
        };
        let bare = render_page(&page, &[]);
        assert_eq!((bare.width(), bare.height()), (100, 50));
        assert!(bare.pixels().all(|p| *p != RED && *p != GREEN && *p != BLUE));

        let groups = [
            GroupAnnotation::new(GroupKind::TextBlock, 1, [1]),
            GroupAnnotation::new(GroupKind::ChoiceField, 2, [1, 2]),
        ];
        let img = render_page(&page, &groups);
        assert_eq!(*img.get_pixel(8, 15), GREEN);
        assert!(img.pixels().any(|p| *p == RED));
    }
}
