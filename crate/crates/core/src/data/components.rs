//! Per-category sketch components under semantic masks, and label contours.

use serde::{Deserialize, Serialize};

use super::procedural::PoseTriplet;
use super::schema::label;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    LeftEye,
    RightEye,
    Nose,
    Mouth,
    FacialSkin,
    Glass,
    Hat,
    Hair,
}

impl Category {
    pub const ALL: [Category; 8] = [
        Category::LeftEye,
        Category::RightEye,
        Category::Nose,
        Category::Mouth,
        Category::FacialSkin,
        Category::Glass,
        Category::Hat,
        Category::Hair,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::LeftEye => "left_eye",
            Category::RightEye => "right_eye",
            Category::Nose => "nose",
            Category::Mouth => "mouth",
            Category::FacialSkin => "facial_skin",
            Category::Glass => "glass",
            Category::Hat => "hat",
            Category::Hair => "hair",
        }
    }

    pub fn parse(s: &str) -> Option<Category> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }

    pub fn label(self) -> u8 {
        match self {
            Category::LeftEye => label::LEFT_EYE,
            Category::RightEye => label::RIGHT_EYE,
            Category::Nose => label::NOSE,
            Category::Mouth => label::MOUTH,
            Category::FacialSkin => label::SKIN,
            Category::Glass => label::GLASSES,
            Category::Hat => label::HAT,
            Category::Hair => label::HAIR,
        }
    }

    /// Inner components are cut with a dilated mask, outer ones with their
    /// original mask.
    pub fn is_inner(self) -> bool {
        matches!(
            self,
            Category::LeftEye | Category::RightEye | Category::Nose | Category::Mouth | Category::Glass
        )
    }

    /// Accessories are retrieved by pose rather than by strokes.
    pub fn is_accessory(self) -> bool {
        matches!(self, Category::Glass | Category::Hat)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn within(&self, res: usize) -> bool {
        self.w > 0 && self.h > 0 && self.x + self.w <= res && self.y + self.h <= res
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentEntry {
    pub category: Category,
    /// Row-major h×w crop of the masked sketch.
    pub patch: Vec<f32>,
    /// Row-major h×w crop of the cutting mask.
    pub mask: Vec<bool>,
    pub rect: Rect,
    pub pose: PoseTriplet,
    pub source_id: String,
}

/// Disk dilation with Euclidean radius `r`.
pub fn dilate(mask: &[bool], res: usize, r: usize) -> Vec<bool> {
    if r == 0 {
        return mask.to_vec();
    }
    let ri = r as isize;
    let mut out = vec![false; res * res];
    for y in 0..res as isize {
        for x in 0..res as isize {
            if !mask[y as usize * res + x as usize] {
                continue;
            }
            for dy in -ri..=ri {
                for dx in -ri..=ri {
                    if dy * dy + dx * dx > ri * ri {
                        continue;
                    }
                    let (ny, nx) = (y + dy, x + dx);
                    if ny >= 0 && nx >= 0 && ny < res as isize && nx < res as isize {
                        out[ny as usize * res + nx as usize] = true;
                    }
                }
            }
        }
    }
    out
}

/// Cutting mask of each category present in `labels`.
pub fn component_masks(labels: &[u8], res: usize, dilation_radius: usize) -> Vec<(Category, Vec<bool>)> {
    Category::ALL
        .into_iter()
        .filter_map(|c| {
            let m: Vec<bool> = labels.iter().map(|&l| l == c.label()).collect();
            if !m.iter().any(|&b| b) {
                return None;
            }
            let m = if c.is_inner() { dilate(&m, res, dilation_radius) } else { m };
            Some((c, m))
        })
        .collect()
}

fn bounding_rect(mask: &[bool], res: usize) -> Option<Rect> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (y, x) = (i / res, i % res);
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    (x0 != usize::MAX).then(|| Rect {
        x: x0,
        y: y0,
        w: x1 - x0 + 1,
        h: y1 - y0 + 1,
    })
}

pub fn decompose_components(
    sketch: &[f32],
    labels: &[u8],
    res: usize,
    dilation_radius: usize,
    pose: PoseTriplet,
    source_id: &str,
) -> Vec<ComponentEntry> {
    component_masks(labels, res, dilation_radius)
        .into_iter()
        .filter_map(|(category, m)| {
            let rect = bounding_rect(&m, res)?;
            let mut patch = Vec::with_capacity(rect.w * rect.h);
            let mut mask = Vec::with_capacity(rect.w * rect.h);
            for y in rect.y..rect.y + rect.h {
                for x in rect.x..rect.x + rect.w {
                    let i = y * res + x;
                    patch.push(if m[i] { sketch[i] } else { 0.0 });
                    mask.push(m[i]);
                }
            }
            Some(ComponentEntry {
                category,
                patch,
                mask,
                rect,
                pose,
                source_id: source_id.to_string(),
            })
        })
        .collect()
}

/// Fraction of stroke pixels that fall inside some entry's mask.
pub fn stroke_coverage(sketch: &[f32], entries: &[ComponentEntry], res: usize) -> f64 {
    let mut covered = vec![false; res * res];
    for e in entries {
        for dy in 0..e.rect.h {
            for dx in 0..e.rect.w {
                if e.mask[dy * e.rect.w + dx] {
                    covered[(e.rect.y + dy) * res + e.rect.x + dx] = true;
                }
            }
        }
    }
    let strokes = sketch.iter().filter(|&&v| v > 0.5).count();
    if strokes == 0 {
        return 1.0;
    }
    let hit = sketch.iter().zip(&covered).filter(|(&v, &c)| v > 0.5 && c).count();
    hit as f64 / strokes as f64
}

/// 1 where a 4-neighbour carries a different label. Each boundary is drawn
/// once, on the side with the larger label, so contours are one pixel wide.
pub fn extract_map_contour(labels: &[u8], res: usize) -> Vec<f32> {
    let mut out = vec![0.0; res * res];
    for y in 0..res {
        for x in 0..res {
            let l = labels[y * res + x];
            let diff = (y > 0 && labels[(y - 1) * res + x] < l)
                || (y + 1 < res && labels[(y + 1) * res + x] < l)
                || (x > 0 && labels[y * res + x - 1] < l)
                || (x + 1 < res && labels[y * res + x + 1] < l);
            if diff {
                out[y * res + x] = 1.0;
            }
        }
    }
    out
}

/// Bilinear resampling of an h×w patch onto a size×size grid.
pub fn resample_patch(patch: &[f32], w: usize, h: usize, size: usize) -> Vec<f32> {
    let rows = crate::nn::ops::bilinear_matrix(h, size);
    let cols = crate::nn::ops::bilinear_matrix(w, size);
    let mut tmp = vec![0.0f64; h * size];
    for y in 0..h {
        for o in 0..size {
            tmp[y * size + o] = (0..w).map(|x| cols[o * w + x] * patch[y * w + x] as f64).sum();
        }
    }
    let mut out = vec![0.0f32; size * size];
    for oy in 0..size {
        for ox in 0..size {
            out[oy * size + ox] = (0..h).map(|y| rows[oy * h + y] * tmp[y * size + ox]).sum::<f64>() as f32;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_planes_give_one_vertical_line() {
        let res = 8;
        let labels: Vec<u8> = (0..64).map(|i| if i % 8 < 4 { 0 } else { 1 }).collect();
        let c = extract_map_contour(&labels, res);
        for y in 0..res {
            for x in 0..res {
                assert_eq!(c[y * res + x], if x == 4 { 1.0 } else { 0.0 });
            }
        }
        assert!(extract_map_contour(&[2; 64], 8).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn absent_category_is_skipped_and_patch_is_masked() {
        let res = 16;
        let mut labels = vec![label::SKIN; res * res];
        for y in 4..7 {
            for x in 3..6 {
                labels[y * res + x] = label::LEFT_EYE;
            }
        }
        let sketch = vec![1.0; res * res];
        let e = decompose_components(&sketch, &labels, res, 2, PoseTriplet::default(), "s");
        assert!(e.iter().all(|c| c.category != Category::Hat));
        let eye = e.iter().find(|c| c.category == Category::LeftEye).unwrap();
        assert_eq!(eye.rect, Rect { x: 1, y: 2, w: 7, h: 7 });
        for (p, m) in eye.patch.iter().zip(&eye.mask) {
            if !m {
                assert_eq!(*p, 0.0);
            }
        }
        assert!(e.iter().all(|c| c.rect.within(res)));
    }
}
