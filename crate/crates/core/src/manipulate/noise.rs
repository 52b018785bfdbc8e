//! Query noise: Gaussian image blur and key-token removal from questions.

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};

/// Interleaved RGB pixels as `f32`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbBuffer {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl RgbBuffer {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Image(format!(
                "buffer of {} values does not match {width}x{height} RGB",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        Self {
            width,
            height,
            data: rgb.iter().copied().cycle().take(width * height * 3).collect(),
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn from_image(img: &image::RgbImage) -> Self {
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.as_raw().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_image(&self) -> image::RgbImage {
        let raw = self
            .data
            .iter()
            .map(|&v| v.round().clamp(0.0, 255.0) as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions")
    }
}

/// Normalized 1-D Gaussian weights with radius `ceil(3 * sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let w: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = w.iter().sum();
    w.into_iter().map(|x| x / sum).collect()
}

fn convolve_axis(src: &[f32], out: &mut [f32], w: usize, h: usize, kernel: &[f64], horizontal: bool) {
    let radius = (kernel.len() / 2) as i64;
    let (len, lines) = if horizontal { (w, h) } else { (h, w) };
    for line in 0..lines {
        for pos in 0..len {
            let mut acc = [0f64; 3];
            for (k, &kw) in kernel.iter().enumerate() {
                let p = (pos as i64 + k as i64 - radius).clamp(0, len as i64 - 1) as usize;
                let (x, y) = if horizontal { (p, line) } else { (line, p) };
                let i = (y * w + x) * 3;
                for c in 0..3 {
                    acc[c] += kw * src[i + c] as f64;
                }
            }
            let (x, y) = if horizontal { (pos, line) } else { (line, pos) };
            let o = (y * w + x) * 3;
            for c in 0..3 {
                out[o + c] = acc[c] as f32;
            }
        }
    }
}

/// Separable Gaussian blur with clamped edges.
pub fn blur_image(pixels: &RgbBuffer, sigma: f64) -> Result<RgbBuffer> {
    if pixels.width == 0 || pixels.height == 0 || pixels.data.is_empty() {
        return Err(Error::Image("empty buffer".into()));
    }
    if !sigma.is_finite() || sigma <= 0.0 {
        return Err(Error::Image(format!("sigma must be positive, got {sigma}")));
    }
    let kernel = gaussian_kernel(sigma);
    let (w, h) = (pixels.width, pixels.height);
    let mut tmp = vec![0f32; pixels.data.len()];
    convolve_axis(&pixels.data, &mut tmp, w, h, &kernel, true);
    let mut out = vec![0f32; pixels.data.len()];
    convolve_axis(&tmp, &mut out, w, h, &kernel, false);
    RgbBuffer::new(w, h, out)
}

/// Blurs an image file and writes the result as PNG.
pub fn blur_file(src: &Path, dst: &Path, sigma: f64) -> Result<()> {
    let img = image::open(src)
        .map_err(|e| Error::Image(format!("{}: {e}", src.display())))?
        .to_rgb8();
    let blurred = blur_image(&RgbBuffer::from_image(&img), sigma)?;
    if let Some(parent) = dst.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    blurred
        .to_image()
        .save(dst)
        .map_err(|e| Error::Image(format!("{}: {e}", dst.display())))
}

const FUNCTION_WORDS: &[&str] = &[
    "a", "about", "above", "after", "all", "am", "an", "and", "any", "are", "as", "at", "be",
    "been", "being", "below", "between", "both", "but", "by", "can", "color", "colour", "could",
    "did", "do", "does", "doing", "down", "each", "for", "from", "had", "has", "have", "he", "her",
    "here", "his", "how", "i", "if", "in", "into", "is", "it", "its", "kind", "many", "may", "me",
    "might", "much", "my", "no", "not", "of", "off", "on", "or", "our", "out", "over", "she",
    "should", "so", "some", "than", "that", "the", "their", "them", "then", "there", "these",
    "they", "this", "those", "to", "type", "under", "up", "was", "we", "were", "what", "when",
    "where", "which", "who", "whom", "whose", "why", "will", "with", "would", "yes", "you",
    "your",
];

fn split_token(tok: &str) -> (&str, &str, &str) {
    let start = tok.find(|c: char| c.is_alphanumeric()).unwrap_or(tok.len());
    let end = tok
        .rfind(|c: char| c.is_alphanumeric())
        .map(|i| i + tok[i..].chars().next().map_or(1, char::len_utf8))
        .unwrap_or(start);
    (&tok[..start], &tok[start..end.max(start)], &tok[end.max(start)..])
}

/// Content words of `question`: every token outside a fixed function-word
/// list.
pub fn default_key_tokens(question: &str) -> Vec<String> {
    question
        .split_whitespace()
        .map(|t| split_token(t).1.to_lowercase())
        .filter(|w| !w.is_empty() && !FUNCTION_WORDS.contains(&w.as_str()))
        .collect()
}

/// Removes every occurrence of `key_tokens` (case-insensitive). Trailing
/// punctuation of a removed token attaches to the previous kept token.
/// Never returns an empty string.
pub fn degrade_question(question: &str, key_tokens: &[String]) -> String {
    let keys: HashSet<String> = key_tokens.iter().map(|k| k.to_lowercase()).collect();
    let mut kept: Vec<String> = Vec::new();
    for tok in question.split_whitespace() {
        let (lead, core, trail) = split_token(tok);
        if !core.is_empty() && keys.contains(&core.to_lowercase()) {
            let residue = format!("{lead}{trail}");
            if residue.is_empty() {
                continue;
            }
            match kept.last_mut() {
                Some(prev) => prev.push_str(&residue),
                None => kept.push(residue),
            }
        } else {
            kept.push(tok.to_string());
        }
    }
    let out = kept.join(" ");
    if out.trim().is_empty() {
        "?".to_string()
    } else {
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_is_fixed_point() {
        let img = RgbBuffer::filled(9, 7, [12.0, 200.0, 77.0]);
        let out = blur_image(&img, 2.0).unwrap();
        for (a, b) in img.data.iter().zip(&out.data) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn impulse_response_sums_to_one() {
        let (w, h) = (41, 41);
        let mut img = RgbBuffer::filled(w, h, [0.0; 3]);
        let c = (20 * w + 20) * 3;
        img.data[c] = 1.0;
        let out = blur_image(&img, 5.0).unwrap();
        let sum: f64 = out.data.iter().step_by(3).map(|&v| v as f64).sum();
        assert!((sum - 1.0).abs() < 1e-4, "{sum}");
    }

    #[test]
    fn kernel_radius_and_normalization() {
        let k = gaussian_kernel(5.0);
        assert_eq!(k.len(), 31);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn blur_rejects_bad_input() {
        assert!(blur_image(&RgbBuffer::filled(0, 0, [0.0; 3]), 1.0).is_err());
        assert!(blur_image(&RgbBuffer::filled(2, 2, [0.0; 3]), 0.0).is_err());
    }

    #[test]
    fn degrade_examples() {
        assert_eq!(
            degrade_question("What color is the dog?", &["dog".into()]),
            "What color is the?"
        );
        assert_eq!(degrade_question("What color is the dog?", &[]), "What color is the dog?");
        assert_eq!(degrade_question("Dog?", &["dog".into()]), "?");
        assert_eq!(degrade_question("dog", &["dog".into()]), "?");
    }

    #[test]
    fn default_heuristic_picks_content_words() {
        assert_eq!(default_key_tokens("What color is the dog?"), vec!["dog"]);
        assert_eq!(
            default_key_tokens("How many zebras are near the river?"),
            vec!["zebras", "near", "river"]
        );
    }
}
