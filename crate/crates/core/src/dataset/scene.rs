use serde::{Deserialize, Serialize};

use super::QuestionType;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disc,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Disc, ShapeKind::Square, ShapeKind::Triangle];

    pub fn name(&self) -> &'static str {
        match self {
            ShapeKind::Disc => "disc",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }

    pub fn index(&self) -> usize {
        *self as usize
    }

    fn from_name(name: &str) -> Option<ShapeKind> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    fn from_plural(name: &str) -> Option<ShapeKind> {
        name.strip_suffix('s').and_then(Self::from_name)
    }

    /// Whether the offset `(dy, dx)` from the center lies inside a shape of
    /// circumradius-like size `r`.
    pub fn contains(&self, dy: f64, dx: f64, r: f64) -> bool {
        match self {
            ShapeKind::Disc => dy * dy + dx * dx <= r * r,
            ShapeKind::Square => {
                let half = 0.85 * r;
                dy.abs() <= half && dx.abs() <= half
            }
            ShapeKind::Triangle => {
                // upward isosceles triangle: apex at -r, base at +0.8r
                let top = -r;
                let bottom = 0.8 * r;
                if dy < top || dy > bottom {
                    return false;
                }
                let half_width = 1.05 * r * (dy - top) / (bottom - top);
                dx.abs() <= half_width
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Density {
    Sparse,
    Dense,
}

impl Density {
    pub fn name(&self) -> &'static str {
        match self {
            Density::Sparse => "sparse",
            Density::Dense => "dense",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub kind: ShapeKind,
    /// Carries no contrast in the first three bands.
    pub hidden: bool,
    pub center_y: f64,
    pub center_x: f64,
    pub size: f64,
    /// Additive contrast per band.
    pub signature: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub image_id: String,
    pub tile: u32,
    pub density: Density,
    pub objects: Vec<SceneObject>,
}

impl SceneGraph {
    pub fn count(&self, kind: ShapeKind, hidden: bool) -> usize {
        self.objects
            .iter()
            .filter(|o| o.kind == kind && o.hidden == hidden)
            .count()
    }

    /// Ground-truth answer of `question` computed from the graph alone.
    pub fn answer(&self, question: &QuestionSpec) -> String {
        let yes_no = |b: bool| if b { "yes" } else { "no" }.to_string();
        match *question {
            QuestionSpec::Presence(k) => yes_no(self.count(k, false) > 0),
            QuestionSpec::Count(k) => self.count(k, false).to_string(),
            QuestionSpec::Comparison(a, b) => yes_no(self.count(a, false) > self.count(b, false)),
            QuestionSpec::Scene => self.density.name().to_string(),
            QuestionSpec::Spectral(k) => yes_no(self.count(k, true) > 0),
        }
    }
}

/// Structured form of a template question.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuestionSpec {
    Presence(ShapeKind),
    Count(ShapeKind),
    Comparison(ShapeKind, ShapeKind),
    Scene,
    Spectral(ShapeKind),
}

impl QuestionSpec {
    pub fn question_type(&self) -> QuestionType {
        match self {
            QuestionSpec::Presence(_) => QuestionType::Presence,
            QuestionSpec::Count(_) => QuestionType::Count,
            QuestionSpec::Comparison(..) => QuestionType::Comparison,
            QuestionSpec::Scene => QuestionType::Scene,
            QuestionSpec::Spectral(_) => QuestionType::Spectral,
        }
    }

    pub fn text(&self) -> String {
        match self {
            QuestionSpec::Presence(k) => format!("is there a {}", k.name()),
            QuestionSpec::Count(k) => format!("how many {}s are there", k.name()),
            QuestionSpec::Comparison(a, b) => {
                format!("are there more {}s than {}s", a.name(), b.name())
            }
            QuestionSpec::Scene => "is the scene dense or sparse".to_string(),
            QuestionSpec::Spectral(k) => format!("is there a hidden {}", k.name()),
        }
    }

    /// Inverse of [`QuestionSpec::text`].
    pub fn parse(text: &str) -> Option<QuestionSpec> {
        let words: Vec<&str> = text.split_whitespace().collect();
        match words.as_slice() {
            ["is", "there", "a", "hidden", k] => ShapeKind::from_name(k).map(QuestionSpec::Spectral),
            ["is", "there", "a", k] => ShapeKind::from_name(k).map(QuestionSpec::Presence),
            ["how", "many", k, "are", "there"] => ShapeKind::from_plural(k).map(QuestionSpec::Count),
            ["are", "there", "more", a, "than", b] => {
                Some(QuestionSpec::Comparison(ShapeKind::from_plural(a)?, ShapeKind::from_plural(b)?))
            }
            ["is", "the", "scene", "dense", "or", "sparse"] => Some(QuestionSpec::Scene),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn object(kind: ShapeKind, hidden: bool) -> SceneObject {
        SceneObject {
            kind,
            hidden,
            center_y: 5.0,
            center_x: 5.0,
            size: 3.0,
            signature: vec![0.0; 3],
        }
    }

    #[test]
    fn oracle_answers() {
        let g = SceneGraph {
            image_id: "img".into(),
            tile: 0,
            density: Density::Sparse,
            objects: vec![
                object(ShapeKind::Disc, false),
                object(ShapeKind::Disc, false),
                object(ShapeKind::Square, true),
            ],
        };
        assert_eq!(g.answer(&QuestionSpec::Count(ShapeKind::Disc)), "2");
        assert_eq!(g.answer(&QuestionSpec::Presence(ShapeKind::Triangle)), "no");
        assert_eq!(g.answer(&QuestionSpec::Presence(ShapeKind::Square)), "no");
        assert_eq!(g.answer(&QuestionSpec::Spectral(ShapeKind::Square)), "yes");
        assert_eq!(g.answer(&QuestionSpec::Comparison(ShapeKind::Disc, ShapeKind::Square)), "yes");
        assert_eq!(g.answer(&QuestionSpec::Scene), "sparse");
    }

    #[test]
    fn question_text_round_trip() {
        let specs = [
            QuestionSpec::Presence(ShapeKind::Square),
            QuestionSpec::Count(ShapeKind::Disc),
            QuestionSpec::Comparison(ShapeKind::Triangle, ShapeKind::Disc),
            QuestionSpec::Scene,
            QuestionSpec::Spectral(ShapeKind::Triangle),
        ];
        for s in specs {
            assert_eq!(QuestionSpec::parse(&s.text()), Some(s));
        }
        assert_eq!(
            QuestionSpec::Count(ShapeKind::Disc).text(),
            "how many discs are there"
        );
        assert_eq!(QuestionSpec::parse("is there a zeppelin"), None);
    }

    #[test]
    fn shape_membership() {
        for k in ShapeKind::ALL {
            assert!(k.contains(0.0, 0.0, 3.0));
            assert!(!k.contains(3.5, 3.5, 3.0));
        }
        assert!(ShapeKind::Square.contains(2.5, 2.5, 3.0));
        assert!(!ShapeKind::Disc.contains(2.5, 2.5, 3.0));
    }
}
