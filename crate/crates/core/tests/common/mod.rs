//! Fixture builders shared by the integration test targets.
#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use roi_eval::corpus::{parse_annotation, GroundTruthRoI};
use roi_eval::extraction::ExtractedRoI;

pub const CECUM: &str = "[Cecum] - [Focal hypermetabolism] - [Unclear] - [12.3] - \
[Soft tissue density] - [Focal] - [Very intense hypermetabolism] - \
[Colon cancer (cecum), Inflammatory bowel disease (Crohn's disease), Appendicitis/Abscess] - \
[Colonoscopy and biopsy, Abdominal MRI/CT, Blood tests] - [3] - \
[Very intense focal FDG uptake...]";

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

const REGIONS: &[&str] = &[
    "Cecum",
    "Left upper lung lobe",
    "Right lower lung lobe",
    "Liver segment VI",
    "Mediastinal lymph node station 7",
    "Thyroid gland left lobe",
    "Left adrenal gland",
    "Spleen",
    "Pancreatic head",
    "Sigmoid colon",
    "Right cervical lymph node level II",
    "T10 vertebral body",
    "Hạch cổ trái nhóm III",
    "Thùy dưới phổi phải",
];
const LESIONS: &[&str] = &[
    "Nodule",
    "Mass",
    "Focal hypermetabolism",
    "Enlarged lymph node",
    "Wall thickening",
    "Lytic lesion",
    "Khối u",
];
const DENSITIES: &[&str] = &["Soft tissue density", "Ground-glass", "Hypodense", "Mixed density", ""];
const MORPHOLOGIES: &[&str] = &["Round", "Spiculated", "Focal", "Irregular margins", ""];
const UPTAKES: &[&str] = &[
    "Increased FDG uptake",
    "Very intense hypermetabolism",
    "Non-increased uptake",
    "Mild FDG uptake",
    "Tăng chuyển hóa FDG",
];

fn pick<'a>(rng: &mut impl Rng, options: &[&'a str]) -> &'a str {
    options.choose(rng).copied().unwrap_or("")
}

pub fn annotation_line(fields: [&str; 5], physical_region: u8) -> String {
    let [region, lesion, density, morphology, uptake] = fields;
    format!(
        "[{region}] - [{lesion}] - [1.5 cm] - [4.2] - [{density}] - [{morphology}] - [{uptake}] - \
         [Metastasis, Primary tumor] - [Biopsy] - [{physical_region}] - []"
    )
}

pub fn gt_roi(fields: [&str; 5], physical_region: u8) -> GroundTruthRoI {
    parse_annotation(&annotation_line(fields, physical_region)).expect("fixture line parses")
}

pub fn predicted(fields: [&str; 5]) -> ExtractedRoI {
    let [region, lesion, density, morphology, uptake] = fields;
    ExtractedRoI {
        extraction_text: format!("{region} {lesion}"),
        anatomic_region: region.into(),
        lesion_type: lesion.into(),
        density: density.into(),
        morphology: morphology.into(),
        fdg_uptake: uptake.into(),
    }
}

pub fn predicted_from(gt: &GroundTruthRoI) -> ExtractedRoI {
    let f = gt.comparable_fields();
    predicted([f[0], f[1], f[2], f[3], f[4]])
}

fn report_text(fields: &[[String; 5]]) -> String {
    fields
        .iter()
        .map(|[r, l, d, m, u]| {
            let mut s = format!("{l} in the {r}");
            for extra in [d, m, u] {
                if !extra.is_empty() {
                    s.push_str(", ");
                    s.push_str(&extra.to_lowercase());
                }
            }
            s.push('.');
            s
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn roi_json(fields: &[String; 5], physical_region: u8) -> Value {
    json!({
        "anatomic_region": fields[0],
        "lesion_type": fields[1],
        "size": "1.5 cm",
        "suv_max": 4.2,
        "density": fields[2],
        "morphology": fields[3],
        "fdg_uptake": fields[4],
        "top3_diseases": ["Metastasis"],
        "top3_examinations": ["Biopsy"],
        "physical_region": physical_region,
    })
}

fn pred_json(fields: &[String; 5]) -> Value {
    json!({
        "extraction_text": format!("{} in the {}", fields[1], fields[0]),
        "anatomic_region": fields[0],
        "lesion_type": fields[1],
        "density": fields[2],
        "morphology": fields[3],
        "fdg_uptake": fields[4],
    })
}

/// Ground-truth and prediction corpora as JSON text.
pub struct CorpusFixture {
    pub gt_json: String,
    pub pred_json: String,
}

/// Identical ground truth and predictions.
pub fn identity_corpus(reports: usize, seed: u64) -> CorpusFixture {
    let mut rng = rng(seed);
    let mut gt = Vec::new();
    let mut pred = Vec::new();
    for r in 0..reports {
        let physical_region = (r % 3 + 1) as u8;
        let count = rng.gen_range(1..=4);
        let fields: Vec<[String; 5]> = (0..count)
            .map(|_| {
                [REGIONS, LESIONS, DENSITIES, MORPHOLOGIES, UPTAKES]
                    .map(|options| pick(&mut rng, options).to_owned())
            })
            .collect();
        let text = report_text(&fields);
        let id = format!("R{r:03}");
        gt.push(json!({
            "report_id": id,
            "physical_region": physical_region,
            "report_text": text,
            "rois": fields.iter().map(|f| roi_json(f, physical_region)).collect::<Vec<_>>(),
        }));
        pred.push(json!({
            "report_id": id,
            "report_text": text,
            "rois": fields.iter().map(pred_json).collect::<Vec<_>>(),
        }));
    }
    CorpusFixture {
        gt_json: serde_json::to_string_pretty(&gt).unwrap(),
        pred_json: serde_json::to_string_pretty(&pred).unwrap(),
    }
}

fn typo(rng: &mut impl Rng, s: &str) -> String {
    let mut chars: Vec<char> = s.chars().collect();
    if chars.len() > 3 {
        let i = rng.gen_range(0..chars.len());
        chars[i] = *['x', 'q', 'z', 'k'].choose(rng).unwrap();
    }
    chars.into_iter().collect()
}

/// Noisy predictions: RoIs are dropped, mutated or invented so that pair
/// scores spread across the threshold grid.
pub fn noisy_corpus(reports: usize, seed: u64) -> CorpusFixture {
    let mut rng = rng(seed);
    let mut gt = Vec::new();
    let mut pred = Vec::new();
    for r in 0..reports {
        let physical_region = (r % 3 + 1) as u8;
        let count = rng.gen_range(1..=5);
        let gt_fields: Vec<[String; 5]> = (0..count)
            .map(|_| {
                [REGIONS, LESIONS, DENSITIES, MORPHOLOGIES, UPTAKES]
                    .map(|options| pick(&mut rng, options).to_owned())
            })
            .collect();
        let mut pred_fields = Vec::new();
        for f in &gt_fields {
            if rng.gen_bool(0.15) {
                continue;
            }
            let mut p = f.clone();
            for (k, value) in p.iter_mut().enumerate() {
                match rng.gen_range(0..10) {
                    0..=4 => {}
                    5 | 6 => *value = typo(&mut rng, value),
                    7 => *value = String::new(),
                    _ => {
                        let options = [REGIONS, LESIONS, DENSITIES, MORPHOLOGIES, UPTAKES][k];
                        *value = pick(&mut rng, options).to_owned();
                    }
                }
            }
            pred_fields.push(p);
        }
        if rng.gen_bool(0.3) {
            pred_fields.push(
                [REGIONS, LESIONS, DENSITIES, MORPHOLOGIES, UPTAKES]
                    .map(|options| pick(&mut rng, options).to_owned()),
            );
        }
        pred_fields.shuffle(&mut rng);
        let id = format!("N{r:03}");
        gt.push(json!({
            "report_id": id,
            "physical_region": physical_region,
            "report_text": report_text(&gt_fields),
            "rois": gt_fields.iter().map(|f| roi_json(f, physical_region)).collect::<Vec<_>>(),
        }));
        pred.push(json!({
            "report_id": id,
            "report_text": report_text(&pred_fields),
            "rois": pred_fields.iter().map(pred_json).collect::<Vec<_>>(),
        }));
    }
    CorpusFixture {
        gt_json: serde_json::to_string_pretty(&gt).unwrap(),
        pred_json: serde_json::to_string_pretty(&pred).unwrap(),
    }
}

/// Exhaustive maximum over all one-to-one assignments.
pub fn brute_force_max(rows: &[Vec<f64>]) -> f64 {
    let p = rows.len();
    let g = rows.first().map_or(0, Vec::len);
    let n = p.max(g);
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = 0.0f64;
    permute(&mut perm, 0, &mut |perm| {
        let total: f64 = (0..p)
            .filter(|&i| perm[i] < g)
            .map(|i| rows[i][perm[i]])
            .sum();
        best = best.max(total);
    });
    best
}

fn permute(perm: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == perm.len() {
        visit(perm);
        return;
    }
    for i in k..perm.len() {
        perm.swap(k, i);
        permute(perm, k + 1, visit);
        perm.swap(k, i);
    }
}

pub fn random_matrix(rng: &mut impl Rng, max_dim: usize) -> Vec<Vec<f64>> {
    let p = rng.gen_range(1..=max_dim);
    let g = rng.gen_range(1..=max_dim);
    (0..p).map(|_| (0..g).map(|_| rng.gen::<f64>()).collect()).collect()
}
