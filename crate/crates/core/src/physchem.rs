//! The 88-dimensional physicochemical ligand modality: 12 per-residue
//! descriptor sets averaged over the sequence (75 dims) followed by 13
//! global peptide properties.

use std::sync::OnceLock;

use crate::sequence::{residue_index, AaSequence, ALPHABET};

pub const DESCRIPTOR_DIMS: usize = 75;
pub const PROPERTY_DIMS: usize = 13;
pub const FEATURE_DIMS: usize = DESCRIPTOR_DIMS + PROPERTY_DIMS;
pub const DEFAULT_PH: f64 = 7.0;

/// Global property names, in output order.
pub const PROPERTY_NAMES: [&str; PROPERTY_DIMS] = [
    "aliphatic_index",
    "autocorrelation",
    "autocovariance",
    "boman",
    "charge",
    "hydrophobic_moment_alpha",
    "hydrophobic_moment_beta",
    "hydrophobicity",
    "instability_index",
    "isoelectric_point",
    "mass_shift",
    "molecular_weight",
    "mz",
];

const WATER_AVERAGE_ROW: &str = "H2O";
const HELIX_ANGLE: f64 = 100.0;
const SHEET_ANGLE: f64 = 160.0;
const MOMENT_WINDOW: usize = 11;
const PROTON_MASS: f64 = 1.007276;
const CARBAMIDOMETHYL_SHIFT: f64 = 57.021464;
const MZ_CHARGE: f64 = 2.0;
const PI_TOLERANCE: f64 = 1e-6;
const PI_MAX_ITERATIONS: usize = 100;

/// Descriptor-set assets in output order: (name, file contents).
const DESCRIPTOR_ASSETS: [(&str, &str); 12] = [
    (
        "BLOSUM indices",
        include_str!("../data/descriptors/blosum.csv"),
    ),
    ("Cruciani", include_str!("../data/descriptors/cruciani.csv")),
    ("FASGAI", include_str!("../data/descriptors/fasgai.csv")),
    ("Kidera", include_str!("../data/descriptors/kidera.csv")),
    ("MS-WHIM", include_str!("../data/descriptors/ms_whim.csv")),
    ("PCP", include_str!("../data/descriptors/pcp.csv")),
    ("ProtFP", include_str!("../data/descriptors/protfp.csv")),
    ("Sneath", include_str!("../data/descriptors/sneath.csv")),
    (
        "ST-scales",
        include_str!("../data/descriptors/st_scales.csv"),
    ),
    ("T-scales", include_str!("../data/descriptors/t_scales.csv")),
    ("VHSE", include_str!("../data/descriptors/vhse.csv")),
    ("Z-scales", include_str!("../data/descriptors/z_scales.csv")),
];

/// Per-residue descriptor set.
#[derive(Debug, Clone)]
pub struct DescriptorTable {
    pub name: &'static str,
    pub columns: Vec<String>,
    /// One row per residue, in [`ALPHABET`] order.
    pub rows: Vec<Vec<f64>>,
}

impl DescriptorTable {
    pub fn dims(&self) -> usize {
        self.columns.len()
    }

    pub fn row(&self, residue: u8) -> &[f64] {
        &self.rows[residue_index(residue).expect("standard residue")]
    }
}

/// Every lookup table the features need, loaded once from the embedded
/// CSV assets.
#[derive(Debug)]
pub struct Tables {
    pub descriptors: Vec<DescriptorTable>,
    pub eisenberg: [f64; 20],
    pub kyte_doolittle: [f64; 20],
    pub boman: [f64; 20],
    /// Side-chain `(pKa, sign)` for ionizable residues.
    pub side_chain_pka: [Option<(f64, f64)>; 20],
    pub n_term_pka: f64,
    pub c_term_pka: f64,
    pub average_mass: [f64; 20],
    pub monoisotopic_mass: [f64; 20],
    pub water_average: f64,
    pub water_monoisotopic: f64,
    pub mass_shift: [f64; 20],
    /// Dipeptide instability weights, indexed `[first][second]`.
    pub diwv: [[f64; 20]; 20],
}

type Rows = Vec<(String, Vec<f64>)>;

fn parse_asset(name: &str, text: &str) -> (Vec<String>, Rows) {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .unwrap_or_else(|e| panic!("asset {name}: {e}"))
        .iter()
        .skip(1)
        .map(str::to_owned)
        .collect();
    let rows = reader
        .records()
        .map(|rec| {
            let rec = rec.unwrap_or_else(|e| panic!("asset {name}: {e}"));
            let values = rec
                .iter()
                .skip(1)
                .map(|v| {
                    v.parse::<f64>()
                        .unwrap_or_else(|e| panic!("asset {name}: {v:?}: {e}"))
                })
                .collect();
            (rec[0].to_owned(), values)
        })
        .collect();
    (header, rows)
}

/// Column `col` of a per-residue asset as a residue-indexed array.
fn per_residue(name: &str, rows: &Rows, col: usize) -> [f64; 20] {
    let mut out = [f64::NAN; 20];
    for (key, values) in rows {
        if let Some(i) = key
            .bytes()
            .next()
            .and_then(residue_index)
            .filter(|_| key.len() == 1)
        {
            out[i] = values[col];
        }
    }
    assert!(
        out.iter().all(|v| v.is_finite()),
        "asset {name} misses residues"
    );
    out
}

fn load_tables() -> Tables {
    let descriptors = DESCRIPTOR_ASSETS
        .iter()
        .map(|&(name, text)| {
            let (columns, rows) = parse_asset(name, text);
            let keys: Vec<u8> = rows.iter().map(|(k, _)| k.as_bytes()[0]).collect();
            assert_eq!(keys, ALPHABET, "asset {name} rows out of order");
            DescriptorTable {
                name,
                columns,
                rows: rows.into_iter().map(|(_, v)| v).collect(),
            }
        })
        .collect();

    let (_, hyd) = parse_asset("hydrophobicity", include_str!("../data/hydrophobicity.csv"));
    let (_, boman) = parse_asset("boman", include_str!("../data/boman.csv"));
    let (_, masses) = parse_asset("masses", include_str!("../data/residue_masses.csv"));
    let (_, shift) = parse_asset(
        "mass shift",
        include_str!("../data/mass_shift_silac13c.csv"),
    );
    let (_, pka) = parse_asset("pka", include_str!("../data/pka_lehninger.csv"));
    let (_, diwv_rows) = parse_asset("diwv", include_str!("../data/instability_diwv.csv"));

    let mut side_chain_pka = [None; 20];
    let (mut n_term_pka, mut c_term_pka) = (f64::NAN, f64::NAN);
    for (key, v) in &pka {
        match key.as_str() {
            "nTer" => n_term_pka = v[0],
            "cTer" => c_term_pka = v[0],
            k => {
                let i = residue_index(k.as_bytes()[0]).expect("pka residue");
                side_chain_pka[i] = Some((v[0], v[1]));
            }
        }
    }
    let water = masses
        .iter()
        .find(|(k, _)| k == WATER_AVERAGE_ROW)
        .map(|(_, v)| v.clone())
        .expect("water mass row");

    let mut diwv = [[f64::NAN; 20]; 20];
    for (pair, v) in &diwv_rows {
        let b = pair.as_bytes();
        let (i, j) = (residue_index(b[0]).unwrap(), residue_index(b[1]).unwrap());
        diwv[i][j] = v[0];
    }
    assert!(
        diwv.iter().flatten().all(|v| v.is_finite()),
        "incomplete dipeptide table"
    );

    Tables {
        descriptors,
        eisenberg: per_residue("hydrophobicity", &hyd, 0),
        kyte_doolittle: per_residue("hydrophobicity", &hyd, 1),
        boman: per_residue("boman", &boman, 0),
        side_chain_pka,
        n_term_pka,
        c_term_pka,
        average_mass: per_residue("masses", &masses, 0),
        monoisotopic_mass: per_residue("masses", &masses, 1),
        water_average: water[0],
        water_monoisotopic: water[1],
        mass_shift: per_residue("mass shift", &shift, 0),
        diwv,
    }
}

pub fn tables() -> &'static Tables {
    static TABLES: OnceLock<Tables> = OnceLock::new();
    TABLES.get_or_init(load_tables)
}

/// Names of all 88 feature columns, in output order.
pub fn feature_names() -> Vec<String> {
    tables()
        .descriptors
        .iter()
        .flat_map(|t| t.columns.iter().cloned())
        .chain(PROPERTY_NAMES.iter().map(|s| s.to_string()))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LigandFeatures {
    pub descriptor_part: Vec<f64>,
    pub property_part: Vec<f64>,
}

impl LigandFeatures {
    /// `[descriptor_part ‖ property_part]`, 88 values.
    pub fn combined(&self) -> Vec<f64> {
        let mut out = self.descriptor_part.clone();
        out.extend_from_slice(&self.property_part);
        out
    }
}

fn indices(seq: &AaSequence) -> Vec<usize> {
    seq.residues()
        .iter()
        .map(|&c| residue_index(c).expect("validated residue"))
        .collect()
}

/// Mean of the per-residue rows of `table` over the sequence.
pub fn descriptor_summary(seq: &AaSequence, table: &DescriptorTable) -> Vec<f64> {
    let n = seq.raw_length() as f64;
    (0..table.dims())
        .map(|col| {
            let total: f64 = seq.residues().iter().map(|&r| table.row(r)[col]).sum();
            total / n
        })
        .collect()
}

fn mean_of(lut: &[f64; 20], idx: &[usize]) -> f64 {
    idx.iter().map(|&i| lut[i]).sum::<f64>() / idx.len() as f64
}

pub fn aliphatic_index(seq: &AaSequence) -> f64 {
    let n = seq.raw_length() as f64;
    let frac = |c: u8| seq.residues().iter().filter(|&&r| r == c).count() as f64 / n;
    (frac(b'A') + 2.9 * frac(b'V') + 3.9 * (frac(b'L') + frac(b'I'))) * 100.0
}

/// Eisenberg scale standardized by its mean and sample standard deviation.
fn centered_eisenberg() -> [f64; 20] {
    let raw = tables().eisenberg;
    let mu = raw.iter().sum::<f64>() / 20.0;
    let var = raw.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 19.0;
    let sigma = var.sqrt();
    raw.map(|v| (v - mu) / sigma)
}

/// Lag-1 autocorrelation of the standardized hydrophobicity profile.
/// Zero for single-residue sequences.
pub fn autocorrelation(seq: &AaSequence) -> f64 {
    let lut = centered_eisenberg();
    let idx = indices(seq);
    let (mut s1, mut s2) = (0.0, 0.0);
    for w in idx.windows(2) {
        s1 += lut[w[0]] * lut[w[1]];
        s2 += lut[w[0]] * lut[w[0]];
    }
    if idx.len() < 2 {
        log::warn!("autocorrelation undefined for {seq}; using 0");
        return 0.0;
    }
    s1 / s2
}

/// Lag-1 autocovariance of the standardized hydrophobicity profile.
pub fn autocovariance(seq: &AaSequence) -> f64 {
    let lut = centered_eisenberg();
    let idx = indices(seq);
    let s: f64 = idx.windows(2).map(|w| lut[w[0]] * lut[w[1]]).sum();
    s / idx.len() as f64
}

pub fn boman_index(seq: &AaSequence) -> f64 {
    -mean_of(&tables().boman, &indices(seq))
}

/// Net charge from Henderson–Hasselbalch terms over ionizable side
/// chains and both termini.
pub fn charge(seq: &AaSequence, ph: f64) -> f64 {
    let t = tables();
    let mut total = 0.0;
    for i in indices(seq) {
        if let Some((pka, sign)) = t.side_chain_pka[i] {
            total += sign / (1.0 + 10f64.powf(sign * (ph - pka)));
        }
    }
    total += 1.0 / (1.0 + 10f64.powf(ph - t.n_term_pka));
    total += -1.0 / (1.0 + 10f64.powf(t.c_term_pka - ph));
    total
}

/// Maximum windowed hydrophobic moment at the given rotation angle.
pub fn hydrophobic_moment(seq: &AaSequence, angle_deg: f64) -> f64 {
    let lut = tables().eisenberg;
    let idx = indices(seq);
    let window = MOMENT_WINDOW.min(idx.len());
    let (sin, cos): (Vec<f64>, Vec<f64>) = (0..window)
        .map(|i| ((angle_deg * i as f64) % 360.0).to_radians())
        .map(|theta| (theta.sin(), theta.cos()))
        .unzip();
    let mut max_norm: f64 = 0.0;
    for start in 0..=idx.len() - window {
        let (mut ss, mut sc) = (0.0, 0.0);
        for k in 0..window {
            let h = lut[idx[start + k]];
            ss += h * sin[k];
            sc += h * cos[k];
        }
        max_norm = max_norm.max(ss * ss + sc * sc);
    }
    max_norm.sqrt() / window as f64
}

/// Mean Kyte–Doolittle hydropathy.
pub fn hydrophobicity(seq: &AaSequence) -> f64 {
    mean_of(&tables().kyte_doolittle, &indices(seq))
}

pub fn instability_index(seq: &AaSequence) -> f64 {
    let t = tables();
    let idx = indices(seq);
    if idx.len() < 2 {
        log::warn!("instability index undefined for {seq}; using 0");
    }
    let total: f64 = idx.windows(2).map(|w| t.diwv[w[0]][w[1]]).sum();
    total * 10.0 / idx.len() as f64
}

/// pH of zero net charge, by bisection on [0, 14].
pub fn isoelectric_point(seq: &AaSequence) -> f64 {
    let (mut lo, mut hi, mut x) = (0.0, 14.0, 7.0);
    for _ in 0..PI_MAX_ITERATIONS {
        if hi - lo < PI_TOLERANCE {
            break;
        }
        x = (lo + hi) / 2.0;
        let c = charge(seq, x);
        if c >= 0.0 {
            lo = x;
        }
        if c <= 0.0 {
            hi = x;
        }
    }
    x
}

/// Mass difference under heavy-isotope lysine/arginine labelling.
pub fn mass_shift(seq: &AaSequence) -> f64 {
    let t = tables();
    indices(seq).iter().map(|&i| t.mass_shift[i]).sum()
}

/// Average molecular weight: residue masses plus one water.
pub fn molecular_weight(seq: &AaSequence) -> f64 {
    let t = tables();
    indices(seq).iter().map(|&i| t.average_mass[i]).sum::<f64>() + t.water_average
}

/// Monoisotopic m/z of the doubly protonated peptide with alkylated
/// cysteines.
pub fn mz(seq: &AaSequence) -> f64 {
    let t = tables();
    let idx = indices(seq);
    let mut mass = idx.iter().map(|&i| t.monoisotopic_mass[i]).sum::<f64>() + t.water_monoisotopic;
    let cys = seq.residues().iter().filter(|&&r| r == b'C').count() as f64;
    mass += cys * CARBAMIDOMETHYL_SHIFT;
    (mass + MZ_CHARGE * PROTON_MASS) / MZ_CHARGE
}

/// The 13 global properties in output order.
pub fn global_properties(seq: &AaSequence, ph: f64) -> Vec<f64> {
    vec![
        aliphatic_index(seq),
        autocorrelation(seq),
        autocovariance(seq),
        boman_index(seq),
        charge(seq, ph),
        hydrophobic_moment(seq, HELIX_ANGLE),
        hydrophobic_moment(seq, SHEET_ANGLE),
        hydrophobicity(seq),
        instability_index(seq),
        isoelectric_point(seq),
        mass_shift(seq),
        molecular_weight(seq),
        mz(seq),
    ]
}

/// All 88 features of an unshaped sequence at the default pH.
pub fn featurize(seq: &AaSequence) -> LigandFeatures {
    featurize_at(seq, DEFAULT_PH)
}

pub fn featurize_at(seq: &AaSequence, ph: f64) -> LigandFeatures {
    let descriptor_part = tables()
        .descriptors
        .iter()
        .flat_map(|t| descriptor_summary(seq, t))
        .collect();
    LigandFeatures {
        descriptor_part,
        property_part: global_properties(seq, ph),
    }
}
