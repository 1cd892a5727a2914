//! Sequence-derived biophysical concepts.
//!
//! All calculators drop non-canonical residues (anything outside the 20
//! standard amino acids) before computing, and read their constants from the
//! TSV tables bundled under `data/`.

use std::collections::HashMap;
use std::io::BufRead;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqio::{amino_index, AMINO_ACIDS};

pub const WATER_MASS: f64 = 18.0153;
pub const BUILTIN_COUNT: usize = 14;

/// Residue sets used by the secondary-structure fractions.
pub const HELIX_RESIDUES: &str = "VIYFWL";
pub const TURN_RESIDUES: &str = "NPGS";
pub const SHEET_RESIDUES: &str = "EMAL";
pub const AROMATIC_RESIDUES: &str = "FWY";

/// Parsed constant tables.
#[derive(Debug, Clone)]
pub struct Tables {
    pub kyte_doolittle: [f64; 20],
    pub hopp_woods: [f64; 20],
    pub emini: [f64; 20],
    pub residue_mass: [f64; 20],
    pub diwv: [[f64; 20]; 20],
    pub pka: PkaTable,
    pub extinction_w: f64,
    pub extinction_y: f64,
    pub extinction_cystine: f64,
}

#[derive(Debug, Clone)]
pub struct PkaTable {
    pub n_term: f64,
    pub c_term: f64,
    /// (residue index, pKa) for positively charged side chains.
    pub positive: Vec<(usize, f64)>,
    /// (residue index, pKa) for negatively charged side chains.
    pub negative: Vec<(usize, f64)>,
}

fn data_rows(text: &str) -> impl Iterator<Item = Vec<&str>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| l.split('\t').collect())
}

fn parse_value(s: &str) -> Result<f64> {
    s.trim().parse().map_err(|_| Error::Config(format!("bad table value `{s}`")))
}

fn residue(s: &str) -> Result<usize> {
    let mut chars = s.chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) => amino_index(c).ok_or_else(|| Error::Config(format!("unknown residue `{s}`"))),
        _ => Err(Error::Config(format!("unknown residue `{s}`"))),
    }
}

/// Parses a `residue<TAB>value` table covering all 20 residues.
pub fn parse_scale(text: &str) -> Result<[f64; 20]> {
    let mut out = [f64::NAN; 20];
    for row in data_rows(text) {
        if row.len() != 2 {
            return Err(Error::Config(format!("expected 2 columns, got {row:?}")));
        }
        out[residue(row[0])?] = parse_value(row[1])?;
    }
    if let Some(i) = out.iter().position(|v| v.is_nan()) {
        return Err(Error::Config(format!("scale is missing residue {}", AMINO_ACIDS[i])));
    }
    Ok(out)
}

fn parse_diwv(text: &str) -> Result<[[f64; 20]; 20]> {
    let mut out = [[f64::NAN; 20]; 20];
    for row in data_rows(text) {
        if row.len() != 3 {
            return Err(Error::Config(format!("expected 3 columns, got {row:?}")));
        }
        out[residue(row[0])?][residue(row[1])?] = parse_value(row[2])?;
    }
    if out.iter().flatten().any(|v| v.is_nan()) {
        return Err(Error::Config("dipeptide table is incomplete".into()));
    }
    Ok(out)
}

fn parse_pka(text: &str) -> Result<PkaTable> {
    let mut t = PkaTable { n_term: f64::NAN, c_term: f64::NAN, positive: vec![], negative: vec![] };
    for row in data_rows(text) {
        if row.len() != 3 {
            return Err(Error::Config(format!("expected 3 columns, got {row:?}")));
        }
        let v = parse_value(row[1])?;
        match (row[0], row[2]) {
            ("Nterm", _) => t.n_term = v,
            ("Cterm", _) => t.c_term = v,
            (r, "+") => t.positive.push((residue(r)?, v)),
            (r, "-") => t.negative.push((residue(r)?, v)),
            (_, s) => return Err(Error::Config(format!("bad charge sign `{s}`"))),
        }
    }
    if t.n_term.is_nan() || t.c_term.is_nan() {
        return Err(Error::Config("pKa table needs Nterm and Cterm".into()));
    }
    Ok(t)
}

impl Tables {
    pub fn bundled() -> &'static Tables {
        static TABLES: OnceLock<Tables> = OnceLock::new();
        TABLES.get_or_init(|| Tables::load().expect("bundled concept tables are valid"))
    }

    fn load() -> Result<Tables> {
        let ext: HashMap<String, f64> = data_rows(include_str!("../data/extinction.tsv"))
            .map(|r| Ok((r[0].to_string(), parse_value(r[1])?)))
            .collect::<Result<_>>()?;
        let get = |k: &str| ext.get(k).copied().ok_or_else(|| Error::Config(format!("extinction table lacks {k}")));
        Ok(Tables {
            kyte_doolittle: parse_scale(include_str!("../data/kyte_doolittle.tsv"))?,
            hopp_woods: parse_scale(include_str!("../data/hopp_woods.tsv"))?,
            emini: parse_scale(include_str!("../data/emini.tsv"))?,
            residue_mass: parse_scale(include_str!("../data/residue_mass.tsv"))?,
            diwv: parse_diwv(include_str!("../data/diwv.tsv"))?,
            pka: parse_pka(include_str!("../data/pka.tsv"))?,
            extinction_w: get("W")?,
            extinction_y: get("Y")?,
            extinction_cystine: get("cystine")?,
        })
    }
}

/// Canonical residue indices of `seq`, dropping everything else.
pub fn canonical_residues(seq: &str) -> Result<Vec<usize>> {
    let out: Vec<usize> = seq.chars().filter_map(|c| amino_index(c.to_ascii_uppercase())).collect();
    if out.is_empty() {
        return Err(Error::EmptyAfterFilter);
    }
    Ok(out)
}

fn counts(res: &[usize]) -> [usize; 20] {
    let mut c = [0usize; 20];
    for &r in res {
        c[r] += 1;
    }
    c
}

fn set_fraction(res: &[usize], set: &str) -> f64 {
    let c = counts(res);
    let hits: usize = set.chars().map(|a| c[amino_index(a).unwrap()]).sum();
    hits as f64 / res.len() as f64
}

fn mean_scale(res: &[usize], scale: &[f64; 20]) -> f64 {
    res.iter().map(|&r| scale[r]).sum::<f64>() / res.len() as f64
}

/// Mean Kyte–Doolittle hydropathy.
pub fn gravy(seq: &str) -> Result<f64> {
    Ok(mean_scale(&canonical_residues(seq)?, &Tables::bundled().kyte_doolittle))
}

/// Fraction of F, W and Y.
pub fn aromaticity(seq: &str) -> Result<f64> {
    Ok(set_fraction(&canonical_residues(seq)?, AROMATIC_RESIDUES))
}

fn charge_of(res: &[usize], ph: f64, t: &Tables) -> f64 {
    let c = counts(res);
    let pos = |pka: f64| 1.0 / (1.0 + 10f64.powf(ph - pka));
    let neg = |pka: f64| 1.0 / (1.0 + 10f64.powf(pka - ph));
    let mut charge = pos(t.pka.n_term) - neg(t.pka.c_term);
    for &(r, pka) in &t.pka.positive {
        charge += c[r] as f64 * pos(pka);
    }
    for &(r, pka) in &t.pka.negative {
        charge -= c[r] as f64 * neg(pka);
    }
    charge
}

/// Henderson–Hasselbalch net charge at `ph`, including one N- and one C-terminus.
pub fn charge_at_ph(seq: &str, ph: f64) -> Result<f64> {
    Ok(charge_of(&canonical_residues(seq)?, ph, Tables::bundled()))
}

fn pi_of(res: &[usize], t: &Tables) -> f64 {
    let (mut lo, mut hi) = (0.0f64, 14.0f64);
    let mut mid = 7.0;
    for _ in 0..100 {
        mid = 0.5 * (lo + hi);
        let q = charge_of(res, mid, t);
        if q.abs() < 1e-3 {
            break;
        }
        if q > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    mid
}

/// pH of zero net charge, by bisection on [0, 14].
pub fn isoelectric_point(seq: &str) -> Result<f64> {
    Ok(pi_of(&canonical_residues(seq)?, Tables::bundled()))
}

/// Average mass in daltons: residue masses plus one water.
pub fn molecular_weight(seq: &str) -> Result<f64> {
    let t = Tables::bundled();
    Ok(canonical_residues(seq)?.iter().map(|&r| t.residue_mass[r]).sum::<f64>() + WATER_MASS)
}

fn instability_of(res: &[usize], t: &Tables) -> f64 {
    let score: f64 = res.windows(2).map(|w| t.diwv[w[0]][w[1]]).sum();
    10.0 / res.len() as f64 * score
}

/// Guruprasad instability index over ordered dipeptides.
pub fn instability_index(seq: &str) -> Result<f64> {
    Ok(instability_of(&canonical_residues(seq)?, Tables::bundled()))
}

/// (helix, turn, sheet) residue fractions. L counts towards both helix and sheet.
pub fn secondary_structure_fractions(seq: &str) -> Result<(f64, f64, f64)> {
    let res = canonical_residues(seq)?;
    Ok((set_fraction(&res, HELIX_RESIDUES), set_fraction(&res, TURN_RESIDUES), set_fraction(&res, SHEET_RESIDUES)))
}

fn extinction_of(res: &[usize], t: &Tables) -> (f64, f64) {
    let c = counts(res);
    let idx = |a: char| amino_index(a).unwrap();
    let reduced = t.extinction_w * c[idx('W')] as f64 + t.extinction_y * c[idx('Y')] as f64;
    (reduced, reduced + t.extinction_cystine * (c[idx('C')] / 2) as f64)
}

/// (reduced, oxidized) molar extinction coefficient at 280 nm.
pub fn molar_extinction(seq: &str) -> Result<(f64, f64)> {
    Ok(extinction_of(&canonical_residues(seq)?, Tables::bundled()))
}

/// Unwindowed mean of a residue scale.
pub fn scale_average(seq: &str, scale: &[f64; 20]) -> Result<f64> {
    Ok(mean_scale(&canonical_residues(seq)?, scale))
}

/// The 14 built-in sequence concepts, in registry order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuiltinConcept {
    MolecularWeight,
    Aromaticity,
    InstabilityIndex,
    IsoelectricPoint,
    Gravy,
    HelixFraction,
    TurnFraction,
    SheetFraction,
    MolarExtinctionReduced,
    MolarExtinctionOxidized,
    ChargePh6,
    ChargePh7,
    Hydrophilicity,
    SurfaceAccessibility,
}

impl BuiltinConcept {
    pub const ALL: [BuiltinConcept; BUILTIN_COUNT] = [
        BuiltinConcept::MolecularWeight,
        BuiltinConcept::Aromaticity,
        BuiltinConcept::InstabilityIndex,
        BuiltinConcept::IsoelectricPoint,
        BuiltinConcept::Gravy,
        BuiltinConcept::HelixFraction,
        BuiltinConcept::TurnFraction,
        BuiltinConcept::SheetFraction,
        BuiltinConcept::MolarExtinctionReduced,
        BuiltinConcept::MolarExtinctionOxidized,
        BuiltinConcept::ChargePh6,
        BuiltinConcept::ChargePh7,
        BuiltinConcept::Hydrophilicity,
        BuiltinConcept::SurfaceAccessibility,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BuiltinConcept::MolecularWeight => "molecular_weight",
            BuiltinConcept::Aromaticity => "aromaticity",
            BuiltinConcept::InstabilityIndex => "instability_index",
            BuiltinConcept::IsoelectricPoint => "isoelectric_point",
            BuiltinConcept::Gravy => "gravy",
            BuiltinConcept::HelixFraction => "helix_fraction",
            BuiltinConcept::TurnFraction => "turn_fraction",
            BuiltinConcept::SheetFraction => "sheet_fraction",
            BuiltinConcept::MolarExtinctionReduced => "molar_extinction_reduced",
            BuiltinConcept::MolarExtinctionOxidized => "molar_extinction_oxidized",
            BuiltinConcept::ChargePh6 => "charge_ph6",
            BuiltinConcept::ChargePh7 => "charge_ph7",
            BuiltinConcept::Hydrophilicity => "hydrophilicity",
            BuiltinConcept::SurfaceAccessibility => "surface_accessibility",
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).unwrap()
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|c| c.name() == name)
    }
}

/// All 14 built-in values from already-filtered residues.
pub fn builtin_values(res: &[usize]) -> [f64; BUILTIN_COUNT] {
    let t = Tables::bundled();
    let (reduced, oxidized) = extinction_of(res, t);
    [
        res.iter().map(|&r| t.residue_mass[r]).sum::<f64>() + WATER_MASS,
        set_fraction(res, AROMATIC_RESIDUES),
        instability_of(res, t),
        pi_of(res, t),
        mean_scale(res, &t.kyte_doolittle),
        set_fraction(res, HELIX_RESIDUES),
        set_fraction(res, TURN_RESIDUES),
        set_fraction(res, SHEET_RESIDUES),
        reduced,
        oxidized,
        charge_of(res, 6.0, t),
        charge_of(res, 7.0, t),
        mean_scale(res, &t.hopp_woods),
        mean_scale(res, &t.emini),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptKind {
    Real,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptSource {
    Builtin(BuiltinConcept),
    /// Supplied externally, keyed by this annotation column.
    External(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptEntry {
    pub name: String,
    pub kind: ConceptKind,
    pub source: ConceptSource,
}

/// Ordered concept list; the 14 built-ins always come first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptRegistry {
    entries: Vec<ConceptEntry>,
}

impl Default for ConceptRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl ConceptRegistry {
    pub fn builtin() -> Self {
        let entries = BuiltinConcept::ALL
            .iter()
            .map(|&c| ConceptEntry { name: c.name().to_string(), kind: ConceptKind::Real, source: ConceptSource::Builtin(c) })
            .collect();
        ConceptRegistry { entries }
    }

    /// Appends an externally annotated categorical (0/1) concept.
    pub fn with_categorical(mut self, name: &str) -> Result<Self> {
        if self.index_of(name).is_some() {
            return Err(Error::Config(format!("duplicate concept `{name}`")));
        }
        self.entries.push(ConceptEntry {
            name: name.to_string(),
            kind: ConceptKind::Categorical,
            source: ConceptSource::External(name.to_string()),
        });
        Ok(self)
    }

    /// Checks names are unique and the built-ins lead in canonical order.
    pub fn validate(&self) -> Result<()> {
        for (i, c) in BuiltinConcept::ALL.iter().enumerate() {
            match self.entries.get(i) {
                Some(e) if e.source == ConceptSource::Builtin(*c) => {}
                _ => return Err(Error::Config(format!("registry must start with built-in `{}`", c.name()))),
            }
        }
        let mut seen = std::collections::HashSet::new();
        for e in &self.entries {
            if !seen.insert(&e.name) {
                return Err(Error::Config(format!("duplicate concept `{}`", e.name)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ConceptEntry] {
        &self.entries
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.name.clone()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn kind(&self, i: usize) -> Option<ConceptKind> {
        self.entries.get(i).map(|e| e.kind)
    }
}

/// Concept values with an observed mask. Unobserved entries hold 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptVector {
    pub values: Vec<f64>,
    pub observed: Vec<bool>,
    pub normalized: bool,
}

impl ConceptVector {
    pub fn fully_observed(values: Vec<f64>, normalized: bool) -> Self {
        let observed = vec![true; values.len()];
        ConceptVector { values, observed, normalized }
    }

    pub fn unobserved(k: usize) -> Self {
        ConceptVector { values: vec![0.0; k], observed: vec![false; k], normalized: true }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Raw (unnormalized) concept vector. Categorical entries are unobserved.
pub fn compute_all(seq: &str, registry: &ConceptRegistry) -> Result<ConceptVector> {
    compute_all_annotated(seq, registry, None)
}

/// Like [`compute_all`], filling external entries from `annotation` when present.
pub fn compute_all_annotated(
    seq: &str,
    registry: &ConceptRegistry,
    annotation: Option<&HashMap<String, f64>>,
) -> Result<ConceptVector> {
    let res = canonical_residues(seq)?;
    let builtin = builtin_values(&res);
    let mut values = Vec::with_capacity(registry.len());
    let mut observed = Vec::with_capacity(registry.len());
    for e in registry.entries() {
        match &e.source {
            ConceptSource::Builtin(c) => {
                values.push(builtin[c.index()]);
                observed.push(true);
            }
            ConceptSource::External(tag) => match annotation.and_then(|a| a.get(tag)) {
                Some(&v) => {
                    values.push(v);
                    observed.push(true);
                }
                None => {
                    values.push(0.0);
                    observed.push(false);
                }
            },
        }
    }
    Ok(ConceptVector { values, observed, normalized: false })
}

/// Reads concept annotations: a header row `header<TAB>name...` followed by one
/// row per FASTA header. Empty cells are missing.
pub fn parse_annotations<R: BufRead>(reader: R) -> Result<HashMap<String, HashMap<String, f64>>> {
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(h) => h?,
        None => return Ok(HashMap::new()),
    };
    let columns: Vec<String> = header.trim_end_matches('\r').split('\t').skip(1).map(str::to_string).collect();
    let mut out = HashMap::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let mut cells = line.split('\t');
        let key = cells.next().unwrap_or_default().to_string();
        let mut row = HashMap::new();
        for (col, cell) in columns.iter().zip(cells) {
            if cell.trim().is_empty() {
                continue;
            }
            let v = cell
                .trim()
                .parse()
                .map_err(|_| Error::Format { line: n + 2, message: format!("bad annotation value `{cell}`") })?;
            row.insert(col.clone(), v);
        }
        out.insert(key, row);
    }
    Ok(out)
}

/// Per-concept (min, max) over a reference corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub names: Vec<String>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormalizeMode {
    /// Degenerate concepts are an error.
    #[default]
    Strict,
    /// Degenerate concepts map to 0.
    Clip,
}

impl NormalizationStats {
    pub fn k(&self) -> usize {
        self.min.len()
    }

    pub fn is_degenerate(&self, i: usize) -> bool {
        !(self.max[i] > self.min[i])
    }

    pub fn degenerate(&self) -> Vec<usize> {
        (0..self.k()).filter(|&i| self.is_degenerate(i)).collect()
    }

    /// Stretches concept `i`'s range by `factor`, so normalized values shrink
    /// by the same factor. Used to reproduce a mis-normalized concept.
    pub fn with_scaled_range(mut self, i: usize, factor: f64) -> Self {
        self.max[i] = self.min[i] + (self.max[i] - self.min[i]) * factor;
        self
    }
}

/// Fits min/max over observed entries. Categorical concepts keep [0, 1].
pub fn fit_normalization(registry: &ConceptRegistry, corpus: &[ConceptVector]) -> NormalizationStats {
    let k = registry.len();
    let mut min = vec![f64::INFINITY; k];
    let mut max = vec![f64::NEG_INFINITY; k];
    for cv in corpus {
        for i in 0..k {
            if cv.observed[i] {
                min[i] = min[i].min(cv.values[i]);
                max[i] = max[i].max(cv.values[i]);
            }
        }
    }
    for i in 0..k {
        if registry.kind(i) == Some(ConceptKind::Categorical) {
            min[i] = 0.0;
            max[i] = 1.0;
        } else if !min[i].is_finite() {
            min[i] = 0.0;
            max[i] = 0.0;
        }
    }
    let stats = NormalizationStats { names: registry.names(), min, max };
    for i in stats.degenerate() {
        log::warn!("concept `{}` is degenerate over the reference corpus", stats.names[i]);
    }
    stats
}

/// Affine map to [0, 1]; out-of-range values are clipped.
pub fn normalize(cv: &ConceptVector, stats: &NormalizationStats, mode: NormalizeMode) -> Result<ConceptVector> {
    if cv.normalized {
        return Ok(cv.clone());
    }
    let mut values = Vec::with_capacity(cv.len());
    for i in 0..cv.len() {
        if !cv.observed[i] {
            values.push(0.0);
            continue;
        }
        if stats.is_degenerate(i) {
            match mode {
                NormalizeMode::Strict => return Err(Error::DegenerateConcept(stats.names[i].clone())),
                NormalizeMode::Clip => {
                    values.push(0.0);
                    continue;
                }
            }
        }
        let v = (cv.values[i] - stats.min[i]) / (stats.max[i] - stats.min[i]);
        if !(0.0..=1.0).contains(&v) {
            log::debug!("concept `{}` value {} outside the fitted range; clipped", stats.names[i], cv.values[i]);
        }
        values.push(v.clamp(0.0, 1.0));
    }
    Ok(ConceptVector { values, observed: cv.observed.clone(), normalized: true })
}

/// Inverse of [`normalize`] on [0, 1].
pub fn denormalize(cv: &ConceptVector, stats: &NormalizationStats) -> ConceptVector {
    if !cv.normalized {
        return cv.clone();
    }
    let values = (0..cv.len())
        .map(|i| if cv.observed[i] { stats.min[i] + cv.values[i] * (stats.max[i] - stats.min[i]) } else { 0.0 })
        .collect();
    ConceptVector { values, observed: cv.observed.clone(), normalized: false }
}

/// Normalizes a single raw value of concept `i` (clipping, degenerate -> 0).
pub fn normalize_value(stats: &NormalizationStats, i: usize, v: f64) -> f64 {
    if stats.is_degenerate(i) {
        return 0.0;
    }
    ((v - stats.min[i]) / (stats.max[i] - stats.min[i])).clamp(0.0, 1.0)
}

/// Pearson correlation matrix over the rows of `data` (n × k).
pub fn pearson_matrix(data: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let k = data.first().map_or(0, Vec::len);
    let n = data.len() as f64;
    let mean: Vec<f64> = (0..k).map(|j| data.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let mut cov = vec![vec![0.0; k]; k];
    for row in data {
        for a in 0..k {
            let da = row[a] - mean[a];
            for b in a..k {
                cov[a][b] += da * (row[b] - mean[b]);
            }
        }
    }
    let mut out = vec![vec![0.0; k]; k];
    for a in 0..k {
        for b in a..k {
            let denom = (cov[a][a] * cov[b][b]).sqrt();
            let r = if a == b { 1.0 } else if denom > 0.0 { cov[a][b] / denom } else { 0.0 };
            out[a][b] = r;
            out[b][a] = r;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn gravy_examples() {
        assert_abs_diff_eq!(gravy("AAAA").unwrap(), 1.8, epsilon = 1e-12);
        assert_abs_diff_eq!(gravy("RK").unwrap(), -4.2, epsilon = 1e-12);
        assert!(matches!(gravy("XXBZ"), Err(Error::EmptyAfterFilter)));
        // non-canonical residues are ignored
        assert_abs_diff_eq!(gravy("AXA").unwrap(), 1.8, epsilon = 1e-12);
    }

    #[test]
    fn aromaticity_examples() {
        assert_eq!(aromaticity("FWY").unwrap(), 1.0);
        assert_eq!(aromaticity("AAAA").unwrap(), 0.0);
        assert_eq!(aromaticity("AF").unwrap(), 0.5);
    }

    #[test]
    fn charge_midpoint_and_sign() {
        let t = Tables::bundled();
        // a lone "G" has only the termini; at pH = Nterm pKa the N-terminus is exactly 1/2
        let ph = t.pka.n_term;
        let cterm = 1.0 / (1.0 + 10f64.powf(t.pka.c_term - ph));
        assert_abs_diff_eq!(charge_at_ph("G", ph).unwrap(), 0.5 - cterm, epsilon = 1e-12);
        assert!(charge_at_ph("DDDD", 7.0).unwrap() < 0.0);
        assert!(charge_at_ph("KKKK", 7.0).unwrap() > 0.0);
    }

    #[test]
    fn isoelectric_examples() {
        for s in ["KKKK", "DDDD", "ACDEFGHIKLMNPQRSTVWY", "G"] {
            let pi = isoelectric_point(s).unwrap();
            assert!((0.0..=14.0).contains(&pi));
            assert!(charge_at_ph(s, pi).unwrap().abs() < 1e-3, "{s}");
        }
        assert!(isoelectric_point("KKKK").unwrap() > isoelectric_point("DDDD").unwrap());
    }

    #[test]
    fn molecular_weight_examples() {
        assert_abs_diff_eq!(molecular_weight("G").unwrap(), 75.0672, epsilon = 1e-9);
        let (s, t) = ("ACDK", "WWY");
        let joined = molecular_weight(&format!("{s}{t}")).unwrap();
        assert_abs_diff_eq!(joined, molecular_weight(s).unwrap() + molecular_weight(t).unwrap() - WATER_MASS, epsilon = 1e-9);
    }

    #[test]
    fn instability_examples() {
        let t = Tables::bundled();
        assert_eq!(instability_index("W").unwrap(), 0.0);
        let g = amino_index('G').unwrap();
        assert_abs_diff_eq!(instability_index("GG").unwrap(), 5.0 * t.diwv[g][g], epsilon = 1e-12);
        let (w, p) = (amino_index('W').unwrap(), amino_index('P').unwrap());
        assert_ne!(t.diwv[w][p], t.diwv[p][w]);
        assert_ne!(instability_index("WP").unwrap(), instability_index("PW").unwrap());
    }

    #[test]
    fn secondary_structure_examples() {
        assert_eq!(secondary_structure_fractions("VNEA").unwrap(), (0.25, 0.25, 0.5));
        assert_eq!(secondary_structure_fractions("KKKK").unwrap(), (0.0, 0.0, 0.0));
        // L sits in both the helix and sheet sets
        assert_eq!(secondary_structure_fractions("LL").unwrap(), (1.0, 0.0, 1.0));
    }

    #[test]
    fn extinction_examples() {
        assert_eq!(molar_extinction("A").unwrap(), (0.0, 0.0));
        assert_eq!(molar_extinction("W").unwrap(), (5500.0, 5500.0));
        assert_eq!(molar_extinction("CC").unwrap(), (0.0, 125.0));
        assert_eq!(molar_extinction("CCC").unwrap(), (0.0, 125.0));
    }

    #[test]
    fn scale_average_examples() {
        let constant = [2.5; 20];
        assert_eq!(scale_average("ACDWY", &constant).unwrap(), 2.5);
        let t = Tables::bundled();
        assert_eq!(scale_average("R", &t.hopp_woods).unwrap(), 3.0);
        assert_eq!(scale_average("C", &t.emini).unwrap(), 0.394);
    }

    #[test]
    fn compute_all_composes_calculators() {
        let reg = ConceptRegistry::builtin().with_categorical("membrane").unwrap();
        let s = "MKTAYIAKQRQISFVKSHFSRQ";
        let cv = compute_all(s, &reg).unwrap();
        assert_eq!(cv.len(), 15);
        assert!(!cv.observed[14]);
        assert!(cv.observed[..14].iter().all(|&o| o));
        let idx = |c: BuiltinConcept| c.index();
        assert_eq!(cv.values[idx(BuiltinConcept::Gravy)], gravy(s).unwrap());
        assert_eq!(cv.values[idx(BuiltinConcept::IsoelectricPoint)], isoelectric_point(s).unwrap());
        assert_eq!(cv.values[idx(BuiltinConcept::ChargePh6)], charge_at_ph(s, 6.0).unwrap());
        assert_eq!(cv.values[idx(BuiltinConcept::MolarExtinctionOxidized)], molar_extinction(s).unwrap().1);
        assert_eq!(compute_all(s, &reg).unwrap(), cv);

        let mut ann = HashMap::new();
        ann.insert("membrane".to_string(), 1.0);
        let cv = compute_all_annotated(s, &reg, Some(&ann)).unwrap();
        assert!(cv.observed[14]);
        assert_eq!(cv.values[14], 1.0);
    }

    #[test]
    fn registry_validation() {
        let reg = ConceptRegistry::builtin();
        reg.validate().unwrap();
        assert!(reg.clone().with_categorical("gravy").is_err());
        assert_eq!(reg.index_of("charge_ph7"), Some(11));
    }

    #[test]
    fn annotations_parse() {
        let text = "header\tmembrane\tkinase\nseq1\t1\t\nseq2\t0\t1\n";
        let ann = parse_annotations(text.as_bytes()).unwrap();
        assert_eq!(ann["seq1"].get("membrane"), Some(&1.0));
        assert_eq!(ann["seq1"].get("kinase"), None);
        assert_eq!(ann["seq2"]["kinase"], 1.0);
    }

    #[test]
    fn normalization_examples() {
        let reg = ConceptRegistry::builtin();
        let same: Vec<ConceptVector> = (0..5).map(|_| compute_all("ACDK", &reg).unwrap()).collect();
        let stats = fit_normalization(&reg, &same);
        assert_eq!(stats.degenerate().len(), 14);
        assert!(matches!(normalize(&same[0], &stats, NormalizeMode::Strict), Err(Error::DegenerateConcept(_))));
        assert!(normalize(&same[0], &stats, NormalizeMode::Clip).unwrap().values.iter().all(|&v| v == 0.0));

        let seqs = ["ACDK", "WWWYF", "KKRRH", "GGPSN", "LLIVMA"];
        let mut corpus: Vec<ConceptVector> = seqs.iter().map(|s| compute_all(s, &reg).unwrap()).collect();
        let stats = fit_normalization(&reg, &corpus);
        for i in 0..14 {
            let lo = corpus.iter().position(|c| c.values[i] == stats.min[i]).unwrap();
            let hi = corpus.iter().position(|c| c.values[i] == stats.max[i]).unwrap();
            if stats.is_degenerate(i) {
                continue;
            }
            assert_eq!(normalize(&corpus[lo], &stats, NormalizeMode::Strict).unwrap().values[i], 0.0);
            assert_eq!(normalize(&corpus[hi], &stats, NormalizeMode::Strict).unwrap().values[i], 1.0);
        }
        corpus.reverse();
        assert_eq!(fit_normalization(&reg, &corpus), stats);

        // out-of-range values clip
        let big = compute_all("WWWWWWWWWWWWWWWWW", &reg).unwrap();
        let n = normalize(&big, &stats, NormalizeMode::Clip).unwrap();
        assert!(n.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn scaled_range_shrinks_values() {
        let reg = ConceptRegistry::builtin();
        let corpus: Vec<ConceptVector> = ["AFKHNCY", "AAAAPDGM", "FFFWESLRIQ", "VVTTKKCCGW"].iter().map(|s| compute_all(s, &reg).unwrap()).collect();
        let a = BuiltinConcept::Aromaticity.index();
        let stats = fit_normalization(&reg, &corpus);
        let bad = stats.clone().with_scaled_range(a, 1e6);
        let good_v = normalize(&corpus[0], &stats, NormalizeMode::Strict).unwrap().values[a];
        let bad_v = normalize(&corpus[0], &bad, NormalizeMode::Strict).unwrap().values[a];
        assert_abs_diff_eq!(bad_v, good_v / 1e6, epsilon = 1e-15);
    }

    #[test]
    fn pearson_basics() {
        let data = vec![vec![1.0, 2.0, 3.0], vec![2.0, 4.0, 1.0], vec![3.0, 6.5, 2.0]];
        let m = pearson_matrix(&data);
        for i in 0..3 {
            assert_abs_diff_eq!(m[i][i], 1.0);
            for j in 0..3 {
                assert_abs_diff_eq!(m[i][j], m[j][i]);
            }
        }
        assert!(m[0][1] > 0.99);
    }

    fn canonical() -> impl Strategy<Value = String> {
        proptest::collection::vec(0usize..20, 1..50).prop_map(|v| v.into_iter().map(|i| AMINO_ACIDS[i]).collect())
    }

    proptest! {
        #[test]
        fn order_free_concepts(s in canonical()) {
            let rev: String = s.chars().rev().collect();
            let reg = ConceptRegistry::builtin();
            let a = compute_all(&s, &reg).unwrap();
            let b = compute_all(&rev, &reg).unwrap();
            for c in BuiltinConcept::ALL {
                if c == BuiltinConcept::InstabilityIndex {
                    continue;
                }
                let i = c.index();
                prop_assert!((a.values[i] - b.values[i]).abs() < 1e-9, "{}", c.name());
            }
        }

        #[test]
        fn charge_decreases_with_ph(s in canonical(), ph in 0.0f64..13.9) {
            prop_assert!(charge_at_ph(&s, ph).unwrap() > charge_at_ph(&s, ph + 0.1).unwrap());
        }

        #[test]
        fn pi_is_root(s in canonical()) {
            let pi = isoelectric_point(&s).unwrap();
            prop_assert!((0.0..=14.0).contains(&pi));
            prop_assert!(charge_at_ph(&s, pi).unwrap().abs() < 1e-3);
        }

        #[test]
        fn weight_grows_with_length(s in canonical(), i in 0usize..20) {
            let longer = format!("{s}{}", AMINO_ACIDS[i]);
            prop_assert!(molecular_weight(&longer).unwrap() > molecular_weight(&s).unwrap());
        }

        #[test]
        fn structure_fractions_bounded(s in canonical()) {
            let (h, t, e) = secondary_structure_fractions(&s).unwrap();
            let l = s.chars().filter(|&c| c == 'L').count() as f64 / s.len() as f64;
            prop_assert!(h + t + e - l <= 1.0 + 1e-12);
        }

        #[test]
        fn normalize_roundtrip(v in 0.0f64..=1.0) {
            let stats = NormalizationStats { names: vec!["x".into()], min: vec![-3.0], max: vec![5.0] };
            let raw = ConceptVector::fully_observed(vec![-3.0 + 8.0 * v], false);
            let n = normalize(&raw, &stats, NormalizeMode::Strict).unwrap();
            let back = denormalize(&n, &stats);
            prop_assert!((back.values[0] - raw.values[0]).abs() < 1e-9);
        }
    }
}
