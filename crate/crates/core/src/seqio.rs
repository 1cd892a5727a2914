//! Vocabulary, tokenization, FASTA ingestion, masking and synthetic corpora.

use std::collections::{BTreeSet, HashMap};
use std::io::BufRead;
use std::sync::OnceLock;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Dirichlet, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

pub type TokenId = u32;

/// The 20 canonical amino acids in alphabetical one-letter order.
pub const AMINO_ACIDS: [char; 20] = [
    'A', 'C', 'D', 'E', 'F', 'G', 'H', 'I', 'K', 'L', 'M', 'N', 'P', 'Q', 'R', 'S', 'T', 'V', 'W',
    'Y',
];

pub const CLS: TokenId = 0;
pub const PAD: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const MASK: TokenId = 32;
/// Id of the first canonical amino acid; the 20 canonical residues are contiguous.
pub const FIRST_AMINO: TokenId = 4;
pub const VOCAB_SIZE: usize = 33;
pub const DEFAULT_MAX_LEN: usize = 512;

const VOCAB_FILE: &str = include_str!("../data/vocab.txt");

/// Index of a canonical residue letter in [`AMINO_ACIDS`].
pub fn amino_index(c: char) -> Option<usize> {
    AMINO_ACIDS.binary_search(&c).ok()
}

pub fn is_amino_token(id: TokenId) -> bool {
    (FIRST_AMINO..FIRST_AMINO + 20).contains(&id)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Parses a vocabulary file: one token per line, line number = id.
    pub fn from_lines(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text
            .lines()
            .map(|l| l.trim_end_matches('\r').to_string())
            .filter(|l| !l.is_empty())
            .collect();
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token `{t}`")));
            }
        }
        let vocab = Vocabulary { tokens, index };
        for (name, id) in [("<cls>", CLS), ("<pad>", PAD), ("<eos>", EOS), ("<unk>", UNK), ("<mask>", MASK)] {
            if vocab.id(name) != Some(id) {
                return Err(Error::Config(format!("special token {name} must have id {id}")));
            }
        }
        for (i, aa) in AMINO_ACIDS.iter().enumerate() {
            if vocab.id(&aa.to_string()) != Some(FIRST_AMINO + i as TokenId) {
                return Err(Error::Config(format!("amino acid {aa} missing or out of order")));
            }
        }
        Ok(vocab)
    }

    /// The built-in 33-token vocabulary.
    pub fn standard() -> &'static Vocabulary {
        static VOCAB: OnceLock<Vocabulary> = OnceLock::new();
        VOCAB.get_or_init(|| Vocabulary::from_lines(VOCAB_FILE).expect("bundled vocabulary is valid"))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Token id for a single residue character; unknown characters map to UNK.
    pub fn residue_id(&self, c: char) -> TokenId {
        let mut buf = [0u8; 4];
        let upper = c.to_ascii_uppercase();
        self.id(upper.encode_utf8(&mut buf)).filter(|&id| id > UNK && id != MASK).unwrap_or(UNK)
    }

    pub fn to_lines(&self) -> String {
        let mut out = self.tokens.join("\n");
        out.push('\n');
        out
    }
}

/// CLS + residues + EOS, optionally followed by PAD.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    ids: Vec<TokenId>,
    pad_start: usize,
}

impl TokenSequence {
    /// Validates framing: CLS first, exactly one EOS, only PAD after it.
    pub fn from_ids(ids: Vec<TokenId>) -> Result<Self> {
        if ids.first() != Some(&CLS) {
            return Err(Error::InvalidSequence("sequence must start with CLS".into()));
        }
        let eos = ids
            .iter()
            .position(|&t| t == EOS)
            .ok_or_else(|| Error::InvalidSequence("missing EOS".into()))?;
        if ids[1..eos].iter().any(|&t| t == CLS || t == PAD || t as usize >= VOCAB_SIZE) {
            return Err(Error::InvalidSequence("special token inside residues".into()));
        }
        if ids[eos + 1..].iter().any(|&t| t != PAD) {
            return Err(Error::InvalidSequence("only PAD may follow EOS".into()));
        }
        Ok(TokenSequence { ids, pad_start: eos + 1 })
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Index of the first PAD, or `len()` when unpadded.
    pub fn pad_start(&self) -> usize {
        self.pad_start
    }

    pub fn eos_index(&self) -> usize {
        self.pad_start - 1
    }

    pub fn residues(&self) -> &[TokenId] {
        &self.ids[1..self.eos_index()]
    }

    pub fn residue_count(&self) -> usize {
        self.eos_index() - 1
    }

    /// Positions holding residues (everything strictly between CLS and EOS).
    pub fn residue_positions(&self) -> std::ops::Range<usize> {
        1..self.eos_index()
    }

    /// The same sequence with PAD removed.
    pub fn trimmed(&self) -> TokenSequence {
        TokenSequence { ids: self.ids[..self.pad_start].to_vec(), pad_start: self.pad_start }
    }

    /// Pads with PAD up to `len`; shorter targets leave the sequence unchanged.
    pub fn padded(&self, len: usize) -> TokenSequence {
        let mut ids = self.ids.clone();
        if ids.len() < len {
            ids.resize(len, PAD);
        }
        TokenSequence { ids, pad_start: self.pad_start }
    }

    /// Replaces the token at a residue position.
    pub fn with_token(&self, pos: usize, id: TokenId) -> Result<TokenSequence> {
        if !self.residue_positions().contains(&pos) {
            return Err(Error::InvalidSequence(format!("position {pos} is not a residue")));
        }
        if matches!(id, CLS | PAD | EOS) || id as usize >= VOCAB_SIZE {
            return Err(Error::InvalidSequence(format!("token {id} cannot occupy a residue slot")));
        }
        let mut ids = self.ids.clone();
        ids[pos] = id;
        Ok(TokenSequence { ids, pad_start: self.pad_start })
    }
}

fn frame(residues: impl Iterator<Item = TokenId>, max_len: usize) -> Vec<TokenId> {
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    ids.extend(residues.take(max_len.saturating_sub(2)));
    ids.push(EOS);
    ids
}

/// CLS + residues + EOS framing padded to `max_len`; residues beyond
/// `max_len - 2` are truncated.
pub fn tokenize(sequence: &str, max_len: usize) -> Result<TokenSequence> {
    let ts = tokenize_unpadded(sequence, max_len)?;
    Ok(ts.padded(max_len))
}

/// Like [`tokenize`] but without trailing PAD.
pub fn tokenize_unpadded(sequence: &str, max_len: usize) -> Result<TokenSequence> {
    if sequence.is_empty() {
        return Err(Error::InvalidSequence("empty sequence".into()));
    }
    if max_len < 3 {
        return Err(Error::InvalidSequence(format!("max_len {max_len} leaves no room for residues")));
    }
    let vocab = Vocabulary::standard();
    let ids = frame(sequence.chars().map(|c| vocab.residue_id(c)), max_len);
    TokenSequence::from_ids(ids)
}

/// Residue string between CLS and EOS. MASK renders as `?`, UNK as `X`.
pub fn detokenize(ts: &TokenSequence) -> Result<String> {
    let vocab = Vocabulary::standard();
    // re-validate so that hand-built sequences get the same framing check
    let ts = TokenSequence::from_ids(ts.ids().to_vec())?;
    ts.residues()
        .iter()
        .map(|&id| match id {
            MASK => Ok('?'),
            UNK => Ok('X'),
            _ => vocab
                .token(id)
                .and_then(|t| t.chars().next())
                .ok_or_else(|| Error::InvalidSequence(format!("unknown token id {id}"))),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FastaRecord {
    pub header: String,
    pub sequence: String,
}

/// Reads FASTA records in file order. Sequence lines are concatenated with
/// whitespace and `*` terminators removed; CRLF is accepted.
pub fn parse_fasta<R: BufRead>(reader: R) -> Result<Vec<FastaRecord>> {
    let mut records: Vec<FastaRecord> = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches(['\r', '\n']);
        if let Some(header) = line.strip_prefix('>') {
            records.push(FastaRecord { header: header.trim().to_string(), sequence: String::new() });
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let Some(rec) = records.last_mut() else {
            return Err(Error::Format { line: lineno + 1, message: "sequence data before any header".into() });
        };
        rec.sequence.extend(line.chars().filter(|c| !c.is_whitespace() && *c != '*'));
    }
    for rec in records.iter().filter(|r| r.sequence.is_empty()) {
        log::warn!("FASTA record `{}` has an empty sequence", rec.header);
    }
    Ok(records)
}

pub fn write_fasta<W: std::io::Write>(mut w: W, records: &[FastaRecord]) -> Result<()> {
    for r in records {
        writeln!(w, ">{}", r.header)?;
        for chunk in r.sequence.as_bytes().chunks(60) {
            w.write_all(chunk)?;
            w.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Positions replaced by MASK.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub positions: Vec<usize>,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MaskSpec {
    Rate(f64),
    Positions(Vec<usize>),
}

/// `max(1, round(rate * n))`, capped at `n`.
pub fn mask_count(rate: f64, n: usize) -> usize {
    ((rate * n as f64).round() as usize).clamp(1, n.max(1))
}

/// Masks residue positions either at a rate (deterministic per seed) or at
/// explicit positions.
pub fn apply_mask(ts: &TokenSequence, spec: &MaskSpec, seed: u64) -> Result<(TokenSequence, MaskPlan)> {
    let maskable = ts.residue_positions();
    let n = maskable.len();
    if n == 0 {
        return Err(Error::NothingToMask);
    }
    let positions: Vec<usize> = match spec {
        MaskSpec::Rate(rate) => {
            if !(*rate > 0.0 && *rate <= 1.0) {
                return Err(Error::InvalidMaskPlan(format!("rate {rate} outside (0, 1]")));
            }
            let count = mask_count(*rate, n);
            let mut rng = rng::keyed(seed, Stream::Mask, 0);
            let mut picked: Vec<usize> = index::sample(&mut rng, n, count).into_iter().map(|i| i + maskable.start).collect();
            picked.sort_unstable();
            picked
        }
        MaskSpec::Positions(p) => {
            let set: BTreeSet<usize> = p.iter().copied().collect();
            if set.is_empty() {
                return Err(Error::InvalidMaskPlan("empty position set".into()));
            }
            if let Some(bad) = set.iter().find(|i| !maskable.contains(i)) {
                return Err(Error::InvalidMaskPlan(format!("position {bad} is not a residue")));
            }
            set.into_iter().collect()
        }
    };
    let mut ids = ts.ids().to_vec();
    for &p in &positions {
        ids[p] = MASK;
    }
    let rate = positions.len() as f64 / n as f64;
    Ok((TokenSequence { ids, pad_start: ts.pad_start() }, MaskPlan { positions, rate }))
}

/// Residue frequency profile over the 20 canonical amino acids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AminoProfile(pub [f64; 20]);

impl AminoProfile {
    pub fn uniform() -> Self {
        AminoProfile([0.05; 20])
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidProfile("negative or non-finite weight".into()));
        }
        let total: f64 = self.0.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidProfile(format!("weights sum to {total}, expected 1")));
        }
        Ok(())
    }

    fn cumulative(&self) -> [f64; 20] {
        let mut acc = 0.0;
        let mut out = [0.0; 20];
        for (o, p) in out.iter_mut().zip(self.0) {
            acc += p;
            *o = acc;
        }
        out
    }
}

fn draw_residue<R: Rng>(rng: &mut R, cumulative: &[f64; 20]) -> char {
    let total = cumulative[19];
    let u: f64 = rng.random::<f64>() * total;
    let i = cumulative.iter().position(|&c| u < c).unwrap_or(19);
    AMINO_ACIDS[i]
}

fn check_lengths(n: usize, len_range: (usize, usize)) -> Result<()> {
    if n == 0 {
        return Err(Error::Config("corpus size must be at least 1".into()));
    }
    if len_range.0 < 2 || len_range.1 < len_range.0 {
        return Err(Error::Config(format!("invalid length range {len_range:?}")));
    }
    Ok(())
}

/// `n` sequences with lengths uniform in `len_range` (inclusive) and residues
/// drawn i.i.d. from `profile`.
pub fn generate_synthetic_corpus(n: usize, len_range: (usize, usize), profile: &AminoProfile, seed: u64) -> Result<Vec<String>> {
    profile.validate()?;
    check_lengths(n, len_range)?;
    let cumulative = profile.cumulative();
    Ok((0..n)
        .map(|i| {
            let mut rng = rng::keyed(seed, Stream::Corpus, i as u64);
            let len = rng.random_range(len_range.0..=len_range.1);
            (0..len).map(|_| draw_residue(&mut rng, &cumulative)).collect()
        })
        .collect())
}

/// Like [`generate_synthetic_corpus`] but every sequence draws its own
/// residue profile from a Dirichlet centred on `profile` with total
/// concentration `concentration`. Smaller concentrations give more varied
/// concept values across the corpus.
pub fn generate_varied_corpus(
    n: usize,
    len_range: (usize, usize),
    profile: &AminoProfile,
    concentration: f64,
    seed: u64,
) -> Result<Vec<String>> {
    profile.validate()?;
    check_lengths(n, len_range)?;
    if !(concentration > 0.0 && concentration.is_finite()) {
        return Err(Error::InvalidProfile(format!("concentration {concentration} must be positive")));
    }
    let alpha: [f64; 20] = profile.0.map(|p| (p * concentration).max(1e-3));
    let dirichlet = Dirichlet::new(alpha).map_err(|e| Error::InvalidProfile(e.to_string()))?;
    Ok((0..n)
        .map(|i| {
            let mut rng = rng::keyed(seed, Stream::Corpus, i as u64);
            let len = rng.random_range(len_range.0..=len_range.1);
            let p: [f64; 20] = dirichlet.sample(&mut rng);
            let mut cumulative = [0.0; 20];
            let mut acc = 0.0;
            for (c, v) in cumulative.iter_mut().zip(p) {
                acc += v;
                *c = acc;
            }
            (0..len).map(|_| draw_residue(&mut rng, &cumulative)).collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn vocabulary_layout() {
        let v = Vocabulary::standard();
        assert_eq!(v.len(), VOCAB_SIZE);
        assert_eq!(v.id("<cls>"), Some(0));
        assert_eq!(v.id("<pad>"), Some(1));
        assert_eq!(v.id("<eos>"), Some(2));
        assert_eq!(v.id("<unk>"), Some(3));
        assert_eq!(v.id("<mask>"), Some(32));
        assert_eq!(v.id("A"), Some(4));
        assert_eq!(v.id("Y"), Some(23));
        for (i, t) in v.tokens().iter().enumerate() {
            assert_eq!(v.id(t), Some(i as TokenId));
        }
        assert_eq!(Vocabulary::from_lines(&v.to_lines()).unwrap(), *v);
    }

    #[test]
    fn vocabulary_rejects_duplicates() {
        let text = Vocabulary::standard().to_lines().replace("\nY\n", "\nA\n");
        assert!(Vocabulary::from_lines(&text).is_err());
    }

    #[test]
    fn tokenize_frames_and_pads() {
        let ts = tokenize("ACD", 8).unwrap();
        assert_eq!(ts.ids(), &[CLS, 4, 5, 6, EOS, PAD, PAD, PAD]);
        assert_eq!(ts.pad_start(), 5);
        assert_eq!(ts.trimmed().ids(), &[CLS, 4, 5, 6, EOS]);
    }

    #[test]
    fn tokenize_maps_unknown_and_truncates() {
        let ts = tokenize("ACJ", 8).unwrap();
        assert_eq!(ts.ids()[3], UNK);
        let ts = tokenize("ACDEFGHIK", 6).unwrap();
        assert_eq!(detokenize(&ts).unwrap(), "ACDE");
        assert!(matches!(tokenize("", 8), Err(Error::InvalidSequence(_))));
    }

    #[test]
    fn detokenize_examples() {
        let g = Vocabulary::standard().id("G").unwrap();
        let ts = TokenSequence::from_ids(vec![CLS, g, g, EOS]).unwrap();
        assert_eq!(detokenize(&ts).unwrap(), "GG");
        let ts = TokenSequence::from_ids(vec![CLS, MASK, EOS]).unwrap();
        assert_eq!(detokenize(&ts).unwrap(), "?");
        assert!(TokenSequence::from_ids(vec![CLS, 4]).is_err());
        assert!(TokenSequence::from_ids(vec![4, EOS]).is_err());
        assert!(TokenSequence::from_ids(vec![CLS, EOS, 4]).is_err());
    }

    #[test]
    fn fasta_examples() {
        let recs = parse_fasta(">a\nAC\nDE\n".as_bytes()).unwrap();
        assert_eq!(recs, vec![FastaRecord { header: "a".into(), sequence: "ACDE".into() }]);
        let recs = parse_fasta(">a\n\n>b\nG\n".as_bytes()).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].sequence, "");
        assert_eq!(recs[1].sequence, "G");
        let lf = parse_fasta(">x desc\nAC D*\nEF\n>y\nGG\n".as_bytes()).unwrap();
        let crlf = parse_fasta(">x desc\r\nAC D*\r\nEF\r\n>y\r\nGG\r\n".as_bytes()).unwrap();
        assert_eq!(lf, crlf);
        assert_eq!(lf[0].sequence, "ACDEF");
        assert!(matches!(parse_fasta("AC\n>a\n".as_bytes()), Err(Error::Format { line: 1, .. })));
    }

    #[test]
    fn mask_examples() {
        let ts = tokenize_unpadded("ACDE", 16).unwrap();
        let (m, plan) = apply_mask(&ts, &MaskSpec::Rate(1.0), 1).unwrap();
        assert_eq!(plan.positions, vec![1, 2, 3, 4]);
        assert!(m.residues().iter().all(|&t| t == MASK));

        let (m, _) = apply_mask(&ts, &MaskSpec::Positions(vec![1, 3]), 0).unwrap();
        assert_eq!(detokenize(&m).unwrap(), "?C?E");

        let a = apply_mask(&ts, &MaskSpec::Rate(0.5), 42).unwrap();
        let b = apply_mask(&ts, &MaskSpec::Rate(0.5), 42).unwrap();
        assert_eq!(a, b);

        assert!(apply_mask(&ts, &MaskSpec::Positions(vec![0]), 0).is_err());
        assert!(apply_mask(&ts, &MaskSpec::Positions(vec![5]), 0).is_err());
    }

    #[test]
    fn nothing_to_mask() {
        let ts = TokenSequence::from_ids(vec![CLS, EOS, PAD]).unwrap();
        assert!(matches!(apply_mask(&ts, &MaskSpec::Rate(0.5), 0), Err(Error::NothingToMask)));
    }

    #[test]
    fn corpus_profiles() {
        let mut all_a = [0.0; 20];
        all_a[0] = 1.0;
        let seqs = generate_synthetic_corpus(20, (2, 10), &AminoProfile(all_a), 3).unwrap();
        assert!(seqs.iter().all(|s| s.chars().all(|c| c == 'A') && (2..=10).contains(&s.len())));

        let bad = AminoProfile([0.1; 20]);
        assert!(matches!(generate_synthetic_corpus(5, (2, 4), &bad, 0), Err(Error::InvalidProfile(_))));

        let a = generate_synthetic_corpus(30, (5, 9), &AminoProfile::uniform(), 7).unwrap();
        let b = generate_synthetic_corpus(30, (5, 9), &AminoProfile::uniform(), 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn uniform_corpus_frequencies() {
        // counting oracle: each residue's empirical frequency near 1/20
        let seqs = generate_synthetic_corpus(1000, (20, 60), &AminoProfile::uniform(), 11).unwrap();
        let mut counts = [0usize; 20];
        let mut total = 0usize;
        for s in &seqs {
            for c in s.chars() {
                counts[amino_index(c).unwrap()] += 1;
                total += 1;
            }
        }
        for c in counts {
            let f = c as f64 / total as f64;
            assert!((f - 0.05).abs() < 0.02, "frequency {f}");
        }
    }

    #[test]
    fn varied_corpus_is_deterministic() {
        let a = generate_varied_corpus(10, (10, 20), &AminoProfile::uniform(), 5.0, 1).unwrap();
        let b = generate_varied_corpus(10, (10, 20), &AminoProfile::uniform(), 5.0, 1).unwrap();
        assert_eq!(a, b);
    }

    fn canonical() -> impl Strategy<Value = String> {
        proptest::collection::vec(0usize..20, 1..60).prop_map(|v| v.into_iter().map(|i| AMINO_ACIDS[i]).collect())
    }

    proptest! {
        #[test]
        fn roundtrip(s in canonical()) {
            let ts = tokenize(&s, 64).unwrap();
            prop_assert_eq!(detokenize(&ts).unwrap(), s);
        }

        #[test]
        fn mask_respects_framing(s in canonical(), rate in 0.01f64..=1.0, seed in any::<u64>()) {
            let ts = tokenize(&s, 80).unwrap();
            let (m, plan) = apply_mask(&ts, &MaskSpec::Rate(rate), seed).unwrap();
            prop_assert_eq!(plan.positions.len(), mask_count(rate, s.len()));
            prop_assert_eq!(m.ids()[0], CLS);
            prop_assert_eq!(m.ids()[ts.eos_index()], EOS);
            prop_assert!(m.ids()[ts.pad_start()..].iter().all(|&t| t == PAD));
            let masked = m.ids().iter().filter(|&&t| t == MASK).count();
            prop_assert_eq!(masked, plan.positions.len());
        }

        #[test]
        fn fasta_count_matches_headers(seqs in proptest::collection::vec(canonical(), 1..8)) {
            let recs: Vec<FastaRecord> = seqs.iter().enumerate()
                .map(|(i, s)| FastaRecord { header: format!("r{i}"), sequence: s.clone() }).collect();
            let mut buf = Vec::new();
            write_fasta(&mut buf, &recs).unwrap();
            let parsed = parse_fasta(buf.as_slice()).unwrap();
            prop_assert_eq!(parsed, recs);
        }
    }
}
