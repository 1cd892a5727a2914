//! Brute-force concept calculators: character loops over tables parsed here,
//! sharing nothing with the library but the TSV files.

use std::collections::HashMap;

fn rows(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|l| l.split('\t').map(|c| c.trim().to_string()).collect())
        .collect()
}

fn scale(text: &str) -> HashMap<char, f64> {
    rows(text).into_iter().map(|r| (r[0].chars().next().unwrap(), r[1].parse().unwrap())).collect()
}

pub struct Oracle {
    kd: HashMap<char, f64>,
    hw: HashMap<char, f64>,
    emini: HashMap<char, f64>,
    mass: HashMap<char, f64>,
    diwv: HashMap<(char, char), f64>,
    pka: Vec<(String, f64, bool)>,
    ext: HashMap<String, f64>,
}

const CANONICAL: &str = "ACDEFGHIKLMNPQRSTVWY";

impl Oracle {
    pub fn load() -> Oracle {
        let data = concat!(env!("CARGO_MANIFEST_DIR"), "/data/");
        let read = |f: &str| std::fs::read_to_string(format!("{data}{f}")).unwrap();
        Oracle {
            kd: scale(&read("kyte_doolittle.tsv")),
            hw: scale(&read("hopp_woods.tsv")),
            emini: scale(&read("emini.tsv")),
            mass: scale(&read("residue_mass.tsv")),
            diwv: rows(&read("diwv.tsv"))
                .into_iter()
                .map(|r| ((r[0].chars().next().unwrap(), r[1].chars().next().unwrap()), r[2].parse().unwrap()))
                .collect(),
            pka: rows(&read("pka.tsv")).into_iter().map(|r| (r[0].clone(), r[1].parse().unwrap(), r[2] == "+")).collect(),
            ext: rows(&read("extinction.tsv")).into_iter().map(|r| (r[0].clone(), r[1].parse().unwrap())).collect(),
        }
    }

    fn clean(seq: &str) -> Vec<char> {
        seq.chars().map(|c| c.to_ascii_uppercase()).filter(|c| CANONICAL.contains(*c)).collect()
    }

    fn fraction(s: &[char], set: &str) -> f64 {
        let mut hits = 0.0;
        for c in s {
            if set.contains(*c) {
                hits += 1.0;
            }
        }
        hits / s.len() as f64
    }

    fn mean(s: &[char], table: &HashMap<char, f64>) -> f64 {
        let mut total = 0.0;
        for c in s {
            total += table[c];
        }
        total / s.len() as f64
    }

    pub fn charge(&self, seq: &str, ph: f64) -> f64 {
        let s = Self::clean(seq);
        let mut q = 0.0;
        for (group, pka, positive) in &self.pka {
            let n = match group.as_str() {
                "Nterm" | "Cterm" => 1,
                g => s.iter().filter(|&&c| g.starts_with(c)).count(),
            };
            for _ in 0..n {
                if *positive {
                    q += 10f64.powf(pka - ph) / (1.0 + 10f64.powf(pka - ph));
                } else {
                    q -= 10f64.powf(ph - pka) / (1.0 + 10f64.powf(ph - pka));
                }
            }
        }
        q
    }

    pub fn pi(&self, seq: &str) -> f64 {
        let (mut lo, mut hi, mut mid) = (0.0, 14.0, 7.0);
        for _ in 0..100 {
            mid = (lo + hi) / 2.0;
            let q = self.charge(seq, mid);
            if q.abs() < 1e-3 {
                return mid;
            }
            if q > 0.0 {
                lo = mid
            } else {
                hi = mid
            }
        }
        mid
    }

    /// The 14 values in registry order.
    pub fn all(&self, seq: &str) -> [f64; 14] {
        let s = Self::clean(seq);
        let mut mw = 18.0153;
        for c in &s {
            mw += self.mass[c];
        }
        let mut instab = 0.0;
        for i in 0..s.len().saturating_sub(1) {
            instab += self.diwv[&(s[i], s[i + 1])];
        }
        instab *= 10.0 / s.len() as f64;
        let count = |a: char| s.iter().filter(|&&c| c == a).count() as f64;
        let reduced = count('W') * self.ext["W"] + count('Y') * self.ext["Y"];
        let oxidized = reduced + (count('C') / 2.0).floor() * self.ext["cystine"];
        [
            mw,
            Self::fraction(&s, "FWY"),
            instab,
            self.pi(seq),
            Self::mean(&s, &self.kd),
            Self::fraction(&s, "VIYFWL"),
            Self::fraction(&s, "NPGS"),
            Self::fraction(&s, "EMAL"),
            reduced,
            oxidized,
            self.charge(seq, 6.0),
            self.charge(seq, 7.0),
            Self::mean(&s, &self.hw),
            Self::mean(&s, &self.emini),
        ]
    }
}
