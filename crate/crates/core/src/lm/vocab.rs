//! Token alphabet: the twenty standard amino acids plus special tokens.

/// Amino-acid letters in token-id order.
pub const AMINO_ACIDS: &[u8; 20] = b"ACDEFGHIKLMNPQRSTVWY";

pub const N_AMINO: usize = 20;
pub const PAD: usize = 20;
pub const CLS: usize = 21;
pub const EOS: usize = 22;
pub const MASK: usize = 23;
pub const UNK: usize = 24;
pub const VOCAB_SIZE: usize = 25;

pub fn is_amino(id: usize) -> bool {
    id < N_AMINO
}

pub fn token_id(c: char) -> Option<usize> {
    let upper = c.to_ascii_uppercase();
    AMINO_ACIDS.iter().position(|&a| a as char == upper)
}

/// Encodes a residue string; unknown characters become [`UNK`]. Returns the
/// ids and the number of unknown characters.
pub fn encode(seq: &str) -> (Vec<usize>, usize) {
    let mut unknown = 0;
    let ids = seq
        .chars()
        .filter(|c| !c.is_whitespace())
        .map(|c| {
            token_id(c).unwrap_or_else(|| {
                unknown += 1;
                UNK
            })
        })
        .collect();
    (ids, unknown)
}

pub fn token_char(id: usize) -> char {
    match id {
        i if i < N_AMINO => AMINO_ACIDS[i] as char,
        PAD => '-',
        CLS => '^',
        EOS => '$',
        MASK => '#',
        _ => 'X',
    }
}

pub fn decode(ids: &[usize]) -> String {
    ids.iter().map(|&i| token_char(i)).collect()
}
