//! Systematic MDS erasure coding over GF(2^8).
//!
//! Parity rows come from a Cauchy matrix, so every square submatrix of the
//! generator `[I; C]` restricted to any `k` rows is invertible. That gives the
//! MDS property directly: any `k` of the `k + m` symbols reconstruct the data.
//! Decoding is erasure-only; symbols are either present and correct or missing.

use thiserror::Error;

/// Field size bound on `k + m`.
pub const MAX_BLOCK_SYMBOLS: usize = 255;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("invalid block parameters k={k} m={m}")]
    InvalidParams { k: usize, m: usize },
    #[error("symbol {index} has length {len}, expected {expected}")]
    SizeMismatch {
        index: usize,
        len: usize,
        expected: usize,
    },
    #[error("symbol index {index} out of range for block of {total}")]
    IndexOutOfRange { index: usize, total: usize },
    #[error("symbol index {0} supplied twice")]
    DuplicateIndex(usize),
    #[error("only {present} symbols present, {needed} needed")]
    InsufficientSymbols { present: usize, needed: usize },
}

pub mod gf {
    //! GF(2^8) arithmetic with the primitive polynomial x^8+x^4+x^3+x^2+1.

    const POLY: u16 = 0x11d;

    pub(crate) struct Tables {
        pub exp: [u8; 512],
        pub log: [u8; 256],
    }

    pub(crate) static TABLES: Tables = build();

    const fn build() -> Tables {
        let mut exp = [0u8; 512];
        let mut log = [0u8; 256];
        let mut x: u16 = 1;
        let mut i = 0;
        while i < 255 {
            exp[i] = x as u8;
            log[x as usize] = i as u8;
            x <<= 1;
            if x & 0x100 != 0 {
                x ^= POLY;
            }
            i += 1;
        }
        while i < 512 {
            exp[i] = exp[i - 255];
            i += 1;
        }
        Tables { exp, log }
    }

    #[inline]
    pub fn mul(a: u8, b: u8) -> u8 {
        if a == 0 || b == 0 {
            return 0;
        }
        let t = &TABLES;
        t.exp[t.log[a as usize] as usize + t.log[b as usize] as usize]
    }

    /// Multiplicative inverse. Panics on zero.
    #[inline]
    pub fn inv(a: u8) -> u8 {
        assert!(a != 0, "zero has no inverse in GF(256)");
        let t = &TABLES;
        t.exp[255 - t.log[a as usize] as usize]
    }

    #[inline]
    pub fn div(a: u8, b: u8) -> u8 {
        mul(a, inv(b))
    }

    /// `dst += c * src` elementwise.
    pub fn mul_add_slice(dst: &mut [u8], src: &[u8], c: u8) {
        if c == 0 {
            return;
        }
        if c == 1 {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d ^= s);
            return;
        }
        let t = &TABLES;
        let lc = t.log[c as usize] as usize;
        for (d, &s) in dst.iter_mut().zip(src) {
            if s != 0 {
                *d ^= t.exp[lc + t.log[s as usize] as usize];
            }
        }
    }
}

/// Coefficient of data symbol `j` in parity row `i`: `1 / (x_i + y_j)` with
/// `x_i = i` and `y_j = m + j`. The x and y sets are disjoint so the sum is
/// never zero.
fn cauchy(i: usize, j: usize, m: usize) -> u8 {
    gf::inv((i as u8) ^ ((m + j) as u8))
}

fn check_params(k: usize, m: usize) -> Result<(), CodecError> {
    if k == 0 || m == 0 || k + m > MAX_BLOCK_SYMBOLS {
        return Err(CodecError::InvalidParams { k, m });
    }
    Ok(())
}

/// Computes `m` parity symbols over `data`. All data symbols must already be
/// padded to the same length.
pub fn encode<S: AsRef<[u8]>>(data: &[S], m: usize) -> Result<Vec<Vec<u8>>, CodecError> {
    let k = data.len();
    check_params(k, m)?;
    let len = data[0].as_ref().len();
    for (index, s) in data.iter().enumerate() {
        if s.as_ref().len() != len {
            return Err(CodecError::SizeMismatch {
                index,
                len: s.as_ref().len(),
                expected: len,
            });
        }
    }
    let mut parity = vec![vec![0u8; len]; m];
    for (i, row) in parity.iter_mut().enumerate() {
        for (j, s) in data.iter().enumerate() {
            gf::mul_add_slice(row, s.as_ref(), cauchy(i, j, m));
        }
    }
    Ok(parity)
}

/// A block of `k` data and `m` parity symbols, some of which may be missing.
///
/// Index `0..k` are data symbols, `k..k+m` parity symbols.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolBlock {
    k: usize,
    m: usize,
    symbol_len: usize,
    symbols: Vec<Option<Vec<u8>>>,
}

impl SymbolBlock {
    pub fn new(k: usize, m: usize, symbol_len: usize) -> Result<Self, CodecError> {
        check_params(k, m)?;
        Ok(Self {
            k,
            m,
            symbol_len,
            symbols: vec![None; k + m],
        })
    }

    /// Builds a block from `(index, symbol)` pairs; the symbol length is taken
    /// from the first entry.
    pub fn from_present<I>(k: usize, m: usize, present: I) -> Result<Self, CodecError>
    where
        I: IntoIterator<Item = (usize, Vec<u8>)>,
    {
        let mut iter = present.into_iter().peekable();
        let len = iter.peek().map(|(_, s)| s.len()).unwrap_or(0);
        let mut block = Self::new(k, m, len)?;
        for (index, symbol) in iter {
            block.insert(index, symbol)?;
        }
        Ok(block)
    }

    pub fn insert(&mut self, index: usize, symbol: Vec<u8>) -> Result<(), CodecError> {
        let total = self.k + self.m;
        if index >= total {
            return Err(CodecError::IndexOutOfRange { index, total });
        }
        if symbol.len() != self.symbol_len {
            return Err(CodecError::SizeMismatch {
                index,
                len: symbol.len(),
                expected: self.symbol_len,
            });
        }
        if self.symbols[index].is_some() {
            return Err(CodecError::DuplicateIndex(index));
        }
        self.symbols[index] = Some(symbol);
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn symbol_len(&self) -> usize {
        self.symbol_len
    }

    pub fn present_count(&self) -> usize {
        self.symbols.iter().filter(|s| s.is_some()).count()
    }

    pub fn is_present(&self, index: usize) -> bool {
        self.symbols.get(index).is_some_and(Option::is_some)
    }
}

/// Reconstructs all `k` data symbols of `block`.
pub fn decode(block: &SymbolBlock) -> Result<Vec<Vec<u8>>, CodecError> {
    let (k, m, len) = (block.k, block.m, block.symbol_len);
    let present = block.present_count();
    if present < k {
        return Err(CodecError::InsufficientSymbols { present, needed: k });
    }
    let missing: Vec<usize> = (0..k).filter(|&j| block.symbols[j].is_none()).collect();
    if missing.is_empty() {
        return Ok(block.symbols[..k].iter().map(|s| s.clone().unwrap()).collect());
    }

    // Pick k present rows: all present data rows, then enough parity rows.
    let mut rows: Vec<usize> = (0..k).filter(|&j| block.symbols[j].is_some()).collect();
    rows.extend((k..k + m).filter(|&i| block.symbols[i].is_some()).take(missing.len()));

    // Generator rows restricted to the chosen symbols, inverted by Gauss-Jordan.
    let mut a: Vec<Vec<u8>> = rows
        .iter()
        .map(|&r| {
            (0..k)
                .map(|j| {
                    if r < k {
                        u8::from(r == j)
                    } else {
                        cauchy(r - k, j, m)
                    }
                })
                .collect()
        })
        .collect();
    let mut inv: Vec<Vec<u8>> = (0..k)
        .map(|i| (0..k).map(|j| u8::from(i == j)).collect())
        .collect();
    for col in 0..k {
        let pivot = (col..k)
            .find(|&r| a[r][col] != 0)
            .expect("Cauchy submatrix is nonsingular");
        a.swap(col, pivot);
        inv.swap(col, pivot);
        let p = gf::inv(a[col][col]);
        for j in 0..k {
            a[col][j] = gf::mul(a[col][j], p);
            inv[col][j] = gf::mul(inv[col][j], p);
        }
        for r in 0..k {
            let f = a[r][col];
            if r != col && f != 0 {
                for j in 0..k {
                    a[r][j] ^= gf::mul(f, a[col][j]);
                    inv[r][j] ^= gf::mul(f, inv[col][j]);
                }
            }
        }
    }

    let mut out: Vec<Vec<u8>> = Vec::with_capacity(k);
    for (j, inv_row) in inv.iter().enumerate().take(k) {
        if let Some(s) = &block.symbols[j] {
            out.push(s.clone());
            continue;
        }
        let mut sym = vec![0u8; len];
        for (col, &r) in rows.iter().enumerate() {
            let src = block.symbols[r].as_deref().unwrap();
            gf::mul_add_slice(&mut sym, src, inv_row[col]);
        }
        out.push(sym);
    }
    Ok(out)
}

/// Zero-pads `symbols` to the longest member's length.
pub fn pad_symbols<S: AsRef<[u8]>>(symbols: &[S]) -> Vec<Vec<u8>> {
    let len = symbols.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
    symbols
        .iter()
        .map(|s| {
            let mut v = s.as_ref().to_vec();
            v.resize(len, 0);
            v
        })
        .collect()
}
