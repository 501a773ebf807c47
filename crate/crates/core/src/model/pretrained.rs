use std::io::BufRead;

use crate::error::{HsacnError, Result};
use crate::ingest::{Vocabulary, PAD, UNK};
use crate::real::Real;
use crate::tensor::Tensor;

/// Overwrites the embedding rows of vocabulary words listed in a
/// word2vec-style text file (`word v1 … vd` per line). A leading
/// `count dim` header line is skipped, as are words outside the vocabulary.
/// Returns the number of rows replaced.
pub fn load_embeddings<T: Real, R: BufRead>(embedding: &mut Tensor<T>, vocab: &Vocabulary, reader: R) -> Result<usize> {
    let dim = embedding.shape()[1];
    let mut replaced = 0;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let mut fields = line.split_whitespace();
        let Some(word) = fields.next() else { continue };
        let values: Vec<&str> = fields.collect();
        if lineno == 0 && values.len() == 1 && word.parse::<usize>().is_ok() {
            continue;
        }
        let id = vocab.id(word);
        if id == UNK || id == PAD {
            continue;
        }
        if values.len() != dim {
            return Err(HsacnError::Format(format!(
                "embedding line {} has {} values, expected {dim}",
                lineno + 1,
                values.len()
            )));
        }
        let row = embedding.row_mut(id as usize);
        for (slot, v) in row.iter_mut().zip(values) {
            let x: f64 = v
                .parse()
                .map_err(|_| HsacnError::Format(format!("embedding line {}: bad number `{v}`", lineno + 1)))?;
            if !x.is_finite() {
                return Err(HsacnError::Format(format!("embedding line {}: non-finite value", lineno + 1)));
            }
            *slot = T::of(x);
        }
        replaced += 1;
    }
    Ok(replaced)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn replaces_known_rows() {
        let vocab = Vocabulary::from_words(vec!["<pad>".into(), "<unk>".into(), "good".into(), "bad".into()]).unwrap();
        let mut e = Tensor::<f64>::zeros(&[4, 2]);
        let text = "3 2\ngood 0.5 -1\nunseen 1 1\nbad 2 3\n";
        assert_eq!(load_embeddings(&mut e, &vocab, Cursor::new(text)).unwrap(), 2);
        assert_eq!(e.row(2), &[0.5, -1.0]);
        assert_eq!(e.row(3), &[2.0, 3.0]);
        assert_eq!(e.row(1), &[0.0, 0.0]);
        assert!(load_embeddings(&mut e, &vocab, Cursor::new("good 1\n")).is_err());
    }
}
