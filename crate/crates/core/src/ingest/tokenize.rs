/// Splits text into sentences of lowercase word tokens.
///
/// Sentences end at `.`, `!` or `?` when followed by whitespace (or the end
/// of text), and at newlines. Words are maximal runs of alphanumeric
/// characters, with apostrophes kept when they sit between two alphanumerics
/// (`don't`); every other non-space character is a token on its own.
pub fn tokenize(text: &str) -> Vec<Vec<String>> {
    let chars: Vec<char> = text.chars().collect();
    let mut sentences = Vec::new();
    let mut current: Vec<String> = Vec::new();
    let mut word = String::new();

    let flush_word = |word: &mut String, current: &mut Vec<String>| {
        if !word.is_empty() {
            current.push(word.to_lowercase());
            word.clear();
        }
    };

    for (i, &c) in chars.iter().enumerate() {
        let next = chars.get(i + 1).copied();
        if c == '\n' {
            flush_word(&mut word, &mut current);
            if !current.is_empty() {
                sentences.push(std::mem::take(&mut current));
            }
        } else if c.is_whitespace() {
            flush_word(&mut word, &mut current);
        } else if c.is_alphanumeric() {
            word.push(c);
        } else if c == '\'' && !word.is_empty() && next.is_some_and(char::is_alphanumeric) {
            word.push(c);
        } else {
            flush_word(&mut word, &mut current);
            current.push(c.to_string());
            if matches!(c, '.' | '!' | '?') && next.map_or(true, char::is_whitespace) {
                sentences.push(std::mem::take(&mut current));
            }
        }
    }
    flush_word(&mut word, &mut current);
    if !current.is_empty() {
        sentences.push(current);
    }
    sentences
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &[&[&str]]) -> Vec<Vec<String>> {
        s.iter().map(|x| x.iter().map(|w| w.to_string()).collect()).collect()
    }

    #[test]
    fn two_sentences() {
        assert_eq!(
            tokenize("Great toy. Kids love it!"),
            toks(&[&["great", "toy", "."], &["kids", "love", "it", "!"]])
        );
    }

    #[test]
    fn comma_is_its_own_token() {
        let s = tokenize("this version is not classic like its predecessor, but its pleasures are still plentiful");
        assert_eq!(s.len(), 1);
        // 14 words plus the comma
        assert_eq!(s[0].len(), 15);
        assert_eq!(s[0][8], ",");
        assert_eq!(s[0].iter().filter(|t| t.chars().all(char::is_alphanumeric)).count(), 14);
    }

    #[test]
    fn empty_text() {
        assert!(tokenize("").is_empty());
        assert!(tokenize("   \n  ").is_empty());
    }

    #[test]
    fn newlines_and_inner_punctuation() {
        assert_eq!(
            tokenize("Cost $3.50 only\nWow... Don't BUY"),
            toks(&[
                &["cost", "$", "3", ".", "50", "only"],
                &["wow", ".", ".", "."],
                &["don't", "buy"]
            ])
        );
    }
}
