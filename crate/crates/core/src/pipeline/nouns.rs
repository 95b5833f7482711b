//! Rule-based noun phrase chunker over a small bundled lexicon.
//!
//! A phrase is a run of adjectives and nouns that ends in a noun, with any
//! leading determiner dropped. Two phrases joined by `of` form one phrase
//! ("group of children"). Words missing from the lexicon are nouns, except
//! `-ing` forms (verbs) and `-ly` forms (adverbs).

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Pos {
    Det,
    Adj,
    Noun,
    Prep,
    Verb,
    Conj,
    Pron,
    Adv,
}

const DETERMINERS: &[&str] = &[
    "a", "an", "the", "this", "that", "these", "those", "some", "any", "each", "every", "its",
    "their", "his", "her", "our", "my", "your", "two", "three", "four", "five", "several", "many",
    "few", "one", "no", "another",
];

const PREPOSITIONS: &[&str] = &[
    "of", "in", "on", "at", "with", "by", "near", "next", "to", "from", "into", "onto", "over",
    "under", "behind", "beside", "between", "above", "below", "across", "along", "around",
    "through", "inside", "outside", "against", "for", "like", "about", "during", "among", "upon",
    "beneath", "toward", "towards", "off",
];

const CONJUNCTIONS: &[&str] = &["and", "or", "but", "while", "as", "so", "than", "where", "which", "who"];

const PRONOUNS: &[&str] = &[
    "it", "he", "she", "they", "them", "we", "i", "you", "him", "there", "here", "what", "someone",
    "something",
];

const VERBS: &[&str] = &[
    "is", "are", "was", "were", "be", "been", "has", "have", "had", "do", "does", "did", "can",
    "could", "will", "would", "may", "stand", "stands", "sit", "sits", "hold", "holds", "holding",
    "wear", "wears", "look", "looks", "made", "seen", "shown", "lies", "lie", "hangs", "hang",
    "rides", "ride", "walk", "walks", "play", "plays", "carry", "carries", "appears", "seems",
    "located", "placed", "parked", "filled", "covered", "painted", "dressed",
];

const ADVERBS: &[&str] = &["very", "not", "also", "too", "just", "quite", "rather", "up", "down", "out", "together", "away", "nearby"];

const ADJECTIVES: &[&str] = &[
    "old", "new", "young", "big", "small", "large", "little", "tiny", "huge", "tall", "short",
    "long", "wide", "narrow", "red", "blue", "green", "yellow", "white", "black", "brown", "gray",
    "grey", "pink", "purple", "orange", "beige", "golden", "silver", "dark", "bright",
    "busy", "cozy", "sunny", "crowded", "empty", "quiet", "modern", "wooden", "plastic", "round",
    "square", "open", "closed", "clean", "dirty", "shiny", "soft", "hard", "curly", "straight",
    "striped", "colorful", "happy", "other", "same", "different", "close", "front", "back",
    "left", "right", "middle", "main",
];

fn tag(word: &str) -> Pos {
    let w = word;
    if DETERMINERS.contains(&w) {
        Pos::Det
    } else if PREPOSITIONS.contains(&w) {
        Pos::Prep
    } else if CONJUNCTIONS.contains(&w) {
        Pos::Conj
    } else if PRONOUNS.contains(&w) {
        Pos::Pron
    } else if VERBS.contains(&w) {
        Pos::Verb
    } else if ADVERBS.contains(&w) {
        Pos::Adv
    } else if ADJECTIVES.contains(&w) {
        Pos::Adj
    } else if w.len() > 4 && w.ends_with("ing") {
        Pos::Verb
    } else if w.len() > 3 && w.ends_with("ly") {
        Pos::Adv
    } else {
        Pos::Noun
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Word(String),
    Break,
}

fn tokenize(text: &str) -> Vec<Token> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() || ch == '-' || ch == '\'' {
            cur.extend(ch.to_lowercase());
        } else {
            if !cur.is_empty() {
                out.push(Token::Word(std::mem::take(&mut cur)));
            }
            if !ch.is_whitespace() {
                out.push(Token::Break);
            }
        }
    }
    if !cur.is_empty() {
        out.push(Token::Word(cur));
    }
    out
}

/// Reads one phrase starting at `i`; returns its words and the index after it.
fn read_phrase(tokens: &[(Token, Option<Pos>)], mut i: usize) -> (Vec<String>, usize) {
    if let Some((Token::Word(_), Some(Pos::Det))) = tokens.get(i) {
        i += 1;
    }
    let mut words = Vec::new();
    let start = i;
    while let Some((Token::Word(w), Some(Pos::Adj | Pos::Noun))) = tokens.get(i) {
        words.push(w.clone());
        i += 1;
    }
    // must end in a noun
    while let Some(last) = words.last() {
        if tag(last) == Pos::Noun {
            break;
        }
        words.pop();
    }
    if words.is_empty() {
        return (words, start);
    }
    (words, i)
}

/// Extracts lowercase noun phrases from `caption`, deduplicated in order of
/// first appearance.
pub fn extract_noun_phrases(caption: &str) -> Vec<String> {
    let tokens: Vec<(Token, Option<Pos>)> = tokenize(caption)
        .into_iter()
        .map(|t| match &t {
            Token::Word(w) => {
                let p = tag(w);
                (t, Some(p))
            }
            Token::Break => (t, None),
        })
        .collect();

    let mut phrases: Vec<String> = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let (words, next) = read_phrase(&tokens, i);
        if words.is_empty() {
            i = next.max(i + 1);
            continue;
        }
        let mut phrase = words.join(" ");
        i = next;
        // "X of Y" joins into one phrase
        while matches!(tokens.get(i), Some((Token::Word(w), _)) if w == "of") {
            let (tail, after) = read_phrase(&tokens, i + 1);
            if tail.is_empty() {
                break;
            }
            phrase = format!("{phrase} of {}", tail.join(" "));
            i = after;
        }
        if !phrases.contains(&phrase) {
            phrases.push(phrase);
        }
    }
    phrases
}
