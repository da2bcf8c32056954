//! Text form of composition trees.
//!
//! ```text
//! expr   := label | linear | sharpen | binary
//! linear := "linear" "(" "w" "=" nums ";" "c" "=" labels ")"
//! sharpen:= "sharpen" "(" "beta" "=" num ";" "w" "=" nums ";" "c" "=" labels ")"
//! binary := ("hm" | "contrast") "(" expr "," expr ("," expr)* ")"
//! nums   := "[" num ("," num)* "]"
//! labels := "[" label ("," label)* "]"
//! label  := [A-Za-z_][A-Za-z0-9_.-]*
//! ```
//!
//! Three or more operands of `hm` or `contrast` associate to the left.
//! Whitespace is ignored between tokens.

use flowmix_core::compose::Composition;

use crate::error::{AppError, AppResult};

/// A parsed tree whose leaves index into `labels` (first appearance order).
#[derive(Clone, Debug, PartialEq)]
pub struct ParsedSpec {
    pub composition: Composition,
    pub labels: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Ident(String),
    Num(f64),
    Sym(char),
}

fn tokenize(text: &str) -> AppResult<Vec<(usize, Tok)>> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if "()[];,=".contains(c) {
            out.push((i, Tok::Sym(c)));
            i += 1;
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || "_.-".contains(chars[i])) {
                i += 1;
            }
            out.push((start, Tok::Ident(chars[start..i].iter().collect())));
        } else if c.is_ascii_digit() || c == '.' || c == '-' || c == '+' {
            let start = i;
            i += 1;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || ".+-".contains(chars[i])) {
                i += 1;
            }
            let s: String = chars[start..i].iter().collect();
            let v = s.parse::<f64>().map_err(|_| syntax(start, &format!("bad number `{s}`")))?;
            out.push((start, Tok::Num(v)));
        } else {
            return Err(syntax(i, &format!("unexpected character `{c}`")));
        }
    }
    Ok(out)
}

fn syntax(pos: usize, msg: &str) -> AppError {
    AppError::Usage(format!("composition spec, offset {pos}: {msg}"))
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    at: usize,
    end: usize,
    labels: Vec<String>,
}

impl Parser {
    fn pos(&self) -> usize {
        self.toks.get(self.at).map_or(self.end, |t| t.0)
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.at).map(|t| &t.1)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.at).map(|t| t.1.clone());
        self.at += 1;
        t
    }

    fn expect_sym(&mut self, c: char) -> AppResult<()> {
        let pos = self.pos();
        match self.next() {
            Some(Tok::Sym(s)) if s == c => Ok(()),
            _ => Err(syntax(pos, &format!("expected `{c}`"))),
        }
    }

    fn expect_key(&mut self, key: &str) -> AppResult<()> {
        let pos = self.pos();
        match self.next() {
            Some(Tok::Ident(s)) if s == key => self.expect_sym('='),
            _ => Err(syntax(pos, &format!("expected `{key}=`"))),
        }
    }

    fn label(&mut self) -> AppResult<usize> {
        let pos = self.pos();
        match self.next() {
            Some(Tok::Ident(s)) => Ok(self.intern(s)),
            _ => Err(syntax(pos, "expected a component label")),
        }
    }

    fn intern(&mut self, s: String) -> usize {
        match self.labels.iter().position(|l| *l == s) {
            Some(i) => i,
            None => {
                self.labels.push(s);
                self.labels.len() - 1
            }
        }
    }

    fn number(&mut self) -> AppResult<f64> {
        let pos = self.pos();
        match self.next() {
            Some(Tok::Num(v)) => Ok(v),
            _ => Err(syntax(pos, "expected a number")),
        }
    }

    fn list<T>(&mut self, mut item: impl FnMut(&mut Self) -> AppResult<T>) -> AppResult<Vec<T>> {
        self.expect_sym('[')?;
        let mut out = vec![item(self)?];
        while self.peek() == Some(&Tok::Sym(',')) {
            self.next();
            out.push(item(self)?);
        }
        self.expect_sym(']')?;
        Ok(out)
    }

    fn expr(&mut self) -> AppResult<Composition> {
        let pos = self.pos();
        let name = match self.peek() {
            Some(Tok::Ident(s)) => s.clone(),
            _ => return Err(syntax(pos, "expected an operator or a component label")),
        };
        let is_call = matches!(self.toks.get(self.at + 1), Some((_, Tok::Sym('('))));
        if !is_call {
            return Ok(Composition::Leaf(self.label()?));
        }
        self.next();
        self.expect_sym('(')?;
        let node = match name.as_str() {
            "linear" | "sharpen" => {
                let beta = if name == "sharpen" {
                    self.expect_key("beta")?;
                    let b = self.number()?;
                    self.expect_sym(';')?;
                    Some(b)
                } else {
                    None
                };
                self.expect_key("w")?;
                let weights = self.list(Self::number)?;
                self.expect_sym(';')?;
                self.expect_key("c")?;
                let leaves = self.list(Self::label)?;
                if weights.len() != leaves.len() {
                    return Err(syntax(pos, "`w` and `c` differ in length"));
                }
                match beta {
                    Some(beta) => Composition::Sharpened { beta, weights, leaves },
                    None => Composition::Linear { weights, leaves },
                }
            }
            "hm" | "contrast" => {
                let mut operands = vec![self.expr()?];
                while self.peek() == Some(&Tok::Sym(',')) {
                    self.next();
                    operands.push(self.expr()?);
                }
                if operands.len() < 2 {
                    return Err(syntax(pos, &format!("`{name}` needs at least two operands")));
                }
                let op = if name == "hm" { Composition::harmonic } else { Composition::contrast };
                Composition::chain(op, operands)?
            }
            other => return Err(syntax(pos, &format!("unknown operator `{other}`"))),
        };
        self.expect_sym(')')?;
        Ok(node)
    }
}

pub fn parse_spec(text: &str) -> AppResult<ParsedSpec> {
    let toks = tokenize(text)?;
    let mut p = Parser { toks, at: 0, end: text.chars().count(), labels: Vec::new() };
    let composition = p.expr()?;
    if p.at < p.toks.len() {
        return Err(syntax(p.pos(), "trailing input"));
    }
    Ok(ParsedSpec { composition, labels: p.labels })
}

/// Canonical text of a tree; `parse_spec(format_spec(..))` gives it back.
pub fn format_spec(c: &Composition, labels: &[String]) -> String {
    let nums = |w: &[f64]| w.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
    let names = |l: &[usize]| l.iter().map(|&i| labels[i].as_str()).collect::<Vec<_>>().join(",");
    match c {
        Composition::Leaf(i) => labels[*i].clone(),
        Composition::Linear { weights, leaves } => format!("linear(w=[{}]; c=[{}])", nums(weights), names(leaves)),
        Composition::Sharpened { beta, weights, leaves } => {
            format!("sharpen(beta={beta:?}; w=[{}]; c=[{}])", nums(weights), names(leaves))
        }
        Composition::HarmonicMean(a, b) => format!("hm({}, {})", format_spec(a, labels), format_spec(b, labels)),
        Composition::Contrast(a, b) => format!("contrast({}, {})", format_spec(a, labels), format_spec(b, labels)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use flowmix_core::compose::Composition as C;

    #[test]
    fn linear_and_sharpen() {
        let p = parse_spec("linear(w=[0.3,0.7]; c=[shubert,diagonal])").unwrap();
        assert_eq!(p.labels, ["shubert", "diagonal"]);
        assert_eq!(p.composition, C::Linear { weights: vec![0.3, 0.7], leaves: vec![0, 1] });
        let p = parse_spec(" sharpen( beta = 32 ; w=[0.5, 0.5]; c=[a, b] ) ").unwrap();
        assert_eq!(p.composition, C::Sharpened { beta: 32.0, weights: vec![0.5, 0.5], leaves: vec![0, 1] });
    }

    #[test]
    fn nested_and_chained() {
        let p = parse_spec("contrast(hm(c1,c2), c3)").unwrap();
        assert_eq!(p.composition, C::contrast(C::harmonic(C::Leaf(0), C::Leaf(1)), C::Leaf(2)));
        let p = parse_spec("contrast(a, b, c)").unwrap();
        assert_eq!(p.composition, C::contrast(C::contrast(C::Leaf(0), C::Leaf(1)), C::Leaf(2)));
        let p = parse_spec("hm(a, linear(w=[1,2]; c=[b,a]))").unwrap();
        assert_eq!(p.labels, ["a", "b"]);
        assert_eq!(p.composition, C::harmonic(C::Leaf(0), C::Linear { weights: vec![1.0, 2.0], leaves: vec![1, 0] }));
        assert_eq!(parse_spec("solo").unwrap().composition, C::Leaf(0));
    }

    #[test]
    fn errors() {
        for bad in [
            "",
            "hm(a)",
            "linear(w=[1]; c=[a,b])",
            "linear(c=[a]; w=[1])",
            "frob(a,b)",
            "hm(a,b",
            "hm(a,b) x",
            "linear(w=[1e]; c=[a])",
            "hm(a,$)",
        ] {
            assert!(matches!(parse_spec(bad), Err(AppError::Usage(_))), "{bad}");
        }
    }

    #[test]
    fn format_round_trips() {
        for text in [
            "linear(w=[0.25,0.75]; c=[x,y])",
            "sharpen(beta=2.0; w=[0.5,0.5]; c=[a,b])",
            "contrast(hm(c1, c2), c3)",
        ] {
            let p = parse_spec(text).unwrap();
            let again = parse_spec(&format_spec(&p.composition, &p.labels)).unwrap();
            assert_eq!(again, p);
        }
    }
}
