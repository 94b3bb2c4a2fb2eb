use super::ast::{BinaryOp, Expr, Function, MacroKind, UnaryOp};
use super::{Expression, SyntaxError, Value};

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Int(i64),
    Float(f64),
    Str(String),
    Ident(String),
    Op(&'static str),
    Eof,
}

impl Token {
    fn describe(&self) -> String {
        match self {
            Token::Int(i) => format!("integer {i}"),
            Token::Float(x) => format!("float {x}"),
            Token::Str(s) => format!("string {s:?}"),
            Token::Ident(s) => format!("identifier `{s}`"),
            Token::Op(op) => format!("`{op}`"),
            Token::Eof => "end of input".to_string(),
        }
    }
}

// Longest operators first so that `<=` wins over `<`.
const OPERATORS: &[&str] = &[
    "&&", "||", "==", "!=", "<=", ">=", "<", ">", "+", "-", "*", "/", "%", "!", "(", ")", "[", "]",
    ",", ".",
];

fn tokenize(src: &str) -> Result<Vec<(usize, Token)>, SyntaxError> {
    let bytes = src.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        if c.is_ascii_digit() {
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            let mut is_float = false;
            if i + 1 < bytes.len() && bytes[i] == b'.' && bytes[i + 1].is_ascii_digit() {
                is_float = true;
                i += 1;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    is_float = true;
                    i = j;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text = &src[start..i];
            let token = if is_float {
                Token::Float(text.parse().map_err(|_| SyntaxError::new(start, "a valid float literal"))?)
            } else {
                Token::Int(
                    text.parse()
                        .map_err(|_| SyntaxError::new(start, "an integer literal within 64-bit range"))?,
                )
            };
            tokens.push((start, token));
            continue;
        }
        if c.is_ascii_alphabetic() || c == b'_' {
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            tokens.push((start, Token::Ident(src[start..i].to_string())));
            continue;
        }
        if c == b'"' || c == b'\'' {
            let quote = c as char;
            let mut out = String::new();
            let mut chars = src[i + 1..].char_indices();
            let mut closed = false;
            while let Some((off, ch)) = chars.next() {
                if ch == quote {
                    i = i + 1 + off + 1;
                    closed = true;
                    break;
                }
                if ch == '\\' {
                    match chars.next() {
                        Some((_, 'n')) => out.push('\n'),
                        Some((_, 't')) => out.push('\t'),
                        Some((_, 'r')) => out.push('\r'),
                        Some((_, e @ ('\\' | '"' | '\''))) => out.push(e),
                        Some((off, _)) => {
                            return Err(SyntaxError::new(i + 1 + off, "a valid escape sequence"))
                        }
                        None => break,
                    }
                } else {
                    out.push(ch);
                }
            }
            if !closed {
                return Err(SyntaxError::new(start, "a closing quote"));
            }
            tokens.push((start, Token::Str(out)));
            continue;
        }
        match OPERATORS.iter().find(|op| src[i..].starts_with(*op)) {
            Some(op) => {
                i += op.len();
                tokens.push((start, Token::Op(op)));
            }
            None => return Err(SyntaxError::new(start, "an operator, literal or identifier")),
        }
    }
    tokens.push((src.len(), Token::Eof));
    Ok(tokens)
}

struct Parser {
    tokens: Vec<(usize, Token)>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.tokens[self.pos].1
    }

    fn offset(&self) -> usize {
        self.tokens[self.pos].0
    }

    fn advance(&mut self) -> Token {
        let tok = self.tokens[self.pos].1.clone();
        if self.pos + 1 < self.tokens.len() {
            self.pos += 1;
        }
        tok
    }

    fn eat_op(&mut self, op: &str) -> bool {
        if matches!(self.peek(), Token::Op(o) if *o == op) {
            self.advance();
            true
        } else {
            false
        }
    }

    fn expect_op(&mut self, op: &str) -> Result<(), SyntaxError> {
        if self.eat_op(op) {
            Ok(())
        } else {
            Err(self.error(&format!("`{op}`")))
        }
    }

    fn error(&self, expected: &str) -> SyntaxError {
        SyntaxError::new(self.offset(), format!("{expected}, found {}", self.peek().describe()))
    }

    fn parse_or(&mut self) -> Result<Expr, SyntaxError> {
        let mut lhs = self.parse_and()?;
        while self.eat_op("||") {
            lhs = Expr::binary(BinaryOp::Or, lhs, self.parse_and()?);
        }
        Ok(lhs)
    }

    fn parse_and(&mut self) -> Result<Expr, SyntaxError> {
        let mut lhs = self.parse_comparison()?;
        while self.eat_op("&&") {
            lhs = Expr::binary(BinaryOp::And, lhs, self.parse_comparison()?);
        }
        Ok(lhs)
    }

    fn parse_comparison(&mut self) -> Result<Expr, SyntaxError> {
        let mut lhs = self.parse_additive()?;
        loop {
            let op = match self.peek() {
                Token::Op("<") => BinaryOp::Lt,
                Token::Op("<=") => BinaryOp::Le,
                Token::Op(">") => BinaryOp::Gt,
                Token::Op(">=") => BinaryOp::Ge,
                Token::Op("==") => BinaryOp::Eq,
                Token::Op("!=") => BinaryOp::Ne,
                _ => return Ok(lhs),
            };
            self.advance();
            lhs = Expr::binary(op, lhs, self.parse_additive()?);
        }
    }

    fn parse_additive(&mut self) -> Result<Expr, SyntaxError> {
        let mut lhs = self.parse_multiplicative()?;
        loop {
            let op = match self.peek() {
                Token::Op("+") => BinaryOp::Add,
                Token::Op("-") => BinaryOp::Sub,
                _ => return Ok(lhs),
            };
            self.advance();
            lhs = Expr::binary(op, lhs, self.parse_multiplicative()?);
        }
    }

    fn parse_multiplicative(&mut self) -> Result<Expr, SyntaxError> {
        let mut lhs = self.parse_unary()?;
        loop {
            let op = match self.peek() {
                Token::Op("*") => BinaryOp::Mul,
                Token::Op("/") => BinaryOp::Div,
                Token::Op("%") => BinaryOp::Rem,
                _ => return Ok(lhs),
            };
            self.advance();
            lhs = Expr::binary(op, lhs, self.parse_unary()?);
        }
    }

    fn parse_unary(&mut self) -> Result<Expr, SyntaxError> {
        if self.eat_op("!") {
            return Ok(Expr::Unary(UnaryOp::Not, Box::new(self.parse_unary()?)));
        }
        if self.eat_op("-") {
            return Ok(Expr::Unary(UnaryOp::Neg, Box::new(self.parse_unary()?)));
        }
        self.parse_postfix()
    }

    fn parse_postfix(&mut self) -> Result<Expr, SyntaxError> {
        let mut expr = self.parse_primary()?;
        while self.eat_op(".") {
            let at = self.offset();
            let name = match self.advance() {
                Token::Ident(name) => name,
                other => {
                    return Err(SyntaxError::new(
                        at,
                        format!("a member name after `.`, found {}", other.describe()),
                    ))
                }
            };
            if !self.eat_op("(") {
                expr = Expr::Member(Box::new(expr), name);
                continue;
            }
            if let Some(kind) = MacroKind::from_name(&name) {
                let binder_at = self.offset();
                let binder = match self.advance() {
                    Token::Ident(b) => b,
                    other => {
                        return Err(SyntaxError::new(
                            binder_at,
                            format!("a binder variable, found {}", other.describe()),
                        ))
                    }
                };
                self.expect_op(",")?;
                let body = self.parse_or()?;
                self.expect_op(")")?;
                expr = Expr::Macro { kind, target: Box::new(expr), binder, body: Box::new(body) };
            } else if name == "size" {
                self.expect_op(")")?;
                expr = Expr::Call(Function::Size, vec![expr]);
            } else {
                return Err(SyntaxError::new(
                    at,
                    "one of the methods map, filter, contains, exists_one, size",
                ));
            }
        }
        Ok(expr)
    }

    fn parse_primary(&mut self) -> Result<Expr, SyntaxError> {
        let at = self.offset();
        match self.advance() {
            Token::Int(i) => Ok(Expr::Literal(Value::Int(i))),
            Token::Float(x) => Ok(Expr::Literal(Value::Float(x))),
            Token::Str(s) => Ok(Expr::Literal(Value::String(s))),
            Token::Ident(name) => match name.as_str() {
                "true" => Ok(Expr::Literal(Value::Bool(true))),
                "false" => Ok(Expr::Literal(Value::Bool(false))),
                "null" => Ok(Expr::Literal(Value::Null)),
                _ if self.eat_op("(") => {
                    let function = Function::from_name(&name)
                        .ok_or_else(|| SyntaxError::new(at, "one of the functions size, rand"))?;
                    let mut args = Vec::new();
                    if !self.eat_op(")") {
                        loop {
                            args.push(self.parse_or()?);
                            if self.eat_op(")") {
                                break;
                            }
                            self.expect_op(",")?;
                        }
                    }
                    let arity = match function {
                        Function::Size => 1,
                        Function::Rand => 0,
                    };
                    if args.len() != arity {
                        return Err(SyntaxError::new(
                            at,
                            format!("{arity} argument(s) to `{name}`, found {}", args.len()),
                        ));
                    }
                    Ok(Expr::Call(function, args))
                }
                _ => Ok(Expr::Var(name)),
            },
            Token::Op("(") => {
                let inner = self.parse_or()?;
                self.expect_op(")")?;
                Ok(inner)
            }
            Token::Op("[") => {
                let mut items = Vec::new();
                if !self.eat_op("]") {
                    loop {
                        items.push(self.parse_or()?);
                        if self.eat_op("]") {
                            break;
                        }
                        self.expect_op(",")?;
                    }
                }
                Ok(Expr::List(items))
            }
            other => Err(SyntaxError::new(at, format!("an expression, found {}", other.describe()))),
        }
    }
}

/// Parse expression source text.
pub fn parse_expression(source: &str) -> Result<Expression, SyntaxError> {
    let tokens = tokenize(source)?;
    let mut parser = Parser { tokens, pos: 0 };
    let root = parser.parse_or()?;
    if *parser.peek() != Token::Eof {
        return Err(parser.error("an operator or end of input"));
    }
    Ok(Expression { source: source.to_string(), root })
}
