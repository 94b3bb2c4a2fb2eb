use std::fmt;

use super::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Not,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Rem,
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
    Ne,
    And,
    Or,
}

impl BinaryOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinaryOp::Add => "+",
            BinaryOp::Sub => "-",
            BinaryOp::Mul => "*",
            BinaryOp::Div => "/",
            BinaryOp::Rem => "%",
            BinaryOp::Lt => "<",
            BinaryOp::Le => "<=",
            BinaryOp::Gt => ">",
            BinaryOp::Ge => ">=",
            BinaryOp::Eq => "==",
            BinaryOp::Ne => "!=",
            BinaryOp::And => "&&",
            BinaryOp::Or => "||",
        }
    }
}

/// List comprehension macros. Each binds one variable per element.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MacroKind {
    Map,
    Filter,
    Contains,
    ExistsOne,
}

impl MacroKind {
    pub fn from_name(name: &str) -> Option<MacroKind> {
        match name {
            "map" => Some(MacroKind::Map),
            "filter" => Some(MacroKind::Filter),
            "contains" => Some(MacroKind::Contains),
            "exists_one" => Some(MacroKind::ExistsOne),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MacroKind::Map => "map",
            MacroKind::Filter => "filter",
            MacroKind::Contains => "contains",
            MacroKind::ExistsOne => "exists_one",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Function {
    Size,
    Rand,
}

impl Function {
    pub fn from_name(name: &str) -> Option<Function> {
        match name {
            "size" => Some(Function::Size),
            "rand" => Some(Function::Rand),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Literal(Value),
    Var(String),
    List(Vec<Expr>),
    Unary(UnaryOp, Box<Expr>),
    Binary(BinaryOp, Box<Expr>, Box<Expr>),
    Member(Box<Expr>, String),
    Macro {
        kind: MacroKind,
        target: Box<Expr>,
        binder: String,
        body: Box<Expr>,
    },
    Call(Function, Vec<Expr>),
}

impl Expr {
    pub fn binary(op: BinaryOp, lhs: Expr, rhs: Expr) -> Expr {
        Expr::Binary(op, Box::new(lhs), Box::new(rhs))
    }

    /// Free variable names, in first-occurrence order.
    pub fn free_variables(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.collect_free(&mut Vec::new(), &mut out);
        out
    }

    fn collect_free(&self, bound: &mut Vec<String>, out: &mut Vec<String>) {
        match self {
            Expr::Literal(_) => {}
            Expr::Var(name) => {
                if !bound.contains(name) && !out.contains(name) {
                    out.push(name.clone());
                }
            }
            Expr::List(items) | Expr::Call(_, items) => {
                items.iter().for_each(|e| e.collect_free(bound, out))
            }
            Expr::Unary(_, e) | Expr::Member(e, _) => e.collect_free(bound, out),
            Expr::Binary(_, l, r) => {
                l.collect_free(bound, out);
                r.collect_free(bound, out);
            }
            Expr::Macro { target, binder, body, .. } => {
                target.collect_free(bound, out);
                bound.push(binder.clone());
                body.collect_free(bound, out);
                bound.pop();
            }
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Literal(Value::String(s)) => write!(f, "{s:?}"),
            Expr::Literal(v) => write!(f, "{v}"),
            Expr::Var(name) => f.write_str(name),
            Expr::List(items) => {
                f.write_str("[")?;
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{item}")?;
                }
                f.write_str("]")
            }
            Expr::Unary(UnaryOp::Neg, e) => write!(f, "-({e})"),
            Expr::Unary(UnaryOp::Not, e) => write!(f, "!({e})"),
            Expr::Binary(op, l, r) => write!(f, "({l} {} {r})", op.symbol()),
            Expr::Member(e, field) => write!(f, "{e}.{field}"),
            Expr::Macro { kind, target, binder, body } => {
                write!(f, "{target}.{}({binder}, {body})", kind.name())
            }
            Expr::Call(Function::Size, args) => write!(f, "size({})", args.first().map(|a| a.to_string()).unwrap_or_default()),
            Expr::Call(Function::Rand, _) => f.write_str("rand()"),
        }
    }
}
